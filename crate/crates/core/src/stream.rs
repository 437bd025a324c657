//! Simulated call transport and the online detector.
//!
//! A stream is a 16-byte header followed by frames:
//!
//! ```text
//! header  "EBLS" | version u16 | latent_dim u16 | session_id u64
//! frame   kind u8 | session_id u64 | t u32 | n u32 | n × f64 | crc32 (over the frame)
//! ```
//!
//! All integers and floats are little-endian. Kinds: 1 handshake (payload is
//! the embedded reference), 2 latent, 3 end (empty payload).

use std::collections::VecDeque;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::ebl::EblPair;
use crate::error::{Error, Result};
use crate::numerics::Mat64;
use crate::temporal::{yaw_from_normal, FrameScore, FusionModel, SimilarityWindow};
use crate::trainer::{pose_deviation_deg, NormalSource};
use crate::world::{LatentFrame, PoseState, ReferencePortrait, Session};

pub const STREAM_MAGIC: &str = "EBLS";
pub const STREAM_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 16;
const FRAME_FIXED: usize = 1 + 8 + 4 + 4;
const MAX_PAYLOAD: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameKind {
    Handshake,
    Latent,
    End,
}

impl FrameKind {
    fn code(self) -> u8 {
        match self {
            FrameKind::Handshake => 1,
            FrameKind::Latent => 2,
            FrameKind::End => 3,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            1 => Ok(FrameKind::Handshake),
            2 => Ok(FrameKind::Latent),
            3 => Ok(FrameKind::End),
            _ => Err(Error::Malformed(format!("frame kind {c}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireFrame {
    pub kind: FrameKind,
    pub session_id: u64,
    pub t: u32,
    pub payload: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamHeader {
    pub version: u16,
    pub latent_dim: u16,
    pub session_id: u64,
}

impl StreamHeader {
    pub fn new(latent_dim: usize, session_id: u64) -> Result<Self> {
        let latent_dim = u16::try_from(latent_dim).map_err(|_| Error::Malformed(format!("latent_dim {latent_dim} > u16")))?;
        Ok(Self { version: STREAM_VERSION, latent_dim, session_id })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(STREAM_MAGIC.as_bytes());
        w.u16(self.version);
        w.u16(self.latent_dim);
        w.u64(self.session_id);
        w.finish()
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf, "stream header");
        r.magic(STREAM_MAGIC)?;
        let version = r.u16()?;
        if version != STREAM_VERSION {
            return Err(Error::BadVersion(version));
        }
        Ok(Self { version, latent_dim: r.u16()?, session_id: r.u64()? })
    }
}

pub fn encode_frame(f: &WireFrame) -> Vec<u8> {
    let mut w = Writer::new();
    w.u8(f.kind.code());
    w.u64(f.session_id);
    w.u32(f.t);
    w.u32(f.payload.len() as u32);
    w.f64s(&f.payload);
    w.finish_with_crc()
}

/// Decodes the frame at the start of `buf`; returns it and its byte length.
pub fn decode_frame(buf: &[u8]) -> Result<(WireFrame, usize)> {
    if buf.len() < FRAME_FIXED {
        return Err(Error::Truncated("frame header"));
    }
    let n = u32::from_le_bytes(buf[13..17].try_into().unwrap()) as usize;
    if n > MAX_PAYLOAD {
        return Err(Error::Malformed(format!("payload of {n} values")));
    }
    let total = FRAME_FIXED + 8 * n + 4;
    if buf.len() < total {
        return Err(Error::Truncated("frame body"));
    }
    let mut r = Reader::with_crc(&buf[..total], "frame")?;
    let kind = FrameKind::from_code(r.u8()?)?;
    let session_id = r.u64()?;
    let t = r.u32()?;
    r.u32()?;
    let payload = r.f64s(n)?;
    Ok((WireFrame { kind, session_id, t, payload }, total))
}

/// The wire form of a session: handshake with the reference, one latent
/// frame per `z_t`, then end.
pub fn session_to_frames(session: &Session, session_id: u64) -> Vec<WireFrame> {
    let mut out = Vec::with_capacity(session.frames.len() + 2);
    out.push(WireFrame {
        kind: FrameKind::Handshake,
        session_id,
        t: 0,
        payload: session.reference.embedded.to_vec(),
    });
    out.extend(session.frames.iter().map(|f| WireFrame {
        kind: FrameKind::Latent,
        session_id,
        t: f.t as u32,
        payload: f.z.to_vec(),
    }));
    out.push(WireFrame { kind: FrameKind::End, session_id, t: 0, payload: Vec::new() });
    out
}

/// Checks the stream invariants: one leading handshake, strictly
/// increasing latent `t`, payload widths, matching session ids.
pub fn validate_frames(header: &StreamHeader, frames: &[WireFrame]) -> Result<()> {
    let mut v = Validator::new(*header);
    frames.iter().try_for_each(|f| v.accept(f))
}

struct Validator {
    header: StreamHeader,
    seen_handshake: bool,
    last_t: Option<u32>,
    ended: bool,
}

impl Validator {
    fn new(header: StreamHeader) -> Self {
        Self { header, seen_handshake: false, last_t: None, ended: false }
    }

    fn accept(&mut self, f: &WireFrame) -> Result<()> {
        if self.ended {
            return Err(Error::Malformed("frame after end".into()));
        }
        if f.session_id != self.header.session_id {
            return Err(Error::Malformed(format!("session id {} in stream {}", f.session_id, self.header.session_id)));
        }
        let dim = self.header.latent_dim as usize;
        match f.kind {
            FrameKind::Handshake => {
                if self.seen_handshake {
                    return Err(Error::Malformed("second handshake".into()));
                }
                if f.payload.len() != dim {
                    return Err(Error::LengthMismatch { expected: dim, actual: f.payload.len() });
                }
                self.seen_handshake = true;
            }
            FrameKind::Latent => {
                if !self.seen_handshake {
                    return Err(Error::NoHandshake);
                }
                if f.payload.len() != dim {
                    return Err(Error::LengthMismatch { expected: dim, actual: f.payload.len() });
                }
                if self.last_t.is_some_and(|p| f.t <= p) {
                    return Err(Error::Malformed(format!("latent t {} not increasing", f.t)));
                }
                self.last_t = Some(f.t);
            }
            FrameKind::End => {
                if !self.seen_handshake {
                    return Err(Error::NoHandshake);
                }
                self.ended = true;
            }
        }
        Ok(())
    }
}

pub fn write_stream<W: Write>(header: &StreamHeader, frames: &[WireFrame], mut out: W) -> Result<()> {
    validate_frames(header, frames)?;
    out.write_all(&header.encode())?;
    for f in frames {
        out.write_all(&encode_frame(f))?;
    }
    out.flush()?;
    Ok(())
}

/// Incremental reader: one frame in memory at a time, invariants checked
/// as frames arrive.
pub struct StreamReader<R: Read> {
    inner: R,
    pub header: StreamHeader,
    validator: Validator,
    done: bool,
}

impl<R: Read> StreamReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let mut buf = [0u8; HEADER_LEN];
        read_exact_or_truncated(&mut inner, &mut buf, "stream header")?;
        let header = StreamHeader::decode(&buf)?;
        Ok(Self { inner, header, validator: Validator::new(header), done: false })
    }

    fn read_frame(&mut self) -> Result<Option<WireFrame>> {
        let mut head = [0u8; FRAME_FIXED];
        let mut got = 0;
        while got < head.len() {
            let n = self.inner.read(&mut head[got..])?;
            if n == 0 {
                if got == 0 {
                    return Ok(None);
                }
                return Err(Error::Truncated("frame header"));
            }
            got += n;
        }
        let n = u32::from_le_bytes(head[13..17].try_into().unwrap()) as usize;
        if n > MAX_PAYLOAD {
            return Err(Error::Malformed(format!("payload of {n} values")));
        }
        let mut buf = head.to_vec();
        buf.resize(FRAME_FIXED + 8 * n + 4, 0);
        read_exact_or_truncated(&mut self.inner, &mut buf[FRAME_FIXED..], "frame body")?;
        let (f, _) = decode_frame(&buf)?;
        self.validator.accept(&f)?;
        Ok(Some(f))
    }
}

fn read_exact_or_truncated<R: Read>(r: &mut R, buf: &mut [u8], what: &'static str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated(what),
        _ => Error::Io(e),
    })
}

impl<R: Read> Iterator for StreamReader<R> {
    type Item = Result<WireFrame>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.read_frame() {
            Ok(Some(f)) => {
                if f.kind == FrameKind::End {
                    self.done = true;
                }
                Some(Ok(f))
            }
            Ok(None) => {
                self.done = true;
                if self.validator.ended {
                    None
                } else {
                    Some(Err(Error::Truncated("stream without end frame")))
                }
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

/// Replaces the handshake reference with `impostor`'s; latents untouched.
pub fn inject_attack(mut frames: Vec<WireFrame>, impostor: &ReferencePortrait) -> Result<Vec<WireFrame>> {
    let hs = frames.iter_mut().find(|f| f.kind == FrameKind::Handshake).ok_or(Error::NoHandshake)?;
    hs.payload = impostor.embedded.to_vec();
    Ok(frames)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Authorized,
    Puppeteered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionVerdict {
    /// `t` of the window's first kept frame.
    pub window_start: usize,
    pub probability: f64,
    pub decision: Decision,
    /// Frames dropped by the pose filter inside the window's span.
    pub frames_excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub stride: usize,
    pub threshold: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { stride: 5, threshold: 0.5 }
    }
}

struct HandshakeState {
    reference: ReferencePortrait,
    embedded: Vec<f64>,
}

/// Single-session online detector. Keeps per-frame scores, never latents,
/// and at most `W` of them plus a skip counter for strides longer than `W`.
pub struct StreamDetector<'a> {
    ebl: &'a EblPair,
    fusion: &'a FusionModel,
    cfg: DetectorConfig,
    handshake: Option<HandshakeState>,
    buffer: VecDeque<FrameScore>,
    skip: usize,
    verdicts_emitted: usize,
    kept_total: usize,
    peak_buffer: usize,
}

impl<'a> StreamDetector<'a> {
    pub fn new(ebl: &'a EblPair, fusion: &'a FusionModel, cfg: DetectorConfig) -> Result<Self> {
        if cfg.stride == 0 {
            return Err(Error::ConfigInvalid("stride must be ≥ 1".into()));
        }
        Ok(Self {
            ebl,
            fusion,
            cfg,
            handshake: None,
            buffer: VecDeque::with_capacity(fusion.window + 1),
            skip: 0,
            verdicts_emitted: 0,
            kept_total: 0,
            peak_buffer: 0,
        })
    }

    /// Largest number of frames held at once.
    pub fn peak_buffered(&self) -> usize {
        self.peak_buffer
    }

    fn score_frame(&self, hs: &HandshakeState, t: usize, z: &[f64]) -> Result<FrameScore> {
        let frame = LatentFrame {
            z: crate::numerics::Vec64::new(z.to_vec())?,
            identity: 0,
            pose: PoseState::neutral(1),
            t,
        };
        let kept = !self.fusion.exclude_poses
            || pose_deviation_deg(&frame, &hs.reference, NormalSource::Regressor(&self.fusion.regressor))
                .is_some_and(|a| a <= self.fusion.pose_threshold_deg + 1e-9);
        let zs = Mat64::from_vec(1, z.len(), z.to_vec())?;
        let e = self.ebl.h1.forward(&zs)?;
        let phi = e.row(0).iter().zip(&hs.embedded).map(|(a, b)| a * b).sum::<f64>().clamp(-1.0, 1.0);
        let yaw = if self.fusion.lstm.input_dim == 2 {
            yaw_from_normal(Some(self.fusion.regressor.predict(&zs).row(0)))
        } else {
            0.0
        };
        Ok(FrameScore { t, phi, yaw, kept })
    }

    /// Feeds one frame; returns the verdicts it completes (zero or one).
    pub fn push(&mut self, frame: &WireFrame) -> Result<Option<DetectionVerdict>> {
        match frame.kind {
            FrameKind::Handshake => {
                let embedded = crate::numerics::Vec64::new(frame.payload.clone())?;
                let reference = ReferencePortrait { identity: 0, embedded: embedded.clone(), neutral: true };
                let h2 = self.ebl.h2.embed(&embedded)?;
                self.handshake = Some(HandshakeState { reference, embedded: h2 });
                Ok(None)
            }
            FrameKind::End => Ok(None),
            FrameKind::Latent => {
                let hs = self.handshake.as_ref().ok_or(Error::NoHandshake)?;
                let s = self.score_frame(hs, frame.t as usize, &frame.payload)?;
                if !s.kept {
                    return Ok(None);
                }
                self.kept_total += 1;
                if self.skip > 0 {
                    self.skip -= 1;
                    return Ok(None);
                }
                self.buffer.push_back(s);
                self.peak_buffer = self.peak_buffer.max(self.buffer.len());
                if self.buffer.len() < self.fusion.window {
                    return Ok(None);
                }
                let kept: Vec<FrameScore> = self.buffer.iter().copied().collect();
                let window: SimilarityWindow = self.fusion.window_at(&kept, 0, 0);
                let probability = self.fusion.lstm.forward(&window)?;
                let first = kept[0].t;
                let last = kept[kept.len() - 1].t;
                let verdict = DetectionVerdict {
                    window_start: first,
                    probability,
                    decision: if probability > self.cfg.threshold { Decision::Puppeteered } else { Decision::Authorized },
                    frames_excluded: last - first + 1 - self.fusion.window,
                };
                let drop = self.cfg.stride.min(self.buffer.len());
                self.buffer.drain(..drop);
                self.skip = self.cfg.stride - drop;
                self.verdicts_emitted += 1;
                Ok(Some(verdict))
            }
        }
    }

    /// Ends the session; fails if not a single window was completed.
    pub fn finish(&self) -> Result<()> {
        if self.verdicts_emitted == 0 {
            return Err(Error::InsufficientFrames { needed: self.fusion.window, available: self.kept_total });
        }
        Ok(())
    }
}

/// Runs the detector over a frame sequence.
pub fn detect_stream<I>(frames: I, ebl: &EblPair, fusion: &FusionModel, cfg: &DetectorConfig) -> Result<Vec<DetectionVerdict>>
where
    I: IntoIterator<Item = Result<WireFrame>>,
{
    let mut det = StreamDetector::new(ebl, fusion, cfg.clone())?;
    let mut out = Vec::new();
    for f in frames {
        if let Some(v) = det.push(&f?)? {
            out.push(v);
        }
    }
    det.finish()?;
    Ok(out)
}

/// Ground truth written next to a stream file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamMeta {
    pub session_id: u64,
    pub driving_id: usize,
    pub target_id: usize,
    pub label: u8,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub session_id: u64,
    pub windows: usize,
    pub mean_probability: f64,
    pub decision: Decision,
    pub verdicts: Vec<DetectionVerdict>,
}

impl DetectionReport {
    pub fn new(session_id: u64, verdicts: Vec<DetectionVerdict>, threshold: f64) -> Self {
        let mean = verdicts.iter().map(|v| v.probability).sum::<f64>() / verdicts.len().max(1) as f64;
        Self {
            session_id,
            windows: verdicts.len(),
            mean_probability: mean,
            decision: if mean > threshold { Decision::Puppeteered } else { Decision::Authorized },
            verdicts,
        }
    }
}
