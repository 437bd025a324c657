//! Temporal fusion: a two-layer LSTM over windows of per-frame biometric
//! similarities, ending in a linear → sigmoid puppeteering probability.
//!
//! Frames that fail the pose filter are dropped before windowing, so a window
//! is always `W` consecutive *kept* frames of one session.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::ebl::{EblPair, Linear};
use crate::error::{Error, Result};
use crate::numerics::{gemm, Mat64, Rng, Trans};
use crate::optim::{Adam, AdamConfig};
use crate::regressor::{train_normal_regressor, NormalRegressor, RegressorConfig, RegressorReport};
use crate::trainer::{keep_mask, NormalSource};
use crate::world::{LatentFrame, PoseWalk, ReferencePortrait, Session, World};

const CKPT_MAGIC: &str = "EBLL";
const CKPT_VERSION: u16 = 1;
pub const BCE_CLAMP: f64 = 1e-12;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `−t·ln y − (1−t)·ln(1−y)` with `y` clamped to `[1e-12, 1−1e-12]`.
pub fn bce_loss(y: f64, t: f64) -> f64 {
    let y = y.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    -t * y.ln() - (1.0 - t) * (1.0 - y).ln()
}

/// `dL/dy`; zero where the clamp is active.
pub fn bce_grad(y: f64, t: f64) -> f64 {
    if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&y) {
        return 0.0;
    }
    -t / y + (1.0 - t) / (1.0 - y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer {
    /// `4H × in`, gate blocks in order input, forget, cell, output.
    pub w_ih: Mat64,
    /// `4H × H`.
    pub w_hh: Mat64,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmModel {
    pub input_dim: usize,
    pub hidden: usize,
    pub layers: Vec<LstmLayer>,
    pub head: Linear,
    /// Applied to the outputs of every layer but the last, train mode only.
    pub dropout: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityWindow {
    pub phis: Vec<f64>,
    /// Estimated yaw / 90 per frame, for two-input models.
    pub yaws: Option<Vec<f64>>,
    pub label: u8,
}

impl SimilarityWindow {
    pub fn len(&self) -> usize {
        self.phis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phis.is_empty()
    }

    fn input(&self, t: usize, dim: usize) -> [f64; 2] {
        match (&self.yaws, dim) {
            (Some(y), 2) => [self.phis[t], y[t]],
            _ => [self.phis[t], 0.0],
        }
    }
}

struct LayerCache {
    inputs: Vec<Mat64>,
    h: Vec<Mat64>,
    c: Vec<Mat64>,
    /// Post-activation gates `[i f g o]` per step.
    gates: Vec<Mat64>,
    tanh_c: Vec<Mat64>,
}

pub struct LstmCache {
    layers: Vec<LayerCache>,
    masks: Vec<Vec<Mat64>>,
    pub y: Vec<f64>,
}

impl LstmModel {
    pub fn new(input_dim: usize, hidden: usize, num_layers: usize, dropout: f64, rng: &mut Rng) -> Result<Self> {
        if !(1..=2).contains(&input_dim) || hidden == 0 || num_layers == 0 {
            return Err(Error::BadArchitecture(format!(
                "lstm input {input_dim}, hidden {hidden}, layers {num_layers}"
            )));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::ConfigInvalid(format!("lstm dropout {dropout} outside [0, 1)")));
        }
        let k = 1.0 / (hidden as f64).sqrt();
        let mut u = |r: usize, c: usize| Mat64::from_fn(r, c, |_, _| rng.uniform_range(-k, k));
        let mut layers = Vec::new();
        for l in 0..num_layers {
            let inp = if l == 0 { input_dim } else { hidden };
            let w_ih = u(4 * hidden, inp);
            let w_hh = u(4 * hidden, hidden);
            let b = u(1, 4 * hidden).data().to_vec();
            layers.push(LstmLayer { w_ih, w_hh, b });
        }
        let head = Linear { w: u(1, hidden), b: vec![0.0] };
        Ok(Self { input_dim, hidden, layers, head, dropout })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.layers {
            out.extend([l.w_ih.data(), l.w_hh.data(), &l.b[..]]);
        }
        out.extend([self.head.w.data(), &self.head.b[..]]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.layers {
            out.push(l.w_ih.data_mut());
            out.push(l.w_hh.data_mut());
            out.push(&mut l.b[..]);
        }
        out.push(self.head.w.data_mut());
        out.push(&mut self.head.b[..]);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn check(&self, windows: &[&SimilarityWindow]) -> Result<usize> {
        let w = windows.first().map_or(0, |w| w.len());
        if w == 0 {
            return Err(Error::LengthMismatch { expected: 1, actual: 0 });
        }
        for win in windows {
            if win.len() != w {
                return Err(Error::LengthMismatch { expected: w, actual: win.len() });
            }
            if self.input_dim == 2 && win.yaws.as_ref().map_or(true, |y| y.len() != w) {
                return Err(Error::ConfigInvalid("two-input lstm needs a yaw per frame".into()));
            }
        }
        Ok(w)
    }

    fn run(&self, windows: &[&SimilarityWindow], mut dropout: Option<&mut Rng>) -> Result<LstmCache> {
        let steps = self.check(windows)?;
        let n = windows.len();
        let hd = self.hidden;
        let mut seq: Vec<Mat64> = (0..steps)
            .map(|t| Mat64::from_fn(n, self.input_dim, |r, c| windows[r].input(t, self.input_dim)[c]))
            .collect();
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut masks = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            let mut lc = LayerCache { inputs: seq, h: Vec::new(), c: Vec::new(), gates: Vec::new(), tanh_c: Vec::new() };
            let mut h = Mat64::zeros(n, hd);
            let mut c = Mat64::zeros(n, hd);
            for t in 0..steps {
                let mut a = Mat64::zeros(n, 4 * hd);
                for r in 0..n {
                    a.row_mut(r).copy_from_slice(&layer.b);
                }
                gemm(1.0, &lc.inputs[t], Trans::N, &layer.w_ih, Trans::T, 1.0, &mut a);
                gemm(1.0, &h, Trans::N, &layer.w_hh, Trans::T, 1.0, &mut a);
                let mut c_new = Mat64::zeros(n, hd);
                let mut h_new = Mat64::zeros(n, hd);
                let mut tc = Mat64::zeros(n, hd);
                for r in 0..n {
                    let row = a.row_mut(r);
                    for j in 0..hd {
                        row[j] = sigmoid(row[j]);
                        row[hd + j] = sigmoid(row[hd + j]);
                        row[2 * hd + j] = row[2 * hd + j].tanh();
                        row[3 * hd + j] = sigmoid(row[3 * hd + j]);
                    }
                    for j in 0..hd {
                        let cv = row[hd + j] * c.get(r, j) + row[j] * row[2 * hd + j];
                        let th = cv.tanh();
                        c_new.set(r, j, cv);
                        tc.set(r, j, th);
                        h_new.set(r, j, row[3 * hd + j] * th);
                    }
                }
                lc.gates.push(a);
                lc.c.push(c_new.clone());
                lc.tanh_c.push(tc);
                lc.h.push(h_new.clone());
                h = h_new;
                c = c_new;
            }
            let last = li + 1 == self.layers.len();
            seq = lc.h.clone();
            if !last {
                if let Some(rng) = dropout.as_deref_mut() {
                    let keep = 1.0 - self.dropout;
                    let mut layer_masks = Vec::with_capacity(steps);
                    for x in seq.iter_mut() {
                        let m = Mat64::from_fn(n, hd, |_, _| if rng.uniform() < keep { 1.0 / keep } else { 0.0 });
                        x.data_mut().iter_mut().zip(m.data()).for_each(|(v, k)| *v *= k);
                        layer_masks.push(m);
                    }
                    masks.push(layer_masks);
                }
            }
            caches.push(lc);
        }
        let top = caches.last().unwrap().h.last().unwrap();
        let y = (0..n)
            .map(|r| sigmoid(self.head.b[0] + top.row(r).iter().zip(self.head.w.data()).map(|(a, b)| a * b).sum::<f64>()))
            .collect();
        Ok(LstmCache { layers: caches, masks, y })
    }

    /// Eval-mode probabilities for a batch of equal-length windows.
    pub fn forward_batch(&self, windows: &[&SimilarityWindow]) -> Result<Vec<f64>> {
        Ok(self.run(windows, None)?.y)
    }

    pub fn forward(&self, window: &SimilarityWindow) -> Result<f64> {
        Ok(self.run(&[window], None)?.y[0])
    }

    /// Train-mode forward; `rng` drives the between-layer dropout masks.
    pub fn forward_train(&self, windows: &[&SimilarityWindow], rng: Option<&mut Rng>) -> Result<LstmCache> {
        self.run(windows, rng.filter(|_| self.dropout > 0.0))
    }

    /// Accumulates `dL/dθ` into `grad` given `dL/dy` per window.
    pub fn backward(&self, cache: &LstmCache, dy: &[f64], grad: &mut LstmModel) {
        let hd = self.hidden;
        let n = dy.len();
        let top = cache.layers.last().unwrap();
        let steps = top.h.len();
        let h_last = &top.h[steps - 1];
        let mut dh_ext: Vec<Mat64> = (0..steps).map(|_| Mat64::zeros(n, hd)).collect();
        for r in 0..n {
            let y = cache.y[r];
            let ds = dy[r] * y * (1.0 - y);
            grad.head.b[0] += ds;
            for j in 0..hd {
                grad.head.w.data_mut()[j] += ds * h_last.get(r, j);
                dh_ext[steps - 1].set(r, j, ds * self.head.w.data()[j]);
            }
        }
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let lc = &cache.layers[li];
            let g = &mut grad.layers[li];
            let in_dim = layer.w_ih.cols();
            let mut dx: Vec<Mat64> = (0..steps).map(|_| Mat64::zeros(n, in_dim)).collect();
            let mut dh_next = Mat64::zeros(n, hd);
            let mut dc_next = Mat64::zeros(n, hd);
            for t in (0..steps).rev() {
                let gates = &lc.gates[t];
                let mut da = Mat64::zeros(n, 4 * hd);
                for r in 0..n {
                    let gr = gates.row(r);
                    for j in 0..hd {
                        let (i, f, gg, o) = (gr[j], gr[hd + j], gr[2 * hd + j], gr[3 * hd + j]);
                        let tc = lc.tanh_c[t].get(r, j);
                        let c_prev = if t == 0 { 0.0 } else { lc.c[t - 1].get(r, j) };
                        let dh = dh_ext[t].get(r, j) + dh_next.get(r, j);
                        let d_o = dh * tc;
                        let dc = dh * o * (1.0 - tc * tc) + dc_next.get(r, j);
                        dc_next.set(r, j, dc * f);
                        let row = da.row_mut(r);
                        row[j] = dc * gg * i * (1.0 - i);
                        row[hd + j] = dc * c_prev * f * (1.0 - f);
                        row[2 * hd + j] = dc * i * (1.0 - gg * gg);
                        row[3 * hd + j] = d_o * o * (1.0 - o);
                    }
                }
                gemm(1.0, &da, Trans::T, &lc.inputs[t], Trans::N, 1.0, &mut g.w_ih);
                if t > 0 {
                    gemm(1.0, &da, Trans::T, &lc.h[t - 1], Trans::N, 1.0, &mut g.w_hh);
                }
                for r in 0..n {
                    g.b.iter_mut().zip(da.row(r)).for_each(|(b, d)| *b += d);
                }
                gemm(1.0, &da, Trans::N, &layer.w_ih, Trans::N, 0.0, &mut dx[t]);
                gemm(1.0, &da, Trans::N, &layer.w_hh, Trans::N, 0.0, &mut dh_next);
            }
            if li > 0 {
                if let Some(masks) = cache.masks.get(li - 1) {
                    for (d, m) in dx.iter_mut().zip(masks) {
                        d.data_mut().iter_mut().zip(m.data()).for_each(|(v, k)| *v *= k);
                    }
                }
                dh_ext = dx;
            }
        }
    }

    /// Mean BCE over a batch and its parameter gradient.
    pub fn loss_and_grad(&self, windows: &[&SimilarityWindow], rng: Option<&mut Rng>) -> Result<(f64, LstmModel)> {
        let cache = self.forward_train(windows, rng)?;
        let n = windows.len() as f64;
        let mut loss = 0.0;
        let dy: Vec<f64> = windows
            .iter()
            .zip(&cache.y)
            .map(|(w, &y)| {
                let t = f64::from(w.label);
                loss += bce_loss(y, t);
                bce_grad(y, t) / n
            })
            .collect();
        let mut grad = self.zeros_like();
        self.backward(&cache, &dy, &mut grad);
        Ok((loss / n, grad))
    }

    fn write(&self, w: &mut Writer) {
        w.u32(self.input_dim as u32);
        w.u32(self.hidden as u32);
        w.u32(self.layers.len() as u32);
        w.f64(self.dropout);
        for l in &self.layers {
            w.mat(&l.w_ih);
            w.mat(&l.w_hh);
            w.f64s(&l.b);
        }
        w.mat(&self.head.w);
        w.f64s(&self.head.b);
    }

    fn read(r: &mut Reader<'_>) -> Result<Self> {
        let input_dim = r.u32()? as usize;
        let hidden = r.u32()? as usize;
        let n = r.u32()? as usize;
        let dropout = r.f64()?;
        if !(1..=2).contains(&input_dim) || hidden == 0 || n == 0 || n > 8 {
            return Err(Error::Malformed(format!("lstm shape in={input_dim} hidden={hidden} layers={n}")));
        }
        let mut layers = Vec::with_capacity(n);
        for l in 0..n {
            let w_ih = r.mat()?;
            let w_hh = r.mat()?;
            let b = r.f64s(4 * hidden)?;
            let inp = if l == 0 { input_dim } else { hidden };
            if (w_ih.rows(), w_ih.cols()) != (4 * hidden, inp) || (w_hh.rows(), w_hh.cols()) != (4 * hidden, hidden) {
                return Err(Error::Malformed("lstm gate shapes".into()));
            }
            layers.push(LstmLayer { w_ih, w_hh, b });
        }
        let hw = r.mat()?;
        let hb = r.f64s(1)?;
        if (hw.rows(), hw.cols()) != (1, hidden) {
            return Err(Error::Malformed("lstm head shape".into()));
        }
        Ok(Self { input_dim, hidden, layers, head: Linear { w: hw, b: hb }, dropout })
    }
}

/// Everything the receiver needs besides the heads: the LSTM, the normal
/// regressor used for pose exclusion, and the windowing parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    pub lstm: LstmModel,
    pub regressor: NormalRegressor,
    pub window: usize,
    pub pose_threshold_deg: f64,
    pub exclude_poses: bool,
}

/// Per-frame quantities the LSTM consumes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameScore {
    pub t: usize,
    pub phi: f64,
    /// Estimated yaw / 90 from the regressor normal.
    pub yaw: f64,
    pub kept: bool,
}

pub(crate) fn yaw_from_normal(n: Option<&[f64]>) -> f64 {
    n.map_or(0.0, |n| n[0].atan2(n[2]).to_degrees() / 90.0)
}

impl FusionModel {
    /// Scores every frame against the reference and applies the pose filter.
    pub fn frame_scores(&self, ebl: &EblPair, reference: &ReferencePortrait, frames: &[LatentFrame]) -> Result<Vec<FrameScore>> {
        if frames.is_empty() {
            return Ok(Vec::new());
        }
        let zs = Mat64::from_rows(&frames.iter().map(|f| &f.z[..]).collect::<Vec<_>>())?;
        let phis = ebl.similarities(&zs, &reference.embedded)?;
        let keep = if self.exclude_poses {
            keep_mask(frames, reference, NormalSource::Regressor(&self.regressor), self.pose_threshold_deg)
        } else {
            vec![true; frames.len()]
        };
        let yaws: Vec<f64> = if self.lstm.input_dim == 2 {
            let normals = self.regressor.predict(&zs);
            (0..frames.len()).map(|i| yaw_from_normal(Some(normals.row(i)))).collect()
        } else {
            vec![0.0; frames.len()]
        };
        Ok(frames
            .iter()
            .enumerate()
            .map(|(i, f)| FrameScore { t: f.t, phi: phis[i], yaw: yaws[i], kept: keep[i] })
            .collect())
    }

    /// The window made of kept scores `kept[start..start+W]`.
    pub fn window_at(&self, kept: &[FrameScore], start: usize, label: u8) -> SimilarityWindow {
        let s = &kept[start..start + self.window];
        SimilarityWindow {
            phis: s.iter().map(|f| f.phi).collect(),
            yaws: (self.lstm.input_dim == 2).then(|| s.iter().map(|f| f.yaw).collect()),
            label,
        }
    }

    /// Window start offsets (into the kept sequence) at the given stride.
    pub fn window_starts(&self, kept_len: usize, stride: usize) -> Vec<usize> {
        if kept_len < self.window {
            return Vec::new();
        }
        (0..=kept_len - self.window).step_by(stride.max(1)).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(CKPT_MAGIC.as_bytes());
        w.u16(CKPT_VERSION);
        w.u32(self.window as u32);
        w.f64(self.pose_threshold_deg);
        w.u8(u8::from(self.exclude_poses));
        self.lstm.write(&mut w);
        self.regressor.write(&mut w);
        w.finish_with_crc()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() >= 4 && &buf[..4] != CKPT_MAGIC.as_bytes() {
            return Err(Error::BadMagic { expected: CKPT_MAGIC });
        }
        let mut r = Reader::with_crc(buf, "LSTM checkpoint")?;
        r.magic(CKPT_MAGIC)?;
        let version = r.u16()?;
        if version != CKPT_VERSION {
            return Err(Error::BadVersion(version));
        }
        let window = r.u32()? as usize;
        let pose_threshold_deg = r.f64()?;
        let exclude_poses = r.u8()? != 0;
        let lstm = LstmModel::read(&mut r)?;
        let regressor = NormalRegressor::read(&mut r)?;
        r.expect_end()?;
        if window == 0 {
            return Err(Error::Malformed("window 0".into()));
        }
        Ok(Self { lstm, regressor, window, pose_threshold_deg, exclude_poses })
    }
}

/// `(window_start, y)` per window, where `window_start` is the frame index of
/// the window's first kept frame.
pub fn score_session(ebl: &EblPair, model: &FusionModel, session: &Session, stride: usize) -> Result<Vec<(usize, f64)>> {
    let scores = model.frame_scores(ebl, &session.reference, &session.frames)?;
    let kept: Vec<FrameScore> = scores.into_iter().filter(|s| s.kept).collect();
    let starts = model.window_starts(kept.len(), stride);
    if starts.is_empty() {
        return Err(Error::InsufficientFrames { needed: model.window, available: kept.len() });
    }
    let windows: Vec<SimilarityWindow> = starts.iter().map(|&s| model.window_at(&kept, s, session.label())).collect();
    let ys = model.lstm.forward_batch(&windows.iter().collect::<Vec<_>>())?;
    Ok(starts.iter().map(|&s| kept[s].t).zip(ys).collect())
}

/// Mean of the window probabilities.
pub fn session_score(windows: &[(usize, f64)]) -> f64 {
    windows.iter().map(|w| w.1).sum::<f64>() / windows.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub lr: f64,
    pub window: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden: usize,
    pub num_layers: usize,
    pub dropout: f64,
    /// Feed the estimated yaw alongside the similarity.
    pub use_yaw: bool,
    pub sessions: usize,
    pub session_frames: usize,
    /// Stride between training windows of one session.
    pub train_stride: usize,
    pub pose_threshold_deg: f64,
    pub exclude_poses: bool,
    pub regressor: RegressorConfig,
    pub walk: PoseWalk,
    pub seed: u64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            window: 40,
            epochs: 30,
            batch_size: 32,
            hidden: 32,
            num_layers: 2,
            dropout: 0.3,
            use_yaw: false,
            sessions: 200,
            session_frames: 300,
            train_stride: 5,
            pose_threshold_deg: 18.0,
            exclude_poses: true,
            regressor: RegressorConfig::default(),
            walk: PoseWalk::default(),
            seed: 0,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if self.window < 1 {
            return bad("window must be ≥ 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {}", self.lr));
        }
        if self.batch_size == 0 || self.sessions < 2 || self.session_frames == 0 || self.train_stride == 0 {
            return bad("batch_size, session_frames and train_stride must be positive; sessions ≥ 2".into());
        }
        if !(self.pose_threshold_deg > 0.0 && self.pose_threshold_deg < 90.0) {
            return bad(format!("pose threshold {}° outside (0, 90)", self.pose_threshold_deg));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        self.walk.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FusionReport {
    /// Mean training BCE per epoch.
    pub epoch_loss: Vec<f64>,
    pub windows: usize,
    /// Sessions with fewer than `W` kept frames, left out of training.
    pub skipped_sessions: usize,
    pub regressor: RegressorReport,
}

/// Adam over shuffled mini-batches of windows; returns mean BCE per epoch.
pub fn fit_windows(
    lstm: &mut LstmModel,
    windows: &[SimilarityWindow],
    lr: f64,
    epochs: usize,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if windows.is_empty() {
        return Err(Error::InsufficientFrames { needed: 1, available: 0 });
    }
    let shapes: Vec<usize> = lstm.tensors().iter().map(|t| t.len()).collect();
    let mut adam = Adam::new(AdamConfig::default(), lr, &shapes);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut mask_rng = rng.split(1);
    let mut curve = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<&SimilarityWindow> = chunk.iter().map(|&i| &windows[i]).collect();
            let (loss, grad) = lstm.loss_and_grad(&batch, Some(&mut mask_rng))?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("lstm loss {loss} in epoch {}", epoch + 1)));
            }
            total += loss * batch.len() as f64;
            adam.step(lstm.tensors_mut(), grad.tensors());
        }
        curve.push(total / windows.len() as f64);
    }
    Ok(curve)
}

/// Labeled windows from sessions, skipping those with too few kept frames.
pub fn session_windows(ebl: &EblPair, model: &FusionModel, sessions: &[Session], stride: usize) -> Result<(Vec<SimilarityWindow>, usize)> {
    let mut out = Vec::new();
    let mut skipped = 0;
    for s in sessions {
        let kept: Vec<FrameScore> = model.frame_scores(ebl, &s.reference, &s.frames)?.into_iter().filter(|f| f.kept).collect();
        let starts = model.window_starts(kept.len(), stride);
        if starts.is_empty() {
            skipped += 1;
        }
        out.extend(starts.into_iter().map(|st| model.window_at(&kept, st, s.label())));
    }
    Ok((out, skipped))
}

/// Trains the normal regressor, then the LSTM on windows from balanced
/// sessions over `train_ids`, with the heads frozen.
pub fn train_fusion(ebl: &EblPair, world: &World, train_ids: &[usize], cfg: &FusionConfig) -> Result<(FusionModel, FusionReport)> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed).split(0x4c53_544d);
    let reg_cfg = RegressorConfig { seed: cfg.seed, ..cfg.regressor.clone() };
    let (regressor, reg_report) = train_normal_regressor(world, train_ids, &cfg.walk, &reg_cfg)?;
    let input_dim = if cfg.use_yaw { 2 } else { 1 };
    let lstm = LstmModel::new(input_dim, cfg.hidden, cfg.num_layers, cfg.dropout, &mut root.split(1))?;
    let mut model = FusionModel {
        lstm,
        regressor,
        window: cfg.window,
        pose_threshold_deg: cfg.pose_threshold_deg,
        exclude_poses: cfg.exclude_poses,
    };
    let sessions = world.balanced_sessions(train_ids, cfg.sessions, cfg.session_frames, &cfg.walk, &mut root.split(2))?;
    let (windows, skipped) = session_windows(ebl, &model, &sessions, cfg.train_stride)?;
    if windows.is_empty() {
        return Err(Error::InsufficientFrames { needed: cfg.window, available: 0 });
    }
    let curve = fit_windows(&mut model.lstm, &windows, cfg.lr, cfg.epochs, cfg.batch_size, &mut root.split(3))?;
    let report = FusionReport { epoch_loss: curve, windows: windows.len(), skipped_sessions: skipped, regressor: reg_report };
    Ok((model, report))
}

/// Debug dump, one row per window.
pub fn write_windows_csv<W: Write>(windows: &[SimilarityWindow], probabilities: &[f64], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["index", "label", "probability", "phis"])?;
    for (i, (win, p)) in windows.iter().zip(probabilities).enumerate() {
        let phis: Vec<String> = win.phis.iter().map(|v| format!("{v}")).collect();
        w.write_record([i.to_string(), win.label.to_string(), format!("{p}"), phis.join(";")])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_grad;

    fn window(rng: &mut Rng, w: usize, label: u8, yaws: bool) -> SimilarityWindow {
        SimilarityWindow {
            phis: (0..w).map(|_| rng.uniform_range(-1.0, 1.0)).collect(),
            yaws: yaws.then(|| (0..w).map(|_| rng.uniform_range(-0.5, 0.5)).collect()),
            label,
        }
    }

    #[test]
    fn bce_values_and_gradient() {
        assert!((bce_loss(0.5, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_loss(1.0 - 1e-13, 1.0) < 1e-11);
        assert!(bce_loss(0.0, 1.0).is_finite() && bce_loss(1.0, 0.0).is_finite());
        for &(y, t) in &[(0.3, 1.0), (0.8, 0.0), (0.01, 0.0), (0.999, 1.0)] {
            let fd = finite_diff_grad(|v| bce_loss(v[0], t), &[y], 1e-7).unwrap()[0];
            let a = bce_grad(y, t);
            assert!((a - fd).abs() <= 1e-6 * a.abs().max(1.0), "{a} vs {fd}");
        }
    }

    #[test]
    fn zero_parameters_give_one_half() {
        let mut rng = Rng::new(1);
        let m = LstmModel::new(1, 8, 2, 0.3, &mut rng).unwrap().zeros_like();
        assert_eq!(m.forward(&window(&mut rng, 6, 0, false)).unwrap(), 0.5);
    }

    #[test]
    fn output_is_strictly_inside_unit_interval() {
        let mut rng = Rng::new(2);
        let mut m = LstmModel::new(1, 8, 2, 0.3, &mut rng).unwrap();
        m.head.w.data_mut().iter_mut().for_each(|v| *v *= 50.0);
        for _ in 0..20 {
            let y = m.forward(&window(&mut rng, 10, 0, false)).unwrap();
            assert!(y > 0.0 && y < 1.0);
        }
    }

    #[test]
    fn rejects_mismatched_window_lengths() {
        let mut rng = Rng::new(3);
        let m = LstmModel::new(1, 4, 2, 0.0, &mut rng).unwrap();
        let a = window(&mut rng, 5, 0, false);
        let b = window(&mut rng, 4, 0, false);
        assert!(matches!(m.forward_batch(&[&a, &b]), Err(Error::LengthMismatch { .. })));
    }

    fn check_gradients(seed: u64, input_dim: usize) {
        let mut rng = Rng::new(seed);
        let m = LstmModel::new(input_dim, 4, 2, 0.3, &mut rng).unwrap();
        let windows: Vec<SimilarityWindow> = (0..3).map(|i| window(&mut rng, 5, (i % 2) as u8, input_dim == 2)).collect();
        let refs: Vec<&SimilarityWindow> = windows.iter().collect();
        let (_, grad) = m.loss_and_grad(&refs, None).unwrap();
        let n_tensors = m.tensors().len();
        for ti in 0..n_tensors {
            let base = m.tensors()[ti].to_vec();
            let fd = finite_diff_grad(
                |p| {
                    let mut mm = m.clone();
                    mm.tensors_mut()[ti].copy_from_slice(p);
                    mm.loss_and_grad(&refs, None).unwrap().0
                },
                &base,
                1e-5,
            )
            .unwrap();
            for (a, f) in grad.tensors()[ti].iter().zip(fd.iter()) {
                let rel = (a - f).abs() / a.abs().max(f.abs()).max(1e-7);
                assert!(rel <= 1e-4 || (a - f).abs() < 1e-10, "tensor {ti}: {a} vs {f}");
            }
        }
    }

    #[test]
    fn bptt_matches_finite_differences() {
        for seed in 0..5 {
            check_gradients(seed, 1);
        }
        check_gradients(9, 2);
    }

    #[test]
    fn dropout_gradient_uses_the_same_masks() {
        let mut rng = Rng::new(4);
        let m = LstmModel::new(1, 4, 2, 0.3, &mut rng).unwrap();
        let w = window(&mut rng, 5, 1, false);
        let (_, grad) = m.loss_and_grad(&[&w], Some(&mut Rng::new(77))).unwrap();
        let base = m.layers[0].w_ih.data().to_vec();
        let fd = finite_diff_grad(
            |p| {
                let mut mm = m.clone();
                mm.layers[0].w_ih.data_mut().copy_from_slice(p);
                mm.loss_and_grad(&[&w], Some(&mut Rng::new(77))).unwrap().0
            },
            &base,
            1e-5,
        )
        .unwrap();
        for (a, f) in grad.layers[0].w_ih.data().iter().zip(fd.iter()) {
            assert!((a - f).abs() <= 1e-4 * a.abs().max(f.abs()).max(1e-6), "{a} vs {f}");
        }
    }

    #[test]
    fn all_negative_labels_drive_outputs_down() {
        let mut rng = Rng::new(5);
        let mut m = LstmModel::new(1, 8, 2, 0.3, &mut rng).unwrap();
        let windows: Vec<SimilarityWindow> = (0..64).map(|_| window(&mut rng, 8, 0, false)).collect();
        fit_windows(&mut m, &windows, 1e-2, 30, 16, &mut rng).unwrap();
        let ys = m.forward_batch(&windows.iter().collect::<Vec<_>>()).unwrap();
        assert!(ys.iter().all(|&y| y < 0.1), "max {}", ys.iter().cloned().fold(0.0, f64::max));
    }

    #[test]
    fn learns_order_dependent_rule_and_reversal_matters() {
        // Label 1 iff the second half of the window is higher than the first.
        let mut rng = Rng::new(6);
        let mut m = LstmModel::new(1, 8, 2, 0.0, &mut rng).unwrap();
        let w = 8;
        let windows: Vec<SimilarityWindow> = (0..256)
            .map(|i| {
                let up = i % 2 == 1;
                let phis = (0..w)
                    .map(|t| {
                        let trend = if up { t as f64 } else { (w - 1 - t) as f64 } / w as f64;
                        trend + 0.1 * rng.normal()
                    })
                    .collect();
                SimilarityWindow { phis, yaws: None, label: u8::from(up) }
            })
            .collect();
        let curve = fit_windows(&mut m, &windows, 1e-2, 20, 32, &mut rng).unwrap();
        assert!(curve.last().unwrap() < &(0.5 * curve[0]));
        let win = &windows[1];
        let mut rev = win.clone();
        rev.phis.reverse();
        let (a, b) = (m.forward(win).unwrap(), m.forward(&rev).unwrap());
        assert!((a - b).abs() > 0.1, "{a} vs {b}");
    }

    #[test]
    fn window_starts_arithmetic() {
        let mut rng = Rng::new(7);
        let m = FusionModel {
            lstm: LstmModel::new(1, 4, 2, 0.0, &mut rng).unwrap(),
            regressor: NormalRegressor::new(&[257, 4, 3], &mut rng).unwrap(),
            window: 40,
            pose_threshold_deg: 18.0,
            exclude_poses: true,
        };
        assert_eq!(m.window_starts(40, 7), vec![0]);
        assert_eq!(m.window_starts(42, 1), vec![0, 1, 2]);
        assert!(m.window_starts(39, 1).is_empty());
        assert_eq!(m.window_starts(100, 30), vec![0, 30, 60]);
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let mut rng = Rng::new(8);
        let m = FusionModel {
            lstm: LstmModel::new(2, 6, 2, 0.3, &mut rng).unwrap(),
            regressor: NormalRegressor::new(&[257, 8, 3], &mut rng).unwrap(),
            window: 12,
            pose_threshold_deg: 18.0,
            exclude_poses: false,
        };
        let bytes = m.to_bytes();
        assert_eq!(FusionModel::from_bytes(&bytes).unwrap(), m);
        let mut bad = bytes.clone();
        bad[20] ^= 1;
        assert!(matches!(FusionModel::from_bytes(&bad), Err(Error::BadCrc { .. })));
        assert!(matches!(FusionModel::from_bytes(&bytes[..3]), Err(Error::Truncated(_))));
        let mut wrong = bytes;
        wrong[0] = b'X';
        assert!(matches!(FusionModel::from_bytes(&wrong), Err(Error::BadMagic { .. })));
    }
}
