//! Synthetic latent world standing in for the talking-head encoder.
//!
//! A frame latent is
//!
//! ```text
//! z = normalize(leakage_gain · A·id + pose_gain · B·[yaw/90, expr] + ε)
//! ```
//!
//! where `A` and `B` share one orthonormal basis, so identity and pose live in
//! orthogonal subspaces and `‖A·id + B·p‖` does not depend on the identity.
//! Identity codes are drawn around a common direction (`id_shared`), which is
//! what makes raw cosine scores a poor identity test: every speaker looks
//! alike and the pose term dominates the norm.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::numerics::{cosine_sim, dot, l2_normalize, Mat64, Rng, Vec64};

const WORLD_MAGIC: &str = "EBLW";
const WORLD_VERSION: u16 = 1;
const SEPARATION_MAX_COS: f64 = 0.8;
const SEPARATION_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub latent_dim: usize,
    pub num_identities: usize,
    pub id_dim: usize,
    pub pose_dim: usize,
    pub leakage_gain: f64,
    pub pose_gain: f64,
    pub noise_sigma: f64,
    /// Squared weight of the direction shared by all identity codes.
    pub id_shared: f64,
    /// Extra noise at large yaw: `sd = noise_sigma + extreme_pose_noise·(yaw/90)²`.
    pub extreme_pose_noise: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            latent_dim: 257,
            num_identities: 46,
            id_dim: 32,
            pose_dim: 16,
            leakage_gain: 0.35,
            pose_gain: 1.0,
            noise_sigma: 0.02,
            id_shared: 0.5,
            extreme_pose_noise: 0.2,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if self.num_identities == 0 {
            return bad("num_identities must be ≥ 1".into());
        }
        if self.id_dim == 0 || self.pose_dim < 2 {
            return bad("id_dim must be ≥ 1 and pose_dim ≥ 2".into());
        }
        if self.id_dim + self.pose_dim > self.latent_dim {
            return bad(format!(
                "id_dim + pose_dim = {} exceeds latent_dim {}",
                self.id_dim + self.pose_dim,
                self.latent_dim
            ));
        }
        let finite = [self.leakage_gain, self.pose_gain, self.noise_sigma, self.id_shared, self.extreme_pose_noise];
        if finite.iter().any(|v| !v.is_finite()) {
            return bad("non-finite world parameter".into());
        }
        if self.leakage_gain < 0.0 || self.noise_sigma < 0.0 || self.extreme_pose_noise < 0.0 {
            return bad("leakage_gain, noise_sigma and extreme_pose_noise must be ≥ 0".into());
        }
        if self.pose_gain <= 0.0 {
            return bad("pose_gain must be > 0".into());
        }
        if !(0.0..1.0).contains(&self.id_shared) {
            return bad("id_shared must lie in [0, 1)".into());
        }
        Ok(())
    }

    /// Expression code length (pose_dim minus the yaw slot).
    pub fn expr_dim(&self) -> usize {
        self.pose_dim - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Identity {
    pub index: usize,
    pub code: Vec64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseState {
    pub yaw_deg: f64,
    pub expr: Vec64,
}

impl PoseState {
    pub fn neutral(expr_dim: usize) -> Self {
        Self { yaw_deg: 0.0, expr: Vec64::zeros(expr_dim) }
    }

    /// The pose-factor vector `[yaw/90, expr…]`.
    pub fn factor(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.expr.len() + 1);
        p.push(self.yaw_deg / 90.0);
        p.extend_from_slice(&self.expr);
        p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentFrame {
    pub z: Vec64,
    pub identity: usize,
    pub pose: PoseState,
    pub t: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePortrait {
    pub identity: usize,
    pub embedded: Vec64,
    pub neutral: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaceNormal(pub Vec64);

/// Unit face normal `[sin yaw, 0, cos yaw]`.
pub fn face_normal(pose: &PoseState) -> FaceNormal {
    let y = pose.yaw_deg.to_radians();
    let n = l2_normalize(&[y.sin(), 0.0, y.cos()]).expect("trig vector has unit norm");
    FaceNormal(n)
}

/// Reflected Gaussian yaw walk plus an AR(1) expression process whose scale
/// is drawn once per session (some speakers are far more animated than
/// others).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseWalk {
    pub step_sigma_deg: f64,
    pub yaw_max_deg: f64,
    pub expr_sigma: f64,
    pub expr_ar: f64,
    pub expr_scale_lo: f64,
    pub expr_scale_hi: f64,
}

impl Default for PoseWalk {
    fn default() -> Self {
        Self {
            step_sigma_deg: 4.0,
            yaw_max_deg: 45.0,
            expr_sigma: 0.25,
            expr_ar: 0.9,
            expr_scale_lo: 0.2,
            expr_scale_hi: 5.0,
        }
    }
}

impl PoseWalk {
    pub fn validate(&self) -> Result<()> {
        let ok = self.step_sigma_deg >= 0.0
            && self.yaw_max_deg > 0.0
            && self.yaw_max_deg <= 90.0
            && self.expr_sigma >= 0.0
            && (0.0..1.0).contains(&self.expr_ar)
            && self.expr_scale_lo > 0.0
            && self.expr_scale_hi >= self.expr_scale_lo;
        if ok {
            Ok(())
        } else {
            Err(Error::ConfigInvalid(format!("invalid pose walk {self:?}")))
        }
    }

    fn reflect(&self, mut y: f64) -> f64 {
        let m = self.yaw_max_deg;
        while y.abs() > m {
            y = if y > m { 2.0 * m - y } else { -2.0 * m - y };
        }
        y
    }

    fn draw_scale(&self, rng: &mut Rng) -> f64 {
        rng.uniform_range(self.expr_scale_lo.ln(), self.expr_scale_hi.ln()).exp()
    }

    /// One pose from the walk's stationary law (uniform yaw, fresh scale).
    pub fn sample_pose(&self, expr_dim: usize, rng: &mut Rng) -> PoseState {
        let scale = self.draw_scale(rng);
        let yaw = rng.uniform_range(-self.yaw_max_deg, self.yaw_max_deg);
        let expr = rng.normal_vec(expr_dim).into_iter().map(|e| e * self.expr_sigma * scale).collect();
        PoseState { yaw_deg: yaw, expr: Vec64::from_vec_unchecked(expr) }
    }

    /// A walk of `n` poses.
    pub fn trajectory(&self, expr_dim: usize, n: usize, rng: &mut Rng) -> Vec<PoseState> {
        let mut walker = self.start(expr_dim, rng);
        (0..n).map(|_| walker.next_pose(rng)).collect()
    }

    /// Stepper for walks too long to materialize.
    pub fn start(&self, expr_dim: usize, rng: &mut Rng) -> Walker {
        let pose = self.sample_pose(expr_dim, rng);
        let scale = self.draw_scale(rng);
        let innov = (1.0 - self.expr_ar * self.expr_ar).sqrt() * self.expr_sigma * scale;
        let expr = rng.normal_vec(expr_dim).into_iter().map(|e| e * self.expr_sigma * scale).collect();
        Walker { walk: self.clone(), yaw: pose.yaw_deg, expr, innov, started: false }
    }
}

#[derive(Debug, Clone)]
pub struct Walker {
    walk: PoseWalk,
    yaw: f64,
    expr: Vec<f64>,
    innov: f64,
    started: bool,
}

impl Walker {
    pub fn next_pose(&mut self, rng: &mut Rng) -> PoseState {
        if self.started {
            self.yaw = self.walk.reflect(self.yaw + self.walk.step_sigma_deg * rng.normal());
            for e in self.expr.iter_mut() {
                *e = self.walk.expr_ar * *e + self.innov * rng.normal();
            }
        }
        self.started = true;
        PoseState { yaw_deg: self.yaw, expr: Vec64::from_vec_unchecked(self.expr.clone()) }
    }
}

/// One call: a handshake reference of `target_id` and frames driven by
/// `driving_id`.
#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub driving_id: usize,
    pub target_id: usize,
    pub reference: ReferencePortrait,
    pub frames: Vec<LatentFrame>,
}

impl Session {
    /// 1 for a puppeteered session, 0 for self-reenactment.
    pub fn label(&self) -> u8 {
        u8::from(self.driving_id != self.target_id)
    }
}

pub struct LiveFrames<'a> {
    world: &'a World,
    identity: usize,
    walker: Walker,
    rng: Rng,
    t: usize,
}

impl Iterator for LiveFrames<'_> {
    type Item = Result<LatentFrame>;

    fn next(&mut self) -> Option<Self::Item> {
        let pose = self.walker.next_pose(&mut self.rng);
        let f = self.world.embed(self.identity, &pose, self.t, &mut self.rng);
        self.t += 1;
        Some(f)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub cfg: WorldConfig,
    a: Mat64,
    b: Mat64,
    identities: Vec<Identity>,
}

impl World {
    pub fn build(cfg: WorldConfig) -> Result<Self> {
        cfg.validate()?;
        let root = Rng::new(cfg.seed);
        let (a, b) = mixing_maps(&cfg, &mut root.split(1));
        let identities = sample_identities(&cfg, &mut root.split(2))?;
        Ok(Self { cfg, a, b, identities })
    }

    pub fn latent_dim(&self) -> usize {
        self.cfg.latent_dim
    }

    pub fn num_identities(&self) -> usize {
        self.identities.len()
    }

    pub fn identities(&self) -> &[Identity] {
        &self.identities
    }

    pub fn id_map(&self) -> &Mat64 {
        &self.a
    }

    pub fn pose_map(&self) -> &Mat64 {
        &self.b
    }

    fn identity(&self, k: usize) -> Result<&Identity> {
        self.identities.get(k).ok_or(Error::UnknownIdentity(k))
    }

    /// Noise-free, unnormalized latent.
    pub fn clean_latent(&self, identity: usize, pose: &PoseState) -> Result<Vec<f64>> {
        let id = self.identity(identity)?;
        let p = pose.factor();
        if p.len() != self.cfg.pose_dim {
            return Err(Error::LengthMismatch { expected: self.cfg.pose_dim, actual: p.len() });
        }
        let mut z = self.a.matvec(&id.code);
        let bp = self.b.matvec(&p);
        for (zi, bi) in z.iter_mut().zip(&bp) {
            *zi = self.cfg.leakage_gain * *zi + self.cfg.pose_gain * bi;
        }
        Ok(z)
    }

    pub fn noise_sd(&self, pose: &PoseState) -> f64 {
        let y = pose.yaw_deg / 90.0;
        self.cfg.noise_sigma + self.cfg.extreme_pose_noise * y * y
    }

    /// Encodes identity `identity` performing `pose`. Cross-reenactment is the
    /// same call with another speaker's pose.
    pub fn embed(&self, identity: usize, pose: &PoseState, t: usize, rng: &mut Rng) -> Result<LatentFrame> {
        let mut z = self.clean_latent(identity, pose)?;
        let sd = self.noise_sd(pose);
        if sd > 0.0 {
            for zi in z.iter_mut() {
                *zi += sd * rng.normal();
            }
        }
        Ok(LatentFrame { z: l2_normalize(&z)?, identity, pose: pose.clone(), t })
    }

    /// Noise-free encoding, used for pose-matched impostor renderings.
    pub fn embed_clean(&self, identity: usize, pose: &PoseState) -> Result<Vec64> {
        l2_normalize(&self.clean_latent(identity, pose)?)
    }

    /// Neutral, noise-free portrait of `identity`.
    pub fn reference(&self, identity: usize) -> Result<ReferencePortrait> {
        let pose = PoseState::neutral(self.cfg.expr_dim());
        Ok(ReferencePortrait { identity, embedded: self.embed_clean(identity, &pose)?, neutral: true })
    }

    pub fn sample_session(
        &self,
        driving_id: usize,
        target_id: usize,
        num_frames: usize,
        walk: &PoseWalk,
        rng: &mut Rng,
    ) -> Result<Session> {
        if num_frames == 0 {
            return Err(Error::InsufficientFrames { needed: 1, available: 0 });
        }
        self.identity(driving_id)?;
        let reference = self.reference(target_id)?;
        let poses = walk.trajectory(self.cfg.expr_dim(), num_frames, rng);
        let frames = poses
            .iter()
            .enumerate()
            .map(|(t, p)| self.embed(driving_id, p, t, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Session { driving_id, target_id, reference, frames })
    }

    /// Endless frames of `driving_id`, generated one at a time.
    pub fn live_frames(&self, driving_id: usize, walk: &PoseWalk, mut rng: Rng) -> Result<LiveFrames<'_>> {
        self.identity(driving_id)?;
        let walker = walk.start(self.cfg.expr_dim(), &mut rng);
        Ok(LiveFrames { world: self, identity: driving_id, walker, rng, t: 0 })
    }

    /// `n` sessions over `ids`, alternating self-reenactment (even index) and
    /// puppeteering by a uniformly drawn other identity (odd index).
    pub fn balanced_sessions(
        &self,
        ids: &[usize],
        n: usize,
        num_frames: usize,
        walk: &PoseWalk,
        rng: &mut Rng,
    ) -> Result<Vec<Session>> {
        if ids.len() < 2 {
            return Err(Error::TooFewIdentities(format!("puppeteered sessions need 2 identities, got {}", ids.len())));
        }
        (0..n)
            .map(|i| {
                let target = ids[rng.below(ids.len())];
                let driving = if i % 2 == 0 {
                    target
                } else {
                    let j = rng.below(ids.len() - 1);
                    let pos = ids.iter().position(|&x| x == target).unwrap();
                    ids[if j >= pos { j + 1 } else { j }]
                };
                self.sample_session(driving, target, num_frames, walk, rng)
            })
            .collect()
    }

    /// Disjoint identity split; `max(1, round(test_fraction·N))` go to test.
    pub fn make_split(&self, test_fraction: f64) -> Result<(Vec<usize>, Vec<usize>)> {
        if !(test_fraction > 0.0 && test_fraction < 1.0) {
            return Err(Error::ConfigInvalid(format!("test_fraction {test_fraction} outside (0, 1)")));
        }
        let n = self.num_identities();
        let n_test = ((test_fraction * n as f64).round() as usize).max(1);
        if n_test >= n {
            return Err(Error::TooFewIdentities(format!("{n} identities cannot give a non-empty train side")));
        }
        let mut ids: Vec<usize> = (0..n).collect();
        Rng::new(self.cfg.seed).split(3).shuffle(&mut ids);
        let mut test = ids[..n_test].to_vec();
        let mut train = ids[n_test..].to_vec();
        test.sort_unstable();
        train.sort_unstable();
        Ok((train, test))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.cfg;
        let mut w = Writer::new();
        w.bytes(WORLD_MAGIC.as_bytes());
        w.u16(WORLD_VERSION);
        for v in [c.latent_dim, c.num_identities, c.id_dim, c.pose_dim] {
            w.u64(v as u64);
        }
        w.f64s(&[c.leakage_gain, c.pose_gain, c.noise_sigma, c.id_shared, c.extreme_pose_noise]);
        w.u64(c.seed);
        w.f64s(self.a.data());
        w.f64s(self.b.data());
        for id in &self.identities {
            w.f64s(&id.code);
        }
        w.finish()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf, "world file");
        r.magic(WORLD_MAGIC)?;
        let version = r.u16()?;
        if version != WORLD_VERSION {
            return Err(Error::BadVersion(version));
        }
        let mut dims = [0usize; 4];
        for d in dims.iter_mut() {
            *d = usize::try_from(r.u64()?).map_err(|_| Error::Malformed("dimension overflow".into()))?;
        }
        let f = r.f64s(5)?;
        let cfg = WorldConfig {
            latent_dim: dims[0],
            num_identities: dims[1],
            id_dim: dims[2],
            pose_dim: dims[3],
            leakage_gain: f[0],
            pose_gain: f[1],
            noise_sigma: f[2],
            id_shared: f[3],
            extreme_pose_noise: f[4],
            seed: r.u64()?,
        };
        cfg.validate()?;
        let expected = (cfg.latent_dim * (cfg.id_dim + cfg.pose_dim) + cfg.num_identities * cfg.id_dim) * 8;
        if r.remaining() != expected {
            return Err(Error::Truncated("world file"));
        }
        let a = Mat64::from_vec(cfg.latent_dim, cfg.id_dim, r.f64s(cfg.latent_dim * cfg.id_dim)?)?;
        let b = Mat64::from_vec(cfg.latent_dim, cfg.pose_dim, r.f64s(cfg.latent_dim * cfg.pose_dim)?)?;
        let identities = (0..cfg.num_identities)
            .map(|index| Ok(Identity { index, code: Vec64::new(r.f64s(cfg.id_dim)?)? }))
            .collect::<Result<Vec<_>>>()?;
        r.expect_end()?;
        Ok(Self { cfg, a, b, identities })
    }
}

/// Draws `latent_dim × (id_dim + pose_dim)` Gaussian columns and
/// orthonormalizes them together (modified Gram–Schmidt, two passes).
fn mixing_maps(cfg: &WorldConfig, rng: &mut Rng) -> (Mat64, Mat64) {
    let n = cfg.latent_dim;
    let k = cfg.id_dim + cfg.pose_dim;
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    while cols.len() < k {
        let mut v = rng.normal_vec(n);
        for _ in 0..2 {
            for q in &cols {
                let p = dot(&v, q);
                v.iter_mut().zip(q).for_each(|(vi, qi)| *vi -= p * qi);
            }
        }
        if let Ok(u) = l2_normalize(&v) {
            cols.push(u.into_inner());
        }
    }
    let a = Mat64::from_fn(n, cfg.id_dim, |r, c| cols[c][r]);
    let b = Mat64::from_fn(n, cfg.pose_dim, |r, c| cols[cfg.id_dim + c][r]);
    (a, b)
}

fn sample_identities(cfg: &WorldConfig, rng: &mut Rng) -> Result<Vec<Identity>> {
    let shared = rng.unit_vec(cfg.id_dim);
    let (ws, wu) = (cfg.id_shared.sqrt(), (1.0 - cfg.id_shared).sqrt());
    let mut out: Vec<Identity> = Vec::with_capacity(cfg.num_identities);
    let mut attempts = 0;
    while out.len() < cfg.num_identities {
        attempts += 1;
        if attempts > SEPARATION_ATTEMPTS {
            return Err(Error::SeparationUnsatisfiable(cfg.num_identities));
        }
        let u = rng.unit_vec(cfg.id_dim);
        let v: Vec<f64> = shared.iter().zip(u.iter()).map(|(s, x)| ws * s + wu * x).collect();
        let Ok(code) = l2_normalize(&v) else { continue };
        let separated = out.iter().all(|o| cosine_sim(&o.code, &code).map_or(false, |c| c < SEPARATION_MAX_COS));
        if separated {
            out.push(Identity { index: out.len(), code });
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct FrameRecord<'a> {
    t: usize,
    identity: usize,
    yaw: f64,
    z: &'a [f64],
}

/// One JSON object per frame: `{t, identity, yaw, z}`.
pub fn write_session_jsonl<W: Write>(session: &Session, mut out: W) -> Result<()> {
    for f in &session.frames {
        let rec = FrameRecord { t: f.t, identity: f.identity, yaw: f.pose.yaw_deg, z: &f.z };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet(num_identities: usize) -> WorldConfig {
        WorldConfig { num_identities, noise_sigma: 0.0, extreme_pose_noise: 0.0, seed: 11, ..Default::default() }
    }

    fn pose(world: &World, yaw: f64, rng: &mut Rng) -> PoseState {
        let expr = Vec64::new(rng.normal_vec(world.cfg.expr_dim())).unwrap();
        PoseState { yaw_deg: yaw, expr }
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = WorldConfig { num_identities: 2, seed: 7, ..Default::default() };
        let a = World::build(cfg.clone()).unwrap();
        let b = World::build(cfg).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn rejects_oversized_factors() {
        let cfg = WorldConfig { latent_dim: 40, id_dim: 32, pose_dim: 16, ..Default::default() };
        assert!(matches!(World::build(cfg), Err(Error::ConfigInvalid(_))));
    }

    #[test]
    fn identities_are_separated() {
        let w = World::build(WorldConfig::default()).unwrap();
        assert_eq!(w.num_identities(), 46);
        for i in 0..46 {
            for j in (i + 1)..46 {
                let c = cosine_sim(&w.identities()[i].code, &w.identities()[j].code).unwrap();
                assert!(c < 0.8, "pair ({i},{j}) cos {c}");
            }
        }
    }

    #[test]
    fn maps_are_jointly_orthonormal() {
        let w = World::build(quiet(3)).unwrap();
        let cols: Vec<Vec<f64>> = (0..w.cfg.id_dim)
            .map(|c| (0..257).map(|r| w.id_map().get(r, c)).collect())
            .chain((0..w.cfg.pose_dim).map(|c| (0..257).map(|r| w.pose_map().get(r, c)).collect()))
            .collect();
        for i in 0..cols.len() {
            for j in 0..cols.len() {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot(&cols[i], &cols[j]) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn same_identity_shares_identity_component() {
        let w = World::build(quiet(4)).unwrap();
        let mut rng = Rng::new(1);
        let (p1, p2) = (pose(&w, 5.0, &mut rng), pose(&w, -20.0, &mut rng));
        let z1 = w.embed(2, &p1, 0, &mut rng).unwrap();
        let z2 = w.embed(2, &p2, 1, &mut rng).unwrap();
        assert!((z1.z.norm() - 1.0).abs() < 1e-12);
        assert_ne!(z1.z, z2.z);
        // Undo the normalization: both norms are sqrt(a² + ‖p‖²).
        let n1 = (0.35f64.powi(2) + p1.factor().iter().map(|x| x * x).sum::<f64>()).sqrt();
        let n2 = (0.35f64.powi(2) + p2.factor().iter().map(|x| x * x).sum::<f64>()).sqrt();
        let id1 = w.id_map().matvec_t(&z1.z.iter().map(|x| x * n1).collect::<Vec<_>>());
        let id2 = w.id_map().matvec_t(&z2.z.iter().map(|x| x * n2).collect::<Vec<_>>());
        for (a, b) in id1.iter().zip(&id2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn no_leakage_is_identity_blind() {
        let cfg = WorldConfig { leakage_gain: 0.0, ..quiet(5) };
        let w = World::build(cfg).unwrap();
        let mut rng = Rng::new(2);
        let p = pose(&w, 12.0, &mut rng);
        let a = w.embed(0, &p, 0, &mut rng).unwrap();
        let b = w.embed(4, &p, 0, &mut rng).unwrap();
        assert_eq!(a.z, b.z);
    }

    #[test]
    fn pose_swap_difference_lives_in_identity_subspace() {
        let w = World::build(quiet(6)).unwrap();
        let mut rng = Rng::new(3);
        for _ in 0..20 {
            let p = pose(&w, rng.uniform_range(-45.0, 45.0), &mut rng);
            let a = w.embed(1, &p, 0, &mut rng).unwrap();
            let b = w.embed(5, &p, 0, &mut rng).unwrap();
            let d: Vec<f64> = a.z.iter().zip(b.z.iter()).map(|(x, y)| x - y).collect();
            let on_b = w.pose_map().matvec_t(&d);
            assert!(on_b.iter().all(|v| v.abs() <= 1e-9));
        }
    }

    #[test]
    fn face_normals() {
        let n0 = face_normal(&PoseState::neutral(3));
        assert_eq!(n0.0.as_slice(), &[0.0, 0.0, 1.0]);
        let n90 = face_normal(&PoseState { yaw_deg: 90.0, expr: Vec64::zeros(3) });
        assert!((n90.0[0] - 1.0).abs() < 1e-15 && n90.0[2].abs() < 1e-15);
        let n18 = face_normal(&PoseState { yaw_deg: 18.0, expr: Vec64::zeros(3) });
        assert!((cosine_sim(&n18.0, &[0.0, 0.0, 1.0]).unwrap() - 0.9511).abs() < 1e-4);
    }

    #[test]
    fn session_labels_and_determinism() {
        let w = World::build(WorldConfig { num_identities: 4, seed: 9, ..Default::default() }).unwrap();
        let walk = PoseWalk::default();
        let s0 = w.sample_session(1, 1, 30, &walk, &mut Rng::new(5)).unwrap();
        let s1 = w.sample_session(2, 1, 30, &walk, &mut Rng::new(5)).unwrap();
        assert_eq!(s0.label(), 0);
        assert_eq!(s1.label(), 1);
        let again = w.sample_session(1, 1, 30, &walk, &mut Rng::new(5)).unwrap();
        assert_eq!(s0, again);
        assert!(s0.frames.iter().all(|f| f.pose.yaw_deg.abs() <= 45.0));
        assert!(s0.reference.neutral);
        assert!(matches!(w.sample_session(9, 1, 3, &walk, &mut Rng::new(1)), Err(Error::UnknownIdentity(9))));
    }

    #[test]
    fn split_sizes() {
        for (n, f, test) in [(10, 0.2, 2), (2, 0.5, 1), (46, 0.2, 9)] {
            let w = World::build(WorldConfig { num_identities: n, ..Default::default() }).unwrap();
            let (tr, te) = w.make_split(f).unwrap();
            assert_eq!(te.len(), test);
            assert_eq!(tr.len(), n - test);
            assert!(tr.iter().all(|i| !te.contains(i)));
        }
        let w = World::build(WorldConfig { num_identities: 1, ..Default::default() }).unwrap();
        assert!(matches!(w.make_split(0.5), Err(Error::TooFewIdentities(_))));
    }

    #[test]
    fn world_file_round_trip() {
        let w = World::build(WorldConfig { num_identities: 5, seed: 3, ..Default::default() }).unwrap();
        let bytes = w.to_bytes();
        let back = World::from_bytes(&bytes).unwrap();
        assert_eq!(back, w);
        assert_eq!(back.to_bytes(), bytes);
        assert!(matches!(World::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Truncated(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(World::from_bytes(&bad), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn jsonl_dump_has_one_line_per_frame() {
        let w = World::build(WorldConfig { num_identities: 2, ..Default::default() }).unwrap();
        let s = w.sample_session(0, 1, 7, &PoseWalk::default(), &mut Rng::new(1)).unwrap();
        let mut buf = Vec::new();
        write_session_jsonl(&s, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 7);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["z"].as_array().unwrap().len(), 257);
    }
}
