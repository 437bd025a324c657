//! Episodes with pose-matched impostors, the contrastive objective
//! `L_B = L_P + λ·L_N`, extreme-pose exclusion and the Adam loop for the heads.
//!
//! An episode holds an anchor latent of identity `k` at pose `p`, the neutral
//! reference of `k`, and latents of other identities rendered at the same
//! `p`. The positive term pulls `h1(anchor)` onto `h2(ref_k)`; the negative
//! term pushes the impostor renderings away from that same reference, so the
//! only thing separating them is identity.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::ebl::{init_heads, BiometricScore, Dropout, EblPair, DEFAULT_HIDDEN};
use crate::error::{Error, Result};
use crate::numerics::{cosine_sim, Mat64, Rng};
use crate::optim::{Adam, AdamConfig};
use crate::regressor::NormalRegressor;
use crate::world::{face_normal, LatentFrame, PoseState, PoseWalk, ReferencePortrait, World};

const ANCHOR_RETRIES: usize = 100;

/// Where face normals come from when filtering frames.
#[derive(Debug, Clone, Copy)]
pub enum NormalSource<'a> {
    /// World ground truth.
    Oracle,
    /// `normalize(r(z))`.
    Regressor(&'a NormalRegressor),
}

impl NormalSource<'_> {
    fn frame_normal(&self, frame: &LatentFrame) -> Option<Vec<f64>> {
        match self {
            NormalSource::Oracle => Some(face_normal(&frame.pose).0.into_inner()),
            NormalSource::Regressor(r) => r.normal(&frame.z),
        }
    }

    fn reference_normal(&self, reference: &ReferencePortrait) -> Option<Vec<f64>> {
        match self {
            NormalSource::Oracle => Some(vec![0.0, 0.0, 1.0]),
            NormalSource::Regressor(r) => r.normal(&reference.embedded),
        }
    }
}

/// Angle in degrees between a frame's face normal and the reference's.
pub fn pose_deviation_deg(frame: &LatentFrame, reference: &ReferencePortrait, source: NormalSource<'_>) -> Option<f64> {
    let n_t = source.frame_normal(frame)?;
    let n_r = source.reference_normal(reference)?;
    Some(cosine_sim(&n_t, &n_r).ok()?.acos().to_degrees())
}

/// `true` for frames whose normal is within `threshold_deg` of the reference.
pub fn keep_mask(
    frames: &[LatentFrame],
    reference: &ReferencePortrait,
    source: NormalSource<'_>,
    threshold_deg: f64,
) -> Vec<bool> {
    frames
        .iter()
        .map(|f| pose_deviation_deg(f, reference, source).map_or(false, |a| a <= threshold_deg + 1e-9))
        .collect()
}

/// Order-preserving subsequence of frames that pass the pose filter.
pub fn exclude_extreme_poses(
    frames: &[LatentFrame],
    reference: &ReferencePortrait,
    source: NormalSource<'_>,
    threshold_deg: f64,
) -> Vec<LatentFrame> {
    frames
        .iter()
        .zip(keep_mask(frames, reference, source, threshold_deg))
        .filter_map(|(f, k)| k.then(|| f.clone()))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub anchor: LatentFrame,
    pub pos_ref: ReferencePortrait,
    /// Other identities rendered at the anchor's pose.
    pub negatives: Vec<LatentFrame>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    /// Cap on impostors per anchor; `None` uses every other train identity.
    pub negatives: Option<usize>,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub pose_threshold_deg: f64,
    pub exclude_poses: bool,
    pub adam: AdamConfig,
    pub hidden: Vec<usize>,
    pub dropout: f64,
    /// Anchor and its impostors share one dropout mask in `h1`.
    pub shared_mask: bool,
    pub probe_episodes: usize,
    pub walk: PoseWalk,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.23,
            lr: 2e-4,
            batch_size: 32,
            negatives: Some(16),
            epochs: 30,
            steps_per_epoch: 50,
            pose_threshold_deg: 18.0,
            exclude_poses: true,
            adam: AdamConfig::default(),
            hidden: DEFAULT_HIDDEN.to_vec(),
            dropout: 0.2,
            shared_mask: true,
            probe_episodes: 128,
            walk: PoseWalk::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ConfigInvalid(m.to_string()));
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must lie in [0, 1]");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 || self.epochs == 0 || self.steps_per_epoch == 0 {
            return bad("batch_size, epochs and steps_per_epoch must be ≥ 1");
        }
        if self.negatives == Some(0) {
            return bad("negatives must be ≥ 1");
        }
        if !(self.pose_threshold_deg > 0.0 && self.pose_threshold_deg <= 90.0) {
            return bad("pose_threshold_deg must lie in (0, 90]");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        self.walk.validate()
    }

    fn negative_count(&self, train_ids: usize) -> usize {
        let pool = train_ids.saturating_sub(1);
        self.negatives.map_or(pool, |cap| cap.min(pool))
    }
}

fn sample_anchor_pose(world: &World, cfg: &TrainConfig, rng: &mut Rng) -> Result<PoseState> {
    for _ in 0..ANCHOR_RETRIES {
        let pose = world_pose(world, cfg, rng);
        if !cfg.exclude_poses {
            return Ok(pose);
        }
        let n = face_normal(&pose);
        if n.0[2].clamp(-1.0, 1.0).acos().to_degrees() <= cfg.pose_threshold_deg {
            return Ok(pose);
        }
    }
    Err(Error::InfeasibleSampling(ANCHOR_RETRIES))
}

fn world_pose(world: &World, cfg: &TrainConfig, rng: &mut Rng) -> PoseState {
    cfg.walk.sample_pose(world.cfg.expr_dim(), rng)
}

/// Draws one episode: anchor identity uniform over `train_ids`, anchor pose
/// from the walk (resampled while it fails the pose filter), impostors
/// without replacement at exactly that pose.
pub fn sample_episode(world: &World, train_ids: &[usize], rng: &mut Rng, cfg: &TrainConfig) -> Result<Episode> {
    if train_ids.len() < 2 {
        return Err(Error::TooFewIdentities(format!("{} train identities; episodes need ≥ 2", train_ids.len())));
    }
    let k = train_ids[rng.below(train_ids.len())];
    let pose = sample_anchor_pose(world, cfg, rng)?;
    let anchor = world.embed(k, &pose, 0, rng)?;
    let others: Vec<usize> = train_ids.iter().copied().filter(|&l| l != k).collect();
    let picked = rng.sample_distinct(&others, cfg.negative_count(train_ids.len()));
    let negatives = picked.into_iter().map(|l| world.embed(l, &pose, 0, rng)).collect::<Result<Vec<_>>>()?;
    Ok(Episode { anchor, pos_ref: world.reference(k)?, negatives })
}

/// `L_P = 1 − b(z_anchor, R_k)`.
pub fn loss_positive<S: BiometricScore>(s: &S, ep: &Episode) -> Result<f64> {
    Ok(1.0 - s.score(&ep.anchor.z, &ep.pos_ref.embedded)?)
}

/// `L_N`: mean over impostors ℓ of `b(z^{ℓ,p}, R_k)`.
pub fn loss_negative<S: BiometricScore>(s: &S, ep: &Episode) -> Result<f64> {
    if ep.negatives.is_empty() {
        return Err(Error::NoNegatives);
    }
    let mut total = 0.0;
    for n in &ep.negatives {
        total += s.score(&n.z, &ep.pos_ref.embedded)?;
    }
    Ok(total / ep.negatives.len() as f64)
}

pub fn loss_total<S: BiometricScore>(s: &S, ep: &Episode, lambda: f64) -> Result<f64> {
    Ok(loss_positive(s, ep)? + lambda * loss_negative(s, ep)?)
}

/// Batch objective and its gradient for both heads.
pub struct BatchGrad {
    pub l_p: f64,
    pub l_n: f64,
    pub grad: EblPair,
}

/// Mean `L_B` over `episodes` with exact gradients. `dropout` drives the
/// train-mode masks; `None` evaluates with dropout off.
pub fn batch_loss_grad(
    pair: &EblPair,
    episodes: &[Episode],
    lambda: f64,
    dropout: Option<(&mut Rng, bool)>,
) -> Result<BatchGrad> {
    let b = episodes.len();
    if b == 0 {
        return Err(Error::ConfigInvalid("empty batch".into()));
    }
    let n_neg = episodes[0].negatives.len();
    if n_neg == 0 {
        return Err(Error::NoNegatives);
    }
    if episodes.iter().any(|e| e.negatives.len() != n_neg) {
        return Err(Error::ConfigInvalid("episodes in a batch must have equal impostor counts".into()));
    }
    let per = n_neg + 1;
    let d = pair.h1.input_dim();
    let mut x1 = Mat64::zeros(b * per, d);
    let mut x2 = Mat64::zeros(b, d);
    for (e, ep) in episodes.iter().enumerate() {
        x1.row_mut(e * per).copy_from_slice(&ep.anchor.z);
        for (j, n) in ep.negatives.iter().enumerate() {
            x1.row_mut(e * per + 1 + j).copy_from_slice(&n.z);
        }
        x2.row_mut(e).copy_from_slice(&ep.pos_ref.embedded);
    }
    let (c1, c2) = match dropout {
        Some((rng, shared)) => {
            let group = if shared { per } else { 1 };
            let c1 = pair.h1.forward_train(&x1, Some(Dropout { rng, group }))?;
            let c2 = pair.h2.forward_train(&x2, Some(Dropout { rng, group: 1 }))?;
            (c1, c2)
        }
        None => (pair.h1.forward_train(&x1, None)?, pair.h2.forward_train(&x2, None)?),
    };
    let (u, r) = (c1.output(), c2.output());
    let out_dim = u.cols();
    let mut du = Mat64::zeros(b * per, out_dim);
    let mut dr = Mat64::zeros(b, out_dim);
    let (mut l_p, mut l_n) = (0.0, 0.0);
    let scale = 1.0 / b as f64;
    let neg_w = lambda / n_neg as f64;
    for e in 0..b {
        let re = r.row(e);
        let dot = |row: &[f64]| row.iter().zip(re).map(|(a, c)| a * c).sum::<f64>();
        l_p += 1.0 - dot(u.row(e * per));
        for j in 1..per {
            l_n += dot(u.row(e * per + j)) / n_neg as f64;
        }
        du.row_mut(e * per).iter_mut().zip(re).for_each(|(g, v)| *g = -v * scale);
        for j in 1..per {
            du.row_mut(e * per + j).iter_mut().zip(re).for_each(|(g, v)| *g = neg_w * v * scale);
        }
        let dre = dr.row_mut(e);
        for (k, g) in dre.iter_mut().enumerate() {
            let mut acc = -u.get(e * per, k);
            for j in 1..per {
                acc += neg_w * u.get(e * per + j, k);
            }
            *g = acc * scale;
        }
    }
    let mut grad = EblPair { h1: pair.h1.zeros_like(), h2: pair.h2.zeros_like() };
    pair.h1.backward(&c1, &du, &mut grad.h1)?;
    pair.h2.backward(&c2, &dr, &mut grad.h2)?;
    Ok(BatchGrad { l_p: l_p * scale, l_n: l_n * scale, grad })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub l_p: f64,
    pub l_n: f64,
    pub l_b: f64,
    /// `1 −` mean matched cosine on the probe set.
    pub eps_stat: f64,
    /// `−` mean pose-matched impostor cosine on the probe set.
    pub gamma_stat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainingReport {
    pub lambda: f64,
    pub initial_eps: f64,
    pub initial_gamma: f64,
    pub epochs: Vec<EpochStats>,
}

impl TrainingReport {
    pub fn last(&self) -> &EpochStats {
        self.epochs.last().expect("at least one epoch")
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "L_P", "L_N", "L_B", "eps_stat", "gamma_stat"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                format!("{:.10}", e.l_p),
                format!("{:.10}", e.l_n),
                format!("{:.10}", e.l_b),
                format!("{:.10}", e.eps_stat),
                format!("{:.10}", e.gamma_stat),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Mean matched and impostor cosines over fixed episodes, eval mode.
pub fn probe_stats<S: BiometricScore>(s: &S, probe: &[Episode]) -> Result<(f64, f64)> {
    let mut pairs: Vec<(&[f64], &[f64])> = Vec::new();
    for ep in probe {
        if ep.negatives.is_empty() {
            return Err(Error::NoNegatives);
        }
        pairs.push((&ep.anchor.z, &ep.pos_ref.embedded));
        pairs.extend(ep.negatives.iter().map(|n| (&n.z[..], &ep.pos_ref.embedded[..])));
    }
    let scores = s.score_pairs(&pairs)?;
    let (mut m, mut i, mut at) = (0.0, 0.0, 0);
    for ep in probe {
        m += scores[at];
        let k = ep.negatives.len();
        i += scores[at + 1..at + 1 + k].iter().sum::<f64>() / k as f64;
        at += 1 + k;
    }
    let n = probe.len().max(1) as f64;
    Ok((m / n, i / n))
}

/// Adam on `h1` and `h2` jointly over `epochs × steps_per_epoch` batches.
pub fn train_ebl(world: &World, train_ids: &[usize], cfg: &TrainConfig) -> Result<(EblPair, TrainingReport)> {
    cfg.validate()?;
    if train_ids.len() < 2 {
        return Err(Error::TooFewIdentities(format!("{} train identities; need ≥ 2", train_ids.len())));
    }
    let root = Rng::new(cfg.seed);
    let mut pair = init_heads(&root.split(10), &cfg.hidden)?;
    pair.h1.dropout = cfg.dropout;
    pair.h2.dropout = cfg.dropout;
    let mut probe_rng = root.split(11);
    let probe = (0..cfg.probe_episodes)
        .map(|_| sample_episode(world, train_ids, &mut probe_rng, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut episode_rng = root.split(12);
    let mut mask_rng = root.split(13);

    let shapes: Vec<usize> = pair.h1.tensors().iter().chain(pair.h2.tensors().iter()).map(|t| t.len()).collect();
    let mut adam = Adam::new(cfg.adam, cfg.lr, &shapes);
    let (m0, i0) = probe_stats(&pair, &probe)?;
    let mut report = TrainingReport { lambda: cfg.lambda, initial_eps: 1.0 - m0, initial_gamma: -i0, epochs: Vec::new() };

    for epoch in 1..=cfg.epochs {
        let (mut sp, mut sn) = (0.0, 0.0);
        for _ in 0..cfg.steps_per_epoch {
            let batch = (0..cfg.batch_size)
                .map(|_| sample_episode(world, train_ids, &mut episode_rng, cfg))
                .collect::<Result<Vec<_>>>()?;
            let bg = batch_loss_grad(&pair, &batch, cfg.lambda, Some((&mut mask_rng, cfg.shared_mask)))?;
            if !(bg.l_p.is_finite() && bg.l_n.is_finite()) {
                return Err(Error::Diverged(format!("non-finite loss in epoch {epoch}")));
            }
            sp += bg.l_p;
            sn += bg.l_n;
            let grads: Vec<&[f64]> = bg.grad.h1.tensors().into_iter().chain(bg.grad.h2.tensors()).collect();
            let params: Vec<&mut [f64]> = pair.h1.tensors_mut().into_iter().chain(pair.h2.tensors_mut()).collect();
            adam.step(params, grads);
        }
        if !(pair.h1.is_finite() && pair.h2.is_finite()) {
            return Err(Error::Diverged(format!("non-finite parameters after epoch {epoch}")));
        }
        let steps = cfg.steps_per_epoch as f64;
        let (m, i) = probe_stats(&pair, &probe)?;
        report.epochs.push(EpochStats {
            epoch,
            l_p: sp / steps,
            l_n: sn / steps,
            l_b: (sp + cfg.lambda * sn) / steps,
            eps_stat: 1.0 - m,
            gamma_stat: -i,
        });
    }
    Ok((pair, report))
}
