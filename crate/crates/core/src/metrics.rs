//! Detection metrics, similarity histograms and the train → fuse → evaluate
//! pipeline behind the sweeps.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::ebl::EblPair;
use crate::error::{Error, Result};
use crate::numerics::{dot, Mat64, Rng};
use crate::temporal::{score_session, session_score, train_fusion, FusionConfig, FusionModel};
use crate::trainer::{train_ebl, TrainConfig};
use crate::world::{PoseWalk, Session, World, WorldConfig};

pub const HIST_BINS: usize = 64;

/// Mann–Whitney AUC: `P(s⁺ > s⁻) + ½·P(s⁺ = s⁻)`, exact over tie groups.
pub fn auc(scores: &[(f64, u8)]) -> Result<f64> {
    let mut sorted: Vec<(f64, u8)> = scores.to_vec();
    if sorted.iter().any(|s| s.0.is_nan()) {
        return Err(Error::NonFiniteEvaluation);
    }
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let n_pos = sorted.iter().filter(|s| s.1 != 0).count() as u64;
    let n_neg = sorted.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::OneClassOnly);
    }
    // Twice the concordant-pair count, so ties stay integral.
    let (mut twice, mut neg_below, mut i) = (0u64, 0u64, 0usize);
    while i < sorted.len() {
        let mut j = i;
        let (mut p, mut n) = (0u64, 0u64);
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            if sorted[j].1 != 0 {
                p += 1
            } else {
                n += 1
            }
            j += 1;
        }
        twice += 2 * p * neg_below + p * n;
        neg_below += n;
        i = j;
    }
    Ok(twice as f64 / 2.0 / (n_pos * n_neg) as f64)
}

/// Relative error reduction `(ours − other) / (1 − other)`.
pub fn rer(auc_ours: f64, auc_other: f64) -> Result<f64> {
    if auc_other == 1.0 {
        return Err(Error::DivisionByZero("rer with a perfect baseline"));
    }
    Ok((auc_ours - auc_other) / (1.0 - auc_other))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// 64 equal bins over `[−1, 1]`; the last bin is closed.
    pub counts: Vec<u64>,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Histogram {
    pub fn from_samples(samples: &[f64]) -> Self {
        let mut counts = vec![0u64; HIST_BINS];
        for &v in samples {
            let b = (((v + 1.0) / 2.0) * HIST_BINS as f64).floor();
            counts[(b.max(0.0) as usize).min(HIST_BINS - 1)] += 1;
        }
        let n = samples.len();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n.max(2) - 1) as f64;
        Self { counts, mean, std: var.sqrt(), n }
    }

    pub fn std_error(&self) -> f64 {
        self.std / (self.n as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityHistograms {
    pub same_id_diff_pose: Histogram,
    pub diff_id_same_pose: Histogram,
    pub diff_id_diff_pose: Histogram,
}

/// Where frame pairs are compared.
#[derive(Debug, Clone, Copy)]
pub enum Space<'a> {
    Raw,
    /// Both frames through `h1`.
    Ebl(&'a EblPair),
}

fn pair_cosines(space: Space<'_>, a: &Mat64, b: &Mat64) -> Result<Vec<f64>> {
    let (ea, eb) = match space {
        Space::Raw => (a.clone(), b.clone()),
        Space::Ebl(p) => (p.h1.forward(a)?, p.h1.forward(b)?),
    };
    Ok((0..a.rows()).map(|i| dot(ea.row(i), eb.row(i)).clamp(-1.0, 1.0)).collect())
}

/// Monte-Carlo cosine distributions of the three pair types over `ids`.
pub fn similarity_histograms(
    world: &World,
    ids: &[usize],
    space: Space<'_>,
    n_samples: usize,
    walk: &PoseWalk,
    seed: u64,
) -> Result<SimilarityHistograms> {
    if n_samples < 100 {
        return Err(Error::ConfigInvalid(format!("need ≥ 100 samples per histogram, got {n_samples}")));
    }
    if ids.len() < 2 {
        return Err(Error::TooFewIdentities("histograms need two identities".into()));
    }
    let mut rng = Rng::new(seed).split(0x4849_5354);
    let d = world.latent_dim();
    let ed = world.cfg.expr_dim();
    let mut hists = Vec::with_capacity(3);
    for (same_id, same_pose) in [(true, false), (false, true), (false, false)] {
        let mut a = Mat64::zeros(n_samples, d);
        let mut b = Mat64::zeros(n_samples, d);
        for r in 0..n_samples {
            let k = ids[rng.below(ids.len())];
            let l = if same_id {
                k
            } else {
                let others: Vec<usize> = ids.iter().copied().filter(|&x| x != k).collect();
                others[rng.below(others.len())]
            };
            let p1 = walk.sample_pose(ed, &mut rng);
            let p2 = if same_pose { p1.clone() } else { walk.sample_pose(ed, &mut rng) };
            a.row_mut(r).copy_from_slice(&world.embed(k, &p1, 0, &mut rng)?.z);
            b.row_mut(r).copy_from_slice(&world.embed(l, &p2, 0, &mut rng)?.z);
        }
        hists.push(Histogram::from_samples(&pair_cosines(space, &a, &b)?));
    }
    let diff_id_diff_pose = hists.pop().unwrap();
    let diff_id_same_pose = hists.pop().unwrap();
    let same_id_diff_pose = hists.pop().unwrap();
    Ok(SimilarityHistograms { same_id_diff_pose, diff_id_same_pose, diff_id_diff_pose })
}

pub fn write_histograms_csv<W: Write>(h: &SimilarityHistograms, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["bin_lo", "bin_hi", "same_id_diff_pose", "diff_id_same_pose", "diff_id_diff_pose"])?;
    for i in 0..HIST_BINS {
        let lo = -1.0 + 2.0 * i as f64 / HIST_BINS as f64;
        let hi = lo + 2.0 / HIST_BINS as f64;
        w.write_record([
            format!("{lo}"),
            format!("{hi}"),
            h.same_id_diff_pose.counts[i].to_string(),
            h.diff_id_same_pose.counts[i].to_string(),
            h.diff_id_diff_pose.counts[i].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub sessions: usize,
    pub session_frames: usize,
    pub stride: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { sessions: 200, session_frames: 300, stride: 5, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionResult {
    pub driving_id: usize,
    pub target_id: usize,
    pub label: u8,
    /// Mean window probability; 0.5 when no full window survives exclusion.
    pub score: f64,
    /// Mean raw cosine against the reference over the frames the windows cover.
    pub raw_score: f64,
    pub windows: usize,
}

/// Scores one session with the pipeline and the raw baseline.
pub fn score_with_baseline(ebl: &EblPair, fusion: &FusionModel, session: &Session, stride: usize) -> Result<SessionResult> {
    let scores = fusion.frame_scores(ebl, &session.reference, &session.frames)?;
    let kept: Vec<usize> = scores.iter().enumerate().filter(|s| s.1.kept).map(|s| s.0).collect();
    let starts = fusion.window_starts(kept.len(), stride);
    let covered: &[usize] = match starts.last() {
        Some(&s) => &kept[..s + fusion.window],
        None if !kept.is_empty() => &kept,
        None => &[],
    };
    let raw_score = if covered.is_empty() {
        0.0
    } else {
        covered.iter().map(|&i| dot(&session.frames[i].z, &session.reference.embedded)).sum::<f64>() / covered.len() as f64
    };
    let (score, windows) = match score_session(ebl, fusion, session, stride) {
        Ok(w) => (session_score(&w), w.len()),
        Err(Error::InsufficientFrames { .. }) => (0.5, 0),
        Err(e) => return Err(e),
    };
    Ok(SessionResult {
        driving_id: session.driving_id,
        target_id: session.target_id,
        label: session.label(),
        score,
        raw_score,
        windows,
    })
}

/// Balanced held-out sessions over `test_ids`, each scored.
pub fn evaluate(
    world: &World,
    test_ids: &[usize],
    ebl: &EblPair,
    fusion: &FusionModel,
    walk: &PoseWalk,
    cfg: &EvalConfig,
) -> Result<Vec<SessionResult>> {
    let mut rng = Rng::new(cfg.seed).split(0x4556_414c);
    let sessions = world.balanced_sessions(test_ids, cfg.sessions, cfg.session_frames, walk, &mut rng)?;
    sessions.iter().map(|s| score_with_baseline(ebl, fusion, s, cfg.stride)).collect()
}

/// `(pipeline AUC, raw-cosine AUC)`; low raw cosine means puppeteered.
pub fn result_aucs(results: &[SessionResult]) -> Result<(f64, f64)> {
    let ours: Vec<(f64, u8)> = results.iter().map(|r| (r.score, r.label)).collect();
    let raw: Vec<(f64, u8)> = results.iter().map(|r| (-r.raw_score, r.label)).collect();
    Ok((auc(&ours)?, auc(&raw)?))
}

pub fn write_results_csv<W: Write>(results: &[SessionResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["session", "driving_id", "target_id", "label", "score", "raw_score", "windows"])?;
    for (i, r) in results.iter().enumerate() {
        w.write_record([
            i.to_string(),
            r.driving_id.to_string(),
            r.target_id.to_string(),
            r.label.to_string(),
            format!("{}", r.score),
            format!("{}", r.raw_score),
            r.windows.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Everything one end-to-end run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub world: WorldConfig,
    pub test_fraction: f64,
    pub train: TrainConfig,
    pub fusion: FusionConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            test_fraction: 0.2,
            train: TrainConfig::default(),
            fusion: FusionConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Same config with every training and evaluation stream keyed to `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.train.seed = seed;
        c.fusion.seed = seed;
        c.eval.seed = seed;
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineResult {
    pub auc: f64,
    pub raw_auc: f64,
    pub eps_stat: f64,
    pub gamma_stat: f64,
}

/// Identity pools for a run: `(train, test)`. Train can be capped to the
/// first `n` of the world's train side.
pub fn pipeline_split(world: &World, test_fraction: f64, n_train: Option<usize>) -> Result<(Vec<usize>, Vec<usize>)> {
    let (mut train, test) = world.make_split(test_fraction)?;
    if let Some(n) = n_train {
        if n < 2 || n > train.len() {
            return Err(Error::TooFewIdentities(format!("{n} train identities requested, {} available", train.len())));
        }
        let mut shuffled = train.clone();
        Rng::new(world.cfg.seed).split(4).shuffle(&mut shuffled);
        train = shuffled[..n].to_vec();
        train.sort_unstable();
    }
    Ok((train, test))
}

/// Trains the heads and the fusion model, then evaluates on held-out ids.
pub fn run_pipeline(world: &World, train: &[usize], test: &[usize], cfg: &PipelineConfig) -> Result<(PipelineResult, EblPair, FusionModel)> {
    let (pair, report) = train_ebl(world, train, &cfg.train)?;
    let (fusion, _) = train_fusion(&pair, world, train, &cfg.fusion)?;
    let results = evaluate(world, test, &pair, &fusion, &cfg.fusion.walk, &cfg.eval)?;
    let (auc, raw_auc) = result_aucs(&results)?;
    let last = report.last();
    Ok((PipelineResult { auc, raw_auc, eps_stat: last.eps_stat, gamma_stat: last.gamma_stat }, pair, fusion))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    Window,
    Identities,
    Yaw,
    Lambda,
}

impl std::str::FromStr for SweepKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "window" => Ok(Self::Window),
            "identities" => Ok(Self::Identities),
            "yaw" | "yaw_threshold" => Ok(Self::Yaw),
            "lambda" => Ok(Self::Lambda),
            _ => Err(Error::ConfigInvalid(format!("unknown sweep kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub setting: f64,
    pub auc: f64,
    pub seed: u64,
}

/// Runs every grid setting under every seed, rows in grid-then-seed order.
///
/// Window and yaw settings retrain only the fusion stage on heads trained once
/// per seed. Identity settings build a world with `max(grid)` train
/// identities plus a fixed held-out side and train on the first `n`.
pub fn run_sweep(kind: SweepKind, grid: &[f64], seeds: &[u64], base: &PipelineConfig) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::ConfigInvalid("empty sweep grid".into()));
    }
    if seeds.is_empty() {
        return Err(Error::ConfigInvalid("no sweep seeds".into()));
    }
    let mut rows = Vec::new();
    match kind {
        SweepKind::Window | SweepKind::Yaw => {
            let world = World::build(base.world.clone())?;
            let (train, test) = pipeline_split(&world, base.test_fraction, None)?;
            let mut per_seed = Vec::new();
            for &seed in seeds {
                let cfg = base.with_seed(seed);
                per_seed.push(train_ebl(&world, &train, &cfg.train)?.0);
            }
            for &g in grid {
                for (&seed, pair) in seeds.iter().zip(&per_seed) {
                    let mut cfg = base.with_seed(seed);
                    match kind {
                        SweepKind::Window => {
                            if g < 1.0 || g.fract() != 0.0 {
                                return Err(Error::ConfigInvalid(format!("window {g} must be a positive integer")));
                            }
                            cfg.fusion.window = g as usize;
                        }
                        _ => cfg.fusion.pose_threshold_deg = g,
                    }
                    let (fusion, _) = train_fusion(pair, &world, &train, &cfg.fusion)?;
                    let results = evaluate(&world, &test, pair, &fusion, &cfg.fusion.walk, &cfg.eval)?;
                    rows.push(SweepRow { setting: g, auc: result_aucs(&results)?.0, seed });
                }
            }
        }
        SweepKind::Identities => {
            let max = grid.iter().cloned().fold(0.0, f64::max);
            if grid.iter().any(|&g| g < 2.0 || g.fract() != 0.0) {
                return Err(Error::ConfigInvalid("identity counts must be integers ≥ 2".into()));
            }
            let max = max as usize;
            let n_test = ((base.test_fraction * max as f64).round() as usize).max(2);
            let total = max + n_test;
            let world = World::build(WorldConfig { num_identities: total, ..base.world.clone() })?;
            let frac = n_test as f64 / total as f64;
            for &g in grid {
                for &seed in seeds {
                    let (train, test) = pipeline_split(&world, frac, Some(g as usize))?;
                    let cfg = base.with_seed(seed);
                    rows.push(SweepRow { setting: g, auc: run_pipeline(&world, &train, &test, &cfg)?.0.auc, seed });
                }
            }
        }
        SweepKind::Lambda => {
            let world = World::build(base.world.clone())?;
            let (train, test) = pipeline_split(&world, base.test_fraction, None)?;
            for &g in grid {
                for &seed in seeds {
                    let mut cfg = base.with_seed(seed);
                    cfg.train.lambda = g;
                    rows.push(SweepRow { setting: g, auc: run_pipeline(&world, &train, &test, &cfg)?.0.auc, seed });
                }
            }
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["setting", "auc", "seed"])?;
    for r in rows {
        w.write_record([format!("{}", r.setting), format!("{}", r.auc), r.seed.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepSummary {
    pub kind: SweepKind,
    /// `(setting, median AUC over seeds)` in grid order.
    pub medians: Vec<(f64, f64)>,
}

pub fn summarize_sweep(kind: SweepKind, grid: &[f64], rows: &[SweepRow]) -> SweepSummary {
    let medians = grid
        .iter()
        .map(|&g| (g, median(&rows.iter().filter(|r| r.setting == g).map(|r| r.auc).collect::<Vec<_>>())))
        .collect();
    SweepSummary { kind, medians }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute(scores: &[(f64, u8)]) -> f64 {
        let mut c = 0.0;
        let mut pairs = 0.0;
        for p in scores.iter().filter(|s| s.1 == 1) {
            for n in scores.iter().filter(|s| s.1 == 0) {
                pairs += 1.0;
                if p.0 > n.0 {
                    c += 1.0
                } else if p.0 == n.0 {
                    c += 0.5
                }
            }
        }
        c / pairs
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[(0.1, 0), (0.9, 1)]).unwrap(), 1.0);
        // Only (0.3⁺, 0.2⁻) of the four pairs is concordant.
        assert_eq!(auc(&[(0.1, 1), (0.2, 0), (0.3, 1), (0.4, 0)]).unwrap(), 0.25);
        assert_eq!(auc(&[(0.1, 1), (0.2, 0), (0.3, 0), (0.4, 1)]).unwrap(), 0.5);
        assert_eq!(auc(&[(0.5, 1), (0.5, 0)]).unwrap(), 0.5);
        assert!(matches!(auc(&[(0.1, 1), (0.2, 1)]), Err(Error::OneClassOnly)));
    }

    #[test]
    fn auc_matches_pairwise_oracle_with_ties() {
        let mut rng = Rng::new(1);
        for _ in 0..200 {
            let n = 2 + rng.below(60);
            let mut s: Vec<(f64, u8)> = (0..n).map(|_| ((rng.below(8) as f64) / 4.0, rng.below(2) as u8)).collect();
            s[0].1 = 0;
            s[1].1 = 1;
            assert_eq!(auc(&s).unwrap(), brute(&s));
        }
    }

    #[test]
    fn rer_values() {
        assert!((rer(0.966, 0.827).unwrap() - 0.8035).abs() < 5e-4);
        assert_eq!(rer(0.7, 0.7).unwrap(), 0.0);
        assert_eq!(rer(1.0, 0.5).unwrap(), 1.0);
        assert!(matches!(rer(0.9, 1.0), Err(Error::DivisionByZero(_))));
    }

    #[test]
    fn histogram_binning() {
        let h = Histogram::from_samples(&[-1.0, -0.99, 0.0, 0.999, 1.0]);
        assert_eq!(h.counts.len(), HIST_BINS);
        assert_eq!(h.counts[0], 2);
        assert_eq!(h.counts[32], 1);
        assert_eq!(h.counts[63], 2);
        assert_eq!(h.counts.iter().sum::<u64>(), 5);
    }

    #[test]
    fn raw_space_shows_pose_dominance() {
        let world = World::build(WorldConfig { num_identities: 12, ..Default::default() }).unwrap();
        let ids: Vec<usize> = (0..12).collect();
        let h = similarity_histograms(&world, &ids, Space::Raw, 2000, &PoseWalk::default(), 1).unwrap();
        assert!(h.diff_id_same_pose.mean > h.same_id_diff_pose.mean);
    }

    #[test]
    fn no_leakage_makes_identity_invisible() {
        let world = World::build(WorldConfig { num_identities: 6, leakage_gain: 0.0, ..Default::default() }).unwrap();
        let ids: Vec<usize> = (0..6).collect();
        let h = similarity_histograms(&world, &ids, Space::Raw, 4000, &PoseWalk::default(), 2).unwrap();
        let se = (h.same_id_diff_pose.std_error().powi(2) + h.diff_id_diff_pose.std_error().powi(2)).sqrt();
        assert!((h.same_id_diff_pose.mean - h.diff_id_diff_pose.mean).abs() <= 3.0 * se);
    }

    #[test]
    fn sweep_rejects_empty_grid() {
        assert!(matches!(run_sweep(SweepKind::Window, &[], &[0], &PipelineConfig::default()), Err(Error::ConfigInvalid(_))));
    }

    #[test]
    fn sweep_csv_header() {
        let mut buf = Vec::new();
        write_sweep_csv(&[SweepRow { setting: 5.0, auc: 0.75, seed: 0 }], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "setting,auc,seed\n5,0.75,0\n");
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
