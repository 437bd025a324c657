//! Numerical check of the angular-margin bound: if an anchor sits
//! within `arccos(1−ε)` of its class center and an impostor sample sits at
//! least `arccos(−γ)` from the anchor, the two class centers are separated by
//! at least `arccos(1−(ε+γ))`, provided the impostor's own center is close
//! enough to it.

use serde::{Deserialize, Serialize};

use crate::ebl::EblPair;
use crate::error::{Error, Result};
use crate::numerics::{angle, dot, l2_normalize, norm, Mat64, Rng};
use crate::trainer::{probe_stats, sample_episode, TrainConfig};
use crate::world::{PoseWalk, World};

const UNIT_TOL: f64 = 1e-9;
const SAMPLE_RETRIES: usize = 100;

fn check_unit(v: &[f64]) -> Result<()> {
    let n = norm(v);
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::NotUnitNorm(n));
    }
    Ok(())
}

/// `∠(a,c) ≥ |∠(a,b) − ∠(b,c)| − 1e-9` for unit vectors.
pub fn spherical_triangle_check(a: &[f64], b: &[f64], c: &[f64]) -> Result<bool> {
    for v in [a, b, c] {
        check_unit(v)?;
    }
    let (ab, bc, ac) = (angle(a, b)?, angle(b, c)?, angle(a, c)?);
    Ok(ac >= (ab - bc).abs() - 1e-9)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginConfig {
    pub epsilon: f64,
    pub gamma: f64,
    /// Largest angle between the impostor sample and its center, degrees.
    pub xi_max_deg: f64,
    pub dim: usize,
    pub trials: usize,
    pub seed: u64,
}

impl Default for MarginConfig {
    fn default() -> Self {
        Self { epsilon: 0.05, gamma: 0.05, xi_max_deg: 5.0, dim: 128, trials: 100_000, seed: 0 }
    }
}

impl MarginConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if !(0.0..1.0).contains(&self.epsilon) || !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("epsilon {} and gamma {} must lie in [0, 1)", self.epsilon, self.gamma));
        }
        if self.epsilon + self.gamma >= 1.0 {
            return bad(format!("epsilon + gamma = {} must be < 1", self.epsilon + self.gamma));
        }
        if !(self.xi_max_deg >= 0.0 && self.xi_max_deg <= 180.0) {
            return bad(format!("xi {}° outside [0, 180]", self.xi_max_deg));
        }
        if self.dim < 3 {
            return bad(format!("dim {} < 3", self.dim));
        }
        if self.trials == 0 {
            return bad("trials must be positive".into());
        }
        Ok(())
    }

    /// The asserted bound `1 − (ε+γ)` on the center cosine.
    pub fn bound(&self) -> f64 {
        1.0 - (self.epsilon + self.gamma)
    }

    /// Whether `ε, γ ≤ 0.1`, the regime the bound is meant for.
    pub fn in_stated_regime(&self) -> bool {
        self.epsilon <= 0.1 && self.gamma <= 0.1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub epsilon: f64,
    pub gamma: f64,
    pub xi_max_deg: f64,
    pub dim: usize,
    pub bound: f64,
    pub trials: usize,
    /// Trials whose side condition `ψ − ξ ≥ arccos(1−(ε+γ))` held.
    pub checked: usize,
    pub holds: usize,
    pub violations: usize,
    /// Smallest `bound − cos(μ_k, μ_ℓ)` over checked trials.
    pub min_gap: f64,
    pub in_stated_regime: bool,
}

/// A unit direction orthogonal to unit `center`.
fn orthogonal_dir(center: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
    for _ in 0..SAMPLE_RETRIES {
        let mut u = rng.normal_vec(center.len());
        let p = dot(&u, center);
        u.iter_mut().zip(center).for_each(|(x, c)| *x -= p * c);
        if norm(&u) >= 1e-6 {
            return Ok(l2_normalize(&u)?.into_inner());
        }
    }
    Err(Error::InfeasibleSampling(SAMPLE_RETRIES))
}

/// The unit vector at angle `theta` from unit `center` along unit `dir ⊥ center`.
fn rotate(center: &[f64], dir: &[f64], theta: f64) -> Result<Vec<f64>> {
    let v: Vec<f64> = center.iter().zip(dir).map(|(c, x)| theta.cos() * c + theta.sin() * x).collect();
    Ok(l2_normalize(&v)?.into_inner())
}

/// A unit vector at angle `theta` from `center`, in a uniform direction.
fn at_angle(center: &[f64], theta: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    let dir = orthogonal_dir(center, rng)?;
    rotate(center, &dir, theta)
}

/// Samples `(μ_k, v, w, μ_ℓ)` by angles. Coplanar draws keep all four on one
/// great circle, moving away from `μ_k`, where the triangle inequality is tight.
fn sample_config(cfg: &MarginConfig, coplanar: bool, rng: &mut Rng) -> Result<[Vec<f64>; 4]> {
    let theta = rng.uniform_range(0.0, (1.0 - cfg.epsilon).acos());
    let phi = rng.uniform_range((-cfg.gamma).acos(), std::f64::consts::PI);
    let xi = rng.uniform_range(0.0, cfg.xi_max_deg.to_radians());
    let mu_k = rng.unit_vec(cfg.dim).into_inner();
    if coplanar {
        let u = orthogonal_dir(&mu_k, rng)?;
        let at = |a: f64| rotate(&mu_k, &u, a);
        // Angles along the circle: v at θ, w at θ − φ (back towards and past μ_k), μ_ℓ a further ξ on.
        return Ok([mu_k.clone(), at(theta)?, at(theta - phi)?, at(theta - phi + xi)?]);
    }
    let v = at_angle(&mu_k, theta, rng)?;
    let w = at_angle(&v, phi, rng)?;
    let mu_l = at_angle(&w, xi, rng)?;
    Ok([mu_k, v, w, mu_l])
}

/// Monte-Carlo verification over sampled configurations satisfying the
/// hypotheses.
pub fn verify_margin(cfg: &MarginConfig) -> Result<VerificationReport> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed).split(0x4d41_5247);
    let target = cfg.bound().acos();
    let (mut checked, mut holds) = (0usize, 0usize);
    let mut min_gap = f64::INFINITY;
    for trial in 0..cfg.trials {
        let mut sample = None;
        for _ in 0..SAMPLE_RETRIES {
            let s = sample_config(cfg, trial % 2 == 1, &mut rng)?;
            if dot(&s[1], &s[0]) >= 1.0 - cfg.epsilon && dot(&s[1], &s[2]) <= -cfg.gamma {
                sample = Some(s);
                break;
            }
        }
        let [mu_k, v, w, mu_l] = sample.ok_or(Error::InfeasibleSampling(SAMPLE_RETRIES))?;
        let psi = angle(&v, &w)? - angle(&v, &mu_k)?;
        let xi = angle(&w, &mu_l)?;
        if psi - xi < target {
            continue;
        }
        checked += 1;
        let gap = cfg.bound() - dot(&mu_k, &mu_l);
        min_gap = min_gap.min(gap);
        if gap >= -1e-12 {
            holds += 1;
        }
    }
    Ok(VerificationReport {
        epsilon: cfg.epsilon,
        gamma: cfg.gamma,
        xi_max_deg: cfg.xi_max_deg,
        dim: cfg.dim,
        bound: cfg.bound(),
        trials: cfg.trials,
        checked,
        holds,
        violations: checked - holds,
        min_gap,
        in_stated_regime: cfg.in_stated_regime(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMargin {
    pub epsilon_hat: f64,
    pub gamma_hat: f64,
    /// Largest cosine between renormalized per-identity mean `h1` vectors.
    pub max_center_cos: f64,
    /// `1 − (ε̂ + γ̂)`, reported next to `max_center_cos`, not asserted.
    pub bound: f64,
}

/// In-mean `ε̂`, `γ̂` over pose-matched episodes, and the inter-center
/// cosine of mean `h1` embeddings per identity.
pub fn empirical_eps_gamma(
    pair: &EblPair,
    world: &World,
    ids: &[usize],
    walk: &PoseWalk,
    samples_per_id: usize,
    seed: u64,
) -> Result<EmpiricalMargin> {
    let cfg = TrainConfig { walk: walk.clone(), exclude_poses: false, ..Default::default() };
    let mut rng = Rng::new(seed).split(0x454d_5052);
    let episodes = (0..samples_per_id * ids.len())
        .map(|_| sample_episode(world, ids, &mut rng, &cfg))
        .collect::<Result<Vec<_>>>()?;
    let (m, i) = probe_stats(pair, &episodes)?;
    let mut centers = Vec::with_capacity(ids.len());
    for &k in ids {
        let mut zs = Mat64::zeros(samples_per_id, world.latent_dim());
        for r in 0..samples_per_id {
            let pose = walk.sample_pose(world.cfg.expr_dim(), &mut rng);
            zs.row_mut(r).copy_from_slice(&world.embed(k, &pose, r, &mut rng)?.z);
        }
        let e = pair.h1.forward(&zs)?;
        let mut mean = vec![0.0; e.cols()];
        for r in 0..e.rows() {
            mean.iter_mut().zip(e.row(r)).for_each(|(m, v)| *m += v);
        }
        centers.push(l2_normalize(&mean)?.into_inner());
    }
    let mut max_center_cos = -1.0f64;
    for a in 0..centers.len() {
        for b in a + 1..centers.len() {
            max_center_cos = max_center_cos.max(dot(&centers[a], &centers[b]));
        }
    }
    let (epsilon_hat, gamma_hat) = (1.0 - m, -i);
    Ok(EmpiricalMargin { epsilon_hat, gamma_hat, max_center_cos, bound: 1.0 - (epsilon_hat + gamma_hat) })
}
