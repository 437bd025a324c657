//! Face-normal regressor `r(z)`: a 257 → 64 → 16 → 3 ReLU MLP trained on
//! `L_n = ‖n − r(z)‖₂` against the world's true normals.

use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::ebl::Linear;
use crate::error::{Error, Result};
use crate::numerics::{gemm, l2_normalize, Mat64, Rng, Trans};
use crate::optim::{Adam, AdamConfig};
use crate::world::{face_normal, PoseWalk, World};

pub const REGRESSOR_WIDTHS: [usize; 4] = [257, 64, 16, 3];

#[derive(Debug, Clone, PartialEq)]
pub struct NormalRegressor {
    pub layers: Vec<Linear>,
}

struct Cache {
    inputs: Vec<Mat64>,
    pre: Vec<Mat64>,
}

impl NormalRegressor {
    pub fn new(widths: &[usize], rng: &mut Rng) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) || *widths.last().unwrap() != 3 {
            return Err(Error::BadArchitecture(format!("regressor widths {widths:?}")));
        }
        let layers = widths
            .windows(2)
            .map(|io| {
                let bound = (6.0 / (io[0] + io[1]) as f64).sqrt();
                Linear { w: Mat64::from_fn(io[1], io[0], |_, _| rng.uniform_range(-bound, bound)), b: vec![0.0; io[1]] }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.cols()
    }

    fn tensors(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| [l.w.data(), &l.b[..]]).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(|l| [l.w.data_mut(), &mut l.b[..]]).collect()
    }

    fn run(&self, x: &Mat64, keep: bool) -> (Mat64, Option<Cache>) {
        let mut cache = keep.then(|| Cache { inputs: Vec::new(), pre: Vec::new() });
        let mut cur = x.clone();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut h = Mat64::zeros(cur.rows(), l.b.len());
            for r in 0..cur.rows() {
                h.row_mut(r).copy_from_slice(&l.b);
            }
            gemm(1.0, &cur, Trans::N, &l.w, Trans::T, 1.0, &mut h);
            let mut next = h.clone();
            if i < last {
                next.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            }
            if let Some(c) = cache.as_mut() {
                c.inputs.push(std::mem::replace(&mut cur, next));
                c.pre.push(h);
            } else {
                cur = next;
            }
        }
        (cur, cache)
    }

    /// Raw (unnormalized) predictions for a row batch.
    pub fn predict(&self, x: &Mat64) -> Mat64 {
        self.run(x, false).0
    }

    /// Unit normal estimate for one latent; `None` if the raw output is zero.
    pub fn normal(&self, z: &[f64]) -> Option<Vec<f64>> {
        let m = Mat64::from_vec(1, z.len(), z.to_vec()).ok()?;
        let out = self.predict(&m);
        l2_normalize(out.row(0)).ok().map(|v| v.into_inner())
    }

    fn backward(&self, cache: &Cache, dout: Mat64, grads: &mut [Linear]) {
        let mut d = dout;
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                d.data_mut().iter_mut().zip(cache.pre[i].data()).for_each(|(g, p)| {
                    if *p <= 0.0 {
                        *g = 0.0
                    }
                });
            }
            gemm(1.0, &d, Trans::T, &cache.inputs[i], Trans::N, 1.0, &mut grads[i].w);
            for r in 0..d.rows() {
                grads[i].b.iter_mut().zip(d.row(r)).for_each(|(g, v)| *g += v);
            }
            if i > 0 {
                let mut dx = Mat64::zeros(d.rows(), self.layers[i].w.cols());
                gemm(1.0, &d, Trans::N, &self.layers[i].w, Trans::N, 0.0, &mut dx);
                d = dx;
            }
        }
    }

    /// Mean `‖n − r(z)‖₂` over a batch and its parameter gradient.
    pub fn loss_and_grad(&self, x: &Mat64, normals: &Mat64) -> (f64, Vec<Linear>) {
        let (y, cache) = self.run(x, true);
        let n = x.rows() as f64;
        let mut dout = Mat64::zeros(y.rows(), 3);
        let mut total = 0.0;
        for r in 0..y.rows() {
            let diff: Vec<f64> = y.row(r).iter().zip(normals.row(r)).map(|(a, b)| a - b).collect();
            let len = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
            total += len;
            if len > 0.0 {
                dout.row_mut(r).iter_mut().zip(&diff).for_each(|(g, d)| *g = d / len / n);
            }
        }
        let mut grads: Vec<Linear> =
            self.layers.iter().map(|l| Linear { w: Mat64::zeros(l.w.rows(), l.w.cols()), b: vec![0.0; l.b.len()] }).collect();
        self.backward(cache.as_ref().unwrap(), dout, &mut grads);
        (total / n, grads)
    }

    pub(crate) fn write(&self, w: &mut Writer) {
        w.u32(self.layers.len() as u32);
        for l in &self.layers {
            w.mat(&l.w);
            w.f64s(&l.b);
        }
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self> {
        let n = r.u32()? as usize;
        if n == 0 || n > 16 {
            return Err(Error::Malformed(format!("regressor with {n} layers")));
        }
        let mut layers = Vec::with_capacity(n);
        for _ in 0..n {
            let w = r.mat()?;
            let b = r.f64s(w.rows())?;
            layers.push(Linear { w, b });
        }
        let out = Self { layers };
        if out.layers.last().unwrap().b.len() != 3 || out.layers.windows(2).any(|p| p[0].w.rows() != p[1].w.cols()) {
            return Err(Error::Malformed("inconsistent regressor shapes".into()));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressorConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        Self { steps: 1500, batch_size: 64, lr: 1e-3, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegressorReport {
    /// Mean `L_n` per block of 100 steps.
    pub loss_curve: Vec<f64>,
    pub final_loss: f64,
}

fn regressor_batch(world: &World, ids: &[usize], walk: &PoseWalk, n: usize, rng: &mut Rng) -> Result<(Mat64, Mat64)> {
    let d = world.latent_dim();
    let mut x = Mat64::zeros(n, d);
    let mut y = Mat64::zeros(n, 3);
    for r in 0..n {
        let k = ids[rng.below(ids.len())];
        let pose = walk.sample_pose(world.cfg.expr_dim(), rng);
        let f = world.embed(k, &pose, 0, rng)?;
        x.row_mut(r).copy_from_slice(&f.z);
        y.row_mut(r).copy_from_slice(&face_normal(&pose).0);
    }
    Ok((x, y))
}

/// Adam-trains a fresh regressor on `(z, true normal)` pairs from `ids`.
pub fn train_normal_regressor(
    world: &World,
    ids: &[usize],
    walk: &PoseWalk,
    cfg: &RegressorConfig,
) -> Result<(NormalRegressor, RegressorReport)> {
    if ids.is_empty() {
        return Err(Error::TooFewIdentities("regressor needs at least one identity".into()));
    }
    let root = Rng::new(cfg.seed).split(0x4e4f_524d);
    let mut widths = REGRESSOR_WIDTHS.to_vec();
    widths[0] = world.latent_dim();
    let mut model = NormalRegressor::new(&widths, &mut root.split(1))?;
    let shapes: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
    let mut adam = Adam::new(AdamConfig::default(), cfg.lr, &shapes);
    let mut data_rng = root.split(2);
    let mut curve = Vec::new();
    let mut block = (0.0, 0usize);
    for step in 0..cfg.steps {
        let (x, y) = regressor_batch(world, ids, walk, cfg.batch_size, &mut data_rng)?;
        let (loss, grads) = model.loss_and_grad(&x, &y);
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("regressor loss {loss} at step {step}")));
        }
        let g: Vec<&[f64]> = grads.iter().flat_map(|l| [l.w.data(), &l.b[..]]).collect();
        adam.step(model.tensors_mut(), g);
        block.0 += loss;
        block.1 += 1;
        if block.1 == 100 || step + 1 == cfg.steps {
            curve.push(block.0 / block.1 as f64);
            block = (0.0, 0);
        }
    }
    let final_loss = curve.last().copied().unwrap_or(f64::NAN);
    Ok((model, RegressorReport { loss_curve: curve, final_loss }))
}

/// Mean angle in degrees between predicted and true normals.
pub fn mean_angular_error(model: &NormalRegressor, world: &World, ids: &[usize], walk: &PoseWalk, n: usize, seed: u64) -> Result<f64> {
    let (x, y) = regressor_batch(world, ids, walk, n, &mut Rng::new(seed).split(7))?;
    let pred = model.predict(&x);
    let mut total = 0.0;
    for r in 0..n {
        let c = crate::numerics::cosine_sim(pred.row(r), y.row(r))?;
        total += c.acos().to_degrees();
    }
    Ok(total / n as f64)
}
