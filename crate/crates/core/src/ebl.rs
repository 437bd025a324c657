//! Twin projection heads `h1` (live latents) and `h2` (reference portraits).
//!
//! Each head is six linear layers. Hidden layers run
//! `linear → ReLU → LayerNorm → dropout`; the last layer is linear followed by
//! ℓ2 normalization. Forward and backward work on row batches so every layer
//! is one GEMM.

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::numerics::{cosine_sim, gemm, Mat64, Rng, Trans, NORM_FLOOR};
use crate::world::{LatentFrame, ReferencePortrait};

pub const LN_EPS: f64 = 1e-5;
pub const NUM_LAYERS: usize = 6;
pub const DEFAULT_HIDDEN: [usize; 5] = [256, 256, 192, 160, 128];
pub const INPUT_DIM: usize = 257;
pub const OUTPUT_DIM: usize = 128;

const CKPT_MAGIC: &str = "EBLH";
const CKPT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `out × in`.
    pub w: Mat64,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EblHead {
    widths: Vec<usize>,
    pub layers: Vec<Linear>,
    pub norms: Vec<LayerNorm>,
    pub dropout: f64,
    /// Bumped on every mutable parameter access; caches remember it.
    version: u64,
}

/// Equal parameters; the cache version is bookkeeping and ignored.
impl PartialEq for EblHead {
    fn eq(&self, other: &Self) -> bool {
        self.widths == other.widths && self.layers == other.layers && self.norms == other.norms && self.dropout == other.dropout
    }
}

/// Activations kept by a train-mode forward for the matching backward.
#[derive(Debug, Clone)]
pub struct HeadCache {
    version: u64,
    inputs: Vec<Mat64>,
    pre: Vec<Mat64>,
    xhat: Vec<Mat64>,
    inv_std: Vec<Vec<f64>>,
    masks: Vec<Option<Mat64>>,
    raw_norm: Vec<f64>,
    out: Mat64,
}

/// How dropout masks are drawn in train mode.
#[derive(Debug)]
pub struct Dropout<'a> {
    pub rng: &'a mut Rng,
    /// Consecutive blocks of this many rows share one mask.
    pub group: usize,
}

impl EblHead {
    /// Xavier-uniform weights, zero biases, unit LayerNorm gain.
    pub fn new(widths: &[usize], dropout: f64, rng: &mut Rng) -> Result<Self> {
        if widths.len() != NUM_LAYERS + 1 || widths.iter().any(|&w| w == 0) {
            return Err(Error::BadArchitecture(format!("need {} positive widths, got {widths:?}", NUM_LAYERS + 1)));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::BadArchitecture(format!("dropout {dropout} outside [0, 1)")));
        }
        let layers = widths
            .windows(2)
            .map(|io| {
                let (fan_in, fan_out) = (io[0], io[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let w = Mat64::from_fn(fan_out, fan_in, |_, _| rng.uniform_range(-bound, bound));
                Linear { w, b: vec![0.0; fan_out] }
            })
            .collect();
        let norms = widths[1..NUM_LAYERS]
            .iter()
            .map(|&d| LayerNorm { gain: vec![1.0; d], bias: vec![0.0; d] })
            .collect();
        Ok(Self { widths: widths.to_vec(), layers, norms, dropout, version: 0 })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        self.widths[NUM_LAYERS]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Parameter tensors in a fixed order: per layer `W, b`, then per norm
    /// `gain, bias`.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(4 * NUM_LAYERS);
        for l in &self.layers {
            out.push(l.w.data());
            out.push(&l.b);
        }
        for n in &self.norms {
            out.push(&n.gain);
            out.push(&n.bias);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.version += 1;
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(4 * NUM_LAYERS);
        for l in &mut self.layers {
            out.push(l.w.data_mut());
            out.push(&mut l.b);
        }
        for n in &mut self.norms {
            out.push(&mut n.gain);
            out.push(&mut n.bias);
        }
        out
    }

    /// Same shapes, every parameter zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        z.version = 0;
        z
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Eval-mode forward of a row batch; rows of the result are unit vectors.
    pub fn forward(&self, x: &Mat64) -> Result<Mat64> {
        Ok(self.run(x, None, false)?.out)
    }

    /// Train-mode forward; keeps everything backward needs.
    pub fn forward_train(&self, x: &Mat64, dropout: Option<Dropout<'_>>) -> Result<HeadCache> {
        self.run(x, dropout, true)
    }

    /// Eval-mode forward of one vector.
    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        let m = Mat64::from_vec(1, x.len(), x.to_vec())?;
        Ok(self.forward(&m)?.row(0).to_vec())
    }

    fn run(&self, x: &Mat64, mut dropout: Option<Dropout<'_>>, keep: bool) -> Result<HeadCache> {
        if x.cols() != self.input_dim() {
            return Err(Error::LengthMismatch { expected: self.input_dim(), actual: x.cols() });
        }
        let n = x.rows();
        let mut cache = HeadCache {
            version: self.version,
            inputs: Vec::new(),
            pre: Vec::new(),
            xhat: Vec::new(),
            inv_std: Vec::new(),
            masks: Vec::new(),
            raw_norm: Vec::new(),
            out: Mat64::zeros(0, 0),
        };
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut h = Mat64::zeros(n, layer.b.len());
            for r in 0..n {
                h.row_mut(r).copy_from_slice(&layer.b);
            }
            gemm(1.0, &cur, Trans::N, &layer.w, Trans::T, 1.0, &mut h);
            let next_input = if i + 1 < NUM_LAYERS {
                let d = layer.b.len();
                let norm = &self.norms[i];
                let mut xhat = Mat64::zeros(n, d);
                let mut inv_std = Vec::with_capacity(n);
                let mut y = Mat64::zeros(n, d);
                for r in 0..n {
                    let a: Vec<f64> = h.row(r).iter().map(|v| v.max(0.0)).collect();
                    let mean = a.iter().sum::<f64>() / d as f64;
                    let var = a.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let is = 1.0 / (var + LN_EPS).sqrt();
                    inv_std.push(is);
                    let xr = xhat.row_mut(r);
                    for (xv, av) in xr.iter_mut().zip(&a) {
                        *xv = (av - mean) * is;
                    }
                    let yr = y.row_mut(r);
                    for j in 0..d {
                        yr[j] = norm.gain[j] * xhat.get(r, j) + norm.bias[j];
                    }
                }
                let mask = match dropout.as_mut() {
                    Some(dp) if self.dropout > 0.0 => {
                        let keep_p = 1.0 - self.dropout;
                        let group = dp.group.max(1);
                        let mut m = Mat64::zeros(n, d);
                        let mut r = 0;
                        while r < n {
                            let row: Vec<f64> =
                                (0..d).map(|_| if dp.rng.uniform() < keep_p { 1.0 / keep_p } else { 0.0 }).collect();
                            for rr in r..(r + group).min(n) {
                                m.row_mut(rr).copy_from_slice(&row);
                            }
                            r += group;
                        }
                        y.data_mut().iter_mut().zip(m.data()).for_each(|(v, k)| *v *= k);
                        Some(m)
                    }
                    _ => None,
                };
                if keep {
                    cache.xhat.push(xhat);
                    cache.inv_std.push(inv_std);
                    cache.masks.push(mask);
                }
                y
            } else {
                h.clone()
            };
            if keep {
                cache.inputs.push(std::mem::replace(&mut cur, next_input));
                cache.pre.push(h);
            } else {
                cur = next_input;
            }
        }
        if !cur.is_finite() {
            return Err(Error::NonFiniteActivation);
        }
        for r in 0..n {
            let row = cur.row_mut(r);
            let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(nrm > NORM_FLOOR) {
                return Err(Error::ZeroNorm);
            }
            row.iter_mut().for_each(|v| *v /= nrm);
            cache.raw_norm.push(nrm);
        }
        cache.out = cur;
        Ok(cache)
    }

    /// Accumulates parameter gradients into `grad` and returns the input
    /// gradient, given `dout = ∂L/∂(unit output)`.
    pub fn backward(&self, cache: &HeadCache, dout: &Mat64, grad: &mut EblHead) -> Result<Mat64> {
        if cache.version != self.version || cache.inputs.len() != NUM_LAYERS {
            return Err(Error::StaleCache);
        }
        let n = cache.out.rows();
        if dout.rows() != n || dout.cols() != self.output_dim() {
            return Err(Error::StaleCache);
        }
        // Through u = o / ‖o‖.
        let mut d = Mat64::zeros(n, self.output_dim());
        for r in 0..n {
            let u = cache.out.row(r);
            let g = dout.row(r);
            let proj: f64 = u.iter().zip(g).map(|(a, b)| a * b).sum();
            let inv = 1.0 / cache.raw_norm[r];
            for ((dv, &gv), &uv) in d.row_mut(r).iter_mut().zip(g).zip(u) {
                *dv = (gv - uv * proj) * inv;
            }
        }
        for i in (0..NUM_LAYERS).rev() {
            if i + 1 < NUM_LAYERS {
                // d currently holds ∂L/∂(output of hidden block i).
                let dim = self.layers[i].b.len();
                if let Some(mask) = &cache.masks[i] {
                    d.data_mut().iter_mut().zip(mask.data()).for_each(|(v, k)| *v *= k);
                }
                let norm = &self.norms[i];
                let gnorm = &mut grad.norms[i];
                let xhat = &cache.xhat[i];
                let pre = &cache.pre[i];
                for r in 0..n {
                    let xr = xhat.row(r);
                    let dr = d.row_mut(r);
                    let mut dxhat = vec![0.0; dim];
                    for j in 0..dim {
                        gnorm.gain[j] += dr[j] * xr[j];
                        gnorm.bias[j] += dr[j];
                        dxhat[j] = dr[j] * norm.gain[j];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / dim as f64;
                    let m2 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / dim as f64;
                    let is = cache.inv_std[i][r];
                    let pr = pre.row(r);
                    for j in 0..dim {
                        let da = is * (dxhat[j] - m1 - xr[j] * m2);
                        dr[j] = if pr[j] > 0.0 { da } else { 0.0 };
                    }
                }
            }
            let gl = &mut grad.layers[i];
            gemm(1.0, &d, Trans::T, &cache.inputs[i], Trans::N, 1.0, &mut gl.w);
            for r in 0..n {
                gl.b.iter_mut().zip(d.row(r)).for_each(|(g, v)| *g += v);
            }
            let mut dx = Mat64::zeros(n, self.widths[i]);
            gemm(1.0, &d, Trans::N, &self.layers[i].w, Trans::N, 0.0, &mut dx);
            d = dx;
        }
        Ok(d)
    }

    fn write(&self, w: &mut Writer) {
        for t in self.tensors() {
            w.f64s(t);
        }
    }

    fn read(widths: &[usize], dropout: f64, r: &mut Reader<'_>) -> Result<Self> {
        let mut head = Self::new(widths, dropout, &mut Rng::new(0))?;
        for t in head.tensors_mut() {
            let vals = r.f64s(t.len())?;
            t.copy_from_slice(&vals);
        }
        head.version = 0;
        if !head.is_finite() {
            return Err(Error::Malformed("non-finite parameter in checkpoint".into()));
        }
        Ok(head)
    }
}

impl HeadCache {
    pub fn output(&self) -> &Mat64 {
        &self.out
    }

    /// Which hidden ReLUs were active, flattened over layers and rows.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.pre[..NUM_LAYERS - 1].iter().flat_map(|p| p.data().iter().map(|v| *v > 0.0)).collect()
    }
}

/// Finite-difference gradient check that skips coordinates whose ±h probes
/// land on different ReLU patterns (the loss has a kink in between, so the
/// central difference is not a derivative there). Returns the worst relative
/// error and the number of skipped coordinates.
#[cfg(test)]
pub(crate) fn kink_aware_check<F>(mut eval: F, x: &[f64], analytic: &[f64], h: f64) -> (f64, usize)
where
    F: FnMut(&[f64]) -> (f64, Vec<bool>),
{
    let mut patterns = Vec::with_capacity(2 * x.len());
    let fd = crate::numerics::finite_diff_grad(
        |p| {
            let (l, pat) = eval(p);
            patterns.push(pat);
            l
        },
        x,
        h,
    )
    .expect("finite loss");
    let mut worst: f64 = 0.0;
    let mut skipped = 0;
    for i in 0..x.len() {
        if patterns[2 * i] != patterns[2 * i + 1] {
            skipped += 1;
            continue;
        }
        let (a, f) = (analytic[i], fd[i]);
        worst = worst.max((a - f).abs() / a.abs().max(f.abs()).max(1e-6));
    }
    (worst, skipped)
}

/// Anything that scores a live latent against an embedded reference.
pub trait BiometricScore {
    fn score(&self, z: &[f64], reference: &[f64]) -> Result<f64>;

    /// Scores many `(z, reference)` pairs.
    fn score_pairs(&self, pairs: &[(&[f64], &[f64])]) -> Result<Vec<f64>> {
        pairs.iter().map(|(z, r)| self.score(z, r)).collect()
    }
}

impl BiometricScore for EblPair {
    fn score(&self, z: &[f64], reference: &[f64]) -> Result<f64> {
        self.similarity(z, reference)
    }

    fn score_pairs(&self, pairs: &[(&[f64], &[f64])]) -> Result<Vec<f64>> {
        if pairs.is_empty() {
            return Ok(Vec::new());
        }
        let zs = Mat64::from_rows(&pairs.iter().map(|p| p.0).collect::<Vec<_>>())?;
        let rs = Mat64::from_rows(&pairs.iter().map(|p| p.1).collect::<Vec<_>>())?;
        let (u, r) = (self.h1.forward(&zs)?, self.h2.forward(&rs)?);
        Ok((0..u.rows()).map(|i| u.row(i).iter().zip(r.row(i)).map(|(a, b)| a * b).sum::<f64>().clamp(-1.0, 1.0)).collect())
    }
}

/// Plain cosine in latent space, the untrained baseline.
#[derive(Debug, Clone, Copy, Default)]
pub struct RawCosine;

impl BiometricScore for RawCosine {
    fn score(&self, z: &[f64], reference: &[f64]) -> Result<f64> {
        cosine_sim(z, reference)
    }
}

/// `h1` and `h2`: same architecture, independent weights.
#[derive(Debug, Clone, PartialEq)]
pub struct EblPair {
    pub h1: EblHead,
    pub h2: EblHead,
}

/// Default-shape pair (257 → hidden → 128) from two independent streams.
pub fn init_heads(rng: &Rng, hidden: &[usize]) -> Result<EblPair> {
    if hidden.len() != NUM_LAYERS - 1 || hidden.iter().any(|&h| h < 8) {
        return Err(Error::BadArchitecture(format!("need 5 hidden widths ≥ 8, got {hidden:?}")));
    }
    let mut widths = vec![INPUT_DIM];
    widths.extend_from_slice(hidden);
    widths.push(OUTPUT_DIM);
    EblPair::new(&widths, 0.2, rng)
}

impl EblPair {
    pub fn new(widths: &[usize], dropout: f64, rng: &Rng) -> Result<Self> {
        let h1 = EblHead::new(widths, dropout, &mut rng.split(1))?;
        let h2 = EblHead::new(widths, dropout, &mut rng.split(2))?;
        Ok(Self { h1, h2 })
    }

    /// `b(z, R) = cos(h1(z), h2(f(R)))`, eval mode.
    pub fn similarity(&self, z: &[f64], reference: &[f64]) -> Result<f64> {
        cosine_sim(&self.h1.embed(z)?, &self.h2.embed(reference)?)
    }

    pub fn biometric_similarity(&self, frame: &LatentFrame, reference: &ReferencePortrait) -> Result<f64> {
        self.similarity(&frame.z, &reference.embedded)
    }

    /// Similarities of many latents against one reference.
    pub fn similarities(&self, zs: &Mat64, reference: &[f64]) -> Result<Vec<f64>> {
        if zs.rows() == 0 {
            return Ok(Vec::new());
        }
        let e = self.h1.forward(zs)?;
        let r = self.h2.embed(reference)?;
        Ok((0..e.rows()).map(|i| e.row(i).iter().zip(&r).map(|(a, b)| a * b).sum::<f64>().clamp(-1.0, 1.0)).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(CKPT_MAGIC.as_bytes());
        w.u16(CKPT_VERSION);
        w.u32(NUM_LAYERS as u32);
        for &d in self.h1.widths() {
            w.u32(d as u32);
        }
        w.f64(self.h1.dropout);
        self.h1.write(&mut w);
        self.h2.write(&mut w);
        w.finish_with_crc()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() >= 4 && &buf[..4] != CKPT_MAGIC.as_bytes() {
            return Err(Error::BadMagic { expected: CKPT_MAGIC });
        }
        let mut r = Reader::with_crc(buf, "EBL checkpoint")?;
        r.magic(CKPT_MAGIC)?;
        let version = r.u16()?;
        if version != CKPT_VERSION {
            return Err(Error::BadVersion(version));
        }
        let layers = r.u32()? as usize;
        if layers != NUM_LAYERS {
            return Err(Error::BadArchitecture(format!("{layers} layers in checkpoint")));
        }
        let widths = (0..=NUM_LAYERS).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
        let dropout = r.f64()?;
        let h1 = EblHead::read(&widths, dropout, &mut r)?;
        let h2 = EblHead::read(&widths, dropout, &mut r)?;
        r.expect_end()?;
        Ok(Self { h1, h2 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_grad;

    const SMALL: [usize; 7] = [16, 12, 10, 10, 9, 8, 8];

    fn unit_rows(n: usize, d: usize, rng: &mut Rng) -> Mat64 {
        let rows: Vec<Vec<f64>> = (0..n).map(|_| rng.unit_vec(d).into_inner()).collect();
        Mat64::from_rows(&rows).unwrap()
    }

    /// Perturbs biases and LayerNorm parameters away from their init so the
    /// gradient check exercises every term.
    fn jitter(head: &mut EblHead, rng: &mut Rng) {
        for t in head.tensors_mut() {
            t.iter_mut().for_each(|v| *v += 0.1 * rng.normal());
        }
    }

    #[test]
    fn init_is_deterministic_and_heads_differ() {
        let a = init_heads(&Rng::new(4), &DEFAULT_HIDDEN).unwrap();
        let b = init_heads(&Rng::new(4), &DEFAULT_HIDDEN).unwrap();
        assert_eq!(a, b);
        let diff = a.h1.layers[0]
            .w
            .data()
            .iter()
            .zip(a.h2.layers[0].w.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff > 0.0);
        assert_eq!(a.h1.num_params(), a.h2.num_params());
    }

    #[test]
    fn bad_architectures_rejected() {
        assert!(matches!(init_heads(&Rng::new(1), &[256, 256, 4, 160, 128]), Err(Error::BadArchitecture(_))));
        assert!(matches!(init_heads(&Rng::new(1), &[256, 256]), Err(Error::BadArchitecture(_))));
    }

    #[test]
    fn zero_input_stays_finite_until_normalization() {
        // With zero biases a zero input reaches the output as an exact zero
        // vector; LayerNorm of the constant rows must not produce NaN.
        let pair = init_heads(&Rng::new(2), &DEFAULT_HIDDEN).unwrap();
        let x = Mat64::zeros(1, INPUT_DIM);
        match pair.h1.forward(&x) {
            Err(Error::ZeroNorm) => {}
            other => panic!("expected ZeroNorm, got {other:?}"),
        }
        let mut head = pair.h1.clone();
        head.layers[5].b.iter_mut().for_each(|b| *b = 0.1);
        let y = head.forward(&x).unwrap();
        assert!(y.is_finite());
        let n: f64 = y.row(0).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eval_forward_is_pure_and_unit_norm() {
        let pair = init_heads(&Rng::new(3), &DEFAULT_HIDDEN).unwrap();
        let mut rng = Rng::new(8);
        let x = unit_rows(100, INPUT_DIM, &mut rng);
        let a = pair.h1.forward(&x).unwrap();
        let b = pair.h1.forward(&x).unwrap();
        assert_eq!(a, b);
        for r in 0..100 {
            let n: f64 = a.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_dropout_train_matches_eval() {
        let mut rng = Rng::new(5);
        let head = EblHead::new(&SMALL, 0.0, &mut rng).unwrap();
        let x = unit_rows(4, 16, &mut rng);
        let mut drng = Rng::new(1);
        let train = head.forward_train(&x, Some(Dropout { rng: &mut drng, group: 1 })).unwrap();
        assert_eq!(train.output(), &head.forward(&x).unwrap());
    }

    #[test]
    fn similarity_in_range() {
        let pair = init_heads(&Rng::new(6), &DEFAULT_HIDDEN).unwrap();
        let mut rng = Rng::new(7);
        for _ in 0..10 {
            let s = pair.similarity(&rng.unit_vec(INPUT_DIM), &rng.unit_vec(INPUT_DIM)).unwrap();
            assert!((-1.0..=1.0).contains(&s));
        }
    }

    fn head_loss(head: &EblHead, x: &Mat64, c: &Mat64) -> (f64, Vec<bool>) {
        let cache = head.forward_train(x, None).unwrap();
        let l = cache.output().data().iter().zip(c.data()).map(|(a, b)| a * b).sum();
        (l, cache.relu_pattern())
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..5 {
            let mut rng = Rng::new(100 + seed);
            let mut head = EblHead::new(&SMALL, 0.2, &mut rng).unwrap();
            jitter(&mut head, &mut rng);
            let x = unit_rows(3, 16, &mut rng);
            let c = Mat64::from_vec(3, 8, rng.normal_vec(24)).unwrap();
            let cache = head.forward_train(&x, None).unwrap();
            let mut grad = head.zeros_like();
            let dx = head.backward(&cache, &c, &mut grad).unwrap();

            let mut worst: f64 = 0.0;
            let mut skipped = 0;
            for ti in 0..head.tensors().len() {
                let base = head.tensors()[ti].to_vec();
                let (w, s) = kink_aware_check(
                    |p| {
                        let mut h = head.clone();
                        h.tensors_mut()[ti].copy_from_slice(p);
                        head_loss(&h, &x, &c)
                    },
                    &base,
                    grad.tensors()[ti],
                    1e-5,
                );
                worst = worst.max(w);
                skipped += s;
            }
            let (w, s) = kink_aware_check(
                |p| head_loss(&head, &Mat64::from_vec(3, 16, p.to_vec()).unwrap(), &c),
                x.data(),
                dx.data(),
                1e-5,
            );
            worst = worst.max(w);
            skipped += s;
            assert!(skipped * 100 <= head.num_params(), "too many kinks: {skipped}");
            assert!(worst <= 1e-4, "seed {seed}: worst rel err {worst}");
        }
    }

    #[test]
    fn backward_through_dropout_mask() {
        let mut rng = Rng::new(21);
        let mut head = EblHead::new(&SMALL, 0.3, &mut rng).unwrap();
        jitter(&mut head, &mut rng);
        let x = unit_rows(2, 16, &mut rng);
        let c = Mat64::from_vec(2, 8, rng.normal_vec(16)).unwrap();
        let cache = head.forward_train(&x, Some(Dropout { rng: &mut Rng::new(9), group: 1 })).unwrap();
        let mut grad = head.zeros_like();
        head.backward(&cache, &c, &mut grad).unwrap();
        // Replay with the same mask stream as a pure function of the first layer's bias.
        let base = head.layers[0].b.clone();
        let fd = finite_diff_grad(
            |p| {
                let mut h = head.clone();
                h.layers[0].b.copy_from_slice(p);
                let cache = h.forward_train(&x, Some(Dropout { rng: &mut Rng::new(9), group: 1 })).unwrap();
                cache.output().data().iter().zip(c.data()).map(|(a, b)| a * b).sum()
            },
            &base,
            1e-5,
        )
        .unwrap();
        for (a, f) in grad.layers[0].b.iter().zip(fd.iter()) {
            assert!((a - f).abs() <= 1e-4 * a.abs().max(f.abs()).max(1e-6));
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = Rng::new(22);
        let head = EblHead::new(&SMALL, 0.0, &mut rng).unwrap();
        let x = unit_rows(3, 16, &mut rng);
        let cache = head.forward_train(&x, None).unwrap();
        let mut grad = head.zeros_like();
        let dx = head.backward(&cache, &Mat64::zeros(3, 8), &mut grad).unwrap();
        assert!(grad.tensors().iter().all(|t| t.iter().all(|v| *v == 0.0)));
        assert!(dx.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn dead_relu_unit_gets_no_weight_gradient() {
        let mut rng = Rng::new(23);
        let mut head = EblHead::new(&SMALL, 0.0, &mut rng).unwrap();
        head.layers[0].b[3] = -100.0;
        let x = unit_rows(2, 16, &mut rng);
        let cache = head.forward_train(&x, None).unwrap();
        let mut grad = head.zeros_like();
        head.backward(&cache, &Mat64::from_vec(2, 8, rng.normal_vec(16)).unwrap(), &mut grad).unwrap();
        assert!(grad.layers[0].w.row(3).iter().all(|v| *v == 0.0));
        assert_eq!(grad.layers[0].b[3], 0.0);
    }

    #[test]
    fn stale_cache_rejected() {
        let mut rng = Rng::new(24);
        let mut head = EblHead::new(&SMALL, 0.0, &mut rng).unwrap();
        let x = unit_rows(1, 16, &mut rng);
        let cache = head.forward_train(&x, None).unwrap();
        head.tensors_mut()[0][0] += 1e-3;
        let mut grad = head.zeros_like();
        assert!(matches!(head.backward(&cache, &Mat64::zeros(1, 8), &mut grad), Err(Error::StaleCache)));
    }

    #[test]
    fn checkpoint_round_trip_and_crc() {
        let mut pair = init_heads(&Rng::new(30), &DEFAULT_HIDDEN).unwrap();
        pair.h1.tensors_mut()[0][0] += 0.5;
        let bytes = pair.to_bytes();
        let back = EblPair::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back, pair);
        let mut bad = bytes.clone();
        bad[100] ^= 0x01;
        assert!(matches!(EblPair::from_bytes(&bad), Err(Error::BadCrc { .. })));
        assert!(matches!(EblPair::from_bytes(&bytes[..2]), Err(Error::Truncated(_))));
    }
}
