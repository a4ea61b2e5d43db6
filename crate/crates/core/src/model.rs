//! Two-layer ReLU CNN with a fixed `1/m` second layer:
//!
//! ```text
//! F_k(W, x) = (1/m) Σ_r Σ_j max(0, ⟨w_{k,r}, x^(j)⟩)
//! ```
//!
//! The ReLU derivative at 0 is taken as 0 (strict inequality).

use nalgebra::DMatrix;
use rand_distr::{Distribution, Normal};

use crate::datagen::{dot, Sample};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub num_classes: usize,
    pub width: usize,
    pub dim: usize,
    /// Row-major `K × m × d`.
    pub w: Vec<f64>,
    /// Initialisation std; NaN when loaded from a checkpoint.
    pub sigma0: f64,
}

impl ModelWeights {
    pub fn zeros(num_classes: usize, width: usize, dim: usize) -> Self {
        Self {
            num_classes,
            width,
            dim,
            w: vec![0.0; num_classes * width * dim],
            sigma0: 0.0,
        }
    }

    #[inline]
    pub fn neuron(&self, k: usize, r: usize) -> &[f64] {
        let off = (k * self.width + r) * self.dim;
        &self.w[off..off + self.dim]
    }

    #[inline]
    pub fn neuron_mut(&mut self, k: usize, r: usize) -> &mut [f64] {
        let off = (k * self.width + r) * self.dim;
        &mut self.w[off..off + self.dim]
    }

    pub fn num_params(&self) -> usize {
        self.w.len()
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.w.iter_mut().for_each(|v| *v *= c);
        out
    }

    fn check_sample(&self, x: &Sample) -> Result<()> {
        if x.dim != self.dim || x.data.len() % self.dim != 0 || x.data.is_empty() {
            return Err(Error::DimensionMismatch(format!(
                "sample patch dim {} (len {}) vs model dim {}",
                x.dim,
                x.data.len(),
                self.dim
            )));
        }
        if x.label >= self.num_classes {
            return Err(Error::InvalidArgument(format!("label {} ≥ K = {}", x.label, self.num_classes)));
        }
        Ok(())
    }

    /// `⟨w_{k,r}, x^(j)⟩` laid out as `[k][r][j]`.
    pub fn preactivations(&self, x: &Sample) -> Result<Vec<f64>> {
        self.check_sample(x)?;
        let p = x.num_patches();
        let mut out = Vec::with_capacity(self.num_classes * self.width * p);
        for k in 0..self.num_classes {
            for r in 0..self.width {
                let w = self.neuron(k, r);
                out.extend(x.patches().map(|patch| dot(w, patch)));
            }
        }
        Ok(out)
    }

    fn outputs_from_preacts(&self, pre: &[f64], p: usize) -> Vec<f64> {
        let inv_m = 1.0 / self.width as f64;
        pre.chunks_exact(self.width * p)
            .map(|bank| {
                let mut total = 0.0;
                for neuron in bank.chunks_exact(p) {
                    let s: f64 = neuron.iter().map(|a| a.max(0.0)).sum();
                    total += s;
                }
                total * inv_m
            })
            .collect()
    }
}

pub fn init_weights(num_classes: usize, width: usize, dim: usize, sigma0: f64, seed: u64) -> Result<ModelWeights> {
    if width == 0 || num_classes == 0 || dim == 0 {
        return Err(Error::InvalidArgument("K, m and d must be ≥ 1".into()));
    }
    if !sigma0.is_finite() || sigma0 < 0.0 {
        return Err(Error::InvalidArgument(format!("sigma0 = {sigma0} must be finite and ≥ 0")));
    }
    let mut w = vec![0.0; num_classes * width * dim];
    if sigma0 > 0.0 {
        let normal = Normal::new(0.0, sigma0).expect("valid std");
        let mut g = rng::named_stream(seed, "init");
        w.iter_mut().for_each(|v| *v = normal.sample(&mut g));
    }
    Ok(ModelWeights {
        num_classes,
        width,
        dim,
        w,
        sigma0,
    })
}

pub fn forward(w: &ModelWeights, x: &Sample) -> Result<Vec<f64>> {
    let pre = w.preactivations(x)?;
    Ok(w.outputs_from_preacts(&pre, x.num_patches()))
}

/// Softmax with max-subtraction.
pub fn logits_to_probs(f: &[f64]) -> Vec<f64> {
    let max = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = f.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// `log Σ exp(f)` without overflow.
pub fn log_sum_exp(f: &[f64]) -> f64 {
    let max = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + f.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Cross-entropy `−log softmax(F)_y` given the outputs.
pub fn cross_entropy(f: &[f64], label: usize) -> f64 {
    (log_sum_exp(f) - f[label]).max(0.0)
}

pub fn loss(w: &ModelWeights, x: &Sample) -> Result<f64> {
    let f = forward(w, x)?;
    Ok(cross_entropy(&f, x.label))
}

/// Argmax of the outputs, ties to the lowest class index.
pub fn argmax(f: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in f.iter().enumerate().skip(1) {
        if *v > f[best] {
            best = k;
        }
    }
    best
}

pub fn predict(w: &ModelWeights, x: &Sample) -> Result<usize> {
    Ok(argmax(&forward(w, x)?))
}

/// Dense per-sample gradient over all `K·m·d` weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PerSampleGrad {
    pub g: Vec<f64>,
    pub flat_norm: f64,
}

impl PerSampleGrad {
    pub fn from_dense(g: Vec<f64>) -> Self {
        let flat_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        Self { g, flat_norm }
    }
}

/// Per-sample gradient in factored form. For neuron `(k, r)`
///
/// ```text
/// ∂L/∂w_{k,r} = coef_k · Σ_j 1{⟨w_{k,r}, x^(j)⟩ > 0} x^(j),   coef_k = (logit_k − 1{y=k}) / m
/// ```
///
/// so the whole gradient is described by `K` coefficients and a `K·m·P`
/// activation mask, and its norm follows from the patch Gram matrix.
#[derive(Debug, Clone)]
pub struct FactoredGrad {
    pub coef: Vec<f64>,
    pub active: Vec<bool>,
    pub num_patches: usize,
    pub width: usize,
    pub flat_norm: f64,
    pub loss: f64,
    pub prob_label: f64,
}

impl FactoredGrad {
    pub fn compute(w: &ModelWeights, x: &Sample) -> Result<Self> {
        let pre = w.preactivations(x)?;
        Ok(Self::from_preactivations(w, x, &pre))
    }

    /// Same as [`compute`](Self::compute) given the `[k][r][j]` preactivations.
    pub fn from_preactivations(w: &ModelWeights, x: &Sample, pre: &[f64]) -> Self {
        let p = x.num_patches();
        debug_assert_eq!(pre.len(), w.num_classes * w.width * p);
        let f = w.outputs_from_preacts(pre, p);
        let probs = logits_to_probs(&f);
        let inv_m = 1.0 / w.width as f64;
        let coef: Vec<f64> = probs
            .iter()
            .enumerate()
            .map(|(k, pk)| (pk - if k == x.label { 1.0 } else { 0.0 }) * inv_m)
            .collect();
        let active: Vec<bool> = pre.iter().map(|a| *a > 0.0).collect();

        let mut gram = vec![0.0; p * p];
        for a in 0..p {
            for b in a..p {
                let v = dot(x.patch(a), x.patch(b));
                gram[a * p + b] = v;
                gram[b * p + a] = v;
            }
        }
        let mut norm_sq = 0.0;
        for k in 0..w.num_classes {
            let c2 = coef[k] * coef[k];
            if c2 == 0.0 {
                continue;
            }
            let mut bank = 0.0;
            for r in 0..w.width {
                let mask = &active[(k * w.width + r) * p..(k * w.width + r + 1) * p];
                let mut s = 0.0;
                for a in 0..p {
                    if !mask[a] {
                        continue;
                    }
                    for b in 0..p {
                        if mask[b] {
                            s += gram[a * p + b];
                        }
                    }
                }
                bank += s;
            }
            norm_sq += c2 * bank;
        }

        Self {
            coef,
            active,
            num_patches: p,
            width: w.width,
            flat_norm: norm_sq.max(0.0).sqrt(),
            loss: cross_entropy(&f, x.label),
            prob_label: probs[x.label],
        }
    }

    /// `out[k,r,:] += scale · coef_k · Σ_j active · x^(j)` for one neuron.
    #[inline]
    pub fn accumulate_neuron(&self, x: &Sample, k: usize, r: usize, scale: f64, out: &mut [f64]) {
        let c = scale * self.coef[k];
        if c == 0.0 {
            return;
        }
        let p = self.num_patches;
        let base = (k * self.width + r) * p;
        for j in 0..p {
            if self.active[base + j] {
                out.iter_mut().zip(x.patch(j)).for_each(|(o, v)| *o += c * v);
            }
        }
    }

    pub fn to_dense(&self, x: &Sample, num_classes: usize) -> PerSampleGrad {
        let d = x.dim;
        let mut g = vec![0.0; num_classes * self.width * d];
        for k in 0..num_classes {
            for r in 0..self.width {
                let off = (k * self.width + r) * d;
                self.accumulate_neuron(x, k, r, 1.0, &mut g[off..off + d]);
            }
        }
        PerSampleGrad::from_dense(g)
    }
}

pub fn per_sample_grad(w: &ModelWeights, x: &Sample) -> Result<PerSampleGrad> {
    Ok(FactoredGrad::compute(w, x)?.to_dense(x, w.num_classes))
}

/// Stacks the patches of `samples` as the columns of a `d × (n·P)` matrix.
pub fn patch_matrix(samples: &[&Sample], dim: usize) -> DMatrix<f64> {
    let data: Vec<f64> = samples.iter().flat_map(|s| s.data.iter().copied()).collect();
    let cols = data.len() / dim;
    DMatrix::from_vec(dim, cols, data)
}

/// Preactivations of a batch sharing one patch count, as a `(K·m) × (n·P)`
/// matrix: entry `(k·m + r, i·P + j)` is `⟨w_{k,r}, x_i^(j)⟩`.
pub fn batch_preactivations(w: &ModelWeights, samples: &[&Sample]) -> Result<(DMatrix<f64>, usize)> {
    let p = samples.first().map_or(1, |s| s.num_patches());
    for s in samples {
        w.check_sample(s)?;
        if s.num_patches() != p {
            return Err(Error::DimensionMismatch("samples in a batch differ in patch count".into()));
        }
    }
    let x = patch_matrix(samples, w.dim);
    let km = w.num_classes * w.width;
    let mut pre = DMatrix::<f64>::zeros(km, x.ncols());
    if km > 0 && x.ncols() > 0 {
        // W is row-major (Km × d): row stride d, column stride 1.
        // SAFETY: the pointers cover km·d, d·cols and km·cols elements with
        // the strides given, and `pre` does not alias the inputs.
        unsafe {
            matrixmultiply::dgemm(
                km,
                w.dim,
                x.ncols(),
                1.0,
                w.w.as_ptr(),
                w.dim as isize,
                1,
                x.as_ptr(),
                1,
                w.dim as isize,
                0.0,
                pre.as_mut_ptr(),
                1,
                km as isize,
            );
        }
    }
    Ok((pre, p))
}

/// Copies sample `i`'s preactivations out of a batch matrix in `[k][r][j]` order.
pub fn sample_preactivations(pre: &DMatrix<f64>, i: usize, p: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(pre.nrows() * p);
    for kr in 0..pre.nrows() {
        out.extend((0..p).map(|j| pre[(kr, i * p + j)]));
    }
    out
}

const FORWARD_CHUNK: usize = 256;

/// Outputs for many samples, computed in blocks with matrix products.
pub fn batch_forward(w: &ModelWeights, samples: &[&Sample]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(FORWARD_CHUNK) {
        let (pre, p) = batch_preactivations(w, chunk)?;
        for i in 0..chunk.len() {
            out.push(w.outputs_from_preacts(&sample_preactivations(&pre, i, p), p));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(patches: &[&[f64]], label: usize) -> Sample {
        let dim = patches[0].len();
        Sample {
            data: patches.concat(),
            dim,
            label,
            signal_pos: None,
            raw_zeta: None,
        }
    }

    #[test]
    fn zero_weights() {
        let w = init_weights(5, 3, 2, 0.0, 1).unwrap();
        assert!(w.w.iter().all(|v| *v == 0.0));
        let x = sample(&[&[1.0, 2.0], &[-1.0, 0.5]], 3);
        assert_eq!(forward(&w, &x).unwrap(), vec![0.0; 5]);
        assert!((loss(&w, &x).unwrap() - 5f64.ln()).abs() < 1e-15);
        assert_eq!(predict(&w, &x).unwrap(), 0);
        let g = per_sample_grad(&w, &x).unwrap();
        assert!(g.g.iter().all(|v| *v == 0.0));
        assert_eq!(g.flat_norm, 0.0);
    }

    #[test]
    fn relu_kills_negative_patch() {
        let w = ModelWeights {
            num_classes: 1,
            width: 1,
            dim: 2,
            w: vec![1.0, 0.0],
            sigma0: 0.0,
        };
        let x = sample(&[&[-3.0, 5.0]], 0);
        assert_eq!(forward(&w, &x).unwrap(), vec![0.0]);
    }

    #[test]
    fn softmax_cases() {
        let p = logits_to_probs(&[0.0; 5]);
        assert!(p.iter().all(|v| (*v - 0.2).abs() < 1e-15));
        let p = logits_to_probs(&[1000.0, 0.0]);
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p[0] - 1.0).abs() < 1e-15 && p[1] < 1e-300);
        assert_eq!(argmax(&[0.1, 0.9]), 1);
        assert_eq!(argmax(&[0.3, 0.3, 0.1]), 0);
    }

    #[test]
    fn confident_prediction_has_vanishing_gradient() {
        let w = ModelWeights {
            num_classes: 2,
            width: 1,
            dim: 1,
            w: vec![1.0, -1.0],
            sigma0: 0.0,
        };
        let x = sample(&[&[800.0]], 0);
        let g = per_sample_grad(&w, &x).unwrap();
        assert!(g.flat_norm < 1e-300);
        assert!(loss(&w, &x).unwrap() < 1e-300);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let w = init_weights(2, 2, 3, 0.1, 0).unwrap();
        let x = sample(&[&[1.0, 2.0]], 0);
        assert!(matches!(forward(&w, &x), Err(Error::DimensionMismatch(_))));
        assert!(init_weights(2, 0, 3, 0.1, 0).is_err());
        assert!(init_weights(2, 1, 3, -0.1, 0).is_err());
    }
}
