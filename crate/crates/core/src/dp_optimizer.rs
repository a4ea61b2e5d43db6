//! Clean SGD and DP-SGD with the update
//!
//! ```text
//! W ← W − (η/B) Σ_{i∈batch} clip_C(∇L(W, x_i, y_i)) + η·n,   n ~ N(0, σ_n² I)
//! ```
//!
//! Mini-batches are consecutive blocks of a fresh permutation each epoch; the
//! short final block keeps the configured divisor `B`. Noise is added once per
//! step to every coordinate. Clean mode skips clipping and noise.

use std::fmt;
use std::io::Write;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use nalgebra::{DMatrix, DMatrixViewMut};

use crate::datagen::{dot, Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::{
    batch_forward, batch_preactivations, cross_entropy, patch_matrix, sample_preactivations, FactoredGrad, ModelWeights,
    PerSampleGrad,
};
use crate::rng::{self, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Clean,
    Dp,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Clean => "clean",
            Mode::Dp => "dp",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DPConfig {
    pub mode: Mode,
    /// Clipping threshold `C`; ignored in clean mode.
    pub clip_c: f64,
    /// Explicit per-coordinate noise std. When absent in DP mode the std is
    /// calibrated from `(epsilon, delta_dp)`.
    #[serde(default)]
    pub sigma_n: Option<f64>,
    pub epsilon: f64,
    pub delta_dp: f64,
    pub eta: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Full-train loss cadence in steps; 0 records it only at init and the end.
    #[serde(default = "default_trace_every")]
    pub trace_every: usize,
}

fn default_trace_every() -> usize {
    1
}

impl DPConfig {
    pub fn steps(&self, n: usize) -> usize {
        if self.batch == 0 {
            return 0;
        }
        self.epochs * n.div_ceil(self.batch)
    }

    /// Noise std actually used for a training set of size `n`.
    pub fn resolved_sigma(&self, n: usize) -> Result<f64> {
        match self.mode {
            Mode::Clean => Ok(0.0),
            Mode::Dp => match self.sigma_n {
                Some(s) if s.is_finite() && s >= 0.0 => Ok(s),
                Some(s) => Err(Error::InvalidArgument(format!("sigma_n = {s} must be finite and ≥ 0"))),
                None => calibrate_sigma(self.clip_c, self.steps(n), n, self.epsilon, self.delta_dp),
            },
        }
    }

    pub fn with_mode(&self, mode: Mode) -> Self {
        Self { mode, ..self.clone() }
    }
}

/// `g / max(1, ‖g‖/C)` over the flattened gradient.
pub fn clip(g: &PerSampleGrad, c: f64) -> Result<PerSampleGrad> {
    if !(c > 0.0) {
        return Err(Error::InvalidArgument(format!("clipping threshold {c} must be > 0")));
    }
    if g.g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("per-sample gradient"));
    }
    let mut scale = clip_scale(g.flat_norm, c);
    if scale == 1.0 {
        return Ok(g.clone());
    }
    // Rounding in the scaled entries can push the recomputed norm a few ulps
    // past C; back the factor off until it cannot.
    loop {
        let out = PerSampleGrad::from_dense(g.g.iter().map(|v| v * scale).collect());
        if out.flat_norm <= c {
            return Ok(out);
        }
        scale *= 1.0 - 2.0 * f64::EPSILON;
    }
}

#[inline]
fn clip_scale(norm: f64, c: f64) -> f64 {
    let ratio = norm / c;
    if ratio > 1.0 {
        1.0 / ratio
    } else {
        1.0
    }
}

/// Advanced-composition noise std `C √(T ln(1/δ)) / (n ε)` with unit constant.
pub fn calibrate_sigma(clip_c: f64, steps: usize, n: usize, epsilon: f64, delta_dp: f64) -> Result<f64> {
    if !(delta_dp > 0.0 && delta_dp < 1.0) {
        return Err(Error::InvalidArgument(format!("delta_dp = {delta_dp} must lie in (0, 1)")));
    }
    if !(clip_c > 0.0) || !(epsilon > 0.0) || n == 0 {
        return Err(Error::InvalidArgument("C, ε and n must be positive".into()));
    }
    Ok(clip_c * (steps as f64 * (1.0 / delta_dp).ln()).sqrt() / (n as f64 * epsilon))
}

/// Adds `η σ z` to every coordinate, drawing `z` sequentially from `rng`.
pub fn inject_noise(w: &mut [f64], eta: f64, sigma: f64, rng: &mut StreamRng) {
    let s = eta * sigma;
    for v in w.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v += s * z;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub batch_loss: Option<f64>,
    pub train_loss: Option<f64>,
    pub signal_align: Option<f64>,
    pub noise_align: Option<f64>,
    pub mean_one_minus_logit: Option<f64>,
    pub clip_frac: Option<f64>,
    /// Largest per-sample gradient norm after clipping in this step.
    pub max_clipped_norm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace {
    pub mode: Mode,
    pub sigma_n: f64,
    pub steps: usize,
    pub records: Vec<StepRecord>,
}

pub const TRACE_COLUMNS: [&str; 8] = [
    "step",
    "epoch",
    "batch_loss",
    "train_loss",
    "signal_align",
    "noise_align",
    "mean_one_minus_logit",
    "clip_frac",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl TrainTrace {
    pub fn final_record(&self) -> &StepRecord {
        self.records.last().expect("trace always holds the initial record")
    }

    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "{}", TRACE_COLUMNS.join(","))?;
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.step,
                r.epoch,
                opt(r.batch_loss),
                opt(r.train_loss),
                opt(r.signal_align),
                opt(r.noise_align),
                opt(r.mean_one_minus_logit),
                opt(r.clip_frac)
            )?;
        }
        Ok(())
    }
}

/// Per-class sums of signal and noise patches, for footnote-style alignment
/// metrics evaluated once per step.
#[derive(Debug, Clone)]
pub(crate) struct AlignmentSums {
    signal: Vec<Vec<f64>>,
    noise: Vec<Vec<f64>>,
    n: usize,
}

impl AlignmentSums {
    pub(crate) fn from_signal_noise<'a>(
        num_classes: usize,
        dim: usize,
        items: impl Iterator<Item = (usize, &'a [f64], &'a [f64])>,
    ) -> Self {
        let mut signal = vec![vec![0.0; dim]; num_classes];
        let mut noise = vec![vec![0.0; dim]; num_classes];
        let mut n = 0;
        for (y, u, xi) in items {
            signal[y].iter_mut().zip(u).for_each(|(a, b)| *a += b);
            noise[y].iter_mut().zip(xi).for_each(|(a, b)| *a += b);
            n += 1;
        }
        Self { signal, noise, n }
    }

    pub(crate) fn from_dataset(data: &Dataset) -> Option<Self> {
        let items: Option<Vec<_>> = data
            .samples
            .iter()
            .map(|s| Some((s.label, s.signal_patch()?, s.noise_patch()?)))
            .collect();
        let items = items?;
        Some(Self::from_signal_noise(data.num_classes, data.dim, items.into_iter()))
    }

    /// `(1/N) max_r Σ_i ⟨w_{y_i,r}, u_{y_i}⟩` and the same with `ξ_i`.
    pub(crate) fn evaluate(&self, w: &ModelWeights) -> (f64, f64) {
        if self.n == 0 {
            return (0.0, 0.0);
        }
        let mut best_sig = f64::NEG_INFINITY;
        let mut best_noise = f64::NEG_INFINITY;
        for r in 0..w.width {
            let mut s = 0.0;
            let mut t = 0.0;
            for k in 0..w.num_classes {
                let nk = w.neuron(k, r);
                s += dot(nk, &self.signal[k]);
                t += dot(nk, &self.noise[k]);
            }
            best_sig = best_sig.max(s);
            best_noise = best_noise.max(t);
        }
        let inv = 1.0 / self.n as f64;
        (best_sig * inv, best_noise * inv)
    }
}

/// Mean cross-entropy over a dataset.
pub fn dataset_loss(w: &ModelWeights, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty { what: "dataset".into() });
    }
    let xs: Vec<&Sample> = data.samples.iter().collect();
    let outputs = batch_forward(w, &xs)?;
    let total: f64 = outputs.iter().zip(&xs).map(|(f, x)| cross_entropy(f, x.label)).sum();
    Ok(total / xs.len() as f64)
}

fn validate(w0: &ModelWeights, data: &Dataset, cfg: &DPConfig) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Empty { what: "training set".into() });
    }
    if data.dim != w0.dim || data.num_classes != w0.num_classes {
        return Err(Error::DimensionMismatch(format!(
            "data (K={}, d={}) vs weights (K={}, d={})",
            data.num_classes, data.dim, w0.num_classes, w0.dim
        )));
    }
    if cfg.batch == 0 || cfg.batch > data.len() {
        return Err(Error::InvalidArgument(format!(
            "batch size {} must be in 1..={}",
            cfg.batch,
            data.len()
        )));
    }
    if !(cfg.eta > 0.0) || !cfg.eta.is_finite() {
        return Err(Error::InvalidArgument(format!("learning rate {} must be > 0", cfg.eta)));
    }
    if cfg.mode == Mode::Dp && !(cfg.clip_c > 0.0) {
        return Err(Error::InvalidArgument(format!("clipping threshold {} must be > 0", cfg.clip_c)));
    }
    Ok(())
}

/// The RNG stream that shuffles mini-batches for a given optimizer seed.
pub fn batch_stream(seed: u64) -> StreamRng {
    rng::named_stream(seed, "batch")
}

/// One epoch's mini-batches: consecutive blocks of size `batch` of a fresh
/// permutation of `0..n`; the last block may be short.
pub fn epoch_batches(n: usize, batch: usize, rng: &mut StreamRng) -> Vec<Vec<usize>> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    perm.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

/// Trains from `w0` for `cfg.epochs` epochs and returns the final weights and
/// a trace with one record per step plus the initial snapshot.
pub fn train(w0: &ModelWeights, data: &Dataset, cfg: &DPConfig) -> Result<(ModelWeights, TrainTrace)> {
    validate(w0, data, cfg)?;
    let n = data.len();
    let steps = cfg.steps(n);
    let sigma_n = cfg.resolved_sigma(n)?;
    let align = AlignmentSums::from_dataset(data);
    let mut batch_rng = batch_stream(cfg.seed);
    let mut noise_rng = rng::named_stream(cfg.seed, "noise");

    let mut w = w0.clone();
    let mut records = Vec::with_capacity(steps + 1);
    let (sa, na) = align.as_ref().map(|a| a.evaluate(&w)).unzip();
    records.push(StepRecord {
        step: 0,
        epoch: 0,
        batch_loss: None,
        train_loss: Some(dataset_loss(&w, data)?),
        signal_align: sa,
        noise_align: na,
        mean_one_minus_logit: None,
        clip_frac: None,
        max_clipped_norm: None,
    });

    let d = w.dim;
    let width = w.width;
    let step_scale = cfg.eta / cfg.batch as f64;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for batch in epoch_batches(n, cfg.batch, &mut batch_rng) {
            let batch = batch.as_slice();
            step += 1;
            let xs: Vec<&Sample> = batch.iter().map(|&i| &data.samples[i]).collect();
            let (pre, p) = batch_preactivations(&w, &xs)?;
            let grads: Vec<FactoredGrad> = xs
                .par_iter()
                .enumerate()
                .map(|(i, x)| FactoredGrad::from_preactivations(&w, x, &sample_preactivations(&pre, i, p)))
                .collect();

            let batch_loss = grads.iter().map(|g| g.loss).sum::<f64>() / grads.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::Diverged { step, loss: batch_loss });
            }
            let scales: Vec<f64> = grads
                .iter()
                .map(|g| match cfg.mode {
                    Mode::Clean => 1.0,
                    Mode::Dp => clip_scale(g.flat_norm, cfg.clip_c),
                })
                .collect();
            let clipped = scales.iter().filter(|s| **s < 1.0).count();
            let max_clipped_norm = grads
                .iter()
                .zip(&scales)
                .map(|(g, s)| g.flat_norm * s)
                .fold(0.0, f64::max);
            let one_minus = grads.iter().map(|g| 1.0 - g.prob_label).sum::<f64>() / grads.len() as f64;

            // Σ_i s_i ∇_i as one product: patches (d × nP) times the per-patch
            // neuron coefficients (nP × Km), accumulated straight into W.
            let mut coef = DMatrix::<f64>::zeros(xs.len() * p, w.num_classes * width);
            for (i, (g, &s)) in grads.iter().zip(&scales).enumerate() {
                for kr in 0..w.num_classes * width {
                    let c = s * g.coef[kr / width];
                    for j in 0..p {
                        if g.active[kr * p + j] {
                            coef[(i * p + j, kr)] = c;
                        }
                    }
                }
            }
            let x = patch_matrix(&xs, d);
            let mut wt = DMatrixViewMut::from_slice(&mut w.w, d, w.num_classes * width);
            wt.gemm(-step_scale, &x, &coef, 1.0);
            if cfg.mode == Mode::Dp && sigma_n > 0.0 {
                inject_noise(&mut w.w, cfg.eta, sigma_n, &mut noise_rng);
            }
            // A NaN preactivation fails the ReLU test and reads as zero, so
            // overflowed weights can hide behind a finite loss.
            if w.w.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged { step, loss: f64::NAN });
            }

            let want_full = step == steps || (cfg.trace_every > 0 && step % cfg.trace_every == 0);
            let train_loss = if want_full {
                let l = dataset_loss(&w, data)?;
                if !l.is_finite() {
                    return Err(Error::Diverged { step, loss: l });
                }
                Some(l)
            } else {
                None
            };
            let (sa, na) = align.as_ref().map(|a| a.evaluate(&w)).unzip();
            records.push(StepRecord {
                step,
                epoch: epoch + 1,
                batch_loss: Some(batch_loss),
                train_loss,
                signal_align: sa,
                noise_align: na,
                mean_one_minus_logit: Some(one_minus),
                clip_frac: Some(match cfg.mode {
                    Mode::Clean => 0.0,
                    Mode::Dp => clipped as f64 / grads.len() as f64,
                }),
                max_clipped_norm: Some(max_clipped_norm),
            });
        }
    }

    Ok((
        w,
        TrainTrace {
            mode: cfg.mode,
            sigma_n,
            steps,
            records,
        },
    ))
}
