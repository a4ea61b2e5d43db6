//! Memorization metrics, test error, the L-long-tailed partition and
//! closed-form diagnostic bounds.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{dot, Dataset, NoiseModel, Sample, SignalSet};
use crate::dp_optimizer::{AlignmentSums, DPConfig, Mode};
use crate::error::{Error, Result};
use crate::model::{argmax, batch_forward, predict, ModelWeights};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub signal_align: f64,
    pub noise_align: f64,
    pub step: usize,
}

/// `(1/N) max_r Σ_i ⟨w_{y_i,r}, u_{y_i}⟩` and `(1/N) max_r Σ_i ⟨w_{y_i,r}, ξ_i⟩`.
pub fn alignment_metrics(w: &ModelWeights, data: &Dataset, sig: &SignalSet) -> Result<AlignmentRecord> {
    if sig.dim != w.dim || sig.num_classes != w.num_classes {
        return Err(Error::DimensionMismatch("signal set vs weights".into()));
    }
    let noise: Option<Vec<(usize, &[f64], &[f64])>> = data
        .samples
        .iter()
        .map(|s| Some((s.label, sig.signals[s.label].as_slice(), s.noise_patch()?)))
        .collect();
    let noise = noise.ok_or_else(|| Error::InvalidArgument("dataset has no noise patches".into()))?;
    let sums = AlignmentSums::from_signal_noise(w.num_classes, w.dim, noise.into_iter());
    let (signal_align, noise_align) = sums.evaluate(w);
    Ok(AlignmentRecord {
        signal_align,
        noise_align,
        step: 0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `None` for classes absent from the test set.
    pub per_class_error: Vec<Option<f64>>,
    /// Macro average over the classes present.
    pub overall_error: f64,
    pub longtail_error: Option<f64>,
    pub longtail_fraction: f64,
    pub threshold: Option<f64>,
}

/// Predictions for every sample, in dataset order.
pub fn predictions(w: &ModelWeights, data: &Dataset) -> Result<Vec<usize>> {
    let xs: Vec<&Sample> = data.samples.iter().collect();
    Ok(batch_forward(w, &xs)?.iter().map(|f| argmax(f)).collect())
}

pub fn test_error(w: &ModelWeights, testset: &Dataset) -> Result<EvalReport> {
    if testset.is_empty() {
        return Err(Error::Empty { what: "test set".into() });
    }
    let preds = predictions(w, testset)?;
    let k = testset.num_classes;
    let mut wrong = vec![0usize; k];
    let mut total = vec![0usize; k];
    for (s, p) in testset.samples.iter().zip(&preds) {
        total[s.label] += 1;
        if *p != s.label {
            wrong[s.label] += 1;
        }
    }
    let per_class_error: Vec<Option<f64>> = wrong
        .iter()
        .zip(&total)
        .map(|(w, t)| (*t > 0).then(|| *w as f64 / *t as f64))
        .collect();
    let present: Vec<f64> = per_class_error.iter().flatten().cloned().collect();
    Ok(EvalReport {
        overall_error: present.iter().sum::<f64>() / present.len() as f64,
        per_class_error,
        longtail_error: None,
        longtail_fraction: 0.0,
        threshold: None,
    })
}

/// Accuracy `1 − overall_error`.
pub fn accuracy(w: &ModelWeights, testset: &Dataset) -> Result<f64> {
    Ok(1.0 - test_error(w, testset)?.overall_error)
}

/// Per-sample long-tail score `⟨w_agg, ξ⟩ / ‖A_yᵀ w_agg‖₂` where `w_agg` sums the
/// class-`y` neurons activated by `ξ`. `None` when no neuron is activated.
pub fn longtail_scores(w_clean: &ModelWeights, testset: &Dataset, noise: &NoiseModel) -> Result<Vec<Option<f64>>> {
    if w_clean.dim != noise.dim || testset.dim != noise.dim {
        return Err(Error::DimensionMismatch("weights, test set and noise model".into()));
    }
    testset
        .samples
        .par_iter()
        .map(|s| {
            let xi = s
                .noise_patch()
                .ok_or_else(|| Error::InvalidArgument("sample without a noise patch".into()))?;
            let mut agg = vec![0.0; w_clean.dim];
            let mut any = false;
            for r in 0..w_clean.width {
                let wr = w_clean.neuron(s.label, r);
                if dot(wr, xi) > 0.0 {
                    any = true;
                    agg.iter_mut().zip(wr).for_each(|(a, b)| *a += b);
                }
            }
            if !any {
                return Ok(None);
            }
            let inner = dot(&agg, xi);
            let proj = noise.apply(s.label, &agg);
            let norm = dot(&proj, &proj).sqrt();
            Ok(Some(if norm > 0.0 { inner / norm } else { f64::INFINITY }))
        })
        .collect()
}

/// Indices of test samples with `⟨w_agg, ξ⟩ ≥ L ‖A_yᵀ w_agg‖₂`.
pub fn longtail_partition(w_clean: &ModelWeights, testset: &Dataset, noise: &NoiseModel, threshold: f64) -> Result<Vec<usize>> {
    if !(threshold >= 0.0) {
        return Err(Error::InvalidArgument(format!("L = {threshold} must be ≥ 0")));
    }
    let scores = longtail_scores(w_clean, testset, noise)?;
    Ok(select_by_score(&scores, threshold))
}

pub fn select_by_score(scores: &[Option<f64>], threshold: f64) -> Vec<usize> {
    scores
        .iter()
        .enumerate()
        .filter(|(_, s)| s.is_some_and(|v| v >= threshold))
        .map(|(i, _)| i)
        .collect()
}

/// The threshold `L` that selects (about) `fraction` of the samples with a
/// defined score: the score at rank `⌈fraction·n⌉` from the top.
pub fn threshold_for_fraction(scores: &[Option<f64>], fraction: f64) -> Option<f64> {
    let mut vals: Vec<f64> = scores.iter().flatten().filter(|v| v.is_finite()).cloned().collect();
    if vals.is_empty() || !(fraction > 0.0) {
        return None;
    }
    vals.sort_by(|a, b| b.total_cmp(a));
    let want = ((fraction * scores.len() as f64).ceil() as usize).clamp(1, vals.len());
    Some(vals[want - 1].max(0.0))
}

/// Misclassification rate restricted to `subset`.
pub fn longtail_error(w: &ModelWeights, testset: &Dataset, subset: &[usize]) -> Result<f64> {
    if subset.is_empty() {
        return Err(Error::Empty { what: "long-tail subset".into() });
    }
    let wrong = subset
        .par_iter()
        .map(|&i| Ok(usize::from(predict(w, &testset.samples[i])? != testset.samples[i].label)))
        .collect::<Result<Vec<usize>>>()?;
    Ok(wrong.iter().sum::<usize>() as f64 / subset.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticBounds {
    /// `Λ_k = C / (‖u_k‖ + ‖A_k‖_F)`; 1 in clean mode.
    pub clipping_factor: Vec<f64>,
    /// `snr[k][j]`, NaN on the diagonal.
    pub snr: Vec<Vec<f64>>,
    pub ncr: Vec<Vec<f64>>,
    pub thm46_stmt1_exponent_arg: Vec<f64>,
    pub thm46_stmt2_exponent_arg: Vec<f64>,
    pub thm45_floor: Vec<f64>,
    pub sigma_n: f64,
    pub threshold: f64,
    pub delta: f64,
}

/// Closed-form bound arguments with all absolute constants set to 1. For each
/// class the worst competitor `j` (largest `√|S_j| ‖A_kᵀA_j‖_F`) is used.
pub fn diagnostics(
    sig: &SignalSet,
    noise: &NoiseModel,
    class_counts: &[usize],
    cfg: &DPConfig,
    width: usize,
    threshold: f64,
    delta: f64,
) -> Result<DiagnosticBounds> {
    let k_n = sig.num_classes;
    if class_counts.len() != k_n || noise.num_classes != k_n {
        return Err(Error::DimensionMismatch("class counts vs classes".into()));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!("δ = {delta} must lie in (0, 1)")));
    }
    let n: usize = class_counts.iter().sum();
    let nf = n as f64;
    let sigma_n = cfg.resolved_sigma(n)?;
    let d = sig.dim as f64;

    let clipping_factor: Vec<f64> = (0..k_n)
        .map(|k| match cfg.mode {
            Mode::Clean => 1.0,
            Mode::Dp => cfg.clip_c / (sig.norms[k] + noise.frob_a(k)),
        })
        .collect();

    let mut snr = vec![vec![f64::NAN; k_n]; k_n];
    let mut ncr = vec![vec![f64::NAN; k_n]; k_n];
    for k in 0..k_n {
        for j in 0..k_n {
            if k != j {
                snr[k][j] = crate::datagen::compute_snr(sig, noise, class_counts, k, j).unwrap_or(f64::NAN);
                ncr[k][j] = crate::datagen::compute_ncr(noise, class_counts, k, j).unwrap_or(f64::NAN);
            }
        }
    }

    let mut stmt1 = Vec::with_capacity(k_n);
    let mut stmt2 = Vec::with_capacity(k_n);
    let mut floor = Vec::with_capacity(k_n);
    for k in 0..k_n {
        let lam = clipping_factor[k];
        let sk = class_counts[k] as f64;
        let uk = sig.norms[k];
        let cross = (0..k_n)
            .filter(|&j| j != k)
            .map(|j| (class_counts[j] as f64).sqrt() * noise.frob_ata(k, j))
            .fold(0.0, f64::max);
        let denom = cross + nf * sigma_n * noise.frob_a(k);
        stmt1.push((sk * lam * uk * uk - nf * sigma_n * uk * (2.0 * (2.0 / delta).ln()).sqrt()) / denom);
        stmt2.push(
            (threshold * sk.sqrt() * lam * noise.frob_ata(k, k)
                - nf * sigma_n * (d + threshold * threshold).sqrt() * noise.op_a(k))
                / denom,
        );
        let f_den = lam * sk * uk * uk;
        floor.push(if f_den == 0.0 {
            f64::INFINITY
        } else {
            nf * (width as f64).sqrt() * sigma_n * d.sqrt() * (uk + noise.frob_a(k)) / f_den
        });
    }

    Ok(DiagnosticBounds {
        clipping_factor,
        snr,
        ncr,
        thm46_stmt1_exponent_arg: stmt1,
        thm46_stmt2_exponent_arg: stmt2,
        thm45_floor: floor,
        sigma_n,
        threshold,
        delta,
    })
}
