//! Synthetic multi-patch data with orthogonal class signals and
//! class-dependent noise transforms.
//!
//! One seeded orthonormal basis `U` (d×d) carries everything: its first `K`
//! columns are the signal directions, the next `K` columns are the per-class
//! noise spikes `q_k`, and the remaining `d − 2K` columns span the shared
//! noise subspace `Q_s`. The noise transform of class `k` is
//!
//! ```text
//! A_k = λ_k q_k q_kᵀ + b Q_s Q_sᵀ          (b = base eigenvalue, 0.5 by default)
//! ```
//!
//! which is symmetric, annihilates every signal, and has closed-form
//! Frobenius norms. `A_k` is never materialised outside of oracles; applying
//! it costs `O(d·K)` through the complement projector
//! `Q_s Q_sᵀ ζ = ζ − Σ_{c<2K} U_c ⟨U_c, ζ⟩`.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Non-spike eigenvalue of every `A_k`.
pub const DEFAULT_BASE_EIG: f64 = 0.5;

const SQRT_3: f64 = 1.732_050_807_568_877_2;

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone)]
pub struct SignalSet {
    pub dim: usize,
    pub num_classes: usize,
    /// Orthonormal d×d basis `U`, column-major.
    pub basis: Arc<DMatrix<f64>>,
    pub norms: Vec<f64>,
    pub signals: Vec<Vec<f64>>,
    pub seed: u64,
}

impl SignalSet {
    pub fn basis_col(&self, c: usize) -> &[f64] {
        &self.basis.as_slice()[c * self.dim..(c + 1) * self.dim]
    }

    /// Unit direction of class `k`'s signal (defined even when its norm is 0).
    pub fn direction(&self, k: usize) -> &[f64] {
        self.basis_col(k)
    }
}

/// Builds `K` mutually orthogonal signals `u_k = ‖u_k‖ · U e_k`.
pub fn build_signals(num_classes: usize, dim: usize, norms: &[f64], seed: u64) -> Result<SignalSet> {
    if norms.len() != num_classes {
        return Err(Error::DimensionMismatch(format!(
            "{} norms for {} classes",
            norms.len(),
            num_classes
        )));
    }
    if num_classes == 0 {
        return Err(Error::InvalidArgument("need at least one class".into()));
    }
    if dim < 2 * num_classes {
        return Err(Error::InvalidArgument(format!(
            "d = {dim} < 2K = {}: the shared noise subspace would be empty",
            2 * num_classes
        )));
    }
    if let Some(bad) = norms.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::InvalidArgument(format!("signal norm {bad} must be finite and ≥ 0")));
    }

    let mut g = rng::named_stream(seed, "signal-basis");
    let gauss = DMatrix::<f64>::from_fn(dim, dim, |_, _| g.sample::<f64, _>(StandardNormal));
    let q = gauss.qr().q();
    let basis = Arc::new(q);

    let signals = norms
        .iter()
        .enumerate()
        .map(|(k, &nk)| {
            basis.as_slice()[k * dim..(k + 1) * dim]
                .iter()
                .map(|v| nk * v)
                .collect()
        })
        .collect();

    Ok(SignalSet {
        dim,
        num_classes,
        basis,
        norms: norms.to_vec(),
        signals,
        seed,
    })
}

/// Coordinate distribution of `ζ`; both have unit variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BaseDist {
    #[serde(rename = "gaussian", alias = "GaussianUnit")]
    GaussianUnit,
    #[serde(rename = "uniform", alias = "UniformSqrt3")]
    UniformSqrt3,
}

impl BaseDist {
    pub fn name(self) -> &'static str {
        match self {
            BaseDist::GaussianUnit => "gaussian",
            BaseDist::UniformSqrt3 => "uniform",
        }
    }

    pub fn fill<R: Rng + ?Sized>(self, rng: &mut R, out: &mut [f64]) {
        match self {
            BaseDist::GaussianUnit => {
                for v in out.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
            }
            BaseDist::UniformSqrt3 => {
                let u = Uniform::new(-SQRT_3, SQRT_3).expect("valid bounds");
                for v in out.iter_mut() {
                    *v = u.sample(rng);
                }
            }
        }
    }

    /// Smallest `c'` with `P[ζ > c'] = 0.4`.
    pub fn upper_40_quantile(self) -> f64 {
        match self {
            // Φ⁻¹(0.6)
            BaseDist::GaussianUnit => 0.253_347_103_135_799_9,
            BaseDist::UniformSqrt3 => 0.2 * SQRT_3,
        }
    }
}

impl fmt::Display for BaseDist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for BaseDist {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" | "GaussianUnit" => Ok(BaseDist::GaussianUnit),
            "uniform" | "UniformSqrt3" => Ok(BaseDist::UniformSqrt3),
            other => Err(Error::InvalidArgument(format!("unknown base distribution {other:?}"))),
        }
    }
}

/// Implicit class-dependent noise transforms `A_k = λ_k q_k q_kᵀ + b Q_s Q_sᵀ`.
#[derive(Debug, Clone)]
pub struct NoiseModel {
    pub dim: usize,
    pub num_classes: usize,
    pub spike_vals: Vec<f64>,
    pub base_eig: f64,
    pub base_dist: BaseDist,
    basis: Arc<DMatrix<f64>>,
}

impl NoiseModel {
    /// General spike-plus-shared model on the basis of `sig`.
    pub fn new(sig: &SignalSet, spike_vals: Vec<f64>, base_eig: f64, base_dist: BaseDist) -> Result<Self> {
        if spike_vals.len() != sig.num_classes {
            return Err(Error::DimensionMismatch(format!(
                "{} spike values for {} classes",
                spike_vals.len(),
                sig.num_classes
            )));
        }
        if spike_vals.iter().chain(std::iter::once(&base_eig)).any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument("eigenvalues must be finite and ≥ 0".into()));
        }
        Ok(Self {
            dim: sig.dim,
            num_classes: sig.num_classes,
            spike_vals,
            base_eig,
            base_dist,
            basis: Arc::clone(&sig.basis),
        })
    }

    fn col(&self, c: usize) -> &[f64] {
        &self.basis.as_slice()[c * self.dim..(c + 1) * self.dim]
    }

    pub fn spike_dir(&self, k: usize) -> &[f64] {
        self.col(self.num_classes + k)
    }

    /// `r_s = d − 2K`.
    pub fn shared_rank(&self) -> usize {
        self.dim - 2 * self.num_classes
    }

    /// Columns of `Q_s` as a d×r_s matrix. Allocates `d·r_s` values.
    pub fn shared_basis(&self) -> DMatrix<f64> {
        self.basis.columns(2 * self.num_classes, self.shared_rank()).into_owned()
    }

    /// `out = A_k v`. `A_k` is symmetric so this is also `A_kᵀ v`.
    pub fn apply_into(&self, k: usize, v: &[f64], out: &mut [f64]) {
        assert_eq!(v.len(), self.dim);
        assert_eq!(out.len(), self.dim);
        let b = self.base_eig;
        out.iter_mut().zip(v).for_each(|(o, x)| *o = b * x);
        for c in 0..2 * self.num_classes {
            let col = self.col(c);
            let coef = b * dot(col, v);
            out.iter_mut().zip(col).for_each(|(o, u)| *o -= coef * u);
        }
        let q = self.spike_dir(k);
        let coef = self.spike_vals[k] * dot(q, v);
        out.iter_mut().zip(q).for_each(|(o, u)| *o += coef * u);
    }

    pub fn apply(&self, k: usize, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.apply_into(k, v, &mut out);
        out
    }

    /// `‖A_k‖_F = √(λ_k² + b² r_s)`.
    pub fn frob_a(&self, k: usize) -> f64 {
        let b2 = self.base_eig * self.base_eig;
        (self.spike_vals[k].powi(2) + b2 * self.shared_rank() as f64).sqrt()
    }

    /// `‖A_kᵀ A_j‖_F`: `√(λ_k⁴ + b⁴ r_s)` on the diagonal, `b² √r_s` off it.
    pub fn frob_ata(&self, k: usize, j: usize) -> f64 {
        let b2 = self.base_eig * self.base_eig;
        let rs = self.shared_rank() as f64;
        if k == j {
            (self.spike_vals[k].powi(4) + b2 * b2 * rs).sqrt()
        } else {
            b2 * rs.sqrt()
        }
    }

    /// `Tr(A_kᵀ A_k) = λ_k² + b² r_s`.
    pub fn trace_ata(&self, k: usize) -> f64 {
        self.frob_a(k).powi(2)
    }

    pub fn op_a(&self, k: usize) -> f64 {
        self.spike_vals[k].max(self.base_eig)
    }

    pub fn op_ata(&self, k: usize, j: usize) -> f64 {
        if k == j {
            self.op_a(k).powi(2)
        } else {
            self.base_eig * self.base_eig
        }
    }

    pub fn rank_a(&self, k: usize) -> usize {
        let shared = if self.base_eig > 0.0 { self.shared_rank() } else { 0 };
        shared + usize::from(self.spike_vals[k] > 0.0)
    }

    /// Largest and smallest non-zero eigenvalue of `A_k`.
    pub fn nonzero_eig_range(&self, k: usize) -> Option<(f64, f64)> {
        let mut vals = Vec::with_capacity(2);
        if self.spike_vals[k] > 0.0 {
            vals.push(self.spike_vals[k]);
        }
        if self.base_eig > 0.0 && self.shared_rank() > 0 {
            vals.push(self.base_eig);
        }
        let max = vals.iter().cloned().fold(f64::NAN, f64::max);
        let min = vals.iter().cloned().fold(f64::NAN, f64::min);
        (!vals.is_empty()).then_some((max, min))
    }

    /// Dense `A_k`. Oracle use only: `O(d²)` memory.
    pub fn materialize(&self, k: usize) -> DMatrix<f64> {
        let qs = self.shared_basis();
        let q = nalgebra::DVector::from_column_slice(self.spike_dir(k));
        &qs * qs.transpose() * self.base_eig + &q * q.transpose() * self.spike_vals[k]
    }
}

/// Builds a noise model whose NCR equals `target_ncr` for every class pair.
pub fn build_noise_model(
    sig: &SignalSet,
    target_ncr: f64,
    base_dist: BaseDist,
    class_counts: &[usize],
) -> Result<NoiseModel> {
    build_noise_model_with_base(sig, target_ncr, DEFAULT_BASE_EIG, base_dist, class_counts)
}

pub fn build_noise_model_with_base(
    sig: &SignalSet,
    target_ncr: f64,
    base_eig: f64,
    base_dist: BaseDist,
    class_counts: &[usize],
) -> Result<NoiseModel> {
    if !target_ncr.is_finite() || target_ncr < 1.0 {
        return Err(Error::UnreachableNcr(target_ncr));
    }
    if class_counts.len() != sig.num_classes {
        return Err(Error::DimensionMismatch(format!(
            "{} class counts for {} classes",
            class_counts.len(),
            sig.num_classes
        )));
    }
    if class_counts.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::UnequalClassCounts(class_counts.to_vec()));
    }
    if base_eig <= 0.0 {
        return Err(Error::InvalidArgument("base eigenvalue must be > 0".into()));
    }
    let rs = (sig.dim - 2 * sig.num_classes) as f64;
    let lambda = (base_eig.powi(4) * rs * (target_ncr * target_ncr - 1.0)).powf(0.25);
    let model = NoiseModel::new(sig, vec![lambda; sig.num_classes], base_eig, base_dist)?;

    if sig.num_classes > 1 {
        let achieved = compute_ncr(&model, class_counts, 0, 1)?;
        if (achieved - target_ncr).abs() > 5e-3 * target_ncr {
            return Err(Error::InvalidArgument(format!(
                "achieved NCR {achieved} misses target {target_ncr}"
            )));
        }
    }
    Ok(model)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `P` patches of length `dim`, concatenated.
    pub data: Vec<f64>,
    pub dim: usize,
    pub label: usize,
    /// Which patch holds the class signal; absent for real images.
    pub signal_pos: Option<usize>,
    /// The `ζ` that produced the noise patch.
    pub raw_zeta: Option<Vec<f64>>,
}

impl Sample {
    pub fn num_patches(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn patch(&self, j: usize) -> &[f64] {
        &self.data[j * self.dim..(j + 1) * self.dim]
    }

    pub fn patches(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    /// The noise patch of a two-patch synthetic sample.
    pub fn noise_patch(&self) -> Option<&[f64]> {
        let pos = self.signal_pos?;
        (self.num_patches() == 2).then(|| self.patch(1 - pos))
    }

    pub fn signal_patch(&self) -> Option<&[f64]> {
        self.signal_pos.map(|p| self.patch(p))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub class_counts: Vec<usize>,
    pub seed: u64,
    pub num_classes: usize,
    pub dim: usize,
    pub num_patches: usize,
}

impl Dataset {
    /// Builds a dataset from samples, recomputing class counts.
    pub fn from_samples(samples: Vec<Sample>, num_classes: usize, dim: usize, num_patches: usize, seed: u64) -> Result<Self> {
        let mut class_counts = vec![0usize; num_classes];
        for s in &samples {
            if s.label >= num_classes {
                return Err(Error::InvalidArgument(format!("label {} ≥ K = {num_classes}", s.label)));
            }
            if s.dim != dim || s.data.len() != dim * num_patches {
                return Err(Error::DimensionMismatch(format!(
                    "sample has {} values, expected {}×{}",
                    s.data.len(),
                    num_patches,
                    dim
                )));
            }
            class_counts[s.label] += 1;
        }
        Ok(Self {
            samples,
            class_counts,
            seed,
            num_classes,
            dim,
            num_patches,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn drop_raw_zeta(&mut self) {
        for s in &mut self.samples {
            s.raw_zeta = None;
        }
    }

    /// Subset by sample indices, in the given order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        let samples: Vec<Sample> = idx.iter().map(|&i| self.samples[i].clone()).collect();
        Self::from_samples(samples, self.num_classes, self.dim, self.num_patches, self.seed)
            .expect("subset of a valid dataset")
    }
}

/// Samples a two-patch dataset with exactly `class_counts[k]` samples of class `k`.
pub fn sample_dataset(sig: &SignalSet, noise: &NoiseModel, class_counts: &[usize], seed: u64) -> Result<Dataset> {
    if class_counts.len() != sig.num_classes || noise.num_classes != sig.num_classes || noise.dim != sig.dim {
        return Err(Error::DimensionMismatch("signal set, noise model and class counts disagree".into()));
    }
    let d = sig.dim;
    let mut labels: Vec<usize> = class_counts
        .iter()
        .enumerate()
        .flat_map(|(k, &c)| std::iter::repeat_n(k, c))
        .collect();
    labels.shuffle(&mut rng::named_stream(seed, "labels"));

    let mut g = rng::named_stream(seed, "samples");
    let mut samples = Vec::with_capacity(labels.len());
    for label in labels {
        let mut zeta = vec![0.0; d];
        noise.base_dist.fill(&mut g, &mut zeta);
        let pos = g.random_range(0..2usize);
        let mut data = vec![0.0; 2 * d];
        let (first, second) = data.split_at_mut(d);
        let (sig_slot, noise_slot) = if pos == 0 { (first, second) } else { (second, first) };
        sig_slot.copy_from_slice(&sig.signals[label]);
        noise.apply_into(label, &zeta, noise_slot);
        samples.push(Sample {
            data,
            dim: d,
            label,
            signal_pos: Some(pos),
            raw_zeta: Some(zeta),
        });
    }
    Dataset::from_samples(samples, sig.num_classes, d, 2, seed)
}

/// `SNR_{k,j} = |S_k| ‖u_k‖² / (√|S_j| ‖A_kᵀA_j‖_F)`.
pub fn compute_snr(sig: &SignalSet, noise: &NoiseModel, class_counts: &[usize], k: usize, j: usize) -> Result<f64> {
    check_pair(class_counts, sig.num_classes, k, j)?;
    let denom = (class_counts[j] as f64).sqrt() * noise.frob_ata(k, j);
    if denom == 0.0 {
        return Err(Error::InvalidArgument("SNR denominator is zero".into()));
    }
    Ok(class_counts[k] as f64 * sig.norms[k].powi(2) / denom)
}

/// `NCR_{k,j} = √|S_k| ‖A_kᵀA_k‖_F / (√|S_j| ‖A_kᵀA_j‖_F)`.
pub fn compute_ncr(noise: &NoiseModel, class_counts: &[usize], k: usize, j: usize) -> Result<f64> {
    check_pair(class_counts, noise.num_classes, k, j)?;
    let denom = (class_counts[j] as f64).sqrt() * noise.frob_ata(k, j);
    if denom == 0.0 {
        return Err(Error::InvalidArgument("NCR denominator is zero".into()));
    }
    Ok((class_counts[k] as f64).sqrt() * noise.frob_ata(k, k) / denom)
}

fn check_pair(class_counts: &[usize], num_classes: usize, k: usize, j: usize) -> Result<()> {
    if class_counts.len() != num_classes {
        return Err(Error::DimensionMismatch("class counts length".into()));
    }
    if k >= num_classes || j >= num_classes {
        return Err(Error::InvalidArgument(format!("class pair ({k}, {j}) out of range")));
    }
    if k == j {
        return Err(Error::InvalidArgument("SNR/NCR need distinct classes".into()));
    }
    Ok(())
}

/// Hyperparameters the over-parameterization and step-size conditions refer to.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionHyper {
    pub width: usize,
    pub eta: f64,
    pub batch: usize,
    pub sigma0: f64,
    /// Probability parameter of the high-probability statements.
    pub delta: f64,
    pub steps: usize,
    pub clip_c: f64,
    pub sigma_n: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionEntry {
    pub id: String,
    pub description: String,
    pub lhs: f64,
    /// `">="` or `"<="`.
    pub relation: String,
    pub rhs: f64,
    /// `lhs/rhs` for `>=`, `rhs/lhs` for `<=`; ≥ 1 means satisfied.
    pub ratio: f64,
    pub satisfied: bool,
    /// Unspecified absolute constants were set to 1.
    pub nominal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub entries: Vec<ConditionEntry>,
}

impl ConditionReport {
    pub fn get(&self, id: &str) -> Option<&ConditionEntry> {
        self.entries.iter().find(|e| e.id == id)
    }
}

fn entry(id: &str, description: &str, lhs: f64, relation: &str, rhs: f64) -> ConditionEntry {
    let ratio = if relation == ">=" { lhs / rhs } else { rhs / lhs };
    let satisfied = if relation == ">=" { lhs >= rhs } else { lhs <= rhs };
    ConditionEntry {
        id: id.into(),
        description: description.into(),
        lhs,
        relation: relation.into(),
        rhs,
        ratio,
        satisfied,
        nominal: true,
    }
}

/// Evaluates each inequality of the learnability conditions with the absolute
/// constants set to 1. Purely diagnostic; pairs are worst-case over classes.
pub fn check_condition(sig: &SignalSet, noise: &NoiseModel, class_counts: &[usize], hyper: &ConditionHyper) -> ConditionReport {
    let k_n = sig.num_classes;
    let n: usize = class_counts.iter().sum();
    let nf = n as f64;
    let m = hyper.width as f64;
    let delta = hyper.delta;
    let log_t = (hyper.steps.max(1) as f64).ln();
    let cross = |i: usize| (0..k_n).filter(move |&j| j != i);
    let max_cross_frob = (0..k_n)
        .flat_map(|i| cross(i).map(move |j| (i, j)))
        .map(|(i, j)| noise.frob_ata(i, j))
        .fold(0.0, f64::max);

    let mut entries = Vec::new();

    // (a) noise patch learnability
    let mut worst: Option<ConditionEntry> = None;
    for i in 0..k_n {
        let first = cross(i).map(|j| noise.frob_ata(i, j)).fold(0.0, f64::max) * (nf * nf / delta).ln();
        let si = class_counts[i].max(1) as f64;
        let second = nf.sqrt() * max_cross_frob.sqrt() * (nf * nf / delta).ln().sqrt() / si;
        let e = entry(
            "a1",
            "Tr(A_iᵀA_i) >= n·max{‖A_iᵀA_j‖_F log(n²/δ), √n max‖A_iᵀA_j‖_F^½ log^½(n²/δ)/|S_i|}",
            noise.trace_ata(i),
            ">=",
            nf * first.max(second),
        );
        if worst.as_ref().is_none_or(|w| e.ratio < w.ratio) {
            worst = Some(e);
        }
    }
    entries.extend(worst);

    let mut worst: Option<ConditionEntry> = None;
    for i in 0..k_n {
        for j in cross(i) {
            let e = entry(
                "a2",
                "‖A_iᵀA_j‖_F / ‖A_iᵀA_j‖_op >= √log(K/δ)",
                noise.frob_ata(i, j) / noise.op_ata(i, j),
                ">=",
                (k_n as f64 / delta).ln().sqrt(),
            );
            if worst.as_ref().is_none_or(|w| e.ratio < w.ratio) {
                worst = Some(e);
            }
        }
    }
    entries.extend(worst);

    let mut worst: Option<ConditionEntry> = None;
    for i in 0..k_n {
        let other = cross(i).map(|k| noise.frob_ata(i, k)).fold(0.0, f64::max);
        let e = entry("a3", "‖A_iᵀA_i‖_F >= max_{k≠i} ‖A_iᵀA_k‖_F", noise.frob_ata(i, i), ">=", other);
        if worst.as_ref().is_none_or(|w| e.ratio < w.ratio) {
            worst = Some(e);
        }
    }
    entries.extend(worst);

    let c_prime = noise.base_dist.upper_40_quantile();
    let mut e = entry("a4", "threshold c' with P[ζ > c'] >= 0.4", c_prime, ">=", 0.0);
    e.nominal = false;
    e.ratio = f64::INFINITY;
    entries.push(e);

    // (b) over-parameterization
    let cond_sq = (0..k_n)
        .filter_map(|i| noise.nonzero_eig_range(i))
        .map(|(hi, lo)| (hi / lo).powi(2))
        .fold(0.0, f64::max);
    entries.push(entry("b1", "m >= log(n/δ)·max_i (λ⁺max/λ⁺min)²", m, ">=", (nf / delta).ln() * cond_sq));
    entries.push(entry("b2", "n >= log(m/δ)", nf, ">=", (m / delta).ln()));
    let s0 = hyper.sigma0;
    entries.push(entry(
        "b3",
        "m >= log(n/δ)·log(T)² / (n σ0²)",
        m,
        ">=",
        (nf / delta).ln() * log_t * log_t / (nf * s0 * s0),
    ));
    let min_rank = (0..k_n).map(|j| noise.rank_a(j)).min().unwrap_or(0);
    entries.push(entry(
        "b4",
        "min{m, d, rank(A_j)} − 0.9m >= n",
        (hyper.width.min(sig.dim).min(min_rank)) as f64 - 0.9 * m,
        ">=",
        nf,
    ));
    entries.push(entry("b5", "d >= log(mn/δ)", sig.dim as f64, ">=", (m * nf / delta).ln()));

    // (c) optimization
    let max_u = sig.norms.iter().cloned().fold(0.0, f64::max);
    let max_tr = (0..k_n).map(|k| noise.trace_ata(k)).fold(0.0, f64::max);
    let c1_bound = 1.0 / ((hyper.clip_c + (sig.dim as f64).sqrt() * hyper.sigma_n) * (max_u + (1.5 * max_tr).sqrt()));
    entries.push(entry("c1", "η <= ((C + √d σ_n)(max‖u_k‖ + √(1.5 Tr(A_kᵀA_k))))⁻¹", hyper.eta, "<=", c1_bound));
    entries.push(entry("c2", "η <= m n log(T) / max Tr(A_jᵀA_j)", hyper.eta, "<=", m * nf * log_t / max_tr));
    entries.push(entry("c3", "B >= n", hyper.batch as f64, ">=", nf));
    let mut phi = f64::INFINITY;
    for k1 in 0..k_n {
        phi = phi.min(sig.norms[k1].powi(2));
        for k2 in 0..k_n {
            phi = phi.min(noise.frob_ata(k1, k2));
        }
    }
    let lkm = (k_n as f64 * m / delta).ln();
    let scale = (0..k_n)
        .map(|k| (lkm.sqrt() * sig.norms[k]).max(lkm * noise.frob_a(k)))
        .fold(0.0, f64::max);
    entries.push(entry(
        "c4",
        "σ0 <= φ / (n·max{√log(Km/δ)‖u_k‖, log(Km/δ)‖A_k‖_F})",
        s0,
        "<=",
        phi / (nf * scale),
    ));

    ConditionReport { entries }
}
