//! Covariance influence scores
//!
//! ```text
//! I(x, y) = ‖Σ̂(S_y)‖_F² − ‖Σ̂(S_y \ {x})‖_F²
//! ```
//!
//! computed with a leave-one-out downdate of the raw moments `S = Σ x xᵀ`
//! and `s = Σ x`, `O(n·d²)` per class.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Covariance normaliser.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovNorm {
    /// `1/n`
    #[default]
    Population,
    /// `1/(n−1)`
    Sample,
}

impl CovNorm {
    /// `(α, β)` with `Σ̂ = α S − β μ μᵀ` for `n` vectors.
    fn coefficients(self, n: usize) -> (f64, f64) {
        let nf = n as f64;
        match self {
            CovNorm::Population => (1.0 / nf, 1.0),
            CovNorm::Sample => (1.0 / (nf - 1.0), nf / (nf - 1.0)),
        }
    }
}

/// Mean, raw second moment `(1/n) Σ x xᵀ` and covariance, row-major `d×d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassCovariance {
    pub dim: usize,
    pub mean: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub cov: Vec<f64>,
}

fn check_vectors<V: AsRef<[f64]>>(vectors: &[V], min: usize) -> Result<usize> {
    if vectors.len() < min {
        return Err(Error::InvalidArgument(format!(
            "need at least {min} vectors, got {}",
            vectors.len()
        )));
    }
    let d = vectors[0].as_ref().len();
    if vectors.iter().any(|v| v.as_ref().len() != d) {
        return Err(Error::DimensionMismatch("vectors of different lengths".into()));
    }
    Ok(d)
}

fn raw_moments<V: AsRef<[f64]>>(vectors: &[V], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut s = vec![0.0; d];
    let mut ss = vec![0.0; d * d];
    for v in vectors {
        let v = v.as_ref();
        for i in 0..d {
            s[i] += v[i];
            if v[i] == 0.0 {
                continue;
            }
            let row = &mut ss[i * d..(i + 1) * d];
            for j in i..d {
                row[j] += v[i] * v[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            ss[i * d + j] = ss[j * d + i];
        }
    }
    (s, ss)
}

pub fn class_covariance<V: AsRef<[f64]>>(vectors: &[V], norm: CovNorm) -> Result<ClassCovariance> {
    let d = check_vectors(vectors, 2)?;
    let n = vectors.len();
    let (s, ss) = raw_moments(vectors, d);
    let mean: Vec<f64> = s.iter().map(|v| v / n as f64).collect();
    let second_moment: Vec<f64> = ss.iter().map(|v| v / n as f64).collect();
    let (alpha, beta) = norm.coefficients(n);
    let mut cov = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            cov[i * d + j] = alpha * ss[i * d + j] - beta * mean[i] * mean[j];
        }
    }
    Ok(ClassCovariance {
        dim: d,
        mean,
        second_moment,
        cov,
    })
}

/// `‖α(S − x xᵀ) − β b bᵀ‖_F²` over the symmetric matrix, upper triangle only.
fn frob_sq_downdated(ss: &[f64], d: usize, alpha: f64, beta: f64, x: Option<&[f64]>, b: &[f64]) -> f64 {
    let mut diag = 0.0;
    let mut off = 0.0;
    for i in 0..d {
        let row = &ss[i * d..(i + 1) * d];
        let bi = beta * b[i];
        match x {
            Some(x) => {
                let xi = x[i];
                let v = alpha * (row[i] - xi * xi) - bi * b[i];
                diag += v * v;
                for j in i + 1..d {
                    let v = alpha * (row[j] - xi * x[j]) - bi * b[j];
                    off += v * v;
                }
            }
            None => {
                let v = alpha * row[i] - bi * b[i];
                diag += v * v;
                for j in i + 1..d {
                    let v = alpha * row[j] - bi * b[j];
                    off += v * v;
                }
            }
        }
    }
    diag + 2.0 * off
}

/// Leave-one-out influence score of every vector of one class, in input order.
pub fn influence_scores<V: AsRef<[f64]> + Sync>(vectors: &[V], norm: CovNorm) -> Result<Vec<f64>> {
    let d = check_vectors(vectors, 3)?;
    let n = vectors.len();
    // Shift by the class mean first; scores are translation invariant and the
    // downdate loses fewer digits on centred moments.
    let mut shift = vec![0.0; d];
    for v in vectors {
        shift.iter_mut().zip(v.as_ref()).for_each(|(m, x)| *m += x);
    }
    shift.iter_mut().for_each(|m| *m /= n as f64);
    let centred: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| v.as_ref().iter().zip(&shift).map(|(x, m)| x - m).collect())
        .collect();
    let (s, ss) = raw_moments(&centred, d);
    let (alpha, beta) = norm.coefficients(n);
    let mean: Vec<f64> = s.iter().map(|v| v / n as f64).collect();
    let full = frob_sq_downdated(&ss, d, alpha, beta, None, &mean);

    let (alpha_l, beta_l) = norm.coefficients(n - 1);
    let inv = 1.0 / (n - 1) as f64;
    Ok(centred
        .par_iter()
        .map(|x| {
            let mean_l: Vec<f64> = s.iter().zip(x).map(|(a, b)| (a - b) * inv).collect();
            full - frob_sq_downdated(&ss, d, alpha_l, beta_l, Some(x), &mean_l)
        })
        .collect())
}

/// Reference implementation: recompute each leave-one-out covariance from
/// scratch with the centred two-pass formula. `O(n²·d²)`.
pub fn influence_scores_naive<V: AsRef<[f64]>>(vectors: &[V], norm: CovNorm) -> Result<Vec<f64>> {
    check_vectors(vectors, 3)?;
    let frob = |set: &[&[f64]]| -> f64 {
        let n = set.len();
        let d = set[0].len();
        let mut mean = vec![0.0; d];
        for v in set {
            mean.iter_mut().zip(*v).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let div = match norm {
            CovNorm::Population => n as f64,
            CovNorm::Sample => (n - 1) as f64,
        };
        let mut total = 0.0;
        for i in 0..d {
            for j in 0..d {
                let c: f64 = set.iter().map(|v| (v[i] - mean[i]) * (v[j] - mean[j])).sum::<f64>() / div;
                total += c * c;
            }
        }
        total
    };
    let all: Vec<&[f64]> = vectors.iter().map(|v| v.as_ref()).collect();
    let full = frob(&all);
    Ok((0..all.len())
        .map(|skip| {
            let rest: Vec<&[f64]> = all
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != skip)
                .map(|(_, v)| *v)
                .collect();
            full - frob(&rest)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceEntry {
    pub id: usize,
    pub label: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceTable {
    pub entries: Vec<InfluenceEntry>,
    /// Per class, positions into `entries` in ascending `(score, id)` order.
    pub by_class: Vec<Vec<usize>>,
}

impl InfluenceTable {
    /// Scores every class independently. `ids[i]` names `vectors[i]`.
    pub fn build<V: AsRef<[f64]> + Sync>(
        vectors: &[V],
        labels: &[usize],
        ids: &[usize],
        num_classes: usize,
        norm: CovNorm,
    ) -> Result<Self> {
        if vectors.len() != labels.len() || ids.len() != labels.len() {
            return Err(Error::DimensionMismatch("vectors, labels and ids".into()));
        }
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
        for (i, &y) in labels.iter().enumerate() {
            if y >= num_classes {
                return Err(Error::InvalidArgument(format!("label {y} ≥ K = {num_classes}")));
            }
            members[y].push(i);
        }
        let per_class: Vec<Vec<f64>> = members
            .iter()
            .map(|idx| {
                if idx.is_empty() {
                    return Ok(Vec::new());
                }
                let vs: Vec<&[f64]> = idx.iter().map(|&i| vectors[i].as_ref()).collect();
                influence_scores(&vs, norm)
            })
            .collect::<Result<_>>()?;

        let mut entries = Vec::with_capacity(vectors.len());
        let mut by_class = vec![Vec::new(); num_classes];
        for (k, (idx, scores)) in members.iter().zip(&per_class).enumerate() {
            for (&i, &score) in idx.iter().zip(scores) {
                by_class[k].push(entries.len());
                entries.push(InfluenceEntry {
                    id: ids[i],
                    label: k,
                    score,
                });
            }
        }
        for order in &mut by_class {
            order.sort_by(|&a, &b| {
                entries[a]
                    .score
                    .total_cmp(&entries[b].score)
                    .then(entries[a].id.cmp(&entries[b].id))
            });
        }
        Ok(Self { entries, by_class })
    }

    /// Rank within class, 0 = highest score.
    pub fn rank_in_class(&self) -> Vec<usize> {
        let mut rank = vec![0; self.entries.len()];
        for order in &self.by_class {
            for (pos, &e) in order.iter().rev().enumerate() {
                rank[e] = pos;
            }
        }
        rank
    }

    pub fn write_csv<W: std::io::Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "id,label,score,rank_in_class")?;
        let rank = self.rank_in_class();
        let mut order: Vec<usize> = (0..self.entries.len()).collect();
        order.sort_by_key(|&i| self.entries[i].id);
        for i in order {
            let e = &self.entries[i];
            writeln!(out, "{},{},{},{}", e.id, e.label, e.score, rank[i])?;
        }
        Ok(())
    }
}

/// Ids of the top and bottom `x_percent` scores of every class
/// (`⌈x·n_k/100⌉` each), in class order.
pub fn quantile_partition(table: &InfluenceTable, x_percent: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(x_percent > 0.0 && x_percent <= 50.0) {
        return Err(Error::InvalidArgument(format!("X = {x_percent} must lie in (0, 50]")));
    }
    let mut top = Vec::new();
    let mut bottom = Vec::new();
    for (k, order) in table.by_class.iter().enumerate() {
        if order.is_empty() {
            return Err(Error::Empty { what: format!("class {k}") });
        }
        let q = ((x_percent * order.len() as f64 / 100.0).ceil() as usize).min(order.len());
        bottom.extend(order[..q].iter().map(|&e| table.entries[e].id));
        top.extend(order[order.len() - q..].iter().map(|&e| table.entries[e].id));
    }
    Ok((top, bottom))
}
