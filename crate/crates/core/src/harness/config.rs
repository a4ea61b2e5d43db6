//! JSON experiment configuration.
//!
//! Every block has complete defaults (the desk-scale synthetic setup), so a
//! config file only needs the leaves it changes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{BaseDist, DEFAULT_BASE_EIG};
use crate::dp_optimizer::{DPConfig, Mode};
use crate::error::{Error, Result};
use crate::influence::CovNorm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Dynamics,
    HeatmapSweep,
    LongtailEval,
    MnistInfluence,
    Diagnostics,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeSelection {
    Clean,
    Dp,
    #[default]
    Both,
}

impl ModeSelection {
    pub fn modes(self) -> Vec<Mode> {
        match self {
            ModeSelection::Clean => vec![Mode::Clean],
            ModeSelection::Dp => vec![Mode::Dp],
            ModeSelection::Both => vec![Mode::Clean, Mode::Dp],
        }
    }
}

impl std::str::FromStr for ModeSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(Self::Clean),
            "dp" => Ok(Self::Dp),
            "both" => Ok(Self::Both),
            other => Err(Error::Config(format!("mode must be clean, dp or both (got {other:?})"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatagenBlock {
    pub num_classes: usize,
    pub dim: usize,
    /// Signal norm shared by all classes.
    pub norm: f64,
    /// Per-class norms; overrides `norm` outside of sweeps.
    pub norms: Option<Vec<f64>>,
    pub norm_grid: Vec<f64>,
    pub ncr: f64,
    pub ncr_grid: Vec<f64>,
    pub dist: BaseDist,
    /// Noise distributions covered by a sweep.
    pub dists: Vec<BaseDist>,
    pub base_eig: f64,
    pub train_counts: Vec<usize>,
    pub test_counts: Vec<usize>,
}

impl Default for DatagenBlock {
    fn default() -> Self {
        Self {
            num_classes: 5,
            dim: 1000,
            norm: 0.5,
            norms: None,
            norm_grid: vec![0.0, 0.95, 1.9, 2.85, 3.8],
            ncr: 1400.0,
            ncr_grid: vec![1.0, 350.0, 700.0, 1050.0, 1400.0],
            dist: BaseDist::GaussianUnit,
            dists: vec![BaseDist::GaussianUnit, BaseDist::UniformSqrt3],
            base_eig: DEFAULT_BASE_EIG,
            train_counts: vec![100; 5],
            test_counts: vec![100; 5],
        }
    }
}

impl DatagenBlock {
    pub fn class_norms(&self) -> Vec<f64> {
        self.norms.clone().unwrap_or_else(|| vec![self.norm; self.num_classes])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelBlock {
    pub width: usize,
    pub sigma0: f64,
    pub patches: usize,
}

impl Default for ModelBlock {
    fn default() -> Self {
        Self {
            width: 100,
            sigma0: 1e-4,
            patches: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerBlock {
    pub mode: ModeSelection,
    pub clip_c: f64,
    /// Pins the DP noise std instead of calibrating it from `(ε, δ_DP)`.
    pub sigma_n_explicit: Option<f64>,
    /// Extra DP noise levels for the loss-floor scan of `diagnostics`.
    pub sigma_n_grid: Vec<f64>,
    pub epsilon: f64,
    pub delta_dp: f64,
    pub eta: f64,
    pub batch: usize,
    pub epochs: usize,
    pub trace_every: usize,
}

impl Default for OptimizerBlock {
    fn default() -> Self {
        Self {
            mode: ModeSelection::Both,
            clip_c: 1.0,
            sigma_n_explicit: None,
            sigma_n_grid: Vec::new(),
            epsilon: 8.0,
            delta_dp: 1e-5,
            eta: 0.002,
            batch: 256,
            epochs: 20,
            trace_every: 1,
        }
    }
}

impl OptimizerBlock {
    pub fn dp_config(&self, mode: Mode, seed: u64) -> DPConfig {
        DPConfig {
            mode,
            clip_c: self.clip_c,
            sigma_n: self.sigma_n_explicit,
            epsilon: self.epsilon,
            delta_dp: self.delta_dp,
            eta: self.eta,
            batch: self.batch,
            epochs: self.epochs,
            seed,
            trace_every: self.trace_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalBlock {
    /// Explicit long-tail thresholds `L`.
    pub l_values: Vec<f64>,
    /// Target partition sizes; each adds the `L` that selects that fraction.
    pub longtail_fractions: Vec<f64>,
    pub x_percent: Vec<f64>,
    pub cov_norm: CovNorm,
    /// Failure probability used by the diagnostic bounds.
    pub delta: f64,
}

impl Default for EvalBlock {
    fn default() -> Self {
        Self {
            l_values: vec![0.0, 0.5, 1.0, 1.5, 2.0],
            longtail_fractions: vec![0.1, 0.2, 0.3],
            x_percent: vec![1.0, 5.0, 10.0, 20.0, 50.0],
            cov_norm: CovNorm::Population,
            delta: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MnistBlock {
    /// Directory with the four IDX files (gzip or raw).
    pub dir: Option<PathBuf>,
    pub train_images: String,
    pub train_labels: String,
    pub test_images: String,
    pub test_labels: String,
    pub subsample_per_class: Option<usize>,
    pub patches: usize,
    pub width: usize,
    /// Learning rate for the MNIST runs; falls back to the optimizer block.
    pub eta: Option<f64>,
    pub sigma0: Option<f64>,
    /// Score 2×2-pooled 14×14 images instead of full resolution.
    pub downsample: bool,
}

impl Default for MnistBlock {
    fn default() -> Self {
        Self {
            dir: None,
            train_images: "train-images-idx3-ubyte".into(),
            train_labels: "train-labels-idx1-ubyte".into(),
            test_images: "t10k-images-idx3-ubyte".into(),
            test_labels: "t10k-labels-idx1-ubyte".into(),
            subsample_per_class: Some(1000),
            patches: 2,
            width: 100,
            eta: None,
            sigma0: None,
            downsample: false,
        }
    }
}

impl MnistBlock {
    /// Resolves a file name inside `dir`, accepting a `.gz` sibling.
    pub fn resolve(&self, name: &str) -> Result<PathBuf> {
        let dir = self
            .dir
            .as_ref()
            .ok_or_else(|| Error::Config("mnist.dir is not set".into()))?;
        let plain = dir.join(name);
        if plain.exists() {
            return Ok(plain);
        }
        let gz = dir.join(format!("{name}.gz"));
        if gz.exists() {
            return Ok(gz);
        }
        Err(Error::MissingFile(plain))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub workers: usize,
    /// Independent repetitions per sweep cell.
    pub repeats: usize,
    pub datagen: DatagenBlock,
    pub model: ModelBlock,
    pub optimizer: OptimizerBlock,
    pub eval: EvalBlock,
    pub mnist: MnistBlock,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: Experiment::Dynamics,
            seed: 0,
            output_dir: PathBuf::from("out"),
            workers: 1,
            repeats: 1,
            datagen: DatagenBlock::default(),
            model: ModelBlock::default(),
            optimizer: OptimizerBlock::default(),
            eval: EvalBlock::default(),
            mnist: MnistBlock::default(),
        }
    }
}

fn positive(v: f64, what: &str) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} = {v} must be positive and finite")))
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the config with execution-only leaves (output dir, worker
    /// count) blanked, so outputs do not depend on where or how wide they ran.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.output_dir = PathBuf::new();
        canon.workers = 0;
        let digest = Sha256::digest(serde_json::to_vec(&canon).expect("config serializes"));
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.datagen;
        if g.num_classes < 2 {
            return Err(Error::Config("datagen.num_classes must be ≥ 2".into()));
        }
        if g.dim <= 2 * g.num_classes {
            return Err(Error::Config(format!("datagen.dim must exceed 2K = {}", 2 * g.num_classes)));
        }
        for (name, counts) in [("train_counts", &g.train_counts), ("test_counts", &g.test_counts)] {
            if counts.len() != g.num_classes {
                return Err(Error::Config(format!(
                    "datagen.{name} has {} entries for {} classes",
                    counts.len(),
                    g.num_classes
                )));
            }
        }
        if let Some(norms) = &g.norms {
            if norms.len() != g.num_classes {
                return Err(Error::Config("datagen.norms length must equal num_classes".into()));
            }
        }
        if g.norm_grid.is_empty() || g.ncr_grid.is_empty() || g.dists.is_empty() {
            return Err(Error::Config("sweep grids must be non-empty".into()));
        }
        if g.class_norms().iter().chain(&g.norm_grid).any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("signal norms must be finite and ≥ 0".into()));
        }
        positive(g.base_eig, "datagen.base_eig")?;
        if self.model.width == 0 {
            return Err(Error::Config("model.width must be ≥ 1".into()));
        }
        if !(self.model.sigma0 >= 0.0) {
            return Err(Error::Config("model.sigma0 must be ≥ 0".into()));
        }
        if self.model.patches != 2 {
            return Err(Error::Config("synthetic data has exactly two patches (model.patches = 2)".into()));
        }
        let o = &self.optimizer;
        positive(o.eta, "optimizer.eta")?;
        positive(o.clip_c, "optimizer.clip_c")?;
        positive(o.epsilon, "optimizer.epsilon")?;
        if !(o.delta_dp > 0.0 && o.delta_dp < 1.0) {
            return Err(Error::Config("optimizer.delta_dp must lie in (0, 1)".into()));
        }
        if o.batch == 0 {
            return Err(Error::Config("optimizer.batch must be ≥ 1".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be ≥ 1".into()));
        }
        if self.eval.x_percent.iter().any(|x| !(*x > 0.0 && *x <= 50.0)) {
            return Err(Error::Config("eval.x_percent values must lie in (0, 50]".into()));
        }
        if self.eval.longtail_fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(Error::Config("eval.longtail_fractions must lie in (0, 1]".into()));
        }
        if self.eval.l_values.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::Config("eval.l_values must be ≥ 0".into()));
        }
        if self.experiment == Experiment::MnistInfluence {
            for name in [
                &self.mnist.train_images,
                &self.mnist.train_labels,
                &self.mnist.test_images,
                &self.mnist.test_labels,
            ] {
                self.mnist.resolve(name)?;
            }
        }
        Ok(())
    }

    /// Worker pool sized by `workers` (0 means one per core).
    pub fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))
    }
}
