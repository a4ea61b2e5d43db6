use std::path::PathBuf;
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;

use super::config::ExperimentConfig;
use super::svg::HeatmapGrid;
use super::{csv_out, fmt_opt, write_with_provenance};
use crate::datagen::{
    build_noise_model_with_base, build_signals, check_condition, compute_ncr, compute_snr, sample_dataset, BaseDist,
    ConditionHyper, Dataset, NoiseModel, SignalSet,
};
use crate::dp_optimizer::{train, DPConfig, Mode, TrainTrace};
use crate::error::Result;
use crate::evaluation::{accuracy, diagnostics, EvalReport, longtail_error, longtail_scores, select_by_score, test_error, threshold_for_fraction};
use crate::formats::{write_dataset, write_weights, DatasetSidecar};
use crate::influence::{quantile_partition, InfluenceTable};
use crate::mnist_io::{self, NUM_DIGITS};
use crate::model::{init_weights, ModelWeights};
use crate::rng::derive_seed;

/// Everything one synthetic run needs, derived from a single seed.
#[derive(Debug, Clone)]
pub struct SyntheticSetup {
    pub sig: SignalSet,
    pub noise: NoiseModel,
    pub train: Dataset,
    pub test: Dataset,
    pub w0: ModelWeights,
    /// Seed of the optimizer's batch/noise streams (shared by paired runs).
    pub train_seed: u64,
}

impl SyntheticSetup {
    pub fn dp_config(&self, cfg: &ExperimentConfig, mode: Mode) -> DPConfig {
        cfg.optimizer.dp_config(mode, self.train_seed)
    }
}

pub fn synthetic_setup(cfg: &ExperimentConfig, norms: &[f64], ncr: f64, dist: BaseDist, seed: u64) -> Result<SyntheticSetup> {
    let g = &cfg.datagen;
    let sig = build_signals(g.num_classes, g.dim, norms, derive_seed(seed, &["signals"]))?;
    let noise = build_noise_model_with_base(&sig, ncr, g.base_eig, dist, &g.train_counts)?;
    let train = sample_dataset(&sig, &noise, &g.train_counts, derive_seed(seed, &["train"]))?;
    let test = sample_dataset(&sig, &noise, &g.test_counts, derive_seed(seed, &["test"]))?;
    let w0 = init_weights(g.num_classes, cfg.model.width, g.dim, cfg.model.sigma0, derive_seed(seed, &["init"]))?;
    Ok(SyntheticSetup {
        sig,
        noise,
        train,
        test,
        w0,
        train_seed: derive_seed(seed, &["optim"]),
    })
}

fn base_setup(cfg: &ExperimentConfig) -> Result<SyntheticSetup> {
    synthetic_setup(cfg, &cfg.datagen.class_norms(), cfg.datagen.ncr, cfg.datagen.dist, cfg.seed)
}

/// Trains the selected modes from the same `w0`, data and optimizer seed.
fn paired_train(
    cfg: &ExperimentConfig,
    w0: &ModelWeights,
    data: &Dataset,
    train_seed: u64,
) -> Vec<(Mode, Result<(ModelWeights, TrainTrace)>)> {
    cfg.optimizer
        .mode
        .modes()
        .into_par_iter()
        .map(|mode| (mode, train(w0, data, &cfg.optimizer.dp_config(mode, train_seed))))
        .collect()
}

// ---------------------------------------------------------------- gen

#[derive(Debug, Clone)]
pub struct GenOutput {
    pub setup: SyntheticSetup,
    pub files: Vec<PathBuf>,
}

/// Samples the configured train/test sets and initial weights and writes them
/// as binary containers with a JSON sidecar and a summary CSV.
pub fn run_gen(cfg: &ExperimentConfig) -> Result<GenOutput> {
    cfg.validate()?;
    let setup = cfg.pool()?.install(|| base_setup(cfg))?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let out = &cfg.output_dir;
    let counts = &cfg.datagen.train_counts;
    let snr = compute_snr(&setup.sig, &setup.noise, counts, 0, 1).ok();
    let ncr = compute_ncr(&setup.noise, counts, 0, 1).ok();

    let mut files = vec![out.join("train.dptl"), out.join("test.dptl"), out.join("init.dptw"), out.join("dataset.json")];
    write_dataset(&files[0], &setup.train)?;
    write_dataset(&files[1], &setup.test)?;
    write_weights(&files[2], &setup.w0)?;
    let sidecar = DatasetSidecar::describe(&setup.sig, &setup.noise, &setup.train, ncr, snr);
    std::fs::write(&files[3], serde_json::to_string_pretty(&sidecar)?)?;

    let (path, mut w) = csv_out(cfg, "gen_summary.csv")?;
    w.write_record(["quantity", "value"])?;
    let rows: Vec<(&str, String)> = vec![
        ("n_train", setup.train.len().to_string()),
        ("n_test", setup.test.len().to_string()),
        ("snr_01", fmt_opt(snr)),
        ("ncr_01", fmt_opt(ncr)),
        ("spike_eig", setup.noise.spike_vals[0].to_string()),
        ("base_eig", setup.noise.base_eig.to_string()),
        ("frob_a", setup.noise.frob_a(0).to_string()),
        ("trace_ata", setup.noise.trace_ata(0).to_string()),
    ];
    for (k, v) in rows {
        w.write_record([k, v.as_str()])?;
    }
    w.flush()?;
    files.push(path);
    Ok(GenOutput { setup, files })
}

// ----------------------------------------------------------- dynamics

#[derive(Debug, Clone)]
pub struct DynamicsOutput {
    pub traces: Vec<TrainTrace>,
    pub files: Vec<PathBuf>,
}

impl DynamicsOutput {
    pub fn trace(&self, mode: Mode) -> Option<&TrainTrace> {
        self.traces.iter().find(|t| t.mode == mode)
    }
}

/// Paired Clean/DP training on one dataset; one trace CSV per mode.
pub fn run_dynamics(cfg: &ExperimentConfig) -> Result<DynamicsOutput> {
    cfg.validate()?;
    let pool = cfg.pool()?;
    let runs = pool.install(|| -> Result<_> {
        let setup = base_setup(cfg)?;
        Ok(paired_train(cfg, &setup.w0, &setup.train, setup.train_seed))
    })?;
    let mut traces = Vec::new();
    let mut files = Vec::new();
    for (mode, run) in runs {
        let (w, trace) = run?;
        let mut body = Vec::new();
        trace.write_csv(&mut body)?;
        files.push(write_with_provenance(cfg, &format!("dynamics_{mode}.csv"), &body)?);
        let wpath = cfg.output_dir.join(format!("weights_{mode}.dptw"));
        write_weights(&wpath, &w)?;
        files.push(wpath);
        info!(
            "{mode}: final train loss {:?}, noise_align {:?}",
            trace.final_record().train_loss,
            trace.final_record().noise_align
        );
        traces.push(trace);
    }
    Ok(DynamicsOutput { traces, files })
}

// -------------------------------------------------------------- sweep

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum CellStatus {
    Ok,
    Error(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCell {
    pub dist: BaseDist,
    pub mode: Mode,
    pub norm: f64,
    pub ncr: f64,
    pub repeat: usize,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub train_loss: Option<f64>,
    pub status: CellStatus,
    pub runtime_secs: f64,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub norms: Vec<f64>,
    pub ncrs: Vec<f64>,
    pub cells: Vec<SweepCell>,
    pub files: Vec<PathBuf>,
}

impl SweepResult {
    /// Mean accuracy over repeats for one cell; `None` if every repeat failed.
    pub fn accuracy(&self, dist: BaseDist, mode: Mode, norm: f64, ncr: f64) -> Option<f64> {
        let accs: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.dist == dist && c.mode == mode && c.norm == norm && c.ncr == ncr)
            .filter_map(|c| c.accuracy)
            .collect();
        (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
    }

    /// `rows[i][j]` = accuracy at `(norms[i], ncrs[j])`.
    pub fn pane(&self, dist: BaseDist, mode: Mode) -> Vec<Vec<Option<f64>>> {
        self.norms
            .iter()
            .map(|&u| self.ncrs.iter().map(|&r| self.accuracy(dist, mode, u, r)).collect())
            .collect()
    }
}

fn clamp_ncr(grid: &[f64]) -> Vec<f64> {
    grid.iter()
        .map(|&v| {
            if v < 1.0 {
                warn!("NCR grid value {v} is below 1 and was clamped to 1");
                1.0
            } else {
                v
            }
        })
        .collect()
}

/// Seed of one data cell: a hash of the root seed and the cell coordinates,
/// independent of execution order. Clean and DP share it.
pub(crate) fn cell_seed(root: u64, dist: BaseDist, norm: f64, ncr: f64, repeat: usize) -> u64 {
    derive_seed(root, &["cell", dist.name(), &format!("{norm:?}"), &format!("{ncr:?}"), &repeat.to_string()])
}

/// Fresh data per `(dist, norm, ncr, repeat)`; every configured mode is trained
/// on it. Failed cells become error rows.
pub fn run_heatmap_sweep(cfg: &ExperimentConfig) -> Result<SweepResult> {
    cfg.validate()?;
    let g = &cfg.datagen;
    let norms = g.norm_grid.clone();
    let ncrs = clamp_ncr(&g.ncr_grid);
    let modes = cfg.optimizer.mode.modes();

    let mut coords = Vec::new();
    for &dist in &g.dists {
        for &norm in &norms {
            for &ncr in &ncrs {
                for repeat in 0..cfg.repeats {
                    coords.push((dist, norm, ncr, repeat));
                }
            }
        }
    }

    let pool = cfg.pool()?;
    let per_coord: Vec<Vec<SweepCell>> = pool.install(|| {
        coords
            .par_iter()
            .map(|&(dist, norm, ncr, repeat)| {
                let seed = cell_seed(cfg.seed, dist, norm, ncr, repeat);
                let started = Instant::now();
                let setup = synthetic_setup(cfg, &vec![norm; g.num_classes], ncr, dist, seed);
                let setup_secs = started.elapsed().as_secs_f64();
                modes
                    .par_iter()
                    .map(|&mode| {
                        let t0 = Instant::now();
                        let outcome = match &setup {
                            Err(e) => Err(e.to_string()),
                            // Only the final model matters here, so skip the per-step full-train loss.
                            Ok(s) => train(&s.w0, &s.train, &DPConfig { trace_every: 0, ..s.dp_config(cfg, mode) })
                                .and_then(|(w, trace)| Ok((accuracy(&w, &s.test)?, trace.final_record().train_loss)))
                                .map_err(|e| e.to_string()),
                        };
                        let runtime_secs = setup_secs + t0.elapsed().as_secs_f64();
                        let (accuracy, train_loss, status) = match outcome {
                            Ok((a, l)) => (Some(a), l, CellStatus::Ok),
                            Err(e) => {
                                warn!("cell ({}, {mode}, {norm}, {ncr}, {repeat}) failed: {e}", dist.name());
                                (None, None, CellStatus::Error(e))
                            }
                        };
                        SweepCell {
                            dist,
                            mode,
                            norm,
                            ncr,
                            repeat,
                            seed,
                            accuracy,
                            train_loss,
                            status,
                            runtime_secs,
                        }
                    })
                    .collect()
            })
            .collect()
    });

    let mut cells: Vec<SweepCell> = per_coord.into_iter().flatten().collect();
    let rank = |c: &SweepCell| {
        (
            g.dists.iter().position(|d| *d == c.dist),
            modes.iter().position(|m| *m == c.mode),
        )
    };
    // Stable sort keeps the (norm, ncr, repeat) enumeration order within a pane.
    cells.sort_by_key(|c| rank(c));

    let mut files = Vec::new();
    let (path, mut w) = csv_out(cfg, "sweep.csv")?;
    w.write_record(["dist", "mode", "norm", "ncr", "repeat", "seed", "accuracy", "train_loss", "status", "message"])?;
    for c in &cells {
        let (status, message) = match &c.status {
            CellStatus::Ok => ("ok", String::new()),
            CellStatus::Error(m) => ("error", m.clone()),
        };
        w.write_record([
            c.dist.name().to_string(),
            c.mode.to_string(),
            c.norm.to_string(),
            c.ncr.to_string(),
            c.repeat.to_string(),
            c.seed.to_string(),
            fmt_opt(c.accuracy),
            fmt_opt(c.train_loss),
            status.to_string(),
            message,
        ])?;
    }
    w.flush()?;
    files.push(path);

    // Wall-clock times are not reproducible, so they stay out of the CSVs.
    let timing: Vec<_> = cells
        .iter()
        .map(|c| serde_json::json!({"dist": c.dist, "mode": c.mode, "norm": c.norm, "ncr": c.ncr, "repeat": c.repeat, "seconds": c.runtime_secs}))
        .collect();
    let tpath = cfg.output_dir.join("sweep_runtimes.json");
    std::fs::write(&tpath, serde_json::to_string_pretty(&timing)?)?;
    files.push(tpath);

    let result = SweepResult {
        norms,
        ncrs,
        cells,
        files: Vec::new(),
    };
    for &dist in &g.dists {
        for &mode in &modes {
            let name = format!("heatmap_{mode}_{}", dist.name());
            let pane = result.pane(dist, mode);
            let (path, mut w) = csv_out(cfg, &format!("{name}.csv"))?;
            w.write_record(["norm", "ncr", "accuracy"])?;
            let mut triples = Vec::new();
            for (i, &u) in result.norms.iter().enumerate() {
                for (j, &r) in result.ncrs.iter().enumerate() {
                    w.write_record([u.to_string(), r.to_string(), fmt_opt(pane[i][j])])?;
                    triples.push((u, r, pane[i][j]));
                }
            }
            w.flush()?;
            files.push(path);
            let grid = HeatmapGrid::from_triples(&format!("test accuracy ({mode}, {})", dist.name()), "‖u‖", "NCR", &triples)?;
            let svg = cfg.output_dir.join(format!("{name}.svg"));
            std::fs::write(&svg, grid.to_svg())?;
            files.push(svg);
        }
    }
    Ok(SweepResult { files, ..result })
}

// ----------------------------------------------------------- longtail

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LongtailRow {
    pub threshold: f64,
    /// `"explicit"` or `"fraction=<f>"`.
    pub source: String,
    pub selected: usize,
    pub fraction: f64,
    pub mode: Mode,
    pub full_error: f64,
    /// `None` when the partition is empty.
    pub longtail_error: Option<f64>,
}

impl LongtailRow {
    pub fn gap(&self) -> Option<f64> {
        self.longtail_error.map(|e| e - self.full_error)
    }
}

#[derive(Debug, Clone)]
pub struct LongtailOutput {
    pub rows: Vec<LongtailRow>,
    /// Long-tail scores of the test set under the clean model.
    pub scores: Vec<Option<f64>>,
    pub files: Vec<PathBuf>,
}

/// Clean reference and DP model on shared data; the test set is partitioned
/// with the clean weights for every `L` and both models are scored on it.
pub fn run_longtail_eval(cfg: &ExperimentConfig) -> Result<LongtailOutput> {
    cfg.validate()?;
    let pool = cfg.pool()?;
    let mut cfg_both = cfg.clone();
    cfg_both.optimizer.mode = super::ModeSelection::Both;
    let (setup, runs) = pool.install(|| -> Result<_> {
        let setup = base_setup(cfg)?;
        let runs = paired_train(&cfg_both, &setup.w0, &setup.train, setup.train_seed);
        Ok((setup, runs))
    })?;
    let mut models = Vec::new();
    for (mode, run) in runs {
        models.push((mode, run?.0));
    }
    let clean = &models.iter().find(|(m, _)| *m == Mode::Clean).expect("clean model trained").1;

    let (scores, rows, reports) = pool.install(|| -> Result<_> {
        let scores = longtail_scores(clean, &setup.test, &setup.noise)?;
        let mut thresholds: Vec<(f64, String)> = cfg.eval.l_values.iter().map(|&l| (l, "explicit".to_string())).collect();
        for &f in &cfg.eval.longtail_fractions {
            match threshold_for_fraction(&scores, f) {
                Some(l) => thresholds.push((l, format!("fraction={f}"))),
                None => warn!("no sample has a defined long-tail score; fraction {f} skipped"),
            }
        }
        let mut reports: Vec<(Mode, EvalReport)> = models
            .iter()
            .map(|(m, w)| Ok((*m, test_error(w, &setup.test)?)))
            .collect::<Result<_>>()?;
        let full: Vec<(Mode, f64)> = reports.iter().map(|(m, r)| (*m, r.overall_error)).collect();
        let mut rows = Vec::new();
        for (l, source) in thresholds {
            let subset = select_by_score(&scores, l);
            if subset.is_empty() {
                warn!("long-tail partition at L = {l} is empty");
            }
            for ((mode, w), &(_, full_error)) in models.iter().zip(&full) {
                let longtail_error = if subset.is_empty() {
                    None
                } else {
                    Some(longtail_error(w, &setup.test, &subset)?)
                };
                if let Some((_, report)) = reports.iter_mut().find(|(m, _)| m == mode) {
                    if report.threshold.is_none() && !subset.is_empty() {
                        report.threshold = Some(l);
                        report.longtail_error = longtail_error;
                        report.longtail_fraction = subset.len() as f64 / setup.test.len() as f64;
                    }
                }
                rows.push(LongtailRow {
                    threshold: l,
                    source: source.clone(),
                    selected: subset.len(),
                    fraction: subset.len() as f64 / setup.test.len() as f64,
                    mode: *mode,
                    full_error,
                    longtail_error,
                });
            }
        }
        Ok((scores, rows, reports))
    })?;
    let detail: Vec<_> = reports
        .iter()
        .map(|(m, r)| serde_json::json!({"mode": m, "report": r}))
        .collect();
    let json_path = cfg.output_dir.join("longtail_reports.json");

    let (path, mut w) = csv_out(cfg, "longtail.csv")?;
    w.write_record(["L", "source", "selected", "fraction", "mode", "full_error", "longtail_error", "gap"])?;
    for r in &rows {
        w.write_record([
            r.threshold.to_string(),
            r.source.clone(),
            r.selected.to_string(),
            r.fraction.to_string(),
            r.mode.to_string(),
            r.full_error.to_string(),
            fmt_opt(r.longtail_error),
            fmt_opt(r.gap()),
        ])?;
    }
    w.flush()?;
    std::fs::write(&json_path, serde_json::to_string_pretty(&detail)?)?;
    Ok(LongtailOutput {
        rows,
        scores,
        files: vec![path, json_path],
    })
}

// -------------------------------------------------------------- mnist

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MnistRow {
    pub x_percent: f64,
    pub mode: Mode,
    pub top_acc: f64,
    pub bottom_acc: f64,
    pub overall_acc: f64,
    pub n_top: usize,
    pub n_bottom: usize,
}

#[derive(Debug, Clone)]
pub struct MnistOutput {
    pub rows: Vec<MnistRow>,
    pub files: Vec<PathBuf>,
}

fn subset_accuracy(preds: &[usize], data: &Dataset, pos_of_id: &[usize], ids: &[usize]) -> f64 {
    let hits = ids
        .iter()
        .filter(|&&id| preds[pos_of_id[id]] == data.samples[pos_of_id[id]].label)
        .count();
    hits as f64 / ids.len().max(1) as f64
}

/// Influence-score quantiles of the MNIST test set against Clean and DP
/// models trained on a stratified training subsample.
pub fn run_mnist_influence(cfg: &ExperimentConfig) -> Result<MnistOutput> {
    let mut cfg = cfg.clone();
    cfg.experiment = super::Experiment::MnistInfluence;
    cfg.validate()?;
    let mb = &cfg.mnist;
    let train_raw = mnist_io::load_idx(&mb.resolve(&mb.train_images)?, &mb.resolve(&mb.train_labels)?)?;
    let test_raw = mnist_io::load_idx(&mb.resolve(&mb.test_images)?, &mb.resolve(&mb.test_labels)?)?;
    info!(
        "MNIST: {} train / {} test images of {}×{}",
        train_raw.len(),
        test_raw.len(),
        train_raw.rows,
        train_raw.cols
    );

    let pool = cfg.pool()?;
    let (rows, table) = pool.install(|| -> Result<_> {
        let train_set = mnist_io::to_dataset(&train_raw, mb.patches, mb.subsample_per_class, derive_seed(cfg.seed, &["mnist-train"]))?;
        let test_ids: Vec<usize> = (0..test_raw.len()).collect();
        let test_set = mnist_io::dataset_from_ids(&test_raw, mb.patches, &test_ids, 0)?;

        // Scores use the whole normalised image, independent of the patching.
        let vectors: Vec<Vec<f64>> = (0..test_raw.len())
            .map(|i| {
                let v: Vec<f64> = test_raw.image(i).iter().map(|&b| b as f64 / 255.0).collect();
                if mb.downsample {
                    mnist_io::downsample_2x(&v, test_raw.rows, test_raw.cols)
                } else {
                    v
                }
            })
            .collect();
        let labels: Vec<usize> = test_raw.labels.iter().map(|&l| l as usize).collect();
        let table = InfluenceTable::build(&vectors, &labels, &test_ids, NUM_DIGITS, cfg.eval.cov_norm)?;

        let sigma0 = mb.sigma0.unwrap_or(cfg.model.sigma0);
        let w0 = init_weights(NUM_DIGITS, mb.width, train_set.dim, sigma0, derive_seed(cfg.seed, &["mnist-init"]))?;
        let mut opt = cfg.optimizer.clone();
        opt.eta = mb.eta.unwrap_or(opt.eta);
        let train_seed = derive_seed(cfg.seed, &["mnist-optim"]);
        let runs: Vec<(Mode, Result<ModelWeights>)> = cfg
            .optimizer
            .mode
            .modes()
            .into_par_iter()
            .map(|mode| (mode, train(&w0, &train_set, &opt.dp_config(mode, train_seed)).map(|r| r.0)))
            .collect();

        let mut rows = Vec::new();
        for (mode, w) in runs {
            let w = w?;
            let preds = crate::evaluation::predictions(&w, &test_set)?;
            let overall = preds.iter().zip(&test_set.samples).filter(|(p, s)| **p == s.label).count() as f64
                / test_set.len() as f64;
            for &x in &cfg.eval.x_percent {
                let (top, bottom) = quantile_partition(&table, x)?;
                rows.push(MnistRow {
                    x_percent: x,
                    mode,
                    top_acc: subset_accuracy(&preds, &test_set, &test_ids, &top),
                    bottom_acc: subset_accuracy(&preds, &test_set, &test_ids, &bottom),
                    overall_acc: overall,
                    n_top: top.len(),
                    n_bottom: bottom.len(),
                });
            }
        }
        Ok((rows, table))
    })?;

    let mut body = Vec::new();
    table.write_csv(&mut body)?;
    let mut files = vec![write_with_provenance(&cfg, "influence_scores.csv", &body)?];
    for &x in &cfg.eval.x_percent {
        let (top, bottom) = quantile_partition(&table, x)?;
        for (side, ids) in [("top", top), ("bottom", bottom)] {
            let path = cfg.output_dir.join(format!("{side}_{x}.txt"));
            let text: String = ids.iter().map(|id| format!("{id}\n")).collect();
            std::fs::write(&path, text)?;
            files.push(path);
        }
    }
    let (path, mut w) = csv_out(&cfg, "mnist_influence.csv")?;
    w.write_record(["x_percent", "mode", "top_acc", "bottom_acc", "overall_acc", "n_top", "n_bottom"])?;
    for r in &rows {
        w.write_record([
            r.x_percent.to_string(),
            r.mode.to_string(),
            r.top_acc.to_string(),
            r.bottom_acc.to_string(),
            r.overall_acc.to_string(),
            r.n_top.to_string(),
            r.n_bottom.to_string(),
        ])?;
    }
    w.flush()?;
    files.insert(0, path);
    Ok(MnistOutput { rows, files })
}

// -------------------------------------------------------- diagnostics

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossFloorRow {
    pub sigma_n: f64,
    pub final_train_loss: f64,
    pub clean_final_train_loss: f64,
    /// Closed-form floor argument of class 0 at this noise level.
    pub floor_arg: f64,
}

#[derive(Debug, Clone)]
pub struct DiagnosticsOutput {
    pub loss_floor: Vec<LossFloorRow>,
    pub files: Vec<PathBuf>,
}

/// Condition report, closed-form bound arguments per mode and `L`, and, when
/// `optimizer.sigma_n_grid` is set, final DP training loss per noise level.
pub fn run_diagnostics(cfg: &ExperimentConfig) -> Result<DiagnosticsOutput> {
    cfg.validate()?;
    let pool = cfg.pool()?;
    let g = &cfg.datagen;
    let setup = pool.install(|| base_setup(cfg))?;
    let n = setup.train.len();
    let mut files = Vec::new();

    let dp_cfg = setup.dp_config(cfg, Mode::Dp);
    let hyper = ConditionHyper {
        width: cfg.model.width,
        eta: cfg.optimizer.eta,
        batch: cfg.optimizer.batch,
        sigma0: cfg.model.sigma0,
        delta: cfg.eval.delta,
        steps: dp_cfg.steps(n),
        clip_c: cfg.optimizer.clip_c,
        sigma_n: dp_cfg.resolved_sigma(n)?,
    };
    let report = check_condition(&setup.sig, &setup.noise, &g.train_counts, &hyper);
    let (path, mut w) = csv_out(cfg, "conditions.csv")?;
    w.write_record(["id", "description", "lhs", "relation", "rhs", "ratio", "satisfied", "nominal"])?;
    for e in &report.entries {
        w.write_record([
            e.id.clone(),
            e.description.clone(),
            e.lhs.to_string(),
            e.relation.clone(),
            e.rhs.to_string(),
            e.ratio.to_string(),
            e.satisfied.to_string(),
            e.nominal.to_string(),
        ])?;
    }
    w.flush()?;
    files.push(path);

    let (path, mut w) = csv_out(cfg, "bounds.csv")?;
    w.write_record([
        "mode",
        "L",
        "class",
        "sigma_n",
        "clipping_factor",
        "min_snr",
        "min_ncr",
        "stmt1_arg",
        "stmt2_arg",
        "floor_arg",
    ])?;
    let l_values = if cfg.eval.l_values.is_empty() { vec![1.0] } else { cfg.eval.l_values.clone() };
    for mode in cfg.optimizer.mode.modes() {
        for &l in &l_values {
            let b = diagnostics(
                &setup.sig,
                &setup.noise,
                &g.train_counts,
                &setup.dp_config(cfg, mode),
                cfg.model.width,
                l,
                cfg.eval.delta,
            )?;
            for k in 0..g.num_classes {
                let min_off = |m: &Vec<Vec<f64>>| {
                    m[k].iter()
                        .enumerate()
                        .filter(|(j, _)| *j != k)
                        .map(|(_, v)| *v)
                        .fold(f64::INFINITY, f64::min)
                };
                w.write_record([
                    mode.to_string(),
                    l.to_string(),
                    k.to_string(),
                    b.sigma_n.to_string(),
                    b.clipping_factor[k].to_string(),
                    min_off(&b.snr).to_string(),
                    min_off(&b.ncr).to_string(),
                    b.thm46_stmt1_exponent_arg[k].to_string(),
                    b.thm46_stmt2_exponent_arg[k].to_string(),
                    b.thm45_floor[k].to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    files.push(path);

    let mut loss_floor = Vec::new();
    if !cfg.optimizer.sigma_n_grid.is_empty() {
        let clean_cfg = setup.dp_config(cfg, Mode::Clean);
        let (clean, dp_runs) = pool.install(|| {
            rayon::join(
                || train(&setup.w0, &setup.train, &clean_cfg),
                || {
                    cfg.optimizer
                        .sigma_n_grid
                        .par_iter()
                        .map(|&s| {
                            let c = DPConfig {
                                sigma_n: Some(s),
                                ..setup.dp_config(cfg, Mode::Dp)
                            };
                            let (_, trace) = train(&setup.w0, &setup.train, &c)?;
                            let b = diagnostics(&setup.sig, &setup.noise, &g.train_counts, &c, cfg.model.width, 1.0, cfg.eval.delta)?;
                            Ok((s, trace.final_record().train_loss.unwrap_or(f64::NAN), b.thm45_floor[0]))
                        })
                        .collect::<Result<Vec<_>>>()
                },
            )
        });
        let clean_loss = clean?.1.final_record().train_loss.unwrap_or(f64::NAN);
        let (path, mut w) = csv_out(cfg, "loss_floor.csv")?;
        w.write_record(["sigma_n", "final_train_loss", "clean_final_train_loss", "floor_arg"])?;
        for (s, l, f) in dp_runs? {
            w.write_record([s.to_string(), l.to_string(), clean_loss.to_string(), f.to_string()])?;
            loss_floor.push(LossFloorRow {
                sigma_n: s,
                final_train_loss: l,
                clean_final_train_loss: clean_loss,
                floor_arg: f,
            });
        }
        w.flush()?;
        files.push(path);
    }
    Ok(DiagnosticsOutput { loss_floor, files })
}
