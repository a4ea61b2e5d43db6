//! Reproducible experiment runners.
//!
//! Every runner takes an [`ExperimentConfig`], derives all randomness from
//! `cfg.seed` through named streams, runs inside a worker pool of
//! `cfg.workers` threads and writes its CSVs under `cfg.output_dir`. CSVs open
//! with a `#` provenance line (tool version, config hash, root seed); results
//! are identical for any worker count.

pub mod config;
mod experiments;
pub mod svg;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

pub use config::{
    DatagenBlock, EvalBlock, Experiment, ExperimentConfig, MnistBlock, ModelBlock, ModeSelection, OptimizerBlock,
};
pub use experiments::{
    run_diagnostics, run_dynamics, run_gen, run_heatmap_sweep, run_longtail_eval, run_mnist_influence, synthetic_setup,
    CellStatus, DiagnosticsOutput, DynamicsOutput, GenOutput, LongtailOutput, LongtailRow, LossFloorRow, MnistOutput,
    MnistRow, SweepCell, SweepResult, SyntheticSetup,
};
pub use svg::{render_heatmap, HeatmapGrid};

use crate::error::Result;

/// Runs whichever experiment the config names; returns the files written.
pub fn run(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    Ok(match cfg.experiment {
        Experiment::Dynamics => run_dynamics(cfg)?.files,
        Experiment::HeatmapSweep => run_heatmap_sweep(cfg)?.files,
        Experiment::LongtailEval => run_longtail_eval(cfg)?.files,
        Experiment::MnistInfluence => run_mnist_influence(cfg)?.files,
        Experiment::Diagnostics => run_diagnostics(cfg)?.files,
    })
}

pub fn provenance_line(cfg: &ExperimentConfig) -> String {
    format!(
        "# dptail {} config_sha256={} seed={}",
        crate::ARTIFACT_VERSION,
        cfg.hash(),
        cfg.seed
    )
}

/// CSV file with the provenance comment already written.
pub(crate) fn csv_out(cfg: &ExperimentConfig, name: &str) -> Result<(PathBuf, csv::Writer<BufWriter<File>>)> {
    fs::create_dir_all(&cfg.output_dir)?;
    let path = cfg.output_dir.join(name);
    let mut file = BufWriter::new(File::create(&path)?);
    writeln!(file, "{}", provenance_line(cfg))?;
    Ok((path, csv::Writer::from_writer(file)))
}

pub(crate) fn write_with_provenance(cfg: &ExperimentConfig, name: &str, body: &[u8]) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.output_dir)?;
    let path = cfg.output_dir.join(name);
    let mut file = BufWriter::new(File::create(&path)?);
    writeln!(file, "{}", provenance_line(cfg))?;
    file.write_all(body)?;
    file.flush()?;
    Ok(path)
}

/// Reads a CSV written by a runner, skipping the provenance line.
pub fn read_csv_records(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    let headers = rdr.headers()?.iter().map(String::from).collect();
    let rows = rdr
        .records()
        .map(|r| r.map(|r| r.iter().map(String::from).collect()))
        .collect::<std::result::Result<_, _>>()?;
    Ok((headers, rows))
}

pub(crate) fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}
