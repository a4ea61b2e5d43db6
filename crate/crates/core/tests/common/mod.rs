//! Small configurations and fixtures shared by the integration targets.
#![allow(dead_code)]

use std::path::Path;

use dptail_core::harness::{Experiment, ExperimentConfig};
use dptail_core::mnist_io::{encode_idx_images, encode_idx_labels};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A synthetic setup that trains in milliseconds.
pub fn tiny_config(experiment: Experiment, out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        experiment,
        output_dir: out.to_path_buf(),
        ..ExperimentConfig::default()
    };
    let g = &mut cfg.datagen;
    g.num_classes = 3;
    g.dim = 24;
    g.norm = 1.0;
    g.norm_grid = vec![0.0, 2.0];
    g.ncr = 20.0;
    g.ncr_grid = vec![1.0, 20.0];
    g.train_counts = vec![12; 3];
    g.test_counts = vec![10; 3];
    cfg.model.width = 6;
    cfg.model.sigma0 = 0.01;
    cfg.optimizer.batch = 8;
    cfg.optimizer.epochs = 3;
    cfg.optimizer.eta = 0.05;
    cfg.eval.x_percent = vec![10.0, 50.0];
    cfg
}

/// Writes a four-file IDX set of `rows×cols` images, `per_digit` per digit in
/// both splits. Each digit lights a different band so the task is learnable.
pub fn write_fake_mnist(dir: &Path, rows: usize, cols: usize, per_digit: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (images, labels, n) in [
        ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", per_digit),
        ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", per_digit),
    ] {
        let mut pixels = Vec::with_capacity(10 * n * rows * cols);
        let mut lab = Vec::with_capacity(10 * n);
        for i in 0..10 * n {
            let digit = (i % 10) as u8;
            lab.push(digit);
            for r in 0..rows {
                for c in 0..cols {
                    let band = (r * 10 / rows) as u8 == digit;
                    let base: u8 = if band { 180 } else { 10 };
                    pixels.push(base.saturating_add(rng.random_range(0..60)) ^ u8::from(c % 7 == 0 && band));
                }
            }
        }
        std::fs::write(dir.join(images), encode_idx_images(rows, cols, &pixels)).unwrap();
        std::fs::write(dir.join(labels), encode_idx_labels(&lab)).unwrap();
    }
}

pub fn mnist_config(dir: &Path, out: &Path) -> ExperimentConfig {
    let mut cfg = tiny_config(Experiment::MnistInfluence, out);
    cfg.mnist.dir = Some(dir.to_path_buf());
    cfg.mnist.subsample_per_class = Some(6);
    cfg.mnist.width = 4;
    cfg.optimizer.batch = 16;
    cfg.optimizer.epochs = 2;
    cfg
}
