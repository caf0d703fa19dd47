use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use envelope_sae::esae::TrainConfig;
use envelope_sae::experiment::ExperimentConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two well separated Gaussian-ish blobs in 4 dimensions.
pub fn write_separable_csv(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text = String::from("f1,f2,f3,f4,label\n");
    for i in 0..n {
        let class = i % 2;
        let centre = if class == 0 { 0.2 } else { 0.8 };
        for j in 0..4 {
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            let v = 0.5 + sign * (centre - 0.5) + rng.random_range(-0.12..0.12);
            write!(text, "{v:.5},").unwrap();
        }
        writeln!(text, "{}", if class == 0 { "neg" } else { "pos" }).unwrap();
    }
    let path = dir.join("separable.csv");
    std::fs::write(&path, text).unwrap();
    path
}

/// Short training schedule for tests that only check structure.
#[allow(dead_code)]
pub fn quick_config(data: PathBuf) -> ExperimentConfig {
    ExperimentConfig {
        data,
        repeats: 2,
        seed: 3,
        esae: TrainConfig {
            pretrain_epochs: 30,
            finetune_epochs: 60,
            ..TrainConfig::default()
        },
        ..ExperimentConfig::default()
    }
}
