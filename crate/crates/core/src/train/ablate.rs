use std::fmt;

use serde::Serialize;

use super::{train, Metrics, PreparedSet, RunConfig};
use crate::data::{split_by_breast, Sample, SplitSpec};
use crate::error::{Error, Result};
use crate::model::{build_model, Preset};

/// Published test metrics per preset: accuracy, AUC, F1, sensitivity,
/// specificity. Shown for context only.
pub const PUBLISHED_RESULTS: [(Preset, [f64; 5]); 4] = [
    (Preset::A, [0.8322, 0.8791, 0.8092, 0.8983, 0.7889]),
    (Preset::B, [0.8054, 0.8740, 0.7642, 0.7966, 0.8111]),
    (Preset::C, [0.8244, 0.8631, 0.8296, 0.8750, 0.7761]),
    (Preset::D, [0.8792, 0.9249, 0.8525, 0.8814, 0.8778]),
];

pub const COLUMNS: [&str; 5] = ["Accuracy", "AUC", "F1", "Sensitivity", "Specificity"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Some(Self { mean, std })
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub preset: Preset,
    pub seeds: Vec<u64>,
    pub runs: Vec<Metrics>,
    /// Columns in [`COLUMNS`] order. AUC is `None` if no run had both classes.
    pub columns: [Option<MeanStd>; 5],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, preset: Preset) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.preset == preset)
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<34}", "configuration")?;
        for c in COLUMNS {
            write!(f, " {c:>17}")?;
        }
        writeln!(f)?;
        for row in &self.rows {
            write!(f, "{:<34}", format!("({}) {} runs", row.preset, row.runs.len()))?;
            for c in &row.columns {
                match c {
                    Some(c) => write!(f, " {:>17}", c.to_string())?,
                    None => write!(f, " {:>17}", "n/a")?,
                }
            }
            writeln!(f)?;
            if let Some((_, published)) = PUBLISHED_RESULTS.iter().find(|(p, _)| *p == row.preset) {
                write!(f, "{:<34}", format!("({}) published, not reproduced", row.preset))?;
                for v in published {
                    write!(f, " {:>17}", format!("{v:.4}"))?;
                }
                writeln!(f)?;
            }
        }
        Ok(())
    }
}

/// Trains every preset once per seed on one fixed breast-level split and
/// summarizes final test metrics. Seeds are `cfg.train.seed + k` for
/// `k < n_seeds`; only the seed varies between runs.
pub fn ablate(presets: &[Preset], samples: &[Sample], cfg: &RunConfig, n_seeds: usize) -> Result<AblationTable> {
    if presets.len() < 2 {
        return Err(Error::Config(format!("ablation needs at least two presets, got {}", presets.len())));
    }
    if n_seeds == 0 {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let (train_idx, test_idx) = split_by_breast(
        samples,
        SplitSpec {
            train_fraction: cfg.train_fraction,
            seed: cfg.split_seed,
        },
    )?;
    if test_idx.is_empty() {
        return Err(Error::Config("ablation needs a non-empty test split".into()));
    }
    let train_set = PreparedSet::new(train_idx.iter().map(|&i| &samples[i]));
    let test_set = PreparedSet::new(test_idx.iter().map(|&i| &samples[i]));

    let mut rows = Vec::with_capacity(presets.len());
    for &preset in presets {
        let seeds: Vec<u64> = (0..n_seeds as u64).map(|k| cfg.train.seed + k).collect();
        let mut runs = Vec::with_capacity(n_seeds);
        for &seed in &seeds {
            let mut train_cfg = cfg.train.clone();
            train_cfg.seed = seed;
            let (model, mut store) = build_model::<f32>(&cfg.model(preset), seed)?;
            let out = train(&model, &mut store, &train_set, &test_set, &train_cfg, None)?;
            let m = out.metrics.expect("test split is non-empty");
            log::info!("preset {preset} seed {seed}: accuracy {:.4} auc {:?}", m.accuracy, m.auc);
            runs.push(m);
        }
        let col = |f: fn(&Metrics) -> Option<f64>| MeanStd::of(&runs.iter().filter_map(f).collect::<Vec<_>>());
        let columns = [
            col(|m| Some(m.accuracy)),
            col(|m| m.auc),
            col(|m| Some(m.f1)),
            col(|m| Some(m.sensitivity)),
            col(|m| Some(m.specificity)),
        ];
        rows.push(AblationRow {
            preset,
            seeds,
            runs,
            columns,
        });
    }
    Ok(AblationTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_dataset;
    use crate::train::TrainConfig;

    #[test]
    fn mean_and_sample_std() {
        let m = MeanStd::of(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((m.mean, m.std), (2.0, 1.0));
        assert_eq!(MeanStd::of(&[0.7]).unwrap().std, 0.0);
        assert!(MeanStd::of(&[]).is_none());
        assert_eq!(m.to_string(), "2.0000 ± 1.0000");
    }

    fn tiny() -> RunConfig {
        RunConfig {
            train: TrainConfig {
                epochs: 1,
                batch_size: 4,
                ..Default::default()
            },
            d_pe: 8,
            d_ie: 8,
            d_hs: 4,
            n_heads: 2,
            stem_channels: 4,
            image_size: 32,
            train_fraction: 0.5,
            ..Default::default()
        }
    }

    #[test]
    fn table_shape_reference_rows_and_determinism() {
        let samples = generate_dataset(8, 32, 5, 0.0).unwrap();
        let cfg = tiny();
        let a = ablate(&[Preset::D, Preset::A], &samples, &cfg, 2).unwrap();
        assert_eq!(a.rows.len(), 2);
        assert!(a.rows.iter().all(|r| r.runs.len() == 2 && r.columns.len() == 5));
        let text = a.to_string();
        assert!(text.contains("(d) published, not reproduced"), "{text}");
        assert!(text.contains("0.8792") && text.contains("0.9249"));
        let b = ablate(&[Preset::D, Preset::A], &samples, &cfg, 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn needs_two_presets() {
        let samples = generate_dataset(4, 32, 5, 0.0).unwrap();
        assert!(ablate(&[Preset::D], &samples, &tiny(), 1).is_err());
    }
}
