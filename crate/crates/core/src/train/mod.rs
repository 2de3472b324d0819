//! Training, evaluation, the preset ablation and the scaling benchmark.

mod ablate;
mod bench;
mod config;
mod metrics;
mod optim;

pub use ablate::{ablate, AblationRow, AblationTable, MeanStd, PUBLISHED_RESULTS};
pub use bench::{bench_complexity, log_log_slope, BenchReport, BenchRow};
pub use config::{Recipe, RunConfig, TrainConfig, PUBLISHED_LR, PUBLISHED_WEIGHT_DECAY};
pub use metrics::{auc, compute_metrics, Metrics, THRESHOLD};
pub use optim::{clip_grad_norm, cosine_lr, grad_norm, label_smoothed_ce, AdamW};

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::checkpoint;
use crate::data::{split_by_breast, Label, Sample, SplitSpec};
use crate::error::{Error, Result};
use crate::model::{build_model, ForwardOptions, Model, ModelConfig, Preset};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

/// Samples converted once to model inputs.
#[derive(Clone)]
pub struct PreparedSet {
    pub views: Vec<Vec<Tensor<f32>>>,
    pub labels: Vec<Label>,
}

impl PreparedSet {
    pub fn new<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Self {
        let (views, labels) = samples.into_iter().map(|s| (s.tensors(), s.label)).unzip();
        Self { views, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// One line of the run log. Epoch 0 evaluates the initialized model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: Option<f64>,
    pub accuracy: Option<f64>,
    pub auc: Option<f64>,
    pub f1: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

impl EpochRecord {
    fn new(epoch: usize, lr: f64, train_loss: Option<f64>, m: Option<&Metrics>) -> Self {
        Self {
            epoch,
            lr,
            train_loss,
            accuracy: m.map(|m| m.accuracy),
            auc: m.and_then(|m| m.auc),
            f1: m.map(|m| m.f1),
            sensitivity: m.map(|m| m.sensitivity),
            specificity: m.map(|m| m.specificity),
        }
    }
}

pub struct TrainOutput {
    pub records: Vec<EpochRecord>,
    /// Test metrics after the last epoch, if there is a test set.
    pub metrics: Option<Metrics>,
    pub steps: u64,
}

/// Positive-class probability for each sample.
pub fn predict(model: &Model, store: &ParamStore<f32>, set: &PreparedSet, opts: &ForwardOptions) -> Result<Vec<f64>> {
    set.views
        .iter()
        .map(|views| {
            let tape = Tape::inference();
            let p = Bound::new(&tape, store);
            let probs = model.forward(&p, views, opts)?.softmax()?.value();
            Ok((probs.data()[1] as f64).clamp(0.0, 1.0))
        })
        .collect()
}

pub fn evaluate(model: &Model, store: &ParamStore<f32>, set: &PreparedSet) -> Result<Option<Metrics>> {
    if set.is_empty() {
        return Ok(None);
    }
    let scores = predict(model, store, set, &ForwardOptions::default())?;
    compute_metrics(&scores, &set.labels).map(Some)
}

/// Mean loss of one batch, recorded on `tape`.
pub fn batch_loss<'t>(
    model: &Model,
    p: &Bound<'t, f32>,
    set: &PreparedSet,
    batch: &[usize],
    label_smoothing: f64,
) -> Result<Var<'t, f32>> {
    let logits = batch
        .iter()
        .map(|&i| model.forward(p, &set.views[i], &ForwardOptions::default()))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = batch.iter().map(|&i| set.labels[i].index()).collect();
    label_smoothed_ce(Var::stack(&logits)?, &labels, label_smoothing)
}

/// Trains `store` in place. Each epoch shuffles the training set under the
/// seed, takes one clipped AdamW step per batch at the epoch's cosine
/// learning rate, then evaluates on `test`. Records are also written to
/// `log` as JSON lines.
pub fn train(
    model: &Model,
    store: &mut ParamStore<f32>,
    train_set: &PreparedSet,
    test_set: &PreparedSet,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if train_set.is_empty() && cfg.epochs > 0 {
        return Err(Error::EmptyInput { op: "train" });
    }
    let emit = |r: &EpochRecord, log: &mut Option<&mut dyn Write>| -> Result<()> {
        if let Some(w) = log.as_mut() {
            serde_json::to_writer(&mut **w, r)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        Ok(())
    };

    let mut metrics = evaluate(model, store, test_set)?;
    let first = EpochRecord::new(0, cosine_lr(0, cfg.epochs, cfg.lr_max, cfg.lr_min)?, None, metrics.as_ref());
    emit(&first, &mut log)?;
    let mut records = vec![first];
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.epochs {
        let lr = cosine_lr(epoch - 1, cfg.epochs, cfg.lr_max, cfg.lr_min)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let batches = order.chunks(cfg.batch_size).count();
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let tape = Tape::new();
            let p = Bound::new(&tape, store);
            let loss = batch_loss(model, &p, train_set, batch, cfg.label_smoothing)?;
            let loss_value = loss.value().item() as f64;
            let diverged = |grad_norm| Error::Diverged {
                epoch,
                batch: b,
                loss: loss_value,
                lr,
                grad_norm,
            };
            if !loss_value.is_finite() {
                return Err(diverged(f64::NAN));
            }
            let mut grads = tape.backward(loss)?;
            let mut grads = p.gradients(&mut grads);
            match clip_grad_norm(&mut grads, cfg.clip_max_norm) {
                Ok(_) => {}
                Err(Error::NonFiniteGradient(n)) => return Err(diverged(n)),
                Err(e) => return Err(e),
            }
            opt.step(store, &grads, lr)?;
            loss_sum += loss_value;
        }
        metrics = evaluate(model, store, test_set)?;
        let record = EpochRecord::new(epoch, lr, Some(loss_sum / batches as f64), metrics.as_ref());
        log::info!(
            "epoch {epoch}/{}: lr {lr:.3e} loss {:.4} acc {:?} auc {:?}",
            cfg.epochs,
            record.train_loss.unwrap_or(f64::NAN),
            record.accuracy,
            record.auc
        );
        emit(&record, &mut log)?;
        records.push(record);
    }
    Ok(TrainOutput {
        records,
        metrics,
        steps: opt.steps(),
    })
}

/// Files written by [`run`].
pub struct RunArtifact {
    pub dir: PathBuf,
    pub log: PathBuf,
    pub checkpoint: PathBuf,
    pub output: TrainOutput,
}

pub const LOG_FILE: &str = "log.jsonl";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const CONFIG_FILE: &str = "run.conf";
pub const SPLIT_FILE: &str = "split.json";

#[derive(Debug, Serialize, Deserialize)]
struct SplitRecord {
    preset: Preset,
    train: Vec<String>,
    test: Vec<String>,
}

/// Splits `samples` by breast, builds the preset, trains, and writes the
/// run log, the configuration echo, the split and the final checkpoint to
/// `out`.
pub fn run(preset: Preset, cfg: &RunConfig, samples: &[Sample], out: &Path) -> Result<RunArtifact> {
    fs::create_dir_all(out)?;
    let (train_idx, test_idx) = split_by_breast(
        samples,
        SplitSpec {
            train_fraction: cfg.train_fraction,
            seed: cfg.split_seed,
        },
    )?;
    let model_cfg: ModelConfig = cfg.model(preset);
    let (model, mut store) = build_model::<f32>(&model_cfg, cfg.train.seed)?;

    fs::write(out.join(CONFIG_FILE), format!("# preset = {preset}\n{}", cfg.to_text()))?;
    let ids = |idx: &[usize]| idx.iter().map(|&i| samples[i].breast_id.clone()).collect();
    fs::write(
        out.join(SPLIT_FILE),
        serde_json::to_vec_pretty(&SplitRecord {
            preset,
            train: ids(&train_idx),
            test: ids(&test_idx),
        })?,
    )?;

    let train_set = PreparedSet::new(train_idx.iter().map(|&i| &samples[i]));
    let test_set = PreparedSet::new(test_idx.iter().map(|&i| &samples[i]));
    let log_path = out.join(LOG_FILE);
    let mut file = std::io::BufWriter::new(fs::File::create(&log_path)?);
    let output = train(&model, &mut store, &train_set, &test_set, &cfg.train, Some(&mut file))?;
    file.flush()?;

    let ckpt = out.join(CHECKPOINT_FILE);
    checkpoint::save(&ckpt, &model_cfg, cfg.train.seed, &store)?;
    Ok(RunArtifact {
        dir: out.to_path_buf(),
        log: log_path,
        checkpoint: ckpt,
        output,
    })
}

/// Re-runs the training recorded in `run_dir` (its config, preset and seed)
/// on `samples`, writing fresh artifacts to `out`. Returns the recorded and
/// the replayed epoch records.
pub fn replay(run_dir: &Path, samples: &[Sample], out: &Path) -> Result<(Vec<EpochRecord>, Vec<EpochRecord>)> {
    let cfg = RunConfig::load(&run_dir.join(CONFIG_FILE))?;
    let split_path = run_dir.join(SPLIT_FILE);
    let split: SplitRecord = serde_json::from_slice(&fs::read(&split_path).map_err(|e| Error::Load {
        path: split_path.clone(),
        reason: e.to_string(),
    })?)?;
    let recorded = read_log(&run_dir.join(LOG_FILE))?;
    let art = run(split.preset, &cfg, samples, out)?;
    Ok((recorded, art.output.records))
}

pub fn read_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
