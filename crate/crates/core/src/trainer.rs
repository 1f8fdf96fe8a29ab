//! Joint optimization: QA batches carry the auxiliary instances of their own
//! source examples, and one Adam step is taken per batch on the weighted sum.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use ndarray::Zip;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::corpus::{QaExample, Vocabulary};
use crate::encoder::{EncoderConfig, Mode};
use crate::error::{Error, Result};
use crate::eval::{dataset_fingerprint, evaluate};
use crate::model::{load_checkpoint, save_checkpoint, Model, MomentState};
use crate::objectives::{encode_qa, joint_loss, Batch, EncodedQa, LossReport, LossWeights};
use crate::rng::SeedPath;
use crate::taskgen::{format_task_set, AntonymLexicon, GenConfig, Task, TaskContext, TaskStreams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// QA examples per step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub weights: LossWeights,
    #[serde(with = "task_set")]
    pub enabled_tasks: BTreeSet<Task>,
    pub seed: u64,
    pub regenerate_ssl_each_epoch: bool,
    /// Jigsaw segments, jigsaw candidates and CRL flips per instance.
    pub k: usize,
    pub p: usize,
    pub n_flips: usize,
    /// Evaluate training accuracy at the end of every epoch.
    pub eval_train: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 4,
            learning_rate: 1e-3,
            warmup_fraction: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: Some(1.0),
            weights: LossWeights::default(),
            enabled_tasks: Task::ALL.into_iter().collect(),
            seed: 0,
            regenerate_ssl_each_epoch: true,
            k: 5,
            p: 5,
            n_flips: 1,
            eval_train: true,
        }
    }
}

mod task_set {
    use std::collections::BTreeSet;

    use serde::{Deserialize, Deserializer, Serializer};

    use crate::taskgen::{format_task_set, parse_task_set, Task};

    pub fn serialize<S: Serializer>(tasks: &BTreeSet<Task>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format_task_set(tasks))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeSet<Task>, D::Error> {
        parse_task_set(&String::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup_fraction must be in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return Err(Error::Config("adam betas must be in [0, 1) and epsilon > 0".into()));
        }
        if let Some(c) = self.clip_norm {
            if c <= 0.0 {
                return Err(Error::Config("clip_norm must be > 0".into()));
            }
        }
        self.weights.validate()
    }

    pub fn gen_config(&self, max_len: usize) -> GenConfig {
        GenConfig {
            tasks: self.enabled_tasks.clone(),
            k: self.k,
            p: self.p,
            n_flips: self.n_flips,
            max_len,
        }
    }

    pub fn steps_per_epoch(&self, examples: usize) -> usize {
        examples.div_ceil(self.batch_size)
    }
}

/// Learning rate at update `step` of `total`: linear ramp from 0 over the
/// first `ceil(warmup_fraction * total)` steps, then linear decay to 0.
pub fn lr_at(step: usize, total: usize, config: &TrainConfig) -> f64 {
    let lr = config.learning_rate;
    let total = total.max(1);
    let step = step.min(total);
    let warmup = (config.warmup_fraction * total as f64).ceil() as usize;
    if step < warmup {
        lr * step as f64 / warmup as f64
    } else if warmup == total {
        lr
    } else {
        lr * (total - step) as f64 / (total - warmup) as f64
    }
}

/// Adam moments shaped like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Model,
    pub v: Model,
}

impl OptimizerState {
    pub fn new(config: &EncoderConfig) -> Self {
        OptimizerState {
            step: 0,
            m: Model::zeros(config),
            v: Model::zeros(config),
        }
    }

    /// One bias-corrected Adam update of `params` with gradient `grads`.
    pub fn update(&mut self, params: &mut Model, grads: &Model, lr: f64, config: &TrainConfig) {
        self.step += 1;
        let (b1, b2, eps) = (config.beta1, config.beta2, config.epsilon);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let tensors = params
            .named_mut()
            .into_iter()
            .zip(grads.named())
            .zip(self.m.named_mut())
            .zip(self.v.named_mut());
        for ((((_, p), (_, g)), (_, m)), (_, v)) in tensors {
            Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            });
        }
    }

    pub fn to_moments(&self) -> MomentState {
        MomentState {
            step: self.step,
            m: self.m.clone(),
            v: self.v.clone(),
        }
    }

    pub fn from_moments(m: MomentState) -> Self {
        OptimizerState {
            step: m.step,
            m: m.m,
            v: m.v,
        }
    }
}

/// Shuffles the QA examples for `epoch` and groups them with the auxiliary
/// instances built from the same examples. Disabled tasks are dropped.
pub fn make_batches(
    examples: &[EncodedQa],
    streams: &TaskStreams,
    config: &TrainConfig,
    epoch: usize,
) -> Result<Vec<Batch>> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(
        &mut SeedPath::new(config.seed)
            .with_str("shuffle")
            .with_u64(epoch as u64)
            .rng(),
    );
    Ok(order
        .chunks(config.batch_size)
        .map(|chunk| {
            let mut batch = Batch::default();
            for &i in chunk {
                let ex = &examples[i];
                if let Some(tasks) = streams.get(&ex.id) {
                    let mut tasks = tasks.clone();
                    tasks.retain_tasks(&config.enabled_tasks);
                    batch.push_tasks(&tasks);
                }
                batch.qa.push(ex.clone());
            }
            batch
        })
        .collect())
}

/// Ids in a batch, for comparing batch composition across runs.
pub fn batch_manifest(batch: &Batch) -> Value {
    let ids = |v: Vec<&str>| Value::from(v);
    json!({
        "qa": ids(batch.qa.iter().map(|e| e.id.as_str()).collect()),
        "crl": ids(batch.crl.iter().map(|e| e.source_id.as_str()).collect()),
        "jp": ids(batch.jp.iter().map(|e| e.source_id.as_str()).collect()),
        "bsop": ids(batch.bsop.iter().map(|e| e.source_id.as_str()).collect()),
        "mem": ids(batch.mem.iter().map(|e| e.source_id.as_str()).collect()),
        "mlm": ids(batch.mlm.iter().map(|e| e.source_id.as_str()).collect()),
    })
}

/// Deterministic holdout: examples are ordered by a seeded hash of their id
/// and the first `round(fraction * n)` become the validation split.
pub fn split_holdout(examples: &[QaExample], fraction: f64, seed: u64) -> (Vec<QaExample>, Vec<QaExample>) {
    let mut keyed: Vec<(u64, &QaExample)> = examples
        .iter()
        .map(|e| (SeedPath::new(seed).with_str("holdout").with_str(&e.id).seed(), e))
        .collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.id.cmp(&b.1.id)));
    let n_val = (fraction * examples.len() as f64).round() as usize;
    let val: BTreeSet<&str> = keyed[..n_val].iter().map(|(_, e)| e.id.as_str()).collect();
    let (v, t): (Vec<QaExample>, Vec<QaExample>) = examples.iter().cloned().partition(|e| val.contains(e.id.as_str()));
    (t, v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub grad_norm: f64,
    pub report: LossReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub mean_loss: f64,
    pub train_accuracy: Option<f64>,
    pub val_accuracy: Option<f64>,
}

/// Everything a training run reads.
pub struct TrainData<'a> {
    pub train: &'a [QaExample],
    pub val: Option<&'a [QaExample]>,
    pub vocab: &'a Vocabulary,
    pub lexicon: &'a AntonymLexicon,
    /// Pre-generated instances used for every epoch instead of regenerating.
    pub fixed_streams: Option<&'a TaskStreams>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Receives `train_log.jsonl` and `checkpoints/epoch-N/`.
    pub out_dir: Option<PathBuf>,
    /// Checkpoint directory to continue from.
    pub resume: Option<PathBuf>,
    /// Print a line per epoch to stderr.
    pub verbose: bool,
}

pub struct TrainOutcome {
    pub model: Model,
    pub optimizer: OptimizerState,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn final_val_accuracy(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.val_accuracy)
    }

    pub fn final_train_accuracy(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.train_accuracy)
    }
}

pub const LOG_FILE: &str = "train_log.jsonl";

pub fn checkpoint_dir(out: &Path, epoch: usize) -> PathBuf {
    out.join("checkpoints").join(format!("epoch-{epoch}"))
}

pub fn train(
    data: &TrainData<'_>,
    config: &TrainConfig,
    model_config: &EncoderConfig,
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    model_config.validate()?;
    if model_config.vocab_size != data.vocab.len() {
        return Err(Error::Config(format!(
            "model vocab_size {} does not match vocabulary of {}",
            model_config.vocab_size,
            data.vocab.len()
        )));
    }
    if data.train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let encoded: Vec<EncodedQa> = data
        .train
        .iter()
        .map(|ex| encode_qa(ex, data.vocab, model_config.max_len))
        .collect::<Result<_>>()?;
    let corpus_fp = dataset_fingerprint(data.train);
    let ctx = TaskContext::new(data.vocab, data.lexicon, config.gen_config(model_config.max_len));
    let steps_per_epoch = config.steps_per_epoch(encoded.len());
    let total_steps = steps_per_epoch * config.epochs;

    let (mut model, mut opt, start_epoch) = match &options.resume {
        Some(dir) => resume_state(dir, model_config)?,
        None => {
            let model = Model::init(model_config, &mut SeedPath::new(config.seed).with_str("init").rng())?;
            (model, OptimizerState::new(model_config), 0)
        }
    };
    let mut step = start_epoch * steps_per_epoch;

    let mut log = match &options.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOG_FILE);
            let file = if options.resume.is_some() {
                OpenOptions::new().create(true).append(true).open(&path)
            } else {
                File::create(&path)
            }
            .map_err(|e| Error::io(&path, e))?;
            Some((path, BufWriter::new(file)))
        }
        None => None,
    };
    let mut write_log = |value: Value| -> Result<()> {
        if let Some((path, w)) = log.as_mut() {
            writeln!(w, "{value}").map_err(|e| Error::io(&*path, e))?;
        }
        Ok(())
    };

    let mut grads = Model::zeros(model_config);
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    for epoch in start_epoch..config.epochs {
        let generated;
        let streams = match data.fixed_streams {
            Some(s) => s,
            None => {
                let ssl_seed = if config.regenerate_ssl_each_epoch {
                    SeedPath::new(config.seed).with_str("ssl").with_u64(epoch as u64).seed()
                } else {
                    SeedPath::new(config.seed).with_str("ssl").with_u64(0).seed()
                };
                generated = ctx.generate(data.train, ssl_seed)?.0;
                &generated
            }
        };
        let mut loss_sum = 0.0;
        let batches = make_batches(&encoded, streams, config, epoch)?;
        let n_batches = batches.len();
        for batch in batches {
            step += 1;
            grads.fill_zero();
            let dropout_seed = SeedPath::new(config.seed)
                .with_str("dropout")
                .with_u64(step as u64)
                .seed();
            let report = joint_loss(
                &model,
                &batch,
                &config.weights,
                Mode::Train,
                dropout_seed,
                Some(&mut grads),
            )
            .map_err(|e| Error::NonFinite(format!("step {step} (epoch {epoch}): {e}")))?;
            let grad_norm = grads.global_norm();
            if !grad_norm.is_finite() || !report.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "step {step}: {}",
                    serde_json::to_string(&report).unwrap_or_default()
                )));
            }
            if let Some(c) = config.clip_norm {
                if grad_norm > c {
                    grads.scale(c / grad_norm);
                }
            }
            let lr = lr_at(step, total_steps, config);
            opt.update(&mut model, &grads, lr, config);
            loss_sum += report.total;
            let rec = StepRecord {
                step,
                epoch,
                lr,
                grad_norm,
                report,
            };
            let mut value = serde_json::to_value(&rec)?;
            value["type"] = "step".into();
            write_log(value)?;
            steps.push(rec);
        }

        let train_accuracy = if config.eval_train {
            Some(evaluate(&model, data.vocab, data.train)?.accuracy)
        } else {
            None
        };
        let val_accuracy = match data.val {
            Some(v) if !v.is_empty() => Some(evaluate(&model, data.vocab, v)?.accuracy),
            _ => None,
        };
        let rec = EpochRecord {
            epoch,
            step,
            mean_loss: loss_sum / n_batches as f64,
            train_accuracy,
            val_accuracy,
        };
        if options.verbose {
            eprintln!(
                "epoch {epoch} step {step} loss {:.4} train {} val {}",
                rec.mean_loss,
                fmt_acc(train_accuracy),
                fmt_acc(val_accuracy)
            );
        }
        let mut value = serde_json::to_value(&rec)?;
        value["type"] = "epoch".into();
        write_log(value)?;
        epochs.push(rec);

        if let Some(dir) = &options.out_dir {
            let mut meta = serde_json::Map::new();
            meta.insert("epochs_completed".into(), (epoch + 1).into());
            meta.insert("step".into(), step.into());
            meta.insert("corpus_fingerprint".into(), corpus_fp.clone().into());
            meta.insert("train_config".into(), serde_json::to_value(config)?);
            let ck = checkpoint_dir(dir, epoch + 1);
            save_checkpoint(&ck, &model, Some(&opt.to_moments()), meta)?;
            data.vocab.save(ck.join("vocab.txt"))?;
        }
    }
    if let Some((path, mut w)) = log {
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    if let Some(dir) = &options.out_dir {
        if let Some(last) = epochs.last() {
            let src = checkpoint_dir(dir, last.epoch + 1);
            let dst = dir.join("final");
            fs::create_dir_all(&dst).map_err(|e| Error::io(&dst, e))?;
            for name in [crate::model::MANIFEST_FILE, crate::model::TENSORS_FILE, "vocab.txt"] {
                fs::copy(src.join(name), dst.join(name)).map_err(|e| Error::io(dst.join(name), e))?;
            }
        }
    }
    Ok(TrainOutcome {
        model,
        optimizer: opt,
        steps,
        epochs,
    })
}

fn fmt_acc(a: Option<f64>) -> String {
    a.map_or_else(|| "-".into(), |a| format!("{a:.4}"))
}

fn resume_state(dir: &Path, model_config: &EncoderConfig) -> Result<(Model, OptimizerState, usize)> {
    let (model, moments, manifest) = load_checkpoint(dir)?;
    if model.config() != model_config {
        return Err(Error::Checkpoint(
            "checkpoint config differs from the requested model config".into(),
        ));
    }
    let moments = moments.ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
    let epoch = manifest
        .meta
        .get("epochs_completed")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::Checkpoint("checkpoint meta lacks epochs_completed".into()))?;
    Ok((model, OptimizerState::from_moments(moments), epoch as usize))
}

/// The eleven task subsets of the standard ablation table, in row order.
pub fn table5_rows() -> Vec<BTreeSet<Task>> {
    use Task::*;
    let rows: [&[Task]; 11] = [
        &[],
        &[Mlm],
        &[Mem],
        &[Bsop],
        &[Jp],
        &[Crl],
        &[Mlm, Mem, Bsop, Crl],
        &[Mlm, Mem, Bsop, Jp],
        &[Mlm, Mem, Bsop],
        &[Jp, Crl],
        &[Mlm, Mem, Bsop, Jp, Crl],
    ];
    rows.iter().map(|r| r.iter().copied().collect()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub row: usize,
    pub tasks: String,
    pub val_accuracy: Option<f64>,
    pub train_accuracy: Option<f64>,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.tasks.len()).max().unwrap_or(0).max(5);
        let mut s = format!("{:>3}  {:<width$}  {:>8}  {:>8}\n", "#", "tasks", "val", "train");
        for r in &self.rows {
            writeln!(
                s,
                "{:>3}  {:<width$}  {:>8}  {:>8}",
                r.row,
                r.tasks,
                fmt_acc(r.val_accuracy),
                fmt_acc(r.train_accuracy)
            )
            .unwrap();
        }
        s
    }
}

/// Trains one model per task subset with identical seeds; rows keep the
/// order of `subsets`.
pub fn ablate(
    data: &TrainData<'_>,
    base: &TrainConfig,
    model_config: &EncoderConfig,
    subsets: &[BTreeSet<Task>],
    verbose: bool,
) -> Result<AblationReport> {
    if subsets.is_empty() {
        return Err(Error::Config("ablation needs at least one task subset".into()));
    }
    let mut rows = Vec::with_capacity(subsets.len());
    for (i, subset) in subsets.iter().enumerate() {
        let config = TrainConfig {
            enabled_tasks: subset.clone(),
            ..base.clone()
        };
        if verbose {
            eprintln!("ablation row {}: {}", i + 1, format_task_set(subset));
        }
        let out = train(data, &config, model_config, &TrainOptions::default())?;
        rows.push(AblationRow {
            row: i + 1,
            tasks: format_task_set(subset),
            val_accuracy: out.final_val_accuracy(),
            train_accuracy: out.final_train_accuracy(),
            final_loss: out.epochs.last().map_or(f64::NAN, |e| e.mean_loss),
        });
    }
    Ok(AblationReport { seed: base.seed, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let c = TrainConfig::default();
        assert_eq!(lr_at(0, 100, &c), 0.0);
        assert_eq!(lr_at(10, 100, &c), 1e-3);
        assert_eq!(lr_at(100, 100, &c), 0.0);
        assert!((lr_at(55, 100, &c) - 0.5e-3).abs() < 1e-15);
        // ceil(0.1 * 25) = 3
        assert_eq!(lr_at(3, 25, &c), 1e-3);
        assert!(lr_at(2, 25, &c) < 1e-3);
    }

    #[test]
    fn adam_matches_scalar_recurrence() {
        let cfg = EncoderConfig {
            vocab_size: 6,
            max_len: 8,
            d_model: 4,
            n_heads: 1,
            n_layers: 1,
            d_ff: 4,
            dropout_p: 0.0,
            n_types: 2,
        };
        let tc = TrainConfig::default();
        let mut params = Model::zeros(&cfg);
        let mut grads = Model::zeros(&cfg);
        let mut opt = OptimizerState::new(&cfg);
        let (mut p, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        params.heads.qa_b[[0, 0]] = p;
        for t in 1..=5 {
            let g = 0.3 * t as f64 - 0.7;
            grads.heads.qa_b[[0, 0]] = g;
            let lr = 0.01;
            opt.update(&mut params, &grads, lr, &tc);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            p -= lr * mh / (vh.sqrt() + 1e-8);
            assert!((params.heads.qa_b[[0, 0]] - p).abs() < 1e-12);
        }
    }

    #[test]
    fn ablation_rows() {
        let rows = table5_rows();
        assert_eq!(rows.len(), 11);
        assert!(rows[0].is_empty());
        assert_eq!(rows[10].len(), 5);
        assert_eq!(format_task_set(&rows[9]), "crl,jp");
    }

    #[test]
    fn holdout_partitions() {
        let ex = crate::toy::generate(30, 1, "h");
        let (t, v) = split_holdout(&ex, 0.2, 4);
        assert_eq!((t.len(), v.len()), (24, 6));
        assert!(v.iter().all(|e| !t.iter().any(|x| x.id == e.id)));
        assert_eq!(split_holdout(&ex, 0.2, 4).1, v);
    }
}
