use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use elberto::config::Config;
use elberto::corpus::{build_vocab, load_dataset, QaExample, Vocabulary};
use elberto::encoder::{EncoderConfig, Mode};
use elberto::eval::{evaluate, EvalReport};
use elberto::gradcheck::{check_joint, generic_point, probe_batch};
use elberto::model::{load_checkpoint, Model};
use elberto::objectives::LossWeights;
use elberto::rng::SeedPath;
use elberto::taskgen::{
    builtin_lexicon, format_task_set, load_lexicon, parse_task_set, read_streams, write_streams, AntonymLexicon,
    GenConfig, Task, TaskContext, TaskStreams,
};
use elberto::trainer::{ablate, split_holdout, table5_rows, train, TrainConfig, TrainData, TrainOptions};

#[derive(Parser)]
#[command(
    name = "elberto",
    version,
    about = "Multi-task self-supervised training for multiple-choice QA"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a vocabulary from one or more datasets.
    BuildVocab(BuildVocabArgs),
    /// Generate the auxiliary task streams for a dataset.
    GenTasks(GenTasksArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a labeled dataset.
    Eval(EvalArgs),
    /// Evaluate a checkpoint on a dataset from another corpus.
    TransferEval(EvalArgs),
    /// Train one model per task subset and tabulate validation accuracy.
    Ablate(AblateArgs),
    /// Compare analytic and finite-difference gradients of the joint loss.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// key = value configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct BuildVocabArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, num_args = 1..)]
    data: Vec<PathBuf>,
    #[arg(long)]
    min_count: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenTasksArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Antonym lexicon (TSV); the bundled lexicon is used when omitted.
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Existing vocabulary; built from --data when omitted.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    min_count: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated subset of crl,jp,bsop,mem,mlm, or all / none.
    #[arg(long)]
    tasks: Option<String>,
    #[arg(long = "K")]
    k: Option<usize>,
    #[arg(long = "P")]
    p: Option<usize>,
    #[arg(long)]
    n_flips: Option<usize>,
}

#[derive(Args, Clone)]
struct TrainFlags {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Validation set; otherwise --val-fraction of --data is held out.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[arg(long)]
    min_count: Option<u64>,
    #[arg(long)]
    tasks: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    flags: TrainFlags,
    /// Pre-generated task streams (from gen-tasks), reused every epoch.
    #[arg(long)]
    tasks_dir: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint directory to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Report path; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write per-example predictions as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    flags: TrainFlags,
    /// `table5` for the standard eleven rows, or subsets separated by `;`
    /// (e.g. `none;mlm;all`).
    #[arg(long, default_value = "table5")]
    rows: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset to draw probe examples from; a generated toy sample otherwise.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(n) = std::env::var("ELBERTO_THREADS") {
        match n.parse::<usize>() {
            Ok(n) if n > 0 => {
                // the global pool may already exist in embedding contexts
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                report_error(&anyhow::anyhow!(
                    "ELBERTO_THREADS must be a positive integer, got `{n}`"
                ));
                return ExitCode::from(2);
            }
        }
    }
    let result = match cli.command {
        Command::BuildVocab(a) => cmd_build_vocab(a),
        Command::GenTasks(a) => cmd_gen_tasks(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a, false),
        Command::TransferEval(a) => cmd_eval(a, true),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            report_error(&e);
            ExitCode::FAILURE
        }
    }
}

fn report_error(e: &anyhow::Error) {
    let kind = match e.downcast_ref::<elberto::Error>() {
        Some(elberto::Error::Config(_)) => "config",
        Some(elberto::Error::Io { .. }) => "io",
        Some(elberto::Error::Record { .. }) => "record",
        Some(elberto::Error::Checkpoint(_)) | Some(elberto::Error::Shape { .. }) => "checkpoint",
        Some(elberto::Error::NonFinite(_)) => "non_finite",
        Some(_) => "data",
        None => "error",
    };
    let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
    eprintln!("{}", json!({ "error": kind, "message": chain.join(": ") }));
}

fn load_config(common: &Common) -> Result<Config> {
    match &common.config {
        Some(p) => Ok(Config::load(p)?),
        None => Ok(Config::default()),
    }
}

fn seed_of(common: &Common, cfg: &Config) -> Result<u64> {
    Ok(match common.seed {
        Some(s) => s,
        None => cfg.get("seed")?.unwrap_or(0),
    })
}

fn path_of(flag: &Option<PathBuf>, cfg: &Config, key: &str) -> Option<PathBuf> {
    flag.clone().or_else(|| cfg.get_str(key).map(PathBuf::from))
}

fn required_path(flag: &Option<PathBuf>, cfg: &Config, key: &str, name: &str) -> Result<PathBuf> {
    path_of(flag, cfg, key).with_context(|| format!("--{name} (or `{key}` in the config) is required"))
}

fn lexicon_of(flag: &Option<PathBuf>, cfg: &Config) -> Result<AntonymLexicon> {
    Ok(match path_of(flag, cfg, "data.lexicon") {
        Some(p) => load_lexicon(p)?,
        None => builtin_lexicon(),
    })
}

fn min_count_of(flag: Option<u64>, cfg: &Config) -> Result<u64> {
    Ok(flag.or(cfg.get("data.min_count")?).unwrap_or(2))
}

fn tasks_of(flag: &Option<String>, cfg: &Config) -> Result<BTreeSet<Task>> {
    Ok(match flag.as_deref().or(cfg.get_str("tasks.enabled")) {
        Some(s) => parse_task_set(s)?,
        None => Task::ALL.into_iter().collect(),
    })
}

fn model_config(cfg: &Config, vocab_size: usize) -> Result<EncoderConfig> {
    let d = EncoderConfig::toy(vocab_size);
    let c = EncoderConfig {
        vocab_size,
        max_len: cfg.get("model.max_len")?.unwrap_or(d.max_len),
        d_model: cfg.get("model.d_model")?.unwrap_or(d.d_model),
        n_heads: cfg.get("model.n_heads")?.unwrap_or(d.n_heads),
        n_layers: cfg.get("model.n_layers")?.unwrap_or(d.n_layers),
        d_ff: cfg.get("model.d_ff")?.unwrap_or(d.d_ff),
        dropout_p: cfg.get("model.dropout")?.unwrap_or(d.dropout_p),
        n_types: cfg.get("model.n_types")?.unwrap_or(d.n_types),
    };
    c.validate()?;
    Ok(c)
}

fn gen_config(cfg: &Config, tasks: BTreeSet<Task>, max_len: usize) -> Result<GenConfig> {
    let d = GenConfig::default();
    Ok(GenConfig {
        tasks,
        k: cfg.get("tasks.k")?.unwrap_or(d.k),
        p: cfg.get("tasks.p")?.unwrap_or(d.p),
        n_flips: cfg.get("tasks.n_flips")?.unwrap_or(d.n_flips),
        max_len,
    })
}

fn weights_of(cfg: &Config) -> Result<LossWeights> {
    let d = LossWeights::default();
    Ok(LossWeights {
        alpha: cfg.get("weights.alpha")?.unwrap_or(d.alpha),
        beta: cfg.get("weights.beta")?.unwrap_or(d.beta),
        gamma: cfg.get("weights.gamma")?.unwrap_or(d.gamma),
        lambda_: cfg.get("weights.lambda")?.unwrap_or(d.lambda_),
        delta: cfg.get("weights.delta")?.unwrap_or(d.delta),
    })
}

fn train_config(f: &TrainFlags, cfg: &Config) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let clip_norm = match cfg.get_str("train.clip_norm") {
        None => d.clip_norm,
        Some("off") | Some("none") => None,
        Some(_) => cfg.get("train.clip_norm")?,
    };
    let c = TrainConfig {
        epochs: f.epochs.or(cfg.get("train.epochs")?).unwrap_or(d.epochs),
        batch_size: f.batch_size.or(cfg.get("train.batch_size")?).unwrap_or(d.batch_size),
        learning_rate: f.lr.or(cfg.get("train.learning_rate")?).unwrap_or(d.learning_rate),
        warmup_fraction: cfg.get("train.warmup_fraction")?.unwrap_or(d.warmup_fraction),
        beta1: cfg.get("train.beta1")?.unwrap_or(d.beta1),
        beta2: cfg.get("train.beta2")?.unwrap_or(d.beta2),
        epsilon: cfg.get("train.epsilon")?.unwrap_or(d.epsilon),
        clip_norm,
        weights: weights_of(cfg)?,
        enabled_tasks: tasks_of(&f.tasks, cfg)?,
        seed: seed_of(&f.common, cfg)?,
        regenerate_ssl_each_epoch: cfg.get("tasks.regenerate")?.unwrap_or(d.regenerate_ssl_each_epoch),
        k: cfg.get("tasks.k")?.unwrap_or(d.k),
        p: cfg.get("tasks.p")?.unwrap_or(d.p),
        n_flips: cfg.get("tasks.n_flips")?.unwrap_or(d.n_flips),
        eval_train: cfg.get("train.eval_train")?.unwrap_or(d.eval_train),
    };
    c.validate()?;
    Ok(c)
}

/// Training and validation examples plus the vocabulary.
struct Corpus {
    train: Vec<QaExample>,
    val: Vec<QaExample>,
    vocab: Vocabulary,
}

fn load_corpus(f: &TrainFlags, cfg: &Config, seed: u64, vocab_hint: Option<PathBuf>) -> Result<Corpus> {
    let data = required_path(&f.data, cfg, "data.train", "data")?;
    let all = load_dataset(&data)?;
    let (train, val) = match path_of(&f.val, cfg, "data.val") {
        Some(v) => (all, load_dataset(v)?),
        None => {
            let frac = f.val_fraction.or(cfg.get("data.val_fraction")?).unwrap_or(0.0);
            if !(0.0..1.0).contains(&frac) {
                bail!("val_fraction must be in [0, 1)");
            }
            split_holdout(&all, frac, seed)
        }
    };
    let vocab = match path_of(&f.vocab, cfg, "data.vocab").or(vocab_hint) {
        Some(p) => Vocabulary::load(p)?,
        None => build_vocab(&train, min_count_of(f.min_count, cfg)?)?,
    };
    Ok(Corpus { train, val, vocab })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_build_vocab(a: BuildVocabArgs) -> Result<ExitCode> {
    let cfg = load_config(&a.common)?;
    let mut paths = a.data.clone();
    if paths.is_empty() {
        paths.push(required_path(&None, &cfg, "data.train", "data")?);
    }
    let mut examples = Vec::new();
    for p in &paths {
        examples.extend(load_dataset(p)?);
    }
    let vocab = build_vocab(&examples, min_count_of(a.min_count, &cfg)?)?;
    vocab.save(&a.out)?;
    println!("{} tokens -> {}", vocab.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_gen_tasks(a: GenTasksArgs) -> Result<ExitCode> {
    let cfg = load_config(&a.common)?;
    let seed = seed_of(&a.common, &cfg)?;
    let data = required_path(&a.data, &cfg, "data.train", "data")?;
    let examples = load_dataset(&data)?;
    let vocab = match path_of(&a.vocab, &cfg, "data.vocab") {
        Some(p) => Vocabulary::load(p)?,
        None => build_vocab(&examples, min_count_of(a.min_count, &cfg)?)?,
    };
    let lexicon = lexicon_of(&a.lexicon, &cfg)?;
    let max_len = cfg.get("model.max_len")?.unwrap_or(EncoderConfig::toy(0).max_len);
    let mut gen = gen_config(&cfg, tasks_of(&a.tasks, &cfg)?, max_len)?;
    gen.k = a.k.unwrap_or(gen.k);
    gen.p = a.p.unwrap_or(gen.p);
    gen.n_flips = a.n_flips.unwrap_or(gen.n_flips);
    let (streams, stats) = TaskContext::new(&vocab, &lexicon, gen.clone()).generate(&examples, seed)?;
    write_streams(&a.out, &streams, &stats, &gen.tasks)?;
    vocab.save(a.out.join("vocab.txt"))?;
    for (task, s) in &stats.tasks {
        println!("{task:<5} emitted {:>6}  absent {:?}", s.emitted, s.absent);
    }
    println!("tasks [{}] -> {}", format_task_set(&gen.tasks), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode> {
    let cfg = load_config(&a.flags.common)?;
    let mut tc = train_config(&a.flags, &cfg)?;
    let tasks_dir = path_of(&a.tasks_dir, &cfg, "data.tasks_dir");
    let corpus = load_corpus(&a.flags, &cfg, tc.seed, tasks_dir.as_ref().map(|d| d.join("vocab.txt")))?;
    let streams: Option<TaskStreams> = match &tasks_dir {
        Some(d) => {
            tc.regenerate_ssl_each_epoch = false;
            Some(read_streams(d)?)
        }
        None => None,
    };
    let lexicon = lexicon_of(&a.flags.lexicon, &cfg)?;
    let mc = model_config(&cfg, corpus.vocab.len())?;
    let data = TrainData {
        train: &corpus.train,
        val: (!corpus.val.is_empty()).then_some(corpus.val.as_slice()),
        vocab: &corpus.vocab,
        lexicon: &lexicon,
        fixed_streams: streams.as_ref(),
    };
    let opts = TrainOptions {
        out_dir: Some(a.out.clone()),
        resume: a.resume.clone(),
        verbose: !a.flags.quiet,
    };
    let out = train(&data, &tc, &mc, &opts)?;
    if !corpus.val.is_empty() {
        write_text(
            &a.out.join("val_ids.txt"),
            &(corpus.val.iter().map(|e| e.id.as_str()).collect::<Vec<_>>().join("\n") + "\n"),
        )?;
    }
    println!(
        "trained {} steps; train accuracy {}; val accuracy {}; checkpoint {}",
        out.steps.last().map_or(0, |s| s.step),
        fmt_opt(out.final_train_accuracy()),
        fmt_opt(out.final_val_accuracy()),
        a.out.join("final").display()
    );
    Ok(ExitCode::SUCCESS)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

fn load_model_and_vocab(dir: &Path) -> Result<(Model, Vocabulary, elberto::model::Manifest)> {
    let (model, _, manifest) = load_checkpoint(dir)?;
    let vocab = Vocabulary::load(dir.join("vocab.txt"))?;
    if vocab.len() != model.config().vocab_size {
        bail!(elberto::Error::Checkpoint(format!(
            "vocab.txt has {} tokens but the model expects {}",
            vocab.len(),
            model.config().vocab_size
        )));
    }
    Ok((model, vocab, manifest))
}

fn cmd_eval(a: EvalArgs, transfer: bool) -> Result<ExitCode> {
    let _cfg = load_config(&a.common)?;
    let (model, vocab, manifest) = load_model_and_vocab(&a.checkpoint)?;
    let examples = load_dataset(&a.data)?;
    let mut report: EvalReport = evaluate(&model, &vocab, &examples)?;
    if transfer {
        report.source_fingerprint = manifest
            .meta
            .get("corpus_fingerprint")
            .and_then(|v| v.as_str())
            .map(str::to_string);
    }
    let json = report.to_json()?;
    match &a.out {
        Some(p) => {
            write_text(p, &json)?;
            eprint!("{}", report.summary());
        }
        None => print!("{json}"),
    }
    if let Some(p) = &a.csv {
        write_text(p, &report.predictions_csv())?;
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_rows(spec: &str) -> Result<Vec<BTreeSet<Task>>> {
    if spec.trim() == "table5" {
        return Ok(table5_rows());
    }
    spec.split(';').map(|s| Ok(parse_task_set(s)?)).collect()
}

fn cmd_ablate(a: AblateArgs) -> Result<ExitCode> {
    let cfg = load_config(&a.flags.common)?;
    let tc = train_config(&a.flags, &cfg)?;
    let mut flags = a.flags.clone();
    if flags.val.is_none() && flags.val_fraction.is_none() && cfg.get_str("data.val_fraction").is_none() {
        flags.val_fraction = Some(0.2);
    }
    let corpus = load_corpus(&flags, &cfg, tc.seed, None)?;
    if corpus.val.is_empty() {
        bail!("ablation needs a validation split");
    }
    let lexicon = lexicon_of(&a.flags.lexicon, &cfg)?;
    let mc = model_config(&cfg, corpus.vocab.len())?;
    let data = TrainData {
        train: &corpus.train,
        val: Some(&corpus.val),
        vocab: &corpus.vocab,
        lexicon: &lexicon,
        fixed_streams: None,
    };
    let rows = parse_rows(&a.rows)?;
    let report = ablate(&data, &tc, &mc, &rows, !a.flags.quiet)?;
    let table = report.to_table();
    print!("{table}");
    if let Some(dir) = &a.out {
        let mut json = serde_json::to_string_pretty(&report)?;
        json.push('\n');
        write_text(&dir.join("ablation.json"), &json)?;
        write_text(&dir.join("ablation.txt"), &table)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let cfg = load_config(&a.common)?;
    let seed = seed_of(&a.common, &cfg)?;
    let n_examples: usize = cfg.get("gradcheck.examples")?.unwrap_or(2);
    let examples = match path_of(&a.data, &cfg, "data.train") {
        Some(p) => load_dataset(p)?.into_iter().take(n_examples).collect::<Vec<_>>(),
        None => elberto::toy::generate(n_examples, seed, "probe"),
    };
    let vocab = build_vocab(&examples, 1)?;
    let lexicon = builtin_lexicon();
    // The check runs on its own small width; depth and the rest follow [model].
    let mut mc = model_config(&cfg, vocab.len())?;
    mc.d_model = cfg.get("gradcheck.d_model")?.unwrap_or(16);
    mc.n_heads = cfg.get("gradcheck.n_heads")?.unwrap_or(2);
    mc.d_ff = cfg.get("gradcheck.d_ff")?.unwrap_or(32);
    mc.validate()?;
    let gen = gen_config(&cfg, Task::ALL.into_iter().collect(), mc.max_len)?;
    let batch = probe_batch(&examples, &vocab, &lexicon, &gen, seed)?;
    let jitter: f64 = cfg.get("gradcheck.jitter")?.unwrap_or(0.3);
    let base = Model::init(&mc, &mut SeedPath::new(seed).with_str("init").rng())?;
    let model = generic_point(&base, jitter, seed);
    let samples = a.samples.or(cfg.get("gradcheck.samples")?).unwrap_or(200);
    let step = a.step.or(cfg.get("gradcheck.step")?).unwrap_or(1e-5);
    let threshold = a.threshold.or(cfg.get("gradcheck.threshold")?).unwrap_or(1e-4);
    let start = std::time::Instant::now();
    let report = check_joint(&model, &batch, &weights_of(&cfg)?, Mode::Train, seed, samples, step)?;
    let passed = report.passes(threshold);
    println!(
        "max relative error {:.3e} over {} parameters (threshold {threshold:e}, {:.1}s): {}",
        report.max_rel_error,
        report.samples,
        start.elapsed().as_secs_f64(),
        if passed { "PASS" } else { "FAIL" }
    );
    if let Some(w) = &report.worst {
        println!(
            "worst: {}[{}] analytic {:.6e} numeric {:.6e}",
            w.tensor, w.offset, w.analytic, w.numeric
        );
    }
    if let Some(p) = &a.out {
        write_text(p, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    }
    Ok(if passed { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
