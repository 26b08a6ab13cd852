//! `dhl` — train and inspect goal-planning models for goal-guided
//! conversational recommendation.
//!
//! Subcommands: `gen-data` (seeded synthetic corpora), `train` (with ablation
//! flags and training modes), `eval` (per-level metrics incl. the
//! dialog-leading success rate), `predict` (single-context prediction with
//! optional explanation), and `grad-check` (finite-difference verification).
//!
//! Machine-readable output goes to stdout as one JSON document or JSONL
//! stream; diagnostics go to stderr. Exit codes: 0 success, 1 runtime or
//! numeric failure, 2 usage or config failure.

mod run_config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use dhl_core::checkpoint::{CheckpointMeta, DhlCheckpoint};
use dhl_core::data::{
    self, expand_instances, generate_synthetic, load_dialogs_str, load_dialogs_str_with,
    DialogRecord, GoalHierarchyDataset, GoalLevel, GoalVocabulary, SyntheticConfig,
};
use dhl_core::gradcheck;
use dhl_core::metrics::{evaluate_model, Baseline, MetricsReport};
use dhl_core::model::{self, DhlModelParams, ModelConfig, LEVEL_NAMES};
use dhl_core::tensor::Tape;
use dhl_core::train::{train, TrainError, WeightNet};

use run_config::RunConfig;

#[derive(Parser)]
#[command(name = "dhl", version, about = "Goal-guided conversational recommendation: hierarchical goal-sequence models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic goal-sequence corpus (JSONL)
    GenData(GenDataArgs),
    /// Train a model; writes best-dev checkpoint, snapshot log, and metrics
    Train(TrainArgs),
    /// Evaluate a checkpoint or the Next baseline on a corpus
    Eval(EvalArgs),
    /// Predict the next goal for one context, optionally with explanations
    Predict(PredictArgs),
    /// Run the finite-difference gradient verification suite
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output JSONL path
    #[arg(long)]
    out: PathBuf,
    /// Number of goal types
    #[arg(long, default_value_t = 5)]
    types: usize,
    /// Number of goal entities (each type owns a disjoint block)
    #[arg(long, default_value_t = 20)]
    entities: usize,
    /// Number of goal attributes; 0 generates a two-level corpus
    #[arg(long, default_value_t = 0)]
    attrs: usize,
    /// Number of dialogs
    #[arg(long, default_value_t = 2000)]
    dialogs: usize,
    /// Minimum dialog length
    #[arg(long, default_value_t = 4)]
    len_min: usize,
    /// Maximum dialog length
    #[arg(long, default_value_t = 8)]
    len_max: usize,
    /// Per-step probability of drifting toward the dialog's final goal type
    #[arg(long, default_value_t = 0.3)]
    drift: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Also write {stem}.train/.dev/.test.jsonl splits, e.g. "0.65,0.1,0.25"
    #[arg(long)]
    split: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training corpus (JSONL)
    #[arg(long)]
    train: PathBuf,
    /// Dev corpus (JSONL) for per-epoch evaluation and best-checkpoint choice
    #[arg(long)]
    dev: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// JSON config file; command-line flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Soft-label strength s0
    #[arg(long)]
    s0: Option<f64>,
    /// Comma list from {att, weight, soft}
    #[arg(long)]
    ablate: Option<String>,
    /// Training mode: bilevel, joint, or fixed-weights
    #[arg(long)]
    mode: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint path (not needed with --baseline next)
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Corpus to evaluate (JSONL)
    #[arg(long)]
    data: PathBuf,
    /// Model-free baseline: "next" predicts the previous goal again
    #[arg(long)]
    baseline: Option<String>,
    /// Report every level, not just the entity level
    #[arg(long)]
    per_level: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Comma-separated goal type context, e.g. "QA,Chit-chat"
    #[arg(long)]
    types: String,
    /// Comma-separated goal entity context
    #[arg(long)]
    entities: String,
    /// Comma-separated goal attribute context (three-level models only)
    #[arg(long)]
    attrs: Option<String>,
    /// Include attention rows, fusion deltas, and the weight-net curve
    #[arg(long)]
    explain: bool,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

/// Failure classified by exit code.
enum CliError {
    /// Exit 2: bad flags, bad config, bad input data.
    Usage(String),
    /// Exit 1: runtime or numeric failure.
    Runtime(String),
}

impl CliError {
    fn usage(e: impl std::fmt::Display) -> Self {
        CliError::Usage(e.to_string())
    }

    fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Predict(args) => cmd_predict(args),
        Command::GradCheck(args) => cmd_grad_check(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn cmd_gen_data(args: GenDataArgs) -> CliResult {
    let config = SyntheticConfig {
        n_types: args.types,
        n_entities: args.entities,
        n_attributes: args.attrs,
        n_dialogs: args.dialogs,
        len_range: (args.len_min, args.len_max),
        drift: args.drift,
        seed: args.seed,
    };
    let text = generate_synthetic(&config).map_err(CliError::usage)?;
    fs::write(&args.out, &text).map_err(CliError::runtime)?;

    let dataset = load_dialogs_str(&text).map_err(CliError::runtime)?;
    let instances: usize = dataset.records.iter().map(|r| r.len() - 1).sum();
    let mut summary = json!({
        "dialogs": dataset.records.len(),
        "instances": instances,
        "vocab_sizes": dataset.vocab_sizes(),
    });

    if let Some(split) = &args.split {
        let fractions = parse_fractions(split)?;
        let (train, dev, test) =
            data::split_dataset(&dataset.records, fractions, args.seed).map_err(CliError::usage)?;
        let mut sizes = serde_json::Map::new();
        for (name, records) in [("train", train), ("dev", dev), ("test", test)] {
            let path = sibling_with_suffix(&args.out, name);
            let subset = GoalHierarchyDataset {
                vocabs: dataset.vocabs.clone(),
                records,
            };
            fs::write(&path, subset.to_jsonl()).map_err(CliError::runtime)?;
            sizes.insert(name.to_string(), json!(subset.records.len()));
        }
        summary["splits"] = serde_json::Value::Object(sizes);
    }

    println!("{summary}");
    Ok(())
}

fn parse_fractions(s: &str) -> CliResult<(f64, f64, f64)> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Usage(format!("bad split fractions {s:?}: {e}")))?;
    if parts.len() != 3 {
        return Err(CliError::Usage(format!(
            "split needs exactly three fractions, got {s:?}"
        )));
    }
    Ok((parts[0], parts[1], parts[2]))
}

fn sibling_with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    let ext = path
        .extension()
        .map(|e| format!(".{}", e.to_string_lossy()))
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}{ext}"))
}

fn load_corpus_pair(
    train_path: &Path,
    dev_path: &Path,
) -> CliResult<(Vec<GoalVocabulary>, Vec<DialogRecord>, Vec<DialogRecord>)> {
    let read = |p: &Path| {
        fs::read_to_string(p)
            .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", p.display())))
    };
    let train_text = read(train_path)?;
    let dev_text = read(dev_path)?;
    let mut vocabs = Vec::new();
    let train_records =
        load_dialogs_str_with(&mut vocabs, &train_text).map_err(CliError::usage)?;
    let dev_records = load_dialogs_str_with(&mut vocabs, &dev_text).map_err(CliError::usage)?;
    Ok((vocabs, train_records, dev_records))
}

fn cmd_train(args: TrainArgs) -> CliResult {
    // config file, then flag overrides, then defaults
    let mut run = match &args.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    run.train_data = args.train.display().to_string();
    run.dev_data = args.dev.display().to_string();
    run.out_dir = args.out.display().to_string();
    if let Some(lr) = args.lr {
        run.model_lr = lr;
    }
    if let Some(epochs) = args.epochs {
        run.epochs = epochs;
    }
    if let Some(batch) = args.batch {
        run.batch_size = batch;
    }
    if let Some(seed) = args.seed {
        run.seed = seed;
    }
    if let Some(s0) = args.s0 {
        run.soft_s0 = s0;
    }
    if let Some(mode) = &args.mode {
        run.mode = mode.clone();
    }
    if let Some(ablate) = &args.ablate {
        for item in ablate.split(',').filter(|s| !s.is_empty()) {
            match item.trim() {
                "att" => run.use_cross_attention = false,
                "weight" => run.use_hier_weights = false,
                "soft" => run.use_soft_label = false,
                other => {
                    return Err(CliError::Usage(format!(
                        "unknown ablation {other:?}; expected att, weight, or soft"
                    )))
                }
            }
        }
    }

    let (vocabs, train_records, dev_records) = load_corpus_pair(&args.train, &args.dev)?;
    let levels = vocabs.len();
    let vocab_sizes: Vec<usize> = vocabs.iter().map(|v| v.len()).collect();
    let model_config = run.model_config(levels, vocab_sizes).map_err(CliError::usage)?;
    let train_config = run.train_config().map_err(CliError::usage)?;

    let mut adjacency = Vec::new();
    for level in 1..levels {
        adjacency.push(
            data::build_adjacency(
                &train_records,
                level - 1,
                level,
                model_config.vocab_sizes[level - 1],
                model_config.vocab_sizes[level],
                model_config.epsilon,
            )
            .map_err(CliError::usage)?,
        );
    }
    let train_set = expand_instances(&train_records);
    let dev_set = expand_instances(&dev_records);

    fs::create_dir_all(&args.out).map_err(CliError::runtime)?;
    let config_echo = serde_json::to_string_pretty(&run).map_err(CliError::runtime)?;
    fs::write(args.out.join("run_config.json"), config_echo).map_err(CliError::runtime)?;

    let params =
        DhlModelParams::init(&model_config, train_config.seed).map_err(CliError::usage)?;
    let weightnet = WeightNet::init(train_config.seed.wrapping_add(1));

    eprintln!(
        "training: {} train instances, {} dev instances, {} levels, mode {:?}",
        train_set.len(),
        dev_set.len(),
        levels,
        train_config.mode
    );
    let output = train(
        &train_set,
        &dev_set,
        &adjacency,
        &model_config,
        &train_config,
        params,
        weightnet,
    )
    .map_err(|e| match e {
        TrainError::NonFiniteLoss { .. } => CliError::runtime(e),
        TrainError::InvalidConfig(_) | TrainError::EmptyTrainSet => CliError::usage(e),
        other => CliError::runtime(other),
    })?;

    // snapshot log
    let mut log = String::new();
    for snap in &output.snapshots {
        log.push_str(&serde_json::to_string(snap).map_err(CliError::runtime)?);
        log.push('\n');
    }
    fs::write(args.out.join("snapshots.jsonl"), log).map_err(CliError::runtime)?;

    // best-dev checkpoint
    let ckpt = DhlCheckpoint {
        meta: CheckpointMeta {
            model: model_config.clone(),
            train: train_config.clone(),
            vocab_names: vocabs.iter().map(|v| v.names().to_vec()).collect(),
            adam_model_step: output.adam_model.step_count(),
            adam_weightnet_step: output.adam_weightnet.step_count(),
        },
        params: output.best_params.clone(),
        weightnet: output.best_weightnet.clone(),
        adjacency: adjacency.clone(),
        adam_model: output.adam_model,
        adam_weightnet: output.adam_weightnet,
    };
    let ckpt_path = args.out.join("checkpoint.dhl");
    ckpt.save(&ckpt_path).map_err(CliError::runtime)?;

    let metrics_doc = json!({
        "best_epoch": output.best_epoch,
        "dev_metrics": output.best_dev_metrics,
        "checkpoint": ckpt_path.display().to_string(),
    });
    fs::write(
        args.out.join("metrics.json"),
        serde_json::to_string_pretty(&metrics_doc).map_err(CliError::runtime)?,
    )
    .map_err(CliError::runtime)?;
    println!("{metrics_doc}");
    Ok(())
}

fn remap_records(
    records: &[DialogRecord],
    data_vocabs: &[GoalVocabulary],
    ckpt_vocabs: &[GoalVocabulary],
) -> CliResult<Vec<DialogRecord>> {
    let mut unknown: Vec<String> = Vec::new();
    let mut map_id = |level: usize, id: usize| -> usize {
        let name = data_vocabs[level].name(id);
        match ckpt_vocabs[level].id(name) {
            Some(mapped) => mapped,
            None => {
                let tag = format!("{}:{}", ckpt_vocabs[level].level.as_str(), name);
                if !unknown.contains(&tag) {
                    unknown.push(tag);
                }
                0
            }
        }
    };
    let mut out = Vec::with_capacity(records.len());
    for rec in records {
        let map_seq = |level: usize, seq: &[usize], map_id: &mut dyn FnMut(usize, usize) -> usize| {
            seq.iter().map(|&i| map_id(level, i)).collect::<Vec<_>>()
        };
        let type_seq = map_seq(0, &rec.type_seq, &mut map_id);
        let entity_seq = map_seq(1, &rec.entity_seq, &mut map_id);
        let attribute_seq = rec
            .attribute_seq
            .as_ref()
            .map(|s| map_seq(2, s, &mut map_id));
        let final_goal = rec
            .final_goal
            .iter()
            .enumerate()
            .map(|(level, &id)| map_id(level, id))
            .collect();
        out.push(DialogRecord {
            dialog_id: rec.dialog_id.clone(),
            type_seq,
            entity_seq,
            attribute_seq,
            final_goal,
        });
    }
    if !unknown.is_empty() {
        return Err(CliError::Usage(format!(
            "data contains goals unknown to the checkpoint vocabulary: {}",
            unknown.join(", ")
        )));
    }
    Ok(out)
}

fn cmd_eval(args: EvalArgs) -> CliResult {
    let text = fs::read_to_string(&args.data)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", args.data.display())))?;
    let dataset = load_dialogs_str(&text).map_err(CliError::usage)?;

    let baseline = match args.baseline.as_deref() {
        None => Baseline::None,
        Some("next") => Baseline::Next,
        Some(other) => {
            return Err(CliError::Usage(format!(
                "unknown baseline {other:?}; supported: next"
            )))
        }
    };

    let reports: Vec<MetricsReport> = match baseline {
        Baseline::Next => {
            let config = ModelConfig {
                embed_dim: 1,
                hidden_dim: 1,
                levels: dataset.levels(),
                vocab_sizes: dataset.vocab_sizes(),
                use_cross_attention: false,
                ..ModelConfig::default()
            };
            let instances = expand_instances(&dataset.records);
            evaluate_model(None, &config, &instances, &[], Baseline::Next)
                .map_err(CliError::runtime)?
        }
        Baseline::None => {
            let ckpt_path = args.ckpt.as_ref().ok_or_else(|| {
                CliError::Usage("--ckpt is required unless --baseline next is given".into())
            })?;
            let ckpt = DhlCheckpoint::load(ckpt_path).map_err(CliError::usage)?;
            if dataset.levels() != ckpt.meta.model.levels {
                return Err(CliError::Usage(format!(
                    "data has {} levels but the checkpoint model has {}",
                    dataset.levels(),
                    ckpt.meta.model.levels
                )));
            }
            for level in 0..dataset.levels() {
                if dataset.vocabs[level].len() > ckpt.meta.model.vocab_sizes[level] {
                    return Err(CliError::Usage(format!(
                        "{} vocabulary mismatch: data has {} goals, checkpoint has {}",
                        LEVEL_NAMES[level],
                        dataset.vocabs[level].len(),
                        ckpt.meta.model.vocab_sizes[level]
                    )));
                }
            }
            let ckpt_vocabs: Vec<GoalVocabulary> = ckpt
                .meta
                .vocab_names
                .iter()
                .enumerate()
                .map(|(i, names)| GoalVocabulary::from_names(GoalLevel::from_index(i), names.clone()))
                .collect();
            let remapped = remap_records(&dataset.records, &dataset.vocabs, &ckpt_vocabs)?;
            let instances = expand_instances(&remapped);
            evaluate_model(
                Some(&ckpt.params),
                &ckpt.meta.model,
                &instances,
                &ckpt.adjacency,
                Baseline::None,
            )
            .map_err(CliError::runtime)?
        }
    };

    let selected: Vec<&MetricsReport> = if args.per_level {
        reports.iter().collect()
    } else {
        reports.iter().filter(|r| r.level == "entity").collect()
    };
    println!(
        "{}",
        serde_json::to_string(&selected).map_err(CliError::runtime)?
    );
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> CliResult {
    let ckpt = DhlCheckpoint::load(&args.ckpt).map_err(CliError::usage)?;
    let config = &ckpt.meta.model;

    if config.levels == 3 && args.attrs.is_none() {
        return Err(CliError::Usage(
            "this checkpoint is a three-level model; --attrs is required".into(),
        ));
    }
    if config.levels == 2 && args.attrs.is_some() {
        return Err(CliError::Usage(
            "this checkpoint is a two-level model; --attrs is not accepted".into(),
        ));
    }

    let vocabs: Vec<GoalVocabulary> = ckpt
        .meta
        .vocab_names
        .iter()
        .enumerate()
        .map(|(i, names)| GoalVocabulary::from_names(GoalLevel::from_index(i), names.clone()))
        .collect();

    let mut raw_lists = vec![args.types.as_str(), args.entities.as_str()];
    if let Some(attrs) = &args.attrs {
        raw_lists.push(attrs.as_str());
    }
    let mut prefixes: Vec<Vec<usize>> = Vec::with_capacity(config.levels);
    let mut unknown = Vec::new();
    for (level, raw) in raw_lists.iter().enumerate() {
        let names: Vec<&str> = raw.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
        let mut ids = Vec::with_capacity(names.len());
        for name in names {
            match vocabs[level].id(name) {
                Some(id) => ids.push(id),
                None => unknown.push(format!("{}:{}", LEVEL_NAMES[level], name)),
            }
        }
        prefixes.push(ids);
    }
    if !unknown.is_empty() {
        return Err(CliError::Usage(format!(
            "unknown goal names: {}",
            unknown.join(", ")
        )));
    }
    let len = prefixes[0].len();
    if len == 0 {
        return Err(CliError::Usage("context must contain at least one goal".into()));
    }
    if prefixes.iter().any(|p| p.len() != len) {
        return Err(CliError::Usage(format!(
            "per-level contexts must have equal lengths, got {:?}",
            prefixes.iter().map(Vec::len).collect::<Vec<_>>()
        )));
    }

    let mut tape = Tape::new();
    let staged = model::stage_model(&mut tape, &ckpt.params, &ckpt.adjacency)
        .map_err(CliError::runtime)?;
    let trace = model::forward_staged(&mut tape, &staged, config, &prefixes)
        .map_err(CliError::runtime)?;

    let mut predictions = serde_json::Map::new();
    let mut predicted_ids = Vec::with_capacity(config.levels);
    for level in 0..config.levels {
        let id = model::predict_next(&trace, level);
        predicted_ids.push(id);
        predictions.insert(
            LEVEL_NAMES[level].to_string(),
            json!({"id": id, "name": vocabs[level].name(id)}),
        );
    }
    let mut doc = json!({ "predictions": predictions });

    if args.explain {
        let attention = match (&trace.type2entity, &trace.entity2type) {
            (Some(t2e), Some(e2t)) => json!({
                "type2entity": t2e.data(),
                "entity2type": e2t.data(),
            }),
            _ => serde_json::Value::Null,
        };

        let mut fusion = serde_json::Map::new();
        for level in 1..config.levels {
            let pre = &trace.pre_logits[level];
            let post = &trace.post_logits[level];
            let mut deltas: Vec<(usize, f64)> = pre
                .data()
                .iter()
                .zip(post.data())
                .enumerate()
                .map(|(i, (a, b))| (i, b - a))
                .collect();
            deltas.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let top: Vec<_> = deltas
                .iter()
                .take(5)
                .map(|&(id, delta)| {
                    json!({
                        "id": id,
                        "name": vocabs[level].name(id),
                        "pre": pre.data()[id],
                        "post": post.data()[id],
                        "delta": delta,
                    })
                })
                .collect();
            let predicted = predicted_ids[level];
            fusion.insert(
                LEVEL_NAMES[level].to_string(),
                json!({
                    "top_deltas": top,
                    "contribution_at_prediction": {
                        "id": predicted,
                        "name": vocabs[level].name(predicted),
                        "value": post.data()[predicted] - pre.data()[predicted],
                    },
                }),
            );
        }

        // the weight net's response curve over representative loss values
        let omega_curve: Vec<_> = [0.0, 0.01, 0.05, 0.1, 0.25, 0.5, 1.0, 2.0, 5.0]
            .iter()
            .map(|&loss| {
                json!({
                    "loss": loss,
                    "omega": dhl_core::train::weight_forward(&ckpt.weightnet, loss)
                })
            })
            .collect();

        doc["explain"] = json!({
            "attention": attention,
            "fusion": fusion,
            "omega_curve": omega_curve,
        });
    }

    println!("{doc}");
    Ok(())
}

fn cmd_grad_check(args: GradCheckArgs) -> CliResult {
    if args.tol <= 0.0 {
        return Err(CliError::Usage(format!(
            "tolerance must be positive, got {}",
            args.tol
        )));
    }
    let results = gradcheck::run_all(args.seed, args.tol);
    let all_passed = results.iter().all(|r| r.passed);
    for r in &results {
        eprintln!(
            "{} {:<18} max rel err {:.3e} (tol {:.1e})",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.max_rel_err,
            r.tol
        );
    }
    let doc = json!({
        "seed": args.seed,
        "passed": all_passed,
        "checks": results
            .iter()
            .map(|r| {
                json!({
                    "name": r.name,
                    "max_rel_err": r.max_rel_err,
                    "tol": r.tol,
                    "passed": r.passed,
                })
            })
            .collect::<Vec<_>>(),
    });
    println!("{doc}");
    if all_passed {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "{} gradient checks failed",
            results.iter().filter(|r| !r.passed).count()
        )))
    }
}
