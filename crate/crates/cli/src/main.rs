//! Command-line front end: ingest data, train the retriever, answer
//! questions through the iterative loop, and evaluate traces.

mod config;
mod workspace;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use rescore::corpus::QaInstance;
use rescore::eval::{evaluate, format_report_table, mhr_curve, EvalError};
use rescore::labeler::{Labeler, ScoreMode};
use rescore::orchestrator::{
    append_traces, load_traces, Orchestrator, RetrievalTrace, RunError,
};
use rescore::trainer::{
    append_loss_rows, config_hash, load_checkpoint, save_checkpoint, CheckpointMeta,
    QueryProjection, TrainMode, Trainer,
};

use config::RunConfig;
use workspace::{
    build_embedder, build_gateway, checkpoint_path, load_qa_file, load_templates, load_workspace,
    require_file, traces_path, CliError, EXIT_EVAL_MISMATCH, EXIT_OTHER,
};

#[derive(Parser)]
#[command(name = "rescore", version, about = "Iterative retrieval QA with a label-free trained retriever")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArg {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Random seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Instance-level parallelism override.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainModeArg {
    Kl,
    Infonce,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScoreModeArg {
    /// Question given document (relevance).
    Q,
    /// Answer given question and document (consistency).
    A,
    /// Question-answer pair given document.
    Qa,
}

impl From<ScoreModeArg> for ScoreMode {
    fn from(value: ScoreModeArg) -> Self {
        match value {
            ScoreModeArg::Q => ScoreMode::QuestionGivenDoc,
            ScoreModeArg::A => ScoreMode::AnswerGivenQuestionDoc,
            ScoreModeArg::Qa => ScoreMode::JointQuestionAnswer,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Validate corpus, QA files, and embeddings together.
    Ingest {
        #[command(flatten)]
        common: ConfigArg,
        /// Corpus JSONL override.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// QA JSONL override (validated against the corpus).
        #[arg(long)]
        qa: Option<PathBuf>,
        /// Embedding file override.
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Train the query projection.
    Train {
        #[command(flatten)]
        common: ConfigArg,
        #[arg(long, value_enum, default_value = "kl")]
        mode: TrainModeArg,
        /// Stop after this many optimizer steps (cumulative across resumes).
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Run the iterative QA loop.
    Answer {
        #[command(flatten)]
        common: ConfigArg,
        /// One-off question text.
        #[arg(long, conflicts_with = "qa")]
        question: Option<String>,
        /// QA JSONL file to answer in order.
        #[arg(long)]
        qa: Option<PathBuf>,
        /// Projection checkpoint; identity when absent and none on disk.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Trace output file (appended).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute metrics over a trace file.
    Eval {
        #[command(flatten)]
        common: ConfigArg,
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        qa: PathBuf,
        /// Recall cutoffs.
        #[arg(long, value_delimiter = ',')]
        ks: Vec<u32>,
        /// Report JSON output path.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Per-iteration retrieval curve CSV output path.
        #[arg(long)]
        curve: Option<PathBuf>,
        /// Dataset label in the report.
        #[arg(long, default_value = "dev")]
        dataset: String,
    },
    /// Re-rank retrieval candidates with LM scores and report recall.
    RerankEval {
        #[command(flatten)]
        common: ConfigArg,
        /// Scoring conditional; all three run when omitted.
        #[arg(long, value_enum)]
        mode: Option<ScoreModeArg>,
        /// Candidates retrieved before re-ranking.
        #[arg(long, default_value_t = 100)]
        candidates: usize,
        /// QA file; defaults to paths.qa_dev.
        #[arg(long)]
        qa: Option<PathBuf>,
        /// Projection checkpoint to retrieve candidates with.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Recall cutoffs.
        #[arg(long, value_delimiter = ',')]
        ks: Vec<u32>,
    },
    /// Print the effective configuration as TOML.
    DumpConfig {
        #[command(flatten)]
        common: ConfigArg,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ingest { common, corpus, qa, embeddings } => cmd_ingest(common, corpus, qa, embeddings),
        Command::Train { common, mode, steps } => cmd_train(common, mode, steps),
        Command::Answer { common, question, qa, checkpoint, out } => {
            cmd_answer(common, question, qa, checkpoint, out)
        }
        Command::Eval { common, traces, qa, ks, report, curve, dataset } => {
            cmd_eval(common, traces, qa, ks, report, curve, dataset)
        }
        Command::RerankEval { common, mode, candidates, qa, checkpoint, ks } => {
            cmd_rerank_eval(common, mode, candidates, qa, checkpoint, ks)
        }
        Command::DumpConfig { common } => cmd_dump_config(common),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.code);
    }
}

/// Load config file + env + common flag overrides. Returns the config and
/// the directory paths resolve against.
fn effective_config(common: &ConfigArg) -> Result<(RunConfig, Option<PathBuf>), CliError> {
    let (mut config, base) = match &common.config {
        Some(path) => {
            require_file(path)?;
            let config = RunConfig::load(path).map_err(|e| CliError::validation(e.to_string()))?;
            (config, path.parent().map(Path::to_path_buf))
        }
        None => (RunConfig::default(), None),
    };
    config.apply_env();
    if let Some(seed) = common.seed {
        config.run.seed = seed;
    }
    if let Some(jobs) = common.jobs {
        config.run.jobs = jobs.max(1);
    }
    config
        .trainer
        .validate()
        .map_err(|e| CliError::validation(e.to_string()))?;
    Ok((config, base))
}

/// Write the effective config next to command outputs for provenance.
fn dump_provenance(config: &RunConfig, dir: &Path) {
    let _ = std::fs::create_dir_all(dir);
    let _ = std::fs::write(dir.join("effective-config.toml"), config.to_toml());
}

fn cmd_ingest(
    common: ConfigArg,
    corpus_override: Option<PathBuf>,
    qa_override: Option<PathBuf>,
    embeddings_override: Option<PathBuf>,
) -> Result<(), CliError> {
    let (mut config, base) = effective_config(&common)?;
    if let Some(p) = corpus_override {
        config.paths.corpus = p.display().to_string();
    }
    if let Some(p) = embeddings_override {
        config.paths.embeddings = p.display().to_string();
    }
    let ws = load_workspace(&config, base.as_deref())?;
    println!(
        "corpus: {} documents; embeddings: {} rows, dim {}",
        ws.corpus.len(),
        ws.store.len(),
        ws.store.dim()
    );

    let qa_paths: Vec<(String, PathBuf)> = match qa_override {
        Some(p) => vec![("qa".to_string(), p)],
        None => [
            ("qa_train", &config.paths.qa_train),
            ("qa_dev", &config.paths.qa_dev),
            ("qa_test", &config.paths.qa_test),
        ]
        .into_iter()
        .filter(|(_, raw)| !raw.is_empty())
        .map(|(name, raw)| (name.to_string(), config.resolve(base.as_deref(), raw)))
        .collect(),
    };
    for (name, path) in qa_paths {
        let instances = load_qa_file(&path, Some(&ws.corpus))?;
        let labeled = instances.iter().filter(|i| !i.gt_doc_ids.is_empty()).count();
        println!("{name}: {} instances ({labeled} with gt labels)", instances.len());
    }
    println!("ingest ok");
    Ok(())
}

fn mode_of(arg: TrainModeArg) -> TrainMode {
    match arg {
        TrainModeArg::Kl => TrainMode::Kl,
        TrainModeArg::Infonce => TrainMode::InfoNce,
    }
}

fn cmd_train(common: ConfigArg, mode: TrainModeArg, steps: Option<u64>) -> Result<(), CliError> {
    let (mut config, base) = effective_config(&common)?;
    if let Some(steps) = steps {
        config.trainer.max_steps = Some(steps);
    }
    let mode = mode_of(mode);
    let ws = load_workspace(&config, base.as_deref())?;
    if config.paths.qa_train.is_empty() {
        return Err(CliError::validation("config: paths.qa_train is not set"));
    }
    let train_path = config.resolve(base.as_deref(), &config.paths.qa_train);
    let train_set = load_qa_file(&train_path, Some(&ws.corpus))?;
    if mode == TrainMode::InfoNce {
        if let Some(missing) = train_set.iter().find(|i| i.gt_doc_ids.is_empty()) {
            return Err(CliError::validation(format!(
                "contrastive training needs gt_doc_ids on every instance; {:?} has none",
                missing.id
            )));
        }
    }
    let val_set = if config.paths.qa_dev.is_empty() {
        None
    } else {
        Some(load_qa_file(
            &config.resolve(base.as_deref(), &config.paths.qa_dev),
            Some(&ws.corpus),
        )?)
    };

    let gateway = build_gateway(&config, base.as_deref())?;
    gateway
        .ping()
        .map_err(|e| CliError::gateway(format!("gateway unreachable: {e}")))?;
    let embedder = build_embedder(&config, base.as_deref(), ws.store.dim())?;
    let templates = load_templates(&config, base.as_deref())?;

    let ckpt_path = checkpoint_path(&config, base.as_deref());
    let ckpt_dir = ckpt_path.parent().expect("checkpoint path has a directory");
    std::fs::create_dir_all(ckpt_dir)
        .map_err(|e| CliError::new(EXIT_OTHER, format!("cannot create {}: {e}", ckpt_dir.display())))?;
    dump_provenance(&config, ckpt_dir);

    let expected_hash = config_hash(&config.trainer);
    let (initial, start_step) = if ckpt_path.is_file() {
        let (projection, meta) = load_checkpoint(&ckpt_path)
            .map_err(|e| CliError::validation(format!("checkpoint: {e}")))?;
        if meta.config_hash != expected_hash {
            return Err(CliError::validation(format!(
                "checkpoint {} was trained with a different trainer config",
                ckpt_path.display()
            )));
        }
        println!("resuming from step {}", meta.step);
        (projection, meta.step)
    } else {
        (QueryProjection::identity(ws.store.dim()), 0)
    };

    let mut orchestrator = Orchestrator::new(&ws.corpus, &ws.index, &gateway, &templates);
    orchestrator.max_tokens = config.gateway.max_tokens;
    orchestrator.gen_temperature = config.gateway.gen_temperature;
    let trainer = Trainer {
        orchestrator,
        embedder: embedder.as_ref(),
        cfg: config.trainer.clone(),
        score_mode: config.run.score_mode,
        reformulation: config.run.reformulation,
        length_normalize: config.run.length_normalize,
        seed: config.run.seed,
    };
    let outcome = trainer
        .train(initial, &train_set, val_set.as_deref(), mode, start_step)
        .map_err(train_error)?;

    append_loss_rows(ckpt_dir.join("loss.csv"), &outcome.rows)
        .map_err(|e| CliError::new(EXIT_OTHER, format!("loss csv: {e}")))?;
    save_checkpoint(
        &ckpt_path,
        &outcome.projection,
        &CheckpointMeta {
            step: outcome.steps_run,
            lr: outcome.final_lr,
            config_hash: expected_hash,
        },
    )
    .map_err(|e| CliError::new(EXIT_OTHER, format!("checkpoint: {e}")))?;
    println!(
        "trained to step {} ({} rows, {} aborted steps); checkpoint {}",
        outcome.steps_run,
        outcome.rows.len(),
        outcome.aborted_steps,
        ckpt_path.display()
    );
    Ok(())
}

fn train_error(e: rescore::trainer::TrainError) -> CliError {
    use rescore::trainer::TrainError;
    match &e {
        TrainError::Run(RunError::Lm(_)) | TrainError::Label(rescore::labeler::LabelError::Lm(_)) => {
            CliError::gateway(e.to_string())
        }
        TrainError::BadConfig(_) | TrainError::MissingGt { .. } => CliError::validation(e.to_string()),
        _ => CliError::new(EXIT_OTHER, e.to_string()),
    }
}

fn load_projection(
    config: &RunConfig,
    base: Option<&Path>,
    explicit: Option<PathBuf>,
    dim: usize,
) -> Result<QueryProjection, CliError> {
    let path = match explicit {
        Some(p) => {
            require_file(&p)?;
            p
        }
        None => {
            let default = checkpoint_path(config, base);
            if !default.is_file() {
                return Ok(QueryProjection::identity(dim));
            }
            default
        }
    };
    let (projection, _) =
        load_checkpoint(&path).map_err(|e| CliError::validation(format!("checkpoint: {e}")))?;
    if projection.dim() != dim {
        return Err(CliError::validation(format!(
            "checkpoint dim {} does not match embeddings dim {dim}",
            projection.dim()
        )));
    }
    Ok(projection)
}

fn cmd_answer(
    common: ConfigArg,
    question: Option<String>,
    qa: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let (config, base) = effective_config(&common)?;
    let ws = load_workspace(&config, base.as_deref())?;
    let instances: Vec<QaInstance> = match (question, qa) {
        (Some(text), None) => vec![QaInstance::new("adhoc-0", text, "unknown", [])],
        (None, Some(path)) => load_qa_file(&path, Some(&ws.corpus))?,
        (None, None) => {
            return Err(CliError::validation("provide --question or --qa"));
        }
        (Some(_), Some(_)) => unreachable!("clap enforces conflicts_with"),
    };

    let gateway = build_gateway(&config, base.as_deref())?;
    gateway
        .ping()
        .map_err(|e| CliError::gateway(format!("gateway unreachable: {e}")))?;
    let embedder = build_embedder(&config, base.as_deref(), ws.store.dim())?;
    let templates = load_templates(&config, base.as_deref())?;
    let projection = load_projection(&config, base.as_deref(), checkpoint, ws.store.dim())?;

    let mut orchestrator = Orchestrator::new(&ws.corpus, &ws.index, &gateway, &templates);
    orchestrator.max_tokens = config.gateway.max_tokens;
    orchestrator.gen_temperature = config.gateway.gen_temperature;

    let embed = |text: &str| -> Result<rescore::index::QueryVector, RunError> {
        let basev = embedder.embed(text)?;
        projection
            .apply(&basev)
            .map_err(|e| RunError::TraceFile(format!("projection failed: {e}")))
    };

    let run_one = |instance: &QaInstance| -> Result<RetrievalTrace, CliError> {
        orchestrator
            .run(instance, &config.trainer, config.run.reformulation, &embed)
            .map_err(|e| match &e {
                RunError::Lm(_) | RunError::Aborted { .. } => CliError::gateway(e.to_string()),
                _ => CliError::new(EXIT_OTHER, e.to_string()),
            })
    };

    let jobs = config.run.jobs.max(1);
    let mut traces: Vec<RetrievalTrace> = Vec::with_capacity(instances.len());
    if jobs == 1 {
        for instance in &instances {
            traces.push(run_one(instance)?);
        }
    } else {
        for chunk in instances.chunks(jobs) {
            let results: Vec<Result<RetrievalTrace, CliError>> = std::thread::scope(|scope| {
                let handles: Vec<_> = chunk.iter().map(|inst| scope.spawn(|| run_one(inst))).collect();
                handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
            });
            for result in results {
                traces.push(result?);
            }
        }
    }

    let out_path = out.unwrap_or_else(|| traces_path(&config, base.as_deref()));
    if let Some(dir) = out_path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)
                .map_err(|e| CliError::new(EXIT_OTHER, format!("cannot create {}: {e}", dir.display())))?;
            dump_provenance(&config, dir);
        }
    }
    append_traces(&out_path, &traces).map_err(|e| CliError::new(EXIT_OTHER, e.to_string()))?;
    for trace in &traces {
        println!("{}\t{}", trace.instance_id, trace.final_answer);
    }
    Ok(())
}

fn cmd_eval(
    common: ConfigArg,
    traces_file: PathBuf,
    qa_file: PathBuf,
    ks: Vec<u32>,
    report_out: Option<PathBuf>,
    curve_out: Option<PathBuf>,
    dataset: String,
) -> Result<(), CliError> {
    let (_config, _base) = effective_config(&common)?;
    require_file(&traces_file)?;
    require_file(&qa_file)?;
    let traces = load_traces(&traces_file).map_err(|e| CliError::validation(e.to_string()))?;
    let qa = load_qa_file(&qa_file, None)?;
    let ks = if ks.is_empty() { vec![2, 4, 8] } else { ks };

    let report = evaluate(&dataset, &traces, &qa, &ks).map_err(|e| match e {
        EvalError::UnknownInstance(_) => CliError::new(EXIT_EVAL_MISMATCH, e.to_string()),
        other => CliError::validation(other.to_string()),
    })?;
    print!("{}", format_report_table(&report));

    if let Some(path) = report_out {
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        std::fs::write(&path, json.as_bytes())
            .map_err(|e| CliError::new(EXIT_OTHER, format!("cannot write {}: {e}", path.display())))?;
    }
    if let Some(path) = curve_out {
        let curve = mhr_curve(&traces, &qa).map_err(|e| CliError::validation(e.to_string()))?;
        let mut text = String::from("iteration,fraction_all_found,mhr\n");
        for (iteration, fraction, mhr) in curve {
            text.push_str(&format!("{iteration},{fraction},{mhr}\n"));
        }
        std::fs::write(&path, text.as_bytes())
            .map_err(|e| CliError::new(EXIT_OTHER, format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(())
}

fn cmd_rerank_eval(
    common: ConfigArg,
    mode: Option<ScoreModeArg>,
    candidates: usize,
    qa: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    ks: Vec<u32>,
) -> Result<(), CliError> {
    let (config, base) = effective_config(&common)?;
    if candidates == 0 {
        return Err(CliError::validation("--candidates must be at least 1"));
    }
    let ws = load_workspace(&config, base.as_deref())?;
    let qa_path = match qa {
        Some(p) => p,
        None => {
            if config.paths.qa_dev.is_empty() {
                return Err(CliError::validation("provide --qa or set paths.qa_dev"));
            }
            config.resolve(base.as_deref(), &config.paths.qa_dev)
        }
    };
    let instances = load_qa_file(&qa_path, Some(&ws.corpus))?;
    let labeled: Vec<&QaInstance> = instances.iter().filter(|i| !i.gt_doc_ids.is_empty()).collect();
    if labeled.is_empty() {
        return Err(CliError::validation("no instances with gt_doc_ids to evaluate"));
    }

    let gateway = build_gateway(&config, base.as_deref())?;
    gateway
        .ping()
        .map_err(|e| CliError::gateway(format!("gateway unreachable: {e}")))?;
    let embedder = build_embedder(&config, base.as_deref(), ws.store.dim())?;
    let templates = load_templates(&config, base.as_deref())?;
    let projection = load_projection(&config, base.as_deref(), checkpoint, ws.store.dim())?;
    let labeler = Labeler::new(&gateway, &templates).with_length_normalize(config.run.length_normalize);
    let ks = if ks.is_empty() { vec![2, 4, 8] } else { ks };

    let modes: Vec<ScoreMode> = match mode {
        Some(m) => vec![m.into()],
        None => vec![
            ScoreMode::QuestionGivenDoc,
            ScoreMode::AnswerGivenQuestionDoc,
            ScoreMode::JointQuestionAnswer,
        ],
    };

    println!("candidates: {candidates}  instances: {}", labeled.len());
    let mut header = String::from("mode");
    for k in &ks {
        header.push_str(&format!("\tR@{k}"));
    }
    println!("{header}");
    for mode in modes {
        let mut sums: BTreeMap<u32, f64> = ks.iter().map(|&k| (k, 0.0)).collect();
        for instance in &labeled {
            let basev = embedder
                .embed(&instance.question)
                .map_err(|e| CliError::gateway(e.to_string()))?;
            let projected = projection
                .apply(&basev)
                .map_err(|e| CliError::validation(e.to_string()))?;
            let pool = ws
                .index
                .search_top_m_for_training(&projected, candidates)
                .map_err(|e| CliError::validation(e.to_string()))?;
            let order = labeler
                .rerank(&ws.corpus, &instance.question, instance.answer(), &pool, mode)
                .map_err(|e| CliError::gateway(e.to_string()))?;
            for (&k, slot) in sums.iter_mut() {
                let value = rescore::eval::recall_at_k(&order, &instance.gt_doc_ids, k as usize)
                    .map_err(|e| CliError::validation(e.to_string()))?;
                *slot += value;
            }
        }
        let label = match mode {
            ScoreMode::QuestionGivenDoc => "q",
            ScoreMode::AnswerGivenQuestionDoc => "a",
            ScoreMode::JointQuestionAnswer => "qa",
        };
        let mut row = label.to_string();
        for k in &ks {
            row.push_str(&format!("\t{:.4}", sums[k] / labeled.len() as f64));
        }
        println!("{row}");
    }
    Ok(())
}

fn cmd_dump_config(common: ConfigArg) -> Result<(), CliError> {
    let (config, _base) = effective_config(&common)?;
    print!("{}", config.to_toml());
    Ok(())
}
