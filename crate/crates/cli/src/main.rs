//! `vigor`: synthesize data, train, evaluate, parse orders and run
//! self-checks.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use vigor_core::dataset::{self, DatasetError, DatasetRecord, GroundingSample};
use vigor_core::eval::{self, BreakdownKey};
use vigor_core::orderparse::{CannedTransport, HttpTransport, LlmEndpointConfig, LlmParser, OrderParser, RuleParser};
use vigor_core::scene::{ClassVocab, Relation};
use vigor_core::synthgen::{default_vocab, generate_dataset, GenConfig, Style};
use vigor_core::trainer::{self, TrainConfig, TrainError};

/// Tolerance for `vigor gradcheck`.
const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "vigor", version, about = "Order-aware 3D visual grounding at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ParserKind {
    Rule,
    Llm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum StyleArg {
    Template,
    Natural,
}

#[derive(clap::Args)]
struct LlmArgs {
    /// Model name sent to the chat-completions endpoint.
    #[arg(long, default_value = "gpt-3.5-turbo")]
    llm_model: String,
    /// Replay responses from a JSONL transcript instead of calling the
    /// endpoint in VIGOR_LLM_ENDPOINT.
    #[arg(long)]
    llm_canned: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset, one JSON record per line.
    Synth {
        #[arg(long)]
        scenes: usize,
        /// Proposal count range, MIN:MAX.
        #[arg(long, default_value = "6:10", value_parser = parse_range)]
        proposals: (usize, usize),
        #[arg(long, default_value_t = 4)]
        order_len: usize,
        #[arg(long, default_value = "farthest")]
        relation: Relation,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "template")]
        style: StyleArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Warm up on synthetic samples, then train on a dataset.
    Train {
        #[arg(long)]
        warmup_steps: Option<usize>,
        #[arg(long)]
        main_data: Option<PathBuf>,
        #[arg(long)]
        main_steps: Option<usize>,
        #[arg(long, value_enum, default_value = "rule")]
        parser: ParserKind,
        /// TOML file with training settings; flags take precedence.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        llm: LlmArgs,
    },
    /// Grounding accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated: order_length, distractors.
        #[arg(long, value_delimiter = ',')]
        breakdown: Vec<BreakdownKey>,
        /// Report path; stdout when absent.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "rule")]
        parser: ParserKind,
        /// Also write per-block feature responses, one JSON line per sample.
        #[arg(long)]
        responses: Option<PathBuf>,
        #[command(flatten)]
        llm: LlmArgs,
    },
    /// Print the referential order of a description.
    Parse {
        #[arg(long)]
        desc: String,
        #[arg(long, value_enum, default_value = "rule")]
        parser: ParserKind,
        /// Class names as a JSON array or one per line.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[command(flatten)]
        llm: LlmArgs,
    },
    /// Finite-difference check of every model parameter.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Re-resolve and re-parse every record of a dataset.
    Verify {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(':').ok_or("expected MIN:MAX")?;
    let lo = a.trim().parse().map_err(|e| format!("{a:?}: {e}"))?;
    let hi = b.trim().parse().map_err(|e| format!("{b:?}: {e}"))?;
    if lo > hi {
        return Err(format!("{lo} > {hi}"));
    }
    Ok((lo, hi))
}

/// Failure classes, each with its own exit code.
#[derive(Debug)]
enum Failure {
    Validation(String),
    Usage(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Io(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Validation(m) | Failure::Usage(m) | Failure::Io(m) => m,
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

fn dataset_err(path: &Path, e: DatasetError) -> Failure {
    match e {
        DatasetError::Io(e) => io_err(path, e),
        other => Failure::Validation(format!("{}: {other}", path.display())),
    }
}

fn train_err(e: TrainError) -> Failure {
    match e {
        TrainError::Config(m) => Failure::Usage(m),
        other => Failure::Validation(other.to_string()),
    }
}

fn load_vocab(path: Option<&Path>) -> Result<Arc<ClassVocab>, Failure> {
    let Some(path) = path else {
        return Ok(default_vocab());
    };
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let names: Vec<String> = if text.trim_start().starts_with('[') {
        serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?
    } else {
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect()
    };
    ClassVocab::new(names)
        .map(Arc::new)
        .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn make_parser(kind: ParserKind, llm: &LlmArgs) -> Result<Box<dyn OrderParser>, Failure> {
    match kind {
        ParserKind::Rule => Ok(Box::new(RuleParser)),
        ParserKind::Llm => {
            if let Some(path) = &llm.llm_canned {
                let transport = CannedTransport::from_path(path).map_err(|e| io_err(path, e))?;
                let config = LlmEndpointConfig::new("canned", llm.llm_model.clone());
                return Ok(Box::new(LlmParser { transport, config }));
            }
            let config =
                LlmEndpointConfig::from_env(llm.llm_model.clone()).map_err(|e| Failure::Usage(e.to_string()))?;
            let transport = HttpTransport::new(&config).map_err(|e| Failure::Usage(e.to_string()))?;
            Ok(Box::new(LlmParser { transport, config }))
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).expect("plain data");
    match path {
        Some(p) => std::fs::write(p, text + "\n").map_err(|e| io_err(p, e)),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn cmd_synth(
    scenes: usize,
    proposals: (usize, usize),
    order_len: usize,
    relation: Relation,
    seed: u64,
    style: StyleArg,
    out: &Path,
) -> Result<(), Failure> {
    let style = match style {
        StyleArg::Template => Style::Template,
        StyleArg::Natural => Style::Natural,
    };
    let cfg = GenConfig {
        num_scenes: scenes,
        min_proposals: proposals.0,
        max_proposals: proposals.1,
        order_len,
        relation,
        seed,
        style,
        ..GenConfig::default()
    };
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let mut w = create(out)?;
    for sample in generate_dataset(&cfg) {
        let sample = sample.map_err(|e| Failure::Validation(e.to_string()))?;
        let rec = DatasetRecord::from_sample(&sample, style == Style::Template);
        dataset::write_record(&mut w, &rec).map_err(|e| dataset_err(out, e))?;
    }
    w.flush().map_err(|e| io_err(out, e))?;
    log::info!("wrote {scenes} records to {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    warmup_steps: Option<usize>,
    main_data: Option<&Path>,
    main_steps: Option<usize>,
    parser: ParserKind,
    config: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
    llm: &LlmArgs,
) -> Result<(), Failure> {
    let mut cfg = match config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            toml::from_str::<TrainConfig>(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = warmup_steps {
        cfg.warmup_steps = v;
    }
    if let Some(v) = main_steps {
        cfg.main_steps = v;
    }
    if let Some(v) = seed {
        cfg.seed = v;
    }
    if main_data.is_none() {
        cfg.main_steps = 0;
    }
    let vocab = default_vocab();
    // Read and parse the main-stage data before spending time on warm-up.
    let prepared = match main_data {
        Some(path) => {
            let samples = dataset::load_samples(path, &vocab).map_err(|e| dataset_err(path, e))?;
            let parser = make_parser(parser, llm)?;
            Some(trainer::prepare_main(&samples, parser.as_ref(), &cfg).map_err(train_err)?)
        }
        None => None,
    };
    let mut t = trainer::new_trainer(&cfg, vocab.clone()).map_err(train_err)?;

    let gen = GenConfig {
        order_len: cfg.blocks,
        points_per_proposal: cfg.points_per_proposal,
        seed: cfg.seed,
        vocab: vocab.clone(),
        ..GenConfig::default()
    };
    let history = t.warmup_stage(&gen).map_err(train_err)?;
    if let Some(last) = history.last() {
        log::info!(
            "warm-up finished after {} steps, last loss {:.4}",
            history.len(),
            last.total
        );
    }
    if let Some(prepared) = &prepared {
        let history = t.main_stage(prepared).map_err(train_err)?;
        if let Some(last) = history.last() {
            log::info!(
                "main stage finished after {} steps, last loss {:.4}",
                history.len(),
                last.total
            );
        }
    }
    trainer::save_checkpoint(&t, out).map_err(|e| io_err(out, e))?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    data: &Path,
    ckpt: &Path,
    breakdown: &[BreakdownKey],
    report: Option<&Path>,
    parser: ParserKind,
    responses: Option<&Path>,
    llm: &LlmArgs,
) -> Result<(), Failure> {
    let t = trainer::load_checkpoint(ckpt).map_err(|e| match e {
        trainer::CheckpointError::Io(e) => io_err(ckpt, e),
        other => Failure::Validation(format!("{}: {other}", ckpt.display())),
    })?;
    let vocab = t.model.classes().clone();
    let samples: Vec<GroundingSample> = dataset::load_samples(data, &vocab).map_err(|e| dataset_err(data, e))?;
    let parser = make_parser(parser, llm)?;
    let prepared = trainer::prepare_main(&samples, parser.as_ref(), &t.config).map_err(train_err)?;
    let mut rep = eval::accuracy(&t.model, &prepared, breakdown).map_err(|e| Failure::Validation(e.to_string()))?;
    rep.config = serde_json::json!({
        "data": data.display().to_string(),
        "checkpoint": ckpt.display().to_string(),
        "model": t.model.config(),
        "warmup_steps": t.warmup_done,
        "main_steps": t.main_done,
    });
    write_json(report, &rep)?;
    if let Some(path) = responses {
        let mut w = create(path)?;
        for s in &prepared {
            let r = eval::dump_block_responses(&t.model, s).map_err(|e| Failure::Validation(e.to_string()))?;
            let line = serde_json::json!({"scene_id": s.scene.scene_id, "target_id": s.target_id, "responses": r});
            writeln!(w, "{line}").map_err(|e| io_err(path, e))?;
        }
        w.flush().map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

fn cmd_parse(desc: &str, parser: ParserKind, vocab: Option<&Path>, llm: &LlmArgs) -> Result<(), Failure> {
    let vocab = load_vocab(vocab)?;
    let parser = make_parser(parser, llm)?;
    let order = parser
        .parse(desc, &vocab)
        .map_err(|e| Failure::Validation(e.to_string()))?;
    println!("{}", order.names.join("\u{2192}"));
    Ok(())
}

fn cmd_gradcheck(seed: u64) -> Result<(), Failure> {
    let report = trainer::model_grad_check(seed).map_err(train_err)?;
    if let Some(w) = report.worst() {
        println!(
            "max relative error {:.3e} at {}[{}]: analytic {:.6e}, numeric {:.6e}",
            report.max_rel_err, w.name, w.worst_index, w.analytic, w.numeric
        );
    }
    if let Some(f) = &report.failure {
        return Err(Failure::Validation(f.clone()));
    }
    if !report.passed(GRADCHECK_TOL) {
        return Err(Failure::Validation(format!(
            "max relative error {:.3e} exceeds {GRADCHECK_TOL:e}",
            report.max_rel_err
        )));
    }
    println!("ok: {} parameter tensors within {GRADCHECK_TOL:e}", report.params.len());
    Ok(())
}

fn cmd_verify(data: &Path, vocab: Option<&Path>) -> Result<(), Failure> {
    let vocab = load_vocab(vocab)?;
    let records = dataset::read_path(data).map_err(|e| dataset_err(data, e))?;
    let mut failures = 0;
    for (i, rec) in records.iter().enumerate() {
        let result = rec
            .to_sample(&vocab)
            .map_err(|e| e.to_string())
            .and_then(|s| dataset::verify_sample(&s).map_err(|e| e.to_string()));
        if let Err(e) = result {
            failures += 1;
            eprintln!("record {} ({}): {e}", i + 1, rec.scene_id);
        }
    }
    let agree = records.len() - failures;
    println!("{agree}/{} records verified", records.len());
    if failures > 0 {
        return Err(Failure::Validation(format!("{failures} records failed verification")));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Synth {
            scenes,
            proposals,
            order_len,
            relation,
            seed,
            style,
            out,
        } => cmd_synth(scenes, proposals, order_len, relation, seed, style, &out),
        Command::Train {
            warmup_steps,
            main_data,
            main_steps,
            parser,
            config,
            seed,
            out,
            llm,
        } => cmd_train(
            warmup_steps,
            main_data.as_deref(),
            main_steps,
            parser,
            config.as_deref(),
            seed,
            &out,
            &llm,
        ),
        Command::Eval {
            data,
            ckpt,
            breakdown,
            report,
            parser,
            responses,
            llm,
        } => cmd_eval(
            &data,
            &ckpt,
            &breakdown,
            report.as_deref(),
            parser,
            responses.as_deref(),
            &llm,
        ),
        Command::Parse {
            desc,
            parser,
            vocab,
            llm,
        } => cmd_parse(&desc, parser, vocab.as_deref(), &llm),
        Command::Gradcheck { seed } => cmd_gradcheck(seed),
        Command::Verify { data, vocab } => cmd_verify(&data, vocab.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
