//! Command-line front end: corpus analysis, data generation, training,
//! evaluation, gradient checking, and the ablation sweep.
//!
//! Every subcommand that takes `--out` writes only inside that directory
//! and drops a `resolved_config.json` beside its outputs. Errors go to
//! stderr as one-line JSON. Verbosity is controlled by `LAYTOKEN_LOG`.

use crate::ablate::{run_ablation, AblationRow};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::doc::{generate_synthetic_corpus, Corpus, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::formats::{
    self, analytic_t_ratio, count_overhead, flops_proxy, SerializationFormat,
    REFERENCE_AVG_TEXT_TOKENS, REFERENCE_OVERHEAD_ROWS,
};
use crate::layout::PositionScheme;
use crate::nn::{grad_check, Model, ModelConfig};
use crate::ntlp::{ntlp_loss, ntlp_loss_train, SequenceMode};
use crate::train::{prepare_sequence, train, TrainConfig};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Merged run configuration: model architecture, training switches, and
/// decoding budget. Loaded from `--config` JSON; flags override fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: usize,
}

fn default_max_new_tokens() -> usize {
    32
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            max_new_tokens: default_max_new_tokens(),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "laytoken",
    version,
    about = "Layout-token language modeling lab: serialization analysis, synthetic data, training, evaluation, ablations"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Measure per-format layout overhead on a corpus, or print the
    /// closed-form text-utilization table.
    Analyze(AnalyzeArgs),
    /// Generate a synthetic layout-dependent key-value corpus.
    GenData(GenDataArgs),
    /// Render a corpus in one of the string serialization formats.
    Serialize(SerializeArgs),
    /// Train a model on a corpus with QA pairs.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a corpus with QA pairs.
    Eval(EvalArgs),
    /// Check reverse-mode gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Run the four-row mechanism ablation on one corpus.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run-config file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; all files are written beneath it.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Corpus JSON (array of documents in the OCR schema).
    corpus: Option<PathBuf>,
    /// Format to analyze, or "all".
    #[arg(long, default_value = "all")]
    format: String,
    /// Position window the reports are computed against.
    #[arg(long, default_value_t = 2048)]
    window: usize,
    /// Also print the closed-form T/(T+E) table for this average segment
    /// length.
    #[arg(long = "analytic-T")]
    analytic_t: Option<usize>,
    #[command(flatten)]
    common: ConfigArgs,
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of documents.
    #[arg(long)]
    docs: usize,
    /// Segments per document, "N" or "LO..HI".
    #[arg(long, default_value = "8..12")]
    segments: String,
    /// Key/value pairs per document, "N" or "LO..HI".
    #[arg(long, default_value = "2..3")]
    keys: String,
    #[arg(long, default_value_t = 0.0)]
    distractor_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for corpus.json and qa.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SerializeArgs {
    corpus: PathBuf,
    #[arg(long)]
    format: String,
    #[command(flatten)]
    common: ConfigArgs,
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus JSON.
    #[arg(long)]
    corpus: PathBuf,
    /// QA sidecar JSON.
    #[arg(long)]
    qa: PathBuf,
    /// Output directory (checkpoint, history, resolved config).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    mse_weight: Option<f64>,
    /// Position scheme: shared-first | extra-ids | text-only.
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long)]
    layout_tokenizer: Option<bool>,
    #[arg(long)]
    ntlp: Option<bool>,
    #[arg(long)]
    layout_format: Option<String>,
    #[arg(long)]
    position_budget: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    max_context: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    qa: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    /// Override the position scheme stored in the checkpoint.
    #[arg(long)]
    scheme: Option<String>,
    #[command(flatten)]
    common: ConfigArgs,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 50)]
    probes: usize,
    #[arg(long, default_value_t = 1e-5)]
    epsilon: f64,
    /// Tolerance on the max relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[command(flatten)]
    common: ConfigArgs,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    qa: PathBuf,
    /// Held-out evaluation corpus; defaults to the training corpus.
    #[arg(long)]
    eval_corpus: Option<PathBuf>,
    #[arg(long)]
    eval_qa: Option<PathBuf>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    #[command(flatten)]
    common: ConfigArgs,
}

/// Entry point used by the binary; returns the process exit code.
pub fn main_entry() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::new().filter("LAYTOKEN_LOG")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            let msg = serde_json::json!({ "error": e.to_string(), "kind": e.kind() });
            eprintln!("{msg}");
            1
        }
    }
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Analyze(args) => cmd_analyze(args),
        Command::GenData(args) => cmd_gen_data(args),
        Command::Serialize(args) => cmd_serialize(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Ablate(args) => cmd_ablate(args),
    }
}

fn load_run_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let raw = std::fs::read(p).map_err(|e| Error::io(p.display().to_string(), e))?;
            serde_json::from_slice(&raw).map_err(|e| Error::from_json(&e, &raw))
        }
    }
}

fn ensure_out_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))
}

fn write_json<T: Serialize>(out: &Path, name: &str, value: &T) -> Result<()> {
    let path = out.join(name);
    let json = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(&path, json).map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_resolved_config(out: &Path, config: &RunConfig) -> Result<()> {
    write_json(out, "resolved_config.json", config)
}

fn parse_formats(name: &str) -> Result<Vec<SerializationFormat>> {
    if name == "all" {
        Ok(SerializationFormat::ALL.to_vec())
    } else {
        Ok(vec![name.parse()?])
    }
}

/// Parse "N" or "LO..HI" into an inclusive range pair.
fn parse_range(s: &str) -> Result<(usize, usize)> {
    if let Some((lo, hi)) = s.split_once("..") {
        let lo = lo.trim().parse::<usize>();
        let hi = hi.trim().parse::<usize>();
        match (lo, hi) {
            (Ok(lo), Ok(hi)) => return Ok((lo, hi)),
            _ => {}
        }
    } else if let Ok(n) = s.trim().parse::<usize>() {
        return Ok((n, n));
    }
    Err(Error::Argument(format!(
        "range {s:?} must be \"N\" or \"LO..HI\""
    )))
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<i32> {
    let run_config = load_run_config(&args.common.config)?;
    let formats = parse_formats(&args.format)?;

    if let Some(t) = args.analytic_t {
        println!("label\textra_ids\tanalytic_t_ratio_pct");
        for (label, extra, _) in REFERENCE_OVERHEAD_ROWS {
            println!("{label}\t{extra}\t{:.2}", analytic_t_ratio(t, extra) * 100.0);
        }
        if t == REFERENCE_AVG_TEXT_TOKENS {
            log::info!("analytic table matches the published reference percentages");
        }
    }

    let Some(corpus_path) = args.corpus.as_ref() else {
        if args.analytic_t.is_none() {
            return Err(Error::Argument(
                "analyze needs a corpus path and/or --analytic-T".into(),
            ));
        }
        return Ok(0);
    };

    let corpus = Corpus::load(corpus_path, None)?;
    let mut reports = Vec::new();
    println!("format\tsegments\ttext_tokens\textra_ids\tt_ratio\tstream_tokens\tflops_proxy");
    for format in formats {
        let mut segments = 0usize;
        let mut text_tokens = 0usize;
        let mut extra_ids = 0usize;
        let mut stream_tokens = 0usize;
        let mut macs = 0u64;
        for doc in &corpus.documents {
            let report = count_overhead(doc, format, args.window, args.analytic_t)?;
            segments += report.per_segment_extra_ids.len();
            text_tokens += report.text_token_count;
            extra_ids += report.total_extra_ids;
            stream_tokens += report.stream_tokens;
            macs += flops_proxy(&run_config.model, report.stream_tokens.max(1))?.macs;
            reports.push(report);
        }
        let t_ratio = if text_tokens == 0 {
            1.0
        } else {
            text_tokens as f64 / (text_tokens + extra_ids) as f64
        };
        println!(
            "{format}\t{segments}\t{text_tokens}\t{extra_ids}\t{t_ratio:.4}\t{stream_tokens}\t{macs}"
        );
    }
    if let Some(out) = &args.common.out {
        ensure_out_dir(out)?;
        write_json(out, "analysis.json", &reports)?;
        write_resolved_config(out, &run_config)?;
    }
    Ok(0)
}

fn cmd_gen_data(args: GenDataArgs) -> Result<i32> {
    let spec = SyntheticSpec::new(
        args.docs,
        parse_range(&args.segments)?,
        parse_range(&args.keys)?,
        args.seed,
        args.distractor_rate,
    )?;
    let corpus = generate_synthetic_corpus(&spec)?;
    ensure_out_dir(&args.out)?;
    corpus.save(&args.out.join("corpus.json"), &args.out.join("qa.json"))?;
    write_json(&args.out, "spec.json", &spec)?;
    log::info!(
        "wrote {} documents, {} qa pairs to {}",
        corpus.documents.len(),
        corpus.qa.len(),
        args.out.display()
    );
    Ok(0)
}

fn cmd_serialize(args: SerializeArgs) -> Result<i32> {
    let format: SerializationFormat = args.format.parse()?;
    let corpus = Corpus::load(&args.corpus, None)?;
    let mut rendered_docs = Vec::new();
    for (di, doc) in corpus.documents.iter().enumerate() {
        let mut lines = Vec::new();
        for (seg, _, _) in doc.segments() {
            let line = formats::render(&seg.text, seg.bbox, format)?;
            println!("{di}\t{line}");
            lines.push(line);
        }
        rendered_docs.push(lines);
    }
    if let Some(out) = &args.common.out {
        ensure_out_dir(out)?;
        write_json(out, "serialized.json", &rendered_docs)?;
    }
    Ok(0)
}

#[allow(clippy::field_reassign_with_default)]
fn apply_train_overrides(run: &mut RunConfig, args: &TrainArgs) -> Result<()> {
    if let Some(v) = args.seed {
        run.train.seed = v;
    }
    if let Some(v) = args.lr {
        run.train.learning_rate = v;
    }
    if let Some(v) = args.epochs {
        run.train.epochs = v;
    }
    if let Some(v) = args.pretrain_epochs {
        run.train.pretrain_epochs = v;
    }
    if let Some(v) = args.batch_size {
        run.train.batch_size = v;
    }
    if let Some(v) = args.mse_weight {
        run.train.mse_weight = v;
    }
    if let Some(s) = &args.scheme {
        run.train.scheme = s.parse::<PositionScheme>()?;
    }
    if let Some(v) = args.layout_tokenizer {
        run.train.use_layout_tokenizer = v;
    }
    if let Some(v) = args.ntlp {
        run.train.use_ntlp = v;
    }
    if let Some(s) = &args.layout_format {
        run.train.layout_format = s.parse()?;
    }
    if let Some(v) = args.position_budget {
        run.train.position_budget = v;
    }
    if let Some(v) = args.d_model {
        run.model.d_model = v;
        run.model.d_ff = 4 * v;
    }
    if let Some(v) = args.n_layers {
        run.model.n_layers = v;
    }
    if let Some(v) = args.n_heads {
        run.model.n_heads = v;
    }
    if let Some(v) = args.max_context {
        run.model.max_context = v;
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<i32> {
    let mut run_config = load_run_config(&args.config)?;
    apply_train_overrides(&mut run_config, &args)?;
    run_config.model.validate()?;
    run_config.train.validate()?;

    let corpus = Corpus::load(&args.corpus, Some(&args.qa))?;
    let output = train(&corpus, &run_config.model, &run_config.train)?;
    if run_config.train.learning_rate == 0.0 {
        log::warn!("learning rate is 0; parameters are unchanged from initialization");
    }

    ensure_out_dir(&args.out)?;
    write_resolved_config(&args.out, &run_config)?;
    let ckpt = args.out.join("model.ckpt");
    save_checkpoint(&output.model, &run_config.train, output.history.len(), &ckpt)?;
    let mut lines = String::new();
    for step in &output.history {
        lines.push_str(&serde_json::to_string(step).expect("step log"));
        lines.push('\n');
    }
    let history_path = args.out.join("history.jsonl");
    std::fs::write(&history_path, lines)
        .map_err(|e| Error::io(history_path.display().to_string(), e))?;
    if let Some(last) = output.history.last() {
        println!("final step {}: total {:.6} ce {:.6} mse {:.6}", last.step, last.total, last.ce, last.mse);
    }
    println!("checkpoint: {}", ckpt.display());
    Ok(0)
}

fn cmd_eval(args: EvalArgs) -> Result<i32> {
    let (model, manifest) = load_checkpoint(&args.checkpoint)?;
    let mut train_config = manifest.train_config.clone();
    if let Some(s) = &args.scheme {
        train_config.scheme = s.parse()?;
    }
    let run_config = load_run_config(&args.common.config)?;
    let max_new = args.max_new_tokens.unwrap_or(run_config.max_new_tokens);
    let corpus = Corpus::load(&args.corpus, Some(&args.qa))?;
    let report = evaluate(&model, &corpus, &train_config, max_new)?;
    println!(
        "anls_mean\t{:.4}\nexact_match\t{:.4}\nquestions\t{}",
        report.anls_mean,
        report.exact_match,
        report.per_question.len()
    );
    if let Some(out) = &args.common.out {
        ensure_out_dir(out)?;
        write_json(out, "eval_report.json", &report)?;
        write_resolved_config(
            out,
            &RunConfig {
                model: model.config.clone(),
                train: train_config,
                max_new_tokens: max_new,
            },
        )?;
    } else {
        println!("{}", serde_json::to_string_pretty(&report).expect("report"));
    }
    Ok(0)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<i32> {
    let run_config = load_run_config(&args.common.config)?;
    let seed = args.common.seed.unwrap_or(run_config.train.seed);
    let mut model = Model::new(run_config.model.clone(), seed)?;

    // A small mixed text/layout stream exercises every parameter group.
    let spec = SyntheticSpec::new(2, (6, 6), (2, 2), seed.wrapping_add(1), 1.0)?;
    let corpus = generate_synthetic_corpus(&spec)?;
    let seq = prepare_sequence(
        &corpus.documents[0],
        SequenceMode::Pretrain,
        &run_config.model,
        &run_config.train,
    )?;
    let mse_weight = run_config.train.mse_weight;
    let report = grad_check(
        &mut model,
        |m| ntlp_loss(m, &seq, mse_weight).map(|l| l.total),
        |m| {
            m.zero_grad();
            ntlp_loss_train(m, &seq, mse_weight).map(|l| l.total)
        },
        args.probes,
        args.epsilon,
        seed.wrapping_add(2),
    )?;
    println!(
        "max relative error: {:.3e} over {} probes (epsilon {:.1e})",
        report.max_rel_err,
        report.probes.len(),
        args.epsilon
    );
    if let Some(out) = &args.common.out {
        ensure_out_dir(out)?;
        write_json(out, "gradcheck.json", &report)?;
        write_resolved_config(out, &run_config)?;
    }
    if args.probes > 0 && report.max_rel_err >= args.tolerance {
        log::error!(
            "gradient check failed: {:.3e} >= {:.1e}",
            report.max_rel_err,
            args.tolerance
        );
        return Ok(2);
    }
    Ok(0)
}

fn cmd_ablate(args: AblateArgs) -> Result<i32> {
    let mut run_config = load_run_config(&args.common.config)?;
    if let Some(seed) = args.common.seed {
        run_config.train.seed = seed;
    }
    let max_new = args.max_new_tokens.unwrap_or(run_config.max_new_tokens);
    let train_corpus = Corpus::load(&args.corpus, Some(&args.qa))?;
    let eval_corpus = match (&args.eval_corpus, &args.eval_qa) {
        (Some(c), Some(q)) => Corpus::load(c, Some(q))?,
        (None, None) => train_corpus.clone(),
        _ => {
            return Err(Error::Argument(
                "--eval-corpus and --eval-qa must be given together".into(),
            ))
        }
    };
    let rows = run_ablation(
        &train_corpus,
        &eval_corpus,
        &run_config.model,
        &run_config.train,
        max_new,
    )?;
    print_ablation_table(&rows);
    if let Some(out) = &args.common.out {
        ensure_out_dir(out)?;
        write_json(out, "ablation.json", &rows)?;
        write_resolved_config(out, &run_config)?;
    }
    Ok(0)
}

fn print_ablation_table(rows: &[AblationRow]) {
    println!("row\tlayout_tokenizer\tlay_pos_id\tntlp\tanls_mean\texact_match");
    for r in rows {
        let mark = |b: bool| if b { "x" } else { "" };
        println!(
            "{}\t{}\t{}\t{}\t{:.4}\t{:.4}",
            r.row,
            mark(r.layout_tokenizer),
            mark(r.lay_pos_id),
            mark(r.ntlp),
            r.anls_mean,
            r.exact_match
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn range_parsing() {
        assert_eq!(parse_range("6").unwrap(), (6, 6));
        assert_eq!(parse_range("4..9").unwrap(), (4, 9));
        assert!(parse_range("x..y").is_err());
        assert!(parse_range("").is_err());
    }

    #[test]
    fn run_config_defaults_from_empty_json() {
        let rc: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(rc.model.d_model, 64);
        assert_eq!(rc.train.epochs, 3);
        assert_eq!(rc.max_new_tokens, 32);
    }

    #[test]
    fn cli_parses_the_documented_subcommands() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
