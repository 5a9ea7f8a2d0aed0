//! Command-line surface: preprocessing, training, inference, evaluation,
//! and the verification suites.

use crate::data::{self, LoadConfig, Tokenizer, Vocab, Vocabs};
use crate::decode::{self, GuidanceMode};
use crate::metrics::{self, EvalPair, NtedDenominator};
use crate::model::{ExpanderModel, GeneratorModel, ModelConfig};
use crate::oracle;
use crate::train::{self, TrainConfig};
use crate::tree;
use crate::verify;
use clap::{Args, Parser, Subcommand};
use std::error::Error;
use std::path::{Path, PathBuf};

type CliResult<T> = Result<T, Box<dyn Error>>;

#[derive(Parser, Debug)]
#[command(
    name = "syngen",
    version,
    about = "Syntax-guided paraphrase generation: expand a template parse to a full tree, then generate text under its guidance"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Seed for initialization, shuffling, and anything else random.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,

    /// Flat key=value file overriding model/training hyperparameters.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Path-attention masking: keys-and-queries or keys-only.
    #[arg(long, global = true, default_value = "keys-and-queries")]
    path_mask_mode: String,

    /// Path-attention averaging: uniform or per-node.
    #[arg(long, global = true, default_value = "uniform")]
    path_average: String,

    /// N-TED denominator: reference, hypothesis, or max.
    #[arg(long, global = true, default_value = "reference")]
    nted_denominator: String,

    /// Template depth (top levels of the target parse).
    #[arg(long, global = true, default_value_t = 3)]
    template_depth: u32,

    /// Maximum text/syntax sequence length.
    #[arg(long, global = true, default_value_t = 50)]
    max_len: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load, filter, and tokenize a corpus; build vocabularies.
    Preprocess(PreprocessArgs),
    /// Train the syntax expander.
    TrainExpander(TrainArgs),
    /// Train the guided text generator.
    TrainGenerator(TrainGeneratorArgs),
    /// Expand a template parse into a full parse.
    Expand(ExpandArgs),
    /// Generate text from a full parse and source text.
    Generate(GenerateArgs),
    /// Run the full pipeline: expand the template, then generate.
    Paraphrase(ParaphraseArgs),
    /// Evaluate a generator (optionally with an expander) over a corpus.
    Evaluate(EvaluateArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck,
    /// Run the oracle-equivalence property suites.
    Selftest(SelftestArgs),
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    /// Corpus file: one JSON object per line with src/tgt/src_parse/tgt_parse.
    #[arg(long)]
    input: PathBuf,
    /// Output directory for vocabularies, the filter report, and the
    /// filtered corpus.
    #[arg(long)]
    out_dir: PathBuf,
    /// Tokenization mode: whitespace or bpe.
    #[arg(long, default_value = "whitespace")]
    tokenizer: String,
    /// Target subword vocabulary size (bpe mode).
    #[arg(long, default_value_t = 16000)]
    bpe_vocab_size: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Filtered corpus (JSONL).
    #[arg(long)]
    data: PathBuf,
    /// Directory holding text/node/level vocabularies (from preprocess).
    #[arg(long)]
    vocab_dir: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Training log output (JSONL), one record per step.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Write intermediate checkpoints every N steps.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Stop early at this full-corpus teacher-forced accuracy.
    #[arg(long)]
    target_accuracy: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainGeneratorArgs {
    #[command(flatten)]
    common: TrainArgs,
    /// Training guidance: target (full parses) or none-syntax (root stubs).
    #[arg(long, default_value = "target")]
    guidance: String,
    /// Replace path attention with plain self-attention in the syntax
    /// encoder.
    #[arg(long)]
    no_path_attention: bool,
}

#[derive(Args, Debug)]
struct ExpandArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab_dir: PathBuf,
    /// Source parse, bracketed.
    #[arg(long)]
    src_parse: String,
    /// Template parse, bracketed.
    #[arg(long)]
    template: String,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab_dir: PathBuf,
    /// Guidance parse, bracketed.
    #[arg(long)]
    parse: String,
    /// Source sentence.
    #[arg(long)]
    src: String,
}

#[derive(Args, Debug)]
struct ParaphraseArgs {
    #[arg(long)]
    expander: PathBuf,
    #[arg(long)]
    generator: PathBuf,
    #[arg(long)]
    vocab_dir: PathBuf,
    /// Source sentence.
    #[arg(long)]
    src: String,
    /// Source parse, bracketed.
    #[arg(long)]
    src_parse: String,
    /// Template parse, bracketed.
    #[arg(long)]
    template: String,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    generator: PathBuf,
    /// Needed for --guidance expanded.
    #[arg(long)]
    expander: Option<PathBuf>,
    #[arg(long)]
    vocab_dir: PathBuf,
    /// Test corpus (JSONL).
    #[arg(long)]
    data: PathBuf,
    /// target | expanded | template-direct | none-syntax | none-text
    #[arg(long, default_value = "target")]
    guidance: String,
    /// Write the report here instead of stdout.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Evaluate with path attention degraded to plain self-attention.
    #[arg(long)]
    no_path_attention: bool,
}

#[derive(Args, Debug)]
struct SelftestArgs {
    /// Run the exhaustive versions (all 5-node tree pairs, 10k triples,
    /// 100 locality trees).
    #[arg(long)]
    full: bool,
}

/// Parse arguments and dispatch; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(0) => 0,
        Ok(_) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Ok(n) carries the number of failed checks for gradcheck/selftest.
fn dispatch(cli: Cli) -> CliResult<usize> {
    let globals = Globals::from_cli(&cli)?;
    match cli.command {
        Command::Preprocess(args) => cmd_preprocess(&globals, args).map(|()| 0),
        Command::TrainExpander(args) => cmd_train_expander(&globals, args).map(|()| 0),
        Command::TrainGenerator(args) => cmd_train_generator(&globals, args).map(|()| 0),
        Command::Expand(args) => cmd_expand(&globals, args).map(|()| 0),
        Command::Generate(args) => cmd_generate(&globals, args).map(|()| 0),
        Command::Paraphrase(args) => cmd_paraphrase(&globals, args).map(|()| 0),
        Command::Evaluate(args) => cmd_evaluate(&globals, args).map(|()| 0),
        Command::Gradcheck => cmd_gradcheck(),
        Command::Selftest(args) => cmd_selftest(args),
    }
}

struct Globals {
    seed: u64,
    overrides: Vec<(String, String)>,
    path_mask_mode: crate::attention::PathMaskMode,
    path_average: crate::attention::PathAverage,
    nted_denominator: NtedDenominator,
    template_depth: u32,
    max_len: usize,
}

impl Globals {
    fn from_cli(cli: &Cli) -> CliResult<Self> {
        let path_mask_mode = match cli.path_mask_mode.as_str() {
            "keys-and-queries" => crate::attention::PathMaskMode::KeysAndQueries,
            "keys-only" => crate::attention::PathMaskMode::KeysOnly,
            other => return Err(format!("unknown --path-mask-mode `{other}`").into()),
        };
        let path_average = match cli.path_average.as_str() {
            "uniform" => crate::attention::PathAverage::Uniform,
            "per-node" => crate::attention::PathAverage::PerNode,
            other => return Err(format!("unknown --path-average `{other}`").into()),
        };
        let nted_denominator = NtedDenominator::parse(&cli.nted_denominator)?;
        let overrides = match &cli.config {
            Some(path) => parse_config_file(path)?,
            None => Vec::new(),
        };
        if cli.template_depth == 0 {
            return Err("--template-depth must be at least 1".into());
        }
        Ok(Globals {
            seed: cli.seed,
            overrides,
            path_mask_mode,
            path_average,
            nted_denominator,
            template_depth: cli.template_depth,
            max_len: cli.max_len,
        })
    }

    fn model_config(&self, vocabs: &Vocabs) -> CliResult<ModelConfig> {
        let mut cfg = ModelConfig::with_vocabs(vocabs);
        cfg.template_depth = self.template_depth;
        cfg.max_len = self.max_len;
        cfg.path_mask_mode = self.path_mask_mode;
        cfg.path_average = self.path_average;
        apply_model_overrides(&mut cfg, &self.overrides)?;
        Ok(cfg)
    }

    fn train_config(&self, args: &TrainArgs) -> CliResult<TrainConfig> {
        let mut cfg = TrainConfig {
            learning_rate: args.lr,
            steps: args.steps,
            batch_size: args.batch_size,
            seed: self.seed,
            checkpoint_every: args.checkpoint_every,
            checkpoint_path: Some(args.out.clone()),
            target_accuracy: args.target_accuracy,
            ..TrainConfig::default()
        };
        apply_train_overrides(&mut cfg, &self.overrides)?;
        Ok(cfg)
    }
}

fn parse_config_file(path: &Path) -> CliResult<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("config line {} is not key=value: `{line}`", i + 1))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn apply_model_overrides(cfg: &mut ModelConfig, kv: &[(String, String)]) -> CliResult<()> {
    for (k, v) in kv {
        let unsigned = || -> CliResult<usize> {
            v.parse().map_err(|_| format!("bad value for {k}: `{v}`").into())
        };
        match k.as_str() {
            "d_m" => cfg.d_m = unsigned()?,
            "d_k" => cfg.d_k = unsigned()?,
            "d_v" => cfg.d_v = unsigned()?,
            "h_enc" => cfg.h_enc = unsigned()?,
            "h1" => cfg.h1 = unsigned()?,
            "h2" => cfg.h2 = unsigned()?,
            "n1" => cfg.n1 = unsigned()?,
            "n2" => cfg.n2 = unsigned()?,
            "d_ff" => cfg.d_ff = unsigned()?,
            "max_tree_depth" => cfg.max_tree_depth = unsigned()? as u32,
            "positional_encoding" => {
                cfg.positional_encoding = v
                    .parse()
                    .map_err(|_| format!("bad value for {k}: `{v}`"))?
            }
            "dropout" => {
                cfg.dropout = v.parse().map_err(|_| format!("bad value for {k}: `{v}`"))?
            }
            // training keys are handled elsewhere
            _ if TRAIN_KEYS.contains(&k.as_str()) => {}
            other => return Err(format!("unknown config key `{other}`").into()),
        }
    }
    Ok(())
}

const TRAIN_KEYS: [&str; 8] = [
    "learning_rate",
    "beta1",
    "beta2",
    "eps",
    "clip_norm",
    "alpha",
    "beta",
    "eval_every",
];

fn apply_train_overrides(cfg: &mut TrainConfig, kv: &[(String, String)]) -> CliResult<()> {
    for (k, v) in kv {
        let float = || -> CliResult<f64> {
            v.parse().map_err(|_| format!("bad value for {k}: `{v}`").into())
        };
        match k.as_str() {
            "learning_rate" => cfg.learning_rate = float()?,
            "beta1" => cfg.beta1 = float()?,
            "beta2" => cfg.beta2 = float()?,
            "eps" => cfg.eps = float()?,
            "alpha" => cfg.alpha = float()?,
            "beta" => cfg.beta = float()?,
            "clip_norm" => {
                cfg.clip_norm = if v == "none" { None } else { Some(float()?) }
            }
            "eval_every" => {
                cfg.eval_every = v.parse().map_err(|_| format!("bad value for {k}: `{v}`"))?
            }
            _ => {} // model keys
        }
    }
    Ok(())
}

fn load_tokenizer(dir: &Path) -> CliResult<Tokenizer> {
    let bpe_path = dir.join("bpe.model");
    if bpe_path.exists() {
        let text = std::fs::read_to_string(&bpe_path)?;
        Ok(Tokenizer::Bpe(data::BpeModel::from_file_string(&text)?))
    } else {
        Ok(Tokenizer::Whitespace)
    }
}

fn load_vocabs(dir: &Path) -> CliResult<Vocabs> {
    let read = |name: &str| -> CliResult<Vocab> {
        let path = dir.join(name);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        Ok(Vocab::from_file_string(&text)?)
    };
    Ok(Vocabs {
        text: read("text.vocab")?,
        node: read("node.vocab")?,
        level: read("level.vocab")?,
    })
}

fn load_encoded(
    globals: &Globals,
    data_path: &Path,
    vocab_dir: &Path,
) -> CliResult<(Vec<data::EncodedRecord>, Vocabs)> {
    let tokenizer = load_tokenizer(vocab_dir)?;
    let vocabs = load_vocabs(vocab_dir)?;
    let load_cfg = LoadConfig {
        max_len: globals.max_len,
        tokenizer,
        ..LoadConfig::default()
    };
    let (records, report) = data::load_corpus(data_path, &load_cfg)?;
    if report.kept < report.total {
        eprintln!(
            "note: {} of {} records filtered out",
            report.total - report.kept,
            report.total
        );
    }
    if records.is_empty() {
        return Err("no usable records in the corpus".into());
    }
    let encoded = data::encode_records(&records, &vocabs, globals.template_depth)?;
    Ok((encoded, vocabs))
}

fn cmd_preprocess(globals: &Globals, args: PreprocessArgs) -> CliResult<()> {
    std::fs::create_dir_all(&args.out_dir)?;
    let (records, report, bpe) = match args.tokenizer.as_str() {
        "whitespace" => {
            let cfg = LoadConfig {
                max_len: globals.max_len,
                ..LoadConfig::default()
            };
            let (records, report) = data::load_corpus(&args.input, &cfg)?;
            (records, report, None)
        }
        "bpe" => {
            // learn merges on everything that survives the structural
            // filters, then re-load with subword lengths enforced
            let all_cfg = LoadConfig {
                max_len: usize::MAX,
                ..LoadConfig::default()
            };
            let (unfiltered, _) = data::load_corpus(&args.input, &all_cfg)?;
            let texts: Vec<String> = unfiltered
                .iter()
                .flat_map(|r| [r.src_text.clone(), r.tgt_text.clone()])
                .collect();
            let bpe = data::BpeModel::train(&texts, args.bpe_vocab_size)?;
            let cfg = LoadConfig {
                max_len: globals.max_len,
                tokenizer: Tokenizer::Bpe(bpe.clone()),
                ..LoadConfig::default()
            };
            let (records, report) = data::load_corpus(&args.input, &cfg)?;
            (records, report, Some(bpe))
        }
        other => return Err(format!("unknown tokenizer `{other}`").into()),
    };

    let vocabs = data::build_vocabs(&records);
    std::fs::write(args.out_dir.join("filter_report.txt"), report.to_report_string())?;
    std::fs::write(args.out_dir.join("text.vocab"), vocabs.text.to_file_string())?;
    std::fs::write(args.out_dir.join("node.vocab"), vocabs.node.to_file_string())?;
    std::fs::write(args.out_dir.join("level.vocab"), vocabs.level.to_file_string())?;
    if let Some(bpe) = &bpe {
        std::fs::write(args.out_dir.join("bpe.model"), bpe.to_file_string())?;
    }
    let filtered: String = records
        .iter()
        .map(|r| serde_json::to_string(&r.to_record()).expect("serializable") + "\n")
        .collect();
    std::fs::write(args.out_dir.join("filtered.jsonl"), filtered)?;

    println!(
        "kept {}/{} records; vocab sizes: text={} node={} level={}",
        report.kept,
        report.total,
        vocabs.text.len(),
        vocabs.node.len(),
        vocabs.level.len()
    );
    println!("wrote {}", args.out_dir.display());
    Ok(())
}

fn cmd_train_expander(globals: &Globals, args: TrainArgs) -> CliResult<()> {
    let (records, vocabs) = load_encoded(globals, &args.data, &args.vocab_dir)?;
    let cfg = globals.model_config(&vocabs)?;
    let mut model = ExpanderModel::new(cfg, globals.seed)?;
    println!("expander parameters: {}", model.param_count());
    let tcfg = globals.train_config(&args)?;
    let log = train::train_expander(&mut model, &records, &tcfg)?;
    finish_training(&args, &log)
}

fn cmd_train_generator(globals: &Globals, args: TrainGeneratorArgs) -> CliResult<()> {
    let (mut records, vocabs) = load_encoded(globals, &args.common.data, &args.common.vocab_dir)?;
    match args.guidance.as_str() {
        "target" => {}
        "none-syntax" => data::replace_guides_with_root(&mut records),
        other => {
            return Err(format!(
                "unknown training guidance `{other}` (expected target or none-syntax)"
            )
            .into())
        }
    }
    let mut cfg = globals.model_config(&vocabs)?;
    cfg.use_path_attention = !args.no_path_attention;
    let mut model = GeneratorModel::new(cfg, globals.seed)?;
    println!("generator parameters: {}", model.param_count());
    let tcfg = globals.train_config(&args.common)?;
    let log = train::train_generator(&mut model, &records, &tcfg)?;
    finish_training(&args.common, &log)
}

fn finish_training(args: &TrainArgs, log: &train::TrainLog) -> CliResult<()> {
    if let Some(path) = &args.log {
        std::fs::write(path, log.to_jsonl())?;
    }
    let last = log.records.last();
    println!(
        "trained {} steps; final loss {:.4}; teacher-forced accuracy {:.4}",
        log.steps_run,
        last.map_or(f64::NAN, |r| r.loss),
        log.final_accuracy
    );
    println!("checkpoint written to {}", args.out.display());
    Ok(())
}

fn parse_lp(text: &str) -> CliResult<tree::LinearParse> {
    Ok(tree::linearize(&tree::parse_bracketed(text)?))
}

fn cmd_expand(globals: &Globals, args: ExpandArgs) -> CliResult<()> {
    let vocabs = load_vocabs(&args.vocab_dir)?;
    let data = crate::model::load_checkpoint(&args.checkpoint)?;
    let model = ExpanderModel::from_checkpoint(&data)?;
    let src = parse_lp(&args.src_parse)?;
    let tmpl = parse_lp(&args.template)?;
    let out = decode::expand_syntax(&model, &src, &tmpl, &vocabs, globals.max_len)?;
    let tree = tree::delinearize(&out)?;
    println!("{}", tree::to_bracketed(&tree));
    println!("nodes: {}", out.nodes.join(" "));
    println!(
        "levels: {}",
        out.levels.iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
    );
    Ok(())
}

fn cmd_generate(globals: &Globals, args: GenerateArgs) -> CliResult<()> {
    let vocabs = load_vocabs(&args.vocab_dir)?;
    let tokenizer = load_tokenizer(&args.vocab_dir)?;
    let data = crate::model::load_checkpoint(&args.checkpoint)?;
    let model = GeneratorModel::from_checkpoint(&data)?;
    let guide = parse_lp(&args.parse)?;
    let src = tokenizer.tokenize(&args.src);
    let out = decode::generate_text(&model, &guide, &src, &vocabs, globals.max_len)?;
    println!("{}", tokenizer.detokenize(&out));
    Ok(())
}

fn cmd_paraphrase(globals: &Globals, args: ParaphraseArgs) -> CliResult<()> {
    let vocabs = load_vocabs(&args.vocab_dir)?;
    let tokenizer = load_tokenizer(&args.vocab_dir)?;
    let expander = ExpanderModel::from_checkpoint(&crate::model::load_checkpoint(&args.expander)?)?;
    let generator =
        GeneratorModel::from_checkpoint(&crate::model::load_checkpoint(&args.generator)?)?;
    let src_text = tokenizer.tokenize(&args.src);
    let src_parse = parse_lp(&args.src_parse)?;
    let template = parse_lp(&args.template)?;
    let (text, expanded) = decode::pipeline_paraphrase(
        &expander,
        &generator,
        &src_text,
        &src_parse,
        &template,
        &vocabs,
        globals.max_len,
    )?;
    println!("{}", tokenizer.detokenize(&text));
    println!(
        "expanded parse: {}",
        tree::to_bracketed(&tree::delinearize(&expanded)?)
    );
    Ok(())
}

fn cmd_evaluate(globals: &Globals, args: EvaluateArgs) -> CliResult<()> {
    let mode = GuidanceMode::parse(&args.guidance)?;
    if mode == GuidanceMode::Expanded && args.expander.is_none() {
        return Err("--guidance expanded needs --expander".into());
    }
    let (records, vocabs) = load_encoded(globals, &args.data, &args.vocab_dir)?;
    let ckpt = crate::model::load_checkpoint(&args.generator)?;
    let mut generator = GeneratorModel::from_checkpoint(&ckpt)?;
    if args.no_path_attention {
        generator.config.use_path_attention = false;
    }
    let expander = match &args.expander {
        Some(path) => Some(ExpanderModel::from_checkpoint(
            &crate::model::load_checkpoint(path)?,
        )?),
        None => None,
    };

    // decodes are pure over frozen weights, so records run in parallel
    let outcomes: Vec<Result<EvalPair, crate::model::ModelError>> =
        crate::par::map_slice(&records, usize::MAX, |r| {
            let tgt_lp = &r.tgt_lp;
            let ref_tree = tree::delinearize(tgt_lp)?;
            let template_lp = data::lp_of_encoded(&r.template, &vocabs);
            let template_tree = tree::delinearize(&template_lp)?;
            let src_lp = data::lp_of_encoded(&r.src_parse, &vocabs);
            let (guide, src_tokens): (tree::LinearParse, Vec<String>) = match mode {
                GuidanceMode::Target => (tgt_lp.clone(), text_tokens(r, &vocabs)),
                GuidanceMode::Expanded => {
                    let expander = expander.as_ref().expect("checked above");
                    let expanded = decode::expand_syntax(
                        expander,
                        &src_lp,
                        &template_lp,
                        &vocabs,
                        globals.max_len,
                    )?;
                    (expanded, text_tokens(r, &vocabs))
                }
                GuidanceMode::TemplateDirect => (template_lp.clone(), text_tokens(r, &vocabs)),
                GuidanceMode::NoneSyntax => (decode::root_stub(tgt_lp), text_tokens(r, &vocabs)),
                GuidanceMode::NoneText => (tgt_lp.clone(), decode::empty_source()),
            };
            let hypothesis =
                decode::generate_text(&generator, &guide, &src_tokens, &vocabs, globals.max_len)?;
            Ok(EvalPair {
                hypothesis,
                reference: r.tgt_tokens.clone(),
                guide_tree: tree::delinearize(&guide)?,
                ref_tree,
                template: Some(template_tree),
            })
        });
    let mut pairs = Vec::with_capacity(records.len());
    for outcome in outcomes {
        pairs.push(outcome?);
    }

    let report = metrics::evaluate_pairs(
        &pairs,
        globals.nted_denominator,
        globals.template_depth,
        &mode.to_string(),
    );
    let text = report.to_report_string();
    match &args.report {
        Some(path) => {
            std::fs::write(path, &text)?;
            println!("report written to {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn text_tokens(r: &data::EncodedRecord, vocabs: &Vocabs) -> Vec<String> {
    r.src_text
        .iter()
        .map(|&id| vocabs.text.token(id).to_string())
        .collect()
}

fn cmd_gradcheck() -> CliResult<usize> {
    let checks = oracle::gradient_suite();
    let mut failed = 0;
    for c in &checks {
        let status = if c.passed { "PASS" } else { "FAIL" };
        println!("{status} {:<36} max rel err {:.3e}", c.name, c.max_rel_err);
        if !c.passed {
            failed += 1;
        }
    }
    println!(
        "gradcheck: {}/{} checks passed",
        checks.len() - failed,
        checks.len()
    );
    Ok(failed)
}

fn cmd_selftest(args: SelftestArgs) -> CliResult<usize> {
    let results = verify::run_all(args.full);
    let mut failed = 0;
    for r in &results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        println!("{status} {:<28} {}", r.name, r.detail);
        if !r.passed {
            failed += 1;
        }
    }
    println!(
        "selftest: {}/{} suites passed",
        results.len() - failed,
        results.len()
    );
    Ok(failed)
}
