use std::fs;
use std::io::{Read, Write};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use sanar_core::config::{load_config, RunConfig};
use sanar_core::corpus::{
    build_pairs, build_vocabulary, encode_context, encode_pair, read_dataset, write_dataset, EncodedPair,
    EncodingMode, ExamplePair, Vocabulary, DEFAULT_MAX_CONTEXT, DEFAULT_MAX_TARGET, DEFAULT_VOCAB_SIZE,
    DEFAULT_WINDOW,
};
use sanar_core::dam::{density_ratio_curve, order_study, train_order_pair, AttnAgg};
use sanar_core::eval::{complete, evaluate, latency_bench, speedup, Convergence, RepeatDef};
use sanar_core::lexer::{lex_lenient, Language};
use sanar_core::model::{Model, ModelKind};
use sanar_core::train::{train, EpochStats, StepMetrics, TrainObserver};

#[derive(Parser)]
#[command(name = "sanar", version, about = "Syntax-aware parallel line completion toolkit")]
struct Cli {
    /// Seed for every randomized step; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-file work.
    #[arg(long, global = true, env = "SANAR_THREADS")]
    threads: Option<usize>,
    /// Increase log detail (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the tokens and syntax types of a source file, one line per logical line.
    Lex {
        #[arg(long, default_value = "python")]
        lang: String,
        /// Source file; stdin when omitted.
        input: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Lex a source tree into train/test datasets and a vocabulary.
    BuildData(BuildDataArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Complete the line following a context.
    Complete {
        #[arg(long)]
        ckpt: PathBuf,
        /// Vocabulary file; defaults to vocab.json beside the checkpoint.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, conflicts_with = "context_file")]
        stdin: bool,
        #[arg(long)]
        context_file: Option<PathBuf>,
        #[arg(long, default_value = "python")]
        lang: String,
        #[arg(long, default_value_t = DEFAULT_WINDOW)]
        window: usize,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        #[arg(long, value_enum, default_value_t = RepeatArg::Consecutive)]
        repeat_def: RepeatArg,
        /// Autoregressive checkpoint to time against for the speedup field.
        #[arg(long)]
        ar_ckpt: Option<PathBuf>,
    },
    /// Per-example decode latency without batching.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long, default_value_t = 0)]
        min_target_len: usize,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        #[arg(long)]
        report: PathBuf,
    },
    /// Train one masked model per masking probability and report attention density ratios.
    Dam {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.15,0.35,0.5")]
        mask_probs: Vec<f64>,
        #[arg(long, default_value = "mean")]
        attn_agg: String,
        #[arg(long)]
        report: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train left-to-right and right-to-left models and bucket their test outcomes.
    OrderStudy {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config with `model` and `train` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config value, e.g. `--set lambda=0.5` or `--set model.layers=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct BuildDataArgs {
    /// Directory scanned recursively for source files.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "python")]
    lang: String,
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    window: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_CONTEXT)]
    max_context: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_TARGET)]
    max_target: usize,
    #[arg(long, default_value_t = DEFAULT_VOCAB_SIZE)]
    vocab_size: usize,
    /// Share of files, chosen by path hash, that go to the test split.
    #[arg(long, default_value_t = 0.1)]
    test_fraction: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    kind: Option<Mode>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Nar,
    ArL2r,
    ArR2l,
}

impl Mode {
    fn kind(self) -> ModelKind {
        match self {
            Mode::Nar => ModelKind::Nar,
            Mode::ArL2r => ModelKind::ArL2r,
            Mode::ArR2l => ModelKind::ArR2l,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RepeatArg {
    Consecutive,
    Any,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool: {e}");
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Lex { lang, input, json } => cmd_lex(&lang, input.as_deref(), json),
        Command::BuildData(args) => cmd_build_data(&args),
        Command::Train(args) => cmd_train(&args, seed),
        Command::Complete { ckpt, vocab, stdin, context_file, lang, window } => {
            let text = match (&context_file, stdin) {
                (Some(p), _) => read_text(p)?,
                (None, _) => {
                    let mut s = String::new();
                    std::io::stdin().read_to_string(&mut s).context("reading stdin")?;
                    s
                }
            };
            cmd_complete(&ckpt, vocab.as_deref(), &text, &lang, window)
        }
        Command::Eval { ckpt, data, report, split, repeat_def, ar_ckpt } => {
            cmd_eval(&ckpt, &data, &report, split, repeat_def, ar_ckpt.as_deref())
        }
        Command::Bench { ckpt, data, mode, min_target_len, warmup, split, report } => {
            cmd_bench(&ckpt, &data, mode, min_target_len, warmup, split, &report)
        }
        Command::Dam { data, mask_probs, attn_agg, report, config } => {
            let agg: AttnAgg = attn_agg.parse().map_err(anyhow::Error::msg)?;
            cmd_dam(&data, &mask_probs, agg, &report, &config, seed)
        }
        Command::OrderStudy { data, report, config } => cmd_order_study(&data, &report, &config, seed),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn parse_lang(lang: &str) -> Result<Language> {
    lang.parse::<Language>().map_err(|e| anyhow::anyhow!("{e}"))
}

fn cmd_lex(lang: &str, input: Option<&Path>, json: bool) -> Result<()> {
    let language = parse_lang(lang)?;
    let text = match input {
        Some(p) => read_text(p)?,
        None => {
            let mut s = String::new();
            std::io::stdin().read_to_string(&mut s)?;
            s
        }
    };
    let (file, diags) = lex_lenient(&text, language);
    for d in &diags {
        log::warn!("line {}: {}", d.line, d.error);
    }
    let mut out = std::io::stdout().lock();
    for line in &file.lines {
        if json {
            writeln!(out, "{}", serde_json::to_string(line)?)?;
        } else {
            let cells: Vec<String> = line.iter().map(|t| format!("{}/{}", t.text, t.stype.as_str())).collect();
            writeln!(out, "{}", cells.join(" "))?;
        }
    }
    Ok(())
}

fn extensions(language: Language) -> &'static [&'static str] {
    match language {
        Language::Python => &["py"],
        Language::Java => &["java"],
    }
}

fn collect_sources(root: &Path, exts: &[&str], out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = fs::read_dir(root).with_context(|| format!("cannot read directory {}", root.display()))?;
    for entry in entries {
        let path = entry?.path();
        if path.is_dir() {
            collect_sources(&path, exts, out)?;
        } else if path.extension().and_then(|e| e.to_str()).is_some_and(|e| exts.contains(&e)) {
            out.push(path);
        }
    }
    Ok(())
}

/// Deterministic file-level split: a file is held out when the first eight
/// bytes of the SHA-256 of its relative path fall below the fraction.
fn is_test_file(rel: &str, fraction: f64) -> bool {
    let digest = Sha256::digest(rel.as_bytes());
    let x = u64::from_be_bytes(digest[..8].try_into().expect("eight bytes"));
    (x as f64 / u64::MAX as f64) < fraction
}

fn cmd_build_data(a: &BuildDataArgs) -> Result<()> {
    let language = parse_lang(&a.lang)?;
    if !(0.0..=1.0).contains(&a.test_fraction) {
        bail!("--test-fraction must lie in [0, 1]");
    }
    let mut files = Vec::new();
    collect_sources(&a.input, extensions(language), &mut files)?;
    files.sort();
    if files.is_empty() {
        bail!("no {} sources under {}", language, a.input.display());
    }
    let lexed: Vec<(bool, Vec<ExamplePair>)> = files
        .par_iter()
        .map(|p| {
            let text = read_text(p)?;
            let (file, diags) = lex_lenient(&text, language);
            for d in diags {
                log::warn!("{}:{}: {}", p.display(), d.line, d.error);
            }
            let rel = p.strip_prefix(&a.input).unwrap_or(p).to_string_lossy().replace('\\', "/");
            Ok((is_test_file(&rel, a.test_fraction), build_pairs(&file, a.window)))
        })
        .collect::<Result<_>>()?;
    let train_pairs: Vec<&ExamplePair> = lexed.iter().filter(|f| !f.0).flat_map(|f| &f.1).collect();
    let test_pairs: Vec<&ExamplePair> = lexed.iter().filter(|f| f.0).flat_map(|f| &f.1).collect();
    let vocab = build_vocabulary(train_pairs.iter().copied(), a.vocab_size)?;
    let encode = |pairs: &[&ExamplePair]| -> Vec<EncodedPair> {
        pairs
            .iter()
            .filter_map(|p| encode_pair(p, &vocab, a.max_context, a.max_target, EncodingMode::NonAutoregressive))
            .collect()
    };
    let (train_set, test_set) = (encode(&train_pairs), encode(&test_pairs));
    fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    write_dataset(&a.out.join("train.jsonl"), a.window, &train_set)?;
    write_dataset(&a.out.join("test.jsonl"), a.window, &test_set)?;
    vocab.save(&a.out.join("vocab.json"))?;
    println!(
        "files {} train {} test {} vocab {}",
        files.len(),
        train_set.len(),
        test_set.len(),
        vocab.len()
    );
    Ok(())
}

fn load_split(dir: &Path, split: Split) -> Result<Vec<EncodedPair>> {
    let name = match split {
        Split::Train => "train.jsonl",
        Split::Test => "test.jsonl",
    };
    let path = dir.join(name);
    let (_, data) = read_dataset(&path).with_context(|| format!("cannot load dataset {}", path.display()))?;
    Ok(data)
}

fn load_vocab(path: &Path) -> Result<Vocabulary> {
    Vocabulary::load(path).with_context(|| format!("cannot load vocabulary {}", path.display()))
}

fn run_config(c: &ConfigArgs, seed: Option<u64>, vocab: &Vocabulary) -> Result<RunConfig> {
    let mut cfg = load_config(c.config.as_deref(), &c.overrides)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    cfg.model.vocab_size = vocab.len();
    cfg.validate()?;
    Ok(cfg)
}

/// Records per-step CSV rows, writes periodic checkpoints and applies the
/// optional exact-match stopping rule.
struct CliObserver<'a> {
    csv: String,
    out: &'a Path,
    every: u64,
    vocab_hash: String,
    stop: Option<Convergence<'a>>,
    error: Option<anyhow::Error>,
}

impl TrainObserver for CliObserver<'_> {
    fn on_step(&mut self, model: &Model, m: &StepMetrics) -> ControlFlow<()> {
        self.csv.push_str(&m.csv_row());
        self.csv.push('\n');
        if self.every > 0 && m.step % self.every == 0 {
            if let Err(e) = model.save(&self.out.join("model.ckpt"), &self.vocab_hash) {
                self.error = Some(e.into());
                return ControlFlow::Break(());
            }
        }
        ControlFlow::Continue(())
    }

    fn on_epoch(&mut self, model: &Model, stats: &EpochStats) -> ControlFlow<()> {
        match &mut self.stop {
            Some(c) => c.on_epoch(model, stats),
            None => ControlFlow::Continue(()),
        }
    }
}

fn cmd_train(a: &TrainArgs, seed: Option<u64>) -> Result<()> {
    let vocab = load_vocab(&a.data.join("vocab.json"))?;
    let data = load_split(&a.data, Split::Train)?;
    let mut cfg = run_config(&a.config, seed, &vocab)?;
    if let Some(mode) = a.kind {
        cfg.model.kind = mode.kind();
    }
    if cfg.model.kind == ModelKind::Dam {
        bail!("use the dam command to train masked models");
    }
    fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    let mut model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    let stop = cfg
        .train
        .early_stop_em
        .map(|em| Convergence::new(&data, em, 1.0, cfg.train.eval_every_epochs));
    let mut obs = CliObserver {
        csv: format!("{}\n", StepMetrics::CSV_HEADER),
        out: &a.out,
        every: cfg.train.checkpoint_every,
        vocab_hash: vocab.hash(),
        stop,
        error: None,
    };
    let summary = train(&mut model, &data, &cfg.train, &mut obs)?;
    if let Some(e) = obs.error {
        return Err(e);
    }
    write_text(&a.out.join("metrics.csv"), &obs.csv)?;
    model.save(&a.out.join("model.ckpt"), &vocab.hash())?;
    vocab.save(&a.out.join("vocab.json"))?;
    write_text(&a.out.join("config.json"), &cfg.to_json())?;
    println!("trained {} steps over {} epochs", summary.steps, summary.epochs.len());
    Ok(())
}

fn load_model(ckpt: &Path) -> Result<(Model, String)> {
    Ok(Model::load(ckpt)?)
}

fn vocab_for(ckpt: &Path, explicit: Option<&Path>, hash: &str) -> Result<Vocabulary> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => ckpt.parent().unwrap_or(Path::new(".")).join("vocab.json"),
    };
    let vocab = load_vocab(&path)?;
    if vocab.hash() != hash {
        bail!("vocabulary {} does not match the checkpoint", path.display());
    }
    Ok(vocab)
}

fn cmd_complete(ckpt: &Path, vocab: Option<&Path>, text: &str, lang: &str, window: usize) -> Result<()> {
    let language = parse_lang(lang)?;
    let (model, hash) = load_model(ckpt)?;
    let vocab = vocab_for(ckpt, vocab, &hash)?;
    let (file, _) = lex_lenient(text, language);
    let start = file.lines.len().saturating_sub(window);
    let tokens: Vec<&str> = file.lines[start..].iter().flatten().map(|t| t.text.as_str()).collect();
    let context = encode_context(&tokens, &vocab, DEFAULT_MAX_CONTEXT.min(model.config().max_positions - 1));
    let result = complete(&model, &context)?;
    println!("{}", vocab.detokenize(&result.tokens));
    Ok(())
}

fn cmd_eval(
    ckpt: &Path,
    data: &Path,
    report: &Path,
    split: Split,
    repeat: RepeatArg,
    ar_ckpt: Option<&Path>,
) -> Result<()> {
    let (model, hash) = load_model(ckpt)?;
    let vocab = vocab_for(ckpt, Some(&data.join("vocab.json")), &hash)?;
    let test = load_split(data, split)?;
    let repeat = match repeat {
        RepeatArg::Consecutive => RepeatDef::Consecutive,
        RepeatArg::Any => RepeatDef::Any,
    };
    let (mut rep, _) = evaluate(&model, &vocab, &test, repeat)?;
    if let Some(ar) = ar_ckpt {
        let (ar_model, _) = load_model(ar)?;
        let base = latency_bench(&ar_model, &test, 0, 10)?;
        let cand = latency_bench(&model, &test, 0, 10)?;
        rep.speedup_vs_ar = Some(speedup(&base, &cand));
    }
    let json = serde_json::to_string_pretty(&rep)?;
    write_text(report, &json)?;
    println!("{json}");
    Ok(())
}

fn cmd_bench(
    ckpt: &Path,
    data: &Path,
    mode: Mode,
    min_target_len: usize,
    warmup: usize,
    split: Split,
    report: &Path,
) -> Result<()> {
    let (model, _) = load_model(ckpt)?;
    if model.kind() != mode.kind() {
        bail!("checkpoint {} holds a {:?} model, not {:?}", ckpt.display(), model.kind(), mode.kind());
    }
    let test = load_split(data, split)?;
    let rep = latency_bench(&model, &test, min_target_len, warmup)?;
    write_text(report, &rep.to_csv())?;
    println!("examples {} mean_latency_ns {:.0}", rep.records.len(), rep.mean_latency_ns);
    Ok(())
}

fn cmd_dam(data: &Path, probs: &[f64], agg: AttnAgg, report: &Path, c: &ConfigArgs, seed: Option<u64>) -> Result<()> {
    let vocab = load_vocab(&data.join("vocab.json"))?;
    let cfg = run_config(c, seed, &vocab)?;
    let train_set = load_split(data, Split::Train)?;
    let test = load_split(data, Split::Test)?;
    let rep = density_ratio_curve(&cfg.model, &train_set, &test, probs, &cfg.train, agg)?;
    let json = serde_json::to_string_pretty(&rep)?;
    write_text(report, &json)?;
    for p in &rep.points {
        println!("P={} R={:.4} masked={}", p.mask_prob, p.ratio, p.masked);
    }
    Ok(())
}

fn cmd_order_study(data: &Path, report: &Path, c: &ConfigArgs, seed: Option<u64>) -> Result<()> {
    let vocab = load_vocab(&data.join("vocab.json"))?;
    let cfg = run_config(c, seed, &vocab)?;
    let train_set = load_split(data, Split::Train)?;
    let test = load_split(data, Split::Test)?;
    let (l2r, r2l) = train_order_pair(&cfg.model, &train_set, &train_set, &cfg.train, &mut ())?;
    let rep = order_study(&l2r, &r2l, &vocab, &test)?;
    let json = serde_json::to_string_pretty(&rep)?;
    write_text(report, &json)?;
    println!("{json}");
    Ok(())
}
