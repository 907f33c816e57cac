use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::LevelFilter;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use reltrans::codec::tokens::{format_tokens, parse_tokens, read_token_file};
use reltrans::codec::{
    apply_sustain_pedal, jsb_deserialize, jsb_serialize, notes::format_notes, parse_notes, performance_decode,
    performance_encode, CodecId, Grid, TokenSequence,
};
use reltrans::corpus::Corpus;
use reltrans::gradcheck::check_model;
use reltrans::membench::{run_bench, BenchOptions, Precision};
use reltrans::model::{
    evaluate, sample, train, Checkpoint, Model, ModelConfig, SampleOptions, TrainConfig, TrainEvent, TrainState,
};
use reltrans::verify::{run_skew_check, Fault, SkewCheckOptions};

#[derive(Parser, Debug)]
#[command(name = "reltrans", version, about = "Relative self-attention music Transformer toolkit")]
pub struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Only warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

impl Cli {
    pub fn verbosity(&self) -> LevelFilter {
        match (self.quiet, self.verbose) {
            (true, _) => LevelFilter::Warn,
            (false, 0) => LevelFilter::Info,
            (false, 1) => LevelFilter::Debug,
            _ => LevelFilter::Trace,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check the skew transforms bitwise against their index-map and gather oracles.
    SkewCheck(SkewCheckArgs),
    /// Relative-logit memory per layer per head, naive gather vs skewed.
    BenchMem(BenchArgs),
    /// Finite-difference check of every model gradient.
    Gradcheck(GradcheckArgs),
    /// Train a model on a directory of token files.
    Train(TrainArgs),
    /// Mean next-token NLL of a checkpoint on a corpus.
    Eval(EvalArgs),
    /// Extend a prime with a trained model.
    Sample(SampleArgs),
    /// Notes or grid to tokens.
    Encode(CodecArgs),
    /// Tokens to notes or grid.
    Decode(CodecArgs),
}

#[derive(Args, Debug)]
struct SkewCheckArgs {
    #[arg(long, default_value_t = 64)]
    max_len: usize,
    #[arg(long, default_value_t = 32)]
    max_block: usize,
    /// Random instances per length.
    #[arg(long, default_value_t = 200)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
    #[arg(long, hide = true, value_enum)]
    inject_fault: Option<FaultArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FaultArg {
    OffByOne,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [650, 2048, 3500])]
    lengths: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    head_dim: usize,
    #[arg(long, default_value = "f32")]
    precision: String,
    /// Largest naive gather tensor to actually allocate, in MB.
    #[arg(long, default_value_t = 512)]
    naive_limit_mb: usize,
    /// Report closed-form sizes without running anything.
    #[arg(long)]
    analytic_only: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print JSON instead of the table.
    #[arg(long)]
    json: bool,
    /// Also write the JSON report here.
    #[arg(long)]
    json_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// TOML file with a [model] table; a small default model otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    length: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Denominator floor of the relative error.
    #[arg(long, default_value_t = 1e-5)]
    floor: f64,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// TOML file with [model] and [train] tables.
    #[arg(long)]
    config: PathBuf,
    /// Directory of .tok files.
    #[arg(long)]
    corpus: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Overrides both model and training seeds.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::All)]
    split: Split,
    /// Evaluation window; the model's max_len by default.
    #[arg(long)]
    window: Option<usize>,
    /// Accepted for uniformity; evaluation uses no randomness.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Valid,
    All,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Prime token ids, separated by spaces or commas.
    #[arg(long, conflicts_with = "prime_file")]
    prime: Option<String>,
    /// Token file to use as the prime.
    #[arg(long)]
    prime_file: Option<PathBuf>,
    /// Total length including the prime.
    #[arg(long)]
    length: usize,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the attention trace of the sampled positions as JSON.
    #[arg(long)]
    trace_out: Option<PathBuf>,
    /// Token output file; stdout otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CodecArgs {
    #[arg(long, value_enum)]
    codec: CodecArg,
    #[arg(long)]
    input: PathBuf,
    /// Output file; stdout otherwise.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Encode without sustain-pedal extension.
    #[arg(long)]
    no_pedal: bool,
    /// Accepted for uniformity; the codecs are deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CodecArg {
    Jsb,
    Performance,
}

impl From<CodecArg> for CodecId {
    fn from(c: CodecArg) -> Self {
        match c {
            CodecArg::Jsb => CodecId::JsbGrid,
            CodecArg::Performance => CodecId::Performance,
        }
    }
}

/// Configuration file layout.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    model: ModelConfig,
    train: TrainConfig,
}

fn read_config(path: &Path) -> Result<ConfigFile> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg: ConfigFile = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

fn emit(output: Option<&Path>, text: &str) -> Result<()> {
    match output {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

/// Runs a command. `Ok(false)` means a check ran and failed.
pub fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::SkewCheck(a) => skew_check(a),
        Command::BenchMem(a) => bench_mem(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Sample(a) => sample_cmd(a),
        Command::Encode(a) => encode(a),
        Command::Decode(a) => decode(a),
    }
}

fn skew_check(a: SkewCheckArgs) -> Result<bool> {
    let opts = SkewCheckOptions {
        max_len: a.max_len,
        max_block: a.max_block,
        trials: a.trials,
        seed: a.seed,
        fault: a.inject_fault.map(|FaultArg::OffByOne| Fault::OffByOne),
        ..Default::default()
    };
    let report = run_skew_check(&opts)?;
    if report.vacuous {
        log::warn!("no instances were checked; the pass is vacuous");
    }
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        for s in &report.suites {
            let status = if s.mismatches == 0 { "ok" } else { "FAILED" };
            println!(
                "{:<18} {status:<6} {} instances, {} entries, {} mismatches",
                s.name, s.instances, s.entries_compared, s.mismatches
            );
            if let Some(m) = &s.first_mismatch {
                println!("  first mismatch at {m}");
            }
        }
    }
    Ok(report.passed())
}

fn bench_mem(a: BenchArgs) -> Result<bool> {
    let precision: Precision = a.precision.parse()?;
    let opts = BenchOptions {
        lengths: a.lengths,
        head_dim: a.head_dim,
        precision,
        naive_limit_bytes: a.naive_limit_mb * 1_000_000,
        analytic_only: a.analytic_only,
        seed: a.seed,
    };
    let report = run_bench(&opts)?;
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(p) = &a.json_out {
        fs::write(p, &json).with_context(|| format!("writing {}", p.display()))?;
    }
    if a.json {
        println!("{json}");
    } else {
        print!("{}", report.to_table());
    }
    Ok(true)
}

fn gradcheck(a: GradcheckArgs) -> Result<bool> {
    let mut cfg = match &a.config {
        Some(p) => read_config(p)?.model,
        None => ModelConfig {
            vocab_size: 12,
            max_len: 8,
            depth: 8,
            heads: 2,
            layers: 2,
            feedforward_size: 16,
            use_pitch_time_relative: true,
            init_scale: 0.3,
            ..Default::default()
        },
    };
    cfg.seed = a.seed;
    let model = Model::init(cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let tokens: Vec<u32> = (0..a.length).map(|_| rng.gen_range(0..cfg.vocab_size as u32)).collect();
    let report = check_model(&model, &tokens, a.step, a.floor)?;
    let pass = report.passes(a.tolerance);
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        for s in &report.slots {
            println!(
                "{:<32} {:>6} entries  max rel {:.3e}  max abs {:.3e}",
                s.name, s.entries, s.max_relative_error, s.max_absolute_error
            );
        }
        println!(
            "{}: max relative error {:.3e} in {} (tolerance {:.1e})",
            if pass { "PASS" } else { "FAIL" },
            report.max_relative_error,
            report.worst_slot,
            a.tolerance
        );
    }
    Ok(pass)
}

fn train_cmd(a: TrainArgs) -> Result<bool> {
    let ConfigFile { model: mut mcfg, train: mut tcfg } = read_config(&a.config)?;
    if let Some(s) = a.seed {
        mcfg.seed = s;
        tcfg.seed = s;
    }
    if let Some(s) = a.steps {
        tcfg.steps = s;
    }
    let corpus = Corpus::load_dir(&a.corpus)?;
    if let Some(t) = corpus.max_token().filter(|&t| t as usize >= mcfg.vocab_size) {
        bail!("corpus contains token {t}, outside the model vocabulary of {}", mcfg.vocab_size);
    }
    log::info!(
        "{} training and {} validation sequences; {} parameters",
        corpus.train.len(),
        corpus.valid.len(),
        mcfg.parameter_count()
    );
    let mut state = match &a.resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            ck.ensure_compatible(&mcfg)?;
            TrainState::resume(ck, &tcfg)?
        }
        None => TrainState::new(Model::init(mcfg)?, &tcfg)?,
    };
    let out = a.out.clone();
    let log_every = (tcfg.steps / 50).max(1);
    let report = train(&mut state, &tcfg, &corpus, &mut |event| {
        match event {
            TrainEvent::Step(m) if m.step % log_every == 0 => {
                log::info!("step {} loss {:.4} grad norm {:.3} lr {:.2e}", m.step, m.loss, m.grad_norm, m.lr)
            }
            TrainEvent::Step(_) => {}
            TrainEvent::Eval { step, valid_nll } => println!("step {step} valid_nll {valid_nll:.6}"),
            TrainEvent::Checkpoint(s) => s.checkpoint().save(&out)?,
        }
        Ok(())
    })?;
    state.checkpoint().save(&a.out)?;
    println!(
        "trained {} steps, final loss {:.6}, best valid NLL {}",
        report.steps,
        report.final_loss,
        report.best_valid_nll.map_or("n/a".into(), |v| format!("{v:.6}"))
    );
    Ok(true)
}

fn eval(a: EvalArgs) -> Result<bool> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let corpus = Corpus::load_dir(&a.corpus)?;
    let seqs: Vec<Vec<u32>> = match a.split {
        Split::Train => corpus.train,
        Split::Valid => corpus.valid,
        // a single-file corpus serves as both splits
        Split::All if corpus.train == corpus.valid => corpus.train,
        Split::All => corpus.train.into_iter().chain(corpus.valid).collect(),
    };
    let window = a.window.unwrap_or(ck.model.config.max_len);
    let nll = evaluate(&ck.model, &seqs, window)?;
    println!("{nll:.6}");
    Ok(true)
}

fn sample_cmd(a: SampleArgs) -> Result<bool> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let prime = match (&a.prime, &a.prime_file) {
        (Some(s), _) => parse_tokens(&s.replace(',', " "), None)?,
        (None, Some(p)) => read_token_file(p)?,
        (None, None) => bail!("give a prime with --prime or --prime-file"),
    };
    let opts =
        SampleOptions { length: a.length, temperature: a.temperature, seed: a.seed, trace: a.trace_out.is_some() };
    let out = sample(&ck.model, &prime, &opts)?;
    if let (Some(p), Some(trace)) = (&a.trace_out, &out.trace) {
        fs::write(p, serde_json::to_string(trace)?).with_context(|| format!("writing {}", p.display()))?;
    }
    emit(a.out.as_deref(), &format_tokens(&out.tokens))?;
    Ok(true)
}

fn encode(a: CodecArgs) -> Result<bool> {
    let tokens = match a.codec {
        CodecArg::Jsb => jsb_serialize(&Grid::read(&a.input)?),
        CodecArg::Performance => {
            let text = fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
            let (notes, pedals) = parse_notes(&text, Some(&a.input))?;
            let notes = if a.no_pedal { notes } else { apply_sustain_pedal(&notes, &pedals) };
            performance_encode(&notes)?
        }
    };
    emit(a.output.as_deref(), &format_tokens(&tokens))?;
    Ok(true)
}

fn decode(a: CodecArgs) -> Result<bool> {
    let seq = TokenSequence::new(a.codec.into(), read_token_file(&a.input)?)?;
    let text = match a.codec {
        CodecArg::Jsb => jsb_deserialize(&seq.tokens)?.to_text(),
        CodecArg::Performance => format_notes(&performance_decode(&seq.tokens)?, &[]),
    };
    emit(a.output.as_deref(), &text)?;
    Ok(true)
}
