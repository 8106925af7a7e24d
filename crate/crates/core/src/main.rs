use std::error::Error;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use barmorph::attributes::{compute_attributes, read_attribute_file, write_attribute_file, AttributeBins};
use barmorph::bundle::{ModelBundle, ModelKind};
use barmorph::config::KeyValues;
use barmorph::corpus::{generate_synthetic, ingest, Corpus, Split};
use barmorph::decode::{sliding_window_transfer, OverrideSpec, SamplingConfig};
use barmorph::experiments::{evaluate_setting1, evaluate_setting2, select_excerpts, ProtocolConfig};
use barmorph::midi::{parse_midi, quantize, write_midi};
use barmorph::remi::{detokenize, read_token_text, tokenize_with, write_token_text, TokenizeOptions, Vocab};
use barmorph::service::{serve, Service, ServiceConfig};
use barmorph::train::{TrainConfig, Trainer, LOG_HEADER};
use barmorph::transformer::{ConditioningMode, Decoder, ModelConfig};
use barmorph::vae::{ConditionedLm, Example, Objective};

type CliResult = Result<(), Box<dyn Error>>;

/// Bar-level controllable style transfer for symbolic music.
#[derive(Parser)]
#[command(name = "barmorph", version)]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// key = value file with model.*, train.* and sample.* overrides.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// MIDI to token text, or token text back to MIDI with --reverse.
    Tokenize {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long)]
        reverse: bool,
        #[arg(long, default_value_t = 16)]
        sub_beats: u16,
        /// Emit Chord tokens.
        #[arg(long)]
        chords: bool,
    },
    /// Per-bar attribute table of a MIDI file.
    Attrs {
        input: PathBuf,
        /// Output CSV; standard output when absent.
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Take class cut-offs from a corpus directory.
        #[arg(long, conflicts_with = "ckpt")]
        corpus: Option<PathBuf>,
        /// Take class cut-offs from a checkpoint.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        sub_beats: u16,
    },
    /// Write a synthetic corpus directory.
    SynthCorpus {
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value_t = 200)]
        pieces: usize,
        #[arg(long, default_value_t = 16)]
        bars: usize,
    },
    /// Build a corpus directory from a folder of MIDI files.
    Ingest {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value_t = 16)]
        sub_beats: u16,
    },
    /// Train a style model or a fluency language model.
    Train(TrainArgs),
    /// Restyle a MIDI file bar by bar.
    Transfer(TransferArgs),
    /// Attribute-control and diversity report on corpus excerpts.
    Evaluate(EvaluateArgs),
    /// Run the HTTP service.
    Serve {
        #[arg(long, env = "BARMORPH_PORT", default_value_t = 8080)]
        port: u16,
        #[arg(long, env = "BARMORPH_STORE", default_value = "barmorph-store")]
        store: PathBuf,
        #[arg(long, env = "BARMORPH_CKPT")]
        ckpt: Option<PathBuf>,
        #[arg(long, env = "BARMORPH_WORKERS", default_value_t = 2)]
        workers: usize,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Style,
    Lm,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Tiny,
    Reference,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Checkpoint path, rewritten every train.checkpoint_every steps.
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long, value_enum, default_value = "style")]
    kind: KindArg,
    #[arg(long, value_enum, default_value = "tiny")]
    preset: Preset,
    /// Conditioning mode of a style model.
    #[arg(long, default_value = "in_attention")]
    mode: ConditioningMode,
    #[arg(long)]
    steps: Option<u64>,
    /// Continue from this checkpoint, restoring optimizer state.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Training log (comma-separated records).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct TransferArgs {
    input: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    /// Rhythm overrides: "+n", "-n", "=n", a comma list with one entry per
    /// bar, or an attribute file.
    #[arg(long, default_value = "+0", allow_hyphen_values = true)]
    rhym: String,
    /// Polyphony overrides, same syntax as --rhym.
    #[arg(long, default_value = "+0", allow_hyphen_values = true)]
    poly: String,
    /// Window in bars for long inputs; defaults to the training crop.
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    /// Also write tokens of the result.
    #[arg(long)]
    tokens: Option<PathBuf>,
    /// Also write the achieved attribute table.
    #[arg(long)]
    attrs: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    setting: u8,
    #[arg(long, default_value_t = 20)]
    excerpts: usize,
    /// Attribute sets per excerpt (setting 1).
    #[arg(long, default_value_t = 5)]
    attr_sets: usize,
    /// Generations per excerpt (setting 2).
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 16)]
    bars: usize,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long, default_value_t = 3)]
    max_shift: i32,
    /// Fluency language model checkpoint for perplexity.
    #[arg(long)]
    lm: Option<PathBuf>,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

fn load_config(path: &Option<PathBuf>) -> Result<KeyValues, Box<dyn Error>> {
    let Some(path) = path else {
        return Ok(KeyValues::default());
    };
    let kv = KeyValues::parse(&fs::read_to_string(path)?)?;
    for (k, _) in kv.iter() {
        if !["model.", "train.", "sample."].iter().any(|p| k.starts_with(p)) {
            return Err(format!("{}: unknown key {k}", path.display()).into());
        }
    }
    kv.check_known("sample.", &["p", "tau", "max_tokens_per_bar"])?;
    Ok(kv)
}

fn sampling(kv: &KeyValues, seed: u64, p: Option<f64>, tau: Option<f64>) -> Result<SamplingConfig, Box<dyn Error>> {
    let mut s = SamplingConfig {
        seed,
        ..SamplingConfig::default()
    };
    kv.set("sample.p", &mut s.p)?;
    kv.set("sample.tau", &mut s.tau)?;
    kv.set("sample.max_tokens_per_bar", &mut s.max_tokens_per_bar)?;
    if let Some(p) = p {
        s.p = p;
    }
    if let Some(t) = tau {
        s.tau = t;
    }
    s.validate()?;
    Ok(s)
}

fn read_score(path: &Path, sub_beats: u16) -> Result<barmorph::midi::QuantizedScore, Box<dyn Error>> {
    let bytes = fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(quantize(&parse_midi(&bytes)?, sub_beats)?)
}

fn default_window(bundle: &ModelBundle) -> usize {
    bundle.extra.get::<usize>("train.k_crop").ok().flatten().unwrap_or(16).max(2)
}

fn cmd_tokenize(input: &Path, output: &Path, reverse: bool, sub_beats: u16, chords: bool) -> CliResult {
    let vocab = Vocab::new(sub_beats);
    if reverse {
        let tokens = read_token_text(&fs::read_to_string(input)?, &vocab)?;
        let d = detokenize(&tokens, &vocab)?;
        if d.skipped > 0 {
            log::warn!("{} tokens did not fit the grammar and were dropped", d.skipped);
        }
        fs::write(output, write_midi(&d.score))?;
    } else {
        let q = read_score(input, sub_beats)?;
        let seq = tokenize_with(&q, &vocab, TokenizeOptions { chords })?;
        fs::write(output, write_token_text(&seq.tokens, &vocab))?;
        log::info!("{} bars, {} tokens", seq.n_bars(), seq.len());
    }
    Ok(())
}

fn cmd_attrs(input: &Path, output: Option<&Path>, corpus: Option<&Path>, ckpt: Option<&Path>, sub_beats: u16) -> CliResult {
    let (bins, sub_beats) = if let Some(dir) = corpus {
        let c = Corpus::load(dir)?;
        (c.manifest.bins.clone(), c.manifest.sub_beats_per_bar)
    } else if let Some(path) = ckpt {
        let b = ModelBundle::load(path)?;
        (b.bins.clone(), b.sub_beats_per_bar)
    } else {
        (AttributeBins::reference(), sub_beats)
    };
    let q = read_score(input, sub_beats)?;
    let rows = compute_attributes(&q, &bins);
    match output {
        Some(p) => write_attribute_file(fs::File::create(p)?, &rows)?,
        None => write_attribute_file(std::io::stdout().lock(), &rows)?,
    }
    Ok(())
}

fn cmd_train(args: &TrainArgs, kv: &KeyValues, seed: u64) -> CliResult {
    let corpus = Corpus::load(&args.corpus)?;
    let vocab = corpus.vocab();
    let mut train_cfg = TrainConfig::from_kv(
        kv,
        TrainConfig {
            seed,
            ..TrainConfig::default()
        },
    )?;
    if let Some(s) = args.steps {
        train_cfg.steps = s;
    }
    train_cfg.validate()?;
    let examples = corpus.examples(Split::Train);
    let val = corpus.examples(Split::Val);
    let mut bundle = match &args.resume {
        Some(path) => ModelBundle::load(path)?,
        None => {
            let kind = match args.kind {
                KindArg::Style => ModelKind::Style,
                KindArg::Lm => ModelKind::Lm,
            };
            let mode = match kind {
                ModelKind::Style => args.mode,
                ModelKind::Lm => ConditioningMode::Unconditional,
            };
            let base = match args.preset {
                Preset::Tiny => ModelConfig::tiny(vocab.len(), mode),
                Preset::Reference => ModelConfig::reference(vocab.len()),
            };
            let mut cfg = ModelConfig::from_kv(kv, ModelConfig { mode, ..base })?;
            cfg.vocab_size = vocab.len();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            ModelBundle::init(kind, cfg, corpus.manifest.bins.clone(), corpus.manifest.sub_beats_per_bar, &mut rng)?
        }
    };
    let mut extra = KeyValues::default();
    train_cfg.to_kv(&mut extra);
    bundle.extra = extra;
    let mut log_file = match &args.log {
        Some(p) => Some(fs::OpenOptions::new().create(true).append(true).open(p)?),
        None => None,
    };
    match bundle.kind {
        ModelKind::Style => {
            let model = bundle.style_model()?;
            run_training(model, &mut bundle, train_cfg, vocab, &examples, &val, log_file.as_mut(), &args.output)
        }
        ModelKind::Lm => {
            let model = bundle.lm()?;
            run_training(model, &mut bundle, train_cfg, vocab, &examples, &val, log_file.as_mut(), &args.output)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_training<M: Objective>(
    model: M,
    bundle: &mut ModelBundle,
    cfg: TrainConfig,
    vocab: Vocab,
    examples: &[Example],
    val: &[Example],
    log: Option<&mut fs::File>,
    output: &Path,
) -> CliResult {
    let store = std::mem::take(&mut bundle.store);
    let mut trainer = match bundle.adam.take() {
        Some(adam) => Trainer::resume(model, store, adam, bundle.step, cfg, vocab),
        None => Trainer::new(model, store, cfg, vocab),
    };
    if let Some(w) = &log {
        if w.metadata()?.len() == 0 && trainer.step > 0 {
            writeln!(&**w, "{LOG_HEADER}")?;
        }
    }
    let snapshot = |t: &Trainer<M>| -> Result<(), barmorph::train::TrainError> {
        let b = ModelBundle {
            step: t.step,
            store: t.store.clone(),
            adam: Some(t.adam.clone()),
            ..bundle.clone()
        };
        b.save(output)
            .map_err(|e| barmorph::train::TrainError::Io(std::io::Error::other(e.to_string())))?;
        log::info!("checkpoint at step {} written to {}", t.step, output.display());
        Ok(())
    };
    trainer.fit(examples, log, snapshot)?;
    if !val.is_empty() {
        let nll = trainer.evaluate(val)?;
        println!("validation nll {nll:.4} ppl {:.3}", nll.exp());
    }
    Ok(())
}

fn cmd_transfer(args: &TransferArgs, kv: &KeyValues, seed: u64) -> CliResult {
    let bundle = ModelBundle::load(&args.ckpt)?;
    let model = bundle.style_model()?;
    let vocab = bundle.vocab();
    let q = read_score(&args.input, bundle.sub_beats_per_bar)?;
    let tokens = tokenize_with(&q, &vocab, TokenizeOptions::default())?.tokens;
    let src = compute_attributes(&q, &bundle.bins);
    let src_r: Vec<u8> = src.iter().map(|a| a.a_rhym).collect();
    let src_p: Vec<u8> = src.iter().map(|a| a.a_poly).collect();
    let rhym = attribute_arg(&args.rhym, &src_r, |r| r.a_rhym)?;
    let poly = attribute_arg(&args.poly, &src_p, |r| r.a_poly)?;
    let cfg = sampling(kv, seed, args.p, args.tau)?;
    let window = args.window.unwrap_or_else(|| default_window(&bundle));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gen = sliding_window_transfer(&model, &bundle.store, &tokens, &rhym, &poly, window, &cfg, &mut rng)?;
    let out = detokenize(&gen.tokens, &vocab)?.score;
    fs::write(&args.output, write_midi(&out))?;
    if let Some(p) = &args.tokens {
        fs::write(p, write_token_text(&gen.tokens, &vocab))?;
    }
    if let Some(p) = &args.attrs {
        write_attribute_file(fs::File::create(p)?, &compute_attributes(&out, &bundle.bins))?;
    }
    let cut = gen.truncated.iter().filter(|&&t| t).count();
    if cut > 0 {
        log::warn!("{cut} bars hit the token cap");
    }
    log::info!("{} bars written to {}", out.n_bars(), args.output.display());
    Ok(())
}

/// An attribute file supplies absolute classes; anything else is parsed
/// as override syntax.
fn attribute_arg(
    arg: &str,
    source: &[u8],
    column: impl Fn(&barmorph::attributes::BarAttributes) -> u8,
) -> Result<Vec<u8>, Box<dyn Error>> {
    let path = Path::new(arg);
    if path.is_file() {
        let rows = read_attribute_file(fs::File::open(path)?)?;
        if rows.len() != source.len() {
            return Err(format!("{arg}: {} rows for {} bars", rows.len(), source.len()).into());
        }
        return Ok(rows.iter().map(column).collect());
    }
    Ok(arg.parse::<OverrideSpec>()?.resolve(source)?)
}

fn cmd_evaluate(args: &EvaluateArgs, kv: &KeyValues, seed: u64) -> CliResult {
    let bundle = ModelBundle::load(&args.ckpt)?;
    let model = bundle.style_model()?;
    let corpus = Corpus::load(&args.corpus)?;
    let excerpts = select_excerpts(&corpus, args.excerpts, args.bars, seed)?;
    let proto = ProtocolConfig {
        max_shift: args.max_shift,
        window: args.window.unwrap_or_else(|| default_window(&bundle)),
        sampling: sampling(kv, seed, None, None)?,
        seed,
    };
    let report = if args.setting == 1 {
        let lm = match &args.lm {
            Some(p) => Some(ModelBundle::load(p)?),
            None => None,
        };
        let lm_dec: Option<Decoder> = lm.as_ref().map(|b| b.lm().map(|m: ConditionedLm| m.decoder)).transpose()?;
        let fluency = lm.as_ref().zip(lm_dec.as_ref()).map(|(b, d)| (d, &b.store));
        evaluate_setting1(&model, &bundle.store, &bundle.bins, &excerpts, args.attr_sets, &proto, fluency)?.to_string()
    } else {
        evaluate_setting2(&model, &bundle.store, &bundle.bins, &excerpts, args.repeats, &proto)?.to_string()
    };
    let header = format!(
        "checkpoint {}\nstep {}\ncorpus {}\nseed {seed}\n",
        args.ckpt.display(),
        bundle.step,
        args.corpus.display()
    );
    match &args.output {
        Some(p) => fs::write(p, format!("{header}{report}"))?,
        None => print!("{header}{report}"),
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    let kv = load_config(&cli.config)?;
    match &cli.command {
        Command::Tokenize {
            input,
            output,
            reverse,
            sub_beats,
            chords,
        } => cmd_tokenize(input, output, *reverse, *sub_beats, *chords),
        Command::Attrs {
            input,
            output,
            corpus,
            ckpt,
            sub_beats,
        } => cmd_attrs(input, output.as_deref(), corpus.as_deref(), ckpt.as_deref(), *sub_beats),
        Command::SynthCorpus { output, pieces, bars } => {
            let c = generate_synthetic(*pieces, *bars, cli.seed)?;
            c.save(output)?;
            log::info!("{} pieces written to {}", c.pieces.len(), output.display());
            Ok(())
        }
        Command::Ingest {
            input,
            output,
            sub_beats,
        } => {
            let c = ingest(input, *sub_beats, cli.seed)?;
            for s in &c.manifest.skipped {
                log::warn!("skipped {}: {}", s.path, s.reason);
            }
            c.save(output)?;
            log::info!("{} pieces written to {}", c.pieces.len(), output.display());
            Ok(())
        }
        Command::Train(args) => cmd_train(args, &kv, cli.seed),
        Command::Transfer(args) => cmd_transfer(args, &kv, cli.seed),
        Command::Evaluate(args) => cmd_evaluate(args, &kv, cli.seed),
        Command::Serve {
            port,
            store,
            ckpt,
            workers,
            host,
        } => {
            let svc = Service::open(ServiceConfig {
                store_dir: store.clone(),
                checkpoint: ckpt.clone(),
                workers: *workers,
                sub_beats_per_bar: 16,
            })?;
            let addr: std::net::SocketAddr = format!("{host}:{port}").parse()?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve(svc, addr))?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
