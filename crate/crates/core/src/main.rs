use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use sentvae::asc::LanguageModelPrior;
use sentvae::checkpoint::{load_prior, save_prior, Checkpoint};
use sentvae::config::{AdamConfig, Mode, ModelConfig, PriorConfig, TrainingConfig};
use sentvae::data::{
    generate_synthetic_task, load_corpus, tokenize, write_lines, write_paired_tsv, CorpusFormat,
    LoadOptions, Pair, Sentence, SynthConfig, VocabRole, Vocabularies, Vocabulary,
};
use sentvae::decode::{compress, DecodeMode};
use sentvae::error::Error;
use sentvae::eval::{fsc_perplexity, lm_perplexity, rouge_files};
use sentvae::model::SentenceModel;
use sentvae::train::{train_prior, PriorTraining, StepMetrics, Trainer, TrainingData};
use sentvae::verify;

#[derive(Parser)]
#[command(
    name = "sentvae",
    version,
    about = "Sentence compression with a discrete-latent auto-encoder"
)]
struct Cli {
    /// Keep digits as they are instead of masking them to `#`.
    #[arg(long, global = true)]
    no_mask_digits: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train the language-model prior on unlabelled sentences.
    LmTrain(LmTrainArgs),
    /// Train the compression model.
    Train(Box<TrainArgs>),
    /// Compress sentences with a trained model.
    Compress(CompressArgs),
    /// Report ROUGE and perplexity.
    Evaluate(EvaluateArgs),
    /// Write a synthetic keyword-compression corpus.
    Synth(SynthArgs),
    /// Finite-difference checks of every layer and loss.
    GradCheck(GradCheckArgs),
    /// Estimator, bound and support checks against exact enumeration.
    OracleCheck(OracleCheckArgs),
}

#[derive(Args)]
struct LmTrainArgs {
    /// Unlabelled sentences, one per line.
    #[arg(long, required = true, num_args = 1..)]
    unlabelled: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    steps: u64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 2e-4)]
    lr: f64,
    #[arg(long, default_value_t = PriorConfig::default().embed_dim)]
    embed_dim: usize,
    #[arg(long, default_value_t = PriorConfig::default().hidden_dim)]
    hidden_dim: usize,
    #[arg(long, default_value_t = PriorConfig::default().layers)]
    layers: usize,
    #[arg(long, default_value_t = PriorConfig::default().dropout)]
    dropout: f64,
    /// Vocabulary size including the reserved symbols.
    #[arg(long, default_value_t = PriorConfig::default().vocab_size)]
    vocab_size: usize,
    #[arg(long, default_value_t = 1)]
    min_count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print the per-token loss every this many steps.
    #[arg(long, default_value_t = 100)]
    log_every: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Fsc,
    Asc,
    Joint,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Fsc => Mode::FscOnly,
            ModeArg::Asc => Mode::AscOnly,
            ModeArg::Joint => Mode::Joint,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    mode: ModeArg,
    /// Labelled pairs as `source TAB compression` lines.
    #[arg(long, num_args = 1..)]
    labelled: Vec<PathBuf>,
    /// Unlabelled sources, one per line.
    #[arg(long, num_args = 1..)]
    unlabelled: Vec<PathBuf>,
    /// Pre-trained prior (from `lm-train`, or a model checkpoint holding one).
    #[arg(long)]
    prior: Option<PathBuf>,
    /// Continue from a checkpoint; its configuration replaces the flags.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value = "model.ckpt")]
    out: PathBuf,
    /// Tab-separated metrics, one line per step.
    #[arg(long, default_value = "metrics.tsv")]
    metrics: PathBuf,
    #[arg(long, default_value_t = TrainingConfig::default().lambda)]
    lambda: f64,
    #[arg(long, default_value_t = TrainingConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = AdamConfig::default().learning_rate)]
    lr: f64,
    /// Separate step size for the baselines.
    #[arg(long)]
    baseline_lr: Option<f64>,
    #[arg(long, default_value_t = TrainingConfig::default().beam_size)]
    beam: usize,
    /// Latent samples per unlabelled sentence.
    #[arg(long, default_value_t = TrainingConfig::default().samples)]
    samples: usize,
    #[arg(long, default_value_t = TrainingConfig::default().seed)]
    seed: u64,
    #[arg(long, default_value_t = TrainingConfig::default().epochs)]
    epochs: usize,
    /// Fixed number of steps instead of whole epochs.
    #[arg(long)]
    steps: Option<u64>,
    /// Global gradient-norm threshold; 0 disables clipping.
    #[arg(long, default_value_t = 5.0)]
    clip_norm: f64,
    #[arg(long, default_value_t = TrainingConfig::default().unlabelled_per_labelled)]
    unlabelled_per_labelled: usize,
    #[arg(long, default_value_t = ModelConfig::default().embed_dim)]
    embed_dim: usize,
    #[arg(long, default_value_t = ModelConfig::default().hidden_dim)]
    hidden_dim: usize,
    #[arg(long, default_value_t = ModelConfig::default().attention_dim)]
    attention_dim: usize,
    /// Depth of both the encoder and the compressor.
    #[arg(long, default_value_t = ModelConfig::default().encoder_layers)]
    layers: usize,
    #[arg(long, default_value_t = ModelConfig::default().encoder_vocab_size)]
    encoder_vocab: usize,
    #[arg(long, default_value_t = ModelConfig::default().compressor_vocab_size)]
    compressor_vocab: usize,
    #[arg(long, default_value_t = ModelConfig::default().decoder_vocab_size)]
    decoder_vocab: usize,
    #[arg(long, default_value_t = ModelConfig::default().min_count)]
    min_count: usize,
    #[arg(long)]
    share_embeddings: bool,
    #[arg(long, default_value_t = ModelConfig::default().init_scale)]
    init_scale: f64,
    /// Print the resolved configuration as JSON and exit.
    #[arg(long)]
    dump_config: bool,
    /// Print a progress line every this many steps.
    #[arg(long, default_value_t = 100)]
    log_every: u64,
}

impl TrainArgs {
    fn configs(&self) -> (ModelConfig, TrainingConfig) {
        let model = ModelConfig {
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            attention_dim: self.attention_dim,
            encoder_layers: self.layers,
            compressor_layers: self.layers,
            share_embeddings: self.share_embeddings,
            encoder_vocab_size: self.encoder_vocab,
            compressor_vocab_size: self.compressor_vocab,
            decoder_vocab_size: self.decoder_vocab,
            min_count: self.min_count,
            baseline_hidden: self.hidden_dim,
            init_scale: self.init_scale,
            ..ModelConfig::default()
        };
        let training = TrainingConfig {
            mode: self.mode.into(),
            batch_size: self.batch_size,
            lambda: self.lambda,
            samples: self.samples,
            adam: AdamConfig {
                learning_rate: self.lr,
                baseline_learning_rate: self.baseline_lr,
                ..AdamConfig::default()
            },
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
            epochs: self.epochs,
            unlabelled_per_labelled: self.unlabelled_per_labelled,
            beam_size: self.beam,
            seed: self.seed,
        };
        (model, training)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DecodeArg {
    Extractive,
    Abstractive,
}

#[derive(Args)]
struct CompressArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Sentences, one per line; standard input when absent.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Standard output when absent.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "extractive")]
    mode: DecodeArg,
    /// Beam width; the checkpoint's setting when absent.
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    length_penalty: Option<f64>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// System compressions, one per line.
    #[arg(long, requires = "references")]
    candidates: Option<PathBuf>,
    /// Reference compressions aligned with the candidates.
    #[arg(long)]
    references: Option<PathBuf>,
    /// Model whose forced-attention perplexity is measured on `--pairs`.
    #[arg(long, requires = "pairs")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// Prior whose perplexity is measured on `--sentences`.
    #[arg(long, requires = "sentences")]
    prior: Option<PathBuf>,
    #[arg(long)]
    sentences: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 2000)]
    labelled: usize,
    #[arg(long, default_value_t = 20_000)]
    unlabelled: usize,
    #[arg(long, default_value_t = 500)]
    test: usize,
    #[arg(long, default_value_t = 400)]
    keywords: usize,
    #[arg(long, default_value_t = 20)]
    noise: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct OracleCheckArgs {
    #[arg(long, default_value_t = 5)]
    instances: usize,
    /// Single-sample draws per unbiasedness instance.
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    /// Randomised pointer-support trials.
    #[arg(long, default_value_t = 100_000)]
    trials: usize,
    /// Also measure baseline variance reduction on a briefly trained toy model.
    #[arg(long)]
    variance: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Process exit statuses.
const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Numerical(_)) => EXIT_NUMERICAL,
        Some(Error::InvalidArgument(_) | Error::Shape { .. }) => EXIT_USAGE,
        Some(_) => EXIT_DATA,
        None if err.downcast_ref::<io::Error>().is_some() => EXIT_DATA,
        None => EXIT_USAGE,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let opts = LoadOptions {
        mask_digits: !cli.no_mask_digits,
    };
    let result = match cli.command {
        Command::LmTrain(a) => lm_train(a, opts),
        Command::Train(a) => train(*a, opts),
        Command::Compress(a) => compress_cmd(a, opts),
        Command::Evaluate(a) => evaluate(a, opts),
        Command::Synth(a) => synth(a),
        Command::GradCheck(a) => grad_check(a),
        Command::OracleCheck(a) => oracle_check(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn unlabelled_sentences(paths: &[PathBuf], opts: LoadOptions) -> anyhow::Result<Vec<Sentence>> {
    Ok(load_corpus(paths, CorpusFormat::UnlabelledLines, opts)?.unlabelled)
}

fn lm_train(a: LmTrainArgs, opts: LoadOptions) -> anyhow::Result<u8> {
    let sentences = unlabelled_sentences(&a.unlabelled, opts)?;
    let vocab = Vocabulary::build(
        sentences.iter().flatten().map(String::as_str),
        a.vocab_size,
        a.min_count,
        VocabRole::Lm,
    )?;
    let cfg = PriorConfig {
        embed_dim: a.embed_dim,
        hidden_dim: a.hidden_dim,
        layers: a.layers,
        dropout: a.dropout,
        vocab_size: vocab.len(),
    };
    let mut prior = LanguageModelPrior::new(cfg, vocab, a.seed)?;
    let training = PriorTraining {
        steps: a.steps,
        batch_size: a.batch_size,
        adam: AdamConfig {
            learning_rate: a.lr,
            ..AdamConfig::default()
        },
        clip_norm: Some(5.0),
        seed: a.seed,
    };
    let history = train_prior(&mut prior, &sentences, &training)?;
    for (step, nll) in history.iter().enumerate() {
        let step = step as u64 + 1;
        if a.log_every > 0 && (step.is_multiple_of(a.log_every) || step == a.steps) {
            eprintln!("step {step}\tnll/token {nll:.4}");
        }
    }
    save_prior(&a.out, &prior)?;
    eprintln!("prior written to {}", a.out.display());
    Ok(0)
}

#[derive(Serialize)]
struct ConfigDump<'a> {
    model: &'a ModelConfig,
    training: &'a TrainingConfig,
}

fn train(a: TrainArgs, opts: LoadOptions) -> anyhow::Result<u8> {
    let (model_cfg, training_cfg) = a.configs();
    if a.dump_config {
        let dump = ConfigDump {
            model: &model_cfg,
            training: &training_cfg,
        };
        let mut out = io::stdout().lock();
        writeln!(out, "{}", serde_json::to_string_pretty(&dump)?).map_err(Error::Io)?;
        return Ok(0);
    }
    let mode: Mode = a.mode.into();
    if mode.uses_labelled() && a.labelled.is_empty() {
        return Err(
            Error::InvalidArgument(format!("--mode {} needs --labelled", mode_name(mode))).into(),
        );
    }
    if mode.uses_unlabelled() && a.unlabelled.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "--mode {} needs --unlabelled",
            mode_name(mode)
        ))
        .into());
    }
    let labelled = if mode.uses_labelled() {
        load_corpus(&a.labelled, CorpusFormat::PairedTsv, opts)?.labelled
    } else {
        Vec::new()
    };
    let unlabelled = if mode.uses_unlabelled() {
        unlabelled_sentences(&a.unlabelled, opts)?
    } else {
        Vec::new()
    };

    let (mut trainer, fresh) = match &a.resume {
        Some(path) => {
            let ck =
                Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            if ck.training.mode != mode {
                bail!(Error::InvalidArgument(format!(
                    "checkpoint was trained with mode {}",
                    mode_name(ck.training.mode)
                )));
            }
            (ck.into_trainer()?, false)
        }
        None => {
            let prior = match (&a.prior, mode.uses_unlabelled()) {
                (Some(p), _) => {
                    Some(load_prior(p).with_context(|| format!("loading prior {}", p.display()))?)
                }
                (None, true) => {
                    return Err(
                        Error::MissingComponent("language model prior (pass --prior)").into(),
                    )
                }
                (None, false) => None,
            };
            let vocabs = Vocabularies::build(
                &labelled,
                &unlabelled,
                model_cfg.encoder_vocab_size,
                model_cfg.compressor_vocab_size,
                model_cfg.decoder_vocab_size,
                model_cfg.min_count,
                model_cfg.share_embeddings,
            )?;
            let model = SentenceModel::new(model_cfg, vocabs, training_cfg.seed)?;
            (Trainer::new(model, prior, training_cfg)?, true)
        }
    };
    let data = TrainingData::new(&trainer.model, &labelled, &unlabelled)?;
    let total = match a.steps {
        Some(s) => s,
        None => trainer.steps_per_epoch(&data) * trainer.config.epochs as u64,
    };
    let remaining = total.saturating_sub(if fresh { 0 } else { trainer.step });

    let mut metrics = open_metrics(&a.metrics, fresh)?;
    let start = Instant::now();
    let log_every = a.log_every;
    trainer.run(&data, remaining, |m: &StepMetrics| {
        writeln!(metrics, "{}", m.to_tsv())?;
        if log_every > 0 && m.step.is_multiple_of(log_every) {
            eprintln!(
                "step {}\t{:.0}s\telbo {}\tfsc_nll {}",
                m.step,
                start.elapsed().as_secs_f64(),
                fmt_opt(m.elbo),
                fmt_opt(m.fsc_nll)
            );
        }
        Ok(())
    })?;
    metrics.flush()?;
    Checkpoint::from_trainer(&trainer).save(&a.out)?;
    eprintln!(
        "{} steps done; checkpoint written to {}",
        trainer.step,
        a.out.display()
    );
    Ok(0)
}

fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::FscOnly => "fsc",
        Mode::AscOnly => "asc",
        Mode::Joint => "joint",
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

fn open_metrics(path: &Path, fresh: bool) -> anyhow::Result<BufWriter<File>> {
    let exists = path.exists() && fs::metadata(path)?.len() > 0;
    let file = if fresh {
        File::create(path)?
    } else {
        OpenOptions::new().create(true).append(true).open(path)?
    };
    let mut w = BufWriter::new(file);
    if fresh || !exists {
        writeln!(w, "{}", StepMetrics::HEADER)?;
    }
    Ok(w)
}

fn compress_cmd(a: CompressArgs, opts: LoadOptions) -> anyhow::Result<u8> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let beam = a.beam.unwrap_or(ck.training.beam_size);
    let mode = match a.mode {
        DecodeArg::Extractive => DecodeMode::Extractive,
        DecodeArg::Abstractive => DecodeMode::Abstractive,
    };
    let input: Box<dyn BufRead> = match &a.input {
        Some(p) => Box::new(io::BufReader::new(File::open(p).map_err(Error::Io)?)),
        None => Box::new(io::stdin().lock()),
    };
    let mut output: Box<dyn Write> = match &a.output {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(Error::Io)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    for line in input.lines() {
        let sentence = tokenize(&line.map_err(Error::Io)?, opts);
        if sentence.is_empty() {
            writeln!(output)?;
            continue;
        }
        let src = ck.model.view(&sentence)?;
        let c = compress(&ck.model, &src, mode, beam, a.length_penalty)?;
        writeln!(output, "{}", c.words.join(" "))?;
    }
    output.flush()?;
    Ok(0)
}

fn evaluate(a: EvaluateArgs, opts: LoadOptions) -> anyhow::Result<u8> {
    let mut any = false;
    if let (Some(c), Some(r)) = (&a.candidates, &a.references) {
        let summary = rouge_files(c, r)?;
        println!("ROUGE over {} pairs", summary.pairs);
        print!("{}", summary.table());
        any = true;
    }
    if let (Some(ck), Some(pairs)) = (&a.checkpoint, &a.pairs) {
        let ck = Checkpoint::load(ck)?;
        let pairs: Vec<Pair> =
            load_corpus(std::slice::from_ref(pairs), CorpusFormat::PairedTsv, opts)?.labelled;
        let views = pairs
            .into_iter()
            .map(|p| Ok((ck.model.view(&p.source)?, p.compression)))
            .collect::<sentvae::error::Result<Vec<_>>>()?;
        println!(
            "compression perplexity\t{:.4}",
            fsc_perplexity(&ck.model, &views)?
        );
        any = true;
    }
    if let (Some(prior), Some(sentences)) = (&a.prior, &a.sentences) {
        let prior = load_prior(prior)?;
        let sentences = unlabelled_sentences(std::slice::from_ref(sentences), opts)?;
        println!(
            "prior perplexity\t{:.4}",
            lm_perplexity(&prior, &sentences)?
        );
        any = true;
    }
    if !any {
        bail!(Error::InvalidArgument(
            "nothing to evaluate: pass --candidates/--references, --checkpoint/--pairs or --prior/--sentences".into()
        ));
    }
    Ok(0)
}

fn synth(a: SynthArgs) -> anyhow::Result<u8> {
    let cfg = SynthConfig::with_sizes(
        a.labelled + a.unlabelled,
        a.test,
        a.keywords,
        a.noise,
        a.seed,
    );
    let task = generate_synthetic_task(&cfg)?;
    let mut train = task.train.labelled;
    let unlabelled: Vec<Sentence> = train
        .split_off(a.labelled)
        .into_iter()
        .map(|p| p.source)
        .collect();
    fs::create_dir_all(&a.out_dir).map_err(Error::Io)?;
    write_paired_tsv(&a.out_dir.join("train.tsv"), &train)?;
    write_lines(&a.out_dir.join("unlabelled.txt"), &unlabelled)?;
    write_paired_tsv(&a.out_dir.join("test.tsv"), &task.test.labelled)?;
    let test_sources: Vec<Sentence> = task
        .test
        .labelled
        .iter()
        .map(|p| p.source.clone())
        .collect();
    let test_refs: Vec<Sentence> = task
        .test
        .labelled
        .iter()
        .map(|p| p.compression.clone())
        .collect();
    write_lines(&a.out_dir.join("test.src"), &test_sources)?;
    write_lines(&a.out_dir.join("test.ref"), &test_refs)?;
    eprintln!(
        "{} labelled, {} unlabelled, {} test pairs written to {}",
        train.len(),
        unlabelled.len(),
        test_sources.len(),
        a.out_dir.display()
    );
    Ok(0)
}

fn grad_check(a: GradCheckArgs) -> anyhow::Result<u8> {
    let cases = verify::gradient_suite(a.seed)?;
    let mut failed = 0;
    for case in &cases {
        let ok = case.report.passed();
        failed += usize::from(!ok);
        println!(
            "{:<24} {} max_rel_err={:.3e}",
            case.name,
            if ok { "ok  " } else { "FAIL" },
            case.report.max_rel_error()
        );
        if !ok {
            print!("{}", case.report);
        }
    }
    println!(
        "{} of {} checks passed (tolerance {:e})",
        cases.len() - failed,
        cases.len(),
        verify::GRADIENT_TOLERANCE
    );
    Ok(if failed == 0 { 0 } else { EXIT_NUMERICAL })
}

fn oracle_check(a: OracleCheckArgs) -> anyhow::Result<u8> {
    let mut ok = true;
    println!("estimator unbiasedness ({} draws per instance)", a.samples);
    for inst in verify::unbiasedness(a.instances, a.samples, a.seed)? {
        let pass = inst.fraction() >= 0.99;
        ok &= pass;
        println!(
            "  {:<24} lambda={:<4} sequences={:<3} within 3 SE: {}/{} max z={:.2} {}",
            inst.source.join(" "),
            inst.lambda,
            inst.latent_sequences,
            inst.within,
            inst.coordinates,
            inst.max_z,
            if pass { "ok" } else { "FAIL" }
        );
    }
    println!("lower bound consistency");
    for b in verify::lower_bound_consistency(a.instances, a.samples.min(20_000), a.seed)? {
        let pass = b.bound_holds() && b.mc_agrees();
        ok &= pass;
        println!(
            "  {:<24} bound={:.6} log marginal={:.6} monte carlo={:.6}±{:.6} {}",
            b.source.join(" "),
            b.elbo,
            b.log_marginal,
            b.mc_mean,
            b.mc_se,
            if pass { "ok" } else { "FAIL" }
        );
    }
    let s = verify::support_trials(a.trials, 1000, a.seed)?;
    let pass = s.out_of_source == 0 && s.max_mass_error <= 1e-9;
    ok &= pass;
    println!(
        "pointer support: {} trials, {} out-of-source samples, combined mass error {:.2e} over {} steps {}",
        s.trials,
        s.out_of_source,
        s.max_mass_error,
        s.steps_checked,
        if pass { "ok" } else { "FAIL" }
    );
    if a.variance {
        let snap = verify::mid_training_snapshot(300, a.seed)?;
        let v = verify::variance_reduction(
            &snap.model,
            &snap.prior,
            &snap.sources,
            snap.lambda,
            10_000,
            a.seed,
        )?;
        let pass = v.reduction() >= 0.10;
        ok &= pass;
        println!(
            "baseline variance: trained {:.4e} vs zero {:.4e} ({:.1}% lower) {}",
            v.learned,
            v.zero,
            100.0 * v.reduction(),
            if pass { "ok" } else { "FAIL" }
        );
    }
    Ok(if ok { 0 } else { EXIT_NUMERICAL })
}
