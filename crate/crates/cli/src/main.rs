//! `demixkit`: drives the two-step de-mixing protocol from the shell.
//!
//! Exit codes: 0 success, 1 usage, 2 data, 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use demixkit::audio::{synth_corpus, Corpus, CorpusManifest, Split, SynthParams};
use demixkit::config::ExperimentConfig;
use demixkit::demix::{train_head, training_pools, DemixVariant, Direction, TrainedHead};
use demixkit::embedding::{build_bank, train_step_one, EmbeddingBank, StepOneModel};
use demixkit::error::{Error, ErrorKind, Result};
use demixkit::eval::{render_report, EvalReport, ReportFormat};
use demixkit::mixer::{load_pairs, sample_pairs, save_pairs};
use demixkit::pipeline::{check_bank, evaluate_heads, gradient_suite, run_grid, train_log_jsonl};
use demixkit::store::write_atomic;

#[derive(Parser)]
#[command(name = "demixkit", version, about = "Speaker-embedding de-mixing toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-speaker corpus with a manifest.
    SynthData(SynthArgs),
    /// Train the embedding extractor and classifier on clean speech.
    TrainExtractor(TrainExtractorArgs),
    /// Average clean crop embeddings into a per-speaker bank.
    BuildBank(BuildBankArgs),
    /// Draw random target/interferer pairs from one split.
    SamplePairs(SamplePairsArgs),
    /// Train one de-mixing head on mixtures at one SNR.
    TrainDemix(TrainDemixArgs),
    /// Score trained heads, with the Before and Clean references.
    Evaluate(EvaluateArgs),
    /// Render a saved report.
    Report(ReportArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Run every stage for a configuration grid.
    RunGrid(RunGridArgs),
    /// Index a TIMIT-style directory tree into a manifest.
    TimitManifest(TimitArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    speakers: usize,
    #[arg(long, default_value_t = 8)]
    utts_per_speaker: usize,
    #[arg(long, default_value_t = 3.0)]
    duration_s: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Write into a non-empty directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seeds = demixkit::config::Seeds::all(s);
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainExtractorArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Training log; defaults to the checkpoint path with a `.log.jsonl` extension.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct BuildBankArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    extractor: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    segments: Option<usize>,
    #[arg(long)]
    crop_frames: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SamplePairsArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Pairs per SNR.
    #[arg(long, default_value_t = 200)]
    count: usize,
    /// Target-to-interferer SNR in dB; repeat for several.
    #[arg(long = "snr-db", required = true, allow_negative_numbers = true)]
    snr_db: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainDemixArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    extractor: PathBuf,
    #[arg(long)]
    bank: PathBuf,
    /// sub, mul, concat1, concat2, share-concat or separate-concat.
    #[arg(long)]
    variant: String,
    #[arg(long = "snr-db", allow_negative_numbers = true)]
    snr_db: f64,
    /// known-interferer (predict the target) or known-target (predict the interferer).
    #[arg(long, default_value = "known-interferer")]
    direction: String,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    extractor: PathBuf,
    #[arg(long)]
    bank: PathBuf,
    /// Directory of trained heads (`*.sedm`).
    #[arg(long)]
    heads: PathBuf,
    #[arg(long)]
    test_pairs: PathBuf,
    /// Report file (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Format printed to standard output.
    #[arg(long, default_value = "table")]
    format: String,
}

#[derive(Args)]
struct ReportArgs {
    /// Report written by `evaluate` or `run-grid`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "table")]
    format: String,
    /// Write here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 10)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = demixkit::autodiff::gradcheck::SUITE_TOLERANCE)]
    tolerance: f64,
}

#[derive(Args)]
struct RunGridArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
    /// Write into a non-empty directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TimitArgs {
    #[arg(long)]
    root: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Drop the two shared-transcription SA sentences of every speaker.
    #[arg(long)]
    exclude_sa: bool,
    #[arg(long)]
    out: PathBuf,
}

fn ensure_empty(dir: &Path, force: bool) -> Result<()> {
    if force || !dir.exists() {
        return Ok(());
    }
    let mut entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    if entries.next().is_some() {
        return Err(Error::Config(format!("{} is not empty; pass --force to write into it", dir.display())));
    }
    Ok(())
}

fn load_corpus(manifest: &Path) -> Result<Corpus> {
    let m = CorpusManifest::load(manifest)?;
    for w in m.warnings() {
        log::warn!("{w}");
    }
    Corpus::load(m)
}

fn synth_data(a: SynthArgs) -> Result<()> {
    let params = SynthParams {
        speakers: a.speakers,
        utts_per_speaker: a.utts_per_speaker,
        duration_s: a.duration_s,
        seed: a.seed,
    };
    // Count problems here are flag mistakes, not bad data.
    params.validate().map_err(|e| Error::Config(e.to_string()))?;
    ensure_empty(&a.out, a.force)?;
    let m = synth_corpus(&params, &a.out)?;
    println!(
        "wrote {} utterances ({} train, {} test) from {} speakers to {}",
        m.entries.len(),
        m.in_split(Split::Train).count(),
        m.in_split(Split::Test).count(),
        m.num_speakers(),
        a.out.display()
    );
    Ok(())
}

fn train_extractor(a: TrainExtractorArgs) -> Result<()> {
    let mut cfg = a.cfg.load()?;
    if let Some(e) = a.epochs {
        cfg.step_one.epochs = e;
    }
    let corpus = load_corpus(&a.manifest)?;
    let start = Instant::now();
    let (model, log) = train_step_one(&corpus, &cfg.extractor, &cfg.step_one, cfg.seeds.extractor, |r| {
        log::info!("epoch {} loss {:.4} holdout {:?}", r.epoch, r.loss, r.holdout_accuracy)
    })?;
    model.save(&a.out)?;
    let log_path = a.log.unwrap_or_else(|| a.out.with_extension("log.jsonl"));
    write_atomic(&log_path, train_log_jsonl(&log)?.as_bytes())?;
    println!(
        "trained {} epochs in {:.1} s; checkpoint {} ({}), log {}",
        log.len(),
        start.elapsed().as_secs_f64(),
        a.out.display(),
        model.fingerprint()?,
        log_path.display()
    );
    Ok(())
}

fn build_bank_cmd(a: BuildBankArgs) -> Result<()> {
    let cfg = a.cfg.load()?;
    let corpus = load_corpus(&a.manifest)?;
    let model = StepOneModel::load(&a.extractor)?;
    let bank = build_bank(
        &model.extractor,
        &model.fingerprint()?,
        &corpus,
        a.segments.unwrap_or(cfg.bank.segments_per_speaker),
        a.crop_frames.unwrap_or(cfg.bank.crop_frames),
        cfg.seeds.bank,
    )?;
    bank.save(&a.out)?;
    println!("bank of {} speakers written to {}", bank.len(), a.out.display());
    Ok(())
}

fn sample_pairs_cmd(a: SamplePairsArgs) -> Result<()> {
    let split = match a.split.as_str() {
        "train" => Split::Train,
        "test" => Split::Test,
        other => return Err(Error::Config(format!("unknown split {other:?}; expected train or test"))),
    };
    let manifest = CorpusManifest::load(&a.manifest)?;
    let mut pairs = Vec::new();
    for &snr in &a.snr_db {
        pairs.extend(sample_pairs(&manifest, split, a.count, snr, a.seed)?);
    }
    save_pairs(&a.out, &pairs)?;
    println!("{} pairs written to {}", pairs.len(), a.out.display());
    Ok(())
}

fn train_demix(a: TrainDemixArgs) -> Result<()> {
    let variant: DemixVariant = a.variant.parse()?;
    let direction: Direction = a.direction.parse()?;
    if !a.snr_db.is_finite() {
        return Err(Error::Config(format!("SNR {} is not finite", a.snr_db)));
    }
    let mut cfg = a.cfg.load()?;
    if let Some(e) = a.epochs {
        cfg.step_two.epochs = e;
    }
    let model = StepOneModel::load(&a.extractor)?;
    let bank = EmbeddingBank::load(&a.bank)?;
    let fp = check_bank(&model, &bank)?;
    let corpus = load_corpus(&a.manifest)?;
    let start = Instant::now();
    let pools = training_pools(&model.extractor, &corpus, a.snr_db, &cfg.step_two, cfg.seeds.demix)?;
    let (head, log) = train_head(variant, &pools, &bank, direction, &cfg.step_two, cfg.seeds.demix)?;
    let trained = TrainedHead {
        head,
        direction,
        snr_db: a.snr_db,
        seed: cfg.seeds.demix,
        extractor_fingerprint: fp,
        bank_fingerprint: bank.fingerprint()?,
        log,
    };
    trained.save(&a.out)?;
    println!(
        "{} at {} dB ({}): MAE {:.5} -> {:.5} in {:.1} s; head written to {}",
        variant.display_name(),
        a.snr_db,
        direction,
        trained.log.initial_mae,
        trained.log.final_mae,
        start.elapsed().as_secs_f64(),
        a.out.display()
    );
    Ok(())
}

fn load_heads(dir: &Path) -> Result<Vec<TrainedHead>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "sedm"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::MissingHeads(format!("no .sedm files in {}", dir.display())));
    }
    paths.iter().map(|p| TrainedHead::load(p)).collect()
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let format: ReportFormat = a.format.parse()?;
    let heads = load_heads(&a.heads)?;
    let model = StepOneModel::load(&a.extractor)?;
    let bank = EmbeddingBank::load(&a.bank)?;
    let pairs = load_pairs(&a.test_pairs)?;
    let corpus = load_corpus(&a.manifest)?;
    for p in &pairs {
        demixkit::mixer::validate_pair(&corpus.manifest, p)?;
    }
    let report = evaluate_heads(&model, &corpus, &bank, &heads, &pairs)?;
    write_atomic(&a.out, render_report(&report, ReportFormat::Json)?.as_bytes())?;
    print!("{}", render_report(&report, format)?);
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let format: ReportFormat = a.format.parse()?;
    let text = std::fs::read_to_string(&a.input).map_err(|e| Error::io(&a.input, e))?;
    let rendered = render_report(&EvalReport::from_json(&text)?, format)?;
    match a.out {
        Some(p) => write_atomic(&p, rendered.as_bytes()),
        None => {
            print!("{rendered}");
            Ok(())
        }
    }
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let start = Instant::now();
    let reports = gradient_suite(a.seed, a.trials)?;
    let mut failed = Vec::new();
    for r in &reports {
        let ok = r.passed(a.tolerance);
        println!(
            "{} {:<36} coords {:>6}  max rel err {:.3e}",
            if ok { "ok  " } else { "FAIL" },
            r.name,
            r.checked,
            r.max_rel_error
        );
        if !ok {
            failed.push(r.name.clone());
        }
    }
    println!(
        "{} checks, {} failed, tolerance {:e}, {:.1} s",
        reports.len(),
        failed.len(),
        a.tolerance,
        start.elapsed().as_secs_f64()
    );
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::GradCheck(failed.join(", ")))
    }
}

fn run_grid_cmd(a: RunGridArgs) -> Result<()> {
    let cfg = a.cfg.load()?;
    ensure_empty(&a.out, a.force)?;
    let outcome = run_grid(&cfg, &a.out)?;
    print!("{}", render_report(&outcome.report, ReportFormat::Table)?);
    Ok(())
}

fn timit_manifest(a: TimitArgs) -> Result<()> {
    let m = CorpusManifest::from_timit_layout(&a.root, a.seed, a.exclude_sa)?;
    // Absolute paths keep the manifest valid wherever it is written.
    let root = std::fs::canonicalize(&a.root).map_err(|e| Error::io(&a.root, e))?;
    let entries = m
        .entries
        .iter()
        .map(|e| {
            let mut e = e.clone();
            if e.path.is_relative() {
                e.path = root.join(&e.path);
            }
            e
        })
        .collect();
    let m = CorpusManifest::new(entries)?;
    m.save(&a.out)?;
    for w in m.warnings() {
        log::warn!("{w}");
    }
    println!("{} utterances from {} speakers written to {}", m.entries.len(), m.num_speakers(), a.out.display());
    Ok(())
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("DEMIXKIT_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("DEMIXKIT_THREADS must be a positive integer, got {v:?}")))?;
        if n == 0 {
            return Err(Error::Config("DEMIXKIT_THREADS must be positive".into()));
        }
        // The matrix kernels keep their own pool; cap it too unless set.
        if std::env::var_os("MATMUL_NUM_THREADS").is_none() {
            std::env::set_var("MATMUL_NUM_THREADS", n.to_string());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::SynthData(a) => synth_data(a),
        Command::TrainExtractor(a) => train_extractor(a),
        Command::BuildBank(a) => build_bank_cmd(a),
        Command::SamplePairs(a) => sample_pairs_cmd(a),
        Command::TrainDemix(a) => train_demix(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Report(a) => report(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::RunGrid(a) => run_grid_cmd(a),
        Command::TimitManifest(a) => timit_manifest(a),
    }
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Usage => 1,
        ErrorKind::Data => 2,
        ErrorKind::Numerical => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
