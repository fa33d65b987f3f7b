use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use macl::corpus::{
    generate_synthetic_split, load_corpus, load_generations, save_corpus, save_generations,
    write_atomic, Corpus, Split, SynthParams, Vocabulary,
};
use macl::decoding::{DecodeConfig, Strategy};
use macl::metrics::{build_report, KpHistogram, MetricsReport};
use macl::model::Checkpoint;
use macl::sampling::{mine_corpus, NegativeCache};
use macl::trainer::{
    generate, train_degenerator, train_model, Objective, Profile, RunRecord, TraceLine, TrainConfig,
};

mod report;

/// Knowledge-regurgitation experiments: synthetic data, training, mining,
/// decoding and scoring.
#[derive(Parser, Debug)]
#[command(name = "macl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write train, valid and test_seen splits of a synthetic corpus.
    Synth(SynthArgs),
    /// Train a model with the mle, nt or macl objective.
    Train(TrainArgs),
    /// Mine hard negatives from a frozen degenerator into a cache file.
    Mine(MineArgs),
    /// Decode a corpus with a trained model.
    Decode(DecodeArgs),
    /// Score generations against references.
    Score(ScoreArgs),
    /// Compare scored runs side by side.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    seed: u64,
    /// Training examples.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 200)]
    vocab_size: usize,
    #[arg(long)]
    shortcut_rate: f64,
    /// Validation examples; defaults to a tenth of `--n`.
    #[arg(long)]
    n_valid: Option<usize>,
    /// Test examples; defaults to a tenth of `--n`.
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// TOML (or JSON) file with TrainConfig keys; may set `profile`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base hyperparameters, overridden by the config file.
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Single-threaded, reproducible execution.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    objective: Option<String>,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    valid: PathBuf,
    /// Frozen degenerator for macl; trained first when omitted.
    #[arg(long)]
    degenerator: Option<PathBuf>,
    /// Output directory for model.ckpt, run.json and trace.jsonl.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct MineArgs {
    #[arg(long)]
    degenerator: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Defaults to a file under MACL_CACHE_DIR keyed by the degenerator hash.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "beam")]
    strategy: String,
    #[arg(long, default_value_t = 3)]
    beam_size: usize,
    #[arg(long, default_value_t = 0.9)]
    nucleus_p: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 48)]
    max_len: usize,
    #[arg(long)]
    length_normalize: bool,
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    /// Reference corpus.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    generations: PathBuf,
    /// Report JSON.
    #[arg(long)]
    out: PathBuf,
    /// Per-example CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Score reports or run.json files; labelled by file stem.
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    /// Directory for table and histogram CSVs.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write SVG histograms.
    #[arg(long)]
    plot: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    ExitCode::from(run(std::env::args_os()))
}

/// Runs the CLI and returns the process exit code.
fn run<I, T>(argv: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<InvalidMarker>().is_some() {
        return 1;
    }
    match e.downcast_ref::<macl::Error>() {
        Some(
            macl::Error::Config(_)
            | macl::Error::Parameter(_)
            | macl::Error::Validation { .. }
            | macl::Error::Malformed { .. }
            | macl::Error::DuplicateId(_),
        ) => 1,
        _ => 2,
    }
}

/// Marks an error as a validation failure.
#[derive(Debug)]
pub struct InvalidMarker(String);

impl std::fmt::Display for InvalidMarker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InvalidMarker {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(InvalidMarker(msg.into()))
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Mine(a) => mine(a),
        Command::Decode(a) => decode(a),
        Command::Score(a) => score(a),
        Command::Report(a) => report::run(&a.runs, a.out.as_deref(), a.plot),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let base = SynthParams {
        seed: a.seed,
        n_examples: a.n,
        vocab_size: a.vocab_size,
        shortcut_rate: a.shortcut_rate,
    };
    base.validate()?;
    let held_out = (a.n / 10).max(1);
    let splits = [
        (Split::Train, a.n),
        (Split::Valid, a.n_valid.unwrap_or(held_out)),
        (Split::TestSeen, a.n_test.unwrap_or(held_out)),
    ];
    for (split, n) in splits {
        let corpus = generate_synthetic_split(
            &SynthParams {
                n_examples: n,
                ..base
            },
            split,
        )?;
        let path = a.out.join(format!("{split}.jsonl"));
        save_corpus(&path, &corpus)?;
        log::info!("wrote {} examples to {}", corpus.len(), path.display());
    }
    Ok(())
}

fn split_of(path: &Path) -> Split {
    path.file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.parse().ok())
        .unwrap_or(Split::TestSeen)
}

fn read_corpus(path: &Path) -> Result<Corpus> {
    load_corpus(path, split_of(path)).with_context(|| format!("loading {}", path.display()))
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Profile defaults, then the config file, then command-line overrides.
fn load_config(args: &ConfigArgs, objective: Option<&str>) -> Result<TrainConfig> {
    let mut file: Option<toml::Value> = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            let value = if path.extension().is_some_and(|e| e == "json") {
                let json: serde_json::Value = serde_json::from_str(&text)
                    .map_err(|e| invalid(format!("{}: {e}", path.display())))?;
                toml::Value::try_from(json)
                    .map_err(|e| invalid(format!("{}: {e}", path.display())))?
            } else {
                toml::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?
            };
            Some(value)
        }
        None => None,
    };
    let file_profile = file
        .as_mut()
        .and_then(|v| v.as_table_mut())
        .and_then(|t| t.remove("profile"))
        .map(|v| {
            v.as_str()
                .map(str::to_string)
                .ok_or_else(|| invalid("profile must be a string"))
        })
        .transpose()?;
    let profile: Profile = match args.profile.as_deref().or(file_profile.as_deref()) {
        Some(p) => p.parse()?,
        None => Profile::Standard,
    };
    let mut value =
        toml::Value::try_from(TrainConfig::profile(profile)).context("serializing defaults")?;
    if let Some(f) = file {
        merge(&mut value, f);
    }
    let mut cfg: TrainConfig = value
        .try_into()
        .map_err(|e| invalid(format!("config: {e}")))?;
    if let Some(o) = objective {
        cfg.objective = o.parse()?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.deterministic |= args.deterministic;
    cfg.validate()?;
    Ok(cfg)
}

/// Cache file for a corpus, degenerator and mining setup under MACL_CACHE_DIR.
fn cache_path(data: &Path, hash: &str, cfg: &TrainConfig) -> Option<PathBuf> {
    let dir = std::env::var_os("MACL_CACHE_DIR")?;
    let stem = data
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("corpus");
    let setup = format!(
        "b{}-m{}-g{}-d{}-len{}",
        cfg.b, cfg.m, cfg.num_groups, cfg.diversity_penalty, cfg.model.max_target_len
    );
    Some(PathBuf::from(dir).join(format!("negatives-{stem}-{}-{setup}.jsonl", &hash[..16])))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)?;
    Ok(())
}

fn write_trace(path: &Path, trace: &[TraceLine]) -> Result<()> {
    let mut out = String::new();
    for line in trace {
        out.push_str(&serde_json::to_string(line)?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())?;
    Ok(())
}

fn save_run(
    dir: &Path,
    name: &str,
    checkpoint: &Checkpoint,
    record: &mut RunRecord,
    trace: &[TraceLine],
) -> Result<()> {
    let ckpt = format!("{name}.ckpt");
    checkpoint.save(&dir.join(&ckpt))?;
    record.best_checkpoint = Some(ckpt);
    let prefix = if name == "model" {
        String::new()
    } else {
        format!("{name}_")
    };
    write_json(&dir.join(format!("{prefix}run.json")), record)?;
    write_trace(&dir.join(format!("{prefix}trace.jsonl")), trace)
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = load_config(&a.config, a.objective.as_deref())?;
    let train = read_corpus(&a.train)?;
    let valid = read_corpus(&a.valid)?;
    let vocab = Vocabulary::from_corpora(&[&train]);
    let outcome = match cfg.objective {
        Objective::Macl => {
            let degenerator = match &a.degenerator {
                Some(path) => Checkpoint::load_for(path, &vocab)?,
                None => {
                    log::info!("training degenerator");
                    let mut deg = train_degenerator(&train, &valid, &vocab, &cfg)?;
                    save_run(
                        &a.out,
                        "degenerator",
                        &deg.checkpoint,
                        &mut deg.record,
                        &deg.trace,
                    )?;
                    deg.checkpoint
                }
            };
            let hash = degenerator.hash();
            let cache = match cache_path(&a.train, &hash, &cfg) {
                Some(path) if path.exists() => Some(NegativeCache::load(&path, &hash)?),
                Some(path) => {
                    log::info!("mining negatives into {}", path.display());
                    let pools = mine_corpus(
                        &degenerator.model,
                        &vocab,
                        train.examples(),
                        &cfg.mining(),
                        cfg.m,
                        !cfg.deterministic,
                    )?;
                    let cache = NegativeCache::from_pools(&hash, &pools);
                    cache.save(&path)?;
                    Some(cache)
                }
                None => None,
            };
            log::info!("training macl model");
            train_model(
                &train,
                &valid,
                &vocab,
                &cfg,
                Some(&degenerator),
                cache.as_ref(),
            )?
        }
        // a finished MLE run is exactly a phase-1 degenerator, so it is frozen
        Objective::Mle => train_degenerator(&train, &valid, &vocab, &cfg)?,
        Objective::Nt => train_model(&train, &valid, &vocab, &cfg, None, None)?,
    };
    let mut outcome = outcome;
    save_run(
        &a.out,
        "model",
        &outcome.checkpoint,
        &mut outcome.record,
        &outcome.trace,
    )?;
    println!(
        "best epoch {} valid loss {:.4} valid PoD {} KUD {}",
        outcome.record.best_epoch,
        outcome.record.best_valid_loss,
        fmt_opt(outcome.record.valid_pod),
        fmt_opt(outcome.record.valid_kud)
    );
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

fn mine(a: MineArgs) -> Result<()> {
    let cfg = load_config(&a.config, None)?;
    let degenerator = Checkpoint::load(&a.degenerator)?;
    if !degenerator.frozen {
        return Err(invalid("degenerator checkpoint is not frozen"));
    }
    let corpus = read_corpus(&a.data)?;
    let hash = degenerator.hash();
    let out = match a.out.clone().or_else(|| cache_path(&a.data, &hash, &cfg)) {
        Some(p) => p,
        None => return Err(invalid("give --out or set MACL_CACHE_DIR")),
    };
    let pools = mine_corpus(
        &degenerator.model,
        &degenerator.vocab,
        corpus.examples(),
        &cfg.mining(),
        cfg.m,
        !cfg.deterministic,
    )?;
    let short = pools.iter().filter(|p| p.shortfall > 0).count();
    NegativeCache::from_pools(&hash, &pools).save(&out)?;
    println!(
        "mined {} pools ({} short of m={}) into {}",
        pools.len(),
        short,
        cfg.m,
        out.display()
    );
    Ok(())
}

fn decode(a: DecodeArgs) -> Result<()> {
    let strategy = match a.strategy.as_str() {
        "beam" => Strategy::Beam,
        "greedy" => Strategy::Greedy,
        "nucleus" => Strategy::Nucleus,
        other => {
            return Err(invalid(format!(
                "unknown strategy {other:?} (expected beam, greedy or nucleus)"
            )))
        }
    };
    let cfg = DecodeConfig {
        strategy,
        beam_size: a.beam_size,
        nucleus_p: a.nucleus_p,
        max_target_len: a.max_len,
        seed: a.seed,
        length_normalize: a.length_normalize,
    };
    cfg.validate()?;
    let checkpoint = Checkpoint::load(&a.model)?;
    let corpus = read_corpus(&a.data)?;
    let records = generate(
        &checkpoint.model,
        &checkpoint.vocab,
        &corpus,
        &cfg,
        !a.deterministic,
    )?;
    save_generations(&a.out, &records)?;
    println!(
        "wrote {} generations ({}) to {}",
        records.len(),
        cfg.label(),
        a.out.display()
    );
    Ok(())
}

fn score(a: ScoreArgs) -> Result<()> {
    let corpus = read_corpus(&a.data)?;
    let generations = load_generations(&a.generations)?;
    let report = build_report(&corpus, &generations)?;
    write_json(&a.out, &report)?;
    if let Some(csv) = &a.csv {
        write_atomic(csv, report.to_csv().as_bytes())?;
    }
    println!(
        "PoD {:.4} (reference {:.4}) KUD {} over {} examples",
        report.generated.pod,
        report.reference.pod,
        fmt_opt(report.kud),
        report.n_examples
    );
    Ok(())
}

/// A labelled row of the comparison table.
pub struct RunSummary {
    pub label: String,
    pub pod: Option<f64>,
    pub kud: Option<f64>,
    pub report: Option<MetricsReport>,
}

impl RunSummary {
    fn load(path: &Path) -> Result<Self> {
        let label = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| invalid(format!("bad run path {}", path.display())))?
            .to_string();
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        if let Ok(report) = serde_json::from_str::<MetricsReport>(&text) {
            return Ok(RunSummary {
                label,
                pod: Some(report.generated.pod),
                kud: report.kud,
                report: Some(report),
            });
        }
        match serde_json::from_str::<RunRecord>(&text) {
            Ok(run) => Ok(RunSummary {
                label,
                pod: run.valid_pod,
                kud: run.valid_kud,
                report: None,
            }),
            Err(e) => Err(invalid(format!(
                "{} is neither a score report nor a run record: {e}",
                path.display()
            ))),
        }
    }
}

fn histogram_rows(label: &str, side: &str, h: &KpHistogram) -> Vec<String> {
    h.masses
        .iter()
        .enumerate()
        .map(|(i, m)| {
            format!(
                "{label},{side},{},{},{},{m}",
                h.n,
                h.bin_edges[i],
                h.bin_edges[i + 1]
            )
        })
        .collect()
}
