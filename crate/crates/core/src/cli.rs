//! Command-line front end.
//!
//! Every subcommand reads its settings from flags, then from an optional
//! `--config` JSON file, then from built-in defaults, in that order. Each run
//! writes `run.json` into its output directory with the resolved settings,
//! so `--config <dir>/run.json` repeats the run.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::attacks::{
    lve_run, pgd_attack, sweep_csv, topk_sweep, AttackConfig, DatabaseObjective, LveConfig,
    LveStrategy, TargetMode, TargetSize,
};
use crate::eval::{
    calibrate_threshold, enroll, format_table, master_far, score_matrix, Calibration, CnnMatcher, Enrolled,
    EvalReport, MasterResult, MatchMode, Matcher, MiuraMatcher, ScoreSummary,
};
use crate::generators::{
    build_corpus, load_corpus, neural_generator, save_corpus, CorpusParams, Generator, NeuralGenerator, ProceduralGenerator,
    Sample, VeinCorpus,
};
use crate::imaging::{load_image, load_mask, save_mask, save_pgm, KernelKind, VeinImage};
use crate::neural::{
    check_decoder_parity, load_weights, save_weights, train_cnn, CnnModel, NetworkWeights, ParityFixture, TrainConfig,
};
use crate::optim::trace_csv;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

const VERSION: &str = env!("CARGO_PKG_VERSION");
/// Largest per-pixel disagreement accepted from an exported decoder.
const PARITY_TOLERANCE: f32 = 1e-5;

#[derive(Debug, Parser)]
#[command(name = "mastervein", version, about = "Master-vein attacks on finger-vein recognition")]
struct Cli {
    /// JSON file with default values for the subcommand's flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads (0 = one per core).
    #[arg(long, global = true, env = "MASTERVEIN_THREADS")]
    threads: Option<usize>,

    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the procedural vein corpus.
    GenCorpus(GenCorpusArgs),
    /// Extract enrollment templates for a system.
    Enroll(EnrollArgs),
    /// Score the corpus and pick the equal-error threshold.
    Calibrate(SystemArgs),
    /// Impostor and master-vein FAR at the calibrated threshold.
    Eval(EvalArgs),
    /// Train the margin-loss CNN on a corpus.
    TrainCnn(TrainArgs),
    /// Latent variable evolution against a system's database.
    AttackLve(LveArgs),
    /// Masked, filtered multi-label PGD against the CNN.
    AttackAdv(AdvArgs),
    /// PGD started from an LVE master vein.
    AttackCombined(AdvArgs),
    /// Top-k PGD over several target fractions, with CNN FAR for each.
    SweepTopk(SweepArgs),
    /// Merge eval reports into one table.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum System {
    MiuraFull,
    MiuraPartial,
    Cnn,
}

impl System {
    fn mode(self) -> MatchMode {
        match self {
            System::MiuraPartial => MatchMode::Partial,
            _ => MatchMode::Full,
        }
    }

    fn label(self) -> &'static str {
        match self {
            System::MiuraFull => "miura-full",
            System::MiuraPartial => "miura-partial",
            System::Cnn => "cnn",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Kernel {
    Gaussian,
    Lowpass,
    Highpass,
    Laplacian,
    Dirac,
}

impl From<Kernel> for KernelKind {
    fn from(k: Kernel) -> Self {
        match k {
            Kernel::Gaussian => KernelKind::Gaussian,
            Kernel::Lowpass => KernelKind::Lowpass,
            Kernel::Highpass => KernelKind::Highpass,
            Kernel::Laplacian => KernelKind::Laplacian,
            Kernel::Dirac => KernelKind::Dirac,
        }
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
struct GenCorpusArgs {
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    ids: Option<usize>,
    /// Samples per identity; half are enrolled, half are probes.
    #[arg(long)]
    samples: Option<usize>,
    /// Standard deviation of the per-sample latent jitter.
    #[arg(long)]
    jitter: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
struct SystemArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, value_enum)]
    system: Option<System>,
    /// CNN weights (VFW1), required for `--system cnn`.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Seed for partial-mode crops.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
struct EnrollArgs {
    #[command(flatten)]
    #[serde(flatten)]
    system: SystemArgs,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
struct EvalArgs {
    #[command(flatten)]
    #[serde(flatten)]
    system: SystemArgs,
    /// Master vein to evaluate, as `name=path` or `path`. Repeatable.
    #[arg(long = "master")]
    #[serde(rename = "master")]
    masters: Vec<String>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
struct TrainArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Additive angular margin in radians.
    #[arg(long)]
    margin: Option<f64>,
    /// Logit scale.
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Strategy {
    /// CMA-ES over the generator's latent space.
    Lve,
    /// Raw generator sampling with the same budget.
    Lve1Style,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
struct LveArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Database system; partial mode still scores full-size candidates.
    #[arg(long, value_enum)]
    system: Option<System>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_enum)]
    strategy: Option<Strategy>,
    #[arg(long)]
    population: Option<usize>,
    /// Number of generations.
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    sigma0: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Decoder weights (VFW1) to search instead of the procedural generator.
    #[arg(long)]
    generator: Option<PathBuf>,
    /// Parity fixture the decoder must reproduce before the search starts.
    #[arg(long, requires = "generator")]
    parity: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
struct PgdArgs {
    /// CNN weights (VFW1).
    #[arg(long)]
    model: Option<PathBuf>,
    /// L-inf budget in intensity units.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Step size (defaults to epsilon / 10).
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long, value_enum)]
    kernel: Option<Kernel>,
    #[arg(long)]
    kernel_size: Option<usize>,
    #[arg(long)]
    kernel_sigma: Option<f32>,
    /// Number of target labels (overrides `--fraction`).
    #[arg(long)]
    k: Option<usize>,
    /// Target labels as a fraction of the classes.
    #[arg(long)]
    fraction: Option<f64>,
    /// Pick targets at random instead of the top predictions.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    random_k: Option<bool>,
    /// Refresh top-k targets from the current image each iteration.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    recompute_topk: Option<bool>,
    /// Use the raw filtered gradient instead of the max-normalized step.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    raw_step: Option<bool>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
struct AdvArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pgd: PgdArgs,
    /// Starting image (for `attack-combined`, the LVE master vein).
    #[arg(long)]
    image: Option<PathBuf>,
    /// Finger mask; estimated from the image when absent.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
struct SweepArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pgd: PgdArgs,
    /// Corpus enrolled into the CNN system for FAR measurement.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    fractions: Vec<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
struct ReportArgs {
    /// `report.json` files written by `eval`.
    #[arg(long = "input")]
    #[serde(rename = "input")]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<crate::Error> for CliError {
    fn from(e: crate::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn required<T: Clone>(v: &Option<T>, flag: &str) -> CliResult<T> {
    v.clone().ok_or_else(|| usage(format!("missing required flag --{flag}")))
}

fn existing(v: &Option<PathBuf>, flag: &str) -> CliResult<PathBuf> {
    let p = required(v, flag)?;
    if !p.exists() {
        return Err(usage(format!("--{flag}: {} does not exist", p.display())));
    }
    Ok(p)
}

fn as_object<T: Serialize>(v: &T) -> CliResult<serde_json::Map<String, Value>> {
    match serde_json::to_value(v).map_err(|e| usage(e.to_string()))? {
        Value::Object(m) => Ok(m),
        _ => Err(usage("arguments must serialize to an object")),
    }
}

/// Overlays non-null flag values onto the config file's object.
fn merge<T: Serialize + DeserializeOwned + Default>(flags: &T, config: Option<&Value>) -> CliResult<T> {
    let known = as_object(&T::default())?;
    let mut base = match config {
        Some(Value::Object(m)) => m.clone(),
        Some(_) => return Err(usage("--config: expected a JSON object")),
        None => serde_json::Map::new(),
    };
    if let Some(key) = base.keys().find(|k| !known.contains_key(*k)) {
        return Err(usage(format!("--config: unknown key `{key}`")));
    }
    let over = as_object(flags)?;
    for (k, v) in over {
        let empty = v.is_null() || v.as_array().is_some_and(|a| a.is_empty());
        if !empty {
            base.insert(k, v);
        }
    }
    serde_json::from_value(Value::Object(base)).map_err(|e| usage(format!("--config: {e}")))
}

fn read_config(path: &Path) -> CliResult<Value> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("--config: {}: {e}", path.display())))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| usage(format!("--config: {}: {e}", path.display())))?;
    // A previous run's manifest works as a config file.
    match v.get("config") {
        Some(inner) if v.get("command").is_some() => Ok(inner.clone()),
        _ => Ok(v),
    }
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn prepare_out(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_manifest(dir: &Path, command: &str, config: &impl Serialize, results: Value) -> anyhow::Result<()> {
    let manifest = json!({
        "command": command,
        "version": VERSION,
        "config": config,
        "results": results,
    });
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_text(&dir.join("run.json"), &text)
}

fn load_cnn(path: &Path) -> anyhow::Result<CnnModel<f32>> {
    match load_weights(path)? {
        NetworkWeights::Cnn(m) => Ok(m),
        NetworkWeights::Decoder(_) => Err(anyhow!("{} holds decoder weights, not a CNN", path.display())),
    }
}

fn load_corpus_at(path: &Path) -> anyhow::Result<VeinCorpus> {
    load_corpus(path).with_context(|| format!("loading corpus {}", path.display()))
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit status.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            warn!("thread pool already configured: {e}");
        }
    }
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    let config = cli.config.as_deref().map(read_config).transpose()?;
    let config = config.as_ref();
    match &cli.command {
        Command::GenCorpus(a) => gen_corpus(merge(a, config)?),
        Command::Enroll(a) => enroll_cmd(merge(a, config)?),
        Command::Calibrate(a) => calibrate_cmd(merge(a, config)?),
        Command::Eval(a) => eval_cmd(merge(a, config)?),
        Command::TrainCnn(a) => train_cmd(merge(a, config)?),
        Command::AttackLve(a) => lve_cmd(merge(a, config)?),
        Command::AttackAdv(a) => adv_cmd(merge(a, config)?, "attack-adv"),
        Command::AttackCombined(a) => adv_cmd(merge(a, config)?, "attack-combined"),
        Command::SweepTopk(a) => sweep_cmd(merge(a, config)?),
        Command::Report(a) => report_cmd(merge(a, config)?),
    }
}

fn gen_corpus(mut a: GenCorpusArgs) -> CliResult<()> {
    let out = required(&a.out, "out")?;
    let d = CorpusParams::default();
    let params = CorpusParams {
        identities: *a.ids.get_or_insert(d.identities),
        samples_per_id: *a.samples.get_or_insert(d.samples_per_id),
        jitter: *a.jitter.get_or_insert(d.jitter),
        seed: *a.seed.get_or_insert(d.seed),
        ..d
    };
    let corpus = build_corpus(&params).map_err(|e| match e {
        crate::Error::InvalidParameter { .. } => usage(e.to_string()),
        other => other.into(),
    })?;
    save_corpus(&corpus, &out)?;
    write_manifest(&out, "gen-corpus", &a, json!({ "identities": corpus.len(), "params": params }))?;
    info!("wrote {} identities to {}", corpus.len(), out.display());
    Ok(())
}

struct SystemSetup {
    system: System,
    corpus: VeinCorpus,
    model: Option<CnnModel<f32>>,
    seed: u64,
    out: PathBuf,
}

fn setup_system(a: &mut SystemArgs) -> CliResult<SystemSetup> {
    let corpus_path = existing(&a.corpus, "corpus")?;
    let out = required(&a.out, "out")?;
    let system = *a.system.get_or_insert(System::MiuraFull);
    let seed = *a.seed.get_or_insert(0);
    let model = if system == System::Cnn {
        Some(load_cnn(&existing(&a.model, "model")?)?)
    } else {
        None
    };
    let corpus = load_corpus_at(&corpus_path)?;
    prepare_out(&out)?;
    Ok(SystemSetup {
        system,
        corpus,
        model,
        seed,
        out,
    })
}

/// Runs `$body` with `$m` bound to the matcher selected by `$setup`.
macro_rules! with_matcher {
    ($setup:expr, $m:ident => $body:expr) => {
        match $setup.model.clone() {
            Some(model) => {
                let $m = CnnMatcher { model };
                $body
            }
            None => {
                let $m = MiuraMatcher::default();
                $body
            }
        }
    };
}

fn enroll_cmd(mut a: EnrollArgs) -> CliResult<()> {
    let s = setup_system(&mut a.system)?;
    let count = with_matcher!(s, m => {
        let e = enroll(&m, &s.corpus)?;
        write_templates(&m, &e, &s.out)?;
        e.template_count()
    });
    write_manifest(&s.out, "enroll", &a, json!({ "templates": count }))?;
    Ok(())
}

trait TemplateExport: Matcher {
    fn export(&self, enrolled: &Enrolled<Self::Template>, dir: &Path) -> anyhow::Result<()>;
}

impl TemplateExport for MiuraMatcher {
    fn export(&self, enrolled: &Enrolled<Self::Template>, dir: &Path) -> anyhow::Result<()> {
        for (id, temps) in enrolled.ids.iter().zip(&enrolled.templates) {
            let sub = dir.join(id);
            prepare_out(&sub)?;
            for (k, t) in temps.iter().enumerate() {
                fs::write(sub.join(format!("{k}.pgm")), t.to_pgm())?;
            }
        }
        Ok(())
    }
}

impl TemplateExport for CnnMatcher {
    fn export(&self, enrolled: &Enrolled<Self::Template>, dir: &Path) -> anyhow::Result<()> {
        let map: serde_json::Map<String, Value> = enrolled
            .ids
            .iter()
            .zip(&enrolled.templates)
            .map(|(id, temps)| (id.clone(), json!(temps.iter().map(|e| e.as_slice()).collect::<Vec<_>>())))
            .collect();
        write_text(&dir.join("embeddings.json"), &serde_json::to_string(&map)?)
    }
}

fn write_templates<M: TemplateExport>(m: &M, e: &Enrolled<M::Template>, dir: &Path) -> anyhow::Result<()> {
    m.export(e, dir)
}

struct Calibrated<T> {
    enrolled: Enrolled<T>,
    calibration: Calibration,
    genuine: ScoreSummary,
    impostor: ScoreSummary,
    csv: String,
}

fn calibrate_with<M: Matcher>(m: &M, corpus: &VeinCorpus, mode: MatchMode, seed: u64) -> anyhow::Result<Calibrated<M::Template>> {
    let enrolled = enroll(m, corpus)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scores = score_matrix(m, corpus, &enrolled, mode, &mut rng)?;
    if scores.impostor_empty() {
        return Err(anyhow!("corpus has a single identity, so there are no impostor scores"));
    }
    let calibration = calibrate_threshold(&scores.genuine, &scores.impostor)?;
    Ok(Calibrated {
        enrolled,
        calibration,
        genuine: ScoreSummary::of(&scores.genuine),
        impostor: ScoreSummary::of(&scores.impostor),
        csv: scores.to_csv(),
    })
}

fn calibrate_cmd(mut a: SystemArgs) -> CliResult<()> {
    let s = setup_system(&mut a)?;
    let c = with_matcher!(s, m => {
        let c = calibrate_with(&m, &s.corpus, s.system.mode(), s.seed)?;
        (c.calibration, c.genuine, c.impostor, c.csv)
    });
    write_text(&s.out.join("scores.csv"), &c.3)?;
    let mut cal = serde_json::to_string_pretty(&c.0).map_err(anyhow::Error::from)?;
    cal.push('\n');
    write_text(&s.out.join("calibration.json"), &cal)?;
    write_manifest(
        &s.out,
        "calibrate",
        &a,
        json!({ "calibration": c.0, "genuine": c.1, "impostor": c.2 }),
    )?;
    Ok(())
}

fn parse_master(arg: &str) -> (String, PathBuf) {
    match arg.split_once('=') {
        Some((name, path)) if !name.is_empty() => (name.to_string(), PathBuf::from(path)),
        _ => {
            let p = PathBuf::from(arg);
            let name = p
                .parent()
                .and_then(|d| d.file_name())
                .or_else(|| p.file_stem())
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| arg.to_string());
            (name, p)
        }
    }
}

fn eval_cmd(mut a: EvalArgs) -> CliResult<()> {
    let masters: Vec<(String, PathBuf)> = a.masters.iter().map(|m| parse_master(m)).collect();
    for (_, p) in &masters {
        if !p.exists() {
            return Err(usage(format!("--master: {} does not exist", p.display())));
        }
    }
    let s = setup_system(&mut a.system)?;
    let mode = s.system.mode();
    let report = with_matcher!(s, m => {
        let c = calibrate_with(&m, &s.corpus, mode, s.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(s.seed ^ 0x6d61_7374);
        let mut results = Vec::new();
        for (name, path) in &masters {
            let image = load_image(path)?;
            let sample = master_sample(image, path)?;
            let o = master_far(&m, &c.enrolled, &sample, c.calibration.threshold, mode, None, &mut rng)?;
            results.push(MasterResult { attack: name.clone(), far: o.far, accepted: o.accepted });
        }
        EvalReport {
            system: s.system.label().into(),
            mode,
            seed: s.seed,
            calibration: c.calibration,
            impostor_far: c.calibration.far,
            genuine: c.genuine,
            impostor: c.impostor,
            masters: results,
        }
    });
    let mut text = serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)?;
    text.push('\n');
    write_text(&s.out.join("report.json"), &text)?;
    let table = format_table(std::slice::from_ref(&report));
    write_text(&s.out.join("table.txt"), &table)?;
    print!("{table}");
    write_manifest(&s.out, "eval", &a, serde_json::to_value(&report).map_err(anyhow::Error::from)?)?;
    Ok(())
}

/// Pairs an image with `<stem>.mask.pgm` when present, else estimates a mask.
fn master_sample(image: VeinImage, path: &Path) -> anyhow::Result<Sample> {
    let d = CorpusParams::default();
    let mask_path = path.with_extension("mask.pgm");
    if mask_path.exists() {
        let mask = load_mask(&mask_path)?;
        if mask.matches(image.as_map()) {
            return Ok(Sample { image, mask });
        }
        warn!("ignoring {}: size differs from the image", mask_path.display());
    }
    Ok(Sample::from_image(image, d.mask_threshold, d.mask_dilation)?)
}

fn train_cmd(mut a: TrainArgs) -> CliResult<()> {
    let corpus_path = existing(&a.corpus, "corpus")?;
    let out = required(&a.out, "out")?;
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        epochs: *a.epochs.get_or_insert(d.epochs),
        lr: *a.lr.get_or_insert(d.lr),
        margin: *a.margin.get_or_insert(d.margin),
        scale: *a.scale.get_or_insert(d.scale),
        batch_size: *a.batch_size.get_or_insert(d.batch_size),
        momentum: *a.momentum.get_or_insert(d.momentum),
        seed: *a.seed.get_or_insert(d.seed),
    };
    let corpus = load_corpus_at(&corpus_path)?;
    prepare_out(&out)?;
    let trained = train_cnn(&corpus.labeled_images(), &cfg)?;
    save_weights(&NetworkWeights::Cnn(trained.model), &out.join("model.vfw"))?;
    let mut csv = String::from("epoch,mean_loss,train_accuracy\n");
    for l in &trained.log {
        csv.push_str(&format!("{},{},{}\n", l.epoch, l.mean_loss, l.train_accuracy));
    }
    write_text(&out.join("training.csv"), &csv)?;
    write_manifest(&out, "train-cnn", &a, json!({ "final": trained.log.last() }))?;
    Ok(())
}

fn load_decoder(path: &Path, parity: Option<&Path>) -> anyhow::Result<NeuralGenerator> {
    let decoder = match load_weights(path)? {
        NetworkWeights::Decoder(d) => d,
        NetworkWeights::Cnn(_) => return Err(anyhow!("{} holds CNN weights, not a decoder", path.display())),
    };
    if let Some(fixture) = parity {
        let worst = check_decoder_parity(&decoder, &ParityFixture::load(fixture)?, PARITY_TOLERANCE)?;
        info!("decoder parity within {worst:e}");
    }
    Ok(neural_generator(decoder)?)
}

fn lve_cmd(mut a: LveArgs) -> CliResult<()> {
    let mut sys = SystemArgs {
        corpus: a.corpus.clone(),
        system: a.system,
        model: a.model.clone(),
        seed: Some(0),
        out: a.out.clone(),
    };
    let s = setup_system(&mut sys)?;
    a.system = sys.system;
    let d = LveConfig::default();
    let cfg = LveConfig {
        population: *a.population.get_or_insert(d.population),
        iterations: *a.iterations.get_or_insert(d.iterations),
        sigma0: *a.sigma0.get_or_insert(d.sigma0),
        seed: *a.seed.get_or_insert(d.seed),
        strategy: match *a.strategy.get_or_insert(Strategy::Lve) {
            Strategy::Lve => LveStrategy::Evolve,
            Strategy::Lve1Style => LveStrategy::RandomSampling,
        },
    };
    let params = s.corpus.params;
    let generator: Box<dyn Generator> = match &a.generator {
        Some(path) => Box::new(load_decoder(path, a.parity.as_deref())?),
        None => Box::new(ProceduralGenerator {
            width: params.width,
            height: params.height,
        }),
    };
    let result = with_matcher!(s, m => {
        let enrolled = enroll(&m, &s.corpus)?;
        let objective = DatabaseObjective {
            matcher: &m,
            enrolled: &enrolled,
            mask_threshold: params.mask_threshold,
            mask_dilation: params.mask_dilation,
        };
        lve_run(generator.as_ref(), &objective, &cfg)?
    });
    let master = Sample::from_image(result.best_image.clone(), params.mask_threshold, params.mask_dilation)?;
    save_pgm(&master.image, s.out.join("master.pgm"))?;
    save_mask(&master.mask, s.out.join("master.mask.pgm"))?;
    write_text(&s.out.join("history.csv"), &result.history_csv())?;
    write_text(&s.out.join("cma.csv"), &trace_csv(&result.trace))?;
    write_manifest(
        &s.out,
        "attack-lve",
        &a,
        json!({
            "best_score": result.best_score,
            "best_latent": result.best_latent,
            "global_best_trace": result.global_best_trace(),
        }),
    )?;
    Ok(())
}

fn attack_config(p: &mut PgdArgs) -> CliResult<AttackConfig> {
    let d = AttackConfig::default();
    let target = match (p.k, p.fraction) {
        (Some(k), _) => TargetSize::Count(k),
        (None, f) => TargetSize::Fraction(*p.fraction.get_or_insert(f.unwrap_or(0.05))),
    };
    let epsilon = *p.epsilon.get_or_insert(d.epsilon);
    Ok(AttackConfig {
        epsilon,
        alpha: Some(*p.alpha.get_or_insert(epsilon / 10.0)),
        iterations: *p.iterations.get_or_insert(d.iterations),
        kernel: (*p.kernel.get_or_insert(Kernel::Gaussian)).into(),
        kernel_size: *p.kernel_size.get_or_insert(d.kernel_size),
        kernel_sigma: *p.kernel_sigma.get_or_insert(d.kernel_sigma),
        target,
        mode: if *p.random_k.get_or_insert(false) {
            TargetMode::RandomK
        } else {
            TargetMode::TopK
        },
        recompute_topk: *p.recompute_topk.get_or_insert(false),
        normalize_step: !*p.raw_step.get_or_insert(false),
        seed: *p.seed.get_or_insert(d.seed),
    })
}

fn load_start(image: &Option<PathBuf>, mask: &Option<PathBuf>) -> CliResult<Sample> {
    let image_path = existing(image, "image")?;
    let img = load_image(&image_path).context("loading --image")?;
    match mask {
        Some(_) => {
            let mask = load_mask(existing(mask, "mask")?).context("loading --mask")?;
            if !mask.matches(img.as_map()) {
                return Err(usage("--mask: size differs from --image"));
            }
            Ok(Sample { image: img, mask })
        }
        None => Ok(master_sample(img, &image_path)?),
    }
}

fn adv_cmd(mut a: AdvArgs, command: &str) -> CliResult<()> {
    let model = load_cnn(&existing(&a.pgd.model, "model")?)?;
    let out = required(&a.out, "out")?;
    let start = load_start(&a.image, &a.mask)?;
    let cfg = attack_config(&mut a.pgd)?;
    prepare_out(&out)?;
    let result = pgd_attack(&model, &start.image, &start.mask, &cfg)?;
    save_pgm(&result.image, out.join("adversarial.pgm"))?;
    save_mask(&start.mask, out.join("adversarial.mask.pgm"))?;
    write_text(&out.join("loss.csv"), &result.loss_csv())?;
    write_manifest(
        &out,
        command,
        &a,
        json!({
            "unchanged": result.image == start.image,
            "targets": result.target.indices,
            "initial_target_mass": result.initial_target_mass,
            "final_target_mass": result.final_target_mass,
            "linf": result.linf,
        }),
    )?;
    Ok(())
}

fn sweep_cmd(mut a: SweepArgs) -> CliResult<()> {
    let model = load_cnn(&existing(&a.pgd.model, "model")?)?;
    let corpus = load_corpus_at(&existing(&a.corpus, "corpus")?)?;
    let out = required(&a.out, "out")?;
    let start = load_start(&a.image, &a.mask)?;
    if a.fractions.is_empty() {
        a.fractions = vec![0.05, 0.2, 0.4, 0.6];
    }
    if let Some(f) = a.fractions.iter().find(|f| !(**f > 0.0 && **f < 1.0)) {
        return Err(usage(format!("--fractions: {f} is outside (0, 1)")));
    }
    a.pgd.k = None;
    let cfg = attack_config(&mut a.pgd)?;
    prepare_out(&out)?;
    let matcher = CnnMatcher { model: model.clone() };
    let cal = calibrate_with(&matcher, &corpus, MatchMode::Full, 0)?;
    let rows = topk_sweep(&model, &start.image, &start.mask, &a.fractions, &cfg, |img| {
        let s = Sample {
            image: img.clone(),
            mask: start.mask.clone(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(master_far(&matcher, &cal.enrolled, &s, cal.calibration.threshold, MatchMode::Full, None, &mut rng)?.far)
    })?;
    write_text(&out.join("sweep.csv"), &sweep_csv(&rows))?;
    write_manifest(
        &out,
        "sweep-topk",
        &a,
        json!({ "calibration": cal.calibration, "rows": rows }),
    )?;
    Ok(())
}

fn report_cmd(a: ReportArgs) -> CliResult<()> {
    if a.inputs.is_empty() {
        return Err(usage("missing required flag --input"));
    }
    let mut reports = Vec::with_capacity(a.inputs.len());
    for p in &a.inputs {
        if !p.exists() {
            return Err(usage(format!("--input: {} does not exist", p.display())));
        }
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let r: EvalReport = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
        reports.push(r);
    }
    let table = format_table(&reports);
    print!("{table}");
    if let Some(out) = &a.out {
        prepare_out(out)?;
        write_text(&out.join("table.txt"), &table)?;
        write_manifest(out, "report", &a, serde_json::to_value(&reports).map_err(anyhow::Error::from)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config() {
        let flags = GenCorpusArgs {
            seed: Some(9),
            ..Default::default()
        };
        let config = json!({ "seed": 1, "ids": 4, "out": "/tmp/x" });
        let merged = merge(&flags, Some(&config)).unwrap();
        assert_eq!(merged.seed, Some(9));
        assert_eq!(merged.ids, Some(4));
        assert_eq!(merged.out, Some(PathBuf::from("/tmp/x")));
    }

    #[test]
    fn unknown_config_key_is_a_usage_error() {
        let err = merge(&GenCorpusArgs::default(), Some(&json!({ "idz": 3 }))).unwrap_err();
        assert!(matches!(err, CliError::Usage(m) if m.contains("idz")));
    }

    #[test]
    fn flattened_args_merge() {
        let flags = EvalArgs {
            masters: vec!["lve=a.pgm".into()],
            ..Default::default()
        };
        let merged = merge(&flags, Some(&json!({ "system": "cnn", "master": ["b.pgm"] }))).unwrap();
        assert_eq!(merged.system.system, Some(System::Cnn));
        assert_eq!(merged.masters, vec!["lve=a.pgm".to_string()]);
    }

    #[test]
    fn master_names() {
        assert_eq!(parse_master("lve=out/master.pgm"), ("lve".into(), PathBuf::from("out/master.pgm")));
        assert_eq!(parse_master("runs/lve/master.pgm").0, "lve");
    }

    #[test]
    fn exit_codes() {
        assert_eq!(run_cli(["mastervein", "no-such-command"]), EXIT_USAGE);
        assert_eq!(run_cli(["mastervein", "gen-corpus"]), EXIT_USAGE);
        assert_eq!(run_cli(["mastervein", "calibrate", "--corpus", "/nonexistent/corpus", "--out", "/tmp/x"]), EXIT_USAGE);
        assert_eq!(run_cli(["mastervein", "--help"]), EXIT_OK);
    }
}
