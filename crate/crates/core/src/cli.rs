//! The `rivid` command line.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::datamodel::{load_manifest, write_atomic, Manifest};
use crate::degrade::{apply_protocol, synth_corpus, DegradeProtocol, ProtocolKind, Ratio, SynthSpec};
use crate::error::{Error, Result};
use crate::evalkit::GridMode;
use crate::trainer::{self, loss_log_csv, Model, Stage, TrainConfig, TrainingSet};

pub const RUN_RECORD: &str = "run.json";
const SPLITS: [&str; 3] = ["train", "query", "gallery"];

#[derive(Debug, Parser)]
#[command(
    name = "rivid",
    version,
    about = "Resolution-invariant person re-identification",
    long_about = "Resolution-invariant person re-identification.\n\n\
        Typical pipeline: synth -> degrade -> train --stage 1 -> train --stage 2 -> \
        train --stage 3 -> eval / diagnose.",
    propagate_version = true
)]
struct Cli {
    /// Replace existing outputs instead of refusing to run.
    #[arg(long, global = true)]
    overwrite: bool,
    /// Threads for image loading and preprocessing; results do not depend on it.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    workers: u16,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic identity corpus with train/query/gallery manifests.
    Synth(SynthArgs),
    /// Degrade every split of a dataset with the MLR or VR protocol.
    Degrade(DegradeArgs),
    /// Run one training stage.
    Train(TrainArgs),
    /// Rank-1/Rank-5 retrieval of the query split against the gallery.
    Eval(EvalArgs),
    /// Cross-resolution separability over the resolution grid.
    Diagnose(DiagnoseArgs),
    /// Print a checkpoint's configuration, parameter counts and provenance.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// TOML corpus spec; defaults are used for missing keys.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ProtocolArg {
    Mlr,
    Vr,
}

#[derive(Debug, Args)]
struct DegradeArgs {
    /// Directory holding train.csv, query.csv and gallery.csv.
    #[arg(long, required_unless_present = "manifest", conflicts_with = "manifest")]
    data: Option<PathBuf>,
    /// A single manifest to degrade; the output is named after its split.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, value_enum)]
    protocol: ProtocolArg,
    /// MLR downsampling ratios.
    #[arg(long, value_delimiter = ',', default_value = "1/2,1/3,1/4")]
    ratios: Vec<Ratio>,
    /// VR target widths: half-open range LO..HI or LO:HI.
    #[arg(long, visible_alias = "range", default_value = "8..32", value_parser = parse_range)]
    widths: (u32, u32),
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
}

fn parse_range(s: &str) -> std::result::Result<(u32, u32), String> {
    let (a, b) = s
        .split_once("..")
        .or_else(|| s.split_once(':'))
        .ok_or("expected LO..HI or LO:HI")?;
    Ok((
        a.trim().parse().map_err(|e| format!("{e}"))?,
        b.trim().parse().map_err(|e| format!("{e}"))?,
    ))
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    stage: u8,
    /// TOML training config; defaults are used for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding train.csv.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Checkpoint from the previous stage.
    #[arg(long, conflicts_with = "from_scratch")]
    init: Option<PathBuf>,
    /// Train without the previous stage's checkpoint.
    #[arg(long)]
    from_scratch: bool,
    /// Overrides `epochs_per_stage`.
    #[arg(long)]
    epochs: Option<usize>,
    /// Overrides `batch_size`.
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Directory holding query.csv and gallery.csv.
    #[arg(long)]
    data: PathBuf,
    /// Metrics JSON file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    A,
    B,
}

#[derive(Debug, Args)]
struct DiagnoseArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Directory holding query.csv and gallery.csv; their full-resolution
    /// images are re-rendered at every grid point.
    #[arg(long)]
    data: PathBuf,
    /// `a`: r1 = r2; `b`: r2 = 1.
    #[arg(long, value_enum)]
    mode: ModeArg,
    /// Grid CSV file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long)]
    ckpt: PathBuf,
}

/// How an artifact directory was produced.
#[derive(Debug, Serialize)]
pub struct RunRecord {
    pub command_line: Vec<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub version: String,
    /// Seconds since the Unix epoch; `SOURCE_DATE_EPOCH` pins both.
    pub started_at: u64,
    pub finished_at: u64,
    /// Relative to the directory holding the record.
    pub outputs: Vec<String>,
}

fn now() -> u64 {
    if let Some(t) = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|v| v.parse().ok()) {
        return t;
    }
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

struct Ctx {
    argv: Vec<String>,
    overwrite: bool,
    workers: usize,
    started: u64,
}

impl Ctx {
    /// Fails when `dir` already holds files and `--overwrite` was not given.
    fn claim_dir(&self, dir: &Path) -> Result<()> {
        let busy = fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false);
        if busy && !self.overwrite {
            return Err(Error::invalid(format!(
                "{} is not empty; pass --overwrite to replace its contents",
                dir.display()
            )));
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
    }

    fn claim_file(&self, file: &Path) -> Result<PathBuf> {
        let dir = file.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new(".")).to_path_buf();
        for p in [file.to_path_buf(), dir.join(RUN_RECORD)] {
            if p.exists() && !self.overwrite {
                return Err(Error::invalid(format!("{} exists; pass --overwrite to replace it", p.display())));
            }
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }

    fn record(&self, dir: &Path, config: serde_json::Value, seed: Option<u64>, outputs: &[&str]) -> Result<()> {
        let rec = RunRecord {
            command_line: self.argv.clone(),
            config,
            seed,
            version: format!("rivid {}", env!("CARGO_PKG_VERSION")),
            started_at: self.started,
            finished_at: now(),
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
        };
        let json = serde_json::to_string_pretty(&rec).map_err(|e| Error::invalid(e.to_string()))?;
        write_atomic(&dir.join(RUN_RECORD), format!("{json}\n").as_bytes())
    }
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

fn split(dir: &Path, name: &str) -> Result<Manifest> {
    load_manifest(dir.join(format!("{name}.csv")))
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code: 0 on success, 1 on a usage error, 2 on a runtime failure.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let ctx = Ctx {
        argv: argv.iter().map(|a| a.to_string_lossy().into_owned()).collect(),
        overwrite: cli.overwrite,
        workers: cli.workers as usize,
        started: now(),
    };
    let result = match cli.command {
        Command::Synth(a) => synth(&ctx, a),
        Command::Degrade(a) => degrade(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Diagnose(a) => diagnose(&ctx, a),
        Command::Inspect(a) => inspect(&a.ckpt).map(|text| print!("{text}")),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn synth(ctx: &Ctx, a: SynthArgs) -> Result<()> {
    let text = fs::read_to_string(&a.spec).map_err(|e| Error::io(&a.spec, e))?;
    let mut spec: SynthSpec =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", a.spec.display())))?;
    spec.seed = a.seed;
    ctx.claim_dir(&a.out)?;
    synth_corpus(&spec, &a.out)?.save(&a.out)?;
    ctx.record(&a.out, to_json(&spec), Some(a.seed), &["train.csv", "query.csv", "gallery.csv", "hr/", "masks/"])
}

fn degrade(ctx: &Ctx, a: DegradeArgs) -> Result<()> {
    let kind = match a.protocol {
        ProtocolArg::Mlr => ProtocolKind::Mlr { ratios: a.ratios.clone() },
        ProtocolArg::Vr => ProtocolKind::Vr {
            lo: a.widths.0,
            hi: a.widths.1,
        },
    };
    let protocol = DegradeProtocol { kind, seed: a.seed };
    protocol.validate()?;
    let manifests = match (&a.data, &a.manifest) {
        (Some(dir), _) => SPLITS.iter().map(|s| split(dir, s)).collect::<Result<Vec<_>>>()?,
        (None, Some(file)) => vec![load_manifest(file)?],
        (None, None) => unreachable!("clap requires --data or --manifest"),
    };
    ctx.claim_dir(&a.out)?;
    let mut outputs: Vec<String> = Vec::new();
    for m in &manifests {
        let name = format!("{}.csv", m.split.as_str());
        apply_protocol(m, &protocol, &a.out)?.save(a.out.join(&name))?;
        outputs.push(name);
    }
    let config = match &protocol.kind {
        ProtocolKind::Mlr { ratios } => serde_json::json!({
            "protocol": "mlr",
            "ratios": ratios.iter().map(|r| r.to_string()).collect::<Vec<_>>(),
        }),
        ProtocolKind::Vr { lo, hi } => serde_json::json!({ "protocol": "vr", "widths": [lo, hi] }),
    };
    outputs.extend(["images/", "hr/", "masks/"].map(String::from));
    let outputs: Vec<&str> = outputs.iter().map(String::as_str).collect();
    ctx.record(&a.out, config, Some(a.seed), &outputs)
}

fn train(ctx: &Ctx, a: TrainArgs) -> Result<()> {
    let mut config = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    config.stage = Stage::from_number(a.stage)?;
    config.seed = a.seed;
    if let Some(e) = a.epochs {
        config.epochs_per_stage = e;
    }
    if let Some(b) = a.batch_size {
        config.batch_size = b;
    }
    config.validate()?;
    let init = a.init.as_ref().map(Model::load).transpose()?;
    let manifest = split(&a.data, "train")?;
    ctx.claim_dir(&a.out)?;
    let data = TrainingSet::from_manifest(&manifest, &config, ctx.workers)?;
    let outcome = trainer::run_stage(&config, &data, init, a.from_scratch)?;
    for l in &outcome.log {
        log::info!("stage {} epoch {} loss {:.6} lr {}", l.stage, l.epoch, l.mean_total, l.lr);
    }
    outcome.model.to_checkpoint().save(a.out.join("model.ckpt"))?;
    write_atomic(&a.out.join("loss_log.csv"), loss_log_csv(&outcome.log).as_bytes())?;
    write_atomic(&a.out.join("config.toml"), config.to_toml().as_bytes())?;
    ctx.record(&a.out, to_json(&config), Some(a.seed), &["model.ckpt", "loss_log.csv", "config.toml"])
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn eval(ctx: &Ctx, a: EvalArgs) -> Result<()> {
    let model = Model::load(&a.ckpt)?;
    let (query, gallery) = (split(&a.data, "query")?, split(&a.data, "gallery")?);
    let dir = ctx.claim_file(&a.out)?;
    let metrics = trainer::evaluate_retrieval(&model, &query, &gallery, ctx.workers)?;
    let json = serde_json::to_string_pretty(&metrics).map_err(|e| Error::invalid(e.to_string()))?;
    write_atomic(&a.out, format!("{json}\n").as_bytes())?;
    let config = serde_json::json!({ "ckpt": a.ckpt, "data": a.data });
    ctx.record(&dir, config, None, &[&file_name(&a.out)])
}

fn diagnose(ctx: &Ctx, a: DiagnoseArgs) -> Result<()> {
    let model = Model::load(&a.ckpt)?;
    let (query, gallery) = (split(&a.data, "query")?, split(&a.data, "gallery")?);
    let dir = ctx.claim_file(&a.out)?;
    let mode = match a.mode {
        ModeArg::A => GridMode::A,
        ModeArg::B => GridMode::B,
    };
    let images = trainer::load_hr_images(&[&query, &gallery], ctx.workers)?;
    let grid = trainer::diagnose(&model, &images, mode, ctx.workers)?;
    write_atomic(&a.out, grid.to_csv().as_bytes())?;
    let config = serde_json::json!({ "ckpt": a.ckpt, "data": a.data, "mode": mode });
    ctx.record(&dir, config, None, &[&file_name(&a.out)])
}

/// The report printed by `rivid inspect`.
pub fn inspect(path: &Path) -> Result<String> {
    let ckpt = Checkpoint::load(path)?;
    let mut out = String::new();
    let w = &mut out;
    writeln!(w, "checkpoint: {}", path.display()).unwrap();
    match &ckpt.ffsr {
        Some(c) => writeln!(w, "ffsr: {}", serde_json::to_string(c).unwrap()).unwrap(),
        None => writeln!(w, "ffsr: none").unwrap(),
    }
    match &ckpt.rife {
        Some(c) => writeln!(w, "rife: {}", serde_json::to_string(c).unwrap()).unwrap(),
        None => writeln!(w, "rife: none").unwrap(),
    }
    if let Some(ids) = &ckpt.identities {
        writeln!(w, "identities: {}", ids.num_classes()).unwrap();
    }
    writeln!(w, "parameters: {}", ckpt.parameter_count()).unwrap();
    writeln!(w, "  ffsr: {}", ckpt.store.weight_count_prefix(crate::ffsr::PREFIX)).unwrap();
    writeln!(w, "  rife: {}", ckpt.store.weight_count_prefix(crate::rife::PREFIX)).unwrap();
    writeln!(w, "provenance:").unwrap();
    if ckpt.provenance.is_empty() {
        writeln!(w, "  (none)").unwrap();
    }
    for p in &ckpt.provenance {
        writeln!(
            w,
            "  stage {}: {} epochs, seed {}, final loss {}, {}",
            p.stage, p.epochs, p.seed, p.final_loss, p.note
        )
        .unwrap();
    }
    Ok(out)
}
