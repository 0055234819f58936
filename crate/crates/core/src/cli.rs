//! The `seisnet` command line.
//!
//! Every subcommand writes into one output directory: its products, a
//! `manifest.json` describing the run (version, subcommand, resolved
//! configuration, seeds, inputs, outputs) and a `timings.json` with
//! wall-clock measurements. Only `timings.json` varies between reruns.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::corrupt::{apply_chain, Corruption, CorruptionSpec};
use crate::error::{Error, Result};
use crate::evalkit::{
    alias_energy_ratio, emit_report, psnr, snr, spectrum_mag, write_gray_png, write_panels, MetricReport, MetricRow,
    ResultTable,
};
use crate::neuralnet::{load_checkpoint, save_checkpoint, Unet, UnetSpec};
use crate::patchwork::plan_patches;
use crate::restore::{restore_gather, RestoreJob};
use crate::seisdata::{
    load_dataset, load_gather, load_mask, load_masks, resolve, save_dataset, save_gather, Dataset, DatasetManifest,
    Gather, ManifestEntry, SampleMask, Split,
};
use crate::synthgen::{make_dataset, SynthConfig};
use crate::trainer::{train_with_observer, write_history, Task, TrainConfig, TrainPair};

/// Environment variable holding the default output root.
pub const OUT_ROOT_ENV: &str = "SEISNET_OUT_ROOT";

#[derive(Debug, Parser)]
#[command(name = "seisnet", version, about = "U-net restoration of 2D seismic shot gathers")]
pub struct Cli {
    /// Worker threads (computation is serial; recorded for provenance).
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Root for output directories when --out-dir is not given.
    #[arg(long, global = true, env = OUT_ROOT_ENV)]
    pub out_root: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dipping-event dataset.
    Synth(SynthArgs),
    /// Corrupt every gather of a dataset.
    Corrupt(CorruptArgs),
    /// Train a U-net on clean/corrupted dataset pairs.
    Train(TrainArgs),
    /// Restore gathers with a trained checkpoint.
    Restore(RestoreArgs),
    /// Score restored gathers against clean ones.
    Eval(EvalArgs),
    /// f-k magnitude spectrum and alias energy of one gather.
    Spectrum(SpectrumArgs),
    /// Images and tables comparing clean, corrupted and restored data.
    Report(ReportArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Corrupt(_) => "corrupt",
            Command::Train(_) => "train",
            Command::Restore(_) => "restore",
            Command::Eval(_) => "eval",
            Command::Spectrum(_) => "spectrum",
            Command::Report(_) => "report",
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// JSON synthesis config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "n")]
    pub n_gathers: Option<usize>,
    #[arg(long)]
    pub nt: Option<usize>,
    #[arg(long)]
    pub nx: Option<usize>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub dx: Option<f64>,
    #[arg(long)]
    pub f0: Option<f64>,
    /// Slope bounds in seconds per trace.
    #[arg(long, allow_hyphen_values = true)]
    pub slope_min: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub slope_max: Option<f64>,
    #[arg(long)]
    pub t0_min: Option<f64>,
    #[arg(long)]
    pub t0_max: Option<f64>,
    #[arg(long)]
    pub amplitude: Option<f64>,
    #[arg(long)]
    pub n_trainval: Option<usize>,
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Uniform,
    Burst,
    Regular,
    AwgnSnr,
    AwgnSigma,
    Spike,
    Bandlimited,
    NormalizeTraces,
}

#[derive(Debug, Args, Serialize)]
pub struct CorruptArgs {
    /// Clean dataset manifest.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum)]
    pub variant: Option<Variant>,
    /// JSON file with a list of corruption specs applied in order.
    #[arg(long, conflicts_with = "variant")]
    pub chain: Option<PathBuf>,
    /// Percentage of missing traces.
    #[arg(long = "H")]
    pub h: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub factor: Option<usize>,
    /// Target S/N in dB.
    #[arg(long, allow_hyphen_values = true)]
    pub snr: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Percentage of samples hit by spikes.
    #[arg(long = "d")]
    pub d: Option<f64>,
    #[arg(long)]
    pub f0: Option<f64>,
    #[arg(long)]
    pub cutoff: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskArg {
    Denoise,
    Interpolate,
    Joint,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Denoise => Task::Denoise,
            TaskArg::Interpolate => Task::Interpolate,
            TaskArg::Joint => Task::Joint,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Dataset manifest with the target (clean) gathers.
    #[arg(long)]
    pub clean: PathBuf,
    /// Dataset manifest with the corrupted gathers and masks.
    #[arg(long)]
    pub corrupted: PathBuf,
    /// JSON training config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    #[arg(long, default_value_t = 64)]
    pub patch: usize,
    #[arg(long)]
    pub stride_t: Option<usize>,
    #[arg(long)]
    pub stride_x: Option<usize>,
    /// Channels of the first encoder stage.
    #[arg(long, default_value_t = 64)]
    pub base_channels: usize,
    #[arg(long, default_value_t = 512)]
    pub max_channels: usize,
    #[arg(long)]
    pub bn_momentum: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub gain: Option<f32>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Seed of the weight initialisation (defaults to --seed).
    #[arg(long)]
    pub init_seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    All,
    Train,
    Validation,
    Evaluation,
}

impl SplitArg {
    fn accepts(self, s: Split) -> bool {
        match self {
            SplitArg::All => true,
            SplitArg::Train => s == Split::Train,
            SplitArg::Validation => s == Split::Validation,
            SplitArg::Evaluation => s == Split::Evaluation,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct RestoreArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Manifest of the corrupted dataset.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Directory of `<gather stem>.smsk` masks overriding the manifest.
    #[arg(long)]
    pub mask_dir: Option<PathBuf>,
    /// Clean dataset used to score the restoration.
    #[arg(long)]
    pub clean: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    #[arg(long = "patch")]
    pub patch: Option<usize>,
    #[arg(long)]
    pub stride_t: Option<usize>,
    #[arg(long)]
    pub stride_x: Option<usize>,
    #[arg(long)]
    pub gain: Option<f32>,
    #[arg(long, value_enum, default_value_t = SplitArg::All)]
    pub split: SplitArg,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// Clean gather (`.sgth`) or dataset manifest (`.json`).
    #[arg(long)]
    pub clean: PathBuf,
    /// Restored gather or dataset manifest.
    #[arg(long)]
    pub restored: PathBuf,
    /// Also report PS/N with this dynamic range.
    #[arg(long)]
    pub s_max: Option<f64>,
    #[arg(long, default_value = "eval")]
    pub label: String,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SpectrumArgs {
    #[arg(long)]
    pub gather: PathBuf,
    /// Dominant frequency for the alias band (defaults to the gather's).
    #[arg(long)]
    pub f0: Option<f64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    #[arg(long)]
    pub clean: Option<PathBuf>,
    #[arg(long)]
    pub corrupted: Option<PathBuf>,
    #[arg(long)]
    pub restored: Option<PathBuf>,
    /// JSON result table to render as CSV.
    #[arg(long)]
    pub table: Option<PathBuf>,
    #[arg(long)]
    pub s_max: Option<f64>,
    #[arg(long, default_value = "report")]
    pub label: String,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct ExperimentManifest {
    tool: &'static str,
    version: &'static str,
    subcommand: &'static str,
    config: Value,
    seeds: BTreeMap<String, u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<String>,
}

struct Run {
    out_dir: PathBuf,
    started: Instant,
    timings: BTreeMap<String, f64>,
    outputs: Vec<String>,
}

impl Run {
    fn new(out_dir: PathBuf) -> Result<Self> {
        std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
        Ok(Run {
            out_dir,
            started: Instant::now(),
            timings: BTreeMap::new(),
            outputs: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.out_dir.join(name)
    }

    fn record(&mut self, p: &Path) {
        if let Ok(rel) = p.strip_prefix(&self.out_dir) {
            self.outputs.push(rel.to_string_lossy().into_owned());
        }
    }

    fn time(&mut self, key: impl Into<String>, secs: f64) {
        self.timings.insert(key.into(), secs);
    }

    fn finish(mut self, subcommand: &'static str, config: Value, seeds: BTreeMap<String, u64>, inputs: Vec<PathBuf>) -> Result<()> {
        self.time("total_s", self.started.elapsed().as_secs_f64());
        self.outputs.sort();
        self.outputs.dedup();
        let manifest = ExperimentManifest {
            tool: "seisnet",
            version: env!("CARGO_PKG_VERSION"),
            subcommand,
            config,
            seeds,
            inputs,
            outputs: self.outputs,
        };
        write_json(&self.out_dir.join("manifest.json"), &manifest)?;
        write_json(&self.out_dir.join("timings.json"), &self.timings)
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn out_dir(explicit: &Option<PathBuf>, root: &Option<PathBuf>, sub: &str) -> PathBuf {
    explicit
        .clone()
        .unwrap_or_else(|| root.clone().unwrap_or_else(|| PathBuf::from("seisnet-out")).join(sub))
}

fn seeds(pairs: &[(&str, u64)]) -> BTreeMap<String, u64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

/// Parses `args` and runs the selected subcommand.
pub fn run_from<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Usage(e.to_string()))?;
    run(cli)
}

pub fn run(cli: Cli) -> Result<()> {
    if cli.threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    let root = cli.out_root.clone();
    let name = cli.command.name();
    match &cli.command {
        Command::Synth(a) => synth(a, Run::new(out_dir(&a.out_dir, &root, name))?, cli.threads),
        Command::Corrupt(a) => corrupt(a, Run::new(out_dir(&a.out_dir, &root, name))?, cli.threads),
        Command::Train(a) => train_cmd(a, Run::new(out_dir(&a.out_dir, &root, name))?, cli.threads),
        Command::Restore(a) => restore_cmd(a, Run::new(out_dir(&a.out_dir, &root, name))?, cli.threads),
        Command::Eval(a) => eval_cmd(a, Run::new(out_dir(&a.out_dir, &root, name))?, cli.threads),
        Command::Spectrum(a) => spectrum_cmd(a, Run::new(out_dir(&a.out_dir, &root, name))?, cli.threads),
        Command::Report(a) => report_cmd(a, Run::new(out_dir(&a.out_dir, &root, name))?, cli.threads),
    }
}

fn synth(a: &SynthArgs, mut run: Run, threads: usize) -> Result<()> {
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SynthConfig::default(),
    };
    macro_rules! set {
        ($field:ident, $val:expr) => {
            if let Some(v) = $val {
                cfg.$field = v;
            }
        };
    }
    set!(n_gathers, a.n_gathers);
    set!(n_t, a.nt);
    set!(n_x, a.nx);
    set!(dt, a.dt);
    set!(dx, a.dx);
    set!(f0, a.f0);
    set!(amplitude, a.amplitude);
    set!(trainval_ratio, a.ratio);
    set!(seed, a.seed);
    if a.n_trainval.is_some() {
        cfg.n_trainval = a.n_trainval;
    }
    if a.slope_min.is_some() || a.slope_max.is_some() {
        let (lo, hi) = cfg.slope_range();
        cfg.slope_range = Some((a.slope_min.unwrap_or(lo), a.slope_max.unwrap_or(hi)));
    }
    if a.t0_min.is_some() || a.t0_max.is_some() {
        let (lo, hi) = cfg.t0_range();
        cfg.t0_range = Some((a.t0_min.unwrap_or(lo), a.t0_max.unwrap_or(hi)));
    }
    let t = Instant::now();
    let ds = make_dataset(&cfg)?;
    run.time("generate_s", t.elapsed().as_secs_f64());
    let provenance = json!({ "generator": "single dipping Ricker event", "config": cfg });
    save_dataset(&ds, None, cfg.seed, Some(provenance), &run.out_dir)?;
    for i in 0..ds.len() {
        run.path(&format!("gather_{i:04}.sgth"));
    }
    run.path("dataset.json");
    let config = json!({ "synth": cfg, "threads": threads });
    let inputs = a.config.iter().cloned().collect();
    run.finish("synth", config, seeds(&[("seed", cfg.seed)]), inputs)
}

fn corruption_from_flags(a: &CorruptArgs) -> Result<Vec<CorruptionSpec>> {
    if let Some(p) = &a.chain {
        let specs: Vec<CorruptionSpec> = read_json(p)?;
        return Ok(specs);
    }
    let variant = a
        .variant
        .ok_or_else(|| Error::Config("either --variant or --chain is required".into()))?;
    let need = |v: Option<f64>, flag: &str| v.ok_or_else(|| Error::Config(format!("--variant needs --{flag}")));
    let c = match variant {
        Variant::Uniform => Corruption::Uniform { h: need(a.h, "H")? },
        Variant::Burst => Corruption::Burst {
            alpha: need(a.alpha, "alpha")?,
            beta: need(a.beta, "beta")?,
        },
        Variant::Regular => Corruption::Regular {
            factor: a.factor.ok_or_else(|| Error::Config("--variant regular needs --factor".into()))?,
        },
        Variant::AwgnSnr => Corruption::AwgnSnr { snr_db: need(a.snr, "snr")? },
        Variant::AwgnSigma => Corruption::AwgnSigma { sigma: need(a.sigma, "sigma")? },
        Variant::Spike => Corruption::Spike {
            d: need(a.d, "d")?,
            f0: need(a.f0, "f0")?,
        },
        Variant::Bandlimited => Corruption::Bandlimited {
            sigma: need(a.sigma, "sigma")?,
            cutoff: need(a.cutoff, "cutoff")?,
        },
        Variant::NormalizeTraces => Corruption::NormalizeTraces,
    };
    Ok(vec![CorruptionSpec::new(c, a.seed)])
}

fn corrupt(a: &CorruptArgs, mut run: Run, threads: usize) -> Result<()> {
    let specs = corruption_from_flags(a)?;
    for s in &specs {
        s.validate()?;
    }
    let (manifest, ds) = load_dataset(&a.dataset)?;
    let t = Instant::now();
    let mut gathers = Vec::with_capacity(ds.len());
    let mut masks = Vec::with_capacity(ds.len());
    for (i, g) in ds.gathers.iter().enumerate() {
        let (c, tm) = apply_chain(g, &specs, i as u64)?;
        masks.push(tm.to_sample_mask(g.n_t()));
        gathers.push(c);
    }
    run.time("corrupt_s", t.elapsed().as_secs_f64());
    let out = Dataset::new(gathers, ds.split.clone())?;
    let provenance = json!({ "source": a.dataset, "chain": specs });
    save_dataset(&out, Some(&masks), manifest.seed, Some(provenance), &run.out_dir)?;
    for i in 0..out.len() {
        run.path(&format!("gather_{i:04}.sgth"));
        run.path(&format!("gather_{i:04}.smsk"));
    }
    run.path("dataset.json");
    let seed_list: Vec<(String, u64)> = specs.iter().enumerate().map(|(i, s)| (format!("chain[{i}]"), s.seed)).collect();
    let config = json!({ "chain": specs, "threads": threads });
    run.finish(
        "corrupt",
        config,
        seed_list.into_iter().collect(),
        vec![a.dataset.clone()],
    )
}

fn load_pairs(clean: &Path, corrupted: &Path) -> Result<(Vec<Split>, Vec<TrainPair>)> {
    let (_, cds) = load_dataset(clean)?;
    let (cm, xds) = load_dataset(corrupted)?;
    if cds.len() != xds.len() {
        return Err(Error::Shape(format!(
            "clean dataset has {} gathers, corrupted has {}",
            cds.len(),
            xds.len()
        )));
    }
    let masks = load_masks(corrupted, &cm)?;
    let pairs = cds
        .gathers
        .into_iter()
        .zip(xds.gathers)
        .zip(masks)
        .map(|((c, x), m)| TrainPair::new(c, x, m))
        .collect::<Result<Vec<_>>>()?;
    Ok((xds.split, pairs))
}

fn train_cmd(a: &TrainArgs, mut run: Run, threads: usize) -> Result<()> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(t) = a.task {
        cfg.task = t.into();
    }
    if let Some(v) = a.lr {
        cfg.lr0 = v;
    }
    if let Some(v) = a.patience {
        cfg.patience0 = v;
    }
    if let Some(v) = a.epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = a.gain {
        cfg.gain = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    let mut spec = UnetSpec::new(a.patch)?.with_width(a.base_channels, a.max_channels);
    if let Some(m) = a.bn_momentum {
        if !(0.0..1.0).contains(&m) {
            return Err(Error::Config(format!("--bn-momentum must lie in [0, 1), got {m}")));
        }
        spec.bn_momentum = m;
    }
    let (splits, pairs) = load_pairs(&a.clean, &a.corrupted)?;
    let shape = pairs
        .first()
        .map(|p| p.clean.shape())
        .ok_or_else(|| Error::Config("empty dataset".into()))?;
    let grid = plan_patches(
        shape,
        a.patch,
        a.stride_t.unwrap_or(a.patch),
        a.stride_x.unwrap_or(a.patch),
    )?;
    let pick = |s: Split| -> Vec<TrainPair> {
        splits
            .iter()
            .zip(&pairs)
            .filter(|(sp, _)| **sp == s)
            .map(|(_, p)| p.clone())
            .collect()
    };
    let (tr, va) = (pick(Split::Train), pick(Split::Validation));
    let init_seed = a.init_seed.unwrap_or(cfg.seed);
    let model = Unet::<f32>::new(spec.clone(), init_seed);
    let t = Instant::now();
    let outcome = train_with_observer(model, &tr, &va, &grid, &cfg, |r| {
        eprintln!(
            "epoch {:>3}  train {:.6e}  val {:.6e}  lr {:.1e}  patience {}",
            r.epoch, r.train_loss, r.val_loss, r.lr, r.patience
        );
    })?;
    run.time("train_s", t.elapsed().as_secs_f64());

    let validation_loss = if cfg.task.masked() { "masked" } else { "unmasked" };
    let metadata = json!({
        "task": cfg.task,
        "gain": cfg.gain,
        "stride_t": grid.stride_t,
        "stride_x": grid.stride_x,
        "best_epoch": outcome.best_epoch,
        "best_val_loss": outcome.best_val_loss,
        "validation_loss": validation_loss,
    });
    save_checkpoint(&outcome.model, metadata, &run.path("best.ckpt"))?;
    write_history(&outcome.history, &run.path("history.csv"))?;
    let full = json!({
        "train": cfg,
        "unet": spec,
        "clean": a.clean,
        "corrupted": a.corrupted,
        "grid": { "n": grid.n, "stride_t": grid.stride_t, "stride_x": grid.stride_x, "patches": grid.len() },
        "init_seed": init_seed,
        "validation_loss": validation_loss,
        "threads": threads,
    });
    write_json(&run.path("config.json"), &full)?;
    run.finish(
        "train",
        full,
        seeds(&[("seed", cfg.seed), ("init_seed", init_seed)]),
        vec![a.clean.clone(), a.corrupted.clone()],
    )
}

fn restore_cmd(a: &RestoreArgs, mut run: Run, threads: usize) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let meta = &ck.manifest.metadata;
    let task: Task = match a.task {
        Some(t) => t.into(),
        None => serde_json::from_value(meta.get("task").cloned().unwrap_or(Value::Null))
            .map_err(|_| Error::Config("--task is required (checkpoint records none)".into()))?,
    };
    let gain = a
        .gain
        .or_else(|| meta.get("gain").and_then(Value::as_f64).map(|g| g as f32))
        .unwrap_or(2000.0);
    let n = a.patch.unwrap_or(ck.model.spec().n);
    let (manifest, ds) = load_dataset(&a.dataset)?;
    let masks: Vec<Option<SampleMask>> = match &a.mask_dir {
        Some(dir) => manifest
            .gathers
            .iter()
            .map(|e| {
                let stem = e.path.file_stem().unwrap_or_default();
                let p = dir.join(stem).with_extension("smsk");
                if p.exists() {
                    load_mask(&p).map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<_>>()?,
        None => load_masks(&a.dataset, &manifest)?,
    };
    let clean = match &a.clean {
        Some(p) => Some(load_dataset(p)?.1),
        None => None,
    };
    let mut entries = Vec::new();
    let mut rows = Vec::new();
    let mut grid_desc = None;
    for (i, (g, entry)) in ds.gathers.iter().zip(&manifest.gathers).enumerate() {
        if !a.split.accepts(entry.split) {
            continue;
        }
        let grid = plan_patches(g.shape(), n, a.stride_t.unwrap_or(n), a.stride_x.unwrap_or(n))?;
        grid_desc.get_or_insert_with(|| json!({ "n": n, "stride_t": grid.stride_t, "stride_x": grid.stride_x }));
        let job = RestoreJob {
            model: &ck.model,
            task,
            grid: &grid,
            gain,
            input: g,
            mask: masks[i].as_ref(),
        };
        let t = Instant::now();
        let restored = restore_gather(&job)?;
        run.time(format!("gather_{i:04}_s"), t.elapsed().as_secs_f64());
        let name = format!("gather_{i:04}.sgth");
        save_gather(&restored, run.path(&name))?;
        entries.push(ManifestEntry {
            path: PathBuf::from(&name),
            split: entry.split,
            mask: None,
        });
        if let Some(c) = &clean {
            let reference = c
                .gathers
                .get(i)
                .ok_or_else(|| Error::Shape("clean dataset has fewer gathers".into()))?;
            rows.push(MetricRow {
                name: i.to_string(),
                snr: snr(reference, &restored)?,
                psnr: None,
            });
        }
    }
    let out_manifest = DatasetManifest {
        seed: manifest.seed,
        gathers: entries,
        provenance: Some(json!({ "restored_from": a.dataset, "checkpoint": a.checkpoint, "task": task })),
    };
    out_manifest.save(run.path("dataset.json"))?;
    if clean.is_some() {
        let report = MetricReport {
            label: "restore".into(),
            rows,
            provenance: Value::Null,
        };
        for p in emit_report(std::slice::from_ref(&report), &run.out_dir)? {
            run.record(&p);
        }
    }
    let config = json!({
        "task": task,
        "gain": gain,
        "grid": grid_desc,
        "split": a.split,
        "threads": threads,
    });
    let mut inputs = vec![a.checkpoint.clone(), a.dataset.clone()];
    inputs.extend(a.mask_dir.clone());
    inputs.extend(a.clean.clone());
    run.finish("restore", config, BTreeMap::new(), inputs)
}

/// Gathers from a `.json` dataset manifest or a single gather file.
fn load_any(path: &Path) -> Result<Vec<(String, Gather)>> {
    if path.extension().is_some_and(|e| e == "json") {
        let manifest = DatasetManifest::load(path)?;
        manifest
            .gathers
            .iter()
            .map(|e| {
                let name = e.path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                Ok((name, load_gather(resolve(path, &e.path))?))
            })
            .collect()
    } else {
        let name = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        Ok(vec![(name, load_gather(path)?)])
    }
}

/// Pairs gathers by position when the counts agree, by name otherwise.
fn pair_up<'a>(clean: &'a [(String, Gather)], other: &'a [(String, Gather)]) -> Result<Vec<(&'a Gather, &'a (String, Gather))>> {
    if clean.len() == other.len() {
        return Ok(clean.iter().map(|(_, c)| c).zip(other).collect());
    }
    other
        .iter()
        .map(|o| {
            clean
                .iter()
                .find(|(name, _)| *name == o.0)
                .map(|(_, c)| (c, o))
                .ok_or_else(|| Error::Shape(format!("no clean gather named {}", o.0)))
        })
        .collect()
}

fn score(label: &str, clean: &[(String, Gather)], other: &[(String, Gather)], s_max: Option<f64>) -> Result<MetricReport> {
    let rows = pair_up(clean, other)?
        .into_iter()
        .map(|(c, (name, r))| {
            Ok(MetricRow {
                name: name.clone(),
                snr: snr(c, r)?,
                psnr: s_max.map(|s| psnr(c, r, s)).transpose()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport {
        label: label.to_string(),
        rows,
        provenance: Value::Null,
    })
}

fn eval_cmd(a: &EvalArgs, mut run: Run, threads: usize) -> Result<()> {
    let clean = load_any(&a.clean)?;
    let restored = load_any(&a.restored)?;
    let mut report = score(&a.label, &clean, &restored, a.s_max)?;
    report.provenance = json!({ "clean": a.clean, "restored": a.restored });
    for r in &report.rows {
        match r.psnr {
            Some(p) => println!("{}\tS/N {} dB\tPS/N {} dB", r.name, r.snr, p),
            None => println!("{}\tS/N {} dB", r.name, r.snr),
        }
    }
    if let Some(m) = report.mean_snr() {
        println!("mean\tS/N {m} dB");
    }
    for p in emit_report(std::slice::from_ref(&report), &run.out_dir)? {
        run.record(&p);
    }
    let config = json!({ "s_max": a.s_max, "label": a.label, "threads": threads });
    run.finish("eval", config, BTreeMap::new(), vec![a.clean.clone(), a.restored.clone()])
}

fn spectrum_cmd(a: &SpectrumArgs, mut run: Run, threads: usize) -> Result<()> {
    let g = load_gather(&a.gather)?;
    let f0 = a.f0.unwrap_or(g.meta.f0);
    let spec = spectrum_mag(&g);
    let max = spec.iter().fold(0.0f64, |m, &v| m.max(v));
    let png = run.path("spectrum.png");
    run.path("spectrum.json");
    write_gray_png(&spec, &png, Some((0.0, if max > 0.0 { max } else { 1.0 })))?;
    let ratio = alias_energy_ratio(&g, f0);
    println!("alias energy ratio {ratio}");
    write_json(
        &run.path("alias.json"),
        &json!({ "alias_energy_ratio": ratio, "f0": f0, "band_hz": 3.0 * f0 }),
    )?;
    let config = json!({ "f0": f0, "threads": threads });
    run.finish("spectrum", config, BTreeMap::new(), vec![a.gather.clone()])
}

fn report_cmd(a: &ReportArgs, mut run: Run, threads: usize) -> Result<()> {
    let clean = a.clean.as_deref().map(load_any).transpose()?;
    let mut reports = Vec::new();
    for (tag, path) in [("corrupted", &a.corrupted), ("restored", &a.restored)] {
        let Some(path) = path else { continue };
        let other = load_any(path)?;
        let pairs: Vec<(Option<&Gather>, &(String, Gather))> = match &clean {
            Some(c) => pair_up(c, &other)?.into_iter().map(|(c, o)| (Some(c), o)).collect(),
            None => other.iter().map(|o| (None, o)).collect(),
        };
        for (reference, (name, g)) in pairs {
            for p in write_panels(&format!("{name}_{tag}"), reference, g, &run.out_dir)? {
                run.record(&p);
            }
        }
        if let Some(c) = &clean {
            reports.push(score(&format!("{}-{tag}", a.label), c, &other, a.s_max)?);
        }
    }
    if let Some(c) = &clean {
        for (name, g) in c {
            for p in write_panels(&format!("{name}_clean"), None, g, &run.out_dir)? {
                run.record(&p);
            }
        }
    }
    for p in emit_report(&reports, &run.out_dir)? {
        run.record(&p);
    }
    if let Some(t) = &a.table {
        let table: ResultTable = read_json(t)?;
        let p = run.path("table.csv");
        std::fs::write(&p, table.to_csv()).map_err(|e| Error::io(&p, e))?;
    }
    let config = json!({ "label": a.label, "s_max": a.s_max, "threads": threads });
    let inputs = [&a.clean, &a.corrupted, &a.restored, &a.table]
        .into_iter()
        .flatten()
        .cloned()
        .collect();
    run.finish("report", config, BTreeMap::new(), inputs)
}
