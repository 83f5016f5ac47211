//! The `dehaze` command line.
//!
//! Exit codes: 0 success, 1 usage or invalid value, 2 IO or file format,
//! 3 incompatible checkpoint, 4 a check failed or training diverged.
//! `DEHAZE_THREADS` caps the worker threads.

pub mod pnm;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use thiserror::Error;

use crate::conformance::{self, CheckRow};
use crate::error::DehazeError;
use crate::image::{AtmosphericLight, ImagePlane};
use crate::ipudn::{IpudnConfig, Trajectory};
use crate::pipeline::ablation::{run_ablation, AblationAxis, AblationPlan};
use crate::pipeline::data::HazeBand;
use crate::pipeline::eval::{eval_suite, Metrics};
use crate::pipeline::train::TrainLog;
use crate::pipeline::{load_checkpoint, save_checkpoint, Architecture, Models, TrainConfig, Trainer};
use crate::scattering::{dehaze_dcp, synthesize_haze, transmission_from_depth, DcpConfig, DEFAULT_T_FLOOR};

pub const THREADS_ENV: &str = "DEHAZE_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "dehaze",
    version,
    about = "Single-image dehazing with iteratively updated priors",
    after_help = "Exit codes: 0 ok, 1 usage, 2 IO or format, 3 incompatible checkpoint, 4 check failed or training diverged.\n\
                  Environment: DEHAZE_THREADS sets the worker thread count (default: all cores)."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a procedural dataset: clean/, depth/, hazy/ and manifest.tsv.
    GenData(GenDataArgs),
    /// Haze one clean image with a depth map.
    Synth(SynthArgs),
    /// Dehaze one image with a trained checkpoint.
    Dehaze(DehazeArgs),
    /// Dehaze one image with the dark channel prior.
    DehazeDcp(DcpArgs),
    /// Run one training stage.
    Train(TrainArgs),
    /// Score predicted images against ground truth.
    Eval(EvalArgs),
    /// Train paired variants along one design axis.
    Ablate(AblateArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Write every intermediate output of the recurrent dehazer.
    Trace(TraceArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Band {
    Low,
    Mid,
    High,
    Random,
    Cast,
}

impl From<Band> for HazeBand {
    fn from(b: Band) -> HazeBand {
        match b {
            Band::Low => HazeBand::Low,
            Band::Mid => HazeBand::Mid,
            Band::High => HazeBand::High,
            Band::Random => HazeBand::Random,
            Band::Cast => HazeBand::Cast,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of samples.
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Haze band: low, mid and high are gray; cast tints the airlight.
    #[arg(long, value_enum, default_value_t = Band::Random)]
    pub haze: Band,
    /// Side of the square images.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Clean binary PPM (P6).
    #[arg(long)]
    pub clean: PathBuf,
    /// Depth as binary PGM (P5); maxval maps to depth 1.
    #[arg(long)]
    pub depth: PathBuf,
    /// Attenuation coefficient.
    #[arg(long)]
    pub beta: f64,
    /// Airlight as one gray value or `r,g,b`, each in [0, 1].
    #[arg(long, default_value = "0.8")]
    pub airlight: String,
    /// Hazy PPM to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the transmission map as 8-bit PGM.
    #[arg(long)]
    pub transmission_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DehazeArgs {
    /// Hazy PPM, at least 64x64.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dehazed PPM to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for per-step outputs and airlight values.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Recurrent steps; defaults to the checkpoint's training value.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DcpArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Odd side of the dark-channel window.
    #[arg(long, default_value_t = 15)]
    pub patch: usize,
    /// Fraction of haze removed.
    #[arg(long, default_value_t = 0.95)]
    pub omega: f64,
    /// Lower bound on transmission during inversion.
    #[arg(long, default_value_t = DEFAULT_T_FLOOR)]
    pub t_floor: f64,
    /// Also write the estimated transmission as 8-bit PGM.
    #[arg(long)]
    pub transmission_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Narrow networks and a short schedule sized for one CPU core.
    Desk,
    /// Full-width networks with the 2k/6k/2k update schedule.
    Full,
}

impl Preset {
    fn config(self, stage: u8) -> TrainConfig {
        match self {
            Preset::Desk => TrainConfig::desk(stage),
            Preset::Full => TrainConfig::for_stage(stage),
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML training config; unset fields take the preset's values.
    #[arg(long, conflicts_with = "resume")]
    pub config: Option<PathBuf>,
    /// Built-in config used without --config.
    #[arg(long, value_enum, default_value_t = Preset::Desk, conflicts_with = "resume")]
    pub preset: Preset,
    /// Stage to run: 1 estimators, 2 dehazer, 3 joint fine-tuning.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3), conflicts_with = "resume")]
    pub stage: Option<u8>,
    /// Overrides the config seed.
    #[arg(long, conflicts_with = "resume")]
    pub seed: Option<u64>,
    /// Checkpoint of the previous stage; required for stages 2 and 3.
    #[arg(long, conflicts_with = "resume")]
    pub init: Option<PathBuf>,
    /// Continue from a state file written via --state.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Final model checkpoint, written when the stage completes.
    #[arg(long)]
    pub out: PathBuf,
    /// Resumable trainer state, written every --checkpoint-every updates
    /// and when --max-updates stops the run.
    #[arg(long)]
    pub state: Option<PathBuf>,
    #[arg(long, default_value_t = 0, requires = "state")]
    pub checkpoint_every: u64,
    /// Stop after this many updates in this invocation.
    #[arg(long, requires = "state")]
    pub max_updates: Option<u64>,
    /// Print the resolved config as TOML and exit.
    #[arg(long)]
    pub print_config: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of predicted PPMs.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of ground-truth PPMs with the same file names.
    #[arg(long)]
    pub gt: PathBuf,
    /// Tab-separated report: one row per image plus a mean row.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    PoolKind,
    UpdateLocality,
    TimeSteps,
    LossKind,
}

impl From<Axis> for AblationAxis {
    fn from(a: Axis) -> AblationAxis {
        match a {
            Axis::PoolKind => AblationAxis::PoolKind,
            Axis::UpdateLocality => AblationAxis::UpdateLocality,
            Axis::TimeSteps => AblationAxis::TimeSteps,
            Axis::LossKind => AblationAxis::LossKind,
        }
    }
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub axis: Axis,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Stage-1 checkpoint shared by stage-2 variants; trained when absent.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Held-out scenes per haze band.
    #[arg(long, default_value_t = 8)]
    pub eval_scenes: usize,
    /// Also write the table to this file.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Random coordinates per parameter group.
    #[arg(long, default_value_t = 100)]
    pub coords: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Dehazer and updater width; 32 is the default architecture.
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    /// Side of the IPUDN check input.
    #[arg(long, default_value_t = 16)]
    pub size: usize,
    #[arg(long, default_value_t = 6)]
    pub steps: usize,
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory for i_NN.ppm, t_NN.pgm and airlight.tsv.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Engine(#[from] DehazeError),
    #[error("unmatched files: {}", .0.join(", "))]
    Unmatched(Vec<String>),
    #[error("{0}")]
    CheckFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Unmatched(_) => 2,
            CliError::CheckFailed(_) => 4,
            CliError::Engine(e) => match e {
                DehazeError::Param { .. } | DehazeError::Config(_) => 1,
                DehazeError::Io { .. } | DehazeError::Format { .. } | DehazeError::Shape { .. } => 2,
                DehazeError::Checkpoint(_) => 3,
                DehazeError::Diverged { .. } | DehazeError::Tensor(_) => 4,
            },
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return e.exit_code();
    }
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn configure_threads() -> CliResult {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    // a second call in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn execute(command: Command) -> CliResult {
    match command {
        Command::GenData(a) => gen_data(&a),
        Command::Synth(a) => synth(&a),
        Command::Dehaze(a) => dehaze(&a),
        Command::DehazeDcp(a) => dehaze_dcp_cmd(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Ablate(a) => ablate(&a),
        Command::Gradcheck(a) => gradcheck(&a),
        Command::Trace(a) => trace(&a),
    }
}

fn create_dir(path: &Path) -> CliResult {
    std::fs::create_dir_all(path).map_err(|e| DehazeError::io(path, e))?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> CliResult {
    std::fs::write(path, text).map_err(|e| DehazeError::io(path, e))?;
    Ok(())
}

fn gen_data(a: &GenDataArgs) -> CliResult {
    if a.count == 0 || a.size < 8 {
        return Err(CliError::Usage("--count must be positive and --size at least 8".into()));
    }
    let cases = eval_suite(a.seed, a.count, a.size, &[a.haze.into()])?;
    for sub in ["clean", "depth", "hazy"] {
        create_dir(&a.out.join(sub))?;
    }
    cases.par_iter().enumerate().try_for_each(|(i, c)| -> CliResult {
        let name = format!("{i:04}");
        pnm::write_ppm(a.out.join("clean").join(format!("{name}.ppm")), &c.sample.clean)?;
        pnm::write_pgm16(a.out.join("depth").join(format!("{name}.pgm")), &c.sample.depth)?;
        pnm::write_ppm(a.out.join("hazy").join(format!("{name}.ppm")), &c.sample.hazy)?;
        Ok(())
    })?;
    let mut manifest = String::from("name\tband\tbeta\ta_r\ta_g\ta_b\n");
    for (i, c) in cases.iter().enumerate() {
        let [r, g, b] = c.sample.haze.airlight.rgb();
        let _ = writeln!(
            manifest,
            "{i:04}\t{}\t{:.17}\t{r:.17}\t{g:.17}\t{b:.17}",
            c.band.name(),
            c.sample.haze.beta
        );
    }
    write_text(&a.out.join("manifest.tsv"), &manifest)?;
    print!("{manifest}");
    Ok(())
}

fn parse_airlight(s: &str) -> CliResult<AtmosphericLight> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("--airlight expects numbers, got {s:?}")))?;
    let a = match parts[..] {
        [v] => AtmosphericLight::gray(v)?,
        [r, g, b] => AtmosphericLight::new(r, g, b)?,
        _ => return Err(CliError::Usage("--airlight takes one value or r,g,b".into())),
    };
    Ok(a)
}

fn synth(a: &SynthArgs) -> CliResult {
    let airlight = parse_airlight(&a.airlight)?;
    let clean = pnm::read_ppm(&a.clean)?;
    let depth = pnm::read_pgm(&a.depth)?;
    let t = transmission_from_depth(&depth, a.beta)?;
    let hazy = synthesize_haze(&clean, &t, airlight)?;
    pnm::write_ppm(&a.out, &hazy)?;
    if let Some(p) = &a.transmission_out {
        pnm::write_pgm8(p, &t)?;
    }
    let t_min = t.data().iter().copied().fold(f64::INFINITY, f64::min);
    println!("beta\t{}\tt_min\t{t_min:.6}", a.beta);
    Ok(())
}

fn load_models(path: &Path) -> CliResult<(Models, TrainConfig)> {
    Ok(Models::from_checkpoint(&load_checkpoint(path)?)?)
}

fn write_trace(dir: &Path, hazy: &ImagePlane, traj: &Trajectory) -> CliResult<String> {
    create_dir(dir)?;
    pnm::write_ppm(dir.join("i_00.ppm"), hazy)?;
    let mut table = String::from("step\ta_r\ta_g\ta_b\n");
    for s in std::iter::once(&traj.initial).chain(&traj.steps) {
        if s.step > 0 {
            pnm::write_ppm(dir.join(format!("i_{:02}.ppm", s.step)), &s.i_prime)?;
        }
        pnm::write_pgm8(dir.join(format!("t_{:02}.pgm", s.step)), &s.t_prime)?;
        let [r, g, b] = s.airlight().rgb();
        let _ = writeln!(table, "{}\t{r:.6}\t{g:.6}\t{b:.6}", s.step);
    }
    write_text(&dir.join("airlight.tsv"), &table)?;
    Ok(table)
}

fn dehaze(a: &DehazeArgs) -> CliResult {
    let (models, cfg) = load_models(&a.checkpoint)?;
    let hazy = pnm::read_ppm(&a.input)?;
    let steps = a.steps.unwrap_or(cfg.t1);
    let out = models.dehaze(&hazy, steps)?;
    pnm::write_ppm(&a.out, &out.image)?;
    if let Some(dir) = &a.trace {
        write_trace(dir, &hazy, &out.trajectory)?;
    }
    let [r, g, b] = out.airlight.rgb();
    println!("steps\t{steps}\tairlight\t{r:.6}\t{g:.6}\t{b:.6}");
    Ok(())
}

fn trace(a: &TraceArgs) -> CliResult {
    let (models, cfg) = load_models(&a.checkpoint)?;
    let hazy = pnm::read_ppm(&a.input)?;
    let out = models.dehaze(&hazy, a.steps.unwrap_or(cfg.t1))?;
    print!("{}", write_trace(&a.out, &hazy, &out.trajectory)?);
    Ok(())
}

fn dehaze_dcp_cmd(a: &DcpArgs) -> CliResult {
    let hazy = pnm::read_ppm(&a.input)?;
    let cfg = DcpConfig {
        omega: a.omega,
        patch: a.patch,
        t_floor: a.t_floor,
    };
    let out = dehaze_dcp(&hazy, &cfg)?;
    pnm::write_ppm(&a.out, &out.dehazed)?;
    if let Some(p) = &a.transmission_out {
        pnm::write_pgm8(p, &out.transmission)?;
    }
    let [r, g, b] = out.airlight.rgb();
    println!("airlight\t{r:.6}\t{g:.6}\t{b:.6}");
    Ok(())
}

fn resolve_config(a: &TrainArgs) -> CliResult<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| DehazeError::io(p, e))?;
            TrainConfig::from_toml(&text)?
        }
        None => a.preset.config(a.stage.unwrap_or(1)),
    };
    if let Some(s) = a.stage {
        cfg.stage = s;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn initial_models(cfg: &TrainConfig, init: Option<&Path>) -> CliResult<Models> {
    let arch = Architecture::from(cfg);
    let Some(path) = init else {
        if cfg.stage > 1 {
            return Err(CliError::Usage(format!("stage {} needs --init", cfg.stage)));
        }
        return Ok(Models::new(arch, cfg.seed)?);
    };
    let (models, _) = load_models(path)?;
    if models.architecture() != &arch {
        return Err(DehazeError::Checkpoint(format!(
            "{} holds a different architecture than the training config",
            path.display()
        ))
        .into());
    }
    Ok(models)
}

fn train(a: &TrainArgs) -> CliResult {
    let mut trainer = match &a.resume {
        Some(p) => Trainer::resume(&load_checkpoint(p)?)?,
        None => {
            let cfg = resolve_config(a)?;
            if a.print_config {
                print!("{}", cfg.to_toml());
                return Ok(());
            }
            let models = initial_models(&cfg, a.init.as_deref())?;
            Trainer::new(cfg, models)?
        }
    };
    let stage = trainer.config().stage;
    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(stdout, "{}", TrainLog::tsv_header(stage));
    for r in &trainer.log().records {
        let _ = writeln!(stdout, "{}", TrainLog::tsv_row(stage, r));
    }
    let save_state = |t: &Trainer| -> CliResult {
        if let Some(p) = &a.state {
            save_checkpoint(p, &t.checkpoint())?;
        }
        Ok(())
    };
    let mut ran = 0u64;
    while !trainer.is_finished() {
        if a.max_updates.is_some_and(|m| ran >= m) {
            save_state(&trainer)?;
            eprintln!(
                "stopped after {} updates; resume with --resume {}",
                trainer.updates_done(),
                a.state.as_ref().expect("required by clap").display()
            );
            return Ok(());
        }
        if let Some(r) = trainer.step()? {
            let _ = writeln!(stdout, "{}", TrainLog::tsv_row(stage, &r));
            let _ = stdout.flush();
        }
        ran += 1;
        if a.checkpoint_every > 0 && trainer.updates_done() % a.checkpoint_every == 0 {
            save_state(&trainer)?;
        }
    }
    save_state(&trainer)?;
    let cfg = trainer.config().clone();
    let outcome = trainer.finish();
    save_checkpoint(&a.out, &outcome.models.to_checkpoint(&cfg))?;
    Ok(())
}

fn list_ppm(dir: &Path) -> CliResult<Vec<String>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| DehazeError::io(dir, e))? {
        let entry = entry.map_err(|e| DehazeError::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(".ppm") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

/// Per-image rows and the mean row as tab-separated text.
pub fn eval_report(names: &[String], metrics: &[Metrics]) -> String {
    let mut out = String::from("image\tpsnr\tssim\tciede2000\n");
    let row = |out: &mut String, name: &str, m: &Metrics| {
        let _ = writeln!(out, "{name}\t{:.6}\t{:.6}\t{:.6}", m.psnr, m.ssim, m.ciede2000);
    };
    for (n, m) in names.iter().zip(metrics) {
        row(&mut out, n, m);
    }
    row(&mut out, "mean", &Metrics::mean(metrics));
    out
}

fn eval(a: &EvalArgs) -> CliResult {
    let pred = list_ppm(&a.pred)?;
    let gt = list_ppm(&a.gt)?;
    let mut unmatched: Vec<String> = pred
        .iter()
        .filter(|n| !gt.contains(n))
        .map(|n| a.pred.join(n).display().to_string())
        .collect();
    unmatched.extend(
        gt.iter()
            .filter(|n| !pred.contains(n))
            .map(|n| a.gt.join(n).display().to_string()),
    );
    if !unmatched.is_empty() {
        return Err(CliError::Unmatched(unmatched));
    }
    if pred.is_empty() {
        return Err(CliError::Usage(format!("no .ppm files in {}", a.pred.display())));
    }
    let metrics = pred
        .par_iter()
        .map(|n| -> CliResult<Metrics> {
            let p = pnm::read_ppm(a.pred.join(n))?;
            let g = pnm::read_ppm(a.gt.join(n))?;
            Ok(Metrics::measure(&p, &g)?)
        })
        .collect::<CliResult<Vec<_>>>()?;
    let report = eval_report(&pred, &metrics);
    if let Some(p) = &a.report {
        write_text(p, &report)?;
    }
    let mut text = format!("{:<24} {:>9} {:>8} {:>10}\n", "image", "PSNR", "SSIM", "CIEDE2000");
    let mean = Metrics::mean(&metrics);
    for (n, m) in pred.iter().zip(&metrics).chain(std::iter::once((&"mean".to_owned(), &mean))) {
        let _ = writeln!(text, "{n:<24} {:>9.3} {:>8.4} {:>10.3}", m.psnr, m.ssim, m.ciede2000);
    }
    print!("{text}");
    Ok(())
}

fn ablate(a: &AblateArgs) -> CliResult {
    let mut plan = AblationPlan::desk(a.seed);
    if a.preset == Preset::Full {
        plan.stage1 = TrainConfig { seed: a.seed, ..TrainConfig::for_stage(1) };
        plan.stage2 = TrainConfig { seed: a.seed, ..TrainConfig::for_stage(2) };
    }
    plan.eval_scenes = a.eval_scenes;
    let pretrained = match &a.init {
        Some(p) => Some(load_models(p)?.0),
        None => None,
    };
    let report = run_ablation(a.axis.into(), &plan, pretrained.as_ref())?;
    let tsv = report.to_tsv();
    if let Some(p) = &a.report {
        write_text(p, &tsv)?;
    }
    print!("{tsv}");
    Ok(())
}

fn gradcheck_rows(a: &GradcheckArgs) -> CliResult<Vec<CheckRow>> {
    let mut rows = conformance::primitive_suite(a.seed, a.coords)?;
    rows.extend(conformance::estimator_suite(
        a.seed + 1,
        Default::default(),
        Default::default(),
        a.size,
        a.coords,
    )?);
    let ipudn = IpudnConfig {
        features: a.width,
        updater_width: a.width,
        ..IpudnConfig::default()
    };
    rows.extend(conformance::ipudn_suite(a.seed + 2, ipudn, a.size, a.steps, a.coords)?);
    Ok(rows)
}

fn gradcheck(a: &GradcheckArgs) -> CliResult {
    if a.coords == 0 || a.width == 0 || a.steps == 0 || a.size < 4 {
        return Err(CliError::Usage("--coords, --width and --steps must be positive, --size at least 4".into()));
    }
    let rows = gradcheck_rows(a)?;
    println!("check\tcoords\trefined\tmax_rel_error\tpassed");
    for r in &rows {
        println!("{}\t{}\t{}\t{:.3e}\t{}", r.name, r.report.checked, r.report.refined, r.report.max_rel_error, r.passed());
    }
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!(
            "gradients disagree beyond {:e}: {}",
            conformance::TOLERANCE,
            failed.join(", ")
        )))
    }
}
