//! Command-line entry point: dataset generation, training, rendering,
//! evaluation, gradient checks and the conditioning ablation.
//!
//! Exit codes: 0 on success, 1 on a runtime failure (or an empty evaluation
//! table), 2 on a usage error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::datagen::{generate, Dataset, SceneSpec, Split};
use crate::geometry::Camera;
use crate::gradcheck;
use crate::image_io::{write_mask_png, write_png};
use crate::pipeline::ConditionFlags;
use crate::train::checkpoint::Checkpoint;
use crate::train::config::TrainConfig;
use crate::train::eval::evaluate;
use crate::train::{train, Conditioner};
use crate::Real;

#[derive(Debug, Parser)]
#[command(name = "splat-avatar", version, about = "Motion-history-conditioned Gaussian avatars on the CPU")]
pub struct Cli {
    /// Worker threads for data-parallel stages (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    /// Seed overriding the one in the scene description or config file.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-view dataset.
    Gen(GenArgs),
    /// Train a model and write metrics and checkpoints.
    Train(TrainArgs),
    /// Render one frame of a checkpoint from a dataset or custom camera.
    Render(RenderArgs),
    /// Per-view PSNR/SSIM of a checkpoint on a camera split.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suites.
    Gradcheck,
    /// Train and evaluate the four cumulative conditioning configurations.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    /// Four-joint body, 60 frames, for recovery experiments.
    Recovery,
    /// Body with pendulum appendages, for the conditioning ablation.
    Pendulum,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false, id = "source")]
pub struct SpecSource {
    /// Scene description (JSON).
    #[arg(long, value_name = "FILE")]
    pub spec: Option<PathBuf>,
    /// Built-in scene description.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub source: SpecSource,
    /// Output dataset directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training configuration (JSON); defaults apply when omitted.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Dataset directory; overrides `data` in the config.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Output directory for metrics.csv and checkpoints.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Override the number of iterations.
    #[arg(long, value_name = "N")]
    pub iterations: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Checkpoint directory or its manifest.json.
    #[arg(long, value_name = "PATH")]
    pub ckpt: PathBuf,
    /// Dataset providing the template, poses and cameras.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Frame index; its pose and motion history drive the render.
    #[arg(long, value_name = "T")]
    pub frame: usize,
    /// Dataset camera index, or a camera JSON file for a novel view.
    #[arg(long, value_name = "C")]
    pub camera: String,
    /// Output PNG (sRGB).
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Also write the accumulated alpha as a grey PNG.
    #[arg(long, value_name = "FILE")]
    pub alpha: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint directory or its manifest.json.
    #[arg(long, value_name = "PATH")]
    pub ckpt: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: Split,
    /// Report path (JSON); the per-view table is also written as CSV beside it.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Output directory: one checkpoint per configuration and seed, plus
    /// ablation.json and ablation.csv.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Base training configuration; its condition flags are overridden.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Number of seeds, counting up from the base seed.
    #[arg(long, default_value_t = 3, value_name = "N")]
    pub seeds: u64,
    /// Override the number of iterations.
    #[arg(long, value_name = "N")]
    pub iterations: Option<usize>,
}

/// The cumulative rows of the conditioning ablation.
pub const ABLATIONS: [(&str, ConditionFlags); 4] = [
    ("b_vanilla", ConditionFlags { use_delta_p: false, use_velocity: false, use_multiscale: false }),
    ("c_delta_p", ConditionFlags { use_delta_p: true, use_velocity: false, use_multiscale: false }),
    ("d_velocity", ConditionFlags { use_delta_p: true, use_velocity: true, use_multiscale: false }),
    ("e_multiscale", ConditionFlags { use_delta_p: true, use_velocity: true, use_multiscale: true }),
];

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub flags: ConditionFlags,
    pub seeds: Vec<u64>,
    pub psnr: Vec<Real>,
    pub ssim: Vec<Real>,
    pub mean_psnr: Real,
    pub mean_ssim: Real,
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("config,use_delta_p,use_velocity,use_multiscale,mean_psnr,mean_ssim\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{:.4},{:.5}",
            r.name, r.flags.use_delta_p, r.flags.use_velocity, r.flags.use_multiscale, r.mean_psnr, r.mean_ssim
        )
        .expect("string write");
    }
    s
}

/// Trains every configuration of [`ABLATIONS`] for each seed and evaluates
/// it on the held-out cameras.
pub fn run_ablation(
    base: &TrainConfig,
    data: &Dataset,
    seeds: &[u64],
    out: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (name, flags) in ABLATIONS {
        let mut row = AblationRow {
            name: name.into(),
            flags,
            seeds: seeds.to_vec(),
            psnr: Vec::new(),
            ssim: Vec::new(),
            mean_psnr: 0.0,
            mean_ssim: 0.0,
        };
        for &seed in seeds {
            let cfg = TrainConfig { seed, conditions: flags, ..base.clone() };
            let dir = out.map(|o| o.join(format!("{name}_seed{seed}")));
            let outcome = train(&cfg, data, dir.as_deref()).with_context(|| format!("training {name} seed {seed}"))?;
            let report = evaluate(&outcome.checkpoint.model, &cfg, data, Split::Test)?;
            if report.is_empty() {
                bail!("the dataset has no held-out views to evaluate");
            }
            log::info!("{name} seed {seed}: held-out PSNR {:.3} SSIM {:.4}", report.mean_psnr, report.mean_ssim);
            row.psnr.push(report.mean_psnr);
            row.ssim.push(report.mean_ssim);
        }
        let n = seeds.len().max(1) as Real;
        row.mean_psnr = row.psnr.iter().sum::<Real>() / n;
        row.mean_ssim = row.ssim.iter().sum::<Real>() / n;
        rows.push(row);
    }
    Ok(rows)
}

fn load_config(path: Option<&Path>, data: Option<PathBuf>, seed: Option<u64>, iterations: Option<usize>) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if data.is_some() {
        cfg.data = data;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(n) = iterations {
        cfg.iterations = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_camera(arg: &str, data: &Dataset) -> Result<Camera> {
    if let Ok(i) = arg.parse::<usize>() {
        return data
            .cameras
            .get(i)
            .cloned()
            .with_context(|| format!("camera {i} out of range: the dataset has {}", data.cameras.len()));
    }
    let text = std::fs::read_to_string(arg).with_context(|| format!("reading camera {arg}"))?;
    serde_json::from_str(&text).with_context(|| format!("parsing camera {arg}"))
}

/// What a successful command reports back: exit code 0, or 1 for an
/// evaluation that produced no rows.
enum Outcome {
    Done,
    EmptyTable,
}

fn execute(cli: Cli) -> Result<Outcome> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Gen(args) => {
            let mut spec = match (&args.source.spec, args.source.preset) {
                (Some(p), _) => {
                    let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                    serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
                }
                (None, Some(Preset::Pendulum)) => SceneSpec::pendulum(),
                (None, _) => SceneSpec::recovery(),
            };
            if let Some(s) = cli.seed {
                spec.seed = s;
            }
            let data = generate(&spec, &args.out)?;
            log::info!(
                "wrote {} frames x {} cameras to {}",
                data.manifest.frames,
                data.manifest.num_cameras,
                args.out.display()
            );
        }
        Command::Train(args) => {
            let cfg = load_config(args.config.as_deref(), args.data, cli.seed, args.iterations)?;
            let root = cfg.data.clone().context("no dataset: pass --data or set `data` in the config")?;
            let data = Dataset::load(&root)?;
            let outcome = train(&cfg, &data, Some(&args.out))?;
            if let Some(last) = outcome.metrics.last() {
                log::info!("finished {} iterations: loss {:.5}", cfg.iterations, last.loss);
            }
        }
        Command::Render(args) => {
            let ck = Checkpoint::load(&args.ckpt)?;
            let data = Dataset::load(&args.data)?;
            let cam = resolve_camera(&args.camera, &data)?;
            let cond = Conditioner::new(&ck.config, &data, &ck.model)?;
            let out = cond.render(&ck.config, &data, &ck.model, args.frame, &cam)?;
            let (w, h) = (cam.width as usize, cam.height as usize);
            write_png(&args.out, &out.image, w, h)?;
            if let Some(p) = &args.alpha {
                write_mask_png(p, &out.alpha, w, h)?;
            }
        }
        Command::Eval(args) => {
            let ck = Checkpoint::load(&args.ckpt)?;
            let data = Dataset::load(&args.data)?;
            let report = evaluate(&ck.model, &ck.config, &data, args.split)?;
            report.write(&args.out)?;
            if report.is_empty() {
                log::error!("no rows: the split has no cameras or no frame has a complete history");
                return Ok(Outcome::EmptyTable);
            }
            println!("{} views: PSNR {:.3} SSIM {:.4}", report.rows.len(), report.mean_psnr, report.mean_ssim);
        }
        Command::Gradcheck => {
            let report = gradcheck::run_all(cli.seed.unwrap_or(0))?;
            println!("{report}");
            if !report.passed() {
                bail!("gradient check failed");
            }
        }
        Command::Ablate(args) => {
            let base = load_config(args.config.as_deref(), Some(args.data.clone()), cli.seed, args.iterations)?;
            let data = Dataset::load(&args.data)?;
            let seeds: Vec<u64> = (0..args.seeds).map(|i| base.seed + i).collect();
            let rows = run_ablation(&base, &data, &seeds, Some(&args.out))?;
            let table = ablation_table(&rows);
            let json = serde_json::to_string_pretty(&rows)?;
            std::fs::write(args.out.join("ablation.json"), json)?;
            std::fs::write(args.out.join("ablation.csv"), &table)?;
            print!("{table}");
        }
    }
    Ok(Outcome::Done)
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(Outcome::Done) => 0,
        Ok(Outcome::EmptyTable) => 1,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
