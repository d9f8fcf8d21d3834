//! Command-line interface.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{error, info};

use crate::error::{Error, Result};
use crate::field::DispField;
use crate::landmarks::{load_landmarks, save_landmarks};
use crate::loss::total_loss;
use crate::metrics::{evaluate_pair, write_summary_csv};
use crate::nifti::{load_field, load_labels, load_volume, save_field, save_labels, save_volume};
use crate::optimizer::{register, RegConfig};
use crate::phantom::{synthetic_pair, PhantomKind};
use crate::sampler::{warp, warp_labels, InterpMode};
use crate::visualize::{render_slice, save_png, RenderOptions};

#[derive(Debug, Parser)]
#[command(name = "deformreg", version, about = "Dense 3D deformable registration and evaluation")]
pub struct Cli {
    /// Maximum number of worker threads (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Optimize a displacement field aligning MOVING to FIXED.
    Register(RegisterArgs),
    /// Resample an image or label map through a field.
    Warp(WarpArgs),
    /// Compute Dice, HD95, TRE and NDV for a registered pair.
    Evaluate(EvaluateArgs),
    /// Render a field slice as a PNG.
    Visualize(VisualizeArgs),
    /// Write a synthetic pair with a known deformation.
    Phantom(PhantomArgs),
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    #[arg(long)]
    pub moving: PathBuf,
    #[arg(long)]
    pub fixed: PathBuf,
    #[arg(long)]
    pub out_field: PathBuf,
    /// TOML file with registration settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Per-iteration loss CSV (level,iter,ncc,reg,total).
    #[arg(long)]
    pub trace_out: Option<PathBuf>,
    /// Skip the final bilateral filtering.
    #[arg(long)]
    pub no_bf: bool,
    #[arg(long)]
    pub bf_sigma_spatial: Option<f64>,
    /// Absolute range sigma in intensity units.
    #[arg(long)]
    pub bf_sigma_range: Option<f64>,
}

#[derive(Debug, Args)]
pub struct WarpArgs {
    #[arg(long)]
    pub moving: PathBuf,
    #[arg(long)]
    pub field: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Treat the input as a label map (nearest-neighbour, integer output).
    #[arg(long)]
    pub labels: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub fixed_labels: PathBuf,
    #[arg(long)]
    pub moving_labels: PathBuf,
    #[arg(long)]
    pub field: PathBuf,
    #[arg(long, requires = "landmarks_moving")]
    pub landmarks_fixed: Option<PathBuf>,
    #[arg(long, requires = "landmarks_fixed")]
    pub landmarks_moving: Option<PathBuf>,
    #[arg(long, default_value = "pair")]
    pub pair_id: String,
    #[arg(long, default_value = "metrics.json")]
    pub out_json: PathBuf,
    #[arg(long, default_value = "metrics.csv")]
    pub out_csv: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Axis {
    X,
    Y,
    Z,
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    #[arg(long)]
    pub field: PathBuf,
    #[arg(long)]
    pub background: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "z")]
    pub axis: Axis,
    /// Slice index along AXIS (default: middle).
    #[arg(long)]
    pub slice: Option<usize>,
    #[arg(long)]
    pub out_png: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub scale: usize,
    #[arg(long, default_value_t = 4)]
    pub grid_step: usize,
    #[arg(long, default_value_t = 8)]
    pub arrow_step: usize,
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long, default_value = "spheres")]
    pub kind: PhantomKind,
    /// Grid size as NX,NY,NZ.
    #[arg(long, value_delimiter = ',', default_values_t = [64, 64, 64])]
    pub dims: Vec<usize>,
    /// Largest displacement of the ground-truth field, voxels.
    #[arg(long, default_value_t = 4.0)]
    pub max_disp: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Output files of one invocation; removed again unless committed.
struct Outputs {
    paths: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    fn new() -> Self {
        Self {
            paths: Vec::new(),
            committed: false,
        }
    }

    fn add(&mut self, p: &Path) -> PathBuf {
        self.paths.push(p.to_path_buf());
        p.to_path_buf()
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if !self.committed {
            for p in &self.paths {
                let _ = std::fs::remove_file(p);
            }
        }
    }
}

/// Input errors (missing or unreadable files) exit with 2, everything else 1.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } | Error::Nifti { .. } | Error::Parse { .. } => 2,
        _ => 1,
    }
}

fn require_input(p: &Path) -> Result<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(Error::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")))
    }
}

fn cmd_register(a: &RegisterArgs) -> Result<()> {
    for p in [&a.moving, &a.fixed].into_iter().chain(a.config.as_ref()) {
        require_input(p)?;
    }
    let mut cfg = match &a.config {
        Some(p) => RegConfig::load(p)?,
        None => RegConfig::default(),
    };
    if a.no_bf {
        cfg.bf_enabled = false;
        cfg.bf_per_level = false;
    }
    if let Some(s) = a.bf_sigma_spatial {
        cfg.bf_sigma_spatial = s;
    }
    if a.bf_sigma_range.is_some() {
        cfg.bf_sigma_range = a.bf_sigma_range;
    }
    cfg.validate()?;
    let moving = load_volume(&a.moving)?;
    let fixed = load_volume(&a.fixed)?;

    let mut out = Outputs::new();
    let (u, trace) = register(&moving, &fixed, &cfg)?;
    let before = total_loss(&moving, &fixed, &DispField::identity(*fixed.grid()), &cfg.loss_params())?;
    let after = total_loss(&moving, &fixed, &u, &cfg.loss_params())?;
    info!("total loss {:.4} -> {:.4}", before.total, after.total);
    save_field(&u, out.add(&a.out_field))?;
    if let Some(t) = &a.trace_out {
        trace.write_csv(out.add(t))?;
    }
    out.committed = true;
    println!(
        "loss {:.4} -> {:.4}  (ncc {:.4}, reg {:.4})",
        before.total, after.total, after.ncc, after.reg
    );
    Ok(())
}

fn cmd_warp(a: &WarpArgs) -> Result<()> {
    require_input(&a.moving)?;
    require_input(&a.field)?;
    let u = load_field(&a.field)?;
    let mut out = Outputs::new();
    if a.labels {
        let l = load_labels(&a.moving)?;
        save_labels(&warp_labels(&l, &u)?, out.add(&a.out))?;
    } else {
        let v = load_volume(&a.moving)?;
        save_volume(&warp(&v, &u, InterpMode::Linear)?, out.add(&a.out))?;
    }
    out.committed = true;
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let lm_paths = a.landmarks_fixed.iter().chain(a.landmarks_moving.iter());
    for p in [&a.fixed_labels, &a.moving_labels, &a.field].into_iter().chain(lm_paths) {
        require_input(p)?;
    }
    let lf = load_labels(&a.fixed_labels)?;
    let lmv = load_labels(&a.moving_labels)?;
    let u = load_field(&a.field)?;
    let landmarks = match (&a.landmarks_fixed, &a.landmarks_moving) {
        (Some(f), Some(m)) => Some((load_landmarks(f)?, load_landmarks(m)?)),
        _ => None,
    };
    let report = evaluate_pair(
        &a.pair_id,
        Some((&lf, &lmv)),
        landmarks.as_ref().map(|(f, m)| (f, m)),
        &u,
    )?;
    let mut out = Outputs::new();
    report.write_json(out.add(&a.out_json))?;
    write_summary_csv(std::slice::from_ref(&report), out.add(&a.out_csv))?;
    out.committed = true;
    print!("{}", report.to_json());
    Ok(())
}

fn cmd_visualize(a: &VisualizeArgs) -> Result<()> {
    require_input(&a.field)?;
    if let Some(b) = &a.background {
        require_input(b)?;
    }
    let u = load_field(&a.field)?;
    let bg = a.background.as_ref().map(load_volume).transpose()?;
    let axis = a.axis as usize;
    let opt = RenderOptions {
        axis,
        slice: a.slice.unwrap_or(u.dims()[axis] / 2),
        scale: a.scale,
        grid_step: a.grid_step,
        arrow_step: a.arrow_step,
    };
    let img = render_slice(&u, bg.as_ref(), &opt)?;
    let mut out = Outputs::new();
    save_png(&img, out.add(&a.out_png))?;
    out.committed = true;
    Ok(())
}

fn cmd_phantom(a: &PhantomArgs) -> Result<()> {
    if a.dims.len() != 3 {
        return Err(Error::InvalidParameter(format!("--dims needs three values, got {:?}", a.dims)));
    }
    let dims = [a.dims[0], a.dims[1], a.dims[2]];
    let pair = synthetic_pair(a.kind, dims, a.max_disp, a.seed)?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let p = |name: &str| a.out_dir.join(name);
    let mut out = Outputs::new();
    save_volume(&pair.moving, out.add(&p("moving.nii.gz")))?;
    save_volume(&pair.fixed, out.add(&p("fixed.nii.gz")))?;
    save_labels(&pair.moving_labels, out.add(&p("moving_labels.nii.gz")))?;
    save_labels(&pair.fixed_labels, out.add(&p("fixed_labels.nii.gz")))?;
    save_landmarks(&pair.fixed_landmarks, out.add(&p("fixed_landmarks.csv")))?;
    save_landmarks(&pair.moving_landmarks, out.add(&p("moving_landmarks.csv")))?;
    save_field(&pair.truth, out.add(&p("truth_field.nii.gz")))?;
    out.committed = true;
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Register(a) => cmd_register(a),
        Command::Warp(a) => cmd_warp(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Visualize(a) => cmd_visualize(a),
        Command::Phantom(a) => cmd_phantom(a),
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();

    let result = match cli.jobs {
        Some(0) => Err(Error::InvalidParameter("--jobs must be >= 1".into())),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(&cli)),
            Err(e) => Err(Error::InvalidParameter(format!("cannot start {n} worker threads: {e}"))),
        },
        None => dispatch(&cli),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
