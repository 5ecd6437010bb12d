//! `ppcreg`: phantom generation, DRR rendering, single registrations, and
//! batch evaluation from one binary.
//!
//! Exit codes: 0 on success (including soft-failed registrations in batch
//! mode), 1 for internal/runtime errors, 2 for usage errors.

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::Vector3;
use ppc_core::{
    extract_surface_points, make_phantom, register_observed, render_drr, render_overlay,
    select_apparent_contours, CameraModel, ContourParams, LoopConfig, NoiseConfig,
    OracleEstimator, PatchMatchConfig, PatchMatchEstimator, PhantomKind, RegistrationStatus,
    RigidTransform, SolverConfig, StopCriteria, SurfacePoint, Volume, WeightStrategy,
};
use ppc_tools::bench::{run_benchmark, BenchmarkOptions, EstimatorSpec, ViewSpec};
use ppc_tools::config::{EstimatorKind, ExperimentConfig};
use ppc_tools::external::FileCorrespondenceEstimator;
use ppc_tools::formats;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "ppcreg",
    about = "Iterative 2D/3D rigid registration with point-to-plane correspondences",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rasterize a synthetic phantom volume.
    MakePhantom(MakePhantomArgs),
    /// Render a DRR of a volume at a pose.
    Render(RenderArgs),
    /// Register a volume to a fixed image from an initial pose.
    Register(Box<RegisterArgs>),
    /// Run a configured batch evaluation.
    Evaluate(EvaluateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Sphere,
    Box,
    Tube,
    TwoSpheres,
}

#[derive(Args)]
struct MakePhantomArgs {
    #[arg(long, value_enum)]
    kind: KindArg,
    /// Voxels per axis: one value or x,y,z.
    #[arg(long, default_value = "64")]
    dims: String,
    /// Voxel spacing in mm: one value or x,y,z.
    #[arg(long, default_value = "1.0")]
    spacing: String,
    /// Interior attenuation (1/mm).
    #[arg(long, default_value_t = 1.0)]
    density: f64,
    /// Radius in mm (sphere, tube, and the first of two spheres).
    #[arg(long, default_value_t = 20.0)]
    radius: f64,
    /// Box half-extents in mm as x,y,z.
    #[arg(long, default_value = "18,14,10", allow_hyphen_values = true)]
    half_extents: String,
    /// Tube half-length in mm.
    #[arg(long, default_value_t = 20.0)]
    half_length: f64,
    /// Second sphere radius in mm.
    #[arg(long, default_value_t = 10.0)]
    radius_b: f64,
    /// First sphere center in mm as x,y,z.
    #[arg(long, default_value = "-6,0,0", allow_hyphen_values = true)]
    center_a: String,
    /// Second sphere center in mm as x,y,z.
    #[arg(long, default_value = "12,4,2", allow_hyphen_values = true)]
    center_b: String,
    /// Density of the second sphere relative to --density.
    #[arg(long, default_value_t = 2.0)]
    density_ratio_b: f64,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Clone)]
struct CameraArgs {
    /// Detector resolution as WxH.
    #[arg(long, default_value = "616x480")]
    detector: String,
    /// Detector pixel pitch (mm/px).
    #[arg(long, default_value_t = 0.616)]
    pixel_spacing: f64,
    /// Source-to-detector distance (mm).
    #[arg(long, default_value_t = 1000.0)]
    sid: f64,
}

impl CameraArgs {
    fn build(&self) -> Result<CameraModel> {
        let (w, h) = self
            .detector
            .split_once('x')
            .ok_or_else(|| anyhow!("--detector expects WxH"))?;
        let res = [w.parse().context("detector width")?, h.parse().context("detector height")?];
        CameraModel::from_detector(res, self.pixel_spacing, self.sid).map_err(|e| anyhow!("{e}"))
    }
}

#[derive(Args, Clone)]
struct SurfaceArgs {
    /// Gradient-magnitude threshold for surface voxels (1/mm²).
    #[arg(long, default_value_t = 0.25)]
    grad_threshold: f64,
    /// Surface-point budget.
    #[arg(long, default_value_t = 3000)]
    surface_max_points: usize,
    #[arg(long, default_value_t = 17)]
    surface_seed: u64,
    /// Apparent-contour perpendicularity threshold.
    #[arg(long, default_value_t = 0.15)]
    tau: f64,
    /// Contour-point budget per iteration.
    #[arg(long, default_value_t = 800)]
    contour_max_points: usize,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    volume: PathBuf,
    /// Pose as rx,ry,rz,tx,ty,tz (degrees and mm); alternative to --pose-file.
    #[arg(long, conflicts_with = "pose_file", allow_hyphen_values = true)]
    pose: Option<String>,
    /// Pose file (3x4 row-major text).
    #[arg(long)]
    pose_file: Option<PathBuf>,
    #[command(flatten)]
    camera: CameraArgs,
    /// Ray-marching step in mm, or `auto` for half the smallest voxel.
    #[arg(long, default_value = "auto")]
    step: String,
    /// Also write an apparent-contour overlay image.
    #[arg(long)]
    overlay: bool,
    #[command(flatten)]
    surface: SurfaceArgs,
    /// Output prefix: writes <prefix>.raw and <prefix>.pgm.
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorArg {
    Oracle,
    Patch,
    External,
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    volume: PathBuf,
    /// Fixed (fluoroscopy) image in raw f32 format.
    #[arg(long)]
    fixed: PathBuf,
    /// Initial pose file; alternative to --init-euler.
    #[arg(long, required_unless_present = "init_euler", conflicts_with = "init_euler")]
    init: Option<PathBuf>,
    /// Initial pose as rx,ry,rz,tx,ty,tz (degrees and mm).
    #[arg(long, allow_hyphen_values = true)]
    init_euler: Option<String>,
    /// Ground-truth pose file (enables the oracle estimator and metrics).
    #[arg(long, conflicts_with = "gt_euler")]
    gt: Option<PathBuf>,
    /// Ground truth as rx,ry,rz,tx,ty,tz (degrees and mm).
    #[arg(long, allow_hyphen_values = true)]
    gt_euler: Option<String>,
    #[arg(long, value_enum, default_value_t = EstimatorArg::Patch)]
    estimator: EstimatorArg,
    /// Directory of corr_iter_***.csv files for --estimator external.
    #[arg(long)]
    external_dir: Option<PathBuf>,
    /// Dump each iteration's correspondences into this directory.
    #[arg(long)]
    dump_correspondences: Option<PathBuf>,
    /// Write per-iteration contour overlays into the output directory.
    #[arg(long)]
    overlay: bool,
    #[command(flatten)]
    camera: CameraArgs,
    #[command(flatten)]
    surface: SurfaceArgs,
    #[arg(long, default_value_t = 10)]
    max_iterations: usize,
    #[arg(long, default_value_t = 1e-4)]
    rot_tol_rad: f64,
    #[arg(long, default_value_t = 1e-3)]
    trans_tol_mm: f64,
    #[arg(long, default_value = "auto")]
    step: String,
    #[arg(long, default_value = "uniform")]
    weighting: String,
    #[arg(long, default_value_t = 3.0)]
    delta_px: f64,
    #[arg(long, default_value_t = 1e-6)]
    lambda: f64,
    #[arg(long, default_value_t = 6)]
    min_rows: usize,
    #[arg(long, default_value_t = 0.0)]
    noise_sigma_px: f64,
    #[arg(long, default_value_t = 0.0)]
    outlier_frac: f64,
    #[arg(long, default_value_t = 0.0)]
    outlier_mag_px: f64,
    #[arg(long, default_value_t = 0)]
    noise_seed: u64,
    #[arg(long, default_value_t = 5)]
    patch_radius: usize,
    #[arg(long, default_value_t = 20)]
    search_radius: usize,
    #[arg(long, default_value_t = 0.3)]
    min_ncc: f64,
    /// Exit nonzero when the registration fails (batch runs default to 0).
    #[arg(long)]
    strict: bool,
    /// Output directory (pose_final.txt, trace.csv, overlays).
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Experiment configuration file (key = value text).
    #[arg(long)]
    config: PathBuf,
    /// Override the configured worker count.
    #[arg(long)]
    jobs: Option<usize>,
    /// Override the configured output directory.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

fn parse_csv_numbers(text: &str, expected: usize, what: &str) -> Result<Vec<f64>> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| anyhow!("bad number `{t}` in {what}")))
        .collect::<Result<_>>()?;
    if parts.len() != expected {
        bail!("{what} expects {expected} comma-separated numbers, found {}", parts.len());
    }
    Ok(parts)
}

fn parse_vec3_arg(text: &str, what: &str) -> Result<Vector3<f64>> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| anyhow!("bad number `{t}` in {what}")))
        .collect::<Result<_>>()?;
    match parts.len() {
        1 => Ok(Vector3::from_element(parts[0])),
        3 => Ok(Vector3::new(parts[0], parts[1], parts[2])),
        n => bail!("{what} expects 1 or 3 numbers, found {n}"),
    }
}

fn parse_euler_pose(text: &str, what: &str) -> Result<RigidTransform> {
    let v = parse_csv_numbers(text, 6, what)?;
    Ok(RigidTransform::from_euler(
        Vector3::new(v[0].to_radians(), v[1].to_radians(), v[2].to_radians()),
        Vector3::new(v[3], v[4], v[5]),
    ))
}

fn parse_step(text: &str) -> Result<Option<f64>> {
    if text == "auto" {
        Ok(None)
    } else {
        let step: f64 = text.parse().map_err(|_| anyhow!("--step expects a number or `auto`"))?;
        Ok(Some(step))
    }
}

fn parse_weighting(name: &str, delta_px: f64) -> Result<WeightStrategy> {
    Ok(match name {
        "uniform" => WeightStrategy::Uniform,
        "score" => WeightStrategy::Score,
        "residual-robust" => WeightStrategy::ResidualRobust { delta_px },
        other => bail!("unknown weighting `{other}`"),
    })
}

fn cmd_make_phantom(args: &MakePhantomArgs) -> Result<u8> {
    let dims_v = parse_vec3_arg(&args.dims, "--dims")?;
    let dims = [dims_v.x as usize, dims_v.y as usize, dims_v.z as usize];
    let spacing = parse_vec3_arg(&args.spacing, "--spacing")?;
    let kind = match args.kind {
        KindArg::Sphere => PhantomKind::Sphere { radius_mm: args.radius },
        KindArg::Box => {
            PhantomKind::Box { half_extents_mm: parse_vec3_arg(&args.half_extents, "--half-extents")? }
        }
        KindArg::Tube => {
            PhantomKind::Tube { radius_mm: args.radius, half_length_mm: args.half_length }
        }
        KindArg::TwoSpheres => PhantomKind::TwoSpheres {
            radius_a_mm: args.radius,
            center_a_mm: parse_vec3_arg(&args.center_a, "--center-a")?,
            radius_b_mm: args.radius_b,
            center_b_mm: parse_vec3_arg(&args.center_b, "--center-b")?,
            density_ratio_b: args.density_ratio_b,
        },
    };
    let volume = make_phantom(&kind, dims, spacing, args.density).map_err(|e| anyhow!("{e}"))?;
    formats::write_volume(&args.output, &volume)?;
    let lo = volume.data().iter().copied().fold(f32::INFINITY, f32::min);
    let hi = volume.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    println!(
        "wrote {} ({}x{}x{} voxels, values {lo}..{hi})",
        args.output.display(),
        dims[0],
        dims[1],
        dims[2]
    );
    Ok(0)
}

fn load_pose(file: &Option<PathBuf>, euler: &Option<String>, what: &str) -> Result<RigidTransform> {
    match (file, euler) {
        (Some(path), None) => formats::read_pose(path),
        (None, Some(text)) => parse_euler_pose(text, what),
        _ => bail!("{what}: provide exactly one of the file or euler forms"),
    }
}

fn cmd_render(args: &RenderArgs) -> Result<u8> {
    let volume = formats::read_volume(&args.volume)?;
    let cam = args.camera.build()?;
    let pose = match (&args.pose, &args.pose_file) {
        (Some(text), None) => parse_euler_pose(text, "--pose")?,
        (None, Some(path)) => formats::read_pose(path)?,
        _ => bail!("provide exactly one of --pose or --pose-file"),
    };
    let step = parse_step(&args.step)?.unwrap_or_else(|| ppc_core::default_step_mm(&volume));
    let image = render_drr(&volume, &pose, &cam, step).map_err(|e| anyhow!("{e}"))?;

    let raw = args.output.with_extension("raw");
    let pgm = args.output.with_extension("pgm");
    formats::write_image_raw(&raw, &image)?;
    formats::write_image_pgm16(&pgm, &image)?;
    println!("wrote {} and {}", raw.display(), pgm.display());

    if args.overlay {
        let surface = extract_surface_points(
            &volume,
            args.surface.grad_threshold,
            args.surface.surface_max_points,
            args.surface.surface_seed,
        )
        .map_err(|e| anyhow!("{e}"))?;
        let contours = select_apparent_contours(
            &surface,
            &pose,
            &cam,
            &ContourParams {
                tau: args.surface.tau,
                max_contour_points: args.surface.contour_max_points,
            },
        )
        .map_err(|e| anyhow!("{e}"))?;
        let overlay_path = args.output.with_extension("overlay.pgm");
        formats::write_image_pgm16(&overlay_path, &render_overlay(&image, &contours))?;
        println!("wrote {} ({} contour points)", overlay_path.display(), contours.len());
    }
    Ok(0)
}

#[allow(clippy::too_many_lines)]
fn cmd_register(args: &RegisterArgs) -> Result<u8> {
    let volume = formats::read_volume(&args.volume)?;
    let cam = args.camera.build()?;
    let i_flr = formats::read_image_raw(&args.fixed)?;
    if [i_flr.width(), i_flr.height()] != cam.detector_res() {
        bail!(
            "fixed image is {}x{} but the camera detector is {}x{}",
            i_flr.width(),
            i_flr.height(),
            cam.detector_res()[0],
            cam.detector_res()[1]
        );
    }
    let t_init = load_pose(&args.init, &args.init_euler, "--init")?;
    let t_gt = match (&args.gt, &args.gt_euler) {
        (None, None) => None,
        (file, euler) => Some(load_pose(file, euler, "--gt")?),
    };

    let estimator: Box<dyn ppc_core::CorrespondenceEstimator> = match args.estimator {
        EstimatorArg::Oracle => {
            let gt = t_gt
                .clone()
                .ok_or_else(|| anyhow!("--estimator oracle needs --gt or --gt-euler"))?;
            let noise = (args.noise_sigma_px > 0.0 || args.outlier_frac > 0.0).then_some(
                NoiseConfig {
                    sigma_px: args.noise_sigma_px,
                    outlier_frac: args.outlier_frac,
                    outlier_mag_px: args.outlier_mag_px,
                    seed: args.noise_seed,
                },
            );
            Box::new(OracleEstimator { t_gt: gt, noise })
        }
        EstimatorArg::Patch => Box::new(PatchMatchEstimator {
            cfg: PatchMatchConfig {
                patch_radius_px: args.patch_radius,
                search_radius_px: args.search_radius,
                min_ncc: args.min_ncc,
            },
        }),
        EstimatorArg::External => {
            let dir = args
                .external_dir
                .clone()
                .ok_or_else(|| anyhow!("--estimator external needs --external-dir"))?;
            Box::new(FileCorrespondenceEstimator::new(dir))
        }
    };

    let surface = extract_surface_points(
        &volume,
        args.surface.grad_threshold,
        args.surface.surface_max_points,
        args.surface.surface_seed,
    )
    .map_err(|e| anyhow!("{e}"))?;
    let cfg = LoopConfig {
        max_iterations: args.max_iterations,
        stop: StopCriteria { rot_tol_rad: args.rot_tol_rad, trans_tol_mm: args.trans_tol_mm },
        weighting: parse_weighting(&args.weighting, args.delta_px)?,
        contour: ContourParams {
            tau: args.surface.tau,
            max_contour_points: args.surface.contour_max_points,
        },
        solver: SolverConfig {
            tikhonov_lambda: args.lambda,
            min_rows: args.min_rows,
            omega_scale: None,
        },
        step_mm: parse_step(&args.step)?,
    };

    fs::create_dir_all(&args.output)
        .with_context(|| format!("creating {}", args.output.display()))?;
    if let Some(dir) = &args.dump_correspondences {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }

    let mut observer_error = None;
    let result = {
        let mut observer = |iteration: usize, step: &ppc_core::StepOutcome| {
            if observer_error.is_some() {
                return;
            }
            let write = || -> Result<()> {
                if let Some(dir) = &args.dump_correspondences {
                    formats::write_correspondences(
                        &FileCorrespondenceEstimator::iteration_file(dir, iteration),
                        &step.correspondences,
                    )?;
                }
                if args.overlay {
                    let base = step.i_drr.clone().map(Ok).unwrap_or_else(|| {
                        // Estimators that skip rendering still get overlays
                        // on a freshly rendered DRR.
                        render_drr(
                            &volume,
                            &step.t_next,
                            &cam,
                            cfg.step_mm.unwrap_or_else(|| ppc_core::default_step_mm(&volume)),
                        )
                        .map_err(|e| anyhow!("{e}"))
                    })?;
                    let path = args.output.join(format!("overlay_iter_{iteration:03}.pgm"));
                    formats::write_image_pgm16(&path, &render_overlay(&base, &step.contours))?;
                }
                Ok(())
            };
            if let Err(e) = write() {
                observer_error = Some(e);
            }
        };
        register_observed(
            &volume,
            &surface,
            Some(&i_flr),
            &t_init,
            &cam,
            &cfg,
            estimator.as_ref(),
            t_gt.as_ref(),
            &mut observer,
        )
    };
    if let Some(e) = observer_error {
        return Err(e);
    }

    formats::write_pose(&args.output.join("pose_final.txt"), &result.t_final)?;
    let mut trace = String::from(
        "iteration,omega_x,omega_y,omega_z,trans_x,trans_y,trans_z,num_correspondences,mean_flow_px,mrpd_mm\n",
    );
    for (i, rec) in result.trace.iter().enumerate() {
        trace.push_str(&format!(
            "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{},{:.17e},{}\n",
            i,
            rec.dv.omega.x,
            rec.dv.omega.y,
            rec.dv.omega.z,
            rec.dv.trans.x,
            rec.dv.trans.y,
            rec.dv.trans.z,
            rec.num_correspondences,
            rec.mean_flow_px,
            rec.mrpd_mm.map(|m| format!("{m:.17e}")).unwrap_or_default(),
        ));
    }
    fs::write(args.output.join("trace.csv"), trace)?;

    let (status, failed) = match &result.status {
        RegistrationStatus::Converged => ("converged".to_string(), false),
        RegistrationStatus::MaxIterations => ("max-iterations".to_string(), false),
        RegistrationStatus::Failed(reason) => (format!("failed: {reason}"), true),
    };
    let final_mrpd = result
        .trace
        .last()
        .and_then(|r| r.mrpd_mm)
        .map(|m| format!(", final mRPD {m:.4} mm"))
        .unwrap_or_default();
    println!(
        "status {status} after {} iterations{final_mrpd}; wrote {}",
        result.iterations_run,
        args.output.display()
    );
    Ok(if failed && args.strict { 1 } else { 0 })
}

fn build_scene(
    cfg: &ExperimentConfig,
) -> Result<(Volume, Vec<SurfacePoint>, CameraModel, RigidTransform)> {
    let volume = make_phantom(
        &cfg.phantom()?,
        cfg.phantom_dims,
        cfg.phantom_spacing,
        cfg.phantom_density,
    )
    .map_err(|e| anyhow!("{e}"))?;
    let surface =
        extract_surface_points(&volume, cfg.grad_threshold, cfg.surface_max_points, cfg.surface_seed)
            .map_err(|e| anyhow!("{e}"))?;
    let cam = CameraModel::from_detector(cfg.detector_res, cfg.pixel_spacing, cfg.source_to_detector)
        .map_err(|e| anyhow!("{e}"))?;
    Ok((volume, surface, cam, cfg.ground_truth()))
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<u8> {
    let text = fs::read_to_string(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))?;
    let cfg = ExperimentConfig::parse(&text)
        .with_context(|| format!("parsing {}", args.config.display()))?;
    let (volume, surface, cam, t_gt) = build_scene(&cfg)?;

    let estimator = match cfg.estimator {
        EstimatorKind::Oracle => EstimatorSpec::Oracle {
            noise: (cfg.noise.sigma_px > 0.0 || cfg.noise.outlier_frac > 0.0)
                .then_some(cfg.noise),
        },
        EstimatorKind::Patch => EstimatorSpec::Patch(cfg.patch),
        EstimatorKind::External => EstimatorSpec::External {
            dir: cfg
                .external_dir
                .clone()
                .ok_or_else(|| anyhow!("estimator.kind = external needs estimator.external_dir"))?,
        },
    };
    let views: Vec<ViewSpec> = cfg
        .views
        .iter()
        .map(|v| ViewSpec { name: v.name.clone(), rotation_deg: v.rotation_deg })
        .collect();
    let opts = BenchmarkOptions {
        threshold_mm: cfg.threshold_mm,
        bin_mm: cfg.bin_mm,
        sr_min: cfg.sr_min,
        jobs: args.jobs.unwrap_or(cfg.jobs),
        stratified: cfg.stratified,
    };
    let report = run_benchmark(
        &volume,
        &surface,
        &cam,
        &t_gt,
        &views,
        &cfg.sampling,
        &cfg.loop_config(),
        &estimator,
        &opts,
    )?;

    let out_dir = args.output.clone().unwrap_or_else(|| cfg.output_dir.clone());
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let records_path = out_dir.join("records.csv");
    fs::write(&records_path, report.to_file_string())?;
    println!("{}", report.aggregates.summary_row());
    println!("wrote {}", records_path.display());
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run = || -> Result<u8> {
        match &cli.command {
            Command::MakePhantom(args) => cmd_make_phantom(args),
            Command::Render(args) => cmd_render(args),
            Command::Register(args) => cmd_register(args),
            Command::Evaluate(args) => cmd_evaluate(args),
        }
    };
    match run() {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
