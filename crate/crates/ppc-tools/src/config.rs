//! Experiment configuration: flat `key = value` text with dotted section
//! prefixes, `#` comments, defaults for everything, and unknown keys
//! rejected with their line number.

use anyhow::{anyhow, bail, Result};
use nalgebra::Vector3;
use ppc_core::{
    ContourParams, LoopConfig, NoiseConfig, PatchMatchConfig, PhantomKind, SamplingRanges,
    SolverConfig, StopCriteria, WeightStrategy,
};
use std::collections::BTreeMap;
use std::path::PathBuf;

/// Which correspondence source an experiment runs.
#[derive(Debug, Clone, PartialEq)]
pub enum EstimatorKind {
    Oracle,
    Patch,
    External,
}

/// A named view: a rotation (degrees, per axis) applied about the object's
/// center on top of the ground-truth pose.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewConfig {
    pub name: String,
    pub rotation_deg: Vector3<f64>,
}

/// Fully-resolved experiment description. Defaults mirror the synthetic
/// sphere study; see the README for the key list.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub phantom_kind: String,
    pub phantom_dims: [usize; 3],
    pub phantom_spacing: Vector3<f64>,
    pub phantom_density: f64,
    pub phantom_radius: f64,
    pub phantom_half_extents: Vector3<f64>,
    pub phantom_half_length: f64,
    pub phantom_radius_b: f64,
    pub phantom_center_a: Vector3<f64>,
    pub phantom_center_b: Vector3<f64>,
    pub phantom_density_ratio_b: f64,

    pub detector_res: [usize; 2],
    pub pixel_spacing: f64,
    pub source_to_detector: f64,

    pub gt_rotation_deg: Vector3<f64>,
    pub gt_translation: Vector3<f64>,

    pub grad_threshold: f64,
    pub surface_max_points: usize,
    pub surface_seed: u64,

    pub contour: ContourParams,

    pub estimator: EstimatorKind,
    pub noise: NoiseConfig,
    pub patch: PatchMatchConfig,
    pub external_dir: Option<PathBuf>,

    pub weighting: WeightStrategy,

    pub loop_max_iterations: usize,
    pub stop: StopCriteria,
    pub step_mm: Option<f64>,
    pub solver: SolverConfig,

    pub sampling: SamplingRanges,
    pub stratified: bool,

    pub views: Vec<ViewConfig>,

    pub threshold_mm: f64,
    pub bin_mm: f64,
    pub sr_min: f64,
    pub jobs: usize,

    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            phantom_kind: "sphere".into(),
            phantom_dims: [64, 64, 64],
            phantom_spacing: Vector3::new(1.0, 1.0, 1.0),
            phantom_density: 1.0,
            phantom_radius: 20.0,
            phantom_half_extents: Vector3::new(18.0, 14.0, 10.0),
            phantom_half_length: 20.0,
            phantom_radius_b: 10.0,
            phantom_center_a: Vector3::new(-6.0, 0.0, 0.0),
            phantom_center_b: Vector3::new(12.0, 4.0, 2.0),
            phantom_density_ratio_b: 2.0,
            detector_res: [616, 480],
            pixel_spacing: 0.616,
            source_to_detector: 1000.0,
            gt_rotation_deg: Vector3::zeros(),
            gt_translation: Vector3::new(0.0, 0.0, 600.0),
            grad_threshold: 0.25,
            surface_max_points: 3000,
            surface_seed: 17,
            contour: ContourParams::default(),
            estimator: EstimatorKind::Oracle,
            noise: NoiseConfig { sigma_px: 0.0, outlier_frac: 0.0, outlier_mag_px: 0.0, seed: 0 },
            patch: PatchMatchConfig::default(),
            external_dir: None,
            weighting: WeightStrategy::Uniform,
            loop_max_iterations: 10,
            stop: StopCriteria::default(),
            step_mm: None,
            solver: SolverConfig::default(),
            sampling: SamplingRanges {
                trans_range_mm: 30.0,
                rot_range_deg: 20.0,
                mtre_max_mm: 30.0,
                n_samples: 200,
                seed: 1234,
            },
            stratified: true,
            views: vec![ViewConfig { name: "ap".into(), rotation_deg: Vector3::zeros() }],
            threshold_mm: 2.0,
            bin_mm: 5.0,
            sr_min: 0.95,
            jobs: 0,
            output_dir: PathBuf::from("out"),
        }
    }
}

fn parse_f64(line: usize, v: &str) -> Result<f64> {
    v.parse().map_err(|_| anyhow!("line {line}: bad number `{v}`"))
}

fn parse_usize(line: usize, v: &str) -> Result<usize> {
    v.parse().map_err(|_| anyhow!("line {line}: bad integer `{v}`"))
}

fn parse_u64(line: usize, v: &str) -> Result<u64> {
    v.parse().map_err(|_| anyhow!("line {line}: bad integer `{v}`"))
}

fn parse_bool(line: usize, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => bail!("line {line}: bad boolean `{v}`"),
    }
}

fn parse_vec3(line: usize, v: &str) -> Result<Vector3<f64>> {
    let parts: Vec<f64> =
        v.split_whitespace().map(|t| parse_f64(line, t)).collect::<Result<_>>()?;
    match parts.len() {
        1 => Ok(Vector3::from_element(parts[0])),
        3 => Ok(Vector3::new(parts[0], parts[1], parts[2])),
        n => bail!("line {line}: expected 1 or 3 numbers, found {n}"),
    }
}

impl ExperimentConfig {
    /// Parses a configuration payload; see the README for the key list.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        // Custom views accumulate here: `views` names the order, and
        // `view.<name>.rotation_deg` defines non-builtin entries.
        let mut view_names: Option<Vec<String>> = None;
        let mut view_rotations: BTreeMap<String, Vector3<f64>> = BTreeMap::new();
        // `weighting.delta_px` may appear before or after the strategy line.
        let mut pending_delta: Option<f64> = None;

        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {line_no}: expected `key = value`"))?;
            let key = key.trim();
            let value = value.trim();
            match key {
                "phantom.kind" => {
                    if !matches!(value, "sphere" | "box" | "tube" | "two-spheres") {
                        bail!("line {line_no}: unknown phantom kind `{value}`");
                    }
                    cfg.phantom_kind = value.into();
                }
                "phantom.dims" => {
                    let v = parse_vec3(line_no, value)?;
                    cfg.phantom_dims = [v.x as usize, v.y as usize, v.z as usize];
                }
                "phantom.spacing" => cfg.phantom_spacing = parse_vec3(line_no, value)?,
                "phantom.density" => cfg.phantom_density = parse_f64(line_no, value)?,
                "phantom.radius" => cfg.phantom_radius = parse_f64(line_no, value)?,
                "phantom.half_extents" => cfg.phantom_half_extents = parse_vec3(line_no, value)?,
                "phantom.half_length" => cfg.phantom_half_length = parse_f64(line_no, value)?,
                "phantom.radius_b" => cfg.phantom_radius_b = parse_f64(line_no, value)?,
                "phantom.center_a" => cfg.phantom_center_a = parse_vec3(line_no, value)?,
                "phantom.center_b" => cfg.phantom_center_b = parse_vec3(line_no, value)?,
                "phantom.density_ratio_b" => {
                    cfg.phantom_density_ratio_b = parse_f64(line_no, value)?
                }
                "camera.detector" => {
                    let parts: Vec<usize> = value
                        .split_whitespace()
                        .map(|t| parse_usize(line_no, t))
                        .collect::<Result<_>>()?;
                    if parts.len() != 2 {
                        bail!("line {line_no}: camera.detector takes 2 numbers");
                    }
                    cfg.detector_res = [parts[0], parts[1]];
                }
                "camera.pixel_spacing" => cfg.pixel_spacing = parse_f64(line_no, value)?,
                "camera.source_to_detector" => {
                    cfg.source_to_detector = parse_f64(line_no, value)?
                }
                "gt.rotation_deg" => cfg.gt_rotation_deg = parse_vec3(line_no, value)?,
                "gt.translation" => cfg.gt_translation = parse_vec3(line_no, value)?,
                "surface.grad_threshold" => cfg.grad_threshold = parse_f64(line_no, value)?,
                "surface.max_points" => cfg.surface_max_points = parse_usize(line_no, value)?,
                "surface.seed" => cfg.surface_seed = parse_u64(line_no, value)?,
                "contour.tau" => cfg.contour.tau = parse_f64(line_no, value)?,
                "contour.max_points" => {
                    cfg.contour.max_contour_points = parse_usize(line_no, value)?
                }
                "estimator.kind" => {
                    cfg.estimator = match value {
                        "oracle" => EstimatorKind::Oracle,
                        "patch" => EstimatorKind::Patch,
                        "external" => EstimatorKind::External,
                        _ => bail!("line {line_no}: unknown estimator `{value}`"),
                    };
                }
                "estimator.noise_sigma_px" => cfg.noise.sigma_px = parse_f64(line_no, value)?,
                "estimator.outlier_frac" => cfg.noise.outlier_frac = parse_f64(line_no, value)?,
                "estimator.outlier_mag_px" => {
                    cfg.noise.outlier_mag_px = parse_f64(line_no, value)?
                }
                "estimator.noise_seed" => cfg.noise.seed = parse_u64(line_no, value)?,
                "estimator.patch_radius_px" => {
                    cfg.patch.patch_radius_px = parse_usize(line_no, value)?
                }
                "estimator.search_radius_px" => {
                    cfg.patch.search_radius_px = parse_usize(line_no, value)?
                }
                "estimator.min_ncc" => cfg.patch.min_ncc = parse_f64(line_no, value)?,
                "estimator.external_dir" => cfg.external_dir = Some(PathBuf::from(value)),
                "weighting.strategy" => {
                    cfg.weighting = match value {
                        "uniform" => WeightStrategy::Uniform,
                        "score" => WeightStrategy::Score,
                        "residual-robust" => WeightStrategy::ResidualRobust {
                            delta_px: pending_delta.unwrap_or(3.0),
                        },
                        _ => bail!("line {line_no}: unknown weighting `{value}`"),
                    };
                }
                "weighting.delta_px" => {
                    let delta = parse_f64(line_no, value)?;
                    pending_delta = Some(delta);
                    if let WeightStrategy::ResidualRobust { delta_px } = &mut cfg.weighting {
                        *delta_px = delta;
                    }
                }
                "loop.max_iterations" => cfg.loop_max_iterations = parse_usize(line_no, value)?,
                "loop.rot_tol_rad" => cfg.stop.rot_tol_rad = parse_f64(line_no, value)?,
                "loop.trans_tol_mm" => cfg.stop.trans_tol_mm = parse_f64(line_no, value)?,
                "loop.step_mm" => {
                    cfg.step_mm =
                        if value == "auto" { None } else { Some(parse_f64(line_no, value)?) };
                }
                "solver.lambda" => cfg.solver.tikhonov_lambda = parse_f64(line_no, value)?,
                "solver.min_rows" => cfg.solver.min_rows = parse_usize(line_no, value)?,
                "solver.omega_scale" => {
                    cfg.solver.omega_scale =
                        if value == "auto" { None } else { Some(parse_f64(line_no, value)?) };
                }
                "sampling.trans_range_mm" => {
                    cfg.sampling.trans_range_mm = parse_f64(line_no, value)?
                }
                "sampling.rot_range_deg" => {
                    cfg.sampling.rot_range_deg = parse_f64(line_no, value)?
                }
                "sampling.mtre_max_mm" => cfg.sampling.mtre_max_mm = parse_f64(line_no, value)?,
                "sampling.n_samples" => cfg.sampling.n_samples = parse_usize(line_no, value)?,
                "sampling.seed" => cfg.sampling.seed = parse_u64(line_no, value)?,
                "sampling.stratified" => cfg.stratified = parse_bool(line_no, value)?,
                "views" => {
                    view_names =
                        Some(value.split_whitespace().map(String::from).collect::<Vec<_>>());
                }
                "benchmark.threshold_mm" => cfg.threshold_mm = parse_f64(line_no, value)?,
                "benchmark.bin_mm" => cfg.bin_mm = parse_f64(line_no, value)?,
                "benchmark.sr_min" => cfg.sr_min = parse_f64(line_no, value)?,
                "benchmark.jobs" => cfg.jobs = parse_usize(line_no, value)?,
                "output.dir" => cfg.output_dir = PathBuf::from(value),
                other => {
                    if let Some(name) = other
                        .strip_prefix("view.")
                        .and_then(|rest| rest.strip_suffix(".rotation_deg"))
                    {
                        view_rotations.insert(name.to_string(), parse_vec3(line_no, value)?);
                    } else {
                        bail!("line {line_no}: unknown key `{other}`");
                    }
                }
            }
        }

        if let Some(names) = view_names {
            if names.is_empty() {
                bail!("`views` must name at least one view");
            }
            let mut views = Vec::new();
            for name in names {
                let rotation_deg = match view_rotations.get(&name) {
                    Some(r) => *r,
                    None => match name.as_str() {
                        "ap" => Vector3::zeros(),
                        "lat" => Vector3::new(0.0, 90.0, 0.0),
                        _ => bail!("view `{name}` has no view.{name}.rotation_deg definition"),
                    },
                };
                views.push(ViewConfig { name, rotation_deg });
            }
            cfg.views = views;
        }
        Ok(cfg)
    }

    pub fn phantom(&self) -> Result<PhantomKind> {
        Ok(match self.phantom_kind.as_str() {
            "sphere" => PhantomKind::Sphere { radius_mm: self.phantom_radius },
            "box" => PhantomKind::Box { half_extents_mm: self.phantom_half_extents },
            "tube" => PhantomKind::Tube {
                radius_mm: self.phantom_radius,
                half_length_mm: self.phantom_half_length,
            },
            "two-spheres" => PhantomKind::TwoSpheres {
                radius_a_mm: self.phantom_radius,
                center_a_mm: self.phantom_center_a,
                radius_b_mm: self.phantom_radius_b,
                center_b_mm: self.phantom_center_b,
                density_ratio_b: self.phantom_density_ratio_b,
            },
            other => bail!("unknown phantom kind `{other}`"),
        })
    }

    pub fn loop_config(&self) -> LoopConfig {
        LoopConfig {
            max_iterations: self.loop_max_iterations,
            stop: self.stop,
            weighting: self.weighting,
            contour: self.contour.clone(),
            solver: self.solver,
            step_mm: self.step_mm,
        }
    }

    /// The ground-truth pose assembled from the Euler/translation keys.
    pub fn ground_truth(&self) -> ppc_core::RigidTransform {
        ppc_core::RigidTransform::from_euler(
            self.gt_rotation_deg.map(f64::to_radians),
            self.gt_translation,
        )
    }
}
