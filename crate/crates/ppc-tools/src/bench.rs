//! Deterministic parallel benchmark execution and report aggregation.
//!
//! Cases are embarrassingly parallel: every case derives its own seed from
//! `(sampling seed, view, case index)`, records are collected in case order,
//! and aggregates are recomputed from the records, so the report content is
//! independent of the worker count (wall times aside).

use crate::external::FileCorrespondenceEstimator;
use crate::formats::records_to_string;
use anyhow::{Context, Result};
use nalgebra::Vector3;
use ppc_core::{
    capture_range, derive_seed, mrpd, register, render_drr, sample_initial_transforms,
    sample_initial_transforms_stratified, success_ratio, CameraModel, CaseRecord, CaseStatus,
    CorrespondenceEstimator, Image2D, LoopConfig, NoiseConfig, OracleEstimator, PatchMatchConfig,
    PatchMatchEstimator, RegistrationStatus, RigidTransform, SampledPose, SamplingRanges,
    SurfacePoint, Volume,
};
use std::path::PathBuf;
use std::time::Instant;

/// A named view: an extra rotation (degrees per axis) applied about the
/// object's camera-frame center on top of the ground-truth pose.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSpec {
    pub name: String,
    pub rotation_deg: Vector3<f64>,
}

impl ViewSpec {
    pub fn ap() -> Self {
        Self { name: "ap".into(), rotation_deg: Vector3::zeros() }
    }

    /// The view's ground-truth pose: rotate about the object center so the
    /// anatomy stays in front of the source.
    pub fn ground_truth(&self, t_gt: &RigidTransform, object_center: &Vector3<f64>) -> RigidTransform {
        if self.rotation_deg == Vector3::zeros() {
            return t_gt.clone();
        }
        let center_cam = t_gt.apply(object_center);
        let spin = RigidTransform::from_euler(self.rotation_deg.map(f64::to_radians), Vector3::zeros());
        RigidTransform::from_translation(center_cam)
            .compose(&spin)
            .compose(&RigidTransform::from_translation(-center_cam))
            .compose(t_gt)
    }
}

/// Which correspondence source the benchmark builds per case.
#[derive(Debug, Clone)]
pub enum EstimatorSpec {
    /// Oracle correspondences; optional noise gets a per-case seed derived
    /// from the configured noise seed.
    Oracle { noise: Option<NoiseConfig> },
    Patch(PatchMatchConfig),
    /// Per-case directories `<dir>/<case_id>/corr_iter_***.csv`.
    External { dir: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchmarkOptions {
    /// Success threshold on final mRPD (mm).
    pub threshold_mm: f64,
    /// Capture-range bin width (mm) and per-bin success floor.
    pub bin_mm: f64,
    pub sr_min: f64,
    /// Worker threads; 0 uses all cores.
    pub jobs: usize,
    /// Stratify initial errors across bins (capture-range style coverage)
    /// instead of plain rejection sampling.
    pub stratified: bool,
}

impl Default for BenchmarkOptions {
    fn default() -> Self {
        Self { threshold_mm: 2.0, bin_mm: 5.0, sr_min: 0.95, jobs: 0, stratified: true }
    }
}

/// Aggregate block of an evaluation report. `mrpd` statistics are over
/// successful cases only; failures count in the success ratio alone.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregates {
    pub n_cases: usize,
    pub threshold_mm: f64,
    pub success_ratio: f64,
    pub mrpd_mean_mm: Option<f64>,
    pub mrpd_std_mm: Option<f64>,
    pub capture_range_mm: Option<(f64, f64)>,
    /// Empty initial-error bins below the capture range that had to be
    /// skipped; non-empty values flag thin sampling.
    pub capture_range_skipped_bins: Vec<usize>,
    pub runtime_mean_s: f64,
    pub runtime_std_s: f64,
}

impl Aggregates {
    pub fn from_records(records: &[CaseRecord], opts: &BenchmarkOptions) -> Self {
        let n = records.len();
        let sr = success_ratio(records, opts.threshold_mm);
        let successes: Vec<f64> = records
            .iter()
            .filter(|r| r.is_success(opts.threshold_mm))
            .filter_map(|r| r.mrpd_final_mm)
            .collect();
        let (mrpd_mean, mrpd_std) = mean_std(&successes);
        let times: Vec<f64> = records.iter().map(|r| r.wall_time_s).collect();
        let (rt_mean, rt_std) = mean_std(&times);
        let cr = if records.is_empty() {
            None
        } else {
            capture_range(records, opts.bin_mm, opts.sr_min).ok()
        };
        Self {
            n_cases: n,
            threshold_mm: opts.threshold_mm,
            success_ratio: sr,
            mrpd_mean_mm: mrpd_mean,
            mrpd_std_mm: mrpd_std,
            capture_range_mm: cr.as_ref().and_then(|c| c.interval_mm),
            capture_range_skipped_bins: cr.map(|c| c.skipped_empty_bins).unwrap_or_default(),
            runtime_mean_s: rt_mean.unwrap_or(0.0),
            runtime_std_s: rt_std.unwrap_or(0.0),
        }
    }

    /// The `#`-prefixed footer block appended to record files.
    pub fn footer(&self) -> String {
        let fmt_opt = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_else(|| "n/a".into());
        let cr = self
            .capture_range_mm
            .map(|(lo, hi)| format!("{lo:.0}-{hi:.0}"))
            .unwrap_or_else(|| "none".into());
        let skipped = if self.capture_range_skipped_bins.is_empty() {
            String::new()
        } else {
            format!(
                " (warning: empty bins {:?} skipped)",
                self.capture_range_skipped_bins
            )
        };
        format!(
            "# n_cases {}\n\
             # success_ratio {:.6} (mRPD <= {} mm; failed cases count in the denominator)\n\
             # mrpd_mm_mean_std {} {} (over successful cases)\n\
             # capture_range_mm {cr}{skipped}\n\
             # runtime_s_mean_std {:.6} {:.6}\n",
            self.n_cases,
            self.success_ratio,
            self.threshold_mm,
            fmt_opt(self.mrpd_mean_mm),
            fmt_opt(self.mrpd_std_mm),
            self.runtime_mean_s,
            self.runtime_std_s,
        )
    }

    /// One-line benchmark summary: mRPD μ±σ, SR, CR,
    /// runtime μ±σ.
    pub fn summary_row(&self) -> String {
        let mrpd = match (self.mrpd_mean_mm, self.mrpd_std_mm) {
            (Some(m), Some(s)) => format!("{m:.2} +/- {s:.2}"),
            _ => "n/a".into(),
        };
        let cr = self
            .capture_range_mm
            .map(|(lo, hi)| format!("{lo:.0}-{hi:.0}"))
            .unwrap_or_else(|| "none".into());
        format!(
            "mRPD [mm] {mrpd} | SR [%] {:.1} | CR [mm] {cr} | Runtime [s] {:.3} +/- {:.3}",
            self.success_ratio * 100.0,
            self.runtime_mean_s,
            self.runtime_std_s,
        )
    }
}

fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var =
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
    (Some(mean), Some(var.sqrt()))
}

/// A full evaluation: per-case records (sorted by case id) plus aggregates.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub records: Vec<CaseRecord>,
    pub aggregates: Aggregates,
}

impl EvalReport {
    pub fn to_file_string(&self) -> String {
        records_to_string(&self.records, &self.aggregates.footer())
    }
}

struct CaseSpec {
    case_id: String,
    view: String,
    t_gt: RigidTransform,
    t_init: RigidTransform,
    mtre_init_mm: f64,
    case_index: u64,
}

/// Runs the full benchmark: for each view, render the fixed image at the
/// view's ground truth (when the estimator needs it), sample initial poses,
/// register every case, and aggregate.
#[allow(clippy::too_many_arguments)]
pub fn run_benchmark(
    v: &Volume,
    surface: &[SurfacePoint],
    cam: &CameraModel,
    t_gt: &RigidTransform,
    views: &[ViewSpec],
    ranges: &SamplingRanges,
    loop_cfg: &LoopConfig,
    estimator: &EstimatorSpec,
    opts: &BenchmarkOptions,
) -> Result<EvalReport> {
    let targets: Vec<Vector3<f64>> = surface.iter().map(|sp| sp.w_obj).collect();
    let (lo, hi) = v.bounds();
    let object_center = (lo + hi) * 0.5;

    let needs_images = matches!(estimator, EstimatorSpec::Patch(_));
    let mut cases: Vec<CaseSpec> = Vec::new();
    let mut fixed_images: Vec<Option<Image2D>> = Vec::new();
    let mut case_index = 0u64;
    for (view_idx, view) in views.iter().enumerate() {
        let view_gt = view.ground_truth(t_gt, &object_center);
        let fixed = if needs_images {
            let step = loop_cfg.step_mm.unwrap_or_else(|| ppc_core::default_step_mm(v));
            Some(render_drr(v, &view_gt, cam, step).context("rendering the fixed image")?)
        } else {
            None
        };
        fixed_images.push(fixed);

        let view_ranges = SamplingRanges {
            seed: derive_seed(ranges.seed, view_idx as u64),
            ..*ranges
        };
        let samples: Vec<SampledPose> = if opts.stratified {
            sample_initial_transforms_stratified(&view_gt, &view_ranges, &targets, opts.bin_mm)
        } else {
            sample_initial_transforms(&view_gt, &view_ranges, &targets)
        }
        .context("sampling initial transforms")?;

        for (i, sample) in samples.into_iter().enumerate() {
            cases.push(CaseSpec {
                case_id: format!("{}-{i:04}", view.name),
                view: view.name.clone(),
                t_gt: view_gt.clone(),
                t_init: sample.t_init,
                mtre_init_mm: sample.mtre_mm,
                case_index,
            });
            case_index += 1;
        }
    }

    let view_image = |case: &CaseSpec| -> Option<&Image2D> {
        let idx = views.iter().position(|w| w.name == case.view).expect("known view");
        fixed_images[idx].as_ref()
    };

    let run_case = |case: &CaseSpec| -> CaseRecord {
        let started = Instant::now();
        let per_case: Box<dyn CorrespondenceEstimator> = match estimator {
            EstimatorSpec::Oracle { noise } => Box::new(OracleEstimator {
                t_gt: case.t_gt.clone(),
                noise: noise.map(|n| NoiseConfig {
                    seed: derive_seed(n.seed, case.case_index),
                    ..n
                }),
            }),
            EstimatorSpec::Patch(cfg) => Box::new(PatchMatchEstimator { cfg: *cfg }),
            EstimatorSpec::External { dir } => {
                Box::new(FileCorrespondenceEstimator::new(dir.join(&case.case_id)))
            }
        };
        let result = register(
            v,
            surface,
            view_image(case),
            &case.t_init,
            cam,
            loop_cfg,
            per_case.as_ref(),
            Some(&case.t_gt),
        );
        let (status, mrpd_final) = match result.status {
            RegistrationStatus::Failed(_) => (CaseStatus::Failed, None),
            ref ok_status => {
                match mrpd(&result.t_final, &case.t_gt, &targets, cam) {
                    Ok(value) => (
                        match ok_status {
                            RegistrationStatus::Converged => CaseStatus::Converged,
                            _ => CaseStatus::MaxIterations,
                        },
                        Some(value),
                    ),
                    // Final pose left the field of view: the case failed.
                    Err(_) => (CaseStatus::Failed, None),
                }
            }
        };
        CaseRecord {
            case_id: case.case_id.clone(),
            view: case.view.clone(),
            mtre_init_mm: case.mtre_init_mm,
            mrpd_final_mm: mrpd_final,
            status,
            iterations: result.iterations_run,
            wall_time_s: started.elapsed().as_secs_f64(),
        }
    };

    let records: Vec<CaseRecord> = if opts.jobs == 1 {
        cases.iter().map(run_case).collect()
    } else {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if opts.jobs > 0 {
            builder = builder.num_threads(opts.jobs);
        }
        let pool = builder.build().context("building the worker pool")?;
        pool.install(|| {
            use rayon::prelude::*;
            cases.par_iter().map(run_case).collect()
        })
    };

    let aggregates = Aggregates::from_records(&records, opts);
    Ok(EvalReport { records, aggregates })
}
