//! End-to-end checks of the `ppcreg` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ppcreg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ppcreg"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawning ppcreg")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "ppcreg failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn make_phantom_roundtrips_and_validates_flags() {
    let dir = tempfile::tempdir().unwrap();
    let out = ppcreg(
        dir.path(),
        &["make-phantom", "--kind", "sphere", "--dims", "24", "--spacing", "1.0", "--radius",
            "8", "-o", "s.vol"],
    );
    assert_ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("24x24x24"));

    // Reload equals the in-memory construction bit-exactly.
    let reloaded = ppc_tools::formats::read_volume(&dir.path().join("s.vol")).unwrap();
    let rebuilt = ppc_core::make_phantom(
        &ppc_core::PhantomKind::Sphere { radius_mm: 8.0 },
        [24, 24, 24],
        nalgebra::Vector3::new(1.0, 1.0, 1.0),
        1.0,
    )
    .unwrap();
    assert_eq!(reloaded, rebuilt);

    // Unknown kind: usage error, exit code 2.
    let bad = ppcreg(dir.path(), &["make-phantom", "--kind", "banana", "-o", "x.vol"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("--kind"));
}

#[test]
fn render_is_deterministic_and_framed() {
    let dir = tempfile::tempdir().unwrap();
    assert_ok(&ppcreg(
        dir.path(),
        &["make-phantom", "--kind", "sphere", "--dims", "32", "--radius", "12", "-o", "s.vol"],
    ));
    let render = ["render", "--volume", "s.vol", "--pose", "0,0,0,0,0,600", "--detector",
        "128x128", "--pixel-spacing", "2.0", "-o", "drr"];
    assert_ok(&ppcreg(dir.path(), &render));
    let first = fs::read(dir.path().join("drr.raw")).unwrap();
    assert_ok(&ppcreg(dir.path(), &render));
    let second = fs::read(dir.path().join("drr.raw")).unwrap();
    assert_eq!(first, second, "same command must produce bit-identical output");

    let img = ppc_tools::formats::read_image_raw(&dir.path().join("drr.raw")).unwrap();
    assert!(img.data().iter().any(|&v| v > 0.0), "sphere projects to a nonzero image");
    for (x, y) in [(0, 0), (127, 0), (0, 127), (127, 127)] {
        assert_eq!(img.at(x, y), 0.0, "corners lie outside the sphere shadow");
    }
}

#[test]
fn register_oracle_converges_and_writes_poses() {
    let dir = tempfile::tempdir().unwrap();
    assert_ok(&ppcreg(
        dir.path(),
        &["make-phantom", "--kind", "sphere", "--dims", "64", "--radius", "20", "-o", "s.vol"],
    ));
    assert_ok(&ppcreg(
        dir.path(),
        &["render", "--volume", "s.vol", "--pose", "0,0,0,0,0,600", "-o", "flr"],
    ));

    // Write T_init as a pose file through the formats module.
    let t_init = ppc_core::RigidTransform::from_euler(
        nalgebra::Vector3::new(2f64.to_radians(), -3f64.to_radians(), 1f64.to_radians()),
        nalgebra::Vector3::new(8.0, -5.0, 590.0),
    );
    ppc_tools::formats::write_pose(&dir.path().join("init.txt"), &t_init).unwrap();
    // Bit-exact reload of what we wrote (well within the 1e-12 contract).
    let reread = ppc_tools::formats::read_pose(&dir.path().join("init.txt")).unwrap();
    assert_eq!(reread.rotation(), t_init.rotation());
    assert_eq!(reread.translation(), t_init.translation());

    let out = ppcreg(
        dir.path(),
        &["register", "--volume", "s.vol", "--fixed", "flr.raw", "--init", "init.txt",
            "--gt-euler", "0,0,0,0,0,600", "--estimator", "oracle", "-o", "reg"],
    );
    assert_ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("converged"));

    // The 20 mm-scale offset must land at sub-0.1 mm mRPD in the trace.
    let trace = fs::read_to_string(dir.path().join("reg/trace.csv")).unwrap();
    let last = trace.lines().last().unwrap();
    let mrpd: f64 = last.rsplit(',').next().unwrap().parse().unwrap();
    assert!(mrpd <= 0.1, "final mRPD {mrpd}");

    let t_final = ppc_tools::formats::read_pose(&dir.path().join("reg/pose_final.txt")).unwrap();
    assert!((t_final.translation() - nalgebra::Vector3::new(0.0, 0.0, 600.0)).norm() < 0.2);

    // Starting at the ground truth, the loop converges at iteration 1.
    let out = ppcreg(
        dir.path(),
        &["register", "--volume", "s.vol", "--fixed", "flr.raw", "--init-euler",
            "0,0,0,0,0,600", "--gt-euler", "0,0,0,0,0,600", "--estimator", "oracle", "-o",
            "reg_fixed"],
    );
    assert_ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("after 1 iterations"));
}

#[test]
fn register_without_init_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = ppcreg(dir.path(), &["register", "--volume", "a", "--fixed", "b", "-o", "c"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn failed_registration_soft_exits_unless_strict() {
    let dir = tempfile::tempdir().unwrap();
    assert_ok(&ppcreg(
        dir.path(),
        &["make-phantom", "--kind", "sphere", "--dims", "32", "--radius", "12", "-o", "s.vol"],
    ));
    // A structureless fixed image: patch matching finds nothing and the
    // run reports failed status.
    let flat = ppc_core::Image2D::zeros(128, 128, 2.0).unwrap();
    ppc_tools::formats::write_image_raw(&dir.path().join("flat.raw"), &flat).unwrap();
    let common = ["register", "--volume", "s.vol", "--fixed", "flat.raw", "--init-euler",
        "0,0,0,0,0,500", "--estimator", "patch", "--detector", "128x128", "--pixel-spacing",
        "2.0", "-o", "reg"];
    let soft = ppcreg(dir.path(), &common);
    assert_eq!(soft.status.code(), Some(0), "batch mode soft-fails");
    assert!(String::from_utf8_lossy(&soft.stdout).contains("failed"));

    let mut strict: Vec<&str> = common.to_vec();
    strict.push("--strict");
    let hard = ppcreg(dir.path(), &strict);
    assert_eq!(hard.status.code(), Some(1), "--strict flips the exit code");
}

#[test]
fn evaluate_runs_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("exp.cfg"),
        "phantom.kind = sphere\n\
         sampling.n_samples = 5\n\
         sampling.trans_range_mm = 10\n\
         sampling.rot_range_deg = 5\n\
         sampling.mtre_max_mm = 10\n\
         sampling.seed = 99\n\
         estimator.kind = oracle\n\
         output.dir = out_a\n",
    )
    .unwrap();
    let out = ppcreg(dir.path(), &["evaluate", "--config", "exp.cfg"]);
    assert_ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("SR [%] 100.0"));

    let out = ppcreg(dir.path(), &["evaluate", "--config", "exp.cfg", "-o", "out_b"]);
    assert_ok(&out);

    // Identical up to the wall-time column, which is explicitly exempt
    // from the determinism contract.
    let strip_wall_time = |text: &str| -> String {
        text.lines()
            .map(|line| {
                if line.starts_with('#') || line.starts_with("case_id") {
                    if line.starts_with("# runtime") {
                        return String::new();
                    }
                    return line.to_string();
                }
                line.rsplit_once(',').map(|(rest, _)| rest.to_string()).unwrap_or_default()
            })
            .collect::<Vec<_>>()
            .join("\n")
    };
    let a = fs::read_to_string(dir.path().join("out_a/records.csv")).unwrap();
    let b = fs::read_to_string(dir.path().join("out_b/records.csv")).unwrap();
    assert_eq!(strip_wall_time(&a), strip_wall_time(&b));
}

#[test]
fn evaluate_reproduces_the_200_case_convergence_numbers() {
    // The oracle convergence suite through the CLI: same scene and bounds
    // as the acceptance criterion (SR ≥ 99% at 2 mm, mTRE ∈ [0,30] mm).
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("exp.cfg"),
        "phantom.kind = sphere\n\
         phantom.radius = 20\n\
         surface.seed = 31\n\
         sampling.n_samples = 200\n\
         sampling.trans_range_mm = 30\n\
         sampling.rot_range_deg = 20\n\
         sampling.mtre_max_mm = 30\n\
         sampling.seed = 4040\n\
         estimator.kind = oracle\n\
         output.dir = out\n",
    )
    .unwrap();
    let out = ppcreg(dir.path(), &["evaluate", "--config", "exp.cfg", "--jobs", "2"]);
    assert_ok(&out);

    let records = ppc_tools::formats::read_records(&dir.path().join("out/records.csv")).unwrap();
    assert_eq!(records.len(), 200);
    let sr = ppc_core::success_ratio(&records, 2.0);
    assert!(sr >= 0.99, "SR {sr}");
    let mut finals: Vec<f64> =
        records.iter().map(|r| r.mrpd_final_mm.unwrap_or(f64::INFINITY)).collect();
    finals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert!(finals[100] <= 0.1, "median final mRPD {}", finals[100]);
}

#[test]
fn evaluate_reports_config_errors_with_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.cfg"), "phantom.kind = sphere\nwat = 7\n").unwrap();
    let out = ppcreg(dir.path(), &["evaluate", "--config", "bad.cfg"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2"), "{err}");
}
