//! Acceptance criteria, one PASS/FAIL/SKIP line each.
//!
//! The paper-regime runs take hours. They are checked only when
//! `DNM_ACCEPTANCE_RUNS` names a directory holding `<preset>/final.csv`
//! files, or trained into it first when `DNM_ACCEPTANCE_LONG=1`.
//! The process exits nonzero on a FAIL only when `DNM_ACCEPTANCE_STRICT=1`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use nitsche::checks;
use nitsche::cli::output::{read_final, FINAL_FILE};
use nitsche::cli::presets::preset;
use nitsche::cli::{train_to_dir, GRADIENT_TOL, IDENTITY_TOL};

const SMOKE_EPOCHS: usize = 2000;
const SMOKE_REDUCTION: f64 = 10.0;
const MOVING_WINDOW: usize = 500;

enum Status {
    Pass,
    Fail,
    Skip,
}

struct Runner {
    failed: usize,
    passed: usize,
    skipped: usize,
}

impl Runner {
    fn line(&mut self, id: &str, status: Status, detail: String, started: Instant) {
        let tag = match status {
            Status::Pass => {
                self.passed += 1;
                "PASS"
            }
            Status::Fail => {
                self.failed += 1;
                "FAIL"
            }
            Status::Skip => {
                self.skipped += 1;
                "SKIP"
            }
        };
        println!(
            "{tag} [{id}] {detail} ({:.1}s)",
            started.elapsed().as_secs_f64()
        );
    }

    fn check(&mut self, id: &str, ok: bool, detail: String, started: Instant) {
        let status = if ok { Status::Pass } else { Status::Fail };
        self.line(id, status, detail, started);
    }
}

fn criterion_1(r: &mut Runner) {
    let t = Instant::now();
    let bad = checks::param_count_mismatches();
    r.check(
        "1 param-count",
        bad.is_empty(),
        format!("1141/26601/111201, {} mismatches", bad.len()),
        t,
    );
}

fn criterion_2(r: &mut Runner) {
    let t = Instant::now();
    match checks::gradient_check_suite() {
        Ok(suite) => {
            let worst = suite
                .iter()
                .map(|g| g.parameter_error.max(g.spatial_error))
                .fold(0.0, f64::max);
            let failing = suite.iter().filter(|g| !g.passed(GRADIENT_TOL)).count();
            let has_36 = suite.iter().any(|g| g.problem.contains("3.6"));
            r.check(
                "2 gradients",
                failing == 0 && suite.len() == 20 && has_36,
                format!(
                    "{} triples, {failing} above {GRADIENT_TOL:.0e}, worst {worst:.2e}",
                    suite.len()
                ),
                t,
            );
        }
        Err(e) => r.check("2 gradients", false, e.to_string(), t),
    }
}

fn criterion_3(r: &mut Runner) {
    let t = Instant::now();
    match checks::identity_check(10, 0, 1.0) {
        Ok(d) => r.check(
            "3 nitsche-identity",
            d <= IDENTITY_TOL,
            format!("max defect {d:.2e} over 10 cubics (tol {IDENTITY_TOL:.0e})"),
            t,
        ),
        Err(e) => r.check("3 nitsche-identity", false, e.to_string(), t),
    }
}

fn criterion_4(r: &mut Runner) {
    let t = Instant::now();
    let bad = checks::halton_mismatches();
    r.check(
        "4 halton",
        bad.is_empty(),
        format!("bases 2 and 3, indices 1-8, {} mismatches", bad.len()),
        t,
    );
}

fn criterion_5(r: &mut Runner) {
    let t = Instant::now();
    let reports = checks::verify_all(1000);
    let failing: Vec<&str> = reports
        .iter()
        .filter(|v| !v.passed())
        .map(|v| v.problem.as_str())
        .collect();
    let worst = reports.iter().map(|v| v.max_residual()).fold(0.0, f64::max);
    r.check(
        "5 verify-problems",
        failing.is_empty(),
        format!(
            "{} problem instances, worst residual {worst:.2e}, failing {failing:?}",
            reports.len()
        ),
        t,
    );
}

/// Means of consecutive non-overlapping windows of `losses`.
fn window_means(losses: &[f64], window: usize) -> Vec<f64> {
    losses
        .chunks_exact(window)
        .map(|c| c.iter().sum::<f64>() / window as f64)
        .collect()
}

fn criterion_6(r: &mut Runner, scratch: &Path) {
    let t = Instant::now();
    let mut config = preset("mixed2d_beta2000").expect("preset exists");
    config.epochs = SMOKE_EPOCHS;
    let summary = match train_to_dir(&config, &scratch.join("smoke"), false) {
        Ok(s) => s,
        Err(e) => return r.check("6 smoke", false, format!("{e:#}"), t),
    };
    let (e0, e1) = (summary.initial_errors.e_h1, summary.errors.e_h1);
    let ratio = e0 / e1;
    r.check(
        "6 smoke e_H1",
        ratio >= SMOKE_REDUCTION,
        format!("mixed2d beta=2000 {SMOKE_EPOCHS} epochs: e_H1 {e0:.3e} -> {e1:.3e}, reduction {ratio:.2}x (need {SMOKE_REDUCTION}x)"),
        t,
    );
    let means = window_means(&summary.epoch_losses[..SMOKE_EPOCHS], MOVING_WINDOW);
    let monotone = means.windows(2).all(|w| w[1] <= w[0]);
    let shown: Vec<String> = means.iter().map(|m| format!("{m:.1}")).collect();
    r.check(
        "6 smoke loss average",
        monotone,
        format!("{MOVING_WINDOW}-epoch means [{}]", shown.join(", ")),
        t,
    );
}

/// `(preset, e_L2 bound, e_H1 bound)`.
const LONG_RUNS: [(&str, f64, Option<f64>); 5] = [
    ("mixed2d_beta2000", 5e-2, Some(1.2e-1)),
    ("crack2d_beta500", 2e-2, Some(1.5e-1)),
    ("plap_smooth_p2.4_beta500", 2e-2, None),
    ("dirichlet20d_beta50", 5e-2, None),
    ("dirichlet100d_beta500", 1e-2, None),
];

fn criterion_7(r: &mut Runner) {
    let train = std::env::var("DNM_ACCEPTANCE_LONG").is_ok_and(|v| v == "1");
    let root = std::env::var_os("DNM_ACCEPTANCE_RUNS")
        .map(PathBuf::from)
        .or_else(|| train.then(|| PathBuf::from("runs")));
    for (name, l2_bound, h1_bound) in LONG_RUNS {
        let t = Instant::now();
        let id = format!("7 {name}");
        let Some(root) = &root else {
            r.line(&id, Status::Skip, "set DNM_ACCEPTANCE_RUNS or DNM_ACCEPTANCE_LONG=1".into(), t);
            continue;
        };
        let dir = root.join(name);
        if train && !dir.join(FINAL_FILE).exists() {
            let config = preset(name).expect("preset exists");
            if let Err(e) = train_to_dir(&config, &dir, false) {
                r.check(&id, false, format!("{e:#}"), t);
                continue;
            }
        }
        let rows = match read_final(&dir.join(FINAL_FILE)) {
            Ok(rows) if !rows.is_empty() => rows,
            _ => {
                r.line(&id, Status::Skip, format!("no {}", dir.join(FINAL_FILE).display()), t);
                continue;
            }
        };
        let row = &rows[0];
        let mut ok = row.e_l2 <= l2_bound;
        let mut detail = format!("e_L2 {:.3e} (<= {l2_bound:.0e})", row.e_l2);
        if let Some(b) = h1_bound {
            ok &= row.e_h1 <= b;
            detail += &format!(", e_H1 {:.3e} (<= {b:.1e})", row.e_h1);
        }
        r.check(&id, ok, detail, t);
    }
}

fn criterion_8(r: &mut Runner, scratch: &Path) {
    for (name, epochs, eval_every, eval_points) in [
        ("mixed2d_beta2000", 40, 10, 2000),
        ("crack2d_beta500", 40, 10, 2000),
        ("plap_singular_p4.8_beta6000", 40, 10, 2000),
        ("dirichlet20d_beta50", 1, 1, 200),
    ] {
        let t = Instant::now();
        let mut config = preset(name).expect("preset exists");
        config.epochs = epochs;
        config.eval_every = eval_every;
        config.eval_points = eval_points;
        let mut curves = Vec::new();
        for run in ["a", "b"] {
            let dir = scratch.join(format!("det_{name}_{run}"));
            let read = train_to_dir(&config, &dir, false)
                .map_err(|e| format!("{e:#}"))
                .and_then(|_| std::fs::read(dir.join("curve.csv")).map_err(|e| e.to_string()));
            curves.push(read);
        }
        let id = format!("8 determinism {name}");
        match (&curves[0], &curves[1]) {
            (Ok(a), Ok(b)) => r.check(
                &id,
                a == b,
                format!("{epochs} epochs, curve.csv {} bytes, identical: {}", a.len(), a == b),
                t,
            ),
            (Err(e), _) | (_, Err(e)) => r.check(&id, false, e.clone(), t),
        }
    }
}

fn main() -> ExitCode {
    let scratch = tempfile::tempdir().expect("temporary directory");
    let mut r = Runner {
        failed: 0,
        passed: 0,
        skipped: 0,
    };
    criterion_1(&mut r);
    criterion_2(&mut r);
    criterion_3(&mut r);
    criterion_4(&mut r);
    criterion_5(&mut r);
    criterion_6(&mut r, scratch.path());
    criterion_7(&mut r);
    criterion_8(&mut r, scratch.path());
    println!(
        "acceptance: {} passed, {} failed, {} skipped",
        r.passed, r.failed, r.skipped
    );
    let strict = std::env::var("DNM_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && r.failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
