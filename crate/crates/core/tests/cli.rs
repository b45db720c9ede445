//! End-to-end tests of the `nitsche` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use nitsche::cli::config::RunConfig;

fn nitsche(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nitsche"))
        .args(args)
        .env_remove("DNM_OUTPUT_ROOT")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config(dir: &Path, problem: &str, p: Option<f64>, beta: f64) -> String {
    let mut text = format!("problem = {problem}\n");
    if let Some(p) = p {
        text += &format!("p = {p}\n");
    }
    text += &format!(
        "beta = {beta}\nwidth = 4\nblocks = 1\nepochs = 6\neval_every = 2\n\
         n_interior = 16\nn_boundary = 8\neval_points = 400\noutput_dir = {}\n",
        dir.display()
    );
    text
}

#[test]
fn param_count() {
    let o = nitsche(&["param-count", "--dim", "2", "--width", "10", "--blocks", "5"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "1141");
    let o = nitsche(&["param-count", "--preset", "dirichlet20d_beta50"]);
    assert_eq!(stdout(&o).trim(), "26601");
    let o = nitsche(&["param-count", "--preset", "dirichlet100d_beta500"]);
    assert_eq!(stdout(&o).trim(), "111201");
    assert!(!nitsche(&["param-count", "--dim", "2"]).status.success());
}

#[test]
fn presets_list_and_show() {
    let o = nitsche(&["presets"]);
    assert!(o.status.success());
    let names: Vec<String> = stdout(&o).lines().map(str::to_string).collect();
    assert_eq!(names.len(), 30);
    assert!(names.contains(&"mixed2d_beta2000".to_string()));
    let o = nitsche(&["presets", "--show", "mixed2d_beta2000"]);
    let config = RunConfig::parse(&stdout(&o)).unwrap();
    assert_eq!((config.beta, config.width, config.epochs), (2000.0, 10, 50_000));
    assert!(!nitsche(&["presets", "--show", "nope"]).status.success());
}

#[test]
fn train_writes_curve_final_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.txt");
    let out = dir.path().join("out");
    fs::write(&cfg, tiny_config(&out, "crack2d", None, 500.0)).unwrap();
    let o = nitsche(&["train", "--config", cfg.to_str().unwrap(), "--quiet"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let curve = fs::read_to_string(out.join("curve.csv")).unwrap();
    let lines: Vec<&str> = curve.lines().collect();
    assert_eq!(
        lines[0],
        "epoch,loss_total,loss_interior,loss_dirichlet_penalty,loss_dirichlet_consistency,\
         loss_neumann,e_L2,e_H1,e_H1_semi"
    );
    let epochs: Vec<usize> = lines[1..]
        .iter()
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(epochs, vec![0, 2, 4, 6]);
    assert!(epochs.windows(2).all(|w| w[0] < w[1]));
    assert!(lines.iter().all(|l| l.split(',').count() == 9));
    let fin = fs::read_to_string(out.join("final.csv")).unwrap();
    let fin: Vec<&str> = fin.lines().collect();
    assert_eq!(fin[0], "problem,beta,p,e_L2,e_H1");
    assert!(fin[1].starts_with("crack2d,500,,"));
    assert!(out.join("checkpoint_000006.bin").exists());
    assert!(out.join("config.txt").exists());
}

#[test]
fn seed_override_output_root_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.txt");
    fs::write(&cfg, tiny_config(Path::new("rel"), "plap_smooth", Some(2.4), 500.0)).unwrap();
    let run = |root: &str, seed: &str| {
        Command::new(env!("CARGO_BIN_EXE_nitsche"))
            .args(["train", "--config", cfg.to_str().unwrap(), "--seed", seed, "--quiet"])
            .env("DNM_OUTPUT_ROOT", dir.path().join(root))
            .output()
            .unwrap()
    };
    assert!(run("a", "5").status.success());
    assert!(run("b", "5").status.success());
    assert!(run("c", "6").status.success());
    let read = |root: &str| fs::read(dir.path().join(root).join("rel/curve.csv")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
    let saved = RunConfig::load(&dir.path().join("a/rel/config.txt")).unwrap();
    assert_eq!(saved.seed, 5);
}

#[test]
fn train_rejects_bad_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.txt");
    fs::write(&cfg, "problem = mixed2d\nbeta = 10\nmomentum = 0.9\n").unwrap();
    let o = nitsche(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("unknown key \"momentum\""), "{}", stderr(&o));
    let o = nitsche(&["train", "--preset", "mixed2d_beta3"]);
    assert!(!o.status.success());
}

#[test]
fn table_from_run_dirs() {
    let o = nitsche(&["table"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 1);

    let dir = tempfile::tempdir().unwrap();
    let mut dirs = Vec::new();
    for (name, beta, e) in [
        ("mixed2d", 2000.0, 0.02036),
        ("mixed2d", 500.0, 0.03925),
        ("crack2d", 500.0, 0.005298),
        ("mixed2d", 1000.0, 0.03),
    ] {
        let d = dir.path().join(format!("{name}_{beta}"));
        fs::create_dir_all(&d).unwrap();
        fs::write(
            d.join("final.csv"),
            format!("problem,beta,p,e_L2,e_H1\n{name},{beta},,{e},{}\n", 2.0 * e),
        )
        .unwrap();
        dirs.push(d.to_str().unwrap().to_string());
    }
    let args: Vec<&str> = std::iter::once("table").chain(dirs.iter().map(String::as_str)).collect();
    let o = nitsche(&args);
    assert!(o.status.success());
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1 + 2 + 4);
    assert_eq!(lines[1], "% mixed2d");
    assert!(lines[2].contains("3.925e-02"));
    assert!(lines[4].contains("2.036e-02"));
    assert_eq!(lines[5], "% crack2d");
    assert!(lines[6].contains("5.298e-03"));

    let missing = dir.path().join("nothing");
    let o = nitsche(&["table", dirs[0].as_str(), missing.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("nothing"));
    assert_eq!(stdout(&o).lines().count(), 3);
}

#[test]
fn sample_prints_points() {
    let o = nitsche(&["sample", "--problem", "crack2d", "--n-interior", "3", "--n-boundary", "2"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "batch,patch,condition,x0,x1");
    assert_eq!(lines.len(), 1 + 3 + 6 * 2);
    assert!(lines[1].starts_with("0,interior,,"));
}

#[test]
fn check_passes_and_catches_injected_faults() {
    let o = nitsche(&["check", "--points", "300"]);
    let text = stdout(&o);
    assert!(o.status.success(), "{text}");
    assert!(!text.contains("FAIL"));
    assert!(text.contains("PASS nitsche-identity"));

    let o = nitsche(&["check", "--points", "300", "--inject", "wrong-conormal-sign"]);
    assert!(!o.status.success());
    assert!(stdout(&o).contains("FAIL nitsche-identity"));

    let o = nitsche(&["check", "--points", "300", "--inject", "wrong-source"]);
    assert!(!o.status.success());
    let text = stdout(&o);
    assert!(text.contains("FAIL verify mixed2d"), "{text}");
    assert!(text.contains("PASS nitsche-identity"));
}
