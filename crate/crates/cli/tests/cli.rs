use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fex(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fex")).args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

const TINY: &str = "problem = \"poisson\"\nrepetitions = 2\n[search]\niterations = 3\nfine_steps = 40\n";

#[test]
fn run_writes_reports_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", TINY);
    let out = dir.path().join("out");
    let o = fex(&["run", &cfg, "--profile", "desk", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["config.toml", "run_d2_r0.json", "run_d2_r1.json", "summary.csv", "histogram.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("run_d2_r0.json")).unwrap()).unwrap();
    assert_eq!(report["dimension"], 2);
    assert_eq!(report["outcome"]["mode"], "fixed_tree");
    assert!(report["expression"].is_string());
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.starts_with("problem,mode,dimension,runs,found,median_error"));
}

#[test]
fn same_seed_gives_identical_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", TINY);
    let mut texts = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let o = fex(&["run", &cfg, "--profile", "desk", "--seed", "11", "--out", out.to_str().unwrap()]);
        assert!(o.status.success());
        texts.push((fs::read_to_string(out.join("summary.csv")).unwrap(), fs::read_to_string(out.join("histogram.csv")).unwrap()));
    }
    assert_eq!(texts[0], texts[1]);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        "problem = \"poisson\"\n[search.controller]\nepsilon = 1.5\n",
        "problem = \"heat\"\n",
        "problem = \"poisson\"\nbogus = 1\n",
        "problem = \"poisson\"\nrepetitions = 0\n",
    ];
    for (i, text) in cases.iter().enumerate() {
        let cfg = write(dir.path(), &format!("bad{i}.toml"), text);
        for cmd in ["run", "validate"] {
            let o = fex(&[cmd, &cfg]);
            assert_eq!(o.status.code(), Some(2), "{text}");
            assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
        }
    }
    assert_eq!(fex(&["run", "/nonexistent/config.toml"]).status.code(), Some(2));
}

#[test]
fn unknown_problem_lists_valid_names() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", "problem = \"heat\"\n");
    let o = fex(&["validate", &cfg]);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("poisson, conservation, schrodinger, eigen"), "{err}");
}

#[test]
fn empty_search_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", "problem = \"poisson\"\nrepetitions = 1\n[search]\niterations = 0\n");
    let out = dir.path().join("out");
    let o = fex(&["run", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(out.join("summary.csv").exists());
}

#[test]
fn validate_prints_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", "problem = \"schrodinger\"\n");
    let o = fex(&["validate", &cfg, "--profile", "desk"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("profile = \"desk\""), "{text}");
    assert!(text.contains("iterations = 200"), "{text}");
}

#[test]
fn score_reports_zero_for_exact_solution() {
    let o = fex(&["score", "--problem", "poisson", "--dim", "3", "0.5*(x1^2+x2^2+x3^2)"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["loss"].as_f64().unwrap().abs() < 1e-20);
    assert_eq!(v["score"].as_f64().unwrap(), 1.0);
    assert!(v["error"].as_f64().unwrap() < 1e-14);
    let o = fex(&["score", "--problem", "poisson", "--dim", "3", "x1 +"]);
    assert!(!o.status.success());
}

#[test]
fn runs_write_only_inside_the_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", TINY);
    let out = dir.path().join("nested").join("out");
    let o = Command::new(env!("CARGO_BIN_EXE_fex"))
        .current_dir(dir.path())
        .args(["run", &cfg, "--profile", "desk", "--out", out.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(o.status.success());
    let mut top: Vec<String> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    top.sort();
    assert_eq!(top, ["c.toml", "nested"]);
    assert_eq!(fs::read_dir(dir.path().join("nested")).unwrap().count(), 1);
}

#[test]
fn summary_is_recomputed_from_reports() {
    let dir = tempfile::tempdir().unwrap();
    let spec = fex_cli::validate_config(TINY, Some(fex_cli::Profile::Desk)).unwrap();
    let out = fex_cli::run_experiment(&spec, dir.path()).unwrap();
    let mut reports: Vec<fex_cli::RunReport> = (0..2)
        .map(|r| serde_json::from_str(&fs::read_to_string(dir.path().join(format!("run_d2_r{r}.json"))).unwrap()).unwrap())
        .collect();
    assert_eq!(fex_cli::summarize(&spec, &reports), out.summary);
    reports.reverse();
    assert_eq!(fex_cli::summarize(&spec, &reports), out.summary);
    assert_eq!(reports[1].config.seed, spec.seed);
    assert_eq!(reports[1], out.runs[0]);
}

#[test]
fn report_config_regenerates_the_expression() {
    let dir = tempfile::tempdir().unwrap();
    let spec = fex_cli::validate_config(TINY, Some(fex_cli::Profile::Desk)).unwrap();
    fex_cli::run_experiment(&spec, dir.path()).unwrap();
    let report: fex_cli::RunReport = serde_json::from_str(&fs::read_to_string(dir.path().join("run_d2_r1.json")).unwrap()).unwrap();
    let again = fex_cli::runner::run_once(&report.config, report.dimension, report.repetition).unwrap();
    assert_eq!(again.seed, report.seed);
    assert!(again.expression.is_some());
    assert_eq!(again.expression, report.expression);
}

#[test]
fn expanding_mode_reports_every_template_tried() {
    let dir = tempfile::tempdir().unwrap();
    let text = "problem = \"poisson\"\nrepetitions = 1\nmode = \"expanding_trees\"\n[expanding]\ndepths = [1, 2]\ntolerance = -1.0\n[search]\niterations = 2\nfine_steps = 20\n";
    let spec = fex_cli::validate_config(text, Some(fex_cli::Profile::Desk)).unwrap();
    let out = fex_cli::run_experiment(&spec, dir.path()).unwrap();
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("run_d2_r0.json")).unwrap()).unwrap();
    assert_eq!(report["outcome"]["mode"], "expanding_trees");
    assert_eq!(report["outcome"]["runs"].as_array().unwrap().len(), 2);
    assert_eq!(report["outcome"]["met_tolerance"], false);
    assert!(out.runs[0].expression.is_some());
}
