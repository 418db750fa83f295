use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = r#"
[basis]
coarse_level = 3
dense_level = 4

[network]
epochs = 2
samples_per_combo = 1
"#;

fn fordn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fordn"))
        .args(args)
        .env_remove("FORDN_JOBS")
        .env_remove("RUST_LOG")
        .output()
        .expect("spawn fordn")
}

fn ok(args: &[&str]) -> Output {
    let out = fordn(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Run {
    _dir: TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Run {
    fn data(&self, name: &str) -> PathBuf {
        self.root.join("data").join(name)
    }

    fn inputs(&self) -> Vec<String> {
        ["--signals", "signals.f32", "--regions", "regions.u8", "--gradients", "gradients.txt"]
            .chunks(2)
            .flat_map(|c| [c[0].to_string(), s(&self.data(c[1])).to_string()])
            .collect()
    }

    fn cmd(&self, sub: &[&str]) -> Vec<String> {
        let mut v = vec!["--config".to_string(), s(&self.config).to_string()];
        v.extend(sub.iter().map(|x| x.to_string()));
        v
    }
}

fn args(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

fn small_phantom() -> Run {
    let dir = TempDir::new().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("small.toml");
    std::fs::write(&config, SMALL).unwrap();
    let out = ok(&["--config", s(&config), "phantom", "--out", s(&root.join("data"))]);
    let census = String::from_utf8(out.stdout).unwrap();
    assert!(census.contains("2304") && census.contains("312"), "{census}");
    Run { _dir: dir, root, config }
}

fn estimate(run: &Run, method: &str, models: Option<&Path>) -> Output {
    let out = run.root.join(format!("{method}.fos"));
    let mut v = run.cmd(&["estimate", "--method", method, "--out", s(&out)]);
    v.extend(run.inputs());
    if let Some(m) = models {
        v.extend(["--models".to_string(), s(m).to_string()]);
    }
    fordn(&args(&v))
}

#[test]
fn end_to_end_on_a_small_basis() {
    let run = small_phantom();
    let models = run.root.join("models");
    let mut v = run.cmd(&["train", "--out", s(&models)]);
    v.extend(run.inputs());
    ok(&args(&v));
    assert!(models.join("model_region1.fordnmdl").is_file());
    assert!(models.join("loss_region1.csv").is_file());

    for m in ["cfari", "dn", "fordn"] {
        let out = estimate(&run, m, Some(&models));
        assert!(out.status.success(), "{m}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(run.root.join(format!("{m}.fos.json")).is_file());
    }
    let report = run.root.join("report");
    let out = ok(&[
        "evaluate",
        "--truth",
        s(&run.data("truth.fos")),
        "--labels",
        s(&run.data("labels.u8")),
        "--out",
        s(&report),
        s(&run.root.join("cfari.fos")),
        s(&run.root.join("dn.fos")),
        s(&run.root.join("fordn.fos")),
    ]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("cfari_vs_fordn"), "{text}");
    for f in ["errors.csv", "stats.csv", "errors.svg", "effect_sizes.svg", "report.json"] {
        assert!(report.join(f).is_file(), "{f}");
    }
    let errors = std::fs::read_to_string(report.join("errors.csv")).unwrap();
    // 3 methods × 4 regions plus the header
    assert_eq!(errors.lines().count(), 13);
    let stats = std::fs::read_to_string(report.join("stats.csv")).unwrap();
    assert_eq!(stats.lines().count(), 13);
}

#[test]
fn network_methods_without_models_point_at_train() {
    let run = small_phantom();
    for m in ["dn", "fordn"] {
        let out = estimate(&run, m, None);
        assert_eq!(out.status.code(), Some(2));
        assert!(String::from_utf8_lossy(&out.stderr).contains("fordn train"));
        let out = estimate(&run, m, Some(&run.root.join("nowhere")));
        assert_eq!(out.status.code(), Some(2));
        assert!(String::from_utf8_lossy(&out.stderr).contains("fordn train"));
    }
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(fordn(&[]).status.code(), Some(1));
    assert_eq!(fordn(&["bogus"]).status.code(), Some(1));
    assert_eq!(fordn(&["estimate", "--method", "cfari"]).status.code(), Some(1));
    let out = fordn(&["estimate", "--method", "magic", "--signals", "a", "--regions", "b", "--out", "c"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(fordn(&["tune", "--method", "fordn"]).status.code(), Some(1));
    assert_eq!(fordn(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_input_exits_3_and_bad_config_exits_2() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("missing.f32");
    let out = fordn(&[
        "estimate",
        "--method",
        "cfari",
        "--signals",
        s(&missing),
        "--regions",
        s(&missing),
        "--out",
        s(&dir.path().join("x.fos")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.f32"));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[solver]\nalpha = 1.5\n").unwrap();
    let out = fordn(&["--config", s(&bad), "phantom", "--out", s(&dir.path().join("p"))]);
    assert_eq!(out.status.code(), Some(2));
    std::fs::write(&bad, "[solver]\nnot_a_key = 1\n").unwrap();
    let out = fordn(&["--config", s(&bad), "phantom", "--out", s(&dir.path().join("p"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn evaluate_refuses_mixed_configurations_unless_forced() {
    let run = small_phantom();
    let other = run.root.join("other.toml");
    std::fs::write(&other, format!("{SMALL}\n[solver]\nbeta_cfari = 0.5\n")).unwrap();
    let out = run.root.join("cfari.fos");
    let mut v = vec!["--config".to_string(), s(&other).to_string()];
    v.extend(["estimate", "--method", "cfari", "--out", s(&out)].map(String::from));
    v.extend(run.inputs());
    ok(&args(&v));

    let eval = |force: bool, dir: &str| {
        let report = run.root.join(dir);
        let (truth, labels) = (run.data("truth.fos"), run.data("labels.u8"));
        let mut v = vec![
            "evaluate",
            "--truth",
            s(&truth),
            "--labels",
            s(&labels),
            "--out",
            s(&report),
        ];
        if force {
            v.push("--force");
        }
        v.push(s(&out));
        (fordn(&v), report)
    };
    let (refused, report) = eval(false, "refused");
    assert_eq!(refused.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&refused.stderr).contains("--force"));
    assert!(!report.join("errors.csv").exists());

    let (forced, report) = eval(true, "forced");
    assert!(forced.status.success());
    let meta = std::fs::read_to_string(report.join("report.json")).unwrap();
    assert!(meta.contains("\"forced\": true"), "{meta}");
}

#[test]
fn evaluate_rejects_truth_and_duplicates() {
    let run = small_phantom();
    ok(&args(&{
        let mut v = run.cmd(&["estimate", "--method", "cfari", "--out", s(&run.root.join("cfari.fos"))]);
        v.extend(run.inputs());
        v
    }));
    let out_dir = run.root.join("r");
    let (truth, labels) = (run.data("truth.fos"), run.data("labels.u8"));
    let base = ["evaluate", "--truth", s(&truth), "--labels", s(&labels)];
    let cfari = run.root.join("cfari.fos");
    let mut v = base.to_vec();
    v.extend(["--out", s(&out_dir), s(&truth)]);
    assert_eq!(fordn(&v).status.code(), Some(2));
    let mut v = base.to_vec();
    v.extend(["--out", s(&out_dir), s(&cfari), s(&cfari)]);
    assert_eq!(fordn(&v).status.code(), Some(2));
}

#[test]
fn phantom_is_byte_identical_across_runs_and_worker_counts() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("small.toml");
    std::fs::write(&config, SMALL).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["--config", s(&config), "--jobs", "1", "phantom", "--out", s(&a)]);
    ok(&["--config", s(&config), "--jobs", "3", "phantom", "--out", s(&b)]);
    let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 10, "{names:?}");
    for n in names {
        assert_eq!(std::fs::read(a.join(&n)).unwrap(), std::fs::read(b.join(&n)).unwrap(), "{n:?}");
    }
}
