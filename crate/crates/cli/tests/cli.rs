use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use psco_core::data::write_dataset;
use psco_core::evaluation::EvalReport;
use psco_core::trainer::EpochRecord;
use psco_core::{snapshot, Dataset, InputKind, Matrix, TrainConfig, Trainer};
use tempfile::TempDir;

fn psco(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_psco"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_config(epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig::desk();
    cfg.epochs = epochs;
    cfg.model.backbone_hidden = 8;
    cfg.model.head_hidden = 8;
    cfg.model.embed_dim = 4;
    cfg.task.batch_size = 8;
    cfg.task.queue_size = 128;
    cfg
}

fn write_spec(dir: &Path, name: &str, seed: u64) -> PathBuf {
    let path = dir.join(format!("{name}.spec.toml"));
    let text = format!(
        "name = \"{name}\"\nn_classes = 4\ndim = 6\nsamples_per_class = 16\n\
         class_mean_scale = 1.0\nwithin_class_sigma = 0.1\nseed = {seed}\n"
    );
    fs::write(&path, text).unwrap();
    path
}

fn generated(dir: &Path) -> PathBuf {
    let spec = write_spec(dir, "toy", 3);
    let o = psco(&["gen", "--spec", p(&spec)]);
    assert!(o.status.success(), "{}", stderr(&o));
    dir.join("toy.manifest.toml")
}

/// Identity encoder over one-hot-like, nonnegative clusters: queries and
/// prototypes are the normalized inputs, so every episode is solved exactly.
fn separable_fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let dim = 4;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for c in 0..dim {
        for s in 0..8 {
            let mut v = vec![0.0; dim];
            v[c] = 1.0;
            v[(c + 1) % dim] = 0.01 * s as f64;
            rows.push(v);
            labels.push(c as i32);
        }
    }
    let data = Dataset::new(
        "separable",
        InputKind::Vector { dim },
        Matrix::from_rows(&rows).unwrap(),
        Some(labels),
    )
    .unwrap();
    let (_, manifest) = write_dataset(&data, dir).unwrap();

    let mut cfg = tiny_config(0);
    cfg.model.backbone_hidden = dim;
    cfg.model.head_hidden = dim;
    cfg.model.embed_dim = dim;
    let mut trainer = Trainer::new(cfg, data.kind).unwrap();
    let theta = &mut trainer.state.theta;
    for mlp in [&mut theta.backbone, &mut theta.projector, &mut theta.predictor] {
        for layer in &mut mlp.layers {
            layer.weight = Matrix::identity(dim);
            layer.bias.fill(0.0);
        }
    }
    let model = dir.join("identity.snap");
    snapshot::save(&trainer, &model).unwrap();
    (manifest, model)
}

#[test]
fn eval_on_separable_fixture_is_perfect() {
    let dir = TempDir::new().unwrap();
    let (manifest, model) = separable_fixture(dir.path());
    let report_path = dir.path().join("report.txt");
    let o = psco(&[
        "eval", "--model", p(&model), "--dataset", p(&manifest), "--way", "4", "--shot", "2",
        "--episodes", "20", "--queries", "3", "--out", p(&report_path),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: EvalReport = fs::read_to_string(&report_path).unwrap().trim().parse().unwrap();
    assert_eq!(report.mean_accuracy, 1.0);
    assert_eq!(report.ci95, 0.0);
    assert_eq!((report.n_way, report.k_shot, report.n_episodes), (4, 2, 20));
    assert_eq!(stdout(&o).trim(), report.to_string());
}

#[test]
fn eval_with_adaptation_runs() {
    let dir = TempDir::new().unwrap();
    let (manifest, model) = separable_fixture(dir.path());
    let o = psco(&[
        "eval", "--model", p(&model), "--dataset", p(&manifest), "--way", "3", "--shot", "2",
        "--episodes", "4", "--queries", "2", "--adapt", "5",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: EvalReport = stdout(&o).trim().parse().unwrap();
    assert_eq!(report.n_episodes, 4);
}

#[test]
fn train_with_zero_epochs_writes_initial_model() {
    let dir = TempDir::new().unwrap();
    let manifest = generated(dir.path());
    let config = dir.path().join("train.toml");
    fs::write(&config, tiny_config(0).to_toml()).unwrap();
    let out = dir.path().join("run");
    let o = psco(&["train", "--config", p(&config), "--dataset", p(&manifest), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let loaded = snapshot::load(&out.join("model.snap")).unwrap();
    let fresh = Trainer::new(tiny_config(0), InputKind::Vector { dim: 6 }).unwrap();
    assert_eq!(loaded.state, fresh.state);
    assert_eq!(loaded.queue, fresh.queue);
    assert_eq!(loaded.epoch, 0);
    assert_eq!(fs::read_to_string(out.join("metrics.log")).unwrap(), "");
}

#[test]
fn resumed_training_matches_continuous_run() {
    let dir = TempDir::new().unwrap();
    let manifest = generated(dir.path());
    let full_cfg = dir.path().join("full.toml");
    let half_cfg = dir.path().join("half.toml");
    fs::write(&full_cfg, tiny_config(3).to_toml()).unwrap();
    fs::write(&half_cfg, tiny_config(1).to_toml()).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));

    let o = psco(&["train", "--config", p(&full_cfg), "--dataset", p(&manifest), "--out", p(&a)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = psco(&["train", "--config", p(&half_cfg), "--dataset", p(&manifest), "--out", p(&b)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let snap = b.join("model.snap");
    let o = psco(&[
        "train", "--config", p(&full_cfg), "--dataset", p(&manifest), "--out", p(&b), "--resume", p(&snap),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let log_a = fs::read_to_string(a.join("metrics.log")).unwrap();
    assert_eq!(log_a, fs::read_to_string(b.join("metrics.log")).unwrap());
    assert_eq!(log_a.lines().count(), 3);
    for line in log_a.lines() {
        line.parse::<EpochRecord>().unwrap();
    }
    assert_eq!(fs::read(a.join("model.snap")).unwrap(), fs::read(b.join("model.snap")).unwrap());
}

#[test]
fn resume_with_different_config_is_rejected() {
    let dir = TempDir::new().unwrap();
    let manifest = generated(dir.path());
    let config = dir.path().join("c.toml");
    fs::write(&config, tiny_config(0).to_toml()).unwrap();
    let out = dir.path().join("run");
    assert!(psco(&["train", "--config", p(&config), "--dataset", p(&manifest), "--out", p(&out)]).status.success());
    let mut other = tiny_config(0);
    other.task.shots = 2;
    let other_path = dir.path().join("other.toml");
    fs::write(&other_path, other.to_toml()).unwrap();
    let o = psco(&[
        "train", "--config", p(&other_path), "--dataset", p(&manifest), "--out", p(&out), "--resume",
        p(&out.join("model.snap")),
    ]);
    assert!(!o.status.success());
    assert_eq!(stderr(&o).trim().lines().count(), 1);
}

#[test]
fn sweep_over_shots_emits_one_report_per_value() {
    let dir = TempDir::new().unwrap();
    let manifest = generated(dir.path());
    let config = dir.path().join("base.toml");
    fs::write(&config, tiny_config(1).to_toml()).unwrap();
    let grid = dir.path().join("grid.toml");
    fs::write(&grid, "shots = [1, 4, 16, 64]\n").unwrap();
    let out = dir.path().join("sweep");
    let o = psco(&[
        "sweep", "--config", p(&config), "--grid", p(&grid), "--dataset", p(&manifest), "--out", p(&out),
        "--way", "3", "--shot", "2", "--episodes", "5", "--queries", "3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = fs::read_to_string(out.join("sweep.txt")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines.len(), 4);
    for (line, k) in lines.iter().zip([1, 4, 16, 64]) {
        assert!(line.contains(&format!(" shots={k} ")), "{line}");
    }
    for i in 0..4 {
        let report = fs::read_to_string(out.join(format!("cell-{i:03}/report.txt"))).unwrap();
        let r: EvalReport = report.trim().parse().unwrap();
        assert_eq!((r.n_way, r.k_shot, r.n_episodes), (3, 2, 5));
    }
}

#[test]
fn gen_is_deterministic() {
    let (d1, d2) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let m1 = generated(d1.path());
    let m2 = generated(d2.path());
    assert_eq!(fs::read(&m1).unwrap(), fs::read(&m2).unwrap());
    assert_eq!(
        fs::read(d1.path().join("toy.f32")).unwrap(),
        fs::read(d2.path().join("toy.f32")).unwrap()
    );
}

#[test]
fn unknown_flag_fails_with_one_line() {
    let o = psco(&["eval", "--bogus", "1"]);
    assert!(!o.status.success());
    assert_eq!(stderr(&o).trim().lines().count(), 1, "{}", stderr(&o));
}

#[test]
fn unknown_config_key_fails_with_one_line() {
    let dir = TempDir::new().unwrap();
    let manifest = generated(dir.path());
    let config = dir.path().join("bad.toml");
    fs::write(&config, format!("{}\nsurprise = 1\n", tiny_config(0).to_toml())).unwrap();
    let o = psco(&["train", "--config", p(&config), "--dataset", p(&manifest), "--out", p(dir.path())]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    assert!(err.contains("surprise"), "{err}");
}

#[test]
fn unknown_grid_key_fails() {
    let dir = TempDir::new().unwrap();
    let manifest = generated(dir.path());
    let config = dir.path().join("base.toml");
    fs::write(&config, tiny_config(0).to_toml()).unwrap();
    let grid = dir.path().join("grid.toml");
    fs::write(&grid, "batch_size = [8]\n").unwrap();
    let o = psco(&[
        "sweep", "--config", p(&config), "--grid", p(&grid), "--dataset", p(&manifest), "--out", p(dir.path()),
    ]);
    assert!(!o.status.success());
    assert_eq!(stderr(&o).trim().lines().count(), 1);
}

#[test]
fn selfcheck_passes() {
    let o = psco(&["selfcheck"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let out = stdout(&o);
    assert!(out.lines().count() >= 10);
    assert!(out.lines().all(|l| l.starts_with("PASS ")), "{out}");
}

#[test]
fn config_presets_round_trip() {
    for preset in ["desk", "paper-omniglot", "paper-miniimagenet"] {
        let o = psco(&["config", "--preset", preset]);
        assert!(o.status.success());
        assert_eq!(TrainConfig::from_toml(&stdout(&o)).unwrap(), TrainConfig::preset(preset).unwrap());
    }
    assert!(!psco(&["config", "--preset", "huge"]).status.success());
}
