//! End-to-end runs of the command line on the tiny profile.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Process;
use std::sync::OnceLock;

use lsda::checkpoint::Checkpoint;
use lsda::cli::{self, Command, RunManifest, TRAIN_CONFIG_FILE};
use lsda::data::{read_png, Dataset, Split};
use lsda::eval::{read_embeddings, MetricsReport, Pca};
use lsda::trainer::{infer, read_jsonl, StepRecord, TrainConfig, FINAL_CHECKPOINT, METRICS_FILE};

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    fn config(&self) -> PathBuf {
        self.root.join("real").join(TRAIN_CONFIG_FILE)
    }
    fn ckpt(&self) -> PathBuf {
        self.root.join("run").join(FINAL_CHECKPOINT)
    }
}

/// generate → pretrain → train, shared by every test in this file.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let tiny = "tiny".parse().unwrap();
        let data = root.join("data");
        cli::run(Command::GenerateData { profile: tiny, seed: None, identities: None, out: data.clone() }).unwrap();
        cli::run(Command::PretrainReal { data, profile: tiny, epochs: None, seed: None, out: root.join("real") }).unwrap();
        let f = Fixture { _dir: dir, root };
        cli::run(Command::Train { config: f.config(), resume: None, out: Some(f.root.join("run")), stop_after: None }).unwrap();
        f
    })
}

fn lsda(args: &[&str]) -> (i32, String, String) {
    let out = Process::new(env!("CARGO_BIN_EXE_lsda")).args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn no_arguments_prints_usage_and_exits_2() {
    let (code, out, err) = lsda(&[]);
    assert_eq!(code, 2);
    assert!((out + &err).contains("Usage"));
    assert_eq!(lsda(&["frobnicate"]).0, 2);
}

#[test]
fn missing_config_exits_3_with_category() {
    let (code, _, err) = lsda(&["train", "--config", "bad.path"]);
    assert_eq!(code, 3);
    assert!(err.starts_with("error: config-not-found:"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
}

#[test]
fn zero_epochs_is_a_config_error() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let mut c = TrainConfig::load(&f.config()).unwrap();
    c.epochs = 0;
    let path = dir.path().join("zero.toml");
    fs::write(&path, c.to_toml().unwrap()).unwrap();
    let (code, _, err) = lsda(&["train", "--config", s(&path)]);
    assert_eq!(code, 3);
    assert!(err.starts_with("error: config-invalid:"), "{err}");
}

#[test]
fn runtime_failures_exit_4() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("bogus.ckpt");
    fs::write(&bogus, b"not a checkpoint").unwrap();
    let (code, _, err) = lsda(&["evaluate", "--ckpt", s(&bogus), "--manifest", s(&f.data()), "--out", s(dir.path())]);
    assert_eq!(code, 4);
    assert!(err.starts_with("error: corrupt-checkpoint:"), "{err}");
}

#[test]
fn pipeline_writes_manifests_and_reports() {
    let f = fixture();
    let out = tempfile::tempdir().unwrap();
    let eval = out.path().join("eval");
    let (code, stdout, err) =
        lsda(&["evaluate", "--ckpt", s(&f.ckpt()), "--manifest", s(&f.data().join("dataset.json")), "--out", s(&eval)]);
    assert_eq!(code, 0, "{err}");
    assert!(stdout.contains("held-out domain 5"));
    let reports: Vec<MetricsReport> = read_jsonl(&eval.join("reports.jsonl")).unwrap();
    let ds = Dataset::load(&f.data()).unwrap();
    let test = &ds.manifest.counts[&Split::Test];
    assert_eq!((reports[0].n_neg, reports[0].n_pos), (test[&0], test[&5]));
    assert!(reports.iter().all(|r| (0.0..=1.0).contains(&r.auc) && (0.0..=1.0).contains(&r.eer)));
    for dir in [f.data(), f.root.join("real"), f.root.join("run"), eval.clone()] {
        let m = RunManifest::load(&dir).unwrap();
        assert_eq!(m.manifest_hash, RunManifest::hash_of(&m.command, &m.config, m.seed, &m.inputs));
        for o in m.outputs.iter().filter(|o| !o.ends_with('/')) {
            assert!(dir.join(o).exists(), "{} lists missing output {o}", dir.display());
        }
    }

    let pe = out.path().join("perturb");
    let (code, _, err) = lsda(&["perturb-eval", "--ckpt", s(&f.ckpt()), "--manifest", s(&f.data()), "--out", s(&pe)]);
    assert_eq!(code, 0, "{err}");
    let rows: Vec<MetricsReport> = read_jsonl(&pe.join("robustness.jsonl")).unwrap();
    assert_eq!(rows.len(), 26);
    assert_eq!(rows[0].auc, reports[0].auc);
    assert_eq!(fs::read_to_string(pe.join("robustness.tsv")).unwrap().lines().count(), 27);
}

#[test]
fn reruns_with_equal_hash_reproduce_outputs() {
    let f = fixture();
    let out = tempfile::tempdir().unwrap();
    let (a, b) = (out.path().join("a"), out.path().join("b"));
    for dir in [&a, &b] {
        let (code, _, err) = lsda(&["evaluate", "--ckpt", s(&f.ckpt()), "--manifest", s(&f.data()), "--out", s(dir)]);
        assert_eq!(code, 0, "{err}");
    }
    assert_eq!(RunManifest::load(&a).unwrap().manifest_hash, RunManifest::load(&b).unwrap().manifest_hash);
    for file in ["reports.jsonl", "report.md"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap());
    }
}

#[test]
fn resume_matches_uninterrupted_run() {
    let f = fixture();
    let out = tempfile::tempdir().unwrap();
    let run = out.path().join("resumed");
    cli::run(Command::Train { config: f.config(), resume: None, out: Some(run.clone()), stop_after: Some(2) }).unwrap();
    let partial = run.join("checkpoints").join("step-000002.ckpt");
    assert!(partial.exists());
    cli::run(Command::Train { config: f.config(), resume: Some(partial), out: Some(run.clone()), stop_after: None }).unwrap();
    let resumed: Vec<StepRecord> = read_jsonl(&run.join(METRICS_FILE)).unwrap();
    let straight: Vec<StepRecord> = read_jsonl(&f.root.join("run").join(METRICS_FILE)).unwrap();
    assert_eq!(resumed.len(), straight.len());
    for (x, y) in resumed.iter().zip(&straight) {
        assert_eq!(x.step, y.step);
        assert!((x.total - y.total).abs() <= 1e-6, "step {}: {} vs {}", x.step, x.total, y.total);
    }
    let a = Checkpoint::load(&run.join(FINAL_CHECKPOINT)).unwrap();
    let b = Checkpoint::load(&f.ckpt()).unwrap();
    assert_eq!(a.header.config_hash, b.header.config_hash);
    assert_eq!(a.tensors, b.tensors);
}

#[test]
fn checkpoint_embeds_the_run_hash() {
    let f = fixture();
    let m = RunManifest::load(&f.root.join("run")).unwrap();
    let ckpt = Checkpoint::load(&f.ckpt()).unwrap();
    assert_eq!(m.summary["checkpoint_config_hash"], ckpt.header.config_hash);
}

fn test_images(f: &Fixture) -> Vec<lsda::data::Image> {
    let dir = f.data().join("images").join("test");
    let mut files: Vec<PathBuf> = fs::read_dir(&dir).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    files.iter().take(12).map(|p| read_png(p).unwrap()).collect()
}

#[test]
fn inference_uses_only_the_student() {
    let f = fixture();
    let images = test_images(f);
    let full = infer(&f.ckpt(), &images).unwrap();
    assert!(full.iter().all(|p| (0.0..=1.0).contains(p)));

    let ckpt = Checkpoint::load(&f.ckpt()).unwrap();
    let kept = ckpt
        .tensors
        .iter()
        .filter(|(n, _)| n.starts_with("student.") || n.starts_with("binary_head."))
        .map(|(n, t)| (n.clone(), t.clone()))
        .collect();
    assert!(ckpt.tensors.keys().any(|n| n.starts_with("teacher.")));
    let stripped = Checkpoint::new(&ckpt.header.kind, ckpt.header.config.clone(), ckpt.header.meta.clone(), kept);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("student.ckpt");
    stripped.save(&path).unwrap();
    assert_eq!(infer(&path, &images).unwrap(), full);

    let single: Vec<f64> = images.iter().flat_map(|im| infer(&f.ckpt(), std::slice::from_ref(im)).unwrap()).collect();
    for (a, b) in single.iter().zip(&full) {
        assert!((a - b).abs() <= 1e-6);
    }

    let out = dir.path().join("infer");
    let images_dir = f.data().join("images").join("test");
    let (code, _, err) = lsda(&["infer", "--ckpt", s(&path), "--images", s(&images_dir), "--out", s(&out)]);
    assert_eq!(code, 0, "{err}");
    let tsv = fs::read_to_string(out.join("predictions.tsv")).unwrap();
    let first: f64 = tsv.lines().nth(1).unwrap().split('\t').nth(1).unwrap().parse().unwrap();
    assert!((first - full[0]).abs() <= 1e-12);
}

#[test]
fn embeddings_reproject_from_saved_components() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("emb");
    cli::run(Command::ExportEmbeddings { ckpt: f.ckpt(), manifest: f.data(), split: Split::Test, out: out.clone() }).unwrap();
    let rows = read_embeddings(&out.join("embeddings.tsv")).unwrap();
    let ds = Dataset::load(&f.data()).unwrap();
    assert_eq!(rows.len(), ds.split_indices(Split::Test).len());
    let pca: Pca = serde_json::from_str(&fs::read_to_string(out.join("pca.json")).unwrap()).unwrap();
    assert!(pca.explained_variance[0] >= pca.explained_variance[1]);
    for r in &rows {
        let p = pca.project(&r.features);
        assert!((p[0] - r.projection[0]).abs() <= 1e-6 && (p[1] - r.projection[1]).abs() <= 1e-6);
    }
}

#[test]
fn ablate_command_emits_a_four_row_table() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ablate");
    let (code, stdout, err) = lsda(&["ablate", "--config", s(&f.config()), "--seeds", "1", "--out", s(&out)]);
    assert_eq!(code, 0, "{err}");
    assert!(stdout.contains("wd-on_cd-on"));
    let table = fs::read_to_string(out.join("ablation.md")).unwrap();
    assert_eq!(table.lines().filter(|l| l.starts_with('|')).count(), 2 + 4);
    assert_eq!(fs::read_to_string(out.join("ablation.jsonl")).unwrap().lines().count(), 4);
}
