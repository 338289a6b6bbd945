//! Command-line entry point.
//!
//! Every subcommand writes its artifacts plus a `run_manifest.json` under one
//! `--out` directory. The manifest hash covers the command, its resolved
//! settings and the content hashes of its inputs; paths and timings are
//! recorded but never hashed, so equal hashes mean equal outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::checkpoint::{json_hash, sha256_hex};
use crate::data::{read_png, Dataset, PerturbKind, Sample, Split, META_FILE, PERTURB_KINDS};
use crate::encoders::pretrain_real_encoder;
use crate::error::{Error, Result};
use crate::eval::{
    ablate, auc_drops, evaluate_held_out, evaluate_training_domains, export_embeddings, robustness_sweep,
    AblationCell, MetricsReport,
};
use crate::profiles::{pretraining_samples, Profile, ProfileName};
use crate::trainer::{
    load_detector, save_real_encoder, train_with, TrainConfig, TrainInputs, TrainOptions, EPOCHS_FILE, METRICS_FILE,
};

pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const REAL_ENCODER_FILE: &str = "real_encoder.ckpt";
pub const TRAIN_CONFIG_FILE: &str = "train.toml";

#[derive(Debug, Parser)]
#[command(name = "lsda", version, about = "Latent-space augmented distillation for forgery detection", arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic benchmark.
    GenerateData {
        #[arg(long, default_value = "tiny")]
        profile: ProfileName,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        identities: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the frozen real encoder on identity classification.
    PretrainReal {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "tiny")]
        profile: ProfileName,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train teachers, fusion layers and the student.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint of the same run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides `out_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Stop once this many optimizer steps are complete.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Fake probability for every PNG in a directory, using the student only.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Held-out and training-domain AUC/AP/EER.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory or its `dataset.json`.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        hold_out: Option<u8>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Held-out AUC under every perturbation kind and severity.
    PerturbEval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        hold_out: Option<u8>,
        /// Comma-separated kinds; all by default.
        #[arg(long, value_delimiter = ',')]
        kinds: Vec<PerturbKind>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// WD × CD ablation grid over seeds 0..k.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated cells out of baseline, wd, cd, full.
        #[arg(long, value_delimiter = ',', default_value = "baseline,wd,cd,full")]
        grid: Vec<CellName>,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Student features and their 2-D principal-component projection.
    ExportEmbeddings {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum CellName {
    Baseline,
    Wd,
    Cd,
    Full,
}

impl CellName {
    fn cell(self) -> AblationCell {
        let (wd, cd) = match self {
            CellName::Baseline => (false, false),
            CellName::Wd => (true, false),
            CellName::Cd => (false, true),
            CellName::Full => (true, true),
        };
        AblationCell { wd, cd }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Resolved settings, without filesystem locations.
    pub config: Value,
    pub seed: Option<u64>,
    /// Input name → SHA-256 of its content.
    pub inputs: BTreeMap<String, String>,
    pub manifest_hash: String,
    /// Written files, relative to the run directory.
    pub outputs: Vec<String>,
    pub paths: BTreeMap<String, PathBuf>,
    pub wall_seconds: f64,
    /// Headline numbers for quick inspection.
    pub summary: Value,
}

impl RunManifest {
    pub fn hash_of(command: &str, config: &Value, seed: Option<u64>, inputs: &BTreeMap<String, String>) -> String {
        json_hash(&json!({ "command": command, "config": config, "seed": seed, "inputs": inputs }))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(RUN_MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

struct Run {
    command: &'static str,
    config: Value,
    seed: Option<u64>,
    inputs: BTreeMap<String, String>,
    paths: BTreeMap<String, PathBuf>,
    started: Instant,
}

impl Run {
    fn new(command: &'static str, config: Value, seed: Option<u64>) -> Self {
        Run { command, config, seed, inputs: BTreeMap::new(), paths: BTreeMap::new(), started: Instant::now() }
    }

    fn input(mut self, name: &str, path: &Path, sha256: String) -> Self {
        self.inputs.insert(name.to_string(), sha256);
        self.paths.insert(name.to_string(), path.to_path_buf());
        self
    }

    fn finish(mut self, out: &Path, outputs: &[&str], summary: Value) -> Result<RunManifest> {
        self.paths.insert("out".into(), out.to_path_buf());
        let manifest = RunManifest {
            command: self.command.to_string(),
            manifest_hash: RunManifest::hash_of(self.command, &self.config, self.seed, &self.inputs),
            config: self.config,
            seed: self.seed,
            inputs: self.inputs,
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
            paths: self.paths,
            wall_seconds: self.started.elapsed().as_secs_f64(),
            summary,
        };
        write(&out.join(RUN_MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(manifest)
    }
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing(format!("{}", path.display())),
        _ => Error::io(path, e),
    })?;
    Ok(sha256_hex(&bytes))
}

/// `--manifest` may name the dataset directory or its metadata file.
fn dataset_dir(p: &Path) -> &Path {
    if p.file_name().is_some_and(|n| n == META_FILE) {
        p.parent().unwrap_or(Path::new("."))
    } else {
        p
    }
}

fn load_dataset(p: &Path) -> Result<Dataset> {
    Dataset::load(dataset_dir(p))
}

fn resolve_hold_out(ds: &Dataset, requested: Option<u8>) -> Result<u8> {
    requested
        .or(ds.manifest.hold_out())
        .ok_or_else(|| Error::Precondition("dataset has no held-out domain; pass --hold-out".into()))
}

fn jsonl<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

fn report_table(rows: &[(&str, &MetricsReport)]) -> String {
    let mut s = String::from("| protocol | level | domains | AUC | AP | EER | n_pos | n_neg |\n|---|---|---|---|---|---|---|---|\n");
    for (name, r) in rows {
        s.push_str(&format!(
            "| {name} | {:?} | {:?} | {:.4} | {:.4} | {:.4} | {} | {} |\n",
            r.level, r.domains, r.auc, r.ap, r.eer, r.n_pos, r.n_neg
        ));
    }
    s.push_str("\nGroup level ranks the mean fake probability of each (group, domain).\n");
    s
}

/// Parse `argv`, run the command, and map the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(line) => {
            println!("{line}");
            0
        }
        Err(e) => {
            eprintln!("error: {}: {}", e.category(), e.to_string().replace('\n', " "));
            if e.is_config() {
                3
            } else {
                4
            }
        }
    }
}

/// Execute one command; returns a one-line summary.
pub fn run(command: Command) -> Result<String> {
    match command {
        Command::GenerateData { profile, seed, identities, out } => {
            let mut config = Profile::get(profile).dataset;
            if let Some(s) = seed {
                config.seed = s;
            }
            if let Some(n) = identities {
                config.identities = n;
            }
            config.validate()?;
            let run = Run::new("generate-data", serde_json::to_value(&config)?, Some(config.seed));
            let mut ds = Dataset::generate(&config)?;
            ds.write(&out)?;
            let m = &ds.manifest;
            let summary = json!({ "samples": ds.samples.len(), "content_sha256": m.content_sha256 });
            run.finish(&out, &[META_FILE, crate::data::MANIFEST_FILE, "images/"], summary)?;
            Ok(format!("generated {} samples into {} (content {})", ds.samples.len(), out.display(), &m.content_sha256[..12]))
        }
        Command::PretrainReal { data, profile, epochs, seed, out } => {
            let p = Profile::get(profile);
            let mut pre = p.pretrain.clone();
            if let Some(e) = epochs {
                pre.epochs = e;
            }
            if let Some(s) = seed {
                pre.seed = s;
            }
            let ds = load_dataset(&data)?;
            let config = json!({ "profile": profile, "encoder": p.encoder, "pretrain": pre });
            let run = Run::new("pretrain-real", config.clone(), Some(pre.seed)).input(
                "dataset",
                &data,
                ds.manifest.content_sha256.clone(),
            );
            let (encoder, report) = pretrain_real_encoder(&pretraining_samples(&ds.samples), &p.encoder, &pre)?;
            let identity = json!({ "config": config, "dataset_sha256": ds.manifest.content_sha256 });
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let ckpt = out.join(REAL_ENCODER_FILE);
            save_real_encoder(&ckpt, &encoder, &p.encoder, &report, identity)?;
            write(&out.join("pretrain_report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
            let abs = |q: &Path| std::path::absolute(q).map_err(|e| Error::io(q, e));
            let template = p.train_config(abs(dataset_dir(&data))?, abs(&ckpt)?, PathBuf::from("run"));
            write(&out.join(TRAIN_CONFIG_FILE), template.to_toml()?)?;
            let summary = serde_json::to_value(&report)?;
            run.finish(&out, &[REAL_ENCODER_FILE, "pretrain_report.json", TRAIN_CONFIG_FILE], summary)?;
            Ok(format!(
                "real encoder: held-out identity accuracy {:.3} (chance {:.3}); wrote {}",
                report.heldout_accuracy,
                report.chance,
                ckpt.display()
            ))
        }
        Command::Train { config, resume, out, stop_after } => {
            let mut c = TrainConfig::load(&config)?;
            if let Some(o) = out {
                c.out_dir = o;
            }
            let inputs = TrainInputs::load(&c)?;
            let identity = c.run_identity(&inputs.dataset.manifest.content_sha256, &inputs.real_sha256);
            let mut settings = identity["train"].clone();
            settings["stop_after"] = json!(stop_after);
            let run = Run::new("train", settings, Some(c.seed))
                .input("dataset", &c.data_dir, inputs.dataset.manifest.content_sha256.clone())
                .input("real_encoder", &c.real_encoder, inputs.real_sha256.clone());
            let options = TrainOptions { resume, stop_after, skip_validation: false };
            let outcome = train_with(&c, &inputs, &options)?;
            let last = outcome.steps.last();
            let val = outcome.epochs.last().map(|e| e.val_auc);
            let ckpt_rel = outcome.checkpoint.strip_prefix(&c.out_dir).unwrap_or(&outcome.checkpoint).display().to_string();
            let summary = json!({
                "steps": outcome.state.step,
                "final_total_loss": last.map(|s| s.total),
                "final_val_auc": val,
                "checkpoint_config_hash": outcome.run_hash,
            });
            run.finish(&c.out_dir, &[METRICS_FILE, EPOCHS_FILE, &ckpt_rel], summary)?;
            Ok(format!(
                "trained {} steps; val auc {}; checkpoint {}",
                outcome.state.step,
                val.map_or("n/a".into(), |v| format!("{v:.4}")),
                outcome.checkpoint.display()
            ))
        }
        Command::Infer { ckpt, images, out } => {
            let mut files: Vec<PathBuf> = fs::read_dir(&images)
                .map_err(|e| Error::io(&images, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(Error::Missing(format!("no PNG files in {}", images.display())));
            }
            let mut listing = String::new();
            let mut decoded = Vec::with_capacity(files.len());
            for f in &files {
                let name = f.file_name().expect("file name").to_string_lossy().to_string();
                listing.push_str(&format!("{name}\t{}\n", file_sha256(f)?));
                decoded.push(read_png(f)?);
            }
            let run = Run::new("infer", json!({}), None)
                .input("checkpoint", &ckpt, file_sha256(&ckpt)?)
                .input("images", &images, sha256_hex(listing.as_bytes()));
            let probs = crate::trainer::infer(&ckpt, &decoded)?;
            let mut tsv = String::from("file\tfake_probability\n");
            for (f, p) in files.iter().zip(&probs) {
                tsv.push_str(&format!("{}\t{p}\n", f.file_name().expect("file name").to_string_lossy()));
            }
            write(&out.join("predictions.tsv"), tsv)?;
            let mean = probs.iter().sum::<f64>() / probs.len() as f64;
            run.finish(&out, &["predictions.tsv"], json!({ "images": probs.len(), "mean_probability": mean }))?;
            Ok(format!("scored {} images; mean fake probability {mean:.4}", probs.len()))
        }
        Command::Evaluate { ckpt, manifest, hold_out, out } => {
            let ds = load_dataset(&manifest)?;
            let j = resolve_hold_out(&ds, hold_out)?;
            let run = Run::new("evaluate", json!({ "hold_out": j }), None)
                .input("checkpoint", &ckpt, file_sha256(&ckpt)?)
                .input("dataset", &manifest, ds.manifest.content_sha256.clone());
            let det = load_detector(&ckpt)?;
            let held = evaluate_held_out(&det, &ds, j)?;
            let train_doms = evaluate_training_domains(&det, &ds)?;
            let rows: Vec<&MetricsReport> = held.iter().chain(&train_doms).collect();
            write(&out.join("reports.jsonl"), jsonl(&rows)?)?;
            let named: Vec<(&str, &MetricsReport)> = held
                .iter()
                .map(|r| ("held-out (test)", r))
                .chain(train_doms.iter().map(|r| ("training domains (val)", r)))
                .collect();
            write(&out.join("report.md"), report_table(&named))?;
            let summary = json!({ "held_out_auc": held[0].auc, "held_out_group_auc": held[1].auc, "training_domains_auc": train_doms[0].auc });
            run.finish(&out, &["reports.jsonl", "report.md"], summary)?;
            Ok(format!(
                "held-out domain {j}: auc {:.4} ap {:.4} eer {:.4} (group auc {:.4})",
                held[0].auc, held[0].ap, held[0].eer, held[1].auc
            ))
        }
        Command::PerturbEval { ckpt, manifest, hold_out, kinds, seed, out } => {
            let ds = load_dataset(&manifest)?;
            let j = resolve_hold_out(&ds, hold_out)?;
            let kinds = if kinds.is_empty() { PERTURB_KINDS.to_vec() } else { kinds };
            let run = Run::new("perturb-eval", json!({ "hold_out": j, "kinds": kinds }), Some(seed))
                .input("checkpoint", &ckpt, file_sha256(&ckpt)?)
                .input("dataset", &manifest, ds.manifest.content_sha256.clone());
            let det = load_detector(&ckpt)?;
            let rows = robustness_sweep(&det, &ds, j, &kinds, seed)?;
            write(&out.join("robustness.jsonl"), jsonl(&rows)?)?;
            let mut tsv = String::from("kind\tseverity\tauc\tap\teer\n");
            for r in &rows {
                let (k, s) = r.perturbation.as_ref().map_or(("clean".to_string(), 0), |p| (p.kind.to_string(), p.severity));
                tsv.push_str(&format!("{k}\t{s}\t{}\t{}\t{}\n", r.auc, r.ap, r.eer));
            }
            write(&out.join("robustness.tsv"), tsv)?;
            let drops: BTreeMap<String, f64> = auc_drops(&rows).into_iter().map(|(k, d)| (k.to_string(), d)).collect();
            run.finish(&out, &["robustness.jsonl", "robustness.tsv"], json!({ "clean_auc": rows[0].auc, "auc_drop": drops }))?;
            Ok(format!("{} rows; clean auc {:.4}", rows.len(), rows[0].auc))
        }
        Command::Ablate { config, grid, seeds, out } => {
            if seeds == 0 {
                return Err(Error::Config("--seeds must be at least 1".into()));
            }
            let base = TrainConfig::load(&config)?;
            let inputs = TrainInputs::load(&base)?;
            let cells: Vec<AblationCell> = grid.iter().map(|c| c.cell()).collect();
            let seed_list: Vec<u64> = (0..seeds).collect();
            let identity = base.run_identity(&inputs.dataset.manifest.content_sha256, &inputs.real_sha256);
            let settings = json!({ "base": identity["train"], "cells": cells, "seeds": seed_list });
            let run = Run::new("ablate", settings, None)
                .input("dataset", &base.data_dir, inputs.dataset.manifest.content_sha256.clone())
                .input("real_encoder", &base.real_encoder, inputs.real_sha256.clone());
            let table = ablate(&base, &inputs, &seed_list, &cells, &out)?;
            let runs: Vec<Value> = table
                .runs
                .iter()
                .map(|r| json!({ "cell": r.cell.name(), "seed": r.seed, "frame": r.frame, "group": r.group }))
                .collect();
            write(&out.join("ablation.jsonl"), jsonl(&runs)?)?;
            write(&out.join("ablation.md"), table.to_markdown())?;
            let summary: BTreeMap<String, f64> = table.cells.iter().map(|c| (c.cell.name(), c.auc_mean)).collect();
            run.finish(&out, &["ablation.jsonl", "ablation.md"], json!({ "auc_mean": summary }))?;
            let line: Vec<String> = summary.iter().map(|(k, v)| format!("{k} {v:.4}")).collect();
            Ok(format!("mean held-out auc: {}", line.join(", ")))
        }
        Command::ExportEmbeddings { ckpt, manifest, split, out } => {
            let ds = load_dataset(&manifest)?;
            let run = Run::new("export-embeddings", json!({ "split": split }), None)
                .input("checkpoint", &ckpt, file_sha256(&ckpt)?)
                .input("dataset", &manifest, ds.manifest.content_sha256.clone());
            let det = load_detector(&ckpt)?;
            let samples: Vec<&Sample> = ds.samples.iter().filter(|s| s.split == split).collect();
            let (rows, pca) = export_embeddings(&det, &samples, &out)?;
            let summary = json!({ "rows": rows.len(), "explained_variance": pca.explained_variance });
            run.finish(&out, &[crate::eval::embed::EMBEDDINGS_FILE, crate::eval::embed::PCA_FILE], summary)?;
            Ok(format!("exported {} embeddings", rows.len()))
        }
    }
}
