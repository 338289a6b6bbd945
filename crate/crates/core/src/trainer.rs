//! Joint teacher/student training loop, run state and checkpoint plumbing.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::augment::{augment_domain_batch, AugmentConfig, AugmentDraw};
use crate::autograd::{NodeId, Tape};
use crate::checkpoint::{json_hash, sha256_hex, Checkpoint};
use crate::data::{epoch_batches, Dataset, Image, Split};
use crate::encoders::{
    prepare_images, sample_images, EncoderSpec, FrozenEncoder, LsdaModel, ParamGroup, PretrainReport,
    StudentDetector,
};
use crate::error::{Error, Result};
use crate::eval::{ap, auc, eer};
use crate::losses::{binary_loss, distill_loss, domain_loss, total_loss, LossBreakdown, LossWeights};
use crate::optim::Adam;
use crate::rng;
use crate::tensor::Tensor;

pub const MODEL_KIND: &str = "lsda-model";
pub const REAL_ENCODER_KIND: &str = "real-encoder";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const EPOCHS_FILE: &str = "epochs.jsonl";
pub const TRACE_FILE: &str = "augment_trace.jsonl";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";
const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Teachers, augmentation, fusion and distillation.
    Lsda,
    /// Student and binary head trained on the binary loss alone.
    StudentOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// One update of every trainable parameter per step.
    Joint,
    /// Even steps update the teacher side, odd steps the student side.
    Alternating,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub data_dir: PathBuf,
    pub real_encoder: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_identities: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default = "default_schedule")]
    pub schedule: Schedule,
    #[serde(default)]
    pub detach_targets: bool,
    /// Save a numbered checkpoint every this many steps; 0 keeps only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub trace_augment: bool,
    #[serde(default)]
    pub loss_weights: LossWeights,
    #[serde(default)]
    pub augment: AugmentConfig,
}

fn default_batch() -> usize {
    8
}
fn default_lr() -> f64 {
    3e-3
}
fn default_variant() -> Variant {
    Variant::Lsda
}
fn default_schedule() -> Schedule {
    Schedule::Joint
}

impl TrainConfig {
    pub fn new(data_dir: PathBuf, real_encoder: PathBuf, out_dir: PathBuf, epochs: usize) -> Self {
        TrainConfig {
            data_dir,
            real_encoder,
            out_dir,
            seed: 0,
            epochs,
            batch_identities: default_batch(),
            learning_rate: default_lr(),
            variant: Variant::Lsda,
            schedule: Schedule::Joint,
            detach_targets: false,
            checkpoint_every: 0,
            trace_augment: false,
            loss_weights: LossWeights::default(),
            augment: AugmentConfig::default(),
        }
    }

    /// Parse TOML; relative paths are taken relative to `base`.
    pub fn from_toml_str(text: &str, base: &Path) -> Result<Self> {
        let mut c: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for p in [&mut c.data_dir, &mut c.real_encoder, &mut c.out_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::ConfigNotFound(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        Self::from_toml_str(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_identities < 2 {
            return Err(Error::Config(format!("batch_identities must be at least 2, got {}", self.batch_identities)));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        self.loss_weights.validate()?;
        self.augment.validate()
    }

    /// Everything that determines the run's numbers: the config without
    /// filesystem locations, plus content hashes of the two inputs.
    pub fn run_identity(&self, dataset_sha256: &str, real_encoder_sha256: &str) -> serde_json::Value {
        let mut cfg = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = cfg.as_object_mut() {
            for k in ["data_dir", "real_encoder", "out_dir"] {
                obj.remove(k);
            }
        }
        json!({ "train": cfg, "dataset_sha256": dataset_sha256, "real_encoder_sha256": real_encoder_sha256 })
    }

    pub fn loss_settings(&self) -> LossSettings {
        LossSettings {
            variant: self.variant,
            weights: self.loss_weights,
            augment: self.augment.clone(),
            detach_targets: self.detach_targets,
        }
    }
}

/// What a single loss evaluation needs besides parameters and images.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSettings {
    pub variant: Variant,
    pub weights: LossWeights,
    pub augment: AugmentConfig,
    pub detach_targets: bool,
}

/// Loss value, gradients of every parameter on the tape, and diagnostics.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub breakdown: LossBreakdown,
    pub grads: BTreeMap<String, Tensor>,
    pub draws: Vec<AugmentDraw>,
    /// Mean per-domain MSE between student features and distillation targets.
    pub domain_mse: Vec<f64>,
}

fn norms(tape: &Tape, nodes: &[NodeId]) -> Vec<f64> {
    nodes.iter().map(|n| tape.value(*n).l2_norm()).collect()
}

fn divergence(err: Error, draws: &[AugmentDraw], feature_norms: &[f64]) -> Error {
    match err {
        Error::Divergence(msg) => Error::Divergence(format!(
            "{msg}; teacher feature norms {feature_norms:?}; augmentation draws {}",
            serde_json::to_string(draws).unwrap_or_default()
        )),
        other => other,
    }
}

/// Build the full objective for one identity-aligned batch and differentiate it.
///
/// `images[k]` holds the images of model label `k` (0 = real), all lists in
/// the same identity order; `domains[k]` is the benchmark domain id used to
/// seed and trace augmentation.
pub fn evaluate_loss(
    model: &LsdaModel,
    images: &[Vec<&Image>],
    domains: &[u8],
    settings: &LossSettings,
    augment_seed: u64,
) -> Result<LossEval> {
    let d = images.len();
    if d != model.num_domains() || domains.len() != d {
        return Err(Error::Shape(format!("{d} domain lists for a {}-domain model", model.num_domains())));
    }
    let b = images[0].len();
    if b == 0 || images.iter().any(|l| l.len() != b) {
        return Err(Error::Shape("domain lists must be non-empty and identity-aligned".into()));
    }
    let mut tape = Tape::new();
    let inputs: Vec<NodeId> =
        images.iter().map(|l| prepare_images(l).map(|x| tape.constant(x))).collect::<Result<_>>()?;
    let student = model.student.bind(&mut tape, "student", true);
    let binary_head = model.binary_head.bind(&mut tape, "binary_head");
    let student_feats: Vec<NodeId> = inputs.iter().map(|x| student.forward(&mut tape, *x)).collect::<Result<_>>()?;
    let all_student = tape.cat_batch(&student_feats)?;
    let scores = binary_head.forward(&mut tape, all_student)?;
    let labels: Vec<f64> = (0..d).flat_map(|k| std::iter::repeat_n(f64::from(k != 0), b)).collect();
    let bin = binary_loss(&mut tape, scores, labels)?;

    let (dom, dis, draws, domain_mse, feature_norms) = match settings.variant {
        Variant::StudentOnly => {
            let zero = tape.constant(Tensor::scalar(0.0));
            (zero, zero, vec![], vec![], vec![])
        }
        Variant::Lsda => {
            let teacher_feats: Vec<NodeId> = model
                .teachers
                .iter()
                .enumerate()
                .map(|(k, t)| t.bind(&mut tape, &format!("teacher.{k}"), true).forward(&mut tape, inputs[k]))
                .collect::<Result<_>>()?;
            let feature_norms = norms(&tape, &teacher_feats);
            let domain_head = model.domain_head.bind(&mut tape, "domain_head");
            let logits: Vec<NodeId> =
                teacher_feats.iter().map(|z| domain_head.forward(&mut tape, *z)).collect::<Result<_>>()?;
            let all_logits = tape.cat_batch(&logits)?;
            let dom = domain_loss(&mut tape, all_logits, (0..d).flat_map(|k| std::iter::repeat_n(k, b)).collect())?;

            let real_target = model.real.forward(&mut tape, inputs[0])?;
            let fakes: Vec<(u8, NodeId)> = (1..d).map(|k| (domains[k], teacher_feats[k])).collect();
            let fusion_aug = model.fusion_aug.bind(&mut tape, "fusion_aug");
            let fusion_final = model.fusion_final.bind(&mut tape, "fusion_final");
            let (fused, draws) =
                augment_domain_batch(&mut tape, &fakes, &settings.augment, &fusion_aug, &fusion_final, augment_seed)?;
            let mut targets = vec![real_target];
            targets.extend(fused);
            if settings.detach_targets {
                targets = targets.into_iter().map(|t| tape.detach(t)).collect();
            }
            let pairs: Vec<(NodeId, NodeId)> = student_feats.iter().copied().zip(targets).collect();
            let dis = distill_loss(&mut tape, &pairs)?;
            let mse: Vec<f64> = pairs
                .iter()
                .map(|(s, t)| {
                    let (s, t) = (tape.value(*s), tape.value(*t));
                    s.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / s.numel() as f64
                })
                .collect();
            (dom, dis, draws, mse, feature_norms)
        }
    };
    let (total, breakdown) =
        total_loss(&mut tape, bin, dom, dis, &settings.weights).map_err(|e| divergence(e, &draws, &feature_norms))?;
    let g = tape.backward(total)?;
    let grads = tape.params().iter().map(|(n, id)| (n.clone(), g.get_or_zero(*id))).collect();
    Ok(LossEval { breakdown, grads, draws, domain_mse })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub binary: f64,
    pub domain: f64,
    pub distill: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub step: u64,
    pub val_auc: f64,
    pub val_ap: f64,
    pub val_eer: f64,
}

/// Everything needed to continue a run exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    /// Number of completed optimizer steps.
    pub step: u64,
    pub model: LsdaModel,
    pub optimizer: Adam,
}

fn step_updates(group: ParamGroup, schedule: Schedule, step: u64) -> bool {
    match schedule {
        Schedule::Joint => true,
        Schedule::Alternating => {
            let student_side = matches!(group, ParamGroup::Student | ParamGroup::BinaryHead);
            student_side == (step % 2 == 1)
        }
    }
}

/// Seed of the augmentation draws at a given step.
pub fn augment_seed(seed: u64, step: u64) -> u64 {
    rng::derive(seed, "augment-step", step)
}

impl RunState {
    pub fn new(model: LsdaModel, learning_rate: f64) -> Self {
        RunState { step: 0, model, optimizer: Adam::new(learning_rate) }
    }

    /// One optimizer update on an identity-aligned batch.
    pub fn train_step(
        &mut self,
        images: &[Vec<&Image>],
        domains: &[u8],
        settings: &LossSettings,
        schedule: Schedule,
        seed: u64,
    ) -> Result<LossEval> {
        let eval = evaluate_loss(&self.model, images, domains, settings, augment_seed(seed, self.step))?;
        if let Some(name) = eval.grads.keys().find(|n| ParamGroup::of(n) == Some(ParamGroup::Real)) {
            return Err(Error::Consistency(format!("frozen parameter {name} received a gradient")));
        }
        let step = self.step;
        let grads: BTreeMap<String, Tensor> = eval
            .grads
            .iter()
            .filter(|(n, _)| ParamGroup::of(n).is_some_and(|g| step_updates(g, schedule, step)))
            .map(|(n, g)| (n.clone(), g.clone()))
            .collect();
        self.optimizer.update(self.model.trainable_params_mut(), &grads);
        self.step += 1;
        Ok(eval)
    }

    pub fn to_checkpoint(&self, identity: &serde_json::Value, train_domains: &[u8], epoch: u64) -> Checkpoint {
        let mut tensors = self.model.to_tensors();
        tensors.extend(self.optimizer.moment_tensors());
        let meta = json!({
            "step": self.step,
            "epoch": epoch,
            "spec": self.model.spec,
            "num_domains": self.model.num_domains(),
            "train_domains": train_domains,
            "optimizer": self.optimizer,
        });
        Checkpoint::new(MODEL_KIND, identity.clone(), meta, tensors)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(MODEL_KIND)?;
        let spec: EncoderSpec = ckpt.meta("spec")?;
        let model = LsdaModel::from_tensors(&spec, ckpt.meta("num_domains")?, &ckpt.tensors)?;
        let mut optimizer: Adam = ckpt.meta("optimizer")?;
        optimizer.restore_moments(&ckpt.tensors)?;
        Ok(RunState { step: ckpt.meta("step")?, model, optimizer })
    }
}

/// Load the student-only network from a model checkpoint. Teacher, fusion
/// and real-encoder tensors may be absent.
pub fn load_detector(path: &Path) -> Result<StudentDetector> {
    let ckpt = Checkpoint::load(path)?;
    ckpt.expect_kind(MODEL_KIND)?;
    StudentDetector::from_tensors(&ckpt.meta("spec")?, &ckpt.tensors)
}

/// Fake probability per image using only the student path.
pub fn infer(checkpoint: &Path, images: &[Image]) -> Result<Vec<f64>> {
    let det = load_detector(checkpoint)?;
    det.probabilities(&images.iter().collect::<Vec<_>>(), EVAL_CHUNK)
}

pub fn save_real_encoder(
    path: &Path,
    encoder: &FrozenEncoder,
    spec: &EncoderSpec,
    report: &PretrainReport,
    identity: serde_json::Value,
) -> Result<()> {
    let meta = json!({ "spec": spec, "report": report });
    Checkpoint::new(REAL_ENCODER_KIND, identity, meta, encoder.to_tensors()).save(path)
}

/// The frozen encoder, its architecture, and the SHA-256 of the file.
pub fn load_real_encoder(path: &Path) -> Result<(FrozenEncoder, EncoderSpec, String)> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing(format!("pretrained real encoder {}", path.display())),
        _ => Error::io(path, e),
    })?;
    let ckpt = Checkpoint::from_bytes(&bytes, path)?;
    ckpt.expect_kind(REAL_ENCODER_KIND)?;
    let spec: EncoderSpec = ckpt.meta("spec")?;
    Ok((FrozenEncoder::from_tensors(&ckpt.tensors)?, spec, sha256_hex(&bytes)))
}

/// Score every sample of a split with the student and compute AUC/AP/EER of
/// fake vs real.
pub fn split_metrics(det: &StudentDetector, ds: &Dataset, split: Split) -> Result<(f64, f64, f64)> {
    let idx = ds.split_indices(split);
    let images: Vec<&Image> = idx.iter().map(|i| &ds.samples[*i].image).collect();
    let labels: Vec<bool> = idx.iter().map(|i| ds.samples[*i].is_fake()).collect();
    let probs = det.probabilities(&images, EVAL_CHUNK)?;
    Ok((auc(&probs, &labels)?, ap(&probs, &labels)?, eer(&probs, &labels)?))
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub resume: Option<PathBuf>,
    /// Stop (and checkpoint) once this many steps are complete.
    pub stop_after: Option<u64>,
    /// Skip the per-epoch validation pass.
    pub skip_validation: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub checkpoint: PathBuf,
    pub run_hash: String,
    pub state: RunState,
}

fn append_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(r)?);
        buf.push('\n');
    }
    f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// Keep only records satisfying `keep`, rewriting the file.
fn truncate_jsonl<T: Serialize + serde::de::DeserializeOwned>(path: &Path, keep: impl Fn(&T) -> bool) -> Result<Vec<T>> {
    let kept: Vec<T> = if path.exists() { read_jsonl::<T>(path)?.into_iter().filter(|r| keep(r)).collect() } else { vec![] };
    fs::write(path, "").map_err(|e| Error::io(path, e))?;
    append_jsonl(path, &kept)?;
    Ok(kept)
}

/// A dataset plus pretrained real encoder, ready to train on.
pub struct TrainInputs {
    pub dataset: Dataset,
    pub real: FrozenEncoder,
    pub spec: EncoderSpec,
    pub real_sha256: String,
}

impl TrainInputs {
    pub fn load(config: &TrainConfig) -> Result<Self> {
        if !config.data_dir.exists() {
            return Err(Error::Missing(format!("dataset directory {}", config.data_dir.display())));
        }
        let dataset = Dataset::load(&config.data_dir)?;
        let (real, spec, real_sha256) = load_real_encoder(&config.real_encoder)?;
        Ok(TrainInputs { dataset, real, spec, real_sha256 })
    }
}

/// Run (or resume) training as configured. Writes step metrics, per-epoch
/// validation metrics and checkpoints under `config.out_dir`.
pub fn train(config: &TrainConfig, options: &TrainOptions) -> Result<TrainOutcome> {
    let inputs = TrainInputs::load(config)?;
    train_with(config, &inputs, options)
}

pub fn train_with(config: &TrainConfig, inputs: &TrainInputs, options: &TrainOptions) -> Result<TrainOutcome> {
    config.validate()?;
    let ds = &inputs.dataset;
    let manifest = &ds.manifest;
    if manifest.config.height != inputs.spec.height || manifest.config.width != inputs.spec.width {
        return Err(Error::Consistency(format!(
            "dataset images are {}x{} but the real encoder expects {}x{}",
            manifest.config.height, manifest.config.width, inputs.spec.height, inputs.spec.width
        )));
    }
    let identity = config.run_identity(&manifest.content_sha256, &inputs.real_sha256);
    let run_hash = json_hash(&identity);
    let train_domains = manifest.train_domains.clone();
    let settings = config.loss_settings();

    let out = &config.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let metrics_path = out.join(METRICS_FILE);
    let epochs_path = out.join(EPOCHS_FILE);
    let trace_path = out.join(TRACE_FILE);

    let (mut state, mut steps, mut epochs) = match &options.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.header.config_hash != run_hash {
                return Err(Error::Consistency(format!(
                    "checkpoint {} was produced by a different config or inputs",
                    path.display()
                )));
            }
            let state = RunState::from_checkpoint(&ckpt)?;
            let done = state.step;
            let steps = truncate_jsonl::<StepRecord>(&metrics_path, |r| r.step <= done)?;
            let epochs = truncate_jsonl::<EpochRecord>(&epochs_path, |r| r.step <= done)?;
            if config.trace_augment {
                truncate_jsonl::<serde_json::Value>(&trace_path, |r| r["step"].as_u64().is_some_and(|s| s < done))?;
            }
            (state, steps, epochs)
        }
        None => {
            let spec = EncoderSpec { init_seed: config.seed, ..inputs.spec.clone() };
            let model = LsdaModel::new(&spec, train_domains.len(), inputs.real.clone())?;
            for p in [&metrics_path, &epochs_path, &trace_path] {
                if p.exists() {
                    fs::remove_file(p).map_err(|e| Error::io(p, e))?;
                }
            }
            (RunState::new(model, config.learning_rate), vec![], vec![])
        }
    };

    let ckpt_dir = out.join("checkpoints");
    let mut global = 0u64;
    'epochs: for epoch in 0..config.epochs as u64 {
        let batches = epoch_batches(ds, Split::Train, config.batch_identities, config.seed, epoch)?;
        let epoch_end = global + batches.len() as u64;
        if epoch_end <= state.step {
            global = epoch_end;
            continue;
        }
        for batch in batches {
            if global < state.step {
                global += 1;
                continue;
            }
            if batch.domains != train_domains {
                return Err(Error::Consistency(format!(
                    "batch domains {:?} differ from training domains {train_domains:?}",
                    batch.domains
                )));
            }
            let images: Vec<Vec<&Image>> = batch.lists.iter().map(|l| sample_images(l)).collect();
            let eval = state.train_step(&images, &batch.domains, &settings, config.schedule, config.seed)?;
            global += 1;
            let b = eval.breakdown;
            let rec = StepRecord { step: state.step, epoch, binary: b.binary, domain: b.domain, distill: b.distill, total: b.total };
            append_jsonl(&metrics_path, std::slice::from_ref(&rec))?;
            steps.push(rec);
            if config.trace_augment {
                append_jsonl(&trace_path, &[json!({ "step": state.step - 1, "draws": eval.draws })])?;
            }
            if config.checkpoint_every > 0 && state.step % config.checkpoint_every as u64 == 0 {
                state
                    .to_checkpoint(&identity, &train_domains, epoch)
                    .save(&ckpt_dir.join(format!("step-{:06}.ckpt", state.step)))?;
            }
            if options.stop_after.is_some_and(|s| state.step >= s) && global < epoch_end {
                break 'epochs;
            }
        }
        if !options.skip_validation {
            let (val_auc, val_ap, val_eer) = split_metrics(&state.model.detector(), ds, Split::Val)?;
            let rec = EpochRecord { epoch, step: state.step, val_auc, val_ap, val_eer };
            append_jsonl(&epochs_path, std::slice::from_ref(&rec))?;
            epochs.push(rec);
        }
        if options.stop_after.is_some_and(|s| state.step >= s) {
            break;
        }
    }
    let last_epoch = steps.last().map_or(0, |r| r.epoch);
    let path = if state.step < global_total(ds, config)? {
        ckpt_dir.join(format!("step-{:06}.ckpt", state.step))
    } else {
        out.join(FINAL_CHECKPOINT)
    };
    state.to_checkpoint(&identity, &train_domains, last_epoch).save(&path)?;
    Ok(TrainOutcome { steps, epochs, checkpoint: path, run_hash, state })
}

/// Total optimizer steps of a full run.
pub fn global_total(ds: &Dataset, config: &TrainConfig) -> Result<u64> {
    let mut n = 0;
    for epoch in 0..config.epochs as u64 {
        n += epoch_batches(ds, Split::Train, config.batch_identities, config.seed, epoch)?.len() as u64;
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::Encoder;

    fn tiny_model() -> LsdaModel {
        let spec = EncoderSpec { height: 8, width: 8, widths: vec![3, 2], init_seed: 4 };
        let real = FrozenEncoder::freeze(Encoder::init(&spec, &mut rng::stream(1, "real", 0)));
        LsdaModel::new(&spec, 3, real).unwrap()
    }

    fn tiny_images() -> Vec<Vec<Image>> {
        let mut r = rng::stream(2, "imgs", 0);
        use rand::Rng as _;
        (0..3)
            .map(|_| {
                (0..4)
                    .map(|_| Image { height: 8, width: 8, data: (0..192).map(|_| r.random_range(0.0..1.0)).collect() })
                    .collect()
            })
            .collect()
    }

    fn refs(imgs: &[Vec<Image>]) -> Vec<Vec<&Image>> {
        imgs.iter().map(|l| l.iter().collect()).collect()
    }

    fn settings() -> LossSettings {
        TrainConfig::new("d".into(), "r".into(), "o".into(), 1).loss_settings()
    }

    #[test]
    fn zero_weights_leave_parameters_unchanged() {
        let imgs = tiny_images();
        let mut state = RunState::new(tiny_model(), 1e-2);
        let before = state.model.clone();
        let s = LossSettings { weights: LossWeights { binary: 0.0, domain: 0.0, distill: 0.0 }, ..settings() };
        state.train_step(&refs(&imgs), &[0, 1, 2], &s, Schedule::Joint, 0).unwrap();
        assert_eq!(state.model, before);
    }

    #[test]
    fn trainable_set_is_stable_and_real_encoder_frozen() {
        let imgs = tiny_images();
        let mut state = RunState::new(tiny_model(), 1e-2);
        let real_before = state.model.real.clone();
        let mut names = None;
        for _ in 0..3 {
            let eval = state.train_step(&refs(&imgs), &[0, 1, 2], &settings(), Schedule::Joint, 5).unwrap();
            let keys: Vec<String> = eval.grads.keys().cloned().collect();
            assert!(keys.iter().all(|k| !k.starts_with("real.")));
            if let Some(prev) = &names {
                assert_eq!(prev, &keys);
            }
            names = Some(keys);
        }
        assert_eq!(state.model.real, real_before);
        let expected = state.model.clone().trainable_params_mut().len();
        assert_eq!(names.unwrap().len(), expected);
    }

    #[test]
    fn identical_seeds_give_identical_losses() {
        let imgs = tiny_images();
        let run = || {
            let mut state = RunState::new(tiny_model(), 1e-2);
            (0..4)
                .map(|_| state.train_step(&refs(&imgs), &[0, 1, 2], &settings(), Schedule::Joint, 9).unwrap().breakdown)
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn loss_decreases_on_a_fixed_batch() {
        let imgs = tiny_images();
        let mut gains = 0.0;
        for seed in 0..3 {
            let mut state = RunState::new(tiny_model(), 1e-2);
            let first = state.train_step(&refs(&imgs), &[0, 1, 2], &settings(), Schedule::Joint, seed).unwrap();
            let mut last = first.breakdown.total;
            for _ in 1..50 {
                last = state.train_step(&refs(&imgs), &[0, 1, 2], &settings(), Schedule::Joint, seed).unwrap().breakdown.total;
            }
            gains += first.breakdown.total - last;
        }
        assert!(gains > 0.0, "total loss did not decrease on average: {gains}");
    }

    #[test]
    fn alternating_schedule_splits_updates() {
        let imgs = tiny_images();
        let mut state = RunState::new(tiny_model(), 1e-2);
        let before = state.model.clone();
        state.train_step(&refs(&imgs), &[0, 1, 2], &settings(), Schedule::Alternating, 0).unwrap();
        assert_eq!(state.model.student, before.student);
        assert_ne!(state.model.teachers, before.teachers);
        let mid = state.model.clone();
        state.train_step(&refs(&imgs), &[0, 1, 2], &settings(), Schedule::Alternating, 0).unwrap();
        assert_eq!(state.model.teachers, mid.teachers);
        assert_ne!(state.model.student, mid.student);
    }

    #[test]
    fn student_only_touches_student_side() {
        let imgs = tiny_images();
        let mut state = RunState::new(tiny_model(), 1e-2);
        let s = LossSettings { variant: Variant::StudentOnly, ..settings() };
        let eval = state.train_step(&refs(&imgs), &[0, 1, 2], &s, Schedule::Joint, 0).unwrap();
        assert!(eval.grads.keys().all(|k| k.starts_with("student.") || k.starts_with("binary_head.")));
        assert_eq!((eval.breakdown.domain, eval.breakdown.distill), (0.0, 0.0));
    }

    #[test]
    fn checkpoint_round_trip_restores_state() {
        let imgs = tiny_images();
        let mut state = RunState::new(tiny_model(), 1e-2);
        state.train_step(&refs(&imgs), &[0, 1, 2], &settings(), Schedule::Joint, 0).unwrap();
        let ckpt = state.to_checkpoint(&json!({"x": 1}), &[0, 1, 2], 0);
        let bytes = ckpt.to_bytes().unwrap();
        let back = RunState::from_checkpoint(&Checkpoint::from_bytes(&bytes, Path::new("m")).unwrap()).unwrap();
        assert_eq!(back, state);
    }

    #[test]
    fn config_parsing_and_validation() {
        let base = Path::new("/tmp/base");
        let text = "data_dir = \"data\"\nreal_encoder = \"/abs/real.ckpt\"\nout_dir = \"run\"\nepochs = 2\n\n[augment]\ncd_enabled = false\n";
        let c = TrainConfig::from_toml_str(text, base).unwrap();
        assert_eq!(c.data_dir, base.join("data"));
        assert_eq!(c.real_encoder, PathBuf::from("/abs/real.ckpt"));
        assert!(!c.augment.cd_enabled && c.augment.wd_enabled);
        assert_eq!(c.loss_weights, LossWeights::default());
        let zero = text.replace("epochs = 2", "epochs = 0");
        assert!(matches!(TrainConfig::from_toml_str(&zero, base), Err(Error::Config(_))));
        let unknown = format!("{text}\nbogus = 1\n");
        assert!(TrainConfig::from_toml_str(&unknown.replace("[augment]\ncd_enabled = false\n", ""), base).is_err());
        let back = TrainConfig::from_toml_str(&c.to_toml().unwrap(), Path::new("/")).unwrap();
        assert_eq!(back, c);
        let missing = TrainConfig::load(Path::new("/nonexistent/bad.path")).unwrap_err();
        assert_eq!(missing.category(), "config-not-found");
        let id1 = c.run_identity("a", "b");
        let moved = TrainConfig { out_dir: "/elsewhere".into(), ..c.clone() };
        assert_eq!(json_hash(&id1), json_hash(&moved.run_identity("a", "b")));
        assert_ne!(json_hash(&id1), json_hash(&c.run_identity("a", "c")));
    }

    #[test]
    fn non_finite_loss_reports_divergence() {
        let mut model = tiny_model();
        model.student.layers[0].weight.data_mut()[0] = f64::NAN;
        let imgs = tiny_images();
        let err = evaluate_loss(&model, &refs(&imgs), &[0, 1, 2], &settings(), 0).unwrap_err();
        assert_eq!(err.category(), "training-divergence");
        assert!(err.to_string().contains("feature norms"));
    }
}
