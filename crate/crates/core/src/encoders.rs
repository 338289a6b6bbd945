//! Teacher, student and real encoders, the two heads and the fusion convolutions.
//!
//! Every encoder shares one trunk architecture: stride-2 3×3 convolutions with
//! SiLU between layers and a linear final layer, so all of them emit the same
//! `C×h×w` latent.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{NodeId, Tape};
use crate::data::{Image, Sample};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::rng;
use crate::tensor::{images_to_nchw, Tensor};

const KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub height: usize,
    pub width: usize,
    /// Output channels of each stride-2 block; the last one is the latent width C.
    pub widths: Vec<usize>,
    pub init_seed: u64,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec { height: 32, width: 32, widths: vec![16, 32, 32], init_seed: 0 }
    }
}

impl EncoderSpec {
    /// `(C, h, w)` of the latent feature map.
    pub fn latent_shape(&self) -> (usize, usize, usize) {
        let down = |mut n: usize| {
            for _ in &self.widths {
                n = (n + 2 - KERNEL) / 2 + 1;
            }
            n
        };
        (*self.widths.last().unwrap_or(&0), down(self.height), down(self.width))
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config(format!("encoder widths {:?} must be non-empty and positive", self.widths)));
        }
        if self.height < 2 || self.width < 2 {
            return Err(Error::Config("encoder input must be at least 2x2".into()));
        }
        Ok(())
    }
}

/// Pixel normalization applied before every encoder.
pub fn prepare_images(images: &[&Image]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Shape("empty image batch".into()))?;
    let raw: Vec<&[f64]> = images.iter().map(|i| i.data.as_slice()).collect();
    let mut t = images_to_nchw(&raw, first.height, first.width)?;
    t.data_mut().iter_mut().for_each(|v| *v = (*v - 0.5) * 4.0);
    Ok(t)
}

pub fn sample_images<'a>(samples: &[&'a Sample]) -> Vec<&'a Image> {
    samples.iter().map(|s| &s.image).collect()
}

fn uniform(shape: &[usize], bound: f64, r: &mut rng::Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-bound..bound)).collect()).expect("shape")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    fn init(out_c: usize, in_c: usize, k: usize, r: &mut rng::Rng) -> Self {
        let fan_in = (in_c * k * k) as f64;
        ConvLayer { weight: uniform(&[out_c, in_c, k, k], (6.0 / fan_in).sqrt(), r), bias: Tensor::zeros(&[out_c]) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub layers: Vec<ConvLayer>,
}

/// Encoder whose parameters are on a tape.
#[derive(Debug, Clone)]
pub struct BoundEncoder {
    layers: Vec<(NodeId, NodeId)>,
}

impl Encoder {
    pub fn init(spec: &EncoderSpec, r: &mut rng::Rng) -> Self {
        let mut in_c = 3;
        let layers = spec
            .widths
            .iter()
            .map(|&w| {
                let l = ConvLayer::init(w, in_c, KERNEL, r);
                in_c = w;
                l
            })
            .collect();
        Encoder { layers }
    }

    fn named(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| [(format!("{prefix}.conv{i}.weight"), &l.weight), (format!("{prefix}.conv{i}.bias"), &l.bias)])
            .collect()
    }

    fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| {
                [(format!("{prefix}.conv{i}.weight"), &mut l.weight), (format!("{prefix}.conv{i}.bias"), &mut l.bias)]
            })
            .collect()
    }

    /// Put the parameters on the tape; trainable ones become named leaves.
    pub fn bind(&self, tape: &mut Tape, prefix: &str, trainable: bool) -> BoundEncoder {
        let layers = self
            .named(prefix)
            .chunks(2)
            .map(|pair| {
                let mut put = |(name, t): &(String, &Tensor)| {
                    if trainable {
                        tape.param(name.clone(), t)
                    } else {
                        tape.constant((*t).clone())
                    }
                };
                (put(&pair[0]), put(&pair[1]))
            })
            .collect();
        BoundEncoder { layers }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.numel() + l.bias.numel()).sum()
    }
}

impl BoundEncoder {
    /// NCHW images → `B×C×h×w` latent.
    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            h = tape.conv2d(h, *w, *b, 2, 1)?;
            if i + 1 < self.layers.len() {
                h = tape.silu(h);
            }
        }
        Ok(h)
    }
}

/// A pretrained encoder that can only be evaluated, never trained. Its
/// output is multiplied by a fixed scale chosen at freeze time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenEncoder {
    encoder: Encoder,
    /// Single-element tensor so it travels with the other named parameters.
    scale: Tensor,
}

pub const REAL_SCALE_NAME: &str = "real.output_scale";

impl FrozenEncoder {
    pub fn freeze(encoder: Encoder) -> Self {
        Self::freeze_scaled(encoder, 1.0)
    }

    pub fn freeze_scaled(encoder: Encoder, scale: f64) -> Self {
        FrozenEncoder { encoder, scale: Tensor::scalar(scale) }
    }

    /// Freeze with the scale that gives each sample's latent unit L2 norm on
    /// average over `images`, like the normalized embeddings of a face
    /// recognition model.
    pub fn freeze_normalized(encoder: Encoder, images: &[&Image]) -> Result<Self> {
        let mut sum_sq = 0.0;
        let mut n = 0usize;
        for chunk in images.chunks(64) {
            let mut tape = Tape::new();
            let x = tape.constant(prepare_images(chunk)?);
            let z = encoder.bind(&mut tape, "real", false).forward(&mut tape, x)?;
            sum_sq += tape.value(z).data().iter().map(|v| v * v).sum::<f64>();
            n += tape.value(z).numel();
        }
        let rms = (sum_sq / n.max(1) as f64).sqrt();
        if !(rms > 0.0) || !rms.is_finite() {
            return Err(Error::Divergence(format!("real encoder output RMS is {rms}")));
        }
        let per_sample = n as f64 / images.len() as f64;
        Ok(Self::freeze_scaled(encoder, 1.0 / (rms * per_sample.sqrt())))
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn scale(&self) -> f64 {
        self.scale.item()
    }

    pub fn to_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut t = self.encoder.to_tensors("real");
        t.insert(REAL_SCALE_NAME.into(), self.scale.clone());
        t
    }

    /// `real.*` tensors; a missing scale means 1.
    pub fn from_tensors(tensors: &BTreeMap<String, Tensor>) -> Result<Self> {
        let scale = tensors.get(REAL_SCALE_NAME).map_or(1.0, Tensor::item);
        Ok(Self::freeze_scaled(encoder_from(tensors, "real")?, scale))
    }

    /// Output as a constant: no gradient can reach these parameters.
    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let bound = self.encoder.bind(tape, "real", false);
        let out = bound.forward(tape, x)?;
        let out = tape.scale(out, self.scale());
        Ok(tape.detach(out))
    }
}

/// Global-average-pool followed by an affine map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundHead {
    weight: NodeId,
    bias: NodeId,
}

impl Head {
    pub fn init(outputs: usize, channels: usize, r: &mut rng::Rng) -> Self {
        Head { weight: uniform(&[outputs, channels], (1.0 / channels as f64).sqrt(), r), bias: Tensor::zeros(&[outputs]) }
    }

    pub fn outputs(&self) -> usize {
        self.bias.numel()
    }

    pub fn bind(&self, tape: &mut Tape, prefix: &str) -> BoundHead {
        BoundHead {
            weight: tape.param(format!("{prefix}.weight"), &self.weight),
            bias: tape.param(format!("{prefix}.bias"), &self.bias),
        }
    }

    pub fn bind_constant(&self, tape: &mut Tape) -> BoundHead {
        BoundHead { weight: tape.constant(self.weight.clone()), bias: tape.constant(self.bias.clone()) }
    }
}

impl BoundHead {
    /// `B×C×h×w` → `B×outputs` unnormalized scores.
    pub fn forward(&self, tape: &mut Tape, features: NodeId) -> Result<NodeId> {
        let pooled = tape.global_avg_pool(features)?;
        tape.linear(pooled, self.weight, self.bias)
    }
}

/// 1×1 convolution mapping `2C → C` channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fusion {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundFusion {
    weight: NodeId,
    bias: NodeId,
}

impl Fusion {
    pub fn init(channels: usize, r: &mut rng::Rng) -> Self {
        let conv = ConvLayer::init(channels, 2 * channels, 1, r);
        Fusion { weight: conv.weight, bias: conv.bias }
    }

    /// Output equals `a·first + b·second` channel-wise (first = input channels `0..C`).
    pub fn blend(channels: usize, a: f64, b: f64) -> Self {
        let mut w = Tensor::zeros(&[channels, 2 * channels, 1, 1]);
        for c in 0..channels {
            w.data_mut()[c * 2 * channels + c] = a;
            w.data_mut()[c * 2 * channels + channels + c] = b;
        }
        Fusion { weight: w, bias: Tensor::zeros(&[channels]) }
    }

    pub fn bind(&self, tape: &mut Tape, prefix: &str) -> BoundFusion {
        BoundFusion {
            weight: tape.param(format!("{prefix}.weight"), &self.weight),
            bias: tape.param(format!("{prefix}.bias"), &self.bias),
        }
    }

    pub fn bind_constant(&self, tape: &mut Tape) -> BoundFusion {
        BoundFusion { weight: tape.constant(self.weight.clone()), bias: tape.constant(self.bias.clone()) }
    }
}

impl BoundFusion {
    /// `conv(first ‖ second)` with channel concatenation.
    pub fn forward(&self, tape: &mut Tape, first: NodeId, second: NodeId) -> Result<NodeId> {
        let cat = tape.concat_channels(first, second)?;
        tape.conv2d(cat, self.weight, self.bias, 1, 0)
    }
}

/// Which parameter set a named parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    Teacher(usize),
    Student,
    Real,
    FusionAug,
    FusionFinal,
    DomainHead,
    BinaryHead,
}

impl ParamGroup {
    pub fn of(name: &str) -> Option<ParamGroup> {
        let mut parts = name.split('.');
        Some(match parts.next()? {
            "teacher" => ParamGroup::Teacher(parts.next()?.parse().ok()?),
            "student" => ParamGroup::Student,
            "real" => ParamGroup::Real,
            "fusion_aug" => ParamGroup::FusionAug,
            "fusion_final" => ParamGroup::FusionFinal,
            "domain_head" => ParamGroup::DomainHead,
            "binary_head" => ParamGroup::BinaryHead,
            _ => return None,
        })
    }
}

/// All parameter sets: one teacher per training domain (real included), the
/// student, the frozen real encoder, two fusion layers and two heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LsdaModel {
    pub spec: EncoderSpec,
    pub teachers: Vec<Encoder>,
    pub student: Encoder,
    pub real: FrozenEncoder,
    pub fusion_aug: Fusion,
    pub fusion_final: Fusion,
    pub domain_head: Head,
    pub binary_head: Head,
}

impl LsdaModel {
    /// `num_domains` = m + 1 (real plus every training forgery domain).
    pub fn new(spec: &EncoderSpec, num_domains: usize, real: FrozenEncoder) -> Result<Self> {
        spec.validate()?;
        if num_domains < 2 {
            return Err(Error::Argument(format!("need at least one fake domain, got {num_domains} domains")));
        }
        let expected = spec.widths.len();
        if real.encoder().layers.len() != expected
            || real.encoder().layers.last().map(|l| l.bias.numel()) != spec.widths.last().copied()
        {
            return Err(Error::Shape("real encoder does not emit the shared latent shape".into()));
        }
        let s = spec.init_seed;
        let (c, _, _) = spec.latent_shape();
        let model = LsdaModel {
            spec: spec.clone(),
            teachers: (0..num_domains).map(|i| Encoder::init(spec, &mut rng::stream(s, "teacher", i as u64))).collect(),
            student: Encoder::init(spec, &mut rng::stream(s, "student", 0)),
            real,
            fusion_aug: Fusion::init(c, &mut rng::stream(s, "fusion-aug", 0)),
            fusion_final: Fusion::init(c, &mut rng::stream(s, "fusion-final", 0)),
            domain_head: Head::init(num_domains, c, &mut rng::stream(s, "domain-head", 0)),
            binary_head: Head::init(1, c, &mut rng::stream(s, "binary-head", 0)),
        };
        model.check_shapes()?;
        Ok(model)
    }

    pub fn num_domains(&self) -> usize {
        self.teachers.len()
    }

    /// Latent-shape equality across all encoders and head/fusion widths.
    pub fn check_shapes(&self) -> Result<()> {
        let probe = Image::zeros(self.spec.height, self.spec.width);
        let x = prepare_images(&[&probe])?;
        let want = {
            let (c, h, w) = self.spec.latent_shape();
            vec![1, c, h, w]
        };
        let mut encoders: Vec<&Encoder> = self.teachers.iter().collect();
        encoders.push(&self.student);
        encoders.push(self.real.encoder());
        for e in encoders {
            let mut tape = Tape::new();
            let xi = tape.constant(x.clone());
            let out = e.bind(&mut tape, "probe", false).forward(&mut tape, xi)?;
            if tape.shape(out) != want.as_slice() {
                return Err(Error::Shape(format!("encoder emits {:?}, expected {want:?}", tape.shape(out))));
            }
        }
        if self.domain_head.outputs() != self.num_domains() || self.binary_head.outputs() != 1 {
            return Err(Error::Shape("head output sizes do not match the domain count".into()));
        }
        Ok(())
    }

    /// Every parameter with its name; names are unique across sets.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, t) in self.teachers.iter().enumerate() {
            out.extend(t.named(&format!("teacher.{i}")));
        }
        out.extend(self.student.named("student"));
        out.extend(self.real.encoder().named("real"));
        out.push((REAL_SCALE_NAME.into(), &self.real.scale));
        out.push(("fusion_aug.weight".into(), &self.fusion_aug.weight));
        out.push(("fusion_aug.bias".into(), &self.fusion_aug.bias));
        out.push(("fusion_final.weight".into(), &self.fusion_final.weight));
        out.push(("fusion_final.bias".into(), &self.fusion_final.bias));
        out.push(("domain_head.weight".into(), &self.domain_head.weight));
        out.push(("domain_head.bias".into(), &self.domain_head.bias));
        out.push(("binary_head.weight".into(), &self.binary_head.weight));
        out.push(("binary_head.bias".into(), &self.binary_head.bias));
        out
    }

    /// Trainable parameters only (the real encoder is excluded).
    pub fn trainable_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, t) in self.teachers.iter_mut().enumerate() {
            out.extend(t.named_mut(&format!("teacher.{i}")));
        }
        out.extend(self.student.named_mut("student"));
        out.push(("fusion_aug.weight".into(), &mut self.fusion_aug.weight));
        out.push(("fusion_aug.bias".into(), &mut self.fusion_aug.bias));
        out.push(("fusion_final.weight".into(), &mut self.fusion_final.weight));
        out.push(("fusion_final.bias".into(), &mut self.fusion_final.bias));
        out.push(("domain_head.weight".into(), &mut self.domain_head.weight));
        out.push(("domain_head.bias".into(), &mut self.domain_head.bias));
        out.push(("binary_head.weight".into(), &mut self.binary_head.weight));
        out.push(("binary_head.bias".into(), &mut self.binary_head.bias));
        out
    }

    /// Parameter-set census: (teachers, students, fusion layers, heads).
    pub fn parameter_sets(&self) -> (usize, usize, usize, usize) {
        let groups: BTreeSet<ParamGroup> = self.named_params().iter().filter_map(|(n, _)| ParamGroup::of(n)).collect();
        let teachers = groups.iter().filter(|g| matches!(g, ParamGroup::Teacher(_))).count();
        let fusion = groups.iter().filter(|g| matches!(g, ParamGroup::FusionAug | ParamGroup::FusionFinal)).count();
        let heads = groups.iter().filter(|g| matches!(g, ParamGroup::DomainHead | ParamGroup::BinaryHead)).count();
        (teachers, usize::from(groups.contains(&ParamGroup::Student)), fusion, heads)
    }

    /// Teacher `domain` features for a batch (evaluation mode, no gradients).
    pub fn forward_teacher(&self, domain: usize, images: &[&Image]) -> Result<Tensor> {
        let teacher = self
            .teachers
            .get(domain)
            .ok_or_else(|| Error::Argument(format!("domain {domain} outside 0..{}", self.num_domains())))?;
        self.check_images(images)?;
        let mut tape = Tape::new();
        let x = tape.constant(prepare_images(images)?);
        let z = teacher.bind(&mut tape, "teacher", false).forward(&mut tape, x)?;
        Ok(tape.value(z).clone())
    }

    /// Student features and binary pre-sigmoid scores.
    pub fn forward_student(&self, images: &[&Image]) -> Result<(Tensor, Vec<f64>)> {
        self.detector().forward(images)
    }

    pub fn domain_scores(&self, features: &Tensor) -> Result<Tensor> {
        head_scores(&self.domain_head, features, &self.spec)
    }

    pub fn binary_scores(&self, features: &Tensor) -> Result<Vec<f64>> {
        Ok(head_scores(&self.binary_head, features, &self.spec)?.into_data())
    }

    fn check_images(&self, images: &[&Image]) -> Result<()> {
        if images.is_empty() {
            return Err(Error::Shape("empty image batch".into()));
        }
        if let Some(bad) = images.iter().find(|i| i.height != self.spec.height || i.width != self.spec.width) {
            return Err(Error::Shape(format!(
                "image {}x{} does not match encoder input {}x{}",
                bad.height, bad.width, self.spec.height, self.spec.width
            )));
        }
        Ok(())
    }
}

/// Parameters named `{prefix}.conv{i}.weight|bias` for consecutive `i`.
fn encoder_from(tensors: &BTreeMap<String, Tensor>, prefix: &str) -> Result<Encoder> {
    let mut layers = Vec::new();
    while let Some(weight) = tensors.get(&format!("{prefix}.conv{}.weight", layers.len())) {
        let bias = tensors
            .get(&format!("{prefix}.conv{}.bias", layers.len()))
            .ok_or_else(|| Error::Checkpoint(format!("{prefix}.conv{}.bias missing", layers.len())))?;
        layers.push(ConvLayer { weight: weight.clone(), bias: bias.clone() });
    }
    if layers.is_empty() {
        return Err(Error::Checkpoint(format!("no {prefix} parameters")));
    }
    Ok(Encoder { layers })
}

fn pair_from(tensors: &BTreeMap<String, Tensor>, prefix: &str) -> Result<(Tensor, Tensor)> {
    let get = |k: &str| {
        tensors.get(&format!("{prefix}.{k}")).cloned().ok_or_else(|| Error::Checkpoint(format!("{prefix}.{k} missing")))
    };
    Ok((get("weight")?, get("bias")?))
}

impl Encoder {
    pub fn to_tensors(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.named(prefix).into_iter().map(|(n, t)| (n, t.clone())).collect()
    }

    pub fn from_tensors(tensors: &BTreeMap<String, Tensor>, prefix: &str) -> Result<Self> {
        encoder_from(tensors, prefix)
    }
}

impl LsdaModel {
    pub fn to_tensors(&self) -> BTreeMap<String, Tensor> {
        self.named_params().into_iter().map(|(n, t)| (n, t.clone())).collect()
    }

    /// Rebuild from named tensors; every parameter set must be present.
    pub fn from_tensors(spec: &EncoderSpec, num_domains: usize, tensors: &BTreeMap<String, Tensor>) -> Result<Self> {
        let fusion = |p: &str| pair_from(tensors, p).map(|(weight, bias)| Fusion { weight, bias });
        let head = |p: &str| pair_from(tensors, p).map(|(weight, bias)| Head { weight, bias });
        let model = LsdaModel {
            spec: spec.clone(),
            teachers: (0..num_domains).map(|i| encoder_from(tensors, &format!("teacher.{i}"))).collect::<Result<_>>()?,
            student: encoder_from(tensors, "student")?,
            real: FrozenEncoder::from_tensors(tensors)?,
            fusion_aug: fusion("fusion_aug")?,
            fusion_final: fusion("fusion_final")?,
            domain_head: head("domain_head")?,
            binary_head: head("binary_head")?,
        };
        model.check_shapes().map_err(|e| Error::Checkpoint(format!("inconsistent parameters: {e}")))?;
        Ok(model)
    }

    pub fn detector(&self) -> StudentDetector {
        StudentDetector { spec: self.spec.clone(), student: self.student.clone(), binary_head: self.binary_head.clone() }
    }
}

/// The inference-time network: student encoder plus binary head only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentDetector {
    pub spec: EncoderSpec,
    pub student: Encoder,
    pub binary_head: Head,
}

impl StudentDetector {
    /// Needs only `student.*` and `binary_head.*`; everything else is ignored.
    pub fn from_tensors(spec: &EncoderSpec, tensors: &BTreeMap<String, Tensor>) -> Result<Self> {
        let (weight, bias) = pair_from(tensors, "binary_head")?;
        let det = StudentDetector { spec: spec.clone(), student: encoder_from(tensors, "student")?, binary_head: Head { weight, bias } };
        if det.student.layers.len() != spec.widths.len() || det.binary_head.outputs() != 1 {
            return Err(Error::Checkpoint("student parameters do not match the encoder spec".into()));
        }
        Ok(det)
    }

    /// Student features (`B×C×h×w`) and pre-sigmoid scores.
    pub fn forward(&self, images: &[&Image]) -> Result<(Tensor, Vec<f64>)> {
        if images.is_empty() {
            return Err(Error::Shape("empty image batch".into()));
        }
        if let Some(bad) = images.iter().find(|i| i.height != self.spec.height || i.width != self.spec.width) {
            return Err(Error::Shape(format!(
                "image {}x{} does not match encoder input {}x{}",
                bad.height, bad.width, self.spec.height, self.spec.width
            )));
        }
        let mut tape = Tape::new();
        let x = tape.constant(prepare_images(images)?);
        let f = self.student.bind(&mut tape, "student", false).forward(&mut tape, x)?;
        let s = self.binary_head.bind_constant(&mut tape).forward(&mut tape, f)?;
        Ok((tape.value(f).clone(), tape.value(s).data().to_vec()))
    }

    /// Fake probabilities, evaluated in chunks of `chunk` images.
    pub fn probabilities(&self, images: &[&Image], chunk: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(images.len());
        for part in images.chunks(chunk.max(1)) {
            out.extend(self.forward(part)?.1.into_iter().map(sigmoid));
        }
        Ok(out)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn head_scores(head: &Head, features: &Tensor, spec: &EncoderSpec) -> Result<Tensor> {
    let (c, h, w) = spec.latent_shape();
    if features.shape().len() != 4 || features.shape()[1..] != [c, h, w] {
        return Err(Error::Shape(format!("features {:?} are not B×{c}×{h}×{w}", features.shape())));
    }
    let mut tape = Tape::new();
    let f = tape.constant(features.clone());
    let s = head.bind_constant(&mut tape).forward(&mut tape, f)?;
    Ok(tape.value(s).clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { epochs: 15, learning_rate: 2e-3, batch_size: 32, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub identities: usize,
    pub train_images: usize,
    pub heldout_images: usize,
    pub final_train_loss: f64,
    pub heldout_accuracy: f64,
    pub chance: f64,
}

/// Identity classification on real images, then freeze. The last frame of
/// every identity is held out to measure accuracy.
pub fn pretrain_real_encoder(
    reals: &[&Sample],
    spec: &EncoderSpec,
    config: &PretrainConfig,
) -> Result<(FrozenEncoder, PretrainReport)> {
    spec.validate()?;
    if reals.iter().any(|s| s.domain != 0) {
        return Err(Error::Argument("pretraining takes real (domain 0) samples only".into()));
    }
    let ids: Vec<u32> = reals.iter().map(|s| s.identity_id).collect::<BTreeSet<_>>().into_iter().collect();
    if ids.len() < 2 {
        return Err(Error::Argument(format!("need at least 2 identities, got {}", ids.len())));
    }
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(Error::Config("pretraining epochs and batch size must be positive".into()));
    }
    let label: BTreeMap<u32, usize> = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let last_frame: BTreeMap<u32, u32> = reals.iter().fold(BTreeMap::new(), |mut m, s| {
        let e = m.entry(s.identity_id).or_insert(0);
        *e = (*e).max(s.frame);
        m
    });
    let (heldout, train): (Vec<&Sample>, Vec<&Sample>) =
        reals.iter().partition(|s| last_frame[&s.identity_id] > 0 && s.frame == last_frame[&s.identity_id]);

    let mut encoder = Encoder::init(spec, &mut rng::stream(config.seed, "real-encoder", 0));
    let (c, _, _) = spec.latent_shape();
    let mut head = Head::init(ids.len(), c, &mut rng::stream(config.seed, "identity-head", 0));
    let mut opt = Adam::new(config.learning_rate);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut last_loss = f64::NAN;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng::stream(config.seed, "pretrain-order", epoch as u64));
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|i| train[*i]).collect();
            let mut tape = Tape::new();
            let x = tape.constant(prepare_images(&sample_images(&batch))?);
            let z = encoder.bind(&mut tape, "real", true).forward(&mut tape, x)?;
            let bh = head.bind(&mut tape, "identity_head");
            let logits = bh.forward(&mut tape, z)?;
            let sum = tape.softmax_ce_sum(logits, batch.iter().map(|s| label[&s.identity_id]).collect())?;
            let loss = tape.scale(sum, 1.0 / batch.len() as f64);
            last_loss = tape.value(loss).item();
            if !last_loss.is_finite() {
                return Err(Error::Divergence(format!("pretraining loss became {last_loss} in epoch {epoch}")));
            }
            let grads = tape.backward(loss)?;
            let named: BTreeMap<String, Tensor> =
                tape.params().iter().map(|(n, id)| (n.clone(), grads.get_or_zero(*id))).collect();
            let mut params = encoder.named_mut("real");
            params.push(("identity_head.weight".into(), &mut head.weight));
            params.push(("identity_head.bias".into(), &mut head.bias));
            opt.update(params, &named);
        }
    }
    let heldout_accuracy = if heldout.is_empty() {
        f64::NAN
    } else {
        let mut correct = 0;
        for chunk in heldout.chunks(64) {
            let mut tape = Tape::new();
            let x = tape.constant(prepare_images(&sample_images(chunk))?);
            let z = encoder.bind(&mut tape, "real", false).forward(&mut tape, x)?;
            let logits = head.bind_constant(&mut tape).forward(&mut tape, z)?;
            let v = tape.value(logits);
            for (j, s) in chunk.iter().enumerate() {
                let row = v.row(j);
                let pred = (0..row.len()).max_by(|a, b| row[*a].total_cmp(&row[*b])).unwrap_or(0);
                correct += usize::from(pred == label[&s.identity_id]);
            }
        }
        correct as f64 / heldout.len() as f64
    };
    let report = PretrainReport {
        identities: ids.len(),
        train_images: train.len(),
        heldout_images: heldout.len(),
        final_train_loss: last_loss,
        heldout_accuracy,
        chance: 1.0 / ids.len() as f64,
    };
    let frozen = FrozenEncoder::freeze_normalized(encoder, &sample_images(&train))?;
    Ok((frozen, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_real;

    fn tiny_spec() -> EncoderSpec {
        EncoderSpec { height: 8, width: 8, widths: vec![3, 2], init_seed: 1 }
    }

    fn tiny_model(domains: usize) -> LsdaModel {
        let spec = tiny_spec();
        let real = FrozenEncoder::freeze(Encoder::init(&spec, &mut rng::stream(9, "r", 0)));
        LsdaModel::new(&spec, domains, real).unwrap()
    }

    fn images(n: usize, h: usize, seed: u64) -> Vec<Image> {
        let mut r = rng::stream(seed, "img", 0);
        (0..n)
            .map(|_| Image { height: h, width: h, data: (0..h * h * 3).map(|_| r.random_range(0.0..1.0)).collect() })
            .collect()
    }

    #[test]
    fn latent_shapes() {
        assert_eq!(EncoderSpec::default().latent_shape(), (32, 4, 4));
        assert_eq!(tiny_spec().latent_shape(), (2, 2, 2));
    }

    #[test]
    fn teacher_shape_domains_and_determinism() {
        let m = tiny_model(3);
        let imgs = images(4, 8, 0);
        let refs: Vec<&Image> = imgs.iter().collect();
        let z0 = m.forward_teacher(0, &refs).unwrap();
        assert_eq!(z0.shape(), &[4, 2, 2, 2]);
        let z1 = m.forward_teacher(1, &refs).unwrap();
        assert!(z0.max_abs_diff(&z1) > 0.0);
        assert_eq!(z0, m.forward_teacher(0, &refs).unwrap());
        assert!(matches!(m.forward_teacher(3, &refs), Err(Error::Argument(_))));
        let wrong = images(1, 16, 0);
        assert!(matches!(m.forward_teacher(0, &[&wrong[0]]), Err(Error::Shape(_))));
    }

    #[test]
    fn student_shapes_and_parameter_sensitivity() {
        let mut m = tiny_model(3);
        let imgs = images(5, 8, 1);
        let refs: Vec<&Image> = imgs.iter().collect();
        let (f, s) = m.forward_student(&refs).unwrap();
        assert_eq!(f.shape(), &[5, 2, 2, 2]);
        assert_eq!(s.len(), 5);
        // Probe each student parameter: nudging it must move some score.
        let n_params = m.student.param_count();
        for k in 0..n_params {
            let mut probe = m.clone();
            let (layer, idx) = {
                let mut k = k;
                let mut li = 0;
                loop {
                    let l = &probe.student.layers[li];
                    let n = l.weight.numel() + l.bias.numel();
                    if k < n {
                        break (li, k);
                    }
                    k -= n;
                    li += 1;
                }
            };
            let l = &mut probe.student.layers[layer];
            if idx < l.weight.numel() {
                l.weight.data_mut()[idx] += 1e-3;
            } else {
                l.bias.data_mut()[idx - l.weight.numel()] += 1e-3;
            }
            let (_, s2) = probe.forward_student(&refs).unwrap();
            assert!(s.iter().zip(&s2).any(|(a, b)| a != b), "student parameter {k} has no effect");
        }
        m.binary_head.bias.data_mut()[0] += 1.0;
        assert!(m.forward_student(&refs).unwrap().1.iter().zip(&s).all(|(a, b)| (a - b - 1.0).abs() < 1e-12));
    }

    #[test]
    fn student_inference_touches_no_teacher_parameter() {
        let m = tiny_model(3);
        let imgs = images(2, 8, 2);
        let mut tape = Tape::new();
        let x = tape.constant(prepare_images(&[&imgs[0], &imgs[1]]).unwrap());
        let teachers: Vec<BoundEncoder> =
            m.teachers.iter().enumerate().map(|(i, t)| t.bind(&mut tape, &format!("teacher.{i}"), true)).collect();
        let f = m.student.bind(&mut tape, "student", true).forward(&mut tape, x).unwrap();
        let s = m.binary_head.bind(&mut tape, "binary_head").forward(&mut tape, f).unwrap();
        let zero = tape.constant(Tensor::zeros(&[2, 1]));
        let loss = tape.mse(s, zero).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(!teachers.is_empty());
        for (name, id) in tape.params() {
            let has = g.get(*id).is_some();
            assert_eq!(has, !name.starts_with("teacher"), "{name}");
        }
    }

    #[test]
    fn heads_pool_then_affine() {
        let m = tiny_model(4);
        let zero = Tensor::zeros(&[3, 2, 2, 2]);
        let s = m.domain_scores(&zero).unwrap();
        assert_eq!(s.shape(), &[3, 4]);
        for j in 0..3 {
            assert_eq!(s.row(j), m.domain_head.bias.data());
        }
        assert_eq!(m.binary_scores(&zero).unwrap(), vec![0.0; 3]);
        assert!(matches!(m.domain_scores(&Tensor::zeros(&[3, 2, 3, 3])), Err(Error::Shape(_))));
    }

    #[test]
    fn pooling_ignores_spatial_order() {
        let m = tiny_model(3);
        let mut r = rng::stream(4, "perm", 0);
        let f = Tensor::new(vec![2, 2, 2, 2], (0..16).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let mut perm: Vec<usize> = (0..4).collect();
        perm.shuffle(&mut r);
        perm.swap(0, 1);
        let mut g = f.clone();
        for plane in 0..4 {
            for (dst, src) in perm.iter().enumerate() {
                g.data_mut()[plane * 4 + dst] = f.data()[plane * 4 + src];
            }
        }
        let (a, b) = (m.domain_scores(&f).unwrap(), m.domain_scores(&g).unwrap());
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn parameter_sets_are_disjoint_and_counted() {
        let m = tiny_model(3);
        assert_eq!(m.parameter_sets(), (3, 1, 2, 2));
        let names: Vec<String> = m.named_params().into_iter().map(|(n, _)| n).collect();
        let unique: BTreeSet<&String> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
        let mut m2 = m.clone();
        assert!(m2.trainable_params_mut().iter().all(|(n, _)| !n.starts_with("real.")));
    }

    #[test]
    fn pretraining_learns_identities_and_is_deterministic() {
        let reals = generate_real(10, 4, 21).unwrap();
        let refs: Vec<&Sample> = reals.iter().collect();
        let spec = EncoderSpec { init_seed: 0, ..Default::default() };
        let cfg = PretrainConfig { epochs: 30, learning_rate: 3e-3, batch_size: 10, seed: 2 };
        let (enc, report) = pretrain_real_encoder(&refs, &spec, &cfg).unwrap();
        assert_eq!(report.identities, 10);
        assert_eq!(report.heldout_images, 10);
        assert!(report.heldout_accuracy > 2.0 * report.chance, "{report:?}");
        let (enc2, _) = pretrain_real_encoder(&refs, &spec, &cfg).unwrap();
        assert_eq!(enc, enc2);
        assert!(matches!(pretrain_real_encoder(&refs[..4], &spec, &cfg), Err(Error::Argument(_))));
    }
}
