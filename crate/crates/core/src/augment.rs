//! Latent-space augmentation of per-domain teacher features.
//!
//! Within-domain (WD) ops move features of one forgery domain around its own
//! batch centroid; the cross-domain (CD) op mixes two forgery domains. Both
//! results are fused with the original features by two 1×1 convolutions.
//! Everything is recorded on the tape, so gradients reach the teachers and the
//! fusion layers.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{NodeId, Tape};
use crate::encoders::BoundFusion;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Relative tolerance under which two hard-example distances count as tied.
const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WdOp {
    CentrifugalDirect,
    CentrifugalIndirect,
    Affine,
    Additive,
}

pub const WD_OPS: [WdOp; 4] = [WdOp::CentrifugalDirect, WdOp::CentrifugalIndirect, WdOp::Affine, WdOp::Additive];

impl WdOp {
    pub fn name(self) -> &'static str {
        match self {
            WdOp::CentrifugalDirect => "centrifugal_direct",
            WdOp::CentrifugalIndirect => "centrifugal_indirect",
            WdOp::Affine => "affine",
            WdOp::Additive => "additive",
        }
    }
}

impl fmt::Display for WdOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WdOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        WD_OPS
            .iter()
            .copied()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown within-domain op {s:?}")))
    }
}

/// Which features the final fusion layer pairs with the augmented map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalInput {
    /// The teacher features before any augmentation.
    #[default]
    Original,
    /// The WD-augmented features.
    Augmented,
}

/// Isotropic Gaussian mixture used by the additive op.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GmmConfig {
    pub weights: Vec<f64>,
    pub sigmas: Vec<f64>,
    /// Multiply every σ by the standard deviation of the current batch features.
    pub relative_to_batch_std: bool,
}

impl Default for GmmConfig {
    fn default() -> Self {
        GmmConfig { weights: vec![1.0 / 3.0; 3], sigmas: vec![0.05, 0.1, 0.2], relative_to_batch_std: true }
    }
}

impl GmmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() || self.weights.len() != self.sigmas.len() {
            return Err(Error::Config(format!(
                "gmm needs matching non-empty weights and sigmas, got {} and {}",
                self.weights.len(),
                self.sigmas.len()
            )));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config(format!("gmm weights must be non-negative, got {:?}", self.weights)));
        }
        if (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("gmm weights must sum to 1, got {:?}", self.weights)));
        }
        if self.sigmas.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Config(format!("gmm sigmas must be positive, got {:?}", self.sigmas)));
        }
        Ok(())
    }

    /// Mixture variance per unit of scale: Σ π_k σ_k².
    pub fn variance(&self) -> f64 {
        self.weights.iter().zip(&self.sigmas).map(|(p, s)| p * s * s).sum()
    }

    fn draw_component(&self, r: &mut rng::Rng) -> usize {
        let u: f64 = r.random_range(0.0..1.0);
        let mut acc = 0.0;
        for (k, p) in self.weights.iter().enumerate() {
            acc += p;
            if u < acc {
                return k;
            }
        }
        self.weights.iter().rposition(|p| *p > 0.0).unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub wd_enabled: bool,
    pub cd_enabled: bool,
    pub wd_ops: Vec<WdOp>,
    /// Rotation angles are drawn uniformly from [−theta_max, theta_max].
    pub theta_max: f64,
    pub gmm: GmmConfig,
    /// Stop gradients through the batch centroid.
    pub detach_centroid: bool,
    pub fusion_final_input: FinalInput,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            wd_enabled: true,
            cd_enabled: true,
            wd_ops: WD_OPS.to_vec(),
            theta_max: std::f64::consts::FRAC_PI_6,
            gmm: GmmConfig::default(),
            detach_centroid: false,
            fusion_final_input: FinalInput::Original,
        }
    }
}

impl AugmentConfig {
    pub fn with_switches(wd_enabled: bool, cd_enabled: bool) -> Self {
        AugmentConfig { wd_enabled, cd_enabled, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.wd_enabled && self.wd_ops.is_empty() {
            return Err(Error::Config("within-domain augmentation enabled with no ops".into()));
        }
        if !(self.theta_max >= 0.0) || !self.theta_max.is_finite() {
            return Err(Error::Config(format!("theta_max must be finite and >= 0, got {}", self.theta_max)));
        }
        self.gmm.validate()
    }
}

/// Random draws behind one domain's augmentation, for replay and diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentDraw {
    pub domain: u8,
    pub op: Option<WdOp>,
    pub betas: Vec<f64>,
    pub thetas: Vec<f64>,
    pub components: Vec<usize>,
    pub hard_index: Option<usize>,
    pub partner: Option<u8>,
    pub alphas: Vec<f64>,
}

fn check_same(tape: &Tape, a: NodeId, b: NodeId, what: &str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", tape.shape(a), tape.shape(b))));
    }
    Ok(())
}

fn check_unit(values: &[f64], what: &str) -> Result<()> {
    if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Argument(format!("{what} {v} outside [0, 1]")));
    }
    Ok(())
}

fn check_rows(tape: &Tape, z: NodeId, per_row: &[f64], what: &str) -> Result<()> {
    if per_row.len() != tape.value(z).batch() {
        return Err(Error::Shape(format!("{} {what} values for batch {}", per_row.len(), tape.value(z).batch())));
    }
    Ok(())
}

/// Batch mean, shape `1×C×h×w`.
pub fn centroid(tape: &mut Tape, z: NodeId) -> Result<NodeId> {
    tape.mean_batch(z)
}

/// `ẑ_j = z_j + β_j (z_j − μ)`.
pub fn centrifugal_direct(tape: &mut Tape, z: NodeId, mu: NodeId, betas: &[f64]) -> Result<NodeId> {
    check_unit(betas, "beta")?;
    check_rows(tape, z, betas, "beta")?;
    let b = tape.value(z).batch();
    let mu_b = tape.broadcast_batch(mu, b)?;
    check_same(tape, z, mu_b, "centrifugal_direct")?;
    let diff = tape.sub(z, mu_b)?;
    let step = tape.scale_rows(diff, betas.to_vec())?;
    tape.add(z, step)
}

/// Index of the sample farthest (flattened Euclidean) from `mu`; near-ties go
/// to the lowest index.
pub fn hardest_index(z: &Tensor, mu: &Tensor) -> Result<usize> {
    if z.batch() == 0 {
        return Err(Error::Shape("hardest example of an empty batch".into()));
    }
    if mu.numel() != z.row_len() {
        return Err(Error::Shape(format!("centroid {:?} for features {:?}", mu.shape(), z.shape())));
    }
    let dist = |j: usize| z.row(j).iter().zip(mu.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    let mut best = (0, dist(0));
    for j in 1..z.batch() {
        let d = dist(j);
        if d > best.1 + TIE_TOLERANCE * best.1.max(d) {
            best = (j, d);
        }
    }
    Ok(best.0)
}

/// The hard example itself as a `1×C×h×w` node (gradients flow into that sample).
pub fn hardest_example(tape: &mut Tape, z: NodeId, mu: NodeId) -> Result<(NodeId, usize)> {
    let idx = hardest_index(tape.value(z), tape.value(mu))?;
    Ok((tape.select_row(z, idx)?, idx))
}

/// `ẑ_j = z_j + β_j (a − z_j)`.
pub fn centrifugal_indirect(tape: &mut Tape, z: NodeId, a: NodeId, betas: &[f64]) -> Result<NodeId> {
    check_unit(betas, "beta")?;
    check_rows(tape, z, betas, "beta")?;
    let b = tape.value(z).batch();
    let a_b = tape.broadcast_batch(a, b)?;
    check_same(tape, z, a_b, "centrifugal_indirect")?;
    let diff = tape.sub(a_b, z)?;
    let step = tape.scale_rows(diff, betas.to_vec())?;
    tape.add(z, step)
}

/// Source cell for every output cell of an `h×w` grid rotated by `theta`, or
/// `None` when the source lies outside the grid.
pub fn rotation_sources(h: usize, w: usize, theta: f64) -> Vec<Option<usize>> {
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (s, c) = theta.sin_cos();
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for col in 0..w {
            let (x, y) = (col as f64 - cx, cy - r as f64);
            let xs = c * x + s * y;
            let ys = -s * x + c * y;
            let (sr, sc) = ((cy - ys).round(), (xs + cx).round());
            let inside = sr >= 0.0 && sc >= 0.0 && sr < h as f64 && sc < w as f64;
            out.push(inside.then(|| sr as usize * w + sc as usize));
        }
    }
    out
}

/// Rotate every sample's spatial grid by its own angle (nearest cell, zero fill).
pub fn affine_rotate(tape: &mut Tape, z: NodeId, thetas: &[f64]) -> Result<NodeId> {
    check_rows(tape, z, thetas, "theta")?;
    let shape = tape.shape(z).to_vec();
    if shape.len() != 4 {
        return Err(Error::Shape(format!("affine_rotate needs B×C×h×w, got {shape:?}")));
    }
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    let plane = h * w;
    let mut src = Vec::with_capacity(shape.iter().product());
    for (j, theta) in thetas.iter().enumerate() {
        let cells = rotation_sources(h, w, *theta);
        for ch in 0..c {
            let base = (j * c + ch) * plane;
            src.extend(cells.iter().map(|s| s.map(|i| base + i)));
        }
    }
    tape.gather(z, src)
}

/// Mixture noise: one component per sample, then i.i.d. N(0, σ_k²) entries.
/// Returns the unscaled noise tensor and the chosen components.
pub fn sample_gmm_noise(shape: &[usize], gmm: &GmmConfig, r: &mut rng::Rng) -> Result<(Tensor, Vec<usize>)> {
    gmm.validate()?;
    let b = shape.first().copied().unwrap_or(0);
    let per: usize = shape.iter().skip(1).product();
    let mut data = Vec::with_capacity(b * per);
    let mut comps = Vec::with_capacity(b);
    for _ in 0..b {
        let k = gmm.draw_component(r);
        comps.push(k);
        let sigma = gmm.sigmas[k];
        data.extend((0..per).map(|_| {
            let e: f64 = StandardNormal.sample(r);
            sigma * e
        }));
    }
    Ok((Tensor::new(shape.to_vec(), data)?, comps))
}

/// `ẑ_j = z_j + β_j ε_j`, with ε scaled by the batch feature std when configured.
pub fn additive_gmm(
    tape: &mut Tape,
    z: NodeId,
    betas: &[f64],
    gmm: &GmmConfig,
    r: &mut rng::Rng,
) -> Result<(NodeId, Vec<usize>)> {
    check_unit(betas, "beta")?;
    check_rows(tape, z, betas, "beta")?;
    let (eps, comps) = sample_gmm_noise(tape.shape(z), gmm, r)?;
    let mut noise = tape.constant(eps);
    if gmm.relative_to_batch_std {
        let scale = tape.std_all(z);
        noise = tape.mul_scalar(noise, scale)?;
    }
    let step = tape.scale_rows(noise, betas.to_vec())?;
    Ok((tape.add(z, step)?, comps))
}

/// `ẑ_j = α_j z_i,j + (1 − α_j) z_k,j`.
pub fn mixup_cross(tape: &mut Tape, zi: NodeId, zk: NodeId, alphas: &[f64]) -> Result<NodeId> {
    check_unit(alphas, "alpha")?;
    check_same(tape, zi, zk, "mixup_cross")?;
    check_rows(tape, zi, alphas, "alpha")?;
    let a = tape.scale_rows(zi, alphas.to_vec())?;
    let b = tape.scale_rows(zk, alphas.iter().map(|x| 1.0 - x).collect())?;
    tape.add(a, b)
}

/// `F = conv_final(conv_aug(ẑ ‖ ẑ^c) ‖ z)`; `z` is replaced by `ẑ` in the
/// [`FinalInput::Augmented`] reading.
pub fn fuse(
    tape: &mut Tape,
    z: NodeId,
    z_wd: NodeId,
    z_cd: NodeId,
    fusion_aug: &BoundFusion,
    fusion_final: &BoundFusion,
    final_input: FinalInput,
) -> Result<NodeId> {
    check_same(tape, z, z_wd, "fuse")?;
    check_same(tape, z, z_cd, "fuse")?;
    let aug = fusion_aug.forward(tape, z_wd, z_cd)?;
    let second = match final_input {
        FinalInput::Original => z,
        FinalInput::Augmented => z_wd,
    };
    fusion_final.forward(tape, aug, second)
}

fn unit_draws(r: &mut rng::Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random_range(0.0..=1.0)).collect()
}

/// Augment and fuse every fake domain's teacher features.
///
/// `fakes` holds `(domain label, features)` pairs; real features are never
/// passed here. Each domain draws from its own stream derived from `seed`, so
/// the result does not depend on domain processing order.
pub fn augment_domain_batch(
    tape: &mut Tape,
    fakes: &[(u8, NodeId)],
    config: &AugmentConfig,
    fusion_aug: &BoundFusion,
    fusion_final: &BoundFusion,
    seed: u64,
) -> Result<(Vec<NodeId>, Vec<AugmentDraw>)> {
    config.validate()?;
    if config.cd_enabled && fakes.len() < 2 {
        return Err(Error::Precondition(format!(
            "cross-domain mixup needs at least 2 fake domains, got {}",
            fakes.len()
        )));
    }
    if fakes.iter().any(|(d, _)| *d == 0) {
        return Err(Error::Precondition("real features must not be augmented".into()));
    }
    let mut fused = Vec::with_capacity(fakes.len());
    let mut draws = Vec::with_capacity(fakes.len());
    for (pos, &(domain, z)) in fakes.iter().enumerate() {
        let mut r = rng::stream(seed, "augment", u64::from(domain));
        let b = tape.value(z).batch();
        let mut draw = AugmentDraw {
            domain,
            op: None,
            betas: vec![],
            thetas: vec![],
            components: vec![],
            hard_index: None,
            partner: None,
            alphas: vec![],
        };
        let z_wd = if config.wd_enabled {
            let op = config.wd_ops[r.random_range(0..config.wd_ops.len())];
            draw.op = Some(op);
            match op {
                WdOp::CentrifugalDirect | WdOp::CentrifugalIndirect => {
                    draw.betas = unit_draws(&mut r, b);
                    let mut mu = centroid(tape, z)?;
                    if config.detach_centroid {
                        mu = tape.detach(mu);
                    }
                    if op == WdOp::CentrifugalDirect {
                        centrifugal_direct(tape, z, mu, &draw.betas)?
                    } else {
                        let (hard, idx) = hardest_example(tape, z, mu)?;
                        draw.hard_index = Some(idx);
                        centrifugal_indirect(tape, z, hard, &draw.betas)?
                    }
                }
                WdOp::Affine => {
                    draw.thetas = (0..b)
                        .map(|_| if config.theta_max > 0.0 { r.random_range(-config.theta_max..=config.theta_max) } else { 0.0 })
                        .collect();
                    affine_rotate(tape, z, &draw.thetas)?
                }
                WdOp::Additive => {
                    draw.betas = unit_draws(&mut r, b);
                    let (out, comps) = additive_gmm(tape, z, &draw.betas, &config.gmm, &mut r)?;
                    draw.components = comps;
                    out
                }
            }
        } else {
            z
        };
        let z_cd = if config.cd_enabled {
            let mut k = r.random_range(0..fakes.len() - 1);
            if k >= pos {
                k += 1;
            }
            draw.partner = Some(fakes[k].0);
            draw.alphas = unit_draws(&mut r, b);
            mixup_cross(tape, z, fakes[k].1, &draw.alphas)?
        } else {
            z
        };
        fused.push(fuse(tape, z, z_wd, z_cd, fusion_aug, fusion_final, config.fusion_final_input)?);
        draws.push(draw);
    }
    Ok((fused, draws))
}
