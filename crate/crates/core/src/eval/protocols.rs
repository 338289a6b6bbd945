//! Held-out-domain evaluation and the degradation sweep.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{ap, auc, eer, group_scores};
use crate::data::{perturb, Dataset, Image, PerturbKind, Sample, Split, SEVERITY_LEVELS};
use crate::encoders::StudentDetector;
use crate::error::{Error, Result};
use crate::rng;

const CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Frame,
    /// Mean probability per (group, domain) before ranking.
    Group,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub kind: PerturbKind,
    pub severity: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub level: Level,
    pub split: Split,
    /// Fake domains scored against the reals of the split.
    pub domains: Vec<u8>,
    pub auc: f64,
    pub ap: f64,
    pub eer: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub perturbation: Option<Perturbation>,
}

impl MetricsReport {
    pub fn from_scores(
        level: Level,
        split: Split,
        domains: Vec<u8>,
        scores: &[f64],
        labels: &[bool],
        perturbation: Option<Perturbation>,
    ) -> Result<Self> {
        let n_pos = labels.iter().filter(|l| **l).count();
        Ok(MetricsReport {
            level,
            split,
            domains,
            auc: auc(scores, labels)?,
            ap: ap(scores, labels)?,
            eer: eer(scores, labels)?,
            n_pos,
            n_neg: labels.len() - n_pos,
            perturbation,
        })
    }
}

fn group_key(s: &Sample) -> u64 {
    (u64::from(s.group_id) << 8) | u64::from(s.domain)
}

/// Frame- and group-level reports for reals vs the given fake domains of a split.
pub fn evaluate_domains(det: &StudentDetector, ds: &Dataset, split: Split, fakes: &[u8]) -> Result<Vec<MetricsReport>> {
    let idx: Vec<usize> = ds
        .split_indices(split)
        .into_iter()
        .filter(|i| ds.samples[*i].domain == 0 || fakes.contains(&ds.samples[*i].domain))
        .collect();
    let samples: Vec<&Sample> = idx.iter().map(|i| &ds.samples[*i]).collect();
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let labels: Vec<bool> = samples.iter().map(|s| s.is_fake()).collect();
    let probs = det.probabilities(&images, CHUNK)?;
    let frame = MetricsReport::from_scores(Level::Frame, split, fakes.to_vec(), &probs, &labels, None)?;
    let keys: Vec<u64> = samples.iter().map(|s| group_key(s)).collect();
    let (gs, gl) = group_scores(&probs, &labels, &keys)?;
    let group = MetricsReport::from_scores(Level::Group, split, fakes.to_vec(), &gs, &gl, None)?;
    Ok(vec![frame, group])
}

fn check_held_out(ds: &Dataset, hold_out: u8) -> Result<()> {
    if ds.manifest.train_domains.contains(&hold_out) {
        return Err(Error::Precondition(format!("domain {hold_out} was used in training")));
    }
    if !ds.manifest.config.domains_for(Split::Test).contains(&hold_out) {
        return Err(Error::Precondition(format!("domain {hold_out} has no test samples")));
    }
    Ok(())
}

/// Test reals vs test fakes of the held-out domain: `[frame, group]` reports.
pub fn evaluate_held_out(det: &StudentDetector, ds: &Dataset, hold_out: u8) -> Result<Vec<MetricsReport>> {
    check_held_out(ds, hold_out)?;
    evaluate_domains(det, ds, Split::Test, &[hold_out])
}

/// Validation reals vs every training forgery domain.
pub fn evaluate_training_domains(det: &StudentDetector, ds: &Dataset) -> Result<Vec<MetricsReport>> {
    let fakes: Vec<u8> = ds.manifest.train_domains.iter().copied().filter(|d| *d != 0).collect();
    evaluate_domains(det, ds, Split::Val, &fakes)
}

/// Clean row first, then every (kind, severity) in kind-major order. Frame level.
pub fn robustness_sweep(
    det: &StudentDetector,
    ds: &Dataset,
    hold_out: u8,
    kinds: &[PerturbKind],
    seed: u64,
) -> Result<Vec<MetricsReport>> {
    check_held_out(ds, hold_out)?;
    let samples: Vec<(usize, &Sample)> = ds
        .split_indices(Split::Test)
        .into_iter()
        .map(|i| (i, &ds.samples[i]))
        .filter(|(_, s)| s.domain == 0 || s.domain == hold_out)
        .collect();
    let labels: Vec<bool> = samples.iter().map(|(_, s)| s.is_fake()).collect();
    let clean = evaluate_held_out(det, ds, hold_out)?.remove(0);
    let cells: Vec<(PerturbKind, u8)> =
        kinds.iter().flat_map(|k| (1..=SEVERITY_LEVELS).map(move |s| (*k, s))).collect();
    let rows: Vec<MetricsReport> = cells
        .par_iter()
        .map(|&(kind, severity)| {
            let degraded: Vec<Sample> = samples
                .iter()
                .map(|(i, s)| perturb(s, kind, severity, rng::derive(seed, "perturb-sample", *i as u64)))
                .collect::<Result<_>>()?;
            let images: Vec<&Image> = degraded.iter().map(|s| &s.image).collect();
            let probs = det.probabilities(&images, CHUNK)?;
            MetricsReport::from_scores(
                Level::Frame,
                Split::Test,
                vec![hold_out],
                &probs,
                &labels,
                Some(Perturbation { kind, severity }),
            )
        })
        .collect::<Result<_>>()?;
    Ok(std::iter::once(clean).chain(rows).collect())
}

/// AUC at severity 0 minus AUC at the highest severity, per kind.
pub fn auc_drops(rows: &[MetricsReport]) -> Vec<(PerturbKind, f64)> {
    let clean = rows.iter().find(|r| r.perturbation.is_none()).map_or(f64::NAN, |r| r.auc);
    rows.iter()
        .filter_map(|r| match &r.perturbation {
            Some(p) if p.severity == SEVERITY_LEVELS => Some((p.kind, clean - r.auc)),
            _ => None,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DatasetConfig, PERTURB_KINDS};
    use crate::encoders::{Encoder, EncoderSpec, Head};

    fn setup() -> (StudentDetector, Dataset) {
        let cfg = DatasetConfig { identities: 10, images_per_identity: 2, m: 3, hold_out: Some(3), ..Default::default() };
        let ds = Dataset::generate(&cfg).unwrap();
        let spec = EncoderSpec { widths: vec![4, 4], ..Default::default() };
        let det = StudentDetector {
            student: Encoder::init(&spec, &mut rng::stream(0, "s", 0)),
            binary_head: Head::init(1, 4, &mut rng::stream(0, "h", 0)),
            spec,
        };
        (det, ds)
    }

    #[test]
    fn held_out_counts_and_determinism() {
        let (det, ds) = setup();
        let reports = evaluate_held_out(&det, &ds, 3).unwrap();
        let counts = &ds.manifest.counts[&Split::Test];
        assert_eq!(reports[0].n_pos, counts[&3]);
        assert_eq!(reports[0].n_neg, counts[&0]);
        assert_eq!(reports[1].level, Level::Group);
        assert_eq!(reports, evaluate_held_out(&det, &ds, 3).unwrap());
        assert!(matches!(evaluate_held_out(&det, &ds, 1), Err(Error::Precondition(_))));
        let train = evaluate_training_domains(&det, &ds).unwrap();
        assert_eq!(train[0].domains, vec![1, 2]);
    }

    #[test]
    fn sweep_shape_and_clean_row() {
        let (det, ds) = setup();
        let rows = robustness_sweep(&det, &ds, 3, &PERTURB_KINDS, 1).unwrap();
        assert_eq!(rows.len(), 26);
        assert_eq!(rows[0], evaluate_held_out(&det, &ds, 3).unwrap()[0]);
        assert_eq!(auc_drops(&rows).len(), 5);
        assert_eq!(rows, robustness_sweep(&det, &ds, 3, &PERTURB_KINDS, 1).unwrap());
    }
}
