//! Ranking metrics for binary scores. Label `true` marks a positive (fake).

use std::collections::BTreeMap;

use crate::error::{Error, Result};

fn counts(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(bad) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Argument(format!("score {bad} is not a number")));
    }
    let pos = labels.iter().filter(|l| **l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Argument(format!("metrics need both classes, got {pos} positive and {neg} negative")));
    }
    Ok((pos, neg))
}

/// Indices sorted by descending score, cut into runs of equal score; each run
/// reported as (positives, negatives).
fn tie_groups(scores: &[f64], labels: &[bool]) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]));
    let mut groups = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (mut p, mut n) = (0, 0);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                p += 1;
            } else {
                n += 1;
            }
            i += 1;
        }
        groups.push((p, n));
    }
    groups
}

/// Probability that a random positive outranks a random negative, ties ½.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = counts(scores, labels)?;
    let mut wins = 0.0;
    let mut neg_below = neg as f64;
    for (p, n) in tie_groups(scores, labels) {
        neg_below -= n as f64;
        wins += p as f64 * (neg_below + 0.5 * n as f64);
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Average precision: Σ over distinct thresholds of Δrecall × precision.
pub fn ap(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _) = counts(scores, labels)?;
    let (mut tp, mut fp, mut total) = (0usize, 0usize, 0.0);
    for (p, n) in tie_groups(scores, labels) {
        tp += p;
        fp += n;
        if p > 0 {
            total += (p as f64 / pos as f64) * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(total)
}

/// ROC operating points `(false-accept, false-reject)` from the strictest
/// threshold downwards, starting at (0, 1).
fn roc_points(scores: &[f64], labels: &[bool], pos: usize, neg: usize) -> Vec<(f64, f64)> {
    let mut pts = vec![(0.0, 1.0)];
    let (mut tp, mut fp) = (0, 0);
    for (p, n) in tie_groups(scores, labels) {
        tp += p;
        fp += n;
        pts.push((fp as f64 / neg as f64, 1.0 - tp as f64 / pos as f64));
    }
    pts
}

/// First crossing of far − frr through zero, interpolated linearly.
pub(crate) fn crossing(points: &[(f64, f64)]) -> f64 {
    let d = |p: &(f64, f64)| p.0 - p.1;
    for w in points.windows(2) {
        let (da, db) = (d(&w[0]), d(&w[1]));
        if da == 0.0 {
            return w[0].0;
        }
        if da < 0.0 && db >= 0.0 {
            let t = da / (da - db);
            return w[0].0 + t * (w[1].0 - w[0].0);
        }
    }
    points.last().map_or(0.5, |p| p.0)
}

/// Equal error rate, linearly interpolated between the bracketing thresholds.
pub fn eer(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = counts(scores, labels)?;
    Ok(crossing(&roc_points(scores, labels, pos, neg)))
}

/// Mean score and label per group, in ascending group-id order.
pub fn group_scores(scores: &[f64], labels: &[bool], groups: &[u64]) -> Result<(Vec<f64>, Vec<bool>)> {
    if groups.len() != scores.len() {
        return Err(Error::Shape(format!("{} group ids for {} scores", groups.len(), scores.len())));
    }
    let mut acc: BTreeMap<u64, (f64, usize, bool)> = BTreeMap::new();
    for ((s, l), g) in scores.iter().zip(labels).zip(groups) {
        let e = acc.entry(*g).or_insert((0.0, 0, *l));
        if e.2 != *l {
            return Err(Error::Consistency(format!("group {g} mixes real and fake samples")));
        }
        e.0 += s;
        e.1 += 1;
    }
    Ok(acc.values().map(|(s, n, l)| (s / *n as f64, *l)).unzip())
}

/// [`auc`] over per-group mean scores.
pub fn group_auc(scores: &[f64], labels: &[bool], groups: &[u64]) -> Result<f64> {
    let (s, l) = group_scores(scores, labels, groups)?;
    auc(&s, &l)
}
