//! Post-processing degradations at five severity levels.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Image, Sample};
use crate::error::{Error, Result};
use crate::rng;

pub const SEVERITY_LEVELS: u8 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbKind {
    Blur,
    GaussianNoise,
    BlockQuantize,
    Rescale,
    Contrast,
}

pub const PERTURB_KINDS: [PerturbKind; 5] = [
    PerturbKind::Blur,
    PerturbKind::GaussianNoise,
    PerturbKind::BlockQuantize,
    PerturbKind::Rescale,
    PerturbKind::Contrast,
];

const BLUR_SIGMA: [f64; 5] = [0.6, 1.0, 1.4, 1.8, 2.2];
const NOISE_SIGMA: [f64; 5] = [0.02, 0.04, 0.06, 0.08, 0.10];
const QUANT_STEP: [f64; 5] = [0.04, 0.08, 0.12, 0.18, 0.25];
const QUANT_BLOCK: usize = 4;
const RESCALE_FACTOR: [f64; 5] = [0.75, 0.6, 0.5, 0.4, 0.3];
const CONTRAST_GAIN: [f64; 5] = [0.8, 0.65, 0.5, 0.35, 0.2];

impl PerturbKind {
    pub fn name(self) -> &'static str {
        match self {
            PerturbKind::Blur => "blur",
            PerturbKind::GaussianNoise => "gaussian_noise",
            PerturbKind::BlockQuantize => "block_quantize",
            PerturbKind::Rescale => "rescale",
            PerturbKind::Contrast => "contrast",
        }
    }

    /// Parameter per severity 1..=5, as recorded in the dataset manifest.
    pub fn schedule(self) -> [f64; 5] {
        match self {
            PerturbKind::Blur => BLUR_SIGMA,
            PerturbKind::GaussianNoise => NOISE_SIGMA,
            PerturbKind::BlockQuantize => QUANT_STEP,
            PerturbKind::Rescale => RESCALE_FACTOR,
            PerturbKind::Contrast => CONTRAST_GAIN,
        }
    }

    pub fn parameter_name(self) -> &'static str {
        match self {
            PerturbKind::Blur => "gaussian_sigma_px",
            PerturbKind::GaussianNoise => "noise_sigma",
            PerturbKind::BlockQuantize => "residual_step",
            PerturbKind::Rescale => "downscale_factor",
            PerturbKind::Contrast => "contrast_gain",
        }
    }
}

impl fmt::Display for PerturbKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PerturbKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PERTURB_KINDS
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown perturbation kind {s:?}")))
    }
}

fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let (h, w) = (img.height as isize, img.width as isize);
    let pass = |src: &Image, horizontal: bool| {
        let mut out = src.clone();
        for r in 0..h {
            for c in 0..w {
                for ch in 0..3 {
                    let mut acc = 0.0;
                    for (k, d) in (-radius..=radius).enumerate() {
                        let (rr, cc) = if horizontal { (r, (c + d).clamp(0, w - 1)) } else { ((r + d).clamp(0, h - 1), c) };
                        acc += kernel[k] * src.get(rr as usize, cc as usize, ch);
                    }
                    let i = out.idx(r as usize, c as usize, ch);
                    out.data[i] = acc / norm;
                }
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

fn block_quantize(img: &Image, step: f64) -> Image {
    let mut out = img.clone();
    for br in (0..img.height).step_by(QUANT_BLOCK) {
        for bc in (0..img.width).step_by(QUANT_BLOCK) {
            let rows = br..(br + QUANT_BLOCK).min(img.height);
            let cols = bc..(bc + QUANT_BLOCK).min(img.width);
            for ch in 0..3 {
                let mut mean = 0.0;
                let mut n = 0.0;
                for r in rows.clone() {
                    for c in cols.clone() {
                        mean += img.get(r, c, ch);
                        n += 1.0;
                    }
                }
                mean /= n;
                for r in rows.clone() {
                    for c in cols.clone() {
                        let i = img.idx(r, c, ch);
                        out.data[i] = mean + ((img.data[i] - mean) / step).round() * step;
                    }
                }
            }
        }
    }
    out
}

fn bilinear_resize(img: &Image, height: usize, width: usize) -> Image {
    let mut out = Image::zeros(height, width);
    let sy = img.height as f64 / height as f64;
    let sx = img.width as f64 / width as f64;
    for r in 0..height {
        let y = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (img.height - 1) as f64);
        let (y0, fy) = (y.floor() as usize, y - y.floor());
        let y1 = (y0 + 1).min(img.height - 1);
        for c in 0..width {
            let x = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (img.width - 1) as f64);
            let (x0, fx) = (x.floor() as usize, x - x.floor());
            let x1 = (x0 + 1).min(img.width - 1);
            for ch in 0..3 {
                let top = img.get(y0, x0, ch) * (1.0 - fx) + img.get(y0, x1, ch) * fx;
                let bot = img.get(y1, x0, ch) * (1.0 - fx) + img.get(y1, x1, ch) * fx;
                let i = out.idx(r, c, ch);
                out.data[i] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Degrade a sample. Severity `s + 1` always uses a strictly stronger
/// parameter than `s`; labels are untouched and output is clipped to [0, 1].
pub fn perturb(sample: &Sample, kind: PerturbKind, severity: u8, seed: u64) -> Result<Sample> {
    if !(1..=SEVERITY_LEVELS).contains(&severity) {
        return Err(Error::Argument(format!("severity {severity} outside 1..={SEVERITY_LEVELS}")));
    }
    let p = kind.schedule()[usize::from(severity - 1)];
    let img = &sample.image;
    let mut out = match kind {
        PerturbKind::Blur => gaussian_blur(img, p),
        PerturbKind::GaussianNoise => {
            let mut r = rng::stream(seed, "perturb-noise", u64::from(severity));
            let noise = Normal::new(0.0, p).expect("positive sigma");
            let mut o = img.clone();
            o.data.iter_mut().for_each(|v| *v += noise.sample(&mut r));
            o
        }
        PerturbKind::BlockQuantize => block_quantize(img, p),
        PerturbKind::Rescale => {
            let h = ((img.height as f64 * p).round() as usize).max(1);
            let w = ((img.width as f64 * p).round() as usize).max(1);
            bilinear_resize(&bilinear_resize(img, h, w), img.height, img.width)
        }
        PerturbKind::Contrast => {
            let mut o = img.clone();
            o.data.iter_mut().for_each(|v| *v = 0.5 + p * (*v - 0.5));
            o
        }
    };
    out.clip();
    Ok(Sample { image: out, ..sample.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_real;

    #[test]
    fn schedules_are_strictly_monotone() {
        for kind in PERTURB_KINDS {
            let s = kind.schedule();
            let stronger = |a: f64, b: f64| match kind {
                PerturbKind::Rescale | PerturbKind::Contrast => b < a,
                _ => b > a,
            };
            assert!(s.windows(2).all(|w| stronger(w[0], w[1])), "{kind}");
        }
    }

    #[test]
    fn noise_severity_ordering_over_many_samples() {
        let samples = generate_real(25, 4, 3).unwrap();
        let mean_dist = |sev: u8| {
            samples
                .iter()
                .enumerate()
                .map(|(i, s)| perturb(s, PerturbKind::GaussianNoise, sev, i as u64).unwrap().image.l2_distance(&s.image))
                .sum::<f64>()
                / samples.len() as f64
        };
        assert_eq!(samples.len(), 100);
        assert!(mean_dist(5) >= mean_dist(1));
    }

    #[test]
    fn every_kind_changes_the_image_and_keeps_labels() {
        let s = generate_real(2, 1, 9).unwrap().remove(0);
        for kind in PERTURB_KINDS {
            for sev in 1..=5 {
                let p = perturb(&s, kind, sev, 1).unwrap();
                assert!(p.image.l2_distance(&s.image) > 0.0, "{kind} {sev}");
                assert_eq!((p.domain, p.identity_id, p.group_id), (s.domain, s.identity_id, s.group_id));
                assert!(p.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
                assert_eq!(p, perturb(&s, kind, sev, 1).unwrap());
            }
        }
        assert!(perturb(&s, PerturbKind::Blur, 0, 0).is_err());
        assert!(perturb(&s, PerturbKind::Blur, 6, 0).is_err());
        assert!("jpeg".parse::<PerturbKind>().is_err());
        assert_eq!("gaussian_noise".parse::<PerturbKind>().unwrap(), PerturbKind::GaussianNoise);
    }
}
