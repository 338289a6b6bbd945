use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::{Image, Sample, Split, MAX_METHOD};
use crate::error::{Error, Result};
use crate::rng;

/// Stripe artifact frequency in cycles per pixel along the column axis.
pub const STRIPE_FREQUENCY: f64 = 0.25;
const STRIPE_AMPLITUDE: f64 = 0.1;
const BLEND_CELL: usize = 4;
const BLUR_RADIUS: isize = 2;
const MAX_SHIFT: i64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageGeometry {
    pub height: usize,
    pub width: usize,
    /// Consecutive frames of one identity sharing a group id.
    pub group_size: usize,
}

impl Default for ImageGeometry {
    fn default() -> Self {
        ImageGeometry { height: 32, width: 32, group_size: 4 }
    }
}

#[derive(Debug, Clone)]
struct Blob {
    cx: f64,
    cy: f64,
    sigma: f64,
    color: [f64; 3],
}

/// Procedural base pattern: shaded background, coloured blobs, a faint texture.
#[derive(Debug, Clone)]
struct Pattern {
    base: [f64; 3],
    gradient: [[f64; 2]; 3],
    blobs: Vec<Blob>,
    wave: [f64; 3],
    wave_k: [f64; 2],
    wave_phase: f64,
}

impl Pattern {
    fn sample(r: &mut rng::Rng, height: usize, width: usize) -> Self {
        let mut base = [0.0; 3];
        let mut gradient = [[0.0; 2]; 3];
        for c in 0..3 {
            base[c] = r.random_range(0.3..0.7);
            gradient[c] = [r.random_range(-0.2..0.2), r.random_range(-0.2..0.2)];
        }
        let (h, w) = (height as f64, width as f64);
        let blobs = (0..4)
            .map(|_| Blob {
                cx: r.random_range(0.2 * w..0.8 * w),
                cy: r.random_range(0.2 * h..0.8 * h),
                sigma: r.random_range(0.08 * w..0.18 * w),
                color: [r.random_range(-0.35..0.35), r.random_range(-0.35..0.35), r.random_range(-0.35..0.35)],
            })
            .collect();
        let wave = [r.random_range(0.0..0.05), r.random_range(0.0..0.05), r.random_range(0.0..0.05)];
        let wave_k = [r.random_range(-0.6..0.6), r.random_range(-0.6..0.6)];
        Pattern { base, gradient, blobs, wave, wave_k, wave_phase: r.random_range(0.0..std::f64::consts::TAU) }
    }

    fn eval(&self, x: f64, y: f64, height: usize, width: usize, ch: usize) -> f64 {
        let (u, v) = (x / width as f64 - 0.5, y / height as f64 - 0.5);
        let mut val = self.base[ch] + self.gradient[ch][0] * u + self.gradient[ch][1] * v;
        for b in &self.blobs {
            let d2 = (x - b.cx).powi(2) + (y - b.cy).powi(2);
            val += b.color[ch] * (-d2 / (2.0 * b.sigma * b.sigma)).exp();
        }
        val + self.wave[ch] * (self.wave_k[0] * x + self.wave_k[1] * y + self.wave_phase).sin()
    }

    fn render(&self, height: usize, width: usize, dx: f64, dy: f64) -> Image {
        let mut img = Image::zeros(height, width);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..3 {
                    let i = img.idx(r, c, ch);
                    img.data[i] = self.eval(c as f64 - dx, r as f64 - dy, height, width, ch);
                }
            }
        }
        img
    }
}

fn identity_pattern(seed: u64, identity: u32, g: &ImageGeometry) -> Pattern {
    Pattern::sample(&mut rng::stream(seed, "identity-pattern", u64::from(identity)), g.height, g.width)
}

fn render_frame(seed: u64, identity: u32, frame: u32, pattern: &Pattern, g: &ImageGeometry) -> Image {
    let key = (u64::from(identity) << 32) | u64::from(frame);
    let mut r = rng::stream(seed, "frame-jitter", key);
    let dx = r.random_range(-MAX_SHIFT..=MAX_SHIFT) as f64;
    let dy = r.random_range(-MAX_SHIFT..=MAX_SHIFT) as f64;
    let gain = r.random_range(0.92..1.08);
    let noise = Normal::new(0.0, 0.01).expect("valid sigma");
    let mut img = pattern.render(g.height, g.width, dx, dy);
    for v in img.data.iter_mut() {
        *v = *v * gain + noise.sample(&mut r);
    }
    img.quantize_u8();
    img
}

/// Pristine samples with default 32×32 geometry.
pub fn generate_real(identity_count: usize, images_per_identity: usize, seed: u64) -> Result<Vec<Sample>> {
    generate_real_with(&ImageGeometry::default(), 0..identity_count as u32, images_per_identity, seed)
}

/// Pristine samples for the given identity ids. Output order is (identity, frame)
/// and each identity draws from its own stream, so parallelism never changes bytes.
pub fn generate_real_with(
    geometry: &ImageGeometry,
    identities: std::ops::Range<u32>,
    images_per_identity: usize,
    seed: u64,
) -> Result<Vec<Sample>> {
    if identities.len() < 2 {
        return Err(Error::Argument(format!("need at least 2 identities, got {}", identities.len())));
    }
    if images_per_identity == 0 {
        return Err(Error::Argument("images_per_identity must be at least 1".into()));
    }
    if geometry.group_size == 0 || geometry.height < 8 || geometry.width < 8 {
        return Err(Error::Argument(format!("unusable geometry {geometry:?}")));
    }
    let groups_per_identity = images_per_identity.div_ceil(geometry.group_size) as u32;
    let per_identity: Vec<Vec<Sample>> = identities
        .into_par_iter()
        .map(|id| {
            let pattern = identity_pattern(seed, id, geometry);
            (0..images_per_identity as u32)
                .map(|frame| Sample {
                    image: render_frame(seed, id, frame, &pattern, geometry),
                    identity_id: id,
                    domain: 0,
                    group_id: id * groups_per_identity + frame / geometry.group_size as u32,
                    frame,
                    split: Split::Train,
                })
                .collect()
        })
        .collect();
    Ok(per_identity.into_iter().flatten().collect())
}

/// Rows and columns `[start, end)` of the manipulated central region.
pub fn forgery_region(height: usize, width: usize) -> ((usize, usize), (usize, usize)) {
    ((height / 4, height - height / 4), (width / 4, width - width / 4))
}

fn blend_seam(img: &Image, strength: f64, r: &mut rng::Rng) -> Image {
    let donor = Pattern::sample(r, img.height, img.width).render(img.height, img.width, 0.0, 0.0);
    let ((r0, r1), (c0, c1)) = forgery_region(img.height, img.width);
    let mut out = img.clone();
    for row in r0..r1 {
        for col in c0..c1 {
            let cell = (row - r0) / BLEND_CELL + (col - c0) / BLEND_CELL;
            let w = if cell % 2 == 0 { 0.9 } else { 0.45 };
            for ch in 0..3 {
                let i = img.idx(row, col, ch);
                out.data[i] = img.data[i] + strength * w * (donor.data[i] - img.data[i]);
            }
        }
    }
    out
}

fn regional_blur(img: &Image, strength: f64) -> Image {
    let ((r0, r1), (c0, c1)) = forgery_region(img.height, img.width);
    let (h, w) = (img.height as isize, img.width as isize);
    let mut out = img.clone();
    for row in r0..r1 {
        for col in c0..c1 {
            for ch in 0..3 {
                let mut acc = 0.0;
                let mut n = 0.0;
                for dy in -BLUR_RADIUS..=BLUR_RADIUS {
                    for dx in -BLUR_RADIUS..=BLUR_RADIUS {
                        let (y, x) = (row as isize + dy, col as isize + dx);
                        if y >= 0 && y < h && x >= 0 && x < w {
                            acc += img.get(y as usize, x as usize, ch);
                            n += 1.0;
                        }
                    }
                }
                let i = img.idx(row, col, ch);
                out.data[i] = img.data[i] + strength * (acc / n - img.data[i]);
            }
        }
    }
    out
}

fn stripe_noise(img: &Image, strength: f64, r: &mut rng::Rng) -> Image {
    let phase = r.random_range(0.0..std::f64::consts::TAU);
    let ((r0, r1), (c0, c1)) = forgery_region(img.height, img.width);
    let mut out = img.clone();
    for row in r0..r1 {
        for col in c0..c1 {
            let s = STRIPE_AMPLITUDE * (std::f64::consts::TAU * STRIPE_FREQUENCY * col as f64 + phase).sin();
            for ch in 0..3 {
                let i = img.idx(row, col, ch);
                out.data[i] = img.data[i] + strength * s;
            }
        }
    }
    out
}

fn channel_permutation(img: &Image, strength: f64) -> Image {
    let ((r0, r1), (c0, c1)) = forgery_region(img.height, img.width);
    let mut out = img.clone();
    for row in r0..r1 {
        for col in c0..c1 {
            for ch in 0..3 {
                let i = img.idx(row, col, ch);
                let permuted = img.get(row, col, (ch + 1) % 3);
                out.data[i] = img.data[i] + strength * (permuted - img.data[i]);
            }
        }
    }
    out
}

fn artifact(img: &Image, method: u8, strength: f64, r: &mut rng::Rng) -> Image {
    match method {
        1 => blend_seam(img, strength, r),
        2 => regional_blur(img, strength),
        3 => stripe_noise(img, strength, r),
        4 => channel_permutation(img, strength),
        _ => unreachable!("artifact method checked by caller"),
    }
}

/// Forge a real sample with method 1..=5. Method 5 chains two distinct
/// randomly chosen base artifacts at half strength.
pub fn apply_forgery(sample: &Sample, method: u8, seed: u64) -> Result<Sample> {
    if sample.domain != 0 {
        return Err(Error::Precondition(format!("sample is already forged (domain {})", sample.domain)));
    }
    if !(1..=MAX_METHOD).contains(&method) {
        return Err(Error::Argument(format!("forgery method {method} outside 1..={MAX_METHOD}")));
    }
    let mut r = rng::stream(seed, "forgery", u64::from(method));
    let mut image = if method == MAX_METHOD {
        let first = r.random_range(1..=4u8);
        let mut second = r.random_range(1..=3u8);
        if second >= first {
            second += 1;
        }
        let once = artifact(&sample.image, first, 0.5, &mut r);
        artifact(&once, second, 0.5, &mut r)
    } else {
        artifact(&sample.image, method, 1.0, &mut r)
    };
    image.quantize_u8();
    Ok(Sample { image, domain: method, ..sample.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn real() -> Sample {
        generate_real(2, 1, 7).unwrap().remove(0)
    }

    #[test]
    fn generate_real_cardinality_and_determinism() {
        let a = generate_real(2, 1, 7).unwrap();
        assert_eq!(a.len(), 2);
        assert!(a.iter().all(|s| s.domain == 0));
        assert_ne!(a[0].identity_id, a[1].identity_id);
        let b = generate_real(2, 1, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|s| s.image.data.iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn identity_means_are_pairwise_distinct() {
        let samples = generate_real(50, 4, 1).unwrap();
        assert_eq!(samples.len(), 200);
        let n = samples[0].image.data.len();
        let means: Vec<Vec<f64>> = (0..50)
            .map(|id| {
                let mut m = vec![0.0; n];
                let own: Vec<_> = samples.iter().filter(|s| s.identity_id == id).collect();
                for s in &own {
                    m.iter_mut().zip(&s.image.data).for_each(|(a, b)| *a += b / own.len() as f64);
                }
                m
            })
            .collect();
        for i in 0..50 {
            for j in i + 1..50 {
                let d: f64 = means[i].iter().zip(&means[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                assert!(d > 0.0, "identities {i} and {j} coincide");
            }
        }
    }

    #[test]
    fn frames_of_one_identity_share_a_group() {
        let s = generate_real(3, 8, 2).unwrap();
        let id0: Vec<u32> = s.iter().filter(|s| s.identity_id == 0).map(|s| s.group_id).collect();
        assert_eq!(id0, vec![0, 0, 0, 0, 1, 1, 1, 1]);
        assert!(generate_real(1, 1, 0).is_err());
        assert!(generate_real(2, 0, 0).is_err());
    }

    #[test]
    fn forgeries_touch_only_the_central_region() {
        let s = real();
        let ((r0, r1), (c0, c1)) = forgery_region(32, 32);
        for method in 1..=5 {
            let f = apply_forgery(&s, method, 11).unwrap();
            assert_eq!(f.domain, method);
            assert_eq!((f.identity_id, f.group_id), (s.identity_id, s.group_id));
            let mut inside_changed = false;
            for row in 0..32 {
                for col in 0..32 {
                    for ch in 0..3 {
                        let changed = f.image.get(row, col, ch) != s.image.get(row, col, ch);
                        let inside = (r0..r1).contains(&row) && (c0..c1).contains(&col);
                        assert!(inside || !changed, "method {method} changed ({row},{col})");
                        inside_changed |= changed;
                    }
                }
            }
            assert!(inside_changed, "method {method} left the image untouched");
            assert_eq!(f, apply_forgery(&s, method, 11).unwrap());
        }
    }

    #[test]
    fn forgery_preconditions() {
        let s = real();
        let fake = apply_forgery(&s, 1, 0).unwrap();
        assert!(matches!(apply_forgery(&fake, 2, 0), Err(Error::Precondition(_))));
        assert!(matches!(apply_forgery(&s, 0, 0), Err(Error::Argument(_))));
        assert!(matches!(apply_forgery(&s, 6, 0), Err(Error::Argument(_))));
    }

    /// Naive DFT of the column profile of the residual; the stripe bin dominates.
    #[test]
    fn stripe_residual_peaks_at_stripe_frequency() {
        let s = real();
        let f = apply_forgery(&s, 3, 5).unwrap();
        let w = 32;
        let profile: Vec<f64> = (0..w)
            .map(|col| {
                (0..32)
                    .flat_map(|row| (0..3).map(move |ch| (row, ch)))
                    .map(|(row, ch)| f.image.get(row, col, ch) - s.image.get(row, col, ch))
                    .sum()
            })
            .collect();
        let power: Vec<f64> = (0..=w / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, v) in profile.iter().enumerate() {
                    let a = -std::f64::consts::TAU * (k * n) as f64 / w as f64;
                    re += v * a.cos();
                    im += v * a.sin();
                }
                re * re + im * im
            })
            .collect();
        let peak = (1..power.len()).max_by(|a, b| power[*a].total_cmp(&power[*b])).unwrap();
        assert_eq!(peak, (STRIPE_FREQUENCY * w as f64) as usize, "power {power:?}");
    }
}
