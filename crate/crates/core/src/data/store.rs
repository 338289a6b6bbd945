use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Cursor;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::generate::{apply_forgery, generate_real_with, ImageGeometry};
use super::perturb::PERTURB_KINDS;
use super::{Image, Sample, Split, MAX_METHOD};
use crate::error::{Error, Result};
use crate::rng;

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const META_FILE: &str = "dataset.json";
pub const MANIFEST_HEADER: &str = "# lsda-manifest v1\tpath\tidentity_id\tdomain\tgroup_id\tsplit";
const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub identities: usize,
    pub images_per_identity: usize,
    /// Number of forgery methods generated (1..=m).
    pub m: u8,
    /// Forgery domain excluded from train/val and kept only in test.
    pub hold_out: Option<u8>,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub group_size: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            identities: 200,
            images_per_identity: 4,
            m: 5,
            hold_out: Some(5),
            seed: 0,
            height: 32,
            width: 32,
            group_size: 4,
            train_fraction: 0.6,
            val_fraction: 0.2,
        }
    }
}

impl DatasetConfig {
    fn geometry(&self) -> ImageGeometry {
        ImageGeometry { height: self.height, width: self.width, group_size: self.group_size }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 2 || self.m > MAX_METHOD {
            return Err(Error::Config(format!("m must be in 2..={MAX_METHOD}, got {}", self.m)));
        }
        if let Some(j) = self.hold_out {
            if j == 0 || j > self.m {
                return Err(Error::Config(format!("hold_out {j} is not a forgery domain of 1..={}", self.m)));
            }
        }
        if self.images_per_identity == 0 || self.group_size == 0 {
            return Err(Error::Config("images_per_identity and group_size must be positive".into()));
        }
        let f = (self.train_fraction, self.val_fraction);
        if !(f.0 > 0.0 && f.1 >= 0.0 && f.0 + f.1 < 1.0) {
            return Err(Error::Config(format!("bad split fractions {f:?}")));
        }
        let (tr, va, te) = self.split_sizes();
        if tr < 2 || va < 1 || te < 1 {
            return Err(Error::Config(format!(
                "{} identities give splits ({tr}, {va}, {te}); need >= 2 train and >= 1 val/test",
                self.identities
            )));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config("images must be at least 8x8".into()));
        }
        Ok(())
    }

    fn split_sizes(&self) -> (usize, usize, usize) {
        let n = self.identities;
        let tr = (n as f64 * self.train_fraction).floor() as usize;
        let va = (n as f64 * self.val_fraction).floor() as usize;
        (tr, va, n.saturating_sub(tr + va))
    }

    /// Domains present in a split.
    pub fn domains_for(&self, split: Split) -> Vec<u8> {
        let all = 0..=self.m;
        match (split, self.hold_out) {
            (Split::Test, Some(j)) => vec![0, j],
            (Split::Test, None) => all.collect(),
            (_, j) => all.filter(|d| Some(*d) != j).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbSchedule {
    pub parameter: String,
    pub levels: [f64; 5],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub config: DatasetConfig,
    /// Domains seen in training, ascending; a domain's model label is its index here.
    pub train_domains: Vec<u8>,
    pub counts: BTreeMap<Split, BTreeMap<u8, usize>>,
    pub perturbations: BTreeMap<String, PerturbSchedule>,
    /// SHA-256 of the manifest records file.
    pub manifest_sha256: String,
    /// SHA-256 over the records file followed by every image file in record order.
    pub content_sha256: String,
}

impl DatasetManifest {
    pub fn m(&self) -> u8 {
        self.config.m
    }

    pub fn hold_out(&self) -> Option<u8> {
        self.config.hold_out
    }

    /// Number of forgery domains the model trains on.
    pub fn train_fake_domains(&self) -> usize {
        self.train_domains.len() - 1
    }

    pub fn label_of(&self, domain: u8) -> Option<usize> {
        self.train_domains.iter().position(|d| *d == domain)
    }
}

fn perturbation_registry() -> BTreeMap<String, PerturbSchedule> {
    PERTURB_KINDS
        .iter()
        .map(|k| (k.name().to_string(), PerturbSchedule { parameter: k.parameter_name().into(), levels: k.schedule() }))
        .collect()
}

/// An in-memory benchmark with its alignment index.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
    paths: Vec<String>,
    /// (split, identity) → frames → domain → sample index.
    frames: BTreeMap<(Split, u32), Vec<BTreeMap<u8, usize>>>,
}

fn sample_path(s: &Sample) -> String {
    format!("images/{}/i{:05}_f{:03}_d{}.png", s.split, s.identity_id, s.frame, s.domain)
}

/// Identity sets of the three splits must be pairwise disjoint.
pub fn check_split_hygiene(samples: &[Sample]) -> Result<()> {
    let mut owner: BTreeMap<u32, Split> = BTreeMap::new();
    for s in samples {
        match owner.insert(s.identity_id, s.split) {
            Some(prev) if prev != s.split => {
                return Err(Error::Consistency(format!(
                    "identity {} appears in both {prev} and {}",
                    s.identity_id, s.split
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

impl Dataset {
    /// Generate the benchmark in memory.
    pub fn generate(config: &DatasetConfig) -> Result<Dataset> {
        config.validate()?;
        let (n_train, n_val, _) = config.split_sizes();
        let mut ids: Vec<u32> = (0..config.identities as u32).collect();
        ids.shuffle(&mut rng::stream(config.seed, "identity-split", 0));
        let split_of = |id: u32| {
            let pos = ids.iter().position(|x| *x == id).expect("identity listed");
            if pos < n_train {
                Split::Train
            } else if pos < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            }
        };
        let reals = generate_real_with(
            &config.geometry(),
            0..config.identities as u32,
            config.images_per_identity,
            config.seed,
        )?;
        let jobs: Vec<(usize, u8)> = reals
            .iter()
            .enumerate()
            .flat_map(|(i, s)| config.domains_for(split_of(s.identity_id)).into_iter().map(move |d| (i, d)))
            .collect();
        let mut samples: Vec<Sample> = jobs
            .par_iter()
            .map(|&(i, d)| {
                let real = &reals[i];
                let mut s = if d == 0 {
                    real.clone()
                } else {
                    let key = (u64::from(real.identity_id) << 32) | u64::from(real.frame);
                    apply_forgery(real, d, rng::derive(config.seed, "forgery-sample", key))?
                };
                s.split = split_of(s.identity_id);
                Ok(s)
            })
            .collect::<Result<_>>()?;
        samples.sort_by_key(|s| (s.split, s.identity_id, s.frame, s.domain));
        Dataset::assemble(config.clone(), samples, None)
    }

    fn assemble(config: DatasetConfig, samples: Vec<Sample>, hashes: Option<(String, String)>) -> Result<Dataset> {
        check_split_hygiene(&samples)?;
        let mut counts: BTreeMap<Split, BTreeMap<u8, usize>> = BTreeMap::new();
        let mut frames: BTreeMap<(Split, u32), Vec<BTreeMap<u8, usize>>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            *counts.entry(s.split).or_default().entry(s.domain).or_default() += 1;
            let list = frames.entry((s.split, s.identity_id)).or_default();
            let f = s.frame as usize;
            if list.len() <= f {
                list.resize(f + 1, BTreeMap::new());
            }
            if list[f].insert(s.domain, i).is_some() {
                return Err(Error::Consistency(format!(
                    "identity {} frame {f} has two domain-{} images",
                    s.identity_id, s.domain
                )));
            }
        }
        for ((split, id), list) in &frames {
            let expect: BTreeSet<u8> = config.domains_for(*split).into_iter().collect();
            for (f, by_domain) in list.iter().enumerate() {
                let have: BTreeSet<u8> = by_domain.keys().copied().collect();
                if have != expect {
                    return Err(Error::Consistency(format!(
                        "{split} identity {id} frame {f} has domains {have:?}, expected {expect:?}"
                    )));
                }
            }
        }
        let paths = samples.iter().map(sample_path).collect();
        let (manifest_sha256, content_sha256) = hashes.unwrap_or_default();
        let manifest = DatasetManifest {
            schema_version: SCHEMA_VERSION,
            train_domains: config.domains_for(Split::Train),
            config,
            counts,
            perturbations: perturbation_registry(),
            manifest_sha256,
            content_sha256,
        };
        Ok(Dataset { manifest, samples, paths, frames })
    }

    pub fn path_of(&self, index: usize) -> &str {
        &self.paths[index]
    }

    fn records(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for (s, p) in self.samples.iter().zip(&self.paths) {
            out.push_str(&format!("{p}\t{}\t{}\t{}\t{}\n", s.identity_id, s.domain, s.group_id, s.split));
        }
        out
    }

    /// Write images, the records file and the metadata file; fills in the hashes.
    pub fn write(&mut self, dir: &Path) -> Result<()> {
        for split in Split::ALL {
            let d = dir.join("images").join(split.as_str());
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let encoded: Vec<Vec<u8>> = self
            .samples
            .par_iter()
            .zip(self.paths.par_iter())
            .map(|(s, p)| {
                let bytes = encode_png(&s.image).map_err(|m| Error::Image { path: p.into(), message: m })?;
                let path = dir.join(p);
                fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
                Ok(bytes)
            })
            .collect::<Result<_>>()?;
        let records = self.records();
        let mpath = dir.join(MANIFEST_FILE);
        fs::write(&mpath, &records).map_err(|e| Error::io(&mpath, e))?;
        let mut content = Sha256::new();
        content.update(records.as_bytes());
        for b in &encoded {
            content.update(b);
        }
        self.manifest.manifest_sha256 = hex::encode(Sha256::digest(records.as_bytes()));
        self.manifest.content_sha256 = hex::encode(content.finalize());
        let meta = dir.join(META_FILE);
        let json = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(&meta, json + "\n").map_err(|e| Error::io(&meta, e))?;
        Ok(())
    }

    /// Load a dataset written by [`Dataset::write`], verifying counts and the records hash.
    pub fn load(dir: &Path) -> Result<Dataset> {
        let meta_path = dir.join(META_FILE);
        if !meta_path.exists() {
            return Err(Error::Missing(format!("no dataset at {}", dir.display())));
        }
        let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let stored: DatasetManifest = serde_json::from_str(&meta_text)?;
        let mpath = dir.join(MANIFEST_FILE);
        let records = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let digest = hex::encode(Sha256::digest(records.as_bytes()));
        if digest != stored.manifest_sha256 {
            return Err(Error::Consistency(format!("manifest hash {digest} != recorded {}", stored.manifest_sha256)));
        }
        let mut lines = records.lines();
        if lines.next() != Some(MANIFEST_HEADER) {
            return Err(Error::Consistency("unsupported manifest header".into()));
        }
        let parsed: Vec<(String, u32, u8, u32, Split)> = lines
            .filter(|l| !l.is_empty())
            .map(parse_record)
            .collect::<Result<_>>()?;
        let (h, w) = (stored.config.height, stored.config.width);
        let images: Vec<Image> = parsed
            .par_iter()
            .map(|(p, ..)| {
                let path = dir.join(p);
                let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                decode_png(&bytes, h, w).map_err(|m| Error::Image { path, message: m })
            })
            .collect::<Result<_>>()?;
        let mut next_frame: BTreeMap<(u32, u8), u32> = BTreeMap::new();
        let samples: Vec<Sample> = parsed
            .iter()
            .zip(images)
            .map(|((_, id, d, g, split), image)| {
                let f = next_frame.entry((*id, *d)).or_default();
                let frame = *f;
                *f += 1;
                Sample { image, identity_id: *id, domain: *d, group_id: *g, frame, split: *split }
            })
            .collect();
        let ds = Dataset::assemble(
            stored.config.clone(),
            samples,
            Some((stored.manifest_sha256.clone(), stored.content_sha256.clone())),
        )?;
        if ds.manifest.counts != stored.counts {
            return Err(Error::Consistency("image counts differ from recorded counts".into()));
        }
        if ds.paths.iter().zip(&parsed).any(|(a, b)| *a != b.0) {
            return Err(Error::Consistency("record paths do not follow the naming scheme".into()));
        }
        Ok(ds)
    }

    pub fn identities(&self, split: Split) -> Vec<u32> {
        self.frames.range((split, 0)..=(split, u32::MAX)).map(|((_, id), _)| *id).collect()
    }

    pub fn frame_count(&self, split: Split, identity: u32) -> usize {
        self.frames.get(&(split, identity)).map_or(0, Vec::len)
    }

    /// Sample index of (split, identity, frame, domain).
    pub fn lookup(&self, split: Split, identity: u32, frame: usize, domain: u8) -> Option<usize> {
        self.frames.get(&(split, identity))?.get(frame)?.get(&domain).copied()
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|i| self.samples[*i].split == split).collect()
    }
}

fn parse_record(line: &str) -> Result<(String, u32, u8, u32, Split)> {
    let f: Vec<&str> = line.split('\t').collect();
    let bad = || Error::Consistency(format!("malformed manifest record {line:?}"));
    if f.len() != 5 {
        return Err(bad());
    }
    Ok((
        f[0].to_string(),
        f[1].parse().map_err(|_| bad())?,
        f[2].parse().map_err(|_| bad())?,
        f[3].parse().map_err(|_| bad())?,
        f[4].parse().map_err(|_| bad())?,
    ))
}

pub(crate) fn encode_png(img: &Image) -> std::result::Result<Vec<u8>, String> {
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| e.to_string())?;
        w.write_image_data(&img.to_u8()).map_err(|e| e.to_string())?;
    }
    Ok(buf)
}

pub(crate) fn decode_png(bytes: &[u8], height: usize, width: usize) -> std::result::Result<Image, String> {
    let dec = png::Decoder::new(Cursor::new(bytes));
    let mut reader = dec.read_info().map_err(|e| e.to_string())?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or("image too large")?];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(format!("expected 8-bit RGB, got {:?} {:?}", info.color_type, info.bit_depth));
    }
    if info.width as usize != width || info.height as usize != height {
        return Err(format!("expected {width}x{height}, got {}x{}", info.width, info.height));
    }
    Ok(Image::from_u8(height, width, &buf[..info.buffer_size()]))
}

/// Load any 8-bit RGB PNG (used by inference on arbitrary directories).
pub fn read_png(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let dec = png::Decoder::new(Cursor::new(&bytes[..]));
    let reader = dec.read_info().map_err(|e| Error::Image { path: path.into(), message: e.to_string() })?;
    let (w, h) = (reader.info().width as usize, reader.info().height as usize);
    decode_png(&bytes, h, w).map_err(|m| Error::Image { path: path.into(), message: m })
}

/// Generate, persist and return the manifest.
pub fn build_dataset(config: &DatasetConfig, out: &Path) -> Result<DatasetManifest> {
    let mut ds = Dataset::generate(config)?;
    ds.write(out)?;
    Ok(ds.manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(hold_out: Option<u8>, m: u8) -> DatasetConfig {
        DatasetConfig { identities: 10, images_per_identity: 2, m, hold_out, seed: 3, ..Default::default() }
    }

    #[test]
    fn hold_out_filters_domains() {
        let ds = Dataset::generate(&small(Some(4), 4)).unwrap();
        let domains = |split| ds.manifest.counts[&split].keys().copied().collect::<Vec<u8>>();
        assert_eq!(domains(Split::Train), vec![0, 1, 2, 3]);
        assert_eq!(domains(Split::Val), vec![0, 1, 2, 3]);
        assert_eq!(domains(Split::Test), vec![0, 4]);
        assert_eq!(ds.manifest.train_domains, vec![0, 1, 2, 3]);
    }

    #[test]
    fn splits_are_identity_disjoint_and_aligned() {
        let ds = Dataset::generate(&small(None, 3)).unwrap();
        let sets: Vec<BTreeSet<u32>> = Split::ALL.iter().map(|s| ds.identities(*s).into_iter().collect()).collect();
        assert!(sets[0].is_disjoint(&sets[1]) && sets[0].is_disjoint(&sets[2]) && sets[1].is_disjoint(&sets[2]));
        assert_eq!(sets.iter().map(BTreeSet::len).sum::<usize>(), 10);
        for id in ds.identities(Split::Train) {
            for f in 0..2 {
                for d in 0..=3 {
                    let i = ds.lookup(Split::Train, id, f, d).unwrap();
                    assert_eq!((ds.samples[i].identity_id, ds.samples[i].domain), (id, d));
                }
            }
        }
    }

    #[test]
    fn identity_overlap_is_reported_not_fixed() {
        let ds = Dataset::generate(&small(None, 2)).unwrap();
        let mut samples = ds.samples.clone();
        let test_id = ds.identities(Split::Test)[0];
        let leaked = samples.iter_mut().find(|s| s.identity_id == test_id).unwrap();
        leaked.split = Split::Train;
        assert!(matches!(check_split_hygiene(&samples), Err(Error::Consistency(_))));
    }

    #[test]
    fn config_validation() {
        assert!(matches!(Dataset::generate(&small(None, 1)), Err(Error::Config(_))));
        assert!(matches!(Dataset::generate(&small(Some(3), 2)), Err(Error::Config(_))));
        let tiny = DatasetConfig { identities: 3, ..small(None, 2) };
        assert!(matches!(Dataset::generate(&tiny), Err(Error::Config(_))));
    }

    #[test]
    fn png_roundtrip_is_lossless_for_quantized_images() {
        let ds = Dataset::generate(&small(None, 2)).unwrap();
        let img = &ds.samples[5].image;
        let back = decode_png(&encode_png(img).unwrap(), 32, 32).unwrap();
        assert_eq!(&back, img);
    }
}
