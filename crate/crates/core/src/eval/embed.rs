//! Student-feature export with a two-component principal projection.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{Image, Sample};
use crate::encoders::StudentDetector;
use crate::error::{Error, Result};

pub const EMBEDDINGS_FILE: &str = "embeddings.tsv";
pub const PCA_FILE: &str = "pca.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit-norm principal directions, strongest first.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
}

impl Pca {
    /// Fit `k` components to the rows of `rows`. Each direction's sign is fixed
    /// so its largest-magnitude entry is positive.
    pub fn fit(rows: &[Vec<f64>], k: usize) -> Result<Self> {
        let n = rows.len();
        let p = rows.first().map_or(0, Vec::len);
        if n < 2 || p == 0 || rows.iter().any(|r| r.len() != p) {
            return Err(Error::Shape(format!("need at least 2 equal-length rows, got {n}")));
        }
        let mean: Vec<f64> = (0..p).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
        let x = DMatrix::from_fn(n, p, |i, j| rows[i][j] - mean[j]);
        let svd = x.svd(false, true);
        let vt = svd.v_t.ok_or_else(|| Error::Consistency("SVD did not return directions".into()))?;
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|a, b| svd.singular_values[*b].total_cmp(&svd.singular_values[*a]));
        let mut components = Vec::new();
        let mut explained_variance = Vec::new();
        for &i in order.iter().take(k) {
            let mut c: Vec<f64> = vt.row(i).iter().copied().collect();
            let lead = c.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            if lead < 0.0 {
                c.iter_mut().for_each(|v| *v = -*v);
            }
            components.push(c);
            explained_variance.push(svd.singular_values[i].powi(2) / (n as f64 - 1.0));
        }
        while components.len() < k {
            components.push(vec![0.0; p]);
            explained_variance.push(0.0);
        }
        Ok(Pca { mean, components, explained_variance })
    }

    pub fn project(&self, row: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(row).zip(&self.mean).map(|((c, x), m)| c * (x - m)).sum())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub identity_id: u32,
    pub domain: u8,
    pub fake: bool,
    pub projection: Vec<f64>,
    pub features: Vec<f64>,
}

/// Student features of `samples`, their 2-D projection, written to
/// `embeddings.tsv` and `pca.json` under `out`.
pub fn export_embeddings(det: &StudentDetector, samples: &[&Sample], out: &Path) -> Result<(Vec<EmbeddingRow>, Pca)> {
    let mut features = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(64) {
        let images: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
        let (f, _) = det.forward(&images)?;
        features.extend((0..f.batch()).map(|j| f.row(j).to_vec()));
    }
    let pca = Pca::fit(&features, 2)?;
    let rows: Vec<EmbeddingRow> = samples
        .iter()
        .zip(features)
        .map(|(s, f)| EmbeddingRow {
            identity_id: s.identity_id,
            domain: s.domain,
            fake: s.is_fake(),
            projection: pca.project(&f),
            features: f,
        })
        .collect();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join(EMBEDDINGS_FILE);
    let mut text = String::from("identity_id\tdomain\tlabel\tpc1\tpc2");
    for j in 0..rows.first().map_or(0, |r| r.features.len()) {
        text.push_str(&format!("\tf{j}"));
    }
    text.push('\n');
    for r in &rows {
        text.push_str(&format!("{}\t{}\t{}\t{}\t{}", r.identity_id, r.domain, u8::from(r.fake), r.projection[0], r.projection[1]));
        for v in &r.features {
            text.push_str(&format!("\t{v}"));
        }
        text.push('\n');
    }
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))?;
    let pca_path = out.join(PCA_FILE);
    fs::write(&pca_path, serde_json::to_string_pretty(&pca)?).map_err(|e| Error::io(&pca_path, e))?;
    Ok((rows, pca))
}

/// Parse `embeddings.tsv` back into rows.
pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |l: &str| Error::Consistency(format!("malformed embedding row {l:?}"));
    text.lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() < 5 {
                return Err(bad(l));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(l));
            Ok(EmbeddingRow {
                identity_id: f[0].parse().map_err(|_| bad(l))?,
                domain: f[1].parse().map_err(|_| bad(l))?,
                fake: f[2] == "1",
                projection: vec![num(f[3])?, num(f[4])?],
                features: f[5..].iter().map(|s| num(s)).collect::<Result<_>>()?,
            })
        })
        .collect()
}
