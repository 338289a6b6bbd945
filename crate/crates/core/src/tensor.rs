//! Dense row-major f64 tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Leading (batch) dimension.
    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Elements per batch row.
    pub fn row_len(&self) -> usize {
        if self.shape.is_empty() {
            0
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.row_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Concatenate along the batch axis.
    pub fn cat_batch(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::Shape("empty concat".into()))?;
        let tail = &first.shape[1..];
        let mut data = Vec::new();
        let mut b = 0;
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::Shape(format!("concat {:?} with {:?}", first.shape, p.shape)));
            }
            b += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = b;
        Ok(Tensor { shape, data })
    }

    /// Rows `[start, end)` along the batch axis.
    pub fn slice_batch(&self, start: usize, end: usize) -> Tensor {
        let n = self.row_len();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor { shape, data: self.data[start * n..end * n].to_vec() }
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Pack B images of H×W×3 (channel-last, as stored) into a B×3×H×W tensor.
pub fn images_to_nchw(images: &[&[f64]], height: usize, width: usize) -> Result<Tensor> {
    let plane = height * width;
    let mut data = vec![0.0; images.len() * 3 * plane];
    for (b, img) in images.iter().enumerate() {
        if img.len() != plane * 3 {
            return Err(Error::Shape(format!(
                "image has {} values, expected {}x{}x3",
                img.len(),
                height,
                width
            )));
        }
        let out = &mut data[b * 3 * plane..(b + 1) * 3 * plane];
        for p in 0..plane {
            for c in 0..3 {
                out[c * plane + p] = img[p * 3 + c];
            }
        }
    }
    Tensor::new(vec![images.len(), 3, height, width], data)
}
