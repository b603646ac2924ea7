//! Dense row-major f32 tensor, the universal value carrier of the crate.

use crate::error::{Error, Result};

/// Contiguous row-major array of f32 with rank 1–4.
///
/// Extents of zero are permitted so that empty partitions (e.g. an edge set
/// with no members) have a natural representation; operations that cannot
/// accept empty operands reject them individually.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(Error::dim(format!("rank {} not in 1..=4", shape.len())));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    /// Identity matrix of extent `n`.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> f32) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(&mut f).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Extent along axis `i`.
    pub fn extent(&self, i: usize) -> usize {
        self.shape[i]
    }

    /// Number of rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[0]
    }

    /// Number of columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[1]
    }

    /// Row `r` of a rank-2 tensor as a slice.
    pub fn row(&self, r: usize) -> &[f32] {
        let n = self.cols();
        &self.data[r * n..(r + 1) * n]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        let n = self.cols();
        &mut self.data[r * n..(r + 1) * n]
    }

    pub fn at2(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.shape[1] + j]
    }

    pub fn at3(&self, c: usize, i: usize, j: usize) -> f32 {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + i) * w + j]
    }

    pub fn set3(&mut self, c: usize, i: usize, j: usize, v: f32) {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + i) * w + j] = v;
    }

    /// Channel `c` of a rank-3 tensor as a contiguous h*w slice.
    pub fn channel(&self, c: usize) -> &[f32] {
        let hw = self.shape[1] * self.shape[2];
        &self.data[c * hw..(c + 1) * hw]
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::dim(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(mut self, f: impl Fn(f32) -> f32) -> Self {
        for v in &mut self.data {
            *v = f(*v);
        }
        self
    }

    /// Elementwise sum; shapes must match.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "add: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// True when every element is exactly 0.0 or 1.0.
    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }
}

/// `[c,h,w]` feature map to `[h*w, c]` token matrix (row-major tokens).
pub fn chw_to_tokens(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(Error::dim("chw_to_tokens expects rank 3"));
    }
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    let mut out = Tensor::zeros(vec![h * w, c]);
    for ch in 0..c {
        let plane = x.channel(ch);
        for t in 0..h * w {
            out.data[t * c + ch] = plane[t];
        }
    }
    Ok(out)
}

/// Inverse of [`chw_to_tokens`].
pub fn tokens_to_chw(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    if x.rank() != 2 || x.rows() != h * w {
        return Err(Error::dim(format!(
            "tokens_to_chw: shape {:?} vs grid {}x{}",
            x.shape(),
            h,
            w
        )));
    }
    let c = x.cols();
    let mut out = Tensor::zeros(vec![c, h, w]);
    for t in 0..h * w {
        for ch in 0..c {
            out.data[ch * h * w + t] = x.data[t * c + ch];
        }
    }
    Ok(out)
}
