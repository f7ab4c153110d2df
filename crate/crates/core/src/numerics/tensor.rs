use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{dim_err, Error, Result};

/// Dense row-major `f32` array with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(dim_err("tensor", &shape, &[data.len()]));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f32) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f32) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    /// Rows given as nested slices, e.g. `[[1.0, 2.0], [3.0, 4.0]]`.
    pub fn from_rows<const C: usize>(rows: &[[f32; C]]) -> Self {
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self {
            shape: vec![rows.len(), C],
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn([n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f32, rng: &mut R) -> Self {
        let normal = Normal::new(0.0f32, std).expect("std must be finite and non-negative");
        let mut t = Self::zeros(shape);
        for v in &mut t.data {
            *v = normal.sample(rng);
        }
        t
    }

    pub fn uniform<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, lo: f32, hi: f32, rng: &mut R) -> Self {
        let dist = Uniform::new(lo, hi);
        let mut t = Self::zeros(shape);
        for v in &mut t.data {
            *v = dist.sample(rng);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// `(rows, cols)` of a matrix; vectors are treated as a single row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            [c] => Ok((1, *c)),
            _ => Err(Error::Contract(format!(
                "expected a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let c = *self.shape.last().unwrap_or(&1);
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(dim_err("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        if let Some(g) = &self.grad {
            debug_assert_eq!(g.len(), self.data.len());
        }
        Ok(self)
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f32]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(dim_err("accumulate_grad", &self.shape, &[g.len()]));
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    /// Keeps the first `n` rows of a matrix.
    pub fn take_rows(&self, n: usize) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        if n > r {
            return Err(dim_err("take_rows", &self.shape, &[n]));
        }
        Tensor::new([n, c], self.data[..n * c].to_vec())
    }

    /// Keeps the first `n` columns of a matrix.
    pub fn take_cols(&self, n: usize) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        if n > c {
            return Err(dim_err("take_cols", &self.shape, &[n]));
        }
        let mut out = Vec::with_capacity(r * n);
        for row in self.data.chunks(c) {
            out.extend_from_slice(&row[..n]);
        }
        Tensor::new([r, n], out)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
