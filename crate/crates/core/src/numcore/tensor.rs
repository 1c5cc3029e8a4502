use std::fmt;

use crate::error::{Error, Result};
use crate::par::Exec;

/// Below this many multiply-adds a matmul stays on the calling thread.
const PAR_MATMUL_WORK: usize = 1 << 15;

/// Dense row-major f64 tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {:?} needs {} values, got {}", shape, n, data.len()),
            ));
        }
        let t = Tensor { shape, data };
        t.check_finite("Tensor::new")?;
        Ok(t)
    }

    /// Build without the finiteness check; callers guarantee the invariant.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )))
        }
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(op))
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub(crate) fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(
                op,
                format!("expected a matrix, got shape {:?}", self.shape),
            )),
        }
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape == other.shape {
            Ok(())
        } else {
            Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ))
        }
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(other, op)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        let t = Tensor::from_parts(self.shape.clone(), data);
        t.check_finite(op)?;
        Ok(t)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, k: f64) -> Result<Tensor> {
        self.map("scale", |x| x * k)
    }

    /// `self + k * other`
    pub fn axpy(&self, k: f64, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "axpy", |a, b| a + k * b)
    }

    pub fn map(&self, op: &'static str, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let t = Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect());
        t.check_finite(op)?;
        Ok(t)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor::from_parts(vec![c, r], out))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.matmul_with(other, Exec::default())
    }

    /// Row-major product. Each output row is accumulated in the same order
    /// regardless of `exec`, so results are bit-identical across strategies.
    pub fn matmul_with(&self, other: &Tensor, exec: Exec) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("[{m}x{k}] x [{k2}x{n}]"),
            ));
        }
        let mut out = vec![0.0; m * n];
        let exec = if m * k * n < PAR_MATMUL_WORK {
            Exec::Sequential
        } else {
            exec
        };
        let a = &self.data;
        let b = &other.data;
        exec.for_each_row(&mut out, n, |i, row| {
            let arow = &a[i * k..(i + 1) * k];
            for (p, &aik) in arow.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += aik * bv;
                }
            }
        });
        let t = Tensor::from_parts(vec![m, n], out);
        t.check_finite("matmul")?;
        Ok(t)
    }

    /// Stack equally-shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or(Error::Empty("stack"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            first.same_shape(t, "stack")?;
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor::from_parts(shape, data))
    }

    /// Row `i` of the leading axis, with the leading axis dropped.
    pub fn row(&self, i: usize) -> Result<Tensor> {
        let lead = *self.shape.first().ok_or(Error::Empty("row"))?;
        if i >= lead {
            return Err(Error::shape("row", format!("index {i} >= {lead}")));
        }
        let w = self.len() / lead;
        let shape = if self.rank() == 1 {
            vec![1]
        } else {
            self.shape[1..].to_vec()
        };
        Ok(Tensor::from_parts(shape, self.data[i * w..(i + 1) * w].to_vec()))
    }
}
