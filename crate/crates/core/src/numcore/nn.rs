//! Small building blocks for fully-connected networks and their training.

use std::f64::consts::PI;

use super::graph::{Graph, NodeId};
use super::rng::RngState;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Dense layer `y = x W + b` with `W: [in x out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub weight: NodeId,
    pub bias: Option<NodeId>,
}

impl Linear {
    /// Uniform init in `+-1/sqrt(in)`, biases included.
    pub fn init(input: usize, output: usize, with_bias: bool, rng: &mut RngState) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let w = (0..input * output)
            .map(|_| rng.uniform_in(-bound, bound))
            .collect();
        let bias = with_bias.then(|| {
            Tensor::from_parts(
                vec![output],
                (0..output).map(|_| rng.uniform_in(-bound, bound)).collect(),
            )
        });
        Linear {
            weight: Tensor::from_parts(vec![input, output], w),
            bias,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundLinear {
        let leaf = |g: &mut Graph, t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        BoundLinear {
            weight: leaf(g, &self.weight),
            bias: self.bias.as_ref().map(|b| leaf(g, b)),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        std::iter::once(&mut self.weight)
            .chain(self.bias.as_mut())
            .collect()
    }
}

impl BoundLinear {
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let y = g.matmul(x, self.weight)?;
        match self.bias {
            Some(b) => g.add_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn ids(&self) -> Vec<NodeId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// Cosine decay from `base` at step 0 to `min` at `total`.
pub fn cosine_lr(base: f64, min: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (step.min(total) as f64) / total as f64;
    min + 0.5 * (base - min) * (1.0 + (PI * frac).cos())
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let sizes: Vec<usize> = sizes.into_iter().collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                "Adam::step",
                format!(
                    "{} params, {} grads, optimizer tracks {}",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            ));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.m[i].len() {
                return Err(Error::shape("Adam::step", format!("parameter {i} size changed")));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *w -= lr * mh / (vh.sqrt() + self.eps);
            }
            p.check_finite("Adam::step")?;
        }
        Ok(())
    }
}

/// Rescale `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= k);
        }
    }
    norm
}
