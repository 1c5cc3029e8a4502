use serde::{Deserialize, Serialize};

use super::field::GraphField;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::numcore::{Graph, NodeId, RngState, Tensor};
use crate::rae::RaeModel;
use crate::spline::SplineCoefficients;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtrapolationMode {
    /// Velocity plus the spline's second and third derivatives.
    #[default]
    Taylor3,
    /// Velocity only.
    Linear,
}

/// Which knot an intermediate latent is projected onto.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionTarget {
    /// The first knot strictly after `t`.
    #[default]
    Next,
    /// The closest knot of the segment holding `t`; ties go to the later one.
    /// The step may be negative or zero.
    Nearest,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PerceptualSurrogate {
    Mse,
    /// Pixel L2 plus L2 on forward differences along rows and columns.
    EdgeAware {
        pixel_weight: f64,
        gradient_weight: f64,
    },
}

impl Default for PerceptualSurrogate {
    fn default() -> Self {
        PerceptualSurrogate::EdgeAware {
            pixel_weight: 1.0,
            gradient_weight: 1.0,
        }
    }
}

/// Points on trajectories with their exact velocities, one row per draw.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch {
    pub x: Tensor,
    pub t: Vec<f64>,
    pub target: Tensor,
}

impl TrainBatch {
    /// Draw `draws` uniform times per trajectory, in trajectory order.
    pub fn sample(coeffs: &[&SplineCoefficients], draws: usize, rng: &mut RngState) -> Result<Self> {
        let mut ts = Vec::with_capacity(coeffs.len() * draws);
        let mut owners = Vec::with_capacity(ts.capacity());
        for (i, _) in coeffs.iter().enumerate() {
            for _ in 0..draws {
                ts.push(rng.uniform());
                owners.push(i);
            }
        }
        Self::at(
            &owners.iter().map(|&i| coeffs[i]).collect::<Vec<_>>(),
            &ts,
        )
    }

    /// Batch with row `i` taken from `coeffs[i]` at `ts[i]`.
    pub fn at(coeffs: &[&SplineCoefficients], ts: &[f64]) -> Result<Self> {
        if coeffs.is_empty() {
            return Err(Error::Empty("flow-matching batch"));
        }
        if coeffs.len() != ts.len() {
            return Err(Error::shape("TrainBatch", "one time per trajectory row"));
        }
        let d = latent_width(coeffs)?;
        let mut x = Vec::with_capacity(ts.len() * d);
        let mut target = Vec::with_capacity(ts.len() * d);
        for (c, &t) in coeffs.iter().zip(ts) {
            x.extend(c.evaluate(t, 0)?.into_data());
            target.extend(c.evaluate(t, 1)?.into_data());
        }
        Ok(TrainBatch {
            x: Tensor::matrix(ts.len(), d, x)?,
            t: ts.to_vec(),
            target: Tensor::matrix(ts.len(), d, target)?,
        })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

fn latent_width(coeffs: &[&SplineCoefficients]) -> Result<usize> {
    let d: usize = coeffs[0].knot_shape().iter().product();
    if coeffs.iter().any(|c| c.knot_shape().iter().product::<usize>() != d) {
        return Err(Error::shape("TrainBatch", "trajectories differ in latent width"));
    }
    Ok(d)
}

/// Mean over rows of `||v - target||^2`.
pub fn cfm_loss<F: GraphField + ?Sized>(g: &mut Graph, field: &F, batch: &TrainBatch) -> Result<NodeId> {
    if batch.is_empty() {
        return Err(Error::Empty("flow-matching batch"));
    }
    let x = g.constant(batch.x.clone());
    let v = field.forward(g, x, &batch.t)?;
    residual_loss(g, v, &batch.target)
}

pub(crate) fn residual_loss(g: &mut Graph, v: NodeId, target: &Tensor) -> Result<NodeId> {
    let (_, d) = target.dims2("cfm_loss")?;
    let y = g.constant(target.clone());
    let mse = g.mse(v, y)?;
    g.scale(mse, d as f64)
}

/// Knot an extrapolation lands on, and the signed time step to reach it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub segment: usize,
    pub target: usize,
    pub dt: f64,
}

pub fn project(coeffs: &SplineCoefficients, t: f64, rule: ProjectionTarget) -> Result<Projection> {
    let times = coeffs.times();
    if t >= 1.0 && rule == ProjectionTarget::Next {
        return Err(Error::Domain("t = 1 has no next degradation level".into()));
    }
    let k = coeffs.segment_index(t)?;
    let target = match rule {
        ProjectionTarget::Next => k + 1,
        ProjectionTarget::Nearest => {
            if t - times[k] < times[k + 1] - t {
                k
            } else {
                k + 1
            }
        }
    };
    Ok(Projection {
        segment: k,
        target,
        dt: times[target] - t,
    })
}

/// The part of the extrapolation that does not depend on the velocity:
/// `mu_t`, plus `mu'' dt^2/2 + mu''' dt^3/6` in Taylor mode.
fn taylor_base(
    coeffs: &SplineCoefficients,
    t: f64,
    p: &Projection,
    mode: ExtrapolationMode,
) -> Result<Tensor> {
    let z = coeffs.evaluate_on_segment(p.segment, t, 0)?;
    match mode {
        ExtrapolationMode::Linear => Ok(z),
        ExtrapolationMode::Taylor3 => {
            let z2 = coeffs.evaluate_on_segment(p.segment, t, 2)?;
            let z3 = coeffs.evaluate_on_segment(p.segment, t, 3)?;
            z.axpy(0.5 * p.dt * p.dt, &z2)?
                .axpy(p.dt * p.dt * p.dt / 6.0, &z3)
        }
    }
}

/// Extrapolate from `t` to the next knot with velocity estimate `v_hat`.
pub fn taylor_extrapolate(
    coeffs: &SplineCoefficients,
    t: f64,
    v_hat: &Tensor,
    mode: ExtrapolationMode,
) -> Result<Tensor> {
    extrapolate_to(coeffs, t, v_hat, mode, ProjectionTarget::Next)
}

pub fn extrapolate_to(
    coeffs: &SplineCoefficients,
    t: f64,
    v_hat: &Tensor,
    mode: ExtrapolationMode,
    rule: ProjectionTarget,
) -> Result<Tensor> {
    if v_hat.shape() != coeffs.knot_shape() {
        return Err(Error::shape(
            "taylor_extrapolate",
            format!("v_hat {:?} vs latent {:?}", v_hat.shape(), coeffs.knot_shape()),
        ));
    }
    let p = project(coeffs, t, rule)?;
    taylor_base(coeffs, t, &p, mode)?.axpy(p.dt, v_hat)
}

/// Batched extrapolation inside a graph. Row `i` of `v_hat` belongs to
/// `coeffs[i]` at `ts[i]`; only `v_hat` carries gradient.
pub fn taylor_extrapolate_graph(
    g: &mut Graph,
    coeffs: &[&SplineCoefficients],
    ts: &[f64],
    v_hat: NodeId,
    mode: ExtrapolationMode,
    rule: ProjectionTarget,
) -> Result<(NodeId, Vec<Projection>)> {
    let (rows, d) = g.value(v_hat).dims2("taylor_extrapolate")?;
    if rows != coeffs.len() || rows != ts.len() {
        return Err(Error::shape(
            "taylor_extrapolate",
            format!("{rows} velocity rows for {} trajectories, {} times", coeffs.len(), ts.len()),
        ));
    }
    let mut base = Vec::with_capacity(rows * d);
    let mut steps = Vec::with_capacity(rows * d);
    let mut projections = Vec::with_capacity(rows);
    for (c, &t) in coeffs.iter().zip(ts) {
        if c.knot_shape().iter().product::<usize>() != d {
            return Err(Error::shape("taylor_extrapolate", "latent width mismatch"));
        }
        let p = project(c, t, rule)?;
        base.extend(taylor_base(c, t, &p, mode)?.into_data());
        steps.extend(std::iter::repeat_n(p.dt, d));
        projections.push(p);
    }
    let base = g.constant(Tensor::matrix(rows, d, base)?);
    let steps = g.constant(Tensor::matrix(rows, d, steps)?);
    let moved = g.mul(v_hat, steps)?;
    Ok((g.add(base, moved)?, projections))
}

/// Constant matrix `D` with `x D` the forward differences of flattened
/// `C x H x W` images: first along rows, then along columns.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientOperator {
    dims: (usize, usize, usize),
    matrix: Tensor,
}

impl GradientOperator {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        let p = channels * height * width;
        let horiz = channels * height * width.saturating_sub(1);
        let vert = channels * height.saturating_sub(1) * width;
        let cols = horiz + vert;
        let mut m = vec![0.0; p * cols];
        let idx = |c: usize, y: usize, x: usize| (c * height + y) * width + x;
        let mut col = 0;
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width.saturating_sub(1) {
                    m[idx(c, y, x + 1) * cols + col] = 1.0;
                    m[idx(c, y, x) * cols + col] = -1.0;
                    col += 1;
                }
            }
        }
        for c in 0..channels {
            for y in 0..height.saturating_sub(1) {
                for x in 0..width {
                    m[idx(c, y + 1, x) * cols + col] = 1.0;
                    m[idx(c, y, x) * cols + col] = -1.0;
                    col += 1;
                }
            }
        }
        GradientOperator {
            dims: (channels, height, width),
            matrix: Tensor::from_parts(vec![p, cols], m),
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }
}

impl PerceptualSurrogate {
    /// Loss between a `[B x P]` prediction node and a `[B x P]` target.
    pub fn graph_loss(
        &self,
        g: &mut Graph,
        pred: NodeId,
        target: &Tensor,
        grad_op: &GradientOperator,
    ) -> Result<NodeId> {
        let y = g.constant(target.clone());
        let pixel = g.mse(pred, y)?;
        match *self {
            PerceptualSurrogate::Mse => Ok(pixel),
            PerceptualSurrogate::EdgeAware {
                pixel_weight,
                gradient_weight,
            } => {
                let d = g.constant(grad_op.matrix.clone());
                let gp = g.matmul(pred, d)?;
                let gy = g.constant(target.matmul(&grad_op.matrix)?);
                let edge = g.mse(gp, gy)?;
                let a = g.scale(pixel, pixel_weight)?;
                let b = g.scale(edge, gradient_weight)?;
                g.add(a, b)
            }
        }
    }

    /// Direct evaluation on two images.
    pub fn evaluate(&self, a: &Image, b: &Image) -> Result<f64> {
        if a.dims() != b.dims() {
            return Err(Error::shape("perceptual", "images differ in size"));
        }
        let (c, h, w) = a.dims();
        let mut g = Graph::new();
        let pa = g.constant(a.tensor().reshape(&[1, c * h * w])?);
        let tb = b.tensor().reshape(&[1, c * h * w])?;
        let out = self.graph_loss(&mut g, pa, &tb, &GradientOperator::new(c, h, w))?;
        g.value(out).item()
    }
}

/// Decode `z_hat` with the frozen RAE and the HR skip features, then compare
/// with the target images. The RAE enters the graph as constants.
///
/// `hr_features[level]` is a `[B x width]` batch of HR encoder activations.
pub fn perceptual_loss(
    g: &mut Graph,
    rae: &RaeModel,
    z_hat: NodeId,
    hr_features: &[Tensor],
    targets: &[&Image],
    metric: &PerceptualSurrogate,
) -> Result<NodeId> {
    let (c, h, w) = {
        let cfg = rae.config();
        (cfg.channels, cfg.height, cfg.width)
    };
    perceptual_loss_with(g, rae, z_hat, hr_features, targets, metric, &GradientOperator::new(c, h, w))
}

pub(crate) fn perceptual_loss_with(
    g: &mut Graph,
    rae: &RaeModel,
    z_hat: NodeId,
    hr_features: &[Tensor],
    targets: &[&Image],
    metric: &PerceptualSurrogate,
    grad_op: &GradientOperator,
) -> Result<NodeId> {
    if !rae.is_frozen() {
        return Err(Error::Contract(
            "perceptual loss requires a frozen RAE decoder".into(),
        ));
    }
    if targets.is_empty() {
        return Err(Error::Empty("perceptual batch"));
    }
    let bound = rae.bind(g, false);
    let feats: Vec<NodeId> = if rae.config().skips {
        hr_features.iter().map(|f| g.constant(f.clone())).collect()
    } else {
        Vec::new()
    };
    let decoded = bound.decode(g, z_hat, &feats)?;
    let target = rae.batch_matrix(targets)?;
    metric.graph_loss(g, decoded, &target, grad_op)
}

/// `cfm + lambda * perc`.
pub fn total_loss(g: &mut Graph, cfm: NodeId, perc: NodeId, lambda: f64) -> Result<NodeId> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::Domain(format!("loss weight {lambda} must be finite and >= 0")));
    }
    for id in [cfm, perc] {
        g.value(id).item()?;
        g.value(id).check_finite("total_loss")?;
    }
    let weighted = g.scale(perc, lambda)?;
    g.add(cfm, weighted)
}
