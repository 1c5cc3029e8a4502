//! Natural cubic spline trajectories through knot latents.
//!
//! On segment `k` (between knot times `t_k` and `t_{k+1}`) the trajectory is
//! `a_k (t-t_k)^3 + b_k (t-t_k)^2 + c_k (t-t_k) + d_k`, with coefficients
//! stored per latent coordinate. Coordinates never interact: the tridiagonal
//! matrix depends only on the knot spacing, so it is factored once and
//! applied to every coordinate.

use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{io, Tensor};

/// Ordered degradation scales `s_1 < ... < s_m`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct DegradationLevelSet {
    scales: Vec<f64>,
}

impl TryFrom<Vec<f64>> for DegradationLevelSet {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<DegradationLevelSet> for Vec<f64> {
    fn from(l: DegradationLevelSet) -> Self {
        l.scales
    }
}

impl DegradationLevelSet {
    pub fn new(scales: Vec<f64>) -> Result<Self> {
        if scales.len() < 2 {
            return Err(Error::Domain(format!(
                "need at least two degradation levels, got {}",
                scales.len()
            )));
        }
        if scales.iter().any(|s| !s.is_finite()) {
            return Err(Error::Domain("degradation levels must be finite".into()));
        }
        if scales.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Domain(format!(
                "degradation levels must be strictly increasing: {scales:?}"
            )));
        }
        Ok(DegradationLevelSet { scales })
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn first(&self) -> f64 {
        self.scales[0]
    }

    pub fn last(&self) -> f64 {
        self.scales[self.scales.len() - 1]
    }

    /// Knot times of every level; exactly 0 and 1 at the ends.
    pub fn times(&self) -> Vec<f64> {
        let n = self.scales.len();
        self.scales
            .iter()
            .enumerate()
            .map(|(i, &s)| match i {
                0 => 0.0,
                _ if i == n - 1 => 1.0,
                _ => (s - self.first()) / (self.last() - self.first()),
            })
            .collect()
    }
}

/// Min-max normalized timestamp of scale `s`.
pub fn normalize_scale(s: f64, levels: &DegradationLevelSet) -> Result<f64> {
    let (lo, hi) = (levels.first(), levels.last());
    if !(lo..=hi).contains(&s) {
        return Err(Error::Domain(format!("scale {s} outside [{lo}, {hi}]")));
    }
    if s == hi {
        return Ok(1.0);
    }
    Ok((s - lo) / (hi - lo))
}

pub fn denormalize_time(t: f64, levels: &DegradationLevelSet) -> Result<f64> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("time {t} outside [0, 1]")));
    }
    Ok(levels.first() + t * (levels.last() - levels.first()))
}

/// Knot latents at normalized times `0 = t_1 < ... < t_m = 1`.
#[derive(Debug)]
pub struct LatentTrajectory {
    times: Vec<f64>,
    knots: Vec<Tensor>,
    cubic: OnceLock<SplineCoefficients>,
}

impl Clone for LatentTrajectory {
    fn clone(&self) -> Self {
        LatentTrajectory {
            times: self.times.clone(),
            knots: self.knots.clone(),
            cubic: OnceLock::new(),
        }
    }
}

impl LatentTrajectory {
    pub fn new(times: Vec<f64>, knots: Vec<Tensor>) -> Result<Self> {
        if times.len() != knots.len() {
            return Err(Error::shape(
                "LatentTrajectory",
                format!("{} times for {} knots", times.len(), knots.len()),
            ));
        }
        if times.len() < 2 {
            return Err(Error::Domain("a trajectory needs at least two knots".into()));
        }
        if times[0] != 0.0 || times[times.len() - 1] != 1.0 {
            return Err(Error::Domain(format!(
                "knot times must start at 0 and end at 1: {times:?}"
            )));
        }
        if times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Domain(format!(
                "knot times must be strictly increasing: {times:?}"
            )));
        }
        let shape = knots[0].shape();
        if let Some(k) = knots.iter().position(|k| k.shape() != shape) {
            return Err(Error::shape(
                "LatentTrajectory",
                format!("knot {k} has shape {:?}, expected {:?}", knots[k].shape(), shape),
            ));
        }
        Ok(LatentTrajectory {
            times,
            knots,
            cubic: OnceLock::new(),
        })
    }

    pub fn from_levels(levels: &DegradationLevelSet, knots: Vec<Tensor>) -> Result<Self> {
        Self::new(levels.times(), knots)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn knots(&self) -> &[Tensor] {
        &self.knots
    }

    pub fn knot_shape(&self) -> &[usize] {
        self.knots[0].shape()
    }

    /// Natural cubic coefficients, fitted on first use.
    pub fn spline(&self) -> Result<&SplineCoefficients> {
        if let Some(c) = self.cubic.get() {
            return Ok(c);
        }
        let c = fit_spline(self)?;
        Ok(self.cubic.get_or_init(|| c))
    }

    pub fn coefficients(&self, kind: TrajectoryKind) -> Result<SplineCoefficients> {
        match kind {
            TrajectoryKind::NaturalCubic => self.spline().cloned(),
            TrajectoryKind::PiecewiseLinear => piecewise_linear_trajectory(self),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    NaturalCubic,
    /// First derivative jumps at interior knots.
    PiecewiseLinear,
}

impl TrajectoryKind {
    pub fn c1_continuous(self) -> bool {
        matches!(self, TrajectoryKind::NaturalCubic)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplineCoefficients {
    kind: TrajectoryKind,
    times: Vec<f64>,
    knot_shape: Vec<usize>,
    a: Vec<Tensor>,
    b: Vec<Tensor>,
    c: Vec<Tensor>,
    d: Vec<Tensor>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    kind: TrajectoryKind,
    times: Vec<f64>,
    m: usize,
    dims: Vec<usize>,
}

/// Solve `M_0 = M_{m-1} = 0` natural-spline second derivatives for every
/// coordinate with the Thomas algorithm. `ys[k]` is the flattened knot `k`.
fn natural_second_derivatives(times: &[f64], ys: &[&[f64]]) -> Vec<Vec<f64>> {
    let m = times.len();
    let dim = ys[0].len();
    let mut second = vec![vec![0.0; dim]; m];
    if m < 3 {
        return second;
    }
    let h: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
    let n = m - 2;
    // unknowns M_1..M_{m-2}; row i couples M_i, M_{i+1}, M_{i+2}
    let diag: Vec<f64> = (0..n).map(|i| 2.0 * (h[i] + h[i + 1])).collect();
    let mut c_prime = vec![0.0; n];
    let mut denom = vec![0.0; n];
    denom[0] = diag[0];
    for i in 0..n {
        if i > 0 {
            denom[i] = diag[i] - h[i] * c_prime[i - 1];
        }
        if i + 1 < n {
            c_prime[i] = h[i + 1] / denom[i];
        }
    }
    let mut d_prime = vec![0.0; n];
    for j in 0..dim {
        for i in 0..n {
            let rhs = 6.0
                * ((ys[i + 2][j] - ys[i + 1][j]) / h[i + 1] - (ys[i + 1][j] - ys[i][j]) / h[i]);
            d_prime[i] = if i == 0 {
                rhs / denom[0]
            } else {
                (rhs - h[i] * d_prime[i - 1]) / denom[i]
            };
        }
        let mut next = d_prime[n - 1];
        second[n][j] = next;
        for i in (0..n - 1).rev() {
            next = d_prime[i] - c_prime[i] * next;
            second[i + 1][j] = next;
        }
    }
    second
}

/// Natural cubic spline through the trajectory's knots.
pub fn fit_spline(traj: &LatentTrajectory) -> Result<SplineCoefficients> {
    let times = traj.times();
    let ys: Vec<&[f64]> = traj.knots().iter().map(|k| k.data()).collect();
    let second = natural_second_derivatives(times, &ys);
    let shape = traj.knot_shape().to_vec();
    let segs = times.len() - 1;
    let mut out = SplineCoefficients::empty(TrajectoryKind::NaturalCubic, times, &shape, segs);
    for k in 0..segs {
        let h = times[k + 1] - times[k];
        let (y0, y1) = (ys[k], ys[k + 1]);
        let (m0, m1) = (&second[k], &second[k + 1]);
        let a = (0..y0.len()).map(|j| (m1[j] - m0[j]) / (6.0 * h)).collect();
        let b = m0.iter().map(|v| v / 2.0).collect();
        let c = (0..y0.len())
            .map(|j| (y1[j] - y0[j]) / h - h * (2.0 * m0[j] + m1[j]) / 6.0)
            .collect();
        out.push_segment(a, b, c, y0.to_vec())?;
    }
    Ok(out)
}

/// Straight segments between consecutive knots (`a = b = 0`).
pub fn piecewise_linear_trajectory(traj: &LatentTrajectory) -> Result<SplineCoefficients> {
    let times = traj.times();
    let shape = traj.knot_shape().to_vec();
    let segs = times.len() - 1;
    let mut out = SplineCoefficients::empty(TrajectoryKind::PiecewiseLinear, times, &shape, segs);
    for k in 0..segs {
        let h = times[k + 1] - times[k];
        let (y0, y1) = (traj.knots()[k].data(), traj.knots()[k + 1].data());
        let dim = y0.len();
        let c = y0.iter().zip(y1).map(|(p, q)| (q - p) / h).collect();
        out.push_segment(vec![0.0; dim], vec![0.0; dim], c, y0.to_vec())?;
    }
    Ok(out)
}

pub fn evaluate(coeffs: &SplineCoefficients, t: f64, order: usize) -> Result<Tensor> {
    coeffs.evaluate(t, order)
}

/// Spline velocity `mu'_t` of the trajectory; coefficients are cached.
pub fn velocity_target(traj: &LatentTrajectory, t: f64) -> Result<Tensor> {
    traj.spline()?.evaluate(t, 1)
}

impl SplineCoefficients {
    fn empty(kind: TrajectoryKind, times: &[f64], shape: &[usize], segs: usize) -> Self {
        SplineCoefficients {
            kind,
            times: times.to_vec(),
            knot_shape: shape.to_vec(),
            a: Vec::with_capacity(segs),
            b: Vec::with_capacity(segs),
            c: Vec::with_capacity(segs),
            d: Vec::with_capacity(segs),
        }
    }

    fn push_segment(&mut self, a: Vec<f64>, b: Vec<f64>, c: Vec<f64>, d: Vec<f64>) -> Result<()> {
        for (dst, v) in [
            (&mut self.a, a),
            (&mut self.b, b),
            (&mut self.c, c),
            (&mut self.d, d),
        ] {
            dst.push(Tensor::new(self.knot_shape.clone(), v)?);
        }
        Ok(())
    }

    pub fn kind(&self) -> TrajectoryKind {
        self.kind
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn knot_shape(&self) -> &[usize] {
        &self.knot_shape
    }

    pub fn segments(&self) -> usize {
        self.a.len()
    }

    /// Coefficients `(a, b, c, d)` of segment `k`.
    pub fn segment(&self, k: usize) -> (&Tensor, &Tensor, &Tensor, &Tensor) {
        (&self.a[k], &self.b[k], &self.c[k], &self.d[k])
    }

    /// Segment owning `t`: `[t_k, t_{k+1})`, with `t = 1` in the last one.
    pub fn segment_index(&self, t: f64) -> Result<usize> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("time {t} outside [0, 1]")));
        }
        let segs = self.segments();
        let k = self.times[1..segs].partition_point(|&tk| tk <= t);
        Ok(k)
    }

    pub fn evaluate(&self, t: f64, order: usize) -> Result<Tensor> {
        let k = self.segment_index(t)?;
        self.evaluate_on_segment(k, t, order)
    }

    /// Evaluate segment `k`'s cubic (or a derivative) at `t`, even outside
    /// that segment's own interval.
    pub fn evaluate_on_segment(&self, k: usize, t: f64, order: usize) -> Result<Tensor> {
        if k >= self.segments() {
            return Err(Error::Domain(format!(
                "segment {k} out of range ({} segments)",
                self.segments()
            )));
        }
        let x = t - self.times[k];
        let (a, b, c, d) = self.segment(k);
        let (a, b, c, d) = (a.data(), b.data(), c.data(), d.data());
        let data: Vec<f64> = match order {
            0 => (0..d.len())
                .map(|j| ((a[j] * x + b[j]) * x + c[j]) * x + d[j])
                .collect(),
            1 => (0..d.len())
                .map(|j| (3.0 * a[j] * x + 2.0 * b[j]) * x + c[j])
                .collect(),
            2 => (0..d.len()).map(|j| 6.0 * a[j] * x + 2.0 * b[j]).collect(),
            3 => a.iter().map(|v| 6.0 * v).collect(),
            _ => return Err(Error::Domain(format!("derivative order {order} > 3"))),
        };
        Tensor::new(self.knot_shape.clone(), data)
    }

    /// All coefficients as one `[segments, 4, dim]` tensor (a, b, c, d order).
    pub fn to_tensor(&self) -> Tensor {
        let dim: usize = self.knot_shape.iter().product();
        let mut data = Vec::with_capacity(self.segments() * 4 * dim);
        for k in 0..self.segments() {
            for t in [&self.a[k], &self.b[k], &self.c[k], &self.d[k]] {
                data.extend_from_slice(t.data());
            }
        }
        Tensor::from_parts(vec![self.segments(), 4, dim], data)
    }

    /// Writes `<stem>.dgft` and the `<stem>.json` sidecar.
    pub fn save(&self, stem: impl AsRef<Path>) -> Result<()> {
        let stem = stem.as_ref();
        io::write_dgft(stem.with_extension("dgft"), &self.to_tensor())?;
        let side = Sidecar {
            kind: self.kind,
            times: self.times.clone(),
            m: self.times.len(),
            dims: self.knot_shape.clone(),
        };
        let path = stem.with_extension("json");
        let text = serde_json::to_string_pretty(&side).map_err(|e| Error::json(&path, e))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(stem: impl AsRef<Path>) -> Result<Self> {
        let stem = stem.as_ref();
        let path = stem.with_extension("json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let side: Sidecar = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        let t = io::read_dgft(stem.with_extension("dgft"))?;
        let dim: usize = side.dims.iter().product();
        if side.m < 2 || side.times.len() != side.m || t.shape() != [side.m - 1, 4, dim] {
            return Err(Error::Format {
                path,
                reason: format!("sidecar does not match tensor shape {:?}", t.shape()),
            });
        }
        let mut out = SplineCoefficients::empty(side.kind, &side.times, &side.dims, side.m - 1);
        for k in 0..side.m - 1 {
            let at = |i: usize| t.data()[(k * 4 + i) * dim..(k * 4 + i + 1) * dim].to_vec();
            out.push_segment(at(0), at(1), at(2), at(3))?;
        }
        Ok(out)
    }
}
