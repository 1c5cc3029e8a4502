//! Explicit integrators for `dx/dt = v(x, t)` from `t = 0`.
//!
//! [`integrate`] is the adaptive Dormand–Prince 5(4) pair with FSAL: the
//! first stage costs one evaluation, every attempted step (accepted or
//! rejected) costs six more, so `nfe = 1 + 6 * (accepted + rejected)` for
//! any positive target. The error norm is the RMS over components of
//! `err_i / (atol + rtol * max(|x_i|, |x_new_i|))`; a step is accepted when it
//! is at most 1.
//!
//! Steps never cross a field's [`VectorField::breakpoints`]; they are shortened
//! to land on each one. Use breakpoints where the field stays continuous in
//! `t` but loses smoothness, such as spline knots: a step straddling a jump
//! in a higher derivative fools the embedded error estimate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::par::Exec;
use crate::spline::SplineCoefficients;

/// A velocity field `(x, t) -> v` with the shape of `x`.
pub trait VectorField {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor>;

    /// Times the integrator must land on exactly.
    fn breakpoints(&self) -> Vec<f64> {
        Vec::new()
    }
}

/// The trajectory's own velocity `mu'_t`, ignoring the state.
impl VectorField for SplineCoefficients {
    fn velocity(&self, _x: &Tensor, t: f64) -> Result<Tensor> {
        self.evaluate(t, 1)
    }

    fn breakpoints(&self) -> Vec<f64> {
        let t = self.times();
        t[1..t.len() - 1].to_vec()
    }
}

impl<F> VectorField for F
where
    F: Fn(&Tensor, f64) -> Result<Tensor>,
{
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        self(x, t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub rtol: f64,
    pub atol: f64,
    pub h0: f64,
    pub max_steps: usize,
    pub safety: f64,
    pub min_scale: f64,
    pub max_scale: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            rtol: 1e-5,
            atol: 1e-7,
            h0: 1e-2,
            max_steps: 10_000,
            safety: 0.9,
            min_scale: 0.2,
            max_scale: 5.0,
        }
    }
}

impl SolverConfig {
    /// Tolerances used by the invariant suites.
    pub fn strict() -> Self {
        SolverConfig {
            rtol: 1e-8,
            atol: 1e-10,
            ..Self::default()
        }
    }

    pub fn with_tolerances(rtol: f64, atol: f64) -> Self {
        SolverConfig {
            rtol,
            atol,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("rtol", self.rtol),
            ("atol", self.atol),
            ("h0", self.h0),
            ("safety", self.safety),
            ("min_scale", self.min_scale),
            ("max_scale", self.max_scale),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Domain(format!("solver {name} must be positive, got {v}")));
            }
        }
        if self.max_steps == 0 {
            return Err(Error::Domain("solver max_steps must be positive".into()));
        }
        if self.min_scale > self.max_scale {
            return Err(Error::Domain("solver min_scale exceeds max_scale".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OdeSolution {
    pub x: Tensor,
    pub t: f64,
    pub nfe: usize,
    pub accepted: usize,
    pub rejected: usize,
    /// `(t, x)` at the start and after every accepted step.
    pub states: Vec<(f64, Tensor)>,
}

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A2: [f64; 1] = [1.0 / 5.0];
const A3: [f64; 2] = [3.0 / 40.0, 9.0 / 40.0];
const A4: [f64; 3] = [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0];
const A5: [f64; 4] = [
    19372.0 / 6561.0,
    -25360.0 / 2187.0,
    64448.0 / 6561.0,
    -212.0 / 729.0,
];
const A6: [f64; 5] = [
    9017.0 / 3168.0,
    -355.0 / 33.0,
    46732.0 / 5247.0,
    49.0 / 176.0,
    -5103.0 / 18656.0,
];
/// Fifth-order weights; also the seventh stage's row (FSAL).
const B: [f64; 6] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
];
/// Fifth-order minus embedded fourth-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

fn combine(x: &[f64], h: f64, coeffs: &[f64], ks: &[Vec<f64>]) -> Vec<f64> {
    let mut out = x.to_vec();
    for (c, k) in coeffs.iter().zip(ks) {
        if *c == 0.0 {
            continue;
        }
        for (o, kv) in out.iter_mut().zip(k) {
            *o += h * c * kv;
        }
    }
    out
}

struct Counted<'a, F: ?Sized> {
    field: &'a F,
    shape: &'a [usize],
    nfe: usize,
}

impl<F: VectorField + ?Sized> Counted<'_, F> {
    fn eval(&mut self, x: Vec<f64>, t: f64) -> Result<Vec<f64>> {
        self.nfe += 1;
        let xt = Tensor::new(self.shape.to_vec(), x).map_err(|_| Error::NonFinite("ode state"))?;
        let v = self.field.velocity(&xt, t)?;
        if v.shape() != self.shape {
            return Err(Error::shape(
                "velocity field",
                format!("returned {:?} for state {:?}", v.shape(), self.shape),
            ));
        }
        v.check_finite("velocity field")?;
        Ok(v.into_data())
    }
}

fn check_target(t_target: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t_target) {
        return Err(Error::Domain(format!("target time {t_target} outside [0, 1]")));
    }
    Ok(())
}

/// Adaptive Dormand–Prince integration from `t = 0` to `t_target`.
pub fn integrate<F: VectorField + ?Sized>(
    field: &F,
    x0: &Tensor,
    t_target: f64,
    cfg: &SolverConfig,
) -> Result<OdeSolution> {
    check_target(t_target)?;
    cfg.validate()?;
    let mut sol = OdeSolution {
        x: x0.clone(),
        t: 0.0,
        nfe: 0,
        accepted: 0,
        rejected: 0,
        states: vec![(0.0, x0.clone())],
    };
    if t_target == 0.0 {
        return Ok(sol);
    }
    let shape = x0.shape().to_vec();
    let mut f = Counted {
        field,
        shape: &shape,
        nfe: 0,
    };
    let mut x = x0.data().to_vec();
    let mut t = 0.0;
    let mut h = cfg.h0.min(t_target);
    let mut k1 = f.eval(x.clone(), t)?;
    let mut stops: Vec<f64> = field
        .breakpoints()
        .into_iter()
        .filter(|&b| b > 0.0 && b < t_target)
        .collect();
    stops.sort_by(f64::total_cmp);
    stops.push(t_target);
    let mut next = 0;

    while t < t_target {
        if sol.accepted + sol.rejected >= cfg.max_steps {
            return Err(Error::MaxSteps {
                max_steps: cfg.max_steps,
                target: t_target,
            });
        }
        let stop = stops[next];
        let last = t + h >= stop;
        if last {
            h = stop - t;
        }
        let mut ks = vec![k1.clone()];
        for (stage, row) in [&A2[..], &A3, &A4, &A5, &A6].into_iter().enumerate() {
            let xs = combine(&x, h, row, &ks);
            ks.push(f.eval(xs, t + C[stage + 1] * h)?);
        }
        let x_new = combine(&x, h, &B, &ks);
        let t_new = if last { stop } else { t + h };
        let k7 = f.eval(x_new.clone(), t_new)?;
        ks.push(k7);

        let n = x.len().max(1) as f64;
        let mut acc = 0.0;
        for i in 0..x.len() {
            let e: f64 = (0..7).map(|j| E[j] * ks[j][i]).sum::<f64>() * h;
            let sc = cfg.atol + cfg.rtol * x[i].abs().max(x_new[i].abs());
            acc += (e / sc).powi(2);
        }
        let err = (acc / n).sqrt();
        let factor = if err == 0.0 {
            cfg.max_scale
        } else {
            (cfg.safety * err.powf(-0.2)).clamp(cfg.min_scale, cfg.max_scale)
        };

        if err <= 1.0 {
            x = x_new;
            t = t_new;
            k1 = ks.pop().expect("seven stages");
            if last {
                next += 1;
            }
            sol.accepted += 1;
            sol.states.push((t, Tensor::new(shape.clone(), x.clone())?));
        } else {
            sol.rejected += 1;
        }
        h *= factor;
        if !(h > 0.0) || t + h == t {
            return Err(Error::Domain(format!("step size underflow at t={t}")));
        }
    }

    sol.nfe = f.nfe;
    sol.t = t_target;
    sol.x = Tensor::new(shape, x)?;
    Ok(sol)
}

/// Classical fourth-order Runge–Kutta with `n_steps` equal steps.
pub fn integrate_fixed<F: VectorField + ?Sized>(
    field: &F,
    x0: &Tensor,
    t_target: f64,
    n_steps: usize,
) -> Result<OdeSolution> {
    check_target(t_target)?;
    if n_steps == 0 {
        return Err(Error::Domain("n_steps must be at least 1".into()));
    }
    let shape = x0.shape().to_vec();
    let mut f = Counted {
        field,
        shape: &shape,
        nfe: 0,
    };
    let h = t_target / n_steps as f64;
    let mut x = x0.data().to_vec();
    let mut states = vec![(0.0, x0.clone())];
    for i in 0..n_steps {
        let t = i as f64 * h;
        let k1 = f.eval(x.clone(), t)?;
        let k2 = f.eval(combine(&x, h, &[0.5], std::slice::from_ref(&k1)), t + 0.5 * h)?;
        let k3 = f.eval(combine(&x, h, &[0.0, 0.5], &[k1.clone(), k2.clone()]), t + 0.5 * h)?;
        let k4 = f.eval(
            combine(&x, h, &[0.0, 0.0, 1.0], &[k1.clone(), k2.clone(), k3.clone()]),
            t + h,
        )?;
        x = combine(&x, h, &[1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0], &[k1, k2, k3, k4]);
        let t_next = if i + 1 == n_steps { t_target } else { t + h };
        states.push((t_next, Tensor::new(shape.clone(), x.clone())?));
    }
    Ok(OdeSolution {
        x: Tensor::new(shape.clone(), x)?,
        t: t_target,
        nfe: f.nfe,
        accepted: n_steps,
        rejected: 0,
        states,
    })
}

/// NFE of independent integrations from `x0` to each target time.
pub fn nfe_profile<F: VectorField + Sync + ?Sized>(
    field: &F,
    x0: &Tensor,
    targets: &[f64],
    cfg: &SolverConfig,
    exec: Exec,
) -> Result<Vec<(f64, usize)>> {
    if targets.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Domain(format!("targets must be ascending: {targets:?}")));
    }
    exec.map(targets, |&t| integrate(field, x0, t, cfg).map(|s| (t, s.nfe)))
        .into_iter()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decay(x: &Tensor, _t: f64) -> Result<Tensor> {
        x.scale(-1.0)
    }

    #[test]
    fn constant_field_single_step() {
        let c = Tensor::vector(vec![0.5, -2.0, 3.0]).unwrap();
        let field = |_: &Tensor, _: f64| Ok(c.clone());
        let x0 = Tensor::vector(vec![1.0, 1.0, 1.0]).unwrap();
        let cfg = SolverConfig {
            h0: 1.0,
            ..SolverConfig::default()
        };
        let sol = integrate(&field, &x0, 1.0, &cfg).unwrap();
        assert_eq!(sol.accepted, 1);
        assert_eq!(sol.rejected, 0);
        assert_eq!(sol.nfe, 7);
        assert!(sol.x.max_abs_diff(&x0.add(&c).unwrap()).unwrap() < 1e-15);
    }

    #[test]
    fn nfe_formula_holds() {
        let x0 = Tensor::vector(vec![1.0]).unwrap();
        let sol = integrate(&decay, &x0, 1.0, &SolverConfig::strict()).unwrap();
        assert_eq!(sol.nfe, 1 + 6 * (sol.accepted + sol.rejected));
        assert_eq!(sol.states.len(), sol.accepted + 1);
        assert_eq!(sol.t, 1.0);
        assert_eq!(sol.states.last().unwrap().0, 1.0);
    }

    #[test]
    fn exponential_decay() {
        let x0 = Tensor::vector(vec![1.0]).unwrap();
        for rtol in [1e-5, 1e-8] {
            let cfg = SolverConfig::with_tolerances(rtol, rtol * 1e-2);
            let sol = integrate(&decay, &x0, 1.0, &cfg).unwrap();
            let err = (sol.x.data()[0] - (-1.0f64).exp()).abs();
            assert!(err < 10.0 * rtol, "rtol {rtol}: err {err}");
        }
    }

    #[test]
    fn steps_land_on_breakpoints() {
        let knots = [0.0, 1.0, -1.0, 0.5].map(|v| Tensor::vector(vec![v]).unwrap()).to_vec();
        let traj = crate::spline::LatentTrajectory::new(vec![0.0, 0.3, 0.55, 1.0], knots).unwrap();
        let c = traj.spline().unwrap();
        assert_eq!(c.breakpoints(), vec![0.3, 0.55]);
        let x0 = Tensor::vector(vec![0.0]).unwrap();
        let sol = integrate(c, &x0, 0.9, &SolverConfig::default()).unwrap();
        for b in [0.3, 0.55] {
            assert!(sol.states.iter().any(|(t, _)| *t == b), "no state at {b}");
        }
        assert_eq!(sol.nfe, 1 + 6 * (sol.accepted + sol.rejected));
    }

    #[test]
    fn zero_target_is_free() {
        let x0 = Tensor::vector(vec![2.0]).unwrap();
        let sol = integrate(&decay, &x0, 0.0, &SolverConfig::default()).unwrap();
        assert_eq!(sol.nfe, 0);
        assert_eq!(sol.x, x0);
    }

    #[test]
    fn errors() {
        let x0 = Tensor::vector(vec![1.0]).unwrap();
        assert!(integrate(&decay, &x0, 1.5, &SolverConfig::default()).is_err());
        let tight = SolverConfig {
            max_steps: 3,
            ..SolverConfig::strict()
        };
        assert!(matches!(
            integrate(&decay, &x0, 1.0, &tight),
            Err(Error::MaxSteps { .. })
        ));
        let nan = |_: &Tensor, _: f64| Ok(Tensor::from_parts(vec![1], vec![f64::NAN]));
        assert!(matches!(
            integrate(&nan, &x0, 1.0, &SolverConfig::default()),
            Err(Error::NonFinite(_))
        ));
        assert!(integrate_fixed(&nan, &x0, 1.0, 4).is_err());
        assert!(integrate_fixed(&decay, &x0, 1.0, 0).is_err());
        let bad = SolverConfig {
            rtol: 0.0,
            ..SolverConfig::default()
        };
        assert!(integrate(&decay, &x0, 1.0, &bad).is_err());
    }

    #[test]
    fn rk4_fixed() {
        let x0 = Tensor::vector(vec![1.0]).unwrap();
        let sol = integrate_fixed(&decay, &x0, 1.0, 100).unwrap();
        assert_eq!(sol.nfe, 400);
        assert!((sol.x.data()[0] - (-1.0f64).exp()).abs() < 1e-7);
        let c = Tensor::vector(vec![0.3]).unwrap();
        let konst = |_: &Tensor, _: f64| Ok(c.clone());
        for n in [1, 3, 7] {
            let s = integrate_fixed(&konst, &x0, 0.8, n).unwrap();
            assert!((s.x.data()[0] - 1.24).abs() < 1e-15);
        }
    }

    #[test]
    fn profile() {
        let x0 = Tensor::vector(vec![1.0]).unwrap();
        let cfg = SolverConfig::strict();
        assert!(nfe_profile(&decay, &x0, &[], &cfg, Exec::Sequential).unwrap().is_empty());
        assert!(nfe_profile(&decay, &x0, &[0.5, 0.2], &cfg, Exec::Sequential).is_err());
        let p = nfe_profile(&decay, &x0, &[0.25, 0.5, 1.0], &cfg, Exec::Parallel).unwrap();
        assert!(p.windows(2).all(|w| w[0].1 <= w[1].1), "{p:?}");
        let c = Tensor::vector(vec![0.3]).unwrap();
        let konst = |_: &Tensor, _: f64| Ok(c.clone());
        let one = SolverConfig {
            h0: 1.0,
            ..SolverConfig::default()
        };
        let p = nfe_profile(&konst, &x0, &[0.2, 0.6, 1.0], &one, Exec::Sequential).unwrap();
        assert!(p.iter().all(|&(_, n)| n == 7), "{p:?}");
    }
}
