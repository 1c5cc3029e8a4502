use trajflow::numcore::{RngState, Tensor};
use trajflow::sampler::{integrate, integrate_fixed, SolverConfig};
use trajflow::spline::{LatentTrajectory, SplineCoefficients};
use trajflow::Result;

fn decay(x: &Tensor, _t: f64) -> Result<Tensor> {
    x.scale(-1.0)
}

#[test]
fn exponential_decay_within_tolerance() {
    let x0 = Tensor::vector(vec![1.0]).unwrap();
    for rtol in [1e-5, 1e-8] {
        let cfg = SolverConfig {
            rtol,
            atol: rtol * 1e-2,
            ..SolverConfig::default()
        };
        let sol = integrate(&decay, &x0, 1.0, &cfg).unwrap();
        let err = (sol.x.data()[0] - (-1.0f64).exp()).abs();
        assert!(err < 10.0 * rtol, "rtol {rtol}: error {err}");
    }
}

fn random_spline(rng: &mut RngState) -> SplineCoefficients {
    let m = 2 + rng.below(7);
    let dim = 1 + rng.below(64);
    let mut times: Vec<f64> = (0..m - 2).map(|_| rng.uniform_in(0.05, 0.95)).collect();
    times.sort_by(f64::total_cmp);
    times.dedup_by(|a, b| (*a - *b).abs() < 1e-2);
    times.insert(0, 0.0);
    times.push(1.0);
    let knots = times
        .iter()
        .map(|_| Tensor::vector((0..dim).map(|_| rng.uniform_in(-1.0, 1.0)).collect()).unwrap())
        .collect();
    LatentTrajectory::new(times, knots).unwrap().spline().unwrap().clone()
}

#[test]
fn exact_velocity_recovers_every_knot() {
    let mut rng = RngState::new(8);
    let cfg = SolverConfig::strict();
    for case in 0..100 {
        let c = random_spline(&mut rng);
        let x0 = c.evaluate(0.0, 0).unwrap();
        for &tk in &c.times()[1..] {
            let sol = integrate(&c, &x0, tk, &cfg).unwrap();
            let err = sol.x.max_abs_diff(&c.evaluate(tk, 0).unwrap()).unwrap();
            assert!(err < 1e-6, "case {case} t={tk}: {err}");
        }
    }
}

#[test]
fn rk4_is_fourth_order() {
    // x' = cos(4t) x has x(t) = x0 exp(sin(4t) / 4)
    let field = |x: &Tensor, t: f64| -> Result<Tensor> { x.map("f", |v| (4.0 * t).cos() * v) };
    let x0 = Tensor::vector(vec![0.7]).unwrap();
    let reference = 0.7 * (4.0f64.sin() / 4.0).exp();
    let errs: Vec<f64> = [25, 50, 100, 200]
        .iter()
        .map(|&n| (integrate_fixed(&field, &x0, 1.0, n).unwrap().x.data()[0] - reference).abs())
        .collect();
    for w in errs.windows(2) {
        let order = (w[0] / w[1]).log2();
        assert!((order - 4.0).abs() < 0.3, "order {order} from {errs:?}");
    }
}
