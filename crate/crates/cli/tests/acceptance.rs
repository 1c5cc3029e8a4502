//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any failed.
//!
//! Set `TRAJFLOW_ACCEPTANCE=1,4,9` to run a subset. Criteria 6 to 9 share
//! one ablation, so asking for any of them trains it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use trajflow::image::Image;
use trajflow::lfm::{
    cfm_loss, perceptual_loss, project, taylor_extrapolate, taylor_extrapolate_graph, total_loss,
    ExtrapolationMode, FieldConfig, GraphField, PerceptualSurrogate, ProjectionTarget, TrainBatch,
    VelocityField,
};
use trajflow::numcore::{Graph, NodeId, RngState, Tensor};
use trajflow::rae::{RaeConfig, RaeModel};
use trajflow::sampler::{integrate, integrate_fixed, SolverConfig};
use trajflow::spline::{fit_spline, LatentTrajectory, SplineCoefficients};
use trajflow::Result;
use trajflow_cli::ablate::{ablate, Arm, ArmResult};
use trajflow_cli::toy::{run_toy, ToyConfig, ToyReport};
use trajflow_cli::RunConfig;

const SEED: u64 = 0;
const HELD_OUT: f64 = 3.0;
const ARMS: [&str; 4] = [
    "trajectory=spline,perceptual=taylor3,skips=on",
    "trajectory=linear",
    "perceptual=linear",
    "skips=off",
];

type Check = std::result::Result<String, String>;

struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, id: usize, name: &str, outcome: Check, secs: f64, limit: Option<f64>) {
        let (mut pass, mut detail) = match outcome {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        if let Some(limit) = limit {
            if secs >= limit {
                pass = false;
                detail = format!("{detail}; over the {limit:.0} s budget");
            }
        }
        if !pass {
            self.failed += 1;
        }
        let tag = if pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {id} {name}: {detail} ({secs:.2} s)");
    }
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let v = f();
    (v, start.elapsed().as_secs_f64())
}

// ---------------------------------------------------------------- splines

const N_TRAJ: usize = 1000;
const TOL: f64 = 1e-9;

fn random_trajectory(rng: &mut RngState) -> LatentTrajectory {
    let m = 2 + rng.below(7);
    let dim = 1 + rng.below(64);
    let mut inner: Vec<f64> = (0..m - 2).map(|_| rng.uniform_in(0.02, 0.98)).collect();
    inner.sort_by(f64::total_cmp);
    inner.dedup_by(|a, b| (*a - *b).abs() < 1e-3);
    let mut times = vec![0.0];
    times.extend(inner);
    times.push(1.0);
    let knots = times
        .iter()
        .map(|_| Tensor::vector((0..dim).map(|_| rng.uniform_in(-2.0, 2.0)).collect()).unwrap())
        .collect();
    LatentTrajectory::new(times, knots).unwrap()
}

fn suite() -> Vec<LatentTrajectory> {
    let mut rng = RngState::new(SEED);
    (0..N_TRAJ).map(|_| random_trajectory(&mut rng)).collect()
}

fn gap(a: &Tensor, b: &Tensor) -> f64 {
    a.max_abs_diff(b).unwrap()
}

fn spline_suite(trajs: &[LatentTrajectory]) -> Check {
    let mut rng = RngState::derive(SEED, 1);
    let mut worst: f64 = 0.0;
    for (i, traj) in trajs.iter().enumerate() {
        let c = fit_spline(traj).map_err(|e| format!("trajectory {i}: {e}"))?;
        let times = traj.times();
        let m = times.len();
        let mut errs = Vec::new();
        for (k, &t) in times.iter().enumerate() {
            errs.push(gap(&c.evaluate(t, 0).unwrap(), &traj.knots()[k]));
        }
        for k in 1..m - 1 {
            for order in 0..=2 {
                let left = c.evaluate_on_segment(k - 1, times[k], order).unwrap();
                errs.push(gap(&left, &c.evaluate_on_segment(k, times[k], order).unwrap()));
            }
        }
        let zero = Tensor::zeros(traj.knot_shape());
        errs.push(gap(&c.evaluate_on_segment(0, 0.0, 2).unwrap(), &zero));
        errs.push(gap(&c.evaluate_on_segment(m - 2, 1.0, 2).unwrap(), &zero));

        let other: Vec<Tensor> = traj
            .knots()
            .iter()
            .map(|k| Tensor::new(k.shape().to_vec(), k.data().iter().map(|_| rng.normal()).collect()).unwrap())
            .collect();
        let (alpha, beta) = (rng.uniform_in(-3.0, 3.0), rng.uniform_in(-3.0, 3.0));
        let mixed: Vec<Tensor> =
            traj.knots().iter().zip(&other).map(|(a, b)| a.scale(alpha).unwrap().axpy(beta, b).unwrap()).collect();
        let cm = fit_spline(&LatentTrajectory::new(times.to_vec(), mixed).unwrap()).unwrap();
        let cb = fit_spline(&LatentTrajectory::new(times.to_vec(), other).unwrap()).unwrap();
        for _ in 0..4 {
            let t = rng.uniform();
            let rhs = c.evaluate(t, 0).unwrap().scale(alpha).unwrap().axpy(beta, &cb.evaluate(t, 0).unwrap()).unwrap();
            errs.push(gap(&cm.evaluate(t, 0).unwrap(), &rhs));
        }
        let e = errs.into_iter().fold(0.0, f64::max);
        ensure(e < TOL, || format!("trajectory {i}: invariant off by {e:e}"))?;
        worst = worst.max(e);
    }
    Ok(format!("{} trajectories, worst deviation {worst:.2e}", trajs.len()))
}

fn taylor_exactness(trajs: &[LatentTrajectory]) -> Check {
    let mut rng = RngState::derive(SEED, 2);
    let (mut worst, mut curved) = (0.0f64, 0usize);
    for (i, traj) in trajs.iter().enumerate() {
        let c = traj.spline().unwrap();
        for _ in 0..4 {
            let t = rng.uniform_in(0.0, 1.0 - 1e-9);
            let v = c.evaluate(t, 1).unwrap();
            let p = project(c, t, ProjectionTarget::Next).unwrap();
            let knot = c.evaluate(c.times()[p.target], 0).unwrap();
            let e3 = gap(&taylor_extrapolate(c, t, &v, ExtrapolationMode::Taylor3).unwrap(), &knot);
            ensure(e3 < TOL, || format!("trajectory {i} t={t}: taylor3 error {e3:e}"))?;
            worst = worst.max(e3);
            let (a, b, _, _) = c.segment(p.segment);
            if a.data().iter().zip(b.data()).any(|(x, y)| x.abs() + y.abs() > 1e-6) {
                curved += 1;
                let e1 = gap(&taylor_extrapolate(c, t, &v, ExtrapolationMode::Linear).unwrap(), &knot);
                ensure(e1 > 0.0, || format!("trajectory {i} t={t}: linear mode exact on a curved segment"))?;
            }
        }
    }
    Ok(format!("worst taylor3 error {worst:.2e}; linear mode inexact on all {curved} curved draws"))
}

// ---------------------------------------------------------------- autodiff

const H: f64 = 1e-5;

fn relative_error(params: &[Tensor], objective: &dyn Fn(&[Tensor]) -> (f64, Vec<f64>)) -> f64 {
    let (_, analytic) = objective(params);
    let mut numeric = Vec::with_capacity(analytic.len());
    for (i, p) in params.iter().enumerate() {
        for j in 0..p.len() {
            let at = |delta: f64| {
                let mut shifted = params.to_vec();
                let mut data = p.data().to_vec();
                data[j] += delta;
                shifted[i] = Tensor::new(p.shape().to_vec(), data).unwrap();
                objective(&shifted).0
            };
            numeric.push((at(H) - at(-H)) / (2.0 * H));
        }
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(&analytic).max(norm(&numeric)).max(1e-12)
}

fn normal(rng: &mut RngState, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

fn mlp_error(seed: u64) -> f64 {
    let mut rng = RngState::derive(SEED, 300 + seed);
    let batch = 1 + rng.below(4);
    let depth = 1 + rng.below(3);
    let widths: Vec<usize> = (0..=depth).map(|_| 1 + rng.below(6)).collect();
    let input = normal(&mut rng, &[batch, widths[0]]);
    let target = normal(&mut rng, &[batch, widths[depth]]);
    let mut params = Vec::new();
    for w in widths.windows(2) {
        params.push(normal(&mut rng, &[w[0], w[1]]).scale(0.7).unwrap());
        params.push(normal(&mut rng, &[w[1]]).scale(0.3).unwrap());
    }
    let loss_kind = seed % 3;
    let objective = |ps: &[Tensor]| {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ps.iter().map(|p| g.param(p.clone())).collect();
        let mut h = g.constant(input.clone());
        for (l, pair) in ids.chunks(2).enumerate() {
            h = g.matmul(h, pair[0]).unwrap();
            h = g.add_bias(h, pair[1]).unwrap();
            if l + 1 < depth {
                h = g.gelu(h).unwrap();
            }
        }
        let y = g.constant(target.clone());
        let out = match loss_kind {
            0 => g.mse(h, y).unwrap(),
            1 => {
                let r = g.sub(h, y).unwrap();
                let sq = g.mul(r, r).unwrap();
                g.mean(sq).unwrap()
            }
            _ => {
                let r = g.mul(h, y).unwrap();
                let s = g.sum(r).unwrap();
                g.scale(s, 0.5).unwrap()
            }
        };
        let value = g.value(out).item().unwrap();
        g.backward(out).unwrap();
        (value, ids.iter().flat_map(|&id| g.grad(id).into_data()).collect())
    };
    relative_error(&params, &objective)
}

/// `cfm + 0.1 * perceptual` as a function of the velocity-field weights.
fn total_loss_error(seed: u64) -> f64 {
    let mut rng = RngState::derive(SEED, 400 + seed);
    let mut rae = RaeModel::new(
        RaeConfig {
            height: 3,
            width: 3,
            hidden: vec![5, 4],
            latent_dim: 2,
            ..RaeConfig::default()
        },
        seed,
    )
    .unwrap();
    rae.freeze();
    let mut coeffs = Vec::new();
    let mut features = Vec::new();
    let mut images = Vec::new();
    for _ in 0..3 {
        let ims: Vec<Image> =
            (0..3).map(|_| Image::new(1, 3, 3, (0..9).map(|_| rng.uniform()).collect()).unwrap()).collect();
        let enc = rae.encode_batch(&ims.iter().collect::<Vec<_>>()).unwrap();
        let traj =
            LatentTrajectory::new(vec![0.0, 1.0 / 3.0, 1.0], enc.iter().map(|e| e.latent.clone()).collect()).unwrap();
        coeffs.push(traj.spline().unwrap().clone());
        features.push(enc[0].features.clone());
        images.push(ims);
    }
    let refs: Vec<&SplineCoefficients> = coeffs.iter().collect();
    let ts: Vec<f64> = (0..3).map(|_| rng.uniform()).collect();
    let tp: Vec<f64> = (0..3).map(|_| rng.uniform_in(0.0, 0.999)).collect();
    let batch = TrainBatch::at(&refs, &ts).unwrap();
    let at = TrainBatch::at(&refs, &tp).unwrap();
    let feats: Vec<Tensor> =
        (0..2).map(|l| Tensor::stack(&features.iter().map(|f| f[l].clone()).collect::<Vec<_>>()).unwrap()).collect();
    let field = VelocityField::new(
        FieldConfig {
            latent_dim: 2,
            hidden_width: 5,
            hidden_layers: 2,
            n_freqs: 2,
        },
        seed,
    )
    .unwrap();
    let params: Vec<Tensor> = field.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
    let mode = if seed % 2 == 0 { ExtrapolationMode::Taylor3 } else { ExtrapolationMode::Linear };
    let objective = |ps: &[Tensor]| {
        let mut f = field.clone();
        for (dst, src) in f.tensors_mut().into_iter().zip(ps) {
            *dst = src.clone();
        }
        let mut g = Graph::new();
        let bound = f.bind(&mut g, true);
        let cfm = cfm_loss(&mut g, &bound, &batch).unwrap();
        let xp = g.constant(at.x.clone());
        let vp = bound.forward(&mut g, xp, &tp).unwrap();
        let (z, proj) = taylor_extrapolate_graph(&mut g, &refs, &tp, vp, mode, ProjectionTarget::Next).unwrap();
        let targets: Vec<&Image> = images.iter().zip(&proj).map(|(ims, p)| &ims[p.target]).collect();
        let perc = perceptual_loss(&mut g, &rae, z, &feats, &targets, &PerceptualSurrogate::default()).unwrap();
        let total = total_loss(&mut g, cfm, perc, 0.1).unwrap();
        let value = g.value(total).item().unwrap();
        g.backward(total).unwrap();
        (value, bound.ids().into_iter().flat_map(|id| g.grad(id).into_data()).collect())
    };
    relative_error(&params, &objective)
}

fn gradcheck() -> Check {
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let e = mlp_error(seed);
        ensure(e < 1e-4, || format!("mlp config {seed}: relative error {e:e}"))?;
        worst = worst.max(e);
    }
    let mut worst_total: f64 = 0.0;
    for seed in 0..4 {
        let e = total_loss_error(seed);
        ensure(e < 1e-4, || format!("total loss config {seed}: relative error {e:e}"))?;
        worst_total = worst_total.max(e);
    }
    Ok(format!("100 mlp configs worst {worst:.2e}; total loss at lambda 0.1 worst {worst_total:.2e}"))
}

// ---------------------------------------------------------------- solver

fn solver() -> Check {
    let decay = |x: &Tensor, _t: f64| x.scale(-1.0);
    let x0 = Tensor::vector(vec![1.0]).unwrap();
    let mut parts = Vec::new();
    for rtol in [1e-5, 1e-8] {
        let sol = integrate(&decay, &x0, 1.0, &SolverConfig::with_tolerances(rtol, rtol * 1e-2)).map_err(|e| e.to_string())?;
        let err = (sol.x.data()[0] - (-1.0f64).exp()).abs();
        ensure(err < 10.0 * rtol, || format!("decay at rtol {rtol:e}: error {err:e}"))?;
        parts.push(format!("decay error {err:.1e} at rtol {rtol:.0e}"));
    }

    let mut rng = RngState::derive(SEED, 4);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let traj = random_trajectory(&mut rng);
        let c = traj.spline().unwrap();
        let x0 = c.evaluate(0.0, 0).unwrap();
        for (k, &tk) in traj.times().iter().enumerate().skip(1) {
            let sol = integrate(c, &x0, tk, &SolverConfig::strict()).map_err(|e| e.to_string())?;
            let e = gap(&sol.x, &traj.knots()[k]);
            ensure(e < 1e-6, || format!("trajectory {i} knot {k}: error {e:e}"))?;
            worst = worst.max(e);
        }
    }
    parts.push(format!("knot recovery worst {worst:.1e}"));

    // x' = cos(4t) x, so x(1) = x0 exp(sin(4) / 4)
    let field = |x: &Tensor, t: f64| -> Result<Tensor> { x.map("f", |v| (4.0 * t).cos() * v) };
    let x0 = Tensor::vector(vec![0.7]).unwrap();
    let exact = 0.7 * (4.0f64.sin() / 4.0).exp();
    let errs: Vec<f64> = [25, 50, 100, 200]
        .iter()
        .map(|&n| (integrate_fixed(&field, &x0, 1.0, n).unwrap().x.data()[0] - exact).abs())
        .collect();
    let orders: Vec<f64> = errs.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
    for &p in &orders {
        ensure((p - 4.0).abs() <= 0.3, || format!("rk4 order {p:.3} from errors {errs:?}"))?;
    }
    parts.push(format!("rk4 orders {:.3?}", orders));
    Ok(parts.join("; "))
}

// ---------------------------------------------------------------- training runs

struct Runs {
    toy: ToyReport,
    toy_secs: f64,
    arms: Vec<ArmResult>,
    stage_secs: BTreeMap<String, f64>,
}

fn train_everything(out: &Path) -> std::result::Result<Runs, String> {
    let (toy, toy_secs) = timed(|| run_toy(&ToyConfig::default(), SEED, &out.join("toy")));
    let toy = toy.map_err(|e| format!("toy run: {e}"))?;
    let arms: Vec<Arm> = ARMS.iter().map(|a| a.parse().unwrap()).collect();
    let results = ablate(&RunConfig::new(SEED), &arms, &out.join("ablate")).map_err(|e| format!("ablation: {e}"))?;
    let mut stage_secs = BTreeMap::new();
    let mut rdr = csv::Reader::from_path(out.join("ablate/timing.csv")).map_err(|e| e.to_string())?;
    for row in rdr.records() {
        let row = row.map_err(|e| e.to_string())?;
        stage_secs.insert(row[0].to_string(), row[3].parse::<f64>().unwrap());
    }
    Ok(Runs {
        toy,
        toy_secs,
        arms: results,
        stage_secs,
    })
}

fn toy_convergence(r: &ToyReport) -> Check {
    let iters = ToyConfig::default().lfm.iters;
    ensure(iters <= 5000, || format!("{iters} training steps"))?;
    ensure(r.mean_velocity_error < 0.05, || format!("mean velocity error {:.4}", r.mean_velocity_error))?;
    ensure(r.max_knot_error < 0.05, || format!("knot distance {:.4}", r.max_knot_error))?;
    Ok(format!(
        "{iters} steps, mean velocity error {:.4}, worst knot distance {:.4}",
        r.mean_velocity_error, r.max_knot_error
    ))
}

/// `(t, psnr)` of the per-time means for `scale` in an eval report.
fn mean_curve(eval_csv: &Path, scale: f64) -> Vec<(f64, f64)> {
    let text = fs::read_to_string(eval_csv).unwrap();
    let body = text.split_once('\n').map_or("", |(_, rest)| rest);
    let mut rdr = csv::Reader::from_reader(body.as_bytes());
    rdr.records()
        .map(|r| r.unwrap())
        .filter(|r| &r[0] == "mean" && r[2].parse::<f64>().unwrap() == scale)
        .map(|r| (r[3].parse().unwrap(), r[4].parse().unwrap()))
        .collect()
}

fn held_out_curve(eval_csv: &Path) -> Check {
    let curve = mean_curve(eval_csv, HELD_OUT);
    ensure(curve.len() == 21, || format!("{} sweep points", curve.len()))?;
    let (t_best, best) = curve.iter().fold((0.0, f64::NEG_INFINITY), |acc, &(t, p)| if p > acc.1 { (t, p) } else { acc });
    let (p0, p1) = (curve[0].1, curve[20].1);
    let detail = format!(
        "argmax t={t_best:.2} at {best:.2} dB; margin {:.2} dB over t=0, {:.2} dB over t=1",
        best - p0,
        best - p1
    );
    ensure((0.55..=0.80).contains(&t_best) && best - p0 >= 1.0 && best - p1 >= 1.0, || detail.clone())?;
    Ok(detail)
}

fn nfe_at(nfe: &[(f64, f64)], t: f64) -> f64 {
    nfe.iter().find(|(s, _)| (s - t).abs() < 1e-12).map(|&(_, n)| n).unwrap()
}

fn arm(results: &[ArmResult], i: usize) -> &ArmResult {
    let want = ablate_label(i);
    results.iter().find(|r| r.arm == want && r.scale == HELD_OUT).unwrap()
}

fn ablate_label(i: usize) -> String {
    let base = RunConfig::new(SEED);
    trajflow_cli::ablate::label(&ARMS[i].parse::<Arm>().unwrap().apply(&base).unwrap())
}

fn nfe_monotone(toy: &ToyReport, arms: &[ArmResult]) -> Check {
    let (n1, n2, n3) = (nfe_at(&toy.nfe, 1.0 / 3.0), nfe_at(&toy.nfe, 2.0 / 3.0), nfe_at(&toy.nfe, 1.0));
    let on = nfe_at(&arm(arms, 0).nfe, 1.0);
    let off = nfe_at(&arm(arms, 3).nfe, 1.0);
    let detail = format!("toy NFE {n1:.1} <= {n2:.1} <= {n3:.1}; NFE(1) skips off {off:.1} vs on {on:.1}");
    ensure(n3 >= n2 && n2 >= n1 && off >= on, || detail.clone())?;
    Ok(detail)
}

fn ablation_order(arms: &[ArmResult]) -> Check {
    let (base, lin_traj, lin_perc) = (arm(arms, 0), arm(arms, 1), arm(arms, 2));
    let detail = format!(
        "held-out x3: spline {:.4} vs linear trajectory {:.4}; taylor3 {:.4} vs linear perceptual {:.4} dB",
        base.heldout_psnr, lin_traj.heldout_psnr, base.heldout_psnr, lin_perc.heldout_psnr
    );
    ensure(base.heldout_psnr >= lin_traj.heldout_psnr && base.heldout_psnr >= lin_perc.heldout_psnr, || detail.clone())?;
    Ok(detail)
}

/// Every CSV under `root` except wall-clock logs, by relative path.
fn csv_files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "csv") && path.file_name().unwrap() != "timing.csv" {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn determinism(a: &Path, b: &Path) -> Check {
    let (fa, fb) = (csv_files(a), csv_files(b));
    ensure(fa.keys().eq(fb.keys()), || "the two runs wrote different CSV sets".into())?;
    let differing: Vec<String> =
        fa.iter().filter(|(k, v)| fb[*k] != **v).map(|(k, _)| k.display().to_string()).collect();
    ensure(differing.is_empty(), || format!("differ: {}", differing.join(", ")))?;
    Ok(format!("{} CSVs byte-identical", fa.len()))
}

fn main() -> ExitCode {
    trajflow_cli::init_threads_from_env();
    let wanted: Option<Vec<usize>> = std::env::var("TRAJFLOW_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let on = |id: usize| wanted.as_ref().is_none_or(|w| w.contains(&id));
    let mut report = Report { failed: 0 };

    if on(1) || on(2) {
        let trajs = suite();
        if on(1) {
            let (r, secs) = timed(|| spline_suite(&trajs));
            report.line(1, "spline suite", r, secs, Some(10.0));
        }
        if on(2) {
            let (r, secs) = timed(|| taylor_exactness(&trajs));
            report.line(2, "taylor exactness", r, secs, Some(5.0));
        }
    }
    if on(3) {
        let (r, secs) = timed(gradcheck);
        report.line(3, "autodiff", r, secs, Some(30.0));
    }
    if on(4) {
        let (r, secs) = timed(solver);
        report.line(4, "rk45 and rk4", r, secs, Some(30.0));
    }

    if (5..=9).any(on) {
        let dir = tempfile::tempdir().unwrap();
        let first = dir.path().join("first");
        let runs = match train_everything(&first) {
            Ok(r) => r,
            Err(e) => {
                for id in (5..=9).filter(|&id| on(id)) {
                    report.line(id, "training runs", Err(e.clone()), 0.0, None);
                }
                return ExitCode::FAILURE;
            }
        };
        let s = |k: &str| runs.stage_secs.get(k).copied().unwrap_or(0.0);
        if on(5) {
            report.line(5, "toy convergence", toy_convergence(&runs.toy), runs.toy_secs, Some(120.0));
        }
        if on(6) {
            let secs = s("data") + s("rae_0") + s("arm_0_lfm") + s("arm_0_eval");
            let r = held_out_curve(&first.join("ablate/arm_0/eval.csv"));
            report.line(6, "held-out sweep", r, secs, Some(600.0));
        }
        if on(7) {
            let secs = runs.toy_secs + s("rae_1") + s("arm_3_lfm") + s("arm_3_eval");
            report.line(7, "nfe ordering", nfe_monotone(&runs.toy, &runs.arms), secs, Some(300.0));
        }
        if on(8) {
            let secs = s("arm_1_lfm") + s("arm_1_eval") + s("arm_2_lfm") + s("arm_2_eval");
            report.line(8, "ablation ordering", ablation_order(&runs.arms), secs, None);
        }
        if on(9) {
            let second = dir.path().join("second");
            let (r, secs) = timed(|| train_everything(&second).and_then(|_| determinism(&first, &second)));
            report.line(9, "determinism", r, secs, None);
        }
    }

    if report.failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{} criteria failed", report.failed);
        ExitCode::FAILURE
    }
}
