//! Flow matching on 2-D synthetic trajectories with known velocities.

use std::fs::{self, File};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use trajflow::lfm::{toy_scenes, train_lfm, FieldConfig, LfmConfig, LfmScene, VelocityField};
use trajflow::par::Exec;
use trajflow::sampler::{integrate, nfe_profile, SolverConfig, VectorField};
use trajflow::spline::TrajectoryKind;

use crate::config::uniform_grid;
use crate::error::{CliError, CliResult, StageExt};
use crate::eval::fixed;

pub const TOY_SCHEMA: &str = "# trajflow toy v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub n_trajectories: usize,
    pub grid_points: usize,
    pub nfe_times: Vec<f64>,
    /// A given section replaces the toy defaults below as a whole, so it must
    /// set `lambda` to 0.
    pub lfm: LfmConfig,
    pub sampler: SolverConfig,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            n_trajectories: 20,
            grid_points: 101,
            nfe_times: vec![1.0 / 3.0, 2.0 / 3.0, 1.0],
            lfm: LfmConfig {
                iters: 3000,
                lr: 3e-3,
                lambda: 0.0,
                draws_per_scene: 8,
                scene_batch: 0,
                field: FieldConfig {
                    latent_dim: 2,
                    hidden_width: 64,
                    hidden_layers: 3,
                    n_freqs: 8,
                },
                ..LfmConfig::default()
            },
            sampler: SolverConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyReport {
    /// Mean `|v(mu_t, t) - mu'_t|` over trajectories and grid times.
    pub mean_velocity_error: f64,
    /// Largest distance between an integrated state and its knot.
    pub max_knot_error: f64,
    /// `(t, mean NFE)` from each trajectory's start.
    pub nfe: Vec<(f64, f64)>,
}

pub fn run_toy(cfg: &ToyConfig, seed: u64, out: &Path) -> CliResult<ToyReport> {
    if cfg.lfm.lambda != 0.0 {
        return Err(CliError::Config("key 'lfm.lambda': the toy set has no images, use 0".into()));
    }
    if cfg.lfm.field.latent_dim != 2 {
        return Err(CliError::Config("key 'lfm.field.latent_dim': toy latents are 2-D".into()));
    }
    let scenes = toy_scenes(cfg.n_trajectories, seed, TrajectoryKind::NaturalCubic).stage("toy")?;
    let mut field = VelocityField::new(cfg.lfm.field.clone(), seed).stage("toy")?;
    train_lfm(&mut field, None, &scenes, &cfg.lfm, seed).stage("toy")?;
    let report = measure(&field, &scenes, cfg).stage("toy")?;
    fs::create_dir_all(out).map_err(|e| CliError::output("toy", out, e))?;
    field.save(&out.join("lfm.ckpt")).stage("toy")?;
    write_report(&report, &out.join("toy.csv"))?;
    Ok(report)
}

fn measure(field: &VelocityField, scenes: &[LfmScene], cfg: &ToyConfig) -> trajflow::Result<ToyReport> {
    let grid = uniform_grid(cfg.grid_points);
    let mut err = 0.0;
    let mut count = 0usize;
    for s in scenes {
        for &t in &grid {
            let x = s.coeffs.evaluate(t, 0)?;
            let v = field.velocity(&x, t)?;
            err += v.sub(&s.coeffs.evaluate(t, 1)?)?.norm_l2();
            count += 1;
        }
    }
    let mut max_knot_error: f64 = 0.0;
    let mut nfe = vec![0.0; cfg.nfe_times.len()];
    for s in scenes {
        let x0 = s.coeffs.evaluate(0.0, 0)?;
        for &tk in &s.coeffs.times()[1..] {
            let sol = integrate(field, &x0, tk, &cfg.sampler)?;
            max_knot_error = max_knot_error.max(sol.x.sub(&s.coeffs.evaluate(tk, 0)?)?.norm_l2());
        }
        for (acc, (_, n)) in nfe
            .iter_mut()
            .zip(nfe_profile(field, &x0, &cfg.nfe_times, &cfg.sampler, Exec::default())?)
        {
            *acc += n as f64;
        }
    }
    let n = scenes.len().max(1) as f64;
    Ok(ToyReport {
        mean_velocity_error: err / count.max(1) as f64,
        max_knot_error,
        nfe: cfg.nfe_times.iter().zip(nfe).map(|(&t, s)| (t, s / n)).collect(),
    })
}

fn write_report(r: &ToyReport, path: &Path) -> CliResult<()> {
    let err = |e: &dyn std::fmt::Display| CliError::output("toy", path, e);
    let mut file = File::create(path).map_err(|e| err(&e))?;
    writeln!(file, "{TOY_SCHEMA}").map_err(|e| err(&e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["metric", "t", "value"]).map_err(|e| err(&e))?;
    let mut rows = vec![
        ("mean_velocity_error", String::new(), format!("{:.9}", r.mean_velocity_error)),
        ("max_knot_error", String::new(), format!("{:.9}", r.max_knot_error)),
    ];
    rows.extend(r.nfe.iter().map(|(t, n)| ("mean_nfe", fixed(*t), format!("{n:.3}"))));
    for (m, t, v) in rows {
        w.write_record([m, t.as_str(), v.as_str()]).map_err(|e| err(&e))?;
    }
    w.flush().map_err(|e| err(&e))
}
