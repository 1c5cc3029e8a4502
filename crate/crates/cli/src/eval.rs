use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use trajflow::degsim::{psnr, Dataset, SceneImages, Split};
use trajflow::par::Exec;
use trajflow::rae::RaeModel;
use trajflow::sampler::{integrate, SolverConfig, VectorField};
use trajflow::spline::normalize_scale;
use trajflow::{Error, Result};

use crate::error::{CliError, CliResult};

pub const EVAL_SCHEMA: &str = "# trajflow eval v1";

/// One integration of one scene to one time, scored against one scale.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRow {
    pub scene: usize,
    pub scale: f64,
    pub t: f64,
    pub psnr: f64,
    pub nfe: usize,
    pub wall: Duration,
}

/// Mean PSNR and NFE over scenes at one time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanRow {
    pub scale: f64,
    pub t: f64,
    pub psnr: f64,
    pub nfe: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub scales: Vec<f64>,
    pub grid: Vec<f64>,
    /// Scene-major, then time, then scale.
    pub rows: Vec<SampleRow>,
    /// Each scale scored at its own normalized time. Empty when `grid` is.
    pub matched: Vec<SampleRow>,
}

/// Encode every eval scene's HR image, integrate to each time in `grid`,
/// decode with the HR skip features and score against the image at each of
/// `scales`. Scenes run in parallel; rows come back in scene order.
pub fn eval_sweep<F: VectorField + Sync + ?Sized>(
    rae: &RaeModel,
    field: &F,
    dataset: &Dataset,
    grid: &[f64],
    scales: &[f64],
    solver: &SolverConfig,
    exec: Exec,
) -> Result<EvalReport> {
    let levels = dataset.levels()?;
    let scenes: Vec<&SceneImages> = dataset.split(Split::Eval).collect();
    for scene in &scenes {
        for &s in scales {
            if scene.image_at(s).is_none() {
                return Err(Error::Domain(format!(
                    "eval scene {} has no image at scale {s}",
                    scene.entry.id
                )));
            }
        }
    }
    let matched_t: Vec<f64> = if grid.is_empty() {
        Vec::new()
    } else {
        scales
            .iter()
            .map(|&s| normalize_scale(s, &levels))
            .collect::<Result<_>>()?
    };
    let per_scene = exec.map(&scenes, |scene| -> Result<(Vec<SampleRow>, Vec<SampleRow>)> {
        let enc = rae.encode(scene.hr())?;
        let run = |t: f64, targets: &[f64]| -> Result<Vec<SampleRow>> {
            let start = Instant::now();
            let sol = integrate(field, &enc.latent, t, solver)?;
            let image = rae.decode(&sol.x, &enc.features)?;
            let wall = start.elapsed();
            targets
                .iter()
                .map(|&s| {
                    let truth = scene.image_at(s).expect("checked above");
                    Ok(SampleRow {
                        scene: scene.entry.id,
                        scale: s,
                        t,
                        psnr: psnr(&image, truth)?,
                        nfe: sol.nfe,
                        wall,
                    })
                })
                .collect()
        };
        let mut rows = Vec::with_capacity(grid.len() * scales.len());
        for &t in grid {
            rows.extend(run(t, scales)?);
        }
        let mut matched = Vec::with_capacity(matched_t.len());
        for (&s, &t) in scales.iter().zip(&matched_t) {
            matched.extend(run(t, &[s])?);
        }
        Ok((rows, matched))
    });
    let mut rows = Vec::new();
    let mut matched = Vec::new();
    for r in per_scene {
        let (a, b) = r?;
        rows.extend(a);
        matched.extend(b);
    }
    Ok(EvalReport {
        scales: scales.to_vec(),
        grid: grid.to_vec(),
        rows,
        matched,
    })
}

fn mean_of<'a>(rows: impl Iterator<Item = &'a SampleRow>, scale: f64, t: f64) -> Option<MeanRow> {
    let (mut p, mut n, mut count) = (0.0, 0.0, 0usize);
    for r in rows {
        p += r.psnr;
        n += r.nfe as f64;
        count += 1;
    }
    (count > 0).then(|| MeanRow {
        scale,
        t,
        psnr: p / count as f64,
        nfe: n / count as f64,
    })
}

impl EvalReport {
    /// Mean over scenes at every grid time for `scale`.
    pub fn curve(&self, scale: f64) -> Vec<MeanRow> {
        self.grid
            .iter()
            .filter_map(|&t| {
                mean_of(
                    self.rows.iter().filter(|r| r.scale == scale && r.t == t),
                    scale,
                    t,
                )
            })
            .collect()
    }

    /// Grid point with the highest mean PSNR; the earliest wins ties.
    pub fn argmax(&self, scale: f64) -> Option<MeanRow> {
        self.curve(scale)
            .into_iter()
            .fold(None, |best: Option<MeanRow>, r| match best {
                Some(b) if b.psnr >= r.psnr => Some(b),
                _ => Some(r),
            })
    }

    /// Mean PSNR of `scale` at its own normalized time.
    pub fn matched_mean(&self, scale: f64) -> Option<MeanRow> {
        let t = self.matched.iter().find(|r| r.scale == scale)?.t;
        mean_of(self.matched.iter().filter(|r| r.scale == scale), scale, t)
    }

    /// Versioned CSV without wall times, so it is a pure function of the inputs.
    pub fn write_csv(&self, path: &Path) -> CliResult<()> {
        let err = |e: &dyn std::fmt::Display| CliError::output("eval", path, e);
        let mut file = File::create(path).map_err(|e| err(&e))?;
        writeln!(file, "{EVAL_SCHEMA}").map_err(|e| err(&e))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["row", "scene", "scale", "t", "psnr", "nfe"])
            .map_err(|e| err(&e))?;
        for r in &self.rows {
            w.write_record([
                "sample".to_string(),
                r.scene.to_string(),
                r.scale.to_string(),
                fixed(r.t),
                fixed(r.psnr),
                r.nfe.to_string(),
            ])
            .map_err(|e| err(&e))?;
        }
        for &s in &self.scales {
            let means = self.curve(s);
            let summary = [
                ("argmax", self.argmax(s)),
                ("matched", self.matched_mean(s)),
            ];
            for (label, row) in means
                .iter()
                .map(|m| ("mean", Some(*m)))
                .chain(summary)
            {
                if let Some(m) = row {
                    w.write_record([
                        label.to_string(),
                        String::new(),
                        s.to_string(),
                        fixed(m.t),
                        fixed(m.psnr),
                        format!("{:.3}", m.nfe),
                    ])
                    .map_err(|e| err(&e))?;
                }
            }
        }
        w.flush().map_err(|e| err(&e))
    }

    /// `(scene, t, seconds)` per integration, one entry per scene and time.
    pub fn timings(&self) -> Vec<(usize, f64, f64)> {
        let first = self.scales.first().copied();
        self.rows
            .iter()
            .filter(|r| Some(r.scale) == first)
            .chain(&self.matched)
            .map(|r| (r.scene, r.t, r.wall.as_secs_f64()))
            .collect()
    }
}

pub(crate) fn fixed(v: f64) -> String {
    format!("{v:.6}")
}
