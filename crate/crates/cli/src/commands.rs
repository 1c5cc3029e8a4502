//! Pipeline stages shared by the subcommands.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use trajflow::degsim::{build_dataset, generate, Dataset, Split};
use trajflow::image::Image;
use trajflow::lfm::{encode_scenes, train_lfm, LossRecord, VelocityField};
use trajflow::par::Exec;
use trajflow::rae::{train_rae, RaeModel, RaeSample, RaeTrainReport};
use trajflow::sampler::{integrate, nfe_profile, SolverConfig};
use trajflow::spline::normalize_scale;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult, StageExt};
use crate::eval::{eval_sweep, fixed, EvalReport};

/// Wall-clock log kept apart from the deterministic reports.
#[derive(Clone, Debug, Default)]
pub struct Timing {
    rows: Vec<(String, Option<usize>, Option<f64>, f64)>,
}

impl Timing {
    pub fn stage(&mut self, name: &str, start: Instant) {
        self.rows
            .push((name.to_string(), None, None, start.elapsed().as_secs_f64()));
    }

    pub fn add_eval(&mut self, report: &EvalReport) {
        for (scene, t, secs) in report.timings() {
            self.rows.push(("sample".into(), Some(scene), Some(t), secs));
        }
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        let err = |e: &dyn std::fmt::Display| CliError::output("timing", path, e);
        let mut w = csv::Writer::from_path(path).map_err(|e| err(&e))?;
        w.write_record(["stage", "scene", "t", "seconds"]).map_err(|e| err(&e))?;
        for (stage, scene, t, secs) in &self.rows {
            w.write_record([
                stage.clone(),
                scene.map(|s| s.to_string()).unwrap_or_default(),
                t.map(fixed).unwrap_or_default(),
                fixed(*secs),
            ])
            .map_err(|e| err(&e))?;
        }
        w.flush().map_err(|e| err(&e))
    }
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> CliResult<Dataset> {
    build_dataset(&cfg.data, cfg.seed, out, Exec::default()).stage("gen-data")
}

/// Load the dataset at `dir`, or regenerate it from the config when absent.
pub fn dataset_or_generate(cfg: &RunConfig, dir: Option<&Path>) -> CliResult<Dataset> {
    match dir {
        Some(d) => Dataset::load(d).stage("load-data"),
        None => generate(&cfg.data, cfg.seed, Exec::default()).stage("gen-data"),
    }
}

pub fn rae_samples(ds: &Dataset) -> Vec<RaeSample> {
    ds.split(Split::Train)
        .map(|s| {
            let images = ds.train_images(s);
            RaeSample {
                hr: images[0].clone(),
                lr: images[1..].iter().map(|&i| i.clone()).collect(),
            }
        })
        .collect()
}

/// Train, freeze and save the RAE with its loss curve in `out/loss.csv`.
pub fn train_rae_stage(cfg: &RunConfig, ds: &Dataset, out: &Path) -> CliResult<RaeModel> {
    let mut model = RaeModel::new(cfg.rae.model.clone(), cfg.seed).stage("train-rae")?;
    let report = train_rae(&mut model, &rae_samples(ds), &cfg.rae.train, cfg.seed).stage("train-rae")?;
    model.freeze();
    model.save(out).stage("train-rae")?;
    write_rae_loss(&report, &out.join("loss.csv"))?;
    Ok(model)
}

fn write_rae_loss(report: &RaeTrainReport, path: &Path) -> CliResult<()> {
    let err = |e: &dyn std::fmt::Display| CliError::output("train-rae", path, e);
    let mut w = csv::Writer::from_path(path).map_err(|e| err(&e))?;
    w.write_record(["iter", "loss", "smoothed"]).map_err(|e| err(&e))?;
    for (i, (l, s)) in report.losses.iter().zip(&report.smoothed).enumerate() {
        w.write_record([i.to_string(), l.to_string(), s.to_string()])
            .map_err(|e| err(&e))?;
    }
    w.flush().map_err(|e| err(&e))
}

/// Train and save the velocity field with its loss curve in `out/loss.csv`.
pub fn train_lfm_stage(
    cfg: &RunConfig,
    rae: &RaeModel,
    ds: &Dataset,
    out: &Path,
) -> CliResult<VelocityField> {
    let scenes = encode_scenes(rae, ds, Split::Train, cfg.lfm.trajectory, cfg.lfm.augment, Exec::default())
        .stage("train-lfm")?;
    let mut field = VelocityField::new(cfg.lfm.field.clone(), cfg.seed).stage("train-lfm")?;
    field.levels = Some(ds.levels().stage("train-lfm")?);
    let perceptual = (cfg.lfm.lambda > 0.0).then_some(rae);
    let records = train_lfm(&mut field, perceptual, &scenes, &cfg.lfm, cfg.seed).stage("train-lfm")?;
    field.save(out).stage("train-lfm")?;
    write_lfm_loss(&records, &out.join("loss.csv"))?;
    Ok(field)
}

fn write_lfm_loss(records: &[LossRecord], path: &Path) -> CliResult<()> {
    let err = |e: &dyn std::fmt::Display| CliError::output("train-lfm", path, e);
    let mut w = csv::Writer::from_path(path).map_err(|e| err(&e))?;
    for r in records {
        w.serialize(r).map_err(|e| err(&e))?;
    }
    w.flush().map_err(|e| err(&e))
}

/// Held-out sweep written to `out/eval.csv`.
pub fn eval_stage(
    cfg: &RunConfig,
    rae: &RaeModel,
    field: &VelocityField,
    ds: &Dataset,
    out: &Path,
) -> CliResult<EvalReport> {
    if ds.manifest.holdout_scales.is_empty() {
        return Err(CliError::Stage {
            stage: "eval",
            source: trajflow::Error::Domain("dataset has no held-out scales".into()),
        });
    }
    let report = eval_sweep(
        rae,
        field,
        ds,
        &cfg.eval.t_grid,
        &ds.manifest.holdout_scales,
        &cfg.sampler,
        Exec::default(),
    )
    .stage("eval")?;
    fs::create_dir_all(out).map_err(|e| CliError::output("eval", out, e))?;
    report.write_csv(&out.join("eval.csv"))?;
    Ok(report)
}

/// Mean NFE over eval scenes at each of `cfg.eval.nfe_times`.
pub fn mean_nfe(
    cfg: &RunConfig,
    rae: &RaeModel,
    field: &VelocityField,
    ds: &Dataset,
) -> CliResult<Vec<(f64, f64)>> {
    let scenes: Vec<_> = ds.split(Split::Eval).collect();
    let times = &cfg.eval.nfe_times;
    let mut sums = vec![0.0; times.len()];
    for scene in &scenes {
        let z = rae.encode(scene.hr()).stage("nfe")?.latent;
        let profile = nfe_profile(field, &z, times, &cfg.sampler, Exec::default()).stage("nfe")?;
        for (acc, (_, n)) in sums.iter_mut().zip(profile) {
            *acc += n as f64;
        }
    }
    let n = scenes.len().max(1) as f64;
    Ok(times.iter().zip(sums).map(|(&t, s)| (t, s / n)).collect())
}

#[derive(Serialize)]
struct RunManifest {
    format: &'static str,
    seed: u64,
    config: &'static str,
    data: &'static str,
    rae: &'static str,
    lfm: &'static str,
    eval: &'static str,
    timing: &'static str,
}

pub struct PipelineOutput {
    pub dataset: Dataset,
    pub rae: RaeModel,
    pub field: VelocityField,
    pub report: EvalReport,
}

/// gen-data, train-rae, train-lfm and eval into one directory.
pub fn pipeline(cfg: &RunConfig, out: &Path) -> CliResult<PipelineOutput> {
    cfg.echo(out)?;
    let mut timing = Timing::default();
    let start = Instant::now();
    let dataset = gen_data(cfg, &out.join("data"))?;
    timing.stage("gen-data", start);
    let start = Instant::now();
    let rae = train_rae_stage(cfg, &dataset, &out.join("rae.ckpt"))?;
    timing.stage("train-rae", start);
    let start = Instant::now();
    let field = train_lfm_stage(cfg, &rae, &dataset, &out.join("lfm.ckpt"))?;
    timing.stage("train-lfm", start);
    let start = Instant::now();
    let report = eval_stage(cfg, &rae, &field, &dataset, out)?;
    timing.stage("eval", start);
    timing.add_eval(&report);
    timing.write(&out.join("timing.csv"))?;
    let manifest = RunManifest {
        format: "trajflow-run-v1",
        seed: cfg.seed,
        config: "config.json",
        data: "data",
        rae: "rae.ckpt",
        lfm: "lfm.ckpt",
        eval: "eval.csv",
        timing: "timing.csv",
    };
    trajflow::checkpoint::write_json(&out.join("manifest.json"), &manifest).stage("pipeline")?;
    Ok(PipelineOutput {
        dataset,
        rae,
        field,
        report,
    })
}

/// Where a sample should land on the trajectory.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SampleTarget {
    Scale(f64),
    Time(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutcome {
    pub t: f64,
    pub nfe: usize,
    pub seconds: f64,
}

pub struct SampleArgs<'a> {
    pub rae: &'a Path,
    pub lfm: &'a Path,
    pub input: &'a Path,
    pub out: &'a Path,
    pub target: SampleTarget,
    pub solver: &'a SolverConfig,
    pub log: &'a Path,
}

/// Encode, integrate to the target time, decode and save; append a log row.
pub fn sample(args: &SampleArgs) -> CliResult<SampleOutcome> {
    let rae = RaeModel::load(args.rae).stage("sample")?;
    let field = VelocityField::load(args.lfm).stage("sample")?;
    let input = Image::load(args.input).stage("sample")?;
    let t = match args.target {
        SampleTarget::Time(t) => t,
        SampleTarget::Scale(s) => {
            let levels = field.levels.as_ref().ok_or_else(|| CliError::Stage {
                stage: "sample",
                source: trajflow::Error::Domain(format!(
                    "{} stores no training scales; pass --t instead of --scale",
                    args.lfm.display()
                )),
            })?;
            normalize_scale(s, levels).stage("sample")?
        }
    };
    let start = Instant::now();
    let enc = rae.encode(&input).stage("sample")?;
    let sol = integrate(&field, &enc.latent, t, args.solver).stage("sample")?;
    let image = rae.decode(&sol.x, &enc.features).stage("sample")?;
    let seconds = start.elapsed().as_secs_f64();
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::output("sample", parent, e))?;
    }
    image.save(args.out).stage("sample")?;
    append_sample_log(args, t, sol.nfe, seconds)?;
    Ok(SampleOutcome {
        t,
        nfe: sol.nfe,
        seconds,
    })
}

fn append_sample_log(args: &SampleArgs, t: f64, nfe: usize, seconds: f64) -> CliResult<()> {
    let path = args.log;
    let err = |e: &dyn std::fmt::Display| CliError::output("sample", path, e);
    let fresh = !path.exists();
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| err(&e))?;
    if fresh {
        writeln!(file, "input,output,t,nfe,seconds").map_err(|e| err(&e))?;
    }
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.write_record([
        args.input.display().to_string(),
        args.out.display().to_string(),
        fixed(t),
        nfe.to_string(),
        fixed(seconds),
    ])
    .map_err(|e| err(&e))?;
    w.flush().map_err(|e| err(&e))
}

/// Default sample log: `samples.csv` next to the output image.
pub fn default_sample_log(out: &Path) -> PathBuf {
    out.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(|p| p.join("samples.csv"))
        .unwrap_or_else(|| PathBuf::from("samples.csv"))
}
