use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use trajflow::lfm::ExtrapolationMode;
use trajflow::rae::RaeModel;
use trajflow::spline::TrajectoryKind;

use crate::commands::{eval_stage, gen_data, mean_nfe, train_lfm_stage, train_rae_stage, Timing};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::eval::fixed;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Perceptual {
    None,
    Linear,
    Taylor3,
}

/// Overrides applied on top of a run config. Unset keys keep the config's value.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Arm {
    pub trajectory: Option<TrajectoryKind>,
    pub perceptual: Option<Perceptual>,
    pub skips: Option<bool>,
}

impl FromStr for Arm {
    type Err = CliError;

    /// `trajectory=spline|linear,perceptual=none|linear|taylor3,skips=on|off`
    fn from_str(s: &str) -> CliResult<Self> {
        let bad = |part: &str| CliError::Config(format!("invalid arm '{s}': cannot use '{part}'"));
        let mut arm = Arm::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part.split_once('=').ok_or_else(|| bad(part))?;
            match (key.trim(), value.trim()) {
                ("trajectory", "spline") => arm.trajectory = Some(TrajectoryKind::NaturalCubic),
                ("trajectory", "linear") => arm.trajectory = Some(TrajectoryKind::PiecewiseLinear),
                ("perceptual", "none") => arm.perceptual = Some(Perceptual::None),
                ("perceptual", "linear") => arm.perceptual = Some(Perceptual::Linear),
                ("perceptual", "taylor3") => arm.perceptual = Some(Perceptual::Taylor3),
                ("skips", "on") => arm.skips = Some(true),
                ("skips", "off") => arm.skips = Some(false),
                _ => return Err(bad(part)),
            }
        }
        Ok(arm)
    }
}

impl Arm {
    pub fn apply(&self, base: &RunConfig) -> CliResult<RunConfig> {
        let mut cfg = base.clone();
        if let Some(t) = self.trajectory {
            cfg.lfm.trajectory = t;
        }
        if let Some(s) = self.skips {
            cfg.rae.model.skips = s;
        }
        match self.perceptual {
            None => {}
            Some(Perceptual::None) => cfg.lfm.lambda = 0.0,
            Some(p) => {
                if cfg.lfm.lambda == 0.0 {
                    return Err(CliError::Config(
                        "key 'lfm.lambda': a perceptual arm needs a positive weight".into(),
                    ));
                }
                cfg.lfm.mode = if p == Perceptual::Linear {
                    ExtrapolationMode::Linear
                } else {
                    ExtrapolationMode::Taylor3
                };
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Canonical arm label of a resolved config.
pub fn label(cfg: &RunConfig) -> String {
    let trajectory = match cfg.lfm.trajectory {
        TrajectoryKind::NaturalCubic => "spline",
        TrajectoryKind::PiecewiseLinear => "linear",
    };
    let perceptual = match (cfg.lfm.lambda > 0.0, cfg.lfm.mode) {
        (false, _) => "none",
        (true, ExtrapolationMode::Linear) => "linear",
        (true, ExtrapolationMode::Taylor3) => "taylor3",
    };
    let skips = if cfg.rae.model.skips { "on" } else { "off" };
    format!("trajectory={trajectory},perceptual={perceptual},skips={skips}")
}

/// Metrics of one arm at one held-out scale.
#[derive(Clone, Debug, PartialEq)]
pub struct ArmResult {
    pub arm: String,
    pub c1_discontinuous: bool,
    pub scale: f64,
    /// Mean PSNR at the scale's own normalized time.
    pub heldout_psnr: f64,
    pub argmax_t: f64,
    pub peak_psnr: f64,
    pub nfe: Vec<(f64, f64)>,
}

/// One pipeline run per arm on a shared dataset. RAEs are trained once per
/// distinct RAE section and reused across arms.
pub fn ablate(base: &RunConfig, arms: &[Arm], out: &Path) -> CliResult<Vec<ArmResult>> {
    if arms.is_empty() {
        return Err(CliError::Config("ablate needs at least one --arm".into()));
    }
    let configs: Vec<RunConfig> = arms.iter().map(|a| a.apply(base)).collect::<CliResult<_>>()?;
    base.echo(out)?;
    let mut timing = Timing::default();
    let start = Instant::now();
    let dataset = gen_data(base, &out.join("data"))?;
    timing.stage("data", start);
    let mut raes: BTreeMap<String, RaeModel> = BTreeMap::new();
    let mut results = Vec::new();
    for (i, cfg) in configs.iter().enumerate() {
        let key = serde_json::to_string(&cfg.rae).expect("config serializes");
        if !raes.contains_key(&key) {
            let name = format!("rae_{}", raes.len());
            let start = Instant::now();
            let rae = train_rae_stage(cfg, &dataset, &out.join(format!("{name}.ckpt")))?;
            timing.stage(&name, start);
            raes.insert(key.clone(), rae);
        }
        let rae = &raes[&key];
        let arm_dir = out.join(format!("arm_{i}"));
        cfg.echo(&arm_dir)?;
        let start = Instant::now();
        let field = train_lfm_stage(cfg, rae, &dataset, &arm_dir.join("lfm.ckpt"))?;
        timing.stage(&format!("arm_{i}_lfm"), start);
        let start = Instant::now();
        let report = eval_stage(cfg, rae, &field, &dataset, &arm_dir)?;
        let nfe = mean_nfe(cfg, rae, &field, &dataset)?;
        timing.stage(&format!("arm_{i}_eval"), start);
        for &s in &report.scales {
            let (Some(peak), Some(held)) = (report.argmax(s), report.matched_mean(s)) else {
                continue;
            };
            results.push(ArmResult {
                arm: label(cfg),
                c1_discontinuous: !cfg.lfm.trajectory.c1_continuous(),
                scale: s,
                heldout_psnr: held.psnr,
                argmax_t: peak.t,
                peak_psnr: peak.psnr,
                nfe: nfe.clone(),
            });
        }
    }
    write_ablation(&results, base, &out.join("ablation.csv"))?;
    timing.write(&out.join("timing.csv"))?;
    Ok(results)
}

fn write_ablation(results: &[ArmResult], cfg: &RunConfig, path: &Path) -> CliResult<()> {
    let err = |e: &dyn std::fmt::Display| CliError::output("ablate", path, e);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| err(&e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| err(&e))?;
    let mut header: Vec<String> = [
        "arm",
        "c1_discontinuous",
        "scale",
        "heldout_psnr",
        "argmax_t",
        "peak_psnr",
    ]
    .map(String::from)
    .to_vec();
    header.extend(cfg.eval.nfe_times.iter().map(|t| format!("nfe_t{t:.4}")));
    w.write_record(&header).map_err(|e| err(&e))?;
    for r in results {
        let mut rec = vec![
            r.arm.clone(),
            r.c1_discontinuous.to_string(),
            r.scale.to_string(),
            fixed(r.heldout_psnr),
            fixed(r.argmax_t),
            fixed(r.peak_psnr),
        ];
        rec.extend(r.nfe.iter().map(|(_, n)| format!("{n:.3}")));
        w.write_record(&rec).map_err(|e| err(&e))?;
    }
    w.flush().map_err(|e| err(&e))
}
