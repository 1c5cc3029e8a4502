use serde::{Deserialize, Serialize};

use super::field::{FieldConfig, GraphField, VelocityField};
use super::loss::{
    perceptual_loss_with, residual_loss, taylor_extrapolate_graph, total_loss, ExtrapolationMode,
    GradientOperator, PerceptualSurrogate, ProjectionTarget, TrainBatch,
};
use crate::degsim::{Dataset, Split};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::numcore::nn::{clip_grad_norm, cosine_lr, Adam};
use crate::numcore::{Graph, RngState, Tensor};
use crate::par::Exec;
use crate::rae::{symmetry, RaeModel};
use crate::spline::{LatentTrajectory, SplineCoefficients, TrajectoryKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LfmConfig {
    pub iters: usize,
    pub lr: f64,
    pub min_lr: f64,
    /// Weight of the perceptual term; 0 disables it.
    pub lambda: f64,
    pub mode: ExtrapolationMode,
    pub projection: ProjectionTarget,
    pub trajectory: TrajectoryKind,
    pub surrogate: PerceptualSurrogate,
    /// Flow-matching draws per scene per step.
    pub draws_per_scene: usize,
    /// Perceptual times are drawn from `[0, 1 - delta]`.
    pub delta: f64,
    pub grad_clip: f64,
    /// Scenes per step; 0 visits every scene.
    pub scene_batch: usize,
    /// Also train on the 15 pixel symmetries of every scene.
    pub augment: bool,
    pub field: FieldConfig,
}

impl Default for LfmConfig {
    fn default() -> Self {
        LfmConfig {
            iters: 4000,
            lr: 1e-3,
            min_lr: 1e-5,
            lambda: 0.1,
            mode: ExtrapolationMode::Taylor3,
            projection: ProjectionTarget::Next,
            trajectory: TrajectoryKind::NaturalCubic,
            surrogate: PerceptualSurrogate::default(),
            draws_per_scene: 1,
            delta: 1e-3,
            grad_clip: 1.0,
            scene_batch: 64,
            augment: true,
            field: FieldConfig::default(),
        }
    }
}

impl LfmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.min_lr >= 0.0) {
            return Err(Error::Domain("learning rates must be non-negative".into()));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Domain(format!("lambda {} must be >= 0", self.lambda)));
        }
        if self.draws_per_scene == 0 {
            return Err(Error::Domain("draws_per_scene must be positive".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Domain(format!("delta {} must lie in (0, 1)", self.delta)));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Domain("grad_clip must be positive".into()));
        }
        Ok(())
    }
}

/// One scene's latent trajectory plus what the perceptual term needs.
#[derive(Clone, Debug, PartialEq)]
pub struct LfmScene {
    pub coeffs: SplineCoefficients,
    /// HR encoder activations, one vector per skip level.
    pub hr_features: Vec<Tensor>,
    /// Ground-truth image at every knot.
    pub knot_images: Vec<Image>,
}

impl LfmScene {
    /// Scene without images, for training on latents alone.
    pub fn latent_only(coeffs: SplineCoefficients) -> Self {
        LfmScene {
            coeffs,
            hr_features: Vec::new(),
            knot_images: Vec::new(),
        }
    }
}

/// Encode every scene of `split` at the training scales and fit its
/// trajectory. With `augment`, each scene is followed by its 15 images under
/// [`symmetry`].
pub fn encode_scenes(
    rae: &RaeModel,
    dataset: &Dataset,
    split: Split,
    kind: TrajectoryKind,
    augment: bool,
    exec: Exec,
) -> Result<Vec<LfmScene>> {
    let levels = dataset.levels()?;
    let codes = if augment { 16 } else { 1 };
    let jobs: Vec<_> = dataset
        .split(split)
        .flat_map(|scene| (0..codes).map(move |code| (scene, code)))
        .collect();
    exec.map(&jobs, |&(scene, code)| {
        let images = dataset.train_images(scene);
        if images.len() != levels.len() {
            return Err(Error::Domain(format!(
                "scene {} is missing training scales",
                scene.entry.id
            )));
        }
        let images: Vec<Image> = images
            .into_iter()
            .map(|im| symmetry(im, code))
            .collect::<Result<_>>()?;
        let refs: Vec<&Image> = images.iter().collect();
        let encoded = rae.encode_batch(&refs)?;
        let hr_features = encoded[0].features.clone();
        let knots = encoded.into_iter().map(|e| e.latent).collect();
        let traj = LatentTrajectory::from_levels(&levels, knots)?;
        Ok(LfmScene {
            coeffs: traj.coefficients(kind)?,
            hr_features,
            knot_images: images,
        })
    })
    .into_iter()
    .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iter: usize,
    pub cfm: f64,
    pub perceptual: f64,
    pub total: f64,
}

/// Adam with cosine decay on `cfm + lambda * perceptual`.
///
/// Every step visits every scene: `draws_per_scene` uniform times for the
/// flow-matching term and, when the perceptual term is on, one more time in
/// `[0, 1 - delta]` whose extrapolation is decoded and compared with the
/// projected knot's image.
pub fn train_lfm(
    field: &mut VelocityField,
    rae: Option<&RaeModel>,
    scenes: &[LfmScene],
    cfg: &LfmConfig,
    seed: u64,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Empty("LFM training set"));
    }
    if let Some(r) = rae {
        if !r.is_frozen() {
            return Err(Error::Contract("LFM training requires a frozen RAE".into()));
        }
    }
    let d = field.latent_dim();
    if scenes.iter().any(|s| s.coeffs.knot_shape().iter().product::<usize>() != d) {
        return Err(Error::shape("train_lfm", format!("scene latents must have width {d}")));
    }
    let perceptual = match (cfg.lambda > 0.0, rae) {
        (false, _) => None,
        (true, None) => {
            return Err(Error::Contract(
                "a positive lambda needs a frozen RAE for the perceptual term".into(),
            ))
        }
        (true, Some(r)) => {
            if scenes.iter().any(|s| s.knot_images.len() != s.coeffs.times().len()) {
                return Err(Error::Domain(
                    "perceptual term needs an image at every knot".into(),
                ));
            }
            let c = r.config();
            Some((r, GradientOperator::new(c.channels, c.height, c.width)))
        }
    };

    let mut rng = RngState::derive(seed, 0x1F3);
    let mut opt = Adam::new(field.named_tensors().iter().map(|(_, t)| t.len()));
    let mut records = Vec::with_capacity(cfg.iters);
    let everyone: Vec<&LfmScene> = scenes.iter().collect();
    for iter in 0..cfg.iters {
        let batch_scenes: Vec<&LfmScene> = if cfg.scene_batch == 0 || cfg.scene_batch >= scenes.len() {
            everyone.clone()
        } else {
            (0..cfg.scene_batch).map(|_| &scenes[rng.below(scenes.len())]).collect()
        };
        let scenes = &batch_scenes[..];
        let coeffs: Vec<&SplineCoefficients> = scenes.iter().map(|s| &s.coeffs).collect();
        let owners: Vec<&SplineCoefficients> = coeffs
            .iter()
            .flat_map(|c| std::iter::repeat_n(*c, cfg.draws_per_scene))
            .collect();
        let ts: Vec<f64> = (0..owners.len()).map(|_| rng.uniform()).collect();
        let batch = TrainBatch::at(&owners, &ts)?;
        let mut g = Graph::new();
        let bound = field.bind(&mut g, true);
        let x = g.constant(batch.x.clone());
        let v = bound.forward(&mut g, x, &batch.t)?;
        let cfm = residual_loss(&mut g, v, &batch.target)?;

        let (loss, perc_value) = match &perceptual {
            None => (cfm, 0.0),
            Some((rae, grad_op)) => {
                let tp: Vec<f64> = (0..scenes.len())
                    .map(|_| rng.uniform_in(0.0, 1.0 - cfg.delta))
                    .collect();
                let at = TrainBatch::at(&coeffs, &tp)?;
                let xp = g.constant(at.x);
                let vp = bound.forward(&mut g, xp, &tp)?;
                let (z_hat, proj) =
                    taylor_extrapolate_graph(&mut g, &coeffs, &tp, vp, cfg.mode, cfg.projection)?;
                let targets: Vec<&Image> = scenes
                    .iter()
                    .zip(&proj)
                    .map(|(s, p)| &s.knot_images[p.target])
                    .collect();
                let feats = stack_features(scenes)?;
                let perc =
                    perceptual_loss_with(&mut g, rae, z_hat, &feats, &targets, &cfg.surrogate, grad_op)?;
                let value = g.value(perc).item()?;
                (total_loss(&mut g, cfm, perc, cfg.lambda)?, value)
            }
        };
        let cfm_value = g.value(cfm).item()?;
        let total = g.value(loss).item()?;
        g.backward(loss)?;
        let mut grads: Vec<Tensor> = bound.ids().into_iter().map(|id| g.grad(id)).collect();
        clip_grad_norm(&mut grads, cfg.grad_clip);
        opt.step(
            field.tensors_mut(),
            &grads,
            cosine_lr(cfg.lr, cfg.min_lr, iter, cfg.iters),
        )?;
        records.push(LossRecord {
            iter,
            cfm: cfm_value,
            perceptual: perc_value,
            total,
        });
    }
    field.trajectory = cfg.trajectory;
    Ok(records)
}

/// `[B x width]` HR feature batch per skip level.
fn stack_features(scenes: &[&LfmScene]) -> Result<Vec<Tensor>> {
    let levels = scenes[0].hr_features.len();
    (0..levels)
        .map(|l| {
            let rows: Vec<Tensor> = scenes
                .iter()
                .map(|s| {
                    s.hr_features
                        .get(l)
                        .cloned()
                        .ok_or_else(|| Error::shape("train_lfm", "scenes differ in skip levels"))
                })
                .collect::<Result<_>>()?;
            Tensor::stack(&rows)
        })
        .collect()
}
