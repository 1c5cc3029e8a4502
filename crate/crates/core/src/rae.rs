//! Residual autoencoder on flattened images.
//!
//! The encoder maps an image to a compact latent through GELU hidden layers.
//! The decoder mirrors it, and before each of its hidden activations adds a
//! linear projection of the matching encoder activation taken from the HR
//! image (deepest encoder feature feeds the first decoder layer). Because
//! the HR detail arrives through the skips, the latent only has to carry
//! what distinguishes a degraded input from its HR source.

use std::borrow::Cow;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, ParamEntry};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::numcore::nn::{clip_grad_norm, cosine_lr, Adam, BoundLinear, Linear};
use crate::numcore::{Graph, NodeId, RngState, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RaeConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Encoder hidden widths; one skip level per entry.
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    /// Inject HR encoder features into the decoder.
    pub skips: bool,
    /// When false, the LR reconstruction term sees detached HR features.
    pub hr_grad_both_terms: bool,
}

impl Default for RaeConfig {
    fn default() -> Self {
        RaeConfig {
            channels: 1,
            height: 16,
            width: 16,
            hidden: vec![256, 128],
            latent_dim: 16,
            skips: true,
            hr_grad_both_terms: true,
        }
    }
}

impl RaeConfig {
    pub fn input_dim(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim() == 0 || self.hidden.contains(&0) {
            return Err(Error::Domain("RAE dimensions must be positive".into()));
        }
        if self.latent_dim == 0 || self.latent_dim >= self.input_dim() {
            return Err(Error::Domain(format!(
                "latent_dim {} must be in 1..{} to compress the input",
                self.latent_dim,
                self.input_dim()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RaeTrainConfig {
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub grad_clip: f64,
    /// Apply a random flip, transpose and intensity inversion to each pair.
    pub augment: bool,
    /// Blend each pair with another scene's pair at the same level.
    pub mixup: bool,
}

impl Default for RaeTrainConfig {
    fn default() -> Self {
        RaeTrainConfig {
            iters: 8000,
            batch: 16,
            lr: 2e-3,
            min_lr: 1e-5,
            grad_clip: 1.0,
            augment: true,
            mixup: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RaeModel {
    config: RaeConfig,
    seed: u64,
    encoder: Vec<Linear>,
    decoder: Vec<Linear>,
    skip: Vec<Linear>,
    frozen: bool,
}

/// Latent code plus the encoder hidden activations (shallow to deep).
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub latent: Tensor,
    pub features: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct BoundRae {
    encoder: Vec<BoundLinear>,
    decoder: Vec<BoundLinear>,
    skip: Vec<BoundLinear>,
}

#[derive(Serialize, Deserialize)]
struct RaeManifest {
    kind: String,
    seed: u64,
    config: RaeConfig,
    layer_widths: Vec<usize>,
    skip_levels: usize,
    latent_dim: usize,
    params: Vec<ParamEntry>,
}

impl RaeModel {
    pub fn new(config: RaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RngState::derive(seed, 0xAE);
        let mut widths = vec![config.input_dim()];
        widths.extend(&config.hidden);
        widths.push(config.latent_dim);
        let encoder = widths
            .windows(2)
            .map(|w| Linear::init(w[0], w[1], true, &mut rng))
            .collect();
        let rev: Vec<usize> = widths.iter().rev().copied().collect();
        let decoder = rev
            .windows(2)
            .map(|w| Linear::init(w[0], w[1], true, &mut rng))
            .collect();
        let skip = if config.skips {
            config
                .hidden
                .iter()
                .map(|&w| Linear::init(w, w, false, &mut rng))
                .collect()
        } else {
            Vec::new()
        };
        Ok(RaeModel {
            config,
            seed,
            encoder,
            decoder,
            skip,
            frozen: false,
        })
    }

    pub fn config(&self) -> &RaeConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Mark the model read-only for downstream stages.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (prefix, layers) in [("enc", &self.encoder), ("dec", &self.decoder), ("skip", &self.skip)] {
            for (i, l) in layers.iter().enumerate() {
                out.push((format!("{prefix}{i}.weight"), &l.weight));
                if let Some(b) = &l.bias {
                    out.push((format!("{prefix}{i}.bias"), b));
                }
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.encoder
            .iter_mut()
            .chain(self.decoder.iter_mut())
            .chain(self.skip.iter_mut())
            .flat_map(|l| l.tensors_mut())
            .collect()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundRae {
        let mut b = |ls: &[Linear]| ls.iter().map(|l| l.bind(g, trainable)).collect::<Vec<_>>();
        BoundRae {
            encoder: b(&self.encoder),
            decoder: b(&self.decoder),
            skip: b(&self.skip),
        }
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        let c = &self.config;
        if image.dims() != (c.channels, c.height, c.width) {
            return Err(Error::shape(
                "rae",
                format!(
                    "image {:?}, model expects {:?}",
                    image.dims(),
                    (c.channels, c.height, c.width)
                ),
            ));
        }
        Ok(())
    }

    /// Stack images into a `[B x C*H*W]` matrix.
    pub fn batch_matrix(&self, images: &[&Image]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(images.len() * self.config.input_dim());
        for img in images {
            self.check_image(img)?;
            data.extend_from_slice(img.pixels());
        }
        Tensor::matrix(images.len(), self.config.input_dim(), data)
    }

    pub fn encode(&self, image: &Image) -> Result<Encoded> {
        Ok(self.encode_batch(&[image])?.remove(0))
    }

    pub fn encode_batch(&self, images: &[&Image]) -> Result<Vec<Encoded>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let x = g.constant(self.batch_matrix(images)?);
        let (z, feats) = bound.encode(&mut g, x)?;
        (0..images.len())
            .map(|i| {
                Ok(Encoded {
                    latent: g.value(z).row(i)?,
                    features: feats
                        .iter()
                        .map(|&f| g.value(f).row(i))
                        .collect::<Result<_>>()?,
                })
            })
            .collect()
    }

    fn check_decode_inputs(&self, z: &Tensor, features: &[Tensor]) -> Result<()> {
        if z.len() != self.config.latent_dim {
            return Err(Error::shape(
                "decode",
                format!("latent has {} values, model uses {}", z.len(), self.config.latent_dim),
            ));
        }
        if self.config.skips {
            let widths: Vec<usize> = features.iter().map(|f| f.len()).collect();
            if widths != self.config.hidden {
                return Err(Error::shape(
                    "decode",
                    format!("HR feature widths {widths:?}, expected {:?}", self.config.hidden),
                ));
            }
        }
        Ok(())
    }

    /// Decoder output before clamping, flattened.
    pub fn decode_raw(&self, z: &Tensor, features: &[Tensor]) -> Result<Tensor> {
        self.check_decode_inputs(z, features)?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let zn = g.constant(z.reshape(&[1, z.len()])?);
        let fs: Vec<NodeId> = if self.config.skips {
            features
                .iter()
                .map(|f| f.reshape(&[1, f.len()]).map(|t| g.constant(t)))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let out = bound.decode(&mut g, zn, &fs)?;
        g.value(out).reshape(&[self.config.input_dim()])
    }

    /// Decode with HR skip features; pixels clipped to `[0, 1]`.
    pub fn decode(&self, z: &Tensor, features: &[Tensor]) -> Result<Image> {
        let raw = self.decode_raw(z, features)?;
        let c = &self.config;
        Image::clamped(raw, c.channels, c.height, c.width)
    }

    /// Reconstruct `input` using skip features from `hr`.
    pub fn reconstruct(&self, input: &Image, hr: &Image) -> Result<Image> {
        let z = self.encode(input)?.latent;
        let feats = self.encode(hr)?.features;
        self.decode(&z, &feats)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let params = checkpoint::write_params(dir, &self.named_tensors())?;
        let mut widths = vec![self.config.input_dim()];
        widths.extend(&self.config.hidden);
        widths.push(self.config.latent_dim);
        let manifest = RaeManifest {
            kind: "rae".into(),
            seed: self.seed,
            config: self.config.clone(),
            layer_widths: widths,
            skip_levels: self.skip.len(),
            latent_dim: self.config.latent_dim,
            params,
        };
        checkpoint::write_json(&dir.join("manifest.json"), &manifest)
    }

    /// Load a checkpoint; loaded models are frozen.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let m: RaeManifest = checkpoint::read_json(&path)?;
        if m.kind != "rae" {
            return Err(Error::Format {
                path,
                reason: format!("expected an rae checkpoint, found '{}'", m.kind),
            });
        }
        let mut model = RaeModel::new(m.config, m.seed)?;
        let expected: Vec<(String, Vec<usize>)> = model
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        let tensors = checkpoint::read_params(dir, &m.params, &expected)?;
        for (dst, src) in model.tensors_mut().into_iter().zip(tensors) {
            *dst = src;
        }
        model.frozen = true;
        Ok(model)
    }
}

impl BoundRae {
    pub fn ids(&self) -> Vec<NodeId> {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .chain(&self.skip)
            .flat_map(|l| l.ids())
            .collect()
    }

    /// `x: [B x in]` to `(z: [B x d_z], hidden activations shallow..deep)`.
    pub fn encode(&self, g: &mut Graph, x: NodeId) -> Result<(NodeId, Vec<NodeId>)> {
        let mut h = x;
        let mut feats = Vec::with_capacity(self.encoder.len() - 1);
        let last = self.encoder.len() - 1;
        for (i, layer) in self.encoder.iter().enumerate() {
            let pre = layer.forward(g, h)?;
            if i == last {
                return Ok((pre, feats));
            }
            h = g.gelu(pre)?;
            feats.push(h);
        }
        unreachable!("encoder has at least one layer")
    }

    /// Raw decoder output `[B x in]`. `features` are ignored without skips.
    pub fn decode(&self, g: &mut Graph, z: NodeId, features: &[NodeId]) -> Result<NodeId> {
        if !self.skip.is_empty() && features.len() != self.skip.len() {
            return Err(Error::shape(
                "decode",
                format!("{} HR features for {} skip levels", features.len(), self.skip.len()),
            ));
        }
        let levels = self.decoder.len() - 1;
        let mut h = z;
        for (i, layer) in self.decoder.iter().enumerate() {
            let mut pre = layer.forward(g, h)?;
            if i == levels {
                return Ok(pre);
            }
            if !self.skip.is_empty() {
                let level = levels - 1 - i;
                let proj = self.skip[level].forward(g, features[level])?;
                pre = g.add(pre, proj)?;
            }
            h = g.gelu(pre)?;
        }
        unreachable!("decoder has at least one layer")
    }
}

/// Two-term reconstruction loss on a batch: HR reconstructed from its own
/// latent, and LR reconstructed from its latent with the HR skip features.
/// Each term is a mean squared error; the result is their sum.
pub fn recon_loss(
    g: &mut Graph,
    model: &RaeModel,
    bound: &BoundRae,
    hr: &[&Image],
    lr: &[&Image],
) -> Result<NodeId> {
    if hr.is_empty() {
        return Err(Error::Empty("recon_loss batch"));
    }
    if hr.len() != lr.len() || hr.iter().zip(lr).any(|(a, b)| a.dims() != b.dims()) {
        return Err(Error::shape("recon_loss", "HR and LR batches are not paired"));
    }
    let x_hr = g.constant(model.batch_matrix(hr)?);
    let x_lr = g.constant(model.batch_matrix(lr)?);
    let (z_hr, feats) = bound.encode(g, x_hr)?;
    let rec_hr = bound.decode(g, z_hr, &feats)?;
    let term_hr = g.mse(rec_hr, x_hr)?;
    let (z_lr, _) = bound.encode(g, x_lr)?;
    let lr_feats: Vec<NodeId> = if model.config.hr_grad_both_terms {
        feats
    } else {
        let values: Vec<Tensor> = feats.iter().map(|&f| g.value(f).clone()).collect();
        values.into_iter().map(|v| g.constant(v)).collect()
    };
    let rec_lr = bound.decode(g, z_lr, &lr_feats)?;
    let term_lr = g.mse(rec_lr, x_lr)?;
    g.add(term_hr, term_lr)
}

/// One training scene: the HR image and its degraded versions at the
/// training scales other than the finest.
#[derive(Clone, Debug)]
pub struct RaeSample {
    pub hr: Image,
    pub lr: Vec<Image>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RaeTrainReport {
    pub losses: Vec<f64>,
    /// Running minimum of an exponential moving average of `losses`.
    pub smoothed: Vec<f64>,
}

/// Adam with cosine decay on the two-term loss. Each step draws `batch`
/// scenes with replacement and, per scene, one LR level uniformly.
pub fn train_rae(
    model: &mut RaeModel,
    data: &[RaeSample],
    cfg: &RaeTrainConfig,
    seed: u64,
) -> Result<RaeTrainReport> {
    if data.is_empty() {
        return Err(Error::Empty("RAE training set"));
    }
    if data.iter().any(|s| s.lr.is_empty()) {
        return Err(Error::Domain("every RAE sample needs at least one LR image".into()));
    }
    if model.frozen {
        return Err(Error::Contract("cannot train a frozen RAE".into()));
    }
    if cfg.batch == 0 {
        return Err(Error::Domain("RAE batch must be positive".into()));
    }
    let mut rng = RngState::derive(seed, 0x7EA1);
    let mut opt = Adam::new(model.named_tensors().iter().map(|(_, t)| t.len()));
    let mut losses = Vec::with_capacity(cfg.iters);
    for it in 0..cfg.iters {
        let mut hr = Vec::with_capacity(cfg.batch);
        let mut lr = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let s = &data[rng.below(data.len())];
            let level = rng.below(s.lr.len());
            let low = &s.lr[level];
            if cfg.augment {
                let code = rng.below(16);
                let other = &data[rng.below(data.len())];
                let alpha = if cfg.mixup { rng.uniform() } else { 1.0 };
                let mix = |a: &Image, b: &Image| -> Result<Image> {
                    let t = a.tensor().scale(alpha)?.axpy(1.0 - alpha, b.tensor())?;
                    symmetry(&Image::from_tensor(t.map("mix", |v| v.clamp(0.0, 1.0))?)?, code)
                };
                let other_low = &other.lr[level.min(other.lr.len() - 1)];
                hr.push(Cow::Owned(mix(&s.hr, &other.hr)?));
                lr.push(Cow::Owned(mix(low, other_low)?));
            } else {
                hr.push(Cow::Borrowed(&s.hr));
                lr.push(Cow::Borrowed(low));
            }
        }
        let hr: Vec<&Image> = hr.iter().map(|c| c.as_ref()).collect();
        let lr: Vec<&Image> = lr.iter().map(|c| c.as_ref()).collect();
        let mut g = Graph::new();
        let bound = model.bind(&mut g, true);
        let loss = recon_loss(&mut g, model, &bound, &hr, &lr)?;
        losses.push(g.value(loss).item()?);
        g.backward(loss)?;
        let mut grads: Vec<Tensor> = bound.ids().into_iter().map(|id| g.grad(id)).collect();
        clip_grad_norm(&mut grads, cfg.grad_clip);
        let step_lr = cosine_lr(cfg.lr, cfg.min_lr, it, cfg.iters);
        opt.step(model.tensors_mut(), &grads, step_lr)?;
    }
    Ok(RaeTrainReport {
        smoothed: smooth(&losses),
        losses,
    })
}

/// One of 16 pixel symmetries: bit 0 transposes (square images only), bit 1
/// flips columns, bit 2 flips rows, bit 3 maps `v` to `1 - v`. Each commutes
/// with a normalized symmetric blur, so degraded pairs stay consistent.
pub fn symmetry(image: &Image, code: usize) -> Result<Image> {
    let (c, h, w) = image.dims();
    let transpose = code & 1 != 0 && h == w;
    let mut data = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let (mut sy, mut sx) = if transpose { (x, y) } else { (y, x) };
                if code & 2 != 0 {
                    sx = w - 1 - sx;
                }
                if code & 4 != 0 {
                    sy = h - 1 - sy;
                }
                let v = image.at(ch, sy, sx);
                data.push(if code & 8 != 0 { 1.0 - v } else { v });
            }
        }
    }
    Image::new(c, h, w, data)
}

pub(crate) fn smooth(xs: &[f64]) -> Vec<f64> {
    let mut ema = None;
    let mut best = f64::INFINITY;
    xs.iter()
        .map(|&x| {
            let e = match ema {
                None => x,
                Some(prev) => 0.95 * prev + 0.05 * x,
            };
            ema = Some(e);
            best = best.min(e);
            best
        })
        .collect()
}
