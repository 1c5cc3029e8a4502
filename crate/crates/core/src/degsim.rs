//! Synthetic multi-scale data: procedural scenes and scale-parameterized
//! Gaussian blur.
//!
//! A degradation level `s` blurs with `sigma = kappa * (s - s_1)`, so the
//! finest level is the identity and blur grows strictly with `s`. Output
//! resolution always equals input resolution.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::numcore::RngState;
use crate::par::Exec;
use crate::spline::DegradationLevelSet;

/// Returned by [`psnr`] for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    Checker,
    Gradient,
    BlobMixture,
}

impl SceneKind {
    pub const ALL: [SceneKind; 3] = [SceneKind::Checker, SceneKind::Gradient, SceneKind::BlobMixture];

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "checker" => Ok(SceneKind::Checker),
            "gradient" => Ok(SceneKind::Gradient),
            "blob_mixture" | "blob-mixture" => Ok(SceneKind::BlobMixture),
            other => Err(Error::Domain(format!("unknown scene type '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub kind: SceneKind,
    pub image: Image,
}

pub const SCENE_SIZE: usize = 16;

/// Render a deterministic 16x16 grayscale scene.
pub fn render_scene(seed: u64, kind: SceneKind) -> Scene {
    render_scene_sized(seed, kind, SCENE_SIZE)
}

pub fn render_scene_sized(seed: u64, kind: SceneKind, size: usize) -> Scene {
    let mut rng = RngState::new(seed);
    let n = size as f64;
    let mut px = vec![0.0; size * size];
    match kind {
        SceneKind::Checker => {
            let cell = 2 + rng.below(4);
            let (ox, oy) = (rng.below(cell), rng.below(cell));
            let lo = rng.uniform_in(0.05, 0.45);
            let hi = rng.uniform_in(0.55, 0.95);
            for y in 0..size {
                for x in 0..size {
                    let parity = ((x + ox) / cell + (y + oy) / cell) % 2;
                    px[y * size + x] = if parity == 0 { lo } else { hi };
                }
            }
        }
        SceneKind::Gradient => {
            let theta = rng.uniform_in(0.0, std::f64::consts::TAU);
            let lo = rng.uniform_in(0.05, 0.4);
            let hi = rng.uniform_in(0.6, 0.95);
            let (c, s) = (theta.cos(), theta.sin());
            let proj = |x: f64, y: f64| c * (x / (n - 1.0) - 0.5) + s * (y / (n - 1.0) - 0.5);
            let corners = [proj(0.0, 0.0), proj(n - 1.0, 0.0), proj(0.0, n - 1.0), proj(n - 1.0, n - 1.0)];
            let pmin = corners.iter().cloned().fold(f64::INFINITY, f64::min);
            let pmax = corners.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for y in 0..size {
                for x in 0..size {
                    let u = (proj(x as f64, y as f64) - pmin) / (pmax - pmin);
                    px[y * size + x] = lo + (hi - lo) * u;
                }
            }
        }
        SceneKind::BlobMixture => {
            let base = rng.uniform_in(0.35, 0.6);
            px.fill(base);
            let blobs = 3 + rng.below(3);
            for _ in 0..blobs {
                let cx = rng.uniform_in(0.0, n - 1.0);
                let cy = rng.uniform_in(0.0, n - 1.0);
                let width = rng.uniform_in(1.0, 3.5);
                let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
                let amp = sign * rng.uniform_in(0.2, 0.45);
                for y in 0..size {
                    for x in 0..size {
                        let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                        px[y * size + x] += amp * (-d2 / (2.0 * width * width)).exp();
                    }
                }
            }
            px.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        }
    }
    Scene {
        seed,
        kind,
        image: Image::new(1, size, size, px).expect("pixels lie in [0, 1]"),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationOp {
    /// Blur growth per unit of scale.
    pub kappa: f64,
    /// Scale that maps to the identity.
    pub base_scale: f64,
}

impl Default for DegradationOp {
    fn default() -> Self {
        DegradationOp {
            kappa: 0.6,
            base_scale: 1.0,
        }
    }
}

impl DegradationOp {
    pub fn sigma(&self, s: f64) -> Result<f64> {
        if !(s >= self.base_scale) || !s.is_finite() {
            return Err(Error::Domain(format!(
                "scale {s} is below the finest level {}",
                self.base_scale
            )));
        }
        Ok(self.kappa * (s - self.base_scale))
    }
}

/// Normalized 1-D Gaussian taps for `sigma`, radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|v| v / total).collect()
}

/// Mirror an out-of-range index about the edge samples (`d c b | a b c d | c b a`).
pub fn reflect_index(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as i64 {
        j = period - j;
    }
    j as usize
}

fn blur_axis(src: &[f64], h: usize, w: usize, taps: &[f64], horizontal: bool) -> Vec<f64> {
    let r = (taps.len() / 2) as i64;
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &g) in taps.iter().enumerate() {
                let off = k as i64 - r;
                let v = if horizontal {
                    src[y * w + reflect_index(x as i64 + off, w)]
                } else {
                    src[reflect_index(y as i64 + off, h) * w + x]
                };
                acc += g * v;
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Blur `image` to degradation level `s`. The finest level returns the
/// input unchanged.
pub fn degrade(image: &Image, s: f64, op: &DegradationOp) -> Result<Image> {
    let sigma = op.sigma(s)?;
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let taps = gaussian_kernel(sigma);
    let (c, h, w) = image.dims();
    let mut data = Vec::with_capacity(image.pixels().len());
    for ch in 0..c {
        let plane = &image.pixels()[ch * h * w..(ch + 1) * h * w];
        let tmp = blur_axis(plane, h, w, &taps, true);
        data.extend(blur_axis(&tmp, h, w, &taps, false).into_iter().map(|v| v.clamp(0.0, 1.0)));
    }
    Image::new(c, h, w, data)
}

/// Peak signal-to-noise ratio for peak value 1, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::shape(
            "psnr",
            format!("{:?} vs {:?}", a.dims(), b.dims()),
        ));
    }
    let n = a.pixels().len() as f64;
    let mse = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_train_scenes: usize,
    pub n_eval_scenes: usize,
    pub train_scales: Vec<f64>,
    pub holdout_scales: Vec<f64>,
    pub kappa: f64,
    pub size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_train_scenes: 64,
            n_eval_scenes: 16,
            train_scales: vec![1.0, 2.0, 4.0],
            holdout_scales: vec![3.0],
            kappa: 0.6,
            size: SCENE_SIZE,
        }
    }
}

impl DataConfig {
    pub fn levels(&self) -> Result<DegradationLevelSet> {
        DegradationLevelSet::new(self.train_scales.clone())
    }

    pub fn op(&self) -> DegradationOp {
        DegradationOp {
            kappa: self.kappa,
            base_scale: self.train_scales.first().copied().unwrap_or(1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let levels = self.levels()?;
        for &h in &self.holdout_scales {
            if self.train_scales.contains(&h) {
                return Err(Error::Domain(format!(
                    "holdout scale {h} is also a training scale"
                )));
            }
            if !(levels.first()..=levels.last()).contains(&h) {
                return Err(Error::Domain(format!(
                    "holdout scale {h} outside [{}, {}]",
                    levels.first(),
                    levels.last()
                )));
            }
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(Error::Domain(format!("kappa must be positive, got {}", self.kappa)));
        }
        if self.size < 2 {
            return Err(Error::Domain("scene size must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub scale: f64,
    pub file: String,
    pub eval_only: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub id: usize,
    pub seed: u64,
    pub kind: SceneKind,
    pub split: Split,
    pub images: Vec<ImageEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub seed: u64,
    pub size: usize,
    pub kappa: f64,
    pub train_scales: Vec<f64>,
    pub holdout_scales: Vec<f64>,
    pub scenes: Vec<SceneEntry>,
}

pub const MANIFEST_FORMAT: &str = "trajflow-dataset-v1";

/// One scene with its image at every train and holdout scale, sorted by scale.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneImages {
    pub entry: SceneEntry,
    pub images: Vec<Image>,
}

impl SceneImages {
    pub fn image_at(&self, scale: f64) -> Option<&Image> {
        self.entry
            .images
            .iter()
            .position(|e| e.scale == scale)
            .map(|i| &self.images[i])
    }

    pub fn hr(&self) -> &Image {
        &self.images[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub scenes: Vec<SceneImages>,
}

fn scale_label(s: f64) -> String {
    format!("{s}")
}

/// Render every scene at every train and holdout scale.
pub fn generate(cfg: &DataConfig, seed: u64, exec: Exec) -> Result<Dataset> {
    cfg.validate()?;
    let op = cfg.op();
    let mut scales: Vec<(f64, bool)> = cfg
        .train_scales
        .iter()
        .map(|&s| (s, false))
        .chain(cfg.holdout_scales.iter().map(|&s| (s, true)))
        .collect();
    scales.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = cfg.n_train_scenes + cfg.n_eval_scenes;
    let scenes = exec
        .map_range(n, |id| -> Result<SceneImages> {
            let scene_seed = RngState::derive(seed, id as u64).next_u64();
            let kind = SceneKind::ALL[id % SceneKind::ALL.len()];
            let scene = render_scene_sized(scene_seed, kind, cfg.size);
            let dir = format!("scene_{id:04}");
            let mut images = Vec::with_capacity(scales.len());
            let mut entries = Vec::with_capacity(scales.len());
            for &(s, eval_only) in &scales {
                images.push(degrade(&scene.image, s, &op)?);
                entries.push(ImageEntry {
                    scale: s,
                    file: format!("{dir}/s_{}.dgft", scale_label(s)),
                    eval_only,
                });
            }
            Ok(SceneImages {
                entry: SceneEntry {
                    id,
                    seed: scene_seed,
                    kind,
                    split: if id < cfg.n_train_scenes {
                        Split::Train
                    } else {
                        Split::Eval
                    },
                    images: entries,
                },
                images,
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        manifest: Manifest {
            format: MANIFEST_FORMAT.to_string(),
            seed,
            size: cfg.size,
            kappa: cfg.kappa,
            train_scales: cfg.train_scales.clone(),
            holdout_scales: cfg.holdout_scales.clone(),
            scenes: scenes.iter().map(|s| s.entry.clone()).collect(),
        },
        scenes,
    })
}

/// Generate and write `<root>/scene_<id>/s_<scale>.dgft` plus `<root>/manifest.json`.
pub fn build_dataset(cfg: &DataConfig, seed: u64, root: &Path, exec: Exec) -> Result<Dataset> {
    let ds = generate(cfg, seed, exec)?;
    ds.write(root)?;
    Ok(ds)
}

impl Dataset {
    pub fn write(&self, root: &Path) -> Result<()> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        for scene in &self.scenes {
            for (entry, img) in scene.entry.images.iter().zip(&scene.images) {
                let path = root.join(&entry.file);
                if let Some(parent) = path.parent() {
                    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                }
                img.save(&path)?;
            }
        }
        let path = root.join("manifest.json");
        let text =
            serde_json::to_string_pretty(&self.manifest).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(Error::Format {
                path,
                reason: format!("unknown dataset format '{}'", manifest.format),
            });
        }
        let scenes = manifest
            .scenes
            .iter()
            .map(|entry| {
                let images = entry
                    .images
                    .iter()
                    .map(|e| Image::load(root.join(&e.file)))
                    .collect::<Result<Vec<_>>>()?;
                Ok(SceneImages {
                    entry: entry.clone(),
                    images,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { manifest, scenes })
    }

    pub fn levels(&self) -> Result<DegradationLevelSet> {
        DegradationLevelSet::new(self.manifest.train_scales.clone())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SceneImages> {
        self.scenes.iter().filter(move |s| s.entry.split == split)
    }

    /// Images at the training scales only, in scale order.
    pub fn train_images<'a>(&'a self, scene: &'a SceneImages) -> Vec<&'a Image> {
        self.manifest
            .train_scales
            .iter()
            .filter_map(|&s| scene.image_at(s))
            .collect()
    }
}

pub fn manifest_path(root: &Path) -> PathBuf {
    root.join("manifest.json")
}
