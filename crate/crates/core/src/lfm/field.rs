use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, ParamEntry};
use crate::error::{Error, Result};
use crate::numcore::graph::gelu_scalar;
use crate::numcore::nn::{BoundLinear, Linear};
use crate::numcore::{Graph, NodeId, RngState, Tensor};
use crate::sampler::VectorField;
use crate::spline::{DegradationLevelSet, TrajectoryKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldConfig {
    pub latent_dim: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    /// Number of sinusoid frequencies in the time embedding.
    pub n_freqs: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            latent_dim: 16,
            hidden_width: 128,
            hidden_layers: 3,
            n_freqs: 8,
        }
    }
}

/// `[sin(pi (j+1) t), cos(pi (j+1) t)]` for `j < n_freqs`.
///
/// The `j = 0` cosine is strictly decreasing on `[0, 1]`, so distinct times
/// always embed to distinct vectors.
pub fn embed_time(t: f64, n_freqs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * n_freqs);
    for j in 0..n_freqs {
        let w = PI * (j + 1) as f64;
        out.push((w * t).sin());
        out.push((w * t).cos());
    }
    out
}

/// MLP velocity field `v(x, t)` on `concat(x, embed(t))`.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityField {
    config: FieldConfig,
    seed: u64,
    layers: Vec<Linear>,
    /// Training scales, kept so a checkpoint can map scale to time.
    pub levels: Option<DegradationLevelSet>,
    pub trajectory: TrajectoryKind,
}

#[derive(Clone, Debug)]
pub struct BoundField {
    layers: Vec<BoundLinear>,
    n_freqs: usize,
}

/// Anything that can produce a velocity node for a batch inside a graph.
pub trait GraphField {
    fn forward(&self, g: &mut Graph, x: NodeId, ts: &[f64]) -> Result<NodeId>;
}

#[derive(Serialize, Deserialize)]
struct FieldManifest {
    kind: String,
    seed: u64,
    config: FieldConfig,
    levels: Option<Vec<f64>>,
    trajectory: TrajectoryKind,
    params: Vec<ParamEntry>,
}

impl VelocityField {
    pub fn new(config: FieldConfig, seed: u64) -> Result<Self> {
        if config.latent_dim == 0 || config.hidden_width == 0 || config.n_freqs == 0 {
            return Err(Error::Domain("velocity field dimensions must be positive".into()));
        }
        let mut rng = RngState::derive(seed, 0xF1E1D);
        let mut widths = vec![config.latent_dim + 2 * config.n_freqs];
        widths.extend(std::iter::repeat_n(config.hidden_width, config.hidden_layers));
        widths.push(config.latent_dim);
        let layers = widths
            .windows(2)
            .map(|w| Linear::init(w[0], w[1], true, &mut rng))
            .collect();
        Ok(VelocityField {
            config,
            seed,
            layers,
            levels: None,
            trajectory: TrajectoryKind::NaturalCubic,
        })
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.weight"), &l.weight));
            if let Some(b) = &l.bias {
                out.push((format!("layer{i}.bias"), b));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundField {
        BoundField {
            layers: self.layers.iter().map(|l| l.bind(g, trainable)).collect(),
            n_freqs: self.config.n_freqs,
        }
    }

    fn input_matrix(&self, x: &Tensor, ts: &[f64]) -> Result<Tensor> {
        let d = self.config.latent_dim;
        let (rows, cols) = x.dims2("velocity")?;
        if cols != d || rows != ts.len() {
            return Err(Error::shape(
                "velocity",
                format!("x {:?} with {} times, latent_dim {d}", x.shape(), ts.len()),
            ));
        }
        let mut data = Vec::with_capacity(rows * (d + 2 * self.config.n_freqs));
        for (i, &t) in ts.iter().enumerate() {
            data.extend_from_slice(&x.data()[i * d..(i + 1) * d]);
            data.extend(embed_time(t, self.config.n_freqs));
        }
        Tensor::matrix(rows, d + 2 * self.config.n_freqs, data)
    }

    /// Graph-free forward pass on a `[B x d]` batch.
    pub fn velocity_batch(&self, x: &Tensor, ts: &[f64]) -> Result<Tensor> {
        let mut h = self.input_matrix(x, ts)?;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut y = h.matmul(&l.weight)?;
            if let Some(b) = &l.bias {
                let w = b.len();
                for (j, v) in y.data_mut().iter_mut().enumerate() {
                    *v += b.data()[j % w];
                }
            }
            h = if i == last { y } else { y.map("gelu", gelu_scalar)? };
        }
        h.check_finite("velocity")?;
        Ok(h)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let params = checkpoint::write_params(dir, &self.named_tensors())?;
        let manifest = FieldManifest {
            kind: "lfm".into(),
            seed: self.seed,
            config: self.config.clone(),
            levels: self.levels.as_ref().map(|l| l.scales().to_vec()),
            trajectory: self.trajectory,
            params,
        };
        checkpoint::write_json(&dir.join("manifest.json"), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let m: FieldManifest = checkpoint::read_json(&path)?;
        if m.kind != "lfm" {
            return Err(Error::Format {
                path,
                reason: format!("expected an lfm checkpoint, found '{}'", m.kind),
            });
        }
        let mut field = VelocityField::new(m.config, m.seed)?;
        let expected: Vec<(String, Vec<usize>)> = field
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        let tensors = checkpoint::read_params(dir, &m.params, &expected)?;
        for (dst, src) in field.tensors_mut().into_iter().zip(tensors) {
            *dst = src;
        }
        field.levels = m.levels.map(DegradationLevelSet::new).transpose()?;
        field.trajectory = m.trajectory;
        Ok(field)
    }
}

impl BoundField {
    pub fn ids(&self) -> Vec<NodeId> {
        self.layers.iter().flat_map(|l| l.ids()).collect()
    }
}

impl GraphField for BoundField {
    fn forward(&self, g: &mut Graph, x: NodeId, ts: &[f64]) -> Result<NodeId> {
        let (rows, _) = g.value(x).dims2("velocity")?;
        if rows != ts.len() {
            return Err(Error::shape(
                "velocity",
                format!("{rows} rows for {} times", ts.len()),
            ));
        }
        let emb: Vec<f64> = ts.iter().flat_map(|&t| embed_time(t, self.n_freqs)).collect();
        let e = g.constant(Tensor::matrix(rows, 2 * self.n_freqs, emb)?);
        let mut h = g.concat_cols(x, e)?;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, h)?;
            if i != last {
                h = g.gelu(h)?;
            }
        }
        Ok(h)
    }
}

impl VectorField for VelocityField {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        let row = x.reshape(&[1, x.len()])?;
        self.velocity_batch(&row, &[t])?.reshape(x.shape())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_is_injective_on_grid() {
        let embs: Vec<Vec<f64>> = (0..=1000).map(|i| embed_time(i as f64 * 1e-3, 8)).collect();
        for w in embs.windows(2) {
            let d: f64 = w[0].iter().zip(&w[1]).map(|(a, b)| (a - b).abs()).sum();
            assert!(d > 0.0);
        }
        // the lowest-frequency cosine alone separates every pair
        let cos0: Vec<f64> = embs.iter().map(|e| e[1]).collect();
        assert!(cos0.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn graph_and_plain_paths_agree() {
        let f = VelocityField::new(
            FieldConfig {
                latent_dim: 3,
                hidden_width: 8,
                hidden_layers: 2,
                n_freqs: 2,
            },
            4,
        )
        .unwrap();
        let x = Tensor::matrix(2, 3, vec![0.1, -0.2, 0.3, 1.0, 0.5, -0.7]).unwrap();
        let ts = [0.25, 0.9];
        let plain = f.velocity_batch(&x, &ts).unwrap();
        let mut g = Graph::new();
        let b = f.bind(&mut g, false);
        let xn = g.constant(x.clone());
        let out = b.forward(&mut g, xn, &ts).unwrap();
        assert!(g.value(out).max_abs_diff(&plain).unwrap() < 1e-14);
        assert_eq!(plain.shape(), &[2, 3]);
        let single = f.velocity(&x.row(1).unwrap(), 0.9).unwrap();
        assert_eq!(single.data(), &plain.data()[3..]);
        assert!(f.velocity_batch(&x, &[0.1]).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut f = VelocityField::new(FieldConfig::default(), 9).unwrap();
        f.levels = Some(DegradationLevelSet::new(vec![1.0, 2.0, 4.0]).unwrap());
        f.save(dir.path()).unwrap();
        assert_eq!(VelocityField::load(dir.path()).unwrap(), f);
    }
}
