use std::f64::consts::TAU;

use crate::error::Result;
use crate::numcore::{RngState, Tensor};
use crate::spline::{DegradationLevelSet, LatentTrajectory, TrajectoryKind};

use super::train::LfmScene;

/// Training scales of the toy set; they map to knots at `t = 0, 1/3, 1`.
pub const TOY_SCALES: [f64; 3] = [1.0, 2.0, 4.0];

/// Knot `k` is `scale_k * R(angle_k) x0 + shift_k`.
const TOY_MAPS: [(f64, f64, [f64; 2]); 3] = [
    (1.0, 0.0, [0.0, 0.0]),
    (1.3, 0.5, [0.3, -0.2]),
    (0.8, 1.1, [-0.2, 0.4]),
];

/// 2-D trajectories whose start points lie in an annulus and whose later
/// knots are images of the start under fixed similarity maps. The spline
/// through the maps stays invertible, so no two trajectories meet.
pub fn toy_trajectories(n: usize, seed: u64) -> Result<Vec<LatentTrajectory>> {
    let levels = DegradationLevelSet::new(TOY_SCALES.to_vec())?;
    let mut rng = RngState::derive(seed, 0x70E);
    (0..n)
        .map(|_| {
            let r = rng.uniform_in(0.5, 1.5);
            let a = rng.uniform_in(0.0, TAU);
            let (x, y) = (r * a.cos(), r * a.sin());
            let knots = TOY_MAPS
                .iter()
                .map(|&(s, th, [bx, by])| {
                    let (c, sn) = (th.cos(), th.sin());
                    Tensor::vector(vec![s * (c * x - sn * y) + bx, s * (sn * x + c * y) + by])
                })
                .collect::<Result<Vec<_>>>()?;
            LatentTrajectory::from_levels(&levels, knots)
        })
        .collect()
}

pub fn toy_scenes(n: usize, seed: u64, kind: TrajectoryKind) -> Result<Vec<LfmScene>> {
    toy_trajectories(n, seed)?
        .iter()
        .map(|t| Ok(LfmScene::latent_only(t.coefficients(kind)?)))
        .collect()
}
