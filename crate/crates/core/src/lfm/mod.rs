//! Latent flow matching: the velocity field, its losses and the training
//! loop.

mod field;
mod loss;
mod toy;
mod train;

pub use field::{embed_time, BoundField, FieldConfig, GraphField, VelocityField};
pub use loss::{
    cfm_loss, extrapolate_to, perceptual_loss, project, taylor_extrapolate,
    taylor_extrapolate_graph, total_loss, ExtrapolationMode, GradientOperator,
    PerceptualSurrogate, Projection, ProjectionTarget, TrainBatch,
};
pub use toy::{toy_scenes, toy_trajectories, TOY_SCALES};
pub use train::{encode_scenes, train_lfm, LfmConfig, LfmScene, LossRecord};
