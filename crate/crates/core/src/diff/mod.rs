//! Gradients, losses, data sampling, training, and model files.

pub mod checkpoint;
pub mod fit;
pub mod implicit;
pub mod loss;
pub mod sampling;
pub mod train;

pub use checkpoint::Checkpoint;
pub use fit::fit_skinning;
pub use implicit::{deform_param_jacobian, implicit_grad_approx, implicit_grad_exact, ParamJacobian};
pub use loss::{loss_bce, loss_bone_occupancy, loss_joint_skinning};
pub use sampling::{sample_frame, Frame};
pub use train::{train, train_with_progress, EpochMetrics, PhaseTimings, TrainConfig, TrainOutput};
