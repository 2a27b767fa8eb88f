//! Actor and critic networks, the soft actor-critic trainer, replay,
//! checkpoints and a cross-entropy baseline.

pub mod cem;
pub mod checkpoint;
pub mod gradcheck;
pub mod nets;
pub mod nn;
pub mod replay;
pub mod sac;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
pub use nets::{act, actor_spec, critic_spec, CriticNet, PolicyController, PolicyError, PolicyNet};
pub use replay::{ReplayBuffer, Transition};
pub use trainer::{evaluate, train, BudgetUnit, TrainError, TrainOutcome, TrainTask, TrainerConfig};
