//! Few-shot adaptation of visual navigation policies.
//!
//! The crate is organized around a small pipeline:
//!
//! * [`worldsim`] — procedurally generated 2D floor plans with a column
//!   raycaster producing egocentric RGB observations, plus the transition,
//!   reward, and geodesic-distance machinery.
//! * [`tensor`] — a dense-tensor reverse-mode autodiff core sized for the
//!   fixed architectures used here (conv / linear / LSTM cell).
//! * [`policy`] — the two-part agent: a CNN perception encoder emitting a
//!   low-dimensional latent, and a recurrent actor-critic inference network.
//! * [`ppo`] — on-policy training of the baseline agent with PPO and GAE.
//! * [`adapt`] — supervised latent matching, domain randomization, and
//!   few-shot meta-learning that retargets the perception network to new
//!   observation functions while the inference network stays frozen.
//! * [`eval`] — episode rollouts, SPL / success metrics, latent traces, and
//!   method comparison tables.
//! * [`config`] — the experiment configuration file shared by the CLI.

pub mod adapt;
pub mod config;
pub mod eval;
pub mod policy;
pub mod ppo;
pub mod tensor;
pub mod worldsim;

pub use adapt::{MetaConfig, PairedSample, TaskFamily, TaskSpec};
pub use config::ExperimentConfig;
pub use eval::{EpisodeResult, EvalCase, EvalSummary, MetricsReport};
pub use policy::{ActionMode, AgentState, Policy, PolicyArch};
pub use ppo::{CurvePoint, PPOConfig, RolloutBuffer, TrainResult};
pub use tensor::{ParamSet, Tape, TensorData, Var};
pub use worldsim::{
    Action, EpisodeSpec, Image, ObservationConfig, Pose, RewardConfig, StepOutcome, TargetSpec,
    WorldMap,
};
