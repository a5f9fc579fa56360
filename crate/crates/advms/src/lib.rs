//! Adversarially trained model switching.
//!
//! Trains pools of independently initialized, adversarially trained
//! sub-models and serves predictions from a uniformly random member per
//! inference, trading memory and a little clean accuracy for robustness
//! against gradient-based attacks. The crate also ships the attacks (FGSM,
//! PGD, margin-loss PGD, each with expectation-over-transformation variants)
//! and the evaluation protocol used to measure attack success rates.
//!
//! Everything is deterministic given the seeds in the public API: reruns
//! reproduce results bit for bit, independent of worker count.

pub mod arch;
pub mod attack;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod loss;
pub mod model;
mod ops;
pub mod plot;
pub mod pool;
pub mod rng;
pub mod tensor;
pub mod train;

pub use arch::{build_architecture, Architecture, DatasetId, Layer};
pub use attack::{attack_batch, fgsm, pgd, AttackConfig, AttackKind, GradientOracle};
pub use checkpoint::{load_model, save_model};
pub use data::{batches, load_cifar10, load_mnist, make_synthetic, subset, Batch, Dataset};
pub use error::{Error, Result};
pub use eval::{
    eval_asr, eval_clean, sweep, AsrOutcome, EvalProtocol, EvalReport, EvalRow, SweepConfig,
};
pub use gradcheck::{grad_check, grad_check_with, GradCheckOptions, GradCheckReport};
pub use loss::{loss_ce, loss_cw, LossKind};
pub use model::{init_params, LayerParams, Model};
pub use plot::{asr_vs_epsilon_svg, tradeoff_svg};
pub use pool::{build_pool, cached_members, load_pool, save_pool, SwitchingPool};
pub use tensor::{Scalar, Tensor};
pub use train::{train_adversarial, train_standard, train_with_log, TrainConfig, TrainLog};
