//! Adversarial training: every batch is perturbed by an inner PGD before the
//! parameter step, so the model only ever sees worst-case inputs.

use crate::arch::Architecture;
use crate::attack::{attack_batch, AttackConfig, GradientOracle};
use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::loss::LossKind;
use crate::model::{init_params, Model};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Inner perturbation budget. Zero disables the inner attack entirely,
    /// which is plain training.
    pub epsilon_train: f64,
    pub inner_steps: usize,
    /// Zero picks 2.5 * epsilon_train / inner_steps, capped at the budget.
    pub inner_step_size: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 64,
            learning_rate: 0.01,
            momentum: 0.9,
            epsilon_train: 0.0,
            inner_steps: 7,
            inner_step_size: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(0.0..=1.0).contains(&self.epsilon_train) {
            return Err(Error::Config(format!(
                "epsilon_train must lie in [0, 1], got {}",
                self.epsilon_train
            )));
        }
        if self.epsilon_train > 0.0 && self.inner_steps == 0 {
            return Err(Error::Config(
                "inner_steps must be positive when epsilon_train > 0".into(),
            ));
        }
        if self.inner_step_size < 0.0 || !self.inner_step_size.is_finite() {
            return Err(Error::Config(format!(
                "inner_step_size must be nonnegative and finite, got {}",
                self.inner_step_size
            )));
        }
        Ok(())
    }

    fn inner_attack(&self, seed: u64) -> AttackConfig {
        let mut cfg = AttackConfig::pgd(self.epsilon_train);
        cfg.steps = self.inner_steps;
        cfg.step_size = self.inner_step_size;
        cfg.seed = seed;
        cfg
    }
}

/// Per-epoch mean training loss, in epoch order.
#[derive(Debug, Clone)]
pub struct TrainLog {
    pub epoch_mean_loss: Vec<f64>,
}

/// Plain training; rejects configs that ask for an inner attack.
pub fn train_standard(arch: &Architecture, ds: &Dataset, cfg: &TrainConfig) -> Result<Model<f32>> {
    if cfg.epsilon_train != 0.0 {
        return Err(Error::Config(
            "train_standard requires epsilon_train = 0".into(),
        ));
    }
    train_adversarial(arch, ds, cfg)
}

pub fn train_adversarial(
    arch: &Architecture,
    ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<Model<f32>> {
    Ok(train_inner(arch, ds, cfg)?.0)
}

/// As [`train_adversarial`], also returning the loss log.
pub fn train_with_log(
    arch: &Architecture,
    ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Model<f32>, TrainLog)> {
    train_inner(arch, ds, cfg)
}

fn train_inner(
    arch: &Architecture,
    ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Model<f32>, TrainLog)> {
    cfg.validate()?;
    if ds.num_classes() != arch.class_count() {
        return Err(Error::Config(format!(
            "dataset has {} classes, architecture expects {}",
            ds.num_classes(),
            arch.class_count()
        )));
    }
    if ds.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }

    let mut model = init_params::<f32>(arch, derive_seed(cfg.seed, "init", 0));
    let mut velocity: Vec<crate::model::LayerParams<f32>> = model
        .params()
        .iter()
        .map(|p| crate::model::LayerParams {
            weight: Tensor::zeros(p.weight.shape()),
            bias: Tensor::zeros(p.bias.shape()),
        })
        .collect();

    let mut log = TrainLog {
        epoch_mean_loss: Vec::with_capacity(cfg.epochs),
    };
    let n_batches = ds.len().div_ceil(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        let shuffle_seed = derive_seed(cfg.seed, "shuffle", epoch as u64);
        let mut loss_sum = 0.0f64;
        let mut example_count = 0usize;
        for (bi, batch) in batches(ds, cfg.batch_size, shuffle_seed, true)?.enumerate() {
            let images = if cfg.epsilon_train > 0.0 {
                let attack =
                    cfg.inner_attack(derive_seed(cfg.seed, "inner", (epoch * n_batches + bi) as u64));
                let oracle = GradientOracle::Single(&model);
                let adv = attack_batch(&oracle, &batch, &attack)?;
                debug_assert!(perturbation_ok(&batch.images, &adv, cfg.epsilon_train));
                adv
            } else {
                batch.images.clone()
            };
            let n = batch.labels.len();
            let (grads, mean_loss) =
                model.param_gradients(&images, &batch.labels, LossKind::CrossEntropy, 0.0)?;
            loss_sum += mean_loss as f64 * n as f64;
            example_count += n;
            for (pi, g) in grads.iter().enumerate() {
                step(&mut velocity[pi].weight, &g.weight, cfg);
                step(&mut velocity[pi].bias, &g.bias, cfg);
            }
            for (pi, v) in velocity.iter().enumerate() {
                apply(&mut model.params_mut()[pi].weight, &v.weight, cfg);
                apply(&mut model.params_mut()[pi].bias, &v.bias, cfg);
            }
        }
        log.epoch_mean_loss.push(loss_sum / example_count as f64);
    }
    model.set_train_epsilon(cfg.epsilon_train);
    Ok((model, log))
}

/// v <- momentum * v + g
fn step(v: &mut Tensor<f32>, g: &Tensor<f32>, cfg: &TrainConfig) {
    let mu = cfg.momentum as f32;
    for (vi, &gi) in v.data_mut().iter_mut().zip(g.data()) {
        *vi = mu * *vi + gi;
    }
}

/// theta <- theta - lr * v
fn apply(theta: &mut Tensor<f32>, v: &Tensor<f32>, cfg: &TrainConfig) {
    let lr = cfg.learning_rate as f32;
    for (ti, &vi) in theta.data_mut().iter_mut().zip(v.data()) {
        *ti -= lr * vi;
    }
}

fn perturbation_ok(x: &Tensor<f32>, adv: &Tensor<f32>, eps: f64) -> bool {
    let eps = eps as f32;
    x.data()
        .iter()
        .zip(adv.data())
        .all(|(&a, &b)| (b - a).abs() <= eps + 1e-6 && (0.0..=1.0).contains(&b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic;

    fn arch() -> Architecture {
        Architecture::synthetic((1, 8, 8), 4).unwrap()
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 16,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            TrainConfig { batch_size: 0, ..ok.clone() },
            TrainConfig { learning_rate: 0.0, ..ok.clone() },
            TrainConfig { learning_rate: f64::NAN, ..ok.clone() },
            TrainConfig { momentum: 1.0, ..ok.clone() },
            TrainConfig { momentum: -0.1, ..ok.clone() },
            TrainConfig { epsilon_train: 1.5, ..ok.clone() },
            TrainConfig { epsilon_train: 0.3, inner_steps: 0, ..ok.clone() },
            TrainConfig { inner_step_size: -1.0, ..ok.clone() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn standard_training_reduces_loss() {
        let ds = make_synthetic(4, 32, 8, 9).unwrap();
        let (_, log) = train_with_log(&arch(), &ds, &quick_cfg()).unwrap();
        assert_eq!(log.epoch_mean_loss.len(), 2);
        assert!(
            log.epoch_mean_loss[1] < log.epoch_mean_loss[0],
            "loss went {:?}",
            log.epoch_mean_loss
        );
    }

    #[test]
    fn trained_model_beats_chance_on_synthetic() {
        let ds = make_synthetic(4, 48, 8, 9).unwrap();
        let cfg = TrainConfig { epochs: 4, ..quick_cfg() };
        let model = train_standard(&arch(), &ds, &cfg).unwrap();
        let preds = model.predict_batch(ds.images()).unwrap();
        let correct = preds
            .iter()
            .zip(ds.labels())
            .filter(|(p, l)| **p == **l)
            .count();
        // Chance is 25% on 4 classes; the blocks are nearly separable.
        assert!(correct * 2 > ds.len(), "only {correct}/{}", ds.len());
    }

    #[test]
    fn training_is_deterministic() {
        let ds = make_synthetic(4, 16, 8, 3).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            epsilon_train: 0.1,
            inner_steps: 3,
            ..quick_cfg()
        };
        let a = train_adversarial(&arch(), &ds, &cfg).unwrap();
        let b = train_adversarial(&arch(), &ds, &cfg).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.weight.data(), pb.weight.data());
            assert_eq!(pa.bias.data(), pb.bias.data());
        }
    }

    #[test]
    fn seed_changes_the_model() {
        let ds = make_synthetic(4, 16, 8, 3).unwrap();
        let a = train_standard(&arch(), &ds, &quick_cfg()).unwrap();
        let b = train_standard(
            &arch(),
            &ds,
            &TrainConfig { seed: 6, ..quick_cfg() },
        )
        .unwrap();
        assert_ne!(a.params()[0].weight.data(), b.params()[0].weight.data());
    }

    #[test]
    fn zero_epochs_returns_the_initialization() {
        let ds = make_synthetic(4, 8, 8, 3).unwrap();
        let cfg = TrainConfig { epochs: 0, ..quick_cfg() };
        let model = train_standard(&arch(), &ds, &cfg).unwrap();
        let fresh = init_params::<f32>(&arch(), derive_seed(cfg.seed, "init", 0));
        for (pa, pb) in model.params().iter().zip(fresh.params()) {
            assert_eq!(pa.weight.data(), pb.weight.data());
        }
    }

    #[test]
    fn standard_refuses_adversarial_budget() {
        let ds = make_synthetic(4, 8, 8, 3).unwrap();
        let cfg = TrainConfig { epsilon_train: 0.1, ..quick_cfg() };
        assert!(train_standard(&arch(), &ds, &cfg).is_err());
        assert!(train_adversarial(&arch(), &ds, &cfg).is_ok());
    }

    #[test]
    fn adversarial_training_marks_the_budget() {
        let ds = make_synthetic(4, 8, 8, 3).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            epsilon_train: 0.25,
            inner_steps: 2,
            ..quick_cfg()
        };
        let model = train_adversarial(&arch(), &ds, &cfg).unwrap();
        assert_eq!(model.train_epsilon(), 0.25);
    }

    #[test]
    fn class_count_mismatch_is_rejected() {
        let ds = make_synthetic(2, 16, 8, 3).unwrap();
        assert!(matches!(
            train_standard(&arch(), &ds, &quick_cfg()).unwrap_err(),
            Error::Config(_)
        ));
    }
}
