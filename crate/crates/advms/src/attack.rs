//! Gradient-based evasion attacks: FGSM, PGD, and margin-loss PGD, each
//! runnable against a single model or a switching pool.
//!
//! All three share one iteration driver: start (optionally randomized within
//! the budget), take signed gradient steps, project onto the L-inf ball
//! around the original, clip to the pixel box. FGSM is the driver with one
//! step of size epsilon and no random start, so the reduction identities
//! between the attacks hold by construction.
//!
//! Per-example randomness is keyed on the example id, with separate streams
//! for the random start and for member draws, so results are independent of
//! batch composition, chunking, worker count, and the oracle's appetite for
//! randomness.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::loss::LossKind;
use crate::model::{batch_of_one, Model};
use crate::pool::SwitchingPool;
use crate::rng::{derive_seed, stream};
use crate::tensor::Tensor;

/// Which attack to run. `CwPgd` is PGD descending the margin loss instead of
/// ascending cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttackKind {
    Fgsm,
    Pgd,
    CwPgd,
}

impl AttackKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
            AttackKind::CwPgd => "cw",
        }
    }

    /// Loss the attack optimizes, and the direction (+1 ascend, -1 descend).
    fn objective(self) -> (LossKind, f32) {
        match self {
            AttackKind::Fgsm | AttackKind::Pgd => (LossKind::CrossEntropy, 1.0),
            AttackKind::CwPgd => (LossKind::CwMargin, -1.0),
        }
    }
}

impl std::str::FromStr for AttackKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fgsm" => Ok(AttackKind::Fgsm),
            "pgd" => Ok(AttackKind::Pgd),
            "cw" => Ok(AttackKind::CwPgd),
            other => Err(Error::Config(format!("unknown attack \"{other}\""))),
        }
    }
}

impl std::fmt::Display for AttackKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Attack hyperparameters. Budgets and steps are fractions of the [0, 1]
/// pixel range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// L-inf budget epsilon.
    pub epsilon: f64,
    /// Step size; 0 means automatic (epsilon for FGSM, otherwise
    /// 2.5 * epsilon / steps capped at epsilon).
    pub step_size: f64,
    /// Gradient steps (1 for FGSM).
    pub steps: usize,
    /// Start from a uniform point inside the ball instead of the original.
    pub random_start: bool,
    /// Margin clamp for the CW loss; ignored by CE attacks.
    pub kappa: f64,
    /// Member draws per gradient step against a pool; 1 means no averaging
    /// (the white-box snapshot setting).
    pub eot_samples: usize,
    pub seed: u64,
}

impl AttackConfig {
    pub fn fgsm(epsilon: f64) -> AttackConfig {
        AttackConfig {
            kind: AttackKind::Fgsm,
            epsilon,
            step_size: 0.0,
            steps: 1,
            random_start: false,
            kappa: 0.0,
            eot_samples: 1,
            seed: 0,
        }
    }

    pub fn pgd(epsilon: f64) -> AttackConfig {
        AttackConfig {
            kind: AttackKind::Pgd,
            epsilon,
            step_size: 0.0,
            steps: 40,
            random_start: true,
            kappa: 0.0,
            eot_samples: 1,
            seed: 0,
        }
    }

    pub fn cw_pgd(epsilon: f64) -> AttackConfig {
        AttackConfig {
            kind: AttackKind::CwPgd,
            ..AttackConfig::pgd(epsilon)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> AttackConfig {
        self.seed = seed;
        self
    }

    pub fn with_eot(mut self, samples: usize) -> AttackConfig {
        self.eot_samples = samples;
        self
    }

    /// The step size actually used.
    pub fn effective_step(&self) -> f64 {
        if self.step_size > 0.0 {
            self.step_size
        } else if self.kind == AttackKind::Fgsm || self.steps == 1 {
            self.epsilon
        } else {
            (2.5 * self.epsilon / self.steps as f64).min(self.epsilon)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!(
                "epsilon must be in [0, 1], got {}",
                self.epsilon
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        if self.step_size < 0.0 || self.effective_step() > self.epsilon {
            return Err(Error::Config(format!(
                "step size {} outside (0, epsilon = {}]",
                self.effective_step(),
                self.epsilon
            )));
        }
        if self.kappa < 0.0 {
            return Err(Error::Config(format!("kappa must be >= 0, got {}", self.kappa)));
        }
        if self.eot_samples == 0 {
            return Err(Error::Config("eot_samples must be positive".into()));
        }
        if self.kind == AttackKind::Fgsm {
            if self.steps != 1 || self.random_start {
                return Err(Error::Config(
                    "fgsm is a single step from the original input".into(),
                ));
            }
            if self.step_size != 0.0 && self.step_size != self.epsilon {
                return Err(Error::Config("fgsm step size must equal epsilon".into()));
            }
        }
        Ok(())
    }
}

/// Source of loss gradients for the attack driver.
pub enum GradientOracle<'a> {
    /// Gradients of one fixed model.
    Single(&'a Model<f32>),
    /// One member drawn uniformly per example (keyed by example id) and held
    /// fixed for the whole attack: the white-box view of one inference.
    PoolSnapshot(&'a SwitchingPool),
    /// Expectation over the pool, estimated with `samples` fresh member
    /// draws per example per gradient step.
    PoolEot {
        pool: &'a SwitchingPool,
        samples: usize,
    },
    /// Exact expectation over the pool: the mean of all member gradients.
    PoolEotExact(&'a SwitchingPool),
}

impl<'a> GradientOracle<'a> {
    fn any_model(&self) -> &Model<f32> {
        match self {
            GradientOracle::Single(m) => m,
            GradientOracle::PoolSnapshot(p)
            | GradientOracle::PoolEot { pool: p, .. }
            | GradientOracle::PoolEotExact(p) => p.members().first().expect("pools are non-empty"),
        }
    }

    fn validate(&self) -> Result<()> {
        if let GradientOracle::PoolEot { samples, .. } = self {
            if *samples == 0 {
                return Err(Error::Argument("eot samples must be positive".into()));
            }
        }
        Ok(())
    }

    /// Per-example loss gradients at `x`. `members` carries the snapshot
    /// member of each example (ignored by other variants); `rngs` are the
    /// per-example streams EOT sampling draws from.
    fn gradient_batch(
        &self,
        x: &Tensor<f32>,
        labels: &[usize],
        loss: LossKind,
        kappa: f32,
        members: &[usize],
        rngs: &mut [ChaCha8Rng],
    ) -> Result<Tensor<f32>> {
        match self {
            GradientOracle::Single(model) => model.input_gradients_batch(x, labels, loss, kappa),
            GradientOracle::PoolSnapshot(pool) => {
                grouped_member_gradients(pool, x, labels, loss, kappa, |ex| {
                    vec![(members[ex], 1.0f32)]
                })
            }
            GradientOracle::PoolEot { pool, samples } => {
                let m = pool.size();
                let inv = 1.0f32 / *samples as f32;
                let mut counts: Vec<Vec<u32>> = vec![vec![0; m]; labels.len()];
                for (ex, rng) in rngs.iter_mut().enumerate() {
                    for _ in 0..*samples {
                        counts[ex][pool.activate(rng)] += 1;
                    }
                }
                grouped_member_gradients(pool, x, labels, loss, kappa, |ex| {
                    counts[ex]
                        .iter()
                        .enumerate()
                        .filter(|(_, &c)| c > 0)
                        .map(|(mi, &c)| (mi, c as f32 * inv))
                        .collect()
                })
            }
            GradientOracle::PoolEotExact(pool) => {
                let m = pool.size();
                let inv = 1.0f32 / m as f32;
                grouped_member_gradients(pool, x, labels, loss, kappa, |_| {
                    (0..m).map(|mi| (mi, inv)).collect()
                })
            }
        }
    }
}

/// Accumulates weighted member gradients per example. `weights(ex)` lists
/// (member, weight) pairs; members are processed in ascending index order so
/// the accumulation order is fixed. An example whose entire weight sits on
/// one member with weight 1 gets that member's gradient bit-for-bit.
fn grouped_member_gradients(
    pool: &SwitchingPool,
    x: &Tensor<f32>,
    labels: &[usize],
    loss: LossKind,
    kappa: f32,
    weights: impl Fn(usize) -> Vec<(usize, f32)>,
) -> Result<Tensor<f32>> {
    let n = labels.len();
    let stride = x.numel() / n;
    let mut out = vec![0.0f32; x.numel()];
    let per_ex: Vec<Vec<(usize, f32)>> = (0..n).map(&weights).collect();
    for mi in 0..pool.size() {
        let rows: Vec<usize> = (0..n)
            .filter(|&ex| per_ex[ex].iter().any(|&(m, _)| m == mi))
            .collect();
        if rows.is_empty() {
            continue;
        }
        let mut sub = Vec::with_capacity(rows.len() * stride);
        let mut sub_labels = Vec::with_capacity(rows.len());
        for &ex in &rows {
            sub.extend_from_slice(&x.data()[ex * stride..][..stride]);
            sub_labels.push(labels[ex]);
        }
        let mut shape = x.shape().to_vec();
        shape[0] = rows.len();
        let sub_x = Tensor::from_vec(&shape, sub)?;
        let g = pool
            .member(mi)?
            .input_gradients_batch(&sub_x, &sub_labels, loss, kappa)?;
        for (k, &ex) in rows.iter().enumerate() {
            let w = per_ex[ex]
                .iter()
                .find(|&&(m, _)| m == mi)
                .map(|&(_, w)| w)
                .expect("row was selected for this member");
            let dst = &mut out[ex * stride..][..stride];
            let src = &g.data()[k * stride..][..stride];
            if w == 1.0 && per_ex[ex].len() == 1 {
                dst.copy_from_slice(src);
            } else {
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
    }
    Tensor::from_vec(x.shape(), out)
}

/// Monte-Carlo expectation-over-transformation gradient for one example:
/// `samples` member draws from `rng`, gradients averaged by draw frequency.
pub fn eot_gradient(
    pool: &SwitchingPool,
    x: &Tensor<f32>,
    label: usize,
    samples: usize,
    loss: LossKind,
    kappa: f32,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<f32>> {
    if samples == 0 {
        return Err(Error::Argument("eot samples must be positive".into()));
    }
    let input = pool.arch().input_shape();
    let xb = batch_of_one(x, input)?;
    let mut counts = vec![0u32; pool.size()];
    for _ in 0..samples {
        counts[pool.activate(rng)] += 1;
    }
    let inv = 1.0f32 / samples as f32;
    let g = grouped_member_gradients(pool, &xb, &[label], loss, kappa, |_| {
        counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(mi, &c)| (mi, c as f32 * inv))
            .collect()
    })?;
    let shape = x.shape().to_vec();
    g.reshape(&shape)
}

/// Exact expectation gradient: mean of all member gradients, accumulated in
/// member index order then scaled by 1/M.
pub fn eot_gradient_exact(
    pool: &SwitchingPool,
    x: &Tensor<f32>,
    label: usize,
    loss: LossKind,
    kappa: f32,
) -> Result<Tensor<f32>> {
    let input = pool.arch().input_shape();
    let xb = batch_of_one(x, input)?;
    let inv = 1.0f32 / pool.size() as f32;
    let g = grouped_member_gradients(pool, &xb, &[label], loss, kappa, |_| {
        (0..pool.size()).map(|mi| (mi, inv)).collect()
    })?;
    let shape = x.shape().to_vec();
    g.reshape(&shape)
}

/// View of one attack iterate handed to an inspector: step 0 is the starting
/// point (after any random start), steps 1..=T follow each update.
pub struct IterateView<'a> {
    pub step: usize,
    pub ids: &'a [u64],
    /// Current iterates, (n, c, h, w) layout flattened.
    pub images: &'a [f32],
    /// The unperturbed originals in the same layout.
    pub originals: &'a [f32],
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Examples per parallel work unit. Fixed so that reductions and scratch
/// reuse never depend on the worker count.
const CHUNK: usize = 64;

/// Runs `config` against every example of `batch`, returning adversarial
/// images in batch order. Randomness is keyed per example id.
pub fn attack_batch(
    oracle: &GradientOracle<'_>,
    batch: &Batch,
    config: &AttackConfig,
) -> Result<Tensor<f32>> {
    attack_batch_inspect(oracle, batch, config, &|_| {})
}

/// [`attack_batch`] with a per-iterate inspector (constraint audits in
/// tests). The inspector sees each chunk at every step, including the start.
pub fn attack_batch_inspect(
    oracle: &GradientOracle<'_>,
    batch: &Batch,
    config: &AttackConfig,
    inspect: &(dyn Fn(IterateView<'_>) + Sync),
) -> Result<Tensor<f32>> {
    config.validate()?;
    oracle.validate()?;
    if batch.is_empty() {
        return Err(Error::Argument("cannot attack an empty batch".into()));
    }
    let model = oracle.any_model();
    let (c, h, w) = model.arch().input_shape();
    if batch.images.shape() != [batch.len(), c, h, w] {
        return Err(Error::Shape(format!(
            "batch images {:?} do not match model input {c}x{h}x{w}",
            batch.images.shape()
        )));
    }
    let classes = model.arch().class_count();
    if let Some(&bad) = batch.labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Index(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let stride = c * h * w;
    let n = batch.len();
    let chunk_ranges: Vec<(usize, usize)> = (0..n.div_ceil(CHUNK))
        .map(|i| (i * CHUNK, ((i + 1) * CHUNK).min(n)))
        .collect();
    let results: Result<Vec<Vec<f32>>> = chunk_ranges
        .par_iter()
        .map(|&(lo, hi)| {
            attack_chunk(
                oracle,
                &batch.images.data()[lo * stride..hi * stride],
                &batch.labels[lo..hi],
                &batch.ids[lo..hi],
                stride,
                (c, h, w),
                config,
                inspect,
            )
        })
        .collect();
    let mut out = Vec::with_capacity(n * stride);
    for chunk in results? {
        out.extend(chunk);
    }
    Tensor::from_vec(&[n, c, h, w], out)
}

#[allow(clippy::too_many_arguments)]
fn attack_chunk(
    oracle: &GradientOracle<'_>,
    originals: &[f32],
    labels: &[usize],
    ids: &[u64],
    stride: usize,
    (c, h, w): (usize, usize, usize),
    config: &AttackConfig,
    inspect: &(dyn Fn(IterateView<'_>) + Sync),
) -> Result<Vec<f32>> {
    let n = labels.len();
    let eps = config.epsilon as f32;
    let alpha = config.effective_step() as f32;
    let (loss, dir) = config.kind.objective();
    let kappa = config.kappa as f32;

    let mut member_rngs: Vec<ChaCha8Rng> = ids
        .iter()
        .map(|&id| stream(derive_seed(config.seed, "attack-member", id)))
        .collect();

    // Snapshot oracles fix one member per example up front.
    let members: Vec<usize> = match oracle {
        GradientOracle::PoolSnapshot(pool) => {
            member_rngs.iter_mut().map(|rng| pool.activate(rng)).collect()
        }
        _ => vec![0; n],
    };

    let mut x = originals.to_vec();
    if config.random_start && eps > 0.0 {
        for (ex, &id) in ids.iter().enumerate() {
            let mut rng = stream(derive_seed(config.seed, "attack-start", id));
            for v in &mut x[ex * stride..(ex + 1) * stride] {
                *v = (*v + rng.gen_range(-eps..eps)).clamp(0.0, 1.0);
            }
        }
    }
    inspect(IterateView {
        step: 0,
        ids,
        images: &x,
        originals,
    });

    for step in 1..=config.steps {
        let xt = Tensor::from_vec(&[n, c, h, w], x)?;
        let g = oracle.gradient_batch(&xt, labels, loss, kappa, &members, &mut member_rngs)?;
        x = xt.into_data();
        for ((xv, &gv), &ov) in x.iter_mut().zip(g.data()).zip(originals) {
            let stepped = *xv + dir * alpha * sign(gv);
            *xv = stepped.clamp(ov - eps, ov + eps).clamp(0.0, 1.0);
        }
        inspect(IterateView {
            step,
            ids,
            images: &x,
            originals,
        });
    }
    Ok(x)
}

/// Single-example FGSM: one signed-gradient step of size epsilon from the
/// original. Example randomness (member draws against pool oracles) is keyed
/// by id 0, matching a batch of one with that id.
pub fn fgsm(
    oracle: &GradientOracle<'_>,
    x: &Tensor<f32>,
    label: usize,
    epsilon: f64,
) -> Result<Tensor<f32>> {
    run_single(oracle, x, label, &AttackConfig::fgsm(epsilon))
}

/// Single-example PGD (or margin-loss PGD, per `config.kind`). Example
/// randomness is keyed by id 0, matching a batch of one with that id.
pub fn pgd(
    oracle: &GradientOracle<'_>,
    x: &Tensor<f32>,
    label: usize,
    config: &AttackConfig,
) -> Result<Tensor<f32>> {
    run_single(oracle, x, label, config)
}

fn run_single(
    oracle: &GradientOracle<'_>,
    x: &Tensor<f32>,
    label: usize,
    config: &AttackConfig,
) -> Result<Tensor<f32>> {
    let input = oracle.any_model().arch().input_shape();
    let batch = Batch {
        images: batch_of_one(x, input)?,
        labels: vec![label],
        ids: vec![0],
    };
    let adv = attack_batch(oracle, &batch, config)?;
    let shape = x.shape().to_vec();
    adv.reshape(&shape)
}
