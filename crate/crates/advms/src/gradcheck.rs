//! Finite-difference verification of reverse-mode gradients.
//!
//! Runs in f64 only: f32 central differences drown in rounding noise long
//! before they say anything about correctness.

use rand::Rng;

use crate::error::Result;
use crate::loss::{loss_ce, loss_cw, LossKind};
use crate::model::Model;
use crate::rng::{derive_seed, stream};
use crate::tensor::Tensor;

/// Sampling plan for a gradient check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Input coordinates to probe.
    pub input_coords: usize,
    /// Coordinates to probe per parameter tensor (weights and biases each).
    pub coords_per_tensor: usize,
    /// Seed for coordinate selection.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            input_coords: 24,
            coords_per_tensor: 8,
            seed: 0x6772_6164,
        }
    }
}

/// Outcome of a check over the sampled coordinates.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates excluded because the finite difference itself was
    /// unstable under step halving (a relu or pool kink inside the stencil).
    pub skipped: usize,
}

/// Checks analytic input and parameter gradients of `loss` at (x, y) against
/// central finite differences, returning the worst relative error.
pub fn grad_check(
    model: &Model<f64>,
    x: &Tensor<f64>,
    y: usize,
    loss: LossKind,
    kappa: f64,
) -> Result<f64> {
    grad_check_with(model, x, y, loss, kappa, GradCheckOptions::default()).map(|r| r.max_rel_err)
}

/// [`grad_check`] with an explicit sampling plan and full report.
pub fn grad_check_with(
    model: &Model<f64>,
    x: &Tensor<f64>,
    y: usize,
    loss: LossKind,
    kappa: f64,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let eval_loss = |m: &Model<f64>, xv: &Tensor<f64>| -> Result<f64> {
        let logits = m.forward(xv)?;
        match loss {
            LossKind::CrossEntropy => loss_ce(&logits, y),
            LossKind::CwMargin => loss_cw(&logits, y, kappa),
        }
    };

    let analytic_x = model.input_gradient(x, y, loss, kappa)?;
    let xb = crate::model::batch_of_one(x, model.arch().input_shape())?;
    let (analytic_p, _) = model.param_gradients(&xb, &[y], loss, kappa)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut rng = stream(derive_seed(opts.seed, "gradcheck-coords", 0));

    // Input coordinates.
    let mut xm = x.clone();
    let n_in = xm.numel();
    for _ in 0..opts.input_coords.min(n_in) {
        let i = rng.gen_range(0..n_in);
        let a = analytic_x.data()[i];
        let center = xm.data()[i];
        let pair = central_pair(opts.step, center, |v| {
            xm.data_mut()[i] = v;
            let r = eval_loss(model, &xm);
            xm.data_mut()[i] = center;
            r
        })?;
        accept(&mut report, a, pair);
    }

    // Parameter coordinates, tensor by tensor, on a scratch copy that is
    // restored bit-exactly after every probe.
    let mut pert = model.clone();
    for (li, analytic) in analytic_p.iter().enumerate() {
        for which in 0..2usize {
            let n = if which == 0 {
                analytic.weight.numel()
            } else {
                analytic.bias.numel()
            };
            for _ in 0..opts.coords_per_tensor.min(n) {
                let i = rng.gen_range(0..n);
                let a = if which == 0 {
                    analytic.weight.data()[i]
                } else {
                    analytic.bias.data()[i]
                };
                let center = coord(&pert, li, which, i);
                let pair = central_pair(opts.step, center, |v| {
                    set_coord(&mut pert, li, which, i, v);
                    let r = eval_loss(&pert, x);
                    set_coord(&mut pert, li, which, i, center);
                    r
                })?;
                accept(&mut report, a, pair);
            }
        }
    }
    Ok(report)
}

fn coord(m: &Model<f64>, li: usize, which: usize, i: usize) -> f64 {
    if which == 0 {
        m.params()[li].weight.data()[i]
    } else {
        m.params()[li].bias.data()[i]
    }
}

fn set_coord(m: &mut Model<f64>, li: usize, which: usize, i: usize, v: f64) {
    let p = &mut m.params_mut()[li];
    if which == 0 {
        p.weight.data_mut()[i] = v;
    } else {
        p.bias.data_mut()[i] = v;
    }
}

/// One coordinate's finite-difference evidence.
struct Probe {
    fd: f64,
    fd_half: f64,
    /// |f(c+h) - 2 f(c) + f(c-h)| / 2h. For smooth f this is ~ h|f''| and
    /// vanishes with the step; a relu or pool kink inside the stencil leaves
    /// an h-independent slope jump, so large values mean the stencil itself
    /// is unreliable.
    kink: f64,
}

/// Central differences at step h and h/2 around `center`, plus the centered
/// curvature probe, all through `f`.
fn central_pair(h: f64, center: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<Probe> {
    let (hi, lo) = (f(center + h)?, f(center - h)?);
    let mid = f(center)?;
    let fd = (hi - lo) / (2.0 * h);
    let fd_half = (f(center + h / 2.0)? - f(center - h / 2.0)?) / h;
    let kink = (hi - 2.0 * mid + lo).abs() / (2.0 * h);
    Ok(Probe { fd, fd_half, kink })
}

/// Folds one coordinate into the report, or skips it when the finite
/// difference is untrustworthy there: either the two step sizes disagree (a
/// kink off-center in the stencil) or the curvature probe shows a slope jump
/// (a kink near the center, where both step sizes agree on the same wrong
/// average). The guard threshold sits well below the 1e-5 accuracy such
/// checks assert, so whatever leaks past it cannot move the verdict; smooth
/// coordinates stay orders of magnitude under it at sane steps. Denominators
/// floor at 1e-4 so rounding noise on near-zero coordinates is not
/// amplified; an exact zero against an exact zero scores 0.
fn accept(report: &mut GradCheckReport, analytic: f64, probe: Probe) {
    let Probe { fd, fd_half, kink } = probe;
    let scale = fd.abs().max(fd_half.abs()).max(1e-4);
    if (fd - fd_half).abs() / scale > 3e-6 || kink / scale > 3e-6 {
        report.skipped += 1;
        return;
    }
    let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-4);
    report.checked += 1;
    if rel > report.max_rel_err {
        report.max_rel_err = rel;
    }
}
