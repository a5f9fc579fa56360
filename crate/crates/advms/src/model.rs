//! Model parameters, forward pass, and reverse-mode gradients.
//!
//! The forward and backward passes are hand-rolled over the fixed layer
//! vocabulary in [`crate::arch`]; there is no tape. Both passes are pure
//! functions of their inputs, and per-example results are bit-identical
//! regardless of batch composition, which the attack and evaluation layers
//! depend on.

use rand::Rng;

use crate::arch::{Architecture, FeatureShape, Layer};
use crate::error::{Error, Result};
use crate::loss::{ce_grad_batch, cw_grad_batch, mean_ce_batch, LossKind};
use crate::ops;
use crate::rng::{derive_seed, stream};
use crate::tensor::{Scalar, Tensor};

/// Weight and bias of one parameterized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F: Scalar> {
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
}

/// A network: architecture plus parameter values, tagged with the seed that
/// produced the initial weights and the perturbation budget it was trained
/// under (0 for standard training).
#[derive(Debug, Clone)]
pub struct Model<F: Scalar> {
    arch: Architecture,
    params: Vec<LayerParams<F>>,
    init_seed: u64,
    train_epsilon: f64,
}

/// Fresh parameters for `arch`: weights uniform in +-sqrt(6 / fan_in),
/// biases zero. Each layer draws from its own derived stream, so adding or
/// removing layers elsewhere in the stack never shifts another layer's draw.
pub fn init_params<F: Scalar>(arch: &Architecture, seed: u64) -> Model<F> {
    let mut params = Vec::new();
    for (li, (wshape, bshape)) in arch.param_shapes().iter().enumerate() {
        let fan_in: usize = wshape[1..].iter().product();
        let limit = (6.0 / fan_in as f64).sqrt();
        let mut rng = stream(derive_seed(seed, "init-layer", li as u64));
        let n: usize = wshape.iter().product();
        let data: Vec<F> = (0..n)
            .map(|_| F::from_f64c(rng.gen_range(-limit..limit)))
            .collect();
        params.push(LayerParams {
            weight: Tensor::from_vec(wshape, data).expect("shape matches draw count"),
            bias: Tensor::zeros(bshape),
        });
    }
    Model {
        arch: arch.clone(),
        params,
        init_seed: seed,
        train_epsilon: 0.0,
    }
}

/// Activations recorded by a forward pass, consumed by backward.
pub(crate) struct Trace<F: Scalar> {
    n: usize,
    /// acts[0] is the input; acts[i + 1] the output of layer i.
    acts: Vec<Vec<F>>,
    /// Pool argmax indices, per layer (None for non-pool layers).
    argmax: Vec<Option<Vec<u32>>>,
}

impl<F: Scalar> Trace<F> {
    pub fn logits(&self) -> &[F] {
        self.acts.last().expect("trace has at least the input")
    }
}

impl<F: Scalar> Model<F> {
    /// Reassembles a model from stored parts, validating parameter shapes
    /// against the architecture.
    pub fn from_parts(
        arch: Architecture,
        params: Vec<LayerParams<F>>,
        init_seed: u64,
        train_epsilon: f64,
    ) -> Result<Model<F>> {
        let expect = arch.param_shapes();
        if expect.len() != params.len() {
            return Err(Error::Shape(format!(
                "architecture has {} parameterized layers, got {}",
                expect.len(),
                params.len()
            )));
        }
        for (i, ((ws, bs), p)) in expect.iter().zip(&params).enumerate() {
            if p.weight.shape() != &ws[..] || p.bias.shape() != &bs[..] {
                return Err(Error::Shape(format!(
                    "parameter layer {i}: expected {:?}/{:?}, got {:?}/{:?}",
                    ws,
                    bs,
                    p.weight.shape(),
                    p.bias.shape()
                )));
            }
        }
        Ok(Model {
            arch,
            params,
            init_seed,
            train_epsilon,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[LayerParams<F>] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [LayerParams<F>] {
        &mut self.params
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    /// Perturbation budget this model was trained under; 0 for standard
    /// training or freshly initialized parameters.
    pub fn train_epsilon(&self) -> f64 {
        self.train_epsilon
    }

    pub(crate) fn set_train_epsilon(&mut self, eps: f64) {
        self.train_epsilon = eps;
    }

    pub fn param_count(&self) -> usize {
        self.arch.param_count()
    }

    /// Bytes held by single-precision parameters of one model.
    pub fn param_bytes(&self) -> u64 {
        self.arch.param_count() as u64 * 4
    }

    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            arch: self.arch.clone(),
            params: self
                .params
                .iter()
                .map(|p| LayerParams {
                    weight: p.weight.cast(),
                    bias: p.bias.cast(),
                })
                .collect(),
            init_seed: self.init_seed,
            train_epsilon: self.train_epsilon,
        }
    }

    fn check_batch(&self, x: &Tensor<F>) -> Result<usize> {
        let (c, h, w) = self.arch.input_shape();
        match x.shape() {
            &[n, xc, xh, xw] if (xc, xh, xw) == (c, h, w) => {
                if n == 0 {
                    Err(Error::Argument("empty batch".into()))
                } else {
                    Ok(n)
                }
            }
            _ => Err(Error::Shape(format!(
                "batch shape {:?} does not match input {}x{}x{}",
                x.shape(),
                c,
                h,
                w
            ))),
        }
    }

    fn check_labels(&self, n: usize, labels: &[usize]) -> Result<()> {
        if labels.len() != n {
            return Err(Error::Argument(format!(
                "{} labels for batch of {n}",
                labels.len()
            )));
        }
        let c = self.arch.class_count();
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Index(format!("label {bad} out of range for {c} classes")));
        }
        Ok(())
    }

    /// Forward pass recording every activation.
    pub(crate) fn forward_trace(&self, x: &Tensor<F>) -> Result<Trace<F>> {
        let n = self.check_batch(x)?;
        let shapes = self.arch.feature_shapes().expect("validated");
        let mut acts: Vec<Vec<F>> = Vec::with_capacity(self.arch.layers().len() + 1);
        let mut argmax: Vec<Option<Vec<u32>>> = Vec::with_capacity(self.arch.layers().len());
        acts.push(x.data().to_vec());
        let mut pi = 0;
        for (li, layer) in self.arch.layers().iter().enumerate() {
            let cur = acts.last().expect("non-empty");
            let out = match (*layer, shapes[li]) {
                (Layer::Conv { filters, kh, kw }, FeatureShape::Spatial(c, h, w)) => {
                    let g = ops::ConvGeom::new((c, h, w), filters, kh, kw);
                    let mut y = vec![F::zero(); n * g.out_stride()];
                    ops::conv_forward(
                        cur,
                        n,
                        &g,
                        self.params[pi].weight.data(),
                        self.params[pi].bias.data(),
                        &mut y,
                    );
                    pi += 1;
                    argmax.push(None);
                    y
                }
                (Layer::MaxPool { ph, pw }, FeatureShape::Spatial(c, h, w)) => {
                    let (oh, ow) = (h / ph, w / pw);
                    let mut y = vec![F::zero(); n * c * oh * ow];
                    let mut am = vec![0u32; n * c * oh * ow];
                    ops::maxpool_forward(cur, n, c, h, w, ph, pw, &mut y, &mut am);
                    argmax.push(Some(am));
                    y
                }
                (Layer::Relu, s) => {
                    let mut y = vec![F::zero(); n * s.numel()];
                    ops::relu_forward(cur, &mut y);
                    argmax.push(None);
                    y
                }
                (Layer::Dense { units }, s) | (Layer::Output { units }, s) => {
                    let fan_in = s.numel();
                    let mut y = vec![F::zero(); n * units];
                    ops::dense_forward(
                        cur,
                        n,
                        fan_in,
                        units,
                        self.params[pi].weight.data(),
                        self.params[pi].bias.data(),
                        &mut y,
                    );
                    pi += 1;
                    argmax.push(None);
                    y
                }
                (l, FeatureShape::Flat(_)) => {
                    unreachable!("validated architecture applies {l:?} to spatial input")
                }
            };
            acts.push(out);
        }
        Ok(Trace { n, acts, argmax })
    }

    /// Logits for a batch, shape (n, classes).
    pub fn forward_batch(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let mut trace = self.forward_trace(x)?;
        let c = self.arch.class_count();
        let logits = trace.acts.pop().expect("trace ends with logits");
        Tensor::from_vec(&[trace.n, c], logits)
    }

    /// Logits for one example, shape (classes,).
    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let logits = self.forward_batch(&batch_of_one(x, self.arch.input_shape())?)?;
        let c = self.arch.class_count();
        logits.reshape(&[c])
    }

    /// Predicted class for one example; ties resolve to the lowest index.
    pub fn predict(&self, x: &Tensor<F>) -> Result<usize> {
        let logits = self.forward(x)?;
        Ok(argmax_lowest(logits.data()))
    }

    /// Predicted classes for a batch.
    pub fn predict_batch(&self, x: &Tensor<F>) -> Result<Vec<usize>> {
        let logits = self.forward_batch(x)?;
        let c = self.arch.class_count();
        Ok(logits.data().chunks_exact(c).map(argmax_lowest).collect())
    }

    /// Shared reverse pass. Returns input gradients if `want_input`, and
    /// parameter gradients if `want_params`. `scale` multiplies each row's
    /// loss gradient (1 for per-example losses, 1/n for the batch mean).
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn backward(
        &self,
        trace: &Trace<F>,
        labels: &[usize],
        loss: LossKind,
        kappa: F,
        scale: F,
        want_input: bool,
        want_params: bool,
    ) -> (Option<Tensor<F>>, Option<Vec<LayerParams<F>>>) {
        let n = trace.n;
        let c = self.arch.class_count();
        let shapes = self.arch.feature_shapes().expect("validated");
        let mut d = vec![F::zero(); n * c];
        match loss {
            LossKind::CrossEntropy => ce_grad_batch(trace.logits(), c, labels, scale, &mut d),
            LossKind::CwMargin => cw_grad_batch(trace.logits(), c, labels, kappa, scale, &mut d),
        }
        let mut grads: Vec<LayerParams<F>> = if want_params {
            self.params
                .iter()
                .map(|p| LayerParams {
                    weight: Tensor::zeros(p.weight.shape()),
                    bias: Tensor::zeros(p.bias.shape()),
                })
                .collect()
        } else {
            Vec::new()
        };
        let mut pi = self.params.len();
        for (li, layer) in self.arch.layers().iter().enumerate().rev() {
            let first = li == 0;
            let skip_dx = first && !want_input;
            let input = &trace.acts[li];
            match (*layer, shapes[li]) {
                (Layer::Conv { filters, kh, kw }, FeatureShape::Spatial(cc, h, w)) => {
                    pi -= 1;
                    let g = ops::ConvGeom::new((cc, h, w), filters, kh, kw);
                    if want_params {
                        let LayerParams { weight, bias } = &mut grads[pi];
                        ops::conv_backward_params(
                            input,
                            &d,
                            n,
                            &g,
                            weight.data_mut(),
                            bias.data_mut(),
                        );
                    }
                    if !skip_dx {
                        let mut dx = vec![F::zero(); n * g.in_stride()];
                        ops::conv_backward_input(&d, n, &g, self.params[pi].weight.data(), &mut dx);
                        d = dx;
                    }
                }
                (Layer::MaxPool { ph, pw }, FeatureShape::Spatial(cc, h, w)) => {
                    let (oh, ow) = (h / ph, w / pw);
                    let am = trace.argmax[li].as_ref().expect("pool recorded argmax");
                    let mut dx = vec![F::zero(); n * cc * h * w];
                    ops::maxpool_backward(&d, am, n, cc * h * w, cc * oh * ow, &mut dx);
                    d = dx;
                }
                (Layer::Relu, s) => {
                    let mut dx = vec![F::zero(); n * s.numel()];
                    ops::relu_backward(&d, &trace.acts[li + 1], &mut dx);
                    d = dx;
                }
                (Layer::Dense { units }, s) | (Layer::Output { units }, s) => {
                    pi -= 1;
                    let fan_in = s.numel();
                    if want_params {
                        let LayerParams { weight, bias } = &mut grads[pi];
                        ops::dense_backward_params(
                            input,
                            &d,
                            n,
                            fan_in,
                            units,
                            weight.data_mut(),
                            bias.data_mut(),
                        );
                    }
                    if !skip_dx {
                        let mut dx = vec![F::zero(); n * fan_in];
                        ops::dense_backward_input(&d, n, fan_in, units, self.params[pi].weight.data(), &mut dx);
                        d = dx;
                    }
                }
                (l, FeatureShape::Flat(_)) => {
                    unreachable!("validated architecture applies {l:?} to spatial input")
                }
            }
        }
        let input_grad = want_input.then(|| {
            let (ic, ih, iw) = self.arch.input_shape();
            Tensor::from_vec(&[n, ic, ih, iw], d).expect("gradient matches input shape")
        });
        (input_grad, want_params.then_some(grads))
    }

    /// Per-example gradients of the chosen loss with respect to the input
    /// batch; row i is the exact gradient of example i's own loss.
    pub fn input_gradients_batch(
        &self,
        x: &Tensor<F>,
        labels: &[usize],
        loss: LossKind,
        kappa: F,
    ) -> Result<Tensor<F>> {
        let n = self.check_batch(x)?;
        self.check_labels(n, labels)?;
        check_kappa(kappa)?;
        let trace = self.forward_trace(x)?;
        let (gx, _) = self.backward(&trace, labels, loss, kappa, F::one(), true, false);
        Ok(gx.expect("input gradients requested"))
    }

    /// Exact gradient of the chosen loss for a single example.
    pub fn input_gradient(&self, x: &Tensor<F>, label: usize, loss: LossKind, kappa: F) -> Result<Tensor<F>> {
        let xb = batch_of_one(x, self.arch.input_shape())?;
        let g = self.input_gradients_batch(&xb, &[label], loss, kappa)?;
        let shape = x.shape().to_vec();
        g.reshape(&shape)
    }

    /// Gradients of the mean loss over the batch with respect to every
    /// parameter, plus the mean loss value itself.
    pub fn param_gradients(
        &self,
        x: &Tensor<F>,
        labels: &[usize],
        loss: LossKind,
        kappa: F,
    ) -> Result<(Vec<LayerParams<F>>, F)> {
        let n = self.check_batch(x)?;
        self.check_labels(n, labels)?;
        check_kappa(kappa)?;
        let trace = self.forward_trace(x)?;
        let c = self.arch.class_count();
        let mean_loss = match loss {
            LossKind::CrossEntropy => mean_ce_batch(trace.logits(), c, labels),
            LossKind::CwMargin => {
                let mut total = F::zero();
                for (row, &y) in trace.logits().chunks_exact(c).zip(labels) {
                    let logit_t = Tensor::from_vec(&[c], row.to_vec()).expect("row");
                    total += crate::loss::loss_cw(&logit_t, y, kappa).expect("checked labels");
                }
                total / F::from_f64c(n as f64)
            }
        };
        let scale = F::one() / F::from_f64c(n as f64);
        let (_, gp) = self.backward(&trace, labels, loss, kappa, scale, false, true);
        Ok((gp.expect("param gradients requested"), mean_loss))
    }
}

fn check_kappa<F: Scalar>(kappa: F) -> Result<()> {
    if kappa < F::zero() {
        return Err(Error::Argument(format!("kappa must be non-negative, got {kappa:?}")));
    }
    Ok(())
}

/// Lowest-index argmax.
pub(crate) fn argmax_lowest<F: Scalar>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Views a single example (c, h, w) as a batch of one.
pub(crate) fn batch_of_one<F: Scalar>(x: &Tensor<F>, input: (usize, usize, usize)) -> Result<Tensor<F>> {
    let (c, h, w) = input;
    if x.shape() != [c, h, w] {
        return Err(Error::Shape(format!(
            "example shape {:?} does not match input {c}x{h}x{w}",
            x.shape()
        )));
    }
    Tensor::from_vec(&[1, c, h, w], x.data().to_vec())
}
