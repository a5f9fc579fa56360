//! Layer compute kernels on raw slices.
//!
//! Activations are batched (N, C, H, W) row-major. Convolutions lower each
//! example to an im2col matrix and run one GEMM per example, so a given
//! example's outputs and gradients are bit-identical no matter which batch it
//! travels in. Parallel loops only ever write disjoint per-example slices,
//! which keeps results independent of the worker count.

use rayon::prelude::*;

use crate::tensor::{gemm, gemm_at, gemm_bt, Scalar};

/// Geometry of one stride-1 valid convolution.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(input: (usize, usize, usize), filters: usize, kh: usize, kw: usize) -> ConvGeom {
        let (in_c, in_h, in_w) = input;
        ConvGeom {
            in_c,
            in_h,
            in_w,
            out_c: filters,
            kh,
            kw,
            out_h: in_h - kh + 1,
            out_w: in_w - kw + 1,
        }
    }
    pub fn in_stride(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }
    pub fn out_stride(&self) -> usize {
        self.out_c * self.out_h * self.out_w
    }
    /// Rows of the im2col matrix: one per (channel, kernel offset).
    pub fn patch(&self) -> usize {
        self.in_c * self.kh * self.kw
    }
    /// Columns of the im2col matrix: one per output position.
    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Gathers conv patches of one example into `cols` (patch x positions).
/// Row order is (channel, kh, kw), matching the (F, C, KH, KW) weight layout.
fn im2col<F: Scalar>(x: &[F], g: &ConvGeom, cols: &mut [F]) {
    let p = g.positions();
    let mut row = 0;
    for c in 0..g.in_c {
        let chan = &x[c * g.in_h * g.in_w..][..g.in_h * g.in_w];
        for dh in 0..g.kh {
            for dw in 0..g.kw {
                let dst = &mut cols[row * p..][..p];
                for oh in 0..g.out_h {
                    let src = &chan[(oh + dh) * g.in_w + dw..][..g.out_w];
                    dst[oh * g.out_w..][..g.out_w].copy_from_slice(src);
                }
                row += 1;
            }
        }
    }
}

/// Scatter-adds an im2col-shaped gradient back onto one example's input.
/// `dx` must be zeroed by the caller.
fn col2im_add<F: Scalar>(cols: &[F], g: &ConvGeom, dx: &mut [F]) {
    let p = g.positions();
    let mut row = 0;
    for c in 0..g.in_c {
        let chan = &mut dx[c * g.in_h * g.in_w..][..g.in_h * g.in_w];
        for dh in 0..g.kh {
            for dw in 0..g.kw {
                let src = &cols[row * p..][..p];
                for oh in 0..g.out_h {
                    let dst = &mut chan[(oh + dh) * g.in_w + dw..][..g.out_w];
                    for (d, s) in dst.iter_mut().zip(&src[oh * g.out_w..][..g.out_w]) {
                        *d += *s;
                    }
                }
                row += 1;
            }
        }
    }
}

/// y (N, F, OH, OW) = conv(x (N, C, H, W), w (F, C, KH, KW)) + b.
pub(crate) fn conv_forward<F: Scalar>(
    x: &[F],
    n: usize,
    g: &ConvGeom,
    w: &[F],
    b: &[F],
    y: &mut [F],
) {
    debug_assert_eq!(x.len(), n * g.in_stride());
    debug_assert_eq!(y.len(), n * g.out_stride());
    let (k, p) = (g.patch(), g.positions());
    x.par_chunks(g.in_stride())
        .zip(y.par_chunks_mut(g.out_stride()))
        .for_each_init(
            || vec![F::zero(); k * p],
            |cols, (x_ex, y_ex)| {
                im2col(x_ex, g, cols);
                gemm(g.out_c, k, p, F::one(), w, cols, F::zero(), y_ex);
                for (f, row) in y_ex.chunks_exact_mut(p).enumerate() {
                    let bf = b[f];
                    for v in row {
                        *v += bf;
                    }
                }
            },
        );
}

/// dx = conv backward wrt input. Overwrites `dx`.
pub(crate) fn conv_backward_input<F: Scalar>(
    dy: &[F],
    n: usize,
    g: &ConvGeom,
    w: &[F],
    dx: &mut [F],
) {
    debug_assert_eq!(dy.len(), n * g.out_stride());
    let (k, p) = (g.patch(), g.positions());
    dy.par_chunks(g.out_stride())
        .zip(dx.par_chunks_mut(g.in_stride()))
        .for_each_init(
            || vec![F::zero(); k * p],
            |cols, (dy_ex, dx_ex)| {
                gemm_at(k, g.out_c, p, F::one(), w, dy_ex, F::zero(), cols);
                dx_ex.fill(F::zero());
                col2im_add(cols, g, dx_ex);
            },
        );
}

/// Accumulates conv parameter gradients over the batch into dw/db
/// (which the caller zeroes). Sequential over examples so the accumulation
/// order is fixed.
pub(crate) fn conv_backward_params<F: Scalar>(
    x: &[F],
    dy: &[F],
    n: usize,
    g: &ConvGeom,
    dw: &mut [F],
    db: &mut [F],
) {
    let (k, p) = (g.patch(), g.positions());
    let mut cols = vec![F::zero(); k * p];
    for ex in 0..n {
        let x_ex = &x[ex * g.in_stride()..][..g.in_stride()];
        let dy_ex = &dy[ex * g.out_stride()..][..g.out_stride()];
        im2col(x_ex, g, &mut cols);
        gemm_bt(g.out_c, p, k, F::one(), dy_ex, &cols, F::one(), dw);
        for (f, row) in dy_ex.chunks_exact(p).enumerate() {
            let mut s = F::zero();
            for &v in row {
                s += v;
            }
            db[f] += s;
        }
    }
}

/// Non-overlapping max pool. `argmax` records, per output cell, the flat
/// input index (within the example) of the first maximum in scan order.
#[allow(clippy::too_many_arguments)]
pub(crate) fn maxpool_forward<F: Scalar>(
    x: &[F],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    ph: usize,
    pw: usize,
    y: &mut [F],
    argmax: &mut [u32],
) {
    let (oh, ow) = (h / ph, w / pw);
    let in_stride = c * h * w;
    let out_stride = c * oh * ow;
    for ex in 0..n {
        let x_ex = &x[ex * in_stride..][..in_stride];
        let y_ex = &mut y[ex * out_stride..][..out_stride];
        let a_ex = &mut argmax[ex * out_stride..][..out_stride];
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = F::neg_infinity();
                    let mut best_idx = 0u32;
                    for di in 0..ph {
                        let base = ch * h * w + (i * ph + di) * w + j * pw;
                        for dj in 0..pw {
                            let v = x_ex[base + dj];
                            if v > best {
                                best = v;
                                best_idx = (base + dj) as u32;
                            }
                        }
                    }
                    y_ex[ch * oh * ow + i * ow + j] = best;
                    a_ex[ch * oh * ow + i * ow + j] = best_idx;
                }
            }
        }
    }
}

/// Routes pooled gradients back to the argmax positions. Overwrites `dx`.
pub(crate) fn maxpool_backward<F: Scalar>(
    dy: &[F],
    argmax: &[u32],
    n: usize,
    in_stride: usize,
    out_stride: usize,
    dx: &mut [F],
) {
    dx.fill(F::zero());
    for ex in 0..n {
        let dy_ex = &dy[ex * out_stride..][..out_stride];
        let a_ex = &argmax[ex * out_stride..][..out_stride];
        let dx_ex = &mut dx[ex * in_stride..][..in_stride];
        for (g, &idx) in dy_ex.iter().zip(a_ex) {
            dx_ex[idx as usize] += *g;
        }
    }
}

pub(crate) fn relu_forward<F: Scalar>(x: &[F], y: &mut [F]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o = if v > F::zero() { v } else { F::zero() };
    }
}

/// dx = dy masked by the forward output (y > 0 exactly where x > 0).
pub(crate) fn relu_backward<F: Scalar>(dy: &[F], y: &[F], dx: &mut [F]) {
    for ((o, &g), &v) in dx.iter_mut().zip(dy).zip(y) {
        *o = if v > F::zero() { g } else { F::zero() };
    }
}

/// y (N, U) = x (N, Fin) * w^T (Fin, U) + b, with w stored (U, Fin).
pub(crate) fn dense_forward<F: Scalar>(
    x: &[F],
    n: usize,
    fan_in: usize,
    units: usize,
    w: &[F],
    b: &[F],
    y: &mut [F],
) {
    gemm_bt(n, fan_in, units, F::one(), x, w, F::zero(), y);
    for row in y.chunks_exact_mut(units) {
        for (v, &bu) in row.iter_mut().zip(b) {
            *v += bu;
        }
    }
}

/// dx (N, Fin) = dy (N, U) * w (U, Fin). Overwrites `dx`.
pub(crate) fn dense_backward_input<F: Scalar>(
    dy: &[F],
    n: usize,
    fan_in: usize,
    units: usize,
    w: &[F],
    dx: &mut [F],
) {
    gemm(n, units, fan_in, F::one(), dy, w, F::zero(), dx);
}

/// dw (U, Fin) += dy^T * x; db += column sums of dy.
pub(crate) fn dense_backward_params<F: Scalar>(
    x: &[F],
    dy: &[F],
    n: usize,
    fan_in: usize,
    units: usize,
    dw: &mut [F],
    db: &mut [F],
) {
    gemm_at(units, n, fan_in, F::one(), dy, x, F::one(), dw);
    for row in dy.chunks_exact(units) {
        for (d, &g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g2x2() -> ConvGeom {
        ConvGeom::new((1, 2, 2), 1, 2, 2)
    }

    #[test]
    fn conv_identity_kernel_hand_value() {
        // [[1,2],[3,4]] under kernel [[1,0],[0,1]] -> 1 + 4 = 5, plus bias.
        let x = [1.0f32, 2.0, 3.0, 4.0];
        let w = [1.0f32, 0.0, 0.0, 1.0];
        let b = [0.5f32];
        let mut y = [0.0f32; 1];
        conv_forward(&x, 1, &g2x2(), &w, &b, &mut y);
        assert_eq!(y[0], 5.5);
    }

    #[test]
    fn conv_two_channel_two_filter_hand_values() {
        // 2-channel 1x3x3 -> 2 filters of 2x2 kernels, out 2x2x2.
        let g = ConvGeom::new((2, 3, 3), 2, 2, 2);
        let mut x = vec![0.0f32; 18];
        for (i, v) in x.iter_mut().enumerate() {
            *v = i as f32;
        }
        // Filter 0 sums channel 0's window; filter 1 picks channel 1's
        // top-left corner.
        let mut w = vec![0.0f32; 2 * 2 * 2 * 2];
        w[0..4].copy_from_slice(&[1.0, 1.0, 1.0, 1.0]);
        w[8..12].copy_from_slice(&[0.0; 4]);
        w[12] = 1.0;
        let b = [0.0f32, 10.0];
        let mut y = vec![0.0f32; 8];
        conv_forward(&x, 1, &g, &w, &b, &mut y);
        // Channel-0 window sums: (0+1+3+4, 1+2+4+5, 3+4+6+7, 4+5+7+8).
        assert_eq!(&y[0..4], &[8.0, 12.0, 20.0, 24.0]);
        // Channel-1 top-left values are 9, 10, 12, 13 with bias 10.
        assert_eq!(&y[4..8], &[19.0, 20.0, 22.0, 23.0]);
    }

    #[test]
    fn conv_backward_input_matches_finite_difference() {
        let g = ConvGeom::new((2, 4, 5), 3, 3, 3);
        let n = 2;
        let x: Vec<f64> = (0..n * g.in_stride())
            .map(|i| ((i * 37 + 11) % 101) as f64 / 101.0 - 0.5)
            .collect();
        let w: Vec<f64> = (0..g.out_c * g.patch())
            .map(|i| ((i * 53 + 7) % 97) as f64 / 97.0 - 0.5)
            .collect();
        let b = vec![0.1f64; g.out_c];
        // Scalar objective: sum of conv outputs weighted by a fixed pattern.
        let coeff: Vec<f64> = (0..n * g.out_stride())
            .map(|i| ((i * 29 + 3) % 89) as f64 / 89.0 - 0.5)
            .collect();
        let eval = |x: &[f64]| -> f64 {
            let mut y = vec![0.0; n * g.out_stride()];
            conv_forward(x, n, &g, &w, &b, &mut y);
            y.iter().zip(&coeff).map(|(a, c)| a * c).sum()
        };
        let mut dx = vec![0.0f64; x.len()];
        conv_backward_input(&coeff, n, &g, &w, &mut dx);
        let h = 1e-6;
        for probe in [0usize, 5, 17, 61, x.len() - 1] {
            let mut xp = x.clone();
            xp[probe] += h;
            let mut xm = x.clone();
            xm[probe] -= h;
            let fd = (eval(&xp) - eval(&xm)) / (2.0 * h);
            assert!(
                (fd - dx[probe]).abs() < 1e-8,
                "coord {probe}: fd {fd} vs analytic {}",
                dx[probe]
            );
        }
    }

    #[test]
    fn conv_backward_params_matches_finite_difference() {
        let g = ConvGeom::new((1, 4, 4), 2, 2, 2);
        let n = 3;
        let x: Vec<f64> = (0..n * g.in_stride())
            .map(|i| ((i * 41 + 13) % 103) as f64 / 103.0)
            .collect();
        let w0: Vec<f64> = (0..g.out_c * g.patch())
            .map(|i| ((i * 31 + 5) % 79) as f64 / 79.0 - 0.5)
            .collect();
        let b0 = vec![0.2f64, -0.1];
        let coeff: Vec<f64> = (0..n * g.out_stride())
            .map(|i| ((i * 23 + 1) % 71) as f64 / 71.0 - 0.5)
            .collect();
        let eval = |w: &[f64], b: &[f64]| -> f64 {
            let mut y = vec![0.0; n * g.out_stride()];
            conv_forward(&x, n, &g, w, b, &mut y);
            y.iter().zip(&coeff).map(|(a, c)| a * c).sum()
        };
        let mut dw = vec![0.0f64; w0.len()];
        let mut db = vec![0.0f64; b0.len()];
        conv_backward_params(&x, &coeff, n, &g, &mut dw, &mut db);
        let h = 1e-6;
        for probe in [0usize, 3, w0.len() - 1] {
            let mut wp = w0.clone();
            wp[probe] += h;
            let mut wm = w0.clone();
            wm[probe] -= h;
            let fd = (eval(&wp, &b0) - eval(&wm, &b0)) / (2.0 * h);
            assert!((fd - dw[probe]).abs() < 1e-8);
        }
        for probe in 0..b0.len() {
            let mut bp = b0.clone();
            bp[probe] += h;
            let mut bm = b0.clone();
            bm[probe] -= h;
            let fd = (eval(&w0, &bp) - eval(&w0, &bm)) / (2.0 * h);
            assert!((fd - db[probe]).abs() < 1e-8);
        }
    }

    #[test]
    fn maxpool_takes_first_max_on_ties() {
        let x = [3.0f32, 1.0, 2.0, 3.0, 0.0, 0.0, 0.0, 0.0];
        // Shape (1, 2, 2, 2): channel 0 is [[3,1],[2,3]] -> max 3 at index 0.
        let mut y = [0.0f32; 2];
        let mut am = [0u32; 2];
        maxpool_forward(&x, 1, 2, 2, 2, 2, 2, &mut y, &mut am);
        assert_eq!(y[0], 3.0);
        assert_eq!(am[0], 0);
        let mut dx = [0.0f32; 8];
        maxpool_backward(&[1.0, 7.0], &am, 1, 8, 2, &mut dx);
        assert_eq!(dx[0], 1.0);
        assert_eq!(dx[1], 0.0);
        assert_eq!(dx[4], 7.0);
    }

    #[test]
    fn maxpool_drops_trailing_rows_when_not_divisible() {
        // 3x3 input with 2x2 pool -> 1x1 output over the top-left window.
        let x = [1.0f32, 2.0, 9.0, 4.0, 5.0, 9.0, 9.0, 9.0, 9.0];
        let mut y = [0.0f32; 1];
        let mut am = [0u32; 1];
        maxpool_forward(&x, 1, 1, 3, 3, 2, 2, &mut y, &mut am);
        assert_eq!(y[0], 5.0);
        assert_eq!(am[0], 4);
    }

    #[test]
    fn dense_round_trip_gradients_match_finite_difference() {
        let (n, fan_in, units) = (3, 7, 4);
        let x: Vec<f64> = (0..n * fan_in).map(|i| (i as f64 * 0.13).sin()).collect();
        let w: Vec<f64> = (0..units * fan_in).map(|i| (i as f64 * 0.29).cos() * 0.3).collect();
        let b: Vec<f64> = (0..units).map(|i| i as f64 * 0.01).collect();
        let coeff: Vec<f64> = (0..n * units).map(|i| (i as f64 * 0.41).sin()).collect();
        let eval = |x: &[f64], w: &[f64], b: &[f64]| -> f64 {
            let mut y = vec![0.0; n * units];
            dense_forward(x, n, fan_in, units, w, b, &mut y);
            y.iter().zip(&coeff).map(|(a, c)| a * c).sum()
        };
        let mut dx = vec![0.0; x.len()];
        dense_backward_input(&coeff, n, fan_in, units, &w, &mut dx);
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; b.len()];
        dense_backward_params(&x, &coeff, n, fan_in, units, &mut dw, &mut db);
        let h = 1e-6;
        let fd = |f: &dyn Fn(f64) -> f64| (f(h) - f(-h)) / (2.0 * h);
        for probe in [0usize, 9, x.len() - 1] {
            let v = fd(&|d| {
                let mut xp = x.clone();
                xp[probe] += d;
                eval(&xp, &w, &b)
            });
            assert!((v - dx[probe]).abs() < 1e-8);
        }
        for probe in [0usize, 11, w.len() - 1] {
            let v = fd(&|d| {
                let mut wp = w.clone();
                wp[probe] += d;
                eval(&x, &wp, &b)
            });
            assert!((v - dw[probe]).abs() < 1e-8);
        }
        for probe in 0..b.len() {
            let v = fd(&|d| {
                let mut bp = b.clone();
                bp[probe] += d;
                eval(&x, &w, &bp)
            });
            assert!((v - db[probe]).abs() < 1e-8);
        }
    }

    #[test]
    fn relu_masks_by_sign() {
        let x = [-1.0f32, 0.0, 2.0];
        let mut y = [9.0f32; 3];
        relu_forward(&x, &mut y);
        assert_eq!(y, [0.0, 0.0, 2.0]);
        let mut dx = [9.0f32; 3];
        relu_backward(&[5.0, 5.0, 5.0], &y, &mut dx);
        assert_eq!(dx, [0.0, 0.0, 5.0]);
    }
}
