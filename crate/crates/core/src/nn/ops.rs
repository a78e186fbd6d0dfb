//! Batched layer kernels. Every tensor here is `batch x features`; layer
//! geometry comes from the caller.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::tensor::Tensor;

fn check_input<T: Scalar>(x: &Tensor<T>, features: usize, what: &str) -> Result<()> {
    if x.row_len() != features {
        return Err(Error::shape(format!("{what} expects {features} features per row, got {}", x.row_len())));
    }
    Ok(())
}

/// `y = x W^T + b` with `W` stored `outputs x inputs`.
pub fn dense_forward<T: Scalar>(x: &Tensor<T>, w: &[T], b: &[T], outputs: usize) -> Result<Tensor<T>> {
    let inputs = x.row_len();
    if w.len() != outputs * inputs || b.len() != outputs {
        return Err(Error::shape(format!(
            "dense {inputs}->{outputs} needs {} weights and {outputs} biases, got {} and {}",
            outputs * inputs,
            w.len(),
            b.len()
        )));
    }
    let rows = x.rows();
    let mut y = Tensor::zeros(vec![rows, outputs]);
    for r in 0..rows {
        y.row_mut(r).copy_from_slice(b);
    }
    T::gemm(rows, inputs, outputs, T::one(), x.data(), false, w, true, T::one(), y.data_mut());
    Ok(y)
}

/// Accumulates weight and bias gradients into `gw`/`gb` and returns the
/// input gradient.
pub fn dense_backward_into<T: Scalar>(
    x: &Tensor<T>,
    w: &[T],
    grad_y: &Tensor<T>,
    gw: &mut [T],
    gb: &mut [T],
) -> Result<Tensor<T>> {
    let (rows, inputs, outputs) = (x.rows(), x.row_len(), grad_y.row_len());
    if grad_y.rows() != rows || w.len() != outputs * inputs || gw.len() != w.len() || gb.len() != outputs {
        return Err(Error::shape("dense backward operands disagree"));
    }
    T::gemm(outputs, rows, inputs, T::one(), grad_y.data(), true, x.data(), false, T::one(), gw);
    for r in 0..rows {
        for (g, &d) in gb.iter_mut().zip(grad_y.row(r)) {
            *g += d;
        }
    }
    let mut gx = Tensor::zeros(vec![rows, inputs]);
    T::gemm(rows, outputs, inputs, T::one(), grad_y.data(), false, w, false, T::zero(), gx.data_mut());
    Ok(gx)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads<T> {
    pub input: Tensor<T>,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

pub fn dense_backward<T: Scalar>(x: &Tensor<T>, w: &[T], grad_y: &Tensor<T>) -> Result<LayerGrads<T>> {
    let mut gw = vec![T::zero(); w.len()];
    let mut gb = vec![T::zero(); grad_y.row_len()];
    let input = dense_backward_into(x, w, grad_y, &mut gw, &mut gb)?;
    Ok(LayerGrads {
        input,
        weights: gw,
        bias: gb,
    })
}

/// Valid, stride-1 square-kernel convolution over `channels x height x width` rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub in_height: usize,
    pub in_width: usize,
}

impl ConvGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.kernel == 0 {
            return Err(Error::shape("conv channels and kernel must be positive"));
        }
        if self.kernel > self.in_height || self.kernel > self.in_width {
            return Err(Error::shape(format!(
                "{}x{} kernel does not fit a {}x{} input",
                self.kernel, self.kernel, self.in_height, self.in_width
            )));
        }
        Ok(())
    }

    pub fn out_height(&self) -> usize {
        self.in_height + 1 - self.kernel
    }

    pub fn out_width(&self) -> usize {
        self.in_width + 1 - self.kernel
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.in_height * self.in_width
    }

    pub fn output_len(&self) -> usize {
        self.out_channels * self.out_height() * self.out_width()
    }

    /// Length of one unrolled receptive field.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.patch_len()
    }

    fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Unrolls one sample into a `patch_len x positions` matrix.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let (oh, ow, k) = (g.out_height(), g.out_width(), g.kernel);
    let p = oh * ow;
    for c in 0..g.in_channels {
        let plane = &x[c * g.in_height * g.in_width..(c + 1) * g.in_height * g.in_width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let src = &plane[(oy + ky) * g.in_width + kx..(oy + ky) * g.in_width + kx + ow];
                    dst[oy * ow..(oy + 1) * ow].copy_from_slice(src);
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeometry, x: &mut [T]) {
    let (oh, ow, k) = (g.out_height(), g.out_width(), g.kernel);
    let p = oh * ow;
    for c in 0..g.in_channels {
        let plane = &mut x[c * g.in_height * g.in_width..(c + 1) * g.in_height * g.in_width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let base = (oy + ky) * g.in_width + kx;
                    for (d, &s) in plane[base..base + ow].iter_mut().zip(&src[oy * ow..(oy + 1) * ow]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

pub fn conv_forward<T: Scalar>(x: &Tensor<T>, w: &[T], b: &[T], g: &ConvGeometry) -> Result<Tensor<T>> {
    g.validate()?;
    check_input(x, g.input_len(), "conv")?;
    if w.len() != g.weight_len() || b.len() != g.out_channels {
        return Err(Error::shape("conv parameter count mismatch"));
    }
    let (rows, p, kl) = (x.rows(), g.positions(), g.patch_len());
    let mut y = Tensor::zeros(vec![rows, g.out_channels, g.out_height(), g.out_width()]);
    let mut cols = vec![T::zero(); kl * p];
    for r in 0..rows {
        im2col(x.row(r), g, &mut cols);
        let out = y.row_mut(r);
        for (oc, &bias) in b.iter().enumerate() {
            out[oc * p..(oc + 1) * p].fill(bias);
        }
        T::gemm(g.out_channels, kl, p, T::one(), w, false, &cols, false, T::one(), out);
    }
    Ok(y)
}

/// Recomputes output channel `oc` of every row into `y` in place.
pub(crate) fn conv_forward_channel<T: Scalar>(x: &Tensor<T>, w: &[T], b: &[T], g: &ConvGeometry, oc: usize, y: &mut Tensor<T>) {
    let (oh, ow, k) = (g.out_height(), g.out_width(), g.kernel);
    let p = oh * ow;
    let wk = &w[oc * g.patch_len()..(oc + 1) * g.patch_len()];
    for r in 0..x.rows() {
        let xin = x.row(r);
        let out = &mut y.row_mut(r)[oc * p..(oc + 1) * p];
        out.fill(b[oc]);
        for c in 0..g.in_channels {
            let plane = &xin[c * g.in_height * g.in_width..(c + 1) * g.in_height * g.in_width];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wk[(c * k + ky) * k + kx];
                    for oy in 0..oh {
                        let src = &plane[(oy + ky) * g.in_width + kx..(oy + ky) * g.in_width + kx + ow];
                        for (d, &s) in out[oy * ow..(oy + 1) * ow].iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv_backward_into<T: Scalar>(
    x: &Tensor<T>,
    w: &[T],
    grad_y: &Tensor<T>,
    g: &ConvGeometry,
    gw: &mut [T],
    gb: &mut [T],
) -> Result<Tensor<T>> {
    check_input(x, g.input_len(), "conv backward")?;
    check_input(grad_y, g.output_len(), "conv backward gradient")?;
    if gw.len() != g.weight_len() || gb.len() != g.out_channels || w.len() != g.weight_len() {
        return Err(Error::shape("conv gradient buffer mismatch"));
    }
    let (rows, p, kl) = (x.rows(), g.positions(), g.patch_len());
    let mut gx = Tensor::zeros(vec![rows, g.in_channels, g.in_height, g.in_width]);
    let mut cols = vec![T::zero(); kl * p];
    let mut dcols = vec![T::zero(); kl * p];
    for r in 0..rows {
        im2col(x.row(r), g, &mut cols);
        let gy = grad_y.row(r);
        T::gemm(g.out_channels, p, kl, T::one(), gy, false, &cols, true, T::one(), gw);
        for (oc, gbv) in gb.iter_mut().enumerate() {
            *gbv += gy[oc * p..(oc + 1) * p].iter().copied().sum::<T>();
        }
        T::gemm(kl, g.out_channels, p, T::one(), w, true, gy, false, T::zero(), &mut dcols);
        col2im_add(&dcols, g, gx.row_mut(r));
    }
    Ok(gx)
}

pub fn conv_backward<T: Scalar>(x: &Tensor<T>, w: &[T], grad_y: &Tensor<T>, g: &ConvGeometry) -> Result<LayerGrads<T>> {
    let mut gw = vec![T::zero(); g.weight_len()];
    let mut gb = vec![T::zero(); g.out_channels];
    let input = conv_backward_into(x, w, grad_y, g, &mut gw, &mut gb)?;
    Ok(LayerGrads {
        input,
        weights: gw,
        bias: gb,
    })
}

/// 2x2, stride-2 max pooling; odd trailing rows/columns are dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolGeometry {
    pub channels: usize,
    pub in_height: usize,
    pub in_width: usize,
}

impl PoolGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.in_height < 2 || self.in_width < 2 {
            return Err(Error::shape("max pool needs at least a 2x2 input"));
        }
        Ok(())
    }

    pub fn out_height(&self) -> usize {
        self.in_height / 2
    }

    pub fn out_width(&self) -> usize {
        self.in_width / 2
    }

    pub fn input_len(&self) -> usize {
        self.channels * self.in_height * self.in_width
    }

    pub fn output_len(&self) -> usize {
        self.channels * self.out_height() * self.out_width()
    }

    /// Input offsets (within a row) of the window feeding output `o`.
    pub(crate) fn window(&self, o: usize) -> [usize; 4] {
        let (oh, ow) = (self.out_height(), self.out_width());
        let c = o / (oh * ow);
        let rem = o % (oh * ow);
        let (oy, ox) = (rem / ow, rem % ow);
        let base = c * self.in_height * self.in_width + 2 * oy * self.in_width + 2 * ox;
        [base, base + 1, base + self.in_width, base + self.in_width + 1]
    }

    /// Output fed by input offset `i`, if any.
    pub(crate) fn output_of(&self, i: usize) -> Option<usize> {
        let plane = self.in_height * self.in_width;
        let c = i / plane;
        let (y, x) = ((i % plane) / self.in_width, (i % plane) % self.in_width);
        let (oy, ox) = (y / 2, x / 2);
        (oy < self.out_height() && ox < self.out_width())
            .then(|| (c * self.out_height() + oy) * self.out_width() + ox)
    }
}

/// Returns the pooled tensor and, per output value, the winning input offset
/// within its row. Ties go to the first element in row-major window order.
pub fn maxpool_forward<T: Scalar>(x: &Tensor<T>, g: &PoolGeometry) -> Result<(Tensor<T>, Vec<u32>)> {
    g.validate()?;
    check_input(x, g.input_len(), "max pool")?;
    let (rows, n) = (x.rows(), g.output_len());
    let mut y = Tensor::zeros(vec![rows, g.channels, g.out_height(), g.out_width()]);
    let mut arg = vec![0u32; rows * n];
    for r in 0..rows {
        let xin = x.row(r);
        let out = y.row_mut(r);
        for o in 0..n {
            let (v, i) = pool_one(xin, g, o);
            out[o] = v;
            arg[r * n + o] = i as u32;
        }
    }
    Ok((y, arg))
}

#[inline]
pub(crate) fn pool_one<T: Scalar>(xin: &[T], g: &PoolGeometry, o: usize) -> (T, usize) {
    let win = g.window(o);
    let mut best = win[0];
    for &i in &win[1..] {
        if xin[i] > xin[best] {
            best = i;
        }
    }
    (xin[best], best)
}

pub fn maxpool_backward<T: Scalar>(grad_y: &Tensor<T>, argmax: &[u32], g: &PoolGeometry) -> Result<Tensor<T>> {
    check_input(grad_y, g.output_len(), "max pool backward")?;
    let (rows, n) = (grad_y.rows(), g.output_len());
    if argmax.len() != rows * n {
        return Err(Error::shape("max pool argmax length mismatch"));
    }
    let mut gx = Tensor::zeros(vec![rows, g.channels, g.in_height, g.in_width]);
    for r in 0..rows {
        let gy = grad_y.row(r);
        let dst = gx.row_mut(r);
        for o in 0..n {
            dst[argmax[r * n + o] as usize] += gy[o];
        }
    }
    Ok(gx)
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    for v in y.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    y
}

/// Gradient through a ReLU given its output.
pub fn relu_backward<T: Scalar>(y: &Tensor<T>, grad_y: &Tensor<T>) -> Result<Tensor<T>> {
    if y.len() != grad_y.len() {
        return Err(Error::shape("relu backward length mismatch"));
    }
    let mut g = grad_y.clone();
    for (d, &o) in g.data_mut().iter_mut().zip(y.data()) {
        if o <= T::zero() {
            *d = T::zero();
        }
    }
    Ok(g)
}

pub fn softmax<T: Scalar>(scores: &[T]) -> Vec<T> {
    let m = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let mut out: Vec<T> = scores.iter().map(|&s| (s - m).exp()).collect();
    let z: T = out.iter().copied().sum();
    for v in &mut out {
        *v /= z;
    }
    out
}

pub fn log_softmax<T: Scalar>(scores: &[T]) -> Vec<T> {
    let m = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = m + scores.iter().map(|&s| (s - m).exp()).sum::<T>().ln();
    scores.iter().map(|&s| s - lse).collect()
}

/// `-log softmax(scores)[label]` and its gradient with respect to the scores.
pub fn cross_entropy<T: Scalar>(scores: &[T], label: usize) -> Result<(T, Vec<T>)> {
    if label >= scores.len() {
        return Err(Error::Invalid(format!("label {label} out of range for {} classes", scores.len())));
    }
    let ls = log_softmax(scores);
    let mut grad: Vec<T> = ls.iter().map(|&v| v.exp()).collect();
    grad[label] -= T::one();
    Ok((-ls[label], grad))
}

/// Mean squared componentwise error and its gradient.
pub fn mse<T: Scalar>(pred: &[T], target: &[T]) -> Result<(T, Vec<T>)> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::shape(format!("mse over {} predictions and {} targets", pred.len(), target.len())));
    }
    let n = T::lit(pred.len() as f64);
    let two = T::lit(2.0);
    let loss = pred.iter().zip(target).map(|(&p, &t)| (p - t) * (p - t)).sum::<T>() / n;
    let grad = pred.iter().zip(target).map(|(&p, &t)| two * (p - t) / n).collect();
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn dense_identity_passes_input() {
        let n = 5;
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            w[i * n + i] = 1.0;
        }
        let x = Tensor::matrix(2, n, rand_vec(2 * n, 1)).unwrap();
        let y = dense_forward(&x, &w, &vec![0.0; n], n).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn dense_shape_errors() {
        let x = Tensor::<f64>::matrix(1, 3, vec![0.0; 3]).unwrap();
        assert!(dense_forward(&x, &[0.0; 5], &[0.0; 2], 2).is_err());
        assert!(dense_forward(&x, &[0.0; 6], &[0.0; 3], 2).is_err());
    }

    #[test]
    fn softmax_uniform_and_normalised() {
        let p = softmax(&[0.3f64; 64]);
        for v in &p {
            assert!((v - 1.0 / 64.0).abs() < 1e-15);
        }
        let s = rand_vec(30, 2).iter().map(|v| v * 50.0).collect::<Vec<_>>();
        let p = softmax(&s);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn conv_all_ones_gives_nine() {
        let g = ConvGeometry {
            in_channels: 1,
            out_channels: 1,
            kernel: 3,
            in_height: 5,
            in_width: 5,
        };
        let x = Tensor::matrix(1, 25, vec![1.0f64; 25]).unwrap();
        let y = conv_forward(&x, &[1.0; 9], &[0.0], &g).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 9.0));
    }

    fn naive_conv(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeometry) -> Vec<f64> {
        let (oh, ow, k) = (g.out_height(), g.out_width(), g.kernel);
        let mut out = vec![0.0; g.output_len()];
        for oc in 0..g.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = b[oc];
                    for c in 0..g.in_channels {
                        for ky in 0..k {
                            for kx in 0..k {
                                s += w[((oc * g.in_channels + c) * k + ky) * k + kx]
                                    * x[(c * g.in_height + oy + ky) * g.in_width + ox + kx];
                            }
                        }
                    }
                    out[(oc * oh + oy) * ow + ox] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_sum() {
        let g = ConvGeometry {
            in_channels: 2,
            out_channels: 3,
            kernel: 3,
            in_height: 6,
            in_width: 7,
        };
        let x = Tensor::matrix(2, g.input_len(), rand_vec(2 * g.input_len(), 3)).unwrap();
        let w = rand_vec(g.weight_len(), 4);
        let b = rand_vec(3, 5);
        let y = conv_forward(&x, &w, &b, &g).unwrap();
        let mut y2 = y.clone();
        y2.data_mut().fill(0.0);
        for oc in 0..3 {
            conv_forward_channel(&x, &w, &b, &g, oc, &mut y2);
        }
        for r in 0..2 {
            let want = naive_conv(x.row(r), &w, &b, &g);
            for (a, e) in y.row(r).iter().zip(&want) {
                assert!((a - e).abs() < 1e-12);
            }
            for (a, e) in y2.row(r).iter().zip(&want) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), gy> is linear in x and in w, so both gradients are exact adjoints.
        let g = ConvGeometry {
            in_channels: 2,
            out_channels: 2,
            kernel: 2,
            in_height: 4,
            in_width: 5,
        };
        let x = Tensor::matrix(1, g.input_len(), rand_vec(g.input_len(), 6)).unwrap();
        let w = rand_vec(g.weight_len(), 7);
        let b = vec![0.0; 2];
        let gy = Tensor::matrix(1, g.output_len(), rand_vec(g.output_len(), 8)).unwrap();
        let y = conv_forward(&x, &w, &b, &g).unwrap();
        let ip: f64 = y.data().iter().zip(gy.data()).map(|(a, b)| a * b).sum();
        let gr = conv_backward(&x, &w, &gy, &g).unwrap();
        let via_x: f64 = gr.input.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        let via_w: f64 = gr.weights.iter().zip(&w).map(|(a, b)| a * b).sum();
        assert!((ip - via_x).abs() < 1e-12);
        assert!((ip - via_w).abs() < 1e-12);
        assert!((gr.bias.iter().sum::<f64>() - gy.data().iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn maxpool_routes_gradient_to_winner() {
        let g = PoolGeometry {
            channels: 1,
            in_height: 3,
            in_width: 4,
        };
        let x = Tensor::matrix(1, 12, vec![1., 5., 2., 0., 3., 4., 9., 1., 7., 7., 7., 7.]).unwrap();
        let (y, arg) = maxpool_forward(&x, &g).unwrap();
        assert_eq!(y.data(), &[5.0, 9.0]);
        assert_eq!(arg, vec![1, 6]);
        let gx = maxpool_backward(&Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap(), &arg, &g).unwrap();
        assert_eq!(gx.data()[1], 1.0);
        assert_eq!(gx.data()[6], 2.0);
        assert_eq!(gx.data().iter().sum::<f64>(), 3.0);
        assert_eq!(g.output_of(6), Some(1));
        assert_eq!(g.output_of(8), None);
    }

    #[test]
    fn cross_entropy_values() {
        let (l, g) = cross_entropy(&[0.0f64; 64], 7).unwrap();
        assert!((l - 64f64.ln()).abs() < 1e-12);
        assert!((l - 4.1589).abs() < 1e-4);
        assert!(g.iter().sum::<f64>().abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 10.0] {
            let mut s = vec![0.0; 8];
            s[3] = margin;
            let (l, _) = cross_entropy(&s, 3).unwrap();
            assert!(l < prev);
            prev = l;
        }
        assert!(cross_entropy(&[0.0f64; 4], 4).is_err());
    }

    #[test]
    fn mse_zero_at_target() {
        let t = rand_vec(6, 9);
        let (l, g) = mse(&t, &t).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
        let (l, g) = mse(&[1.0f64, 3.0], &[0.0, 0.0]).unwrap();
        assert_eq!(l, 5.0);
        assert_eq!(g, vec![1.0, 3.0]);
    }
}
