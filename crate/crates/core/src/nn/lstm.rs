//! LSTM with gate blocks ordered input, forget, candidate, output.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::tensor::Tensor;

/// Borrowed LSTM parameters: `w` is `4H x D`, `u` is `4H x H`, `b` is `4H`.
#[derive(Debug, Clone, Copy)]
pub struct LstmParams<'a, T> {
    pub input: usize,
    pub hidden: usize,
    pub w: &'a [T],
    pub u: &'a [T],
    pub b: &'a [T],
}

impl<'a, T: Scalar> LstmParams<'a, T> {
    pub fn param_count(input: usize, hidden: usize) -> usize {
        4 * hidden * (input + hidden + 1)
    }

    /// Splits a flat `[w, u, b]` slice.
    pub fn from_flat(input: usize, hidden: usize, flat: &'a [T]) -> Result<Self> {
        if flat.len() != Self::param_count(input, hidden) {
            return Err(Error::shape(format!(
                "lstm {input}->{hidden} needs {} parameters, got {}",
                Self::param_count(input, hidden),
                flat.len()
            )));
        }
        let (w, rest) = flat.split_at(4 * hidden * input);
        let (u, b) = rest.split_at(4 * hidden * hidden);
        Ok(Self { input, hidden, w, u, b })
    }
}

#[inline]
fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Activates the `4H` pre-activations of one row in place.
fn activate<T: Scalar>(z: &mut [T], h: usize) {
    for (k, v) in z.iter_mut().enumerate() {
        *v = if (2 * h..3 * h).contains(&k) { v.tanh() } else { sigmoid(*v) };
    }
}

/// One step for a single sample.
pub fn lstm_cell<T: Scalar>(x: &[T], h_prev: &[T], c_prev: &[T], p: &LstmParams<T>) -> Result<(Vec<T>, Vec<T>)> {
    let hd = p.hidden;
    if x.len() != p.input || h_prev.len() != hd || c_prev.len() != hd {
        return Err(Error::shape("lstm cell dimension mismatch"));
    }
    let mut z = p.b.to_vec();
    for (r, zr) in z.iter_mut().enumerate() {
        *zr += p.w[r * p.input..(r + 1) * p.input].iter().zip(x).map(|(&a, &b)| a * b).sum::<T>();
        *zr += p.u[r * hd..(r + 1) * hd].iter().zip(h_prev).map(|(&a, &b)| a * b).sum::<T>();
    }
    activate(&mut z, hd);
    let mut h = vec![T::zero(); hd];
    let mut c = vec![T::zero(); hd];
    for j in 0..hd {
        let (i, f, g, o) = (z[j], z[hd + j], z[2 * hd + j], z[3 * hd + j]);
        c[j] = f * c_prev[j] + i * g;
        h[j] = o * c[j].tanh();
    }
    Ok((h, c))
}

/// Activations kept for backpropagation through time.
#[derive(Debug, Clone)]
pub struct LstmCache<T> {
    inputs: Vec<Tensor<T>>,
    gates: Vec<Vec<T>>,
    cells: Vec<Vec<T>>,
    hiddens: Vec<Vec<T>>,
}

/// Runs a batch of sequences from zero state and returns the final hidden
/// state (`B x H`).
pub fn lstm_forward<T: Scalar>(steps: &[Tensor<T>], p: &LstmParams<T>) -> Result<(Tensor<T>, LstmCache<T>)> {
    let Some(first) = steps.first() else {
        return Err(Error::Empty("lstm sequence has no steps".into()));
    };
    let (rows, hd) = (first.rows(), p.hidden);
    let g4 = 4 * hd;
    let mut h = vec![T::zero(); rows * hd];
    let mut c = vec![T::zero(); rows * hd];
    let mut cache = LstmCache {
        inputs: Vec::with_capacity(steps.len()),
        gates: Vec::with_capacity(steps.len()),
        cells: vec![c.clone()],
        hiddens: vec![h.clone()],
    };
    for x in steps {
        if x.rows() != rows || x.row_len() != p.input {
            return Err(Error::shape(format!(
                "lstm step must be {rows}x{}, got {}x{}",
                p.input,
                x.rows(),
                x.row_len()
            )));
        }
        let mut z = vec![T::zero(); rows * g4];
        for r in 0..rows {
            z[r * g4..(r + 1) * g4].copy_from_slice(p.b);
        }
        T::gemm(rows, p.input, g4, T::one(), x.data(), false, p.w, true, T::one(), &mut z);
        T::gemm(rows, hd, g4, T::one(), &h, false, p.u, true, T::one(), &mut z);
        for r in 0..rows {
            let zr = &mut z[r * g4..(r + 1) * g4];
            activate(zr, hd);
            for j in 0..hd {
                let k = r * hd + j;
                c[k] = zr[hd + j] * c[k] + zr[j] * zr[2 * hd + j];
                h[k] = zr[3 * hd + j] * c[k].tanh();
            }
        }
        cache.inputs.push(x.clone());
        cache.gates.push(z);
        cache.cells.push(c.clone());
        cache.hiddens.push(h.clone());
    }
    Ok((Tensor::matrix(rows, hd, h)?, cache))
}

/// Backpropagates a gradient on the final hidden state. Parameter gradients
/// accumulate into `grads` (flat `[w, u, b]` layout); per-step input
/// gradients are returned.
pub fn lstm_backward<T: Scalar>(
    cache: &LstmCache<T>,
    p: &LstmParams<T>,
    grad_h: &Tensor<T>,
    grads: &mut [T],
) -> Result<Vec<Tensor<T>>> {
    let (hd, d) = (p.hidden, p.input);
    let g4 = 4 * hd;
    let rows = grad_h.rows();
    if grad_h.row_len() != hd || grads.len() != LstmParams::<T>::param_count(d, hd) {
        return Err(Error::shape("lstm backward dimension mismatch"));
    }
    let (gw, rest) = grads.split_at_mut(g4 * d);
    let (gu, gb) = rest.split_at_mut(g4 * hd);
    let one = T::one();
    let mut dh = grad_h.data().to_vec();
    let mut dc = vec![T::zero(); rows * hd];
    let mut dz = vec![T::zero(); rows * g4];
    let mut out = vec![Tensor::zeros(vec![rows, d]); cache.inputs.len()];
    for t in (0..cache.inputs.len()).rev() {
        let z = &cache.gates[t];
        let c_prev = &cache.cells[t];
        let c = &cache.cells[t + 1];
        for r in 0..rows {
            for j in 0..hd {
                let k = r * hd + j;
                let zr = &z[r * g4..(r + 1) * g4];
                let (i, f, g, o) = (zr[j], zr[hd + j], zr[2 * hd + j], zr[3 * hd + j]);
                let tc = c[k].tanh();
                let d_o = dh[k] * tc;
                let dck = dc[k] + dh[k] * o * (one - tc * tc);
                let dzr = &mut dz[r * g4..(r + 1) * g4];
                dzr[j] = dck * g * i * (one - i);
                dzr[hd + j] = dck * c_prev[k] * f * (one - f);
                dzr[2 * hd + j] = dck * i * (one - g * g);
                dzr[3 * hd + j] = d_o * o * (one - o);
                dc[k] = dck * f;
            }
        }
        T::gemm(g4, rows, d, one, &dz, true, cache.inputs[t].data(), false, one, gw);
        T::gemm(g4, rows, hd, one, &dz, true, &cache.hiddens[t], false, one, gu);
        for r in 0..rows {
            for (a, &v) in gb.iter_mut().zip(&dz[r * g4..(r + 1) * g4]) {
                *a += v;
            }
        }
        T::gemm(rows, g4, d, one, &dz, false, p.w, false, T::zero(), out[t].data_mut());
        T::gemm(rows, g4, hd, one, &dz, false, p.u, false, T::zero(), &mut dh);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn zero_params_zero_state() {
        let flat = vec![0.0f64; LstmParams::<f64>::param_count(3, 4)];
        let p = LstmParams::from_flat(3, 4, &flat).unwrap();
        let (h, c) = lstm_cell(&[1.0, -2.0, 0.5], &[0.0; 4], &[0.0; 4], &p).unwrap();
        assert!(h.iter().chain(&c).all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_forget_gate_keeps_cell() {
        let (d, hd) = (2, 3);
        let mut flat = vec![0.0f64; LstmParams::<f64>::param_count(d, hd)];
        let boff = 4 * hd * (d + hd);
        for j in 0..hd {
            flat[boff + hd + j] = 50.0;
        }
        let p = LstmParams::from_flat(d, hd, &flat).unwrap();
        let c_prev = [0.3, -1.2, 2.0];
        let (_, c) = lstm_cell(&[0.7, -0.1], &[0.1, 0.2, 0.3], &c_prev, &p).unwrap();
        for (a, b) in c.iter().zip(&c_prev) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn batched_matches_cell() {
        let (d, hd, rows, steps) = (3, 5, 2, 4);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let flat: Vec<f64> = (0..LstmParams::<f64>::param_count(d, hd)).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let p = LstmParams::from_flat(d, hd, &flat).unwrap();
        let xs: Vec<Tensor<f64>> = (0..steps)
            .map(|_| Tensor::matrix(rows, d, (0..rows * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
            .collect();
        let (hb, _) = lstm_forward(&xs, &p).unwrap();
        for r in 0..rows {
            let (mut h, mut c) = (vec![0.0; hd], vec![0.0; hd]);
            for x in &xs {
                (h, c) = lstm_cell(x.row(r), &h, &c, &p).unwrap();
            }
            for (a, b) in h.iter().zip(hb.row(r)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
