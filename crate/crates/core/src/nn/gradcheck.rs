//! Central-difference gradient verification over every parameter.
//!
//! Each perturbed loss is evaluated exactly, but only the part of the
//! forward pass a single parameter can reach is recomputed: the affected
//! unit or channel of its own layer, then sparse updates through ReLU,
//! pooling and the next dense layer, then the remaining layers in full.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::lstm::{lstm_forward, LstmParams};
use super::network::{
    batch_loss, concat_steps, layer_forward, split_steps, Batch, Layer, LossKind, Network, NetworkSpec,
    Targets,
};
use super::ops;
use super::tensor::Tensor;

/// Relative errors are measured against at least this magnitude so that
/// gradients at round-off level compare absolutely.
pub const GRADIENT_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the worst parameter.
    pub worst_param: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub passed: bool,
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(GRADIENT_FLOOR)
}

/// Cached activations of a layer stack: `acts[i]` feeds layer `i`.
struct StackActs<T> {
    acts: Vec<Tensor<T>>,
}

impl<T: Scalar> StackActs<T> {
    fn new(layers: &[Layer], params: &[T], x: Tensor<T>) -> Result<Self> {
        let mut acts = vec![x.flatten_rows()];
        let mut off = 0;
        for l in layers {
            let n = l.param_count();
            let (y, _) = layer_forward(l, &params[off..off + n], acts.last().unwrap())?;
            acts.push(y);
            off += n;
        }
        Ok(Self { acts })
    }

    /// Stack output with parameter `k` (stack-local index) taking the value
    /// already written into `params`.
    fn output_with(&self, layers: &[Layer], params: &[T], k: usize) -> Result<Tensor<T>> {
        let mut off = 0;
        let mut li = 0;
        while off + layers[li].param_count() <= k {
            off += layers[li].param_count();
            li += 1;
        }
        let l = &layers[li];
        let p = &params[off..off + l.param_count()];
        let (y, mut changed) = perturbed_output(l, p, k - off, &self.acts[li], &self.acts[li + 1]);
        let mut x = y;
        off += l.param_count();
        for (j, l) in layers.iter().enumerate().skip(li + 1) {
            let p = &params[off..off + l.param_count()];
            off += l.param_count();
            let (y, c) = propagate(l, p, &self.acts[j], &x, changed.as_deref(), &self.acts[j + 1])?;
            x = y;
            changed = c;
        }
        Ok(x)
    }
}

/// Output of layer `l` when only its local parameter `k` differs from the
/// values that produced `old_out`; returns the changed flat indices.
fn perturbed_output<T: Scalar>(l: &Layer, p: &[T], k: usize, x: &Tensor<T>, old_out: &Tensor<T>) -> (Tensor<T>, Option<Vec<usize>>) {
    let mut y = old_out.clone();
    let rows = x.rows();
    match l {
        Layer::Dense { inputs, outputs } => {
            let o = if k < inputs * outputs { k / inputs } else { k - inputs * outputs };
            let w = &p[o * inputs..(o + 1) * inputs];
            let b = p[inputs * outputs + o];
            for r in 0..rows {
                y.row_mut(r)[o] = b + x.row(r).iter().zip(w).map(|(&a, &c)| a * c).sum::<T>();
            }
            (y, Some((0..rows).map(|r| r * outputs + o).collect()))
        }
        Layer::Conv(g) => {
            let oc = if k < g.weight_len() { k / g.patch_len() } else { k - g.weight_len() };
            let (w, b) = p.split_at(g.weight_len());
            ops::conv_forward_channel(x, w, b, g, oc, &mut y);
            let plane = g.out_height() * g.out_width();
            let n = g.output_len();
            let idx = (0..rows).flat_map(|r| (r * n + oc * plane)..(r * n + (oc + 1) * plane)).collect();
            (y, Some(idx))
        }
        _ => unreachable!("parameter-free layers own no parameters"),
    }
}

/// Pushes a partially changed input through `l`, reusing `old_out` where
/// possible.
fn propagate<T: Scalar>(
    l: &Layer,
    p: &[T],
    old_in: &Tensor<T>,
    new_in: &Tensor<T>,
    changed: Option<&[usize]>,
    old_out: &Tensor<T>,
) -> Result<(Tensor<T>, Option<Vec<usize>>)> {
    let Some(changed) = changed else {
        return Ok((layer_forward(l, p, new_in)?.0, None));
    };
    match l {
        Layer::Relu { .. } => {
            let mut y = old_out.clone();
            for &i in changed {
                let v = new_in.data()[i];
                y.data_mut()[i] = if v < T::zero() { T::zero() } else { v };
            }
            Ok((y, Some(changed.to_vec())))
        }
        Layer::MaxPool(g) => {
            let (il, ol) = (g.input_len(), g.output_len());
            let mut outs: Vec<usize> = changed
                .iter()
                .filter_map(|&i| g.output_of(i % il).map(|o| (i / il) * ol + o))
                .collect();
            outs.sort_unstable();
            outs.dedup();
            let mut y = old_out.clone();
            for &o in &outs {
                let r = o / ol;
                y.data_mut()[o] = ops::pool_one(new_in.row(r), g, o % ol).0;
            }
            Ok((y, Some(outs)))
        }
        Layer::Dense { inputs, outputs } if changed.len() * 4 < new_in.len() => {
            let mut y = old_out.clone();
            for &i in changed {
                let d = new_in.data()[i] - old_in.data()[i];
                if d == T::zero() {
                    continue;
                }
                let (r, c) = (i / inputs, i % inputs);
                let row = y.row_mut(r);
                for (o, v) in row.iter_mut().enumerate().take(*outputs) {
                    *v += p[o * inputs + c] * d;
                }
            }
            Ok((y, None))
        }
        _ => Ok((layer_forward(l, p, new_in)?.0, None)),
    }
}

/// Loss evaluator for one network/input pair that exploits locality.
struct Evaluator<'a, T> {
    net: &'a Network<T>,
    targets: &'a Targets<T>,
    kind: LossKind,
    steps: usize,
    stack: Option<StackActs<T>>,
    lstm_in: Option<Vec<Tensor<T>>>,
    last_hidden: Option<Tensor<T>>,
}

impl<'a, T: Scalar> Evaluator<'a, T> {
    fn new(net: &'a Network<T>, input: &Batch<T>, targets: &'a Targets<T>, kind: LossKind) -> Result<Self> {
        let params = net.params();
        let mut ev = Self {
            net,
            targets,
            kind,
            steps: 0,
            stack: None,
            lstm_in: None,
            last_hidden: None,
        };
        match (net.spec(), input) {
            (NetworkSpec::FeedForward { layers }, Batch::Flat(x)) => {
                ev.stack = Some(StackActs::new(layers, params, x.clone())?);
            }
            (
                NetworkSpec::Recurrent {
                    embedding, hidden, ..
                },
                Batch::Sequence(steps),
            ) => {
                let lay = net.recurrent_layout().unwrap();
                ev.steps = steps.len();
                let lstm_in = if embedding.is_empty() {
                    steps.clone()
                } else {
                    let s = StackActs::new(embedding, &params[lay.embedding.clone()], concat_steps(steps)?)?;
                    let out = split_steps(s.acts.last().unwrap(), steps.len())?;
                    ev.stack = Some(s);
                    out
                };
                let lp = LstmParams::from_flat(lstm_in[0].row_len(), *hidden, &params[lay.lstm])?;
                ev.last_hidden = Some(lstm_forward(&lstm_in, &lp)?.0);
                ev.lstm_in = Some(lstm_in);
            }
            _ => return Err(Error::shape("input kind does not match network")),
        }
        Ok(ev)
    }

    fn loss_of(&self, out: &Tensor<T>) -> Result<f64> {
        let (l, _) = batch_loss(out, self.targets, self.kind)?;
        let l = l.as_f64();
        if !l.is_finite() {
            return Err(Error::NonFinite("perturbed loss".into()));
        }
        Ok(l)
    }

    /// Loss with `params[k]` set as given in `params` and every other value
    /// equal to the network's.
    fn loss_with(&self, params: &[T], k: usize) -> Result<f64> {
        match self.net.spec() {
            NetworkSpec::FeedForward { layers } => {
                let out = self.stack.as_ref().unwrap().output_with(layers, params, k)?;
                self.loss_of(&out)
            }
            NetworkSpec::Recurrent {
                embedding,
                hidden,
                outputs,
                ..
            } => {
                let lay = self.net.recurrent_layout().unwrap();
                let head = |h: &Tensor<T>| -> Result<Tensor<T>> {
                    let (hw, hb) = params[lay.head.clone()].split_at(hidden * outputs);
                    ops::dense_forward(h, hw, hb, *outputs)
                };
                let lstm_from = |xs: &[Tensor<T>]| -> Result<Tensor<T>> {
                    let lp = LstmParams::from_flat(xs[0].row_len(), *hidden, &params[lay.lstm.clone()])?;
                    Ok(lstm_forward(xs, &lp)?.0)
                };
                let out = if lay.head.contains(&k) {
                    head(self.last_hidden.as_ref().unwrap())?
                } else if lay.lstm.contains(&k) {
                    head(&lstm_from(self.lstm_in.as_ref().unwrap())?)?
                } else {
                    let e = self.stack.as_ref().unwrap().output_with(embedding, &params[lay.embedding.clone()], k)?;
                    head(&lstm_from(&split_steps(&e, self.steps)?)?)?
                };
                self.loss_of(&out)
            }
        }
    }
}

/// Compares analytic gradients with central differences of step `eps` on
/// every parameter. Passes iff the largest relative error is below `tol`.
pub fn finite_difference_check<T: Scalar>(
    net: &Network<T>,
    input: &Batch<T>,
    targets: &Targets<T>,
    kind: LossKind,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Invalid("finite-difference step must be positive".into()));
    }
    let (_, grads) = net.loss_and_grad(input, targets, kind)?;
    let ev = Evaluator::new(net, input, targets, kind)?;
    let mut params = net.params().to_vec();
    let mut rep = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        passed: true,
    };
    for k in 0..params.len() {
        let orig = params[k];
        params[k] = orig + T::lit(eps);
        let up = ev.loss_with(&params, k)?;
        params[k] = orig - T::lit(eps);
        let down = ev.loss_with(&params, k)?;
        params[k] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let analytic = grads[k].as_f64();
        let e = relative_error(analytic, numeric);
        if !e.is_finite() {
            return Err(Error::NonFinite(format!("gradient check at parameter {k}")));
        }
        if e > rep.max_rel_error || k == 0 {
            rep.max_rel_error = e;
            rep.worst_param = k;
            rep.analytic = analytic;
            rep.numeric = numeric;
        }
        rep.checked += 1;
    }
    rep.passed = rep.max_rel_error < tol;
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor<f64> {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn dense_net_cross_entropy() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let net = Network::<f64>::new(NetworkSpec::mlp(4, &[8], 3), 2).unwrap();
        let x = Batch::Flat(rand_tensor(3, 4, &mut rng));
        let r = finite_difference_check(&net, &x, &Targets::Classes(vec![0, 2, 1]), LossKind::CrossEntropy, 1e-5, 1e-4)
            .unwrap();
        assert_eq!(r.checked, net.param_count());
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn zero_net_zero_gradients() {
        let spec = NetworkSpec::mlp(4, &[8], 3);
        let net = Network::<f64>::from_params(spec.clone(), vec![0.0; spec.param_count()]).unwrap();
        let x = Batch::Flat(Tensor::matrix(1, 4, vec![0.5, -1.0, 2.0, 0.1]).unwrap());
        let t = Targets::Values(Tensor::matrix(1, 3, vec![0.0; 3]).unwrap());
        let (_, g) = net.loss_and_grad(&x, &t, LossKind::Mse).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        let r = finite_difference_check(&net, &x, &t, LossKind::Mse, 1e-5, 1e-4).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert_eq!(r.numeric, 0.0);
    }

    #[test]
    fn lstm_bptt_over_five_steps() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let net = Network::<f64>::new(NetworkSpec::lstm(3, 6, 4), 4).unwrap();
        let x = Batch::Sequence((0..5).map(|_| rand_tensor(2, 3, &mut rng)).collect());
        let r = finite_difference_check(&net, &x, &Targets::Classes(vec![1, 3]), LossKind::CrossEntropy, 1e-5, 1e-4)
            .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn small_conv_stack_with_embedding() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let g = ops::ConvGeometry {
            in_channels: 1,
            out_channels: 2,
            kernel: 3,
            in_height: 6,
            in_width: 8,
        };
        let p = ops::PoolGeometry {
            channels: 2,
            in_height: 4,
            in_width: 6,
        };
        let emb = vec![
            Layer::Conv(g),
            Layer::Relu { size: g.output_len() },
            Layer::MaxPool(p),
            Layer::Dense {
                inputs: p.output_len(),
                outputs: 5,
            },
            Layer::Relu { size: 5 },
        ];
        let net = Network::<f64>::new(NetworkSpec::lstm_with_embedding(emb, 4, 3).unwrap(), 6).unwrap();
        let x = Batch::Sequence((0..3).map(|_| rand_tensor(2, 48, &mut rng)).collect());
        let r = finite_difference_check(&net, &x, &Targets::Classes(vec![2, 0]), LossKind::CrossEntropy, 1e-5, 1e-4)
            .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn incremental_matches_full_recompute() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let spec = NetworkSpec::lenet(16, 20, 5).unwrap();
        let net = Network::<f64>::new(spec, 8).unwrap();
        let mut other = net.clone();
        let x = Batch::Flat(rand_tensor(2, 320, &mut rng));
        let t = Targets::Classes(vec![1, 4]);
        let ev = Evaluator::new(&net, &x, &t, LossKind::CrossEntropy).unwrap();
        let n = net.param_count();
        for k in [0, 7, 155, 160, 2000, 2570, n / 2, n - 90, n - 1] {
            let mut p = net.params().to_vec();
            p[k] += 0.01;
            let fast = ev.loss_with(&p, k).unwrap();
            other.params_mut()[k] += 0.01;
            let slow = other.loss(&x, &t, LossKind::CrossEntropy).unwrap();
            other.params_mut()[k] -= 0.01;
            assert!((fast - slow).abs() < 1e-12, "param {k}: {fast} vs {slow}");
        }
    }

    #[test]
    fn bad_step_rejected() {
        let net = Network::<f64>::new(NetworkSpec::mlp(2, &[2], 2), 0).unwrap();
        let x = Batch::Flat(Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap());
        assert!(finite_difference_check(&net, &x, &Targets::Classes(vec![0]), LossKind::CrossEntropy, 0.0, 1e-4).is_err());
    }
}
