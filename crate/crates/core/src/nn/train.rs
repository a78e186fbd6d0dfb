use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::adam::{adam_step, AdamState};
use super::network::{Batch, LossKind, Network, Targets};
use super::tensor::Tensor;

/// Mini-batch schedule for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epoch indices (0-based) at which the rate is multiplied by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub epochs: usize,
    pub loss: LossKind,
    pub seed: u64,
}

impl TrainSpec {
    fn preset(batch_size: usize, learning_rate: f64, decay_epochs: &[usize], epochs: usize, loss: LossKind) -> Self {
        Self {
            batch_size,
            learning_rate,
            decay_epochs: decay_epochs.to_vec(),
            decay_factor: 0.1,
            epochs,
            loss,
            seed: 0,
        }
    }

    pub fn mask_lstm() -> Self {
        Self::preset(5, 1e-3, &[], 50, LossKind::CrossEntropy)
    }

    pub fn bbox_lstm() -> Self {
        Self::preset(8, 1e-2, &[20], 50, LossKind::CrossEntropy)
    }

    pub fn mask_lenet() -> Self {
        Self::preset(5, 1e-3, &[], 50, LossKind::CrossEntropy)
    }

    pub fn bbox_fcnn() -> Self {
        Self::preset(8, 1e-2, &[20], 50, LossKind::CrossEntropy)
    }

    pub fn position_fcnn() -> Self {
        Self::preset(50, 1e-2, &[30, 70], 100, LossKind::Mse)
    }

    pub fn power_fcnn() -> Self {
        Self::preset(50, 1e-2, &[30, 70], 100, LossKind::Mse)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::config("decay factor must be in (0, 1]"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        Ok(())
    }
}

/// Learning rate in force during `epoch`.
pub fn lr_schedule(spec: &TrainSpec, epoch: usize) -> f64 {
    let passed = spec.decay_epochs.iter().filter(|&&e| e <= epoch).count();
    spec.learning_rate * spec.decay_factor.powi(passed as i32)
}

/// In-memory training set: per-sample inputs (flat or `steps x width`) and
/// class or regression targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples<T> {
    steps: Option<usize>,
    width: usize,
    inputs: Vec<T>,
    targets: Targets<T>,
}

impl<T: Scalar> Samples<T> {
    fn build(steps: Option<usize>, width: usize, inputs: Vec<T>, n: usize, targets: Targets<T>) -> Result<Self> {
        let tn = match &targets {
            Targets::Classes(c) => c.len(),
            Targets::Values(v) => v.rows(),
        };
        if tn != n {
            return Err(Error::shape(format!("{n} samples but {tn} targets")));
        }
        Ok(Self {
            steps,
            width,
            inputs,
            targets,
        })
    }

    pub fn flat(rows: &[Vec<T>], targets: Targets<T>) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::shape("samples differ in length"));
        }
        Self::build(None, width, rows.concat(), rows.len(), targets)
    }

    pub fn sequences(seqs: &[Vec<Vec<T>>], targets: Targets<T>) -> Result<Self> {
        let steps = seqs.first().map_or(0, Vec::len);
        let width = seqs.first().and_then(|s| s.first()).map_or(0, Vec::len);
        if seqs.iter().any(|s| s.len() != steps || s.iter().any(|x| x.len() != width)) {
            return Err(Error::shape("sequences differ in length or step width"));
        }
        let inputs = seqs.iter().flat_map(|s| s.iter().flatten().copied()).collect();
        Self::build(Some(steps), width, inputs, seqs.len(), targets)
    }

    pub fn len(&self) -> usize {
        match &self.targets {
            Targets::Classes(c) => c.len(),
            Targets::Values(v) => v.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn targets(&self) -> &Targets<T> {
        &self.targets
    }

    fn sample_len(&self) -> usize {
        self.steps.unwrap_or(1) * self.width
    }

    /// Inputs for the given sample indices.
    pub fn inputs(&self, idx: &[usize]) -> Result<Batch<T>> {
        let sl = self.sample_len();
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Invalid(format!("sample {bad} out of range")));
        }
        Ok(match self.steps {
            None => {
                let mut data = Vec::with_capacity(idx.len() * sl);
                for &i in idx {
                    data.extend_from_slice(&self.inputs[i * sl..(i + 1) * sl]);
                }
                Batch::Flat(Tensor::matrix(idx.len(), self.width, data)?)
            }
            Some(steps) => {
                let mut out = Vec::with_capacity(steps);
                for t in 0..steps {
                    let mut data = Vec::with_capacity(idx.len() * self.width);
                    for &i in idx {
                        let s = i * sl + t * self.width;
                        data.extend_from_slice(&self.inputs[s..s + self.width]);
                    }
                    out.push(Tensor::matrix(idx.len(), self.width, data)?);
                }
                Batch::Sequence(out)
            }
        })
    }

    pub fn batch(&self, idx: &[usize]) -> Result<(Batch<T>, Targets<T>)> {
        let t = match &self.targets {
            Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
            Targets::Values(v) => {
                let rows: Vec<&[T]> = idx.iter().map(|&i| v.row(i)).collect();
                Targets::Values(Tensor::stack(&rows)?)
            }
        };
        Ok((self.inputs(idx)?, t))
    }
}

const EVAL_CHUNK: usize = 256;

/// Network outputs for every sample, in order.
pub fn predict_all<T: Scalar>(net: &Network<T>, data: &Samples<T>) -> Result<Tensor<T>> {
    let n = data.len();
    let out = net.spec().output_len();
    let mut all = Vec::with_capacity(n * out);
    for start in (0..n).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        all.extend_from_slice(net.forward(&data.inputs(&idx)?)?.data());
    }
    Tensor::matrix(n, out, all)
}

/// Sample-mean loss over a whole set.
pub fn mean_loss<T: Scalar>(net: &Network<T>, data: &Samples<T>, kind: LossKind) -> Result<f64> {
    let n = data.len();
    if n == 0 {
        return Err(Error::Empty("no samples to evaluate".into()));
    }
    let mut total = 0.0;
    for start in (0..n).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        let (b, t) = data.batch(&idx)?;
        total += net.loss(&b, &t, kind)?.as_f64() * idx.len() as f64;
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub train: Vec<f64>,
    pub val: Vec<f64>,
}

/// Epochs over which the divergence guard compares losses.
pub const DIVERGENCE_WINDOW: usize = 10;
/// Allowed growth of the epoch loss over the window minimum. The guard only
/// fires once the loss is also above the first epoch's.
pub const DIVERGENCE_RATIO: f64 = 10.0;

/// Mini-batch Adam training with a per-epoch shuffle drawn from `spec.seed`.
/// The final short batch is kept.
pub fn train<T: Scalar>(
    net: &mut Network<T>,
    opt: &mut AdamState<T>,
    spec: &TrainSpec,
    data: &Samples<T>,
    val: Option<&Samples<T>>,
) -> Result<LossCurve> {
    spec.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set is empty".into()));
    }
    if opt.m.len() != net.param_count() {
        return Err(Error::shape("optimizer state does not match network"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = LossCurve::default();
    for epoch in 0..spec.epochs {
        let lr = lr_schedule(spec, epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(spec.batch_size) {
            let (b, t) = data.batch(chunk)?;
            let (loss, grads) = net.loss_and_grad(&b, &t, spec.loss).map_err(|e| match e {
                Error::NonFinite(what) => Error::Diverged(format!("non-finite {what} in epoch {epoch}")),
                e => e,
            })?;
            adam_step(net.params_mut(), &grads, opt, lr)?;
            total += loss.as_f64() * chunk.len() as f64;
        }
        let epoch_loss = total / data.len() as f64;
        let lo = epoch.saturating_sub(DIVERGENCE_WINDOW);
        if let Some(best) = curve.train[lo..].iter().copied().reduce(f64::min) {
            if epoch_loss > DIVERGENCE_RATIO * best && epoch_loss > curve.train[0] {
                return Err(Error::Diverged(format!(
                    "epoch {epoch} loss {epoch_loss:.4e} exceeds {DIVERGENCE_RATIO}x the recent minimum {best:.4e}"
                )));
            }
        }
        curve.train.push(epoch_loss);
        if let Some(v) = val.filter(|v| !v.is_empty()) {
            curve.val.push(mean_loss(net, v, spec.loss)?);
        }
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NetworkSpec;

    #[test]
    fn schedule_examples() {
        let s = TrainSpec::position_fcnn();
        assert!((lr_schedule(&s, 0) - 1e-2).abs() < 1e-15);
        assert!((lr_schedule(&s, 29) - 1e-2).abs() < 1e-15);
        assert!((lr_schedule(&s, 50) - 1e-3).abs() < 1e-15);
        assert!((lr_schedule(&s, 80) - 1e-4).abs() < 1e-15);
        let c = TrainSpec::mask_lstm();
        assert!((0..200).all(|e| lr_schedule(&c, e) == 1e-3));
    }

    #[test]
    fn presets_match_table() {
        let b = TrainSpec::bbox_lstm();
        assert_eq!((b.batch_size, b.learning_rate, b.decay_epochs.as_slice(), b.epochs), (8, 1e-2, &[20][..], 50));
        let m = TrainSpec::mask_lenet();
        assert_eq!((m.batch_size, m.learning_rate, m.epochs), (5, 1e-3, 50));
        let p = TrainSpec::power_fcnn();
        assert_eq!((p.batch_size, p.decay_epochs.as_slice(), p.epochs, p.loss), (50, &[30, 70][..], 100, LossKind::Mse));
        for s in [b, m, p] {
            s.validate().unwrap();
        }
    }

    #[test]
    fn spec_validation() {
        let mut s = TrainSpec::bbox_fcnn();
        s.batch_size = 0;
        assert!(s.validate().is_err());
        let mut s = TrainSpec::bbox_fcnn();
        s.decay_factor = 1.5;
        assert!(s.validate().is_err());
        let mut s = TrainSpec::bbox_fcnn();
        s.learning_rate = 0.0;
        assert!(s.validate().is_err());
    }

    fn toy() -> Samples<f64> {
        let rows: Vec<Vec<f64>> = (0..40).map(|i| vec![(i % 4) as f64, ((i / 4) % 3) as f64 * 0.1]).collect();
        let labels = (0..40).map(|i| i % 4).collect();
        Samples::flat(&rows, Targets::Classes(labels)).unwrap()
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let spec = TrainSpec::bbox_fcnn().with_seed(3);
        let run = || {
            let mut net = Network::<f64>::new(NetworkSpec::mlp(2, &[16], 4), 1).unwrap();
            let mut opt = AdamState::new(net.param_count());
            let c = train(&mut net, &mut opt, &spec, &toy(), Some(&toy())).unwrap();
            (net, c)
        };
        let (a, ca) = run();
        let (b, cb) = run();
        assert_eq!(a, b);
        assert_eq!(ca, cb);
        assert_eq!(ca.train.len(), 50);
        assert_eq!(ca.val.len(), 50);
        assert!(ca.train[49] < 0.3 * ca.train[0], "{:?}", ca.train);
    }

    #[test]
    fn batches_gather_rows_and_steps() {
        let seqs = vec![vec![vec![1.0, 2.0], vec![3.0, 4.0]], vec![vec![5.0, 6.0], vec![7.0, 8.0]]];
        let s = Samples::<f64>::sequences(&seqs, Targets::Classes(vec![0, 1])).unwrap();
        let (b, t) = s.batch(&[1, 0]).unwrap();
        assert_eq!(t, Targets::Classes(vec![1, 0]));
        let Batch::Sequence(steps) = b else { panic!() };
        assert_eq!(steps[0].data(), &[5.0, 6.0, 1.0, 2.0]);
        assert_eq!(steps[1].data(), &[7.0, 8.0, 3.0, 4.0]);
        assert!(s.inputs(&[2]).is_err());
    }
}
