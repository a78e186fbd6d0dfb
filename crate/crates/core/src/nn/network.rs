use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::lstm::{lstm_backward, lstm_forward, LstmCache, LstmParams};
use super::ops::{self, ConvGeometry, PoolGeometry};
use super::tensor::Tensor;

/// Channels, kernel and dense widths of the LeNet trunk.
pub const LENET_CONV1: usize = 6;
pub const LENET_CONV2: usize = 16;
pub const LENET_KERNEL: usize = 5;
pub const LENET_DENSE1: usize = 120;
pub const LENET_DENSE2: usize = 84;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    Dense { inputs: usize, outputs: usize },
    Conv(ConvGeometry),
    MaxPool(PoolGeometry),
    Relu { size: usize },
}

impl Layer {
    pub fn input_len(&self) -> usize {
        match self {
            Layer::Dense { inputs, .. } => *inputs,
            Layer::Conv(g) => g.input_len(),
            Layer::MaxPool(g) => g.input_len(),
            Layer::Relu { size } => *size,
        }
    }

    pub fn output_len(&self) -> usize {
        match self {
            Layer::Dense { outputs, .. } => *outputs,
            Layer::Conv(g) => g.output_len(),
            Layer::MaxPool(g) => g.output_len(),
            Layer::Relu { size } => *size,
        }
    }

    /// Weight count; biases follow the weights in the flat layout.
    pub fn weight_len(&self) -> usize {
        match self {
            Layer::Dense { inputs, outputs } => inputs * outputs,
            Layer::Conv(g) => g.weight_len(),
            _ => 0,
        }
    }

    pub fn bias_len(&self) -> usize {
        match self {
            Layer::Dense { outputs, .. } => *outputs,
            Layer::Conv(g) => g.out_channels,
            _ => 0,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight_len() + self.bias_len()
    }

    fn fan_in(&self) -> usize {
        match self {
            Layer::Dense { inputs, .. } => *inputs,
            Layer::Conv(g) => g.patch_len(),
            _ => 1,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Layer::Dense { inputs, outputs } if *inputs == 0 || *outputs == 0 => {
                Err(Error::shape("dense layer sizes must be positive"))
            }
            Layer::Conv(g) => g.validate(),
            Layer::MaxPool(g) => g.validate(),
            Layer::Relu { size: 0 } => Err(Error::shape("relu size must be positive")),
            _ => Ok(()),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv(_) => "conv",
            Layer::MaxPool(_) => "maxpool",
            Layer::Relu { .. } => "relu",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum NetworkSpec {
    FeedForward {
        layers: Vec<Layer>,
    },
    /// Optional per-step embedding, one LSTM layer from zero state, and a
    /// dense head on the final hidden state.
    Recurrent {
        step_input: usize,
        embedding: Vec<Layer>,
        hidden: usize,
        outputs: usize,
    },
}

fn push_dense(layers: &mut Vec<Layer>, inputs: usize, outputs: usize, relu: bool) {
    layers.push(Layer::Dense { inputs, outputs });
    if relu {
        layers.push(Layer::Relu { size: outputs });
    }
}

/// Two conv/relu/pool stages and the first dense layer, for a one-channel
/// `height x width` image.
fn lenet_trunk(height: usize, width: usize) -> Result<Vec<Layer>> {
    let c1 = ConvGeometry {
        in_channels: 1,
        out_channels: LENET_CONV1,
        kernel: LENET_KERNEL,
        in_height: height,
        in_width: width,
    };
    c1.validate()?;
    let p1 = PoolGeometry {
        channels: LENET_CONV1,
        in_height: c1.out_height(),
        in_width: c1.out_width(),
    };
    p1.validate()?;
    let c2 = ConvGeometry {
        in_channels: LENET_CONV1,
        out_channels: LENET_CONV2,
        kernel: LENET_KERNEL,
        in_height: p1.out_height(),
        in_width: p1.out_width(),
    };
    c2.validate()?;
    let p2 = PoolGeometry {
        channels: LENET_CONV2,
        in_height: c2.out_height(),
        in_width: c2.out_width(),
    };
    p2.validate()?;
    let mut layers = vec![
        Layer::Conv(c1),
        Layer::Relu { size: c1.output_len() },
        Layer::MaxPool(p1),
        Layer::Conv(c2),
        Layer::Relu { size: c2.output_len() },
        Layer::MaxPool(p2),
    ];
    push_dense(&mut layers, p2.output_len(), LENET_DENSE1, true);
    Ok(layers)
}

impl NetworkSpec {
    /// Dense stack with ReLU between layers and a linear output.
    pub fn mlp(input: usize, hidden: &[usize], outputs: usize) -> Self {
        let mut layers = Vec::new();
        let mut prev = input;
        for &h in hidden {
            push_dense(&mut layers, prev, h, true);
            prev = h;
        }
        push_dense(&mut layers, prev, outputs, false);
        NetworkSpec::FeedForward { layers }
    }

    /// LeNet classifier over a one-channel `height x width` mask.
    pub fn lenet(height: usize, width: usize, classes: usize) -> Result<Self> {
        let mut layers = lenet_trunk(height, width)?;
        push_dense(&mut layers, LENET_DENSE1, LENET_DENSE2, true);
        push_dense(&mut layers, LENET_DENSE2, classes, false);
        Ok(NetworkSpec::FeedForward { layers })
    }

    /// LeNet with the classifier removed and a `dim`-wide ReLU embedding in
    /// place of the second dense layer.
    pub fn lenet_embedding(height: usize, width: usize, dim: usize) -> Result<Vec<Layer>> {
        let mut layers = lenet_trunk(height, width)?;
        push_dense(&mut layers, LENET_DENSE1, dim, true);
        Ok(layers)
    }

    pub fn lstm(step_input: usize, hidden: usize, outputs: usize) -> Self {
        NetworkSpec::Recurrent {
            step_input,
            embedding: Vec::new(),
            hidden,
            outputs,
        }
    }

    pub fn lstm_with_embedding(embedding: Vec<Layer>, hidden: usize, outputs: usize) -> Result<Self> {
        let step_input = embedding
            .first()
            .map(Layer::input_len)
            .ok_or_else(|| Error::shape("embedding needs at least one layer"))?;
        Ok(NetworkSpec::Recurrent {
            step_input,
            embedding,
            hidden,
            outputs,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let chain = |layers: &[Layer]| -> Result<()> {
            for l in layers {
                l.validate()?;
            }
            for w in layers.windows(2) {
                if w[0].output_len() != w[1].input_len() {
                    return Err(Error::shape(format!(
                        "{} produces {} values but {} expects {}",
                        w[0].name(),
                        w[0].output_len(),
                        w[1].name(),
                        w[1].input_len()
                    )));
                }
            }
            Ok(())
        };
        match self {
            NetworkSpec::FeedForward { layers } => {
                if layers.is_empty() {
                    return Err(Error::shape("network has no layers"));
                }
                chain(layers)
            }
            NetworkSpec::Recurrent {
                step_input,
                embedding,
                hidden,
                outputs,
            } => {
                if *step_input == 0 || *hidden == 0 || *outputs == 0 {
                    return Err(Error::shape("recurrent sizes must be positive"));
                }
                chain(embedding)?;
                if let Some(first) = embedding.first() {
                    if first.input_len() != *step_input {
                        return Err(Error::shape("embedding input does not match step size"));
                    }
                }
                Ok(())
            }
        }
    }

    /// Values per sample (per step for recurrent networks).
    pub fn input_len(&self) -> usize {
        match self {
            NetworkSpec::FeedForward { layers } => layers[0].input_len(),
            NetworkSpec::Recurrent { step_input, .. } => *step_input,
        }
    }

    pub fn output_len(&self) -> usize {
        match self {
            NetworkSpec::FeedForward { layers } => layers.last().map_or(0, Layer::output_len),
            NetworkSpec::Recurrent { outputs, .. } => *outputs,
        }
    }

    pub fn is_recurrent(&self) -> bool {
        matches!(self, NetworkSpec::Recurrent { .. })
    }

    fn lstm_input(&self) -> usize {
        match self {
            NetworkSpec::Recurrent {
                step_input, embedding, ..
            } => embedding.last().map_or(*step_input, Layer::output_len),
            _ => 0,
        }
    }

    /// Named parameter ranges in flat layout order, with the init bound of each.
    pub fn param_blocks(&self) -> Vec<ParamBlock> {
        let mut blocks = Vec::new();
        let mut off = 0;
        let mut push = |name: String, len: usize, fan_in: usize| {
            if len > 0 {
                blocks.push(ParamBlock {
                    name,
                    range: off..off + len,
                    fan_in,
                });
                off += len;
            }
        };
        let layers = match self {
            NetworkSpec::FeedForward { layers } => layers,
            NetworkSpec::Recurrent { embedding, .. } => embedding,
        };
        for (i, l) in layers.iter().enumerate() {
            push(format!("{i}.{}.weight", l.name()), l.weight_len(), l.fan_in());
            push(format!("{i}.{}.bias", l.name()), l.bias_len(), l.fan_in());
        }
        if let NetworkSpec::Recurrent { hidden, outputs, .. } = self {
            let d = self.lstm_input();
            push("lstm.w".into(), 4 * hidden * d, *hidden);
            push("lstm.u".into(), 4 * hidden * hidden, *hidden);
            push("lstm.b".into(), 4 * hidden, *hidden);
            push("head.weight".into(), outputs * hidden, *hidden);
            push("head.bias".into(), *outputs, *hidden);
        }
        blocks
    }

    pub fn param_count(&self) -> usize {
        self.param_blocks().last().map_or(0, |b| b.range.end)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamBlock {
    pub name: String,
    pub range: Range<usize>,
    pub fan_in: usize,
}

/// A batch of inputs: one row per sample, or one tensor per time step.
#[derive(Debug, Clone, PartialEq)]
pub enum Batch<T> {
    Flat(Tensor<T>),
    Sequence(Vec<Tensor<T>>),
}

impl<T: Scalar> Batch<T> {
    pub fn rows(&self) -> usize {
        match self {
            Batch::Flat(t) => t.rows(),
            Batch::Sequence(s) => s.first().map_or(0, Tensor::rows),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Mse,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets<T> {
    Classes(Vec<usize>),
    Values(Tensor<T>),
}

/// Batch-mean loss of `out` and its gradient.
pub fn batch_loss<T: Scalar>(out: &Tensor<T>, targets: &Targets<T>, kind: LossKind) -> Result<(T, Tensor<T>)> {
    let rows = out.rows();
    let mut grad = Tensor::zeros(out.shape().to_vec());
    match (kind, targets) {
        (LossKind::CrossEntropy, Targets::Classes(labels)) => {
            if labels.len() != rows {
                return Err(Error::shape(format!("{} labels for {rows} rows", labels.len())));
            }
            let inv = T::one() / T::lit(rows as f64);
            let mut total = T::zero();
            for (r, &l) in labels.iter().enumerate() {
                let (loss, g) = ops::cross_entropy(out.row(r), l)?;
                total += loss;
                for (d, v) in grad.row_mut(r).iter_mut().zip(g) {
                    *d = v * inv;
                }
            }
            Ok((total * inv, grad))
        }
        (LossKind::Mse, Targets::Values(t)) => {
            if t.len() != out.len() {
                return Err(Error::shape("regression targets do not match outputs"));
            }
            let (loss, g) = ops::mse(out.data(), t.data())?;
            grad.data_mut().copy_from_slice(&g);
            Ok((loss, grad))
        }
        _ => Err(Error::Invalid("loss kind does not match target type".into())),
    }
}

pub(crate) enum LayerCache<T> {
    Input(Tensor<T>),
    Argmax(Vec<u32>),
    Output(Tensor<T>),
}

pub(crate) fn layer_forward<T: Scalar>(l: &Layer, p: &[T], x: &Tensor<T>) -> Result<(Tensor<T>, LayerCache<T>)> {
    let (w, b) = p.split_at(l.weight_len());
    Ok(match l {
        Layer::Dense { outputs, .. } => (ops::dense_forward(x, w, b, *outputs)?, LayerCache::Input(x.clone())),
        Layer::Conv(g) => (ops::conv_forward(x, w, b, g)?.flatten_rows(), LayerCache::Input(x.clone())),
        Layer::MaxPool(g) => {
            let (y, arg) = ops::maxpool_forward(x, g)?;
            (y.flatten_rows(), LayerCache::Argmax(arg))
        }
        Layer::Relu { .. } => {
            let y = ops::relu_forward(x);
            (y.clone(), LayerCache::Output(y))
        }
    })
}

fn layer_backward<T: Scalar>(l: &Layer, p: &[T], cache: &LayerCache<T>, gy: &Tensor<T>, g: &mut [T]) -> Result<Tensor<T>> {
    let w = &p[..l.weight_len()];
    let (gw, gb) = g.split_at_mut(l.weight_len());
    match (l, cache) {
        (Layer::Dense { .. }, LayerCache::Input(x)) => ops::dense_backward_into(x, w, gy, gw, gb),
        (Layer::Conv(geo), LayerCache::Input(x)) => Ok(ops::conv_backward_into(x, w, gy, geo, gw, gb)?.flatten_rows()),
        (Layer::MaxPool(geo), LayerCache::Argmax(a)) => Ok(ops::maxpool_backward(gy, a, geo)?.flatten_rows()),
        (Layer::Relu { .. }, LayerCache::Output(y)) => ops::relu_backward(y, gy),
        _ => Err(Error::shape("layer cache does not match layer")),
    }
}

pub(crate) fn stack_forward<T: Scalar>(
    layers: &[Layer],
    params: &[T],
    x: Tensor<T>,
    mut caches: Option<&mut Vec<LayerCache<T>>>,
) -> Result<Tensor<T>> {
    let mut x = x.flatten_rows();
    let mut off = 0;
    for l in layers {
        let n = l.param_count();
        let (y, c) = layer_forward(l, &params[off..off + n], &x)?;
        if let Some(cs) = caches.as_deref_mut() {
            cs.push(c);
        }
        off += n;
        x = y;
    }
    Ok(x)
}

fn stack_backward<T: Scalar>(
    layers: &[Layer],
    params: &[T],
    caches: &[LayerCache<T>],
    mut gy: Tensor<T>,
    grads: &mut [T],
) -> Result<Tensor<T>> {
    let mut end = layers.iter().map(Layer::param_count).sum::<usize>();
    for (l, c) in layers.iter().zip(caches).rev() {
        let start = end - l.param_count();
        gy = layer_backward(l, &params[start..end], c, &gy, &mut grads[start..end])?;
        end = start;
    }
    Ok(gy)
}

/// Stacks steps into one `(steps * B) x D` tensor, step-major.
pub(crate) fn concat_steps<T: Scalar>(steps: &[Tensor<T>]) -> Result<Tensor<T>> {
    let rows = steps[0].rows();
    let cols = steps[0].row_len();
    let mut data = Vec::with_capacity(steps.len() * rows * cols);
    for s in steps {
        if s.rows() != rows || s.row_len() != cols {
            return Err(Error::shape("sequence steps differ in shape"));
        }
        data.extend_from_slice(s.data());
    }
    Tensor::matrix(steps.len() * rows, cols, data)
}

pub(crate) fn split_steps<T: Scalar>(x: &Tensor<T>, steps: usize) -> Result<Vec<Tensor<T>>> {
    let rows = x.rows() / steps;
    let cols = x.row_len();
    (0..steps)
        .map(|t| Tensor::matrix(rows, cols, x.data()[t * rows * cols..(t + 1) * rows * cols].to_vec()))
        .collect()
}

enum ForwardCache<T> {
    FeedForward(Vec<LayerCache<T>>),
    Recurrent {
        embedding: Vec<LayerCache<T>>,
        lstm: LstmCache<T>,
        last_hidden: Tensor<T>,
    },
}

/// Offsets of the recurrent parameter groups.
pub(crate) struct RecurrentLayout {
    pub embedding: Range<usize>,
    pub lstm: Range<usize>,
    pub head: Range<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    spec: NetworkSpec,
    params: Vec<T>,
}

impl<T: Scalar> Network<T> {
    /// Uniform init in `+-1/sqrt(fan_in)` per block.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![T::zero(); spec.param_count()];
        for b in spec.param_blocks() {
            let a = 1.0 / (b.fan_in as f64).sqrt();
            for v in &mut params[b.range] {
                *v = T::lit(rng.gen_range(-a..a));
            }
        }
        Ok(Self { spec, params })
    }

    pub fn from_params(spec: NetworkSpec, params: Vec<T>) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.param_count() {
            return Err(Error::shape(format!(
                "spec needs {} parameters, got {}",
                spec.param_count(),
                params.len()
            )));
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub(crate) fn recurrent_layout(&self) -> Option<RecurrentLayout> {
        let NetworkSpec::Recurrent {
            embedding,
            hidden,
            outputs,
            ..
        } = &self.spec
        else {
            return None;
        };
        let e = embedding.iter().map(Layer::param_count).sum::<usize>();
        let l = LstmParams::<T>::param_count(self.spec.lstm_input(), *hidden);
        Some(RecurrentLayout {
            embedding: 0..e,
            lstm: e..e + l,
            head: e + l..e + l + hidden * outputs + outputs,
        })
    }

    fn check_input(&self, input: &Batch<T>) -> Result<()> {
        let want = self.spec.input_len();
        match (input, self.spec.is_recurrent()) {
            (Batch::Flat(x), false) if x.row_len() == want && x.rows() > 0 => Ok(()),
            (Batch::Sequence(s), true) if !s.is_empty() && s.iter().all(|t| t.row_len() == want && t.rows() > 0) => Ok(()),
            (Batch::Flat(_), true) => Err(Error::shape("recurrent network needs a sequence batch")),
            (Batch::Sequence(_), false) => Err(Error::shape("feed-forward network needs a flat batch")),
            _ => Err(Error::shape(format!("network expects {want} input values per row or step"))),
        }
    }

    fn run(&self, input: &Batch<T>, keep: bool) -> Result<(Tensor<T>, Option<ForwardCache<T>>)> {
        self.check_input(input)?;
        match (&self.spec, input) {
            (NetworkSpec::FeedForward { layers }, Batch::Flat(x)) => {
                let mut caches = Vec::new();
                let y = stack_forward(layers, &self.params, x.clone(), keep.then_some(&mut caches))?;
                Ok((y, keep.then_some(ForwardCache::FeedForward(caches))))
            }
            (
                NetworkSpec::Recurrent {
                    embedding,
                    hidden,
                    outputs,
                    ..
                },
                Batch::Sequence(steps),
            ) => {
                let lay = self.recurrent_layout().unwrap();
                let mut ecache = Vec::new();
                let embedded = if embedding.is_empty() {
                    steps.clone()
                } else {
                    let x = concat_steps(steps)?;
                    let e = stack_forward(embedding, &self.params[lay.embedding.clone()], x, keep.then_some(&mut ecache))?;
                    split_steps(&e, steps.len())?
                };
                let lp = LstmParams::from_flat(self.spec.lstm_input(), *hidden, &self.params[lay.lstm.clone()])?;
                let (h, lcache) = lstm_forward(&embedded, &lp)?;
                let (hw, hb) = self.params[lay.head].split_at(hidden * outputs);
                let y = ops::dense_forward(&h, hw, hb, *outputs)?;
                Ok((
                    y,
                    keep.then_some(ForwardCache::Recurrent {
                        embedding: ecache,
                        lstm: lcache,
                        last_hidden: h,
                    }),
                ))
            }
            _ => unreachable!("input kind checked above"),
        }
    }

    /// Raw outputs (logits or regression values), one row per sample.
    pub fn forward(&self, input: &Batch<T>) -> Result<Tensor<T>> {
        let (y, _) = self.run(input, false)?;
        if !y.all_finite() {
            return Err(Error::NonFinite("network output".into()));
        }
        Ok(y)
    }

    pub fn loss(&self, input: &Batch<T>, targets: &Targets<T>, kind: LossKind) -> Result<T> {
        let y = self.forward(input)?;
        Ok(batch_loss(&y, targets, kind)?.0)
    }

    pub fn loss_and_grad(&self, input: &Batch<T>, targets: &Targets<T>, kind: LossKind) -> Result<(T, Vec<T>)> {
        let (y, cache) = self.run(input, true)?;
        let (loss, gy) = batch_loss(&y, targets, kind)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads = vec![T::zero(); self.params.len()];
        match (&self.spec, cache.unwrap()) {
            (NetworkSpec::FeedForward { layers }, ForwardCache::FeedForward(caches)) => {
                stack_backward(layers, &self.params, &caches, gy, &mut grads)?;
            }
            (
                NetworkSpec::Recurrent {
                    embedding,
                    hidden,
                    outputs,
                    ..
                },
                ForwardCache::Recurrent {
                    embedding: ecache,
                    lstm,
                    last_hidden,
                },
            ) => {
                let lay = self.recurrent_layout().unwrap();
                let (hw, _) = self.params[lay.head.clone()].split_at(hidden * outputs);
                let (ghw, ghb) = grads[lay.head.clone()].split_at_mut(hidden * outputs);
                let gh = ops::dense_backward_into(&last_hidden, hw, &gy, ghw, ghb)?;
                let lp = LstmParams::from_flat(self.spec.lstm_input(), *hidden, &self.params[lay.lstm.clone()])?;
                let gsteps = lstm_backward(&lstm, &lp, &gh, &mut grads[lay.lstm.clone()])?;
                if !embedding.is_empty() {
                    let g = concat_steps(&gsteps)?;
                    stack_backward(
                        embedding,
                        &self.params[lay.embedding.clone()],
                        &ecache,
                        g,
                        &mut grads[lay.embedding.clone()],
                    )?;
                }
            }
            _ => unreachable!("cache kind follows the spec"),
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient".into()));
        }
        Ok((loss, grads))
    }
}
