//! Transmitter identification from receive power (or position), nearest
//! neighbour association across a window, and color gating.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::channel::{optimal_beam, GlobalPowerVector};
use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::nn::{self, AdamState, Batch, Checkpoint, LossCurve, Network, NetworkSpec, Samples, Targets, Tensor, TrainSpec};
use crate::scalar::Scalar;
use crate::scene::Frame;
use crate::semantics::{MaskGrid, SemanticMessage};

/// Color gate radius in RGB units.
pub const COLOR_EPSILON: f64 = 20.0;
/// Hidden widths of both identifier networks.
pub const IDENT_HIDDEN: [usize; 2] = [512, 512];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdentInput {
    /// The serving array's Q receive powers.
    Power,
    /// Transmitter ground position (x, y) in meters.
    Position,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentSample {
    pub timestamp: u32,
    pub power: Vec<f64>,
    pub position: Vec2,
    pub center: [f64; 2],
}

impl IdentSample {
    pub fn input(&self, kind: IdentInput) -> Vec<f64> {
        match kind {
            IdentInput::Power => self.power.clone(),
            IdentInput::Position => vec![self.position.x, self.position.y],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentDataset {
    pub node: usize,
    pub samples: Vec<IdentSample>,
}

/// Pairs each frame whose message holds exactly one detection, the
/// transmitter, with that frame's power slice for the node's array.
///
/// `messages` must still carry truth ids.
pub fn build_ident_dataset(
    frames: &[Frame],
    messages: &[SemanticMessage],
    powers: &[GlobalPowerVector<f64>],
    node: usize,
) -> Result<IdentDataset> {
    if frames.len() != messages.len() || frames.len() != powers.len() {
        return Err(Error::shape("frames, messages and power vectors must align"));
    }
    let mut samples = Vec::new();
    for ((f, m), p) in frames.iter().zip(messages).zip(powers) {
        let Some(tx) = f.transmitter() else { continue };
        if m.len() != 1 || m.detections[0].truth_id != Some(tx.id) {
            continue;
        }
        samples.push(IdentSample {
            timestamp: f.timestamp,
            power: p.ula(node).to_vec(),
            position: tx.position,
            center: m.detections[0].bbox.center(),
        });
    }
    if samples.is_empty() {
        return Err(Error::Empty(format!("no single-transmitter frames for node {node}")));
    }
    Ok(IdentDataset { node, samples })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum InputNorm {
    /// Divide by the vector's maximum; an all-zero vector stays zero.
    PerSampleMax,
    /// `(x - min) / (max - min)` per component.
    Range { min: Vec<f64>, max: Vec<f64> },
}

impl InputNorm {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        match self {
            InputNorm::PerSampleMax => {
                let m = x.iter().copied().fold(0.0, f64::max);
                if m > 0.0 {
                    x.iter().map(|v| v / m).collect()
                } else {
                    x.to_vec()
                }
            }
            InputNorm::Range { min, max } => x
                .iter()
                .zip(min.iter().zip(max))
                .map(|(v, (lo, hi))| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IdentMeta {
    kind: IdentInput,
    norm: InputNorm,
    image: [f64; 2],
}

/// Regressor from power vector or position to the transmitter's bbox center.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentifierModel {
    pub kind: IdentInput,
    pub network: Network<f64>,
    pub norm: InputNorm,
    /// Image width and height in pixels; outputs are trained in units of these.
    pub image: [f64; 2],
    pub train_spec: Option<TrainSpec>,
}

impl IdentifierModel {
    pub fn input_len(&self) -> usize {
        self.network.spec().input_len()
    }

    fn raw_output(&self, inputs: &[Vec<f64>]) -> Result<Tensor<f64>> {
        let n = self.input_len();
        if let Some(bad) = inputs.iter().find(|x| x.len() != n) {
            return Err(Error::shape(format!("identifier expects {n} inputs, got {}", bad.len())));
        }
        let rows: Vec<Vec<f64>> = inputs.iter().map(|x| self.norm.apply(x)).collect();
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        self.network.forward(&Batch::Flat(Tensor::stack(&refs)?))
    }

    /// Predicted centers in pixels, clipped to the image.
    pub fn predict_centers(&self, inputs: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let y = self.raw_output(inputs)?;
        Ok((0..y.rows())
            .map(|r| {
                let o = y.row(r);
                [
                    (o[0] * self.image[0]).clamp(0.0, self.image[0]),
                    (o[1] * self.image[1]).clamp(0.0, self.image[1]),
                ]
            })
            .collect())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint<f64>> {
        let meta = IdentMeta {
            kind: self.kind,
            norm: self.norm.clone(),
            image: self.image,
        };
        Ok(Checkpoint {
            network: self.network.clone(),
            train_spec: self.train_spec.clone(),
            optimizer: None,
            metadata: serde_json::to_string(&meta).map_err(|e| Error::format(e.to_string()))?,
        })
    }

    pub fn from_checkpoint(c: Checkpoint<f64>) -> Result<Self> {
        let meta: IdentMeta =
            serde_json::from_str(&c.metadata).map_err(|e| Error::format(format!("identifier metadata: {e}")))?;
        Ok(Self {
            kind: meta.kind,
            network: c.network,
            norm: meta.norm,
            image: meta.image,
            train_spec: c.train_spec,
        })
    }
}

pub fn predict_center(model: &IdentifierModel, input: &[f64]) -> Result<[f64; 2]> {
    Ok(model.predict_centers(&[input.to_vec()])?[0])
}

/// Trains a 2x512 MSE regressor on the dataset. `image` is the camera's
/// (width, height) in pixels.
pub fn train_identifier(
    ds: &IdentDataset,
    kind: IdentInput,
    spec: &TrainSpec,
    image: [f64; 2],
) -> Result<(IdentifierModel, LossCurve)> {
    if ds.samples.is_empty() {
        return Err(Error::Empty("identifier dataset is empty".into()));
    }
    if spec.loss != nn::LossKind::Mse {
        return Err(Error::config("identifier training uses the MSE loss"));
    }
    let raw: Vec<Vec<f64>> = ds.samples.iter().map(|s| s.input(kind)).collect();
    let width = raw[0].len();
    if width == 0 || raw.iter().any(|r| r.len() != width) {
        return Err(Error::shape("identifier inputs must share a nonzero length"));
    }
    let norm = match kind {
        IdentInput::Power => InputNorm::PerSampleMax,
        IdentInput::Position => {
            let mut min = vec![f64::INFINITY; width];
            let mut max = vec![f64::NEG_INFINITY; width];
            for r in &raw {
                for (i, &v) in r.iter().enumerate() {
                    min[i] = min[i].min(v);
                    max[i] = max[i].max(v);
                }
            }
            InputNorm::Range { min, max }
        }
    };
    let inputs: Vec<Vec<f64>> = raw.iter().map(|r| norm.apply(r)).collect();
    let targets: Vec<f64> = ds
        .samples
        .iter()
        .flat_map(|s| [s.center[0] / image[0], s.center[1] / image[1]])
        .collect();
    let data = Samples::flat(&inputs, Targets::Values(Tensor::matrix(inputs.len(), 2, targets)?))?;
    let mut network = Network::new(NetworkSpec::mlp(width, &IDENT_HIDDEN, 2), spec.seed)?;
    let mut opt = AdamState::new(network.param_count());
    let curve = nn::train(&mut network, &mut opt, spec, &data, None)?;
    Ok((
        IdentifierModel {
            kind,
            network,
            norm,
            image,
            train_spec: Some(spec.clone()),
        },
        curve,
    ))
}

fn nearest(center: [f64; 2], msg: &SemanticMessage, candidates: impl IntoIterator<Item = usize>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for i in candidates {
        let d = msg.detections[i].bbox.center_distance(center);
        if best.map_or(true, |(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best
}

/// Detection whose bbox center is closest to `center`; ties go to the lower index.
pub fn match_detection(center: [f64; 2], msg: &SemanticMessage) -> Result<usize> {
    nearest(center, msg, 0..msg.len()).map(|(i, _)| i).ok_or(Error::NoCandidates)
}

pub fn color_distance(a: [u8; 3], b: [u8; 3]) -> f64 {
    a.iter()
        .zip(&b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Indices of detections within `eps` of `rho_tx` in RGB space. If none
/// qualify, every index is returned.
pub fn color_filter(rho_tx: [u8; 3], msg: &SemanticMessage, eps: f64) -> Vec<usize> {
    let kept: Vec<usize> = (0..msg.len())
        .filter(|&i| color_distance(rho_tx, msg.detections[i].color) <= eps)
        .collect();
    if kept.is_empty() {
        (0..msg.len()).collect()
    } else {
        kept
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackMode {
    /// Nearest bbox center over all detections.
    BBox,
    /// Color gate first, then nearest bbox center.
    Mask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackState {
    pub index: usize,
    pub center: [f64; 2],
    pub mask: MaskGrid,
    pub color: [u8; 3],
    pub frame: usize,
}

impl TrackState {
    fn at(msg: &SemanticMessage, index: usize, frame: usize) -> Self {
        let d = &msg.detections[index];
        Self {
            index,
            center: d.bbox.center(),
            mask: d.mask.clone(),
            color: d.color,
            frame,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackStep {
    pub frame: usize,
    pub index: usize,
    /// Center distance from the previous track position (0 at the first frame).
    pub distance: f64,
    pub candidates: usize,
}

/// Follows the detection at `first` in `messages[0]` through the remaining
/// messages. Returns one step per message.
pub fn track_sequence(first: usize, messages: &[SemanticMessage], mode: TrackMode, eps: f64) -> Result<Vec<TrackStep>> {
    let Some(m0) = messages.first() else {
        return Err(Error::Empty("no frames to track".into()));
    };
    if first >= m0.len() {
        return Err(Error::Invalid(format!("first index {first} out of range for {} detections", m0.len())));
    }
    let mut state = TrackState::at(m0, first, 0);
    let mut steps = vec![TrackStep {
        frame: 0,
        index: first,
        distance: 0.0,
        candidates: m0.len(),
    }];
    for (t, msg) in messages.iter().enumerate().skip(1) {
        if msg.is_empty() {
            return Err(Error::NoCandidates);
        }
        let cands = match mode {
            TrackMode::BBox => (0..msg.len()).collect(),
            TrackMode::Mask => color_filter(state.color, msg, eps),
        };
        let (index, distance) = nearest(state.center, msg, cands.iter().copied()).ok_or(Error::NoCandidates)?;
        state = TrackState::at(msg, index, t);
        steps.push(TrackStep {
            frame: t,
            index,
            distance,
            candidates: cands.len(),
        });
    }
    Ok(steps)
}

/// `frame,index,truth_index,distance` rows; `truth` holds the transmitter's
/// index per frame when known.
pub fn trace_csv(steps: &[TrackStep], truth: &[Option<usize>]) -> String {
    let mut s = String::from("frame,index,truth_index,distance\n");
    for (i, st) in steps.iter().enumerate() {
        let t = truth.get(i).copied().flatten().map_or(String::new(), |v| v.to_string());
        let _ = writeln!(s, "{},{},{},{:.6}", st.frame, st.index, t, st.distance);
    }
    s
}

/// Sensing source for the optimal array: 0 is the basestation camera, 1 and
/// 2 the distributed nodes.
pub fn select_node<T: Scalar>(p: &GlobalPowerVector<T>) -> Result<usize> {
    Ok(optimal_beam(p)?.ula)
}
