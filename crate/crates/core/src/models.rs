//! Beam predictors over tracked semantics: two single-instance baselines
//! and two sequence models.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::SequenceSample;
use crate::error::{Error, Result};
use crate::nn::{self, AdamState, Batch, Checkpoint, LossCurve, LossKind, Network, NetworkSpec, Samples, Targets, Tensor, TrainSpec};

/// Hidden width of the bbox-FCNN baseline.
pub const FCNN_HIDDEN: [usize; 2] = [512, 512];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BeamModelKind {
    /// Last-frame bbox center through a 2x512 MLP.
    #[serde(rename = "bbox-fcnn")]
    BBoxFcnn,
    /// Last-frame mask through LeNet.
    #[serde(rename = "mask-lenet")]
    MaskLenet,
    /// Per-frame normalized `[xc, yc, w, h]` through an LSTM.
    #[serde(rename = "bbox-lstm")]
    BBoxLstm,
    /// Per-frame mask through a LeNet embedding, then an LSTM.
    #[serde(rename = "mask-lstm")]
    MaskLstm,
}

impl BeamModelKind {
    pub const ALL: [BeamModelKind; 4] = [Self::BBoxFcnn, Self::MaskLenet, Self::BBoxLstm, Self::MaskLstm];

    pub fn name(self) -> &'static str {
        match self {
            Self::BBoxFcnn => "bbox-fcnn",
            Self::MaskLenet => "mask-lenet",
            Self::BBoxLstm => "bbox-lstm",
            Self::MaskLstm => "mask-lstm",
        }
    }

    pub fn is_sequence(self) -> bool {
        matches!(self, Self::BBoxLstm | Self::MaskLstm)
    }

    pub fn uses_mask(self) -> bool {
        matches!(self, Self::MaskLenet | Self::MaskLstm)
    }

    /// Default training schedule for this model.
    pub fn default_train_spec(self) -> TrainSpec {
        match self {
            Self::BBoxFcnn => TrainSpec::bbox_fcnn(),
            Self::MaskLenet => TrainSpec::mask_lenet(),
            Self::BBoxLstm => TrainSpec::bbox_lstm(),
            Self::MaskLstm => TrainSpec::mask_lstm(),
        }
    }
}

impl std::fmt::Display for BeamModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BeamModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown model `{s}` (expected bbox-fcnn, mask-lenet, bbox-lstm or mask-lstm)")))
    }
}

/// Shape information fixed at training time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamInputSpec {
    /// Image width and height in pixels; bbox inputs are divided by these.
    pub image: [f64; 2],
    /// Mask grid width and height.
    pub mask: [usize; 2],
    /// Window length for the sequence models.
    pub steps: usize,
    pub beams: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamModel {
    pub kind: BeamModelKind,
    pub input: BeamInputSpec,
    pub network: Network<f64>,
    pub train_spec: Option<TrainSpec>,
}

#[derive(Serialize, Deserialize)]
struct BeamMeta {
    kind: BeamModelKind,
    input: BeamInputSpec,
}

pub fn network_spec(kind: BeamModelKind, input: &BeamInputSpec) -> Result<NetworkSpec> {
    let [mw, mh] = input.mask;
    let q = input.beams;
    Ok(match kind {
        BeamModelKind::BBoxFcnn => NetworkSpec::mlp(2, &FCNN_HIDDEN, q),
        BeamModelKind::MaskLenet => NetworkSpec::lenet(mh, mw, q)?,
        BeamModelKind::BBoxLstm => NetworkSpec::lstm(4, nn::DEFAULT_HIDDEN, q),
        BeamModelKind::MaskLstm => NetworkSpec::lstm_with_embedding(
            NetworkSpec::lenet_embedding(mh, mw, nn::DEFAULT_HIDDEN)?,
            nn::DEFAULT_HIDDEN,
            q,
        )?,
    })
}

fn bbox_vec(s: &SequenceSample, t: usize, input: &BeamInputSpec) -> [f64; 4] {
    let b = &s.bbox_track[t];
    [b.xc / input.image[0], b.yc / input.image[1], b.w / input.image[0], b.h / input.image[1]]
}

/// Per-step network inputs for one sample; a single step for the baselines.
pub fn features(kind: BeamModelKind, s: &SequenceSample, input: &BeamInputSpec) -> Result<Vec<Vec<f64>>> {
    let r = s.steps();
    if r == 0 {
        return Err(Error::shape("sample has no frames"));
    }
    if kind.is_sequence() && r != input.steps {
        return Err(Error::shape(format!("{kind} expects {} frames, got {r}", input.steps)));
    }
    let mask = |t: usize| -> Result<Vec<f64>> {
        let m = &s.mask_track[t].mask;
        if [m.width(), m.height()] != input.mask {
            return Err(Error::shape(format!(
                "mask is {}x{}, model expects {}x{}",
                m.width(),
                m.height(),
                input.mask[0],
                input.mask[1]
            )));
        }
        Ok(m.to_unit_floats())
    };
    Ok(match kind {
        BeamModelKind::BBoxFcnn => vec![bbox_vec(s, r - 1, input)[..2].to_vec()],
        BeamModelKind::MaskLenet => vec![mask(r - 1)?],
        BeamModelKind::BBoxLstm => (0..r).map(|t| bbox_vec(s, t, input).to_vec()).collect(),
        BeamModelKind::MaskLstm => (0..r).map(mask).collect::<Result<_>>()?,
    })
}

fn to_samples(kind: BeamModelKind, data: &[SequenceSample], input: &BeamInputSpec) -> Result<Samples<f64>> {
    let feats: Vec<Vec<Vec<f64>>> = data.iter().map(|s| features(kind, s, input)).collect::<Result<_>>()?;
    let mut labels = Vec::with_capacity(data.len());
    for s in data {
        if s.beams != input.beams || s.label >= input.beams {
            return Err(Error::shape(format!("sample {} has {} beams, model has {}", s.id, s.beams, input.beams)));
        }
        labels.push(s.label);
    }
    let targets = Targets::Classes(labels);
    if kind.is_sequence() {
        Samples::sequences(&feats, targets)
    } else {
        let rows: Vec<Vec<f64>> = feats.into_iter().map(|mut f| f.remove(0)).collect();
        Samples::flat(&rows, targets)
    }
}

/// Cross-entropy training of one beam model. The network is initialized from
/// `spec.seed`.
pub fn train_beam_model(
    kind: BeamModelKind,
    train: &[SequenceSample],
    val: &[SequenceSample],
    spec: &TrainSpec,
    image: [f64; 2],
) -> Result<(BeamModel, LossCurve)> {
    let first = train.first().ok_or_else(|| Error::Empty("training split is empty".into()))?;
    if spec.loss != LossKind::CrossEntropy {
        return Err(Error::config("beam models use the cross-entropy loss"));
    }
    let m = &first.mask_track[0].mask;
    let input = BeamInputSpec {
        image,
        mask: [m.width(), m.height()],
        steps: first.steps(),
        beams: first.beams,
    };
    let data = to_samples(kind, train, &input)?;
    let val = if val.is_empty() { None } else { Some(to_samples(kind, val, &input)?) };
    let mut network = Network::new(network_spec(kind, &input)?, spec.seed)?;
    let mut opt = AdamState::new(network.param_count());
    let curve = nn::train(&mut network, &mut opt, spec, &data, val.as_ref())?;
    Ok((
        BeamModel {
            kind,
            input,
            network,
            train_spec: Some(spec.clone()),
        },
        curve,
    ))
}

impl BeamModel {
    pub fn new(kind: BeamModelKind, input: BeamInputSpec, seed: u64) -> Result<Self> {
        Ok(Self {
            kind,
            input,
            network: Network::new(network_spec(kind, &input)?, seed)?,
            train_spec: None,
        })
    }

    /// Score vectors for many samples, batched.
    pub fn predict(&self, samples: &[SequenceSample]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(256) {
            let feats: Vec<Vec<Vec<f64>>> = chunk
                .iter()
                .map(|s| features(self.kind, s, &self.input))
                .collect::<Result<_>>()?;
            let batch = if self.kind.is_sequence() {
                let steps = (0..self.input.steps)
                    .map(|t| {
                        let rows: Vec<&[f64]> = feats.iter().map(|f| f[t].as_slice()).collect();
                        Tensor::stack(&rows)
                    })
                    .collect::<Result<_>>()?;
                Batch::Sequence(steps)
            } else {
                let rows: Vec<&[f64]> = feats.iter().map(|f| f[0].as_slice()).collect();
                Batch::Flat(Tensor::stack(&rows)?)
            };
            let y = self.network.forward(&batch)?;
            out.extend((0..y.rows()).map(|r| y.row(r).to_vec()));
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint<f64>> {
        let meta = BeamMeta {
            kind: self.kind,
            input: self.input,
        };
        Ok(Checkpoint {
            network: self.network.clone(),
            train_spec: self.train_spec.clone(),
            optimizer: None,
            metadata: serde_json::to_string(&meta).map_err(|e| Error::format(e.to_string()))?,
        })
    }

    pub fn from_checkpoint(c: Checkpoint<f64>) -> Result<Self> {
        let meta: BeamMeta =
            serde_json::from_str(&c.metadata).map_err(|e| Error::format(format!("beam model metadata: {e}")))?;
        if c.network.spec() != &network_spec(meta.kind, &meta.input)? {
            return Err(Error::format(format!("checkpoint network does not match a {} model", meta.kind)));
        }
        Ok(Self {
            kind: meta.kind,
            input: meta.input,
            network: c.network,
            train_spec: c.train_spec,
        })
    }
}

/// Scores over the `Q` beams of the model's array. Sequence models need
/// exactly the trained window length; baselines read the last frame.
pub fn predict_beam(model: &BeamModel, sample: &SequenceSample) -> Result<Vec<f64>> {
    Ok(model.predict(std::slice::from_ref(sample))?.remove(0))
}

/// Indices of the `k` largest scores, descending; ties go to the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::Invalid(format!("k = {k} outside 1..={}", scores.len())));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// `id,label,top1,top2,top3` rows, plus `s0..s{Q-1}` when `with_scores`.
pub fn predictions_csv(samples: &[SequenceSample], scores: &[Vec<f64>], with_scores: bool) -> Result<String> {
    if samples.len() != scores.len() {
        return Err(Error::shape("one score vector per sample is required"));
    }
    let q = scores.first().map_or(0, Vec::len);
    let mut s = String::from("id,label,top1,top2,top3");
    if with_scores {
        for i in 0..q {
            let _ = write!(s, ",s{i}");
        }
    }
    s.push('\n');
    for (smp, sc) in samples.iter().zip(scores) {
        let t = top_k(sc, 3.min(sc.len()))?;
        let cell = |i: usize| t.get(i).map_or(String::new(), |v| v.to_string());
        let _ = write!(s, "{},{},{},{},{}", smp.id, smp.label, cell(0), cell(1), cell(2));
        if with_scores {
            for v in sc {
                let _ = write!(s, ",{v:.9e}");
            }
        }
        s.push('\n');
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::TrackedObject;
    use crate::geometry::Vec2;
    use crate::scene::BBox;
    use crate::semantics::MaskGrid;
    use proptest::prelude::*;

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k(&[0.1, 0.9, 0.3], 2).unwrap(), vec![1, 2]);
        assert_eq!(top_k(&[0.5; 6], 3).unwrap(), vec![0, 1, 2]);
        let mut p = top_k(&[3.0, -1.0, 2.0, 2.0], 4).unwrap();
        assert_eq!(p, vec![0, 2, 3, 1]);
        p.sort_unstable();
        assert_eq!(p, vec![0, 1, 2, 3]);
        assert!(top_k(&[1.0, 2.0], 0).is_err());
        assert!(top_k(&[1.0, 2.0], 3).is_err());
    }

    proptest! {
        #[test]
        fn top_k_nesting_and_shift(scores in prop::collection::vec(-5i32..5, 1..20), c in -100.0f64..100.0) {
            let s: Vec<f64> = scores.iter().map(|&v| v as f64 * 0.5).collect();
            let shifted: Vec<f64> = s.iter().map(|v| v + c).collect();
            for k in 1..=s.len() {
                let a = top_k(&s, k).unwrap();
                prop_assert_eq!(&a, &top_k(&shifted, k).unwrap());
                if k < s.len() {
                    let b = top_k(&s, k + 1).unwrap();
                    prop_assert_eq!(&b[..k], &a[..]);
                }
            }
        }
    }

    pub(crate) fn sample(id: u64, centers: &[[f64; 2]], label: usize, q: usize) -> SequenceSample {
        let obj = |c: [f64; 2]| {
            let mut m = MaskGrid::new(16, 16).unwrap();
            let (cx, cy) = (((c[0] / 80.0) as usize).min(15), ((c[1] / 45.0) as usize).min(15));
            for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                m.set((cx + dx).min(15), (cy + dy).min(15), true);
            }
            TrackedObject {
                bbox: BBox::new(c[0], c[1], 40.0, 30.0),
                mask: m,
                color: [0; 3],
            }
        };
        let track: Vec<_> = centers.iter().map(|&c| obj(c)).collect();
        SequenceSample {
            id,
            node: 1,
            start_timestamp: 0,
            beams: q,
            ula: 1,
            label,
            power: vec![0.0; 3 * q],
            bbox_track: track.iter().map(|o| o.bbox).collect(),
            mask_track: track,
            tx_positions: vec![Vec2::new(0.0, 0.0); centers.len()],
            distance: 10.0,
            avg_objects: 1.0,
            association: None,
        }
    }

    const IMAGE: [f64; 2] = [1280.0, 720.0];

    fn halves(n: usize, offset: u64) -> Vec<SequenceSample> {
        (0..n)
            .map(|i| {
                let right = i % 2 == 1;
                let x = if right { 700.0 + 61.0 * (i % 9) as f64 } else { 80.0 + 61.0 * (i % 9) as f64 };
                let y = 100.0 + 47.0 * (i % 11) as f64;
                sample(offset + i as u64, &vec![[x, y]; 3], right as usize, 2)
            })
            .collect()
    }

    #[test]
    fn kind_names_round_trip() {
        for k in BeamModelKind::ALL {
            assert_eq!(k.name().parse::<BeamModelKind>().unwrap(), k);
        }
        assert!("lstm".parse::<BeamModelKind>().is_err());
    }

    #[test]
    fn fcnn_takes_center_only() {
        let s = sample(0, &[[640.0, 360.0], [320.0, 180.0]], 0, 4);
        let input = BeamInputSpec {
            image: IMAGE,
            mask: [16, 16],
            steps: 2,
            beams: 4,
        };
        assert_eq!(features(BeamModelKind::BBoxFcnn, &s, &input).unwrap(), vec![vec![0.25, 0.25]]);
        assert_eq!(network_spec(BeamModelKind::BBoxFcnn, &input).unwrap().input_len(), 2);
        let f = features(BeamModelKind::BBoxLstm, &s, &input).unwrap();
        assert_eq!(f[0], vec![0.5, 0.5, 40.0 / 1280.0, 30.0 / 720.0]);
    }

    #[test]
    fn zeroed_head_gives_uniform_scores() {
        let input = BeamInputSpec {
            image: IMAGE,
            mask: [16, 16],
            steps: 3,
            beams: 5,
        };
        let mut m = BeamModel::new(BeamModelKind::BBoxLstm, input, 1).unwrap();
        let n = m.network.param_count();
        let head = 5 * nn::DEFAULT_HIDDEN + 5;
        m.network.params_mut()[n - head..].fill(0.0);
        let s = sample(0, &[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]], 0, 5);
        let sc = predict_beam(&m, &s).unwrap();
        assert!(sc.iter().all(|&v| v == 0.0));
        assert_eq!(top_k(&sc, 1).unwrap(), vec![0]);
        assert_eq!(predict_beam(&m, &s).unwrap(), sc);
        let short = sample(0, &[[1.0, 2.0], [3.0, 4.0]], 0, 5);
        assert!(predict_beam(&m, &short).is_err());
    }

    #[test]
    fn separable_halves_are_learned_by_every_kind() {
        let train = halves(40, 0);
        let test = halves(20, 1000);
        for kind in BeamModelKind::ALL {
            let spec = TrainSpec {
                epochs: 30,
                ..kind.default_train_spec()
            };
            let (m, curve) = train_beam_model(kind, &train, &test, &spec, IMAGE).unwrap();
            assert_eq!(curve.train.len(), 30);
            let sc = m.predict(&test).unwrap();
            let correct = sc
                .iter()
                .zip(&test)
                .filter(|(s, t)| top_k(s, 1).unwrap()[0] == t.label)
                .count();
            assert_eq!(correct, test.len(), "{kind}");
        }
    }

    #[test]
    fn toy_overfit_and_determinism() {
        let train: Vec<_> = (0..10)
            .map(|i| {
                let c = [100.0 + (i * 397 % 1000) as f64, 50.0 + (i * 211 % 600) as f64];
                sample(i as u64, &[c, [c[0] + 10.0, c[1]], [c[0] + 20.0, c[1]]], i % 5, 5)
            })
            .collect();
        for kind in BeamModelKind::ALL {
            let spec = kind.default_train_spec();
            let spec = TrainSpec {
                epochs: spec.epochs * 10,
                ..spec
            };
            let (m, curve) = train_beam_model(kind, &train, &[], &spec, IMAGE).unwrap();
            let sc = m.predict(&train).unwrap();
            let correct = sc.iter().zip(&train).filter(|(s, t)| top_k(s, 1).unwrap()[0] == t.label).count();
            assert_eq!(correct, 10, "{kind}: final loss {}", curve.train.last().unwrap());
            if kind == BeamModelKind::BBoxLstm {
                let (m2, curve2) = train_beam_model(kind, &train, &[], &spec, IMAGE).unwrap();
                assert_eq!(curve, curve2);
                assert_eq!(m, m2);
            }
        }
    }

    #[test]
    fn sequence_models_use_order() {
        let seq = [[100.0, 100.0], [400.0, 300.0], [900.0, 600.0]];
        let rev = [seq[2], seq[1], seq[0]];
        let a = sample(0, &seq, 0, 4);
        let b = sample(1, &rev, 0, 4);
        let input = BeamInputSpec {
            image: IMAGE,
            mask: [16, 16],
            steps: 3,
            beams: 4,
        };
        for kind in [BeamModelKind::BBoxLstm, BeamModelKind::MaskLstm] {
            let m = BeamModel::new(kind, input, 3).unwrap();
            assert_ne!(predict_beam(&m, &a).unwrap(), predict_beam(&m, &b).unwrap(), "{kind}");
        }
    }

    #[test]
    fn checkpoint_round_trip_predicts_identically() {
        let input = BeamInputSpec {
            image: IMAGE,
            mask: [16, 16],
            steps: 3,
            beams: 4,
        };
        let s = halves(6, 0);
        for kind in BeamModelKind::ALL {
            let m = BeamModel::new(kind, input, 5).unwrap();
            let bytes = m.to_checkpoint().unwrap().to_bytes().unwrap();
            let back = BeamModel::from_checkpoint(Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
            let before = m.predict(&s).unwrap();
            let after = back.predict(&s).unwrap();
            assert_eq!(
                before.iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>(),
                after.iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn prediction_csv_layout() {
        let s = halves(2, 0);
        let csv = predictions_csv(&s, &[vec![0.1, 0.9], vec![0.7, 0.2]], false).unwrap();
        assert_eq!(csv, "id,label,top1,top2,top3\n0,0,1,0,\n1,1,0,1,\n");
    }
}
