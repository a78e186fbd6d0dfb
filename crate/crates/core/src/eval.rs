//! Accuracy metrics and their CSV tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::SequenceSample;
use crate::error::{Error, Result};
use crate::models::top_k;
use crate::scene::BBox;

/// Width of the distance bins in meters.
pub const DISTANCE_BIN: f64 = 10.0;

/// Fraction of samples whose label is among the top `k` scores.
pub fn top_k_accuracy(scores: &[Vec<f64>], labels: &[usize], k: usize) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!("{} score vectors for {} labels", scores.len(), labels.len())));
    }
    if scores.is_empty() {
        return Err(Error::Empty("no samples to evaluate".into()));
    }
    let mut hits = 0usize;
    for (s, &l) in scores.iter().zip(labels) {
        if top_k(s, k.min(s.len()))?.contains(&l) {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

/// Per-frame agreement of the power-aided track with position-aided
/// identification, over qualifying sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssociationResult {
    /// Accuracy at frames 2..=r (index 0 is frame 2); `None` when no sequence qualifies.
    pub per_frame: Vec<Option<f64>>,
    pub qualifying: usize,
    pub excluded: usize,
}

/// One sequence's detection indices: the power-aided track, the
/// position-aided per-frame identification, and the distance from each
/// position-aided predicted center to the detection it snapped to.
#[derive(Debug, Clone, PartialEq)]
pub struct AssociationInput<'a> {
    pub tracked: &'a [Option<usize>],
    pub position: &'a [Option<usize>],
    pub position_distance: &'a [f64],
}

/// A sequence qualifies when both identifiers pick the same detection in the
/// first frame and every position-aided prediction lies within `threshold`
/// pixels of its nearest detection.
pub fn association_accuracy(seqs: &[AssociationInput], threshold: f64) -> Result<AssociationResult> {
    let r = seqs.first().map_or(0, |s| s.tracked.len());
    if seqs
        .iter()
        .any(|s| s.tracked.len() != r || s.position.len() != r || s.position_distance.len() != r)
    {
        return Err(Error::shape("association traces must all cover r frames"));
    }
    let frames = r.saturating_sub(1);
    let mut agree = vec![0usize; frames];
    let mut qualifying = 0;
    for s in seqs {
        let first_ok = s.tracked[0].is_some() && s.tracked[0] == s.position[0];
        let near = s.position_distance.iter().all(|&d| d <= threshold);
        if !(first_ok && near) {
            continue;
        }
        qualifying += 1;
        for t in 1..r {
            if s.tracked[t].is_some() && s.tracked[t] == s.position[t] {
                agree[t - 1] += 1;
            }
        }
    }
    Ok(AssociationResult {
        per_frame: agree
            .iter()
            .map(|&a| (qualifying > 0).then(|| a as f64 / qualifying as f64))
            .collect(),
        qualifying,
        excluded: seqs.len() - qualifying,
    })
}

/// Default exclusion threshold: half the median bbox diagonal over the samples' tracks.
pub fn default_association_threshold(samples: &[SequenceSample]) -> f64 {
    let mut d: Vec<f64> = samples
        .iter()
        .flat_map(|s| s.bbox_track.iter().map(BBox::diagonal))
        .collect();
    if d.is_empty() {
        return 0.0;
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    let median = if n % 2 == 1 { d[n / 2] } else { 0.5 * (d[n / 2 - 1] + d[n / 2]) };
    0.5 * median
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    /// Bin lower edge (meters) or object-count category.
    pub key: f64,
    pub count: usize,
    pub correct: usize,
    /// `None` for an empty bin.
    pub accuracy: Option<f64>,
}

fn row(key: f64, count: usize, correct: usize) -> BinRow {
    BinRow {
        key,
        count,
        correct,
        accuracy: (count > 0).then(|| correct as f64 / count as f64),
    }
}

fn top1(scores: &[f64]) -> usize {
    (0..scores.len()).fold(0, |b, i| if scores[i] > scores[b] { i } else { b })
}

fn check(samples: &[SequenceSample], scores: &[Vec<f64>]) -> Result<()> {
    if samples.len() != scores.len() {
        return Err(Error::shape("one score vector per sample is required"));
    }
    Ok(())
}

/// Top-1 accuracy per `[10 i, 10 (i+1))` meter bin, from 0 to the farthest
/// sample. Interior empty bins are kept with no accuracy.
pub fn accuracy_by_distance(samples: &[SequenceSample], scores: &[Vec<f64>], bin: f64) -> Result<Vec<BinRow>> {
    check(samples, scores)?;
    if !(bin > 0.0) {
        return Err(Error::config("bin width must be positive"));
    }
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let idx = |d: f64| (d / bin).floor() as usize;
    let bins = samples.iter().map(|s| idx(s.distance)).max().unwrap() + 1;
    let mut count = vec![0; bins];
    let mut correct = vec![0; bins];
    for (s, sc) in samples.iter().zip(scores) {
        let i = idx(s.distance);
        count[i] += 1;
        correct[i] += (top1(sc) == s.label) as usize;
    }
    Ok((0..bins).map(|i| row(i as f64 * bin, count[i], correct[i])).collect())
}

/// Top-1 accuracy per rounded mean object count; absent categories are omitted.
pub fn accuracy_by_object_count(samples: &[SequenceSample], scores: &[Vec<f64>]) -> Result<Vec<BinRow>> {
    check(samples, scores)?;
    let mut m: BTreeMap<u64, (usize, usize)> = BTreeMap::new();
    for (s, sc) in samples.iter().zip(scores) {
        let e = m.entry(s.avg_objects.round() as u64).or_default();
        e.0 += 1;
        e.1 += (top1(sc) == s.label) as usize;
    }
    Ok(m.into_iter().map(|(k, (n, c))| row(k as f64, n, c)).collect())
}

/// `q x q` counts, row = true beam, column = predicted beam.
pub fn confusion_matrix(predicted: &[usize], labels: &[usize], q: usize) -> Result<Vec<Vec<u64>>> {
    if predicted.len() != labels.len() {
        return Err(Error::shape("predictions and labels differ in length"));
    }
    let mut m = vec![vec![0u64; q]; q];
    for (&p, &l) in predicted.iter().zip(labels) {
        if p >= q || l >= q {
            return Err(Error::Invalid(format!("beam index outside 0..{q}")));
        }
        m[l][p] += 1;
    }
    Ok(m)
}

pub fn diagonal_fraction(m: &[Vec<u64>]) -> Option<f64> {
    let total: u64 = m.iter().flatten().sum();
    let diag: u64 = (0..m.len()).map(|i| m[i][i]).sum();
    (total > 0).then(|| diag as f64 / total as f64)
}

/// Metrics for one model on one node's test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEval {
    pub node: usize,
    pub model: String,
    pub samples: usize,
    pub top_k: [f64; 3],
    pub by_distance: Vec<BinRow>,
    pub by_objects: Vec<BinRow>,
    pub confusion: Vec<Vec<u64>>,
}

pub fn evaluate_model(node: usize, model: &str, samples: &[SequenceSample], scores: &[Vec<f64>]) -> Result<ModelEval> {
    check(samples, scores)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let q = scores.first().map_or(0, Vec::len);
    let mut tk = [0.0; 3];
    for (k, v) in tk.iter_mut().enumerate() {
        *v = top_k_accuracy(scores, &labels, (k + 1).min(q))?;
    }
    let preds: Vec<usize> = scores.iter().map(|s| top1(s)).collect();
    Ok(ModelEval {
        node,
        model: model.to_string(),
        samples: samples.len(),
        top_k: tk,
        by_distance: accuracy_by_distance(samples, scores, DISTANCE_BIN)?,
        by_objects: accuracy_by_object_count(samples, scores)?,
        confusion: confusion_matrix(&preds, &labels, q)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeAssociation {
    pub node: usize,
    /// Which track was compared: `bbox` or `mask`.
    pub mode: String,
    pub threshold: f64,
    pub result: AssociationResult,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub models: Vec<ModelEval>,
    pub association: Vec<NodeAssociation>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.6}"))
}

impl EvalReport {
    /// `node,model,samples,top1,top2,top3`
    pub fn topk_csv(&self) -> String {
        let mut s = String::from("node,model,samples,top1,top2,top3\n");
        for m in &self.models {
            let _ = writeln!(
                s,
                "{},{},{},{:.6},{:.6},{:.6}",
                m.node, m.model, m.samples, m.top_k[0], m.top_k[1], m.top_k[2]
            );
        }
        s
    }

    /// `node,mode,frame,accuracy,qualifying,excluded,threshold`, frames 2..=r.
    pub fn association_csv(&self) -> String {
        let mut s = String::from("node,mode,frame,accuracy,qualifying,excluded,threshold\n");
        for a in &self.association {
            for (i, v) in a.result.per_frame.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{:.6}",
                    a.node,
                    a.mode,
                    i + 2,
                    opt(*v),
                    a.result.qualifying,
                    a.result.excluded,
                    a.threshold
                );
            }
        }
        s
    }

    /// `node,model,bin_start_m,bin_end_m,count,correct,accuracy`
    pub fn by_distance_csv(&self) -> String {
        let mut s = String::from("node,model,bin_start_m,bin_end_m,count,correct,accuracy\n");
        for m in &self.models {
            for r in &m.by_distance {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{}",
                    m.node,
                    m.model,
                    r.key,
                    r.key + DISTANCE_BIN,
                    r.count,
                    r.correct,
                    opt(r.accuracy)
                );
            }
        }
        s
    }

    /// `node,model,objects,count,correct,accuracy`
    pub fn by_objects_csv(&self) -> String {
        let mut s = String::from("node,model,objects,count,correct,accuracy\n");
        for m in &self.models {
            for r in &m.by_objects {
                let _ = writeln!(s, "{},{},{},{},{},{}", m.node, m.model, r.key, r.count, r.correct, opt(r.accuracy));
            }
        }
        s
    }

    /// `node,model,true_beam,predicted_beam,count`, nonzero cells only.
    pub fn confusion_csv(&self) -> String {
        let mut s = String::from("node,model,true_beam,predicted_beam,count\n");
        for m in &self.models {
            for (l, row) in m.confusion.iter().enumerate() {
                for (p, &c) in row.iter().enumerate() {
                    if c > 0 {
                        let _ = writeln!(s, "{},{},{},{},{}", m.node, m.model, l, p, c);
                    }
                }
            }
        }
        s
    }

    /// The five tables keyed by file name.
    pub fn csv_files(&self) -> [(&'static str, String); 5] {
        [
            ("topk.csv", self.topk_csv()),
            ("association.csv", self.association_csv()),
            ("by_distance.csv", self.by_distance_csv()),
            ("by_objects.csv", self.by_objects_csv()),
            ("confusion.csv", self.confusion_csv()),
        ]
    }

    pub fn write_csvs(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, body) in self.csv_files() {
            std::fs::write(dir.join(name), body)?;
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut s = format!("{:<5} {:<11} {:>7} {:>7} {:>7} {:>7}\n", "node", "model", "n", "top1", "top2", "top3");
        for m in &self.models {
            let _ = writeln!(
                s,
                "{:<5} {:<11} {:>7} {:>7.4} {:>7.4} {:>7.4}",
                m.node, m.model, m.samples, m.top_k[0], m.top_k[1], m.top_k[2]
            );
        }
        for a in &self.association {
            let v: Vec<String> = a.result.per_frame.iter().map(|v| opt(*v)).collect();
            let _ = writeln!(
                s,
                "association node {} ({}): [{}] over {} sequences, {} excluded",
                a.node,
                a.mode,
                v.join(", "),
                a.result.qualifying,
                a.result.excluded
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_hot(q: usize, best: &[usize]) -> Vec<f64> {
        let mut v = vec![0.0; q];
        for (rank, &b) in best.iter().enumerate() {
            v[b] = (best.len() - rank) as f64;
        }
        v
    }

    #[test]
    fn top_k_examples() {
        let scores = vec![one_hot(10, &[3, 1, 2]), one_hot(10, &[5, 6, 7])];
        let labels = [3, 7];
        assert_eq!(top_k_accuracy(&scores, &labels, 1).unwrap(), 0.5);
        assert_eq!(top_k_accuracy(&scores, &labels, 3).unwrap(), 1.0);
        assert_eq!(top_k_accuracy(&scores, &labels, 10).unwrap(), 1.0);
        assert!(top_k_accuracy(&[], &[], 1).is_err());
        let perfect: Vec<_> = (0..10).map(|l| one_hot(10, &[l])).collect();
        let ls: Vec<usize> = (0..10).collect();
        for k in 1..=10 {
            assert_eq!(top_k_accuracy(&perfect, &ls, k).unwrap(), 1.0);
        }
    }

    fn trace(tracked: Vec<Option<usize>>, position: Vec<Option<usize>>) -> (Vec<Option<usize>>, Vec<Option<usize>>, Vec<f64>) {
        let n = tracked.len();
        (tracked, position, vec![1.0; n])
    }

    fn run(t: &[(Vec<Option<usize>>, Vec<Option<usize>>, Vec<f64>)], thr: f64) -> AssociationResult {
        let inputs: Vec<AssociationInput> = t
            .iter()
            .map(|(a, b, d)| AssociationInput {
                tracked: a,
                position: b,
                position_distance: d,
            })
            .collect();
        association_accuracy(&inputs, thr).unwrap()
    }

    #[test]
    fn association_examples() {
        let all = vec![Some(0); 5];
        let agree: Vec<_> = (0..3).map(|_| trace(all.clone(), all.clone())).collect();
        let r = run(&agree, 5.0);
        assert_eq!(r.per_frame, vec![Some(1.0); 4]);

        let mut four: Vec<_> = (0..4).map(|_| trace(all.clone(), all.clone())).collect();
        four[2].1[4] = Some(1);
        let r = run(&four, 5.0);
        assert_eq!(r.per_frame[3], Some(0.75));
        assert_eq!(r.per_frame[0], Some(1.0));

        four.push(trace(all.clone(), vec![Some(1); 5]));
        let r = run(&four, 5.0);
        assert_eq!((r.qualifying, r.excluded), (4, 1));
        assert_eq!(r.per_frame[3], Some(0.75));

        let mut far = trace(all.clone(), all.clone());
        far.2[2] = 9.0;
        four.push(far);
        let r = run(&four, 5.0);
        assert_eq!((r.qualifying, r.excluded), (4, 2));
        assert_eq!(run(&[], 1.0).per_frame, Vec::<Option<f64>>::new());
    }

    fn smp(distance: f64, objects: f64, label: usize) -> SequenceSample {
        use crate::dataset::TrackedObject;
        use crate::semantics::MaskGrid;
        let obj = TrackedObject {
            bbox: BBox::new(1.0, 1.0, 2.0, 2.0),
            mask: MaskGrid::new(2, 2).unwrap(),
            color: [0; 3],
        };
        SequenceSample {
            id: 0,
            node: 1,
            start_timestamp: 0,
            beams: 4,
            ula: 1,
            label,
            power: vec![0.0; 12],
            bbox_track: vec![obj.bbox],
            mask_track: vec![obj],
            tx_positions: vec![crate::geometry::Vec2::new(0.0, 0.0)],
            distance,
            avg_objects: objects,
            association: None,
        }
    }

    #[test]
    fn distance_bins() {
        let s: Vec<_> = (0..3).map(|_| smp(15.0, 1.0, 0)).collect();
        let sc = vec![one_hot(4, &[0]); 3];
        let t = accuracy_by_distance(&s, &sc, 10.0).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!((t[0].count, t[0].accuracy), (0, None));
        assert_eq!((t[1].key, t[1].count, t[1].accuracy), (10.0, 3, Some(1.0)));

        let s: Vec<_> = (0..5).map(|i| smp(20.0 + i as f64, 1.0, 1)).collect();
        let sc: Vec<_> = (0..5).map(|i| one_hot(4, &[if i < 4 { 1 } else { 2 }])).collect();
        let t = accuracy_by_distance(&s, &sc, 10.0).unwrap();
        assert_eq!(t[2].accuracy, Some(0.8));
    }

    #[test]
    fn object_categories() {
        let mut s = vec![smp(1.0, 1.2, 0), smp(1.0, 2.4, 0), smp(1.0, 1.6, 0), smp(1.0, 2.6, 0), smp(1.0, 3.0, 0)];
        let good = one_hot(4, &[0]);
        let bad = one_hot(4, &[1]);
        let sc = vec![good.clone(), good.clone(), bad.clone(), good.clone(), bad.clone()];
        let t = accuracy_by_object_count(&s, &sc).unwrap();
        let got: Vec<_> = t.iter().map(|r| (r.key, r.accuracy)).collect();
        assert_eq!(got, vec![(1.0, Some(1.0)), (2.0, Some(0.5)), (3.0, Some(0.5))]);
        s.truncate(1);
        assert_eq!(accuracy_by_object_count(&s, &sc[..1]).unwrap().len(), 1);
    }

    #[test]
    fn confusion_examples() {
        let m = confusion_matrix(&[0, 1, 1], &[0, 0, 1], 2).unwrap();
        assert_eq!(m, vec![vec![1, 1], vec![0, 1]]);
        let perfect = confusion_matrix(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!(diagonal_fraction(&perfect), Some(1.0));
        let shifted = confusion_matrix(&[1, 2, 3], &[0, 1, 2], 4).unwrap();
        assert!((0..3).all(|i| shifted[i][i + 1] == 1));
        assert!(confusion_matrix(&[4], &[0], 4).is_err());
    }

    #[test]
    fn csv_headers_and_rows() {
        let s: Vec<_> = (0..4).map(|i| smp(5.0 + 10.0 * i as f64, 1.0, i % 2)).collect();
        let sc: Vec<_> = (0..4).map(|_| one_hot(4, &[0, 1, 2])).collect();
        let mut rep = EvalReport::default();
        rep.models.push(evaluate_model(1, "bbox-lstm", &s, &sc).unwrap());
        rep.association.push(NodeAssociation {
            node: 1,
            mode: "bbox".into(),
            threshold: 3.0,
            result: AssociationResult {
                per_frame: vec![Some(1.0), None],
                qualifying: 2,
                excluded: 0,
            },
        });
        assert_eq!(rep.topk_csv(), "node,model,samples,top1,top2,top3\n1,bbox-lstm,4,0.500000,1.000000,1.000000\n");
        assert_eq!(rep.association_csv().lines().count(), 3);
        assert!(rep.association_csv().ends_with("1,bbox,3,,2,0,3.000000\n"));
        assert_eq!(rep.by_distance_csv().lines().nth(1).unwrap(), "1,bbox-lstm,0,10,1,1,1.000000");
        assert_eq!(rep.confusion_csv(), "node,model,true_beam,predicted_beam,count\n1,bbox-lstm,0,0,2\n1,bbox-lstm,1,0,2\n");
        assert!(rep.summary().contains("bbox-lstm"));
    }

    proptest! {
        #[test]
        fn metric_cross_checks(raw in prop::collection::vec((prop::collection::vec(-3i32..3, 6), 0usize..6), 1..40)) {
            let scores: Vec<Vec<f64>> = raw.iter().map(|(s, _)| s.iter().map(|&v| v as f64).collect()).collect();
            let labels: Vec<usize> = raw.iter().map(|(_, l)| *l).collect();
            let preds: Vec<usize> = scores.iter().map(|s| top_k(s, 1).unwrap()[0]).collect();
            let m = confusion_matrix(&preds, &labels, 6).unwrap();
            prop_assert_eq!(m.iter().flatten().sum::<u64>() as usize, labels.len());
            for l in 0..6 {
                prop_assert_eq!(m[l].iter().sum::<u64>() as usize, labels.iter().filter(|&&x| x == l).count());
            }
            let top1 = top_k_accuracy(&scores, &labels, 1).unwrap();
            prop_assert_eq!(top1, diagonal_fraction(&m).unwrap());
            let mut prev = 0.0;
            for k in 1..=6 {
                let a = top_k_accuracy(&scores, &labels, k).unwrap();
                prop_assert!(a >= prev);
                prev = a;
            }
        }
    }
}
