//! End-to-end orchestration: simulate, identify and track, build records,
//! train, evaluate. All artifacts live under one output root:
//!
//! ```text
//! manifest.json                    sha256 of every artifact, per-frame compression ratios
//! scenario/frames.jsonl            ground-truth frames, one JSON object per line
//! scenario/powers.bin              measured global power vectors
//! scenario/node{n}.msgs            wire-encoded semantic messages of node n
//! data/node{n}/{train,val,test}.rec
//! models/node{n}/{power,position}-fcnn.ckpt
//! models/node{n}/<model>.ckpt, <model>.loss.csv
//! report/{topk,association,by_distance,by_objects,confusion}.csv
//! report/predictions/node{n}_<model>.csv, report/summary.txt
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::{optimal_beam, Basestation, GlobalPowerVector};
use crate::config::{ExperimentConfig, SeedStream, POSITION_IDENT, POWER_IDENT};
use crate::dataset::{
    filter_tx_in_fov, load_records, save_records, split, window_sequences, AssociationTrace, NodeFrame, SequenceSample,
    TrackedObject,
};
use crate::error::{Error, Result};
use crate::eval::{association_accuracy, default_association_threshold, evaluate_model, AssociationInput, EvalReport, NodeAssociation};
use crate::models::{predictions_csv, train_beam_model, BeamModel, BeamModelKind};
use crate::nn::{Checkpoint, LossCurve};
use crate::scene::{generate_scenario, Frame};
use crate::semantics::{decode_message, decode_stream, encode_message, raw_image_bytes, simulate_detector, SemanticMessage};
use crate::track::{
    build_ident_dataset, match_detection, predict_center, select_node, track_sequence, train_identifier, IdentInput,
    IdentifierModel, TrackMode,
};

pub const MANIFEST: &str = "manifest.json";
pub const POWERS_MAGIC: [u8; 4] = *b"DSPW";

/// Simulated scenario with every node's detector output.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub frames: Vec<Frame>,
    pub powers: Vec<GlobalPowerVector<f64>>,
    pub nodes: Vec<NodeSimulation>,
}

#[derive(Debug, Clone)]
pub struct NodeSimulation {
    pub node: usize,
    /// Detector output with truth ids.
    pub messages: Vec<SemanticMessage>,
    /// Wire encodings of `messages` (truth ids are not transmitted).
    pub wire: Vec<Vec<u8>>,
    /// Messages decoded from `wire`.
    pub received: Vec<SemanticMessage>,
    /// Message bytes over raw image bytes, per frame.
    pub compression: Vec<f64>,
}

impl NodeSimulation {
    pub fn mean_compression(&self) -> f64 {
        self.compression.iter().sum::<f64>() / self.compression.len().max(1) as f64
    }
}

pub fn simulate(cfg: &ExperimentConfig) -> Result<Simulation> {
    let world = cfg.world();
    let frames = generate_scenario(world, &cfg.traffic, cfg.stream_seed(SeedStream::Scenario))?;
    let bs = Basestation::<f64>::new(world.bs_position, world.bs_heading, cfg.elements, cfg.beams, cfg.channel.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.stream_seed(SeedStream::Channel));
    let powers = frames
        .iter()
        .map(|f| {
            let tx = f.transmitter().ok_or_else(|| Error::Invalid(format!("frame {} has no transmitter", f.timestamp)))?;
            bs.measured_power_vector(tx.position, f.timestamp, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let det_seed = cfg.stream_seed(SeedStream::Detector);
    let mut nodes = Vec::new();
    for &n in &cfg.nodes {
        let cam = world.camera(n);
        let raw = raw_image_bytes(cam) as f64;
        let mut ns = NodeSimulation {
            node: n,
            messages: Vec::with_capacity(frames.len()),
            wire: Vec::with_capacity(frames.len()),
            received: Vec::with_capacity(frames.len()),
            compression: Vec::with_capacity(frames.len()),
        };
        for f in &frames {
            let msg = simulate_detector(f, cam, n as u8, &cfg.detector, det_seed)?;
            let bytes = encode_message(&msg)?;
            ns.compression.push(bytes.len() as f64 / raw);
            ns.received.push(decode_message(&bytes)?);
            ns.wire.push(bytes);
            ns.messages.push(msg);
        }
        nodes.push(ns);
    }
    Ok(Simulation { frames, powers, nodes })
}

/// Identification and tracking of one window. `window` must already hold the
/// transmitter in every frame.
pub fn build_sample(
    cfg: &ExperimentConfig,
    node: usize,
    window: &[NodeFrame],
    power_ident: &IdentifierModel,
    position_ident: &IdentifierModel,
) -> Result<SequenceSample> {
    let first = &window[0];
    let last = &window[window.len() - 1];
    let received: Vec<SemanticMessage> = window.iter().map(|f| f.received.clone()).collect();
    let start = match_detection(predict_center(power_ident, first.power.ula(node))?, &received[0])?;
    let bbox_steps = track_sequence(start, &received, TrackMode::BBox, cfg.color_epsilon)?;
    let mask_steps = track_sequence(start, &received, TrackMode::Mask, cfg.color_epsilon)?;
    let mut position = Vec::with_capacity(window.len());
    let mut position_distance = Vec::with_capacity(window.len());
    for f in window {
        let c = predict_center(position_ident, &[f.tx_position.x, f.tx_position.y])?;
        let i = match_detection(c, &f.received)?;
        position.push(Some(i));
        position_distance.push(f.received.detections[i].bbox.center_distance(c));
    }
    let choice = optimal_beam(&last.power)?;
    let node_pos = cfg.world().camera(node).position;
    let objects: usize = received.iter().map(SemanticMessage::len).sum();
    let s = SequenceSample {
        id: first.timestamp as u64,
        node,
        start_timestamp: first.timestamp,
        beams: cfg.beams,
        ula: choice.ula,
        label: choice.beam,
        power: first.power.values.clone(),
        bbox_track: bbox_steps.iter().zip(&received).map(|(s, m)| m.detections[s.index].bbox).collect(),
        mask_track: mask_steps
            .iter()
            .zip(&received)
            .map(|(s, m)| {
                let d = &m.detections[s.index];
                TrackedObject {
                    bbox: d.bbox,
                    mask: d.mask.clone(),
                    color: d.color,
                }
            })
            .collect(),
        tx_positions: window.iter().map(|f| f.tx_position).collect(),
        distance: last.tx_position.distance(node_pos),
        avg_objects: objects as f64 / window.len() as f64,
        association: Some(AssociationTrace {
            bbox: bbox_steps.iter().map(|s| Some(s.index)).collect(),
            mask: mask_steps.iter().map(|s| Some(s.index)).collect(),
            position,
            position_distance,
            truth: window.iter().map(NodeFrame::tx_index).collect(),
        }),
    };
    s.validate()?;
    Ok(s)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NodeSummary {
    pub node: usize,
    pub ident_samples: usize,
    pub windows: usize,
    pub in_fov: usize,
    pub served: usize,
    pub dropped: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub mean_compression: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeCompression {
    pub mean: f64,
    pub per_frame: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub frames: usize,
    pub nodes: Vec<NodeSummary>,
    /// Keyed by `node{n}`.
    pub compression: BTreeMap<String, NodeCompression>,
    /// Relative path to lowercase hex sha256.
    pub files: BTreeMap<String, String>,
}

impl Manifest {
    pub fn load(out: &Path) -> Result<Self> {
        let body = std::fs::read(out.join(MANIFEST))?;
        serde_json::from_slice(&body).map_err(|e| Error::format(format!("manifest: {e}")))
    }

    /// Rehashes every file under `out` except the manifest itself.
    pub fn refresh(&mut self, out: &Path) -> Result<()> {
        self.files.clear();
        for p in list_files(out)? {
            let rel = p.strip_prefix(out).unwrap_or(&p).to_string_lossy().replace('\\', "/");
            if rel == MANIFEST {
                continue;
            }
            self.files.insert(rel, format!("{:x}", Sha256::digest(std::fs::read(&p)?)));
        }
        Ok(())
    }

    pub fn save(&self, out: &Path) -> Result<()> {
        let body = serde_json::to_vec_pretty(self).map_err(|e| Error::format(e.to_string()))?;
        std::fs::write(out.join(MANIFEST), body)?;
        Ok(())
    }
}

fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn node_dir(out: &Path, kind: &str, node: usize) -> PathBuf {
    out.join(kind).join(format!("node{node}"))
}

pub fn checkpoint_path(out: &Path, node: usize, model: &str) -> PathBuf {
    node_dir(out, "models", node).join(format!("{model}.ckpt"))
}

pub fn write_powers(path: &Path, powers: &[GlobalPowerVector<f64>]) -> Result<()> {
    let width = powers.first().map_or(0, |p| p.values.len());
    let mut b = Vec::with_capacity(16 + powers.len() * (4 + 8 * width));
    b.extend_from_slice(&POWERS_MAGIC);
    b.extend_from_slice(&(width as u32).to_le_bytes());
    b.extend_from_slice(&(powers.len() as u64).to_le_bytes());
    for p in powers {
        b.extend_from_slice(&p.timestamp.to_le_bytes());
        for v in &p.values {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, b)?;
    Ok(())
}

/// `(timestamp, values)` per frame.
pub fn read_powers(bytes: &[u8]) -> Result<Vec<(u32, Vec<f64>)>> {
    if bytes.len() < 16 || bytes[..4] != POWERS_MAGIC {
        return Err(Error::format("not a power-vector file"));
    }
    let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let rec = 4 + 8 * width;
    if bytes.len() != 16 + n * rec {
        return Err(Error::format("power-vector file has the wrong length"));
    }
    Ok((0..n)
        .map(|i| {
            let r = &bytes[16 + i * rec..16 + (i + 1) * rec];
            let ts = u32::from_le_bytes(r[..4].try_into().unwrap());
            let v = r[4..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            (ts, v)
        })
        .collect())
}

fn image_of(cfg: &ExperimentConfig, node: usize) -> [f64; 2] {
    let c = cfg.world().camera(node);
    [c.width as f64, c.height as f64]
}

/// Simulates the scenario, trains both identifiers per node, builds the
/// windowed records and writes them with a manifest.
pub fn generate(cfg: &ExperimentConfig, out: &Path) -> Result<Manifest> {
    let sim = simulate(cfg)?;
    let scen = out.join("scenario");
    std::fs::create_dir_all(&scen)?;
    let mut frames_txt = String::new();
    for f in &sim.frames {
        frames_txt.push_str(&serde_json::to_string(f).map_err(|e| Error::format(e.to_string()))?);
        frames_txt.push('\n');
    }
    std::fs::write(scen.join("frames.jsonl"), frames_txt)?;
    write_powers(&scen.join("powers.bin"), &sim.powers)?;

    let mut manifest = Manifest {
        seed: cfg.seed,
        frames: sim.frames.len(),
        ..Default::default()
    };
    for ns in &sim.nodes {
        let n = ns.node;
        std::fs::write(scen.join(format!("node{n}.msgs")), ns.wire.concat())?;
        manifest.compression.insert(
            format!("node{n}"),
            NodeCompression {
                mean: ns.mean_compression(),
                per_frame: ns.compression.clone(),
            },
        );

        let image = image_of(cfg, n);
        let ident = build_ident_dataset(&sim.frames, &ns.messages, &sim.powers, n)?;
        let (power_ident, _) = train_identifier(&ident, IdentInput::Power, &cfg.train_spec(POWER_IDENT)?, image)?;
        let (position_ident, _) = train_identifier(&ident, IdentInput::Position, &cfg.train_spec(POSITION_IDENT)?, image)?;
        let mdir = node_dir(out, "models", n);
        std::fs::create_dir_all(&mdir)?;
        power_ident.to_checkpoint()?.save(&checkpoint_path(out, n, POWER_IDENT))?;
        position_ident.to_checkpoint()?.save(&checkpoint_path(out, n, POSITION_IDENT))?;

        let node_frames: Vec<NodeFrame> = sim
            .frames
            .iter()
            .enumerate()
            .map(|(t, f)| {
                let tx = f.transmitter().expect("checked in simulate");
                NodeFrame {
                    timestamp: f.timestamp,
                    message: ns.messages[t].clone(),
                    received: ns.received[t].clone(),
                    power: sim.powers[t].clone(),
                    tx_id: tx.id,
                    tx_position: tx.position,
                }
            })
            .collect();
        let windows = window_sequences(&node_frames, cfg.window);
        let n_windows = windows.len();
        let visible = filter_tx_in_fov(windows);
        let in_fov = visible.len();
        let mut samples = Vec::new();
        let mut served = 0;
        let mut dropped = 0;
        for w in visible {
            let serves = |f: &NodeFrame| select_node(&f.power).ok() == Some(n);
            if !(serves(&w[0]) && serves(&w[w.len() - 1])) {
                continue;
            }
            served += 1;
            match build_sample(cfg, n, w, &power_ident, &position_ident) {
                Ok(s) => samples.push(s),
                Err(Error::NoCandidates) => dropped += 1,
                Err(e) => return Err(e),
            }
        }
        if samples.is_empty() {
            return Err(Error::Empty(format!("node {n} produced no sequences")));
        }
        let (train, val, test) = split(&samples, &cfg.split_spec())?;
        let ddir = node_dir(out, "data", n);
        std::fs::create_dir_all(&ddir)?;
        save_records(&ddir.join("train.rec"), &train)?;
        save_records(&ddir.join("val.rec"), &val)?;
        save_records(&ddir.join("test.rec"), &test)?;
        manifest.nodes.push(NodeSummary {
            node: n,
            ident_samples: ident.samples.len(),
            windows: n_windows,
            in_fov,
            served,
            dropped,
            train: train.len(),
            val: val.len(),
            test: test.len(),
            mean_compression: ns.mean_compression(),
        });
    }
    manifest.refresh(out)?;
    manifest.save(out)?;
    Ok(manifest)
}

pub fn load_split(out: &Path, node: usize, part: &str) -> Result<Vec<SequenceSample>> {
    let p = node_dir(out, "data", node).join(format!("{part}.rec"));
    if !p.exists() {
        return Err(Error::config(format!("{} is missing; run generate first", p.display())));
    }
    load_records(&p)
}

pub fn loss_csv(curve: &LossCurve) -> String {
    let mut s = String::from("epoch,train_loss,val_loss\n");
    for (e, t) in curve.train.iter().enumerate() {
        let v = curve.val.get(e).map_or(String::new(), |v| format!("{v:.9e}"));
        let _ = writeln!(s, "{e},{t:.9e},{v}");
    }
    s
}

/// Trains one beam model for one node from its stored splits.
pub fn train(cfg: &ExperimentConfig, out: &Path, kind: BeamModelKind, node: usize) -> Result<LossCurve> {
    let tr = load_split(out, node, "train")?;
    let va = load_split(out, node, "val")?;
    let spec = cfg.train_spec(kind.name())?;
    let (model, curve) = train_beam_model(kind, &tr, &va, &spec, image_of(cfg, node))?;
    std::fs::create_dir_all(node_dir(out, "models", node))?;
    model.to_checkpoint()?.save(&checkpoint_path(out, node, kind.name()))?;
    std::fs::write(node_dir(out, "models", node).join(format!("{}.loss.csv", kind.name())), loss_csv(&curve))?;
    Ok(curve)
}

pub fn load_beam_model(out: &Path, node: usize, kind: BeamModelKind) -> Result<BeamModel> {
    let p = checkpoint_path(out, node, kind.name());
    if !p.exists() {
        return Err(Error::config(format!("checkpoint {} is missing; run train first", p.display())));
    }
    let m = BeamModel::from_checkpoint(Checkpoint::load(&p)?)?;
    if m.kind != kind {
        return Err(Error::format(format!("{} holds a {} model", p.display(), m.kind)));
    }
    Ok(m)
}

/// Association accuracy of one tracking mode over samples carrying traces.
pub fn node_association(node: usize, mode: TrackMode, samples: &[SequenceSample], threshold: f64) -> Result<NodeAssociation> {
    let traces: Vec<&AssociationTrace> = samples.iter().filter_map(|s| s.association.as_ref()).collect();
    let inputs: Vec<AssociationInput> = traces
        .iter()
        .map(|a| AssociationInput {
            tracked: match mode {
                TrackMode::BBox => &a.bbox,
                TrackMode::Mask => &a.mask,
            },
            position: &a.position,
            position_distance: &a.position_distance,
        })
        .collect();
    Ok(NodeAssociation {
        node,
        mode: match mode {
            TrackMode::BBox => "bbox",
            TrackMode::Mask => "mask",
        }
        .into(),
        threshold,
        result: association_accuracy(&inputs, threshold)?,
    })
}

/// Evaluates every configured model on every node's test split and writes
/// the report directory.
pub fn evaluate(cfg: &ExperimentConfig, out: &Path) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    let pdir = out.join("report").join("predictions");
    std::fs::create_dir_all(&pdir)?;
    for &n in &cfg.nodes {
        let test = load_split(out, n, "test")?;
        if test.is_empty() {
            return Err(Error::Empty(format!("node {n} has an empty test split")));
        }
        for &kind in &cfg.models {
            let model = load_beam_model(out, n, kind)?;
            let scores = model.predict(&test)?;
            std::fs::write(pdir.join(format!("node{n}_{}.csv", kind.name())), predictions_csv(&test, &scores, false)?)?;
            report.models.push(evaluate_model(n, kind.name(), &test, &scores)?);
        }
        let thr = cfg.association_threshold.unwrap_or_else(|| default_association_threshold(&test));
        for mode in [TrackMode::BBox, TrackMode::Mask] {
            report.association.push(node_association(n, mode, &test, thr)?);
        }
    }
    report.write_csvs(&out.join("report"))?;
    std::fs::write(out.join("report").join("summary.txt"), report.summary())?;
    Ok(report)
}

/// generate, train every model for every node, evaluate, refresh the manifest.
pub fn run_pipeline(cfg: &ExperimentConfig, out: &Path, mut progress: impl FnMut(&str)) -> Result<EvalReport> {
    progress("generate");
    generate(cfg, out).map_err(|e| e.in_stage("generate"))?;
    for &n in &cfg.nodes {
        for &kind in &cfg.models {
            let stage = format!("train {kind} node {n}");
            progress(&stage);
            train(cfg, out, kind, n).map_err(|e| e.in_stage(&stage))?;
        }
    }
    progress("eval");
    let report = evaluate(cfg, out).map_err(|e| e.in_stage("eval"))?;
    let mut m = Manifest::load(out).map_err(|e| e.in_stage("manifest"))?;
    m.refresh(out)?;
    m.save(out)?;
    Ok(report)
}

/// Human-readable description of any artifact written by the pipeline.
pub fn inspect(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let mut s = String::new();
    if bytes.starts_with(&crate::nn::checkpoint::CHECKPOINT_MAGIC) {
        let h = crate::nn::read_checkpoint_header(&bytes)?;
        let _ = writeln!(s, "checkpoint: {}-byte floats, {} parameters", h.dtype, h.param_count);
        let _ = writeln!(s, "network: {}", serde_json::to_string(&h.spec).unwrap_or_default());
        if let Some(t) = h.train_spec {
            let _ = writeln!(s, "train spec: {}", serde_json::to_string(&t).unwrap_or_default());
        }
        let _ = writeln!(s, "metadata: {}", h.metadata);
    } else if bytes.starts_with(&POWERS_MAGIC) {
        let p = read_powers(&bytes)?;
        let _ = writeln!(s, "power vectors: {} frames x {} values", p.len(), p.first().map_or(0, |x| x.1.len()));
        for (ts, v) in p.iter().take(5) {
            let best = (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b });
            let _ = writeln!(s, "  t={ts} argmax={best} max={:.4e}", v.get(best).copied().unwrap_or(0.0));
        }
    } else if bytes.starts_with(&crate::semantics::wire::MAGIC.to_le_bytes()) {
        let msgs = decode_stream(&bytes)?;
        let _ = writeln!(s, "semantic messages: {}", msgs.len());
        for m in msgs.iter().take(3) {
            let _ = write!(s, "{m}");
        }
    } else if bytes.starts_with(crate::dataset::RECORD_HEADER.as_bytes()) {
        let r = crate::dataset::parse_records(std::str::from_utf8(&bytes).map_err(|_| Error::format("records are not UTF-8"))?)?;
        let _ = writeln!(s, "records: {}", r.len());
        for x in r.iter().take(5) {
            let _ = writeln!(
                s,
                "  id={} node={} r={} label={} distance={:.1} objects={:.1}",
                x.id,
                x.node,
                x.steps(),
                x.label,
                x.distance,
                x.avg_objects
            );
        }
    } else if name.ends_with(".json") || name.ends_with(".csv") || name.ends_with(".txt") || name.ends_with(".jsonl") {
        let text = String::from_utf8_lossy(&bytes);
        for line in text.lines().take(20) {
            let _ = writeln!(s, "{}", if line.len() > 160 { &line[..160] } else { line });
        }
    } else {
        return Err(Error::format(format!("{} is not a recognised artifact", path.display())));
    }
    Ok(s)
}
