//! Windowed sequence samples, splits, and the line-delimited record format.
//!
//! # Record format
//!
//! The first line is `#dsbeam-records version=1`. Every following non-empty
//! line is one sample: space-separated `key=value` pairs, no spaces inside
//! values, lists comma-separated, floats with 17 significant digits.
//!
//! | key | value |
//! |---|---|
//! | `id` | sample id (u64) |
//! | `node` | serving node (1 or 2) |
//! | `r` | window length |
//! | `q` | beams per array |
//! | `ula` | array of the label |
//! | `label` | optimal beam of `ula` at the last frame, `0..q` |
//! | `ts` | timestamp of the first frame |
//! | `distance` | node-to-transmitter distance at the last frame, meters |
//! | `objects` | mean detection count over the window |
//! | `power` | first-frame global power vector, `3q` floats |
//! | `b{t}` | bbox-mode track at frame `t`: `xc,yc,w,h` |
//! | `m{t}` | mask-mode track at frame `t`: `xc,yc,w,h` |
//! | `c{t}` | mask-mode track color: `r,g,b` |
//! | `k{t}` | mask-mode track mask: `W,H,lead,run,run,...` (row-major RLE) |
//! | `tx{t}` | transmitter ground position: `x,y` |
//! | `a.bbox`, `a.mask`, `a.pos`, `a.truth` | optional association traces: per-frame detection indices, `-` for none |
//! | `a.posdist` | optional per-frame distance from the position-aided prediction to its detection |

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::GlobalPowerVector;
use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::scene::BBox;
use crate::semantics::{rle_decode, rle_encode, MaskGrid, Run, SemanticMessage};

pub const RECORD_HEADER: &str = "#dsbeam-records";
pub const RECORD_VERSION: u32 = 1;

/// Transmitter observation chosen by a tracker at one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackedObject {
    pub bbox: BBox,
    pub mask: MaskGrid,
    pub color: [u8; 3],
}

/// Per-frame detection indices of the different identifiers, kept for the
/// association metrics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AssociationTrace {
    pub bbox: Vec<Option<usize>>,
    pub mask: Vec<Option<usize>>,
    pub position: Vec<Option<usize>>,
    pub position_distance: Vec<f64>,
    pub truth: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSample {
    pub id: u64,
    pub node: usize,
    pub start_timestamp: u32,
    pub beams: usize,
    pub ula: usize,
    pub label: usize,
    /// First-frame global power vector (all arrays).
    pub power: Vec<f64>,
    /// Bbox-mode track.
    pub bbox_track: Vec<BBox>,
    /// Mask-mode track.
    pub mask_track: Vec<TrackedObject>,
    pub tx_positions: Vec<Vec2>,
    pub distance: f64,
    pub avg_objects: f64,
    pub association: Option<AssociationTrace>,
}

impl SequenceSample {
    pub fn steps(&self) -> usize {
        self.bbox_track.len()
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.steps();
        if r == 0 || self.mask_track.len() != r || self.tx_positions.len() != r {
            return Err(Error::Invalid("sample tracks must all hold r frames".into()));
        }
        if self.label >= self.beams {
            return Err(Error::Invalid(format!("label {} out of range for {} beams", self.label, self.beams)));
        }
        if self.power.len() != 3 * self.beams {
            return Err(Error::Invalid("power vector must hold 3q values".into()));
        }
        if !(self.distance >= 0.0) || !(self.avg_objects >= 1.0) {
            return Err(Error::Invalid("distance must be >= 0 and object count >= 1".into()));
        }
        if let Some(a) = &self.association {
            if [a.bbox.len(), a.mask.len(), a.position.len(), a.position_distance.len(), a.truth.len()]
                .iter()
                .any(|&n| n != r)
            {
                return Err(Error::Invalid("association traces must hold r frames".into()));
            }
        }
        Ok(())
    }
}

/// One simulated frame as seen by a node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeFrame {
    pub timestamp: u32,
    /// Detector output with truth ids.
    pub message: SemanticMessage,
    /// The same message after the wire round trip.
    pub received: SemanticMessage,
    pub power: GlobalPowerVector<f64>,
    pub tx_id: u32,
    pub tx_position: Vec2,
}

impl NodeFrame {
    pub fn tx_index(&self) -> Option<usize> {
        self.message.index_of_truth(self.tx_id)
    }
}

/// All length-`r` windows with stride 1.
pub fn window_sequences<F>(frames: &[F], r: usize) -> Vec<&[F]> {
    if r == 0 {
        return Vec::new();
    }
    frames.windows(r).collect()
}

/// Keeps windows in which the node detected the transmitter in every frame.
pub fn filter_tx_in_fov<'a>(windows: Vec<&'a [NodeFrame]>) -> Vec<&'a [NodeFrame]> {
    windows
        .into_iter()
        .filter(|w| w.iter().all(|f| f.tx_index().is_some()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Seeded shuffle, then contiguous partition.
    Shuffle,
    /// Contiguous blocks in input order: train, then validation, then test.
    Block,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train: u32,
    pub val: u32,
    pub test: u32,
    pub seed: u64,
    pub mode: SplitMode,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 70,
            val: 20,
            test: 10,
            seed: 0,
            mode: SplitMode::Shuffle,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train == 0 || self.val == 0 || self.test == 0 || self.train + self.val + self.test != 100 {
            return Err(Error::config("split ratios must be positive and sum to 100"));
        }
        Ok(())
    }

    /// `(train, val, test)` sizes: validation and test are floored, the
    /// remainder goes to training.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let val = n * self.val as usize / 100;
        let test = n * self.test as usize / 100;
        (n - val - test, val, test)
    }
}

/// Index partition of `0..n`.
pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Empty("cannot split an empty dataset".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    if spec.mode == SplitMode::Shuffle {
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    }
    let (tr, va, _) = spec.sizes(n);
    let test = idx.split_off(tr + va);
    let val = idx.split_off(tr);
    Ok((idx, val, test))
}

pub fn split<T: Clone>(items: &[T], spec: &SplitSpec) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let (a, b, c) = split_indices(items.len(), spec)?;
    let pick = |ix: Vec<usize>| ix.into_iter().map(|i| items[i].clone()).collect();
    Ok((pick(a), pick(b), pick(c)))
}

fn f(v: f64) -> String {
    format!("{v:.16e}")
}

fn floats(vs: &[f64]) -> String {
    vs.iter().map(|&v| f(v)).collect::<Vec<_>>().join(",")
}

fn opt_indices(vs: &[Option<usize>]) -> String {
    vs.iter()
        .map(|v| v.map_or("-".to_string(), |i| i.to_string()))
        .collect::<Vec<_>>()
        .join(",")
}

fn bbox_str(b: &BBox) -> String {
    floats(&[b.xc, b.yc, b.w, b.h])
}

fn mask_str(m: &MaskGrid) -> String {
    let runs = rle_encode(m);
    let mut s = format!("{},{},{}", m.width(), m.height(), runs[0].value as u8);
    for r in runs {
        let _ = write!(s, ",{}", r.len);
    }
    s
}

/// One record line, without the trailing newline.
pub fn format_record(s: &SequenceSample) -> String {
    let mut out = format!(
        "id={} node={} r={} q={} ula={} label={} ts={} distance={} objects={} power={}",
        s.id,
        s.node,
        s.steps(),
        s.beams,
        s.ula,
        s.label,
        s.start_timestamp,
        f(s.distance),
        f(s.avg_objects),
        floats(&s.power)
    );
    for (t, (b, m)) in s.bbox_track.iter().zip(&s.mask_track).enumerate() {
        let _ = write!(
            out,
            " b{t}={} m{t}={} c{t}={},{},{} k{t}={} tx{t}={}",
            bbox_str(b),
            bbox_str(&m.bbox),
            m.color[0],
            m.color[1],
            m.color[2],
            mask_str(&m.mask),
            floats(&[s.tx_positions[t].x, s.tx_positions[t].y])
        );
    }
    if let Some(a) = &s.association {
        let _ = write!(
            out,
            " a.bbox={} a.mask={} a.pos={} a.posdist={} a.truth={}",
            opt_indices(&a.bbox),
            opt_indices(&a.mask),
            opt_indices(&a.position),
            floats(&a.position_distance),
            opt_indices(&a.truth)
        );
    }
    out
}

pub fn records_to_string(samples: &[SequenceSample]) -> String {
    let mut out = format!("{RECORD_HEADER} version={RECORD_VERSION}\n");
    for s in samples {
        out.push_str(&format_record(s));
        out.push('\n');
    }
    out
}

pub fn save_records(path: &Path, samples: &[SequenceSample]) -> Result<()> {
    std::fs::write(path, records_to_string(samples))?;
    Ok(())
}

struct LineParser<'a> {
    line: usize,
    fields: Vec<(&'a str, &'a str)>,
}

impl<'a> LineParser<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Record {
            line: self.line,
            msg: msg.into(),
        }
    }

    fn get(&self, key: &str) -> Option<&'a str> {
        self.fields.iter().find(|(k, _)| *k == key).map(|(_, v)| *v)
    }

    fn req(&self, key: &str) -> Result<&'a str> {
        self.get(key).ok_or_else(|| self.err(format!("missing key `{key}`")))
    }

    fn num<N: std::str::FromStr>(&self, key: &str) -> Result<N> {
        let v = self.req(key)?;
        v.parse().map_err(|_| self.err(format!("`{key}`: cannot parse `{v}`")))
    }

    fn list<N: std::str::FromStr>(&self, key: &str, v: &str) -> Result<Vec<N>> {
        v.split(',')
            .map(|x| x.parse().map_err(|_| self.err(format!("`{key}`: cannot parse `{x}`"))))
            .collect()
    }

    fn floats(&self, key: &str, n: Option<usize>) -> Result<Vec<f64>> {
        let v: Vec<f64> = self.list(key, self.req(key)?)?;
        if n.is_some_and(|n| n != v.len()) {
            return Err(self.err(format!("`{key}` needs {} values, got {}", n.unwrap(), v.len())));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(self.err(format!("`{key}` holds a non-finite value")));
        }
        Ok(v)
    }

    fn bbox(&self, key: &str) -> Result<BBox> {
        let v = self.floats(key, Some(4))?;
        Ok(BBox::new(v[0], v[1], v[2], v[3]))
    }

    fn mask(&self, key: &str) -> Result<MaskGrid> {
        let v: Vec<u32> = self.list(key, self.req(key)?)?;
        if v.len() < 4 || v[2] > 1 {
            return Err(self.err(format!("`{key}` must be W,H,lead,runs...")));
        }
        let mut value = v[2] == 1;
        let runs: Vec<Run> = v[3..]
            .iter()
            .map(|&len| {
                let r = Run { value, len };
                value = !value;
                r
            })
            .collect();
        rle_decode(&runs, v[0] as usize, v[1] as usize).map_err(|e| self.err(format!("`{key}`: {e}")))
    }

    fn opt_indices(&self, key: &str, r: usize) -> Result<Vec<Option<usize>>> {
        let v = self.req(key)?;
        let out: Vec<Option<usize>> = v
            .split(',')
            .map(|x| {
                if x == "-" {
                    Ok(None)
                } else {
                    x.parse().map(Some).map_err(|_| self.err(format!("`{key}`: cannot parse `{x}`")))
                }
            })
            .collect::<Result<_>>()?;
        if out.len() != r {
            return Err(self.err(format!("`{key}` needs {r} entries")));
        }
        Ok(out)
    }
}

pub fn parse_record(line: &str, line_no: usize) -> Result<SequenceSample> {
    let mut fields = Vec::new();
    for tok in line.split(' ').filter(|t| !t.is_empty()) {
        let (k, v) = tok.split_once('=').ok_or_else(|| Error::Record {
            line: line_no,
            msg: format!("`{tok}` is not key=value"),
        })?;
        fields.push((k, v));
    }
    let p = LineParser { line: line_no, fields };
    let r: usize = p.num("r")?;
    let beams: usize = p.num("q")?;
    if r == 0 || beams == 0 {
        return Err(p.err("r and q must be positive"));
    }
    let mut bbox_track = Vec::with_capacity(r);
    let mut mask_track = Vec::with_capacity(r);
    let mut tx_positions = Vec::with_capacity(r);
    for t in 0..r {
        let mask = p.mask(&format!("k{t}"))?;
        let c: Vec<u8> = p.list(&format!("c{t}"), p.req(&format!("c{t}"))?)?;
        if c.len() != 3 {
            return Err(p.err(format!("`c{t}` needs 3 values")));
        }
        bbox_track.push(p.bbox(&format!("b{t}"))?);
        mask_track.push(TrackedObject {
            bbox: p.bbox(&format!("m{t}"))?,
            mask,
            color: [c[0], c[1], c[2]],
        });
        let tx = p.floats(&format!("tx{t}"), Some(2))?;
        tx_positions.push(Vec2::new(tx[0], tx[1]));
    }
    let association = if p.get("a.bbox").is_some() {
        Some(AssociationTrace {
            bbox: p.opt_indices("a.bbox", r)?,
            mask: p.opt_indices("a.mask", r)?,
            position: p.opt_indices("a.pos", r)?,
            position_distance: p.floats("a.posdist", Some(r))?,
            truth: p.opt_indices("a.truth", r)?,
        })
    } else {
        None
    };
    let known = |k: &str| {
        matches!(k, "id" | "node" | "r" | "q" | "ula" | "label" | "ts" | "distance" | "objects" | "power")
            || k.starts_with("a.")
            || ["b", "m", "c", "k", "tx"].iter().any(|pre| {
                k.strip_prefix(pre)
                    .and_then(|n| n.parse::<usize>().ok())
                    .is_some_and(|n| n < r)
            })
    };
    if let Some((k, _)) = p.fields.iter().find(|(k, _)| !known(k)) {
        return Err(p.err(format!("unknown key `{k}`")));
    }
    let s = SequenceSample {
        id: p.num("id")?,
        node: p.num("node")?,
        start_timestamp: p.num("ts")?,
        beams,
        ula: p.num("ula")?,
        label: p.num("label")?,
        power: p.floats("power", Some(3 * beams))?,
        bbox_track,
        mask_track,
        tx_positions,
        distance: p.num("distance")?,
        avg_objects: p.num("objects")?,
        association,
    };
    s.validate().map_err(|e| p.err(e.to_string()))?;
    Ok(s)
}

pub fn parse_records(text: &str) -> Result<Vec<SequenceSample>> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    let version = header
        .strip_prefix(RECORD_HEADER)
        .and_then(|rest| rest.trim().strip_prefix("version="))
        .ok_or(Error::Record {
            line: 1,
            msg: format!("expected `{RECORD_HEADER} version=N` header"),
        })?;
    if version != RECORD_VERSION.to_string() {
        return Err(Error::Record {
            line: 1,
            msg: format!("unsupported record version {version}"),
        });
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_record(line, i + 2)?);
    }
    if !text.is_empty() && !text.ends_with('\n') {
        return Err(Error::Record {
            line: text.lines().count(),
            msg: "file is truncated (last line has no newline)".into(),
        });
    }
    Ok(out)
}

pub fn load_records(path: &Path) -> Result<Vec<SequenceSample>> {
    parse_records(&std::fs::read_to_string(path)?)
}

/// How DeepSense-style exports map onto the record schema. No image
/// processing is done here; a detector and tracker must first turn each
/// image into the tracked bbox, mask and color fields.
pub const DEEPSENSE_MAPPING: &[(&str, &str)] = &[
    ("unit1_pwr_60ghz (per-sample txt, 64 values)", "power (serving array slice; other arrays zero)"),
    ("unit1_beam_index / argmax of unit1_pwr_60ghz", "label, ula"),
    ("unitN_rgb sequence of r images", "b{t}, m{t}, c{t}, k{t} after detection and tracking"),
    ("unit2_loc / GPS lat,lon", "tx{t} after projection to local meters"),
    ("seq_index, time_stamp", "id, ts"),
    ("distributed camera unit number", "node"),
];

/// Builds one record from DeepSense-style fields that a detector and
/// tracker have already reduced to tracked objects.
#[allow(clippy::too_many_arguments)]
pub fn from_deepsense_fields(
    id: u64,
    node: usize,
    timestamp: u32,
    serving_power: &[f64],
    serving_ula: usize,
    tracked: Vec<TrackedObject>,
    positions_m: Vec<Vec2>,
    node_position_m: Vec2,
    object_counts: &[usize],
) -> Result<SequenceSample> {
    let q = serving_power.len();
    if q == 0 || serving_ula >= 3 {
        return Err(Error::Invalid("serving power must be nonempty and the array id below 3".into()));
    }
    let mut power = vec![0.0; 3 * q];
    power[serving_ula * q..(serving_ula + 1) * q].copy_from_slice(serving_power);
    let label = (0..q).fold(0, |b, i| if serving_power[i] > serving_power[b] { i } else { b });
    let last = *positions_m.last().ok_or_else(|| Error::Empty("no frames".into()))?;
    let s = SequenceSample {
        id,
        node,
        start_timestamp: timestamp,
        beams: q,
        ula: serving_ula,
        label,
        power,
        bbox_track: tracked.iter().map(|o| o.bbox).collect(),
        mask_track: tracked,
        tx_positions: positions_m,
        distance: last.distance(node_position_m),
        avg_objects: object_counts.iter().sum::<usize>() as f64 / object_counts.len().max(1) as f64,
        association: None,
    };
    s.validate()?;
    Ok(s)
}
