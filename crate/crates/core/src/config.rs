//! Experiment configuration, read from TOML.
//!
//! Every key is optional; omitted keys take the defaults below. A separate
//! world file may be referenced with `world = "path"` (resolved relative to
//! the experiment file); otherwise the built-in world is used.
//!
//! ```toml
//! seed = 1
//! frames = 14000
//! window = 5
//! beams = 64
//! elements = 16
//! models = ["bbox-fcnn", "mask-lenet", "bbox-lstm", "mask-lstm"]
//! nodes = [1, 2]
//!
//! [traffic]
//! clutter_density = 3.0
//!
//! [detector]
//! mask_width = 64
//! mask_height = 16
//!
//! [train.bbox-lstm]
//! epochs = 5
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::channel::ChannelConfig;
use crate::dataset::SplitSpec;
use crate::error::{Error, Result};
use crate::models::BeamModelKind;
use crate::nn::TrainSpec;
use crate::scene::{TrafficParams, WorldConfig, NODE_COUNT};
use crate::semantics::DetectorNoise;
use crate::track::COLOR_EPSILON;

/// Optional per-model overrides of the default training schedule.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOverride {
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub decay_epochs: Option<Vec<usize>>,
    pub decay_factor: Option<f64>,
    pub epochs: Option<usize>,
}

impl TrainOverride {
    fn apply(&self, mut s: TrainSpec) -> TrainSpec {
        if let Some(v) = self.batch_size {
            s.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            s.learning_rate = v;
        }
        if let Some(v) = &self.decay_epochs {
            s.decay_epochs = v.clone();
        }
        if let Some(v) = self.decay_factor {
            s.decay_factor = v;
        }
        if let Some(v) = self.epochs {
            s.epochs = v;
        }
        s
    }
}

/// Names of the two identifier networks in `[train.*]` tables.
pub const POWER_IDENT: &str = "power-fcnn";
pub const POSITION_IDENT: &str = "position-fcnn";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every random stream is derived from it.
    pub seed: u64,
    pub frames: usize,
    /// Path of a world TOML file, relative to the experiment file.
    pub world: Option<PathBuf>,
    /// Sliding-window length r.
    pub window: usize,
    /// Beams per array (Q).
    pub beams: usize,
    /// Elements per array (M).
    pub elements: usize,
    pub traffic: TrafficParams,
    pub channel: ChannelConfig,
    pub detector: DetectorNoise,
    pub split: SplitSpec,
    pub color_epsilon: f64,
    /// Association exclusion threshold in pixels; default is half the median
    /// bbox diagonal of the evaluated tracks.
    pub association_threshold: Option<f64>,
    /// Overrides the epoch count of every network when set.
    pub epochs: Option<usize>,
    pub train: BTreeMap<String, TrainOverride>,
    pub models: Vec<BeamModelKind>,
    pub nodes: Vec<usize>,
    pub output: PathBuf,
    #[serde(skip)]
    pub world_config: WorldConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            frames: 1000,
            world: None,
            window: 5,
            beams: 64,
            elements: 16,
            traffic: TrafficParams::default(),
            channel: ChannelConfig::default(),
            detector: DetectorNoise::default(),
            split: SplitSpec::default(),
            color_epsilon: COLOR_EPSILON,
            association_threshold: None,
            epochs: None,
            train: BTreeMap::new(),
            models: BeamModelKind::ALL.to_vec(),
            nodes: vec![1, 2],
            output: PathBuf::from("out"),
            world_config: WorldConfig::default(),
        }
    }
}

/// Distinct stream seeds derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedStream {
    Scenario,
    Detector,
    Channel,
    Split,
    Train,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut c: ExperimentConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        if let Some(w) = &c.world {
            let path = base.map_or_else(|| w.clone(), |b| b.join(w));
            let body = std::fs::read_to_string(&path)
                .map_err(|e| Error::config(format!("world file {}: {e}", path.display())))?;
            c.world_config = toml::from_str(&body).map_err(|e| Error::config(format!("world file {}: {e}", path.display())))?;
        }
        c.world_config.frame_count = c.frames;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config(format!("config {}: {e}", path.display())))?;
        Self::from_toml(&text, path.parent())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.window == 0 || self.beams == 0 || self.elements == 0 {
            return Err(Error::config("frames, window, beams and elements must be positive"));
        }
        if self.nodes.is_empty() || self.nodes.iter().any(|&n| n == 0 || n > NODE_COUNT) {
            return Err(Error::config(format!("nodes must be drawn from 1..={NODE_COUNT}")));
        }
        if !(self.color_epsilon >= 0.0) {
            return Err(Error::config("color_epsilon must be non-negative"));
        }
        for k in self.train.keys() {
            if k != POWER_IDENT && k != POSITION_IDENT && k.parse::<BeamModelKind>().is_err() {
                return Err(Error::config(format!("unknown [train.{k}] table")));
            }
        }
        self.world_config.validate()?;
        self.channel.validate()?;
        self.detector.validate()?;
        self.split.validate()?;
        for name in self.train.keys() {
            self.train_spec(name)?.validate()?;
        }
        Ok(())
    }

    pub fn world(&self) -> &WorldConfig {
        &self.world_config
    }

    pub fn stream_seed(&self, s: SeedStream) -> u64 {
        let tag = match s {
            SeedStream::Scenario => return self.seed,
            SeedStream::Detector => 1u64,
            SeedStream::Channel => 2,
            SeedStream::Split => 3,
            SeedStream::Train => 4,
        };
        let mut z = self.seed.wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Training schedule for a beam model or identifier: the default
    /// schedule, then the global epoch override, then `[train.<name>]`.
    pub fn train_spec(&self, name: &str) -> Result<TrainSpec> {
        let base = match name {
            POWER_IDENT => TrainSpec::power_fcnn(),
            POSITION_IDENT => TrainSpec::position_fcnn(),
            other => other.parse::<BeamModelKind>()?.default_train_spec(),
        };
        let mut s = base.with_seed(self.stream_seed(SeedStream::Train));
        if let Some(e) = self.epochs {
            s.epochs = e;
        }
        if let Some(o) = self.train.get(name) {
            s = o.apply(s);
        }
        Ok(s)
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            seed: self.stream_seed(SeedStream::Split),
            ..self.split
        }
    }
}
