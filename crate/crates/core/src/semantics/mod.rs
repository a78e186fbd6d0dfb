//! Per-node semantic messages: a simulated detector that turns ground truth
//! into noisy bounding boxes, masks and colors, plus the wire codec used to
//! ship them to the basestation.

mod mask;
pub mod wire;

pub use mask::{rasterize_mask, rle_decode, rle_encode, MaskGrid, Run};
pub use wire::{decode_message, decode_stream, encode_message, message_bytes};

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{BBox, CameraModel, Frame, VehicleClass};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class: VehicleClass,
    pub confidence: f64,
    pub mask: MaskGrid,
    /// Median RGB color of the masked pixels.
    pub color: [u8; 3],
    /// Ground-truth vehicle id; simulation only, never serialized.
    pub truth_id: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticMessage {
    pub node_id: u8,
    pub timestamp: u32,
    pub detections: Vec<Detection>,
}

impl SemanticMessage {
    /// Detection count `U`.
    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    pub fn centers(&self) -> Vec<[f64; 2]> {
        self.detections.iter().map(|d| d.bbox.center()).collect()
    }

    /// Index of the detection carrying `truth_id`.
    pub fn index_of_truth(&self, truth_id: u32) -> Option<usize> {
        self.detections.iter().position(|d| d.truth_id == Some(truth_id))
    }

    pub fn without_truth(&self) -> SemanticMessage {
        let mut m = self.clone();
        for d in &mut m.detections {
            d.truth_id = None;
        }
        m
    }
}

impl fmt::Display for SemanticMessage {
    /// Human-readable dump of a message.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "message node={} t={} U={} bytes={}",
            self.node_id,
            self.timestamp,
            self.len(),
            message_bytes(self)
        )?;
        for (i, d) in self.detections.iter().enumerate() {
            writeln!(
                f,
                "  [{i}] {:<10} conf={:.3} bbox=[{:.2}, {:.2}, {:.2}, {:.2}] rgb=({}, {}, {}) mask={}x{} ones={} runs={}",
                d.class.name(),
                d.confidence,
                d.bbox.xc,
                d.bbox.yc,
                d.bbox.w,
                d.bbox.h,
                d.color[0],
                d.color[1],
                d.color[2],
                d.mask.width(),
                d.mask.height(),
                d.mask.count_ones(),
                rle_encode(&d.mask).len()
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorNoise {
    pub miss_prob: f64,
    /// Gaussian jitter per bbox coordinate, pixels.
    pub bbox_sigma: f64,
    /// Per-detection color noise, per channel.
    pub color_sigma: f64,
    /// Frame-wide brightness offset std-dev, shared by all detections.
    pub illumination_sigma: f64,
    /// Mean false-positive detections per frame.
    pub false_positive_rate: f64,
    /// Fraction of a bbox covered by one nearer bbox at which it is hidden.
    pub occlusion_threshold: f64,
    pub mask_width: usize,
    pub mask_height: usize,
}

impl DetectorNoise {
    pub fn noiseless() -> Self {
        Self {
            miss_prob: 0.0,
            bbox_sigma: 0.0,
            color_sigma: 0.0,
            illumination_sigma: 0.0,
            false_positive_rate: 0.0,
            occlusion_threshold: 1.0,
            mask_width: 64,
            mask_height: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.miss_prob)
            && self.bbox_sigma >= 0.0
            && self.color_sigma >= 0.0
            && self.illumination_sigma >= 0.0
            && self.false_positive_rate >= 0.0
            && self.occlusion_threshold > 0.0
            && self.mask_width > 0
            && self.mask_height > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::config("detector noise parameters out of range"))
        }
    }
}

impl Default for DetectorNoise {
    fn default() -> Self {
        Self {
            miss_prob: 0.03,
            bbox_sigma: 4.0,
            color_sigma: 4.0,
            illumination_sigma: 6.0,
            false_positive_rate: 0.1,
            occlusion_threshold: 0.8,
            mask_width: 64,
            mask_height: 64,
        }
    }
}

/// Mixes the run seed with frame and node so every message has its own stream.
pub(crate) fn stream_seed(seed: u64, timestamp: u32, node_id: u8) -> u64 {
    let mut z = seed ^ ((timestamp as u64) << 8 | node_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn confidence_for(area: f64) -> f64 {
    0.55 + 0.4 * (1.0 - (-area / 4000.0).exp())
}

fn gaussian(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        0.0
    } else {
        Normal::new(0.0, sigma).map(|n| n.sample(rng)).unwrap_or(0.0)
    }
}

/// Simulated detector standing in for an instance-segmentation model.
pub fn simulate_detector(
    frame: &Frame,
    cam: &CameraModel,
    node_id: u8,
    noise: &DetectorNoise,
    seed: u64,
) -> Result<SemanticMessage> {
    noise.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, frame.timestamp, node_id));
    let (img_w, img_h) = (cam.width as f64, cam.height as f64);

    let mut visible: Vec<(f64, usize, BBox)> = frame
        .vehicles
        .iter()
        .enumerate()
        .filter_map(|(i, v)| cam.project(v).map(|b| (cam.to_camera_frame(v.position).0, i, b)))
        .collect();
    visible.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let illumination = gaussian(&mut rng, noise.illumination_sigma);
    let mut detections = Vec::new();
    for (k, &(_, idx, bbox)) in visible.iter().enumerate() {
        let hidden = visible[..k]
            .iter()
            .any(|(_, _, near)| near.intersection_area(&bbox) >= noise.occlusion_threshold * bbox.area());
        if hidden {
            continue;
        }
        if noise.miss_prob > 0.0 && rng.gen::<f64>() < noise.miss_prob {
            continue;
        }
        let jittered = BBox::new(
            bbox.xc + gaussian(&mut rng, noise.bbox_sigma),
            bbox.yc + gaussian(&mut rng, noise.bbox_sigma),
            (bbox.w + gaussian(&mut rng, noise.bbox_sigma)).max(1.0),
            (bbox.h + gaussian(&mut rng, noise.bbox_sigma)).max(1.0),
        );
        let Some(b) = (if noise.bbox_sigma == 0.0 {
            Some(bbox)
        } else {
            jittered.clipped(img_w, img_h)
        }) else {
            continue;
        };
        let v = &frame.vehicles[idx];
        let mut color = [0u8; 3];
        for (c, base) in color.iter_mut().zip(v.color) {
            let x = base as f64 + illumination + gaussian(&mut rng, noise.color_sigma);
            *c = x.round().clamp(0.0, 255.0) as u8;
        }
        detections.push(Detection {
            bbox: b,
            class: v.class,
            confidence: confidence_for(b.area()),
            mask: rasterize_mask(&b, cam, noise.mask_width, noise.mask_height)?,
            color,
            truth_id: Some(v.id),
        });
    }

    if noise.false_positive_rate > 0.0 {
        let n = Poisson::new(noise.false_positive_rate)
            .map_err(|e| Error::config(e.to_string()))?
            .sample(&mut rng) as usize;
        for _ in 0..n {
            let w = rng.gen_range(20.0..200.0);
            let h = rng.gen_range(20.0..150.0);
            let b = BBox::new(rng.gen_range(0.0..img_w), rng.gen_range(img_h * 0.4..img_h), w, h)
                .clipped(img_w, img_h)
                .unwrap_or(BBox::new(img_w * 0.5, img_h * 0.5, w, h));
            detections.push(Detection {
                bbox: b,
                class: VehicleClass::ALL[rng.gen_range(0..4)],
                confidence: rng.gen_range(0.3..0.7),
                mask: rasterize_mask(&b, cam, noise.mask_width, noise.mask_height)?,
                color: [rng.gen(), rng.gen(), rng.gen()],
                truth_id: None,
            });
        }
    }
    detections.shuffle(&mut rng);
    Ok(SemanticMessage {
        node_id,
        timestamp: frame.timestamp,
        detections,
    })
}

/// `W * H * C` for the camera's raw frames.
pub fn raw_image_bytes(cam: &CameraModel) -> u64 {
    cam.raw_image_bytes()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec2;
    use crate::scene::{Footprint, VehicleState};
    use std::f64::consts::FRAC_PI_2;

    fn cam() -> CameraModel {
        CameraModel::new(Vec2::new(0.0, 0.0), 6.0, FRAC_PI_2, FRAC_PI_2, 1280, 720)
    }

    fn vehicle(id: u32, x: f64, y: f64, color: [u8; 3]) -> VehicleState {
        VehicleState {
            id,
            position: Vec2::new(x, y),
            velocity: Vec2::new(5.0, 0.0),
            footprint: Footprint { length: 4.5, width: 1.8, height: 1.5 },
            color,
            class: VehicleClass::Car,
            is_transmitter: id == 0,
        }
    }

    fn frame(vs: Vec<VehicleState>) -> Frame {
        Frame { timestamp: 3, vehicles: vs }
    }

    #[test]
    fn noiseless_pass_through() {
        let f = frame(vec![vehicle(0, 2.0, 30.0, [10, 20, 30])]);
        let m = simulate_detector(&f, &cam(), 1, &DetectorNoise::noiseless(), 4).unwrap();
        assert_eq!(m.len(), 1);
        let d = &m.detections[0];
        assert_eq!(d.bbox, cam().project(&f.vehicles[0]).unwrap());
        assert_eq!(d.color, [10, 20, 30]);
        assert_eq!(d.truth_id, Some(0));
        assert!(d.mask.count_ones() >= 1);
        assert!((0.0..=1.0).contains(&d.confidence));
    }

    #[test]
    fn all_missed() {
        let f = frame(vec![vehicle(0, 2.0, 30.0, [10, 20, 30]), vehicle(1, -5.0, 40.0, [1, 1, 1])]);
        let noise = DetectorNoise {
            miss_prob: 1.0,
            ..DetectorNoise::noiseless()
        };
        assert_eq!(simulate_detector(&f, &cam(), 1, &noise, 4).unwrap().len(), 0);
    }

    #[test]
    fn miss_rate_statistics() {
        let noise = DetectorNoise {
            miss_prob: 0.2,
            ..DetectorNoise::noiseless()
        };
        let c = cam();
        let mut hits = 0usize;
        let trials = 10_000;
        for t in 0..trials {
            let f = Frame {
                timestamp: t as u32,
                vehicles: vec![vehicle(0, 0.0, 30.0, [5, 5, 5])],
            };
            hits += simulate_detector(&f, &c, 1, &noise, 1).unwrap().len();
        }
        let rate = hits as f64 / trials as f64;
        assert!((rate - 0.8).abs() <= 0.01, "rate {rate}");
    }

    #[test]
    fn deterministic_per_frame_and_seed() {
        let f = frame(vec![vehicle(0, 2.0, 30.0, [10, 20, 30]), vehicle(1, -8.0, 35.0, [200, 1, 1])]);
        let noise = DetectorNoise::default();
        let a = simulate_detector(&f, &cam(), 2, &noise, 9).unwrap();
        let b = simulate_detector(&f, &cam(), 2, &noise, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn occluded_vehicle_hidden() {
        // same bearing, farther away and smaller: fully behind the near car
        let f = frame(vec![vehicle(0, 0.0, 20.0, [1, 2, 3]), vehicle(1, 0.0, 21.0, [9, 9, 9])]);
        let noise = DetectorNoise {
            occlusion_threshold: 0.8,
            ..DetectorNoise::noiseless()
        };
        let m = simulate_detector(&f, &cam(), 1, &noise, 1).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.detections[0].truth_id, Some(0));
    }

    #[test]
    fn detections_respect_image_bounds() {
        let vs = (0..8).map(|i| vehicle(i, -30.0 + 8.0 * i as f64, 25.0 + i as f64, [3; 3])).collect();
        let noise = DetectorNoise {
            bbox_sigma: 30.0,
            false_positive_rate: 3.0,
            ..DetectorNoise::default()
        };
        let m = simulate_detector(&frame(vs), &cam(), 1, &noise, 5).unwrap();
        for d in &m.detections {
            assert!(d.bbox.xc >= 0.0 && d.bbox.xc <= 1280.0);
            assert!(d.bbox.yc >= 0.0 && d.bbox.yc <= 720.0);
            assert!(d.bbox.w > 0.0 && d.bbox.h > 0.0);
            assert!(d.mask.count_ones() > 0);
        }
    }

    #[test]
    fn compression_for_busy_scene() {
        let vs = (0..10).map(|i| vehicle(i, -30.0 + 6.0 * i as f64, 22.0 + 2.0 * i as f64, [3; 3])).collect();
        let c = cam();
        let m = simulate_detector(&frame(vs), &c, 1, &DetectorNoise::default(), 5).unwrap();
        assert!(m.len() <= 10);
        let ratio = message_bytes(&m) as f64 / raw_image_bytes(&c) as f64;
        assert!(ratio < 0.02, "{ratio}");
    }

    #[test]
    fn text_dump_lists_detections() {
        let f = frame(vec![vehicle(0, 2.0, 30.0, [10, 20, 30])]);
        let m = simulate_detector(&f, &cam(), 1, &DetectorNoise::noiseless(), 4).unwrap();
        let s = m.to_string();
        assert!(s.starts_with("message node=1 t=3 U=1"));
        assert!(s.contains("rgb=(10, 20, 30)"));
    }
}
