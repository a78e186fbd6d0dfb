//! Synthetic V2I scenes: one basestation, two distributed camera nodes, a
//! road network, one transmitter vehicle and stochastic clutter traffic.

mod camera;

pub use camera::{project_to_camera, BBox, CameraModel};

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{cw_distance, relative_bearing, Vec2};

/// Number of distributed nodes; regions are `0..=NODE_COUNT`.
pub const NODE_COUNT: usize = 2;
pub const REGION_COUNT: usize = NODE_COUNT + 1;

/// Angular tolerance for boundary ties in [`subregion_of`].
const BOUNDARY_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VehicleClass {
    Car,
    Bus,
    Bike,
    Pedestrian,
}

impl VehicleClass {
    pub const ALL: [VehicleClass; 4] = [Self::Car, Self::Bus, Self::Bike, Self::Pedestrian];

    pub fn code(self) -> u8 {
        match self {
            Self::Car => 0,
            Self::Bus => 1,
            Self::Bike => 2,
            Self::Pedestrian => 3,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Car => "car",
            Self::Bus => "bus",
            Self::Bike => "bike",
            Self::Pedestrian => "pedestrian",
        }
    }

    pub fn footprint(self) -> Footprint {
        match self {
            Self::Car => Footprint { length: 4.5, width: 1.8, height: 1.5 },
            Self::Bus => Footprint { length: 12.0, width: 2.5, height: 3.2 },
            Self::Bike => Footprint { length: 1.8, width: 0.6, height: 1.7 },
            Self::Pedestrian => Footprint { length: 0.5, width: 0.5, height: 1.75 },
        }
    }

    /// Speed range in m/s.
    fn speed_range(self) -> (f64, f64) {
        match self {
            Self::Car => (6.0, 14.0),
            Self::Bus => (5.0, 10.0),
            Self::Bike => (3.0, 7.0),
            Self::Pedestrian => (0.8, 1.8),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Footprint {
    pub length: f64,
    pub width: f64,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub id: u32,
    pub position: Vec2,
    pub velocity: Vec2,
    pub footprint: Footprint,
    pub color: [u8; 3],
    pub class: VehicleClass,
    pub is_transmitter: bool,
}

impl VehicleState {
    /// Direction of travel; stationary vehicles face +x.
    pub fn heading(&self) -> f64 {
        if self.velocity.norm() == 0.0 {
            0.0
        } else {
            self.velocity.angle()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub timestamp: u32,
    pub vehicles: Vec<VehicleState>,
}

impl Frame {
    pub fn transmitter(&self) -> Option<&VehicleState> {
        self.vehicles.iter().find(|v| v.is_transmitter)
    }
}

/// Two-lane road along a planar polyline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Road {
    pub points: Vec<Vec2>,
    pub lane_width: f64,
}

impl Road {
    pub fn length(&self) -> f64 {
        self.points.windows(2).map(|w| w[0].distance(w[1])).sum()
    }

    /// Position and unit tangent at arc length `s` (clamped to the road).
    pub fn point_at(&self, s: f64) -> (Vec2, Vec2) {
        let mut rest = s.max(0.0);
        for w in self.points.windows(2) {
            let seg = w[0].distance(w[1]);
            let dir = (w[1] - w[0]).normalized();
            if rest <= seg {
                return (w[0] + dir * rest, dir);
            }
            rest -= seg;
        }
        let n = self.points.len();
        let dir = (self.points[n - 1] - self.points[n - 2]).normalized();
        (self.points[n - 1], dir)
    }

    /// Lateral distance from `p` to the polyline.
    pub fn distance_to(&self, p: Vec2) -> f64 {
        self.points
            .windows(2)
            .map(|w| {
                let d = w[1] - w[0];
                let t = ((p - w[0]).dot(d) / d.dot(d)).clamp(0.0, 1.0);
                p.distance(w[0] + d * t)
            })
            .fold(f64::INFINITY, f64::min)
    }
}

/// Clockwise bearings (relative to the basestation heading) where the
/// regions meet. Region 0 spans `left_front -> front_right`, region 1
/// `front_right -> right_left`, region 2 `right_left -> left_front`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubregionBounds {
    pub front_right: f64,
    pub right_left: f64,
    pub left_front: f64,
}

impl Default for SubregionBounds {
    fn default() -> Self {
        Self {
            front_right: FRAC_PI_4,
            right_left: PI,
            left_front: -FRAC_PI_4,
        }
    }
}

impl SubregionBounds {
    fn arcs(&self) -> [(f64, f64); REGION_COUNT] {
        [
            (self.left_front, self.front_right),
            (self.front_right, self.right_left),
            (self.right_left, self.left_front),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let spans: Vec<f64> = self.arcs().iter().map(|&(a, b)| cw_distance(a, b)).collect();
        let total: f64 = spans.iter().sum();
        if spans.iter().any(|&s| s <= 0.0) || (total - 2.0 * PI).abs() > 1e-9 {
            return Err(Error::config(
                "subregion boundaries must be three distinct bearings in clockwise order",
            ));
        }
        Ok(())
    }

    /// Region whose arc contains the bearing; ties go to the lower id.
    pub fn region_of_bearing(&self, bearing: f64) -> usize {
        for (id, (start, end)) in self.arcs().into_iter().enumerate() {
            let span = cw_distance(start, end);
            let mut off = cw_distance(start, bearing);
            if off > 2.0 * PI - BOUNDARY_EPS {
                off = 0.0;
            }
            if off <= span + BOUNDARY_EPS {
                return id;
            }
        }
        // unreachable for validated bounds: the arcs cover the circle
        0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub roads: Vec<Road>,
    pub bs_position: Vec2,
    pub bs_heading: f64,
    pub bs_camera: CameraModel,
    /// Node 1 (right of the basestation), node 2 (left).
    pub nodes: [CameraModel; NODE_COUNT],
    pub bounds: SubregionBounds,
    pub timestep: f64,
    pub frame_count: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        let fov = FRAC_PI_2;
        let (w, h) = (1280, 720);
        Self {
            roads: vec![Road {
                points: vec![
                    Vec2::new(-110.0, 22.0),
                    Vec2::new(-40.0, 25.0),
                    Vec2::new(40.0, 25.0),
                    Vec2::new(110.0, 22.0),
                ],
                lane_width: 3.5,
            }],
            bs_position: Vec2::new(0.0, 0.0),
            bs_heading: FRAC_PI_2,
            bs_camera: CameraModel::new(Vec2::new(0.0, 0.0), 6.0, FRAC_PI_2, fov, w, h),
            nodes: [
                CameraModel::new(Vec2::new(68.0, -25.0), 6.0, FRAC_PI_2, fov, w, h),
                CameraModel::new(Vec2::new(-68.0, -25.0), 6.0, FRAC_PI_2, fov, w, h),
            ],
            bounds: SubregionBounds::default(),
            timestep: 0.1,
            frame_count: 1000,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.roads.is_empty() {
            return Err(Error::config("road set is empty"));
        }
        for r in &self.roads {
            if r.points.len() < 2 || r.length() <= 0.0 {
                return Err(Error::config("each road needs at least two distinct points"));
            }
            if r.lane_width <= 0.0 {
                return Err(Error::config("lane width must be positive"));
            }
        }
        if !(self.timestep > 0.0) {
            return Err(Error::config("timestep must be positive"));
        }
        if self.frame_count == 0 {
            return Err(Error::config("frame count must be at least 1"));
        }
        self.bounds.validate()?;
        self.bs_camera.validate()?;
        for n in &self.nodes {
            n.validate()?;
        }
        Ok(())
    }

    /// Camera serving a region: 0 is the basestation camera, `i` is node `i`.
    pub fn camera(&self, region: usize) -> &CameraModel {
        match region {
            0 => &self.bs_camera,
            i => &self.nodes[i - 1],
        }
    }
}

/// Region id of a planar position around the basestation.
pub fn subregion_of(config: &WorldConfig, position: Vec2) -> usize {
    let bearing = relative_bearing(config.bs_position, config.bs_heading, position);
    config.bounds.region_of_bearing(bearing)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrafficParams {
    /// Expected number of clutter objects present per frame.
    pub clutter_density: f64,
    /// Mean clutter lifetime in frames (geometric).
    pub clutter_lifetime: f64,
    /// Relative weights of car, bus, bike, pedestrian clutter.
    pub class_mix: [f64; 4],
    pub transmitter_speed: f64,
    pub transmitter_color: [u8; 3],
    /// Index into `WorldConfig::roads` followed by the transmitter.
    pub transmitter_road: usize,
}

impl Default for TrafficParams {
    fn default() -> Self {
        Self {
            clutter_density: 3.0,
            clutter_lifetime: 10.0,
            class_mix: [0.6, 0.1, 0.15, 0.15],
            transmitter_speed: 10.0,
            transmitter_color: [196, 40, 36],
            transmitter_road: 0,
        }
    }
}

#[derive(Debug, Clone)]
struct Agent {
    id: u32,
    road: usize,
    s: f64,
    dir: f64,
    speed: f64,
    lateral: f64,
    class: VehicleClass,
    color: [u8; 3],
}

impl Agent {
    fn lane_offset(class: VehicleClass, lane_width: f64, dir: f64) -> f64 {
        // right-hand traffic: offset to the right of travel
        let base = match class {
            VehicleClass::Car | VehicleClass::Bus => lane_width * 0.5,
            VehicleClass::Bike | VehicleClass::Pedestrian => lane_width - 0.4,
        };
        base * dir
    }

    fn advance(&mut self, roads: &[Road], dt: f64) {
        let road = &roads[self.road];
        let len = road.length();
        self.s += self.dir * self.speed * dt;
        if self.s > len {
            self.s = (2.0 * len - self.s).max(0.0);
            self.dir = -1.0;
        } else if self.s < 0.0 {
            self.s = (-self.s).min(len);
            self.dir = 1.0;
        }
        // drift toward the lane for the current direction; bounded so a
        // U-turn takes a few frames
        let target = Self::lane_offset(self.class, road.lane_width, self.dir);
        let step = 0.5 * self.speed * dt;
        self.lateral += (target - self.lateral).clamp(-step, step);
    }

    fn state(&self, roads: &[Road], is_transmitter: bool) -> VehicleState {
        let (p, tangent) = roads[self.road].point_at(self.s);
        let position = p + tangent.right_normal() * self.lateral;
        VehicleState {
            id: self.id,
            position,
            velocity: tangent * (self.dir * self.speed),
            footprint: self.class.footprint(),
            color: self.color,
            class: self.class,
            is_transmitter,
        }
    }
}

fn spawn_clutter(rng: &mut ChaCha8Rng, id: u32, roads: &[Road], traffic: &TrafficParams) -> Agent {
    let road = rng.gen_range(0..roads.len());
    let total: f64 = traffic.class_mix.iter().sum();
    let mut pick = rng.gen::<f64>() * total;
    let mut class = VehicleClass::Car;
    for (c, w) in VehicleClass::ALL.iter().zip(traffic.class_mix) {
        if pick < w {
            class = *c;
            break;
        }
        pick -= w;
    }
    let (lo, hi) = class.speed_range();
    let dir = if rng.gen::<bool>() { 1.0 } else { -1.0 };
    Agent {
        id,
        road,
        s: rng.gen::<f64>() * roads[road].length(),
        dir,
        speed: rng.gen_range(lo..hi),
        lateral: Agent::lane_offset(class, roads[road].lane_width, dir),
        class,
        color: [rng.gen(), rng.gen(), rng.gen()],
    }
}

/// Deterministic scenario for `(config, traffic, seed)`.
///
/// Clutter follows a birth-death process whose stationary population is
/// Poisson with mean `clutter_density`; the first frame is drawn from that
/// stationary law so there is no warm-up bias.
pub fn generate_scenario(config: &WorldConfig, traffic: &TrafficParams, seed: u64) -> Result<Vec<Frame>> {
    config.validate()?;
    if traffic.transmitter_road >= config.roads.len() {
        return Err(Error::config("transmitter road index out of range"));
    }
    if traffic.clutter_density < 0.0 || !traffic.clutter_density.is_finite() {
        return Err(Error::config("clutter density must be finite and non-negative"));
    }
    if traffic.clutter_density > 0.0 && !(traffic.clutter_lifetime >= 1.0) {
        return Err(Error::config("clutter lifetime must be at least one frame"));
    }
    if traffic.class_mix.iter().any(|w| *w < 0.0) || traffic.class_mix.iter().sum::<f64>() <= 0.0 {
        return Err(Error::config("class mix weights must be non-negative with a positive sum"));
    }

    let roads = &config.roads;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tx_road = traffic.transmitter_road;
    let tx_len = roads[tx_road].length();
    let mut tx = Agent {
        id: 0,
        road: tx_road,
        s: rng.gen::<f64>() * tx_len,
        dir: 1.0,
        speed: traffic.transmitter_speed,
        lateral: Agent::lane_offset(VehicleClass::Car, roads[tx_road].lane_width, 1.0),
        class: VehicleClass::Car,
        color: traffic.transmitter_color,
    };

    let mut next_id = 1u32;
    let mut clutter: Vec<Agent> = Vec::new();
    let density = traffic.clutter_density;
    if density > 0.0 {
        let initial = Poisson::new(density).map_err(|e| Error::config(e.to_string()))?.sample(&mut rng) as usize;
        for _ in 0..initial {
            clutter.push(spawn_clutter(&mut rng, next_id, roads, traffic));
            next_id += 1;
        }
    }
    let births = if density > 0.0 {
        Some(Poisson::new(density / traffic.clutter_lifetime).map_err(|e| Error::config(e.to_string()))?)
    } else {
        None
    };
    let death_p = if density > 0.0 { 1.0 / traffic.clutter_lifetime } else { 0.0 };

    let mut frames = Vec::with_capacity(config.frame_count);
    for t in 0..config.frame_count {
        if t > 0 {
            tx.advance(roads, config.timestep);
            let mut survivors = Vec::with_capacity(clutter.len());
            for mut a in clutter.drain(..) {
                if rng.gen::<f64>() < death_p {
                    continue;
                }
                a.advance(roads, config.timestep);
                survivors.push(a);
            }
            clutter = survivors;
            if let Some(b) = &births {
                let n = b.sample(&mut rng) as usize;
                for _ in 0..n {
                    clutter.push(spawn_clutter(&mut rng, next_id, roads, traffic));
                    next_id += 1;
                }
            }
        }
        let mut vehicles = Vec::with_capacity(clutter.len() + 1);
        vehicles.push(tx.state(roads, true));
        vehicles.extend(clutter.iter().map(|a| a.state(roads, false)));
        frames.push(Frame {
            timestamp: t as u32,
            vehicles,
        });
    }
    Ok(frames)
}
