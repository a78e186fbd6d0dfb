use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec2;

use super::VehicleState;

/// Pixel bounding box `[x_c, y_c, w, h]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BBox {
    pub xc: f64,
    pub yc: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(xc: f64, yc: f64, w: f64, h: f64) -> Self {
        Self { xc, yc, w, h }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self::new((x0 + x1) * 0.5, (y0 + y1) * 0.5, x1 - x0, y1 - y0)
    }

    pub fn center(&self) -> [f64; 2] {
        [self.xc, self.yc]
    }

    pub fn x0(&self) -> f64 {
        self.xc - self.w * 0.5
    }
    pub fn x1(&self) -> f64 {
        self.xc + self.w * 0.5
    }
    pub fn y0(&self) -> f64 {
        self.yc - self.h * 0.5
    }
    pub fn y1(&self) -> f64 {
        self.yc + self.h * 0.5
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn diagonal(&self) -> f64 {
        self.w.hypot(self.h)
    }

    pub fn intersection_area(&self, o: &BBox) -> f64 {
        let w = self.x1().min(o.x1()) - self.x0().max(o.x0());
        let h = self.y1().min(o.y1()) - self.y0().max(o.y0());
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn center_distance(&self, p: [f64; 2]) -> f64 {
        (self.xc - p[0]).hypot(self.yc - p[1])
    }

    /// Clips to `[0, w] x [0, h]`; `None` when nothing remains.
    pub fn clipped(&self, width: f64, height: f64) -> Option<BBox> {
        let x0 = self.x0().max(0.0);
        let x1 = self.x1().min(width);
        let y0 = self.y0().max(0.0);
        let y1 = self.y1().min(height);
        if x1 <= x0 || y1 <= y0 {
            None
        } else {
            Some(BBox::from_corners(x0, y0, x1, y1))
        }
    }
}

/// Pinhole camera looking horizontally along `yaw` from a pole of height
/// `mount_height`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub position: Vec2,
    pub mount_height: f64,
    pub yaw: f64,
    pub fov: f64,
    pub width: u32,
    pub height: u32,
    pub channels: u32,
}

/// Depths below this are treated as lying on the camera plane.
const NEAR_PLANE: f64 = 0.1;

impl CameraModel {
    pub fn new(position: Vec2, mount_height: f64, yaw: f64, fov: f64, width: u32, height: u32) -> Self {
        Self {
            position,
            mount_height,
            yaw,
            fov,
            width,
            height,
            channels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::config("camera width and height must be positive"));
        }
        if !(self.fov > 0.0 && self.fov < std::f64::consts::PI) {
            return Err(Error::config("camera field of view must lie in (0, pi)"));
        }
        if self.channels == 0 {
            return Err(Error::config("camera channel count must be positive"));
        }
        Ok(())
    }

    /// Focal length in pixels implied by the horizontal field of view.
    pub fn focal(&self) -> f64 {
        self.width as f64 * 0.5 / (self.fov * 0.5).tan()
    }

    pub fn forward(&self) -> Vec2 {
        Vec2::from_angle(self.yaw)
    }

    /// (depth, lateral) of a ground point in the camera frame; lateral is
    /// positive to the right of the optical axis.
    pub fn to_camera_frame(&self, p: Vec2) -> (f64, f64) {
        let d = p - self.position;
        let fwd = self.forward();
        (d.dot(fwd), d.dot(fwd.right_normal()))
    }

    /// Projects the vehicle's upright bounding cuboid.
    pub fn project(&self, v: &VehicleState) -> Option<BBox> {
        let (depth_c, _) = self.to_camera_frame(v.position);
        if depth_c <= NEAR_PLANE {
            return None;
        }
        let f = self.focal();
        let heading = v.heading();
        let along = Vec2::from_angle(heading) * (v.footprint.length * 0.5);
        let across = Vec2::from_angle(heading).right_normal() * (v.footprint.width * 0.5);

        // Offsets from the principal point, so an on-axis symmetric box
        // lands exactly on the image center.
        let (mut u0, mut u1) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut v0, mut v1) = (f64::INFINITY, f64::NEG_INFINITY);
        for sa in [-1.0, 1.0] {
            for sc in [-1.0, 1.0] {
                let corner = v.position + along * sa + across * sc;
                let (depth, lateral) = self.to_camera_frame(corner);
                let depth = depth.max(NEAR_PLANE);
                let u = f * lateral / depth;
                for z in [0.0, v.footprint.height] {
                    let vv = f * (self.mount_height - z) / depth;
                    u0 = u0.min(u);
                    u1 = u1.max(u);
                    v0 = v0.min(vv);
                    v1 = v1.max(vv);
                }
            }
        }
        let (cx, cy) = (self.width as f64 * 0.5, self.height as f64 * 0.5);
        let (w, h) = (self.width as f64, self.height as f64);
        if cx + u1 <= 0.0 || cx + u0 >= w || cy + v1 <= 0.0 || cy + v0 >= h {
            return None;
        }
        let inside = cx + u0 >= 0.0 && cx + u1 <= w && cy + v0 >= 0.0 && cy + v1 <= h;
        if inside {
            Some(BBox::new(cx + (u0 + u1) * 0.5, cy + (v0 + v1) * 0.5, u1 - u0, v1 - v0))
        } else {
            BBox::from_corners(cx + u0, cy + v0, cx + u1, cy + v1).clipped(w, h)
        }
    }

    pub fn raw_image_bytes(&self) -> u64 {
        self.width as u64 * self.height as u64 * self.channels as u64
    }
}

/// Free-function form of [`CameraModel::project`].
pub fn project_to_camera(cam: &CameraModel, v: &VehicleState) -> Option<BBox> {
    cam.project(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Footprint, VehicleClass};
    use std::f64::consts::FRAC_PI_2;

    fn cam() -> CameraModel {
        CameraModel::new(Vec2::new(0.0, 0.0), 5.0, FRAC_PI_2, FRAC_PI_2, 1280, 720)
    }

    fn car_at(p: Vec2) -> VehicleState {
        VehicleState {
            id: 1,
            position: p,
            velocity: Vec2::new(1.0, 0.0),
            footprint: Footprint { length: 4.5, width: 1.8, height: 1.5 },
            color: [10, 20, 30],
            class: VehicleClass::Car,
            is_transmitter: false,
        }
    }

    #[test]
    fn focal_from_fov() {
        // 90 degree FOV: f = (W/2) / tan(45 deg) = W/2
        assert!((cam().focal() - 640.0).abs() < 1e-9);
    }

    #[test]
    fn on_axis_is_centered_exactly() {
        let b = cam().project(&car_at(Vec2::new(0.0, 30.0))).unwrap();
        assert_eq!(b.xc, 640.0);
    }

    #[test]
    fn behind_camera_is_culled() {
        assert!(cam().project(&car_at(Vec2::new(0.0, -30.0))).is_none());
    }

    #[test]
    fn lateral_offset_matches_pinhole() {
        let (d, z) = (6.0, 80.0);
        // lateral +d means to the right of the optical axis (+x here)
        let b = cam().project(&car_at(Vec2::new(d, z))).unwrap();
        let want = 640.0 + 640.0 * d / z;
        assert!((b.xc - want).abs() < 0.5, "{} vs {}", b.xc, want);
    }

    #[test]
    fn fully_outside_is_none_and_partial_is_clipped() {
        let c = cam();
        assert!(c.project(&car_at(Vec2::new(60.0, 10.0))).is_none());
        let b = c.project(&car_at(Vec2::new(10.5, 10.0))).unwrap();
        assert!(b.x1() <= 1280.0 + 1e-9 && b.w > 0.0);
    }
}
