use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{BBox, CameraModel};

/// Downsampled binary occupancy grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskGrid {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl MaskGrid {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Invalid("mask dimensions must be positive".into()));
        }
        Ok(Self {
            width,
            height,
            bits: vec![false; width * height],
        })
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 || bits.len() != width * height {
            return Err(Error::Invalid(format!(
                "mask of {width}x{height} needs {} bits, got {}",
                width * height,
                bits.len()
            )));
        }
        Ok(Self { width, height, bits })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, col: usize, row: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, col: usize, row: usize, v: bool) {
        self.bits[row * self.width + col] = v;
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn fill_ratio(&self) -> f64 {
        self.count_ones() as f64 / self.bits.len() as f64
    }

    /// Centroid of set cells in grid coordinates (cell centers at +0.5).
    pub fn centroid(&self) -> Option<[f64; 2]> {
        let mut sx = 0.0;
        let mut sy = 0.0;
        let mut n = 0usize;
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(c, r) {
                    sx += c as f64 + 0.5;
                    sy += r as f64 + 0.5;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| [sx / n as f64, sy / n as f64])
    }

    /// Bits as 0/1 floats, row-major; the network input for mask models.
    pub fn to_unit_floats<T: crate::Scalar>(&self) -> Vec<T> {
        self.bits.iter().map(|&b| if b { T::one() } else { T::zero() }).collect()
    }
}

/// Ellipse inscribed in `bbox`, sampled at the cell centers of a uniform
/// `grid_w x grid_h` downsampling of the image. The cell holding the bbox
/// center is always set so tiny boxes keep one bit.
pub fn rasterize_mask(bbox: &BBox, cam: &CameraModel, grid_w: usize, grid_h: usize) -> Result<MaskGrid> {
    let mut m = MaskGrid::new(grid_w, grid_h)?;
    let cell_w = cam.width as f64 / grid_w as f64;
    let cell_h = cam.height as f64 / grid_h as f64;
    let (a, b) = (bbox.w * 0.5, bbox.h * 0.5);
    if a > 0.0 && b > 0.0 {
        let c0 = ((bbox.x0() / cell_w).floor().max(0.0)) as usize;
        let c1 = ((bbox.x1() / cell_w).ceil() as usize).min(grid_w);
        let r0 = ((bbox.y0() / cell_h).floor().max(0.0)) as usize;
        let r1 = ((bbox.y1() / cell_h).ceil() as usize).min(grid_h);
        for r in r0..r1 {
            let y = (r as f64 + 0.5) * cell_h;
            let dy = (y - bbox.yc) / b;
            for c in c0..c1 {
                let x = (c as f64 + 0.5) * cell_w;
                let dx = (x - bbox.xc) / a;
                if dx * dx + dy * dy <= 1.0 {
                    m.set(c, r, true);
                }
            }
        }
    }
    let cc = ((bbox.xc / cell_w).floor().max(0.0) as usize).min(grid_w - 1);
    let cr = ((bbox.yc / cell_h).floor().max(0.0) as usize).min(grid_h - 1);
    m.set(cc, cr, true);
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Run {
    pub value: bool,
    pub len: u32,
}

/// Row-major run-length encoding; the first run carries the value of bit 0.
pub fn rle_encode(m: &MaskGrid) -> Vec<Run> {
    let mut runs: Vec<Run> = Vec::new();
    for &b in &m.bits {
        match runs.last_mut() {
            Some(r) if r.value == b => r.len += 1,
            _ => runs.push(Run { value: b, len: 1 }),
        }
    }
    runs
}

pub fn rle_decode(runs: &[Run], width: usize, height: usize) -> Result<MaskGrid> {
    let total: u64 = runs.iter().map(|r| r.len as u64).sum();
    if total != (width * height) as u64 {
        return Err(Error::format(format!(
            "run lengths sum to {total}, mask needs {}",
            width * height
        )));
    }
    let mut bits = Vec::with_capacity(width * height);
    for r in runs {
        bits.extend(std::iter::repeat(r.value).take(r.len as usize));
    }
    MaskGrid::from_bits(width, height, bits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec2;
    use proptest::prelude::*;

    fn cam() -> CameraModel {
        CameraModel::new(Vec2::new(0.0, 0.0), 5.0, 0.0, std::f64::consts::FRAC_PI_2, 1280, 720)
    }

    #[test]
    fn full_image_ellipse_fill() {
        let m = rasterize_mask(&BBox::new(640.0, 360.0, 1280.0, 720.0), &cam(), 64, 64).unwrap();
        let want = std::f64::consts::PI / 4.0;
        assert!((m.fill_ratio() - want).abs() / want < 0.05, "{}", m.fill_ratio());
    }

    #[test]
    fn tiny_box_sets_one_bit() {
        let m = rasterize_mask(&BBox::new(101.0, 203.0, 3.0, 2.0), &cam(), 64, 64).unwrap();
        assert_eq!(m.count_ones(), 1);
    }

    #[test]
    fn disjoint_boxes_disjoint_masks() {
        let a = rasterize_mask(&BBox::new(200.0, 300.0, 150.0, 100.0), &cam(), 64, 64).unwrap();
        let b = rasterize_mask(&BBox::new(900.0, 400.0, 200.0, 120.0), &cam(), 64, 64).unwrap();
        assert!(a.bits().iter().zip(b.bits()).all(|(x, y)| !(*x && *y)));
        assert!(a.count_ones() > 1 && b.count_ones() > 1);
    }

    #[test]
    fn rle_examples() {
        let z = MaskGrid::new(8, 8).unwrap();
        assert_eq!(rle_encode(&z), vec![Run { value: false, len: 64 }]);
        let o = MaskGrid::from_bits(8, 8, vec![true; 64]).unwrap();
        assert_eq!(rle_encode(&o), vec![Run { value: true, len: 64 }]);
        let p = MaskGrid::from_bits(4, 1, vec![false, true, true, false]).unwrap();
        assert_eq!(
            rle_encode(&p),
            vec![
                Run { value: false, len: 1 },
                Run { value: true, len: 2 },
                Run { value: false, len: 1 }
            ]
        );
    }

    #[test]
    fn rle_sum_mismatch() {
        let runs = [Run { value: false, len: 10 }];
        assert!(matches!(rle_decode(&runs, 4, 4), Err(Error::Format(_))));
    }

    #[test]
    fn rle_round_trip_many_random_masks() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for _ in 0..10_000 {
            let w = rng.gen_range(1..20);
            let h = rng.gen_range(1..20);
            let density: f64 = rng.gen();
            let bits = (0..w * h).map(|_| rng.gen::<f64>() < density).collect();
            let m = MaskGrid::from_bits(w, h, bits).unwrap();
            assert_eq!(rle_decode(&rle_encode(&m), w, h).unwrap(), m);
        }
    }

    proptest! {
        #[test]
        fn rle_runs_alternate(bits in proptest::collection::vec(any::<bool>(), 1..300)) {
            let n = bits.len();
            let m = MaskGrid::from_bits(n, 1, bits).unwrap();
            let runs = rle_encode(&m);
            prop_assert_eq!(runs[0].value, m.bits()[0]);
            for w in runs.windows(2) {
                prop_assert_ne!(w[0].value, w[1].value);
            }
            prop_assert_eq!(rle_decode(&runs, n, 1).unwrap(), m);
        }
    }
}
