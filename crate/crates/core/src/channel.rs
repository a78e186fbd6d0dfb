//! Line-of-sight mmWave channel seen by the basestation's three ULAs, the
//! beam-steering codebook, receive power vectors and optimal-beam labels.

use std::f64::consts::FRAC_PI_2;

use num_complex::Complex;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{relative_bearing, Vec2};
use crate::scalar::Scalar;

/// ULAs per basestation, in global-vector order: front, right, left.
pub const ULA_COUNT: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UlaConfig {
    pub elements: usize,
    /// Broadside direction (counter-clockwise from +x).
    pub yaw: f64,
    /// Element spacing in wavelengths.
    pub spacing: f64,
    pub fov: f64,
}

impl UlaConfig {
    pub fn new(elements: usize, yaw: f64) -> Self {
        Self {
            elements,
            yaw,
            spacing: 0.5,
            fov: FRAC_PI_2,
        }
    }

    /// Front, right and left arrays of a basestation facing `heading`.
    pub fn basestation_triplet(heading: f64, elements: usize) -> [UlaConfig; ULA_COUNT] {
        [
            UlaConfig::new(elements, heading),
            UlaConfig::new(elements, heading - FRAC_PI_2),
            UlaConfig::new(elements, heading + FRAC_PI_2),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.elements == 0 {
            return Err(Error::config("ULA needs at least one element"));
        }
        if !(self.spacing > 0.0) {
            return Err(Error::config("ULA element spacing must be positive"));
        }
        if !(self.fov > 0.0 && self.fov < std::f64::consts::PI) {
            return Err(Error::config("ULA field of view must lie in (0, pi)"));
        }
        Ok(())
    }

    /// Angle of `target` off broadside, positive clockwise.
    pub fn angle_to(&self, origin: Vec2, target: Vec2) -> f64 {
        relative_bearing(origin, self.yaw, target)
    }
}

pub type ChannelVector<T> = Vec<Complex<T>>;

/// Unit-norm array response: entry `m` is `exp(-j 2 pi s m sin(theta)) / sqrt(M)`.
pub fn steering_vector<T: Scalar>(elements: usize, theta: T, spacing: T) -> Vec<Complex<T>> {
    let scale = T::one() / T::from_usize(elements).unwrap().sqrt();
    let two_pi = T::PI() + T::PI();
    let step = -two_pi * spacing * theta.sin();
    (0..elements)
        .map(|m| Complex::from_polar(scale, step * T::from_usize(m).unwrap()))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<T> {
    pub vectors: Vec<Vec<Complex<T>>>,
    pub angles: Vec<T>,
}

impl<T: Scalar> Codebook<T> {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn elements(&self) -> usize {
        self.vectors.first().map_or(0, |v| v.len())
    }
}

/// `Q` beams uniformly spaced across the ULA field of view; beam `q` points
/// at `-fov/2 + (q + 1/2) fov / Q`.
pub fn build_codebook<T: Scalar>(ula: &UlaConfig, beams: usize) -> Result<Codebook<T>> {
    ula.validate()?;
    if beams == 0 {
        return Err(Error::config("codebook needs at least one beam"));
    }
    let fov = T::lit(ula.fov);
    let half = T::lit(0.5);
    let q_total = T::from_usize(beams).unwrap();
    let spacing = T::lit(ula.spacing);
    let angles: Vec<T> = (0..beams)
        .map(|q| -fov * half + (T::from_usize(q).unwrap() + half) * fov / q_total)
        .collect();
    let vectors = angles
        .iter()
        .map(|&a| steering_vector(ula.elements, a, spacing))
        .collect();
    Ok(Codebook { vectors, angles })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReflectedPath {
    /// Amplitude relative to the LOS path.
    pub relative_gain: f64,
    /// Angular offset from the LOS angle, radians.
    pub angle_offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    pub subcarriers: usize,
    /// Stored for completeness; no time-domain waveform is simulated.
    pub cyclic_prefix: usize,
    pub tx_power: f64,
    pub noise_variance: f64,
    pub reference_gain: f64,
    pub reference_distance: f64,
    pub path_loss_exponent: f64,
    pub reflection: Option<ReflectedPath>,
    /// Std-dev of i.i.d. Gaussian perturbation added to receive powers; 0 disables.
    pub measurement_noise: f64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            subcarriers: 1,
            cyclic_prefix: 0,
            tx_power: 1.0,
            noise_variance: 1.0,
            reference_gain: 1.0,
            reference_distance: 1.0,
            path_loss_exponent: 2.0,
            reflection: None,
            measurement_noise: 0.0,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subcarriers == 0 {
            return Err(Error::config("subcarrier count must be at least 1"));
        }
        if !(self.tx_power > 0.0 && self.noise_variance > 0.0) {
            return Err(Error::config("transmit power and noise variance must be positive"));
        }
        if !(self.reference_distance > 0.0) {
            return Err(Error::config("reference distance must be positive"));
        }
        if self.measurement_noise < 0.0 {
            return Err(Error::config("measurement noise must be non-negative"));
        }
        Ok(())
    }

    pub fn snr(&self) -> f64 {
        self.tx_power / self.noise_variance
    }

    /// LOS amplitude gain at distance `d`.
    pub fn gain(&self, d: f64) -> f64 {
        self.reference_gain * (self.reference_distance / d).powf(self.path_loss_exponent * 0.5)
    }
}

fn add_path<T: Scalar>(h: &mut [Complex<T>], ula: &UlaConfig, angle: f64, amplitude: f64) {
    if angle.abs() > ula.fov * 0.5 {
        return;
    }
    let sqrt_m = (ula.elements as f64).sqrt();
    let a = steering_vector(ula.elements, T::lit(angle), T::lit(ula.spacing));
    let s = T::lit(amplitude * sqrt_m);
    for (hm, am) in h.iter_mut().zip(a) {
        *hm = *hm + am.conj() * s;
    }
}

/// Per-subcarrier channel between one ULA at `bs` and a user at `user`.
/// Users outside the array's field of view get an all-zero channel.
pub fn channel_from_geometry<T: Scalar>(
    ula: &UlaConfig,
    bs: Vec2,
    user: Vec2,
    cfg: &ChannelConfig,
) -> Result<Vec<ChannelVector<T>>> {
    let d = bs.distance(user);
    if d == 0.0 {
        return Err(Error::ZeroDistance);
    }
    let phi = ula.angle_to(bs, user);
    let g = cfg.gain(d);
    let mut h = vec![Complex::new(T::zero(), T::zero()); ula.elements];
    add_path(&mut h, ula, phi, g);
    if let Some(r) = cfg.reflection {
        add_path(&mut h, ula, phi + r.angle_offset, g * r.relative_gain);
    }
    Ok(vec![h; cfg.subcarriers.max(1)])
}

/// `p_q = (1/K) sum_k |h_k^T f_q|^2`.
pub fn receive_power_vector<T: Scalar>(h: &[ChannelVector<T>], cb: &Codebook<T>) -> Result<Vec<T>> {
    if h.is_empty() {
        return Err(Error::shape("channel has no subcarriers"));
    }
    let m = cb.elements();
    if let Some(bad) = h.iter().find(|hk| hk.len() != m) {
        return Err(Error::shape(format!(
            "channel has {} elements, codebook expects {m}",
            bad.len()
        )));
    }
    let k = T::from_usize(h.len()).unwrap();
    Ok(cb
        .vectors
        .iter()
        .map(|f| {
            h.iter()
                .map(|hk| {
                    hk.iter()
                        .zip(f)
                        .fold(Complex::new(T::zero(), T::zero()), |acc, (a, b)| acc + a * b)
                        .norm_sqr()
                })
                .sum::<T>()
                / k
        })
        .collect())
}

/// Receive powers of all three ULAs concatenated in front, right, left order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalPowerVector<T> {
    pub timestamp: u32,
    pub beams: usize,
    pub values: Vec<T>,
}

impl<T: Scalar> GlobalPowerVector<T> {
    pub fn from_ulas(timestamp: u32, per_ula: &[Vec<T>]) -> Result<Self> {
        if per_ula.len() != ULA_COUNT {
            return Err(Error::shape(format!("expected {ULA_COUNT} arrays, got {}", per_ula.len())));
        }
        let beams = per_ula[0].len();
        if beams == 0 || per_ula.iter().any(|p| p.len() != beams) {
            return Err(Error::shape("per-ULA power vectors must share a nonzero length"));
        }
        Ok(Self {
            timestamp,
            beams,
            values: per_ula.concat(),
        })
    }

    pub fn ula(&self, i: usize) -> &[T] {
        &self.values[i * self.beams..(i + 1) * self.beams]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeamChoice {
    pub ula: usize,
    pub beam: usize,
    pub global: usize,
}

/// Global argmax over the concatenated vector; ties go to the lowest index.
pub fn optimal_beam<T: Scalar>(p: &GlobalPowerVector<T>) -> Result<BeamChoice> {
    if p.values.len() != ULA_COUNT * p.beams || p.beams == 0 {
        return Err(Error::shape(format!(
            "global power vector must have length {}",
            ULA_COUNT * p.beams
        )));
    }
    let mut best = 0;
    for (i, &v) in p.values.iter().enumerate() {
        if v > p.values[best] {
            best = i;
        }
    }
    if !(p.values[best] > T::zero()) {
        return Err(Error::NoCoverage);
    }
    Ok(BeamChoice {
        ula: best / p.beams,
        beam: best % p.beams,
        global: best,
    })
}

/// `y_k = h_k^T f_q x + v_k` with `v_k ~ CN(0, noise_variance)`.
pub fn simulate_received_symbol<T: Scalar, R: Rng + ?Sized>(
    h: &[Complex<T>],
    f: &[Complex<T>],
    x: Complex<T>,
    noise_variance: T,
    rng: &mut R,
) -> Complex<T> {
    let gain = h
        .iter()
        .zip(f)
        .fold(Complex::new(T::zero(), T::zero()), |acc, (a, b)| acc + a * b);
    let clean = gain * x;
    if noise_variance == T::zero() {
        return clean;
    }
    let s = (noise_variance * T::lit(0.5)).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    clean + Complex::new(T::lit(re) * s, T::lit(im) * s)
}

/// The basestation's three arrays with their codebooks.
#[derive(Debug, Clone)]
pub struct Basestation<T> {
    pub position: Vec2,
    pub heading: f64,
    pub ulas: [UlaConfig; ULA_COUNT],
    pub codebooks: Vec<Codebook<T>>,
    pub channel: ChannelConfig,
}

impl<T: Scalar> Basestation<T> {
    pub fn new(position: Vec2, heading: f64, elements: usize, beams: usize, channel: ChannelConfig) -> Result<Self> {
        channel.validate()?;
        let ulas = UlaConfig::basestation_triplet(heading, elements);
        let codebooks = ulas.iter().map(|u| build_codebook(u, beams)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            position,
            heading,
            ulas,
            codebooks,
            channel,
        })
    }

    pub fn beams(&self) -> usize {
        self.codebooks[0].len()
    }

    /// Noiseless global receive power vector for a user position.
    pub fn power_vector(&self, user: Vec2, timestamp: u32) -> Result<GlobalPowerVector<T>> {
        let per_ula = self
            .ulas
            .iter()
            .zip(&self.codebooks)
            .map(|(u, cb)| {
                let h = channel_from_geometry::<T>(u, self.position, user, &self.channel)?;
                receive_power_vector(&h, cb)
            })
            .collect::<Result<Vec<_>>>()?;
        GlobalPowerVector::from_ulas(timestamp, &per_ula)
    }

    /// Power vector with the configured measurement noise applied (clamped at 0).
    pub fn measured_power_vector<R: Rng + ?Sized>(
        &self,
        user: Vec2,
        timestamp: u32,
        rng: &mut R,
    ) -> Result<GlobalPowerVector<T>> {
        let mut p = self.power_vector(user, timestamp)?;
        let sigma = self.channel.measurement_noise;
        if sigma > 0.0 {
            for v in p.values.iter_mut() {
                let n: f64 = StandardNormal.sample(rng);
                *v = (*v + T::lit(n * sigma)).max(T::zero());
            }
        }
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::point_at_bearing;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const TOL: f64 = 1e-12;

    fn close(a: Complex<f64>, b: Complex<f64>) -> bool {
        (a - b).norm() < TOL
    }

    #[test]
    fn steering_examples() {
        let s = 1.0 / 2f64.sqrt();
        let v = steering_vector::<f64>(2, 0.0, 0.5);
        assert!(close(v[0], Complex::new(s, 0.0)) && close(v[1], Complex::new(s, 0.0)));
        let v = steering_vector::<f64>(1, 0.7, 0.5);
        assert!(close(v[0], Complex::new(1.0, 0.0)));
        let v = steering_vector::<f64>(2, 30f64.to_radians(), 0.5);
        assert!(close(v[0], Complex::new(s, 0.0)));
        assert!(close(v[1], Complex::new(0.0, -s)));
    }

    #[test]
    fn codebook_angles() {
        let ula = UlaConfig::new(16, 0.0);
        let cb = build_codebook::<f64>(&ula, 2).unwrap();
        assert!((cb.angles[0] - (-22.5f64).to_radians()).abs() < TOL);
        assert!((cb.angles[1] - 22.5f64.to_radians()).abs() < TOL);
        let cb = build_codebook::<f64>(&ula, 1).unwrap();
        assert_eq!(cb.angles, vec![0.0]);
        let cb = build_codebook::<f64>(&ula, 64).unwrap();
        assert_eq!(cb.len(), 64);
        for w in cb.angles.windows(2) {
            assert!(w[1] > w[0]);
            assert!((w[1] - w[0] - (90f64 / 64.0).to_radians()).abs() < 1e-12);
        }
        assert!(cb.angles[0] > -std::f64::consts::FRAC_PI_4);
        assert!(cb.angles[63] < std::f64::consts::FRAC_PI_4);
        for v in &cb.vectors {
            let n: f64 = v.iter().map(|c| c.norm_sqr()).sum();
            assert!((n.sqrt() - 1.0).abs() < TOL);
        }
    }

    #[test]
    fn broadside_user_peaks_at_center_beams() {
        let ula = UlaConfig::new(16, std::f64::consts::FRAC_PI_2);
        let cb = build_codebook::<f64>(&ula, 64).unwrap();
        let cfg = ChannelConfig::default();
        let user = Vec2::new(0.0, cfg.reference_distance);
        let h = channel_from_geometry::<f64>(&ula, Vec2::new(0.0, 0.0), user, &cfg).unwrap();
        let p = receive_power_vector(&h, &cb).unwrap();
        let best = (0..64).fold(0, |b, i| if p[i] > p[b] { i } else { b });
        assert!(best == 31 || best == 32, "{best}");
        assert!((p[31] - p[32]).abs() < 1e-12);
    }

    #[test]
    fn out_of_sector_is_zero() {
        let ula = UlaConfig::new(16, std::f64::consts::FRAC_PI_2);
        let cb = build_codebook::<f64>(&ula, 64).unwrap();
        let user = Vec2::new(30.0, 1.0); // ~88 degrees off broadside
        let h = channel_from_geometry::<f64>(&ula, Vec2::new(0.0, 0.0), user, &ChannelConfig::default()).unwrap();
        assert!(h[0].iter().all(|c| c.norm() == 0.0));
        assert!(receive_power_vector(&h, &cb).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gain_halves_when_distance_doubles() {
        let ula = UlaConfig::new(8, 0.0);
        let cfg = ChannelConfig::default();
        let o = Vec2::new(0.0, 0.0);
        let h1 = channel_from_geometry::<f64>(&ula, o, Vec2::new(10.0, 2.0), &cfg).unwrap();
        let h2 = channel_from_geometry::<f64>(&ula, o, Vec2::new(20.0, 4.0), &cfg).unwrap();
        for (a, b) in h1[0].iter().zip(&h2[0]) {
            assert!((b.norm() - 0.5 * a.norm()).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_distance_is_error() {
        let ula = UlaConfig::new(8, 0.0);
        let o = Vec2::new(1.0, 1.0);
        assert!(matches!(
            channel_from_geometry::<f64>(&ula, o, o, &ChannelConfig::default()),
            Err(Error::ZeroDistance)
        ));
    }

    #[test]
    fn power_vector_examples() {
        let ula = UlaConfig::new(1, 0.0);
        let cb = build_codebook::<f64>(&ula, 4).unwrap();
        let p = receive_power_vector(&[vec![Complex::new(2.0, 0.0)]], &cb).unwrap();
        assert!(p.iter().all(|&v| (v - 4.0).abs() < TOL));

        let ula = UlaConfig::new(16, 0.0);
        let cb = build_codebook::<f64>(&ula, 64).unwrap();
        let q = 17;
        let h: Vec<_> = steering_vector::<f64>(16, cb.angles[q], 0.5)
            .into_iter()
            .map(|a| a.conj() * 4.0)
            .collect();
        let p = receive_power_vector(&[h], &cb).unwrap();
        let best = (0..64).fold(0, |b, i| if p[i] > p[b] { i } else { b });
        assert_eq!(best, q);
        assert!((p[q] - 16.0).abs() < 1e-9);

        let z = vec![Complex::new(0.0, 0.0); 16];
        assert!(receive_power_vector(&[z], &cb).unwrap().iter().all(|&v| v == 0.0));

        let bad = vec![Complex::new(0.0, 0.0); 3];
        assert!(matches!(receive_power_vector(&[bad], &cb), Err(Error::Shape(_))));
    }

    #[test]
    fn optimal_beam_rules() {
        let mut v = vec![0.0; 12];
        v[0] = 0.1;
        v[1] = 0.9;
        v[2] = 0.3;
        let p = GlobalPowerVector { timestamp: 0, beams: 4, values: v };
        let c = optimal_beam(&p).unwrap();
        assert_eq!((c.global, c.ula, c.beam), (1, 0, 1));

        let mut v = vec![0.0; 192];
        v[5] = 2.0;
        v[40] = 2.0;
        let c = optimal_beam(&GlobalPowerVector { timestamp: 0, beams: 64, values: v }).unwrap();
        assert_eq!(c.global, 5);

        let z = GlobalPowerVector { timestamp: 0, beams: 4, values: vec![0.0; 12] };
        assert!(matches!(optimal_beam(&z), Err(Error::NoCoverage)));
    }

    #[test]
    fn right_sector_user_selects_right_ula() {
        let bs = Basestation::<f64>::new(Vec2::new(0.0, 0.0), std::f64::consts::FRAC_PI_2, 16, 64, ChannelConfig::default())
            .unwrap();
        let user = point_at_bearing(bs.position, bs.heading, 80f64.to_radians(), 40.0);
        let c = optimal_beam(&bs.power_vector(user, 0).unwrap()).unwrap();
        assert_eq!(c.ula, 1);
        let user = point_at_bearing(bs.position, bs.heading, -70f64.to_radians(), 40.0);
        assert_eq!(optimal_beam(&bs.power_vector(user, 0).unwrap()).unwrap().ula, 2);
    }

    #[test]
    fn mirrored_angle_reverses_powers() {
        let ula = UlaConfig::new(16, 0.0);
        let cb = build_codebook::<f64>(&ula, 64).unwrap();
        let cfg = ChannelConfig::default();
        let o = Vec2::new(0.0, 0.0);
        for deg in [3.0f64, 12.5, 30.0, 44.0] {
            let a = point_at_bearing(o, 0.0, deg.to_radians(), 25.0);
            let b = point_at_bearing(o, 0.0, -deg.to_radians(), 25.0);
            let pa = receive_power_vector(&channel_from_geometry::<f64>(&ula, o, a, &cfg).unwrap(), &cb).unwrap();
            let pb = receive_power_vector(&channel_from_geometry::<f64>(&ula, o, b, &cfg).unwrap(), &cb).unwrap();
            let scale = pa.iter().cloned().fold(0.0, f64::max);
            for q in 0..64 {
                assert!((pa[q] - pb[63 - q]).abs() <= 1e-9 * scale);
            }
        }
    }

    #[test]
    fn subcarriers_degenerate_to_flat() {
        let ula = UlaConfig::new(16, 0.0);
        let cb = build_codebook::<f64>(&ula, 64).unwrap();
        let o = Vec2::new(0.0, 0.0);
        let u = Vec2::new(20.0, 7.0);
        let one = receive_power_vector(&channel_from_geometry::<f64>(&ula, o, u, &ChannelConfig::default()).unwrap(), &cb)
            .unwrap();
        let cfg4 = ChannelConfig {
            subcarriers: 4,
            ..ChannelConfig::default()
        };
        let four = receive_power_vector(&channel_from_geometry::<f64>(&ula, o, u, &cfg4).unwrap(), &cb).unwrap();
        for (a, b) in one.iter().zip(&four) {
            assert!((a - b).abs() <= 1e-15 * a.abs().max(1e-300));
        }
    }

    #[test]
    fn argmax_scale_invariant() {
        let bs = Basestation::<f64>::new(Vec2::new(0.0, 0.0), 0.0, 16, 64, ChannelConfig::default()).unwrap();
        let p = bs.power_vector(Vec2::new(30.0, -8.0), 0).unwrap();
        let scaled = GlobalPowerVector {
            values: p.values.iter().map(|v| v * 37.5).collect(),
            ..p.clone()
        };
        assert_eq!(optimal_beam(&p).unwrap(), optimal_beam(&scaled).unwrap());
    }

    #[test]
    fn received_symbol() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = steering_vector::<f64>(4, 0.2, 0.5);
        let f = steering_vector::<f64>(4, -0.1, 0.5);
        let x = Complex::new(0.6, -0.8);
        let clean: Complex<f64> = h.iter().zip(&f).map(|(a, b)| a * b).sum::<Complex<f64>>() * x;
        assert_eq!(simulate_received_symbol(&h, &f, x, 0.0, &mut rng), clean);

        let zero = vec![Complex::new(0.0, 0.0); 4];
        let n = 100_000;
        let mut acc = 0.0;
        for _ in 0..n {
            acc += simulate_received_symbol(&zero, &f, x, 1.0, &mut rng).norm_sqr();
        }
        let var = acc / n as f64;
        assert!((var - 1.0).abs() < 0.02, "variance {var}");
    }

    #[test]
    fn f32_codebook_is_unit_norm() {
        let cb = build_codebook::<f32>(&UlaConfig::new(16, 0.0), 64).unwrap();
        for v in &cb.vectors {
            let n: f32 = v.iter().map(|c| c.norm_sqr()).sum();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }
}
