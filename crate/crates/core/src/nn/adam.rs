use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: usize) -> Self {
        Self {
            m: vec![T::zero(); params],
            v: vec![T::zero(); params],
            step: 0,
        }
    }
}

/// Moments of parameters whose gradient has stopped decay geometrically
/// into the subnormal range, where arithmetic is very slow.
#[inline]
fn flush<T: Scalar>(x: T) -> T {
    if x.is_subnormal() {
        T::zero()
    } else {
        x
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<T: Scalar>(params: &mut [T], grads: &[T], state: &mut AdamState<T>, lr: f64) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::shape(format!(
            "adam over {} params with {} grads and {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let step_size = T::lit(lr / (1.0 - BETA1.powi(t)));
    let v_corr = T::lit(1.0 / (1.0 - BETA2.powi(t)));
    let (b1, b2, eps) = (T::lit(BETA1), T::lit(BETA2), T::lit(EPSILON));
    let (c1, c2) = (T::one() - b1, T::one() - b2);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = flush(b1 * *m + c1 * g);
        *v = flush(b2 * *v + c2 * g * g);
        *p -= step_size * *m / ((*v * v_corr).sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        for g in [1e-3f64, 0.5, -7.0, 300.0] {
            let mut p = vec![1.0];
            let mut s = AdamState::new(1);
            adam_step(&mut p, &[g], &mut s, 0.01).unwrap();
            let want = 0.01 * g / (g.abs() + EPSILON);
            assert!((1.0 - p[0] - want).abs() < 1e-12, "g={g}");
        }
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = vec![0.25f64, -3.0];
        let mut s = AdamState::new(2);
        for _ in 0..50 {
            adam_step(&mut p, &[0.0, 0.0], &mut s, 0.1).unwrap();
        }
        assert_eq!(p, vec![0.25, -3.0]);
    }

    #[test]
    fn constant_gradient_decreases_monotonically() {
        let mut p = vec![0.0f64];
        let mut s = AdamState::new(1);
        let mut prev = p[0];
        for _ in 0..100 {
            adam_step(&mut p, &[1.0], &mut s, 0.01).unwrap();
            assert!(p[0] < prev);
            prev = p[0];
        }
        assert!((p[0] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch() {
        let mut s = AdamState::<f64>::new(2);
        assert!(adam_step(&mut [0.0; 3], &[0.0; 3], &mut s, 0.1).is_err());
    }
}
