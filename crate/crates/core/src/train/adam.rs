//! Adam with bias correction, one state per parameter group.

use crate::Real;

pub const BETA1: Real = 0.9;
pub const BETA2: Real = 0.999;
pub const EPSILON: Real = 1e-8;

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("parameter group has {params} values but {what} has {other}")]
pub struct ShapeMismatch {
    pub params: usize,
    pub what: &'static str,
    pub other: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Real>,
    pub v: Vec<Real>,
    /// Steps taken so far.
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Rebuilds a per-element state after the parameter set was reordered or
    /// resized: element `i` of the new state copies element `origin[i]` of
    /// the old one, each spanning `width` consecutive values.
    pub fn remap(&self, origin: &[usize], width: usize) -> Self {
        let mut out = AdamState::new(origin.len() * width);
        out.t = self.t;
        for (i, &o) in origin.iter().enumerate() {
            out.m[i * width..(i + 1) * width].copy_from_slice(&self.m[o * width..(o + 1) * width]);
            out.v[i * width..(i + 1) * width].copy_from_slice(&self.v[o * width..(o + 1) * width]);
        }
        out
    }
}

/// One Adam update in place.
pub fn adam_step(params: &mut [Real], grads: &[Real], state: &mut AdamState, lr: Real) -> Result<(), ShapeMismatch> {
    if grads.len() != params.len() {
        return Err(ShapeMismatch { params: params.len(), what: "gradient", other: grads.len() });
    }
    if state.len() != params.len() {
        return Err(ShapeMismatch { params: params.len(), what: "optimizer state", other: state.len() });
    }
    state.t += 1;
    let c1 = 1.0 - BETA1.powi(state.t as i32);
    let c2 = 1.0 - BETA2.powi(state.t as i32);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = BETA1 * *m + (1.0 - BETA1) * g;
        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + EPSILON);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Textbook scalar Adam, written out step by step.
    struct ScalarAdam {
        m: f64,
        v: f64,
        b1t: f64,
        b2t: f64,
    }

    impl ScalarAdam {
        fn step(&mut self, x: f64, g: f64, lr: f64) -> f64 {
            self.b1t *= 0.9;
            self.b2t *= 0.999;
            self.m = 0.9 * self.m + 0.1 * g;
            self.v = 0.999 * self.v + 0.001 * g * g;
            let mh = self.m / (1.0 - self.b1t);
            let vh = self.v / (1.0 - self.b2t);
            x - lr * mh / (vh.sqrt() + 1e-8)
        }
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        s.m = vec![0.5, -0.5];
        s.v = vec![0.25, 0.25];
        adam_step(&mut p, &[0.0, 0.0], &mut s, 0.1).unwrap();
        assert_eq!(s.m, vec![0.45, -0.45]);
        assert!((s.v[0] - 0.24975).abs() < 1e-15);
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, 0.1).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(s.m, vec![0.0, 0.0]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn constant_gradient_step_is_bounded_by_lr() {
        for g in [1e-6, 0.3, 50.0, -7.0] {
            let mut p = vec![0.0];
            let mut s = AdamState::new(1);
            let lr = 0.01;
            for _ in 0..500 {
                let before = p[0];
                adam_step(&mut p, &[g], &mut s, lr).unwrap();
                assert!((p[0] - before).abs() <= lr * (1.0 + 1e-9));
                assert!((p[0] - before).signum() == -g.signum());
            }
        }
    }

    #[test]
    fn matches_scalar_transcript() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 5;
        let mut p: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut refs: Vec<(f64, ScalarAdam)> =
            p.iter().map(|&x| (x, ScalarAdam { m: 0.0, v: 0.0, b1t: 1.0, b2t: 1.0 })).collect();
        let mut s = AdamState::new(n);
        for _ in 0..100 {
            let g: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            adam_step(&mut p, &g, &mut s, 3e-3).unwrap();
            for (r, gi) in refs.iter_mut().zip(&g) {
                r.0 = r.1.step(r.0, *gi, 3e-3);
            }
        }
        for (a, r) in p.iter().zip(&refs) {
            assert!((a - r.0).abs() < 1e-10, "{a} vs {}", r.0);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = vec![0.0; 3];
        let mut s = AdamState::new(3);
        assert!(adam_step(&mut p, &[0.0; 2], &mut s, 0.1).is_err());
        let mut s = AdamState::new(2);
        assert!(adam_step(&mut p, &[0.0; 3], &mut s, 0.1).is_err());
    }

    #[test]
    fn remap_copies_parent_state() {
        let mut s = AdamState::new(4);
        s.m = vec![1.0, 2.0, 3.0, 4.0];
        s.v = vec![5.0, 6.0, 7.0, 8.0];
        s.t = 9;
        let r = s.remap(&[1, 1, 0], 2);
        assert_eq!(r.m, vec![3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        assert_eq!(r.v, vec![7.0, 8.0, 7.0, 8.0, 5.0, 6.0]);
        assert_eq!(r.t, 9);
    }
}
