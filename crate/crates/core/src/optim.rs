//! Adam with bias correction, dense and row-sparse.

use serde::{Deserialize, Serialize};

use crate::nn::Real;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for one parameter group.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Real> Moments<T> {
    pub fn new(len: usize) -> Self {
        Moments {
            m: vec![T::ZERO; len],
            v: vec![T::ZERO; len],
            step: 0,
        }
    }
}

struct Coeffs {
    b1: f64,
    b2: f64,
    /// Learning rate folded with both bias corrections.
    step: f64,
    eps_hat: f64,
}

fn coeffs(cfg: &AdamConfig, lr: f64, t: u64) -> Coeffs {
    let c1 = 1.0 - cfg.beta1.powf(t as f64);
    let c2 = 1.0 - cfg.beta2.powf(t as f64);
    Coeffs {
        b1: cfg.beta1,
        b2: cfg.beta2,
        step: lr * c2.sqrt() / c1,
        eps_hat: cfg.eps * c2.sqrt(),
    }
}

#[inline]
fn update<T: Real>(p: &mut T, g: T, m: &mut T, v: &mut T, c: &Coeffs) {
    let g = g.to_f64();
    let mm = c.b1 * m.to_f64() + (1.0 - c.b1) * g;
    let vv = c.b2 * v.to_f64() + (1.0 - c.b2) * g * g;
    *m = T::from_f64(mm);
    *v = T::from_f64(vv);
    *p = T::from_f64(p.to_f64() - c.step * mm / (vv.sqrt() + c.eps_hat));
}

/// One bias-corrected Adam step on a whole group.
pub fn adam_step<T: Real>(
    params: &mut [T],
    grads: &[T],
    moments: &mut Moments<T>,
    lr: f64,
    cfg: &AdamConfig,
    group: &'static str,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != moments.m.len() {
        return Err(Error::ShapeMismatch(format!(
            "{group}: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            moments.m.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(group));
    }
    moments.step += 1;
    let c = coeffs(cfg, lr, moments.step);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut moments.m)
        .zip(&mut moments.v)
    {
        update(p, g, m, v, &c);
    }
    Ok(())
}

/// Adam restricted to the listed rows of a row-major table; rows not listed
/// keep their parameters and moments. The step counter is shared by the
/// whole table.
pub fn adam_step_rows<T: Real>(
    params: &mut [T],
    grads: &[T],
    moments: &mut Moments<T>,
    row_len: usize,
    rows: &[u32],
    lr: f64,
    cfg: &AdamConfig,
    group: &'static str,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != moments.m.len() {
        return Err(Error::ShapeMismatch(format!("{group}: table sizes differ")));
    }
    for &r in rows {
        let s = r as usize * row_len;
        if grads[s..s + row_len].iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(group));
        }
    }
    moments.step += 1;
    let c = coeffs(cfg, lr, moments.step);
    for &r in rows {
        for i in r as usize * row_len..(r as usize + 1) * row_len {
            update(&mut params[i], grads[i], &mut moments.m[i], &mut moments.v[i], &c);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn first_step_is_lr_times_sign() {
        let mut p = vec![0.0f64, 1.0, -2.0];
        let g = vec![3.5, -1e-3, 42.0];
        let mut m = Moments::new(3);
        adam_step(&mut p, &g, &mut m, 0.1, &AdamConfig::default(), "x").unwrap();
        let expected = [-0.1, 1.1, -2.1];
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![0.3f32, -0.7];
        let mut m = Moments::new(2);
        for _ in 0..50 {
            adam_step(&mut p, &[0.0, 0.0], &mut m, 0.5, &AdamConfig::default(), "x").unwrap();
        }
        assert_eq!(p, vec![0.3, -0.7]);
    }

    #[test]
    fn minimizes_a_parabola() {
        let mut x = vec![1.0f64];
        let mut m = Moments::new(1);
        for _ in 0..100 {
            let g = [2.0 * x[0]];
            adam_step(&mut x, &g, &mut m, 0.1, &AdamConfig::default(), "x").unwrap();
        }
        assert!(x[0].abs() < 0.05, "{}", x[0]);
    }

    #[test]
    fn errors_name_the_group() {
        let mut m = Moments::new(1);
        let r = adam_step(&mut [0.0f64], &[f64::NAN], &mut m, 0.1, &AdamConfig::default(), "albedo");
        assert!(matches!(r, Err(Error::NonFiniteGradient("albedo"))));
        assert!(adam_step(&mut [0.0f64; 2], &[0.0], &mut m, 0.1, &AdamConfig::default(), "a").is_err());
    }

    #[test]
    fn sparse_rows_match_dense_on_touched_rows() {
        let cfg = AdamConfig::default();
        let mut dense = vec![0.5f64; 6];
        let mut sparse = dense.clone();
        let g = vec![0.0, 0.0, 1.0, -2.0, 0.0, 0.0];
        let (mut md, mut ms) = (Moments::new(6), Moments::new(6));
        for _ in 0..3 {
            adam_step(&mut dense, &g, &mut md, 0.01, &cfg, "d").unwrap();
            adam_step_rows(&mut sparse, &g, &mut ms, 2, &[1], 0.01, &cfg, "s").unwrap();
        }
        assert_eq!(dense, sparse);
    }

    proptest! {
        #[test]
        fn step_size_is_bounded_by_lr(g in -1e3f64..1e3, p in -10f64..10.0, lr in 1e-4f64..1.0) {
            let mut x = vec![p];
            let mut m = Moments::new(1);
            adam_step(&mut x, &[g], &mut m, lr, &AdamConfig::default(), "p").unwrap();
            prop_assert!((x[0] - p).abs() <= lr * (1.0 + 1e-9));
        }
    }
}
