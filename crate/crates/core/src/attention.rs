//! Parameter-free attention that moves sibling feature maps into the
//! prediction stream.
//!
//! * negative attention: `(1 - sigmoid(f_cf)) * f_prd`
//! * consistent attention: `(1 - |sigmoid(f_lr) - sigmoid(f_prd)|) * f_prd`
//! * fusion: `f_prd + na + ca`, which then replaces `f_prd`
//!
//! Kernels work on flat slices and are generic over the float type so the
//! same code runs in the f32 network and in f64 gradient checks.

use num_traits::Float;

use crate::error::{DarError, Result};

#[inline]
pub fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn sign<T: Float>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn same_len<T>(a: &[T], b: &[T]) -> Result<()> {
    if a.len() == b.len() {
        Ok(())
    } else {
        Err(DarError::ShapeMismatch(format!("feature lengths {} vs {}", a.len(), b.len())))
    }
}

pub fn negative_attention<T: Float>(cf: &[T], prd: &[T]) -> Result<Vec<T>> {
    same_len(cf, prd)?;
    Ok(cf.iter().zip(prd).map(|(&c, &p)| (T::one() - sigmoid(c)) * p).collect())
}

/// Consistency metric, each entry in `(0, 1]`.
pub fn consistency_metric<T: Float>(lr: &[T], prd: &[T]) -> Result<Vec<T>> {
    same_len(lr, prd)?;
    Ok(lr.iter().zip(prd).map(|(&l, &p)| T::one() - (sigmoid(l) - sigmoid(p)).abs()).collect())
}

pub fn consistent_attention<T: Float>(lr: &[T], prd: &[T]) -> Result<Vec<T>> {
    let cm = consistency_metric(lr, prd)?;
    Ok(cm.into_iter().zip(prd).map(|(m, &p)| m * p).collect())
}

pub fn fuse<T: Float>(prd: &[T], na: &[T], ca: &[T]) -> Result<Vec<T>> {
    same_len(prd, na)?;
    same_len(prd, ca)?;
    Ok(prd.iter().zip(na).zip(ca).map(|((&p, &n), &c)| p + n + c).collect())
}

/// Augmented map `f + na(cf, f) + ca(lr, f)` in one pass.
pub fn transfer<T: Float>(prd: &[T], cf: &[T], lr: &[T]) -> Result<Vec<T>> {
    same_len(prd, cf)?;
    same_len(prd, lr)?;
    Ok(prd
        .iter()
        .zip(cf)
        .zip(lr)
        .map(|((&p, &c), &l)| {
            let na = (T::one() - sigmoid(c)) * p;
            let ca = (T::one() - (sigmoid(l) - sigmoid(p)).abs()) * p;
            p + na + ca
        })
        .collect())
}

/// Gradients of the negative-attention output, returned as `(d_cf, d_prd)`.
pub fn negative_attention_backward<T: Float>(cf: &[T], prd: &[T], grad: &[T]) -> (Vec<T>, Vec<T>) {
    let mut g_cf = Vec::with_capacity(cf.len());
    let mut g_prd = Vec::with_capacity(cf.len());
    for ((&c, &p), &g) in cf.iter().zip(prd).zip(grad) {
        let s = sigmoid(c);
        g_cf.push(-g * s * (T::one() - s) * p);
        g_prd.push(g * (T::one() - s));
    }
    (g_cf, g_prd)
}

/// Gradients of the consistent-attention output, returned as `(d_lr, d_prd)`.
/// The absolute value uses the zero subgradient at zero difference.
pub fn consistent_attention_backward<T: Float>(lr: &[T], prd: &[T], grad: &[T]) -> (Vec<T>, Vec<T>) {
    let mut g_lr = Vec::with_capacity(lr.len());
    let mut g_prd = Vec::with_capacity(lr.len());
    for ((&l, &p), &g) in lr.iter().zip(prd).zip(grad) {
        let (sl, sp) = (sigmoid(l), sigmoid(p));
        let d = sl - sp;
        let sd = sign(d);
        g_lr.push(-g * p * sd * sl * (T::one() - sl));
        g_prd.push(g * ((T::one() - d.abs()) + p * sd * sp * (T::one() - sp)));
    }
    (g_lr, g_prd)
}

/// Backward of [`transfer`]: accumulates into the three gradient buffers.
pub fn transfer_backward<T: Float>(
    prd: &[T],
    cf: &[T],
    lr: &[T],
    grad: &[T],
    g_prd: &mut [T],
    g_cf: &mut [T],
    g_lr: &mut [T],
) {
    let three = T::one() + T::one() + T::one();
    for i in 0..prd.len() {
        let (p, c, l, g) = (prd[i], cf[i], lr[i], grad[i]);
        let sc = sigmoid(c);
        let (sl, sp) = (sigmoid(l), sigmoid(p));
        let d = sl - sp;
        let sd = sign(d);
        g_prd[i] = g_prd[i] + g * (three - sc - d.abs() + p * sd * sp * (T::one() - sp));
        g_cf[i] = g_cf[i] - g * sc * (T::one() - sc) * p;
        g_lr[i] = g_lr[i] - g * p * sd * sl * (T::one() - sl);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn negative_attention_limits() {
        let f = [1.5f64, -2.0, 0.25, 3.0];
        let half = negative_attention(&[0.0; 4], &f).unwrap();
        assert_eq!(half, f.map(|x| 0.5 * x).to_vec());
        let off = negative_attention(&[40.0; 4], &f).unwrap();
        for (o, x) in off.iter().zip(&f) {
            assert!(o.abs() <= 1e-15 * x.abs());
        }
        let on = negative_attention(&[-40.0; 4], &f).unwrap();
        for (o, x) in on.iter().zip(&f) {
            assert!((o - x).abs() <= 1e-15 * x.abs());
        }
        assert!(negative_attention(&[0.0; 3], &f).is_err());
    }

    #[test]
    fn consistent_attention_limits() {
        let f = [1.5f64, -2.0, 0.25, 3.0];
        assert_eq!(consistent_attention(&f, &f).unwrap(), f.to_vec());
        let cm = consistency_metric(&[40.0; 4], &[-40.0; 4]).unwrap();
        assert!(cm.iter().all(|&m| (0.0..1e-15).contains(&m)));
        let zero = consistent_attention(&[0.0f64; 4], &[0.0; 4]).unwrap();
        assert_eq!(zero, vec![0.0; 4]);
        assert_eq!(consistency_metric(&[0.0f64; 4], &[0.0; 4]).unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn fusion_examples() {
        let f = [1.0f64, -0.5, 2.0];
        let na = negative_attention(&[40.0; 3], &f).unwrap();
        let ca = consistent_attention(&f, &f).unwrap();
        assert_eq!(fuse(&f, &na, &ca).unwrap(), f.map(|x| 2.0 * x).to_vec());
        assert_eq!(fuse(&f, &[0.0; 3], &[0.0; 3]).unwrap(), f.to_vec());
        assert_eq!(fuse(&[1.0f64; 3], &[1.0; 3], &[1.0; 3]).unwrap(), vec![3.0; 3]);
        let t = transfer(&f, &[40.0; 3], &f).unwrap();
        assert_eq!(t, f.map(|x| 2.0 * x).to_vec());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #[test]
            fn na_bounded_by_prd(seed: u64) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let c: Vec<f64> = (0..18).map(|_| rng.gen_range(-10.0..10.0)).collect();
                let p: Vec<f64> = (0..18).map(|_| rng.gen_range(-10.0..10.0)).collect();
                for (o, x) in negative_attention(&c, &p).unwrap().iter().zip(&p) {
                    prop_assert!(o.abs() <= x.abs());
                }
            }

            #[test]
            fn ca_metric_range_and_sign(seed: u64) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let l: Vec<f64> = (0..18).map(|_| rng.gen_range(-10.0..10.0)).collect();
                let p: Vec<f64> = (0..18).map(|_| rng.gen_range(-10.0..10.0)).collect();
                let cm = consistency_metric(&l, &p).unwrap();
                prop_assert!(cm.iter().all(|&m| m > 0.0 && m <= 1.0));
                for (o, x) in consistent_attention(&l, &p).unwrap().iter().zip(&p) {
                    if *x != 0.0 {
                        prop_assert_eq!(o.signum(), x.signum());
                    }
                }
            }
        }
    }
}
