use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;

pub fn relu<T: Real>(x: ArrayView2<'_, T>) -> Array2<T> {
    x.mapv(|v| if v > T::zero() { v } else { T::zero() })
}

/// Masks `dy` by `x > 0`; the subgradient at zero is zero.
pub fn relu_backward<T: Real>(x: ArrayView2<'_, T>, dy: ArrayView2<'_, T>) -> Array2<T> {
    let mut dx = dy.to_owned();
    dx.zip_mut_with(&x, |d, &v| {
        if v <= T::zero() {
            *d = T::zero();
        }
    });
    dx
}

/// Inverted dropout. In training mode each entry is zeroed with probability
/// `rate` and survivors are scaled by `1 / (1 - rate)`; otherwise the input is
/// returned unchanged with no mask.
pub fn dropout<T: Real, R: Rng + ?Sized>(
    x: Array2<T>,
    rate: f64,
    rng: Option<&mut R>,
) -> Result<(Array2<T>, Option<Array2<T>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
    }
    let Some(rng) = rng else {
        return Ok((x, None));
    };
    if rate == 0.0 {
        return Ok((x, None));
    }
    let keep = T::of(1.0 / (1.0 - rate));
    let mask = Array2::from_shape_simple_fn(x.dim(), || {
        if rng.random::<f64>() < rate {
            T::zero()
        } else {
            keep
        }
    });
    Ok((x * &mask, Some(mask)))
}

pub fn dropout_backward<T: Real>(dy: Array2<T>, mask: Option<&Array2<T>>) -> Array2<T> {
    match mask {
        Some(m) => dy * m,
        None => dy,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{gradient_check_with, GradCheckConfig, GradStore};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relu_forward_and_subgradient() {
        let x = array![[-1.0, 0.0, 2.0]];
        assert_eq!(relu(x.view()), array![[0.0, 0.0, 2.0]]);
        assert_eq!(
            relu_backward(x.view(), array![[1.0, 1.0, 1.0]].view()),
            array![[0.0, 0.0, 1.0]]
        );
    }

    #[test]
    fn relu_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |theta: &Vec<f64>| {
            let a = Array2::from_shape_vec((5, 4), theta.clone()).unwrap();
            relu(a.view()).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
        };
        let xa = Array2::from_shape_vec((5, 4), x.clone()).unwrap();
        let wa = Array2::from_shape_vec((5, 4), w.clone()).unwrap();
        let dx = relu_backward(xa.view(), wa.view());
        let mut grads = GradStore::new();
        grads.push("theta".into(), (1, 20), dx.iter().copied().collect());
        let mut theta = x;
        let report = gradient_check_with(&mut theta, &grads, loss, GradCheckConfig { probe: 1e-6, floor: 1e-6 });
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }

    #[test]
    fn dropout_identity_cases() {
        let x = array![[1.0f32, 2.0], [3.0, 4.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (y, mask) = dropout(x.clone(), 0.0, Some(&mut rng)).unwrap();
        assert_eq!(y, x);
        assert!(mask.is_none());
        let (y, _) = dropout::<f32, ChaCha8Rng>(x.clone(), 0.5, None).unwrap();
        assert_eq!(y, x);
        assert!(dropout(x, 1.0, Some(&mut rng)).is_err());
    }

    #[test]
    fn inverted_dropout_preserves_expectation() {
        let x = Array2::from_shape_fn((2, 3), |(i, j)| 1.0 + (i * 3 + j) as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let trials = 10_000;
        let mut acc = Array2::<f64>::zeros(x.dim());
        for _ in 0..trials {
            let (y, _) = dropout(x.clone(), 0.5, Some(&mut rng)).unwrap();
            acc += &y;
        }
        acc /= trials as f64;
        let (mean, expected) = (acc.mean().unwrap(), x.mean().unwrap());
        assert!((mean - expected).abs() / expected < 0.02, "mean {mean} vs {expected}");
        for (m, e) in acc.iter().zip(x.iter()) {
            // per entry: 10^4 Bernoulli draws, relative std 1%
            assert!((m - e).abs() / e < 0.05, "entry mean {m} vs {e}");
        }
    }

    #[test]
    fn dropout_backward_uses_mask() {
        let x = Array2::from_elem((3, 3), 2.0f64);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (y, mask) = dropout(x, 0.5, Some(&mut rng)).unwrap();
        let mask = mask.unwrap();
        let dx = dropout_backward(Array2::ones((3, 3)), Some(&mask));
        assert_eq!(dx, mask);
        for (&yv, &m) in y.iter().zip(mask.iter()) {
            assert_eq!(yv, 2.0 * m);
        }
    }
}
