use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::real::Real;

/// Guard for the ℓ2 normalization denominator.
pub const L2_EPS: f64 = 1e-12;

/// Softmax over proposals: every column of the result sums to one.
/// Each column is shifted by its maximum before exponentiation.
pub fn softmax_columns<T: Real>(b: ArrayView2<'_, T>) -> Array2<T> {
    let mut out = b.to_owned();
    for mut col in out.columns_mut() {
        normalize_exp(col.view_mut());
    }
    out
}

/// Softmax over classes: every row sums to one.
pub fn softmax_rows<T: Real>(a: ArrayView2<'_, T>) -> Array2<T> {
    let mut out = a.to_owned();
    for mut row in out.rows_mut() {
        normalize_exp(row.view_mut());
    }
    out
}

fn normalize_exp<T: Real>(mut lane: ndarray::ArrayViewMut1<'_, T>) {
    let max = lane.fold(T::neg_infinity(), |m, &v| m.max(v));
    lane.mapv_inplace(|v| (v - max).exp());
    let total: T = lane.sum();
    lane.mapv_inplace(|v| v / total);
}

/// Backward of [`softmax_columns`] given its output `s` and upstream `ds`:
/// `dB_pc = s_pc (ds_pc - Σ_p' s_p'c ds_p'c)`.
pub fn softmax_columns_backward<T: Real>(s: ArrayView2<'_, T>, ds: ArrayView2<'_, T>) -> Array2<T> {
    let dot = (&s * &ds).sum_axis(Axis(0));
    let mut db = ds.to_owned();
    db -= &dot;
    db * s
}

pub fn softmax_rows_backward<T: Real>(s: ArrayView2<'_, T>, ds: ArrayView2<'_, T>) -> Array2<T> {
    let dot = (&s * &ds).sum_axis(Axis(1)).insert_axis(Axis(1));
    let mut da = ds.to_owned();
    da -= &dot;
    da * s
}

/// `v / max(‖v‖₂, eps)`.
pub fn l2_normalize<T: Real>(v: ArrayView1<'_, T>, eps: T) -> Array1<T> {
    let denom = v.dot(&v).sqrt().max(eps);
    v.mapv(|x| x / denom)
}

pub fn l2_normalize_backward<T: Real>(
    v: ArrayView1<'_, T>,
    eps: T,
    dout: ArrayView1<'_, T>,
) -> Array1<T> {
    let norm = v.dot(&v).sqrt();
    if norm < eps {
        return dout.mapv(|d| d / eps);
    }
    let out = v.mapv(|x| x / norm);
    let proj = out.dot(&dout);
    (&dout - &(out * proj)) / norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{gradient_check, GradStore};
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_column() {
        let s = softmax_columns(array![[0.0f64], [0.0], [0.0]].view());
        for v in s.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn one_two_three() {
        let s = softmax_columns(array![[1.0f64], [2.0], [3.0]].view());
        let expected = [0.09003, 0.24473, 0.66524];
        for (v, e) in s.iter().zip(expected) {
            assert!((v - e).abs() < 1e-5, "{v} vs {e}");
        }
    }

    #[test]
    fn large_logits_stay_finite() {
        let s = softmax_columns(array![[1000.0f32, -1000.0], [999.0, -1001.0]].view());
        assert!(s.iter().all(|v| v.is_finite()));
        assert!((s[[0, 0]] + s[[1, 0]] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn l2_examples() {
        assert_eq!(l2_normalize(array![3.0f64, 4.0].view(), 1e-12), array![0.6, 0.8]);
        assert_eq!(l2_normalize(array![0.0f64, 0.0].view(), 1e-12), array![0.0, 0.0]);
    }

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((r, c), || rng.random_range(-2.0..2.0))
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (r, c) in [(1, 1), (3, 2), (5, 4)] {
            let b = random_matrix(&mut rng, r, c);
            let w = random_matrix(&mut rng, r, c);
            for rows in [false, true] {
                let f = |theta: &Vec<f64>| {
                    let m = Array2::from_shape_vec((r, c), theta.clone()).unwrap();
                    let s = if rows { softmax_rows(m.view()) } else { softmax_columns(m.view()) };
                    (&s * &w).sum()
                };
                let s = if rows { softmax_rows(b.view()) } else { softmax_columns(b.view()) };
                let db = if rows {
                    softmax_rows_backward(s.view(), w.view())
                } else {
                    softmax_columns_backward(s.view(), w.view())
                };
                let mut g = GradStore::new();
                g.push("theta".into(), (1, r * c), db.iter().copied().collect());
                let mut theta: Vec<f64> = b.iter().copied().collect();
                let report = gradient_check(&mut theta, &g, f, 1e-5);
                assert!(report.max_relative_error < 1e-6, "{r}x{c} rows={rows}: {report:?}");
            }
        }
    }

    #[test]
    fn l2_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for n in 1..6 {
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let wa = Array1::from(w.clone());
            let f = |theta: &Vec<f64>| l2_normalize(Array1::from(theta.clone()).view(), L2_EPS).dot(&wa);
            let dv = l2_normalize_backward(Array1::from(v.clone()).view(), L2_EPS, wa.view());
            let mut g = GradStore::new();
            g.push("theta".into(), (1, n), dv.to_vec());
            let mut theta = v;
            let report = gradient_check(&mut theta, &g, f, 1e-6);
            assert!(report.max_relative_error < 1e-6, "{report:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn columns_are_distributions_and_shift_invariant(
            data in proptest::collection::vec(-50.0f64..50.0, 12),
            shift in -100.0f64..100.0,
        ) {
            let b = Array2::from_shape_vec((4, 3), data).unwrap();
            let s = softmax_columns(b.view());
            for col in s.columns() {
                prop_assert!(col.iter().all(|&v| v >= 0.0) && col.iter().all(|&v| v <= 1.0));
                prop_assert!((col.sum() - 1.0).abs() < 1e-6);
            }
            let mut shifted = b.clone();
            shifted.column_mut(1).mapv_inplace(|v| v + shift);
            let s2 = softmax_columns(shifted.view());
            for (a, b) in s.column(1).iter().zip(s2.column(1).iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn l2_norm_bounded(v in proptest::collection::vec(-1e3f64..1e3, 1..8)) {
            let out = l2_normalize(Array1::from(v.clone()).view(), L2_EPS);
            let n = out.dot(&out).sqrt();
            prop_assert!(n <= 1.0 + 1e-12);
            let input_norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if input_norm >= L2_EPS {
                prop_assert!((n - 1.0).abs() < 1e-12);
            }
        }
    }
}
