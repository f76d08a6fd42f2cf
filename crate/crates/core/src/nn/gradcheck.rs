use super::params::{GradStore, Parameters};
use crate::real::Real;

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Tensor name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Default denominator floor of [`relative_error`].
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-8;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floored(analytic, numeric, RELATIVE_ERROR_FLOOR)
}

/// `|a - n| / max(|a|, |n|, floor)`. Below `floor` the comparison is
/// effectively absolute, at `tolerance · floor`.
pub fn relative_error_floored(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Finite-difference step `ε`.
    pub probe: f64,
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            probe: 1e-3,
            floor: RELATIVE_ERROR_FLOOR,
        }
    }
}

/// [`gradient_check_with`] at step `probe` and the default floor.
pub fn gradient_check<T, P, F>(params: &mut P, analytic: &GradStore<f64>, f: F, probe: f64) -> GradCheckReport
where
    T: Real,
    P: Parameters<T>,
    F: FnMut(&P) -> f64,
{
    gradient_check_with(
        params,
        analytic,
        f,
        GradCheckConfig {
            probe,
            floor: RELATIVE_ERROR_FLOOR,
        },
    )
}

/// Compares `analytic` against the fourth-order central difference
/// `(f(θ-2ε) - 8f(θ-ε) + 8f(θ+ε) - f(θ+2ε)) / 12ε`, one coordinate at a time.
///
/// `f` must be deterministic in the parameters: run the forward pass without
/// dropout, or with a frozen mask. Each coordinate is restored bit-exactly
/// after probing.
pub fn gradient_check_with<T, P, F>(
    params: &mut P,
    analytic: &GradStore<f64>,
    mut f: F,
    config: GradCheckConfig,
) -> GradCheckReport
where
    T: Real,
    P: Parameters<T>,
    F: FnMut(&P) -> f64,
{
    assert!(config.probe > 0.0, "probe must be positive");
    let layout = params.param_layout();
    assert_eq!(
        layout.len(),
        analytic.len(),
        "gradient store does not mirror the parameters"
    );
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    for (tensor, ((name, shape), grad)) in layout.iter().zip(analytic.entries()).enumerate() {
        assert_eq!(name, &grad.name, "registration order differs");
        for index in 0..shape.0 * shape.1 {
            let original = read_coord(params, tensor, index);
            let step = T::of(config.probe);
            let mut at = |value: T| {
                write_coord(params, tensor, index, value);
                f(params)
            };
            let (p1, m1) = (at(original + step), at(original - step));
            let two = step + step;
            let (p2, m2) = (at(original + two), at(original - two));
            write_coord(params, tensor, index, original);
            // the effective step after rounding into T
            let h = ((original + step) - (original - step)).to_f64_lossy() / 2.0;
            let numeric = (m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * h);
            let a = grad.data[index];
            let err = relative_error_floored(a, numeric, config.floor);
            report.coordinates += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = err;
                report.worst = Some((name.clone(), index));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    report
}

fn read_coord<T: Real, P: Parameters<T>>(params: &P, tensor: usize, index: usize) -> T {
    let mut i = 0;
    let mut out = T::zero();
    params.visit(&mut |_, _, data| {
        if i == tensor {
            out = data[index];
        }
        i += 1;
    });
    out
}

fn write_coord<T: Real, P: Parameters<T>>(params: &mut P, tensor: usize, index: usize, value: T) {
    let mut i = 0;
    params.visit_mut(&mut |_, data| {
        if i == tensor {
            data[index] = value;
        }
        i += 1;
    });
}
