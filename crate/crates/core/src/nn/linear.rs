use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::params::{GradStore, Parameters};
use crate::error::{Error, Result};
use crate::real::Real;

/// Fully connected layer `Y = X·W + 1·bᵀ` with `W` of shape `d_in × d_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer<T> {
    pub weights: Array2<T>,
    pub bias: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrad<T> {
    pub weights: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> LinearLayer<T> {
    pub fn new(weights: Array2<T>, bias: Array1<T>) -> Result<Self> {
        if weights.ncols() != bias.len() {
            return Err(Error::shape(format!(
                "weights {:?} vs bias {}",
                weights.dim(),
                bias.len()
            )));
        }
        Ok(Self {
            weights: weights.as_standard_layout().into_owned(),
            bias,
        })
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            weights: Array2::zeros((d_in, d_out)),
            bias: Array1::zeros(d_out),
        }
    }

    /// Glorot-uniform weights in `±sqrt(6 / (d_in + d_out))`, zero bias.
    pub fn glorot<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (d_in + d_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
        let weights = Array2::from_shape_simple_fn((d_in, d_out), || T::of(dist.sample(rng)));
        Self {
            weights,
            bias: Array1::zeros(d_out),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weights.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.weights.ncols()
    }

    pub fn forward(&self, x: ArrayView2<'_, T>) -> Result<Array2<T>> {
        if x.ncols() != self.d_in() {
            return Err(Error::shape(format!(
                "linear input has {} columns, layer expects {}",
                x.ncols(),
                self.d_in()
            )));
        }
        Ok(x.dot(&self.weights) + &self.bias)
    }

    /// Given the forward input `x` and upstream `dy`, returns `dx` and the
    /// parameter gradients.
    pub fn backward(&self, x: ArrayView2<'_, T>, dy: ArrayView2<'_, T>) -> (Array2<T>, LinearGrad<T>) {
        debug_assert_eq!(x.nrows(), dy.nrows());
        debug_assert_eq!(dy.ncols(), self.d_out());
        let dx = dy.dot(&self.weights.t());
        let grad = LinearGrad {
            weights: x.t().dot(&dy),
            bias: dy.sum_axis(Axis(0)),
        };
        (dx, grad)
    }

    pub fn cast<U: Real>(&self) -> LinearLayer<U> {
        LinearLayer {
            weights: self.weights.mapv(|v| U::of(v.to_f64_lossy())),
            bias: self.bias.mapv(|v| U::of(v.to_f64_lossy())),
        }
    }
}

impl<T: Real> LinearGrad<T> {
    pub fn push_into(self, prefix: &str, store: &mut GradStore<T>) {
        let (r, c) = self.weights.dim();
        store.push(format!("{prefix}.weight"), (r, c), self.weights.iter().copied().collect());
        let n = self.bias.len();
        store.push(format!("{prefix}.bias"), (1, n), self.bias.to_vec());
    }
}

impl<T: Real> LinearLayer<T> {
    pub(crate) fn visit_prefixed(&self, prefix: &str, f: &mut dyn FnMut(&str, (usize, usize), &[T])) {
        f(
            &format!("{prefix}.weight"),
            self.weights.dim(),
            self.weights.as_slice().expect("standard layout"),
        );
        f(
            &format!("{prefix}.bias"),
            (1, self.bias.len()),
            self.bias.as_slice().expect("contiguous"),
        );
    }

    pub(crate) fn visit_prefixed_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        f(
            &format!("{prefix}.weight"),
            self.weights.as_slice_mut().expect("standard layout"),
        );
        f(
            &format!("{prefix}.bias"),
            self.bias.as_slice_mut().expect("contiguous"),
        );
    }
}

impl<T: Real> Parameters<T> for LinearLayer<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, (usize, usize), &[T])) {
        self.visit_prefixed("linear", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [T])) {
        self.visit_prefixed_mut("linear", f);
    }
}
