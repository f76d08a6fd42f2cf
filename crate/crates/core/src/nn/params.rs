use crate::error::{Error, Result};
use crate::real::Real;

/// A flat tensor with its registration name and `(rows, cols)` shape.
/// Bias vectors are stored as `1 × n`.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub shape: (usize, usize),
    pub data: Vec<T>,
}

/// Anything holding trainable tensors in a fixed registration order.
///
/// `visit` and `visit_mut` must enumerate the same tensors in the same order;
/// optimizers, checkpoints and the gradient checker all index by position.
pub trait Parameters<T: Real> {
    fn visit(&self, f: &mut dyn FnMut(&str, (usize, usize), &[T]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [T]));

    fn param_layout(&self) -> Vec<(String, (usize, usize))> {
        let mut out = Vec::new();
        self.visit(&mut |name, shape, _| out.push((name.to_string(), shape)));
        out
    }

    fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, data| n += data.len());
        n
    }

    fn snapshot(&self) -> Vec<NamedTensor<T>> {
        let mut out = Vec::new();
        self.visit(&mut |name, shape, data| {
            out.push(NamedTensor {
                name: name.to_string(),
                shape,
                data: data.to_vec(),
            })
        });
        out
    }

    /// Overwrites every tensor from `tensors`, which must match the
    /// registration layout exactly.
    fn load(&mut self, tensors: &[NamedTensor<T>]) -> Result<()> {
        let layout = self.param_layout();
        if layout.len() != tensors.len() {
            return Err(Error::shape(format!(
                "model has {} tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(tensors) {
            if *name != t.name || *shape != t.shape || t.data.len() != shape.0 * shape.1 {
                return Err(Error::shape(format!(
                    "tensor {name} {shape:?} vs {} {:?}",
                    t.name, t.shape
                )));
            }
        }
        let mut i = 0;
        self.visit_mut(&mut |_, data| {
            data.copy_from_slice(&tensors[i].data);
            i += 1;
        });
        Ok(())
    }
}

/// A single flat parameter vector, mostly for tests of the gradient checker.
impl<T: Real> Parameters<T> for Vec<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, (usize, usize), &[T])) {
        f("theta", (1, self.len()), self);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [T])) {
        f("theta", self);
    }
}

/// Gradients in the same registration order as the parameters they belong to.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradStore<T> {
    entries: Vec<NamedTensor<T>>,
}

impl<T: Real> GradStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn zeros_like<P: Parameters<T> + ?Sized>(params: &P) -> Self {
        let mut store = Self::new();
        params.visit(&mut |name, shape, data| {
            store.push(name.to_string(), shape, vec![T::zero(); data.len()])
        });
        store
    }

    pub fn push(&mut self, name: String, shape: (usize, usize), data: Vec<T>) {
        debug_assert_eq!(shape.0 * shape.1, data.len());
        self.entries.push(NamedTensor { name, shape, data });
    }

    pub fn entries(&self) -> &[NamedTensor<T>] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor<T>> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `self += other`; the two stores must share a layout.
    pub fn accumulate(&mut self, other: &GradStore<T>) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::shape("gradient stores differ in tensor count"));
        }
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            if a.name != b.name || a.shape != b.shape {
                return Err(Error::shape(format!("{} vs {}", a.name, b.name)));
            }
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: T) {
        for e in &mut self.entries {
            for x in &mut e.data {
                *x *= factor;
            }
        }
    }

    pub fn max_abs(&self) -> T {
        self.entries
            .iter()
            .flat_map(|e| e.data.iter())
            .fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.entries
            .iter()
            .flat_map(|e| e.data.iter())
            .all(|x| x.is_finite())
    }

    /// Checks that the store mirrors `params` one-to-one.
    pub fn matches_layout<P: Parameters<T> + ?Sized>(&self, params: &P) -> bool {
        let layout = params.param_layout();
        layout.len() == self.entries.len()
            && layout
                .iter()
                .zip(&self.entries)
                .all(|((n, s), e)| *n == e.name && *s == e.shape)
    }

    pub fn to_f64(&self) -> GradStore<f64> {
        GradStore {
            entries: self
                .entries
                .iter()
                .map(|e| NamedTensor {
                    name: e.name.clone(),
                    shape: e.shape,
                    data: e.data.iter().map(|v| v.to_f64_lossy()).collect(),
                })
                .collect(),
        }
    }
}
