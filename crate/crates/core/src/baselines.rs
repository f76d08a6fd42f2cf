//! Ablation baselines.
//!
//! * [`OneStreamModel`]: classification stream only, pooled over proposals
//!   with a log-sum-exp soft maximum, ℓ2 normalized per modality and added;
//!   trained with the hinge loss like the main model.
//! * [`WsddnTypeModel`]: a single-modality two-stream network whose
//!   classification stream is additionally softmaxed across classes, giving
//!   video scores in `[0, 1]` trained with per-class binary log-loss.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::data::{Modality, VideoBag};
use crate::error::{Error, Result};
use crate::model::ArchConfig;
use crate::nn::{
    l2_normalize, l2_normalize_backward, softmax_columns, softmax_columns_backward, softmax_rows,
    softmax_rows_backward, GradStore, LinearLayer, Parameters, Pass, L2_EPS,
};
use crate::real::Real;
use crate::scoring::{features_as, reorder_like, FcCache, FcStack, FusionMode, ModalityTower};

/// Lower clamp for WSDDN-type scores; the upper clamp is `1 - WSDDN_CLAMP`.
pub const WSDDN_CLAMP: f64 = 1e-7;

/// `log(mean(exp(x)))`, evaluated as `max + log(mean(exp(x - max)))`.
/// Constant inputs are fixed points and `mean(x) ≤ lse ≤ max(x)`.
pub fn lse_pool<T: Real>(x: ArrayView1<'_, T>) -> T {
    assert!(!x.is_empty(), "lse_pool of an empty column");
    let max = x.fold(T::neg_infinity(), |m, &v| m.max(v));
    let mean = x.iter().map(|&v| (v - max).exp()).sum::<T>() / T::of(x.len() as f64);
    max + mean.ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OneStreamTower<T> {
    pub stack: FcStack<T>,
    pub cls: LinearLayer<T>,
}

impl<T: Real> OneStreamTower<T> {
    pub fn new<R: rand::Rng + ?Sized>(
        d_in: usize,
        widths: &[usize],
        num_classes: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        let stack = FcStack::new(d_in, widths, dropout, rng);
        let cls = LinearLayer::glorot(stack.d_out(d_in), num_classes, rng);
        Self { stack, cls }
    }

    pub fn d_in(&self) -> usize {
        self.stack.d_in(self.cls.d_in())
    }
}

#[derive(Debug, Clone)]
pub struct OneStreamModalityCache<T> {
    pub z: Array2<T>,
    pub a: Array2<T>,
    /// `∂ lse / ∂ A`: the column softmax of `A`.
    pub weights: Array2<T>,
    pub pooled: Array1<T>,
    pub normalized: Array1<T>,
    stack: FcCache<T>,
}

impl<T> OneStreamModalityCache<T> {
    pub fn stack(&self) -> &FcCache<T> {
        &self.stack
    }
}

#[derive(Debug, Clone)]
pub struct OneStreamCache<T> {
    pub visual: Option<OneStreamModalityCache<T>>,
    pub audio: Option<OneStreamModalityCache<T>>,
    pub phi: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OneStreamModel<T> {
    pub visual: Option<OneStreamTower<T>>,
    pub audio: Option<OneStreamTower<T>>,
    pub mode: FusionMode,
    pub eps: f64,
}

impl<T: Real> OneStreamModel<T> {
    pub fn new<R: rand::Rng + ?Sized>(arch: &ArchConfig, mode: FusionMode, rng: &mut R) -> Self {
        let visual = mode.uses(Modality::Visual).then(|| {
            OneStreamTower::new(arch.visual_dim, &arch.visual_hidden, arch.num_classes, arch.dropout, rng)
        });
        let audio = mode.uses(Modality::Audio).then(|| {
            OneStreamTower::new(arch.audio_dim, &arch.audio_hidden, arch.num_classes, arch.dropout, rng)
        });
        Self {
            visual,
            audio,
            mode,
            eps: L2_EPS,
        }
    }

    pub fn tower(&self, modality: Modality) -> Option<&OneStreamTower<T>> {
        match modality {
            Modality::Visual => self.visual.as_ref(),
            Modality::Audio => self.audio.as_ref(),
        }
    }

    fn tower_mut(&mut self, modality: Modality) -> Option<&mut OneStreamTower<T>> {
        match modality {
            Modality::Visual => self.visual.as_mut(),
            Modality::Audio => self.audio.as_mut(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.visual
            .as_ref()
            .or(self.audio.as_ref())
            .map_or(0, |t| t.cls.d_out())
    }

    pub fn forward(&self, bag: &VideoBag, pass: &mut Pass<'_>) -> Result<(Array1<T>, OneStreamCache<T>)> {
        let c = self.num_classes();
        check_classes(bag, c)?;
        let eps = T::of(self.eps);
        let mut phi = Array1::zeros(c);
        let mut caches = [None, None];
        for (slot, modality) in Modality::BOTH.into_iter().enumerate() {
            let Some(tower) = self.tower(modality) else {
                continue;
            };
            let x = features_as::<T>(bag, modality);
            check_dim(bag, modality, x.ncols(), tower.d_in())?;
            let (z, stack) = tower.stack.forward(x, pass)?;
            let a = tower.cls.forward(z.view())?;
            let pooled = Array1::from_iter(a.columns().into_iter().map(lse_pool));
            let weights = softmax_columns(a.view());
            let normalized = l2_normalize(pooled.view(), eps);
            phi += &normalized;
            caches[slot] = Some(OneStreamModalityCache {
                z,
                a,
                weights,
                pooled,
                normalized,
                stack,
            });
        }
        let [visual, audio] = caches;
        Ok((phi.clone(), OneStreamCache { visual, audio, phi }))
    }

    pub fn backward(&self, cache: &OneStreamCache<T>, d_phi: ArrayView1<'_, T>) -> GradStore<T> {
        let eps = T::of(self.eps);
        let mut grads = GradStore::new();
        for modality in Modality::BOTH {
            let mc = match modality {
                Modality::Visual => cache.visual.as_ref(),
                Modality::Audio => cache.audio.as_ref(),
            };
            let (Some(tower), Some(mc)) = (self.tower(modality), mc) else {
                continue;
            };
            let d_pooled = l2_normalize_backward(mc.pooled.view(), eps, d_phi);
            let d_a = Array2::from_shape_fn(mc.a.dim(), |(p, c)| mc.weights[[p, c]] * d_pooled[c]);
            let (d_z, g) = tower.cls.backward(mc.z.view(), d_a.view());
            g.push_into(&format!("{}.cls", modality.name()), &mut grads);
            tower.stack.backward(&mc.stack, d_z, modality.name(), &mut grads);
        }
        reorder_like(grads, self)
    }

    pub fn cast<U: Real>(&self) -> OneStreamModel<U> {
        let cast_tower = |t: &OneStreamTower<T>| OneStreamTower {
            stack: t.stack.cast(),
            cls: t.cls.cast(),
        };
        OneStreamModel {
            visual: self.visual.as_ref().map(cast_tower),
            audio: self.audio.as_ref().map(cast_tower),
            mode: self.mode,
            eps: self.eps,
        }
    }
}

impl<T: Real> Parameters<T> for OneStreamModel<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, (usize, usize), &[T])) {
        for modality in Modality::BOTH {
            if let Some(t) = self.tower(modality) {
                t.stack.visit_prefixed(modality.name(), f);
                t.cls.visit_prefixed(&format!("{}.cls", modality.name()), f);
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [T])) {
        for modality in Modality::BOTH {
            if let Some(t) = self.tower_mut(modality) {
                t.stack.visit_prefixed_mut(modality.name(), f);
                t.cls.visit_prefixed_mut(&format!("{}.cls", modality.name()), f);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct WsddnCache<T> {
    pub z: Array2<T>,
    /// Softmax of `A` across classes, per proposal.
    pub class_softmax: Array2<T>,
    /// Softmax of `B` across proposals, per class.
    pub sigma_b: Array2<T>,
    pub d: Array2<T>,
    /// Column sums of `D` before clamping.
    pub raw: Array1<T>,
    pub phi: Array1<T>,
    stack: FcCache<T>,
}

/// Single-modality network in the style of weakly supervised deep detection
/// networks.
impl<T> WsddnCache<T> {
    pub fn stack(&self) -> &FcCache<T> {
        &self.stack
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WsddnTypeModel<T> {
    pub modality: Modality,
    pub tower: ModalityTower<T>,
}

impl<T: Real> WsddnTypeModel<T> {
    pub fn new<R: rand::Rng + ?Sized>(arch: &ArchConfig, modality: Modality, rng: &mut R) -> Self {
        let (d_in, widths) = match modality {
            Modality::Visual => (arch.visual_dim, &arch.visual_hidden),
            Modality::Audio => (arch.audio_dim, &arch.audio_hidden),
        };
        Self {
            modality,
            tower: ModalityTower::new(d_in, widths, arch.num_classes, arch.dropout, rng),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.tower.head.num_classes()
    }

    pub fn forward(&self, bag: &VideoBag, pass: &mut Pass<'_>) -> Result<(Array1<T>, WsddnCache<T>)> {
        check_classes(bag, self.num_classes())?;
        let x = features_as::<T>(bag, self.modality);
        check_dim(bag, self.modality, x.ncols(), self.tower.d_in())?;
        let (z, stack) = self.tower.stack.forward(x, pass)?;
        let a = self.tower.head.cls.forward(z.view())?;
        let b = self.tower.head.loc.forward(z.view())?;
        let class_softmax = softmax_rows(a.view());
        let sigma_b = softmax_columns(b.view());
        let d = &class_softmax * &sigma_b;
        let raw = d.sum_axis(Axis(0));
        let (lo, hi) = (T::of(WSDDN_CLAMP), T::one() - T::of(WSDDN_CLAMP));
        let phi = raw.mapv(|v| v.max(lo).min(hi));
        Ok((
            phi.clone(),
            WsddnCache {
                z,
                class_softmax,
                sigma_b,
                d,
                raw,
                phi,
                stack,
            },
        ))
    }

    /// Clamped coordinates pass no gradient.
    pub fn backward(&self, cache: &WsddnCache<T>, d_phi: ArrayView1<'_, T>) -> GradStore<T> {
        let (lo, hi) = (T::of(WSDDN_CLAMP), T::one() - T::of(WSDDN_CLAMP));
        let d_raw = Array1::from_shape_fn(cache.raw.len(), |c| {
            let r = cache.raw[c];
            if r > lo && r < hi {
                d_phi[c]
            } else {
                T::zero()
            }
        });
        let d_d = Array2::from_shape_fn(cache.d.dim(), |(_, c)| d_raw[c]);
        let d_soft = &d_d * &cache.sigma_b;
        let d_sigma = &d_d * &cache.class_softmax;
        let d_a = softmax_rows_backward(cache.class_softmax.view(), d_soft.view());
        let d_b = softmax_columns_backward(cache.sigma_b.view(), d_sigma.view());
        let head = &self.tower.head;
        let (dz_cls, g_cls) = head.cls.backward(cache.z.view(), d_a.view());
        let (dz_loc, g_loc) = head.loc.backward(cache.z.view(), d_b.view());
        let mut grads = GradStore::new();
        let prefix = self.modality.name();
        g_cls.push_into(&format!("{prefix}.cls"), &mut grads);
        g_loc.push_into(&format!("{prefix}.loc"), &mut grads);
        self.tower.stack.backward(&cache.stack, dz_cls + dz_loc, prefix, &mut grads);
        reorder_like(grads, self)
    }

    pub fn cast<U: Real>(&self) -> WsddnTypeModel<U> {
        WsddnTypeModel {
            modality: self.modality,
            tower: self.tower.cast(),
        }
    }
}

impl<T: Real> Parameters<T> for WsddnTypeModel<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, (usize, usize), &[T])) {
        let prefix = self.modality.name();
        self.tower.stack.visit_prefixed(prefix, f);
        self.tower.head.cls.visit_prefixed(&format!("{prefix}.cls"), f);
        self.tower.head.loc.visit_prefixed(&format!("{prefix}.loc"), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [T])) {
        let prefix = self.modality.name();
        self.tower.stack.visit_prefixed_mut(prefix, f);
        self.tower.head.cls.visit_prefixed_mut(&format!("{prefix}.cls"), f);
        self.tower.head.loc.visit_prefixed_mut(&format!("{prefix}.loc"), f);
    }
}

fn check_classes(bag: &VideoBag, c: usize) -> Result<()> {
    if bag.num_classes() != c {
        return Err(Error::shape(format!(
            "bag {} has {} classes, model has {c}",
            bag.id,
            bag.num_classes()
        )));
    }
    Ok(())
}

fn check_dim(bag: &VideoBag, modality: Modality, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::shape(format!(
            "bag {} {modality} dim {got}, model expects {want}",
            bag.id
        )));
    }
    Ok(())
}

fn check_labels<T: Real>(phi: ArrayView2<'_, T>, y: ArrayView2<'_, T>) -> Result<()> {
    if phi.dim() != y.dim() || phi.is_empty() {
        return Err(Error::shape(format!("scores {:?} vs labels {:?}", phi.dim(), y.dim())));
    }
    if y.iter().any(|&v| v != T::one() && v != -T::one()) {
        return Err(Error::invalid("labels must be -1 or +1"));
    }
    Ok(())
}

/// `-(1/(C·n)) Σ [y=+1] log φ + [y=-1] log(1 - φ)` over a batch of `n` bags.
pub fn binary_log_loss<T: Real>(phi: ArrayView2<'_, T>, y: ArrayView2<'_, T>) -> Result<T> {
    check_labels(phi, y)?;
    let scale = T::of(1.0 / phi.len() as f64);
    let total: T = phi
        .iter()
        .zip(y.iter())
        .map(|(&p, &l)| if l > T::zero() { p.ln() } else { (T::one() - p).ln() })
        .sum();
    Ok(-total * scale)
}

pub fn binary_log_loss_grad<T: Real>(phi: ArrayView2<'_, T>, y: ArrayView2<'_, T>) -> Result<Array2<T>> {
    check_labels(phi, y)?;
    let scale = T::of(1.0 / phi.len() as f64);
    let mut grad = y.to_owned();
    grad.zip_mut_with(&phi, |g, &p| {
        *g = if *g > T::zero() {
            -scale / p
        } else {
            scale / (T::one() - p)
        };
    });
    Ok(grad)
}
