//! Two-stream proposal scoring and audio-visual fusion.
//!
//! Per modality, the proposal features `Z` run through a small fully
//! connected stack and then two parallel linear maps: the classification
//! stream `A = Z·W_cls + b_cls` and the localization stream
//! `B = Z·W_loc + b_loc`. `B` is softmaxed over proposals for every class and
//! gates `A` elementwise, `D = A ⊙ σ(B)`. Column sums of `D` are the
//! modality's video-level class scores; they are ℓ2 normalized and the two
//! modalities are added to give `φ`. The classification stream gets no
//! softmax since a proposal may belong to several classes.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{Modality, VideoBag};
use crate::error::{Error, Result};
use crate::model::ArchConfig;
use crate::nn::{
    dropout, dropout_backward, l2_normalize, l2_normalize_backward, relu, relu_backward,
    softmax_columns, softmax_columns_backward, GradStore, LinearLayer, Parameters, Pass, L2_EPS,
};
use crate::real::Real;

/// Which modalities feed `φ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Av,
    VisualOnly,
    AudioOnly,
}

impl FusionMode {
    pub fn uses(self, modality: Modality) -> bool {
        match self {
            FusionMode::Av => true,
            FusionMode::VisualOnly => modality == Modality::Visual,
            FusionMode::AudioOnly => modality == Modality::Audio,
        }
    }

    pub fn modalities(self) -> impl Iterator<Item = Modality> {
        Modality::BOTH.into_iter().filter(move |&m| self.uses(m))
    }

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Av => "av",
            FusionMode::VisualOnly => "visual_only",
            FusionMode::AudioOnly => "audio_only",
        }
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "av" => Ok(FusionMode::Av),
            "visual_only" => Ok(FusionMode::VisualOnly),
            "audio_only" => Ok(FusionMode::AudioOnly),
            other => Err(Error::invalid(format!("unknown mode {other:?}"))),
        }
    }
}

/// Converts stored `f32` features into the network's float type.
pub(crate) fn features_as<T: Real>(bag: &VideoBag, modality: Modality) -> Array2<T> {
    bag.features(modality).as_array().mapv(T::of_f32)
}

/// Fully connected layers, each followed by ReLU and inverted dropout.
#[derive(Debug, Clone, PartialEq)]
pub struct FcStack<T> {
    pub layers: Vec<LinearLayer<T>>,
    pub dropout: f64,
}

#[derive(Debug, Clone)]
pub struct FcCache<T> {
    inputs: Vec<Array2<T>>,
    pre_activations: Vec<Array2<T>>,
    masks: Vec<Option<Array2<T>>>,
}

impl<T> FcCache<T> {
    /// Inputs to each ReLU, layer by layer.
    pub fn pre_activations(&self) -> &[Array2<T>] {
        &self.pre_activations
    }
}

impl<T: Real> FcStack<T> {
    pub fn new<R: rand::Rng + ?Sized>(d_in: usize, widths: &[usize], dropout: f64, rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut d = d_in;
        for &w in widths {
            layers.push(LinearLayer::glorot(d, w, rng));
            d = w;
        }
        Self { layers, dropout }
    }

    pub fn d_in(&self, fallback: usize) -> usize {
        self.layers.first().map_or(fallback, |l| l.d_in())
    }

    pub fn d_out(&self, fallback: usize) -> usize {
        self.layers.last().map_or(fallback, |l| l.d_out())
    }

    pub fn forward(&self, x: Array2<T>, pass: &mut Pass<'_>) -> Result<(Array2<T>, FcCache<T>)> {
        let mut cache = FcCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre_activations: Vec::with_capacity(self.layers.len()),
            masks: Vec::with_capacity(self.layers.len()),
        };
        let mut h = x;
        for layer in &self.layers {
            let pre = layer.forward(h.view())?;
            let (out, mask) = dropout(relu(pre.view()), self.dropout, pass.rng())?;
            cache.inputs.push(h);
            cache.pre_activations.push(pre);
            cache.masks.push(mask);
            h = out;
        }
        Ok((h, cache))
    }

    /// Pushes layer gradients under `prefix.fc{i}` in layer order.
    pub fn backward(&self, cache: &FcCache<T>, d_out: Array2<T>, prefix: &str, grads: &mut GradStore<T>) {
        let mut grads_rev = Vec::with_capacity(self.layers.len());
        let mut dh = d_out;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let d = dropout_backward(dh, cache.masks[i].as_ref());
            let d = relu_backward(cache.pre_activations[i].view(), d.view());
            let (dx, g) = layer.backward(cache.inputs[i].view(), d.view());
            grads_rev.push(g);
            dh = dx;
        }
        for (i, g) in grads_rev.into_iter().rev().enumerate() {
            g.push_into(&format!("{prefix}.fc{i}"), grads);
        }
    }

    pub(crate) fn visit_prefixed(&self, prefix: &str, f: &mut dyn FnMut(&str, (usize, usize), &[T])) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit_prefixed(&format!("{prefix}.fc{i}"), f);
        }
    }

    pub(crate) fn visit_prefixed_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_prefixed_mut(&format!("{prefix}.fc{i}"), f);
        }
    }

    pub fn cast<U: Real>(&self) -> FcStack<U> {
        FcStack {
            layers: self.layers.iter().map(LinearLayer::cast).collect(),
            dropout: self.dropout,
        }
    }
}

/// Paired classification and localization maps `d → C`.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoStreamHead<T> {
    pub cls: LinearLayer<T>,
    pub loc: LinearLayer<T>,
}

impl<T: Real> TwoStreamHead<T> {
    pub fn new(cls: LinearLayer<T>, loc: LinearLayer<T>) -> Result<Self> {
        if cls.d_in() != loc.d_in() || cls.d_out() != loc.d_out() {
            return Err(Error::shape(format!(
                "cls {}→{} vs loc {}→{}",
                cls.d_in(),
                cls.d_out(),
                loc.d_in(),
                loc.d_out()
            )));
        }
        Ok(Self { cls, loc })
    }

    pub fn num_classes(&self) -> usize {
        self.cls.d_out()
    }
}

/// `A`, `B`, `σ(B)` and `D = A ⊙ σ(B)` for one bag and modality.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalScores<T> {
    pub a: Array2<T>,
    pub b: Array2<T>,
    pub sigma_b: Array2<T>,
    pub d: Array2<T>,
}

pub fn score_proposals<T: Real>(z: ArrayView2<'_, T>, head: &TwoStreamHead<T>) -> Result<ProposalScores<T>> {
    if z.nrows() == 0 {
        return Err(Error::invalid("bag has no proposals"));
    }
    let a = head.cls.forward(z)?;
    let b = head.loc.forward(z)?;
    let sigma_b = softmax_columns(b.view());
    let d = &a * &sigma_b;
    Ok(ProposalScores { a, b, sigma_b, d })
}

/// Column sums of `D` followed by ℓ2 normalization. Returns
/// `(pooled, normalized)`.
pub fn pool_and_normalize<T: Real>(d: ArrayView2<'_, T>, eps: T) -> (Array1<T>, Array1<T>) {
    let pooled = d.sum_axis(Axis(0));
    let normalized = l2_normalize(pooled.view(), eps);
    (pooled, normalized)
}

/// Fully connected stack plus two-stream head for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityTower<T> {
    pub stack: FcStack<T>,
    pub head: TwoStreamHead<T>,
}

impl<T: Real> ModalityTower<T> {
    pub fn new<R: rand::Rng + ?Sized>(
        d_in: usize,
        widths: &[usize],
        num_classes: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        let stack = FcStack::new(d_in, widths, dropout, rng);
        let d = stack.d_out(d_in);
        let head = TwoStreamHead {
            cls: LinearLayer::glorot(d, num_classes, rng),
            loc: LinearLayer::glorot(d, num_classes, rng),
        };
        Self { stack, head }
    }

    pub fn d_in(&self) -> usize {
        self.stack.d_in(self.head.cls.d_in())
    }

    fn visit_prefixed(&self, prefix: &str, f: &mut dyn FnMut(&str, (usize, usize), &[T])) {
        self.stack.visit_prefixed(prefix, f);
        self.head.cls.visit_prefixed(&format!("{prefix}.cls"), f);
        self.head.loc.visit_prefixed(&format!("{prefix}.loc"), f);
    }

    fn visit_prefixed_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        self.stack.visit_prefixed_mut(prefix, f);
        self.head.cls.visit_prefixed_mut(&format!("{prefix}.cls"), f);
        self.head.loc.visit_prefixed_mut(&format!("{prefix}.loc"), f);
    }

    pub fn cast<U: Real>(&self) -> ModalityTower<U> {
        ModalityTower {
            stack: self.stack.cast(),
            head: TwoStreamHead {
                cls: self.head.cls.cast(),
                loc: self.head.loc.cast(),
            },
        }
    }
}

/// Intermediate values of one modality kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ModalityCache<T> {
    pub z: Array2<T>,
    pub scores: ProposalScores<T>,
    pub pooled: Array1<T>,
    pub normalized: Array1<T>,
    stack: FcCache<T>,
}

#[derive(Debug, Clone)]
pub struct ScoreCache<T> {
    pub visual: Option<ModalityCache<T>>,
    pub audio: Option<ModalityCache<T>>,
    pub phi: Array1<T>,
}

impl<T> ModalityCache<T> {
    pub fn stack(&self) -> &FcCache<T> {
        &self.stack
    }
}

impl<T> ScoreCache<T> {
    pub fn modality(&self, modality: Modality) -> Option<&ModalityCache<T>> {
        match modality {
            Modality::Visual => self.visual.as_ref(),
            Modality::Audio => self.audio.as_ref(),
        }
    }
}

/// The two-stream audio-visual network. A tower is present exactly when the
/// mode uses its modality.
#[derive(Debug, Clone, PartialEq)]
pub struct AVModel<T> {
    pub visual: Option<ModalityTower<T>>,
    pub audio: Option<ModalityTower<T>>,
    pub mode: FusionMode,
    pub eps: f64,
}

impl<T: Real> AVModel<T> {
    pub fn new<R: rand::Rng + ?Sized>(arch: &ArchConfig, mode: FusionMode, rng: &mut R) -> Self {
        let visual = mode.uses(Modality::Visual).then(|| {
            ModalityTower::new(arch.visual_dim, &arch.visual_hidden, arch.num_classes, arch.dropout, rng)
        });
        let audio = mode.uses(Modality::Audio).then(|| {
            ModalityTower::new(arch.audio_dim, &arch.audio_hidden, arch.num_classes, arch.dropout, rng)
        });
        Self {
            visual,
            audio,
            mode,
            eps: L2_EPS,
        }
    }

    pub fn tower(&self, modality: Modality) -> Option<&ModalityTower<T>> {
        match modality {
            Modality::Visual => self.visual.as_ref(),
            Modality::Audio => self.audio.as_ref(),
        }
    }

    pub fn tower_mut(&mut self, modality: Modality) -> Option<&mut ModalityTower<T>> {
        match modality {
            Modality::Visual => self.visual.as_mut(),
            Modality::Audio => self.audio.as_mut(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.visual
            .as_ref()
            .or(self.audio.as_ref())
            .map_or(0, |t| t.head.num_classes())
    }

    pub fn forward(&self, bag: &VideoBag, pass: &mut Pass<'_>) -> Result<(Array1<T>, ScoreCache<T>)> {
        let c = self.num_classes();
        if bag.num_classes() != c {
            return Err(Error::shape(format!(
                "bag {} has {} classes, model has {c}",
                bag.id,
                bag.num_classes()
            )));
        }
        let eps = T::of(self.eps);
        let mut phi = Array1::zeros(c);
        let mut caches = [None, None];
        for (slot, modality) in Modality::BOTH.into_iter().enumerate() {
            let Some(tower) = self.tower(modality) else {
                continue;
            };
            let x = features_as::<T>(bag, modality);
            if x.ncols() != tower.d_in() {
                return Err(Error::shape(format!(
                    "bag {} {modality} dim {}, model expects {}",
                    bag.id,
                    x.ncols(),
                    tower.d_in()
                )));
            }
            let (z, stack) = tower.stack.forward(x, pass)?;
            let scores = score_proposals(z.view(), &tower.head)?;
            let (pooled, normalized) = pool_and_normalize(scores.d.view(), eps);
            phi += &normalized;
            caches[slot] = Some(ModalityCache {
                z,
                scores,
                pooled,
                normalized,
                stack,
            });
        }
        let [visual, audio] = caches;
        Ok((phi.clone(), ScoreCache { visual, audio, phi }))
    }

    /// Gradients of a scalar loss given its derivative with respect to `φ`.
    pub fn backward(&self, cache: &ScoreCache<T>, d_phi: ArrayView1<'_, T>) -> GradStore<T> {
        let eps = T::of(self.eps);
        let mut grads = GradStore::new();
        for modality in Modality::BOTH {
            let (Some(tower), Some(mc)) = (self.tower(modality), cache.modality(modality)) else {
                continue;
            };
            let d_pooled = l2_normalize_backward(mc.pooled.view(), eps, d_phi);
            let d_z = head_backward(tower, mc, d_pooled.view(), modality.name(), &mut grads);
            tower.stack.backward(&mc.stack, d_z, modality.name(), &mut grads);
        }
        reorder_like(grads, self)
    }
}

/// Backward through `D = A ⊙ σ(B)` and column pooling; pushes head gradients
/// and returns the gradient at the head input.
fn head_backward<T: Real>(
    tower: &ModalityTower<T>,
    mc: &ModalityCache<T>,
    d_pooled: ArrayView1<'_, T>,
    prefix: &str,
    grads: &mut GradStore<T>,
) -> Array2<T> {
    let s = &mc.scores;
    let d_d = Array2::from_shape_fn(s.d.dim(), |(_, c)| d_pooled[c]);
    let d_a = &d_d * &s.sigma_b;
    let d_sigma = &d_d * &s.a;
    let d_b = softmax_columns_backward(s.sigma_b.view(), d_sigma.view());
    let (dz_cls, g_cls) = tower.head.cls.backward(mc.z.view(), d_a.view());
    let (dz_loc, g_loc) = tower.head.loc.backward(mc.z.view(), d_b.view());
    g_cls.push_into(&format!("{prefix}.cls"), grads);
    g_loc.push_into(&format!("{prefix}.loc"), grads);
    dz_cls + dz_loc
}

/// Backward passes emit head gradients before stack gradients; parameters
/// register stack first. Reorders by name to the registration layout.
pub(crate) fn reorder_like<T: Real, P: Parameters<T> + ?Sized>(grads: GradStore<T>, params: &P) -> GradStore<T> {
    let mut out = GradStore::new();
    let mut entries: Vec<_> = grads.entries().to_vec().into_iter().map(Some).collect();
    for (name, shape) in params.param_layout() {
        let slot = entries
            .iter_mut()
            .find(|e| e.as_ref().is_some_and(|e| e.name == name))
            .and_then(Option::take);
        match slot {
            Some(e) => out.push(e.name, e.shape, e.data),
            None => out.push(name, shape, vec![T::zero(); shape.0 * shape.1]),
        }
    }
    out
}

impl<T: Real> Parameters<T> for AVModel<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, (usize, usize), &[T])) {
        for modality in Modality::BOTH {
            if let Some(t) = self.tower(modality) {
                t.visit_prefixed(modality.name(), f);
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [T])) {
        for modality in Modality::BOTH {
            if let Some(t) = self.tower_mut(modality) {
                t.visit_prefixed_mut(modality.name(), f);
            }
        }
    }
}

impl<T: Real> AVModel<T> {
    pub fn cast<U: Real>(&self) -> AVModel<U> {
        AVModel {
            visual: self.visual.as_ref().map(ModalityTower::cast),
            audio: self.audio.as_ref().map(ModalityTower::cast),
            mode: self.mode,
            eps: self.eps,
        }
    }
}

fn check_labels<T: Real>(phi: ArrayView2<'_, T>, y: ArrayView2<'_, T>) -> Result<()> {
    if phi.dim() != y.dim() {
        return Err(Error::shape(format!("scores {:?} vs labels {:?}", phi.dim(), y.dim())));
    }
    if phi.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if y.iter().any(|&v| v != T::one() && v != -T::one()) {
        return Err(Error::invalid("labels must be -1 or +1"));
    }
    Ok(())
}

/// Multi-label hinge loss `1/(C·n) Σ_n Σ_c max(0, 1 - y_c φ_c)` over a batch
/// of `n` bags.
pub fn hinge_loss<T: Real>(phi: ArrayView2<'_, T>, y: ArrayView2<'_, T>) -> Result<T> {
    check_labels(phi, y)?;
    let scale = T::of(1.0 / phi.len() as f64);
    Ok(phi
        .iter()
        .zip(y.iter())
        .map(|(&p, &l)| (T::one() - l * p).max(T::zero()))
        .sum::<T>()
        * scale)
}

/// `∂L/∂φ` of [`hinge_loss`]; the subgradient at margin exactly one is zero.
pub fn hinge_loss_grad<T: Real>(phi: ArrayView2<'_, T>, y: ArrayView2<'_, T>) -> Result<Array2<T>> {
    check_labels(phi, y)?;
    let scale = T::of(1.0 / phi.len() as f64);
    let mut grad = y.to_owned();
    grad.zip_mut_with(&phi, |g, &p| {
        let l = *g;
        *g = if T::one() - l * p > T::zero() { -l * scale } else { T::zero() };
    });
    Ok(grad)
}

/// Stacks label vectors into an `n × C` matrix of ±1.
pub fn label_matrix<T: Real>(bags: &[&VideoBag]) -> Array2<T> {
    let c = bags.first().map_or(0, |b| b.num_classes());
    Array2::from_shape_fn((bags.len(), c), |(i, j)| T::of(bags[i].labels.values()[j] as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FeatureMatrix, LabelVector};
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn arch(c: usize) -> ArchConfig {
        ArchConfig {
            num_classes: c,
            visual_dim: 4,
            audio_dim: 3,
            visual_hidden: vec![5],
            audio_hidden: vec![4],
            dropout: 0.0,
        }
    }

    fn random_bag(rng: &mut ChaCha8Rng, c: usize, m: usize, t: usize) -> VideoBag {
        let v = (0..m * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = (0..t * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        VideoBag::new(
            "r",
            FeatureMatrix::from_shape_vec(m, 4, v).unwrap(),
            FeatureMatrix::from_shape_vec(t, 3, a).unwrap(),
            LabelVector::from_positives(c, &[0]).unwrap(),
        )
    }

    #[test]
    fn single_proposal_softmax_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tower = ModalityTower::<f64>::new(4, &[], 3, 0.0, &mut rng);
        let z = array![[0.3, -0.2, 0.1, 0.9]];
        let s = score_proposals(z.view(), &tower.head).unwrap();
        assert!(s.sigma_b.iter().all(|&v| v == 1.0));
        assert_eq!(s.d, s.a);
    }

    #[test]
    fn hand_weighted_product_and_pooling() {
        let a = array![[1.0, 0.0], [2.0, 0.0]];
        let sigma = array![[0.5, 0.25], [0.5, 0.75]];
        let d = &a * &sigma;
        assert_eq!(d, array![[0.5, 0.0], [1.0, 0.0]]);
        let (pooled, normalized) = pool_and_normalize(d.view(), 1e-12);
        assert_eq!(pooled, array![1.5, 0.0]);
        assert_eq!(normalized, array![1.0, 0.0]);
        let (_, zero) = pool_and_normalize(Array2::<f64>::zeros((3, 2)).view(), 1e-12);
        assert_eq!(zero, array![0.0, 0.0]);
        let permuted = array![[1.0, 0.0], [0.5, 0.0]];
        assert_eq!(pool_and_normalize(permuted.view(), 1e-12).1, normalized);
    }

    #[test]
    fn hinge_examples() {
        let y = array![[1.0, -1.0]];
        assert_eq!(hinge_loss(array![[2.0, -3.0]].view(), y.view()).unwrap(), 0.0);
        assert_eq!(hinge_loss(array![[0.5, 0.0]].view(), y.view()).unwrap(), 0.75);
        let y3 = array![[1.0, -1.0, 1.0], [-1.0, -1.0, 1.0]];
        assert_eq!(hinge_loss(Array2::<f64>::zeros((2, 3)).view(), y3.view()).unwrap(), 1.0);
        assert!(hinge_loss(array![[0.0]].view(), array![[0.0]].view()).is_err());
        // kink: margin exactly one gives zero subgradient
        let g = hinge_loss_grad(array![[0.0, -0.5]].view(), array![[1.0, -1.0]].view()).unwrap();
        assert_eq!(g, array![[-0.5, 0.5]]);
        let g = hinge_loss_grad(array![[1.0]].view(), array![[1.0]].view()).unwrap();
        assert_eq!(g, array![[0.0]]);
    }

    #[test]
    fn zero_audio_tower_leaves_visual_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut model = AVModel::<f64>::new(&arch(3), FusionMode::Av, &mut rng);
        model.audio.as_mut().unwrap().visit_prefixed_mut("audio", &mut |_, d| d.fill(0.0));
        let bag = random_bag(&mut rng, 3, 4, 2);
        let (phi, cache) = model.forward(&bag, &mut Pass::Eval).unwrap();
        assert_eq!(phi, cache.visual.as_ref().unwrap().normalized);
        assert!(cache.audio.as_ref().unwrap().normalized.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn visual_only_ignores_audio() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = AVModel::<f64>::new(&arch(2), FusionMode::VisualOnly, &mut rng);
        assert!(model.audio.is_none());
        let bag = random_bag(&mut rng, 2, 3, 2);
        let mut other = bag.clone();
        other.audio = FeatureMatrix::from_shape_vec(5, 3, vec![9.0; 15]).unwrap();
        let (a, _) = model.forward(&bag, &mut Pass::Eval).unwrap();
        let (b, _) = model.forward(&other, &mut Pass::Eval).unwrap();
        assert_eq!(a, b);
        let grads = model.backward(&model.forward(&bag, &mut Pass::Eval).unwrap().1, array![1.0, -1.0].view());
        assert!(grads.entries().iter().all(|e| e.name.starts_with("visual.")));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = AVModel::<f32>::new(&arch(2), FusionMode::Av, &mut rng);
        let mut bag = random_bag(&mut rng, 2, 3, 2);
        bag.visual = FeatureMatrix::from_shape_vec(3, 7, vec![0.0; 21]).unwrap();
        assert!(model.forward(&bag, &mut Pass::Eval).is_err());
        let bag = random_bag(&mut rng, 3, 3, 2);
        assert!(model.forward(&bag, &mut Pass::Eval).is_err());
    }

    #[test]
    fn zero_loss_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = AVModel::<f64>::new(&arch(2), FusionMode::Av, &mut rng);
        let bag = random_bag(&mut rng, 2, 3, 2);
        let (_, cache) = model.forward(&bag, &mut Pass::Eval).unwrap();
        // every margin above one: the loss is flat
        let d_phi = hinge_loss_grad(array![[5.0, 5.0]].view(), array![[1.0, 1.0]].view()).unwrap();
        let grads = model.backward(&cache, d_phi.row(0));
        assert_eq!(grads.max_abs(), 0.0);
        assert!(grads.matches_layout(&model));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for mode in [FusionMode::Av, FusionMode::VisualOnly, FusionMode::AudioOnly] {
            let mut model = AVModel::<f64>::new(&arch(3), mode, &mut rng);
            let bag = random_bag(&mut rng, 3, 4, 3);
            let y = label_matrix::<f64>(&[&bag]);
            let loss = |m: &AVModel<f64>| {
                let (phi, _) = m.forward(&bag, &mut Pass::Eval).unwrap();
                hinge_loss(phi.view().insert_axis(Axis(0)), y.view()).unwrap()
            };
            let (phi, cache) = model.forward(&bag, &mut Pass::Eval).unwrap();
            let d_phi = hinge_loss_grad(phi.view().insert_axis(Axis(0)), y.view()).unwrap();
            let grads = model.backward(&cache, d_phi.row(0)).to_f64();
            let report = crate::nn::gradient_check_with(&mut model, &grads, loss, crate::nn::GradCheckConfig { probe: 1e-4, floor: 1e-6 });
            assert!(report.max_relative_error < 1e-6, "{mode:?}: {report:?}");
        }
    }

    #[test]
    fn frozen_dropout_masks_give_exact_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut a = arch(2);
        a.dropout = 0.5;
        let model = AVModel::<f64>::new(&a, FusionMode::Av, &mut rng);
        let bag = random_bag(&mut rng, 2, 4, 3);
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(99);
        let (_, cache) = model.forward(&bag, &mut Pass::Train(&mut dropout_rng)).unwrap();
        // replaying the same seed reproduces the masks
        let mut replay = ChaCha8Rng::seed_from_u64(99);
        let (phi2, _) = model.forward(&bag, &mut Pass::Train(&mut replay)).unwrap();
        assert_eq!(cache.phi, phi2);
        let w = array![0.7, -0.3];
        let grads = model.backward(&cache, w.view()).to_f64();
        let mut probe = model.clone();
        let report = crate::nn::gradient_check_with(
            &mut probe,
            &grads,
            |m: &AVModel<f64>| {
                let mut r = ChaCha8Rng::seed_from_u64(99);
                m.forward(&bag, &mut Pass::Train(&mut r)).unwrap().0.dot(&w)
            },
            crate::nn::GradCheckConfig { probe: 1e-4, floor: 1e-6 },
        );
        assert!(report.max_relative_error < 1e-6, "{report:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn fused_scores_bounded(seed in 0u64..10_000, m in 1usize..6, t in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = AVModel::<f64>::new(&arch(3), FusionMode::Av, &mut rng);
            let bag = random_bag(&mut rng, 3, m, t);
            let (phi, cache) = model.forward(&bag, &mut Pass::Eval).unwrap();
            prop_assert!(phi.iter().all(|v| v.abs() <= 2.0 + 1e-12));
            for mc in [cache.visual.unwrap(), cache.audio.unwrap()] {
                prop_assert!(mc.normalized.dot(&mc.normalized).sqrt() <= 1.0 + 1e-12);
                for col in mc.scores.sigma_b.columns() {
                    prop_assert!((col.sum() - 1.0).abs() < 1e-6);
                }
                prop_assert_eq!(&mc.scores.d, &(&mc.scores.a * &mc.scores.sigma_b));
            }
        }
    }
}
