//! Per-proposal evidence for one class, ranking and export.
//!
//! The evidence of a two-stream or WSDDN-type model is column `c` of `D`; for
//! the one-stream baseline it is column `c` of the class logits `A`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, GroundTruth, Modality, VideoBag};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::real::Real;

/// Evidence of one class in one bag. Each present modality carries raw
/// scores in temporal order and the indices sorted by descending score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationResult {
    pub bag_id: String,
    pub class: usize,
    pub visual: Option<ModalityScores>,
    pub audio: Option<ModalityScores>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityScores {
    pub scores: Vec<f64>,
    /// All indices, highest score first, ties by lower index.
    pub ranking: Vec<usize>,
}

impl ModalityScores {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::invalid("no proposals to rank"));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::invalid(format!("non-finite evidence at proposal {i}")));
        }
        Ok(Self {
            ranking: rank_descending(&scores),
            scores,
        })
    }

    pub fn top(&self, k: usize) -> &[usize] {
        &self.ranking[..k.min(self.ranking.len())]
    }

    pub fn scaled(&self) -> Vec<f64> {
        scale_unit(&self.scores)
    }
}

impl LocalizationResult {
    pub fn modality(&self, modality: Modality) -> Option<&ModalityScores> {
        match modality {
            Modality::Visual => self.visual.as_ref(),
            Modality::Audio => self.audio.as_ref(),
        }
    }
}

fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // stable sort keeps lower indices first among equals
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Evaluation-mode evidence of `class` in `bag`.
pub fn localize<T: Real>(model: &Model<T>, bag: &VideoBag, class: usize) -> Result<LocalizationResult> {
    let c = model.num_classes();
    if class >= c {
        return Err(Error::invalid(format!("class {class} out of range for {c} classes")));
    }
    let evidence = model.evidence(bag)?;
    let column = |m: Modality| -> Result<Option<ModalityScores>> {
        evidence
            .modality(m)
            .map(|d| ModalityScores::new(d.column(class).iter().map(|v| v.to_f64_lossy()).collect()))
            .transpose()
    };
    Ok(LocalizationResult {
        bag_id: bag.id.clone(),
        class,
        visual: column(Modality::Visual)?,
        audio: column(Modality::Audio)?,
    })
}

/// Affine map onto `[0, 1]`; constant input maps to zeros.
pub fn scale_unit(scores: &[f64]) -> Vec<f64> {
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 0.0) {
        return vec![0.0; scores.len()];
    }
    scores.iter().map(|s| (s - lo) / span).collect()
}

/// Per-modality hit flags. `None` when the modality is absent from the
/// result or has no planted proposals for the class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Hits {
    pub visual: Option<bool>,
    pub audio: Option<bool>,
}

/// Whether any of the `k` top-ranked proposals is a planted one.
pub fn hit_at_k(result: &LocalizationResult, ground_truth: Option<&GroundTruth>, k: usize) -> Result<Hits> {
    let gt = ground_truth
        .ok_or_else(|| Error::invalid(format!("bag {} has no ground truth", result.bag_id)))?;
    if k == 0 {
        return Err(Error::invalid("k must be positive"));
    }
    if result.class >= gt.visual.len() {
        return Err(Error::invalid(format!("class {} missing from ground truth", result.class)));
    }
    let hit = |m: Modality| {
        let planted = &gt.for_modality(m)[result.class];
        let scores = result.modality(m)?;
        if planted.is_empty() {
            return None;
        }
        Some(scores.top(k).iter().any(|&i| planted.contains(&(i as u32))))
    };
    Ok(Hits {
        visual: hit(Modality::Visual),
        audio: hit(Modality::Audio),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct HitCount {
    pub hits: usize,
    pub total: usize,
}

impl HitCount {
    pub fn rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.hits as f64 / self.total as f64
        }
    }

    fn add(&mut self, hit: Option<bool>) {
        if let Some(h) = hit {
            self.total += 1;
            self.hits += h as usize;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HitSummary {
    pub k: usize,
    pub visual: HitCount,
    pub audio: HitCount,
}

/// hit@k over every (bag, positive class) pair of bags with ground truth.
/// Returns `None` when no bag has ground truth.
pub fn hit_summary<T: Real>(model: &Model<T>, dataset: &Dataset, k: usize) -> Result<Option<HitSummary>> {
    let mut summary = HitSummary {
        k,
        visual: HitCount::default(),
        audio: HitCount::default(),
    };
    let mut any = false;
    for bag in dataset.bags() {
        let Some(gt) = bag.ground_truth.as_ref() else {
            continue;
        };
        any = true;
        for c in bag.labels.positives() {
            let hits = hit_at_k(&localize(model, bag, c)?, Some(gt), k)?;
            summary.visual.add(hits.visual);
            summary.audio.add(hits.audio);
        }
    }
    Ok(any.then_some(summary))
}

/// Temporal metadata attached to exported rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatmapLayout {
    /// Visual proposals per frame; proposal `i` belongs to frame `i / n`.
    pub proposals_per_frame: usize,
    /// Audio segment `t` starts at `t · segment_stride_s` seconds.
    pub segment_stride_s: f64,
}

impl Default for HeatmapLayout {
    fn default() -> Self {
        Self {
            proposals_per_frame: 10,
            segment_stride_s: 0.48,
        }
    }
}

pub const HEATMAP_HEADER: &str = "bag,class,modality,index,frame,start_s,score,scaled\n";

/// CSV rows for one result: `M` visual rows then `T` audio rows. Visual
/// rows fill `frame`, audio rows fill `start_s`.
pub fn heatmap_rows(result: &LocalizationResult, class_name: &str, layout: HeatmapLayout) -> String {
    let mut out = String::new();
    let per_frame = layout.proposals_per_frame.max(1);
    for m in Modality::BOTH {
        let Some(scores) = result.modality(m) else {
            continue;
        };
        for (i, (raw, scaled)) in scores.scores.iter().zip(scores.scaled()).enumerate() {
            let (frame, start) = match m {
                Modality::Visual => ((i / per_frame).to_string(), String::new()),
                Modality::Audio => (String::new(), format!("{:.2}", i as f64 * layout.segment_stride_s)),
            };
            let _ = writeln!(
                out,
                "{},{},{},{i},{frame},{start},{raw},{scaled}",
                result.bag_id,
                class_name,
                m.name()
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FeatureMatrix, LabelVector};
    use crate::model::{ArchConfig, ModelConfig, ModelKind};
    use crate::scoring::FusionMode;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn result(scores: Vec<f64>) -> LocalizationResult {
        LocalizationResult {
            bag_id: "b".into(),
            class: 0,
            visual: Some(ModalityScores::new(scores).unwrap()),
            audio: None,
        }
    }

    fn gt_visual(indices: Vec<u32>) -> GroundTruth {
        GroundTruth {
            visual: vec![indices],
            audio: vec![vec![]],
        }
    }

    #[test]
    fn scale_unit_examples() {
        assert_eq!(scale_unit(&[2.0, 4.0]), vec![0.0, 1.0]);
        assert_eq!(scale_unit(&[5.0, 5.0, 5.0]), vec![0.0; 3]);
        let s = scale_unit(&[1.0, 2.0, 4.0]);
        assert!((s[1] - 1.0 / 3.0).abs() < 1e-15 && s[0] == 0.0 && s[2] == 1.0);
    }

    #[test]
    fn hit_examples() {
        let r = result(vec![9.0, 1.0, 1.0]);
        assert_eq!(hit_at_k(&r, Some(&gt_visual(vec![0])), 1).unwrap().visual, Some(true));
        assert_eq!(hit_at_k(&r, Some(&gt_visual(vec![2])), 1).unwrap().visual, Some(false));
        // tie between 1 and 2 goes to index 1
        assert_eq!(hit_at_k(&r, Some(&gt_visual(vec![1])), 2).unwrap().visual, Some(true));
        assert_eq!(hit_at_k(&r, Some(&gt_visual(vec![2])), 2).unwrap().visual, Some(false));
        assert!(hit_at_k(&r, None, 1).is_err());
        assert!(hit_at_k(&r, Some(&gt_visual(vec![0])), 0).is_err());
    }

    proptest! {
        #[test]
        fn exhaustive_k_always_hits(scores in proptest::collection::vec(-5.0f64..5.0, 1..12), pick in 0usize..12) {
            let n = scores.len();
            let r = result(scores);
            let h = hit_at_k(&r, Some(&gt_visual(vec![(pick % n) as u32])), n).unwrap();
            prop_assert_eq!(h.visual, Some(true));
        }

        #[test]
        fn scaling_preserves_argmax(scores in proptest::collection::vec(-5.0f64..5.0, 1..12)) {
            let raw = ModalityScores::new(scores.clone()).unwrap();
            let scaled = scale_unit(&scores);
            prop_assert!(scaled.iter().all(|s| (0.0..=1.0).contains(s)));
            let top = raw.ranking[0];
            let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(scaled[top], max);
        }
    }

    fn model_and_bag(m: usize) -> (Model<f64>, VideoBag) {
        let config = ModelConfig::new(
            ModelKind::TwoStream,
            FusionMode::Av,
            ArchConfig {
                num_classes: 2,
                visual_dim: 3,
                audio_dim: 2,
                visual_hidden: vec![4],
                audio_hidden: vec![4],
                dropout: 0.5,
            },
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = Model::new(&config, &mut rng).unwrap();
        let vis: Vec<f32> = (0..m * 3).map(|i| (i as f32 * 0.37).sin()).collect();
        let bag = VideoBag::new(
            "b",
            FeatureMatrix::from_shape_vec(m, 3, vis).unwrap(),
            FeatureMatrix::from_shape_vec(3, 2, vec![0.1, -0.4, 0.9, 0.2, -0.3, 0.5]).unwrap(),
            LabelVector::new(vec![1, -1]).unwrap(),
        );
        (model, bag)
    }

    #[test]
    fn single_proposal_evidence_is_the_class_score() {
        let (model, bag) = model_and_bag(1);
        let r = localize(&model, &bag, 1).unwrap();
        let Model::TwoStream(av) = &model else { unreachable!() };
        let tower = av.tower(Modality::Visual).unwrap();
        let (z, _) = tower
            .stack
            .forward(crate::scoring::features_as::<f64>(&bag, Modality::Visual), &mut crate::nn::Pass::Eval)
            .unwrap();
        let a = tower.head.cls.forward(z.view()).unwrap();
        assert!((r.visual.as_ref().unwrap().scores[0] - a[[0, 1]]).abs() < 1e-12);
        assert_eq!(r.visual.unwrap().ranking, vec![0]);
    }

    #[test]
    fn localize_is_repeat_stable_and_checks_class() {
        let (model, bag) = model_and_bag(4);
        assert_eq!(localize(&model, &bag, 0).unwrap(), localize(&model, &bag, 0).unwrap());
        assert!(localize(&model, &bag, 2).is_err());
    }

    #[test]
    fn heatmap_has_one_row_per_proposal() {
        let (model, bag) = model_and_bag(4);
        let r = localize(&model, &bag, 0).unwrap();
        let layout = HeatmapLayout {
            proposals_per_frame: 2,
            ..HeatmapLayout::default()
        };
        let rows = heatmap_rows(&r, "c0", layout);
        let lines: Vec<&str> = rows.lines().collect();
        assert_eq!(lines.len(), 4 + 3);
        assert!(lines[3].starts_with("b,c0,visual,3,1,,"));
        assert!(lines[6].starts_with("b,c0,audio,2,,0.96,"));
    }
}
