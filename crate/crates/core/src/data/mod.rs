//! Bags, labels and datasets.
//!
//! A [`VideoBag`] holds the `M` visual region proposals and `T` audio
//! segment proposals of one video as row-major feature matrices, together
//! with its video-level [`LabelVector`]. Bags may be ragged: `M` and `T` vary
//! freely between bags, only the feature widths are fixed per dataset.

pub(crate) mod format;
mod manifest;
mod windows;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};

pub use format::{decode_bag, encode_bag, read_bag, write_bag, BAG_MAGIC, BAG_VERSION};
pub use manifest::{load_dataset, write_dataset, ManifestHeader, ManifestRecord};
pub use windows::segment_windows;

/// Video-level labels over `C` classes, each entry `-1` (absent) or `+1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<i8>", into = "Vec<i8>")]
pub struct LabelVector(Vec<i8>);

impl LabelVector {
    pub fn new(values: Vec<i8>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("label vector must have at least one class"));
        }
        if let Some(&bad) = values.iter().find(|&&v| v != 1 && v != -1) {
            return Err(FormatError::InvalidLabel(bad).into());
        }
        Ok(Self(values))
    }

    /// Labels with `+1` exactly at `positives`.
    pub fn from_positives(num_classes: usize, positives: &[usize]) -> Result<Self> {
        let mut values = vec![-1i8; num_classes];
        for &c in positives {
            if c >= num_classes {
                return Err(Error::invalid(format!(
                    "class {c} out of range for {num_classes} classes"
                )));
            }
            values[c] = 1;
        }
        Self::new(values)
    }

    pub fn values(&self) -> &[i8] {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    pub fn is_positive(&self, class: usize) -> bool {
        self.0[class] > 0
    }

    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > 0)
            .map(|(c, _)| c)
    }

    pub fn has_positive(&self) -> bool {
        self.0.iter().any(|&v| v > 0)
    }
}

impl TryFrom<Vec<i8>> for LabelVector {
    type Error = Error;

    fn try_from(values: Vec<i8>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<LabelVector> for Vec<i8> {
    fn from(labels: LabelVector) -> Self {
        labels.0
    }
}

/// `|P| × d` proposal features. Never empty, always finite.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix(Array2<f32>);

impl FeatureMatrix {
    pub fn new(data: Array2<f32>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::invalid(format!(
                "feature matrix must be non-empty, got {}x{}",
                data.nrows(),
                data.ncols()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(FormatError::NonFinite {
                section: "features",
                index,
            }
            .into());
        }
        Ok(Self(data.as_standard_layout().into_owned()))
    }

    pub fn from_shape_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        let array = Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| Error::shape(format!("feature data: {e}")))?;
        Self::new(array)
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f32> {
        self.0.view()
    }

    pub fn as_array(&self) -> &Array2<f32> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f32> {
        self.0
    }

    /// Overwrite one proposal row. The row must be finite.
    pub fn set_row(&mut self, row: usize, values: &[f32]) -> Result<()> {
        if values.len() != self.cols() || row >= self.rows() {
            return Err(Error::shape(format!(
                "row {row} of width {} into {}x{}",
                values.len(),
                self.rows(),
                self.cols()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FormatError::NonFinite {
                section: "features",
                index: row * self.cols(),
            }
            .into());
        }
        for (dst, &src) in self.0.row_mut(row).iter_mut().zip(values) {
            *dst = src;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Visual,
    Audio,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::Visual, Modality::Audio];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Audio => "audio",
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Planted proposal indices per class, one list per modality. Only synthetic
/// bags carry it.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GroundTruth {
    pub visual: Vec<Vec<u32>>,
    pub audio: Vec<Vec<u32>>,
}

impl GroundTruth {
    pub fn empty(num_classes: usize) -> Self {
        Self {
            visual: vec![Vec::new(); num_classes],
            audio: vec![Vec::new(); num_classes],
        }
    }

    pub fn for_modality(&self, modality: Modality) -> &[Vec<u32>] {
        match modality {
            Modality::Visual => &self.visual,
            Modality::Audio => &self.audio,
        }
    }

    pub fn for_modality_mut(&mut self, modality: Modality) -> &mut Vec<Vec<u32>> {
        match modality {
            Modality::Visual => &mut self.visual,
            Modality::Audio => &mut self.audio,
        }
    }
}

/// One video: `M` visual proposals, `T` audio segments and its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoBag {
    pub id: String,
    pub visual: FeatureMatrix,
    pub audio: FeatureMatrix,
    pub labels: LabelVector,
    pub ground_truth: Option<GroundTruth>,
}

impl VideoBag {
    pub fn new(
        id: impl Into<String>,
        visual: FeatureMatrix,
        audio: FeatureMatrix,
        labels: LabelVector,
    ) -> Self {
        Self {
            id: id.into(),
            visual,
            audio,
            labels,
            ground_truth: None,
        }
    }

    pub fn with_ground_truth(mut self, ground_truth: GroundTruth) -> Result<Self> {
        self.ground_truth = Some(ground_truth);
        self.validate()?;
        Ok(self)
    }

    pub fn num_classes(&self) -> usize {
        self.labels.num_classes()
    }

    pub fn features(&self, modality: Modality) -> &FeatureMatrix {
        match modality {
            Modality::Visual => &self.visual,
            Modality::Audio => &self.audio,
        }
    }

    pub fn features_mut(&mut self, modality: Modality) -> &mut FeatureMatrix {
        match modality {
            Modality::Visual => &mut self.visual,
            Modality::Audio => &mut self.audio,
        }
    }

    /// Checks ground-truth shape and index bounds.
    pub fn validate(&self) -> Result<()> {
        let Some(gt) = &self.ground_truth else {
            return Ok(());
        };
        let c = self.num_classes();
        for modality in Modality::BOTH {
            let lists = gt.for_modality(modality);
            if lists.len() != c {
                return Err(FormatError::DimensionMismatch(format!(
                    "{modality} ground truth has {} classes, labels have {c}",
                    lists.len()
                ))
                .into());
            }
            let len = self.features(modality).rows();
            for list in lists {
                for (i, &index) in list.iter().enumerate() {
                    if index as usize >= len {
                        return Err(FormatError::IndexOutOfRange { index, len }.into());
                    }
                    if list[..i].contains(&index) {
                        return Err(FormatError::DimensionMismatch(format!(
                            "{modality} ground truth repeats index {index}"
                        ))
                        .into());
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split {other:?}"))),
        }
    }
}

/// An immutable, validated collection of bags sharing `C`, `d_v` and `d_a`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    bags: Vec<VideoBag>,
    num_classes: usize,
    class_names: Vec<String>,
    split: Split,
}

impl Dataset {
    pub fn new(bags: Vec<VideoBag>, class_names: Vec<String>, split: Split) -> Result<Self> {
        let first = bags.first().ok_or(Error::EmptyDataset)?;
        let num_classes = first.num_classes();
        let (d_v, d_a) = (first.visual.cols(), first.audio.cols());
        if class_names.len() != num_classes {
            return Err(Error::invalid(format!(
                "{} class names for {num_classes} classes",
                class_names.len()
            )));
        }
        for bag in &bags {
            let mismatch = if bag.num_classes() != num_classes {
                Some(format!("{} classes, expected {num_classes}", bag.num_classes()))
            } else if bag.visual.cols() != d_v {
                Some(format!("visual dim {}, expected {d_v}", bag.visual.cols()))
            } else if bag.audio.cols() != d_a {
                Some(format!("audio dim {}, expected {d_a}", bag.audio.cols()))
            } else {
                None
            };
            if let Some(msg) = mismatch {
                return Err(Error::Bag {
                    id: bag.id.clone(),
                    source: Box::new(FormatError::DimensionMismatch(msg).into()),
                });
            }
            if split == Split::Train && !bag.labels.has_positive() {
                return Err(Error::Bag {
                    id: bag.id.clone(),
                    source: Box::new(Error::invalid("training bag has no positive label")),
                });
            }
            bag.validate().map_err(|e| Error::Bag {
                id: bag.id.clone(),
                source: Box::new(e),
            })?;
        }
        Ok(Self {
            bags,
            num_classes,
            class_names,
            split,
        })
    }

    pub fn default_class_names(num_classes: usize) -> Vec<String> {
        (0..num_classes).map(|c| format!("class_{c}")).collect()
    }

    pub fn bags(&self) -> &[VideoBag] {
        &self.bags
    }

    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn visual_dim(&self) -> usize {
        self.bags[0].visual.cols()
    }

    pub fn audio_dim(&self) -> usize {
        self.bags[0].audio.cols()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|n| n == name)
    }

    /// Number of bags in which each class is present.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for bag in &self.bags {
            for c in bag.labels.positives() {
                counts[c] += 1;
            }
        }
        counts
    }

    /// Rebuilds the dataset after editing bags in place. Used by
    /// transformations such as modality degradation.
    pub fn map_bags(self, f: impl FnMut(VideoBag) -> Result<VideoBag>) -> Result<Self> {
        let bags = self.bags.into_iter().map(f).collect::<Result<Vec<_>>>()?;
        Self::new(bags, self.class_names, self.split)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bag(id: &str, d_v: usize, labels: &[i8]) -> VideoBag {
        VideoBag::new(
            id,
            FeatureMatrix::from_shape_vec(2, d_v, vec![0.5; 2 * d_v]).unwrap(),
            FeatureMatrix::from_shape_vec(1, 3, vec![1.0; 3]).unwrap(),
            LabelVector::new(labels.to_vec()).unwrap(),
        )
    }

    #[test]
    fn label_vector_rejects_zero_and_empty() {
        assert!(LabelVector::new(vec![1, 0]).is_err());
        assert!(LabelVector::new(vec![]).is_err());
        let labels = LabelVector::from_positives(3, &[2]).unwrap();
        assert_eq!(labels.values(), &[-1, -1, 1]);
        assert_eq!(labels.positives().collect::<Vec<_>>(), vec![2]);
    }

    #[test]
    fn feature_matrix_rejects_empty_and_nan() {
        assert!(FeatureMatrix::from_shape_vec(0, 4, vec![]).is_err());
        let err = FeatureMatrix::from_shape_vec(1, 2, vec![0.0, f32::NAN]).unwrap_err();
        assert!(matches!(
            err,
            Error::Format(FormatError::NonFinite { index: 1, .. })
        ));
    }

    #[test]
    fn dataset_rejects_mixed_dims_naming_bag() {
        let bags = vec![bag("a", 4, &[1, -1]), bag("b", 5, &[1, -1])];
        let err = Dataset::new(bags, Dataset::default_class_names(2), Split::Test).unwrap_err();
        match err {
            Error::Bag { id, .. } => assert_eq!(id, "b"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn training_split_requires_a_positive_label() {
        let bags = vec![bag("neg", 4, &[-1, -1])];
        assert!(Dataset::new(bags.clone(), Dataset::default_class_names(2), Split::Train).is_err());
        assert!(Dataset::new(bags, Dataset::default_class_names(2), Split::Test).is_ok());
    }

    #[test]
    fn ground_truth_bounds_checked() {
        let mut gt = GroundTruth::empty(2);
        gt.visual[0].push(2);
        assert!(bag("a", 4, &[1, -1]).with_ground_truth(gt).is_err());
    }

    #[test]
    fn class_counts_cover_multi_label_bags() {
        let bags = vec![bag("a", 4, &[1, 1]), bag("b", 4, &[1, -1])];
        let ds = Dataset::new(bags, Dataset::default_class_names(2), Split::Train).unwrap();
        assert_eq!(ds.class_counts(), vec![2, 1]);
    }
}
