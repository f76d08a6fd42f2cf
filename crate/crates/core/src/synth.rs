//! Planted-signal audio-visual bags.
//!
//! Every class owns a fixed pair of random unit directions, one per modality.
//! A bag's proposals are isotropic Gaussian background; for each class present
//! in the bag, `k_v` visual proposals and `k_a` audio segments get
//! `signal_scale · direction` added. Visual and audio positions are drawn
//! independently, so the two cues of an event are generally not aligned in
//! time. The planted positions are stored as ground truth.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{
    write_dataset, Dataset, FeatureMatrix, GroundTruth, LabelVector, Modality, Split, VideoBag,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub train_bags: usize,
    pub val_bags: usize,
    pub test_bags: usize,
    pub visual_proposals: usize,
    pub audio_segments: usize,
    pub visual_dim: usize,
    pub audio_dim: usize,
    pub signal_scale: f64,
    pub background_sigma: f64,
    pub planted_visual: usize,
    pub planted_audio: usize,
    /// Probability that each further class joins a bag's primary class.
    pub multi_label_prob: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 5,
            train_bags: 200,
            val_bags: 50,
            test_bags: 50,
            visual_proposals: 20,
            audio_segments: 10,
            visual_dim: 32,
            audio_dim: 16,
            signal_scale: 3.0,
            background_sigma: 1.0,
            planted_visual: 3,
            planted_audio: 2,
            multi_label_prob: 0.1,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_classes", self.num_classes),
            ("train_bags", self.train_bags),
            ("val_bags", self.val_bags),
            ("test_bags", self.test_bags),
            ("visual_proposals", self.visual_proposals),
            ("audio_segments", self.audio_segments),
            ("visual_dim", self.visual_dim),
            ("audio_dim", self.audio_dim),
            ("planted_visual", self.planted_visual),
            ("planted_audio", self.planted_audio),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        if self.planted_visual > self.visual_proposals {
            return Err(Error::invalid("planted_visual exceeds visual_proposals"));
        }
        if self.planted_audio > self.audio_segments {
            return Err(Error::invalid("planted_audio exceeds audio_segments"));
        }
        if !(self.signal_scale.is_finite() && self.signal_scale > 0.0) {
            return Err(Error::invalid("signal_scale must be positive"));
        }
        if !(self.background_sigma.is_finite() && self.background_sigma >= 0.0) {
            return Err(Error::invalid("background_sigma must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.multi_label_prob) {
            return Err(Error::invalid("multi_label_prob outside [0, 1]"));
        }
        Ok(())
    }

    fn bags(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_bags,
            Split::Val => self.val_bags,
            Split::Test => self.test_bags,
        }
    }
}

/// Generated splits plus the class directions used to plant them.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub config: SynthConfig,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    /// `C × d_v` unit rows.
    pub visual_directions: Array2<f32>,
    /// `C × d_a` unit rows.
    pub audio_directions: Array2<f32>,
}

impl SynthData {
    pub fn split(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Independent RNG stream per `(seed, stream)`; stream 0 holds the class
/// directions, bags use `1 + split·2³² + index`.
fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn bag_stream(split: Split, index: usize) -> u64 {
    let s = match split {
        Split::Train => 0u64,
        Split::Val => 1,
        Split::Test => 2,
    };
    1 + (s << 32) + index as u64
}

fn unit_directions<R: Rng>(rows: usize, dim: usize, rng: &mut R) -> Array2<f32> {
    let normal = Normal::new(0.0f64, 1.0).expect("unit normal");
    let mut out = Array2::zeros((rows, dim));
    for mut row in out.rows_mut() {
        let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        for (dst, x) in row.iter_mut().zip(v) {
            *dst = (x / norm) as f32;
        }
    }
    out
}

fn background<R: Rng>(rows: usize, dim: usize, sigma: f64, rng: &mut R) -> Array2<f64> {
    if sigma == 0.0 {
        return Array2::zeros((rows, dim));
    }
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    Array2::from_shape_simple_fn((rows, dim), || normal.sample(rng))
}

fn plant<R: Rng>(
    features: &mut Array2<f64>,
    direction: ndarray::ArrayView1<'_, f32>,
    count: usize,
    scale: f64,
    rng: &mut R,
) -> Vec<u32> {
    let mut picked: Vec<u32> = index::sample(rng, features.nrows(), count)
        .into_iter()
        .map(|i| i as u32)
        .collect();
    picked.sort_unstable();
    for &p in &picked {
        for (x, &d) in features.row_mut(p as usize).iter_mut().zip(direction) {
            *x += scale * d as f64;
        }
    }
    picked
}

fn to_features(x: Array2<f64>) -> Result<FeatureMatrix> {
    FeatureMatrix::new(x.mapv(|v| v as f32))
}

fn generate_bag(
    config: &SynthConfig,
    split: Split,
    index: usize,
    visual_dirs: &Array2<f32>,
    audio_dirs: &Array2<f32>,
) -> Result<VideoBag> {
    let mut rng = stream_rng(config.seed, bag_stream(split, index));
    let c = config.num_classes;
    let primary = rng.random_range(0..c);
    let mut positives = vec![primary];
    for k in 0..c {
        if k != primary && rng.random_bool(config.multi_label_prob) {
            positives.push(k);
        }
    }
    positives.sort_unstable();

    let mut visual = background(
        config.visual_proposals,
        config.visual_dim,
        config.background_sigma,
        &mut rng,
    );
    let mut audio = background(
        config.audio_segments,
        config.audio_dim,
        config.background_sigma,
        &mut rng,
    );
    let mut gt = GroundTruth::empty(c);
    for &k in &positives {
        gt.visual[k] = plant(
            &mut visual,
            visual_dirs.row(k),
            config.planted_visual,
            config.signal_scale,
            &mut rng,
        );
        gt.audio[k] = plant(
            &mut audio,
            audio_dirs.row(k),
            config.planted_audio,
            config.signal_scale,
            &mut rng,
        );
    }
    VideoBag::new(
        format!("{}-{index:05}", split.name()),
        to_features(visual)?,
        to_features(audio)?,
        LabelVector::from_positives(c, &positives)?,
    )
    .with_ground_truth(gt)
}

/// Generates train, validation and test splits. A pure function of `config`.
pub fn generate(config: &SynthConfig) -> Result<SynthData> {
    config.validate()?;
    let mut dir_rng = stream_rng(config.seed, 0);
    let visual_directions = unit_directions(config.num_classes, config.visual_dim, &mut dir_rng);
    let audio_directions = unit_directions(config.num_classes, config.audio_dim, &mut dir_rng);
    let names = Dataset::default_class_names(config.num_classes);
    let mut splits = Vec::with_capacity(3);
    for split in Split::ALL {
        let bags = (0..config.bags(split))
            .map(|i| generate_bag(config, split, i, &visual_directions, &audio_directions))
            .collect::<Result<Vec<_>>>()?;
        splits.push(Dataset::new(bags, names.clone(), split)?);
    }
    let test = splits.pop().expect("three splits");
    let val = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(SynthData {
        config: config.clone(),
        train,
        val,
        test,
        visual_directions,
        audio_directions,
    })
}

/// Writes the three manifests, their bag files and `synth_config.json`.
/// Returns the manifest paths in train, val, test order.
pub fn write_synth(data: &SynthData, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifests = Vec::with_capacity(3);
    for split in Split::ALL {
        manifests.push(write_dataset(data.split(split), dir)?);
    }
    let cfg = dir.join("synth_config.json");
    let mut json = serde_json::to_vec_pretty(&data.config)?;
    json.push(b'\n');
    fs::write(&cfg, json).map_err(|e| Error::io(&cfg, e))?;
    Ok(manifests)
}

/// Replaces the planted proposals of `modality` with fresh background noise
/// in exactly `⌊fraction · n⌋` bags, chosen by `seed`, and clears that
/// modality's ground truth there.
pub fn degrade_modality(
    dataset: Dataset,
    modality: Modality,
    fraction: f64,
    background_sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid(format!("fraction {fraction} outside [0, 1]")));
    }
    if !(background_sigma.is_finite() && background_sigma >= 0.0) {
        return Err(Error::invalid("background_sigma must be non-negative"));
    }
    if let Some(bag) = dataset.bags().iter().find(|b| b.ground_truth.is_none()) {
        return Err(Error::invalid(format!(
            "bag {} has no ground truth to degrade",
            bag.id
        )));
    }
    let n = dataset.len();
    let count = (fraction * n as f64).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream_rng(seed, u64::MAX);
    order.shuffle(&mut rng);
    let mut selected = vec![false; n];
    for &i in &order[..count] {
        selected[i] = true;
    }
    let normal = (background_sigma > 0.0).then(|| Normal::new(0.0, background_sigma).expect("valid sigma"));
    let mut position = 0;
    dataset.map_bags(|mut bag| {
        let chosen = selected[position];
        position += 1;
        if !chosen {
            return Ok(bag);
        }
        let mut gt = bag.ground_truth.take().expect("checked above");
        let mut rows: Vec<u32> = gt.for_modality(modality).iter().flatten().copied().collect();
        rows.sort_unstable();
        rows.dedup();
        let features = bag.features_mut(modality);
        let dim = features.cols();
        for row in rows {
            let noise: Vec<f32> = (0..dim)
                .map(|_| normal.map_or(0.0, |d| d.sample(&mut rng)) as f32)
                .collect();
            features.set_row(row as usize, &noise)?;
        }
        for list in gt.for_modality_mut(modality).iter_mut() {
            list.clear();
        }
        bag.ground_truth = Some(gt);
        Ok(bag)
    })
}
