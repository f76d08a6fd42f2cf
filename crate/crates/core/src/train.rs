//! Adam, balanced batch sampling and the training loop.
//!
//! The loop draws batch composition and dropout masks from one ChaCha stream,
//! so `(dataset, config)` fixes the parameter trajectory bit for bit. A
//! checkpoint carries the Adam moments and the RNG position; resuming an `f32`
//! run from it continues the same trajectory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate_scores, label_matrix_i8, score_dataset, tune_thresholds};
use crate::model::{write_checkpoint, ArchConfig, Checkpoint, Model, ModelConfig, ModelKind};
use crate::nn::{GradStore, NamedTensor, Parameters, Pass};
use crate::real::Real;
use crate::scoring::{label_matrix, FusionMode};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments mirroring a parameter layout, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<NamedTensor<T>>,
    v: Vec<NamedTensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new<P: Parameters<T> + ?Sized>(params: &P, config: AdamConfig) -> Self {
        let zeros: Vec<_> = params
            .param_layout()
            .into_iter()
            .map(|(name, shape)| NamedTensor {
                name,
                shape,
                data: vec![T::zero(); shape.0 * shape.1],
            })
            .collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Rebuilds a state from stored moments, checking them against `params`.
    pub fn from_parts<P: Parameters<T> + ?Sized>(
        params: &P,
        config: AdamConfig,
        step: u64,
        m: Vec<NamedTensor<T>>,
        v: Vec<NamedTensor<T>>,
    ) -> Result<Self> {
        let layout = params.param_layout();
        for moments in [&m, &v] {
            let ok = moments.len() == layout.len()
                && moments
                    .iter()
                    .zip(&layout)
                    .all(|(t, (n, s))| t.name == *n && t.shape == *s && t.data.len() == s.0 * s.1);
            if !ok {
                return Err(Error::shape("optimizer moments do not match the model"));
            }
        }
        Ok(Self { config, step, m, v })
    }

    pub fn first_moments(&self) -> &[NamedTensor<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[NamedTensor<T>] {
        &self.v
    }

    /// One bias-corrected Adam update of `params` with `grads`.
    pub fn step<P: Parameters<T> + ?Sized>(&mut self, params: &mut P, grads: &GradStore<T>) -> Result<()> {
        let entries = grads.entries();
        let layout_ok = entries.len() == self.m.len()
            && entries
                .iter()
                .zip(&self.m)
                .all(|(g, m)| g.name == m.name && g.shape == m.shape);
        if !layout_ok || !grads.matches_layout(params) {
            return Err(Error::shape("gradient layout does not match the optimizer state"));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let b1 = T::of(c.beta1);
        let b2 = T::of(c.beta2);
        let one = T::one();
        let bc1 = T::of(1.0 - c.beta1.powi(t));
        let bc2 = T::of(1.0 - c.beta2.powi(t));
        let lr = T::of(c.lr);
        let eps = T::of(c.eps);
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut i = 0;
        params.visit_mut(&mut |_, theta| {
            let g = &entries[i].data;
            let m = &mut ms[i].data;
            let v = &mut vs[i].data;
            for k in 0..theta.len() {
                m[k] = b1 * m[k] + (one - b1) * g[k];
                v[k] = b2 * v[k] + (one - b2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                theta[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            i += 1;
        });
        Ok(())
    }
}

/// Class ids in ascending order, class `c` repeated `min(count_c, cap)` times.
pub fn build_sampling_list(class_counts: &[usize], cap: usize) -> Result<Vec<usize>> {
    if cap == 0 {
        return Err(Error::invalid("balance cap must be positive"));
    }
    if class_counts.iter().all(|&n| n == 0) {
        return Err(Error::invalid("every class count is zero"));
    }
    Ok(class_counts
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat_n(c, n.min(cap)))
        .collect())
}

/// Lower median of the nonzero class counts, at least 1.
pub fn median_cap(class_counts: &[usize]) -> usize {
    let mut nonzero: Vec<usize> = class_counts.iter().copied().filter(|&n| n > 0).collect();
    if nonzero.is_empty() {
        return 1;
    }
    nonzero.sort_unstable();
    nonzero[(nonzero.len() - 1) / 2].max(1)
}

/// Label-first sampler: draw a class from the capped list, then a bag of that
/// class. Draws are with replacement.
#[derive(Debug, Clone, PartialEq)]
pub struct BalancedSampler {
    sampling_list: Vec<usize>,
    class_bags: Vec<Vec<usize>>,
}

impl BalancedSampler {
    /// `cap = None` uses [`median_cap`].
    pub fn new(dataset: &Dataset, cap: Option<usize>) -> Result<Self> {
        let counts = dataset.class_counts();
        let cap = cap.unwrap_or_else(|| median_cap(&counts));
        let sampling_list = build_sampling_list(&counts, cap)?;
        let mut class_bags = vec![Vec::new(); dataset.num_classes()];
        for (i, bag) in dataset.bags().iter().enumerate() {
            for c in bag.labels.positives() {
                class_bags[c].push(i);
            }
        }
        Ok(Self {
            sampling_list,
            class_bags,
        })
    }

    pub fn sampling_list(&self) -> &[usize] {
        &self.sampling_list
    }

    pub fn class_bags(&self, class: usize) -> &[usize] {
        &self.class_bags[class]
    }

    /// Bag indices (into the dataset) for one batch.
    pub fn sample_batch<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Vec<usize> {
        (0..batch_size)
            .map(|_| {
                let class = self.sampling_list[rng.random_range(0..self.sampling_list.len())];
                let bags = &self.class_bags[class];
                bags[rng.random_range(0..bags.len())]
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub dropout: f64,
    /// `None` means the median class count.
    pub cap: Option<usize>,
    /// Validation every this many steps, when a validation set is supplied.
    pub eval_interval: usize,
    pub mode: FusionMode,
    pub model: ModelKind,
    pub visual_hidden: Vec<usize>,
    pub audio_hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let arch = ArchConfig::full(1);
        Self {
            iterations: 25_000,
            learning_rate: 1e-5,
            batch_size: 24,
            seed: 0,
            dropout: 0.5,
            cap: None,
            eval_interval: 1000,
            mode: FusionMode::Av,
            model: ModelKind::TwoStream,
            visual_hidden: arch.visual_hidden,
            audio_hidden: arch.audio_hidden,
        }
    }
}

impl TrainConfig {
    /// Small towers and a larger step size, for synthetic data on a laptop.
    pub fn desk() -> Self {
        let arch = ArchConfig::desk(1, 1, 1);
        Self {
            iterations: 2000,
            learning_rate: 2e-3,
            eval_interval: 250,
            visual_hidden: arch.visual_hidden,
            audio_hidden: arch.audio_hidden,
            ..Self::default()
        }
    }

    pub fn validate(&self, train: &Dataset) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if self.batch_size > train.len() {
            return Err(Error::invalid(format!(
                "batch size {} exceeds {} training bags",
                self.batch_size,
                train.len()
            )));
        }
        if self.eval_interval == 0 {
            return Err(Error::invalid("eval interval must be positive"));
        }
        if self.cap == Some(0) {
            return Err(Error::invalid("balance cap must be positive"));
        }
        self.model_config(train)?;
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            ..AdamConfig::default()
        }
    }

    /// The model these settings describe for `dataset`'s dimensions.
    pub fn model_config(&self, dataset: &Dataset) -> Result<ModelConfig> {
        let arch = ArchConfig {
            num_classes: dataset.num_classes(),
            visual_dim: dataset.visual_dim(),
            audio_dim: dataset.audio_dim(),
            visual_hidden: self.visual_hidden.clone(),
            audio_hidden: self.audio_hidden.clone(),
            dropout: self.dropout,
        };
        ModelConfig::new(self.model, self.mode, arch)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub val_f1: Option<f64>,
}

/// `step,loss,val_f1` with an empty last field when no validation ran.
pub fn trace_to_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from(TRACE_HEADER);
    for row in trace {
        out.push_str(&trace_line(row));
    }
    out
}

const TRACE_HEADER: &str = "step,loss,val_f1\n";

fn trace_line(row: &TraceRow) -> String {
    let f1 = row.val_f1.map(|f| f.to_string()).unwrap_or_default();
    format!("{},{},{}\n", row.step, row.loss, f1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: [u8; 32],
    stream: u64,
    word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        let pos = self
            .word_pos
            .parse()
            .map_err(|_| Error::invalid("bad rng position in checkpoint"))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainState {
    step: usize,
    adam: AdamConfig,
    adam_step: u64,
    rng: RngState,
    config: TrainConfig,
    best_val_f1: Option<f64>,
    val_thresholds: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BestRecord {
    pub step: usize,
    pub val_f1: f64,
}

const MOMENT_M: &str = "adam.m.";
const MOMENT_V: &str = "adam.v.";

/// Training state between steps.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub config: TrainConfig,
    pub model_config: ModelConfig,
    pub model: Model<T>,
    adam: AdamState<T>,
    rng: ChaCha8Rng,
    sampler: BalancedSampler,
    step: usize,
    best: Option<BestRecord>,
}

/// What a run leaves behind.
#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: Model<T>,
    pub trace: Vec<TraceRow>,
    pub final_checkpoint: Checkpoint,
    pub best: Option<BestRecord>,
    pub best_checkpoint: Option<Checkpoint>,
    /// Files written when an output directory was given.
    pub files: Vec<PathBuf>,
}

impl<T: Real> Trainer<T> {
    /// Fresh model initialised from `config.seed`.
    pub fn new(config: &TrainConfig, train: &Dataset) -> Result<Self> {
        config.validate(train)?;
        let model_config = config.model_config(train)?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Model::new(&model_config, &mut init_rng)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            adam: AdamState::new(&model, config.adam()),
            sampler: BalancedSampler::new(train, config.cap)?,
            config: config.clone(),
            model_config,
            model,
            rng,
            step: 0,
            best: None,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    /// `iterations` replaces the stored target; everything else is restored.
    pub fn resume(checkpoint: &Checkpoint, train: &Dataset, iterations: usize) -> Result<Self> {
        let raw = checkpoint
            .header
            .train_state
            .clone()
            .ok_or_else(|| Error::invalid("checkpoint has no training state"))?;
        let state: TrainState = serde_json::from_value(raw)?;
        let mut config = state.config.clone();
        config.iterations = iterations;
        config.validate(train)?;
        let model_config = config.model_config(train)?;
        if model_config != checkpoint.header.model {
            return Err(Error::invalid("checkpoint model does not match the training data"));
        }
        let model = checkpoint.to_model::<T>()?;
        let moments = |prefix: &str| -> Vec<NamedTensor<T>> {
            checkpoint
                .extra
                .iter()
                .filter_map(|t| {
                    t.name.strip_prefix(prefix).map(|name| NamedTensor {
                        name: name.to_string(),
                        shape: t.shape,
                        data: t.data.iter().map(|&v| T::of_f32(v)).collect(),
                    })
                })
                .collect()
        };
        let adam = AdamState::from_parts(
            &model,
            state.adam,
            state.adam_step,
            moments(MOMENT_M),
            moments(MOMENT_V),
        )?;
        Ok(Self {
            adam,
            sampler: BalancedSampler::new(train, config.cap)?,
            config,
            model_config,
            model,
            rng: state.rng.restore()?,
            step: state.step,
            best: state.best_val_f1.map(|val_f1| BestRecord { step: state.step, val_f1 }),
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn adam(&self) -> &AdamState<T> {
        &self.adam
    }

    /// One optimisation step on a freshly sampled batch; returns its loss.
    pub fn step(&mut self, train: &Dataset) -> Result<f64> {
        let batch = self.sampler.sample_batch(self.config.batch_size, &mut self.rng);
        self.step_on(train, &batch)
    }

    /// One optimisation step on the given bag indices.
    pub fn step_on(&mut self, train: &Dataset, batch: &[usize]) -> Result<f64> {
        let bags: Vec<_> = batch.iter().map(|&i| &train.bags()[i]).collect();
        let c = self.model.num_classes();
        let mut phi = ndarray::Array2::<T>::zeros((bags.len(), c));
        let mut caches = Vec::with_capacity(bags.len());
        for (row, bag) in bags.iter().enumerate() {
            let mut pass = Pass::Train(&mut self.rng);
            let (p, cache) = self.model.forward(bag, &mut pass)?;
            phi.row_mut(row).assign(&p);
            caches.push(cache);
        }
        let y = label_matrix::<T>(&bags);
        let (loss, d_phi) = self.model.loss_and_grad(phi.view(), y.view())?;
        let loss = loss.to_f64_lossy();
        self.step += 1;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                loss,
                batch: bags.iter().map(|b| b.id.clone()).collect(),
            });
        }
        let mut grads = GradStore::zeros_like(&self.model);
        for (row, cache) in caches.iter().enumerate() {
            grads.accumulate(&self.model.backward(cache, d_phi.row(row))?)?;
        }
        if !grads.all_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                loss,
                batch: bags.iter().map(|b| b.id.clone()).collect(),
            });
        }
        self.adam.step(&mut self.model, &grads)?;
        Ok(loss)
    }

    /// Validation micro-F1 with thresholds tuned on the validation set itself.
    pub fn validate(&self, val: &Dataset) -> Result<(f64, Vec<f64>)> {
        let scores = score_dataset(&self.model, val)?;
        let labels = label_matrix_i8(val);
        let thresholds = tune_thresholds(scores.view(), labels.view())?;
        let report = evaluate_scores(scores.view(), labels.view(), &thresholds, val.class_names())?;
        Ok((report.micro_f1, thresholds))
    }

    /// Full state: parameters, Adam moments, RNG position, config.
    pub fn checkpoint(&self, val_thresholds: Option<Vec<f64>>) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::from_model(&self.model_config, &self.model);
        let state = TrainState {
            step: self.step,
            adam: self.adam.config,
            adam_step: self.adam.step,
            rng: RngState::capture(&self.rng),
            config: self.config.clone(),
            best_val_f1: self.best.map(|b| b.val_f1),
            val_thresholds,
        };
        ckpt.header.train_state = Some(serde_json::to_value(state)?);
        for (prefix, moments) in [(MOMENT_M, &self.adam.m), (MOMENT_V, &self.adam.v)] {
            ckpt.extra.extend(moments.iter().map(|t| NamedTensor {
                name: format!("{prefix}{}", t.name),
                shape: t.shape,
                data: t.data.iter().map(|v| v.to_f32_lossy()).collect(),
            }));
        }
        Ok(ckpt)
    }

    /// Runs until `config.iterations` steps are done. With `val`, evaluates
    /// every `eval_interval` steps and at the last one, keeping the best
    /// checkpoint by validation micro-F1 (first wins on ties). With `out_dir`,
    /// writes `loss_trace.csv`, `final.ckpt` and `best.ckpt`.
    pub fn run(mut self, train: &Dataset, val: Option<&Dataset>, out_dir: Option<&Path>) -> Result<TrainOutcome<T>> {
        let mut trace = Vec::with_capacity(self.config.iterations.saturating_sub(self.step));
        let mut best_checkpoint = None;
        let mut files = Vec::new();
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let trace_path = out_dir.map(|d| d.join("loss_trace.csv"));
        let mut trace_file = match &trace_path {
            Some(p) => Some(std::io::BufWriter::new(
                fs::File::create(p).map_err(|e| Error::io(p, e))?,
            )),
            None => None,
        };
        if let (Some(f), Some(p)) = (trace_file.as_mut(), &trace_path) {
            f.write_all(TRACE_HEADER.as_bytes()).map_err(|e| Error::io(p, e))?;
        }
        while self.step < self.config.iterations {
            let loss = self.step(train)?;
            let mut row = TraceRow {
                step: self.step,
                loss,
                val_f1: None,
            };
            let due = self.step.is_multiple_of(self.config.eval_interval) || self.step == self.config.iterations;
            if let (Some(val), true) = (val, due) {
                let (f1, thresholds) = self.validate(val)?;
                row.val_f1 = Some(f1);
                if self.best.is_none_or(|b| f1 > b.val_f1) {
                    self.best = Some(BestRecord {
                        step: self.step,
                        val_f1: f1,
                    });
                    best_checkpoint = Some(self.checkpoint(Some(thresholds))?);
                }
            }
            if let (Some(f), Some(p)) = (trace_file.as_mut(), &trace_path) {
                f.write_all(trace_line(&row).as_bytes())
                    .map_err(|e| Error::io(p, e))?;
            }
            trace.push(row);
        }
        if let (Some(mut f), Some(p)) = (trace_file, trace_path) {
            f.flush().map_err(|e| Error::io(&p, e))?;
            files.push(p);
        }
        let final_checkpoint = self.checkpoint(None)?;
        if let Some(dir) = out_dir {
            let p = dir.join("final.ckpt");
            write_checkpoint(&final_checkpoint, &p)?;
            files.push(p);
            if let Some(best) = &best_checkpoint {
                let p = dir.join("best.ckpt");
                write_checkpoint(best, &p)?;
                files.push(p);
            }
        }
        Ok(TrainOutcome {
            model: self.model,
            trace,
            final_checkpoint,
            best: self.best,
            best_checkpoint,
            files,
        })
    }
}

/// Initialises from `config.seed` and trains. See [`Trainer::run`].
pub fn train<T: Real>(
    train: &Dataset,
    config: &TrainConfig,
    val: Option<&Dataset>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    Trainer::new(config, train)?.run(train, val, out_dir)
}
