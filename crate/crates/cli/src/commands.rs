use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use avmil::data::{load_dataset, Dataset, Modality, Split};
use avmil::eval::tune_and_evaluate;
use avmil::localize::{self as loc, heatmap_rows, hit_at_k, HeatmapLayout, HitCount, HEATMAP_HEADER};
use avmil::model::{read_checkpoint, Checkpoint, Model};
use avmil::synth::{generate, write_synth, SynthConfig};
use avmil::train::{TrainConfig, Trainer};
use serde::Serialize;

use crate::config::{merge, new_run_dir, out_root, write_json};
use crate::{EvalSettings, GenSettings, LocalizeSettings, TrainSettings};

/// What each run directory records about its inputs.
#[derive(Serialize)]
struct RunConfig<'a, S, R> {
    command: &'static str,
    settings: &'a S,
    resolved: R,
}

fn manifest(data: &Path, split: Split) -> PathBuf {
    data.join(format!("{}.jsonl", split.name()))
}

fn load_split(data: &Path, split: Split) -> Result<Dataset> {
    let path = manifest(data, split);
    if !path.is_file() {
        bail!("dataset split {} not found: {}", split.name(), path.display());
    }
    load_dataset(&path).with_context(|| format!("loading {}", path.display()))
}

fn require<'a, T>(value: &'a Option<T>, flag: &str) -> Result<&'a T> {
    value.as_ref().ok_or_else(|| anyhow!("{flag} is required"))
}

/// A checkpoint file, or the best (else final) checkpoint of a run directory.
fn load_checkpoint(path: &Path) -> Result<(PathBuf, Checkpoint)> {
    let file = if path.is_dir() {
        ["best.ckpt", "final.ckpt"]
            .iter()
            .map(|name| path.join(name))
            .find(|p| p.is_file())
            .ok_or_else(|| anyhow!("no checkpoint in {}", path.display()))?
    } else {
        path.to_path_buf()
    };
    let ckpt = read_checkpoint(&file).with_context(|| format!("reading checkpoint {}", file.display()))?;
    Ok((file, ckpt))
}

fn model_for(ckpt: &Checkpoint, data: &Dataset) -> Result<Model<f32>> {
    let arch = &ckpt.header.model.arch;
    if arch.num_classes != data.num_classes() {
        bail!(
            "checkpoint has {} classes but the {} split has {}",
            arch.num_classes,
            data.split().name(),
            data.num_classes()
        );
    }
    if arch.visual_dim != data.visual_dim() || arch.audio_dim != data.audio_dim() {
        bail!(
            "checkpoint expects feature dims {}/{} but the data has {}/{}",
            arch.visual_dim,
            arch.audio_dim,
            data.visual_dim(),
            data.audio_dim()
        );
    }
    Ok(ckpt.to_model::<f32>()?)
}

fn class_histogram(data: &Dataset) -> String {
    data.class_names()
        .iter()
        .zip(data.class_counts())
        .map(|(n, c)| format!("{n}={c}"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn gen(file: Option<&Path>, flags: &GenSettings) -> Result<()> {
    let s = merge(file, flags)?;
    let d = SynthConfig::default();
    let config = SynthConfig {
        num_classes: s.classes.unwrap_or(d.num_classes),
        train_bags: s.train_bags.unwrap_or(d.train_bags),
        val_bags: s.val_bags.unwrap_or(d.val_bags),
        test_bags: s.test_bags.unwrap_or(d.test_bags),
        visual_proposals: s.proposals.unwrap_or(d.visual_proposals),
        audio_segments: s.segments.unwrap_or(d.audio_segments),
        visual_dim: s.visual_dim.unwrap_or(d.visual_dim),
        audio_dim: s.audio_dim.unwrap_or(d.audio_dim),
        signal_scale: s.signal.unwrap_or(d.signal_scale),
        background_sigma: s.noise.unwrap_or(d.background_sigma),
        planted_visual: s.planted_visual.unwrap_or(d.planted_visual),
        planted_audio: s.planted_audio.unwrap_or(d.planted_audio),
        multi_label_prob: s.multi_label.unwrap_or(d.multi_label_prob),
        seed: s.seed.unwrap_or(d.seed),
    };
    let out = s.out.clone().unwrap_or_else(|| out_root(None).join("data"));
    if manifest(&out, Split::Train).exists() {
        bail!("{} already holds a dataset; choose another --out", out.display());
    }
    let data = generate(&config)?;
    write_synth(&data, &out)?;
    println!("wrote {}", out.display());
    for split in Split::ALL {
        let ds = data.split(split);
        println!("{:<5} {:>5} bags  {}", split.name(), ds.len(), class_histogram(ds));
    }
    Ok(())
}

fn train_config(s: &TrainSettings, train: &Dataset) -> Result<TrainConfig> {
    let base = match s.preset.as_deref().unwrap_or("desk") {
        "desk" => TrainConfig::desk(),
        "full" => TrainConfig::default(),
        other => bail!("unknown preset {other:?}"),
    };
    let config = TrainConfig {
        iterations: s.iters.unwrap_or(base.iterations),
        learning_rate: s.lr.unwrap_or(base.learning_rate),
        batch_size: s.batch.unwrap_or(base.batch_size),
        seed: s.seed.unwrap_or(base.seed),
        dropout: s.dropout.unwrap_or(base.dropout),
        cap: s.cap.or(base.cap),
        eval_interval: s.eval_interval.unwrap_or(base.eval_interval),
        mode: s.mode.as_deref().map_or(Ok(base.mode), str::parse)?,
        model: s.model.as_deref().map_or(Ok(base.model), str::parse)?,
        visual_hidden: s.visual_hidden.clone().unwrap_or(base.visual_hidden),
        audio_hidden: s.audio_hidden.clone().unwrap_or(base.audio_hidden),
    };
    config.validate(train)?;
    Ok(config)
}

pub fn train(file: Option<&Path>, flags: &TrainSettings) -> Result<()> {
    let s = merge(file, flags)?;
    let data = require(&s.data, "--data")?;
    let train_set = load_split(data, Split::Train)?;
    let val = manifest(data, Split::Val)
        .is_file()
        .then(|| load_split(data, Split::Val))
        .transpose()?;

    let trainer = match &s.checkpoint {
        Some(path) => {
            let fixed = [
                ("--preset", s.preset.is_some()),
                ("--model", s.model.is_some()),
                ("--mode", s.mode.is_some()),
                ("--lr", s.lr.is_some()),
                ("--batch", s.batch.is_some()),
                ("--seed", s.seed.is_some()),
                ("--dropout", s.dropout.is_some()),
                ("--cap", s.cap.is_some()),
                ("--eval-interval", s.eval_interval.is_some()),
                ("--visual-hidden", s.visual_hidden.is_some()),
                ("--audio-hidden", s.audio_hidden.is_some()),
            ];
            if let Some((flag, _)) = fixed.iter().find(|(_, set)| *set) {
                bail!("{flag} cannot change when resuming; the checkpoint fixes it");
            }
            let iters = *require(&s.iters, "--iters")?;
            let (_, ckpt) = load_checkpoint(path)?;
            Trainer::<f32>::resume(&ckpt, &train_set, iters)?
        }
        None => Trainer::<f32>::new(&train_config(&s, &train_set)?, &train_set)?,
    };

    let dir = new_run_dir(&out_root(s.out.as_deref()), "train")?;
    write_json(
        &dir.join("config.json"),
        &RunConfig {
            command: "train",
            settings: &s,
            resolved: &trainer.config,
        },
    )?;
    let start = trainer.step_count();
    let outcome = trainer.run(&train_set, val.as_ref(), Some(&dir))?;
    let last = outcome.trace.last();
    #[derive(Serialize)]
    struct Summary {
        steps: usize,
        final_loss: Option<f64>,
        best_step: Option<usize>,
        best_val_f1: Option<f64>,
    }
    let summary = Summary {
        steps: last.map_or(start, |r| r.step),
        final_loss: last.map(|r| r.loss),
        best_step: outcome.best.map(|b| b.step),
        best_val_f1: outcome.best.map(|b| b.val_f1),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    println!("wrote {}", dir.display());
    print!("steps {start}..{}", summary.steps);
    if let Some(loss) = summary.final_loss {
        print!("  final loss {loss:.4}");
    }
    if let (Some(step), Some(f1)) = (summary.best_step, summary.best_val_f1) {
        print!("  best val micro-F1 {:.1} at step {step}", 100.0 * f1);
    }
    println!();
    Ok(())
}

pub fn eval(file: Option<&Path>, flags: &EvalSettings) -> Result<()> {
    let s = merge(file, flags)?;
    let data = require(&s.data, "--data")?;
    let (ckpt_path, ckpt) = load_checkpoint(require(&s.checkpoint, "--checkpoint")?)?;
    let val = load_split(data, Split::Val)?;
    let test = load_split(data, Split::Test)?;
    let model = model_for(&ckpt, &val)?;
    model_for(&ckpt, &test)?;
    let report = tune_and_evaluate(&model, &val, &test)?;

    let dir = new_run_dir(&out_root(s.out.as_deref()), "eval")?;
    #[derive(Serialize)]
    struct Resolved<'a> {
        checkpoint: &'a Path,
        model: &'a avmil::model::ModelConfig,
    }
    write_json(
        &dir.join("config.json"),
        &RunConfig {
            command: "eval",
            settings: &s,
            resolved: Resolved {
                checkpoint: &ckpt_path,
                model: &ckpt.header.model,
            },
        },
    )?;
    write_json(&dir.join("report.json"), &report)?;
    let table = report.to_table();
    fs::write(dir.join("report.txt"), &table).with_context(|| format!("writing {}", dir.display()))?;
    println!("wrote {}", dir.display());
    print!("{table}");
    Ok(())
}

/// File-name-safe form of a class name.
fn slug(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

#[derive(Debug, Serialize)]
struct HitRow {
    k: usize,
    visual: HitCount,
    audio: HitCount,
}

fn hit_table(rows: &[HitRow]) -> String {
    let cell = |h: &HitCount| {
        if h.total == 0 {
            "-".to_string()
        } else {
            format!("{:.3} ({}/{})", h.rate(), h.hits, h.total)
        }
    };
    let mut out = format!("{:<6}  {:<18}  audio\n", "k", "visual");
    for r in rows {
        let _ = writeln!(out, "{:<6}  {:<18}  {}", format!("hit@{}", r.k), cell(&r.visual), cell(&r.audio));
    }
    out
}

fn heatmap_layout(s: &LocalizeSettings) -> HeatmapLayout {
    let d = HeatmapLayout::default();
    HeatmapLayout {
        proposals_per_frame: s.proposals_per_frame.unwrap_or(d.proposals_per_frame),
        segment_stride_s: s.segment_stride.unwrap_or(d.segment_stride_s),
    }
}

pub fn localize(file: Option<&Path>, flags: &LocalizeSettings) -> Result<()> {
    let s = merge(file, flags)?;
    let data = require(&s.data, "--data")?;
    let split = match s.split.as_deref().unwrap_or("test") {
        "train" => Split::Train,
        "val" => Split::Val,
        "test" => Split::Test,
        other => bail!("unknown split {other:?}"),
    };
    let dataset = load_split(data, split)?;
    let (ckpt_path, ckpt) = load_checkpoint(require(&s.checkpoint, "--checkpoint")?)?;
    let model = model_for(&ckpt, &dataset)?;
    let classes: Vec<usize> = match &s.class_name {
        Some(name) => vec![dataset.class_index(name).ok_or_else(|| {
            anyhow!(
                "unknown class {name:?}; the manifest lists {}",
                dataset.class_names().join(", ")
            )
        })?],
        None => (0..dataset.num_classes()).collect(),
    };
    let topk = s.topk.unwrap_or(3);
    let ks: Vec<usize> = if topk == 1 { vec![1] } else { vec![1, topk] };
    let layout = heatmap_layout(&s);

    let dir = new_run_dir(&out_root(s.out.as_deref()), "localize")?;
    #[derive(Serialize)]
    struct Resolved<'a> {
        checkpoint: &'a Path,
        split: &'static str,
        classes: Vec<&'a str>,
        hit_k: &'a [usize],
        layout: HeatmapLayout,
    }
    write_json(
        &dir.join("config.json"),
        &RunConfig {
            command: "localize",
            settings: &s,
            resolved: Resolved {
                checkpoint: &ckpt_path,
                split: split.name(),
                classes: classes.iter().map(|&c| dataset.class_names()[c].as_str()).collect(),
                hit_k: &ks,
                layout,
            },
        },
    )?;
    let heat_dir = dir.join("heatmaps");
    fs::create_dir_all(&heat_dir).with_context(|| format!("creating {}", heat_dir.display()))?;

    let mut hits: BTreeMap<usize, HitRow> = ks
        .iter()
        .map(|&k| {
            (
                k,
                HitRow {
                    k,
                    visual: HitCount::default(),
                    audio: HitCount::default(),
                },
            )
        })
        .collect();
    let mut any_truth = false;
    let mut files = 0usize;
    for bag in dataset.bags() {
        any_truth |= bag.ground_truth.is_some();
        for &c in &classes {
            let name = &dataset.class_names()[c];
            let result = loc::localize(&model, bag, c)?;
            let mut csv = String::from(HEATMAP_HEADER);
            csv.push_str(&heatmap_rows(&result, name, layout));
            let path = heat_dir.join(format!("{}.{}.csv", slug(&bag.id), slug(name)));
            fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
            files += 1;
            if let (Some(gt), true) = (bag.ground_truth.as_ref(), bag.labels.is_positive(c)) {
                for row in hits.values_mut() {
                    let h = hit_at_k(&result, Some(gt), row.k)?;
                    for (m, count) in [(Modality::Visual, &mut row.visual), (Modality::Audio, &mut row.audio)] {
                        let hit = match m {
                            Modality::Visual => h.visual,
                            Modality::Audio => h.audio,
                        };
                        if let Some(hit) = hit {
                            count.total += 1;
                            count.hits += hit as usize;
                        }
                    }
                }
            }
        }
    }
    println!("wrote {} ({files} heatmaps)", dir.display());
    if any_truth {
        let rows: Vec<HitRow> = hits.into_values().collect();
        write_json(&dir.join("hits.json"), &rows)?;
        let table = hit_table(&rows);
        fs::write(dir.join("hits.txt"), &table).with_context(|| format!("writing {}", dir.display()))?;
        print!("{table}");
    } else {
        println!("no ground truth in the {} split; hit table skipped", split.name());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use avmil::model::ArchConfig;

    #[test]
    fn slug_keeps_safe_characters() {
        assert_eq!(slug("train-00001"), "train-00001");
        assert_eq!(slug("a/b c"), "a_b_c");
    }

    #[test]
    fn hit_table_marks_unused_modalities() {
        let rows = [HitRow {
            k: 1,
            visual: HitCount { hits: 3, total: 4 },
            audio: HitCount::default(),
        }];
        let table = hit_table(&rows);
        assert!(table.contains("0.750 (3/4)"), "{table}");
        assert!(table.lines().nth(1).unwrap().ends_with('-'));
    }

    #[test]
    fn presets_resolve() {
        let data = generate(&SynthConfig {
            train_bags: 30,
            ..SynthConfig::default()
        })
        .unwrap();
        let s = TrainSettings {
            iters: Some(10),
            ..TrainSettings::default()
        };
        let c = train_config(&s, &data.train).unwrap();
        assert_eq!((c.iterations, c.learning_rate), (10, TrainConfig::desk().learning_rate));
        assert_eq!(c.visual_hidden, ArchConfig::desk(1, 1, 1).visual_hidden);
        let full = TrainSettings {
            preset: Some("full".into()),
            ..TrainSettings::default()
        };
        assert_eq!(train_config(&full, &data.train).unwrap().iterations, 25_000);
        let bad = TrainSettings {
            model: Some("wsddn_type".into()),
            ..TrainSettings::default()
        };
        assert!(train_config(&bad, &data.train).is_err());
    }
}
