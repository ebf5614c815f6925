//! Joint training of both networks, patch-wise inference and checkpoint
//! selection.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::corruption::{corrupt, lambda_at};
use crate::data::{assign_splits, crop_probmap, pad_reflect, padded_size, random_crop, stitch, window_patches, PatchProtocol, Sample, Split};
use crate::error::{Error, Result};
use crate::fusion::{fuse, FusionConfig};
use crate::io::{resolve, DatasetManifest};
use crate::losses::{unified_graded, HeadOutputs, LossBreakdown};
use crate::metrics::{betti_error, BettiConfig, IouCounts};
use crate::model::{load_checkpoint, save_checkpoint, CheckpointMeta, DtuNet, Mode};
use crate::nn::{Adam, Graph, Tensor};
use crate::types::{ClassKind, InputImage, ProbabilityMap, SegmentationMask};

pub const LOSS_CSV_HEADER: &str = "step,L_tex,L_BCE,L_tri,total";

/// Train / validation / test samples sharing one class layout.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub class_kinds: Vec<ClassKind>,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    /// How the validation set was chosen, for the run manifest.
    pub val_source: String,
}

impl Dataset {
    /// Groups manifest samples by their `split` tag (untagged counts as
    /// train). Without tagged `val` samples, `val_fraction` of the training
    /// samples are held out by a seeded shuffle.
    pub fn from_manifest(path: &Path, image_channels: usize, val_fraction: f64, seed: u64) -> Result<Self> {
        let manifest = DatasetManifest::load(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let loaded = manifest.load_samples(base)?;
        let mut train = Vec::new();
        let mut val = Vec::new();
        let mut test = Vec::new();
        for (entry, (img, mask)) in manifest.samples.iter().zip(loaded) {
            let sample = (img.with_channels(image_channels)?, mask);
            match entry.split.as_deref() {
                None | Some("train") => train.push(sample),
                Some("val") => val.push(sample),
                Some("test") => test.push(sample),
                Some(other) => {
                    return Err(Error::Config(format!(
                        "unknown split `{other}` for {}",
                        resolve(base, &entry.image).display()
                    )))
                }
            }
        }
        let val_source = if !val.is_empty() {
            "manifest".to_string()
        } else if val_fraction > 0.0 {
            let splits = assign_splits(train.len(), val_fraction, 0.0, seed)?;
            let (v, t): (Vec<_>, Vec<_>) = train.into_iter().zip(splits).partition(|(_, s)| *s == Split::Val);
            val = v.into_iter().map(|x| x.0).collect();
            train = t.into_iter().map(|x| x.0).collect();
            format!("held out {val_fraction} of train with seed {seed}")
        } else {
            "none".to_string()
        };
        if train.is_empty() {
            return Err(Error::Config(format!("{} lists no training samples", path.display())));
        }
        Ok(Self {
            class_kinds: manifest.class_kinds,
            train,
            val,
            test,
            val_source,
        })
    }
}

/// Network outputs for one image plus the fused decision.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub p_tex: ProbabilityMap,
    pub p_top: ProbabilityMap,
    pub fused: ProbabilityMap,
    pub mask: SegmentationMask,
}

fn forward_padded(model: &DtuNet, image: &InputImage) -> Result<(ProbabilityMap, ProbabilityMap)> {
    let (h, w) = (image.height(), image.width());
    let (ph, pw) = padded_size(h, w, model.stride());
    let (padded, _) = pad_reflect(image, None, ph, pw)?;
    let out = model.dtu_forward(&padded, None, None, Mode::Inference)?;
    Ok((crop_probmap(&out.p_tex, h, w)?, crop_probmap(&out.p_top, h, w)?))
}

/// Both heads on a whole image. Images wider or taller than the test window
/// are processed as overlapping windows and stitched.
pub fn predict_heads(model: &DtuNet, image: &InputImage, protocol: &PatchProtocol) -> Result<(ProbabilityMap, ProbabilityMap)> {
    let image = image.with_channels(model.image_channels())?;
    let (h, w) = (image.height(), image.width());
    let win = protocol.test_window;
    if h <= win && w <= win {
        return forward_padded(model, &image);
    }
    let (padded, _) = pad_reflect(&image, None, win, win)?;
    let patches = window_patches(&padded, win, protocol.test_stride)?;
    let outputs: Vec<_> = patches
        .par_iter()
        .map(|(pos, patch)| forward_padded(model, patch).map(|o| (*pos, o)))
        .collect::<Result<_>>()?;
    let (tex, top): (Vec<_>, Vec<_>) = outputs.into_iter().map(|(pos, (a, b))| ((pos, a), (pos, b))).unzip();
    let (ph, pw) = (padded.height(), padded.width());
    let p_tex = crop_probmap(&stitch(&tex, ph, pw)?, h, w)?;
    let p_top = crop_probmap(&stitch(&top, ph, pw)?, h, w)?;
    Ok((p_tex, p_top))
}

pub fn predict(model: &DtuNet, image: &InputImage, protocol: &PatchProtocol, fusion: &FusionConfig) -> Result<Prediction> {
    let (p_tex, p_top) = predict_heads(model, image, protocol)?;
    let fused = fuse(&p_tex, &p_top, fusion)?;
    let mask = fused.argmax(model.class_kinds().to_vec())?;
    Ok(Prediction { p_tex, p_top, fused, mask })
}

/// Mean Betti error and mean per-class IoU (as a fraction) of the fused
/// predictions, and their checkpoint-selection score `betti + 1 - mIoU`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ValidationScore {
    pub betti: f64,
    pub miou: f64,
    pub score: f64,
}

pub fn validation_score(
    model: &DtuNet,
    samples: &[Sample],
    protocol: &PatchProtocol,
    fusion: &FusionConfig,
    betti: &BettiConfig,
) -> Result<ValidationScore> {
    if samples.is_empty() {
        return Err(Error::InvalidValue("no validation samples".into()));
    }
    let per_image: Vec<(f64, IouCounts)> = samples
        .par_iter()
        .map(|(img, gt)| {
            let pred = predict(model, img, protocol, fusion)?;
            Ok((betti_error(&pred.mask, gt, betti)?, IouCounts::from_masks(&pred.mask, gt)?))
        })
        .collect::<Result<_>>()?;
    let mut counts = IouCounts::new(model.num_classes());
    let mut b = 0.0;
    for (e, c) in &per_image {
        b += e;
        counts.merge(c);
    }
    let b = b / samples.len() as f64;
    // classes absent from both prediction and truth count as perfect
    let miou = counts.summarize(model.class_kinds()).miou.unwrap_or(1.0);
    Ok(ValidationScore { betti: b, miou, score: b + 1.0 - miou })
}

/// Loss terms and parameter gradients for one sample.
pub fn sample_gradients(
    model: &DtuNet,
    image: &InputImage,
    gt: &SegmentationMask,
    corrupted: &SegmentationMask,
    cfg: &crate::losses::LossConfig,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let mut g = Graph::new();
    let bound = model.params().bind(&mut g);
    let with_triplet = cfg.triplet_weight > 0.0;
    let targets = with_triplet.then_some((gt, corrupted));
    let out = model.forward_vars(&mut g, &bound, image, targets)?;
    let anchor = g.value(out.anchor).data();
    let heads = HeadOutputs {
        p_tex: g.value(out.p_tex).data(),
        p_top: g.value(out.p_top).data(),
        anchor,
        pos: out.pos.map_or(anchor, |v| g.value(v).data()),
        neg: out.neg.map_or(anchor, |v| g.value(v).data()),
        tex_channels: g.value(out.p_tex).shape()[0],
        emb_channels: g.value(out.anchor).shape()[0],
    };
    let grads = unified_graded(heads, gt.labels(), cfg);
    let seed = |v: crate::nn::Var, d: Vec<f64>| (v, Tensor::new(g.value(v).shape().to_vec(), d));
    let mut seeds = vec![seed(out.p_tex, grads.p_tex), seed(out.p_top, grads.p_top)];
    if let (true, Some(pos), Some(neg)) = (with_triplet, out.pos, out.neg) {
        seeds.push(seed(out.anchor, grads.anchor));
        seeds.push(seed(pos, grads.pos));
        seeds.push(seed(neg, grads.neg));
    }
    let mut back = g.backward(seeds);
    Ok((grads.breakdown, bound.collect(model.params(), &mut back)))
}

/// One loss CSV row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lambda: f64,
    pub loss: LossBreakdown,
}

impl StepRecord {
    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        format!("{},{},{},{},{}", self.step, l.tex, l.bce, l.tri, l.total)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lambda: f64,
    pub mean_total: f64,
    pub validation: Option<ValidationScore>,
    pub best: bool,
}

/// Per-(epoch, slot) generator so a run resumed at an epoch boundary draws
/// exactly what the uninterrupted run would have.
fn slot_rng(seed: u64, epoch: usize, slot: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | slot);
    rng
}

const SHUFFLE_SLOT: u64 = u32::MAX as u64;

/// Crop (or pad) a training sample to a network-compatible size.
pub fn training_view<R: rand::Rng + ?Sized>(
    image: &InputImage,
    mask: &SegmentationMask,
    crop: usize,
    stride: usize,
    rng: &mut R,
) -> Result<Sample> {
    let (h, w) = (image.height(), image.width());
    if h <= crop && w <= crop {
        let (ph, pw) = padded_size(h, w, stride);
        let (img, m) = pad_reflect(image, Some(mask), ph, pw)?;
        return Ok((img, m.expect("mask was supplied")));
    }
    random_crop(image, mask, crop, rng)
}

/// Training state: network, optimizer and position in the schedule.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: RunConfig,
    pub model: DtuNet,
    pub adam: Adam,
    /// Next epoch to run.
    pub epoch: usize,
    pub step: u64,
    pub best_score: Option<f64>,
}

impl Trainer {
    pub fn new(config: RunConfig, class_kinds: Vec<ClassKind>) -> Result<Self> {
        config.validate()?;
        let model = DtuNet::new(config.model, config.data.image_channels, class_kinds)?;
        let adam = Adam::new(config.optimizer.adam(), model.params());
        Ok(Self {
            config,
            model,
            adam,
            epoch: 0,
            step: 0,
            best_score: None,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::save`]. Model and
    /// optimizer settings come from the checkpoint; the schedule, data and
    /// output settings from `config`.
    pub fn resume(mut config: RunConfig, path: &Path) -> Result<Self> {
        let ckpt = load_checkpoint(path)?;
        config.model = *ckpt.model.config();
        config.validate()?;
        if ckpt.model.image_channels() != config.data.image_channels {
            return Err(Error::Checkpoint(format!(
                "checkpoint expects {} image channels, config has {}",
                ckpt.model.image_channels(),
                config.data.image_channels
            )));
        }
        let adam = ckpt
            .adam
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no optimizer state".into()))?;
        let best_score = ckpt.meta.extra.get("best_score").and_then(|v| v.as_f64());
        Ok(Self {
            config,
            model: ckpt.model,
            adam,
            epoch: ckpt.meta.epoch + 1,
            step: ckpt.meta.step,
            best_score,
        })
    }

    pub fn lambda(&self, epoch: usize) -> Result<f64> {
        lambda_at(epoch, self.config.optimizer.epochs, &self.config.corruption)
    }

    /// One optimizer update on a prepared batch; gradients are averaged over
    /// the batch and the reported loss is the batch mean.
    pub fn train_step(&mut self, batch: &[(InputImage, SegmentationMask, SegmentationMask)]) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::InvalidValue("empty batch".into()));
        }
        let cfg = self.config.loss;
        let model = &self.model;
        let results: Vec<(LossBreakdown, Vec<Tensor>)> = batch
            .par_iter()
            .map(|(img, gt, cor)| sample_gradients(model, img, gt, cor, &cfg))
            .collect::<Result<_>>()?;
        let n = batch.len() as f64;
        let mut mean = LossBreakdown { tex: 0.0, bce: 0.0, tri: 0.0, total: 0.0 };
        let mut grads = self.model.params().zeros_like();
        // fixed summation order keeps the update bitwise reproducible
        for (l, g) in &results {
            mean.tex += l.tex / n;
            mean.bce += l.bce / n;
            mean.tri += l.tri / n;
            mean.total += l.total / n;
            for (acc, t) in grads.iter_mut().zip(g) {
                acc.add_assign(t);
            }
        }
        self.step += 1;
        let finite_grads = grads.iter().all(|t| t.data().iter().all(|v| v.is_finite()));
        if !mean.is_finite() || !finite_grads {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                detail: format!("L_tex={} L_BCE={} L_tri={} finite_grads={finite_grads}", mean.tex, mean.bce, mean.tri),
            });
        }
        for t in &mut grads {
            t.scale(1.0 / n);
        }
        self.adam.update(self.model.params_mut(), &grads);
        Ok(mean)
    }

    /// Draws crops and corrupted masks for the samples at `order`, whose
    /// first element sits at `first_slot` within the epoch.
    fn prepare(&self, samples: &[Sample], order: &[usize], first_slot: usize, lambda: f64) -> Result<Vec<(InputImage, SegmentationMask, SegmentationMask)>> {
        let cfg = &self.config;
        let corruption_seed = cfg.seed ^ cfg.corruption.rng_seed.rotate_left(32);
        order
            .iter()
            .enumerate()
            .map(|(k, &i)| {
                let slot = (first_slot + k) as u64;
                let mut rng = slot_rng(cfg.seed, self.epoch, slot);
                let (img, gt) = training_view(&samples[i].0, &samples[i].1, cfg.patches.train_crop, self.model.stride(), &mut rng)?;
                let corrupted = if gt.foreground_count() == 0 {
                    gt.clone()
                } else {
                    let mut crng = slot_rng(corruption_seed, self.epoch, slot);
                    corrupt(&gt, &img, lambda, &cfg.corruption, &mut crng)?
                };
                Ok((img, gt, corrupted))
            })
            .collect()
    }

    /// Runs the current epoch, reporting each step to `on_step`.
    pub fn run_epoch(&mut self, samples: &[Sample], on_step: &mut dyn FnMut(&StepRecord) -> Result<()>) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::InvalidValue("no training samples".into()));
        }
        let lambda = self.lambda(self.epoch)?;
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut slot_rng(self.config.seed, self.epoch, SHUFFLE_SLOT));
        let mut total = 0.0;
        let batch_size = self.config.optimizer.batch_size;
        for (b, chunk) in order.chunks(batch_size).enumerate() {
            let batch = self.prepare(samples, chunk, b * batch_size, lambda)?;
            let loss = self.train_step(&batch)?;
            total += loss.total;
            on_step(&StepRecord { step: self.step, epoch: self.epoch, lambda, loss })?;
        }
        self.epoch += 1;
        Ok(total / order.len().div_ceil(batch_size) as f64)
    }

    pub fn save(&self, path: &Path, lambda: f64) -> Result<()> {
        let meta = CheckpointMeta {
            epoch: self.epoch.saturating_sub(1),
            lambda,
            step: self.step,
            extra: serde_json::json!({ "best_score": self.best_score, "seed": self.config.seed }),
        };
        save_checkpoint(path, &self.model, &meta, Some(&self.adam))
    }

    /// Trains to `config.optimizer.epochs`, writing `loss.csv`,
    /// `epochs.jsonl`, `last.ckpt` and `best.ckpt` under the output
    /// directory.
    pub fn fit(&mut self, data: &Dataset) -> Result<FitSummary> {
        let out = self.config.output_dir.clone();
        fs::create_dir_all(&out)?;
        let csv_path = out.join("loss.csv");
        let fresh = self.epoch == 0 || !csv_path.exists();
        let mut csv = BufWriter::new(if fresh {
            File::create(&csv_path)?
        } else {
            OpenOptions::new().append(true).open(&csv_path)?
        });
        if fresh {
            writeln!(csv, "{LOSS_CSV_HEADER}")?;
        }
        let mut epochs_log = OpenOptions::new()
            .create(true)
            .append(!fresh)
            .write(true)
            .truncate(fresh)
            .open(out.join("epochs.jsonl"))?;
        let mut history = Vec::new();
        let total_epochs = self.config.optimizer.epochs;
        while self.epoch < total_epochs {
            let epoch = self.epoch;
            let lambda = self.lambda(epoch)?;
            let mean_total = self.run_epoch(&data.train, &mut |r| {
                writeln!(csv, "{}", r.csv_row())?;
                Ok(())
            })?;
            csv.flush()?;
            let last = epoch + 1 == total_epochs;
            let validate = !data.val.is_empty() && ((epoch + 1) % self.config.data.val_every == 0 || last);
            let validation = if validate {
                Some(validation_score(&self.model, &data.val, &self.config.patches, &self.config.fusion, &self.config.betti)?)
            } else {
                None
            };
            // without validation data the latest weights count as best
            let best = match (validation, data.val.is_empty()) {
                (Some(v), _) => self.best_score.is_none_or(|b| v.score < b),
                (None, true) => true,
                (None, false) => false,
            };
            if best {
                self.best_score = validation.map(|v| v.score);
                self.save(&out.join("best.ckpt"), lambda)?;
            }
            self.save(&out.join("last.ckpt"), lambda)?;
            let record = EpochRecord { epoch, lambda, mean_total, validation, best };
            writeln!(epochs_log, "{}", serde_json::to_string(&record)?)?;
            history.push(record);
        }
        Ok(FitSummary {
            best_checkpoint: out.join("best.ckpt"),
            last_checkpoint: out.join("last.ckpt"),
            loss_csv: csv_path,
            epochs: history,
        })
    }
}

#[derive(Debug, Clone)]
pub struct FitSummary {
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub epochs: Vec<EpochRecord>,
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest<'a> {
    pub command: &'a str,
    pub code_version: &'a str,
    pub seed: u64,
    pub config: &'a RunConfig,
    #[serde(skip_serializing_if = "serde_json::Value::is_null")]
    pub details: serde_json::Value,
}

pub fn write_run_manifest(dir: &Path, command: &str, config: &RunConfig, details: serde_json::Value) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let manifest = RunManifest {
        command,
        code_version: env!("CARGO_PKG_VERSION"),
        seed: config.seed,
        config,
        details,
    };
    let path = dir.join("run_manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    config.save(&dir.join("config.toml"))?;
    Ok(path)
}
