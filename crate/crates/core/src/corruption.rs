//! Online generation of topology-corrupted masks.
//!
//! Two generators break a ground-truth mask in complementary ways:
//! [`false_splits`] blanks whole foreground patches, opening gaps in curves,
//! and [`missed_splits`] paints background pixels whose intensity resembles
//! the foreground, creating spurious bridges and speckle. [`corrupt`] chains
//! them with a single corruption degree.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{InputImage, SegmentationMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionOrder {
    #[default]
    MissedThenFalse,
    FalseThenMissed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionConfig {
    pub lambda_start: f64,
    pub lambda_end: f64,
    pub patch_size: usize,
    pub rng_seed: u64,
    pub order: CorruptionOrder,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self {
            lambda_start: 0.5,
            lambda_end: 0.1,
            patch_size: 16,
            rng_seed: 0,
            order: CorruptionOrder::MissedThenFalse,
        }
    }
}

impl CorruptionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.lambda_end && self.lambda_end <= self.lambda_start && self.lambda_start <= 1.0) {
            return Err(Error::Config(format!(
                "need 0 <= lambda_end ({}) <= lambda_start ({}) <= 1",
                self.lambda_end, self.lambda_start
            )));
        }
        if self.patch_size < 2 {
            return Err(Error::Config(format!("patch_size {} < 2", self.patch_size)));
        }
        Ok(())
    }

    /// Also checks the patch fits inside an image of the given size.
    pub fn validate_for(&self, height: usize, width: usize) -> Result<()> {
        self.validate()?;
        if self.patch_size > height.min(width) {
            return Err(Error::Config(format!(
                "patch_size {} exceeds image side {}",
                self.patch_size,
                height.min(width)
            )));
        }
        Ok(())
    }
}

fn check_lambda(lam: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lam) {
        return Err(Error::InvalidValue(format!("lambda {lam} outside [0, 1]")));
    }
    Ok(())
}

/// `ceil(lam * n)`, immune to representation error such as `0.3 * 10`.
pub fn selection_count(lam: f64, n: usize) -> usize {
    let exact = lam * n as f64;
    let rounded = exact.round();
    let k = if (exact - rounded).abs() < 1e-9 { rounded } else { exact.ceil() };
    (k as usize).min(n)
}

/// Top-left corners of the non-overlapping `patch x patch` tiling; edge tiles
/// may be smaller.
fn tiles(height: usize, width: usize, patch: usize) -> impl Iterator<Item = (usize, usize, usize, usize)> {
    (0..height).step_by(patch).flat_map(move |r| {
        (0..width)
            .step_by(patch)
            .map(move |c| (r, c, patch.min(height - r), patch.min(width - c)))
    })
}

/// Sets a random `ceil(lam * n)` of the `n` foreground-bearing patches to
/// background.
pub fn false_splits<R: Rng + ?Sized>(
    mask: &SegmentationMask,
    lam: f64,
    patch_size: usize,
    rng: &mut R,
) -> Result<SegmentationMask> {
    check_lambda(lam)?;
    if patch_size == 0 {
        return Err(Error::InvalidValue("patch size must be positive".into()));
    }
    let (h, w) = (mask.height(), mask.width());
    let labels = mask.labels();
    let occupied: Vec<_> = tiles(h, w, patch_size)
        .filter(|&(r, c, ph, pw)| (r..r + ph).any(|rr| labels[rr * w + c..rr * w + c + pw].iter().any(|&l| l > 0)))
        .collect();
    let k = selection_count(lam, occupied.len());
    let mut out = labels.to_vec();
    if k > 0 {
        let mut chosen = index::sample(rng, occupied.len(), k).into_vec();
        chosen.sort_unstable();
        for i in chosen {
            let (r, c, ph, pw) = occupied[i];
            for rr in r..r + ph {
                out[rr * w + c..rr * w + c + pw].fill(0);
            }
        }
    }
    mask.with_labels(out)
}

/// Foreground pixel most similar to a candidate: smallest intensity
/// difference, then smallest squared distance, then row-major order.
struct ForegroundIndex {
    /// `(intensity, pixel index)` sorted by intensity, then index.
    sorted: Vec<(f64, usize)>,
    width: usize,
}

impl ForegroundIndex {
    fn new(mask: &SegmentationMask, image: &InputImage) -> Self {
        let w = mask.width();
        let mut sorted: Vec<(f64, usize)> = mask
            .labels()
            .iter()
            .enumerate()
            .filter(|(_, &l)| l > 0)
            .map(|(i, _)| (image.intensity(i / w, i % w), i))
            .collect();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        Self { sorted, width: w }
    }

    fn nearest(&self, value: f64, pixel: usize) -> usize {
        let pos = self.sorted.partition_point(|&(v, _)| v < value);
        let below = pos.checked_sub(1).map(|i| value - self.sorted[i].0);
        let above = self.sorted.get(pos).map(|e| e.0 - value);
        let best_diff = match (below, above) {
            (Some(b), Some(a)) => a.min(b),
            (Some(b), None) => b,
            (None, Some(a)) => a,
            (None, None) => unreachable!("foreground is non-empty"),
        };
        let (pr, pc) = ((pixel / self.width) as i64, (pixel % self.width) as i64);
        let dist2 = |i: usize| {
            let (r, c) = ((i / self.width) as i64, (i % self.width) as i64);
            (r - pr).pow(2) + (c - pc).pow(2)
        };
        let mut best: Option<(i64, usize)> = None;
        let mut consider = |i: usize| {
            let key = (dist2(i), i);
            if best.is_none_or(|b| key < b) {
                best = Some(key);
            }
        };
        // equal-difference runs on both sides of the insertion point
        if below == Some(best_diff) {
            let v = self.sorted[pos - 1].0;
            for &(sv, i) in self.sorted[..pos].iter().rev() {
                if sv != v {
                    break;
                }
                consider(i);
            }
        }
        if above == Some(best_diff) {
            let v = self.sorted[pos].0;
            for &(sv, i) in &self.sorted[pos..] {
                if sv != v {
                    break;
                }
                consider(i);
            }
        }
        best.expect("at least one tie candidate").1
    }
}

/// Mean and population standard deviation of image intensity over the
/// mask's foreground.
pub fn foreground_intensity_stats(mask: &SegmentationMask, image: &InputImage) -> Result<(f64, f64)> {
    let w = mask.width();
    let vals: Vec<f64> = mask
        .labels()
        .iter()
        .enumerate()
        .filter(|(_, &l)| l > 0)
        .map(|(i, _)| image.intensity(i / w, i % w))
        .collect();
    if vals.is_empty() {
        return Err(Error::EmptyForeground);
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// Relabels a random `ceil(lam * n)` of the `n` background pixels whose
/// intensity lies within one standard deviation of the foreground mean,
/// giving each the class of its most similar foreground pixel.
pub fn missed_splits<R: Rng + ?Sized>(
    mask: &SegmentationMask,
    image: &InputImage,
    lam: f64,
    rng: &mut R,
) -> Result<SegmentationMask> {
    check_lambda(lam)?;
    if image.height() != mask.height() || image.width() != mask.width() {
        return Err(Error::shape(
            format!("{}x{}", mask.height(), mask.width()),
            format!("{}x{}", image.height(), image.width()),
        ));
    }
    let (mean, std) = foreground_intensity_stats(mask, image)?;
    let (lo, hi) = (mean - std, mean + std);
    let w = mask.width();
    let labels = mask.labels();
    let candidates: Vec<usize> = (0..labels.len())
        .filter(|&i| labels[i] == 0 && {
            let v = image.intensity(i / w, i % w);
            lo <= v && v <= hi
        })
        .collect();
    let k = selection_count(lam, candidates.len());
    let mut out = labels.to_vec();
    if k > 0 {
        let fg = ForegroundIndex::new(mask, image);
        let mut chosen = index::sample(rng, candidates.len(), k).into_vec();
        chosen.sort_unstable();
        for ci in chosen {
            let p = candidates[ci];
            let src = fg.nearest(image.intensity(p / w, p % w), p);
            out[p] = labels[src];
        }
    }
    mask.with_labels(out)
}

/// Applies both generators in the configured order with the same `lam`.
pub fn corrupt<R: Rng + ?Sized>(
    mask: &SegmentationMask,
    image: &InputImage,
    lam: f64,
    cfg: &CorruptionConfig,
    rng: &mut R,
) -> Result<SegmentationMask> {
    match cfg.order {
        CorruptionOrder::MissedThenFalse => {
            let m = missed_splits(mask, image, lam, rng)?;
            false_splits(&m, lam, cfg.patch_size, rng)
        }
        CorruptionOrder::FalseThenMissed => {
            let m = false_splits(mask, lam, cfg.patch_size, rng)?;
            if m.foreground_count() == 0 {
                return Ok(m);
            }
            missed_splits(&m, image, lam, rng)
        }
    }
}

/// Corruption degree for `epoch`, linear from `lambda_start` at the first
/// epoch to `lambda_end` at the last.
pub fn lambda_at(epoch: usize, total_epochs: usize, cfg: &CorruptionConfig) -> Result<f64> {
    if total_epochs == 0 || epoch >= total_epochs {
        return Err(Error::InvalidValue(format!(
            "epoch {epoch} outside 0..{total_epochs}"
        )));
    }
    if total_epochs == 1 {
        return Ok(cfg.lambda_start);
    }
    let t = epoch as f64 / (total_epochs - 1) as f64;
    Ok(cfg.lambda_start * (1.0 - t) + cfg.lambda_end * t)
}
