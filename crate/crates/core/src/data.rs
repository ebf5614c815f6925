//! Dataset providers: a synthetic curvilinear generator with known topology,
//! DRIVE ingestion, and the crop / sliding-window / stitch patch protocol.
//!
//! The generator uses `libm` for transcendental functions and its own
//! Box-Muller noise so corpora are bit-identical across platforms.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{save_image, save_mask, DatasetManifest, ManifestSample};
use crate::metrics::{connected_components, window_starts, Connectivity};
use crate::types::{crop_planar, ClassKind, InputImage, ProbabilityMap, SegmentationMask};

pub type Sample = (InputImage, SegmentationMask);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurveFamily {
    Sine,
    Arc,
    Polyline,
    Loop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    pub num_images: usize,
    /// Curvilinear classes, one curve each per image.
    pub num_classes: usize,
    /// Extra filled-ellipse classes tagged volumetric.
    pub volumetric_classes: usize,
    pub curve_families: Vec<CurveFamily>,
    pub thickness_min: f64,
    pub thickness_max: f64,
    /// Foreground minus background intensity.
    pub contrast: f64,
    /// Chance that a curve has a faded stretch in the image.
    pub gap_probability: f64,
    /// Faded stretch length as a fraction of the curve parameter range.
    pub gap_min: f64,
    pub gap_max: f64,
    /// Share of the contrast left inside a faded stretch.
    pub fade_level: f64,
    pub noise_sigma: f64,
    pub rng_seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            num_images: 100,
            num_classes: 3,
            volumetric_classes: 0,
            curve_families: vec![CurveFamily::Sine, CurveFamily::Arc, CurveFamily::Polyline, CurveFamily::Loop],
            thickness_min: 1.5,
            thickness_max: 3.0,
            contrast: 0.6,
            gap_probability: 0.5,
            gap_min: 0.1,
            gap_max: 0.25,
            fade_level: 0.1,
            noise_sigma: 0.05,
            rng_seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_classes + self.volumetric_classes == 0 {
            return fail("synthetic spec needs at least one class".into());
        }
        if self.num_classes > 0 && self.curve_families.is_empty() {
            return fail("no curve families selected".into());
        }
        if self.num_classes + self.volumetric_classes > 255 {
            return fail("at most 255 classes".into());
        }
        if self.height < crate::types::MIN_IMAGE_SIDE || self.width < crate::types::MIN_IMAGE_SIDE {
            return fail(format!("image {}x{} too small", self.height, self.width));
        }
        if !(1.0 <= self.thickness_min && self.thickness_min <= self.thickness_max) {
            return fail("need 1 <= thickness_min <= thickness_max".into());
        }
        if !(self.contrast > 0.0 && self.contrast <= 1.0) {
            return fail(format!("contrast {} outside (0, 1]", self.contrast));
        }
        for (name, v) in [
            ("gap_probability", self.gap_probability),
            ("fade_level", self.fade_level),
            ("gap_min", self.gap_min),
            ("gap_max", self.gap_max),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} {v} outside [0, 1]"));
            }
        }
        if self.gap_min > self.gap_max || self.gap_max > 0.8 {
            return fail("need gap_min <= gap_max <= 0.8".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail("noise_sigma must be non-negative".into());
        }
        Ok(())
    }

    /// Relative brightness of each class, evenly spaced from 1 down to 0.5,
    /// so class identity is visible in the image.
    pub fn class_levels(&self) -> Vec<f64> {
        let n = self.num_classes + self.volumetric_classes;
        (0..n)
            .map(|k| if n == 1 { 1.0 } else { 1.0 - 0.5 * k as f64 / (n - 1) as f64 })
            .collect()
    }

    pub fn class_kinds(&self) -> Vec<ClassKind> {
        let mut kinds = vec![ClassKind::Curvilinear; self.num_classes];
        kinds.extend(std::iter::repeat_n(ClassKind::Volumetric, self.volumetric_classes));
        kinds
    }
}

/// Per-pixel rendering state for one structure.
struct Layer {
    /// Anti-aliased coverage in `[0, 1]`; the mask is `coverage >= 0.5`.
    coverage: Vec<f64>,
    /// Multiplier applied to the coverage in the image only.
    fade: Vec<f64>,
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Points `(row, col)` of a parametric curve plus whether it closes.
fn sample_curve(family: CurveFamily, rng: &mut ChaCha8Rng, h: f64, w: f64) -> (Vec<[f64; 2]>, bool) {
    let side = h.min(w);
    let (cy, cx) = (uniform(rng, 0.25 * h, 0.75 * h), uniform(rng, 0.25 * w, 0.75 * w));
    let coarse = 400;
    let (f, closed): (Box<dyn Fn(f64) -> [f64; 2]>, bool) = match family {
        CurveFamily::Sine => {
            let len = uniform(rng, 0.5, 0.9) * side;
            let amp = uniform(rng, 0.04, 0.12) * side;
            let periods = uniform(rng, 0.5, 2.0);
            let phase = uniform(rng, 0.0, 2.0 * PI);
            let theta = uniform(rng, 0.0, PI);
            let (s, c) = (libm::sin(theta), libm::cos(theta));
            (
                Box::new(move |t| {
                    let u = (t - 0.5) * len;
                    let v = amp * libm::sin(2.0 * PI * periods * t + phase);
                    [cy + u * s + v * c, cx + u * c - v * s]
                }),
                false,
            )
        }
        CurveFamily::Arc => {
            let r = uniform(rng, 0.2, 0.38) * side;
            let span = uniform(rng, 0.6, 1.4) * PI;
            let start = uniform(rng, 0.0, 2.0 * PI);
            (
                Box::new(move |t| {
                    let a = start + span * t;
                    [cy + r * libm::sin(a), cx + r * libm::cos(a)]
                }),
                false,
            )
        }
        CurveFamily::Polyline => {
            let k = rng.random_range(3..=5);
            let mut pts = vec![[uniform(rng, 0.2 * h, 0.8 * h), uniform(rng, 0.2 * w, 0.8 * w)]];
            let mut heading = uniform(rng, 0.0, 2.0 * PI);
            for _ in 1..k {
                heading += uniform(rng, -PI / 3.0, PI / 3.0);
                let step = uniform(rng, 0.15, 0.3) * side;
                let last = pts[pts.len() - 1];
                pts.push([last[0] + step * libm::sin(heading), last[1] + step * libm::cos(heading)]);
            }
            let segs = (pts.len() - 1) as f64;
            (
                Box::new(move |t| {
                    let x = (t * segs).min(segs - 1e-12);
                    let i = x as usize;
                    let frac = x - i as f64;
                    let (a, b) = (pts[i], pts[i + 1]);
                    [a[0] + (b[0] - a[0]) * frac, a[1] + (b[1] - a[1]) * frac]
                }),
                false,
            )
        }
        CurveFamily::Loop => {
            let a = uniform(rng, 0.14, 0.3) * side;
            let b = uniform(rng, 0.14, 0.3) * side;
            let rot = uniform(rng, 0.0, PI);
            let (s, c) = (libm::sin(rot), libm::cos(rot));
            (
                Box::new(move |t| {
                    let ang = 2.0 * PI * t;
                    let (u, v) = (a * libm::cos(ang), b * libm::sin(ang));
                    [cy + u * s + v * c, cx + u * c - v * s]
                }),
                true,
            )
        }
    };
    let rough: Vec<[f64; 2]> = (0..=coarse).map(|i| f(i as f64 / coarse as f64)).collect();
    let length: f64 = rough
        .windows(2)
        .map(|p| libm::hypot(p[1][0] - p[0][0], p[1][1] - p[0][1]))
        .sum();
    // about five samples per pixel of arc length
    let n = ((length * 5.0) as usize).max(coarse);
    ((0..=n).map(|i| f(i as f64 / n as f64)).collect(), closed)
}

/// Renders a curve of thickness `t` into a layer; `None` if it leaves the
/// image margin.
fn render_curve(points: &[[f64; 2]], closed: bool, t: f64, fade: Option<(f64, f64, f64)>, h: usize, w: usize) -> Option<Layer> {
    let margin = t / 2.0 + 2.0;
    if points
        .iter()
        .any(|p| p[0] < margin || p[1] < margin || p[0] > h as f64 - 1.0 - margin || p[1] > w as f64 - 1.0 - margin)
    {
        return None;
    }
    let mut dist = vec![f64::INFINITY; h * w];
    let mut nearest = vec![0usize; h * w];
    let reach = t / 2.0 + 1.5;
    for (j, p) in points.iter().enumerate() {
        let (r0, r1) = ((p[0] - reach).floor() as usize, (p[0] + reach).ceil() as usize);
        let (c0, c1) = ((p[1] - reach).floor() as usize, (p[1] + reach).ceil() as usize);
        for r in r0..=r1.min(h - 1) {
            for c in c0..=c1.min(w - 1) {
                let d = libm::hypot(r as f64 - p[0], c as f64 - p[1]);
                let i = r * w + c;
                if d < dist[i] {
                    dist[i] = d;
                    nearest[i] = j;
                }
            }
        }
    }
    let n = points.len() as f64;
    let fade_at = |j: usize| -> f64 {
        let Some((s0, len, level)) = fade else { return 1.0 };
        let s = j as f64 / n;
        // offset along the parameter from the faded stretch, wrapping for loops
        let mut off = s - s0;
        if closed {
            off = off.rem_euclid(1.0);
        }
        let ramp = 0.03;
        if (0.0..=len).contains(&off) {
            level
        } else {
            let gap = if off < 0.0 { -off } else { off - len };
            let gap = if closed { gap.min(1.0 - len - gap).max(0.0) } else { gap };
            if gap >= ramp {
                1.0
            } else {
                level + (1.0 - level) * gap / ramp
            }
        }
    };
    let coverage = dist.iter().map(|&d| (t / 2.0 + 0.5 - d).clamp(0.0, 1.0)).collect();
    let fade = nearest
        .iter()
        .zip(&dist)
        .map(|(&j, &d)| if d.is_finite() { fade_at(j) } else { 1.0 })
        .collect();
    Some(Layer { coverage, fade })
}

fn render_blob(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Option<Layer> {
    let side = h.min(w) as f64;
    let a = uniform(rng, 0.08, 0.16) * side;
    let b = uniform(rng, 0.08, 0.16) * side;
    let rot = uniform(rng, 0.0, PI);
    let (cy, cx) = (uniform(rng, 0.0, h as f64), uniform(rng, 0.0, w as f64));
    let margin = a.max(b) + 2.0;
    if cy < margin || cx < margin || cy > h as f64 - 1.0 - margin || cx > w as f64 - 1.0 - margin {
        return None;
    }
    let (s, c) = (libm::sin(rot), libm::cos(rot));
    let coverage = (0..h * w)
        .map(|i| {
            let (dy, dx) = ((i / w) as f64 - cy, (i % w) as f64 - cx);
            let (u, v) = (dx * c + dy * s, -dx * s + dy * c);
            let r = libm::hypot(u / a, v / b);
            ((1.0 - r) * a.min(b) + 0.5).clamp(0.0, 1.0)
        })
        .collect();
    Some(Layer { coverage, fade: vec![1.0; h * w] })
}

/// Standard normal draw by the Box-Muller transform.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * PI * u2)
}

/// True when `support` touches (8-adjacency) or overlaps a labeled pixel.
fn touches(labels: &[u8], support: &[bool], h: usize, w: usize) -> bool {
    (0..h * w).filter(|&i| support[i]).any(|i| {
        let (r, c) = (i / w, i % w);
        (r.saturating_sub(1)..(r + 2).min(h)).any(|rr| (c.saturating_sub(1)..(c + 2).min(w)).any(|cc| labels[rr * w + cc] > 0))
    })
}

const MAX_ATTEMPTS: usize = 200;

fn generate_one(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let (h, w) = (spec.height, spec.width);
    'image: for _ in 0..MAX_ATTEMPTS {
        let mut labels = vec![0u8; h * w];
        let mut layers = Vec::new();
        let total = spec.num_classes + spec.volumetric_classes;
        for k in 0..total {
            let mut placed = false;
            for _ in 0..MAX_ATTEMPTS {
                let layer = if k < spec.num_classes {
                    let family = spec.curve_families[rng.random_range(0..spec.curve_families.len())];
                    let t = uniform(rng, spec.thickness_min, spec.thickness_max);
                    let fade = rng.random_bool(spec.gap_probability).then(|| {
                        let len = uniform(rng, spec.gap_min, spec.gap_max);
                        (uniform(rng, 0.1, (0.9 - len).max(0.1)), len, spec.fade_level)
                    });
                    let (points, closed) = sample_curve(family, rng, h as f64, w as f64);
                    render_curve(&points, closed, t, fade, h, w)
                } else {
                    render_blob(rng, h, w)
                };
                let Some(layer) = layer else { continue };
                let support: Vec<bool> = layer.coverage.iter().map(|&c| c >= 0.5).collect();
                // one component per structure, separated from the others
                if connected_components(&support, h, w, Connectivity::Eight).count != 1 || touches(&labels, &support, h, w) {
                    continue;
                }
                for (l, s) in labels.iter_mut().zip(&support) {
                    if *s {
                        *l = k as u8 + 1;
                    }
                }
                layers.push(layer);
                placed = true;
                break;
            }
            if !placed {
                continue 'image;
            }
        }
        let bg = (1.0 - spec.contrast) / 2.0;
        let levels = spec.class_levels();
        let pixels: Vec<f64> = (0..h * w)
            .map(|i| {
                let signal = layers
                    .iter()
                    .zip(&levels)
                    .map(|(l, level)| level * l.coverage[i] * l.fade[i])
                    .fold(0.0, f64::max);
                let noise = if spec.noise_sigma > 0.0 { spec.noise_sigma * normal(rng) } else { 0.0 };
                (bg + spec.contrast * signal + noise).clamp(0.0, 1.0)
            })
            .collect();
        let image = InputImage::grayscale(h, w, pixels)?;
        let mask = SegmentationMask::new(h, w, labels, spec.class_kinds())?;
        return Ok((image, mask));
    }
    Err(Error::Config(format!(
        "could not place {} separated structures in a {h}x{w} image",
        spec.num_classes + spec.volumetric_classes
    )))
}

/// Renders `spec.num_images` samples. Image `i` depends only on the seed and
/// `i`, not on the corpus size.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    (0..spec.num_images)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
            rng.set_stream(i as u64);
            generate_one(spec, &mut rng)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Seeded shuffle of `0..n` into train / val / test; fractions round down.
pub fn assign_splits(n: usize, val_fraction: f64, test_fraction: f64, seed: u64) -> Result<Vec<Split>> {
    if !(val_fraction >= 0.0 && test_fraction >= 0.0 && val_fraction + test_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "split fractions {val_fraction} + {test_fraction} must be non-negative and sum to at most 1"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = (val_fraction * n as f64) as usize;
    let n_test = (test_fraction * n as f64) as usize;
    let mut out = vec![Split::Train; n];
    for (rank, &i) in order.iter().enumerate() {
        if rank < n_val {
            out[i] = Split::Val;
        } else if rank < n_val + n_test {
            out[i] = Split::Test;
        }
    }
    Ok(out)
}

/// Writes `images/NNNN.png`, `masks/NNNN.png` and `manifest.toml` under `dir`.
pub fn write_corpus(samples: &[Sample], splits: Option<&[Split]>, dir: &Path) -> Result<DatasetManifest> {
    let kinds = samples
        .first()
        .map(|s| s.1.class_kinds().to_vec())
        .ok_or_else(|| Error::InvalidValue("empty corpus".into()))?;
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, (img, mask)) in samples.iter().enumerate() {
        let image = PathBuf::from(format!("images/{i:04}.png"));
        let mask_path = PathBuf::from(format!("masks/{i:04}.png"));
        save_image(img, &dir.join(&image))?;
        save_mask(mask, &dir.join(&mask_path))?;
        entries.push(ManifestSample {
            image,
            mask: mask_path,
            split: splits.map(|s| s[i].as_str().to_string()),
        });
    }
    let manifest = DatasetManifest {
        num_classes: kinds.len(),
        class_kinds: kinds,
        samples: entries,
    };
    manifest.save(&dir.join("manifest.toml"))?;
    Ok(manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchProtocol {
    pub train_crop: usize,
    pub test_window: usize,
    pub test_stride: usize,
}

impl Default for PatchProtocol {
    fn default() -> Self {
        Self {
            train_crop: 256,
            test_window: 128,
            test_stride: 64,
        }
    }
}

impl PatchProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.train_crop == 0 || self.test_window == 0 || self.test_stride == 0 || self.test_stride > self.test_window {
            return Err(Error::Config(format!("invalid patch protocol {self:?}")));
        }
        Ok(())
    }
}

/// Mirror index without repeating the edge sample, for any offset.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

fn pad_planar<T: Copy>(data: &[T], channels: usize, h: usize, w: usize, th: usize, tw: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(channels * th * tw);
    for k in 0..channels {
        for r in 0..th {
            let sr = reflect(r as isize, h);
            for c in 0..tw {
                out.push(data[k * h * w + sr * w + reflect(c as isize, w)]);
            }
        }
    }
    out
}

/// Reflect-pads on the bottom and right up to at least `th x tw`.
pub fn pad_reflect(image: &InputImage, mask: Option<&SegmentationMask>, th: usize, tw: usize) -> Result<(InputImage, Option<SegmentationMask>)> {
    let (h, w) = (image.height(), image.width());
    let (th, tw) = (th.max(h), tw.max(w));
    if (th, tw) == (h, w) {
        return Ok((image.clone(), mask.cloned()));
    }
    let img = InputImage::new(th, tw, image.channels(), pad_planar(image.data(), image.channels(), h, w, th, tw))?;
    let m = mask
        .map(|m| SegmentationMask::new(th, tw, pad_planar(m.labels(), 1, h, w, th, tw), m.class_kinds().to_vec()))
        .transpose()?;
    Ok((img, m))
}

/// Padded size whose sides are multiples of `m`.
pub fn padded_size(h: usize, w: usize, m: usize) -> (usize, usize) {
    (h.div_ceil(m) * m, w.div_ceil(m) * m)
}

/// Uniformly placed `size x size` crop, reflect-padding smaller inputs first.
pub fn random_crop<R: Rng + ?Sized>(image: &InputImage, mask: &SegmentationMask, size: usize, rng: &mut R) -> Result<Sample> {
    if (mask.height(), mask.width()) != (image.height(), image.width()) {
        return Err(Error::shape(
            format!("{}x{}", image.height(), image.width()),
            format!("{}x{}", mask.height(), mask.width()),
        ));
    }
    let (img, m) = pad_reflect(image, Some(mask), size, size)?;
    let m = m.expect("mask was supplied");
    let row = rng.random_range(0..=img.height() - size);
    let col = rng.random_range(0..=img.width() - size);
    Ok((img.crop(row, col, size, size)?, m.crop(row, col, size, size)))
}

/// Top-left corners of `window x window` patches covering `h x w`, the final
/// row and column clamped to the border.
pub fn sliding_windows(h: usize, w: usize, window: usize, stride: usize) -> Vec<(usize, usize)> {
    let rows = window_starts(h, window, stride);
    let cols = window_starts(w, window, stride);
    rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect()
}

/// Image patches at [`sliding_windows`] offsets.
pub fn window_patches(image: &InputImage, window: usize, stride: usize) -> Result<Vec<((usize, usize), InputImage)>> {
    if window > image.height() || window > image.width() {
        return Err(Error::InvalidValue(format!(
            "window {window} exceeds image {}x{}; pad first",
            image.height(),
            image.width()
        )));
    }
    sliding_windows(image.height(), image.width(), window, stride)
        .into_iter()
        .map(|(r, c)| Ok(((r, c), image.crop(r, c, window, window)?)))
        .collect()
}

/// Per-pixel mean of overlapping patch predictions, renormalized so each
/// multi-channel pixel sums to one.
pub fn stitch(patches: &[((usize, usize), ProbabilityMap)], height: usize, width: usize) -> Result<ProbabilityMap> {
    let channels = patches
        .first()
        .map(|p| p.1.channels())
        .ok_or(Error::Uncovered { row: 0, col: 0 })?;
    let hw = height * width;
    let mut sum = vec![0.0; channels * hw];
    let mut count = vec![0u32; hw];
    for ((r0, c0), p) in patches {
        if p.channels() != channels || r0 + p.height() > height || c0 + p.width() > width {
            return Err(Error::shape(
                format!("{channels}-channel patch inside {height}x{width}"),
                format!("{}x{}x{} at ({r0}, {c0})", p.channels(), p.height(), p.width()),
            ));
        }
        let ph = p.plane();
        for r in 0..p.height() {
            for c in 0..p.width() {
                let dst = (r0 + r) * width + c0 + c;
                count[dst] += 1;
                for k in 0..channels {
                    sum[k * hw + dst] += p.data()[k * ph + r * p.width() + c];
                }
            }
        }
    }
    if let Some(i) = count.iter().position(|&n| n == 0) {
        return Err(Error::Uncovered { row: i / width, col: i % width });
    }
    for i in 0..hw {
        let n = f64::from(count[i]);
        for k in 0..channels {
            sum[k * hw + i] /= n;
        }
        if channels > 1 {
            let s: f64 = (0..channels).map(|k| sum[k * hw + i]).sum();
            for k in 0..channels {
                sum[k * hw + i] /= s;
            }
        }
    }
    ProbabilityMap::new(height, width, channels, sum)
}

/// Crops the top-left `h x w` of a probability map.
pub fn crop_probmap(map: &ProbabilityMap, h: usize, w: usize) -> Result<ProbabilityMap> {
    let data = crop_planar(map.data(), map.channels(), map.height(), map.width(), 0, 0, h, w);
    ProbabilityMap::new(h, w, map.channels(), data)
}

/// DRIVE training images used by the 16 / 4 protocol.
pub const DRIVE_IDS: std::ops::RangeInclusive<u32> = 21..=40;
pub const DRIVE_TRAIN_COUNT: usize = 16;

fn drive_files(root: &Path) -> Vec<(PathBuf, PathBuf)> {
    DRIVE_IDS
        .map(|id| {
            (
                root.join("training/images").join(format!("{id}_training.tif")),
                root.join("training/1st_manual").join(format!("{id}_manual1.gif")),
            )
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct DriveSplit {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub train_files: Vec<PathBuf>,
    pub test_files: Vec<PathBuf>,
}

/// Loads the 20 annotated DRIVE training images and splits them 16 / 4 by
/// sorted filename. Vessel labels are binarized to one curvilinear class.
pub fn load_drive(root: &Path) -> Result<DriveSplit> {
    let files = drive_files(root);
    let missing: Vec<String> = files
        .iter()
        .flat_map(|(i, m)| [i, m])
        .filter(|p| !p.is_file())
        .map(|p| p.strip_prefix(root).unwrap_or(p).display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingFiles {
            root: root.to_path_buf(),
            missing,
        });
    }
    let mut samples = Vec::with_capacity(files.len());
    for (img_path, mask_path) in &files {
        let img = crate::io::load_image(img_path)?;
        let raw = image::open(mask_path)?.into_luma8();
        let (w, h) = raw.dimensions();
        let labels = raw.into_raw().into_iter().map(|v| u8::from(v > 127)).collect();
        let mask = SegmentationMask::new(h as usize, w as usize, labels, vec![ClassKind::Curvilinear])?;
        if (mask.height(), mask.width()) != (img.height(), img.width()) {
            return Err(Error::shape(
                format!("{}x{} label for {}", img.height(), img.width(), img_path.display()),
                format!("{h}x{w}"),
            ));
        }
        samples.push(((img, mask), img_path.clone()));
    }
    samples.sort_by(|a, b| a.1.file_name().cmp(&b.1.file_name()));
    let (train, test) = samples.split_at(DRIVE_TRAIN_COUNT);
    Ok(DriveSplit {
        train: train.iter().map(|s| s.0.clone()).collect(),
        test: test.iter().map(|s| s.0.clone()).collect(),
        train_files: train.iter().map(|s| s.1.clone()).collect(),
        test_files: test.iter().map(|s| s.1.clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::count_components;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn spec(n: usize) -> SyntheticSpec {
        SyntheticSpec { num_images: n, ..Default::default() }
    }

    #[test]
    fn deterministic_and_prefix_stable() {
        let a = generate_synthetic(&spec(6)).unwrap();
        let b = generate_synthetic(&spec(6)).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&spec(3)).unwrap();
        assert_eq!(&a[..3], &c[..]);
        let other = generate_synthetic(&SyntheticSpec { rng_seed: 1, ..spec(3) }).unwrap();
        assert_ne!(other, c);
    }

    #[test]
    fn clean_render_thresholds_to_mask() {
        for (curves, blobs) in [(1, 0), (0, 1)] {
            let s = SyntheticSpec {
                num_classes: curves,
                volumetric_classes: blobs,
                noise_sigma: 0.0,
                contrast: 1.0,
                gap_probability: 0.0,
                ..spec(10)
            };
            for (img, mask) in generate_synthetic(&s).unwrap() {
                for (v, l) in img.data().iter().zip(mask.labels()) {
                    assert_eq!(*v >= 0.5, *l > 0);
                }
            }
        }
    }

    #[test]
    fn one_component_per_class() {
        let s = SyntheticSpec { volumetric_classes: 1, ..spec(20) };
        for (_, mask) in generate_synthetic(&s).unwrap() {
            for k in 1..=4u8 {
                let support = mask.class_support(k);
                assert_eq!(count_components(&support, 64, 64, Connectivity::Eight), 1, "class {k}");
            }
            assert_eq!(mask.class_kinds()[3], ClassKind::Volumetric);
        }
    }

    #[test]
    fn faded_stretch_only_touches_image() {
        let faded = SyntheticSpec { gap_probability: 1.0, noise_sigma: 0.0, ..spec(5) };
        let plain = SyntheticSpec { gap_probability: 0.0, noise_sigma: 0.0, ..spec(5) };
        let mut dimmer = 0;
        for ((fi, fm), (_, _)) in generate_synthetic(&faded).unwrap().iter().zip(generate_synthetic(&plain).unwrap()) {
            let bg = (1.0 - faded.contrast) / 2.0;
            // faded pixels stay labeled although their intensity nears the background
            dimmer += fi
                .data()
                .iter()
                .zip(fm.labels())
                .filter(|(v, l)| **l > 0 && **v < bg + 0.5 * faded.contrast)
                .count();
        }
        assert!(dimmer > 0);
    }

    #[test]
    fn rejects_degenerate_specs() {
        assert!(generate_synthetic(&SyntheticSpec { num_classes: 0, ..spec(1) }).is_err());
        assert!(generate_synthetic(&SyntheticSpec { contrast: 0.0, ..spec(1) }).is_err());
    }

    #[test]
    fn splits_are_seeded() {
        let a = assign_splits(50, 0.2, 0.2, 3).unwrap();
        assert_eq!(a, assign_splits(50, 0.2, 0.2, 3).unwrap());
        assert_eq!(a.iter().filter(|s| **s == Split::Val).count(), 10);
        assert_eq!(a.iter().filter(|s| **s == Split::Test).count(), 10);
        assert!(assign_splits(5, 0.7, 0.7, 0).is_err());
    }

    #[test]
    fn corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_synthetic(&spec(3)).unwrap();
        let splits = assign_splits(3, 0.0, 0.34, 0).unwrap();
        let manifest = write_corpus(&samples, Some(&splits), dir.path()).unwrap();
        let back = DatasetManifest::load(&dir.path().join("manifest.toml")).unwrap();
        assert_eq!(back, manifest);
        let loaded = back.load_samples(dir.path()).unwrap();
        for ((a, am), (b, bm)) in samples.iter().zip(&loaded) {
            assert_eq!(am, bm);
            let err = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(err <= 0.5 / 65535.0 + 1e-12);
        }
    }

    #[test]
    fn window_starts_for_drive_width() {
        let starts: Vec<usize> = sliding_windows(128, 565, 128, 64).iter().map(|p| p.1).collect();
        assert_eq!(starts, vec![0, 64, 128, 192, 256, 320, 384, 437]);
    }

    #[test]
    fn tiling_when_stride_equals_window() {
        let wins = sliding_windows(64, 64, 16, 16);
        let mut count = vec![0; 64 * 64];
        for (r, c) in &wins {
            for rr in *r..r + 16 {
                for cc in *c..c + 16 {
                    count[rr * 64 + cc] += 1;
                }
            }
        }
        assert!(count.iter().all(|&n| n == 1));
    }

    #[test]
    fn stitch_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (h, w, c) = (40, 57, 3);
        let mut data = vec![0.0; c * h * w];
        for i in 0..h * w {
            let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.1..1.0)).collect();
            let s: f64 = raw.iter().sum();
            for k in 0..c {
                data[k * h * w + i] = raw[k] / s;
            }
        }
        let full = ProbabilityMap::new(h, w, c, data).unwrap();
        let patches: Vec<_> = sliding_windows(h, w, 16, 12)
            .into_iter()
            .map(|(r, col)| {
                let d = crop_planar(full.data(), c, h, w, r, col, 16, 16);
                ((r, col), ProbabilityMap::new(16, 16, c, d).unwrap())
            })
            .collect();
        let st = stitch(&patches, h, w).unwrap();
        let err = st.data().iter().zip(full.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12);
    }

    #[test]
    fn stitch_reports_gaps() {
        let p = ProbabilityMap::new(4, 4, 1, vec![0.5; 16]).unwrap();
        assert!(matches!(stitch(&[((0, 0), p)], 4, 8).unwrap_err(), Error::Uncovered { row: 0, col: 4 }));
    }

    #[test]
    fn crops_pad_small_inputs() {
        let img = InputImage::grayscale(16, 20, (0..320).map(|i| i as f64 / 320.0).collect()).unwrap();
        let mask = SegmentationMask::new(16, 20, (0..320).map(|i| (i % 2) as u8).collect(), vec![ClassKind::Curvilinear]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (ci, cm) = random_crop(&img, &mask, 32, &mut rng).unwrap();
        assert_eq!((ci.height(), ci.width(), cm.height()), (32, 32, 32));
        // reflection mirrors row 15 onto row 17
        let (pi, _) = pad_reflect(&img, None, 32, 32).unwrap();
        assert_eq!(pi.intensity(17, 3), img.intensity(13, 3));
        assert_eq!(pi.intensity(3, 21), img.intensity(3, 17));
    }

    #[test]
    fn drive_empty_directory_lists_forty_files() {
        let dir = tempfile::tempdir().unwrap();
        match load_drive(dir.path()).unwrap_err() {
            Error::MissingFiles { missing, .. } => {
                assert_eq!(missing.len(), 40);
                assert!(missing.iter().any(|m| m.ends_with("21_training.tif")));
                assert!(missing.iter().any(|m| m.ends_with("40_manual1.gif")));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn drive_layout_loads_sixteen_and_four() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("training/images")).unwrap();
        fs::create_dir_all(dir.path().join("training/1st_manual")).unwrap();
        let (h, w) = (20u32, 24u32);
        for (id, (ip, mp)) in DRIVE_IDS.zip(drive_files(dir.path())) {
            let rgb = image::RgbImage::from_fn(w, h, |x, y| image::Rgb([(x * 10) as u8, (y * 10) as u8, id as u8]));
            rgb.save_with_format(&ip, image::ImageFormat::Tiff).unwrap();
            let lab = image::RgbaImage::from_fn(w, h, |x, _| {
                let v = if x % 3 == 0 { 255 } else { 0 };
                image::Rgba([v, v, v, 255])
            });
            lab.save_with_format(&mp, image::ImageFormat::Gif).unwrap();
        }
        let split = load_drive(dir.path()).unwrap();
        assert_eq!((split.train.len(), split.test.len()), (16, 4));
        assert!(split.test_files[0].ends_with("37_training.tif"));
        for (img, mask) in split.train.iter().chain(&split.test) {
            assert_eq!(img.channels(), 3);
            assert!(mask.labels().iter().all(|&l| l <= 1));
            assert_eq!(mask.foreground_count(), 8 * h as usize);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn windows_cover_every_pixel(h in 16usize..200, w in 16usize..200, window in 1usize..64, stride_frac in 0.05f64..=1.0) {
            prop_assume!(window <= h && window <= w);
            let stride = ((window as f64 * stride_frac) as usize).max(1);
            let mut covered = vec![false; h * w];
            for (r, c) in sliding_windows(h, w, window, stride) {
                prop_assert!(r + window <= h && c + window <= w);
                for rr in r..r + window {
                    for cc in c..c + window {
                        covered[rr * w + cc] = true;
                    }
                }
            }
            prop_assert!(covered.iter().all(|&b| b));
        }
    }
}
