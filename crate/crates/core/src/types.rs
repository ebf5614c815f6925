//! Shared domain types: images, label masks, probability maps and embeddings.
//!
//! All grids are stored row-major; multi-channel grids are planar
//! (channel-major), so channel `k` of a `h x w` grid occupies
//! `data[k*h*w .. (k+1)*h*w]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest side length accepted for an input image.
pub const MIN_IMAGE_SIDE: usize = 16;

/// Tolerance on per-pixel probability sums.
pub const SIMPLEX_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct InputImage {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl InputImage {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidValue(format!(
                "image must have 1 or 3 channels, got {channels}"
            )));
        }
        if height < MIN_IMAGE_SIDE || width < MIN_IMAGE_SIDE {
            return Err(Error::InvalidValue(format!(
                "image {height}x{width} is smaller than {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(height * width * channels, data.len()));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::InvalidValue(format!(
                "intensity {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn grayscale(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(height, width, 1, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Luminance at a pixel; the channel mean for color images.
    pub fn intensity(&self, row: usize, col: usize) -> f64 {
        let plane = self.height * self.width;
        let idx = row * self.width + col;
        if self.channels == 1 {
            self.data[idx]
        } else {
            (0..self.channels).map(|k| self.data[k * plane + idx]).sum::<f64>()
                / self.channels as f64
        }
    }

    /// Converts to the requested channel count (1 or 3).
    pub fn with_channels(&self, channels: usize) -> Result<Self> {
        if channels == self.channels {
            return Ok(self.clone());
        }
        let plane = self.height * self.width;
        let data = match channels {
            1 => (0..plane)
                .map(|i| self.intensity(i / self.width, i % self.width))
                .collect(),
            3 => {
                let mut d = Vec::with_capacity(3 * plane);
                for _ in 0..3 {
                    d.extend_from_slice(&self.data[..plane]);
                }
                d
            }
            n => {
                return Err(Error::InvalidValue(format!(
                    "unsupported channel count {n}"
                )))
            }
        };
        Self::new(self.height, self.width, channels, data)
    }

    /// Extracts a `size_h x size_w` window with top-left corner at `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, size_h: usize, size_w: usize) -> Result<Self> {
        let data = crop_planar(
            &self.data,
            self.channels,
            self.height,
            self.width,
            row,
            col,
            size_h,
            size_w,
        );
        Self::new(size_h, size_w, self.channels, data)
    }
}

pub(crate) fn crop_planar<T: Copy>(
    data: &[T],
    channels: usize,
    height: usize,
    width: usize,
    row: usize,
    col: usize,
    size_h: usize,
    size_w: usize,
) -> Vec<T> {
    assert!(row + size_h <= height && col + size_w <= width);
    let mut out = Vec::with_capacity(channels * size_h * size_w);
    for k in 0..channels {
        let plane = &data[k * height * width..(k + 1) * height * width];
        for r in row..row + size_h {
            out.extend_from_slice(&plane[r * width + col..r * width + col + size_w]);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassKind {
    Curvilinear,
    Volumetric,
}

/// Per-pixel class labels; 0 is background, `1..=num_classes` are foreground.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
    class_kinds: Vec<ClassKind>,
}

impl SegmentationMask {
    pub fn new(
        height: usize,
        width: usize,
        labels: Vec<u8>,
        class_kinds: Vec<ClassKind>,
    ) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape(height * width, labels.len()));
        }
        if class_kinds.len() > u8::MAX as usize {
            return Err(Error::InvalidValue("at most 255 classes".into()));
        }
        let num_classes = class_kinds.len();
        if let Some(&l) = labels.iter().find(|&&l| l as usize > num_classes) {
            return Err(Error::ClassRange {
                label: l as u32,
                num_classes,
            });
        }
        Ok(Self {
            height,
            width,
            labels,
            class_kinds,
        })
    }

    /// All-background mask.
    pub fn empty(height: usize, width: usize, class_kinds: Vec<ClassKind>) -> Self {
        Self {
            height,
            width,
            labels: vec![0; height * width],
            class_kinds,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.class_kinds.len()
    }

    pub fn class_kinds(&self) -> &[ClassKind] {
        &self.class_kinds
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l > 0).count()
    }

    pub fn same_shape(&self, other: &SegmentationMask) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Boolean grid of pixels carrying `class_id`.
    pub fn class_support(&self, class_id: u8) -> Vec<bool> {
        self.labels.iter().map(|&l| l == class_id).collect()
    }

    pub fn foreground(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l > 0).collect()
    }

    pub fn crop(&self, row: usize, col: usize, size_h: usize, size_w: usize) -> Self {
        let labels = crop_planar(
            &self.labels,
            1,
            self.height,
            self.width,
            row,
            col,
            size_h,
            size_w,
        );
        Self {
            height: size_h,
            width: size_w,
            labels,
            class_kinds: self.class_kinds.clone(),
        }
    }

    /// Replaces labels, keeping shape and class metadata. Labels are re-validated.
    pub fn with_labels(&self, labels: Vec<u8>) -> Result<Self> {
        Self::new(self.height, self.width, labels, self.class_kinds.clone())
    }
}

/// Collapses all foreground classes into class 1.
pub fn binarize_mask(mask: &SegmentationMask) -> SegmentationMask {
    let kind = if mask
        .class_kinds
        .iter()
        .all(|k| *k == ClassKind::Volumetric)
        && !mask.class_kinds.is_empty()
    {
        ClassKind::Volumetric
    } else {
        ClassKind::Curvilinear
    };
    SegmentationMask {
        height: mask.height,
        width: mask.width,
        labels: mask.labels.iter().map(|&l| u8::from(l > 0)).collect(),
        class_kinds: vec![kind],
    }
}

/// Per-pixel distribution over `channels` classes, or a single-channel
/// foreground probability when `channels == 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ProbabilityMap {
    /// Validates entries in `[0, 1]` and, for two or more channels, unit sums.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        let map = Self::new_unchecked(height, width, channels, data)?;
        map.validate()?;
        Ok(map)
    }

    pub(crate) fn new_unchecked(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidValue("probability map needs channels".into()));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(height * width * channels, data.len()));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(v) = self
            .data
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::InvalidValue(format!("probability {v} outside [0, 1]")));
        }
        if self.channels > 1 {
            if let Some(s) = self.max_sum_deviation() {
                if s > SIMPLEX_TOLERANCE {
                    return Err(Error::InvalidValue(format!(
                        "per-pixel probabilities deviate from 1 by {s}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Largest `|sum - 1|` over pixels, `None` for an empty map.
    pub fn max_sum_deviation(&self) -> Option<f64> {
        let plane = self.plane();
        (0..plane)
            .map(|i| {
                let s: f64 = (0..self.channels).map(|k| self.data[k * plane + i]).sum();
                (s - 1.0).abs()
            })
            .reduce(f64::max)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.data[channel * self.plane() + row * self.width + col]
    }

    pub fn channel(&self, channel: usize) -> &[f64] {
        let plane = self.plane();
        &self.data[channel * plane..(channel + 1) * plane]
    }

    /// Most probable class per pixel; ties resolve to the lowest index.
    pub fn argmax(&self, class_kinds: Vec<ClassKind>) -> Result<SegmentationMask> {
        if self.channels == 1 {
            // single-channel maps are foreground probabilities
            let labels = self.data.iter().map(|&p| u8::from(p > 0.5)).collect();
            return SegmentationMask::new(self.height, self.width, labels, class_kinds);
        }
        if class_kinds.len() + 1 != self.channels {
            return Err(Error::shape(
                format!("{} classes", self.channels - 1),
                format!("{} class kinds", class_kinds.len()),
            ));
        }
        let plane = self.plane();
        let labels = (0..plane)
            .map(|i| {
                let mut best = 0;
                for k in 1..self.channels {
                    if self.data[k * plane + i] > self.data[best * plane + i] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect();
        SegmentationMask::new(self.height, self.width, labels, class_kinds)
    }
}

/// One-hot encoding over `num_classes + 1` channels.
pub fn one_hot(mask: &SegmentationMask) -> Result<ProbabilityMap> {
    let channels = mask.num_classes() + 1;
    let plane = mask.height * mask.width;
    let mut data = vec![0.0; channels * plane];
    for (i, &l) in mask.labels.iter().enumerate() {
        if l as usize >= channels {
            return Err(Error::ClassRange {
                label: l as u32,
                num_classes: mask.num_classes(),
            });
        }
        data[l as usize * plane + i] = 1.0;
    }
    ProbabilityMap::new_unchecked(mask.height, mask.width, channels, data)
}

/// Spatial feature grid at a bottleneck, stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureEmbedding {
    channels: usize,
    height: usize,
    width: usize,
    stride: usize,
    data: Vec<f64>,
}

impl FeatureEmbedding {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        stride: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(channels * height * width, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("non-finite embedding value".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            stride,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}
