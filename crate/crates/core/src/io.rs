//! File formats: 8-bit PNG masks with a class sidecar, raw float32
//! probability maps with a text header, PNG images, and dataset manifests.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{ClassKind, InputImage, ProbabilityMap, SegmentationMask};

fn append_ext(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

/// Sidecar recording class metadata next to a mask PNG: `<mask>.png.classes`.
pub fn mask_sidecar_path(path: &Path) -> PathBuf {
    append_ext(path, ".classes")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MaskSidecar {
    num_classes: usize,
    class_kinds: Vec<ClassKind>,
}

/// Writes the mask as an 8-bit grayscale PNG (value = class index) plus its
/// class sidecar.
pub fn save_mask(mask: &SegmentationMask, path: &Path) -> Result<()> {
    let img: GrayImage = ImageBuffer::from_raw(
        mask.width() as u32,
        mask.height() as u32,
        mask.labels().to_vec(),
    )
    .ok_or_else(|| Error::shape(mask.height() * mask.width(), mask.labels().len()))?;
    img.save_with_format(path, image::ImageFormat::Png)?;
    let meta = MaskSidecar {
        num_classes: mask.num_classes(),
        class_kinds: mask.class_kinds().to_vec(),
    };
    fs::write(mask_sidecar_path(path), toml::to_string(&meta)?)?;
    Ok(())
}

/// Reads a mask PNG using the class metadata in its sidecar.
pub fn load_mask(path: &Path) -> Result<SegmentationMask> {
    let side = mask_sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::Header {
        path: side.clone(),
        reason: e.to_string(),
    })?;
    let meta: MaskSidecar = toml::from_str(&text)?;
    if meta.class_kinds.len() != meta.num_classes {
        return Err(Error::Header {
            path: side,
            reason: format!(
                "num_classes = {} but {} class kinds",
                meta.num_classes,
                meta.class_kinds.len()
            ),
        });
    }
    load_mask_with_kinds(path, meta.class_kinds)
}

/// Reads a mask PNG with caller-supplied class metadata.
pub fn load_mask_with_kinds(path: &Path, class_kinds: Vec<ClassKind>) -> Result<SegmentationMask> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    SegmentationMask::new(h as usize, w as usize, img.into_raw(), class_kinds)
}

/// Reads a PNG as intensities in `[0, 1]`, dividing by the sample type maximum.
pub fn load_image(path: &Path) -> Result<InputImage> {
    let dynimg = image::open(path)?;
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    let color = dynimg.color();
    let is_color = color.has_color();
    let sixteen = color.bytes_per_pixel() / color.channel_count() > 1;
    let (channels, interleaved): (usize, Vec<f64>) = match (is_color, sixteen) {
        (false, false) => (
            1,
            dynimg.into_luma8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        ),
        (false, true) => (
            1,
            dynimg.into_luma16().into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
        ),
        (true, false) => (
            3,
            dynimg.into_rgb8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        ),
        (true, true) => (
            3,
            dynimg.into_rgb16().into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
        ),
    };
    let plane = w * h;
    let mut data = vec![0.0; plane * channels];
    for i in 0..plane {
        for k in 0..channels {
            data[k * plane + i] = interleaved[i * channels + k];
        }
    }
    InputImage::new(h, w, channels, data)
}

/// Writes an image as 16-bit PNG so [`load_image`] reads it back within 1/65535.
pub fn save_image(image: &InputImage, path: &Path) -> Result<()> {
    let (h, w) = (image.height(), image.width());
    let plane = h * w;
    let quant = |v: f64| (v * 65535.0).round().clamp(0.0, 65535.0) as u16;
    let d = image.data();
    let out = if image.channels() == 1 {
        DynamicImage::ImageLuma16(
            ImageBuffer::<Luma<u16>, _>::from_raw(w as u32, h as u32, d.iter().map(|&v| quant(v)).collect())
                .expect("buffer size"),
        )
    } else {
        let mut raw = Vec::with_capacity(plane * 3);
        for i in 0..plane {
            for k in 0..3 {
                raw.push(quant(d[k * plane + i]));
            }
        }
        DynamicImage::ImageRgb16(ImageBuffer::from_raw(w as u32, h as u32, raw).expect("buffer size"))
    };
    out.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn probmap_header_path(path: &Path) -> PathBuf {
    append_ext(path, ".hdr")
}

/// Writes `<name>.probs` (little-endian f32, planar) and `<name>.probs.hdr`
/// (`height width channels\n`).
pub fn save_probmap(map: &ProbabilityMap, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(map.data().len() * 4);
    for &v in map.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    fs::write(
        probmap_header_path(path),
        format!("{} {} {}\n", map.height(), map.width(), map.channels()),
    )?;
    Ok(())
}

pub fn load_probmap(path: &Path) -> Result<ProbabilityMap> {
    let hdr_path = probmap_header_path(path);
    let hdr = fs::read_to_string(&hdr_path)?;
    let bad = |reason: &str| Error::Header {
        path: hdr_path.clone(),
        reason: reason.to_string(),
    };
    let line = hdr
        .strip_suffix('\n')
        .ok_or_else(|| bad("header must be newline-terminated"))?;
    let dims: Vec<usize> = line
        .split(' ')
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| bad(&e.to_string()))?;
    let [height, width, channels] = dims[..] else {
        return Err(bad("expected `height width channels`"));
    };
    let payload = fs::read(path)?;
    let expected = height * width * channels * 4;
    if payload.len() != expected {
        return Err(Error::SizeMismatch {
            path: path.to_path_buf(),
            expected,
            actual: payload.len(),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    ProbabilityMap::new(height, width, channels, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSample {
    pub image: PathBuf,
    pub mask: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

/// Dataset listing. Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub num_classes: usize,
    pub class_kinds: Vec<ClassKind>,
    #[serde(default)]
    pub samples: Vec<ManifestSample>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let manifest: Self = toml::from_str(&fs::read_to_string(path)?)?;
        if manifest.class_kinds.len() != manifest.num_classes {
            return Err(Error::Config(format!(
                "manifest declares {} classes but {} kinds",
                manifest.num_classes,
                manifest.class_kinds.len()
            )));
        }
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, toml::to_string(self)?)?;
        Ok(())
    }

    /// Loads every sample, resolving relative paths against `base`.
    pub fn load_samples(&self, base: &Path) -> Result<Vec<(InputImage, SegmentationMask)>> {
        self.samples
            .iter()
            .map(|s| {
                let img = load_image(&resolve(base, &s.image))?;
                let mask = load_mask_with_kinds(&resolve(base, &s.mask), self.class_kinds.clone())?;
                if img.height() != mask.height() || img.width() != mask.width() {
                    return Err(Error::shape(
                        format!("{}x{}", img.height(), img.width()),
                        format!("{}x{}", mask.height(), mask.width()),
                    ));
                }
                Ok((img, mask))
            })
            .collect()
    }
}

pub(crate) fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
