use serde::{Deserialize, Serialize};

use super::components::{count_components, Connectivity};
use crate::error::{Error, Result};
use crate::types::{crop_planar, SegmentationMask};

/// Sliding-window parameters for the local Betti error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BettiConfig {
    pub window: usize,
    pub stride: usize,
    pub connectivity: Connectivity,
}

impl Default for BettiConfig {
    fn default() -> Self {
        Self {
            window: 64,
            stride: 32,
            connectivity: Connectivity::Eight,
        }
    }
}

impl BettiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.stride > self.window {
            return Err(Error::Config(format!(
                "betti stride {} must be in 1..={}",
                self.stride, self.window
            )));
        }
        Ok(())
    }
}

/// Window start offsets along one axis of length `len`.
///
/// Windows advance by `stride`; if the last regular window stops short of the
/// border, one more window is clamped against it. A window at least as long
/// as the axis yields the single offset 0.
pub fn window_starts(len: usize, window: usize, stride: usize) -> Vec<usize> {
    if window >= len {
        return vec![0];
    }
    let mut starts: Vec<usize> = (0..)
        .map(|i| i * stride)
        .take_while(|&s| s + window <= len)
        .collect();
    let last = *starts.last().expect("window < len");
    if last + window < len {
        starts.push(len - window);
    }
    starts
}

/// Mean absolute difference of per-window component counts after
/// binarizing both masks.
pub fn betti_error(pred: &SegmentationMask, gt: &SegmentationMask, cfg: &BettiConfig) -> Result<f64> {
    if !pred.same_shape(gt) {
        return Err(Error::shape(
            format!("{}x{}", gt.height(), gt.width()),
            format!("{}x{}", pred.height(), pred.width()),
        ));
    }
    cfg.validate()?;
    let (h, w) = (gt.height(), gt.width());
    let (wh, ww) = (cfg.window.min(h), cfg.window.min(w));
    let p = pred.foreground();
    let g = gt.foreground();
    let rows = window_starts(h, cfg.window, cfg.stride);
    let cols = window_starts(w, cfg.window, cfg.stride);
    let mut total = 0.0;
    for &r in &rows {
        for &c in &cols {
            let pw = crop_planar(&p, 1, h, w, r, c, wh, ww);
            let gw = crop_planar(&g, 1, h, w, r, c, wh, ww);
            let bp = count_components(&pw, wh, ww, cfg.connectivity);
            let bg = count_components(&gw, wh, ww, cfg.connectivity);
            total += bp.abs_diff(bg) as f64;
        }
    }
    Ok(total / (rows.len() * cols.len()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ClassKind;

    fn mask_from(rows: &[&str]) -> SegmentationMask {
        let h = rows.len();
        let w = rows[0].len();
        let labels = rows
            .iter()
            .flat_map(|r| r.chars().map(|c| c.to_digit(10).map_or(0, |d| d as u8)))
            .collect();
        SegmentationMask::new(h, w, labels, vec![ClassKind::Curvilinear; 3]).unwrap()
    }

    #[test]
    fn starts_for_drive_width() {
        let s = window_starts(565, 128, 64);
        assert_eq!(s, vec![0, 64, 128, 192, 256, 320, 384, 437]);
    }

    #[test]
    fn starts_exact_tiling() {
        assert_eq!(window_starts(64, 32, 32), vec![0, 32]);
        assert_eq!(window_starts(64, 32, 16), vec![0, 16, 32]);
        assert_eq!(window_starts(20, 64, 32), vec![0]);
    }

    #[test]
    fn identical_masks_score_zero() {
        let m = mask_from(&["1100", "0022", "0000", "3330"]);
        let cfg = BettiConfig { window: 2, stride: 1, connectivity: Connectivity::Eight };
        assert_eq!(betti_error(&m, &m, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn single_gap_whole_image_window() {
        let gt = mask_from(&["0000000000000000", "1111111111111111", "0000000000000000"]);
        let pred = mask_from(&["0000000000000000", "1111111011111111", "0000000000000000"]);
        let cfg = BettiConfig::default();
        assert_eq!(betti_error(&pred, &gt, &cfg).unwrap(), 1.0);
    }

    #[test]
    fn relabeling_foreground_is_invisible() {
        let a = mask_from(&["1100", "0022", "0000", "3330"]);
        let b = mask_from(&["2200", "0033", "0000", "1110"]);
        let cfg = BettiConfig { window: 2, stride: 1, connectivity: Connectivity::Four };
        assert_eq!(betti_error(&a, &b, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn stride_larger_than_window_rejected() {
        let m = mask_from(&["00", "00"]);
        let cfg = BettiConfig { window: 4, stride: 8, connectivity: Connectivity::Eight };
        assert!(betti_error(&m, &m, &cfg).is_err());
    }
}
