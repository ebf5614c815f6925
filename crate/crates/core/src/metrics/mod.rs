//! Evaluation: local Betti error, centerline Frechet distance and the IoU family.

mod betti;
mod components;
mod curve;
mod frechet;
mod iou;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use betti::{betti_error, window_starts, BettiConfig};
pub use components::{connected_components, count_components, Components, Connectivity};
pub use curve::{extract_curve, skeletonize, Curve, ExtractedCurve};
pub use frechet::{discrete_frechet, frechet_distance};
pub use iou::{iou_family, IouCounts, IouFamily};

use crate::error::{Error, Result};
use crate::types::{ClassKind, SegmentationMask};

/// Aggregate scores for one evaluation run. IoU values are fractions in
/// `[0, 1]`; the table rendering scales them by 100.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub num_images: usize,
    /// Mean over (image, curvilinear class) pairs with at least one curve.
    pub frechet: f64,
    pub frechet_pairs: usize,
    /// Mean share of class pixels in the component each curve was traced from.
    pub frechet_coverage: f64,
    /// Mean over images of the per-image window-averaged Betti error.
    pub betti_error: f64,
    pub iou: Option<f64>,
    pub miou: Option<f64>,
    pub c_iou: Option<f64>,
    pub cm_iou: Option<f64>,
    pub v_iou: Option<f64>,
    pub vm_iou: Option<f64>,
    pub betti_window: usize,
    pub betti_stride: usize,
    pub betti_connectivity: u8,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "num_images,frechet,frechet_pairs,frechet_coverage,betti_error,iou,miou,c_iou,cm_iou,v_iou,vm_iou,betti_window,betti_stride,betti_connectivity";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{:.4}", 100.0 * x)).unwrap_or_default();
        format!(
            "{},{:.6},{},{:.6},{:.6},{},{},{},{},{},{},{},{},{}",
            self.num_images,
            self.frechet,
            self.frechet_pairs,
            self.frechet_coverage,
            self.betti_error,
            opt(self.iou),
            opt(self.miou),
            opt(self.c_iou),
            opt(self.cm_iou),
            opt(self.v_iou),
            opt(self.vm_iou),
            self.betti_window,
            self.betti_stride,
            self.betti_connectivity,
        )
    }

    pub fn table(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{:.2}", 100.0 * x)).unwrap_or_else(|| "-".into());
        let mut s = String::new();
        s.push_str(&format!("images        {}\n", self.num_images));
        s.push_str(&format!(
            "Frechet       {:.4}  ({} curve pairs, coverage {:.3})\n",
            self.frechet, self.frechet_pairs, self.frechet_coverage
        ));
        s.push_str(&format!(
            "Betti error   {:.4}  (window {}, stride {}, {}-connected)\n",
            self.betti_error, self.betti_window, self.betti_stride, self.betti_connectivity
        ));
        s.push_str(&format!("IoU           {}\n", opt(self.iou)));
        s.push_str(&format!("mIoU          {}\n", opt(self.miou)));
        s.push_str(&format!("cIoU / cmIoU  {} / {}\n", opt(self.c_iou), opt(self.cm_iou)));
        s.push_str(&format!("vIoU / vmIoU  {} / {}\n", opt(self.v_iou), opt(self.vm_iou)));
        s
    }
}

struct ImageScores {
    betti: f64,
    iou: IouCounts,
    frechet: Vec<f64>,
    coverage: Vec<f64>,
}

fn score_image(pred: &SegmentationMask, gt: &SegmentationMask, cfg: &BettiConfig) -> Result<ImageScores> {
    iou::check_pair(pred, gt)?;
    let betti = betti_error(pred, gt, cfg)?;
    let iou = IouCounts::from_masks(pred, gt)?;
    let diagonal = ((gt.height().pow(2) + gt.width().pow(2)) as f64).sqrt();
    let mut frechet = Vec::new();
    let mut coverage = Vec::new();
    for (k, kind) in gt.class_kinds().iter().enumerate() {
        if *kind != ClassKind::Curvilinear {
            continue;
        }
        let id = k as u8 + 1;
        match (extract_curve(pred, id), extract_curve(gt, id)) {
            (Some(p), Some(g)) => {
                frechet.push(frechet_distance(&p.curve, &g.curve));
                coverage.push(p.coverage);
                coverage.push(g.coverage);
            }
            (None, None) => {}
            // the structure exists in only one of the masks
            _ => frechet.push(diagonal),
        }
    }
    Ok(ImageScores {
        betti,
        iou,
        frechet,
        coverage,
    })
}

/// Scores aligned prediction / ground-truth pairs.
pub fn evaluate(
    preds: &[SegmentationMask],
    gts: &[SegmentationMask],
    cfg: &BettiConfig,
) -> Result<MetricReport> {
    if preds.len() != gts.len() {
        return Err(Error::shape(
            format!("{} ground-truth masks", gts.len()),
            format!("{} predictions", preds.len()),
        ));
    }
    if gts.is_empty() {
        return Err(Error::InvalidValue("nothing to evaluate".into()));
    }
    let kinds = gts[0].class_kinds().to_vec();
    if let Some(g) = gts.iter().find(|g| g.class_kinds() != kinds.as_slice()) {
        return Err(Error::shape(format!("{kinds:?}"), format!("{:?}", g.class_kinds())));
    }
    let scores: Vec<ImageScores> = preds
        .par_iter()
        .zip(gts)
        .map(|(p, g)| score_image(p, g, cfg))
        .collect::<Result<_>>()?;
    let mut counts = IouCounts::new(kinds.len());
    let mut frechet = Vec::new();
    let mut coverage = Vec::new();
    let mut betti = 0.0;
    for s in &scores {
        counts.merge(&s.iou);
        frechet.extend_from_slice(&s.frechet);
        coverage.extend_from_slice(&s.coverage);
        betti += s.betti;
    }
    let mean = |v: &[f64], empty: f64| {
        if v.is_empty() {
            empty
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let fam = counts.summarize(&kinds);
    Ok(MetricReport {
        num_images: gts.len(),
        frechet: mean(&frechet, 0.0),
        frechet_pairs: frechet.len(),
        frechet_coverage: mean(&coverage, 1.0),
        betti_error: betti / gts.len() as f64,
        iou: fam.iou,
        miou: fam.miou,
        c_iou: fam.c_iou,
        cm_iou: fam.cm_iou,
        v_iou: fam.v_iou,
        vm_iou: fam.vm_iou,
        betti_window: cfg.window,
        betti_stride: cfg.stride,
        betti_connectivity: cfg.connectivity.into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kinds() -> Vec<ClassKind> {
        vec![ClassKind::Curvilinear, ClassKind::Volumetric]
    }

    fn sample(shift: usize) -> SegmentationMask {
        let (h, w) = (32, 32);
        let labels = (0..h * w)
            .map(|i| {
                let (r, c) = (i / w, i % w);
                if r == 8 + shift && (4..28).contains(&c) {
                    1
                } else if (20..26).contains(&r) && (10..16).contains(&c) {
                    2
                } else {
                    0
                }
            })
            .collect();
        SegmentationMask::new(h, w, labels, kinds()).unwrap()
    }

    #[test]
    fn perfect_predictions() {
        let gts = vec![sample(0), sample(3)];
        let r = evaluate(&gts, &gts, &BettiConfig::default()).unwrap();
        assert_eq!(r.frechet, 0.0);
        assert_eq!(r.betti_error, 0.0);
        for v in [r.iou, r.miou, r.c_iou, r.cm_iou, r.v_iou, r.vm_iou] {
            assert_eq!(v, Some(1.0));
        }
        assert_eq!(r.frechet_pairs, 2);
    }

    #[test]
    fn single_image_matches_per_image_metrics() {
        let (p, g) = (sample(2), sample(0));
        let cfg = BettiConfig { window: 16, stride: 8, connectivity: Connectivity::Eight };
        let r = evaluate(std::slice::from_ref(&p), std::slice::from_ref(&g), &cfg).unwrap();
        assert_eq!(r.betti_error, betti_error(&p, &g, &cfg).unwrap());
        assert_eq!(r.iou, iou_family(&p, &g).unwrap().iou);
        let fp = extract_curve(&p, 1).unwrap().curve;
        let fg = extract_curve(&g, 1).unwrap().curve;
        assert_eq!(r.frechet, frechet_distance(&fp, &fg));
        assert_eq!(r.frechet, 2.0);
    }

    #[test]
    fn missing_structure_gets_diagonal_penalty() {
        let g = sample(0);
        let labels = g.labels().iter().map(|&l| if l == 1 { 0 } else { l }).collect();
        let p = g.with_labels(labels).unwrap();
        let r = evaluate(&[p], &[g], &BettiConfig::default()).unwrap();
        assert!((r.frechet - (2.0f64 * 32.0 * 32.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn misaligned_sets_rejected() {
        assert!(evaluate(&[sample(0)], &[], &BettiConfig::default()).is_err());
    }

    #[test]
    fn csv_row_has_header_arity() {
        let r = evaluate(&[sample(0)], &[sample(1)], &BettiConfig::default()).unwrap();
        assert_eq!(
            r.csv_row().split(',').count(),
            MetricReport::CSV_HEADER.split(',').count()
        );
    }
}
