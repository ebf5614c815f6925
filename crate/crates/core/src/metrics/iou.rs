use crate::error::{Error, Result};
use crate::types::{ClassKind, SegmentationMask};

/// Per-class intersection and union pixel counts, summable across images.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IouCounts {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
}

impl IouCounts {
    pub fn new(num_classes: usize) -> Self {
        Self {
            intersection: vec![0; num_classes],
            union: vec![0; num_classes],
        }
    }

    pub fn from_masks(pred: &SegmentationMask, gt: &SegmentationMask) -> Result<Self> {
        check_pair(pred, gt)?;
        let mut counts = Self::new(gt.num_classes());
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            for k in 1..=gt.num_classes() as u8 {
                let (ip, ig) = (p == k, g == k);
                if ip && ig {
                    counts.intersection[k as usize - 1] += 1;
                }
                if ip || ig {
                    counts.union[k as usize - 1] += 1;
                }
            }
        }
        Ok(counts)
    }

    pub fn merge(&mut self, other: &IouCounts) {
        for (a, b) in self.intersection.iter_mut().zip(&other.intersection) {
            *a += b;
        }
        for (a, b) in self.union.iter_mut().zip(&other.union) {
            *a += b;
        }
    }

    /// IoU of class `k` (1-based); `None` when the class never appears.
    pub fn class_iou(&self, k: usize) -> Option<f64> {
        let u = self.union[k - 1];
        (u > 0).then(|| self.intersection[k - 1] as f64 / u as f64)
    }

    fn pooled(&self, classes: &[usize]) -> Option<f64> {
        let i: u64 = classes.iter().map(|&k| self.intersection[k - 1]).sum();
        let u: u64 = classes.iter().map(|&k| self.union[k - 1]).sum();
        (u > 0).then(|| i as f64 / u as f64)
    }

    fn mean(&self, classes: &[usize]) -> Option<f64> {
        let vals: Vec<f64> = classes.iter().filter_map(|&k| self.class_iou(k)).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn summarize(&self, class_kinds: &[ClassKind]) -> IouFamily {
        let all: Vec<usize> = (1..=class_kinds.len()).collect();
        let of_kind = |kind| -> Vec<usize> {
            all.iter().copied().filter(|&k| class_kinds[k - 1] == kind).collect()
        };
        let curv = of_kind(ClassKind::Curvilinear);
        let vol = of_kind(ClassKind::Volumetric);
        IouFamily {
            iou: self.pooled(&all),
            miou: self.mean(&all),
            c_iou: self.pooled(&curv),
            cm_iou: self.mean(&curv),
            v_iou: self.pooled(&vol),
            vm_iou: self.mean(&vol),
        }
    }
}

/// IoU values in `[0, 1]`; `None` where no pixel of the relevant classes
/// appears in either mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IouFamily {
    /// Class-pooled: summed intersections over summed unions.
    pub iou: Option<f64>,
    pub miou: Option<f64>,
    pub c_iou: Option<f64>,
    pub cm_iou: Option<f64>,
    pub v_iou: Option<f64>,
    pub vm_iou: Option<f64>,
}

pub fn iou_family(pred: &SegmentationMask, gt: &SegmentationMask) -> Result<IouFamily> {
    Ok(IouCounts::from_masks(pred, gt)?.summarize(gt.class_kinds()))
}

pub(crate) fn check_pair(pred: &SegmentationMask, gt: &SegmentationMask) -> Result<()> {
    if !pred.same_shape(gt) {
        return Err(Error::shape(
            format!("{}x{}", gt.height(), gt.width()),
            format!("{}x{}", pred.height(), pred.width()),
        ));
    }
    if pred.num_classes() != gt.num_classes() {
        return Err(Error::shape(
            format!("{} classes", gt.num_classes()),
            format!("{} classes", pred.num_classes()),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strips(h: usize, w: usize, c0: usize, c1: usize) -> SegmentationMask {
        let labels = (0..h * w).map(|i| u8::from((c0..c1).contains(&(i % w)))).collect();
        SegmentationMask::new(h, w, labels, vec![ClassKind::Curvilinear]).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let kinds = vec![ClassKind::Curvilinear, ClassKind::Volumetric];
        let m = SegmentationMask::new(2, 3, vec![0, 1, 2, 2, 1, 0], kinds).unwrap();
        let f = iou_family(&m, &m).unwrap();
        for v in [f.iou, f.miou, f.c_iou, f.cm_iou, f.v_iou, f.vm_iou] {
            assert_eq!(v, Some(1.0));
        }
    }

    #[test]
    fn disjoint_is_zero() {
        let f = iou_family(&strips(4, 8, 0, 4), &strips(4, 8, 4, 8)).unwrap();
        assert_eq!(f.iou, Some(0.0));
    }

    #[test]
    fn half_overlap_is_one_third() {
        // A = 4x4 each, overlap 4x2
        let f = iou_family(&strips(4, 8, 0, 4), &strips(4, 8, 2, 6)).unwrap();
        assert!((f.iou.unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(f.v_iou, None);
    }

    #[test]
    fn absent_classes_excluded_from_mean() {
        let kinds = vec![ClassKind::Curvilinear; 3];
        let gt = SegmentationMask::new(1, 4, vec![1, 1, 0, 0], kinds.clone()).unwrap();
        let pred = SegmentationMask::new(1, 4, vec![1, 0, 0, 0], kinds).unwrap();
        let f = iou_family(&pred, &gt).unwrap();
        assert_eq!(f.miou, Some(0.5));
    }
}
