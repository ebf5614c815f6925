//! Mask-to-centerline conversion for curve metrics.

use std::collections::VecDeque;

use super::components::{connected_components, Connectivity};
use crate::error::{Error, Result};
use crate::types::SegmentationMask;

/// Ordered 8-connected pixel path, `(row, col)` per point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Curve {
    points: Vec<(usize, usize)>,
}

impl Curve {
    pub fn new(points: Vec<(usize, usize)>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidValue("curve needs at least one point".into()));
        }
        for pair in points.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if a.0.abs_diff(b.0) > 1 || a.1.abs_diff(b.1) > 1 {
                return Err(Error::InvalidValue(format!(
                    "curve points {a:?} and {b:?} are not adjacent"
                )));
            }
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[(usize, usize)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn as_coords(&self) -> Vec<[f64; 2]> {
        self.points.iter().map(|&(r, c)| [r as f64, c as f64]).collect()
    }
}

/// Guo-Hall thinning of a binary grid. Connectivity of each 8-component is
/// preserved; the result is at most one pixel wide away from junctions.
pub fn skeletonize(mask: &[bool], height: usize, width: usize) -> Vec<bool> {
    assert_eq!(mask.len(), height * width);
    let mut img = mask.to_vec();
    let at = |img: &[bool], r: isize, c: isize| -> bool {
        r >= 0 && c >= 0 && (r as usize) < height && (c as usize) < width && img[r as usize * width + c as usize]
    };
    loop {
        let mut changed = false;
        for pass in 0..2 {
            let mut remove = Vec::new();
            for r in 0..height as isize {
                for c in 0..width as isize {
                    if !img[r as usize * width + c as usize] {
                        continue;
                    }
                    // p2..p9 clockwise from north
                    let [p2, p3, p4, p5, p6, p7, p8, p9] = [
                        at(&img, r - 1, c),
                        at(&img, r - 1, c + 1),
                        at(&img, r, c + 1),
                        at(&img, r + 1, c + 1),
                        at(&img, r + 1, c),
                        at(&img, r + 1, c - 1),
                        at(&img, r, c - 1),
                        at(&img, r - 1, c - 1),
                    ];
                    let crossings = usize::from(!p2 && (p3 || p4))
                        + usize::from(!p4 && (p5 || p6))
                        + usize::from(!p6 && (p7 || p8))
                        + usize::from(!p8 && (p9 || p2));
                    if crossings != 1 {
                        continue;
                    }
                    let n1 = usize::from(p9 || p2)
                        + usize::from(p3 || p4)
                        + usize::from(p5 || p6)
                        + usize::from(p7 || p8);
                    let n2 = usize::from(p2 || p3)
                        + usize::from(p4 || p5)
                        + usize::from(p6 || p7)
                        + usize::from(p8 || p9);
                    if !(2..=3).contains(&n1.min(n2)) {
                        continue;
                    }
                    let blocked = if pass == 0 {
                        (p6 || p7 || !p9) && p8
                    } else {
                        (p2 || p3 || !p5) && p4
                    };
                    if !blocked {
                        remove.push(r as usize * width + c as usize);
                    }
                }
            }
            changed |= !remove.is_empty();
            for i in remove {
                img[i] = false;
            }
        }
        if !changed {
            return img;
        }
    }
}

/// BFS over 8-adjacent pixels of `set` from `start`; returns the farthest
/// pixel (first reached on ties) and the parent links.
fn bfs_farthest(set: &[bool], width: usize, height: usize, start: usize) -> (usize, Vec<usize>) {
    let mut parent = vec![usize::MAX; set.len()];
    let mut dist = vec![usize::MAX; set.len()];
    let mut queue = VecDeque::from([start]);
    dist[start] = 0;
    parent[start] = start;
    let mut far = start;
    while let Some(i) = queue.pop_front() {
        if dist[i] > dist[far] {
            far = i;
        }
        let (r, c) = ((i / width) as isize, (i % width) as isize);
        for &(dr, dc) in Connectivity::Eight.offsets() {
            let (nr, nc) = (r + dr, c + dc);
            if nr < 0 || nc < 0 || nr >= height as isize || nc >= width as isize {
                continue;
            }
            let n = nr as usize * width + nc as usize;
            if set[n] && dist[n] == usize::MAX {
                dist[n] = dist[i] + 1;
                parent[n] = i;
                queue.push_back(n);
            }
        }
    }
    (far, parent)
}

/// Result of turning one class of a mask into a curve.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractedCurve {
    pub curve: Curve,
    /// Share of the class's pixels lying in the component the curve came from.
    pub coverage: f64,
}

/// Centerline of the largest connected component of `class_id`, ordered
/// endpoint to endpoint; `None` when the class is absent.
///
/// The skeleton is traced by a double breadth-first search: the pixel
/// farthest from an arbitrary start is one endpoint, the pixel farthest from
/// that endpoint is the other.
pub fn extract_curve(mask: &SegmentationMask, class_id: u8) -> Option<ExtractedCurve> {
    let (h, w) = (mask.height(), mask.width());
    let support = mask.class_support(class_id);
    let total = support.iter().filter(|&&b| b).count();
    if total == 0 {
        return None;
    }
    let cc = connected_components(&support, h, w, Connectivity::Eight);
    let sizes = cc.sizes();
    // largest component, earliest label on ties
    let (best, &size) = sizes
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .expect("non-empty class");
    let label = best as u32 + 1;
    let component: Vec<bool> = cc.labels.iter().map(|&l| l == label).collect();
    let skel = skeletonize(&component, h, w);
    let start = skel.iter().position(|&b| b).expect("thinning keeps a pixel");
    let (u, _) = bfs_farthest(&skel, w, h, start);
    let (v, parent) = bfs_farthest(&skel, w, h, u);
    let mut path = vec![v];
    let mut cur = v;
    while cur != u {
        cur = parent[cur];
        path.push(cur);
    }
    path.reverse();
    let points = path.into_iter().map(|i| (i / w, i % w)).collect();
    Some(ExtractedCurve {
        curve: Curve::new(points).expect("bfs path is 8-connected"),
        coverage: size as f64 / total as f64,
    })
}
