use serde::{Deserialize, Serialize};

/// Pixel adjacency used for component labeling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Four,
    Eight,
}

impl TryFrom<u8> for Connectivity {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            other => Err(format!("connectivity must be 4 or 8, got {other}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Four => 4,
            Connectivity::Eight => 8,
        }
    }
}

impl Connectivity {
    /// Neighbors already visited in a row-major raster scan.
    fn backward_offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(-1, 0), (0, -1)],
            Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1)],
        }
    }

    pub fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(-1, 0), (0, -1), (0, 1), (1, 0)],
            Connectivity::Eight => &[
                (-1, -1),
                (-1, 0),
                (-1, 1),
                (0, -1),
                (0, 1),
                (1, -1),
                (1, 0),
                (1, 1),
            ],
        }
    }
}

struct DisjointSet {
    parent: Vec<u32>,
}

impl DisjointSet {
    fn new() -> Self {
        Self { parent: Vec::new() }
    }

    fn make(&mut self) -> u32 {
        let id = self.parent.len() as u32;
        self.parent.push(id);
        id
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let p = self.parent[x as usize];
            self.parent[x as usize] = self.parent[p as usize];
            x = p;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // keep the smaller root so final labels follow scan order
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi as usize] = lo;
        }
    }
}

/// Component labeling result: `labels[i] == 0` for background, otherwise
/// `1..=count` numbered in order of first appearance in a raster scan.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Components {
    pub count: usize,
    pub labels: Vec<u32>,
}

impl Components {
    /// Pixel count per component, indexed by `label - 1`.
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.count];
        for &l in &self.labels {
            if l > 0 {
                sizes[l as usize - 1] += 1;
            }
        }
        sizes
    }
}

/// Two-pass union-find labeling of a binary grid.
pub fn connected_components(
    mask: &[bool],
    height: usize,
    width: usize,
    connectivity: Connectivity,
) -> Components {
    assert_eq!(mask.len(), height * width);
    let mut provisional = vec![u32::MAX; mask.len()];
    let mut sets = DisjointSet::new();
    for r in 0..height {
        for c in 0..width {
            let i = r * width + c;
            if !mask[i] {
                continue;
            }
            let mut assigned: Option<u32> = None;
            for &(dr, dc) in connectivity.backward_offsets() {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nc < 0 || nc >= width as isize {
                    continue;
                }
                let n = nr as usize * width + nc as usize;
                if !mask[n] {
                    continue;
                }
                let l = provisional[n];
                match assigned {
                    None => assigned = Some(l),
                    Some(a) => sets.union(a, l),
                }
            }
            provisional[i] = assigned.unwrap_or_else(|| sets.make());
        }
    }
    let mut remap = vec![0u32; sets.parent.len()];
    let mut count = 0u32;
    let labels = provisional
        .iter()
        .map(|&p| {
            if p == u32::MAX {
                return 0;
            }
            let root = sets.find(p) as usize;
            if remap[root] == 0 {
                count += 1;
                remap[root] = count;
            }
            remap[root]
        })
        .collect();
    Components {
        count: count as usize,
        labels,
    }
}

/// Number of foreground components (zeroth Betti number).
pub fn count_components(mask: &[bool], height: usize, width: usize, connectivity: Connectivity) -> usize {
    connected_components(mask, height, width, connectivity).count
}
