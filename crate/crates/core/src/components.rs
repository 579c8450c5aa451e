//! 8-connected component labeling of binary masks (two-pass union-find).

use crate::bbox::BoxXYWH;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Component {
    /// Pixel count.
    pub size: usize,
    /// First pixel of the component in raster order.
    pub first: (usize, usize),
    pub min_row: usize,
    pub max_row: usize,
    pub min_col: usize,
    pub max_col: usize,
}

impl Component {
    /// Tight box in pixel units: a pixel at `(r, c)` covers `[c, c+1) x [r, r+1)`.
    pub fn bounding_box(&self) -> BoxXYWH {
        BoxXYWH::new(
            self.min_col as f64,
            self.min_row as f64,
            (self.max_col - self.min_col + 1) as f64,
            (self.max_row - self.min_row + 1) as f64,
        )
    }
}

struct DisjointSet {
    parent: Vec<u32>,
}

impl DisjointSet {
    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let up = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = up;
            x = up;
        }
        x
    }

    /// Keeps the smaller label as the root so roots follow raster order.
    fn union(&mut self, a: u32, b: u32) -> u32 {
        let (ra, rb) = (self.find(a), self.find(b));
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.parent[hi as usize] = lo;
        lo
    }
}

/// Labels every `true` pixel of a row-major `rows x cols` mask. Components
/// are returned in order of their first pixel in raster order.
pub fn connected_components(mask: &[bool], rows: usize, cols: usize) -> Vec<Component> {
    assert_eq!(mask.len(), rows * cols, "mask is not {rows}x{cols}");
    const NONE: u32 = u32::MAX;
    let mut labels = vec![NONE; mask.len()];
    let mut sets = DisjointSet { parent: Vec::new() };

    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            if !mask[i] {
                continue;
            }
            // already-visited neighbors: W, NW, N, NE
            let mut label = NONE;
            let mut visit = |rr: usize, cc: usize, label: &mut u32| {
                let n = labels[rr * cols + cc];
                if n != NONE {
                    *label = if *label == NONE {
                        sets.find(n)
                    } else {
                        sets.union(*label, n)
                    };
                }
            };
            if c > 0 {
                visit(r, c - 1, &mut label);
            }
            if r > 0 {
                if c > 0 {
                    visit(r - 1, c - 1, &mut label);
                }
                visit(r - 1, c, &mut label);
                if c + 1 < cols {
                    visit(r - 1, c + 1, &mut label);
                }
            }
            if label == NONE {
                label = sets.parent.len() as u32;
                sets.parent.push(label);
            }
            labels[i] = label;
        }
    }

    let mut slot = vec![usize::MAX; sets.parent.len()];
    let mut out: Vec<Component> = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let l = labels[r * cols + c];
            if l == NONE {
                continue;
            }
            let root = sets.find(l) as usize;
            if slot[root] == usize::MAX {
                slot[root] = out.len();
                out.push(Component {
                    size: 0,
                    first: (r, c),
                    min_row: r,
                    max_row: r,
                    min_col: c,
                    max_col: c,
                });
            }
            let comp = &mut out[slot[root]];
            comp.size += 1;
            comp.max_row = r;
            comp.min_col = comp.min_col.min(c);
            comp.max_col = comp.max_col.max(c);
        }
    }
    out
}

/// Largest component; ties go to the one whose first raster pixel comes first
/// (smallest row, then smallest column).
pub fn largest_component(mask: &[bool], rows: usize, cols: usize) -> Option<Component> {
    let mut best: Option<Component> = None;
    for comp in connected_components(mask, rows, cols) {
        if best.is_none_or(|b| comp.size > b.size) {
            best = Some(comp);
        }
    }
    best
}
