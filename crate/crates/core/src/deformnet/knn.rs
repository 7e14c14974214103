//! Exact k-nearest neighbors over a uniform grid.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major `N×K` neighbor indices, nearest first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnnTable {
    pub k: usize,
    pub idx: Vec<usize>,
}

impl KnnTable {
    pub fn len(&self) -> usize {
        self.idx.len().checked_div(self.k).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.idx.is_empty()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.idx[i * self.k..(i + 1) * self.k]
    }
}

#[inline]
fn dist2<T: Scalar>(a: &[T; 3], b: &[T; 3]) -> T {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

fn by_distance<T: Scalar>(a: &(T, usize), b: &(T, usize)) -> std::cmp::Ordering {
    a.0.partial_cmp(&b.0)
        .unwrap_or(std::cmp::Ordering::Equal)
        .then(a.1.cmp(&b.1))
}

fn check_k(n: usize, k: usize) -> Result<()> {
    if k == 0 || k >= n {
        return Err(Error::KTooLarge {
            k,
            available: n.saturating_sub(1),
        });
    }
    Ok(())
}

/// O(N²) reference: every pair distance, sorted by `(distance, index)`.
pub fn knn_brute_force<T: Scalar>(points: &[[T; 3]], k: usize) -> Result<KnnTable> {
    check_k(points.len(), k)?;
    let idx = points
        .iter()
        .enumerate()
        .flat_map(|(i, p)| {
            let mut cand: Vec<(T, usize)> = points
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, q)| (dist2(p, q), j))
                .collect();
            cand.sort_by(by_distance);
            cand.into_iter().take(k).map(|(_, j)| j).collect::<Vec<_>>()
        })
        .collect();
    Ok(KnnTable { k, idx })
}

struct Grid {
    lo: [f64; 3],
    cell: f64,
    dims: [usize; 3],
    offsets: Vec<usize>,
    members: Vec<usize>,
}

impl Grid {
    fn build<T: Scalar>(points: &[[T; 3]]) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for k in 0..3 {
                let v = p[k].to_f64_lossy();
                lo[k] = lo[k].min(v);
                hi[k] = hi[k].max(v);
            }
        }
        let side = (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max);
        // about two points per occupied cell for a volume-filling set
        let per_axis = ((points.len() as f64 / 2.0).cbrt().ceil() as usize).max(1);
        let cell = if side > 0.0 { side / per_axis as f64 } else { 1.0 };
        let dims = [0, 1, 2].map(|k| (((hi[k] - lo[k]) / cell).floor() as usize + 1).max(1));
        let mut grid = Self {
            lo,
            cell,
            dims,
            offsets: Vec::new(),
            members: Vec::new(),
        };
        let ncell = dims[0] * dims[1] * dims[2];
        let ids: Vec<usize> = points.iter().map(|p| grid.flat(grid.coords(p))).collect();
        let mut counts = vec![0usize; ncell + 1];
        for &c in &ids {
            counts[c + 1] += 1;
        }
        for c in 0..ncell {
            counts[c + 1] += counts[c];
        }
        let mut fill = counts.clone();
        let mut members = vec![0usize; points.len()];
        for (i, &c) in ids.iter().enumerate() {
            members[fill[c]] = i;
            fill[c] += 1;
        }
        grid.offsets = counts;
        grid.members = members;
        grid
    }

    fn coords<T: Scalar>(&self, p: &[T; 3]) -> [usize; 3] {
        [0, 1, 2].map(|k| {
            let c = ((p[k].to_f64_lossy() - self.lo[k]) / self.cell).floor();
            (c.max(0.0) as usize).min(self.dims[k] - 1)
        })
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        (c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]
    }

    fn cell_members(&self, c: [usize; 3]) -> &[usize] {
        let f = self.flat(c);
        &self.members[self.offsets[f]..self.offsets[f + 1]]
    }

    /// Calls `f` on every cell at Chebyshev distance exactly `r` from `c`.
    fn ring(&self, c: [usize; 3], r: usize, mut f: impl FnMut([usize; 3])) {
        let r = r as isize;
        let range = |k: usize| {
            let lo = (c[k] as isize - r).max(0);
            let hi = (c[k] as isize + r).min(self.dims[k] as isize - 1);
            lo..=hi
        };
        for x in range(0) {
            for y in range(1) {
                for z in range(2) {
                    let d = (x - c[0] as isize)
                        .abs()
                        .max((y - c[1] as isize).abs())
                        .max((z - c[2] as isize).abs());
                    if d == r {
                        f([x as usize, y as usize, z as usize]);
                    }
                }
            }
        }
    }
}

/// `K` nearest other points of every point, ascending distance, ties by
/// lower index.
pub fn knn<T: Scalar>(points: &[[T; 3]], k: usize) -> Result<KnnTable> {
    check_k(points.len(), k)?;
    let grid = Grid::build(points);
    let max_ring = grid.dims.iter().copied().max().unwrap_or(1);
    let rows: Vec<Vec<usize>> = (0..points.len())
        .into_par_iter()
        .map(|i| {
            let p = &points[i];
            let c = grid.coords(p);
            let mut best: Vec<(T, usize)> = Vec::with_capacity(4 * k);
            for r in 0..=max_ring {
                grid.ring(c, r, |cell| {
                    for &j in grid.cell_members(cell) {
                        if j != i {
                            best.push((dist2(p, &points[j]), j));
                        }
                    }
                });
                best.sort_by(by_distance);
                best.truncate(k);
                // anything unvisited lies at least r cells away
                let reach = r as f64 * grid.cell * (1.0 - 1e-9);
                if best.len() == k && best[k - 1].0.to_f64_lossy() < reach * reach {
                    break;
                }
            }
            best.into_iter().map(|(_, j)| j).collect()
        })
        .collect();
    Ok(KnnTable {
        k,
        idx: rows.concat(),
    })
}
