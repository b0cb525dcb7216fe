//! Exact nearest-neighbour queries over a uniform grid.

use crate::error::{arg_err, Result};
use crate::real::{self, lit, Real, Vec3};

const MAX_CELLS_PER_AXIS: usize = 256;

#[derive(Debug, Clone)]
pub struct PointGrid<'a, T> {
    points: &'a [Vec3<T>],
    origin: Vec3<T>,
    cell: T,
    dims: [usize; 3],
    starts: Vec<u32>,
    items: Vec<u32>,
}

impl<'a, T: Real> PointGrid<'a, T> {
    pub fn new(points: &'a [Vec3<T>]) -> Result<Self> {
        if points.is_empty() {
            return Err(arg_err!("nearest-neighbour grid needs at least one point"));
        }
        if points.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(arg_err!("point set contains non-finite coordinates"));
        }
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let mut ext: Vec<f64> = (0..3).map(|a| real::to_f64(hi[a] - lo[a])).collect();
        ext.sort_by(|a, b| b.total_cmp(a));
        let n = points.len() as f64;
        // Aim for about two points per occupied cell along the populated axes.
        let cell = if ext[2] > 0.0 {
            (2.0 * ext[0] * ext[1] * ext[2] / n).cbrt()
        } else if ext[1] > 0.0 {
            (2.0 * ext[0] * ext[1] / n).sqrt()
        } else if ext[0] > 0.0 {
            2.0 * ext[0] / n
        } else {
            1.0
        };
        let cell = cell.max(ext[0] / MAX_CELLS_PER_AXIS as f64);
        let cell: T = lit(cell);
        let dims: [usize; 3] = std::array::from_fn(|a| {
            let k = real::to_f64((hi[a] - lo[a]) / cell).floor() as usize + 1;
            k.clamp(1, MAX_CELLS_PER_AXIS)
        });
        let mut grid = PointGrid {
            points,
            origin: lo,
            cell,
            dims,
            starts: Vec::new(),
            items: Vec::new(),
        };
        let ncell = dims[0] * dims[1] * dims[2];
        let mut counts = vec![0u32; ncell + 1];
        let ids: Vec<usize> = points.iter().map(|p| grid.flat(grid.cell_of(*p))).collect();
        for &c in &ids {
            counts[c + 1] += 1;
        }
        for i in 0..ncell {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut items = vec![0u32; points.len()];
        for (i, &c) in ids.iter().enumerate() {
            items[fill[c] as usize] = i as u32;
            fill[c] += 1;
        }
        grid.starts = counts;
        grid.items = items;
        Ok(grid)
    }

    fn cell_of(&self, p: Vec3<T>) -> [usize; 3] {
        std::array::from_fn(|a| {
            let f = real::to_f64((p[a] - self.origin[a]) / self.cell).floor();
            (f.max(0.0) as usize).min(self.dims[a] - 1)
        })
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]
    }

    fn scan_cell(&self, c: [usize; 3], q: Vec3<T>, best: &mut (T, usize)) {
        let f = self.flat(c);
        for &i in &self.items[self.starts[f] as usize..self.starts[f + 1] as usize] {
            let i = i as usize;
            let d = real::sub(self.points[i], q);
            let d2 = real::dot(d, d);
            if d2 < best.0 || (d2 == best.0 && i < best.1) {
                *best = (d2, i);
            }
        }
    }

    /// Index of the nearest point and the squared distance to it; ties go to
    /// the lower index.
    pub fn nearest(&self, q: Vec3<T>) -> (usize, T) {
        let c = self.cell_of(q);
        let mut best = (T::infinity(), usize::MAX);
        let max_r = *self.dims.iter().max().expect("three axes");
        for r in 0..=max_r {
            let lo: [isize; 3] = std::array::from_fn(|a| c[a] as isize - r as isize);
            let hi: [isize; 3] = std::array::from_fn(|a| c[a] as isize + r as isize);
            for z in lo[2].max(0)..=hi[2].min(self.dims[2] as isize - 1) {
                for y in lo[1].max(0)..=hi[1].min(self.dims[1] as isize - 1) {
                    let on_shell_yz = z == lo[2] || z == hi[2] || y == lo[1] || y == hi[1];
                    let xs: Vec<isize> = if on_shell_yz {
                        (lo[0].max(0)..=hi[0].min(self.dims[0] as isize - 1)).collect()
                    } else {
                        [lo[0], hi[0]]
                            .into_iter()
                            .filter(|x| *x >= 0 && *x < self.dims[0] as isize)
                            .collect()
                    };
                    for x in xs {
                        self.scan_cell([x as usize, y as usize, z as usize], q, &mut best);
                    }
                }
            }
            // Every unvisited cell lies at least `r` cells away from `q`.
            let bound = self.cell * lit(r as f64);
            if best.1 != usize::MAX && best.0 <= bound * bound {
                break;
            }
        }
        (best.1, best.0)
    }
}
