//! Voxel label grids, point-cloud voxelisation and occupancy pooling.

use std::collections::BTreeSet;

use crate::error::{Result, SscError};
use crate::geometry::{flat_index, unflatten, world_to_voxel, Point3, Resolution, VolumeSpec};
use crate::scalar::Real;

/// Label of free space.
pub const EMPTY: u8 = 0;
/// Label of unobserved voxels, excluded from losses and metrics.
pub const IGNORE: u8 = 255;

/// Dense `H x W x Z` grid of labels in row-major `(i, j, k)` order, carrying
/// the metric placement of its cells.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid<L> {
    dims: [usize; 3],
    origin: [f64; 3],
    voxel_size: f64,
    labels: Vec<L>,
}

/// Binary occupancy grid (`M_in`, `M_out` and pooled targets).
pub type OccupancyGrid = VoxelGrid<bool>;

/// Semantic grid with class ids `0..=M` plus [`IGNORE`].
pub type LabelGrid = VoxelGrid<u8>;

impl<L: Copy + PartialEq> VoxelGrid<L> {
    pub fn new(dims: [usize; 3], origin: [f64; 3], voxel_size: f64, labels: Vec<L>) -> Result<Self> {
        if labels.len() != dims.iter().product::<usize>() {
            return Err(SscError::invalid(format!(
                "grid {dims:?} needs {} labels, got {}",
                dims.iter().product::<usize>(),
                labels.len()
            )));
        }
        Ok(VoxelGrid {
            dims,
            origin,
            voxel_size,
            labels,
        })
    }

    pub fn filled<T: Real>(spec: &VolumeSpec<T>, res: Resolution, value: L) -> Self {
        let dims = spec.dims_at(res);
        VoxelGrid {
            dims,
            origin: spec.origin.map(Real::as_f64),
            voxel_size: spec.cell_size(res).as_f64(),
            labels: vec![value; dims.iter().product()],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn labels(&self) -> &[L] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [L] {
        &mut self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, index: [usize; 3]) -> L {
        self.labels[flat_index(index, self.dims)]
    }

    pub fn set(&mut self, index: [usize; 3], value: L) {
        let f = flat_index(index, self.dims);
        self.labels[f] = value;
    }

    /// Whether this grid has the dims of `spec` at `res`.
    pub fn matches<T: Real>(&self, spec: &VolumeSpec<T>, res: Resolution) -> bool {
        self.dims == spec.dims_at(res)
    }

    pub fn map<M: Copy + PartialEq>(&self, f: impl Fn(L) -> M) -> VoxelGrid<M> {
        VoxelGrid {
            dims: self.dims,
            origin: self.origin,
            voxel_size: self.voxel_size,
            labels: self.labels.iter().map(|&l| f(l)).collect(),
        }
    }
}

impl OccupancyGrid {
    pub fn popcount(&self) -> usize {
        self.labels.iter().filter(|&&b| b).count()
    }

    /// Flat indices of set cells in row-major scan order.
    pub fn set_indices(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    pub fn as_reals<T: Real>(&self) -> Vec<T> {
        self.labels.iter().map(|&b| if b { T::one() } else { T::zero() }).collect()
    }
}

impl LabelGrid {
    /// Occupancy of a semantic grid: any class other than empty or ignore.
    pub fn occupancy(&self) -> OccupancyGrid {
        self.map(|l| l != EMPTY && l != IGNORE)
    }
}

fn check_spec<L: Copy + PartialEq, T: Real>(grid: &VoxelGrid<L>, spec: &VolumeSpec<T>, res: Resolution) -> Result<()> {
    if grid.matches(spec, res) {
        Ok(())
    } else {
        Err(SscError::Shape {
            name: "voxel grid".into(),
            expected: spec.dims_at(res).to_vec(),
            found: grid.dims.to_vec(),
        })
    }
}

/// Marks every cell of `res` containing at least one point.
pub fn voxelize_at<T: Real>(points: &[Point3<T>], spec: &VolumeSpec<T>, res: Resolution) -> OccupancyGrid {
    let mut grid = OccupancyGrid::filled(spec, res, false);
    for &p in points {
        if let Some(idx) = world_to_voxel(p, spec, res) {
            grid.set(idx, true);
        }
    }
    grid
}

/// Output-resolution occupancy `M_in` from a point cloud. Points outside the
/// volume are dropped.
pub fn voxelize_points<T: Real>(points: &[Point3<T>], spec: &VolumeSpec<T>) -> OccupancyGrid {
    voxelize_at(points, spec, Resolution::Output)
}

/// Max-pools an output-resolution grid down to query resolution.
pub fn downsample_occupancy<T: Real>(grid: &OccupancyGrid, spec: &VolumeSpec<T>) -> Result<OccupancyGrid> {
    check_spec(grid, spec, Resolution::Output)?;
    let f = spec.factor();
    let mut out = OccupancyGrid::filled(spec, Resolution::Query, false);
    for (flat, &b) in grid.labels.iter().enumerate() {
        if b {
            let [i, j, k] = unflatten(flat, grid.dims);
            out.set([i / f, j / f, k / f], true);
        }
    }
    Ok(out)
}

/// Distinct cells hit by a point set; used to cross-check voxelisation.
pub fn occupied_cells<T: Real>(points: &[Point3<T>], spec: &VolumeSpec<T>, res: Resolution) -> BTreeSet<[usize; 3]> {
    points.iter().filter_map(|&p| world_to_voxel(p, spec, res)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::voxel_center;
    use crate::numerics::Rng;

    fn spec() -> VolumeSpec<f64> {
        VolumeSpec::new([0.0, -1.6, -0.4], 0.2, [16, 16, 4], [8, 8, 2]).unwrap()
    }

    #[test]
    fn empty_points_empty_grid() {
        let g = voxelize_points::<f64>(&[], &spec());
        assert_eq!(g.popcount(), 0);
        assert_eq!(g.dims(), [16, 16, 4]);
    }

    #[test]
    fn single_point_at_center() {
        let s = spec();
        let c = voxel_center([3, 5, 1], &s, Resolution::Output).unwrap();
        let g = voxelize_points(&[c], &s);
        assert_eq!(g.set_indices(), vec![flat_index([3, 5, 1], s.dims)]);
    }

    #[test]
    fn popcount_matches_set_oracle() {
        let s = spec();
        let mut rng = Rng::new(11);
        let pts: Vec<_> = (0..10_000)
            .map(|_| [rng.uniform(-0.5, 3.7), rng.uniform(-2.0, 2.0), rng.uniform(-0.6, 0.6)])
            .collect();
        let g = voxelize_points(&pts, &s);
        let oracle = occupied_cells(&pts, &s, Resolution::Output);
        assert_eq!(g.popcount(), oracle.len());
        for idx in oracle {
            assert!(g.get(idx));
        }
    }

    #[test]
    fn downsample_single_bit() {
        let s = spec();
        let mut g = OccupancyGrid::filled(&s, Resolution::Output, false);
        g.set([0, 0, 0], true);
        let d = downsample_occupancy(&g, &s).unwrap();
        assert_eq!(d.set_indices(), vec![0]);
        let z = downsample_occupancy(&OccupancyGrid::filled(&s, Resolution::Output, false), &s).unwrap();
        assert_eq!(z.popcount(), 0);
    }

    #[test]
    fn downsample_matches_block_reduction() {
        let s = spec();
        let mut rng = Rng::new(5);
        let mut g = OccupancyGrid::filled(&s, Resolution::Output, false);
        g.labels_mut().iter_mut().for_each(|b| *b = rng.bernoulli(0.05));
        let d = downsample_occupancy(&g, &s).unwrap();
        for qi in 0..8 {
            for qj in 0..8 {
                for qk in 0..2 {
                    let mut any = false;
                    for di in 0..2 {
                        for dj in 0..2 {
                            for dk in 0..2 {
                                any |= g.get([2 * qi + di, 2 * qj + dj, 2 * qk + dk]);
                            }
                        }
                    }
                    assert_eq!(d.get([qi, qj, qk]), any);
                }
            }
        }
    }

    #[test]
    fn downsample_rejects_wrong_resolution() {
        let s = spec();
        let q = OccupancyGrid::filled(&s, Resolution::Query, false);
        assert!(downsample_occupancy(&q, &s).is_err());
    }

    #[test]
    fn occupancy_skips_empty_and_ignore() {
        let g = LabelGrid::new([1, 1, 4], [0.0; 3], 1.0, vec![0, 1, 255, 3]).unwrap();
        assert_eq!(g.occupancy().labels(), &[false, true, false, true]);
    }
}
