//! Distance between two voxel pairs.
//!
//! `d(jk, j'k') = min[ (d*(j,j') + d*(k,k'))/2 , (d*(j,k') + d*(k,j'))/2 ]`
//! with `d*` the Euclidean voxel distance. The two branches are the two ways
//! of lining up the members of the pairs.

use crate::error::{Error, Result};
use crate::model::{PairIndex, VoxelGrid};
use crate::scalar::Scalar;

/// Distance between the pairs `{j, k}` and `{j2, k2}` on `grid`.
pub fn pair_distance<T: Scalar>(grid: &VoxelGrid, j: usize, k: usize, j2: usize, k2: usize) -> Result<T> {
    for v in [j, k, j2, k2] {
        grid.check_index(v)?;
    }
    if j == k {
        return Err(Error::InvalidPair(j));
    }
    if j2 == k2 {
        return Err(Error::InvalidPair(j2));
    }
    let d = |a, b| T::of(grid.distance(a, b));
    Ok(min_branch(d(j, j2), d(k, k2), d(j, k2), d(k, j2)))
}

#[inline]
fn min_branch<T: Scalar>(jj: T, kk: T, jk: T, kj: T) -> T {
    let half = T::of(0.5);
    ((jj + kk) * half).min((jk + kj) * half)
}

/// Voxel-distance lookup shared by everything that evaluates many pair
/// distances on one grid. Small grids use a full table.
#[derive(Debug, Clone)]
pub struct PairGeometry<T> {
    index: PairIndex,
    lookup: Lookup<T>,
}

#[derive(Debug, Clone)]
enum Lookup<T> {
    Table { n: usize, table: Vec<T> },
    Coords(Vec<[T; 3]>),
}

/// Largest grid for which the `V × V` distance table is precomputed.
const TABLE_LIMIT: usize = 4096;

impl<T: Scalar> PairGeometry<T> {
    pub fn new(grid: &VoxelGrid) -> Self {
        let n = grid.len();
        let lookup = if n <= TABLE_LIMIT {
            Lookup::Table {
                n,
                table: grid.distance_table().into_iter().map(T::of).collect(),
            }
        } else {
            Lookup::Coords(grid.coords().iter().map(|c| c.map(T::of)).collect())
        };
        Self {
            index: PairIndex::new(n),
            lookup,
        }
    }

    pub fn pair_index(&self) -> PairIndex {
        self.index
    }

    #[inline]
    pub fn voxel_distance(&self, a: usize, b: usize) -> T {
        match &self.lookup {
            Lookup::Table { n, table } => table[a * n + b],
            Lookup::Coords(c) => {
                let (p, q) = (c[a], c[b]);
                ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
            }
        }
    }

    /// Distance between the pairs `(j, k)` and `(j2, k2)`; indices unchecked.
    #[inline]
    pub fn between(&self, (j, k): (usize, usize), (j2, k2): (usize, usize)) -> T {
        min_branch(
            self.voxel_distance(j, j2),
            self.voxel_distance(k, k2),
            self.voxel_distance(j, k2),
            self.voxel_distance(k, j2),
        )
    }

    /// Distance between pair indices `z1` and `z2`.
    pub fn between_indices(&self, z1: usize, z2: usize) -> Result<T> {
        Ok(self.between(self.index.pair(z1)?, self.index.pair(z2)?))
    }
}
