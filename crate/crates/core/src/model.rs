//! Shared domain types: voxel geometry, component masks, the canonical
//! enumeration of voxel pairs and the pairwise stream-count field.

use std::collections::{BTreeMap, HashMap};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Spatial layout of the brain voxels.
///
/// Internally voxels are addressed by dense indices `0..V`; the ids used by
/// input files are kept alongside so outputs can be reported in their terms.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    ids: Vec<i64>,
    coords: Vec<[f64; 3]>,
    index_of: HashMap<i64, usize>,
}

impl VoxelGrid {
    /// Grid with external ids `0..V` in input order.
    pub fn new(coords: Vec<[f64; 3]>) -> Result<Self> {
        let ids = (0..coords.len() as i64).collect();
        Self::with_ids(ids, coords)
    }

    pub fn with_ids(ids: Vec<i64>, coords: Vec<[f64; 3]>) -> Result<Self> {
        if ids.len() != coords.len() {
            return Err(Error::invalid("voxel ids and coordinates differ in length"));
        }
        if ids.len() < 2 {
            return Err(Error::invalid(format!(
                "a grid needs at least 2 voxels, got {}",
                ids.len()
            )));
        }
        let mut index_of = HashMap::with_capacity(ids.len());
        for (i, &id) in ids.iter().enumerate() {
            if index_of.insert(id, i).is_some() {
                return Err(Error::invalid(format!("duplicate voxel id {id}")));
            }
        }
        let mut seen = HashMap::with_capacity(coords.len());
        for (i, c) in coords.iter().enumerate() {
            if c.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid(format!("voxel {} has non-finite coordinates", ids[i])));
            }
            let key = c.map(f64::to_bits);
            if let Some(prev) = seen.insert(key, i) {
                return Err(Error::invalid(format!(
                    "voxels {} and {} share coordinates {:?}",
                    ids[prev], ids[i], c
                )));
            }
        }
        Ok(Self { ids, coords, index_of })
    }

    /// Regular `nx × ny` slice at unit spacing, voxel `x + nx*y` at `(x, y, 0)`.
    pub fn regular_2d(nx: usize, ny: usize) -> Result<Self> {
        let coords = (0..ny)
            .flat_map(|y| (0..nx).map(move |x| [x as f64, y as f64, 0.0]))
            .collect();
        Self::new(coords)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[[f64; 3]] {
        &self.coords
    }

    pub fn ids(&self) -> &[i64] {
        &self.ids
    }

    pub fn external_id(&self, index: usize) -> i64 {
        self.ids[index]
    }

    /// Dense index of an external voxel id.
    pub fn index_of(&self, id: i64) -> Result<usize> {
        self.index_of
            .get(&id)
            .copied()
            .ok_or_else(|| Error::UnknownVoxel(id.to_string()))
    }

    pub fn check_index(&self, index: usize) -> Result<()> {
        if index < self.len() {
            Ok(())
        } else {
            Err(Error::UnknownVoxel(format!("#{index}")))
        }
    }

    /// Euclidean distance between two voxels.
    pub fn distance(&self, a: usize, b: usize) -> f64 {
        let (p, q) = (self.coords[a], self.coords[b]);
        ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
    }

    /// Full voxel distance table, row-major `V × V`.
    pub fn distance_table(&self) -> Vec<f64> {
        let v = self.len();
        let mut out = vec![0.0; v * v];
        for a in 0..v {
            for b in (a + 1)..v {
                let d = self.distance(a, b);
                out[a * v + b] = d;
                out[b * v + a] = d;
            }
        }
        out
    }
}

/// The voxel set of one functional network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentMask {
    label: String,
    members: Vec<usize>,
}

impl ComponentMask {
    /// `members` are dense voxel indices; they are stored sorted.
    pub fn new(label: impl Into<String>, mut members: Vec<usize>, n_voxels: usize) -> Result<Self> {
        let label = label.into();
        members.sort_unstable();
        if let Some(w) = members.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::invalid(format!("component {label} lists voxel #{} twice", w[0])));
        }
        if let Some(&bad) = members.iter().find(|&&m| m >= n_voxels) {
            return Err(Error::UnknownVoxel(format!("#{bad}")));
        }
        if members.len() < 2 {
            return Err(Error::MaskTooSmall {
                size: members.len(),
                label,
            });
        }
        Ok(Self { label, members })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, voxel: usize) -> bool {
        self.members.binary_search(&voxel).is_ok()
    }

    /// Membership indicator over all `n_voxels`.
    pub fn indicator(&self, n_voxels: usize) -> Vec<bool> {
        let mut out = vec![false; n_voxels];
        for &m in &self.members {
            out[m] = true;
        }
        out
    }

    /// Unordered member pairs `j < k` in lexicographic order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.members
            .iter()
            .enumerate()
            .flat_map(move |(a, &j)| self.members[a + 1..].iter().map(move |&k| (j, k)))
    }
}

/// Canonical bijection between unordered voxel pairs and `0..C(V,2)`.
///
/// Pairs are ordered lexicographically: `(0,1), (0,2), …, (0,V-1), (1,2), …`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairIndex {
    n_voxels: usize,
}

impl PairIndex {
    pub fn new(n_voxels: usize) -> Self {
        Self { n_voxels }
    }

    pub fn n_voxels(&self) -> usize {
        self.n_voxels
    }

    /// Number of unordered pairs.
    pub fn len(&self) -> usize {
        self.n_voxels * self.n_voxels.saturating_sub(1) / 2
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    fn row_offset(&self, j: usize) -> usize {
        j * (2 * self.n_voxels - j - 1) / 2
    }

    /// Index of the unordered pair `{j, k}`.
    pub fn index(&self, j: usize, k: usize) -> Result<usize> {
        if j == k {
            return Err(Error::InvalidPair(j));
        }
        if j >= self.n_voxels || k >= self.n_voxels {
            return Err(Error::UnknownVoxel(format!("#{}", j.max(k))));
        }
        Ok(self.index_unchecked(j, k))
    }

    /// Index of `{j, k}` without validation; `j != k`, both in range.
    #[inline]
    pub fn index_unchecked(&self, j: usize, k: usize) -> usize {
        let (a, b) = if j < k { (j, k) } else { (k, j) };
        self.row_offset(a) + (b - a - 1)
    }

    /// The pair `(j, k)`, `j < k`, stored at index `z`.
    pub fn pair(&self, z: usize) -> Result<(usize, usize)> {
        if z >= self.len() {
            return Err(Error::invalid(format!(
                "pair index {z} out of range for {} voxels",
                self.n_voxels
            )));
        }
        let n = self.n_voxels as f64;
        // Closed-form row estimate, then corrected for rounding.
        let est = ((2.0 * n - 1.0) - ((2.0 * n - 1.0).powi(2) - 8.0 * z as f64).max(0.0).sqrt()) / 2.0;
        let mut j = (est.floor() as usize).min(self.n_voxels - 2);
        while j > 0 && self.row_offset(j) > z {
            j -= 1;
        }
        while j + 1 < self.n_voxels - 1 && self.row_offset(j + 1) <= z {
            j += 1;
        }
        let k = z - self.row_offset(j) + j + 1;
        Ok((j, k))
    }

    /// All pairs in index order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> {
        let n = self.n_voxels;
        (0..n).flat_map(move |j| ((j + 1)..n).map(move |k| (j, k)))
    }
}

/// How directional tractography records were reconciled into one count per
/// unordered pair. Written to output metadata.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymmetrizationSummary {
    pub convention: String,
    /// Pairs with records in both directions (stored as the rounded mean).
    pub averaged_pairs: usize,
    /// Pairs seen in one direction only (stored as given).
    pub one_directional_pairs: usize,
    /// Records with seed == target, which carry no pair information.
    pub self_records_skipped: usize,
}

const SYMMETRIZATION_CONVENTION: &str = "mean of available directions, rounded half-up; missing pairs are 0";

/// One directional tractography record in dense voxel indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CountRecord {
    pub seed: usize,
    pub target: usize,
    pub count: u64,
}

/// Symmetric, sparse field of pairwise stream counts `N_jk` out of `N`
/// streams per seed, with exact per-voxel row sums.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamCounts {
    index: PairIndex,
    streams_per_seed: u32,
    /// Non-zero entries, sorted by pair index.
    entries: Vec<(usize, u32)>,
    row_sums: Vec<u64>,
    symmetrization: SymmetrizationSummary,
}

impl StreamCounts {
    /// Build from directional records. Records for the same unordered pair in
    /// both directions are averaged (rounded half-up).
    pub fn from_records(n_voxels: usize, streams_per_seed: u32, records: &[CountRecord]) -> Result<Self> {
        Self::ingest(n_voxels, streams_per_seed, records, |i| format!("#{i}"))
    }

    /// As [`StreamCounts::from_records`], naming voxels by their grid ids in errors.
    pub fn ingest_on_grid(grid: &VoxelGrid, streams_per_seed: u32, records: &[CountRecord]) -> Result<Self> {
        Self::ingest(grid.len(), streams_per_seed, records, |i| {
            grid.external_id(i).to_string()
        })
    }

    fn ingest(
        n_voxels: usize,
        streams_per_seed: u32,
        records: &[CountRecord],
        name: impl Fn(usize) -> String,
    ) -> Result<Self> {
        if n_voxels < 2 {
            return Err(Error::invalid("stream counts need at least 2 voxels"));
        }
        if streams_per_seed == 0 {
            return Err(Error::invalid("streams per seed must be positive"));
        }
        let index = PairIndex::new(n_voxels);
        // pair -> (count in low->high direction, count in high->low direction)
        let mut directed: BTreeMap<usize, [Option<u64>; 2]> = BTreeMap::new();
        let mut summary = SymmetrizationSummary {
            convention: SYMMETRIZATION_CONVENTION.to_string(),
            ..Default::default()
        };
        for r in records {
            if r.seed >= n_voxels {
                return Err(Error::UnknownVoxel(name_or_index(r.seed, n_voxels, &name)));
            }
            if r.target >= n_voxels {
                return Err(Error::UnknownVoxel(name_or_index(r.target, n_voxels, &name)));
            }
            if r.count > u64::from(streams_per_seed) {
                return Err(Error::CountOverflow {
                    seed: name(r.seed),
                    target: name(r.target),
                    count: r.count,
                    streams: streams_per_seed,
                });
            }
            if r.seed == r.target {
                summary.self_records_skipped += 1;
                continue;
            }
            let z = index.index_unchecked(r.seed, r.target);
            let dir = usize::from(r.seed > r.target);
            let slot = &mut directed.entry(z).or_default()[dir];
            if slot.is_some() {
                return Err(Error::DuplicateRecord {
                    seed: name(r.seed),
                    target: name(r.target),
                });
            }
            *slot = Some(r.count);
        }
        let mut entries = Vec::with_capacity(directed.len());
        for (z, dirs) in directed {
            let value = match dirs {
                [Some(a), Some(b)] => {
                    summary.averaged_pairs += 1;
                    (a + b).div_ceil(2)
                }
                [Some(a), None] | [None, Some(a)] => {
                    summary.one_directional_pairs += 1;
                    a
                }
                [None, None] => unreachable!("entry exists only after a record"),
            };
            if value > 0 {
                entries.push((z, value as u32));
            }
        }
        Ok(Self::from_sorted_entries(index, streams_per_seed, entries, summary))
    }

    /// Build from a dense vector laid out by [`PairIndex`].
    pub fn from_dense(n_voxels: usize, streams_per_seed: u32, values: &[u32]) -> Result<Self> {
        let index = PairIndex::new(n_voxels);
        if values.len() != index.len() {
            return Err(Error::invalid(format!(
                "dense count vector has {} entries, expected {}",
                values.len(),
                index.len()
            )));
        }
        if streams_per_seed == 0 {
            return Err(Error::invalid("streams per seed must be positive"));
        }
        if let Some((z, &c)) = values.iter().enumerate().find(|(_, &c)| c > streams_per_seed) {
            let (j, k) = index.pair(z)?;
            return Err(Error::CountOverflow {
                seed: format!("#{j}"),
                target: format!("#{k}"),
                count: u64::from(c),
                streams: streams_per_seed,
            });
        }
        let entries = values
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(z, &c)| (z, c))
            .collect();
        let summary = SymmetrizationSummary {
            convention: "supplied symmetric".to_string(),
            ..Default::default()
        };
        Ok(Self::from_sorted_entries(index, streams_per_seed, entries, summary))
    }

    fn from_sorted_entries(
        index: PairIndex,
        streams_per_seed: u32,
        entries: Vec<(usize, u32)>,
        symmetrization: SymmetrizationSummary,
    ) -> Self {
        let mut row_sums = vec![0u64; index.n_voxels()];
        let mut row = 0usize;
        // Entries are sorted, so the row pointer only moves forward.
        for &(z, c) in &entries {
            while row + 1 < index.n_voxels() && index.row_offset(row + 1) <= z {
                row += 1;
            }
            let k = z - index.row_offset(row) + row + 1;
            row_sums[row] += u64::from(c);
            row_sums[k] += u64::from(c);
        }
        Self {
            index,
            streams_per_seed,
            entries,
            row_sums,
            symmetrization,
        }
    }

    pub fn n_voxels(&self) -> usize {
        self.index.n_voxels()
    }

    pub fn pair_index(&self) -> PairIndex {
        self.index
    }

    pub fn streams_per_seed(&self) -> u32 {
        self.streams_per_seed
    }

    pub fn symmetrization(&self) -> &SymmetrizationSummary {
        &self.symmetrization
    }

    /// Non-zero entries `(pair index, count)` in index order.
    pub fn entries(&self) -> &[(usize, u32)] {
        &self.entries
    }

    /// Count for the unordered pair `{j, k}`; 0 when absent.
    pub fn get(&self, j: usize, k: usize) -> Result<u32> {
        let z = self.index.index(j, k)?;
        Ok(self.get_index(z))
    }

    #[inline]
    pub fn get_index(&self, z: usize) -> u32 {
        match self.entries.binary_search_by_key(&z, |e| e.0) {
            Ok(pos) => self.entries[pos].1,
            Err(_) => 0,
        }
    }

    /// `Σ_{v≠j} N_jv`.
    pub fn row_sum(&self, j: usize) -> u64 {
        self.row_sums[j]
    }

    /// `N̄_j = Σ_{v≠j} N_jv / (V−1)` for every voxel.
    pub fn row_means<T: Scalar>(&self) -> Vec<T> {
        let denom = T::of_usize(self.n_voxels() - 1);
        self.row_sums.iter().map(|&s| T::of(s as f64) / denom).collect()
    }

    /// Dense vector over all pairs in [`PairIndex`] order.
    pub fn to_dense(&self) -> Vec<u32> {
        let mut out = vec![0u32; self.index.len()];
        for &(z, c) in &self.entries {
            out[z] = c;
        }
        out
    }

    /// Both directional records for every non-zero pair.
    pub fn to_records(&self) -> Vec<CountRecord> {
        let mut out = Vec::with_capacity(self.entries.len() * 2);
        for &(z, c) in &self.entries {
            let (j, k) = self.index.pair(z).expect("stored index is valid");
            out.push(CountRecord {
                seed: j,
                target: k,
                count: u64::from(c),
            });
            out.push(CountRecord {
                seed: k,
                target: j,
                count: u64::from(c),
            });
        }
        out
    }
}

fn name_or_index(i: usize, n: usize, name: &impl Fn(usize) -> String) -> String {
    if i < n {
        name(i)
    } else {
        format!("#{i}")
    }
}

/// One subject's inputs.
#[derive(Debug, Clone)]
pub struct SubjectDataset {
    pub subject_id: String,
    pub group: Option<String>,
    pub counts: StreamCounts,
    /// Optional `time × voxel` fMRI matrix.
    pub fmri: Option<DMatrix<f64>>,
}

/// Subjects that share one voxel grid.
#[derive(Debug, Clone)]
pub struct Cohort {
    grid: VoxelGrid,
    subjects: Vec<SubjectDataset>,
}

impl Cohort {
    pub fn new(grid: VoxelGrid, subjects: Vec<SubjectDataset>) -> Result<Self> {
        for s in &subjects {
            if s.counts.n_voxels() != grid.len() {
                return Err(Error::invalid(format!(
                    "subject {} has counts over {} voxels, grid has {}",
                    s.subject_id,
                    s.counts.n_voxels(),
                    grid.len()
                )));
            }
            if let Some(y) = &s.fmri {
                if y.ncols() != grid.len() {
                    return Err(Error::invalid(format!(
                        "subject {} has fMRI over {} voxels, grid has {}",
                        s.subject_id,
                        y.ncols(),
                        grid.len()
                    )));
                }
            }
        }
        Ok(Self { grid, subjects })
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    pub fn subjects(&self) -> &[SubjectDataset] {
        &self.subjects
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(seed: usize, target: usize, count: u64) -> CountRecord {
        CountRecord { seed, target, count }
    }

    #[test]
    fn pair_index_matches_lexicographic_layout() {
        // 1-based (1,2),(1,3),(1,4),(2,3),(2,4),(3,4) is 0-based (0,1)...(2,3).
        let idx = PairIndex::new(4);
        assert_eq!(idx.index(0, 1).unwrap(), 0);
        assert_eq!(idx.index(2, 3).unwrap(), 5);
        assert_eq!(idx.index(2, 1).unwrap(), 3);
        assert_eq!(idx.index(1, 2).unwrap(), 3);
        assert_eq!(idx.len(), 6);
        assert_eq!(idx.pairs().collect::<Vec<_>>().len(), 6);
    }

    #[test]
    fn pair_index_errors() {
        let idx = PairIndex::new(4);
        assert!(matches!(idx.index(2, 2), Err(Error::InvalidPair(2))));
        assert!(matches!(idx.index(0, 4), Err(Error::UnknownVoxel(_))));
        assert!(idx.pair(6).is_err());
    }

    #[test]
    fn directional_records_are_averaged() {
        let c = StreamCounts::from_records(3, 20, &[rec(0, 1, 10), rec(1, 0, 14)]).unwrap();
        assert_eq!(c.get(0, 1).unwrap(), 12);
        assert_eq!(c.symmetrization().averaged_pairs, 1);
        // half-up rounding
        let c = StreamCounts::from_records(3, 20, &[rec(0, 1, 10), rec(1, 0, 13)]).unwrap();
        assert_eq!(c.get(1, 0).unwrap(), 12);
    }

    #[test]
    fn missing_pairs_default_to_zero() {
        let c = StreamCounts::from_records(3, 20, &[rec(0, 1, 5)]).unwrap();
        let means = c.row_means::<f64>();
        assert_eq!(means[0], 2.5);
        assert_eq!(c.get(1, 2).unwrap(), 0);
    }

    #[test]
    fn saturated_field_has_full_row_means() {
        let c = StreamCounts::from_records(3, 20, &[rec(0, 1, 20), rec(0, 2, 20), rec(1, 2, 20)]).unwrap();
        assert_eq!(c.row_means::<f64>(), vec![20.0; 3]);
    }

    #[test]
    fn row_means_by_hand() {
        let c = StreamCounts::from_records(3, 20, &[rec(0, 1, 4), rec(0, 2, 8)]).unwrap();
        assert_eq!(c.row_means::<f64>(), vec![6.0, 2.0, 4.0]);
    }

    #[test]
    fn constant_field_row_means() {
        let idx = PairIndex::new(7);
        let c = StreamCounts::from_dense(7, 10, &vec![3; idx.len()]).unwrap();
        assert!(c.row_means::<f64>().iter().all(|&m| m == 3.0));
    }

    #[test]
    fn overflow_and_duplicates_are_rejected() {
        assert!(matches!(
            StreamCounts::from_records(3, 20, &[rec(0, 1, 21)]),
            Err(Error::CountOverflow { count: 21, .. })
        ));
        assert!(matches!(
            StreamCounts::from_records(3, 20, &[rec(0, 1, 2), rec(0, 1, 3)]),
            Err(Error::DuplicateRecord { .. })
        ));
        assert!(matches!(
            StreamCounts::from_records(3, 20, &[rec(0, 3, 2)]),
            Err(Error::UnknownVoxel(_))
        ));
    }

    #[test]
    fn self_records_are_skipped() {
        let c = StreamCounts::from_records(3, 20, &[rec(1, 1, 20), rec(0, 1, 3)]).unwrap();
        assert_eq!(c.symmetrization().self_records_skipped, 1);
        assert_eq!(c.row_sum(1), 3);
    }

    #[test]
    fn grid_rejects_duplicate_coordinates() {
        assert!(VoxelGrid::new(vec![[0.0; 3], [0.0; 3]]).is_err());
        assert!(VoxelGrid::new(vec![[0.0; 3]]).is_err());
        let g = VoxelGrid::with_ids(vec![10, 20], vec![[0.0; 3], [3.0, 4.0, 0.0]]).unwrap();
        assert_eq!(g.index_of(20).unwrap(), 1);
        assert_eq!(g.distance(0, 1), 5.0);
        assert!(g.index_of(30).is_err());
    }

    #[test]
    fn mask_validation() {
        assert!(matches!(
            ComponentMask::new("a", vec![3], 5),
            Err(Error::MaskTooSmall { size: 1, .. })
        ));
        assert!(ComponentMask::new("a", vec![1, 1], 5).is_err());
        assert!(ComponentMask::new("a", vec![1, 5], 5).is_err());
        let m = ComponentMask::new("a", vec![4, 1, 2], 5).unwrap();
        assert_eq!(m.members(), &[1, 2, 4]);
        assert_eq!(m.pairs().collect::<Vec<_>>(), vec![(1, 2), (1, 4), (2, 4)]);
    }

    fn sparse_counts(v: usize, n: u32) -> impl Strategy<Value = StreamCounts> {
        let len = PairIndex::new(v).len();
        proptest::collection::vec(prop_oneof![3 => Just(0u32), 1 => 0..=n], len)
            .prop_map(move |vals| StreamCounts::from_dense(v, n, &vals).unwrap())
    }

    proptest! {
        #[test]
        fn pair_index_roundtrip(v in 2usize..200, frac in 0.0f64..1.0) {
            let idx = PairIndex::new(v);
            let z = ((idx.len() as f64 - 1.0) * frac) as usize;
            let (j, k) = idx.pair(z).unwrap();
            prop_assert!(j < k && k < v);
            prop_assert_eq!(idx.index(j, k).unwrap(), z);
            prop_assert_eq!(idx.index(k, j).unwrap(), z);
        }

        #[test]
        fn row_sums_count_each_pair_twice(c in (3usize..25).prop_flat_map(|v| sparse_counts(v, 30))) {
            let v = c.n_voxels();
            let total_rows: f64 = c.row_means::<f64>().iter().sum::<f64>() * (v as f64 - 1.0);
            let total_pairs: u64 = c.entries().iter().map(|e| u64::from(e.1)).sum();
            prop_assert!((total_rows - 2.0 * total_pairs as f64).abs() < 1e-9 * (1.0 + total_rows));
        }

        #[test]
        fn row_means_match_dense_oracle(c in (3usize..25).prop_flat_map(|v| sparse_counts(v, 30))) {
            let v = c.n_voxels();
            let dense = c.to_dense();
            let idx = PairIndex::new(v);
            let mut full = vec![vec![0u64; v]; v];
            for (z, (j, k)) in idx.pairs().enumerate() {
                full[j][k] = u64::from(dense[z]);
                full[k][j] = u64::from(dense[z]);
            }
            let means = c.row_means::<f64>();
            for j in 0..v {
                let oracle = full[j].iter().sum::<u64>() as f64 / (v - 1) as f64;
                prop_assert_eq!(means[j], oracle);
            }
        }

        #[test]
        fn ingest_is_idempotent_on_symmetric_input(c in (3usize..20).prop_flat_map(|v| sparse_counts(v, 30))) {
            let again = StreamCounts::from_records(c.n_voxels(), 30, &c.to_records()).unwrap();
            prop_assert_eq!(again.to_dense(), c.to_dense());
            prop_assert_eq!(again.row_means::<f64>(), c.row_means::<f64>());
        }
    }
}
