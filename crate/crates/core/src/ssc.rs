//! The strength-of-structural-connectivity coefficient.
//!
//! For a component with voxel set `Ω`:
//!
//! ```text
//!         Σ_{j<k ∈ Ω} [ p_jk − (p̄_j + p̄_k)/2 ]
//! θ  =  ──────────────────────────────────────,   p̄_j = Σ_{v≠j} p_jv / (V−1)
//!         Σ_{j<k ∈ Ω} [ 1 − (p̄_j + p̄_k)/2 ]
//! ```
//!
//! The plug-in estimator replaces probabilities with stream counts out of
//! `N`. It is also available as a ratio of two linear forms of the pair-count
//! vector, which is the route the delta-method variance differentiates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ComponentMask, PairIndex, StreamCounts};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Voxel,
    Region,
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Level::Voxel => "voxel",
            Level::Region => "region",
        })
    }
}

/// Estimated coefficient for one component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SscEstimate<T> {
    pub component: String,
    pub level: Level,
    pub theta_hat: T,
    pub numerator: T,
    pub denominator: T,
}

impl<T: Scalar> SscEstimate<T> {
    fn from_parts(component: &str, level: Level, numerator: T, denominator: T) -> Result<Self> {
        if !(denominator > T::zero()) {
            return Err(Error::DegenerateBaseline(denominator.to_f64_lossy()));
        }
        Ok(Self {
            component: component.to_string(),
            level,
            theta_hat: numerator / denominator,
            numerator,
            denominator,
        })
    }
}

/// Connection probabilities for every unordered voxel pair, laid out by
/// [`PairIndex`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityField<T> {
    index: PairIndex,
    values: Vec<T>,
}

impl<T: Scalar> ProbabilityField<T> {
    pub fn from_dense(n_voxels: usize, values: Vec<T>) -> Result<Self> {
        let index = PairIndex::new(n_voxels);
        if n_voxels < 2 {
            return Err(Error::invalid("probability field needs at least 2 voxels"));
        }
        if values.len() != index.len() {
            return Err(Error::invalid(format!(
                "probability field has {} entries, expected {}",
                values.len(),
                index.len()
            )));
        }
        if let Some(bad) = values.iter().find(|p| !(**p >= T::zero() && **p <= T::one())) {
            return Err(Error::invalid(format!("probability {bad} outside [0, 1]")));
        }
        Ok(Self { index, values })
    }

    pub fn constant(n_voxels: usize, p: T) -> Result<Self> {
        Self::from_dense(n_voxels, vec![p; PairIndex::new(n_voxels).len()])
    }

    /// Field with `p_jk = f(j, k)` for `j < k`.
    pub fn from_fn(n_voxels: usize, mut f: impl FnMut(usize, usize) -> T) -> Result<Self> {
        let index = PairIndex::new(n_voxels);
        let values = index.pairs().map(|(j, k)| f(j, k)).collect();
        Self::from_dense(n_voxels, values)
    }

    pub fn n_voxels(&self) -> usize {
        self.index.n_voxels()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn get(&self, j: usize, k: usize) -> Result<T> {
        Ok(self.values[self.index.index(j, k)?])
    }

    /// `p̄_j` for every voxel, averaged over all `V−1` partners.
    pub fn baselines(&self) -> Vec<T> {
        let v = self.n_voxels();
        let mut sums = vec![T::zero(); v];
        for ((j, k), &p) in self.index.pairs().zip(&self.values) {
            sums[j] = sums[j] + p;
            sums[k] = sums[k] + p;
        }
        let denom = T::of_usize(v - 1);
        sums.into_iter().map(|s| s / denom).collect()
    }
}

fn check_mask_fits(mask: &ComponentMask, n_voxels: usize) -> Result<()> {
    match mask.members().last() {
        Some(&m) if m >= n_voxels => Err(Error::UnknownVoxel(format!("#{m}"))),
        _ if mask.len() < 2 => Err(Error::MaskTooSmall {
            label: mask.label().to_string(),
            size: mask.len(),
        }),
        _ => Ok(()),
    }
}

/// Population coefficient from known pair probabilities.
pub fn true_ssc_from_probabilities<T: Scalar>(p: &ProbabilityField<T>, mask: &ComponentMask) -> Result<T> {
    check_mask_fits(mask, p.n_voxels())?;
    let baselines = p.baselines();
    let half = T::of(0.5);
    let (mut num, mut den) = (T::zero(), T::zero());
    for (j, k) in mask.pairs() {
        let base = (baselines[j] + baselines[k]) * half;
        num = num + p.values[p.index.index_unchecked(j, k)] - base;
        den = den + T::one() - base;
    }
    if !(den > T::zero()) {
        return Err(Error::DegenerateBaseline(den.to_f64_lossy()));
    }
    Ok(num / den)
}

/// Plug-in estimate from stream counts.
pub fn estimate_ssc<T: Scalar>(counts: &StreamCounts, mask: &ComponentMask) -> Result<SscEstimate<T>> {
    check_mask_fits(mask, counts.n_voxels())?;
    let means = counts.row_means::<T>();
    let streams = T::of(f64::from(counts.streams_per_seed()));
    let half = T::of(0.5);
    let index = counts.pair_index();
    let (mut num, mut den) = (T::zero(), T::zero());
    for (j, k) in mask.pairs() {
        let base = (means[j] + means[k]) * half;
        let n_jk = T::of(f64::from(counts.get_index(index.index_unchecked(j, k))));
        num = num + n_jk - base;
        den = den + streams - base;
    }
    SscEstimate::from_parts(mask.label(), Level::Voxel, num, den)
}

/// The estimator written as `(C_ℓ − A)·N* / (b − A·N*)`.
///
/// Only pairs where `C_ℓ` or `A` is non-zero (pairs with at least one member
/// in the component) are stored; every other coefficient is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearForm<T> {
    index: PairIndex,
    /// Pair indices with a non-zero coefficient, ascending.
    support: Vec<usize>,
    /// `C_ℓ` restricted to the support: whether both members lie in the component.
    within: Vec<bool>,
    /// `A` restricted to the support.
    a: Vec<T>,
    b: T,
    component_size: usize,
}

impl<T: Scalar> LinearForm<T> {
    pub fn new(mask: &ComponentMask, n_voxels: usize, streams_per_seed: u32) -> Result<Self> {
        check_mask_fits(mask, n_voxels)?;
        let index = PairIndex::new(n_voxels);
        let v_l = mask.len();
        // A = (V_ℓ−1)/(2(V−1)) Σ_{j∈Ω} C_j: a touching pair appears in one
        // C_j, a within pair in two.
        let factor = T::of_usize(v_l - 1) / (T::of(2.0) * T::of_usize(n_voxels - 1));
        let inside = mask.indicator(n_voxels);
        let mut entries: Vec<(usize, bool)> = Vec::with_capacity(v_l * n_voxels);
        for &j in mask.members() {
            for (v, &member) in inside.iter().enumerate() {
                if v == j || (member && v < j) {
                    continue;
                }
                entries.push((index.index_unchecked(j, v), member));
            }
        }
        entries.sort_unstable_by_key(|e| e.0);
        let support = entries.iter().map(|e| e.0).collect();
        let within: Vec<bool> = entries.iter().map(|e| e.1).collect();
        let a = within
            .iter()
            .map(|&w| if w { factor + factor } else { factor })
            .collect();
        let b = T::of_usize(v_l * (v_l - 1)) / T::of(2.0) * T::of(f64::from(streams_per_seed));
        Ok(Self {
            index,
            support,
            within,
            a,
            b,
            component_size: v_l,
        })
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }

    /// `C_ℓ` on the support.
    pub fn within(&self) -> &[bool] {
        &self.within
    }

    /// `A` on the support.
    pub fn a(&self) -> &[T] {
        &self.a
    }

    pub fn b(&self) -> T {
        self.b
    }

    pub fn component_size(&self) -> usize {
        self.component_size
    }

    /// `C_ℓ − A` on the support.
    pub fn numerator_weights(&self) -> Vec<T> {
        self.within
            .iter()
            .zip(&self.a)
            .map(|(&w, &a)| if w { T::one() - a } else { -a })
            .collect()
    }

    /// Dense `C_ℓ` over all `C(V,2)` pairs.
    pub fn c_ell_dense(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.index.len()];
        for (&z, &w) in self.support.iter().zip(&self.within) {
            if w {
                out[z] = T::one();
            }
        }
        out
    }

    /// Dense `A` over all `C(V,2)` pairs.
    pub fn a_dense(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.index.len()];
        for (&z, &a) in self.support.iter().zip(&self.a) {
            out[z] = a;
        }
        out
    }

    /// `((C_ℓ − A)·x, b − A·x)` for pair values `x` on the support.
    pub fn evaluate_on_support(&self, x: &[T]) -> (T, T) {
        debug_assert_eq!(x.len(), self.support.len());
        let (mut within, mut ax) = (T::zero(), T::zero());
        for ((&w, &a), &v) in self.within.iter().zip(&self.a).zip(x) {
            if w {
                within = within + v;
            }
            ax = ax + a * v;
        }
        (within - ax, self.b - ax)
    }

    /// Counts on the support, in support order.
    pub fn gather(&self, counts: &StreamCounts) -> Vec<T> {
        self.support
            .iter()
            .map(|&z| T::of(f64::from(counts.get_index(z))))
            .collect()
    }
}

/// Indicator `C_j` of the pairs involving voxel `j`, over all `C(V,2)` pairs.
pub fn voxel_indicator<T: Scalar>(n_voxels: usize, j: usize) -> Result<Vec<T>> {
    let index = PairIndex::new(n_voxels);
    if j >= n_voxels {
        return Err(Error::UnknownVoxel(format!("#{j}")));
    }
    let mut out = vec![T::zero(); index.len()];
    for v in (0..n_voxels).filter(|&v| v != j) {
        out[index.index_unchecked(j, v)] = T::one();
    }
    Ok(out)
}

/// Plug-in estimate through the linear-form route.
pub fn estimate_ssc_linear<T: Scalar>(counts: &StreamCounts, mask: &ComponentMask) -> Result<SscEstimate<T>> {
    let form = LinearForm::<T>::new(mask, counts.n_voxels(), counts.streams_per_seed())?;
    let (x, y) = form.evaluate_on_support(&form.gather(counts));
    SscEstimate::from_parts(mask.label(), Level::Voxel, x, y)
}

/// A brain parcellation restricted to the voxels of interest, with the
/// regions that make up one component.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionPartition {
    n_voxels: usize,
    labels: Vec<String>,
    members: Vec<Vec<usize>>,
    region_of: Vec<Option<usize>>,
    component: Vec<usize>,
    component_label: String,
}

impl RegionPartition {
    /// `regions` are `(label, voxels)`; `component` lists region positions
    /// belonging to the component. Voxels in no region are ignored.
    pub fn new(
        n_voxels: usize,
        component_label: impl Into<String>,
        regions: Vec<(String, Vec<usize>)>,
        component: Vec<usize>,
    ) -> Result<Self> {
        let component_label = component_label.into();
        let mut region_of = vec![None; n_voxels];
        let mut labels = Vec::with_capacity(regions.len());
        let mut members = Vec::with_capacity(regions.len());
        for (r, (label, voxels)) in regions.into_iter().enumerate() {
            if voxels.is_empty() {
                return Err(Error::invalid(format!("region {label} is empty")));
            }
            for &v in &voxels {
                let slot = region_of
                    .get_mut(v)
                    .ok_or_else(|| Error::UnknownVoxel(format!("#{v}")))?;
                if slot.is_some() {
                    return Err(Error::invalid(format!("voxel #{v} belongs to more than one region")));
                }
                *slot = Some(r);
            }
            labels.push(label);
            members.push(voxels);
        }
        let mut component = component;
        component.sort_unstable();
        component.dedup();
        if let Some(&bad) = component.iter().find(|&&r| r >= members.len()) {
            return Err(Error::invalid(format!("component region #{bad} does not exist")));
        }
        if component.len() < 2 {
            return Err(Error::MaskTooSmall {
                label: component_label,
                size: component.len(),
            });
        }
        Ok(Self {
            n_voxels,
            labels,
            members,
            region_of,
            component,
            component_label,
        })
    }

    /// Split a whole-brain parcellation by a component mask: each parcel is
    /// divided into its part inside the mask and its part outside, and the
    /// inside parts form the component.
    pub fn from_parcellation(n_voxels: usize, assignment: &[(usize, String)], mask: &ComponentMask) -> Result<Self> {
        let mut parcels: BTreeMap<&str, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
        for (v, label) in assignment {
            if *v >= n_voxels {
                return Err(Error::UnknownVoxel(format!("#{v}")));
            }
            let entry = parcels.entry(label.as_str()).or_default();
            if mask.contains(*v) {
                entry.0.push(*v);
            } else {
                entry.1.push(*v);
            }
        }
        let mut regions = Vec::new();
        let mut component = Vec::new();
        for (label, (inside, outside)) in parcels {
            if !inside.is_empty() {
                component.push(regions.len());
                regions.push((label.to_string(), inside));
            }
            if !outside.is_empty() {
                regions.push((format!("{label}/outside"), outside));
            }
        }
        Self::new(n_voxels, mask.label(), regions, component)
    }

    pub fn n_regions(&self) -> usize {
        self.members.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn component_regions(&self) -> &[usize] {
        &self.component
    }

    pub fn region_size(&self, r: usize) -> usize {
        self.members[r].len()
    }

    /// Region-pair counts `N_rs = Σ_{j∈r, k∈s} N_jk` as a dense `R × R` table.
    pub fn aggregate(&self, counts: &StreamCounts) -> Result<Vec<u64>> {
        if counts.n_voxels() != self.n_voxels {
            return Err(Error::invalid("partition and counts cover different grids"));
        }
        let r = self.n_regions();
        let mut table = vec![0u64; r * r];
        let index = counts.pair_index();
        for &(z, c) in counts.entries() {
            let (j, k) = index.pair(z)?;
            if let (Some(a), Some(b)) = (self.region_of[j], self.region_of[k]) {
                if a != b {
                    table[a * r + b] += u64::from(c);
                    table[b * r + a] += u64::from(c);
                }
            }
        }
        Ok(table)
    }
}

/// Region-level plug-in estimate.
///
/// The region pair `(r, s)` aggregates `|r|·|s|` voxel pairs, each out of `N`
/// streams, so its trial total is `N·|r|·|s|`. Working with the resulting
/// proportions keeps every region probability in `[0, 1]` and reduces to the
/// voxel-level estimator when every region is a single voxel. Baselines
/// average over all other regions of the partition.
pub fn estimate_ssc_region<T: Scalar>(counts: &StreamCounts, partition: &RegionPartition) -> Result<SscEstimate<T>> {
    let r = partition.n_regions();
    if r < 2 {
        return Err(Error::MaskTooSmall {
            label: partition.component_label.clone(),
            size: r,
        });
    }
    let table = partition.aggregate(counts)?;
    let streams = f64::from(counts.streams_per_seed());
    let prob = |a: usize, b: usize| -> T {
        let total = streams * (partition.region_size(a) * partition.region_size(b)) as f64;
        T::of(table[a * r + b] as f64 / total)
    };
    let denom = T::of_usize(r - 1);
    let baselines: Vec<T> = (0..r)
        .map(|a| (0..r).filter(|&b| b != a).map(|b| prob(a, b)).sum::<T>() / denom)
        .collect();
    let half = T::of(0.5);
    let (mut num, mut den) = (T::zero(), T::zero());
    let comp = &partition.component;
    for (i, &a) in comp.iter().enumerate() {
        for &b in &comp[i + 1..] {
            let base = (baselines[a] + baselines[b]) * half;
            num = num + prob(a, b) - base;
            den = den + T::one() - base;
        }
    }
    SscEstimate::from_parts(&partition.component_label, Level::Region, num, den)
}

/// Convenience: a region partition of singleton voxels, each its own region.
pub fn singleton_partition(n_voxels: usize, mask: &ComponentMask) -> Result<RegionPartition> {
    let regions = (0..n_voxels).map(|v| (format!("v{v}"), vec![v])).collect();
    RegionPartition::new(n_voxels, mask.label(), regions, mask.members().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CountRecord;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Literal double loop over ordered pairs `j ≠ k` with dense baselines.
    fn brute_force_theta(dense: &[Vec<f64>], members: &[usize], total: f64) -> f64 {
        let v = dense.len();
        let means: Vec<f64> = (0..v)
            .map(|j| (0..v).filter(|&u| u != j).map(|u| dense[j][u]).sum::<f64>() / (v as f64 - 1.0))
            .collect();
        let (mut num, mut den) = (0.0, 0.0);
        for &j in members {
            for &k in members {
                if j == k {
                    continue;
                }
                num += dense[j][k] - (means[j] + means[k]) / 2.0;
                den += total - (means[j] + means[k]) / 2.0;
            }
        }
        num / den
    }

    fn to_matrix(counts: &StreamCounts) -> Vec<Vec<f64>> {
        let v = counts.n_voxels();
        let mut m = vec![vec![0.0; v]; v];
        for (z, (j, k)) in counts.pair_index().pairs().enumerate() {
            let c = f64::from(counts.to_dense()[z]);
            m[j][k] = c;
            m[k][j] = c;
        }
        m
    }

    fn random_counts(rng: &mut ChaCha8Rng, v: usize, n: u32, mask: &[usize]) -> StreamCounts {
        let idx = PairIndex::new(v);
        let inside: Vec<bool> = (0..v).map(|i| mask.contains(&i)).collect();
        let vals: Vec<u32> = idx
            .pairs()
            .map(|(j, k)| {
                let hi = if inside[j] && inside[k] { n } else { n / 2 };
                rng.random_range(0..=hi)
            })
            .collect();
        StreamCounts::from_dense(v, n, &vals).unwrap()
    }

    #[test]
    fn table_one_theta_values() {
        let v = 100;
        let ic1: Vec<usize> = (0..12).collect();
        let ic2: Vec<usize> = (50..62).collect();
        let p = ProbabilityField::from_fn(v, |j, k| {
            if ic1.contains(&j) && ic1.contains(&k) {
                0.5
            } else if ic2.contains(&j) && ic2.contains(&k) {
                0.75
            } else {
                0.25
            }
        })
        .unwrap();
        let t1 = true_ssc_from_probabilities(&p, &ComponentMask::new("1", ic1.clone(), v).unwrap()).unwrap();
        let t2 = true_ssc_from_probabilities(&p, &ComponentMask::new("2", ic2.clone(), v).unwrap()).unwrap();
        // Closed form: (p_in − p̄)/(1 − p̄), p̄ = (11 p_in + 88·0.25)/99.
        let closed = |p_in: f64| {
            let pbar = (11.0 * p_in + 88.0 * 0.25) / 99.0;
            (p_in - pbar) / (1.0 - pbar)
        };
        assert!((t1 - closed(0.5)).abs() < 1e-14);
        assert!((t2 - closed(0.75)).abs() < 1e-14);
        assert_eq!(format!("{t1:.4}"), "0.3077");
        assert_eq!(format!("{t2:.4}"), "0.6400");
    }

    #[test]
    fn constant_probabilities_give_zero() {
        let p = ProbabilityField::<f64>::constant(9, 0.3).unwrap();
        let m = ComponentMask::new("a", vec![1, 4, 6], 9).unwrap();
        assert!(true_ssc_from_probabilities(&p, &m).unwrap().abs() < 1e-15);
    }

    #[test]
    fn full_within_zero_outside_gives_one() {
        let m = ComponentMask::new("a", vec![0, 2, 3], 6).unwrap();
        let p =
            ProbabilityField::<f64>::from_fn(6, |j, k| if m.contains(j) && m.contains(k) { 1.0 } else { 0.0 }).unwrap();
        assert!((true_ssc_from_probabilities(&p, &m).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn saturated_baseline_is_degenerate() {
        let p = ProbabilityField::constant(5, 1.0).unwrap();
        let m = ComponentMask::new("a", vec![0, 1], 5).unwrap();
        assert!(matches!(
            true_ssc_from_probabilities(&p, &m),
            Err(Error::DegenerateBaseline(_))
        ));
        let c = StreamCounts::from_dense(5, 4, &[4; 10]).unwrap();
        assert!(matches!(estimate_ssc::<f64>(&c, &m), Err(Error::DegenerateBaseline(_))));
    }

    #[test]
    fn count_estimator_edge_cases() {
        let c = StreamCounts::from_dense(6, 20, &[7; 15]).unwrap();
        let m = ComponentMask::new("a", vec![0, 3, 5], 6).unwrap();
        assert!(estimate_ssc::<f64>(&c, &m).unwrap().theta_hat.abs() < 1e-15);

        let idx = PairIndex::new(6);
        let vals: Vec<u32> = idx
            .pairs()
            .map(|(j, k)| if m.contains(j) && m.contains(k) { 20 } else { 0 })
            .collect();
        let c = StreamCounts::from_dense(6, 20, &vals).unwrap();
        let est = estimate_ssc::<f64>(&c, &m).unwrap();
        assert!((est.theta_hat - 1.0).abs() < 1e-15);
        assert_eq!(est.theta_hat, est.numerator / est.denominator);
        let est32 = estimate_ssc::<f32>(&c, &m).unwrap();
        assert!((est32.theta_hat - 1.0).abs() < 1e-6);
    }

    #[test]
    fn mask_outside_grid_is_rejected() {
        let c = StreamCounts::from_dense(4, 20, &[1; 6]).unwrap();
        let m = ComponentMask::new("a", vec![1, 7], 10).unwrap();
        assert!(matches!(estimate_ssc::<f64>(&c, &m), Err(Error::UnknownVoxel(_))));
    }

    #[test]
    fn direct_estimator_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let members = vec![2, 5, 6, 11, 17];
        for _ in 0..20 {
            let counts = random_counts(&mut rng, 20, 50, &members);
            let mask = ComponentMask::new("a", members.clone(), 20).unwrap();
            let est = estimate_ssc::<f64>(&counts, &mask).unwrap();
            let oracle = brute_force_theta(&to_matrix(&counts), &members, 50.0);
            assert!(
                (est.theta_hat - oracle).abs() < 1e-12,
                "{} vs {}",
                est.theta_hat,
                oracle
            );
        }
    }

    #[test]
    fn linear_form_hand_example() {
        // V=4, Ω={1,2} (0-based {0,1}), N=10, N_12=8, every other pair 2.
        let recs = [(0, 1, 8), (0, 2, 2), (0, 3, 2), (1, 2, 2), (1, 3, 2), (2, 3, 2)]
            .map(|(seed, target, count)| CountRecord { seed, target, count });
        let counts = StreamCounts::from_records(4, 10, &recs).unwrap();
        let mask = ComponentMask::new("a", vec![0, 1], 4).unwrap();
        // N̄_1 = N̄_2 = (8+2+2)/3 = 4: θ̂ = (8 − 4)/(10 − 4) = 2/3.
        let direct = estimate_ssc::<f64>(&counts, &mask).unwrap();
        let linear = estimate_ssc_linear::<f64>(&counts, &mask).unwrap();
        assert!((direct.theta_hat - 2.0 / 3.0).abs() < 1e-15);
        assert!((linear.theta_hat - 2.0 / 3.0).abs() < 1e-15);
        // A = (1/6)(C_1 + C_2): 1/3 on (1,2), 1/6 on the four touching pairs, b = 10.
        let form = LinearForm::<f64>::new(&mask, 4, 10).unwrap();
        let a = form.a_dense();
        assert!((a[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!(a[1..5].iter().all(|&x| (x - 1.0 / 6.0).abs() < 1e-15));
        assert_eq!(a[5], 0.0);
        assert_eq!(form.b(), 10.0);
    }

    #[test]
    fn linear_form_constant_b_and_indicator_sizes() {
        let mask = ComponentMask::new("a", (0..12).collect(), 100).unwrap();
        let form = LinearForm::<f64>::new(&mask, 100, 20).unwrap();
        assert_eq!(form.b(), 1320.0);
        assert_eq!(form.c_ell_dense().iter().filter(|&&c| c == 1.0).count(), 66);
        assert_eq!(form.support().len(), 66 + 12 * 88);
        for j in [0, 50, 99] {
            let cj = voxel_indicator::<f64>(100, j).unwrap();
            assert_eq!(cj.iter().filter(|&&c| c == 1.0).count(), 99);
        }
        // A is the scaled sum of member indicators.
        let mut sum = vec![0.0; PairIndex::new(100).len()];
        for &j in mask.members() {
            for (s, c) in sum.iter_mut().zip(voxel_indicator::<f64>(100, j).unwrap()) {
                *s += c;
            }
        }
        let scale = 11.0 / (2.0 * 99.0);
        for (a, s) in form.a_dense().iter().zip(&sum) {
            assert!((a - scale * s).abs() < 1e-15);
        }
    }

    #[test]
    fn region_level_with_singletons_matches_voxel_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let members = vec![1, 4, 7, 8];
        let counts = random_counts(&mut rng, 12, 30, &members);
        let mask = ComponentMask::new("a", members, 12).unwrap();
        let part = singleton_partition(12, &mask).unwrap();
        let voxel = estimate_ssc::<f64>(&counts, &mask).unwrap();
        let region = estimate_ssc_region::<f64>(&counts, &part).unwrap();
        assert!((voxel.theta_hat - region.theta_hat).abs() < 1e-13);
        assert_eq!(region.level, Level::Region);
    }

    #[test]
    fn region_level_saturated_pair_is_one() {
        // regions A={0,1}, B={2,3} form the component, C={4,5,6} is the rest.
        let v = 7;
        let idx = PairIndex::new(v);
        let region = |x: usize| {
            if x < 2 {
                0
            } else if x < 4 {
                1
            } else {
                2
            }
        };
        let vals: Vec<u32> = idx
            .pairs()
            .map(|(j, k)| {
                if region(j) != region(k) && region(j) < 2 && region(k) < 2 {
                    10
                } else {
                    0
                }
            })
            .collect();
        let counts = StreamCounts::from_dense(v, 10, &vals).unwrap();
        let part = RegionPartition::new(
            v,
            "ab",
            vec![
                ("A".into(), vec![0, 1]),
                ("B".into(), vec![2, 3]),
                ("C".into(), vec![4, 5, 6]),
            ],
            vec![0, 1],
        )
        .unwrap();
        let est = estimate_ssc_region::<f64>(&counts, &part).unwrap();
        assert!((est.theta_hat - 1.0).abs() < 1e-15);
    }

    #[test]
    fn region_level_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = 15;
        let counts = random_counts(&mut rng, v, 40, &[0, 1, 2, 3, 4, 5]);
        let regions = vec![
            ("r0".to_string(), vec![0, 1]),
            ("r1".to_string(), vec![2, 3, 4]),
            ("r2".to_string(), vec![5]),
            ("r3".to_string(), vec![6, 7, 8, 9]),
            ("r4".to_string(), vec![10, 11, 12, 13, 14]),
        ];
        let part = RegionPartition::new(v, "c", regions.clone(), vec![0, 1, 2]).unwrap();
        let est = estimate_ssc_region::<f64>(&counts, &part).unwrap();

        let m = to_matrix(&counts);
        let r = regions.len();
        let mut p = vec![vec![0.0; r]; r];
        for a in 0..r {
            for b in 0..r {
                if a == b {
                    continue;
                }
                let mut s = 0.0;
                for &j in &regions[a].1 {
                    for &k in &regions[b].1 {
                        s += m[j][k];
                    }
                }
                p[a][b] = s / (40.0 * (regions[a].1.len() * regions[b].1.len()) as f64);
            }
        }
        let oracle = brute_force_theta(&p, &[0, 1, 2], 1.0);
        assert!((est.theta_hat - oracle).abs() < 1e-13);
    }

    #[test]
    fn parcellation_split_by_mask() {
        let mask = ComponentMask::new("m", vec![0, 1, 4], 6).unwrap();
        let assignment: Vec<(usize, String)> = vec![
            (0, "x".into()),
            (1, "x".into()),
            (2, "x".into()),
            (3, "y".into()),
            (4, "y".into()),
            (5, "z".into()),
        ];
        let part = RegionPartition::from_parcellation(6, &assignment, &mask).unwrap();
        assert_eq!(part.n_regions(), 5);
        assert_eq!(part.component_regions().len(), 2);
        let single = ComponentMask::new("s", vec![0, 1], 6).unwrap();
        assert!(matches!(
            RegionPartition::from_parcellation(6, &assignment, &single),
            Err(Error::MaskTooSmall { .. })
        ));
    }

    fn instance() -> impl Strategy<Value = (StreamCounts, ComponentMask)> {
        (4usize..40, any::<u64>()).prop_map(|(v, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let size = rng.random_range(2..=v.min(10));
            let mut members: Vec<usize> = (0..v).collect();
            for i in 0..size {
                let j = rng.random_range(i..v);
                members.swap(i, j);
            }
            members.truncate(size);
            let counts = random_counts(&mut rng, v, 25, &members);
            (counts, ComponentMask::new("p", members, v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn exact_probabilities_reproduce_population_value((counts, mask) in instance()) {
            let n = f64::from(counts.streams_per_seed());
            let dense = counts.to_dense();
            let p = ProbabilityField::from_dense(counts.n_voxels(), dense.iter().map(|&c| f64::from(c) / n).collect()).unwrap();
            if let (Ok(est), Ok(truth)) = (estimate_ssc::<f64>(&counts, &mask), true_ssc_from_probabilities(&p, &mask)) {
                prop_assert!((est.theta_hat - truth).abs() < 1e-12);
            }
        }

        #[test]
        fn invariant_to_voxel_relabeling((counts, mask) in instance(), seed in any::<u64>()) {
            let v = counts.n_voxels();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut perm: Vec<usize> = (0..v).collect();
            for i in (1..v).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let recs: Vec<CountRecord> = counts.to_records().into_iter()
                .map(|r| CountRecord { seed: perm[r.seed], target: perm[r.target], count: r.count })
                .collect();
            let relabeled = StreamCounts::from_records(v, counts.streams_per_seed(), &recs).unwrap();
            let mask2 = ComponentMask::new("p", mask.members().iter().map(|&m| perm[m]).collect(), v).unwrap();
            let a = estimate_ssc::<f64>(&counts, &mask).unwrap().theta_hat;
            let b = estimate_ssc::<f64>(&relabeled, &mask2).unwrap().theta_hat;
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn constant_shift_moves_only_the_denominator((counts, mask) in instance(), shift in 1u32..5) {
            let n = counts.streams_per_seed() + 5;
            let dense = counts.to_dense();
            let base = StreamCounts::from_dense(counts.n_voxels(), n, &dense).unwrap();
            let shifted: Vec<u32> = dense.iter().map(|&c| c + shift).collect();
            let shifted = StreamCounts::from_dense(counts.n_voxels(), n, &shifted).unwrap();
            let a = estimate_ssc::<f64>(&base, &mask).unwrap();
            let b = estimate_ssc::<f64>(&shifted, &mask).unwrap();
            prop_assert!((a.numerator - b.numerator).abs() < 1e-9 * (1.0 + a.numerator.abs()));
            // Every baseline rises by the shift; N does not.
            let pairs = (mask.len() * (mask.len() - 1) / 2) as f64;
            let expect = a.denominator - pairs * f64::from(shift);
            prop_assert!((b.denominator - expect).abs() < 1e-9 * (1.0 + expect.abs()));
        }

        #[test]
        fn linear_route_equals_direct((counts, mask) in instance()) {
            let d = estimate_ssc::<f64>(&counts, &mask).unwrap();
            let l = estimate_ssc_linear::<f64>(&counts, &mask).unwrap();
            prop_assert!((d.numerator - l.numerator).abs() <= 1e-10 * d.numerator.abs().max(1.0));
            prop_assert!((d.denominator - l.denominator).abs() <= 1e-10 * d.denominator.abs());
        }
    }
}
