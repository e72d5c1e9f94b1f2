//! Empirical semivariogram over pair-of-pair distances and parametric fits.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ComponentMask, StreamCounts, VoxelGrid};
use crate::rng::{purpose, stream};
use crate::scalar::Scalar;
use crate::spatial::distance::PairGeometry;

/// Parametric semivariogram family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Exponential,
    Gaussian,
    Spherical,
}

impl Family {
    /// Normalized structure function `f(h)` with `f(0) = 0` and `f(∞) = 1`.
    pub fn shape<T: Scalar>(self, h: T) -> T {
        match self {
            Family::Exponential => T::one() - (-h).exp(),
            Family::Gaussian => T::one() - (-h * h).exp(),
            Family::Spherical => {
                if h >= T::one() {
                    T::one()
                } else {
                    T::of(1.5) * h - T::of(0.5) * h * h * h
                }
            }
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "exponential" => Ok(Family::Exponential),
            "gaussian" => Ok(Family::Gaussian),
            "spherical" => Ok(Family::Spherical),
            other => Err(Error::invalid(format!("unknown semivariogram family {other:?}"))),
        }
    }
}

/// `γ(d) = c₀ + c_e·f(d/a)` for `d > 0`, `γ(0) = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariogramModel<T> {
    pub family: Family,
    pub nugget: T,
    pub partial_sill: T,
    pub range: T,
}

impl<T: Scalar> VariogramModel<T> {
    pub fn new(family: Family, nugget: T, partial_sill: T, range: T) -> Result<Self> {
        let ok = |x: T| x.is_finite() && x >= T::zero();
        if !ok(nugget) || !ok(partial_sill) || !ok(range) || range == T::zero() {
            return Err(Error::invalid(format!(
                "semivariogram parameters must be finite, nonnegative, range > 0: ({nugget}, {partial_sill}, {range})"
            )));
        }
        Ok(Self {
            family,
            nugget,
            partial_sill,
            range,
        })
    }

    pub fn sill(&self) -> T {
        self.nugget + self.partial_sill
    }

    pub fn gamma(&self, d: T) -> T {
        if d <= T::zero() {
            T::zero()
        } else {
            self.nugget + self.partial_sill * self.family.shape(d / self.range)
        }
    }

    /// `C(d) = sill − γ(d)` for `d > 0`, floored at zero; `C(0)` is the sill.
    pub fn covariance(&self, d: T) -> T {
        if d <= T::zero() {
            self.sill()
        } else {
            (self.partial_sill * (T::one() - self.family.shape(d / self.range))).max(T::zero())
        }
    }
}

/// One lag bin `[lower, upper)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagBin<T> {
    pub lower: T,
    pub upper: T,
    /// Mean distance of the combinations in the bin; the bin midpoint when empty.
    pub mean_lag: T,
    pub gamma: T,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinTable<T> {
    pub bins: Vec<LagBin<T>>,
    /// Combinations evaluated (sampled or enumerated).
    pub combinations: u64,
    pub exhaustive: bool,
}

impl<T: Scalar> BinTable<T> {
    pub fn nonempty(&self) -> impl Iterator<Item = &LagBin<T>> {
        self.bins.iter().filter(|b| b.count > 0)
    }

    /// `lower,upper,mean_lag,gamma,count` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lower,upper,mean_lag,gamma,count\n");
        for b in &self.bins {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                b.lower, b.upper, b.mean_lag, b.gamma, b.count
            ));
        }
        out
    }
}

/// Settings for the empirical semivariogram and its fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VariogramConfig {
    pub family: Family,
    /// Lag bin edges; `None` picks 15 equal bins up to half the grid diameter.
    pub edges: Option<Vec<f64>>,
    /// Maximum number of pair-of-pair combinations evaluated.
    pub budget: u64,
    pub seed: u64,
    /// Fit one semivariogram to all subjects instead of one per subject.
    pub pooled: bool,
}

impl Default for VariogramConfig {
    fn default() -> Self {
        Self {
            family: Family::Exponential,
            edges: None,
            budget: 2_000_000,
            seed: 0,
            pooled: false,
        }
    }
}

/// Default lag edges for `grid`.
pub fn default_edges(grid: &VoxelGrid) -> Vec<f64> {
    let table = grid.distance_table();
    let diameter = table.iter().copied().fold(0.0, f64::max);
    let top = if diameter > 0.0 { diameter / 2.0 } else { 1.0 };
    (0..=15).map(|i| top * i as f64 / 15.0).collect()
}

/// Pair-of-pair combinations and their bins, fixed once per grid so every
/// subject is binned on the same sample.
#[derive(Debug, Clone)]
pub struct LagPlan<T> {
    edges: Vec<T>,
    n_pairs: usize,
    combos: Vec<(u32, u32)>,
    bin_of: Vec<u16>,
    lag_sum: Vec<T>,
    counts: Vec<u64>,
    evaluated: u64,
    exhaustive: bool,
}

const CHUNK: usize = 1 << 16;

/// Pair-of-pairs, its lag bin and its distance.
type Binned<T> = ((u32, u32), u16, T);

impl<T: Scalar> LagPlan<T> {
    pub fn new(grid: &VoxelGrid, edges: &[f64], budget: u64, seed: u64) -> Result<Self> {
        if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) || edges.iter().any(|e| !e.is_finite()) {
            return Err(Error::invalid("lag edges must be finite and strictly increasing"));
        }
        if edges.len() - 1 > u16::MAX as usize {
            return Err(Error::invalid("too many lag bins"));
        }
        let geo = PairGeometry::<T>::new(grid);
        let n_pairs = geo.pair_index().len();
        if n_pairs < 2 {
            return Err(Error::invalid("semivariogram needs at least two voxel pairs"));
        }
        if n_pairs > u32::MAX as usize {
            return Err(Error::invalid("too many voxel pairs"));
        }
        let total = n_pairs as u128 * (n_pairs as u128 - 1) / 2;
        let exhaustive = total <= budget as u128;
        let candidates: Vec<(u32, u32)> = if exhaustive {
            (1..n_pairs as u32)
                .flat_map(|z2| (0..z2).map(move |z1| (z1, z2)))
                .collect()
        } else {
            let mut rng = stream(seed, &[purpose::VARIOGRAM]);
            (0..budget)
                .map(|_| {
                    let a = rng.random_range(0..n_pairs as u32);
                    let mut b = rng.random_range(0..n_pairs as u32 - 1);
                    if b >= a {
                        b += 1;
                    }
                    (a.min(b), a.max(b))
                })
                .collect()
        };
        let tedges: Vec<T> = edges.iter().map(|&e| T::of(e)).collect();
        let index = geo.pair_index();
        let binned: Vec<Vec<Binned<T>>> = candidates
            .par_chunks(CHUNK)
            .map(|chunk| {
                chunk
                    .iter()
                    .filter_map(|&(a, b)| {
                        let d = geo.between(index.pair(a as usize).ok()?, index.pair(b as usize).ok()?);
                        bin_index(&tedges, d).map(|bin| ((a, b), bin as u16, d))
                    })
                    .collect()
            })
            .collect();
        let n_bins = edges.len() - 1;
        let mut plan = Self {
            edges: tedges,
            n_pairs,
            combos: Vec::new(),
            bin_of: Vec::new(),
            lag_sum: vec![T::zero(); n_bins],
            counts: vec![0; n_bins],
            evaluated: candidates.len() as u64,
            exhaustive,
        };
        for (combo, bin, d) in binned.into_iter().flatten() {
            plan.combos.push(combo);
            plan.bin_of.push(bin);
            plan.lag_sum[bin as usize] = plan.lag_sum[bin as usize] + d;
            plan.counts[bin as usize] += 1;
        }
        Ok(plan)
    }

    pub fn n_bins(&self) -> usize {
        self.counts.len()
    }

    pub fn is_exhaustive(&self) -> bool {
        self.exhaustive
    }

    /// Matheron estimate for values indexed by pair.
    pub fn semivariogram(&self, values: &[T]) -> Result<BinTable<T>> {
        self.pooled(std::slice::from_ref(&values))
    }

    /// Matheron estimate accumulating squared differences over several fields
    /// (one per subject) on the shared combination sample.
    pub fn pooled<V: AsRef<[T]> + Sync>(&self, fields: &[V]) -> Result<BinTable<T>> {
        if fields.is_empty() {
            return Err(Error::invalid("no fields to pool"));
        }
        for f in fields {
            if f.as_ref().len() != self.n_pairs {
                return Err(Error::invalid(format!(
                    "pair field has {} values, expected {}",
                    f.as_ref().len(),
                    self.n_pairs
                )));
            }
        }
        let n_bins = self.n_bins();
        let partial: Vec<Vec<T>> = self
            .combos
            .par_chunks(CHUNK)
            .zip(self.bin_of.par_chunks(CHUNK))
            .map(|(combos, bins)| {
                let mut acc = vec![T::zero(); n_bins];
                for (&(a, b), &bin) in combos.iter().zip(bins) {
                    for f in fields {
                        let f = f.as_ref();
                        let diff = f[a as usize] - f[b as usize];
                        acc[bin as usize] = acc[bin as usize] + diff * diff;
                    }
                }
                acc
            })
            .collect();
        let mut sq = vec![T::zero(); n_bins];
        for chunk in partial {
            for (s, c) in sq.iter_mut().zip(chunk) {
                *s = *s + c;
            }
        }
        let m = T::of_usize(fields.len());
        let bins = (0..n_bins)
            .map(|i| {
                let (lower, upper) = (self.edges[i], self.edges[i + 1]);
                let count = self.counts[i];
                let (mean_lag, gamma) = if count == 0 {
                    ((lower + upper) * T::of(0.5), T::zero())
                } else {
                    let c = T::of(count as f64);
                    (self.lag_sum[i] / c, sq[i] / (T::of(2.0) * c * m))
                };
                LagBin {
                    lower,
                    upper,
                    mean_lag,
                    gamma,
                    count,
                }
            })
            .collect();
        Ok(BinTable {
            bins,
            combinations: self.evaluated,
            exhaustive: self.exhaustive,
        })
    }
}

fn bin_index<T: Scalar>(edges: &[T], d: T) -> Option<usize> {
    if d < edges[0] || d >= edges[edges.len() - 1] {
        return None;
    }
    Some(edges.partition_point(|&e| e <= d) - 1)
}

/// Counts as a dense pair field.
pub fn count_field<T: Scalar>(counts: &StreamCounts) -> Vec<T> {
    counts.to_dense().into_iter().map(|c| T::of(f64::from(c))).collect()
}

/// Counts with the mean of their class removed. A pair's class is the mask
/// holding both of its voxels (masks are expected to be disjoint); all
/// remaining pairs form one more class. Removing the class means keeps the
/// connectivity signal itself out of the semivariogram.
pub fn class_residuals<T: Scalar>(counts: &StreamCounts, masks: &[ComponentMask]) -> Vec<T> {
    let n = counts.n_voxels();
    let mut class = vec![masks.len(); n];
    for (c, m) in masks.iter().enumerate().rev() {
        for &v in m.members() {
            class[v] = c;
        }
    }
    let index = counts.pair_index();
    let mut field = count_field::<T>(counts);
    let labels: Vec<usize> = index
        .pairs()
        .map(|(j, k)| {
            if class[j] == class[k] && class[j] < masks.len() && masks[class[j]].contains(k) {
                class[j]
            } else {
                masks.len()
            }
        })
        .collect();
    let mut sum = vec![T::zero(); masks.len() + 1];
    let mut cnt = vec![0usize; masks.len() + 1];
    for (&c, &x) in labels.iter().zip(&field) {
        sum[c] = sum[c] + x;
        cnt[c] += 1;
    }
    let mean: Vec<T> = sum
        .iter()
        .zip(&cnt)
        .map(|(&s, &c)| if c > 0 { s / T::of_usize(c) } else { T::zero() })
        .collect();
    for (x, &c) in field.iter_mut().zip(&labels) {
        *x = *x - mean[c];
    }
    field
}

/// Semivariogram of raw counts for one subject.
pub fn empirical_semivariogram<T: Scalar>(
    counts: &StreamCounts,
    grid: &VoxelGrid,
    edges: &[f64],
    budget: u64,
    seed: u64,
) -> Result<BinTable<T>> {
    if grid.len() != counts.n_voxels() {
        return Err(Error::invalid("grid and counts disagree on the number of voxels"));
    }
    LagPlan::<T>::new(grid, edges, budget, seed)?.semivariogram(&count_field::<T>(counts))
}

/// Fitted model with diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemivariogramFit<T> {
    pub model: VariogramModel<T>,
    /// Weighted sum of squared residuals over nonempty bins.
    pub residual: T,
    pub bins: BinTable<T>,
    /// Set when every bin value is zero and the parameters are placeholders.
    pub degenerate: bool,
}

/// Relative floor on the partial sill.
const SILL_FLOOR: f64 = 1e-12;
/// Start positions on the log range axis, in the order they are tried.
const START_POSITIONS: [f64; 5] = [0.5, 0.1, 0.9, 0.3, 0.7];
const BRACKET_HALF_WIDTH: f64 = 0.25;

/// Weighted least squares fit with five range starts.
pub fn fit_semivariogram<T: Scalar>(table: &BinTable<T>, family: Family) -> Result<SemivariogramFit<T>> {
    fit_semivariogram_with_starts(table, family, START_POSITIONS.len())
}

/// Fit using the first `starts` range starts (1 to 5).
///
/// For a fixed range the model is linear in `(c₀, c_e)`, so those are solved
/// exactly under their bounds and only the range is searched (golden section
/// inside a bracket around each start on a log scale).
pub fn fit_semivariogram_with_starts<T: Scalar>(
    table: &BinTable<T>,
    family: Family,
    starts: usize,
) -> Result<SemivariogramFit<T>> {
    if !(1..=START_POSITIONS.len()).contains(&starts) {
        return Err(Error::invalid(format!("starts must be in 1..=5, got {starts}")));
    }
    let pts: Vec<(f64, f64, f64)> = table
        .nonempty()
        .map(|b| (b.mean_lag.to_f64_lossy(), b.gamma.to_f64_lossy(), b.count as f64))
        .collect();
    if pts.len() < 3 {
        return Err(Error::InsufficientLags(pts.len()));
    }
    if pts.iter().any(|p| !p.0.is_finite() || !p.1.is_finite()) {
        return Err(Error::FitDiverged);
    }
    let max_lag = pts.iter().map(|p| p.0).fold(0.0, f64::max);
    if max_lag <= 0.0 {
        return Err(Error::InsufficientLags(0));
    }
    let (lo, hi) = ((max_lag * 1e-3).ln(), (max_lag * 10.0).ln());
    let scale = pts.iter().map(|p| p.1.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        let model = VariogramModel::new(family, T::zero(), T::of(SILL_FLOOR), T::of(max_lag * 1e-3))?;
        return Ok(SemivariogramFit {
            model,
            residual: T::zero(),
            bins: table.clone(),
            degenerate: true,
        });
    }
    let floor = SILL_FLOOR * scale;
    let profile = |log_a: f64| linear_part(&pts, family, log_a.exp(), floor);
    let mut best: Option<(f64, f64, f64, f64)> = None;
    for &u in &START_POSITIONS[..starts] {
        let width = hi - lo;
        let a = (lo + (u - BRACKET_HALF_WIDTH) * width).max(lo);
        let b = (lo + (u + BRACKET_HALF_WIDTH) * width).min(hi);
        let log_a = golden_section(|x| profile(x).2, a, b);
        let (c0, ce, sse) = profile(log_a);
        if best.is_none_or(|bst| sse < bst.3) {
            best = Some((c0, ce, log_a.exp(), sse));
        }
    }
    let (c0, ce, range, sse) = best.expect("at least one start");
    if ![c0, ce, range, sse].iter().all(|x| x.is_finite()) {
        return Err(Error::FitDiverged);
    }
    Ok(SemivariogramFit {
        model: VariogramModel::new(family, T::of(c0), T::of(ce), T::of(range))?,
        residual: T::of(sse),
        bins: table.clone(),
        degenerate: false,
    })
}

/// Best `(c₀ ≥ 0, c_e ≥ floor)` for a fixed range, with its weighted SSE.
fn linear_part(pts: &[(f64, f64, f64)], family: Family, range: f64, floor: f64) -> (f64, f64, f64) {
    let (mut sw, mut swf, mut swff, mut swg, mut swfg) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let f: Vec<f64> = pts.iter().map(|p| family.shape(p.0 / range)).collect();
    for (p, &fi) in pts.iter().zip(&f) {
        let (g, w) = (p.1, p.2);
        sw += w;
        swf += w * fi;
        swff += w * fi * fi;
        swg += w * g;
        swfg += w * fi * g;
    }
    let sse = |c0: f64, ce: f64| -> f64 {
        pts.iter()
            .zip(&f)
            .map(|(p, &fi)| p.2 * (p.1 - c0 - ce * fi).powi(2))
            .sum()
    };
    let mut candidates = Vec::with_capacity(3);
    let det = sw * swff - swf * swf;
    if det > 1e-12 * sw * swff {
        let c0 = (swff * swg - swf * swfg) / det;
        let ce = (sw * swfg - swf * swg) / det;
        if c0 >= 0.0 && ce >= floor {
            candidates.push((c0, ce));
        }
    }
    if swff > 0.0 {
        candidates.push((0.0, (swfg / swff).max(floor)));
    }
    candidates.push((((swg - floor * swf) / sw).max(0.0), floor));
    candidates
        .into_iter()
        .map(|(c0, ce)| (c0, ce, sse(c0, ce)))
        .min_by(|x, y| x.2.total_cmp(&y.2))
        .expect("floor candidate always present")
}

fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if (b - a).abs() < 1e-12 {
            break;
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    // Ends of the bracket can beat the interior on monotone profiles.
    [(a, f(a)), (b, f(b)), ((a + b) / 2.0, f((a + b) / 2.0))]
        .into_iter()
        .min_by(|x, y| x.1.total_cmp(&y.1))
        .map(|x| x.0)
        .expect("non-empty")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::StreamCounts;
    use proptest::prelude::*;

    fn exact_table(model: &VariogramModel<f64>, lags: &[f64]) -> BinTable<f64> {
        BinTable {
            bins: lags
                .iter()
                .map(|&h| LagBin {
                    lower: h - 0.05,
                    upper: h + 0.05,
                    mean_lag: h,
                    gamma: model.gamma(h),
                    count: 100 + (h * 10.0) as u64,
                })
                .collect(),
            combinations: 0,
            exhaustive: true,
        }
    }

    #[test]
    fn model_limits() {
        let m = VariogramModel::<f64>::new(Family::Exponential, 1.0, 4.0, 1.0).unwrap();
        assert_eq!(m.gamma(0.0), 0.0);
        assert!((m.gamma(1e-12) - 1.0).abs() < 1e-9);
        assert!((m.gamma(1e3) - 5.0).abs() < 1e-12);
        assert_eq!(m.covariance(0.0), 5.0);
        assert!(m.covariance(1e3) < 1e-12);
        assert!((m.covariance(1.0) - 4.0 * (-1.0f64).exp()).abs() < 1e-12);
        let s = VariogramModel::<f64>::new(Family::Spherical, 0.0, 2.0, 3.0).unwrap();
        assert_eq!(s.gamma(3.0), 2.0);
        assert_eq!(s.covariance(4.0), 0.0);
        assert!((s.gamma(1.5) - 2.0 * (0.75 - 0.0625)).abs() < 1e-12);
    }

    #[test]
    fn two_pairs_one_bin() {
        // Collinear voxels at 0, 1, 10. Pairs (0,2) and (1,2) are 0.5 apart;
        // the other two combinations are at 4.5 and 5.
        let grid = VoxelGrid::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [10.0, 0.0, 0.0]]).unwrap();
        let counts = StreamCounts::from_dense(3, 20, &[0, 4, 8]).unwrap();
        let t = empirical_semivariogram::<f64>(&counts, &grid, &[0.0, 1.0], 100, 0).unwrap();
        assert_eq!(t.bins[0].count, 1);
        assert_eq!(t.bins[0].gamma, 8.0);
        assert_eq!(t.bins[0].mean_lag, 0.5);
    }

    #[test]
    fn constant_field_is_flat_zero() {
        let grid = VoxelGrid::regular_2d(4, 4).unwrap();
        let n = 16 * 15 / 2;
        let counts = StreamCounts::from_dense(16, 20, &vec![7; n]).unwrap();
        let t = empirical_semivariogram::<f64>(&counts, &grid, &default_edges(&grid), 1_000_000, 1).unwrap();
        assert!(t.exhaustive);
        assert!(t.bins.iter().all(|b| b.gamma == 0.0));
        let fit = fit_semivariogram(&t, Family::Exponential).unwrap();
        assert!(fit.degenerate);
        assert_eq!(fit.model.nugget, 0.0);
        assert_eq!(fit.residual, 0.0);
        let max_lag = t.nonempty().map(|b| b.mean_lag).fold(0.0, f64::max);
        assert!((fit.model.range - 1e-3 * max_lag).abs() < 1e-15);
    }

    #[test]
    fn empty_bins_are_reported() {
        let grid = VoxelGrid::regular_2d(3, 3).unwrap();
        let counts = StreamCounts::from_dense(9, 20, &(0..36).map(|i| i % 5).collect::<Vec<_>>()).unwrap();
        let t = empirical_semivariogram::<f64>(&counts, &grid, &[0.0, 0.1, 0.2, 5.0], 10_000, 0).unwrap();
        assert_eq!(t.bins[0].count, 0);
        assert_eq!(t.bins[1].count, 0);
        assert!(t.bins[2].count > 0);
    }

    #[test]
    fn exhaustive_matches_brute_force() {
        let grid = VoxelGrid::regular_2d(4, 3).unwrap();
        let v = grid.len();
        let idx = crate::model::PairIndex::new(v);
        let dense: Vec<u32> = (0..idx.len() as u32).map(|z| (z * 7 + 3) % 11).collect();
        let counts = StreamCounts::from_dense(v, 20, &dense).unwrap();
        let edges = [0.0, 1.0, 2.0, 3.0];
        let t = empirical_semivariogram::<f64>(&counts, &grid, &edges, u64::MAX, 0).unwrap();
        let mut sq = [0.0; 3];
        let mut cnt = [0u64; 3];
        for z1 in 0..idx.len() {
            for z2 in z1 + 1..idx.len() {
                let (j, k) = idx.pair(z1).unwrap();
                let (a, b) = idx.pair(z2).unwrap();
                let d: f64 = crate::spatial::pair_distance(&grid, j, k, a, b).unwrap();
                if let Some(i) = edges.windows(2).position(|w| d >= w[0] && d < w[1]) {
                    sq[i] += (dense[z1] as f64 - dense[z2] as f64).powi(2);
                    cnt[i] += 1;
                }
            }
        }
        for i in 0..3 {
            assert_eq!(t.bins[i].count, cnt[i]);
            assert!((t.bins[i].gamma - sq[i] / (2.0 * cnt[i] as f64)).abs() < 1e-9);
        }
    }

    #[test]
    fn sampled_plan_is_reproducible() {
        let grid = VoxelGrid::regular_2d(6, 6).unwrap();
        let a = LagPlan::<f64>::new(&grid, &default_edges(&grid), 5_000, 9).unwrap();
        let b = LagPlan::<f64>::new(&grid, &default_edges(&grid), 5_000, 9).unwrap();
        assert!(!a.is_exhaustive());
        assert_eq!(a.combos, b.combos);
        assert_eq!(a.counts, b.counts);
    }

    #[test]
    fn noiseless_recovery_all_families() {
        let lags: Vec<f64> = (1..=20).map(|i| 0.25 * i as f64).collect();
        for family in [Family::Exponential, Family::Gaussian, Family::Spherical] {
            let truth = VariogramModel::new(family, 1.0, 4.0, 1.0).unwrap();
            let fit = fit_semivariogram(&exact_table(&truth, &lags), family).unwrap();
            assert!((fit.model.nugget - 1.0).abs() < 1e-6, "{family:?} {:?}", fit.model);
            assert!(
                (fit.model.partial_sill - 4.0).abs() < 1e-6,
                "{family:?} {:?}",
                fit.model
            );
            assert!((fit.model.range - 1.0).abs() < 1e-6, "{family:?} {:?}", fit.model);
            assert!(!fit.degenerate);
        }
    }

    #[test]
    fn too_few_bins() {
        let truth = VariogramModel::<f64>::new(Family::Exponential, 1.0, 4.0, 1.0).unwrap();
        let t = exact_table(&truth, &[0.5, 1.0]);
        assert!(matches!(
            fit_semivariogram(&t, Family::Exponential),
            Err(Error::InsufficientLags(2))
        ));
    }

    #[test]
    fn non_finite_bins_diverge() {
        let truth = VariogramModel::<f64>::new(Family::Exponential, 1.0, 4.0, 1.0).unwrap();
        let mut t = exact_table(&truth, &[0.5, 1.0, 1.5, 2.0]);
        t.bins[1].gamma = f64::NAN;
        assert!(matches!(
            fit_semivariogram(&t, Family::Exponential),
            Err(Error::FitDiverged)
        ));
    }

    #[test]
    fn class_residuals_center_each_class() {
        let v = 6;
        let idx = crate::model::PairIndex::new(v);
        let dense: Vec<u32> = (0..idx.len() as u32).map(|z| z % 4 + 2).collect();
        let counts = StreamCounts::from_dense(v, 20, &dense).unwrap();
        let mask = ComponentMask::new("a", vec![0, 1, 2], v).unwrap();
        let r = class_residuals::<f64>(&counts, std::slice::from_ref(&mask));
        let (mut inside, mut rest) = (0.0, 0.0);
        for (z, (j, k)) in idx.pairs().enumerate() {
            if mask.contains(j) && mask.contains(k) {
                inside += r[z];
            } else {
                rest += r[z];
            }
        }
        assert!(inside.abs() < 1e-12 && rest.abs() < 1e-12);
    }

    #[test]
    fn single_precision_fit() {
        let lags: Vec<f64> = (1..=20).map(|i| 0.25 * i as f64).collect();
        let truth = VariogramModel::<f64>::new(Family::Exponential, 1.0, 4.0, 1.0).unwrap();
        let t64 = exact_table(&truth, &lags);
        let t32 = BinTable {
            bins: t64
                .bins
                .iter()
                .map(|b| LagBin {
                    lower: b.lower as f32,
                    upper: b.upper as f32,
                    mean_lag: b.mean_lag as f32,
                    gamma: b.gamma as f32,
                    count: b.count,
                })
                .collect(),
            combinations: 0,
            exhaustive: true,
        };
        let fit = fit_semivariogram(&t32, Family::Exponential).unwrap();
        assert!((fit.model.range - 1.0).abs() < 1e-3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn gamma_hat_nonnegative(values in proptest::collection::vec(0u32..20, 45)) {
            let grid = VoxelGrid::regular_2d(5, 2).unwrap();
            let counts = StreamCounts::from_dense(10, 20, &values).unwrap();
            let t = empirical_semivariogram::<f64>(&counts, &grid, &default_edges(&grid), 10_000, 3).unwrap();
            prop_assert!(t.bins.iter().all(|b| b.gamma >= 0.0));
        }

        #[test]
        fn more_starts_never_hurt(
            c0 in 0.0f64..3.0, ce in 0.1f64..6.0, a in 0.2f64..4.0,
            noise in proptest::collection::vec(-0.5f64..0.5, 12),
        ) {
            let truth = VariogramModel::new(Family::Exponential, c0, ce, a).unwrap();
            let lags: Vec<f64> = (1..=12).map(|i| 0.5 * i as f64).collect();
            let mut t = exact_table(&truth, &lags);
            for (b, e) in t.bins.iter_mut().zip(&noise) {
                b.gamma = (b.gamma + e).max(0.0);
            }
            let mut last = f64::INFINITY;
            for k in 1..=5 {
                let fit = fit_semivariogram_with_starts(&t, Family::Exponential, k).unwrap();
                prop_assert!(fit.residual <= last);
                prop_assert!(fit.model.nugget >= 0.0 && fit.model.partial_sill > 0.0 && fit.model.range > 0.0);
                last = fit.residual;
            }
        }
    }
}
