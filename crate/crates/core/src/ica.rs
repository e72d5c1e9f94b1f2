//! Group spatial ICA and spatial-correlation matching of component maps.
//!
//! Subjects' `T × V` matrices are stacked in time. Each subject is centered
//! per voxel over time and per time point over voxels, so the stacked Gram
//! matrix `YᵀY` is the sum of the subject Gram matrices. PCA runs on that
//! `V × V` Gram matrix; bootstrap replicates only need to re-add cached
//! subject Grams.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IcaFailure, Result};
use crate::rng::{purpose, stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IcaConfig {
    pub components: usize,
    pub seed: u64,
    pub tolerance: f64,
    pub max_iterations: usize,
    /// When the fixed-point iteration stalls, finish with pairwise rotations
    /// that maximize the summed fourth moment.
    pub rotation_fallback: bool,
}

impl Default for IcaConfig {
    fn default() -> Self {
        Self {
            components: 2,
            seed: 0,
            tolerance: 1e-6,
            max_iterations: 500,
            rotation_fallback: true,
        }
    }
}

impl IcaConfig {
    pub fn new(components: usize, seed: u64) -> Self {
        Self {
            components,
            seed,
            ..Self::default()
        }
    }
}

/// Extracted maps (`q × V`, unit variance over voxels, nonnegative skew).
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentSet {
    pub maps: DMatrix<f64>,
    /// Time courses (`ΣT × q`), absent for Gram-only extractions.
    pub mixing: Option<DMatrix<f64>>,
    pub seed: u64,
    pub iterations: usize,
    pub tolerance: f64,
    /// Leading eigenvalues of the Gram matrix kept by the reduction.
    pub eigenvalues: Vec<f64>,
}

impl ComponentSet {
    pub fn q(&self) -> usize {
        self.maps.nrows()
    }

    pub fn n_voxels(&self) -> usize {
        self.maps.ncols()
    }

    pub fn map(&self, c: usize) -> Vec<f64> {
        self.maps.row(c).iter().copied().collect()
    }

    /// `component,voxel,value` rows.
    pub fn maps_csv(&self) -> String {
        let mut out = String::from("component,voxel,value\n");
        for c in 0..self.q() {
            for v in 0..self.n_voxels() {
                out.push_str(&format!("{c},{v},{}\n", self.maps[(c, v)]));
            }
        }
        out
    }
}

/// Center every column (voxel) over time, then every row (time point) over voxels.
pub fn preprocess(y: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = y.clone();
    for mut col in out.column_iter_mut() {
        let m = col.mean();
        col.add_scalar_mut(-m);
    }
    for mut row in out.row_iter_mut() {
        let m = row.mean();
        row.add_scalar_mut(-m);
    }
    out
}

/// `YᵀY` of the preprocessed subject matrix.
pub fn subject_gram(y: &DMatrix<f64>) -> DMatrix<f64> {
    let c = preprocess(y);
    c.transpose() * &c
}

fn check_subjects(subjects: &[DMatrix<f64>], q: usize) -> Result<usize> {
    let first = subjects.first().ok_or(Error::TooFewSubjects(0))?;
    let v = first.ncols();
    for s in subjects {
        if s.ncols() != v {
            return Err(Error::invalid("subjects differ in the number of voxels"));
        }
        if s.nrows() < q {
            return Err(Error::invalid(format!(
                "{} time points is fewer than q = {q}",
                s.nrows()
            )));
        }
    }
    Ok(v)
}

/// Group ICA with time courses.
pub fn group_ica(subjects: &[DMatrix<f64>], config: &IcaConfig) -> Result<ComponentSet> {
    let v = check_subjects(subjects, config.components)?;
    let centered: Vec<DMatrix<f64>> = subjects.iter().map(preprocess).collect();
    let total_t: usize = centered.iter().map(|c| c.nrows()).sum();
    let mut stacked = DMatrix::<f64>::zeros(total_t, v);
    let mut row = 0;
    for c in &centered {
        stacked.rows_mut(row, c.nrows()).copy_from(c);
        row += c.nrows();
    }
    let gram = stacked.transpose() * &stacked;
    let mut set = group_ica_from_gram(&gram, config)?;
    // Least-squares time courses A = Y Sᵀ (S Sᵀ)⁻¹.
    let s = &set.maps;
    let sst = s * s.transpose();
    let inv = sst
        .try_inverse()
        .ok_or_else(|| Error::invalid("component maps are linearly dependent"))?;
    set.mixing = Some(stacked * s.transpose() * inv);
    Ok(set)
}

/// Smallest relaxation step.
const MIN_STEP: f64 = 1.0 / 64.0;

/// Maps only, from the summed Gram matrix of preprocessed subjects.
pub fn group_ica_from_gram(gram: &DMatrix<f64>, config: &IcaConfig) -> Result<ComponentSet> {
    let v = gram.nrows();
    let q = config.components;
    if q == 0 || q > v {
        return Err(Error::invalid(format!("q = {q} must be in 1..={v}")));
    }
    let eig = SymmetricEigen::new(gram.clone());
    let mut order: Vec<usize> = (0..v).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]];
    let eigenvalues: Vec<f64> = order[..q].iter().map(|&i| eig.eigenvalues[i]).collect();
    if !(top > 0.0) || eigenvalues[q - 1] <= 1e-10 * top {
        return Err(Error::invalid(format!("data rank is below q = {q}")));
    }
    // Whitened data: rows are eigenvectors scaled to unit variance over voxels.
    let scale = (v as f64).sqrt();
    let z = DMatrix::from_fn(q, v, |r, c| eig.eigenvectors[(c, order[r])] * scale);

    let mut rng = stream(config.seed, &[purpose::ICA_INIT]);
    let init = DMatrix::from_fn(q, q, |_, _| StandardNormal.sample(&mut rng));
    let mut w = symmetric_decorrelation(&init)?;
    let mut change_log = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut step: f64 = 1.0;
    let mut last_change = f64::INFINITY;
    let n = v as f64;
    while iterations < config.max_iterations {
        iterations += 1;
        let u = &w * &z;
        let g = u.map(|x| x * x * x);
        let ezg = (&g * z.transpose()) / n;
        let egp = DVector::from_fn(q, |r, _| 3.0 * u.row(r).iter().map(|x| x * x).sum::<f64>() / n);
        // Convergence is judged on the plain fixed-point step.
        let full = symmetric_decorrelation(&(&ezg - DMatrix::from_diagonal(&egp) * &w))?;
        let overlap = &full * w.transpose();
        let change = (0..q).map(|i| (1.0 - overlap[(i, i)].abs()).abs()).fold(0.0, f64::max);
        change_log.push(change);
        if change < config.tolerance {
            w = full;
            converged = true;
            break;
        }
        // Relaxed step toward the sign-aligned fixed-point update, halved
        // whenever the change stops shrinking. Fixed points are unchanged.
        if change >= last_change {
            step = (step * 0.5).max(MIN_STEP);
        }
        last_change = change;
        w = if step == 1.0 {
            full
        } else {
            let mut aligned = full.clone();
            for i in 0..q {
                if overlap[(i, i)] < 0.0 {
                    aligned.row_mut(i).neg_mut();
                }
            }
            // A full step that swaps two rows makes the blend rank deficient.
            symmetric_decorrelation(&(&w * (1.0 - step) + aligned * step)).unwrap_or(full)
        };
    }
    let mut maps = &w * &z;
    if converged {
        jacobi_polish(&mut maps);
    } else if config.rotation_fallback && jacobi_polish(&mut maps) {
        log::debug!("fixed-point iteration stalled after {iterations} steps; finished by rotation");
        converged = true;
    }
    normalize_maps(&mut maps);
    if !converged {
        return Err(Error::IcaNotConverged(Box::new(IcaFailure {
            iterations,
            change_log,
            partial_maps: maps.row_iter().map(|r| r.iter().copied().collect()).collect(),
        })));
    }
    Ok(ComponentSet {
        maps,
        mixing: None,
        seed: config.seed,
        iterations,
        tolerance: config.tolerance,
        eigenvalues,
    })
}

/// Pairwise Givens rotations of the whitened maps that maximize the summed
/// fourth moment. The fixed-point iteration can settle on a rotation where one
/// map is sub-Gaussian; spatial maps are taken to be super-Gaussian.
/// Returns false if the sweeps had not settled by the cap.
fn jacobi_polish(u: &mut DMatrix<f64>) -> bool {
    const GRID: usize = 180;
    let q = u.nrows();
    for _sweep in 0..50 {
        let mut rotated = false;
        for i in 0..q {
            for j in i + 1..q {
                let (a, b) = (u.row(i).clone_owned(), u.row(j).clone_owned());
                let n = a.len() as f64;
                let mut m = [0.0; 5];
                for (x, y) in a.iter().zip(b.iter()) {
                    let (x2, y2) = (x * x, y * y);
                    m[0] += x2 * x2;
                    m[1] += x2 * x * y;
                    m[2] += x2 * y2;
                    m[3] += x * y2 * y;
                    m[4] += y2 * y2;
                }
                m.iter_mut().for_each(|x| *x /= n);
                let contrast = |phi: f64| {
                    let (s, c) = phi.sin_cos();
                    let first = c.powi(4) * m[0]
                        + 4.0 * c.powi(3) * s * m[1]
                        + 6.0 * c * c * s * s * m[2]
                        + 4.0 * c * s.powi(3) * m[3]
                        + s.powi(4) * m[4];
                    let second = s.powi(4) * m[0] - 4.0 * s.powi(3) * c * m[1] + 6.0 * c * c * s * s * m[2]
                        - 4.0 * s * c.powi(3) * m[3]
                        + c.powi(4) * m[4];
                    first + second
                };
                // Quarter turns only permute and flip, so [0, π/2) covers every rotation.
                let step = std::f64::consts::FRAC_PI_2 / GRID as f64;
                let best = (0..GRID)
                    .map(|k| k as f64 * step)
                    .fold((0.0, contrast(0.0)), |acc, phi| {
                        let c = contrast(phi);
                        if c > acc.1 {
                            (phi, c)
                        } else {
                            acc
                        }
                    });
                let (mut lo, mut hi) = (best.0 - step, best.0 + step);
                let ratio = (5f64.sqrt() - 1.0) / 2.0;
                for _ in 0..60 {
                    let (x1, x2) = (hi - ratio * (hi - lo), lo + ratio * (hi - lo));
                    if contrast(x1) >= contrast(x2) {
                        hi = x2;
                    } else {
                        lo = x1;
                    }
                }
                let phi = 0.5 * (lo + hi);
                let base = contrast(0.0);
                if contrast(phi) - base <= 1e-12 * base.abs().max(1.0) {
                    continue;
                }
                let (s, c) = phi.sin_cos();
                u.row_mut(i).copy_from(&(&a * c + &b * s));
                u.row_mut(j).copy_from(&(&b * c - &a * s));
                rotated = true;
            }
        }
        if !rotated {
            return true;
        }
    }
    false
}

/// `(W Wᵀ)^{-1/2} W`.
fn symmetric_decorrelation(w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(w * w.transpose());
    let top = eig.eigenvalues.max();
    if eig.eigenvalues.iter().any(|&l| !(l > 1e-12 * top) || !l.is_finite()) {
        return Err(Error::invalid("unmixing matrix became singular"));
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose() * w)
}

/// Unit variance per row and nonnegative skew.
fn normalize_maps(maps: &mut DMatrix<f64>) {
    let v = maps.ncols() as f64;
    for mut row in maps.row_iter_mut() {
        let mean = row.mean();
        let sd = (row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v).sqrt();
        if sd > 0.0 {
            row.iter_mut().for_each(|x| *x = (*x - mean) / sd);
        }
        let skew: f64 = row.iter().map(|x| x.powi(3)).sum::<f64>() / v;
        if skew < 0.0 {
            row.neg_mut();
        }
    }
}

/// Pearson correlation; `None` when either input has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa > 0.0 && sbb > 0.0 {
        Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
    } else {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentMatch {
    pub reference: usize,
    pub candidate: usize,
    pub abs_r: f64,
    /// `|r|` against every candidate map.
    pub all_abs_r: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub matches: Vec<ComponentMatch>,
    pub warnings: Vec<String>,
}

/// Best candidate (largest `|r|`, lowest index on ties) for every reference map.
pub fn match_components(reference: &DMatrix<f64>, candidate: &DMatrix<f64>) -> Result<MatchResult> {
    if reference.ncols() != candidate.ncols() {
        return Err(Error::invalid("reference and candidate maps differ in length"));
    }
    let rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> { m.row_iter().map(|r| r.iter().copied().collect()).collect() };
    let (refs, cands) = (rows(reference), rows(candidate));
    let mut warnings = Vec::new();
    let matches = refs
        .iter()
        .enumerate()
        .map(|(l, r)| {
            let all_abs_r: Vec<f64> = cands
                .iter()
                .enumerate()
                .map(|(c, m)| {
                    pearson(r, m).map(f64::abs).unwrap_or_else(|| {
                        warnings.push(format!("zero-variance map in pair ({l}, {c}); correlation set to 0"));
                        0.0
                    })
                })
                .collect();
            let (candidate, abs_r) =
                all_abs_r.iter().enumerate().fold(
                    (0, f64::NEG_INFINITY),
                    |best, (i, &x)| if x > best.1 { (i, x) } else { best },
                );
            ComponentMatch {
                reference: l,
                candidate,
                abs_r,
                all_abs_r,
            }
        })
        .collect();
    Ok(MatchResult { matches, warnings })
}
