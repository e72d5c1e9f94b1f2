//! Bootstrap reproducibility of ICA components and its association with sSC.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ica::{group_ica_from_gram, match_components, pearson, subject_gram, ComponentSet, IcaConfig, MatchResult};
use crate::resampling::{permutation_null, ResampleMode, ResamplePlan};
use crate::rng::{derive_seed, purpose, stream};

/// Share of failed bootstrap extractions tolerated before giving up.
pub const MAX_DROPPED_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentReliability {
    pub component: usize,
    /// Mean `|r|` with the best-matching bootstrap component.
    pub observed: f64,
    /// Mean `|r|` with every bootstrap component, the match included.
    pub chance: f64,
    /// `(observed − chance) / (1 − chance)`; may be negative.
    pub r: f64,
    /// `r` clamped to `[0, 1]` for display.
    pub r_display: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityReport {
    pub q: usize,
    /// Replicates requested.
    pub replicates: usize,
    /// Replicates whose extraction converged and entered the index.
    pub completed: usize,
    pub dropped: usize,
    pub seed: u64,
    pub components: Vec<ComponentReliability>,
    pub warnings: Vec<String>,
}

impl ReliabilityReport {
    pub fn values(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.r).collect()
    }

    /// `component,observed,chance,R,R_display` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("component,observed,chance,R,R_display\n");
        for c in &self.components {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                c.component, c.observed, c.chance, c.r, c.r_display
            ));
        }
        out
    }
}

/// Reliability index from the per-replicate matches of `q` original components.
pub fn reliability_from_matches(matches: &[MatchResult], q: usize) -> Result<Vec<ComponentReliability>> {
    if matches.is_empty() {
        return Err(Error::NotEnoughReplicates(0));
    }
    let b = matches.len() as f64;
    (0..q)
        .map(|l| {
            let (mut observed, mut chance) = (0.0, 0.0);
            for m in matches {
                let hit = m
                    .matches
                    .get(l)
                    .ok_or_else(|| Error::invalid(format!("replicate lacks a match for component {l}")))?;
                observed += hit.abs_r;
                chance += hit.all_abs_r.iter().sum::<f64>() / hit.all_abs_r.len() as f64;
            }
            observed /= b;
            chance /= b;
            if !(chance < 1.0) {
                return Err(Error::invalid(format!(
                    "chance correlation of component {l} is {chance}; the index needs it below 1"
                )));
            }
            let r = (observed - chance) / (1.0 - chance);
            Ok(ComponentReliability {
                component: l,
                observed,
                chance,
                r,
                r_display: r.clamp(0.0, 1.0),
            })
        })
        .collect()
}

/// Group ICA on all subjects, then on `replicates` subject bootstraps matched
/// back to the original maps.
pub fn reliability_index(
    subjects: &[DMatrix<f64>],
    config: &IcaConfig,
    replicates: usize,
    seed: u64,
) -> Result<(ComponentSet, ReliabilityReport)> {
    let grams: Vec<DMatrix<f64>> = subjects.par_iter().map(subject_gram).collect();
    reliability_from_grams(&grams, config, replicates, seed)
}

/// Same as [`reliability_index`] from precomputed subject Gram matrices.
pub fn reliability_from_grams(
    grams: &[DMatrix<f64>],
    config: &IcaConfig,
    replicates: usize,
    seed: u64,
) -> Result<(ComponentSet, ReliabilityReport)> {
    let n = grams.len();
    if n < 2 {
        return Err(Error::TooFewSubjects(n));
    }
    if replicates < 10 {
        return Err(Error::NotEnoughReplicates(replicates));
    }
    let v = grams[0].nrows();
    if grams.iter().any(|g| g.nrows() != v || g.ncols() != v) {
        return Err(Error::invalid("subject Gram matrices differ in size"));
    }
    let sum = |idx: &mut dyn Iterator<Item = usize>| idx.fold(DMatrix::zeros(v, v), |acc, i| acc + &grams[i]);
    let original = group_ica_from_gram(&sum(&mut (0..n)), config)?;

    let outcomes: Vec<std::result::Result<MatchResult, String>> = (0..replicates)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream(seed, &[purpose::BOOTSTRAP, b as u64]);
            let draw: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let cfg = IcaConfig {
                seed: derive_seed(seed, &[purpose::ICA_INIT, b as u64]),
                ..*config
            };
            group_ica_from_gram(&sum(&mut draw.into_iter()), &cfg)
                .and_then(|set| match_components(&original.maps, &set.maps))
                .map_err(|e| format!("replicate {b}: {e}"))
        })
        .collect();

    let mut warnings = Vec::new();
    let mut kept = Vec::with_capacity(replicates);
    for o in outcomes {
        match o {
            Ok(m) => {
                warnings.extend(m.warnings.iter().cloned());
                kept.push(m);
            }
            Err(msg) => {
                log::warn!("{msg}; replicate dropped");
                warnings.push(msg);
            }
        }
    }
    let dropped = replicates - kept.len();
    check_dropped(dropped, replicates)?;
    let components = reliability_from_matches(&kept, config.components)?;
    let report = ReliabilityReport {
        q: config.components,
        replicates,
        completed: kept.len(),
        dropped,
        seed,
        components,
        warnings,
    };
    Ok((original, report))
}

fn check_dropped(dropped: usize, total: usize) -> Result<()> {
    if dropped as f64 > MAX_DROPPED_FRACTION * total as f64 {
        return Err(Error::UnstableExtraction { dropped, total });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    /// `None` when either input is constant.
    pub estimate: Option<f64>,
    /// Two-sided permutation p-value.
    pub p_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssociationReport {
    pub components: usize,
    pub permutations: usize,
    pub pearson: Correlation,
    pub spearman: Correlation,
    pub warnings: Vec<String>,
}

/// Midranks, starting at 1.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    pearson(&ranks(a), &ranks(b))
}

/// Pearson and Spearman correlation of `theta` with `reliability` across
/// components, each with a permutation p-value.
pub fn ssc_reliability_association(
    theta: &[f64],
    reliability: &[f64],
    permutations: usize,
    seed: u64,
) -> Result<AssociationReport> {
    let n = theta.len();
    if reliability.len() != n {
        return Err(Error::invalid("θ̂ and R differ in length"));
    }
    if n < 3 {
        return Err(Error::invalid(format!(
            "association needs at least 3 components, got {n}"
        )));
    }
    let mut warnings = Vec::new();
    let labels: Vec<usize> = (0..n).collect();
    let mut correlate = |name: &str, a: Vec<f64>, b: Vec<f64>| -> Result<Correlation> {
        let Some(estimate) = pearson(&a, &b) else {
            warnings.push(format!("{name} correlation not applicable: constant input"));
            return Ok(Correlation {
                estimate: None,
                p_value: None,
            });
        };
        let plan = ResamplePlan::permutation(ResampleMode::PermuteNetworkLabels, permutations, seed);
        let null = permutation_null(&labels, &plan, |perm| {
            let shuffled: Vec<f64> = perm.iter().map(|&i| a[i]).collect();
            pearson(&shuffled, &b).unwrap_or(0.0)
        })?;
        Ok(Correlation {
            estimate: Some(estimate),
            p_value: null.p_value,
        })
    };
    let pearson_c = correlate("Pearson", theta.to_vec(), reliability.to_vec())?;
    let spearman_c = correlate("Spearman", ranks(theta), ranks(reliability))?;
    Ok(AssociationReport {
        components: n,
        permutations,
        pearson: pearson_c,
        spearman: spearman_c,
        warnings,
    })
}

/// `component,theta_hat,R` rows for plotting.
pub fn scatter_csv(labels: &[String], theta: &[f64], reliability: &[f64]) -> String {
    let mut out = String::from("component,theta_hat,R\n");
    for ((l, t), r) in labels.iter().zip(theta).zip(reliability) {
        out.push_str(&format!("{l},{t},{r}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ica::ComponentMatch;
    use rand_distr::{Distribution, StandardNormal};

    fn sources() -> DMatrix<f64> {
        let mut rng = stream(41, &[]);
        let band = |a: usize, b: usize| (a == 4 || a == 5) && !(3..=6).contains(&b);
        DMatrix::from_fn(2, 100, |r, c| {
            let (x, y) = (c % 10, c / 10);
            let inside = if r == 0 { band(x, y) } else { band(y, x) };
            let base: f64 = StandardNormal.sample(&mut rng);
            if inside {
                3.0 + 0.1 * base
            } else {
                0.5 * base
            }
        })
    }

    fn noiseless_subjects(n: u64) -> Vec<DMatrix<f64>> {
        let s = sources();
        (0..n)
            .map(|i| {
                let mut rng = stream(500, &[i]);
                DMatrix::from_fn(60, 2, |_, _| StandardNormal.sample(&mut rng)) * &s
            })
            .collect()
    }

    fn fake_match(abs_r: f64, all: Vec<f64>) -> MatchResult {
        MatchResult {
            matches: vec![ComponentMatch {
                reference: 0,
                candidate: 0,
                abs_r,
                all_abs_r: all,
            }],
            warnings: vec![],
        }
    }

    #[test]
    fn noiseless_sources_are_reliable() {
        let subjects = noiseless_subjects(6);
        let (_, report) = reliability_index(&subjects, &IcaConfig::new(2, 3), 20, 9).unwrap();
        assert_eq!(report.completed, 20);
        for c in &report.components {
            assert!(c.r >= 0.95, "{c:?}");
        }
    }

    #[test]
    fn perfect_matches_give_one() {
        let m = vec![fake_match(1.0, vec![1.0, 0.2, 0.4]); 12];
        let r = reliability_from_matches(&m, 1).unwrap();
        assert_eq!(r[0].r, 1.0);
        // The chance term averages over all q, the match included.
        assert!((r[0].chance - 1.6 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn chance_level_gives_zero() {
        let m = vec![fake_match(0.3, vec![0.3, 0.3, 0.3]); 10];
        let r = reliability_from_matches(&m, 1).unwrap();
        assert!(r[0].r.abs() < 1e-12);
    }

    #[test]
    fn below_chance_is_negative_but_displayed_as_zero() {
        let m = vec![fake_match(0.2, vec![0.2, 0.5, 0.5]); 10];
        let r = reliability_from_matches(&m, 1).unwrap();
        assert!(r[0].r < 0.0);
        assert_eq!(r[0].r_display, 0.0);
    }

    #[test]
    fn chance_of_one_is_rejected() {
        let m = vec![fake_match(1.0, vec![1.0, 1.0]); 10];
        assert!(reliability_from_matches(&m, 1).is_err());
    }

    #[test]
    fn preconditions() {
        let subjects = noiseless_subjects(2);
        assert!(matches!(
            reliability_index(&subjects[..1], &IcaConfig::new(2, 0), 20, 0),
            Err(Error::TooFewSubjects(1))
        ));
        assert!(matches!(
            reliability_index(&subjects, &IcaConfig::new(2, 0), 5, 0),
            Err(Error::NotEnoughReplicates(5))
        ));
    }

    #[test]
    fn drop_threshold() {
        assert!(check_dropped(2, 10).is_ok());
        assert!(matches!(
            check_dropped(3, 10),
            Err(Error::UnstableExtraction { dropped: 3, total: 10 })
        ));
    }

    #[test]
    fn original_failure_propagates() {
        let grams: Vec<DMatrix<f64>> = noiseless_subjects(3).iter().map(subject_gram).collect();
        let strict = IcaConfig {
            components: 2,
            seed: 0,
            tolerance: 0.0,
            max_iterations: 2,
            rotation_fallback: false,
        };
        assert!(matches!(
            reliability_from_grams(&grams, &strict, 10, 1),
            Err(Error::IcaNotConverged(_))
        ));
    }

    #[test]
    fn deterministic_in_seed() {
        let subjects = noiseless_subjects(4);
        let a = reliability_index(&subjects, &IcaConfig::new(2, 1), 12, 4).unwrap().1;
        let b = reliability_index(&subjects, &IcaConfig::new(2, 1), 12, 4).unwrap().1;
        assert_eq!(a, b);
    }

    #[test]
    fn midranks() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn monotone_transform_has_unit_spearman() {
        let theta = [0.1, 0.5, 0.3, 0.8, 0.2, 0.6];
        let r: Vec<f64> = theta.iter().map(|t: &f64| t.powi(3) - 0.2).collect();
        let a = ssc_reliability_association(&theta, &r, 999, 1).unwrap();
        assert!((a.spearman.estimate.unwrap() - 1.0).abs() < 1e-12);
        // 6! = 720 orderings; only the identity reaches |ρ| = 1.
        assert!(a.spearman.p_value.unwrap() < 0.02);
    }

    #[test]
    fn constant_input_is_not_applicable() {
        let a = ssc_reliability_association(&[0.1, 0.2, 0.3], &[0.5, 0.5, 0.5], 99, 0).unwrap();
        assert!(a.pearson.estimate.is_none() && a.spearman.estimate.is_none());
        assert_eq!(a.warnings.len(), 2);
        assert!(ssc_reliability_association(&[0.1, 0.2], &[0.1, 0.2], 99, 0).is_err());
    }

    #[test]
    fn independent_inputs_are_calibrated() {
        let mut rejections = 0;
        for run in 0..200 {
            let mut rng = stream(77, &[run]);
            let t: Vec<f64> = (0..10).map(|_| StandardNormal.sample(&mut rng)).collect();
            let r: Vec<f64> = (0..10).map(|_| StandardNormal.sample(&mut rng)).collect();
            let a = ssc_reliability_association(&t, &r, 199, run).unwrap();
            if a.spearman.p_value.unwrap() < 0.05 {
                rejections += 1;
            }
        }
        // Binomial(200, 0.05) 99.9% upper bound is about 22.
        assert!(rejections <= 22, "{rejections}");
    }

    #[test]
    fn scatter_layout() {
        let csv = scatter_csv(&["IC1".into(), "IC2".into()], &[0.3, 0.6], &[0.9, 0.95]);
        assert_eq!(csv, "component,theta_hat,R\nIC1,0.3,0.9\nIC2,0.6,0.95\n");
    }
}
