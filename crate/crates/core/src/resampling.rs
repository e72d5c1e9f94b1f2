//! Bootstrap standard errors, percentile intervals and permutation nulls.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ComponentMask, SubjectDataset};
use crate::rng::{purpose, stream};
use crate::ssc::estimate_ssc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResampleMode {
    BootstrapSubjects,
    PermuteNetworkLabels,
    PermuteGroupLabels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResamplePlan {
    pub mode: ResampleMode,
    pub replicates: usize,
    pub seed: u64,
    /// Two-sided level of the percentile interval.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Block label per unit; permutations stay inside a block.
    #[serde(default)]
    pub strata: Option<Vec<usize>>,
}

fn default_alpha() -> f64 {
    0.05
}

impl ResamplePlan {
    pub fn bootstrap(replicates: usize, seed: u64) -> Self {
        Self {
            mode: ResampleMode::BootstrapSubjects,
            replicates,
            seed,
            alpha: default_alpha(),
            strata: None,
        }
    }

    pub fn permutation(mode: ResampleMode, replicates: usize, seed: u64) -> Self {
        Self {
            mode,
            replicates,
            seed,
            alpha: default_alpha(),
            strata: None,
        }
    }

    pub fn with_strata(mut self, strata: Vec<usize>) -> Self {
        self.strata = Some(strata);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResampleResult {
    pub mode: ResampleMode,
    pub observed: f64,
    pub replicates: Vec<f64>,
    /// Standard deviation of the replicate statistics.
    pub se: Option<f64>,
    /// Bootstrap SE of a mean scaled by `√n`.
    pub per_subject_se: Option<f64>,
    pub ci: Option<(f64, f64)>,
    pub p_value: Option<f64>,
    /// Every permutation reproduced the observed statistic.
    pub constant_null: bool,
}

impl ResampleResult {
    /// `replicate,statistic` rows.
    pub fn replicates_csv(&self) -> String {
        let mut out = String::from("replicate,statistic\n");
        for (b, t) in self.replicates.iter().enumerate() {
            out.push_str(&format!("{b},{t}\n"));
        }
        out
    }
}

/// Sample standard deviation (denominator `n − 1`).
pub fn sample_sd(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    // Shifting by the first value keeps identical inputs at exactly zero.
    let shift = values[0];
    let mean = values.iter().map(|v| v - shift).sum::<f64>() / n;
    (values.iter().map(|v| (v - shift - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Quantile of sorted data with linear interpolation between order
/// statistics (type 7).
pub fn quantile_type7(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Subject bootstrap of the mean of `values`.
pub fn bootstrap_mean(values: &[f64], plan: &ResamplePlan) -> Result<ResampleResult> {
    let n = values.len();
    if n < 2 {
        return Err(Error::TooFewSubjects(n));
    }
    if plan.mode != ResampleMode::BootstrapSubjects {
        return Err(Error::invalid("bootstrap needs a bootstrap-subjects plan"));
    }
    if plan.replicates < 2 {
        return Err(Error::NotEnoughReplicates(plan.replicates));
    }
    let replicates: Vec<f64> = (0..plan.replicates)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream(plan.seed, &[purpose::BOOTSTRAP, b as u64]);
            (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64
        })
        .collect();
    let se = sample_sd(&replicates);
    let mut sorted = replicates.clone();
    sorted.sort_by(f64::total_cmp);
    let ci = (
        quantile_type7(&sorted, plan.alpha / 2.0),
        quantile_type7(&sorted, 1.0 - plan.alpha / 2.0),
    );
    Ok(ResampleResult {
        mode: plan.mode,
        observed: values.iter().sum::<f64>() / n as f64,
        replicates,
        se: Some(se),
        per_subject_se: Some(se * (n as f64).sqrt()),
        ci: Some(ci),
        p_value: None,
        constant_null: false,
    })
}

/// Subject bootstrap of the mean θ̂ for one component.
pub fn bootstrap_ssc(subjects: &[SubjectDataset], mask: &ComponentMask, plan: &ResamplePlan) -> Result<ResampleResult> {
    if subjects.len() < 2 {
        return Err(Error::TooFewSubjects(subjects.len()));
    }
    let thetas = subjects
        .iter()
        .map(|s| estimate_ssc::<f64>(&s.counts, mask).map(|e| e.theta_hat))
        .collect::<Result<Vec<_>>>()?;
    bootstrap_mean(&thetas, plan)
}

/// Permutation distribution of `statistic` over relabelings of `labels`.
///
/// Labels are shuffled inside each stratum of `plan.strata` (one stratum per
/// subject for network labels) or across all units when no strata are given.
/// The p-value is two-sided with the add-one correction.
pub fn permutation_null<F>(labels: &[usize], plan: &ResamplePlan, statistic: F) -> Result<ResampleResult>
where
    F: Fn(&[usize]) -> f64 + Sync,
{
    if plan.mode == ResampleMode::BootstrapSubjects {
        return Err(Error::invalid("permutation needs a permutation plan"));
    }
    if plan.replicates < 1 {
        return Err(Error::NotEnoughReplicates(plan.replicates));
    }
    let first = labels.first().copied();
    if labels.iter().all(|&l| Some(l) == first) {
        return Err(Error::invalid("permutation needs at least two distinct labels"));
    }
    let blocks: Vec<Vec<usize>> = match &plan.strata {
        None => vec![(0..labels.len()).collect()],
        Some(strata) => {
            if strata.len() != labels.len() {
                return Err(Error::invalid("strata and labels differ in length"));
            }
            let mut keys: Vec<usize> = strata.clone();
            keys.sort_unstable();
            keys.dedup();
            keys.iter()
                .map(|k| (0..labels.len()).filter(|&i| strata[i] == *k).collect())
                .collect()
        }
    };
    let observed = statistic(labels);
    let replicates: Vec<f64> = (0..plan.replicates)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream(plan.seed, &[purpose::PERMUTATION, b as u64]);
            let mut perm = labels.to_vec();
            for block in &blocks {
                let mut vals: Vec<usize> = block.iter().map(|&i| labels[i]).collect();
                vals.shuffle(&mut rng);
                for (&i, v) in block.iter().zip(vals) {
                    perm[i] = v;
                }
            }
            statistic(&perm)
        })
        .collect();
    let tol = 1e-12 * observed.abs().max(1.0);
    let extreme = replicates.iter().filter(|t| t.abs() >= observed.abs() - tol).count();
    let constant_null = replicates.iter().all(|t| (t - observed).abs() <= tol);
    if constant_null {
        log::warn!("statistic is constant under permutation; p = 1");
    }
    let p = (1 + extreme) as f64 / (plan.replicates + 1) as f64;
    Ok(ResampleResult {
        mode: plan.mode,
        observed,
        se: Some(if replicates.len() > 1 {
            sample_sd(&replicates)
        } else {
            0.0
        }),
        replicates,
        per_subject_se: None,
        ci: None,
        p_value: Some(p),
        constant_null,
    })
}

/// Mean of `values` labelled 0 minus the mean of those labelled 1.
pub fn mean_difference(values: &[f64], labels: &[usize]) -> f64 {
    let (mut s0, mut n0, mut s1, mut n1) = (0.0, 0usize, 0.0, 0usize);
    for (&v, &l) in values.iter().zip(labels) {
        if l == 0 {
            s0 += v;
            n0 += 1;
        } else {
            s1 += v;
            n1 += 1;
        }
    }
    s0 / n0.max(1) as f64 - s1 / n1.max(1) as f64
}
