//! Tests on per-subject sSC estimates: positivity of one network, difference
//! between two networks, difference between two groups.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::resampling::{bootstrap_mean, mean_difference, permutation_null, sample_sd, ResampleMode, ResamplePlan};

/// Per-subject estimates of one component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSample {
    pub component: String,
    pub subjects: Vec<String>,
    pub theta: Vec<f64>,
    /// Delta-method variance per subject, when available.
    pub delta_variance: Option<Vec<f64>>,
}

impl ComponentSample {
    pub fn new(component: impl Into<String>, subjects: Vec<String>, theta: Vec<f64>) -> Result<Self> {
        if subjects.len() != theta.len() {
            return Err(Error::invalid("subjects and estimates differ in length"));
        }
        Ok(Self {
            component: component.into(),
            subjects,
            theta,
            delta_variance: None,
        })
    }

    pub fn with_delta(mut self, variance: Vec<f64>) -> Result<Self> {
        if variance.len() != self.theta.len() {
            return Err(Error::invalid("delta variances and estimates differ in length"));
        }
        self.delta_variance = Some(variance);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.theta.len()
    }

    pub fn mean(&self) -> f64 {
        self.theta.iter().sum::<f64>() / self.n() as f64
    }
}

/// Where the per-subject variance in the Wald statistics comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceSource {
    /// Mean of the per-subject delta-method variances.
    Delta,
    /// Squared per-subject bootstrap SE.
    Bootstrap,
    /// Sample variance of θ̂ across subjects.
    Empirical,
}

impl std::str::FromStr for VarianceSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "delta" => Ok(Self::Delta),
            "bootstrap" => Ok(Self::Bootstrap),
            "empirical" => Ok(Self::Empirical),
            other => Err(Error::invalid(format!("unknown variance source {other:?}"))),
        }
    }
}

/// Per-subject variance of θ̂ from `source`.
pub fn subject_variance(sample: &ComponentSample, source: VarianceSource, plan: &ResamplePlan) -> Result<f64> {
    if sample.n() < 2 {
        return Err(Error::TooFewSubjects(sample.n()));
    }
    match source {
        VarianceSource::Delta => {
            let v = sample
                .delta_variance
                .as_ref()
                .ok_or_else(|| Error::invalid(format!("no delta variances for {}", sample.component)))?;
            Ok(v.iter().sum::<f64>() / v.len() as f64)
        }
        VarianceSource::Bootstrap => {
            let r = bootstrap_mean(&sample.theta, plan)?;
            Ok(r.per_subject_se.expect("bootstrap sets the per-subject SE").powi(2))
        }
        VarianceSource::Empirical => Ok(sample_sd(&sample.theta).powi(2)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestKind {
    OneSample,
    BetweenNetwork,
    BetweenGroup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub kind: TestKind,
    pub components: Vec<String>,
    pub n: Vec<usize>,
    /// Mean θ̂, or the difference of means.
    pub estimate: f64,
    pub statistic: f64,
    /// The p-value the decision is based on.
    pub p_value: f64,
    pub wald_p: Option<f64>,
    pub permutation_p: Option<f64>,
    pub alpha: f64,
    pub reject: bool,
    pub variance_source: Option<VarianceSource>,
    /// Per-subject variance(s) entering the Wald statistic.
    pub variance: Vec<f64>,
    /// Wald statistic recomputed with the between-subject variance.
    pub empirical_statistic: Option<f64>,
    pub p_bonferroni: Option<f64>,
    pub p_bh: Option<f64>,
    pub warnings: Vec<String>,
}

fn standard_normal() -> Normal {
    Normal::standard()
}

fn clamp_p(p: f64) -> f64 {
    p.clamp(f64::MIN_POSITIVE, 1.0)
}

/// `mean / √(var/n)` with the zero-variance cases spelled out.
fn wald(diff: f64, se2: f64, warnings: &mut Vec<String>) -> f64 {
    if se2 > 0.0 {
        diff / se2.sqrt()
    } else if diff == 0.0 {
        0.0
    } else {
        warnings.push("zero variance with a nonzero effect; p-value at machine floor".into());
        diff.signum() * f64::INFINITY
    }
}

/// One-sided test of `H₀: θ = 0` against `θ > 0`.
pub fn test_ssc_positive(
    sample: &ComponentSample,
    source: VarianceSource,
    alpha: f64,
    plan: &ResamplePlan,
) -> Result<TestReport> {
    let n = sample.n();
    let var = subject_variance(sample, source, plan)?;
    let mean = sample.mean();
    let mut warnings = Vec::new();
    let z = wald(mean, var / n as f64, &mut warnings);
    let p = clamp_p(standard_normal().sf(z));
    let emp = sample_sd(&sample.theta).powi(2);
    let empirical_statistic = Some(wald(mean, emp / n as f64, &mut Vec::new()));
    Ok(TestReport {
        kind: TestKind::OneSample,
        components: vec![sample.component.clone()],
        n: vec![n],
        estimate: mean,
        statistic: z,
        p_value: p,
        wald_p: Some(p),
        permutation_p: None,
        alpha,
        reject: p < alpha,
        variance_source: Some(source),
        variance: vec![var],
        empirical_statistic,
        p_bonferroni: None,
        p_bh: None,
        warnings,
    })
}

/// Two-sided permutation test of equal mean sSC in two networks measured on
/// the same subjects; labels are swapped within subject.
pub fn test_between_networks(
    a: &ComponentSample,
    b: &ComponentSample,
    plan: &ResamplePlan,
    alpha: f64,
) -> Result<TestReport> {
    let mut order_a: Vec<usize> = (0..a.n()).collect();
    let mut order_b: Vec<usize> = (0..b.n()).collect();
    order_a.sort_by(|&i, &j| a.subjects[i].cmp(&a.subjects[j]));
    order_b.sort_by(|&i, &j| b.subjects[i].cmp(&b.subjects[j]));
    let same = a.n() == b.n()
        && order_a
            .iter()
            .zip(&order_b)
            .all(|(&i, &j)| a.subjects[i] == b.subjects[j]);
    if !same {
        return Err(Error::SubjectMismatch);
    }
    let n = a.n();
    if n < 2 {
        return Err(Error::TooFewSubjects(n));
    }
    let mut values = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(2 * n);
    let mut strata = Vec::with_capacity(2 * n);
    for (s, (&i, &j)) in order_a.iter().zip(&order_b).enumerate() {
        values.extend([a.theta[i], b.theta[j]]);
        labels.extend([0, 1]);
        strata.extend([s, s]);
    }
    let plan = ResamplePlan {
        mode: ResampleMode::PermuteNetworkLabels,
        strata: Some(strata),
        ..plan.clone()
    };
    let r = permutation_null(&labels, &plan, |l| mean_difference(&values, l))?;
    let p = r.p_value.expect("permutation sets p");
    let mut warnings = Vec::new();
    if r.constant_null {
        warnings.push("statistic constant under permutation".into());
    }
    Ok(TestReport {
        kind: TestKind::BetweenNetwork,
        components: vec![a.component.clone(), b.component.clone()],
        n: vec![n],
        estimate: r.observed,
        statistic: r.observed,
        p_value: p,
        wald_p: None,
        permutation_p: Some(p),
        alpha,
        reject: p < alpha,
        variance_source: None,
        variance: Vec::new(),
        empirical_statistic: None,
        p_bonferroni: None,
        p_bh: None,
        warnings,
    })
}

/// Two-sided Wald and permutation tests of equal mean sSC in two groups.
/// The decision follows the Wald p-value.
pub fn test_between_groups(
    g1: &ComponentSample,
    g2: &ComponentSample,
    source: VarianceSource,
    plan: &ResamplePlan,
    alpha: f64,
) -> Result<TestReport> {
    let (n1, n2) = (g1.n(), g2.n());
    if n1 < 2 || n2 < 2 {
        return Err(Error::TooFewSubjects(n1.min(n2)));
    }
    let v1 = subject_variance(g1, source, &ResamplePlan::bootstrap(plan.replicates, plan.seed))?;
    let v2 = subject_variance(g2, source, &ResamplePlan::bootstrap(plan.replicates, plan.seed ^ 1))?;
    let diff = g1.mean() - g2.mean();
    let mut warnings = Vec::new();
    let z = wald(diff, v1 / n1 as f64 + v2 / n2 as f64, &mut warnings);
    let wald_p = clamp_p(2.0 * standard_normal().sf(z.abs()));
    let e1 = sample_sd(&g1.theta).powi(2);
    let e2 = sample_sd(&g2.theta).powi(2);
    let empirical_statistic = Some(wald(diff, e1 / n1 as f64 + e2 / n2 as f64, &mut Vec::new()));

    let values: Vec<f64> = g1.theta.iter().chain(&g2.theta).copied().collect();
    let labels: Vec<usize> = (0..n1 + n2).map(|i| usize::from(i >= n1)).collect();
    let perm_plan = ResamplePlan {
        mode: ResampleMode::PermuteGroupLabels,
        strata: None,
        ..plan.clone()
    };
    let r = permutation_null(&labels, &perm_plan, |l| mean_difference(&values, l))?;
    if r.constant_null {
        warnings.push("statistic constant under permutation".into());
    }
    Ok(TestReport {
        kind: TestKind::BetweenGroup,
        components: vec![g1.component.clone(), g2.component.clone()],
        n: vec![n1, n2],
        estimate: diff,
        statistic: z,
        p_value: wald_p,
        wald_p: Some(wald_p),
        permutation_p: r.p_value,
        alpha,
        reject: wald_p < alpha,
        variance_source: Some(source),
        variance: vec![v1, v2],
        empirical_statistic,
        p_bonferroni: None,
        p_bh: None,
        warnings,
    })
}

/// Bonferroni and Benjamini–Hochberg adjusted p-values, in input order.
pub fn adjust_p_values(p: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let m = p.len() as f64;
    let bonferroni = p.iter().map(|&x| (x * m).min(1.0)).collect();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut bh = vec![0.0; p.len()];
    let mut running = 1.0f64;
    for (rank, &i) in order.iter().enumerate().rev() {
        running = running.min(p[i] * m / (rank + 1) as f64);
        bh[i] = running.min(1.0);
    }
    (bonferroni, bh)
}

/// Fill the adjusted columns of a family of reports. Decisions are left on
/// the unadjusted p-values.
pub fn apply_adjustments(reports: &mut [TestReport]) {
    let p: Vec<f64> = reports.iter().map(|r| r.p_value).collect();
    let (bonf, bh) = adjust_p_values(&p);
    for ((r, b), h) in reports.iter_mut().zip(bonf).zip(bh) {
        r.p_bonferroni = Some(b);
        r.p_bh = Some(h);
    }
}

fn fmt_p(p: Option<f64>) -> String {
    match p {
        None => "-".into(),
        Some(p) if p < 1e-4 => "<0.0001".into(),
        Some(p) => format!("{p:.4}"),
    }
}

/// Aligned text table, one row per report.
pub fn render_table(reports: &[TestReport]) -> String {
    let header = [
        "component",
        "n",
        "estimate",
        "statistic",
        "p_wald",
        "p_perm",
        "p_bonf",
        "p_bh",
        "reject",
    ];
    let rows: Vec<[String; 9]> = reports
        .iter()
        .map(|r| {
            [
                r.components.join(" vs "),
                r.n.iter().map(|n| n.to_string()).collect::<Vec<_>>().join("/"),
                format!("{:.4}", r.estimate),
                format!("{:.3}", r.statistic),
                fmt_p(r.wald_p),
                fmt_p(r.permutation_p),
                fmt_p(r.p_bonferroni),
                fmt_p(r.p_bh),
                if r.reject { "yes" } else { "no" }.into(),
            ]
        })
        .collect();
    let mut width: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in &rows {
        for (w, cell) in width.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| -> String {
        cells
            .iter()
            .zip(&width)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    for row in &rows {
        out.push_str(&line(row.iter().map(|s| s.as_str()).collect()));
        out.push('\n');
    }
    out
}
