use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use ssc_core::ica::{match_components, IcaConfig};
use ssc_core::inference::{
    apply_adjustments, render_table, test_between_groups, test_between_networks, test_ssc_positive, ComponentSample,
    TestReport, VarianceSource,
};
use ssc_core::io::{
    fmri_csv, grid_csv, load_cohort, manifest_csv, masks_csv, read_grid, read_json, read_masks, read_masks_lenient,
    read_partition, write_counts, ManifestEntry,
};
use ssc_core::model::{Cohort, ComponentMask, VoxelGrid};
use ssc_core::reliability::{reliability_index, scatter_csv, ssc_reliability_association, AssociationReport};
use ssc_core::resampling::{bootstrap_mean, ResampleMode, ResamplePlan};
use ssc_core::rng::{derive_seed, purpose};
use ssc_core::simulator::{run_study, simulate_subjects, SimScenario};
use ssc_core::spatial::{
    class_residuals, default_edges, delta_variance_for, fit_semivariogram, CovarianceField, CovarianceOptions, Family,
    LagPlan, PairGeometry, SemivariogramFit,
};
use ssc_core::ssc::{estimate_ssc, estimate_ssc_region, Level, LinearForm, RegionPartition};
use ssc_core::Error;

use crate::output::{write_metadata, CliError, CliResult, Section};
use crate::{Command, EstimateArgs, Global, ReliabilityArgs, ReportArgs, SimulateArgs, TestArgs, VarianceArgs};

pub fn run(global: &Global, command: &Command) -> CliResult<()> {
    if let Some(t) = global.threads {
        if t == 0 {
            return Err(CliError::usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::usage(format!("thread pool: {e}")))?;
    }
    let seed = global.seed.unwrap_or(0);
    match command {
        Command::Simulate(a) => simulate(global, a),
        Command::Estimate(a) => estimate(&global.outdir, seed, a),
        Command::Variance(a) => variance(&global.outdir, seed, a),
        Command::Test(a) => test(&global.outdir, seed, a),
        Command::Reliability(a) => reliability(&global.outdir, seed, a),
        Command::Report(a) => report(&global.outdir, seed, a),
    }
}

fn check_alpha(alpha: f64) -> CliResult<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(CliError::usage(format!("--alpha must be in (0, 1), got {alpha}")));
    }
    Ok(())
}

fn check_replicates(replicates: usize, min: usize) -> CliResult<()> {
    if replicates < min {
        return Err(CliError::usage(format!(
            "--replicates must be at least {min}, got {replicates}"
        )));
    }
    Ok(())
}

fn simulate(global: &Global, a: &SimulateArgs) -> CliResult<()> {
    let mut sc = match &a.scenario {
        Some(p) => read_json::<SimScenario>(p).map_err(|e| CliError::usage(format!("scenario: {e}")))?,
        None => SimScenario::default(),
    };
    if let Some(r) = a.replicates {
        check_replicates(r, 1)?;
        sc.replicates = r;
    }
    if let Some(s) = global.seed {
        sc.seed = s;
    }
    sc.validate().map_err(|e| CliError::usage(format!("scenario: {e}")))?;

    if a.export_data {
        export_dataset(&global.outdir.join("data"), &sc)?;
    }
    let section = Section::new(&global.outdir, "report");
    if !a.data_only {
        let outcome = run_study(&sc)?;
        let table = outcome.summary.render_table();
        print!("{table}");
        section.text("simulation_table.txt", &table)?;
        section.json("simulation_summary.json", &outcome.summary)?;
        section.text("simulation_records.csv", &outcome.records_csv())?;
    }
    write_metadata(&section, "simulate", sc.seed)
}

fn export_dataset(dir: &Path, sc: &SimScenario) -> CliResult<()> {
    let grid = sc.grid()?;
    let section = Section::at(dir);
    section.json("scenario.json", sc)?;
    section.text("grid.csv", &grid_csv(&grid))?;
    section.text("masks.csv", &masks_csv(&sc.masks()?, &grid))?;
    let mut entries = Vec::new();
    for s in simulate_subjects(sc, 0)? {
        let counts = dir.join("counts").join(format!("{}.csv", s.subject_id));
        write_counts(&counts, &s.counts, &grid)?;
        let fmri = dir.join("fmri").join(format!("{}.csv", s.subject_id));
        if let Some(y) = &s.fmri {
            section.text(&format!("fmri/{}.csv", s.subject_id), &fmri_csv(y, &grid))?;
        }
        entries.push(ManifestEntry {
            subject_id: s.subject_id,
            group: s.group,
            counts,
            fmri: Some(fmri),
        });
    }
    section.text("manifest.csv", &manifest_csv(&entries, dir))
}

/// One subject's estimate for one component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub subject: String,
    pub group: Option<String>,
    pub component: String,
    pub level: Level,
    pub theta_hat: f64,
    pub numerator: f64,
    pub denominator: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub component: String,
    pub subject: Option<String>,
    pub error: String,
}

/// Mean θ̂ of one component over all subjects (`group` absent) or one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentMean {
    pub component: String,
    pub group: Option<String>,
    pub n: usize,
    pub mean: f64,
    pub se_boot: Option<f64>,
    pub ci: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatesFile {
    pub level: Level,
    pub components: Vec<String>,
    pub estimates: Vec<EstimateRecord>,
    pub summary: Vec<ComponentMean>,
    pub failures: Vec<Failure>,
}

fn load(data: &crate::DataArgs, with_fmri: bool) -> CliResult<Cohort> {
    let grid = read_grid(&data.grid)?;
    Ok(load_cohort(&data.manifest, grid, with_fmri)?)
}

/// Valid masks, with one failure per component that has too few voxels.
fn lenient_masks(path: &Path, grid: &VoxelGrid, failures: &mut Vec<Failure>) -> CliResult<Vec<ComponentMask>> {
    let mut masks = Vec::new();
    for (label, m) in read_masks_lenient(path, grid)? {
        match m {
            Ok(m) => masks.push(m),
            Err(e) => {
                log::warn!("{e}");
                failures.push(Failure {
                    component: label,
                    subject: None,
                    error: e.to_string(),
                });
            }
        }
    }
    Ok(masks)
}

fn mean_summary(component: &str, group: Option<&str>, values: &[f64], plan: &ResamplePlan) -> CliResult<ComponentMean> {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let (se_boot, ci) = if n >= 2 {
        let r = bootstrap_mean(values, plan)?;
        (r.se, r.ci)
    } else {
        (None, None)
    };
    Ok(ComponentMean {
        component: component.to_string(),
        group: group.map(str::to_string),
        n,
        mean,
        se_boot,
        ci,
    })
}

fn groups_of(records: &[EstimateRecord]) -> Vec<String> {
    records
        .iter()
        .filter_map(|r| r.group.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

fn estimate(outdir: &Path, seed: u64, a: &EstimateArgs) -> CliResult<()> {
    check_alpha(a.alpha)?;
    check_replicates(a.replicates, 2)?;
    let cohort = load(&a.data, false)?;
    let grid = cohort.grid();
    let mut failures = Vec::new();
    let masks = lenient_masks(&a.masks, grid, &mut failures)?;
    let level: Level = a.level.into();
    let partitions: Option<Vec<RegionPartition>> = match (&level, &a.partition) {
        (Level::Region, Some(p)) => {
            let assignment = read_partition(p, grid)?;
            Some(
                masks
                    .iter()
                    .map(|m| RegionPartition::from_parcellation(grid.len(), &assignment, m))
                    .collect::<ssc_core::Result<_>>()?,
            )
        }
        (Level::Region, None) => return Err(CliError::usage("--level region needs --partition")),
        _ => None,
    };

    let mut estimates = Vec::new();
    for (c, mask) in masks.iter().enumerate() {
        for s in cohort.subjects() {
            let e = match &partitions {
                Some(p) => estimate_ssc_region::<f64>(&s.counts, &p[c]),
                None => estimate_ssc::<f64>(&s.counts, mask),
            };
            match e {
                Ok(e) => estimates.push(EstimateRecord {
                    subject: s.subject_id.clone(),
                    group: s.group.clone(),
                    component: mask.label().to_string(),
                    level,
                    theta_hat: e.theta_hat,
                    numerator: e.numerator,
                    denominator: e.denominator,
                }),
                Err(e) => {
                    log::warn!("{} / {}: {e}", s.subject_id, mask.label());
                    failures.push(Failure {
                        component: mask.label().to_string(),
                        subject: Some(s.subject_id.clone()),
                        error: e.to_string(),
                    });
                }
            }
        }
    }
    if estimates.is_empty() {
        return Err(CliError::data("no component could be estimated"));
    }

    let components: Vec<String> = masks.iter().map(|m| m.label().to_string()).collect();
    let groups = groups_of(&estimates);
    let mut summary = Vec::new();
    for (c, label) in components.iter().enumerate() {
        let plan = ResamplePlan {
            alpha: a.alpha,
            ..ResamplePlan::bootstrap(a.replicates, derive_seed(seed, &[purpose::BOOTSTRAP, c as u64]))
        };
        let of = |g: Option<&str>| -> Vec<f64> {
            estimates
                .iter()
                .filter(|r| &r.component == label && (g.is_none() || r.group.as_deref() == g))
                .map(|r| r.theta_hat)
                .collect()
        };
        let all = of(None);
        if all.is_empty() {
            continue;
        }
        summary.push(mean_summary(label, None, &all, &plan)?);
        if groups.len() > 1 {
            for (k, g) in groups.iter().enumerate() {
                let values = of(Some(g));
                if !values.is_empty() {
                    let plan = ResamplePlan {
                        seed: derive_seed(seed, &[purpose::BOOTSTRAP, c as u64, k as u64 + 1]),
                        ..plan.clone()
                    };
                    summary.push(mean_summary(label, Some(g), &values, &plan)?);
                }
            }
        }
    }
    let file = EstimatesFile {
        level,
        components,
        estimates,
        summary,
        failures,
    };
    let section = Section::new(outdir, "estimates");
    section.json("estimates.json", &file)?;
    section.text("estimates.csv", &estimates_csv(&file.estimates))?;
    let table = estimates_table(&file);
    print!("{table}");
    section.text("estimates.txt", &table)?;
    write_metadata(&section, "estimate", seed)
}

fn estimates_csv(records: &[EstimateRecord]) -> String {
    let mut out = String::from("subject,group,component,level,theta_hat,numerator,denominator\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.subject,
            r.group.as_deref().unwrap_or(""),
            r.component,
            r.level,
            r.theta_hat,
            r.numerator,
            r.denominator
        ));
    }
    out
}

fn aligned(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut width: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in width.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &[String]| -> String {
        let s: Vec<String> = cells.iter().zip(&width).map(|(c, w)| format!("{c:<w$}")).collect();
        s.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(&header.iter().map(|h| h.to_string()).collect::<Vec<_>>());
    for row in rows {
        out.push_str(&line(row));
    }
    out
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or("-".into(), |x| format!("{x:.4}"))
}

fn estimates_table(file: &EstimatesFile) -> String {
    let rows: Vec<Vec<String>> = file
        .summary
        .iter()
        .map(|s| {
            vec![
                s.component.clone(),
                s.group.clone().unwrap_or_else(|| "all".into()),
                s.n.to_string(),
                format!("{:.4}", s.mean),
                fmt_opt(s.se_boot),
                s.ci.map_or("-".into(), |(lo, hi)| format!("({lo:.4}, {hi:.4})")),
            ]
        })
        .collect();
    let mut out = aligned(
        &["component", "group", "n", "mean_theta", "se_boot", "bootstrap_ci"],
        &rows,
    );
    for f in &file.failures {
        out.push_str(&format!(
            "failed: {}{}: {}\n",
            f.component,
            f.subject.as_ref().map(|s| format!(" / {s}")).unwrap_or_default(),
            f.error
        ));
    }
    out
}

/// Delta-method variance of one subject's estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceRecord {
    pub subject: String,
    pub component: String,
    pub theta_hat: f64,
    pub variance: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    /// Absent for a pooled fit.
    pub subject: Option<String>,
    pub family: Family,
    pub nugget: f64,
    pub partial_sill: f64,
    pub range: f64,
    pub residual: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceFile {
    pub variances: Vec<VarianceRecord>,
    pub fits: Vec<FitRecord>,
    pub failures: Vec<Failure>,
}

fn fit_record(subject: Option<&str>, fit: &SemivariogramFit<f64>) -> FitRecord {
    FitRecord {
        subject: subject.map(str::to_string),
        family: fit.model.family,
        nugget: fit.model.nugget,
        partial_sill: fit.model.partial_sill,
        range: fit.model.range,
        residual: fit.residual,
        degenerate: fit.degenerate,
    }
}

fn variance(outdir: &Path, seed: u64, a: &VarianceArgs) -> CliResult<()> {
    let cohort = load(&a.data, false)?;
    let grid = cohort.grid();
    let mut failures = Vec::new();
    let masks = lenient_masks(&a.masks, grid, &mut failures)?;
    let family: Family = a.family.into();
    let lags = LagPlan::<f64>::new(
        grid,
        &default_edges(grid),
        a.budget,
        derive_seed(seed, &[purpose::VARIOGRAM]),
    )?;
    let fields: Vec<Vec<f64>> = cohort
        .subjects()
        .iter()
        .map(|s| class_residuals(&s.counts, &masks))
        .collect();

    let mut variogram = String::from("subject,lower,upper,mean_lag,gamma,count\n");
    let mut push_bins = |subject: &str, fit: &SemivariogramFit<f64>| {
        for b in &fit.bins.bins {
            variogram.push_str(&format!(
                "{subject},{},{},{},{},{}\n",
                b.lower, b.upper, b.mean_lag, b.gamma, b.count
            ));
        }
    };
    let mut fits = Vec::new();
    let models = if a.pooled {
        let fit = fit_semivariogram(&lags.pooled(&fields)?, family)?;
        push_bins("pooled", &fit);
        fits.push(fit_record(None, &fit));
        vec![fit.model; fields.len()]
    } else {
        let mut models = Vec::with_capacity(fields.len());
        for (s, f) in cohort.subjects().iter().zip(&fields) {
            let fit = fit_semivariogram(&lags.semivariogram(f)?, family)?;
            push_bins(&s.subject_id, &fit);
            fits.push(fit_record(Some(&s.subject_id), &fit));
            models.push(fit.model);
        }
        models
    };

    let geometry = Arc::new(PairGeometry::<f64>::new(grid));
    let mut variances = Vec::new();
    for mask in &masks {
        let streams = cohort.subjects().first().map_or(1, |s| s.counts.streams_per_seed());
        let form = LinearForm::<f64>::new(mask, grid.len(), streams)?;
        for (s, model) in cohort.subjects().iter().zip(&models) {
            let result = (|| -> ssc_core::Result<VarianceRecord> {
                let form = if s.counts.streams_per_seed() == streams {
                    form.clone()
                } else {
                    LinearForm::new(mask, grid.len(), s.counts.streams_per_seed())?
                };
                let theta = estimate_ssc::<f64>(&s.counts, mask)?.theta_hat;
                let cov = CovarianceField::from_model(
                    Arc::clone(&geometry),
                    form.support().to_vec(),
                    form.gather(&s.counts),
                    s.counts.streams_per_seed(),
                    *model,
                    CovarianceOptions::lazy(),
                )?;
                let d = delta_variance_for(&form, &cov)?;
                Ok(VarianceRecord {
                    subject: s.subject_id.clone(),
                    component: mask.label().to_string(),
                    theta_hat: theta,
                    variance: d.variance,
                    se: d.se(),
                })
            })();
            match result {
                Ok(r) => variances.push(r),
                Err(e) => {
                    log::warn!("{} / {}: {e}", s.subject_id, mask.label());
                    failures.push(Failure {
                        component: mask.label().to_string(),
                        subject: Some(s.subject_id.clone()),
                        error: e.to_string(),
                    });
                }
            }
        }
    }
    let file = VarianceFile {
        variances,
        fits,
        failures,
    };
    let section = Section::new(outdir, "estimates");
    section.json("variance.json", &file)?;
    let mut csv = String::from("subject,component,theta_hat,variance,se\n");
    for r in &file.variances {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.subject, r.component, r.theta_hat, r.variance, r.se
        ));
    }
    section.text("variance.csv", &csv)?;
    section.text("variogram.csv", &variogram)?;
    write_metadata(&section, "variance", seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestsFile {
    pub one_sample: Vec<TestReport>,
    pub between_network: Vec<TestReport>,
    pub between_group: Vec<TestReport>,
    /// Group labels in the order of each between-group comparison.
    pub groups: Vec<String>,
    pub warnings: Vec<String>,
}

fn sample(
    records: &[&EstimateRecord],
    component: &str,
    delta: Option<&BTreeMap<(String, String), f64>>,
) -> CliResult<ComponentSample> {
    let subjects: Vec<String> = records.iter().map(|r| r.subject.clone()).collect();
    let theta: Vec<f64> = records.iter().map(|r| r.theta_hat).collect();
    let s = ComponentSample::new(component, subjects, theta)?;
    match delta {
        None => Ok(s),
        Some(map) => {
            let v = records
                .iter()
                .map(|r| {
                    map.get(&(r.subject.clone(), component.to_string()))
                        .copied()
                        .ok_or_else(|| {
                            CliError::from(Error::InvalidInput(format!(
                                "no delta variance for subject {} in {component}",
                                r.subject
                            )))
                        })
                })
                .collect::<CliResult<Vec<f64>>>()?;
            Ok(s.with_delta(v)?)
        }
    }
}

fn only<'a>(records: &[&'a EstimateRecord], subjects: &BTreeSet<&str>) -> Vec<&'a EstimateRecord> {
    records
        .iter()
        .copied()
        .filter(|r| subjects.contains(r.subject.as_str()))
        .collect()
}

fn test(outdir: &Path, seed: u64, a: &TestArgs) -> CliResult<()> {
    check_alpha(a.alpha)?;
    check_replicates(a.replicates, 2)?;
    let est: EstimatesFile = read_json(&a.estimates)?;
    let source: VarianceSource = a.source.into();
    let delta: Option<BTreeMap<(String, String), f64>> = match &a.variance {
        Some(p) => {
            let v: VarianceFile = read_json(p)?;
            Some(
                v.variances
                    .into_iter()
                    .map(|r| ((r.subject, r.component), r.variance))
                    .collect(),
            )
        }
        None => None,
    };
    let delta = if source == VarianceSource::Delta {
        delta.as_ref()
    } else {
        None
    };
    let by_component =
        |c: &str| -> Vec<&EstimateRecord> { est.estimates.iter().filter(|r| r.component == c).collect() };
    let components: Vec<&String> = est.components.iter().filter(|c| !by_component(c).is_empty()).collect();
    let mut warnings = Vec::new();

    let mut one_sample = Vec::new();
    for (c, label) in components.iter().enumerate() {
        let s = sample(&by_component(label), label, delta)?;
        let plan = ResamplePlan::bootstrap(a.replicates, derive_seed(seed, &[purpose::BOOTSTRAP, c as u64]));
        one_sample.push(test_ssc_positive(&s, source, a.alpha, &plan)?);
    }
    apply_adjustments(&mut one_sample);

    let mut between_network = Vec::new();
    for i in 0..components.len() {
        for j in i + 1..components.len() {
            let (ri, rj) = (by_component(components[i]), by_component(components[j]));
            let common: BTreeSet<&str> = ri
                .iter()
                .map(|r| r.subject.as_str())
                .filter(|s| rj.iter().any(|r| r.subject == *s))
                .collect();
            if common.len() < ri.len().max(rj.len()) {
                warnings.push(format!(
                    "{} vs {}: {} subject(s) with both estimates used",
                    components[i],
                    components[j],
                    common.len()
                ));
            }
            let a_s = sample(&only(&ri, &common), components[i], None)?;
            let b_s = sample(&only(&rj, &common), components[j], None)?;
            let plan = ResamplePlan::permutation(
                ResampleMode::PermuteNetworkLabels,
                a.replicates,
                derive_seed(seed, &[purpose::PERMUTATION, 1, i as u64, j as u64]),
            );
            between_network.push(test_between_networks(&a_s, &b_s, &plan, a.alpha)?);
        }
    }
    apply_adjustments(&mut between_network);

    let groups = groups_of(&est.estimates);
    let mut between_group = Vec::new();
    if groups.len() == 2 {
        for (c, label) in components.iter().enumerate() {
            let recs = by_component(label);
            let part = |g: &str| -> Vec<&EstimateRecord> {
                recs.iter().copied().filter(|r| r.group.as_deref() == Some(g)).collect()
            };
            let g1 = sample(&part(&groups[0]), label, delta)?;
            let g2 = sample(&part(&groups[1]), label, delta)?;
            let (g1, g2) = (
                ComponentSample {
                    component: format!("{label}[{}]", groups[0]),
                    ..g1
                },
                ComponentSample {
                    component: format!("{label}[{}]", groups[1]),
                    ..g2
                },
            );
            let plan = ResamplePlan::permutation(
                ResampleMode::PermuteGroupLabels,
                a.replicates,
                derive_seed(seed, &[purpose::PERMUTATION, 2, c as u64]),
            );
            between_group.push(test_between_groups(&g1, &g2, source, &plan, a.alpha)?);
        }
        apply_adjustments(&mut between_group);
    } else if groups.len() > 2 {
        warnings.push(format!(
            "{} groups found; between-group tests need exactly 2",
            groups.len()
        ));
    }

    let file = TestsFile {
        one_sample,
        between_network,
        between_group,
        groups,
        warnings,
    };
    let section = Section::new(outdir, "tests");
    section.json("tests.json", &file)?;
    let text = tests_text(&file);
    print!("{text}");
    section.text("tests.txt", &text)?;
    write_metadata(&section, "test", seed)
}

fn tests_text(file: &TestsFile) -> String {
    let mut out = String::new();
    for (title, reports) in [
        ("One-sample tests (theta > 0)", &file.one_sample),
        ("Between-network tests", &file.between_network),
        ("Between-group tests", &file.between_group),
    ] {
        if reports.is_empty() {
            continue;
        }
        out.push_str(title);
        if std::ptr::eq(reports, &file.between_group) {
            out.push_str(&format!(" ({} - {})", file.groups[0], file.groups[1]));
        }
        out.push('\n');
        out.push_str(&render_table(reports));
        out.push('\n');
    }
    for w in &file.warnings {
        out.push_str(&format!("warning: {w}\n"));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityRow {
    pub component: String,
    /// Row of the extracted map in `maps.csv`.
    pub index: usize,
    pub observed: f64,
    pub chance: f64,
    #[serde(rename = "R")]
    pub r: f64,
    #[serde(rename = "R_display")]
    pub r_display: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityFile {
    pub q: usize,
    pub replicates: usize,
    pub completed: usize,
    pub dropped: usize,
    pub components: Vec<ReliabilityRow>,
    pub warnings: Vec<String>,
}

/// Label extracted maps by their best one-to-one match with the masks,
/// strongest correlations first; leftovers are named `IC<k>`.
fn label_components(maps: &DMatrix<f64>, masks: &[ComponentMask]) -> CliResult<Vec<String>> {
    let q = maps.nrows();
    let mut labels: Vec<Option<String>> = vec![None; q];
    if !masks.is_empty() {
        let truth = DMatrix::from_fn(masks.len(), maps.ncols(), |m, v| {
            f64::from(u8::from(masks[m].contains(v)))
        });
        let matched = match_components(&truth, maps)?;
        let mut pairs: Vec<(f64, usize, usize)> = matched
            .matches
            .iter()
            .flat_map(|m| m.all_abs_r.iter().enumerate().map(move |(c, &r)| (r, m.reference, c)))
            .collect();
        pairs.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
        let mut used = vec![false; masks.len()];
        for (_, m, c) in pairs {
            if !used[m] && labels[c].is_none() {
                used[m] = true;
                labels[c] = Some(masks[m].label().to_string());
            }
        }
    }
    Ok(labels
        .into_iter()
        .enumerate()
        .map(|(k, l)| l.unwrap_or_else(|| format!("IC{}", k + 1)))
        .collect())
}

fn reliability(outdir: &Path, seed: u64, a: &ReliabilityArgs) -> CliResult<()> {
    check_replicates(a.replicates, 10)?;
    let cohort = load(&a.data, true)?;
    let grid = cohort.grid();
    let masks = match &a.masks {
        Some(p) => read_masks(p, grid)?,
        None => Vec::new(),
    };
    let q = a.components.unwrap_or(if masks.is_empty() { 2 } else { masks.len() });
    if q == 0 || q > grid.len() {
        return Err(CliError::usage(format!("--components must be in 1..={}", grid.len())));
    }
    let fmri = cohort
        .subjects()
        .iter()
        .map(|s| {
            s.fmri
                .clone()
                .ok_or_else(|| CliError::data(format!("subject {} has no fMRI", s.subject_id)))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let config = IcaConfig::new(q, derive_seed(seed, &[purpose::ICA_INIT]));
    let (set, rep) = reliability_index(&fmri, &config, a.replicates, seed)?;
    let labels = label_components(&set.maps, &masks)?;

    let mut order: Vec<usize> = (0..q).collect();
    let rank = |c: usize| {
        masks
            .iter()
            .position(|m| m.label() == labels[c])
            .unwrap_or(masks.len() + c)
    };
    order.sort_by_key(|&c| rank(c));
    let components = order
        .iter()
        .map(|&c| {
            let r = &rep.components[c];
            ReliabilityRow {
                component: labels[c].clone(),
                index: c,
                observed: r.observed,
                chance: r.chance,
                r: r.r,
                r_display: r.r_display,
            }
        })
        .collect();
    let file = ReliabilityFile {
        q,
        replicates: rep.replicates,
        completed: rep.completed,
        dropped: rep.dropped,
        components,
        warnings: rep.warnings,
    };
    let section = Section::new(outdir, "reliability");
    section.json("reliability.json", &file)?;
    let mut csv = String::from("component,observed,chance,R,R_display\n");
    for r in &file.components {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.component, r.observed, r.chance, r.r, r.r_display
        ));
    }
    print!("{csv}");
    section.text("reliability.csv", &csv)?;
    let mut maps = String::from("component,voxel_id,value\n");
    for &c in &order {
        for v in 0..grid.len() {
            maps.push_str(&format!("{},{},{}\n", labels[c], grid.external_id(v), set.maps[(c, v)]));
        }
    }
    section.text("maps.csv", &maps)?;
    write_metadata(&section, "reliability", seed)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct ReportFile {
    scatter: Vec<(String, f64, f64)>,
    association: Option<AssociationReport>,
    warnings: Vec<String>,
}

fn report(outdir: &Path, seed: u64, a: &ReportArgs) -> CliResult<()> {
    check_replicates(a.permutations, 1)?;
    let est: EstimatesFile = read_json(&a.estimates)?;
    let mut text = String::from("sSC estimates\n");
    text.push_str(&estimates_table(&est));
    let mut warnings = Vec::new();

    if let Some(p) = &a.tests {
        let tests: TestsFile = read_json(p)?;
        text.push('\n');
        text.push_str(&tests_text(&tests));
    }

    let mut scatter = Vec::new();
    let mut association = None;
    if let Some(p) = &a.reliability {
        let rel: ReliabilityFile = read_json(p)?;
        text.push_str("\nReliability\n");
        let rows: Vec<Vec<String>> = rel
            .components
            .iter()
            .map(|r| {
                vec![
                    r.component.clone(),
                    format!("{:.4}", r.observed),
                    format!("{:.4}", r.chance),
                    format!("{:.4}", r.r),
                    format!("{:.4}", r.r_display),
                ]
            })
            .collect();
        text.push_str(&aligned(&["component", "observed", "chance", "R", "R_display"], &rows));
        for r in &rel.components {
            if let Some(m) = est
                .summary
                .iter()
                .find(|s| s.component == r.component && s.group.is_none())
            {
                scatter.push((r.component.clone(), m.mean, r.r));
            }
        }
        if scatter.len() >= 3 {
            let theta: Vec<f64> = scatter.iter().map(|s| s.1).collect();
            let rr: Vec<f64> = scatter.iter().map(|s| s.2).collect();
            let assoc = ssc_reliability_association(
                &theta,
                &rr,
                a.permutations,
                derive_seed(seed, &[purpose::PERMUTATION, 3]),
            )?;
            text.push_str("\nsSC-reliability association\n");
            for (name, c) in [("Pearson", &assoc.pearson), ("Spearman", &assoc.spearman)] {
                text.push_str(&format!(
                    "{name}: r = {}, p = {}\n",
                    fmt_opt(c.estimate),
                    fmt_opt(c.p_value)
                ));
            }
            warnings.extend(assoc.warnings.iter().cloned());
            association = Some(assoc);
        } else {
            warnings.push(format!(
                "association needs at least 3 components with both θ̂ and R, found {}",
                scatter.len()
            ));
        }
    }
    for w in &warnings {
        text.push_str(&format!("warning: {w}\n"));
    }

    let section = Section::new(outdir, "report");
    let labels: Vec<String> = scatter.iter().map(|s| s.0.clone()).collect();
    let theta: Vec<f64> = scatter.iter().map(|s| s.1).collect();
    let rr: Vec<f64> = scatter.iter().map(|s| s.2).collect();
    section.text("scatter.csv", &scatter_csv(&labels, &theta, &rr))?;
    section.json(
        "report.json",
        &ReportFile {
            scatter,
            association,
            warnings,
        },
    )?;
    print!("{text}");
    section.text("report.txt", &text)?;
    write_metadata(&section, "report", seed)
}
