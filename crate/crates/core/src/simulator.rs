//! Synthetic cohorts with known source maps and connection probabilities, and
//! the replicate study that measures bias, standard errors and coverage.
//!
//! Two sources live on a `width × height` slice: IC 1 occupies the two
//! central columns minus the central band of rows (front-back), IC 2 is its
//! transpose (left-right). On the default 10 × 10 slice each has 12 voxels.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::DMatrix;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StatNormal};

use crate::error::{Error, Result};
use crate::ica::{group_ica_from_gram, match_components, subject_gram, IcaConfig};
use crate::model::{ComponentMask, PairIndex, StreamCounts, SubjectDataset, VoxelGrid};
use crate::mvn::{Factorization, MvnSampler};
use crate::resampling::{bootstrap_mean, sample_sd, ResamplePlan};
use crate::rng::{derive_seed, purpose, stream};
use crate::spatial::{
    class_residuals, default_edges, delta_variance_for, fit_semivariogram, CovarianceField, CovarianceOptions, Family,
    LagPlan, PairGeometry, VariogramModel,
};
use crate::ssc::{estimate_ssc, true_ssc_from_probabilities, LinearForm, ProbabilityField};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseLevel {
    Low,
    High,
}

impl NoiseLevel {
    /// `(c₀, c_e, a_e)` of the exponential generator.
    pub fn parameters(self) -> (f64, f64, f64) {
        match self {
            NoiseLevel::Low => (1.0, 4.0, 1.0),
            NoiseLevel::High => (2.0, 5.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimScenario {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub time_points: usize,
    pub subjects: usize,
    pub source_intensity: f64,
    pub background_sd: f64,
    pub jitter_sd: f64,
    /// Standard deviation of the additive noise `e`.
    pub noise_sd: f64,
    pub ar_coefficient: f64,
    pub streams: u32,
    pub p_out: f64,
    /// Within-component probability for IC 1 and IC 2.
    pub p_in: [f64; 2],
    pub nugget: f64,
    pub partial_sill: f64,
    pub range: f64,
    pub seed: u64,
    pub replicates: usize,
    pub bootstrap_replicates: usize,
    pub alpha: f64,
    /// Estimate masks by group ICA; otherwise use the true masks.
    pub extract_components: bool,
    pub variogram_budget: u64,
    /// One semivariogram per replicate from all subjects instead of one per subject.
    pub pooled_variogram: bool,
}

impl Default for SimScenario {
    fn default() -> Self {
        Self::standard(NoiseLevel::Low, 20)
    }
}

impl SimScenario {
    pub fn standard(noise: NoiseLevel, subjects: usize) -> Self {
        let (nugget, partial_sill, range) = noise.parameters();
        let level = match noise {
            NoiseLevel::Low => "low",
            NoiseLevel::High => "high",
        };
        Self {
            name: format!("n{subjects}-{level}"),
            width: 10,
            height: 10,
            time_points: 200,
            subjects,
            source_intensity: 3.0,
            background_sd: 0.5,
            jitter_sd: 0.1,
            noise_sd: 1.0,
            ar_coefficient: 0.3,
            streams: 20,
            p_out: 0.25,
            p_in: [0.5, 0.75],
            nugget,
            partial_sill,
            range,
            seed: 0,
            replicates: 100,
            bootstrap_replicates: 1000,
            alpha: 0.05,
            extract_components: true,
            variogram_budget: 2_000_000,
            pooled_variogram: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(msg));
        if self.width < 6 || self.height < 6 {
            return bad(format!("slice {}×{} is smaller than 6×6", self.width, self.height));
        }
        if self.time_points < 2 {
            return bad("need at least 2 time points".into());
        }
        if self.subjects < 2 {
            return Err(Error::TooFewSubjects(self.subjects));
        }
        if self.replicates < 1 {
            return bad("replicates must be at least 1".into());
        }
        if self.bootstrap_replicates < 2 {
            return Err(Error::NotEnoughReplicates(self.bootstrap_replicates));
        }
        if self.streams == 0 {
            return bad("streams per seed must be positive".into());
        }
        for p in [self.p_out, self.p_in[0], self.p_in[1]] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("probability {p} outside [0, 1]"));
            }
        }
        let sds = [
            self.background_sd,
            self.jitter_sd,
            self.noise_sd,
            self.nugget,
            self.partial_sill,
        ];
        if sds.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return bad("noise parameters must be finite and nonnegative".into());
        }
        if !(self.range > 0.0 && self.range.is_finite()) {
            return bad(format!("range {} must be positive", self.range));
        }
        if !(self.ar_coefficient.abs() < 1.0) {
            return bad(format!("AR coefficient {} must be inside (-1, 1)", self.ar_coefficient));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha {} must be in (0, 1)", self.alpha));
        }
        Ok(())
    }

    pub fn n_voxels(&self) -> usize {
        self.width * self.height
    }

    pub fn grid(&self) -> Result<VoxelGrid> {
        VoxelGrid::regular_2d(self.width, self.height)
    }

    pub fn masks(&self) -> Result<[ComponentMask; 2]> {
        let (w, h) = (self.width, self.height);
        // Two central lines along one axis, minus the four central cells along the other.
        let band = |a: usize, b: usize, na: usize, nb: usize| {
            (a == na / 2 - 1 || a == na / 2) && !(nb / 2 - 2..=nb / 2 + 1).contains(&b)
        };
        let members =
            |f: &dyn Fn(usize, usize) -> bool| -> Vec<usize> { (0..w * h).filter(|&v| f(v % w, v / w)).collect() };
        Ok([
            ComponentMask::new("IC1", members(&|x, y| band(x, y, w, h)), w * h)?,
            ComponentMask::new("IC2", members(&|x, y| band(y, x, h, w)), w * h)?,
        ])
    }

    pub fn probabilities(&self) -> Result<ProbabilityField<f64>> {
        let [m1, m2] = self.masks()?;
        ProbabilityField::from_fn(self.n_voxels(), |j, k| {
            if m1.contains(j) && m1.contains(k) {
                self.p_in[0]
            } else if m2.contains(j) && m2.contains(k) {
                self.p_in[1]
            } else {
                self.p_out
            }
        })
    }

    pub fn true_theta(&self) -> Result<[f64; 2]> {
        let p = self.probabilities()?;
        let [m1, m2] = self.masks()?;
        Ok([
            true_ssc_from_probabilities(&p, &m1)?,
            true_ssc_from_probabilities(&p, &m2)?,
        ])
    }

    pub fn generator_model(&self) -> Result<VariogramModel<f64>> {
        VariogramModel::new(Family::Exponential, self.nugget, self.partial_sill, self.range)
    }

    /// "low", "high" or "custom" depending on the generator parameters.
    pub fn noise_label(&self) -> &'static str {
        let params = (self.nugget, self.partial_sill, self.range);
        if params == NoiseLevel::Low.parameters() {
            "Low"
        } else if params == NoiseLevel::High.parameters() {
            "High"
        } else {
            "Custom"
        }
    }

    /// Source maps `S` (2 × V), drawn once per scenario seed and shared by
    /// every subject and replicate.
    pub fn source_maps(&self) -> Result<DMatrix<f64>> {
        let masks = self.masks()?;
        let mut rng = stream(self.seed, &[purpose::SOURCE_MAPS]);
        Ok(DMatrix::from_fn(2, self.n_voxels(), |r, v| {
            let background: f64 = StandardNormal.sample(&mut rng);
            let jitter: f64 = StandardNormal.sample(&mut rng);
            let mut x = self.background_sd * background;
            if masks[r].contains(v) {
                x += self.source_intensity + self.jitter_sd * jitter;
            }
            x
        }))
    }
}

/// One subject's simulated fMRI.
#[derive(Debug, Clone)]
pub struct SimulatedFmri {
    /// `T × q` time courses.
    pub courses: DMatrix<f64>,
    /// `T × V` data `A S + e`.
    pub data: DMatrix<f64>,
}

/// Seeded AR(1) time courses mixed with `sources` plus Gaussian noise.
pub fn simulate_fmri(scenario: &SimScenario, sources: &DMatrix<f64>, subject_seed: u64) -> SimulatedFmri {
    let t = scenario.time_points;
    let q = sources.nrows();
    let phi = scenario.ar_coefficient;
    let mut rng = stream(subject_seed, &[purpose::FMRI]);
    let mut courses = DMatrix::zeros(t, q);
    for c in 0..q {
        let mut prev: f64 = StandardNormal.sample(&mut rng);
        prev /= (1.0 - phi * phi).sqrt();
        for row in 0..t {
            let innovation: f64 = StandardNormal.sample(&mut rng);
            prev = phi * prev + innovation;
            courses[(row, c)] = prev;
        }
    }
    let mut data = &courses * sources;
    if scenario.noise_sd > 0.0 {
        let noise = Normal::new(0.0, scenario.noise_sd).expect("validated sd");
        data.iter_mut().for_each(|x| *x += noise.sample(&mut rng));
    }
    SimulatedFmri { courses, data }
}

/// MVN count generator: mean `N p`, covariance from the exponential
/// semivariogram over pair distances (sill on the diagonal).
#[derive(Debug)]
pub struct CountGenerator {
    n_voxels: usize,
    streams: u32,
    sampler: MvnSampler,
}

type GeneratorKey = (usize, usize, u32, [u64; 6]);

fn generator_cache() -> &'static Mutex<HashMap<GeneratorKey, Arc<CountGenerator>>> {
    static CACHE: OnceLock<Mutex<HashMap<GeneratorKey, Arc<CountGenerator>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

impl CountGenerator {
    pub fn new(scenario: &SimScenario) -> Result<Self> {
        let grid = scenario.grid()?;
        let v = grid.len();
        let p = scenario.probabilities()?;
        let model = scenario.generator_model()?;
        let n = f64::from(scenario.streams);
        let mean: Vec<f64> = p.values().iter().map(|x| n * x).collect();
        let geometry = PairGeometry::<f64>::new(&grid);
        let index = PairIndex::new(v);
        let pairs: Vec<(usize, usize)> = index.pairs().collect();
        let m = pairs.len();
        let mut sigma = DMatrix::<f64>::zeros(m, m);
        for a in 0..m {
            sigma[(a, a)] = model.sill();
            for b in 0..a {
                let c = model.covariance(geometry.between(pairs[a], pairs[b]));
                sigma[(a, b)] = c;
                sigma[(b, a)] = c;
            }
        }
        let sampler = MvnSampler::new(mean, sigma)?;
        if let Factorization::ClippedEigen { clipped } = sampler.factorization() {
            log::warn!("count covariance factor clipped {clipped} eigenvalue(s)");
        }
        Ok(Self {
            n_voxels: v,
            streams: scenario.streams,
            sampler,
        })
    }

    /// Shared generator for the count-relevant part of `scenario`.
    pub fn cached(scenario: &SimScenario) -> Result<Arc<Self>> {
        let key = (
            scenario.width,
            scenario.height,
            scenario.streams,
            [
                scenario.p_out.to_bits(),
                scenario.p_in[0].to_bits(),
                scenario.p_in[1].to_bits(),
                scenario.nugget.to_bits(),
                scenario.partial_sill.to_bits(),
                scenario.range.to_bits(),
            ],
        );
        if let Some(g) = generator_cache().lock().expect("cache lock").get(&key) {
            return Ok(Arc::clone(g));
        }
        let built = Arc::new(Self::new(scenario)?);
        generator_cache()
            .lock()
            .expect("cache lock")
            .entry(key)
            .or_insert_with(|| Arc::clone(&built));
        Ok(built)
    }

    pub fn factorization(&self) -> Factorization {
        self.sampler.factorization()
    }

    /// Counts rounded to the nearest integer and clamped to `[0, N]`.
    pub fn draw(&self, subject_seed: u64) -> Result<StreamCounts> {
        let mut rng = stream(subject_seed, &[purpose::COUNTS]);
        let n = f64::from(self.streams);
        let values: Vec<u32> = self
            .sampler
            .sample(&mut rng)
            .into_iter()
            .map(|x| x.round().clamp(0.0, n) as u32)
            .collect();
        StreamCounts::from_dense(self.n_voxels, self.streams, &values)
    }
}

/// Counts for one subject.
pub fn simulate_counts(scenario: &SimScenario, subject_seed: u64) -> Result<StreamCounts> {
    CountGenerator::cached(scenario)?.draw(subject_seed)
}

/// The subjects of one study replicate with the seeds the study uses.
/// Subjects alternate between groups `A` and `B`, which share every
/// connection probability.
pub fn simulate_subjects(scenario: &SimScenario, replicate: u64) -> Result<Vec<SubjectDataset>> {
    scenario.validate()?;
    let sources = scenario.source_maps()?;
    let generator = CountGenerator::cached(scenario)?;
    (0..scenario.subjects as u64)
        .map(|i| {
            let seed = subject_seed(scenario.seed, replicate, i);
            Ok(SubjectDataset {
                subject_id: format!("sub{:03}", i + 1),
                group: Some(if i % 2 == 0 { "A" } else { "B" }.to_string()),
                counts: generator.draw(seed)?,
                fmri: Some(simulate_fmri(scenario, &sources, seed).data),
            })
        })
        .collect()
}

/// Per replicate, per component outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub component: String,
    /// `|r|` of the estimated map with the true source (1 when masks are given).
    pub map_abs_r: f64,
    /// Voxels shared by the estimated and the true mask.
    pub mask_overlap: usize,
    pub theta_hat: f64,
    /// Delta-method SE of the mean over subjects.
    pub theory_se: f64,
    /// Mean per-subject delta-method SE.
    pub per_subject_theory_se: f64,
    pub bootstrap_se: f64,
    pub theory_ci: (f64, f64),
    pub bootstrap_ci: (f64, f64),
    pub covered_theory: bool,
    pub covered_bootstrap: bool,
}

/// Mean and sample SD.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    fn of(values: &[f64]) -> Self {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let sd = if values.len() > 1 { sample_sd(values) } else { 0.0 };
        Self { mean, sd }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSummary {
    pub component: String,
    pub theta: f64,
    pub theta_hat: MeanSd,
    pub theory_se: MeanSd,
    pub per_subject_theory_se: MeanSd,
    pub bootstrap_se: MeanSd,
    /// Percent of replicates whose Wald interval covers θ.
    pub coverage_theory: f64,
    /// Percent of replicates whose percentile interval covers θ.
    pub coverage_bootstrap: f64,
    pub map_abs_r: MeanSd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub scenario: SimScenario,
    pub noise: String,
    pub completed: usize,
    pub failures: Vec<String>,
    pub components: Vec<ComponentSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyOutcome {
    pub summary: StudySummary,
    pub records: Vec<ReplicateRecord>,
}

impl StudyOutcome {
    /// Raw per-replicate rows.
    pub fn records_csv(&self) -> String {
        let mut out = String::from(
            "replicate,component,map_abs_r,mask_overlap,theta_hat,theory_se,per_subject_theory_se,bootstrap_se,\
             theory_lo,theory_hi,bootstrap_lo,bootstrap_hi,covered_theory,covered_bootstrap\n",
        );
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.replicate,
                r.component,
                r.map_abs_r,
                r.mask_overlap,
                r.theta_hat,
                r.theory_se,
                r.per_subject_theory_se,
                r.bootstrap_se,
                r.theory_ci.0,
                r.theory_ci.1,
                r.bootstrap_ci.0,
                r.bootstrap_ci.1,
                r.covered_theory,
                r.covered_bootstrap
            ));
        }
        out
    }
}

impl StudySummary {
    /// Aligned text in the layout of the simulation results table.
    pub fn render_table(&self) -> String {
        let mut out = format!(
            "Results based on {} simulation runs\n{:<6} {:>6} {:<6} {:>8} {:>18} {:>20} {:>18} {:>8} {:>8}\n",
            self.completed,
            "",
            "n",
            "Noise",
            "theta",
            "theta_hat mean(SD)",
            "Theoretical SE(SD)",
            "Bootstrap SE(SD)",
            "Cov.I",
            "Cov.II"
        );
        for c in &self.components {
            out.push_str(&format!(
                "{:<6} {:>6} {:<6} {:>8.4} {:>18} {:>20} {:>18} {:>8.1} {:>8.1}\n",
                c.component,
                self.scenario.subjects,
                self.noise,
                c.theta,
                format!("{:.4} ({:.4})", c.theta_hat.mean, c.theta_hat.sd),
                format!("{:.4} ({:.5})", c.theory_se.mean, c.theory_se.sd),
                format!("{:.4} ({:.4})", c.bootstrap_se.mean, c.bootstrap_se.sd),
                c.coverage_theory,
                c.coverage_bootstrap
            ));
        }
        out
    }
}

/// Shared per-study state.
struct StudyContext {
    scenario: SimScenario,
    truth: [ComponentMask; 2],
    sources: DMatrix<f64>,
    theta: [f64; 2],
    generator: Arc<CountGenerator>,
    geometry: Arc<PairGeometry<f64>>,
    lags: LagPlan<f64>,
    z: f64,
}

/// Run `scenario.replicates` independent replicates.
pub fn run_study(scenario: &SimScenario) -> Result<StudyOutcome> {
    scenario.validate()?;
    let grid = scenario.grid()?;
    let lags = LagPlan::new(&grid, &default_edges(&grid), scenario.variogram_budget, scenario.seed)?;
    let z = StatNormal::new(0.0, 1.0)
        .expect("standard normal")
        .inverse_cdf(1.0 - scenario.alpha / 2.0);
    let ctx = StudyContext {
        scenario: scenario.clone(),
        truth: scenario.masks()?,
        sources: scenario.source_maps()?,
        theta: scenario.true_theta()?,
        generator: CountGenerator::cached(scenario)?,
        geometry: Arc::new(PairGeometry::new(&grid)),
        lags,
        z,
    };
    let outcomes: Vec<Result<Vec<ReplicateRecord>>> = (0..scenario.replicates)
        .into_par_iter()
        .map(|r| run_replicate(&ctx, r))
        .collect();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (r, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(rs) => records.extend(rs),
            Err(e) => {
                log::warn!("replicate {r} failed: {e}");
                failures.push(format!("replicate {r}: {e}"));
            }
        }
    }
    let completed = scenario.replicates - failures.len();
    if completed == 0 {
        return Err(Error::invalid(format!(
            "every replicate failed; first: {}",
            failures[0]
        )));
    }
    let components = ctx
        .truth
        .iter()
        .zip(ctx.theta)
        .map(|(mask, theta)| {
            let rows: Vec<&ReplicateRecord> = records.iter().filter(|r| r.component == mask.label()).collect();
            let col = |f: fn(&ReplicateRecord) -> f64| -> Vec<f64> { rows.iter().map(|r| f(r)).collect() };
            let pct = |f: fn(&ReplicateRecord) -> bool| {
                100.0 * rows.iter().filter(|r| f(r)).count() as f64 / rows.len() as f64
            };
            ComponentSummary {
                component: mask.label().to_string(),
                theta,
                theta_hat: MeanSd::of(&col(|r| r.theta_hat)),
                theory_se: MeanSd::of(&col(|r| r.theory_se)),
                per_subject_theory_se: MeanSd::of(&col(|r| r.per_subject_theory_se)),
                bootstrap_se: MeanSd::of(&col(|r| r.bootstrap_se)),
                coverage_theory: pct(|r| r.covered_theory),
                coverage_bootstrap: pct(|r| r.covered_bootstrap),
                map_abs_r: MeanSd::of(&col(|r| r.map_abs_r)),
            }
        })
        .collect();
    Ok(StudyOutcome {
        summary: StudySummary {
            scenario: scenario.clone(),
            noise: scenario.noise_label().to_string(),
            completed,
            failures,
            components,
        },
        records,
    })
}

/// Seed of subject `i` in replicate `r`.
pub fn subject_seed(master: u64, replicate: u64, subject: u64) -> u64 {
    derive_seed(master, &[purpose::STUDY, replicate, subject])
}

/// Estimated masks (largest loadings of the matched maps) and their `|r|` with the truth.
fn extract_masks(ctx: &StudyContext, r: usize) -> Result<(Vec<ComponentMask>, Vec<f64>)> {
    let sc = &ctx.scenario;
    let v = sc.n_voxels();
    let gram = (0..sc.subjects)
        .map(|i| subject_gram(&simulate_fmri(sc, &ctx.sources, subject_seed(sc.seed, r as u64, i as u64)).data))
        .fold(DMatrix::zeros(v, v), |acc, g| acc + g);
    let config = IcaConfig::new(2, derive_seed(sc.seed, &[purpose::ICA_INIT, r as u64]));
    let set = group_ica_from_gram(&gram, &config)?;
    let truth = DMatrix::from_fn(2, v, |c, j| if ctx.truth[c].contains(j) { 1.0 } else { 0.0 });
    let matched = match_components(&truth, &set.maps)?;
    let mut masks = Vec::new();
    let mut abs_r = Vec::new();
    for (m, t) in matched.matches.iter().zip(&ctx.truth) {
        let map = set.map(m.candidate);
        let mut order: Vec<usize> = (0..v).collect();
        // Maps are oriented to positive skew, so the source sits in the upper tail.
        order.sort_by(|&a, &b| map[b].total_cmp(&map[a]).then(a.cmp(&b)));
        masks.push(ComponentMask::new(t.label(), order[..t.len()].to_vec(), v)?);
        abs_r.push(m.abs_r);
    }
    Ok((masks, abs_r))
}

fn run_replicate(ctx: &StudyContext, r: usize) -> Result<Vec<ReplicateRecord>> {
    let sc = &ctx.scenario;
    let (masks, abs_r) = if sc.extract_components {
        extract_masks(ctx, r)?
    } else {
        (ctx.truth.to_vec(), vec![1.0; 2])
    };
    let counts: Vec<StreamCounts> = (0..sc.subjects)
        .map(|i| ctx.generator.draw(subject_seed(sc.seed, r as u64, i as u64)))
        .collect::<Result<_>>()?;
    let fits: Vec<VariogramModel<f64>> = if sc.pooled_variogram {
        let fields: Vec<Vec<f64>> = counts.iter().map(|c| class_residuals(c, &masks)).collect();
        let fit = fit_semivariogram(&ctx.lags.pooled(&fields)?, Family::Exponential)?;
        vec![fit.model; sc.subjects]
    } else {
        counts
            .iter()
            .map(|c| {
                Ok(fit_semivariogram(
                    &ctx.lags.semivariogram(&class_residuals(c, &masks))?,
                    Family::Exponential,
                )?
                .model)
            })
            .collect::<Result<_>>()?
    };
    let mut out = Vec::with_capacity(2);
    for (c, mask) in masks.iter().enumerate() {
        let form = LinearForm::<f64>::new(mask, sc.n_voxels(), sc.streams)?;
        let mut thetas = Vec::with_capacity(sc.subjects);
        let mut variances = Vec::with_capacity(sc.subjects);
        for (cnt, model) in counts.iter().zip(&fits) {
            thetas.push(estimate_ssc::<f64>(cnt, mask)?.theta_hat);
            let cov = CovarianceField::from_model(
                Arc::clone(&ctx.geometry),
                form.support().to_vec(),
                form.gather(cnt),
                sc.streams,
                *model,
                CovarianceOptions::lazy(),
            )?;
            variances.push(delta_variance_for(&form, &cov)?.variance);
        }
        let n = sc.subjects as f64;
        let theta_hat = thetas.iter().sum::<f64>() / n;
        let theory_se = variances.iter().sum::<f64>().sqrt() / n;
        let per_subject = variances.iter().map(|v| v.sqrt()).sum::<f64>() / n;
        let plan = ResamplePlan {
            alpha: sc.alpha,
            ..ResamplePlan::bootstrap(
                sc.bootstrap_replicates,
                derive_seed(sc.seed, &[purpose::BOOTSTRAP, r as u64, c as u64]),
            )
        };
        let boot = bootstrap_mean(&thetas, &plan)?;
        let theory_ci = (theta_hat - ctx.z * theory_se, theta_hat + ctx.z * theory_se);
        let bootstrap_ci = boot.ci.expect("bootstrap interval");
        let truth = ctx.theta[c];
        out.push(ReplicateRecord {
            replicate: r,
            component: mask.label().to_string(),
            map_abs_r: abs_r[c],
            mask_overlap: mask.members().iter().filter(|&&v| ctx.truth[c].contains(v)).count(),
            theta_hat,
            theory_se,
            per_subject_theory_se: per_subject,
            bootstrap_se: boot.se.expect("bootstrap se"),
            theory_ci,
            bootstrap_ci,
            covered_theory: theory_ci.0 <= truth && truth <= theory_ci.1,
            covered_bootstrap: bootstrap_ci.0 <= truth && truth <= bootstrap_ci.1,
        });
    }
    Ok(out)
}
