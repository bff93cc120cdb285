//! Configuration-driven simulation studies with seeded replications.
//!
//! Three built-in study designs cover the models in this crate: a
//! confirmatory two-factor IFA benchmark comparing the five algorithm
//! variants against a quadrature EM reference, an L1-regularized
//! exploratory IFA consistency study, and a restricted latent class study
//! with DINA-generated data. A custom design with free dimensions is
//! available for smoke tests. Replications run in parallel over a worker
//! pool; every random stream derives from the master seed and the
//! replication index, so outputs are bitwise reproducible regardless of
//! the pool size.

use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::em::{em_fit_ifa, gh_grid};
use crate::error::Error;
use crate::io::{MetricRow, SummaryRow};
use crate::metrics;
use crate::models::ifa::{equicorrelated_b, gen_ifa_data, sample_intercepts, sample_loadings};
use crate::models::rlca::{dina_theta, gen_rlca_data};
use crate::models::{
    CompleteDataModel, IfaModel, IfaParams, Penalty, ResponseMatrix, RlcaModel, RlcaParams,
};
use crate::numeric::quantile;
use crate::optim::{run, CurvatureEstimator, FitResult, OptimizerConfig};
use crate::rng::{mix, RngStream};
use crate::samplers::{IfaGibbs, RlcaExact};

/// Algorithm variants: which pieces of the full scheme are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Usp,
    UspPpg,
    UspRm1,
    UspRm2,
    Stem,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Usp,
        Variant::UspPpg,
        Variant::UspRm1,
        Variant::UspRm2,
        Variant::Stem,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Usp => "USP",
            Variant::UspPpg => "USP-PPG",
            Variant::UspRm1 => "USP-RM1",
            Variant::UspRm2 => "USP-RM2",
            Variant::Stem => "StEM",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        match s.to_ascii_uppercase().as_str() {
            "USP" => Some(Variant::Usp),
            "USP-PPG" => Some(Variant::UspPpg),
            "USP-RM1" => Some(Variant::UspRm1),
            "USP-RM2" => Some(Variant::UspRm2),
            "STEM" => Some(Variant::Stem),
            _ => None,
        }
    }

    /// Translate the variant into optimizer switches: averaging and
    /// quasi-Newton scaling for the recommended scheme, constant unit
    /// scaling for the plain perturbed proximal gradient, last-iterate
    /// output for the Robbins-Monro style runs (with the 1/t schedule for
    /// the second), and full inner maximization for the stochastic EM.
    pub fn apply(&self, cfg: &mut OptimizerConfig) {
        match self {
            Variant::Usp => {
                cfg.averaging = true;
                cfg.quasi_newton = true;
                cfg.stem_mode = false;
            }
            Variant::UspPpg => {
                cfg.averaging = true;
                cfg.quasi_newton = false;
                cfg.stem_mode = false;
                cfg.c1 = 1.0;
                cfg.c2 = 1.0;
            }
            Variant::UspRm1 => {
                cfg.averaging = false;
                cfg.quasi_newton = true;
                cfg.stem_mode = false;
            }
            Variant::UspRm2 => {
                cfg.averaging = false;
                cfg.quasi_newton = true;
                cfg.stem_mode = false;
                cfg.epsilon = 0.5;
            }
            Variant::Stem => {
                cfg.averaging = true;
                cfg.quasi_newton = true;
                cfg.stem_mode = true;
            }
        }
    }
}

/// Which built-in design to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StudyId {
    I,
    II,
    III,
    #[serde(rename = "custom")]
    Custom,
}

impl StudyId {
    pub fn name(&self) -> &'static str {
        match self {
            StudyId::I => "I",
            StudyId::II => "II",
            StudyId::III => "III",
            StudyId::Custom => "custom",
        }
    }
}

/// Optimizer fields a study config may override.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerOverrides {
    pub mu: Option<f64>,
    pub epsilon: Option<f64>,
    pub c1: Option<f64>,
    pub c2: Option<f64>,
    pub burn_in: Option<usize>,
    pub max_iters: Option<usize>,
    pub stop_window: Option<usize>,
    pub stop_tol: Option<f64>,
    pub adaptive_stop: Option<bool>,
    pub curvature: Option<crate::optim::CurvatureEstimator>,
}

impl OptimizerOverrides {
    fn apply(&self, cfg: &mut OptimizerConfig) {
        if let Some(v) = self.mu {
            cfg.mu = v;
        }
        if let Some(v) = self.epsilon {
            cfg.epsilon = v;
        }
        if let Some(v) = self.c1 {
            cfg.c1 = v;
        }
        if let Some(v) = self.c2 {
            cfg.c2 = v;
        }
        if let Some(v) = self.burn_in {
            cfg.burn_in = v;
        }
        if let Some(v) = self.max_iters {
            cfg.max_iters = v;
        }
        if let Some(v) = self.stop_window {
            cfg.stop_window = v;
        }
        if let Some(v) = self.stop_tol {
            cfg.stop_tol = v;
        }
        if let Some(v) = self.adaptive_stop {
            cfg.adaptive_stop = v;
        }
        if let Some(v) = self.curvature {
            cfg.curvature = v;
        }
    }
}

/// Custom-design model family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CustomModel {
    Ifa,
    Rlca,
}

/// A study configuration document. Unset fields fall back to per-study
/// defaults; command-line flags override file fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyConfig {
    pub study: StudyId,
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub j: Option<usize>,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub replications: Option<usize>,
    #[serde(default)]
    pub variants: Option<Vec<Variant>>,
    #[serde(default)]
    pub model: Option<CustomModel>,
    #[serde(default)]
    pub optimizer: OptimizerOverrides,
    /// Explicit L1 weight; when unset, study II uses the decreasing rule
    /// lambda_N = sqrt(log J / N) per observation.
    #[serde(default)]
    pub penalty_lambda: Option<f64>,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl StudyConfig {
    pub fn new(study: StudyId) -> Self {
        StudyConfig {
            study,
            n: None,
            j: None,
            k: None,
            replications: None,
            variants: None,
            model: None,
            optimizer: OptimizerOverrides::default(),
            penalty_lambda: None,
            master_seed: 0,
            out_dir: None,
        }
    }

    pub fn n(&self) -> usize {
        self.n.unwrap_or(match self.study {
            StudyId::I => 1000,
            StudyId::II => 1000,
            StudyId::III => 4000,
            StudyId::Custom => 500,
        })
    }

    pub fn replications(&self) -> usize {
        self.replications.unwrap_or(match self.study {
            StudyId::I => 20,
            _ => 10,
        })
    }

    pub fn variants(&self) -> Vec<Variant> {
        self.variants.clone().unwrap_or_else(|| match self.study {
            StudyId::I => Variant::ALL.to_vec(),
            _ => vec![Variant::Usp],
        })
    }

    /// Base optimizer configuration for this study (before the variant's
    /// switches), seeded per replication by the caller.
    pub fn base_optimizer(&self) -> OptimizerConfig {
        let mut cfg = OptimizerConfig::default();
        // The reference simulation results come from the squared-gradient
        // form of the scaling recursion; see CurvatureEstimator.
        cfg.curvature = CurvatureEstimator::SquaredGradient;
        match self.study {
            StudyId::I => {
                // Equal-budget protocol: fixed iteration count, no
                // adaptive stopping, long burn-in.
                cfg.max_iters = 1000;
                cfg.burn_in = 500;
                cfg.adaptive_stop = false;
            }
            StudyId::II => {
                cfg.max_iters = 1000;
                cfg.burn_in = 50;
                cfg.stop_tol = 1e-3;
                cfg.adaptive_stop = true;
            }
            StudyId::III => {
                cfg.max_iters = 2000;
                cfg.burn_in = 50;
                cfg.stop_tol = 1e-3;
                cfg.adaptive_stop = true;
            }
            StudyId::Custom => {
                cfg.max_iters = 500;
                cfg.burn_in = 50;
                cfg.adaptive_stop = true;
            }
        }
        self.optimizer.apply(&mut cfg);
        cfg
    }

    /// L1 weight on the summed objective, following the decreasing rule
    /// lambda ~ sqrt(N log J) (the per-observation sqrt(log J / N) scaled
    /// to the summed likelihood), with the proportionality constant fixed
    /// once for all studies.
    pub fn lambda(&self, n: usize, j: usize) -> f64 {
        match self.penalty_lambda {
            Some(l) => l,
            None => PENALTY_SCALE * (n as f64 * (j as f64).ln()).sqrt(),
        }
    }
}

/// Proportionality constant of the decreasing penalty rule.
pub const PENALTY_SCALE: f64 = 0.3;

/// Seed derivation: every random role hangs off (master seed, replication).
pub mod seeds {
    use super::*;

    const DOMAIN_PARAMS: u64 = 0x706172; // study-level truth draw
    const DOMAIN_DATA: u64 = 0x646174; // per-replication data
    const DOMAIN_FIT: u64 = 0x666974; // per-replication, per-variant fit

    pub fn params_stream(master: u64) -> RngStream {
        RngStream::new(master, mix(&[DOMAIN_PARAMS]))
    }

    pub fn data_stream(master: u64, replication: usize) -> RngStream {
        RngStream::new(master, mix(&[DOMAIN_DATA, replication as u64]))
    }

    pub fn fit_seed(master: u64, replication: usize, variant_idx: usize) -> u64 {
        mix(&[master, DOMAIN_FIT, replication as u64, variant_idx as u64])
    }
}

/// Design mask of the confirmatory two-factor study: items 1-5 load on the
/// first factor only, 6-10 on the second only, 11-20 on both.
pub fn study1_structure() -> Vec<Vec<u8>> {
    (0..20)
        .map(|j| {
            if j < 5 {
                vec![1, 0]
            } else if j < 10 {
                vec![0, 1]
            } else {
                vec![1, 1]
            }
        })
        .collect()
}

/// Sparse loading structure of the exploratory study: J = 80 items over
/// K = 5 factors, ten pure items per factor plus overlapping blocks.
pub fn study2_structure() -> Vec<Vec<u8>> {
    let per_factor: [&[usize]; 5] = [
        &[51, 52, 54, 57, 61, 62, 64, 67, 71, 72, 73, 75, 76, 78],
        &[51, 53, 55, 58, 61, 63, 65, 68, 71, 72, 74, 75, 77, 79],
        &[52, 53, 56, 59, 62, 63, 66, 69, 71, 73, 74, 76, 77, 80],
        &[54, 55, 56, 60, 64, 65, 66, 70, 72, 73, 74, 78, 79, 80],
        &[57, 58, 59, 60, 67, 68, 69, 70, 75, 76, 77, 78, 79, 80],
    ];
    let mut q = vec![vec![0u8; 5]; 80];
    for (k, extras) in per_factor.iter().enumerate() {
        for j in 10 * k + 1..=10 * (k + 1) {
            q[j - 1][k] = 1;
        }
        for &j in *extras {
            q[j - 1][k] = 1;
        }
    }
    q
}

/// Design matrix of the restricted latent class study: 20 items over 4
/// attributes, single-attribute items first, then pairs and triples.
pub fn study3_q() -> Vec<Vec<u8>> {
    let rows: [[u8; 4]; 20] = [
        [1, 0, 0, 0],
        [0, 1, 0, 0],
        [0, 0, 1, 0],
        [0, 0, 0, 1],
        [1, 0, 0, 0],
        [0, 1, 0, 0],
        [0, 0, 1, 0],
        [0, 0, 0, 1],
        [1, 0, 0, 0],
        [0, 1, 0, 0],
        [0, 0, 1, 0],
        [0, 0, 0, 1],
        [1, 1, 0, 0],
        [1, 0, 1, 0],
        [0, 1, 1, 0],
        [1, 0, 0, 1],
        [1, 1, 1, 0],
        [1, 1, 0, 1],
        [1, 0, 1, 1],
        [0, 1, 1, 1],
    ];
    rows.iter().map(|r| r.to_vec()).collect()
}

/// Simple cyclic design for custom runs: item j requires attribute/factor
/// j mod K.
pub fn cyclic_q(j: usize, k: usize) -> Vec<Vec<u8>> {
    (0..j)
        .map(|jj| (0..k).map(|kk| u8::from(jj % k == kk)).collect())
        .collect()
}

/// The study-level simulation truth.
#[derive(Debug, Clone)]
pub enum StudyTruth {
    Ifa(IfaParams),
    Rlca(RlcaParams),
}

/// Draw the study-level true parameters (shared across replications).
pub fn study_truth(config: &StudyConfig) -> StudyTruth {
    let mut rng = seeds::params_stream(config.master_seed).rng();
    match config.study {
        StudyId::I => {
            let q = study1_structure();
            StudyTruth::Ifa(IfaParams {
                b: equicorrelated_b(2, 0.4),
                d: sample_intercepts(20, &mut rng),
                a: sample_loadings(&q, &mut rng),
                q_mask: Some(q),
                penalty: Penalty::None,
            })
        }
        StudyId::II => {
            let q = study2_structure();
            StudyTruth::Ifa(IfaParams {
                b: equicorrelated_b(5, 0.4),
                d: sample_intercepts(80, &mut rng),
                a: sample_loadings(&q, &mut rng),
                // Exploratory estimation: the structure shapes the truth
                // only, the fit learns a dense loading matrix under L1.
                q_mask: None,
                penalty: Penalty::None,
            })
        }
        StudyId::III => {
            use rand::Rng;
            let q = study3_q();
            let s: Vec<f64> = (0..20).map(|_| rng.random_range(0.05..0.2)).collect();
            let g: Vec<f64> = (0..20).map(|_| rng.random_range(0.05..0.2)).collect();
            StudyTruth::Rlca(RlcaParams {
                theta: dina_theta(&q, &s, &g),
                nu: vec![0.0; 16],
                q,
            })
        }
        StudyId::Custom => {
            use rand::Rng;
            let j = config.j.unwrap_or(10);
            let k = config.k.unwrap_or(2);
            match config.model.unwrap_or(CustomModel::Ifa) {
                CustomModel::Ifa => {
                    let q = cyclic_q(j, k);
                    StudyTruth::Ifa(IfaParams {
                        b: equicorrelated_b(k, 0.4),
                        d: sample_intercepts(j, &mut rng),
                        a: sample_loadings(&q, &mut rng),
                        q_mask: Some(q),
                        penalty: Penalty::None,
                    })
                }
                CustomModel::Rlca => {
                    let q = cyclic_q(j, k);
                    let s: Vec<f64> = (0..j).map(|_| rng.random_range(0.05..0.2)).collect();
                    let g: Vec<f64> = (0..j).map(|_| rng.random_range(0.05..0.2)).collect();
                    StudyTruth::Rlca(RlcaParams {
                        theta: dina_theta(&q, &s, &g),
                        nu: vec![0.0; 1 << k],
                        q,
                    })
                }
            }
        }
    }
}

/// Generate the dataset of one replication.
pub fn simulate_replication(
    config: &StudyConfig,
    truth: &StudyTruth,
    replication: usize,
) -> ResponseMatrix {
    let mut rng = seeds::data_stream(config.master_seed, replication).rng();
    let n = config.n();
    match truth {
        StudyTruth::Ifa(params) => gen_ifa_data(params, n, &mut rng),
        StudyTruth::Rlca(params) => gen_rlca_data(params, n, &mut rng),
    }
}

/// Fit an IFA model with the given variant; returns matrix-form parameters
/// of the returned estimate plus the raw fit.
pub fn fit_ifa(
    data: &ResponseMatrix,
    k: usize,
    q_mask: Option<Vec<Vec<u8>>>,
    penalty: Penalty,
    variant: Variant,
    base: &OptimizerConfig,
    seed: u64,
    start: Option<&IfaParams>,
) -> Result<(IfaParams, FitResult), Error> {
    let model = IfaModel::new(data, k, q_mask, penalty);
    let mut cfg = base.clone();
    variant.apply(&mut cfg);
    cfg.seed = seed;
    let beta0 = match start {
        Some(p) => model.params_to_vec(p),
        None => model.params_to_vec(&default_ifa_start(data, k, model_mask(&model), penalty)),
    };
    let prox = model.prox_blocks();
    let fit = run(&model, &mut IfaGibbs, &prox, &cfg, &beta0, vec![], None)?;
    let params = model.vec_to_params(&fit.beta_bar);
    Ok((params, fit))
}

fn model_mask(model: &IfaModel) -> Option<Vec<Vec<u8>>> {
    // Recover the mask from the free-loading list.
    let j = model.data().n_items();
    let k = model.n_factors();
    if model.n_free_loadings() == j * k {
        return None;
    }
    let mut q = vec![vec![0u8; k]; j];
    for &(jj, kk) in model.free_loadings() {
        q[jj][kk] = 1;
    }
    Some(q)
}

/// Neutral IFA starting point: intercepts at the item-mean logits, unit
/// loadings on the mask, independent factors.
pub fn default_ifa_start(
    data: &ResponseMatrix,
    k: usize,
    q_mask: Option<Vec<Vec<u8>>>,
    penalty: Penalty,
) -> IfaParams {
    let j = data.n_items();
    IfaParams {
        b: (0..k)
            .map(|r| (0..k).map(|c| if r == c { 1.0 } else { 0.0 }).collect())
            .collect(),
        d: data
            .item_means()
            .iter()
            .map(|&p| {
                let p = p.clamp(0.05, 0.95);
                (p / (1.0 - p)).ln()
            })
            .collect(),
        a: (0..j)
            .map(|jj| {
                (0..k)
                    .map(|kk| {
                        let on = q_mask.as_ref().map_or(true, |q| q[jj][kk] != 0);
                        if on {
                            1.0
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect(),
        q_mask,
        penalty,
    }
}

/// Fit a restricted latent class model with the given variant.
pub fn fit_rlca(
    data: &ResponseMatrix,
    q: Vec<Vec<u8>>,
    variant: Variant,
    base: &OptimizerConfig,
    seed: u64,
    start: Option<&RlcaParams>,
) -> Result<(RlcaParams, FitResult), Error> {
    let model = RlcaModel::new(data, q);
    let mut cfg = base.clone();
    variant.apply(&mut cfg);
    cfg.seed = seed;
    let beta0 = match start {
        Some(p) => model.params_to_vec(p),
        None => model.params_to_vec(&default_rlca_start(data, model.n_classes(), model.q())),
    };
    let prox = model.prox_blocks();
    let fit = run(&model, &mut RlcaExact, &prox, &cfg, &beta0, vec![], None)?;
    let params = model.vec_to_params(&fit.beta_bar);
    Ok((params, fit))
}

/// Neutral RLCA starting point: per item, covering classes 1.5 logits
/// above the item mean and the rest 1.5 below (feasible by
/// construction), uniform class logits. The offset keeps the class
/// posterior informative from the first iteration; a start with equal
/// logits across classes leaves the likelihood exactly flat in nu, which
/// the curvature-adaptive scaling would answer with near-unbounded steps
/// along that flat direction.
pub fn default_rlca_start(data: &ResponseMatrix, n_classes: usize, q: &[Vec<u8>]) -> RlcaParams {
    let masks = crate::models::rlca::q_masks(q);
    let theta = data
        .item_means()
        .iter()
        .zip(&masks)
        .map(|(&p, &mask)| {
            let p = p.clamp(0.05, 0.95);
            let mid = (p / (1.0 - p)).ln();
            (0..n_classes)
                .map(|alpha| {
                    if crate::qp::covers(alpha, mask) {
                        mid + 1.5
                    } else {
                        mid - 1.5
                    }
                })
                .collect()
        })
        .collect();
    RlcaParams {
        theta,
        nu: vec![0.0; n_classes],
        q: q.to_vec(),
    }
}

/// Wall-clock per fit, kept out of the deterministic CSVs.
#[derive(Debug, Clone)]
pub struct TimingRow {
    pub replication: usize,
    pub variant: String,
    pub seconds: f64,
}

/// Everything a study run produces.
#[derive(Debug, Clone)]
pub struct StudyOutput {
    pub rows: Vec<MetricRow>,
    pub summaries: Vec<SummaryRow>,
    pub timings: Vec<TimingRow>,
    /// (replication, error message) for replications that failed.
    pub failures: Vec<(usize, String)>,
}

impl StudyOutput {
    /// All values recorded under one metric name, replication order.
    pub fn metric_values(&self, name: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.metric == name)
            .map(|r| r.value)
            .collect()
    }

    pub fn median(&self, name: &str) -> Option<f64> {
        let v = self.metric_values(name);
        if v.is_empty() {
            None
        } else {
            Some(crate::numeric::median(&v))
        }
    }

    pub fn total_seconds(&self, variant: &str) -> f64 {
        self.timings
            .iter()
            .filter(|t| t.variant == variant)
            .map(|t| t.seconds)
            .sum()
    }
}

fn replication_metrics(
    config: &StudyConfig,
    truth: &StudyTruth,
    replication: usize,
) -> Result<(Vec<MetricRow>, Vec<TimingRow>), Error> {
    let study = config.study.name().to_string();
    let data = simulate_replication(config, truth, replication);
    let base = config.base_optimizer();
    let mut rows = Vec::new();
    let mut timings = Vec::new();

    match (config.study, truth) {
        (StudyId::I, StudyTruth::Ifa(truth_params))
        | (StudyId::Custom, StudyTruth::Ifa(truth_params)) => {
            let exploratory = truth_params.q_mask.is_none();
            let (k, q_mask, penalty) = if config.study == StudyId::I || !exploratory {
                (
                    truth_params.n_factors(),
                    truth_params.q_mask.clone(),
                    Penalty::None,
                )
            } else {
                unreachable!("custom IFA designs always carry a mask")
            };

            // Reference estimate: quadrature EM treated as the optimum.
            let grid = gh_grid(k, 31)?;
            let em = em_fit_ifa(&data, q_mask.as_deref(), &grid, 500, 1e-9)?;

            let dense = |p: &IfaParams| -> Vec<f64> {
                p.a.iter().flatten().copied().collect::<Vec<f64>>()
            };
            let a_mask: Vec<bool> = q_mask
                .as_ref()
                .map(|q| q.iter().flatten().map(|&v| v != 0).collect())
                .unwrap_or_else(|| vec![true; dense(truth_params).len()]);

            for (vi, variant) in config.variants().iter().enumerate() {
                let seed = seeds::fit_seed(config.master_seed, replication, vi);
                let started = Instant::now();
                let (est, _fit) = fit_ifa(
                    &data,
                    k,
                    q_mask.clone(),
                    penalty,
                    *variant,
                    &base,
                    seed,
                    Some(truth_params),
                )?;
                let secs = started.elapsed().as_secs_f64();
                timings.push(TimingRow {
                    replication,
                    variant: variant.name().to_string(),
                    seconds: secs,
                });

                let tag = |m: &str| format!("{}.{}", variant.name(), m);
                let mse_d =
                    metrics::mse_masked(&est.d, &em.params.d, &vec![true; est.d.len()])?;
                let mse_a = metrics::mse_masked(&dense(&est), &dense(&em.params), &a_mask)?;
                let s_est = est.sigma()[1];
                let s_em = em.params.sigma()[1];
                rows.push(MetricRow {
                    study: study.clone(),
                    replication,
                    metric: tag("mse_d"),
                    value: mse_d,
                });
                rows.push(MetricRow {
                    study: study.clone(),
                    replication,
                    metric: tag("mse_loadings"),
                    value: mse_a,
                });
                rows.push(MetricRow {
                    study: study.clone(),
                    replication,
                    metric: tag("mse_sigma12"),
                    value: (s_est - s_em) * (s_est - s_em),
                });
            }
        }
        (StudyId::II, StudyTruth::Ifa(truth_params)) => {
            let n = config.n();
            let j = data.n_items();
            let lambda = config.lambda(n, j);
            let penalty = Penalty::L1 { lambda };
            for (vi, variant) in config.variants().iter().enumerate() {
                let seed = seeds::fit_seed(config.master_seed, replication, vi);
                let started = Instant::now();
                // Sign-consistent start: the truth (with the fit's penalty).
                let start = IfaParams {
                    penalty,
                    q_mask: None,
                    ..truth_params.clone()
                };
                let (est, _fit) = fit_ifa(
                    &data,
                    truth_params.n_factors(),
                    None,
                    penalty,
                    *variant,
                    &base,
                    seed,
                    Some(&start),
                )?;
                timings.push(TimingRow {
                    replication,
                    variant: variant.name().to_string(),
                    seconds: started.elapsed().as_secs_f64(),
                });
                let mse = metrics::mse_loading_permuted(&est.a, &truth_params.a)?;
                let metric = if config.variants().len() == 1 {
                    "mse_loadings_permuted".to_string()
                } else {
                    format!("{}.mse_loadings_permuted", variant.name())
                };
                rows.push(MetricRow {
                    study: study.clone(),
                    replication,
                    metric,
                    value: mse,
                });
            }
        }
        (StudyId::III, StudyTruth::Rlca(truth_params))
        | (StudyId::Custom, StudyTruth::Rlca(truth_params)) => {
            for (vi, variant) in config.variants().iter().enumerate() {
                let seed = seeds::fit_seed(config.master_seed, replication, vi);
                let started = Instant::now();
                // Study III follows the equal-start convention of study I;
                // the custom design exercises the generic cold start.
                let start = if config.study == StudyId::III {
                    Some(truth_params)
                } else {
                    None
                };
                let (est, _fit) =
                    fit_rlca(&data, truth_params.q.clone(), *variant, &base, seed, start)?;
                timings.push(TimingRow {
                    replication,
                    variant: variant.name().to_string(),
                    seconds: started.elapsed().as_secs_f64(),
                });
                let (theta_mse, nu_mse) = metrics::rlca_mse(
                    &est.theta,
                    &truth_params.theta,
                    &est.nu,
                    &truth_params.nu,
                )?;
                let tag = |m: &str| {
                    if config.variants().len() == 1 {
                        m.to_string()
                    } else {
                        format!("{}.{}", variant.name(), m)
                    }
                };
                rows.push(MetricRow {
                    study: study.clone(),
                    replication,
                    metric: tag("theta_mse"),
                    value: theta_mse,
                });
                rows.push(MetricRow {
                    study: study.clone(),
                    replication,
                    metric: tag("nu_mse"),
                    value: nu_mse,
                });
            }
        }
        _ => {
            return Err(Error::Usage(format!(
                "study {} is inconsistent with the generated truth",
                study
            )))
        }
    }
    Ok((rows, timings))
}

/// Run every replication of a study, optionally writing CSV outputs.
///
/// Replications are distributed over a local worker pool (size from the
/// PROXLVM_WORKERS environment variable, default: available cores) and
/// merged in replication order, so outputs are independent of the pool
/// size. Failed replications are recorded and skipped; more than 10%
/// failures is reported as an error by the caller.
pub fn run_study(config: &StudyConfig) -> Result<StudyOutput, Error> {
    let truth = study_truth(config);
    let n_reps = config.replications();

    let workers = std::env::var("PROXLVM_WORKERS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&w| w >= 1)
        .unwrap_or_else(num_threads_default);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Usage(format!("worker pool: {e}")))?;

    let results: Vec<Result<(Vec<MetricRow>, Vec<TimingRow>), Error>> = pool.install(|| {
        use rayon::prelude::*;
        (0..n_reps)
            .into_par_iter()
            .map(|r| replication_metrics(config, &truth, r))
            .collect()
    });

    let mut rows = Vec::new();
    let mut timings = Vec::new();
    let mut failures = Vec::new();
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok((mut rr, mut tt)) => {
                rows.append(&mut rr);
                timings.append(&mut tt);
            }
            Err(e) => failures.push((r, e.to_string())),
        }
    }

    // Quantile summaries per metric, in first-appearance order.
    let mut names: Vec<String> = Vec::new();
    for r in &rows {
        if !names.contains(&r.metric) {
            names.push(r.metric.clone());
        }
    }
    let summaries: Vec<SummaryRow> = names
        .iter()
        .map(|name| {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| &r.metric == name)
                .map(|r| r.value)
                .collect();
            SummaryRow {
                study: config.study.name().to_string(),
                metric: name.clone(),
                q25: quantile(&vals, 0.25),
                median: quantile(&vals, 0.5),
                q75: quantile(&vals, 0.75),
            }
        })
        .collect();

    let out = StudyOutput {
        rows,
        summaries,
        timings,
        failures,
    };

    if let Some(dir) = &config.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.display().to_string(),
            source: e,
        })?;
        crate::io::write_metrics_csv(&dir.join("metrics.csv"), &out.rows)?;
        crate::io::write_summary_csv(&dir.join("summary.csv"), &out.summaries)?;
        let mut log = String::new();
        for t in &out.timings {
            log.push_str(&format!(
                "replication {} {} {:.3}s\n",
                t.replication, t.variant, t.seconds
            ));
        }
        for (r, msg) in &out.failures {
            log.push_str(&format!("replication {r} FAILED: {msg}\n"));
        }
        std::fs::write(dir.join("timing.log"), log).map_err(|e| Error::Io {
            path: dir.display().to_string(),
            source: e,
        })?;
    }
    Ok(out)
}

fn num_threads_default() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn structures_have_documented_shapes() {
        let q1 = study1_structure();
        assert_eq!(q1.len(), 20);
        assert_eq!(q1[0], vec![1, 0]);
        assert_eq!(q1[7], vec![0, 1]);
        assert_eq!(q1[15], vec![1, 1]);

        let q2 = study2_structure();
        assert_eq!(q2.len(), 80);
        // ten pure items per factor plus 14 shared each = 24 loadings.
        for k in 0..5 {
            let count: usize = q2.iter().map(|r| r[k] as usize).sum();
            assert_eq!(count, 24, "factor {k}");
        }
        // items 51..60 load on exactly two factors.
        for j in 50..60 {
            let count: usize = q2[j].iter().map(|&v| v as usize).sum();
            assert_eq!(count, 2, "item {}", j + 1);
        }
        // items 71..80 load on exactly three factors.
        for j in 70..80 {
            let count: usize = q2[j].iter().map(|&v| v as usize).sum();
            assert_eq!(count, 3, "item {}", j + 1);
        }

        let q3 = study3_q();
        assert_eq!(q3.len(), 20);
        assert_eq!(q3[12], vec![1, 1, 0, 0]);
        assert_eq!(q3[19], vec![0, 1, 1, 1]);
    }

    #[test]
    fn variant_switches() {
        let mut cfg = OptimizerConfig::default();
        Variant::UspRm2.apply(&mut cfg);
        assert!(!cfg.averaging);
        assert!((cfg.epsilon - 0.5).abs() < 1e-15);

        let mut cfg = OptimizerConfig::default();
        Variant::UspPpg.apply(&mut cfg);
        assert!(!cfg.quasi_newton);
        assert_eq!(cfg.c1, 1.0);
        assert_eq!(cfg.c2, 1.0);

        assert_eq!(Variant::parse("usp-rm2"), Some(Variant::UspRm2));
        assert_eq!(Variant::parse("StEM"), Some(Variant::Stem));
        assert_eq!(Variant::parse("nope"), None);
    }

    #[test]
    fn seed_derivation_is_stable_and_distinct() {
        assert_eq!(seeds::fit_seed(7, 0, 0), seeds::fit_seed(7, 0, 0));
        assert_ne!(seeds::fit_seed(7, 0, 0), seeds::fit_seed(7, 1, 0));
        assert_ne!(seeds::fit_seed(7, 0, 0), seeds::fit_seed(7, 0, 1));
        assert_ne!(seeds::fit_seed(7, 0, 0), seeds::fit_seed(8, 0, 0));
    }

    #[test]
    fn study_truth_is_deterministic() {
        let cfg = StudyConfig {
            master_seed: 11,
            ..StudyConfig::new(StudyId::III)
        };
        let (a, b) = (study_truth(&cfg), study_truth(&cfg));
        match (a, b) {
            (StudyTruth::Rlca(x), StudyTruth::Rlca(y)) => {
                assert_eq!(x.theta, y.theta);
                assert_eq!(x.nu, y.nu);
            }
            _ => panic!("study III should generate class-model truth"),
        }
    }

    #[test]
    fn custom_study_runs_end_to_end() {
        let cfg = StudyConfig {
            n: Some(120),
            j: Some(6),
            k: Some(2),
            replications: Some(2),
            model: Some(CustomModel::Rlca),
            master_seed: 3,
            optimizer: OptimizerOverrides {
                max_iters: Some(60),
                burn_in: Some(10),
                ..Default::default()
            },
            ..StudyConfig::new(StudyId::Custom)
        };
        let out = run_study(&cfg).unwrap();
        assert!(out.failures.is_empty(), "failures: {:?}", out.failures);
        assert_eq!(out.metric_values("theta_mse").len(), 2);
        assert_eq!(out.metric_values("nu_mse").len(), 2);
        assert_eq!(out.summaries.len(), 2);
    }
}
