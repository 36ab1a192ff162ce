//! Synthetic data with planted mediation components, and replication
//! studies that score how well fitted components recover them.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::components::{select_components, DEFAULT_DFD_THRESHOLD};
use crate::data::{ConstraintKind, ConstraintMatrix, Dataset, UnitRecord};
use crate::error::{GmedError, Result};
use crate::likelihood::FitData;
use crate::optimizer::OptimizerConfig;

/// Data-generating process. Mediation dimensions are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationDesign {
    pub p: usize,
    pub n: usize,
    pub t: usize,
    pub mediation_dims: Vec<usize>,
    /// Common value of every intercept and slope (`alpha_0, alpha, gamma_0,
    /// gamma, beta`).
    pub coef_magnitude: f64,
    /// Standard deviation of the random intercepts and of the outcome noise.
    pub error_sd: f64,
    /// Number of confounders: 0, or 2 (one Gaussian, one binary).
    pub q: usize,
    pub confounder_coef: f64,
    pub log_eig_mean_hi: f64,
    pub log_eig_mean_lo: f64,
    pub eig_sd: f64,
    /// Draw the non-mediation eigenvalues on the raw scale (rejecting
    /// non-positive draws) instead of the log scale.
    pub raw_scale: bool,
    pub seed: u64,
}

impl SimulationDesign {
    /// No confounders.
    pub fn sim1(n: usize, t: usize) -> Self {
        SimulationDesign {
            p: 10,
            n,
            t,
            mediation_dims: vec![2, 4],
            coef_magnitude: 1.0,
            error_sd: 0.1,
            q: 0,
            confounder_coef: 0.5,
            log_eig_mean_hi: 3.0,
            log_eig_mean_lo: -1.0,
            eig_sd: 0.1,
            raw_scale: false,
            seed: 0,
        }
    }

    /// One continuous and one binary confounder acting on both the
    /// mediator and the outcome.
    pub fn sim2(n: usize, t: usize) -> Self {
        SimulationDesign {
            q: 2,
            ..Self::sim1(n, t)
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        SimulationDesign { seed, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.n == 0 || self.t == 0 {
            return Err(GmedError::InvalidConfig(
                "p, n and T must be positive".into(),
            ));
        }
        if self.q != 0 && self.q != 2 {
            return Err(GmedError::InvalidConfig("q must be 0 or 2".into()));
        }
        let mut seen = vec![false; self.p];
        for &d in &self.mediation_dims {
            if d == 0 || d > self.p {
                return Err(GmedError::InvalidConfig(format!(
                    "mediation dimension {d} outside 1..={}",
                    self.p
                )));
            }
            if std::mem::replace(&mut seen[d - 1], true) {
                return Err(GmedError::InvalidConfig(format!(
                    "duplicate mediation dimension {d}"
                )));
            }
        }
        if !(self.error_sd >= 0.0) || !(self.eig_sd >= 0.0) {
            return Err(GmedError::InvalidConfig(
                "standard deviations must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Mean of eigenvalue `j` (0-based) of a non-mediation dimension:
    /// linear from `hi` to `lo` over all `p` positions.
    pub fn eig_mean(&self, j: usize) -> f64 {
        if self.p == 1 {
            return self.log_eig_mean_hi;
        }
        let frac = j as f64 / (self.p - 1) as f64;
        self.log_eig_mean_hi + frac * (self.log_eig_mean_lo - self.log_eig_mean_hi)
    }
}

/// What the generator planted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Columns are the eigenvectors `pi_j`.
    pub pi: DMatrix<f64>,
    pub mediation_dims: Vec<usize>,
    pub alpha0: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma0: f64,
    pub gamma: f64,
    /// Confounder slopes in the log-eigenvalue model.
    pub phi1: Vec<f64>,
    /// Confounder slopes in the outcome model.
    pub phi2: Vec<f64>,
    /// Indirect effect carried by each mediation component.
    pub aie: f64,
    pub ade: f64,
}

impl GroundTruth {
    /// `pi_j` for a 1-based dimension.
    pub fn direction(&self, dim: usize) -> DVector<f64> {
        self.pi.column(dim - 1).into_owned()
    }
}

/// Orthonormalizes a standard-Gaussian matrix by QR, flipping columns so
/// that `R` has a positive diagonal.
pub fn random_orthonormal<R: Rng + ?Sized>(p: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(p, p, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..p {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

fn raw_eigenvalue<R: Rng + ?Sized>(mean: f64, sd: f64, rng: &mut R) -> Result<f64> {
    const MAX_TRIES: usize = 10_000;
    let dist = Normal::new(mean, sd).map_err(|e| GmedError::InvalidConfig(e.to_string()))?;
    for _ in 0..MAX_TRIES {
        let v = dist.sample(rng);
        if v > 0.0 {
            return Ok(v);
        }
    }
    Err(GmedError::InvalidConfig(format!(
        "raw-scale eigenvalue mean {mean} with sd {sd} yields no positive draws"
    )))
}

/// Draws a dataset from `design` using `rng`.
pub fn generate_with_rng<R: Rng + ?Sized>(
    design: &SimulationDesign,
    rng: &mut R,
) -> Result<(Dataset, GroundTruth)> {
    design.validate()?;
    let p = design.p;
    let c = design.coef_magnitude;
    let phi = vec![design.confounder_coef; design.q];
    let pi = random_orthonormal(p, rng);
    let coin = Bernoulli::new(0.5).expect("valid probability");
    let noise =
        Normal::new(0.0, design.error_sd).map_err(|e| GmedError::InvalidConfig(e.to_string()))?;
    let eig_noise =
        Normal::new(0.0, design.eig_sd).map_err(|e| GmedError::InvalidConfig(e.to_string()))?;
    let w1 = Normal::new(0.0, 0.5).expect("valid sd");
    let mut is_mediator = vec![false; p];
    for &d in &design.mediation_dims {
        is_mediator[d - 1] = true;
    }

    let mut units = Vec::with_capacity(design.n);
    for i in 0..design.n {
        let x = if coin.sample(rng) { 1.0 } else { 0.0 };
        let w: Vec<f64> = if design.q == 2 {
            let a = w1.sample(rng);
            let b = if coin.sample(rng) { 1.0 } else { 0.0 };
            vec![a, b]
        } else {
            Vec::new()
        };
        let confounding: f64 = w.iter().zip(&phi).map(|(a, b)| a * b).sum();

        let mut log_lambda = DVector::zeros(p);
        let mut lambda = DVector::zeros(p);
        for j in 0..p {
            if is_mediator[j] {
                log_lambda[j] = c + c * x + confounding + noise.sample(rng);
                lambda[j] = log_lambda[j].exp();
            } else if design.raw_scale {
                lambda[j] = raw_eigenvalue(design.eig_mean(j), design.eig_sd, rng)?;
                log_lambda[j] = lambda[j].ln();
            } else {
                log_lambda[j] = design.eig_mean(j) + eig_noise.sample(rng);
                lambda[j] = log_lambda[j].exp();
            }
        }
        // rows of Z diag(sqrt(lambda)) Pi' are N(0, Pi Lambda Pi')
        let root = DMatrix::from_fn(p, p, |r, col| pi[(col, r)] * lambda[r].sqrt());
        let z: DMatrix<f64> = DMatrix::from_fn(design.t, p, |_, _| StandardNormal.sample(rng));
        let mediator = z * root;

        let mediated: f64 = (0..p)
            .filter(|&j| is_mediator[j])
            .map(|j| c * log_lambda[j])
            .sum();
        let y = c + c * x + mediated + confounding + noise.sample(rng);
        units.push(UnitRecord::new(
            format!("u{:04}", i + 1),
            x,
            w,
            y,
            mediator,
        )?);
    }
    let truth = GroundTruth {
        pi,
        mediation_dims: design.mediation_dims.clone(),
        alpha0: c,
        alpha: c,
        beta: c,
        gamma0: c,
        gamma: c,
        phi1: phi.clone(),
        phi2: phi,
        aie: c * c,
        ade: c,
    };
    Ok((Dataset::new(units)?, truth))
}

/// Draws a dataset from `design` seeded by `design.seed`.
pub fn generate_dataset(design: &SimulationDesign) -> Result<(Dataset, GroundTruth)> {
    let mut rng = ChaCha8Rng::seed_from_u64(design.seed);
    generate_with_rng(design, &mut rng)
}

/// `|<theta / |theta|, pi>|`.
pub fn similarity(theta_hat: &DVector<f64>, pi_j: &DVector<f64>) -> f64 {
    let norm = theta_hat.norm();
    if norm == 0.0 {
        return 0.0;
    }
    (theta_hat.dot(pi_j) / norm).abs()
}

/// Greedy maximal-similarity assignment of planted directions (rows) to
/// fitted components (columns). Once every component is taken, remaining
/// rows fall back to their most similar component.
pub fn greedy_match(sim: &DMatrix<f64>) -> Vec<Option<usize>> {
    let (rows, cols) = sim.shape();
    let mut assigned = vec![None; rows];
    let mut row_free = vec![true; rows];
    let mut col_free = vec![true; cols];
    for _ in 0..rows.min(cols) {
        let mut best: Option<(usize, usize)> = None;
        for r in (0..rows).filter(|&r| row_free[r]) {
            for c in (0..cols).filter(|&c| col_free[c]) {
                if best.map_or(true, |(br, bc)| sim[(r, c)] > sim[(br, bc)]) {
                    best = Some((r, c));
                }
            }
        }
        let (r, c) = best.expect("free pair exists");
        assigned[r] = Some(c);
        row_free[r] = false;
        col_free[c] = false;
    }
    for r in (0..rows).filter(|&r| row_free[r]) {
        assigned[r] = (0..cols).max_by(|&a, &b| sim[(r, a)].total_cmp(&sim[(r, b)]));
    }
    assigned
}

/// How each replicate is fitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub optimizer: OptimizerConfig,
    pub constraint: ConstraintKind,
    pub max_components: usize,
    pub dfd_threshold: f64,
    /// Fit without the confounders even if the design has them.
    pub misspecify: bool,
}

impl Default for MethodConfig {
    fn default() -> Self {
        MethodConfig {
            optimizer: OptimizerConfig::default(),
            constraint: ConstraintKind::PooledCovariance,
            max_components: 4,
            dfd_threshold: DEFAULT_DFD_THRESHOLD,
            misspecify: false,
        }
    }
}

/// Score of one planted dimension in one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimOutcome {
    pub dim: usize,
    pub component: usize,
    pub similarity: f64,
    pub aie: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub n_components: usize,
    pub dims: Vec<DimOutcome>,
    /// Largest relative objective increase over every start of every fit.
    pub max_relative_increase: f64,
    /// Set when the replicate could not be fitted.
    pub error: Option<String>,
}

/// Summary row for one planted dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimMetrics {
    pub dim: usize,
    pub n_reps: usize,
    pub mean_similarity: f64,
    /// Standard deviation of the similarity across replicates.
    pub se_similarity: f64,
    pub mean_aie: f64,
    pub aie_bias: f64,
    pub aie_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationReport {
    pub design: SimulationDesign,
    pub method: MethodConfig,
    pub n_reps: usize,
    pub n_failed: usize,
    pub metrics: Vec<DimMetrics>,
    pub replicates: Vec<ReplicateRecord>,
    /// Largest relative objective increase over all fits.
    pub max_relative_increase: f64,
}

fn sd(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let m = values.iter().sum::<f64>() / n as f64;
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64).sqrt()
}

/// Generates and fits one replicate; the RNG stream is fixed by
/// `(design.seed, replicate)`.
pub fn run_replicate(
    design: &SimulationDesign,
    method: &MethodConfig,
    replicate: usize,
) -> Result<ReplicateRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(design.seed);
    rng.set_stream(replicate as u64);
    let (data, truth) = generate_with_rng(design, &mut rng)?;
    let data = if method.misspecify {
        data.without_confounders()
    } else {
        data
    };
    let h = ConstraintMatrix::for_dataset(method.constraint, &data)?;
    let fit_data = FitData::from_dataset(&data);
    let optimizer = OptimizerConfig {
        seed: rng.gen(),
        ..method.optimizer.clone()
    };
    let max_k = method.max_components.min(design.p);
    let set = select_components(
        &fit_data,
        h.matrix(),
        &optimizer,
        max_k,
        method.dfd_threshold,
    )?;

    let thetas = set.thetas();
    let sim = DMatrix::from_fn(truth.mediation_dims.len(), thetas.len(), |r, c| {
        similarity(&thetas[c], &truth.direction(truth.mediation_dims[r]))
    });
    let dims = greedy_match(&sim)
        .into_iter()
        .enumerate()
        .map(|(r, c)| {
            let c = c.expect("at least one component is always kept");
            DimOutcome {
                dim: truth.mediation_dims[r],
                component: c + 1,
                similarity: sim[(r, c)],
                aie: set.fits[c].estimates.aie,
            }
        })
        .collect();
    let worst = set
        .traces
        .iter()
        .map(|t| t.max_relative_increase)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(ReplicateRecord {
        replicate,
        n_components: set.len(),
        dims,
        max_relative_increase: worst,
        error: None,
    })
}

/// Runs `n_reps` independent replicates in parallel and summarizes each
/// planted dimension. Failed replicates are recorded and left out of the
/// metrics.
pub fn replication_study(
    design: &SimulationDesign,
    n_reps: usize,
    method: &MethodConfig,
) -> Result<ReplicationReport> {
    design.validate()?;
    method.optimizer.validate()?;
    if n_reps == 0 {
        return Err(GmedError::InvalidConfig("n_reps must be at least 1".into()));
    }
    let replicates: Vec<ReplicateRecord> = (0..n_reps)
        .into_par_iter()
        .map(|r| {
            run_replicate(design, method, r).unwrap_or_else(|e| {
                log::warn!("replicate {r} failed: {e}");
                ReplicateRecord {
                    replicate: r,
                    n_components: 0,
                    dims: Vec::new(),
                    max_relative_increase: f64::NEG_INFINITY,
                    error: Some(e.to_string()),
                }
            })
        })
        .collect();
    let n_failed = replicates.iter().filter(|r| r.error.is_some()).count();
    let true_aie = design.coef_magnitude * design.coef_magnitude;
    let metrics = design
        .mediation_dims
        .iter()
        .map(|&dim| {
            let outcomes: Vec<&DimOutcome> = replicates
                .iter()
                .flat_map(|r| r.dims.iter().filter(move |d| d.dim == dim))
                .collect();
            let m = outcomes.len().max(1) as f64;
            let sims: Vec<f64> = outcomes.iter().map(|d| d.similarity).collect();
            let aies: Vec<f64> = outcomes.iter().map(|d| d.aie).collect();
            let mean_aie = aies.iter().sum::<f64>() / m;
            DimMetrics {
                dim,
                n_reps: outcomes.len(),
                mean_similarity: sims.iter().sum::<f64>() / m,
                se_similarity: sd(&sims),
                mean_aie,
                aie_bias: mean_aie - true_aie,
                aie_mse: aies.iter().map(|a| (a - true_aie).powi(2)).sum::<f64>() / m,
            }
        })
        .collect();
    let worst = replicates
        .iter()
        .map(|r| r.max_relative_increase)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(ReplicationReport {
        design: design.clone(),
        method: method.clone(),
        n_reps,
        n_failed,
        metrics,
        replicates,
        max_relative_increase: worst,
    })
}

/// Metrics table as CSV, one row per planted dimension.
pub fn metrics_csv(report: &ReplicationReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "dim",
        "n_reps",
        "mean_similarity",
        "se_similarity",
        "mean_aie",
        "aie_bias",
        "aie_mse",
    ])?;
    for m in &report.metrics {
        w.write_record([
            format!("D{}", m.dim),
            m.n_reps.to_string(),
            m.mean_similarity.to_string(),
            m.se_similarity.to_string(),
            m.mean_aie.to_string(),
            m.aie_bias.to_string(),
            m.aie_mse.to_string(),
        ])?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| GmedError::Parse(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
