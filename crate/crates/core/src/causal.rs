//! Causal estimands and the fixed-projection unit bootstrap.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::components::{deflate_outcomes, ComponentSet};
use crate::data::{CausalEstimates, ProjectionVector};
use crate::error::{GmedError, Result};
use crate::likelihood::FitData;
use crate::optimizer::{fit_fixed_theta, OptimizerConfig};

/// `(ate, aie, ade) = (gamma + alpha beta, alpha beta, gamma)`.
pub fn estimands(alpha: f64, beta: f64, gamma: f64) -> CausalEstimates {
    CausalEstimates::new(alpha, beta, gamma)
}

/// Percentile interval with linear interpolation between order statistics
/// (the "type 7" sample quantile).
pub fn percentile_ci(draws: &[f64], level: f64) -> Result<(f64, f64)> {
    if draws.len() < 2 {
        return Err(GmedError::TooFewDraws(draws.len()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(GmedError::InvalidConfig(
            "ci level must lie in (0, 1)".into(),
        ));
    }
    let mut sorted = draws.to_vec();
    sorted.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok((quantile(&sorted, tail), quantile(&sorted, 1.0 - tail)))
}

fn quantile(sorted: &[f64], prob: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Two-sided sign-count p-value against zero:
/// `min(1, 2 min(#{d <= 0}, #{d >= 0}) / B)`.
pub fn bootstrap_p_value(draws: &[f64]) -> Result<f64> {
    if draws.len() < 2 {
        return Err(GmedError::TooFewDraws(draws.len()));
    }
    let below = draws.iter().filter(|&&d| d <= 0.0).count();
    let above = draws.iter().filter(|&&d| d >= 0.0).count();
    Ok((2.0 * below.min(above) as f64 / draws.len() as f64).min(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub n_boot: usize,
    pub ci_level: f64,
    pub seed: u64,
    /// Controls the coefficient refits; the start settings are unused.
    pub optimizer: OptimizerConfig,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            n_boot: 500,
            ci_level: 0.95,
            seed: 0,
            optimizer: OptimizerConfig::default(),
        }
    }
}

/// Coefficients and estimands of one component in one replicate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Draw {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub aie: f64,
    pub ade: f64,
    pub ate: f64,
}

impl Draw {
    fn new(alpha: f64, beta: f64, gamma: f64) -> Self {
        let e = estimands(alpha, beta, gamma);
        Draw {
            alpha,
            beta,
            gamma,
            aie: e.aie,
            ade: e.ade,
            ate: e.ate,
        }
    }

    fn get(&self, name: &str) -> f64 {
        match name {
            "alpha" => self.alpha,
            "beta" => self.beta,
            "gamma" => self.gamma,
            "aie" => self.aie,
            "ade" => self.ade,
            "ate" => self.ate,
            _ => unreachable!("unknown estimand {name}"),
        }
    }
}

pub const ESTIMAND_NAMES: [&str; 6] = ["alpha", "beta", "gamma", "aie", "ade", "ate"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimandSummary {
    pub name: String,
    /// Full-data point estimate.
    pub estimate: f64,
    /// Standard deviation of the replicate draws.
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentBootstrap {
    pub component: usize,
    pub draws: Vec<Draw>,
    pub summaries: Vec<EstimandSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub n_boot: usize,
    pub ci_level: f64,
    pub n_failed: usize,
    pub components: Vec<ComponentBootstrap>,
}

impl BootstrapResult {
    pub fn drop_draws(&mut self) {
        for c in &mut self.components {
            c.draws.clear();
        }
    }
}

fn sample_sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Unit indices drawn with replacement for replicate `b`; the stream is
/// fixed by `(seed, b)` alone.
pub fn resample_indices(n: usize, seed: u64, b: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(b as u64);
    (0..n).map(|_| rng.gen_range(0..n)).collect()
}

/// Refits every component's coefficients on one resample with the
/// projections held fixed. Later components use outcomes deflated by the
/// earlier components' replicate slopes.
pub fn refit_resample(
    data: &FitData,
    thetas: &[ProjectionVector],
    indices: &[usize],
    config: &OptimizerConfig,
) -> Result<Vec<Draw>> {
    let mut draws = Vec::with_capacity(thetas.len());
    let mut used: Vec<DVector<f64>> = Vec::new();
    let mut betas = Vec::new();
    for theta in thetas {
        let outcomes = deflate_outcomes(data.outcomes(), data.covs(), &used, &betas)?;
        let mut proj = data.project(theta.as_vector()).select(indices);
        proj.outcomes = DVector::from_iterator(indices.len(), indices.iter().map(|&i| outcomes[i]));
        let (params, converged) =
            fit_fixed_theta(theta.clone(), &proj, config).map_err(|e| match e {
                GmedError::RankDeficientDesign => GmedError::DegenerateResample,
                other => other,
            })?;
        if !converged {
            return Err(GmedError::DegenerateResample);
        }
        draws.push(Draw::new(params.alpha[0], params.beta, params.gamma[0]));
        used.push(theta.as_vector().clone());
        betas.push(params.beta);
    }
    Ok(draws)
}

/// Unit-level bootstrap with the projections fixed at their full-data
/// estimates. Replicates run in parallel but the result does not depend
/// on scheduling.
pub fn bootstrap(
    data: &FitData,
    set: &ComponentSet,
    config: &BootstrapConfig,
) -> Result<BootstrapResult> {
    if config.n_boot == 0 {
        return Err(GmedError::InvalidConfig("B must be at least 1".into()));
    }
    if !(config.ci_level > 0.0 && config.ci_level < 1.0) {
        return Err(GmedError::InvalidConfig(
            "ci level must lie in (0, 1)".into(),
        ));
    }
    if set.is_empty() {
        return Err(GmedError::InvalidConfig(
            "no components to bootstrap".into(),
        ));
    }
    let thetas: Vec<ProjectionVector> = set.fits.iter().map(|f| f.params.theta.clone()).collect();
    let n = data.n();
    let replicates: Vec<Option<Vec<Draw>>> = (0..config.n_boot)
        .into_par_iter()
        .map(|b| {
            let idx = resample_indices(n, config.seed, b);
            match refit_resample(data, &thetas, &idx, &config.optimizer) {
                Ok(d) => Some(d),
                Err(e) => {
                    log::debug!("bootstrap replicate {b} failed: {e}");
                    None
                }
            }
        })
        .collect();
    let n_failed = replicates.iter().filter(|r| r.is_none()).count();
    if n_failed as f64 > 0.01 * config.n_boot as f64 {
        log::warn!(
            "{n_failed} of {} bootstrap replicates failed and were excluded",
            config.n_boot
        );
    }
    let ok: Vec<&Vec<Draw>> = replicates.iter().flatten().collect();

    let mut components = Vec::with_capacity(thetas.len());
    for (j, fit) in set.fits.iter().enumerate() {
        let draws: Vec<Draw> = ok.iter().map(|r| r[j]).collect();
        let point = Draw::new(fit.params.alpha[0], fit.params.beta, fit.params.gamma[0]);
        let mut summaries = Vec::new();
        if draws.len() >= 2 {
            for name in ESTIMAND_NAMES {
                let values: Vec<f64> = draws.iter().map(|d| d.get(name)).collect();
                let (ci_lo, ci_hi) = percentile_ci(&values, config.ci_level)?;
                summaries.push(EstimandSummary {
                    name: name.to_string(),
                    estimate: point.get(name),
                    se: sample_sd(&values),
                    ci_lo,
                    ci_hi,
                    p_value: bootstrap_p_value(&values)?,
                });
            }
        } else if config.n_boot >= 2 {
            return Err(GmedError::TooFewDraws(draws.len()));
        }
        components.push(ComponentBootstrap {
            component: j + 1,
            draws,
            summaries,
        });
    }
    Ok(BootstrapResult {
        n_boot: config.n_boot,
        ci_level: config.ci_level,
        n_failed,
        components,
    })
}
