//! On-disk shapes of `fit` and `bootstrap` results.

use gmed::components::ComponentSet;
use gmed::data::{CausalEstimates, ModelParameters, ProjectionVector};
use gmed::nalgebra::DVector;
use gmed::optimizer::{ComponentFit, FitTrace};
use serde::{Deserialize, Serialize};

use crate::manifest::RunManifest;

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceSummary {
    pub converged: bool,
    pub n_iter: usize,
    pub chosen_start_index: usize,
    pub n_starts: usize,
    pub n_failed_starts: usize,
    pub max_relative_increase: Option<f64>,
    pub objective: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComponentOut {
    pub index: usize,
    pub theta: Vec<f64>,
    pub alpha0: f64,
    /// Exposure slope followed by confounder slopes.
    pub alpha: Vec<f64>,
    pub gamma0: f64,
    pub gamma: Vec<f64>,
    pub beta: f64,
    pub pi2: f64,
    pub sigma2: f64,
    pub estimates: CausalEstimates,
    pub neg_loglik: f64,
    pub converged: bool,
    pub n_iter: usize,
    pub trace: TraceSummary,
    pub alpha0i: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyResult {
    pub manifest: RunManifest,
    pub n: usize,
    pub p: usize,
    pub q: usize,
    pub components: Vec<ComponentOut>,
    pub dfd_trace: Vec<f64>,
    pub rejected_dfd: Option<f64>,
}

impl StudyResult {
    pub fn new(manifest: RunManifest, n: usize, p: usize, q: usize, set: &ComponentSet) -> Self {
        let components = set
            .fits
            .iter()
            .zip(&set.traces)
            .enumerate()
            .map(|(j, (fit, trace))| component_out(j + 1, fit, trace))
            .collect();
        StudyResult {
            manifest,
            n,
            p,
            q,
            components,
            dfd_trace: set.dfd_trace.clone(),
            rejected_dfd: set.rejected_dfd,
        }
    }

    /// Rebuilds the component set; traces keep only their summaries.
    pub fn component_set(&self) -> ComponentSet {
        let mut set = ComponentSet {
            fits: Vec::new(),
            traces: Vec::new(),
            dfd_trace: self.dfd_trace.clone(),
            rejected_dfd: self.rejected_dfd,
        };
        for c in &self.components {
            let params = ModelParameters {
                theta: ProjectionVector::from_normalized(DVector::from_vec(c.theta.clone())),
                alpha0i: DVector::from_vec(c.alpha0i.clone()),
                alpha0: c.alpha0,
                alpha: DVector::from_vec(c.alpha.clone()),
                gamma0: c.gamma0,
                gamma: DVector::from_vec(c.gamma.clone()),
                beta: c.beta,
                pi2: c.pi2,
                sigma2: c.sigma2,
            };
            set.fits.push(ComponentFit {
                params,
                estimates: c.estimates,
                objective: c.neg_loglik,
                converged: c.converged,
                n_iter: c.n_iter,
            });
            set.traces.push(FitTrace {
                objective: c.trace.objective.clone(),
                converged: c.trace.converged,
                n_iter: c.trace.n_iter,
                chosen_start_index: c.trace.chosen_start_index,
                n_starts: c.trace.n_starts,
                n_failed_starts: c.trace.n_failed_starts,
                max_relative_increase: c.trace.max_relative_increase.unwrap_or(f64::NEG_INFINITY),
            });
        }
        set
    }
}

fn component_out(index: usize, fit: &ComponentFit, trace: &FitTrace) -> ComponentOut {
    let p = &fit.params;
    ComponentOut {
        index,
        theta: p.theta.as_vector().iter().copied().collect(),
        alpha0: p.alpha0,
        alpha: p.alpha.iter().copied().collect(),
        gamma0: p.gamma0,
        gamma: p.gamma.iter().copied().collect(),
        beta: p.beta,
        pi2: p.pi2,
        sigma2: p.sigma2,
        estimates: fit.estimates,
        neg_loglik: fit.objective,
        converged: fit.converged,
        n_iter: fit.n_iter,
        trace: TraceSummary {
            converged: trace.converged,
            n_iter: trace.n_iter,
            chosen_start_index: trace.chosen_start_index,
            n_starts: trace.n_starts,
            n_failed_starts: trace.n_failed_starts,
            max_relative_increase: finite(trace.max_relative_increase),
            objective: trace.objective.clone(),
        },
        alpha0i: p.alpha0i.iter().copied().collect(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapOut {
    pub manifest: RunManifest,
    #[serde(flatten)]
    pub result: gmed::causal::BootstrapResult,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthOut {
    pub manifest: RunManifest,
    pub design: gmed::simulate::SimulationDesign,
    /// Whether the written dataset omits the confounders.
    pub misspecified: bool,
    /// Eigenvectors `pi_j`, one inner list per dimension.
    pub pi: Vec<Vec<f64>>,
    pub mediation_dims: Vec<usize>,
    pub alpha0: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma0: f64,
    pub gamma: f64,
    pub phi1: Vec<f64>,
    pub phi2: Vec<f64>,
    pub aie: f64,
    pub ade: f64,
    pub ate: f64,
}
