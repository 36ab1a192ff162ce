//! Sequential extraction of mediation components by deflation, and the
//! deviation-from-diagonality (DfD) stopping rule.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ProjectionVector, UnitRecord};
use crate::error::{GmedError, Result};
use crate::likelihood::{FitData, QUAD_FLOOR};
use crate::linalg::{orthogonal_complement, quad_form, span_projector, symmetrize};
use crate::optimizer::{fit_component, ComponentFit, FitTrace, OptimizerConfig};

/// Default DfD cut-off for adding components.
pub const DEFAULT_DFD_THRESHOLD: f64 = 2.0;

/// Kept components, in extraction order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSet {
    pub fits: Vec<ComponentFit>,
    pub traces: Vec<FitTrace>,
    /// DfD of the first `k` kept components, `k = 1..`.
    pub dfd_trace: Vec<f64>,
    /// DfD of the candidate that was fitted and then rejected, if any.
    pub rejected_dfd: Option<f64>,
}

impl ComponentSet {
    pub fn len(&self) -> usize {
        self.fits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fits.is_empty()
    }

    pub fn thetas(&self) -> Vec<DVector<f64>> {
        self.fits
            .iter()
            .map(|f| f.params.theta.as_vector().clone())
            .collect()
    }

    /// `Theta^(k)` with one column per component.
    pub fn theta_matrix(&self) -> DMatrix<f64> {
        theta_columns(
            self.fits.first().map_or(0, |f| f.params.theta.len()),
            &self.thetas(),
        )
    }

    pub fn betas(&self) -> Vec<f64> {
        self.fits.iter().map(|f| f.params.beta).collect()
    }
}

fn theta_columns(p: usize, thetas: &[DVector<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(p, thetas.len(), |r, c| thetas[c][r])
}

/// `Y_i - sum_j beta_j log(theta_j' S_i theta_j)` with the supplied
/// (undeflated) covariances. Components with `beta_j = 0` contribute
/// nothing and are not evaluated.
pub fn deflate_outcomes(
    outcomes: &DVector<f64>,
    covs: &[DMatrix<f64>],
    thetas: &[DVector<f64>],
    betas: &[f64],
) -> Result<DVector<f64>> {
    let mut out = outcomes.clone();
    for (j, (theta, beta)) in thetas.iter().zip(betas).enumerate() {
        if *beta == 0.0 {
            continue;
        }
        for (i, s) in covs.iter().enumerate() {
            let q = quad_form(s, theta);
            if !(q > QUAD_FLOOR) {
                return Err(GmedError::InfeasibleLogTerm {
                    unit: i,
                    component: j,
                });
            }
            out[i] -= beta * q.ln();
        }
    }
    Ok(out)
}

/// Removes the span of `thetas` from every mediator matrix (`M (I - P)`
/// with `P` the orthogonal projector onto the span) and subtracts the
/// fitted mediation contributions from the outcomes.
pub fn deflate(data: &Dataset, thetas: &[DVector<f64>], betas: &[f64]) -> Result<Dataset> {
    let p = data.p();
    if thetas.is_empty() {
        return Ok(data.clone());
    }
    if let Some(bad) = thetas.iter().find(|t| t.len() != p) {
        return Err(GmedError::DimensionMismatch {
            location: "deflation projection".into(),
            expected: p,
            found: bad.len(),
        });
    }
    let fit = FitData::from_dataset(data);
    let outcomes = deflate_outcomes(fit.outcomes(), fit.covs(), thetas, betas)?;
    let residual = DMatrix::identity(p, p) - span_projector(&theta_columns(p, thetas));
    let units = data
        .units()
        .iter()
        .zip(outcomes.iter())
        .map(|(u, &y)| UnitRecord {
            mediator: &u.mediator * &residual,
            outcome: y,
            ..u.clone()
        })
        .collect();
    Dataset::new(units)
}

/// Weighted geometric mean over units of
/// `det(diag(Theta' S_i Theta)) / det(Theta' S_i Theta)`.
pub fn dfd(theta: &DMatrix<f64>, covs: &[DMatrix<f64>], weights: &DVector<f64>) -> Result<f64> {
    let k = theta.ncols();
    if k <= 1 {
        return Ok(1.0);
    }
    let total: f64 = weights.sum();
    let mut log_dfd = 0.0;
    for (i, (s, w)) in covs.iter().zip(weights.iter()).enumerate() {
        let c = symmetrize(&(theta.transpose() * s * theta));
        let log_diag: f64 = (0..k).map(|j| c[(j, j)].ln()).sum();
        let chol = Cholesky::new(c).ok_or(GmedError::SingularProjectedCovariance(i))?;
        let l = chol.l_dirty();
        let log_det: f64 = (0..k).map(|j| 2.0 * l[(j, j)].ln()).sum();
        if !log_det.is_finite() || !log_diag.is_finite() {
            return Err(GmedError::SingularProjectedCovariance(i));
        }
        log_dfd += w / total * (log_diag - log_det);
    }
    Ok(log_dfd.exp())
}

/// Fits components one at a time, each on the data with the previous
/// components removed, until `max_k` components are kept or the next
/// candidate would push the DfD above `dfd_threshold`.
///
/// After deflation the mediator covariances are degenerate along the
/// removed directions, so each later fit runs in the coordinates of the
/// orthogonal complement of the kept projections; the constraint matrix is
/// restricted to that complement and the fitted projection is mapped back.
pub fn select_components(
    data: &FitData,
    h: &DMatrix<f64>,
    config: &OptimizerConfig,
    max_k: usize,
    dfd_threshold: f64,
) -> Result<ComponentSet> {
    let p = data.p();
    if max_k == 0 || max_k > p {
        return Err(GmedError::InvalidConfig(format!(
            "max_k must lie in 1..={p}, got {max_k}"
        )));
    }
    if !(dfd_threshold >= 1.0) {
        return Err(GmedError::InvalidConfig(
            "dfd_threshold must be at least 1".into(),
        ));
    }
    if h.nrows() != p || h.ncols() != p {
        return Err(GmedError::DimensionMismatch {
            location: "constraint matrix".into(),
            expected: p,
            found: h.nrows(),
        });
    }

    let mut set = ComponentSet {
        fits: Vec::new(),
        traces: Vec::new(),
        dfd_trace: Vec::new(),
        rejected_dfd: None,
    };
    while set.len() < max_k {
        let thetas = set.thetas();
        let basis = orthogonal_complement(&theta_columns(p, &thetas));
        let outcomes = deflate_outcomes(data.outcomes(), data.covs(), &thetas, &set.betas())?;
        let reduced = data.reduced(&basis).with_outcomes(outcomes);
        let h_reduced = symmetrize(&(basis.transpose() * h * &basis));
        let (mut fit, trace) = fit_component(&reduced, &h_reduced, config)?;
        fit.params.theta = ProjectionVector::from_normalized(&basis * fit.params.theta.as_vector());

        let mut candidate = thetas;
        candidate.push(fit.params.theta.as_vector().clone());
        let value = dfd(&theta_columns(p, &candidate), data.covs(), data.weights())?;
        if !set.is_empty() && value > dfd_threshold {
            log::info!(
                "component {} rejected: DfD {value:.4} exceeds {dfd_threshold}",
                set.len() + 1
            );
            set.rejected_dfd = Some(value);
            break;
        }
        set.fits.push(fit);
        set.traces.push(trace);
        set.dfd_trace.push(value);
    }
    Ok(set)
}
