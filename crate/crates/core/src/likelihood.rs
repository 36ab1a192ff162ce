//! Plug-in negative hierarchical log-likelihood, its analytic derivatives in
//! the variance-model coefficients, and the matrix driving the projection
//! update.
//!
//! With `a_i = alpha_0i + X_i' alpha`, `q_i = theta' S_i theta` and
//! `r_i = Y_i - gamma_0 - X_i' gamma - beta log q_i` the objective is
//!
//! ```text
//! sum_i T_i/2 (a_i + q_i exp(-a_i))
//!   + sum_i 1/2 (log sigma^2 + r_i^2 / sigma^2)
//!   + sum_i 1/2 (log pi^2 + (alpha_0i - alpha_0)^2 / pi^2)
//! ```
//!
//! The sample covariance `S_i` stands in for the unobserved `Sigma_i`
//! everywhere, so the log terms and the quadratic terms share `q_i`.

use nalgebra::{DMatrix, DVector};

use crate::data::{sample_covariances, Dataset, ModelParameters};
use crate::error::{GmedError, Result};
use crate::linalg::{quad_form, symmetrize};

/// Floor on quadratic forms that enter a logarithm.
pub const QUAD_FLOOR: f64 = 1e-12;

/// Per-unit inputs of a fit: weights `T_i`, designs `X_i`, outcomes and
/// covariance matrices.
#[derive(Debug, Clone)]
pub struct FitData {
    weights: DVector<f64>,
    design: DMatrix<f64>,
    outcomes: DVector<f64>,
    covs: Vec<DMatrix<f64>>,
}

impl FitData {
    pub fn from_dataset(data: &Dataset) -> Self {
        let covs = sample_covariances(data.units());
        let n = data.n();
        let weights = DVector::from_iterator(n, covs.iter().map(|c| c.weight as f64));
        let design = DMatrix::from_fn(n, data.q() + 1, |i, k| {
            let u = &data.units()[i];
            if k == 0 {
                u.exposure
            } else {
                u.confounders[k - 1]
            }
        });
        let outcomes = DVector::from_iterator(n, data.units().iter().map(|u| u.outcome));
        FitData {
            weights,
            design,
            outcomes,
            covs: covs.into_iter().map(|c| c.matrix).collect(),
        }
    }

    pub fn from_parts(
        weights: DVector<f64>,
        design: DMatrix<f64>,
        outcomes: DVector<f64>,
        covs: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let n = weights.len();
        if design.nrows() != n || outcomes.len() != n || covs.len() != n {
            return Err(GmedError::DimensionMismatch {
                location: "fit data unit count".into(),
                expected: n,
                found: design.nrows().min(outcomes.len()).min(covs.len()),
            });
        }
        if n == 0 {
            return Err(GmedError::InvalidConfig("fit data has no units".into()));
        }
        let p = covs[0].nrows();
        if let Some(bad) = covs.iter().find(|c| c.nrows() != p || c.ncols() != p) {
            return Err(GmedError::DimensionMismatch {
                location: "unit covariance".into(),
                expected: p,
                found: bad.nrows(),
            });
        }
        Ok(FitData {
            weights,
            design,
            outcomes,
            covs,
        })
    }

    pub fn n(&self) -> usize {
        self.weights.len()
    }

    pub fn p(&self) -> usize {
        self.covs[0].nrows()
    }

    /// Length of the design vector, `q + 1`.
    pub fn design_dim(&self) -> usize {
        self.design.ncols()
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn outcomes(&self) -> &DVector<f64> {
        &self.outcomes
    }

    pub fn covs(&self) -> &[DMatrix<f64>] {
        &self.covs
    }

    pub fn with_outcomes(&self, outcomes: DVector<f64>) -> FitData {
        assert_eq!(outcomes.len(), self.n());
        FitData {
            outcomes,
            ..self.clone()
        }
    }

    /// Re-expresses the covariances in the coordinates of the orthonormal
    /// columns of `basis`: `S_i -> B' S_i B`.
    pub fn reduced(&self, basis: &DMatrix<f64>) -> FitData {
        let covs = self
            .covs
            .iter()
            .map(|s| symmetrize(&(basis.transpose() * s * basis)))
            .collect();
        FitData {
            covs,
            ..self.clone()
        }
    }

    /// Observation-weighted average covariance.
    pub fn pooled(&self) -> DMatrix<f64> {
        let p = self.p();
        let mut acc = DMatrix::zeros(p, p);
        for (s, w) in self.covs.iter().zip(self.weights.iter()) {
            acc += s * *w;
        }
        acc / self.weights.sum()
    }

    /// `theta' S_i theta` for every unit.
    pub fn quads(&self, theta: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.n(), self.covs.iter().map(|s| quad_form(s, theta)))
    }

    /// `theta_j' S_i theta_j` for every unit `i` (rows) and every column
    /// `theta_j` of `candidates`.
    pub fn candidate_quads(&self, candidates: &DMatrix<f64>) -> DMatrix<f64> {
        let k = candidates.ncols();
        let mut out = DMatrix::zeros(self.n(), k);
        for (i, s) in self.covs.iter().enumerate() {
            let sc = s * candidates;
            for j in 0..k {
                out[(i, j)] = sc.column(j).dot(&candidates.column(j));
            }
        }
        out
    }

    /// The theta-free problem obtained by fixing `theta`.
    pub fn project(&self, theta: &DVector<f64>) -> ProjectedData {
        ProjectedData {
            weights: self.weights.clone(),
            design: self.design.clone(),
            outcomes: self.outcomes.clone(),
            quads: self.quads(theta),
        }
    }
}

/// A fit problem with the projection held fixed: only the per-unit
/// quadratic forms `theta' S_i theta` are retained.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedData {
    pub weights: DVector<f64>,
    pub design: DMatrix<f64>,
    pub outcomes: DVector<f64>,
    pub quads: DVector<f64>,
}

impl ProjectedData {
    pub fn n(&self) -> usize {
        self.weights.len()
    }

    pub fn design_dim(&self) -> usize {
        self.design.ncols()
    }

    pub fn is_feasible(&self) -> bool {
        self.quads.iter().all(|&q| q > QUAD_FLOOR)
    }

    /// Resample of the units at `indices` (with repetition).
    pub fn select(&self, indices: &[usize]) -> ProjectedData {
        let m = indices.len();
        ProjectedData {
            weights: DVector::from_iterator(m, indices.iter().map(|&i| self.weights[i])),
            design: self.design.select_rows(indices),
            outcomes: DVector::from_iterator(m, indices.iter().map(|&i| self.outcomes[i])),
            quads: DVector::from_iterator(m, indices.iter().map(|&i| self.quads[i])),
        }
    }

    /// Linear predictor `alpha_0i + X_i' alpha` of unit `i`.
    pub(crate) fn variance_index(&self, params: &ModelParameters, i: usize) -> f64 {
        params.alpha0i[i] + self.design.row(i).dot(&params.alpha.transpose())
    }

    /// `V_i = Y_i - gamma_0 - X_i' gamma`.
    pub(crate) fn outcome_offset(&self, params: &ModelParameters, i: usize) -> f64 {
        self.outcomes[i] - params.gamma0 - self.design.row(i).dot(&params.gamma.transpose())
    }
}

/// The three additive pieces of the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LikelihoodTerms {
    /// Conditional likelihood of the mediator observations.
    pub mediator: f64,
    /// Conditional likelihood of the outcomes.
    pub outcome: f64,
    /// Likelihood of the random intercepts.
    pub random_effect: f64,
}

impl LikelihoodTerms {
    pub fn total(&self) -> f64 {
        self.mediator + self.outcome + self.random_effect
    }
}

/// Objective decomposition at fixed quadratic forms; `None` when the state
/// is infeasible.
pub fn projected_terms(params: &ModelParameters, data: &ProjectedData) -> Option<LikelihoodTerms> {
    if !(params.pi2 > 0.0 && params.sigma2 > 0.0) || !data.is_feasible() {
        return None;
    }
    let mut mediator = 0.0;
    let mut outcome = 0.0;
    let mut random_effect = 0.0;
    let log_s2 = params.sigma2.ln();
    let log_p2 = params.pi2.ln();
    for i in 0..data.n() {
        let a = data.variance_index(params, i);
        let q = data.quads[i];
        mediator += 0.5 * data.weights[i] * (a + q * (-a).exp());
        let r = data.outcome_offset(params, i) - params.beta * q.ln();
        outcome += 0.5 * (log_s2 + r * r / params.sigma2);
        let d = params.alpha0i[i] - params.alpha0;
        random_effect += 0.5 * (log_p2 + d * d / params.pi2);
    }
    Some(LikelihoodTerms {
        mediator,
        outcome,
        random_effect,
    })
}

pub fn projected_objective(params: &ModelParameters, data: &ProjectedData) -> f64 {
    projected_terms(params, data).map_or(f64::INFINITY, |t| t.total())
}

/// Objective terms at the parameters' own projection.
pub fn likelihood_terms(params: &ModelParameters, data: &FitData) -> Option<LikelihoodTerms> {
    projected_terms(params, &data.project(params.theta.as_vector()))
}

/// Negative plug-in hierarchical log-likelihood (up to a constant);
/// `+inf` when any quadratic form is at or below [`QUAD_FLOOR`] or a
/// variance is not positive.
pub fn neg_hier_loglik(params: &ModelParameters, data: &FitData) -> f64 {
    likelihood_terms(params, data).map_or(f64::INFINITY, |t| t.total())
}

/// Gradient and Hessian of the objective in the `(alpha, phi_1)` block.
pub fn projected_grad_hess_alpha(
    params: &ModelParameters,
    data: &ProjectedData,
) -> (DVector<f64>, DMatrix<f64>) {
    let d = data.design_dim();
    let mut grad = DVector::zeros(d);
    let mut hess = DMatrix::zeros(d, d);
    for i in 0..data.n() {
        let x = data.design.row(i).transpose();
        let qu = data.quads[i] * (-data.variance_index(params, i)).exp();
        let t = data.weights[i];
        grad.axpy(0.5 * t * (1.0 - qu), &x, 1.0);
        hess.ger(0.5 * t * qu, &x, &x, 1.0);
    }
    (grad, hess)
}

pub fn grad_hess_alpha(params: &ModelParameters, data: &FitData) -> (DVector<f64>, DMatrix<f64>) {
    projected_grad_hess_alpha(params, &data.project(params.theta.as_vector()))
}

/// Gradient and second derivative in the random intercept of unit `i`.
pub fn projected_grad_hess_alpha0i(
    params: &ModelParameters,
    data: &ProjectedData,
    i: usize,
) -> (f64, f64) {
    let qu = data.quads[i] * (-data.variance_index(params, i)).exp();
    let t = data.weights[i];
    let grad = 0.5 * (t * (1.0 - qu) + 2.0 / params.pi2 * (params.alpha0i[i] - params.alpha0));
    let hess = 0.5 * (t * qu + 2.0 / params.pi2);
    (grad, hess)
}

pub fn grad_hess_alpha0i(params: &ModelParameters, data: &FitData, i: usize) -> (f64, f64) {
    let q = quad_form(&data.covs[i], params.theta.as_vector());
    let single = ProjectedData {
        weights: DVector::from_element(1, data.weights[i]),
        design: data.design.rows(i, 1).into_owned(),
        outcomes: DVector::from_element(1, data.outcomes[i]),
        quads: DVector::from_element(1, q),
    };
    let mut local = params.clone();
    local.alpha0i = DVector::from_element(1, params.alpha0i[i]);
    projected_grad_hess_alpha0i(&local, &single, 0)
}

/// Linearized projection-update matrix
/// `sum_i { T_i U_i S_i - 2 beta (V_i - beta log xi_i) / (sigma^2 xi_i) S_i }`
/// evaluated at the current state, symmetrized.
pub fn build_a_matrix(params: &ModelParameters, data: &FitData) -> Result<DMatrix<f64>> {
    let proj = data.project(params.theta.as_vector());
    if !proj.is_feasible() {
        return Err(GmedError::InfeasibleState);
    }
    let p = data.p();
    let mut a = DMatrix::zeros(p, p);
    for (i, s) in data.covs.iter().enumerate() {
        let u = (-proj.variance_index(params, i)).exp();
        let xi = proj.quads[i];
        let v = proj.outcome_offset(params, i);
        let coef = data.weights[i] * u
            - 2.0 * params.beta * (v - params.beta * xi.ln()) / (params.sigma2 * xi);
        a += s * coef;
    }
    Ok(symmetrize(&a))
}

/// Lagrangian of the projection sub-problem:
/// `1/2 sum_i { T_i U_i theta' S_i theta + (V_i - beta log theta' S_i theta)^2 / sigma^2 }
///  - lambda (theta' H theta - 1)`.
pub fn lagrangian_value(
    theta: &DVector<f64>,
    lambda: f64,
    params: &ModelParameters,
    data: &FitData,
    h: &DMatrix<f64>,
) -> f64 {
    let quads = data.quads(theta);
    let state = data.project(params.theta.as_vector());
    let offsets = LagrangianOffsets::new(params, &state);
    offsets.value(&quads) - lambda * (quad_form(h, theta) - 1.0)
}

/// The theta-independent pieces `T_i U_i` and `V_i` of the Lagrangian.
pub(crate) struct LagrangianOffsets {
    tu: DVector<f64>,
    v: DVector<f64>,
    beta: f64,
    sigma2: f64,
}

impl LagrangianOffsets {
    pub(crate) fn new(params: &ModelParameters, state: &ProjectedData) -> Self {
        let n = state.n();
        LagrangianOffsets {
            tu: DVector::from_fn(n, |i, _| {
                state.weights[i] * (-state.variance_index(params, i)).exp()
            }),
            v: DVector::from_fn(n, |i, _| state.outcome_offset(params, i)),
            beta: params.beta,
            sigma2: params.sigma2,
        }
    }

    /// Constraint-free part of the Lagrangian for the given quadratic forms.
    pub(crate) fn value<'a>(&self, quads: impl IntoIterator<Item = &'a f64>) -> f64 {
        let mut acc = 0.0;
        for (i, &q) in quads.into_iter().enumerate() {
            if q <= QUAD_FLOOR {
                return f64::INFINITY;
            }
            let r = self.v[i] - self.beta * q.ln();
            acc += self.tu[i] * q + r * r / self.sigma2;
        }
        0.5 * acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ProjectionVector, UnitRecord};

    fn params_1d(n: usize, d: usize) -> ModelParameters {
        ModelParameters {
            theta: ProjectionVector::from_normalized(DVector::from_element(1, 1.0)),
            alpha0i: DVector::zeros(n),
            alpha0: 0.0,
            alpha: DVector::zeros(d),
            gamma0: 0.0,
            gamma: DVector::zeros(d),
            beta: 0.0,
            pi2: 1.0,
            sigma2: 1.0,
        }
    }

    fn one_unit(rows: &[f64]) -> FitData {
        let m = DMatrix::from_column_slice(rows.len(), 1, rows);
        let u = UnitRecord::new("a", 0.0, vec![], 0.0, m).unwrap();
        FitData::from_dataset(&Dataset::new(vec![u]).unwrap())
    }

    #[test]
    fn hand_evaluated_objective() {
        let data = one_unit(&[1.0, -1.0]);
        let params = params_1d(1, 1);
        let terms = likelihood_terms(&params, &data).unwrap();
        assert_eq!(terms.mediator, 1.0);
        assert_eq!(terms.outcome, 0.0);
        assert_eq!(terms.random_effect, 0.0);
        assert_eq!(neg_hier_loglik(&params, &data), 1.0);
    }

    #[test]
    fn zero_mediator_is_infeasible() {
        let data = one_unit(&[0.0, 0.0]);
        assert_eq!(neg_hier_loglik(&params_1d(1, 1), &data), f64::INFINITY);
    }

    #[test]
    fn doubling_weight_doubles_mediator_term() {
        let data = one_unit(&[1.0, -1.0]);
        let mut params = params_1d(1, 1);
        params.alpha0i[0] = 0.3;
        let mut proj = data.project(params.theta.as_vector());
        let base = projected_terms(&params, &proj).unwrap();
        proj.weights[0] *= 2.0;
        let doubled = projected_terms(&params, &proj).unwrap();
        assert_eq!(doubled.mediator, 2.0 * base.mediator);
        assert_eq!(doubled.outcome, base.outcome);
    }

    #[test]
    fn alpha_gradient_single_unit() {
        let m = DMatrix::from_column_slice(2, 1, &[2.0, 1.0]);
        let u = UnitRecord::new("a", 1.0, vec![], 0.0, m).unwrap();
        let data = FitData::from_dataset(&Dataset::new(vec![u]).unwrap());
        let mut params = params_1d(1, 1);
        params.alpha[0] = 0.2;
        let (g, h) = grad_hess_alpha(&params, &data);
        let quad = 2.5;
        let u = (-0.2_f64).exp();
        assert!((g[0] - (2.0 / 2.0) * (1.0 - quad * u) * 1.0).abs() < 1e-14);
        assert!((h[(0, 0)] - quad * u).abs() < 1e-14);
    }

    #[test]
    fn stationary_alpha0i_has_zero_gradient() {
        let data = one_unit(&[1.0, -1.0]);
        let params = params_1d(1, 1);
        let (g, h) = grad_hess_alpha0i(&params, &data, 0);
        assert_eq!(g, 0.0);
        assert!(h >= 1.0 / params.pi2);
    }

    #[test]
    fn a_matrix_scalar_case() {
        let m = DMatrix::from_column_slice(2, 1, &[2.0, 1.0]);
        let u = UnitRecord::new("a", 1.0, vec![], 0.7, m).unwrap();
        let data = FitData::from_dataset(&Dataset::new(vec![u]).unwrap());
        let mut params = params_1d(1, 1);
        params.theta = ProjectionVector::from_normalized(DVector::from_element(1, 0.8));
        params.alpha0i[0] = 0.1;
        params.alpha[0] = 0.2;
        params.gamma0 = 0.05;
        params.gamma[0] = 0.3;
        params.beta = 0.4;
        params.sigma2 = 0.5;
        let a = build_a_matrix(&params, &data).unwrap();
        let s = 2.5;
        let xi = 0.64 * s;
        let uu = (-0.3_f64).exp();
        let v = 0.7 - 0.05 - 0.3;
        let expected = 2.0 * uu * s - 2.0 * 0.4 * (v - 0.4 * f64::ln(xi)) * s / (0.5 * xi);
        assert!((a[(0, 0)] - expected).abs() < 1e-13);

        params.beta = 0.0;
        let a0 = build_a_matrix(&params, &data).unwrap();
        assert!((a0[(0, 0)] - 2.0 * uu * s).abs() < 1e-13);
    }

    #[test]
    fn lagrangian_single_unit_beta_zero() {
        let data = one_unit(&[1.0, -1.0]);
        let params = params_1d(1, 1);
        let h = DMatrix::identity(1, 1);
        let theta = DVector::from_element(1, 1.0);
        // 1/2 T U theta'S theta with T = 2, U = 1, S = 1; plus V^2 / sigma^2 = 0
        let l = lagrangian_value(&theta, 3.0, &params, &data, &h);
        assert_eq!(l, 1.0);
        let neg = lagrangian_value(&(-theta), 3.0, &params, &data, &h);
        assert_eq!(l, neg);
    }
}
