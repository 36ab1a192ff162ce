//! Domain types, dataset ingestion and covariance pre-computation.
//!
//! A dataset is a list of experimental units. Each unit carries a scalar
//! exposure, an optional confounder vector, a scalar outcome and a `T_i x p`
//! matrix of mediator observations whose rows are the repeated measurements
//! of the `p` graph nodes.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GmedError, Result};
use crate::linalg::{apply_sign_convention, quad_form, sym_eigen_ascending};

/// Absolute tolerance on symmetry of a sample covariance.
pub const SYMMETRY_TOL: f64 = 1e-10;
/// Allowed slack on `theta' H theta = 1`.
pub const CONSTRAINT_TOL: f64 = 1e-8;

/// One experimental unit.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitRecord {
    pub unit_id: String,
    pub exposure: f64,
    pub confounders: Vec<f64>,
    pub outcome: f64,
    /// `T_i x p`; row `t` is the observation `M_it`.
    pub mediator: DMatrix<f64>,
}

impl UnitRecord {
    pub fn new(
        unit_id: impl Into<String>,
        exposure: f64,
        confounders: Vec<f64>,
        outcome: f64,
        mediator: DMatrix<f64>,
    ) -> Result<Self> {
        let unit_id = unit_id.into();
        if mediator.nrows() == 0 {
            return Err(GmedError::Parse(format!(
                "unit '{unit_id}' has no mediator observations"
            )));
        }
        check_finite(exposure, || format!("unit '{unit_id}' exposure"))?;
        check_finite(outcome, || format!("unit '{unit_id}' outcome"))?;
        for (k, w) in confounders.iter().enumerate() {
            check_finite(*w, || format!("unit '{unit_id}' confounder w{}", k + 1))?;
        }
        for r in 0..mediator.nrows() {
            for c in 0..mediator.ncols() {
                check_finite(mediator[(r, c)], || {
                    format!("unit '{unit_id}' mediator row {} column {}", r + 1, c + 1)
                })?;
            }
        }
        Ok(UnitRecord {
            unit_id,
            exposure,
            confounders,
            outcome,
            mediator,
        })
    }

    pub fn n_obs(&self) -> usize {
        self.mediator.nrows()
    }

    pub fn design(&self) -> DesignVector {
        DesignVector::new(self.exposure, &self.confounders)
    }
}

fn check_finite(v: f64, location: impl FnOnce() -> String) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(GmedError::NonFiniteValue(location()))
    }
}

/// The stacked `(X_i, W_i)` vector of length `q + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignVector(DVector<f64>);

impl DesignVector {
    pub fn new(exposure: f64, confounders: &[f64]) -> Self {
        let mut v = DVector::zeros(confounders.len() + 1);
        v[0] = exposure;
        for (k, w) in confounders.iter().enumerate() {
            v[k + 1] = *w;
        }
        DesignVector(v)
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A validated collection of units sharing `p` and `q`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    units: Vec<UnitRecord>,
    p: usize,
    q: usize,
}

impl Dataset {
    pub fn new(units: Vec<UnitRecord>) -> Result<Self> {
        let first = units
            .first()
            .ok_or_else(|| GmedError::Parse("dataset has no units".into()))?;
        let p = first.mediator.ncols();
        let q = first.confounders.len();
        if p == 0 {
            return Err(GmedError::Parse("mediator has zero columns".into()));
        }
        for u in &units {
            if u.mediator.ncols() != p {
                return Err(GmedError::DimensionMismatch {
                    location: format!("mediator of unit '{}'", u.unit_id),
                    expected: p,
                    found: u.mediator.ncols(),
                });
            }
            if u.confounders.len() != q {
                return Err(GmedError::DimensionMismatch {
                    location: format!("confounders of unit '{}'", u.unit_id),
                    expected: q,
                    found: u.confounders.len(),
                });
            }
        }
        Ok(Dataset { units, p, q })
    }

    pub fn units(&self) -> &[UnitRecord] {
        &self.units
    }

    pub fn into_units(self) -> Vec<UnitRecord> {
        self.units
    }

    pub fn n(&self) -> usize {
        self.units.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn total_obs(&self) -> usize {
        self.units.iter().map(UnitRecord::n_obs).sum()
    }

    /// Same units with the confounders dropped (`q = 0`).
    pub fn without_confounders(&self) -> Dataset {
        let units = self
            .units
            .iter()
            .map(|u| UnitRecord {
                confounders: Vec::new(),
                ..u.clone()
            })
            .collect();
        Dataset {
            units,
            p: self.p,
            q: 0,
        }
    }

    /// Subtracts each unit's column means from its mediator rows.
    pub fn centered(&self) -> Dataset {
        let units = self
            .units
            .iter()
            .map(|u| {
                let mut m = u.mediator.clone();
                let t = m.nrows() as f64;
                for c in 0..m.ncols() {
                    let mean = m.column(c).sum() / t;
                    m.column_mut(c).add_scalar_mut(-mean);
                }
                UnitRecord {
                    mediator: m,
                    ..u.clone()
                }
            })
            .collect();
        Dataset {
            units,
            p: self.p,
            q: self.q,
        }
    }
}

/// `S_i = T_i^{-1} M_i' M_i` together with its weight `T_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleCovariance {
    pub matrix: DMatrix<f64>,
    pub weight: usize,
}

impl SampleCovariance {
    /// Second moment about zero of the unit's observations.
    pub fn from_unit(unit: &UnitRecord) -> Self {
        let t = unit.n_obs();
        let mut s = unit.mediator.tr_mul(&unit.mediator) / t as f64;
        // exact symmetry
        for r in 0..s.nrows() {
            for c in 0..r {
                let v = 0.5 * (s[(r, c)] + s[(c, r)]);
                s[(r, c)] = v;
                s[(c, r)] = v;
            }
        }
        SampleCovariance {
            matrix: s,
            weight: t,
        }
    }

    pub fn is_symmetric(&self) -> bool {
        (&self.matrix - self.matrix.transpose()).amax() <= SYMMETRY_TOL
    }

    pub fn is_psd(&self) -> bool {
        let (values, _) = sym_eigen_ascending(&self.matrix);
        let largest = values.iter().cloned().fold(0.0_f64, f64::max);
        values.iter().all(|&v| v >= -1e-8 * largest)
    }
}

pub fn sample_covariances(units: &[UnitRecord]) -> Vec<SampleCovariance> {
    units.iter().map(SampleCovariance::from_unit).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    Identity,
    PooledCovariance,
}

/// Positive definite `H` in the normalization `theta' H theta = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintMatrix {
    matrix: DMatrix<f64>,
    kind: ConstraintKind,
}

impl ConstraintMatrix {
    pub fn identity(p: usize) -> Self {
        ConstraintMatrix {
            matrix: DMatrix::identity(p, p),
            kind: ConstraintKind::Identity,
        }
    }

    pub fn new(matrix: DMatrix<f64>, kind: ConstraintKind) -> Result<Self> {
        if !matrix.is_square() || Cholesky::new(matrix.clone()).is_none() {
            return Err(GmedError::NotPositiveDefinite("constraint matrix"));
        }
        Ok(ConstraintMatrix { matrix, kind })
    }

    pub fn for_dataset(kind: ConstraintKind, data: &Dataset) -> Result<Self> {
        match kind {
            ConstraintKind::Identity => Ok(Self::identity(data.p())),
            ConstraintKind::PooledCovariance => pooled_covariance(data.units()),
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn kind(&self) -> ConstraintKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }
}

/// Unnormalized pooled second moment `sum_i T_i S_i / sum_i T_i`.
pub fn pooled_matrix(covs: &[SampleCovariance]) -> DMatrix<f64> {
    let p = covs.first().map_or(0, |c| c.matrix.nrows());
    let total: usize = covs.iter().map(|c| c.weight).sum();
    let mut acc = DMatrix::zeros(p, p);
    for c in covs {
        acc += &c.matrix * (c.weight as f64);
    }
    acc / total as f64
}

/// `S-bar`, the observation-weighted average of the unit covariances.
pub fn pooled_covariance(units: &[UnitRecord]) -> Result<ConstraintMatrix> {
    if units.is_empty() {
        return Err(GmedError::Parse(
            "pooled covariance needs at least one unit".into(),
        ));
    }
    let pooled = pooled_matrix(&sample_covariances(units));
    ConstraintMatrix::new(pooled, ConstraintKind::PooledCovariance)
        .map_err(|_| GmedError::SingularPooledCovariance)
}

/// A projection `theta` normalized to `theta' H theta = 1` with its
/// largest-magnitude entry positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProjectionVector(DVector<f64>);

impl ProjectionVector {
    /// Rescales `direction` onto the constraint surface of `h`.
    pub fn from_direction(direction: DVector<f64>, h: &DMatrix<f64>) -> Result<Self> {
        let norm2 = quad_form(h, &direction);
        if !(norm2 > 0.0) || !norm2.is_finite() {
            return Err(GmedError::InvalidConfig(
                "projection direction has zero H-norm".into(),
            ));
        }
        let mut v = direction / norm2.sqrt();
        apply_sign_convention(&mut v);
        Ok(ProjectionVector(v))
    }

    /// Wraps a vector that is already normalized; only the sign convention
    /// is applied.
    pub fn from_normalized(mut v: DVector<f64>) -> Self {
        apply_sign_convention(&mut v);
        ProjectionVector(v)
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn constraint_residual(&self, h: &DMatrix<f64>) -> f64 {
        quad_form(h, &self.0) - 1.0
    }

    pub fn satisfies(&self, h: &DMatrix<f64>) -> bool {
        self.constraint_residual(h).abs() <= CONSTRAINT_TOL
    }
}

/// Full parameter set of one mediation component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParameters {
    pub theta: ProjectionVector,
    /// Random intercepts `alpha_0i = alpha_0 + eta_i`.
    pub alpha0i: DVector<f64>,
    pub alpha0: f64,
    /// `(alpha, phi_1)`: exposure slope then confounder slopes.
    pub alpha: DVector<f64>,
    pub gamma0: f64,
    /// `(gamma, phi_2)`.
    pub gamma: DVector<f64>,
    pub beta: f64,
    pub pi2: f64,
    pub sigma2: f64,
}

impl ModelParameters {
    pub fn is_well_formed(&self) -> bool {
        self.pi2 > 0.0 && self.sigma2 > 0.0
    }

    pub fn estimands(&self) -> CausalEstimates {
        CausalEstimates::new(self.alpha[0], self.beta, self.gamma[0])
    }
}

/// Average total, indirect and direct effects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CausalEstimates {
    pub ate: f64,
    pub aie: f64,
    pub ade: f64,
}

impl CausalEstimates {
    /// `aie = alpha * beta`, `ade = gamma`, `ate = aie + ade`.
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Self {
        let aie = alpha * beta;
        let ade = gamma;
        CausalEstimates {
            ate: aie + ade,
            aie,
            ade,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadOptions {
    /// Subtract per-unit column means from the mediator observations.
    pub center: bool,
}

struct SubjectRow {
    unit_id: String,
    exposure: f64,
    outcome: f64,
    confounders: Vec<f64>,
}

fn parse_real(field: &str, location: impl Fn() -> String) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| GmedError::Parse(format!("{}: '{}' is not a number", location(), field)))?;
    check_finite(v, location)?;
    Ok(v)
}

fn read_subjects(path: &Path) -> Result<Vec<SubjectRow>> {
    let file = fs::File::open(path).map_err(|e| GmedError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers = reader.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| GmedError::Parse(format!("subject table lacks column '{name}'")))
    };
    let id_col = find("unit_id")?;
    let x_col = find("exposure")?;
    let y_col = find("outcome")?;
    let mut w_cols: Vec<(usize, usize)> = headers
        .iter()
        .enumerate()
        .filter_map(|(i, h)| {
            h.strip_prefix('w')
                .and_then(|k| k.parse::<usize>().ok())
                .map(|k| (k, i))
        })
        .collect();
    w_cols.sort();
    for (expect, (k, _)) in w_cols.iter().enumerate() {
        if *k != expect + 1 {
            return Err(GmedError::Parse(format!(
                "confounder columns must be w1..wq, found w{k} at position {}",
                expect + 1
            )));
        }
    }

    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let at = |col: &str| format!("{} line {} column {}", path.display(), line + 2, col);
        let get = |i: usize| record.get(i).unwrap_or("");
        let confounders = w_cols
            .iter()
            .map(|(k, i)| parse_real(get(*i), || at(&format!("w{k}"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(SubjectRow {
            unit_id: get(id_col).to_string(),
            exposure: parse_real(get(x_col), || at("exposure"))?,
            outcome: parse_real(get(y_col), || at("outcome"))?,
            confounders,
        });
    }
    Ok(rows)
}

fn rows_to_matrix(rows: Vec<Vec<f64>>, p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), p, |r, c| rows[r][c])
}

/// Tracks the mediator width fixed by the first row seen.
struct WidthGuard(Option<usize>);

impl WidthGuard {
    fn check(&mut self, found: usize, location: impl Fn() -> String) -> Result<()> {
        match self.0 {
            None => {
                self.0 = Some(found);
                Ok(())
            }
            Some(expected) if expected == found => Ok(()),
            Some(expected) => Err(GmedError::DimensionMismatch {
                location: location(),
                expected,
                found,
            }),
        }
    }
}

fn read_unit_file(path: &Path, width: &mut WidthGuard) -> Result<Vec<Vec<f64>>> {
    let file = fs::File::open(path).map_err(|e| GmedError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let loc = || format!("{} line {}", path.display(), line + 1);
        width.check(record.len(), loc)?;
        let row = record
            .iter()
            .enumerate()
            .map(|(c, f)| parse_real(f, || format!("{} column {}", loc(), c + 1)))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

fn read_long_file(path: &Path, width: &mut WidthGuard) -> Result<HashMap<String, Vec<Vec<f64>>>> {
    let file = fs::File::open(path).map_err(|e| GmedError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers = reader.headers()?.clone();
    if headers.get(0) != Some("unit_id") || headers.get(1) != Some("t") {
        return Err(GmedError::Parse(format!(
            "{}: long mediator file must start with columns unit_id,t",
            path.display()
        )));
    }
    let mut by_unit: HashMap<String, Vec<(i64, Vec<f64>)>> = HashMap::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let loc = || format!("{} line {}", path.display(), line + 2);
        width.check(record.len().saturating_sub(2), loc)?;
        let t: i64 = record[1]
            .parse()
            .map_err(|_| GmedError::Parse(format!("{}: bad time index '{}'", loc(), &record[1])))?;
        let row = record
            .iter()
            .skip(2)
            .enumerate()
            .map(|(c, f)| parse_real(f, || format!("{} column v{}", loc(), c + 1)))
            .collect::<Result<Vec<_>>>()?;
        by_unit
            .entry(record[0].to_string())
            .or_default()
            .push((t, row));
    }
    Ok(by_unit
        .into_iter()
        .map(|(id, mut rows)| {
            rows.sort_by_key(|(t, _)| *t);
            (id, rows.into_iter().map(|(_, r)| r).collect())
        })
        .collect())
}

/// Reads a subject table plus mediator observations.
///
/// `mediators` is either a directory holding one `<unit_id>.csv` per unit
/// (headerless, one observation per row) or a single long-format CSV with
/// header `unit_id,t,v1,...,vp`.
pub fn load_dataset(subjects: &Path, mediators: &Path, options: LoadOptions) -> Result<Dataset> {
    let rows = read_subjects(subjects)?;
    let mut width = WidthGuard(None);
    let mut units = Vec::with_capacity(rows.len());

    if mediators.is_dir() {
        for row in rows {
            let path = mediators.join(format!("{}.csv", row.unit_id));
            if !path.is_file() {
                return Err(GmedError::MissingMediator(row.unit_id));
            }
            let obs = read_unit_file(&path, &mut width)?;
            let p = width.0.unwrap_or(0);
            units.push(UnitRecord::new(
                row.unit_id,
                row.exposure,
                row.confounders,
                row.outcome,
                rows_to_matrix(obs, p),
            )?);
        }
    } else {
        let mut by_unit = read_long_file(mediators, &mut width)?;
        let p = width.0.unwrap_or(0);
        for row in rows {
            let obs = by_unit
                .remove(&row.unit_id)
                .ok_or_else(|| GmedError::MissingMediator(row.unit_id.clone()))?;
            units.push(UnitRecord::new(
                row.unit_id,
                row.exposure,
                row.confounders,
                row.outcome,
                rows_to_matrix(obs, p),
            )?);
        }
    }

    let data = Dataset::new(units)?;
    Ok(if options.center {
        data.centered()
    } else {
        data
    })
}

/// Writes `subjects.csv`-style table and a directory of per-unit mediator
/// files. Reals use the shortest representation that parses back exactly.
pub fn write_dataset(data: &Dataset, subjects: &Path, mediator_dir: &Path) -> Result<()> {
    fs::create_dir_all(mediator_dir).map_err(|e| GmedError::io(mediator_dir, e))?;
    let mut writer = csv::Writer::from_path(subjects)?;
    let mut header = vec!["unit_id".to_string(), "exposure".into(), "outcome".into()];
    header.extend((1..=data.q()).map(|k| format!("w{k}")));
    writer.write_record(&header)?;
    for u in data.units() {
        let mut rec = vec![
            u.unit_id.clone(),
            u.exposure.to_string(),
            u.outcome.to_string(),
        ];
        rec.extend(u.confounders.iter().map(f64::to_string));
        writer.write_record(&rec)?;
    }
    writer.flush().map_err(|e| GmedError::io(subjects, e))?;

    for u in data.units() {
        let path = mediator_dir.join(format!("{}.csv", u.unit_id));
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(&path)?;
        for r in 0..u.mediator.nrows() {
            w.write_record(u.mediator.row(r).iter().map(f64::to_string))?;
        }
        w.flush().map_err(|e| GmedError::io(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn unit(id: &str, rows: &[&[f64]]) -> UnitRecord {
        let p = rows[0].len();
        let m = DMatrix::from_fn(rows.len(), p, |r, c| rows[r][c]);
        UnitRecord::new(id, 0.0, vec![], 0.0, m).unwrap()
    }

    #[test]
    fn sample_covariance_hand_values() {
        let s = SampleCovariance::from_unit(&unit("a", &[&[1.0], &[-1.0]]));
        assert_eq!(s.matrix[(0, 0)], 1.0);
        assert_eq!(s.weight, 2);

        let z = SampleCovariance::from_unit(&unit("z", &[&[0.0, 0.0], &[0.0, 0.0]]));
        assert_eq!(z.matrix, DMatrix::zeros(2, 2));

        let e = SampleCovariance::from_unit(&unit("e", &[&[1.0, 0.0], &[0.0, 1.0]]));
        assert_eq!(
            e.matrix,
            DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.5])
        );
        assert!(e.is_symmetric() && e.is_psd());
    }

    #[test]
    fn pooled_covariance_weighted_average() {
        let single = unit("a", &[&[1.0, 2.0], &[0.5, -1.0], &[2.0, 0.0]]);
        let h = pooled_covariance(std::slice::from_ref(&single)).unwrap();
        assert_eq!(h.matrix(), &SampleCovariance::from_unit(&single).matrix);

        // S_1 = I, S_2 = 3I with T = 2 each
        let u1 = unit("1", &[&[1.0, 0.0], &[0.0, 1.0]]);
        let r = 3.0_f64.sqrt();
        let u1 = UnitRecord {
            mediator: u1.mediator * 2.0_f64.sqrt(),
            ..u1
        };
        let u2 = unit(
            "2",
            &[&[r * 2.0_f64.sqrt(), 0.0], &[0.0, r * 2.0_f64.sqrt()]],
        );
        let h = pooled_covariance(&[u1, u2]).unwrap();
        let expected = DMatrix::identity(2, 2) * 2.0;
        assert!((h.matrix() - expected).amax() < 1e-12);
        assert_eq!(h.kind(), ConstraintKind::PooledCovariance);
    }

    #[test]
    fn pooled_covariance_rank_deficient() {
        let u = unit("a", &[&[1.0, 2.0, 3.0]]);
        assert!(matches!(
            pooled_covariance(&[u]),
            Err(GmedError::SingularPooledCovariance)
        ));
    }

    #[test]
    fn non_finite_rejected() {
        let m = DMatrix::from_row_slice(1, 2, &[1.0, f64::NAN]);
        assert!(matches!(
            UnitRecord::new("x", 0.0, vec![], 0.0, m),
            Err(GmedError::NonFiniteValue(_))
        ));
        let m = DMatrix::from_row_slice(1, 1, &[1.0]);
        assert!(matches!(
            UnitRecord::new("x", f64::INFINITY, vec![], 0.0, m),
            Err(GmedError::NonFiniteValue(_))
        ));
    }

    #[test]
    fn projection_vector_normalizes_and_fixes_sign() {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]);
        let v = ProjectionVector::from_direction(DVector::from_vec(vec![-3.0, 1.0]), &h).unwrap();
        assert!(v.satisfies(&h));
        assert!(v.as_vector()[0] > 0.0);
    }

    #[test]
    fn causal_estimates_add_up() {
        let e = CausalEstimates::new(1.0, 1.0, 1.0);
        assert_eq!((e.ate, e.aie, e.ade), (2.0, 1.0, 1.0));
    }

    fn write(path: &Path, text: &str) {
        let mut f = fs::File::create(path).unwrap();
        f.write_all(text.as_bytes()).unwrap();
    }

    #[test]
    fn load_per_unit_directory() {
        let dir = tempfile::tempdir().unwrap();
        let subj = dir.path().join("s.csv");
        write(&subj, "unit_id,exposure,outcome\na,1,0.5\nb,0,-0.25\n");
        let med = dir.path().join("med");
        fs::create_dir(&med).unwrap();
        write(&med.join("a.csv"), "1,2,3\n4,5,6\n");
        write(&med.join("b.csv"), "0.5,0.25,1e-3\n");
        let data = load_dataset(&subj, &med, LoadOptions::default()).unwrap();
        assert_eq!(data.n(), 2);
        assert_eq!(data.p(), 3);
        assert_eq!(data.q(), 0);
        assert_eq!(data.units()[0].unit_id, "a");
        assert_eq!(data.units()[0].n_obs(), 2);
        assert_eq!(data.units()[1].mediator[(0, 2)], 1e-3);
    }

    #[test]
    fn load_reports_missing_mediator() {
        let dir = tempfile::tempdir().unwrap();
        let subj = dir.path().join("s.csv");
        write(&subj, "unit_id,exposure,outcome\na,1,0.5\nb,0,1\n");
        let med = dir.path().join("med");
        fs::create_dir(&med).unwrap();
        write(&med.join("a.csv"), "1,2,3\n");
        match load_dataset(&subj, &med, LoadOptions::default()) {
            Err(GmedError::MissingMediator(id)) => assert_eq!(id, "b"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn load_reports_dimension_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let subj = dir.path().join("s.csv");
        write(&subj, "unit_id,exposure,outcome\na,1,0.5\nb,0,1\n");
        let med = dir.path().join("med");
        fs::create_dir(&med).unwrap();
        write(&med.join("a.csv"), "1,2,3\n");
        write(&med.join("b.csv"), "1,2,3,4\n");
        match load_dataset(&subj, &med, LoadOptions::default()) {
            Err(GmedError::DimensionMismatch {
                expected, found, ..
            }) => {
                assert_eq!((expected, found), (3, 4))
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn load_long_format_with_confounders_and_centering() {
        let dir = tempfile::tempdir().unwrap();
        let subj = dir.path().join("s.csv");
        write(
            &subj,
            "unit_id,exposure,outcome,w2,w1\nb,0,1,20,10\na,1,2,40,30\n",
        );
        let med = dir.path().join("long.csv");
        write(
            &med,
            "unit_id,t,v1,v2\na,2,3,4\na,1,1,2\nb,1,5,5\nb,2,7,9\n",
        );
        let data = load_dataset(&subj, &med, LoadOptions::default()).unwrap();
        assert_eq!(data.units()[0].unit_id, "b");
        assert_eq!(data.units()[0].confounders, vec![10.0, 20.0]);
        assert_eq!(data.units()[1].mediator.row(0)[0], 1.0);
        let centered = load_dataset(&subj, &med, LoadOptions { center: true }).unwrap();
        assert_eq!(centered.units()[1].mediator[(0, 0)], -1.0);
        assert_eq!(centered.units()[1].mediator[(1, 1)], 1.0);
    }

    #[test]
    fn load_rejects_nan() {
        let dir = tempfile::tempdir().unwrap();
        let subj = dir.path().join("s.csv");
        write(&subj, "unit_id,exposure,outcome\na,1,NaN\n");
        let med = dir.path().join("med");
        fs::create_dir(&med).unwrap();
        write(&med.join("a.csv"), "1\n");
        assert!(matches!(
            load_dataset(&subj, &med, LoadOptions::default()),
            Err(GmedError::NonFiniteValue(_))
        ));
    }

    #[test]
    fn write_then_load_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let m = DMatrix::from_row_slice(2, 2, &[0.1, 1.0 / 3.0, -2.5e-17, 7.0]);
        let u = UnitRecord::new("u1", 1.0, vec![std::f64::consts::PI], -0.3, m).unwrap();
        let data = Dataset::new(vec![u]).unwrap();
        let subj = dir.path().join("s.csv");
        let med = dir.path().join("m");
        write_dataset(&data, &subj, &med).unwrap();
        let back = load_dataset(&subj, &med, LoadOptions::default()).unwrap();
        assert_eq!(back, data);
    }
}
