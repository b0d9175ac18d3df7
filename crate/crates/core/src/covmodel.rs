//! Observation-error covariance matrices: correlation models, scaling by
//! standard deviations, spectral reconditioning and inversion.

use std::fmt;
use std::str::FromStr;

use log::warn;
use thiserror::Error;

use crate::boxtree::{BoxId, BoxTree, GeoPoint, ObservationSet};
use crate::numkernel::{self, DenseMatrix, LinalgError};

pub mod io;

/// Mean Earth radius used for great-circle distances.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Above this many observations distances are recomputed rather than tabulated.
pub const DISTANCE_TABLE_LIMIT: usize = 10_000;

#[derive(Debug, Error)]
pub enum CovError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),

    #[error("lengthscale must be positive and finite, got {0}")]
    BadLengthscale(f64),

    #[error("required condition number must exceed 1, got {0}")]
    BadConditionNumber(f64),

    #[error("standard deviation {index} must be positive and finite, got {value}")]
    BadStddev { index: usize, value: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("unknown correlation kind `{0}`")]
    UnknownKind(String),

    #[error("unknown reconditioning method `{0}`")]
    UnknownMethod(String),
}

/// Haversine distance in km on a sphere of radius [`EARTH_RADIUS_KM`].
pub fn great_circle_distance(a: GeoPoint, b: GeoPoint) -> f64 {
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CorrelationKind {
    Gaussian,
    /// First-order auto-regressive (Markov).
    Foar,
    /// Second-order auto-regressive.
    Soar,
    Matern52,
}

impl CorrelationKind {
    pub const ALL: [CorrelationKind; 4] = [Self::Gaussian, Self::Foar, Self::Soar, Self::Matern52];

    pub fn name(self) -> &'static str {
        match self {
            Self::Gaussian => "gaussian",
            Self::Foar => "foar",
            Self::Soar => "soar",
            Self::Matern52 => "matern52",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Self::Gaussian => 1,
            Self::Foar => 2,
            Self::Soar => 3,
            Self::Matern52 => 4,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.code() == code)
    }
}

impl fmt::Display for CorrelationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorrelationKind {
    type Err = CovError;

    fn from_str(s: &str) -> Result<Self, CovError> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gaussian" => Ok(Self::Gaussian),
            "foar" | "markov" => Ok(Self::Foar),
            "soar" => Ok(Self::Soar),
            "matern52" | "matern" | "matern5/2" => Ok(Self::Matern52),
            _ => Err(CovError::UnknownKind(s.to_string())),
        }
    }
}

/// A correlation kind with its lengthscale in km.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorrelationFunction {
    kind: CorrelationKind,
    lengthscale: f64,
}

impl CorrelationFunction {
    pub fn new(kind: CorrelationKind, lengthscale_km: f64) -> Result<Self, CovError> {
        if !(lengthscale_km > 0.0 && lengthscale_km.is_finite()) {
            return Err(CovError::BadLengthscale(lengthscale_km));
        }
        Ok(Self {
            kind,
            lengthscale: lengthscale_km,
        })
    }

    pub fn kind(&self) -> CorrelationKind {
        self.kind
    }

    pub fn lengthscale(&self) -> f64 {
        self.lengthscale
    }

    /// Correlation at separation `r` km.
    pub fn eval(&self, r: f64) -> f64 {
        let r = r.abs();
        let l = self.lengthscale;
        match self.kind {
            CorrelationKind::Gaussian => (-(r * r) / (2.0 * l * l)).exp(),
            CorrelationKind::Foar => (-r / l).exp(),
            CorrelationKind::Soar => (1.0 + r / l) * (-r / l).exp(),
            CorrelationKind::Matern52 => {
                let a = 5f64.sqrt() * r / l;
                (1.0 + a + 5.0 * r * r / (3.0 * l * l)) * (-a).exp()
            }
        }
    }
}

/// Pairwise great-circle distances, packed lower triangle.
#[derive(Clone, Debug)]
pub struct DistanceTable {
    n: usize,
    packed: Vec<f64>,
}

impl DistanceTable {
    pub fn new(obs: &ObservationSet) -> Self {
        let n = obs.len();
        let mut packed = Vec::with_capacity(n * (n + 1) / 2);
        for i in 0..n {
            for j in 0..=i {
                packed.push(great_circle_distance(obs.point(i), obs.point(j)));
            }
        }
        Self { n, packed }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        self.packed[i * (i + 1) / 2 + j]
    }

    /// Correlation matrix of `func` over the tabulated points.
    pub fn correlation(&self, func: &CorrelationFunction) -> DenseMatrix {
        DenseMatrix::symmetric_from_fn(self.n, |i, j| if i == j { 1.0 } else { func.eval(self.get(i, j)) })
    }
}

/// Correlation matrix with unit diagonal, symmetric by construction.
pub fn build_correlation(func: &CorrelationFunction, obs: &ObservationSet) -> DenseMatrix {
    if obs.len() <= DISTANCE_TABLE_LIMIT {
        DistanceTable::new(obs).correlation(func)
    } else {
        DenseMatrix::symmetric_from_fn(obs.len(), |i, j| {
            if i == j {
                1.0
            } else {
                func.eval(great_circle_distance(obs.point(i), obs.point(j)))
            }
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ReconditionMethod {
    RidgeRegression,
    MinimumEigenvalue,
}

impl ReconditionMethod {
    pub fn short_name(self) -> &'static str {
        match self {
            Self::RidgeRegression => "rr",
            Self::MinimumEigenvalue => "me",
        }
    }
}

impl FromStr for ReconditionMethod {
    type Err = CovError;

    fn from_str(s: &str) -> Result<Self, CovError> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rr" | "ridge" | "ridge-regression" => Ok(Self::RidgeRegression),
            "me" | "min-eig" | "minimum-eigenvalue" => Ok(Self::MinimumEigenvalue),
            _ => Err(CovError::UnknownMethod(s.to_string())),
        }
    }
}

/// A reconditioning request: method plus target condition number.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Recondition {
    pub method: ReconditionMethod,
    pub kappa: f64,
}

impl Recondition {
    pub fn new(method: ReconditionMethod, kappa: f64) -> Result<Self, CovError> {
        if !(kappa > 1.0 && kappa.is_finite()) {
            return Err(CovError::BadConditionNumber(kappa));
        }
        Ok(Self { method, kappa })
    }

    pub fn apply(&self, model: &CovarianceModel) -> Result<CovarianceModel, CovError> {
        match self.method {
            ReconditionMethod::RidgeRegression => recondition_rr(model, self.kappa),
            ReconditionMethod::MinimumEigenvalue => recondition_me(model, self.kappa),
        }
    }

    /// Short label such as `rr:1000`.
    pub fn label(&self) -> String {
        format!("{}:{}", self.method.short_name(), self.kappa)
    }
}

impl FromStr for Recondition {
    type Err = CovError;

    /// Parses `method:kappa`, e.g. `rr:1000`.
    fn from_str(s: &str) -> Result<Self, CovError> {
        let (method, kappa) = s
            .split_once(':')
            .ok_or_else(|| CovError::UnknownMethod(s.to_string()))?;
        let kappa: f64 = kappa
            .trim()
            .parse()
            .map_err(|_| CovError::BadConditionNumber(f64::NAN))?;
        Self::new(method.parse()?, kappa)
    }
}

/// What reconditioning did to a model. `parameter` is the ridge shift δ or the
/// eigenvalue floor T; `applied` is false when the spectrum already met the target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReconditionRecord {
    pub method: ReconditionMethod,
    pub kappa: f64,
    pub parameter: f64,
    pub applied: bool,
}

/// Symmetric covariance matrix `R` with its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceModel {
    matrix: DenseMatrix,
    correlation: Option<CorrelationFunction>,
    stddevs: Vec<f64>,
    recondition: Option<ReconditionRecord>,
}

/// `R(i,j) = σ_i σ_j C(i,j)`.
pub fn build_covariance(correlation: &DenseMatrix, stddevs: &[f64]) -> Result<CovarianceModel, CovError> {
    let n = correlation.nrows();
    if !correlation.is_square() {
        return Err(CovError::DimensionMismatch {
            expected: n,
            found: correlation.ncols(),
        });
    }
    if stddevs.len() != n {
        return Err(CovError::DimensionMismatch {
            expected: n,
            found: stddevs.len(),
        });
    }
    if let Some((index, &value)) = stddevs.iter().enumerate().find(|(_, s)| !(**s > 0.0 && s.is_finite())) {
        return Err(CovError::BadStddev { index, value });
    }
    let matrix = DenseMatrix::symmetric_from_fn(n, |i, j| stddevs[i] * stddevs[j] * correlation[(i, j)]);
    Ok(CovarianceModel {
        matrix,
        correlation: None,
        stddevs: stddevs.to_vec(),
        recondition: None,
    })
}

impl CovarianceModel {
    /// `D C D` for `func` over `obs` with per-observation standard deviations.
    pub fn from_function(
        func: CorrelationFunction,
        obs: &ObservationSet,
        stddevs: &[f64],
    ) -> Result<Self, CovError> {
        let mut model = build_covariance(&build_correlation(&func, obs), stddevs)?;
        model.correlation = Some(func);
        Ok(model)
    }

    /// Same as [`Self::from_function`] with one standard deviation for every observation.
    pub fn uniform(func: CorrelationFunction, obs: &ObservationSet, stddev: f64) -> Result<Self, CovError> {
        Self::from_function(func, obs, &vec![stddev; obs.len()])
    }

    pub(crate) fn from_parts(
        matrix: DenseMatrix,
        correlation: Option<CorrelationFunction>,
        stddevs: Vec<f64>,
        recondition: Option<ReconditionRecord>,
    ) -> Self {
        Self {
            matrix,
            correlation,
            stddevs,
            recondition,
        }
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> DenseMatrix {
        self.matrix
    }

    /// Keeps the provenance but swaps the matrix, e.g. to store `A = R⁻¹`
    /// next to the description of the `R` it came from.
    pub fn with_matrix(&self, matrix: DenseMatrix) -> Self {
        Self {
            matrix,
            ..self.clone()
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn correlation_function(&self) -> Option<CorrelationFunction> {
        self.correlation
    }

    /// The prescribed standard deviations (diagonal of `D`).
    pub fn stddevs(&self) -> &[f64] {
        &self.stddevs
    }

    pub fn recondition_record(&self) -> Option<ReconditionRecord> {
        self.recondition
    }

    /// `C = D⁻¹ R D⁻¹`.
    pub fn correlation_matrix(&self) -> DenseMatrix {
        let s = &self.stddevs;
        DenseMatrix::symmetric_from_fn(self.dim(), |i, j| self.matrix[(i, j)] / (s[i] * s[j]))
    }

    /// Keeps only the rows and columns in `indices` (ascending survivors of a removal).
    pub fn restrict(&self, indices: &[usize]) -> CovarianceModel {
        CovarianceModel {
            matrix: self.matrix.select(indices, indices),
            correlation: self.correlation,
            stddevs: indices.iter().map(|&i| self.stddevs[i]).collect(),
            recondition: self.recondition,
        }
    }

    pub fn condition_number(&self) -> Result<f64, CovError> {
        Ok(numkernel::condition_number(&self.matrix)?)
    }

    fn with(&self, matrix: DenseMatrix, record: ReconditionRecord) -> CovarianceModel {
        CovarianceModel {
            matrix,
            correlation: self.correlation,
            stddevs: self.stddevs.clone(),
            recondition: Some(record),
        }
    }
}

/// Ridge-regression shift `δ = (λ_max - λ_min κ) / (κ - 1)`.
pub fn ridge_shift(lambda_max: f64, lambda_min: f64, kappa: f64) -> f64 {
    (lambda_max - lambda_min * kappa) / (kappa - 1.0)
}

/// `R + δ I`, which moves every eigenvalue by δ and lands on condition number κ.
/// When `R` already satisfies κ the model is returned unchanged with δ = 0.
pub fn recondition_rr(model: &CovarianceModel, kappa: f64) -> Result<CovarianceModel, CovError> {
    Recondition::new(ReconditionMethod::RidgeRegression, kappa)?;
    let values = numkernel::sym_eigenvalues(&model.matrix)?;
    let (lmax, lmin) = (values[0], *values.last().expect("non-empty"));
    let delta = ridge_shift(lmax, lmin, kappa);
    let mut record = ReconditionRecord {
        method: ReconditionMethod::RidgeRegression,
        kappa,
        parameter: 0.0,
        applied: false,
    };
    if !(delta > 0.0) {
        warn!("ridge regression skipped: condition number {} already <= {kappa}", lmax / lmin);
        return Ok(model.with(model.matrix.clone(), record));
    }
    record.parameter = delta;
    record.applied = true;
    let mut matrix = model.matrix.clone();
    matrix.add_to_diagonal(delta);
    Ok(model.with(matrix, record))
}

/// Raises every eigenvalue below `T = λ_max / κ` to `T`, keeping eigenvectors.
pub fn recondition_me(model: &CovarianceModel, kappa: f64) -> Result<CovarianceModel, CovError> {
    Recondition::new(ReconditionMethod::MinimumEigenvalue, kappa)?;
    let eig = numkernel::sym_eig(&model.matrix)?;
    let threshold = eig.max() / kappa;
    let mut record = ReconditionRecord {
        method: ReconditionMethod::MinimumEigenvalue,
        kappa,
        parameter: threshold,
        applied: false,
    };
    if eig.min() >= threshold {
        return Ok(model.with(model.matrix.clone(), record));
    }
    record.applied = true;
    let clamped: Vec<f64> = eig.values.iter().map(|&l| l.max(threshold)).collect();
    Ok(model.with(eig.reconstruct_with(&clamped), record))
}

/// `A = R⁻¹`. Fails with a definiteness error when `R` needs reconditioning first.
pub fn inverse_weighting(model: &CovarianceModel) -> Result<DenseMatrix, CovError> {
    Ok(numkernel::spd_invert(&model.matrix)?)
}

/// Leading singular values of one box's far-field sub-matrix `A(I_F, I_b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxSpectrum {
    pub id: BoxId,
    /// Up to `p + 1` leading singular values.
    pub values: Vec<f64>,
    /// True when the sub-matrix has fewer than `p + 1` singular values.
    pub truncated: bool,
}

/// Singular-value facts behind the accuracy analysis of a rank-`p` plan.
#[derive(Clone, Debug, PartialEq)]
pub struct SingularValueFacts {
    pub rank: usize,
    pub boxes: Vec<BoxSpectrum>,
    /// Singular values of the whole matrix, descending.
    pub matrix_values: Vec<f64>,
    /// Mean of `s_{p+1}` over boxes that have one.
    pub mean_next: Option<f64>,
}

impl SingularValueFacts {
    pub fn sigma_max(&self) -> f64 {
        self.matrix_values[0]
    }
}

/// Spectra of every level ≥ 2 far-field sub-matrix plus the spectrum of `A`.
pub fn singular_value_facts(a: &DenseMatrix, tree: &BoxTree, p: usize) -> Result<SingularValueFacts, CovError> {
    if a.nrows() != tree.observation_count() || !a.is_square() {
        return Err(CovError::DimensionMismatch {
            expected: tree.observation_count(),
            found: a.nrows(),
        });
    }
    let mut boxes = Vec::new();
    for level in 2..=tree.levels() {
        for b in tree.level_boxes(level) {
            let rows = tree.indices_of(&tree.far_field(b).expect("level >= 2"))
                .expect("single level");
            let cols = tree.members(b);
            if rows.is_empty() || cols.is_empty() {
                continue;
            }
            let mut values = numkernel::singular_values(&a.select(&rows, cols))?;
            let truncated = values.len() < p + 1;
            values.truncate(p + 1);
            boxes.push(BoxSpectrum { id: b, values, truncated });
        }
    }
    let next: Vec<f64> = boxes.iter().filter_map(|b| b.values.get(p).copied()).collect();
    let mean_next = (!next.is_empty()).then(|| next.iter().sum::<f64>() / next.len() as f64);
    let matrix_values = if a.symmetry_defect().2 == 0.0 {
        let mut v: Vec<f64> = numkernel::sym_eigenvalues(a)?.into_iter().map(f64::abs).collect();
        v.sort_by(|x, y| y.total_cmp(x));
        v
    } else {
        numkernel::singular_values(a)?
    };
    Ok(SingularValueFacts {
        rank: p,
        boxes,
        matrix_values,
        mean_next,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(n_lat: usize, n_lon: usize) -> ObservationSet {
        let mut pts = Vec::new();
        for i in 0..n_lat {
            for j in 0..n_lon {
                let lat = 54.0 + 6.0 * i as f64 / (n_lat - 1) as f64;
                let lon = -6.0 + 12.0 * j as f64 / (n_lon - 1) as f64;
                pts.push(GeoPoint::new(lat, lon));
            }
        }
        ObservationSet::new(pts).unwrap()
    }

    fn soar(l: f64) -> CorrelationFunction {
        CorrelationFunction::new(CorrelationKind::Soar, l).unwrap()
    }

    fn two_by_two() -> CovarianceModel {
        build_covariance(&DenseMatrix::from_rows(&[[1.0, 0.5], [0.5, 1.0]]), &[1.0, 1.0]).unwrap()
    }

    #[test]
    fn distances() {
        let o = GeoPoint::new(0.0, 0.0);
        assert_eq!(great_circle_distance(o, o), 0.0);
        assert_relative_eq!(great_circle_distance(o, GeoPoint::new(0.0, 180.0)), PI * 6371.0, max_relative = 1e-12);
        assert_relative_eq!(great_circle_distance(o, GeoPoint::new(0.0, 1.0)), 6371.0 * PI / 180.0, max_relative = 1e-12);
        assert_relative_eq!(PI * 6371.0, 20015.086796, epsilon = 1e-5);
    }

    #[test]
    fn correlation_at_lengthscale() {
        let at = |k| CorrelationFunction::new(k, 80.0).unwrap().eval(80.0);
        for k in CorrelationKind::ALL {
            assert_eq!(CorrelationFunction::new(k, 80.0).unwrap().eval(0.0), 1.0);
        }
        assert_relative_eq!(at(CorrelationKind::Foar), 0.367879441171, epsilon = 1e-12);
        assert_relative_eq!(at(CorrelationKind::Soar), 0.735758882343, epsilon = 1e-12);
        assert_relative_eq!(at(CorrelationKind::Gaussian), 0.606530659713, epsilon = 1e-12);
        assert_relative_eq!(at(CorrelationKind::Matern52), 0.5239941088318203, epsilon = 1e-12);
    }

    #[test]
    fn bad_lengthscale() {
        assert!(CorrelationFunction::new(CorrelationKind::Soar, 0.0).is_err());
        assert!(CorrelationFunction::new(CorrelationKind::Soar, f64::NAN).is_err());
    }

    #[test]
    fn correlation_matrices_well_formed() {
        let obs = grid(5, 6);
        for k in CorrelationKind::ALL {
            let c = build_correlation(&CorrelationFunction::new(k, 120.0).unwrap(), &obs);
            assert_eq!(c.symmetry_defect().2, 0.0);
            for i in 0..c.nrows() {
                assert_eq!(c[(i, i)], 1.0);
                assert!(c.row(i).iter().all(|&v| v > 0.0 && v <= 1.0));
            }
        }
    }

    #[test]
    fn covariance_scaling() {
        let c = DenseMatrix::identity(2);
        assert_eq!(build_covariance(&c, &[2.0, 3.0]).unwrap().matrix(), &DenseMatrix::from_diagonal(&[4.0, 9.0]));
        let obs = grid(3, 4);
        let corr = build_correlation(&soar(80.0), &obs);
        assert_eq!(build_covariance(&corr, &[1.0; 12]).unwrap().matrix(), &corr);
        let sd: Vec<f64> = (0..12).map(|i| 0.5 + i as f64 * 0.1).collect();
        let model = build_covariance(&corr, &sd).unwrap();
        assert!(model.correlation_matrix().sub(&corr).max_abs() <= 1e-12);
        assert!(matches!(build_covariance(&corr, &[1.0]), Err(CovError::DimensionMismatch { .. })));
        assert!(matches!(build_covariance(&c, &[1.0, 0.0]), Err(CovError::BadStddev { index: 1, .. })));
    }

    #[test]
    fn rr_two_by_two() {
        let rr = recondition_rr(&two_by_two(), 2.0).unwrap();
        let rec = rr.recondition_record().unwrap();
        assert!(rec.applied);
        assert_relative_eq!(rec.parameter, 0.5, epsilon = 1e-14);
        let e = numkernel::sym_eigenvalues(rr.matrix()).unwrap();
        assert_relative_eq!(e[0], 2.0, epsilon = 1e-12);
        assert_relative_eq!(e[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn rr_noop_when_already_conditioned() {
        assert_eq!(ridge_shift(3.0, 1.0, 3.0), 0.0);
        let rr = recondition_rr(&two_by_two(), 3.0).unwrap();
        let rec = rr.recondition_record().unwrap();
        assert!(!rec.applied);
        assert_eq!(rec.parameter, 0.0);
        assert_eq!(rr.matrix(), two_by_two().matrix());
    }

    #[test]
    fn me_two_by_two() {
        let me = recondition_me(&two_by_two(), 2.0).unwrap();
        assert_relative_eq!(me.recondition_record().unwrap().parameter, 0.75, epsilon = 1e-14);
        let want = DenseMatrix::from_rows(&[[1.125, 0.375], [0.375, 1.125]]);
        assert!(me.matrix().sub(&want).max_abs() < 1e-12);
    }

    #[test]
    fn me_noop_when_above_threshold() {
        let me = recondition_me(&two_by_two(), 5.0).unwrap();
        assert!(!me.recondition_record().unwrap().applied);
        assert!(me.matrix().sub(two_by_two().matrix()).max_abs() <= 1e-12);
    }

    #[test]
    fn rr_and_me_hit_target_on_soar() {
        let model = CovarianceModel::uniform(soar(80.0), &grid(12, 12), 1.0).unwrap();
        for kappa in [100.0, 1000.0] {
            for method in [ReconditionMethod::RidgeRegression, ReconditionMethod::MinimumEigenvalue] {
                let r = Recondition::new(method, kappa).unwrap().apply(&model).unwrap();
                assert!(r.recondition_record().unwrap().applied);
                assert_relative_eq!(r.condition_number().unwrap(), kappa, max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn me_preserves_eigenvectors() {
        let model = CovarianceModel::uniform(soar(80.0), &grid(6, 6), 1.0).unwrap();
        let me = recondition_me(&model, 50.0).unwrap();
        let before = numkernel::sym_eig(model.matrix()).unwrap();
        let after = numkernel::sym_eig(me.matrix()).unwrap();
        let threshold = before.max() / 50.0;
        for k in 0..before.values.len() {
            assert!((after.values[k] - before.values[k].max(threshold)).abs() < 1e-8);
            // Only eigenvectors of distinct, unclamped eigenvalues are unique.
            if before.values[k] > threshold * 1.01 {
                let d: f64 = (0..36).map(|i| before.vectors[(i, k)] * after.vectors[(i, k)]).sum();
                assert!((d.abs() - 1.0).abs() < 1e-8, "eigenvector {k}: |dot| = {}", d.abs());
            }
        }
    }

    #[test]
    fn inverse_examples() {
        let id = build_covariance(&DenseMatrix::identity(3), &[1.0; 3]).unwrap();
        assert_eq!(inverse_weighting(&id).unwrap(), DenseMatrix::identity(3));
        let d = build_covariance(&DenseMatrix::identity(1), &[2.0]).unwrap();
        assert_eq!(inverse_weighting(&d).unwrap(), DenseMatrix::from_diagonal(&[0.25]));
    }

    #[test]
    fn inverse_residual_soar_576() {
        let model = CovarianceModel::uniform(soar(80.0), &grid(24, 24), 1.0).unwrap();
        let a = inverse_weighting(&model).unwrap();
        let prod = a.matmul(model.matrix());
        let id = DenseMatrix::identity(576);
        assert!(prod.sub(&id).frobenius_norm() / id.frobenius_norm() < 1e-8);
    }

    #[test]
    fn raw_gaussian_needs_reconditioning() {
        let model = CovarianceModel::uniform(
            CorrelationFunction::new(CorrelationKind::Gaussian, 80.0).unwrap(),
            &grid(24, 24),
            1.0,
        )
        .unwrap();
        assert!(matches!(
            inverse_weighting(&model),
            Err(CovError::Linalg(LinalgError::NotPositiveDefinite { .. }))
        ));
        let rr = recondition_rr(&model, 1000.0).unwrap();
        assert!(inverse_weighting(&rr).is_ok());
    }

    #[test]
    fn appendix_inequality_two_by_two() {
        let a_rr = inverse_weighting(&recondition_rr(&two_by_two(), 2.0).unwrap()).unwrap();
        let a_me = inverse_weighting(&recondition_me(&two_by_two(), 2.0).unwrap()).unwrap();
        let s_rr = numkernel::singular_values(&a_rr).unwrap()[0];
        let s_me = numkernel::singular_values(&a_me).unwrap()[0];
        assert_relative_eq!(s_rr, 1.0, epsilon = 1e-12);
        assert_relative_eq!(s_me, 4.0 / 3.0, epsilon = 1e-12);
        assert!(s_rr < s_me);
    }

    #[test]
    fn identity_has_zero_far_field_spectra() {
        let obs = grid(8, 8);
        let tree = BoxTree::build(&obs, 3).unwrap();
        let facts = singular_value_facts(&DenseMatrix::identity(64), &tree, 2).unwrap();
        assert!(facts.boxes.iter().all(|b| b.values.iter().all(|&s| s == 0.0)));
        assert_eq!(facts.mean_next, Some(0.0));
        assert_relative_eq!(facts.sigma_max(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn box_spectra_bounded_by_matrix_spectrum() {
        let obs = grid(12, 12);
        let tree = BoxTree::build(&obs, 3).unwrap();
        let a = inverse_weighting(&CovarianceModel::uniform(soar(200.0), &obs, 1.0).unwrap()).unwrap();
        let facts = singular_value_facts(&a, &tree, 3).unwrap();
        assert!(facts.mean_next.unwrap() > 0.0);
        for b in &facts.boxes {
            for (i, s) in b.values.iter().enumerate() {
                assert!(*s <= facts.matrix_values[i] * (1.0 + 1e-10));
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn rr_shifts_every_eigenvalue(seed in any::<u64>(), l in 40.0f64..300.0, kappa in 5.0f64..200.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts = (0..20).map(|_| GeoPoint::new(rng.random_range(54.0..60.0), rng.random_range(-6.0..6.0))).collect();
            let obs = ObservationSet::new(pts).unwrap();
            let model = CovarianceModel::uniform(soar(l), &obs, 1.0).unwrap();
            let rr = recondition_rr(&model, kappa).unwrap();
            let rec = rr.recondition_record().unwrap();
            let before = numkernel::sym_eigenvalues(model.matrix()).unwrap();
            let after = numkernel::sym_eigenvalues(rr.matrix()).unwrap();
            for (b, a) in before.iter().zip(&after) {
                prop_assert!((a - (b + rec.parameter)).abs() < 1e-8);
            }
        }
    }
}
