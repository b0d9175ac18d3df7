//! Experiment engine: observation grids, departure sampling, accuracy metrics
//! and the parameter sweeps that compare the fast apply with the dense product.
//!
//! Seeding: every sweep point gets `split_seed(master, point_index)`.
//! Realization `r` of a point draws from a ChaCha8 stream seeded with the point
//! seed on stream `r`, so realizations can run in any order. Observation
//! removal for a point uses `split_seed(point_seed, REMOVAL_STREAM)`.

use std::time::Instant;

use log::{info, warn};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::boxtree::{BoxTree, GeoPoint, ObservationSet, TreeError};
use crate::covmodel::{
    build_correlation, inverse_weighting, CorrelationFunction, CorrelationKind, CovError, CovarianceModel,
    Recondition, ReconditionMethod,
};
use crate::numkernel::{self, Cholesky, DenseMatrix, LinalgError};
use crate::svdfmm::{report_clipping, Factorization, FmmError, FmmPlan, SvdMode};

pub mod config;
pub mod report;

/// Background error standard deviation added to `R` when sampling departures.
pub const BACKGROUND_STDDEV: f64 = 0.6;
/// Background error SOAR lengthscale in km.
pub const BACKGROUND_LENGTHSCALE_KM: f64 = 20.0;
/// Observation error standard deviation used by every experiment.
pub const OBSERVATION_STDDEV: f64 = 1.0;
/// Tree depth used by the experiments: 64 leaves, boxes 4..=83.
pub const DEFAULT_LEVELS: usize = 3;
pub const DEFAULT_REALIZATIONS: usize = 100;
pub const DEFAULT_MAX_RANK: usize = 10;
pub const DEFAULT_SEED: u64 = 20_240_601;
const REMOVAL_STREAM: u64 = u64::MAX;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Tree(#[from] TreeError),

    #[error(transparent)]
    Cov(#[from] CovError),

    #[error(transparent)]
    Fmm(#[from] FmmError),

    #[error(transparent)]
    Linalg(#[from] LinalgError),

    #[error("invalid grid: {0}")]
    BadGrid(String),

    #[error("missing fraction {0} outside [0, 1)")]
    BadFraction(f64),

    #[error("vectors differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("invalid scenario: {0}")]
    BadScenario(String),

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    /// Whether the failure came from the numerics rather than from the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            HarnessError::Linalg(_) | HarnessError::Cov(CovError::Linalg(_)) | HarnessError::Fmm(FmmError::Linalg(_))
        )
    }
}

/// Regular latitude/longitude grid, endpoints included.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
    pub n_lat: usize,
    pub n_lon: usize,
}

impl Default for GridSpec {
    /// 48 × 72 = 3456 points over 54–60°N, 6°W–6°E.
    fn default() -> Self {
        Self {
            lat_min: 54.0,
            lat_max: 60.0,
            lon_min: -6.0,
            lon_max: 6.0,
            n_lat: 48,
            n_lon: 72,
        }
    }
}

impl GridSpec {
    /// 24 × 24 = 576 points: the south-west corner of the default grid,
    /// keeping its spacing.
    pub fn reduced() -> Self {
        let full = Self::default();
        let lat_step = (full.lat_max - full.lat_min) / (full.n_lat - 1) as f64;
        let lon_step = (full.lon_max - full.lon_min) / (full.n_lon - 1) as f64;
        Self {
            lat_max: full.lat_min + 23.0 * lat_step,
            lon_max: full.lon_min + 23.0 * lon_step,
            n_lat: 24,
            n_lon: 24,
            ..full
        }
    }

    pub fn len(&self) -> usize {
        self.n_lat * self.n_lon
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn linspace(lo: f64, hi: f64, n: usize, k: usize) -> f64 {
    if k + 1 == n {
        hi
    } else {
        lo + (hi - lo) * k as f64 / (n - 1) as f64
    }
}

/// Grid points in row-major order, latitude outer.
pub fn generate_grid(spec: &GridSpec) -> Result<ObservationSet, HarnessError> {
    if spec.n_lat < 2 || spec.n_lon < 2 {
        return Err(HarnessError::BadGrid(format!("counts {}x{} must be at least 2", spec.n_lat, spec.n_lon)));
    }
    if !(spec.lat_min < spec.lat_max && spec.lon_min < spec.lon_max) {
        return Err(HarnessError::BadGrid("ranges must be increasing".into()));
    }
    let mut pts = Vec::with_capacity(spec.len());
    for i in 0..spec.n_lat {
        let lat = linspace(spec.lat_min, spec.lat_max, spec.n_lat, i);
        for j in 0..spec.n_lon {
            pts.push(GeoPoint::new(lat, linspace(spec.lon_min, spec.lon_max, spec.n_lon, j)));
        }
    }
    Ok(ObservationSet::new(pts)?)
}

/// `k`-th output of a SplitMix64 generator started at `master`.
pub fn split_seed(master: u64, k: u64) -> u64 {
    let mut z = master.wrapping_add(k.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Rng for realization `r` of a sweep point.
pub fn realization_rng(point_seed: u64, r: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(point_seed);
    rng.set_stream(r);
    rng
}

/// `0.36 · SOAR(20 km)` over `obs`.
pub fn background_covariance(obs: &ObservationSet) -> DenseMatrix {
    let soar = CorrelationFunction::new(CorrelationKind::Soar, BACKGROUND_LENGTHSCALE_KM).expect("positive lengthscale");
    let mut b = build_correlation(&soar, obs);
    let var = BACKGROUND_STDDEV * BACKGROUND_STDDEV;
    for i in 0..b.nrows() {
        for j in 0..b.ncols() {
            b[(i, j)] *= var;
        }
    }
    b
}

/// Draws departures from `N(0, R + B)`.
#[derive(Clone, Debug)]
pub struct DepartureSampler {
    chol: Cholesky,
}

impl DepartureSampler {
    pub fn new(r: &CovarianceModel, obs: &ObservationSet) -> Result<Self, HarnessError> {
        if r.dim() != obs.len() {
            return Err(HarnessError::LengthMismatch(r.dim(), obs.len()));
        }
        let b = background_covariance(obs);
        let mut total = r.matrix().clone();
        for i in 0..total.nrows() {
            for j in 0..total.ncols() {
                total[(i, j)] += b[(i, j)];
            }
        }
        Ok(Self {
            chol: Cholesky::factor(&total)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.chol.lower().nrows()
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        numkernel::sample_with(&self.chol, rng)
    }
}

/// `n` departures for a fixed seed, realization `r` on stream `r`.
pub fn sample_departures(
    r: &CovarianceModel,
    obs: &ObservationSet,
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>, HarnessError> {
    let sampler = DepartureSampler::new(r, obs)?;
    Ok((0..n as u64).map(|k| sampler.sample(&mut realization_rng(seed, k))).collect())
}

/// Base-10 log of the RMSE, or `Exact` when the vectors coincide.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LogRmse {
    Value(f64),
    Exact,
}

impl LogRmse {
    pub fn value(self) -> Option<f64> {
        match self {
            LogRmse::Value(v) => Some(v),
            LogRmse::Exact => None,
        }
    }
}

pub fn log_rmse(q_fmm: &[f64], q_ref: &[f64]) -> Result<LogRmse, HarnessError> {
    if q_fmm.len() != q_ref.len() || q_ref.is_empty() {
        return Err(HarnessError::LengthMismatch(q_fmm.len(), q_ref.len()));
    }
    let sum: f64 = q_fmm.iter().zip(q_ref).map(|(a, b)| (a - b) * (a - b)).sum();
    if sum == 0.0 {
        return Ok(LogRmse::Exact);
    }
    Ok(LogRmse::Value((sum / q_ref.len() as f64).sqrt().log10()))
}

/// Removes `round(fraction · m)` uniformly chosen observations. Returns the
/// survivors and their ascending indices into `obs`.
pub fn remove_observations(
    obs: &ObservationSet,
    fraction: f64,
    seed: u64,
) -> Result<(ObservationSet, Vec<usize>), HarnessError> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(HarnessError::BadFraction(fraction));
    }
    let m = obs.len();
    let drop = (fraction * m as f64).round() as usize;
    let mut removed = vec![false; m];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in index::sample(&mut rng, m, drop) {
        removed[i] = true;
    }
    let kept: Vec<usize> = (0..m).filter(|&i| !removed[i]).collect();
    Ok((obs.subset(&kept)?, kept))
}

/// `½ dᵀ A d` with `A d` evaluated by the plan.
pub fn observation_cost(plan: &FmmPlan, d: &[f64]) -> Result<f64, HarnessError> {
    let q = plan.apply(d)?;
    Ok(0.5 * numkernel::dot(d, &q))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScenarioKind {
    RankSweep,
    LengthscaleSweep,
    ReconditionCompare,
    CorrelationCompare,
    MissingObs,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 5] = [
        ScenarioKind::RankSweep,
        ScenarioKind::LengthscaleSweep,
        ScenarioKind::ReconditionCompare,
        ScenarioKind::CorrelationCompare,
        ScenarioKind::MissingObs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::RankSweep => "rank-sweep",
            ScenarioKind::LengthscaleSweep => "lengthscale-sweep",
            ScenarioKind::ReconditionCompare => "recondition-compare",
            ScenarioKind::CorrelationCompare => "correlation-compare",
            ScenarioKind::MissingObs => "missing-obs",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s.trim())
    }
}

/// One matrix configuration of a sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepPoint {
    pub kind: CorrelationKind,
    pub lengthscale: f64,
    pub recondition: Option<Recondition>,
    pub missing_fraction: f64,
}

/// A sweep over the cartesian product kinds × lengthscales × reconditionings ×
/// missing fractions, each evaluated at every rank in `ranks`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentScenario {
    pub id: String,
    pub kind: ScenarioKind,
    pub kinds: Vec<CorrelationKind>,
    pub lengthscales: Vec<f64>,
    pub reconditions: Vec<Option<Recondition>>,
    pub missing_fractions: Vec<f64>,
    pub ranks: Vec<usize>,
    pub realizations: usize,
    pub seed: u64,
    pub grid: GridSpec,
    pub levels: usize,
}

fn rr(kappa: f64) -> Option<Recondition> {
    Some(Recondition::new(ReconditionMethod::RidgeRegression, kappa).expect("kappa > 1"))
}

fn me(kappa: f64) -> Option<Recondition> {
    Some(Recondition::new(ReconditionMethod::MinimumEigenvalue, kappa).expect("kappa > 1"))
}

impl ExperimentScenario {
    fn base(kind: ScenarioKind) -> Self {
        Self {
            id: kind.name().to_string(),
            kind,
            kinds: vec![CorrelationKind::Soar],
            lengthscales: vec![80.0],
            reconditions: vec![None],
            missing_fractions: vec![0.0],
            ranks: (1..=DEFAULT_MAX_RANK).collect(),
            realizations: DEFAULT_REALIZATIONS,
            seed: DEFAULT_SEED,
            grid: GridSpec::default(),
            levels: DEFAULT_LEVELS,
        }
    }

    /// FOAR and SOAR at 80 km.
    pub fn rank_sweep() -> Self {
        Self {
            kinds: vec![CorrelationKind::Foar, CorrelationKind::Soar],
            ..Self::base(ScenarioKind::RankSweep)
        }
    }

    /// SOAR at 80, 160 and 240 km.
    pub fn lengthscale_sweep() -> Self {
        Self {
            lengthscales: vec![80.0, 160.0, 240.0],
            ..Self::base(ScenarioKind::LengthscaleSweep)
        }
    }

    /// SOAR at 80 km, RR and ME to κ = 1000, 2000, 3000.
    pub fn recondition_compare() -> Self {
        Self {
            reconditions: vec![rr(1000.0), rr(2000.0), rr(3000.0), me(1000.0), me(2000.0), me(3000.0)],
            ..Self::base(ScenarioKind::ReconditionCompare)
        }
    }

    /// All four correlation functions at 80 km, RR to κ = 1000.
    pub fn correlation_compare() -> Self {
        Self {
            kinds: CorrelationKind::ALL.to_vec(),
            reconditions: vec![rr(1000.0)],
            ..Self::base(ScenarioKind::CorrelationCompare)
        }
    }

    /// SOAR at 80 km with 0, 10 and 25 % of observations removed.
    pub fn missing_obs() -> Self {
        Self {
            missing_fractions: vec![0.0, 0.1, 0.25],
            ..Self::base(ScenarioKind::MissingObs)
        }
    }

    pub fn preset(kind: ScenarioKind) -> Self {
        match kind {
            ScenarioKind::RankSweep => Self::rank_sweep(),
            ScenarioKind::LengthscaleSweep => Self::lengthscale_sweep(),
            ScenarioKind::ReconditionCompare => Self::recondition_compare(),
            ScenarioKind::CorrelationCompare => Self::correlation_compare(),
            ScenarioKind::MissingObs => Self::missing_obs(),
        }
    }

    pub fn with_grid(mut self, grid: GridSpec) -> Self {
        self.grid = grid;
        self
    }

    pub fn with_realizations(mut self, n: usize) -> Self {
        self.realizations = n;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_ranks(mut self, ranks: impl IntoIterator<Item = usize>) -> Self {
        self.ranks = ranks.into_iter().collect();
        self
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: &str| Err(HarnessError::BadScenario(msg.to_string()));
        if self.realizations == 0 {
            return bad("realization count must be at least 1");
        }
        if self.ranks.is_empty() || self.ranks.contains(&0) {
            return bad("ranks must be a non-empty list of positive integers");
        }
        if self.kinds.is_empty() || self.lengthscales.is_empty() || self.reconditions.is_empty() {
            return bad("every sweep axis needs at least one value");
        }
        if self.missing_fractions.is_empty() {
            return bad("missing fraction list is empty");
        }
        if let Some(&f) = self.missing_fractions.iter().find(|f| !(0.0..1.0).contains(*f)) {
            return Err(HarnessError::BadFraction(f));
        }
        if self.lengthscales.iter().any(|l| !(*l > 0.0)) {
            return bad("lengthscales must be positive");
        }
        Ok(())
    }

    /// Sweep points in output order.
    pub fn points(&self) -> Vec<SweepPoint> {
        let mut out = Vec::new();
        for &kind in &self.kinds {
            for &lengthscale in &self.lengthscales {
                for &recondition in &self.reconditions {
                    for &missing_fraction in &self.missing_fractions {
                        out.push(SweepPoint {
                            kind,
                            lengthscale,
                            recondition,
                            missing_fraction,
                        });
                    }
                }
            }
        }
        out
    }
}

/// One (sweep point, rank) result.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub scenario: String,
    pub family: CorrelationKind,
    pub lengthscale: f64,
    pub recondition: Option<Recondition>,
    pub missing_fraction: f64,
    pub observations: usize,
    pub p: usize,
    /// Mean over realizations of log10(RMSE), exact realizations excluded.
    pub mean_log_rmse: f64,
    /// Standard error of that mean.
    pub stderr_log_rmse: f64,
    /// log10 of the mean RMSE.
    pub log_mean_rmse: f64,
    /// log10 of the mean (p+1)-th singular value over the factored boxes.
    pub log_mean_next_singular: f64,
    pub realizations: usize,
    pub exact: usize,
    pub seed: u64,
    pub wall_time_s: f64,
    /// `ok` or `failed: <reason>`.
    pub status: String,
}

impl ResultRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    pub fn recondition_label(&self) -> String {
        self.recondition.map_or_else(|| "none".to_string(), |r| r.label())
    }
}

fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Inputs prepared for one sweep point.
pub struct PreparedPoint {
    pub observations: ObservationSet,
    pub covariance: CovarianceModel,
    pub weighting: DenseMatrix,
    pub tree: BoxTree,
}

/// Builds `R` (restricted and reconditioned as requested), `A = R⁻¹` and the
/// tree. Removal runs keep the full grid's rectangle and depth.
pub fn prepare_point(
    grid: &ObservationSet,
    levels: usize,
    point: &SweepPoint,
    point_seed: u64,
) -> Result<PreparedPoint, HarnessError> {
    let (observations, kept) = if point.missing_fraction > 0.0 {
        remove_observations(grid, point.missing_fraction, split_seed(point_seed, REMOVAL_STREAM))?
    } else {
        (grid.clone(), (0..grid.len()).collect())
    };
    let func = CorrelationFunction::new(point.kind, point.lengthscale)?;
    let mut covariance = CovarianceModel::uniform(func, grid, OBSERVATION_STDDEV)?;
    if kept.len() != grid.len() {
        covariance = covariance.restrict(&kept);
    }
    if let Some(rec) = point.recondition {
        covariance = rec.apply(&covariance)?;
    }
    let weighting = inverse_weighting(&covariance)?;
    let tree = BoxTree::build_in(&observations, grid.bounds(), levels)?;
    Ok(PreparedPoint {
        observations,
        covariance,
        weighting,
        tree,
    })
}

struct PointOutcome {
    rows: Vec<ResultRow>,
}

fn run_point(sc: &ExperimentScenario, grid: &ObservationSet, point: &SweepPoint, point_seed: u64) -> Result<PointOutcome, HarnessError> {
    let start = Instant::now();
    let prepared = prepare_point(grid, sc.levels, point, point_seed)?;
    let max_rank = *sc.ranks.iter().max().expect("validated");
    let fact = Factorization::compute(&prepared.weighting, &prepared.tree, max_rank, SvdMode::Shared)?;
    let plans: Vec<FmmPlan> = sc.ranks.iter().map(|&p| fact.plan(p)).collect::<Result<_, _>>()?;
    if let Some(last) = plans.last() {
        report_clipping(last);
    }
    let sampler = DepartureSampler::new(&prepared.covariance, &prepared.observations)?;
    let a = &prepared.weighting;

    // errors[r][k]: realization r at rank ranks[k].
    let errors: Vec<Vec<LogRmse>> = (0..sc.realizations as u64)
        .into_par_iter()
        .map(|r| {
            let d = sampler.sample(&mut realization_rng(point_seed, r));
            let q_ref = a.mul_vec(&d);
            plans
                .iter()
                .map(|plan| log_rmse(&plan.apply(&d)?, &q_ref))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<_, _>>()?;
    let elapsed = start.elapsed().as_secs_f64();

    let rows = sc
        .ranks
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            let logs: Vec<f64> = errors.iter().filter_map(|e| e[k].value()).collect();
            let exact = errors.len() - logs.len();
            let (mean, stderr) = mean_and_stderr(&logs);
            let mean_rmse = errors.iter().map(|e| e[k].value().map_or(0.0, |v| 10f64.powf(v))).sum::<f64>()
                / errors.len() as f64;
            ResultRow {
                scenario: sc.id.clone(),
                family: point.kind,
                lengthscale: point.lengthscale,
                recondition: point.recondition,
                missing_fraction: point.missing_fraction,
                observations: prepared.observations.len(),
                p,
                mean_log_rmse: mean,
                stderr_log_rmse: stderr,
                log_mean_rmse: mean_rmse.log10(),
                log_mean_next_singular: fact.mean_singular_value(p + 1).map_or(f64::NAN, f64::log10),
                realizations: sc.realizations,
                exact,
                seed: point_seed,
                wall_time_s: elapsed,
                status: "ok".to_string(),
            }
        })
        .collect();
    Ok(PointOutcome { rows })
}

/// Runs every sweep point; a failing point yields rows flagged `failed`.
pub fn run_scenario(sc: &ExperimentScenario) -> Result<Vec<ResultRow>, HarnessError> {
    sc.validate()?;
    let grid = generate_grid(&sc.grid)?;
    let mut rows = Vec::new();
    for (idx, point) in sc.points().iter().enumerate() {
        let point_seed = split_seed(sc.seed, idx as u64);
        info!(
            "{}: {} l={} {} missing={} ({} realizations)",
            sc.id,
            point.kind,
            point.lengthscale,
            point.recondition.map_or_else(|| "none".to_string(), |r| r.label()),
            point.missing_fraction,
            sc.realizations
        );
        match run_point(sc, &grid, point, point_seed) {
            Ok(out) => rows.extend(out.rows),
            Err(e) => {
                warn!("sweep point {idx} failed: {e}");
                rows.extend(sc.ranks.iter().map(|&p| ResultRow {
                    scenario: sc.id.clone(),
                    family: point.kind,
                    lengthscale: point.lengthscale,
                    recondition: point.recondition,
                    missing_fraction: point.missing_fraction,
                    observations: 0,
                    p,
                    mean_log_rmse: f64::NAN,
                    stderr_log_rmse: f64::NAN,
                    log_mean_rmse: f64::NAN,
                    log_mean_next_singular: f64::NAN,
                    realizations: sc.realizations,
                    exact: 0,
                    seed: point_seed,
                    wall_time_s: 0.0,
                    status: format!("failed: {e}"),
                }));
            }
        }
    }
    Ok(rows)
}
