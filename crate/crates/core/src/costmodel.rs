//! Analytic operation counts and communication costs.
//!
//! Flop counts cover the apply phase only; the one-off SVD and operator setup
//! is not modelled. Communication times use the usual `t_s` (startup per
//! message) and `t_w` (per word) model with base-2 logarithms.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CostError {
    #[error("{name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },

    #[error("leaf occupancy {s} does not divide observation count {m}")]
    NotDivisible { m: u64, s: u64 },

    #[error("unknown scheme `{0}`")]
    UnknownScheme(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// `2m²`: direct dense product.
pub fn flops_dense(m: u64) -> u64 {
    2 * m * m
}

/// `18ms + 4mp + 64(m/s)p²` with `B = m/s` leaf boxes.
pub fn flops_svdfmm(m: u64, s: u64, p: u64) -> Result<u64, CostError> {
    if m == 0 {
        return Err(CostError::NonPositive { name: "m", value: 0.0 });
    }
    if s == 0 {
        return Err(CostError::NonPositive { name: "s", value: 0.0 });
    }
    if !m.is_multiple_of(s) {
        return Err(CostError::NotDivisible { m, s });
    }
    Ok(18 * m * s + 4 * m * p + 64 * (m / s) * p * p)
}

/// Real-valued form of [`flops_svdfmm`] for non-integer occupancies.
pub fn flops_svdfmm_real(m: f64, s: f64, p: f64) -> f64 {
    18.0 * m * s + 4.0 * m * p + 64.0 * (m / s) * p * p
}

/// Smallest `m ≤ limit` with `flops_svdfmm < flops_dense`, where the leaf
/// occupancy is `s_rule(m)`.
pub fn crossover_m(s_rule: impl Fn(u64) -> f64, p: u64, limit: u64) -> Option<u64> {
    (1..=limit).find(|&m| flops_svdfmm_real(m as f64, s_rule(m), p as f64) < flops_dense(m) as f64)
}

/// Occupancy rule for a fixed number of leaf boxes.
pub fn fixed_boxes(b: u64) -> impl Fn(u64) -> f64 {
    move |m| m as f64 / b as f64
}

/// Machine and problem parameters for the communication model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MachineParams {
    /// Startup time per message, seconds.
    pub t_s: f64,
    /// Transfer time per word, seconds.
    pub t_w: f64,
    /// Worker count, one leaf box per worker.
    pub workers: u64,
    pub rank: u64,
    pub m: u64,
}

impl MachineParams {
    /// `t_s` and `t_w` may be zero so single terms can be isolated.
    pub fn new(t_s: f64, t_w: f64, workers: u64, rank: u64, m: u64) -> Result<Self, CostError> {
        for (name, v) in [("t_s", t_s), ("t_w", t_w)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(CostError::NonPositive { name, value: v });
            }
        }
        for (name, v) in [("workers", workers), ("rank", rank), ("m", m)] {
            if v == 0 {
                return Err(CostError::NonPositive { name, value: 0.0 });
            }
        }
        Ok(Self {
            t_s,
            t_w,
            workers,
            rank,
            m,
        })
    }

    /// Mean leaf occupancy `s = m/B`.
    pub fn occupancy(&self) -> f64 {
        self.m as f64 / self.workers as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    RowWise,
    ColumnWise,
    Block2D,
    Symmetric,
    SvdFmm,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [
        Scheme::RowWise,
        Scheme::ColumnWise,
        Scheme::Block2D,
        Scheme::Symmetric,
        Scheme::SvdFmm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::RowWise => "row-wise",
            Scheme::ColumnWise => "column-wise",
            Scheme::Block2D => "block-2d",
            Scheme::Symmetric => "symmetric",
            Scheme::SvdFmm => "svd-fmm",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = CostError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scheme::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| CostError::UnknownScheme(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Operation {
    AllToAllBroadcast,
    AllToOneReduction,
    AllToAllReduction,
    OneToAllBroadcast,
    Scatter,
}

impl Operation {
    pub fn name(self) -> &'static str {
        match self {
            Operation::AllToAllBroadcast => "all-to-all broadcast",
            Operation::AllToOneReduction => "all-to-one reduction",
            Operation::AllToAllReduction => "all-to-all reduction",
            Operation::OneToAllBroadcast => "one-to-all broadcast",
            Operation::Scatter => "scatter",
        }
    }
}

/// How a tabulated quantity relates to the true cost.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bound {
    Exact,
    Approximate,
    UpperBound,
}

/// One communication operation of a scheme.
#[derive(Clone, Debug, PartialEq)]
pub struct CommRow {
    pub operation: Operation,
    pub participants: f64,
    pub message_size: f64,
    pub message_bound: Bound,
    pub message_formula: &'static str,
    pub time_seconds: f64,
    pub time_bound: Bound,
    pub time_formula: &'static str,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SchemeCost {
    pub scheme: Scheme,
    pub rows: Vec<CommRow>,
}

/// Communication operations and times of one partitioning scheme.
pub fn comm_cost(scheme: Scheme, mp: &MachineParams) -> SchemeCost {
    let (ts, tw) = (mp.t_s, mp.t_w);
    let b = mp.workers as f64;
    let m = mp.m as f64;
    let p = mp.rank as f64;
    let log_b = b.log2();
    let sqrt_b = b.sqrt();
    let broadcast_all = ts * log_b + tw * m;
    let row = |operation, participants, message_size, message_bound, message_formula, time_seconds, time_bound, time_formula| CommRow {
        operation,
        participants,
        message_size,
        message_bound,
        message_formula,
        time_seconds,
        time_bound,
        time_formula,
    };
    let rows = match scheme {
        Scheme::RowWise => vec![row(
            Operation::AllToAllBroadcast,
            b,
            m / b,
            Bound::Exact,
            "m/B",
            broadcast_all,
            Bound::Exact,
            "t_s*log(B) + t_w*m",
        )],
        Scheme::ColumnWise => vec![
            row(
                Operation::AllToOneReduction,
                b,
                m,
                Bound::Exact,
                "m",
                (ts + tw * m) * log_b,
                Bound::Exact,
                "(t_s + t_w*m)*log(B)",
            ),
            row(
                Operation::Scatter,
                b,
                m / b,
                Bound::Exact,
                "m/B",
                broadcast_all,
                Bound::Exact,
                "t_s*log(B) + t_w*m",
            ),
        ],
        Scheme::Block2D => {
            let t = (ts + tw * m / sqrt_b) * sqrt_b.log2();
            let formula = "(t_s + t_w*m/sqrt(B))*log(sqrt(B))";
            vec![
                row(Operation::OneToAllBroadcast, sqrt_b - 1.0, m / sqrt_b, Bound::Exact, "m/sqrt(B)", t, Bound::Exact, formula),
                row(Operation::AllToOneReduction, sqrt_b - 1.0, m / sqrt_b, Bound::Exact, "m/sqrt(B)", t, Bound::Exact, formula),
            ]
        }
        Scheme::Symmetric => {
            let formula = "t_s*log(B) + t_w*m";
            vec![
                row(Operation::AllToAllBroadcast, b, m / b, Bound::Approximate, "m/B", broadcast_all, Bound::UpperBound, formula),
                row(Operation::AllToAllReduction, b, m / b, Bound::Approximate, "m/B", broadcast_all, Bound::UpperBound, formula),
            ]
        }
        Scheme::SvdFmm => {
            let t = (ts + tw * p) * 4f64.log2();
            vec![
                row(Operation::AllToOneReduction, 4.0, p, Bound::Exact, "p", t, Bound::Exact, "(t_s + t_w*p)*log(4)"),
                row(
                    Operation::AllToAllBroadcast,
                    b,
                    (2.0 * p).max(m / b),
                    Bound::UpperBound,
                    "max(2p, m/B)",
                    broadcast_all,
                    Bound::UpperBound,
                    "t_s*log(B) + t_w*m",
                ),
                row(Operation::OneToAllBroadcast, 4.0, p, Bound::Exact, "p", t, Bound::Exact, "(t_s + t_w*p)*log(4)"),
            ]
        }
    };
    SchemeCost { scheme, rows }
}

/// All five schemes in table order.
pub fn comm_table(mp: &MachineParams) -> Vec<SchemeCost> {
    Scheme::ALL.into_iter().map(|s| comm_cost(s, mp)).collect()
}

/// CSV with columns scheme, operation, participants, message_size,
/// time_seconds, time_is_upper_bound.
pub fn write_cost_csv(w: impl Write, table: &[SchemeCost]) -> Result<(), CostError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["scheme", "operation", "participants", "message_size", "time_seconds", "time_is_upper_bound"])?;
    for sc in table {
        for r in &sc.rows {
            out.write_record([
                sc.scheme.name().to_string(),
                r.operation.name().to_string(),
                r.participants.to_string(),
                r.message_size.to_string(),
                r.time_seconds.to_string(),
                (r.time_bound == Bound::UpperBound).to_string(),
            ])?;
        }
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}
