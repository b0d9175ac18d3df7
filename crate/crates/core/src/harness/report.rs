//! CSV output for sweep results and plain vector files.
//!
//! Result files have a fixed header (schema version [`SCHEMA_VERSION`]); wall
//! time is appended only on request so that default output is byte-identical
//! across runs.

use std::io::{BufRead, Write};

use super::{HarnessError, ResultRow};

pub const SCHEMA_VERSION: u32 = 1;

pub const HEADER: [&str; 15] = [
    "scenario",
    "family",
    "lengthscale_km",
    "recondition",
    "missing_fraction",
    "observations",
    "p",
    "mean_log10_rmse",
    "stderr_log10_rmse",
    "log10_mean_rmse",
    "log10_mean_next_sv",
    "realizations",
    "exact",
    "seed",
    "status",
];

pub fn write_results(w: impl Write, rows: &[ResultRow], timing: bool) -> Result<(), HarnessError> {
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<&str> = HEADER.to_vec();
    if timing {
        header.push("wall_time_s");
    }
    out.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.scenario.clone(),
            r.family.name().to_string(),
            r.lengthscale.to_string(),
            r.recondition_label(),
            r.missing_fraction.to_string(),
            r.observations.to_string(),
            r.p.to_string(),
            r.mean_log_rmse.to_string(),
            r.stderr_log_rmse.to_string(),
            r.log_mean_rmse.to_string(),
            r.log_mean_next_singular.to_string(),
            r.realizations.to_string(),
            r.exact.to_string(),
            r.seed.to_string(),
            r.status.clone(),
        ];
        if timing {
            rec.push(format!("{:.3}", r.wall_time_s));
        }
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

/// One value per line, shortest round-trip formatting.
pub fn write_vector(mut w: impl Write, v: &[f64]) -> Result<(), HarnessError> {
    for x in v {
        writeln!(w, "{x:?}")?;
    }
    Ok(())
}

/// Reads one value per line; blank lines and `#` comments are skipped.
pub fn read_vector(r: impl BufRead) -> Result<Vec<f64>, HarnessError> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let v: f64 = t.parse().map_err(|_| HarnessError::Config {
            line: n + 1,
            message: format!("not a number: `{t}`"),
        })?;
        out.push(v);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covmodel::{CorrelationKind, Recondition};

    fn row() -> ResultRow {
        ResultRow {
            scenario: "rank-sweep".into(),
            family: CorrelationKind::Soar,
            lengthscale: 80.0,
            recondition: Some("rr:1000".parse::<Recondition>().unwrap()),
            missing_fraction: 0.1,
            observations: 3110,
            p: 4,
            mean_log_rmse: -2.5,
            stderr_log_rmse: 0.01,
            log_mean_rmse: -2.45,
            log_mean_next_singular: -1.25,
            realizations: 100,
            exact: 0,
            seed: 9,
            wall_time_s: 1.23456,
            status: "ok".into(),
        }
    }

    #[test]
    fn result_layout() {
        let mut buf = Vec::new();
        write_results(&mut buf, &[row()], false).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), HEADER.join(","));
        assert_eq!(lines.next().unwrap(), "rank-sweep,soar,80,rr:1000,0.1,3110,4,-2.5,0.01,-2.45,-1.25,100,0,9,ok");
        let mut buf = Vec::new();
        write_results(&mut buf, &[row()], true).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().next().unwrap().ends_with(",status,wall_time_s"));
        assert!(text.lines().nth(1).unwrap().ends_with(",ok,1.235"));
    }

    #[test]
    fn vector_roundtrip() {
        let v = vec![0.1, -3.5e-12, 1.0 / 3.0, 7.0];
        let mut buf = Vec::new();
        write_vector(&mut buf, &v).unwrap();
        assert_eq!(read_vector(buf.as_slice()).unwrap(), v);
        assert!(read_vector("1\n# note\n\nx\n".as_bytes()).is_err());
    }
}
