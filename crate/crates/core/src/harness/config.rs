//! Flat `key = value` scenario files.
//!
//! ```text
//! # Lengthscale sweep on the reduced grid
//! scenario = lengthscale-sweep
//! grid = 24x24
//! realizations = 50
//! ranks = 1..8
//! ```
//!
//! `scenario` selects a preset; every other key overrides one field. List
//! values are comma separated. Keys: `scenario`, `id`, `realizations`,
//! `seed`, `ranks` (`a..b` inclusive or a list), `grid` (`LATxLON`),
//! `lat_range`, `lon_range`, `levels`, `kinds`, `lengthscales`,
//! `recondition` (`none` or `method:kappa`), `missing`.

use std::collections::BTreeMap;

use super::{ExperimentScenario, HarnessError, ScenarioKind};
use crate::covmodel::{CorrelationKind, Recondition};

fn err(line: usize, message: impl Into<String>) -> HarnessError {
    HarnessError::Config {
        line,
        message: message.into(),
    }
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, s: &str) -> Result<T, HarnessError> {
    s.trim()
        .parse()
        .map_err(|_| err(line, format!("`{key}`: cannot parse `{}`", s.trim())))
}

fn parse_list<T>(line: usize, s: &str, f: impl Fn(&str) -> Result<T, HarnessError>) -> Result<Vec<T>, HarnessError> {
    let items: Vec<T> = s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(f).collect::<Result<_, _>>()?;
    if items.is_empty() {
        return Err(err(line, "empty list"));
    }
    Ok(items)
}

fn parse_pair(line: usize, key: &str, s: &str) -> Result<(f64, f64), HarnessError> {
    let v = parse_list(line, s, |t| parse_num::<f64>(line, key, t))?;
    match v[..] {
        [a, b] => Ok((a, b)),
        _ => Err(err(line, format!("`{key}` needs two values"))),
    }
}

fn parse_ranks(line: usize, s: &str) -> Result<Vec<usize>, HarnessError> {
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (usize, usize) = (parse_num(line, "ranks", a)?, parse_num(line, "ranks", b)?);
        if a == 0 || a > b {
            return Err(err(line, format!("bad rank range {a}..{b}")));
        }
        return Ok((a..=b).collect());
    }
    parse_list(line, s, |t| parse_num(line, "ranks", t))
}

/// Parses a scenario file. `scenario` must appear; keys may not repeat.
pub fn parse_scenario(text: &str) -> Result<ExperimentScenario, HarnessError> {
    let mut entries: BTreeMap<String, (usize, String)> = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| err(line, format!("expected `key = value`, got `{content}`")))?;
        let key = key.trim().to_ascii_lowercase();
        if entries.insert(key.clone(), (line, value.trim().to_string())).is_some() {
            return Err(err(line, format!("duplicate key `{key}`")));
        }
    }

    let (line, kind) = entries.remove("scenario").ok_or_else(|| err(0, "missing `scenario` key"))?;
    let kind = ScenarioKind::parse(&kind).ok_or_else(|| err(line, format!("unknown scenario `{kind}`")))?;
    let mut sc = ExperimentScenario::preset(kind);

    for (key, (line, value)) in entries {
        let v = value.as_str();
        match key.as_str() {
            "id" => sc.id = v.to_string(),
            "realizations" => sc.realizations = parse_num(line, &key, v)?,
            "seed" => sc.seed = parse_num(line, &key, v)?,
            "levels" => sc.levels = parse_num(line, &key, v)?,
            "ranks" => sc.ranks = parse_ranks(line, v)?,
            "grid" => {
                let (a, b) = v
                    .split_once(['x', 'X'])
                    .ok_or_else(|| err(line, "grid must look like `48x72`"))?;
                sc.grid.n_lat = parse_num(line, &key, a)?;
                sc.grid.n_lon = parse_num(line, &key, b)?;
            }
            "lat_range" => (sc.grid.lat_min, sc.grid.lat_max) = parse_pair(line, &key, v)?,
            "lon_range" => (sc.grid.lon_min, sc.grid.lon_max) = parse_pair(line, &key, v)?,
            "kinds" => {
                sc.kinds = parse_list(line, v, |t| {
                    t.parse::<CorrelationKind>().map_err(|e| err(line, e.to_string()))
                })?
            }
            "lengthscales" => sc.lengthscales = parse_list(line, v, |t| parse_num(line, &key, t))?,
            "recondition" => {
                sc.reconditions = parse_list(line, v, |t| {
                    if t.eq_ignore_ascii_case("none") {
                        Ok(None)
                    } else {
                        t.parse::<Recondition>().map(Some).map_err(|e| err(line, e.to_string()))
                    }
                })?
            }
            "missing" => sc.missing_fractions = parse_list(line, v, |t| parse_num(line, &key, t))?,
            _ => return Err(err(line, format!("unknown key `{key}`"))),
        }
    }
    sc.validate()?;
    Ok(sc)
}
