//! `obsfmm` command-line tool.
//!
//! Exit codes: 0 success, 2 argument or I/O error, 3 numerical failure.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use obsfmm::boxtree::{BoxTree, GeoPoint, ObservationSet};
use obsfmm::costmodel::{comm_table, write_cost_csv, MachineParams};
use obsfmm::covmodel::io::{load_model, save_model, MatrixRole};
use obsfmm::covmodel::{inverse_weighting, CorrelationFunction, CorrelationKind, CovError, CovarianceModel, Recondition, ReconditionMethod};
use obsfmm::harness::config::parse_scenario;
use obsfmm::harness::report::{read_vector, write_results, write_vector};
use obsfmm::harness::{generate_grid, log_rmse, realization_rng, run_scenario, DepartureSampler, GridSpec, HarnessError, LogRmse, DEFAULT_SEED};
use obsfmm::numkernel::LinalgError;
use obsfmm::svdfmm::io::{load_plan, save_plan};
use obsfmm::svdfmm::{plan_build, report_clipping, FmmError};

#[derive(Parser)]
#[command(name = "obsfmm", version, about = "Fast products of inverse observation-error covariance matrices")]
struct Cli {
    /// Master seed for every random choice. Overrides a scenario file's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a regular observation grid as CSV (lat,lon).
    Grid {
        #[arg(long, default_value_t = 48)]
        lat_count: usize,
        #[arg(long, default_value_t = 72)]
        lon_count: usize,
        #[arg(long, num_args = 2, value_names = ["MIN", "MAX"], default_values_t = [54.0, 60.0], allow_negative_numbers = true)]
        lat_range: Vec<f64>,
        #[arg(long, num_args = 2, value_names = ["MIN", "MAX"], default_values_t = [-6.0, 6.0], allow_negative_numbers = true)]
        lon_range: Vec<f64>,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build R = DCD from an observation file.
    BuildCov {
        #[arg(long)]
        obs: PathBuf,
        /// gaussian, foar, soar or matern52.
        #[arg(long)]
        kind: CorrelationKind,
        /// Lengthscale in km.
        #[arg(long)]
        lengthscale: f64,
        #[arg(long, default_value_t = 1.0)]
        stddev: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recondition a covariance matrix to a target condition number.
    Recondition {
        #[arg(long)]
        input: PathBuf,
        /// rr (ridge regression) or me (minimum eigenvalue).
        #[arg(long)]
        method: ReconditionMethod,
        #[arg(long)]
        kappa: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Invert a covariance matrix into the weighting matrix A.
    Invert {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a rank-p plan for A over the observation tree.
    Plan {
        /// Weighting matrix written by `invert`.
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long)]
        obs: PathBuf,
        #[arg(long)]
        rank: usize,
        #[arg(long, default_value_t = 3)]
        levels: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply a plan to a vector file (one value per line).
    Apply {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        vector: PathBuf,
        /// Also compute the dense product with this weighting matrix and report log10(RMSE).
        #[arg(long)]
        check: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the communication-cost table as CSV.
    CostModel {
        #[arg(long)]
        ts: f64,
        #[arg(long)]
        tw: f64,
        #[arg(long, default_value_t = 64)]
        workers: u64,
        #[arg(long, default_value_t = 10)]
        rank: u64,
        #[arg(long, default_value_t = 3456)]
        m: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a scenario file and write result rows as CSV.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        /// Append a wall-time column (makes output non-deterministic).
        #[arg(long)]
        timing: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print box occupancy of the tree over an observation file.
    Tree {
        #[arg(long)]
        obs: PathBuf,
        #[arg(long, default_value_t = 3)]
        levels: usize,
    },
    /// Draw one departure vector from N(0, R + B).
    SampleDepartures {
        #[arg(long)]
        cov: PathBuf,
        #[arg(long)]
        obs: PathBuf,
        /// Realization index; each index is an independent stream of the seed.
        #[arg(long, default_value_t = 0)]
        realization: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_obs(w: impl Write, obs: &ObservationSet) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["lat", "lon"])?;
    for p in obs.points() {
        out.write_record([format!("{:?}", p.lat), format!("{:?}", p.lon)])?;
    }
    out.flush()?;
    Ok(())
}

fn read_obs(path: &Path) -> Result<ObservationSet> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut pts = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != 2 {
            bail!("{}: expected two columns lat,lon", path.display());
        }
        let lat: f64 = rec[0].trim().parse().with_context(|| format!("bad latitude `{}`", &rec[0]))?;
        let lon: f64 = rec[1].trim().parse().with_context(|| format!("bad longitude `{}`", &rec[1]))?;
        pts.push(GeoPoint::new(lat, lon));
    }
    Ok(ObservationSet::new(pts)?)
}

fn read_vector_file(path: &Path) -> Result<Vec<f64>> {
    let f = File::open(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(read_vector(BufReader::new(f))?)
}

fn role_name(role: MatrixRole) -> &'static str {
    match role {
        MatrixRole::Covariance => "a covariance matrix R",
        MatrixRole::InverseWeighting => "a weighting matrix A",
    }
}

fn load_role(path: &Path, want: MatrixRole) -> Result<CovarianceModel> {
    let (role, model) = load_model(path).with_context(|| format!("reading {}", path.display()))?;
    if role != want {
        bail!("{} holds {}, expected {}", path.display(), role_name(role), role_name(want));
    }
    Ok(model)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Grid {
            lat_count,
            lon_count,
            lat_range,
            lon_range,
            out,
        } => {
            let spec = GridSpec {
                lat_min: lat_range[0],
                lat_max: lat_range[1],
                lon_min: lon_range[0],
                lon_max: lon_range[1],
                n_lat: lat_count,
                n_lon: lon_count,
            };
            write_obs(output(out.as_deref())?, &generate_grid(&spec)?)
        }
        Command::BuildCov {
            obs,
            kind,
            lengthscale,
            stddev,
            out,
        } => {
            let obs = read_obs(&obs)?;
            let func = CorrelationFunction::new(kind, lengthscale)?;
            let model = CovarianceModel::uniform(func, &obs, stddev)?;
            save_model(&out, MatrixRole::Covariance, &model)?;
            Ok(())
        }
        Command::Recondition {
            input,
            method,
            kappa,
            out,
        } => {
            let model = load_role(&input, MatrixRole::Covariance)?;
            let rec = Recondition::new(method, kappa)?.apply(&model)?;
            if let Some(r) = rec.recondition_record() {
                eprintln!("{} parameter {:e} (applied: {})", method.short_name(), r.parameter, r.applied);
            }
            save_model(&out, MatrixRole::Covariance, &rec)?;
            Ok(())
        }
        Command::Invert { input, out } => {
            let model = load_role(&input, MatrixRole::Covariance)?;
            let a = inverse_weighting(&model)?;
            let stored = model.with_matrix(a);
            save_model(&out, MatrixRole::InverseWeighting, &stored)?;
            Ok(())
        }
        Command::Plan {
            matrix,
            obs,
            rank,
            levels,
            out,
        } => {
            let a = load_role(&matrix, MatrixRole::InverseWeighting)?;
            let obs = read_obs(&obs)?;
            let tree = BoxTree::build(&obs, levels)?;
            let plan = plan_build(a.matrix(), &tree, rank)?;
            report_clipping(&plan);
            save_plan(&out, &plan)?;
            Ok(())
        }
        Command::Apply {
            plan,
            vector,
            check,
            out,
        } => {
            let plan = load_plan(&plan).with_context(|| format!("reading {}", plan.display()))?;
            let d = read_vector_file(&vector)?;
            let q = plan.apply(&d)?;
            if let Some(path) = check {
                let a = load_role(&path, MatrixRole::InverseWeighting)?;
                match log_rmse(&q, &a.matrix().mul_vec(&d))? {
                    LogRmse::Value(v) => eprintln!("log10(RMSE) = {v}"),
                    LogRmse::Exact => eprintln!("log10(RMSE): exact"),
                }
            }
            let mut w = output(out.as_deref())?;
            write_vector(&mut w, &q)?;
            w.flush()?;
            Ok(())
        }
        Command::CostModel {
            ts,
            tw,
            workers,
            rank,
            m,
            out,
        } => {
            let params = MachineParams::new(ts, tw, workers, rank, m)?;
            write_cost_csv(output(out.as_deref())?, &comm_table(&params))?;
            Ok(())
        }
        Command::Experiment { config, timing, out } => {
            let text = std::fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let mut sc = parse_scenario(&text)?;
            if let Some(seed) = cli.seed {
                sc.seed = seed;
            }
            let rows = run_scenario(&sc)?;
            write_results(output(out.as_deref())?, &rows, timing)?;
            let failed = rows.iter().filter(|r| !r.is_ok()).count();
            if failed > 0 {
                eprintln!("{failed} rows failed; see the status column");
            }
            Ok(())
        }
        Command::Tree { obs, levels } => {
            let tree = BoxTree::build(&read_obs(&obs)?, levels)?;
            let mut w = output(None)?;
            w.write_all(tree.summary_tsv().as_bytes())?;
            w.flush()?;
            Ok(())
        }
        Command::SampleDepartures {
            cov,
            obs,
            realization,
            out,
        } => {
            let model = load_role(&cov, MatrixRole::Covariance)?;
            let obs = read_obs(&obs)?;
            let sampler = DepartureSampler::new(&model, &obs)?;
            let d = sampler.sample(&mut realization_rng(cli.seed.unwrap_or(DEFAULT_SEED), realization));
            let mut w = output(out.as_deref())?;
            write_vector(&mut w, &d)?;
            w.flush()?;
            Ok(())
        }
    }
}

/// Numerical failures (definiteness, convergence) map to 3, everything else to 2.
fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err.chain().any(|e| {
        e.downcast_ref::<LinalgError>().is_some()
            || matches!(e.downcast_ref::<CovError>(), Some(CovError::Linalg(_)))
            || matches!(e.downcast_ref::<FmmError>(), Some(FmmError::Linalg(_)))
            || e.downcast_ref::<HarnessError>().is_some_and(HarnessError::is_numerical)
    });
    if numerical {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
