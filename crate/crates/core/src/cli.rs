//! Command-line front door: loads models, dispatches the solve / verify /
//! attain / master commands, and writes CSV/JSON artifacts.
//!
//! Exit codes: 0 on success, 1 on validation or configuration errors, 2
//! when a solve does not converge or an attainability run produces an empty
//! cloud — partial artifacts are still written with diagnostics.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use crate::attainability::{backward_sample, forward_enrich, SampleOptions};
use crate::dynamics::roll_bundle;
use crate::master::{build_field_from_solver, residual_sweep, FieldBuildOptions, MasterField};
use crate::model::{resolve_model, GameModel, SimplexVector};
use crate::reformulation::{verify_solution, Tolerances};
use crate::relaxed::RelaxedStrategyProfile;
use crate::report;
use crate::solver::{multi_start_solve, solve_fictitious_play, solve_picard, SolveOptions};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "mfg-fsolve",
    version,
    about = "Solver and certificate toolkit for continuous-time finite-state mean field games"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Worker pool size (default: machine parallelism). Falls back to the
    /// MFG_FSOLVE_JOBS environment variable.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Args, Clone)]
pub struct QueryArgs {
    /// Model file path or `builtin:<name>` (two-state-switch,
    /// crowd-aversion-d3).
    #[arg(long)]
    pub model: String,

    /// Initial time.
    #[arg(long, default_value_t = 0.0)]
    pub t0: f64,

    /// Initial distribution, comma separated, e.g. `1,0`.
    #[arg(long)]
    pub m0: String,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute an equilibrium candidate and certify it.
    Solve {
        #[command(flatten)]
        query: QueryArgs,
        /// Integration intervals.
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        /// Iteration budget.
        #[arg(long, default_value_t = 2000)]
        iters: usize,
        /// Exploitability tolerance for the certificate.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Finite-difference residual tolerance.
        #[arg(long, default_value_t = 1e-6)]
        tol_residual: f64,
        /// Support-violation tolerance.
        #[arg(long, default_value_t = 1e-6)]
        tol_support: f64,
        /// Multi-start runs; 1 = single fictitious play from uniform.
        #[arg(long, default_value_t = 1)]
        starts: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Iteration scheme: fictitious-play or picard.
        #[arg(long, default_value = "fictitious-play")]
        scheme: String,
        /// Report JSON output path.
        #[arg(long)]
        out: PathBuf,
        /// Optional strategy CSV export.
        #[arg(long)]
        profile_out: Option<PathBuf>,
        /// Optional trajectory CSV export.
        #[arg(long)]
        trajectory_out: Option<PathBuf>,
    },
    /// Certify a strategy profile supplied as CSV.
    Verify {
        #[command(flatten)]
        query: QueryArgs,
        /// Profile CSV (as written by `solve --profile-out`).
        #[arg(long)]
        profile: PathBuf,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 1e-6)]
        tol_residual: f64,
        #[arg(long, default_value_t = 1e-6)]
        tol_support: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Roll the coupled trajectories under a profile and export them.
    Trajectory {
        #[command(flatten)]
        query: QueryArgs,
        /// Profile CSV; uniform weights when omitted.
        #[arg(long)]
        profile: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Approximate the value set by backward sampling (plus optional
    /// forward enrichment).
    Attain {
        #[command(flatten)]
        query: QueryArgs,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 8)]
        macro_k: usize,
        /// Fine integration intervals per sample.
        #[arg(long, default_value_t = 400)]
        steps: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 5e-2)]
        tol_m: f64,
        #[arg(long, default_value_t = 5e-2)]
        tol_mu: f64,
        #[arg(long, default_value_t = 1e-3)]
        tol_z: f64,
        /// Forward-enrichment multi-start runs; 0 disables enrichment.
        #[arg(long, default_value_t = 0)]
        starts: usize,
        /// Integration intervals for enrichment solves.
        #[arg(long, default_value_t = 1000)]
        solve_steps: usize,
        /// Iteration budget for enrichment solves.
        #[arg(long, default_value_t = 2000)]
        iters: usize,
        /// Cloud CSV output path.
        #[arg(long)]
        out: PathBuf,
        /// Sidecar JSON path (defaults to `<out>.meta.json`).
        #[arg(long)]
        sidecar: Option<PathBuf>,
    },
    /// Build a value field by solving at every grid node.
    MasterBuild {
        /// Model file path or `builtin:<name>`.
        #[arg(long)]
        model: String,
        /// Time nodes (>= 3).
        #[arg(long, default_value_t = 5)]
        nt: usize,
        /// Mesh denominator M (mesh h = 1/M, M >= 4).
        #[arg(long, default_value_t = 4)]
        mesh: usize,
        #[arg(long, default_value_t = 4)]
        starts: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 400)]
        steps: usize,
        #[arg(long, default_value_t = 2000)]
        iters: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol_residual: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol_support: f64,
        /// Field JSON output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate master-inclusion residuals of a stored field.
    MasterCheck {
        /// Model file path or `builtin:<name>`.
        #[arg(long)]
        model: String,
        /// Field JSON produced by master-build.
        #[arg(long)]
        field: PathBuf,
        /// Residual CSV output path.
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_m0(text: &str, model: &GameModel) -> Result<SimplexVector> {
    let entries: Vec<f64> = text
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidInput(format!("cannot parse m0 entry '{s}'")))
        })
        .collect::<Result<_>>()?;
    if entries.len() != model.num_states() {
        return Err(Error::InvalidInput(format!(
            "m0 has {} entries, model has {} states",
            entries.len(),
            model.num_states()
        )));
    }
    SimplexVector::new(entries)
}

fn check_t0(t0: f64, model: &GameModel) -> Result<()> {
    if !(0.0..model.horizon()).contains(&t0) {
        return Err(Error::InvalidInput(format!(
            "need 0 <= t0 < T = {}, got {t0}",
            model.horizon()
        )));
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Runs a parsed command line; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let jobs = cli.jobs.or_else(|| {
        std::env::var("MFG_FSOLVE_JOBS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    let body = || match dispatch(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            1
        }
    };
    match jobs {
        Some(n) if n > 0 => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(body),
            Err(err) => {
                eprintln!("error: cannot build worker pool: {err}");
                1
            }
        },
        _ => body(),
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Solve {
            query,
            steps,
            iters,
            tol,
            tol_residual,
            tol_support,
            starts,
            seed,
            scheme,
            out,
            profile_out,
            trajectory_out,
        } => {
            let model = resolve_model(&query.model)?;
            check_t0(query.t0, &model)?;
            let m0 = parse_m0(&query.m0, &model)?;
            let tolerances = Tolerances {
                tol_j: tol,
                tol_residual,
                tol_support,
            };
            let opts = SolveOptions {
                steps,
                max_iters: iters,
                tolerances,
                seed,
                starts,
            };
            let config = serde_json::json!({
                "command": "solve", "model": query.model, "t0": query.t0, "m0": query.m0,
                "steps": steps, "iters": iters, "tol": tol, "tol_residual": tol_residual,
                "tol_support": tol_support, "starts": starts, "seed": seed, "scheme": scheme,
            });
            let reports = match scheme.as_str() {
                "picard" => {
                    if starts > 1 {
                        log::warn!("--starts is ignored for the picard scheme");
                    }
                    vec![solve_picard(&model, query.t0, &m0, &opts)?]
                }
                "fictitious-play" => {
                    if starts > 1 {
                        multi_start_solve(&model, query.t0, &m0, &opts)?
                    } else {
                        vec![solve_fictitious_play(&model, query.t0, &m0, &opts)?]
                    }
                }
                other => {
                    return Err(Error::InvalidInput(format!(
                        "unknown scheme '{other}'; use fictitious-play or picard"
                    )))
                }
            };
            let any_converged = reports.iter().any(|r| r.converged);
            let doc = serde_json::json!({
                "metadata": report::metadata(config),
                "converged": any_converged,
                "reports": reports
                    .iter()
                    .map(|r| report::solve_report_doc(r, query.t0, m0.as_slice()))
                    .collect::<Vec<Value>>(),
            });
            write_text(&out, &report::to_json_string(&doc))?;
            let best = reports
                .iter()
                .min_by(|a, b| {
                    a.certificate
                        .j
                        .abs()
                        .partial_cmp(&b.certificate.j.abs())
                        .unwrap()
                })
                .expect("at least one report");
            if let Some(path) = profile_out {
                write_text(
                    &path,
                    &report::profile_csv(&best.bundle.profile, model.controls().labels()),
                )?;
            }
            if let Some(path) = trajectory_out {
                write_text(&path, &report::trajectory_csv(&best.bundle))?;
            }
            println!(
                "solve: converged={} best J = {:.3e} ({} report{})",
                any_converged,
                best.certificate.j,
                reports.len(),
                if reports.len() == 1 { "" } else { "s" }
            );
            Ok(if any_converged { 0 } else { 2 })
        }

        Command::Verify {
            query,
            profile,
            tol,
            tol_residual,
            tol_support,
            out,
        } => {
            let model = resolve_model(&query.model)?;
            check_t0(query.t0, &model)?;
            let m0 = parse_m0(&query.m0, &model)?;
            let text = std::fs::read_to_string(&profile)?;
            let parsed = report::parse_profile_csv(&text, &model, query.t0)?;
            let mu0 = SimplexVector::uniform(model.num_states());
            let bundle = roll_bundle(&model, &parsed, query.t0, &m0, &mu0)?;
            let tolerances = Tolerances {
                tol_j: tol,
                tol_residual,
                tol_support,
            };
            let certificate = verify_solution(&model, &bundle, tolerances)?;
            let config = serde_json::json!({
                "command": "verify", "model": query.model, "t0": query.t0, "m0": query.m0,
                "profile": profile, "tol": tol, "tol_residual": tol_residual,
                "tol_support": tol_support,
            });
            let doc = serde_json::json!({
                "metadata": report::metadata(config),
                "certificate": certificate,
                "phi0": bundle.phi0(),
                "steps": bundle.num_nodes() - 1,
                "model_states": model.num_states(),
            });
            write_text(&out, &report::to_json_string(&doc))?;
            println!(
                "verify: verdict={:?} J = {:.3e}",
                certificate.verdict, certificate.j
            );
            Ok(0)
        }

        Command::Trajectory {
            query,
            profile,
            steps,
            out,
        } => {
            let model = resolve_model(&query.model)?;
            check_t0(query.t0, &model)?;
            let m0 = parse_m0(&query.m0, &model)?;
            let strategy = match profile {
                Some(path) => {
                    let text = std::fs::read_to_string(&path)?;
                    report::parse_profile_csv(&text, &model, query.t0)?
                }
                None => RelaxedStrategyProfile::uniform(&model, query.t0, model.horizon(), steps),
            };
            let mu0 = SimplexVector::uniform(model.num_states());
            let bundle = roll_bundle(&model, &strategy, query.t0, &m0, &mu0)?;
            write_text(&out, &report::trajectory_csv(&bundle))?;
            println!("trajectory: {} nodes written", bundle.num_nodes());
            Ok(0)
        }

        Command::Attain {
            query,
            samples,
            macro_k,
            steps,
            seed,
            tol_m,
            tol_mu,
            tol_z,
            starts,
            solve_steps,
            iters,
            out,
            sidecar,
        } => {
            let model = resolve_model(&query.model)?;
            check_t0(query.t0, &model)?;
            let m0 = parse_m0(&query.m0, &model)?;
            let opts = SampleOptions {
                samples,
                macro_k,
                steps,
                seed,
                tol_m,
                tol_mu,
                tol_z,
            };
            let mut cloud = backward_sample(&model, query.t0, &m0, &opts)?;
            if starts > 0 {
                let solve_opts = SolveOptions {
                    steps: solve_steps,
                    max_iters: iters,
                    tolerances: Tolerances::default(),
                    seed,
                    starts,
                };
                cloud = forward_enrich(&model, cloud, &solve_opts)?;
            }
            let config = serde_json::json!({
                "command": "attain", "model": query.model, "t0": query.t0, "m0": query.m0,
                "samples": samples, "macro_k": macro_k, "steps": steps, "seed": seed,
                "tol_m": tol_m, "tol_mu": tol_mu, "tol_z": tol_z, "starts": starts,
                "solve_steps": solve_steps, "iters": iters,
            });
            write_text(&out, &report::cloud_csv(&cloud))?;
            let sidecar_path = sidecar.unwrap_or_else(|| {
                let mut p = out.clone();
                let name = p
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "cloud.csv".into());
                p.set_file_name(format!("{name}.meta.json"));
                p
            });
            let doc = serde_json::json!({
                "metadata": report::metadata(config),
                "cloud": report::cloud_sidecar_doc(&cloud),
            });
            write_text(&sidecar_path, &report::to_json_string(&doc))?;
            println!(
                "attain: {} point{} ({} accepted, {} off-simplex)",
                cloud.points.len(),
                if cloud.points.len() == 1 { "" } else { "s" },
                cloud.accepted_before_dedup,
                cloud.samples_off_simplex
            );
            Ok(if cloud.points.is_empty() { 2 } else { 0 })
        }

        Command::MasterBuild {
            model,
            nt,
            mesh,
            starts,
            seed,
            steps,
            iters,
            tol,
            tol_residual,
            tol_support,
            out,
        } => {
            let game = resolve_model(&model)?;
            let opts = FieldBuildOptions {
                nt,
                mesh,
                starts,
                seed,
                steps,
                max_iters: iters,
                tolerances: Tolerances {
                    tol_j: tol,
                    tol_residual,
                    tol_support,
                },
            };
            let field = build_field_from_solver(&game, &opts)?;
            let config = serde_json::json!({
                "command": "master-build", "model": model, "nt": nt, "mesh": mesh,
                "starts": starts, "seed": seed, "steps": steps, "iters": iters,
                "tol": tol, "tol_residual": tol_residual, "tol_support": tol_support,
            });
            let doc = serde_json::json!({
                "metadata": report::metadata(config),
                "field": field.to_json(),
            });
            write_text(&out, &report::to_json_string(&doc))?;
            println!(
                "master-build: {} x {} nodes, {} excluded",
                field.num_time_nodes(),
                field.grid.len(),
                field.num_excluded()
            );
            Ok(0)
        }

        Command::MasterCheck { model, field, out } => {
            let game = resolve_model(&model)?;
            let text = std::fs::read_to_string(&field)?;
            let parsed: Value =
                serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
            let field_json = parsed.get("field").unwrap_or(&parsed);
            let field = MasterField::from_json(&field_json.to_string())?;
            let rows = residual_sweep(&game, &field);
            write_text(&out, &report::residual_csv(&rows))?;
            let max_res = rows.iter().filter_map(|r| r.residual).fold(0.0f64, f64::max);
            let flagged = rows.iter().filter(|r| r.flagged).count();
            println!(
                "master-check: {} rows, max residual {:.4e}, {} flagged",
                rows.len(),
                max_res,
                flagged
            );
            Ok(0)
        }
    }
}
