//! Batch front end: runs one experiment described by a JSON config, writes
//! result files plus a manifest, and exits 0 on success, 2 on
//! non-convergence, 1 on bad inputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use nalgebra::DVector;
use serde::Deserialize;
use serde_json::{json, Value};

use subriem::frame::{bracket_generating_rank, frame_by_id};
use subriem::grid::GridField;
use subriem::hamiltonian::LandmarkState;
use subriem::kernel::KernelSpec;
use subriem::matching::MatchProblem;
use subriem::moser::moser_transport;
use subriem::steering::{steer_point, steer_sweep, SteerConfig};

#[derive(Parser)]
#[command(name = "subriem", about = "sub-Riemannian landmark flows, steering and transport")]
struct Cli {
    /// Experiment description (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config's output_dir.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Seed for randomized checks; overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Suppress progress lines.
    #[arg(long)]
    quiet: bool,
}

#[derive(Deserialize)]
struct Config {
    schema: u32,
    command: String,
    #[serde(default)]
    output_dir: Option<PathBuf>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(flatten)]
    payload: Value,
}

#[derive(Deserialize)]
struct ShootPayload {
    kernel: KernelSpec,
    state: LandmarkState,
    #[serde(default = "default_time")]
    t_final: f64,
    #[serde(default)]
    steps: Option<usize>,
    /// Optional passive seeds; their paths and jacobians are reported too.
    #[serde(default)]
    seeds: Option<Vec<Vec<f64>>>,
}

fn default_time() -> f64 {
    1.0
}

#[derive(Deserialize)]
struct SteerPayload {
    frame: String,
    start: Vec<f64>,
    #[serde(default)]
    target: Option<Vec<f64>>,
    #[serde(default = "default_depth")]
    max_depth: usize,
    #[serde(default)]
    config: Option<SteerConfig>,
    #[serde(default)]
    sweep: Option<SweepPayload>,
}

#[derive(Deserialize)]
struct SweepPayload {
    direction: Vec<f64>,
    deltas: Vec<f64>,
}

fn default_depth() -> usize {
    2
}

#[derive(Deserialize)]
struct MoserPayload {
    frame: String,
    #[serde(default)]
    preset: Option<String>,
    #[serde(default)]
    f0_csv: Option<PathBuf>,
    #[serde(default)]
    f1_csv: Option<PathBuf>,
    #[serde(default = "default_resolution")]
    resolution: usize,
    #[serde(default = "default_n_time")]
    n_time: usize,
}

fn default_resolution() -> usize {
    64
}

fn default_n_time() -> usize {
    32
}

enum RunStatus {
    Success,
    NonConverged,
}

struct Artifacts {
    files: Vec<String>,
    residuals: BTreeMap<String, f64>,
    status: RunStatus,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(RunStatus::Success) => ExitCode::SUCCESS,
        Ok(RunStatus::NonConverged) => {
            eprintln!("did not converge (see manifest)");
            ExitCode::from(2)
        }
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: &Cli) -> Result<RunStatus, String> {
    let raw = std::fs::read(&cli.config)
        .map_err(|e| format!("cannot read {}: {e}", cli.config.display()))?;
    // line/column diagnostics come from the JSON parser itself
    let config: Config =
        serde_json::from_slice(&raw).map_err(|e| format!("malformed config: {e}"))?;
    if config.schema != 1 {
        return Err(format!("unsupported schema {}", config.schema));
    }
    let out_dir = cli
        .output
        .clone()
        .or(config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| format!("cannot create {}: {e}", out_dir.display()))?;
    let seed = cli.seed.or(config.seed).unwrap_or(0);

    let artifacts = match config.command.as_str() {
        "shoot" => run_shoot(&config.payload, &out_dir, cli.quiet)?,
        "match" => run_match(&config.payload, &out_dir, cli.quiet)?,
        "steer" => run_steer(&config.payload, &out_dir, cli.quiet)?,
        "moser" => run_moser(&config.payload, &out_dir, cli.quiet)?,
        "verify" => run_verify(seed, &out_dir, cli.quiet)?,
        other => return Err(format!("unknown command {other:?}")),
    };

    let manifest = json!({
        "schema": 1,
        "command": config.command,
        "config_hash": format!("{:016x}", fnv1a(&raw)),
        "version": env!("CARGO_PKG_VERSION"),
        "seed": seed,
        "files": artifacts.files,
        "residuals": artifacts.residuals,
        "status": match artifacts.status {
            RunStatus::Success => "ok",
            RunStatus::NonConverged => "non-converged",
        },
    });
    write_file(
        &out_dir,
        "manifest.json",
        &serde_json::to_string_pretty(&manifest).map_err(|e| e.to_string())?,
    )?;
    Ok(artifacts.status)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325_u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<(), String> {
    std::fs::write(dir.join(name), contents).map_err(|e| format!("cannot write {name}: {e}"))
}

fn parse_payload<T: for<'de> Deserialize<'de>>(payload: &Value) -> Result<T, String> {
    serde_json::from_value(payload.clone()).map_err(|e| format!("bad payload: {e}"))
}

fn to_vector(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

fn run_shoot(payload: &Value, out: &Path, quiet: bool) -> Result<Artifacts, String> {
    let p: ShootPayload = parse_payload(payload)?;
    let steps = p
        .steps
        .unwrap_or(((1000.0 * p.t_final).round() as usize).max(1));
    let mut files = Vec::new();
    let mut residuals = BTreeMap::new();

    if let Some(seed_rows) = &p.seeds {
        let seeds: Vec<DVector<f64>> = seed_rows.iter().map(|r| to_vector(r)).collect();
        let record = subriem::flow::advect(&p.kernel, &p.state, &seeds, p.t_final, steps)
            .map_err(|e| e.to_string())?;
        write_file(out, "particles.csv", &record.paths_to_csv())?;
        files.push("particles.csv".into());
        let summary = record.summary();
        if let Some(residual) = summary.pushforward_residual {
            residuals.insert("pushforward_residual".into(), residual);
        }
        residuals.insert("det_min".into(), summary.det_min);
        residuals.insert("det_max".into(), summary.det_max);
        write_file(
            out,
            "flow_summary.json",
            &serde_json::to_string_pretty(&summary).map_err(|e| e.to_string())?,
        )?;
        files.push("flow_summary.json".into());
    }

    let traj = subriem::hamiltonian::shoot(&p.kernel, &p.state, p.t_final, steps)
        .map_err(|e| e.to_string())?;
    let h = traj.inner.monitor("hamiltonian").unwrap();
    let drift = h.iter().map(|v| (v - h[0]).abs()).fold(0.0_f64, f64::max)
        / h[0].abs().max(1e-300);
    residuals.insert("energy_drift".into(), drift);
    write_file(out, "trajectory.csv", &traj.to_csv())?;
    files.push("trajectory.csv".into());
    write_file(
        out,
        "trajectory.json",
        &traj.to_json().map_err(|e| e.to_string())?,
    )?;
    files.push("trajectory.json".into());
    if !quiet {
        println!("shoot: {steps} steps, energy drift {drift:.3e}");
    }
    Ok(Artifacts {
        files,
        residuals,
        status: RunStatus::Success,
    })
}

fn run_match(payload: &Value, out: &Path, quiet: bool) -> Result<Artifacts, String> {
    let prob: MatchProblem = parse_payload(payload)?;
    let outcome = subriem::matching::match_landmarks(&prob).map_err(|e| e.to_string())?;
    let mut files = Vec::new();
    let mut residuals = BTreeMap::new();
    residuals.insert("final_objective".into(), outcome.report.final_objective);
    residuals.insert("grad_norm".into(), outcome.report.grad_norm);
    residuals.insert(
        "transversality_residual".into(),
        outcome.report.transversality_residual,
    );
    residuals.insert("endpoint_mismatch".into(), outcome.report.endpoint_mismatch);

    let p0_rows: Vec<Vec<f64>> = (0..outcome.p0.ncols())
        .map(|i| outcome.p0.column(i).iter().cloned().collect())
        .collect();
    let report = json!({
        "p0": p0_rows,
        "report": outcome.report,
    });
    write_file(
        out,
        "match_report.json",
        &serde_json::to_string_pretty(&report).map_err(|e| e.to_string())?,
    )?;
    files.push("match_report.json".into());
    write_file(out, "matched_trajectory.csv", &outcome.trajectory.to_csv())?;
    files.push("matched_trajectory.csv".into());
    if !quiet {
        println!(
            "match: {} iterations, objective {:.6e}, converged {}",
            outcome.report.iterations, outcome.report.final_objective, outcome.report.converged
        );
    }
    Ok(Artifacts {
        files,
        residuals,
        status: if outcome.report.converged {
            RunStatus::Success
        } else {
            RunStatus::NonConverged
        },
    })
}

fn run_steer(payload: &Value, out: &Path, quiet: bool) -> Result<Artifacts, String> {
    let p: SteerPayload = parse_payload(payload)?;
    let start = to_vector(&p.start);
    let frame = frame_by_id(&p.frame, start.len()).map_err(|e| e.to_string())?;
    let (rank, families) =
        bracket_generating_rank(&frame, &start, p.max_depth).map_err(|e| e.to_string())?;
    if rank < frame.dim() {
        return Err(format!(
            "frame {} spans rank {rank} < {} at the start point (depth {})",
            p.frame,
            frame.dim(),
            p.max_depth
        ));
    }
    let config = p.config.unwrap_or_default();
    let mut files = Vec::new();
    let mut residuals = BTreeMap::new();
    let mut status = RunStatus::Success;

    if let Some(target) = &p.target {
        let outcome = steer_point(&frame, &start, &to_vector(target), &families, &config)
            .map_err(|e| e.to_string())?;
        residuals.insert("target_error".into(), outcome.target_error);
        residuals.insert("length_bound".into(), outcome.plan.total_length_bound);
        write_file(
            out,
            "plan.json",
            &serde_json::to_string_pretty(&outcome.plan).map_err(|e| e.to_string())?,
        )?;
        files.push("plan.json".into());
        if !outcome.converged {
            status = RunStatus::NonConverged;
        }
        if !quiet {
            println!(
                "steer: error {:.3e}, length bound {:.3e}",
                outcome.target_error, outcome.plan.total_length_bound
            );
        }
    }

    if let Some(sweep) = &p.sweep {
        let rows = steer_sweep(
            &frame,
            &start,
            &to_vector(&sweep.direction),
            &sweep.deltas,
            &families,
            &config,
        )
        .map_err(|e| e.to_string())?;
        let mut csv = String::from("delta,target_error,length_bound\n");
        for row in &rows {
            csv.push_str(&format!(
                "{},{},{}\n",
                row.delta, row.target_error, row.length_bound
            ));
        }
        write_file(out, "sweep.csv", &csv)?;
        files.push("sweep.csv".into());
        if rows.iter().any(|r| r.target_error > config.target_tol) {
            status = RunStatus::NonConverged;
        }
    }
    Ok(Artifacts {
        files,
        residuals,
        status,
    })
}

fn run_moser(payload: &Value, out: &Path, quiet: bool) -> Result<Artifacts, String> {
    let p: MoserPayload = parse_payload(payload)?;
    let (f0, f1) = match (&p.preset, &p.f0_csv, &p.f1_csv) {
        (Some(name), None, None) => match name.as_str() {
            "translation" => subriem::presets::moser_translation_densities(p.resolution),
            "torus_sine" => subriem::presets::moser_torus_sine_densities(p.resolution),
            other => return Err(format!("unknown moser preset {other:?}")),
        },
        (None, Some(f0_path), Some(f1_path)) => {
            let read = |path: &Path| -> Result<GridField, String> {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
                GridField::from_csv(&text).map_err(|e| e.to_string())
            };
            (read(f0_path)?, read(f1_path)?)
        }
        _ => {
            return Err("provide either \"preset\" or both \"f0_csv\" and \"f1_csv\"".into());
        }
    };
    let frame = frame_by_id(&p.frame, f0.dim()).map_err(|e| e.to_string())?;
    let result = match moser_transport(&frame, &f0, &f1, p.n_time) {
        Ok(r) => r,
        Err(subriem::Error::SolveNonConverged(n)) => {
            return Ok(Artifacts {
                files: vec![],
                residuals: BTreeMap::from([("cg_iteration_cap".into(), n as f64)]),
                status: RunStatus::NonConverged,
            })
        }
        Err(e) => return Err(e.to_string()),
    };
    let mut files = Vec::new();
    let mut residuals = BTreeMap::new();
    residuals.insert("transport_error".into(), result.error);
    residuals.insert("mass_drift".into(), result.mass_drift);
    residuals.insert("det_min".into(), result.det_range.0);
    write_file(out, "achieved.csv", &result.achieved.to_csv())?;
    files.push("achieved.csv".into());
    // diagnostic Eulerian view: scatter the mass parcels back to the grid
    let cell = f0.cell_volume();
    let masses: Vec<f64> = (0..f0.node_count()).map(|i| f0.get(i, 0) * cell).collect();
    let resampled =
        GridField::scatter_density(f0.resolution(), f0.dim(), &result.positions, &masses);
    write_file(out, "achieved_grid.csv", &resampled.to_csv())?;
    files.push("achieved_grid.csv".into());
    let report = result.report(f0.resolution(), p.n_time);
    write_file(
        out,
        "moser_report.json",
        &serde_json::to_string_pretty(&report).map_err(|e| e.to_string())?,
    )?;
    files.push("moser_report.json".into());
    if !quiet {
        println!(
            "moser: error {:.3e}, mass drift {:.3e}",
            result.error, result.mass_drift
        );
    }
    Ok(Artifacts {
        files,
        residuals,
        status: RunStatus::Success,
    })
}

fn run_verify(seed: u64, out: &Path, quiet: bool) -> Result<Artifacts, String> {
    let checks = subriem::verify::run_suite(seed).map_err(|e| e.to_string())?;
    let mut residuals = BTreeMap::new();
    let mut all_pass = true;
    for check in &checks {
        residuals.insert(check.name.clone(), check.residual);
        all_pass &= check.pass;
        if !quiet {
            println!(
                "{} {}: {:.3e} (bound {:.1e})",
                if check.pass { "pass" } else { "FAIL" },
                check.name,
                check.residual,
                check.threshold
            );
        }
    }
    write_file(
        out,
        "verify.json",
        &serde_json::to_string_pretty(&checks).map_err(|e| e.to_string())?,
    )?;
    Ok(Artifacts {
        files: vec!["verify.json".into()],
        residuals,
        status: if all_pass {
            RunStatus::Success
        } else {
            RunStatus::NonConverged
        },
    })
}
