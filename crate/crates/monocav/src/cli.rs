//! Command-line driver: JSON experiment configs in, CSV/VTK/JSON artifacts
//! out.
//!
//! Subcommands: `forward` (simulate, write trace and diagnostics),
//! `verify-bounds` (simulate and check invariant-rectangle containment),
//! `distinguish` (pairwise misfit matrix over a cavity list), `invert`
//! (reconstruct a cavity from a measured trace), `landscape` (1D misfit
//! scan). Exit codes: 0 success, 1 containment violation with hypotheses
//! met, 2 configuration error, 3 solver failure, 4 hypotheses unmet.
//!
//! Every result JSON embeds the resolved config under `"config"`; passing a
//! result file back through `--config` reruns that exact experiment.

use crate::forward::{
    flux_compatibility, solve_forward, solve_picard, vtk_snapshot, ConductivityField, Scheme,
    SolverConfig, SolverError, Trajectory,
};
use crate::geometry::{
    build_masked_grid, check_assumptions, CavityParam, DomainSpec, GeometryError, GridGeometry,
    InitialField,
};
use crate::inverse::{
    distinguishability, landscape_scan, reconstruct, refinement_floor, ForwardProblem,
    InverseConfig, InverseError, Parametrization,
};
use crate::ionic::{IonicError, IonicModel};
use crate::measurements::{extract_trace, read_trace, write_trace, MeasureError};
use crate::nonlocal::solve_nonlocal;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Solver(String),
    #[error("{0}")]
    HypothesesUnmet(String),
    #[error("{0}")]
    ContainmentViolated(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::ContainmentViolated(_) => 1,
            CliError::Config(_) => 2,
            CliError::Solver(_) => 3,
            CliError::HypothesesUnmet(_) => 4,
        }
    }
}

impl From<GeometryError> for CliError {
    fn from(e: GeometryError) -> Self {
        CliError::Config(e.to_string())
    }
}
impl From<IonicError> for CliError {
    fn from(e: IonicError) -> Self {
        CliError::Config(e.to_string())
    }
}
impl From<SolverError> for CliError {
    fn from(e: SolverError) -> Self {
        match e {
            SolverError::BadConfig(_) | SolverError::BadConductivity(_)
            | SolverError::ShapeMismatch(_) => CliError::Config(e.to_string()),
            _ => CliError::Solver(e.to_string()),
        }
    }
}
impl From<MeasureError> for CliError {
    fn from(e: MeasureError) -> Self {
        CliError::Config(e.to_string())
    }
}
impl From<InverseError> for CliError {
    fn from(e: InverseError) -> Self {
        match e {
            InverseError::BadConfig(_) => CliError::Config(e.to_string()),
            InverseError::Geometry(g) => g.into(),
            InverseError::Solver(s) => s.into(),
            InverseError::Measure(m) => m.into(),
            InverseError::Inadmissible(_) => CliError::HypothesesUnmet(e.to_string()),
            InverseError::AllStartsFailed => CliError::Solver(e.to_string()),
        }
    }
}

/// Conductivity tensor whitelist: forms whose smoothness and ellipticity
/// are checkable at load time.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConductivitySpec {
    /// K = value * I.
    Isotropic { value: f64 },
    /// Diagonal tensor with affine entries [c0, cx, cy] -> c0 + cx x + cy y.
    Diagonal {
        kxx: [f64; 3],
        kyy: [f64; 3],
        lambda: f64,
        #[serde(default = "default_max_grad")]
        max_grad: f64,
    },
    /// Rotated-fiber tensor R(theta) diag(k_along, k_cross) R(theta)^T with
    /// linear angle field theta = t0 + tx x + ty y.
    Fiber {
        k_along: f64,
        k_cross: f64,
        theta: [f64; 3],
        lambda: f64,
        #[serde(default = "default_max_grad")]
        max_grad: f64,
    },
}

fn default_max_grad() -> f64 {
    100.0
}

impl ConductivitySpec {
    pub fn build(&self, domain: &DomainSpec) -> Result<ConductivityField, CliError> {
        match self {
            ConductivitySpec::Isotropic { value } => {
                if !(*value > 0.0 && value.is_finite()) {
                    return Err(CliError::Config(format!(
                        "conductivity value must be > 0, got {value}"
                    )));
                }
                Ok(ConductivityField::isotropic(domain, *value))
            }
            ConductivitySpec::Diagonal { kxx, kyy, lambda, max_grad } => {
                let (kxx, kyy) = (*kxx, *kyy);
                Ok(ConductivityField::build(domain, *lambda, *max_grad, move |x, y| {
                    (kxx[0] + kxx[1] * x + kxx[2] * y, 0.0, kyy[0] + kyy[1] * x + kyy[2] * y)
                })?)
            }
            ConductivitySpec::Fiber { k_along, k_cross, theta, lambda, max_grad } => {
                let (ka, kc, th) = (*k_along, *k_cross, *theta);
                if !(ka > 0.0 && kc > 0.0) {
                    return Err(CliError::Config(format!(
                        "fiber diffusivities must be > 0, got {ka} and {kc}"
                    )));
                }
                Ok(ConductivityField::build(domain, *lambda, *max_grad, move |x, y| {
                    let t = th[0] + th[1] * x + th[2] * y;
                    let (s, c) = t.sin_cos();
                    (ka * c * c + kc * s * s, (ka - kc) * s * c, ka * s * s + kc * c * c)
                })?)
            }
        }
    }
}

/// Initial-data presets for (u0, w0).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialSpec {
    /// u0 = w0 = 0.
    Zero,
    /// u0 = amplitude cos^2(pi d / (2 width)) inside the wall collar of the
    /// given width (d = distance to the outer wall); w0 = 0.
    CollarBump { amplitude: f64, width: f64 },
    /// JSON file with full-grid row-major arrays {"u": [...], "w": [...]}.
    File { path: String },
}

impl InitialSpec {
    pub fn build(&self, domain: &DomainSpec) -> Result<(InitialField, InitialField), CliError> {
        let zero = InitialField::zero(domain.nx, domain.ny);
        match self {
            InitialSpec::Zero => Ok((zero.clone(), zero)),
            InitialSpec::CollarBump { amplitude, width } => {
                if !(amplitude.is_finite() && *amplitude >= 0.0) {
                    return Err(CliError::Config(format!(
                        "collar_bump amplitude must be >= 0, got {amplitude}"
                    )));
                }
                if !(*width > 0.0 && *width <= 0.5 * domain.lx.min(domain.ly)) {
                    return Err(CliError::Config(format!(
                        "collar_bump width must lie in (0, half the domain], got {width}"
                    )));
                }
                Ok((InitialField::collar_bump(domain, *amplitude, *width), zero))
            }
            InitialSpec::File { path } => {
                #[derive(Deserialize)]
                #[serde(deny_unknown_fields)]
                struct FileFields {
                    u: Vec<f64>,
                    w: Vec<f64>,
                }
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Config(format!("{path}: {e}")))?;
                let fields: FileFields = serde_json::from_str(&text)
                    .map_err(|e| CliError::Config(format!("{path}: {e}")))?;
                let n = domain.nx * domain.ny;
                if fields.u.len() != n || fields.w.len() != n {
                    return Err(CliError::Config(format!(
                        "{path}: fields must have nx*ny = {n} values, got u: {}, w: {}",
                        fields.u.len(),
                        fields.w.len()
                    )));
                }
                Ok((
                    InitialField { nx: domain.nx, ny: domain.ny, values: fields.u },
                    InitialField { nx: domain.nx, ny: domain.ny, values: fields.w },
                ))
            }
        }
    }
}

/// 1D misfit scan request.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandscapeSpec {
    /// Axis name: center_x, center_y, radius, cos_k, sin_k.
    pub axis: String,
    pub lo: f64,
    pub hi: f64,
    pub steps: usize,
    /// Parameter vector to scan around; defaults to the configured cavity.
    #[serde(default)]
    pub base: Option<Vec<f64>>,
}

fn default_cavity() -> CavityParam {
    CavityParam::None
}
fn default_conductivity() -> ConductivitySpec {
    ConductivitySpec::Isotropic { value: 1.0 }
}
fn default_initial() -> InitialSpec {
    InitialSpec::Zero
}

/// One experiment, as a single JSON document. Unknown keys are fatal.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub domain: DomainSpec,
    #[serde(default = "default_cavity")]
    pub cavity: CavityParam,
    pub model: IonicModel,
    #[serde(default = "default_conductivity")]
    pub conductivity: ConductivitySpec,
    #[serde(default = "default_initial")]
    pub initial: InitialSpec,
    pub solver: SolverConfig,
    /// Separation parameter gating the geometric hypotheses; when present,
    /// hypothesis reports are emitted and candidates are screened.
    #[serde(default)]
    pub d0: Option<f64>,
    #[serde(default)]
    pub inverse: Option<InverseConfig>,
    #[serde(default)]
    pub landscape: Option<LandscapeSpec>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        self.domain.validate()?;
        self.cavity.validate(&self.domain)?;
        self.model.validate()?;
        self.solver.validate()?;
        if let Some(d0) = self.d0 {
            if !(d0 > 0.0 && d0 < 0.5 * self.domain.lx.min(self.domain.ly)) {
                return Err(CliError::Config(format!(
                    "d0 must lie in (0, half the domain), got {d0}"
                )));
            }
        }
        if let Some(inv) = &self.inverse {
            inv.validate()?;
        }
        if let Some(scan) = &self.landscape {
            if scan.steps < 2 {
                return Err(CliError::Config("landscape.steps must be >= 2".into()));
            }
            if !(scan.lo < scan.hi) {
                return Err(CliError::Config(format!(
                    "landscape range [{}, {}] is empty",
                    scan.lo, scan.hi
                )));
            }
        }
        Ok(())
    }
}

/// Reads a config, accepting either a bare `RunConfig` document or a result
/// JSON that embeds one under `"config"`.
pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let config_value = match (value.get("config"), value.get("version")) {
        (Some(c), Some(_)) => c.clone(),
        _ => value,
    };
    let cfg: RunConfig = serde_json::from_value(config_value)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Parser)]
#[command(name = "monocav", version, about = "Reaction-diffusion solver with insulating cavities")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args)]
pub struct CommonArgs {
    /// Experiment config (JSON); a result JSON with an embedded config also works.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Override the configured time scheme.
    #[arg(long, value_parser = parse_scheme)]
    pub scheme: Option<Scheme>,
    /// Seed for noise generation and multistart sampling.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Additive Gaussian noise level (fraction of trace max).
    #[arg(long)]
    pub noise: Option<f64>,
}

fn parse_scheme(s: &str) -> Result<Scheme, String> {
    match s {
        "imex" => Ok(Scheme::Imex),
        "picard" => Ok(Scheme::Picard),
        "nonlocal" => Ok(Scheme::Nonlocal),
        other => Err(format!("unknown scheme {other:?} (imex, picard, nonlocal)")),
    }
}

#[derive(Subcommand)]
pub enum Command {
    /// Simulate and write trace, diagnostics, and VTK snapshots.
    Forward(CommonArgs),
    /// Simulate and check invariant-rectangle containment.
    VerifyBounds(CommonArgs),
    /// Pairwise trace misfits over a cavity list.
    Distinguish {
        #[command(flatten)]
        common: CommonArgs,
        /// JSON list of candidate cavities.
        #[arg(long)]
        cavities: PathBuf,
    },
    /// Reconstruct a cavity from a measured trace.
    Invert {
        #[command(flatten)]
        common: CommonArgs,
        /// Measured trace CSV.
        #[arg(long)]
        target: PathBuf,
    },
    /// 1D misfit scan along one cavity parameter.
    Landscape {
        #[command(flatten)]
        common: CommonArgs,
        /// Measured trace CSV.
        #[arg(long)]
        target: PathBuf,
    },
}

fn version_string() -> String {
    format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

fn write_out(dir: &Path, name: &str, content: &str) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Config(format!("{}: {e}", dir.display())))?;
    let path = dir.join(name);
    std::fs::write(&path, content)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(())
}

fn write_json(dir: &Path, name: &str, value: &serde_json::Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Config(format!("serializing {name}: {e}")))?;
    text.push('\n');
    write_out(dir, name, &text)
}

struct PreparedRun {
    cfg: RunConfig,
    grid: GridGeometry,
    conductivity: ConductivityField,
    u0_field: InitialField,
    u0: Vec<f64>,
    w0: Vec<f64>,
}

fn prepare(cfg: RunConfig) -> Result<PreparedRun, CliError> {
    let grid = build_masked_grid(&cfg.domain, &cfg.cavity)?;
    let conductivity = cfg.conductivity.build(&cfg.domain)?;
    let (u0_field, w0_field) = cfg.initial.build(&cfg.domain)?;
    let u0 = u0_field.restrict(&grid);
    let w0 = w0_field.restrict(&grid);
    Ok(PreparedRun { cfg, grid, conductivity, u0_field, u0, w0 })
}

/// Runs the configured scheme; Picard also returns its iteration records.
fn run_scheme(p: &PreparedRun) -> Result<(Trajectory, Option<serde_json::Value>), CliError> {
    match p.cfg.solver.scheme {
        Scheme::Imex => {
            let traj =
                solve_forward(&p.grid, &p.conductivity, &p.cfg.model, &p.u0, &p.w0, &p.cfg.solver)?;
            Ok((traj, None))
        }
        Scheme::Picard => {
            let (traj, diag) =
                solve_picard(&p.grid, &p.conductivity, &p.cfg.model, &p.u0, &p.w0, &p.cfg.solver)?;
            let windows: Vec<serde_json::Value> = diag
                .windows
                .iter()
                .map(|w| {
                    json!({
                        "window": w.window,
                        "t_start": w.t_start,
                        "iterations": w.iters,
                        "converged": w.converged,
                        "updates": w.updates,
                        "weighted_updates": w.weighted_updates,
                        "ratios": w.ratios,
                    })
                })
                .collect();
            Ok((
                traj,
                Some(json!({
                    "kappa": diag.kappa,
                    "m1": diag.m1,
                    "m2": diag.m2,
                    "max_ratio": diag.max_ratio(),
                    "windows": windows,
                })),
            ))
        }
        Scheme::Nonlocal => {
            let traj = solve_nonlocal(
                &p.grid,
                &p.conductivity,
                &p.cfg.model,
                &p.u0,
                &p.w0,
                &p.cfg.solver,
            )?;
            Ok((traj, None))
        }
    }
}

fn trajectory_report(p: &PreparedRun, traj: &Trajectory) -> serde_json::Value {
    let rect = p.cfg.model.invariant_rectangle();
    let (min_u, max_u, min_w, max_w) = traj.observed_bounds();
    let assumptions = p.cfg.d0.map(|d0| {
        serde_json::to_value(check_assumptions(&p.grid, &p.cfg.cavity, &p.u0_field, d0))
            .expect("report serializes")
    });
    json!({
        "active_cells": p.grid.active_count,
        "cavity_cells": p.grid.cavity_cell_count(),
        "dropped_cells": p.grid.dropped_cells,
        "rectangle": { "u": [rect.u_lo, rect.u_hi], "w": [rect.w_lo, rect.w_hi] },
        "delta_s": 10.0 * (p.cfg.solver.dt + p.grid.cell_size * p.grid.cell_size),
        "observed": { "min_u": min_u, "max_u": max_u, "min_w": min_w, "max_w": max_w },
        "initial_inside_rectangle": traj.initial_inside_rectangle,
        "escape": traj.escape.as_ref().map(|e| json!({
            "step": e.step, "delta": e.delta, "worst_excess": e.worst_excess,
        })),
        "flux_compatibility": flux_compatibility(&p.grid, &p.conductivity, &p.u0),
        "assumptions": assumptions,
    })
}

fn write_snapshots(dir: &Path, p: &PreparedRun, traj: &Trajectory) -> Result<Vec<String>, CliError> {
    let mut names = Vec::new();
    let dt = p.cfg.solver.dt;
    for snap in &traj.snapshots {
        let step = (snap.t / dt).round() as usize;
        for (field, values) in [("u", &snap.u), ("w", &snap.w)] {
            let name = format!("{field}_{step:06}.vtk");
            let title = format!("{field} at t={}", snap.t);
            write_out(dir, &name, &vtk_snapshot(&p.grid, values, field, &title))?;
            names.push(name);
        }
    }
    Ok(names)
}

fn cmd_forward(args: &CommonArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&args.config)?;
    if let Some(s) = args.scheme {
        cfg.solver.scheme = s;
    }
    let p = prepare(cfg)?;
    let (traj, picard) = run_scheme(&p)?;

    let mut trace = extract_trace(&traj, &p.grid)?;
    let mut noise_report = serde_json::Value::Null;
    if let Some(sigma) = args.noise {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(CliError::Config(format!("noise level must be >= 0, got {sigma}")));
        }
        let seed = args.seed.unwrap_or(0);
        trace = trace.with_noise(sigma, seed);
        noise_report = json!({ "sigma": sigma, "seed": seed });
    }

    write_trace(&trace, &p.out_path(&args.out, "trace.csv"))
        .map_err(|e| CliError::Config(e.to_string()))?;
    write_out(&args.out, "diagnostics.csv", &traj.diagnostics_csv())?;
    let snapshots = write_snapshots(&args.out, &p, &traj)?;

    let mut report = trajectory_report(&p, &traj);
    report["picard"] = picard.unwrap_or(serde_json::Value::Null);
    write_json(
        &args.out,
        "result.json",
        &json!({
            "version": version_string(),
            "command": "forward",
            "config": &p.cfg,
            "outputs": {
                "trace": "trace.csv",
                "diagnostics": "diagnostics.csv",
                "snapshots": snapshots,
            },
            "noise": noise_report,
            "report": report,
        }),
    )?;
    println!(
        "forward: {} steps on {} active cells -> {}",
        traj.diagnostics.len(),
        p.grid.active_count,
        args.out.display()
    );
    Ok(())
}

impl PreparedRun {
    fn out_path(&self, dir: &Path, name: &str) -> PathBuf {
        let _ = std::fs::create_dir_all(dir);
        dir.join(name)
    }
}

fn cmd_verify_bounds(args: &CommonArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&args.config)?;
    if let Some(s) = args.scheme {
        cfg.solver.scheme = s;
    }
    let p = prepare(cfg)?;
    let rect = p.cfg.model.invariant_rectangle();

    // Hypothesis gate: initial data must start inside S; the geometric
    // separation hypotheses must hold when d0 is configured.
    let initial_inside = p
        .u0
        .iter()
        .zip(&p.w0)
        .all(|(&u, &w)| rect.contains(u, w));
    let mut report = json!({
        "version": version_string(),
        "command": "verify-bounds",
        "config": &p.cfg,
        "rectangle": { "u": [rect.u_lo, rect.u_hi], "w": [rect.w_lo, rect.w_hi] },
    });
    if !initial_inside {
        report["hypotheses_met"] = json!(false);
        report["containment"] = json!("not-assessed");
        write_json(&args.out, "report.json", &report)?;
        return Err(CliError::HypothesesUnmet(
            "initial data outside S: containment is not asserted".into(),
        ));
    }
    if let Some(d0) = p.cfg.d0 {
        let a = check_assumptions(&p.grid, &p.cfg.cavity, &p.u0_field, d0);
        report["assumptions"] = serde_json::to_value(&a).expect("report serializes");
        if !a.all_ok() {
            report["hypotheses_met"] = json!(false);
            report["containment"] = json!("not-assessed");
            write_json(&args.out, "report.json", &report)?;
            return Err(CliError::HypothesesUnmet(format!(
                "separation hypotheses unmet for d0 = {d0}: containment is not asserted"
            )));
        }
    }

    let (traj, _) = run_scheme(&p)?;
    let delta_s = 10.0 * (p.cfg.solver.dt + p.grid.cell_size * p.grid.cell_size);
    let inflated = rect.inflate(delta_s);
    let (min_u, max_u, min_w, max_w) = traj.observed_bounds();
    let contained = inflated.contains(min_u, min_w) && inflated.contains(max_u, max_w);

    report["hypotheses_met"] = json!(true);
    report["delta_s"] = json!(delta_s);
    report["observed"] =
        json!({ "min_u": min_u, "max_u": max_u, "min_w": min_w, "max_w": max_w });
    report["containment"] = json!(if contained { "pass" } else { "violated" });
    write_json(&args.out, "report.json", &report)?;

    println!(
        "u in [{min_u}, {max_u}] vs S_u = [{}, {}] (slack {delta_s})",
        rect.u_lo, rect.u_hi
    );
    println!(
        "w in [{min_w}, {max_w}] vs S_w = [{}, {}]",
        rect.w_lo, rect.w_hi
    );
    if contained {
        println!("containment: pass");
        Ok(())
    } else {
        Err(CliError::ContainmentViolated(
            "trajectory escaped the invariant rectangle beyond delta_S".into(),
        ))
    }
}

fn build_problem(cfg: &RunConfig) -> Result<ForwardProblem, CliError> {
    let conductivity = cfg.conductivity.build(&cfg.domain)?;
    let (u0, w0) = cfg.initial.build(&cfg.domain)?;
    Ok(ForwardProblem {
        domain: cfg.domain.clone(),
        conductivity,
        model: cfg.model,
        u0,
        w0,
        solver: cfg.solver.clone(),
        d0: cfg.d0,
    })
}

fn cmd_distinguish(common: &CommonArgs, cavities_path: &Path) -> Result<(), CliError> {
    let mut cfg = load_config(&common.config)?;
    if let Some(s) = common.scheme {
        cfg.solver.scheme = s;
    }
    let text = std::fs::read_to_string(cavities_path)
        .map_err(|e| CliError::Config(format!("{}: {e}", cavities_path.display())))?;
    let cavities: Vec<CavityParam> = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", cavities_path.display())))?;
    let problem = build_problem(&cfg)?;

    let mut matrix = distinguishability(&problem, &cavities)?;
    // Noise floor from the first cavity that actually solved.
    let reference = matrix.errors.iter().position(|e| e.is_none());
    if let Some(i) = reference {
        matrix.floor = Some(refinement_floor(&problem, &cavities[i])?);
    }

    write_out(&common.out, "matrix.csv", &matrix.to_csv())?;
    write_json(
        &common.out,
        "distinguish.json",
        &json!({
            "version": version_string(),
            "command": "distinguish",
            "config": &cfg,
            "matrix": serde_json::to_value(&matrix).expect("matrix serializes"),
        }),
    )?;
    let fails = matrix.errors.iter().flatten().count();
    println!(
        "distinguish: {} cavities, min off-diagonal misfit {}, floor {:?}, {fails} failed",
        cavities.len(),
        matrix.min_off_diagonal(),
        matrix.floor
    );
    Ok(())
}

fn cmd_invert(common: &CommonArgs, target_path: &Path) -> Result<(), CliError> {
    let cfg = load_config(&common.config)?;
    let mut inv = cfg
        .inverse
        .clone()
        .ok_or_else(|| CliError::Config("config has no \"inverse\" section".into()))?;
    if let Some(seed) = common.seed {
        inv.seed = seed;
    }
    let mut cfg = cfg;
    if let Some(s) = common.scheme {
        cfg.solver.scheme = s;
    }

    let mut target = read_trace(target_path)?;
    let noise = common.noise.or(inv.noise_sigma);
    let mut noise_report = serde_json::Value::Null;
    if let Some(sigma) = noise {
        if sigma > 0.0 {
            target = target.with_noise(sigma, inv.seed);
            noise_report = json!({ "sigma": sigma, "seed": inv.seed });
        }
    }

    let problem = build_problem(&cfg)?;
    let result = reconstruct(&problem, &target, &inv)?;

    let mut history_csv = String::from("solves,best_misfit\n");
    for (n, v) in &result.history {
        use std::fmt::Write as _;
        let _ = writeln!(history_csv, "{n},{v}");
    }
    write_out(&common.out, "history.csv", &history_csv)?;
    cfg.inverse = Some(inv);
    write_json(
        &common.out,
        "inversion.json",
        &json!({
            "version": version_string(),
            "command": "invert",
            "config": &cfg,
            "target": target_path.display().to_string(),
            "noise": noise_report,
            "result": serde_json::to_value(&result).expect("result serializes"),
        }),
    )?;
    println!(
        "invert: best misfit {} after {} solves; params {:?}{}",
        result.misfit,
        result.total_solves,
        result.params,
        if result.radius_at_lower_bound {
            " (radius at lower bound: no-cavity hypothesis not rejectable)"
        } else {
            ""
        }
    );
    Ok(())
}

/// Maps a landscape axis name to its parameter index.
fn axis_index(parametrization: &Parametrization, axis: &str) -> Result<usize, CliError> {
    for i in 0..parametrization.dim() {
        if parametrization.axis_name(i) == axis {
            return Ok(i);
        }
    }
    Err(CliError::Config(format!(
        "unknown landscape axis {axis:?}; valid: {}",
        (0..parametrization.dim())
            .map(|i| parametrization.axis_name(i))
            .collect::<Vec<_>>()
            .join(", ")
    )))
}

/// Parameter vector of a concrete cavity, if the family supports it.
fn cavity_params(cavity: &CavityParam) -> Option<(Parametrization, Vec<f64>)> {
    match cavity {
        CavityParam::None => None,
        CavityParam::Disc { center, radius } => {
            Some((Parametrization::Disc, vec![center.0, center.1, *radius]))
        }
        CavityParam::Star { center, radius, fourier } => {
            let mut p = vec![center.0, center.1, *radius];
            for (a, b) in fourier {
                p.push(*a);
                p.push(*b);
            }
            Some((Parametrization::Star { harmonics: fourier.len() }, p))
        }
    }
}

fn cmd_landscape(common: &CommonArgs, target_path: &Path) -> Result<(), CliError> {
    let mut cfg = load_config(&common.config)?;
    if let Some(s) = common.scheme {
        cfg.solver.scheme = s;
    }
    let scan_spec = cfg
        .landscape
        .clone()
        .ok_or_else(|| CliError::Config("config has no \"landscape\" section".into()))?;
    let target = read_trace(target_path)?;

    // Base point: explicit in the scan spec, else the configured cavity.
    let (parametrization, base) = match (&scan_spec.base, cavity_params(&cfg.cavity)) {
        (Some(b), Some((param, _))) => (param, b.clone()),
        (Some(b), None) => {
            let param = cfg
                .inverse
                .as_ref()
                .map(|i| i.parametrization)
                .unwrap_or(Parametrization::Disc);
            (param, b.clone())
        }
        (None, Some((param, p))) => (param, p),
        (None, None) => {
            return Err(CliError::Config(
                "landscape needs a base: configure a cavity or set landscape.base".into(),
            ))
        }
    };
    let axis = axis_index(&parametrization, &scan_spec.axis)?;

    let problem = build_problem(&cfg)?;
    let scan = landscape_scan(
        &problem,
        &target,
        parametrization,
        &base,
        axis,
        (scan_spec.lo, scan_spec.hi),
        scan_spec.steps,
    )?;

    write_out(&common.out, "landscape.csv", &scan.to_csv())?;
    write_json(
        &common.out,
        "landscape.json",
        &json!({
            "version": version_string(),
            "command": "landscape",
            "config": &cfg,
            "target": target_path.display().to_string(),
            "scan": serde_json::to_value(&scan).expect("scan serializes"),
        }),
    )?;
    match scan.argmin() {
        Some((v, m)) => println!("landscape: argmin {}={v} with misfit {m}", scan.axis_name),
        None => println!("landscape: no admissible point in the scanned range"),
    }
    Ok(())
}

/// Parses arguments and dispatches; returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Forward(args) => cmd_forward(args),
        Command::VerifyBounds(args) => cmd_verify_bounds(args),
        Command::Distinguish { common, cavities } => cmd_distinguish(common, cavities),
        Command::Invert { common, target } => cmd_invert(common, target),
        Command::Landscape { common, target } => cmd_landscape(common, target),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_config_json() -> serde_json::Value {
        json!({
            "domain": { "lx": 1.0, "ly": 1.0, "nx": 16, "ny": 16, "sigma": [0.0, 0.25] },
            "cavity": { "kind": "disc", "center": [0.5, 0.5], "radius": 0.2 },
            "model": { "kind": "aliev_panfilov", "A": 8.0, "a": 0.15, "eps": 0.01, "gamma": 0.5 },
            "solver": { "dt": 0.05, "T": 0.5 }
        })
    }

    #[test]
    fn config_parses_with_defaults() {
        let cfg: RunConfig = serde_json::from_value(base_config_json()).unwrap();
        cfg.validate().unwrap();
        assert!(matches!(cfg.conductivity, ConductivitySpec::Isotropic { value } if value == 1.0));
        assert!(matches!(cfg.initial, InitialSpec::Zero));
        assert_eq!(cfg.solver.scheme, Scheme::Imex);
        assert!(cfg.inverse.is_none());
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v = base_config_json();
        v["typo_key"] = json!(1);
        assert!(serde_json::from_value::<RunConfig>(v).is_err());
        let mut v = base_config_json();
        v["solver"]["dt_max"] = json!(0.1);
        assert!(serde_json::from_value::<RunConfig>(v).is_err());
    }

    #[test]
    fn out_of_range_model_parameter_names_bound() {
        let mut v = base_config_json();
        v["model"]["a"] = json!(1.5);
        let cfg: RunConfig = serde_json::from_value(v).unwrap();
        let err = cfg.validate().unwrap_err();
        assert_eq!(err.code(), 2);
        assert!(err.to_string().contains("(0,1)"), "{err}");
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg: RunConfig = serde_json::from_value(base_config_json()).unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), text);
    }

    #[test]
    fn result_envelope_reloads_as_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg: RunConfig = serde_json::from_value(base_config_json()).unwrap();
        let envelope = json!({
            "version": "monocav test",
            "command": "forward",
            "config": &cfg,
            "report": { "whatever": 1 },
        });
        let path = dir.path().join("result.json");
        std::fs::write(&path, serde_json::to_string(&envelope).unwrap()).unwrap();
        let loaded = load_config(&path).unwrap();
        assert_eq!(
            serde_json::to_string(&loaded).unwrap(),
            serde_json::to_string(&cfg).unwrap()
        );
    }

    #[test]
    fn conductivity_whitelist_builds_and_checks() {
        let d = DomainSpec { lx: 1.0, ly: 1.0, nx: 16, ny: 16, sigma: (0.0, 1.0) };
        let iso = ConductivitySpec::Isotropic { value: 2.0 }.build(&d).unwrap();
        assert_eq!(iso.kxx[0], 2.0);
        assert_eq!(iso.kxy[0], 0.0);

        let diag = ConductivitySpec::Diagonal {
            kxx: [1.0, 0.5, 0.0],
            kyy: [0.8, 0.0, 0.2],
            lambda: 3.0,
            max_grad: 1.0,
        }
        .build(&d)
        .unwrap();
        assert!(diag.kxy.iter().all(|&v| v == 0.0));

        let fiber = ConductivitySpec::Fiber {
            k_along: 1.5,
            k_cross: 0.6,
            theta: [0.3, 0.5, -0.2],
            lambda: 2.0,
            max_grad: 5.0,
        }
        .build(&d)
        .unwrap();
        // Rotation preserves the eigenvalues.
        let tr = fiber.kxx[40] + fiber.kyy[40];
        let det = fiber.kxx[40] * fiber.kyy[40] - fiber.kxy[40] * fiber.kxy[40];
        assert!((tr - 2.1).abs() < 1e-12);
        assert!((det - 0.9).abs() < 1e-12);

        // Ellipticity violation surfaces as a config error.
        let err = ConductivitySpec::Fiber {
            k_along: 5.0,
            k_cross: 0.1,
            theta: [0.0, 1.0, 0.0],
            lambda: 2.0,
            max_grad: 10.0,
        }
        .build(&d)
        .unwrap_err();
        assert_eq!(err.code(), 2);
    }

    #[test]
    fn initial_file_loader_checks_lengths() {
        let d = DomainSpec { lx: 1.0, ly: 1.0, nx: 8, ny: 8, sigma: (0.0, 1.0) };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("init.json");
        std::fs::write(&path, json!({ "u": vec![0.5; 64], "w": vec![0.0; 64] }).to_string())
            .unwrap();
        let spec = InitialSpec::File { path: path.display().to_string() };
        let (u0, w0) = spec.build(&d).unwrap();
        assert_eq!(u0.values.len(), 64);
        assert!(w0.values.iter().all(|&v| v == 0.0));

        std::fs::write(&path, json!({ "u": vec![0.5; 10], "w": vec![0.0; 64] }).to_string())
            .unwrap();
        assert!(spec.build(&d).is_err());
    }

    #[test]
    fn axis_names_resolve() {
        let disc = Parametrization::Disc;
        assert_eq!(axis_index(&disc, "radius").unwrap(), 2);
        assert_eq!(axis_index(&disc, "center_x").unwrap(), 0);
        assert!(axis_index(&disc, "wobble").is_err());
        let star = Parametrization::Star { harmonics: 2 };
        assert_eq!(axis_index(&star, "cos_1").unwrap(), 3);
        assert_eq!(axis_index(&star, "sin_2").unwrap(), 6);
    }
}
