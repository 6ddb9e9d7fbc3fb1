//! Cavity identification from one partial boundary measurement.
//!
//! The data is a boundary trace; the unknown is a parametrized cavity. Two
//! complementary tools quantify the problem: `distinguishability` fills the
//! pairwise-misfit matrix of a candidate list (distinct cavities should
//! separate above the scheme-noise floor), and `reconstruct` minimizes the
//! misfit with a box-constrained Nelder-Mead simplex under multistart.
//!
//! Derivative-free optimization is deliberate: remasking the cavity onto
//! the grid makes the misfit piecewise constant at the cell scale, so
//! finite-difference gradients below h are noise. Inadmissible candidates
//! (outside the box, cavity touching the wall, assumption violations) are
//! rejected with an infinite misfit and cost no forward solve.

use crate::forward::{
    solve_forward, solve_picard, ConductivityField, Scheme, SolverConfig, SolverError,
};
use crate::geometry::{
    build_masked_grid, check_assumptions, CavityParam, DomainSpec, GeometryError, InitialField,
};
use crate::ionic::{linspace, IonicModel};
use crate::measurements::{extract_trace, misfit, BoundaryTrace, MeasureError};
use crate::nonlocal::solve_nonlocal;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::cell::{Cell, RefCell};

#[derive(Debug, thiserror::Error)]
pub enum InverseError {
    #[error("every optimization start failed")]
    AllStartsFailed,
    #[error("invalid inverse configuration: {0}")]
    BadConfig(String),
    #[error("candidate violates separation hypotheses: {0}")]
    Inadmissible(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

/// Everything fixed across candidate cavities: domain, tensor, model,
/// initial data (on the full grid, restricted per candidate mask), solver
/// settings, and the optional separation parameter d0 gating admissibility.
#[derive(Clone)]
pub struct ForwardProblem {
    pub domain: DomainSpec,
    pub conductivity: ConductivityField,
    pub model: IonicModel,
    pub u0: InitialField,
    pub w0: InitialField,
    pub solver: SolverConfig,
    pub d0: Option<f64>,
}

impl ForwardProblem {
    /// Forward-solves one candidate and extracts its boundary trace.
    pub fn simulate(&self, cavity: &CavityParam) -> Result<BoundaryTrace, InverseError> {
        cavity.validate(&self.domain)?;
        let grid = build_masked_grid(&self.domain, cavity)?;
        if let Some(d0) = self.d0 {
            let report = check_assumptions(&grid, cavity, &self.u0, d0);
            if !report.all_ok() {
                return Err(InverseError::Inadmissible(format!(
                    "cavity wall distance {:.4} vs d0 {d0}, support in collar: {}, \
                     support disjoint from cavity: {}",
                    report.cavity_wall_distance,
                    report.support_in_collar,
                    report.support_cavity_disjoint
                )));
            }
        }
        let u0 = self.u0.restrict(&grid);
        let w0 = self.w0.restrict(&grid);
        let traj = match self.solver.scheme {
            Scheme::Imex => {
                solve_forward(&grid, &self.conductivity, &self.model, &u0, &w0, &self.solver)?
            }
            Scheme::Picard => {
                solve_picard(&grid, &self.conductivity, &self.model, &u0, &w0, &self.solver)?.0
            }
            Scheme::Nonlocal => {
                solve_nonlocal(&grid, &self.conductivity, &self.model, &u0, &w0, &self.solver)?
            }
        };
        Ok(extract_trace(&traj, &grid)?)
    }
}

/// Misfit of one candidate against the measured trace.
pub fn candidate_misfit(
    problem: &ForwardProblem,
    cavity: &CavityParam,
    target: &BoundaryTrace,
) -> Result<f64, InverseError> {
    let trace = problem.simulate(cavity)?;
    Ok(misfit(&trace, target)?)
}

/// Cavity shape family the optimizer searches over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Parametrization {
    /// Parameters [center_x, center_y, radius].
    Disc,
    /// Parameters [center_x, center_y, mean_radius, a_1, b_1, ..., a_K, b_K].
    Star { harmonics: usize },
}

impl Parametrization {
    pub fn dim(&self) -> usize {
        match self {
            Parametrization::Disc => 3,
            Parametrization::Star { harmonics } => 3 + 2 * harmonics,
        }
    }

    pub fn cavity(&self, p: &[f64]) -> CavityParam {
        match self {
            Parametrization::Disc => {
                CavityParam::Disc { center: (p[0], p[1]), radius: p[2] }
            }
            Parametrization::Star { harmonics } => CavityParam::Star {
                center: (p[0], p[1]),
                radius: p[2],
                fourier: (0..*harmonics).map(|k| (p[3 + 2 * k], p[4 + 2 * k])).collect(),
            },
        }
    }

    pub fn axis_name(&self, axis: usize) -> String {
        match axis {
            0 => "center_x".into(),
            1 => "center_y".into(),
            2 => "radius".into(),
            k => {
                let harmonic = (k - 3) / 2 + 1;
                if (k - 3) % 2 == 0 {
                    format!("cos_{harmonic}")
                } else {
                    format!("sin_{harmonic}")
                }
            }
        }
    }
}

fn default_parametrization() -> Parametrization {
    Parametrization::Disc
}
fn default_starts() -> usize {
    5
}
fn default_max_evals() -> usize {
    80
}
fn default_ftol() -> f64 {
    1e-10
}
fn default_scale() -> f64 {
    0.1
}

/// Optimizer and multistart settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InverseConfig {
    #[serde(default = "default_parametrization")]
    pub parametrization: Parametrization,
    /// Per-parameter [lo, hi] box; candidates outside get infinite misfit.
    pub bounds: Vec<[f64; 2]>,
    /// First start of the multistart; must lie inside the box.
    pub initial: Vec<f64>,
    #[serde(default = "default_starts")]
    pub starts: usize,
    /// Forward-solve budget per start (small overshoot possible mid-iteration).
    #[serde(default = "default_max_evals")]
    pub max_evals: usize,
    /// Absolute simplex-spread stopping tolerance on the misfit.
    #[serde(default = "default_ftol")]
    pub ftol: f64,
    /// Initial simplex edge, as a fraction of each parameter's box width.
    #[serde(default = "default_scale")]
    pub initial_scale: f64,
    #[serde(default)]
    pub seed: u64,
    /// Additive noise applied to the target trace before inversion.
    #[serde(default)]
    pub noise_sigma: Option<f64>,
}

impl InverseConfig {
    pub fn validate(&self) -> Result<(), InverseError> {
        let dim = self.parametrization.dim();
        if self.bounds.len() != dim || self.initial.len() != dim {
            return Err(InverseError::BadConfig(format!(
                "parametrization has {dim} parameters; got {} bounds and {} initial values",
                self.bounds.len(),
                self.initial.len()
            )));
        }
        for (i, b) in self.bounds.iter().enumerate() {
            if !(b[0] < b[1]) {
                return Err(InverseError::BadConfig(format!(
                    "bounds[{i}] = [{}, {}] is not a nonempty interval",
                    b[0], b[1]
                )));
            }
            if !(self.initial[i] >= b[0] && self.initial[i] <= b[1]) {
                return Err(InverseError::BadConfig(format!(
                    "initial[{i}] = {} outside bounds [{}, {}]",
                    self.initial[i], b[0], b[1]
                )));
            }
        }
        if self.starts == 0 {
            return Err(InverseError::BadConfig("starts must be >= 1".into()));
        }
        if self.max_evals < 5 {
            return Err(InverseError::BadConfig("max_evals must be >= 5".into()));
        }
        if !(self.ftol > 0.0) {
            return Err(InverseError::BadConfig("ftol must be > 0".into()));
        }
        if !(self.initial_scale > 0.0 && self.initial_scale <= 0.5) {
            return Err(InverseError::BadConfig("initial_scale must be in (0, 0.5]".into()));
        }
        Ok(())
    }
}

/// Worker pool for batch forward solves; MONOCAV_THREADS caps the width.
fn thread_pool() -> Result<rayon::ThreadPool, InverseError> {
    let threads = std::env::var("MONOCAV_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| InverseError::BadConfig(format!("thread pool: {e}")))
}

pub(crate) struct NmOptions {
    pub scale_steps: Vec<f64>,
    pub ftol: f64,
    pub max_iters: usize,
}

pub(crate) struct NmResult {
    pub best: Vec<f64>,
    pub f_best: f64,
    pub converged: bool,
}

/// Box-constrained Nelder-Mead (reflection 1, expansion 2, contraction 1/2,
/// shrink 1/2). The objective returns +inf outside the feasible set; NaN is
/// treated as +inf. `should_stop` is polled once per iteration for external
/// budget control.
pub(crate) fn nelder_mead(
    initial: &[f64],
    opts: &NmOptions,
    mut should_stop: impl FnMut() -> bool,
    mut f: impl FnMut(&[f64]) -> f64,
) -> NmResult {
    let n = initial.len();
    let sanitize = |v: f64| if v.is_nan() { f64::INFINITY } else { v };
    let mut eval = |p: &[f64]| sanitize(f(p));

    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let fv = eval(initial);
    simplex.push((initial.to_vec(), fv));
    for i in 0..n {
        let mut p = initial.to_vec();
        p[i] += opts.scale_steps[i];
        let fv = eval(&p);
        simplex.push((p, fv));
    }

    let mut converged = false;
    for _ in 0..opts.max_iters {
        simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("objective values sanitized"));
        let spread = simplex[n].1 - simplex[0].1;
        if spread.is_finite() && spread <= opts.ftol {
            converged = true;
            break;
        }
        if should_stop() {
            break;
        }

        let mut centroid = vec![0.0; n];
        for v in &simplex[..n] {
            for (c, x) in centroid.iter_mut().zip(&v.0) {
                *c += x;
            }
        }
        for c in centroid.iter_mut() {
            *c /= n as f64;
        }
        let worst = simplex[n].clone();
        let point = |coef: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&worst.0)
                .map(|(c, w)| c + coef * (c - w))
                .collect()
        };

        let xr = point(1.0);
        let fr = eval(&xr);
        if fr < simplex[0].1 {
            let xe = point(2.0);
            let fe = eval(&xe);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
            continue;
        }
        // Contraction: outside toward the reflection if it improved on the
        // worst vertex, inside toward the worst otherwise.
        let (xc, fc) = if fr < worst.1 {
            let xc = point(0.5);
            let fc = eval(&xc);
            (xc, fc)
        } else {
            let xc = point(-0.5);
            let fc = eval(&xc);
            (xc, fc)
        };
        if fc < worst.1.min(fr) {
            simplex[n] = (xc, fc);
            continue;
        }
        // Shrink toward the best vertex.
        let best = simplex[0].0.clone();
        for v in simplex.iter_mut().skip(1) {
            for (x, b) in v.0.iter_mut().zip(&best) {
                *x = b + 0.5 * (*x - b);
            }
            v.1 = eval(&v.0);
        }
    }

    simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("objective values sanitized"));
    NmResult { best: simplex[0].0.clone(), f_best: simplex[0].1, converged }
}

/// One multistart leg.
#[derive(Debug, Clone, Serialize)]
pub struct StartReport {
    pub start_index: usize,
    pub initial: Vec<f64>,
    pub best: Vec<f64>,
    pub best_misfit: f64,
    pub forward_solves: usize,
    pub converged: bool,
    /// (solve count, best misfit so far) at each improvement.
    pub history: Vec<(usize, f64)>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReconstructionResult {
    pub cavity: CavityParam,
    pub params: Vec<f64>,
    pub misfit: f64,
    pub best_start: usize,
    pub total_solves: usize,
    /// Best-so-far misfit against cumulative solve count, starts merged in
    /// index order.
    pub history: Vec<(usize, f64)>,
    /// Recovered radius sits on its lower bound: the no-cavity hypothesis
    /// is not rejectable from this data.
    pub radius_at_lower_bound: bool,
    pub starts: Vec<StartReport>,
}

fn run_start(
    problem: &ForwardProblem,
    target: &BoundaryTrace,
    cfg: &InverseConfig,
    start_index: usize,
    initial: Vec<f64>,
) -> StartReport {
    let bounds = &cfg.bounds;
    let solves = Cell::new(0usize);
    let best_seen = Cell::new(f64::INFINITY);
    let history: RefCell<Vec<(usize, f64)>> = RefCell::new(Vec::new());
    let failure: RefCell<Option<String>> = RefCell::new(None);

    let objective = |p: &[f64]| -> f64 {
        if p.iter()
            .zip(bounds)
            .any(|(v, b)| !v.is_finite() || *v < b[0] || *v > b[1])
        {
            return f64::INFINITY;
        }
        let cavity = cfg.parametrization.cavity(p);
        match candidate_misfit(problem, &cavity, target) {
            Ok(v) => {
                solves.set(solves.get() + 1);
                if v < best_seen.get() {
                    best_seen.set(v);
                    history.borrow_mut().push((solves.get(), v));
                }
                v
            }
            Err(InverseError::Geometry(_)) | Err(InverseError::Inadmissible(_)) => f64::INFINITY,
            Err(e) => {
                *failure.borrow_mut() = Some(e.to_string());
                f64::NAN
            }
        }
    };

    let scale_steps: Vec<f64> = bounds
        .iter()
        .zip(&initial)
        .map(|(b, &x)| {
            let step = cfg.initial_scale * (b[1] - b[0]);
            // Flip the offset when it would leave the box.
            if x + step > b[1] {
                -step
            } else {
                step
            }
        })
        .collect();
    let opts = NmOptions { scale_steps, ftol: cfg.ftol, max_iters: 10_000 };
    let stop = || solves.get() >= cfg.max_evals || failure.borrow().is_some();
    let nm = nelder_mead(&initial, &opts, stop, objective);

    StartReport {
        start_index,
        initial,
        best: nm.best,
        best_misfit: nm.f_best,
        forward_solves: solves.get(),
        converged: nm.converged,
        history: history.into_inner(),
        error: failure.into_inner(),
    }
}

/// Multistart Nelder-Mead reconstruction of the cavity minimizing the trace
/// misfit. Deterministic for a fixed seed: start points are drawn up front
/// from a seeded generator, each leg runs serially, and legs are merged by
/// index.
pub fn reconstruct(
    problem: &ForwardProblem,
    target: &BoundaryTrace,
    cfg: &InverseConfig,
) -> Result<ReconstructionResult, InverseError> {
    cfg.validate()?;
    let dim = cfg.parametrization.dim();

    // Start points: the configured initial, then uniform draws in the box
    // (rejecting geometric invalids cheaply, no forward solves).
    let mut starts: Vec<Vec<f64>> = vec![cfg.initial.clone()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut attempts = 0;
    while starts.len() < cfg.starts && attempts < 100 * cfg.starts {
        attempts += 1;
        let p: Vec<f64> =
            (0..dim).map(|i| rng.gen_range(cfg.bounds[i][0]..=cfg.bounds[i][1])).collect();
        let cavity = cfg.parametrization.cavity(&p);
        if cavity.validate(&problem.domain).is_ok() {
            starts.push(p);
        }
    }
    if starts.len() < cfg.starts {
        return Err(InverseError::BadConfig(
            "could not sample enough valid start points inside the bounds".into(),
        ));
    }

    let pool = thread_pool()?;
    let reports: Vec<StartReport> = pool.install(|| {
        starts
            .into_par_iter()
            .enumerate()
            .map(|(i, p)| run_start(problem, target, cfg, i, p))
            .collect()
    });

    let total_solves: usize = reports.iter().map(|r| r.forward_solves).sum();
    let mut best_start = None;
    for r in &reports {
        if r.error.is_none() && r.best_misfit.is_finite() {
            let better = match best_start {
                None => true,
                Some(i) => r.best_misfit < reports[i as usize].best_misfit,
            };
            if better {
                best_start = Some(r.start_index);
            }
        }
    }
    let best_start = best_start.ok_or(InverseError::AllStartsFailed)?;

    let mut history = Vec::new();
    let mut offset = 0usize;
    let mut best = f64::INFINITY;
    for r in &reports {
        for &(local, v) in &r.history {
            if v < best {
                best = v;
                history.push((offset + local, v));
            }
        }
        offset += r.forward_solves;
    }

    let winner = &reports[best_start];
    let params = winner.best.clone();
    let r_lo = cfg.bounds[2][0];
    let r_span = cfg.bounds[2][1] - r_lo;
    Ok(ReconstructionResult {
        cavity: cfg.parametrization.cavity(&params),
        params,
        misfit: winner.best_misfit,
        best_start,
        total_solves,
        history,
        // 1% of span: the simplex approaches a boundary minimum
        // geometrically, so it pins near the bound without landing on it.
        radius_at_lower_bound: winner.best[2] <= r_lo + 1e-2 * r_span,
        starts: reports,
    })
}

/// Pairwise trace misfits of a candidate list under one shared setup.
#[derive(Debug, Clone, Serialize)]
pub struct DistinguishabilityMatrix {
    pub cavities: Vec<CavityParam>,
    /// misfits[i][j]; NaN where either solve failed.
    pub misfits: Vec<Vec<f64>>,
    /// Per-cavity failure messages (None = solved).
    pub errors: Vec<Option<String>>,
    /// dt-refinement noise floor, when the caller measured one.
    pub floor: Option<f64>,
}

impl DistinguishabilityMatrix {
    pub fn min_off_diagonal(&self) -> f64 {
        let mut m = f64::INFINITY;
        for i in 0..self.misfits.len() {
            for j in 0..self.misfits.len() {
                if i != j && !self.misfits[i][j].is_nan() {
                    m = m.min(self.misfits[i][j]);
                }
            }
        }
        m
    }

    pub fn to_csv(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::from("i,j,misfit\n");
        for (i, row) in self.misfits.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let _ = writeln!(out, "{i},{j},{v}");
            }
        }
        out
    }
}

/// Forward-solves every cavity once (in parallel) and fills the pairwise
/// misfit matrix. Failed solves mark their row/column NaN instead of
/// aborting the batch.
pub fn distinguishability(
    problem: &ForwardProblem,
    cavities: &[CavityParam],
) -> Result<DistinguishabilityMatrix, InverseError> {
    if cavities.len() < 2 {
        return Err(InverseError::BadConfig(
            "distinguishability needs at least two cavities".into(),
        ));
    }
    let pool = thread_pool()?;
    let traces: Vec<Result<BoundaryTrace, String>> = pool.install(|| {
        cavities
            .par_iter()
            .map(|c| problem.simulate(c).map_err(|e| e.to_string()))
            .collect()
    });

    let n = cavities.len();
    let mut misfits = vec![vec![f64::NAN; n]; n];
    for i in 0..n {
        if traces[i].is_ok() {
            misfits[i][i] = 0.0;
        }
        for j in i + 1..n {
            if let (Ok(a), Ok(b)) = (&traces[i], &traces[j]) {
                let v = misfit(a, b)?;
                misfits[i][j] = v;
                misfits[j][i] = v;
            }
        }
    }
    Ok(DistinguishabilityMatrix {
        cavities: cavities.to_vec(),
        misfits,
        errors: traces.iter().map(|t| t.as_ref().err().cloned()).collect(),
        floor: None,
    })
}

/// Scheme-noise floor: the misfit between a run and its dt-halved rerun
/// restricted back to the coarse time sampling. Distinguishability claims
/// are made relative to this scale.
pub fn refinement_floor(
    problem: &ForwardProblem,
    cavity: &CavityParam,
) -> Result<f64, InverseError> {
    let coarse = problem.simulate(cavity)?;
    let mut halved = problem.clone();
    halved.solver.dt = problem.solver.dt / 2.0;
    let fine = halved.simulate(cavity)?.restrict_time(2)?;
    Ok(misfit(&fine, &coarse)?)
}

/// 1D misfit profile along one parameter axis, other parameters fixed.
#[derive(Debug, Clone, Serialize)]
pub struct LandscapeScan {
    pub axis: usize,
    pub axis_name: String,
    pub base: Vec<f64>,
    pub values: Vec<f64>,
    /// NaN where the candidate was inadmissible or failed.
    pub misfits: Vec<f64>,
}

impl LandscapeScan {
    pub fn argmin(&self) -> Option<(f64, f64)> {
        self.values
            .iter()
            .zip(&self.misfits)
            .filter(|(_, m)| m.is_finite())
            .min_by(|a, b| a.1.partial_cmp(b.1).expect("finite values"))
            .map(|(v, m)| (*v, *m))
    }

    pub fn to_csv(&self) -> String {
        use std::fmt::Write as _;
        let mut out = format!("{},misfit\n", self.axis_name);
        for (v, m) in self.values.iter().zip(&self.misfits) {
            let _ = writeln!(out, "{v},{m}");
        }
        out
    }
}

pub fn landscape_scan(
    problem: &ForwardProblem,
    target: &BoundaryTrace,
    parametrization: Parametrization,
    base: &[f64],
    axis: usize,
    range: (f64, f64),
    steps: usize,
) -> Result<LandscapeScan, InverseError> {
    if base.len() != parametrization.dim() {
        return Err(InverseError::BadConfig(format!(
            "base has {} parameters, parametrization needs {}",
            base.len(),
            parametrization.dim()
        )));
    }
    if axis >= base.len() {
        return Err(InverseError::BadConfig(format!("axis {axis} out of range")));
    }
    if steps < 2 {
        return Err(InverseError::BadConfig("scan needs at least 2 steps".into()));
    }
    let values = linspace(range.0, range.1, steps);
    let pool = thread_pool()?;
    let misfits: Vec<f64> = pool.install(|| {
        values
            .par_iter()
            .map(|&v| {
                let mut p = base.to_vec();
                p[axis] = v;
                let cavity = parametrization.cavity(&p);
                match candidate_misfit(problem, &cavity, target) {
                    Ok(m) => m,
                    Err(_) => f64::NAN,
                }
            })
            .collect()
    });
    Ok(LandscapeScan {
        axis,
        axis_name: parametrization.axis_name(axis),
        base: base.to_vec(),
        values,
        misfits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ionic::ModelKind;

    fn quadratic_min() -> (Vec<f64>, f64) {
        let opts = NmOptions {
            scale_steps: vec![0.5, 0.5, 0.5],
            ftol: 1e-14,
            max_iters: 2000,
        };
        let nm = nelder_mead(
            &[0.0, 0.0, 0.0],
            &opts,
            || false,
            |p| (p[0] - 1.0).powi(2) + (p[1] + 2.0).powi(2) + 3.0 * p[2].powi(2),
        );
        (nm.best, nm.f_best)
    }

    #[test]
    fn nelder_mead_finds_quadratic_minimum() {
        let (best, f) = quadratic_min();
        assert!((best[0] - 1.0).abs() < 1e-5, "{best:?}");
        assert!((best[1] + 2.0).abs() < 1e-5);
        assert!(best[2].abs() < 1e-5);
        assert!(f < 1e-9);
    }

    #[test]
    fn nelder_mead_respects_rejection_boundary() {
        // Minimum outside the box; rejection keeps iterates inside and the
        // optimizer settles near the constrained optimum.
        let opts =
            NmOptions { scale_steps: vec![0.2], ftol: 1e-12, max_iters: 500 };
        let nm = nelder_mead(
            &[0.0],
            &opts,
            || false,
            |p| {
                if p[0] < -1.0 || p[0] > 1.0 {
                    f64::INFINITY
                } else {
                    (p[0] - 10.0).powi(2)
                }
            },
        );
        assert!(nm.best[0] <= 1.0);
        assert!(nm.best[0] > 0.9, "{}", nm.best[0]);
    }

    #[test]
    fn nelder_mead_stop_callback_halts() {
        let mut calls = 0;
        let nm = nelder_mead(
            &[0.0, 0.0],
            &NmOptions { scale_steps: vec![0.1, 0.1], ftol: 1e-16, max_iters: 10_000 },
            || {
                calls += 1;
                calls > 3
            },
            |p| p[0].powi(2) + p[1].powi(2) + 1.0,
        );
        assert!(!nm.converged);
    }

    fn tiny_problem() -> ForwardProblem {
        let domain = DomainSpec { lx: 1.0, ly: 1.0, nx: 16, ny: 16, sigma: (0.0, 0.25) };
        let conductivity = ConductivityField::isotropic(&domain, 1.0);
        let model = IonicModel::defaults(ModelKind::AlievPanfilov);
        let u0 = InitialField::collar_bump(&domain, 0.6, 0.1);
        let w0 = InitialField::zero(16, 16);
        let solver = SolverConfig { dt: 0.05, t_final: 0.5, ..Default::default() };
        ForwardProblem { domain, conductivity, model, u0, w0, solver, d0: None }
    }

    #[test]
    fn candidate_rejection_paths() {
        let problem = tiny_problem();
        let target = problem.simulate(&CavityParam::None).unwrap();
        // Touches the wall: geometry error.
        let hugging = CavityParam::Disc { center: (0.5, 0.5), radius: 0.47 };
        assert!(matches!(
            candidate_misfit(&problem, &hugging, &target),
            Err(InverseError::Geometry(_))
        ));
        // Inadmissible under d0 though geometrically buildable.
        let mut strict = problem.clone();
        strict.d0 = Some(0.3);
        let near = CavityParam::Disc { center: (0.5, 0.5), radius: 0.25 };
        assert!(matches!(
            candidate_misfit(&strict, &near, &target),
            Err(InverseError::Inadmissible(_))
        ));
    }

    #[test]
    fn reconstruction_is_seeded_deterministic() {
        let problem = tiny_problem();
        let truth = CavityParam::Disc { center: (0.5625, 0.5), radius: 0.22 };
        let target = problem.simulate(&truth).unwrap();
        let cfg = InverseConfig {
            parametrization: Parametrization::Disc,
            bounds: vec![[0.35, 0.65], [0.35, 0.65], [0.12, 0.3]],
            initial: vec![0.5, 0.5, 0.18],
            starts: 2,
            max_evals: 25,
            ftol: 1e-10,
            initial_scale: 0.15,
            seed: 11,
            noise_sigma: None,
        };
        let r1 = reconstruct(&problem, &target, &cfg).unwrap();
        let r2 = reconstruct(&problem, &target, &cfg).unwrap();
        assert_eq!(r1.params, r2.params);
        assert_eq!(r1.misfit, r2.misfit);
        assert_eq!(r1.total_solves, r2.total_solves);
        assert_eq!(r1.history, r2.history);
        // The optimizer made progress from the initial guess.
        let initial_misfit = candidate_misfit(
            &problem,
            &Parametrization::Disc.cavity(&cfg.initial),
            &target,
        )
        .unwrap();
        assert!(r1.misfit < initial_misfit);
    }

    #[test]
    fn history_is_nonincreasing() {
        let problem = tiny_problem();
        let truth = CavityParam::Disc { center: (0.5, 0.5625), radius: 0.2 };
        let target = problem.simulate(&truth).unwrap();
        let cfg = InverseConfig {
            parametrization: Parametrization::Disc,
            bounds: vec![[0.35, 0.65], [0.35, 0.65], [0.12, 0.3]],
            initial: vec![0.45, 0.45, 0.15],
            starts: 1,
            max_evals: 30,
            ftol: 1e-12,
            initial_scale: 0.1,
            seed: 3,
            noise_sigma: None,
        };
        let r = reconstruct(&problem, &target, &cfg).unwrap();
        for w in r.history.windows(2) {
            assert!(w[1].1 < w[0].1);
            assert!(w[1].0 > w[0].0);
        }
        assert!(r.total_solves <= 40);
    }

    #[test]
    fn duplicate_cavities_give_bitwise_zero_misfit() {
        let problem = tiny_problem();
        let c = CavityParam::Disc { center: (0.5, 0.5), radius: 0.2 };
        let list = vec![c.clone(), c.clone(), CavityParam::Disc { center: (0.5, 0.5), radius: 0.28 }];
        let m = distinguishability(&problem, &list).unwrap();
        assert_eq!(m.misfits[0][1], 0.0);
        assert_eq!(m.misfits[1][0], 0.0);
        assert!(m.misfits[0][2] > 0.0);
        assert_eq!(m.misfits[0][2], m.misfits[2][0]);
        for i in 0..3 {
            assert_eq!(m.misfits[i][i], 0.0);
            assert!(m.errors[i].is_none());
        }
    }

    #[test]
    fn failed_rows_marked_not_fatal() {
        let problem = tiny_problem();
        let list = vec![
            CavityParam::Disc { center: (0.5, 0.5), radius: 0.2 },
            // Outside the domain: fails validation.
            CavityParam::Disc { center: (1.5, 0.5), radius: 0.2 },
            CavityParam::Disc { center: (0.5, 0.5), radius: 0.25 },
        ];
        let m = distinguishability(&problem, &list).unwrap();
        assert!(m.errors[1].is_some());
        assert!(m.misfits[0][1].is_nan());
        assert!(m.misfits[1][2].is_nan());
        assert!(m.misfits[0][2].is_finite());
    }

    #[test]
    fn landscape_scan_shape_and_argmin() {
        let problem = tiny_problem();
        let truth = CavityParam::Disc { center: (0.5, 0.5), radius: 0.2 };
        let target = problem.simulate(&truth).unwrap();
        let scan = landscape_scan(
            &problem,
            &target,
            Parametrization::Disc,
            &[0.5, 0.5, 0.2],
            2,
            (0.12, 0.28),
            9,
        )
        .unwrap();
        assert_eq!(scan.values.len(), 9);
        assert_eq!(scan.misfits.len(), 9);
        assert_eq!(scan.axis_name, "radius");
        let (argmin, fmin) = scan.argmin().unwrap();
        assert_eq!(argmin, 0.2);
        assert_eq!(fmin, 0.0);
        let csv = scan.to_csv();
        assert!(csv.starts_with("radius,misfit\n"));
        assert_eq!(csv.lines().count(), 10);
    }
}
