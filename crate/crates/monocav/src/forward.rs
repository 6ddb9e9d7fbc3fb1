//! Coupled forward solvers on the masked grid.
//!
//! Spatial discretization is a cell-centered finite-volume scheme: two-point
//! flux with harmonic face averaging for the diagonal tensor part, plus a
//! vertex-centered symmetric correction for the mixed (off-diagonal) part.
//! Zero flux is imposed on outer-wall and cavity faces by omitting them, so
//! the assembled operator has exactly zero row sums and conserves cell mass.
//!
//! Two time-stepping paths share the operator:
//!
//! * `solve_forward` — production IMEX: implicit diffusion via conjugate
//!   gradients, explicit reaction, explicit Euler for the recovery ODE.
//! * `solve_picard` — fixed-point iteration over whole time windows: each
//!   outer sweep solves the linear parabolic problem with the previous
//!   iterate's (rectangle-clamped) nonlinearity frozen in time, and the
//!   recovery variable is integrated cellwise in cumulative form. The
//!   contraction is monitored in exponentially weighted norms
//!   sup_n e^{-kappa tau_n} |.|_inf, the quantity the convergence theory
//!   bounds by (M1 + M2)/kappa per sweep.

use crate::geometry::{CellKind, DomainSpec, GridGeometry};
use crate::ionic::{IonicModel, Rectangle};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

#[derive(Debug, thiserror::Error)]
pub enum SolverError {
    #[error("conjugate gradient exceeded {max_iter} iterations at step {step} (residual {residual:.3e}, target {target:.3e})")]
    LinearSolveDiverged { step: usize, max_iter: usize, residual: f64, target: f64 },
    #[error("fixed-point sweep stalled in window {window}: update {update:.3e} after {iters} iterations (ratio {ratio:.3})")]
    PicardStalled { window: usize, iters: usize, update: f64, ratio: f64 },
    #[error("operand shapes inconsistent: {0}")]
    ShapeMismatch(String),
    #[error("non-finite state at step {step}")]
    NonFinite { step: usize },
    #[error("conductivity field inadmissible: {0}")]
    BadConductivity(String),
    #[error("solver configuration invalid: {0}")]
    BadConfig(String),
}

/// Per-cell symmetric 2x2 conductivity tensor on the full cell grid, with
/// its ellipticity certificate.
#[derive(Debug, Clone)]
pub struct ConductivityField {
    pub nx: usize,
    pub ny: usize,
    pub kxx: Vec<f64>,
    pub kxy: Vec<f64>,
    pub kyy: Vec<f64>,
    /// Ellipticity bound: per-cell eigenvalues lie in [1/lambda, lambda].
    pub lambda: f64,
}

impl ConductivityField {
    /// Builds from an analytic tensor function of the cell center and
    /// verifies ellipticity (eigenvalues in [1/lambda, lambda]) and
    /// smoothness (componentwise discrete gradient at most `max_grad`).
    pub fn build(
        domain: &DomainSpec,
        lambda: f64,
        max_grad: f64,
        f: impl Fn(f64, f64) -> (f64, f64, f64),
    ) -> Result<Self, SolverError> {
        if !(lambda > 1.0) {
            return Err(SolverError::BadConductivity(format!(
                "ellipticity bound lambda must be > 1, got {lambda}"
            )));
        }
        let (nx, ny) = (domain.nx, domain.ny);
        let h = domain.cell_size();
        let mut kxx = Vec::with_capacity(nx * ny);
        let mut kxy = Vec::with_capacity(nx * ny);
        let mut kyy = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                let (x, y) = ((i as f64 + 0.5) * h, (j as f64 + 0.5) * h);
                let (a, b, c) = f(x, y);
                let mean = 0.5 * (a + c);
                let r = (0.25 * (a - c) * (a - c) + b * b).sqrt();
                let (lo, hi) = (mean - r, mean + r);
                if lo < 1.0 / lambda - 1e-12 || hi > lambda + 1e-12 {
                    return Err(SolverError::BadConductivity(format!(
                        "tensor eigenvalues [{lo:.6}, {hi:.6}] at ({x:.4}, {y:.4}) \
                         escape [1/lambda, lambda] = [{:.6}, {lambda:.6}]",
                        1.0 / lambda
                    )));
                }
                kxx.push(a);
                kxy.push(b);
                kyy.push(c);
            }
        }
        // Smoothness proxy: componentwise difference quotient between
        // neighboring cells.
        let field = ConductivityField { nx, ny, kxx, kxy, kyy, lambda };
        let grad = field.max_component_gradient(h);
        if grad > max_grad {
            return Err(SolverError::BadConductivity(format!(
                "component gradient {grad:.4} exceeds the smoothness bound {max_grad}"
            )));
        }
        Ok(field)
    }

    pub fn isotropic(domain: &DomainSpec, value: f64) -> Self {
        let lambda = 2.0 * value.max(1.0 / value);
        ConductivityField::build(domain, lambda, 1.0, |_, _| (value, 0.0, value))
            .expect("constant isotropic tensor is admissible")
    }

    fn max_component_gradient(&self, h: f64) -> f64 {
        let mut g: f64 = 0.0;
        let comp = [&self.kxx, &self.kxy, &self.kyy];
        for k in comp {
            for j in 0..self.ny {
                for i in 0..self.nx {
                    let c = k[j * self.nx + i];
                    if i + 1 < self.nx {
                        g = g.max((k[j * self.nx + i + 1] - c).abs() / h);
                    }
                    if j + 1 < self.ny {
                        g = g.max((k[(j + 1) * self.nx + i] - c).abs() / h);
                    }
                }
            }
        }
        g
    }
}

/// Sparse symmetric operator on active cells (compressed rows). The
/// diagonal entry of each row is stored last and equals the negated plain
/// sum of the row's off-diagonal entries in storage order, so a
/// storage-order row sum is exactly zero.
#[derive(Debug, Clone)]
pub struct SparseOperator {
    pub n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
    diag: Vec<f64>,
}

impl SparseOperator {
    /// y = D x.
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        debug_assert_eq!(y.len(), self.n);
        for r in 0..self.n {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.vals[k] * x[self.cols[k] as usize];
            }
            y[r] = acc;
        }
    }

    /// y = (I - dt D) x.
    pub fn matvec_shifted(&self, dt: f64, x: &[f64], y: &mut [f64]) {
        for r in 0..self.n {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.vals[k] * x[self.cols[k] as usize];
            }
            y[r] = x[r] - dt * acc;
        }
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    /// Row sums in storage order (exactly zero by construction).
    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n)
            .map(|r| {
                let mut s = 0.0;
                for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                    s += self.vals[k];
                }
                s
            })
            .collect()
    }

    /// Entry lookup for structure tests.
    pub fn get(&self, r: usize, c: usize) -> f64 {
        for k in self.row_ptr[r]..self.row_ptr[r + 1] {
            if self.cols[k] as usize == c {
                return self.vals[k];
            }
        }
        0.0
    }

    /// Symmetry defect max |A - A^T| for tests.
    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for r in 0..self.n {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let c = self.cols[k] as usize;
                worst = worst.max((self.vals[k] - self.get(c, r)).abs());
            }
        }
        worst
    }
}

/// Assembles the diffusion operator div(K grad .) on active cells: two-point
/// harmonic flux through interior faces, zero flux through wall and cavity
/// faces, vertex-centered mixed-term correction where all four surrounding
/// cells are active (absent when K is diagonal).
pub fn assemble_diffusion(
    grid: &GridGeometry,
    k_field: &ConductivityField,
) -> Result<SparseOperator, SolverError> {
    let (nx, ny) = (grid.nx(), grid.ny());
    if k_field.nx != nx || k_field.ny != ny {
        return Err(SolverError::ShapeMismatch(format!(
            "conductivity grid {}x{} vs domain {}x{}",
            k_field.nx, k_field.ny, nx, ny
        )));
    }
    let n = grid.active_count;
    let h2 = grid.cell_size * grid.cell_size;
    let idx = |i: usize, j: usize| grid.cell_index[j * nx + i];
    let active = |i: usize, j: usize| grid.cell_mask[j * nx + i] == CellKind::Active;

    // Accumulate off-diagonal couplings; per-slot accumulation order is the
    // fixed scan order below, so rebuilds are bitwise identical.
    let mut rows: Vec<std::collections::BTreeMap<u32, f64>> =
        vec![std::collections::BTreeMap::new(); n];
    let add = |rows: &mut Vec<std::collections::BTreeMap<u32, f64>>,
               r: usize,
               c: usize,
               v: f64| {
        *rows[r].entry(c as u32).or_insert(0.0) += v;
    };

    // Vertical faces: flux in x between (i-1, j) and (i, j).
    for j in 0..ny {
        for i in 1..nx {
            if active(i - 1, j) && active(i, j) {
                let kl = k_field.kxx[j * nx + i - 1];
                let kr = k_field.kxx[j * nx + i];
                let t = 2.0 * kl * kr / (kl + kr) / h2;
                let (l, r) = (idx(i - 1, j), idx(i, j));
                add(&mut rows, l, r, t);
                add(&mut rows, r, l, t);
            }
        }
    }
    // Horizontal faces: flux in y between (i, j-1) and (i, j).
    for j in 1..ny {
        for i in 0..nx {
            if active(i, j - 1) && active(i, j) {
                let kb = k_field.kyy[(j - 1) * nx + i];
                let kt = k_field.kyy[j * nx + i];
                let t = 2.0 * kb * kt / (kb + kt) / h2;
                let (b, u) = (idx(i, j - 1), idx(i, j));
                add(&mut rows, b, u, t);
                add(&mut rows, u, b, t);
            }
        }
    }
    // Mixed term: for each interior vertex with all four cells active, the
    // symmetric elementary block couples the two diagonals; rows sum to
    // zero, and the whole correction vanishes when kxy = 0.
    for jv in 1..ny {
        for iv in 1..nx {
            let (sw, se, nw, ne) = ((iv - 1, jv - 1), (iv, jv - 1), (iv - 1, jv), (iv, jv));
            if active(sw.0, sw.1) && active(se.0, se.1) && active(nw.0, nw.1) && active(ne.0, ne.1)
            {
                let kbar = 0.25
                    * (k_field.kxy[sw.1 * nx + sw.0]
                        + k_field.kxy[se.1 * nx + se.0]
                        + k_field.kxy[nw.1 * nx + nw.0]
                        + k_field.kxy[ne.1 * nx + ne.0]);
                if kbar == 0.0 {
                    continue;
                }
                let c = -kbar / (2.0 * h2);
                let (isw, ise, inw, ine) =
                    (idx(sw.0, sw.1), idx(se.0, se.1), idx(nw.0, nw.1), idx(ne.0, ne.1));
                // Diagonal parts are implied by the zero-row-sum rebuild.
                add(&mut rows, isw, ine, -c);
                add(&mut rows, ine, isw, -c);
                add(&mut rows, ise, inw, c);
                add(&mut rows, inw, ise, c);
            }
        }
    }

    // Compress: off-diagonals in column order, diagonal last as the negated
    // storage-order sum.
    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    let mut diag = Vec::with_capacity(n);
    row_ptr.push(0);
    for (r, row) in rows.iter().enumerate() {
        let mut s = 0.0;
        for (&c, &v) in row.iter() {
            debug_assert_ne!(c as usize, r, "diagonal must not be accumulated");
            cols.push(c);
            vals.push(v);
            s += v;
        }
        let d = -s;
        cols.push(r as u32);
        vals.push(d);
        diag.push(d);
        row_ptr.push(cols.len());
    }

    Ok(SparseOperator { n, row_ptr, cols, vals, diag })
}

/// Outcome of one conjugate-gradient solve.
#[derive(Debug, Clone, Copy)]
pub struct CgOutcome {
    pub iters: usize,
    pub residual: f64,
}

/// Jacobi-preconditioned conjugate gradients for (I - dt D) x = b, warm
/// started at x0. Stops when ||r||_2 <= tol * ||b||_2. Fully serial;
/// bitwise deterministic.
pub fn cg_shifted(
    op: &SparseOperator,
    dt: f64,
    b: &[f64],
    x0: &[f64],
    tol: f64,
    max_iter: usize,
    step: usize,
) -> Result<(Vec<f64>, CgOutcome), SolverError> {
    let n = op.n;
    let norm_b = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm_b == 0.0 {
        return Ok((vec![0.0; n], CgOutcome { iters: 0, residual: 0.0 }));
    }
    let target = tol * norm_b;
    let minv: Vec<f64> = op.diag.iter().map(|d| 1.0 / (1.0 - dt * d)).collect();

    let mut x = x0.to_vec();
    let mut ax = vec![0.0; n];
    op.matvec_shifted(dt, &x, &mut ax);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    let mut z: Vec<f64> = r.iter().zip(&minv).map(|(ri, mi)| ri * mi).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let mut res = r.iter().map(|v| v * v).sum::<f64>().sqrt();

    let mut iters = 0;
    while res > target {
        if iters >= max_iter {
            return Err(SolverError::LinearSolveDiverged {
                step,
                max_iter,
                residual: res,
                target,
            });
        }
        op.matvec_shifted(dt, &p, &mut ax);
        let pap: f64 = p.iter().zip(&ax).map(|(a, b)| a * b).sum();
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ax[i];
        }
        for i in 0..n {
            z[i] = r[i] * minv[i];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        res = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        iters += 1;
    }
    Ok((x, CgOutcome { iters, residual: res }))
}

/// The (u, w) pair on active cells at one time level.
#[derive(Debug, Clone)]
pub struct StateFields {
    pub u: Vec<f64>,
    pub w: Vec<f64>,
    pub t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Imex,
    Picard,
    Nonlocal,
}

impl Scheme {
    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Imex => "imex",
            Scheme::Picard => "picard",
            Scheme::Nonlocal => "nonlocal",
        }
    }
}

/// Time-stepping configuration shared by all schemes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub dt: f64,
    #[serde(rename = "T")]
    pub t_final: f64,
    #[serde(default = "default_scheme")]
    pub scheme: Scheme,
    /// Contraction shift for the fixed-point path; default 2 max(M1, M2).
    #[serde(default)]
    pub kappa: Option<f64>,
    #[serde(default = "default_picard_tol")]
    pub picard_tol: f64,
    #[serde(default = "default_picard_max_iter")]
    pub picard_max_iter: usize,
    /// Fixed-point sweeps run over subwindows of at most this length.
    #[serde(default = "default_picard_window")]
    pub picard_window: f64,
    #[serde(default = "default_cg_tol")]
    pub cg_tol: f64,
    #[serde(default = "default_cg_max_iter")]
    pub cg_max_iter: usize,
    /// Steps between stored field snapshots; 0 disables snapshots.
    #[serde(default)]
    pub snapshot_stride: usize,
}

fn default_scheme() -> Scheme {
    Scheme::Imex
}
fn default_picard_tol() -> f64 {
    1e-8
}
fn default_picard_max_iter() -> usize {
    50
}
fn default_picard_window() -> f64 {
    1.0
}
fn default_cg_tol() -> f64 {
    1e-8
}
fn default_cg_max_iter() -> usize {
    50_000
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            dt: 0.05,
            t_final: 20.0,
            scheme: Scheme::Imex,
            kappa: None,
            picard_tol: default_picard_tol(),
            picard_max_iter: default_picard_max_iter(),
            picard_window: default_picard_window(),
            cg_tol: default_cg_tol(),
            cg_max_iter: default_cg_max_iter(),
            snapshot_stride: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        if !(self.dt > 0.0) {
            return Err(SolverError::BadConfig(format!("dt must be > 0, got {}", self.dt)));
        }
        if !(self.t_final >= self.dt) {
            return Err(SolverError::BadConfig(format!(
                "T = {} must be at least dt = {}",
                self.t_final, self.dt
            )));
        }
        for (name, v) in [
            ("picard_tol", self.picard_tol),
            ("cg_tol", self.cg_tol),
            ("picard_window", self.picard_window),
        ] {
            if !(v > 0.0) {
                return Err(SolverError::BadConfig(format!("{name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn step_count(&self) -> usize {
        (self.t_final / self.dt).round() as usize
    }
}

/// Metadata describing a run, carried by trajectories and traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub model: IonicModel,
    pub scheme: Scheme,
    pub dt: f64,
    pub t_final: f64,
    pub nx: usize,
    pub ny: usize,
    pub lx: f64,
    pub ly: f64,
    pub sigma: (f64, f64),
}

/// Per-step scalar diagnostics (one CSV row each).
#[derive(Debug, Clone, Copy)]
pub struct StepDiag {
    pub step: usize,
    pub t: f64,
    pub min_u: f64,
    pub max_u: f64,
    pub min_w: f64,
    pub max_w: f64,
    pub picard_iters: usize,
    pub picard_ratio: f64,
}

/// Rectangle-containment breach beyond the slack delta_S (warning only).
#[derive(Debug, Clone, Copy)]
pub struct RectangleEscape {
    pub step: usize,
    pub delta: f64,
    pub worst_excess: f64,
}

/// Full record of one forward run.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub meta: RunMeta,
    /// Snapshots at the configured stride (always includes the initial and
    /// final states when the stride is nonzero).
    pub snapshots: Vec<StateFields>,
    /// Per-step u values at the measurement faces (step 1..=N).
    pub trace: Vec<Vec<f64>>,
    /// Arc-length coordinates of the measurement faces.
    pub trace_arcs: Vec<f64>,
    pub diagnostics: Vec<StepDiag>,
    /// Whether the initial data lay inside the model rectangle S.
    pub initial_inside_rectangle: bool,
    /// Set if min/max escaped S by more than delta_S at some step.
    pub escape: Option<RectangleEscape>,
}

impl Trajectory {
    pub fn final_state(&self) -> &StateFields {
        self.snapshots.last().expect("trajectory stores at least the final state")
    }

    /// Observed bounds over the whole run (including the initial state).
    pub fn observed_bounds(&self) -> (f64, f64, f64, f64) {
        let mut b = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for d in &self.diagnostics {
            b.0 = b.0.min(d.min_u);
            b.1 = b.1.max(d.max_u);
            b.2 = b.2.min(d.min_w);
            b.3 = b.3.max(d.max_w);
        }
        b
    }

    /// Diagnostics CSV (`step,t,min_u,max_u,min_w,max_w,picard_iters,picard_ratio`).
    pub fn diagnostics_csv(&self) -> String {
        let mut out = String::from("step,t,min_u,max_u,min_w,max_w,picard_iters,picard_ratio\n");
        for d in &self.diagnostics {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                d.step, d.t, d.min_u, d.max_u, d.min_w, d.max_w, d.picard_iters, d.picard_ratio
            );
        }
        out
    }
}

/// Optional behavior overrides used by verification tests.
#[derive(Default)]
pub struct StepHooks<'a> {
    /// Disable the reaction terms (f = g = 0).
    pub reaction_off: bool,
    /// Extra forcing added to the u equation, evaluated at cell centers and
    /// the implicit time level.
    pub source: Option<&'a dyn Fn(f64, f64, f64) -> f64>,
}

/// Advances one IMEX step: (I - dt D) u' = u - dt f(u, w) solved by
/// conjugate gradients warm-started at u; w' = w - dt g(u, w).
pub fn step_imex(
    state: &StateFields,
    op: &SparseOperator,
    model: &IonicModel,
    dt: f64,
    cg_tol: f64,
    cg_max_iter: usize,
) -> Result<(StateFields, CgOutcome), SolverError> {
    let n = op.n;
    if state.u.len() != n || state.w.len() != n {
        return Err(SolverError::ShapeMismatch(format!(
            "state length {} vs operator size {n}",
            state.u.len()
        )));
    }
    let mut rhs = vec![0.0; n];
    for c in 0..n {
        rhs[c] = state.u[c] - dt * model.f(state.u[c], state.w[c]);
    }
    let (u_new, outcome) = cg_shifted(op, dt, &rhs, &state.u, cg_tol, cg_max_iter, 0)?;
    let mut w_new = vec![0.0; n];
    for c in 0..n {
        w_new[c] = state.w[c] - dt * model.g(state.u[c], state.w[c]);
    }
    Ok((StateFields { u: u_new, w: w_new, t: state.t + dt }, outcome))
}

pub(crate) struct RunRecorder {
    pub meta: RunMeta,
    pub snapshots: Vec<StateFields>,
    pub trace: Vec<Vec<f64>>,
    pub trace_arcs: Vec<f64>,
    pub diagnostics: Vec<StepDiag>,
    pub rect: Rectangle,
    pub delta_s: f64,
    pub escape: Option<RectangleEscape>,
    stride: usize,
    total_steps: usize,
}

impl RunRecorder {
    pub fn new(
        grid: &GridGeometry,
        model: &IonicModel,
        cfg: &SolverConfig,
        scheme: Scheme,
    ) -> Self {
        let rect = model.invariant_rectangle();
        let h = grid.cell_size;
        RunRecorder {
            meta: RunMeta {
                model: *model,
                scheme,
                dt: cfg.dt,
                t_final: cfg.t_final,
                nx: grid.nx(),
                ny: grid.ny(),
                lx: grid.domain.lx,
                ly: grid.domain.ly,
                sigma: grid.domain.sigma,
            },
            snapshots: Vec::new(),
            trace: Vec::with_capacity(cfg.step_count()),
            trace_arcs: grid.sigma_faces.iter().map(|f| f.arc).collect(),
            diagnostics: Vec::with_capacity(cfg.step_count()),
            rect,
            delta_s: 10.0 * (cfg.dt + h * h),
            escape: None,
            stride: cfg.snapshot_stride,
            total_steps: cfg.step_count(),
        }
    }

    pub fn maybe_snapshot(&mut self, step: usize, state: &StateFields) {
        let last = step == self.total_steps;
        if step == 0 || last || (self.stride > 0 && step % self.stride == 0) {
            self.snapshots.push(state.clone());
        }
    }

    /// Records the per-step row: trace values, min/max diagnostics,
    /// rectangle-escape monitoring.
    pub fn record_step(
        &mut self,
        grid: &GridGeometry,
        step: usize,
        state: &StateFields,
        picard_iters: usize,
        picard_ratio: f64,
    ) -> Result<(), SolverError> {
        let row: Vec<f64> = grid.sigma_faces.iter().map(|f| state.u[f.cell]).collect();
        self.trace.push(row);
        let mut min_u = f64::INFINITY;
        let mut max_u = f64::NEG_INFINITY;
        for &v in &state.u {
            min_u = min_u.min(v);
            max_u = max_u.max(v);
        }
        let mut min_w = f64::INFINITY;
        let mut max_w = f64::NEG_INFINITY;
        for &v in &state.w {
            min_w = min_w.min(v);
            max_w = max_w.max(v);
        }
        if !(min_u.is_finite() && max_u.is_finite() && min_w.is_finite() && max_w.is_finite()) {
            return Err(SolverError::NonFinite { step });
        }
        let excess = (self.rect.u_lo - min_u)
            .max(max_u - self.rect.u_hi)
            .max(self.rect.w_lo - min_w)
            .max(max_w - self.rect.w_hi);
        if excess > self.delta_s && self.escape.is_none() {
            self.escape = Some(RectangleEscape { step, delta: self.delta_s, worst_excess: excess });
        }
        self.diagnostics.push(StepDiag {
            step,
            t: state.t,
            min_u,
            max_u,
            min_w,
            max_w,
            picard_iters,
            picard_ratio,
        });
        Ok(())
    }

    pub fn finish(self, initial_inside: bool) -> Trajectory {
        Trajectory {
            meta: self.meta,
            snapshots: self.snapshots,
            trace: self.trace,
            trace_arcs: self.trace_arcs,
            diagnostics: self.diagnostics,
            initial_inside_rectangle: initial_inside,
            escape: self.escape,
        }
    }
}

pub(crate) fn initial_inside(rect: &Rectangle, u: &[f64], w: &[f64]) -> bool {
    u.iter().zip(w.iter()).all(|(&a, &b)| rect.contains(a, b))
}

/// IMEX time integration of the coupled system over [0, T]. `u0`, `w0` are
/// given on active cells in compact order.
pub fn solve_forward(
    grid: &GridGeometry,
    k_field: &ConductivityField,
    model: &IonicModel,
    u0: &[f64],
    w0: &[f64],
    cfg: &SolverConfig,
) -> Result<Trajectory, SolverError> {
    solve_forward_with(grid, k_field, model, u0, w0, cfg, &StepHooks::default())
}

/// IMEX integration with verification hooks (reaction switch, source term).
pub fn solve_forward_with(
    grid: &GridGeometry,
    k_field: &ConductivityField,
    model: &IonicModel,
    u0: &[f64],
    w0: &[f64],
    cfg: &SolverConfig,
    hooks: &StepHooks,
) -> Result<Trajectory, SolverError> {
    cfg.validate()?;
    let op = assemble_diffusion(grid, k_field)?;
    let n = op.n;
    if u0.len() != n || w0.len() != n {
        return Err(SolverError::ShapeMismatch(format!(
            "initial data length {} vs {} active cells",
            u0.len(),
            n
        )));
    }
    let steps = cfg.step_count();
    let mut rec = RunRecorder::new(grid, model, cfg, Scheme::Imex);
    let inside = initial_inside(&rec.rect, u0, w0);

    let centers: Vec<(f64, f64)> =
        grid.active_cells.iter().map(|&flat| grid.cell_center(flat)).collect();

    let mut state = StateFields { u: u0.to_vec(), w: w0.to_vec(), t: 0.0 };
    rec.maybe_snapshot(0, &state);
    let mut rhs = vec![0.0; n];
    for step in 1..=steps {
        let t_next = step as f64 * cfg.dt;
        if hooks.reaction_off {
            rhs.copy_from_slice(&state.u);
        } else {
            for c in 0..n {
                rhs[c] = state.u[c] - cfg.dt * model.f(state.u[c], state.w[c]);
            }
        }
        if let Some(src) = hooks.source {
            for c in 0..n {
                rhs[c] += cfg.dt * src(centers[c].0, centers[c].1, t_next);
            }
        }
        let (u_new, _) = cg_shifted(&op, cfg.dt, &rhs, &state.u, cfg.cg_tol, cfg.cg_max_iter, step)?;
        if !hooks.reaction_off {
            for c in 0..n {
                state.w[c] -= cfg.dt * model.g(state.u[c], state.w[c]);
            }
        }
        state.u = u_new;
        state.t = t_next;
        rec.record_step(grid, step, &state, 0, 0.0)?;
        rec.maybe_snapshot(step, &state);
    }
    Ok(rec.finish(inside))
}

/// Per-window record of the fixed-point iteration.
#[derive(Debug, Clone)]
pub struct PicardWindowDiag {
    pub window: usize,
    pub t_start: f64,
    pub iters: usize,
    /// Unweighted sup-norm updates |dU| + |dW| per sweep.
    pub updates: Vec<f64>,
    /// Exponentially weighted updates sup_n e^{-kappa tau_n} |dU_n| + same for w.
    pub weighted_updates: Vec<f64>,
    /// Successive ratios of the weighted updates.
    pub ratios: Vec<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct PicardDiagnostics {
    pub kappa: f64,
    pub m1: f64,
    pub m2: f64,
    pub windows: Vec<PicardWindowDiag>,
}

impl PicardDiagnostics {
    pub fn max_ratio(&self) -> f64 {
        self.windows
            .iter()
            .flat_map(|w| w.ratios.iter().copied())
            .fold(0.0, f64::max)
    }

    pub fn max_iters(&self) -> usize {
        self.windows.iter().map(|w| w.iters).max().unwrap_or(0)
    }
}

/// Fixed-point (Picard) solution of the coupled system, sweep-by-sweep over
/// time subwindows. Each sweep freezes the previous iterate's nonlinearity
/// (clamped to the invariant rectangle), solves the linear implicit
/// diffusion chain for u, and integrates w cellwise; convergence is declared
/// when the unweighted sup-norm update drops below `picard_tol`. The
/// weighted-norm updates and their ratios certify the contraction rate
/// (M1 + M2)/kappa.
pub fn solve_picard(
    grid: &GridGeometry,
    k_field: &ConductivityField,
    model: &IonicModel,
    u0: &[f64],
    w0: &[f64],
    cfg: &SolverConfig,
) -> Result<(Trajectory, PicardDiagnostics), SolverError> {
    cfg.validate()?;
    let op = assemble_diffusion(grid, k_field)?;
    let n = op.n;
    if u0.len() != n || w0.len() != n {
        return Err(SolverError::ShapeMismatch(format!(
            "initial data length {} vs {} active cells",
            u0.len(),
            n
        )));
    }
    let rect = model.invariant_rectangle();
    let (m1, m2) = model.lipschitz_constants(&rect);
    let kappa = cfg.kappa.unwrap_or(2.0 * m1.max(m2));
    if !(kappa > m1.max(m2)) {
        return Err(SolverError::BadConfig(format!(
            "kappa = {kappa} must exceed max(M1, M2) = {}",
            m1.max(m2)
        )));
    }

    let total_steps = cfg.step_count();
    let window_steps = ((cfg.picard_window / cfg.dt).round() as usize).max(1);
    let mut rec = RunRecorder::new(grid, model, cfg, Scheme::Picard);
    let inside = initial_inside(&rect, u0, w0);

    let mut u_start = u0.to_vec();
    let mut w_start = w0.to_vec();
    let mut diagnostics = PicardDiagnostics { kappa, m1, m2, windows: Vec::new() };

    rec.maybe_snapshot(0, &StateFields { u: u_start.clone(), w: w_start.clone(), t: 0.0 });

    let mut window = 0usize;
    let mut done_steps = 0usize;
    while done_steps < total_steps {
        let nw = window_steps.min(total_steps - done_steps);
        // Iterate trajectories over the window: index 0 is the window start.
        let mut u_prev: Vec<Vec<f64>> = vec![u_start.clone(); nw + 1];
        let mut w_prev: Vec<Vec<f64>> = vec![w_start.clone(); nw + 1];
        let mut wdiag = PicardWindowDiag {
            window,
            t_start: done_steps as f64 * cfg.dt,
            iters: 0,
            updates: Vec::new(),
            weighted_updates: Vec::new(),
            ratios: Vec::new(),
            converged: false,
        };

        loop {
            // One sweep: linear parabolic solve against the frozen iterate.
            let mut u_new: Vec<Vec<f64>> = Vec::with_capacity(nw + 1);
            let mut w_new: Vec<Vec<f64>> = Vec::with_capacity(nw + 1);
            u_new.push(u_start.clone());
            w_new.push(w_start.clone());
            let mut rhs = vec![0.0; n];
            for m in 0..nw {
                let (up, wp) = (&u_prev[m + 1], &w_prev[m + 1]);
                {
                    let u_cur = &u_new[m];
                    for c in 0..n {
                        let (cu, cw) = rect.clamp(up[c], wp[c]);
                        rhs[c] = u_cur[c] - cfg.dt * model.f(cu, cw);
                    }
                }
                let (u_next, _) = cg_shifted(
                    &op,
                    cfg.dt,
                    &rhs,
                    &u_prev[m + 1],
                    cfg.cg_tol,
                    cfg.cg_max_iter,
                    done_steps + m + 1,
                )?;
                let mut w_next = w_new[m].clone();
                for c in 0..n {
                    let (cu, cw) = rect.clamp(up[c], wp[c]);
                    w_next[c] -= cfg.dt * model.g(cu, cw);
                }
                u_new.push(u_next);
                w_new.push(w_next);
            }

            // Sup-norm updates, unweighted and exponentially weighted.
            let mut du: f64 = 0.0;
            let mut dw: f64 = 0.0;
            let mut du_wt: f64 = 0.0;
            let mut dw_wt: f64 = 0.0;
            for m in 1..=nw {
                let tau = m as f64 * cfg.dt;
                let weight = (-kappa * tau).exp();
                let mut row_u: f64 = 0.0;
                for c in 0..n {
                    row_u = row_u.max((u_new[m][c] - u_prev[m][c]).abs());
                }
                let mut row_w: f64 = 0.0;
                for c in 0..n {
                    row_w = row_w.max((w_new[m][c] - w_prev[m][c]).abs());
                }
                du = du.max(row_u);
                dw = dw.max(row_w);
                du_wt = du_wt.max(weight * row_u);
                dw_wt = dw_wt.max(weight * row_w);
            }
            let update = du + dw;
            let update_wt = du_wt + dw_wt;
            if let Some(&prev_wt) = wdiag.weighted_updates.last() {
                wdiag.ratios.push(if prev_wt > 0.0 { update_wt / prev_wt } else { 0.0 });
            }
            wdiag.updates.push(update);
            wdiag.weighted_updates.push(update_wt);
            wdiag.iters += 1;

            u_prev = u_new;
            w_prev = w_new;

            if update < cfg.picard_tol {
                wdiag.converged = true;
                break;
            }
            if wdiag.iters >= cfg.picard_max_iter {
                let ratio = wdiag.ratios.last().copied().unwrap_or(f64::NAN);
                return Err(SolverError::PicardStalled {
                    window,
                    iters: wdiag.iters,
                    update,
                    ratio,
                });
            }
        }

        // Commit the converged window to the trajectory.
        let iters = wdiag.iters;
        let last_ratio = wdiag.ratios.last().copied().unwrap_or(0.0);
        for m in 1..=nw {
            let step = done_steps + m;
            let state = StateFields {
                u: std::mem::take(&mut u_prev[m]),
                w: std::mem::take(&mut w_prev[m]),
                t: step as f64 * cfg.dt,
            };
            rec.record_step(grid, step, &state, iters, last_ratio)?;
            rec.maybe_snapshot(step, &state);
            if m == nw {
                u_start = state.u;
                w_start = state.w;
            }
        }
        diagnostics.windows.push(wdiag);
        done_steps += nw;
        window += 1;
    }

    Ok((rec.finish(inside), diagnostics))
}

/// Largest discrete conormal derivative of a cell field at wall and cavity
/// faces: |K_nn (u_adjacent - u_inward) / h| over boundary-adjacent cell
/// pairs. A flux-compatible initial datum gives a value that vanishes with
/// h; reported for diagnostics, never enforced.
pub fn flux_compatibility(grid: &GridGeometry, k_field: &ConductivityField, u: &[f64]) -> f64 {
    let (nx, ny) = (grid.nx(), grid.ny());
    let h = grid.cell_size;
    let active = |i: isize, j: isize| -> Option<usize> {
        if i < 0 || j < 0 || i >= nx as isize || j >= ny as isize {
            return None;
        }
        let flat = j as usize * nx + i as usize;
        (grid.cell_mask[flat] == CellKind::Active).then(|| grid.cell_index[flat])
    };
    let mut worst: f64 = 0.0;
    for j in 0..ny as isize {
        for i in 0..nx as isize {
            let Some(c) = active(i, j) else { continue };
            let flat = j as usize * nx + i as usize;
            // For each inactive face of this cell, difference toward the
            // opposite neighbor approximates the normal derivative.
            let sides: [((isize, isize), (isize, isize), f64); 4] = [
                ((i - 1, j), (i + 1, j), k_field.kxx[flat]),
                ((i + 1, j), (i - 1, j), k_field.kxx[flat]),
                ((i, j - 1), (i, j + 1), k_field.kyy[flat]),
                ((i, j + 1), (i, j - 1), k_field.kyy[flat]),
            ];
            for ((bi, bj), (ni, nj), k) in sides {
                if active(bi, bj).is_none() {
                    if let Some(n) = active(ni, nj) {
                        worst = worst.max((k * (u[c] - u[n]) / h).abs());
                    }
                }
            }
        }
    }
    worst
}

/// Legacy VTK structured-points snapshot of one scalar field; cavity and
/// dropped cells are written as NaN.
pub fn vtk_snapshot(grid: &GridGeometry, values: &[f64], field_name: &str, title: &str) -> String {
    assert_eq!(values.len(), grid.active_count);
    let (nx, ny) = (grid.nx(), grid.ny());
    let h = grid.cell_size;
    let mut out = String::new();
    let _ = writeln!(out, "# vtk DataFile Version 3.0");
    let _ = writeln!(out, "{title}");
    let _ = writeln!(out, "ASCII");
    let _ = writeln!(out, "DATASET STRUCTURED_POINTS");
    let _ = writeln!(out, "DIMENSIONS {} {} 1", nx + 1, ny + 1);
    let _ = writeln!(out, "ORIGIN 0 0 0");
    let _ = writeln!(out, "SPACING {h} {h} {h}");
    let _ = writeln!(out, "CELL_DATA {}", nx * ny);
    let _ = writeln!(out, "SCALARS {field_name} double 1");
    let _ = writeln!(out, "LOOKUP_TABLE default");
    for flat in 0..nx * ny {
        let idx = grid.cell_index[flat];
        if idx == usize::MAX {
            let _ = writeln!(out, "NaN");
        } else {
            let _ = writeln!(out, "{}", values[idx]);
        }
    }
    out
}
