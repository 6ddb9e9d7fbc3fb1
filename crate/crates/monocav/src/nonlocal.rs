//! History-integral form of the coupled system.
//!
//! Eliminating the recovery variable gives
//!
//! ```text
//! w(t) = e^{-c1 t} w0 + I(t),    I(t) = integral_0^t e^{-c1 (t-s)} g1(u(s)) ds
//! ```
//!
//! so u satisfies a single reaction-diffusion equation with a decaying
//! memory term. The quadrature updates the accumulated integral by one
//! exponential decay plus a midpoint-weighted rectangle per step,
//!
//! ```text
//! I_{n+1} = e^{-c1 dt} I_n + dt e^{-c1 dt / 2} g1(u_n),
//! ```
//!
//! which is exact for the kernel factor and first-order in the source. The
//! u-update is IMEX against the memory at the old time level, so the scheme
//! needs one linear solve per step, like the two-variable path.

use crate::forward::{
    assemble_diffusion, cg_shifted, initial_inside, ConductivityField, RunRecorder, Scheme,
    SolverConfig, SolverError, SparseOperator, StateFields, Trajectory,
};
use crate::geometry::GridGeometry;
use crate::ionic::{IonicModel, NonlocalDecomposition};

/// Accumulated memory of one run: the decayed initial recovery field and
/// the quadrature of the history integral.
#[derive(Debug, Clone)]
pub struct MemoryState {
    /// I_n, the accumulated kernel integral.
    pub intensity: Vec<f64>,
    /// e^{-c1 t_n} w0.
    pub w0_term: Vec<f64>,
}

impl MemoryState {
    pub fn new(w0: &[f64]) -> Self {
        MemoryState { intensity: vec![0.0; w0.len()], w0_term: w0.to_vec() }
    }

    /// The recovery field this memory represents: w_n = e^{-c1 t_n} w0 + I_n.
    pub fn reconstructed_w(&self) -> Vec<f64> {
        self.intensity.iter().zip(&self.w0_term).map(|(i, w)| w + i).collect()
    }

    /// One quadrature update using u at the old time level.
    pub fn advance(&mut self, decomp: &NonlocalDecomposition, dt: f64, u_old: &[f64]) {
        let decay = (-decomp.c1 * dt).exp();
        let weight = dt * (-decomp.c1 * dt * 0.5).exp();
        for c in 0..self.intensity.len() {
            self.intensity[c] = decay * self.intensity[c] + weight * decomp.g1.eval(u_old[c]);
            self.w0_term[c] *= decay;
        }
    }
}

/// One step of the history-integral scheme: solves
/// (I - dt D) u' = u - dt [f1(u) + k1(u) (I_n + e^{-c1 t_n} w0)]
/// and then advances the memory with the old u.
pub fn step_nonlocal(
    state: &StateFields,
    mem: &mut MemoryState,
    op: &SparseOperator,
    decomp: &NonlocalDecomposition,
    dt: f64,
    cg_tol: f64,
    cg_max_iter: usize,
    step: usize,
) -> Result<StateFields, SolverError> {
    let n = op.n;
    if state.u.len() != n || mem.intensity.len() != n {
        return Err(SolverError::ShapeMismatch(format!(
            "state length {} / memory length {} vs operator size {n}",
            state.u.len(),
            mem.intensity.len()
        )));
    }
    let mut rhs = vec![0.0; n];
    for c in 0..n {
        let w_mem = mem.intensity[c] + mem.w0_term[c];
        rhs[c] = state.u[c] - dt * (decomp.f1(state.u[c]) + decomp.k1(state.u[c]) * w_mem);
    }
    let (u_new, _) = cg_shifted(op, dt, &rhs, &state.u, cg_tol, cg_max_iter, step)?;
    mem.advance(decomp, dt, &state.u);
    Ok(StateFields { u: u_new, w: mem.reconstructed_w(), t: state.t + dt })
}

/// Forward solution through the history-integral scheme. The trajectory's w
/// fields hold the reconstructed recovery variable.
pub fn solve_nonlocal(
    grid: &GridGeometry,
    k_field: &ConductivityField,
    model: &IonicModel,
    u0: &[f64],
    w0: &[f64],
    cfg: &SolverConfig,
) -> Result<Trajectory, SolverError> {
    let decomp = model.nonlocal_decomposition();
    solve_nonlocal_with(grid, k_field, model, u0, w0, cfg, &decomp)
}

/// Same, with an explicit decomposition (tests swap in synthetic kernels).
pub fn solve_nonlocal_with(
    grid: &GridGeometry,
    k_field: &ConductivityField,
    model: &IonicModel,
    u0: &[f64],
    w0: &[f64],
    cfg: &SolverConfig,
    decomp: &NonlocalDecomposition,
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
    let mut rec = RunRecorder::new(grid, model, cfg, Scheme::Nonlocal);
    let inside = initial_inside(&rec.rect, u0, w0);

    let mut state = StateFields { u: u0.to_vec(), w: w0.to_vec(), t: 0.0 };
    let mut mem = MemoryState::new(w0);
    rec.maybe_snapshot(0, &state);
    for step in 1..=steps {
        state = step_nonlocal(
            &state,
            &mut mem,
            &op,
            decomp,
            cfg.dt,
            cfg.cg_tol,
            cfg.cg_max_iter,
            step,
        )?;
        state.t = step as f64 * cfg.dt;
        rec.record_step(grid, step, &state, 0, 0.0)?;
        rec.maybe_snapshot(step, &state);
    }
    Ok(rec.finish(inside))
}
