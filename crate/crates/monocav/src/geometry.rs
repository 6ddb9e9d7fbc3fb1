//! Masked structured grid over a rectangle minus a parametrized cavity.
//!
//! The domain is voxelized on a uniform cell grid: a cell belongs to the
//! cavity iff its center lies inside the cavity region (stair-step
//! boundary). Faces are classified so the flux assembly can impose zero
//! flux on both the outer wall and the cavity wall with a uniform stencil.
//! Arc length along the outer wall runs counterclockwise from the origin
//! corner: bottom, right, top, left.

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// Number of samples used for star-cavity radius and boundary-distance checks.
const BOUNDARY_SAMPLES: usize = 720;

/// Minimum admissible star radius as a fraction of the mean radius.
const STAR_MIN_RADIUS_FRACTION: f64 = 0.1;

/// A cavity cell closer than this many cells to the outer wall is rejected.
const WALL_CLEARANCE_CELLS: usize = 2;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GeometryError {
    #[error("cavity cell within {clearance} cells of the outer wall (cell ({i},{j}))")]
    CavityTouchesBoundary { i: usize, j: usize, clearance: usize },
    #[error("star radius drops to {min_radius:.6} (< {limit:.6}) at angle {theta:.4}")]
    DegenerateCavity { min_radius: f64, limit: f64, theta: f64 },
    #[error("no outer-wall face lies in the measurement interval [{s0}, {s1}]")]
    EmptySigma { s0: f64, s1: f64 },
    #[error("cavity center ({x}, {y}) outside the domain")]
    CavityOutsideDomain { x: f64, y: f64 },
    #[error("domain spec invalid: {0}")]
    BadDomain(String),
}

/// Rectangular domain, grid resolution, and the measurement arc.
///
/// `sigma` is a contiguous arc-length interval on the outer wall given as
/// fractions of the perimeter, counterclockwise from the origin corner.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub lx: f64,
    pub ly: f64,
    pub nx: usize,
    pub ny: usize,
    /// Measurement arc [s0, s1] as perimeter fractions, 0 <= s0 < s1 <= 1.
    pub sigma: (f64, f64),
}

impl DomainSpec {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.lx > 0.0 && self.ly > 0.0) {
            return Err(GeometryError::BadDomain("lx, ly must be > 0".into()));
        }
        if self.nx < 8 || self.ny < 8 {
            return Err(GeometryError::BadDomain("nx, ny must be >= 8".into()));
        }
        let (s0, s1) = self.sigma;
        if !(0.0 <= s0 && s0 < s1 && s1 <= 1.0) {
            return Err(GeometryError::BadDomain(
                "sigma must satisfy 0 <= s0 < s1 <= 1".into(),
            ));
        }
        let hx = self.lx / self.nx as f64;
        let hy = self.ly / self.ny as f64;
        if (hx - hy).abs() > 1e-12 * hx.max(hy) {
            return Err(GeometryError::BadDomain(format!(
                "cells must be square: lx/nx = {hx} differs from ly/ny = {hy}"
            )));
        }
        Ok(())
    }

    /// Cell size h = lx/nx (= ly/ny for a valid spec).
    pub fn cell_size(&self) -> f64 {
        self.lx / self.nx as f64
    }

    pub fn perimeter(&self) -> f64 {
        2.0 * (self.lx + self.ly)
    }
}

/// Parametrized cavity: none, a disc, or a star-shaped region whose
/// boundary radius is a finite Fourier sum r(theta) = rbar + sum_k
/// (a_k cos k theta + b_k sin k theta).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CavityParam {
    None,
    Disc { center: (f64, f64), radius: f64 },
    Star { center: (f64, f64), radius: f64, fourier: Vec<(f64, f64)> },
}

impl CavityParam {
    pub fn is_none(&self) -> bool {
        matches!(self, CavityParam::None)
    }

    /// Radius at polar angle theta (disc: constant).
    fn radius_at(&self, theta: f64) -> f64 {
        match self {
            CavityParam::None => 0.0,
            CavityParam::Disc { radius, .. } => *radius,
            CavityParam::Star { radius, fourier, .. } => {
                let mut r = *radius;
                for (k, (a, b)) in fourier.iter().enumerate() {
                    let kt = (k + 1) as f64 * theta;
                    r += a * kt.cos() + b * kt.sin();
                }
                r
            }
        }
    }

    /// Checks positivity of the radius function and that the center lies
    /// strictly inside the domain.
    pub fn validate(&self, domain: &DomainSpec) -> Result<(), GeometryError> {
        let center = match self {
            CavityParam::None => return Ok(()),
            CavityParam::Disc { center, radius } => {
                if *radius <= 0.0 {
                    return Err(GeometryError::DegenerateCavity {
                        min_radius: *radius,
                        limit: 0.0,
                        theta: 0.0,
                    });
                }
                *center
            }
            CavityParam::Star { center, radius, .. } => {
                let rbar = *radius;
                let limit = STAR_MIN_RADIUS_FRACTION * rbar;
                let mut min_r = f64::INFINITY;
                let mut min_theta = 0.0;
                for k in 0..BOUNDARY_SAMPLES {
                    let theta = 2.0 * std::f64::consts::PI * k as f64 / BOUNDARY_SAMPLES as f64;
                    let r = self.radius_at(theta);
                    if r < min_r {
                        min_r = r;
                        min_theta = theta;
                    }
                }
                if !(rbar > 0.0) || min_r < limit {
                    return Err(GeometryError::DegenerateCavity {
                        min_radius: min_r,
                        limit,
                        theta: min_theta,
                    });
                }
                *center
            }
        };
        if !(center.0 > 0.0 && center.0 < domain.lx && center.1 > 0.0 && center.1 < domain.ly) {
            return Err(GeometryError::CavityOutsideDomain { x: center.0, y: center.1 });
        }
        Ok(())
    }

    /// Point-inclusion test (strict interior of the parametrized region).
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            CavityParam::None => false,
            CavityParam::Disc { center, radius } => {
                let dx = x - center.0;
                let dy = y - center.1;
                dx * dx + dy * dy < radius * radius
            }
            CavityParam::Star { center, .. } => {
                let dx = x - center.0;
                let dy = y - center.1;
                let rho = (dx * dx + dy * dy).sqrt();
                let theta = dy.atan2(dx);
                rho < self.radius_at(theta)
            }
        }
    }

    /// Minimum distance from the sampled cavity boundary to the outer wall.
    pub fn wall_distance(&self, domain: &DomainSpec) -> f64 {
        match self {
            CavityParam::None => f64::INFINITY,
            _ => {
                let center = match self {
                    CavityParam::Disc { center, .. } | CavityParam::Star { center, .. } => *center,
                    CavityParam::None => unreachable!(),
                };
                let mut min_d = f64::INFINITY;
                for k in 0..BOUNDARY_SAMPLES {
                    let theta = 2.0 * std::f64::consts::PI * k as f64 / BOUNDARY_SAMPLES as f64;
                    let r = self.radius_at(theta);
                    let x = center.0 + r * theta.cos();
                    let y = center.1 + r * theta.sin();
                    let d = x.min(domain.lx - x).min(y).min(domain.ly - y);
                    min_d = min_d.min(d);
                }
                min_d
            }
        }
    }
}

/// Per-cell classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellKind {
    Active,
    Cavity,
    /// Active pocket disconnected from the measurement arc, dropped.
    Exterior,
}

/// Per-face classification. Faces sit between cells or between a cell and
/// the outside of the rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaceClass {
    /// Both adjacent cells active: carries flux.
    Interior,
    /// Outer-wall face of an active cell: zero flux.
    OuterBoundary,
    /// Separates an active cell from a cavity (or dropped) cell: zero flux.
    CavityBoundary,
    /// No active cell on either side.
    Inactive,
}

/// One outer-wall face on the measurement arc.
#[derive(Debug, Clone, Copy)]
pub struct SigmaFace {
    /// Active cell adjacent to the face (compact active index).
    pub cell: usize,
    /// Arc length of the face center from the origin corner, counterclockwise.
    pub arc: f64,
}

/// Masked structured grid: the computational carrier of the domain minus
/// the cavity.
#[derive(Debug, Clone)]
pub struct GridGeometry {
    pub domain: DomainSpec,
    pub cavity: CavityParam,
    /// h = lx/nx = ly/ny.
    pub cell_size: f64,
    /// Row-major (j * nx + i) cell classification.
    pub cell_mask: Vec<CellKind>,
    /// Compact index of each active cell, row-major scan order; usize::MAX otherwise.
    pub cell_index: Vec<usize>,
    /// Inverse map: flat (i, j) id of each active cell.
    pub active_cells: Vec<usize>,
    /// Vertical faces: (nx+1) * ny, index j * (nx+1) + i; face i sits between
    /// cells (i-1, j) and (i, j).
    pub face_x: Vec<FaceClass>,
    /// Horizontal faces: nx * (ny+1), index j * nx + i; face j sits between
    /// cells (i, j-1) and (i, j).
    pub face_y: Vec<FaceClass>,
    /// Outer-wall faces on the measurement arc, ordered by arc length.
    pub sigma_faces: Vec<SigmaFace>,
    pub active_count: usize,
    /// Number of cells dropped as disconnected pockets.
    pub dropped_cells: usize,
}

impl GridGeometry {
    #[inline]
    pub fn nx(&self) -> usize {
        self.domain.nx
    }

    #[inline]
    pub fn ny(&self) -> usize {
        self.domain.ny
    }

    /// Center coordinates of flat cell id.
    #[inline]
    pub fn cell_center(&self, flat: usize) -> (f64, f64) {
        let i = flat % self.domain.nx;
        let j = flat / self.domain.nx;
        ((i as f64 + 0.5) * self.cell_size, (j as f64 + 0.5) * self.cell_size)
    }

    pub fn cavity_cell_count(&self) -> usize {
        self.cell_mask.iter().filter(|k| **k == CellKind::Cavity).count()
    }

    pub fn cavity_boundary_face_count(&self) -> usize {
        self.face_x
            .iter()
            .chain(self.face_y.iter())
            .filter(|f| **f == FaceClass::CavityBoundary)
            .count()
    }

    /// ASCII PGM image of the mask (255 = active, 0 = cavity/exterior),
    /// top row first.
    pub fn mask_pgm(&self) -> String {
        let (nx, ny) = (self.domain.nx, self.domain.ny);
        let mut out = String::new();
        let _ = writeln!(out, "P2");
        let _ = writeln!(out, "{nx} {ny}");
        let _ = writeln!(out, "255");
        for j in (0..ny).rev() {
            let mut row = String::new();
            for i in 0..nx {
                if i > 0 {
                    row.push(' ');
                }
                let v = match self.cell_mask[j * nx + i] {
                    CellKind::Active => "255",
                    _ => "0",
                };
                row.push_str(v);
            }
            let _ = writeln!(out, "{row}");
        }
        out
    }
}

/// Arc length of a point on the outer wall, counterclockwise from (0, 0):
/// bottom, right, top, left. `wall` selects the wall; (x, y) must lie on it.
fn wall_arc(domain: &DomainSpec, wall: Wall, x: f64, y: f64) -> f64 {
    match wall {
        Wall::Bottom => x,
        Wall::Right => domain.lx + y,
        Wall::Top => domain.lx + domain.ly + (domain.lx - x),
        Wall::Left => 2.0 * domain.lx + domain.ly + (domain.ly - y),
    }
}

#[derive(Clone, Copy)]
enum Wall {
    Bottom,
    Right,
    Top,
    Left,
}

/// Builds the masked grid: voxelizes the cavity by cell-center inclusion,
/// classifies faces, retains only the connected active component touching
/// the measurement arc, and enforces the 2-cell wall clearance.
pub fn build_masked_grid(
    domain: &DomainSpec,
    cavity: &CavityParam,
) -> Result<GridGeometry, GeometryError> {
    domain.validate()?;
    cavity.validate(domain)?;
    let (nx, ny) = (domain.nx, domain.ny);
    let h = domain.cell_size();

    let mut mask = vec![CellKind::Active; nx * ny];
    for j in 0..ny {
        for i in 0..nx {
            let x = (i as f64 + 0.5) * h;
            let y = (j as f64 + 0.5) * h;
            if cavity.contains(x, y) {
                mask[j * nx + i] = CellKind::Cavity;
            }
        }
    }

    // Wall clearance: a cavity cell with grid index within 2 of the wall
    // leaves no room for well-defined fluxes between cavity and wall.
    for j in 0..ny {
        for i in 0..nx {
            if mask[j * nx + i] == CellKind::Cavity {
                let c = WALL_CLEARANCE_CELLS;
                if i < c || j < c || i >= nx - c || j >= ny - c {
                    return Err(GeometryError::CavityTouchesBoundary { i, j, clearance: c });
                }
            }
        }
    }

    // Σ faces exist on the outer wall wherever the adjacent cell is active;
    // find the seed cells of the retained component first.
    let (s0, s1) = domain.sigma;
    let perimeter = domain.perimeter();
    let mut sigma_seed_cells: Vec<usize> = Vec::new();
    let mut seen = vec![false; nx * ny];
    let mut push_seed = |flat: usize, seen: &mut Vec<bool>| {
        if !seen[flat] {
            seen[flat] = true;
            sigma_seed_cells.push(flat);
        }
    };
    // Bottom wall (j = 0), right (i = nx-1), top (j = ny-1), left (i = 0).
    for i in 0..nx {
        let arc = wall_arc(domain, Wall::Bottom, (i as f64 + 0.5) * h, 0.0) / perimeter;
        if arc >= s0 && arc <= s1 {
            push_seed(i, &mut seen);
        }
    }
    for j in 0..ny {
        let arc = wall_arc(domain, Wall::Right, domain.lx, (j as f64 + 0.5) * h) / perimeter;
        if arc >= s0 && arc <= s1 {
            push_seed(j * nx + (nx - 1), &mut seen);
        }
    }
    for i in 0..nx {
        let arc = wall_arc(domain, Wall::Top, (i as f64 + 0.5) * h, domain.ly) / perimeter;
        if arc >= s0 && arc <= s1 {
            push_seed((ny - 1) * nx + i, &mut seen);
        }
    }
    for j in 0..ny {
        let arc = wall_arc(domain, Wall::Left, 0.0, (j as f64 + 0.5) * h) / perimeter;
        if arc >= s0 && arc <= s1 {
            push_seed(j * nx, &mut seen);
        }
    }
    sigma_seed_cells.retain(|&flat| mask[flat] == CellKind::Active);
    if sigma_seed_cells.is_empty() {
        return Err(GeometryError::EmptySigma { s0, s1 });
    }

    // Flood-fill (4-connectivity) from the Σ-adjacent cells; active cells
    // not reached are disconnected pockets and get dropped.
    let mut reached = vec![false; nx * ny];
    let mut stack = sigma_seed_cells.clone();
    for &s in &stack {
        reached[s] = true;
    }
    while let Some(flat) = stack.pop() {
        let i = flat % nx;
        let j = flat / nx;
        let mut visit = |fi: usize, fj: usize, stack: &mut Vec<usize>| {
            let f = fj * nx + fi;
            if mask[f] == CellKind::Active && !reached[f] {
                reached[f] = true;
                stack.push(f);
            }
        };
        if i > 0 {
            visit(i - 1, j, &mut stack);
        }
        if i + 1 < nx {
            visit(i + 1, j, &mut stack);
        }
        if j > 0 {
            visit(i, j - 1, &mut stack);
        }
        if j + 1 < ny {
            visit(i, j + 1, &mut stack);
        }
    }
    let mut dropped = 0usize;
    for flat in 0..nx * ny {
        if mask[flat] == CellKind::Active && !reached[flat] {
            mask[flat] = CellKind::Exterior;
            dropped += 1;
        }
    }

    // Compact active indexing in row-major scan order.
    let mut cell_index = vec![usize::MAX; nx * ny];
    let mut active_cells = Vec::new();
    for flat in 0..nx * ny {
        if mask[flat] == CellKind::Active {
            cell_index[flat] = active_cells.len();
            active_cells.push(flat);
        }
    }
    let active_count = active_cells.len();

    // Face classification.
    let mut face_x = vec![FaceClass::Inactive; (nx + 1) * ny];
    for j in 0..ny {
        for i in 0..=nx {
            let left = if i > 0 { Some(mask[j * nx + i - 1]) } else { None };
            let right = if i < nx { Some(mask[j * nx + i]) } else { None };
            face_x[j * (nx + 1) + i] = classify_face(left, right);
        }
    }
    let mut face_y = vec![FaceClass::Inactive; nx * (ny + 1)];
    for j in 0..=ny {
        for i in 0..nx {
            let below = if j > 0 { Some(mask[(j - 1) * nx + i]) } else { None };
            let above = if j < ny { Some(mask[j * nx + i]) } else { None };
            face_y[j * nx + i] = classify_face(below, above);
        }
    }

    // Σ faces ordered by arc length: walk bottom, right, top, left.
    let mut sigma_faces = Vec::new();
    let mut push_face = |flat_cell: usize, arc_abs: f64| {
        if mask[flat_cell] == CellKind::Active {
            let frac = arc_abs / perimeter;
            if frac >= s0 && frac <= s1 {
                sigma_faces.push(SigmaFace { cell: cell_index[flat_cell], arc: arc_abs });
            }
        }
    };
    for i in 0..nx {
        push_face(i, wall_arc(domain, Wall::Bottom, (i as f64 + 0.5) * h, 0.0));
    }
    for j in 0..ny {
        push_face(j * nx + (nx - 1), wall_arc(domain, Wall::Right, domain.lx, (j as f64 + 0.5) * h));
    }
    for i in (0..nx).rev() {
        push_face((ny - 1) * nx + i, wall_arc(domain, Wall::Top, (i as f64 + 0.5) * h, domain.ly));
    }
    for j in (0..ny).rev() {
        push_face(j * nx, wall_arc(domain, Wall::Left, 0.0, (j as f64 + 0.5) * h));
    }
    if sigma_faces.is_empty() {
        return Err(GeometryError::EmptySigma { s0, s1 });
    }

    Ok(GridGeometry {
        domain: domain.clone(),
        cavity: cavity.clone(),
        cell_size: h,
        cell_mask: mask,
        cell_index,
        active_cells,
        face_x,
        face_y,
        sigma_faces,
        active_count,
        dropped_cells: dropped,
    })
}

fn classify_face(a: Option<CellKind>, b: Option<CellKind>) -> FaceClass {
    use CellKind::*;
    match (a, b) {
        (Some(Active), Some(Active)) => FaceClass::Interior,
        (None, Some(Active)) | (Some(Active), None) => FaceClass::OuterBoundary,
        (Some(Active), Some(Cavity | Exterior)) | (Some(Cavity | Exterior), Some(Active)) => {
            FaceClass::CavityBoundary
        }
        _ => FaceClass::Inactive,
    }
}

/// Scalar field on the full (unmasked) cell grid; the solver restricts it
/// to active cells.
#[derive(Debug, Clone)]
pub struct InitialField {
    pub nx: usize,
    pub ny: usize,
    pub values: Vec<f64>,
}

impl InitialField {
    pub fn zero(nx: usize, ny: usize) -> Self {
        InitialField { nx, ny, values: vec![0.0; nx * ny] }
    }

    pub fn constant(nx: usize, ny: usize, c: f64) -> Self {
        InitialField { nx, ny, values: vec![c; nx * ny] }
    }

    pub fn from_fn(domain: &DomainSpec, f: impl Fn(f64, f64) -> f64) -> Self {
        let h = domain.cell_size();
        let mut values = Vec::with_capacity(domain.nx * domain.ny);
        for j in 0..domain.ny {
            for i in 0..domain.nx {
                values.push(f((i as f64 + 0.5) * h, (j as f64 + 0.5) * h));
            }
        }
        InitialField { nx: domain.nx, ny: domain.ny, values }
    }

    /// Bump supported in the collar of the outer wall:
    /// amplitude * cos^2(pi s / 2) with s = dist(x, wall)/width for s < 1,
    /// zero beyond. The profile has zero normal slope at the wall, so it is
    /// compatible with the zero-flux condition.
    pub fn collar_bump(domain: &DomainSpec, amplitude: f64, width: f64) -> Self {
        Self::from_fn(domain, |x, y| {
            let d = x.min(domain.lx - x).min(y).min(domain.ly - y);
            let s = d / width;
            if s < 1.0 {
                let c = (std::f64::consts::FRAC_PI_2 * s).cos();
                amplitude * c * c
            } else {
                0.0
            }
        })
    }

    /// Restriction to the active cells of a grid, in compact index order.
    pub fn restrict(&self, grid: &GridGeometry) -> Vec<f64> {
        assert_eq!(self.nx, grid.domain.nx, "field resolution mismatch");
        assert_eq!(self.ny, grid.domain.ny, "field resolution mismatch");
        grid.active_cells.iter().map(|&flat| self.values[flat]).collect()
    }
}

/// Geometric-hypothesis report: cavity-to-wall separation and the
/// initial-datum support conditions. Report-only; callers decide whether
/// to abort.
#[derive(Debug, Clone, Serialize)]
pub struct AssumptionReport {
    pub d0: f64,
    /// Min distance from sampled cavity boundary to the outer wall.
    pub cavity_wall_distance: f64,
    /// cavity_wall_distance >= d0 (vacuously true without a cavity).
    pub cavity_separation_ok: bool,
    /// Sup over support cells of distance to the outer wall.
    pub support_sup_distance: f64,
    /// Support contained in the d0/2 collar of the wall (sup reading).
    pub support_in_collar: bool,
    /// Inf over support cells of distance to the outer wall.
    pub support_inf_distance: f64,
    /// Literal inf-distance reading: inf <= d0/2.
    pub support_inf_ok: bool,
    /// No support cell lies inside the cavity region.
    pub support_cavity_disjoint: bool,
}

impl AssumptionReport {
    pub fn all_ok(&self) -> bool {
        self.cavity_separation_ok && self.support_in_collar && self.support_cavity_disjoint
    }
}

/// Checks the cavity-wall separation (against d0) and the initial-datum
/// support conditions (against d0/2) on the full cell grid.
pub fn check_assumptions(
    grid: &GridGeometry,
    cavity: &CavityParam,
    u0: &InitialField,
    d0: f64,
) -> AssumptionReport {
    let domain = &grid.domain;
    let h = grid.cell_size;
    let cavity_wall_distance = cavity.wall_distance(domain);
    let cavity_separation_ok = cavity.is_none() || cavity_wall_distance >= d0;

    let mut sup_d: f64 = 0.0;
    let mut inf_d = f64::INFINITY;
    let mut disjoint = true;
    let mut any_support = false;
    for j in 0..domain.ny {
        for i in 0..domain.nx {
            let v = u0.values[j * domain.nx + i];
            if v != 0.0 {
                any_support = true;
                let x = (i as f64 + 0.5) * h;
                let y = (j as f64 + 0.5) * h;
                let d = x.min(domain.lx - x).min(y).min(domain.ly - y);
                sup_d = sup_d.max(d);
                inf_d = inf_d.min(d);
                if cavity.contains(x, y) {
                    disjoint = false;
                }
            }
        }
    }
    if !any_support {
        inf_d = 0.0;
    }

    AssumptionReport {
        d0,
        cavity_wall_distance,
        cavity_separation_ok,
        support_sup_distance: sup_d,
        support_in_collar: sup_d <= 0.5 * d0,
        support_inf_distance: inf_d,
        support_inf_ok: inf_d <= 0.5 * d0,
        support_cavity_disjoint: disjoint,
    }
}
