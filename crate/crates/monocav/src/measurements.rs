//! Boundary traces: the data of the identification problem.
//!
//! A trace is u sampled at the cells adjacent to the measurement faces,
//! every solver step, over the whole run. Traces are compared in a discrete
//! L2 norm over arc length and time, stored as commented CSV with
//! shortest-representation floats (bit-exact round-trips), and can be
//! restricted to coarser space/time sampling or perturbed with seeded
//! Gaussian noise.

use crate::forward::{RunMeta, Trajectory};
use crate::geometry::GridGeometry;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum MeasureError {
    #[error("traces incompatible: {0}")]
    IncompatibleTraces(String),
    #[error("{path}:{line}: {msg}")]
    MalformedFile { path: String, line: usize, msg: String },
    #[error("trajectory has no measurement faces")]
    EmptySigma,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// u restricted to the measurement arc over (0, T]: one row per solver step,
/// one column per measurement face (ascending arc length).
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryTrace {
    pub meta: RunMeta,
    /// Arc-length coordinates of the columns.
    pub arcs: Vec<f64>,
    /// Row time stamps t_n = n dt, n = 1..=N.
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl BoundaryTrace {
    /// Arc-length weight of one column (the face length).
    pub fn arc_weight(&self) -> f64 {
        self.meta.lx / self.meta.nx as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.values
            .iter()
            .flat_map(|r| r.iter())
            .fold(0.0f64, |m, &v| m.max(v.abs()))
    }

    /// Additive Gaussian noise with standard deviation `sigma_fraction`
    /// times the trace's max magnitude; seeded, Box-Muller over ChaCha8.
    pub fn with_noise(&self, sigma_fraction: f64, seed: u64) -> BoundaryTrace {
        let amp = sigma_fraction * self.max_abs();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = self.clone();
        for row in &mut out.values {
            for v in row.iter_mut() {
                let u1: f64 = 1.0 - rng.gen::<f64>();
                let u2: f64 = rng.gen();
                let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
                *v += amp * z;
            }
        }
        out
    }

    /// Averages adjacent column pairs: the trace a grid of half the
    /// resolution would sample (the paired faces are the split halves of
    /// one coarse face). Errors when the columns do not pair up cleanly.
    pub fn restrict_columns(&self) -> Result<BoundaryTrace, MeasureError> {
        let m = self.arcs.len();
        if m % 2 != 0 {
            return Err(MeasureError::IncompatibleTraces(format!(
                "cannot pair {m} columns for coarsening"
            )));
        }
        if self.meta.nx % 2 != 0 || self.meta.ny % 2 != 0 {
            return Err(MeasureError::IncompatibleTraces(format!(
                "grid {}x{} is not a doubled grid",
                self.meta.nx, self.meta.ny
            )));
        }
        let h_fine = self.meta.lx / self.meta.nx as f64;
        for p in 0..m / 2 {
            let gap = self.arcs[2 * p + 1] - self.arcs[2 * p];
            if (gap - h_fine).abs() > 1e-9 {
                return Err(MeasureError::IncompatibleTraces(format!(
                    "columns {} and {} are not a split face pair (gap {gap})",
                    2 * p,
                    2 * p + 1
                )));
            }
        }
        let mut meta = self.meta.clone();
        meta.nx /= 2;
        meta.ny /= 2;
        let arcs: Vec<f64> =
            (0..m / 2).map(|p| 0.5 * (self.arcs[2 * p] + self.arcs[2 * p + 1])).collect();
        let values: Vec<Vec<f64>> = self
            .values
            .iter()
            .map(|row| (0..m / 2).map(|p| 0.5 * (row[2 * p] + row[2 * p + 1])).collect())
            .collect();
        Ok(BoundaryTrace { meta, arcs, times: self.times.clone(), values })
    }

    /// Keeps every `stride`-th row, matching the sampling of a run with
    /// time step `stride * dt`.
    pub fn restrict_time(&self, stride: usize) -> Result<BoundaryTrace, MeasureError> {
        if stride == 0 || self.times.len() % stride != 0 {
            return Err(MeasureError::IncompatibleTraces(format!(
                "{} rows cannot be restricted by stride {stride}",
                self.times.len()
            )));
        }
        let mut meta = self.meta.clone();
        meta.dt *= stride as f64;
        let pick = |v: &[Vec<f64>]| -> Vec<Vec<f64>> {
            v.iter()
                .enumerate()
                .filter(|(i, _)| (i + 1) % stride == 0)
                .map(|(_, r)| r.clone())
                .collect()
        };
        let times: Vec<f64> = self
            .times
            .iter()
            .enumerate()
            .filter(|(i, _)| (i + 1) % stride == 0)
            .map(|(_, t)| *t)
            .collect();
        Ok(BoundaryTrace { meta, arcs: self.arcs.clone(), times, values: pick(&self.values) })
    }
}

/// Builds the boundary trace of a finished run.
pub fn extract_trace(traj: &Trajectory, grid: &GridGeometry) -> Result<BoundaryTrace, MeasureError> {
    if grid.sigma_faces.is_empty() || traj.trace_arcs.is_empty() {
        return Err(MeasureError::EmptySigma);
    }
    let times: Vec<f64> = traj.diagnostics.iter().map(|d| d.t).collect();
    debug_assert_eq!(times.len(), traj.trace.len());
    Ok(BoundaryTrace {
        meta: traj.meta.clone(),
        arcs: traj.trace_arcs.clone(),
        times,
        values: traj.trace.clone(),
    })
}

fn check_compatible(a: &BoundaryTrace, b: &BoundaryTrace) -> Result<(), MeasureError> {
    if a.arcs.len() != b.arcs.len() {
        return Err(MeasureError::IncompatibleTraces(format!(
            "{} vs {} columns",
            a.arcs.len(),
            b.arcs.len()
        )));
    }
    if a.times.len() != b.times.len() {
        return Err(MeasureError::IncompatibleTraces(format!(
            "{} vs {} rows",
            a.times.len(),
            b.times.len()
        )));
    }
    if (a.meta.dt - b.meta.dt).abs() > 1e-12 {
        return Err(MeasureError::IncompatibleTraces(format!(
            "dt {} vs {}",
            a.meta.dt, b.meta.dt
        )));
    }
    if (a.arc_weight() - b.arc_weight()).abs() > 1e-12 {
        return Err(MeasureError::IncompatibleTraces(format!(
            "arc weight {} vs {}",
            a.arc_weight(),
            b.arc_weight()
        )));
    }
    for (i, (x, y)) in a.arcs.iter().zip(&b.arcs).enumerate() {
        if (x - y).abs() > 1e-9 {
            return Err(MeasureError::IncompatibleTraces(format!(
                "arc {i}: {x} vs {y}"
            )));
        }
    }
    for (i, (x, y)) in a.times.iter().zip(&b.times).enumerate() {
        if (x - y).abs() > 1e-9 {
            return Err(MeasureError::IncompatibleTraces(format!(
                "time {i}: {x} vs {y}"
            )));
        }
    }
    Ok(())
}

/// Discrete L2(arc x time) distance: sqrt(sum_t dt sum_s h (a - b)^2).
/// Zero iff the traces are bitwise identical.
pub fn misfit(a: &BoundaryTrace, b: &BoundaryTrace) -> Result<f64, MeasureError> {
    check_compatible(a, b)?;
    let h = a.arc_weight();
    let dt = a.meta.dt;
    let mut total = 0.0;
    for (ra, rb) in a.values.iter().zip(&b.values) {
        let mut row = 0.0;
        for (x, y) in ra.iter().zip(rb) {
            let d = x - y;
            row += h * d * d;
        }
        total += dt * row;
    }
    Ok(total.sqrt())
}

fn fmt_list(vals: &[f64]) -> String {
    let mut s = String::from("[");
    for (i, v) in vals.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let _ = write!(s, "{v}");
    }
    s.push(']');
    s
}

/// Serializes a trace to the commented-CSV format.
pub fn trace_to_string(trace: &BoundaryTrace) -> String {
    let m = &trace.meta;
    let mut out = String::new();
    let _ = writeln!(out, "# model={}", m.model.kind.name());
    let _ = writeln!(out, "# A={}", m.model.strength);
    let _ = writeln!(out, "# a={}", m.model.threshold);
    let _ = writeln!(out, "# eps={}", m.model.eps);
    let _ = writeln!(out, "# gamma={}", m.model.gamma);
    let _ = writeln!(out, "# scheme={}", m.scheme.name());
    let _ = writeln!(out, "# dt={}", m.dt);
    let _ = writeln!(out, "# T={}", m.t_final);
    let _ = writeln!(out, "# nx={}", m.nx);
    let _ = writeln!(out, "# ny={}", m.ny);
    let _ = writeln!(out, "# lx={}", m.lx);
    let _ = writeln!(out, "# ly={}", m.ly);
    let _ = writeln!(out, "# sigma=[{},{}]", m.sigma.0, m.sigma.1);
    let _ = writeln!(out, "# arc={}", fmt_list(&trace.arcs));
    for (t, row) in trace.times.iter().zip(&trace.values) {
        let _ = write!(out, "{t}");
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn write_trace(trace: &BoundaryTrace, path: &Path) -> Result<(), MeasureError> {
    std::fs::write(path, trace_to_string(trace))?;
    Ok(())
}

fn parse_err(path: &str, line: usize, msg: impl Into<String>) -> MeasureError {
    MeasureError::MalformedFile { path: path.to_string(), line, msg: msg.into() }
}

fn parse_f64(path: &str, line: usize, s: &str) -> Result<f64, MeasureError> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| parse_err(path, line, format!("not a number: {s:?}")))
}

/// Parses the commented-CSV trace format back; bit-exact inverse of
/// `write_trace`.
pub fn read_trace(path: &Path) -> Result<BoundaryTrace, MeasureError> {
    let text = std::fs::read_to_string(path)?;
    let name = path.display().to_string();
    parse_trace(&text, &name)
}

pub fn parse_trace(text: &str, name: &str) -> Result<BoundaryTrace, MeasureError> {
    use crate::forward::Scheme;
    use crate::ionic::{IonicModel, ModelKind};

    let mut headers = std::collections::HashMap::new();
    let mut rows: Vec<(usize, &str)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let rest = rest.trim();
            let (key, value) = rest
                .split_once('=')
                .ok_or_else(|| parse_err(name, lineno, "header line without '='"))?;
            headers.insert(key.trim().to_string(), value.trim().to_string());
        } else {
            rows.push((lineno, line));
        }
    }

    let get = |key: &str| -> Result<&String, MeasureError> {
        headers.get(key).ok_or_else(|| parse_err(name, 1, format!("missing header {key}")))
    };
    let getf = |key: &str| -> Result<f64, MeasureError> { parse_f64(name, 1, get(key)?) };

    let model_name = get("model")?;
    let kind = ModelKind::parse(model_name)
        .ok_or_else(|| parse_err(name, 1, format!("unknown model {model_name:?}")))?;
    let model = IonicModel::new(kind, getf("A")?, getf("a")?, getf("eps")?, getf("gamma")?);
    let scheme = match get("scheme")?.as_str() {
        "imex" => Scheme::Imex,
        "picard" => Scheme::Picard,
        "nonlocal" => Scheme::Nonlocal,
        other => return Err(parse_err(name, 1, format!("unknown scheme {other:?}"))),
    };
    let sigma_raw = get("sigma")?;
    let sigma_body = sigma_raw
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .ok_or_else(|| parse_err(name, 1, "sigma header is not [s0,s1]"))?;
    let sigma_parts: Vec<&str> = sigma_body.split(',').collect();
    if sigma_parts.len() != 2 {
        return Err(parse_err(name, 1, "sigma header is not [s0,s1]"));
    }
    let sigma = (parse_f64(name, 1, sigma_parts[0])?, parse_f64(name, 1, sigma_parts[1])?);

    let arc_raw = get("arc")?;
    let arc_body = arc_raw
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .ok_or_else(|| parse_err(name, 1, "arc header is not a [..] list"))?;
    let arcs: Vec<f64> = arc_body
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_f64(name, 1, s))
        .collect::<Result<_, _>>()?;
    if arcs.is_empty() {
        return Err(parse_err(name, 1, "empty arc list"));
    }

    let nx = getf("nx")? as usize;
    let ny = getf("ny")? as usize;
    let meta = RunMeta {
        model,
        scheme,
        dt: getf("dt")?,
        t_final: getf("T")?,
        nx,
        ny,
        lx: getf("lx")?,
        ly: getf("ly")?,
        sigma,
    };

    let mut times = Vec::with_capacity(rows.len());
    let mut values = Vec::with_capacity(rows.len());
    for (lineno, line) in rows {
        let mut parts = line.split(',');
        let t = parse_f64(name, lineno, parts.next().unwrap())?;
        let row: Vec<f64> =
            parts.map(|p| parse_f64(name, lineno, p)).collect::<Result<_, _>>()?;
        if row.len() != arcs.len() {
            return Err(parse_err(
                name,
                lineno,
                format!("row has {} values, expected {}", row.len(), arcs.len()),
            ));
        }
        times.push(t);
        values.push(row);
    }
    if values.is_empty() {
        return Err(parse_err(name, 1, "no data rows"));
    }
    Ok(BoundaryTrace { meta, arcs, times, values })
}
