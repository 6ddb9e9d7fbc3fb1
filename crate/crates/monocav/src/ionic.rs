//! The three membrane nonlinearities and their analysis constants.
//!
//! Each model is the pair (f, g) in
//!
//! ```text
//!   du/dt - div(K grad u) + f(u, w) = 0,    dw/dt + g(u, w) = 0,
//! ```
//!
//! with the cubic f(u, w) = A u (u - a)(u - 1) + {u w | w} and a linear
//! recovery g. The module derives, in closed form: the invariant rectangle
//! S (constant upper/lower solutions), Lipschitz constants of f and g over
//! any rectangle, and the (c1, k1, g1) decomposition that eliminates w into
//! an exponential-kernel integral.

use serde::{Deserialize, Serialize};

/// Relative margin applied to the FitzHugh-Nagumo rectangle half-width so
/// the face sign inequalities, which are exactly zero at the critical root,
/// hold strictly in floating point.
const FACE_SIGN_MARGIN: f64 = 1e-9;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum IonicError {
    #[error("small-branch rectangle requires a > 1/(gamma A) (a = {a}, 1/(gamma A) = {crit})")]
    InvalidBranch { a: f64, crit: f64 },
    #[error("invalid model parameter: {0}")]
    BadParameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    AlievPanfilov,
    FitzhughNagumo,
    RogersMcculloch,
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::AlievPanfilov => "aliev_panfilov",
            ModelKind::FitzhughNagumo => "fitzhugh_nagumo",
            ModelKind::RogersMcculloch => "rogers_mcculloch",
        }
    }

    pub fn parse(s: &str) -> Option<ModelKind> {
        match s {
            "aliev_panfilov" => Some(ModelKind::AlievPanfilov),
            "fitzhugh_nagumo" => Some(ModelKind::FitzhughNagumo),
            "rogers_mcculloch" => Some(ModelKind::RogersMcculloch),
            _ => None,
        }
    }
}

/// Ionic model: kind plus the four scalar parameters. `strength` is the
/// cubic coefficient A > 0, `threshold` the unstable root a in (0, 1),
/// `eps` the recovery rate, `gamma` the recovery coupling (unused by
/// Aliev-Panfilov).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IonicModel {
    pub kind: ModelKind,
    #[serde(rename = "A")]
    pub strength: f64,
    #[serde(rename = "a")]
    pub threshold: f64,
    pub eps: f64,
    pub gamma: f64,
}

/// Product interval [u_lo, u_hi] x [w_lo, w_hi] in state space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rectangle {
    pub u_lo: f64,
    pub u_hi: f64,
    pub w_lo: f64,
    pub w_hi: f64,
}

impl Rectangle {
    pub fn contains(&self, u: f64, w: f64) -> bool {
        self.u_lo <= u && u <= self.u_hi && self.w_lo <= w && w <= self.w_hi
    }

    pub fn clamp(&self, u: f64, w: f64) -> (f64, f64) {
        (u.clamp(self.u_lo, self.u_hi), w.clamp(self.w_lo, self.w_hi))
    }

    pub fn inflate(&self, delta: f64) -> Rectangle {
        Rectangle {
            u_lo: self.u_lo - delta,
            u_hi: self.u_hi + delta,
            w_lo: self.w_lo - delta,
            w_hi: self.w_hi + delta,
        }
    }
}

/// Sampled worst-case reaction values on the invariant-rectangle faces.
/// The flow points inward iff `inward()` holds; margins are kept signed so
/// violations are inspectable.
#[derive(Debug, Clone, Copy)]
pub struct FaceMargins {
    /// max over w of f(u_lo, w); inward needs <= 0.
    pub f_at_u_lo_max: f64,
    /// min over w of f(u_hi, w); inward needs >= 0.
    pub f_at_u_hi_min: f64,
    /// max over u of g(u, w_lo); inward needs <= 0.
    pub g_at_w_lo_max: f64,
    /// min over u of g(u, w_hi); inward needs >= 0.
    pub g_at_w_hi_min: f64,
}

impl FaceMargins {
    pub fn inward(&self) -> bool {
        self.f_at_u_lo_max <= 0.0
            && self.f_at_u_hi_min >= 0.0
            && self.g_at_w_lo_max <= 0.0
            && self.g_at_w_hi_min >= 0.0
    }
}

/// Which root of the FitzHugh-Nagumo half-width equation bounds the
/// rectangle: the universally valid large root, or the opt-in small root.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RectangleBranch {
    Plus,
    Minus,
}

/// Slope of k1(u) in the w-coupling of f: constant 1 or u itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum K1Kind {
    ConstantOne,
    EqualsU,
}

/// Kernel source g1 in the w-elimination
/// w(t) = e^{-c1 t} w0 + integral of e^{-c1 (t-s)} g1(u(s)) ds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum G1 {
    /// g1(u) = c u.
    Linear { c: f64 },
    /// g1(u) = -c u (u - r): the Aliev-Panfilov drive, c = eps A, r = 1 + a.
    NegParabola { c: f64, r: f64 },
    /// g1(u) = c. Quadrature test hook only; violates g1(0) = 0.
    Constant { c: f64 },
}

impl G1 {
    #[inline]
    pub fn eval(&self, u: f64) -> f64 {
        match *self {
            G1::Linear { c } => c * u,
            G1::NegParabola { c, r } => -c * u * (u - r),
            G1::Constant { c } => c,
        }
    }

    /// Exact bound on |g1'| over the u-range of a rectangle.
    pub fn derivative_bound(&self, rect: &Rectangle) -> f64 {
        match *self {
            G1::Linear { c } => c.abs(),
            G1::NegParabola { c, r } => {
                let d = |u: f64| (c * (2.0 * u - r)).abs();
                d(rect.u_lo).max(d(rect.u_hi))
            }
            G1::Constant { .. } => 0.0,
        }
    }
}

/// The (c1, k1, g1) triple of the w-eliminated scalar equation, plus the
/// cubic f1 shared by all models.
#[derive(Debug, Clone, Copy)]
pub struct NonlocalDecomposition {
    pub c1: f64,
    pub k1_kind: K1Kind,
    pub g1: G1,
    strength: f64,
    threshold: f64,
}

impl NonlocalDecomposition {
    /// The cubic reaction f1(u) = A u (u - a)(u - 1).
    #[inline]
    pub fn f1(&self, u: f64) -> f64 {
        self.strength * u * (u - self.threshold) * (u - 1.0)
    }

    #[inline]
    pub fn k1(&self, u: f64) -> f64 {
        match self.k1_kind {
            K1Kind::ConstantOne => 1.0,
            K1Kind::EqualsU => u,
        }
    }

    /// Copy with the kernel source replaced (testing hook).
    pub fn with_g1(&self, g1: G1) -> Self {
        NonlocalDecomposition { g1, ..*self }
    }
}

impl IonicModel {
    pub fn new(kind: ModelKind, strength: f64, threshold: f64, eps: f64, gamma: f64) -> Self {
        IonicModel { kind, strength, threshold, eps, gamma }
    }

    /// Default desk-scale parameter sets.
    pub fn defaults(kind: ModelKind) -> Self {
        match kind {
            ModelKind::AlievPanfilov | ModelKind::RogersMcculloch => {
                IonicModel::new(kind, 8.0, 0.15, 0.01, 0.5)
            }
            ModelKind::FitzhughNagumo => IonicModel::new(kind, 1.0, 0.5, 0.01, 1.0),
        }
    }

    pub fn validate(&self) -> Result<(), IonicError> {
        if !(self.strength > 0.0) {
            return Err(IonicError::BadParameter(format!("A must be > 0, got {}", self.strength)));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(IonicError::BadParameter(format!(
                "a must lie in (0,1), got {}",
                self.threshold
            )));
        }
        if !(self.eps > 0.0) {
            return Err(IonicError::BadParameter(format!("eps must be > 0, got {}", self.eps)));
        }
        if !(self.gamma > 0.0) {
            return Err(IonicError::BadParameter(format!("gamma must be > 0, got {}", self.gamma)));
        }
        Ok(())
    }

    /// Membrane current f(u, w).
    #[inline]
    pub fn f(&self, u: f64, w: f64) -> f64 {
        let cubic = self.strength * u * (u - self.threshold) * (u - 1.0);
        match self.kind {
            ModelKind::AlievPanfilov | ModelKind::RogersMcculloch => cubic + u * w,
            ModelKind::FitzhughNagumo => cubic + w,
        }
    }

    /// Recovery term g(u, w).
    #[inline]
    pub fn g(&self, u: f64, w: f64) -> f64 {
        match self.kind {
            ModelKind::AlievPanfilov => {
                self.eps * (self.strength * u * (u - 1.0 - self.threshold) + w)
            }
            ModelKind::FitzhughNagumo | ModelKind::RogersMcculloch => {
                self.eps * (self.gamma * w - u)
            }
        }
    }

    /// Large root K+ of m^2 - (1+a) m + a - 1/(gamma A) = 0: the smallest
    /// universally valid FitzHugh-Nagumo rectangle half-width.
    pub fn k_plus(&self) -> f64 {
        let s = self.threshold + 1.0;
        let disc = s * s + 4.0 * (1.0 / (self.gamma * self.strength) - self.threshold);
        0.5 * (s + disc.sqrt())
    }

    /// Small root K-; a valid half-width only when a > 1/(gamma A).
    pub fn k_minus(&self) -> f64 {
        let s = self.threshold + 1.0;
        let disc = s * s + 4.0 * (1.0 / (self.gamma * self.strength) - self.threshold);
        0.5 * (s - disc.sqrt())
    }

    /// Invariant rectangle from constant upper/lower solutions, default
    /// branch (FitzHugh-Nagumo uses the large root).
    pub fn invariant_rectangle(&self) -> Rectangle {
        self.invariant_rectangle_branch(RectangleBranch::Plus)
            .expect("default branch is always valid")
    }

    /// Invariant rectangle with explicit FitzHugh-Nagumo branch selection.
    /// The small branch exists only when a > 1/(gamma A).
    pub fn invariant_rectangle_branch(
        &self,
        branch: RectangleBranch,
    ) -> Result<Rectangle, IonicError> {
        match self.kind {
            ModelKind::AlievPanfilov => {
                let u_hi = 1.0 + self.threshold;
                let w_hi = self.strength * u_hi * u_hi / 4.0;
                Ok(Rectangle { u_lo: 0.0, u_hi, w_lo: 0.0, w_hi })
            }
            ModelKind::RogersMcculloch => {
                let u_hi = 1.1 * (1.0f64).max(self.threshold + 1.0);
                Ok(Rectangle { u_lo: 0.0, u_hi, w_lo: 0.0, w_hi: u_hi / self.gamma })
            }
            ModelKind::FitzhughNagumo => {
                let m = match branch {
                    // Scaled one part in 1e9 off the exact root so the face
                    // inequalities, zero at the root, are strict in f64.
                    RectangleBranch::Plus => self.k_plus() * (1.0 + FACE_SIGN_MARGIN),
                    RectangleBranch::Minus => {
                        let crit = 1.0 / (self.gamma * self.strength);
                        if self.threshold <= crit {
                            return Err(IonicError::InvalidBranch { a: self.threshold, crit });
                        }
                        self.k_minus() * (1.0 - FACE_SIGN_MARGIN)
                    }
                };
                Ok(Rectangle { u_lo: -m, u_hi: m, w_lo: -m / self.gamma, w_hi: m / self.gamma })
            }
        }
    }

    /// Lipschitz constants (M1 for f, M2 for g) over a rectangle, as the
    /// sup of max(|df/du|, |df/dw|) etc., maximized in closed form: the
    /// partials are quadratic in u and affine in w, so extremes sit at
    /// rectangle corners or at the interior vertex of the quadratic.
    pub fn lipschitz_constants(&self, rect: &Rectangle) -> (f64, f64) {
        let a = self.threshold;
        let big_a = self.strength;
        // d(cubic)/du = A (3u^2 - 2(1+a)u + a); vertex at u = (1+a)/3.
        let q = |u: f64| 3.0 * u * u - 2.0 * (1.0 + a) * u + a;
        let mut u_cands = vec![rect.u_lo, rect.u_hi];
        let vertex = (1.0 + a) / 3.0;
        if vertex > rect.u_lo && vertex < rect.u_hi {
            u_cands.push(vertex);
        }

        let m1 = match self.kind {
            ModelKind::AlievPanfilov | ModelKind::RogersMcculloch => {
                // f_u = A q(u) + w, f_w = u.
                let mut fu_max: f64 = 0.0;
                for &u in &u_cands {
                    for &w in &[rect.w_lo, rect.w_hi] {
                        fu_max = fu_max.max((big_a * q(u) + w).abs());
                    }
                }
                let fw_max = rect.u_lo.abs().max(rect.u_hi.abs());
                fu_max.max(fw_max)
            }
            ModelKind::FitzhughNagumo => {
                // f_u = A q(u), f_w = 1.
                let mut fu_max: f64 = 0.0;
                for &u in &u_cands {
                    fu_max = fu_max.max((big_a * q(u)).abs());
                }
                fu_max.max(1.0)
            }
        };

        let m2 = match self.kind {
            ModelKind::AlievPanfilov => {
                // g_u = eps A (2u - 1 - a), g_w = eps.
                let gu = |u: f64| (self.eps * big_a * (2.0 * u - 1.0 - a)).abs();
                gu(rect.u_lo).max(gu(rect.u_hi)).max(self.eps)
            }
            ModelKind::FitzhughNagumo | ModelKind::RogersMcculloch => {
                // g_u = -eps, g_w = eps gamma.
                self.eps.max(self.eps * self.gamma)
            }
        };

        (m1, m2)
    }

    /// Worst-case inward-flux margins on the faces of the invariant
    /// rectangle, sampled at n points per face edge. The system is
    /// du/dt = -f + diffusion, dw/dt = -g, so the rectangle traps the flow
    /// iff f <= 0 on the u_lo face, f >= 0 on u_hi, g <= 0 on w_lo, and
    /// g >= 0 on w_hi.
    pub fn face_margins(&self, n: usize) -> FaceMargins {
        let rect = self.invariant_rectangle();
        let us = linspace(rect.u_lo, rect.u_hi, n);
        let ws = linspace(rect.w_lo, rect.w_hi, n);
        let mut m = FaceMargins {
            f_at_u_lo_max: f64::NEG_INFINITY,
            f_at_u_hi_min: f64::INFINITY,
            g_at_w_lo_max: f64::NEG_INFINITY,
            g_at_w_hi_min: f64::INFINITY,
        };
        for &w in &ws {
            m.f_at_u_lo_max = m.f_at_u_lo_max.max(self.f(rect.u_lo, w));
            m.f_at_u_hi_min = m.f_at_u_hi_min.min(self.f(rect.u_hi, w));
        }
        for &u in &us {
            m.g_at_w_lo_max = m.g_at_w_lo_max.max(self.g(u, rect.w_lo));
            m.g_at_w_hi_min = m.g_at_w_hi_min.min(self.g(u, rect.w_hi));
        }
        m
    }

    /// (c1, k1, g1) of the w-eliminated form. The recovery ODE
    /// dw/dt + g(u, w) = 0 rearranges to dw/dt + c1 w = g1(u), so
    /// g1 is the negated u-part of g; in particular the Aliev-Panfilov
    /// source carries a minus sign: g1(u) = -eps A u (u - 1 - a).
    pub fn nonlocal_decomposition(&self) -> NonlocalDecomposition {
        let (c1, k1_kind, g1) = match self.kind {
            ModelKind::FitzhughNagumo => (
                self.eps * self.gamma,
                K1Kind::ConstantOne,
                G1::Linear { c: self.eps },
            ),
            ModelKind::RogersMcculloch => (
                self.eps * self.gamma,
                K1Kind::EqualsU,
                G1::Linear { c: self.eps },
            ),
            ModelKind::AlievPanfilov => (
                self.eps,
                K1Kind::EqualsU,
                G1::NegParabola { c: self.eps * self.strength, r: 1.0 + self.threshold },
            ),
        };
        NonlocalDecomposition {
            c1,
            k1_kind,
            g1,
            strength: self.strength,
            threshold: self.threshold,
        }
    }
}

/// n equally spaced samples with both endpoints represented exactly.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2);
    let mut v = Vec::with_capacity(n);
    for i in 0..n {
        if i == 0 {
            v.push(lo);
        } else if i == n - 1 {
            v.push(hi);
        } else {
            v.push(lo + (hi - lo) * i as f64 / (n - 1) as f64);
        }
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f_values_aliev_panfilov() {
        let m = IonicModel::defaults(ModelKind::AlievPanfilov);
        assert_eq!(m.f(0.0, 7.3), 0.0);
        // f(1+a, 0) = (1+a) A a = 1.15 * 8 * 0.15 = 1.38.
        let v = m.f(1.15, 0.0);
        assert!((v - 1.38).abs() < 1e-12, "{v}");
    }

    #[test]
    fn f_root_fitzhugh() {
        let m = IonicModel::defaults(ModelKind::FitzhughNagumo);
        assert_eq!(m.f(m.threshold, 0.0), 0.0);
    }

    #[test]
    fn g_values() {
        let ap = IonicModel::defaults(ModelKind::AlievPanfilov);
        // u(u-1-a) vanishes at u = 1+a only up to representation error.
        assert!(ap.g(1.15, 0.0).abs() < 1e-16, "{}", ap.g(1.15, 0.0));
        let fhn = IonicModel::defaults(ModelKind::FitzhughNagumo);
        assert_eq!(fhn.g(0.0, 0.0), 0.0);
        let rmc = IonicModel::defaults(ModelKind::RogersMcculloch);
        assert_eq!(rmc.g(0.0, 0.0), 0.0);
        let v = rmc.g(1.0, 0.0);
        assert!((v - (-0.01)).abs() < 1e-15, "{v}");
    }

    #[test]
    fn rectangles_match_closed_forms() {
        let ap = IonicModel::defaults(ModelKind::AlievPanfilov).invariant_rectangle();
        assert_eq!(ap.u_lo, 0.0);
        assert!((ap.u_hi - 1.15).abs() < 1e-15);
        assert!((ap.w_hi - 2.645).abs() < 1e-12);

        let rmc = IonicModel::defaults(ModelKind::RogersMcculloch).invariant_rectangle();
        assert!((rmc.u_hi - 1.265).abs() < 1e-12);
        assert!((rmc.w_hi - 2.53).abs() < 1e-12);

        let fhn = IonicModel::defaults(ModelKind::FitzhughNagumo);
        // Frozen 40-digit oracle: K+ = 1.780776406404415137...
        assert!((fhn.k_plus() - 1.780776406404415137).abs() < 1e-14);
        let r = fhn.invariant_rectangle();
        assert!((r.u_hi - 1.78078).abs() < 1e-4);
        assert_eq!(r.u_lo, -r.u_hi);
        assert_eq!(r.w_hi, r.u_hi / fhn.gamma);
    }

    #[test]
    fn k_plus_is_face_root() {
        // A (K+ - a)(K+ - 1) - 1/gamma = 0 to 1e-12.
        let m = IonicModel::defaults(ModelKind::FitzhughNagumo);
        let k = m.k_plus();
        let resid = m.strength * (k - m.threshold) * (k - 1.0) - 1.0 / m.gamma;
        assert!(resid.abs() < 1e-12, "{resid}");
    }

    #[test]
    fn sampled_face_conditions_hold_exactly() {
        // Exact sign checks, no tolerance: the rectangles (with the nudged
        // FitzHugh-Nagumo half-width) trap the sampled flow.
        for kind in [
            ModelKind::AlievPanfilov,
            ModelKind::FitzhughNagumo,
            ModelKind::RogersMcculloch,
        ] {
            let m = IonicModel::defaults(kind).face_margins(200);
            assert!(m.inward(), "{kind:?}: {m:?}");
        }
    }

    #[test]
    fn minus_branch_gating() {
        let m = IonicModel::defaults(ModelKind::FitzhughNagumo);
        // Defaults: 1/(gamma A) = 1 > a = 0.5, so the small branch is invalid.
        let err = m.invariant_rectangle_branch(RectangleBranch::Minus).unwrap_err();
        assert!(matches!(err, IonicError::InvalidBranch { .. }));
        // With gamma A large enough the branch exists and is positive.
        let m2 = IonicModel::new(ModelKind::FitzhughNagumo, 10.0, 0.5, 0.01, 1.0);
        let r = m2.invariant_rectangle_branch(RectangleBranch::Minus).unwrap();
        assert!(r.u_hi > 0.0 && r.u_hi < m2.k_plus());
    }

    #[test]
    fn lipschitz_closed_form_vs_dense_sampling() {
        let m = IonicModel::defaults(ModelKind::FitzhughNagumo);
        let rect = m.invariant_rectangle();
        let (m1, m2) = m.lipschitz_constants(&rect);
        // Frozen oracle at m = K+: max |3u^2 - 3u + 1/2| = 15.355823048...
        assert!((m1 - 15.35582304803311).abs() < 1e-6, "{m1}");
        assert!((m2 - 0.01).abs() < 1e-15);
        // Dense sampling never exceeds the closed form.
        let us = linspace(rect.u_lo, rect.u_hi, 100_000);
        let mut samp: f64 = 0.0;
        for &u in &us {
            samp = samp.max((3.0 * u * u - 3.0 * u + 0.5).abs());
        }
        assert!(samp <= m1 + 1e-9);
        assert!(m1 - samp < 1e-6);
    }

    #[test]
    fn lipschitz_degenerate_rect() {
        let m = IonicModel::defaults(ModelKind::AlievPanfilov);
        let rect = Rectangle { u_lo: 0.0, u_hi: 0.0, w_lo: 0.0, w_hi: 0.0 };
        let (m1, _) = m.lipschitz_constants(&rect);
        assert!((m1 - m.strength * m.threshold).abs() < 1e-15);
    }

    #[test]
    fn lipschitz_soundness_random_pairs() {
        // |f(p) - f(p')| <= M1 (|du| + |dw|) over 10^4 seeded pairs per model.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for kind in [
            ModelKind::AlievPanfilov,
            ModelKind::FitzhughNagumo,
            ModelKind::RogersMcculloch,
        ] {
            let m = IonicModel::defaults(kind);
            let rect = m.invariant_rectangle();
            let (m1, m2) = m.lipschitz_constants(&rect);
            for _ in 0..10_000 {
                let u1 = rng.gen_range(rect.u_lo..=rect.u_hi);
                let u2 = rng.gen_range(rect.u_lo..=rect.u_hi);
                let w1 = rng.gen_range(rect.w_lo..=rect.w_hi);
                let w2 = rng.gen_range(rect.w_lo..=rect.w_hi);
                let df = (m.f(u1, w1) - m.f(u2, w2)).abs();
                let dg = (m.g(u1, w1) - m.g(u2, w2)).abs();
                let step = (u1 - u2).abs() + (w1 - w2).abs();
                assert!(df <= m1 * step + 1e-12, "{kind:?} f: {df} > {m1} * {step}");
                assert!(dg <= m2 * step + 1e-12, "{kind:?} g: {dg} > {m2} * {step}");
            }
        }
    }

    #[test]
    fn decomposition_constants() {
        let fhn = IonicModel::new(ModelKind::FitzhughNagumo, 1.0, 0.5, 0.01, 0.5);
        let d = fhn.nonlocal_decomposition();
        assert!((d.c1 - 0.005).abs() < 1e-18);
        assert!((d.g1.eval(1.0) - 0.01).abs() < 1e-18);
        assert_eq!(d.k1_kind, K1Kind::ConstantOne);

        let ap = IonicModel::defaults(ModelKind::AlievPanfilov);
        let d = ap.nonlocal_decomposition();
        assert_eq!(d.g1.eval(0.0), 0.0);
        assert_eq!(d.g1.eval(1.15), 0.0);
        assert_eq!(d.k1_kind, K1Kind::EqualsU);
        assert_eq!(d.c1, ap.eps);

        let rmc = IonicModel::defaults(ModelKind::RogersMcculloch);
        let d = rmc.nonlocal_decomposition();
        assert_eq!(d.g1.eval(0.0), 0.0);
        assert_eq!(d.k1_kind, K1Kind::EqualsU);
    }

    #[test]
    fn decomposition_reproduces_recovery_field() {
        // dw/dt = -g(u, w) must equal g1(u) - c1 w identically; this is the
        // check that fixes the sign of the Aliev-Panfilov kernel source.
        for kind in [
            ModelKind::AlievPanfilov,
            ModelKind::FitzhughNagumo,
            ModelKind::RogersMcculloch,
        ] {
            let m = IonicModel::defaults(kind);
            let d = m.nonlocal_decomposition();
            for &u in &linspace(-1.8, 1.8, 37) {
                for &w in &linspace(-3.0, 3.0, 31) {
                    let lhs = -m.g(u, w);
                    let rhs = d.g1.eval(u) - d.c1 * w;
                    assert!(
                        (lhs - rhs).abs() <= 1e-14 * (1.0 + lhs.abs()),
                        "{kind:?} at ({u}, {w}): {lhs} vs {rhs}"
                    );
                }
            }
        }
    }

    #[test]
    fn decomposition_f_split_matches_f() {
        // f(u, w) = f1(u) + k1(u) w for every model.
        for kind in [
            ModelKind::AlievPanfilov,
            ModelKind::FitzhughNagumo,
            ModelKind::RogersMcculloch,
        ] {
            let m = IonicModel::defaults(kind);
            let d = m.nonlocal_decomposition();
            for &u in &linspace(-1.5, 1.5, 23) {
                for &w in &linspace(-2.0, 2.0, 17) {
                    let lhs = m.f(u, w);
                    let rhs = d.f1(u) + d.k1(u) * w;
                    assert!((lhs - rhs).abs() <= 1e-14 * (1.0 + lhs.abs()));
                }
            }
        }
    }

    #[test]
    fn g1_derivative_bound_sound() {
        let ap = IonicModel::defaults(ModelKind::AlievPanfilov);
        let d = ap.nonlocal_decomposition();
        let rect = ap.invariant_rectangle();
        let c1bound = d.g1.derivative_bound(&rect);
        for &u in &linspace(rect.u_lo, rect.u_hi, 10_000) {
            let du = 1e-7;
            let fd = (d.g1.eval(u + du) - d.g1.eval(u - du)) / (2.0 * du);
            assert!(fd.abs() <= c1bound + 1e-5);
        }
        assert_eq!(d.g1.eval(0.0), 0.0);
    }
}
