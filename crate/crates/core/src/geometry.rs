//! Poincaré-ball primitives.
//!
//! The ball of curvature `-c` is the open set `{x : c|x|^2 < 1}` of radius
//! `1/sqrt(c)`. Every ball-valued result returned here is passed through
//! [`project_to_ball`], which keeps points at least a relative margin
//! [`BALL_EPS`] away from the boundary.
//!
//! | Function | Purpose |
//! |---|---|
//! | [`mobius_add`] | gyrovector addition `x ⊕_c y` |
//! | [`distance`] | geodesic distance `d_c(x, y)` |
//! | [`exp0`] / [`log0`] | maps between the origin tangent space and the ball |
//! | [`exp_map`] | exponential map at an arbitrary base point |
//! | [`mlr_logits`] | signed hyperplane logits of the hyperbolic softmax |
//! | [`certainty_score`] | monotone surrogate of the distance to the origin |
//!
//! The slice-level routines in [`kernels`] are shared with the autodiff
//! engine, which pairs each of them with a hand-written vector-Jacobian
//! product.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative safety margin used when clipping points back into the ball.
pub const BALL_EPS: f64 = 1e-5;

/// Smallest admissible hyperplane normal norm.
pub const MIN_NORMAL_NORM: f64 = 1e-12;

/// Magnitude `c` of the constant negative curvature `-c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Curvature(f64);

impl Curvature {
    pub fn new(c: f64) -> Result<Self> {
        if c.is_finite() && c > 0.0 {
            Ok(Self(c))
        } else {
            Err(Error::InvalidCurvature(c))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn sqrt(self) -> f64 {
        self.0.sqrt()
    }

    /// Euclidean radius `1/sqrt(c)` of the ball.
    pub fn radius(self) -> f64 {
        1.0 / self.0.sqrt()
    }

    /// Largest norm a clipped point may have.
    pub fn max_norm(self) -> f64 {
        (1.0 - BALL_EPS) / self.0.sqrt()
    }

    fn ensure_same(self, other: Curvature) -> Result<()> {
        if self.0 == other.0 {
            Ok(())
        } else {
            Err(Error::CurvatureMismatch(self.0, other.0))
        }
    }
}

impl TryFrom<f64> for Curvature {
    type Error = Error;
    fn try_from(c: f64) -> Result<Self> {
        Curvature::new(c)
    }
}

impl From<Curvature> for f64 {
    fn from(c: Curvature) -> f64 {
        c.0
    }
}

/// A point strictly inside the Poincaré ball.
#[derive(Debug, Clone, PartialEq)]
pub struct PoincarePoint {
    coords: Vec<f64>,
    curvature: Curvature,
}

impl PoincarePoint {
    /// Wraps `coords` after checking that the point is finite and strictly
    /// inside the ball. No clipping is applied; see [`project_to_ball`].
    pub fn new(coords: Vec<f64>, curvature: Curvature) -> Result<Self> {
        ensure_finite(&coords, "point coordinates")?;
        let inside = curvature.value() * kernels::norm_sq(&coords);
        if inside >= 1.0 {
            return Err(Error::OutsideBall(inside));
        }
        Ok(Self { coords, curvature })
    }

    pub fn origin(dim: usize, curvature: Curvature) -> Self {
        Self {
            coords: vec![0.0; dim],
            curvature,
        }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    pub fn curvature(&self) -> Curvature {
        self.curvature
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn norm(&self) -> f64 {
        kernels::norm_sq(&self.coords).sqrt()
    }

    /// `sqrt(c)|x|`, which lies in `[0, 1)` for every curvature.
    pub fn normalized_norm(&self) -> f64 {
        self.curvature.sqrt() * self.norm()
    }

    /// Möbius negation, which is plain negation on the ball.
    pub fn neg(&self) -> Self {
        Self {
            coords: self.coords.iter().map(|v| -v).collect(),
            curvature: self.curvature,
        }
    }
}

/// Element of the tangent space at the origin (plain `R^L`).
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector(pub Vec<f64>);

impl TangentVector {
    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        kernels::norm_sq(&self.0).sqrt()
    }
}

/// Decision hyperplane of the hyperbolic softmax: offset point `p` and a
/// normal `a` living in the tangent space at `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperplane {
    pub p: PoincarePoint,
    pub a: Vec<f64>,
}

impl Hyperplane {
    pub fn new(p: PoincarePoint, a: Vec<f64>) -> Result<Self> {
        if a.len() != p.dim() {
            return Err(Error::Shape(format!(
                "hyperplane normal has dimension {} but offset has {}",
                a.len(),
                p.dim()
            )));
        }
        ensure_finite(&a, "hyperplane normal")?;
        let na = kernels::norm_sq(&a).sqrt();
        if na < MIN_NORMAL_NORM {
            return Err(Error::DegenerateNormal(na));
        }
        Ok(Self { p, a })
    }
}

/// Whether logits come from the Poincaré hyperplane distance or from its
/// flat `c -> 0` limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MlrMode {
    Hyperbolic,
    Euclidean,
}

pub(crate) fn ensure_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

fn ensure_dims(a: usize, b: usize) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::Shape(format!("dimension {a} vs {b}")))
    }
}

/// Rescales `x` onto the sphere of radius `(1 - BALL_EPS)/sqrt(c)` when it
/// lies beyond it; interior points are returned unchanged.
pub fn project_to_ball(x: &[f64], curvature: Curvature) -> Result<PoincarePoint> {
    ensure_finite(x, "projection input")?;
    let mut coords = x.to_vec();
    kernels::project_in_place(&mut coords, curvature.value());
    Ok(PoincarePoint { coords, curvature })
}

/// Möbius addition `x ⊕_c y`.
pub fn mobius_add(x: &PoincarePoint, y: &PoincarePoint) -> Result<PoincarePoint> {
    x.curvature.ensure_same(y.curvature)?;
    ensure_dims(x.dim(), y.dim())?;
    let c = x.curvature.value();
    let mut out = vec![0.0; x.dim()];
    kernels::mobius_add(&x.coords, &y.coords, c, &mut out);
    ensure_finite(&out, "mobius_add result")?;
    kernels::project_in_place(&mut out, c);
    Ok(PoincarePoint {
        coords: out,
        curvature: x.curvature,
    })
}

/// Conformal factor `λ_x = 2 / (1 - c|x|^2)`.
pub fn conformal_factor(x: &PoincarePoint) -> f64 {
    kernels::conformal_factor(&x.coords, x.curvature.value())
}

/// Geodesic distance `(2/sqrt(c)) atanh(sqrt(c) |(-x) ⊕_c y|)`.
pub fn distance(x: &PoincarePoint, y: &PoincarePoint) -> Result<f64> {
    x.curvature.ensure_same(y.curvature)?;
    ensure_dims(x.dim(), y.dim())?;
    Ok(kernels::distance(&x.coords, &y.coords, x.curvature.value()))
}

/// Exponential map at the origin. `v = 0` maps to the origin.
pub fn exp0(v: &TangentVector, curvature: Curvature) -> Result<PoincarePoint> {
    ensure_finite(&v.0, "tangent vector")?;
    let mut out = vec![0.0; v.0.len()];
    kernels::exp0(&v.0, curvature.value(), &mut out);
    kernels::project_in_place(&mut out, curvature.value());
    Ok(PoincarePoint { coords: out, curvature })
}

/// Logarithmic map at the origin, the inverse of [`exp0`].
pub fn log0(y: &PoincarePoint) -> Result<TangentVector> {
    let c = y.curvature.value();
    let inside = c * kernels::norm_sq(&y.coords);
    if inside >= 1.0 {
        return Err(Error::OutsideBall(inside));
    }
    let mut out = vec![0.0; y.dim()];
    kernels::log0(&y.coords, c, &mut out);
    Ok(TangentVector(out))
}

/// Exponential map at base point `x` applied to tangent vector `u`:
/// `x ⊕_c (tanh(sqrt(c) λ_x |u| / 2) u / (sqrt(c)|u|))`.
pub fn exp_map(x: &PoincarePoint, u: &[f64]) -> Result<PoincarePoint> {
    ensure_dims(x.dim(), u.len())?;
    ensure_finite(u, "tangent step")?;
    let c = x.curvature.value();
    let mut out = vec![0.0; x.dim()];
    kernels::exp_map(&x.coords, u, c, &mut out);
    ensure_finite(&out, "exp_map result")?;
    kernels::project_in_place(&mut out, c);
    Ok(PoincarePoint {
        coords: out,
        curvature: x.curvature,
    })
}

/// `log((1 + c|z|^2) / (1 - c|z|^2))`, zero at the origin and strictly
/// increasing along every ray.
pub fn certainty_score(z: &PoincarePoint) -> f64 {
    kernels::certainty_score(kernels::norm_sq(&z.coords), z.curvature.value())
}

/// Exact distance to the origin, `d_c(0, z)`.
pub fn origin_distance(z: &PoincarePoint) -> f64 {
    kernels::origin_distance(z.norm(), z.curvature.value())
}

/// Per-class logits of the (hyperbolic or flat) multinomial logistic
/// regression head.
///
/// The hyperbolic logit uses the signed inner product
/// `<(-p_k) ⊕_c z, a_k>` so that the two sides of each hyperplane are
/// distinguished. The Euclidean logit is `4 <z - p_k, a_k>`, the exact
/// `c -> 0` limit of the hyperbolic one.
pub fn mlr_logits(z: &[f64], hyperplanes: &[Hyperplane], mode: MlrMode) -> Result<Vec<f64>> {
    ensure_finite(z, "embedding")?;
    let mut logits = Vec::with_capacity(hyperplanes.len());
    for h in hyperplanes {
        ensure_dims(z.len(), h.a.len())?;
        let na = kernels::norm_sq(&h.a).sqrt();
        if na < MIN_NORMAL_NORM {
            return Err(Error::DegenerateNormal(na));
        }
        let logit = match mode {
            MlrMode::Euclidean => kernels::euclidean_logit(z, h.p.coords(), &h.a),
            MlrMode::Hyperbolic => {
                let c = h.p.curvature.value();
                let inside = c * kernels::norm_sq(z);
                if inside >= 1.0 {
                    return Err(Error::OutsideBall(inside));
                }
                kernels::hyperbolic_logit(z, h.p.coords(), &h.a, c)
            }
        };
        logits.push(logit);
    }
    Ok(logits)
}

/// Slice-level forward kernels and their vector-Jacobian products.
///
/// VJP routines accumulate into their gradient outputs (`+=`).
pub mod kernels {
    use super::BALL_EPS;

    #[inline]
    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[inline]
    pub fn norm_sq(a: &[f64]) -> f64 {
        dot(a, a)
    }

    /// Clips `x` to norm `(1 - BALL_EPS)/sqrt(c)`; returns the pre-clip norm
    /// when clipping happened.
    pub fn project_in_place(x: &mut [f64], c: f64) -> Option<f64> {
        let max_norm = (1.0 - BALL_EPS) / c.sqrt();
        let n = norm_sq(x).sqrt();
        if n > max_norm {
            let s = max_norm / n;
            x.iter_mut().for_each(|v| *v *= s);
            Some(n)
        } else {
            None
        }
    }

    /// VJP of the clipping map `x -> r x/|x|` taken at the unclipped input
    /// `x` with norm `n`. `g` is overwritten with the input gradient.
    pub fn project_vjp_in_place(x_unclipped: &[f64], n: f64, c: f64, g: &mut [f64]) {
        let r = (1.0 - BALL_EPS) / c.sqrt();
        let xg = dot(x_unclipped, g) / (n * n);
        for (gi, xi) in g.iter_mut().zip(x_unclipped) {
            *gi = (r / n) * (*gi - xg * xi);
        }
    }

    pub fn conformal_factor(x: &[f64], c: f64) -> f64 {
        2.0 / (1.0 - c * norm_sq(x))
    }

    /// Unclipped Möbius addition.
    pub fn mobius_add(x: &[f64], y: &[f64], c: f64, out: &mut [f64]) {
        let xy = dot(x, y);
        let x2 = norm_sq(x);
        let y2 = norm_sq(y);
        let a = 1.0 + 2.0 * c * xy + c * y2;
        let b = 1.0 - c * x2;
        let d = 1.0 + 2.0 * c * xy + c * c * x2 * y2;
        for ((o, xi), yi) in out.iter_mut().zip(x).zip(y) {
            *o = (a * xi + b * yi) / d;
        }
    }

    /// VJP of unclipped Möbius addition with output gradient `gu`.
    pub fn mobius_add_vjp(x: &[f64], y: &[f64], c: f64, gu: &[f64], gx: &mut [f64], gy: &mut [f64]) {
        let xy = dot(x, y);
        let x2 = norm_sq(x);
        let y2 = norm_sq(y);
        let a = 1.0 + 2.0 * c * xy + c * y2;
        let b = 1.0 - c * x2;
        let d = 1.0 + 2.0 * c * xy + c * c * x2 * y2;

        // u = N / d with N = a x + b y
        let inv_d = 1.0 / d;
        let gn_x = dot(gu, x) * inv_d;
        let gn_y = dot(gu, y) * inv_d;
        // <gu, N> / d^2 = (a <gu,x> + b <gu,y>) / d^2
        let g_d = -(a * gn_x + b * gn_y) * inv_d;
        let g_a = gn_x;
        let g_b = gn_y;

        let g_xy = 2.0 * c * g_a + 2.0 * c * g_d;
        let g_x2 = -c * g_b + c * c * y2 * g_d;
        let g_y2 = c * g_a + c * c * x2 * g_d;

        for i in 0..x.len() {
            gx[i] += a * gu[i] * inv_d + g_xy * y[i] + 2.0 * g_x2 * x[i];
            gy[i] += b * gu[i] * inv_d + g_xy * x[i] + 2.0 * g_y2 * y[i];
        }
    }

    /// `tanh(x)/x`, with its value 1 at zero.
    #[inline]
    fn tanh_ratio(x: f64) -> f64 {
        if x < 1e-8 {
            1.0 - x * x / 3.0
        } else {
            x.tanh() / x
        }
    }

    /// `atanh(x)/x`, with its value 1 at zero.
    #[inline]
    fn atanh_ratio(x: f64) -> f64 {
        if x < 1e-8 {
            1.0 + x * x / 3.0
        } else {
            x.atanh() / x
        }
    }

    /// Unclipped exponential map at the origin.
    pub fn exp0(v: &[f64], c: f64, out: &mut [f64]) {
        let k = c.sqrt();
        let s = tanh_ratio(k * norm_sq(v).sqrt());
        for (o, vi) in out.iter_mut().zip(v) {
            *o = s * vi;
        }
    }

    /// VJP of the unclipped exponential map at the origin.
    pub fn exp0_vjp(v: &[f64], c: f64, g: &[f64], gv: &mut [f64]) {
        let k = c.sqrt();
        let x = k * norm_sq(v).sqrt();
        let phi = tanh_ratio(x);
        // psi = phi'(x)/x = (x sech^2 x - tanh x) / x^3
        let psi = if x < 1e-3 {
            -2.0 / 3.0 + 8.0 * x * x / 15.0
        } else {
            let sech = 1.0 / x.cosh();
            (x * sech * sech - x.tanh()) / (x * x * x)
        };
        let coef = c * psi * dot(g, v);
        for i in 0..v.len() {
            gv[i] += phi * g[i] + coef * v[i];
        }
    }

    /// Logarithmic map at the origin; `y` must be strictly inside the ball.
    pub fn log0(y: &[f64], c: f64, out: &mut [f64]) {
        let k = c.sqrt();
        let s = atanh_ratio(k * norm_sq(y).sqrt());
        for (o, yi) in out.iter_mut().zip(y) {
            *o = s * yi;
        }
    }

    pub fn log0_vjp(y: &[f64], c: f64, g: &[f64], gy: &mut [f64]) {
        let k = c.sqrt();
        let x = k * norm_sq(y).sqrt();
        let phi = atanh_ratio(x);
        // psi = phi'(x)/x = (x/(1-x^2) - atanh x) / x^3
        let psi = if x < 1e-3 {
            2.0 / 3.0 + 4.0 * x * x / 5.0
        } else {
            (x / (1.0 - x * x) - x.atanh()) / (x * x * x)
        };
        let coef = c * psi * dot(g, y);
        for i in 0..y.len() {
            gy[i] += phi * g[i] + coef * y[i];
        }
    }

    /// Unclipped exponential map at base point `x`.
    pub fn exp_map(x: &[f64], u: &[f64], c: f64, out: &mut [f64]) {
        let k = c.sqrt();
        let nu = norm_sq(u).sqrt();
        if nu == 0.0 {
            out.copy_from_slice(x);
            return;
        }
        let lambda = conformal_factor(x, c);
        let s = (k * lambda * nu / 2.0).tanh() / (k * nu);
        let step: Vec<f64> = u.iter().map(|ui| s * ui).collect();
        mobius_add(x, &step, c, out);
    }

    pub fn distance(x: &[f64], y: &[f64], c: f64) -> f64 {
        let neg_x: Vec<f64> = x.iter().map(|v| -v).collect();
        let mut u = vec![0.0; x.len()];
        mobius_add(&neg_x, y, c, &mut u);
        let k = c.sqrt();
        // Floating-point drift can nudge |u| onto the boundary for points
        // that are themselves clipped; keep the argument inside (-1, 1).
        let arg = (k * norm_sq(&u).sqrt()).min(1.0 - 1e-16);
        2.0 / k * arg.atanh()
    }

    /// VJP of [`distance`]; the gradient at `x == y` is taken as zero.
    pub fn distance_vjp(x: &[f64], y: &[f64], c: f64, g: f64, gx: &mut [f64], gy: &mut [f64]) {
        let neg_x: Vec<f64> = x.iter().map(|v| -v).collect();
        let mut u = vec![0.0; x.len()];
        mobius_add(&neg_x, y, c, &mut u);
        let nu = norm_sq(&u).sqrt();
        if nu == 0.0 {
            return;
        }
        let scale = g * 2.0 / (1.0 - c * nu * nu) / nu;
        let gu: Vec<f64> = u.iter().map(|ui| scale * ui).collect();
        let mut g_neg_x = vec![0.0; x.len()];
        mobius_add_vjp(&neg_x, y, c, &gu, &mut g_neg_x, gy);
        for (a, b) in gx.iter_mut().zip(&g_neg_x) {
            *a -= b;
        }
    }

    pub fn origin_distance(norm: f64, c: f64) -> f64 {
        let k = c.sqrt();
        2.0 / k * (k * norm).atanh()
    }

    pub fn certainty_score(norm_sq: f64, c: f64) -> f64 {
        let t = c * norm_sq;
        ((1.0 + t) / (1.0 - t)).ln()
    }

    pub fn euclidean_logit(z: &[f64], p: &[f64], a: &[f64]) -> f64 {
        4.0 * z.iter().zip(p).zip(a).map(|((zi, pi), ai)| (zi - pi) * ai).sum::<f64>()
    }

    /// Intermediate quantities of one hyperbolic logit, reused by the VJP.
    struct LogitParts {
        u: Vec<f64>,
        neg_p: Vec<f64>,
        lambda_p: f64,
        na: f64,
        s: f64,
        q: f64,
        arg: f64,
    }

    fn logit_parts(z: &[f64], p: &[f64], a: &[f64], c: f64) -> LogitParts {
        let k = c.sqrt();
        let neg_p: Vec<f64> = p.iter().map(|v| -v).collect();
        let mut u = vec![0.0; z.len()];
        mobius_add(&neg_p, z, c, &mut u);
        let lambda_p = conformal_factor(p, c);
        let na = norm_sq(a).sqrt();
        let s = dot(&u, a);
        let q = 1.0 - c * norm_sq(&u);
        let arg = 2.0 * k * s / (q * na);
        LogitParts {
            u,
            neg_p,
            lambda_p,
            na,
            s,
            q,
            arg,
        }
    }

    /// Signed hyperbolic MLR logit
    /// `(λ_p |a| / sqrt(c)) asinh(2 sqrt(c) <u, a> / ((1 - c|u|^2)|a|))`
    /// with `u = (-p) ⊕_c z`.
    pub fn hyperbolic_logit(z: &[f64], p: &[f64], a: &[f64], c: f64) -> f64 {
        let parts = logit_parts(z, p, a, c);
        parts.lambda_p * parts.na / c.sqrt() * parts.arg.asinh()
    }

    /// VJP of [`hyperbolic_logit`] with respect to `z`, `p` and `a`.
    #[allow(clippy::too_many_arguments)]
    pub fn hyperbolic_logit_vjp(
        z: &[f64],
        p: &[f64],
        a: &[f64],
        c: f64,
        g: f64,
        gz: &mut [f64],
        gp: &mut [f64],
        ga: &mut [f64],
    ) {
        let k = c.sqrt();
        let LogitParts {
            u,
            neg_p,
            lambda_p,
            na,
            s,
            q,
            arg,
        } = logit_parts(z, p, a, c);
        let k1 = lambda_p * na / k;
        let asinh_arg = arg.asinh();
        let g_arg = g * k1 / (1.0 + arg * arg).sqrt();
        let g_k1 = g * asinh_arg;

        let darg_ds = 2.0 * k / (q * na);
        let darg_du2 = 2.0 * k * s / na * c / (q * q);
        let darg_dna = -arg / na;

        // through u
        let gu: Vec<f64> = (0..u.len())
            .map(|i| g_arg * (darg_ds * a[i] + darg_du2 * 2.0 * u[i]))
            .collect();
        let mut g_neg_p = vec![0.0; p.len()];
        mobius_add_vjp(&neg_p, z, c, &gu, &mut g_neg_p, gz);

        // through λ_p: dλ/dp = c λ^2 p
        let g_lambda = g_k1 * na / k;
        for i in 0..p.len() {
            gp[i] += -g_neg_p[i] + g_lambda * c * lambda_p * lambda_p * p[i];
        }

        // through a: k1 = λ |a| / sqrt(c), s = <u, a>, and the |a| in arg
        let g_na = g_k1 * lambda_p / k + g_arg * darg_dna;
        for i in 0..a.len() {
            ga[i] += g_arg * darg_ds * u[i] + g_na * a[i] / na;
        }
    }

    pub fn euclidean_logit_vjp(
        z: &[f64],
        p: &[f64],
        a: &[f64],
        g: f64,
        gz: &mut [f64],
        gp: &mut [f64],
        ga: &mut [f64],
    ) {
        for i in 0..z.len() {
            gz[i] += 4.0 * g * a[i];
            gp[i] -= 4.0 * g * a[i];
            ga[i] += 4.0 * g * (z[i] - p[i]);
        }
    }
}
