//! Recoverability envelope in the sideslip/yaw-rate plane and the ellipse
//! inscribed in it.
//!
//! Each envelope trace starts on the sideslip nullcline at `beta = ±beta_max`
//! (assuming both axles at the friction limit) and is integrated forward and
//! backward in time at frozen speed with full steering lock and no torque.
//! The union of both mirror-image traces, resampled on uniform rays from the
//! origin, bounds a star-shaped region; the safe set is the largest
//! origin-centred ellipse inside it on every ray.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::params::VehicleParams;
use crate::vehicle::{normal_forces, VehicleModel, VehicleState};

pub const ENVELOPE_SCHEMA: u32 = 1;

/// Coefficients of `h = d - (a beta^2 + b beta r + c r^2)` and the ECBF pole
/// gains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EllipseBarrier {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub alpha0: f64,
    pub alpha1: f64,
}

impl EllipseBarrier {
    pub fn new(a: f64, b: f64, c: f64, d: f64, alpha0: f64, alpha1: f64) -> Result<Self> {
        let e = Self { a, b, c, d, alpha0, alpha1 };
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.a, self.b, self.c, self.d, self.alpha0, self.alpha1]
            .iter()
            .all(|v| v.is_finite())
            && self.a > 0.0
            && self.c > 0.0
            && self.d > 0.0
            && 4.0 * self.a * self.c - self.b * self.b > 0.0
            && self.alpha0 > 0.0
            && self.alpha1 > 0.0;
        if ok {
            Ok(())
        } else {
            Err(ModelError::Params(crate::error::ParamsError::Invalid {
                name: "ellipse",
                reason: format!("{self:?} is not a bounded ellipse with positive gains"),
            }))
        }
    }

    /// Quadratic form `a beta^2 + b beta r + c r^2`.
    pub fn form(&self, beta: f64, r: f64) -> f64 {
        self.a * beta * beta + self.b * beta * r + self.c * r * r
    }

    pub fn h(&self, beta: f64, r: f64) -> f64 {
        self.d - self.form(beta, r)
    }

    pub fn area(&self) -> f64 {
        TAU * self.d / (4.0 * self.a * self.c - self.b * self.b).sqrt()
    }

    /// Distance from the origin to the boundary along direction `theta`
    /// (measured in the `(beta, r)` plane).
    pub fn radius_at(&self, theta: f64) -> f64 {
        let (s, c) = theta.sin_cos();
        (self.d / self.form(c, s)).sqrt()
    }

    /// `(p0, p1) = (alpha0 alpha1, alpha0 + alpha1)`.
    pub fn poly_coefficients(&self) -> (f64, f64) {
        (self.alpha0 * self.alpha1, self.alpha0 + self.alpha1)
    }

    pub fn with_gains(mut self, alpha0: f64, alpha1: f64) -> Self {
        self.alpha0 = alpha0;
        self.alpha1 = alpha1;
        self
    }
}

/// Which steering lock a trace uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SteerSign {
    Positive,
    Negative,
}

impl SteerSign {
    pub fn value(self) -> f64 {
        match self {
            Self::Positive => 1.0,
            Self::Negative => -1.0,
        }
    }

    pub fn flip(self) -> Self {
        match self {
            Self::Positive => Self::Negative,
            Self::Negative => Self::Positive,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeTrace {
    pub speed: f64,
    pub steer_sign: SteerSign,
    /// `(beta, r)` on the sideslip nullcline.
    pub anchor: (f64, f64),
    /// `(beta, r)` samples in forward time, starting at the anchor.
    pub forward_branch: Vec<(f64, f64)>,
    /// `(beta, r)` samples in reverse time, starting at the anchor.
    pub reverse_branch: Vec<(f64, f64)>,
    pub dt: f64,
}

/// Tracing and fitting settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeConfig {
    pub beta_max: f64,
    pub r_window: f64,
    pub dt: f64,
    pub horizon: f64,
    pub rays: usize,
}

impl Default for EnvelopeConfig {
    fn default() -> Self {
        Self {
            beta_max: DEFAULT_BETA_MAX,
            r_window: 2.5,
            dt: 1e-3,
            horizon: 10.0,
            rays: 720,
        }
    }
}

pub const DEFAULT_BETA_MAX: f64 = 1.45;

/// Largest `|beta_dot|` at the anchor before tracing warns.
pub const ANCHOR_RESIDUAL_TOL: f64 = 1e-6;

/// Point on the sideslip nullcline at `beta = sign * beta_max`, steering at
/// `sign * delta_max`, with both axles producing `mu Fz` of lateral force.
///
/// The negative-lock anchor sits in the upper half plane (`r > 0`), the
/// positive-lock anchor is its mirror image.
pub fn nullcline_anchor(
    speed: f64,
    beta_max: f64,
    steer_sign: SteerSign,
    params: &VehicleParams,
) -> Result<(f64, f64)> {
    if !(speed > crate::vehicle::DEFAULT_V_MIN) {
        return Err(ModelError::SingularSpeed {
            speed,
            floor: crate::vehicle::DEFAULT_V_MIN,
        });
    }
    if !(beta_max > 0.0 && beta_max < FRAC_PI_2) {
        return Err(ModelError::Params(crate::error::ParamsError::Invalid {
            name: "beta_max",
            reason: format!("{beta_max} not in (0, pi/2)"),
        }));
    }
    let s = steer_sign.value();
    let delta = s * params.delta_max;
    let beta = s * beta_max;
    let (fzf, fzr) = normal_forces(params);
    let mu = params.mu;
    let r = -s * (mu * fzf * (delta - beta).cos() + mu * fzr * beta.cos()) / (params.m * speed);
    Ok((beta, r))
}

/// Frozen-speed, full-lock, zero-torque trajectories through the anchor.
pub fn trace_envelope(
    speed: f64,
    steer_sign: SteerSign,
    model: &VehicleModel,
    cfg: &EnvelopeConfig,
) -> Result<EnvelopeTrace> {
    let anchor = nullcline_anchor(speed, cfg.beta_max, steer_sign, &model.params)?;
    let delta = steer_sign.value() * model.params.delta_max;
    let at_anchor = VehicleState::new(anchor.1, anchor.0, speed, delta, 0.0);
    let [_, beta_dot] = model.planar_derivative(&at_anchor)?;
    if beta_dot.abs() > ANCHOR_RESIDUAL_TOL {
        log::warn!(
            "anchor ({:.3}, {:.3}) is off the sideslip nullcline (beta_dot = {beta_dot:.3e}); a tire is not saturated there",
            anchor.0,
            anchor.1
        );
    }
    let forward_branch = integrate_branch(model, speed, delta, anchor, 1.0, cfg)?;
    let reverse_branch = integrate_branch(model, speed, delta, anchor, -1.0, cfg)?;
    Ok(EnvelopeTrace {
        speed,
        steer_sign,
        anchor,
        forward_branch,
        reverse_branch,
        dt: cfg.dt,
    })
}

fn integrate_branch(
    model: &VehicleModel,
    speed: f64,
    delta: f64,
    anchor: (f64, f64),
    direction: f64,
    cfg: &EnvelopeConfig,
) -> Result<Vec<(f64, f64)>> {
    let field = |beta: f64, r: f64| -> Result<(f64, f64)> {
        let s = VehicleState::new(r, beta, speed, delta, 0.0);
        let [r_dot, beta_dot] = model.planar_derivative(&s)?;
        Ok((direction * beta_dot, direction * r_dot))
    };
    let steps = (cfg.horizon / cfg.dt).round() as usize;
    let h = cfg.dt;
    let mut out = Vec::with_capacity(steps + 1);
    let (mut beta, mut r) = anchor;
    out.push(anchor);
    for _ in 0..steps {
        let k1 = field(beta, r)?;
        let k2 = field(beta + 0.5 * h * k1.0, r + 0.5 * h * k1.1)?;
        let k3 = field(beta + 0.5 * h * k2.0, r + 0.5 * h * k2.1)?;
        let k4 = field(beta + h * k3.0, r + h * k3.1)?;
        beta += h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
        r += h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
        if !(beta.abs() <= FRAC_PI_2 && r.abs() <= cfg.r_window) {
            break;
        }
        out.push((beta, r));
    }
    Ok(out)
}

/// Distance from the origin to the nearest traced sample curve on each of
/// `rays` uniformly spaced directions (ray `k` at angle `2 pi k / rays`).
///
/// Fails with [`ModelError::DegenerateRegion`] when some ray escapes without
/// meeting any curve, i.e. the curves do not enclose the origin.
pub fn boundary_radii(curves: &[&[(f64, f64)]], rays: usize) -> Result<Vec<f64>> {
    let step = TAU / rays as f64;
    let mut radii = vec![f64::INFINITY; rays];
    for curve in curves {
        for seg in curve.windows(2) {
            let (p, q) = (seg[0], seg[1]);
            let a0 = p.1.atan2(p.0);
            let span = wrap_angle(q.1.atan2(q.0) - a0);
            let (lo, hi) = if span >= 0.0 { (a0, a0 + span) } else { (a0 + span, a0) };
            // Widen slightly so a ray through a shared vertex is not lost to rounding.
            let first = ((lo - 1e-12) / step).ceil() as i64;
            let last = ((hi + 1e-12) / step).floor() as i64;
            for k in first..=last {
                let theta = k as f64 * step;
                if let Some(t) = ray_hit(theta, p, q) {
                    let idx = k.rem_euclid(rays as i64) as usize;
                    radii[idx] = radii[idx].min(t);
                }
            }
        }
    }
    if let Some(k) = radii.iter().position(|r| !r.is_finite()) {
        return Err(ModelError::DegenerateRegion(format!(
            "ray {k} at {:.1} deg meets no traced boundary",
            (k as f64 * step).to_degrees()
        )));
    }
    Ok(radii)
}

fn wrap_angle(x: f64) -> f64 {
    (x + PI).rem_euclid(TAU) - PI
}

/// Distance along the ray at `theta` to segment `p -> q`, if they meet.
fn ray_hit(theta: f64, p: (f64, f64), q: (f64, f64)) -> Option<f64> {
    let (uy, ux) = theta.sin_cos();
    let (dx, dy) = (q.0 - p.0, q.1 - p.1);
    // t u = p + s d  =>  solve by cross products.
    let den = ux * dy - uy * dx;
    if den == 0.0 {
        return None;
    }
    let t = (p.0 * dy - p.1 * dx) / den;
    let s = (p.0 * uy - p.1 * ux) / den;
    (t > 0.0 && (-1e-12..=1.0 + 1e-12).contains(&s)).then_some(t)
}

/// Largest origin-centred ellipse contained in the star-shaped region with
/// the given per-ray radii. Returns `(a, b, c)` normalised so that `d = 1`.
pub fn fit_inscribed_ellipse(radii: &[f64]) -> Result<(f64, f64, f64)> {
    let n = radii.len();
    if n < 3 || radii.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(ModelError::DegenerateRegion(
            "boundary radii must be finite and positive".into(),
        ));
    }
    let dirs: Vec<(f64, f64, f64)> = (0..n)
        .map(|k| {
            let (s, c) = (TAU * k as f64 / n as f64).sin_cos();
            (c * c, c * s, s * s)
        })
        .collect();

    // Shape parameters: x = ln(c/a), y = atanh(b / (2 sqrt(ac))).
    let shape = |x: f64, y: f64| -> (f64, f64, f64) {
        let ratio = x.exp();
        let kappa = y.tanh();
        let (a, c) = (1.0, ratio);
        let b = 2.0 * kappa * (a * c).sqrt();
        let norm = (a * a + b * b + c * c).sqrt();
        (a / norm, b / norm, c / norm)
    };
    // Largest feasible level d for a shape, and the resulting log-area.
    let score = |x: f64, y: f64| -> f64 {
        let (a, b, c) = shape(x, y);
        let d = dirs
            .iter()
            .zip(radii)
            .map(|(&(cc, cs, ss), &rad)| (a * cc + b * cs + c * ss) * rad * rad)
            .fold(f64::INFINITY, f64::min);
        let disc = 4.0 * a * c - b * b;
        d.ln() - 0.5 * disc.ln()
    };

    let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
    for i in 0..=60 {
        let x = -6.0 + 12.0 * i as f64 / 60.0;
        for j in 0..=40 {
            let y = -3.0 + 6.0 * j as f64 / 40.0;
            let s = score(x, y);
            if s > best.0 {
                best = (s, x, y);
            }
        }
    }
    let (x, _) = nelder_mead(|v| -score(v[0], v[1]), [best.1, best.2], 0.1, 1e-12, 4000);
    let (a, b, c) = shape(x[0], x[1]);
    let d = dirs
        .iter()
        .zip(radii)
        .map(|(&(cc, cs, ss), &rad)| (a * cc + b * cs + c * ss) * rad * rad)
        .fold(f64::INFINITY, f64::min);
    // Pull the level in by a hair so rounding cannot push it past a sample.
    let d = d * (1.0 - 1e-12);
    Ok((a / d, b / d, c / d))
}

/// Minimal two-dimensional Nelder-Mead with restarts around the incumbent.
fn nelder_mead(
    f: impl Fn([f64; 2]) -> f64,
    start: [f64; 2],
    scale: f64,
    tol: f64,
    max_iter: usize,
) -> ([f64; 2], f64) {
    let mut x0 = start;
    let mut fx0 = f(x0);
    let mut step = scale;
    for _restart in 0..8 {
        let mut simplex = [x0, [x0[0] + step, x0[1]], [x0[0], x0[1] + step]];
        let mut values = simplex.map(&f);
        for _ in 0..max_iter {
            let mut idx = [0, 1, 2];
            idx.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
            simplex = idx.map(|i| simplex[i]);
            values = idx.map(|i| values[i]);
            if (values[2] - values[0]).abs() <= tol * (1.0 + values[0].abs()) {
                break;
            }
            let centroid = [
                0.5 * (simplex[0][0] + simplex[1][0]),
                0.5 * (simplex[0][1] + simplex[1][1]),
            ];
            let along = |t: f64| {
                [
                    centroid[0] + t * (simplex[2][0] - centroid[0]),
                    centroid[1] + t * (simplex[2][1] - centroid[1]),
                ]
            };
            let xr = along(-1.0);
            let fr = f(xr);
            if fr < values[0] {
                let xe = along(-2.0);
                let fe = f(xe);
                if fe < fr {
                    simplex[2] = xe;
                    values[2] = fe;
                } else {
                    simplex[2] = xr;
                    values[2] = fr;
                }
            } else if fr < values[1] {
                simplex[2] = xr;
                values[2] = fr;
            } else {
                let xc = if fr < values[2] { along(-0.5) } else { along(0.5) };
                let fc = f(xc);
                if fc < values[2].min(fr) {
                    simplex[2] = xc;
                    values[2] = fc;
                } else {
                    for k in 1..3 {
                        simplex[k] = [
                            0.5 * (simplex[0][0] + simplex[k][0]),
                            0.5 * (simplex[0][1] + simplex[k][1]),
                        ];
                        values[k] = f(simplex[k]);
                    }
                }
            }
        }
        let best = (0..3).min_by(|&i, &j| values[i].total_cmp(&values[j])).unwrap();
        let improved = values[best] < fx0 - tol * (1.0 + fx0.abs());
        if values[best] <= fx0 {
            x0 = simplex[best];
            fx0 = values[best];
        }
        if !improved {
            step *= 0.1;
            if step < 1e-9 {
                break;
            }
        }
    }
    (x0, fx0)
}

/// Fits the ellipse inside the region bounded by an upper/lower trace pair.
/// Returns `(a, b, c, d)` with `d = 1`.
pub fn fit_mprel(upper: &EnvelopeTrace, lower: &EnvelopeTrace, rays: usize) -> Result<(f64, f64, f64, f64)> {
    let radii = trace_radii(upper, lower, rays)?;
    let (a, b, c) = fit_inscribed_ellipse(&radii)?;
    Ok((a, b, c, 1.0))
}

/// Per-ray boundary radii of the region bounded by both traces.
pub fn trace_radii(upper: &EnvelopeTrace, lower: &EnvelopeTrace, rays: usize) -> Result<Vec<f64>> {
    boundary_radii(
        &[
            &upper.forward_branch,
            &upper.reverse_branch,
            &lower.forward_branch,
            &lower.reverse_branch,
        ],
        rays,
    )
}

/// Rays on which the ellipse protrudes outside the region (empty when contained).
pub fn containment_violations(ellipse: &EllipseBarrier, radii: &[f64]) -> Vec<usize> {
    let n = radii.len();
    (0..n)
        .filter(|&k| {
            let (s, c) = (TAU * k as f64 / n as f64).sin_cos();
            let (bx, by) = (radii[k] * c, radii[k] * s);
            // The boundary sample must not lie strictly inside the ellipse.
            ellipse.form(bx, by) < ellipse.d
        })
        .collect()
}

/// Everything needed to reuse a fitted safe set: traces, settings and the
/// barrier itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeArtifact {
    pub schema: u32,
    pub params_hash: String,
    pub params: VehicleParams,
    pub speed: f64,
    pub config: EnvelopeConfig,
    pub upper: EnvelopeTrace,
    pub lower: EnvelopeTrace,
    pub ellipse: EllipseBarrier,
}

impl EnvelopeArtifact {
    /// Traces both locks and fits the ellipse.
    pub fn build(
        params: &VehicleParams,
        speed: f64,
        cfg: &EnvelopeConfig,
        alpha0: f64,
        alpha1: f64,
    ) -> Result<Self> {
        if !(params.mu > 0.0) {
            return Err(ModelError::DegenerateRegion(
                "no lateral capacity (mu <= 0)".into(),
            ));
        }
        params.validate()?;
        let model = VehicleModel::new(*params);
        let upper = trace_envelope(speed, SteerSign::Negative, &model, cfg)?;
        let lower = trace_envelope(speed, SteerSign::Positive, &model, cfg)?;
        let (a, b, c, d) = fit_mprel(&upper, &lower, cfg.rays)?;
        let ellipse = EllipseBarrier::new(a, b, c, d, alpha0, alpha1)?;
        Ok(Self {
            schema: ENVELOPE_SCHEMA,
            params_hash: params.fingerprint(),
            params: *params,
            speed,
            config: *cfg,
            upper,
            lower,
            ellipse,
        })
    }

    pub fn radii(&self) -> Result<Vec<f64>> {
        trace_radii(&self.upper, &self.lower, self.config.rays)
    }

    /// Schema, parameter hash, ellipse shape and per-ray containment.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| {
            ModelError::Params(crate::error::ParamsError::Invalid {
                name: "envelope",
                reason: msg,
            })
        };
        if self.schema != ENVELOPE_SCHEMA {
            return Err(bad(format!("unsupported schema {}", self.schema)));
        }
        if self.params_hash != self.params.fingerprint() {
            return Err(bad("parameter hash mismatch".into()));
        }
        self.ellipse.validate()?;
        let violations = containment_violations(&self.ellipse, &self.radii()?);
        if !violations.is_empty() {
            return Err(bad(format!(
                "ellipse protrudes on {} rays (first {})",
                violations.len(),
                violations[0]
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("artifact serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let artifact: Self = serde_json::from_str(text).map_err(|e| {
            ModelError::Params(crate::error::ParamsError::Io(format!("envelope artifact: {e}")))
        })?;
        artifact.validate()?;
        Ok(artifact)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_json())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            ModelError::Params(crate::error::ParamsError::Io(format!("{}: {e}", path.display())))
        })?;
        Self::from_json(&text)
    }
}
