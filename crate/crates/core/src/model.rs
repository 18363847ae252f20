//! Parametric core families of conditional cumulative hazards.
//!
//! Each family supplies the hazard `alpha(x, theta, z)` on the transformed
//! scale, the first and second logarithmic derivatives in `x` and `theta`,
//! the analytic cumulative hazard and its inverse, and uniform envelope
//! bounds `m1 <= alpha <= m2` over a parameter box. The reparametrizations
//! are chosen so every family has a hazard bounded away from 0 and infinity,
//! which is what keeps the transformation recursion well posed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hazard family on the transformed scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Family {
    /// Constant hazard `exp(theta'z)`; the Cox model.
    #[serde(rename = "ph", alias = "proportional_hazards")]
    ProportionalHazards,
    /// Scale regression through the half-logistic hazard, reparametrized so
    /// the hazard ratio stays in `[1/2, 2]` around `exp(theta'z)`.
    #[serde(rename = "half_logistic", alias = "half_logistic_scale")]
    HalfLogisticScale,
    /// Gamma-frailty (log-Burr) family with fixed shape `eta >= 0`, mapped
    /// through the Gompertz inverse so the hazard is bounded.
    GammaFrailty { eta: f64 },
    /// Gamma-frailty with covariate-dependent shape `eta(z) = exp(xi'z)`;
    /// `theta = (beta, xi)`.
    GammaFrailtyCovariate,
    /// Linear hazard `a + b t` mapped through `u = sqrt(1+2x) - 1`, with
    /// `a = exp(theta1'z)`, `b = exp(theta2'z)`; `theta = (theta1, theta2)`.
    LinearHazard,
}

/// A core model: family plus covariate dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoreModel {
    #[serde(flatten)]
    pub family: Family,
    /// Covariate dimension `d`.
    pub d: usize,
}

/// Hazard value and logarithmic derivatives at one `(x, theta, z)`.
///
/// Primes are `x`-derivatives, dots are `theta`-derivatives of
/// `log alpha`.
#[derive(Debug, Clone, PartialEq)]
pub struct HazardEval {
    pub alpha: f64,
    /// d/dx log alpha
    pub dlog_x: f64,
    /// d/dtheta log alpha
    pub dlog_theta: Vec<f64>,
    /// d2/dx2 log alpha
    pub d2log_xx: f64,
    /// d2/(dx dtheta) log alpha
    pub d2log_xtheta: Vec<f64>,
    /// d2/dtheta2 log alpha, row-major p*p, symmetric
    pub d2log_thetatheta: Vec<f64>,
}

impl HazardEval {
    fn zeros(p: usize) -> Self {
        HazardEval {
            alpha: 0.0,
            dlog_x: 0.0,
            dlog_theta: vec![0.0; p],
            d2log_xx: 0.0,
            d2log_xtheta: vec![0.0; p],
            d2log_thetatheta: vec![0.0; p * p],
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// log(1 + e^y), stable for large |y|.
#[inline]
fn softplus(y: f64) -> f64 {
    y.max(0.0) + (-y.abs()).exp().ln_1p()
}

/// Logistic sigmoid, stable for large |u|.
#[inline]
fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

impl CoreModel {
    pub fn new(family: Family, d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidInput("covariate dimension must be >= 1".into()));
        }
        if let Family::GammaFrailty { eta } = family {
            if !eta.is_finite() || eta < 0.0 {
                return Err(Error::InvalidInput(format!(
                    "gamma-frailty shape eta = {eta} must be >= 0"
                )));
            }
        }
        Ok(CoreModel { family, d })
    }

    /// Dimension of `theta`.
    pub fn theta_dim(&self) -> usize {
        match self.family {
            Family::ProportionalHazards
            | Family::HalfLogisticScale
            | Family::GammaFrailty { .. } => self.d,
            Family::GammaFrailtyCovariate | Family::LinearHazard => 2 * self.d,
        }
    }

    /// Whether the family's identifiability normalization needs the covariate
    /// reference point at the origin.
    pub fn needs_centering(&self) -> bool {
        matches!(self.family, Family::LinearHazard)
    }

    fn check_inputs(&self, x: f64, theta: &[f64], z: &[f64]) -> Result<()> {
        if !x.is_finite() || x < 0.0 {
            return Err(Error::Domain(format!("x = {x} must be finite and >= 0")));
        }
        if theta.len() != self.theta_dim() {
            return Err(Error::Domain(format!(
                "theta has length {}, family needs {}",
                theta.len(),
                self.theta_dim()
            )));
        }
        if z.len() != self.d {
            return Err(Error::Domain(format!(
                "z has length {}, model has d = {}",
                z.len(),
                self.d
            )));
        }
        if theta.iter().chain(z).any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite theta or z".into()));
        }
        Ok(())
    }

    /// Evaluate the hazard and all logarithmic derivatives.
    pub fn hazard_eval(&self, x: f64, theta: &[f64], z: &[f64]) -> Result<HazardEval> {
        self.check_inputs(x, theta, z)?;
        let mut out = HazardEval::zeros(self.theta_dim());
        self.hazard_eval_into(x, theta, z, &mut out);
        Ok(out)
    }

    /// Same as [`hazard_eval`](Self::hazard_eval) without validation or
    /// allocation; `out` must have the right dimensions. Hot path.
    pub fn hazard_eval_into(&self, x: f64, theta: &[f64], z: &[f64], out: &mut HazardEval) {
        let p = self.theta_dim();
        match self.family {
            Family::ProportionalHazards => {
                out.alpha = dot(theta, z).exp();
                out.dlog_x = 0.0;
                out.dlog_theta.copy_from_slice(z);
                out.d2log_xx = 0.0;
                out.d2log_xtheta.fill(0.0);
                out.d2log_thetatheta.fill(0.0);
            }
            Family::HalfLogisticScale => {
                // alpha = e^w sig(y e^w)/sig(y), y = inverse base cumhaz of x
                let w = dot(theta, z);
                let ew = w.exp();
                let y = base_cumhaz_inv(x);
                let u = y * ew;
                let sig_y = sigmoid(y);
                let qy = sigmoid(-y); // 1 - sig(y)
                let qu = sigmoid(-u);
                out.alpha = ew * sigmoid(u) / sig_y;
                let yp = 1.0 / sig_y; // dy/dx
                let ypp = -qy * yp * yp;
                // q'(v) = -sig(v)q(v)
                let qpy = -sig_y * qy;
                let qpu = -sigmoid(u) * qu;
                out.dlog_x = yp * (ew * qu - qy);
                out.d2log_xx = ypp * (ew * qu - qy) + yp * yp * (ew * ew * qpu - qpy);
                let g_theta = 1.0 + qu * u;
                let g_mixed = yp * ew * (qu + u * qpu);
                let g_tt = u * (qu + u * qpu);
                for k in 0..p {
                    out.dlog_theta[k] = z[k] * g_theta;
                    out.d2log_xtheta[k] = z[k] * g_mixed;
                    for l in 0..p {
                        out.d2log_thetatheta[k * p + l] = z[k] * z[l] * g_tt;
                    }
                }
            }
            Family::GammaFrailty { eta } => {
                let w = dot(theta, z);
                gamma_frailty_fixed_into(x, w, eta, z, out);
            }
            Family::GammaFrailtyCovariate => {
                let d = self.d;
                let (beta, xi) = theta.split_at(d);
                let w = dot(beta, z);
                let eta = dot(xi, z).exp();
                // beta block from the fixed-eta formulas
                let mut inner = HazardEval::zeros(d);
                gamma_frailty_fixed_into(x, w, eta, z, &mut inner);
                out.alpha = inner.alpha;
                out.dlog_x = inner.dlog_x;
                out.d2log_xx = inner.d2log_xx;
                // shared pieces for the xi block, q-normalized as above
                let ew = w.exp();
                let q = (-eta * x).exp();
                let dq = q + (1.0 - q) * ew;
                // F = dl/deta and its derivatives
                let f = x * (1.0 - ew) * q / dq;
                let f_x = (1.0 - ew) * q * (dq - x * eta * ew) / (dq * dq);
                let f_eta = -x * x * (1.0 - ew) * ew * q / (dq * dq);
                let f_w = -x * ew * q / (dq * dq);
                for k in 0..d {
                    out.dlog_theta[k] = inner.dlog_theta[k];
                    out.dlog_theta[d + k] = z[k] * eta * f;
                    out.d2log_xtheta[k] = inner.d2log_xtheta[k];
                    out.d2log_xtheta[d + k] = z[k] * eta * f_x;
                }
                let p = 2 * d;
                for k in 0..d {
                    for l in 0..d {
                        // beta-beta
                        out.d2log_thetatheta[k * p + l] = inner.d2log_thetatheta[k * d + l];
                        // xi-xi: d/dxi_l (z_k eta F) with deta/dxi_l = z_l eta
                        out.d2log_thetatheta[(d + k) * p + (d + l)] =
                            z[k] * z[l] * (eta * f + eta * eta * f_eta);
                        // beta-xi cross
                        let cross = z[k] * z[l] * eta * f_w;
                        out.d2log_thetatheta[k * p + (d + l)] = cross;
                        out.d2log_thetatheta[(d + k) * p + l] = cross;
                    }
                }
            }
            Family::LinearHazard => {
                let d = self.d;
                let (t1, t2) = theta.split_at(d);
                let a = dot(t1, z).exp();
                let b = dot(t2, z).exp();
                let r = (1.0 + 2.0 * x).powf(-0.5);
                let alpha = a * r + b * (1.0 - r);
                out.alpha = alpha;
                let r3 = r * r * r;
                out.dlog_x = -(a - b) * r3 / alpha;
                let r5 = r3 * r * r;
                out.d2log_xx = (a - b) * r5 * (3.0 * alpha - (a - b) * r) / (alpha * alpha);
                let pa = a * r / alpha; // weight of the a-block
                let pb = b * (1.0 - r) / alpha;
                let mix_a = -a * b * r3 / (alpha * alpha);
                let p = 2 * d;
                for k in 0..d {
                    out.dlog_theta[k] = z[k] * pa;
                    out.dlog_theta[d + k] = z[k] * pb;
                    out.d2log_xtheta[k] = z[k] * mix_a;
                    out.d2log_xtheta[d + k] = -z[k] * mix_a;
                    for l in 0..d {
                        out.d2log_thetatheta[k * p + l] = z[k] * z[l] * pa * (1.0 - pa);
                        out.d2log_thetatheta[(d + k) * p + (d + l)] =
                            z[k] * z[l] * pb * (1.0 - pb);
                        let cross = -z[k] * z[l] * pa * pb;
                        out.d2log_thetatheta[k * p + (d + l)] = cross;
                        out.d2log_thetatheta[(d + k) * p + l] = cross;
                    }
                }
            }
        }
    }

    /// Cumulative hazard `A(x, theta | z)`, analytic per family.
    pub fn cumhaz(&self, x: f64, theta: &[f64], z: &[f64]) -> Result<f64> {
        self.check_inputs(x, theta, z)?;
        Ok(match self.family {
            Family::ProportionalHazards => x * dot(theta, z).exp(),
            Family::HalfLogisticScale => {
                let w = dot(theta, z);
                base_cumhaz(base_cumhaz_inv(x) * w.exp())
            }
            Family::GammaFrailty { eta } => gamma_frailty_cumhaz(x, dot(theta, z), eta),
            Family::GammaFrailtyCovariate => {
                let (beta, xi) = theta.split_at(self.d);
                gamma_frailty_cumhaz(x, dot(beta, z), dot(xi, z).exp())
            }
            Family::LinearHazard => {
                let (t1, t2) = theta.split_at(self.d);
                let a = dot(t1, z).exp();
                let b = dot(t2, z).exp();
                let u = (1.0 + 2.0 * x).sqrt() - 1.0;
                a * u + b * u * u / 2.0
            }
        })
    }

    /// Inverse of [`cumhaz`](Self::cumhaz) in `x`, analytic per family.
    pub fn cumhaz_inverse(&self, a: f64, theta: &[f64], z: &[f64]) -> Result<f64> {
        if !a.is_finite() || a < 0.0 {
            return Err(Error::Domain(format!("a = {a} must be finite and >= 0")));
        }
        self.check_inputs(0.0, theta, z)?;
        Ok(match self.family {
            Family::ProportionalHazards => a * (-dot(theta, z)).exp(),
            Family::HalfLogisticScale => {
                let w = dot(theta, z);
                base_cumhaz(base_cumhaz_inv(a) * (-w).exp())
            }
            Family::GammaFrailty { eta } => gamma_frailty_cumhaz(a, -dot(theta, z), eta),
            Family::GammaFrailtyCovariate => {
                let (beta, xi) = theta.split_at(self.d);
                gamma_frailty_cumhaz(a, -dot(beta, z), dot(xi, z).exp())
            }
            Family::LinearHazard => {
                let (t1, t2) = theta.split_at(self.d);
                let av = dot(t1, z).exp();
                let bv = dot(t2, z).exp();
                // a*u + b*u^2/2 = v, nonnegative root, in a cancellation-free form
                let u = 2.0 * a / (av + (av * av + 2.0 * bv * a).sqrt());
                u + u * u / 2.0
            }
        })
    }

    /// Uniform hazard bounds `m1 <= alpha(x, theta, z) <= m2` over all
    /// `x >= 0`, `theta` in the per-coordinate box, and `|z|_inf <= c_bound`.
    pub fn bounds(&self, theta_box: &[(f64, f64)], c_bound: f64) -> Result<(f64, f64)> {
        let p = self.theta_dim();
        if theta_box.len() != p {
            return Err(Error::Domain(format!(
                "box has {} coordinates, theta has {p}",
                theta_box.len()
            )));
        }
        if !c_bound.is_finite()
            || theta_box
                .iter()
                .any(|(lo, hi)| !lo.is_finite() || !hi.is_finite() || lo > hi)
        {
            return Err(Error::Domain("theta box must be bounded".into()));
        }
        // |theta' z| <= c_bound * sum_k max(|lo|, |hi|) over a coordinate range
        let wmax = |range: std::ops::Range<usize>| -> f64 {
            c_bound
                * theta_box[range]
                    .iter()
                    .map(|(lo, hi)| lo.abs().max(hi.abs()))
                    .sum::<f64>()
        };
        Ok(match self.family {
            Family::ProportionalHazards => {
                let w = wmax(0..p);
                ((-w).exp(), w.exp())
            }
            Family::HalfLogisticScale => {
                // hazard ratio to exp(w) lies in [1/2, 2]
                let w = wmax(0..p);
                (0.5 * (-w).exp(), 2.0 * w.exp())
            }
            Family::GammaFrailty { .. } => {
                // alpha moves monotonically from exp(w) at x=0 toward 1,
                // uniformly in the shape parameter
                let w = wmax(0..p);
                ((-w).exp().min(1.0), w.exp().max(1.0))
            }
            Family::GammaFrailtyCovariate => {
                let w = wmax(0..self.d);
                ((-w).exp().min(1.0), w.exp().max(1.0))
            }
            Family::LinearHazard => {
                // alpha between min(a, b) and max(a, b)
                let w = wmax(0..self.d).max(wmax(self.d..2 * self.d));
                ((-w).exp(), w.exp())
            }
        })
    }
}

/// Base cumulative hazard of the half-logistic distribution:
/// `A0(y) = log((1 + e^y)/2)`.
fn base_cumhaz(y: f64) -> f64 {
    softplus(y) - std::f64::consts::LN_2
}

/// Inverse of [`base_cumhaz`]: `A0^-1(a) = log(2 e^a - 1)`, computed as
/// `a + log(2 - e^-a)` to stay finite for large `a`.
fn base_cumhaz_inv(a: f64) -> f64 {
    a + (2.0 - (-a).exp()).ln()
}

fn gamma_frailty_cumhaz(x: f64, w: f64, eta: f64) -> f64 {
    if eta == 0.0 {
        return x * w.exp();
    }
    // log[1 + (e^(eta x) - 1) e^w] / eta
    let hx = eta * x;
    if hx > 30.0 {
        // rewrite as log(1 + e^v) with v = hx + w + log(1 - e^-hx)
        let v = hx + w + (-(-hx).exp()).ln_1p();
        softplus(v) / eta
    } else {
        (hx.exp_m1() * w.exp()).ln_1p() / eta
    }
}

/// Gamma-frailty hazard pieces for fixed shape, writing the `beta` block.
///
/// Everything is normalized by `q = e^(-eta x)` so no intermediate
/// overflows: `D q = q + (1 - q) e^w` and `alpha = e^w / (D q)`.
fn gamma_frailty_fixed_into(x: f64, w: f64, eta: f64, z: &[f64], out: &mut HazardEval) {
    let d = z.len();
    let ew = w.exp();
    if eta == 0.0 {
        // proportional hazards limit
        out.alpha = ew;
        out.dlog_x = 0.0;
        out.d2log_xx = 0.0;
        out.dlog_theta[..d].copy_from_slice(z);
        out.d2log_xtheta[..d].fill(0.0);
        out.d2log_thetatheta[..d * d].fill(0.0);
        return;
    }
    let q = (-eta * x).exp();
    let dq = q + (1.0 - q) * ew;
    out.alpha = ew / dq;
    out.dlog_x = eta * (1.0 - ew) * q / dq;
    out.d2log_xx = -eta * eta * (1.0 - ew) * ew * q / (dq * dq);
    let lt = q / dq;
    let mix = -eta * ew * q / (dq * dq);
    let tt = -(1.0 - q) * q * ew / (dq * dq);
    for k in 0..d {
        out.dlog_theta[k] = z[k] * lt;
        out.d2log_xtheta[k] = z[k] * mix;
        for l in 0..d {
            out.d2log_thetatheta[k * d + l] = z[k] * z[l] * tt;
        }
    }
}
