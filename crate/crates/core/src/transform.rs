//! Estimation of the unknown monotone transformation.
//!
//! The estimate solves the sample Volterra equation by a forward jump
//! recursion over the event grid:
//!
//! ```text
//! G(t_j) = G(t_j-) + dN(t_j) / S(G(t_j-), theta, t_j),      G(0-) = 0,
//! S(x, theta, t) = n^-1 sum_i Y_i(t) alpha(x, theta, Z_i).
//! ```
//!
//! Everything downstream (the theta-gradient, the product integral, the
//! covariance kernel) is an exact sum or product over the same atoms. The
//! path stays sandwiched between `A_n/m2` and `A_n/m1` whenever the hazard
//! is bounded in `[m1, m2]`, which is the content of the Gronwall bounds
//! the tests assert.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::mestimate::MomentPath;
use crate::model::{CoreModel, HazardEval};
use crate::survdata::{Dataset, Horizon};

/// At-risk sums and their derivatives, evaluated at the left limit
/// `x = G(t_j-)` of the path, one entry per grid atom.
#[derive(Debug, Clone)]
pub struct AtRiskMoments {
    /// number of atoms
    pub m: usize,
    /// theta dimension
    pub p: usize,
    /// S
    pub s: Vec<f64>,
    /// dS/dx
    pub s_dx: Vec<f64>,
    /// dS/dtheta, row-major m*p
    pub s_dtheta: Vec<f64>,
    /// d2S/dx2
    pub s_dxx: Vec<f64>,
    /// d2S/(dx dtheta), m*p
    pub s_dxtheta: Vec<f64>,
    /// d2S/dtheta2, m*p*p
    pub s_dthetatheta: Vec<f64>,
    /// e[dlog_theta] = (dS/dtheta)/S, m*p
    pub ebar: Vec<f64>,
}

/// The fitted transformation path at one `theta`.
#[derive(Debug, Clone)]
pub struct TransformPath {
    pub theta: Vec<f64>,
    /// event times covered by the horizon
    pub times: Vec<f64>,
    /// jumps dN(t_j)
    pub event_mass: Vec<f64>,
    /// G(t_j), nondecreasing, G(0-) = 0
    pub gamma: Vec<f64>,
    /// dG(t_j)/dtheta, row-major m*p
    pub gamma_dot: Vec<f64>,
    /// jumps dC(t_j) = dN(t_j)/S^2
    pub dc: Vec<f64>,
    /// product integral P(0, t_j] = prod_{k<=j} (1 - S' dC)
    pub prod_int_from_zero: Vec<f64>,
    /// prefix sums of dC(t_k)/P(0,t_k]^2 (the Brownian kernel clock)
    pub c_tilde: Vec<f64>,
    /// left-limit at-risk sums
    pub left: AtRiskMoments,
    /// conditional moments at the right value `x = G(t_j)`
    pub moments: MomentPath,
}

impl TransformPath {
    pub fn n_atoms(&self) -> usize {
        self.gamma.len()
    }

    pub fn theta_dim(&self) -> usize {
        self.theta.len()
    }

    /// Gradient vector at atom `j`.
    pub fn gamma_dot_at(&self, j: usize) -> &[f64] {
        let p = self.theta.len();
        &self.gamma_dot[j * p..(j + 1) * p]
    }
}

/// Accumulate the at-risk sums at one `(x, theta)` over a risk set.
/// Returns `(S, S', Sdot, S'', Sdot', Sdotdot)`, all carrying the 1/n factor.
#[allow(clippy::type_complexity)]
fn at_risk_sums(
    model: &CoreModel,
    x: f64,
    theta: &[f64],
    risk: &[crate::survdata::Subject],
    n: f64,
    buf: &mut HazardEval,
) -> (f64, f64, Vec<f64>, f64, Vec<f64>, Vec<f64>) {
    let p = model.theta_dim();
    let mut s = 0.0;
    let mut s_dx = 0.0;
    let mut s_dt = vec![0.0; p];
    let mut s_dxx = 0.0;
    let mut s_dxt = vec![0.0; p];
    let mut s_dtt = vec![0.0; p * p];
    for sub in risk {
        model.hazard_eval_into(x, theta, &sub.covariates, buf);
        let a = buf.alpha;
        s += a;
        s_dx += a * buf.dlog_x;
        s_dxx += a * (buf.d2log_xx + buf.dlog_x * buf.dlog_x);
        for k in 0..p {
            let lk = buf.dlog_theta[k];
            s_dt[k] += a * lk;
            s_dxt[k] += a * (buf.d2log_xtheta[k] + lk * buf.dlog_x);
            for l in 0..p {
                s_dtt[k * p + l] +=
                    a * (buf.d2log_thetatheta[k * p + l] + lk * buf.dlog_theta[l]);
            }
        }
    }
    let inv_n = 1.0 / n;
    s *= inv_n;
    s_dx *= inv_n;
    s_dxx *= inv_n;
    s_dt.iter_mut().for_each(|v| *v *= inv_n);
    s_dxt.iter_mut().for_each(|v| *v *= inv_n);
    s_dtt.iter_mut().for_each(|v| *v *= inv_n);
    (s, s_dx, s_dt, s_dxx, s_dxt, s_dtt)
}

/// Fit the transformation path at `theta`: the jump recursion plus every
/// derived functional (gradient, product integral, kernel clock, moments).
pub fn fit_transform(
    data: &Dataset,
    model: &CoreModel,
    theta: &[f64],
    horizon: &Horizon,
) -> Result<TransformPath> {
    let p = model.theta_dim();
    if theta.len() != p {
        return Err(Error::Domain(format!(
            "theta has length {}, family needs {p}",
            theta.len()
        )));
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite theta".into()));
    }
    if model.d != data.dim() {
        return Err(Error::Domain(format!(
            "model covariate dimension {} != dataset {}",
            model.d,
            data.dim()
        )));
    }
    let m = horizon.n_atoms();
    let n = data.n() as f64;
    let mut buf = HazardEval {
        alpha: 0.0,
        dlog_x: 0.0,
        dlog_theta: vec![0.0; p],
        d2log_xx: 0.0,
        d2log_xtheta: vec![0.0; p],
        d2log_thetatheta: vec![0.0; p * p],
    };

    let mut left = AtRiskMoments {
        m,
        p,
        s: Vec::with_capacity(m),
        s_dx: Vec::with_capacity(m),
        s_dtheta: Vec::with_capacity(m * p),
        s_dxx: Vec::with_capacity(m),
        s_dxtheta: Vec::with_capacity(m * p),
        s_dthetatheta: Vec::with_capacity(m * p * p),
        ebar: Vec::with_capacity(m * p),
    };
    let mut gamma = Vec::with_capacity(m);
    let mut x = 0.0;
    for j in 0..m {
        let (s, s_dx, s_dt, s_dxx, s_dxt, s_dtt) =
            at_risk_sums(model, x, theta, data.risk_set(j), n, &mut buf);
        if !s.is_finite() || s < 1e-280 {
            return Err(Error::AtRiskUnderflow {
                t: data.event_grid()[j],
                s,
            });
        }
        x += data.event_mass()[j] / s;
        gamma.push(x);
        left.s.push(s);
        left.s_dx.push(s_dx);
        left.s_dxx.push(s_dxx);
        for k in 0..p {
            left.ebar.push(s_dt[k] / s);
        }
        left.s_dtheta.extend_from_slice(&s_dt);
        left.s_dxtheta.extend_from_slice(&s_dxt);
        left.s_dthetatheta.extend_from_slice(&s_dtt);
    }

    // dC and the product integral over the same atoms
    let mut dc = Vec::with_capacity(m);
    let mut prod = Vec::with_capacity(m);
    let mut c_tilde = Vec::with_capacity(m);
    let mut cum = 1.0;
    let mut ct = 0.0;
    for j in 0..m {
        let dcj = data.event_mass()[j] / (left.s[j] * left.s[j]);
        let factor = 1.0 - left.s_dx[j] * dcj;
        if factor <= 0.0 {
            return Err(Error::ProductIntegral {
                t: data.event_grid()[j],
                factor,
            });
        }
        cum *= factor;
        ct += dcj / (cum * cum);
        dc.push(dcj);
        prod.push(cum);
        c_tilde.push(ct);
    }

    // gradient recursion: gdot_j = gdot_{j-1} + dN_j [ -Sdot/S^2 - (S'/S^2) gdot_{j-1} ]
    let mut gamma_dot = vec![0.0; m * p];
    let mut prev = vec![0.0; p];
    for j in 0..m {
        let s2 = left.s[j] * left.s[j];
        let mass = data.event_mass()[j];
        for k in 0..p {
            let kdot = -left.s_dtheta[j * p + k] / s2;
            let kprime = -left.s_dx[j] / s2;
            prev[k] += mass * (kdot + kprime * prev[k]);
            gamma_dot[j * p + k] = prev[k];
        }
    }

    let moments = crate::mestimate::compute_moment_path(data, model, theta, &gamma, horizon)?;

    Ok(TransformPath {
        theta: theta.to_vec(),
        times: data.event_grid()[..m].to_vec(),
        event_mass: data.event_mass()[..m].to_vec(),
        gamma,
        gamma_dot,
        dc,
        prod_int_from_zero: prod,
        c_tilde,
        left,
        moments,
    })
}

/// Recompute the theta-gradient of the path in place from the stored
/// left-limit sums. `fit_transform` already does this; the entry point
/// exists so a path with edited measures can be refreshed.
pub fn transform_gradient(path: &mut TransformPath) {
    let p = path.theta.len();
    let m = path.n_atoms();
    let mut prev = vec![0.0; p];
    for j in 0..m {
        let s2 = path.left.s[j] * path.left.s[j];
        let mass = path.event_mass[j];
        for k in 0..p {
            let kdot = -path.left.s_dtheta[j * p + k] / s2;
            let kprime = -path.left.s_dx[j] / s2;
            prev[k] += mass * (kdot + kprime * prev[k]);
            path.gamma_dot[j * p + k] = prev[k];
        }
    }
}

/// Product integral over the atom interval `(t_u, t_t]`; `u == t` gives the
/// empty product 1. Indices address the path's atoms.
pub fn prod_integral(path: &TransformPath, u_index: usize, t_index: usize) -> f64 {
    assert!(u_index <= t_index && t_index < path.n_atoms());
    if u_index == t_index {
        return 1.0;
    }
    path.prod_int_from_zero[t_index] / path.prod_int_from_zero[u_index]
}

/// Product integral over `(0, t_t]` (all atoms through `t_index`).
pub fn prod_integral_from_zero(path: &TransformPath, t_index: usize) -> f64 {
    path.prod_int_from_zero[t_index]
}

/// Covariance kernel `K(t, t') = sum_{t_k <= t ^ t'} dC_k P(t_k,t) P(t_k,t')`.
pub fn kernel_k(path: &TransformPath, t_index: usize, t2_index: usize) -> f64 {
    let lo = t_index.min(t2_index);
    path.prod_int_from_zero[t_index] * path.prod_int_from_zero[t2_index] * path.c_tilde[lo]
}

/// The double integral `kappa = sum_{u <= t} dC(u) P(u,t)^2 dB(t)` with
/// `dB(t) = v(t) dN(t)`.
pub fn kappa(path: &TransformPath) -> f64 {
    let mut acc = 0.0;
    for j in 0..path.n_atoms() {
        let db = path.moments.v[j] * path.event_mass[j];
        let pj = path.prod_int_from_zero[j];
        acc += db * pj * pj * path.c_tilde[j];
    }
    acc
}

/// One row of the plot-ready export.
#[derive(Debug, Serialize)]
pub struct PathRow {
    pub t: f64,
    pub gamma: f64,
    pub gamma_dot: Vec<f64>,
    pub prod_int: f64,
}

impl TransformPath {
    /// Export as rows `{t, gamma, gamma_dot..., P(0,t)}`.
    pub fn rows(&self) -> Vec<PathRow> {
        (0..self.n_atoms())
            .map(|j| PathRow {
                t: self.times[j],
                gamma: self.gamma[j],
                gamma_dot: self.gamma_dot_at(j).to_vec(),
                prod_int: self.prod_int_from_zero[j],
            })
            .collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "schema_version": crate::SCHEMA_VERSION,
            "theta": self.theta,
            "path": self.rows(),
        })
    }

    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        let p = self.theta.len();
        let mut header = vec!["t".to_string(), "gamma".to_string()];
        header.extend((0..p).map(|k| format!("gamma_dot_{k}")));
        header.push("prod_int".into());
        writeln!(out, "{}", header.join(","))?;
        for r in self.rows() {
            let mut fields = vec![format!("{}", r.t), format!("{}", r.gamma)];
            fields.extend(r.gamma_dot.iter().map(|v| format!("{v}")));
            fields.push(format!("{}", r.prod_int));
            writeln!(out, "{}", fields.join(","))?;
        }
        Ok(())
    }
}
