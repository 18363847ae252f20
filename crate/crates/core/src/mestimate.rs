//! Conditional-rank M-estimation of the Euclidean parameter.
//!
//! The score process sums, over observed events inside the horizon,
//!
//! ```text
//! U(theta) = n^-1 sum_i int_0^tau [ b1_i(t) - b2_i(t) phi(t) ] dN_i(t),
//! b1_i = dlog_theta(G(t), theta, Z_i) - Sdot/S,
//! b2_i = dlog_x(G(t), theta, Z_i)     - S'/S,
//! ```
//!
//! with the weights evaluated at the fitted transformation (right value).
//! `phi` is a pluggable weight path: zero, the negated path gradient, or the
//! efficient weight from the Fredholm machinery. The solver iterates
//! `theta <- theta + Sigma1(theta)^-1 U(theta)` and reports the sandwich
//! covariance `Sigma1^-1 Sigma2 Sigma1^-T / n`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{CoreModel, HazardEval};
use crate::survdata::{choose_tau, Dataset, Horizon, TauRule};
use crate::transform::{fit_transform, TransformPath};

/// Empirical conditional moments of the logarithmic derivatives over the
/// risk set, hazard-weighted, evaluated at the right value `x = G(t_j)`.
#[derive(Debug, Clone)]
pub struct MomentPath {
    /// number of atoms
    pub m: usize,
    /// theta dimension
    pub p: usize,
    /// conditional mean of dlog_x
    pub e: Vec<f64>,
    /// conditional mean of dlog_theta, m*p
    pub ebar: Vec<f64>,
    /// conditional variance of dlog_x (>= 0)
    pub v: Vec<f64>,
    /// conditional covariance of dlog_theta, m*p*p
    pub vbar: Vec<f64>,
    /// conditional cov(dlog_theta, dlog_x), m*p
    pub rho: Vec<f64>,
    /// at-risk hazard mean S at the right value (1/n-normalized)
    pub s: Vec<f64>,
}

impl MomentPath {
    pub fn ebar_at(&self, j: usize) -> &[f64] {
        &self.ebar[j * self.p..(j + 1) * self.p]
    }
    pub fn rho_at(&self, j: usize) -> &[f64] {
        &self.rho[j * self.p..(j + 1) * self.p]
    }
    pub fn vbar_at(&self, j: usize) -> &[f64] {
        &self.vbar[j * self.p * self.p..(j + 1) * self.p * self.p]
    }
}

/// Weight-function strategy for the score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PhiStrategy {
    /// `phi = 0`; the plain profile-type score.
    Zero,
    /// `phi = -gamma_dot`; the pseudo-profile-likelihood score.
    MinusGammaDot,
    /// The variance-minimizing weight from the Fredholm solve.
    Efficient,
}

impl std::fmt::Display for PhiStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PhiStrategy::Zero => write!(f, "zero"),
            PhiStrategy::MinusGammaDot => write!(f, "gammadot"),
            PhiStrategy::Efficient => write!(f, "efficient"),
        }
    }
}

/// A weight function evaluated on the event grid.
#[derive(Debug, Clone)]
pub struct WeightPath {
    pub strategy: PhiStrategy,
    pub p: usize,
    /// m*p row-major
    pub values: Vec<f64>,
}

impl WeightPath {
    pub fn at(&self, j: usize) -> &[f64] {
        &self.values[j * self.p..(j + 1) * self.p]
    }

    pub fn zeros(strategy: PhiStrategy, m: usize, p: usize) -> Self {
        WeightPath {
            strategy,
            p,
            values: vec![0.0; m * p],
        }
    }
}

/// Solver configuration.
#[derive(Debug, Clone)]
pub struct FitConfig {
    pub phi: PhiStrategy,
    pub tau: TauRule,
    /// Starting point; defaults to the origin.
    pub theta_init: Option<Vec<f64>>,
    /// Stop when the max-abs score drops below this.
    pub tol_score: f64,
    /// Stop when the max-abs Newton step drops below this.
    pub tol_step: f64,
    pub max_iter: usize,
    /// Per-coordinate box |theta_k| <= theta_bound; leaving it aborts.
    pub theta_bound: f64,
    /// Reciprocal-condition floor for the information matrix.
    pub rcond_min: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            phi: PhiStrategy::Zero,
            tau: TauRule::default(),
            theta_init: None,
            tol_score: 1e-10,
            tol_step: 1e-12,
            max_iter: 50,
            theta_bound: 10.0,
            rcond_min: 1e-12,
        }
    }
}

impl FitConfig {
    fn validate(&self) -> Result<()> {
        if self.tol_score <= 0.0 || self.tol_step <= 0.0 {
            return Err(Error::InvalidInput("tolerances must be positive".into()));
        }
        if self.max_iter < 1 {
            return Err(Error::InvalidInput("max_iter must be >= 1".into()));
        }
        Ok(())
    }
}

/// A completed fit.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub theta_hat: Vec<f64>,
    pub score_norm: f64,
    pub iterations: usize,
    pub sigma0: Vec<Vec<f64>>,
    pub sigma1: Vec<Vec<f64>>,
    pub sigma2: Vec<Vec<f64>>,
    /// Sandwich covariance `Sigma1^-1 Sigma2 Sigma1^-T / n`.
    pub cov_theta: Vec<Vec<f64>>,
    pub se: Vec<f64>,
    pub gamma_path: TransformPath,
    pub phi: WeightPath,
    pub tau: Horizon,
    pub converged: bool,
    pub warnings: Vec<String>,
}

impl FitResult {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "schema_version": crate::SCHEMA_VERSION,
            "theta_hat": self.theta_hat,
            "se": self.se,
            "cov": self.cov_theta,
            "sigma0": self.sigma0,
            "sigma1": self.sigma1,
            "sigma2": self.sigma2,
            "score_norm": self.score_norm,
            "iterations": self.iterations,
            "converged": self.converged,
            "tau": self.tau.tau,
            "phi_strategy": self.phi.strategy.to_string(),
            "gamma": self.gamma_path.times.iter().zip(&self.gamma_path.gamma)
                .map(|(t, g)| serde_json::json!({"t": t, "value": g}))
                .collect::<Vec<_>>(),
            "warnings": self.warnings,
        })
    }
}

/// Conditional moments along a fitted path (right-value evaluation).
pub fn moments(
    data: &Dataset,
    model: &CoreModel,
    path: &TransformPath,
    horizon: &Horizon,
) -> Result<MomentPath> {
    compute_moment_path(data, model, &path.theta, &path.gamma, horizon)
}

pub(crate) fn compute_moment_path(
    data: &Dataset,
    model: &CoreModel,
    theta: &[f64],
    gamma: &[f64],
    horizon: &Horizon,
) -> Result<MomentPath> {
    let p = model.theta_dim();
    let m = horizon.n_atoms();
    let n = data.n() as f64;
    let mut out = MomentPath {
        m,
        p,
        e: Vec::with_capacity(m),
        ebar: Vec::with_capacity(m * p),
        v: Vec::with_capacity(m),
        vbar: Vec::with_capacity(m * p * p),
        rho: Vec::with_capacity(m * p),
        s: Vec::with_capacity(m),
    };
    let mut buf = HazardEval {
        alpha: 0.0,
        dlog_x: 0.0,
        dlog_theta: vec![0.0; p],
        d2log_xx: 0.0,
        d2log_xtheta: vec![0.0; p],
        d2log_thetatheta: vec![0.0; p * p],
    };
    let mut sum_ldot = vec![0.0; p];
    let mut sum_ldd = vec![0.0; p * p];
    let mut sum_lmix = vec![0.0; p];
    for j in 0..m {
        let x = gamma[j];
        let mut sw = 0.0;
        let mut sum_lx = 0.0;
        let mut sum_lx2 = 0.0;
        sum_ldot.fill(0.0);
        sum_ldd.fill(0.0);
        sum_lmix.fill(0.0);
        for sub in data.risk_set(j) {
            model.hazard_eval_into(x, theta, &sub.covariates, &mut buf);
            let w = buf.alpha;
            sw += w;
            sum_lx += w * buf.dlog_x;
            sum_lx2 += w * buf.dlog_x * buf.dlog_x;
            for k in 0..p {
                let lk = buf.dlog_theta[k];
                sum_ldot[k] += w * lk;
                sum_lmix[k] += w * lk * buf.dlog_x;
                for l in 0..=k {
                    sum_ldd[k * p + l] += w * lk * buf.dlog_theta[l];
                }
            }
        }
        if !(sw > 0.0) {
            return Err(Error::AtRiskUnderflow {
                t: data.event_grid()[j],
                s: sw / n,
            });
        }
        let e = sum_lx / sw;
        out.e.push(e);
        out.v.push((sum_lx2 / sw - e * e).max(0.0));
        out.s.push(sw / n);
        let base = out.ebar.len();
        for k in 0..p {
            out.ebar.push(sum_ldot[k] / sw);
        }
        for k in 0..p {
            out.rho.push(sum_lmix[k] / sw - out.ebar[base + k] * e);
        }
        for k in 0..p {
            for l in 0..p {
                let raw = if l <= k {
                    sum_ldd[k * p + l]
                } else {
                    sum_ldd[l * p + k]
                };
                out.vbar
                    .push(raw / sw - out.ebar[base + k] * out.ebar[base + l]);
            }
        }
    }
    Ok(out)
}

/// The score at `theta` under a weight path (which must live on the same
/// grid). Refits the transformation internally.
pub fn score(
    data: &Dataset,
    model: &CoreModel,
    theta: &[f64],
    phi: &WeightPath,
    horizon: &Horizon,
) -> Result<Vec<f64>> {
    let path = fit_transform(data, model, theta, horizon)?;
    Ok(score_with_path(data, model, &path, phi, horizon))
}

pub(crate) fn score_with_path(
    data: &Dataset,
    model: &CoreModel,
    path: &TransformPath,
    phi: &WeightPath,
    horizon: &Horizon,
) -> Vec<f64> {
    let p = model.theta_dim();
    let n = data.n() as f64;
    let mut u = vec![0.0; p];
    let mut buf = HazardEval {
        alpha: 0.0,
        dlog_x: 0.0,
        dlog_theta: vec![0.0; p],
        d2log_xx: 0.0,
        d2log_xtheta: vec![0.0; p],
        d2log_thetatheta: vec![0.0; p * p],
    };
    for j in 0..horizon.n_atoms() {
        let x = path.gamma[j];
        let e = path.moments.e[j];
        let ebar = path.moments.ebar_at(j);
        let phi_j = phi.at(j);
        for sub in data.events_at(j) {
            model.hazard_eval_into(x, &path.theta, &sub.covariates, &mut buf);
            let b2 = buf.dlog_x - e;
            for k in 0..p {
                u[k] += buf.dlog_theta[k] - ebar[k] - b2 * phi_j[k];
            }
        }
    }
    u.iter_mut().for_each(|v| *v /= n);
    u
}

/// The three moment matrices of the score expansion at the path's `theta`.
///
/// `Sigma0` integrates the conditional variance of `b1 - b2 phi`; `Sigma1`
/// adds the cross term against `gamma_dot + phi`; `Sigma2` adds the kernel
/// double integral. With `v == 0` identically the three coincide.
pub fn sigma_matrices(
    path: &TransformPath,
    phi: &WeightPath,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let p = path.theta_dim();
    let m = path.n_atoms();
    let mo = &path.moments;
    let mut sigma0 = DMatrix::zeros(p, p);
    let mut sigma1 = DMatrix::zeros(p, p);
    let mut sigma2 = DMatrix::zeros(p, p);

    // prefix for the kernel double sum: K(j,i) = cum_j cum_i ctil(min)
    let mut q = vec![0.0; p]; // running sum of ctil_i * a_i, i < j
    let mut a = vec![0.0; p];
    for j in 0..m {
        let dn = path.event_mass[j];
        let v = mo.v[j];
        let rho = mo.rho_at(j);
        let vbar = mo.vbar_at(j);
        let phi_j = phi.at(j);
        let gdot = path.gamma_dot_at(j);
        let cum = path.prod_int_from_zero[j];
        let ctil = path.c_tilde[j];
        for k in 0..p {
            a[k] = cum * (rho[k] - v * phi_j[k]) * dn; // cum * rho_phi * dN
        }
        for k in 0..p {
            let rphi_k = rho[k] - v * phi_j[k];
            for l in 0..p {
                let vphi = vbar[k * p + l] + v * phi_j[k] * phi_j[l]
                    - rho[k] * phi_j[l]
                    - phi_j[k] * rho[l];
                sigma0[(k, l)] += vphi * dn;
                sigma1[(k, l)] += rphi_k * (gdot[l] + phi_j[l]) * dn;
                // diagonal block of the kernel sum plus the symmetric
                // cross terms against earlier atoms
                sigma2[(k, l)] += ctil * a[k] * a[l] + a[k] * q[l] + q[k] * a[l];
            }
        }
        for k in 0..p {
            q[k] += ctil * a[k];
        }
    }
    sigma1 += &sigma0;
    sigma2 += &sigma0;
    (sigma0, sigma1, sigma2)
}

/// Build a weight path for a strategy. The efficient strategy needs the
/// Fredholm inputs; see [`crate::fredholm::efficient_phi`].
pub fn make_phi(
    strategy: PhiStrategy,
    path: &TransformPath,
    cb: Option<&crate::fredholm::CbMeasures>,
    table: Option<&crate::fredholm::PsiTable>,
) -> Result<WeightPath> {
    let p = path.theta_dim();
    let m = path.n_atoms();
    match strategy {
        PhiStrategy::Zero => Ok(WeightPath::zeros(PhiStrategy::Zero, m, p)),
        PhiStrategy::MinusGammaDot => Ok(WeightPath {
            strategy: PhiStrategy::MinusGammaDot,
            p,
            values: path.gamma_dot.iter().map(|g| -g).collect(),
        }),
        PhiStrategy::Efficient => match (cb, table) {
            (Some(cb), Some(table)) => crate::fredholm::efficient_phi(path, cb, table),
            _ => Err(Error::InvalidInput(
                "efficient phi requires the cb measures and psi table".into(),
            )),
        },
    }
}

fn build_phi(strategy: PhiStrategy, path: &TransformPath) -> Result<WeightPath> {
    match strategy {
        PhiStrategy::Efficient => {
            let cb = crate::fredholm::cb_measures(path);
            let table = crate::fredholm::psi_table(&cb);
            make_phi(strategy, path, Some(&cb), Some(&table))
        }
        _ => make_phi(strategy, path, None, None),
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn mat_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

struct Prepared {
    data: Dataset,
    horizon: Horizon,
    warnings: Vec<String>,
}

/// Center covariates when the family pins its reference point to the origin,
/// and resolve the horizon.
fn prepare(data: &Dataset, model: &CoreModel, config: &FitConfig) -> Result<Prepared> {
    config.validate()?;
    let mut warnings = Vec::new();
    let data = if model.needs_centering() {
        let mean = data.covariate_mean();
        warnings.push(format!(
            "covariates centered at their mean {mean:?} to put the reference point at the origin"
        ));
        data.center_covariates(&mean)?
    } else {
        data.clone()
    };
    let horizon = choose_tau(&data, config.tau)?;
    if let TauRule::Quantile(q) = config.tau {
        warnings.push(format!(
            "tau = {} chosen by the at-risk quantile rule (q = {q}); \
             the horizon is a convention of this engine, not part of the model",
            horizon.tau
        ));
    }
    Ok(Prepared {
        data,
        horizon,
        warnings,
    })
}

fn assemble_result(
    data: &Dataset,
    model: &CoreModel,
    theta: Vec<f64>,
    horizon: Horizon,
    strategy: PhiStrategy,
    score_norm: f64,
    iterations: usize,
    converged: bool,
    rcond_min: f64,
    warnings: Vec<String>,
) -> Result<FitResult> {
    let path = fit_transform(data, model, &theta, &horizon)?;
    let phi = build_phi(strategy, &path)?;
    let (s0, s1, s2) = sigma_matrices(&path, &phi);
    let n = data.n() as f64;
    let s1_inv = crate::linalg::invert_guarded(&s1, rcond_min)?;
    let cov = (&s1_inv * &s2 * s1_inv.transpose()) / n;
    let se: Vec<f64> = (0..theta.len()).map(|k| cov[(k, k)].max(0.0).sqrt()).collect();
    Ok(FitResult {
        theta_hat: theta,
        score_norm,
        iterations,
        sigma0: mat_to_rows(&s0),
        sigma1: mat_to_rows(&s1),
        sigma2: mat_to_rows(&s2),
        cov_theta: mat_to_rows(&cov),
        se,
        gamma_path: path,
        phi,
        tau: horizon,
        converged,
        warnings,
    })
}

/// Solve the score equation by the contraction iteration
/// `theta <- theta + Sigma1(theta)^-1 U(theta)`.
pub fn solve(data: &Dataset, model: &CoreModel, config: &FitConfig) -> Result<FitResult> {
    let p = model.theta_dim();
    let prep = prepare(data, model, config)?;
    let data = &prep.data;
    let horizon = prep.horizon;

    let mut theta = match &config.theta_init {
        Some(t) => {
            if t.len() != p || t.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "theta_init must be {p} finite values"
                )));
            }
            t.clone()
        }
        None => vec![0.0; p],
    };

    let mut score_norm = f64::INFINITY;
    for iter in 1..=config.max_iter {
        let path = fit_transform(data, model, &theta, &horizon)?;
        let phi = build_phi(config.phi, &path)?;
        let u = score_with_path(data, model, &path, &phi, &horizon);
        score_norm = inf_norm(&u);
        if score_norm <= config.tol_score {
            return assemble_result(
                data,
                model,
                theta,
                horizon,
                config.phi,
                score_norm,
                iter,
                true,
                config.rcond_min,
                prep.warnings,
            );
        }
        let (_, s1, _) = sigma_matrices(&path, &phi);
        let step = crate::linalg::solve_guarded(
            &s1,
            &DVector::from_row_slice(&u),
            config.rcond_min,
        )?;
        for k in 0..p {
            theta[k] += step[k];
        }
        if theta.iter().any(|t| t.abs() > config.theta_bound) {
            return Err(Error::Diverged {
                bound: config.theta_bound,
            });
        }
        if inf_norm(step.as_slice()) <= config.tol_step {
            let u = score(data, model, &theta, &phi, &horizon)?;
            return assemble_result(
                data,
                model,
                theta,
                horizon,
                config.phi,
                inf_norm(&u),
                iter,
                true,
                config.rcond_min,
                prep.warnings,
            );
        }
    }
    // report the last iterate as diagnostics
    let partial = assemble_result(
        data,
        model,
        theta,
        horizon,
        config.phi,
        score_norm,
        config.max_iter,
        false,
        config.rcond_min,
        {
            let mut w = prep.warnings;
            w.push("solver hit max_iter without meeting the score tolerance".into());
            w
        },
    )
    .ok();
    Err(Error::NoConvergence {
        msg: format!(
            "score norm {score_norm:.3e} after {} iterations",
            config.max_iter
        ),
        partial: partial.map(Box::new),
    })
}

/// One-step estimator from a preliminary root-n-consistent `theta_tilde`:
/// a single correction `theta + Sigma1^-1 U`, no iteration.
pub fn one_step(
    data: &Dataset,
    model: &CoreModel,
    theta_tilde: &[f64],
    config: &FitConfig,
) -> Result<FitResult> {
    let p = model.theta_dim();
    if theta_tilde.len() != p || theta_tilde.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "theta_tilde must be {p} finite values"
        )));
    }
    let prep = prepare(data, model, config)?;
    let data = &prep.data;
    let horizon = prep.horizon;

    let path = fit_transform(data, model, theta_tilde, &horizon)?;
    let phi = build_phi(config.phi, &path)?;
    let u = score_with_path(data, model, &path, &phi, &horizon);
    let (_, s1, _) = sigma_matrices(&path, &phi);
    let step = crate::linalg::solve_guarded(&s1, &DVector::from_row_slice(&u), config.rcond_min)?;
    let theta: Vec<f64> = theta_tilde
        .iter()
        .zip(step.iter())
        .map(|(t, s)| t + s)
        .collect();
    let u_final = score(data, model, &theta, &phi, &horizon)?;
    assemble_result(
        data,
        model,
        theta,
        horizon,
        config.phi,
        inf_norm(&u_final),
        1,
        true,
        config.rcond_min,
        prep.warnings,
    )
}
