//! Data generation under the transformation model and Monte Carlo studies.
//!
//! Failure times come from inverse-transform sampling: with `E` unit
//! exponential, `T = G0^-1( A^-1(E, theta0 | z) )` has conditional
//! cumulative hazard `A(G0(t), theta0 | z)`. Censoring is drawn
//! independently of `T` given `Z`. Replications derive their RNG streams
//! from the master seed by a counter construction, so results do not
//! depend on execution order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mestimate::{solve, FitConfig, PhiStrategy};
use crate::model::CoreModel;
use crate::survdata::{Dataset, Subject};

/// True transformation used by the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gamma0 {
    /// G0(t) = t
    Identity,
    /// G0(t) = t^2
    Square,
    /// G0(t) = log(1 + t)
    Log1p,
}

impl Gamma0 {
    pub fn apply(&self, t: f64) -> f64 {
        match self {
            Gamma0::Identity => t,
            Gamma0::Square => t * t,
            Gamma0::Log1p => t.ln_1p(),
        }
    }

    pub fn inverse(&self, x: f64) -> f64 {
        match self {
            Gamma0::Identity => x,
            Gamma0::Square => x.sqrt(),
            Gamma0::Log1p => x.exp_m1(),
        }
    }
}

/// Per-coordinate covariate law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateLaw {
    Bernoulli(f64),
    /// uniform on (-1, 1)
    Uniform,
    /// bernoulli(1/2) on even coordinates, uniform(-1,1) on odd
    Mixed,
}

/// Censoring law, independent of covariates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CensorLaw {
    Exponential(f64),
    Uniform(f64),
    None,
}

/// A simulation scenario.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub model: CoreModel,
    pub theta0: Vec<f64>,
    pub gamma0: Gamma0,
    /// one law per covariate coordinate
    pub covariate_law: Vec<CovariateLaw>,
    pub censor_law: CensorLaw,
    pub n: usize,
    pub seed: u64,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        // re-run the constructor checks in case the scenario was deserialized
        CoreModel::new(self.model.family, self.model.d)?;
        if self.theta0.len() != self.model.theta_dim() {
            return Err(Error::InvalidInput(format!(
                "theta0 has length {}, family needs {}",
                self.theta0.len(),
                self.model.theta_dim()
            )));
        }
        if self.covariate_law.len() != self.model.d {
            return Err(Error::InvalidInput(format!(
                "covariate_law has {} entries, model has d = {}",
                self.covariate_law.len(),
                self.model.d
            )));
        }
        if self.n == 0 {
            return Err(Error::InvalidInput("n must be positive".into()));
        }
        match self.censor_law {
            CensorLaw::Exponential(r) if !(r > 0.0) => {
                Err(Error::InvalidInput("censoring rate must be positive".into()))
            }
            CensorLaw::Uniform(u) if !(u > 0.0) => {
                Err(Error::InvalidInput("censoring upper bound must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

/// SplitMix64 step, used to derive per-replication seeds from the master.
fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn rep_rng(master: u64, rep: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(master ^ splitmix64(rep)))
}

fn draw_covariates(rng: &mut ChaCha8Rng, laws: &[CovariateLaw]) -> Vec<f64> {
    laws.iter()
        .enumerate()
        .map(|(k, law)| match law {
            CovariateLaw::Bernoulli(p) => f64::from(rng.gen_range(0.0..1.0) < *p),
            CovariateLaw::Uniform => rng.gen_range(-1.0..1.0),
            CovariateLaw::Mixed => {
                if k % 2 == 0 {
                    f64::from(rng.gen_range(0.0..1.0) < 0.5)
                } else {
                    rng.gen_range(-1.0..1.0)
                }
            }
        })
        .collect()
}

/// Unit exponential by inverse CDF: `-log(1 - u)`, finite for `u` in [0,1).
fn exp1(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.gen_range(0.0..1.0);
    -(-u).ln_1p()
}

fn gen_with_rng(sc: &Scenario, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    let mut subjects = Vec::with_capacity(sc.n);
    for _ in 0..sc.n {
        let z = draw_covariates(rng, &sc.covariate_law);
        let e = exp1(rng);
        let x_scale = sc.model.cumhaz_inverse(e, &sc.theta0, &z)?;
        let t = sc.gamma0.inverse(x_scale);
        let censor = match sc.censor_law {
            CensorLaw::Exponential(rate) => exp1(rng) / rate,
            CensorLaw::Uniform(u) => rng.gen_range(0.0..u),
            CensorLaw::None => f64::INFINITY,
        };
        let (time, status) = if t <= censor { (t, true) } else { (censor, false) };
        subjects.push(Subject {
            time,
            status,
            covariates: z,
        });
    }
    Dataset::new(subjects, sc.model.d)
}

/// Draw one dataset from the scenario, reproducibly from its seed.
pub fn gen_dataset(sc: &Scenario) -> Result<Dataset> {
    sc.validate()?;
    let mut rng = rep_rng(sc.seed, 0);
    gen_with_rng(sc, &mut rng)
}

/// Per-variant summary of a Monte Carlo study.
#[derive(Debug, Clone, Serialize)]
pub struct VariantReport {
    pub strategy: String,
    pub n_ok: usize,
    pub n_failed: usize,
    pub mean_theta: Vec<f64>,
    pub bias: Vec<f64>,
    pub sd_theta: Vec<f64>,
    pub mean_se: Vec<f64>,
    /// coverage of theta0 by theta_hat +- 1.96 se, per coordinate
    pub coverage95: Vec<f64>,
}

/// Full study report.
#[derive(Debug, Clone, Serialize)]
pub struct McReport {
    pub schema_version: u32,
    pub reps: usize,
    pub n: usize,
    pub theta0: Vec<f64>,
    pub mean_censored_fraction: f64,
    pub variants: Vec<VariantReport>,
    /// wall-clock seconds; excluded from serialized output so identical
    /// inputs give identical bytes
    #[serde(skip)]
    pub runtime_secs: f64,
}

/// Per-replication record, exportable for external plotting.
#[derive(Debug, Clone, Serialize)]
pub struct RepRecord {
    pub rep: usize,
    pub strategy: String,
    pub ok: bool,
    pub theta_hat: Vec<f64>,
    pub se: Vec<f64>,
}

/// Run a Monte Carlo study: `reps` independent datasets, each fitted once
/// per weight strategy. Failed fits are counted and excluded from the
/// summary moments. Replications run in parallel; the reduction is keyed
/// by replication index so the report does not depend on thread count.
pub fn mc_study(
    sc: &Scenario,
    reps: usize,
    variants: &[PhiStrategy],
    config: &FitConfig,
) -> Result<(McReport, Vec<RepRecord>)> {
    sc.validate()?;
    if reps == 0 {
        return Err(Error::InvalidInput("reps must be >= 1".into()));
    }
    if variants.is_empty() {
        return Err(Error::InvalidInput("at least one variant".into()));
    }
    let started = std::time::Instant::now();
    let p = sc.model.theta_dim();

    struct RepOut {
        censored: f64,
        fits: Vec<Option<(Vec<f64>, Vec<f64>)>>,
    }

    let per_rep: Vec<RepOut> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = rep_rng(sc.seed, rep as u64);
            let data = match gen_with_rng(sc, &mut rng) {
                Ok(d) => d,
                Err(_) => {
                    return RepOut {
                        censored: f64::NAN,
                        fits: vec![None; variants.len()],
                    }
                }
            };
            let censored = data.censored_fraction();
            let fits = variants
                .iter()
                .map(|&strategy| {
                    let cfg = FitConfig {
                        phi: strategy,
                        ..config.clone()
                    };
                    solve(&data, &sc.model, &cfg)
                        .ok()
                        .map(|fit| (fit.theta_hat, fit.se))
                })
                .collect();
            RepOut { censored, fits }
        })
        .collect();

    let mut records = Vec::with_capacity(reps * variants.len());
    for (rep, out) in per_rep.iter().enumerate() {
        for (vi, strategy) in variants.iter().enumerate() {
            match &out.fits[vi] {
                Some((th, se)) => records.push(RepRecord {
                    rep,
                    strategy: strategy.to_string(),
                    ok: true,
                    theta_hat: th.clone(),
                    se: se.clone(),
                }),
                None => records.push(RepRecord {
                    rep,
                    strategy: strategy.to_string(),
                    ok: false,
                    theta_hat: vec![],
                    se: vec![],
                }),
            }
        }
    }

    let mut variant_reports = Vec::with_capacity(variants.len());
    for (vi, strategy) in variants.iter().enumerate() {
        let oks: Vec<&(Vec<f64>, Vec<f64>)> =
            per_rep.iter().filter_map(|o| o.fits[vi].as_ref()).collect();
        let n_ok = oks.len();
        if n_ok == 0 {
            return Err(Error::Domain(format!(
                "all {reps} replications failed for variant {strategy}"
            )));
        }
        let mut mean = vec![0.0; p];
        let mut mean_se = vec![0.0; p];
        for (th, se) in oks.iter() {
            for k in 0..p {
                mean[k] += th[k];
                mean_se[k] += se[k];
            }
        }
        mean.iter_mut().for_each(|v| *v /= n_ok as f64);
        mean_se.iter_mut().for_each(|v| *v /= n_ok as f64);
        let mut sd = vec![0.0; p];
        let mut cover = vec![0.0; p];
        for (th, se) in oks.iter() {
            for k in 0..p {
                sd[k] += (th[k] - mean[k]).powi(2);
                let lo = th[k] - 1.96 * se[k];
                let hi = th[k] + 1.96 * se[k];
                if lo <= sc.theta0[k] && sc.theta0[k] <= hi {
                    cover[k] += 1.0;
                }
            }
        }
        for k in 0..p {
            sd[k] = if n_ok > 1 {
                (sd[k] / (n_ok - 1) as f64).sqrt()
            } else {
                0.0
            };
            cover[k] /= n_ok as f64;
        }
        variant_reports.push(VariantReport {
            strategy: strategy.to_string(),
            n_ok,
            n_failed: reps - n_ok,
            bias: mean.iter().zip(&sc.theta0).map(|(m, t)| m - t).collect(),
            mean_theta: mean,
            sd_theta: sd,
            mean_se,
            coverage95: cover,
        });
    }

    let censored: Vec<f64> = per_rep
        .iter()
        .map(|o| o.censored)
        .filter(|c| c.is_finite())
        .collect();
    let mean_censored = if censored.is_empty() {
        f64::NAN
    } else {
        censored.iter().sum::<f64>() / censored.len() as f64
    };

    Ok((
        McReport {
            schema_version: crate::SCHEMA_VERSION,
            reps,
            n: sc.n,
            theta0: sc.theta0.clone(),
            mean_censored_fraction: mean_censored,
            variants: variant_reports,
            runtime_secs: started.elapsed().as_secs_f64(),
        },
        records,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Family;

    fn ph_scenario(seed: u64, n: usize) -> Scenario {
        Scenario {
            model: CoreModel::new(Family::ProportionalHazards, 1).unwrap(),
            theta0: vec![0.0],
            gamma0: Gamma0::Identity,
            covariate_law: vec![CovariateLaw::Uniform],
            censor_law: CensorLaw::None,
            n,
            seed,
        }
    }

    #[test]
    fn no_censoring_means_all_events() {
        let data = gen_dataset(&ph_scenario(1, 500)).unwrap();
        assert_eq!(data.n_events(), 500);
        assert_eq!(data.censored_fraction(), 0.0);
    }

    #[test]
    fn unit_exponential_law_at_null_parameters() {
        // PH with theta0 = 0 and identity transform: T ~ Exp(1).
        // KS distance below the 1% critical value 1.628/sqrt(n).
        let n = 10_000;
        let data = gen_dataset(&ph_scenario(2, n)).unwrap();
        let mut d = 0.0f64;
        for (i, s) in data.subjects().iter().enumerate() {
            let f = 1.0 - (-s.time).exp();
            let lo = i as f64 / n as f64;
            let hi = (i + 1) as f64 / n as f64;
            d = d.max((f - lo).abs()).max((f - hi).abs());
        }
        assert!(d < 1.628 / (n as f64).sqrt(), "KS distance {d}");
        let mean: f64 =
            data.subjects().iter().map(|s| s.time).sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.05);
    }

    #[test]
    fn gamma_frailty_at_null_beta_is_also_unit_exponential() {
        let sc = Scenario {
            model: CoreModel::new(Family::GammaFrailty { eta: 1.0 }, 1).unwrap(),
            theta0: vec![0.0],
            gamma0: Gamma0::Identity,
            covariate_law: vec![CovariateLaw::Uniform],
            censor_law: CensorLaw::None,
            n: 10_000,
            seed: 3,
        };
        let data = gen_dataset(&sc).unwrap();
        let mut d = 0.0f64;
        let n = sc.n;
        for (i, s) in data.subjects().iter().enumerate() {
            let f = 1.0 - (-s.time).exp();
            let lo = i as f64 / n as f64;
            let hi = (i + 1) as f64 / n as f64;
            d = d.max((f - lo).abs()).max((f - hi).abs());
        }
        assert!(d < 1.628 / (n as f64).sqrt(), "KS distance {d}");
    }

    #[test]
    fn generation_is_reproducible() {
        let a = gen_dataset(&ph_scenario(42, 100)).unwrap();
        let b = gen_dataset(&ph_scenario(42, 100)).unwrap();
        assert_eq!(a.subjects(), b.subjects());
        let c = gen_dataset(&ph_scenario(43, 100)).unwrap();
        assert_ne!(a.subjects(), c.subjects());
    }

    #[test]
    fn gamma0_inverses() {
        for g in [Gamma0::Identity, Gamma0::Square, Gamma0::Log1p] {
            for x in [0.0, 0.3, 2.0] {
                let t = g.inverse(x);
                assert!((g.apply(t) - x).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mc_single_rep_equals_single_fit() {
        let mut sc = ph_scenario(7, 150);
        sc.theta0 = vec![0.5];
        sc.censor_law = CensorLaw::Exponential(1.0 / 3.0);
        let cfg = FitConfig::default();
        let (report, records) = mc_study(&sc, 1, &[PhiStrategy::Zero], &cfg).unwrap();
        assert_eq!(report.reps, 1);
        assert_eq!(records.len(), 1);
        let mut rng = rep_rng(sc.seed, 0);
        let data = gen_with_rng(&sc, &mut rng).unwrap();
        let fit = solve(&data, &sc.model, &cfg).unwrap();
        assert_eq!(report.variants[0].mean_theta, fit.theta_hat);
    }

    #[test]
    fn mc_report_is_deterministic() {
        let mut sc = ph_scenario(11, 120);
        sc.theta0 = vec![0.4];
        sc.censor_law = CensorLaw::Exponential(0.3);
        let cfg = FitConfig::default();
        let (r1, rec1) = mc_study(&sc, 8, &[PhiStrategy::Zero], &cfg).unwrap();
        let (r2, rec2) = mc_study(&sc, 8, &[PhiStrategy::Zero], &cfg).unwrap();
        let j1 = serde_json::to_string(&r1).unwrap();
        let j2 = serde_json::to_string(&r2).unwrap();
        assert_eq!(j1, j2); // runtime is excluded from serialization
        assert_eq!(
            serde_json::to_string(&rec1).unwrap(),
            serde_json::to_string(&rec2).unwrap()
        );
    }

    #[test]
    fn zero_reps_is_an_error() {
        let sc = ph_scenario(1, 50);
        assert!(mc_study(&sc, 0, &[PhiStrategy::Zero], &FitConfig::default()).is_err());
    }
}
