//! The efficient-weight machinery.
//!
//! After rescaling by the product integral, the weight equation becomes a
//! Fredholm equation of the second kind whose kernel `k(t,u) = c(t ^ u)` is
//! the covariance of a time-changed Brownian motion:
//!
//! ```text
//! psi(t) + sum_i c(t_i ^ t) b({t_i}) psi(t_i) = eta(t).
//! ```
//!
//! Three independent routes solve it: a dense linear solve (the normative
//! reference), a symmetric tridiagonal reduction obtained by differencing
//! consecutive rows, and the closed-form resolvent built from the interval
//! functions `Psi_0..Psi_3`. The interval functions are alternating-chain
//! sums over the atoms of the `c` and `b` measures; all their classical
//! identities (the paired Volterra forms, the Wronskian constant, the
//! Fredholm-determinant expansion) hold exactly for atomic measures with
//! the tie conventions implemented here, and the tests pin every one.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::mestimate::{PhiStrategy, WeightPath};
use crate::transform::TransformPath;

/// Which product-integral prefix rescales the measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrefixForm {
    /// The exact discrete product `prod (1 - S' dC)`. Keeps the whole
    /// pipeline algebraically consistent with the path's kernel, so the
    /// efficient weight makes `Sigma1 = Sigma2` to rounding.
    Product,
    /// The exponential form `exp(-sum S' dC)`; agrees with the product to
    /// second order in the atom sizes. Exposed for diagnostics.
    Exponential,
}

/// The rescaled `c` and `b` measures on the event atoms.
#[derive(Debug, Clone)]
pub struct CbMeasures {
    /// atom times
    pub atoms: Vec<f64>,
    /// dc at each atom: dC * prefix^-2
    pub dc: Vec<f64>,
    /// db at each atom: prefix^2 * v dN
    pub db: Vec<f64>,
    /// the prefix P(0, t_j] used for the rescaling
    pub prefix: Vec<f64>,
    pub form: PrefixForm,
}

impl CbMeasures {
    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// Cumulative `c(t_j)` including the atom at `j`.
    pub fn c_cumulative(&self) -> Vec<f64> {
        self.dc
            .iter()
            .scan(0.0, |acc, d| {
                *acc += d;
                Some(*acc)
            })
            .collect()
    }
}

/// Build the rescaled measures from a fitted path (product form).
pub fn cb_measures(path: &TransformPath) -> CbMeasures {
    cb_measures_with_form(path, PrefixForm::Product)
}

pub fn cb_measures_with_form(path: &TransformPath, form: PrefixForm) -> CbMeasures {
    let m = path.n_atoms();
    let prefix: Vec<f64> = match form {
        PrefixForm::Product => path.prod_int_from_zero.clone(),
        PrefixForm::Exponential => {
            let mut acc = 0.0;
            (0..m)
                .map(|j| {
                    acc += path.left.s_dx[j] * path.dc[j];
                    (-acc).exp()
                })
                .collect()
        }
    };
    let mut dc = Vec::with_capacity(m);
    let mut db = Vec::with_capacity(m);
    for j in 0..m {
        let w = prefix[j];
        dc.push(path.dc[j] / (w * w));
        db.push(w * w * path.moments.v[j] * path.event_mass[j]);
    }
    CbMeasures {
        atoms: path.times.clone(),
        dc,
        db,
        prefix,
        form,
    }
}

/// `kappa = int c db` over the atoms (cumulative `c` inclusive).
pub fn kappa(cb: &CbMeasures) -> f64 {
    let mut c = 0.0;
    let mut acc = 0.0;
    for j in 0..cb.len() {
        c += cb.dc[j];
        acc += c * cb.db[j];
    }
    acc
}

/// Interval functions of the measure pair, anchored at both endpoints.
///
/// With atoms `1..m`, `fwd_psi0[j]`/`fwd_psi1[j]` cover the first `j` atoms
/// (the interval `(0, t_j]`), `fwd_psi2`/`fwd_psi3` the same window closed
/// on the left; `bwd_*[j]` cover the suffix starting at atom `j+1` (open
/// left) or `j+1` closed for the `psi2`/`psi3` variants. `w = Psi_0(0,tau]`
/// is the Fredholm determinant at `lambda = -1`.
#[derive(Debug, Clone)]
pub struct PsiTable {
    pub gammas: Vec<f64>,
    pub betas: Vec<f64>,
    /// Psi_0(0, t_j], length m+1, index 0 = empty interval
    pub fwd_psi0: Vec<f64>,
    /// Psi_1(0, t_j]
    pub fwd_psi1: Vec<f64>,
    /// Psi_2 over the first j atoms, closed window
    pub fwd_psi2: Vec<f64>,
    /// Psi_3 over the first j atoms, closed window
    pub fwd_psi3: Vec<f64>,
    /// Psi_0 over atoms j+1.., length m+1, index m = empty
    pub bwd_psi0: Vec<f64>,
    /// Psi_1 over atoms j+1..
    pub bwd_psi1: Vec<f64>,
    /// Psi_2 over atoms j.., closed at j; index m = empty
    pub bwd_psi2: Vec<f64>,
    /// Psi_3 over atoms j.., closed at j
    pub bwd_psi3: Vec<f64>,
    /// Psi_0(0, tau]
    pub w: f64,
    /// max relative deviation over the paired integral forms
    pub identity_dev: f64,
}

/// Forward/backward chain recursions over the atoms. The chains alternate a
/// `c`-increment and a `b`-atom; ties at one atom are allowed inside a pair
/// going forward and between pairs going backward, which is exactly what
/// makes the splitting identities exact for atomic measures.
pub fn psi_table(cb: &CbMeasures) -> PsiTable {
    let m = cb.len();
    let g = &cb.dc;
    let b = &cb.db;

    let mut fwd_psi0 = Vec::with_capacity(m + 1);
    let mut fwd_psi1 = Vec::with_capacity(m + 1);
    let mut fwd_psi2 = Vec::with_capacity(m + 1);
    let mut fwd_psi3 = Vec::with_capacity(m + 1);
    let (mut a0, mut a1, mut a2, mut a3) = (1.0, 0.0, 1.0, 0.0);
    fwd_psi0.push(a0);
    fwd_psi1.push(a1);
    fwd_psi2.push(a2);
    fwd_psi3.push(a3);
    for k in 0..m {
        a1 += g[k] * a0;
        a0 += b[k] * a1;
        a2 += g[k] * a3;
        a3 += b[k] * a2;
        fwd_psi0.push(a0);
        fwd_psi1.push(a1);
        fwd_psi2.push(a2);
        fwd_psi3.push(a3);
    }

    let mut bwd_psi0 = vec![0.0; m + 1];
    let mut bwd_psi1 = vec![0.0; m + 1];
    let mut bwd_psi2 = vec![0.0; m + 1];
    let mut bwd_psi3 = vec![0.0; m + 1];
    let (mut r0, mut r3, mut r1, mut r2) = (1.0, 0.0, 0.0, 1.0);
    bwd_psi0[m] = r0;
    bwd_psi1[m] = r1;
    bwd_psi2[m] = r2;
    bwd_psi3[m] = r3;
    for k in (0..m).rev() {
        r3 += b[k] * r0;
        r0 += g[k] * r3;
        r2 += b[k] * r1;
        r1 += g[k] * r2;
        bwd_psi0[k] = r0;
        bwd_psi1[k] = r1;
        bwd_psi2[k] = r2;
        bwd_psi3[k] = r3;
    }

    let w = fwd_psi0[m];

    // paired integral forms of each Psi_j, cross-anchored
    let mut dev = 0.0f64;
    let rel = |x: f64, y: f64| (x - y).abs() / x.abs().max(y.abs()).max(1e-300);
    let mut acc = 1.0;
    for k in 0..m {
        acc += g[k] * bwd_psi3[k];
    }
    dev = dev.max(rel(acc, w)); // Psi_0 = 1 + int c(du) Psi_3[u, tau]
    acc = 1.0;
    for k in 0..m {
        acc += b[k] * fwd_psi1[k + 1];
    }
    dev = dev.max(rel(acc, w)); // Psi_0 = 1 + int Psi_1(0,u] b(du)
    acc = 0.0;
    for k in 0..m {
        acc += g[k] * fwd_psi0[k];
    }
    dev = dev.max(rel(acc, fwd_psi1[m])); // Psi_1 = int Psi_0(0,u-) c(du)
    acc = 0.0;
    for k in 0..m {
        acc += g[k] * bwd_psi2[k];
    }
    dev = dev.max(rel(acc, fwd_psi1[m])); // Psi_1 = int c(du) Psi_2[u, tau]
    acc = 1.0;
    for k in 0..m {
        acc += g[k] * fwd_psi3[k];
    }
    dev = dev.max(rel(acc, bwd_psi2[0])); // Psi_2 = 1 + int Psi_3[s,u) c(du)
    acc = 0.0;
    for k in 0..m {
        acc += b[k] * fwd_psi2[k + 1];
    }
    dev = dev.max(rel(acc, bwd_psi3[0])); // Psi_3 = int Psi_2[s,u] b(du)
    // forward and backward sweeps must meet on the full window
    dev = dev.max(rel(fwd_psi0[m], bwd_psi0[0]));
    dev = dev.max(rel(fwd_psi1[m], bwd_psi1[0]));
    dev = dev.max(rel(fwd_psi2[m], bwd_psi2[0]));
    dev = dev.max(rel(fwd_psi3[m], bwd_psi3[0]));

    PsiTable {
        gammas: g.clone(),
        betas: b.clone(),
        fwd_psi0,
        fwd_psi1,
        fwd_psi2,
        fwd_psi3,
        bwd_psi0,
        bwd_psi1,
        bwd_psi2,
        bwd_psi3,
        w,
        identity_dev: dev,
    }
}

/// Interval functions over the atom window `[lo, hi)` alone:
/// `(psi0, psi1, psi2, psi3)` of that sub-interval.
pub fn psi_window(cb: &CbMeasures, lo: usize, hi: usize) -> (f64, f64, f64, f64) {
    let (mut a0, mut a1, mut a2, mut a3) = (1.0, 0.0, 1.0, 0.0);
    for k in lo..hi {
        a1 += cb.dc[k] * a0;
        a0 += cb.db[k] * a1;
        a2 += cb.dc[k] * a3;
        a3 += cb.db[k] * a2;
    }
    (a0, a1, a2, a3)
}

/// Per-order terms `Psi_0m(0, tau]` of the chain expansion, `m = 0..=m_max`.
pub fn psi0_order_terms(cb: &CbMeasures, m_max: usize) -> Vec<f64> {
    let mut a = vec![0.0; m_max + 1]; // order-m pair chains
    let mut b1 = vec![0.0; m_max + 1]; // order-m chains with a trailing c
    a[0] = 1.0;
    for k in 0..cb.len() {
        for n in 0..=m_max {
            b1[n] += cb.dc[k] * a[n];
        }
        for n in (1..=m_max).rev() {
            a[n] += cb.db[k] * b1[n - 1];
        }
    }
    a
}

/// The resolvent of the kernel `k(t,u) = c(t ^ u)` at `lambda = -1`:
/// `W^-1 Psi_1(0, t^u] Psi_0((t v u), tau]`. Indices address atoms.
pub fn resolvent(table: &PsiTable, t_index: usize, u_index: usize) -> f64 {
    assert!(table.w > 0.0, "Psi_0(0,tau] must be positive");
    let lo = t_index.min(u_index);
    let hi = t_index.max(u_index);
    table.fwd_psi1[lo + 1] * table.bwd_psi0[hi + 1] / table.w
}

/// Solution route for the discrete Fredholm system.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveMethod {
    /// Direct dense linear solve; the normative reference.
    Dense,
    /// Symmetric tridiagonal reduction (row differencing), O(m).
    Tridiagonal,
    /// Closed-form resolvent via the interval functions, O(m).
    Resolvent,
}

/// Solve `psi_j + sum_i c(t_i ^ t_j) db_i psi_i = eta_j`.
pub fn solve_fredholm(cb: &CbMeasures, eta: &[f64], method: SolveMethod) -> Result<Vec<f64>> {
    let m = cb.len();
    if m == 0 {
        return Err(Error::InvalidInput("no atoms".into()));
    }
    if eta.len() != m || eta.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("eta must be finite on the atoms".into()));
    }
    if cb.dc.iter().any(|&g| g < 0.0) || cb.db.iter().any(|&b| b < 0.0) {
        return Err(Error::InvalidInput("measures must be nonnegative".into()));
    }
    match method {
        SolveMethod::Dense => {
            let c = cb.c_cumulative();
            let mut f = DMatrix::zeros(m, m);
            for j in 0..m {
                for i in 0..m {
                    f[(j, i)] = c[i.min(j)] * cb.db[i];
                }
                f[(j, j)] += 1.0;
            }
            let rhs = DVector::from_row_slice(eta);
            let lu = f.lu();
            lu.solve(&rhs)
                .map(|x| x.as_slice().to_vec())
                .ok_or_else(|| Error::Domain("dense Fredholm solve failed".into()))
        }
        SolveMethod::Tridiagonal => {
            if cb.dc.iter().any(|&g| g <= 0.0) {
                return Err(Error::InvalidInput(
                    "tridiagonal route needs strictly positive c-increments".into(),
                ));
            }
            // Differencing consecutive rows leaves, for the increments
            // w_j = psi_j - psi_{j-1}:
            //   w_j / g_j + sum_{i>=j} db_i psi_i = (eta_j - eta_{j-1}) / g_j,
            // and differencing once more couples only neighbours:
            //   -psi_{j-1}/g_j + (1/g_j + 1/g_{j+1} + db_j) psi_j - psi_{j+1}/g_{j+1}
            //     = d_j/g_j - d_{j+1}/g_{j+1},  d_j = eta_j - eta_{j-1},
            // with the last undifferenced row (1/g_m + db_m) psi_m - psi_{m-1}/g_m
            //     = d_m/g_m.
            let mut diag = Vec::with_capacity(m);
            let mut off = Vec::with_capacity(m.saturating_sub(1));
            let mut rhs = Vec::with_capacity(m);
            for j in 0..m {
                let dj = eta[j] - if j == 0 { 0.0 } else { eta[j - 1] };
                if j + 1 < m {
                    diag.push(1.0 / cb.dc[j] + 1.0 / cb.dc[j + 1] + cb.db[j]);
                    off.push(-1.0 / cb.dc[j + 1]);
                    let dj1 = eta[j + 1] - eta[j];
                    rhs.push(dj / cb.dc[j] - dj1 / cb.dc[j + 1]);
                } else {
                    diag.push(1.0 / cb.dc[j] + cb.db[j]);
                    rhs.push(dj / cb.dc[j]);
                }
            }
            crate::linalg::solve_sym_tridiagonal(&diag, &off, &rhs)
        }
        SolveMethod::Resolvent => {
            let table = psi_table(cb);
            // psi = eta - int resolvent b eta, split at the diagonal so each
            // side is a prefix sum
            let mut pre = Vec::with_capacity(m + 1); // sum_{i<=j} Psi1(0,i] db_i eta_i
            let mut acc = 0.0;
            for i in 0..m {
                acc += table.fwd_psi1[i + 1] * cb.db[i] * eta[i];
                pre.push(acc);
            }
            let mut post = vec![0.0; m + 1]; // sum_{i>j} Psi0((i,tau]] db_i eta_i
            for i in (0..m).rev() {
                post[i] = post[i + 1] + table.bwd_psi0[i + 1] * cb.db[i] * eta[i];
            }
            Ok((0..m)
                .map(|j| {
                    eta[j]
                        - (table.bwd_psi0[j + 1] * pre[j] + table.fwd_psi1[j + 1] * post[j + 1])
                            / table.w
                })
                .collect())
        }
    }
}

/// The efficient weight: per coordinate of `theta`,
/// `phi(t) = -gamma_dot(t) + P(0,t) sum_u resolvent(t,u) rho*(u) P(0,u) dN(u)`
/// with `rho*(u) = v(u) gamma_dot(u) + rho(u)`. Falls back to
/// `-gamma_dot` when `v` vanishes identically.
pub fn efficient_phi(
    path: &TransformPath,
    cb: &CbMeasures,
    table: &PsiTable,
) -> Result<WeightPath> {
    let m = path.n_atoms();
    let p = path.theta_dim();
    if cb.len() != m {
        return Err(Error::InvalidInput("measures and path disagree on atoms".into()));
    }
    let degenerate = path
        .moments
        .v
        .iter()
        .zip(&path.event_mass)
        .all(|(&v, &dn)| v * dn == 0.0);
    if degenerate {
        return Ok(WeightPath {
            strategy: PhiStrategy::Efficient,
            p,
            values: path.gamma_dot.iter().map(|g| -g).collect(),
        });
    }

    let mut values = vec![0.0; m * p];
    let mut weighted = vec![0.0; m];
    for k in 0..p {
        // rho*(u) P(0,u) dN(u) on the atoms
        for j in 0..m {
            let rho_star =
                path.moments.v[j] * path.gamma_dot_at(j)[k] + path.moments.rho_at(j)[k];
            weighted[j] = cb.prefix[j] * rho_star * path.event_mass[j];
        }
        // resolvent contraction by prefix/suffix sums
        let mut pre = Vec::with_capacity(m);
        let mut acc = 0.0;
        for i in 0..m {
            acc += table.fwd_psi1[i + 1] * weighted[i];
            pre.push(acc);
        }
        let mut post = vec![0.0; m + 1];
        for i in (0..m).rev() {
            post[i] = post[i + 1] + table.bwd_psi0[i + 1] * weighted[i];
        }
        for j in 0..m {
            let psi_tilde =
                (table.bwd_psi0[j + 1] * pre[j] + table.fwd_psi1[j + 1] * post[j + 1]) / table.w;
            values[j * p + k] = -path.gamma_dot_at(j)[k] + cb.prefix[j] * psi_tilde;
        }
    }
    Ok(WeightPath {
        strategy: PhiStrategy::Efficient,
        p,
        values,
    })
}

/// Per-order Fredholm determinant terms `d_m / m!` computed by brute force:
/// explicit minors `det [c(s_i ^ s_j)]` summed over ordered atom tuples.
/// Returns the terms and the reconstructed determinant `D(-1) = sum_m d_m/m!`.
pub fn determinant_oracle(cb: &CbMeasures, m_max: usize) -> Result<(Vec<f64>, f64)> {
    let m = cb.len();
    if m > 8 {
        return Err(Error::InvalidInput(format!(
            "determinant oracle is combinatorial; {m} atoms > 8"
        )));
    }
    if m_max > 4 {
        return Err(Error::InvalidInput("m_max must be <= 4".into()));
    }
    let c = cb.c_cumulative();
    let mut terms = Vec::with_capacity(m_max + 1);
    terms.push(1.0); // d_0 = 1
    for order in 1..=m_max {
        let mut total = 0.0;
        if order <= m {
            let mut idx: Vec<usize> = (0..order).collect();
            loop {
                // det of the min-kernel minor at these atoms, times the b-masses
                let mut minor = DMatrix::zeros(order, order);
                for (r, &ir) in idx.iter().enumerate() {
                    for (s, &is) in idx.iter().enumerate() {
                        minor[(r, s)] = c[ir.min(is)];
                    }
                }
                let det: f64 = minor.lu().determinant();
                let bmass: f64 = idx.iter().map(|&i| cb.db[i]).product();
                total += det * bmass;
                if !next_combination(&mut idx, m) {
                    break;
                }
            }
        }
        terms.push(total);
    }
    let recon: f64 = terms.iter().sum();
    Ok((terms, recon))
}

/// Advance an ordered index tuple to the next combination of `m` items.
fn next_combination(idx: &mut [usize], m: usize) -> bool {
    let k = idx.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if idx[i] != i + m - k {
            idx[i] += 1;
            for j in i + 1..k {
                idx[j] = idx[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Max relative deviation of the Wronskian identity
/// `W = Psi_1(0,t] Psi_3((t,tau]] + Psi_0(0,t] Psi_0((t,tau]]` over atoms.
pub fn wronskian_check(table: &PsiTable) -> f64 {
    let m = table.gammas.len();
    let mut dev = 0.0f64;
    for j in 0..m {
        let lhs = table.fwd_psi1[j + 1] * table.bwd_psi3[j + 1]
            + table.fwd_psi0[j + 1] * table.bwd_psi0[j + 1];
        dev = dev.max((lhs - table.w).abs() / table.w);
    }
    dev
}

/// Diagnostics snapshot for export.
pub fn diagnostics_json(cb: &CbMeasures, table: &PsiTable) -> serde_json::Value {
    serde_json::json!({
        "schema_version": crate::SCHEMA_VERSION,
        "atoms": cb.atoms,
        "dc": cb.dc,
        "db": cb.db,
        "psi0_tau": table.w,
        "kappa": kappa(cb),
        "wronskian_dev": wronskian_check(table),
        "identity_dev": table.identity_dev,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn synthetic(atoms: &[(f64, f64)]) -> CbMeasures {
        CbMeasures {
            atoms: (1..=atoms.len()).map(|k| k as f64).collect(),
            dc: atoms.iter().map(|a| a.0).collect(),
            db: atoms.iter().map(|a| a.1).collect(),
            prefix: vec![1.0; atoms.len()],
            form: PrefixForm::Product,
        }
    }

    fn random_instance(rng: &mut ChaCha8Rng, m: usize) -> CbMeasures {
        let scale = rng.gen_range(0.2..2.0) / m as f64;
        let atoms: Vec<(f64, f64)> = (0..m)
            .map(|_| {
                (
                    rng.gen_range(1e-4..1.0f64),
                    rng.gen_range(0.0..1.0f64) * scale,
                )
            })
            .collect();
        synthetic(&atoms)
    }

    #[test]
    fn single_atom_closed_forms() {
        let cb = synthetic(&[(0.7, 0.4)]);
        let t = psi_table(&cb);
        assert_relative_eq!(t.w, 1.0 + 0.7 * 0.4, epsilon = 1e-15);
        assert_relative_eq!(t.fwd_psi1[1], 0.7, epsilon = 1e-15);
        // resolvent c1/(1 + c1 b1) and its defining equation c = d + d*b*c
        let d = resolvent(&t, 0, 0);
        assert_relative_eq!(d, 0.7 / (1.0 + 0.28), epsilon = 1e-15);
        assert_relative_eq!(0.7, d + d * 0.4 * 0.7, epsilon = 1e-15);
        // scalar solve
        let psi = solve_fredholm(&cb, &[2.0], SolveMethod::Dense).unwrap();
        assert_relative_eq!(psi[0], 2.0 / 1.28, epsilon = 1e-15);
        // Wronskian at the single atom: Psi1(0,t1] Psi3 + Psi0 Psi0 = c*0 + (1+cb)*1
        assert!(wronskian_check(&t) <= 1e-15);
    }

    #[test]
    fn zero_b_measure_degenerates() {
        let cb = synthetic(&[(0.3, 0.0), (0.5, 0.0), (0.2, 0.0)]);
        let t = psi_table(&cb);
        assert_eq!(t.w, 1.0);
        for j in 0..3 {
            assert_eq!(t.fwd_psi0[j + 1], 1.0);
            assert_eq!(t.bwd_psi2[j], 1.0);
            assert_eq!(t.bwd_psi3[j], 0.0);
        }
        // Psi1(0,t] = c(t), resolvent = c(min)
        let c = cb.c_cumulative();
        for j in 0..3 {
            assert_relative_eq!(t.fwd_psi1[j + 1], c[j], epsilon = 1e-15);
            for i in 0..3 {
                assert_relative_eq!(resolvent(&t, i, j), c[i.min(j)], epsilon = 1e-15);
            }
        }
        // identity system: psi = eta
        let eta = [1.0, -2.0, 0.5];
        for method in [SolveMethod::Dense, SolveMethod::Tridiagonal, SolveMethod::Resolvent] {
            let psi = solve_fredholm(&cb, &eta, method).unwrap();
            for (p, e) in psi.iter().zip(&eta) {
                assert_relative_eq!(p, e, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn two_atom_table_matches_hand_expansion() {
        let (g1, b1, g2, b2) = (0.6, 0.3, 0.8, 0.5);
        let cb = synthetic(&[(g1, b1), (g2, b2)]);
        let t = psi_table(&cb);
        let c2 = g1 + g2;
        let w = 1.0 + g1 * b1 + c2 * b2 + g1 * g2 * b1 * b2;
        assert_relative_eq!(t.w, w, epsilon = 1e-15);
        assert_relative_eq!(t.fwd_psi1[2], g1 + g2 * (1.0 + g1 * b1), epsilon = 1e-15);
        assert_relative_eq!(t.bwd_psi0[1], 1.0 + g2 * b2, epsilon = 1e-15);
        // resolvent against the direct 2x2 inverse
        assert_relative_eq!(
            resolvent(&t, 0, 0),
            g1 * (1.0 + g2 * b2) / w,
            epsilon = 1e-14
        );
        assert_relative_eq!(resolvent(&t, 0, 1), g1 / w, epsilon = 1e-14);
        assert_relative_eq!(
            resolvent(&t, 1, 1),
            (c2 + g1 * b1 * g2) / w,
            epsilon = 1e-14
        );
    }

    #[test]
    fn psi_identities_and_wronskian_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..30 {
            let m = rng.gen_range(1..40);
            let cb = random_instance(&mut rng, m);
            let t = psi_table(&cb);
            assert!(t.identity_dev <= 1e-12, "identity dev {}", t.identity_dev);
            assert!(wronskian_check(&t) <= 1e-12);
            // Psi_0 bounded by exp kappa, monotone increasing in the window
            assert!(t.w <= kappa(&cb).exp() * (1.0 + 1e-12));
            for j in 0..m {
                assert!(t.fwd_psi0[j] <= t.fwd_psi0[j + 1] + 1e-15);
                assert!(t.fwd_psi1[j] <= t.fwd_psi1[j + 1] + 1e-15);
            }
            // Psi_1(s,t] <= Psi_0(s,t] (c(t) - c(s)) on sub-windows
            let c = cb.c_cumulative();
            for lo in (0..m).step_by(3) {
                let (p0, p1, _, _) = psi_window(&cb, lo, m);
                let cdiff = c[m - 1] - if lo == 0 { 0.0 } else { c[lo - 1] };
                assert!(p1 <= p0 * cdiff * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn resolvent_satisfies_both_integral_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let m = rng.gen_range(1..25);
            let cb = random_instance(&mut rng, m);
            let t = psi_table(&cb);
            let c = cb.c_cumulative();
            for ti in 0..m {
                for ui in 0..m {
                    let k = c[ti.min(ui)];
                    // K = D + int D(t,w) b(dw) K(w,u)  (lambda = -1)
                    let mut s1 = resolvent(&t, ti, ui);
                    let mut s2 = s1;
                    for w in 0..m {
                        s1 += resolvent(&t, ti, w) * cb.db[w] * c[w.min(ui)];
                        s2 += c[ti.min(w)] * cb.db[w] * resolvent(&t, w, ui);
                    }
                    assert_relative_eq!(s1, k, max_relative = 1e-10, epsilon = 1e-12);
                    assert_relative_eq!(s2, k, max_relative = 1e-10, epsilon = 1e-12);
                    // paper bound: resolvent <= Psi_0(0,tau] c(min)
                    assert!(resolvent(&t, ti, ui) <= t.w * k * (1.0 + 1e-12));
                    // symmetry
                    assert_eq!(resolvent(&t, ti, ui), resolvent(&t, ui, ti));
                }
            }
        }
    }

    #[test]
    fn three_solvers_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let m = rng.gen_range(1..60);
            let cb = random_instance(&mut rng, m);
            let eta: Vec<f64> = (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let dense = solve_fredholm(&cb, &eta, SolveMethod::Dense).unwrap();
            let tri = solve_fredholm(&cb, &eta, SolveMethod::Tridiagonal).unwrap();
            let res = solve_fredholm(&cb, &eta, SolveMethod::Resolvent).unwrap();
            assert!(crate::linalg::rel_diff_inf(&dense, &tri) <= 1e-9);
            assert!(crate::linalg::rel_diff_inf(&dense, &res) <= 1e-9);
            // L2 bound of the solution
            let norm = |v: &[f64]| -> f64 {
                v.iter()
                    .zip(&cb.db)
                    .map(|(x, b)| x * x * b)
                    .sum::<f64>()
                    .sqrt()
            };
            let t = psi_table(&cb);
            assert!(norm(&dense) <= norm(&eta) * (1.0 + t.w * kappa(&cb)) * (1.0 + 1e-9));
        }
    }

    #[test]
    fn min_kernel_is_positive_semidefinite() {
        // sequential pivots of the min-kernel are the c-increments
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cb = random_instance(&mut rng, 12);
        let c = cb.c_cumulative();
        let m = cb.len();
        let mut k = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in 0..m {
                k[(i, j)] = c[i.min(j)];
            }
        }
        // Cholesky-style elimination; every pivot must be nonnegative
        let mut a = k.clone();
        for step in 0..m {
            let pivot = a[(step, step)];
            assert!(pivot >= -1e-12, "negative pivot {pivot} at {step}");
            if pivot <= 0.0 {
                continue;
            }
            for i in step + 1..m {
                let f = a[(i, step)] / pivot;
                for j in step..m {
                    let v = a[(step, j)];
                    a[(i, j)] -= f * v;
                }
            }
        }
    }

    #[test]
    fn determinant_oracle_matches_chain_orders() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10 {
            let m = rng.gen_range(1..=6);
            let cb = random_instance(&mut rng, m);
            let (terms, recon) = determinant_oracle(&cb, 3).unwrap();
            let orders = psi0_order_terms(&cb, 3);
            assert_relative_eq!(terms[0], 1.0);
            for i in 0..=3 {
                assert_relative_eq!(terms[i], orders[i], max_relative = 1e-10, epsilon = 1e-14);
            }
            // truncated reconstruction approaches W from below (nonneg terms)
            let t = psi_table(&cb);
            assert!(recon <= t.w * (1.0 + 1e-12));
        }
    }

    #[test]
    fn determinant_minor_factorizes_into_increments() {
        // det [c(s_i ^ s_j)] over ordered atoms = prod of c-increments
        let cb = synthetic(&[(0.4, 0.1), (0.3, 0.2), (0.6, 0.3), (0.2, 0.4)]);
        let c = cb.c_cumulative();
        let idx = [0usize, 2, 3];
        let mut minor = DMatrix::zeros(3, 3);
        for (r, &ir) in idx.iter().enumerate() {
            for (s, &is) in idx.iter().enumerate() {
                minor[(r, s)] = c[ir.min(is)];
            }
        }
        let det = minor.lu().determinant();
        let product = c[0] * (c[2] - c[0]) * (c[3] - c[2]);
        assert_relative_eq!(det, product, max_relative = 1e-12);
    }

    #[test]
    fn oracle_rejects_large_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cb = random_instance(&mut rng, 9);
        assert!(determinant_oracle(&cb, 2).is_err());
    }

    #[test]
    fn wronskian_on_random_instance_is_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let cb = random_instance(&mut rng, 15);
        let t = psi_table(&cb);
        assert!(wronskian_check(&t) <= 1e-10);
    }
}
