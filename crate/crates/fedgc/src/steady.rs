//! Steady-state limits: limiting gains, the steady operating point (data/
//! parameter cross-covariance and mean path), steady cross-covariances, and
//! the coupled server/client covariance fixed points via Neumann series and
//! an alternating outer iteration.
//!
//! The fixed-point equations keep every source the per-round recursions
//! carry, including the data-driven floor entering through `Ω∞` and the mean
//! parameter. Iterating the recursions at the limiting gains therefore
//! converges to exactly these solutions, independent of any prior variance
//! (no prior appears in the inputs).

use serde::Serialize;

use crate::error::{FedgcError, Result};
use crate::linalg::{
    block_contraction, col_kron_identity, kron, row_kron_identity, spectral_radius, sym_part,
    unvectorize, vectorize, BlockIndex, Mat, Vector,
};
use crate::uncertainty::{
    gains, lambda_closed_form, omega_recursive_step, propagate_sigma_a, propagate_sigma_theta,
    sigma_h_exact, GainSet, Rates,
};

/// Inputs at the limit point: stationary data moments, converged filter
/// states, known blocks, rates, and the data lag-1 map feeding the steady
/// cross-covariance.
#[derive(Debug, Clone)]
pub struct SteadyInputs {
    pub idx: BlockIndex,
    pub a_diag: Vec<Mat>,
    pub c_diag: Vec<Mat>,
    pub mu_y: Vec<Vector>,
    pub sigma_y: Vec<Mat>,
    pub h_c_limit: Vec<Vector>,
    /// lag-1 data regression map per client (zero for i.i.d. measurements)
    pub data_lag: Vec<Mat>,
    pub rates: Rates,
}

impl SteadyInputs {
    pub fn obs_pred(&self) -> Vec<Mat> {
        self.c_diag
            .iter()
            .zip(self.a_diag.iter())
            .map(|(c, a)| c * a)
            .collect()
    }

    fn pairs(&self) -> Vec<(usize, usize)> {
        let mm = self.idx.clients();
        let mut out = Vec::new();
        for m in 0..mm {
            for n in 0..mm {
                if m != n {
                    out.push((m, n));
                }
            }
        }
        out
    }
}

/// Steady operating point: the self-consistent data/parameter
/// cross-covariance and the mean-path fixed point the covariance floor is
/// evaluated at.
#[derive(Debug, Clone)]
pub struct SteadyOperatingPoint {
    pub omega: Vec<Mat>,
    pub mu_theta: Vec<Mat>,
    pub a_bar: Vec<Vec<Mat>>,
    pub h_a_bar: Vec<Vector>,
    /// constant part of `Σ_h` (the aleatoric floor): `μ_θ Σ_y μ_θ^T +
    /// sym((μ^T ⊗ I) Ω μ_θ^T) + Σ_ij Ω-pairings`
    pub sigma_h_floor: Vec<Mat>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SteadyDiagnostics {
    pub rho_d: Vec<f64>,
    pub rho_h: Vec<f64>,
    pub neumann_terms: Vec<usize>,
    /// bound `ρ^{2k} ||Q||` on the truncation error per pair
    pub neumann_tail_bound: Vec<f64>,
    pub outer_iterations: usize,
    pub residual_sigma_a: f64,
    pub residual_sigma_theta: f64,
}

/// Converged covariances with residuals and contraction certificates.
#[derive(Debug, Clone)]
pub struct SteadySolution {
    pub sigma_theta: Vec<Mat>,
    pub sigma_a: Vec<Vec<Mat>>,
    pub sigma_h: Vec<Mat>,
    pub lambda: Vec<Mat>,
    pub gamma: Vec<Vec<Mat>>,
    pub psi: Vec<Vec<Mat>>,
    pub operating_point: SteadyOperatingPoint,
    pub diagnostics: SteadyDiagnostics,
}

impl SteadySolution {
    /// JSON report: traces, residuals, spectral radii, iteration counts.
    pub fn report_json(&self, idx: &BlockIndex) -> String {
        #[derive(Serialize)]
        struct Report<'a> {
            tr_sigma_theta: Vec<f64>,
            tr_sigma_a: Vec<PairTrace>,
            tr_sigma_h: Vec<f64>,
            diagnostics: &'a SteadyDiagnostics,
        }
        #[derive(Serialize)]
        struct PairTrace {
            m: usize,
            n: usize,
            trace: f64,
        }
        let mut tr_sigma_a = Vec::new();
        for m in 0..idx.clients() {
            for n in 0..idx.clients() {
                if m != n {
                    tr_sigma_a.push(PairTrace {
                        m: m + 1,
                        n: n + 1,
                        trace: self.sigma_a[m][n].trace(),
                    });
                }
            }
        }
        let report = Report {
            tr_sigma_theta: self.sigma_theta.iter().map(Mat::trace).collect(),
            tr_sigma_a,
            tr_sigma_h: self.sigma_h.iter().map(Mat::trace).collect(),
            diagnostics: &self.diagnostics,
        };
        serde_json::to_string_pretty(&report).expect("report serializes")
    }
}

/// Gains evaluated at `(μ_y, ĥ_{n,c})` limits. Errors if any contraction
/// certificate fails.
pub fn limiting_gains(inputs: &SteadyInputs) -> Result<GainSet> {
    let obs = inputs.obs_pred();
    let gs = gains(
        &inputs.idx,
        &inputs.a_diag,
        &obs,
        &inputs.mu_y,
        &inputs.h_c_limit,
        &inputs.rates,
    );
    let mm = inputs.idx.clients();
    for m in 0..mm {
        let rho = spectral_radius(&gs.h[m])?;
        if rho >= 1.0 {
            return Err(FedgcError::Stability {
                gain: format!(
                    "H_{} (directions orthogonal to mu_y persist unless lambda_c > 0)",
                    m + 1
                ),
                rho,
            });
        }
        for n in 0..mm {
            if n == m {
                continue;
            }
            let rho_d = spectral_radius(&gs.d[m][n])?;
            if rho_d >= 1.0 {
                return Err(FedgcError::Stability {
                    gain: format!(
                        "D_{} (unit eigenvalues orthogonal to h_{},c persist unless lambda_s > 0)",
                        n + 1,
                        n + 1
                    ),
                    rho: rho_d,
                });
            }
        }
    }
    Ok(gs)
}

/// Solve the steady operating point: `Ω∞` from its recursion fixed point and
/// the mean-path fixed point `(μ_θ, ā, h̄_a)` of the deterministic update
/// maps.
pub fn operating_point(inputs: &SteadyInputs, gs: &GainSet) -> Result<SteadyOperatingPoint> {
    let mm = inputs.idx.clients();
    let obs = inputs.obs_pred();

    // Ω∞ per client by iterating Ω ← H Ω D_data^T + G Σ_y (contraction)
    let mut omega = Vec::with_capacity(mm);
    for m in 0..mm {
        let pd = inputs.idx.state_dim(m) * inputs.idx.data_dim(m);
        let d_m = inputs.idx.data_dim(m);
        let mut w = Mat::zeros(pd, d_m);
        let mut converged = false;
        for _ in 0..200_000 {
            let next = omega_recursive_step(
                &w,
                &gs.h[m],
                &gs.g[m],
                &inputs.data_lag[m],
                &inputs.sigma_y[m],
            );
            let resid = (&next - &w).norm();
            w = next;
            if resid < 1e-14 {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(FedgcError::NonConvergence {
                what: format!("steady omega for client {}", m + 1),
                iterations: 200_000,
                residual: f64::NAN,
            });
        }
        omega.push(w);
    }

    // mean fixed point of the coupled deterministic updates
    let mut mu_v: Vec<Vector> = (0..mm)
        .map(|m| Vector::zeros(inputs.idx.state_dim(m) * inputs.idx.data_dim(m)))
        .collect();
    let mut a_bar: Vec<Vec<Mat>> = (0..mm)
        .map(|m| {
            (0..mm)
                .map(|n| Mat::zeros(inputs.idx.state_dim(m), inputs.idx.state_dim(n)))
                .collect()
        })
        .collect();
    let block_trace = |w: &Mat, p: usize, d: usize| -> Vector {
        let mut out = Vector::zeros(p);
        for j in 0..d {
            out += w.view((j * p, j), (p, 1)).column(0);
        }
        out
    };
    let mut converged = false;
    for _ in 0..500_000 {
        // mean augmented states under the current parameter means
        let h_a_bar: Vec<Vector> = (0..mm)
            .map(|m| {
                let p = inputs.idx.state_dim(m);
                let d = inputs.idx.data_dim(m);
                let theta_bar = unvectorize(&mu_v[m], p, d).expect("shape");
                &inputs.h_c_limit[m]
                    + theta_bar * &inputs.mu_y[m]
                    + block_trace(&omega[m], p, d)
            })
            .collect();
        let mut delta: f64 = 0.0;
        // server mean update (exact residual, all blocks)
        let mut a_next = a_bar.clone();
        for m in 0..mm {
            let target = &inputs.a_diag[m] * (&h_a_bar[m] - &inputs.h_c_limit[m]);
            for n in 0..mm {
                if n == m {
                    continue;
                }
                let mut resid = target.clone() - &a_bar[m][n] * &inputs.h_c_limit[n];
                for p in 0..mm {
                    if p != m && p != n {
                        resid -= &a_bar[m][p] * &inputs.h_c_limit[p];
                    }
                }
                let next = &a_bar[m][n] * (1.0 - 2.0 * inputs.rates.gamma * inputs.rates.lambda_s)
                    + resid * inputs.h_c_limit[n].transpose() * (2.0 * inputs.rates.gamma);
                delta = delta.max((&next - &a_bar[m][n]).norm());
                a_next[m][n] = next;
            }
        }
        // client mean update v̄ ← H v̄ + G (μ_y - C A ĥ_c) - Σ P̃ ā
        let mut v_next = mu_v.clone();
        for m in 0..mm {
            let innovation = &inputs.mu_y[m] - &obs[m] * &inputs.h_c_limit[m];
            let mut v = &gs.h[m] * &mu_v[m] + &gs.g[m] * innovation;
            for n in 0..mm {
                if n != m {
                    v -= &gs.p_chain[m][n] * vectorize(&a_bar[m][n]);
                }
            }
            delta = delta.max((&v - &mu_v[m]).norm());
            v_next[m] = v;
        }
        a_bar = a_next;
        mu_v = v_next;
        if delta < 1e-13 {
            converged = true;
            break;
        }
        if !mu_v.iter().all(|v| v.iter().all(|x| x.is_finite())) {
            break;
        }
    }
    if !converged {
        return Err(FedgcError::NonConvergence {
            what: "steady mean path".into(),
            iterations: 500_000,
            residual: f64::NAN,
        });
    }

    let mu_theta: Vec<Mat> = (0..mm)
        .map(|m| {
            unvectorize(&mu_v[m], inputs.idx.state_dim(m), inputs.idx.data_dim(m))
                .expect("shape")
        })
        .collect();
    let h_a_bar: Vec<Vector> = (0..mm)
        .map(|m| {
            let p = inputs.idx.state_dim(m);
            let d = inputs.idx.data_dim(m);
            &inputs.h_c_limit[m] + &mu_theta[m] * &inputs.mu_y[m] + block_trace(&omega[m], p, d)
        })
        .collect();

    // aleatoric floor of Σ_h at the operating point
    let sigma_h_floor: Vec<Mat> = (0..mm)
        .map(|m| {
            let p = inputs.idx.state_dim(m);
            let d = inputs.idx.data_dim(m);
            let mut f = &mu_theta[m] * &inputs.sigma_y[m] * mu_theta[m].transpose();
            let w = row_kron_identity(&inputs.mu_y[m], p) * &omega[m];
            let cross = &w * mu_theta[m].transpose();
            f += &cross + cross.transpose();
            for i in 0..d {
                for j in 0..d {
                    let oi_j = omega[m].view((i * p, j), (p, 1));
                    let oj_i = omega[m].view((j * p, i), (p, 1));
                    f += oi_j * oj_i.transpose();
                }
            }
            sym_part(&f)
        })
        .collect();

    Ok(SteadyOperatingPoint {
        omega,
        mu_theta,
        a_bar,
        h_a_bar,
        sigma_h_floor,
    })
}

/// Steady client-state variance at the operating point with the matching
/// `Λ∞(Σ_θ) = Σ_θ (μ_y ⊗ I) + Ω∞ μ_θ^T`.
pub fn sigma_h_infinity(
    inputs: &SteadyInputs,
    op: &SteadyOperatingPoint,
    sigma_theta: &[Mat],
) -> Result<(Vec<Mat>, Vec<Mat>)> {
    let mm = inputs.idx.clients();
    let mut sh = Vec::with_capacity(mm);
    let mut lam = Vec::with_capacity(mm);
    for m in 0..mm {
        let p = inputs.idx.state_dim(m);
        sh.push(sym_part(&sigma_h_exact(
            &sigma_theta[m],
            &op.omega[m],
            &inputs.mu_y[m],
            &inputs.sigma_y[m],
            &op.mu_theta[m],
            p,
        )?));
        lam.push(lambda_closed_form(
            &sigma_theta[m],
            &op.omega[m],
            &inputs.mu_y[m],
            &op.mu_theta[m],
            p,
        ));
    }
    Ok((sh, lam))
}

/// `Γ∞ = (I - D)^{-1} 2γ B Σ_h∞` per pair.
pub fn gamma_infinity(
    inputs: &SteadyInputs,
    gs: &GainSet,
    sigma_h: &[Mat],
) -> Result<Vec<Vec<Mat>>> {
    let mm = inputs.idx.clients();
    let mut out = vec![vec![Mat::zeros(0, 0); mm]; mm];
    for m in 0..mm {
        for n in 0..mm {
            if m == n {
                continue;
            }
            let sz = gs.d[m][n].nrows();
            let rhs = &gs.b[m][n] * &sigma_h[m] * (2.0 * inputs.rates.gamma);
            let lhs = Mat::identity(sz, sz) - &gs.d[m][n];
            out[m][n] = lhs.lu().solve(&rhs).ok_or_else(|| FedgcError::Stability {
                gain: format!("I - D_{}", n + 1),
                rho: 1.0,
            })?;
        }
    }
    Ok(out)
}

/// Steady `Ψ∞` per pair by the vectorized solve
/// `(I - H ⊗ D) vec(Ψ) = vec(rhs)`, keeping all six recursion sources.
pub fn psi_infinity(
    inputs: &SteadyInputs,
    gs: &GainSet,
    gamma_inf: &[Vec<Mat>],
    sigma_a: &[Vec<Mat>],
    lambda: &[Mat],
    sigma_h: &[Mat],
) -> Result<Vec<Vec<Mat>>> {
    let mm = inputs.idx.clients();
    let g = inputs.rates.gamma;
    let mut out = vec![vec![Mat::zeros(0, 0); mm]; mm];
    for m in 0..mm {
        for n in 0..mm {
            if m == n {
                continue;
            }
            let d = &gs.d[m][n];
            let b = &gs.b[m][n];
            let rhs = d * &gamma_inf[m][n] * gs.g_chain[m].transpose()
                - d * &sigma_a[m][n] * gs.p_chain[m][n].transpose()
                + b * lambda[m].transpose() * gs.h[m].transpose() * (2.0 * g)
                + b * &sigma_h[m] * gs.g_chain[m].transpose() * (2.0 * g)
                - b * gamma_inf[m][n].transpose() * gs.p_chain[m][n].transpose() * (2.0 * g);
            let (rows, cols) = (rhs.nrows(), rhs.ncols());
            let op = Mat::identity(rows * cols, rows * cols) - kron(&gs.h[m], d);
            let sol = op
                .lu()
                .solve(&vectorize(&rhs))
                .ok_or_else(|| FedgcError::Stability {
                    gain: format!("I - H_{} x D_{}", m + 1, n + 1),
                    rho: 1.0,
                })?;
            out[m][n] = unvectorize(&sol, rows, cols)?;
        }
    }
    Ok(out)
}

/// Neumann-series solve of `Σ_A = D Σ_A D^T + Q̃(Σ_θ∞)` for one pair, where
/// the source `Q̃` carries the state-variance injection and the steady `Γ∞`
/// cross terms. Returns the solution, term count, and tail bound
/// `ρ^{2k} ||Q̃||`.
pub fn sigma_a_infinity(
    inputs: &SteadyInputs,
    gs: &GainSet,
    m: usize,
    n: usize,
    sigma_h_m: &Mat,
    gamma_inf_mn: &Mat,
    tol: f64,
    k_max: usize,
) -> Result<(Mat, usize, f64)> {
    let d = &gs.d[m][n];
    let b = &gs.b[m][n];
    let rho = spectral_radius(d)?;
    if rho >= 1.0 {
        return Err(FedgcError::Stability {
            gain: format!("D_{}", n + 1),
            rho,
        });
    }
    let g = inputs.rates.gamma;
    let cross = d * gamma_inf_mn * b.transpose();
    let source = b * sigma_h_m * b.transpose() * (4.0 * g * g)
        + (&cross + cross.transpose()) * (2.0 * g);
    let mut acc = source.clone();
    let mut term = source.clone();
    let mut k = 0usize;
    loop {
        term = d * &term * d.transpose();
        k += 1;
        let norm = term.norm();
        if norm < tol {
            let tail = rho.powi(2 * k as i32) * source.norm();
            return Ok((sym_part(&acc), k, tail));
        }
        acc += &term;
        if k >= k_max {
            return Err(FedgcError::NonConvergence {
                what: format!(
                    "Neumann series for Sigma_A ({},{}) with rho(D) = {rho:.6}",
                    m + 1,
                    n + 1
                ),
                iterations: k,
                residual: norm,
            });
        }
    }
}

/// The client steady equation's Σ_θ-linear map at fixed sources:
/// `L(Σ) = H Σ H^T + G̃ contraction(E2, Σ) G̃^T + sym(H Σ (μ ⊗ I) G̃^T)`.
fn client_linear_map(inputs: &SteadyInputs, gs: &GainSet, m: usize, sigma: &Mat) -> Result<Mat> {
    let p = inputs.idx.state_dim(m);
    let e2 = &inputs.sigma_y[m] + &inputs.mu_y[m] * inputs.mu_y[m].transpose();
    let contraction = block_contraction(&e2, sigma, p)?;
    let mut out = &gs.h[m] * sigma * gs.h[m].transpose()
        + &gs.g_chain[m] * contraction * gs.g_chain[m].transpose();
    let lam_lin = sigma * col_kron_identity(&inputs.mu_y[m], p);
    let x = &gs.h[m] * lam_lin * gs.g_chain[m].transpose();
    out += &x + x.transpose();
    Ok(out)
}

/// Solve `Σ - L(Σ) = rhs` for one client: dense vectorized LU for small
/// blocks, damped fixed-point iteration otherwise.
fn solve_client_equation(
    inputs: &SteadyInputs,
    gs: &GainSet,
    m: usize,
    rhs: &Mat,
    tol: f64,
) -> Result<Mat> {
    let pd = inputs.idx.state_dim(m) * inputs.idx.data_dim(m);
    if pd * pd <= 4096 {
        let dim = pd * pd;
        let mut op = Mat::zeros(dim, dim);
        for j in 0..pd {
            for i in 0..pd {
                let mut basis = Mat::zeros(pd, pd);
                basis[(i, j)] = 1.0;
                let col = vectorize(&client_linear_map(inputs, gs, m, &basis)?);
                let idx = i + j * pd;
                for r in 0..dim {
                    op[(r, idx)] = -col[r];
                }
                op[(idx, idx)] += 1.0;
            }
        }
        let sol = op
            .lu()
            .solve(&vectorize(rhs))
            .ok_or_else(|| FedgcError::Numerical {
                context: "solve_client_equation".into(),
                message: "singular steady client operator".into(),
            })?;
        return Ok(sym_part(&unvectorize(&sol, pd, pd)?));
    }
    let mut x = rhs.clone();
    let mut resid = f64::INFINITY;
    for _ in 0..2_000_000 {
        let next = client_linear_map(inputs, gs, m, &x)? + rhs;
        resid = (&next - &x).norm();
        x = next;
        if resid < tol {
            return Ok(sym_part(&x));
        }
        if !x.iter().all(|v| v.is_finite()) {
            break;
        }
    }
    Err(FedgcError::NonConvergence {
        what: format!("steady client equation for client {}", m + 1),
        iterations: 2_000_000,
        residual: resid,
    })
}

/// Joint solve of the coupled steady equations by alternation:
/// given `Σ_θ^(k)`, build `Σ_h∞`, `Γ∞`, `Σ_A∞` (Neumann), `Ψ∞`, then solve
/// the client equation for `Σ_θ^(k+1)` and repeat until the joint residual
/// is below `tol`. No prior variance appears anywhere in the inputs.
pub fn solve_joint(inputs: &SteadyInputs, tol: f64) -> Result<SteadySolution> {
    let gs = limiting_gains(inputs)?;
    let op = operating_point(inputs, &gs)?;
    let mm = inputs.idx.clients();
    let pairs = inputs.pairs();

    let mut rho_d = Vec::new();
    let mut rho_h = Vec::new();
    for m in 0..mm {
        rho_h.push(spectral_radius(&gs.h[m])?);
    }
    for &(m, n) in &pairs {
        rho_d.push(spectral_radius(&gs.d[m][n])?);
    }

    let mut sigma_theta: Vec<Mat> = (0..mm)
        .map(|m| {
            let pd = inputs.idx.state_dim(m) * inputs.idx.data_dim(m);
            Mat::zeros(pd, pd)
        })
        .collect();
    let mut sigma_a = vec![vec![Mat::zeros(0, 0); mm]; mm];
    for &(m, n) in &pairs {
        let pp = inputs.idx.state_dim(m) * inputs.idx.state_dim(n);
        sigma_a[m][n] = Mat::zeros(pp, pp);
    }
    let mut gamma_inf = sigma_a.clone();
    let mut psi_inf = vec![vec![Mat::zeros(0, 0); mm]; mm];
    let mut sigma_h;
    let mut lambda;
    let mut neumann_terms = vec![0usize; pairs.len()];
    let mut neumann_tail = vec![0f64; pairs.len()];

    let mut prev_delta = f64::INFINITY;
    let mut grow_streak = 0usize;
    let mut outer = 0usize;
    loop {
        outer += 1;
        let (sh, lam) = sigma_h_infinity(inputs, &op, &sigma_theta)?;
        sigma_h = sh;
        lambda = lam;
        let _ = &lambda;
        gamma_inf = gamma_infinity(inputs, &gs, &sigma_h)?;
        for (i, &(m, n)) in pairs.iter().enumerate() {
            let (sa, terms, tail) = sigma_a_infinity(
                inputs,
                &gs,
                m,
                n,
                &sigma_h[m],
                &gamma_inf[m][n],
                1e-15,
                400_000,
            )?;
            sigma_a[m][n] = sa;
            neumann_terms[i] = terms;
            neumann_tail[i] = tail;
        }
        psi_inf = psi_infinity(inputs, &gs, &gamma_inf, &sigma_a, &lambda, &sigma_h)?;

        let mut new_sigma_theta = sigma_theta.clone();
        let mut delta: f64 = 0.0;
        for m in 0..mm {
            // constant sources at this outer iterate
            let mut rhs = &gs.g_chain[m] * &op.sigma_h_floor[m] * gs.g_chain[m].transpose();
            let lam_const = &op.omega[m] * op.mu_theta[m].transpose();
            let x_const = &gs.h[m] * lam_const * gs.g_chain[m].transpose();
            rhs += &x_const + x_const.transpose();
            for n in 0..mm {
                if n == m {
                    continue;
                }
                let y = &gs.h[m] * psi_inf[m][n].transpose() * gs.p_chain[m][n].transpose();
                rhs -= &y + y.transpose();
                let z =
                    &gs.g_chain[m] * gamma_inf[m][n].transpose() * gs.p_chain[m][n].transpose();
                rhs -= &z + z.transpose();
                rhs += &gs.p_chain[m][n] * &sigma_a[m][n] * gs.p_chain[m][n].transpose();
            }
            let solved = solve_client_equation(inputs, &gs, m, &rhs, tol * 1e-3)?;
            delta = delta.max((&solved - &sigma_theta[m]).norm());
            new_sigma_theta[m] = solved;
        }
        sigma_theta = new_sigma_theta;

        if delta < tol {
            break;
        }
        if delta > prev_delta {
            grow_streak += 1;
            if grow_streak >= 10 {
                return Err(FedgcError::NonConvergence {
                    what: "steady alternation (residual grew 10 consecutive steps)".into(),
                    iterations: outer,
                    residual: delta,
                });
            }
        } else {
            grow_streak = 0;
        }
        prev_delta = delta;
        if outer > 10_000 {
            return Err(FedgcError::NonConvergence {
                what: "steady alternation".into(),
                iterations: outer,
                residual: delta,
            });
        }
    }

    // final residuals of both steady equations at the joint solution
    let (sh, lam) = sigma_h_infinity(inputs, &op, &sigma_theta)?;
    sigma_h = sh;
    lambda = lam;
    let mut res_a = 0.0f64;
    for &(m, n) in &pairs {
        let next = propagate_sigma_a(
            &sigma_a[m][n],
            &sigma_h[m],
            &gamma_inf[m][n],
            &gs.d[m][n],
            &gs.b[m][n],
            inputs.rates.gamma,
        );
        res_a = res_a.max((next - &sigma_a[m][n]).norm());
    }
    let mut res_t = 0.0f64;
    for m in 0..mm {
        let pair_terms: Vec<(&Mat, &Mat, &Mat, &Mat)> = (0..mm)
            .filter(|&n| n != m)
            .map(|n| {
                (
                    &sigma_a[m][n],
                    &psi_inf[m][n],
                    &gamma_inf[m][n],
                    &gs.p_chain[m][n],
                )
            })
            .collect();
        let next = propagate_sigma_theta(
            &sigma_theta[m],
            &sigma_h[m],
            &lambda[m],
            &gs.h[m],
            &gs.g_chain[m],
            &pair_terms,
        );
        res_t = res_t.max((next - &sigma_theta[m]).norm());
    }

    Ok(SteadySolution {
        sigma_theta,
        sigma_a,
        sigma_h,
        lambda,
        gamma: gamma_inf,
        psi: psi_inf,
        operating_point: op,
        diagnostics: SteadyDiagnostics {
            rho_d,
            rho_h,
            neumann_terms,
            neumann_tail_bound: neumann_tail,
            outer_iterations: outer,
            residual_sigma_a: res_a,
            residual_sigma_theta: res_t,
        },
    })
}
