//! Closed-form per-round propagation of every tracked covariance and
//! cross-covariance, driven by the same gain matrices the training loop
//! induces.
//!
//! Orientation conventions (column-stacking vec throughout):
//! `sigma_theta = Var(v)`, `sigma_a = Var(a_mn)`, `sigma_h = Var(ĥ_a)`,
//! `omega = Cov(v, y)`, `lambda = Cov(v, ĥ_a)`, `gamma = Cov(a_mn, ĥ_a)`,
//! `psi = Cov(a_mn, v)`. The server/client affine updates behind the
//! recursions are
//! `a⁺ = D a + 2γ B ĥ_a` and `v⁺ = H v + G̃ ĥ_a - Σ_n P̃_n a_mn`,
//! where `G̃ = -G C A` and `P̃_n = P (ĥ_{n,c}^T ⊗ I)` reconcile the
//! display-form gains to consistent shapes.

use crate::error::{FedgcError, Result};
use crate::linalg::{
    block_contraction, clamp_psd, col_kron_identity, kron, kron_vec_mat, row_kron_identity,
    sym_part, BlockIndex, Mat, Vector,
};
use crate::protocol::{DpDirection, DpPolicy, RoundObserver, RoundRecord};

/// Eigenvalue floor for PSD maintenance. The divergence budget is the
/// larger of an absolute 1e-6 and a quarter of the incoming trace: clamps
/// within it are transient surrogate inconsistency (violent prior decay
/// outpacing the tracked cross-covariances), beyond it genuine divergence.
const PSD_EIG_TOL: f64 = 1e-9;
const PSD_TRACE_BUDGET: f64 = 1e-6;

fn psd_budget(m: &Mat) -> f64 {
    PSD_TRACE_BUDGET.max(0.25 * m.trace().abs())
}

/// Per-round deterministic gain matrices.
#[derive(Debug, Clone)]
pub struct GainSet {
    /// per pair (m,n): `((1-2γλ_s) I - 2γ ĥ_n ĥ_n^T) ⊗ I_{p_m}`
    pub d: Vec<Vec<Mat>>,
    /// per pair (m,n): `ĥ_n ⊗ A_mm`
    pub b: Vec<Vec<Mat>>,
    /// per client: display-form H_m (with ridge shrink folded in)
    pub h: Vec<Mat>,
    /// per client: display-form `G_m = 2η1 (y ⊗ (C A)^T)`, maps innovations
    pub g: Vec<Mat>,
    /// per client: display-form `P_m = -2η2 (y ⊗ A^T)`
    pub p: Vec<Mat>,
    /// per client: chain-corrected `G̃ = -G C A`, maps augmented states
    pub g_chain: Vec<Mat>,
    /// per pair (m,n): chain-corrected `P̃ = P (ĥ_n^T ⊗ I)`
    pub p_chain: Vec<Vec<Mat>>,
}

#[derive(Debug, Clone, Copy)]
pub struct Rates {
    pub gamma: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub lambda_s: f64,
    pub lambda_c: f64,
}

/// Literal evaluation of every gain on the round's `(y_m, ĥ_{n,c})`.
/// Ridge coefficients fold in as uniform shrink factors.
///
/// `obs_pred[m]` is the one-step data-prediction map (`C_mm A_mm` for the
/// linear model; the Jacobian composition in the nonlinear extension).
pub fn gains(
    idx: &BlockIndex,
    a_diag: &[Mat],
    obs_pred: &[Mat],
    y: &[Vector],
    h_c: &[Vector],
    rates: &Rates,
) -> GainSet {
    let mm = idx.clients();
    let mut d = vec![vec![Mat::zeros(0, 0); mm]; mm];
    let mut b = vec![vec![Mat::zeros(0, 0); mm]; mm];
    let mut p_chain = vec![vec![Mat::zeros(0, 0); mm]; mm];
    let mut h = Vec::with_capacity(mm);
    let mut g = Vec::with_capacity(mm);
    let mut p = Vec::with_capacity(mm);
    let mut g_chain = Vec::with_capacity(mm);

    for m in 0..mm {
        let p_m = idx.state_dim(m);
        let d_m = idx.data_dim(m);
        let pd = p_m * d_m;
        let ca = &obs_pred[m];
        let yy = &y[m] * y[m].transpose();
        let h_m = Mat::identity(pd, pd) * (1.0 - 2.0 * rates.eta1 * rates.lambda_c)
            - kron(&yy, &(ca.transpose() * ca)) * (2.0 * rates.eta1)
            - kron(&yy, &(a_diag[m].transpose() * &a_diag[m])) * (2.0 * rates.eta2);
        let g_m = kron_vec_mat(&y[m], &ca.transpose()) * (2.0 * rates.eta1);
        let p_m_gain = kron_vec_mat(&y[m], &a_diag[m].transpose()) * (-2.0 * rates.eta2);
        g_chain.push(&g_m * ca * -1.0);
        h.push(h_m);
        g.push(g_m);
        p.push(p_m_gain);
    }

    for m in 0..mm {
        let p_m = idx.state_dim(m);
        for n in 0..mm {
            if n == m {
                continue;
            }
            let p_n = idx.state_dim(n);
            let shrink = Mat::identity(p_n, p_n) * (1.0 - 2.0 * rates.gamma * rates.lambda_s)
                - &h_c[n] * h_c[n].transpose() * (2.0 * rates.gamma);
            d[m][n] = kron(&shrink, &Mat::identity(p_m, p_m));
            b[m][n] = kron_vec_mat(&h_c[n], &a_diag[m]);
            p_chain[m][n] = &p[m] * row_kron_identity(&h_c[n], p_m);
        }
    }

    GainSet {
        d,
        b,
        h,
        g,
        p,
        g_chain,
        p_chain,
    }
}

/// `Γ⁺ = D Γ + 2γ B Σ_h`.
pub fn propagate_gamma(gamma_mn: &Mat, d: &Mat, b: &Mat, sigma_h: &Mat, rate_gamma: f64) -> Mat {
    d * gamma_mn + b * sigma_h * (2.0 * rate_gamma)
}

/// Six-term cross-covariance recursion
/// `Ψ⁺ = D Ψ H^T + D Γ G̃^T - D Σ_A P̃^T + 2γ B Λ^T H^T + 2γ B Σ_h G̃^T - 2γ B Γ^T P̃^T`.
#[allow(clippy::too_many_arguments)]
pub fn propagate_psi(
    psi: &Mat,
    gamma_mn: &Mat,
    sigma_a: &Mat,
    lambda: &Mat,
    sigma_h: &Mat,
    d: &Mat,
    b: &Mat,
    h: &Mat,
    g_chain: &Mat,
    p_chain: &Mat,
    rate_gamma: f64,
) -> Result<Mat> {
    let expect = (psi.nrows(), psi.ncols());
    let out = d * psi * h.transpose()
        + d * gamma_mn * g_chain.transpose()
        - d * sigma_a * p_chain.transpose()
        + b * lambda.transpose() * h.transpose() * (2.0 * rate_gamma)
        + b * sigma_h * g_chain.transpose() * (2.0 * rate_gamma)
        - b * gamma_mn.transpose() * p_chain.transpose() * (2.0 * rate_gamma);
    if (out.nrows(), out.ncols()) != expect {
        return Err(FedgcError::dimension(
            "propagate_psi (check chain-correction settings)",
            format!("{}x{}", expect.0, expect.1),
            format!("{}x{}", out.nrows(), out.ncols()),
        ));
    }
    Ok(out)
}

/// Moment-form parameter-state cross covariance
/// `Λ = Σ_θ (μ_y ⊗ I_p) + Ω μ_θ^T` (scalar display: `Σ_θ μ_y + Ω μ_v`).
pub fn lambda_closed_form(
    sigma_theta: &Mat,
    omega: &Mat,
    mu_y: &Vector,
    mu_theta: &Mat,
    p: usize,
) -> Mat {
    sigma_theta * col_kron_identity(mu_y, p) + omega * mu_theta.transpose()
}

/// Exact Gaussian evaluation of `Var(ĥ_a) = Var((y^T ⊗ I) v)`:
/// the y⟂v part is the block contraction with weight `E[y y^T]`, plus the
/// Isserlis terms generated by `Ω` and the mean parameter.
pub fn sigma_h_exact(
    sigma_theta: &Mat,
    omega: &Mat,
    mu_y: &Vector,
    sigma_y: &Mat,
    mu_theta: &Mat,
    p: usize,
) -> Result<Mat> {
    let d = mu_y.len();
    let weight = sigma_y + mu_y * mu_y.transpose();
    let mut out = block_contraction(&weight, sigma_theta, p)?;

    // mean-parameter term  μ_θ Σ_y μ_θ^T
    out += mu_theta * sigma_y * mu_theta.transpose();

    // first-order Ω cross terms  (μ_y^T ⊗ I) Ω μ_θ^T + transpose
    let w = row_kron_identity(mu_y, p) * omega;
    let cross = &w * mu_theta.transpose();
    out += &cross + cross.transpose();

    // second-order Ω pairing  Σ_{ij} Ω^{[i]}_j (Ω^{[j]}_i)^T
    for i in 0..d {
        for j in 0..d {
            let oi_j = omega.view((i * p, j), (p, 1));
            let oj_i = omega.view((j * p, i), (p, 1));
            out += oi_j * oj_i.transpose();
        }
    }
    Ok(sym_part(&out))
}

/// Steady-convention client-state variance: the limit-form
/// `Σ_h = κ Σ_θ + Ω∞-terms` with `Ω∞ = Σ_θ μ_y` collapses to a single block
/// contraction with weight `Σ_y + 3 μ μ^T` (scalar check: `(κ + 2μ²) Σ_θ`).
pub fn sigma_h_steady(sigma_theta: &Mat, mu_y: &Vector, sigma_y: &Mat, p: usize) -> Result<Mat> {
    let weight = sigma_y + mu_y * mu_y.transpose() * 3.0;
    Ok(sym_part(&block_contraction(&weight, sigma_theta, p)?))
}

/// Server-to-client gradient variance (Lemma form, constants absorbed into
/// the learning rates): `Var(ĝ) = A^T U A` with
/// `U = A Σ_h A^T + Σ_n (ĥ_n^T ⊗ I) Σ_A (ĥ_n ⊗ I) - Σ_n sym(A Γ^T (ĥ_n ⊗ I))·2`.
pub fn var_server_gradient(
    a_mm: &Mat,
    sigma_h: &Mat,
    sigma_a_row: &[(&Mat, &Vector, &Mat)],
) -> Mat {
    let p = a_mm.nrows();
    let mut u = a_mm * sigma_h * a_mm.transpose();
    for (sigma_a, h_n, gamma_mn) in sigma_a_row {
        let sel = row_kron_identity(h_n, p);
        u += &sel * *sigma_a * sel.transpose();
        let cross = a_mm * gamma_mn.transpose() * sel.transpose();
        u -= &cross + cross.transpose();
    }
    sym_part(&(a_mm.transpose() * u * a_mm))
}

/// `Σ_A⁺ = D Σ_A D^T + 4γ² B Σ_h B^T + 2γ (D Γ B^T + B Γ^T D^T)`.
pub fn propagate_sigma_a(
    sigma_a: &Mat,
    sigma_h: &Mat,
    gamma_mn: &Mat,
    d: &Mat,
    b: &Mat,
    rate_gamma: f64,
) -> Mat {
    let cross = d * gamma_mn * b.transpose();
    d * sigma_a * d.transpose()
        + b * sigma_h * b.transpose() * (4.0 * rate_gamma * rate_gamma)
        + (&cross + cross.transpose()) * (2.0 * rate_gamma)
}

/// Client-parameter covariance recursion with the chain-corrected gains:
/// `Σ_θ⁺ = H Σ_θ H^T + G̃ Σ_h G̃^T + (X + X^T) - Σ(Y + Y^T) - Σ(Z + Z^T)
///          + Σ P̃ Σ_A P̃^T`,
/// `X = H Λ G̃^T`, `Y = H Ψ^T P̃^T`, `Z = G̃ Γ^T P̃^T`.
#[allow(clippy::too_many_arguments)]
pub fn propagate_sigma_theta(
    sigma_theta: &Mat,
    sigma_h: &Mat,
    lambda: &Mat,
    h: &Mat,
    g_chain: &Mat,
    pair_terms: &[(&Mat, &Mat, &Mat, &Mat)],
) -> Mat {
    let mut out = h * sigma_theta * h.transpose() + g_chain * sigma_h * g_chain.transpose();
    let x = h * lambda * g_chain.transpose();
    out += &x + x.transpose();
    for (sigma_a, psi, gamma_mn, p_chain) in pair_terms {
        let y = h * psi.transpose() * p_chain.transpose();
        out -= &y + y.transpose();
        let z = g_chain * gamma_mn.transpose() * p_chain.transpose();
        out -= &z + z.transpose();
        out += *p_chain * *sigma_a * p_chain.transpose();
    }
    out
}

/// Proof-form data/parameter cross covariance `Ω = 𝔅 Σ_y 𝔇^T`, rebuilt per
/// round from the mean path (`θ̄`, `Ā`): 𝔅 linearizes the parameter update
/// in `y^{t-1}` and `𝔇 = C A θ̄` is the model-feedback data map.
pub struct OmegaProofInputs<'a> {
    pub a_mm: &'a Mat,
    /// one-step data-prediction map (`C_mm A_mm` in the linear model)
    pub obs_pred: &'a Mat,
    pub theta_bar: &'a Mat,
    /// Σ_{n≠m} Ā_mn ĥ_{n,c}
    pub coupling_mean: Vector,
    pub mu_y: &'a Vector,
    pub sigma_y: &'a Mat,
}

pub fn omega_proof_affine(inp: &OmegaProofInputs<'_>, rates: &Rates) -> Mat {
    let p = inp.a_mm.nrows();
    let d = inp.mu_y.len();
    let ca = inp.obs_pred;
    let quad = (ca.transpose() * ca) * (2.0 * rates.eta1)
        + (inp.a_mm.transpose() * inp.a_mm) * (2.0 * rates.eta2);
    let b1 = -(&quad * inp.theta_bar) * inp.mu_y; // p-vector
    let b2 = inp.a_mm.transpose() * &inp.coupling_mean * (2.0 * rates.eta2);
    let coeff = b1 + b2;
    let bfrak = kron(&Mat::identity(d, d), &Mat::from_column_slice(p, 1, coeff.as_slice()));
    let dmap = ca * inp.theta_bar; // d x d
    bfrak * inp.sigma_y * dmap.transpose()
}

/// Recursive tracking `Ω⁺ = H Ω 𝔇_data^T + G Σ_y`, with `𝔇_data` the data
/// lag-1 regression map of the generator.
pub fn omega_recursive_step(
    omega: &Mat,
    h: &Mat,
    g: &Mat,
    data_lag: &Mat,
    sigma_y: &Mat,
) -> Mat {
    h * omega * data_lag.transpose() + g * sigma_y
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OmegaMode {
    /// Recompute per round from the Prop-form affine coefficients.
    ProofAffine,
    /// Propagate recursively through the update's innovation channel.
    Recursive,
    /// Steady convention: Ω folds into the steady-form Σ_h weight.
    Steady,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SigmaHMode {
    TransientExact,
    SteadyConvention,
}

/// The full covariance bundle at one round.
#[derive(Debug, Clone)]
pub struct UncertaintyState {
    pub sigma_theta: Vec<Mat>,
    pub sigma_a: Vec<Vec<Mat>>,
    pub sigma_h: Vec<Mat>,
    pub omega: Vec<Mat>,
    pub lambda: Vec<Mat>,
    pub gamma: Vec<Vec<Mat>>,
    pub psi: Vec<Vec<Mat>>,
    pub var_g: Vec<Mat>,
}

impl UncertaintyState {
    /// Zero cross-covariances with diagonal priors on the variance blocks.
    pub fn from_priors(idx: &BlockIndex, prior_sigma_theta: f64, prior_sigma_a: f64) -> Self {
        let mm = idx.clients();
        let sigma_theta = (0..mm)
            .map(|m| Mat::identity(idx.state_dim(m) * idx.data_dim(m), idx.state_dim(m) * idx.data_dim(m)) * prior_sigma_theta)
            .collect();
        let mut sigma_a = vec![vec![Mat::zeros(0, 0); mm]; mm];
        let mut gamma = vec![vec![Mat::zeros(0, 0); mm]; mm];
        let mut psi = vec![vec![Mat::zeros(0, 0); mm]; mm];
        for m in 0..mm {
            for n in 0..mm {
                if m == n {
                    continue;
                }
                let pp = idx.state_dim(m) * idx.state_dim(n);
                sigma_a[m][n] = Mat::identity(pp, pp) * prior_sigma_a;
                gamma[m][n] = Mat::zeros(pp, idx.state_dim(m));
                psi[m][n] = Mat::zeros(pp, idx.state_dim(m) * idx.data_dim(m));
            }
        }
        UncertaintyState {
            sigma_theta,
            sigma_a,
            sigma_h: (0..mm)
                .map(|m| Mat::zeros(idx.state_dim(m), idx.state_dim(m)))
                .collect(),
            omega: (0..mm)
                .map(|m| Mat::zeros(idx.state_dim(m) * idx.data_dim(m), idx.data_dim(m)))
                .collect(),
            lambda: (0..mm)
                .map(|m| Mat::zeros(idx.state_dim(m) * idx.data_dim(m), idx.state_dim(m)))
                .collect(),
            gamma,
            psi,
            var_g: (0..mm)
                .map(|m| Mat::zeros(idx.state_dim(m), idx.state_dim(m)))
                .collect(),
        }
    }
}

/// One round of the reference (mean) path that drives the engine.
#[derive(Debug, Clone)]
pub struct ReferenceRound {
    pub y: Vec<Vector>,
    pub h_c: Vec<Vector>,
    pub h_a: Vec<Vector>,
    pub theta: Vec<Mat>,
    pub a_hat: Vec<Vec<Mat>>,
    /// Nonlinear override: per-round data-prediction Jacobians.
    pub obs_pred: Option<Vec<Mat>>,
    /// Nonlinear override: the EKF posterior standing in for `Σ_h`.
    pub sigma_h_override: Option<Vec<Mat>>,
}

impl ReferenceRound {
    pub fn linear(
        y: Vec<Vector>,
        h_c: Vec<Vector>,
        h_a: Vec<Vector>,
        theta: Vec<Mat>,
        a_hat: Vec<Vec<Mat>>,
    ) -> Self {
        ReferenceRound {
            y,
            h_c,
            h_a,
            theta,
            a_hat,
            obs_pred: None,
            sigma_h_override: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReferencePath {
    pub rounds: Vec<ReferenceRound>,
}

impl ReferencePath {
    /// A constant synthetic drive (used by the scalar-exactness harness and
    /// the limiting-gain mode).
    pub fn constant(round: ReferenceRound, len: usize) -> Self {
        ReferencePath {
            rounds: vec![round; len],
        }
    }
}

/// Observer that records the mean path of a noise-free protocol run.
pub struct ReferenceRecorder {
    pub path: ReferencePath,
}

impl ReferenceRecorder {
    pub fn new() -> Self {
        ReferenceRecorder {
            path: ReferencePath { rounds: Vec::new() },
        }
    }
}

impl Default for ReferenceRecorder {
    fn default() -> Self {
        Self::new()
    }
}

impl RoundObserver for ReferenceRecorder {
    fn observe(&mut self, rec: &RoundRecord<'_>) {
        let mm = rec.clients.len();
        let mut a_hat = vec![vec![Mat::zeros(0, 0); mm]; mm];
        for m in 0..mm {
            for n in 0..mm {
                if m != n {
                    a_hat[m][n] = rec.server.block(m, n).clone();
                }
            }
        }
        self.path.rounds.push(ReferenceRound::linear(
            rec.y.to_vec(),
            rec.h_c.to_vec(),
            rec.h_a.to_vec(),
            rec.clients.iter().map(|c| c.theta.clone()).collect(),
            a_hat,
        ));
    }
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub rates: Rates,
    pub omega_mode: OmegaMode,
    pub sigma_h_mode: SigmaHMode,
    pub dp: DpPolicy,
    /// Track the mean parameter path (θ̄ from the reference run) inside the
    /// moment-form evaluations. Off reproduces the display forms exactly.
    pub use_mean_path: bool,
}

/// Per-round scalar traces for logging and CSV export.
#[derive(Debug, Clone)]
pub struct EngineTraceRow {
    pub round: usize,
    pub tr_sigma_a: Vec<f64>,
    pub tr_sigma_theta: Vec<f64>,
    pub tr_sigma_h: Vec<f64>,
    pub tr_var_g: Vec<f64>,
    pub fro_gamma: Vec<f64>,
    pub fro_psi: Vec<f64>,
    pub fro_lambda: Vec<f64>,
    pub fro_omega: Vec<f64>,
    /// per-client `||Δĥ_a||` along the reference path (assumption diagnostic)
    pub delta_h_a: Vec<f64>,
}

pub struct CovarianceEngine {
    pub idx: BlockIndex,
    pub a_diag: Vec<Mat>,
    /// default one-step data-prediction maps `C_mm A_mm`
    pub obs_pred: Vec<Mat>,
    pub cfg: EngineConfig,
    /// stationary data covariance per client
    pub sigma_y: Vec<Mat>,
    /// data lag-1 regression map per client (recursive Ω mode)
    pub data_lag: Vec<Mat>,
    pub state: UncertaintyState,
    round: usize,
}

impl CovarianceEngine {
    pub fn new(
        idx: BlockIndex,
        a_diag: Vec<Mat>,
        c_diag: Vec<Mat>,
        sigma_y: Vec<Mat>,
        data_lag: Vec<Mat>,
        cfg: EngineConfig,
        prior_sigma_theta: f64,
        prior_sigma_a: f64,
    ) -> Self {
        let state = UncertaintyState::from_priors(&idx, prior_sigma_theta, prior_sigma_a);
        let obs_pred = c_diag
            .iter()
            .zip(a_diag.iter())
            .map(|(c, a)| c * a)
            .collect();
        CovarianceEngine {
            idx,
            a_diag,
            obs_pred,
            cfg,
            sigma_y,
            data_lag,
            state,
            round: 0,
        }
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
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

    fn mu_theta(&self, reference: &ReferenceRound, m: usize) -> Mat {
        if self.cfg.use_mean_path {
            reference.theta[m].clone()
        } else {
            Mat::zeros(self.idx.state_dim(m), self.idx.data_dim(m))
        }
    }

    /// State-variance moment evaluations (Σ_h, Λ) of the current recursion
    /// state at the given reference round.
    pub fn refresh_state_moments(&mut self, reference: &ReferenceRound) -> Result<()> {
        let mm = self.idx.clients();
        for m in 0..mm {
            let p = self.idx.state_dim(m);
            let mu_theta = self.mu_theta(reference, m);
            let mu_y = &reference.y[m];
            self.state.sigma_h[m] = if let Some(over) = &reference.sigma_h_override {
                over[m].clone()
            } else {
                match self.cfg.sigma_h_mode {
                    SigmaHMode::TransientExact => sigma_h_exact(
                        &self.state.sigma_theta[m],
                        &self.state.omega[m],
                        mu_y,
                        &self.sigma_y[m],
                        &mu_theta,
                        p,
                    )?,
                    SigmaHMode::SteadyConvention => {
                        sigma_h_steady(&self.state.sigma_theta[m], mu_y, &self.sigma_y[m], p)?
                    }
                }
            };
            self.state.lambda[m] = lambda_closed_form(
                &self.state.sigma_theta[m],
                &self.state.omega[m],
                mu_y,
                &mu_theta,
                p,
            );
        }
        Ok(())
    }

    /// Variance of the gradient the server transmits this round, evaluated
    /// from the current (pre-update) state.
    fn compute_var_g(&self, reference: &ReferenceRound) -> Vec<Mat> {
        let mm = self.idx.clients();
        (0..mm)
            .map(|m| {
                let row: Vec<(&Mat, &Vector, &Mat)> = (0..mm)
                    .filter(|&n| n != m)
                    .map(|n| {
                        (
                            &self.state.sigma_a[m][n],
                            &reference.h_c[n],
                            &self.state.gamma[m][n],
                        )
                    })
                    .collect();
                let mut vg = var_server_gradient(&self.a_diag[m], &self.state.sigma_h[m], &row);
                if self.dp_up_sigma() > 0.0 {
                    let ata = self.a_diag[m].transpose() * &self.a_diag[m];
                    vg += &ata * &ata * (2.0 * self.dp_up_sigma().powi(2));
                }
                vg
            })
            .collect()
    }

    fn dp_up_sigma(&self) -> f64 {
        match self.cfg.dp.direction {
            DpDirection::Up | DpDirection::Both => self.cfg.dp.sigma,
            _ => 0.0,
        }
    }

    fn dp_down_sigma(&self) -> f64 {
        match self.cfg.dp.direction {
            DpDirection::Down | DpDirection::Both => self.cfg.dp.sigma,
            _ => 0.0,
        }
    }

    /// Advance one round: gains on `prev`, recursions from the current state.
    ///
    /// Expects `refresh_state_moments(prev)` to already hold (as `run`
    /// maintains); `var_g` is set to the variance of the gradient transmitted
    /// this round before the state advances.
    pub fn step(&mut self, prev: &ReferenceRound, now: &ReferenceRound) -> Result<()> {
        self.state.var_g = self.compute_var_g(prev);
        let mm = self.idx.clients();
        let rates = self.cfg.rates;
        let obs = prev.obs_pred.as_ref().unwrap_or(&self.obs_pred);
        let gs = gains(&self.idx, &self.a_diag, obs, &prev.y, &prev.h_c, &rates);

        let s = &self.state;
        let sig_up = self.dp_up_sigma();
        let sig_down = self.dp_down_sigma();

        // server-side recursions per pair
        let mut new_sigma_a = s.sigma_a.clone();
        let mut new_gamma = s.gamma.clone();
        let mut new_psi = s.psi.clone();
        for m in 0..mm {
            for n in 0..mm {
                if m == n {
                    continue;
                }
                let d = &gs.d[m][n];
                let b = &gs.b[m][n];
                let mut sa = propagate_sigma_a(
                    &s.sigma_a[m][n],
                    &s.sigma_h[m],
                    &s.gamma[m][n],
                    d,
                    b,
                    rates.gamma,
                );
                if sig_up > 0.0 {
                    sa += b * b.transpose() * (8.0 * rates.gamma.powi(2) * sig_up.powi(2));
                }
                let budget = psd_budget(&sa);
                new_sigma_a[m][n] = clamp_psd(&sa, PSD_EIG_TOL, budget, "sigma_a")?;
                new_gamma[m][n] =
                    propagate_gamma(&s.gamma[m][n], d, b, &s.sigma_h[m], rates.gamma);
                let mut psi = propagate_psi(
                    &s.psi[m][n],
                    &s.gamma[m][n],
                    &s.sigma_a[m][n],
                    &s.lambda[m],
                    &s.sigma_h[m],
                    d,
                    b,
                    &gs.h[m],
                    &gs.g_chain[m],
                    &gs.p_chain[m][n],
                    rates.gamma,
                )?;
                if sig_up > 0.0 {
                    // shared DP noise between the server block update and the
                    // transmitted gradient couples a⁺ and v⁺
                    let ata = self.a_diag[m].transpose() * &self.a_diag[m];
                    let p_m = self.idx.state_dim(m);
                    psi -= b * &ata
                        * row_kron_identity(&prev.y[m], p_m)
                        * (8.0 * rates.gamma * rates.eta2 * sig_up.powi(2));
                }
                new_psi[m][n] = psi;
            }
        }

        // client-side recursion
        let mut new_sigma_theta = s.sigma_theta.clone();
        for m in 0..mm {
            let pair_terms: Vec<(&Mat, &Mat, &Mat, &Mat)> = (0..mm)
                .filter(|&n| n != m)
                .map(|n| {
                    (
                        &s.sigma_a[m][n],
                        &s.psi[m][n],
                        &s.gamma[m][n],
                        &gs.p_chain[m][n],
                    )
                })
                .collect();
            let mut st = propagate_sigma_theta(
                &s.sigma_theta[m],
                &s.sigma_h[m],
                &s.lambda[m],
                &gs.h[m],
                &gs.g_chain[m],
                &pair_terms,
            );
            if sig_up > 0.0 || sig_down > 0.0 {
                let ata = self.a_diag[m].transpose() * &self.a_diag[m];
                let p_m = self.idx.state_dim(m);
                let yy = &prev.y[m] * prev.y[m].transpose();
                let mut grad_noise = Mat::identity(p_m, p_m) * sig_down.powi(2);
                grad_noise += &ata * &ata * (8.0 * sig_up.powi(2));
                st += kron(&yy, &grad_noise) * rates.eta2.powi(2);
            }
            let budget = psd_budget(&st);
            new_sigma_theta[m] = clamp_psd(&st, PSD_EIG_TOL, budget, "sigma_theta")?;
        }

        // data/parameter cross covariance
        let mut new_omega = s.omega.clone();
        for m in 0..mm {
            new_omega[m] = match self.cfg.omega_mode {
                OmegaMode::Steady => Mat::zeros(
                    self.idx.state_dim(m) * self.idx.data_dim(m),
                    self.idx.data_dim(m),
                ),
                OmegaMode::Recursive => omega_recursive_step(
                    &s.omega[m],
                    &gs.h[m],
                    &gs.g[m],
                    &self.data_lag[m],
                    &self.sigma_y[m],
                ),
                OmegaMode::ProofAffine => {
                    let mut coupling = Vector::zeros(self.idx.state_dim(m));
                    for n in 0..mm {
                        if n != m {
                            coupling += &prev.a_hat[m][n] * &prev.h_c[n];
                        }
                    }
                    let inp = OmegaProofInputs {
                        a_mm: &self.a_diag[m],
                        obs_pred: &obs[m],
                        theta_bar: &self.mu_theta(prev, m),
                        coupling_mean: coupling,
                        mu_y: &prev.y[m],
                        sigma_y: &self.sigma_y[m],
                    };
                    omega_proof_affine(&inp, &rates)
                }
            };
        }

        self.state.sigma_a = new_sigma_a;
        self.state.gamma = new_gamma;
        self.state.psi = new_psi;
        self.state.sigma_theta = new_sigma_theta;
        self.state.omega = new_omega;
        self.round += 1;
        // moments of the new state at the new reference point
        self.refresh_state_moments(now)?;
        Ok(())
    }

    /// Drive the engine along a reference path, collecting traces at the
    /// given stride.
    pub fn run(&mut self, path: &ReferencePath, stride: usize) -> Result<Vec<EngineTraceRow>> {
        let mut rows = Vec::new();
        if path.rounds.is_empty() {
            return Ok(rows);
        }
        self.refresh_state_moments(&path.rounds[0])?;
        self.state.var_g = self.compute_var_g(&path.rounds[0]);
        for t in 1..path.rounds.len() {
            let (prev, now) = (&path.rounds[t - 1], &path.rounds[t]);
            self.step(prev, now)?;
            if t % stride == 0 || t + 1 == path.rounds.len() {
                rows.push(self.trace_row(t, prev, now));
            }
        }
        Ok(rows)
    }

    pub fn trace_row(
        &self,
        round: usize,
        prev: &ReferenceRound,
        now: &ReferenceRound,
    ) -> EngineTraceRow {
        let pairs = self.pairs();
        EngineTraceRow {
            round,
            tr_sigma_a: pairs
                .iter()
                .map(|&(m, n)| self.state.sigma_a[m][n].trace())
                .collect(),
            tr_sigma_theta: self.state.sigma_theta.iter().map(Mat::trace).collect(),
            tr_sigma_h: self.state.sigma_h.iter().map(Mat::trace).collect(),
            tr_var_g: self.state.var_g.iter().map(Mat::trace).collect(),
            fro_gamma: pairs
                .iter()
                .map(|&(m, n)| self.state.gamma[m][n].norm())
                .collect(),
            fro_psi: pairs
                .iter()
                .map(|&(m, n)| self.state.psi[m][n].norm())
                .collect(),
            fro_lambda: self.state.lambda.iter().map(Mat::norm).collect(),
            fro_omega: self.state.omega.iter().map(Mat::norm).collect(),
            delta_h_a: now
                .h_a
                .iter()
                .zip(prev.h_a.iter())
                .map(|(a, b)| (a - b).norm())
                .collect(),
        }
    }
}

/// Engine trace CSV: tr_sigma_A_{m}_{n}, tr_sigma_theta_{m}, tr_sigma_h_{m},
/// tr_var_g_{m}, plus cross-covariance Frobenius norms (1-based labels).
pub fn engine_csv(pairs: &[(usize, usize)], clients: usize, rows: &[EngineTraceRow]) -> String {
    let mut out = String::from("round");
    for (m, n) in pairs {
        out.push_str(&format!(",tr_sigma_A_{}_{}", m + 1, n + 1));
    }
    for m in 1..=clients {
        out.push_str(&format!(",tr_sigma_theta_{m}"));
    }
    for m in 1..=clients {
        out.push_str(&format!(",tr_sigma_h_{m}"));
    }
    for m in 1..=clients {
        out.push_str(&format!(",tr_var_g_{m}"));
    }
    for (m, n) in pairs {
        out.push_str(&format!(",fro_gamma_{}_{}", m + 1, n + 1));
    }
    for (m, n) in pairs {
        out.push_str(&format!(",fro_psi_{}_{}", m + 1, n + 1));
    }
    for m in 1..=clients {
        out.push_str(&format!(",fro_lambda_{m}"));
    }
    for m in 1..=clients {
        out.push_str(&format!(",fro_omega_{m}"));
    }
    for m in 1..=clients {
        out.push_str(&format!(",delta_h_a_{m}"));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&r.round.to_string());
        for v in r
            .tr_sigma_a
            .iter()
            .chain(r.tr_sigma_theta.iter())
            .chain(r.tr_sigma_h.iter())
            .chain(r.tr_var_g.iter())
            .chain(r.fro_gamma.iter())
            .chain(r.fro_psi.iter())
            .chain(r.fro_lambda.iter())
            .chain(r.fro_omega.iter())
            .chain(r.delta_h_a.iter())
        {
            out.push_str(&format!(",{v:.16e}"));
        }
        out.push('\n');
    }
    out
}

/// Build a reference (mean) path by running the protocol on the noise-free
/// world from zero-mean initializations.
pub fn mean_reference_path(
    world: &crate::world::BlockLtiSystem,
    clients: &[crate::client::ClientModel],
    server: &crate::protocol::ServerModel,
    config: &crate::protocol::RunConfig,
) -> Result<ReferencePath> {
    use crate::world::BlockLtiSystem;
    let zero_q = Mat::zeros(world.state_dim(), world.state_dim());
    let zero_r = Mat::zeros(world.data_dim(), world.data_dim());
    let mean_world = BlockLtiSystem::new(
        world.a.clone(),
        world.c.clone(),
        zero_q,
        zero_r,
        world.idx.clone(),
    )?;
    let mut mean_clients = clients.to_vec();
    for c in mean_clients.iter_mut() {
        c.theta.fill(0.0);
    }
    let mut mean_server = server.clone();
    let mut recorder = ReferenceRecorder::new();
    let mut cfg = config.clone();
    cfg.dp = DpPolicy::off();
    crate::protocol::run_federated(
        &mean_world,
        &mut mean_clients,
        &mut mean_server,
        &cfg,
        &mut recorder,
    )?;
    Ok(recorder.path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::unvectorize;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut impl Rng, n: usize) -> Vector {
        Vector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn rand_mat(rng: &mut impl Rng, r: usize, c: usize) -> Mat {
        Mat::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn rand_psd(rng: &mut impl Rng, n: usize) -> Mat {
        let g = rand_mat(rng, n, n);
        &g * g.transpose() + Mat::identity(n, n) * 0.1
    }

    fn toy_gains(rng: &mut impl Rng, rates: &Rates) -> (BlockIndex, Vec<Mat>, Vec<Mat>, Vec<Vector>, Vec<Vector>, GainSet) {
        let idx = BlockIndex::new(vec![2, 2], vec![3, 3]).unwrap();
        let a_diag: Vec<Mat> = (0..2).map(|_| rand_mat(rng, 2, 2)).collect();
        let c_diag: Vec<Mat> = (0..2).map(|_| rand_mat(rng, 3, 2)).collect();
        let y: Vec<Vector> = (0..2).map(|_| rand_vec(rng, 3)).collect();
        let h_c: Vec<Vector> = (0..2).map(|_| rand_vec(rng, 2)).collect();
        let obs: Vec<Mat> = c_diag.iter().zip(a_diag.iter()).map(|(c, a)| c * a).collect();
        let gs = gains(&idx, &a_diag, &obs, &y, &h_c, rates);
        (idx, a_diag, c_diag, y, h_c, gs)
    }

    #[test]
    fn zero_rates_give_identity_gains() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rates = Rates { gamma: 0.0, eta1: 0.0, eta2: 0.0, lambda_s: 0.0, lambda_c: 0.0 };
        let (_, _, _, _, _, gs) = toy_gains(&mut rng, &rates);
        assert!((gs.d[0][1].clone() - Mat::identity(4, 4)).amax() < 1e-15);
        assert!((gs.h[0].clone() - Mat::identity(6, 6)).amax() < 1e-15);
        assert_eq!(gs.g[0].amax(), 0.0);
        assert_eq!(gs.p[0].amax(), 0.0);
    }

    #[test]
    fn scalar_d_gain_formula() {
        let idx = BlockIndex::new(vec![1, 1], vec![1, 1]).unwrap();
        let a_diag = vec![Mat::from_row_slice(1, 1, &[0.8]); 2];
        let c_diag = vec![Mat::from_row_slice(1, 1, &[-1.25]); 2];
        let y = vec![Vector::from_vec(vec![0.5]); 2];
        let h_c = vec![Vector::from_vec(vec![1.3]); 2];
        let rates = Rates { gamma: 0.05, eta1: 0.01, eta2: 0.02, lambda_s: 0.2, lambda_c: 0.0 };
        let obs: Vec<Mat> = c_diag.iter().zip(a_diag.iter()).map(|(c, a)| c * a).collect();
        let gs = gains(&idx, &a_diag, &obs, &y, &h_c, &rates);
        // oracle: differentiate the scalar update by hand
        let d_expect = 1.0 - 2.0 * 0.05 * (1.3f64 * 1.3 + 0.2);
        assert_abs_diff_eq!(gs.d[0][1][(0, 0)], d_expect, epsilon = 1e-14);
        assert_abs_diff_eq!(gs.b[0][1][(0, 0)], 1.3 * 0.8, epsilon = 1e-14);
        let h_expect = 1.0 - 2.0 * 0.01 * 0.25 * 1.0 - 2.0 * 0.02 * 0.25 * 0.64;
        assert_abs_diff_eq!(gs.h[0][(0, 0)], h_expect, epsilon = 1e-14);
    }

    #[test]
    fn h_gain_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rates = Rates { gamma: 0.1, eta1: 0.03, eta2: 0.02, lambda_s: 0.0, lambda_c: 0.0 };
        let (_, _, _, _, _, gs) = toy_gains(&mut rng, &rates);
        for h in &gs.h {
            assert!((h - h.transpose()).amax() < 1e-14);
        }
    }

    #[test]
    fn gamma_recursion_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rates = Rates { gamma: 0.05, eta1: 0.01, eta2: 0.02, lambda_s: 0.0, lambda_c: 0.0 };
        let (_, _, _, _, _, gs) = toy_gains(&mut rng, &rates);
        // zero in, zero out
        let g0 = Mat::zeros(4, 2);
        let out = propagate_gamma(&g0, &gs.d[0][1], &gs.b[0][1], &Mat::zeros(2, 2), rates.gamma);
        assert_eq!(out.amax(), 0.0);
        // gamma rate zero: constant
        let rates0 = Rates { gamma: 0.0, ..rates };
        let (_, _, _, _, _, gs0) = toy_gains(&mut rng, &rates0);
        let g1 = rand_mat(&mut rng, 4, 2);
        let out1 = propagate_gamma(&g1, &gs0.d[0][1], &gs0.b[0][1], &rand_psd(&mut rng, 2), 0.0);
        assert!((out1 - g1).amax() < 1e-14);
    }

    #[test]
    fn lambda_scalar_substitution() {
        // Σ_θ = 2, μ_y = 3, Ω = 1, μ_v = 4 -> Λ = 10
        let lam = lambda_closed_form(
            &Mat::from_row_slice(1, 1, &[2.0]),
            &Mat::from_row_slice(1, 1, &[1.0]),
            &Vector::from_vec(vec![3.0]),
            &Mat::from_row_slice(1, 1, &[4.0]),
            1,
        );
        assert_abs_diff_eq!(lam[(0, 0)], 10.0, epsilon = 1e-15);
        // zero inputs -> zero
        let z = lambda_closed_form(
            &Mat::zeros(1, 1),
            &Mat::zeros(1, 1),
            &Vector::from_vec(vec![3.0]),
            &Mat::from_row_slice(1, 1, &[4.0]),
            1,
        );
        assert_eq!(z.amax(), 0.0);
    }

    #[test]
    fn sigma_h_scalar_forms() {
        // Ω = 0, μ_θ = 0: Σ_h = κ Σ_θ
        let sh = sigma_h_exact(
            &Mat::from_row_slice(1, 1, &[2.0]),
            &Mat::zeros(1, 1),
            &Vector::from_vec(vec![3.0]),
            &Mat::from_row_slice(1, 1, &[0.5]),
            &Mat::zeros(1, 1),
            1,
        )
        .unwrap();
        assert_abs_diff_eq!(sh[(0, 0)], (0.5 + 9.0) * 2.0, epsilon = 1e-12);
        // steady form: (κ + 2μ²) Σ_θ
        let st = sigma_h_steady(
            &Mat::from_row_slice(1, 1, &[2.0]),
            &Vector::from_vec(vec![3.0]),
            &Mat::from_row_slice(1, 1, &[0.5]),
            1,
        )
        .unwrap();
        assert_abs_diff_eq!(st[(0, 0)], (0.5 + 9.0 + 18.0) * 2.0, epsilon = 1e-12);
        // zero in, zero out
        let z = sigma_h_exact(
            &Mat::zeros(1, 1),
            &Mat::zeros(1, 1),
            &Vector::from_vec(vec![3.0]),
            &Mat::from_row_slice(1, 1, &[0.5]),
            &Mat::zeros(1, 1),
            1,
        )
        .unwrap();
        assert_eq!(z.amax(), 0.0);
    }

    /// Sampling oracle: p = 2, d = 2, Ω = 0, random PSD Σ_θ; block
    /// contraction vs Monte-Carlo Var(θ y) over 2e5 samples within 2%.
    #[test]
    fn sigma_h_block_contraction_vs_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (p, d) = (2usize, 2usize);
        let sigma_theta = rand_psd(&mut rng, p * d);
        let mu_y = rand_vec(&mut rng, d);
        let sigma_y = rand_psd(&mut rng, d);
        let predicted = sigma_h_exact(
            &sigma_theta,
            &Mat::zeros(p * d, d),
            &mu_y,
            &sigma_y,
            &Mat::zeros(p, d),
            p,
        )
        .unwrap();

        let lt = sigma_theta.clone().cholesky().unwrap().l();
        let ly = sigma_y.clone().cholesky().unwrap().l();
        let n = 200_000;
        let mut mean = Vector::zeros(p);
        let mut second = Mat::zeros(p, p);
        use rand_distr::StandardNormal;
        for _ in 0..n {
            let zv = Vector::from_fn(p * d, |_, _| StandardNormal.sample(&mut rng));
            let zy = Vector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
            let v = &lt * zv;
            let y = &mu_y + &ly * zy;
            let theta = unvectorize(&v, p, d).unwrap();
            let u = theta * y;
            mean += &u;
            second += &u * u.transpose();
        }
        mean /= n as f64;
        let cov = second / n as f64 - &mean * mean.transpose();
        let rel = (cov - &predicted).norm() / predicted.norm();
        assert!(rel < 0.02, "relative error {rel}");
    }

    /// Full Isserlis form (Ω != 0, μ_θ != 0) against the same sampling oracle.
    #[test]
    fn sigma_h_and_lambda_with_omega_vs_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (p, d) = (2usize, 2usize);
        let pd = p * d;
        // joint Gaussian over (v, y) with cross-covariance Ω
        let joint = rand_psd(&mut rng, pd + d);
        let sigma_theta = joint.view((0, 0), (pd, pd)).into_owned();
        let sigma_y = joint.view((pd, pd), (d, d)).into_owned();
        let omega = joint.view((0, pd), (pd, d)).into_owned();
        let mu_v = rand_vec(&mut rng, pd);
        let mu_y = rand_vec(&mut rng, d);
        let mu_theta = unvectorize(&mu_v, p, d).unwrap();

        let predicted_h =
            sigma_h_exact(&sigma_theta, &omega, &mu_y, &sigma_y, &mu_theta, p).unwrap();
        let predicted_l = lambda_closed_form(&sigma_theta, &omega, &mu_y, &mu_theta, p);

        let l = joint.cholesky().expect("joint PSD").l();
        let n = 400_000;
        use rand_distr::StandardNormal;
        let mut mean_u = Vector::zeros(p);
        let mut mean_v = Vector::zeros(pd);
        let mut second_u = Mat::zeros(p, p);
        let mut cross_vu = Mat::zeros(pd, p);
        for _ in 0..n {
            let z = Vector::from_fn(pd + d, |_, _| StandardNormal.sample(&mut rng));
            let s = &l * z;
            let v = s.rows(0, pd).into_owned() + &mu_v;
            let y = s.rows(pd, d).into_owned() + &mu_y;
            let u = unvectorize(&v, p, d).unwrap() * y;
            mean_u += &u;
            mean_v += &v;
            second_u += &u * u.transpose();
            cross_vu += &v * u.transpose();
        }
        mean_u /= n as f64;
        mean_v /= n as f64;
        let var_u = second_u / n as f64 - &mean_u * mean_u.transpose();
        let cov_vu = cross_vu / n as f64 - &mean_v * mean_u.transpose();
        let rel_h = (var_u - &predicted_h).norm() / predicted_h.norm();
        let rel_l = (cov_vu - &predicted_l).norm() / predicted_l.norm();
        assert!(rel_h < 0.02, "sigma_h relative error {rel_h}");
        assert!(rel_l < 0.02, "lambda relative error {rel_l}");
    }

    #[test]
    fn var_g_scalar_substitution() {
        // scalar: var = a²(a² Σ_h + ĥ² Σ_A - 2 a Γ ĥ)
        let a = Mat::from_row_slice(1, 1, &[0.8]);
        let sh = Mat::from_row_slice(1, 1, &[0.3]);
        let sa = Mat::from_row_slice(1, 1, &[0.2]);
        let gm = Mat::from_row_slice(1, 1, &[0.05]);
        let h_n = Vector::from_vec(vec![1.4]);
        let got = var_server_gradient(&a, &sh, &[(&sa, &h_n, &gm)]);
        let expect = 0.64 * (0.64 * 0.3 + 1.4 * 1.4 * 0.2 - 2.0 * 0.8 * 0.05 * 1.4);
        assert_abs_diff_eq!(got[(0, 0)], expect, epsilon = 1e-14);

        // all covariances zero -> zero
        let z = var_server_gradient(
            &a,
            &Mat::zeros(1, 1),
            &[(&Mat::zeros(1, 1), &h_n, &Mat::zeros(1, 1))],
        );
        assert_eq!(z.amax(), 0.0);
    }

    #[test]
    fn sigma_a_recursion_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // γ = 0, λ_s = 0: constant
        let rates = Rates { gamma: 0.0, eta1: 0.01, eta2: 0.01, lambda_s: 0.0, lambda_c: 0.0 };
        let (_, _, _, _, _, gs) = toy_gains(&mut rng, &rates);
        let sa = rand_psd(&mut rng, 4);
        let out = propagate_sigma_a(&sa, &rand_psd(&mut rng, 2), &rand_mat(&mut rng, 4, 2), &gs.d[0][1], &gs.b[0][1], 0.0);
        assert!((out - &sa).amax() < 1e-14);

        // zero state stays zero
        let rates2 = Rates { gamma: 0.07, ..rates };
        let (_, _, _, _, _, gs2) = toy_gains(&mut rng, &rates2);
        let out2 = propagate_sigma_a(&Mat::zeros(4, 4), &Mat::zeros(2, 2), &Mat::zeros(4, 2), &gs2.d[0][1], &gs2.b[0][1], 0.07);
        assert_eq!(out2.amax(), 0.0);
    }

    #[test]
    fn sigma_theta_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // η1 = η2 = 0: H = I, G = P = 0, Σ_θ constant
        let rates = Rates { gamma: 0.05, eta1: 0.0, eta2: 0.0, lambda_s: 0.0, lambda_c: 0.0 };
        let (_, _, _, _, _, gs) = toy_gains(&mut rng, &rates);
        let st = rand_psd(&mut rng, 6);
        let sa = rand_psd(&mut rng, 4);
        let psi = rand_mat(&mut rng, 4, 6);
        let gm = rand_mat(&mut rng, 4, 2);
        let out = propagate_sigma_theta(
            &st,
            &rand_psd(&mut rng, 2),
            &rand_mat(&mut rng, 6, 2),
            &gs.h[0],
            &gs.g_chain[0],
            &[(&sa, &psi, &gm, &gs.p_chain[0][1])],
        );
        assert!((out - &st).amax() < 1e-13);

        // all uncertainty zero stays zero
        let rates2 = Rates { gamma: 0.05, eta1: 0.02, eta2: 0.03, lambda_s: 0.0, lambda_c: 0.0 };
        let (_, _, _, _, _, gs2) = toy_gains(&mut rng, &rates2);
        let z = propagate_sigma_theta(
            &Mat::zeros(6, 6),
            &Mat::zeros(2, 2),
            &Mat::zeros(6, 2),
            &gs2.h[0],
            &gs2.g_chain[0],
            &[(&Mat::zeros(4, 4), &Mat::zeros(4, 6), &Mat::zeros(4, 2), &gs2.p_chain[0][1])],
        );
        assert_eq!(z.amax(), 0.0);
    }

    #[test]
    fn omega_zero_when_data_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rates = Rates { gamma: 0.05, eta1: 0.02, eta2: 0.03, lambda_s: 0.0, lambda_c: 0.0 };
        let inp = OmegaProofInputs {
            a_mm: &Mat::from_row_slice(1, 1, &[0.8]),
            obs_pred: &(Mat::from_row_slice(1, 1, &[-1.25]) * Mat::from_row_slice(1, 1, &[0.8])),
            theta_bar: &Mat::from_row_slice(1, 1, &[0.4]),
            coupling_mean: Vector::from_vec(vec![0.3]),
            mu_y: &Vector::from_vec(vec![1.0]),
            sigma_y: &Mat::zeros(1, 1),
        };
        assert_eq!(omega_proof_affine(&inp, &rates).amax(), 0.0);

        // nonzero data variance with nonzero affine coefficients -> Ω != 0
        let inp2 = OmegaProofInputs {
            sigma_y: &Mat::from_row_slice(1, 1, &[0.5]),
            ..inp
        };
        assert!(omega_proof_affine(&inp2, &rates).amax() > 0.0);

        let _ = &mut rng;
    }

    /// Direct Monte-Carlo validation of one propagation step: sample the
    /// affine surrogate's joint Gaussian state exactly as tracked, push it
    /// through `a⁺ = D a + 2γ B ĥ_a`, `v⁺ = H v + G̃ ĥ_a - P̃ a`, and compare
    /// every output moment. This pins down all orientations and signs.
    #[test]
    fn one_step_propagation_vs_joint_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let idx = BlockIndex::new(vec![2, 2], vec![3, 3]).unwrap();
        let pd = 6;
        let pp = 4;
        let rates = Rates { gamma: 0.06, eta1: 0.04, eta2: 0.05, lambda_s: 0.1, lambda_c: 0.05 };
        let a_diag: Vec<Mat> = (0..2).map(|_| rand_mat(&mut rng, 2, 2)).collect();
        let c_diag: Vec<Mat> = (0..2).map(|_| rand_mat(&mut rng, 3, 2)).collect();
        let y: Vec<Vector> = (0..2).map(|_| rand_vec(&mut rng, 3)).collect();
        let h_c: Vec<Vector> = (0..2).map(|_| rand_vec(&mut rng, 2)).collect();
        let obs: Vec<Mat> = c_diag.iter().zip(a_diag.iter()).map(|(c, a)| c * a).collect();
        let gs = gains(&idx, &a_diag, &obs, &y, &h_c, &rates);

        // joint over (a_01 (4), v_0 (6), h_a0 (2)), PSD by construction
        let dim = pp + pd + 2;
        let joint = rand_psd(&mut rng, dim);
        let sigma_a = joint.view((0, 0), (pp, pp)).into_owned();
        let psi = joint.view((0, pp), (pp, pd)).into_owned(); // Cov(a, v)
        let gamma_mn = joint.view((0, pp + pd), (pp, 2)).into_owned(); // Cov(a, h_a)
        let sigma_theta = joint.view((pp, pp), (pd, pd)).into_owned();
        let lambda = joint.view((pp, pp + pd), (pd, 2)).into_owned(); // Cov(v, h_a)
        let sigma_h = joint.view((pp + pd, pp + pd), (2, 2)).into_owned();

        // closed-form one-step outputs
        let (m, n) = (0usize, 1usize);
        let d = &gs.d[m][n];
        let b = &gs.b[m][n];
        let sa_next = propagate_sigma_a(&sigma_a, &sigma_h, &gamma_mn, d, b, rates.gamma);
        let st_next = propagate_sigma_theta(
            &sigma_theta,
            &sigma_h,
            &lambda,
            &gs.h[m],
            &gs.g_chain[m],
            &[(&sigma_a, &psi, &gamma_mn, &gs.p_chain[m][n])],
        );
        let psi_next = propagate_psi(
            &psi, &gamma_mn, &sigma_a, &lambda, &sigma_h, d, b, &gs.h[m], &gs.g_chain[m],
            &gs.p_chain[m][n], rates.gamma,
        )
        .unwrap();
        // shifted covariances against the *old* h_a
        let gamma_shift = d * &gamma_mn + b * &sigma_h * (2.0 * rates.gamma);

        // sampling
        let l = joint.cholesky().unwrap().l();
        let nsamp = 300_000;
        use rand_distr::StandardNormal;
        let mut acc_a = Mat::zeros(pp, pp);
        let mut acc_v = Mat::zeros(pd, pd);
        let mut acc_av = Mat::zeros(pp, pd);
        let mut acc_ah = Mat::zeros(pp, 2);
        let mut mean_a = Vector::zeros(pp);
        let mut mean_v = Vector::zeros(pd);
        let mut mean_h = Vector::zeros(2);
        let mut samples = Vec::with_capacity(nsamp);
        for _ in 0..nsamp {
            let z = Vector::from_fn(dim, |_, _| StandardNormal.sample(&mut rng));
            let s = &l * z;
            let a = s.rows(0, pp).into_owned();
            let v = s.rows(pp, pd).into_owned();
            let ha = s.rows(pp + pd, 2).into_owned();
            let a_next = d * &a + b * &ha * (2.0 * rates.gamma);
            let v_next = &gs.h[m] * &v + &gs.g_chain[m] * &ha - &gs.p_chain[m][n] * &a;
            mean_a += &a_next;
            mean_v += &v_next;
            mean_h += &ha;
            samples.push((a_next, v_next, ha));
        }
        mean_a /= nsamp as f64;
        mean_v /= nsamp as f64;
        mean_h /= nsamp as f64;
        for (a, v, ha) in &samples {
            let da = a - &mean_a;
            let dv = v - &mean_v;
            let dh = ha - &mean_h;
            acc_a += &da * da.transpose();
            acc_v += &dv * dv.transpose();
            acc_av += &da * dv.transpose();
            acc_ah += &da * dh.transpose();
        }
        let scale = (nsamp - 1) as f64;
        let rel = |got: &Mat, want: &Mat| (got - want).norm() / want.norm();
        assert!(rel(&(acc_a / scale), &sa_next) < 0.02, "sigma_a step");
        assert!(rel(&(acc_v / scale), &st_next) < 0.02, "sigma_theta step");
        assert!(rel(&(acc_av / scale), &psi_next) < 0.04, "psi step");
        assert!(rel(&(acc_ah / scale), &gamma_shift) < 0.03, "shifted gamma step");
    }

    #[test]
    fn engine_runs_and_stays_psd() {
        use crate::linalg::min_symmetric_eig;
        let idx = BlockIndex::new(vec![1, 1], vec![1, 1]).unwrap();
        let a_diag = vec![Mat::from_row_slice(1, 1, &[0.8]); 2];
        let c_diag = vec![Mat::from_row_slice(1, 1, &[-1.25]); 2];
        let cfg = EngineConfig {
            rates: Rates { gamma: 0.05, eta1: 0.002, eta2: 0.01, lambda_s: 0.0, lambda_c: 0.0 },
            omega_mode: OmegaMode::Recursive,
            sigma_h_mode: SigmaHMode::TransientExact,
            dp: DpPolicy::off(),
            use_mean_path: true,
        };
        let sigma_y = vec![Mat::from_row_slice(1, 1, &[0.1]); 2];
        let lag = vec![Mat::zeros(1, 1); 2];
        let mut eng = CovarianceEngine::new(idx, a_diag, c_diag, sigma_y, lag, cfg, 0.5, 0.5);
        let round = ReferenceRound::linear(
            vec![Vector::from_vec(vec![-3.0]); 2],
            vec![Vector::from_vec(vec![0.6]); 2],
            vec![Vector::from_vec(vec![0.6]); 2],
            vec![Mat::zeros(1, 1); 2],
            vec![vec![Mat::zeros(1, 1); 2]; 2],
        );
        let path = ReferencePath::constant(round, 400);
        let rows = eng.run(&path, 10).unwrap();
        assert!(!rows.is_empty());
        for m in 0..2 {
            assert!(min_symmetric_eig(&eng.state.sigma_theta[m]) > -1e-9);
            assert!(min_symmetric_eig(&eng.state.sigma_h[m]) > -1e-9);
        }
        // variances decay from the prior toward the noise floor
        assert!(rows.last().unwrap().tr_sigma_a[0] < 0.5);
    }
}
