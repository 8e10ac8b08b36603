//! One federated client: steady-state Kalman filter on the local blocks,
//! augmented state through the learnable compensation matrix, analytic
//! gradients, and the two-learning-rate update.

use crate::error::{FedgcError, Result};
use crate::linalg::{is_finite_mat, row_kron_identity, vectorize, Mat, Vector};

/// Steady-state Kalman gain for `(A, C, Q, R)`.
///
/// Iterates the discrete Riccati recursion on the predicted covariance until
/// `||P_{k+1} - P_k||_F < 1e-12` (cap 1e5 iterations), then returns
/// `K = P C^T (C P C^T + R)^{-1}`.
pub fn kalman_gain(a: &Mat, c: &Mat, q: &Mat, r: &Mat) -> Result<Mat> {
    let p_dim = a.nrows();
    let d_dim = c.nrows();
    if a.ncols() != p_dim || c.ncols() != p_dim || q.nrows() != p_dim || r.nrows() != d_dim {
        return Err(FedgcError::dimension(
            "kalman_gain",
            format!("A {p_dim}x{p_dim}, C {d_dim}x{p_dim}"),
            format!("C {}x{}", c.nrows(), c.ncols()),
        ));
    }
    let mut p = q.clone() + Mat::identity(p_dim, p_dim);
    let mut residual = f64::INFINITY;
    for _ in 0..100_000 {
        let s = c * &p * c.transpose() + r;
        let gain_t = s.clone().lu().solve(&(c * &p * a.transpose())).ok_or_else(|| {
            FedgcError::Numerical {
                context: "kalman_gain".into(),
                message: "singular innovation covariance; R must be positive definite".into(),
            }
        })?;
        // predicted-covariance Riccati step
        let p_next = a * &p * a.transpose() - gain_t.transpose() * c * &p * a.transpose() + q;
        residual = (&p_next - &p).norm();
        p = p_next;
        if residual < 1e-12 {
            let s = c * &p * c.transpose() + r;
            let k_t = s.lu().solve(&(c * &p)).ok_or_else(|| FedgcError::Numerical {
                context: "kalman_gain".into(),
                message: "singular innovation covariance at the fixed point".into(),
            })?;
            return Ok(k_t.transpose());
        }
    }
    Err(FedgcError::NonConvergence {
        what: "Riccati recursion".into(),
        iterations: 100_000,
        residual,
    })
}

/// Client-side model state.
#[derive(Debug, Clone)]
pub struct ClientModel {
    pub id: usize,
    pub a_mm: Mat,
    pub c_mm: Mat,
    pub gain: Mat,
    pub theta: Mat,
    pub eta1: f64,
    pub eta2: f64,
    pub ridge: f64,
}

impl ClientModel {
    pub fn new(
        id: usize,
        a_mm: Mat,
        c_mm: Mat,
        gain: Mat,
        eta1: f64,
        eta2: f64,
        ridge: f64,
    ) -> Result<Self> {
        let p = a_mm.nrows();
        let d = c_mm.nrows();
        if gain.nrows() != p || gain.ncols() != d {
            return Err(FedgcError::dimension(
                "ClientModel gain",
                format!("{p}x{d}"),
                format!("{}x{}", gain.nrows(), gain.ncols()),
            ));
        }
        Ok(ClientModel {
            id,
            a_mm,
            c_mm,
            gain,
            theta: Mat::zeros(p, d),
            eta1,
            eta2,
            ridge,
        })
    }

    /// Construct with the converged Riccati gain for `(A, C, Q, R)`.
    pub fn with_riccati_gain(
        id: usize,
        a_mm: Mat,
        c_mm: Mat,
        q_mm: &Mat,
        r_mm: &Mat,
        eta1: f64,
        eta2: f64,
        ridge: f64,
    ) -> Result<Self> {
        let gain = kalman_gain(&a_mm, &c_mm, q_mm, r_mm)?;
        ClientModel::new(id, a_mm, c_mm, gain, eta1, eta2, ridge)
    }

    pub fn state_dim(&self) -> usize {
        self.a_mm.nrows()
    }

    pub fn data_dim(&self) -> usize {
        self.c_mm.nrows()
    }

    pub fn theta_vec(&self) -> Vector {
        vectorize(&self.theta)
    }

    /// Predict with `A_mm`, correct with the steady gain:
    /// `ĥ⁺ = A ĥ + K (y - C A ĥ)`.
    pub fn filter_step(&self, h_prev: &Vector, y: &Vector) -> Result<Vector> {
        if h_prev.len() != self.state_dim() || y.len() != self.data_dim() {
            return Err(FedgcError::dimension(
                "filter_step",
                format!("h {}, y {}", self.state_dim(), self.data_dim()),
                format!("h {}, y {}", h_prev.len(), y.len()),
            ));
        }
        let pred = &self.a_mm * h_prev;
        Ok(&pred + &self.gain * (y - &self.c_mm * &pred))
    }

    /// Augmented state `ĥ_a = ĥ_c + θ y`.
    pub fn augment(&self, h_c: &Vector, y: &Vector) -> Vector {
        h_c + &self.theta * y
    }

    /// Local prediction loss on the next measurement:
    /// `||y_t - C A (ĥ_c + θ y_prev)||² + ridge ||θ||_F²`.
    pub fn local_loss(&self, h_c_prev: &Vector, y_prev: &Vector, y_t: &Vector) -> f64 {
        let h_a = h_c_prev + &self.theta * y_prev;
        let resid = y_t - &self.c_mm * (&self.a_mm * h_a);
        resid.norm_squared() + self.ridge * self.theta.norm_squared()
    }

    /// Analytic gradient of the local loss with respect to θ:
    /// `-2 (C A)^T (y_t - C A [ĥ_c + θ y_prev]) y_prev^T + 2 ridge θ`.
    pub fn local_gradient(&self, h_c_prev: &Vector, y_prev: &Vector, y_t: &Vector) -> Mat {
        let ca = &self.c_mm * &self.a_mm;
        let h_a = h_c_prev + &self.theta * y_prev;
        let resid = y_t - &ca * h_a;
        ca.transpose() * resid * y_prev.transpose() * (-2.0) + &self.theta * (2.0 * self.ridge)
    }

    /// Apply the two-rate update:
    /// `θ ← θ - η1 g_local - η2 (g_down · y_prev^T)`.
    ///
    /// `g_down` is the server gradient with respect to `ĥ_a`; the chain-rule
    /// factor through θ turns it into the outer product with `y_prev`.
    pub fn apply_update(&mut self, g_local: &Mat, g_down: &Vector, y_prev: &Vector) -> Result<()> {
        if g_local.shape() != self.theta.shape() {
            return Err(FedgcError::dimension(
                "apply_update g_local",
                format!("{:?}", self.theta.shape()),
                format!("{:?}", g_local.shape()),
            ));
        }
        if g_down.len() != self.state_dim() || y_prev.len() != self.data_dim() {
            return Err(FedgcError::dimension(
                "apply_update g_down",
                self.state_dim(),
                g_down.len(),
            ));
        }
        self.theta -= g_local * self.eta1 + g_down * y_prev.transpose() * self.eta2;
        if !is_finite_mat(&self.theta) {
            return Err(FedgcError::Numerical {
                context: "apply_update".into(),
                message: "client parameter became non-finite".into(),
            });
        }
        Ok(())
    }

    /// Exact affine form of the vectorized update,
    /// `v⁺ = H v + G (y_t - C A ĥ_c) - Σ_n P̃_n a_mn`,
    /// with the gain matrices of the covariance recursions. Used to assert
    /// that training and propagation share one linearization.
    pub fn update_affine_form(
        &self,
        h_c_prev: &Vector,
        y_prev: &Vector,
        y_t: &Vector,
        coupling: &[(Mat, Vector)],
    ) -> Vector {
        let p = self.state_dim();
        let pd = p * self.data_dim();
        let ca = &self.c_mm * &self.a_mm;
        let yy = y_prev * y_prev.transpose();
        let h = Mat::identity(pd, pd) * (1.0 - 2.0 * self.eta1 * self.ridge)
            - crate::linalg::kron(&yy, &(ca.transpose() * &ca)) * (2.0 * self.eta1)
            - crate::linalg::kron(&yy, &(self.a_mm.transpose() * &self.a_mm)) * (2.0 * self.eta2);
        let g = crate::linalg::kron_vec_mat(y_prev, &ca.transpose()) * (2.0 * self.eta1);
        let p_gain = crate::linalg::kron_vec_mat(y_prev, &self.a_mm.transpose()) * (-2.0 * self.eta2);

        let mut v_next = h * self.theta_vec() + &g * (y_t - &ca * h_c_prev);
        for (a_hat, h_n) in coupling {
            let chain = row_kron_identity(h_n, p);
            v_next -= &p_gain * (chain * vectorize(a_hat));
        }
        v_next
    }
}
