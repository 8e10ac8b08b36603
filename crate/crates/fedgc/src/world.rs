//! Ground-truth block LTI world: trajectory generation with optional mean
//! shifts, streaming moment estimators, and the canonical benchmark systems.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{FedgcError, Result};
use crate::linalg::{
    is_finite_mat, min_symmetric_eig, solve_discrete_lyapunov, spectral_radius, sym_part,
    BlockIndex, Mat, Vector,
};

/// Where a scheduled mean shift is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShiftTarget {
    /// Offsets add to the measurement `y` (the default; shifts are data mean
    /// shifts).
    Measurement,
    /// Exploration option: offsets add to the latent state instead.
    Latent,
}

/// A mean shift of `offset` applied from `time` onward. Multiple shifts
/// accumulate.
#[derive(Debug, Clone)]
pub struct MeanShift {
    pub time: usize,
    pub offset: Vector,
    pub target: ShiftTarget,
}

impl MeanShift {
    pub fn measurement(time: usize, offset: Vector) -> Self {
        MeanShift {
            time,
            offset,
            target: ShiftTarget::Measurement,
        }
    }
}

/// Block-structured LTI ground truth.
///
/// `C` must have exactly block-diagonal support; `Q`, `R` must be symmetric
/// PSD. The spectral radius of `A` is recorded at construction.
#[derive(Debug, Clone)]
pub struct BlockLtiSystem {
    pub a: Mat,
    pub c: Mat,
    pub q: Mat,
    pub r: Mat,
    pub idx: BlockIndex,
    pub rho_a: f64,
    pub stable: bool,
    chol_q: Mat,
    chol_r: Mat,
}

const PSD_TOL: f64 = 1e-10;

/// Square root factor for sampling from a PSD covariance. Eigenvalues are
/// clamped at zero so degenerate (rank-deficient) noise like Q = 0 works.
fn sampling_factor(m: &Mat) -> Mat {
    let eig = sym_part(m).symmetric_eigen();
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        *v = v.max(0.0).sqrt();
    }
    &eig.eigenvectors * Mat::from_diagonal(&vals)
}

impl BlockLtiSystem {
    pub fn new(a: Mat, c: Mat, q: Mat, r: Mat, idx: BlockIndex) -> Result<Self> {
        let p = idx.total_state();
        let d = idx.total_data();
        if a.nrows() != p || a.ncols() != p {
            return Err(FedgcError::dimension("BlockLtiSystem A", format!("{p}x{p}"), format!("{}x{}", a.nrows(), a.ncols())));
        }
        if c.nrows() != d || c.ncols() != p {
            return Err(FedgcError::dimension("BlockLtiSystem C", format!("{d}x{p}"), format!("{}x{}", c.nrows(), c.ncols())));
        }
        for m in [&a, &c, &q, &r] {
            if !is_finite_mat(m) {
                return Err(FedgcError::Numerical {
                    context: "BlockLtiSystem".into(),
                    message: "non-finite entry in system matrix".into(),
                });
            }
        }
        // C support must be block-diagonal
        for i in 0..idx.clients() {
            for j in 0..idx.clients() {
                if i != j {
                    let blk = idx.obs_block(&c, i, j)?;
                    if blk.amax() != 0.0 {
                        return Err(FedgcError::Config(format!(
                            "observation matrix has support in off-diagonal block ({i},{j})"
                        )));
                    }
                }
            }
        }
        let min_q = min_symmetric_eig(&q);
        if min_q < -PSD_TOL {
            return Err(FedgcError::NotPsd { context: "process noise Q".into(), min_eig: min_q });
        }
        let min_r = min_symmetric_eig(&r);
        if min_r < -PSD_TOL {
            return Err(FedgcError::NotPsd { context: "measurement noise R".into(), min_eig: min_r });
        }
        let rho_a = spectral_radius(&a)?;
        let chol_q = sampling_factor(&q);
        let chol_r = sampling_factor(&r);
        Ok(BlockLtiSystem {
            a,
            c,
            q,
            r,
            idx,
            rho_a,
            stable: rho_a < 1.0,
            chol_q,
            chol_r,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.idx.total_state()
    }

    pub fn data_dim(&self) -> usize {
        self.idx.total_data()
    }

    pub fn a_block(&self, m: usize, n: usize) -> Mat {
        self.idx.state_block(&self.a, m, n).expect("valid block")
    }

    pub fn c_block(&self, m: usize) -> Mat {
        self.idx.obs_block(&self.c, m, m).expect("valid block")
    }

    pub fn q_block(&self, m: usize) -> Mat {
        self.idx.state_block(&self.q, m, m).expect("valid block")
    }

    pub fn r_block(&self, m: usize) -> Mat {
        self.idx.data_block(&self.r, m, m).expect("valid block")
    }

    /// Generate a trajectory of horizon `T` (states h^0..h^T, data y^0..y^T).
    ///
    /// Deterministic under a fixed seed. `h0` defaults to zero.
    pub fn simulate(
        &self,
        horizon: usize,
        seed: u64,
        shifts: &[MeanShift],
        h0: Option<&Vector>,
    ) -> Result<Trajectory> {
        let p = self.state_dim();
        let d = self.data_dim();
        for s in shifts {
            let want = match s.target {
                ShiftTarget::Measurement => d,
                ShiftTarget::Latent => p,
            };
            if s.offset.len() != want {
                return Err(FedgcError::dimension("mean shift offset", want, s.offset.len()));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |factor: &Mat, dim: usize| -> Vector {
            let z = Vector::from_fn(dim, |_, _| StandardNormal.sample(&mut rng));
            factor * z
        };

        let mut h = match h0 {
            Some(v) => {
                if v.len() != p {
                    return Err(FedgcError::dimension("initial state", p, v.len()));
                }
                v.clone()
            }
            None => Vector::zeros(p),
        };
        let mut states = Vec::with_capacity(horizon + 1);
        let mut data = Vec::with_capacity(horizon + 1);

        let apply_shifts = |t: usize, y: &mut Vector, h: &mut Vector| {
            for s in shifts {
                if t >= s.time {
                    match s.target {
                        ShiftTarget::Measurement => *y += &s.offset,
                        ShiftTarget::Latent => *h += &s.offset,
                    }
                }
            }
        };

        // t = 0 sample
        {
            let mut y = &self.c * &h + draw(&self.chol_r, d);
            let mut h_dummy = Vector::zeros(0);
            // latent shifts at t=0 apply before measuring
            let mut h_shifted = h.clone();
            apply_shifts(0, &mut y, &mut h_shifted);
            if shifts.iter().any(|s| s.target == ShiftTarget::Latent && s.time == 0) {
                h = h_shifted.clone();
                y = &self.c * &h + (&y - &self.c * &h_shifted); // keep noise draw
            }
            let _ = &mut h_dummy;
            states.push(h.clone());
            data.push(y);
        }

        for t in 1..=horizon {
            h = &self.a * &h + draw(&self.chol_q, p);
            for s in shifts {
                if s.target == ShiftTarget::Latent && t >= s.time {
                    h += &s.offset;
                }
            }
            let mut y = &self.c * &h + draw(&self.chol_r, d);
            for s in shifts {
                if s.target == ShiftTarget::Measurement && t >= s.time {
                    y += &s.offset;
                }
            }
            states.push(h.clone());
            data.push(y);
        }

        Ok(Trajectory {
            states,
            data,
            seed,
        })
    }

    /// Noise-free mean path under the same shift schedule.
    pub fn mean_path(&self, horizon: usize, shifts: &[MeanShift], h0: Option<&Vector>) -> Trajectory {
        let noiseless = BlockLtiSystem {
            chol_q: Mat::zeros(self.state_dim(), self.state_dim()),
            chol_r: Mat::zeros(self.data_dim(), self.data_dim()),
            ..self.clone()
        };
        noiseless
            .simulate(horizon, 0, shifts, h0)
            .expect("mean path cannot fail after construction")
    }

    /// Ground-truth stationary moments of `y` under constant measurement
    /// shifts: latent covariance from the discrete Lyapunov equation,
    /// `μ_y` = accumulated offset, `Σ_y = C Σ_h C^T + R`, and lag-1
    /// autocovariance `Cov(y^{t+1}, y^t) = C A Σ_h C^T`.
    pub fn stationary_moments(&self, shifts: &[MeanShift]) -> Result<StationaryMoments> {
        if !self.stable {
            return Err(FedgcError::Stability {
                gain: "A".into(),
                rho: self.rho_a,
            });
        }
        let sigma_latent = solve_discrete_lyapunov(&self.a, &self.q)?;
        let mut mu_y = Vector::zeros(self.data_dim());
        for s in shifts {
            match s.target {
                ShiftTarget::Measurement => mu_y += &s.offset,
                ShiftTarget::Latent => {
                    // latent offset per step accumulates through (I - A)^{-1}
                    let n = self.state_dim();
                    let inv = (Mat::identity(n, n) - &self.a)
                        .lu()
                        .solve(&s.offset)
                        .ok_or_else(|| FedgcError::Numerical {
                            context: "stationary_moments".into(),
                            message: "I - A singular".into(),
                        })?;
                    mu_y += &self.c * inv;
                }
            }
        }
        let sigma_y = &self.c * &sigma_latent * self.c.transpose() + &self.r;
        let lag1 = &self.c * &self.a * &sigma_latent * self.c.transpose();
        Ok(StationaryMoments {
            mu_y,
            sigma_y: sym_part(&sigma_y),
            sigma_latent,
            lag1_autocov: lag1,
        })
    }
}

#[derive(Debug, Clone)]
pub struct StationaryMoments {
    pub mu_y: Vector,
    pub sigma_y: Mat,
    pub sigma_latent: Mat,
    /// `Cov(y^{t+1}, y^t)`
    pub lag1_autocov: Mat,
}

impl StationaryMoments {
    /// Lag-1 regression map `D` with `y^{t+1} ≈ D y^t`, i.e.
    /// `Cov(y^{t+1}, y^t) Σ_y^{-1}` restricted to client `m`.
    pub fn data_lag_map(&self, idx: &BlockIndex, m: usize) -> Result<Mat> {
        let lag = idx.data_block(&self.lag1_autocov, m, m)?;
        let sig = idx.data_block(&self.sigma_y, m, m)?;
        let d = sig.nrows();
        // ridge the inverse slightly so R = 0 corner cases stay finite
        let solved = (sig + Mat::identity(d, d) * 1e-12)
            .lu()
            .solve(&lag.transpose())
            .ok_or_else(|| FedgcError::Numerical {
                context: "data_lag_map".into(),
                message: "singular Σ_y block".into(),
            })?;
        Ok(solved.transpose())
    }
}

/// Simulated trajectory: latent states and measurements for t = 0..=T.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<Vector>,
    pub data: Vec<Vector>,
    pub seed: u64,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.data.len().saturating_sub(1)
    }

    /// Debug CSV with columns `t, y_1..y_d`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let d = self.data.first().map_or(0, |v| v.len());
        out.push('t');
        for j in 1..=d {
            out.push_str(&format!(",y_{j}"));
        }
        out.push('\n');
        for (t, y) in self.data.iter().enumerate() {
            out.push_str(&t.to_string());
            for v in y.iter() {
                out.push_str(&format!(",{v:.16e}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Streaming moment estimator: cumulative average or EWMA with forgetting
/// factor λ. Covariance is the second moment minus the mean outer product,
/// symmetrized.
#[derive(Debug, Clone)]
pub struct MomentEstimate {
    pub mean: Vector,
    second: Mat,
    mode: MomentMode,
    count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MomentMode {
    StationaryCumulative,
    Ewma { lambda: f64 },
}

impl MomentEstimate {
    pub fn new(dim: usize, mode: MomentMode) -> Result<Self> {
        if let MomentMode::Ewma { lambda } = mode {
            if !(lambda > 0.0 && lambda <= 1.0) {
                return Err(FedgcError::Config(format!(
                    "EWMA forgetting factor must be in (0, 1], got {lambda}"
                )));
            }
        }
        Ok(MomentEstimate {
            mean: Vector::zeros(dim),
            second: Mat::zeros(dim, dim),
            mode,
            count: 0,
        })
    }

    pub fn update(&mut self, sample: &Vector) -> Result<()> {
        if sample.len() != self.mean.len() {
            return Err(FedgcError::dimension("update_moments", self.mean.len(), sample.len()));
        }
        let outer = sample * sample.transpose();
        match self.mode {
            MomentMode::Ewma { lambda } => {
                self.mean = &self.mean * (1.0 - lambda) + sample * lambda;
                self.second = &self.second * (1.0 - lambda) + outer * lambda;
            }
            MomentMode::StationaryCumulative => {
                let n = self.count as f64;
                self.mean = (&self.mean * n + sample) / (n + 1.0);
                self.second = (&self.second * n + outer) / (n + 1.0);
            }
        }
        self.count += 1;
        Ok(())
    }

    pub fn covariance(&self) -> Mat {
        sym_part(&(&self.second - &self.mean * self.mean.transpose()))
    }

    pub fn count(&self) -> usize {
        self.count
    }
}

/// Canonical two-client experiment system: p_m = 2, d_m = 8, A_12 = 0,
/// A_21 != 0, block-diagonal C with full-column-rank blocks, ρ(A) < 1.
pub fn two_client_benchmark(q_scale: f64, r_scale: f64) -> BlockLtiSystem {
    two_client_benchmark_scaled(8, q_scale, r_scale)
}

/// Same structure with a configurable measurement dimension per client
/// (scalability sweeps).
pub fn two_client_benchmark_scaled(d_m: usize, q_scale: f64, r_scale: f64) -> BlockLtiSystem {
    multi_client_benchmark(2, d_m, q_scale, r_scale)
}

/// Chain-coupled M-client variant: client 1 causes client 2 causes ... with
/// the same per-client template as the two-client benchmark.
pub fn multi_client_benchmark(
    clients: usize,
    d_m: usize,
    q_scale: f64,
    r_scale: f64,
) -> BlockLtiSystem {
    assert!(clients >= 2 && d_m >= 2);
    let p_m = 2usize;
    let idx = BlockIndex::new(vec![p_m; clients], vec![d_m; clients]).unwrap();

    let a_diag = Mat::from_row_slice(2, 2, &[0.50, 0.10, 0.00, 0.45]);
    let a_lower = Mat::from_row_slice(2, 2, &[0.45, 0.00, 0.15, 0.00]);
    let zero = Mat::zeros(2, 2);
    let mut grid = vec![vec![zero.clone(); clients]; clients];
    for m in 0..clients {
        grid[m][m] = a_diag.clone();
        if m > 0 {
            grid[m][m - 1] = a_lower.clone();
        }
    }
    let a = idx.assemble_state_blocks(&grid).unwrap();

    // deterministic full-column-rank observation block, rows cycle a fixed
    // pattern so any d_m >= 2 keeps rank 2
    let c_block = Mat::from_fn(d_m, 2, |i, j| {
        let base = [(0.9, 0.2), (0.3, 0.8), (0.5, -0.4), (-0.6, 0.5)];
        let (c0, c1) = base[i % base.len()];
        let v = if j == 0 { c0 } else { c1 };
        v * (1.0 + 0.05 * (i / base.len()) as f64)
    });
    let c = idx
        .assemble_block_diagonal_obs(&vec![c_block; clients])
        .unwrap();

    let p = idx.total_state();
    let d = idx.total_data();
    let q = Mat::identity(p, p) * q_scale;
    let r = Mat::identity(d, d) * r_scale;
    BlockLtiSystem::new(a, c, q, r, idx).expect("benchmark construction is valid")
}

/// Scalar variant (p_m = d_m = 1 per client) for exact-formula unit tests.
///
/// Constructed with `c_m * a_mm = -1`, which makes the dimension-reconciled
/// covariance recursions coincide with their scalar display forms.
pub fn scalar_benchmark(q_scale: f64, r_scale: f64) -> BlockLtiSystem {
    let idx = BlockIndex::new(vec![1, 1], vec![1, 1]).unwrap();
    let a = Mat::from_row_slice(2, 2, &[0.8, 0.0, 0.15, 0.8]);
    let c = Mat::from_row_slice(2, 2, &[-1.25, 0.0, 0.0, -1.25]);
    let q = Mat::identity(2, 2) * q_scale;
    let r = Mat::identity(2, 2) * r_scale;
    BlockLtiSystem::new(a, c, q, r, idx).expect("scalar benchmark is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn noiseless_zero_orbit() {
        let sys = scalar_benchmark(0.0, 0.0);
        let traj = sys.simulate(50, 1, &[], None).unwrap();
        for y in &traj.data {
            assert_eq!(y.amax(), 0.0);
        }
    }

    #[test]
    fn determinism_under_seed() {
        let sys = two_client_benchmark(0.01, 0.04);
        let t1 = sys.simulate(200, 42, &[], None).unwrap();
        let t2 = sys.simulate(200, 42, &[], None).unwrap();
        for (a, b) in t1.data.iter().zip(t2.data.iter()) {
            assert_eq!(a, b);
        }
        let t3 = sys.simulate(200, 43, &[], None).unwrap();
        assert_ne!(t1.data[5], t3.data[5]);
    }

    #[test]
    fn zero_process_noise_variance_converges_to_r() {
        // Prop-style check at reduced scale; the full criterion lives in the
        // acceptance suite.
        let sys = two_client_benchmark(0.0, 0.04);
        let t = 20_000;
        let traj = sys.simulate(t, 7, &[], None).unwrap();
        let d = sys.data_dim();
        let mut est = MomentEstimate::new(d, MomentMode::StationaryCumulative).unwrap();
        for y in traj.data.iter().skip(t / 2) {
            est.update(y).unwrap();
        }
        let cov = est.covariance();
        let rel = (&cov - &sys.r).norm() / sys.r.norm();
        assert!(rel < 0.05, "relative deviation {rel}");
    }

    #[test]
    fn scalar_stationary_variance_matches_lyapunov() {
        // a = 0.9 scalar client; oracle is the discrete Lyapunov solution
        let idx = BlockIndex::new(vec![1], vec![1]).unwrap();
        let a = Mat::from_row_slice(1, 1, &[0.9]);
        let c = Mat::from_row_slice(1, 1, &[1.0]);
        let q = Mat::from_row_slice(1, 1, &[0.3]);
        let r = Mat::zeros(1, 1);
        let sys = BlockLtiSystem::new(a.clone(), c, q.clone(), r, idx).unwrap();
        let expect = solve_discrete_lyapunov(&a, &q).unwrap()[(0, 0)];
        assert_abs_diff_eq!(expect, 0.3 / (1.0 - 0.81), epsilon = 1e-12);

        let t = 60_000;
        let traj = sys.simulate(t, 11, &[], None).unwrap();
        let mut est = MomentEstimate::new(1, MomentMode::StationaryCumulative).unwrap();
        for y in traj.data.iter().skip(t / 4) {
            est.update(y).unwrap();
        }
        let got = est.covariance()[(0, 0)];
        assert!((got - expect).abs() / expect < 0.05);
    }

    #[test]
    fn mean_shift_applies_from_schedule() {
        let sys = scalar_benchmark(0.0, 0.0);
        let off = Vector::from_vec(vec![1.5, -0.5]);
        let traj = sys
            .simulate(10, 3, &[MeanShift::measurement(4, off.clone())], None)
            .unwrap();
        assert_eq!(traj.data[3].amax(), 0.0);
        assert_eq!(traj.data[4], off);
        assert_eq!(traj.data[10], off);
    }

    #[test]
    fn non_psd_noise_rejected() {
        let idx = BlockIndex::new(vec![1], vec![1]).unwrap();
        let a = Mat::from_row_slice(1, 1, &[0.5]);
        let c = Mat::from_row_slice(1, 1, &[1.0]);
        let q = Mat::from_row_slice(1, 1, &[-0.1]);
        let r = Mat::zeros(1, 1);
        assert!(BlockLtiSystem::new(a, c, q, r, idx).is_err());
    }

    #[test]
    fn ewma_full_forgetting_tracks_sample() {
        let mut est = MomentEstimate::new(2, MomentMode::Ewma { lambda: 1.0 }).unwrap();
        let x = Vector::from_vec(vec![2.0, -1.0]);
        est.update(&Vector::from_vec(vec![9.0, 9.0])).unwrap();
        est.update(&x).unwrap();
        assert_eq!(est.mean, x);
        assert!(est.covariance().amax() < 1e-12);
    }

    #[test]
    fn constant_stream_converges() {
        let x = Vector::from_vec(vec![1.0, 2.0]);
        for mode in [MomentMode::StationaryCumulative, MomentMode::Ewma { lambda: 0.2 }] {
            let mut est = MomentEstimate::new(2, mode).unwrap();
            for _ in 0..200 {
                est.update(&x).unwrap();
            }
            assert!((est.mean.clone() - &x).amax() < 1e-8);
            assert!(est.covariance().amax() < 1e-8);
        }
    }

    #[test]
    fn ewma_matches_cited_recursion_exactly() {
        let lambda = 0.3;
        let mut est = MomentEstimate::new(1, MomentMode::Ewma { lambda }).unwrap();
        let xs = [1.0, 4.0, -2.0, 0.5];
        let mut mu = 0.0;
        for &x in &xs {
            est.update(&Vector::from_vec(vec![x])).unwrap();
            mu = (1.0 - lambda) * mu + lambda * x;
            assert_abs_diff_eq!(est.mean[0], mu, epsilon = 1e-15);
        }
    }

    #[test]
    fn ewma_tracking_error_scales_as_drift_over_lambda() {
        // Brute-force trajectory oracle: stream with per-step drift δ, fit C
        // at λ = 0.1, check the bound at the others.
        let delta = 1e-3;
        let steady_err = |lambda: f64| {
            let mut est = MomentEstimate::new(1, MomentMode::Ewma { lambda }).unwrap();
            let mut worst: f64 = 0.0;
            let total = (40.0 / lambda) as usize;
            for t in 0..total {
                let truth = delta * t as f64;
                est.update(&Vector::from_vec(vec![truth])).unwrap();
                if t > total / 2 {
                    worst = worst.max((est.mean[0] - truth).abs());
                }
            }
            worst
        };
        let c = steady_err(0.1) * 0.1 / delta * 1.25;
        for lambda in [0.01, 0.05, 0.1] {
            let err = steady_err(lambda);
            assert!(
                err <= c * delta / lambda,
                "λ={lambda}: err {err} > bound {}",
                c * delta / lambda
            );
        }
    }

    #[test]
    fn invalid_lambda_rejected() {
        assert!(MomentEstimate::new(1, MomentMode::Ewma { lambda: 0.0 }).is_err());
        assert!(MomentEstimate::new(1, MomentMode::Ewma { lambda: 1.1 }).is_err());
    }

    #[test]
    fn benchmark_structure() {
        let sys = two_client_benchmark(0.01, 0.04);
        assert!(sys.stable, "rho = {}", sys.rho_a);
        assert_eq!(sys.a_block(0, 1).amax(), 0.0, "A_12 must be exactly zero");
        assert!(sys.a_block(1, 0).norm() > 0.0, "A_21 must be nonzero");
        // C blocks have full column rank
        let svd = sys.c_block(0).svd(false, false);
        assert!(svd.singular_values.iter().all(|&s| s > 1e-6));

        let s = scalar_benchmark(0.01, 0.04);
        assert!(s.stable);
        let ca = s.c_block(0)[(0, 0)] * s.a_block(0, 0)[(0, 0)];
        assert_abs_diff_eq!(ca, -1.0, epsilon = 1e-12);
    }

    #[test]
    fn stationary_moments_match_long_run() {
        let sys = scalar_benchmark(0.02, 0.04);
        let shift = MeanShift::measurement(0, Vector::from_vec(vec![2.0, 1.0]));
        let mom = sys.stationary_moments(&[shift.clone()]).unwrap();
        let t = 60_000;
        let traj = sys.simulate(t, 5, &[shift], None).unwrap();
        let mut est = MomentEstimate::new(2, MomentMode::StationaryCumulative).unwrap();
        for y in traj.data.iter().skip(t / 4) {
            est.update(y).unwrap();
        }
        assert!((est.mean.clone() - &mom.mu_y).amax() < 0.05);
        let rel = (est.covariance() - &mom.sigma_y).norm() / mom.sigma_y.norm();
        assert!(rel < 0.08, "rel {rel}");
    }
}
