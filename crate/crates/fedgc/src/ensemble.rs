//! Monte-Carlo ground truth: N independent replicas of federated training
//! with sampled initializations and fresh noise, and unbiased cross-replica
//! estimates of every covariance the closed forms predict.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::client::ClientModel;
use crate::error::{FedgcError, Result};
use crate::linalg::{vectorize, Mat, Vector};
use crate::protocol::{run_federated, RoundObserver, RoundRecord, RunConfig, ServerModel};
use crate::world::BlockLtiSystem;

#[derive(Debug, Clone)]
pub struct EnsembleConfig {
    pub replicas: usize,
    pub prior_sigma_theta: f64,
    pub prior_sigma_a: f64,
    pub base_seed: u64,
    pub stride: usize,
    /// Degenerate mode for estimator tests: every replica reuses the base
    /// seed, so all empirical covariances are exactly zero.
    pub identical_seeds: bool,
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicas < 2 {
            return Err(FedgcError::Config("ensemble needs N >= 2 replicas".into()));
        }
        if self.prior_sigma_theta < 0.0 || self.prior_sigma_a < 0.0 {
            return Err(FedgcError::Config("ensemble priors must be PSD (>= 0)".into()));
        }
        if self.stride == 0 {
            return Err(FedgcError::Config("ensemble stride must be >= 1".into()));
        }
        Ok(())
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Splittable counter scheme: replica streams never depend on N.
pub fn replica_seed(base: u64, index: usize) -> u64 {
    splitmix64(base ^ splitmix64(index as u64 + 1))
}

/// Running cross-moment sums for one (x, y) pair of vectors.
#[derive(Debug, Clone)]
struct CrossAcc {
    sx: Vector,
    sy: Vector,
    sxy: Mat,
}

impl CrossAcc {
    fn new(nx: usize, ny: usize) -> Self {
        CrossAcc {
            sx: Vector::zeros(nx),
            sy: Vector::zeros(ny),
            sxy: Mat::zeros(nx, ny),
        }
    }

    fn add(&mut self, x: &Vector, y: &Vector) {
        self.sx += x;
        self.sy += y;
        self.sxy += x * y.transpose();
    }

    fn merge(&mut self, other: &CrossAcc) {
        self.sx += &other.sx;
        self.sy += &other.sy;
        self.sxy += &other.sxy;
    }

    /// Unbiased covariance with the (N-1) normalization.
    fn cov(&self, n: usize) -> Mat {
        let nf = n as f64;
        (&self.sxy - &self.sx * self.sy.transpose() / nf) / (nf - 1.0)
    }

    fn mean_x(&self, n: usize) -> Vector {
        &self.sx / n as f64
    }
}

/// Accumulators for one logged round.
#[derive(Debug, Clone)]
struct RoundAcc {
    round: usize,
    /// per client: (v, v), (h_a, h_a), (v, h_a), (v, y), (g, g)
    v_v: Vec<CrossAcc>,
    ha_ha: Vec<CrossAcc>,
    v_ha: Vec<CrossAcc>,
    v_y: Vec<CrossAcc>,
    g_g: Vec<CrossAcc>,
    /// per pair: (a, a), (a, h_a m), (a, v m), (a, previous-round h_a m)
    a_a: Vec<CrossAcc>,
    a_ha: Vec<CrossAcc>,
    a_v: Vec<CrossAcc>,
    a_ha_prev: Vec<CrossAcc>,
    /// per unordered client pair m < n: (g_m, g_n), (v_m, v_n)
    g_cross: Vec<CrossAcc>,
    v_cross: Vec<CrossAcc>,
}

#[derive(Debug, Clone)]
struct Accumulator {
    rounds: Vec<RoundAcc>,
    n: usize,
}

impl Accumulator {
    fn new(world: &BlockLtiSystem, logged_rounds: &[usize]) -> Self {
        let idx = &world.idx;
        let mm = idx.clients();
        let pairs = ordered_pairs(mm);
        let unordered = unordered_pairs(mm);
        let rounds = logged_rounds
            .iter()
            .map(|&round| RoundAcc {
                round,
                v_v: (0..mm)
                    .map(|m| {
                        let pd = idx.state_dim(m) * idx.data_dim(m);
                        CrossAcc::new(pd, pd)
                    })
                    .collect(),
                ha_ha: (0..mm)
                    .map(|m| CrossAcc::new(idx.state_dim(m), idx.state_dim(m)))
                    .collect(),
                v_ha: (0..mm)
                    .map(|m| {
                        CrossAcc::new(idx.state_dim(m) * idx.data_dim(m), idx.state_dim(m))
                    })
                    .collect(),
                v_y: (0..mm)
                    .map(|m| {
                        CrossAcc::new(idx.state_dim(m) * idx.data_dim(m), idx.data_dim(m))
                    })
                    .collect(),
                g_g: (0..mm)
                    .map(|m| CrossAcc::new(idx.state_dim(m), idx.state_dim(m)))
                    .collect(),
                a_a: pairs
                    .iter()
                    .map(|&(m, n)| {
                        let pp = idx.state_dim(m) * idx.state_dim(n);
                        CrossAcc::new(pp, pp)
                    })
                    .collect(),
                a_ha: pairs
                    .iter()
                    .map(|&(m, n)| {
                        CrossAcc::new(idx.state_dim(m) * idx.state_dim(n), idx.state_dim(m))
                    })
                    .collect(),
                a_v: pairs
                    .iter()
                    .map(|&(m, n)| {
                        CrossAcc::new(
                            idx.state_dim(m) * idx.state_dim(n),
                            idx.state_dim(m) * idx.data_dim(m),
                        )
                    })
                    .collect(),
                a_ha_prev: pairs
                    .iter()
                    .map(|&(m, n)| {
                        CrossAcc::new(idx.state_dim(m) * idx.state_dim(n), idx.state_dim(m))
                    })
                    .collect(),
                g_cross: unordered
                    .iter()
                    .map(|&(m, n)| CrossAcc::new(idx.state_dim(m), idx.state_dim(n)))
                    .collect(),
                v_cross: unordered
                    .iter()
                    .map(|&(m, n)| {
                        CrossAcc::new(
                            idx.state_dim(m) * idx.data_dim(m),
                            idx.state_dim(n) * idx.data_dim(n),
                        )
                    })
                    .collect(),
            })
            .collect();
        Accumulator { rounds, n: 0 }
    }

    fn merge(&mut self, other: &Accumulator) {
        self.n += other.n;
        for (a, b) in self.rounds.iter_mut().zip(other.rounds.iter()) {
            for (x, y) in a.v_v.iter_mut().zip(b.v_v.iter()) {
                x.merge(y);
            }
            for (x, y) in a.ha_ha.iter_mut().zip(b.ha_ha.iter()) {
                x.merge(y);
            }
            for (x, y) in a.v_ha.iter_mut().zip(b.v_ha.iter()) {
                x.merge(y);
            }
            for (x, y) in a.v_y.iter_mut().zip(b.v_y.iter()) {
                x.merge(y);
            }
            for (x, y) in a.g_g.iter_mut().zip(b.g_g.iter()) {
                x.merge(y);
            }
            for (x, y) in a.a_a.iter_mut().zip(b.a_a.iter()) {
                x.merge(y);
            }
            for (x, y) in a.a_ha.iter_mut().zip(b.a_ha.iter()) {
                x.merge(y);
            }
            for (x, y) in a.a_v.iter_mut().zip(b.a_v.iter()) {
                x.merge(y);
            }
            for (x, y) in a.a_ha_prev.iter_mut().zip(b.a_ha_prev.iter()) {
                x.merge(y);
            }
            for (x, y) in a.g_cross.iter_mut().zip(b.g_cross.iter()) {
                x.merge(y);
            }
            for (x, y) in a.v_cross.iter_mut().zip(b.v_cross.iter()) {
                x.merge(y);
            }
        }
    }
}

fn ordered_pairs(mm: usize) -> Vec<(usize, usize)> {
    let mut v = Vec::new();
    for m in 0..mm {
        for n in 0..mm {
            if m != n {
                v.push((m, n));
            }
        }
    }
    v
}

fn unordered_pairs(mm: usize) -> Vec<(usize, usize)> {
    let mut v = Vec::new();
    for m in 0..mm {
        for n in m + 1..mm {
            v.push((m, n));
        }
    }
    v
}

struct ReplicaCollector<'a> {
    acc: &'a mut Accumulator,
    stride: usize,
    horizon: usize,
    slot: usize,
    pairs: Vec<(usize, usize)>,
    unordered: Vec<(usize, usize)>,
}

impl RoundObserver for ReplicaCollector<'_> {
    fn observe(&mut self, rec: &RoundRecord<'_>) {
        let logged = rec.round % self.stride == 0 || rec.round == self.horizon;
        if !logged {
            return;
        }
        if self.slot >= self.acc.rounds.len() || self.acc.rounds[self.slot].round != rec.round {
            return; // defensive; slots are precomputed from the same schedule
        }
        let slot = &mut self.acc.rounds[self.slot];
        self.slot += 1;
        let mm = rec.clients.len();
        let v: Vec<Vector> = (0..mm).map(|m| vectorize(&rec.clients[m].theta)).collect();
        for m in 0..mm {
            slot.v_v[m].add(&v[m], &v[m]);
            slot.ha_ha[m].add(&rec.h_a[m], &rec.h_a[m]);
            slot.v_ha[m].add(&v[m], &rec.h_a[m]);
            slot.v_y[m].add(&v[m], &rec.y[m]);
            slot.g_g[m].add(&rec.g_norm[m], &rec.g_norm[m]);
        }
        for (i, &(m, n)) in self.pairs.iter().enumerate() {
            let a = vectorize(rec.server.block(m, n));
            slot.a_a[i].add(&a, &a);
            slot.a_ha[i].add(&a, &rec.h_a[m]);
            slot.a_v[i].add(&a, &v[m]);
            slot.a_ha_prev[i].add(&a, &rec.h_a_prev[m]);
        }
        for (i, &(m, n)) in self.unordered.iter().enumerate() {
            slot.g_cross[i].add(&rec.g_norm[m], &rec.g_norm[n]);
            slot.v_cross[i].add(&v[m], &v[n]);
        }
    }
}

/// Cross-replica second moments at one logged round.
#[derive(Debug, Clone)]
pub struct RoundMoments {
    pub round: usize,
    pub mean_v: Vec<Vector>,
    pub sigma_theta: Vec<Mat>,
    pub sigma_h: Vec<Mat>,
    pub lambda: Vec<Mat>,
    pub omega: Vec<Mat>,
    pub var_g: Vec<Mat>,
    pub mean_a: Vec<Vector>,
    pub sigma_a: Vec<Mat>,
    pub gamma: Vec<Mat>,
    pub psi: Vec<Mat>,
    /// shifted covariance Cov(a^t, h_a^{t-1})
    pub gamma_shifted: Vec<Mat>,
    pub cov_g_cross: Vec<Mat>,
    pub cov_v_cross: Vec<Mat>,
}

#[derive(Debug, Clone)]
pub struct EmpiricalMoments {
    pub replicas: usize,
    pub pairs: Vec<(usize, usize)>,
    pub unordered_pairs: Vec<(usize, usize)>,
    pub rounds: Vec<RoundMoments>,
}

impl EmpiricalMoments {
    /// Per-pair `||mean(Â_mn) - A_mn||_F` curves.
    pub fn error_curves(&self, world: &BlockLtiSystem) -> Vec<Vec<f64>> {
        self.pairs
            .iter()
            .enumerate()
            .map(|(i, &(m, n))| {
                let truth = vectorize(&world.a_block(m, n));
                self.rounds
                    .iter()
                    .map(|r| (r.mean_a[i].clone() - &truth).norm())
                    .collect()
            })
            .collect()
    }

    /// CSV with the same trace/norm schema as the covariance engine.
    pub fn to_csv(&self, clients: usize) -> String {
        let mut out = String::from("round");
        for (m, n) in &self.pairs {
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
        for (m, n) in &self.pairs {
            out.push_str(&format!(",fro_gamma_{}_{}", m + 1, n + 1));
        }
        for (m, n) in &self.pairs {
            out.push_str(&format!(",fro_psi_{}_{}", m + 1, n + 1));
        }
        for m in 1..=clients {
            out.push_str(&format!(",fro_lambda_{m}"));
        }
        for m in 1..=clients {
            out.push_str(&format!(",fro_omega_{m}"));
        }
        for (m, n) in &self.pairs {
            out.push_str(&format!(",err_A_{}_{}", m + 1, n + 1));
        }
        out.push('\n');
        for r in &self.rounds {
            out.push_str(&r.round.to_string());
            for v in r.sigma_a.iter().map(Mat::trace) {
                out.push_str(&format!(",{v:.16e}"));
            }
            for v in r.sigma_theta.iter().map(Mat::trace) {
                out.push_str(&format!(",{v:.16e}"));
            }
            for v in r.sigma_h.iter().map(Mat::trace) {
                out.push_str(&format!(",{v:.16e}"));
            }
            for v in r.var_g.iter().map(Mat::trace) {
                out.push_str(&format!(",{v:.16e}"));
            }
            for v in r.gamma.iter().map(Mat::norm) {
                out.push_str(&format!(",{v:.16e}"));
            }
            for v in r.psi.iter().map(Mat::norm) {
                out.push_str(&format!(",{v:.16e}"));
            }
            for v in r.lambda.iter().map(Mat::norm) {
                out.push_str(&format!(",{v:.16e}"));
            }
            for v in r.omega.iter().map(Mat::norm) {
                out.push_str(&format!(",{v:.16e}"));
            }
            // mean error per pair needs truth; omitted here (see error_curves)
            for _ in &self.pairs {
                out.push_str(",nan");
            }
            out.push('\n');
        }
        out
    }
}

/// Sample a fresh replica initialization and run it.
fn run_replica(
    world: &BlockLtiSystem,
    clients_template: &[ClientModel],
    server_template: &ServerModel,
    run_cfg: &RunConfig,
    ens: &EnsembleConfig,
    seed: u64,
    acc: &mut Accumulator,
    logged: &[usize],
) -> Result<()> {
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51ab_de37_9cc1_77f0);
    let mut clients = clients_template.to_vec();
    let st = ens.prior_sigma_theta.sqrt();
    for c in clients.iter_mut() {
        c.theta = Mat::from_fn(c.theta.nrows(), c.theta.ncols(), |_, _| {
            let z: f64 = StandardNormal.sample(&mut init_rng);
            st * z
        });
    }
    let mut server = server_template.clone();
    let sa = ens.prior_sigma_a.sqrt();
    for (m, n) in server.pairs() {
        let (r, c) = (server.block(m, n).nrows(), server.block(m, n).ncols());
        let blk = Mat::from_fn(r, c, |_, _| {
            let z: f64 = StandardNormal.sample(&mut init_rng);
            sa * z
        });
        server.set_block(m, n, blk)?;
    }
    let mut cfg = run_cfg.clone();
    cfg.seed = seed;
    cfg.log_stride = run_cfg.horizon.max(1); // RunLog rows unused here
    let mut collector = ReplicaCollector {
        acc,
        stride: ens.stride,
        horizon: run_cfg.horizon,
        slot: 0,
        pairs: ordered_pairs(world.idx.clients()),
        unordered: unordered_pairs(world.idx.clients()),
    };
    let _ = logged;
    run_federated(world, &mut clients, &mut server, &cfg, &mut collector).map_err(|e| match e {
        FedgcError::Protocol { round, .. } => FedgcError::ReplicaDiverged { seed, round },
        FedgcError::Numerical { .. } => FedgcError::ReplicaDiverged { seed, round: 0 },
        other => other,
    })?;
    acc.n += 1;
    Ok(())
}

/// Run the ensemble. Replicas execute concurrently in fixed-size chunks and
/// partial sums merge in chunk order, so results do not depend on thread
/// scheduling.
pub fn run_ensemble(
    world: &BlockLtiSystem,
    clients_template: &[ClientModel],
    server_template: &ServerModel,
    run_cfg: &RunConfig,
    ens: &EnsembleConfig,
) -> Result<EmpiricalMoments> {
    ens.validate()?;
    let logged: Vec<usize> = {
        let mut v: Vec<usize> = std::iter::once(0)
            .chain(
                (1..=run_cfg.horizon)
                    .filter(|t| t % ens.stride == 0 || *t == run_cfg.horizon),
            )
            .collect();
        v.dedup();
        v
    };
    let chunk = ((ens.replicas + 63) / 64).max(1);
    let chunk_ranges: Vec<(usize, usize)> = (0..ens.replicas)
        .step_by(chunk)
        .map(|lo| (lo, (lo + chunk).min(ens.replicas)))
        .collect();

    let partials: Vec<Result<Accumulator>> = chunk_ranges
        .par_iter()
        .map(|&(lo, hi)| {
            let mut acc = Accumulator::new(world, &logged);
            for i in lo..hi {
                let seed = if ens.identical_seeds {
                    ens.base_seed
                } else {
                    replica_seed(ens.base_seed, i)
                };
                run_replica(
                    world,
                    clients_template,
                    server_template,
                    run_cfg,
                    ens,
                    seed,
                    &mut acc,
                    &logged,
                )?;
            }
            Ok(acc)
        })
        .collect();

    let mut total = Accumulator::new(world, &logged);
    for p in partials {
        total.merge(&p?);
    }
    let n = total.n;

    let pairs = ordered_pairs(world.idx.clients());
    let unordered = unordered_pairs(world.idx.clients());
    let rounds = total
        .rounds
        .iter()
        .map(|ra| RoundMoments {
            round: ra.round,
            mean_v: ra.v_v.iter().map(|a| a.mean_x(n)).collect(),
            sigma_theta: ra.v_v.iter().map(|a| a.cov(n)).collect(),
            sigma_h: ra.ha_ha.iter().map(|a| a.cov(n)).collect(),
            lambda: ra.v_ha.iter().map(|a| a.cov(n)).collect(),
            omega: ra.v_y.iter().map(|a| a.cov(n)).collect(),
            var_g: ra.g_g.iter().map(|a| a.cov(n)).collect(),
            mean_a: ra.a_a.iter().map(|a| a.mean_x(n)).collect(),
            sigma_a: ra.a_a.iter().map(|a| a.cov(n)).collect(),
            gamma: ra.a_ha.iter().map(|a| a.cov(n)).collect(),
            psi: ra.a_v.iter().map(|a| a.cov(n)).collect(),
            gamma_shifted: ra.a_ha_prev.iter().map(|a| a.cov(n)).collect(),
            cov_g_cross: ra.g_cross.iter().map(|a| a.cov(n)).collect(),
            cov_v_cross: ra.v_cross.iter().map(|a| a.cov(n)).collect(),
        })
        .collect();

    Ok(EmpiricalMoments {
        replicas: n,
        pairs,
        unordered_pairs: unordered,
        rounds,
    })
}

/// Convenience: empirical covariance of i.i.d. vector samples (estimator
/// calibration tests).
pub fn sample_covariance(samples: &[Vector]) -> Mat {
    let n = samples.len();
    let dim = samples[0].len();
    let mut acc = CrossAcc::new(dim, dim);
    for s in samples {
        acc.add(s, s);
    }
    acc.cov(n)
}
