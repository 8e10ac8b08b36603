//! FedGC coordinator: server model, message protocol, federated training
//! loop, DP noise injection, and the comparison baselines.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::client::ClientModel;
use crate::error::{FedgcError, Result};
use crate::linalg::{is_finite_mat, is_finite_vec, Mat, Vector};
use crate::world::{BlockLtiSystem, MeanShift, Trajectory};

/// Client-to-server payload: the filtered and augmented state estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct UpMessage {
    pub client: usize,
    pub h_c: Vector,
    pub h_a: Vector,
}

/// Server-to-client payload: the loss gradient with respect to the augmented
/// state.
#[derive(Debug, Clone, PartialEq)]
pub struct DownMessage {
    pub client: usize,
    pub grad: Vector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DpDirection {
    None,
    Up,
    Down,
    Both,
}

/// Gaussian-mechanism noise policy for transmitted payloads.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct DpPolicy {
    pub direction: DpDirection,
    pub sigma: f64,
}

impl DpPolicy {
    pub fn off() -> Self {
        DpPolicy {
            direction: DpDirection::None,
            sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma < 0.0 {
            return Err(FedgcError::Config("DP sigma must be >= 0".into()));
        }
        Ok(())
    }

    fn noise_up(&self) -> bool {
        self.sigma > 0.0 && matches!(self.direction, DpDirection::Up | DpDirection::Both)
    }

    fn noise_down(&self) -> bool {
        self.sigma > 0.0 && matches!(self.direction, DpDirection::Down | DpDirection::Both)
    }

    /// Add i.i.d. N(0, sigma^2) to every payload coordinate of an up message.
    /// sigma = 0 is the identity.
    pub fn apply_up(&self, msg: &mut UpMessage, rng: &mut ChaCha8Rng) {
        if self.noise_up() {
            add_noise(&mut msg.h_c, self.sigma, rng);
            add_noise(&mut msg.h_a, self.sigma, rng);
        }
    }

    pub fn apply_down(&self, msg: &mut DownMessage, rng: &mut ChaCha8Rng) {
        if self.noise_down() {
            add_noise(&mut msg.grad, self.sigma, rng);
        }
    }
}

fn add_noise(v: &mut Vector, sigma: f64, rng: &mut ChaCha8Rng) {
    for x in v.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *x += sigma * z;
    }
}

/// Whether the server update keeps the cross-block coupling term of the full
/// gradient or drops it to match the covariance recursion exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServerUpdateMode {
    Exact,
    RecursionMatched,
}

/// Server model: estimated off-diagonal blocks, known diagonal blocks.
#[derive(Debug, Clone)]
pub struct ServerModel {
    pub a_diag: Vec<Mat>,
    blocks: Vec<Vec<Mat>>,
    pub gamma: f64,
    pub lambda_s: f64,
    pub mode: ServerUpdateMode,
}

impl ServerModel {
    pub fn new(a_diag: Vec<Mat>, gamma: f64, lambda_s: f64, mode: ServerUpdateMode) -> Self {
        let m = a_diag.len();
        let blocks = (0..m)
            .map(|i| {
                (0..m)
                    .map(|j| Mat::zeros(a_diag[i].nrows(), a_diag[j].nrows()))
                    .collect()
            })
            .collect();
        ServerModel {
            a_diag,
            blocks,
            gamma,
            lambda_s,
            mode,
        }
    }

    pub fn clients(&self) -> usize {
        self.a_diag.len()
    }

    pub fn block(&self, m: usize, n: usize) -> &Mat {
        &self.blocks[m][n]
    }

    pub fn set_block(&mut self, m: usize, n: usize, value: Mat) -> Result<()> {
        if m == n {
            return Err(FedgcError::Config("diagonal blocks are never updated".into()));
        }
        let (r, c) = (self.a_diag[m].nrows(), self.a_diag[n].nrows());
        if value.nrows() != r || value.ncols() != c {
            return Err(FedgcError::dimension(
                "set_block",
                format!("{r}x{c}"),
                format!("{}x{}", value.nrows(), value.ncols()),
            ));
        }
        self.blocks[m][n] = value;
        Ok(())
    }

    /// All off-diagonal pairs in deterministic (m, n) order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mm = self.clients();
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

    /// Next-step prediction per client from the previous-round filtered
    /// states: `h_{m,s} = A_mm ĥ_{m,c} + Σ_{n≠m} Â_mn ĥ_{n,c}`.
    pub fn prediction(&self, up: &[UpMessage]) -> Result<Vec<Vector>> {
        self.check_messages(up)?;
        let mm = self.clients();
        let mut out = Vec::with_capacity(mm);
        for m in 0..mm {
            let mut h = &self.a_diag[m] * &up[m].h_c;
            for n in 0..mm {
                if n != m {
                    h += &self.blocks[m][n] * &up[n].h_c;
                }
            }
            out.push(h);
        }
        Ok(out)
    }

    /// Residual `r_m = A_mm (ĥ_{m,a} - ĥ_{m,c}) - Σ_{n≠m} Â_mn ĥ_{n,c}`,
    /// the per-client difference between the augmented target and the server
    /// prediction.
    pub fn residual(&self, up: &[UpMessage], m: usize) -> Result<Vector> {
        self.check_messages(up)?;
        let mut r = &self.a_diag[m] * (&up[m].h_a - &up[m].h_c);
        for n in 0..self.clients() {
            if n != m {
                r -= &self.blocks[m][n] * &up[n].h_c;
            }
        }
        Ok(r)
    }

    /// Squared-residual loss over the stacked targets plus the ridge term.
    pub fn loss_from_states(&self, h_a: &[Vector], h_s: &[Vector]) -> Result<f64> {
        if h_a.len() != h_s.len() {
            return Err(FedgcError::dimension("server loss", h_a.len(), h_s.len()));
        }
        let mut acc = 0.0;
        for (ta, ts) in h_a.iter().zip(h_s.iter()) {
            if ta.len() != ts.len() {
                return Err(FedgcError::dimension("server loss block", ta.len(), ts.len()));
            }
            acc += (ta - ts).norm_squared();
        }
        let mut ridge = 0.0;
        for (m, n) in self.pairs() {
            ridge += self.blocks[m][n].norm_squared();
        }
        Ok(acc + self.lambda_s * ridge)
    }

    pub fn loss(&self, up: &[UpMessage]) -> Result<f64> {
        let h_s = self.prediction(up)?;
        let h_a: Vec<Vector> = up
            .iter()
            .enumerate()
            .map(|(m, msg)| &self.a_diag[m] * &msg.h_a)
            .collect();
        self.loss_from_states(&h_a, &h_s)
    }

    /// Gradient of the server loss with respect to `ĥ_{m,a}`:
    /// `g = 2 A_mm^T r_m`. The factor 2 is the exact squared-loss derivative.
    pub fn gradient(&self, up: &[UpMessage], m: usize) -> Result<DownMessage> {
        let r = self.residual(up, m)?;
        Ok(DownMessage {
            client: m,
            grad: self.a_diag[m].transpose() * r * 2.0,
        })
    }

    /// Variance-bookkeeping gradient `A_mm^T r_m` (the constant absorbed into
    /// the learning rates); what the ensemble estimator pairs with the
    /// closed-form server-to-client variance.
    pub fn gradient_normalized(&self, up: &[UpMessage], m: usize) -> Result<Vector> {
        Ok(self.a_diag[m].transpose() * self.residual(up, m)?)
    }

    /// One gradient-descent step on every off-diagonal block, computed from
    /// the old state and applied simultaneously:
    /// `Â_mn ← Â_mn ((1 - 2γλ_s) I - 2γ ĥ_{n,c} ĥ_{n,c}^T)
    ///         + 2γ A_mm (ĥ_{m,a} - ĥ_{m,c}) ĥ_{n,c}^T  [- cross-block term]`.
    pub fn update(&mut self, up: &[UpMessage]) -> Result<()> {
        self.check_messages(up)?;
        if self.gamma == 0.0 {
            return Ok(());
        }
        let mm = self.clients();
        let mut next = self.blocks.clone();
        for m in 0..mm {
            let target = &self.a_diag[m] * (&up[m].h_a - &up[m].h_c);
            for n in 0..mm {
                if n == m {
                    continue;
                }
                let h_n = &up[n].h_c;
                let mut resid = target.clone() - &self.blocks[m][n] * h_n;
                if self.mode == ServerUpdateMode::Exact {
                    for p in 0..mm {
                        if p != m && p != n {
                            resid -= &self.blocks[m][p] * &up[p].h_c;
                        }
                    }
                }
                let grad_step = &resid * h_n.transpose() * (2.0 * self.gamma);
                next[m][n] = &self.blocks[m][n] * (1.0 - 2.0 * self.gamma * self.lambda_s)
                    + grad_step;
                if !is_finite_mat(&next[m][n]) {
                    return Err(FedgcError::Numerical {
                        context: "server update".into(),
                        message: format!("block ({m},{n}) became non-finite"),
                    });
                }
            }
        }
        self.blocks = next;
        Ok(())
    }

    fn check_messages(&self, up: &[UpMessage]) -> Result<()> {
        if up.len() != self.clients() {
            return Err(FedgcError::Protocol {
                round: 0,
                message: format!("expected {} up-messages, got {}", self.clients(), up.len()),
            });
        }
        for (m, msg) in up.iter().enumerate() {
            if msg.client != m {
                return Err(FedgcError::Protocol {
                    round: 0,
                    message: format!("missing up-message from client {m}"),
                });
            }
            let p = self.a_diag[m].nrows();
            if msg.h_c.len() != p || msg.h_a.len() != p {
                return Err(FedgcError::Protocol {
                    round: 0,
                    message: format!(
                        "client {m} state length {} does not match block dimension {p}",
                        msg.h_c.len()
                    ),
                });
            }
        }
        Ok(())
    }
}

/// Everything a round produces, handed to observers for logging.
pub struct RoundRecord<'a> {
    pub round: usize,
    /// y^t per client
    pub y: &'a [Vector],
    /// y^{t-1} per client
    pub y_prev: &'a [Vector],
    pub h_c: &'a [Vector],
    pub h_a: &'a [Vector],
    pub h_a_prev: &'a [Vector],
    pub clients: &'a [ClientModel],
    pub server: &'a ServerModel,
    /// normalized server gradient `A_mm^T r_m` per client
    pub g_norm: &'a [Vector],
    pub local_loss: &'a [f64],
    pub server_loss: f64,
}

pub trait RoundObserver {
    fn observe(&mut self, record: &RoundRecord<'_>);
}

/// No-op observer.
pub struct NullObserver;

impl RoundObserver for NullObserver {
    fn observe(&mut self, _record: &RoundRecord<'_>) {}
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub horizon: usize,
    pub seed: u64,
    pub dp: DpPolicy,
    pub shifts: Vec<MeanShift>,
    pub log_stride: usize,
}

impl RunConfig {
    pub fn new(horizon: usize, seed: u64) -> Self {
        RunConfig {
            horizon,
            seed,
            dp: DpPolicy::off(),
            shifts: Vec::new(),
            log_stride: 1,
        }
    }
}

/// Per-round log entry at the configured stride.
#[derive(Debug, Clone)]
pub struct RunLogRow {
    pub round: usize,
    /// `||Â_mn - A_mn||_F` per pair, in `ServerModel::pairs` order
    pub err_a: Vec<f64>,
    pub local_loss: Vec<f64>,
    pub server_loss: f64,
}

#[derive(Debug, Clone)]
pub struct RunLog {
    pub pairs: Vec<(usize, usize)>,
    pub rows: Vec<RunLogRow>,
    pub final_clients: Vec<ClientModel>,
    pub final_server: ServerModel,
}

impl RunLog {
    /// CSV with columns round, per-pair err_A_{m}_{n}, per-client loss_local_{m},
    /// loss_server (1-based client/pair labels).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("round");
        for (m, n) in &self.pairs {
            out.push_str(&format!(",err_A_{}_{}", m + 1, n + 1));
        }
        for m in 0..self.final_clients.len() {
            out.push_str(&format!(",loss_local_{}", m + 1));
        }
        out.push_str(",loss_server\n");
        for row in &self.rows {
            out.push_str(&row.round.to_string());
            for e in &row.err_a {
                out.push_str(&format!(",{e:.16e}"));
            }
            for l in &row.local_loss {
                out.push_str(&format!(",{l:.16e}"));
            }
            out.push_str(&format!(",{:.16e}\n", row.server_loss));
        }
        out
    }
}

/// Run the round-synchronous federated loop for `T` rounds on a freshly
/// simulated trajectory. Deterministic under the seed.
///
/// Round structure (documented one-round lag): the server works on the most
/// recent received states, i.e. round t consumes the messages sent at the
/// end of round t-1.
pub fn run_federated(
    world: &BlockLtiSystem,
    clients: &mut Vec<ClientModel>,
    server: &mut ServerModel,
    config: &RunConfig,
    observer: &mut dyn RoundObserver,
) -> Result<RunLog> {
    config.dp.validate()?;
    let traj = world.simulate(config.horizon, config.seed, &config.shifts, None)?;
    run_federated_on_trajectory(world, &traj, clients, server, config, observer)
}

/// Same loop on a pre-generated trajectory (the ensemble and the mean-path
/// driver reuse this).
pub fn run_federated_on_trajectory(
    world: &BlockLtiSystem,
    traj: &Trajectory,
    clients: &mut Vec<ClientModel>,
    server: &mut ServerModel,
    config: &RunConfig,
    observer: &mut dyn RoundObserver,
) -> Result<RunLog> {
    let mm = world.idx.clients();
    if clients.len() != mm || server.clients() != mm {
        return Err(FedgcError::Protocol {
            round: 0,
            message: format!(
                "world has {mm} clients, got {} client models and {} server rows",
                clients.len(),
                server.clients()
            ),
        });
    }
    for (m, c) in clients.iter().enumerate() {
        if c.state_dim() != world.idx.state_dim(m) || c.data_dim() != world.idx.data_dim(m) {
            return Err(FedgcError::Protocol {
                round: 0,
                message: format!("client {m} dimensions do not match the world"),
            });
        }
    }
    let mut dp_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);

    let split = |v: &Vector| -> Vec<Vector> {
        (0..mm).map(|m| world.idx.data_segment(v, m)).collect()
    };

    // t = 0 initialization
    let mut y_prev: Vec<Vector> = split(&traj.data[0]);
    let mut h_c: Vec<Vector> = (0..mm)
        .map(|m| Vector::zeros(world.idx.state_dim(m)))
        .collect();
    let mut h_a: Vec<Vector> = (0..mm)
        .map(|m| clients[m].augment(&h_c[m], &y_prev[m]))
        .collect();
    let mut inbox: Vec<UpMessage> = (0..mm)
        .map(|m| {
            let mut msg = UpMessage {
                client: m,
                h_c: h_c[m].clone(),
                h_a: h_a[m].clone(),
            };
            config.dp.apply_up(&mut msg, &mut dp_rng);
            msg
        })
        .collect();

    let pairs = server.pairs();
    let mut rows = Vec::new();

    // initialization record (round 0): states before any training round
    {
        let zero_g: Vec<Vector> = (0..mm)
            .map(|m| Vector::zeros(world.idx.state_dim(m)))
            .collect();
        let zero_loss = vec![0.0; mm];
        observer.observe(&RoundRecord {
            round: 0,
            y: &y_prev,
            y_prev: &y_prev,
            h_c: &h_c,
            h_a: &h_a,
            h_a_prev: &h_a,
            clients,
            server,
            g_norm: &zero_g,
            local_loss: &zero_loss,
            server_loss: 0.0,
        });
    }

    for t in 1..=config.horizon {
        let y_t = split(&traj.data[t]);

        // local filtering on the new measurement
        let mut h_c_next = Vec::with_capacity(mm);
        for m in 0..mm {
            let h = clients[m]
                .filter_step(&h_c[m], &y_t[m])
                .map_err(|e| protocol_at(t, e))?;
            h_c_next.push(h);
        }

        // server phase on last round's messages
        let mut g_norm = Vec::with_capacity(mm);
        let mut downs = Vec::with_capacity(mm);
        for m in 0..mm {
            g_norm.push(
                server
                    .gradient_normalized(&inbox, m)
                    .map_err(|e| protocol_at(t, e))?,
            );
            let mut down = server.gradient(&inbox, m).map_err(|e| protocol_at(t, e))?;
            config.dp.apply_down(&mut down, &mut dp_rng);
            downs.push(down);
        }
        let server_loss = server.loss(&inbox).map_err(|e| protocol_at(t, e))?;
        server.update(&inbox).map_err(|e| protocol_at(t, e))?;

        // client updates: local gradient on (ĥ_c^{t-1}, y^{t-1}, y^t) plus the
        // server-coupled chain through y^{t-1}
        let mut local_loss = Vec::with_capacity(mm);
        for m in 0..mm {
            let g_local = clients[m].local_gradient(&h_c[m], &y_prev[m], &y_t[m]);
            local_loss.push(clients[m].local_loss(&h_c[m], &y_prev[m], &y_t[m]));
            clients[m]
                .apply_update(&g_local, &downs[m].grad, &y_prev[m])
                .map_err(|e| protocol_at(t, e))?;
        }

        // augment with the fresh measurement and send
        let h_a_prev: Vec<Vector> = h_a.clone();
        for m in 0..mm {
            h_a[m] = clients[m].augment(&h_c_next[m], &y_t[m]);
            if !is_finite_vec(&h_a[m]) {
                return Err(FedgcError::Protocol {
                    round: t,
                    message: format!("client {m} state became non-finite"),
                });
            }
        }
        inbox = (0..mm)
            .map(|m| {
                let mut msg = UpMessage {
                    client: m,
                    h_c: h_c_next[m].clone(),
                    h_a: h_a[m].clone(),
                };
                config.dp.apply_up(&mut msg, &mut dp_rng);
                msg
            })
            .collect();
        let h_c_prev_round = h_c;
        h_c = h_c_next;
        let _ = h_c_prev_round;

        observer.observe(&RoundRecord {
            round: t,
            y: &y_t,
            y_prev: &y_prev,
            h_c: &h_c,
            h_a: &h_a,
            h_a_prev: &h_a_prev,
            clients,
            server,
            g_norm: &g_norm,
            local_loss: &local_loss,
            server_loss,
        });

        if t % config.log_stride == 0 || t == config.horizon {
            let err_a = pairs
                .iter()
                .map(|&(m, n)| (server.block(m, n) - world.a_block(m, n)).norm())
                .collect();
            rows.push(RunLogRow {
                round: t,
                err_a,
                local_loss: local_loss.clone(),
                server_loss,
            });
        }

        y_prev = y_t;
    }

    Ok(RunLog {
        pairs,
        rows,
        final_clients: clients.clone(),
        final_server: server.clone(),
    })
}

fn protocol_at(round: usize, e: FedgcError) -> FedgcError {
    match e {
        FedgcError::Protocol { message, .. } => FedgcError::Protocol { round, message },
        other => other,
    }
}

/// Centralized oracle baseline: least-squares fit of the off-diagonal blocks
/// from the pooled ground-truth latent states,
/// `h_m^t - A_mm h_m^{t-1} ≈ Σ_{n≠m} A_mn h_n^{t-1}`.
pub fn baseline_centralized(
    traj: &Trajectory,
    world: &BlockLtiSystem,
) -> Result<Vec<Vec<Mat>>> {
    let idx = &world.idx;
    let mm = idx.clients();
    let t_len = traj.states.len();
    if t_len < 2 {
        return Err(FedgcError::RankDeficient {
            message: "need at least two samples to regress state transitions".into(),
        });
    }
    let mut out = vec![vec![Mat::zeros(0, 0); mm]; mm];
    for m in 0..mm {
        let p_m = idx.state_dim(m);
        let others: Vec<usize> = (0..mm).filter(|&n| n != m).collect();
        let reg_dim: usize = others.iter().map(|&n| idx.state_dim(n)).sum();
        let rows = t_len - 1;
        if rows < reg_dim {
            return Err(FedgcError::RankDeficient {
                message: format!("{rows} samples for {reg_dim} regressor columns"),
            });
        }
        let mut x = Mat::zeros(rows, reg_dim);
        let mut y = Mat::zeros(rows, p_m);
        let a_mm = world.a_block(m, m);
        for t in 1..t_len {
            let h_prev = &traj.states[t - 1];
            let h_now = idx.state_segment(&traj.states[t], m);
            let target = h_now - &a_mm * idx.state_segment(h_prev, m);
            for (k, v) in target.iter().enumerate() {
                y[(t - 1, k)] = *v;
            }
            let mut col = 0;
            for &n in &others {
                let seg = idx.state_segment(h_prev, n);
                for (k, v) in seg.iter().enumerate() {
                    x[(t - 1, col + k)] = *v;
                }
                col += idx.state_dim(n);
            }
        }
        let xtx = x.transpose() * &x;
        let min_sv = xtx
            .clone()
            .svd(false, false)
            .singular_values
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        if min_sv < 1e-12 {
            return Err(FedgcError::RankDeficient {
                message: format!("regressor normal matrix min singular value {min_sv:.3e}"),
            });
        }
        let coef = xtx
            .lu()
            .solve(&(x.transpose() * &y))
            .ok_or_else(|| FedgcError::RankDeficient {
                message: "normal equations solve failed".into(),
            })?;
        // coef is reg_dim x p_m; blocks are the transposed slices
        let mut row_off = 0;
        for &n in &others {
            let p_n = idx.state_dim(n);
            out[m][n] = coef.view((row_off, 0), (p_n, p_m)).transpose().into_owned();
            row_off += p_n;
        }
    }
    Ok(out)
}

/// Independent-clients baseline: no cross-client modeling at all. The server
/// never updates and clients never consume server gradients (η2 = 0
/// regardless of config); local augmentation learning continues.
pub fn baseline_independent(
    world: &BlockLtiSystem,
    clients: &[ClientModel],
    server_template: &ServerModel,
    config: &RunConfig,
) -> Result<RunLog> {
    let mut frozen_clients: Vec<ClientModel> = clients
        .iter()
        .map(|c| {
            let mut c = c.clone();
            c.eta2 = 0.0;
            c
        })
        .collect();
    let mut frozen_server = server_template.clone();
    frozen_server.gamma = 0.0;
    run_federated(
        world,
        &mut frozen_clients,
        &mut frozen_server,
        config,
        &mut NullObserver,
    )
}

// --- wire format -----------------------------------------------------------
//
// UpMessage  = [u8 tag=1][m: u32][len: u32][f64 payload...], payload = h_c ++ h_a
// DownMessage = [u8 tag=2][m: u32][len: u32][f64 payload...], payload = grad
// all little-endian.

pub fn encode_up(msg: &UpMessage) -> Vec<u8> {
    let mut out = vec![1u8];
    out.extend((msg.client as u32).to_le_bytes());
    let len = (msg.h_c.len() + msg.h_a.len()) as u32;
    out.extend(len.to_le_bytes());
    for v in msg.h_c.iter().chain(msg.h_a.iter()) {
        out.extend(v.to_le_bytes());
    }
    out
}

pub fn encode_down(msg: &DownMessage) -> Vec<u8> {
    let mut out = vec![2u8];
    out.extend((msg.client as u32).to_le_bytes());
    out.extend((msg.grad.len() as u32).to_le_bytes());
    for v in msg.grad.iter() {
        out.extend(v.to_le_bytes());
    }
    out
}

fn decode_header(bytes: &[u8], expect_tag: u8) -> Result<(usize, usize)> {
    if bytes.len() < 9 || bytes[0] != expect_tag {
        return Err(FedgcError::Protocol {
            round: 0,
            message: format!("bad wire header (tag {:?})", bytes.first()),
        });
    }
    let client = u32::from_le_bytes(bytes[1..5].try_into().unwrap()) as usize;
    let len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    if bytes.len() != 9 + 8 * len {
        return Err(FedgcError::Protocol {
            round: 0,
            message: format!("wire length {} does not match header {}", bytes.len(), len),
        });
    }
    Ok((client, len))
}

fn decode_payload(bytes: &[u8], len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| f64::from_le_bytes(bytes[9 + 8 * i..17 + 8 * i].try_into().unwrap()))
        .collect()
}

pub fn decode_up(bytes: &[u8]) -> Result<UpMessage> {
    let (client, len) = decode_header(bytes, 1)?;
    if len % 2 != 0 {
        return Err(FedgcError::Protocol {
            round: 0,
            message: "up payload must hold two equal-length states".into(),
        });
    }
    let vals = decode_payload(bytes, len);
    let half = len / 2;
    Ok(UpMessage {
        client,
        h_c: Vector::from_vec(vals[..half].to_vec()),
        h_a: Vector::from_vec(vals[half..].to_vec()),
    })
}

pub fn decode_down(bytes: &[u8]) -> Result<DownMessage> {
    let (client, len) = decode_header(bytes, 2)?;
    Ok(DownMessage {
        client,
        grad: Vector::from_vec(decode_payload(bytes, len)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::ClientModel;
    use crate::world::{scalar_benchmark, two_client_benchmark, MeanShift};
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn clients_for(world: &BlockLtiSystem, eta1: f64, eta2: f64, ridge: f64) -> Vec<ClientModel> {
        (0..world.idx.clients())
            .map(|m| {
                ClientModel::with_riccati_gain(
                    m,
                    world.a_block(m, m),
                    world.c_block(m),
                    &world.q_block(m),
                    &world.r_block(m),
                    eta1,
                    eta2,
                    ridge,
                )
                .unwrap()
            })
            .collect()
    }

    fn server_for(world: &BlockLtiSystem, gamma: f64, lambda_s: f64) -> ServerModel {
        ServerModel::new(
            (0..world.idx.clients()).map(|m| world.a_block(m, m)).collect(),
            gamma,
            lambda_s,
            ServerUpdateMode::Exact,
        )
    }

    fn msgs(rng: &mut impl Rng, dims: &[usize]) -> Vec<UpMessage> {
        dims.iter()
            .enumerate()
            .map(|(m, &p)| UpMessage {
                client: m,
                h_c: Vector::from_fn(p, |_, _| rng.gen_range(-1.0..1.0)),
                h_a: Vector::from_fn(p, |_, _| rng.gen_range(-1.0..1.0)),
            })
            .collect()
    }

    #[test]
    fn prediction_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let world = two_client_benchmark(0.01, 0.04);
        let server = server_for(&world, 0.1, 0.0);
        let up = msgs(&mut rng, &[2, 2]);
        // all Â = 0: prediction is the local part only
        let pred = server.prediction(&up).unwrap();
        for m in 0..2 {
            assert!((pred[m].clone() - &server.a_diag[m] * &up[m].h_c).amax() < 1e-15);
        }
        // zero states: coupling vanishes
        let zero = vec![
            UpMessage { client: 0, h_c: Vector::zeros(2), h_a: Vector::zeros(2) },
            UpMessage { client: 1, h_c: Vector::zeros(2), h_a: Vector::zeros(2) },
        ];
        let pred0 = server.prediction(&zero).unwrap();
        assert!(pred0.iter().all(|v| v.amax() == 0.0));
    }

    #[test]
    fn scalar_prediction_hand_computed() {
        let world = scalar_benchmark(0.01, 0.04);
        let mut server = server_for(&world, 0.1, 0.0);
        server.set_block(1, 0, Mat::from_row_slice(1, 1, &[0.3])).unwrap();
        let up = vec![
            UpMessage { client: 0, h_c: Vector::from_vec(vec![2.0]), h_a: Vector::from_vec(vec![2.5]) },
            UpMessage { client: 1, h_c: Vector::from_vec(vec![-1.0]), h_a: Vector::from_vec(vec![-1.2]) },
        ];
        let pred = server.prediction(&up).unwrap();
        assert_abs_diff_eq!(pred[0][0], 0.8 * 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(pred[1][0], 0.8 * -1.0 + 0.3 * 2.0, epsilon = 1e-15);
    }

    #[test]
    fn loss_matches_elementwise_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let world = two_client_benchmark(0.01, 0.04);
        let mut server = server_for(&world, 0.1, 0.3);
        server
            .set_block(0, 1, Mat::from_fn(2, 2, |_, _| rng.gen_range(-1.0..1.0)))
            .unwrap();
        let up = msgs(&mut rng, &[2, 2]);
        let h_s = server.prediction(&up).unwrap();
        let h_a: Vec<Vector> = (0..2).map(|m| &server.a_diag[m] * &up[m].h_a).collect();
        let got = server.loss_from_states(&h_a, &h_s).unwrap();
        let mut want = 0.0;
        for m in 0..2 {
            for k in 0..2 {
                let diff: f64 = h_a[m][k] - h_s[m][k];
                want += diff * diff;
            }
        }
        for (m, n) in server.pairs() {
            want += 0.3 * server.block(m, n).norm_squared();
        }
        assert_abs_diff_eq!(got, want, epsilon = 1e-12);

        // identical states, no ridge -> zero
        let s0 = server_for(&world, 0.1, 0.0);
        assert_abs_diff_eq!(s0.loss_from_states(&h_a, &h_a).unwrap(), 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let world = two_client_benchmark(0.01, 0.04);
        let mut server = server_for(&world, 0.1, 0.0);
        for (m, n) in server.pairs() {
            server
                .set_block(m, n, Mat::from_fn(2, 2, |_, _| rng.gen_range(-0.5..0.5)))
                .unwrap();
        }
        let up = msgs(&mut rng, &[2, 2]);
        for m in 0..2 {
            let g = server.gradient(&up, m).unwrap().grad;
            let step = 1e-6;
            for k in 0..2 {
                let mut hi = up.clone();
                hi[m].h_a[k] += step;
                let mut lo = up.clone();
                lo[m].h_a[k] -= step;
                let fd = (server.loss(&hi).unwrap() - server.loss(&lo).unwrap()) / (2.0 * step);
                assert!(
                    (g[k] - fd).abs() / g[k].abs().max(1e-3) < 1e-6,
                    "client {m} coord {k}: {} vs {}",
                    g[k],
                    fd
                );
            }
        }
    }

    #[test]
    fn gradient_zero_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let world = two_client_benchmark(0.01, 0.04);
        let server = server_for(&world, 0.1, 0.0);
        // Â = 0 and h_a = h_c -> zero residual -> zero gradient
        let mut up = msgs(&mut rng, &[2, 2]);
        for m in 0..2 {
            up[m].h_a = up[m].h_c.clone();
        }
        for m in 0..2 {
            assert!(server.gradient(&up, m).unwrap().grad.amax() < 1e-15);
        }
    }

    #[test]
    fn update_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let world = two_client_benchmark(0.01, 0.04);
        // gamma = 0 leaves blocks unchanged
        let mut s = server_for(&world, 0.0, 0.0);
        s.set_block(0, 1, Mat::identity(2, 2)).unwrap();
        let before = s.block(0, 1).clone();
        let up = msgs(&mut rng, &[2, 2]);
        s.update(&up).unwrap();
        assert_eq!(*s.block(0, 1), before);

        // residual-zero fixed point: h_a = h_c and Â = 0 with λ_s = 0
        let mut s2 = server_for(&world, 0.2, 0.0);
        let mut up2 = msgs(&mut rng, &[2, 2]);
        for m in 0..2 {
            up2[m].h_a = up2[m].h_c.clone();
        }
        s2.update(&up2).unwrap();
        for (m, n) in s2.pairs() {
            assert!(s2.block(m, n).amax() < 1e-15);
        }
    }

    #[test]
    fn scalar_update_hand_derived() {
        // one step of dL_s/dâ by hand: â⁺ = â(1-2γ(ĥ_n² + λ_s)) + 2γ a_mm (ĥ_a-ĥ_c) ĥ_n
        let world = scalar_benchmark(0.01, 0.04);
        let (gamma, lambda_s) = (0.07, 0.11);
        let mut s = server_for(&world, gamma, lambda_s);
        s.set_block(1, 0, Mat::from_row_slice(1, 1, &[0.4])).unwrap();
        let up = vec![
            UpMessage { client: 0, h_c: Vector::from_vec(vec![1.3]), h_a: Vector::from_vec(vec![1.5]) },
            UpMessage { client: 1, h_c: Vector::from_vec(vec![-0.7]), h_a: Vector::from_vec(vec![-0.4]) },
        ];
        s.update(&up).unwrap();
        let h_n = 1.3;
        let expect = 0.4 * (1.0 - 2.0 * gamma * (h_n * h_n + lambda_s))
            + 2.0 * gamma * 0.8 * (-0.4 - -0.7) * h_n;
        assert_abs_diff_eq!(s.block(1, 0)[(0, 0)], expect, epsilon = 1e-12);
    }

    #[test]
    fn missing_message_names_client() {
        let world = two_client_benchmark(0.01, 0.04);
        let server = server_for(&world, 0.1, 0.0);
        let up = vec![UpMessage {
            client: 1,
            h_c: Vector::zeros(2),
            h_a: Vector::zeros(2),
        }];
        let err = server.prediction(&up).unwrap_err();
        assert!(err.to_string().contains("up-messages"), "{err}");

        let up2 = vec![
            UpMessage { client: 1, h_c: Vector::zeros(2), h_a: Vector::zeros(2) },
            UpMessage { client: 1, h_c: Vector::zeros(2), h_a: Vector::zeros(2) },
        ];
        let err2 = server.prediction(&up2).unwrap_err();
        assert!(err2.to_string().contains("client 0"), "{err2}");
    }

    #[test]
    fn dp_identity_and_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let policy = DpPolicy { direction: DpDirection::Both, sigma: 0.0 };
        let mut up = UpMessage {
            client: 0,
            h_c: Vector::from_vec(vec![1.0, 2.0]),
            h_a: Vector::from_vec(vec![3.0, 4.0]),
        };
        let before = up.clone();
        policy.apply_up(&mut up, &mut rng);
        assert_eq!(up, before);

        let up_only = DpPolicy { direction: DpDirection::Up, sigma: 0.5 };
        let mut down = DownMessage { client: 0, grad: Vector::from_vec(vec![1.0]) };
        let dbefore = down.clone();
        up_only.apply_down(&mut down, &mut rng);
        assert_eq!(down, dbefore, "direction=up must leave down messages untouched");
    }

    #[test]
    fn dp_noise_empirical_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let sigma = 0.3;
        let policy = DpPolicy { direction: DpDirection::Down, sigma };
        let n = 100_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let mut msg = DownMessage { client: 0, grad: Vector::zeros(1) };
            policy.apply_down(&mut msg, &mut rng);
            acc += msg.grad[0] * msg.grad[0];
        }
        let var = acc / n as f64;
        assert!(
            (var - sigma * sigma).abs() / (sigma * sigma) < 0.03,
            "empirical variance {var}"
        );
    }

    #[test]
    fn run_zero_horizon_returns_initial_models() {
        let world = scalar_benchmark(0.01, 0.04);
        let mut clients = clients_for(&world, 0.01, 0.01, 0.0);
        clients[0].theta[(0, 0)] = 0.5;
        let mut server = server_for(&world, 0.1, 0.0);
        let cfg = RunConfig::new(0, 1);
        let log = run_federated(&world, &mut clients, &mut server, &cfg, &mut NullObserver).unwrap();
        assert!(log.rows.is_empty());
        assert_eq!(log.final_clients[0].theta[(0, 0)], 0.5);
    }

    #[test]
    fn run_is_deterministic_under_seed() {
        let world = two_client_benchmark(0.01, 0.04);
        let run = |seed: u64| {
            let mut clients = clients_for(&world, 0.002, 0.01, 0.01);
            let mut server = server_for(&world, 0.05, 0.01);
            let mut cfg = RunConfig::new(50, seed);
            cfg.dp = DpPolicy { direction: DpDirection::Both, sigma: 0.01 };
            cfg.shifts = vec![MeanShift::measurement(0, Vector::from_element(world.data_dim(), 0.5))];
            run_federated(&world, &mut clients, &mut server, &cfg, &mut NullObserver)
                .unwrap()
                .to_csv()
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10));
    }

    #[test]
    fn zero_orbit_fixed_point_has_no_drift() {
        // truth-initialized blocks, zero noise, zero initial state: every
        // residual is zero so nothing moves
        let world = scalar_benchmark(0.0, 0.0);
        let mut clients: Vec<ClientModel> = (0..2)
            .map(|m| {
                ClientModel::new(
                    m,
                    world.a_block(m, m),
                    world.c_block(m),
                    Mat::zeros(1, 1),
                    0.05,
                    0.05,
                    0.0,
                )
                .unwrap()
            })
            .collect();
        let mut server = server_for(&world, 0.1, 0.0);
        server.set_block(1, 0, world.a_block(1, 0)).unwrap();
        server.set_block(0, 1, world.a_block(0, 1)).unwrap();
        let cfg = RunConfig::new(100, 3);
        let before = server.block(1, 0).clone();
        let log = run_federated(&world, &mut clients, &mut server, &cfg, &mut NullObserver).unwrap();
        assert!((log.final_server.block(1, 0) - before).amax() < 1e-8);
        assert!(log.final_clients[0].theta.amax() < 1e-8);
    }

    #[test]
    fn federated_two_client_error_decreases_smoothed() {
        // the trend claim lives on the log-iteration scale: doubling windows
        // of the smoothed error must decay strongly and never regrow by a
        // material fraction of the total drop
        let world = two_client_benchmark(0.08, 0.002);
        let t = 5000;
        let mut clients = clients_for(&world, 0.02, 0.06, 0.1);
        let mut server = server_for(&world, 0.004, 0.08);
        let mut cfg = RunConfig::new(t, 11);
        cfg.shifts = vec![crate::world::MeanShift {
            time: 0,
            offset: Vector::from_fn(world.state_dim(), |i, _| {
                0.5 * [1.0, 0.0, 0.5, 0.3][i % 4]
            }),
            target: crate::world::ShiftTarget::Latent,
        }];
        let log =
            run_federated(&world, &mut clients, &mut server, &cfg, &mut NullObserver).unwrap();
        let pair_idx = log.pairs.iter().position(|&p| p == (1, 0)).unwrap();
        let errs: Vec<f64> = log.rows.iter().map(|r| r.err_a[pair_idx]).collect();
        // window-100 moving average, then doubling windows over it
        let smoothed: Vec<f64> = (0..errs.len())
            .map(|i| {
                let lo = i.saturating_sub(99);
                errs[lo..=i].iter().sum::<f64>() / (i - lo + 1) as f64
            })
            .collect();
        let mut marks = Vec::new();
        let mut k = 1usize;
        while k < smoothed.len() {
            let hi = (2 * k).min(smoothed.len());
            marks.push(smoothed[k..hi].iter().sum::<f64>() / (hi - k) as f64);
            k *= 2;
        }
        let head = marks[0];
        let tail = *marks.last().unwrap();
        let floor = marks.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(
            tail < head * 0.35,
            "smoothed error should decay strongly: head {head}, tail {tail}"
        );
        let budget = 0.25 * (head - floor);
        let mut running_min = f64::INFINITY;
        for &v in &marks {
            assert!(
                v <= running_min + budget,
                "error regrew beyond the trend budget: {v} vs min {running_min} (budget {budget}); marks {marks:?}"
            );
            running_min = running_min.min(v);
        }
    }

    #[test]
    fn centralized_baseline_recovers_noiseless_dynamics() {
        let world = two_client_benchmark(0.05, 0.0);
        // persistent excitation from process noise; exact recovery because the
        // regression residual is exactly w which averages out... with zero
        // measurement noise and true latents the LS solution is exact only
        // when the residual w is orthogonal; use long T for < 1e-8? Instead
        // build a noiseless persistent trajectory via latent mean shifts.
        let traj = world.simulate(8000, 21, &[], None).unwrap();
        let blocks = baseline_centralized(&traj, &world).unwrap();
        // with process noise LS is consistent, tolerance reflects T
        let err = (blocks[1][0].clone() - world.a_block(1, 0)).norm();
        assert!(err < 0.05, "centralized LS error {err}");

        // noiseless but excited: a rich initial state decays through enough
        // directions for exact least squares
        let world0 = two_client_benchmark(0.0, 0.0);
        let h0 = Vector::from_vec(vec![1.0, -0.7, 0.4, 0.9]);
        let traj0 = world0.simulate(12, 1, &[], Some(&h0)).unwrap();
        let blocks0 = baseline_centralized(&traj0, &world0).unwrap();
        assert!(
            (blocks0[1][0].clone() - world0.a_block(1, 0)).norm() < 1e-8,
            "noiseless recovery error {}",
            (blocks0[1][0].clone() - world0.a_block(1, 0)).norm()
        );
    }

    #[test]
    fn centralized_baseline_rank_error_on_single_sample() {
        let world = two_client_benchmark(0.01, 0.01);
        let traj = world.simulate(1, 2, &[], None).unwrap();
        assert!(matches!(
            baseline_centralized(&traj, &world),
            Err(FedgcError::RankDeficient { .. })
        ));
    }

    #[test]
    fn independent_baseline_freezes_coupling() {
        let world = two_client_benchmark(0.02, 0.01);
        let clients = clients_for(&world, 0.004, 0.5, 0.0);
        let server = server_for(&world, 0.05, 0.0);
        let mut cfg = RunConfig::new(1500, 13);
        cfg.shifts = vec![MeanShift::measurement(
            0,
            Vector::from_element(world.data_dim(), 0.6),
        )];
        let log = baseline_independent(&world, &clients, &server, &cfg).unwrap();
        // Â_21 stays at initialization (zero); error stays at ||A_21||
        let err = (log.final_server.block(1, 0) - world.a_block(1, 0)).norm();
        assert!(err >= 0.9 * world.a_block(1, 0).norm());
        assert_eq!(log.final_clients[0].eta2, 0.0);
        // local learning still reduces the augmented loss on average
        let head: f64 = log.rows[..50].iter().map(|r| r.local_loss[1]).sum::<f64>() / 50.0;
        let n = log.rows.len();
        let tail: f64 = log.rows[n - 50..].iter().map(|r| r.local_loss[1]).sum::<f64>() / 50.0;
        assert!(tail < head, "local loss head {head} tail {tail}");
    }

    #[test]
    fn wire_round_trip() {
        let up = UpMessage {
            client: 3,
            h_c: Vector::from_vec(vec![1.5, -2.25]),
            h_a: Vector::from_vec(vec![0.5, f64::MIN_POSITIVE]),
        };
        let bytes = encode_up(&up);
        assert_eq!(bytes[0], 1);
        assert_eq!(decode_up(&bytes).unwrap(), up);

        let down = DownMessage {
            client: 1,
            grad: Vector::from_vec(vec![-7.0, 0.0, 3.5]),
        };
        let bytes = encode_down(&down);
        assert_eq!(bytes[0], 2);
        assert_eq!(decode_down(&bytes).unwrap(), down);

        assert!(decode_up(&encode_down(&down)).is_err());
    }
}
