//! Dev probe for benchmark tuning.
use fedgc::client::ClientModel;
use fedgc::linalg::Vector;
use fedgc::protocol::{run_federated, NullObserver, RunConfig, ServerModel, ServerUpdateMode};
use fedgc::world::{two_client_benchmark, MeanShift, ShiftTarget};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let gamma: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.04);
    let eta1: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.004);
    let eta2: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.02);
    let lambda_s: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(0.002);
    let lambda_c: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(0.0);
    let q: f64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(0.02);
    let r: f64 = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(0.01);
    let shift: f64 = args.get(8).map(|s| s.parse().unwrap()).unwrap_or(0.6);
    let t: usize = args.get(9).map(|s| s.parse().unwrap()).unwrap_or(5000);

    let world = two_client_benchmark(q, r);
    let mut clients: Vec<ClientModel> = (0..2)
        .map(|m| {
            ClientModel::with_riccati_gain(
                m,
                world.a_block(m, m),
                world.c_block(m),
                &world.q_block(m),
                &world.r_block(m),
                eta1,
                eta2,
                lambda_c,
            )
            .unwrap()
        })
        .collect();
    let mut server = ServerModel::new(
        vec![world.a_block(0, 0), world.a_block(1, 1)],
        gamma,
        lambda_s,
        ServerUpdateMode::Exact,
    );
    let latent = args.get(10).map(|s| s == "latent").unwrap_or(false);
    let mut cfg = RunConfig::new(t, 11);
    cfg.shifts = if latent {
        let dirs: [[f64; 4]; 4] = [
            [1.0, -0.6, 0.8, 0.5],
            [-1.5, 0.3, -1.2, 0.2],
            [0.4, 1.1, 0.3, -1.3],
            [-0.2, -1.4, 1.1, 0.9],
        ];
        let epochs: usize = std::env::var("EPOCHS").ok().and_then(|v| v.parse().ok()).unwrap_or(1);
        (0..epochs)
            .map(|k| MeanShift {
                time: k * t / epochs,
                offset: Vector::from_fn(world.state_dim(), |i, _| shift * dirs[k % 4][i % 4]),
                target: ShiftTarget::Latent,
            })
            .collect()
    } else {
        vec![MeanShift::measurement(
            0,
            Vector::from_element(world.data_dim(), shift),
        )]
    };
    cfg.log_stride = 1;
    let log = run_federated(&world, &mut clients, &mut server, &cfg, &mut NullObserver).unwrap();
    let pair_idx = log.pairs.iter().position(|&p| p == (1, 0)).unwrap();
    let errs: Vec<f64> = log.rows.iter().map(|r| r.err_a[pair_idx]).collect();
    let w = 100;
    let smooth = |lo: usize| errs[lo..lo + w].iter().sum::<f64>() / w as f64;
    println!(
        "init {:.4} | p10 {:.4} p25 {:.4} p50 {:.4} p75 {:.4} end {:.4} | theta2 {:.3} a21hat {:.3} (true {:.3})",
        world.a_block(1, 0).norm(),
        smooth(errs.len() / 10),
        smooth(errs.len() / 4),
        smooth(errs.len() / 2),
        smooth(3 * errs.len() / 4),
        smooth(errs.len() - w),
        log.final_clients[1].theta.norm(),
        log.final_server.block(1, 0).norm(),
        world.a_block(1, 0).norm(),
    );
}
// (ensemble-mean probe appended via second binary below)
