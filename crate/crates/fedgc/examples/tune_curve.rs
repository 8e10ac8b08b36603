//! Dev probe: full smoothed error curve.
use fedgc::client::ClientModel;
use fedgc::linalg::Vector;
use fedgc::protocol::{run_federated, NullObserver, RunConfig, ServerModel, ServerUpdateMode};
use fedgc::world::{two_client_benchmark, MeanShift, ShiftTarget};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let gamma: f64 = args[1].parse().unwrap();
    let eta1: f64 = args[2].parse().unwrap();
    let eta2: f64 = args[3].parse().unwrap();
    let lambda_s: f64 = args[4].parse().unwrap();
    let t: usize = args[5].parse().unwrap();
    let lambda_c_arg: f64 = args.get(6).map(|v| v.parse().unwrap()).unwrap_or(0.0);
    let world = two_client_benchmark(0.08, 0.002);
    let mut clients: Vec<ClientModel> = (0..2)
        .map(|m| ClientModel::with_riccati_gain(m, world.a_block(m, m), world.c_block(m), &world.q_block(m), &world.r_block(m), eta1, eta2, lambda_c_arg).unwrap())
        .collect();
    let mut server = ServerModel::new(vec![world.a_block(0, 0), world.a_block(1, 1)], gamma, lambda_s, ServerUpdateMode::Exact);
    let mut cfg = RunConfig::new(t, 11);
    cfg.shifts = vec![MeanShift { time: 0, offset: Vector::from_fn(4, |i, _| 0.5 * [1.0, 0.0, 0.5, 0.3][i]), target: ShiftTarget::Latent }];
    let log = run_federated(&world, &mut clients, &mut server, &cfg, &mut NullObserver).unwrap();
    let pi = log.pairs.iter().position(|&p| p == (1, 0)).unwrap();
    let errs: Vec<f64> = log.rows.iter().map(|r| r.err_a[pi]).collect();
    let smoothed: Vec<f64> = errs.windows(100).step_by(100).map(|w| w.iter().sum::<f64>() / 100.0).collect();
    println!("{:?}", smoothed.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>());
}
