//! Dev probe: ensemble-mean error curve for the two-client benchmark.
use fedgc::client::ClientModel;
use fedgc::ensemble::{run_ensemble, EnsembleConfig};
use fedgc::linalg::Vector;
use fedgc::protocol::{RunConfig, ServerModel, ServerUpdateMode};
use fedgc::world::{two_client_benchmark, MeanShift, ShiftTarget};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let gamma: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.04);
    let eta1: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.01);
    let eta2: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.04);
    let lambda_s: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(0.005);
    let lambda_c: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(0.0);
    let q: f64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(0.08);
    let r: f64 = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(0.002);
    let shift: f64 = args.get(8).map(|s| s.parse().unwrap()).unwrap_or(0.5);
    let t: usize = args.get(9).map(|s| s.parse().unwrap()).unwrap_or(6000);
    let n: usize = args.get(10).map(|s| s.parse().unwrap()).unwrap_or(50);

    let world = two_client_benchmark(q, r);
    let clients: Vec<ClientModel> = (0..2)
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
    let server = ServerModel::new(
        vec![world.a_block(0, 0), world.a_block(1, 1)],
        gamma,
        lambda_s,
        ServerUpdateMode::Exact,
    );
    let mut cfg = RunConfig::new(t, 11);
    // latent mean aligned with the coupling's input direction
    cfg.shifts = vec![MeanShift {
        time: 0,
        offset: Vector::from_fn(world.state_dim(), |i, _| {
            shift * [1.0, 0.0, 0.5, 0.3][i % 4]
        }),
        target: ShiftTarget::Latent,
    }];
    let ens = EnsembleConfig {
        replicas: n,
        prior_sigma_theta: 1e-2,
        prior_sigma_a: 1e-2,
        base_seed: 7,
        stride: (t / 20).max(1),
        identical_seeds: false,
    };
    let moments = run_ensemble(&world, &clients, &server, &cfg, &ens).unwrap();
    let curves = moments.error_curves(&world);
    let pair_idx = moments.pairs.iter().position(|&p| p == (1, 0)).unwrap();
    let c = &curves[pair_idx];
    println!(
        "mean-error curve: start {:.4} .. {:?} .. end {:.4} | init {:.4} | tr_sigma_a21 end {:.3e}",
        c[0],
        c.iter().step_by(4).map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
        c[c.len() - 1],
        world.a_block(1, 0).norm(),
        moments.rounds.last().unwrap().sigma_a[pair_idx].trace(),
    );
}
