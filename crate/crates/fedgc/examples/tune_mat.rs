//! Dev probe: inspect converged blocks.
use fedgc::client::ClientModel;
use fedgc::linalg::Vector;
use fedgc::protocol::{run_federated, NullObserver, RunConfig, ServerModel, ServerUpdateMode};
use fedgc::world::{two_client_benchmark, MeanShift, ShiftTarget};

fn main() {
    let world = two_client_benchmark(0.08, 0.002);
    let mut clients: Vec<ClientModel> = (0..2)
        .map(|m| {
            ClientModel::with_riccati_gain(
                m, world.a_block(m, m), world.c_block(m),
                &world.q_block(m), &world.r_block(m), 0.02, 0.06, 0.0,
            ).unwrap()
        })
        .collect();
    let mut server = ServerModel::new(
        vec![world.a_block(0, 0), world.a_block(1, 1)], 0.04, 0.01, ServerUpdateMode::Exact,
    );
    let mut cfg = RunConfig::new(12000, 11);
    cfg.shifts = vec![MeanShift {
        time: 0,
        offset: Vector::from_fn(world.state_dim(), |i, _| 0.5 * [1.0, -0.6, 0.8, 0.5][i % 4]),
        target: ShiftTarget::Latent,
    }];
    run_federated(&world, &mut clients, &mut server, &cfg, &mut NullObserver).unwrap();
    println!("A21 true:\n{}", world.a_block(1, 0));
    println!("A21 hat:\n{}", server.block(1, 0));
    println!("A12 true:\n{}", world.a_block(0, 1));
    println!("A12 hat:\n{}", server.block(0, 1));
    println!("theta2:\n{}", clients[1].theta.norm());
    // effective composite the fit can express: A22 * theta2 * C1-path?
    let comp = world.a_block(1, 1) * &clients[1].theta;
    println!("A22*theta2 norm {}", comp.norm());
}
