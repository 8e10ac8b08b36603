//! Dev probe: engine state trajectory diagnostics.
use fedgc::client::ClientModel;
use fedgc::linalg::Vector;
use fedgc::protocol::{DpPolicy, RunConfig, ServerModel, ServerUpdateMode};
use fedgc::uncertainty::{
    mean_reference_path, CovarianceEngine, EngineConfig, OmegaMode, Rates, SigmaHMode,
};
use fedgc::world::{scalar_benchmark, MeanShift};

fn main() {
    let a: Vec<String> = std::env::args().collect();
    let q: f64 = a.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.001);
    let r: f64 = a.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.09);
    let mu: f64 = a.get(3).map(|s| s.parse().unwrap()).unwrap_or(-8.0);
    let eta1: f64 = a.get(4).map(|s| s.parse().unwrap()).unwrap_or(0.0015);
    let eta2: f64 = a.get(5).map(|s| s.parse().unwrap()).unwrap_or(0.0045);
    let gamma: f64 = a.get(6).map(|s| s.parse().unwrap()).unwrap_or(0.15);
    let lambda_s: f64 = a.get(7).map(|s| s.parse().unwrap()).unwrap_or(0.05);
    let prior: f64 = a.get(8).map(|s| s.parse().unwrap()).unwrap_or(0.05);
    let t: usize = a.get(9).map(|s| s.parse().unwrap()).unwrap_or(200);

    let world = scalar_benchmark(q, r);
    let rates = Rates { gamma, eta1, eta2, lambda_s, lambda_c: 0.0 };
    let clients: Vec<ClientModel> = (0..2)
        .map(|m| ClientModel::with_riccati_gain(
            m, world.a_block(m, m), world.c_block(m),
            &world.q_block(m), &world.r_block(m), eta1, eta2, 0.0).unwrap())
        .collect();
    let server = ServerModel::new(
        vec![world.a_block(0, 0), world.a_block(1, 1)], gamma, lambda_s, ServerUpdateMode::Exact);
    let mut cfg = RunConfig::new(t, 3);
    cfg.shifts = vec![MeanShift::measurement(0, Vector::from_vec(vec![mu, mu]))];

    let reference = mean_reference_path(&world, &clients, &server, &cfg).unwrap();
    let mom = world.stationary_moments(&cfg.shifts).unwrap();
    let sigma_y: Vec<_> = (0..2).map(|m| world.idx.data_block(&mom.sigma_y, m, m).unwrap()).collect();
    let lag: Vec<_> = (0..2).map(|m| mom.data_lag_map(&world.idx, m).unwrap()).collect();
    let ecfg = EngineConfig {
        rates,
        omega_mode: OmegaMode::Recursive,
        sigma_h_mode: SigmaHMode::TransientExact,
        dp: DpPolicy::off(),
        use_mean_path: true,
    };
    let mut eng = CovarianceEngine::new(
        world.idx.clone(),
        vec![world.a_block(0, 0), world.a_block(1, 1)],
        vec![world.c_block(0), world.c_block(1)],
        sigma_y, lag, ecfg, prior, prior,
    );
    eng.refresh_state_moments(&reference.rounds[0]).unwrap();
    for tt in 1..reference.rounds.len() {
        let prev = &reference.rounds[tt - 1];
        let now = &reference.rounds[tt];
        let st = eng.state.clone();
        let cs_gamma = st.gamma[1][0][(0, 0)].abs()
            / (st.sigma_a[1][0][(0, 0)] * st.sigma_h[1][(0, 0)]).sqrt().max(1e-300);
        let cs_psi = st.psi[1][0][(0, 0)].abs()
            / (st.sigma_a[1][0][(0, 0)] * st.sigma_theta[1][(0, 0)]).sqrt().max(1e-300);
        if tt < 20 || tt % 10 == 0 || cs_gamma > 0.95 || cs_psi > 0.95 {
            println!(
                "t {:4} y1 {:7.3} hc1 {:6.3} | sTh {:9.3e} sA {:9.3e} sH {:9.3e} | G/cs {:5.3} P/cs {:5.3} Om {:9.2e} Lam {:9.2e}",
                tt, prev.y[1][0], prev.h_c[1][0],
                st.sigma_theta[1][(0, 0)], st.sigma_a[1][0][(0, 0)], st.sigma_h[1][(0, 0)],
                cs_gamma, cs_psi, st.omega[1][(0, 0)], st.lambda[1][(0, 0)]
            );
        }
        if let Err(e) = eng.step(prev, now) {
            println!("FAILED at round {tt}: {e}");
            return;
        }
    }
    println!("ok to {}", reference.rounds.len());
}
