//! Dev probe: scalar closed-form vs Monte-Carlo agreement.
use fedgc::client::ClientModel;
use fedgc::ensemble::{run_ensemble, EnsembleConfig};
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
    let mu: f64 = a.get(3).map(|s| s.parse().unwrap()).unwrap_or(-3.0);
    let eta1: f64 = a.get(4).map(|s| s.parse().unwrap()).unwrap_or(0.01);
    let eta2: f64 = a.get(5).map(|s| s.parse().unwrap()).unwrap_or(0.03);
    let gamma: f64 = a.get(6).map(|s| s.parse().unwrap()).unwrap_or(0.1);
    let lambda_s: f64 = a.get(7).map(|s| s.parse().unwrap()).unwrap_or(0.05);
    let prior: f64 = a.get(8).map(|s| s.parse().unwrap()).unwrap_or(0.05);
    let n: usize = a.get(9).map(|s| s.parse().unwrap()).unwrap_or(2000);
    let t: usize = a.get(10).map(|s| s.parse().unwrap()).unwrap_or(1000);

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

    // ensemble side
    let ens = EnsembleConfig {
        replicas: n, prior_sigma_theta: prior, prior_sigma_a: prior,
        base_seed: 17, stride: 50, identical_seeds: false,
    };
    let t0 = std::time::Instant::now();
    let moments = run_ensemble(&world, &clients, &server, &cfg, &ens).unwrap();
    eprintln!("ensemble took {:?}", t0.elapsed());

    // engine side driven by the mean path
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
    let rows = eng.run(&reference, 50).unwrap();

    // compare per-quantity post burn-in (rounds > 200)
    let quantities = ["sA01", "sA10", "sTh0", "sTh1", "sH0", "sH1", "vG0", "vG1",
                      "Gam01", "Gam10", "Psi01", "Psi10", "Lam0", "Lam1", "Om0", "Om1"];
    let mut worst = vec![0.0f64; quantities.len()];
    let mut at_round = vec![0usize; quantities.len()];
    let mut last_pairs: Vec<(f64, f64)> = vec![(0.0, 0.0); quantities.len()];
    use std::collections::BTreeMap;
    let mc_by_round: BTreeMap<usize, usize> = moments
        .rounds
        .iter()
        .enumerate()
        .map(|(i, r)| (r.round, i))
        .collect();
    for row in rows.iter() {
        let Some(&mi) = mc_by_round.get(&row.round) else { continue };
        let mr = &moments.rounds[mi];
        if row.round <= 200 { continue; }
        let eng_vals = [
            row.tr_sigma_a[0], row.tr_sigma_a[1],
            row.tr_sigma_theta[0], row.tr_sigma_theta[1],
            row.tr_sigma_h[0], row.tr_sigma_h[1],
            row.tr_var_g[0], row.tr_var_g[1],
            row.fro_gamma[0], row.fro_gamma[1],
            row.fro_psi[0], row.fro_psi[1],
            row.fro_lambda[0], row.fro_lambda[1],
            row.fro_omega[0], row.fro_omega[1],
        ];
        let mc_vals = [
            mr.sigma_a[0].trace(), mr.sigma_a[1].trace(),
            mr.sigma_theta[0].trace(), mr.sigma_theta[1].trace(),
            mr.sigma_h[0].trace(), mr.sigma_h[1].trace(),
            mr.var_g[0].trace(), mr.var_g[1].trace(),
            mr.gamma[0].norm(), mr.gamma[1].norm(),
            mr.psi[0].norm(), mr.psi[1].norm(),
            mr.lambda[0].norm(), mr.lambda[1].norm(),
            mr.omega[0].norm(), mr.omega[1].norm(),
        ];
        // oracle resolution: SE of a variance ~ V sqrt(2/N); SE of a scalar
        // covariance ~ sqrt((Vx Vy + C^2)/N)
        let nn = n as f64;
        let se = [
            mr.sigma_a[0].trace() * (2.0 / nn).sqrt(),
            mr.sigma_a[1].trace() * (2.0 / nn).sqrt(),
            mr.sigma_theta[0].trace() * (2.0 / nn).sqrt(),
            mr.sigma_theta[1].trace() * (2.0 / nn).sqrt(),
            mr.sigma_h[0].trace() * (2.0 / nn).sqrt(),
            mr.sigma_h[1].trace() * (2.0 / nn).sqrt(),
            mr.var_g[0].trace() * (2.0 / nn).sqrt(),
            mr.var_g[1].trace() * (2.0 / nn).sqrt(),
            ((mr.sigma_a[0].trace() * mr.sigma_h[0].trace()) / nn).sqrt(),
            ((mr.sigma_a[1].trace() * mr.sigma_h[1].trace()) / nn).sqrt(),
            ((mr.sigma_a[0].trace() * mr.sigma_theta[0].trace()) / nn).sqrt(),
            ((mr.sigma_a[1].trace() * mr.sigma_theta[1].trace()) / nn).sqrt(),
            ((mr.sigma_theta[0].trace() * mr.sigma_h[0].trace()) / nn).sqrt(),
            ((mr.sigma_theta[1].trace() * mr.sigma_h[1].trace()) / nn).sqrt(),
            ((mr.sigma_theta[0].trace() * 0.1) / nn).sqrt(),
            ((mr.sigma_theta[1].trace() * 0.1) / nn).sqrt(),
        ];
        for i in 0..quantities.len() {
            let slack = (0.25 * mc_vals[i].abs()).max(3.0 * se[i]);
            let rel = (eng_vals[i] - mc_vals[i]).abs() / slack;
            if rel > worst[i] {
                worst[i] = rel;
                at_round[i] = row.round;
                last_pairs[i] = (eng_vals[i], mc_vals[i]);
            }
        }
    }
    for i in 0..quantities.len() {
        println!(
            "{:6} worst (err/slack) {:7.3} at round {:4}  (engine {:.4e} vs mc {:.4e})  {}",
            quantities[i], worst[i], at_round[i], last_pairs[i].0, last_pairs[i].1,
            if worst[i] <= 1.0 { "OK" } else { "FAIL" }
        );
    }
}
