use almpc_core::environment::ScenarioOverrides;
use almpc_core::eo_mpc::{self, ControlSolution};
use almpc_core::estimator::Estimator;
use almpc_core::excitation::VirtualSignalSpec;
use almpc_core::numerics::{Matrix, NumericsConfig};
use almpc_core::simulator::{default_setup, lane_seed_dbg};
use almpc_core::terminal;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let scenario = args.get(1).map(String::as_str).unwrap_or("numerical");
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(43);
    let steps: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(10);
    let loop_index: u64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0);
    let setup = default_setup(scenario, &ScenarioOverrides::default()).unwrap();
    let lp = &setup.bundle.loops[loop_index as usize];
    let cfg = NumericsConfig::default();
    let mut env = lp.env.clone();
    env.reseed(lane_seed_dbg(seed, loop_index * 8));
    let sig = VirtualSignalSpec::new(setup.control.s_max, &lp.plant).unwrap();
    let design = terminal::synthesize(&lp.plant, &lp.constraints, &setup.control.q,
        &Matrix::from_element(1, 1, setup.control.r), &sig, &cfg).unwrap();
    let mut est = Estimator::new(env.spec().clone(), env.noise_set().clone(), lp.theta0.clone());
    let mut mrng = ChaCha8Rng::seed_from_u64(lane_seed_dbg(seed, loop_index * 8 + 1));
    let mut crng = ChaCha8Rng::seed_from_u64(lane_seed_dbg(seed, loop_index * 8 + 2));
    let y_range = lp.plant.output_range(&lp.constraints, &cfg).unwrap();
    let mut x = lp.x0.clone();
    let mut prev: Option<ControlSolution> = None;
    let n = env.spec().dim();
    for k in 0..steps {
        env.advance_to(k);
        let y = lp.plant.output(&x).unwrap();
        let z = env.measure(y);
        println!("k={k} y={y:.6} z={z:.6}");
        match est.update(y, z) {
            Ok(r) => println!("  update ok reset={r} facets={}", est.theta_set().num_facets()),
            Err(e) => {
                println!("  UPDATE ERR: {e}");
                let delta = almpc_core::estimator::nonfalsified_set(est.spec(), est.noise_set(), y, z).unwrap();
                let cut = est.theta_set().intersect(&delta).unwrap();
                println!("cut A = {:?}", cut.facet_normals());
                println!("cut b = {:?}", cut.facet_offsets());
                match cut.is_empty(&cfg) {
                    Ok(em) => println!("is_empty ok: {em}"),
                    Err(e) => println!("IS_EMPTY ERR: {e}"),
                }
                let a = cut.facet_normals().clone();
                let b = cut.facet_offsets().clone();
                let m = cut.num_facets();
                for row in 0..m {
                    let mut g = Matrix::zeros(m, n);
                    let mut h = almpc_core::Vector::zeros(m);
                    for r in 0..m {
                        for j in 0..n {
                            g[(r, j)] = a[(r, j)];
                        }
                        h[r] = b[r];
                    }
                    h[row] += 1.0 + b[row].abs();
                    let d = almpc_core::Vector::from_fn(n, |j, _| a[(row, j)]);
                    let eq = Matrix::zeros(0, n);
                    let beq = almpc_core::Vector::zeros(0);
                    match almpc_core::numerics::solve_lp(&(-&d), &eq, &beq, &g, &h, &cfg) {
                        Ok(sol) => println!("row {row}: ok x={:?} iters={}", sol.x.as_slice(), sol.iterations),
                        Err(e) => println!("row {row}: ERR {e}  (c={:?})", (-&d).as_slice()),
                    }
                }
                return;
            }
        }
        let estimate = match est.moments(&lp.plant, y_range, setup.control.sample_count, &mut mrng) {
            Ok(m) => { println!("  moments ok r_bar={:.4}", m.r_bar); m }
            Err(e) => {
                println!("  MOMENTS ERR: {e}");
                let set = est.theta_set();
                println!("A = {:?}", set.facet_normals());
                println!("b = {:?}", set.facet_offsets());
                match set.chebyshev_center(&cfg) {
                    Ok((c, r)) => println!("chebyshev ok c={c:?} r={r}"),
                    Err(e) => println!("CHEBYSHEV ERR: {e}"),
                }
                match set.bounding_box(&cfg) {
                    Ok((lo, hi)) => println!("bbox ok {lo:?} {hi:?}"),
                    Err(e) => println!("BBOX ERR: {e}"),
                }
                return;
            }
        };
        let vol = if n <= 2 { est.theta_set().volume(&cfg) } else { Ok(f64::NAN) };
        match vol {
            Ok(v) => println!("  volume ok {v:.4}"),
            Err(e) => { println!("  VOLUME ERR: {e}"); return; }
        }
        let sol = match eo_mpc::solve_eo(&x, &estimate, est.spec(), &lp.plant, &lp.constraints,
            &design, &setup.control, prev.as_ref(), &mut crng, &cfg) {
            Ok(s) => s,
            Err(e) => { println!("  SOLVE ERR: {e}"); return; }
        };
        let u = sol.apply(&lp.constraints);
        println!("  solve ok u={u:.4} r_s={:.4}", sol.r_s);
        est.record_input(u);
        x = lp.plant.step(&x, u).unwrap();
        prev = Some(sol);
    }
}
