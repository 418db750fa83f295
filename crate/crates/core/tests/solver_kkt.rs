use fordn_core::geometry::{dictionary_for_basis, generate_gradient_scheme, tessellate_hemisphere, Dictionary, Direction, Eigenvalues};
use fordn_core::signal::{add_rician_noise, synthesize_signal, voxel_rng, BaselineMode, FoSet};
use fordn_core::solvers::{compute_guidance_weights, solve_nn_l1, solve_reweighted_l1, solve_weighted_l1, SolverSettings, SparseProblem};
use rand::Rng;

/// Stationarity violation of `min ‖Gf − y‖² + Σ tᵢfᵢ, f ≥ 0`, computed
/// from scratch.
fn stationarity(g: &Dictionary, y: &[f64], t: &[f64], f: &[f64]) -> f64 {
    let m = g.matrix();
    let residual: Vec<f64> = (0..g.k())
        .map(|k| (0..g.n()).map(|i| m.get(k, i) * f[i]).sum::<f64>() - y[k])
        .collect();
    (0..g.n())
        .map(|i| {
            let grad = 2.0 * (0..g.k()).map(|k| m.get(k, i) * residual[k]).sum::<f64>() + t[i];
            if f[i] > 0.0 {
                grad.abs()
            } else {
                (-grad).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

fn random_direction(rng: &mut impl Rng) -> Direction {
    loop {
        let v = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        if let Ok(d) = Direction::from_array(v) {
            return d;
        }
    }
}

#[test]
fn all_solvers_satisfy_optimality_conditions() {
    let scheme = generate_gradient_scheme(30, 1000.0, 1).unwrap();
    let basis = tessellate_hemisphere(12).unwrap();
    let g = dictionary_for_basis(&scheme, &basis, Eigenvalues::default()).unwrap();
    let settings = SolverSettings::default();
    let mut worst = [0.0f64; 3];
    for case in 0..100u64 {
        let mut rng = voxel_rng(77, case);
        let m = rng.random_range(1..=3);
        let dirs: Vec<Direction> = (0..m).map(|_| random_direction(&mut rng)).collect();
        let clean = synthesize_signal(&FoSet::equal_fractions(&dirs), Eigenvalues::default(), &scheme).unwrap();
        let y = add_rician_noise(&clean, 20.0, 1.0, BaselineMode::Clean, &mut rng).unwrap();
        let beta = rng.random_range(0.005..0.5);
        let problem = SparseProblem::new(&g, &y, beta).unwrap();

        let plain = solve_nn_l1(&problem, &settings).unwrap();
        let r0 = stationarity(&g, &y, &vec![beta; g.n()], &plain.solution);

        let guides: Vec<Direction> = (0..rng.random_range(1..=3)).map(|_| random_direction(&mut rng)).collect();
        let weights = compute_guidance_weights(&basis, &guides, rng.random_range(0.0..0.95)).unwrap();
        let guided = solve_weighted_l1(&problem, &weights, &settings).unwrap();
        let t: Vec<f64> = weights.weights.iter().map(|w| beta * w).collect();
        let r1 = stationarity(&g, &y, &t, &guided.solution);

        let reweighted = solve_reweighted_l1(&problem, 5, 1e-3, &settings).unwrap();
        let t: Vec<f64> = reweighted.weights.as_ref().unwrap().iter().map(|w| beta * w).collect();
        let r2 = stationarity(&g, &y, &t, &reweighted.solution);

        for (w, r) in worst.iter_mut().zip([r0, r1, r2]) {
            *w = w.max(r);
        }
        assert!(r0 < 1e-4 && r1 < 1e-4 && r2 < 1e-4, "case {case}: {r0:e} {r1:e} {r2:e}");
        assert!((plain.kkt_residual - r0).abs() < 1e-9);
    }
    println!("worst stationarity violation (nn-l1, weighted, reweighted): {worst:?}");
}
