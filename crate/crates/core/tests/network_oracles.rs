use fordn_core::geometry::{dictionary_for_basis, generate_gradient_scheme, tessellate_hemisphere, Dictionary, Eigenvalues};
use fordn_core::network::{backward, forward, sample_loss, Adam, UnfoldedNetParams};
use fordn_core::linalg::Matrix;
use fordn_core::solvers::{iterative_step, Threshold};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn coarse_dictionary() -> Dictionary {
    let scheme = generate_gradient_scheme(30, 1000.0, 1).unwrap();
    dictionary_for_basis(&scheme, &tessellate_hemisphere(6).unwrap(), Eigenvalues::default()).unwrap()
}

fn random_signal(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    (0..k).map(|_| rng.random_range(0.0..1.0)).collect()
}

/// `W = Gᵀ` and `S = I − GᵀG` built entry by entry.
fn classical_weights(g: &Dictionary) -> (Matrix, Matrix) {
    let m = g.matrix();
    let w = Matrix::from_fn(g.n(), g.k(), |i, k| m.get(k, i));
    let s = Matrix::from_fn(g.n(), g.n(), |i, j| {
        let gram: f64 = (0..g.k()).map(|k| m.get(k, i) * m.get(k, j)).sum();
        f64::from(u8::from(i == j)) - gram
    });
    (w, s)
}

/// `depth` hard-thresholding iterations from zero, then
/// `(f + τ)/‖f + τ‖₁`.
fn reference_forward(w: &Matrix, s: &Matrix, y: &[f64], lambda: f64, tau: f64, depth: usize) -> Vec<f64> {
    let mut f = vec![0.0; w.rows()];
    for _ in 0..depth {
        f = iterative_step(&f, y, w, s, lambda, Threshold::Hard).unwrap();
    }
    let s: f64 = f.iter().map(|v| v + tau).sum();
    f.iter().map(|v| (v + tau) / s).collect()
}

#[test]
fn classical_network_equals_thresholding_iterations() {
    let g = coarse_dictionary();
    let params = UnfoldedNetParams::classical(&g);
    let (w, s) = classical_weights(&g);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let y = random_signal(&mut rng, g.k());
        let out = forward(&params, &y).unwrap().output;
        let reference = reference_forward(&w, &s, &y, params.lambda, params.tau, params.depth);
        let diff = out.iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(diff);
    }
    assert!(worst < 1e-12, "max |Δ| = {worst:e}");
}

#[test]
fn outputs_are_distributions() {
    let g = coarse_dictionary();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut params = UnfoldedNetParams::scaled_classical(&g, 50.0);
    for pass in 0..20_000 {
        if pass % 500 == 0 {
            for v in params.w.as_mut_slice() {
                *v += rng.random_range(-0.05..0.05);
            }
            for v in params.s.as_mut_slice() {
                *v += rng.random_range(-0.01..0.01);
            }
        }
        let y: Vec<f64> = (0..g.k()).map(|_| rng.random_range(0.0..1.3)).collect();
        let out = forward(&params, &y).unwrap().output;
        assert!(out.iter().all(|&v| v >= 0.0));
        assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

/// Index of every active unit over all layers.
fn active_pattern(params: &UnfoldedNetParams, y: &[f64]) -> Vec<bool> {
    let pass = forward(params, y).unwrap();
    pass.pre.iter().flatten().map(|&a| a >= params.lambda).collect()
}

fn loss(params: &UnfoldedNetParams, y: &[f64], target: &[f64]) -> f64 {
    sample_loss(&forward(params, y).unwrap().output, target)
}

#[test]
fn backprop_matches_central_differences() {
    let g = coarse_dictionary();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut params = UnfoldedNetParams::scaled_classical(&g, 50.0);
    for v in params.w.as_mut_slice() {
        *v *= rng.random_range(0.8..1.2);
    }
    let h = 1e-5;
    let (mut checked, mut skipped) = (0, 0);
    let mut worst: f64 = 0.0;
    while checked < 150 {
        let y = random_signal(&mut rng, g.k());
        let mut target = vec![0.0; g.n()];
        target[rng.random_range(0..g.n())] = 0.6;
        target[rng.random_range(0..g.n())] += 0.4;
        let pass = forward(&params, &y).unwrap();
        let grads = backward(&params, &y, &target, &pass).unwrap();
        let base = active_pattern(&params, &y);
        for _ in 0..10 {
            let in_w = rng.random_bool(0.5);
            let (rows, cols) = if in_w { (params.n(), params.k()) } else { (params.n(), params.n()) };
            let (r, c) = (rng.random_range(0..rows), rng.random_range(0..cols));
            let analytic = if in_w { grads.dw.get(r, c) } else { grads.ds.get(r, c) };
            let perturbed = |delta: f64| {
                let mut p = params.clone();
                let m = if in_w { &mut p.w } else { &mut p.s };
                m.set(r, c, m.get(r, c) + delta);
                p
            };
            let (plus, minus) = (perturbed(h), perturbed(-h));
            // Kink filter: the thresholding pattern must not change within ±h.
            if active_pattern(&plus, &y) != base || active_pattern(&minus, &y) != base {
                skipped += 1;
                continue;
            }
            if analytic.abs() < 1e-9 {
                continue;
            }
            let numeric = (loss(&plus, &y, &target) - loss(&minus, &y, &target)) / (2.0 * h);
            let rel = (numeric - analytic).abs() / analytic.abs().max(numeric.abs());
            worst = worst.max(rel);
            assert!(rel < 1e-5, "coordinate ({r}, {c}) of {}: {analytic:e} vs {numeric:e}", if in_w { "W" } else { "S" });
            checked += 1;
        }
    }
    println!("{checked} coordinates checked, {skipped} skipped at kinks, worst rel err {worst:e}");
}

#[test]
fn adam_moves_against_a_constant_gradient() {
    let mut adam = Adam::new(3, 1e-3);
    let mut p = vec![0.0, 1.0, -2.0];
    let g = [0.5, -2.0, 0.0];
    let mut history = vec![p.clone()];
    for _ in 0..2 {
        adam.step(&mut p, &g);
        history.push(p.clone());
    }
    for t in 1..history.len() {
        assert!(history[t][0] < history[t - 1][0]);
        assert!(history[t][1] > history[t - 1][1]);
        assert_eq!(history[t][2], -2.0);
    }
    // Bias-corrected moments of a constant gradient give lr·g/(|g| + ε) per step.
    assert!((history[2][0] - (-2e-3 * 0.5 / (0.5 + 1e-8))).abs() < 1e-12);
}
