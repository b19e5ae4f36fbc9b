use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use skt_core::grid::Grid;
use skt_core::model::{
    entropy_density, solve_balance_weights, u_of_w, BalanceWeights, Coefficients, Field, FieldKind,
};
use skt_core::noise::{
    correction_t, g_delta, g_delta_prime, noise_divergence_term, sample_increment, sigma_delta,
    NoiseBasis,
};
use skt_core::particles::{InitialLaw, LipschitzTruncation, ParticleConfig, ParticleEnsemble};
use skt_core::regularization::{q_eps, RegularizationConfig, Regularizer};
use skt_core::solver::{dissipation_lower_bound, drift_and_dissipation};

const CELLS: usize = 24;

fn grid() -> Grid {
    Grid::new(1.0, CELLS).unwrap()
}

/// Reversible coefficients built as `a_ij = s_ij / pi_i` with `s` symmetric.
fn reversible() -> impl Strategy<Value = (Coefficients, Vec<f64>)> {
    (2usize..=4).prop_flat_map(|n| {
        (
            prop::collection::vec(0.2f64..5.0, n),
            prop::collection::vec(0.1f64..2.0, n * n),
            prop::collection::vec(0.1f64..2.0, n),
        )
            .prop_map(move |(pi, s, base)| {
                let rows = (0..n)
                    .map(|i| {
                        let mut row = vec![base[i]];
                        for j in 0..n {
                            let (a, b) = if i <= j { (i, j) } else { (j, i) };
                            row.push(s[a * n + b] / pi[i]);
                        }
                        row
                    })
                    .collect();
                (Coefficients::new(rows).unwrap(), pi)
            })
    })
}

fn total(grid: &Grid, f: &Field, i: usize) -> f64 {
    grid.integrate(f.species(i))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn balance_weights_satisfy_detailed_balance((coeffs, pi) in reversible()) {
        let found = solve_balance_weights(&coeffs, 1e-12).unwrap();
        prop_assert!(found.residual(&coeffs) <= 1e-12);
        // unique up to scale on a connected graph
        let ratio = found.get(0) / pi[0];
        for (i, p) in pi.iter().enumerate() {
            prop_assert!((found.get(i) / p - ratio).abs() <= 1e-10 * ratio);
        }
    }

    #[test]
    fn drift_conserves_mass_and_dissipates_above_lower_bound(
        (coeffs, pi) in reversible(),
        seed in any::<u64>(),
    ) {
        let grid = grid();
        let pi = BalanceWeights::new(pi).unwrap();
        let n = coeffs.species();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = random_positive(&mut rng, n);
        let w = skt_core::model::w_of_u(&pi, &u).unwrap();
        let (drift, d) = drift_and_dissipation(&grid, &coeffs, &pi, &w, &u);
        let scale: f64 = drift.values().iter().map(|v| v.abs()).sum::<f64>() * grid.dx();
        for i in 0..n {
            prop_assert!(total(&grid, &drift, i).abs() <= 1e-12 * scale.max(1.0));
        }
        let pairing: f64 = (0..n).map(|i| grid.inner(w.species(i), drift.species(i))).sum();
        prop_assert!((pairing + d).abs() <= 1e-9 * d.max(1.0));
        let lb = dissipation_lower_bound(&grid, &coeffs, &pi, &u);
        prop_assert!(d >= lb - 1e-10 * d.max(1.0), "D = {d}, D_lb = {lb}");
    }

    #[test]
    fn entropy_density_is_nonnegative(u in prop::collection::vec(0.0f64..50.0, 1..5)) {
        let pi = BalanceWeights::new(vec![1.5; u.len()]).unwrap();
        prop_assert!(entropy_density(&pi, &u).unwrap() >= 0.0);
    }

    #[test]
    fn g_delta_bounds_hold(x in 0.0f64..10.0, log_delta in -4.0f64..0.0) {
        let delta = 10f64.powf(log_delta);
        prop_assert!(g_delta(x, delta) >= 0.0);
        prop_assert!(g_delta(x, delta) <= 1.5 * x.sqrt());
        prop_assert!(g_delta_prime(x, delta).abs() <= 1.5 / delta.sqrt());
    }

    #[test]
    fn noise_and_correction_are_exact_divergences(
        (coeffs, _) in reversible(),
        seed in any::<u64>(),
        log_n in 1.0f64..6.0,
    ) {
        let grid = grid();
        let basis = NoiseBasis::with_defaults(&grid).unwrap();
        let n = coeffs.species();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = random_positive(&mut rng, n);
        let sigma = sigma_delta(&coeffs, &u, 1e-3);
        let dw = sample_increment(&mut rng, &basis, n, 1e-3);
        let noise = noise_divergence_term(&grid, &basis, &sigma, &dw, 10f64.powf(log_n)).unwrap();
        let corr = correction_t(&grid, &basis, &coeffs, &u, 1e-3);
        for f in [&noise, &corr] {
            let scale: f64 = f.values().iter().map(|v| v.abs()).sum::<f64>() * grid.dx();
            for i in 0..n {
                prop_assert!(total(&grid, f, i).abs() <= 1e-13 * scale.max(1e-3));
            }
        }
    }

    #[test]
    fn regularization_inverts_q(
        seed in any::<u64>(),
        log_eps in -3.0f64..-1.0,
    ) {
        let grid = grid();
        let eps = 10f64.powf(log_eps);
        let pi = BalanceWeights::new(vec![1.0, 2.5]).unwrap();
        let reg = Regularizer::new(&grid, RegularizationConfig::with_epsilon(eps)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = random_positive(&mut rng, 2).with_kind(FieldKind::RegularizedState);
        let sol = reg.solve(&grid, &pi, &v).unwrap();
        let mut r = q_eps(&grid, reg.operator(), &pi, &sol.w, eps);
        r.axpy(-1.0, &v);
        prop_assert!(reg.operator().dual_norm_field(&grid, &r) <= 1e-8);
        prop_assert!(u_of_w(&pi, &sol.w).min() > 0.0);
        // R preserves the mean of v through the zero mode of L
        for i in 0..2 {
            let mass_v = total(&grid, &v, i);
            let mass_q = total(&grid, &q_eps(&grid, reg.operator(), &pi, &sol.w, eps), i);
            prop_assert!((mass_v - mass_q).abs() <= 1e-8 * mass_v);
        }
    }

    #[test]
    fn truncation_stays_in_range(x in -100.0f64..100.0, eta in 0.01f64..1.0, alpha in 0.0f64..2.0) {
        let t = LipschitzTruncation::new(eta, alpha);
        let y = t.apply(x);
        prop_assert!((0.0..=t.cap).contains(&y));
        prop_assert!(t.cap >= 1.0);
    }

    #[test]
    fn local_density_is_nonnegative_and_excludes_self(seed in any::<u64>(), a in 0.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = ParticleConfig {
            particles: 30,
            sigma: vec![0.5, 0.2],
            interaction: vec![vec![a, 0.3], vec![0.1, a]],
            eta: 0.2,
            ..ParticleConfig::default()
        };
        let laws = [
            InitialLaw::Uniform { lo: 0.0, hi: 1.0 },
            InitialLaw::Gaussian { mean: 0.5, sd: 0.2 },
        ];
        let ens = ParticleEnsemble::sample(config, &laws, &mut rng).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..30 {
                    prop_assert!(ens.local_density(i, j, k) >= 0.0);
                }
            }
        }
        let single = ParticleConfig {
            particles: 1,
            interaction: vec![vec![a]],
            ..ParticleConfig::default()
        };
        let lone = ParticleEnsemble::from_positions(single, vec![vec![0.3]]).unwrap();
        prop_assert_eq!(lone.local_density(0, 0, 0), 0.0);
    }
}

fn random_positive(rng: &mut ChaCha8Rng, species: usize) -> Field {
    use rand::Rng;
    let p = std::f64::consts::PI;
    let g = grid();
    let rows = (0..species)
        .map(|_| {
            let level: f64 = rng.random_range(0.2..3.0);
            let a: f64 = rng.random_range(-0.5..0.5);
            let b: f64 = rng.random_range(-0.3..0.3);
            g.sample(|x| level * (a * (p * x).cos() + b * (3.0 * p * x).cos()).exp())
                .into_iter()
                .map(|v| v * (1.0 + 0.2 * rng.random_range(-1.0..1.0)))
                .collect()
        })
        .collect();
    Field::from_species(FieldKind::Density, rows).unwrap()
}
