use skt_core::experiments::entropy_budget;
use skt_core::grid::Grid;
use skt_core::model::{solve_balance_weights, Coefficients, Field, FieldKind};
use skt_core::solver::{Solver, SolverConfig};

fn setup(cells: usize, config: SolverConfig) -> (Solver, Field) {
    let grid = Grid::new(1.0, cells).unwrap();
    let coeffs = Coefficients::new(vec![vec![1.0, 1.0, 0.5], vec![1.0, 0.5, 1.0]]).unwrap();
    let pi = solve_balance_weights(&coeffs, 1e-12).unwrap();
    let p = std::f64::consts::PI;
    let u0 = Field::from_species(
        FieldKind::Density,
        vec![
            grid.sample(|x| 1.0 + 0.5 * (p * x).cos()),
            grid.sample(|x| 1.0 - 0.3 * (2.0 * p * x).cos()),
        ],
    )
    .unwrap();
    (Solver::new(grid, coeffs, pi, config).unwrap(), u0)
}

#[test]
fn expected_entropy_stays_within_budget() {
    let (solver, u0) = setup(
        32,
        SolverConfig {
            n_pop: 100.0,
            dt: 1e-4,
            t_end: 0.005,
            seed: 21,
            record_every: 1000,
            ..SolverConfig::default()
        },
    );
    let check = entropy_budget(&solver, &u0, 64, 2.0).unwrap();
    assert!(check.budget > 0.0);
    assert!(check.holds, "{check:?}");
}

#[test]
fn entropy_growth_from_flat_data_stays_within_budget() {
    // flat data has no dissipation at first, so the noise drives the growth
    let (solver, _) = setup(
        32,
        SolverConfig {
            n_pop: 50.0,
            dt: 1e-4,
            t_end: 0.01,
            seed: 8,
            record_every: 1000,
            ..SolverConfig::default()
        },
    );
    let flat = Field::constant(FieldKind::Density, 2, 32, 1.0);
    let check = entropy_budget(&solver, &flat, 64, 2.0).unwrap();
    assert!(check.mean_final_entropy > check.initial_entropy);
    assert!(check.holds, "{check:?}");
}

#[test]
fn pathwise_gap_to_deterministic_run_shrinks_like_inverse_root_population() {
    let base = SolverConfig {
        dt: 5e-5,
        t_end: 0.005,
        seed: 5,
        record_every: 1000,
        ..SolverConfig::default()
    };
    let (det, u0) = setup(
        32,
        SolverConfig {
            deterministic: true,
            ..base.clone()
        },
    );
    let reference = det.run(&u0).unwrap().last().u.clone();
    let mut rms = Vec::new();
    for n_pop in [1e2, 1e4] {
        let (solver, _) = setup(
            32,
            SolverConfig {
                n_pop,
                ..base.clone()
            },
        );
        let grid = solver.grid().clone();
        let sq: f64 = solver
            .run_replicas(&u0, 8)
            .into_iter()
            .map(|r| {
                let mut d = r.unwrap().last().u.clone();
                d.axpy(-1.0, &reference);
                (0..2)
                    .map(|i| grid.l2_norm(d.species(i)).powi(2))
                    .sum::<f64>()
            })
            .sum();
        rms.push((sq / 8.0).sqrt());
    }
    let ratio = rms[0] / rms[1];
    assert!((5.0..=20.0).contains(&ratio), "ratio {ratio}");
}

#[test]
fn same_seed_gives_identical_stochastic_runs() {
    let config = SolverConfig {
        n_pop: 1e3,
        dt: 1e-4,
        t_end: 0.002,
        seed: 99,
        record_every: 5,
        ..SolverConfig::default()
    };
    let (solver, u0) = setup(16, config.clone());
    let a = solver.run(&u0).unwrap();
    let b = solver.run(&u0).unwrap();
    assert_eq!(a.reports, b.reports);
    assert_eq!(a.last().v, b.last().v);
    let (other, _) = setup(
        16,
        SolverConfig {
            seed: 100,
            ..config
        },
    );
    let c = other.run(&u0).unwrap();
    assert_ne!(a.last().v, c.last().v);
}
