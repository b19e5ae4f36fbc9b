use std::fmt;

use anyhow::{ensure, Context, Result};
use serde::Serialize;

use skt_core::experiments::{
    analytic_variances, cross_species, density_path, run_martingales, summarize, CovarianceSummary,
    CrossSummary, ParticleExperiment, Probe,
};
use skt_core::model::{
    check_admissibility, solve_balance_weights, AdmissibilityReport, BalanceWeights, Coefficients,
    Field, FieldKind,
};
use skt_core::noise::NoiseBasis;
use skt_core::particles::{CovarianceQuadrature, DensitySource, FreeDiffusion, InitialLaw};
use skt_core::solver::{Solver, SolverConfig, Trajectory};

use crate::config::{MeanField, ParticleSection, RunConfig};
use crate::output::{write_martingales, write_snapshots, write_trajectory, OutputDir, Provenance};

/// A failure inside the numerics, as opposed to a bad invocation.
#[derive(Debug)]
pub struct Abort(pub String);

impl fmt::Display for Abort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Abort {}

fn abort(what: &str) -> impl FnOnce(skt_core::solver::SolverError) -> anyhow::Error + '_ {
    move |e| Abort(format!("{what}: {e}")).into()
}

/// Whether the numerical checks of a command passed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail,
}

impl Verdict {
    fn from(ok: bool) -> Self {
        if ok {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }
}

fn build_solver(config: &RunConfig, solver_config: SolverConfig) -> Result<(Solver, Field)> {
    let grid = config.grid()?;
    let (coeffs, pi) = config.model()?;
    let u0 = config.initial_field(&grid, coeffs.species())?;
    let solver = Solver::new(grid, coeffs, pi, solver_config).context("solver setup")?;
    Ok((solver, u0))
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct SpdeSummary<'a> {
    deterministic: bool,
    weights: &'a [f64],
    dt: f64,
    steps: usize,
    newton_iterations: usize,
    capped_steps: usize,
    initial: &'a skt_core::solver::EntropyReport,
    last: &'a skt_core::solver::EntropyReport,
    max_mass_drift: f64,
    min_density: f64,
    min_dissipation_gap: f64,
    max_relative_balance_error: f64,
}

fn spde_summary<'a>(solver: &'a Solver, traj: &'a Trajectory) -> SpdeSummary<'a> {
    SpdeSummary {
        deterministic: solver.config().deterministic,
        weights: solver.weights().as_slice(),
        dt: traj.dt,
        steps: traj.reports.len() - 1,
        newton_iterations: traj.newton_iterations,
        capped_steps: traj.capped_steps,
        initial: &traj.reports[0],
        last: traj.final_report(),
        max_mass_drift: traj.max_mass_drift(),
        min_density: traj.min_density(),
        min_dissipation_gap: traj.min_dissipation_gap(),
        max_relative_balance_error: traj.max_relative_balance_error(),
    }
}

pub fn simulate_spde(config: &RunConfig, out: &OutputDir) -> Result<Verdict> {
    let (solver, u0) = build_solver(config, config.solver.clone())?;
    let prov = Provenance::new("simulate-spde", config.solver.seed, config)?;
    let traj = solver.run(&u0).map_err(abort("spde run"))?;
    let every = config.solver.record_every;
    write_trajectory(out, &prov, &traj, every)?;
    write_snapshots(out, &prov, &traj, &solver.grid().centers())?;
    let summary = spde_summary(&solver, &traj);
    out.json("spde_summary.json", &prov, &summary)?;
    println!(
        "t = {:.4}: H = {:.6e}, D = {:.6e}, min u = {:.4e}",
        summary.last.t, summary.last.entropy, summary.last.dissipation, summary.min_density
    );
    Ok(Verdict::Pass)
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct EntropyCheck {
    tolerance: f64,
    dissipation_slack: f64,
    /// `max_t |H(t) - H(0) + ∫D| / H(0)`.
    max_relative_balance_error: f64,
    min_dissipation_gap: f64,
    min_density: f64,
    max_mass_drift: f64,
    balance_ok: bool,
    dissipation_ok: bool,
    positivity_ok: bool,
    pass: bool,
}

/// Deterministic run; fails when the entropy balance, the dissipation bound or
/// positivity is violated.
pub fn verify_entropy(config: &RunConfig, out: &OutputDir) -> Result<Verdict> {
    let solver_config = SolverConfig {
        deterministic: true,
        ..config.solver.clone()
    };
    let (solver, u0) = build_solver(config, solver_config)?;
    let prov = Provenance::new("verify-entropy", config.solver.seed, config)?;
    let traj = solver.run(&u0).map_err(abort("deterministic run"))?;
    write_trajectory(out, &prov, &traj, config.solver.record_every)?;
    let checks = &config.checks;
    let err = traj.max_relative_balance_error();
    let gap = traj.min_dissipation_gap();
    let min_u = traj.min_density();
    let balance_ok = err <= checks.entropy_tolerance;
    let dissipation_ok = gap >= -checks.dissipation_slack;
    let positivity_ok = min_u > 0.0;
    let report = EntropyCheck {
        tolerance: checks.entropy_tolerance,
        dissipation_slack: checks.dissipation_slack,
        max_relative_balance_error: err,
        min_dissipation_gap: gap,
        min_density: min_u,
        max_mass_drift: traj.max_mass_drift(),
        balance_ok,
        dissipation_ok,
        positivity_ok,
        pass: balance_ok && dissipation_ok && positivity_ok,
    };
    out.json("entropy_check.json", &prov, &report)?;
    let mark = |ok: bool| if ok { "ok" } else { "FAIL" };
    println!(
        "entropy balance {:.3e} (tol {:.1e}) {}",
        err,
        checks.entropy_tolerance,
        mark(balance_ok)
    );
    println!("min D - D_lb {:.3e} {}", gap, mark(dissipation_ok));
    println!("min u {:.3e} {}", min_u, mark(positivity_ok));
    Ok(Verdict::from(report.pass))
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct ScalingReport {
    eta: f64,
    particles: usize,
    alpha: f64,
    delta_c: f64,
    /// `eta^{-(d + 1 + alpha)}`.
    lhs: f64,
    /// `sqrt(delta_c log N)`.
    rhs: f64,
    holds: bool,
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct CovarianceReport {
    t: f64,
    dt: f64,
    steps: usize,
    replicas: usize,
    mean_field: MeanField,
    scaling: ScalingReport,
    z_threshold: f64,
    variances: Vec<CovarianceSummary>,
    cross: Vec<CrossSummary>,
    pass: bool,
}

/// Deterministic cross-diffusion run with `a_i0 = sigma_i`, sampled from the
/// initial laws on `[origin, origin + length]`.
fn spde_mean_field(config: &RunConfig, p: &ParticleSection) -> Result<Box<dyn DensitySource>> {
    let grid = config.grid()?;
    let ens = &p.ensemble;
    let coeffs = Coefficients::from_parts(&ens.sigma, &ens.interaction)?;
    let pi = solve_balance_weights(&coeffs, skt_core::model::BALANCE_TOLERANCE)
        .context("mean-field coefficients")?;
    let rows = p
        .initial
        .iter()
        .map(|law| {
            ensure!(
                !matches!(law, InitialLaw::Point { .. }),
                "point initial law has no density"
            );
            Ok(grid.sample(|x| law.density(p.origin + x)))
        })
        .collect::<Result<Vec<_>>>()?;
    let u0 = Field::from_species(FieldKind::Density, rows)?;
    let solver_config = SolverConfig {
        deterministic: true,
        t_end: p.t_end,
        ..config.solver.clone()
    };
    let solver =
        Solver::new(grid.clone(), coeffs, pi, solver_config).context("mean-field solver")?;
    let traj = solver.run(&u0).map_err(abort("mean-field run"))?;
    Ok(Box::new(density_path(&traj, grid.dx(), p.origin)))
}

fn covariance(config: &RunConfig, out: &OutputDir, command: &'static str) -> Result<Verdict> {
    let p = config.particles()?;
    let prov = Provenance::new(command, p.seed, config)?;
    let exp = ParticleExperiment {
        config: p.ensemble.clone(),
        laws: p.initial.clone(),
        dt: p.dt,
        t_end: p.t_end,
        replicas: p.replicas,
        seed: p.seed,
        record_every: p.record_every,
    };
    let probes: Vec<Probe> = p
        .probes
        .iter()
        .map(|s| Probe {
            label: s.label(),
            species: s.species,
            phi: s.test_function.build(),
        })
        .collect();
    let ens = &p.ensemble;
    let check = ens.scaling();
    let scaling = ScalingReport {
        eta: ens.eta,
        particles: ens.particles,
        alpha: ens.alpha,
        delta_c: ens.delta_c,
        lhs: check.lhs,
        rhs: check.rhs,
        holds: check.holds,
    };

    let (source, quad): (Box<dyn DensitySource>, _) = match p.mean_field {
        MeanField::Heat => (
            Box::new(FreeDiffusion::new(p.initial.clone(), ens.sigma.clone())?),
            CovarianceQuadrature {
                x_lo: f64::MIN,
                x_hi: f64::MAX,
                x_panels: p.x_panels,
                t_panels: p.t_panels,
            },
        ),
        MeanField::Spde => (
            spde_mean_field(config, p)?,
            CovarianceQuadrature {
                x_lo: p.origin,
                x_hi: p.origin + config.grid.length,
                x_panels: p.x_panels,
                t_panels: p.t_panels,
            },
        ),
    };

    let samples = run_martingales(&exp, &probes).map_err(|e| Abort(format!("particles: {e}")))?;
    let t = *samples.times.last().unwrap_or(&0.0);
    let analytic = analytic_variances(source.as_ref(), ens, &probes, t, &quad);
    let variances = summarize(&samples, &probes, &analytic);
    let cross = cross_species(&samples, &probes);
    let z_max = config.checks.z_threshold;
    let pass = variances.iter().all(|s| s.z.abs() <= z_max);

    let labels: Vec<String> = probes.iter().map(|p| p.label.clone()).collect();
    write_martingales(out, &prov, &labels, &samples.times, &samples.paths)?;
    for s in &variances {
        println!(
            "{}: Var = {:.4e} +- {:.1e}, analytic {:.4e}, z = {:.2}",
            s.label, s.estimate, s.stderr, s.analytic, s.z
        );
    }
    for c in &cross {
        println!(
            "{} / {}: Cov = {:.3e}, z = {:.2}",
            c.first, c.second, c.estimate, c.z
        );
    }
    let report = CovarianceReport {
        t,
        dt: exp.step_size(),
        steps: exp.steps(),
        replicas: p.replicas,
        mean_field: p.mean_field,
        scaling,
        z_threshold: z_max,
        variances,
        cross,
        pass,
    };
    out.json("particles_covariance.json", &prov, &report)?;
    Ok(Verdict::from(pass))
}

/// Runs the replicas and writes the covariance summary; never fails on z.
pub fn simulate_particles(config: &RunConfig, out: &OutputDir) -> Result<Verdict> {
    covariance(config, out, "simulate-particles").map(|_| Verdict::Pass)
}

pub fn verify_covariance(config: &RunConfig, out: &OutputDir) -> Result<Verdict> {
    covariance(config, out, "verify-covariance")
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct AssumptionsReport {
    weights: Vec<f64>,
    weights_solved: bool,
    balance_residual: f64,
    modes: usize,
    smoothness: f64,
    norms: skt_core::model::BasisNorms,
    params: skt_core::model::AdmissibilityParams,
    report: AdmissibilityReport,
    scan: Vec<ScanRow>,
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct ScanRow {
    n_pop: f64,
    margins: [f64; 3],
    holds: bool,
}

/// Detailed balance plus the three smallness conditions at `solver.nPop`.
pub fn check_assumptions(config: &RunConfig, out: &OutputDir) -> Result<Verdict> {
    let prov = Provenance::new("check-assumptions", config.solver.seed, config)?;
    let grid = config.grid()?;
    let (coeffs, pi): (Coefficients, BalanceWeights) = config.model()?;
    let weights_solved = config.model.as_ref().is_some_and(|m| m.weights.is_none());
    let residual = pi.residual(&coeffs);
    let modes = config.solver.modes.unwrap_or(grid.cells() / 2).max(1);
    let basis = NoiseBasis::new(&grid, modes, config.solver.smoothness)?;
    let norms = basis.norms();
    let params = config.admissibility_params();
    let report = check_admissibility(&coeffs, &pi, norms, &params, config.solver.n_pop)?;
    let scan = config
        .admissibility
        .scan
        .iter()
        .map(|&n| {
            let r = check_admissibility(&coeffs, &pi, norms, &params, n)?;
            Ok(ScanRow {
                n_pop: n,
                margins: [0, 1, 2].map(|k| r.conditions[k].margin),
                holds: r.holds,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    println!("weights {:?} (residual {:.2e})", pi.as_slice(), residual);
    println!(
        "noise norms: sum ||e_k||^2 = {:.4e}, sum ||e_k'||^2 = {:.4e}",
        norms.value_sq_sum, norms.derivative_sq_sum
    );
    for (k, c) in report.conditions.iter().enumerate() {
        println!(
            "condition {} at N = {:e}: margin {:.4e} {}",
            k + 1,
            report.n_pop,
            c.margin,
            if c.holds { "ok" } else { "FAIL" }
        );
    }
    match report.minimal_n {
        Some(n) => println!("minimal N = {n}"),
        None => println!("no admissible N"),
    }
    let holds = report.holds;
    let doc = AssumptionsReport {
        weights: pi.as_slice().to_vec(),
        weights_solved,
        balance_residual: residual,
        modes,
        smoothness: config.solver.smoothness,
        norms,
        params,
        report,
        scan,
    };
    out.json("assumptions.json", &prov, &doc)?;
    Ok(Verdict::from(
        holds && residual <= skt_core::model::BALANCE_TOLERANCE,
    ))
}
