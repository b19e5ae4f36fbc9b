//! Replica experiments: fluctuation martingales of the particle system and the
//! expected-entropy budget of the SPDE.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::model::Field;
use crate::particles::{
    analytic_covariance, CovarianceQuadrature, DensitySource, GridDensityPath, InitialLaw,
    MartingaleAccumulator, ParticleConfig, ParticleEnsemble, ParticleError, ScalingCheck,
    TestFunction,
};
use crate::solver::{replica_rng, Solver, SolverError, Trajectory};
use crate::stats::{covariance, z_score, Moments};

/// One martingale `M_i(t, phi)` to record.
#[derive(Debug, Clone)]
pub struct Probe {
    pub label: String,
    pub species: usize,
    pub phi: Arc<dyn TestFunction>,
}

#[derive(Debug, Clone)]
pub struct ParticleExperiment {
    pub config: ParticleConfig,
    pub laws: Vec<InitialLaw>,
    pub dt: f64,
    pub t_end: f64,
    pub replicas: usize,
    pub seed: u64,
    /// Martingale values are stored every this many steps.
    pub record_every: usize,
}

impl ParticleExperiment {
    pub fn steps(&self) -> usize {
        ((self.t_end / self.dt) - 1e-9).ceil().max(1.0) as usize
    }

    pub fn step_size(&self) -> f64 {
        self.t_end / self.steps() as f64
    }
}

#[derive(Debug, Clone)]
pub struct MartingaleSamples {
    pub times: Vec<f64>,
    /// `paths[replica][probe][record]`, with `M = 0` at the first record.
    pub paths: Vec<Vec<Vec<f64>>>,
    /// Quadratic variation at the final time, `[replica][probe]`.
    pub quadratic_variation: Vec<Vec<f64>>,
}

impl MartingaleSamples {
    /// Final-time values of one probe across replicas.
    pub fn final_values(&self, probe: usize) -> Vec<f64> {
        self.paths
            .iter()
            .map(|p| *p[probe].last().unwrap_or(&0.0))
            .collect()
    }
}

/// Runs one replica on its own RNG stream.
pub fn martingale_replica<R: Rng + ?Sized>(
    exp: &ParticleExperiment,
    probes: &[Probe],
    rng: &mut R,
) -> Result<(Vec<Vec<f64>>, Vec<f64>), ParticleError> {
    exp.config.validate()?;
    let scaling = exp.config.check_scaling()?;
    replica(exp, probes, scaling, rng)
}

fn replica<R: Rng + ?Sized>(
    exp: &ParticleExperiment,
    probes: &[Probe],
    scaling: ScalingCheck,
    rng: &mut R,
) -> Result<(Vec<Vec<f64>>, Vec<f64>), ParticleError> {
    let mut ens = ParticleEnsemble::sample_checked(exp.config.clone(), &exp.laws, scaling, rng)?;
    let mut acc: Vec<MartingaleAccumulator> = probes
        .iter()
        .map(|p| MartingaleAccumulator::new(p.species, p.phi.clone()))
        .collect();
    let steps = exp.steps();
    let dt = exp.step_size();
    let every = exp.record_every.max(1);
    let mut paths = vec![vec![0.0]; probes.len()];
    for k in 1..=steps {
        let record = ens.step(dt, rng)?;
        for (a, path) in acc.iter_mut().zip(paths.iter_mut()) {
            a.accumulate(&record);
            if k % every == 0 || k == steps {
                path.push(a.value);
            }
        }
    }
    let qv = acc.iter().map(|a| a.quadratic_variation).collect();
    Ok((paths, qv))
}

/// All replicas, in parallel, on streams `0..replicas` of the seed.
pub fn run_martingales(
    exp: &ParticleExperiment,
    probes: &[Probe],
) -> Result<MartingaleSamples, ParticleError> {
    exp.config.validate()?;
    if !(exp.dt > 0.0 && exp.t_end > 0.0) || exp.replicas == 0 {
        return Err(ParticleError::InvalidConfig(
            "dt, tEnd and replicas must be positive".into(),
        ));
    }
    let scaling = exp.config.check_scaling()?;
    let results: Vec<_> = (0..exp.replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = replica_rng(exp.seed, r as u64);
            replica(exp, probes, scaling, &mut rng)
        })
        .collect();
    let mut paths = Vec::with_capacity(exp.replicas);
    let mut qv = Vec::with_capacity(exp.replicas);
    for r in results {
        let (p, q) = r?;
        paths.push(p);
        qv.push(q);
    }
    let steps = exp.steps();
    let dt = exp.step_size();
    let every = exp.record_every.max(1);
    let mut times = vec![0.0];
    times.extend(
        (1..=steps)
            .filter(|k| k % every == 0 || *k == steps)
            .map(|k| k as f64 * dt),
    );
    Ok(MartingaleSamples {
        times,
        paths,
        quadratic_variation: qv,
    })
}

/// Replica variance of one martingale against its analytic limit.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct CovarianceSummary {
    pub label: String,
    pub species: usize,
    pub t: f64,
    pub replicas: usize,
    pub mean: f64,
    pub mean_stderr: f64,
    pub mean_z: f64,
    pub estimate: f64,
    pub stderr: f64,
    pub analytic: f64,
    pub z: f64,
}

/// Cross-covariance of two martingales, expected to vanish across species.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct CrossSummary {
    pub first: String,
    pub second: String,
    pub estimate: f64,
    pub stderr: f64,
    pub analytic: f64,
    pub z: f64,
}

pub fn summarize(
    samples: &MartingaleSamples,
    probes: &[Probe],
    analytic: &[f64],
) -> Vec<CovarianceSummary> {
    let t = *samples.times.last().unwrap_or(&0.0);
    probes
        .iter()
        .enumerate()
        .map(|(p, probe)| {
            let values = samples.final_values(p);
            let m = Moments::of(&values).unwrap_or(Moments {
                count: values.len(),
                mean: f64::NAN,
                variance: f64::NAN,
                stderr_mean: f64::NAN,
                stderr_variance: f64::NAN,
            });
            CovarianceSummary {
                label: probe.label.clone(),
                species: probe.species,
                t,
                replicas: values.len(),
                mean: m.mean,
                mean_stderr: m.stderr_mean,
                mean_z: z_score(m.mean, 0.0, m.stderr_mean),
                estimate: m.variance,
                stderr: m.stderr_variance,
                analytic: analytic[p],
                z: z_score(m.variance, analytic[p], m.stderr_variance),
            }
        })
        .collect()
}

/// Covariances of every pair of probes on different species.
pub fn cross_species(samples: &MartingaleSamples, probes: &[Probe]) -> Vec<CrossSummary> {
    let mut out = Vec::new();
    for a in 0..probes.len() {
        for b in a + 1..probes.len() {
            if probes[a].species == probes[b].species {
                continue;
            }
            let (c, se) = covariance(&samples.final_values(a), &samples.final_values(b))
                .unwrap_or((f64::NAN, f64::NAN));
            out.push(CrossSummary {
                first: probes[a].label.clone(),
                second: probes[b].label.clone(),
                estimate: c,
                stderr: se,
                analytic: 0.0,
                z: z_score(c, 0.0, se),
            });
        }
    }
    out
}

/// Analytic variance of every probe at time `t`, with `f` the identity.
pub fn analytic_variances(
    source: &dyn DensitySource,
    config: &ParticleConfig,
    probes: &[Probe],
    t: f64,
    quad: &CovarianceQuadrature,
) -> Vec<f64> {
    let identity = |x: f64| x;
    probes
        .iter()
        .map(|p| {
            analytic_covariance(
                source,
                &config.interaction,
                &config.sigma,
                &identity,
                p.phi.as_ref(),
                p.phi.as_ref(),
                p.species,
                p.species,
                t,
                quad,
            )
        })
        .collect()
}

/// Density path of a trajectory's snapshots, with the grid placed at `origin`.
pub fn density_path(traj: &Trajectory, dx: f64, origin: f64) -> GridDensityPath {
    GridDensityPath {
        origin,
        dx,
        times: traj.snapshots.iter().map(|s| s.t).collect(),
        fields: traj.snapshots.iter().map(|s| s.u.rows()).collect(),
    }
}

/// Expected-entropy budget `E H(T) <= H(0) + ∫ E C(u) dt` over replicas.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct BudgetCheck {
    pub replicas: usize,
    pub initial_entropy: f64,
    pub mean_final_entropy: f64,
    pub stderr: f64,
    /// Replica mean of the time-integrated rate.
    pub budget: f64,
    /// `H(0) + budget`.
    pub bound: f64,
    /// Holds when `mean - confidence * stderr <= bound`.
    pub holds: bool,
}

pub fn entropy_budget(
    solver: &Solver,
    u0: &Field,
    replicas: usize,
    confidence: f64,
) -> Result<BudgetCheck, SolverError> {
    let runs = solver.run_replicas(u0, replicas);
    let mut finals = Vec::with_capacity(replicas);
    let mut budgets = Vec::with_capacity(replicas);
    let mut h0 = f64::NAN;
    for run in runs {
        let traj = run?;
        h0 = traj.reports[0].entropy;
        finals.push(traj.final_report().entropy);
        let integral: f64 = traj
            .reports
            .windows(2)
            .map(|w| 0.5 * (w[0].budget_rate + w[1].budget_rate) * (w[1].t - w[0].t))
            .sum();
        budgets.push(integral);
    }
    let m = Moments::of(&finals).ok_or_else(|| {
        SolverError::InvalidConfig("entropy budget needs at least four replicas".into())
    })?;
    let budget = budgets.iter().sum::<f64>() / budgets.len() as f64;
    let bound = h0 + budget;
    Ok(BudgetCheck {
        replicas,
        initial_entropy: h0,
        mean_final_entropy: m.mean,
        stderr: m.stderr_mean,
        budget,
        bound,
        holds: m.mean - confidence * m.stderr_mean <= bound,
    })
}
