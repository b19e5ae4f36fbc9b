//! Output files. Every CSV starts with `#` lines carrying the command, schema
//! version, seed and resolved config; JSON files carry the same as fields.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::{json, Value};

use skt_core::solver::{EntropyReport, Trajectory};

use crate::config::RunConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// Shared provenance of one invocation.
pub struct Provenance {
    pub command: &'static str,
    pub seed: u64,
    pub config: Value,
}

impl Provenance {
    pub fn new(command: &'static str, seed: u64, config: &RunConfig) -> Result<Self> {
        Ok(Self {
            command,
            seed,
            config: serde_json::to_value(config)?,
        })
    }

    fn header(&self) -> String {
        format!(
            "# command: {}\n# schemaVersion: {}\n# seed: {}\n# config: {}\n",
            self.command, SCHEMA_VERSION, self.seed, self.config
        )
    }
}

pub struct OutputDir {
    root: PathBuf,
}

impl OutputDir {
    pub fn create(root: PathBuf) -> Result<Self> {
        std::fs::create_dir_all(&root)
            .with_context(|| format!("cannot create output directory {}", root.display()))?;
        Ok(Self { root })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    fn open(&self, name: &str) -> Result<BufWriter<File>> {
        let path = self.root.join(name);
        let f = File::create(&path).with_context(|| format!("cannot write {}", path.display()))?;
        Ok(BufWriter::new(f))
    }

    /// CSV with the provenance header; `rows` yields one record per line.
    pub fn csv<I>(&self, name: &str, prov: &Provenance, header: &[String], rows: I) -> Result<()>
    where
        I: IntoIterator<Item = Vec<String>>,
    {
        let mut out = self.open(name)?;
        out.write_all(prov.header().as_bytes())?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(header)?;
        for row in rows {
            w.write_record(&row)?;
        }
        w.flush()?;
        log::info!("wrote {}", self.root.join(name).display());
        Ok(())
    }

    /// JSON object with `schemaVersion`, `command`, `seed` and `config` merged
    /// in front of `body`.
    pub fn json<T: Serialize>(&self, name: &str, prov: &Provenance, body: &T) -> Result<()> {
        let mut doc = json!({
            "schemaVersion": SCHEMA_VERSION,
            "command": prov.command,
            "seed": prov.seed,
            "config": prov.config,
        });
        if let (Value::Object(head), Value::Object(rest)) = (&mut doc, serde_json::to_value(body)?)
        {
            head.extend(rest);
        }
        let mut out = self.open(name)?;
        serde_json::to_writer_pretty(&mut out, &doc)?;
        out.write_all(b"\n")?;
        out.flush()?;
        log::info!("wrote {}", self.root.join(name).display());
        Ok(())
    }
}

fn num(x: f64) -> String {
    format!("{x:e}")
}

fn indexed(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (1..=n).map(move |i| format!("{prefix}_{i}"))
}

pub fn trajectory_header(species: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend(indexed("mass", species));
    h.extend(["H", "D", "D_lb"].map(String::from));
    h.extend(indexed("min_u", species));
    h.extend(indexed("max_u", species));
    h.push("step".into());
    h.extend(indexed("u_mass", species));
    h.extend(
        [
            "H_density",
            "regularization_energy",
            "cumulative_dissipation",
            "cumulative_noise_work",
            "cumulative_correction_work",
            "cumulative_ito_work",
            "balance_residual",
            "budget_rate",
        ]
        .map(String::from),
    );
    h
}

fn trajectory_row(r: &EntropyReport) -> Vec<String> {
    let mut row = vec![num(r.t)];
    row.extend(r.mass.iter().map(|x| num(*x)));
    row.extend([r.entropy, r.dissipation, r.dissipation_lower_bound].map(num));
    row.extend(r.min_u.iter().map(|x| num(*x)));
    row.extend(r.max_u.iter().map(|x| num(*x)));
    row.push(r.step.to_string());
    row.extend(r.u_mass.iter().map(|x| num(*x)));
    row.extend(
        [
            r.entropy_density,
            r.regularization_energy,
            r.cumulative_dissipation,
            r.cumulative_noise_work,
            r.cumulative_correction_work,
            r.cumulative_ito_work,
            r.balance_residual,
            r.budget_rate,
        ]
        .map(num),
    );
    row
}

/// Reports at the recording cadence, always including the first and last.
pub fn write_trajectory(
    dir: &OutputDir,
    prov: &Provenance,
    traj: &Trajectory,
    every: usize,
) -> Result<()> {
    let last = traj.reports.len() - 1;
    let species = traj.reports[0].mass.len();
    let rows = traj
        .reports
        .iter()
        .enumerate()
        .filter(|(k, _)| k % every.max(1) == 0 || *k == last)
        .map(|(_, r)| trajectory_row(r));
    dir.csv(
        "spde_trajectory.csv",
        prov,
        &trajectory_header(species),
        rows,
    )
}

pub fn write_snapshots(
    dir: &OutputDir,
    prov: &Provenance,
    traj: &Trajectory,
    centers: &[f64],
) -> Result<()> {
    let species = traj.initial().u.species_count();
    let mut header: Vec<String> = ["t", "step", "x"].map(String::from).to_vec();
    header.extend(indexed("u", species));
    header.extend(indexed("v", species));
    let rows = traj.snapshots.iter().flat_map(|s| {
        centers.iter().enumerate().map(move |(m, x)| {
            let mut row = vec![num(s.t), s.step.to_string(), num(*x)];
            row.extend((0..species).map(|i| num(s.u.species(i)[m])));
            row.extend((0..species).map(|i| num(s.v.species(i)[m])));
            row
        })
    });
    dir.csv("spde_snapshots.csv", prov, &header, rows)
}

/// Long format: one row per replica and record time, one column per probe.
pub fn write_martingales(
    dir: &OutputDir,
    prov: &Provenance,
    labels: &[String],
    times: &[f64],
    paths: &[Vec<Vec<f64>>],
) -> Result<()> {
    let mut header = vec!["replica".to_string(), "t".to_string()];
    header.extend(labels.iter().cloned());
    let rows = paths.iter().enumerate().flat_map(|(r, probes)| {
        times.iter().enumerate().map(move |(k, t)| {
            let mut row = vec![r.to_string(), num(*t)];
            row.extend(probes.iter().map(|p| num(p[k])));
            row
        })
    });
    dir.csv("particles_martingales.csv", prov, &header, rows)
}
