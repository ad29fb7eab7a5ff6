//! Multi-run experiments: seed derivation, instance handling, and the files
//! a run leaves in its output directory.

use crate::config::ExperimentConfig;
use crate::io::{self, IoError, Summary, TraceWriter};
use crate::model::{generate_instance, GenerationConfig, MarketInstance, ModelError};
use crate::sim::{self, AggregateAccumulator, RunResult, SimError, SimOptions};
use crate::solver::Matching;
use log::info;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("instance generation failed: {0}")]
    Model(#[from] ModelError),
    #[error("run {run}: {source}")]
    Sim { run: usize, source: SimError },
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{0}")]
    Config(String),
}

pub const TRACE_FILE: &str = "trace.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// Seeds for one run: the instance it plays on and its reward stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSeeds {
    pub instance: u64,
    pub run: u64,
}

/// Expands the base seed into per-run seeds. A shared instance takes the
/// first draw; with resampling every run draws its own after its run seed.
pub fn derive_seeds(seed: u64, runs: usize, resample_instance: bool) -> Vec<RunSeeds> {
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let shared = master.next_u64();
    (0..runs)
        .map(|_| {
            let run = master.next_u64();
            let instance = if resample_instance { master.next_u64() } else { shared };
            RunSeeds { instance, run }
        })
        .collect()
}

pub fn instance_for(config: &ExperimentConfig, seed: u64) -> Result<MarketInstance, ModelError> {
    generate_instance(&GenerationConfig { seed, ..config.generation.clone() })
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub summary: Summary,
    pub trace_path: PathBuf,
    pub summary_path: PathBuf,
    pub instance_paths: Vec<PathBuf>,
}

/// Runs the configured experiment and writes `trace.csv`, `summary.json`
/// and the instance file(s) into `config.out_dir`. `instance` replaces the
/// generated instance (only without resampling). Runs execute `jobs` at a
/// time; results are consumed in run order, so output never depends on
/// `jobs`. `observe` sees every finished run before it is dropped.
pub fn run_experiment(
    config: &ExperimentConfig,
    instance: Option<MarketInstance>,
    jobs: usize,
    mut observe: impl FnMut(usize, &RunResult),
) -> Result<ExperimentOutput, ExperimentError> {
    config.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
    if instance.is_some() && config.resample_instance {
        return Err(ExperimentError::Config("an explicit instance cannot be combined with resample_instance".into()));
    }
    let seeds = derive_seeds(config.seed, config.runs, config.resample_instance);
    let out = &config.out_dir;
    let options = SimOptions {
        solver: config.solver,
        regret_mode: config.regret_mode,
        ..SimOptions::default()
    };

    // A shared instance and its baseline are computed once.
    let shared = if config.resample_instance {
        None
    } else {
        let inst = match instance {
            Some(i) => i,
            None => instance_for(config, seeds[0].instance)?,
        };
        let optimal = sim::optimal_baseline(&inst, &config.weights, &config.solver)
            .map_err(|source| ExperimentError::Sim { run: 0, source })?;
        Some((inst, optimal))
    };

    let mut instance_paths = Vec::new();
    let mut fingerprints = Vec::new();
    if let Some((inst, _)) = &shared {
        let path = out.join("instance.json");
        io::write_instance(inst, &path)?;
        instance_paths.push(path);
        fingerprints.push(inst.fingerprint());
    }

    let run_one = |run: usize| -> Result<(RunResult, Option<MarketInstance>), ExperimentError> {
        let sim_err = |source| ExperimentError::Sim { run, source };
        let s = seeds[run];
        match &shared {
            Some((inst, optimal)) => {
                let optimal: Matching = optimal.clone();
                let r = sim::run_simulation_with_baseline(
                    inst,
                    &config.weights,
                    &config.reward,
                    config.horizon,
                    &options,
                    s.run,
                    optimal,
                )
                .map_err(sim_err)?;
                Ok((r, None))
            }
            None => {
                let inst = instance_for(config, s.instance)?;
                let r = sim::run_simulation(&inst, &config.weights, &config.reward, config.horizon, &options, s.run)
                    .map_err(sim_err)?;
                Ok((r, Some(inst)))
            }
        }
    };

    let trace_path = out.join(TRACE_FILE);
    let mut trace = TraceWriter::create(&trace_path)?;
    let n = config.generation.num_lenders;
    let mut acc = AggregateAccumulator::new(config.horizon as usize, n);
    let jobs = jobs.max(1);
    let mut next = 0;
    while next < config.runs {
        let batch: Vec<usize> = (next..(next + jobs).min(config.runs)).collect();
        let results: Vec<_> = if batch.len() == 1 {
            vec![run_one(batch[0])]
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = batch.iter().map(|&r| scope.spawn(move || run_one(r))).collect();
                handles.into_iter().map(|h| h.join().expect("run thread panicked")).collect()
            })
        };
        for (&run, result) in batch.iter().zip(results) {
            let (result, inst) = result?;
            if let Some(inst) = inst {
                let path = out.join(format!("instance_run{run}.json"));
                io::write_instance(&inst, &path)?;
                instance_paths.push(path);
                fingerprints.push(inst.fingerprint());
            }
            let s = result.solver_summary();
            info!(
                "run {run}: {} steps, {} nodes, {} fallbacks",
                s.steps, s.nodes, s.fallbacks
            );
            trace.write_run(run, &result)?;
            acc.push(&result).map_err(|source| ExperimentError::Sim { run, source })?;
            observe(run, &result);
        }
        next += batch.len();
    }
    trace.finish()?;

    let aggregate = acc.finish().map_err(|source| ExperimentError::Sim { run: 0, source })?;
    let summary = Summary::new(&aggregate, Some(config.echo()), fingerprints, true);
    let summary_path = out.join(SUMMARY_FILE);
    io::write_summary_json(&summary, &summary_path)?;
    Ok(ExperimentOutput { summary, trace_path, summary_path, instance_paths })
}
