//! The preset experiments. Each module exposes `schema`, `default_seeds`
//! and `run`.

use std::time::Instant;

use rayon::prelude::*;

use crate::config::Experiment;
use crate::error::{LabError, Result};
use crate::output::ExperimentOutput;
use crate::schema::{Params, Schema};

pub mod distill_compare;
pub mod fourier;
pub mod generalization;
pub mod kernel_circle;
pub mod mountaincar;
pub mod rank_evolution;
pub mod scaling;

pub fn schema(experiment: Experiment) -> Schema {
    match experiment {
        Experiment::Figure1Mountaincar => mountaincar::schema(),
        Experiment::KernelCircle => kernel_circle::schema(),
        Experiment::KernelGeneralization => generalization::schema(),
        Experiment::RankEvolution => rank_evolution::schema(),
        Experiment::SecondOrderScaling => scaling::schema(),
        Experiment::DistillCompare => distill_compare::schema(),
        Experiment::FourierTrajectory => fourier::schema(),
    }
}

pub fn default_seeds(experiment: Experiment) -> Vec<u64> {
    match experiment {
        Experiment::Figure1Mountaincar | Experiment::KernelCircle => vec![0],
        Experiment::KernelGeneralization => (0..10).collect(),
        Experiment::SecondOrderScaling => (0..4).collect(),
        Experiment::RankEvolution | Experiment::DistillCompare => (0..5).collect(),
        Experiment::FourierTrajectory => (0..3).collect(),
    }
}

pub fn description(experiment: Experiment) -> &'static str {
    match experiment {
        Experiment::Figure1Mountaincar => "tabular TD sweeps on discretized MountainCar, error per eigen-subspace",
        Experiment::KernelCircle => "kernel TD and MC flows on the circle MDP over discounts and lengthscales",
        Experiment::KernelGeneralization => "kernel regression test error against training fraction",
        Experiment::RankEvolution => "update rank of a gridworld q-network over TD training",
        Experiment::SecondOrderScaling => "discrete TD against plain and corrected flows as the step size shrinks",
        Experiment::DistillCompare => "update rank and robustness of students distilled from a q-network teacher",
        Experiment::FourierTrajectory => "Fourier spectra of predicted values and rewards along rollouts",
    }
}

pub fn run(experiment: Experiment, params: &Params, seeds: &[u64], pool: &rayon::ThreadPool) -> Result<ExperimentOutput> {
    let ctx = Ctx { experiment, pool };
    match experiment {
        Experiment::Figure1Mountaincar => mountaincar::run(&ctx, params, seeds),
        Experiment::KernelCircle => kernel_circle::run(&ctx, params, seeds),
        Experiment::KernelGeneralization => generalization::run(&ctx, params, seeds),
        Experiment::RankEvolution => rank_evolution::run(&ctx, params, seeds),
        Experiment::SecondOrderScaling => scaling::run(&ctx, params, seeds),
        Experiment::DistillCompare => distill_compare::run(&ctx, params, seeds),
        Experiment::FourierTrajectory => fourier::run(&ctx, params, seeds),
    }
}

pub struct Ctx<'a> {
    experiment: Experiment,
    pool: &'a rayon::ThreadPool,
}

impl Ctx<'_> {
    pub fn wrap(&self, seed: Option<u64>) -> impl Fn(tdlab_core::Error) -> LabError + '_ {
        move |source| LabError::Experiment { experiment: self.experiment.name().into(), seed, source }
    }

    /// Runs `f` once per seed on the pool; results keep the seed order.
    pub fn per_seed<T: Send>(
        &self,
        seeds: &[u64],
        f: impl Fn(u64) -> tdlab_core::Result<T> + Sync,
    ) -> Result<Vec<(u64, T, f64)>> {
        self.pool.install(|| {
            seeds
                .par_iter()
                .map(|&seed| {
                    let start = Instant::now();
                    let value = f(seed).map_err(self.wrap(Some(seed)))?;
                    Ok((seed, value, start.elapsed().as_secs_f64()))
                })
                .collect()
        })
    }

    /// Runs independent jobs on the pool; results keep the input order.
    pub fn par_map<I: Sync, T: Send>(
        &self,
        items: &[I],
        f: impl Fn(&I) -> tdlab_core::Result<T> + Sync,
    ) -> tdlab_core::Result<Vec<T>> {
        self.pool.install(|| items.par_iter().map(&f).collect())
    }
}

pub(crate) fn seed_dir(seed: u64, file: &str) -> String {
    format!("seed-{seed}/{file}")
}

/// Compact float label for file names, e.g. `0.01`, `100`.
pub(crate) fn num_label(x: f64) -> String {
    format!("{x}")
}
