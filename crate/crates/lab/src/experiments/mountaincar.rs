use serde_json::json;
use tdlab_core::approx::random_sign_targets;
use tdlab_core::mdp::{build_mountaincar_mdp, GridPolicySpec, ValueFunction};
use tdlab_core::spectral::{eigendecompose_with, SpectralOptions};
use tdlab_core::tabular::{component_errors, discrete_td_sweep, ComponentErrorTable, EigenSubset};

use super::{seed_dir, Ctx};
use crate::error::Result;
use crate::output::{Artifact, CheckItem, ExperimentOutput, PlotSpec};
use crate::schema::{discounts_below_one, param, ParamType, Params, Schema};

pub fn schema() -> Schema {
    Schema {
        params: vec![
            param("position_bins", ParamType::Int { min: 2 }, 40, "cells along position"),
            param("velocity_bins", ParamType::Int { min: 2 }, 40, "cells along velocity"),
            param("discount", ParamType::discount(), 0.99, ""),
            param("step_size", ParamType::positive(), 0.1, "tabular sweep step size"),
            param("sweeps", ParamType::count(), 200, ""),
            param("subset_size", ParamType::count(), 25, "eigenvectors per subset"),
            param("burn_in", ParamType::Int { min: 0 }, 5, "sweeps excluded from the check"),
            param("policy", ParamType::Choice(&["energy-pumping", "uniform-random"]), "energy-pumping", ""),
            param("init_scale", ParamType::nonnegative(), 0.0, "seeded ±scale initial values; 0 starts at zero"),
            param("pass_fraction", ParamType::unit(), 0.9, "required share of sweeps with rough error below smooth"),
        ],
        rules: vec![
            |p| discounts_below_one(p, &["discount"]),
            |p| {
                let n = p.usize("position_bins") * p.usize("velocity_bins");
                if 2 * p.usize("subset_size") > n {
                    vec![format!("parameters.subset_size: two subsets of {} exceed {n} states", p.usize("subset_size"))]
                } else {
                    vec![]
                }
            },
            |p| {
                if p.usize("burn_in") >= p.usize("sweeps") {
                    vec!["parameters.burn_in: must be below sweeps".into()]
                } else {
                    vec![]
                }
            },
        ],
    }
}

/// Share of sweep indices past the burn-in where the rough subset's mean
/// normalized error is below the smooth subset's.
pub fn rough_below_smooth_fraction(table: &ComponentErrorTable, burn_in: usize) -> f64 {
    let (smooth, rough) = (&table.subsets[0].mean_component_error, &table.subsets[1].mean_component_error);
    let idx: Vec<usize> = (burn_in + 1..table.times.len()).collect();
    idx.iter().filter(|&&k| rough[k] < smooth[k]).count() as f64 / idx.len() as f64
}

pub fn run(ctx: &Ctx<'_>, p: &Params, seeds: &[u64]) -> Result<ExperimentOutput> {
    let policy = match p.str("policy") {
        "energy-pumping" => GridPolicySpec::EnergyPumping,
        _ => GridPolicySpec::UniformRandom,
    };
    let wrap = ctx.wrap(None);
    let mdp = build_mountaincar_mdp(p.usize("position_bins"), p.usize("velocity_bins"), &policy, p.f64("discount"))
        .map_err(&wrap)?;
    // MountainCar's eigenbasis is badly conditioned; errors are measured by
    // inner products with unit eigenvectors, so no cap is imposed.
    let decomp = eigendecompose_with(&mdp, &SpectralOptions { condition_cap: f64::INFINITY }).map_err(&wrap)?;
    let v_pi = mdp.value_function().map_err(&wrap)?;
    let n = mdp.n_states();
    let k = p.usize("subset_size");
    let subsets = [EigenSubset::top(k), EigenSubset::bottom(k, n)];

    let results = ctx.per_seed(seeds, |seed| {
        let v0 = ValueFunction::new(random_sign_targets(n, seed) * p.f64("init_scale"))?;
        let traj = discrete_td_sweep(&v0, &mdp, p.f64("step_size"), p.usize("sweeps"))?;
        component_errors(&traj, &decomp, &v_pi, &subsets)
    })?;

    let mut out = ExperimentOutput::default();
    out.artifacts.push(Artifact::plotted(
        "spectrum.csv",
        decomp.spectrum_csv(),
        PlotSpec::Line { title: "eigenvalue real parts".into(), x: "index".into(), y: vec!["re_lambda".into()], series: None, log_y: false },
    ));
    for (seed, table, secs) in results {
        out.seed_seconds.push((seed, secs));
        out.artifacts.push(Artifact::plotted(
            seed_dir(seed, "subsets.csv"),
            table.subsets_csv(),
            PlotSpec::Line {
                title: format!("normalized error per eigen-subspace, seed {seed}"),
                x: "time".into(),
                y: vec!["mean_component_error".into()],
                series: Some("subset".into()),
                log_y: true,
            },
        ));
        out.artifacts.push(Artifact::data(seed_dir(seed, "components.csv"), table.components_csv(&decomp)));
        let frac = rough_below_smooth_fraction(&table, p.usize("burn_in"));
        out.checks.push(CheckItem::new(
            format!("seed {seed}: rough-subset error below smooth-subset error"),
            frac >= p.f64("pass_fraction"),
            format!("fraction {frac:.3} (threshold {})", p.f64("pass_fraction")),
        ));
    }
    out.decisions.insert("eigen_condition_cap".into(), json!("none"));
    out.decisions.insert("smooth_subset".into(), json!(format!("top-{k} by real eigenvalue")));
    out.decisions.insert("rough_subset".into(), json!(format!("bottom-{k} by real eigenvalue")));
    Ok(out)
}
