use std::fmt::Write as _;

use serde_json::json;
use tdlab_core::kernel::{kernel_regression_generalization, GeneralizationCurve, KernelSpec, RegressionTarget};
use tdlab_core::linalg::fmt_f64;
use tdlab_core::mdp::{build_random_walk_mdp, RewardSpec};
use tdlab_core::spectral::eigendecompose;

use super::Ctx;
use crate::error::Result;
use crate::output::{spearman, Artifact, CheckItem, ExperimentOutput, PlotSpec};
use crate::schema::{discounts_below_one, param, ParamType, Params, Schema};

pub fn schema() -> Schema {
    Schema {
        params: vec![
            param("n_states", ParamType::Int { min: 2 }, 50, ""),
            param("edge_prob", ParamType::Float { min: 0.0, max: 1.0, open_min: true }, 0.2, "Erdős–Rényi edge probability"),
            param("discount", ParamType::discount(), 0.99, ""),
            param("kernel_size", ParamType::count(), 20, "top eigenvectors spanning the smooth kernel"),
            param("projection_size", ParamType::count(), 20, "eigenvectors in the smooth and rough target projections"),
            param(
                "fractions",
                ParamType::FloatList { min: 0.0, open_min: true, min_len: 2 },
                json!([0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]),
                "training fractions",
            ),
            param("n_steps", ParamType::IntList { min: 1, min_len: 0 }, json!([1, 10]), "n-step return targets"),
            param("ridge", ParamType::nonnegative(), 1e-3, ""),
            param("smooth_rho_max", ParamType::Float { min: -1.0, max: 1.0, open_min: false }, -0.8, ""),
            param("rough_rho_abs_max", ParamType::unit(), 0.4, ""),
        ],
        rules: vec![
            |p| discounts_below_one(p, &["discount"]),
            |p| {
                let n = p.usize("n_states");
                let mut out = Vec::new();
                for name in ["kernel_size", "projection_size"] {
                    if p.usize(name) > n {
                        out.push(format!("parameters.{name}: exceeds n_states ({n})"));
                    }
                }
                if p.f64_list("fractions").iter().any(|&f| f > 1.0) {
                    out.push("parameters.fractions: fractions must lie in (0, 1]".into());
                }
                out
            },
        ],
    }
}

pub fn targets(p: &Params) -> Vec<RegressionTarget> {
    let k = p.usize("projection_size");
    let mut t = vec![
        RegressionTarget::VPi,
        RegressionTarget::SmoothProjection { count: k },
        RegressionTarget::RoughProjection { count: k },
    ];
    t.extend(p.usize_list("n_steps").into_iter().map(|n| RegressionTarget::NStep { n }));
    t
}

/// Seed-averaged test MSE per (target label, fraction), in input order.
pub fn mean_curves(curve: &GeneralizationCurve, targets: &[RegressionTarget], fractions: &[f64]) -> Vec<(String, Vec<f64>)> {
    targets
        .iter()
        .map(|t| {
            let label = t.label();
            let means = fractions
                .iter()
                .map(|&f| {
                    let v: Vec<f64> =
                        curve.rows.iter().filter(|r| r.target == label && r.fraction == f).map(|r| r.test_mse).collect();
                    v.iter().sum::<f64>() / v.len() as f64
                })
                .collect();
            (label, means)
        })
        .collect()
}

pub fn run(ctx: &Ctx<'_>, p: &Params, seeds: &[u64]) -> Result<ExperimentOutput> {
    let targets = targets(p);
    let fractions = p.f64_list("fractions");
    let results = ctx.per_seed(seeds, |seed| {
        let mdp = build_random_walk_mdp(p.usize("n_states"), p.f64("edge_prob"), seed, p.f64("discount"), &RewardSpec::Gaussian)?;
        let decomp = eigendecompose(&mdp)?;
        let kernel = KernelSpec::spectral_subset(&decomp, &(0..p.usize("kernel_size")).collect::<Vec<_>>())?;
        let mut rows = Vec::new();
        for &target in &targets {
            let curve = kernel_regression_generalization(&mdp, &decomp, &kernel, target, &fractions, &[seed], p.f64("ridge"))?;
            rows.extend(curve.rows);
        }
        Ok(rows)
    })?;

    let mut out = ExperimentOutput::default();
    let mut curve = GeneralizationCurve { rows: Vec::new() };
    for (seed, rows, secs) in results {
        out.seed_seconds.push((seed, secs));
        curve.rows.extend(rows);
    }
    let means = mean_curves(&curve, &targets, &fractions);
    let mut mean_csv = String::from("target,fraction,mean_test_mse\n");
    for (label, values) in &means {
        for (f, m) in fractions.iter().zip(values) {
            let _ = writeln!(mean_csv, "{label},{},{}", fmt_f64(*f), fmt_f64(*m));
        }
    }
    out.artifacts.push(Artifact::data("curves.csv", curve.to_csv()));
    out.artifacts.push(Artifact::plotted(
        "mean_curves.csv",
        mean_csv,
        PlotSpec::Line {
            title: "seed-averaged test MSE".into(),
            x: "fraction".into(),
            y: vec!["mean_test_mse".into()],
            series: Some("target".into()),
            log_y: true,
        },
    ));
    out.decisions.insert("graph".into(), json!("one Erdős–Rényi random walk per seed, resampled until connected"));
    out.decisions.insert("reward".into(), json!("independent standard normal per state"));
    out.decisions.insert("train_subsets".into(), json!("nested prefixes of one seeded permutation per seed"));
    out.decisions.insert(
        "mse_reference".into(),
        json!("the regression target itself, except V^π for n-step targets"),
    );

    let curve_of = |label: &str| means.iter().find(|(l, _)| l == label).map(|(_, v)| v.clone());
    if let Some(v) = curve_of("v_pi") {
        let rho = spearman(&fractions, &v);
        out.checks.push(CheckItem::new(
            "V^π test error falls with training fraction",
            rho < p.f64("smooth_rho_max"),
            format!("spearman {rho:.3} (threshold < {})", p.f64("smooth_rho_max")),
        ));
    }
    let rough = format!("rough_projection_{}", p.usize("projection_size"));
    if let Some(v) = curve_of(&rough) {
        let rho = spearman(&fractions, &v);
        out.checks.push(CheckItem::new(
            "rough-projection test error is flat in training fraction",
            rho.abs() < p.f64("rough_rho_abs_max"),
            format!("spearman {rho:.3} (threshold |ρ| < {})", p.f64("rough_rho_abs_max")),
        ));
    }
    let ns = p.usize_list("n_steps");
    if let (Some(&lo), Some(&hi)) = (ns.iter().min(), ns.iter().max()) {
        if lo < hi {
            let (a, b) = (curve_of(&format!("n_step_{lo}")).expect("target"), curve_of(&format!("n_step_{hi}")).expect("target"));
            let wins = a.iter().zip(&b).filter(|(x, y)| y < x).count();
            out.checks.push(CheckItem::new(
                format!("{hi}-step targets beat {lo}-step targets at every fraction"),
                wins == fractions.len(),
                format!("{wins} of {} fractions", fractions.len()),
            ));
        }
    }
    Ok(out)
}
