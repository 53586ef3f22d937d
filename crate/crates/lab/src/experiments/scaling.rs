use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde_json::json;
use tdlab_core::approx::{verify_second_order, ScalingReport};
use tdlab_core::mdp::{build_random_walk_mdp, RewardSpec};
use tdlab_core::net::{Activation, Head, Init, NetShape, TinyNet};

use super::{seed_dir, Ctx};
use crate::error::Result;
use crate::output::{Artifact, CheckItem, ExperimentOutput, PlotSpec};
use crate::schema::{discounts_below_one, param, ParamType, Params, Schema};

pub fn schema() -> Schema {
    Schema {
        params: vec![
            param("n_states", ParamType::Int { min: 2 }, 5, ""),
            param("edge_prob", ParamType::Float { min: 0.0, max: 1.0, open_min: true }, 0.6, ""),
            param("discount", ParamType::discount(), 0.9, ""),
            param("hidden", ParamType::count(), 8, "tanh hidden units"),
            param(
                "step_sizes",
                ParamType::FloatList { min: 0.0, open_min: true, min_len: 2 },
                json!([0.04, 0.02, 0.01, 0.005]),
                "strictly descending",
            ),
            param("total_time", ParamType::positive(), 1.0, ""),
            param("inner_step", ParamType::positive(), 1e-3, "RK4 step for both flows"),
            param("slope_tolerance", ParamType::nonnegative(), 0.3, ""),
        ],
        rules: vec![
            |p| discounts_below_one(p, &["discount"]),
            |p| {
                let a = p.f64_list("step_sizes");
                let t = p.f64("total_time");
                let mut out = Vec::new();
                if a.windows(2).any(|w| w[1] >= w[0]) {
                    out.push("parameters.step_sizes: must be strictly descending".into());
                }
                for x in a {
                    let n = (t / x).round();
                    if n < 1.0 || (n * x - t).abs() > 1e-9 * t.max(1.0) {
                        out.push(format!("parameters.step_sizes: total_time {t} is not a multiple of {x}"));
                    }
                }
                out
            },
        ],
    }
}

/// State i ↦ (cos 2πi/n, sin 2πi/n).
pub fn circle_features(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, 2, |i, j| {
        let a = 2.0 * PI * i as f64 / n as f64;
        if j == 0 {
            a.cos()
        } else {
            a.sin()
        }
    })
}

pub fn scaling_for_seed(p: &Params, seed: u64) -> tdlab_core::Result<ScalingReport> {
    let n = p.usize("n_states");
    let mdp = build_random_walk_mdp(n, p.f64("edge_prob"), seed, p.f64("discount"), &RewardSpec::Gaussian)?;
    let emb = circle_features(n);
    let net = TinyNet::new(
        NetShape::new(vec![2, p.usize("hidden"), 1], Activation::Tanh, true)?,
        Head::ScalarValue,
        Init::Glorot,
        seed,
    )?;
    verify_second_order(&net, &mdp, &emb, &p.f64_list("step_sizes"), p.f64("total_time"), p.f64("inner_step"))
}

pub fn run(ctx: &Ctx<'_>, p: &Params, seeds: &[u64]) -> Result<ExperimentOutput> {
    let results = ctx.per_seed(seeds, |seed| scaling_for_seed(p, seed))?;
    let tol = p.f64("slope_tolerance");
    let mut out = ExperimentOutput::default();
    for (seed, report, secs) in results {
        out.seed_seconds.push((seed, secs));
        out.artifacts.push(Artifact::plotted(
            seed_dir(seed, "scaling.csv"),
            report.to_csv(),
            PlotSpec::Line {
                title: format!("gap against step size, seed {seed}"),
                x: "alpha".into(),
                y: vec!["gap_uncorrected".into(), "gap_corrected".into()],
                series: None,
                log_y: true,
            },
        ));
        for (label, slope, target) in
            [("corrected", report.slope_corrected, 2.0), ("uncorrected", report.slope_uncorrected, 1.0)]
        {
            out.checks.push(CheckItem::new(
                format!("seed {seed}: {label} gap slope {target} ± {tol}"),
                slope.is_some_and(|s| (s - target).abs() <= tol),
                match slope {
                    Some(s) => format!("fitted slope {s:.4}"),
                    None => "no slope (gaps vanished or diverged)".into(),
                },
            ));
        }
    }
    out.decisions.insert("features".into(), json!("state i embedded as (cos 2πi/n, sin 2πi/n)"));
    out.decisions.insert("correction_sign".into(), json!("corrected flow is f − (α/2)·f1"));
    out.decisions.insert("f1_route".into(), json!("forward-mode dual numbers"));
    out.decisions.insert("reward".into(), json!("independent standard normal per state"));
    Ok(out)
}
