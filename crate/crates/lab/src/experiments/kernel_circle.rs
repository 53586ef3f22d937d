use std::fmt::Write as _;

use serde_json::{json, Value};
use tdlab_core::approx::random_sign_targets;
use tdlab_core::kernel::{flow_csv, kernel_mc_flow, kernel_td_flow_split, normalized_step, FlowOptions, KernelSpec};
use tdlab_core::linalg::{fmt_f64, Integrator};
use tdlab_core::mdp::{build_circle_mdp, ValueFunction};
use tdlab_core::tabular::ValueTrajectory;

use super::{num_label, seed_dir, Ctx};
use crate::error::Result;
use crate::output::{Artifact, CheckItem, ExperimentOutput, PlotSpec};
use crate::schema::{discounts_below_one, param, ParamType, Params, Schema};

pub fn schema() -> Schema {
    Schema {
        params: vec![
            param("n_states", ParamType::Int { min: 3 }, 50, ""),
            param("train_count", ParamType::count(), 40, "train states are 0..train_count"),
            param("reward_state", ParamType::Int { min: 0 }, 25, ""),
            param("discounts", ParamType::FloatList { min: 0.0, open_min: false, min_len: 1 }, json!([0.5, 0.99]), ""),
            param(
                "lengthscales",
                ParamType::FloatList { min: 0.0, open_min: true, min_len: 1 },
                json!([0.01, 1.0, 100.0]),
                "rbf lengthscales",
            ),
            param("td_steps", ParamType::count(), 100, "Euler steps of the TD split flow"),
            param("mc_steps", ParamType::count(), 1500, "Euler steps of the MC flow"),
            param("snapshots", ParamType::count(), 100, "recorded times per flow"),
            param("divergence_cap", ParamType::positive(), 1e8, "sup-norm divergence threshold"),
            param("init_scale", ParamType::nonnegative(), 0.0, "seeded ±scale initial values; 0 starts at zero"),
        ],
        rules: vec![
            |p| discounts_below_one(p, &["discounts"]),
            |p| {
                let n = p.usize("n_states");
                let mut out = Vec::new();
                if p.usize("train_count") >= n {
                    out.push(format!("parameters.train_count: must be below n_states ({n})"));
                }
                if p.usize("reward_state") >= n {
                    out.push(format!("parameters.reward_state: must be below n_states ({n})"));
                }
                out
            },
        ],
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Rule {
    Td,
    Mc,
}

struct FlowResult {
    rule: Rule,
    discount: f64,
    lengthscale: f64,
    step: f64,
    steps: usize,
    trajectory: ValueTrajectory,
    train_mse: f64,
    test_mse: f64,
}

fn grid(steps: usize, snapshots: usize, step: f64) -> Vec<f64> {
    let stride = steps.div_ceil(snapshots.min(steps));
    let mut ks: Vec<usize> = (0..=steps).step_by(stride).collect();
    if *ks.last().expect("nonempty") != steps {
        ks.push(steps);
    }
    ks.into_iter().map(|k| k as f64 * step).collect()
}

fn file_name(r: &FlowResult) -> String {
    let rule = if r.rule == Rule::Td { "td" } else { "mc" };
    format!("flow-{rule}-g{}-l{}.csv", num_label(r.discount), num_label(r.lengthscale))
}

fn summary_csv(results: &[FlowResult]) -> String {
    let mut out = String::from("rule,discount,lengthscale,step,steps,diverged_at,final_sup_norm,train_mse,test_mse\n");
    for r in results {
        let sup = r.trajectory.last().map_or(f64::NAN, |v| v.values().amax());
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            if r.rule == Rule::Td { "td" } else { "mc" },
            fmt_f64(r.discount),
            fmt_f64(r.lengthscale),
            fmt_f64(r.step),
            r.steps,
            r.trajectory.diverged_at().map(fmt_f64).unwrap_or_default(),
            fmt_f64(sup),
            fmt_f64(r.train_mse),
            fmt_f64(r.test_mse),
        );
    }
    out
}

fn find(results: &[FlowResult], rule: Rule, discount: f64, lengthscale: f64) -> Option<&FlowResult> {
    results.iter().find(|r| r.rule == rule && r.discount == discount && r.lengthscale == lengthscale)
}

pub fn run(ctx: &Ctx<'_>, p: &Params, seeds: &[u64]) -> Result<ExperimentOutput> {
    let n = p.usize("n_states");
    let train: Vec<usize> = (0..p.usize("train_count")).collect();
    let cells: Vec<(Rule, f64, f64)> = p
        .f64_list("discounts")
        .into_iter()
        .flat_map(|g| p.f64_list("lengthscales").into_iter().flat_map(move |l| [(Rule::Td, g, l), (Rule::Mc, g, l)]))
        .collect();

    let results = ctx.per_seed(seeds, |seed| {
        let v0 = ValueFunction::new(random_sign_targets(n, seed) * p.f64("init_scale"))?;
        ctx.par_map(&cells, |&(rule, discount, lengthscale)| {
            let mdp = build_circle_mdp(n, p.usize("reward_state"), discount)?;
            let kernel = KernelSpec::rbf(lengthscale)?;
            let step = normalized_step(&kernel, &mdp, &train)?;
            let options = FlowOptions { integrator: Integrator::Euler { step }, cap: p.f64("divergence_cap") };
            let steps = if rule == Rule::Td { p.usize("td_steps") } else { p.usize("mc_steps") };
            let t_grid = grid(steps, p.usize("snapshots"), step);
            let trajectory = match rule {
                Rule::Td => kernel_td_flow_split(&v0, &mdp, &kernel, &train, &t_grid, &options)?,
                Rule::Mc => kernel_mc_flow(&v0, &mdp, &kernel, &train, &t_grid, &options)?,
            };
            let v_pi = mdp.value_function()?;
            let (train_mse, test_mse) = match trajectory.last() {
                Some(v) if trajectory.diverged_at().is_none() => {
                    let mse = |idx: &mut dyn Iterator<Item = usize>| {
                        let errs: Vec<f64> = idx.map(|s| (v.values()[s] - v_pi.values()[s]).powi(2)).collect();
                        errs.iter().sum::<f64>() / errs.len() as f64
                    };
                    (mse(&mut train.iter().copied()), mse(&mut (train.len()..n)))
                }
                _ => (f64::NAN, f64::NAN),
            };
            Ok(FlowResult { rule, discount, lengthscale, step, steps, trajectory, train_mse, test_mse })
        })
    })?;

    let mut out = ExperimentOutput::default();
    let mut steps_meta = Vec::new();
    for (seed, flows, secs) in &results {
        out.seed_seconds.push((*seed, *secs));
        for r in flows {
            out.artifacts.push(Artifact::plotted(
                seed_dir(*seed, &file_name(r)),
                flow_csv(&r.trajectory, &train),
                PlotSpec::Heat {
                    title: format!(
                        "{} flow, discount {}, lengthscale {}",
                        if r.rule == Rule::Td { "TD" } else { "MC" },
                        r.discount,
                        r.lengthscale
                    ),
                    row: "time".into(),
                    col: "state_index".into(),
                    value: "value".into(),
                },
            ));
        }
        out.artifacts.push(Artifact::data(seed_dir(*seed, "summary.csv"), summary_csv(flows)));
    }
    if let Some((_, flows, _)) = results.first() {
        for r in flows.iter().filter(|r| r.rule == Rule::Td) {
            steps_meta.push(json!({"discount": r.discount, "lengthscale": r.lengthscale, "step": r.step}));
        }
    }
    let metadata = json!({
        "distance": "chord length between points spaced one unit apart on a circle of circumference n_states",
        "step_rule": "Euler steps of size 1 / spectral norm of the train Gram matrix",
        "divergence_cap": p.f64("divergence_cap"),
        "train_states": format!("0..{}", train.len()),
        "steps": steps_meta,
    });
    out.artifacts.push(Artifact::data("metadata.json", serde_json::to_string_pretty(&metadata).expect("json") + "\n"));
    if let Value::Object(m) = metadata {
        out.decisions.extend(m);
    }

    for (seed, flows, _) in &results {
        let mut expect = |name: &str, rule: Rule, g: f64, l: f64, diverge: bool| {
            if let Some(r) = find(flows, rule, g, l) {
                let at = r.trajectory.diverged_at();
                out.checks.push(CheckItem::new(
                    format!("seed {seed}: {name}"),
                    at.is_some() == diverge,
                    match at {
                        Some(t) => format!("diverged at t = {t:.4}"),
                        None => format!(
                            "bounded, final sup norm {:.4}",
                            r.trajectory.last().map_or(f64::NAN, |v| v.values().amax())
                        ),
                    },
                ));
            }
        };
        expect("TD diverges at discount 0.99, lengthscale 100", Rule::Td, 0.99, 100.0, true);
        expect("TD stays bounded at discount 0.99, lengthscale 0.01", Rule::Td, 0.99, 0.01, false);
        expect("MC stays bounded at discount 0.99, lengthscale 100", Rule::Mc, 0.99, 100.0, false);
    }
    Ok(out)
}
