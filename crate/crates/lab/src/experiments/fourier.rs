use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde_json::json;
use tdlab_core::approx::{log_csv, train_value_net, TrainConfig, TrainingData, ValueObjective};
use tdlab_core::distill::greedy_action;
use tdlab_core::interference::{fourier_spectrum, rollout_states};
use tdlab_core::linalg::fmt_f64;
use tdlab_core::mdp::{gridworld, EmbeddingKind, GridReward};
use tdlab_core::net::{Activation, Head, Init, NetShape, TinyNet};
use tdlab_core::optim::{OptimizerKind, OptimizerState};

use super::{seed_dir, Ctx};
use crate::error::Result;
use crate::output::{Artifact, CheckItem, ExperimentOutput, PlotSpec};
use crate::schema::{discounts_below_one, param, ParamType, Params, Schema};

const SERIES: [&str; 3] = ["predicted", "optimal", "reward"];

pub fn schema() -> Schema {
    Schema {
        params: vec![
            param("width", ParamType::Int { min: 2 }, 8, ""),
            param("height", ParamType::Int { min: 2 }, 8, ""),
            param("discount", ParamType::discount(), 0.9, ""),
            param("reward", ParamType::Choice(&["dense", "sparse"]), "dense", ""),
            param("hidden", ParamType::IntList { min: 1, min_len: 1 }, json!([32, 32]), ""),
            param("steps", ParamType::count(), 3000, "expected Q-learning steps"),
            param("step_size", ParamType::positive(), 1e-2, "adam step size"),
            param("rollout_length", ParamType::Int { min: 2 }, 64, "consecutive states k"),
            param("rollout_epsilon", ParamType::unit(), 0.1, "ε-greedy noise of the rollout policy"),
            param("action", ParamType::Int { min: 0 }, 0, "fixed action whose value is tracked"),
            param("parseval_tolerance", ParamType::positive(), 1e-8, "relative"),
        ],
        rules: vec![|p| discounts_below_one(p, &["discount"]), |p| {
            if p.usize("action") >= 4 {
                vec!["parameters.action: gridworlds have 4 actions".into()]
            } else {
                vec![]
            }
        }],
    }
}

pub struct FourierRun {
    pub states: Vec<usize>,
    pub series: Vec<Vec<f64>>,
    pub log: String,
}

pub fn fourier_seed(p: &Params, seed: u64) -> tdlab_core::Result<FourierRun> {
    let reward = if p.str("reward") == "dense" { GridReward::Dense { seed: seed + 7 } } else { GridReward::Sparse { goal: None } };
    let env = gridworld(p.usize("width"), p.usize("height"), &reward, p.f64("discount"))?;
    let emb = env.embeddings(EmbeddingKind::Coordinates)?;
    let (n, n_actions) = (env.n_states(), env.n_actions());
    let mut sizes = vec![emb.ncols()];
    sizes.extend(p.usize_list("hidden"));
    sizes.push(n_actions);
    let net0 = TinyNet::new(NetShape::new(sizes, Activation::Tanh, true)?, Head::QValues { n_actions }, Init::Glorot, seed)?;
    let opt = OptimizerState::new(OptimizerKind::adam(), p.f64("step_size"), net0.parameter_count())?;
    let run = train_value_net(
        &net0,
        TrainingData::Control { env: &env, embeddings: &emb },
        &ValueObjective::Td,
        &opt,
        TrainConfig { steps: p.usize("steps"), checkpoint_every: None, seed },
    )?;
    let eps = p.f64("rollout_epsilon");
    let mut policy = DMatrix::from_element(n, n_actions, eps / n_actions as f64);
    for s in 0..n {
        let x: Vec<f64> = emb.row(s).iter().copied().collect();
        policy[(s, greedy_action(&run.net, &x)?)] += 1.0 - eps;
    }
    let states = rollout_states(&env, &policy, seed as usize % n, p.usize("rollout_length"), seed)?;
    let a = p.usize("action");
    let predicted = run.net.output_column(&emb, a)?;
    let optimal = env.optimal_q(1e-10)?;
    let series = vec![
        states.iter().map(|&s| predicted[s]).collect(),
        states.iter().map(|&s| optimal[(s, a)]).collect(),
        states.iter().map(|&s| env.reward(s, a)).collect(),
    ];
    Ok(FourierRun { states, series, log: log_csv(&run.log) })
}

/// Relative gap between Σx² and Σ|X_k|²/k.
pub fn parseval_gap(series: &[f64]) -> tdlab_core::Result<f64> {
    let spec = fourier_spectrum(series, false)?;
    let time: f64 = series.iter().map(|x| x * x).sum();
    let freq: f64 = spec.magnitudes.iter().map(|m| m * m).sum::<f64>() / series.len() as f64;
    Ok((time - freq).abs() / time.max(f64::MIN_POSITIVE))
}

pub fn run(ctx: &Ctx<'_>, p: &Params, seeds: &[u64]) -> Result<ExperimentOutput> {
    let results = ctx.per_seed(seeds, |seed| fourier_seed(p, seed))?;
    let mut out = ExperimentOutput::default();
    let mut worst = 0.0f64;
    for (seed, r, secs) in &results {
        out.seed_seconds.push((*seed, *secs));
        let mut traj = String::from("t,state_index,predicted,optimal,reward\n");
        for (t, s) in r.states.iter().enumerate() {
            let _ = writeln!(
                traj,
                "{t},{s},{},{},{}",
                fmt_f64(r.series[0][t]),
                fmt_f64(r.series[1][t]),
                fmt_f64(r.series[2][t])
            );
        }
        out.artifacts.push(Artifact::plotted(
            seed_dir(*seed, "trajectory.csv"),
            traj,
            PlotSpec::Line {
                title: format!("values along the rollout, seed {seed}"),
                x: "t".into(),
                y: SERIES.iter().map(|s| s.to_string()).collect(),
                series: None,
                log_y: false,
            },
        ));
        for (file, omit_dc) in [("spectrum.csv", false), ("spectrum-no-dc.csv", true)] {
            let mut csv = String::from("series,index,magnitude\n");
            for (name, values) in SERIES.iter().zip(&r.series) {
                let spec = fourier_spectrum(values, omit_dc).map_err(ctx.wrap(Some(*seed)))?;
                for (i, m) in spec.indices.iter().zip(&spec.magnitudes) {
                    let _ = writeln!(csv, "{name},{i},{}", fmt_f64(*m));
                }
            }
            out.artifacts.push(Artifact::plotted(
                seed_dir(*seed, file),
                csv,
                PlotSpec::Line {
                    title: format!("Fourier magnitudes{}, seed {seed}", if omit_dc { " without k = 0" } else { "" }),
                    x: "index".into(),
                    y: vec!["magnitude".into()],
                    series: Some("series".into()),
                    log_y: false,
                },
            ));
        }
        out.artifacts.push(Artifact::data(seed_dir(*seed, "loss.csv"), r.log.clone()));
        for values in &r.series {
            worst = worst.max(parseval_gap(values).map_err(ctx.wrap(Some(*seed)))?);
        }
    }
    let tol = p.f64("parseval_tolerance");
    out.checks.push(CheckItem::new(
        "Parseval identity on every series",
        worst <= tol,
        format!("largest relative gap {worst:.3e} (tolerance {tol:e})"),
    ));
    out.decisions.insert("rollout_start".into(), json!("state seed mod n"));
    out.decisions.insert("optimal".into(), json!("Q* by value iteration to 1e-10"));
    Ok(out)
}
