use nalgebra::DMatrix;
use serde_json::json;
use tdlab_core::approx::{log_csv, train_value_net, TrainConfig, TrainingData, TransitionBatch, ValueObjective};
use tdlab_core::interference::{rank_trajectory, rank_trajectory_csv, update_matrix, RankPoint, Reduction};
use tdlab_core::mdp::{gridworld, EmbeddingKind, GridReward};
use tdlab_core::net::{Activation, Head, Init, NetShape, TinyNet};
use tdlab_core::optim::{OptimizerKind, OptimizerState};

use super::{seed_dir, Ctx};
use crate::error::Result;
use crate::output::{median, Artifact, CheckItem, ExperimentOutput, PlotSpec};
use crate::schema::{discounts_below_one, param, ParamType, Params, Schema};

pub fn schema() -> Schema {
    Schema {
        params: vec![
            param("width", ParamType::Int { min: 2 }, 6, "gridworld width"),
            param("height", ParamType::Int { min: 2 }, 6, "gridworld height"),
            param("discount", ParamType::discount(), 0.9, ""),
            param("reward", ParamType::Choice(&["dense", "sparse", "zero"]), "dense", ""),
            param("zero_reward_baseline", ParamType::Bool, true, "also train on the zero-reward gridworld"),
            param("hidden", ParamType::IntList { min: 1, min_len: 1 }, json!([32, 32]), "hidden layer widths"),
            param("step_size", ParamType::positive(), 1e-2, "adam step size"),
            param("steps", ParamType::count(), 2000, "minibatch TD steps"),
            param("batch_size", ParamType::count(), 32, ""),
            param("log_size", ParamType::count(), 2000, "transitions logged under the uniform behaviour policy"),
            param("probes", ParamType::count(), 32, "probe transitions in the update matrix"),
            param("epsilon", ParamType::Float { min: 0.0, max: 1.0, open_min: true }, 0.1, "rank threshold"),
            param("checkpoints", ParamType::count(), 4, "checkpoints after initialization"),
            param("zero_delta_max", ParamType::Int { min: 0 }, 1, "largest median rank change allowed without reward"),
        ],
        rules: vec![
            |p| discounts_below_one(p, &["discount"]),
            |p| {
                let mut out = Vec::new();
                if p.usize("probes") > p.usize("log_size") {
                    out.push("parameters.probes: cannot exceed log_size".into());
                }
                if p.usize("checkpoints") > p.usize("steps") {
                    out.push("parameters.checkpoints: cannot exceed steps".into());
                }
                out
            },
        ],
    }
}

pub struct RankRun {
    pub mode: String,
    pub points: Vec<RankPoint>,
    pub log: String,
    pub initial: String,
    pub last: String,
}

impl RankRun {
    pub fn delta(&self) -> f64 {
        self.points.last().expect("final checkpoint").update_rank as f64 - self.points[0].update_rank as f64
    }
}

fn reward_for(mode: &str, seed: u64) -> GridReward {
    match mode {
        // Offset so the reward draw is not the same stream as the weights.
        "dense" => GridReward::Dense { seed: seed + 7 },
        "sparse" => GridReward::Sparse { goal: None },
        _ => GridReward::Zero,
    }
}

/// TD training on one gridworld reward mode, ranks at every checkpoint.
pub fn train_and_rank(p: &Params, mode: &str, seed: u64) -> tdlab_core::Result<RankRun> {
    let env = gridworld(p.usize("width"), p.usize("height"), &reward_for(mode, seed), p.f64("discount"))?;
    let emb = env.embeddings(EmbeddingKind::Coordinates)?;
    let behaviour = DMatrix::from_element(env.n_states(), env.n_actions(), 1.0 / env.n_actions() as f64);
    let log = TransitionBatch::sample_from_action_mdp(&env, &emb, &behaviour, p.usize("log_size"), seed)?;
    let probes = log.subsample(p.usize("probes"), seed + 100)?;
    let mut sizes = vec![emb.ncols()];
    sizes.extend(p.usize_list("hidden"));
    sizes.push(env.n_actions());
    let net = TinyNet::new(
        NetShape::new(sizes, Activation::Tanh, true)?,
        Head::QValues { n_actions: env.n_actions() },
        Init::Glorot,
        seed,
    )?;
    let opt = OptimizerState::new(OptimizerKind::adam(), p.f64("step_size"), net.parameter_count())?;
    let steps = p.usize("steps");
    let run = train_value_net(
        &net,
        TrainingData::Sampled { batch: &log, batch_size: p.usize("batch_size") },
        &ValueObjective::Td,
        &opt,
        TrainConfig { steps, checkpoint_every: Some((steps / p.usize("checkpoints")).max(1)), seed },
    )?;
    let points = rank_trajectory(&run.checkpoints, &probes, Reduction::MaxOverActions, p.f64("epsilon"))?;
    let matrix_csv = |i: usize| -> tdlab_core::Result<String> {
        let cp = &run.checkpoints[i];
        let m = update_matrix(&cp.net, &cp.optimizer, &probes, Reduction::MaxOverActions)?;
        Ok(m.to_csv())
    };
    Ok(RankRun {
        mode: mode.to_string(),
        points,
        log: log_csv(&run.log),
        initial: matrix_csv(0)?,
        last: matrix_csv(run.checkpoints.len() - 1)?,
    })
}

pub fn modes(p: &Params) -> Vec<String> {
    let mut m = vec![p.str("reward").to_string()];
    if p.bool("zero_reward_baseline") && m[0] != "zero" {
        m.push("zero".into());
    }
    m
}

pub fn run(ctx: &Ctx<'_>, p: &Params, seeds: &[u64]) -> Result<ExperimentOutput> {
    let modes = modes(p);
    let results = ctx.per_seed(seeds, |seed| ctx.par_map(&modes, |mode| train_and_rank(p, mode, seed)))?;
    let mut out = ExperimentOutput::default();
    for (seed, runs, secs) in &results {
        out.seed_seconds.push((*seed, *secs));
        for r in runs {
            let file = |name: &str| seed_dir(*seed, &format!("{}/{name}", r.mode));
            out.artifacts.push(Artifact::plotted(
                file("rank.csv"),
                rank_trajectory_csv(&r.points),
                PlotSpec::Line {
                    title: format!("update rank, {} reward, seed {seed}", r.mode),
                    x: "checkpoint_step".into(),
                    y: vec!["update_rank".into()],
                    series: None,
                    log_y: false,
                },
            ));
            out.artifacts.push(Artifact::plotted(
                file("loss.csv"),
                r.log.clone(),
                PlotSpec::Line { title: format!("TD loss, {} reward", r.mode), x: "step".into(), y: vec!["loss".into()], series: None, log_y: true },
            ));
            for (name, csv) in [("update-initial.csv", &r.initial), ("update-final.csv", &r.last)] {
                out.artifacts.push(Artifact::plotted(
                    file(name),
                    csv.clone(),
                    PlotSpec::Matrix { title: format!("update matrix, {} reward, seed {seed}", r.mode), cluster: true },
                ));
            }
        }
    }
    for mode in &modes {
        let deltas: Vec<f64> = results.iter().map(|(_, runs, _)| runs.iter().find(|r| &r.mode == mode).expect("mode").delta()).collect();
        let med = median(&deltas);
        let (name, passed) = if mode == "zero" {
            (format!("zero reward: median rank change <= {}", p.usize("zero_delta_max")), med <= p.usize("zero_delta_max") as f64)
        } else {
            (format!("{mode} reward: median rank increase > 0"), med > 0.0)
        };
        out.checks.push(CheckItem::new(name, passed, format!("median {med}, per seed {deltas:?}")));
    }
    out.decisions.insert("embedding".into(), json!("cell coordinates scaled to [-1, 1]"));
    out.decisions.insert("behaviour_policy".into(), json!("uniform random"));
    out.decisions.insert("reduction".into(), json!("max over actions"));
    out.decisions.insert("probe_seed".into(), json!("seed + 100"));
    out.decisions.insert("dense_reward_seed".into(), json!("seed + 7"));
    Ok(out)
}
