use serde_json::json;
use tdlab_core::approx::{log_csv, train_value_net, TrainConfig, TrainingData, ValueObjective};
use tdlab_core::distill::{
    interpolation_probe, metrics_csv, random_state_pairs, robustness_probe, run_distillation, run_double_q,
    student_update_rank, DistillConfig, DistillKind, DistillObjective, DistillProbes, MetricsRow, TeacherDataset,
};
use tdlab_core::mdp::{gridworld, EmbeddingKind, GridReward};
use tdlab_core::net::{Activation, Head, Init, NetShape, TinyNet};
use tdlab_core::optim::{OptimizerKind, OptimizerState};

use super::{seed_dir, Ctx};
use crate::error::Result;
use crate::output::{median, Artifact, CheckItem, ExperimentOutput, PlotSpec};
use crate::schema::{discounts_below_one, param, ParamType, Params, Schema};

pub const OBJECTIVES: [&str; 5] = ["q-regression", "qa-regression", "advantage-regression", "behaviour-cloning", "double-q"];

pub fn schema() -> Schema {
    Schema {
        params: vec![
            param("width", ParamType::Int { min: 2 }, 6, ""),
            param("height", ParamType::Int { min: 2 }, 6, ""),
            param("discount", ParamType::discount(), 0.9, ""),
            param("reward", ParamType::Choice(&["dense", "sparse"]), "dense", ""),
            param("hidden", ParamType::IntList { min: 1, min_len: 1 }, json!([32, 32]), ""),
            param("teacher_steps", ParamType::count(), 3000, "expected Q-learning steps for the teacher"),
            param("dataset_size", ParamType::count(), 2000, ""),
            param("dataset_epsilon", ParamType::unit(), 0.1, "ε-greedy action noise in the dataset"),
            param(
                "objectives",
                ParamType::ChoiceList { options: &OBJECTIVES, min_len: 0 },
                json!(["q-regression", "qa-regression", "advantage-regression", "behaviour-cloning"]),
                "students to distill",
            ),
            param("student_steps", ParamType::count(), 6000, ""),
            param("step_size", ParamType::positive(), 1e-2, "adam step size for teacher and students"),
            param("batch_size", ParamType::count(), 32, ""),
            param("target_every", ParamType::count(), 100, "double-q target refresh period"),
            param("entropy_weight", ParamType::nonnegative(), 1e-2, "λ for policy objectives"),
            param("probes", ParamType::count(), 32, ""),
            param("epsilon", ParamType::Float { min: 0.0, max: 1.0, open_min: true }, 0.1, "rank threshold"),
            param("sigma", ParamType::nonnegative(), 0.1, "robustness noise scale"),
            param("robustness_samples", ParamType::count(), 20, "noisy copies per state"),
            param("interpolation_pairs", ParamType::count(), 64, ""),
        ],
        rules: vec![
            |p| discounts_below_one(p, &["discount"]),
            |p| {
                if p.usize("probes") > p.usize("dataset_size") {
                    vec!["parameters.probes: cannot exceed dataset_size".into()]
                } else {
                    vec![]
                }
            },
        ],
    }
}

fn kind_of(name: &str) -> Option<DistillKind> {
    match name {
        "q-regression" => Some(DistillKind::QRegression),
        "qa-regression" => Some(DistillKind::QaRegression),
        "advantage-regression" => Some(DistillKind::AdvantageRegression),
        "behaviour-cloning" => Some(DistillKind::BehaviourCloning),
        _ => None,
    }
}

pub struct SeedResult {
    pub rows: Vec<MetricsRow>,
    pub logs: Vec<(String, String)>,
    pub dataset: String,
}

impl SeedResult {
    pub fn row(&self, objective: &str) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.objective == objective)
    }
}

pub fn distill_seed(p: &Params, seed: u64) -> tdlab_core::Result<SeedResult> {
    let reward = if p.str("reward") == "dense" { GridReward::Dense { seed: seed + 7 } } else { GridReward::Sparse { goal: None } };
    let env = gridworld(p.usize("width"), p.usize("height"), &reward, p.f64("discount"))?;
    let emb = env.embeddings(EmbeddingKind::Coordinates)?;
    let n_actions = env.n_actions();
    let shape = |out: usize| {
        let mut sizes = vec![emb.ncols()];
        sizes.extend(p.usize_list("hidden"));
        sizes.push(out);
        NetShape::new(sizes, Activation::Tanh, true)
    };
    let adam = |net: &TinyNet| OptimizerState::new(OptimizerKind::adam(), p.f64("step_size"), net.parameter_count());

    let teacher0 = TinyNet::new(shape(n_actions)?, Head::QValues { n_actions }, Init::Glorot, seed)?;
    let teacher_run = train_value_net(
        &teacher0,
        TrainingData::Control { env: &env, embeddings: &emb },
        &ValueObjective::Td,
        &adam(&teacher0)?,
        TrainConfig { steps: p.usize("teacher_steps"), checkpoint_every: None, seed },
    )?;
    let teacher = teacher_run.net;
    let data = TeacherDataset::from_q_teacher(&teacher, &env, &emb, p.usize("dataset_size"), p.f64("dataset_epsilon"), seed)?;
    let probe_idx = data.subsample(p.usize("probes"), seed + 1)?;
    let pairs = random_state_pairs(&emb, p.usize("interpolation_pairs"), seed + 300);
    let weights = [0.25, 0.5, 0.75];
    let cfg = DistillConfig { steps: p.usize("student_steps"), batch_size: p.usize("batch_size"), checkpoint_every: None, seed };
    let run_id = format!("seed-{seed}");

    let measure = |name: &str, net: &TinyNet, opt: &OptimizerState, objective: DistillObjective, loss: f64, step: usize| {
        let probes = DistillProbes { dataset: &data, indices: probe_idx.clone(), objective };
        let rank = student_update_rank(net, opt, &probes, p.f64("epsilon"))?;
        let robust = robustness_probe(net, &emb, p.f64("sigma"), p.usize("robustness_samples"), seed + 200)?;
        Ok::<_, tdlab_core::Error>(MetricsRow {
            run_id: run_id.clone(),
            objective: name.to_string(),
            step,
            loss,
            update_rank: rank.update_rank,
            robustness_consistency: robust.consistency,
            interpolation_consistency: interpolation_probe(net, &pairs, &weights)?,
        })
    };

    let q_objective = DistillObjective::new(DistillKind::QRegression, 0.0)?;
    let teacher_loss = teacher_run.log.last().map_or(f64::NAN, |r| r.loss);
    let mut rows = vec![measure("teacher", &teacher, &teacher_run.optimizer, q_objective, teacher_loss, p.usize("teacher_steps"))?];
    let mut logs = Vec::new();
    for name in p.str_list("objectives") {
        let name = name.as_str();
        let (run, objective) = match kind_of(name) {
            Some(kind) => {
                let lambda = if kind.is_policy() { p.f64("entropy_weight") } else { 0.0 };
                let objective = DistillObjective::new(kind, lambda)?;
                let student = TinyNet::new(shape(n_actions)?, objective.student_head(n_actions), Init::Glorot, seed + 50)?;
                (run_distillation(&data, &student, &objective, &adam(&student)?, cfg)?, objective)
            }
            None => {
                let student = TinyNet::new(shape(n_actions)?, Head::QValues { n_actions }, Init::Glorot, seed + 50)?;
                (run_double_q(&data, &student, &adam(&student)?, cfg, p.usize("target_every"))?, q_objective)
            }
        };
        let loss = run.log.last().map_or(f64::NAN, |r| r.loss);
        rows.push(measure(name, &run.student, &run.optimizer, objective, loss, cfg.steps)?);
        logs.push((name.to_string(), log_csv(&run.log)));
    }
    Ok(SeedResult { rows, logs, dataset: data.to_jsonl()? })
}

pub fn run(ctx: &Ctx<'_>, p: &Params, seeds: &[u64]) -> Result<ExperimentOutput> {
    let results = ctx.per_seed(seeds, |seed| distill_seed(p, seed))?;
    let mut out = ExperimentOutput::default();
    let mut all_rows = Vec::new();
    for (seed, r, secs) in &results {
        out.seed_seconds.push((*seed, *secs));
        out.artifacts.push(Artifact::data(seed_dir(*seed, "teacher.jsonl"), r.dataset.clone()));
        for (name, log) in &r.logs {
            out.artifacts.push(Artifact::plotted(
                seed_dir(*seed, &format!("loss-{name}.csv")),
                log.clone(),
                PlotSpec::Line { title: format!("{name} loss, seed {seed}"), x: "step".into(), y: vec!["loss".into()], series: None, log_y: true },
            ));
        }
        all_rows.extend(r.rows.iter().cloned());
    }
    out.artifacts.push(Artifact::data("metrics.csv", metrics_csv(&all_rows)));

    let med = |objective: &str, f: fn(&MetricsRow) -> f64| -> Option<f64> {
        let v: Option<Vec<f64>> = results.iter().map(|(_, r, _)| r.row(objective).map(f)).collect();
        v.map(|v| median(&v))
    };
    let rank = |r: &MetricsRow| r.update_rank as f64;
    let consistency = |r: &MetricsRow| r.robustness_consistency;
    if let (Some(adv), Some(q)) = (med("advantage-regression", rank), med("q-regression", rank)) {
        out.checks.push(CheckItem::new(
            "advantage-regression median update rank <= q-regression's",
            adv <= q,
            format!("advantage {adv}, q {q}"),
        ));
    }
    if let (Some(bc), Some(teacher)) = (med("behaviour-cloning", consistency), med("teacher", consistency)) {
        out.checks.push(CheckItem::new(
            format!("behaviour-cloning median consistency at σ = {} >= teacher's", p.f64("sigma")),
            bc >= teacher,
            format!("behaviour cloning {bc:.4}, teacher {teacher:.4}"),
        ));
    }
    out.decisions.insert("teacher".into(), json!("q-network trained on expected Q-learning updates over all state-action pairs"));
    out.decisions.insert("dataset".into(), json!("uniform states, ε-greedy teacher actions"));
    out.decisions.insert("student_init_seed".into(), json!("seed + 50"));
    out.decisions.insert("probe_seed".into(), json!("seed + 1"));
    out.decisions.insert("robustness_policy".into(), json!("greedy one-hot for q-heads, softmax for policy heads"));
    out.decisions.insert("teacher_and_double_q_rank".into(), json!("measured with q-regression probe losses"));
    out.decisions.insert("dense_reward_seed".into(), json!("seed + 7"));
    Ok(out)
}
