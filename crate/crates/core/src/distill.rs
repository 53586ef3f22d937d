//! Distillation of trained teachers into fresh students, and robustness
//! probes of the resulting policies.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::approx::{sample_categorical, Checkpoint, LogRow, LOG_EPSILON};
use crate::error::{check_len, Error, Result};
use crate::interference::{policy_update_matrix, update_matrix_with, PolicyNorm, ProbeSet, RankReport, Reduction};
use crate::linalg::fmt_f64;
use crate::mdp::ActionMdp;
use crate::net::{row_vec, softmax, vjp_generic, Head, TinyNet};
use crate::optim::OptimizerState;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "values", rename_all = "kebab-case")]
pub enum TeacherTarget {
    QValues(Vec<f64>),
    Policy(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherRecord {
    pub state: Vec<f64>,
    #[serde(default)]
    pub state_index: Option<usize>,
    pub target: TeacherTarget,
    pub action: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
}

impl TeacherRecord {
    fn q(&self) -> Result<&[f64]> {
        match &self.target {
            TeacherTarget::QValues(q) => Ok(q),
            TeacherTarget::Policy(_) => Err(Error::Argument("objective needs teacher q-values".into())),
        }
    }

    fn policy(&self) -> Result<&[f64]> {
        match &self.target {
            TeacherTarget::Policy(p) => Ok(p),
            TeacherTarget::QValues(_) => Err(Error::Argument("objective needs a teacher policy".into())),
        }
    }
}

const DATASET_FORMAT: &str = "tdlab-teacher";
const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    version: u32,
    seed: u64,
    n_actions: usize,
    discount: f64,
}

/// Frozen teacher data.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherDataset {
    records: Vec<TeacherRecord>,
    seed: u64,
    n_actions: usize,
    discount: f64,
}

impl TeacherDataset {
    pub fn new(records: Vec<TeacherRecord>, n_actions: usize, discount: f64, seed: u64) -> Result<Self> {
        if records.is_empty() || n_actions == 0 {
            return Err(Error::Argument("a teacher dataset needs records and actions".into()));
        }
        let d = records[0].state.len();
        for (i, r) in records.iter().enumerate() {
            check_len(d, r.state.len())?;
            check_len(d, r.next_state.len())?;
            if r.action >= n_actions {
                return Err(Error::Argument(format!("record {i} takes action {} of {n_actions}", r.action)));
            }
            match &r.target {
                TeacherTarget::QValues(q) => check_len(n_actions, q.len())?,
                TeacherTarget::Policy(p) => {
                    check_len(n_actions, p.len())?;
                    if (p.iter().sum::<f64>() - 1.0).abs() > 1e-10 || p.iter().any(|&v| v < 0.0) {
                        return Err(Error::Argument(format!("record {i} has a policy that does not sum to 1")));
                    }
                }
            }
            let finite = r.state.iter().chain(&r.next_state).all(|v| v.is_finite()) && r.reward.is_finite();
            if !finite {
                return Err(Error::Argument(format!("record {i} is not finite")));
            }
        }
        Ok(TeacherDataset { records, seed, n_actions, discount })
    }

    /// States drawn uniformly; actions ε-greedy under the teacher's q-values.
    pub fn from_q_teacher(
        teacher: &TinyNet,
        env: &ActionMdp,
        embeddings: &DMatrix<f64>,
        count: usize,
        epsilon: f64,
        seed: u64,
    ) -> Result<Self> {
        if teacher.head() != (Head::QValues { n_actions: env.n_actions() }) {
            return Err(Error::Argument(format!("teacher head {:?} is not a matching q-value head", teacher.head())));
        }
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::Argument(format!("epsilon must lie in [0, 1], got {epsilon}")));
        }
        check_len(env.n_states(), embeddings.nrows())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let s = rng.random_range(0..env.n_states());
            let x = row_vec(embeddings, s);
            let q = teacher.raw_output(&x)?;
            let action = if rng.random::<f64>() < epsilon { rng.random_range(0..env.n_actions()) } else { argmax(&q) };
            records.push(TeacherRecord {
                state: x,
                state_index: Some(s),
                target: TeacherTarget::QValues(q),
                action,
                reward: env.reward(s, action),
                next_state: row_vec(embeddings, env.next_state(s, action)),
            });
        }
        TeacherDataset::new(records, env.n_actions(), env.discount(), seed)
    }

    /// States drawn uniformly; actions sampled from the teacher's policy.
    pub fn from_policy_teacher(
        teacher: &TinyNet,
        env: &ActionMdp,
        embeddings: &DMatrix<f64>,
        count: usize,
        seed: u64,
    ) -> Result<Self> {
        check_len(env.n_states(), embeddings.nrows())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let s = rng.random_range(0..env.n_states());
            let x = row_vec(embeddings, s);
            let p = teacher.policy(&x)?;
            check_len(env.n_actions(), p.len())?;
            let action = sample_categorical(p.iter().copied(), &mut rng);
            records.push(TeacherRecord {
                state: x,
                state_index: Some(s),
                target: TeacherTarget::Policy(p),
                action,
                reward: env.reward(s, action),
                next_state: row_vec(embeddings, env.next_state(s, action)),
            });
        }
        TeacherDataset::new(records, env.n_actions(), env.discount(), seed)
    }

    pub fn records(&self) -> &[TeacherRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    /// JSON lines: a header line, then one record per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let header = DatasetHeader {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            seed: self.seed,
            n_actions: self.n_actions,
            discount: self.discount,
        };
        let mut out = serde_json::to_string(&header)?;
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: DatasetHeader =
            serde_json::from_str(lines.next().ok_or_else(|| Error::Config("empty teacher dataset".into()))?)?;
        if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
            return Err(Error::Config(format!("unsupported dataset {} v{}", header.format, header.version)));
        }
        let records = lines.map(serde_json::from_str).collect::<std::result::Result<Vec<TeacherRecord>, _>>()?;
        TeacherDataset::new(records, header.n_actions, header.discount, header.seed)
    }

    pub fn subsample(&self, k: usize, seed: u64) -> Result<Vec<usize>> {
        if k > self.len() {
            return Err(Error::Argument(format!("cannot draw {k} of {} records", self.len())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(rand::seq::index::sample(&mut rng, self.len(), k).into_vec())
    }
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |b, a| if v[a] > v[b] { a } else { b })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistillKind {
    QRegression,
    QaRegression,
    AdvantageRegression,
    BehaviourCloning,
    KlPolicy,
}

impl DistillKind {
    pub fn is_policy(self) -> bool {
        matches!(self, DistillKind::BehaviourCloning | DistillKind::KlPolicy)
    }

    pub fn label(self) -> &'static str {
        match self {
            DistillKind::QRegression => "q-regression",
            DistillKind::QaRegression => "qa-regression",
            DistillKind::AdvantageRegression => "advantage-regression",
            DistillKind::BehaviourCloning => "behaviour-cloning",
            DistillKind::KlPolicy => "kl-policy",
        }
    }
}

/// Default entropy weight for policy objectives.
pub const DEFAULT_ENTROPY_WEIGHT: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillObjective {
    pub kind: DistillKind,
    pub entropy_weight: f64,
}

impl DistillObjective {
    pub fn new(kind: DistillKind, entropy_weight: f64) -> Result<Self> {
        if !(entropy_weight >= 0.0 && entropy_weight.is_finite()) {
            return Err(Error::Argument(format!("entropy weight must be finite and nonnegative, got {entropy_weight}")));
        }
        Ok(DistillObjective { kind, entropy_weight })
    }

    /// Student head this objective trains.
    pub fn student_head(&self, n_actions: usize) -> Head {
        if self.kind.is_policy() {
            Head::PolicyLogits { n_actions }
        } else {
            Head::QValues { n_actions }
        }
    }
}

/// Fit term, student entropy and `total = fit − λ·entropy` (λ = 0 for
/// regression objectives).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillLoss {
    pub fit: f64,
    pub entropy: f64,
    pub total: f64,
}

/// Loss of raw student outputs (q-values or logits) on one record, with its
/// gradient with respect to those outputs.
pub fn distill_loss_and_cotangent(
    objective: &DistillObjective,
    student: &[f64],
    record: &TeacherRecord,
) -> Result<(DistillLoss, Vec<f64>)> {
    let n = student.len();
    if record.action >= n {
        return Err(Error::Argument(format!("record action {} out of range for {n} outputs", record.action)));
    }
    let regression = |targets: &[f64], mask: Option<usize>| -> Result<(DistillLoss, Vec<f64>)> {
        check_len(n, targets.len())?;
        let mut fit = 0.0;
        let mut cot = vec![0.0; n];
        for a in 0..n {
            if mask.is_some_and(|m| m != a) {
                continue;
            }
            let err = student[a] - targets[a];
            fit += err * err;
            cot[a] = 2.0 * err;
        }
        Ok((DistillLoss { fit, entropy: 0.0, total: fit }, cot))
    };
    match objective.kind {
        DistillKind::QRegression => regression(record.q()?, None),
        DistillKind::QaRegression => regression(record.q()?, Some(record.action)),
        DistillKind::AdvantageRegression => regression(&advantages(record.q()?), None),
        DistillKind::BehaviourCloning | DistillKind::KlPolicy => {
            let lambda = objective.entropy_weight;
            let max = student.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + student.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            let logp: Vec<f64> = student.iter().map(|z| z - lse).collect();
            let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
            let h = -probs.iter().zip(&logp).map(|(p, l)| p * l).sum::<f64>();
            let (fit, mut cot) = if objective.kind == DistillKind::BehaviourCloning {
                let mut cot = probs.clone();
                cot[record.action] -= 1.0;
                (-logp[record.action].max(LOG_EPSILON.ln()), cot)
            } else {
                let teacher = record.policy()?;
                check_len(n, teacher.len())?;
                let log_ratio: Vec<f64> =
                    logp.iter().zip(teacher).map(|(l, t)| l - t.max(LOG_EPSILON).ln()).collect();
                let kl: f64 = probs.iter().zip(&log_ratio).map(|(p, r)| p * r).sum();
                (kl, probs.iter().zip(&log_ratio).map(|(p, r)| p * (r - kl)).collect())
            };
            for (c, (p, l)) in cot.iter_mut().zip(probs.iter().zip(&logp)) {
                *c += lambda * p * (l + h);
            }
            Ok((DistillLoss { fit, entropy: h, total: fit - lambda * h }, cot))
        }
    }
}

pub fn distill_loss(objective: &DistillObjective, student: &[f64], record: &TeacherRecord) -> Result<DistillLoss> {
    Ok(distill_loss_and_cotangent(objective, student, record)?.0)
}

/// `q − mean(q)`.
pub fn advantages(q: &[f64]) -> Vec<f64> {
    let mean = q.iter().sum::<f64>() / q.len() as f64;
    q.iter().map(|v| v - mean).collect()
}

/// Mean loss and parameter gradient over a subset of records.
pub fn distill_batch_gradient(
    student: &TinyNet,
    objective: &DistillObjective,
    dataset: &TeacherDataset,
    indices: &[usize],
) -> Result<(DistillLoss, Vec<f64>)> {
    if indices.is_empty() {
        return Err(Error::Argument("empty distillation batch".into()));
    }
    let scale = 1.0 / indices.len() as f64;
    let mut grad = vec![0.0; student.parameter_count()];
    let mut sum = DistillLoss { fit: 0.0, entropy: 0.0, total: 0.0 };
    for &i in indices {
        let record = dataset.records.get(i).ok_or_else(|| Error::Argument(format!("record {i} out of range")))?;
        check_len(student.input_dim(), record.state.len())?;
        let mut failure = None;
        vjp_generic(student.shape(), student.params(), &record.state, &mut grad, |out| {
            match distill_loss_and_cotangent(objective, out, record) {
                Ok((l, cot)) => {
                    sum.fit += l.fit * scale;
                    sum.entropy += l.entropy * scale;
                    sum.total += l.total * scale;
                    cot.into_iter().map(|c| c * scale).collect()
                }
                Err(e) => {
                    failure = Some(e);
                    vec![0.0; out.len()]
                }
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
    }
    Ok((sum, grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub checkpoint_every: Option<usize>,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct DistillationRun {
    pub student: TinyNet,
    pub optimizer: OptimizerState,
    pub checkpoints: Vec<Checkpoint>,
    pub log: Vec<LogRow>,
}

fn check_student(student: &TinyNet, optimizer: &OptimizerState, head: Head, config: &DistillConfig) -> Result<()> {
    if student.head() != head {
        return Err(Error::Argument(format!("student head {:?} does not match {head:?}", student.head())));
    }
    if !optimizer.is_compatible(student.parameter_count()) {
        return Err(Error::Capability("optimizer state does not match the student".into()));
    }
    if config.batch_size == 0 || config.checkpoint_every == Some(0) {
        return Err(Error::Argument("batch size and checkpoint cadence must be positive".into()));
    }
    Ok(())
}

fn training_loop(
    student: &TinyNet,
    optimizer: &OptimizerState,
    n_records: usize,
    config: DistillConfig,
    mut step_fn: impl FnMut(&TinyNet, &[usize], usize) -> Result<(f64, Vec<f64>)>,
) -> Result<DistillationRun> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net = student.clone();
    let mut opt = optimizer.clone();
    let mut checkpoints = vec![Checkpoint::capture(&net, &opt, 0, config.seed)];
    let mut log = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch: Vec<usize> = (0..config.batch_size).map(|_| rng.random_range(0..n_records)).collect();
        let (loss, grad) = step_fn(&net, &batch, step)?;
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::Numeric(format!(
                "distillation halted at step {step}: loss {loss}, gradient norm {grad_norm}"
            )));
        }
        log.push(LogRow { step, loss, grad_norm });
        opt.step(net.params_mut(), &grad)?;
        let done = step + 1;
        if config.checkpoint_every.is_some_and(|c| done % c == 0) || done == config.steps {
            checkpoints.push(Checkpoint::capture(&net, &opt, done, config.seed));
        }
    }
    Ok(DistillationRun { student: net, optimizer: opt, checkpoints, log })
}

/// Trains a fresh student on a frozen teacher dataset.
pub fn run_distillation(
    dataset: &TeacherDataset,
    student: &TinyNet,
    objective: &DistillObjective,
    optimizer: &OptimizerState,
    config: DistillConfig,
) -> Result<DistillationRun> {
    check_student(student, optimizer, objective.student_head(dataset.n_actions), &config)?;
    check_len(student.input_dim(), dataset.records[0].state.len())?;
    training_loop(student, optimizer, dataset.len(), config, |net, batch, _| {
        let (loss, grad) = distill_batch_gradient(net, objective, dataset, batch)?;
        Ok((loss.total, grad))
    })
}

/// Offline double Q-learning on the dataset's transitions, with a target
/// network refreshed every `target_every` steps.
pub fn run_double_q(
    dataset: &TeacherDataset,
    student: &TinyNet,
    optimizer: &OptimizerState,
    config: DistillConfig,
    target_every: usize,
) -> Result<DistillationRun> {
    check_student(student, optimizer, Head::QValues { n_actions: dataset.n_actions }, &config)?;
    check_len(student.input_dim(), dataset.records[0].state.len())?;
    if target_every == 0 {
        return Err(Error::Argument("target refresh period must be positive".into()));
    }
    let mut target = student.clone();
    let gamma = dataset.discount;
    training_loop(student, optimizer, dataset.len(), config, |net, batch, step| {
        if step % target_every == 0 {
            target = net.clone();
        }
        let scale = 1.0 / batch.len() as f64;
        let mut grad = vec![0.0; net.parameter_count()];
        let mut loss = 0.0;
        for &i in batch {
            let r = &dataset.records[i];
            let online_next = net.raw_output(&r.next_state)?;
            let y = r.reward + gamma * target.raw_output(&r.next_state)?[argmax(&online_next)];
            vjp_generic(net.shape(), net.params(), &r.state, &mut grad, |out| {
                let err = out[r.action] - y;
                loss += 0.5 * err * err * scale;
                let mut cot = vec![0.0; out.len()];
                cot[r.action] = err * scale;
                cot
            });
        }
        Ok((loss, grad))
    })
}

/// Dataset records used as probes, with the distillation loss.
pub struct DistillProbes<'a> {
    pub dataset: &'a TeacherDataset,
    pub indices: Vec<usize>,
    pub objective: DistillObjective,
}

impl ProbeSet for DistillProbes<'_> {
    fn len(&self) -> usize {
        self.indices.len()
    }
    fn state(&self, i: usize) -> &[f64] {
        &self.dataset.records[self.indices[i]].state
    }
    fn action(&self, i: usize) -> usize {
        self.dataset.records[self.indices[i]].action
    }
    fn state_index(&self, i: usize) -> Option<usize> {
        self.dataset.records[self.indices[i]].state_index
    }
    fn loss_gradient(&self, net: &TinyNet, i: usize) -> Result<Vec<f64>> {
        Ok(distill_batch_gradient(net, &self.objective, self.dataset, &[self.indices[i]])?.1)
    }
}

/// Update rank of a student on distillation probes: value matrices with
/// the max reduction for regression students, l1 policy matrices otherwise.
pub fn student_update_rank(student: &TinyNet, optimizer: &OptimizerState, probes: &DistillProbes<'_>, epsilon: f64) -> Result<RankReport> {
    let matrix = if probes.objective.kind.is_policy() {
        policy_update_matrix(student, optimizer, probes, PolicyNorm::L1)?
    } else {
        update_matrix_with(student, optimizer, probes, Reduction::MaxOverActions)?
    };
    matrix.rank(epsilon)
}

/// Greedy action and the policy used for l1 shifts: the softmax for policy
/// heads, the greedy one-hot for q-value heads.
fn action_and_policy(net: &TinyNet, x: &[f64]) -> Result<(usize, Vec<f64>)> {
    let raw = net.raw_output(x)?;
    match net.head() {
        Head::PolicyLogits { n_actions } | Head::ActorCritic { n_actions } => {
            let p = softmax(&raw[..n_actions]);
            Ok((argmax(&p), p))
        }
        Head::QValues { n_actions } => {
            let a = argmax(&raw);
            let mut p = vec![0.0; n_actions];
            p[a] = 1.0;
            Ok((a, p))
        }
        Head::ScalarValue => Err(Error::Argument("a scalar-value net has no actions".into())),
    }
}

pub fn greedy_action(net: &TinyNet, x: &[f64]) -> Result<usize> {
    Ok(action_and_policy(net, x)?.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub consistency: f64,
    pub mean_l1_shift: f64,
}

/// Fraction of Gaussian input perturbations that keep the greedy action,
/// and the mean l1 change of the policy.
pub fn robustness_probe(net: &TinyNet, states: &DMatrix<f64>, sigma: f64, n_samples: usize, seed: u64) -> Result<RobustnessReport> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Argument(format!("sigma must be finite and nonnegative, got {sigma}")));
    }
    if states.nrows() == 0 || n_samples == 0 {
        return Err(Error::Argument("robustness probes need states and samples".into()));
    }
    check_len(net.input_dim(), states.ncols())?;
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Argument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut same, mut shift, mut total) = (0usize, 0.0, 0usize);
    for r in 0..states.nrows() {
        let x = row_vec(states, r);
        let (a0, p0) = action_and_policy(net, &x)?;
        for _ in 0..n_samples {
            let xp: Vec<f64> = x.iter().map(|v| v + normal.sample(&mut rng)).collect();
            let (a, p) = action_and_policy(net, &xp)?;
            same += usize::from(a == a0);
            shift += p.iter().zip(&p0).map(|(u, v)| (u - v).abs()).sum::<f64>();
            total += 1;
        }
    }
    Ok(RobustnessReport { consistency: same as f64 / total as f64, mean_l1_shift: shift / total as f64 })
}

/// Fraction of (pair, weight) probes whose action at the mixture
/// `(1 − w)·x₁ + w·x₂` matches the action at one of the endpoints.
pub fn interpolation_probe(net: &TinyNet, pairs: &[(Vec<f64>, Vec<f64>)], weights: &[f64]) -> Result<f64> {
    if weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
        return Err(Error::Argument("mix weights must lie in [0, 1]".into()));
    }
    if pairs.is_empty() || weights.is_empty() {
        return Err(Error::Argument("interpolation probes need pairs and weights".into()));
    }
    let mut hits = 0usize;
    for (x1, x2) in pairs {
        check_len(x1.len(), x2.len())?;
        let a1 = greedy_action(net, x1)?;
        let a2 = greedy_action(net, x2)?;
        for &w in weights {
            let mix: Vec<f64> = x1.iter().zip(x2).map(|(u, v)| (1.0 - w) * u + w * v).collect();
            let a = greedy_action(net, &mix)?;
            hits += usize::from(a == a1 || a == a2);
        }
    }
    Ok(hits as f64 / (pairs.len() * weights.len()) as f64)
}

/// Seeded random pairs of rows of an embedding table.
pub fn random_state_pairs(embeddings: &DMatrix<f64>, count: usize, seed: u64) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = embeddings.nrows();
    (0..count)
        .map(|_| (row_vec(embeddings, rng.random_range(0..n)), row_vec(embeddings, rng.random_range(0..n))))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub objective: String,
    pub step: usize,
    pub loss: f64,
    pub update_rank: usize,
    pub robustness_consistency: f64,
    pub interpolation_consistency: f64,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out =
        String::from("run_id,objective,step,loss,update_rank,robustness_consistency,interpolation_consistency\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.run_id,
            r.objective,
            r.step,
            fmt_f64(r.loss),
            r.update_rank,
            fmt_f64(r.robustness_consistency),
            fmt_f64(r.interpolation_consistency)
        ));
    }
    out
}
