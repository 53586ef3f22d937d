//! TD, Monte Carlo and policy-gradient training of tiny networks, and the
//! second-order drift of finite-step TD.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linalg::{self, fmt_f64, Integrator, DIVERGENCE_CAP};
use crate::mdp::{ActionMdp, MarkovMdp};
use crate::net::{raw_output_generic, row_vec, softmax, vjp_generic, Dual, Head, NetShape, Scalar, TinyNet};
use crate::optim::OptimizerState;

/// Largest network for which the second-order drift is computed.
pub const SECOND_ORDER_PARAMETER_CAP: usize = 2000;

/// Floor applied inside logarithms of probabilities.
pub const LOG_EPSILON: f64 = 1e-12;

/// How the bootstrap value at the next state is formed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NextAction {
    /// Max over next-state action values (value heads use V(x') directly).
    Greedy,
    /// Expectation of next-state action values under these probabilities.
    Policy { probs: Vec<f64> },
    /// No bootstrap.
    Terminal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    #[serde(default)]
    pub state_index: Option<usize>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub next: NextAction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionBatch {
    transitions: Vec<Transition>,
    discount: f64,
}

impl TransitionBatch {
    pub fn new(transitions: Vec<Transition>, discount: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&discount) {
            return Err(Error::Argument(format!("discount must lie in [0, 1], got {discount}")));
        }
        if let Some(first) = transitions.first() {
            let d = first.state.len();
            for (i, t) in transitions.iter().enumerate() {
                if t.state.len() != d || t.next_state.len() != d {
                    return Err(Error::Argument(format!("transition {i} has an inconsistent embedding dimension")));
                }
                if !t.reward.is_finite() || t.state.iter().chain(&t.next_state).any(|v| !v.is_finite()) {
                    return Err(Error::Argument(format!("transition {i} is not finite")));
                }
                if let NextAction::Policy { probs } = &t.next {
                    if (probs.iter().sum::<f64>() - 1.0).abs() > 1e-8 || probs.iter().any(|&p| p < 0.0) {
                        return Err(Error::Argument(format!("transition {i} has an invalid next-action policy")));
                    }
                }
            }
        }
        Ok(TransitionBatch { transitions, discount })
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.transitions[i]
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn embedding_dim(&self) -> Option<usize> {
        self.transitions.first().map(|t| t.state.len())
    }

    /// Checks embedding width and action indices against a network.
    pub fn check_compatible(&self, net: &TinyNet) -> Result<()> {
        if let Some(d) = self.embedding_dim() {
            check_len(net.input_dim(), d)?;
        }
        if let Some(n_actions) = net.head().n_actions() {
            for (i, t) in self.transitions.iter().enumerate() {
                if t.action >= n_actions {
                    return Err(Error::Argument(format!(
                        "transition {i} takes action {} but the net has {n_actions}",
                        t.action
                    )));
                }
                if let NextAction::Policy { probs } = &t.next {
                    check_len(n_actions, probs.len())?;
                }
            }
        }
        Ok(())
    }

    /// Uniform draws of states and behaviour-policy actions on a
    /// deterministic environment.
    pub fn sample_from_action_mdp(
        env: &ActionMdp,
        embeddings: &DMatrix<f64>,
        behaviour: &DMatrix<f64>,
        count: usize,
        seed: u64,
    ) -> Result<Self> {
        let (n, a) = (env.n_states(), env.n_actions());
        check_len(n, embeddings.nrows())?;
        if behaviour.nrows() != n || behaviour.ncols() != a {
            return Err(Error::Dimension { expected: n * a, actual: behaviour.len() });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut transitions = Vec::with_capacity(count);
        for _ in 0..count {
            let s = rng.random_range(0..n);
            let action = sample_categorical(behaviour.row(s).iter().copied(), &mut rng);
            let next = env.next_state(s, action);
            transitions.push(Transition {
                state: row_vec(embeddings, s),
                state_index: Some(s),
                action,
                reward: env.reward(s, action),
                next_state: row_vec(embeddings, next),
                next: NextAction::Greedy,
            });
        }
        TransitionBatch::new(transitions, env.discount())
    }

    /// Uniform draws of states with next states sampled from P^π.
    pub fn sample_from_markov(mdp: &MarkovMdp, embeddings: &DMatrix<f64>, count: usize, seed: u64) -> Result<Self> {
        let n = mdp.n_states();
        check_len(n, embeddings.nrows())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = mdp.transition();
        let mut transitions = Vec::with_capacity(count);
        for _ in 0..count {
            let s = rng.random_range(0..n);
            let next = sample_categorical(p.row(s).iter().copied(), &mut rng);
            transitions.push(Transition {
                state: row_vec(embeddings, s),
                state_index: Some(s),
                action: 0,
                reward: mdp.reward()[s],
                next_state: row_vec(embeddings, next),
                next: NextAction::Greedy,
            });
        }
        TransitionBatch::new(transitions, mdp.discount())
    }

    /// `k` transitions drawn uniformly without replacement.
    pub fn subsample(&self, k: usize, seed: u64) -> Result<Self> {
        if k > self.len() {
            return Err(Error::Argument(format!("cannot draw {k} of {} transitions", self.len())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picks = index::sample(&mut rng, self.len(), k);
        Ok(TransitionBatch {
            transitions: picks.iter().map(|i| self.transitions[i].clone()).collect(),
            discount: self.discount,
        })
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Argument(format!("transition index {bad} out of range")));
        }
        Ok(TransitionBatch {
            transitions: indices.iter().map(|&i| self.transitions[i].clone()).collect(),
            discount: self.discount,
        })
    }
}

pub(crate) fn sample_categorical(probs: impl Iterator<Item = f64>, rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.enumerate() {
        if p > 0.0 {
            last = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// Bootstrapped target `r + γ·next value` for one transition, held constant.
pub fn td_target(net: &TinyNet, t: &Transition, discount: f64) -> Result<f64> {
    let bootstrap = match (&t.next, net.head()) {
        (NextAction::Terminal, _) => 0.0,
        (_, Head::ScalarValue) => net.raw_output(&t.next_state)?[0],
        (NextAction::Greedy, Head::QValues { .. }) => {
            net.raw_output(&t.next_state)?.into_iter().fold(f64::NEG_INFINITY, f64::max)
        }
        (NextAction::Policy { probs }, Head::QValues { n_actions }) => {
            check_len(n_actions, probs.len())?;
            net.raw_output(&t.next_state)?.iter().zip(probs).map(|(q, p)| q * p).sum()
        }
        (_, head) => return Err(Error::Argument(format!("{head:?} head has no bootstrap value"))),
    };
    Ok(t.reward + discount * bootstrap)
}

/// Loss and parameter gradient of a single transition.
///
/// Value heads use the stop-gradient TD loss ½(out − target)² on the taken
/// action's output. Policy heads use the cross-entropy −log π(a|x) of the
/// logged action.
pub fn transition_loss_gradient(net: &TinyNet, t: &Transition, discount: f64) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; net.parameter_count()];
    let shape = net.shape();
    check_len(shape.input_dim(), t.state.len())?;
    match net.head() {
        Head::ScalarValue | Head::QValues { .. } => {
            let target = td_target(net, t, discount)?;
            let output = if net.head() == Head::ScalarValue { 0 } else { t.action };
            if output >= shape.output_dim() {
                return Err(Error::Argument(format!("action {} out of range", t.action)));
            }
            let mut loss = 0.0;
            vjp_generic(shape, net.params(), &t.state, &mut grad, |out| {
                let err = out[output] - target;
                loss = 0.5 * err * err;
                let mut cot = vec![0.0; out.len()];
                cot[output] = err;
                cot
            });
            Ok((loss, grad))
        }
        Head::PolicyLogits { n_actions } | Head::ActorCritic { n_actions } => {
            if t.action >= n_actions {
                return Err(Error::Argument(format!("action {} out of range", t.action)));
            }
            let mut loss = 0.0;
            vjp_generic(shape, net.params(), &t.state, &mut grad, |out| {
                let logp = log_softmax(&out[..n_actions]);
                loss = -logp[t.action];
                let mut cot: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
                cot[t.action] -= 1.0;
                cot.resize(out.len(), 0.0);
                cot
            });
            Ok((loss, grad))
        }
    }
}

fn check_value_problem(net: &TinyNet, mdp: &MarkovMdp, embeddings: &DMatrix<f64>) -> Result<()> {
    if net.head() != Head::ScalarValue {
        return Err(Error::Argument(format!("expected a scalar-value head, got {:?}", net.head())));
    }
    check_len(mdp.n_states(), embeddings.nrows())?;
    check_len(net.input_dim(), embeddings.ncols())
}

/// `Σ_x δ_x ∇V(x)` with δ = target − V. Targets are the live Bellman targets
/// unless `frozen` supplies constants.
fn semi_gradient<T: Scalar>(
    shape: &NetShape,
    params: &[T],
    mdp: &MarkovMdp,
    embeddings: &DMatrix<f64>,
    frozen: Option<&DVector<f64>>,
) -> Vec<T> {
    let n = mdp.n_states();
    let inputs: Vec<Vec<T>> = (0..n).map(|s| embeddings.row(s).iter().map(|&v| T::cst(v)).collect()).collect();
    let values: Vec<T> = inputs.iter().map(|x| raw_output_generic(shape, params, x)[0]).collect();
    let p = mdp.transition();
    let gamma = mdp.discount();
    let mut grad = vec![T::cst(0.0); params.len()];
    for s in 0..n {
        let target = match frozen {
            Some(y) => T::cst(y[s]),
            None => {
                let mut acc = T::cst(0.0);
                for (sp, v) in values.iter().enumerate() {
                    let w = p[(s, sp)];
                    if w != 0.0 {
                        acc += T::cst(w) * *v;
                    }
                }
                T::cst(mdp.reward()[s]) + T::cst(gamma) * acc
            }
        };
        let delta = target - values[s];
        vjp_generic(shape, params, &inputs[s], &mut grad, |_| vec![delta]);
    }
    grad
}

/// Expected TD semi-gradient direction `Jᵀ((γP − I)V_θ + R)`.
pub fn td_semi_gradient(net: &TinyNet, mdp: &MarkovMdp, embeddings: &DMatrix<f64>) -> Result<DVector<f64>> {
    check_value_problem(net, mdp, embeddings)?;
    Ok(DVector::from_vec(semi_gradient(net.shape(), net.params(), mdp, embeddings, None)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DriftRoute {
    /// Central differences of the frozen-target direction over every
    /// parameter, then a matrix-vector product.
    FiniteDifference,
    /// Forward-mode dual numbers along f.
    Exact,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SecondOrderDrift {
    pub f: DVector<f64>,
    /// Gradient-norm penalty part (derivative of the frozen-target direction along f).
    pub penalty: DVector<f64>,
    /// γ·JᵀPJ·f.
    pub alignment: DVector<f64>,
    pub f1: DVector<f64>,
}

fn bellman_targets(net: &TinyNet, mdp: &MarkovMdp, embeddings: &DMatrix<f64>) -> Result<DVector<f64>> {
    let v = net.output_column(embeddings, 0)?;
    Ok(mdp.reward() + mdp.transition() * v * mdp.discount())
}

/// Second-order drift f₁ = (∂f)·f of the TD semi-gradient direction, split
/// into the gradient-norm penalty and successor alignment terms.
pub fn second_order_drift(
    net: &TinyNet,
    mdp: &MarkovMdp,
    embeddings: &DMatrix<f64>,
    route: DriftRoute,
) -> Result<SecondOrderDrift> {
    check_value_problem(net, mdp, embeddings)?;
    let p_count = net.parameter_count();
    if p_count > SECOND_ORDER_PARAMETER_CAP {
        return Err(Error::Capability(format!(
            "second-order drift needs an explicit Jacobian of f; {p_count} parameters exceed the cap of \
             {SECOND_ORDER_PARAMETER_CAP}, use a smaller network"
        )));
    }
    let f = td_semi_gradient(net, mdp, embeddings)?;
    let jac = net.jacobian(embeddings, 0)?;
    let alignment = jac.transpose() * (mdp.transition() * (&jac * &f)) * mdp.discount();
    let frozen = bellman_targets(net, mdp, embeddings)?;
    let shape = net.shape();
    let penalty = match route {
        DriftRoute::Exact => {
            let dual: Vec<Dual> = net.params().iter().zip(f.iter()).map(|(&p, &d)| Dual::new(p, d)).collect();
            let g = semi_gradient(shape, &dual, mdp, embeddings, Some(&frozen));
            DVector::from_iterator(p_count, g.into_iter().map(|d| d.eps))
        }
        DriftRoute::FiniteDifference => {
            let h = 1e-5;
            let mut dg = DMatrix::zeros(p_count, p_count);
            let mut params = net.params().to_vec();
            for k in 0..p_count {
                let orig = params[k];
                params[k] = orig + h;
                let plus = semi_gradient(shape, &params, mdp, embeddings, Some(&frozen));
                params[k] = orig - h;
                let minus = semi_gradient(shape, &params, mdp, embeddings, Some(&frozen));
                params[k] = orig;
                for r in 0..p_count {
                    dg[(r, k)] = (plus[r] - minus[r]) / (2.0 * h);
                }
            }
            dg * &f
        }
    };
    let f1 = &penalty + &alignment;
    Ok(SecondOrderDrift { f, penalty, alignment, f1 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub alpha: f64,
    pub n_steps: usize,
    /// ‖θ_n − θ(nα)‖ against the plain flow.
    pub gap_uncorrected: f64,
    /// ‖θ_n − θ̃(nα)‖ against the flow corrected by −(α/2)·f₁.
    pub gap_corrected: f64,
    pub diverged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub total_time: f64,
    pub rows: Vec<ScalingRow>,
    /// Least-squares slope of log gap against log α; `None` when fewer than
    /// two step sizes give a positive finite gap.
    pub slope_uncorrected: Option<f64>,
    pub slope_corrected: Option<f64>,
}

impl ScalingReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha,n_steps,gap_uncorrected,gap_corrected,diverged\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                fmt_f64(r.alpha),
                r.n_steps,
                fmt_f64(r.gap_uncorrected),
                fmt_f64(r.gap_corrected),
                r.diverged
            ));
        }
        out
    }
}

/// Least-squares slope of `ln y` against `ln x` over positive finite pairs.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0 && a.is_finite() && b.is_finite())
        .map(|(a, b)| (a.ln(), b.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    Some(pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx)
}

/// Compares `total_time/α` discrete TD steps against the plain and
/// α-corrected continuous flows, each integrated with RK4 at `inner_step`.
pub fn verify_second_order(
    net0: &TinyNet,
    mdp: &MarkovMdp,
    embeddings: &DMatrix<f64>,
    step_sizes: &[f64],
    total_time: f64,
    inner_step: f64,
) -> Result<ScalingReport> {
    check_value_problem(net0, mdp, embeddings)?;
    if net0.parameter_count() > SECOND_ORDER_PARAMETER_CAP {
        return Err(Error::Capability(format!(
            "{} parameters exceed the second-order cap of {SECOND_ORDER_PARAMETER_CAP}",
            net0.parameter_count()
        )));
    }
    if !(total_time > 0.0 && total_time.is_finite()) || !(inner_step > 0.0) {
        return Err(Error::Argument("total time and inner step must be positive".into()));
    }
    if step_sizes.is_empty() || step_sizes.iter().any(|&a| !(a > 0.0)) {
        return Err(Error::Argument("step sizes must be positive".into()));
    }
    if step_sizes.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Argument(format!("step sizes must be strictly descending, got {step_sizes:?}")));
    }
    let shape = net0.shape().clone();
    let theta0 = DVector::from_column_slice(net0.params());
    let f = |theta: &DVector<f64>| -> DVector<f64> {
        DVector::from_vec(semi_gradient(&shape, theta.as_slice(), mdp, embeddings, None))
    };
    let f1 = |theta: &DVector<f64>| -> DVector<f64> {
        let net = TinyNet::from_params(shape.clone(), Head::ScalarValue, theta.as_slice().to_vec())
            .expect("shape checked above");
        match second_order_drift(&net, mdp, embeddings, DriftRoute::Exact) {
            Ok(d) => d.f1,
            Err(_) => DVector::from_element(theta.len(), f64::NAN),
        }
    };
    let integrator = Integrator::Rk4 { step: inner_step };
    let plain = linalg::integrate(f, &theta0, &[total_time], integrator, DIVERGENCE_CAP)?;
    let plain_end = if plain.diverged_at.is_none() { plain.states.last().cloned() } else { None };

    let mut rows = Vec::with_capacity(step_sizes.len());
    for &alpha in step_sizes {
        let n_steps = (total_time / alpha).round() as usize;
        if n_steps == 0 || ((n_steps as f64) * alpha - total_time).abs() > 1e-9 * total_time.max(1.0) {
            return Err(Error::Argument(format!("total time {total_time} is not a multiple of step size {alpha}")));
        }
        let mut theta = theta0.clone();
        let mut diverged = false;
        for _ in 0..n_steps {
            theta += f(&theta) * alpha;
            if !linalg::is_bounded(&theta, DIVERGENCE_CAP) {
                diverged = true;
                break;
            }
        }
        let corrected_drift = |th: &DVector<f64>| f(th) - f1(th) * (alpha / 2.0);
        let corrected = linalg::integrate(corrected_drift, &theta0, &[total_time], integrator, DIVERGENCE_CAP)?;
        diverged |= corrected.diverged_at.is_some() || plain_end.is_none();
        let gap = |reference: Option<&DVector<f64>>| match reference {
            Some(r) if !diverged => (&theta - r).norm(),
            _ => f64::NAN,
        };
        rows.push(ScalingRow {
            alpha,
            n_steps,
            gap_uncorrected: gap(plain_end.as_ref()),
            gap_corrected: gap(corrected.states.last().filter(|_| corrected.diverged_at.is_none())),
            diverged,
        });
        if diverged {
            log::warn!("second-order scaling diverged at step size {alpha}");
        }
    }
    let alphas: Vec<f64> = rows.iter().map(|r| r.alpha).collect();
    let fit = |gaps: Vec<f64>| {
        if gaps.iter().all(|&g| g < 1e-14) {
            None
        } else {
            log_log_slope(&alphas, &gaps)
        }
    };
    Ok(ScalingReport {
        total_time,
        slope_uncorrected: fit(rows.iter().map(|r| r.gap_uncorrected).collect()),
        slope_corrected: fit(rows.iter().map(|r| r.gap_corrected).collect()),
        rows,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum ValueObjective {
    /// Stop-gradient TD loss ½Σ(out − □target)².
    Td,
    /// Squared error to the true values (V^π, or Q* on control problems).
    McRegression,
    /// Squared error to explicit per-state targets.
    Regression { targets: DVector<f64> },
}

/// What a value network is trained on.
#[derive(Clone, Copy, Debug)]
pub enum TrainingData<'a> {
    /// Expected updates summed over `states` (all states when `None`).
    Expected { mdp: &'a MarkovMdp, embeddings: &'a DMatrix<f64>, states: Option<&'a [usize]> },
    /// Expected Q-learning updates summed over every state-action pair.
    Control { env: &'a ActionMdp, embeddings: &'a DMatrix<f64> },
    /// Mean loss over seeded minibatches of a transition log.
    Sampled { batch: &'a TransitionBatch, batch_size: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    /// Checkpoint cadence; checkpoints are also taken at step 0 and the last step.
    pub checkpoint_every: Option<usize>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("step,loss,grad_norm\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.step, fmt_f64(r.loss), fmt_f64(r.grad_norm)));
    }
    out
}

const CHECKPOINT_FORMAT: &str = "tdlab-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// Immutable snapshot of a network and its optimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub step: usize,
    pub seed: u64,
    pub net: TinyNet,
    pub optimizer: OptimizerState,
}

impl Checkpoint {
    pub fn capture(net: &TinyNet, optimizer: &OptimizerState, step: usize, seed: u64) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            step,
            seed,
            net: net.clone(),
            optimizer: optimizer.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cp: Checkpoint = serde_json::from_str(text)?;
        if cp.format != CHECKPOINT_FORMAT || cp.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!("unsupported checkpoint {} v{}", cp.format, cp.version)));
        }
        check_len(cp.net.shape().parameter_count(), cp.net.params().len())?;
        if !cp.optimizer.is_compatible(cp.net.parameter_count()) {
            return Err(Error::Capability("checkpoint optimizer state does not match its parameters".into()));
        }
        Ok(cp)
    }
}

#[derive(Clone, Debug)]
pub struct TrainingRun {
    pub net: TinyNet,
    pub optimizer: OptimizerState,
    pub checkpoints: Vec<Checkpoint>,
    pub log: Vec<LogRow>,
}

/// Loss and gradient of a value objective on the given data.
pub fn value_loss_gradient(
    net: &TinyNet,
    data: &TrainingData<'_>,
    objective: &ValueObjective,
    minibatch: Option<&[usize]>,
) -> Result<(f64, Vec<f64>)> {
    let shape = net.shape();
    let params = net.params();
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    match *data {
        TrainingData::Expected { mdp, embeddings, states } => {
            check_value_problem(net, mdp, embeddings)?;
            let all: Vec<usize>;
            let states = match states {
                Some(s) => s,
                None => {
                    all = (0..mdp.n_states()).collect();
                    &all
                }
            };
            let targets = match objective {
                ValueObjective::Td => bellman_targets(net, mdp, embeddings)?,
                ValueObjective::McRegression => mdp.value_function()?.into_inner(),
                ValueObjective::Regression { targets } => {
                    check_len(mdp.n_states(), targets.len())?;
                    targets.clone()
                }
            };
            for &s in states {
                if s >= mdp.n_states() {
                    return Err(Error::Argument(format!("state {s} out of range")));
                }
                let x = row_vec(embeddings, s);
                vjp_generic(shape, params, &x, &mut grad, |out| {
                    let err = out[0] - targets[s];
                    loss += 0.5 * err * err;
                    vec![err]
                });
            }
        }
        TrainingData::Control { env, embeddings } => {
            let n_actions = match net.head() {
                Head::QValues { n_actions } if n_actions == env.n_actions() => n_actions,
                head => return Err(Error::Argument(format!("control needs a q-value head with {} actions, got {head:?}", env.n_actions()))),
            };
            check_len(env.n_states(), embeddings.nrows())?;
            check_len(net.input_dim(), embeddings.ncols())?;
            let targets = match objective {
                ValueObjective::Td => {
                    let q = DMatrix::from_fn(env.n_states(), n_actions, |s, a| {
                        raw_output_generic(shape, params, &row_vec(embeddings, s))[a]
                    });
                    let v = DVector::from_fn(env.n_states(), |s, _| q.row(s).max());
                    env.q_from_values(&v)?
                }
                ValueObjective::McRegression => env.optimal_q(1e-10)?,
                ValueObjective::Regression { .. } => {
                    return Err(Error::Argument("explicit regression targets are per state, not per action".into()))
                }
            };
            for s in 0..env.n_states() {
                let x = row_vec(embeddings, s);
                vjp_generic(shape, params, &x, &mut grad, |out| {
                    (0..n_actions)
                        .map(|a| {
                            let err = out[a] - targets[(s, a)];
                            loss += 0.5 * err * err;
                            err
                        })
                        .collect()
                });
            }
        }
        TrainingData::Sampled { batch, .. } => {
            if *objective != ValueObjective::Td {
                return Err(Error::Argument("sampled transitions only support the td objective".into()));
            }
            batch.check_compatible(net)?;
            let all: Vec<usize>;
            let picks = match minibatch {
                Some(m) => m,
                None => {
                    all = (0..batch.len()).collect();
                    &all
                }
            };
            if picks.is_empty() {
                return Err(Error::Argument("empty minibatch".into()));
            }
            let scale = 1.0 / picks.len() as f64;
            for &i in picks {
                let (l, g) = transition_loss_gradient(net, batch.get(i), batch.discount())?;
                loss += l * scale;
                for (acc, v) in grad.iter_mut().zip(g) {
                    *acc += v * scale;
                }
            }
        }
    }
    Ok((loss, grad))
}

/// Trains a value or action-value network, taking checkpoints along the way.
pub fn train_value_net(
    net: &TinyNet,
    data: TrainingData<'_>,
    objective: &ValueObjective,
    optimizer: &OptimizerState,
    config: TrainConfig,
) -> Result<TrainingRun> {
    if !optimizer.is_compatible(net.parameter_count()) {
        return Err(Error::Capability("optimizer state does not match the network".into()));
    }
    if let TrainingData::Sampled { batch, batch_size } = data {
        if batch.is_empty() || batch_size == 0 {
            return Err(Error::Argument("sampled training needs transitions and a positive batch size".into()));
        }
    }
    if config.checkpoint_every == Some(0) {
        return Err(Error::Argument("checkpoint cadence must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net = net.clone();
    let mut opt = optimizer.clone();
    let mut checkpoints = vec![Checkpoint::capture(&net, &opt, 0, config.seed)];
    let mut log = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let minibatch = match data {
            TrainingData::Sampled { batch, batch_size } => {
                Some((0..batch_size).map(|_| rng.random_range(0..batch.len())).collect::<Vec<_>>())
            }
            _ => None,
        };
        let (loss, grad) = value_loss_gradient(&net, &data, objective, minibatch.as_deref())?;
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::Numeric(format!(
                "training halted at step {step}: loss {loss}, gradient norm {grad_norm}"
            )));
        }
        log.push(LogRow { step, loss, grad_norm });
        opt.step(net.params_mut(), &grad)?;
        let done = step + 1;
        if config.checkpoint_every.is_some_and(|c| done % c == 0) || done == config.steps {
            checkpoints.push(Checkpoint::capture(&net, &opt, done, config.seed));
        }
    }
    Ok(TrainingRun { net, optimizer: opt, checkpoints, log })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyObjective {
    /// Batch-mean return baseline.
    ReinforceWithBaseline,
    /// Value output on the actor's own trunk.
    ActorCriticShared,
    /// Separate critic network.
    ActorCriticSeparate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySample {
    pub state: Vec<f64>,
    pub action: usize,
    pub ret: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyLossWeights {
    /// Entropy bonus λ; the loss subtracts λ·H.
    pub entropy: f64,
    /// Weight of the ½(V − G)² critic loss.
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateGradient {
    pub loss: f64,
    pub policy_loss: f64,
    pub entropy: f64,
    pub value_loss: f64,
    pub actor: Vec<f64>,
    /// Present for separate critics.
    pub critic: Option<Vec<f64>>,
}

fn check_policy_nets(objective: PolicyObjective, actor: &TinyNet, critic: Option<&TinyNet>) -> Result<usize> {
    match (objective, actor.head(), critic) {
        (PolicyObjective::ReinforceWithBaseline, Head::PolicyLogits { n_actions }, None) => Ok(n_actions),
        (PolicyObjective::ActorCriticShared, Head::ActorCritic { n_actions }, None) => Ok(n_actions),
        (PolicyObjective::ActorCriticSeparate, Head::PolicyLogits { n_actions }, Some(c)) => {
            if c.head() != Head::ScalarValue {
                return Err(Error::Argument("the separate critic needs a scalar-value head".into()));
            }
            check_len(actor.input_dim(), c.input_dim())?;
            Ok(n_actions)
        }
        (o, h, c) => Err(Error::Argument(format!(
            "{o:?} is incompatible with a {h:?} actor and {} critic",
            if c.is_some() { "a separate" } else { "no" }
        ))),
    }
}

/// Baselines b_i evaluated at the current parameters (held constant in the surrogate).
pub fn surrogate_baselines(
    actor: &TinyNet,
    critic: Option<&TinyNet>,
    samples: &[PolicySample],
    objective: PolicyObjective,
) -> Result<Vec<f64>> {
    let n_actions = check_policy_nets(objective, actor, critic)?;
    match objective {
        PolicyObjective::ReinforceWithBaseline => {
            let mean = samples.iter().map(|s| s.ret).sum::<f64>() / samples.len().max(1) as f64;
            Ok(vec![mean; samples.len()])
        }
        PolicyObjective::ActorCriticShared => {
            samples.iter().map(|s| Ok(actor.raw_output(&s.state)?[n_actions])).collect()
        }
        PolicyObjective::ActorCriticSeparate => {
            let critic = critic.expect("checked above");
            samples.iter().map(|s| Ok(critic.raw_output(&s.state)?[0])).collect()
        }
    }
}

/// Surrogate loss `mean_i[−(G_i − b_i) log π(a_i|x_i) − λH(π(x_i)) + c·½(V(x_i) − G_i)²]`
/// and its gradients, with the baselines held fixed.
pub fn policy_surrogate(
    actor: &TinyNet,
    critic: Option<&TinyNet>,
    samples: &[PolicySample],
    objective: PolicyObjective,
    weights: PolicyLossWeights,
    baselines: &[f64],
) -> Result<SurrogateGradient> {
    let n_actions = check_policy_nets(objective, actor, critic)?;
    check_len(samples.len(), baselines.len())?;
    if samples.is_empty() {
        return Err(Error::Argument("empty policy batch".into()));
    }
    let scale = 1.0 / samples.len() as f64;
    let mut out = SurrogateGradient {
        loss: 0.0,
        policy_loss: 0.0,
        entropy: 0.0,
        value_loss: 0.0,
        actor: vec![0.0; actor.parameter_count()],
        critic: critic.map(|c| vec![0.0; c.parameter_count()]),
    };
    let with_value = objective != PolicyObjective::ReinforceWithBaseline;
    for (sample, &b) in samples.iter().zip(baselines) {
        check_len(actor.input_dim(), sample.state.len())?;
        if sample.action >= n_actions {
            return Err(Error::Argument(format!("sampled action {} out of range", sample.action)));
        }
        let adv = sample.ret - b;
        let (mut pl, mut ent, mut vl) = (0.0, 0.0, 0.0);
        vjp_generic(actor.shape(), actor.params(), &sample.state, &mut out.actor, |raw| {
            let logp = log_softmax(&raw[..n_actions]);
            let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
            let h: f64 = -probs.iter().zip(&logp).map(|(p, l)| p * l).sum::<f64>();
            pl = -adv * logp[sample.action];
            ent = h;
            let mut cot: Vec<f64> = probs
                .iter()
                .zip(&logp)
                .map(|(p, l)| adv * p + weights.entropy * p * (l + h))
                .collect();
            cot[sample.action] -= adv;
            cot.iter_mut().for_each(|c| *c *= scale);
            if objective == PolicyObjective::ActorCriticShared {
                let err = raw[n_actions] - sample.ret;
                vl = 0.5 * err * err;
                cot.push(weights.value * err * scale);
            }
            cot
        });
        if let (Some(c), Some(cg)) = (critic, out.critic.as_mut()) {
            vjp_generic(c.shape(), c.params(), &sample.state, cg, |raw| {
                let err = raw[0] - sample.ret;
                vl = 0.5 * err * err;
                vec![weights.value * err * scale]
            });
        }
        out.policy_loss += pl * scale;
        out.entropy += ent * scale;
        if with_value {
            out.value_loss += vl * scale;
        }
    }
    out.loss = out.policy_loss - weights.entropy * out.entropy + weights.value * out.value_loss;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyTrainConfig {
    pub steps: usize,
    pub seed: u64,
    pub episodes_per_step: usize,
    pub horizon: usize,
    pub weights: PolicyLossWeights,
}

#[derive(Clone, Debug)]
pub struct PolicyTrainingRun {
    pub actor: TinyNet,
    pub critic: Option<TinyNet>,
    pub log: Vec<LogRow>,
}

/// Rolls out episodes from uniformly drawn start states and returns
/// discounted returns-to-go for every visited step.
pub fn sample_episodes(
    actor: &TinyNet,
    env: &ActionMdp,
    embeddings: &DMatrix<f64>,
    episodes: usize,
    horizon: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PolicySample>> {
    check_len(env.n_states(), embeddings.nrows())?;
    let mut samples = Vec::with_capacity(episodes * horizon);
    for _ in 0..episodes {
        let mut s = rng.random_range(0..env.n_states());
        let mut episode = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            let x = row_vec(embeddings, s);
            let probs = actor.policy(&x)?;
            check_len(env.n_actions(), probs.len())?;
            let a = sample_categorical(probs.into_iter(), rng);
            episode.push((x, a, env.reward(s, a)));
            s = env.next_state(s, a);
        }
        let mut g = 0.0;
        let mut tail = Vec::with_capacity(episode.len());
        for (x, a, r) in episode.into_iter().rev() {
            g = r + env.discount() * g;
            tail.push(PolicySample { state: x, action: a, ret: g });
        }
        tail.reverse();
        samples.extend(tail);
    }
    Ok(samples)
}

/// On-policy Monte Carlo policy-gradient training on a deterministic environment.
pub fn train_policy_net(
    actor: &TinyNet,
    critic: Option<(&TinyNet, &OptimizerState)>,
    env: &ActionMdp,
    embeddings: &DMatrix<f64>,
    objective: PolicyObjective,
    optimizer: &OptimizerState,
    config: PolicyTrainConfig,
) -> Result<PolicyTrainingRun> {
    check_policy_nets(objective, actor, critic.map(|c| c.0))?;
    if actor.head().n_actions() != Some(env.n_actions()) {
        return Err(Error::Argument(format!("actor head {:?} does not match {} actions", actor.head(), env.n_actions())));
    }
    check_len(actor.input_dim(), embeddings.ncols())?;
    if config.episodes_per_step == 0 || config.horizon == 0 {
        return Err(Error::Argument("policy training needs episodes and a positive horizon".into()));
    }
    if !optimizer.is_compatible(actor.parameter_count()) {
        return Err(Error::Capability("optimizer state does not match the actor".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut actor = actor.clone();
    let mut opt = optimizer.clone();
    let mut critic = critic.map(|(c, o)| (c.clone(), o.clone()));
    if let Some((c, o)) = &critic {
        if !o.is_compatible(c.parameter_count()) {
            return Err(Error::Capability("optimizer state does not match the critic".into()));
        }
    }
    let mut log = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let samples = sample_episodes(&actor, env, embeddings, config.episodes_per_step, config.horizon, &mut rng)?;
        let critic_net = critic.as_ref().map(|c| &c.0);
        let baselines = surrogate_baselines(&actor, critic_net, &samples, objective)?;
        let g = policy_surrogate(&actor, critic_net, &samples, objective, config.weights, &baselines)?;
        let mut sq = g.actor.iter().map(|v| v * v).sum::<f64>();
        if let Some(cg) = &g.critic {
            sq += cg.iter().map(|v| v * v).sum::<f64>();
        }
        let grad_norm = sq.sqrt();
        if !g.loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::Numeric(format!(
                "policy training halted at step {step}: loss {}, gradient norm {grad_norm}",
                g.loss
            )));
        }
        log.push(LogRow { step, loss: g.loss, grad_norm });
        opt.step(actor.params_mut(), &g.actor)?;
        if let (Some((c, o)), Some(cg)) = (critic.as_mut(), g.critic.as_ref()) {
            o.step(c.params_mut(), cg)?;
        }
    }
    Ok(PolicyTrainingRun { actor, critic: critic.map(|c| c.0), log })
}

/// Seeded ±1 target per state.
pub fn random_sign_targets(n_states: usize, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DVector::from_fn(n_states, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 })
}

/// Entropy of a probability vector (natural log, zero-probability terms skipped).
pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// Probabilities of a policy head evaluated on raw logits.
pub fn policy_from_logits(logits: &[f64]) -> Vec<f64> {
    softmax(logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{build_random_walk_mdp, gridworld, GridReward, RewardSpec};
    use crate::net::{Activation, Init};
    use crate::optim::OptimizerKind;
    use crate::tabular::discrete_td_sweep;
    use crate::mdp::ValueFunction;
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};

    fn small_mdp(seed: u64) -> MarkovMdp {
        build_random_walk_mdp(5, 0.6, seed, 0.9, &RewardSpec::Gaussian).unwrap()
    }

    fn features(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0))
    }

    fn tanh_net(sizes: Vec<usize>, seed: u64) -> TinyNet {
        let shape = NetShape::new(sizes, Activation::Tanh, true).unwrap();
        TinyNet::new(shape, Head::ScalarValue, Init::Glorot, seed).unwrap()
    }

    fn one_hot_net(values: &DVector<f64>) -> TinyNet {
        let n = values.len();
        let shape = NetShape::new(vec![n, 1], Activation::Tanh, false).unwrap();
        TinyNet::from_params(shape, Head::ScalarValue, values.as_slice().to_vec()).unwrap()
    }

    fn rel(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        (a - b).norm() / a.norm().max(b.norm()).max(1e-300)
    }

    #[test]
    fn semi_gradient_vanishes_at_value_function() {
        let mdp = small_mdp(1);
        let v = mdp.value_function().unwrap().into_inner();
        let f = td_semi_gradient(&one_hot_net(&v), &mdp, &DMatrix::identity(5, 5)).unwrap();
        assert!(f.amax() < 1e-12);
    }

    #[test]
    fn one_hot_linear_net_matches_tabular_sweeps() {
        let mdp = small_mdp(2);
        let emb = DMatrix::identity(5, 5);
        let v0 = DVector::from_vec(vec![0.5, -1.0, 2.0, 0.0, 1.5]);
        let alpha = 0.3;
        let mut net = one_hot_net(&v0);
        let mut opt = OptimizerState::sgd(alpha, 5).unwrap();
        let data = TrainingData::Expected { mdp: &mdp, embeddings: &emb, states: None };
        let sweeps = discrete_td_sweep(&ValueFunction::new(v0).unwrap(), &mdp, alpha, 20).unwrap();
        for k in 1..=20 {
            let (_, g) = value_loss_gradient(&net, &data, &ValueObjective::Td, None).unwrap();
            opt.step(net.params_mut(), &g).unwrap();
            let diff = (DVector::from_column_slice(net.params()) - sweeps.snapshots()[k].values()).amax();
            assert!(diff <= 1e-12, "sweep {k}: {diff}");
        }
    }

    #[test]
    fn semi_gradient_is_frozen_target_descent_direction() {
        let mdp = small_mdp(3);
        let emb = features(5, 2, 4);
        let net = tanh_net(vec![2, 8, 1], 5);
        let f = td_semi_gradient(&net, &mdp, &emb).unwrap();
        let frozen = bellman_targets(&net, &mdp, &emb).unwrap();
        let loss = |n: &TinyNet| {
            let v = n.output_column(&emb, 0).unwrap();
            0.5 * (v - &frozen).norm_squared()
        };
        let h = 1e-5;
        let fd = DVector::from_fn(net.parameter_count(), |k, _| {
            let mut plus = net.clone();
            plus.params_mut()[k] += h;
            let mut minus = net.clone();
            minus.params_mut()[k] -= h;
            -(loss(&plus) - loss(&minus)) / (2.0 * h)
        });
        assert!(rel(&f, &fd) < 1e-6);
    }

    #[test]
    fn drift_vanishes_at_fixed_point() {
        let mdp = small_mdp(6);
        let v = mdp.value_function().unwrap().into_inner();
        let d = second_order_drift(&one_hot_net(&v), &mdp, &DMatrix::identity(5, 5), DriftRoute::Exact).unwrap();
        assert!(d.f1.amax() < 1e-10);
    }

    #[test]
    fn linear_drift_matches_closed_form() {
        let mdp = small_mdp(7);
        let phi = features(5, 3, 8);
        let shape = NetShape::new(vec![3, 1], Activation::Tanh, false).unwrap();
        let net = TinyNet::from_params(shape, Head::ScalarValue, vec![0.3, -0.2, 0.9]).unwrap();
        let d = second_order_drift(&net, &mdp, &phi, DriftRoute::FiniteDifference).unwrap();
        let gp = mdp.transition() * mdp.discount();
        let a = phi.transpose() * (&gp - DMatrix::identity(5, 5)) * &phi;
        let w = DVector::from_vec(vec![0.3, -0.2, 0.9]);
        let f = &a * &w + phi.transpose() * mdp.reward();
        let penalty = -(phi.transpose() * &phi) * &f;
        let alignment = phi.transpose() * &gp * &phi * &f;
        assert!(rel(&d.f, &f) < 1e-12);
        assert!(rel(&d.penalty, &penalty) < 1e-6);
        assert!(rel(&d.alignment, &alignment) < 1e-12);
        assert!(rel(&d.f1, &(&a * &f)) < 1e-6);
    }

    #[test]
    fn drift_routes_agree() {
        let mdp = small_mdp(9);
        let emb = features(5, 2, 10);
        let net = tanh_net(vec![2, 8, 1], 11);
        let fd = second_order_drift(&net, &mdp, &emb, DriftRoute::FiniteDifference).unwrap();
        let exact = second_order_drift(&net, &mdp, &emb, DriftRoute::Exact).unwrap();
        assert!(rel(&fd.f1, &exact.f1) < 1e-4);
    }

    #[test]
    fn drift_is_derivative_of_f_along_f() {
        let mdp = small_mdp(12);
        let emb = features(5, 2, 13);
        let net = tanh_net(vec![2, 6, 1], 14);
        let d = second_order_drift(&net, &mdp, &emb, DriftRoute::Exact).unwrap();
        let h = 1e-5;
        let at = |s: f64| {
            let mut n = net.clone();
            for (p, fi) in n.params_mut().iter_mut().zip(d.f.iter()) {
                *p += s * fi;
            }
            td_semi_gradient(&n, &mdp, &emb).unwrap()
        };
        let fd = (at(h) - at(-h)) / (2.0 * h);
        assert!(rel(&fd, &d.f1) < 1e-6);
    }

    #[test]
    fn drift_refuses_large_nets() {
        let mdp = small_mdp(1);
        let net = tanh_net(vec![2, 1000, 1], 0);
        let err = second_order_drift(&net, &mdp, &features(5, 2, 0), DriftRoute::Exact).unwrap_err();
        assert!(matches!(err, Error::Capability(_)));
    }

    #[test]
    fn scaling_at_fixed_point_has_no_gap() {
        let mdp = small_mdp(15);
        let v = mdp.value_function().unwrap().into_inner();
        let report =
            verify_second_order(&one_hot_net(&v), &mdp, &DMatrix::identity(5, 5), &[0.1, 0.05], 1.0, 1e-2).unwrap();
        assert!(report.rows.iter().all(|r| r.gap_corrected < 1e-10 && r.gap_uncorrected < 1e-10));
        assert_eq!(report.slope_corrected, None);
    }

    #[test]
    fn scaling_rejects_ascending_steps() {
        let mdp = small_mdp(15);
        let net = tanh_net(vec![5, 1], 0);
        assert!(verify_second_order(&net, &mdp, &DMatrix::identity(5, 5), &[0.01, 0.02], 1.0, 1e-3).is_err());
        assert!(verify_second_order(&net, &mdp, &DMatrix::identity(5, 5), &[0.3], 1.0, 1e-3).is_err());
    }

    #[test]
    fn slope_fit_recovers_power_law() {
        let x = [0.04, 0.02, 0.01];
        let y: Vec<f64> = x.iter().map(|a| 3.0 * a * a).collect();
        assert!((log_log_slope(&x, &y).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_reward_td_from_zero_leaves_parameters() {
        let mdp = small_mdp(16).with_reward(DVector::zeros(5)).unwrap();
        let emb = features(5, 2, 17);
        let shape = NetShape::new(vec![2, 4, 1], Activation::Tanh, true).unwrap();
        let net = TinyNet::new(shape, Head::ScalarValue, Init::Zeros, 0).unwrap();
        let opt = OptimizerState::new(OptimizerKind::adam(), 0.1, net.parameter_count()).unwrap();
        let data = TrainingData::Expected { mdp: &mdp, embeddings: &emb, states: None };
        let cfg = TrainConfig { steps: 25, checkpoint_every: Some(10), seed: 0 };
        let run = train_value_net(&net, data, &ValueObjective::Td, &opt, cfg).unwrap();
        assert_eq!(run.net.params(), net.params());
        let steps: Vec<usize> = run.checkpoints.iter().map(|c| c.step).collect();
        assert_eq!(steps, vec![0, 10, 20, 25]);
    }

    #[test]
    fn training_is_seed_deterministic_and_checkpoints_round_trip() {
        let env = gridworld(3, 3, &GridReward::Dense { seed: 1 }, 0.9).unwrap();
        let emb = env.embeddings(crate::mdp::EmbeddingKind::Coordinates).unwrap();
        let behaviour = DMatrix::from_element(9, 4, 0.25);
        let batch = TransitionBatch::sample_from_action_mdp(&env, &emb, &behaviour, 64, 3).unwrap();
        let shape = NetShape::new(vec![2, 8, 4], Activation::Tanh, true).unwrap();
        let net = TinyNet::new(shape, Head::QValues { n_actions: 4 }, Init::Glorot, 4).unwrap();
        let opt = OptimizerState::new(OptimizerKind::adam(), 0.01, net.parameter_count()).unwrap();
        let data = TrainingData::Sampled { batch: &batch, batch_size: 8 };
        let cfg = TrainConfig { steps: 30, checkpoint_every: Some(15), seed: 5 };
        let a = train_value_net(&net, data, &ValueObjective::Td, &opt, cfg).unwrap();
        let b = train_value_net(&net, data, &ValueObjective::Td, &opt, cfg).unwrap();
        assert_eq!(a.net, b.net);
        let cp = &a.checkpoints[1];
        assert_eq!(&Checkpoint::from_json(&cp.to_json().unwrap()).unwrap(), cp);
        assert!(log_csv(&a.log).starts_with("step,loss,grad_norm\n"));
    }

    #[test]
    fn non_finite_loss_halts_training() {
        let mdp = small_mdp(18);
        let emb = DMatrix::identity(5, 5);
        let net = one_hot_net(&DVector::from_element(5, 1.0));
        let opt = OptimizerState::sgd(1e200, 5).unwrap();
        let data = TrainingData::Expected { mdp: &mdp, embeddings: &emb, states: None };
        let cfg = TrainConfig { steps: 10, checkpoint_every: None, seed: 0 };
        let err = train_value_net(&net, data, &ValueObjective::McRegression, &opt, cfg).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    fn actor_critic_batch(seed: u64) -> (TinyNet, TinyNet, TinyNet, Vec<PolicySample>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<PolicySample> = (0..6)
            .map(|_| PolicySample {
                state: vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                action: rng.random_range(0..3),
                ret: rng.random_range(-2.0..2.0),
            })
            .collect();
        let sh = |out| NetShape::new(vec![2, 5, out], Activation::Tanh, true).unwrap();
        let actor = TinyNet::new(sh(3), Head::PolicyLogits { n_actions: 3 }, Init::Glorot, seed).unwrap();
        let shared = TinyNet::new(sh(4), Head::ActorCritic { n_actions: 3 }, Init::Glorot, seed + 1).unwrap();
        let critic = TinyNet::new(sh(1), Head::ScalarValue, Init::Glorot, seed + 2).unwrap();
        (actor, shared, critic, samples)
    }

    fn fd_check(actor: &TinyNet, critic: Option<&TinyNet>, samples: &[PolicySample], objective: PolicyObjective) -> f64 {
        let weights = PolicyLossWeights { entropy: 0.05, value: 0.5 };
        let base = surrogate_baselines(actor, critic, samples, objective).unwrap();
        let g = policy_surrogate(actor, critic, samples, objective, weights, &base).unwrap();
        let h = 1e-5;
        let fd = DVector::from_fn(actor.parameter_count(), |k, _| {
            let mut plus = actor.clone();
            plus.params_mut()[k] += h;
            let mut minus = actor.clone();
            minus.params_mut()[k] -= h;
            let lp = policy_surrogate(&plus, critic, samples, objective, weights, &base).unwrap().loss;
            let lm = policy_surrogate(&minus, critic, samples, objective, weights, &base).unwrap().loss;
            (lp - lm) / (2.0 * h)
        });
        let mut worst = rel(&DVector::from_vec(g.actor), &fd);
        if let (Some(c), Some(cg)) = (critic, g.critic) {
            let fdc = DVector::from_fn(c.parameter_count(), |k, _| {
                let mut plus = c.clone();
                plus.params_mut()[k] += h;
                let mut minus = c.clone();
                minus.params_mut()[k] -= h;
                let lp = policy_surrogate(actor, Some(&plus), samples, objective, weights, &base).unwrap().loss;
                let lm = policy_surrogate(actor, Some(&minus), samples, objective, weights, &base).unwrap().loss;
                (lp - lm) / (2.0 * h)
            });
            worst = worst.max(rel(&DVector::from_vec(cg), &fdc));
        }
        worst
    }

    #[test]
    fn separate_critic_is_disjoint() {
        let (actor, _, critic, samples) = actor_critic_batch(3);
        let base = surrogate_baselines(&actor, Some(&critic), &samples, PolicyObjective::ActorCriticSeparate).unwrap();
        let weights = PolicyLossWeights { entropy: 0.0, value: 1.0 };
        let g = policy_surrogate(&actor, Some(&critic), &samples, PolicyObjective::ActorCriticSeparate, weights, &base)
            .unwrap();
        let no_value = PolicyLossWeights { entropy: 0.0, value: 0.0 };
        let g0 = policy_surrogate(&actor, Some(&critic), &samples, PolicyObjective::ActorCriticSeparate, no_value, &base)
            .unwrap();
        assert_eq!(g.actor, g0.actor);
        assert!(g0.critic.unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bandit_prefers_better_arm() {
        let env = ActionMdp::new(vec![vec![0, 0]], vec![vec![1.0, 0.0]], 0.0).unwrap();
        let emb = DMatrix::from_element(1, 1, 1.0);
        let shape = NetShape::new(vec![1, 2], Activation::Tanh, true).unwrap();
        let actor = TinyNet::new(shape, Head::PolicyLogits { n_actions: 2 }, Init::Zeros, 0).unwrap();
        let opt = OptimizerState::sgd(0.5, actor.parameter_count()).unwrap();
        let cfg = PolicyTrainConfig {
            steps: 200,
            seed: 1,
            episodes_per_step: 16,
            horizon: 1,
            weights: PolicyLossWeights { entropy: 0.0, value: 0.0 },
        };
        let run = train_policy_net(&actor, None, &env, &emb, PolicyObjective::ReinforceWithBaseline, &opt, cfg).unwrap();
        assert!(run.actor.policy(&[1.0]).unwrap()[0] > 0.9);
    }

    #[test]
    fn entropy_bonus_alone_drives_policy_uniform() {
        let env = ActionMdp::new(vec![vec![0, 0, 0]], vec![vec![0.0; 3]], 0.5).unwrap();
        let emb = DMatrix::from_element(1, 1, 1.0);
        let shape = NetShape::new(vec![1, 3], Activation::Tanh, false).unwrap();
        let actor = TinyNet::from_params(shape, Head::PolicyLogits { n_actions: 3 }, vec![2.0, -1.0, 0.5]).unwrap();
        let opt = OptimizerState::sgd(1.0, 3).unwrap();
        let cfg = PolicyTrainConfig {
            steps: 300,
            seed: 2,
            episodes_per_step: 2,
            horizon: 3,
            weights: PolicyLossWeights { entropy: 0.5, value: 0.0 },
        };
        let run = train_policy_net(&actor, None, &env, &emb, PolicyObjective::ReinforceWithBaseline, &opt, cfg).unwrap();
        let p = run.actor.policy(&[1.0]).unwrap();
        assert!(p.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-3), "{p:?}");
    }

    #[test]
    fn mismatched_objective_and_heads_are_rejected() {
        let (actor, shared, critic, samples) = actor_critic_batch(1);
        let base = vec![0.0; samples.len()];
        let w = PolicyLossWeights { entropy: 0.0, value: 1.0 };
        assert!(policy_surrogate(&shared, None, &samples, PolicyObjective::ReinforceWithBaseline, w, &base).is_err());
        assert!(policy_surrogate(&actor, None, &samples, PolicyObjective::ActorCriticSeparate, w, &base).is_err());
        assert!(policy_surrogate(&actor, Some(&critic), &samples, PolicyObjective::ActorCriticShared, w, &base).is_err());
    }

    #[test]
    fn transition_batch_validates() {
        let t = |d: usize, action| Transition {
            state: vec![0.0; d],
            state_index: None,
            action,
            reward: 0.0,
            next_state: vec![0.0; d],
            next: NextAction::Greedy,
        };
        assert!(TransitionBatch::new(vec![t(2, 0), t(3, 0)], 0.9).is_err());
        let batch = TransitionBatch::new(vec![t(2, 0), t(2, 5)], 0.9).unwrap();
        let shape = NetShape::new(vec![2, 3], Activation::Tanh, true).unwrap();
        let net = TinyNet::new(shape, Head::QValues { n_actions: 3 }, Init::Zeros, 0).unwrap();
        assert!(batch.check_compatible(&net).is_err());
    }

    #[test]
    fn mc_regression_fits_gridworld_values() {
        let env = gridworld(5, 5, &GridReward::Dense { seed: 3 }, 0.9).unwrap();
        let policy = DMatrix::from_element(25, 4, 0.25);
        let mdp = env.induce(&policy).unwrap();
        let emb = mdp.embeddings(crate::mdp::EmbeddingKind::OneHot).unwrap();
        let shape = NetShape::new(vec![25, 16, 1], Activation::Tanh, true).unwrap();
        let net = TinyNet::new(shape, Head::ScalarValue, Init::Glorot, 1).unwrap();
        let opt = OptimizerState::new(OptimizerKind::adam(), 0.01, net.parameter_count()).unwrap();
        let data = TrainingData::Expected { mdp: &mdp, embeddings: &emb, states: None };
        let cfg = TrainConfig { steps: 3000, checkpoint_every: None, seed: 0 };
        let run = train_value_net(&net, data, &ValueObjective::McRegression, &opt, cfg).unwrap();
        let v = mdp.value_function().unwrap().into_inner();
        let mse = (run.net.output_column(&emb, 0).unwrap() - v).norm_squared() / 25.0;
        assert!(mse < 1e-3, "mse {mse}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]
        #[test]
        fn surrogate_gradients_match_finite_differences(seed in 0u64..10_000) {
            let (actor, shared, critic, samples) = actor_critic_batch(seed);
            prop_assert!(fd_check(&actor, None, &samples, PolicyObjective::ReinforceWithBaseline) < 1e-4);
            prop_assert!(fd_check(&shared, None, &samples, PolicyObjective::ActorCriticShared) < 1e-4);
            prop_assert!(fd_check(&actor, Some(&critic), &samples, PolicyObjective::ActorCriticSeparate) < 1e-4);
        }

        #[test]
        fn transition_gradients_match_finite_differences(seed in 0u64..10_000, policy in any::<bool>()) {
            let head = if policy { Head::PolicyLogits { n_actions: 3 } } else { Head::QValues { n_actions: 3 } };
            let shape = NetShape::new(vec![2, 5, 3], Activation::Tanh, true).unwrap();
            let net = TinyNet::new(shape, head, Init::Glorot, seed).unwrap();
            let t = Transition {
                state: vec![0.4, -0.3],
                state_index: None,
                action: (seed % 3) as usize,
                reward: 0.7,
                next_state: vec![-0.1, 0.8],
                next: NextAction::Greedy,
            };
            let (_, g) = transition_loss_gradient(&net, &t, 0.9).unwrap();
            let target = if policy { 0.0 } else { td_target(&net, &t, 0.9).unwrap() };
            let loss = |n: &TinyNet| {
                let out = n.raw_output(&t.state).unwrap();
                if policy { -log_softmax(&out)[t.action] } else { 0.5 * (out[t.action] - target).powi(2) }
            };
            let h = 1e-5;
            let fd = DVector::from_fn(net.parameter_count(), |k, _| {
                let mut p = net.clone();
                p.params_mut()[k] += h;
                let mut m = net.clone();
                m.params_mut()[k] -= h;
                (loss(&p) - loss(&m)) / (2.0 * h)
            });
            prop_assert!(rel(&DVector::from_vec(g), &fd) < 1e-4);
        }
    }
}
