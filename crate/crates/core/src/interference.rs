//! Update matrices, update rank and Fourier spectra of value predictions.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::approx::{sample_categorical, transition_loss_gradient, Checkpoint, TransitionBatch};
use crate::error::{check_len, Error, Result};
use crate::linalg::fmt_f64;
use crate::mdp::ActionMdp;
use crate::net::{Head, TinyNet};
use crate::optim::OptimizerState;

/// Default number of probe transitions.
pub const DEFAULT_PROBES: usize = 32;
/// Default relative singular-value threshold.
pub const DEFAULT_EPSILON: f64 = 0.1;

/// A set of probes: each has a state, an action and a training loss.
pub trait ProbeSet {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn state(&self, i: usize) -> &[f64];
    fn action(&self, i: usize) -> usize;
    fn state_index(&self, _i: usize) -> Option<usize> {
        None
    }
    /// Gradient of probe `i`'s loss at the net's current parameters.
    fn loss_gradient(&self, net: &TinyNet, i: usize) -> Result<Vec<f64>>;
}

impl ProbeSet for TransitionBatch {
    fn len(&self) -> usize {
        TransitionBatch::len(self)
    }
    fn state(&self, i: usize) -> &[f64] {
        &self.get(i).state
    }
    fn action(&self, i: usize) -> usize {
        self.get(i).action
    }
    fn state_index(&self, i: usize) -> Option<usize> {
        self.get(i).state_index
    }
    fn loss_gradient(&self, net: &TinyNet, i: usize) -> Result<Vec<f64>> {
        Ok(transition_loss_gradient(net, self.get(i), self.discount())?.1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Reduction {
    MaxOverActions,
    MeanOverActions,
    FixedAction { action: usize },
    /// The action recorded with the evaluated probe.
    TakenAction,
}

impl Reduction {
    fn apply(self, out: &[f64], taken: usize) -> f64 {
        match self {
            _ if out.len() == 1 => out[0],
            Reduction::MaxOverActions => out.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            Reduction::MeanOverActions => out.iter().sum::<f64>() / out.len() as f64,
            Reduction::FixedAction { action } => out[action],
            Reduction::TakenAction => out[taken],
        }
    }

    /// Cotangent selecting the reduced output (a subgradient for the max).
    fn cotangent(self, out: &[f64], taken: usize) -> Vec<f64> {
        let mut cot = vec![0.0; out.len()];
        if out.len() == 1 {
            cot[0] = 1.0;
            return cot;
        }
        match self {
            Reduction::MaxOverActions => {
                let best = (0..out.len()).fold(0, |b, a| if out[a] > out[b] { a } else { b });
                cot[best] = 1.0;
            }
            Reduction::MeanOverActions => cot.iter_mut().for_each(|c| *c = 1.0 / out.len() as f64),
            Reduction::FixedAction { action } => cot[action] = 1.0,
            Reduction::TakenAction => cot[taken] = 1.0,
        }
        cot
    }

    pub fn label(self) -> String {
        match self {
            Reduction::MaxOverActions => "max-over-actions".into(),
            Reduction::MeanOverActions => "mean-over-actions".into(),
            Reduction::FixedAction { action } => format!("fixed-action-{action}"),
            Reduction::TakenAction => "taken-action".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NetworkKind {
    Value,
    Policy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyNorm {
    L1,
    L2,
}

/// Entry (i, j) is the change of the output at probe i after one
/// optimizer step on probe j.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateMatrix {
    entries: DMatrix<f64>,
    network_kind: NetworkKind,
    reduction: Option<Reduction>,
    norm: Option<PolicyNorm>,
    state_indices: Vec<Option<usize>>,
    actions: Vec<usize>,
}

impl UpdateMatrix {
    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn k(&self) -> usize {
        self.entries.nrows()
    }

    pub fn network_kind(&self) -> NetworkKind {
        self.network_kind
    }

    pub fn reduction(&self) -> Option<Reduction> {
        self.reduction
    }

    pub fn rank(&self, epsilon: f64) -> Result<RankReport> {
        update_rank(&self.entries, epsilon)
    }

    /// Rows and columns reordered by `order`.
    pub fn permuted(&self, order: &[usize]) -> Result<UpdateMatrix> {
        let k = self.k();
        let mut seen = vec![false; k];
        if order.len() != k || order.iter().any(|&i| i >= k || std::mem::replace(&mut seen[i], true)) {
            return Err(Error::Argument("order must be a permutation of the probes".into()));
        }
        Ok(UpdateMatrix {
            entries: DMatrix::from_fn(k, k, |i, j| self.entries[(order[i], order[j])]),
            network_kind: self.network_kind,
            reduction: self.reduction,
            norm: self.norm,
            state_indices: order.iter().map(|&i| self.state_indices[i]).collect(),
            actions: order.iter().map(|&i| self.actions[i]).collect(),
        })
    }

    /// Row-major CSV with one row per probe, preceded by probe metadata.
    pub fn to_csv(&self) -> String {
        let k = self.k();
        let mut out = String::from("probe,state_index,action");
        for j in 0..k {
            out.push_str(&format!(",c{j}"));
        }
        out.push('\n');
        for i in 0..k {
            let state = self.state_indices[i].map(|s| s.to_string()).unwrap_or_default();
            out.push_str(&format!("{i},{state},{}", self.actions[i]));
            for j in 0..k {
                out.push(',');
                out.push_str(&fmt_f64(self.entries[(i, j)]));
            }
            out.push('\n');
        }
        out
    }
}

fn prepare(net: &TinyNet, optimizer: &OptimizerState, probes: &dyn ProbeSet) -> Result<usize> {
    let k = probes.len();
    if k < 2 {
        return Err(Error::Argument(format!("update matrices need at least two probes, got {k}")));
    }
    if !optimizer.is_compatible(net.parameter_count()) {
        return Err(Error::Capability("optimizer state cannot be applied to this network".into()));
    }
    for i in 0..k {
        check_len(net.input_dim(), probes.state(i).len())?;
    }
    Ok(k)
}

/// Parameters after one step on each probe, from clones of the base state.
fn stepped_params(net: &TinyNet, optimizer: &OptimizerState, probes: &dyn ProbeSet) -> Result<Vec<TinyNet>> {
    (0..probes.len())
        .map(|j| {
            let grad = probes.loss_gradient(net, j)?;
            let mut stepped = net.clone();
            let mut opt = optimizer.clone();
            opt.step(stepped.params_mut(), &grad)?;
            Ok(stepped)
        })
        .collect()
}

fn metadata(probes: &dyn ProbeSet) -> (Vec<Option<usize>>, Vec<usize>) {
    ((0..probes.len()).map(|i| probes.state_index(i)).collect(), (0..probes.len()).map(|i| probes.action(i)).collect())
}

/// Value-network update matrix over a transition batch.
pub fn update_matrix(
    net: &TinyNet,
    optimizer: &OptimizerState,
    probes: &TransitionBatch,
    reduction: Reduction,
) -> Result<UpdateMatrix> {
    probes.check_compatible(net)?;
    update_matrix_with(net, optimizer, probes, reduction)
}

/// Value-network update matrix over any probe set.
pub fn update_matrix_with(
    net: &TinyNet,
    optimizer: &OptimizerState,
    probes: &dyn ProbeSet,
    reduction: Reduction,
) -> Result<UpdateMatrix> {
    let k = prepare(net, optimizer, probes)?;
    match net.head() {
        Head::ScalarValue | Head::QValues { .. } => {}
        head => return Err(Error::Argument(format!("value update matrices need a value head, got {head:?}"))),
    }
    if let (Reduction::FixedAction { action }, Some(n)) = (reduction, net.head().n_actions()) {
        if action >= n {
            return Err(Error::Argument(format!("fixed action {action} out of range")));
        }
    }
    let reduce = |n: &TinyNet, i: usize| -> Result<f64> { Ok(reduction.apply(&n.raw_output(probes.state(i))?, probes.action(i))) };
    let base: Vec<f64> = (0..k).map(|i| reduce(net, i)).collect::<Result<_>>()?;
    let stepped = stepped_params(net, optimizer, probes)?;
    let mut entries = DMatrix::zeros(k, k);
    for (j, n) in stepped.iter().enumerate() {
        for i in 0..k {
            entries[(i, j)] = reduce(n, i)? - base[i];
        }
    }
    finish(entries, NetworkKind::Value, Some(reduction), None, probes)
}

/// Policy-network update matrix: entry (i, j) is ‖p_θ(x_i) − p_{θ_j}(x_i)‖.
pub fn policy_update_matrix(
    net: &TinyNet,
    optimizer: &OptimizerState,
    probes: &dyn ProbeSet,
    norm: PolicyNorm,
) -> Result<UpdateMatrix> {
    let k = prepare(net, optimizer, probes)?;
    if !matches!(net.head(), Head::PolicyLogits { .. } | Head::ActorCritic { .. }) {
        return Err(Error::Argument(format!("policy update matrices need a policy head, got {:?}", net.head())));
    }
    let base: Vec<Vec<f64>> = (0..k).map(|i| net.policy(probes.state(i))).collect::<Result<_>>()?;
    let stepped = stepped_params(net, optimizer, probes)?;
    let mut entries = DMatrix::zeros(k, k);
    for (j, n) in stepped.iter().enumerate() {
        for i in 0..k {
            let p = n.policy(probes.state(i))?;
            let diffs = p.iter().zip(&base[i]).map(|(a, b)| (a - b).abs());
            entries[(i, j)] = match norm {
                PolicyNorm::L1 => diffs.sum(),
                PolicyNorm::L2 => diffs.map(|d| d * d).sum::<f64>().sqrt(),
            };
        }
    }
    finish(entries, NetworkKind::Policy, None, Some(norm), probes)
}

fn finish(
    entries: DMatrix<f64>,
    network_kind: NetworkKind,
    reduction: Option<Reduction>,
    norm: Option<PolicyNorm>,
    probes: &dyn ProbeSet,
) -> Result<UpdateMatrix> {
    if entries.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("update matrix has non-finite entries".into()));
    }
    let (state_indices, actions) = metadata(probes);
    Ok(UpdateMatrix { entries, network_kind, reduction, norm, state_indices, actions })
}

/// First-order prediction of the sgd update matrix: −α ∇out_i · ∇loss_j.
pub fn first_order_update_matrix(
    net: &TinyNet,
    step_size: f64,
    probes: &dyn ProbeSet,
    reduction: Reduction,
) -> Result<DMatrix<f64>> {
    let k = probes.len();
    let out_grads: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            let out = net.raw_output(probes.state(i))?;
            net.vjp(probes.state(i), &reduction.cotangent(&out, probes.action(i)))
        })
        .collect::<Result<_>>()?;
    let loss_grads: Vec<Vec<f64>> = (0..k).map(|j| probes.loss_gradient(net, j)).collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(k, k, |i, j| {
        -step_size * out_grads[i].iter().zip(&loss_grads[j]).map(|(a, b)| a * b).sum::<f64>()
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    /// Descending.
    pub singular_values: Vec<f64>,
    pub epsilon: f64,
    pub update_rank: usize,
}

impl RankReport {
    pub fn sigma_max(&self) -> f64 {
        self.singular_values.first().copied().unwrap_or(0.0)
    }
}

/// Number of singular values above `epsilon · σ_max`.
pub fn update_rank(a: &DMatrix<f64>, epsilon: f64) -> Result<RankReport> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::Argument(format!("epsilon must lie in (0, 1), got {epsilon}")));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("cannot take the SVD of a non-finite matrix".into()));
    }
    let svd = a
        .clone()
        .try_svd(false, false, f64::EPSILON, 0)
        .ok_or_else(|| Error::Numeric("singular value decomposition did not converge".into()))?;
    let mut singular_values: Vec<f64> = svd.singular_values.iter().copied().collect();
    singular_values.sort_by(|x, y| y.total_cmp(x));
    let sigma_max = singular_values.first().copied().unwrap_or(0.0);
    let update_rank = if sigma_max == 0.0 {
        0
    } else {
        singular_values.iter().filter(|&&s| s > epsilon * sigma_max).count()
    };
    Ok(RankReport { singular_values, epsilon, update_rank })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankPoint {
    pub checkpoint_step: usize,
    pub update_rank: usize,
    pub sigma_max: f64,
}

/// Update rank at every checkpoint, each with its own optimizer state.
pub fn rank_trajectory(
    checkpoints: &[Checkpoint],
    probes: &dyn ProbeSet,
    reduction: Reduction,
    epsilon: f64,
) -> Result<Vec<RankPoint>> {
    checkpoints
        .iter()
        .map(|cp| {
            let report = update_matrix_with(&cp.net, &cp.optimizer, probes, reduction)?.rank(epsilon)?;
            Ok(RankPoint { checkpoint_step: cp.step, update_rank: report.update_rank, sigma_max: report.sigma_max() })
        })
        .collect()
}

pub fn rank_trajectory_csv(points: &[RankPoint]) -> String {
    let mut out = String::from("checkpoint_step,update_rank,sigma_max\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.checkpoint_step, p.update_rank, fmt_f64(p.sigma_max)));
    }
    out
}

/// Leaf order of a deterministic average-linkage clustering of the rows.
pub fn cluster_order(a: &DMatrix<f64>) -> Vec<usize> {
    let k = a.nrows();
    if k == 0 {
        return Vec::new();
    }
    let dist = DMatrix::from_fn(k, k, |i, j| (a.row(i) - a.row(j)).norm());
    let mut clusters: Vec<Vec<usize>> = (0..k).map(|i| vec![i]).collect();
    while clusters.len() > 1 {
        let mut best = (f64::INFINITY, 0, 1);
        for x in 0..clusters.len() {
            for y in x + 1..clusters.len() {
                let total: f64 = clusters[x].iter().flat_map(|&i| clusters[y].iter().map(move |&j| (i, j))).map(|(i, j)| dist[(i, j)]).sum();
                let d = total / (clusters[x].len() * clusters[y].len()) as f64;
                if d < best.0 {
                    best = (d, x, y);
                }
            }
        }
        let (_, x, y) = best;
        let merged = clusters.remove(y);
        clusters[x].extend(merged);
    }
    clusters.pop().unwrap()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourierSpectrum {
    pub indices: Vec<usize>,
    pub magnitudes: Vec<f64>,
}

impl FourierSpectrum {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,magnitude\n");
        for (i, m) in self.indices.iter().zip(&self.magnitudes) {
            out.push_str(&format!("{i},{}\n", fmt_f64(*m)));
        }
        out
    }
}

/// DFT magnitudes |X_k| of a real series, optionally without index 0.
pub fn fourier_spectrum(series: &[f64], omit_dc: bool) -> Result<FourierSpectrum> {
    let k = series.len();
    if k < 2 {
        return Err(Error::Argument(format!("a spectrum needs at least two samples, got {k}")));
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("series contains non-finite values".into()));
    }
    let mut buf: Vec<Complex<f64>> = series.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(k).process(&mut buf);
    let start = usize::from(omit_dc);
    Ok(FourierSpectrum { indices: (start..k).collect(), magnitudes: buf[start..].iter().map(|c| c.norm()).collect() })
}

/// `k` consecutive states of one rollout under a stochastic policy matrix.
pub fn rollout_states(env: &ActionMdp, policy: &DMatrix<f64>, start: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if policy.nrows() != env.n_states() || policy.ncols() != env.n_actions() {
        return Err(Error::Dimension { expected: env.n_states() * env.n_actions(), actual: policy.len() });
    }
    if start >= env.n_states() {
        return Err(Error::Argument(format!("start state {start} out of range")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = start;
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        out.push(s);
        let a = sample_categorical(policy.row(s).iter().copied(), &mut rng);
        s = env.next_state(s, a);
    }
    Ok(out)
}
