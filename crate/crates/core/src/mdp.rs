//! Small Markov reward processes: construction, validation, the Bellman
//! operator and the expected-variation smoothness functional.

use std::collections::VecDeque;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linalg;

const ROW_SUM_TOL: f64 = 1e-12;
const GENERATION_ATTEMPTS: usize = 1000;
const DOCUMENT_FORMAT: &str = "tdlab-mdp";
const DOCUMENT_VERSION: u32 = 1;

pub const MOUNTAINCAR_POSITION: (f64, f64) = (-1.2, 0.6);
pub const MOUNTAINCAR_VELOCITY: (f64, f64) = (-0.07, 0.07);
pub const MOUNTAINCAR_GOAL: f64 = 0.5;
/// Accelerations for action indices 0, 1, 2.
pub const MOUNTAINCAR_ACTIONS: [f64; 3] = [-1.0, 0.0, 1.0];
/// Gridworld action indices: up (y+1), down (y-1), left (x-1), right (x+1).
pub const GRID_ACTIONS: [&str; 4] = ["up", "down", "left", "right"];

/// How states are laid out in space; used by kernels and network inputs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StateGeometry {
    #[default]
    Unstructured,
    /// `n_states` points evenly spaced on a circle of circumference `n_states`.
    Circle { n_states: usize },
    /// Cell `s` sits at `(s % width, s / width)`.
    Grid { width: usize, height: usize },
    /// Cell `s` is `(s / vel_bins, s % vel_bins)` in (position, velocity) bins.
    MountainCar { pos_bins: usize, vel_bins: usize },
}

impl StateGeometry {
    fn n_states(&self) -> Option<usize> {
        match *self {
            StateGeometry::Unstructured => None,
            StateGeometry::Circle { n_states } => Some(n_states),
            StateGeometry::Grid { width, height } => Some(width * height),
            StateGeometry::MountainCar { pos_bins, vel_bins } => Some(pos_bins * vel_bins),
        }
    }

    /// Coordinates in which kernel distances are measured, in cell units.
    pub fn metric_point(&self, state: usize) -> Option<Vec<f64>> {
        match *self {
            StateGeometry::Unstructured => None,
            StateGeometry::Circle { n_states } => {
                let radius = n_states as f64 / (2.0 * PI);
                let angle = 2.0 * PI * state as f64 / n_states as f64;
                Some(vec![radius * angle.cos(), radius * angle.sin()])
            }
            StateGeometry::Grid { width, .. } => Some(vec![(state % width) as f64, (state / width) as f64]),
            StateGeometry::MountainCar { vel_bins, .. } => {
                Some(vec![(state / vel_bins) as f64, (state % vel_bins) as f64])
            }
        }
    }

    /// Euclidean distance between metric points.
    pub fn distance(&self, a: usize, b: usize) -> Option<f64> {
        let pa = self.metric_point(a)?;
        let pb = self.metric_point(b)?;
        Some(pa.iter().zip(&pb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
    }

    /// Network-friendly coordinates scaled into [-1, 1].
    pub fn unit_coordinates(&self, state: usize) -> Option<Vec<f64>> {
        let scale = |i: usize, n: usize| if n > 1 { 2.0 * i as f64 / (n - 1) as f64 - 1.0 } else { 0.0 };
        match *self {
            StateGeometry::Unstructured => None,
            StateGeometry::Circle { n_states } => {
                let angle = 2.0 * PI * state as f64 / n_states as f64;
                Some(vec![angle.cos(), angle.sin()])
            }
            StateGeometry::Grid { width, height } => Some(vec![scale(state % width, width), scale(state / width, height)]),
            StateGeometry::MountainCar { pos_bins, vel_bins } => {
                Some(vec![scale(state / vel_bins, pos_bins), scale(state % vel_bins, vel_bins)])
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StateLabel {
    Cell { x: usize, y: usize },
    PositionVelocity { position_bin: usize, velocity_bin: usize, position: f64, velocity: f64 },
}

/// Network input encodings of the state space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingKind {
    OneHot,
    Coordinates,
    /// Every state maps to the single input `1.0`.
    Constant,
}

/// Embedding table with one row per state.
pub fn state_embeddings(n_states: usize, geometry: &StateGeometry, kind: EmbeddingKind) -> Result<DMatrix<f64>> {
    match kind {
        EmbeddingKind::OneHot => Ok(DMatrix::identity(n_states, n_states)),
        EmbeddingKind::Constant => Ok(DMatrix::from_element(n_states, 1, 1.0)),
        EmbeddingKind::Coordinates => {
            let rows = (0..n_states)
                .map(|s| {
                    geometry
                        .unit_coordinates(s)
                        .ok_or_else(|| Error::Config("coordinate embedding needs a state geometry".into()))
                })
                .collect::<Result<Vec<_>>>()?;
            let dim = rows.first().map_or(0, Vec::len);
            Ok(DMatrix::from_fn(n_states, dim, |i, j| rows[i][j]))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GridPolicySpec {
    /// MountainCar only: accelerate along the current velocity, right at rest.
    EnergyPumping,
    UniformRandom,
    FixedAction { action: usize },
}

/// Reward assignment for random-walk MDPs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RewardSpec {
    Zero,
    Indicator { state: usize },
    /// Independent standard normal reward per state, drawn after the graph.
    Gaussian,
    Explicit { values: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GridReward {
    /// Independent standard normal reward per cell.
    Dense { seed: u64 },
    /// Reward 1 at `goal` (default: the last cell), 0 elsewhere.
    Sparse { goal: Option<usize> },
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueFunction {
    values: DVector<f64>,
}

impl ValueFunction {
    pub fn new(values: DVector<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("value function entry {i} is not finite")));
        }
        Ok(ValueFunction { values })
    }

    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        Self::new(DVector::from_vec(values))
    }

    pub fn zeros(n: usize) -> Self {
        ValueFunction { values: DVector::zeros(n) }
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_inner(self) -> DVector<f64> {
        self.values
    }
}

/// A policy-evaluation problem: P^π, R^π and γ over a finite state set.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkovMdp {
    transition: DMatrix<f64>,
    reward: DVector<f64>,
    discount: f64,
    labels: Option<Vec<StateLabel>>,
    geometry: StateGeometry,
}

impl MarkovMdp {
    pub fn new(transition: DMatrix<f64>, reward: DVector<f64>, discount: f64) -> Result<Self> {
        let n = transition.nrows();
        if n == 0 {
            return Err(Error::Argument("an MDP needs at least one state".into()));
        }
        check_len(n, transition.ncols())?;
        check_len(n, reward.len())?;
        if !(0.0..1.0).contains(&discount) {
            return Err(Error::Argument(format!("discount must lie in [0, 1), got {discount}")));
        }
        if let Some(i) = reward.iter().position(|r| !r.is_finite()) {
            return Err(Error::Argument(format!("reward at state {i} is not finite")));
        }
        for i in 0..n {
            let row = transition.row(i);
            if let Some(p) = row.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                return Err(Error::Argument(format!("transition row {i} has entry {p} outside [0, 1]")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Argument(format!("transition row {i} sums to {sum}")));
            }
        }
        Ok(MarkovMdp { transition, reward, discount, labels: None, geometry: StateGeometry::Unstructured })
    }

    pub fn with_labels(mut self, labels: Vec<StateLabel>) -> Result<Self> {
        check_len(self.n_states(), labels.len())?;
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn with_geometry(mut self, geometry: StateGeometry) -> Result<Self> {
        if let Some(n) = geometry.n_states() {
            check_len(self.n_states(), n)?;
        }
        self.geometry = geometry;
        Ok(self)
    }

    /// Same dynamics with a different reward vector.
    pub fn with_reward(&self, reward: DVector<f64>) -> Result<Self> {
        check_len(self.n_states(), reward.len())?;
        if reward.iter().any(|r| !r.is_finite()) {
            return Err(Error::Argument("reward must be finite".into()));
        }
        let mut out = self.clone();
        out.reward = reward;
        Ok(out)
    }

    /// Same dynamics and reward under a different discount.
    pub fn with_discount(&self, discount: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&discount) {
            return Err(Error::Argument(format!("discount must lie in [0, 1), got {discount}")));
        }
        let mut out = self.clone();
        out.discount = discount;
        Ok(out)
    }

    pub fn n_states(&self) -> usize {
        self.reward.len()
    }

    pub fn transition(&self) -> &DMatrix<f64> {
        &self.transition
    }

    pub fn reward(&self) -> &DVector<f64> {
        &self.reward
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn labels(&self) -> Option<&[StateLabel]> {
        self.labels.as_deref()
    }

    pub fn geometry(&self) -> &StateGeometry {
        &self.geometry
    }

    pub fn embeddings(&self, kind: EmbeddingKind) -> Result<DMatrix<f64>> {
        state_embeddings(self.n_states(), &self.geometry, kind)
    }

    /// I − γP^π.
    pub fn td_operator(&self) -> DMatrix<f64> {
        DMatrix::identity(self.n_states(), self.n_states()) - &self.transition * self.discount
    }

    /// V^π from the direct solve (I − γP^π)V = R^π.
    pub fn value_function(&self) -> Result<ValueFunction> {
        ValueFunction::new(linalg::solve(&self.td_operator(), &self.reward)?)
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = MdpDocument {
            format: DOCUMENT_FORMAT.into(),
            version: DOCUMENT_VERSION,
            n_states: self.n_states(),
            transition: self.transition.transpose().as_slice().to_vec(),
            reward: self.reward.as_slice().to_vec(),
            discount: self.discount,
            labels: self.labels.clone(),
            geometry: self.geometry.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: MdpDocument = serde_json::from_str(text)?;
        if doc.format != DOCUMENT_FORMAT || doc.version != DOCUMENT_VERSION {
            return Err(Error::Config(format!("unsupported MDP document {} v{}", doc.format, doc.version)));
        }
        let n = doc.n_states;
        check_len(n * n, doc.transition.len())?;
        let mdp = MarkovMdp::new(
            DMatrix::from_row_slice(n, n, &doc.transition),
            DVector::from_vec(doc.reward),
            doc.discount,
        )?
        .with_geometry(doc.geometry)?;
        match doc.labels {
            Some(labels) => mdp.with_labels(labels),
            None => Ok(mdp),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct MdpDocument {
    format: String,
    version: u32,
    n_states: usize,
    transition: Vec<f64>,
    reward: Vec<f64>,
    discount: f64,
    labels: Option<Vec<StateLabel>>,
    #[serde(default)]
    geometry: StateGeometry,
}

/// Deterministic-transition MDP with actions, from which policies induce a
/// [`MarkovMdp`]. Used for control (teachers, policy gradients).
#[derive(Clone, Debug, PartialEq)]
pub struct ActionMdp {
    next_state: Vec<Vec<usize>>,
    reward: Vec<Vec<f64>>,
    discount: f64,
    geometry: StateGeometry,
    labels: Option<Vec<StateLabel>>,
}

impl ActionMdp {
    pub fn new(next_state: Vec<Vec<usize>>, reward: Vec<Vec<f64>>, discount: f64) -> Result<Self> {
        let n = next_state.len();
        if n == 0 {
            return Err(Error::Argument("an MDP needs at least one state".into()));
        }
        check_len(n, reward.len())?;
        let n_actions = next_state[0].len();
        if n_actions == 0 {
            return Err(Error::Argument("an MDP needs at least one action".into()));
        }
        for (s, (next, r)) in next_state.iter().zip(&reward).enumerate() {
            check_len(n_actions, next.len())?;
            check_len(n_actions, r.len())?;
            if next.iter().any(|&t| t >= n) {
                return Err(Error::Argument(format!("state {s} transitions outside the state space")));
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::Argument(format!("reward at state {s} is not finite")));
            }
        }
        if !(0.0..1.0).contains(&discount) {
            return Err(Error::Argument(format!("discount must lie in [0, 1), got {discount}")));
        }
        Ok(ActionMdp { next_state, reward, discount, geometry: StateGeometry::Unstructured, labels: None })
    }

    pub fn n_states(&self) -> usize {
        self.next_state.len()
    }

    pub fn n_actions(&self) -> usize {
        self.next_state[0].len()
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn geometry(&self) -> &StateGeometry {
        &self.geometry
    }

    pub fn next_state(&self, state: usize, action: usize) -> usize {
        self.next_state[state][action]
    }

    pub fn reward(&self, state: usize, action: usize) -> f64 {
        self.reward[state][action]
    }

    pub fn embeddings(&self, kind: EmbeddingKind) -> Result<DMatrix<f64>> {
        state_embeddings(self.n_states(), &self.geometry, kind)
    }

    /// Induce P^π and R^π from a row-stochastic `n_states × n_actions` policy.
    pub fn induce(&self, policy: &DMatrix<f64>) -> Result<MarkovMdp> {
        let (n, a) = (self.n_states(), self.n_actions());
        if policy.nrows() != n || policy.ncols() != a {
            return Err(Error::Dimension { expected: n * a, actual: policy.len() });
        }
        let mut p = DMatrix::zeros(n, n);
        let mut r = DVector::zeros(n);
        for s in 0..n {
            for act in 0..a {
                let w = policy[(s, act)];
                if w != 0.0 {
                    p[(s, self.next_state[s][act])] += w;
                    r[s] += w * self.reward[s][act];
                }
            }
        }
        let mut mdp = MarkovMdp::new(p, r, self.discount)?.with_geometry(self.geometry.clone())?;
        mdp.labels = self.labels.clone();
        Ok(mdp)
    }

    /// Q(s, a) = r(s, a) + γ V(next(s, a)).
    pub fn q_from_values(&self, values: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_len(self.n_states(), values.len())?;
        Ok(DMatrix::from_fn(self.n_states(), self.n_actions(), |s, a| {
            self.reward[s][a] + self.discount * values[self.next_state[s][a]]
        }))
    }

    /// Optimal action values by value iteration to `tol` in sup norm.
    pub fn optimal_q(&self, tol: f64) -> Result<DMatrix<f64>> {
        let n = self.n_states();
        let mut v = DVector::zeros(n);
        for _ in 0..1_000_000 {
            let q = self.q_from_values(&v)?;
            let next = DVector::from_fn(n, |s, _| q.row(s).max());
            let delta = (&next - &v).amax();
            v = next;
            if delta <= tol * (1.0 - self.discount) {
                return self.q_from_values(&v);
            }
        }
        Err(Error::Numeric("value iteration did not converge".into()))
    }
}

fn policy_matrix(spec: &GridPolicySpec, n_states: usize, n_actions: usize) -> Result<DMatrix<f64>> {
    match *spec {
        GridPolicySpec::UniformRandom => Ok(DMatrix::from_element(n_states, n_actions, 1.0 / n_actions as f64)),
        GridPolicySpec::FixedAction { action } => {
            if action >= n_actions {
                return Err(Error::Argument(format!("action {action} out of range (have {n_actions})")));
            }
            Ok(DMatrix::from_fn(n_states, n_actions, |_, a| if a == action { 1.0 } else { 0.0 }))
        }
        GridPolicySpec::EnergyPumping => Err(Error::Argument("energy pumping is only defined for MountainCar".into())),
    }
}

/// Deterministic cycle i → i+1 mod n with a single unit reward.
pub fn build_circle_mdp(n_states: usize, reward_state: usize, discount: f64) -> Result<MarkovMdp> {
    if n_states == 0 {
        return Err(Error::Argument("circle needs at least one state".into()));
    }
    if reward_state >= n_states {
        return Err(Error::Argument(format!("reward state {reward_state} out of range for {n_states} states")));
    }
    let p = DMatrix::from_fn(n_states, n_states, |i, j| if j == (i + 1) % n_states { 1.0 } else { 0.0 });
    let mut r = DVector::zeros(n_states);
    r[reward_state] = 1.0;
    MarkovMdp::new(p, r, discount)?.with_geometry(StateGeometry::Circle { n_states })
}

/// Random walk on an undirected graph given as a symmetric adjacency matrix.
pub fn random_walk_from_adjacency(adjacency: &DMatrix<f64>, discount: f64, reward: DVector<f64>) -> Result<MarkovMdp> {
    let n = adjacency.nrows();
    check_len(n, adjacency.ncols())?;
    let mut p = DMatrix::zeros(n, n);
    for i in 0..n {
        let deg: f64 = adjacency.row(i).sum();
        if deg <= 0.0 {
            return Err(Error::Argument(format!("vertex {i} is isolated")));
        }
        for j in 0..n {
            p[(i, j)] = adjacency[(i, j)] / deg;
        }
    }
    MarkovMdp::new(p, reward, discount)
}

fn is_connected(adjacency: &[Vec<usize>]) -> bool {
    let n = adjacency.len();
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    let mut count = 1;
    while let Some(u) = queue.pop_front() {
        for &v in &adjacency[u] {
            if !seen[v] {
                seen[v] = true;
                count += 1;
                queue.push_back(v);
            }
        }
    }
    count == n
}

fn adjacency_matrix(neighbours: &[Vec<usize>]) -> DMatrix<f64> {
    let n = neighbours.len();
    let mut a = DMatrix::zeros(n, n);
    for (i, list) in neighbours.iter().enumerate() {
        for &j in list {
            a[(i, j)] = 1.0;
        }
    }
    a
}

fn draw_reward(spec: &RewardSpec, n: usize, rng: &mut ChaCha8Rng) -> Result<DVector<f64>> {
    match spec {
        RewardSpec::Zero => Ok(DVector::zeros(n)),
        RewardSpec::Indicator { state } => {
            if *state >= n {
                return Err(Error::Argument(format!("reward state {state} out of range for {n} states")));
            }
            let mut r = DVector::zeros(n);
            r[*state] = 1.0;
            Ok(r)
        }
        RewardSpec::Gaussian => Ok(DVector::from_fn(n, |_, _| rng.sample(StandardNormal))),
        RewardSpec::Explicit { values } => {
            check_len(n, values.len())?;
            Ok(DVector::from_column_slice(values))
        }
    }
}

/// Random walk on an Erdős–Rényi G(n, p) graph, resampled until connected.
pub fn build_random_walk_mdp(
    n_states: usize,
    edge_prob: f64,
    seed: u64,
    discount: f64,
    reward: &RewardSpec,
) -> Result<MarkovMdp> {
    if n_states < 2 {
        return Err(Error::Argument("a random walk needs at least two states".into()));
    }
    if !(edge_prob > 0.0 && edge_prob <= 1.0) {
        return Err(Error::Argument(format!("edge probability must lie in (0, 1], got {edge_prob}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..GENERATION_ATTEMPTS {
        let mut neighbours = vec![Vec::new(); n_states];
        for i in 0..n_states {
            for j in (i + 1)..n_states {
                if rng.random::<f64>() < edge_prob {
                    neighbours[i].push(j);
                    neighbours[j].push(i);
                }
            }
        }
        if is_connected(&neighbours) {
            let r = draw_reward(reward, n_states, &mut rng)?;
            return random_walk_from_adjacency(&adjacency_matrix(&neighbours), discount, r);
        }
    }
    Err(Error::Generation { seed, attempts: GENERATION_ATTEMPTS })
}

/// Random walk on a connected random `degree`-regular graph (symmetric P^π).
///
/// Starts from a circulant graph and randomizes it with degree-preserving
/// double edge swaps.
pub fn build_regular_random_walk_mdp(
    n_states: usize,
    degree: usize,
    seed: u64,
    discount: f64,
    reward: &RewardSpec,
) -> Result<MarkovMdp> {
    if degree == 0 || degree >= n_states || (n_states * degree) % 2 == 1 {
        return Err(Error::Argument(format!("no simple {degree}-regular graph on {n_states} vertices")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..GENERATION_ATTEMPTS {
        let mut adj = vec![vec![false; n_states]; n_states];
        let mut edges = Vec::new();
        let link = |adj: &mut Vec<Vec<bool>>, i: usize, j: usize| {
            adj[i][j] = true;
            adj[j][i] = true;
        };
        for i in 0..n_states {
            for off in 1..=degree / 2 {
                let j = (i + off) % n_states;
                link(&mut adj, i, j);
                edges.push((i, j));
            }
            if degree % 2 == 1 && i < n_states / 2 {
                link(&mut adj, i, i + n_states / 2);
                edges.push((i, i + n_states / 2));
            }
        }
        for _ in 0..10 * edges.len() {
            let e1 = rng.random_range(0..edges.len());
            let e2 = rng.random_range(0..edges.len());
            let ((a, b), (c, d)) = (edges[e1], edges[e2]);
            if e1 == e2 || a == c || a == d || b == c || b == d || adj[a][d] || adj[c][b] {
                continue;
            }
            adj[a][b] = false;
            adj[b][a] = false;
            adj[c][d] = false;
            adj[d][c] = false;
            link(&mut adj, a, d);
            link(&mut adj, c, b);
            edges[e1] = (a, d);
            edges[e2] = (c, b);
        }
        let neighbours: Vec<Vec<usize>> =
            adj.iter().map(|row| row.iter().enumerate().filter(|(_, &x)| x).map(|(j, _)| j).collect()).collect();
        if is_connected(&neighbours) {
            let r = draw_reward(reward, n_states, &mut rng)?;
            return random_walk_from_adjacency(&adjacency_matrix(&neighbours), discount, r);
        }
    }
    Err(Error::Generation { seed, attempts: GENERATION_ATTEMPTS })
}

/// Deterministic gridworld with walls at the border.
pub fn gridworld(width: usize, height: usize, reward_mode: &GridReward, discount: f64) -> Result<ActionMdp> {
    if width == 0 || height == 0 {
        return Err(Error::Argument("grid dimensions must be at least 1".into()));
    }
    let n = width * height;
    let cell_reward: Vec<f64> = match *reward_mode {
        GridReward::Zero => vec![0.0; n],
        GridReward::Sparse { goal } => {
            let goal = goal.unwrap_or(n - 1);
            if goal >= n {
                return Err(Error::Argument(format!("goal cell {goal} out of range for {n} cells")));
            }
            (0..n).map(|s| if s == goal { 1.0 } else { 0.0 }).collect()
        }
        GridReward::Dense { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n).map(|_| rng.sample(StandardNormal)).collect()
        }
    };
    let next_state = (0..n)
        .map(|s| {
            let (x, y) = (s % width, s / width);
            let up = if y + 1 < height { s + width } else { s };
            let down = if y > 0 { s - width } else { s };
            let left = if x > 0 { s - 1 } else { s };
            let right = if x + 1 < width { s + 1 } else { s };
            vec![up, down, left, right]
        })
        .collect();
    let reward = cell_reward.iter().map(|&r| vec![r; GRID_ACTIONS.len()]).collect();
    let mut mdp = ActionMdp::new(next_state, reward, discount)?;
    mdp.geometry = StateGeometry::Grid { width, height };
    mdp.labels = Some((0..n).map(|s| StateLabel::Cell { x: s % width, y: s / width }).collect());
    Ok(mdp)
}

pub fn build_gridworld_mdp(
    width: usize,
    height: usize,
    reward_mode: &GridReward,
    policy: &GridPolicySpec,
    discount: f64,
) -> Result<MarkovMdp> {
    let env = gridworld(width, height, reward_mode, discount)?;
    env.induce(&policy_matrix(policy, env.n_states(), env.n_actions())?)
}

fn cell_center(lo: f64, hi: f64, bins: usize, i: usize) -> f64 {
    lo + (i as f64 + 0.5) * (hi - lo) / bins as f64
}

fn cell_index(lo: f64, hi: f64, bins: usize, x: f64) -> usize {
    let i = ((x - lo) / (hi - lo) * bins as f64).floor();
    (i.max(0.0) as usize).min(bins - 1)
}

/// One step of the classic MountainCar dynamics.
pub fn mountaincar_step(position: f64, velocity: f64, accel: f64) -> (f64, f64) {
    let (vlo, vhi) = MOUNTAINCAR_VELOCITY;
    let (plo, phi) = MOUNTAINCAR_POSITION;
    let mut v = (velocity + 0.001 * accel - 0.0025 * (3.0 * position).cos()).clamp(vlo, vhi);
    let p = (position + v).clamp(plo, phi);
    if p <= plo && v < 0.0 {
        v = 0.0;
    }
    (p, v)
}

/// Discretized MountainCar: cell-center simulation snapped to the grid.
pub fn mountaincar(pos_bins: usize, vel_bins: usize, discount: f64) -> Result<ActionMdp> {
    if pos_bins < 2 || vel_bins < 2 {
        return Err(Error::Argument("MountainCar needs at least 2 bins per axis".into()));
    }
    let (plo, phi) = MOUNTAINCAR_POSITION;
    let (vlo, vhi) = MOUNTAINCAR_VELOCITY;
    let n = pos_bins * vel_bins;
    let mut next_state = Vec::with_capacity(n);
    let mut reward = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for s in 0..n {
        let (i, j) = (s / vel_bins, s % vel_bins);
        let (p, v) = (cell_center(plo, phi, pos_bins, i), cell_center(vlo, vhi, vel_bins, j));
        labels.push(StateLabel::PositionVelocity { position_bin: i, velocity_bin: j, position: p, velocity: v });
        if p >= MOUNTAINCAR_GOAL {
            next_state.push(vec![s; MOUNTAINCAR_ACTIONS.len()]);
            reward.push(vec![0.0; MOUNTAINCAR_ACTIONS.len()]);
            continue;
        }
        let next = MOUNTAINCAR_ACTIONS
            .iter()
            .map(|&a| {
                let (p2, v2) = mountaincar_step(p, v, a);
                cell_index(plo, phi, pos_bins, p2) * vel_bins + cell_index(vlo, vhi, vel_bins, v2)
            })
            .collect();
        next_state.push(next);
        reward.push(vec![-1.0; MOUNTAINCAR_ACTIONS.len()]);
    }
    let mut mdp = ActionMdp::new(next_state, reward, discount)?;
    mdp.geometry = StateGeometry::MountainCar { pos_bins, vel_bins };
    mdp.labels = Some(labels);
    Ok(mdp)
}

pub fn build_mountaincar_mdp(pos_bins: usize, vel_bins: usize, policy: &GridPolicySpec, discount: f64) -> Result<MarkovMdp> {
    let env = mountaincar(pos_bins, vel_bins, discount)?;
    let pi = match policy {
        GridPolicySpec::EnergyPumping => {
            let (vlo, vhi) = MOUNTAINCAR_VELOCITY;
            DMatrix::from_fn(env.n_states(), env.n_actions(), |s, a| {
                let v = cell_center(vlo, vhi, vel_bins, s % vel_bins);
                let chosen = if v < 0.0 { 0 } else { 2 };
                if a == chosen { 1.0 } else { 0.0 }
            })
        }
        other => policy_matrix(other, env.n_states(), env.n_actions())?,
    };
    env.induce(&pi)
}

/// ρ(V) = Σ_x |V(x) − E[V(x')]|.
pub fn expected_variation(v: &ValueFunction, mdp: &MarkovMdp) -> Result<f64> {
    check_len(mdp.n_states(), v.len())?;
    let pv = mdp.transition() * v.values();
    Ok((v.values() - pv).abs().sum())
}

/// T^πV = R^π + γP^πV.
pub fn bellman_operator(v: &ValueFunction, mdp: &MarkovMdp) -> Result<ValueFunction> {
    check_len(mdp.n_states(), v.len())?;
    ValueFunction::new(mdp.reward() + mdp.transition() * v.values() * mdp.discount())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn circle_is_a_cyclic_permutation() {
        let mdp = build_circle_mdp(50, 24, 0.99).unwrap();
        for i in 0..50 {
            assert_eq!(mdp.transition()[(i, (i + 1) % 50)], 1.0);
            assert_eq!(mdp.transition().row(i).sum(), 1.0);
        }
        assert_eq!(mdp.reward()[24], 1.0);
        assert_eq!(mdp.reward().sum(), 1.0);
    }

    #[test]
    fn single_state_circle_is_a_rewarded_self_loop() {
        let mdp = build_circle_mdp(1, 0, 0.0).unwrap();
        assert_eq!(mdp.transition()[(0, 0)], 1.0);
        assert_eq!(mdp.reward()[0], 1.0);
    }

    #[test]
    fn circle_rejects_bad_arguments() {
        assert!(matches!(build_circle_mdp(5, 5, 0.5), Err(Error::Argument(_))));
        assert!(matches!(build_circle_mdp(5, 0, 1.0), Err(Error::Argument(_))));
    }

    #[test]
    fn complete_and_path_graphs() {
        let complete = DMatrix::from_fn(3, 3, |i, j| if i == j { 0.0 } else { 1.0 });
        let mdp = random_walk_from_adjacency(&complete, 0.9, DVector::zeros(3)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(mdp.transition()[(i, j)], if i == j { 0.0 } else { 0.5 });
            }
        }
        let path = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let mdp = random_walk_from_adjacency(&path, 0.9, DVector::zeros(3)).unwrap();
        assert_eq!(mdp.transition().row(1).iter().copied().collect::<Vec<_>>(), vec![0.5, 0.0, 0.5]);
    }

    #[test]
    fn random_walk_spectrum_is_real_and_bounded() {
        for seed in 0..5 {
            let mdp = build_random_walk_mdp(30, 0.2, seed, 0.9, &RewardSpec::Gaussian).unwrap();
            let eig = mdp.transition().clone().complex_eigenvalues();
            for l in eig.iter() {
                assert!(l.im.abs() < 1e-8, "seed {seed}: {l}");
                assert!(l.re >= -1.0 - 1e-9 && l.re <= 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn random_walk_is_seed_deterministic() {
        let a = build_random_walk_mdp(20, 0.3, 7, 0.9, &RewardSpec::Gaussian).unwrap();
        let b = build_random_walk_mdp(20, 0.3, 7, 0.9, &RewardSpec::Gaussian).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn disconnected_generation_reports_seed() {
        let err = build_random_walk_mdp(40, 1e-6, 99, 0.9, &RewardSpec::Zero).unwrap_err();
        assert!(matches!(err, Error::Generation { seed: 99, .. }));
    }

    #[test]
    fn regular_graph_walk_is_symmetric() {
        for seed in 0..3 {
            let mdp = build_regular_random_walk_mdp(20, 4, seed, 0.9, &RewardSpec::Gaussian).unwrap();
            let p = mdp.transition();
            assert!((p - p.transpose()).amax() < 1e-15);
            assert!(p.iter().all(|&x| x == 0.0 || x == 0.25));
        }
    }

    #[test]
    fn tiny_gridworld_moves_right() {
        let mdp = build_gridworld_mdp(
            2,
            1,
            &GridReward::Sparse { goal: Some(1) },
            &GridPolicySpec::FixedAction { action: 3 },
            0.9,
        )
        .unwrap();
        assert_eq!(mdp.reward().as_slice(), &[0.0, 1.0]);
        assert_eq!(mdp.transition()[(0, 1)], 1.0);
        assert_eq!(mdp.transition()[(1, 1)], 1.0);
    }

    #[test]
    fn zero_reward_gridworld_has_zero_value() {
        let mdp = build_gridworld_mdp(4, 3, &GridReward::Zero, &GridPolicySpec::UniformRandom, 0.9).unwrap();
        assert_eq!(mdp.reward().amax(), 0.0);
        assert_eq!(mdp.value_function().unwrap().values().amax(), 0.0);
    }

    #[test]
    fn energy_pumping_is_rejected_on_gridworld() {
        let r = build_gridworld_mdp(3, 3, &GridReward::Zero, &GridPolicySpec::EnergyPumping, 0.9);
        assert!(matches!(r, Err(Error::Argument(_))));
    }

    #[test]
    fn mountaincar_rows_are_one_hot_and_goal_absorbs() {
        let mdp = build_mountaincar_mdp(40, 40, &GridPolicySpec::EnergyPumping, 0.99).unwrap();
        for s in 0..mdp.n_states() {
            let row = mdp.transition().row(s);
            assert_eq!(row.iter().filter(|&&x| x == 1.0).count(), 1);
            assert_eq!(row.sum(), 1.0);
            if let Some(StateLabel::PositionVelocity { position, .. }) = mdp.labels().map(|l| &l[s]) {
                if *position >= MOUNTAINCAR_GOAL {
                    assert_eq!(mdp.transition()[(s, s)], 1.0);
                    assert_eq!(mdp.reward()[s], 0.0);
                } else {
                    assert_eq!(mdp.reward()[s], -1.0);
                }
            }
        }
    }

    #[test]
    fn mountaincar_wall_stops_the_car() {
        let (p, v) = mountaincar_step(-1.19, -0.05, -1.0);
        assert_eq!(p, -1.2);
        assert_eq!(v, 0.0);
    }

    #[test]
    fn circle_indicator_variation_is_two() {
        let mdp = build_circle_mdp(50, 24, 0.99).unwrap();
        let mut v = DVector::zeros(50);
        v[24] = 1.0;
        let rho = expected_variation(&ValueFunction::new(v).unwrap(), &mdp).unwrap();
        assert_eq!(rho, 2.0);
    }

    #[test]
    fn bellman_with_zero_discount_returns_reward() {
        let mdp = build_random_walk_mdp(10, 0.5, 3, 0.0, &RewardSpec::Gaussian).unwrap();
        let v = ValueFunction::from_vec((0..10).map(|i| i as f64).collect()).unwrap();
        assert_eq!(bellman_operator(&v, &mdp).unwrap().values(), mdp.reward());
    }

    #[test]
    fn bellman_on_circle_from_zero() {
        let mdp = build_circle_mdp(10, 3, 0.5).unwrap();
        let tv = bellman_operator(&ValueFunction::zeros(10), &mdp).unwrap();
        assert_eq!(tv.values(), mdp.reward());
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let mdp = build_circle_mdp(4, 0, 0.5).unwrap();
        let v = ValueFunction::zeros(3);
        assert!(matches!(expected_variation(&v, &mdp), Err(Error::Dimension { .. })));
        assert!(matches!(bellman_operator(&v, &mdp), Err(Error::Dimension { .. })));
    }

    #[test]
    fn value_function_rejects_non_finite() {
        assert!(ValueFunction::from_vec(vec![0.0, f64::NAN]).is_err());
    }

    #[test]
    fn constructor_validates_rows() {
        let p = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.7, 0.4]);
        assert!(MarkovMdp::new(p, DVector::zeros(2), 0.5).is_err());
        let p = DMatrix::from_row_slice(2, 2, &[1.5, -0.5, 0.5, 0.5]);
        assert!(MarkovMdp::new(p, DVector::zeros(2), 0.5).is_err());
    }

    #[test]
    fn json_round_trip() {
        let mdp = build_mountaincar_mdp(5, 4, &GridPolicySpec::EnergyPumping, 0.99).unwrap();
        let back = MarkovMdp::from_json(&mdp.to_json().unwrap()).unwrap();
        assert_eq!(mdp, back);
        let grid = build_gridworld_mdp(3, 2, &GridReward::Dense { seed: 1 }, &GridPolicySpec::UniformRandom, 0.9).unwrap();
        assert_eq!(grid, MarkovMdp::from_json(&grid.to_json().unwrap()).unwrap());
    }

    #[test]
    fn json_rejects_unknown_version() {
        let mdp = build_circle_mdp(3, 0, 0.5).unwrap();
        let text = mdp.to_json().unwrap().replace("\"version\": 1", "\"version\": 9");
        assert!(matches!(MarkovMdp::from_json(&text), Err(Error::Config(_))));
    }

    #[test]
    fn circle_chord_embedding_has_near_unit_neighbour_spacing() {
        let g = StateGeometry::Circle { n_states: 50 };
        let d = g.distance(0, 1).unwrap();
        assert!((d - 1.0).abs() < 1e-3);
        assert!((g.distance(0, 49).unwrap() - d).abs() < 1e-12);
    }

    #[test]
    fn optimal_q_on_corridor() {
        let env = gridworld(4, 1, &GridReward::Sparse { goal: None }, 0.5).unwrap();
        let q = env.optimal_q(1e-12).unwrap();
        // Staying at the goal forever is worth 1 / (1 - γ) = 2.
        assert!((q[(3, 3)] - 2.0).abs() < 1e-9);
        assert!((q[(2, 3)] - 1.0).abs() < 1e-9);
        assert!((q[(2, 2)] - 0.25).abs() < 1e-9);
    }

    fn arb_mdp() -> impl Strategy<Value = MarkovMdp> {
        (2usize..12, 0.1f64..1.0, any::<u64>(), 0.0f64..0.99)
            .prop_map(|(n, p, seed, g)| build_random_walk_mdp(n, p.max(0.5), seed, g, &RewardSpec::Gaussian).unwrap())
    }

    proptest! {
        #[test]
        fn direct_solution_is_bellman_fixed_point(mdp in arb_mdp()) {
            let v = mdp.value_function().unwrap();
            let tv = bellman_operator(&v, &mdp).unwrap();
            prop_assert!((tv.values() - v.values()).amax() < 1e-10 * (1.0 + v.values().amax()));
        }

        #[test]
        fn variation_is_homogeneous_and_shift_invariant(
            mdp in arb_mdp(),
            c in -10.0f64..10.0,
            shift in -10.0f64..10.0,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = mdp.n_states();
            let v = DVector::from_fn(n, |_, _| rand::Rng::sample::<f64, _>(&mut rng, StandardNormal));
            let rho = expected_variation(&ValueFunction::new(v.clone()).unwrap(), &mdp).unwrap();
            let scaled = expected_variation(&ValueFunction::new(&v * c).unwrap(), &mdp).unwrap();
            prop_assert!((scaled - c.abs() * rho).abs() < 1e-10 * (1.0 + rho * c.abs()));
            let shifted = expected_variation(&ValueFunction::new(v.add_scalar(shift)).unwrap(), &mdp).unwrap();
            prop_assert!((shifted - rho).abs() < 1e-10 * (1.0 + rho + shift.abs() * n as f64));
            prop_assert!(rho >= 0.0);
        }

        #[test]
        fn gridworld_rows_are_stochastic(w in 1usize..6, h in 1usize..6, seed in any::<u64>()) {
            let mdp = build_gridworld_mdp(w, h, &GridReward::Dense { seed }, &GridPolicySpec::UniformRandom, 0.9).unwrap();
            for i in 0..mdp.n_states() {
                prop_assert!((mdp.transition().row(i).sum() - 1.0).abs() <= 1e-12);
            }
        }
    }
}
