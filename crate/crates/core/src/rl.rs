//! Reward labelling, implicit Q-learning, the supervised (SFT) baseline and
//! policy evaluation.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{meta_path, Label, PreferenceDataset, UnlabeledDataset};
use crate::envs::{rollout, MdpSpec, TabularPolicy};
use crate::error::{Error, Result};
use crate::io::{read_json, read_jsonl, write_json, write_jsonl};
use crate::numcore::checkpoint::{load_into, save_checkpoint};
use crate::numcore::{
    grad_check, Activation, Adam, CategoricalDist, GradCheckReport, LayerSpec, Matrix, Mlp, ParamStore, Tape, Var,
};
use crate::preference::{ensemble_reward, RewardKind, RewardModel};
use crate::seeds::{derive_seed, derive_seed_indexed, rng_from_seed};

/// How the prior expectation over latent codes is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MarginalMode {
    Exact,
    MonteCarlo(usize),
}

impl MarginalMode {
    /// Exact enumeration for codebooks up to 64 codes, `n` samples beyond.
    pub fn default_for(num_codes: usize, n: usize) -> Self {
        if num_codes <= 64 {
            MarginalMode::Exact
        } else {
            MarginalMode::MonteCarlo(n)
        }
    }
}

impl FromStr for MarginalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "exact" {
            return Ok(MarginalMode::Exact);
        }
        match s.strip_prefix("mc:").map(str::parse::<usize>) {
            Some(Ok(n)) if n >= 1 => Ok(MarginalMode::MonteCarlo(n)),
            _ => Err(Error::Config(format!("marginal mode must be `exact` or `mc:<n>` with n >= 1, got `{s}`"))),
        }
    }
}

impl fmt::Display for MarginalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MarginalMode::Exact => f.write_str("exact"),
            MarginalMode::MonteCarlo(n) => write!(f, "mc:{n}"),
        }
    }
}

/// `E_{z ~ f(·|s,a)} r(s, a, z)`, exactly or from `n` prior samples.
pub fn marginal_reward<R: Rng>(model: &RewardModel, s: usize, a: usize, mode: MarginalMode, rng: &mut R) -> Result<f64> {
    if model.kind() != RewardKind::Hindsight {
        return Err(Error::ModeMismatch("marginalisation needs a hindsight reward model".into()));
    }
    let vae = model.vae().ok_or(Error::MissingVae)?;
    match mode {
        MarginalMode::Exact => {
            let (codes, probs) = vae.enumerate_prior(s, a);
            let r = model.rewards(&vec![s; codes.len()], &vec![a; codes.len()], Some(&codes))?;
            Ok(r.iter().zip(&probs).map(|(r, p)| r * p).sum())
        }
        MarginalMode::MonteCarlo(n) => {
            if n == 0 {
                return Err(Error::ModeMismatch("monte-carlo marginalisation needs n >= 1".into()));
            }
            let codes = vae.sample_prior(s, a, n, rng);
            let r = model.rewards(&vec![s; n], &vec![a; n], Some(&codes))?;
            Ok(r.iter().sum::<f64>() / n as f64)
        }
    }
}

/// Where transition rewards come from.
#[derive(Clone, Copy, Debug)]
pub enum Labeler<'a> {
    /// Ground-truth MDP rewards.
    Oracle(&'a MdpSpec),
    /// Mean output of one or more markovian models.
    Markovian(&'a [RewardModel]),
    /// Prior-marginalised hindsight reward.
    Hindsight(&'a RewardModel, MarginalMode),
}

impl Labeler<'_> {
    fn describe(&self) -> (String, Option<String>) {
        match self {
            Labeler::Oracle(_) => ("oracle".into(), None),
            Labeler::Markovian(models) if models.len() == 1 => ("markovian".into(), None),
            Labeler::Markovian(models) => (format!("markovian-ensemble:{}", models.len()), None),
            Labeler::Hindsight(_, mode) => ("hindsight".into(), Some(mode.to_string())),
        }
    }

    fn dims(&self) -> (usize, usize) {
        match self {
            Labeler::Oracle(m) => (m.num_states, m.num_actions),
            Labeler::Markovian(models) => models.first().map_or((0, 0), |m| (m.num_states(), m.num_actions())),
            Labeler::Hindsight(m, _) => (m.num_states(), m.num_actions()),
        }
    }

    /// Reward of `(s, a)`; monte-carlo draws are seeded by `(seed, s, a)` so
    /// every occurrence of the pair gets the same label.
    pub fn reward(&self, s: usize, a: usize, seed: u64) -> Result<f64> {
        match self {
            Labeler::Oracle(m) => Ok(m.reward[s][a]),
            Labeler::Markovian(models) => {
                if let Some(m) = models.iter().find(|m| m.kind() != RewardKind::Markovian) {
                    return Err(Error::KindMismatch { expected: "markovian", found: kind_name(m.kind()) });
                }
                ensemble_reward(models, s, a)
            }
            Labeler::Hindsight(model, mode) => {
                let mut rng = rng_from_seed(derive_seed_indexed(seed, "marginal", (s * 1_000_003 + a) as u64));
                marginal_reward(model, s, a, *mode, &mut rng)
            }
        }
    }
}

fn kind_name(kind: RewardKind) -> &'static str {
    match kind {
        RewardKind::Markovian => "markovian",
        RewardKind::Hindsight => "hindsight",
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub s2: usize,
    pub done: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelProvenance {
    pub reward_source: String,
    /// `exact` or `mc:<n>` for hindsight labels.
    pub marginal: Option<String>,
    pub seed: u64,
    /// Transitions per source trajectory, in dataset order.
    pub trajectory_lengths: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub transitions: Vec<Transition>,
    pub provenance: LabelProvenance,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn max_abs_reward(&self) -> f64 {
        self.transitions.iter().map(|t| t.r.abs()).fold(0.0, f64::max)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.transitions)?;
        write_json(&meta_path(path), &self.provenance)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let transitions = read_jsonl(path)?;
        let mp = meta_path(path);
        let provenance = if mp.exists() { read_json(&mp)? } else { LabelProvenance::default() };
        Ok(LabeledDataset { transitions, provenance })
    }
}

/// Labels every step of every trajectory of `D_u`.
pub fn label_dataset(unlabeled: &UnlabeledDataset, labeler: Labeler<'_>, seed: u64) -> Result<LabeledDataset> {
    let (ns, na) = labeler.dims();
    let mut table: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut transitions = Vec::with_capacity(unlabeled.num_steps());
    let mut lengths = Vec::with_capacity(unlabeled.len());
    for traj in &unlabeled.trajectories {
        for t in 0..traj.len() {
            let (s, a) = (traj.states[t], traj.actions[t]);
            let s2 = traj.next_state(t);
            if s >= ns || a >= na || s2 >= ns {
                return Err(Error::InvalidDimension(format!(
                    "transition ({s}, {a}, {s2}) outside a {ns}-state, {na}-action labeller"
                )));
            }
            let r = match table.get(&(s, a)) {
                Some(&r) => r,
                None => {
                    let r = labeler.reward(s, a, seed)?;
                    if !r.is_finite() {
                        return Err(Error::NonFinite { what: format!("reward label for ({s}, {a})"), step: 0 });
                    }
                    table.insert((s, a), r);
                    r
                }
            };
            let done = traj.terminated && t + 1 == traj.len();
            transitions.push(Transition { s, a, r, s2, done });
        }
        lengths.push(traj.len());
    }
    let (reward_source, marginal) = labeler.describe();
    Ok(LabeledDataset {
        transitions,
        provenance: LabelProvenance { reward_source, marginal, seed, trajectory_lengths: lengths },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RlConfig {
    pub discount: f64,
    pub expectile: f64,
    /// Advantage temperature: weights are `min(exp(A / beta_temp), clip)`.
    pub beta_temp: f64,
    pub clip: f64,
    pub soft_update: f64,
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Slack added to `max|r| / (1 - γ)` before the value-divergence alarm fires.
    pub value_slack: f64,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            discount: 0.99,
            expectile: 0.75,
            beta_temp: 0.333,
            clip: 100.0,
            soft_update: 0.005,
            hidden: vec![64, 64],
            lr: 3e-4,
            steps: 5000,
            batch_size: 64,
            value_slack: 1.0,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("rl: {m}")));
        if !(0.0..1.0).contains(&self.discount) {
            return fail("discount must be in [0, 1)");
        }
        if !(self.expectile > 0.0 && self.expectile < 1.0) {
            return fail("expectile must be in (0, 1)");
        }
        if !(self.beta_temp > 0.0 && self.clip > 0.0) {
            return fail("beta_temp and clip must be positive");
        }
        if !(self.soft_update > 0.0 && self.soft_update <= 1.0) {
            return fail("soft_update must be in (0, 1]");
        }
        if self.hidden.contains(&0) || !(self.lr > 0.0) || self.batch_size == 0 {
            return fail("hidden widths, lr and batch_size must be positive");
        }
        if !(self.value_slack >= 0.0) {
            return fail("value_slack must be non-negative");
        }
        Ok(())
    }
}

/// Asymmetric squared loss `mean(|τ - 1(u < 0)| · u²)`.
pub fn expectile_loss(residuals: &[f64], tau: f64) -> f64 {
    residuals.iter().map(|&u| expectile_weight(u, tau) * u * u).sum::<f64>() / residuals.len() as f64
}

fn expectile_weight(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        1.0 - tau
    } else {
        tau
    }
}

/// `min(exp(A / beta_temp), clip)`.
pub fn awr_weight(advantage: f64, beta_temp: f64, clip: f64) -> f64 {
    (advantage / beta_temp).exp().min(clip)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Iql,
    Sft,
}

#[derive(Clone, Debug)]
struct Net {
    store: ParamStore,
    mlp: Mlp,
}

impl Net {
    fn new<R: Rng>(name: &str, input: usize, hidden: &[usize], output: usize, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, name, &LayerSpec::new(input, hidden, output), Activation::Tanh, Activation::Identity, rng);
        Net { store, mlp }
    }

    fn apply(&self, x: &Matrix) -> Matrix {
        self.mlp.apply(&self.store, x).expect("input width is fixed by construction")
    }
}

#[derive(Clone, Debug)]
struct Critics {
    q: Net,
    q_target: Net,
    v: Net,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct PolicySidecar {
    kind: PolicyKind,
    num_states: usize,
    num_actions: usize,
    config: RlConfig,
    seed: u64,
}

const POLICY_SIDECAR: &str = "policy.json";

/// Trained policy with, for IQL, its value networks.
#[derive(Clone, Debug)]
pub struct PolicyArtifacts {
    kind: PolicyKind,
    num_states: usize,
    num_actions: usize,
    config: RlConfig,
    seed: u64,
    policy: Net,
    critics: Option<Critics>,
}

/// Minibatch of transitions as one-hot state features.
#[derive(Clone, Debug)]
pub struct TransitionBatch {
    states: Matrix,
    next_states: Matrix,
    actions: Vec<usize>,
    rewards: Vec<f64>,
    not_done: Vec<f64>,
}

impl TransitionBatch {
    pub fn new(transitions: &[&Transition], num_states: usize) -> Self {
        let s: Vec<usize> = transitions.iter().map(|t| t.s).collect();
        let s2: Vec<usize> = transitions.iter().map(|t| t.s2).collect();
        TransitionBatch {
            states: Matrix::one_hot(&s, num_states),
            next_states: Matrix::one_hot(&s2, num_states),
            actions: transitions.iter().map(|t| t.a).collect(),
            rewards: transitions.iter().map(|t| t.r).collect(),
            not_done: transitions.iter().map(|t| if t.done { 0.0 } else { 1.0 }).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

fn column(values: Vec<f64>) -> Matrix {
    Matrix::column(values)
}

fn picked(m: &Matrix, actions: &[usize]) -> Vec<f64> {
    actions.iter().enumerate().map(|(i, &a)| m.get(i, a)).collect()
}

fn v_loss_graph(v: &Net, tape: &mut Tape, store: &ParamStore, batch: &TransitionBatch, q_sa: &[f64], tau: f64) -> Var {
    let x = tape.constant(batch.states.clone());
    let pred = v.mlp.forward(tape, store, x);
    let target = tape.constant(column(q_sa.to_vec()));
    let u = tape.sub(target, pred);
    let sq = tape.mul(u, u);
    // the weight is piecewise constant in u, so it can be fixed from the forward value
    let weights = tape.value(u).map(|r| expectile_weight(r, tau));
    let weighted = tape.mul_const(sq, weights);
    tape.mean(weighted)
}

fn q_loss_graph(q: &Net, tape: &mut Tape, store: &ParamStore, batch: &TransitionBatch, targets: &[f64]) -> Var {
    let x = tape.constant(batch.states.clone());
    let out = q.mlp.forward(tape, store, x);
    let pred = tape.pick(out, batch.actions.clone());
    let y = tape.constant(column(targets.to_vec()));
    let d = tape.sub(pred, y);
    let sq = tape.mul(d, d);
    tape.mean(sq)
}

/// Weighted negative log-likelihood `-mean(w · log π(a|s))`.
fn weighted_nll_graph(pi: &Net, tape: &mut Tape, store: &ParamStore, states: &Matrix, actions: &[usize], weights: &[f64]) -> Var {
    let x = tape.constant(states.clone());
    let logits = pi.mlp.forward(tape, store, x);
    let logp = tape.log_softmax(logits);
    let ll = tape.pick(logp, actions.to_vec());
    let w = tape.mul_const(ll, column(weights.to_vec()));
    let m = tape.mean(w);
    tape.scale(m, -1.0)
}

impl PolicyArtifacts {
    /// Randomly initialised networks of the given kind.
    pub fn fresh(kind: PolicyKind, num_states: usize, num_actions: usize, config: &RlConfig, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let policy = Net::new("policy", num_states, &config.hidden, num_actions, &mut rng);
        let critics = (kind == PolicyKind::Iql).then(|| {
            let q = Net::new("q", num_states, &config.hidden, num_actions, &mut rng);
            let v = Net::new("v", num_states, &config.hidden, 1, &mut rng);
            Critics { q_target: q.clone(), q, v }
        });
        PolicyArtifacts { kind, num_states, num_actions, config: config.clone(), seed, policy, critics }
    }

    pub fn kind(&self) -> PolicyKind {
        self.kind
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn config(&self) -> &RlConfig {
        &self.config
    }

    fn all_states(&self) -> Matrix {
        Matrix::one_hot(&(0..self.num_states).collect::<Vec<_>>(), self.num_states)
    }

    /// `π(·|s)` for every state.
    pub fn action_probs(&self) -> Vec<Vec<f64>> {
        let logits = self.policy.apply(&self.all_states());
        (0..self.num_states).map(|s| CategoricalDist::from_logits(logits.row(s).to_vec()).probs()).collect()
    }

    /// Argmax action per state (lowest index on ties).
    pub fn greedy_actions(&self) -> Vec<usize> {
        self.action_probs().iter().map(|p| crate::numcore::argmax(p)).collect()
    }

    pub fn greedy_policy(&self) -> TabularPolicy {
        TabularPolicy::deterministic(&self.greedy_actions(), self.num_actions)
    }

    pub fn stochastic_policy(&self) -> TabularPolicy {
        TabularPolicy { probs: self.action_probs() }
    }

    /// `Q(s, ·)` for every state (IQL only).
    pub fn q_values(&self) -> Option<Vec<Vec<f64>>> {
        let c = self.critics.as_ref()?;
        let q = c.q.apply(&self.all_states());
        Some((0..self.num_states).map(|s| q.row(s).to_vec()).collect())
    }

    /// `V(s)` for every state (IQL only).
    pub fn state_values(&self) -> Option<Vec<f64>> {
        let c = self.critics.as_ref()?;
        Some(c.v.apply(&self.all_states()).into_vec())
    }

    fn advantage_weights(&self, batch: &TransitionBatch) -> (Vec<f64>, Vec<f64>) {
        let c = self.critics.as_ref().expect("IQL artifacts carry critics");
        let q_sa = picked(&c.q_target.apply(&batch.states), &batch.actions);
        let v_s = c.v.apply(&batch.states).into_vec();
        let w = q_sa.iter().zip(&v_s).map(|(q, v)| awr_weight(q - v, self.config.beta_temp, self.config.clip)).collect();
        (q_sa, w)
    }

    /// Finite-difference checks of the expectile value loss and the
    /// advantage-weighted policy loss on `batch`.
    pub fn grad_check_losses(&mut self, batch: &TransitionBatch, rel_tol: f64) -> Result<(GradCheckReport, GradCheckReport)> {
        if self.critics.is_none() {
            return Err(Error::ModeMismatch("loss checks need IQL artifacts".into()));
        }
        let (q_sa, weights) = self.advantage_weights(batch);
        let tau = self.config.expectile;
        let critics = self.critics.as_mut().expect("checked above");
        let v_net = critics.v.clone();
        let v_report = grad_check(&mut critics.v.store, rel_tol, |tape, store| v_loss_graph(&v_net, tape, store, batch, &q_sa, tau));
        let pi_net = self.policy.clone();
        let pi_report = grad_check(&mut self.policy.store, rel_tol, |tape, store| {
            weighted_nll_graph(&pi_net, tape, store, &batch.states, &batch.actions, &weights)
        });
        Ok((v_report, pi_report))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let hyper = serde_json::to_value(&self.config)?;
        save_checkpoint(&dir.join("policy"), "policy", &self.policy.store, hyper.clone(), self.seed)?;
        if let Some(c) = &self.critics {
            save_checkpoint(&dir.join("q"), "q", &c.q.store, hyper.clone(), self.seed)?;
            save_checkpoint(&dir.join("q_target"), "q-target", &c.q_target.store, hyper.clone(), self.seed)?;
            save_checkpoint(&dir.join("v"), "v", &c.v.store, hyper, self.seed)?;
        }
        let sidecar = PolicySidecar {
            kind: self.kind,
            num_states: self.num_states,
            num_actions: self.num_actions,
            config: self.config.clone(),
            seed: self.seed,
        };
        write_json(&dir.join(POLICY_SIDECAR), &sidecar)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let sc: PolicySidecar = read_json(&dir.join(POLICY_SIDECAR))?;
        let mut art = PolicyArtifacts::fresh(sc.kind, sc.num_states, sc.num_actions, &sc.config, sc.seed);
        load_into(&dir.join("policy"), &mut art.policy.store)?;
        if let Some(c) = art.critics.as_mut() {
            load_into(&dir.join("q"), &mut c.q.store)?;
            load_into(&dir.join("q_target"), &mut c.q_target.store)?;
            load_into(&dir.join("v"), &mut c.v.store)?;
        }
        Ok(art)
    }
}

fn sample_batch<'a, R: Rng>(data: &'a [Transition], size: usize, rng: &mut R) -> Vec<&'a Transition> {
    (0..size).map(|_| &data[rng.gen_range(0..data.len())]).collect()
}

fn step_error(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite { what, .. } => Error::NonFinite { what, step },
        other => other,
    }
}

/// Implicit Q-learning on a labelled dataset.
pub fn iql_train(data: &LabeledDataset, num_states: usize, num_actions: usize, config: &RlConfig, seed: u64) -> Result<PolicyArtifacts> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset(None));
    }
    if let Some(t) = data.transitions.iter().find(|t| t.s >= num_states || t.s2 >= num_states || t.a >= num_actions) {
        return Err(Error::InvalidDimension(format!("transition ({}, {}, {}) outside the MDP", t.s, t.a, t.s2)));
    }
    let mut art = PolicyArtifacts::fresh(PolicyKind::Iql, num_states, num_actions, config, seed);
    let mut rng = rng_from_seed(derive_seed(seed, "iql-batches"));
    let adam = Adam::with_lr(config.lr);
    let bound = data.max_abs_reward() / (1.0 - config.discount) + config.value_slack;
    for step in 0..config.steps {
        let batch = TransitionBatch::new(&sample_batch(&data.transitions, config.batch_size, &mut rng), num_states);
        let (q_sa, weights) = art.advantage_weights(&batch);
        let critics = art.critics.as_mut().expect("IQL artifacts carry critics");

        let mut tape = Tape::new();
        let loss = v_loss_graph(&critics.v, &mut tape, &critics.v.store, &batch, &q_sa, config.expectile);
        check_finite(tape.scalar(loss), "value loss", step)?;
        tape.backward(loss, &mut critics.v.store);
        critics.v.store.adam_step(&adam).map_err(|e| step_error(e, step))?;

        let v_next = critics.v.apply(&batch.next_states).into_vec();
        let targets: Vec<f64> = (0..batch.len())
            .map(|i| batch.rewards[i] + config.discount * batch.not_done[i] * v_next[i])
            .collect();
        let mut tape = Tape::new();
        let loss = q_loss_graph(&critics.q, &mut tape, &critics.q.store, &batch, &targets);
        check_finite(tape.scalar(loss), "Q loss", step)?;
        tape.backward(loss, &mut critics.q.store);
        critics.q.store.adam_step(&adam).map_err(|e| step_error(e, step))?;

        let mut tape = Tape::new();
        let loss = weighted_nll_graph(&art.policy, &mut tape, &art.policy.store, &batch.states, &batch.actions, &weights);
        check_finite(tape.scalar(loss), "policy loss", step)?;
        tape.backward(loss, &mut art.policy.store);
        art.policy.store.adam_step(&adam).map_err(|e| step_error(e, step))?;

        let critics = art.critics.as_mut().expect("IQL artifacts carry critics");
        critics.q_target.store.soft_update_from(&critics.q.store, config.soft_update);

        let worst = critics.v.apply(&batch.states).max_abs().max(v_next.iter().fold(0.0, |m, v| m.max(v.abs())));
        if !(worst <= bound) {
            return Err(Error::Divergence { step, value: worst, bound });
        }
    }
    art.policy.store.freeze();
    if let Some(c) = art.critics.as_mut() {
        c.q.store.freeze();
        c.q_target.store.freeze();
        c.v.store.freeze();
    }
    Ok(art)
}

fn check_finite(value: f64, what: &str, step: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { what: what.into(), step })
    }
}

/// Behaviour cloning of the preferred segment of every pair; neutral pairs
/// contribute both segments at half weight.
pub fn sft_train(dataset: &PreferenceDataset, num_states: usize, num_actions: usize, config: &RlConfig, seed: u64) -> Result<PolicyArtifacts> {
    config.validate()?;
    let mut samples: Vec<(usize, usize, f64)> = Vec::new();
    for pair in &dataset.pairs {
        let mut push = |seg: &crate::datasets::Segment, w: f64| {
            samples.extend(seg.states.iter().zip(&seg.actions).map(|(&s, &a)| (s, a, w)));
        };
        match pair.label {
            Label::Zero => push(&pair.seg0, 1.0),
            Label::One => push(&pair.seg1, 1.0),
            Label::Half => {
                push(&pair.seg0, 0.5);
                push(&pair.seg1, 0.5);
            }
        }
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset(None));
    }
    if let Some(&(s, a, _)) = samples.iter().find(|(s, a, _)| *s >= num_states || *a >= num_actions) {
        return Err(Error::InvalidDimension(format!("step ({s}, {a}) outside the MDP")));
    }
    let mut art = PolicyArtifacts::fresh(PolicyKind::Sft, num_states, num_actions, config, seed);
    let mut rng = rng_from_seed(derive_seed(seed, "sft-batches"));
    let adam = Adam::with_lr(config.lr);
    for step in 0..config.steps {
        let picks: Vec<&(usize, usize, f64)> = (0..config.batch_size).map(|_| &samples[rng.gen_range(0..samples.len())]).collect();
        let states = Matrix::one_hot(&picks.iter().map(|p| p.0).collect::<Vec<_>>(), num_states);
        let actions: Vec<usize> = picks.iter().map(|p| p.1).collect();
        let weights: Vec<f64> = picks.iter().map(|p| p.2).collect();
        let mut tape = Tape::new();
        let loss = weighted_nll_graph(&art.policy, &mut tape, &art.policy.store, &states, &actions, &weights);
        check_finite(tape.scalar(loss), "behaviour-cloning loss", step)?;
        tape.backward(loss, &mut art.policy.store);
        art.policy.store.adam_step(&adam).map_err(|e| step_error(e, step))?;
    }
    art.policy.store.freeze();
    Ok(art)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub mean_return: f64,
    pub std_return: f64,
    pub num_episodes: usize,
    pub seed: u64,
    /// Empirical action frequencies at the designated states, keyed by state.
    pub action_frequencies: BTreeMap<usize, Vec<f64>>,
}

/// Seeded rollouts scored with the MDP's true rewards.
pub fn evaluate(policy: &TabularPolicy, mdp: &MdpSpec, num_episodes: usize, seed: u64, designated: &[usize]) -> Result<EvalStats> {
    if num_episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let episodes = rollout(mdp, policy, seed, num_episodes);
    let returns: Vec<f64> = episodes.iter().map(|e| e.total_reward().expect("rollouts record rewards")).collect();
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = if returns.len() > 1 { returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    let mut action_frequencies = BTreeMap::new();
    for &s in designated {
        let mut counts = vec![0.0; mdp.num_actions];
        for e in &episodes {
            for (&st, &a) in e.states.iter().zip(&e.actions) {
                if st == s {
                    counts[a] += 1.0;
                }
            }
        }
        let total: f64 = counts.iter().sum();
        if total > 0.0 {
            counts.iter_mut().for_each(|c| *c /= total);
        }
        action_frequencies.insert(s, counts);
    }
    Ok(EvalStats { mean_return: mean, std_return: var.sqrt(), num_episodes, seed, action_frequencies })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{collect_unlabeled, gambling_preference_dataset, DatasetMeta, PreferencePair, Segment};
    use crate::envs::gambling::*;
    use crate::envs::{gambling_behavior_policy, gambling_mdp};
    use crate::hindsight_vae::{VaeConfig, VaeModel};
    use crate::preference::RewardConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn gambling_unlabeled(n: usize) -> UnlabeledDataset {
        collect_unlabeled(&gambling_mdp(), &gambling_behavior_policy(), DatasetMeta::default(), n, 1).unwrap().learner_view()
    }

    fn small_rl() -> RlConfig {
        RlConfig { hidden: vec![32], lr: 3e-3, steps: 1500, batch_size: 32, ..RlConfig::default() }
    }

    fn hindsight_model(num_codes: usize) -> RewardModel {
        let vc = VaeConfig { k: 1, num_codes, embed_dim: 6, hidden: vec![8], ..VaeConfig::default() };
        let vae = Arc::new(VaeModel::new(vc, NUM_STATES, NUM_ACTIONS, 2).unwrap());
        RewardModel::new(RewardKind::Hindsight, NUM_STATES, NUM_ACTIONS, Some(vae), RewardConfig { hidden: vec![8], ..RewardConfig::default() }, 3).unwrap()
    }

    #[test]
    fn marginal_mode_parsing() {
        assert_eq!("exact".parse::<MarginalMode>().unwrap(), MarginalMode::Exact);
        assert_eq!("mc:20".parse::<MarginalMode>().unwrap(), MarginalMode::MonteCarlo(20));
        assert!("mc:0".parse::<MarginalMode>().is_err());
        assert_eq!(MarginalMode::MonteCarlo(7).to_string(), "mc:7");
        assert_eq!(MarginalMode::default_for(16, 20), MarginalMode::Exact);
        assert_eq!(MarginalMode::default_for(128, 20), MarginalMode::MonteCarlo(20));
    }

    #[test]
    fn marginal_of_a_latent_free_head_is_that_head() {
        let mut m = hindsight_model(4);
        let last = m.net().layers().last().unwrap().clone();
        m.params_mut().value_mut(last.weight).data_mut().fill(0.0);
        m.params_mut().value_mut(last.bias).data_mut().fill(0.37);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for mode in [MarginalMode::Exact, MarginalMode::MonteCarlo(1), MarginalMode::MonteCarlo(13)] {
            assert!((marginal_reward(&m, S1, A1, mode, &mut rng).unwrap() - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_marginal_of_two_codes() {
        // uniform prior (zero output layer) and a linear head that reads z
        let mut m = RewardModel::new(
            RewardKind::Hindsight,
            NUM_STATES,
            NUM_ACTIONS,
            Some({
                let vc = VaeConfig { k: 1, num_codes: 2, embed_dim: 4, hidden: vec![4], ..VaeConfig::default() };
                let mut v = VaeModel::new(vc, NUM_STATES, NUM_ACTIONS, 1).unwrap();
                let names: Vec<String> = v.params().names().to_vec();
                let last_prior = names.iter().filter(|n| n.starts_with("prior.")).last().unwrap().replace(".bias", "");
                for suffix in [".weight", ".bias"] {
                    let id = v.store.find(&format!("{last_prior}{suffix}")).unwrap();
                    v.store.value_mut(id).data_mut().fill(0.0);
                }
                Arc::new(v)
            }),
            RewardConfig { hidden: vec![], ..RewardConfig::default() },
            1,
        )
        .unwrap();
        let layer = m.net().layers()[0].clone();
        let mut w = vec![0.0; NUM_STATES + NUM_ACTIONS + 2];
        w[NUM_STATES + NUM_ACTIONS] = 1.0;
        m.params_mut().value_mut(layer.weight).data_mut().copy_from_slice(&w);
        let r = marginal_reward(&m, S1, A1, MarginalMode::Exact, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!((r - 0.5).abs() < 1e-12);
    }

    #[test]
    fn monte_carlo_converges_to_exact() {
        let m = hindsight_model(6);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for s in 0..NUM_STATES {
            for a in 0..NUM_ACTIONS {
                let exact = marginal_reward(&m, s, a, MarginalMode::Exact, &mut rng).unwrap();
                let mc = marginal_reward(&m, s, a, MarginalMode::MonteCarlo(10_000), &mut rng).unwrap();
                assert!((mc - exact).abs() < 0.01, "({s},{a}): {mc} vs {exact}");
            }
        }
    }

    #[test]
    fn marginal_rejects_markovian_models() {
        let m = RewardModel::new(RewardKind::Markovian, 5, 3, None, RewardConfig::default(), 1).unwrap();
        assert!(matches!(marginal_reward(&m, 0, 0, MarginalMode::Exact, &mut ChaCha8Rng::seed_from_u64(0)), Err(Error::ModeMismatch(_))));
    }

    #[test]
    fn labelling_examples() {
        let du = gambling_unlabeled(30);
        let mut m = RewardModel::new(RewardKind::Markovian, 5, 3, None, RewardConfig { hidden: vec![4], ..RewardConfig::default() }, 1).unwrap();
        let last = m.net().layers().last().unwrap().clone();
        m.params_mut().value_mut(last.weight).data_mut().fill(0.0);
        m.params_mut().value_mut(last.bias).data_mut().fill(-0.25);
        let models = [m];
        let labeled = label_dataset(&du, Labeler::Markovian(&models), 0).unwrap();
        assert_eq!(labeled.len(), du.num_steps());
        assert!(labeled.transitions.iter().all(|t| t.r == -0.25));
        // terminal flags sit on the last step of each episode
        assert!(labeled.transitions.iter().filter(|t| t.done).all(|t| t.s2 == TERMINAL));
        assert_eq!(labeled.transitions.iter().filter(|t| t.done).count(), du.len());

        let h = hindsight_model(4);
        let a = label_dataset(&du, Labeler::Hindsight(&h, MarginalMode::Exact), 0).unwrap();
        let b = label_dataset(&du, Labeler::Hindsight(&h, MarginalMode::Exact), 0).unwrap();
        assert_eq!(a, b);
        assert!(label_dataset(&du, Labeler::Oracle(&crate::envs::random_mdp(1, &Default::default()).unwrap()), 0).is_ok());
        let small = crate::envs::random_mdp(1, &crate::envs::RandomMdpParams { num_states: 3, ..Default::default() }).unwrap();
        assert!(matches!(label_dataset(&du, Labeler::Oracle(&small), 0), Err(Error::InvalidDimension(_))));
    }

    #[test]
    fn labelling_is_order_independent() {
        let du = gambling_unlabeled(25);
        let h = hindsight_model(4);
        let mut reversed = du.clone();
        reversed.trajectories.reverse();
        let fwd = label_dataset(&du, Labeler::Hindsight(&h, MarginalMode::MonteCarlo(5)), 3).unwrap();
        let bwd = label_dataset(&reversed, Labeler::Hindsight(&h, MarginalMode::MonteCarlo(5)), 3).unwrap();
        let mut offset = 0;
        let mut chunks = Vec::new();
        for &len in &fwd.provenance.trajectory_lengths {
            chunks.push(fwd.transitions[offset..offset + len].to_vec());
            offset += len;
        }
        chunks.reverse();
        assert_eq!(chunks.concat(), bwd.transitions);
    }

    #[test]
    fn labeled_dataset_jsonl_round_trip() {
        let du = gambling_unlabeled(5);
        let mdp = gambling_mdp();
        let labeled = label_dataset(&du, Labeler::Oracle(&mdp), 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labeled.jsonl");
        labeled.save(&path).unwrap();
        let first = std::fs::read_to_string(&path).unwrap().lines().next().unwrap().to_string();
        let v: serde_json::Value = serde_json::from_str(&first).unwrap();
        let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort();
        assert_eq!(keys, ["a", "done", "r", "s", "s2"]);
        assert_eq!(LabeledDataset::load(&path).unwrap(), labeled);
    }

    #[test]
    fn expectile_identities() {
        let res = [0.3, -1.2, 2.0, -0.1];
        let mse: f64 = res.iter().map(|r| 0.5 * r * r).sum::<f64>() / 4.0;
        assert!((expectile_loss(&res, 0.5) - mse).abs() < 1e-15);
        let tau = 0.8;
        let ratio = expectile_loss(&[1.5], tau) / expectile_loss(&[-1.5], tau);
        assert!((ratio - tau / (1.0 - tau)).abs() < 1e-12);
    }

    #[test]
    fn awr_weight_is_clipped() {
        assert_eq!(awr_weight(10.0, 0.333, 100.0), 100.0);
        assert!((awr_weight(0.0, 0.333, 100.0) - 1.0).abs() < 1e-15);
        assert!((awr_weight(-0.333, 0.333, 100.0) - (-1f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn iql_losses_pass_finite_differences() {
        let du = gambling_unlabeled(20);
        let labeled = label_dataset(&du, Labeler::Oracle(&gambling_mdp()), 0).unwrap();
        let cfg = RlConfig { hidden: vec![6], ..RlConfig::default() };
        let mut art = PolicyArtifacts::fresh(PolicyKind::Iql, NUM_STATES, NUM_ACTIONS, &cfg, 5);
        let refs: Vec<&Transition> = labeled.transitions.iter().take(12).collect();
        let batch = TransitionBatch::new(&refs, NUM_STATES);
        let (v, pi) = art.grad_check_losses(&batch, 1e-4).unwrap();
        assert!(v.passed, "{:?}", v.worst());
        assert!(pi.passed, "{:?}", pi.worst());
    }

    #[test]
    fn iql_on_oracle_gambling_prefers_the_safe_action() {
        let du = gambling_unlabeled(300);
        let labeled = label_dataset(&du, Labeler::Oracle(&gambling_mdp()), 0).unwrap();
        let art = iql_train(&labeled, NUM_STATES, NUM_ACTIONS, &small_rl(), 1).unwrap();
        assert_eq!(art.greedy_actions()[S1], A2);
        let v = art.state_values().unwrap();
        let bound = 1.0 / (1.0 - 0.99) + 1.0;
        assert!(v.iter().all(|x| x.abs() <= bound));
    }

    #[test]
    fn iql_is_deterministic_and_round_trips() {
        let du = gambling_unlabeled(40);
        let labeled = label_dataset(&du, Labeler::Oracle(&gambling_mdp()), 0).unwrap();
        let cfg = RlConfig { steps: 50, ..small_rl() };
        let a = iql_train(&labeled, NUM_STATES, NUM_ACTIONS, &cfg, 2).unwrap();
        let b = iql_train(&labeled, NUM_STATES, NUM_ACTIONS, &cfg, 2).unwrap();
        assert_eq!(a.action_probs(), b.action_probs());
        let dir = tempfile::tempdir().unwrap();
        a.save(dir.path()).unwrap();
        let loaded = PolicyArtifacts::load(dir.path()).unwrap();
        assert_eq!(loaded.action_probs(), a.action_probs());
        assert_eq!(loaded.q_values(), a.q_values());
        assert!(iql_train(&LabeledDataset { transitions: vec![], provenance: Default::default() }, 5, 3, &cfg, 1).is_err());
    }

    #[test]
    fn sft_clones_the_preferred_action() {
        let mut ds = gambling_preference_dataset();
        ds.pairs = vec![PreferencePair {
            seg0: Segment::new(vec![S1, S_GOOD], vec![A1, A3]),
            seg1: Segment::new(vec![S1, S_AVG], vec![A2, A3]),
            label: Label::One,
        }];
        let cfg = RlConfig { steps: 300, ..small_rl() };
        let a = sft_train(&ds, NUM_STATES, NUM_ACTIONS, &cfg, 4).unwrap();
        assert_eq!(a.greedy_actions()[S1], A2);
        assert_eq!(a.kind(), PolicyKind::Sft);
        assert!(a.q_values().is_none());
        let b = sft_train(&ds, NUM_STATES, NUM_ACTIONS, &cfg, 4).unwrap();
        assert_eq!(a.action_probs(), b.action_probs());
        ds.pairs.clear();
        assert!(matches!(sft_train(&ds, NUM_STATES, NUM_ACTIONS, &cfg, 4), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn evaluation_examples() {
        let mdp = gambling_mdp();
        let safe = TabularPolicy::deterministic(&[A2, A3, A3, A3, A3], NUM_ACTIONS);
        let stats = evaluate(&safe, &mdp, 50, 1, &[S1]).unwrap();
        assert_eq!(stats.mean_return, 0.0);
        assert_eq!(stats.action_frequencies[&S1], vec![0.0, 1.0, 0.0]);
        let risky = TabularPolicy::deterministic(&[A1, A3, A3, A3, A3], NUM_ACTIONS);
        let stats = evaluate(&risky, &mdp, 10_000, 2, &[]).unwrap();
        assert!((-0.86..=-0.74).contains(&stats.mean_return), "{}", stats.mean_return);
        assert_eq!(evaluate(&risky, &mdp, 100, 3, &[S1]).unwrap(), evaluate(&risky, &mdp, 100, 3, &[S1]).unwrap());
        assert!(evaluate(&risky, &mdp, 0, 3, &[]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(RlConfig::default().validate().is_ok());
        assert!(RlConfig { discount: 1.0, ..RlConfig::default() }.validate().is_err());
        assert!(RlConfig { expectile: 1.0, ..RlConfig::default() }.validate().is_err());
        assert!(RlConfig { soft_update: 0.0, ..RlConfig::default() }.validate().is_err());
    }
}
