//! Tabular MDPs: the gambling MDP, seeded random MDPs, exact value iteration
//! and seeded rollouts.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{argmax, sample_index, Matrix};
use crate::seeds::rng_from_seed;

const PROB_TOL: f64 = 1e-9;

/// Ground-truth tabular MDP. `reward` is hidden from learners.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MdpSpec {
    pub num_states: usize,
    pub num_actions: usize,
    /// `transition[s][a][s']`
    pub transition: Vec<Vec<Vec<f64>>>,
    /// `reward[s][a]`
    pub reward: Vec<Vec<f64>>,
    pub terminal: Vec<bool>,
    pub initial_dist: Vec<f64>,
    pub horizon: usize,
}

impl MdpSpec {
    pub fn validate(&self) -> Result<()> {
        let (ns, na) = (self.num_states, self.num_actions);
        let bad = |msg: String| Err(Error::InvalidDimension(msg));
        if ns == 0 || na == 0 {
            return bad("MDP needs at least one state and one action".into());
        }
        if self.transition.len() != ns || self.reward.len() != ns || self.terminal.len() != ns || self.initial_dist.len() != ns {
            return bad("per-state tables must have num_states entries".into());
        }
        for s in 0..ns {
            if self.transition[s].len() != na || self.reward[s].len() != na {
                return bad(format!("state {s}: per-action tables must have num_actions entries"));
            }
            for a in 0..na {
                let row = &self.transition[s][a];
                if row.len() != ns {
                    return bad(format!("transition[{s}][{a}] has {} entries", row.len()));
                }
                if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                    return bad(format!("transition[{s}][{a}] has a probability outside [0, 1]"));
                }
                let total: f64 = row.iter().sum();
                if (total - 1.0).abs() > PROB_TOL {
                    return bad(format!("transition[{s}][{a}] sums to {total}"));
                }
                if !self.reward[s][a].is_finite() {
                    return bad(format!("reward[{s}][{a}] is not finite"));
                }
                if self.terminal[s] && (row[s] != 1.0 || self.reward[s][a] != 0.0) {
                    return bad(format!("terminal state {s} must self-loop with zero reward"));
                }
            }
        }
        if self.initial_dist.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("initial_dist has a probability outside [0, 1]".into());
        }
        let total: f64 = self.initial_dist.iter().sum();
        if (total - 1.0).abs() > PROB_TOL {
            return bad(format!("initial_dist sums to {total}"));
        }
        Ok(())
    }

    /// Width of a concatenated one-hot `(s, a)` token.
    pub fn token_dim(&self) -> usize {
        self.num_states + self.num_actions
    }

    pub fn max_abs_reward(&self) -> f64 {
        self.reward.iter().flatten().fold(0.0, |m, r| m.max(r.abs()))
    }
}

/// One-hot `(s, a)` tokens, one row per pair.
pub fn state_action_features(states: &[usize], actions: &[usize], num_states: usize, num_actions: usize) -> Matrix {
    debug_assert_eq!(states.len(), actions.len());
    let mut m = Matrix::zeros(states.len(), num_states + num_actions);
    for (r, (&s, &a)) in states.iter().zip(actions).enumerate() {
        m.set(r, s, 1.0);
        m.set(r, num_states + a, 1.0);
    }
    m
}

/// Index names for the gambling MDP.
pub mod gambling {
    pub const S1: usize = 0;
    pub const S_GOOD: usize = 1;
    pub const S_BAD: usize = 2;
    pub const S_AVG: usize = 3;
    pub const TERMINAL: usize = 4;
    pub const A1: usize = 0;
    pub const A2: usize = 1;
    pub const A3: usize = 2;
    pub const NUM_STATES: usize = 5;
    pub const NUM_ACTIONS: usize = 3;
}

/// The five-state gambling MDP.
///
/// From `s1`, `a1` reaches `s_good` w.p. 0.1 and `s_bad` w.p. 0.9, while `a2`
/// reaches `s_avg`. Each of those states leads to the absorbing terminal,
/// paying +1, -1 and 0 respectively. Actions that have no role in a state
/// copy the meaningful one (`a3` at `s1` behaves as `a2`; every action at the
/// outcome states behaves as `a3`).
pub fn gambling_mdp() -> MdpSpec {
    use gambling::*;
    let ns = NUM_STATES;
    let mut transition = vec![vec![vec![0.0; ns]; NUM_ACTIONS]; ns];
    let mut reward = vec![vec![0.0; NUM_ACTIONS]; ns];
    transition[S1][A1][S_GOOD] = 0.1;
    transition[S1][A1][S_BAD] = 0.9;
    transition[S1][A2][S_AVG] = 1.0;
    transition[S1][A3][S_AVG] = 1.0;
    for (s, r) in [(S_GOOD, 1.0), (S_BAD, -1.0), (S_AVG, 0.0)] {
        for a in 0..NUM_ACTIONS {
            transition[s][a][TERMINAL] = 1.0;
            reward[s][a] = r;
        }
    }
    for a in 0..NUM_ACTIONS {
        transition[TERMINAL][a][TERMINAL] = 1.0;
    }
    let mut terminal = vec![false; ns];
    terminal[TERMINAL] = true;
    let mut initial_dist = vec![0.0; ns];
    initial_dist[S1] = 1.0;
    MdpSpec { num_states: ns, num_actions: NUM_ACTIONS, transition, reward, terminal, initial_dist, horizon: 2 }
}

/// Uniform choice between `a1` and `a2` at `s1`, `a3` elsewhere.
pub fn gambling_behavior_policy() -> TabularPolicy {
    use gambling::*;
    let mut probs = vec![vec![0.0, 0.0, 1.0]; NUM_STATES];
    probs[S1] = vec![0.5, 0.5, 0.0];
    TabularPolicy { probs }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomMdpParams {
    pub num_states: usize,
    pub num_actions: usize,
    /// Nonzero successors per `(s, a)`.
    pub branching: usize,
    /// Fraction of `(s, a)` pairs with nonzero reward.
    pub reward_sparsity: f64,
    pub horizon: usize,
}

impl Default for RandomMdpParams {
    fn default() -> Self {
        RandomMdpParams { num_states: 6, num_actions: 3, branching: 2, reward_sparsity: 0.5, horizon: 20 }
    }
}

/// Seeded random MDP without terminal states and a uniform initial
/// distribution. Rewards are `U(-1, 1)` on exactly
/// `round(reward_sparsity · S · A)` pairs and zero elsewhere.
pub fn random_mdp(seed: u64, params: &RandomMdpParams) -> Result<MdpSpec> {
    let RandomMdpParams { num_states: ns, num_actions: na, branching, reward_sparsity, horizon } = *params;
    if ns < 2 || na < 2 {
        return Err(Error::InvalidDimension(format!("random MDP needs >= 2 states and actions, got {ns}x{na}")));
    }
    if branching == 0 || branching > ns {
        return Err(Error::InvalidDimension(format!("branching {branching} must be in 1..={ns}")));
    }
    if !(0.0..=1.0).contains(&reward_sparsity) {
        return Err(Error::InvalidDimension(format!("reward_sparsity {reward_sparsity} outside [0, 1]")));
    }
    if horizon == 0 {
        return Err(Error::InvalidDimension("horizon must be positive".into()));
    }
    let mut rng = rng_from_seed(seed);
    let all_states: Vec<usize> = (0..ns).collect();
    let mut transition = vec![vec![vec![0.0; ns]; na]; ns];
    for row_s in transition.iter_mut() {
        for row in row_s.iter_mut() {
            let succ: Vec<usize> = all_states.choose_multiple(&mut rng, branching).copied().collect();
            let weights: Vec<f64> = succ.iter().map(|_| rng.gen_range(0.05..1.0)).collect();
            let total: f64 = weights.iter().sum();
            for (&s2, w) in succ.iter().zip(&weights) {
                row[s2] = w / total;
            }
        }
    }
    let mut reward = vec![vec![0.0; na]; ns];
    let pairs = ns * na;
    let nonzero = (reward_sparsity * pairs as f64).round() as usize;
    let mut order: Vec<usize> = (0..pairs).collect();
    order.shuffle(&mut rng);
    for &p in order.iter().take(nonzero) {
        reward[p / na][p % na] = rng.gen_range(-1.0..1.0);
    }
    let mdp = MdpSpec {
        num_states: ns,
        num_actions: na,
        transition,
        reward,
        terminal: vec![false; ns],
        initial_dist: vec![1.0 / ns as f64; ns],
        horizon,
    };
    mdp.validate()?;
    Ok(mdp)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValueSolution {
    pub v: Vec<f64>,
    pub q: Vec<Vec<f64>>,
    /// Greedy in `q`, lowest action index on ties.
    pub policy: Vec<usize>,
}

/// One application of the Bellman optimality operator. Terminal states keep value 0.
pub fn bellman_backup(mdp: &MdpSpec, v: &[f64], discount: f64) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut q = vec![vec![0.0; mdp.num_actions]; mdp.num_states];
    let mut out = vec![0.0; mdp.num_states];
    for s in 0..mdp.num_states {
        if mdp.terminal[s] {
            continue;
        }
        for a in 0..mdp.num_actions {
            let next: f64 = mdp.transition[s][a].iter().zip(v).map(|(p, vn)| p * vn).sum();
            q[s][a] = mdp.reward[s][a] + discount * next;
        }
        out[s] = q[s].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    }
    (out, q)
}

/// Optimal values by value iteration. With `discount < 1` iterates to a
/// fixed point with `‖V − TV‖∞ ≤ tol`; with `discount == 1` runs at most
/// `horizon` backups (finite-horizon values), stopping early on convergence.
pub fn value_iteration(mdp: &MdpSpec, discount: f64, tol: f64) -> ValueSolution {
    assert!((0.0..=1.0).contains(&discount) && tol > 0.0);
    let max_iters = if discount < 1.0 { usize::MAX } else { mdp.horizon.max(1) };
    let mut v = vec![0.0; mdp.num_states];
    let mut q;
    let mut iters = 0;
    loop {
        let (next, next_q) = bellman_backup(mdp, &v, discount);
        let delta = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        q = next_q;
        iters += 1;
        if delta <= tol || iters >= max_iters {
            break;
        }
    }
    // q is the backup of the previous iterate; refresh it against the final v
    if discount < 1.0 {
        q = bellman_backup(mdp, &v, discount).1;
    }
    let policy = q.iter().map(|row| argmax(row)).collect();
    ValueSolution { v, q, policy }
}

/// Stationary stochastic policy `probs[s][a]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    pub probs: Vec<Vec<f64>>,
}

impl TabularPolicy {
    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        TabularPolicy { probs: vec![vec![1.0 / num_actions as f64; num_actions]; num_states] }
    }

    pub fn deterministic(actions: &[usize], num_actions: usize) -> Self {
        let probs = actions
            .iter()
            .map(|&a| {
                let mut row = vec![0.0; num_actions];
                row[a] = 1.0;
                row
            })
            .collect();
        TabularPolicy { probs }
    }

    /// Takes `actions[s]` w.p. `1 - eps` and a uniform action otherwise.
    pub fn epsilon_greedy(actions: &[usize], num_actions: usize, eps: f64) -> Self {
        let probs = actions
            .iter()
            .map(|&a| {
                let mut row = vec![eps / num_actions as f64; num_actions];
                row[a] += 1.0 - eps;
                row
            })
            .collect();
        TabularPolicy { probs }
    }

    /// Softmax of `q[s] / temperature`.
    pub fn boltzmann(q: &[Vec<f64>], temperature: f64) -> Self {
        let probs = q
            .iter()
            .map(|row| {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|x| ((x - max) / temperature).exp()).collect();
                let total: f64 = e.iter().sum();
                e.into_iter().map(|x| x / total).collect()
            })
            .collect();
        TabularPolicy { probs }
    }

    pub fn num_states(&self) -> usize {
        self.probs.len()
    }

    pub fn action_probs(&self, s: usize) -> &[f64] {
        &self.probs[s]
    }

    pub fn sample<R: Rng>(&self, s: usize, rng: &mut R) -> usize {
        sample_index(&self.probs[s], rng)
    }

    pub fn greedy_actions(&self) -> Vec<usize> {
        self.probs.iter().map(|row| argmax(row)).collect()
    }

    pub fn is_deterministic(&self) -> bool {
        self.probs.iter().all(|row| row.contains(&1.0))
    }
}

/// Named behaviour-policy recipes, resolved against an MDP.
#[derive(Clone, Debug, PartialEq)]
pub enum PolicySpec {
    Uniform,
    Optimal,
    EpsGreedy(f64),
    Boltzmann(f64),
    Always(usize),
    GamblingUniform,
}

impl PolicySpec {
    pub fn resolve(&self, mdp: &MdpSpec, discount: f64) -> Result<TabularPolicy> {
        let optimal = || value_iteration(mdp, discount, 1e-10);
        Ok(match *self {
            PolicySpec::Uniform => TabularPolicy::uniform(mdp.num_states, mdp.num_actions),
            PolicySpec::Optimal => TabularPolicy::deterministic(&optimal().policy, mdp.num_actions),
            PolicySpec::EpsGreedy(eps) => TabularPolicy::epsilon_greedy(&optimal().policy, mdp.num_actions, eps),
            PolicySpec::Boltzmann(temp) => TabularPolicy::boltzmann(&optimal().q, temp),
            PolicySpec::Always(a) => {
                if a >= mdp.num_actions {
                    return Err(Error::Config(format!("action {a} out of range")));
                }
                TabularPolicy::deterministic(&vec![a; mdp.num_states], mdp.num_actions)
            }
            PolicySpec::GamblingUniform => {
                if mdp.num_states != gambling::NUM_STATES || mdp.num_actions != gambling::NUM_ACTIONS {
                    return Err(Error::Config("gambling-uniform needs the gambling MDP".into()));
                }
                gambling_behavior_policy()
            }
        })
    }
}

impl FromStr for PolicySpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let num = |a: Option<&str>| -> Result<f64> {
            a.ok_or_else(|| Error::Config(format!("policy `{name}` needs an argument")))?
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad policy argument in `{s}`")))
        };
        let spec = match name {
            "uniform" => PolicySpec::Uniform,
            "optimal" => PolicySpec::Optimal,
            "eps-greedy" => {
                let eps = num(arg)?;
                if !(0.0..=1.0).contains(&eps) {
                    return Err(Error::Config(format!("eps-greedy epsilon {eps} outside [0, 1]")));
                }
                PolicySpec::EpsGreedy(eps)
            }
            "boltzmann" => {
                let t = num(arg)?;
                if t <= 0.0 {
                    return Err(Error::Config("boltzmann temperature must be positive".into()));
                }
                PolicySpec::Boltzmann(t)
            }
            "always" => PolicySpec::Always(num(arg)? as usize),
            "gambling-uniform" => PolicySpec::GamblingUniform,
            _ => return Err(Error::Config(format!("unknown policy `{s}`"))),
        };
        Ok(spec)
    }
}

impl fmt::Display for PolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicySpec::Uniform => write!(f, "uniform"),
            PolicySpec::Optimal => write!(f, "optimal"),
            PolicySpec::EpsGreedy(e) => write!(f, "eps-greedy:{e}"),
            PolicySpec::Boltzmann(t) => write!(f, "boltzmann:{t}"),
            PolicySpec::Always(a) => write!(f, "always:{a}"),
            PolicySpec::GamblingUniform => write!(f, "gambling-uniform"),
        }
    }
}

/// A sampled episode as paired `(s_t, a_t)` steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    /// Ground-truth rewards; only present for oracle/annotator use.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewards: Option<Vec<f64>>,
    /// State reached after the last action.
    pub final_state: usize,
    /// Whether `final_state` is terminal (as opposed to a horizon cut-off).
    pub terminated: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Copy with oracle rewards removed.
    pub fn learner_view(&self) -> Trajectory {
        Trajectory { rewards: None, ..self.clone() }
    }

    pub fn total_reward(&self) -> Option<f64> {
        self.rewards.as_ref().map(|r| r.iter().sum())
    }

    pub fn next_state(&self, t: usize) -> usize {
        if t + 1 < self.states.len() {
            self.states[t + 1]
        } else {
            self.final_state
        }
    }
}

/// Samples `num_episodes` episodes. Each episode stops on reaching a
/// terminal state or after `horizon` steps.
pub fn rollout(mdp: &MdpSpec, policy: &TabularPolicy, seed: u64, num_episodes: usize) -> Vec<Trajectory> {
    let mut rng = rng_from_seed(seed);
    (0..num_episodes).map(|_| rollout_episode(mdp, policy, &mut rng)).collect()
}

fn rollout_episode<R: Rng>(mdp: &MdpSpec, policy: &TabularPolicy, rng: &mut R) -> Trajectory {
    let mut s = sample_index(&mdp.initial_dist, rng);
    let (mut states, mut actions, mut rewards) = (Vec::new(), Vec::new(), Vec::new());
    while states.len() < mdp.horizon && !mdp.terminal[s] {
        let a = policy.sample(s, rng);
        states.push(s);
        actions.push(a);
        rewards.push(mdp.reward[s][a]);
        s = sample_index(&mdp.transition[s][a], rng);
    }
    Trajectory { states, actions, rewards: Some(rewards), final_state: s, terminated: mdp.terminal[s] }
}
