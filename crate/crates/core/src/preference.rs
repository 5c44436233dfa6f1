//! Bradley-Terry preference models and reward learning.
//!
//! A markovian reward model scores a segment by `Σ r(s, a)`; a hindsight
//! model scores it by `Σ r(s_t, a_t, z_t)` where `z_t` comes from the frozen
//! VAE posterior over the future window of step `t` inside the segment.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{Label, PreferenceDataset, PreferencePair, Segment};
use crate::error::{Error, Result};
use crate::hindsight_vae::VaeModel;
use crate::numcore::checkpoint::{load_into, read_manifest, save_checkpoint};
use crate::numcore::{
    grad_check, sample_index, softplus, Activation, Adam, GradCheckReport, LayerSpec, Matrix, Mlp, ParamStore, Tape, Var,
};
use crate::seeds::{derive_seed, derive_seed_indexed, rng_from_seed};

/// `P(σ⁰ ≻ σ¹)` under Bradley-Terry, evaluated in log space.
pub fn bt_prob(rho0: f64, rho1: f64) -> f64 {
    (-softplus(rho1 - rho0)).exp()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardKind {
    Markovian,
    Hindsight,
}

impl RewardKind {
    fn as_str(self) -> &'static str {
        match self {
            RewardKind::Markovian => "markovian",
            RewardKind::Hindsight => "hindsight",
        }
    }
}

/// How `z_t` is drawn from the posterior when scoring a segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatentMode {
    PosteriorSample,
    PosteriorMode,
}

impl FromStr for LatentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "posterior-sample" => Ok(LatentMode::PosteriorSample),
            "posterior-mode" => Ok(LatentMode::PosteriorMode),
            other => Err(Error::Config(format!("unknown latent mode `{other}`"))),
        }
    }
}

impl fmt::Display for LatentMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LatentMode::PosteriorSample => "posterior-sample",
            LatentMode::PosteriorMode => "posterior-mode",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub hidden: Vec<usize>,
    pub hidden_activation: Activation,
    pub final_activation: Activation,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub latent_mode: LatentMode,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            hidden: vec![64, 64],
            hidden_activation: Activation::Tanh,
            final_activation: Activation::Identity,
            lr: 1e-3,
            steps: 2000,
            batch_size: 64,
            latent_mode: LatentMode::PosteriorSample,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) {
            return Err(Error::Config("reward: hidden widths must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.batch_size == 0 {
            return Err(Error::Config("reward: lr and batch_size must be positive".into()));
        }
        if !matches!(self.final_activation, Activation::Identity | Activation::Relu) {
            return Err(Error::Config("reward: final_activation must be identity or relu".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RewardHyper {
    kind: RewardKind,
    num_states: usize,
    num_actions: usize,
    num_codes: usize,
    config: RewardConfig,
}

/// Learned per-step reward `r_ψ`.
#[derive(Clone, Debug)]
pub struct RewardModel {
    kind: RewardKind,
    num_states: usize,
    num_actions: usize,
    num_codes: usize,
    config: RewardConfig,
    seed: u64,
    store: ParamStore,
    net: Mlp,
    vae: Option<Arc<VaeModel>>,
}

/// Training summary emitted next to a reward checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardDiagnostics {
    pub final_loss: f64,
    /// Fraction of non-neutral pairs ranked correctly; `None` if every pair is neutral.
    pub train_accuracy: Option<f64>,
    pub steps: usize,
    pub seed: u64,
}

/// Pairs with per-step features fixed, ready for loss evaluation. The
/// reward net only sees the distinct `(s, a, z)` rows; `counts0[b, u]` is
/// how often row `u` occurs in the first segment of pair `b`, so the
/// segment strength is `counts0 · r(features)`.
#[derive(Clone, Debug)]
pub struct PairBatch {
    features: Matrix,
    counts0: Matrix,
    counts1: Matrix,
    labels: Vec<f64>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Posterior probabilities for every step of both segments of every pair.
type PosteriorCache = Vec<[Vec<Vec<f64>>; 2]>;

impl RewardModel {
    pub fn new(
        kind: RewardKind,
        num_states: usize,
        num_actions: usize,
        vae: Option<Arc<VaeModel>>,
        config: RewardConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let num_codes = match (kind, &vae) {
            (RewardKind::Markovian, _) => 0,
            (RewardKind::Hindsight, None) => return Err(Error::MissingVae),
            (RewardKind::Hindsight, Some(v)) => {
                if v.num_states() != num_states || v.num_actions() != num_actions {
                    return Err(Error::InvalidDimension(format!(
                        "VAE features are {}x{}, reward model expects {num_states}x{num_actions}",
                        v.num_states(),
                        v.num_actions()
                    )));
                }
                v.num_codes()
            }
        };
        let vae = if kind == RewardKind::Hindsight { vae } else { None };
        let mut rng = rng_from_seed(seed);
        let mut store = ParamStore::new();
        let net = Mlp::new(
            &mut store,
            "reward",
            &LayerSpec::new(num_states + num_actions + num_codes, &config.hidden, 1),
            config.hidden_activation,
            config.final_activation,
            &mut rng,
        );
        Ok(RewardModel { kind, num_states, num_actions, num_codes, config, seed, store, net, vae })
    }

    pub fn kind(&self) -> RewardKind {
        self.kind
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn num_codes(&self) -> usize {
        self.num_codes
    }

    pub fn vae(&self) -> Option<&Arc<VaeModel>> {
        self.vae.as_ref()
    }

    pub fn config(&self) -> &RewardConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    #[cfg(test)]
    pub(crate) fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    #[cfg(test)]
    pub(crate) fn net(&self) -> &Mlp {
        &self.net
    }

    fn feature_row(&self, row: &mut [f64], s: usize, a: usize, z: Option<usize>) {
        row[s] = 1.0;
        row[self.num_states + a] = 1.0;
        if let Some(z) = z {
            row[self.num_states + self.num_actions + z] = 1.0;
        }
    }

    fn check_inputs(&self, states: &[usize], actions: &[usize], codes: Option<&[usize]>) -> Result<()> {
        if states.len() != actions.len() || codes.is_some_and(|c| c.len() != states.len()) {
            return Err(Error::InvalidDimension("reward inputs differ in length".into()));
        }
        if states.iter().any(|&s| s >= self.num_states) || actions.iter().any(|&a| a >= self.num_actions) {
            return Err(Error::InvalidDimension("state or action outside the reward model's feature space".into()));
        }
        match (self.kind, codes) {
            (RewardKind::Markovian, Some(_)) => {
                Err(Error::KindMismatch { expected: "hindsight", found: self.kind.as_str() })
            }
            (RewardKind::Hindsight, None) => {
                Err(Error::KindMismatch { expected: "markovian", found: self.kind.as_str() })
            }
            (RewardKind::Hindsight, Some(c)) if c.iter().any(|&z| z >= self.num_codes) => {
                Err(Error::InvalidDimension("latent code outside the VAE's codebook".into()))
            }
            _ => Ok(()),
        }
    }

    /// Per-step rewards; `codes` must be given exactly for hindsight models.
    pub fn rewards(&self, states: &[usize], actions: &[usize], codes: Option<&[usize]>) -> Result<Vec<f64>> {
        self.check_inputs(states, actions, codes)?;
        let mut x = Matrix::zeros(states.len(), self.num_states + self.num_actions + self.num_codes);
        for i in 0..states.len() {
            self.feature_row(x.row_mut(i), states[i], actions[i], codes.map(|c| c[i]));
        }
        Ok(self.net.apply(&self.store, &x)?.into_vec())
    }

    /// `r_ψ(s, a)` of a markovian model.
    pub fn reward(&self, s: usize, a: usize) -> Result<f64> {
        Ok(self.rewards(&[s], &[a], None)?[0])
    }

    /// `r_ψ(s, a, z)` of a hindsight model.
    pub fn reward_given(&self, s: usize, a: usize, z: usize) -> Result<f64> {
        Ok(self.rewards(&[s], &[a], Some(&[z]))?[0])
    }

    pub fn strength_mr(&self, segment: &Segment) -> Result<f64> {
        if self.kind != RewardKind::Markovian {
            return Err(Error::KindMismatch { expected: "markovian", found: self.kind.as_str() });
        }
        Ok(self.rewards(&segment.states, &segment.actions, None)?.iter().sum())
    }

    pub fn strength_hpm<R: Rng>(&self, segment: &Segment, mode: LatentMode, rng: &mut R) -> Result<f64> {
        if self.kind != RewardKind::Hindsight {
            return Err(Error::KindMismatch { expected: "hindsight", found: self.kind.as_str() });
        }
        let vae = self.vae.as_ref().ok_or(Error::MissingVae)?;
        let posteriors = vae.encode_all(&segment.states, &segment.actions)?;
        let codes: Vec<usize> = posteriors.iter().map(|q| pick_code(&q.probs(), mode, rng)).collect();
        Ok(self.rewards(&segment.states, &segment.actions, Some(&codes))?.iter().sum())
    }

    /// Strength of either kind.
    pub fn strength<R: Rng>(&self, segment: &Segment, mode: LatentMode, rng: &mut R) -> Result<f64> {
        match self.kind {
            RewardKind::Markovian => self.strength_mr(segment),
            RewardKind::Hindsight => self.strength_hpm(segment, mode, rng),
        }
    }

    fn posterior_cache(&self, pairs: &[PreferencePair]) -> Result<PosteriorCache> {
        let Some(vae) = self.vae.as_ref().filter(|_| self.kind == RewardKind::Hindsight) else {
            return Ok(Vec::new());
        };
        pairs
            .iter()
            .map(|p| {
                let enc = |s: &Segment| -> Result<Vec<Vec<f64>>> {
                    Ok(vae.encode_all(&s.states, &s.actions)?.iter().map(|q| q.probs()).collect())
                };
                Ok([enc(&p.seg0)?, enc(&p.seg1)?])
            })
            .collect()
    }

    /// Fixes the per-step features of `pairs`, drawing codes per `mode`.
    pub fn pair_batch<R: Rng>(&self, pairs: &[PreferencePair], mode: LatentMode, rng: &mut R) -> Result<PairBatch> {
        let cache = self.posterior_cache(pairs)?;
        let indices: Vec<usize> = (0..pairs.len()).collect();
        self.batch_from(pairs, &cache, &indices, mode, rng)
    }

    fn batch_from<R: Rng>(
        &self,
        pairs: &[PreferencePair],
        cache: &PosteriorCache,
        indices: &[usize],
        mode: LatentMode,
        rng: &mut R,
    ) -> Result<PairBatch> {
        if indices.is_empty() {
            return Err(Error::EmptyDataset(None));
        }
        let width = self.num_states + self.num_actions + self.num_codes;
        let mut unique: BTreeMap<(usize, usize, usize), usize> = BTreeMap::new();
        let mut occurrences: [Vec<(usize, usize)>; 2] = [Vec::new(), Vec::new()];
        let mut labels = Vec::with_capacity(indices.len());
        for (b, &i) in indices.iter().enumerate() {
            let pair = &pairs[i];
            for (side, seg) in [&pair.seg0, &pair.seg1].into_iter().enumerate() {
                let codes: Option<Vec<usize>> = if self.kind == RewardKind::Hindsight {
                    Some(cache[i][side].iter().map(|p| pick_code(p, mode, rng)).collect())
                } else {
                    None
                };
                self.check_inputs(&seg.states, &seg.actions, codes.as_deref())?;
                for t in 0..seg.len() {
                    let key = (seg.states[t], seg.actions[t], codes.as_ref().map_or(usize::MAX, |c| c[t]));
                    let next = unique.len();
                    let u = *unique.entry(key).or_insert(next);
                    occurrences[side].push((b, u));
                }
            }
            labels.push(pair.label.value());
        }
        let mut features = Matrix::zeros(unique.len(), width);
        for (&(s, a, z), &u) in &unique {
            self.feature_row(features.row_mut(u), s, a, (z != usize::MAX).then_some(z));
        }
        let [counts0, counts1] = occurrences.map(|occ| {
            let mut m = Matrix::zeros(indices.len(), unique.len());
            for (b, u) in occ {
                m.set(b, u, m.get(b, u) + 1.0);
            }
            m
        });
        Ok(PairBatch { features, counts0, counts1, labels })
    }

    /// Mean cross-entropy of the labels under the Bradley-Terry model.
    pub fn pref_loss<R: Rng>(&self, pairs: &[PreferencePair], mode: LatentMode, rng: &mut R) -> Result<f64> {
        let batch = self.pair_batch(pairs, mode, rng)?;
        Ok(self.batch_loss(&batch))
    }

    pub fn batch_loss(&self, batch: &PairBatch) -> f64 {
        let mut tape = Tape::new();
        let loss = pref_loss_graph(&self.net, &mut tape, &self.store, batch);
        tape.scalar(loss)
    }

    /// Strengths `(ρ0, ρ1)` for every pair in `batch`.
    pub fn batch_strengths(&self, batch: &PairBatch) -> Vec<(f64, f64)> {
        let r = self.net.apply(&self.store, &batch.features).expect("feature width is fixed by construction");
        let rho0 = batch.counts0.matmul(&r);
        let rho1 = batch.counts1.matmul(&r);
        rho0.data().iter().copied().zip(rho1.data().iter().copied()).collect()
    }

    pub fn grad_check_pref_loss(&mut self, batch: &PairBatch, rel_tol: f64) -> GradCheckReport {
        let net = &self.net;
        grad_check(&mut self.store, rel_tol, |tape, store| pref_loss_graph(net, tape, store, batch))
    }

    /// Fraction of non-neutral pairs whose predicted winner matches the label.
    /// Hindsight strengths use the posterior mode.
    pub fn accuracy(&self, pairs: &[PreferencePair]) -> Result<Option<f64>> {
        let decisive: Vec<PreferencePair> = pairs.iter().filter(|p| p.label != Label::Half).cloned().collect();
        if decisive.is_empty() {
            return Ok(None);
        }
        let mut rng = rng_from_seed(0);
        let batch = self.pair_batch(&decisive, LatentMode::PosteriorMode, &mut rng)?;
        let correct = self
            .batch_strengths(&batch)
            .iter()
            .zip(&decisive)
            .filter(|((r0, r1), p)| match p.label {
                Label::Zero => r0 > r1,
                _ => r1 > r0,
            })
            .count();
        Ok(Some(correct as f64 / decisive.len() as f64))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let hyper = RewardHyper {
            kind: self.kind,
            num_states: self.num_states,
            num_actions: self.num_actions,
            num_codes: self.num_codes,
            config: self.config.clone(),
        };
        save_checkpoint(dir, &format!("reward-{}", self.kind.as_str()), &self.store, serde_json::to_value(hyper)?, self.seed)?;
        Ok(())
    }

    /// Loads a checkpoint; hindsight models need the VAE they were trained with.
    pub fn load(dir: &Path, vae: Option<Arc<VaeModel>>) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        let hyper: RewardHyper = serde_json::from_value(manifest.hyperparameters.clone())
            .map_err(|e| Error::Checkpoint(format!("reward hyperparameters: {e}")))?;
        let mut model = RewardModel::new(hyper.kind, hyper.num_states, hyper.num_actions, vae, hyper.config, manifest.seed)?;
        if model.num_codes != hyper.num_codes {
            return Err(Error::Checkpoint(format!(
                "reward model expects {} latent codes, attached VAE has {}",
                hyper.num_codes, model.num_codes
            )));
        }
        load_into(dir, &mut model.store)?;
        Ok(model)
    }
}

fn pick_code<R: Rng>(probs: &[f64], mode: LatentMode, rng: &mut R) -> usize {
    match mode {
        LatentMode::PosteriorSample => sample_index(probs, rng),
        LatentMode::PosteriorMode => crate::numcore::argmax(probs),
    }
}

/// `mean[(1-y)·softplus(ρ1-ρ0) + y·softplus(ρ0-ρ1)]`, which equals
/// `-mean[(1-y)·log P(σ⁰≻σ¹) + y·log P(σ¹≻σ⁰)]`.
fn pref_loss_graph(net: &Mlp, tape: &mut Tape, store: &ParamStore, batch: &PairBatch) -> Var {
    let x = tape.constant(batch.features.clone());
    let r = net.forward(tape, store, x);
    let s0 = tape.constant(batch.counts0.clone());
    let s1 = tape.constant(batch.counts1.clone());
    let rho0 = tape.matmul(s0, r);
    let rho1 = tape.matmul(s1, r);
    let d = tape.sub(rho1, rho0);
    let neg_d = tape.scale(d, -1.0);
    let lose0 = tape.softplus(d);
    let lose1 = tape.softplus(neg_d);
    let y = Matrix::column(batch.labels.clone());
    let w0 = y.map(|v| 1.0 - v);
    let t0 = tape.mul_const(lose0, w0);
    let t1 = tape.mul_const(lose1, y);
    let total = tape.add(t0, t1);
    tape.mean(total)
}

/// Trains `r_ψ` with Adam on the preference loss. Hindsight codes are
/// resampled from the posterior at every step when the configured latent
/// mode is `posterior-sample`.
pub fn train_reward(
    dataset: &PreferenceDataset,
    kind: RewardKind,
    vae: Option<Arc<VaeModel>>,
    num_states: usize,
    num_actions: usize,
    config: &RewardConfig,
    seed: u64,
) -> Result<(RewardModel, RewardDiagnostics)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset(None));
    }
    let mut model = RewardModel::new(kind, num_states, num_actions, vae, config.clone(), seed)?;
    let pairs = &dataset.pairs;
    let cache = model.posterior_cache(pairs)?;
    let mut rng = rng_from_seed(derive_seed(seed, "reward-batches"));
    let adam = Adam::with_lr(config.lr);
    let full: Vec<usize> = (0..pairs.len()).collect();
    for step in 0..config.steps {
        let indices: Vec<usize> = if pairs.len() <= config.batch_size {
            full.clone()
        } else {
            (0..config.batch_size).map(|_| rng.gen_range(0..pairs.len())).collect()
        };
        let batch = model.batch_from(pairs, &cache, &indices, config.latent_mode, &mut rng)?;
        let mut tape = Tape::new();
        let loss = pref_loss_graph(&model.net, &mut tape, &model.store, &batch);
        if !tape.scalar(loss).is_finite() {
            return Err(Error::NonFinite { what: "preference loss".into(), step });
        }
        tape.backward(loss, &mut model.store);
        model.store.adam_step(&adam).map_err(|e| match e {
            Error::NonFinite { what, .. } => Error::NonFinite { what, step },
            other => other,
        })?;
    }
    model.store.freeze();
    let final_batch = model.batch_from(pairs, &cache, &full, LatentMode::PosteriorMode, &mut rng)?;
    let diagnostics = RewardDiagnostics {
        final_loss: model.batch_loss(&final_batch),
        train_accuracy: model.accuracy(pairs)?,
        steps: config.steps,
        seed,
    };
    Ok((model, diagnostics))
}

/// Seed of ensemble member `index`; member 0 reuses the ensemble seed.
pub fn ensemble_member_seed(seed: u64, index: usize) -> u64 {
    if index == 0 {
        seed
    } else {
        derive_seed_indexed(seed, "ensemble-member", index as u64)
    }
}

/// Independently initialised markovian models on the same data.
pub fn train_reward_ensemble(
    dataset: &PreferenceDataset,
    ensemble_size: usize,
    num_states: usize,
    num_actions: usize,
    config: &RewardConfig,
    seed: u64,
) -> Result<Vec<(RewardModel, RewardDiagnostics)>> {
    if ensemble_size == 0 {
        return Err(Error::Config("ensemble size must be at least 1".into()));
    }
    (0..ensemble_size)
        .map(|i| {
            train_reward(dataset, RewardKind::Markovian, None, num_states, num_actions, config, ensemble_member_seed(seed, i))
        })
        .collect()
}

/// Mean markovian reward of an ensemble.
pub fn ensemble_reward(models: &[RewardModel], s: usize, a: usize) -> Result<f64> {
    if models.is_empty() {
        return Err(Error::Config("empty reward ensemble".into()));
    }
    let mut total = 0.0;
    for m in models {
        total += m.reward(s, a)?;
    }
    Ok(total / models.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{gambling_preference_dataset, DatasetMeta, PreferenceDataset};
    use crate::envs::gambling::*;
    use crate::hindsight_vae::VaeConfig;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> RewardConfig {
        RewardConfig { hidden: vec![8], steps: 300, ..RewardConfig::default() }
    }

    fn set_constant(model: &mut RewardModel, c: f64) {
        let layers = model.net.layers().to_vec();
        let last = layers.last().unwrap();
        model.store.value_mut(last.weight).data_mut().fill(0.0);
        model.store.value_mut(last.bias).data_mut().fill(c);
    }

    fn tiny_vae(k: usize) -> Arc<VaeModel> {
        let c = VaeConfig { k, num_codes: 4, embed_dim: 6, hidden: vec![8], ..VaeConfig::default() };
        Arc::new(VaeModel::new(c, NUM_STATES, NUM_ACTIONS, 3).unwrap())
    }

    #[test]
    fn bt_prob_examples() {
        assert_eq!(bt_prob(0.0, 0.0), 0.5);
        assert!((bt_prob(3f64.ln(), 0.0) - 0.75).abs() < 1e-12);
        assert_eq!(bt_prob(1000.0, 0.0), 1.0);
        assert_eq!(bt_prob(0.0, 1000.0), 0.0);
    }

    proptest! {
        #[test]
        fn bt_prob_is_antisymmetric(a in -1e3f64..1e3, b in -1e3f64..1e3) {
            prop_assert!((bt_prob(a, b) + bt_prob(b, a) - 1.0).abs() < 1e-9);
        }

        #[test]
        fn bt_prob_is_shift_invariant(a in -50f64..50.0, b in -50f64..50.0, c in -10f64..10.0) {
            prop_assert!((bt_prob(a + 2.0 * c, b + 2.0 * c) - bt_prob(a, b)).abs() < 1e-7);
        }
    }

    #[test]
    fn strength_mr_examples() {
        let mut m = RewardModel::new(RewardKind::Markovian, 5, 3, None, cfg(), 1).unwrap();
        let seg = Segment::new(vec![S1, S_GOOD], vec![A1, A3]);
        set_constant(&mut m, 0.0);
        assert_eq!(m.strength_mr(&seg).unwrap(), 0.0);
        set_constant(&mut m, 0.7);
        assert!((m.strength_mr(&seg).unwrap() - 1.4).abs() < 1e-12);

        // tabular head: one-hot features times a hand-set weight column
        let mut tab = RewardModel::new(
            RewardKind::Markovian,
            5,
            3,
            None,
            RewardConfig { hidden: vec![], ..cfg() },
            1,
        )
        .unwrap();
        let layer = tab.net.layers()[0].clone();
        let mut w = vec![0.0; 8];
        w[S1] = 0.3;
        w[S_GOOD] = 0.9;
        tab.store.value_mut(layer.weight).data_mut().copy_from_slice(&w);
        assert!((tab.strength_mr(&seg).unwrap() - 1.2).abs() < 1e-12);
        assert!(matches!(tab.strength_hpm(&seg, LatentMode::PosteriorMode, &mut ChaCha8Rng::seed_from_u64(0)), Err(Error::KindMismatch { .. })));
    }

    #[test]
    fn hindsight_requires_vae() {
        assert!(matches!(RewardModel::new(RewardKind::Hindsight, 5, 3, None, cfg(), 1), Err(Error::MissingVae)));
    }

    #[test]
    fn hindsight_without_latent_weights_matches_markovian_head() {
        let vae = tiny_vae(1);
        let mut h = RewardModel::new(RewardKind::Hindsight, 5, 3, Some(vae), cfg(), 2).unwrap();
        let mut m = RewardModel::new(RewardKind::Markovian, 5, 3, None, cfg(), 2).unwrap();
        // copy the (s, a) part of the first layer, zero the z part
        let (hl, ml) = (h.net.layers()[0].clone(), m.net.layers()[0].clone());
        let hw = h.store.value(hl.weight).clone();
        let mw = m.store.value_mut(ml.weight);
        for r in 0..8 {
            mw.row_mut(r).copy_from_slice(hw.row(r));
        }
        for r in 8..hw.rows() {
            h.store.value_mut(hl.weight).row_mut(r).fill(0.0);
        }
        for (hi, mi) in h.net.layers().iter().zip(m.net.layers()).skip(1) {
            let v = h.store.value(hi.weight).clone();
            *m.store.value_mut(mi.weight) = v;
        }
        for (hi, mi) in h.net.layers().iter().zip(m.net.layers()) {
            let v = h.store.value(hi.bias).clone();
            *m.store.value_mut(mi.bias) = v;
        }
        let seg = Segment::new(vec![S1, S_BAD], vec![A1, A3]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let hs = h.strength_hpm(&seg, LatentMode::PosteriorSample, &mut rng).unwrap();
        assert!((hs - m.strength_mr(&seg).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn identical_futures_give_identical_mode_strengths() {
        let h = RewardModel::new(RewardKind::Hindsight, 5, 3, Some(tiny_vae(2)), cfg(), 4).unwrap();
        let a = Segment::new(vec![S1, S_GOOD], vec![A1, A3]);
        let mut b = a.clone();
        b.source_traj = 9;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            h.strength_hpm(&a, LatentMode::PosteriorMode, &mut rng).unwrap(),
            h.strength_hpm(&b, LatentMode::PosteriorMode, &mut rng).unwrap()
        );
    }

    #[test]
    fn pref_loss_examples() {
        let mut m = RewardModel::new(RewardKind::Markovian, 5, 3, None, cfg(), 1).unwrap();
        set_constant(&mut m, 0.3);
        let ds = gambling_preference_dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((m.pref_loss(&ds.pairs, LatentMode::PosteriorMode, &mut rng).unwrap() - 2f64.ln()).abs() < 1e-12);

        // neutral labels: loss is at least ln 2 whatever the model says
        let neutral: Vec<PreferencePair> =
            ds.pairs.iter().map(|p| PreferencePair { label: Label::Half, ..p.clone() }).collect();
        let trained = train_reward(&ds, RewardKind::Markovian, None, 5, 3, &cfg(), 3).unwrap().0;
        assert!(trained.pref_loss(&neutral, LatentMode::PosteriorMode, &mut rng).unwrap() >= 2f64.ln() - 1e-12);
        assert!(m.pref_loss(&[], LatentMode::PosteriorMode, &mut rng).is_err());
    }

    #[test]
    fn perfect_prediction_drives_loss_to_zero() {
        let mut tab = RewardModel::new(RewardKind::Markovian, 5, 3, None, RewardConfig { hidden: vec![], ..cfg() }, 1).unwrap();
        let layer = tab.net.layers()[0].clone();
        let mut w = vec![0.0; 8];
        w[S_GOOD] = 100.0;
        tab.store.value_mut(layer.weight).data_mut().copy_from_slice(&w);
        let pair = PreferencePair {
            seg0: Segment::new(vec![S1, S_GOOD], vec![A1, A3]),
            seg1: Segment::new(vec![S1, S_AVG], vec![A2, A3]),
            label: Label::Zero,
        };
        let loss = tab.pref_loss(&[pair], LatentMode::PosteriorMode, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(loss < 1e-30);
    }

    #[test]
    fn pref_loss_gradients_pass_finite_differences() {
        let ds = gambling_preference_dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = RewardModel::new(RewardKind::Markovian, 5, 3, None, cfg(), 1).unwrap();
        let batch = m.pair_batch(&ds.pairs, LatentMode::PosteriorSample, &mut rng).unwrap();
        let report = m.grad_check_pref_loss(&batch, 1e-4);
        assert!(report.passed, "{:?}", report.worst());
        let mut h = RewardModel::new(RewardKind::Hindsight, 5, 3, Some(tiny_vae(2)), cfg(), 1).unwrap();
        let mut pairs = ds.pairs.clone();
        pairs[3].label = Label::Half;
        let batch = h.pair_batch(&pairs, LatentMode::PosteriorSample, &mut rng).unwrap();
        let report = h.grad_check_pref_loss(&batch, 1e-4);
        assert!(report.passed, "{:?}", report.worst());
    }

    #[test]
    fn gambling_dataset_is_fit_by_both_kinds() {
        let ds = gambling_preference_dataset();
        let (_, diag) = train_reward(&ds, RewardKind::Markovian, None, 5, 3, &RewardConfig::default(), 7).unwrap();
        assert_eq!(diag.train_accuracy, Some(1.0));
        assert_eq!(diag.steps, 2000);

        let unlabeled = crate::datasets::collect_unlabeled(
            &crate::envs::gambling_mdp(),
            &crate::envs::gambling_behavior_policy(),
            DatasetMeta::default(),
            300,
            1,
        )
        .unwrap();
        let vcfg = VaeConfig { k: 2, steps: 800, batch_size: 32, ..VaeConfig::default() };
        let vae = Arc::new(crate::hindsight_vae::train_vae(&unlabeled, &vcfg, 5, 3, 2).unwrap().0);
        let (h, diag) = train_reward(&ds, RewardKind::Hindsight, Some(vae), 5, 3, &RewardConfig::default(), 7).unwrap();
        assert_eq!(diag.train_accuracy, Some(1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let good = h.strength_hpm(&Segment::new(vec![S1, S_GOOD], vec![A1, A3]), LatentMode::PosteriorMode, &mut rng).unwrap();
        let bad = h.strength_hpm(&Segment::new(vec![S1, S_BAD], vec![A1, A3]), LatentMode::PosteriorMode, &mut rng).unwrap();
        assert!((good - bad).abs() > 0.0);
    }

    #[test]
    fn flipped_labels_invert_the_ranking() {
        let ds = gambling_preference_dataset();
        let flipped = ds.label_flipped();
        let (m, diag) = train_reward(&flipped, RewardKind::Markovian, None, 5, 3, &RewardConfig::default(), 8).unwrap();
        assert_eq!(diag.train_accuracy, Some(1.0));
        assert_eq!(m.accuracy(&ds.pairs).unwrap(), Some(0.0));
    }

    #[test]
    fn training_is_deterministic_and_round_trips() {
        let ds = gambling_preference_dataset();
        let (a, da) = train_reward(&ds, RewardKind::Markovian, None, 5, 3, &cfg(), 9).unwrap();
        let (b, db) = train_reward(&ds, RewardKind::Markovian, None, 5, 3, &cfg(), 9).unwrap();
        assert_eq!(da, db);
        for id in a.store.ids() {
            assert_eq!(a.store.value(id), b.store.value(id));
        }
        let dir = tempfile::tempdir().unwrap();
        a.save(dir.path()).unwrap();
        let loaded = RewardModel::load(dir.path(), None).unwrap();
        assert_eq!(loaded.reward(S1, A1).unwrap(), a.reward(S1, A1).unwrap());
        assert!(RewardModel::load(dir.path(), Some(tiny_vae(1))).is_ok());
    }

    #[test]
    fn ensemble_members_differ_and_average() {
        let ds = gambling_preference_dataset();
        let single = train_reward(&ds, RewardKind::Markovian, None, 5, 3, &cfg(), 4).unwrap().0;
        let members = train_reward_ensemble(&ds, 3, 5, 3, &cfg(), 4).unwrap();
        assert_eq!(members[0].0.reward(S1, A1).unwrap(), single.reward(S1, A1).unwrap());
        let models: Vec<RewardModel> = members.into_iter().map(|m| m.0).collect();
        let mut max_gap: f64 = 0.0;
        for s in 0..5 {
            for a in 0..3 {
                max_gap = max_gap.max((models[0].reward(s, a).unwrap() - models[1].reward(s, a).unwrap()).abs());
            }
        }
        assert!(max_gap > 0.0);

        let mut c1 = models[0].clone();
        let mut c2 = models[1].clone();
        set_constant(&mut c1, 1.0);
        set_constant(&mut c2, 2.0);
        assert!((ensemble_reward(&[c1, c2], 0, 0).unwrap() - 1.5).abs() < 1e-12);
        assert!(train_reward_ensemble(&ds, 0, 5, 3, &cfg(), 4).is_err());
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let empty = PreferenceDataset { pairs: vec![], meta: DatasetMeta::default() };
        assert!(matches!(train_reward(&empty, RewardKind::Markovian, None, 5, 3, &cfg(), 1), Err(Error::EmptyDataset(_))));
    }
}
