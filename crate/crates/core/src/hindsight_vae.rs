//! Conditional VAE over future segments.
//!
//! * encoder `q(z_t | s_t, a_t, σ_{t:t+k})`: anti-causal attention over the
//!   clipped future window followed by a categorical head;
//! * decoder `p(s_{t+Δt}, a_{t+Δt} | s_t, a_t, z_t, Δt)` for `Δt ∈ 0..=k`,
//!   all offsets decoded in one batched pass;
//! * learned prior `f(z_t | s_t, a_t)`.
//!
//! Training minimises the negative ELBO with a weighted KL term. Gradients
//! pass through the categorical code via a temperature-relaxed one-hot
//! sample; inference uses exact categorical draws.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{Segment, UnlabeledDataset};
use crate::envs::state_action_features;
use crate::error::{Error, Result};
use crate::io::{read_json, sha256_hex, write_json};
use crate::numcore::checkpoint::{load_into, save_checkpoint};
use crate::numcore::{
    grad_check, gumbel, Activation, Adam, AnticausalEncoder, CategoricalDist, EncoderConfig, GradCheckReport, LayerSpec,
    Matrix, Mlp, ParamStore, Tape, Var, WindowBatch,
};
use crate::seeds::rng_from_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    /// Future length: the window for step `t` covers `t..=t+k`.
    pub k: usize,
    pub num_codes: usize,
    pub kl_coef: f64,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub temp_start: f64,
    pub temp_end: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            k: 5,
            num_codes: 16,
            kl_coef: 0.1,
            embed_dim: 32,
            num_layers: 1,
            hidden: vec![64, 64],
            lr: 1e-3,
            steps: 5000,
            batch_size: 64,
            temp_start: 1.0,
            temp_end: 0.3,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("vae: {m}")));
        if self.num_codes < 2 {
            return fail("num_codes must be at least 2");
        }
        if !(self.kl_coef >= 0.0 && self.kl_coef.is_finite()) {
            return fail("kl_coef must be a finite non-negative number");
        }
        if self.embed_dim == 0 || self.num_layers == 0 || self.hidden.contains(&0) {
            return fail("embed_dim, num_layers and hidden widths must be positive");
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return fail("lr and batch_size must be positive");
        }
        if !(self.temp_start > 0.0 && self.temp_end > 0.0) {
            return fail("relaxation temperatures must be positive");
        }
        Ok(())
    }

    /// Relaxation temperature at `step` of `steps`, annealed linearly.
    pub fn temperature(&self, step: usize) -> f64 {
        if self.steps <= 1 {
            return self.temp_end;
        }
        let frac = step as f64 / (self.steps - 1) as f64;
        self.temp_start + (self.temp_end - self.temp_start) * frac
    }
}

#[derive(Clone, Debug)]
pub(crate) struct VaeNets {
    encoder: AnticausalEncoder,
    posterior_head: Mlp,
    decoder: Mlp,
    prior: Mlp,
}

/// Trained (or freshly initialised) future-segment VAE.
#[derive(Clone, Debug)]
pub struct VaeModel {
    config: VaeConfig,
    num_states: usize,
    num_actions: usize,
    seed: u64,
    dataset_hash: String,
    pub(crate) store: ParamStore,
    pub(crate) nets: VaeNets,
}

/// One decoded future step.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedStep {
    pub state_probs: Vec<f64>,
    pub action_probs: Vec<f64>,
}

/// Minibatch of `(sequence, t)` items prepared for the ELBO.
#[derive(Clone, Debug)]
pub struct ElboBatch {
    windows: WindowBatch,
    anchors: Matrix,
    /// `(item, Δt, target state, target action)` per reconstruction row.
    rows: Vec<(usize, usize, usize, usize)>,
}

impl ElboBatch {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

impl TrainLog {
    /// Mean loss over the first `window` steps.
    pub fn smoothed_start(&self, window: usize) -> f64 {
        let n = window.min(self.losses.len()).max(1);
        self.losses[..n.min(self.losses.len())].iter().sum::<f64>() / n as f64
    }

    /// Mean loss over the last `window` steps.
    pub fn smoothed_end(&self, window: usize) -> f64 {
        let n = window.min(self.losses.len()).max(1);
        let start = self.losses.len().saturating_sub(n);
        self.losses[start..].iter().sum::<f64>() / n as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    k: usize,
    num_codes: usize,
    kl_coef: f64,
    dataset_hash: String,
    num_states: usize,
    num_actions: usize,
    config: VaeConfig,
}

const SIDECAR_FILE: &str = "vae.json";

impl VaeModel {
    pub fn new(config: VaeConfig, num_states: usize, num_actions: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(seed);
        let mut store = ParamStore::new();
        let token_dim = num_states + num_actions;
        let k = config.k;
        let encoder = AnticausalEncoder::new(
            &mut store,
            "encoder",
            EncoderConfig {
                input_dim: token_dim,
                embed_dim: config.embed_dim,
                num_layers: config.num_layers,
                max_positions: k + 1,
            },
            &mut rng,
        );
        let posterior_head = Mlp::new(
            &mut store,
            "posterior",
            &LayerSpec::new(config.embed_dim, &config.hidden, config.num_codes),
            Activation::Tanh,
            Activation::Identity,
            &mut rng,
        );
        let decoder = Mlp::new(
            &mut store,
            "decoder",
            &LayerSpec::new(token_dim + config.num_codes + k + 1, &config.hidden, token_dim),
            Activation::Tanh,
            Activation::Identity,
            &mut rng,
        );
        let prior = Mlp::new(
            &mut store,
            "prior",
            &LayerSpec::new(token_dim, &config.hidden, config.num_codes),
            Activation::Tanh,
            Activation::Identity,
            &mut rng,
        );
        Ok(VaeModel {
            config,
            num_states,
            num_actions,
            seed,
            dataset_hash: String::new(),
            store,
            nets: VaeNets { encoder, posterior_head, decoder, prior },
        })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.config
    }

    pub fn k(&self) -> usize {
        self.config.k
    }

    pub fn num_codes(&self) -> usize {
        self.config.num_codes
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn dataset_hash(&self) -> &str {
        &self.dataset_hash
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    fn token(&self, s: usize, a: usize) -> Vec<f64> {
        let mut t = vec![0.0; self.num_states + self.num_actions];
        t[s] = 1.0;
        t[self.num_states + a] = 1.0;
        t
    }

    fn check_sequence(&self, states: &[usize], actions: &[usize]) -> Result<()> {
        if states.len() != actions.len() {
            return Err(Error::InvalidDimension("states and actions differ in length".into()));
        }
        if states.iter().any(|&s| s >= self.num_states) || actions.iter().any(|&a| a >= self.num_actions) {
            return Err(Error::InvalidDimension("state or action index outside the VAE's feature space".into()));
        }
        Ok(())
    }

    /// Window for position `t`: `t..=min(t+k, len-1)`.
    fn window_end(&self, len: usize, t: usize) -> usize {
        (t + self.config.k).min(len - 1)
    }

    fn push_window(&self, batch: &mut WindowBatch, states: &[usize], actions: &[usize], t: usize) {
        let end = self.window_end(states.len(), t);
        let tokens: Vec<Vec<f64>> = (t..=end).map(|j| self.token(states[j], actions[j])).collect();
        batch.push(tokens.iter().map(Vec::as_slice));
    }

    /// Builds an ELBO minibatch from `(states, actions, t)` items.
    pub fn elbo_batch(&self, items: &[(&[usize], &[usize], usize)]) -> Result<ElboBatch> {
        if items.is_empty() {
            return Err(Error::EmptyDataset(None));
        }
        let width = self.config.k + 1;
        let mut windows = WindowBatch::new(width, self.num_states + self.num_actions, items.len());
        let mut anchor_s = Vec::with_capacity(items.len());
        let mut anchor_a = Vec::with_capacity(items.len());
        let mut rows = Vec::new();
        for (i, &(states, actions, t)) in items.iter().enumerate() {
            self.check_sequence(states, actions)?;
            if t >= states.len() {
                return Err(Error::IndexOutOfRange { index: t, len: states.len() });
            }
            self.push_window(&mut windows, states, actions, t);
            anchor_s.push(states[t]);
            anchor_a.push(actions[t]);
            for j in t..=self.window_end(states.len(), t) {
                rows.push((i, j - t, states[j], actions[j]));
            }
        }
        let anchors = state_action_features(&anchor_s, &anchor_a, self.num_states, self.num_actions);
        Ok(ElboBatch { windows, anchors, rows })
    }

    /// Standard Gumbel noise shaped for `batch`.
    pub fn gumbel_noise<R: Rng>(&self, batch: &ElboBatch, rng: &mut R) -> Matrix {
        let k = self.config.num_codes;
        Matrix::from_vec(batch.len(), k, (0..batch.len() * k).map(|_| gumbel(rng)).collect())
    }

    /// Negative ELBO (reconstruction cross-entropy summed over offsets plus
    /// `kl_coef · KL(q ‖ f)`), averaged over the batch.
    pub fn elbo_loss(&self, batch: &ElboBatch, noise: &Matrix, temperature: f64) -> f64 {
        let mut tape = Tape::new();
        let loss = self.nets.elbo_loss(&mut tape, &self.store, &self.config, self.num_states, batch, noise, temperature);
        tape.scalar(loss)
    }

    /// Finite-difference check of the ELBO gradient at the current parameters.
    pub fn grad_check_elbo(&mut self, batch: &ElboBatch, noise: &Matrix, temperature: f64, rel_tol: f64) -> GradCheckReport {
        let (nets, config, ns) = (&self.nets, &self.config, self.num_states);
        grad_check(&mut self.store, rel_tol, |tape, store| {
            nets.elbo_loss(tape, store, config, ns, batch, noise, temperature)
        })
    }

    /// Posterior over `z_t` for position `t` of a segment.
    pub fn encode(&self, segment: &Segment, t: usize) -> Result<CategoricalDist> {
        self.encode_at(&segment.states, &segment.actions, t)
    }

    pub fn encode_at(&self, states: &[usize], actions: &[usize], t: usize) -> Result<CategoricalDist> {
        self.check_sequence(states, actions)?;
        if t >= states.len() {
            return Err(Error::IndexOutOfRange { index: t, len: states.len() });
        }
        let mut batch = WindowBatch::new(self.config.k + 1, self.num_states + self.num_actions, 1);
        self.push_window(&mut batch, states, actions, t);
        Ok(self.posteriors(&batch).remove(0))
    }

    /// Posteriors for every position of a sequence.
    pub fn encode_all(&self, states: &[usize], actions: &[usize]) -> Result<Vec<CategoricalDist>> {
        self.check_sequence(states, actions)?;
        if states.is_empty() {
            return Err(Error::InvalidDimension("cannot encode an empty sequence".into()));
        }
        let mut batch = WindowBatch::new(self.config.k + 1, self.num_states + self.num_actions, states.len());
        for t in 0..states.len() {
            self.push_window(&mut batch, states, actions, t);
        }
        Ok(self.posteriors(&batch))
    }

    /// Mean `KL(q(z|s,a,future) ‖ f(z|s,a))` over every position of `dataset`.
    pub fn mean_posterior_prior_kl(&self, dataset: &UnlabeledDataset) -> Result<f64> {
        let (mut total, mut count) = (0.0, 0usize);
        for traj in &dataset.trajectories {
            if traj.states.is_empty() {
                continue;
            }
            let posts = self.encode_all(&traj.states, &traj.actions)?;
            for (t, q) in posts.iter().enumerate() {
                total += q.kl(&self.prior(traj.states[t], traj.actions[t]));
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::EmptyDataset(None));
        }
        Ok(total / count as f64)
    }

    fn posteriors(&self, batch: &WindowBatch) -> Vec<CategoricalDist> {
        let mut tape = Tape::new();
        let logits = self.nets.posterior_logits(&mut tape, &self.store, batch);
        let m = tape.value(logits);
        (0..m.rows()).map(|r| CategoricalDist::from_logits(m.row(r).to_vec())).collect()
    }

    pub fn prior(&self, s: usize, a: usize) -> CategoricalDist {
        self.priors(&[(s, a)]).remove(0)
    }

    pub fn priors(&self, pairs: &[(usize, usize)]) -> Vec<CategoricalDist> {
        let (ss, aa): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
        let x = state_action_features(&ss, &aa, self.num_states, self.num_actions);
        let logits = self.nets.prior.apply(&self.store, &x).expect("prior input width is fixed by construction");
        (0..logits.rows()).map(|r| CategoricalDist::from_logits(logits.row(r).to_vec())).collect()
    }

    /// `n` i.i.d. codes from `f(·|s, a)`.
    pub fn sample_prior<R: Rng>(&self, s: usize, a: usize, n: usize, rng: &mut R) -> Vec<usize> {
        let prior = self.prior(s, a);
        let probs = prior.probs();
        (0..n).map(|_| crate::numcore::sample_index(&probs, rng)).collect()
    }

    /// Full support of `f(·|s, a)` with probabilities.
    pub fn enumerate_prior(&self, s: usize, a: usize) -> (Vec<usize>, Vec<f64>) {
        ((0..self.config.num_codes).collect(), self.prior(s, a).probs())
    }

    /// Predicted `(s_{t+Δt}, a_{t+Δt})` distributions for code `z`.
    pub fn decode(&self, s: usize, a: usize, z: usize, delta_t: usize) -> Result<DecodedStep> {
        if delta_t > self.config.k {
            return Err(Error::DeltaOutOfRange { delta: delta_t, k: self.config.k });
        }
        Ok(self.decode_offsets(s, a, z, &[delta_t]).remove(0))
    }

    /// Every offset `0..=k` in one batched pass.
    pub fn decode_all(&self, s: usize, a: usize, z: usize) -> Vec<DecodedStep> {
        let offsets: Vec<usize> = (0..=self.config.k).collect();
        self.decode_offsets(s, a, z, &offsets)
    }

    fn decode_offsets(&self, s: usize, a: usize, z: usize, offsets: &[usize]) -> Vec<DecodedStep> {
        let (ns, nk) = (self.num_states, self.config.num_codes);
        let token = self.token(s, a);
        let width = token.len() + nk + self.config.k + 1;
        let mut x = Matrix::zeros(offsets.len(), width);
        for (r, &d) in offsets.iter().enumerate() {
            let row = x.row_mut(r);
            row[..token.len()].copy_from_slice(&token);
            row[token.len() + z] = 1.0;
            row[token.len() + nk + d] = 1.0;
        }
        let logits = self.nets.decoder.apply(&self.store, &x).expect("decoder input width is fixed by construction");
        (0..offsets.len())
            .map(|r| {
                let row = logits.row(r);
                DecodedStep {
                    state_probs: CategoricalDist::from_logits(row[..ns].to_vec()).probs(),
                    action_probs: CategoricalDist::from_logits(row[ns..].to_vec()).probs(),
                }
            })
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let hyper = serde_json::to_value(&self.config)?;
        save_checkpoint(dir, "hindsight-vae", &self.store, hyper, self.seed)?;
        let sidecar = Sidecar {
            k: self.config.k,
            num_codes: self.config.num_codes,
            kl_coef: self.config.kl_coef,
            dataset_hash: self.dataset_hash.clone(),
            num_states: self.num_states,
            num_actions: self.num_actions,
            config: self.config.clone(),
        };
        write_json(&dir.join(SIDECAR_FILE), &sidecar)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let sidecar: Sidecar = read_json(&dir.join(SIDECAR_FILE))?;
        let mut model = VaeModel::new(sidecar.config, sidecar.num_states, sidecar.num_actions, 0)?;
        let manifest = load_into(dir, &mut model.store)?;
        model.seed = manifest.seed;
        model.dataset_hash = sidecar.dataset_hash;
        Ok(model)
    }
}

impl VaeNets {
    fn posterior_logits(&self, tape: &mut Tape, store: &ParamStore, windows: &WindowBatch) -> Var {
        let h = self.encoder.encode_windows(tape, store, windows);
        self.posterior_head.forward(tape, store, h)
    }

    #[allow(clippy::too_many_arguments)]
    fn elbo_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        config: &VaeConfig,
        num_states: usize,
        batch: &ElboBatch,
        noise: &Matrix,
        temperature: f64,
    ) -> Var {
        let b = batch.len();
        let token_dim = batch.anchors.cols();

        let q_logits = self.posterior_logits(tape, store, &batch.windows);
        let q_log = tape.log_softmax(q_logits);

        // relaxed one-hot sample of z
        let g = tape.constant(noise.clone());
        let perturbed = tape.add(q_log, g);
        let scaled = tape.scale(perturbed, 1.0 / temperature);
        let z = tape.softmax(scaled);

        let n_rows = batch.rows.len();
        let items: Vec<usize> = batch.rows.iter().map(|r| r.0).collect();
        let anchors_m = {
            let mut m = Matrix::zeros(n_rows, token_dim);
            for (r, &i) in items.iter().enumerate() {
                m.row_mut(r).copy_from_slice(batch.anchors.row(i));
            }
            m
        };
        let deltas = Matrix::one_hot(&batch.rows.iter().map(|r| r.1).collect::<Vec<_>>(), config.k + 1);
        let anchors = tape.constant(anchors_m);
        let z_rows = tape.gather_rows(z, items);
        let delta_v = tape.constant(deltas);
        let dec_in = tape.concat_cols(&[anchors, z_rows, delta_v]);
        let logits = self.decoder.forward(tape, store, dec_in);
        let state_logits = tape.slice_cols(logits, 0, num_states);
        let action_logits = tape.slice_cols(logits, num_states, token_dim);
        let state_lp = tape.log_softmax(state_logits);
        let action_lp = tape.log_softmax(action_logits);
        let s_ll = tape.pick(state_lp, batch.rows.iter().map(|r| r.2).collect());
        let a_ll = tape.pick(action_lp, batch.rows.iter().map(|r| r.3).collect());
        let ll = tape.add(s_ll, a_ll);
        let ll_sum = tape.sum(ll);
        let recon = tape.scale(ll_sum, -1.0 / b as f64);

        let anchors_only = tape.constant(batch.anchors.clone());
        let f_logits = self.prior.forward(tape, store, anchors_only);
        let f_log = tape.log_softmax(f_logits);
        let q = tape.exp(q_log);
        let diff = tape.sub(q_log, f_log);
        let kl_terms = tape.mul(q, diff);
        let kl_sum = tape.sum(kl_terms);
        let kl = tape.scale(kl_sum, config.kl_coef / b as f64);
        tape.add(recon, kl)
    }
}

/// Trains a VAE on uniformly sampled `(trajectory, t)` positions of `D_u`.
/// Parameters are rounded to single precision on return.
pub fn train_vae(dataset: &UnlabeledDataset, config: &VaeConfig, num_states: usize, num_actions: usize, seed: u64) -> Result<(VaeModel, TrainLog)> {
    config.validate()?;
    let positions: Vec<(usize, usize)> = dataset
        .trajectories
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    if positions.is_empty() {
        return Err(Error::EmptyDataset(None));
    }
    let mut model = VaeModel::new(config.clone(), num_states, num_actions, seed)?;
    model.dataset_hash = dataset_hash(dataset)?;
    let mut rng = rng_from_seed(crate::seeds::derive_seed(seed, "vae-batches"));
    let adam = Adam::with_lr(config.lr);
    let mut log = TrainLog { losses: Vec::with_capacity(config.steps) };
    for step in 0..config.steps {
        let items: Vec<(&[usize], &[usize], usize)> = (0..config.batch_size)
            .map(|_| {
                let (ti, t) = positions[rng.gen_range(0..positions.len())];
                let traj = &dataset.trajectories[ti];
                (traj.states.as_slice(), traj.actions.as_slice(), t)
            })
            .collect();
        let batch = model.elbo_batch(&items)?;
        let noise = model.gumbel_noise(&batch, &mut rng);
        let temperature = config.temperature(step);
        let mut tape = Tape::new();
        let loss = model.nets.elbo_loss(&mut tape, &model.store, config, num_states, &batch, &noise, temperature);
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite { what: "ELBO loss".into(), step });
        }
        tape.backward(loss, &mut model.store);
        model.store.adam_step(&adam).map_err(|e| match e {
            Error::NonFinite { what, .. } => Error::NonFinite { what, step },
            other => other,
        })?;
        log.losses.push(value);
    }
    model.store.freeze();
    Ok((model, log))
}

/// SHA-256 of the learner view of `D_u` in its JSONL form.
pub fn dataset_hash(dataset: &UnlabeledDataset) -> Result<String> {
    let mut bytes = Vec::new();
    for t in &dataset.trajectories {
        serde_json::to_writer(&mut bytes, &t.learner_view())?;
        bytes.push(b'\n');
    }
    Ok(sha256_hex(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{collect_unlabeled, DatasetMeta};
    use crate::envs::{gambling, gambling_behavior_policy, gambling_mdp, random_mdp, RandomMdpParams, TabularPolicy};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config(k: usize) -> VaeConfig {
        VaeConfig { k, num_codes: 4, embed_dim: 6, hidden: vec![8], steps: 10, batch_size: 4, ..VaeConfig::default() }
    }

    #[test]
    fn k_zero_window_is_the_single_token() {
        let model = VaeModel::new(small_config(0), 4, 2, 1).unwrap();
        let a = model.encode_at(&[0, 1, 2], &[0, 1, 0], 1).unwrap();
        let b = model.encode_at(&[3, 1, 3], &[1, 1, 1], 1).unwrap();
        assert_eq!(a, b);
        let lone = model.encode_at(&[1], &[1], 0).unwrap();
        assert_eq!(a, lone);
    }

    #[test]
    fn posterior_depends_only_on_the_clipped_future_window() {
        let model = VaeModel::new(small_config(2), 5, 3, 2).unwrap();
        let (s1, a1) = ([0, 1, 2, 3, 4], [0, 1, 2, 0, 1]);
        let (s2, a2) = ([4, 4, 2, 3, 4], [2, 2, 2, 0, 1]);
        // positions 2.. agree, earlier ones differ
        for t in 2..5 {
            assert_eq!(model.encode_at(&s1, &a1, t).unwrap(), model.encode_at(&s2, &a2, t).unwrap());
        }
        // near the end only the clipped window matters
        let tail = model.encode_at(&s1[3..], &a1[3..], 0).unwrap();
        assert_eq!(model.encode_at(&s1, &a1, 3).unwrap(), tail);
        assert!(model.encode_at(&s1, &a1, 5).is_err());
        assert_eq!(model.encode_all(&s1, &a1).unwrap()[3], tail);
    }

    #[test]
    fn batched_decode_equals_single_calls() {
        let model = VaeModel::new(small_config(3), 4, 2, 3).unwrap();
        let all = model.decode_all(2, 1, 3);
        assert_eq!(all.len(), 4);
        for (d, step) in all.iter().enumerate() {
            let single = model.decode(2, 1, 3, d).unwrap();
            for (x, y) in single.state_probs.iter().zip(&step.state_probs) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        assert!(matches!(model.decode(2, 1, 3, 4), Err(Error::DeltaOutOfRange { delta: 4, k: 3 })));
    }

    #[test]
    fn elbo_is_mean_invariant_and_finite() {
        let model = VaeModel::new(small_config(2), 4, 2, 4).unwrap();
        let (s, a) = ([0usize, 1, 2, 3], [0usize, 1, 0, 1]);
        let one = model.elbo_batch(&[(&s, &a, 1)]).unwrap();
        let two = model.elbo_batch(&[(&s, &a, 1), (&s, &a, 1)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n1 = model.gumbel_noise(&one, &mut rng);
        let mut n2 = Matrix::zeros(2, 4);
        n2.row_mut(0).copy_from_slice(n1.row(0));
        n2.row_mut(1).copy_from_slice(n1.row(0));
        let l1 = model.elbo_loss(&one, &n1, 0.7);
        let l2 = model.elbo_loss(&two, &n2, 0.7);
        assert!(l1.is_finite());
        assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn kl_term_vanishes_when_posterior_equals_prior() {
        // zero every output layer so q and f are both uniform
        let mut cfg = small_config(1);
        cfg.kl_coef = 5.0;
        let mut model = VaeModel::new(cfg.clone(), 3, 2, 5).unwrap();
        let mut no_kl_model = model.clone();
        no_kl_model.config.kl_coef = 0.0;
        for m in [&mut model, &mut no_kl_model] {
            for mlp in [&m.nets.posterior_head, &m.nets.prior] {
                let last = mlp.layers().last().unwrap().clone();
                m.store.value_mut(last.weight).data_mut().fill(0.0);
                m.store.value_mut(last.bias).data_mut().fill(0.0);
            }
        }
        let (s, a) = ([0usize, 1, 2], [0usize, 1, 1]);
        let batch = model.elbo_batch(&[(&s, &a, 0), (&s, &a, 2)]).unwrap();
        let noise = Matrix::zeros(2, 4);
        assert!((model.elbo_loss(&batch, &noise, 1.0) - no_kl_model.elbo_loss(&batch, &noise, 1.0)).abs() < 1e-12);
    }

    #[test]
    fn elbo_gradient_matches_finite_differences() {
        let mut model = VaeModel::new(small_config(2), 4, 3, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let seqs: Vec<(Vec<usize>, Vec<usize>)> = (0..3)
            .map(|_| ((0..5).map(|_| rng.gen_range(0..4)).collect(), (0..5).map(|_| rng.gen_range(0..3)).collect()))
            .collect();
        let items: Vec<(&[usize], &[usize], usize)> =
            seqs.iter().enumerate().map(|(i, (s, a))| (s.as_slice(), a.as_slice(), i + 1)).collect();
        let batch = model.elbo_batch(&items).unwrap();
        let noise = model.gumbel_noise(&batch, &mut rng);
        let report = model.grad_check_elbo(&batch, &noise, 0.6, 1e-4);
        assert!(report.passed, "{:?}", report.worst());
    }

    #[test]
    fn prior_enumeration_and_sampling() {
        let model = VaeModel::new(small_config(1), 3, 2, 7).unwrap();
        let (codes, probs) = model.enumerate_prior(1, 0);
        assert_eq!(codes, vec![0, 1, 2, 3]);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let a = model.sample_prior(1, 0, 50, &mut ChaCha8Rng::seed_from_u64(1));
        let b = model.sample_prior(1, 0, 50, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
    }

    #[test]
    fn sampling_frequency_matches_prior_mass() {
        // force the prior to put exactly 1/4 mass on code 3
        let mut model = VaeModel::new(small_config(1), 3, 2, 8).unwrap();
        let last = model.nets.prior.layers().last().unwrap().clone();
        model.store.value_mut(last.weight).data_mut().fill(0.0);
        model.store.value_mut(last.bias).data_mut().copy_from_slice(&[0.0, 0.0, 0.0, 0.0]);
        assert!((model.prior(0, 0).probs()[3] - 0.25).abs() < 1e-12);
        let draws = model.sample_prior(0, 0, 10_000, &mut ChaCha8Rng::seed_from_u64(3));
        let freq = draws.iter().filter(|&&z| z == 3).count() as f64 / 10_000.0;
        assert!((0.235..=0.265).contains(&freq), "{freq}");
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let mdp = random_mdp(2, &RandomMdpParams { horizon: 10, ..Default::default() }).unwrap();
        let pol = TabularPolicy::uniform(mdp.num_states, mdp.num_actions);
        let ds = collect_unlabeled(&mdp, &pol, DatasetMeta::default(), 100, 1).unwrap();
        let cfg = VaeConfig { k: 3, steps: 600, batch_size: 32, ..VaeConfig::default() };
        let (m1, log) = train_vae(&ds, &cfg, mdp.num_states, mdp.num_actions, 11).unwrap();
        assert!(log.smoothed_end(100) < log.smoothed_start(100), "{} vs {}", log.smoothed_end(100), log.smoothed_start(100));
        let (m2, _) = train_vae(&ds, &cfg, mdp.num_states, mdp.num_actions, 11).unwrap();
        for id in m1.store.ids() {
            assert_eq!(m1.store.value(id), m2.store.value(id));
        }
    }

    #[test]
    fn decoder_learns_deterministic_dynamics() {
        let mut mdp = random_mdp(4, &RandomMdpParams { num_states: 4, num_actions: 2, branching: 1, horizon: 8, ..Default::default() }).unwrap();
        mdp.initial_dist = vec![0.25; 4];
        let pol = TabularPolicy::deterministic(&[0, 1, 1, 0], 2);
        let ds = collect_unlabeled(&mdp, &pol, DatasetMeta::default(), 60, 3).unwrap();
        let cfg = VaeConfig { k: 2, steps: 1500, batch_size: 32, ..VaeConfig::default() };
        let (model, _) = train_vae(&ds, &cfg, 4, 2, 5).unwrap();
        let (mut hits, mut total) = (0, 0);
        for traj in &ds.trajectories {
            for t in 0..traj.len() - 1 {
                let z = model.encode_at(&traj.states, &traj.actions, t).unwrap().mode();
                let step = model.decode(traj.states[t], traj.actions[t], z, 1).unwrap();
                hits += (crate::numcore::argmax(&step.state_probs) == traj.states[t + 1]) as usize;
                total += 1;
            }
        }
        assert!(hits as f64 >= 0.95 * total as f64, "{hits}/{total}");
    }

    #[test]
    fn gambling_posterior_separates_good_and_bad_futures() {
        use gambling::*;
        let ds = collect_unlabeled(&gambling_mdp(), &gambling_behavior_policy(), DatasetMeta::default(), 500, 1).unwrap();
        let cfg = VaeConfig { k: 2, steps: 1500, batch_size: 32, ..VaeConfig::default() };
        let (model, _) = train_vae(&ds, &cfg, NUM_STATES, NUM_ACTIONS, 3).unwrap();
        let good = model.encode_at(&[S1, S_GOOD], &[A1, A3], 0).unwrap();
        let bad = model.encode_at(&[S1, S_BAD], &[A1, A3], 0).unwrap();
        assert!(good.total_variation(&bad) > 0.5, "tv = {}", good.total_variation(&bad));
    }

    #[test]
    fn checkpoint_round_trip_preserves_the_model() {
        let ds = collect_unlabeled(&gambling_mdp(), &gambling_behavior_policy(), DatasetMeta::default(), 20, 1).unwrap();
        let (model, _) = train_vae(&ds, &small_config(2), 5, 3, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path()).unwrap();
        let loaded = VaeModel::load(dir.path()).unwrap();
        assert_eq!(loaded.dataset_hash(), model.dataset_hash());
        assert_eq!(loaded.encode_at(&[0, 1], &[0, 2], 0).unwrap(), model.encode_at(&[0, 1], &[0, 2], 0).unwrap());
        let sidecar: serde_json::Value = read_json(&dir.path().join(SIDECAR_FILE)).unwrap();
        assert_eq!(sidecar["k"], 2);
        assert_eq!(sidecar["num_codes"], 4);
    }
}
