//! Flat `section.key = value` experiment configuration.
//!
//! Every key has a default; files and `--set` overrides may only name known
//! keys. Lists are comma separated. `#` starts a comment.

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datasets::Annotator;
use crate::envs::{gambling_mdp, random_mdp, MdpSpec, PolicySpec, RandomMdpParams};
use crate::error::{Error, Result};
use crate::hindsight_vae::VaeConfig;
use crate::numcore::Activation;
use crate::preference::{LatentMode, RewardConfig};
use crate::rl::{MarginalMode, RlConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Oracle,
    Sft,
    Mr,
    MrEnsemble(usize),
    Hpl,
}

impl Method {
    pub fn uses_vae(self) -> bool {
        self == Method::Hpl
    }

    pub fn uses_reward_model(self) -> bool {
        matches!(self, Method::Mr | Method::MrEnsemble(_) | Method::Hpl)
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(Method::Oracle),
            "sft" => Ok(Method::Sft),
            "mr" => Ok(Method::Mr),
            "hpl" => Ok(Method::Hpl),
            other => match other.strip_prefix("mr-ensemble:").map(str::parse::<usize>) {
                Some(Ok(e)) if e >= 1 => Ok(Method::MrEnsemble(e)),
                _ => Err(Error::Config(format!(
                    "unknown method `{other}` (expected oracle, sft, mr, mr-ensemble:<E>, hpl)"
                ))),
            },
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Oracle => f.write_str("oracle"),
            Method::Sft => f.write_str("sft"),
            Method::Mr => f.write_str("mr"),
            Method::MrEnsemble(e) => write!(f, "mr-ensemble:{e}"),
            Method::Hpl => f.write_str("hpl"),
        }
    }
}

/// Labelling strategy for hindsight rewards.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MarginalSetting {
    /// Exact when the codebook is small enough, otherwise `n` samples.
    Auto,
    Exact,
    MonteCarlo,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvConfig {
    /// `gambling` or `random`.
    pub id: String,
    pub random: RandomMdpParams,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub behavior_policy: PolicySpec,
    /// Policy generating preference segments; `None` reuses the behaviour policy.
    pub pref_policy: Option<PolicySpec>,
    pub num_unlabeled: usize,
    pub num_pairs: usize,
    pub segment_len: usize,
    pub annotator: Annotator,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelConfig {
    pub marginal: MarginalSetting,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub episodes: usize,
    pub designated_states: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub data: DataConfig,
    pub method: Method,
    pub vae: VaeConfig,
    pub reward: RewardConfig,
    pub label: LabelConfig,
    pub rl: RlConfig,
    pub eval: EvalConfig,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            env: EnvConfig { id: "random".into(), random: RandomMdpParams::default(), seed: 0 },
            data: DataConfig {
                behavior_policy: PolicySpec::Uniform,
                pref_policy: None,
                num_unlabeled: 200,
                num_pairs: 100,
                segment_len: 10,
                annotator: Annotator::Deterministic,
            },
            method: Method::Hpl,
            vae: VaeConfig::default(),
            reward: RewardConfig::default(),
            label: LabelConfig { marginal: MarginalSetting::Auto, n: 20 },
            rl: RlConfig::default(),
            eval: EvalConfig { episodes: 100, designated_states: Vec::new() },
            seed: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Identity => "identity",
        Activation::Relu => "relu",
        Activation::Tanh => "tanh",
    }
}

impl ExperimentConfig {
    /// Sets one `section.key`; unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "env.id" => self.env.id = v.to_string(),
            "env.num_states" => self.env.random.num_states = parse(key, v)?,
            "env.num_actions" => self.env.random.num_actions = parse(key, v)?,
            "env.branching" => self.env.random.branching = parse(key, v)?,
            "env.reward_sparsity" => self.env.random.reward_sparsity = parse(key, v)?,
            "env.horizon" => self.env.random.horizon = parse(key, v)?,
            "env.seed" => self.env.seed = parse(key, v)?,

            "data.behavior_policy" => self.data.behavior_policy = v.parse()?,
            "data.pref_policy" => self.data.pref_policy = if v.is_empty() || v == "same" { None } else { Some(v.parse()?) },
            "data.num_unlabeled" => self.data.num_unlabeled = parse(key, v)?,
            "data.num_pairs" => self.data.num_pairs = parse(key, v)?,
            "data.segment_len" => self.data.segment_len = parse(key, v)?,
            "data.annotator" => self.data.annotator = v.parse()?,

            "method.name" => self.method = v.parse()?,

            "vae.k" => self.vae.k = parse(key, v)?,
            "vae.num_codes" => self.vae.num_codes = parse(key, v)?,
            "vae.kl_coef" => self.vae.kl_coef = parse(key, v)?,
            "vae.embed_dim" => self.vae.embed_dim = parse(key, v)?,
            "vae.num_layers" => self.vae.num_layers = parse(key, v)?,
            "vae.hidden" => self.vae.hidden = parse_list(key, v)?,
            "vae.lr" => self.vae.lr = parse(key, v)?,
            "vae.steps" => self.vae.steps = parse(key, v)?,
            "vae.batch_size" => self.vae.batch_size = parse(key, v)?,
            "vae.temp_start" => self.vae.temp_start = parse(key, v)?,
            "vae.temp_end" => self.vae.temp_end = parse(key, v)?,

            "reward.hidden" => self.reward.hidden = parse_list(key, v)?,
            "reward.hidden_activation" => self.reward.hidden_activation = v.parse()?,
            "reward.final_activation" => self.reward.final_activation = v.parse()?,
            "reward.lr" => self.reward.lr = parse(key, v)?,
            "reward.steps" => self.reward.steps = parse(key, v)?,
            "reward.batch_size" => self.reward.batch_size = parse(key, v)?,
            "reward.latent_mode" => self.reward.latent_mode = v.parse::<LatentMode>()?,

            "label.marginal" => {
                self.label.marginal = match v {
                    "auto" => MarginalSetting::Auto,
                    "exact" => MarginalSetting::Exact,
                    "monte-carlo" | "mc" => MarginalSetting::MonteCarlo,
                    other => return Err(Error::Config(format!("`{key}`: expected auto, exact or monte-carlo, got `{other}`"))),
                }
            }
            "label.n" => self.label.n = parse(key, v)?,

            "rl.discount" => self.rl.discount = parse(key, v)?,
            "rl.expectile" => self.rl.expectile = parse(key, v)?,
            "rl.beta_temp" => self.rl.beta_temp = parse(key, v)?,
            "rl.clip" => self.rl.clip = parse(key, v)?,
            "rl.soft_update" => self.rl.soft_update = parse(key, v)?,
            "rl.hidden" => self.rl.hidden = parse_list(key, v)?,
            "rl.lr" => self.rl.lr = parse(key, v)?,
            "rl.steps" => self.rl.steps = parse(key, v)?,
            "rl.batch_size" => self.rl.batch_size = parse(key, v)?,
            "rl.value_slack" => self.rl.value_slack = parse(key, v)?,

            "eval.episodes" => self.eval.episodes = parse(key, v)?,
            "eval.designated_states" => self.eval.designated_states = parse_list(key, v)?,

            "run.seed" => self.seed = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies a `section.key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form section.key=value")))?;
        self.set(k.trim(), v)
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `section.key = value`", i + 1)))?;
            cfg.set(k.trim(), v).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text)
    }

    /// Canonical text form; `parse_text(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("env.id", self.env.id.clone());
        put("env.num_states", self.env.random.num_states.to_string());
        put("env.num_actions", self.env.random.num_actions.to_string());
        put("env.branching", self.env.random.branching.to_string());
        put("env.reward_sparsity", self.env.random.reward_sparsity.to_string());
        put("env.horizon", self.env.random.horizon.to_string());
        put("env.seed", self.env.seed.to_string());
        put("data.behavior_policy", self.data.behavior_policy.to_string());
        put("data.pref_policy", self.data.pref_policy.as_ref().map_or("same".into(), ToString::to_string));
        put("data.num_unlabeled", self.data.num_unlabeled.to_string());
        put("data.num_pairs", self.data.num_pairs.to_string());
        put("data.segment_len", self.data.segment_len.to_string());
        put("data.annotator", self.data.annotator.to_string());
        put("method.name", self.method.to_string());
        put("vae.k", self.vae.k.to_string());
        put("vae.num_codes", self.vae.num_codes.to_string());
        put("vae.kl_coef", self.vae.kl_coef.to_string());
        put("vae.embed_dim", self.vae.embed_dim.to_string());
        put("vae.num_layers", self.vae.num_layers.to_string());
        put("vae.hidden", join(&self.vae.hidden));
        put("vae.lr", self.vae.lr.to_string());
        put("vae.steps", self.vae.steps.to_string());
        put("vae.batch_size", self.vae.batch_size.to_string());
        put("vae.temp_start", self.vae.temp_start.to_string());
        put("vae.temp_end", self.vae.temp_end.to_string());
        put("reward.hidden", join(&self.reward.hidden));
        put("reward.hidden_activation", activation_name(self.reward.hidden_activation).into());
        put("reward.final_activation", activation_name(self.reward.final_activation).into());
        put("reward.lr", self.reward.lr.to_string());
        put("reward.steps", self.reward.steps.to_string());
        put("reward.batch_size", self.reward.batch_size.to_string());
        put("reward.latent_mode", self.reward.latent_mode.to_string());
        put(
            "label.marginal",
            match self.label.marginal {
                MarginalSetting::Auto => "auto",
                MarginalSetting::Exact => "exact",
                MarginalSetting::MonteCarlo => "monte-carlo",
            }
            .into(),
        );
        put("label.n", self.label.n.to_string());
        put("rl.discount", self.rl.discount.to_string());
        put("rl.expectile", self.rl.expectile.to_string());
        put("rl.beta_temp", self.rl.beta_temp.to_string());
        put("rl.clip", self.rl.clip.to_string());
        put("rl.soft_update", self.rl.soft_update.to_string());
        put("rl.hidden", join(&self.rl.hidden));
        put("rl.lr", self.rl.lr.to_string());
        put("rl.steps", self.rl.steps.to_string());
        put("rl.batch_size", self.rl.batch_size.to_string());
        put("rl.value_slack", self.rl.value_slack.to_string());
        put("eval.episodes", self.eval.episodes.to_string());
        put("eval.designated_states", join(&self.eval.designated_states));
        put("run.seed", self.seed.to_string());
        out
    }

    /// Checks every field against its documented range.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        match self.env.id.as_str() {
            "gambling" => {}
            "random" => {
                let p = &self.env.random;
                if p.num_states < 2 || p.num_actions < 1 || p.horizon < 1 {
                    return fail("env: random MDPs need num_states >= 2, num_actions >= 1, horizon >= 1".into());
                }
                if p.branching < 1 || p.branching > p.num_states {
                    return fail("env.branching must be in 1..=num_states".into());
                }
                if !(0.0..=1.0).contains(&p.reward_sparsity) {
                    return fail("env.reward_sparsity must be in [0, 1]".into());
                }
            }
            other => return fail(format!("env.id must be `gambling` or `random`, got `{other}`")),
        }
        if self.data.num_unlabeled == 0 {
            return fail("data.num_unlabeled must be positive".into());
        }
        if self.data.num_pairs == 0 || self.data.segment_len == 0 {
            return fail("data.num_pairs and data.segment_len must be positive".into());
        }
        if let Annotator::BtNoisy { temperature } = self.data.annotator {
            if !(temperature > 0.0) {
                return fail("data.annotator temperature must be positive".into());
            }
        }
        self.vae.validate()?;
        self.reward.validate()?;
        if self.reward.steps == 0 || self.vae.steps == 0 || self.rl.steps == 0 {
            return fail("step counts must be positive".into());
        }
        if self.label.n == 0 {
            return fail("label.n must be positive".into());
        }
        self.rl.validate()?;
        if self.eval.episodes == 0 {
            return fail("eval.episodes must be positive".into());
        }
        let ns = self.num_states();
        if let Some(&s) = self.eval.designated_states.iter().find(|&&s| s >= ns) {
            return fail(format!("eval.designated_states: state {s} out of range"));
        }
        Ok(())
    }

    fn num_states(&self) -> usize {
        if self.env.id == "gambling" {
            crate::envs::gambling::NUM_STATES
        } else {
            self.env.random.num_states
        }
    }

    pub fn build_mdp(&self) -> Result<MdpSpec> {
        match self.env.id.as_str() {
            "gambling" => Ok(gambling_mdp()),
            "random" => random_mdp(self.env.seed, &self.env.random),
            other => Err(Error::Config(format!("unknown env id `{other}`"))),
        }
    }

    pub fn marginal_mode(&self) -> MarginalMode {
        match self.label.marginal {
            MarginalSetting::Auto => MarginalMode::default_for(self.vae.num_codes, self.label.n),
            MarginalSetting::Exact => MarginalMode::Exact,
            MarginalSetting::MonteCarlo => MarginalMode::MonteCarlo(self.label.n),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("method.name", "mr-ensemble:3").unwrap();
        cfg.set("data.pref_policy", "eps-greedy:0.1").unwrap();
        cfg.set("vae.hidden", "16, 8").unwrap();
        cfg.set("eval.designated_states", "0,2").unwrap();
        let back = ExperimentConfig::parse_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), cfg.to_text());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(ExperimentConfig::parse_text("vae.kk = 3").unwrap_err().is_config());
        assert!(ExperimentConfig::parse_text("vae.k = three").is_err());
        assert!(ExperimentConfig::parse_text("just words").is_err());
        let mut cfg = ExperimentConfig::default();
        assert!(cfg.apply_override("rl.discount").is_err());
        cfg.apply_override("rl.discount=0.9").unwrap();
        assert_eq!(cfg.rl.discount, 0.9);
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = ExperimentConfig::parse_text("# header\n\nvae.k = 0  # degenerate\nmethod.name = mr\n").unwrap();
        assert_eq!(cfg.vae.k, 0);
        assert_eq!(cfg.method, Method::Mr);
    }

    #[test]
    fn validation_ranges() {
        assert!(ExperimentConfig::default().validate().is_ok());
        for (k, v) in [
            ("rl.discount", "1.0"),
            ("rl.expectile", "0"),
            ("env.id", "mujoco"),
            ("data.num_pairs", "0"),
            ("vae.num_codes", "1"),
            ("reward.final_activation", "tanh"),
            ("eval.designated_states", "99"),
            ("env.reward_sparsity", "1.5"),
        ] {
            let mut cfg = ExperimentConfig::default();
            cfg.set(k, v).unwrap();
            assert!(cfg.validate().unwrap_err().is_config(), "{k} = {v}");
        }
    }

    #[test]
    fn marginal_setting() {
        let mut cfg = ExperimentConfig::default();
        assert_eq!(cfg.marginal_mode(), MarginalMode::Exact);
        cfg.set("vae.num_codes", "128").unwrap();
        assert_eq!(cfg.marginal_mode(), MarginalMode::MonteCarlo(20));
        cfg.set("label.marginal", "exact").unwrap();
        assert_eq!(cfg.marginal_mode(), MarginalMode::Exact);
    }

    #[test]
    fn method_parsing() {
        for s in ["oracle", "sft", "mr", "mr-ensemble:4", "hpl"] {
            assert_eq!(s.parse::<Method>().unwrap().to_string(), s);
        }
        assert!("mr-ensemble:0".parse::<Method>().is_err());
    }
}
