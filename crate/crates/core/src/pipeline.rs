//! The end-to-end run: generate data, train the VAE, learn rewards, label
//! `D_u`, train the policy and evaluate it.
//!
//! Every stage reads its inputs from and writes its outputs to one run
//! directory, so stages can also be invoked one at a time.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Method};
use crate::datasets::{
    build_preference_dataset, collect_unlabeled, load_preferences, load_unlabeled, save_preferences, save_unlabeled,
    DatasetMeta,
};
use crate::envs::MdpSpec;
use crate::error::{Error, Result};
use crate::hindsight_vae::{train_vae, VaeModel};
use crate::io::{hash_path, read_json, write_atomic, write_json};
use crate::preference::{train_reward, train_reward_ensemble, RewardDiagnostics, RewardKind, RewardModel};
use crate::rl::{evaluate, iql_train, label_dataset, sft_train, EvalStats, LabeledDataset, Labeler, PolicyArtifacts};
use crate::seeds::derive_seed;

pub const CONFIG_FILE: &str = "config.txt";
pub const MDP_FILE: &str = "mdp.json";
pub const UNLABELED_FILE: &str = "unlabeled.jsonl";
pub const PREFERENCES_FILE: &str = "preferences.jsonl";
pub const VAE_DIR: &str = "vae";
pub const REWARD_DIR: &str = "reward";
pub const LABELED_FILE: &str = "labeled.jsonl";
pub const POLICY_DIR: &str = "policy";
pub const EVAL_FILE: &str = "eval.json";
pub const MANIFEST_FILE: &str = "manifest.json";

pub const STAGES: [&str; 6] = ["gen-data", "train-vae", "train-reward", "label", "train-rl", "eval"];

/// Per-stage seeds derived from the master seed.
pub fn seed_tree(master: u64) -> BTreeMap<String, u64> {
    let mut tree = BTreeMap::new();
    for stage in STAGES {
        tree.insert(stage.to_string(), derive_seed(master, stage));
    }
    let data = tree["gen-data"];
    tree.insert("gen-data/unlabeled".into(), derive_seed(data, "unlabeled"));
    tree.insert("gen-data/preferences".into(), derive_seed(data, "preferences"));
    tree
}

fn stage_seed(cfg: &ExperimentConfig, stage: &str) -> u64 {
    seed_tree(cfg.seed)[stage]
}

fn reward_member_dir(out: &Path, index: usize) -> PathBuf {
    out.join(REWARD_DIR).join(format!("member_{index:02}"))
}

pub fn load_mdp(out: &Path) -> Result<MdpSpec> {
    let mdp: MdpSpec = read_json(&out.join(MDP_FILE))?;
    mdp.validate()?;
    Ok(mdp)
}

/// Writes the MDP, `D_u` (learner view) and `D_p`.
pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_atomic(&out.join(CONFIG_FILE), cfg.to_text().as_bytes())?;
    let mdp = cfg.build_mdp()?;
    write_json(&out.join(MDP_FILE), &mdp)?;
    let tree = seed_tree(cfg.seed);
    let behavior = cfg.data.behavior_policy.resolve(&mdp, cfg.rl.discount)?;
    let meta = DatasetMeta { env_id: cfg.env.id.clone(), behavior_policy: cfg.data.behavior_policy.to_string(), seed: 0 };
    let du = collect_unlabeled(&mdp, &behavior, meta, cfg.data.num_unlabeled, tree["gen-data/unlabeled"])?;
    save_unlabeled(&out.join(UNLABELED_FILE), &du)?;

    let pref_spec = cfg.data.pref_policy.as_ref().unwrap_or(&cfg.data.behavior_policy);
    let pref_policy = pref_spec.resolve(&mdp, cfg.rl.discount)?;
    let meta = DatasetMeta { env_id: cfg.env.id.clone(), behavior_policy: pref_spec.to_string(), seed: 0 };
    let dp = build_preference_dataset(
        &mdp,
        &pref_policy,
        meta,
        cfg.data.num_pairs,
        cfg.data.segment_len,
        cfg.data.annotator,
        tree["gen-data/preferences"],
    )?;
    save_preferences(&out.join(PREFERENCES_FILE), &dp)
}

/// Trains the VAE on `D_u`; only HPL needs it.
pub fn train_vae_stage(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let mdp = load_mdp(out)?;
    let du = load_unlabeled(&out.join(UNLABELED_FILE))?;
    let (vae, log) = train_vae(&du, &cfg.vae, mdp.num_states, mdp.num_actions, stage_seed(cfg, "train-vae"))?;
    let dir = out.join(VAE_DIR);
    vae.save(&dir)?;
    write_json(&dir.join("train_log.json"), &log)
}

fn load_vae(out: &Path) -> Result<Arc<VaeModel>> {
    Ok(Arc::new(VaeModel::load(&out.join(VAE_DIR))?))
}

/// Learns the reward model(s) of the configured method.
pub fn train_reward_stage(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<RewardDiagnostics>> {
    let mdp = load_mdp(out)?;
    let dp = load_preferences(&out.join(PREFERENCES_FILE))?;
    let seed = stage_seed(cfg, "train-reward");
    let (ns, na) = (mdp.num_states, mdp.num_actions);
    let trained: Vec<(RewardModel, RewardDiagnostics)> = match cfg.method {
        Method::Mr => vec![train_reward(&dp, RewardKind::Markovian, None, ns, na, &cfg.reward, seed)?],
        Method::MrEnsemble(e) => train_reward_ensemble(&dp, e, ns, na, &cfg.reward, seed)?,
        Method::Hpl => vec![train_reward(&dp, RewardKind::Hindsight, Some(load_vae(out)?), ns, na, &cfg.reward, seed)?],
        Method::Oracle | Method::Sft => {
            return Err(Error::ModeMismatch(format!("method {} learns no reward model", cfg.method)))
        }
    };
    let mut diags = Vec::with_capacity(trained.len());
    for (i, (model, diag)) in trained.into_iter().enumerate() {
        let dir = reward_member_dir(out, i);
        model.save(&dir)?;
        write_json(&dir.join("diagnostics.json"), &diag)?;
        diags.push(diag);
    }
    Ok(diags)
}

fn load_rewards(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<RewardModel>> {
    let vae = if cfg.method.uses_vae() { Some(load_vae(out)?) } else { None };
    let count = match cfg.method {
        Method::MrEnsemble(e) => e,
        _ => 1,
    };
    (0..count).map(|i| RewardModel::load(&reward_member_dir(out, i), vae.clone())).collect()
}

/// Labels `D_u` with oracle, markovian or marginalised hindsight rewards.
pub fn label_stage(cfg: &ExperimentConfig, out: &Path) -> Result<LabeledDataset> {
    let mdp = load_mdp(out)?;
    let du = load_unlabeled(&out.join(UNLABELED_FILE))?;
    let seed = stage_seed(cfg, "label");
    let labeled = match cfg.method {
        Method::Oracle => label_dataset(&du, Labeler::Oracle(&mdp), seed)?,
        Method::Mr | Method::MrEnsemble(_) => {
            let models = load_rewards(cfg, out)?;
            label_dataset(&du, Labeler::Markovian(&models), seed)?
        }
        Method::Hpl => {
            let models = load_rewards(cfg, out)?;
            label_dataset(&du, Labeler::Hindsight(&models[0], cfg.marginal_mode()), seed)?
        }
        Method::Sft => return Err(Error::ModeMismatch("sft trains on preferences, not labelled transitions".into())),
    };
    labeled.save(&out.join(LABELED_FILE))?;
    Ok(labeled)
}

/// IQL on the labelled data, or behaviour cloning for SFT.
pub fn train_rl_stage(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let mdp = load_mdp(out)?;
    let seed = stage_seed(cfg, "train-rl");
    let artifacts = if cfg.method == Method::Sft {
        let dp = load_preferences(&out.join(PREFERENCES_FILE))?;
        sft_train(&dp, mdp.num_states, mdp.num_actions, &cfg.rl, seed)?
    } else {
        let labeled = LabeledDataset::load(&out.join(LABELED_FILE))?;
        iql_train(&labeled, mdp.num_states, mdp.num_actions, &cfg.rl, seed)?
    };
    artifacts.save(&out.join(POLICY_DIR))
}

/// Evaluates the greedy policy with true rewards.
pub fn eval_stage(cfg: &ExperimentConfig, out: &Path) -> Result<EvalStats> {
    let mdp = load_mdp(out)?;
    let artifacts = PolicyArtifacts::load(&out.join(POLICY_DIR))?;
    let stats = evaluate(&artifacts.greedy_policy(), &mdp, cfg.eval.episodes, stage_seed(cfg, "eval"), &cfg.eval.designated_states)?;
    write_json(&out.join(EVAL_FILE), &stats)?;
    Ok(stats)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: String,
    pub seed: u64,
    pub seeds: BTreeMap<String, u64>,
    pub stages: Vec<String>,
    pub failed_stage: Option<String>,
    /// SHA-256 of every artifact, keyed by path relative to the run directory.
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub eval: EvalStats,
    pub reward_diagnostics: Vec<RewardDiagnostics>,
    pub manifest: RunManifest,
}

/// Stages the method runs, in order.
pub fn stages_for(method: Method) -> Vec<&'static str> {
    STAGES
        .iter()
        .copied()
        .filter(|s| match *s {
            "train-vae" => method.uses_vae(),
            "train-reward" => method.uses_reward_model(),
            "label" => method != Method::Sft,
            _ => true,
        })
        .collect()
}

fn artifact_hashes(out: &Path) -> Result<BTreeMap<String, String>> {
    let mut entries: Vec<PathBuf> = fs::read_dir(out)
        .map_err(|e| Error::io(out, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(out, e)))
        .collect::<Result<_>>()?;
    entries.sort();
    let mut hashes = BTreeMap::new();
    for p in entries {
        let name = p.file_name().expect("directory entries have names").to_string_lossy().into_owned();
        if name == MANIFEST_FILE || name.ends_with(".tmp") {
            continue;
        }
        hashes.insert(name, hash_path(&p)?);
    }
    Ok(hashes)
}

fn write_manifest(cfg: &ExperimentConfig, out: &Path, stages: &[&str], failed: Option<&str>) -> Result<RunManifest> {
    let manifest = RunManifest {
        config: cfg.to_text(),
        seed: cfg.seed,
        seeds: seed_tree(cfg.seed),
        stages: stages.iter().map(|s| s.to_string()).collect(),
        failed_stage: failed.map(str::to_string),
        artifacts: if out.exists() { artifact_hashes(out)? } else { BTreeMap::new() },
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Runs every stage of the configured method into `out`. A failing stage
/// aborts the run; artifacts written so far and a manifest naming the
/// failed stage are kept.
pub fn run_pipeline(cfg: &ExperimentConfig, out: &Path) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let stages = stages_for(cfg.method);
    let mut diags = Vec::new();
    let mut eval = None;
    for &stage in &stages {
        let result = match stage {
            "gen-data" => gen_data(cfg, out),
            "train-vae" => train_vae_stage(cfg, out),
            "train-reward" => train_reward_stage(cfg, out).map(|d| diags = d),
            "label" => label_stage(cfg, out).map(|_| ()),
            "train-rl" => train_rl_stage(cfg, out),
            "eval" => eval_stage(cfg, out).map(|s| eval = Some(s)),
            _ => unreachable!("stage list is fixed"),
        };
        if let Err(e) = result {
            // best effort: the stage error is what the caller needs to see
            let _ = write_manifest(cfg, out, &stages, Some(stage));
            return Err(e.in_stage(stage));
        }
    }
    let manifest = write_manifest(cfg, out, &stages, None)?;
    Ok(PipelineOutcome { eval: eval.expect("eval stage always runs"), reward_diagnostics: diags, manifest })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(method: &str) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        for (k, v) in [
            ("method.name", method),
            ("env.num_states", "4"),
            ("env.horizon", "6"),
            ("data.num_unlabeled", "20"),
            ("data.num_pairs", "10"),
            ("data.segment_len", "3"),
            ("vae.steps", "20"),
            ("vae.k", "2"),
            ("vae.hidden", "8"),
            ("vae.embed_dim", "8"),
            ("reward.steps", "20"),
            ("reward.hidden", "8"),
            ("rl.steps", "20"),
            ("rl.hidden", "8"),
            ("eval.episodes", "5"),
        ] {
            cfg.set(k, v).unwrap();
        }
        cfg
    }

    #[test]
    fn every_method_runs_end_to_end() {
        for m in ["oracle", "sft", "mr", "mr-ensemble:2", "hpl"] {
            let dir = tempfile::tempdir().unwrap();
            let out = run_pipeline(&quick(m), dir.path()).unwrap();
            assert!(out.manifest.artifacts.contains_key(EVAL_FILE));
            assert_eq!(dir.path().join(VAE_DIR).exists(), m == "hpl");
            assert_eq!(dir.path().join(REWARD_DIR).exists(), !matches!(m, "oracle" | "sft"));
            assert_eq!(dir.path().join(LABELED_FILE).exists(), m != "sft");
        }
    }

    #[test]
    fn oracle_skips_learning_stages() {
        assert_eq!(stages_for(Method::Oracle), vec!["gen-data", "label", "train-rl", "eval"]);
        assert_eq!(stages_for(Method::Sft), vec!["gen-data", "train-rl", "eval"]);
        assert_eq!(stages_for(Method::Hpl).len(), 6);
    }

    #[test]
    fn reruns_reproduce_every_hash() {
        let cfg = quick("hpl");
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ma = run_pipeline(&cfg, a.path()).unwrap().manifest;
        let mb = run_pipeline(&cfg, b.path()).unwrap().manifest;
        assert_eq!(ma, mb);
        let mut other = cfg.clone();
        other.seed = 1;
        let c = tempfile::tempdir().unwrap();
        assert_ne!(run_pipeline(&other, c.path()).unwrap().manifest.artifacts, ma.artifacts);
    }

    #[test]
    fn failures_name_the_stage_and_keep_partial_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        gen_data(&quick("mr"), dir.path()).unwrap();
        // corrupt the preference file so reward learning fails
        std::fs::write(dir.path().join(PREFERENCES_FILE), "{not json}\n").unwrap();
        let mut cfg = quick("mr");
        cfg.data.num_pairs = 10;
        let err = train_reward_stage(&cfg, dir.path()).unwrap_err();
        assert!(matches!(err, Error::Schema { line: 1, .. }));

        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick("hpl");
        cfg.data.segment_len = 50;
        let err = run_pipeline(&cfg, dir.path()).unwrap_err();
        assert!(matches!(err, Error::Stage { stage: "gen-data", .. }), "{err}");
        let manifest: RunManifest = read_json(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(manifest.failed_stage.as_deref(), Some("gen-data"));
        assert!(manifest.artifacts.contains_key(UNLABELED_FILE));
    }

    #[test]
    fn individual_stages_match_the_pipeline() {
        let cfg = quick("mr");
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let full = run_pipeline(&cfg, a.path()).unwrap();
        gen_data(&cfg, b.path()).unwrap();
        train_reward_stage(&cfg, b.path()).unwrap();
        label_stage(&cfg, b.path()).unwrap();
        train_rl_stage(&cfg, b.path()).unwrap();
        let stats = eval_stage(&cfg, b.path()).unwrap();
        assert_eq!(stats, full.eval);
    }
}
