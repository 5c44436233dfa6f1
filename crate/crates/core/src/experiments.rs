//! Experiment recipes: the gambling credit-assignment study, the
//! distribution-shift comparison and one-axis sweeps.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, MarginalSetting, Method};
use crate::datasets::{collect_unlabeled, gambling_preference_dataset, DatasetMeta, UnlabeledDataset};
use crate::envs::gambling::{self, A1, A2, S1};
use crate::envs::{gambling_behavior_policy, gambling_mdp, MdpSpec, TabularPolicy};
use crate::error::{Error, Result};
use crate::hindsight_vae::{train_vae, VaeConfig, VaeModel};
use crate::io::{read_json, write_atomic, write_json};
use crate::pipeline::run_pipeline;
use crate::preference::{train_reward, RewardConfig, RewardDiagnostics, RewardKind, RewardModel};
use crate::rl::{iql_train, label_dataset, marginal_reward, Labeler, MarginalMode, RlConfig};
use crate::seeds::{derive_seed, derive_seed_indexed, rng_from_seed};
use crate::stats;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GamblingConfig {
    pub num_unlabeled: usize,
    pub vae: VaeConfig,
    pub reward: RewardConfig,
}

impl Default for GamblingConfig {
    fn default() -> Self {
        GamblingConfig {
            num_unlabeled: 500,
            vae: VaeConfig { k: 2, steps: 1000, batch_size: 32, temp_start: 2.0, ..VaeConfig::default() },
            reward: RewardConfig { steps: 1000, ..RewardConfig::default() },
        }
    }
}

/// One `(seed, method)` row of the gambling study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GamblingRow {
    pub seed: u64,
    pub method: String,
    pub r_s1_a1: Option<f64>,
    pub r_s1_a2: Option<f64>,
    pub train_accuracy: Option<f64>,
    pub error: Option<String>,
}

impl GamblingRow {
    fn failed(seed: u64, method: &str, e: &Error) -> Self {
        GamblingRow { seed, method: method.into(), r_s1_a1: None, r_s1_a2: None, train_accuracy: None, error: Some(e.to_string()) }
    }

    /// `r(s1, a2) > r(s1, a1)`; false for failed rows.
    pub fn prefers_safe(&self) -> bool {
        matches!((self.r_s1_a1, self.r_s1_a2), (Some(a1), Some(a2)) if a2 > a1)
    }
}

/// Seed used for run `index` of an experiment with master seed `master`.
pub fn run_seed(master: u64, index: usize) -> u64 {
    derive_seed_indexed(master, "run", index as u64)
}

/// Behaviour-policy `D_u` (learner view) of one gambling seed.
pub fn gambling_unlabeled(seed: u64, config: &GamblingConfig) -> Result<UnlabeledDataset> {
    let meta = DatasetMeta { env_id: "gambling".into(), behavior_policy: "gambling-uniform".into(), seed };
    Ok(collect_unlabeled(&gambling_mdp(), &gambling_behavior_policy(), meta, config.num_unlabeled, derive_seed(seed, "unlabeled"))?
        .learner_view())
}

/// Greedy action at `s1` of IQL trained on the seed's `D_u`, labelled by the
/// HPL reward (exact marginal) and by the true reward: `(hpl, oracle)`.
pub fn gambling_policy_choice(seed: u64, config: &GamblingConfig, rl: &RlConfig) -> Result<(usize, usize)> {
    let (ns, na) = (gambling::NUM_STATES, gambling::NUM_ACTIONS);
    let du = gambling_unlabeled(seed, config)?;
    let (model, _) = train_gambling_hpl(seed, config)?;
    let mdp = gambling_mdp();
    let choice = |labeler: Labeler<'_>, tag: &str| -> Result<usize> {
        let labeled = label_dataset(&du, labeler, derive_seed(seed, "label"))?;
        Ok(iql_train(&labeled, ns, na, rl, derive_seed(seed, tag))?.greedy_actions()[S1])
    };
    Ok((choice(Labeler::Hindsight(&model, MarginalMode::Exact), "iql-hpl")?, choice(Labeler::Oracle(&mdp), "iql-oracle")?))
}

/// HPL reward model of one gambling seed: VAE on a fresh behaviour-policy
/// `D_u`, then the hindsight reward on the four-pair dataset.
pub fn train_gambling_hpl(seed: u64, config: &GamblingConfig) -> Result<(RewardModel, RewardDiagnostics)> {
    let (ns, na) = (gambling::NUM_STATES, gambling::NUM_ACTIONS);
    let du = gambling_unlabeled(seed, config)?;
    let (vae, _) = train_vae(&du, &config.vae, ns, na, derive_seed(seed, "vae"))?;
    train_reward(&gambling_preference_dataset(), RewardKind::Hindsight, Some(Arc::new(vae)), ns, na, &config.reward, derive_seed(seed, "hpl"))
}

/// Trains MR and HPL on the four-pair dataset for one seed.
pub fn gambling_seed(seed: u64, config: &GamblingConfig) -> [GamblingRow; 2] {
    let prefs = gambling_preference_dataset();
    let (ns, na) = (gambling::NUM_STATES, gambling::NUM_ACTIONS);

    let mr = train_reward(&prefs, RewardKind::Markovian, None, ns, na, &config.reward, derive_seed(seed, "mr"))
        .and_then(|(m, d)| {
            Ok(GamblingRow {
                seed,
                method: "mr".into(),
                r_s1_a1: Some(m.reward(S1, A1)?),
                r_s1_a2: Some(m.reward(S1, A2)?),
                train_accuracy: d.train_accuracy,
                error: None,
            })
        })
        .unwrap_or_else(|e| GamblingRow::failed(seed, "mr", &e));

    let hpl = (|| -> Result<GamblingRow> {
        let (m, d) = train_gambling_hpl(seed, config)?;
        let mut rng = rng_from_seed(0);
        Ok(GamblingRow {
            seed,
            method: "hpl".into(),
            r_s1_a1: Some(marginal_reward(&m, S1, A1, MarginalMode::Exact, &mut rng)?),
            r_s1_a2: Some(marginal_reward(&m, S1, A2, MarginalMode::Exact, &mut rng)?),
            train_accuracy: d.train_accuracy,
            error: None,
        })
    })()
    .unwrap_or_else(|e| GamblingRow::failed(seed, "hpl", &e));
    [mr, hpl]
}

/// Runs the study over `num_seeds` seeds, rows ordered by seed then method.
pub fn run_gambling(master: u64, num_seeds: usize, config: &GamblingConfig) -> Vec<GamblingRow> {
    (0..num_seeds).flat_map(|i| gambling_seed(run_seed(master, i), config)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GamblingSummary {
    pub num_seeds: usize,
    pub all_accurate: bool,
    pub hpl_prefers_safe: f64,
    pub mr_prefers_risky: f64,
    pub failures: usize,
}

impl GamblingSummary {
    pub fn from_rows(rows: &[GamblingRow]) -> Self {
        let frac = |method: &str, f: &dyn Fn(&GamblingRow) -> bool| {
            let sel: Vec<&GamblingRow> = rows.iter().filter(|r| r.method == method).collect();
            if sel.is_empty() {
                0.0
            } else {
                sel.iter().filter(|r| f(r)).count() as f64 / sel.len() as f64
            }
        };
        GamblingSummary {
            num_seeds: rows.iter().filter(|r| r.method == "mr").count(),
            all_accurate: rows.iter().all(|r| r.train_accuracy == Some(1.0)),
            hpl_prefers_safe: frac("hpl", &|r| r.prefers_safe()),
            mr_prefers_risky: frac("mr", &|r| matches!((r.r_s1_a1, r.r_s1_a2), (Some(a1), Some(a2)) if a1 >= a2)),
            failures: rows.iter().filter(|r| r.error.is_some()).count(),
        }
    }

    /// Acceptance thresholds of the study.
    pub fn passes(&self) -> bool {
        self.all_accurate && self.failures == 0 && self.hpl_prefers_safe >= 0.9 && self.mr_prefers_risky >= 0.25
    }
}

/// Pairs `(log f(z*|s,a), log P_β(future | s, a))` over every full-length
/// window of `D_u`, where `z*` is the posterior mode of the realised window
/// and the future probability multiplies dynamics and behaviour-policy terms
/// over the `k` steps after `(s_t, a_t)`.
pub fn prior_calibration_points(
    vae: &VaeModel,
    mdp: &MdpSpec,
    behavior: &TabularPolicy,
    dataset: &UnlabeledDataset,
) -> Result<Vec<(f64, f64)>> {
    let k = vae.k();
    let mut out = Vec::new();
    for traj in &dataset.trajectories {
        if traj.len() <= k {
            continue;
        }
        let posteriors = vae.encode_all(&traj.states, &traj.actions)?;
        for t in 0..traj.len() - k {
            let (s, a) = (traj.states[t], traj.actions[t]);
            let z = posteriors[t].mode();
            let log_prior = vae.prior(s, a).log_probs()[z];
            let mut log_future = 0.0;
            for j in t..t + k {
                let next = traj.states[j + 1];
                log_future += mdp.transition[traj.states[j]][traj.actions[j]][next].ln();
                log_future += behavior.action_probs(next)[traj.actions[j + 1]].ln();
            }
            out.push((log_prior, log_future));
        }
    }
    Ok(out)
}

/// Spearman correlation of [`prior_calibration_points`].
pub fn prior_calibration(vae: &VaeModel, mdp: &MdpSpec, behavior: &TabularPolicy, dataset: &UnlabeledDataset) -> Result<f64> {
    let points = prior_calibration_points(vae, mdp, behavior, dataset)?;
    if points.len() < 2 {
        return Err(Error::EmptyDataset(None));
    }
    let (x, y): (Vec<f64>, Vec<f64>) = points.into_iter().unzip();
    Ok(stats::spearman(&x, &y))
}


/// Writes rows as CSV, then reads the file back and checks it parses to the
/// same rows.
pub fn write_csv_checked<T: Serialize + DeserializeOwned + PartialEq>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    write_atomic(path, &bytes)?;
    let mut reader = csv::Reader::from_path(path)?;
    let back: Vec<T> = reader.deserialize().collect::<std::result::Result<_, _>>()?;
    if back.len() != rows.len() || back.iter().zip(rows).any(|(a, b)| a != b) {
        return Err(Error::Schema { path: path.into(), line: 0, message: "CSV did not read back to the rows written".into() });
    }
    Ok(())
}

/// JSON counterpart of [`write_csv_checked`].
pub fn write_json_checked<T: Serialize + DeserializeOwned + PartialEq>(path: &Path, value: &T) -> Result<()> {
    write_json(path, value)?;
    let back: T = read_json(path)?;
    if &back != value {
        return Err(Error::Schema { path: path.into(), line: 0, message: "JSON did not read back to the value written".into() });
    }
    Ok(())
}

/// Runs the gambling study and writes `gambling.csv` and `summary.json`.
pub fn cmd_exp_gambling(master: u64, num_seeds: usize, config: &GamblingConfig, out: &Path) -> Result<GamblingSummary> {
    if num_seeds == 0 {
        return Err(Error::Config("exp-gambling needs at least one seed".into()));
    }
    let rows = run_gambling(master, num_seeds, config);
    let summary = GamblingSummary::from_rows(&rows);
    write_csv_checked(&out.join("gambling.csv"), &rows)?;
    write_json_checked(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MismatchRow {
    pub method: String,
    pub seed: u64,
    pub mean_return: Option<f64>,
    pub std_return: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub runs: usize,
    pub failures: usize,
    pub mean_return: f64,
    pub std_across_seeds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MismatchReport {
    pub pref_policy: String,
    pub unlabeled_policy: String,
    /// True when both datasets come from the same policy (no-shift control).
    pub no_shift: bool,
    pub methods: Vec<MethodSummary>,
}

impl MismatchReport {
    pub fn method(&self, name: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == name)
    }
}

/// Per-method returns of rows with the given method, failures skipped.
pub fn method_returns(rows: &[MismatchRow], method: &str) -> Vec<f64> {
    rows.iter().filter(|r| r.method == method).filter_map(|r| r.mean_return).collect()
}

/// Runs each method on the same `D_p` (from `data.pref_policy`) and `D_u`
/// (from `data.behavior_policy`) for `num_seeds` seeds. Each run lives in
/// `out/runs/seed_XXX/<method>`; `mismatch.csv` and `summary.json` are
/// written at the top level.
pub fn cmd_exp_mismatch(base: &ExperimentConfig, methods: &[Method], num_seeds: usize, out: &Path) -> Result<(Vec<MismatchRow>, MismatchReport)> {
    base.validate()?;
    if methods.is_empty() || num_seeds == 0 {
        return Err(Error::Config("exp-mismatch needs at least one method and one seed".into()));
    }
    let mut rows = Vec::with_capacity(methods.len() * num_seeds);
    for i in 0..num_seeds {
        let seed = run_seed(base.seed, i);
        for &m in methods {
            let mut cfg = base.clone();
            cfg.method = m;
            cfg.seed = seed;
            let dir = out.join("runs").join(format!("seed_{i:03}")).join(m.to_string().replace(':', "_"));
            rows.push(match run_pipeline(&cfg, &dir) {
                Ok(o) => MismatchRow {
                    method: m.to_string(),
                    seed,
                    mean_return: Some(o.eval.mean_return),
                    std_return: Some(o.eval.std_return),
                    error: None,
                },
                Err(e) => MismatchRow { method: m.to_string(), seed, mean_return: None, std_return: None, error: Some(e.to_string()) },
            });
        }
    }
    let pref = base.data.pref_policy.as_ref().unwrap_or(&base.data.behavior_policy);
    let report = MismatchReport {
        pref_policy: pref.to_string(),
        unlabeled_policy: base.data.behavior_policy.to_string(),
        no_shift: *pref == base.data.behavior_policy,
        methods: methods
            .iter()
            .map(|m| {
                let name = m.to_string();
                let returns = method_returns(&rows, &name);
                MethodSummary {
                    runs: num_seeds,
                    failures: num_seeds - returns.len(),
                    mean_return: if returns.is_empty() { f64::NAN } else { stats::mean(&returns) },
                    std_across_seeds: stats::std_dev(&returns),
                    method: name,
                }
            })
            .collect(),
    };
    write_csv_checked(&out.join("mismatch.csv"), &rows)?;
    write_json(&out.join("summary.json"), &report)?;
    Ok((rows, report))
}

/// Hyperparameter swept by [`cmd_sweep`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Future length `vae.k`.
    K,
    /// Fraction of the base `data.num_pairs`.
    PrefSize,
    /// Fraction of the base `data.num_unlabeled`.
    UnlabeledSize,
    /// Monte-carlo marginalisation samples `label.n`.
    N,
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "k" => Ok(SweepAxis::K),
            "pref_size" => Ok(SweepAxis::PrefSize),
            "unlabeled_size" => Ok(SweepAxis::UnlabeledSize),
            "N" | "n" => Ok(SweepAxis::N),
            other => Err(Error::Config(format!("unknown sweep axis `{other}` (expected k, pref_size, unlabeled_size, N)"))),
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::K => "k",
            SweepAxis::PrefSize => "pref_size",
            SweepAxis::UnlabeledSize => "unlabeled_size",
            SweepAxis::N => "N",
        })
    }
}

impl SweepAxis {
    /// Copy of `base` with this axis set to `value`.
    pub fn apply(self, base: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        let whole = |v: f64| -> Result<usize> {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Config(format!("sweep axis {self} needs whole numbers, got {v}")))
            }
        };
        let fraction = |v: f64, n: usize| -> Result<usize> {
            if v > 0.0 && v <= 1.0 {
                Ok(((n as f64 * v).round() as usize).max(1))
            } else {
                Err(Error::Config(format!("sweep axis {self} takes fractions in (0, 1], got {v}")))
            }
        };
        match self {
            SweepAxis::K => cfg.vae.k = whole(value)?,
            SweepAxis::PrefSize => cfg.data.num_pairs = fraction(value, base.data.num_pairs)?,
            SweepAxis::UnlabeledSize => cfg.data.num_unlabeled = fraction(value, base.data.num_unlabeled)?,
            SweepAxis::N => {
                cfg.label.n = whole(value)?;
                cfg.label.marginal = MarginalSetting::MonteCarlo;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One long-format sweep row; `metric` is the evaluation mean return.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: f64,
    pub seed: u64,
    pub metric: Option<f64>,
    pub error: Option<String>,
}

/// One pipeline per `(value, seed)`; failures are recorded and the sweep
/// continues. Writes `sweep.csv`.
pub fn cmd_sweep(base: &ExperimentConfig, axis: SweepAxis, values: &[f64], num_seeds: usize, out: &Path) -> Result<Vec<SweepRow>> {
    if values.is_empty() || num_seeds == 0 {
        return Err(Error::Config("sweep needs at least one value and one seed".into()));
    }
    let configs: Vec<ExperimentConfig> = values.iter().map(|&v| axis.apply(base, v)).collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(values.len() * num_seeds);
    for (&value, cfg) in values.iter().zip(&configs) {
        for i in 0..num_seeds {
            let mut run = cfg.clone();
            run.seed = run_seed(base.seed, i);
            let dir = out.join("runs").join(format!("{axis}_{value}")).join(format!("seed_{i:03}"));
            let (metric, error) = match run_pipeline(&run, &dir) {
                Ok(o) => (Some(o.eval.mean_return), None),
                Err(e) => (None, Some(e.to_string())),
            };
            rows.push(SweepRow { axis: axis.to_string(), value, seed: run.seed, metric, error });
        }
    }
    write_csv_checked(&out.join("sweep.csv"), &rows)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        for (k, v) in [
            ("env.num_states", "4"),
            ("env.horizon", "6"),
            ("data.num_unlabeled", "20"),
            ("data.num_pairs", "10"),
            ("data.segment_len", "3"),
            ("vae.steps", "10"),
            ("vae.hidden", "8"),
            ("vae.embed_dim", "8"),
            ("reward.steps", "10"),
            ("reward.hidden", "8"),
            ("rl.steps", "10"),
            ("rl.hidden", "8"),
            ("eval.episodes", "5"),
        ] {
            cfg.set(k, v).unwrap();
        }
        cfg
    }

    #[test]
    fn gambling_rows_and_csv() {
        let cfg = GamblingConfig {
            num_unlabeled: 50,
            vae: VaeConfig { k: 2, steps: 30, batch_size: 8, ..VaeConfig::default() },
            reward: RewardConfig { steps: 30, ..RewardConfig::default() },
        };
        let dir = tempfile::tempdir().unwrap();
        let summary = cmd_exp_gambling(4, 3, &cfg, dir.path()).unwrap();
        assert_eq!(summary.num_seeds, 3);
        let mut reader = csv::Reader::from_path(dir.path().join("gambling.csv")).unwrap();
        let headers: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
        assert_eq!(headers, ["seed", "method", "r_s1_a1", "r_s1_a2", "train_accuracy", "error"]);
        assert_eq!(reader.records().count(), 6);
        assert!(cmd_exp_gambling(4, 0, &cfg, dir.path()).is_err());
    }

    #[test]
    fn summary_thresholds() {
        let row = |method: &str, a1: f64, a2: f64| GamblingRow {
            seed: 0,
            method: method.into(),
            r_s1_a1: Some(a1),
            r_s1_a2: Some(a2),
            train_accuracy: Some(1.0),
            error: None,
        };
        let rows = vec![row("mr", 1.0, 0.0), row("hpl", 0.0, 1.0), row("mr", 0.0, 1.0), row("hpl", 0.0, 1.0)];
        let s = GamblingSummary::from_rows(&rows);
        assert_eq!((s.num_seeds, s.hpl_prefers_safe, s.mr_prefers_risky), (2, 1.0, 0.5));
        assert!(s.passes());
        let mut bad = rows.clone();
        bad[1].train_accuracy = Some(0.75);
        assert!(!GamblingSummary::from_rows(&bad).passes());
    }

    #[test]
    fn mismatch_rows_cover_every_method_and_seed() {
        let mut cfg = quick();
        cfg.set("data.pref_policy", "optimal").unwrap();
        let methods: Vec<Method> = ["oracle", "sft", "mr", "hpl"].iter().map(|m| m.parse().unwrap()).collect();
        let dir = tempfile::tempdir().unwrap();
        let (rows, report) = cmd_exp_mismatch(&cfg, &methods, 2, dir.path()).unwrap();
        assert_eq!(rows.len(), 8);
        assert!(rows.iter().all(|r| r.mean_return.is_some()));
        assert!(!report.no_shift);
        assert_eq!(report.methods.len(), 4);

        let (_, control) = cmd_exp_mismatch(&quick(), &methods[..1], 1, dir.path()).unwrap();
        assert!(control.no_shift);
    }

    #[test]
    fn sweep_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick();
        cfg.method = Method::Mr;
        let rows = cmd_sweep(&cfg, SweepAxis::PrefSize, &[0.5], 3, dir.path()).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r.axis == "pref_size" && r.metric.is_some()));

        let fractions = [0.1, 0.25, 0.5, 0.75, 1.0];
        let sizes: Vec<usize> = fractions
            .iter()
            .map(|&f| SweepAxis::UnlabeledSize.apply(&ExperimentConfig::default(), f).unwrap().data.num_unlabeled)
            .collect();
        assert_eq!(sizes, [20, 50, 100, 150, 200]);
        assert_eq!(SweepAxis::K.apply(&cfg, 0.0).unwrap().vae.k, 0);
        assert!(SweepAxis::K.apply(&cfg, 1.5).is_err());
        assert!(SweepAxis::UnlabeledSize.apply(&cfg, 2.0).is_err());
        let n = SweepAxis::N.apply(&cfg, 7.0).unwrap();
        assert_eq!(n.marginal_mode(), crate::rl::MarginalMode::MonteCarlo(7));
        assert_eq!("unlabeled_size".parse::<SweepAxis>().unwrap(), SweepAxis::UnlabeledSize);
    }

    #[test]
    fn sweep_isolates_failing_runs() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick();
        cfg.method = Method::Mr;
        // segments longer than any episode make data generation fail
        cfg.data.segment_len = 10;
        let rows = cmd_sweep(&cfg, SweepAxis::PrefSize, &[1.0], 2, dir.path()).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.metric.is_none() && r.error.as_deref().unwrap().contains("gen-data")));
    }
}
