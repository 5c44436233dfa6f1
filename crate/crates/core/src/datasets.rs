//! Unlabeled trajectory datasets, fixed-length segments, scripted preference
//! annotation and JSONL persistence.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::envs::{gambling, rollout, MdpSpec, TabularPolicy, Trajectory};
use crate::error::{Error, Result};
use crate::io::{read_json, read_jsonl, write_json, write_jsonl};
use crate::numcore::sigmoid;
use crate::seeds::rng_from_seed;

/// `H` consecutive `(s, a)` steps cut from a trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewards: Option<Vec<f64>>,
    #[serde(default)]
    pub source_traj: usize,
    #[serde(default)]
    pub start_index: usize,
}

impl Segment {
    pub fn new(states: Vec<usize>, actions: Vec<usize>) -> Self {
        Segment { states, actions, rewards: None, source_traj: 0, start_index: 0 }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn oracle_return(&self) -> Result<f64> {
        self.rewards.as_ref().map(|r| r.iter().sum()).ok_or(Error::MissingOracleRewards)
    }

    pub fn learner_view(&self) -> Segment {
        Segment { rewards: None, ..self.clone() }
    }
}

/// Preference label: `0` prefers `seg0`, `1` prefers `seg1`, `0.5` is neutral.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Zero,
    Half,
    One,
}

impl Label {
    pub fn value(self) -> f64 {
        match self {
            Label::Zero => 0.0,
            Label::Half => 0.5,
            Label::One => 1.0,
        }
    }

    pub fn flipped(self) -> Label {
        match self {
            Label::Zero => Label::One,
            Label::Half => Label::Half,
            Label::One => Label::Zero,
        }
    }

    pub fn from_value(y: f64) -> Option<Label> {
        if y == 0.0 {
            Some(Label::Zero)
        } else if y == 0.5 {
            Some(Label::Half)
        } else if y == 1.0 {
            Some(Label::One)
        } else {
            None
        }
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Label::Zero => s.serialize_u64(0),
            Label::Half => s.serialize_f64(0.5),
            Label::One => s.serialize_u64(1),
        }
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let y = f64::deserialize(d)?;
        Label::from_value(y).ok_or_else(|| serde::de::Error::custom(format!("label must be 0, 0.5 or 1, got {y}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub seg0: Segment,
    pub seg1: Segment,
    pub label: Label,
}

impl PreferencePair {
    pub fn swapped(&self) -> PreferencePair {
        PreferencePair { seg0: self.seg1.clone(), seg1: self.seg0.clone(), label: self.label.flipped() }
    }

    /// The segment the label prefers, or `None` when neutral.
    pub fn preferred(&self) -> Option<&Segment> {
        match self.label {
            Label::Zero => Some(&self.seg0),
            Label::One => Some(&self.seg1),
            Label::Half => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub env_id: String,
    pub behavior_policy: String,
    pub seed: u64,
}

/// `D_u`: reward-free trajectories from some behaviour policy.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledDataset {
    pub trajectories: Vec<Trajectory>,
    pub meta: DatasetMeta,
}

impl UnlabeledDataset {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn learner_view(&self) -> UnlabeledDataset {
        UnlabeledDataset {
            trajectories: self.trajectories.iter().map(Trajectory::learner_view).collect(),
            meta: self.meta.clone(),
        }
    }

    /// The first `n` trajectories.
    pub fn truncated(&self, n: usize) -> UnlabeledDataset {
        UnlabeledDataset { trajectories: self.trajectories[..n.min(self.len())].to_vec(), meta: self.meta.clone() }
    }

    pub fn num_steps(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }
}

/// `D_p`: labelled segment pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct PreferenceDataset {
    pub pairs: Vec<PreferencePair>,
    pub meta: DatasetMeta,
}

impl PreferenceDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn segment_len(&self) -> Option<usize> {
        self.pairs.first().map(|p| p.seg0.len())
    }

    pub fn label_flipped(&self) -> PreferenceDataset {
        let pairs = self.pairs.iter().map(|p| PreferencePair { label: p.label.flipped(), ..p.clone() }).collect();
        PreferenceDataset { pairs, meta: self.meta.clone() }
    }

    pub fn truncated(&self, n: usize) -> PreferenceDataset {
        PreferenceDataset { pairs: self.pairs[..n.min(self.len())].to_vec(), meta: self.meta.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.segment_len().ok_or(Error::EmptyDataset(None))?;
        for (i, p) in self.pairs.iter().enumerate() {
            for seg in [&p.seg0, &p.seg1] {
                if seg.len() != h || seg.states.len() != seg.actions.len() {
                    return Err(Error::InvalidDimension(format!("pair {i}: every segment must have {h} steps")));
                }
            }
        }
        Ok(())
    }
}

pub fn collect_unlabeled(
    mdp: &MdpSpec,
    behavior_policy: &TabularPolicy,
    meta: DatasetMeta,
    num_traj: usize,
    seed: u64,
) -> Result<UnlabeledDataset> {
    if num_traj == 0 {
        return Err(Error::EmptyDataset(None));
    }
    let trajectories = rollout(mdp, behavior_policy, seed, num_traj);
    Ok(UnlabeledDataset { trajectories, meta: DatasetMeta { seed, ..meta } })
}

/// Uniformly random segments of length `h`: a uniformly chosen eligible
/// trajectory, then a uniform start offset.
pub fn slice_segments(trajectories: &[Trajectory], h: usize, num_segments: usize, seed: u64) -> Result<Vec<Segment>> {
    let eligible: Vec<usize> = (0..trajectories.len()).filter(|&i| h > 0 && trajectories[i].len() >= h).collect();
    if eligible.is_empty() {
        return Err(Error::NoEligibleTrajectory { segment_len: h });
    }
    let mut rng = rng_from_seed(seed);
    let segments = (0..num_segments)
        .map(|_| {
            let ti = eligible[rng.gen_range(0..eligible.len())];
            let traj = &trajectories[ti];
            let start = rng.gen_range(0..=traj.len() - h);
            Segment {
                states: traj.states[start..start + h].to_vec(),
                actions: traj.actions[start..start + h].to_vec(),
                rewards: traj.rewards.as_ref().map(|r| r[start..start + h].to_vec()),
                source_traj: ti,
                start_index: start,
            }
        })
        .collect();
    Ok(segments)
}

/// Scripted labeller working from oracle segment returns.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Annotator {
    /// Larger return wins; exact ties are neutral.
    Deterministic,
    /// `y ~ Bernoulli(sigmoid((R1 − R0) / temperature))`.
    BtNoisy { temperature: f64 },
}

impl FromStr for Annotator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "deterministic" => Ok(Annotator::Deterministic),
            Some(("bt-noisy", t)) => {
                let temperature: f64 = t.parse().map_err(|_| Error::Config(format!("bad annotator temperature `{t}`")))?;
                if temperature <= 0.0 {
                    return Err(Error::Config("annotator temperature must be positive".into()));
                }
                Ok(Annotator::BtNoisy { temperature })
            }
            _ => Err(Error::Config(format!("unknown annotator `{s}`"))),
        }
    }
}

impl fmt::Display for Annotator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Annotator::Deterministic => write!(f, "deterministic"),
            Annotator::BtNoisy { temperature } => write!(f, "bt-noisy:{temperature}"),
        }
    }
}

/// Labels each pair. Output segments have their oracle rewards removed.
pub fn annotate(pairs: Vec<(Segment, Segment)>, annotator: Annotator, seed: u64) -> Result<Vec<PreferencePair>> {
    let mut rng = rng_from_seed(seed);
    pairs
        .into_iter()
        .map(|(seg0, seg1)| {
            let (r0, r1) = (seg0.oracle_return()?, seg1.oracle_return()?);
            let label = match annotator {
                Annotator::Deterministic => {
                    if r1 > r0 {
                        Label::One
                    } else if r1 < r0 {
                        Label::Zero
                    } else {
                        Label::Half
                    }
                }
                Annotator::BtNoisy { temperature } => {
                    if rng.gen::<f64>() < sigmoid((r1 - r0) / temperature) {
                        Label::One
                    } else {
                        Label::Zero
                    }
                }
            };
            Ok(PreferencePair { seg0: seg0.learner_view(), seg1: seg1.learner_view(), label })
        })
        .collect()
}

/// Samples `num_pairs` pairs of length-`h` segments from rollouts of
/// `policy` and annotates them.
pub fn build_preference_dataset(
    mdp: &MdpSpec,
    policy: &TabularPolicy,
    meta: DatasetMeta,
    num_pairs: usize,
    h: usize,
    annotator: Annotator,
    seed: u64,
) -> Result<PreferenceDataset> {
    if num_pairs == 0 {
        return Err(Error::EmptyDataset(None));
    }
    let num_traj = (2 * num_pairs).max(16);
    let trajs = rollout(mdp, policy, crate::seeds::derive_seed(seed, "rollout"), num_traj);
    let segs = slice_segments(&trajs, h, 2 * num_pairs, crate::seeds::derive_seed(seed, "slice"))?;
    let mut it = segs.into_iter();
    let raw: Vec<_> = (0..num_pairs).map(|_| (it.next().unwrap(), it.next().unwrap())).collect();
    let pairs = annotate(raw, annotator, crate::seeds::derive_seed(seed, "annotate"))?;
    Ok(PreferenceDataset { pairs, meta: DatasetMeta { seed, ..meta } })
}

/// The four-pair gambling dataset over two-step segments.
pub fn gambling_preference_dataset() -> PreferenceDataset {
    use gambling::*;
    let seg = |mid: usize, first: usize| Segment::new(vec![S1, mid], vec![first, A3]);
    let good = seg(S_GOOD, A1);
    let bad = seg(S_BAD, A1);
    let avg = seg(S_AVG, A2);
    let pairs = vec![
        PreferencePair { seg0: good.clone(), seg1: avg.clone(), label: Label::Zero },
        PreferencePair { seg0: good.clone(), seg1: avg.clone(), label: Label::Zero },
        PreferencePair { seg0: good, seg1: bad.clone(), label: Label::Zero },
        PreferencePair { seg0: bad, seg1: avg, label: Label::One },
    ];
    PreferenceDataset {
        pairs,
        meta: DatasetMeta { env_id: "gambling".into(), behavior_policy: "scripted".into(), seed: 0 },
    }
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".meta.json");
    path.with_file_name(name)
}

/// Writes the learner view (no rewards) as JSONL plus a metadata sidecar.
pub fn save_unlabeled(path: &Path, dataset: &UnlabeledDataset) -> Result<()> {
    let view = dataset.learner_view();
    write_jsonl(path, &view.trajectories)?;
    write_json(&meta_path(path), &dataset.meta)
}

pub fn load_unlabeled(path: &Path) -> Result<UnlabeledDataset> {
    let trajectories: Vec<Trajectory> = read_jsonl(path)?;
    for (i, t) in trajectories.iter().enumerate() {
        let consistent = t.states.len() == t.actions.len()
            && t.rewards.as_ref().is_none_or(|r| r.len() == t.actions.len());
        if !consistent {
            return Err(Error::Schema {
                path: path.into(),
                line: i + 1,
                message: "states, actions and rewards must have equal lengths".into(),
            });
        }
    }
    Ok(UnlabeledDataset { trajectories, meta: load_meta(path)? })
}

pub fn save_preferences(path: &Path, dataset: &PreferenceDataset) -> Result<()> {
    let pairs: Vec<_> = dataset
        .pairs
        .iter()
        .map(|p| PreferencePair { seg0: p.seg0.learner_view(), seg1: p.seg1.learner_view(), label: p.label })
        .collect();
    write_jsonl(path, &pairs)?;
    write_json(&meta_path(path), &dataset.meta)
}

pub fn load_preferences(path: &Path) -> Result<PreferenceDataset> {
    let pairs: Vec<PreferencePair> = read_jsonl(path)?;
    let h = pairs[0].seg0.len();
    for (i, p) in pairs.iter().enumerate() {
        for seg in [&p.seg0, &p.seg1] {
            if seg.states.len() != seg.actions.len() || seg.len() != h {
                return Err(Error::Schema {
                    path: path.into(),
                    line: i + 1,
                    message: format!("segments must have equal state/action counts of {h}"),
                });
            }
        }
    }
    Ok(PreferenceDataset { pairs, meta: load_meta(path)? })
}

fn load_meta(path: &Path) -> Result<DatasetMeta> {
    let mp = meta_path(path);
    if mp.exists() {
        read_json(&mp)
    } else {
        Ok(DatasetMeta::default())
    }
}
