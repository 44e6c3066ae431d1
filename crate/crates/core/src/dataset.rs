//! Offline datasets: rollout generation under a behavior policy, N-step
//! return annotation, and JSON-lines (de)serialization.
//!
//! File format: an optional header line `{"schema_version":1,...}` followed
//! by one JSON object per [`Transition`]. A file ending in `.gz` is gzip
//! compressed. An empty dataset is written as an empty file.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::QAgent;
use crate::env::{user_type_of, Action, FeedEnv, UserType};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};

pub const SCHEMA_VERSION: u32 = 1;

/// One logged screen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub entrance_id: String,
    pub episode_id: u64,
    pub t: usize,
    pub state_feat: Vec<f64>,
    pub action_index: usize,
    pub r: f64,
    pub r_ad: f64,
    pub r_fee: f64,
    #[serde(rename = "r_N")]
    pub r_n: f64,
    /// `None` marks a terminal transition.
    pub next_state_feat: Option<Vec<f64>>,
    /// Similarity weight; `None` until annotated.
    pub w: Option<f64>,
}

impl Transition {
    pub fn is_terminal(&self) -> bool {
        self.next_state_feat.is_none()
    }

    pub fn user_type(&self) -> UserType {
        user_type_of(&self.state_feat)
    }
}

/// Parameters the N-step returns were computed with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NsrAnnotation {
    pub horizon: usize,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    #[serde(default)]
    nsr: Option<NsrAnnotation>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub transitions: Vec<Transition>,
    pub nsr: Option<NsrAnnotation>,
}

/// Policy used to roll out logged episodes.
#[derive(Debug, Clone, Copy)]
pub enum BehaviorPolicy<'a> {
    Uniform,
    EpsilonGreedy { agent: &'a QAgent, epsilon: f64 },
}

impl Dataset {
    pub fn new(transitions: Vec<Transition>) -> Self {
        Self { transitions, nsr: None }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Transition> {
        self.transitions.iter()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.transitions.first().map(|t| t.state_feat.len())
    }

    pub fn n_episodes(&self) -> usize {
        episode_ranges(&self.transitions).len()
    }

    /// Concatenates two datasets; the NSR annotation survives only if both agree.
    pub fn merge(mut self, other: Dataset) -> Dataset {
        let nsr = if self.nsr == other.nsr { self.nsr } else { None };
        self.transitions.extend(other.transitions);
        self.nsr = nsr;
        self
    }

    /// SHA-256 of the canonical JSON-lines encoding.
    pub fn content_hash(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory cannot fail");
        Sha256::digest(&buf).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        if self.transitions.is_empty() {
            return Ok(());
        }
        let header = Header { schema_version: SCHEMA_VERSION, nsr: self.nsr };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for t in &self.transitions {
            serde_json::to_writer(&mut out, t)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(input: R) -> Result<Self> {
        let mut ds = Dataset::default();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            let line_no = i + 1;
            if line_no == 1 {
                let header: Header = serde_json::from_str(&line)
                    .map_err(|e| Error::Parse { line: line_no, message: format!("bad header: {e}") })?;
                if header.schema_version != SCHEMA_VERSION {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("unsupported schema_version {}", header.schema_version),
                    });
                }
                ds.nsr = header.nsr;
                continue;
            }
            let t: Transition =
                serde_json::from_str(&line).map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?;
            ds.transitions.push(t);
        }
        Ok(ds)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path)?;
        if is_gzip(path) {
            let mut enc = GzEncoder::new(BufWriter::new(file), Compression::default());
            self.write_to(&mut enc)?;
            enc.finish()?.flush()?;
        } else {
            let mut w = BufWriter::new(file);
            self.write_to(&mut w)?;
            w.flush()?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path)?;
        let reader: Box<dyn Read> = if is_gzip(path) { Box::new(GzDecoder::new(file)) } else { Box::new(file) };
        Self::read_from(BufReader::new(reader))
    }
}

fn is_gzip(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

/// Index ranges of contiguous runs sharing `(entrance_id, episode_id)`.
pub fn episode_ranges(ts: &[Transition]) -> Vec<std::ops::Range<usize>> {
    let mut ranges = Vec::new();
    let mut start = 0;
    for i in 1..=ts.len() {
        let boundary = i == ts.len()
            || ts[i].episode_id != ts[start].episode_id
            || ts[i].entrance_id != ts[start].entrance_id;
        if boundary && start < ts.len() {
            ranges.push(start..i);
            start = i;
        }
    }
    ranges
}

/// Rolls out `n_requests` episodes. Episode `i` draws from its own stream
/// derived from `(seed, i)`, so the result does not depend on thread count.
pub fn generate(env: &FeedEnv, policy: BehaviorPolicy<'_>, n_requests: usize, seed: u64) -> Result<Dataset> {
    if n_requests == 0 {
        return Err(Error::Usage("n_requests must be at least 1".into()));
    }
    if let BehaviorPolicy::EpsilonGreedy { agent, epsilon } = policy {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::Usage(format!("epsilon {epsilon} outside [0,1]")));
        }
        if agent.n_actions() != env.n_actions() {
            return Err(Error::Usage("behavior agent action count does not match profile".into()));
        }
    }
    let episodes = (0..n_requests as u64)
        .into_par_iter()
        .map(|ep| rollout(env, policy, ep, derive_seed(seed, ep)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::new(episodes.into_iter().flatten().collect()))
}

fn rollout(env: &FeedEnv, policy: BehaviorPolicy<'_>, episode_id: u64, seed: u64) -> Result<Vec<Transition>> {
    let mut rng = rng_from_seed(seed);
    let mut state = env.reset(&mut rng);
    let mut feat = env.featurize(&state);
    let mut out = Vec::new();
    loop {
        let action = match policy {
            BehaviorPolicy::Uniform => Action::from_index(rng.gen_range(0..env.n_actions()), env.k())?,
            BehaviorPolicy::EpsilonGreedy { agent, epsilon } => agent.act(&feat, epsilon, &mut rng),
        };
        let step = env.step(&state, action, &mut rng)?;
        let next_feat = (!step.is_terminal()).then(|| env.featurize(&step.next_state));
        out.push(Transition {
            entrance_id: env.profile().entrance_id.clone(),
            episode_id,
            t: state.screen_idx,
            state_feat: feat,
            action_index: action.index(),
            r: step.r,
            r_ad: step.r_ad,
            r_fee: step.r_fee,
            r_n: 0.0,
            next_state_feat: next_feat.clone(),
            w: None,
        });
        match next_feat {
            Some(f) => {
                feat = f;
                state = step.next_state;
            }
            None => break,
        }
    }
    Ok(out)
}

/// Sets `r_N = sum_{i < min(N, remaining)} gamma^i r_{t+i}` on every
/// transition, truncating at episode end.
pub fn annotate_nsr(mut dataset: Dataset, horizon: usize, gamma: f64) -> Result<Dataset> {
    if horizon == 0 {
        return Err(Error::Usage("NSR horizon must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Usage(format!("gamma {gamma} outside [0,1]")));
    }
    for range in episode_ranges(&dataset.transitions) {
        let rewards: Vec<f64> = dataset.transitions[range.clone()].iter().map(|t| t.r).collect();
        for (offset, t) in dataset.transitions[range].iter_mut().enumerate() {
            let end = (offset + horizon).min(rewards.len());
            t.r_n = rewards[offset..end]
                .iter()
                .enumerate()
                .fold(0.0, |acc, (i, r)| acc + gamma.powi(i as i32) * r);
        }
    }
    dataset.nsr = Some(NsrAnnotation { horizon, gamma });
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Deltas, EntranceProfile, RewardMode, ValueDist};

    fn profile(t_max: usize) -> EntranceProfile {
        EntranceProfile {
            entrance_id: "t".into(),
            k: 3,
            t_max,
            n_ad_cand: 3 * t_max,
            n_org_cand: 3 * t_max,
            ad_value_dist: ValueDist { mean: 1.0, spread: 0.5 },
            org_value_dist: ValueDist { mean: 1.0, spread: 0.5 },
            click_base: 0.4,
            buy_base: 0.3,
            fatigue: 0.05,
            depth_decay: 0.02,
            divergent_user_frac: 0.3,
            deltas: Deltas::default(),
        }
    }

    fn manual(episode: u64, rewards: &[f64]) -> Vec<Transition> {
        rewards
            .iter()
            .enumerate()
            .map(|(t, &r)| Transition {
                entrance_id: "m".into(),
                episode_id: episode,
                t,
                state_feat: vec![t as f64],
                action_index: 0,
                r,
                r_ad: r,
                r_fee: 0.0,
                r_n: 0.0,
                next_state_feat: (t + 1 < rewards.len()).then(|| vec![t as f64 + 1.0]),
                w: None,
            })
            .collect()
    }

    #[test]
    fn single_screen_request_gives_one_transition() {
        let env = FeedEnv::new(profile(1), RewardMode::Stochastic).unwrap();
        let ds = generate(&env, BehaviorPolicy::Uniform, 1, 5).unwrap();
        assert_eq!(ds.len(), 1);
        assert!(ds.transitions[0].is_terminal());
    }

    #[test]
    fn zero_requests_rejected() {
        let env = FeedEnv::new(profile(1), RewardMode::Stochastic).unwrap();
        assert!(matches!(generate(&env, BehaviorPolicy::Uniform, 0, 5), Err(Error::Usage(_))));
    }

    #[test]
    fn uniform_policy_covers_actions_evenly() {
        let env = FeedEnv::new(profile(1), RewardMode::Stochastic).unwrap();
        let n = 16_000;
        let ds = generate(&env, BehaviorPolicy::Uniform, n, 17).unwrap();
        let mut counts = [0usize; 8];
        for t in ds.iter() {
            counts[t.action_index] += 1;
        }
        let p = 1.0 / 8.0;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn generation_is_byte_identical_per_seed() {
        let env = FeedEnv::new(profile(5), RewardMode::Stochastic).unwrap();
        let a = generate(&env, BehaviorPolicy::Uniform, 50, 3).unwrap();
        let b = generate(&env, BehaviorPolicy::Uniform, 50, 3).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        let c = generate(&env, BehaviorPolicy::Uniform, 50, 4).unwrap();
        assert_ne!(a.content_hash(), c.content_hash());
        assert!(a.iter().all(|t| t.r == t.r_ad + t.r_fee));
    }

    #[test]
    fn nsr_single_step_equals_reward() {
        let ds = Dataset::new([manual(0, &[1.0, 2.0, 3.0]), manual(1, &[4.0])].concat());
        let ds = annotate_nsr(ds, 1, 0.9).unwrap();
        assert!(ds.iter().all(|t| t.r_n == t.r));
    }

    #[test]
    fn nsr_hand_values() {
        let ds = annotate_nsr(Dataset::new(manual(0, &[1.0, 2.0, 4.0])), 3, 0.5).unwrap();
        assert_eq!(ds.transitions[0].r_n, 3.0);
        assert_eq!(ds.transitions[1].r_n, 4.0);
        assert_eq!(ds.transitions[2].r_n, 4.0);

        let ds = annotate_nsr(Dataset::new(manual(0, &[1.5, 2.25])), 5, 1.0).unwrap();
        assert_eq!(ds.transitions[0].r_n, 1.5 + 2.25);
    }

    #[test]
    fn nsr_is_idempotent() {
        let env = FeedEnv::new(profile(5), RewardMode::Stochastic).unwrap();
        let ds = generate(&env, BehaviorPolicy::Uniform, 30, 8).unwrap();
        let once = annotate_nsr(ds, 3, 0.9).unwrap();
        let twice = annotate_nsr(once.clone(), 3, 0.9).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn nsr_rejects_bad_arguments() {
        assert!(annotate_nsr(Dataset::default(), 0, 0.9).is_err());
        assert!(annotate_nsr(Dataset::default(), 2, 1.5).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let env = FeedEnv::new(profile(4), RewardMode::Stochastic).unwrap();
        let ds = annotate_nsr(generate(&env, BehaviorPolicy::Uniform, 20, 1).unwrap(), 2, 0.9).unwrap();
        for name in ["d.jsonl", "d.jsonl.gz"] {
            let path = dir.path().join(name);
            ds.save(&path).unwrap();
            assert_eq!(Dataset::load(&path).unwrap(), ds);
        }
    }

    #[test]
    fn empty_dataset_is_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.jsonl");
        Dataset::default().save(&path).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 0);
        assert!(Dataset::load(&path).unwrap().is_empty());
    }

    #[test]
    fn truncated_line_reports_line_number() {
        let mut buf = Vec::new();
        Dataset::new(manual(0, &[1.0, 2.0, 3.0])).write_to(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let cut = &text[..text.len() - 20];
        let err = Dataset::read_from(cut.as_bytes()).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn episode_ranges_split_on_episode_change() {
        let ts = [manual(0, &[1.0, 1.0]), manual(1, &[1.0]), manual(2, &[1.0, 1.0, 1.0])].concat();
        let r = episode_ranges(&ts);
        assert_eq!(r, vec![0..2, 2..3, 3..6]);
    }
}
