//! Synthetic feed environment for ads allocation.
//!
//! Each request is an episode. On every screen the agent picks, for each of
//! the `K` slots, whether to show the head of the ad queue or the head of the
//! organic queue. Displayed ads earn `value * p_click`, displayed organic
//! items earn `value * p_buy`, and the user keeps scrolling with a probability
//! that falls with the number of ads shown and the screen depth.
//!
//! A profile carries a fraction of "divergent" users whose click, purchase
//! and fatigue parameters are shifted by `deltas`. Two profiles with the same
//! base parameters therefore agree on regular users and can be made to
//! disagree on divergent ones, which gives ground-truth labels for where two
//! entrances share dynamics.

use std::collections::VecDeque;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, Rng};

fn default_k() -> usize {
    3
}

/// Uniform value-score distribution on `[mean - spread, mean + spread]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueDist {
    pub mean: f64,
    pub spread: f64,
}

impl ValueDist {
    fn sample(&self, rng: &mut Rng) -> f64 {
        if self.spread == 0.0 {
            self.mean
        } else {
            self.mean + self.spread * (2.0 * rng.gen::<f64>() - 1.0)
        }
    }
}

/// Additive offsets applied to a divergent user's parameters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Deltas {
    #[serde(default)]
    pub click: f64,
    #[serde(default)]
    pub buy: f64,
    #[serde(default)]
    pub fatigue: f64,
}

/// Parameters of one entrance's MDP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntranceProfile {
    pub entrance_id: String,
    /// Slots per screen.
    #[serde(default = "default_k")]
    pub k: usize,
    /// Maximum screens per episode.
    pub t_max: usize,
    pub n_ad_cand: usize,
    pub n_org_cand: usize,
    pub ad_value_dist: ValueDist,
    pub org_value_dist: ValueDist,
    pub click_base: f64,
    pub buy_base: f64,
    /// Continuation penalty per displayed ad.
    pub fatigue: f64,
    /// Continuation penalty per screen already scrolled.
    pub depth_decay: f64,
    pub divergent_user_frac: f64,
    #[serde(default)]
    pub deltas: Deltas,
}

impl EntranceProfile {
    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Err(Error::Config(format!("profile '{}': {msg}", self.entrance_id)));
        if self.k == 0 || self.k > 10 {
            return cfg(format!("k must be in 1..=10, got {}", self.k));
        }
        if self.t_max == 0 {
            return cfg("t_max must be at least 1".into());
        }
        let need = self.k * self.t_max;
        if self.n_ad_cand < need || self.n_org_cand < need {
            return cfg(format!("candidate queues must hold at least k*t_max = {need} items"));
        }
        for (name, d) in [("ad_value_dist", self.ad_value_dist), ("org_value_dist", self.org_value_dist)] {
            if !(d.mean.is_finite() && d.spread.is_finite()) || d.spread < 0.0 || d.mean - d.spread < 0.0 {
                return cfg(format!("{name} must satisfy 0 <= spread <= mean"));
            }
        }
        if !(0.0..=1.0).contains(&self.divergent_user_frac) {
            return cfg(format!("divergent_user_frac {} outside [0,1]", self.divergent_user_frac));
        }
        for user in [UserType::Regular, UserType::Divergent] {
            let p = self.params_for(user);
            if !(p.click > 0.0 && p.click < 1.0) {
                return cfg(format!("{user:?} click probability {} outside (0,1)", p.click));
            }
            if !(p.buy > 0.0 && p.buy < 1.0) {
                return cfg(format!("{user:?} buy probability {} outside (0,1)", p.buy));
            }
            if !(p.fatigue >= 0.0 && p.fatigue.is_finite()) {
                return cfg(format!("{user:?} fatigue {} must be non-negative", p.fatigue));
            }
        }
        if !(self.depth_decay >= 0.0 && self.depth_decay.is_finite()) {
            return cfg("depth_decay must be non-negative".into());
        }
        Ok(())
    }

    pub fn n_actions(&self) -> usize {
        1 << self.k
    }

    /// Effective behavioural parameters for a user type.
    pub fn params_for(&self, user: UserType) -> UserParams {
        match user {
            UserType::Regular => UserParams { click: self.click_base, buy: self.buy_base, fatigue: self.fatigue },
            UserType::Divergent => UserParams {
                click: self.click_base + self.deltas.click,
                buy: self.buy_base + self.deltas.buy,
                fatigue: self.fatigue + self.deltas.fatigue,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UserParams {
    pub click: f64,
    pub buy: f64,
    pub fatigue: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UserType {
    Regular,
    Divergent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub user_type: UserType,
    pub screen_idx: usize,
    pub ad_queue: VecDeque<f64>,
    pub org_queue: VecDeque<f64>,
    pub terminated: bool,
}

/// Slot decision for one screen: bit `k` of `index` is 1 when slot `k` shows an ad.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Action {
    index: usize,
    k: usize,
}

impl Action {
    pub fn from_index(index: usize, k: usize) -> Result<Self> {
        if index >= 1 << k {
            return Err(Error::Usage(format!("action index {index} out of range for k={k}")));
        }
        Ok(Self { index, k })
    }

    pub fn from_bits(bits: &[bool]) -> Self {
        let index = bits.iter().enumerate().fold(0, |acc, (i, &b)| acc | (usize::from(b) << i));
        Self { index, k: bits.len() }
    }

    pub fn index(self) -> usize {
        self.index
    }

    pub fn bits(self) -> Vec<bool> {
        (0..self.k).map(|i| self.shows_ad(i)).collect()
    }

    pub fn shows_ad(self, slot: usize) -> bool {
        (self.index >> slot) & 1 == 1
    }

    pub fn n_ads(self) -> usize {
        self.index.count_ones() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub r: f64,
    pub r_ad: f64,
    pub r_fee: f64,
    /// Successor state; `terminated` is set when the user stopped scrolling.
    pub next_state: EnvState,
}

impl StepOutcome {
    pub fn is_terminal(&self) -> bool {
        self.next_state.terminated
    }
}

/// How clicks and purchases turn into reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// Bernoulli click/purchase draws times item value.
    #[default]
    Stochastic,
    /// Expected reward `value * probability`; only the continuation is random.
    Expected,
}

/// A validated profile together with its reward mode and feature layout.
#[derive(Debug, Clone)]
pub struct FeedEnv {
    profile: EntranceProfile,
    reward_mode: RewardMode,
    feature_len: usize,
}

impl FeedEnv {
    pub fn new(profile: EntranceProfile, reward_mode: RewardMode) -> Result<Self> {
        profile.validate()?;
        let feature_len = 2 * profile.k;
        Ok(Self { profile, reward_mode, feature_len })
    }

    /// Overrides the number of queue items exposed per queue in the features.
    pub fn with_feature_len(mut self, l: usize) -> Self {
        self.feature_len = l;
        self
    }

    pub fn profile(&self) -> &EntranceProfile {
        &self.profile
    }

    pub fn k(&self) -> usize {
        self.profile.k
    }

    pub fn n_actions(&self) -> usize {
        self.profile.n_actions()
    }

    pub fn feature_len(&self) -> usize {
        self.feature_len
    }

    pub fn feature_dim(&self) -> usize {
        feature_dim(self.feature_len)
    }

    /// Starts an episode from a fresh seeded stream.
    pub fn reset_seeded(&self, seed: u64) -> EnvState {
        self.reset(&mut rng_from_seed(seed))
    }

    pub fn reset(&self, rng: &mut Rng) -> EnvState {
        let p = &self.profile;
        let user_type = if rng.gen::<f64>() < p.divergent_user_frac {
            UserType::Divergent
        } else {
            UserType::Regular
        };
        let ad_queue = (0..p.n_ad_cand).map(|_| p.ad_value_dist.sample(rng)).collect();
        let org_queue = (0..p.n_org_cand).map(|_| p.org_value_dist.sample(rng)).collect();
        EnvState { user_type, screen_idx: 0, ad_queue, org_queue, terminated: false }
    }

    pub fn step(&self, state: &EnvState, action: Action, rng: &mut Rng) -> Result<StepOutcome> {
        let p = &self.profile;
        if state.terminated {
            return Err(Error::Usage("step called on a terminated state".into()));
        }
        if action.k != p.k {
            return Err(Error::Usage(format!("action has {} slots, profile has {}", action.k, p.k)));
        }
        let n_ads = action.n_ads();
        if state.ad_queue.len() < n_ads || state.org_queue.len() < p.k - n_ads {
            return Err(Error::Usage("candidate queues exhausted".into()));
        }
        let user = p.params_for(state.user_type);
        let mut next = state.clone();
        let mut r_ad = 0.0;
        let mut r_fee = 0.0;
        for slot in 0..p.k {
            if action.shows_ad(slot) {
                let value = next.ad_queue.pop_front().expect("checked queue length");
                r_ad += self.realize(value, user.click, rng);
            } else {
                let value = next.org_queue.pop_front().expect("checked queue length");
                r_fee += self.realize(value, user.buy, rng);
            }
        }
        let cont = continuation_prob(user.fatigue, p.depth_decay, n_ads, state.screen_idx);
        let draw: f64 = rng.gen();
        next.terminated = draw >= cont || state.screen_idx + 1 >= p.t_max;
        next.screen_idx = state.screen_idx + 1;
        Ok(StepOutcome { r: r_ad + r_fee, r_ad, r_fee, next_state: next })
    }

    fn realize(&self, value: f64, prob: f64, rng: &mut Rng) -> f64 {
        match self.reward_mode {
            RewardMode::Expected => value * prob,
            RewardMode::Stochastic => {
                if rng.gen::<f64>() < prob {
                    value
                } else {
                    0.0
                }
            }
        }
    }

    pub fn featurize(&self, state: &EnvState) -> Vec<f64> {
        featurize(state, &self.profile, self.feature_len)
    }
}

/// `clamp(1 - fatigue * n_ads - depth_decay * screen_idx, 0, 1)`.
pub fn continuation_prob(fatigue: f64, depth_decay: f64, n_ads: usize, screen_idx: usize) -> f64 {
    (1.0 - fatigue * n_ads as f64 - depth_decay * screen_idx as f64).clamp(0.0, 1.0)
}

/// Length of the feature vector for `l` exposed items per queue.
pub fn feature_dim(l: usize) -> usize {
    2 * l + 1 + 2 + 2
}

/// Fixed layout shared by every entrance:
/// `[ad_0..ad_{l-1}, org_0..org_{l-1}, screen/t_max, ads_left/n_ad, orgs_left/n_org, regular, divergent]`.
pub fn featurize(state: &EnvState, profile: &EntranceProfile, l: usize) -> Vec<f64> {
    let mut f = Vec::with_capacity(feature_dim(l));
    f.extend((0..l).map(|i| state.ad_queue.get(i).copied().unwrap_or(0.0)));
    f.extend((0..l).map(|i| state.org_queue.get(i).copied().unwrap_or(0.0)));
    f.push(state.screen_idx as f64 / profile.t_max as f64);
    f.push(state.ad_queue.len() as f64 / profile.n_ad_cand as f64);
    f.push(state.org_queue.len() as f64 / profile.n_org_cand as f64);
    match state.user_type {
        UserType::Regular => f.extend([1.0, 0.0]),
        UserType::Divergent => f.extend([0.0, 1.0]),
    }
    f
}

/// Recovers the user type from a feature vector built by [`featurize`].
pub fn user_type_of(features: &[f64]) -> UserType {
    if features.last().copied().unwrap_or(0.0) > 0.5 {
        UserType::Divergent
    } else {
        UserType::Regular
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn profile(k: usize) -> EntranceProfile {
        EntranceProfile {
            entrance_id: "test".into(),
            k,
            t_max: 4,
            n_ad_cand: 4 * k,
            n_org_cand: 4 * k,
            ad_value_dist: ValueDist { mean: 1.0, spread: 0.5 },
            org_value_dist: ValueDist { mean: 1.0, spread: 0.5 },
            click_base: 0.5,
            buy_base: 0.25,
            fatigue: 0.1,
            depth_decay: 0.05,
            divergent_user_frac: 0.5,
            deltas: Deltas::default(),
        }
    }

    fn fixed_state(ads: &[f64], orgs: &[f64]) -> EnvState {
        EnvState {
            user_type: UserType::Regular,
            screen_idx: 0,
            ad_queue: ads.iter().copied().collect(),
            org_queue: orgs.iter().copied().collect(),
            terminated: false,
        }
    }

    #[test]
    fn user_type_follows_degenerate_fraction() {
        let mut p = profile(3);
        p.divergent_user_frac = 0.0;
        let env = FeedEnv::new(p.clone(), RewardMode::Stochastic).unwrap();
        assert!((0..200).all(|s| env.reset_seeded(s).user_type == UserType::Regular));
        p.divergent_user_frac = 1.0;
        let env = FeedEnv::new(p, RewardMode::Stochastic).unwrap();
        assert!((0..200).all(|s| env.reset_seeded(s).user_type == UserType::Divergent));
    }

    #[test]
    fn reset_is_deterministic() {
        let env = FeedEnv::new(profile(3), RewardMode::Stochastic).unwrap();
        assert_eq!(env.reset_seeded(9), env.reset_seeded(9));
    }

    #[test]
    fn invalid_probability_is_config_error() {
        let mut p = profile(3);
        p.deltas.click = 0.6;
        assert!(matches!(FeedEnv::new(p, RewardMode::Stochastic), Err(Error::Config(_))));
        let mut p = profile(3);
        p.n_ad_cand = 5;
        assert!(matches!(p.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn action_bits_round_trip() {
        for idx in 0..8 {
            let a = Action::from_index(idx, 3).unwrap();
            assert_eq!(Action::from_bits(&a.bits()), a);
            assert_eq!(a.n_ads(), a.bits().iter().filter(|&&b| b).count());
        }
        assert!(Action::from_index(8, 3).is_err());
        assert_eq!(Action::from_bits(&[true, false]).index(), 1);
    }

    #[test]
    fn all_organic_action_earns_no_ad_revenue() {
        let env = FeedEnv::new(profile(3), RewardMode::Stochastic).unwrap();
        let mut rng = rng_from_seed(3);
        for seed in 0..50 {
            let s = env.reset_seeded(seed);
            let out = env.step(&s, Action::from_index(0, 3).unwrap(), &mut rng).unwrap();
            assert_eq!(out.r_ad, 0.0);
            assert_eq!(out.r, out.r_ad + out.r_fee);
        }
    }

    #[test]
    fn expected_reward_hand_evaluation() {
        let mut p = profile(2);
        p.click_base = 0.5;
        p.buy_base = 0.25;
        let env = FeedEnv::new(p, RewardMode::Expected).unwrap();
        let s = fixed_state(&[1.0, 7.0, 7.0, 7.0, 7.0, 7.0, 7.0, 7.0], &[2.0, 7.0, 7.0, 7.0, 7.0, 7.0, 7.0, 7.0]);
        // slot 0 shows an ad, slot 1 an organic item
        let a = Action::from_bits(&[true, false]);
        let out = env.step(&s, a, &mut rng_from_seed(0)).unwrap();
        assert_eq!(out.r_ad, 0.5);
        assert_eq!(out.r_fee, 0.5);
        assert_eq!(out.r, 1.0);
    }

    #[test]
    fn heavy_fatigue_terminates_with_certainty() {
        let mut p = profile(3);
        p.fatigue = 0.4;
        let env = FeedEnv::new(p, RewardMode::Stochastic).unwrap();
        let all_ads = Action::from_index(7, 3).unwrap();
        for seed in 0..100 {
            let s = env.reset_seeded(seed);
            let out = env.step(&s, all_ads, &mut rng_from_seed(seed)).unwrap();
            assert!(out.is_terminal());
        }
    }

    #[test]
    fn displayed_items_leave_the_queues() {
        let env = FeedEnv::new(profile(3), RewardMode::Stochastic).unwrap();
        let s = env.reset_seeded(1);
        let a = Action::from_index(0b101, 3).unwrap();
        let out = env.step(&s, a, &mut rng_from_seed(1)).unwrap();
        assert_eq!(out.next_state.ad_queue.len(), s.ad_queue.len() - 2);
        assert_eq!(out.next_state.org_queue.len(), s.org_queue.len() - 1);
        assert_eq!(out.next_state.ad_queue.iter().collect::<Vec<_>>(), s.ad_queue.iter().skip(2).collect::<Vec<_>>());
        assert_eq!(out.next_state.org_queue.iter().collect::<Vec<_>>(), s.org_queue.iter().skip(1).collect::<Vec<_>>());
    }

    #[test]
    fn step_after_termination_is_usage_error() {
        let env = FeedEnv::new(profile(3), RewardMode::Stochastic).unwrap();
        let mut s = env.reset_seeded(1);
        s.terminated = true;
        let err = env.step(&s, Action::from_index(0, 3).unwrap(), &mut rng_from_seed(0));
        assert!(matches!(err, Err(Error::Usage(_))));
    }

    #[test]
    fn last_screen_always_terminates() {
        let mut p = profile(3);
        p.t_max = 1;
        p.fatigue = 0.0;
        p.depth_decay = 0.0;
        let env = FeedEnv::new(p, RewardMode::Stochastic).unwrap();
        let s = env.reset_seeded(4);
        let out = env.step(&s, Action::from_index(0, 3).unwrap(), &mut rng_from_seed(4)).unwrap();
        assert!(out.is_terminal());
    }

    #[test]
    fn features_have_fixed_layout() {
        let p = profile(3);
        let env = FeedEnv::new(p.clone(), RewardMode::Stochastic).unwrap();
        assert_eq!(env.feature_dim(), 2 * 6 + 1 + 2 + 2);
        let s = env.reset_seeded(2);
        let f = env.featurize(&s);
        assert_eq!(f.len(), env.feature_dim());
        assert_eq!(f, env.featurize(&s.clone()));
        assert_eq!(user_type_of(&f), s.user_type);

        let empty = EnvState {
            user_type: UserType::Divergent,
            screen_idx: 2,
            ad_queue: VecDeque::new(),
            org_queue: VecDeque::new(),
            terminated: false,
        };
        let f = featurize(&empty, &p, 6);
        assert!(f[..12].iter().all(|&x| x == 0.0));
        assert_eq!(&f[12..], &[0.5, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn zero_deltas_make_user_types_equivalent() {
        let mut p = profile(3);
        p.divergent_user_frac = 0.0;
        let mut q = p.clone();
        q.divergent_user_frac = 1.0;
        let env_p = FeedEnv::new(p, RewardMode::Stochastic).unwrap();
        let env_q = FeedEnv::new(q, RewardMode::Stochastic).unwrap();
        for seed in 0..50u64 {
            let mut sp = env_p.reset_seeded(seed);
            let mut sq = env_q.reset_seeded(seed);
            assert_eq!(sp.ad_queue, sq.ad_queue);
            let mut rp = rng_from_seed(seed + 100);
            let mut rq = rng_from_seed(seed + 100);
            loop {
                let a = Action::from_index((seed as usize + sp.screen_idx) % 8, 3).unwrap();
                let op = env_p.step(&sp, a, &mut rp).unwrap();
                let oq = env_q.step(&sq, a, &mut rq).unwrap();
                assert_eq!((op.r_ad, op.r_fee, op.is_terminal()), (oq.r_ad, oq.r_fee, oq.is_terminal()));
                if op.is_terminal() {
                    break;
                }
                sp = op.next_state;
                sq = oq.next_state;
            }
        }
    }
}
