//! Rollout collection, generalized advantage estimation and recurrent PPO
//! updates with auxiliary geometric supervision.
//!
//! Minibatches are whole environment segments so the GRU is unrolled
//! through time (BPTT) from the hidden state stored at the segment start,
//! zeroing the state wherever an episode ended.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, NavEnv, RewardConfig, StepInfo};
use crate::error::{Error, Result};
use crate::losses::{
    ang_loss, ang_loss_grad, dist_term, log_softmax, ppo_sample, total_loss, LossBreakdown,
    PpoCoefficients, PpoSample,
};
use crate::model::{save_params, GatePin, ModelConfig, Network, Parameters, StepGrad};
use crate::observe::{GeometricTargets, ObsConfig, Observation};
use crate::world::{sample_episode, GridMap};

/// Training log header.
pub const LOG_HEADER: &str = "step,sr_recent,l_total,l_policy,l_value,l_entropy,l_dist,l_ang,mean_sigma2";

/// Window of finished episodes behind `sr_recent`.
pub const RECENT_EPISODES: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub rollout_len: usize,
    pub num_envs: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub ppo_epochs: usize,
    pub minibatches: usize,
    pub learning_rate: f64,
    pub adam_eps: f64,
    pub max_grad_norm: f64,
    pub lambda_aux: f64,
    pub clip_eps: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub seed: u64,
    pub heard_classes: Vec<u32>,
    pub unheard_classes: Vec<u32>,
    pub max_steps: u32,
    /// Updates between checkpoints; 0 writes only the final checkpoint.
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 2_000_000,
            rollout_len: 128,
            num_envs: 8,
            gamma: 0.99,
            gae_lambda: 0.95,
            ppo_epochs: 4,
            minibatches: 4,
            learning_rate: 2.5e-4,
            adam_eps: 1e-5,
            max_grad_norm: 0.5,
            lambda_aux: 0.5,
            clip_eps: 0.2,
            value_coef: 0.5,
            entropy_coef: 0.01,
            seed: 0,
            heard_classes: (0..8).collect(),
            unheard_classes: (8..12).collect(),
            max_steps: 100,
            checkpoint_interval: 100,
        }
    }
}

impl TrainConfig {
    pub fn coefficients(&self) -> PpoCoefficients {
        PpoCoefficients {
            clip_eps: self.clip_eps,
            value_coef: self.value_coef,
            entropy_coef: self.entropy_coef,
        }
    }

    pub fn steps_per_update(&self) -> u64 {
        (self.rollout_len * self.num_envs) as u64
    }

    pub fn num_updates(&self) -> u64 {
        self.total_steps.div_ceil(self.steps_per_update()).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |key: &str, reason: &str| {
            Err(Error::Validation {
                key: key.into(),
                reason: reason.into(),
            })
        };
        if self.rollout_len == 0 {
            return invalid("rollout_len", "must be positive");
        }
        if self.num_envs == 0 {
            return invalid("num_envs", "must be positive");
        }
        if self.minibatches == 0 || self.minibatches > self.num_envs {
            return invalid("minibatches", "must be between 1 and num_envs");
        }
        if self.ppo_epochs == 0 {
            return invalid("ppo_epochs", "must be positive");
        }
        if self.total_steps == 0 {
            return invalid("total_steps", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return invalid("gamma", "must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return invalid("gae_lambda", "must lie in [0, 1]");
        }
        if self.learning_rate < 0.0 {
            return invalid("learning_rate", "must be non-negative");
        }
        if self.max_grad_norm <= 0.0 {
            return invalid("max_grad_norm", "must be positive");
        }
        if self.max_steps == 0 {
            return invalid("max_steps", "must be positive");
        }
        if self.heard_classes.is_empty() {
            return invalid("heard_classes", "must not be empty");
        }
        if let Some(c) = self
            .heard_classes
            .iter()
            .find(|c| self.unheard_classes.contains(c))
        {
            return invalid(
                "unheard_classes",
                &format!("class {c} is also heard; the splits must be disjoint"),
            );
        }
        Ok(())
    }
}

/// Mixes a base seed with a stream label.
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    let mut z = seed ^ label.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Draws an action index from logits.
pub fn sample_action<R: Rng + ?Sized>(logits: &[f64], rng: &mut R) -> (usize, f64) {
    let lp = log_softmax(logits);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, l) in lp.iter().enumerate() {
        acc += l.exp();
        if u < acc {
            return (i, *l);
        }
    }
    let last = lp.len() - 1;
    (last, lp[last])
}

/// Greedy action (first maximum).
pub fn greedy_action(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, l) in logits.iter().enumerate() {
        if *l > logits[best] {
            best = i;
        }
    }
    best
}

/// One environment's contiguous stretch of `T` transitions.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Segment {
    /// Hidden state entering step 0.
    pub h0: Vec<f64>,
    pub audio: Vec<Vec<f64>>,
    pub visual: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub dones: Vec<bool>,
    /// Hidden state was zeroed before step `t` (an episode started there).
    pub resets: Vec<bool>,
    pub targets: Vec<GeometricTargets>,
    pub occlusion: Vec<u32>,
    /// Predicted variance at each step (`NaN` without a distance head).
    pub sigma2: Vec<f64>,
    /// Value of the observation following the last step.
    pub bootstrap_value: f64,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FinishedEpisode {
    pub env: usize,
    pub sound_class: u32,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RolloutBatch {
    /// One segment per environment, in environment-index order.
    pub segments: Vec<Segment>,
    pub finished: Vec<FinishedEpisode>,
}

impl RolloutBatch {
    pub fn transitions(&self) -> usize {
        self.segments.iter().map(Segment::len).sum()
    }

    pub fn mean_sigma2(&self) -> f64 {
        let (sum, n) = self
            .segments
            .iter()
            .flat_map(|s| &s.sigma2)
            .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        if n == 0 {
            f64::NAN
        } else {
            sum / n as f64
        }
    }
}

/// GAE over one sequence. `dones[t]` cuts bootstrapping after step `t`.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n { values[t + 1] } else { bootstrap };
        let nonterminal = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * nonterminal - values[t];
        running = delta + gamma * lambda * nonterminal * running;
        adv[t] = running;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Fills advantages and returns on every segment.
pub fn compute_gae(batch: &mut RolloutBatch, gamma: f64, lambda: f64) {
    for s in &mut batch.segments {
        let (adv, ret) = gae(&s.rewards, &s.values, &s.dones, s.bootstrap_value, gamma, lambda);
        s.advantages = adv;
        s.returns = ret;
    }
}

struct EnvSlot {
    index: usize,
    env: NavEnv,
    action_rng: ChaCha8Rng,
    episode_rng: ChaCha8Rng,
    episodes: u64,
    h: Vec<f64>,
    obs: Observation,
    info: StepInfo,
    fresh: bool,
}

/// `K` environments stepping a shared frozen policy. Episodes are drawn
/// from the heard classes only.
pub struct RolloutCollector {
    slots: Vec<EnvSlot>,
    classes: Vec<u32>,
    max_steps: u32,
    class_counts: BTreeMap<u32, u64>,
}

impl RolloutCollector {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        maps: Arc<[GridMap]>,
        obs_cfg: Arc<ObsConfig>,
        reward: RewardConfig,
        num_envs: usize,
        hidden: usize,
        heard_classes: &[u32],
        max_steps: u32,
        seed: u64,
    ) -> Result<Self> {
        let mut collector = RolloutCollector {
            slots: Vec::with_capacity(num_envs),
            classes: heard_classes.to_vec(),
            max_steps,
            class_counts: BTreeMap::new(),
        };
        for index in 0..num_envs {
            let mut env = NavEnv::new(maps.clone(), obs_cfg.clone(), reward);
            let mut episode_rng =
                ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x1000 + index as u64));
            let (obs, info) = Self::start_episode(
                &mut env,
                &mut episode_rng,
                &collector.classes,
                max_steps,
                index,
                0,
                &mut collector.class_counts,
            )?;
            collector.slots.push(EnvSlot {
                index,
                env,
                action_rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x2000 + index as u64)),
                episode_rng,
                episodes: 1,
                h: vec![0.0; hidden],
                obs,
                info,
                fresh: true,
            });
        }
        Ok(collector)
    }

    fn start_episode(
        env: &mut NavEnv,
        rng: &mut ChaCha8Rng,
        classes: &[u32],
        max_steps: u32,
        env_index: usize,
        counter: u64,
        counts: &mut BTreeMap<u32, u64>,
    ) -> Result<(Observation, StepInfo)> {
        let map_id = rng.random_range(0..env.maps().len());
        let episode = sample_episode(&env.maps()[map_id], map_id, rng, classes, max_steps)?;
        *counts.entry(episode.sound_class).or_default() += 1;
        env.reset(episode, ((env_index as u64) << 40) | counter)
    }

    /// Number of sampled episodes per sound class so far.
    pub fn class_counts(&self) -> &BTreeMap<u32, u64> {
        &self.class_counts
    }

    /// Current recurrent state of each environment.
    pub fn hidden_states(&self) -> Vec<&[f64]> {
        self.slots.iter().map(|s| s.h.as_slice()).collect()
    }

    pub fn collect(&mut self, net: &Network, params: &Parameters, steps: usize) -> Result<RolloutBatch> {
        let p = params.data();
        let mut batch = RolloutBatch::default();
        for slot in &mut self.slots {
            let mut seg = Segment {
                h0: slot.h.clone(),
                ..Segment::default()
            };
            for _ in 0..steps {
                let cache = net.step_unchecked(
                    p,
                    &slot.obs.audio.spectrum,
                    &slot.obs.visual.depths,
                    &slot.h,
                    GatePin::Free,
                );
                let (action, log_prob) = sample_action(&cache.policy.logits, &mut slot.action_rng);
                let result = slot.env.step(Action::from_index(action))?;

                seg.resets.push(slot.fresh);
                seg.audio.push(std::mem::take(&mut slot.obs.audio.spectrum));
                seg.visual.push(std::mem::take(&mut slot.obs.visual.depths));
                seg.actions.push(action);
                seg.rewards.push(result.reward);
                seg.values.push(cache.policy.value);
                seg.log_probs.push(log_prob);
                seg.dones.push(result.done);
                seg.targets.push(slot.info.targets);
                seg.occlusion.push(slot.info.occlusion_k);
                seg.sigma2.extend(cache.agr.as_ref().map(|a| a.log_var.exp()));

                slot.fresh = false;
                slot.h = cache.policy.h;
                if result.done {
                    let episode = slot.env.episode().expect("active episode");
                    batch.finished.push(FinishedEpisode {
                        env: slot.index,
                        sound_class: episode.sound_class,
                        success: result.info.success,
                    });
                    let (obs, info) = Self::start_episode(
                        &mut slot.env,
                        &mut slot.episode_rng,
                        &self.classes,
                        self.max_steps,
                        slot.index,
                        slot.episodes,
                        &mut self.class_counts,
                    )?;
                    slot.episodes += 1;
                    slot.obs = obs;
                    slot.info = info;
                    slot.h.iter_mut().for_each(|v| *v = 0.0);
                    slot.fresh = true;
                } else {
                    slot.obs = result.obs;
                    slot.info = result.info;
                }
            }
            let next = net.step_unchecked(
                p,
                &slot.obs.audio.spectrum,
                &slot.obs.visual.depths,
                &slot.h,
                GatePin::Free,
            );
            seg.bootstrap_value = next.policy.value;
            batch.segments.push(seg);
        }
        Ok(batch)
    }
}

/// Loss weights used when differentiating a minibatch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_aux: f64,
    pub coef: PpoCoefficients,
}

/// Evaluates the total objective on whole segments and returns its mean
/// terms together with the gradient over every parameter. Advantages are
/// used as stored (normalize beforehand).
pub fn minibatch_gradient(
    net: &Network,
    params: &Parameters,
    segments: &[&Segment],
    weights: &LossWeights,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let n: usize = segments.iter().map(|s| s.len()).sum();
    if n == 0 {
        return Err(Error::Argument("empty minibatch".into()));
    }
    let inv_n = 1.0 / n as f64;
    let variant = net.variant();
    let coef = weights.coef;
    let mut grads = vec![0.0; params.len()];
    let (mut sp, mut sv, mut se, mut sd, mut sa) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let hidden = net.config().hidden;
    let zeros = vec![0.0; hidden];

    for seg in segments {
        let mut caches = Vec::with_capacity(seg.len());
        let mut h = seg.h0.clone();
        for t in 0..seg.len() {
            let h_prev = if seg.resets[t] { &zeros } else { &h };
            let cache = net.step_unchecked(
                params.data(),
                &seg.audio[t],
                &seg.visual[t],
                h_prev,
                GatePin::Free,
            );
            h = cache.policy.h.clone();
            caches.push(cache);
        }

        let mut dh_next = vec![0.0; hidden];
        for t in (0..seg.len()).rev() {
            let cache = &caches[t];
            let terms = ppo_sample(
                &PpoSample {
                    logits: &cache.policy.logits,
                    value: cache.policy.value,
                    action: seg.actions[t],
                    old_log_prob: seg.log_probs[t],
                    advantage: seg.advantages[t],
                    ret: seg.returns[t],
                },
                coef.clip_eps,
            );
            sp += terms.policy;
            sv += terms.value;
            se -= terms.entropy;
            let d_logits = terms
                .d_policy_d_logits
                .iter()
                .zip(&terms.d_neg_entropy_d_logits)
                .map(|(a, b)| (a + coef.entropy_coef * b) * inv_n)
                .collect();
            let mut grad = StepGrad {
                d_logits,
                d_value: coef.value_coef * terms.d_value * inv_n,
                ..StepGrad::default()
            };
            if let Some(agr) = &cache.agr {
                let y = seg.targets[t];
                let (ld, gmu, glv) = dist_term(variant, agr.mu, agr.log_var, y.y_dist);
                sd += ld;
                sa += ang_loss(agr.phi_hat, y.y_ang);
                let scale = weights.lambda_aux * inv_n;
                grad.d_mu = scale * gmu;
                grad.d_log_var = scale * glv;
                grad.d_phi = scale * ang_loss_grad(agr.phi_hat, y.y_ang);
            }
            let dh_prev = net.backward_step(params, cache, &grad, &dh_next, &mut grads);
            if seg.resets[t] {
                dh_next.iter_mut().for_each(|v| *v = 0.0);
            } else {
                dh_next = dh_prev;
            }
        }
    }

    let breakdown = total_loss(
        variant,
        sp * inv_n,
        sv * inv_n,
        se * inv_n,
        sd * inv_n,
        sa * inv_n,
        weights.lambda_aux,
        &coef,
    );
    Ok((breakdown, grads))
}

/// Scales `grads` so its Euclidean norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / (norm + 1e-6);
        grads.iter_mut().for_each(|g| *g *= scale);
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Normalizes advantages across the whole batch to zero mean, unit
/// variance.
pub fn normalize_advantages(batch: &mut RolloutBatch) {
    let all: Vec<f64> = batch
        .segments
        .iter()
        .flat_map(|s| s.advantages.iter().copied())
        .collect();
    if all.is_empty() {
        return;
    }
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let var = all.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt() + 1e-8;
    for s in &mut batch.segments {
        s.advantages.iter_mut().for_each(|a| *a = (*a - mean) / std);
    }
}

/// PPO epochs over shuffled segment minibatches. Returns loss terms averaged
/// over all minibatch steps.
pub fn update(
    net: &Network,
    params: &mut Parameters,
    adam: &mut Adam,
    batch: &mut RolloutBatch,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    update_index: usize,
) -> Result<LossBreakdown> {
    normalize_advantages(batch);
    let weights = LossWeights {
        lambda_aux: cfg.lambda_aux,
        coef: cfg.coefficients(),
    };
    let k = batch.segments.len();
    let mut order: Vec<usize> = (0..k).collect();
    let mut sum = LossBreakdown::default();
    let mut count = 0usize;
    for _ in 0..cfg.ppo_epochs {
        order.shuffle(rng);
        for mb in 0..cfg.minibatches {
            let lo = mb * k / cfg.minibatches;
            let hi = (mb + 1) * k / cfg.minibatches;
            if lo == hi {
                continue;
            }
            let segs: Vec<&Segment> = order[lo..hi].iter().map(|i| &batch.segments[*i]).collect();
            let (loss, mut grads) = minibatch_gradient(net, params, &segs, &weights)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    update: update_index,
                    detail: format!("{loss:?}"),
                });
            }
            clip_grad_norm(&mut grads, cfg.max_grad_norm);
            adam.step(params.data_mut(), &grads);
            sum.add(&loss);
            count += 1;
        }
    }
    Ok(sum.scaled(1.0 / count.max(1) as f64))
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub sr_recent: f64,
    pub loss: LossBreakdown,
    pub mean_sigma2: f64,
}

impl LogRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.sr_recent,
            self.loss.l_total,
            self.loss.l_ppo_policy,
            self.loss.l_value,
            self.loss.l_entropy,
            self.loss.l_dist,
            self.loss.l_ang,
            self.mean_sigma2
        )
    }
}

/// Owns the full training state.
pub struct Trainer {
    pub cfg: TrainConfig,
    net: Network,
    params: Parameters,
    adam: Adam,
    collector: RolloutCollector,
    update_rng: ChaCha8Rng,
    steps_done: u64,
    updates_done: usize,
    recent: VecDeque<bool>,
}

impl Trainer {
    pub fn new(
        model_cfg: ModelConfig,
        obs_cfg: ObsConfig,
        reward: RewardConfig,
        cfg: TrainConfig,
        maps: Vec<GridMap>,
    ) -> Result<Self> {
        cfg.validate()?;
        if model_cfg.freq_bins != obs_cfg.freq_bins || model_cfg.rays != obs_cfg.rays {
            return Err(Error::Configuration(
                "model and observation sizes disagree".into(),
            ));
        }
        if maps.is_empty() {
            return Err(Error::Argument("no maps to train on".into()));
        }
        let net = Network::new(model_cfg)?;
        let params = net.init_params(derive_seed(cfg.seed, 1));
        let adam = Adam::new(params.len(), cfg.learning_rate, cfg.adam_eps);
        let collector = RolloutCollector::new(
            Arc::from(maps),
            Arc::new(obs_cfg),
            reward,
            cfg.num_envs,
            net.config().hidden,
            &cfg.heard_classes,
            cfg.max_steps,
            derive_seed(cfg.seed, 2),
        )?;
        Ok(Trainer {
            update_rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 3)),
            cfg,
            net,
            params,
            adam,
            collector,
            steps_done: 0,
            updates_done: 0,
            recent: VecDeque::with_capacity(RECENT_EPISODES),
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn params(&self) -> &Parameters {
        &self.params
    }

    pub fn collector(&self) -> &RolloutCollector {
        &self.collector
    }

    pub fn steps_done(&self) -> u64 {
        self.steps_done
    }

    pub fn is_finished(&self) -> bool {
        self.steps_done >= self.cfg.total_steps
    }

    /// Collect, estimate advantages, update.
    pub fn iterate(&mut self) -> Result<LogRow> {
        let mut batch = self
            .collector
            .collect(&self.net, &self.params, self.cfg.rollout_len)?;
        compute_gae(&mut batch, self.cfg.gamma, self.cfg.gae_lambda);
        for f in &batch.finished {
            if self.recent.len() == RECENT_EPISODES {
                self.recent.pop_front();
            }
            self.recent.push_back(f.success);
        }
        let mean_sigma2 = batch.mean_sigma2();
        let loss = update(
            &self.net,
            &mut self.params,
            &mut self.adam,
            &mut batch,
            &self.cfg,
            &mut self.update_rng,
            self.updates_done,
        )?;
        self.steps_done += batch.transitions() as u64;
        self.updates_done += 1;
        let sr_recent = if self.recent.is_empty() {
            0.0
        } else {
            self.recent.iter().filter(|s| **s).count() as f64 / self.recent.len() as f64
        };
        Ok(LogRow {
            step: self.steps_done,
            sr_recent,
            loss,
            mean_sigma2,
        })
    }

    /// Runs to `total_steps`. With an output directory, writes
    /// `train_log.csv` and `checkpoint.bin` (periodically and at the end).
    pub fn run(&mut self, out_dir: Option<&Path>, mut on_row: impl FnMut(&LogRow)) -> Result<Vec<LogRow>> {
        let mut log = match out_dir {
            Some(dir) => {
                let path = dir.join("train_log.csv");
                let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
                writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(&path, e))?;
                Some((f, path))
            }
            None => None,
        };
        let mut rows = Vec::new();
        while !self.is_finished() {
            let row = self.iterate()?;
            if let Some((f, path)) = &mut log {
                writeln!(f, "{}", row.to_csv()).map_err(|e| Error::io(path.clone(), e))?;
            }
            if let Some(dir) = out_dir {
                let interval = self.cfg.checkpoint_interval;
                if interval > 0 && self.updates_done.is_multiple_of(interval) {
                    self.save_checkpoint(&dir.join("checkpoint.bin"))?;
                }
            }
            on_row(&row);
            rows.push(row);
        }
        if let Some(dir) = out_dir {
            self.save_checkpoint(&dir.join("checkpoint.bin"))?;
        }
        Ok(rows)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        save_params(path, self.net.config(), &self.params)
    }

    pub fn into_parts(self) -> (Network, Parameters) {
        (self.net, self.params)
    }
}

/// Result of a complete training run.
pub struct TrainOutcome {
    pub network: Network,
    pub params: Parameters,
    pub log: Vec<LogRow>,
    pub class_counts: BTreeMap<u32, u64>,
    pub checkpoint: Option<PathBuf>,
}

/// Trains from scratch on `maps`.
pub fn train(
    model_cfg: ModelConfig,
    obs_cfg: ObsConfig,
    reward: RewardConfig,
    cfg: TrainConfig,
    maps: Vec<GridMap>,
    out_dir: Option<&Path>,
    on_row: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(model_cfg, obs_cfg, reward, cfg, maps)?;
    let log = trainer.run(out_dir, on_row)?;
    let class_counts = trainer.collector.class_counts().clone();
    let (network, params) = trainer.into_parts();
    Ok(TrainOutcome {
        network,
        params,
        log,
        class_counts,
        checkpoint: out_dir.map(|d| d.join("checkpoint.bin")),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;
    use crate::world::benchmark_maps;

    fn small_cfg() -> (ModelConfig, ObsConfig, TrainConfig) {
        let model = ModelConfig {
            audio_features: 8,
            visual_features: 8,
            geo_features: 8,
            hidden: 8,
            gate_hidden: 8,
            ..ModelConfig::default()
        };
        let train = TrainConfig {
            total_steps: 64,
            rollout_len: 16,
            num_envs: 4,
            minibatches: 2,
            max_steps: 12,
            ..TrainConfig::default()
        };
        (model, ObsConfig::default(), train)
    }

    fn maps() -> Vec<GridMap> {
        benchmark_maps().into_iter().map(|(_, m)| m).collect()
    }

    #[test]
    fn gae_examples() {
        let (a, r) = gae(&[1.0], &[0.0], &[true], 0.0, 0.99, 0.95);
        assert_eq!((a[0], r[0]), (1.0, 1.0));
        let (a, _) = gae(&[0.5, -1.0, 2.0], &[0.1, 0.2, 0.3], &[false, false, false], 7.0, 0.0, 0.95);
        assert_eq!(a, vec![0.4, -1.2, 1.7]);
        let (a, _) = gae(&[0.0, 1.0], &[0.0, 0.0], &[false, true], 0.0, 1.0, 1.0);
        assert_eq!(a, vec![1.0, 1.0]);
    }

    #[test]
    fn clipping_never_grows_the_norm() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_grad_norm(&mut g, 0.5), 5.0);
        let after = (g[0] * g[0] + g[1] * g[1]).sqrt();
        assert!(after <= 0.5);
        let mut small = vec![0.1, 0.1];
        clip_grad_norm(&mut small, 0.5);
        assert_eq!(small, vec![0.1, 0.1]);
    }

    #[test]
    fn rollouts_are_deterministic_and_sized() {
        let (model, obs, train) = small_cfg();
        let net = Network::new(model).unwrap();
        let params = net.init_params(5);
        let make = || {
            RolloutCollector::new(
                Arc::from(maps()),
                Arc::new(obs.clone()),
                RewardConfig::default(),
                1,
                net.config().hidden,
                &train.heard_classes,
                train.max_steps,
                17,
            )
            .unwrap()
        };
        let a = make().collect(&net, &params, 4).unwrap();
        let b = make().collect(&net, &params, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.transitions(), 4);
    }

    #[test]
    fn hidden_state_resets_after_done() {
        let (model, obs, train) = small_cfg();
        let net = Network::new(model).unwrap();
        let params = net.init_params(5);
        let mut c = RolloutCollector::new(
            Arc::from(maps()),
            Arc::new(obs),
            RewardConfig::default(),
            2,
            net.config().hidden,
            &train.heard_classes,
            6,
            3,
        )
        .unwrap();
        let batch = c.collect(&net, &params, 40).unwrap();
        for seg in &batch.segments {
            assert!(seg.dones.iter().any(|d| *d));
            for t in 1..seg.len() {
                assert_eq!(seg.resets[t], seg.dones[t - 1]);
            }
        }
        // replay the recurrence and check every post-done input state is zero
        for seg in &batch.segments {
            let mut h = seg.h0.clone();
            for t in 0..seg.len() {
                if seg.resets[t] {
                    h = vec![0.0; h.len()];
                }
                let cache = net
                    .step_unchecked(params.data(), &seg.audio[t], &seg.visual[t], &h, GatePin::Free);
                assert_eq!(cache.policy.value, seg.values[t]);
                h = cache.policy.h;
            }
        }
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let (model, obs, mut train) = small_cfg();
        train.learning_rate = 0.0;
        let mut t = Trainer::new(model, obs, RewardConfig::default(), train, maps()).unwrap();
        let before = t.params().clone();
        t.iterate().unwrap();
        assert_eq!(&before, t.params());
    }

    #[test]
    fn first_pass_policy_loss_is_negative_mean_advantage() {
        let (model, obs, mut train) = small_cfg();
        train.ppo_epochs = 1;
        train.minibatches = 1;
        let net = Network::new(model).unwrap();
        let mut params = net.init_params(2);
        let mut c = RolloutCollector::new(
            Arc::from(maps()),
            Arc::new(obs),
            RewardConfig::default(),
            train.num_envs,
            net.config().hidden,
            &train.heard_classes,
            train.max_steps,
            9,
        )
        .unwrap();
        let mut batch = c.collect(&net, &params, train.rollout_len).unwrap();
        compute_gae(&mut batch, train.gamma, train.gae_lambda);
        let mut normalized = batch.clone();
        normalize_advantages(&mut normalized);
        let n = normalized.transitions() as f64;
        let mean_adv: f64 = normalized
            .segments
            .iter()
            .flat_map(|s| &s.advantages)
            .sum::<f64>()
            / n;
        let mut adam = Adam::new(params.len(), train.learning_rate, train.adam_eps);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let loss = update(&net, &mut params, &mut adam, &mut batch, &train, &mut rng, 0).unwrap();
        assert!((loss.l_ppo_policy + mean_adv).abs() < 1e-12);
    }

    #[test]
    fn training_is_bitwise_reproducible() {
        let (model, obs, train) = small_cfg();
        let run = || {
            train_variant(Variant::Ravn, model.clone(), obs.clone(), train.clone())
        };
        let (pa, la) = run();
        let (pb, lb) = run();
        assert_eq!(pa, pb);
        assert_eq!(la, lb);
        assert_eq!(la.len(), 1);
    }

    fn train_variant(v: Variant, model: ModelConfig, obs: ObsConfig, train: TrainConfig) -> (Parameters, Vec<String>) {
        let model = ModelConfig { variant: v, ..model };
        let out = super::train(model, obs, RewardConfig::default(), train, maps(), None, |_| {}).unwrap();
        (out.params, out.log.iter().map(LogRow::to_csv).collect())
    }

    #[test]
    fn every_variant_trains() {
        let (model, obs, train) = small_cfg();
        for v in Variant::ALL {
            let (_, log) = train_variant(v, model.clone(), obs.clone(), train.clone());
            assert_eq!(log.len(), 1);
        }
    }

    #[test]
    fn overlapping_splits_are_rejected() {
        let cfg = TrainConfig {
            unheard_classes: vec![3],
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Validation { key, .. }) if key == "unheard_classes"));
    }
}
