//! PPO training of the recurrent navigation agent: vectorized rollout
//! collection over parallel episode streams, generalized advantage
//! estimation with truncation-aware bootstrapping, and clipped-surrogate
//! updates over whole environment segments (so the LSTM replay sees exactly
//! the hidden states it saw during collection).

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::eval::{evaluate_policy, EvalCase, EvalError};
use crate::policy::{
    images_to_tensor, sample_from_logits, Policy, PolicyArch, PolicyError, PARAM_NAMES,
};
use crate::tensor::{
    adam_step, clip_grad_norm, AdamState, ParamSet, Scalar, Tape, TensorData, TensorError, Var,
};
use crate::worldsim::{
    render, render_target_card, sample_episode, Action, Episode, EpisodeSpec, Image,
    ObservationConfig, RewardConfig, WorldError, WorldMap,
};

/// Training hyperparameters. Discount and GAE parameters follow the usual
/// navigation setup; the plumbing values (clip, epochs, minibatching,
/// coefficients, learning rate) are standard PPO defaults.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PPOConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f32,
    pub epochs: usize,
    pub minibatches: usize,
    pub value_coef: f32,
    pub entropy_coef: f32,
    pub lr: f32,
    pub max_grad_norm: f32,
    pub rollout_length: usize,
    pub num_envs: usize,
    pub total_steps: usize,
    /// Size of the pre-sampled training episode pool.
    pub train_episodes: usize,
    /// Size of the held-out validation episode pool.
    pub val_episodes: usize,
    /// Validation + curve cadence, in updates.
    pub eval_every_updates: usize,
    pub max_steps_per_episode: usize,
}

impl Default for PPOConfig {
    fn default() -> Self {
        PPOConfig {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            epochs: 4,
            minibatches: 4,
            value_coef: 0.5,
            entropy_coef: 0.01,
            lr: 2.5e-4,
            max_grad_norm: 0.5,
            rollout_length: 128,
            num_envs: 8,
            total_steps: 300_000,
            train_episodes: 500,
            val_episodes: 100,
            eval_every_updates: 20,
            max_steps_per_episode: 200,
        }
    }
}

impl PPOConfig {
    pub fn validate(&self) -> Result<(), PpoError> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(PpoError::Config("gamma must be in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(PpoError::Config("gae_lambda must be in [0, 1]".into()));
        }
        if !(self.clip > 0.0) {
            return Err(PpoError::Config("clip must be positive".into()));
        }
        if self.epochs == 0 || self.minibatches == 0 || self.rollout_length == 0 || self.num_envs == 0 {
            return Err(PpoError::Config("epochs/minibatches/rollout/envs must be positive".into()));
        }
        if self.num_envs % self.minibatches != 0 {
            return Err(PpoError::Config(format!(
                "num_envs ({}) must divide into minibatches ({}) as whole env segments",
                self.num_envs, self.minibatches
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum PpoError {
    #[error("invalid PPO config: {0}")]
    Config(String),
    #[error("non-finite loss at update {update} (policy {policy_loss}, value {value_loss}, entropy {entropy})")]
    NonFiniteLoss { update: usize, policy_loss: f64, value_loss: f64, entropy: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One collected rollout: `rollout_length` transitions for each of the
/// `num_envs` streams, stored time-major (index `t * num_envs + env`).
#[derive(Debug, Clone)]
pub struct RolloutBuffer {
    pub t: usize,
    pub n: usize,
    /// Normalized CHW pixels, one row of `3*h*w` floats per transition.
    pub obs: Vec<f32>,
    pub obs_h: usize,
    pub obs_w: usize,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f32>,
    pub values: Vec<f32>,
    pub rewards: Vec<f32>,
    /// 1.0 where the episode ended after this transition (any reason).
    pub dones: Vec<f32>,
    /// Bootstrap value for episode ends: V(s_{t+1}) for truncations
    /// (timeouts), 0 for true terminations.
    pub boot_values: Vec<f32>,
    /// Recurrent state at the start of the rollout, for replay.
    pub start_h: TensorData<f32>,
    pub start_c: TensorData<f32>,
    /// V(s_T) per env, bootstrapping unfinished episodes at the tail.
    pub final_values: Vec<f32>,
    /// Target-embedding variant: per-episode card images and per-transition
    /// indices into them. Empty otherwise.
    pub cards: Vec<Image>,
    pub card_idx: Vec<u32>,
    /// Stats of episodes that finished during this rollout.
    pub episode_returns: Vec<f64>,
    pub episode_successes: Vec<bool>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.t * self.n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn obs_row(&self, idx: usize) -> &[f32] {
        let stride = 3 * self.obs_h * self.obs_w;
        &self.obs[idx * stride..(idx + 1) * stride]
    }
}

/// One environment stream: a live episode plus the observation function it
/// is being experienced through.
struct EnvSlot<'w> {
    world_idx: usize,
    episode: Episode<'w>,
    obs: ObservationConfig,
    /// Target-embedding variant: the card latent for the current episode
    /// (computed at reset with the then-current parameters) and the card's
    /// index in the rollout buffer being collected.
    card_latent: Vec<f32>,
    card_image: Image,
    card_ref: u32,
    ret: f64,
}

/// Owns the episode streams, recurrent state, and named RNG streams across
/// rollouts. Episode resets draw from a pre-sampled pool; the observation
/// sampler runs on its own stream so randomizing observations never perturbs
/// episode sampling.
pub struct RolloutCollector<'w> {
    worlds: &'w [WorldMap],
    pool: Vec<(usize, EpisodeSpec)>,
    reward_cfg: RewardConfig,
    slots: Vec<EnvSlot<'w>>,
    h: TensorData<f32>,
    c: TensorData<f32>,
    episode_rng: ChaCha8Rng,
    action_rng: ChaCha8Rng,
    obs_rng: ChaCha8Rng,
}

/// Pre-samples `n` episodes across the worlds (uniform world choice).
pub fn build_episode_pool(
    worlds: &[WorldMap],
    n: usize,
    max_steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(usize, EpisodeSpec)>, WorldError> {
    let mut pool = Vec::with_capacity(n);
    for _ in 0..n {
        let w = rng.gen_range(0..worlds.len());
        pool.push((w, sample_episode(&worlds[w], rng, max_steps)?));
    }
    Ok(pool)
}

impl<'w> RolloutCollector<'w> {
    pub fn new(
        policy: &Policy,
        worlds: &'w [WorldMap],
        pool: Vec<(usize, EpisodeSpec)>,
        cfg: &PPOConfig,
        obs_sampler: &mut dyn FnMut(&mut ChaCha8Rng) -> ObservationConfig,
        seed: u64,
    ) -> Result<Self, PpoError> {
        assert!(!worlds.is_empty() && !pool.is_empty());
        let mut collector = RolloutCollector {
            worlds,
            pool,
            reward_cfg: RewardConfig::default(),
            slots: Vec::with_capacity(cfg.num_envs),
            h: TensorData::zeros(&[cfg.num_envs, policy.arch().hidden]),
            c: TensorData::zeros(&[cfg.num_envs, policy.arch().hidden]),
            episode_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x4550_4953_u64),
            action_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x4143_5449_u64),
            obs_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x4f42_5352_u64),
        };
        for _ in 0..cfg.num_envs {
            let slot = collector.fresh_slot(policy, obs_sampler)?;
            collector.slots.push(slot);
        }
        Ok(collector)
    }

    fn fresh_slot(
        &mut self,
        policy: &Policy,
        obs_sampler: &mut dyn FnMut(&mut ChaCha8Rng) -> ObservationConfig,
    ) -> Result<EnvSlot<'w>, PpoError> {
        let (world_idx, spec) = self.pool[self.episode_rng.gen_range(0..self.pool.len())];
        let obs = obs_sampler(&mut self.obs_rng);
        let (card_image, card_latent) = if policy.arch().target_embedding {
            let card = render_target_card(&obs);
            let latent = policy.perceive(&card)?;
            (card, latent)
        } else {
            (Image::filled(1, 1, [0, 0, 0]), Vec::new())
        };
        Ok(EnvSlot {
            world_idx,
            episode: Episode::new(&self.worlds[world_idx], spec, self.reward_cfg),
            obs,
            card_latent,
            card_image,
            card_ref: u32::MAX,
            ret: 0.0,
        })
    }

    fn render_slot(&self, e: usize) -> Image {
        let slot = &self.slots[e];
        render(
            &self.worlds[slot.world_idx],
            slot.episode.pose(),
            &slot.episode.spec.target,
            &slot.obs,
        )
    }

    /// Collects one rollout of `cfg.rollout_length` steps from every stream.
    pub fn collect(
        &mut self,
        policy: &Policy,
        cfg: &PPOConfig,
        obs_sampler: &mut dyn FnMut(&mut ChaCha8Rng) -> ObservationConfig,
    ) -> Result<RolloutBuffer, PpoError> {
        let (t_len, n) = (cfg.rollout_length, cfg.num_envs);
        let arch = policy.arch().clone();
        let embedding = arch.target_embedding;
        let frame_len = 3 * arch.image_height * arch.image_width;

        let mut buffer = RolloutBuffer {
            t: t_len,
            n,
            obs: Vec::with_capacity(t_len * n * frame_len),
            obs_h: arch.image_height,
            obs_w: arch.image_width,
            actions: Vec::with_capacity(t_len * n),
            log_probs: Vec::with_capacity(t_len * n),
            values: Vec::with_capacity(t_len * n),
            rewards: Vec::with_capacity(t_len * n),
            dones: Vec::with_capacity(t_len * n),
            boot_values: Vec::with_capacity(t_len * n),
            start_h: self.h.clone(),
            start_c: self.c.clone(),
            final_values: Vec::new(),
            cards: Vec::new(),
            card_idx: Vec::with_capacity(if embedding { t_len * n } else { 0 }),
            episode_returns: Vec::new(),
            episode_successes: Vec::new(),
        };
        // Register the cards of episodes carried over from the last rollout.
        if embedding {
            for slot in &mut self.slots {
                slot.card_ref = buffer.cards.len() as u32;
                buffer.cards.push(slot.card_image.clone());
            }
        }

        for _t in 0..t_len {
            let frames: Vec<Image> = (0..n).map(|e| self.render_slot(e)).collect();

            let mut tape = Tape::<f32>::new();
            let vars = policy.bind(&mut tape, false);
            let frame_refs: Vec<&Image> = frames.iter().collect();
            let x = tape.constant(images_to_tensor::<f32>(&frame_refs));
            let latent = policy.perceive_vars(&mut tape, &vars, x)?;
            let input = if embedding {
                let rows: Vec<f32> =
                    self.slots.iter().flat_map(|s| s.card_latent.iter().copied()).collect();
                let cards = tape.constant(TensorData::new(vec![n, arch.latent_dim], rows));
                tape.concat_cols(latent, cards)?
            } else {
                latent
            };
            let hv = tape.constant(self.h.clone());
            let cv = tape.constant(self.c.clone());
            let step_out = policy.infer_vars(&mut tape, &vars, input, hv, cv)?;
            let logits_all = tape.value(step_out.logits).as_slice().to_vec();
            let values_all = tape.value(step_out.value).as_slice().to_vec();
            let mut h_next = tape.value(step_out.h).clone();
            let mut c_next = tape.value(step_out.c).clone();

            for e in 0..n {
                let row = &logits_all[e * Action::COUNT..(e + 1) * Action::COUNT];
                let (action, log_prob) = sample_from_logits(row, &mut self.action_rng);

                buffer.obs.extend_from_slice(&frames[e].to_chw_f32());
                buffer.actions.push(action.index());
                buffer.log_probs.push(log_prob);
                buffer.values.push(values_all[e]);
                if embedding {
                    buffer.card_idx.push(self.slots[e].card_ref);
                }

                let outcome = self.slots[e].episode.step(action);
                buffer.rewards.push(outcome.reward as f32);
                self.slots[e].ret += outcome.reward;

                if outcome.done {
                    buffer.dones.push(1.0);
                    let boot = if outcome.success {
                        0.0
                    } else {
                        // Timeout: the episode was cut, not completed, so the
                        // value target bootstraps from the state the cut
                        // landed on (rendered under the old observation
                        // function, carried recurrent state intact).
                        let img = render(
                            &self.worlds[self.slots[e].world_idx],
                            outcome.pose,
                            &self.slots[e].episode.spec.target,
                            &self.slots[e].obs,
                        );
                        let xb = tape.constant(images_to_tensor::<f32>(&[&img]));
                        let lb = policy.perceive_vars(&mut tape, &vars, xb)?;
                        let ib = if embedding {
                            let card = tape.constant(TensorData::new(
                                vec![1, arch.latent_dim],
                                self.slots[e].card_latent.clone(),
                            ));
                            tape.concat_cols(lb, card)?
                        } else {
                            lb
                        };
                        let hb = tape.narrow(step_out.h, 0, e, 1)?;
                        let cb = tape.narrow(step_out.c, 0, e, 1)?;
                        let vb = policy.infer_vars(&mut tape, &vars, ib, hb, cb)?;
                        tape.value(vb.value).as_slice()[0]
                    };
                    buffer.boot_values.push(boot);
                    buffer.episode_returns.push(self.slots[e].ret);
                    buffer.episode_successes.push(outcome.success);

                    let mut slot = self.fresh_slot(policy, obs_sampler)?;
                    if embedding {
                        slot.card_ref = buffer.cards.len() as u32;
                        buffer.cards.push(slot.card_image.clone());
                    }
                    self.slots[e] = slot;
                    // The fresh episode starts with zero recurrent state.
                    let hidden = arch.hidden;
                    for v in &mut h_next.make_mut()[e * hidden..(e + 1) * hidden] {
                        *v = 0.0;
                    }
                    for v in &mut c_next.make_mut()[e * hidden..(e + 1) * hidden] {
                        *v = 0.0;
                    }
                } else {
                    buffer.dones.push(0.0);
                    buffer.boot_values.push(0.0);
                }
            }
            self.h = h_next;
            self.c = c_next;
        }

        // Tail bootstrap: V(s_T) for streams still mid-episode.
        let frames: Vec<Image> = (0..n).map(|e| self.render_slot(e)).collect();
        let mut tape = Tape::<f32>::new();
        let vars = policy.bind(&mut tape, false);
        let frame_refs: Vec<&Image> = frames.iter().collect();
        let x = tape.constant(images_to_tensor::<f32>(&frame_refs));
        let latent = policy.perceive_vars(&mut tape, &vars, x)?;
        let input = if embedding {
            let rows: Vec<f32> =
                self.slots.iter().flat_map(|s| s.card_latent.iter().copied()).collect();
            let cards = tape.constant(TensorData::new(vec![n, arch.latent_dim], rows));
            tape.concat_cols(latent, cards)?
        } else {
            latent
        };
        let hv = tape.constant(self.h.clone());
        let cv = tape.constant(self.c.clone());
        let step_out = policy.infer_vars(&mut tape, &vars, input, hv, cv)?;
        buffer.final_values = tape.value(step_out.value).as_slice().to_vec();

        Ok(buffer)
    }
}

/// GAE over the buffer: δ_t = r_t + γ·V(s_{t+1})·(continuation) − V(s_t),
/// A_t = δ_t + γλ·(1−done_t)·A_{t+1}, per env stream. Episode ends use the
/// stored bootstrap value (0 for true terminations, V(s_{t+1}) for
/// truncations) and cut the advantage recursion either way.
pub fn compute_gae(buffer: &RolloutBuffer, gamma: f64, lambda: f64) -> (Vec<f32>, Vec<f32>) {
    let (t_len, n) = (buffer.t, buffer.n);
    let mut adv = vec![0.0f32; t_len * n];
    let mut ret = vec![0.0f32; t_len * n];
    for e in 0..n {
        let mut a_next = 0.0f64;
        for t in (0..t_len).rev() {
            let idx = t * n + e;
            let done = buffer.dones[idx] as f64;
            let next_v = if done > 0.0 {
                buffer.boot_values[idx] as f64
            } else if t == t_len - 1 {
                buffer.final_values[e] as f64
            } else {
                buffer.values[idx + n] as f64
            };
            let delta = buffer.rewards[idx] as f64 + gamma * next_v - buffer.values[idx] as f64;
            let a = delta + gamma * lambda * (1.0 - done) * a_next;
            adv[idx] = a as f32;
            ret[idx] = (a + buffer.values[idx] as f64) as f32;
            a_next = a;
        }
    }
    (adv, ret)
}

/// Normalizes advantages to mean 0, std 1 over the whole update batch
/// (left untouched for a single sample, where std is undefined).
pub fn normalize_advantages(adv: &mut [f32]) {
    if adv.len() < 2 {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().map(|&a| a as f64).sum::<f64>() / n;
    let var = adv.iter().map(|&a| (a as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for a in adv.iter_mut() {
        *a = ((*a as f64 - mean) / (std + 1e-8)) as f32;
    }
}

/// The three loss pieces, as tape nodes plus extracted scalars.
pub struct SurrogateParts {
    pub loss: Var,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub max_ratio_dev: f64,
}

/// Clipped PPO surrogate: −mean(min(ρA, clip(ρ)A)) + c_v·mse(V, returns)
/// − c_e·mean(entropy), with ρ = exp(logπ_new − logπ_old).
#[allow(clippy::too_many_arguments)]
pub fn build_ppo_loss<S: Scalar>(
    tape: &mut Tape<S>,
    logits: Var,
    values: Var,
    actions: &[usize],
    old_log_probs: &[S],
    advantages: &[S],
    returns: &[S],
    clip: S,
    value_coef: S,
    entropy_coef: S,
) -> Result<SurrogateParts, TensorError> {
    let b = actions.len();
    let lp_new = tape.categorical_log_prob(logits, actions)?;
    let lp_old = tape.constant(TensorData::new(vec![b], old_log_probs.to_vec()));
    let diff = tape.sub(lp_new, lp_old)?;
    let ratio = tape.exp(diff);
    let adv = tape.constant(TensorData::new(vec![b], advantages.to_vec()));
    let surr1 = tape.mul(ratio, adv)?;
    let clipped = tape.clamp(ratio, S::one() - clip, S::one() + clip);
    let surr2 = tape.mul(clipped, adv)?;
    let surr = tape.minimum(surr1, surr2)?;
    let mean_surr = tape.mean(surr);
    let pg = tape.mul_scalar(mean_surr, -S::one());

    let v_flat = tape.reshape(values, vec![b])?;
    let ret = tape.constant(TensorData::new(vec![b], returns.to_vec()));
    let v_loss = tape.mse_loss(v_flat, ret)?;

    let ent_rows = tape.categorical_entropy(logits)?;
    let ent = tape.mean(ent_rows);

    let v_scaled = tape.mul_scalar(v_loss, value_coef);
    let e_scaled = tape.mul_scalar(ent, -entropy_coef);
    let pv = tape.add(pg, v_scaled)?;
    let loss = tape.add(pv, e_scaled)?;

    let ratio_vals = tape.value(ratio).as_slice();
    let clip_f = clip.as_f64();
    let clip_fraction = ratio_vals.iter().filter(|&&r| (r.as_f64() - 1.0).abs() > clip_f).count()
        as f64
        / b as f64;
    let max_ratio_dev = ratio_vals
        .iter()
        .map(|&r| (r.as_f64() - 1.0).abs())
        .fold(0.0f64, f64::max);
    Ok(SurrogateParts {
        loss,
        policy_loss: tape.value(pg).item().as_f64(),
        value_loss: tape.value(v_loss).item().as_f64(),
        entropy: tape.value(ent).item().as_f64(),
        clip_fraction,
        max_ratio_dev,
    })
}

/// Aggregate statistics of one `ppo_update` call.
#[derive(Debug, Clone, Default)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    /// max |ρ−1| over the very first minibatch, before any gradient step —
    /// identical old/new policies put this at float-noise level.
    pub first_minibatch_max_ratio_dev: f64,
}

/// One PPO update over the buffer: `epochs` passes, each replaying whole env
/// segments in `minibatches` shuffled groups through the LSTM from the
/// stored segment-start hidden states.
pub fn ppo_update(
    policy: &mut Policy,
    adam: &mut AdamState<f32>,
    buffer: &RolloutBuffer,
    cfg: &PPOConfig,
    update_idx: usize,
    shuffle_rng: &mut ChaCha8Rng,
) -> Result<UpdateStats, PpoError> {
    cfg.validate()?;
    let (t_len, n) = (buffer.t, buffer.n);
    let arch = policy.arch().clone();
    let hidden = arch.hidden;
    let embedding = arch.target_embedding;

    let (mut advantages, returns) = compute_gae(buffer, cfg.gamma, cfg.gae_lambda);
    normalize_advantages(&mut advantages);

    let mut stats = UpdateStats::default();
    let mut minibatch_count = 0usize;
    let mut first = true;

    for _epoch in 0..cfg.epochs {
        let mut env_order: Vec<usize> = (0..n).collect();
        env_order.shuffle(shuffle_rng);
        let per_mb = n / cfg.minibatches;

        for group in env_order.chunks(per_mb) {
            let m = group.len();
            let mut tape = Tape::<f32>::new();
            let vars = policy.bind(&mut tape, true);

            // Segment-start hidden states for this group.
            let gather_rows = |src: &TensorData<f32>| {
                let mut rows = Vec::with_capacity(m * hidden);
                for &e in group {
                    rows.extend_from_slice(&src.as_slice()[e * hidden..(e + 1) * hidden]);
                }
                TensorData::new(vec![m, hidden], rows)
            };
            let mut h = tape.constant(gather_rows(&buffer.start_h));
            let mut c = tape.constant(gather_rows(&buffer.start_c));

            // Embedding variant: perceive the card pool once, then gather
            // rows per step so gradients flow through the card encoder too.
            let card_latents = if embedding {
                let card_refs: Vec<&Image> = buffer.cards.iter().collect();
                let cx = tape.constant(images_to_tensor::<f32>(&card_refs));
                Some(policy.perceive_vars(&mut tape, &vars, cx)?)
            } else {
                None
            };

            let frame_len = 3 * buffer.obs_h * buffer.obs_w;
            let mut logits_steps = Vec::with_capacity(t_len);
            let mut value_steps = Vec::with_capacity(t_len);
            for t in 0..t_len {
                let mut rows = Vec::with_capacity(m * frame_len);
                for &e in group {
                    rows.extend_from_slice(buffer.obs_row(t * n + e));
                }
                let x = tape.constant(TensorData::new(
                    vec![m, 3, buffer.obs_h, buffer.obs_w],
                    rows,
                ));
                let latent = policy.perceive_vars(&mut tape, &vars, x)?;
                let input = if let Some(cards) = card_latents {
                    let mut parts = Vec::with_capacity(m);
                    for &e in group {
                        let idx = buffer.card_idx[t * n + e] as usize;
                        parts.push(tape.narrow(cards, 0, idx, 1)?);
                    }
                    let card_rows = tape.stack_rows(&parts)?;
                    tape.concat_cols(latent, card_rows)?
                } else {
                    latent
                };
                let step = policy.infer_vars(&mut tape, &vars, input, h, c)?;
                logits_steps.push(step.logits);
                value_steps.push(step.value);

                // Reset recurrent state where the episode ended at step t.
                let mask: Vec<f32> = group.iter().map(|&e| 1.0 - buffer.dones[t * n + e]).collect();
                let mask = TensorData::new(vec![m], mask);
                h = tape.row_scale(step.h, mask.clone())?;
                c = tape.row_scale(step.c, mask)?;
            }

            let logits = tape.stack_rows(&logits_steps)?;
            let values = tape.stack_rows(&value_steps)?;

            // Gather per-sample targets in stack order (t outer, env inner).
            let mut mb_actions = Vec::with_capacity(t_len * m);
            let mut mb_old = Vec::with_capacity(t_len * m);
            let mut mb_adv = Vec::with_capacity(t_len * m);
            let mut mb_ret = Vec::with_capacity(t_len * m);
            for t in 0..t_len {
                for &e in group {
                    let idx = t * n + e;
                    mb_actions.push(buffer.actions[idx]);
                    mb_old.push(buffer.log_probs[idx]);
                    mb_adv.push(advantages[idx]);
                    mb_ret.push(returns[idx]);
                }
            }

            let parts = build_ppo_loss(
                &mut tape,
                logits,
                values,
                &mb_actions,
                &mb_old,
                &mb_adv,
                &mb_ret,
                cfg.clip,
                cfg.value_coef,
                cfg.entropy_coef,
            )?;
            let loss_val = tape.value(parts.loss).item();
            if !loss_val.is_finite() {
                return Err(PpoError::NonFiniteLoss {
                    update: update_idx,
                    policy_loss: parts.policy_loss,
                    value_loss: parts.value_loss,
                    entropy: parts.entropy,
                });
            }

            let grads = tape.backward(parts.loss)?;
            let mut grad_set = ParamSet::new();
            let var_list = [
                vars.conv_w[0], vars.conv_b[0], vars.conv_w[1], vars.conv_b[1], vars.conv_w[2],
                vars.conv_b[2], vars.proj_w, vars.proj_b, vars.lstm_w_ih, vars.lstm_w_hh,
                vars.lstm_b, vars.actor_w, vars.actor_b, vars.critic_w, vars.critic_b,
            ];
            for (name, var) in PARAM_NAMES.iter().zip(var_list) {
                let shape = policy.params().get(name).expect("canonical name").shape().to_vec();
                grad_set.insert(*name, grads.get(var, &shape))?;
            }
            let norm = clip_grad_norm(&mut grad_set, cfg.max_grad_norm);
            let new_params = adam_step(policy.params(), &grad_set, adam, cfg.lr)?;
            policy.set_params(new_params)?;

            stats.policy_loss += parts.policy_loss;
            stats.value_loss += parts.value_loss;
            stats.entropy += parts.entropy;
            stats.clip_fraction += parts.clip_fraction;
            stats.grad_norm += norm as f64;
            if first {
                stats.first_minibatch_max_ratio_dev = parts.max_ratio_dev;
                first = false;
            }
            minibatch_count += 1;
        }
    }

    let k = minibatch_count.max(1) as f64;
    stats.policy_loss /= k;
    stats.value_loss /= k;
    stats.entropy /= k;
    stats.clip_fraction /= k;
    stats.grad_norm /= k;
    Ok(stats)
}

/// One row of the training curve.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub env_steps: usize,
    /// Rolling mean return over recently completed training episodes.
    pub mean_return: f64,
    /// Greedy success rate on the validation pool.
    pub success_rate: f64,
    /// Greedy SPL on the validation pool.
    pub spl: f64,
    pub wall_clock_s: f64,
}

/// Training curve CSV with columns
/// (env_steps, mean_return, success_rate, spl, wall_clock_s).
pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("env_steps,mean_return,success_rate,spl,wall_clock_s\n");
    for p in curve {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.3}",
            p.env_steps, p.mean_return, p.success_rate, p.spl, p.wall_clock_s
        );
    }
    out
}

pub fn write_curve_csv(path: &Path, curve: &[CurvePoint]) -> Result<(), PpoError> {
    fs::write(path, curve_csv(curve))?;
    Ok(())
}

/// Optional periodic checkpointing during training.
#[derive(Debug, Clone)]
pub struct CheckpointPlan {
    /// Checkpoints are written as `<stem>_<env_steps>.ckpt/.json`.
    pub stem: PathBuf,
    pub every_updates: usize,
}

/// A finished training run.
pub struct TrainResult {
    pub policy: Policy,
    pub curve: Vec<CurvePoint>,
    pub val_cases: Vec<EvalCase>,
}

/// Full PPO training loop. `obs_sampler` draws the per-episode observation
/// function on a dedicated RNG stream (the baseline passes a constant
/// sampler; domain randomization passes the task-family sampler).
pub fn train_policy(
    arch: PolicyArch,
    worlds: &[WorldMap],
    cfg: &PPOConfig,
    obs_sampler: &mut dyn FnMut(&mut ChaCha8Rng) -> ObservationConfig,
    val_obs: &ObservationConfig,
    master_seed: u64,
    checkpoints: Option<&CheckpointPlan>,
) -> Result<TrainResult, PpoError> {
    cfg.validate()?;
    let start = Instant::now();
    let mut policy = Policy::new(arch, master_seed ^ 0x494e_4954_u64)?;
    let mut adam = AdamState::new(policy.params());

    let mut pool_rng = ChaCha8Rng::seed_from_u64(master_seed ^ 0x504f_4f4c_u64);
    let pool =
        build_episode_pool(worlds, cfg.train_episodes, cfg.max_steps_per_episode, &mut pool_rng)?;

    let mut val_rng = ChaCha8Rng::seed_from_u64(master_seed ^ 0x5641_4c53_u64);
    let val_pool =
        build_episode_pool(worlds, cfg.val_episodes, cfg.max_steps_per_episode, &mut val_rng)?;
    let val_cases: Vec<EvalCase> = val_pool
        .into_iter()
        .map(|(world, spec)| EvalCase { world, spec, obs: val_obs.clone() })
        .collect();

    let steps_per_update = cfg.rollout_length * cfg.num_envs;
    let updates = cfg.total_steps / steps_per_update;
    let mut curve = Vec::new();
    if updates == 0 {
        return Ok(TrainResult { policy, curve, val_cases });
    }

    let mut collector =
        RolloutCollector::new(&policy, worlds, pool, cfg, obs_sampler, master_seed)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(master_seed ^ 0x5348_5546_u64);
    let mut recent_returns: VecDeque<f64> = VecDeque::with_capacity(100);

    for update in 0..updates {
        let buffer = collector.collect(&policy, cfg, obs_sampler)?;
        for &r in &buffer.episode_returns {
            if recent_returns.len() == 100 {
                recent_returns.pop_front();
            }
            recent_returns.push_back(r);
        }
        ppo_update(&mut policy, &mut adam, &buffer, cfg, update, &mut shuffle_rng)?;

        let env_steps = (update + 1) * steps_per_update;
        let last = update + 1 == updates;
        if (cfg.eval_every_updates > 0 && (update + 1) % cfg.eval_every_updates == 0) || last {
            let (summary, _) =
                evaluate_policy(&policy, worlds, &val_cases, crate::policy::ActionMode::Greedy)?;
            let mean_return = if recent_returns.is_empty() {
                0.0
            } else {
                recent_returns.iter().sum::<f64>() / recent_returns.len() as f64
            };
            curve.push(CurvePoint {
                env_steps,
                mean_return,
                success_rate: summary.success_rate,
                spl: summary.spl,
                wall_clock_s: start.elapsed().as_secs_f64(),
            });
            if let Some(plan) = checkpoints {
                if plan.every_updates > 0 && (update + 1) % plan.every_updates == 0 && !last {
                    let stem = plan
                        .stem
                        .with_file_name(format!(
                            "{}_{}",
                            plan.stem.file_name().unwrap_or_default().to_string_lossy(),
                            env_steps
                        ));
                    policy.save(&stem)?;
                }
            }
        }
    }

    Ok(TrainResult { policy, curve, val_cases })
}

/// Trains the navigation baseline under the nominal observation function.
pub fn train_baseline(
    worlds: &[WorldMap],
    nominal: &ObservationConfig,
    cfg: &PPOConfig,
    master_seed: u64,
    checkpoints: Option<&CheckpointPlan>,
) -> Result<TrainResult, PpoError> {
    let nominal_clone = nominal.clone();
    let mut sampler = move |_rng: &mut ChaCha8Rng| nominal_clone.clone();
    train_policy(
        PolicyArch::default(),
        worlds,
        cfg,
        &mut sampler,
        nominal,
        master_seed,
        checkpoints,
    )
}
