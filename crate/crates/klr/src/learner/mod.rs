//! Independent Q-learning with n-step double-Q targets, per-actor epsilon
//! schedule, prioritized trajectory replay, and two function approximators
//! (exact tabular, small MLP with hand-written gradients).

mod mlp;
mod qfunction;
mod replay;

pub use mlp::{Adam, ForwardCache, MlpGrads, MlpNet};
pub use qfunction::{hex, Checkpoint, CheckpointError, QFunction, QVariant};
pub use replay::{PrioritizedReplay, SampleRef};

use crate::env::{encode_aoh_at_decision, ActionId, Env};
use crate::policy::{greedy_among, Agent, Episode, QPolicy};
use crate::prng::derive_seed;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("config error: {0}")]
    Config(String),
    #[error("argument error: {0}")]
    Argument(String),
}

/// Training hyperparameters. Defaults are the reference Hanabi values;
/// desk-scale presets override them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnerConfig {
    pub gamma: f64,
    pub n_step: usize,
    pub target_sync_interval: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_eps: f64,
    pub gradient_clip: f64,
    pub replay_capacity: usize,
    pub burn_in_frames: usize,
    pub priority_exponent: f64,
    pub importance_weight_exponent: f64,
    pub max_trajectory_length: usize,
    pub epsilon_alpha: f64,
    pub epsilon_beta: f64,
    pub num_actors: usize,
    /// Gradient steps between refreshes of the simulation-side policy.
    pub sim_refresh_interval: usize,
    /// Function approximator.
    pub variant: QVariant,
    /// AOH window length fed to the Q-function.
    pub horizon: usize,
    /// Episodes generated per gradient step.
    pub episodes_per_step: usize,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            gamma: 0.999,
            n_step: 3,
            target_sync_interval: 2500,
            batch_size: 128,
            learning_rate: 6.25e-5,
            adam_eps: 1.5e-5,
            gradient_clip: 5.0,
            replay_capacity: 1 << 17,
            burn_in_frames: 10_000,
            priority_exponent: 0.9,
            importance_weight_exponent: 0.6,
            max_trajectory_length: 80,
            epsilon_alpha: 0.1,
            epsilon_beta: 7.0,
            num_actors: 80,
            sim_refresh_interval: 10,
            variant: QVariant::Tabular,
            horizon: 1,
            episodes_per_step: 1,
        }
    }
}

impl LearnerConfig {
    /// Small tabular setup for mini environments.
    pub fn desk_tabular() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 0.05,
            replay_capacity: 4096,
            burn_in_frames: 1000,
            num_actors: 8,
            ..Self::default()
        }
    }
}

/// Per-actor exploration rate `alpha^(1 + beta * i / (N - 1))`.
pub fn epsilon_for_actor(actor: usize, config: &LearnerConfig) -> Result<f64, LearnerError> {
    let n = config.num_actors;
    if n < 2 {
        return Err(LearnerError::Config(format!(
            "epsilon schedule needs at least 2 actors, got {n}"
        )));
    }
    if actor >= n {
        return Err(LearnerError::Argument(format!(
            "actor index {actor} out of range for {n} actors"
        )));
    }
    let exponent = 1.0 + config.epsilon_beta * actor as f64 / (n as f64 - 1.0);
    Ok(config.epsilon_alpha.powf(exponent))
}

/// Trajectory priority `0.9 * max_i |ξ_i| + 0.1 * mean_i |ξ_i|` over per-step
/// TD errors.
pub fn trajectory_priority(step_td_errors: &[f64]) -> Result<f64, LearnerError> {
    if step_td_errors.is_empty() {
        return Err(LearnerError::Argument(
            "trajectory priority over an empty error list".into(),
        ));
    }
    let mut max = 0.0f64;
    let mut sum = 0.0f64;
    for &e in step_td_errors {
        let a = e.abs();
        max = max.max(a);
        sum += a;
    }
    Ok(0.9 * max + 0.1 * sum / step_td_errors.len() as f64)
}

/// One seat's learning view of an episode: encoded decision windows, the
/// actions taken, rewards accrued until the next own decision, and the legal
/// action sets needed for masked bootstrapping. Episodes are complete, so the
/// final decision always truncates the bootstrap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeatRollout {
    pub seat: usize,
    pub states: Vec<Vec<u8>>,
    pub actions: Vec<ActionId>,
    pub rewards: Vec<f64>,
    pub legal: Vec<Vec<ActionId>>,
}

impl SeatRollout {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Extracts the learning view for `seat` from a finished episode.
    pub fn from_episode(
        episode: &Episode,
        seat: usize,
        horizon: usize,
        obs_size: usize,
        num_actions: usize,
    ) -> Self {
        let aoh = &episode.trajectory.aoh_per_agent[seat];
        let mut states = Vec::new();
        let mut actions = Vec::new();
        let mut rewards = Vec::new();
        for (frame, action, reward) in aoh.decisions() {
            states.push(encode_aoh_at_decision(
                aoh,
                frame,
                horizon,
                obs_size,
                num_actions,
            ));
            actions.push(action);
            rewards.push(reward);
        }
        let legal: Vec<Vec<ActionId>> = episode
            .decisions
            .iter()
            .filter(|d| d.seat == seat)
            .map(|d| d.legal.clone())
            .collect();
        debug_assert_eq!(legal.len(), actions.len());
        SeatRollout {
            seat,
            states,
            actions,
            rewards,
            legal,
        }
    }
}

/// n-step double-Q target at decision `t`:
/// `Σ_{j=0}^{n-1} γ^j r_{t+j} + γ^n Q_target(s_{t+n}, argmax_a Q_online(s_{t+n}, a))`,
/// with the bootstrap dropped when `t+n` runs past the final decision. The
/// argmax ranges over the legal actions recorded at the bootstrap decision.
pub fn nstep_double_q_target(
    rollout: &SeatRollout,
    t: usize,
    online: &QFunction,
    target: &QFunction,
    config: &LearnerConfig,
) -> f64 {
    let len = rollout.len();
    debug_assert!(t < len);
    let n = config.n_step.max(1);
    let end = (t + n).min(len);
    let mut value = 0.0;
    let mut discount = 1.0;
    for j in t..end {
        value += discount * rollout.rewards[j];
        discount *= config.gamma;
    }
    if end < len {
        let state = &rollout.states[end];
        let greedy = greedy_among(&online.values(state), &rollout.legal[end]);
        value += discount * target.values(state)[greedy];
    }
    value
}

/// TD errors (target minus current estimate) for every decision in a rollout,
/// computed against a frozen online function.
pub fn td_errors(
    rollout: &SeatRollout,
    online: &QFunction,
    target: &QFunction,
    config: &LearnerConfig,
) -> Vec<f64> {
    (0..rollout.len())
        .map(|t| {
            let estimate = online.values(&rollout.states[t])[rollout.actions[t]];
            nstep_double_q_target(rollout, t, online, target, config) - estimate
        })
        .collect()
}

/// One batch element: a rollout and its importance weight.
pub struct BatchItem<'a> {
    pub rollout: &'a SeatRollout,
    pub importance_weight: f64,
}

/// One optimizer step over a batch. TD errors are computed against the
/// pre-update online function; the tabular variant applies per-key weighted
/// TD updates with the learning rate as step size, the MLP variant minimizes
/// the weighted squared error with Adam under a global-norm gradient clip.
/// Returns the refreshed per-trajectory priorities.
pub fn gradient_step(
    batch: &[BatchItem],
    online: &mut QFunction,
    target: &QFunction,
    adam: Option<&mut Adam>,
    config: &LearnerConfig,
) -> Vec<f64> {
    assert!(!batch.is_empty(), "gradient step over an empty batch");
    let mut priorities = Vec::with_capacity(batch.len());
    let all_errors: Vec<Vec<f64>> = batch
        .iter()
        .map(|item| td_errors(item.rollout, online, target, config))
        .collect();
    for errors in &all_errors {
        priorities.push(trajectory_priority(errors).expect("non-empty rollout"));
    }

    match online {
        QFunction::Tabular { .. } => {
            for (item, errors) in batch.iter().zip(&all_errors) {
                for (t, &td) in errors.iter().enumerate() {
                    online.tabular_update(
                        &item.rollout.states[t],
                        item.rollout.actions[t],
                        config.learning_rate * item.importance_weight * td,
                    );
                }
            }
        }
        QFunction::Mlp(net) => {
            let adam = adam.expect("MLP variant requires optimizer state");
            let total_steps: usize = batch.iter().map(|i| i.rollout.len()).sum();
            let scale = 1.0 / total_steps.max(1) as f64;
            let mut grads = MlpGrads::zeros_like(net);
            for (item, errors) in batch.iter().zip(&all_errors) {
                for (t, &td) in errors.iter().enumerate() {
                    let input: Vec<f64> = item.rollout.states[t]
                        .iter()
                        .map(|&b| b as f64)
                        .collect();
                    let cache = net.forward_cached(&input);
                    let mut output_grad = vec![0.0; net.output_size()];
                    // d/dQ of iw * td^2 with td = target - Q.
                    output_grad[item.rollout.actions[t]] =
                        -2.0 * item.importance_weight * td * scale;
                    let step_grads = net.backward(&input, &cache, &output_grad);
                    grads.add(&step_grads);
                }
            }
            grads.clip_global_norm(config.gradient_clip);
            adam.step(net, &grads);
        }
    }
    priorities
}

/// Plays one episode with the given per-seat policies and returns its record.
/// Epsilon-greedy exploration happens inside the seat policies; histories are
/// recorded per agent and the caller pads on insertion into replay.
pub fn run_actor<E: Env>(
    env: &mut E,
    agents: &[&dyn Agent<E>],
    seed: u64,
    config: &LearnerConfig,
) -> Result<Episode, crate::env::EnvError> {
    crate::policy::run_episode(env, agents, seed, config.max_trajectory_length as u32)
}

/// A single level's learner: online and target functions, optimizer state,
/// replay, and the simulation-side policy snapshot refreshed every
/// `sim_refresh_interval` gradient steps.
pub struct QLearner {
    pub config: LearnerConfig,
    pub obs_size: usize,
    pub num_actions: usize,
    pub online: QFunction,
    pub target: QFunction,
    pub adam: Option<Adam>,
    pub replay: PrioritizedReplay<SeatRollout>,
    pub grad_steps: u64,
    pub sim_policy: QFunction,
    pub sim_refreshes: u64,
    pub target_syncs: u64,
}

impl QLearner {
    pub fn new(config: LearnerConfig, obs_size: usize, num_actions: usize, seed: u64) -> Self {
        let input_size =
            crate::env::frame_width(obs_size, num_actions) * config.horizon;
        let online = match &config.variant {
            QVariant::Tabular => QFunction::new_tabular(num_actions),
            QVariant::Mlp { hidden } => {
                QFunction::new_mlp(input_size, hidden, num_actions, derive_seed(seed, 0x31))
            }
        };
        let adam = match &online {
            QFunction::Mlp(net) => Some(Adam::new(net, config.learning_rate, config.adam_eps)),
            QFunction::Tabular { .. } => None,
        };
        let replay = PrioritizedReplay::new(
            config.replay_capacity,
            config.priority_exponent,
            config.importance_weight_exponent,
        );
        Self {
            obs_size,
            num_actions,
            target: online.clone(),
            sim_policy: online.clone(),
            online,
            adam,
            replay,
            grad_steps: 0,
            sim_refreshes: 0,
            target_syncs: 0,
            config,
        }
    }

    /// Inserts one seat's view of an episode; the initial priority comes from
    /// the TD errors under the current online/target pair.
    pub fn insert_episode(&mut self, episode: &Episode, seat: usize) {
        let rollout = SeatRollout::from_episode(
            episode,
            seat,
            self.config.horizon,
            self.obs_size,
            self.num_actions,
        );
        if rollout.is_empty() {
            return;
        }
        let errors = td_errors(&rollout, &self.online, &self.target, &self.config);
        let priority = trajectory_priority(&errors).expect("non-empty rollout");
        let frames = rollout.len();
        self.replay.insert(rollout, priority, frames);
    }

    /// Burn-in gate: no gradient steps until enough transitions are buffered.
    pub fn ready_to_train(&self) -> bool {
        self.replay.frames_inserted() >= self.config.burn_in_frames && !self.replay.is_empty()
    }

    /// Samples a batch, applies one gradient step, refreshes priorities, and
    /// advances the target-sync and simulation-refresh cadences.
    pub fn train_step<R: Rng>(&mut self, rng: &mut R) {
        let samples = self.replay.sample(self.config.batch_size, rng);
        let rollouts: Vec<SeatRollout> = samples
            .iter()
            .map(|s| self.replay.with_item(s.index, |r| r.clone()))
            .collect();
        let batch: Vec<BatchItem> = rollouts
            .iter()
            .zip(&samples)
            .map(|(rollout, s)| BatchItem {
                rollout,
                importance_weight: s.importance_weight,
            })
            .collect();
        let priorities = gradient_step(
            &batch,
            &mut self.online,
            &self.target,
            self.adam.as_mut(),
            &self.config,
        );
        for (s, p) in samples.iter().zip(priorities) {
            self.replay.update_priority(s.index, p);
        }
        self.grad_steps += 1;
        if self.grad_steps % self.config.target_sync_interval as u64 == 0 {
            self.target = self.online.clone();
            self.target_syncs += 1;
        }
        if self.grad_steps % self.config.sim_refresh_interval as u64 == 0 {
            self.refresh_sim_policy();
        }
    }

    pub fn refresh_sim_policy(&mut self) {
        self.sim_policy = self.online.clone();
        self.sim_refreshes += 1;
    }

    /// Epsilon-greedy actor policy for the given actor slot, wrapping the
    /// current simulation snapshot.
    pub fn actor_policy(&self, actor: usize) -> Result<QPolicy, LearnerError> {
        Ok(QPolicy {
            q: self.sim_policy.clone(),
            epsilon: epsilon_for_actor(actor, &self.config)?,
            horizon: self.config.horizon,
        })
    }

    /// Greedy policy over the current online function.
    pub fn greedy_policy(&self) -> QPolicy {
        QPolicy::greedy(self.online.clone(), self.config.horizon)
    }
}
