//! Seat policies and the episode runner shared by training and evaluation.

use crate::env::{
    encode_aoh, ActionId, AOHistory, Env, EnvError, Trajectory,
};
use crate::learner::QFunction;
use crate::prng::derive_seed;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A policy for one seat. Implementations are read-only at act time; all
/// randomness flows through the runner-owned generator.
pub trait Agent<E: Env> {
    fn act(&self, env: &E, seat: usize, aoh: &AOHistory, rng: &mut ChaCha8Rng) -> ActionId;

    /// Q-values over the full action space at this decision, when available.
    fn q_values(&self, _env: &E, _seat: usize, _aoh: &AOHistory) -> Option<Vec<f64>> {
        None
    }

    /// Action distribution this policy plays at the decision, over the full
    /// action space. Defaults to none for opaque policies.
    fn action_distribution(&self, _env: &E, _seat: usize, _aoh: &AOHistory) -> Option<Vec<f64>> {
        None
    }
}

/// Uniform random over legal actions — the hierarchy's level 0.
#[derive(Debug, Clone, Default)]
pub struct UniformPolicy;

impl<E: Env> Agent<E> for UniformPolicy {
    fn act(&self, env: &E, seat: usize, _aoh: &AOHistory, rng: &mut ChaCha8Rng) -> ActionId {
        let legal = env.legal_actions(seat);
        legal[rng.gen_range(0..legal.len())]
    }

    fn action_distribution(&self, env: &E, seat: usize, _aoh: &AOHistory) -> Option<Vec<f64>> {
        let legal = env.legal_actions(seat);
        let mut dist = vec![0.0; env.action_space_size()];
        for &a in &legal {
            dist[a] = 1.0 / legal.len() as f64;
        }
        Some(dist)
    }
}

/// Greedy action among `legal`, ties broken lexicographically by action id.
pub fn greedy_among(q_values: &[f64], legal: &[ActionId]) -> ActionId {
    debug_assert!(!legal.is_empty());
    let mut best = legal[0];
    for &a in legal {
        if q_values[a] > q_values[best] {
            best = a;
        }
    }
    best
}

/// Epsilon-greedy distribution over the full action space with support on
/// `legal`: the greedy action gets `1 - eps + eps/|legal|`.
pub fn epsilon_greedy_distribution(
    q_values: &[f64],
    legal: &[ActionId],
    epsilon: f64,
    action_space: usize,
) -> Vec<f64> {
    let mut dist = vec![0.0; action_space];
    let share = epsilon / legal.len() as f64;
    for &a in legal {
        dist[a] = share;
    }
    dist[greedy_among(q_values, legal)] += 1.0 - epsilon;
    dist
}

/// Epsilon-greedy wrapper around a Q-function over encoded history windows.
#[derive(Debug, Clone)]
pub struct QPolicy {
    pub q: QFunction,
    pub epsilon: f64,
    /// History window length fed to the Q-function.
    pub horizon: usize,
}

impl QPolicy {
    pub fn greedy(q: QFunction, horizon: usize) -> Self {
        Self {
            q,
            epsilon: 0.0,
            horizon,
        }
    }

    pub fn encode<E: Env>(&self, env: &E, aoh: &AOHistory) -> Vec<u8> {
        encode_aoh(aoh, self.horizon, env.observation_size(), env.action_space_size())
    }
}

impl<E: Env> Agent<E> for QPolicy {
    fn act(&self, env: &E, seat: usize, aoh: &AOHistory, rng: &mut ChaCha8Rng) -> ActionId {
        let legal = env.legal_actions(seat);
        if self.epsilon > 0.0 && rng.gen::<f64>() < self.epsilon {
            return legal[rng.gen_range(0..legal.len())];
        }
        let values = self.q.values(&self.encode(env, aoh));
        greedy_among(&values, &legal)
    }

    fn q_values(&self, env: &E, _seat: usize, aoh: &AOHistory) -> Option<Vec<f64>> {
        Some(self.q.values(&self.encode(env, aoh)))
    }

    fn action_distribution(&self, env: &E, seat: usize, aoh: &AOHistory) -> Option<Vec<f64>> {
        let legal = env.legal_actions(seat);
        let values = self.q.values(&self.encode(env, aoh));
        Some(epsilon_greedy_distribution(
            &values,
            &legal,
            self.epsilon,
            env.action_space_size(),
        ))
    }
}

/// Legal-action set captured at one decision, in turn order.
#[derive(Debug, Clone)]
pub struct DecisionRecord {
    pub seat: usize,
    pub legal: Vec<ActionId>,
}

/// A finished episode plus the per-decision context the learner needs.
#[derive(Debug, Clone)]
pub struct Episode {
    pub trajectory: Trajectory,
    pub decisions: Vec<DecisionRecord>,
}

/// Plays one full episode with the given seat policies.
///
/// The environment is reset with `seed`; agent randomness is drawn from a
/// stream derived from the same seed, so episodes are fully reproducible.
pub fn run_episode<E: Env>(
    env: &mut E,
    agents: &[&dyn Agent<E>],
    seed: u64,
    padded_length: u32,
) -> Result<Episode, EnvError> {
    let num_players = env.num_players();
    assert_eq!(agents.len(), num_players, "one agent per seat");
    env.reset(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xE9));

    let mut aohs: Vec<AOHistory> = (0..num_players).map(AOHistory::new).collect();
    let mut pending: Vec<f64> = vec![0.0; num_players];
    let mut has_acted = vec![false; num_players];
    let mut actions = Vec::new();
    let mut rewards = Vec::new();
    let mut decisions = Vec::new();

    loop {
        let seat = env.current_player();
        // Close the seat's previous frame with the reward accrued since.
        if has_acted[seat] {
            aohs[seat].set_last_reward(pending[seat]);
        }
        aohs[seat].push_observation(env.observe(seat));
        let legal = env.legal_actions(seat);
        debug_assert!(!legal.is_empty(), "no legal actions for seat {seat}");
        let action = agents[seat].act(env, seat, &aohs[seat], &mut rng);
        decisions.push(DecisionRecord {
            seat,
            legal,
        });
        let outcome = env.step(action)?;
        aohs[seat].set_last_action(action);
        // Rewards earned before a seat's first action belong to no frame.
        pending[seat] = 0.0;
        has_acted[seat] = true;
        for (p, acc) in pending.iter_mut().enumerate() {
            if has_acted[p] {
                *acc += outcome.reward;
            }
        }
        actions.push(action);
        rewards.push(outcome.reward);
        if outcome.done {
            break;
        }
    }

    for seat in 0..num_players {
        if has_acted[seat] {
            aohs[seat].set_last_reward(pending[seat]);
        }
        // Terminal observation frame closes every history.
        aohs[seat].push_observation(env.observe(seat));
    }

    let total_return: f64 = rewards.iter().sum();
    let trajectory = Trajectory {
        env_id: env.env_id().to_string(),
        env_seed: seed,
        num_players,
        aoh_per_agent: aohs,
        actions,
        rewards,
        total_return,
        terminal_reason: env.terminal_reason().expect("episode finished"),
        padded_length,
    };
    Ok(Episode {
        trajectory,
        decisions,
    })
}

/// Shannon entropy of a distribution, in nats.
pub fn entropy(dist: &[f64]) -> f64 {
    dist.iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::{MatrixEnv, MatrixGame};

    #[test]
    fn greedy_breaks_ties_lexicographically() {
        let q = [0.5, 1.0, 1.0, 0.2];
        assert_eq!(greedy_among(&q, &[0, 1, 2, 3]), 1);
        assert_eq!(greedy_among(&q, &[2, 3]), 2);
    }

    #[test]
    fn epsilon_distribution_sums_to_one() {
        let q = [0.0, 2.0, 1.0];
        let d = epsilon_greedy_distribution(&q, &[0, 1, 2], 0.3, 3);
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((d[1] - (0.7 + 0.1)).abs() < 1e-12);
    }

    #[test]
    fn episode_on_matrix_env_records_both_seats() {
        let game = MatrixGame::diagonal("d", &[2.0, 1.0]).unwrap();
        let mut env = MatrixEnv::new(game);
        let uniform = UniformPolicy;
        let ep = run_episode(&mut env, &[&uniform, &uniform], 3, 80).unwrap();
        assert_eq!(ep.trajectory.actions.len(), 2);
        assert_eq!(ep.decisions.len(), 2);
        assert_eq!(ep.trajectory.aoh_per_agent[0].decisions().count(), 1);
        assert_eq!(ep.trajectory.aoh_per_agent[1].decisions().count(), 1);
        // Same seed reproduces the same episode.
        let mut env2 = MatrixEnv::new(MatrixGame::diagonal("d", &[2.0, 1.0]).unwrap());
        let ep2 = run_episode(&mut env2, &[&uniform, &uniform], 3, 80).unwrap();
        assert_eq!(ep.trajectory, ep2.trajectory);
    }

    #[test]
    fn entropy_of_uniform_and_point_mass() {
        assert!((entropy(&[0.5, 0.5]) - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(entropy(&[1.0, 0.0]), 0.0);
    }
}
