//! Tiny single-agent MDPs with known closed-form optima, used to verify the
//! Q-learner against value-iteration oracles.

use crate::env::{ActionId, Env, EnvError, ObsVec, StepOutcome, TerminalReason};
use crate::prng::SplitMix64;

/// A small finite MDP played as episodes of a fixed horizon. Observations are
/// one-hot state encodings. Transitions may be stochastic; the transition row
/// for (state, action) lists one probability per successor state.
#[derive(Debug, Clone)]
pub struct FiniteMdp {
    pub num_states: usize,
    pub num_actions: usize,
    /// `rewards[s][a]`
    pub rewards: Vec<Vec<f64>>,
    /// `transitions[s][a][s']`
    pub transitions: Vec<Vec<Vec<f64>>>,
    pub horizon: usize,
    pub start_state: usize,
    state: usize,
    steps: usize,
    rng: SplitMix64,
    done: bool,
}

impl FiniteMdp {
    pub fn new(
        rewards: Vec<Vec<f64>>,
        transitions: Vec<Vec<Vec<f64>>>,
        horizon: usize,
        start_state: usize,
    ) -> Self {
        let num_states = rewards.len();
        let num_actions = rewards[0].len();
        assert_eq!(transitions.len(), num_states);
        for row in &transitions {
            assert_eq!(row.len(), num_actions);
            for dist in row {
                assert_eq!(dist.len(), num_states);
                let total: f64 = dist.iter().sum();
                assert!((total - 1.0).abs() < 1e-9, "transition rows must sum to 1");
            }
        }
        Self {
            num_states,
            num_actions,
            rewards,
            transitions,
            horizon,
            start_state,
            state: start_state,
            steps: 0,
            rng: SplitMix64::new(0),
            done: false,
        }
    }

    /// Two states, two actions, deterministic dynamics: in state 0, action 0
    /// earns 1 and stays, action 1 earns 0 and moves to state 1; in state 1,
    /// action 0 earns 2 and returns to state 0, action 1 earns 0 and stays.
    pub fn two_state(horizon: usize) -> Self {
        let rewards = vec![vec![1.0, 0.0], vec![2.0, 0.0]];
        let transitions = vec![
            vec![
                vec![1.0, 0.0], // s0,a0 -> s0
                vec![0.0, 1.0], // s0,a1 -> s1
            ],
            vec![
                vec![1.0, 0.0], // s1,a0 -> s0
                vec![0.0, 1.0], // s1,a1 -> s1
            ],
        ];
        Self::new(rewards, transitions, horizon, 0)
    }

    /// Infinite-horizon optimal Q by value iteration (test oracle support).
    pub fn value_iteration_q(&self, gamma: f64, sweeps: usize) -> Vec<Vec<f64>> {
        let mut q = vec![vec![0.0; self.num_actions]; self.num_states];
        for _ in 0..sweeps {
            let mut next = q.clone();
            for s in 0..self.num_states {
                for a in 0..self.num_actions {
                    let mut v = self.rewards[s][a];
                    for (s2, &p) in self.transitions[s][a].iter().enumerate() {
                        if p > 0.0 {
                            let best = q[s2].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            v += gamma * p * best;
                        }
                    }
                    next[s][a] = v;
                }
            }
            q = next;
        }
        q
    }
}

impl Env for FiniteMdp {
    fn env_id(&self) -> &str {
        "finite-mdp"
    }

    fn num_players(&self) -> usize {
        1
    }

    fn action_space_size(&self) -> usize {
        self.num_actions
    }

    fn observation_size(&self) -> usize {
        self.num_states
    }

    fn reset(&mut self, seed: u64) -> Vec<ObsVec> {
        self.state = self.start_state;
        self.steps = 0;
        self.rng = SplitMix64::new(seed);
        self.done = false;
        vec![self.observe(0)]
    }

    fn current_player(&self) -> usize {
        0
    }

    fn legal_actions(&self, _player: usize) -> Vec<ActionId> {
        if self.done {
            Vec::new()
        } else {
            (0..self.num_actions).collect()
        }
    }

    fn observe(&self, _player: usize) -> ObsVec {
        let mut obs = vec![0u8; self.num_states];
        obs[self.state] = 1;
        obs
    }

    fn step(&mut self, action: ActionId) -> Result<StepOutcome, EnvError> {
        if self.done {
            return Err(EnvError::Terminal);
        }
        if action >= self.num_actions {
            return Err(EnvError::IllegalAction {
                player: 0,
                action,
                rule: format!("action space is {}", self.num_actions),
            });
        }
        let reward = self.rewards[self.state][action];
        let dist = &self.transitions[self.state][action];
        let draw = (self.rng.next_u64() as f64) / (u64::MAX as f64);
        let mut acc = 0.0;
        let mut next = self.num_states - 1;
        for (s2, &p) in dist.iter().enumerate() {
            acc += p;
            if draw < acc {
                next = s2;
                break;
            }
        }
        self.state = next;
        self.steps += 1;
        self.done = self.steps >= self.horizon;
        Ok(StepOutcome {
            reward,
            done: self.done,
        })
    }

    fn is_done(&self) -> bool {
        self.done
    }

    fn terminal_reason(&self) -> Option<TerminalReason> {
        self.done.then_some(TerminalReason::MaxTurns)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_state_value_iteration_matches_hand_solution() {
        // Optimal cycle: alternate a1 (0) then a0 (2)? Or stay in s0 taking 1
        // forever? With gamma = 0.9 the alternating cycle earns
        // 0 + 0.9*2 + 0.9^2*0 + ... = 1.8/(1-0.81) ≈ 9.47 from s0, while
        // staying earns 1/(1-0.9) = 10, so staying wins.
        let mdp = FiniteMdp::two_state(100);
        let q = mdp.value_iteration_q(0.9, 400);
        let v0 = q[0][0].max(q[0][1]);
        assert!((v0 - 10.0).abs() < 1e-6, "v0 = {v0}");
        assert!(q[0][0] > q[0][1]);
        // From s1, collect 2 then resume the s0 stream.
        assert!((q[1][0] - (2.0 + 0.9 * 10.0)).abs() < 1e-6);
    }

    #[test]
    fn episode_runs_to_horizon() {
        let mut mdp = FiniteMdp::two_state(10);
        mdp.reset(1);
        let mut steps = 0;
        while !mdp.is_done() {
            mdp.step(0).unwrap();
            steps += 1;
        }
        assert_eq!(steps, 10);
        assert_eq!(mdp.terminal_reason(), Some(TerminalReason::MaxTurns));
    }
}
