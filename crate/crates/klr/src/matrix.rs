//! One-shot common-payoff matrix games with exact level oracles.
//!
//! These games verify trained hierarchy levels against closed-form best
//! responses. The game is wrapped as a two-step turn-based environment:
//! agent 0 picks a row, agent 1 picks a column without observing the row, and
//! both receive the matrix payoff — preserving simultaneous-move semantics.

use crate::env::{ActionId, ActionKind, Env, EnvError, ObsVec, StepOutcome, TerminalReason};
use crate::hierarchy::poisson_pmf;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MatrixError {
    #[error("matrix parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("matrix must be square and at least 2x2, got {rows}x{cols}")]
    Shape { rows: usize, cols: usize },
    #[error("payoffs must be finite")]
    NonFinite,
}

/// Common-payoff matrix game: row player is agent 0, column player agent 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixGame {
    pub name: String,
    pub payoff: Vec<Vec<f64>>,
}

impl MatrixGame {
    pub fn new(name: impl Into<String>, payoff: Vec<Vec<f64>>) -> Result<Self, MatrixError> {
        let rows = payoff.len();
        let cols = payoff.first().map_or(0, |r| r.len());
        if rows < 2 || rows != cols || payoff.iter().any(|r| r.len() != cols) {
            return Err(MatrixError::Shape { rows, cols });
        }
        if payoff.iter().flatten().any(|v| !v.is_finite()) {
            return Err(MatrixError::NonFinite);
        }
        Ok(Self {
            name: name.into(),
            payoff,
        })
    }

    /// Diagonal game: `payoff[i][i] = diag[i]`, zero elsewhere.
    pub fn diagonal(name: impl Into<String>, diag: &[f64]) -> Result<Self, MatrixError> {
        let n = diag.len();
        let mut payoff = vec![vec![0.0; n]; n];
        for (i, &v) in diag.iter().enumerate() {
            payoff[i][i] = v;
        }
        Self::new(name, payoff)
    }

    pub fn size(&self) -> usize {
        self.payoff.len()
    }

    pub fn is_symmetric(&self) -> bool {
        let n = self.size();
        (0..n).all(|i| (0..n).all(|j| (self.payoff[i][j] - self.payoff[j][i]).abs() < 1e-12))
    }

    /// Row player's expected payoff per own action against a column mixture.
    pub fn expected_payoffs(&self, opponent: &[f64]) -> Vec<f64> {
        assert_eq!(opponent.len(), self.size());
        self.payoff
            .iter()
            .map(|row| row.iter().zip(opponent).map(|(p, w)| p * w).sum())
            .collect()
    }

    /// Parses a whitespace-separated matrix; `#` starts a comment.
    pub fn parse(name: impl Into<String>, text: &str) -> Result<Self, MatrixError> {
        let mut rows = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let row: Result<Vec<f64>, _> = line
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>().map_err(|e| MatrixError::Parse {
                        line: lineno + 1,
                        msg: format!("{tok:?}: {e}"),
                    })
                })
                .collect();
            rows.push(row?);
        }
        Self::new(name, rows)
    }
}

/// Deterministic argmax with lexicographic tie-breaking, as a point mass.
fn argmax_point_mass(values: &[f64]) -> Vec<f64> {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    let mut policy = vec![0.0; values.len()];
    policy[best] = 1.0;
    policy
}

/// Exact k-level policy: level 0 is uniform, level k is the deterministic
/// best response (lexicographic ties) to level k-1.
pub fn exact_klr_level(game: &MatrixGame, k: usize) -> Vec<f64> {
    let n = game.size();
    let mut policy = vec![1.0 / n as f64; n];
    for _ in 0..k {
        policy = argmax_point_mass(&game.expected_payoffs(&policy));
    }
    policy
}

/// Exact cognitive-hierarchy policy at level `k >= 1`: best response to the
/// Poisson(λ)-weighted mixture over the partner levels below `k`, using the
/// same truncation rule as training (level 0 excluded once level 1 exists;
/// level 1's sole partner is level 0).
pub fn exact_ch_level(game: &MatrixGame, k: usize, lambda: f64) -> Vec<f64> {
    assert!(k >= 1, "cognitive hierarchy levels start at 1");
    let n = game.size();
    if k == 1 {
        return exact_klr_level(game, 1);
    }
    let weights = ch_mixture_weights(k, lambda);
    let mut mixture = vec![0.0; n];
    for (level, w) in weights {
        let policy = exact_ch_policy_closure(game, level, lambda);
        for (m, p) in mixture.iter_mut().zip(&policy) {
            *m += w * p;
        }
    }
    argmax_point_mass(&game.expected_payoffs(&mixture))
}

/// Poisson mixture weights over partner levels `1..k`, normalized.
fn ch_mixture_weights(k: usize, lambda: f64) -> Vec<(usize, f64)> {
    let raw: Vec<(usize, f64)> = (1..k).map(|j| (j, poisson_pmf(lambda, j as u64))).collect();
    let total: f64 = raw.iter().map(|(_, w)| w).sum();
    raw.into_iter().map(|(j, w)| (j, w / total)).collect()
}

/// The policy an exact CH agent at `level` actually plays (levels below `k`
/// in the mixture are themselves CH policies; level 1 responds to uniform).
fn exact_ch_policy_closure(game: &MatrixGame, level: usize, lambda: f64) -> Vec<f64> {
    if level == 0 {
        let n = game.size();
        return vec![1.0 / n as f64; n];
    }
    exact_ch_level(game, level, lambda)
}

/// Mixture weights the exact CH oracle uses for a level-`k` agent, exposed
/// for normalization checks.
pub fn exact_ch_weights(k: usize, lambda: f64) -> Vec<(usize, f64)> {
    if k == 1 {
        return vec![(0, 1.0)];
    }
    ch_mixture_weights(k, lambda)
}

/// Two-step environment wrapper. Observations are a constant marker bit plus
/// a seat bit, so histories never alias between seats.
#[derive(Debug, Clone)]
pub struct MatrixEnv {
    game: MatrixGame,
    pending_row: Option<usize>,
    steps_taken: usize,
    done: bool,
    reward_emitted: f64,
}

impl MatrixEnv {
    pub fn new(game: MatrixGame) -> Self {
        Self {
            game,
            pending_row: None,
            steps_taken: 0,
            done: false,
            reward_emitted: 0.0,
        }
    }

    pub fn game(&self) -> &MatrixGame {
        &self.game
    }
}

impl Env for MatrixEnv {
    fn env_id(&self) -> &str {
        "matrix"
    }

    fn num_players(&self) -> usize {
        2
    }

    fn action_space_size(&self) -> usize {
        self.game.size()
    }

    fn observation_size(&self) -> usize {
        2
    }

    fn reset(&mut self, _seed: u64) -> Vec<ObsVec> {
        self.pending_row = None;
        self.steps_taken = 0;
        self.done = false;
        self.reward_emitted = 0.0;
        vec![vec![1, 0], vec![1, 1]]
    }

    fn current_player(&self) -> usize {
        self.steps_taken
    }

    fn legal_actions(&self, _player: usize) -> Vec<ActionId> {
        if self.done {
            return Vec::new();
        }
        (0..self.game.size()).collect()
    }

    fn observe(&self, player: usize) -> ObsVec {
        // The column player never observes the row: both seats see only a
        // constant marker and their seat id.
        vec![1, player as u8]
    }

    fn step(&mut self, action: ActionId) -> Result<StepOutcome, EnvError> {
        if self.done {
            return Err(EnvError::Terminal);
        }
        if action >= self.game.size() {
            return Err(EnvError::IllegalAction {
                player: self.current_player(),
                action,
                rule: format!("action space is {}", self.game.size()),
            });
        }
        match self.pending_row {
            None => {
                self.pending_row = Some(action);
                self.steps_taken = 1;
                Ok(StepOutcome {
                    reward: 0.0,
                    done: false,
                })
            }
            Some(row) => {
                let reward = self.game.payoff[row][action];
                self.done = true;
                self.reward_emitted = reward;
                Ok(StepOutcome { reward, done: true })
            }
        }
    }

    fn is_done(&self) -> bool {
        self.done
    }

    fn terminal_reason(&self) -> Option<TerminalReason> {
        self.done.then_some(TerminalReason::MaxTurns)
    }

    fn action_kind(&self, _action: ActionId) -> ActionKind {
        ActionKind::Other
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_zero_is_uniform() {
        let game = MatrixGame::diagonal("d", &[2.0, 1.0]).unwrap();
        assert_eq!(exact_klr_level(&game, 0), vec![0.5, 0.5]);
    }

    #[test]
    fn lever_game_level_one_avoids_odd_lever() {
        // Three levers worth [0.9, 1, 1] on the diagonal: against uniform the
        // expected payoffs are [0.3, 1/3, 1/3] and the lexicographic argmax
        // picks action 1.
        let game = MatrixGame::diagonal("lever", &[0.9, 1.0, 1.0]).unwrap();
        let payoffs = game.expected_payoffs(&[1.0 / 3.0; 3]);
        assert!((payoffs[0] - 0.3).abs() < 1e-12);
        assert!((payoffs[1] - 1.0 / 3.0).abs() < 1e-12);
        let level1 = exact_klr_level(&game, 1);
        assert_eq!(level1, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn diagonal_two_by_two_fixed_point() {
        let game = MatrixGame::diagonal("d", &[2.0, 1.0]).unwrap();
        assert_eq!(exact_klr_level(&game, 1), vec![1.0, 0.0]);
        assert_eq!(exact_klr_level(&game, 2), vec![1.0, 0.0]);
    }

    #[test]
    fn klr_fixed_point_propagates() {
        // Once two consecutive levels agree, all higher levels agree too.
        // (Best-response dynamics may also cycle without ever reaching a
        // fixed point; the implication is what must hold.)
        let games = [
            MatrixGame::diagonal("diag", &[2.0, 1.0, 0.5]).unwrap(),
            MatrixGame::new(
                "cycling",
                vec![
                    vec![0.3, 0.8, 0.1],
                    vec![0.8, 0.2, 0.5],
                    vec![0.1, 0.5, 0.9],
                ],
            )
            .unwrap(),
        ];
        let mut saw_fixed_point = false;
        for game in &games {
            for k in 1..8 {
                if exact_klr_level(game, k) == exact_klr_level(game, k + 1) {
                    saw_fixed_point = true;
                    for extra in k + 2..k + 6 {
                        assert_eq!(exact_klr_level(game, extra), exact_klr_level(game, k));
                    }
                }
            }
        }
        assert!(saw_fixed_point, "diagonal game fixes at level 1");
    }

    #[test]
    fn ch_level_one_matches_klr() {
        let game = MatrixGame::diagonal("d", &[2.0, 1.0]).unwrap();
        assert_eq!(exact_ch_level(&game, 1, 2.0), exact_klr_level(&game, 1));
    }

    #[test]
    fn ch_level_two_diagonal() {
        let game = MatrixGame::diagonal("d", &[2.0, 1.0]).unwrap();
        assert_eq!(exact_ch_level(&game, 2, 2.0), vec![1.0, 0.0]);
    }

    #[test]
    fn ch_weights_normalize() {
        for k in 1..8 {
            for &lambda in &[0.5, 1.0, 2.0, 3.5] {
                let total: f64 = exact_ch_weights(k, lambda).iter().map(|(_, w)| w).sum();
                assert!((total - 1.0).abs() < 1e-12, "k={k} lambda={lambda}");
            }
        }
    }

    #[test]
    fn parse_matrix_file() {
        let text = "# a comment\n 2 0 \n 0 1  # trailing\n";
        let game = MatrixGame::parse("parsed", text).unwrap();
        assert_eq!(game.payoff, vec![vec![2.0, 0.0], vec![0.0, 1.0]]);
        assert!(MatrixGame::parse("bad", "1 2\n3").is_err());
    }

    #[test]
    fn env_wrapper_plays_one_joint_round() {
        let game = MatrixGame::diagonal("d", &[2.0, 1.0]).unwrap();
        let mut env = MatrixEnv::new(game);
        env.reset(0);
        assert_eq!(env.current_player(), 0);
        let o = env.step(0).unwrap();
        assert!(!o.done);
        assert_eq!(env.current_player(), 1);
        // Column player's observation carries no trace of the row choice.
        assert_eq!(env.observe(1), vec![1, 1]);
        let o = env.step(0).unwrap();
        assert!(o.done);
        assert_eq!(o.reward, 2.0);
        assert!(env.step(0).is_err());
    }
}
