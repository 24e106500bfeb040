//! Turn-based Dec-POMDP abstraction: environments, action-observation
//! histories, and recorded trajectories.
//!
//! Environments are strictly turn-based: exactly one player acts per step and
//! everyone else implicitly no-ops. Each agent's history records only the
//! frames where it observed and acted; the common reward accrued between two
//! of its decisions (its own move plus any partner moves before its next
//! turn) is attached to the earlier decision frame. Rewards earned before an
//! agent's first action belong to no frame of that agent.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Discrete action identifier within an environment's fixed action space.
pub type ActionId = usize;

/// Dense 0/1 feature encoding of one observation.
pub type ObsVec = Vec<u8>;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("illegal action {action} for player {player}: {rule}")]
    IllegalAction {
        player: usize,
        action: ActionId,
        rule: String,
    },
    #[error("step called on a terminal environment")]
    Terminal,
    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("trajectory is not terminal")]
    NotTerminal,
}

/// Why an episode ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TerminalReason {
    DeckExhausted,
    BombedOut,
    MaxTurns,
    PerfectScore,
}

impl TerminalReason {
    pub fn as_u8(self) -> u8 {
        match self {
            TerminalReason::DeckExhausted => 0,
            TerminalReason::BombedOut => 1,
            TerminalReason::MaxTurns => 2,
            TerminalReason::PerfectScore => 3,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => TerminalReason::DeckExhausted,
            1 => TerminalReason::BombedOut,
            2 => TerminalReason::MaxTurns,
            3 => TerminalReason::PerfectScore,
            _ => return None,
        })
    }
}

/// Broad classification of an action for evaluation histograms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActionKind {
    Play,
    Discard,
    HintColor,
    HintRank,
    Other,
}

impl ActionKind {
    pub const ALL: [ActionKind; 5] = [
        ActionKind::Play,
        ActionKind::Discard,
        ActionKind::HintColor,
        ActionKind::HintRank,
        ActionKind::Other,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ActionKind::Play => "play",
            ActionKind::Discard => "discard",
            ActionKind::HintColor => "hint_color",
            ActionKind::HintRank => "hint_rank",
            ActionKind::Other => "other",
        }
    }
}

/// Result of applying one action.
#[derive(Debug, Clone, Copy)]
pub struct StepOutcome {
    pub reward: f64,
    pub done: bool,
}

/// Turn-based, partially observable, common-reward environment.
///
/// Instances are single-owner: one episode loop drives an instance at a time,
/// and concurrency comes from running many independent instances.
pub trait Env {
    fn env_id(&self) -> &str;
    fn num_players(&self) -> usize;
    fn action_space_size(&self) -> usize;
    fn observation_size(&self) -> usize;

    /// Starts a new episode and returns each player's initial observation.
    fn reset(&mut self, seed: u64) -> Vec<ObsVec>;

    /// The player to act next. Meaningless once `is_done`.
    fn current_player(&self) -> usize;

    /// Legal action ids for `player` in the current state.
    fn legal_actions(&self, player: usize) -> Vec<ActionId>;

    /// Current observation encoding for `player`.
    fn observe(&self, player: usize) -> ObsVec;

    /// Applies an action for the current player. Illegal actions are
    /// rejected with an error, never remapped.
    fn step(&mut self, action: ActionId) -> Result<StepOutcome, EnvError>;

    fn is_done(&self) -> bool;
    fn terminal_reason(&self) -> Option<TerminalReason>;

    fn action_kind(&self, _action: ActionId) -> ActionKind {
        ActionKind::Other
    }
}

/// One frame of an agent's history: the observation at a decision point, the
/// action taken there, and the common reward accumulated until the agent's
/// next decision (or episode end). A trailing frame with no action records
/// the terminal observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AohStep {
    pub observation: ObsVec,
    pub action: Option<ActionId>,
    pub reward: Option<f64>,
}

/// An agent's action-observation-reward history within one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AOHistory {
    pub agent_id: usize,
    pub steps: Vec<AohStep>,
}

impl AOHistory {
    pub fn new(agent_id: usize) -> Self {
        Self {
            agent_id,
            steps: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Opens a new frame holding only an observation.
    pub fn push_observation(&mut self, obs: ObsVec) {
        self.steps.push(AohStep {
            observation: obs,
            action: None,
            reward: None,
        });
    }

    /// Records the action taken at the most recent frame.
    pub fn set_last_action(&mut self, action: ActionId) {
        let step = self.steps.last_mut().expect("no open frame");
        debug_assert!(step.action.is_none(), "action already set");
        step.action = Some(action);
    }

    /// Records the reward that closed the most recent acted frame.
    pub fn set_last_reward(&mut self, reward: f64) {
        let step = self.steps.last_mut().expect("no open frame");
        debug_assert!(step.action.is_some(), "reward precedes action");
        step.reward = Some(reward);
    }

    /// Frames at which the agent acted, as (frame index, action, reward).
    pub fn decisions(&self) -> impl Iterator<Item = (usize, ActionId, f64)> + '_ {
        self.steps.iter().enumerate().filter_map(|(i, s)| {
            s.action.map(|a| (i, a, s.reward.unwrap_or(0.0)))
        })
    }
}

/// A full recorded episode: per-agent histories plus the environment-level
/// action and reward sequences needed for replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub env_id: String,
    pub env_seed: u64,
    pub num_players: usize,
    pub aoh_per_agent: Vec<AOHistory>,
    /// Environment-level action sequence in turn order.
    pub actions: Vec<ActionId>,
    /// Common reward per environment step.
    pub rewards: Vec<f64>,
    pub total_return: f64,
    pub terminal_reason: TerminalReason,
    pub padded_length: u32,
}

impl Trajectory {
    pub fn num_steps(&self) -> usize {
        self.actions.len()
    }

    /// Discounted return `Σ_{t'≥t} γ^{t'-t} r_{t'}` over the remaining
    /// environment steps.
    pub fn discounted_return(&self, gamma: f64, t: usize) -> Result<f64, EnvError> {
        if t >= self.rewards.len() {
            return Err(EnvError::IndexOutOfRange {
                index: t,
                len: self.rewards.len(),
            });
        }
        assert!(gamma > 0.0 && gamma <= 1.0, "gamma must be in (0, 1]");
        let mut acc = 0.0;
        let mut weight = 1.0;
        for &r in &self.rewards[t..] {
            acc += weight * r;
            weight *= gamma;
        }
        Ok(acc)
    }

    /// True iff the episode ended by losing every life token.
    pub fn bombed_out(&self) -> bool {
        self.terminal_reason == TerminalReason::BombedOut
    }
}

/// Width in bytes of one encoded frame: presence bit, observation, action one-hot.
pub fn frame_width(obs_size: usize, num_actions: usize) -> usize {
    1 + obs_size + num_actions
}

/// Fixed-width history encoding: the last `horizon` frames, oldest first,
/// zero-padded at the front when the history is shorter than the window.
/// Each frame contributes a presence bit (distinguishes a real frame from
/// padding), its observation, and a one-hot of the action taken there.
/// Identical histories encode identically, and histories of length up to
/// `horizon` with distinct contents encode distinctly.
pub fn encode_aoh(
    aoh: &AOHistory,
    horizon: usize,
    obs_size: usize,
    num_actions: usize,
) -> Vec<u8> {
    encode_frames(&aoh.steps, false, horizon, obs_size, num_actions)
}

/// Encodes the window ending at `decision_frame` as it looked when the agent
/// was choosing: the final frame contributes its observation but no action.
/// Matches [`encode_aoh`] on a live history whose last frame is still open,
/// so act-time and replay-time keys agree byte for byte.
pub fn encode_aoh_at_decision(
    aoh: &AOHistory,
    decision_frame: usize,
    horizon: usize,
    obs_size: usize,
    num_actions: usize,
) -> Vec<u8> {
    encode_frames(
        &aoh.steps[..=decision_frame],
        true,
        horizon,
        obs_size,
        num_actions,
    )
}

fn encode_frames(
    steps: &[AohStep],
    mask_last_action: bool,
    horizon: usize,
    obs_size: usize,
    num_actions: usize,
) -> Vec<u8> {
    let width = frame_width(obs_size, num_actions);
    let mut out = vec![0u8; horizon * width];
    let n = steps.len();
    let take = n.min(horizon);
    for (slot, (offset, step)) in (horizon - take..horizon).zip(steps.iter().enumerate().skip(n - take)) {
        let base = slot * width;
        debug_assert_eq!(step.observation.len(), obs_size, "observation width mismatch");
        out[base] = 1;
        out[base + 1..base + 1 + obs_size].copy_from_slice(&step.observation);
        let masked = mask_last_action && offset + 1 == n;
        if let Some(a) = step.action.filter(|_| !masked) {
            debug_assert!(a < num_actions);
            out[base + 1 + obs_size + a] = 1;
        }
    }
    out
}

pub mod record {
    //! Versioned binary trajectory records (little-endian scalars) plus a
    //! JSON debug dump. Layout is documented in `docs/formats.md`.

    use super::*;
    use std::io::{self, Read, Write};

    const MAGIC: &[u8; 4] = b"KLRT";
    const VERSION: u16 = 1;

    #[derive(Debug, Error)]
    pub enum RecordError {
        #[error("io error: {0}")]
        Io(#[from] io::Error),
        #[error("bad magic bytes")]
        BadMagic,
        #[error("unsupported record version {0}")]
        Version(u16),
        #[error("malformed record: {0}")]
        Malformed(String),
    }

    fn write_bytes<W: Write>(w: &mut W, b: &[u8]) -> io::Result<()> {
        w.write_all(&(b.len() as u32).to_le_bytes())?;
        w.write_all(b)
    }

    fn read_u32<R: Read>(r: &mut R) -> Result<u32, RecordError> {
        let mut buf = [0u8; 4];
        r.read_exact(&mut buf)?;
        Ok(u32::from_le_bytes(buf))
    }

    fn read_bytes<R: Read>(r: &mut R) -> Result<Vec<u8>, RecordError> {
        let len = read_u32(r)? as usize;
        if len > 1 << 30 {
            return Err(RecordError::Malformed(format!("length {len} too large")));
        }
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf)?;
        Ok(buf)
    }

    pub fn write_trajectory<W: Write>(w: &mut W, t: &Trajectory) -> Result<(), RecordError> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_bytes(w, t.env_id.as_bytes())?;
        w.write_all(&t.env_seed.to_le_bytes())?;
        w.write_all(&(t.num_players as u8).to_le_bytes())?;
        w.write_all(&[t.terminal_reason.as_u8()])?;
        w.write_all(&t.padded_length.to_le_bytes())?;
        w.write_all(&t.total_return.to_le_bytes())?;
        w.write_all(&(t.actions.len() as u32).to_le_bytes())?;
        for &a in &t.actions {
            w.write_all(&(a as u16).to_le_bytes())?;
        }
        for &r in &t.rewards {
            w.write_all(&r.to_le_bytes())?;
        }
        w.write_all(&(t.aoh_per_agent.len() as u32).to_le_bytes())?;
        for aoh in &t.aoh_per_agent {
            w.write_all(&(aoh.agent_id as u32).to_le_bytes())?;
            w.write_all(&(aoh.steps.len() as u32).to_le_bytes())?;
            for step in &aoh.steps {
                write_bytes(w, &step.observation)?;
                match step.action {
                    Some(a) => {
                        w.write_all(&[1])?;
                        w.write_all(&(a as u16).to_le_bytes())?;
                    }
                    None => w.write_all(&[0])?,
                }
                match step.reward {
                    Some(r) => {
                        w.write_all(&[1])?;
                        w.write_all(&r.to_le_bytes())?;
                    }
                    None => w.write_all(&[0])?,
                }
            }
        }
        Ok(())
    }

    pub fn read_trajectory<R: Read>(r: &mut R) -> Result<Trajectory, RecordError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(RecordError::BadMagic);
        }
        let mut v = [0u8; 2];
        r.read_exact(&mut v)?;
        let version = u16::from_le_bytes(v);
        if version != VERSION {
            return Err(RecordError::Version(version));
        }
        let env_id = String::from_utf8(read_bytes(r)?)
            .map_err(|e| RecordError::Malformed(e.to_string()))?;
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let env_seed = u64::from_le_bytes(b8);
        let mut b1 = [0u8; 1];
        r.read_exact(&mut b1)?;
        let num_players = b1[0] as usize;
        r.read_exact(&mut b1)?;
        let terminal_reason = TerminalReason::from_u8(b1[0])
            .ok_or_else(|| RecordError::Malformed(format!("terminal reason {}", b1[0])))?;
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let padded_length = u32::from_le_bytes(b4);
        r.read_exact(&mut b8)?;
        let total_return = f64::from_le_bytes(b8);
        let num_steps = read_u32(r)? as usize;
        let mut actions = Vec::with_capacity(num_steps);
        for _ in 0..num_steps {
            let mut b2 = [0u8; 2];
            r.read_exact(&mut b2)?;
            actions.push(u16::from_le_bytes(b2) as usize);
        }
        let mut rewards = Vec::with_capacity(num_steps);
        for _ in 0..num_steps {
            r.read_exact(&mut b8)?;
            rewards.push(f64::from_le_bytes(b8));
        }
        let num_agents = read_u32(r)? as usize;
        let mut aoh_per_agent = Vec::with_capacity(num_agents);
        for _ in 0..num_agents {
            r.read_exact(&mut b4)?;
            let agent_id = u32::from_le_bytes(b4) as usize;
            let num_frames = read_u32(r)? as usize;
            let mut steps = Vec::with_capacity(num_frames);
            for _ in 0..num_frames {
                let observation = read_bytes(r)?;
                r.read_exact(&mut b1)?;
                let action = if b1[0] == 1 {
                    let mut b2 = [0u8; 2];
                    r.read_exact(&mut b2)?;
                    Some(u16::from_le_bytes(b2) as usize)
                } else {
                    None
                };
                r.read_exact(&mut b1)?;
                let reward = if b1[0] == 1 {
                    r.read_exact(&mut b8)?;
                    Some(f64::from_le_bytes(b8))
                } else {
                    None
                };
                steps.push(AohStep {
                    observation,
                    action,
                    reward,
                });
            }
            aoh_per_agent.push(AOHistory { agent_id, steps });
        }
        Ok(Trajectory {
            env_id,
            env_seed,
            num_players,
            aoh_per_agent,
            actions,
            rewards,
            total_return,
            terminal_reason,
            padded_length,
        })
    }

    /// Human-readable JSON dump of a trajectory.
    pub fn to_debug_json(t: &Trajectory) -> String {
        serde_json::to_string_pretty(t).expect("trajectory serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_trajectory(rewards: &[f64]) -> Trajectory {
        let mut aoh = AOHistory::new(0);
        for (i, &r) in rewards.iter().enumerate() {
            aoh.push_observation(vec![i as u8]);
            aoh.set_last_action(0);
            aoh.set_last_reward(r);
        }
        Trajectory {
            env_id: "toy".into(),
            env_seed: 0,
            num_players: 1,
            aoh_per_agent: vec![aoh],
            actions: vec![0; rewards.len()],
            rewards: rewards.to_vec(),
            total_return: rewards.iter().sum(),
            terminal_reason: TerminalReason::MaxTurns,
            padded_length: 80,
        }
    }

    #[test]
    fn discounted_return_gamma_one_is_sum() {
        let t = toy_trajectory(&[1.0, 0.0, 2.0]);
        assert_eq!(t.discounted_return(1.0, 0).unwrap(), 3.0);
        assert_eq!(t.discounted_return(1.0, 0).unwrap(), t.total_return);
    }

    #[test]
    fn discounted_return_half_gamma() {
        let t = toy_trajectory(&[1.0, 0.0, 2.0]);
        assert!((t.discounted_return(0.5, 0).unwrap() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn discounted_return_single_step() {
        let t = toy_trajectory(&[5.0]);
        assert_eq!(t.discounted_return(0.999, 0).unwrap(), 5.0);
    }

    #[test]
    fn discounted_return_rejects_out_of_range() {
        let t = toy_trajectory(&[1.0]);
        assert!(matches!(
            t.discounted_return(1.0, 1),
            Err(EnvError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn encode_empty_history_is_zeros() {
        let aoh = AOHistory::new(0);
        let enc = encode_aoh(&aoh, 2, 3, 2);
        assert_eq!(enc, vec![0u8; 2 * frame_width(3, 2)]);
    }

    #[test]
    fn encode_is_deterministic() {
        let mut a = AOHistory::new(0);
        a.push_observation(vec![1, 0, 1]);
        a.set_last_action(1);
        a.push_observation(vec![0, 1, 0]);
        let b = a.clone();
        assert_eq!(encode_aoh(&a, 4, 3, 2), encode_aoh(&b, 4, 3, 2));
    }

    #[test]
    fn encode_window_ignores_older_frames() {
        // Two histories differing only at frame 0 encode identically under a
        // horizon-2 window over their three frames.
        let mk = |first_obs: Vec<u8>| {
            let mut h = AOHistory::new(0);
            h.push_observation(first_obs);
            h.set_last_action(0);
            h.push_observation(vec![0, 1, 0]);
            h.set_last_action(1);
            h.push_observation(vec![1, 1, 0]);
            h
        };
        let h1 = mk(vec![1, 0, 0]);
        let h2 = mk(vec![0, 0, 1]);
        assert_ne!(h1, h2);
        assert_eq!(encode_aoh(&h1, 2, 3, 2), encode_aoh(&h2, 2, 3, 2));
    }

    #[test]
    fn encode_is_injective_on_tiny_space() {
        // Exhaustive over histories of length <= 2 with 2 possible one-bit
        // observations and 2 actions: distinct histories -> distinct codes.
        let obs_options: [Vec<u8>; 2] = [vec![0], vec![1]];
        let mut histories: Vec<AOHistory> = vec![AOHistory::new(0)];
        for &with_action in &[false, true] {
            for obs in &obs_options {
                let mut h = AOHistory::new(0);
                h.push_observation(obs.clone());
                if with_action {
                    h.set_last_action(0);
                }
                histories.push(h);
            }
        }
        // Length-2 histories: first frame always acted, second frame open or acted.
        let mut longer = Vec::new();
        for h in &histories {
            if h.len() == 1 && h.steps[0].action.is_some() {
                for obs in &obs_options {
                    for &a2 in &[None, Some(0), Some(1)] {
                        let mut h2 = h.clone();
                        h2.push_observation(obs.clone());
                        if let Some(a) = a2 {
                            h2.set_last_action(a);
                        }
                        longer.push(h2);
                    }
                }
            }
        }
        histories.extend(longer);
        let mut seen = std::collections::HashMap::new();
        for h in &histories {
            let code = encode_aoh(h, 2, 1, 2);
            if let Some(prev) = seen.insert(code, h.clone()) {
                panic!("encoding collision: {h:?} vs {prev:?}");
            }
        }
    }

    #[test]
    fn record_round_trip() {
        let t = toy_trajectory(&[1.0, -0.5, 2.25]);
        let mut buf = Vec::new();
        record::write_trajectory(&mut buf, &t).unwrap();
        let back = record::read_trajectory(&mut buf.as_slice()).unwrap();
        assert_eq!(t, back);
        let json = record::to_debug_json(&t);
        assert!(json.contains("\"total_return\""));
    }

    #[test]
    fn record_rejects_bad_magic() {
        let mut buf = Vec::new();
        record::write_trajectory(&mut buf, &toy_trajectory(&[1.0])).unwrap();
        buf[0] = b'X';
        assert!(matches!(
            record::read_trajectory(&mut buf.as_slice()),
            Err(record::RecordError::BadMagic)
        ));
    }
}
