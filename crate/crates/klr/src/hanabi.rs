//! Rule-complete, configurable Hanabi engine (two players) satisfying [`Env`].
//!
//! Scaled variants are driven entirely by [`HanabiConfig`]; the shipped
//! presets are `hanabi-full` (5 colors, 5 ranks, 5-card hands, 8 info tokens,
//! 3 lives) and `hanabi-mini` (2 colors, 3 ranks, cards per rank [2,2,1],
//! 2-card hands, 3 info tokens, 1 life).
//!
//! # Observation encoding layout
//!
//! Dense 0/1 features, concatenated in this order (widths for colors C,
//! ranks R, hand size H, info tokens I, lives L, deck D = C·Σcards_per_rank):
//!
//! 1. partner hand, per slot: color one-hot (C), rank one-hot (R), present (1)
//! 2. own hand knowledge, per slot: possible-color mask (C), possible-rank
//!    mask (R), color-hinted (1), rank-hinted (1), present (1)
//! 3. fireworks, per color: thermometer over ranks (R)
//! 4. info tokens: thermometer (I)
//! 5. life tokens: thermometer (L)
//! 6. discard pile, per color per rank: count thermometer (cards_per_rank[r])
//! 7. last action: present (1), actor-is-viewer (1), kind one-hot (4),
//!    slot one-hot (H), hint color one-hot (C), hint rank one-hot (R),
//!    touched-slots mask in the hint target's hand (H), successful-play (1),
//!    removed-card color one-hot (C), removed-card rank one-hot (R)
//! 8. viewer's legal action mask (2H + C + R)
//!
//! Own-hand features are derived exclusively from hint knowledge, so the
//! encoding carries no bits derivable only from the viewer's hidden cards.
//!
//! # Action id layout
//!
//! `0..H` discard slot, `H..2H` play slot, `2H..2H+C` hint color to partner,
//! `2H+C..2H+C+R` hint rank to partner.
//!
//! Deck shuffles use the documented splitmix64 generator ([`crate::prng`]) so
//! replays are reproducible across platforms.

use crate::env::{ActionId, ActionKind, Env, EnvError, ObsVec, StepOutcome, TerminalReason};
use crate::prng::SplitMix64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Display letters for colors, in index order.
pub const COLOR_LETTERS: [&str; 5] = ["G", "B", "W", "Y", "R"];

/// A card: color index and 0-based rank (displayed 1-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Card {
    pub color: u8,
    pub rank: u8,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid hanabi config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HanabiConfig {
    pub num_colors: usize,
    pub num_ranks: usize,
    pub hand_size: usize,
    pub num_info_tokens: usize,
    pub num_life_tokens: usize,
    /// Copies of each rank per color, lowest rank first.
    pub cards_per_rank: Vec<usize>,
    pub num_players: usize,
    pub max_turns: usize,
    /// Bombed-out games score zero (the paper's evaluation semantics) when
    /// set; otherwise the stack sum stands.
    pub bomb_zero_score: bool,
}

impl HanabiConfig {
    /// Standard 5-color game with full rules.
    pub fn full() -> Self {
        Self {
            num_colors: 5,
            num_ranks: 5,
            hand_size: 5,
            num_info_tokens: 8,
            num_life_tokens: 3,
            cards_per_rank: vec![3, 2, 2, 2, 1],
            num_players: 2,
            max_turns: 100,
            bomb_zero_score: true,
        }
    }

    /// Desk-scale variant small enough for tabular learners and
    /// enumeration-based oracles.
    pub fn mini() -> Self {
        Self {
            num_colors: 2,
            num_ranks: 3,
            hand_size: 2,
            num_info_tokens: 3,
            num_life_tokens: 1,
            cards_per_rank: vec![2, 2, 1],
            num_players: 2,
            max_turns: 64,
            bomb_zero_score: true,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |m: String| Err(ConfigError::Invalid(m));
        if !(1..=5).contains(&self.num_colors) {
            return err(format!("num_colors {} not in 1..=5", self.num_colors));
        }
        if !(1..=5).contains(&self.num_ranks) {
            return err(format!("num_ranks {} not in 1..=5", self.num_ranks));
        }
        if !(1..=5).contains(&self.hand_size) {
            return err(format!("hand_size {} not in 1..=5", self.hand_size));
        }
        if self.num_info_tokens == 0 || self.num_life_tokens == 0 {
            return err("info and life tokens must be >= 1".into());
        }
        if self.cards_per_rank.len() != self.num_ranks {
            return err(format!(
                "cards_per_rank has {} entries for {} ranks",
                self.cards_per_rank.len(),
                self.num_ranks
            ));
        }
        if self.cards_per_rank.iter().any(|&c| c == 0) {
            return err("cards_per_rank entries must be >= 1".into());
        }
        if self.num_players != 2 {
            return err(format!("num_players {} unsupported (two-player only)", self.num_players));
        }
        if self.deck_size() < self.num_players * self.hand_size {
            return err(format!(
                "deck of {} cannot deal {} hands of {}",
                self.deck_size(),
                self.num_players,
                self.hand_size
            ));
        }
        if self.max_turns == 0 {
            return err("max_turns must be >= 1".into());
        }
        Ok(())
    }

    pub fn max_score(&self) -> usize {
        self.num_colors * self.num_ranks
    }

    pub fn deck_size(&self) -> usize {
        self.num_colors * self.cards_per_rank.iter().sum::<usize>()
    }

    pub fn action_space(&self) -> usize {
        2 * self.hand_size + self.num_colors + self.num_ranks
    }

    pub fn decode_action(&self, a: ActionId) -> Option<HanabiMove> {
        let h = self.hand_size;
        if a < h {
            Some(HanabiMove::Discard { slot: a })
        } else if a < 2 * h {
            Some(HanabiMove::Play { slot: a - h })
        } else if a < 2 * h + self.num_colors {
            Some(HanabiMove::HintColor {
                color: (a - 2 * h) as u8,
            })
        } else if a < self.action_space() {
            Some(HanabiMove::HintRank {
                rank: (a - 2 * h - self.num_colors) as u8,
            })
        } else {
            None
        }
    }

    pub fn encode_move(&self, mv: HanabiMove) -> ActionId {
        let h = self.hand_size;
        match mv {
            HanabiMove::Discard { slot } => slot,
            HanabiMove::Play { slot } => h + slot,
            HanabiMove::HintColor { color } => 2 * h + color as usize,
            HanabiMove::HintRank { rank } => 2 * h + self.num_colors + rank as usize,
        }
    }

    /// The full deck as a multiset, in canonical order.
    pub fn full_deck(&self) -> Vec<Card> {
        let mut deck = Vec::with_capacity(self.deck_size());
        for color in 0..self.num_colors as u8 {
            for rank in 0..self.num_ranks as u8 {
                for _ in 0..self.cards_per_rank[rank as usize] {
                    deck.push(Card { color, rank });
                }
            }
        }
        deck
    }

    fn observation_size(&self) -> usize {
        let c = self.num_colors;
        let r = self.num_ranks;
        let h = self.hand_size;
        let per_color_discard: usize = self.cards_per_rank.iter().sum();
        h * (c + r + 1)                       // partner hand
            + h * (c + r + 3)                 // own knowledge
            + c * r                           // fireworks
            + self.num_info_tokens
            + self.num_life_tokens
            + c * per_color_discard           // discard pile
            + (1 + 1 + 4 + h + c + r + h + 1 + c + r) // last action
            + self.action_space()             // legal mask
    }
}

/// What a player may do on their turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HanabiMove {
    Discard { slot: usize },
    Play { slot: usize },
    HintColor { color: u8 },
    HintRank { rank: u8 },
}

/// Hint-derived knowledge about one held card, including negative
/// (ruled-out) information.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CardKnowledge {
    pub color_hinted: Option<u8>,
    pub rank_hinted: Option<u8>,
    /// Bitmask of colors not yet ruled out.
    pub possible_colors: u8,
    /// Bitmask of ranks not yet ruled out.
    pub possible_ranks: u8,
}

impl CardKnowledge {
    pub fn fresh(config: &HanabiConfig) -> Self {
        Self {
            color_hinted: None,
            rank_hinted: None,
            possible_colors: mask_all(config.num_colors),
            possible_ranks: mask_all(config.num_ranks),
        }
    }

    pub fn color_possible(&self, color: u8) -> bool {
        self.possible_colors & (1 << color) != 0
    }

    pub fn rank_possible(&self, rank: u8) -> bool {
        self.possible_ranks & (1 << rank) != 0
    }

    pub fn is_unhinted(&self) -> bool {
        self.color_hinted.is_none() && self.rank_hinted.is_none()
    }
}

fn mask_all(n: usize) -> u8 {
    ((1u16 << n) - 1) as u8
}

/// Public description of the previous move.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LastAction {
    pub actor: usize,
    pub mv: HanabiMove,
    /// Identity of the card removed by a play or discard (public knowledge).
    pub card: Option<Card>,
    pub successful_play: bool,
    /// Bitmask of slots in the hint target's hand touched by the hint.
    pub touched_slots: u8,
}

/// Full game state. Construction through [`HanabiEnv`] keeps it consistent;
/// fields are public for diagnostics and test construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HanabiState {
    pub deck: Vec<Card>,
    pub hands: Vec<Vec<Card>>,
    pub knowledge: Vec<Vec<CardKnowledge>>,
    /// Cards played so far per color; equals the next playable 0-based rank.
    pub fireworks: Vec<u8>,
    pub info_tokens: usize,
    pub life_tokens: usize,
    pub discard_pile: Vec<Card>,
    pub current_player: usize,
    pub turns_since_deck_empty: usize,
    pub turn_count: usize,
    pub last_action: Option<LastAction>,
    pub done: Option<TerminalReason>,
}

/// One player's partial view of the state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HanabiObservation {
    pub viewer: usize,
    pub partner_hand: Vec<Card>,
    pub own_knowledge: Vec<CardKnowledge>,
    pub fireworks: Vec<u8>,
    pub info_tokens: usize,
    pub life_tokens: usize,
    pub discard_pile: Vec<Card>,
    pub last_action: Option<LastAction>,
    pub legal_mask: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct HanabiEnv {
    config: HanabiConfig,
    state: Option<HanabiState>,
    obs_size: usize,
}

impl HanabiEnv {
    pub fn new(config: HanabiConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        let obs_size = config.observation_size();
        Ok(Self {
            config,
            state: None,
            obs_size,
        })
    }

    /// Wraps an externally constructed state (diagnostics and tests).
    pub fn with_state(config: HanabiConfig, state: HanabiState) -> Result<Self, ConfigError> {
        config.validate()?;
        let obs_size = config.observation_size();
        Ok(Self {
            config,
            state: Some(state),
            obs_size,
        })
    }

    pub fn config(&self) -> &HanabiConfig {
        &self.config
    }

    pub fn state(&self) -> &HanabiState {
        self.state.as_ref().expect("environment not reset")
    }

    /// Stack sum, or zero for a bombed-out terminal state under
    /// `bomb_zero_score`.
    pub fn score(&self) -> usize {
        let state = self.state();
        if self.config.bomb_zero_score && state.done == Some(TerminalReason::BombedOut) {
            return 0;
        }
        Self::stack_sum(state)
    }

    fn stack_sum(state: &HanabiState) -> usize {
        state.fireworks.iter().map(|&f| f as usize).sum()
    }

    /// Legal moves for `player` were it their turn now.
    pub fn legal_moves(&self, player: usize) -> Vec<HanabiMove> {
        let state = self.state();
        let mut moves = Vec::new();
        let hand_len = state.hands[player].len();
        for slot in 0..hand_len {
            moves.push(HanabiMove::Discard { slot });
        }
        for slot in 0..hand_len {
            moves.push(HanabiMove::Play { slot });
        }
        if state.info_tokens > 0 {
            let partner = 1 - player;
            let partner_hand = &state.hands[partner];
            for color in 0..self.config.num_colors as u8 {
                if partner_hand.iter().any(|c| c.color == color) {
                    moves.push(HanabiMove::HintColor { color });
                }
            }
            for rank in 0..self.config.num_ranks as u8 {
                if partner_hand.iter().any(|c| c.rank == rank) {
                    moves.push(HanabiMove::HintRank { rank });
                }
            }
        }
        moves
    }

    /// Why `mv` is illegal for `player`, if it is.
    fn legality_violation(&self, player: usize, mv: HanabiMove) -> Option<String> {
        let state = self.state();
        let hand_len = state.hands[player].len();
        match mv {
            HanabiMove::Discard { slot } | HanabiMove::Play { slot } => {
                if slot >= hand_len {
                    return Some(format!("slot {slot} not held (hand size {hand_len})"));
                }
            }
            HanabiMove::HintColor { color } => {
                if state.info_tokens == 0 {
                    return Some("no info tokens for a hint".into());
                }
                if color as usize >= self.config.num_colors {
                    return Some(format!("color {color} out of range"));
                }
                let partner = 1 - player;
                if !state.hands[partner].iter().any(|c| c.color == color) {
                    return Some(format!(
                        "partner holds no {} cards",
                        COLOR_LETTERS[color as usize]
                    ));
                }
            }
            HanabiMove::HintRank { rank } => {
                if state.info_tokens == 0 {
                    return Some("no info tokens for a hint".into());
                }
                if rank as usize >= self.config.num_ranks {
                    return Some(format!("rank {rank} out of range"));
                }
                let partner = 1 - player;
                if !state.hands[partner].iter().any(|c| c.rank == rank) {
                    return Some(format!("partner holds no rank-{} cards", rank + 1));
                }
            }
        }
        None
    }

    /// Structured view for `player`.
    pub fn observation(&self, player: usize) -> HanabiObservation {
        let state = self.state();
        let partner = 1 - player;
        let mut legal_mask = vec![false; self.config.action_space()];
        if state.done.is_none() {
            for mv in self.legal_moves(player) {
                legal_mask[self.config.encode_move(mv)] = true;
            }
        }
        HanabiObservation {
            viewer: player,
            partner_hand: state.hands[partner].clone(),
            own_knowledge: state.knowledge[player].clone(),
            fireworks: state.fireworks.clone(),
            info_tokens: state.info_tokens,
            life_tokens: state.life_tokens,
            discard_pile: state.discard_pile.clone(),
            last_action: state.last_action,
            legal_mask,
        }
    }

    /// Encodes a structured observation per the module-level layout.
    pub fn encode_observation(&self, obs: &HanabiObservation) -> ObsVec {
        let cfg = &self.config;
        let (c, r, h) = (cfg.num_colors, cfg.num_ranks, cfg.hand_size);
        let mut v = Vec::with_capacity(self.obs_size);

        // 1. partner hand
        for slot in 0..h {
            let mut color = vec![0u8; c];
            let mut rank = vec![0u8; r];
            let mut present = 0u8;
            if let Some(card) = obs.partner_hand.get(slot) {
                color[card.color as usize] = 1;
                rank[card.rank as usize] = 1;
                present = 1;
            }
            v.extend(color);
            v.extend(rank);
            v.push(present);
        }
        // 2. own knowledge
        for slot in 0..h {
            match obs.own_knowledge.get(slot) {
                Some(k) => {
                    for color in 0..c as u8 {
                        v.push(k.color_possible(color) as u8);
                    }
                    for rank in 0..r as u8 {
                        v.push(k.rank_possible(rank) as u8);
                    }
                    v.push(k.color_hinted.is_some() as u8);
                    v.push(k.rank_hinted.is_some() as u8);
                    v.push(1);
                }
                None => v.extend(std::iter::repeat(0).take(c + r + 3)),
            }
        }
        // 3. fireworks thermometer
        for color in 0..c {
            let top = obs.fireworks[color] as usize;
            for rank in 0..r {
                v.push((rank < top) as u8);
            }
        }
        // 4./5. token thermometers
        for i in 0..cfg.num_info_tokens {
            v.push((i < obs.info_tokens) as u8);
        }
        for i in 0..cfg.num_life_tokens {
            v.push((i < obs.life_tokens) as u8);
        }
        // 6. discard pile count thermometers
        for color in 0..c as u8 {
            for rank in 0..r as u8 {
                let count = obs
                    .discard_pile
                    .iter()
                    .filter(|card| card.color == color && card.rank == rank)
                    .count();
                for i in 0..cfg.cards_per_rank[rank as usize] {
                    v.push((i < count) as u8);
                }
            }
        }
        // 7. last action
        let mut la = vec![0u8; 1 + 1 + 4 + h + c + r + h + 1 + c + r];
        if let Some(act) = obs.last_action {
            la[0] = 1;
            la[1] = (act.actor == obs.viewer) as u8;
            let kind_base = 2;
            let slot_base = kind_base + 4;
            let color_base = slot_base + h;
            let rank_base = color_base + c;
            let touched_base = rank_base + r;
            let success_base = touched_base + h;
            let card_base = success_base + 1;
            match act.mv {
                HanabiMove::Discard { slot } => {
                    la[kind_base] = 1;
                    la[slot_base + slot] = 1;
                }
                HanabiMove::Play { slot } => {
                    la[kind_base + 1] = 1;
                    la[slot_base + slot] = 1;
                }
                HanabiMove::HintColor { color } => {
                    la[kind_base + 2] = 1;
                    la[color_base + color as usize] = 1;
                }
                HanabiMove::HintRank { rank } => {
                    la[kind_base + 3] = 1;
                    la[rank_base + rank as usize] = 1;
                }
            }
            for slot in 0..h {
                if act.touched_slots & (1 << slot) != 0 {
                    la[touched_base + slot] = 1;
                }
            }
            la[success_base] = act.successful_play as u8;
            if let Some(card) = act.card {
                la[card_base + card.color as usize] = 1;
                la[card_base + c + card.rank as usize] = 1;
            }
        }
        v.extend(la);
        // 8. legal action mask
        v.extend(obs.legal_mask.iter().map(|&b| b as u8));

        debug_assert_eq!(v.len(), self.obs_size);
        v
    }

    /// Verifies that deck + hands + discards + plays add up to the full deck.
    pub fn card_conservation_ok(&self) -> bool {
        let state = self.state();
        let mut seen: Vec<Card> = Vec::with_capacity(self.config.deck_size());
        seen.extend(&state.deck);
        for hand in &state.hands {
            seen.extend(hand);
        }
        seen.extend(&state.discard_pile);
        for (color, &top) in state.fireworks.iter().enumerate() {
            for rank in 0..top {
                seen.push(Card {
                    color: color as u8,
                    rank,
                });
            }
        }
        let mut full = self.config.full_deck();
        seen.sort_unstable();
        full.sort_unstable();
        seen == full
    }

    fn draw(state: &mut HanabiState, config: &HanabiConfig, player: usize) {
        if let Some(card) = state.deck.pop() {
            state.hands[player].push(card);
            state.knowledge[player].push(CardKnowledge::fresh(config));
        }
    }

    fn remove_card(state: &mut HanabiState, player: usize, slot: usize) -> Card {
        state.knowledge[player].remove(slot);
        state.hands[player].remove(slot)
    }
}

impl Env for HanabiEnv {
    fn env_id(&self) -> &str {
        "hanabi"
    }

    fn num_players(&self) -> usize {
        self.config.num_players
    }

    fn action_space_size(&self) -> usize {
        self.config.action_space()
    }

    fn observation_size(&self) -> usize {
        self.obs_size
    }

    fn reset(&mut self, seed: u64) -> Vec<ObsVec> {
        let mut deck = self.config.full_deck();
        SplitMix64::new(seed).shuffle(&mut deck);
        let mut hands = vec![Vec::new(); self.config.num_players];
        let mut knowledge = vec![Vec::new(); self.config.num_players];
        // Player 0's full hand is dealt first, drawing from the deck end.
        for (player, hand) in hands.iter_mut().enumerate() {
            for _ in 0..self.config.hand_size {
                hand.push(deck.pop().expect("deck covers the deal"));
                knowledge[player].push(CardKnowledge::fresh(&self.config));
            }
        }
        self.state = Some(HanabiState {
            deck,
            hands,
            knowledge,
            fireworks: vec![0; self.config.num_colors],
            info_tokens: self.config.num_info_tokens,
            life_tokens: self.config.num_life_tokens,
            discard_pile: Vec::new(),
            current_player: 0,
            turns_since_deck_empty: 0,
            turn_count: 0,
            last_action: None,
            done: None,
        });
        (0..self.config.num_players)
            .map(|p| self.observe(p))
            .collect()
    }

    fn current_player(&self) -> usize {
        self.state().current_player
    }

    fn legal_actions(&self, player: usize) -> Vec<ActionId> {
        if self.state().done.is_some() {
            return Vec::new();
        }
        self.legal_moves(player)
            .into_iter()
            .map(|mv| self.config.encode_move(mv))
            .collect()
    }

    fn observe(&self, player: usize) -> ObsVec {
        self.encode_observation(&self.observation(player))
    }

    fn step(&mut self, action: ActionId) -> Result<StepOutcome, EnvError> {
        if self.state().done.is_some() {
            return Err(EnvError::Terminal);
        }
        let player = self.state().current_player;
        let mv = self.config.decode_action(action).ok_or_else(|| {
            EnvError::IllegalAction {
                player,
                action,
                rule: format!("action id outside space of {}", self.config.action_space()),
            }
        })?;
        if let Some(rule) = self.legality_violation(player, mv) {
            return Err(EnvError::IllegalAction {
                player,
                action,
                rule,
            });
        }

        let config = self.config.clone();
        let state = self.state.as_mut().expect("environment not reset");
        let mut reward = 0.0;
        let mut last = LastAction {
            actor: player,
            mv,
            card: None,
            successful_play: false,
            touched_slots: 0,
        };

        match mv {
            HanabiMove::Discard { slot } => {
                let card = Self::remove_card(state, player, slot);
                state.discard_pile.push(card);
                state.info_tokens = (state.info_tokens + 1).min(config.num_info_tokens);
                last.card = Some(card);
                Self::draw(state, &config, player);
            }
            HanabiMove::Play { slot } => {
                let card = Self::remove_card(state, player, slot);
                last.card = Some(card);
                if state.fireworks[card.color as usize] == card.rank {
                    state.fireworks[card.color as usize] += 1;
                    reward = 1.0;
                    last.successful_play = true;
                    // Completing a stack restores one info token.
                    if state.fireworks[card.color as usize] as usize == config.num_ranks {
                        state.info_tokens = (state.info_tokens + 1).min(config.num_info_tokens);
                    }
                } else {
                    state.life_tokens -= 1;
                    state.discard_pile.push(card);
                }
                Self::draw(state, &config, player);
            }
            HanabiMove::HintColor { color } => {
                state.info_tokens -= 1;
                let partner = 1 - player;
                for (slot, card) in state.hands[partner].iter().enumerate() {
                    let k = &mut state.knowledge[partner][slot];
                    if card.color == color {
                        k.color_hinted = Some(color);
                        k.possible_colors = 1 << color;
                        last.touched_slots |= 1 << slot;
                    } else {
                        k.possible_colors &= !(1 << color);
                    }
                }
            }
            HanabiMove::HintRank { rank } => {
                state.info_tokens -= 1;
                let partner = 1 - player;
                for (slot, card) in state.hands[partner].iter().enumerate() {
                    let k = &mut state.knowledge[partner][slot];
                    if card.rank == rank {
                        k.rank_hinted = Some(rank);
                        k.possible_ranks = 1 << rank;
                        last.touched_slots |= 1 << slot;
                    } else {
                        k.possible_ranks &= !(1 << rank);
                    }
                }
            }
        }

        state.last_action = Some(last);
        state.turn_count += 1;

        // Termination checks, in precedence order.
        if state.life_tokens == 0 {
            state.done = Some(TerminalReason::BombedOut);
            if config.bomb_zero_score {
                // The team loses all points: the bombing step's reward cancels
                // the stacks so total return equals the final score of zero.
                reward -= Self::stack_sum(state) as f64;
            }
        } else if Self::stack_sum(state) == config.max_score() {
            state.done = Some(TerminalReason::PerfectScore);
        } else {
            if state.deck.is_empty() {
                state.turns_since_deck_empty += 1;
                // Every player, including the one who drew the last card,
                // gets one final turn.
                if state.turns_since_deck_empty == config.num_players + 1 {
                    state.done = Some(TerminalReason::DeckExhausted);
                }
            }
            if state.done.is_none() && state.turn_count >= config.max_turns {
                state.done = Some(TerminalReason::MaxTurns);
            }
        }

        let done = state.done.is_some();
        if !done {
            state.current_player = (state.current_player + 1) % config.num_players;
        }
        debug_assert!(self.card_conservation_ok());
        Ok(StepOutcome { reward, done })
    }

    fn is_done(&self) -> bool {
        self.state().done.is_some()
    }

    fn terminal_reason(&self) -> Option<TerminalReason> {
        self.state().done
    }

    fn action_kind(&self, action: ActionId) -> ActionKind {
        match self.config.decode_action(action) {
            Some(HanabiMove::Play { .. }) => ActionKind::Play,
            Some(HanabiMove::Discard { .. }) => ActionKind::Discard,
            Some(HanabiMove::HintColor { .. }) => ActionKind::HintColor,
            Some(HanabiMove::HintRank { .. }) => ActionKind::HintRank,
            None => ActionKind::Other,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mini_env() -> HanabiEnv {
        HanabiEnv::new(HanabiConfig::mini()).unwrap()
    }

    /// Swaps `want` from the deck (or the other hand) into `player`'s hand at
    /// `slot`, preserving card conservation.
    fn plant_card(env: &mut HanabiEnv, player: usize, slot: usize, want: Card) {
        let state = env.state.as_mut().unwrap();
        let held = state.hands[player][slot];
        if held == want {
            return;
        }
        if let Some(pos) = state.deck.iter().position(|&c| c == want) {
            state.deck[pos] = held;
        } else {
            let other = 1 - player;
            let pos = state.hands[other]
                .iter()
                .position(|&c| c == want)
                .expect("wanted card somewhere unseen");
            state.hands[other][pos] = held;
        }
        state.hands[player][slot] = want;
    }

    #[test]
    fn config_presets_validate() {
        assert!(HanabiConfig::full().validate().is_ok());
        assert!(HanabiConfig::mini().validate().is_ok());
        assert_eq!(HanabiConfig::full().max_score(), 25);
        assert_eq!(HanabiConfig::mini().max_score(), 6);
        assert_eq!(HanabiConfig::full().deck_size(), 50);
        assert_eq!(HanabiConfig::mini().deck_size(), 10);
    }

    #[test]
    fn config_rejects_undersized_deck() {
        let mut cfg = HanabiConfig::mini();
        cfg.cards_per_rank = vec![1, 1, 1];
        cfg.hand_size = 4;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn action_codec_round_trips() {
        let cfg = HanabiConfig::full();
        for a in 0..cfg.action_space() {
            let mv = cfg.decode_action(a).unwrap();
            assert_eq!(cfg.encode_move(mv), a);
        }
        assert!(cfg.decode_action(cfg.action_space()).is_none());
    }

    #[test]
    fn successful_play_advances_stack_and_rewards() {
        let mut env = mini_env();
        env.reset(3);
        // Color-0 stack at 1 (its rank-0 card is on the stack, so it must
        // leave the unseen pool), player 0 holding color-0 rank-1 at slot 0.
        plant_card(&mut env, 0, 1, Card { color: 0, rank: 0 });
        let play0 = env.config().encode_move(HanabiMove::Play { slot: 1 });
        let out0 = env.step(play0).unwrap();
        assert_eq!(out0.reward, 1.0);
        assert_eq!(env.state().fireworks[0], 1);
        // Partner's turn: arrange and play the rank-1.
        plant_card(&mut env, 1, 0, Card { color: 0, rank: 1 });
        let play1 = env.config().encode_move(HanabiMove::Play { slot: 0 });
        let out1 = env.step(play1).unwrap();
        assert_eq!(out1.reward, 1.0);
        assert_eq!(env.state().fireworks[0], 2);
    }

    #[test]
    fn discard_at_max_info_keeps_cap() {
        let mut env = mini_env();
        env.reset(11);
        assert_eq!(env.state().info_tokens, 3);
        let discard = env.config().encode_move(HanabiMove::Discard { slot: 0 });
        let out = env.step(discard).unwrap();
        assert_eq!(out.reward, 0.0);
        assert_eq!(env.state().info_tokens, 3);
    }

    #[test]
    fn unplayable_with_last_life_bombs_out() {
        let mut env = mini_env();
        env.reset(5);
        assert_eq!(env.state().life_tokens, 1);
        // A rank-2 card is never playable on an empty stack.
        plant_card(&mut env, 0, 0, Card { color: 0, rank: 2 });
        let play = env.config().encode_move(HanabiMove::Play { slot: 0 });
        let out = env.step(play).unwrap();
        assert!(out.done);
        assert_eq!(env.terminal_reason(), Some(TerminalReason::BombedOut));
        assert_eq!(env.score(), 0);
    }

    #[test]
    fn score_rules() {
        let mut env = mini_env();
        env.reset(1);
        assert_eq!(env.score(), 0);
        {
            let state = env.state.as_mut().unwrap();
            state.fireworks = vec![3, 1];
        }
        assert_eq!(env.score(), 4);
        {
            let state = env.state.as_mut().unwrap();
            state.done = Some(TerminalReason::BombedOut);
        }
        assert_eq!(env.score(), 0);
        // Stack-sum scoring keeps the 4 when the zero-on-bomb flag is off.
        let mut cfg = HanabiConfig::mini();
        cfg.bomb_zero_score = false;
        let mut env2 = HanabiEnv::new(cfg).unwrap();
        env2.reset(1);
        {
            let state = env2.state.as_mut().unwrap();
            state.fireworks = vec![3, 1];
            state.done = Some(TerminalReason::BombedOut);
        }
        assert_eq!(env2.score(), 4);
    }

    #[test]
    fn hints_require_tokens_and_matching_cards() {
        let mut env = mini_env();
        env.reset(2);
        {
            let state = env.state.as_mut().unwrap();
            state.info_tokens = 0;
        }
        let hint = env.config().encode_move(HanabiMove::HintColor { color: 0 });
        let err = env.step(hint).unwrap_err();
        assert!(matches!(err, EnvError::IllegalAction { .. }));
        assert!(err.to_string().contains("info tokens"));
    }

    #[test]
    fn hint_reveals_all_matching_cards_and_negative_info() {
        let mut env = mini_env();
        env.reset(4);
        plant_card(&mut env, 1, 0, Card { color: 0, rank: 0 });
        plant_card(&mut env, 1, 1, Card { color: 1, rank: 2 });
        let hint = env.config().encode_move(HanabiMove::HintColor { color: 0 });
        env.step(hint).unwrap();
        let know = &env.state().knowledge[1];
        assert_eq!(know[0].color_hinted, Some(0));
        assert_eq!(know[0].possible_colors, 0b01);
        assert_eq!(know[1].color_hinted, None);
        assert_eq!(know[1].possible_colors, 0b10, "negative info rules out color 0");
        let touched = env.state().last_action.unwrap().touched_slots;
        assert_eq!(touched, 0b01);
    }

    #[test]
    fn deck_exhaustion_grants_one_final_turn_each() {
        let mut cfg = HanabiConfig::mini();
        cfg.num_life_tokens = 3; // avoid early bombs in this scripted game
        let mut env = HanabiEnv::new(cfg).unwrap();
        env.reset(6);
        // Discard until the deck runs out, then count the extra turns.
        let mut turns_after_empty = 0;
        let mut was_empty = false;
        loop {
            let discard = env.config().encode_move(HanabiMove::Discard { slot: 0 });
            let out = env.step(discard).unwrap();
            if was_empty {
                turns_after_empty += 1;
            }
            if env.state().deck.is_empty() && !was_empty {
                was_empty = true;
            }
            if out.done {
                break;
            }
        }
        assert_eq!(env.terminal_reason(), Some(TerminalReason::DeckExhausted));
        assert_eq!(turns_after_empty, env.config().num_players);
    }

    #[test]
    fn replay_reproduces_observations() {
        let mut env = mini_env();
        let seed = 12345;
        env.reset(seed);
        let mut actions = Vec::new();
        let mut observations = Vec::new();
        let mut rng = SplitMix64::new(777);
        while !env.is_done() {
            let p = env.current_player();
            observations.push(env.observe(p));
            let legal = env.legal_actions(p);
            let a = legal[rng.next_below(legal.len() as u64) as usize];
            actions.push(a);
            env.step(a).unwrap();
        }
        let mut env2 = mini_env();
        env2.reset(seed);
        for (i, &a) in actions.iter().enumerate() {
            let p = env2.current_player();
            assert_eq!(env2.observe(p), observations[i], "observation {i} diverged");
            env2.step(a).unwrap();
        }
        assert_eq!(env2.terminal_reason(), env.terminal_reason());
    }

    #[test]
    fn observation_hides_own_hand() {
        // Flipping a hidden own-card identity (hints held consistent) must
        // not change the encoded observation. Exhaustive over all identities
        // compatible with fresh knowledge on the mini config.
        let mut env = mini_env();
        env.reset(9);
        let base_obs = env.observe(0);
        let deck = env.config().full_deck();
        let mut seen = std::collections::HashSet::new();
        for &replacement in &deck {
            let mut env2 = env.clone();
            {
                let state = env2.state.as_mut().unwrap();
                state.hands[0][0] = replacement;
            }
            // Partner's view changes; own view must not.
            assert_eq!(env2.observe(0), base_obs);
            seen.insert(replacement);
        }
        assert!(seen.len() >= 5);
    }

    #[test]
    fn score_monotone_and_rewards_match_score_when_not_bombed() {
        let mut env = mini_env();
        let mut rng = SplitMix64::new(31);
        for seed in 0..200 {
            env.reset(seed);
            let mut total = 0.0;
            let mut prev_stacks = 0;
            loop {
                let p = env.current_player();
                let legal = env.legal_actions(p);
                let a = legal[rng.next_below(legal.len() as u64) as usize];
                let out = env.step(a).unwrap();
                total += out.reward;
                let stacks = HanabiEnv::stack_sum(env.state());
                assert!(stacks >= prev_stacks, "stacks never shrink");
                prev_stacks = stacks;
                if out.done {
                    break;
                }
            }
            assert!(
                (total - env.score() as f64).abs() < 1e-9,
                "return {total} != score {} (seed {seed}, reason {:?})",
                env.score(),
                env.terminal_reason()
            );
        }
    }
}
