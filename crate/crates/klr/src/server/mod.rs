//! Versioned policy store for the synchronous client-server exchange,
//! usable in-process or over the framed socket protocol in [`wire`].
//!
//! Each registered level holds a single latest slot, a short history of past
//! pushes (so clients can fetch an exact version during lockstep training),
//! and a separate archive ring filled by the snapshot schedule for the belief
//! experiments. Level id 0 is reserved: it denotes the built-in
//! uniform-random policy and is never stored; partner sets include it as an
//! empty marker snapshot that clients instantiate locally.

pub mod wire;

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};
use std::sync::Mutex;
use thiserror::Error;

/// Reserved level id for the virtual uniform-random policy.
pub const UNIFORM_LEVEL_ID: u32 = 0;

/// Past pushes retained per level for version-exact fetches.
pub const PUSH_HISTORY_DEPTH: usize = 32;

/// Default archive ring capacity per level.
pub const DEFAULT_RING_CAPACITY: usize = 16;

/// FNV-1a 64-bit digest; the wire- and store-level payload checksum.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xCBF2_9CE4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
    }
    hash
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ServerError {
    #[error("level {0} is not registered")]
    Unregistered(u32),
    #[error("level {level} has no snapshot at version {version} yet")]
    NotReady { level: u32, version: u64 },
    #[error("level {level} version {version} evicted from history")]
    Evicted { level: u32, version: u64 },
    #[error("level {0} payload failed checksum validation")]
    Corrupt(u32),
    #[error("level id 0 is reserved for the uniform policy")]
    ReservedLevel,
    #[error("wire protocol error: {0}")]
    Wire(String),
}

/// Which partner set a client is training against (Algorithm-style rules).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PartnerSetRule {
    /// `{π_{k-1}}`
    Klr,
    /// `{π_0, …, π_{k-1}}`
    Ch,
    /// `{π_0, …, π_k}` for the best-response client whose own id is `k+1`.
    Br,
}

impl PartnerSetRule {
    pub fn as_u8(self) -> u8 {
        match self {
            PartnerSetRule::Klr => 1,
            PartnerSetRule::Ch => 2,
            PartnerSetRule::Br => 3,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            1 => PartnerSetRule::Klr,
            2 => PartnerSetRule::Ch,
            3 => PartnerSetRule::Br,
            _ => return None,
        })
    }

    /// Partner level ids for a client with id `level`.
    pub fn partner_levels(self, level: u32) -> Vec<u32> {
        match self {
            PartnerSetRule::Klr => vec![level - 1],
            PartnerSetRule::Ch | PartnerSetRule::Br => (0..level).collect(),
        }
    }
}

/// A versioned, checksummed policy payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicySnapshot {
    pub level_id: u32,
    pub version: u64,
    pub payload: Vec<u8>,
    pub checksum: u64,
}

impl PolicySnapshot {
    pub fn uniform_marker() -> Self {
        Self {
            level_id: UNIFORM_LEVEL_ID,
            version: 0,
            payload: Vec::new(),
            checksum: 0,
        }
    }

    pub fn is_uniform_marker(&self) -> bool {
        self.level_id == UNIFORM_LEVEL_ID
    }

    pub fn verify(&self) -> bool {
        self.is_uniform_marker() || fnv1a64(&self.payload) == self.checksum
    }
}

#[derive(Debug, Default)]
struct LevelSlot {
    latest_version: u64,
    history: VecDeque<PolicySnapshot>,
    archive: VecDeque<PolicySnapshot>,
}

/// In-memory policy store. All operations are linearizable behind one lock;
/// payloads are immutable once stored, so fetches can never observe a torn
/// write, and every fetch re-validates the checksum.
#[derive(Debug)]
pub struct PolicyStore {
    inner: Mutex<BTreeMap<u32, LevelSlot>>,
    ring_capacity: usize,
}

impl PolicyStore {
    pub fn new(ring_capacity: usize) -> Self {
        Self {
            inner: Mutex::new(BTreeMap::new()),
            ring_capacity: ring_capacity.max(1),
        }
    }

    pub fn register(&self, level_id: u32) -> Result<(), ServerError> {
        if level_id == UNIFORM_LEVEL_ID {
            return Err(ServerError::ReservedLevel);
        }
        let mut inner = self.inner.lock().unwrap();
        inner.entry(level_id).or_default();
        Ok(())
    }

    pub fn registered_levels(&self) -> Vec<u32> {
        self.inner.lock().unwrap().keys().copied().collect()
    }

    /// Stores a payload as the level's next version and returns that version.
    pub fn push(&self, level_id: u32, payload: Vec<u8>) -> Result<u64, ServerError> {
        if level_id == UNIFORM_LEVEL_ID {
            return Err(ServerError::ReservedLevel);
        }
        let mut inner = self.inner.lock().unwrap();
        let slot = inner
            .get_mut(&level_id)
            .ok_or(ServerError::Unregistered(level_id))?;
        slot.latest_version += 1;
        let snapshot = PolicySnapshot {
            level_id,
            version: slot.latest_version,
            checksum: fnv1a64(&payload),
            payload,
        };
        slot.history.push_back(snapshot);
        while slot.history.len() > PUSH_HISTORY_DEPTH {
            slot.history.pop_front();
        }
        Ok(slot.latest_version)
    }

    /// Fetches `version` of a level (0 means latest).
    pub fn fetch(&self, level_id: u32, version: u64) -> Result<PolicySnapshot, ServerError> {
        if level_id == UNIFORM_LEVEL_ID {
            return Ok(PolicySnapshot::uniform_marker());
        }
        let inner = self.inner.lock().unwrap();
        let slot = inner
            .get(&level_id)
            .ok_or(ServerError::Unregistered(level_id))?;
        let want = if version == 0 {
            if slot.latest_version == 0 {
                return Err(ServerError::NotReady {
                    level: level_id,
                    version: 1,
                });
            }
            slot.latest_version
        } else {
            version
        };
        if want > slot.latest_version {
            return Err(ServerError::NotReady {
                level: level_id,
                version: want,
            });
        }
        let snapshot = slot
            .history
            .iter()
            .find(|s| s.version == want)
            .ok_or(ServerError::Evicted {
                level: level_id,
                version: want,
            })?
            .clone();
        if !snapshot.verify() {
            return Err(ServerError::Corrupt(level_id));
        }
        Ok(snapshot)
    }

    /// Latest snapshots of every partner level under `rule` for the client
    /// `level_id`, or the exact `version` of each when non-zero. Level 0
    /// contributes the uniform marker.
    pub fn fetch_partner_set(
        &self,
        level_id: u32,
        rule: PartnerSetRule,
        version: u64,
    ) -> Result<Vec<PolicySnapshot>, ServerError> {
        rule.partner_levels(level_id)
            .into_iter()
            .map(|level| self.fetch(level, if level == UNIFORM_LEVEL_ID { 0 } else { version }))
            .collect()
    }

    /// Copies the latest pushed snapshot of a level into its archive ring,
    /// evicting the oldest archive when the ring is full.
    pub fn archive(&self, level_id: u32) -> Result<u64, ServerError> {
        let snapshot = self.fetch(level_id, 0)?;
        let version = snapshot.version;
        let mut inner = self.inner.lock().unwrap();
        let slot = inner
            .get_mut(&level_id)
            .ok_or(ServerError::Unregistered(level_id))?;
        slot.archive.push_back(snapshot);
        while slot.archive.len() > self.ring_capacity {
            slot.archive.pop_front();
        }
        Ok(version)
    }

    /// The archive ring of a level, oldest first.
    pub fn snapshot_ring(&self, level_id: u32) -> Result<Vec<PolicySnapshot>, ServerError> {
        let inner = self.inner.lock().unwrap();
        let slot = inner
            .get(&level_id)
            .ok_or(ServerError::Unregistered(level_id))?;
        Ok(slot.archive.iter().cloned().collect())
    }

    /// Registered levels with their latest versions.
    pub fn list(&self) -> Vec<(u32, u64)> {
        let inner = self.inner.lock().unwrap();
        inner
            .iter()
            .map(|(level, slot)| (*level, slot.latest_version))
            .collect()
    }
}

/// Uniform client surface over the in-process store and the socket client,
/// so training code is identical in both modes.
pub trait ServerHandle: Send {
    fn push(&mut self, level_id: u32, payload: Vec<u8>) -> Result<u64, ServerError>;
    fn fetch(&mut self, level_id: u32, version: u64) -> Result<PolicySnapshot, ServerError>;
    fn fetch_partner_set(
        &mut self,
        level_id: u32,
        rule: PartnerSetRule,
        version: u64,
    ) -> Result<Vec<PolicySnapshot>, ServerError>;
    fn archive(&mut self, level_id: u32) -> Result<u64, ServerError>;
    fn snapshot_ring(&mut self, level_id: u32) -> Result<Vec<PolicySnapshot>, ServerError>;
    fn list(&mut self) -> Result<Vec<(u32, u64)>, ServerError>;
}

/// In-process handle: direct calls against a shared store.
pub struct LocalHandle {
    store: std::sync::Arc<PolicyStore>,
}

impl LocalHandle {
    pub fn new(store: std::sync::Arc<PolicyStore>) -> Self {
        Self { store }
    }
}

impl ServerHandle for LocalHandle {
    fn push(&mut self, level_id: u32, payload: Vec<u8>) -> Result<u64, ServerError> {
        self.store.push(level_id, payload)
    }

    fn fetch(&mut self, level_id: u32, version: u64) -> Result<PolicySnapshot, ServerError> {
        self.store.fetch(level_id, version)
    }

    fn fetch_partner_set(
        &mut self,
        level_id: u32,
        rule: PartnerSetRule,
        version: u64,
    ) -> Result<Vec<PolicySnapshot>, ServerError> {
        self.store.fetch_partner_set(level_id, rule, version)
    }

    fn archive(&mut self, level_id: u32) -> Result<u64, ServerError> {
        self.store.archive(level_id)
    }

    fn snapshot_ring(&mut self, level_id: u32) -> Result<Vec<PolicySnapshot>, ServerError> {
        self.store.snapshot_ring(level_id)
    }

    fn list(&mut self) -> Result<Vec<(u32, u64)>, ServerError> {
        Ok(self.store.list())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[test]
    fn versions_are_monotone_per_level() {
        let store = PolicyStore::new(4);
        store.register(2).unwrap();
        assert_eq!(store.push(2, vec![1]).unwrap(), 1);
        assert_eq!(store.push(2, vec![2]).unwrap(), 2);
    }

    #[test]
    fn push_fetch_round_trip_is_byte_identical() {
        let store = PolicyStore::new(4);
        store.register(1).unwrap();
        let payload = vec![9u8, 8, 7, 6, 5];
        store.push(1, payload.clone()).unwrap();
        let snap = store.fetch(1, 0).unwrap();
        assert_eq!(snap.payload, payload);
        assert!(snap.verify());
    }

    #[test]
    fn unregistered_level_is_rejected() {
        let store = PolicyStore::new(4);
        assert_eq!(store.push(3, vec![]), Err(ServerError::Unregistered(3)));
        assert_eq!(
            store.fetch(3, 0).unwrap_err(),
            ServerError::Unregistered(3)
        );
        assert_eq!(store.register(0).unwrap_err(), ServerError::ReservedLevel);
    }

    #[test]
    fn fetch_before_push_is_not_ready() {
        let store = PolicyStore::new(4);
        store.register(1).unwrap();
        assert!(matches!(
            store.fetch(1, 0),
            Err(ServerError::NotReady { .. })
        ));
    }

    #[test]
    fn partner_sets_follow_the_rules() {
        let store = PolicyStore::new(4);
        for level in 1..=6 {
            store.register(level).unwrap();
        }
        for level in 1..=5 {
            store.push(level, vec![level as u8]).unwrap();
        }
        // KLR level 1: only the uniform marker.
        let set = store.fetch_partner_set(1, PartnerSetRule::Klr, 0).unwrap();
        assert_eq!(set.len(), 1);
        assert!(set[0].is_uniform_marker());
        // KLR level 3: exactly one snapshot, level 2, latest version.
        let set = store.fetch_partner_set(3, PartnerSetRule::Klr, 0).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set[0].level_id, 2);
        assert_eq!(set[0].version, 1);
        // BR over a 5-level hierarchy (client id 6): six entries, levels 0-5.
        let set = store.fetch_partner_set(6, PartnerSetRule::Br, 0).unwrap();
        assert_eq!(set.len(), 6);
        assert_eq!(
            set.iter().map(|s| s.level_id).collect::<Vec<_>>(),
            vec![0, 1, 2, 3, 4, 5]
        );
        // CH level 4: levels 0-3.
        let set = store.fetch_partner_set(4, PartnerSetRule::Ch, 0).unwrap();
        assert_eq!(set.len(), 4);
    }

    #[test]
    fn version_exact_fetch_and_eviction() {
        let store = PolicyStore::new(4);
        store.register(1).unwrap();
        for i in 0..40u8 {
            store.push(1, vec![i]).unwrap();
        }
        let snap = store.fetch(1, 40).unwrap();
        assert_eq!(snap.payload, vec![39]);
        let snap = store.fetch(1, 20).unwrap();
        assert_eq!(snap.payload, vec![19]);
        assert!(matches!(store.fetch(1, 2), Err(ServerError::Evicted { .. })));
        assert!(matches!(
            store.fetch(1, 99),
            Err(ServerError::NotReady { .. })
        ));
    }

    #[test]
    fn archive_ring_evicts_oldest() {
        let store = PolicyStore::new(3);
        store.register(1).unwrap();
        for i in 0..5u8 {
            store.push(1, vec![i]).unwrap();
            store.archive(1).unwrap();
        }
        let ring = store.snapshot_ring(1).unwrap();
        assert_eq!(ring.len(), 3);
        assert_eq!(
            ring.iter().map(|s| s.version).collect::<Vec<_>>(),
            vec![3, 4, 5]
        );
    }

    #[test]
    fn concurrent_pushes_to_distinct_levels() {
        let store = Arc::new(PolicyStore::new(4));
        for level in 1..=5 {
            store.register(level).unwrap();
        }
        let mut handles = Vec::new();
        for level in 1..=5u32 {
            let store = Arc::clone(&store);
            handles.push(std::thread::spawn(move || {
                for i in 0..200u64 {
                    let v = store.push(level, vec![level as u8, i as u8]).unwrap();
                    assert_eq!(v, i + 1);
                    // Read-your-writes: an immediate fetch sees >= v.
                    let snap = store.fetch(level, 0).unwrap();
                    assert!(snap.version >= v);
                }
            }));
        }
        for h in handles {
            h.join().unwrap();
        }
        for (level, version) in store.list() {
            if level != 6 {
                assert_eq!(version, 200, "level {level}");
            }
        }
    }

    #[test]
    fn fnv_checksum_reference_values() {
        // FNV-1a 64 published test vectors.
        assert_eq!(fnv1a64(b""), 0xCBF2_9CE4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xAF63_DC4C_8601_EC8C);
        assert_eq!(fnv1a64(b"foobar"), 0x8594_4171_F739_67E8);
    }
}
