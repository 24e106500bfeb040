//! Prioritized trajectory replay: ring buffer with oldest-first eviction and
//! proportional sampling over `priority^alpha` via a sum tree. Safe for
//! concurrent insert/sample when wrapped in the buffer's mutex handle.

use rand::Rng;
use std::sync::Mutex;

/// Priorities below this floor still get a sliver of sampling mass so a
/// zero-TD-error trajectory cannot be starved forever.
const MIN_TREE_MASS: f64 = 1e-6;

#[derive(Debug)]
struct SumTree {
    /// Binary heap layout over `2 * leaf_count` nodes; leaves hold
    /// `priority^alpha` mass.
    nodes: Vec<f64>,
    leaf_count: usize,
}

impl SumTree {
    fn new(capacity: usize) -> Self {
        let leaf_count = capacity.next_power_of_two().max(1);
        Self {
            nodes: vec![0.0; 2 * leaf_count],
            leaf_count,
        }
    }

    fn set(&mut self, index: usize, mass: f64) {
        let mut node = self.leaf_count + index;
        self.nodes[node] = mass;
        while node > 1 {
            node /= 2;
            self.nodes[node] = self.nodes[2 * node] + self.nodes[2 * node + 1];
        }
    }

    fn total(&self) -> f64 {
        self.nodes[1]
    }

    fn mass(&self, index: usize) -> f64 {
        self.nodes[self.leaf_count + index]
    }

    /// Finds the leaf whose cumulative interval contains `target`.
    fn locate(&self, mut target: f64) -> usize {
        let mut node = 1;
        while node < self.leaf_count {
            let left = self.nodes[2 * node];
            if target < left {
                node = 2 * node;
            } else {
                target -= left;
                node = 2 * node + 1;
            }
        }
        node - self.leaf_count
    }
}

/// One sampled batch element.
#[derive(Debug, Clone, Copy)]
pub struct SampleRef {
    pub index: usize,
    /// `(1 / (size * P(i)))^beta`, normalized by the batch maximum.
    pub importance_weight: f64,
}

#[derive(Debug)]
struct ReplayInner<T> {
    entries: Vec<Option<(T, f64)>>,
    head: usize,
    size: usize,
    tree: SumTree,
    total_frames_inserted: usize,
    max_priority_seen: f64,
}

/// Prioritized replay over items of type `T` (trajectories or per-seat
/// rollouts), sampling with probability proportional to `priority^alpha`.
#[derive(Debug)]
pub struct PrioritizedReplay<T> {
    inner: Mutex<ReplayInner<T>>,
    capacity: usize,
    priority_exponent: f64,
    importance_weight_exponent: f64,
}

impl<T> PrioritizedReplay<T> {
    pub fn new(capacity: usize, priority_exponent: f64, importance_weight_exponent: f64) -> Self {
        assert!(capacity > 0);
        Self {
            inner: Mutex::new(ReplayInner {
                entries: (0..capacity).map(|_| None).collect(),
                head: 0,
                size: 0,
                tree: SumTree::new(capacity),
                total_frames_inserted: 0,
                max_priority_seen: 1.0,
            }),
            capacity,
            priority_exponent,
            importance_weight_exponent,
        }
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().size
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Cumulative count of frames inserted, for burn-in accounting.
    pub fn frames_inserted(&self) -> usize {
        self.inner.lock().unwrap().total_frames_inserted
    }

    pub fn max_priority_seen(&self) -> f64 {
        self.inner.lock().unwrap().max_priority_seen
    }

    /// Inserts an item, evicting the oldest entry when full. `frames` counts
    /// the transitions the item contributes toward burn-in.
    pub fn insert(&self, item: T, priority: f64, frames: usize) {
        assert!(priority >= 0.0 && priority.is_finite());
        let mut inner = self.inner.lock().unwrap();
        let slot = inner.head;
        inner.entries[slot] = Some((item, priority));
        let mass = priority
            .powf(self.priority_exponent)
            .max(MIN_TREE_MASS);
        inner.tree.set(slot, mass);
        inner.head = (inner.head + 1) % self.capacity;
        inner.size = (inner.size + 1).min(self.capacity);
        inner.total_frames_inserted += frames;
        if priority > inner.max_priority_seen {
            inner.max_priority_seen = priority;
        }
    }

    /// Samples `batch_size` indices with replacement, proportional to
    /// priority mass, returning batch-max-normalized importance weights.
    pub fn sample<R: Rng>(&self, batch_size: usize, rng: &mut R) -> Vec<SampleRef> {
        let inner = self.inner.lock().unwrap();
        assert!(inner.size > 0, "cannot sample an empty buffer");
        let total = inner.tree.total();
        let mut picks = Vec::with_capacity(batch_size);
        let mut max_weight = 0.0f64;
        for _ in 0..batch_size {
            let target = rng.gen_range(0.0..total);
            let index = inner.tree.locate(target);
            debug_assert!(inner.entries[index].is_some());
            let prob = inner.tree.mass(index) / total;
            let weight = (1.0 / (inner.size as f64 * prob)).powf(self.importance_weight_exponent);
            max_weight = max_weight.max(weight);
            picks.push((index, weight));
        }
        picks
            .into_iter()
            .map(|(index, weight)| SampleRef {
                index,
                importance_weight: weight / max_weight,
            })
            .collect()
    }

    /// Runs `f` over the item at `index` (panics if evicted meanwhile and
    /// reinserted; callers update priorities in the same gradient step).
    pub fn with_item<U>(&self, index: usize, f: impl FnOnce(&T) -> U) -> U {
        let inner = self.inner.lock().unwrap();
        let (item, _) = inner.entries[index].as_ref().expect("slot occupied");
        f(item)
    }

    pub fn update_priority(&self, index: usize, priority: f64) {
        assert!(priority >= 0.0 && priority.is_finite());
        let mut inner = self.inner.lock().unwrap();
        if let Some((_, stored)) = inner.entries[index].as_mut() {
            *stored = priority;
            let mass = priority
                .powf(self.priority_exponent)
                .max(MIN_TREE_MASS);
            inner.tree.set(index, mass);
            if priority > inner.max_priority_seen {
                inner.max_priority_seen = priority;
            }
        }
    }

    pub fn priority(&self, index: usize) -> Option<f64> {
        let inner = self.inner.lock().unwrap();
        inner.entries[index].as_ref().map(|(_, p)| *p)
    }
}

/// Complete buffer contents for checkpoint/resume.
#[derive(Debug, Clone)]
pub struct ReplayState<T> {
    pub entries: Vec<Option<(T, f64)>>,
    pub head: usize,
    pub total_frames_inserted: usize,
    pub max_priority_seen: f64,
}

impl<T: Clone> PrioritizedReplay<T> {
    pub fn export_state(&self) -> ReplayState<T> {
        let inner = self.inner.lock().unwrap();
        ReplayState {
            entries: inner.entries.clone(),
            head: inner.head,
            total_frames_inserted: inner.total_frames_inserted,
            max_priority_seen: inner.max_priority_seen,
        }
    }

    pub fn import_state(
        state: ReplayState<T>,
        priority_exponent: f64,
        importance_weight_exponent: f64,
    ) -> Self {
        let capacity = state.entries.len();
        let replay = Self::new(capacity, priority_exponent, importance_weight_exponent);
        {
            let mut inner = replay.inner.lock().unwrap();
            let mut size = 0;
            for (slot, entry) in state.entries.iter().enumerate() {
                if let Some((_, priority)) = entry {
                    let mass = priority.powf(priority_exponent).max(MIN_TREE_MASS);
                    inner.tree.set(slot, mass);
                    size += 1;
                }
            }
            inner.entries = state.entries;
            inner.head = state.head;
            inner.size = size;
            inner.total_frames_inserted = state.total_frames_inserted;
            inner.max_priority_seen = state.max_priority_seen;
        }
        replay
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn eviction_is_oldest_first() {
        let replay: PrioritizedReplay<u32> = PrioritizedReplay::new(3, 0.9, 0.6);
        for i in 0..5u32 {
            replay.insert(i, 1.0, 1);
        }
        assert_eq!(replay.len(), 3);
        // Slots hold 3, 4 (wrapped over 0, 1) and 2.
        let mut values = Vec::new();
        for slot in 0..3 {
            values.push(replay.with_item(slot, |v| *v));
        }
        values.sort_unstable();
        assert_eq!(values, vec![2, 3, 4]);
        assert_eq!(replay.frames_inserted(), 5);
    }

    #[test]
    fn sampling_tracks_priority_mass() {
        let replay: PrioritizedReplay<usize> = PrioritizedReplay::new(4, 1.0, 0.6);
        replay.insert(0, 1.0, 1);
        replay.insert(1, 3.0, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = [0usize; 2];
        let draws = 40_000;
        for s in replay.sample(draws, &mut rng) {
            counts[s.index] += 1;
        }
        let frac = counts[1] as f64 / draws as f64;
        assert!((frac - 0.75).abs() < 0.02, "fraction {frac}");
    }

    #[test]
    fn importance_weights_normalized_to_unit_interval() {
        let replay: PrioritizedReplay<usize> = PrioritizedReplay::new(8, 0.9, 0.6);
        for i in 0..8 {
            replay.insert(i, (i + 1) as f64, 1);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for s in replay.sample(64, &mut rng) {
            assert!(s.importance_weight > 0.0 && s.importance_weight <= 1.0);
        }
    }

    #[test]
    fn priority_update_changes_sampling() {
        let replay: PrioritizedReplay<usize> = PrioritizedReplay::new(2, 1.0, 0.6);
        replay.insert(0, 1.0, 1);
        replay.insert(1, 1.0, 1);
        replay.update_priority(0, 100.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let picks = replay.sample(1000, &mut rng);
        let zeros = picks.iter().filter(|s| s.index == 0).count();
        assert!(zeros > 950, "index 0 drawn {zeros}/1000");
        assert_eq!(replay.priority(0), Some(100.0));
    }

    #[test]
    fn concurrent_insert_and_sample() {
        use std::sync::Arc;
        let replay: Arc<PrioritizedReplay<u64>> = Arc::new(PrioritizedReplay::new(128, 0.9, 0.6));
        for i in 0..16 {
            replay.insert(i, 1.0, 1);
        }
        let mut handles = Vec::new();
        for t in 0..4 {
            let r = Arc::clone(&replay);
            handles.push(std::thread::spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(t);
                for i in 0..2000u64 {
                    r.insert(i, 1.0 + (i % 7) as f64, 1);
                    let batch = r.sample(8, &mut rng);
                    assert_eq!(batch.len(), 8);
                }
            }));
        }
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(replay.len(), 128);
    }
}
