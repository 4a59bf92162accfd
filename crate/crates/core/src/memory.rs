//! Capacity-bounded exemplar store.
//!
//! Every stored sample is owned by exactly one per-class bucket, the class
//! it was inserted under. Bucket sizes drive the class-balanced selection
//! rule; retrieval by class goes through a separate index that covers every
//! class present in a stored mask, whichever bucket owns the sample.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::{LabelId, Sample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Class-balanced exemplar selection with per-class reservoir counters.
    ClassBalanced,
    /// Plain reservoir sampling over the whole stream.
    Reservoir,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertOutcome {
    Stored { owner: LabelId, evicted: Option<u64> },
    Skipped,
}

/// Per-class quota `capacity / classes`, kept as an exact ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Quota {
    pub capacity: usize,
    pub classes: usize,
}

impl Quota {
    /// `size < capacity / classes`, compared without division.
    pub fn exceeds(&self, size: usize) -> bool {
        size * self.classes < self.capacity
    }

    pub fn value(&self) -> f64 {
        self.capacity as f64 / self.classes as f64
    }
}

#[derive(Debug, Clone)]
struct Stored {
    owner: LabelId,
    sample: Arc<Sample>,
}

#[derive(Debug, Clone)]
pub struct ExemplarMemory {
    capacity: usize,
    stored: BTreeMap<u64, Stored>,
    buckets: BTreeMap<LabelId, Vec<u64>>,
    class_index: BTreeMap<LabelId, BTreeSet<u64>>,
    seen: BTreeMap<LabelId, u64>,
    seen_total: u64,
}

impl ExemplarMemory {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Domain("memory capacity must be positive"));
        }
        Ok(Self {
            capacity,
            stored: BTreeMap::new(),
            buckets: BTreeMap::new(),
            class_index: BTreeMap::new(),
            seen: BTreeMap::new(),
            seen_total: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.stored.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stored.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.stored.len() >= self.capacity
    }

    pub fn contains(&self, id: u64) -> bool {
        self.stored.contains_key(&id)
    }

    pub fn bucket_len(&self, class: LabelId) -> usize {
        self.buckets.get(&class).map_or(0, Vec::len)
    }

    pub fn bucket_sizes(&self) -> BTreeMap<LabelId, usize> {
        self.buckets.iter().map(|(c, b)| (*c, b.len())).collect()
    }

    /// Number of streamed images that contained `class`.
    pub fn seen_count(&self, class: LabelId) -> u64 {
        self.seen.get(&class).copied().unwrap_or(0)
    }

    pub fn seen_total(&self) -> u64 {
        self.seen_total
    }

    /// Counts one streamed image: once per foreground class it contains.
    pub fn record_seen(&mut self, sample: &Sample) {
        self.seen_total += 1;
        for class in sample.foreground_classes() {
            *self.seen.entry(class).or_insert(0) += 1;
        }
    }

    pub fn min_bucket_floor(&self, num_foreground_classes: usize) -> Result<Quota> {
        if num_foreground_classes == 0 {
            return Err(Error::Domain("quota needs at least one foreground class"));
        }
        Ok(Quota {
            capacity: self.capacity,
            classes: num_foreground_classes,
        })
    }

    /// Stored samples in ascending id order, with their owning class.
    pub fn iter(&self) -> impl Iterator<Item = (LabelId, &Arc<Sample>)> {
        self.stored.values().map(|s| (s.owner, &s.sample))
    }

    /// Stored samples whose mask contains `class`, ascending by id.
    pub fn samples_with_class(&self, class: LabelId) -> Vec<Arc<Sample>> {
        self.class_index
            .get(&class)
            .map(|ids| ids.iter().map(|id| self.stored[id].sample.clone()).collect())
            .unwrap_or_default()
    }

    pub fn classes_present(&self) -> BTreeSet<LabelId> {
        self.class_index.keys().copied().collect()
    }

    /// Records the image as seen and offers it under `policy`.
    pub fn offer<R: Rng + ?Sized>(
        &mut self,
        sample: Arc<Sample>,
        policy: Policy,
        num_foreground_classes: usize,
        rng: &mut R,
    ) -> Result<InsertOutcome> {
        self.record_seen(&sample);
        match policy {
            Policy::ClassBalanced => self.cbes_insert(sample, num_foreground_classes, rng),
            Policy::Reservoir => self.reservoir_insert(sample, rng),
        }
    }

    /// Class-balanced exemplar selection for one image. The caller must have
    /// counted the image with [`record_seen`](Self::record_seen) already.
    pub fn cbes_insert<R: Rng + ?Sized>(
        &mut self,
        sample: Arc<Sample>,
        num_foreground_classes: usize,
        rng: &mut R,
    ) -> Result<InsertOutcome> {
        let classes = sample.foreground_classes();
        if classes.is_empty() {
            return Err(Error::NoForeground { id: sample.id });
        }
        self.check_new(&sample)?;
        let quota = self.min_bucket_floor(num_foreground_classes)?;

        // ties resolve to the smallest class id
        let (c_min, min_size) = classes
            .iter()
            .map(|&c| (c, self.bucket_len(c)))
            .min_by_key(|&(c, size)| (size, c))
            .expect("nonempty class set");

        if quota.exceeds(min_size) || !self.is_full() {
            let evicted = if self.is_full() {
                let c_max = self
                    .buckets
                    .iter()
                    .map(|(c, b)| (*c, b.len()))
                    .max_by_key(|&(c, size)| (size, std::cmp::Reverse(c)))
                    .map(|(c, _)| c)
                    .expect("full memory has a bucket");
                Some(self.evict_random_from(c_max, rng))
            } else {
                None
            };
            self.store(c_min, sample);
            return Ok(InsertOutcome::Stored { owner: c_min, evicted });
        }

        for &class in &classes {
            let kept = self.bucket_len(class);
            let seen = self.seen_count(class);
            let draw: f64 = rng.random();
            if kept > 0 && seen > 0 && draw <= kept as f64 / seen as f64 {
                let evicted = self.evict_random_from(class, rng);
                self.store(class, sample);
                return Ok(InsertOutcome::Stored {
                    owner: class,
                    evicted: Some(evicted),
                });
            }
        }
        Ok(InsertOutcome::Skipped)
    }

    /// Reservoir sampling over the lifetime stream count. The replaced slot
    /// is a uniformly random stored sample; the owner is the smallest
    /// foreground class of the image.
    pub fn reservoir_insert<R: Rng + ?Sized>(&mut self, sample: Arc<Sample>, rng: &mut R) -> Result<InsertOutcome> {
        let owner = sample
            .foreground_classes()
            .into_iter()
            .next()
            .ok_or(Error::NoForeground { id: sample.id })?;
        self.check_new(&sample)?;
        if !self.is_full() {
            self.store(owner, sample);
            return Ok(InsertOutcome::Stored { owner, evicted: None });
        }
        let slot = rng.random_range(0..self.seen_total.max(1));
        if slot >= self.capacity as u64 {
            return Ok(InsertOutcome::Skipped);
        }
        let victim = *self
            .stored
            .keys()
            .nth(rng.random_range(0..self.stored.len()))
            .expect("full memory is nonempty");
        self.remove(victim);
        self.store(owner, sample);
        Ok(InsertOutcome::Stored {
            owner,
            evicted: Some(victim),
        })
    }

    fn check_new(&self, sample: &Sample) -> Result<()> {
        if self.stored.contains_key(&sample.id) {
            return Err(Error::Schedule(format!("sample {} is already stored", sample.id)));
        }
        Ok(())
    }

    fn evict_random_from<R: Rng + ?Sized>(&mut self, class: LabelId, rng: &mut R) -> u64 {
        let bucket = &self.buckets[&class];
        let victim = bucket[rng.random_range(0..bucket.len())];
        self.remove(victim);
        victim
    }

    fn store(&mut self, owner: LabelId, sample: Arc<Sample>) {
        let id = sample.id;
        for class in sample.mask.iter().flatten() {
            self.class_index.entry(*class).or_default().insert(id);
        }
        self.buckets.entry(owner).or_default().push(id);
        self.stored.insert(id, Stored { owner, sample });
    }

    fn remove(&mut self, id: u64) {
        let Some(entry) = self.stored.remove(&id) else {
            return;
        };
        if let Some(bucket) = self.buckets.get_mut(&entry.owner) {
            if let Some(pos) = bucket.iter().position(|&x| x == id) {
                bucket.remove(pos);
            }
            if bucket.is_empty() {
                self.buckets.remove(&entry.owner);
            }
        }
        for class in entry.sample.mask.iter().flatten() {
            if let Some(ids) = self.class_index.get_mut(class) {
                ids.remove(&id);
                if ids.is_empty() {
                    self.class_index.remove(class);
                }
            }
        }
    }

    /// Owning class and sample of every stored entry, in bucket order.
    pub fn snapshot(&self) -> Vec<(LabelId, Arc<Sample>)> {
        self.buckets
            .iter()
            .flat_map(|(owner, ids)| ids.iter().map(move |id| (*owner, self.stored[id].sample.clone())))
            .collect()
    }

    pub fn seen_counts(&self) -> &BTreeMap<LabelId, u64> {
        &self.seen
    }

    /// Rebuilds a memory from a snapshot plus its stream counters.
    pub fn restore(
        capacity: usize,
        entries: Vec<(LabelId, Arc<Sample>)>,
        seen: BTreeMap<LabelId, u64>,
        seen_total: u64,
    ) -> Result<Self> {
        let mut mem = Self::new(capacity)?;
        if entries.len() > capacity {
            return Err(Error::Schedule(format!(
                "snapshot holds {} samples for capacity {capacity}",
                entries.len()
            )));
        }
        for (owner, sample) in entries {
            mem.check_new(&sample)?;
            mem.store(owner, sample);
        }
        mem.seen = seen;
        mem.seen_total = seen_total;
        Ok(mem)
    }

    /// Rebuilds the class index from stored masks and compares.
    pub fn index_is_consistent(&self) -> bool {
        let mut rebuilt: BTreeMap<LabelId, BTreeSet<u64>> = BTreeMap::new();
        for (id, s) in &self.stored {
            for class in s.sample.mask.iter().flatten() {
                rebuilt.entry(*class).or_default().insert(*id);
            }
        }
        let owned: usize = self.buckets.values().map(Vec::len).sum();
        rebuilt == self.class_index && owned == self.stored.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label::FeatureMap;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(id: u64, classes: &[u16]) -> Arc<Sample> {
        let mask = classes.iter().map(|&c| Some(LabelId(c))).collect::<Vec<_>>();
        let n = mask.len();
        Arc::new(Sample::new(id, FeatureMap::zeros(1, n, 1), mask, 1).unwrap())
    }

    #[test]
    fn quota_examples() {
        let mem = ExemplarMemory::new(100).unwrap();
        let q = mem.min_bucket_floor(20).unwrap();
        assert!(q.exceeds(4) && !q.exceeds(5));
        assert_eq!(q.value(), 5.0);
        let q = ExemplarMemory::new(20).unwrap().min_bucket_floor(20).unwrap();
        assert!(q.exceeds(0) && !q.exceeds(1));
        // 10/3: sizes 0..=3 are under, 4 is over
        let q = ExemplarMemory::new(10).unwrap().min_bucket_floor(3).unwrap();
        let under: Vec<usize> = (0..6).filter(|&s| q.exceeds(s)).collect();
        assert_eq!(under, vec![0, 1, 2, 3]);
        assert!(mem.min_bucket_floor(0).is_err());
    }

    #[test]
    fn not_full_always_stores() {
        let mut mem = ExemplarMemory::new(5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for i in 0..5 {
            let out = mem.offer(sample(i, &[1]), Policy::ClassBalanced, 1, &mut rng).unwrap();
            assert!(matches!(out, InsertOutcome::Stored { evicted: None, .. }));
        }
        assert_eq!(mem.len(), 5);
    }

    #[test]
    fn full_with_everything_kept_replaces_on_first_class() {
        let mut mem = ExemplarMemory::new(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        mem.offer(sample(0, &[1]), Policy::ClassBalanced, 1, &mut rng).unwrap();
        mem.offer(sample(1, &[1]), Policy::ClassBalanced, 1, &mut rng).unwrap();
        // n_1 = m_1 = 2 before the next image; pretend it was not counted
        let out = mem.cbes_insert(sample(2, &[1]), 1, &mut rng).unwrap();
        assert!(matches!(
            out,
            InsertOutcome::Stored {
                owner: LabelId(1),
                evicted: Some(_)
            }
        ));
        assert!(mem.contains(2));
        assert_eq!(mem.len(), 2);
    }

    #[test]
    fn empty_foreground_rejected() {
        let mut mem = ExemplarMemory::new(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bg = Arc::new(Sample::new(9, FeatureMap::zeros(1, 2, 1), vec![Some(LabelId(0)), None], 0).unwrap());
        assert!(matches!(
            mem.cbes_insert(bg.clone(), 2, &mut rng),
            Err(Error::NoForeground { id: 9 })
        ));
        assert!(mem.reservoir_insert(bg, &mut rng).is_err());
        assert!(mem.is_empty());
    }

    #[test]
    fn retrieval_by_any_class() {
        let mut mem = ExemplarMemory::new(3).unwrap();
        assert!(mem.samples_with_class(LabelId(3)).is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        mem.offer(sample(4, &[3, 5]), Policy::ClassBalanced, 2, &mut rng)
            .unwrap();
        assert_eq!(mem.samples_with_class(LabelId(3))[0].id, 4);
        assert_eq!(mem.samples_with_class(LabelId(5))[0].id, 4);
        assert!(mem.samples_with_class(LabelId(7)).is_empty());
        assert_eq!(mem.bucket_len(LabelId(3)), 1);
        assert_eq!(mem.bucket_len(LabelId(5)), 0);
    }

    #[test]
    fn minority_class_takes_space_from_largest_bucket() {
        let mut mem = ExemplarMemory::new(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for i in 0..4 {
            mem.offer(sample(i, &[1]), Policy::ClassBalanced, 2, &mut rng).unwrap();
        }
        let out = mem.offer(sample(10, &[2]), Policy::ClassBalanced, 2, &mut rng).unwrap();
        assert!(matches!(
            out,
            InsertOutcome::Stored {
                owner: LabelId(2),
                evicted: Some(_)
            }
        ));
        assert_eq!(mem.bucket_len(LabelId(1)), 3);
        assert_eq!(mem.bucket_len(LabelId(2)), 1);
    }

    #[test]
    fn snapshot_restore_preserves_contents() {
        let mut mem = ExemplarMemory::new(6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..20 {
            let classes: &[u16] = if i % 3 == 0 { &[1, 2] } else { &[2] };
            mem.offer(sample(i, classes), Policy::ClassBalanced, 2, &mut rng)
                .unwrap();
        }
        let back = ExemplarMemory::restore(6, mem.snapshot(), mem.seen_counts().clone(), mem.seen_total()).unwrap();
        assert_eq!(back.bucket_sizes(), mem.bucket_sizes());
        assert_eq!(back.seen_counts(), mem.seen_counts());
        let ids = |m: &ExemplarMemory| m.iter().map(|(o, s)| (o, s.id)).collect::<Vec<_>>();
        assert_eq!(ids(&back), ids(&mem));
        assert!(back.index_is_consistent());
    }

    proptest::proptest! {
        #[test]
        fn invariants_under_random_streams(
            seed in 0u64..1000,
            capacity in 1usize..12,
            stream in proptest::collection::vec(proptest::collection::btree_set(1u16..6, 1..4), 1..80),
            balanced in proptest::bool::ANY,
        ) {
            let policy = if balanced { Policy::ClassBalanced } else { Policy::Reservoir };
            let mut mem = ExemplarMemory::new(capacity).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut prev_seen = BTreeMap::new();
            for (i, classes) in stream.iter().enumerate() {
                let ids: Vec<u16> = classes.iter().copied().collect();
                let before: BTreeSet<u64> = mem.iter().map(|(_, s)| s.id).collect();
                mem.offer(sample(i as u64, &ids), policy, 5, &mut rng).unwrap();
                let after: BTreeSet<u64> = mem.iter().map(|(_, s)| s.id).collect();
                proptest::prop_assert!(mem.len() <= capacity);
                proptest::prop_assert!(mem.index_is_consistent());
                // at most one eviction plus one insertion
                proptest::prop_assert!(before.symmetric_difference(&after).count() <= 2);
                for (c, n) in &prev_seen {
                    proptest::prop_assert!(mem.seen_count(*c) >= *n);
                }
                prev_seen = mem.seen_counts().clone();
            }
        }

        #[test]
        fn identical_seed_identical_memory(seed in 0u64..500) {
            let run = || {
                let mut mem = ExemplarMemory::new(5).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for i in 0..60u64 {
                    let classes = [1 + (i % 4) as u16, 1 + ((i * 7) % 5) as u16];
                    mem.offer(sample(i, &classes), Policy::ClassBalanced, 5, &mut rng).unwrap();
                }
                mem.iter().map(|(o, s)| (o, s.id)).collect::<Vec<_>>()
            };
            proptest::prop_assert_eq!(run(), run());
        }
    }
}
