//! Reservoir replay memory.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::Rng as _;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::stream::{self, Dataset, LabeledExample};

/// Fixed-capacity exemplar store updated by per-example reservoir sampling.
#[derive(Clone, Debug)]
pub struct ReplayMemory {
    capacity: usize,
    slots: Vec<LabeledExample>,
    seen_count: u64,
    rng: Rng,
}

impl ReplayMemory {
    pub fn new(capacity: usize, seed: u64) -> Self {
        ReplayMemory {
            capacity,
            slots: Vec::with_capacity(capacity),
            seen_count: 0,
            rng: rng::substream(seed, "reservoir"),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Number of stream examples offered so far.
    pub fn seen_count(&self) -> u64 {
        self.seen_count
    }

    pub fn slots(&self) -> &[LabeledExample] {
        &self.slots
    }

    /// Offers a single example: appended while the memory is filling,
    /// otherwise it replaces a uniformly chosen slot with probability `M/n`.
    pub fn offer(&mut self, example: &LabeledExample) {
        self.seen_count += 1;
        if self.capacity == 0 {
            return;
        }
        if self.slots.len() < self.capacity {
            self.slots.push(example.clone());
            return;
        }
        let j = self.rng.gen_range(0..self.seen_count);
        if (j as usize) < self.capacity {
            self.slots[j as usize] = example.clone();
        }
    }

    /// `M <- MemoryUpdate(B, M)`.
    pub fn update(&mut self, batch: &[LabeledExample]) {
        for example in batch {
            self.offer(example);
        }
    }

    /// `B_M <- MemoryRetrieval(M, m)`: `min(m, |M|)` distinct slots drawn
    /// uniformly without replacement.
    pub fn retrieve(&self, m: usize, rng: &mut Rng) -> Vec<LabeledExample> {
        self.retrieve_indices(m, rng).into_iter().map(|i| self.slots[i].clone()).collect()
    }

    pub fn retrieve_indices(&self, m: usize, rng: &mut Rng) -> Vec<usize> {
        let amount = m.min(self.slots.len());
        index::sample(rng, self.slots.len(), amount).into_vec()
    }

    /// Stored exemplars grouped by contiguous class id.
    pub fn exemplars_by_class(&self) -> BTreeMap<usize, Vec<&LabeledExample>> {
        let mut map: BTreeMap<usize, Vec<&LabeledExample>> = BTreeMap::new();
        for ex in &self.slots {
            map.entry(ex.label).or_default().push(ex);
        }
        map
    }

    /// Writes the memory as a `uint8` image blob with the dataset sidecar,
    /// plus a state file carrying the reservoir counters and generator position.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let images = self.slots.iter().map(|e| e.image.clone()).collect();
        let labels = self.slots.iter().map(|e| e.label as i64).collect();
        stream::save_blob(
            &Dataset::new(images, labels)?,
            &dir.join("memory.u8"),
            &dir.join("memory.json"),
        )?;
        let state = MemoryState {
            capacity: self.capacity,
            seen_count: self.seen_count,
            ids: self.slots.iter().map(|e| e.id).collect(),
            original_labels: self.slots.iter().map(|e| e.original_label).collect(),
            rng_seed: self.rng.get_seed().to_vec(),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos().to_string(),
        };
        let path = dir.join("memory_state.json");
        fs::write(&path, serde_json::to_vec_pretty(&state)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let data = stream::load_blob(&dir.join("memory.u8"), &dir.join("memory.json"))?;
        let path = dir.join("memory_state.json");
        let state: MemoryState =
            serde_json::from_slice(&fs::read(&path).map_err(|e| Error::io(&path, e))?)?;
        if state.ids.len() != data.len() || state.original_labels.len() != data.len() {
            return Err(Error::CheckpointMismatch("memory state does not match blob".into()));
        }
        let seed: [u8; 32] = state
            .rng_seed
            .as_slice()
            .try_into()
            .map_err(|_| Error::CheckpointMismatch("reservoir seed must be 32 bytes".into()))?;
        let mut rng = Rng::from_seed(seed);
        rng.set_stream(state.rng_stream);
        rng.set_word_pos(
            state
                .rng_word_pos
                .parse()
                .map_err(|_| Error::CheckpointMismatch("bad generator position".into()))?,
        );
        let slots = data
            .images
            .into_iter()
            .zip(data.labels)
            .zip(state.ids.iter().zip(&state.original_labels))
            .map(|((image, label), (&id, &original_label))| LabeledExample {
                id,
                image,
                label: label as usize,
                original_label,
            })
            .collect();
        Ok(ReplayMemory { capacity: state.capacity, slots, seen_count: state.seen_count, rng })
    }
}

#[derive(Serialize, Deserialize)]
struct MemoryState {
    capacity: usize,
    seen_count: u64,
    ids: Vec<usize>,
    original_labels: Vec<i64>,
    rng_seed: Vec<u8>,
    rng_stream: u64,
    rng_word_pos: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::Image;

    pub(crate) fn example(id: usize, label: usize) -> LabeledExample {
        LabeledExample {
            id,
            image: Image::new(2, vec![(id % 7) as f32 / 7.0; 12]).unwrap(),
            label,
            original_label: label as i64 * 10,
        }
    }

    #[test]
    fn fill_phase_stores_everything() {
        let mut mem = ReplayMemory::new(100, 1);
        let batch: Vec<_> = (0..100).map(|i| example(i, 1)).collect();
        mem.update(&batch);
        assert_eq!(mem.len(), 100);
        assert_eq!(mem.seen_count(), 100);
        let ids: Vec<_> = mem.slots().iter().map(|e| e.id).collect();
        assert_eq!(ids, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn zero_capacity_stays_empty() {
        let mut mem = ReplayMemory::new(0, 1);
        mem.update(&(0..20).map(|i| example(i, 1)).collect::<Vec<_>>());
        assert!(mem.is_empty());
        assert_eq!(mem.seen_count(), 20);
        assert!(mem.retrieve(10, &mut rng::substream(0, "r")).is_empty());
    }

    #[test]
    fn capacity_bound_holds() {
        let mut mem = ReplayMemory::new(7, 3);
        for i in 0..200 {
            mem.offer(&example(i, 1 + i % 3));
            assert_eq!(mem.len(), (i + 1).min(7));
        }
    }

    #[test]
    fn retrieval_is_distinct_and_bounded() {
        let mut mem = ReplayMemory::new(500, 2);
        mem.update(&(0..600).map(|i| example(i, 1)).collect::<Vec<_>>());
        let mut r = rng::substream(4, "retrieve");
        let got = mem.retrieve(10, &mut r);
        assert_eq!(got.len(), 10);
        let ids: std::collections::BTreeSet<_> = got.iter().map(|e| e.id).collect();
        assert_eq!(ids.len(), 10);

        let mut small = ReplayMemory::new(10, 2);
        small.update(&(0..4).map(|i| example(i, 1)).collect::<Vec<_>>());
        let before = small.slots().to_vec();
        assert_eq!(small.retrieve(10, &mut r).len(), 4);
        assert_eq!(small.slots(), before.as_slice());
    }

    #[test]
    fn partition_by_class() {
        let mut mem = ReplayMemory::new(10, 0);
        assert!(mem.exemplars_by_class().is_empty());
        mem.update(&[example(0, 1), example(1, 1), example(2, 2)]);
        let parts = mem.exemplars_by_class();
        assert_eq!(parts[&1].len(), 2);
        assert_eq!(parts[&2].len(), 1);
        assert_eq!(parts.values().map(Vec::len).sum::<usize>(), mem.len());
    }

    #[test]
    fn save_and_resume_continue_identically() {
        let mut mem = ReplayMemory::new(5, 9);
        mem.update(&(0..12).map(|i| example(i, 1 + i % 2)).collect::<Vec<_>>());
        let dir = tempfile::tempdir().unwrap();
        mem.save(dir.path()).unwrap();
        let mut resumed = ReplayMemory::load(dir.path()).unwrap();
        assert_eq!(resumed.seen_count(), 12);
        let rest: Vec<_> = (12..40).map(|i| example(i, 3)).collect();
        mem.update(&rest);
        resumed.update(&rest);
        let a: Vec<_> = mem.slots().iter().map(|e| e.id).collect();
        let b: Vec<_> = resumed.slots().iter().map(|e| e.id).collect();
        assert_eq!(a, b);
    }
}
