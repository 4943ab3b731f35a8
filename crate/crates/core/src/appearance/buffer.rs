use std::collections::{BTreeMap, VecDeque};

use rand::Rng;

use super::patch::{Patch, PooledPatch};
use super::Label;
use crate::error::{Error, Result};

/// Default number of patches kept per label.
pub const DEFAULT_BUFFER_SIZE: usize = 250;

#[derive(Clone, Debug)]
pub struct BufferEntry {
    pub patch: Patch,
    pub pooled: PooledPatch,
}

impl BufferEntry {
    pub fn new(patch: Patch) -> Self {
        let pooled = PooledPatch::new(&patch);
        BufferEntry { patch, pooled }
    }
}

/// Per-label ring of exactly `capacity` training patches, oldest first.
#[derive(Clone, Debug)]
pub struct TrainBuffer {
    capacity: usize,
    rings: BTreeMap<Label, VecDeque<BufferEntry>>,
}

impl TrainBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("buffer capacity must be positive".into()));
        }
        Ok(TrainBuffer { capacity, rings: BTreeMap::new() })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Labels in ascending order (background first).
    pub fn labels(&self) -> impl Iterator<Item = Label> + '_ {
        self.rings.keys().copied()
    }

    pub fn num_labels(&self) -> usize {
        self.rings.len()
    }

    pub fn contains(&self, label: Label) -> bool {
        self.rings.contains_key(&label)
    }

    pub fn entries(&self, label: Label) -> Option<&VecDeque<BufferEntry>> {
        self.rings.get(&label)
    }

    /// Adds a label filled from the latter part of `patches`, repeating them
    /// cyclically when there are fewer than `capacity`.
    pub fn insert_label(&mut self, label: Label, patches: Vec<Patch>) -> Result<()> {
        if self.rings.contains_key(&label) {
            return Err(Error::DuplicateLabel(label.to_string()));
        }
        if patches.is_empty() {
            return Err(Error::Empty(format!("no patches for label {label}")));
        }
        let skip = patches.len().saturating_sub(self.capacity);
        let tail: Vec<BufferEntry> = patches.into_iter().skip(skip).map(BufferEntry::new).collect();
        let ring: VecDeque<BufferEntry> = tail.iter().cycle().take(self.capacity).cloned().collect();
        self.rings.insert(label, ring);
        Ok(())
    }

    /// Appends `patches` in order and evicts as many of the oldest entries.
    pub fn update(&mut self, label: Label, patches: Vec<Patch>) -> Result<()> {
        let ring = self.rings.get_mut(&label).ok_or_else(|| Error::UnknownLabel(label.to_string()))?;
        let skip = patches.len().saturating_sub(self.capacity);
        for patch in patches.into_iter().skip(skip) {
            ring.pop_front();
            ring.push_back(BufferEntry::new(patch));
        }
        Ok(())
    }

    pub fn remove_label(&mut self, label: Label) -> Result<()> {
        self.rings
            .remove(&label)
            .map(|_| ())
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))
    }

    /// Uniform draw over (label, slot) pairs.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<(Label, &BufferEntry)> {
        if self.rings.is_empty() {
            return None;
        }
        let k = rng.random_range(0..self.rings.len());
        let (&label, ring) = self.rings.iter().nth(k)?;
        let slot = rng.random_range(0..ring.len());
        Some((label, &ring[slot]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tagged(frame: usize) -> Patch {
        let mut p = Patch::filled((frame % 256) as u8);
        p.source_frame = frame;
        p
    }

    fn frames(buf: &TrainBuffer, label: Label) -> Vec<usize> {
        buf.entries(label).unwrap().iter().map(|e| e.patch.source_frame).collect()
    }

    #[test]
    fn ring_semantics() {
        let mut b = TrainBuffer::new(4).unwrap();
        let l = Label::Identity(1);
        b.insert_label(l, (0..4).map(tagged).collect()).unwrap();
        b.update(l, vec![tagged(4)]).unwrap();
        assert_eq!(frames(&b, l), vec![1, 2, 3, 4]);
        b.update(l, vec![tagged(5), tagged(6)]).unwrap();
        assert_eq!(frames(&b, l), vec![3, 4, 5, 6]);
    }

    #[test]
    fn short_initial_fill_repeats_cyclically() {
        let mut b = TrainBuffer::new(5).unwrap();
        let l = Label::Identity(0);
        b.insert_label(l, (0..3).map(tagged).collect()).unwrap();
        assert_eq!(frames(&b, l), vec![0, 1, 2, 0, 1]);
    }

    #[test]
    fn long_initial_fill_keeps_latter_part() {
        let mut b = TrainBuffer::new(3).unwrap();
        b.insert_label(Label::Background, (0..10).map(tagged).collect()).unwrap();
        assert_eq!(frames(&b, Label::Background), vec![7, 8, 9]);
        b.update(Label::Background, (20..30).map(tagged).collect()).unwrap();
        assert_eq!(frames(&b, Label::Background), vec![27, 28, 29]);
    }

    #[test]
    fn label_errors() {
        let mut b = TrainBuffer::new(3).unwrap();
        assert!(matches!(b.update(Label::Identity(9), vec![tagged(0)]), Err(Error::UnknownLabel(_))));
        b.insert_label(Label::Identity(9), vec![tagged(0)]).unwrap();
        assert!(matches!(b.insert_label(Label::Identity(9), vec![tagged(0)]), Err(Error::DuplicateLabel(_))));
        assert!(b.insert_label(Label::Identity(8), vec![]).is_err());
        b.remove_label(Label::Identity(9)).unwrap();
        assert!(b.remove_label(Label::Identity(9)).is_err());
    }

    proptest::proptest! {
        #[test]
        fn size_is_invariant(init in 1usize..12, adds in proptest::collection::vec(0usize..15, 0..8)) {
            let mut b = TrainBuffer::new(6).unwrap();
            let l = Label::Identity(2);
            b.insert_label(l, (0..init).map(tagged).collect()).unwrap();
            proptest::prop_assert_eq!(b.entries(l).unwrap().len(), 6);
            for n in adds {
                b.update(l, (0..n).map(tagged).collect()).unwrap();
                proptest::prop_assert_eq!(b.entries(l).unwrap().len(), 6);
            }
        }
    }
}
