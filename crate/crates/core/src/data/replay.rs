//! Fixed-capacity replay bank with class-balanced reservoir sampling.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use super::Sample;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayEntry {
    /// Label as remapped at the origin step.
    pub sample: Sample,
    pub origin_step: usize,
    /// Class whose quota this entry counts against.
    pub class: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayMemory {
    capacity: usize,
    entries: Vec<ReplayEntry>,
}

impl ReplayMemory {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("replay memory enabled with capacity 0"));
        }
        Ok(Self { capacity, entries: Vec::new() })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> &[ReplayEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count_for(&self, class: u8) -> usize {
        self.entries.iter().filter(|e| e.class == class).count()
    }

    /// Per-class budget: `capacity / n` each, the remainder going to the
    /// first classes in order.
    pub fn quotas(&self, seen_classes: &[u8]) -> BTreeMap<u8, usize> {
        let n = seen_classes.len().max(1);
        seen_classes
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, self.capacity / n + usize::from(i < self.capacity % n)))
            .collect()
    }

    /// Draws `n` distinct entries (all of them if fewer exist).
    pub fn draw(&self, n: usize, rng: &mut impl Rng) -> Vec<&ReplayEntry> {
        let mut idx: Vec<usize> = (0..self.entries.len()).collect();
        idx.shuffle(rng);
        idx.truncate(n);
        idx.sort_unstable();
        idx.into_iter().map(|i| &self.entries[i]).collect()
    }
}

/// Current class with the most pixels in the sample; ties go to the lower id.
fn dominant_class(sample: &Sample, current: &[u8]) -> Option<u8> {
    let mut counts = [0usize; 256];
    for &v in &sample.image.label.data {
        counts[v as usize] += 1;
    }
    current
        .iter()
        .copied()
        .filter(|&c| counts[c as usize] > 0)
        .max_by(|&a, &b| counts[a as usize].cmp(&counts[b as usize]).then(b.cmp(&a)))
}

/// End-of-step update. Old classes are subsampled uniformly down to their
/// shrunken quota; each new class fills its quota by reservoir sampling
/// over the step's samples, keyed by their dominant class.
pub fn update_replay_memory(
    memory: &mut ReplayMemory,
    step: usize,
    step_samples: &[Sample],
    current_classes: &[u8],
    seen_classes: &[u8],
    rng: &mut impl Rng,
) -> Result<()> {
    if memory.entries.iter().any(|e| e.origin_step >= step) {
        return Err(Error::contract(format!("replay memory already holds samples from step {step}")));
    }
    let quotas = memory.quotas(seen_classes);

    let mut by_class: BTreeMap<u8, Vec<ReplayEntry>> = BTreeMap::new();
    for e in memory.entries.drain(..) {
        by_class.entry(e.class).or_default().push(e);
    }
    for (class, bucket) in by_class.iter_mut() {
        let quota = quotas.get(class).copied().unwrap_or(0);
        if bucket.len() > quota {
            let mut keep: Vec<usize> = (0..bucket.len()).collect();
            keep.shuffle(rng);
            keep.truncate(quota);
            keep.sort_unstable();
            let old = std::mem::take(bucket);
            *bucket = old.into_iter().enumerate().filter(|(i, _)| keep.binary_search(i).is_ok()).map(|(_, e)| e).collect();
        }
    }

    for &class in current_classes {
        let quota = quotas.get(&class).copied().unwrap_or(0);
        let bucket = by_class.entry(class).or_default();
        let mut streamed = 0usize;
        for s in step_samples.iter().filter(|s| dominant_class(s, current_classes) == Some(class)) {
            streamed += 1;
            let entry = ReplayEntry { sample: s.clone(), origin_step: step, class };
            if bucket.len() < quota {
                bucket.push(entry);
            } else if quota > 0 {
                let j = rng.gen_range(0..streamed);
                if j < quota {
                    bucket[j] = entry;
                }
            }
        }
    }

    memory.entries = by_class.into_values().flatten().collect();
    debug_assert!(memory.entries.len() <= memory.capacity);
    Ok(())
}
