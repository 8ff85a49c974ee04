//! Bounded FIFO store of extracted contexts.

use std::collections::VecDeque;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::saliency::ContextEntry;

#[derive(Debug, Clone)]
pub struct ContextBank {
    entries: VecDeque<ContextEntry>,
    capacity: usize,
    shape: (usize, usize, usize),
}

impl ContextBank {
    /// A bank holding up to `capacity` entries of `height x width x channels`.
    pub fn new(capacity: usize, height: usize, width: usize, channels: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("context bank capacity must be positive"));
        }
        Ok(Self {
            entries: VecDeque::new(),
            capacity,
            shape: (height, width, channels),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_ready(&self) -> bool {
        self.entries.len() == self.capacity
    }

    /// Oldest first.
    pub fn entries(&self) -> impl Iterator<Item = &ContextEntry> {
        self.entries.iter()
    }

    pub fn get(&self, i: usize) -> Option<&ContextEntry> {
        self.entries.get(i)
    }

    /// Appends `entry`, evicting the oldest entry when full.
    pub fn push(&mut self, entry: ContextEntry) -> Result<()> {
        let (h, w, c) = self.shape;
        if (entry.height, entry.width, entry.channels) != self.shape
            || entry.mask.len() != h * w
            || entry.image.len() != h * w * c
        {
            return Err(Error::Shape(format!(
                "context {}x{}x{} (mask {}, image {}) does not fit a {h}x{w}x{c} bank",
                entry.height,
                entry.width,
                entry.channels,
                entry.mask.len(),
                entry.image.len()
            )));
        }
        self.entries.push_back(entry);
        if self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
        Ok(())
    }

    pub fn extend(&mut self, entries: impl IntoIterator<Item = ContextEntry>) -> Result<()> {
        entries.into_iter().try_for_each(|e| self.push(e))
    }

    /// `count` entries drawn uniformly with replacement; the bank is not
    /// modified.
    pub fn sample(&self, count: usize, seed: u64) -> Result<Vec<&ContextEntry>> {
        let mut rng = stream_rng(seed, 0);
        self.sample_with(count, &mut rng)
    }

    pub fn sample_with<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Vec<&ContextEntry>> {
        if !self.is_ready() {
            return Err(Error::BankNotReady {
                size: self.len(),
                capacity: self.capacity,
            });
        }
        Ok((0..count)
            .map(|_| &self.entries[rng.random_range(0..self.entries.len())])
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(tag: f32) -> ContextEntry {
        ContextEntry {
            image: vec![tag],
            mask: vec![1.0],
            height: 1,
            width: 1,
            channels: 1,
        }
    }

    #[test]
    fn fifo_eviction() {
        let mut bank = ContextBank::new(2, 1, 1, 1).unwrap();
        for t in [1.0, 2.0, 3.0] {
            bank.push(entry(t)).unwrap();
        }
        let held: Vec<f32> = bank.entries().map(|e| e.image[0]).collect();
        assert_eq!(held, vec![2.0, 3.0]);
        assert!(bank.is_ready());
    }

    #[test]
    fn not_ready_until_full() {
        let mut bank = ContextBank::new(3, 1, 1, 1).unwrap();
        assert!(!bank.is_ready());
        bank.push(entry(0.0)).unwrap();
        assert_eq!(bank.len(), 1);
        assert!(matches!(
            bank.sample(1, 0),
            Err(Error::BankNotReady { size: 1, capacity: 3 })
        ));
    }

    #[test]
    fn rejects_wrong_shape() {
        let mut bank = ContextBank::new(3, 2, 2, 1).unwrap();
        assert!(bank.push(entry(0.0)).is_err());
    }

    #[test]
    fn single_entry_repeats() {
        let mut bank = ContextBank::new(1, 1, 1, 1).unwrap();
        bank.push(entry(4.0)).unwrap();
        let drawn = bank.sample(5, 9).unwrap();
        assert_eq!(drawn.len(), 5);
        assert!(drawn.iter().all(|e| e.image[0] == 4.0));
        assert!(bank.sample(0, 9).unwrap().is_empty());
    }
}
