use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::observe::Observation;
use crate::sim::EpisodeLog;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: Observation,
    pub k: usize,
    /// Executed duration.
    pub x: f64,
    pub r: f64,
    pub s_next: Observation,
}

/// Transitions of one episode: each decision paired with the same
/// intersection's next decision. The last decision of each intersection
/// has no successor state and is dropped.
pub fn transitions_from_log(log: &EpisodeLog) -> Vec<Transition> {
    let mut last: std::collections::HashMap<usize, usize> = std::collections::HashMap::new();
    let mut out = Vec::new();
    for (i, d) in log.decisions.iter().enumerate() {
        if let Some(&p) = last.get(&d.intersection) {
            let prev = &log.decisions[p];
            out.push(Transition { s: prev.observation.clone(), k: prev.phase, x: prev.duration, r: prev.reward, s_next: d.observation.clone() });
        }
        last.insert(d.intersection, i);
    }
    out
}

#[derive(Debug, Error, PartialEq)]
#[error("replay buffer holds {size} transitions, {requested} requested")]
pub struct UnderfullBuffer {
    pub size: usize,
    pub requested: usize,
}

/// Fixed-capacity FIFO store with uniform sampling.
#[derive(Clone, Debug)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    items: Vec<T>,
    /// Slot to overwrite next once full.
    head: usize,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer { capacity, items: Vec::new(), head: 0 }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, item: T) {
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            self.items[self.head] = item;
            self.head = (self.head + 1) % self.capacity;
        }
    }

    /// Contents from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.items[self.head..].iter().chain(&self.items[..self.head])
    }

    /// `n` distinct entries chosen uniformly.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Result<Vec<&T>, UnderfullBuffer> {
        if n > self.items.len() {
            return Err(UnderfullBuffer { size: self.items.len(), requested: n });
        }
        Ok(rand::seq::index::sample(rng, self.items.len(), n).into_iter().map(|i| &self.items[i]).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fifo_eviction() {
        let mut b = ReplayBuffer::new(5);
        for i in 0..7 {
            b.push(i);
        }
        assert_eq!(b.iter().copied().collect::<Vec<_>>(), vec![2, 3, 4, 5, 6]);
    }

    #[test]
    fn full_sample_is_permutation() {
        let mut b = ReplayBuffer::new(10);
        (0..10).for_each(|i| b.push(i));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s: Vec<i32> = b.sample(10, &mut rng).unwrap().into_iter().copied().collect();
        s.sort();
        assert_eq!(s, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn underfull_is_an_error() {
        let mut b = ReplayBuffer::new(10);
        b.push(1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(b.sample(2, &mut rng).unwrap_err(), UnderfullBuffer { size: 1, requested: 2 });
    }

    #[test]
    fn seeded_sampling_is_deterministic() {
        let mut b = ReplayBuffer::new(100);
        (0..100).for_each(|i| b.push(i));
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            b.sample(20, &mut rng).unwrap().into_iter().copied().collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
        assert_ne!(draw(5), draw(6));
    }
}
