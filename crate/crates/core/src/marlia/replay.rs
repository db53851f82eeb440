use super::Observation;
use rand::Rng;
use std::collections::VecDeque;

/// One stored experience: what an agent saw, what it did, and the outcome of
/// freezing every agent's α right after.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub observation: Observation,
    pub action: f64,
    /// Normalized rollout value.
    pub value: f64,
}

/// Bounded FIFO replay memory.
#[derive(Debug, Clone)]
pub struct ReplayMemory {
    buffer: VecDeque<Transition>,
    capacity: usize,
}

impl ReplayMemory {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self { buffer: VecDeque::with_capacity(capacity.min(1 << 16)), capacity }
    }

    pub fn push(&mut self, t: Transition) {
        if self.buffer.len() == self.capacity {
            self.buffer.pop_front();
        }
        self.buffer.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn oldest(&self) -> Option<&Transition> {
        self.buffer.front()
    }

    /// Uniform sample with replacement; empty when the memory is empty.
    pub fn sample<'a, R: Rng + ?Sized>(&'a self, rng: &mut R, batch: usize) -> Vec<&'a Transition> {
        if self.buffer.is_empty() {
            return Vec::new();
        }
        (0..batch).map(|_| &self.buffer[rng.random_range(0..self.buffer.len())]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tr(v: f64) -> Transition {
        Transition { observation: [0.0; 8], action: 0.0, value: v }
    }

    #[test]
    fn evicts_oldest_first() {
        let mut m = ReplayMemory::new(3);
        for v in 0..5 {
            m.push(tr(v as f64));
            assert!(m.len() <= 3);
        }
        assert_eq!(m.oldest().unwrap().value, 2.0);
    }

    #[test]
    fn sampling_empty_memory_yields_nothing() {
        let m = ReplayMemory::new(4);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        assert!(m.sample(&mut rng, 32).is_empty());
    }
}
