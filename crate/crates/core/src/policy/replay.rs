//! Fixed-capacity ring buffer of transitions with uniform sampling.

use super::sac::Batch;
use crate::env::{PackedObs, ACTION_DIM, OBS_DIM};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub obs: PackedObs,
    pub action: [f32; ACTION_DIM],
    pub reward: f32,
    pub next_obs: PackedObs,
    pub done: bool,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    head: usize,
    pushed: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer { capacity, items: Vec::new(), head: 0, pushed: 0 }
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

    /// Total number of transitions ever pushed.
    pub fn total_pushed(&self) -> u64 {
        self.pushed
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.head] = t;
        }
        self.head = (self.head + 1) % self.capacity;
        self.pushed += 1;
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    /// Indices drawn uniformly with replacement.
    pub fn sample_indices(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        assert!(!self.is_empty(), "cannot sample from an empty buffer");
        (0..n).map(|_| rng.random_range(0..self.items.len())).collect()
    }

    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Batch<f32> {
        let idx = self.sample_indices(n, rng);
        let mut obs = Array2::zeros((n, OBS_DIM));
        let mut next_obs = Array2::zeros((n, OBS_DIM));
        let mut action = Array2::zeros((n, ACTION_DIM));
        let mut reward = Array1::zeros(n);
        let mut done = Array1::zeros(n);
        for (row, &i) in idx.iter().enumerate() {
            let t = &self.items[i];
            t.obs.unpack_into(obs.row_mut(row).as_slice_mut().unwrap());
            t.next_obs.unpack_into(next_obs.row_mut(row).as_slice_mut().unwrap());
            action.row_mut(row).as_slice_mut().unwrap().copy_from_slice(&t.action);
            reward[row] = t.reward;
            done[row] = if t.done { 1.0 } else { 0.0 };
        }
        Batch { obs, action, reward, next_obs, done }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use std::collections::HashSet;

    fn transition(i: u64) -> Transition {
        let mut obs = PackedObs { cont: [0.0; 13], bits: [0; 6] };
        obs.cont[0] = i as f32;
        obs.bits[0] = i;
        Transition { obs, action: [i as f32 * 0.001; ACTION_DIM], reward: i as f32, next_obs: obs, done: i % 7 == 0 }
    }

    #[test]
    fn ring_overwrites_oldest() {
        let mut rb = ReplayBuffer::new(5);
        for i in 0..12 {
            rb.push(transition(i));
            assert!(rb.len() <= 5);
        }
        let rewards: HashSet<u64> = (0..5).map(|i| rb.get(i).unwrap().reward as u64).collect();
        assert_eq!(rewards, (7..12).collect());
        assert_eq!(rb.total_pushed(), 12);
    }

    #[test]
    fn samples_only_stored_transitions() {
        let mut rb = ReplayBuffer::new(64);
        let mut stored = HashSet::new();
        for i in 0..100 {
            rb.push(transition(i));
            stored.insert(i);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = rb.sample(256, &mut rng);
        for row in 0..b.len() {
            let id = b.reward[row] as u64;
            assert!(stored.contains(&id) && id >= 36);
            assert_eq!(b.obs[[row, 0]], id as f32);
            assert_eq!(b.done[row], if id % 7 == 0 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn sampling_is_roughly_uniform() {
        let mut rb = ReplayBuffer::new(10);
        for i in 0..10 {
            rb.push(transition(i));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut hist = [0usize; 10];
        for i in rb.sample_indices(100_000, &mut rng) {
            hist[i] += 1;
        }
        assert!(hist.iter().all(|&c| (9_000..11_000).contains(&c)), "{hist:?}");
    }
}
