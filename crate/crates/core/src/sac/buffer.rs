use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::mdp::Transition;

/// Fixed-capacity ring of transitions with uniform sampling.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
    pushed: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("replay capacity must be positive"));
        }
        Ok(ReplayBuffer {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            next: 0,
            pushed: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Transitions ever pushed, including overwritten ones.
    pub fn pushed(&self) -> u64 {
        self.pushed
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
        self.pushed += 1;
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// `k` distinct transitions drawn uniformly.
    pub fn sample<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Result<Vec<&Transition>> {
        if k > self.items.len() {
            return Err(Error::invalid(format!(
                "batch of {k} from a buffer holding {}",
                self.items.len()
            )));
        }
        Ok(index::sample(rng, self.items.len(), k)
            .into_iter()
            .map(|i| &self.items[i])
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::TokenPair;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tr(action: usize) -> Transition {
        let pair = TokenPair {
            size_tokens: vec![1],
            ipd_tokens: vec![0],
            positions: vec![0],
            valid_len: 1,
        };
        Transition {
            state: pair.clone(),
            action,
            reward: 0.0,
            next_state: pair,
            done: false,
        }
    }

    #[test]
    fn ring_overwrites_oldest() {
        let mut b = ReplayBuffer::new(3).unwrap();
        for a in 0..5 {
            b.push(tr(a));
        }
        assert_eq!(b.len(), 3);
        assert_eq!(b.pushed(), 5);
        let mut acts: Vec<usize> = b.iter().map(|t| t.action).collect();
        acts.sort();
        assert_eq!(acts, vec![2, 3, 4]);
    }

    #[test]
    fn batches_have_no_repeats() {
        let mut b = ReplayBuffer::new(100).unwrap();
        for a in 0..50 {
            b.push(tr(a));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let mut acts: Vec<usize> = b.sample(50, &mut rng).unwrap().iter().map(|t| t.action).collect();
            acts.sort();
            acts.dedup();
            assert_eq!(acts.len(), 50);
        }
        assert!(b.sample(51, &mut rng).is_err());
    }
}
