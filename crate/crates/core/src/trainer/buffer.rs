//! Replay of whole contexts.
//!
//! Transitions are stored with the context they belong to so a sample can
//! rebuild its history window. Eviction drops the oldest context.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{Codec, ContextWindow};
use crate::error::{contract, Result};
use crate::sim::Transition;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    contexts: VecDeque<Vec<Transition>>,
    len: usize,
}

/// Position of one transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub context: usize,
    pub index: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            capacity,
            contexts: VecDeque::new(),
            len: 0,
        }
    }

    /// Number of stored transitions.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn num_contexts(&self) -> usize {
        self.contexts.len()
    }

    /// Appends a context, then evicts the oldest ones while over capacity.
    /// The newest context is always kept.
    pub fn push(&mut self, context: Vec<Transition>) {
        if context.is_empty() {
            return;
        }
        self.len += context.len();
        self.contexts.push_back(context);
        while self.len > self.capacity && self.contexts.len() > 1 {
            let old = self.contexts.pop_front().expect("nonempty");
            self.len -= old.len();
        }
    }

    pub fn get(&self, slot: Slot) -> &Transition {
        &self.contexts[slot.context][slot.index]
    }

    /// `n` slots drawn uniformly over transitions, with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Slot>> {
        if self.len == 0 {
            return Err(contract("sampling from an empty replay buffer"));
        }
        let mut starts = Vec::with_capacity(self.contexts.len());
        let mut acc = 0;
        for c in &self.contexts {
            starts.push(acc);
            acc += c.len();
        }
        Ok((0..n)
            .map(|_| {
                let k = rng.random_range(0..self.len);
                let context = starts.partition_point(|s| *s <= k) - 1;
                Slot {
                    context,
                    index: k - starts[context],
                }
            })
            .collect())
    }

    /// Windows before and after the transition at `slot`.
    ///
    /// The next window sees the transition itself in its history. Its
    /// current state is the next decision's state: the start of the next
    /// episode when this transition ended one.
    pub fn windows(&self, codec: &Codec, slot: Slot, horizon: usize) -> (ContextWindow, ContextWindow) {
        let ctx = &self.contexts[slot.context];
        let j = slot.index;
        let tr = &ctx[j];
        let now = codec.window(&ctx[..j], &tr.state, tr.t, horizon);
        let next = match ctx.get(j + 1) {
            Some(n) => codec.window(&ctx[..=j], &n.state, n.t, horizon),
            None => codec.window(&ctx[..=j], &tr.next_state, tr.t + 1, horizon),
        };
        (now, next)
    }

    pub fn transitions(&self) -> impl Iterator<Item = &Transition> {
        self.contexts.iter().flatten()
    }
}
