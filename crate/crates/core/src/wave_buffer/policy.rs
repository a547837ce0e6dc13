//! Replacement policies over cached clusters.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Debug;

use serde::{Deserialize, Serialize};

use crate::wave_index::ClusterId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    #[default]
    Lru,
    Fifo,
}

impl PolicyKind {
    pub fn build(self) -> Box<dyn ReplacementPolicy> {
        match self {
            PolicyKind::Lru => Box::new(Lru::default()),
            PolicyKind::Fifo => Box::new(Fifo::default()),
        }
    }
}

/// Orders cached clusters for eviction. Implementations only track order;
/// the buffer decides which candidates are eligible.
pub trait ReplacementPolicy: Send + Sync + Debug {
    fn admitted(&mut self, cluster: ClusterId);
    fn hit(&mut self, cluster: ClusterId);
    fn evicted(&mut self, cluster: ClusterId);
    /// Cached clusters, first eviction candidate first.
    fn candidates(&self) -> Vec<ClusterId>;
}

/// Insertion-ordered set keyed by a monotonically increasing tick.
#[derive(Debug, Default)]
struct TickQueue {
    tick: u64,
    by_tick: BTreeMap<u64, ClusterId>,
    tick_of: HashMap<ClusterId, u64>,
}

impl TickQueue {
    fn push_back(&mut self, c: ClusterId) {
        self.remove(c);
        self.tick += 1;
        self.by_tick.insert(self.tick, c);
        self.tick_of.insert(c, self.tick);
    }

    fn remove(&mut self, c: ClusterId) {
        if let Some(t) = self.tick_of.remove(&c) {
            self.by_tick.remove(&t);
        }
    }

    fn contains(&self, c: ClusterId) -> bool {
        self.tick_of.contains_key(&c)
    }

    fn ordered(&self) -> Vec<ClusterId> {
        self.by_tick.values().copied().collect()
    }
}

#[derive(Debug, Default)]
pub struct Lru(TickQueue);

impl ReplacementPolicy for Lru {
    fn admitted(&mut self, cluster: ClusterId) {
        self.0.push_back(cluster);
    }

    fn hit(&mut self, cluster: ClusterId) {
        if self.0.contains(cluster) {
            self.0.push_back(cluster);
        }
    }

    fn evicted(&mut self, cluster: ClusterId) {
        self.0.remove(cluster);
    }

    fn candidates(&self) -> Vec<ClusterId> {
        self.0.ordered()
    }
}

#[derive(Debug, Default)]
pub struct Fifo(TickQueue);

impl ReplacementPolicy for Fifo {
    fn admitted(&mut self, cluster: ClusterId) {
        self.0.push_back(cluster);
    }

    fn hit(&mut self, _cluster: ClusterId) {}

    fn evicted(&mut self, cluster: ClusterId) {
        self.0.remove(cluster);
    }

    fn candidates(&self) -> Vec<ClusterId> {
        self.0.ordered()
    }
}
