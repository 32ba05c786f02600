//! Bounded LRU cache of analysed runs, keyed by `(model, text)`.

use std::collections::{HashMap, HashSet};
use std::num::NonZeroUsize;
use std::sync::Arc;
use std::time::SystemTime;

use lru::LruCache;
use tokio::sync::OnceCell;

use crate::registry::LoadedModel;
use crate::transformer::RunCapture;

pub type RunKey = (String, String);

#[derive(Debug)]
pub struct RunEntry {
    pub run_id: String,
    pub model: Arc<LoadedModel>,
    pub text: String,
    pub capture: RunCapture,
    pub created: SystemTime,
}

/// A cache slot. The cell is filled by exactly one forward pass; concurrent
/// requests for the same key wait on it.
#[derive(Debug)]
pub struct RunSlot {
    pub run_id: String,
    pub cell: OnceCell<Arc<RunEntry>>,
}

#[derive(Debug)]
pub enum Lookup {
    Ready(Arc<RunEntry>),
    Evicted,
    Unknown,
}

#[derive(Debug)]
pub struct RunCache {
    slots: LruCache<RunKey, Arc<RunSlot>>,
    ids: HashMap<String, RunKey>,
    evicted: HashSet<String>,
    next_id: u64,
}

impl RunCache {
    pub fn new(capacity: usize) -> Self {
        Self {
            slots: LruCache::new(NonZeroUsize::new(capacity.max(1)).expect("non-zero")),
            ids: HashMap::new(),
            evicted: HashSet::new(),
            next_id: 0,
        }
    }

    /// The slot for `key`, creating (and possibly evicting) as needed.
    pub fn slot(&mut self, key: RunKey) -> Arc<RunSlot> {
        if let Some(slot) = self.slots.get(&key) {
            return slot.clone();
        }
        self.next_id += 1;
        let slot = Arc::new(RunSlot {
            run_id: format!("run-{}", self.next_id),
            cell: OnceCell::new(),
        });
        self.ids.insert(slot.run_id.clone(), key.clone());
        if let Some((_, old)) = self.slots.push(key, slot.clone()) {
            self.ids.remove(&old.run_id);
            self.evicted.insert(old.run_id.clone());
        }
        slot
    }

    /// Drops a slot whose forward pass failed, without marking it evicted.
    pub fn discard(&mut self, key: &RunKey, run_id: &str) {
        if self.slots.peek(key).is_some_and(|s| s.run_id == run_id) {
            self.slots.pop(key);
        }
        self.ids.remove(run_id);
    }

    pub fn lookup(&mut self, run_id: &str) -> Lookup {
        if self.evicted.contains(run_id) {
            return Lookup::Evicted;
        }
        let Some(key) = self.ids.get(run_id) else {
            return Lookup::Unknown;
        };
        match self.slots.get(key).and_then(|s| s.cell.get()) {
            Some(entry) => Lookup::Ready(entry.clone()),
            None => Lookup::Unknown,
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}
