//! Hand-off points between the ingest, inference and publish threads.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

#[derive(Debug)]
struct SlotState<T> {
    pending: Option<T>,
    closed: bool,
    offered: u64,
    replaced: u64,
    taken: u64,
}

/// Depth-one mailbox: a new value replaces one that was never taken.
#[derive(Debug)]
pub struct LatestSlot<T> {
    state: Mutex<SlotState<T>>,
    ready: Condvar,
}

impl<T> Default for LatestSlot<T> {
    fn default() -> Self {
        Self {
            state: Mutex::new(SlotState {
                pending: None,
                closed: false,
                offered: 0,
                replaced: 0,
                taken: 0,
            }),
            ready: Condvar::new(),
        }
    }
}

/// Counters of a [`LatestSlot`]; `offered = taken + replaced + depth`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotCounts {
    pub offered: u64,
    pub replaced: u64,
    pub taken: u64,
    pub depth: usize,
}

impl<T> LatestSlot<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores `value`, returning `true` if it displaced a pending one.
    pub fn put(&self, value: T) -> bool {
        let mut s = self.state.lock().expect("slot lock");
        s.offered += 1;
        let replaced = s.pending.replace(value).is_some();
        if replaced {
            s.replaced += 1;
        }
        drop(s);
        self.ready.notify_one();
        replaced
    }

    pub fn try_take(&self) -> Option<T> {
        let mut s = self.state.lock().expect("slot lock");
        let v = s.pending.take();
        if v.is_some() {
            s.taken += 1;
        }
        v
    }

    /// Waits up to `timeout` for a value; `None` on timeout or once closed.
    pub fn take_timeout(&self, timeout: Duration) -> Option<T> {
        let s = self.state.lock().expect("slot lock");
        let (mut s, _) = self
            .ready
            .wait_timeout_while(s, timeout, |s| s.pending.is_none() && !s.closed)
            .expect("slot lock");
        let v = s.pending.take();
        if v.is_some() {
            s.taken += 1;
        }
        v
    }

    pub fn close(&self) {
        self.state.lock().expect("slot lock").closed = true;
        self.ready.notify_all();
    }

    pub fn counts(&self) -> SlotCounts {
        let s = self.state.lock().expect("slot lock");
        SlotCounts {
            offered: s.offered,
            replaced: s.replaced,
            taken: s.taken,
            depth: usize::from(s.pending.is_some()),
        }
    }
}

/// Bounded queue that discards its oldest entry when full.
#[derive(Debug)]
pub struct DropOldestQueue<T> {
    items: Mutex<(VecDeque<T>, bool)>,
    ready: Condvar,
    capacity: usize,
    dropped: AtomicU64,
}

impl<T> DropOldestQueue<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "queue capacity must be positive");
        Self {
            items: Mutex::new((VecDeque::with_capacity(capacity), false)),
            ready: Condvar::new(),
            capacity,
            dropped: AtomicU64::new(0),
        }
    }

    pub fn push(&self, v: T) {
        let mut g = self.items.lock().expect("queue lock");
        if g.0.len() == self.capacity {
            g.0.pop_front();
            self.dropped.fetch_add(1, Ordering::Relaxed);
        }
        g.0.push_back(v);
        drop(g);
        self.ready.notify_one();
    }

    pub fn pop_timeout(&self, timeout: Duration) -> Option<T> {
        let g = self.items.lock().expect("queue lock");
        let (mut g, _) = self
            .ready
            .wait_timeout_while(g, timeout, |g| g.0.is_empty() && !g.1)
            .expect("queue lock");
        g.0.pop_front()
    }

    pub fn drain(&self) -> Vec<T> {
        self.items.lock().expect("queue lock").0.drain(..).collect()
    }

    pub fn len(&self) -> usize {
        self.items.lock().expect("queue lock").0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dropped(&self) -> u64 {
        self.dropped.load(Ordering::Relaxed)
    }

    pub fn close(&self) {
        self.items.lock().expect("queue lock").1 = true;
        self.ready.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.items.lock().expect("queue lock").1
    }
}

/// Fan-out of server events to independent subscriber queues.
#[derive(Debug)]
pub struct Hub<T> {
    subscribers: Mutex<Vec<Arc<DropOldestQueue<T>>>>,
}

impl<T> Default for Hub<T> {
    fn default() -> Self {
        Self {
            subscribers: Mutex::new(Vec::new()),
        }
    }
}

impl<T: Clone> Hub<T> {
    pub fn subscribe(&self, capacity: usize) -> Arc<DropOldestQueue<T>> {
        let q = Arc::new(DropOldestQueue::new(capacity));
        self.subscribers.lock().expect("hub lock").push(Arc::clone(&q));
        q
    }

    /// Delivers to every open subscriber; closed ones are forgotten.
    pub fn broadcast(&self, event: &T) {
        let mut subs = self.subscribers.lock().expect("hub lock");
        subs.retain(|q| !q.is_closed());
        for q in subs.iter() {
            q.push(event.clone());
        }
    }

    pub fn len(&self) -> usize {
        let mut subs = self.subscribers.lock().expect("hub lock");
        subs.retain(|q| !q.is_closed());
        subs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn close_all(&self) {
        for q in self.subscribers.lock().expect("hub lock").drain(..) {
            q.close();
        }
    }
}
