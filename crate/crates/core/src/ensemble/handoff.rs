use std::collections::VecDeque;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

/// Bounded queue that never blocks the producer: when full, the oldest item
/// is discarded and counted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandOff<T> {
    capacity: usize,
    items: VecDeque<T>,
    dropped: u64,
}

impl<T> HandOff<T> {
    pub fn new(capacity: usize) -> Self {
        Self { capacity: capacity.max(1), items: VecDeque::new(), dropped: 0 }
    }

    pub fn push(&mut self, item: T) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
            self.dropped += 1;
        }
        self.items.push_back(item);
    }

    pub fn pop(&mut self) -> Option<T> {
        self.items.pop_front()
    }

    pub fn drain(&mut self) -> impl Iterator<Item = T> + '_ {
        self.items.drain(..)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }
}

struct Shared<T> {
    queue: Mutex<(HandOff<T>, bool)>,
    ready: Condvar,
}

/// Thread-safe hand-off between a compute loop and a reduction worker.
pub struct SharedHandOff<T> {
    inner: Arc<Shared<T>>,
}

impl<T> Clone for SharedHandOff<T> {
    fn clone(&self) -> Self {
        Self { inner: Arc::clone(&self.inner) }
    }
}

impl<T> SharedHandOff<T> {
    pub fn new(capacity: usize) -> Self {
        Self { inner: Arc::new(Shared { queue: Mutex::new((HandOff::new(capacity), false)), ready: Condvar::new() }) }
    }

    pub fn push(&self, item: T) {
        self.inner.queue.lock().expect("hand-off lock").0.push(item);
        self.inner.ready.notify_one();
    }

    /// Waits up to `timeout` for an item. `None` once closed and empty, or on
    /// timeout.
    pub fn pop_timeout(&self, timeout: Duration) -> Option<T> {
        let guard = self.inner.queue.lock().expect("hand-off lock");
        let (mut guard, _) = self.inner.ready.wait_timeout_while(guard, timeout, |(q, closed)| q.is_empty() && !*closed).expect("hand-off lock");
        guard.0.pop()
    }

    pub fn close(&self) {
        self.inner.queue.lock().expect("hand-off lock").1 = true;
        self.inner.ready.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.inner.queue.lock().expect("hand-off lock").1
    }

    pub fn dropped(&self) -> u64 {
        self.inner.queue.lock().expect("hand-off lock").0.dropped()
    }
}
