use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use super::protocol::Outgoing;

/// Telemetry frames a subscriber may have queued before the oldest ones are
/// discarded.
pub const DEFAULT_QUEUE_CAPACITY: usize = 256;

/// Per-connection send queue. Producers never block: when the queue is
/// full the oldest telemetry frame is dropped. Other messages are always
/// kept.
#[derive(Debug)]
pub struct Outbound {
    id: u64,
    capacity: usize,
    queue: Mutex<VecDeque<Outgoing>>,
    ready: Condvar,
    closed: AtomicBool,
    dropped: AtomicU64,
    /// Bits of the most recent `ts` pushed, for connection-level replies.
    last_ts: AtomicU64,
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

impl Outbound {
    pub fn new(capacity: usize) -> Self {
        Outbound {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            capacity: capacity.max(1),
            queue: Mutex::new(VecDeque::new()),
            ready: Condvar::new(),
            closed: AtomicBool::new(false),
            dropped: AtomicU64::new(0),
            last_ts: AtomicU64::new(0f64.to_bits()),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn push(&self, out: Outgoing) {
        if self.is_closed() {
            return;
        }
        let mut q = self.queue.lock().unwrap();
        self.last_ts.store(out.ts.to_bits(), Ordering::Relaxed);
        if out.msg.is_telemetry() {
            let queued = q.iter().filter(|o| o.msg.is_telemetry()).count();
            if queued >= self.capacity {
                if let Some(i) = q.iter().position(|o| o.msg.is_telemetry()) {
                    q.remove(i);
                    self.dropped.fetch_add(1, Ordering::Relaxed);
                }
            }
        }
        q.push_back(out);
        self.ready.notify_one();
    }

    /// Simulation time of the latest message queued here.
    pub fn last_ts(&self) -> f64 {
        f64::from_bits(self.last_ts.load(Ordering::Relaxed))
    }

    pub fn try_pop(&self) -> Option<Outgoing> {
        self.queue.lock().unwrap().pop_front()
    }

    /// Waits up to `timeout` for a message. `None` on timeout or once the
    /// queue is closed and empty.
    pub fn pop_timeout(&self, timeout: Duration) -> Option<Outgoing> {
        let q = self.queue.lock().unwrap();
        let (mut q, _) = self
            .ready
            .wait_timeout_while(q, timeout, |q| {
                q.is_empty() && !self.closed.load(Ordering::Acquire)
            })
            .unwrap();
        q.pop_front()
    }

    pub fn len(&self) -> usize {
        self.queue.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dropped(&self) -> u64 {
        self.dropped.load(Ordering::Relaxed)
    }

    pub fn close(&self) {
        self.closed.store(true, Ordering::Release);
        let _guard = self.queue.lock().unwrap();
        self.ready.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.closed.load(Ordering::Acquire)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::service::protocol::ServerMsg;
    use crate::simulation::Simulator;

    fn telemetry(t: f64) -> Outgoing {
        let mut sim = Simulator::new(Default::default(), Default::default()).unwrap();
        let mut frame = sim.control_update();
        frame.t = t;
        Outgoing {
            ts: t,
            msg: ServerMsg::Telemetry {
                session: "s1".into(),
                frame,
            },
        }
    }

    #[test]
    fn drops_oldest_telemetry_and_keeps_events() {
        let q = Outbound::new(2);
        q.push(telemetry(0.0));
        q.push(Outgoing {
            ts: 0.0,
            msg: ServerMsg::Pong { reply_to: 1 },
        });
        q.push(telemetry(1.0));
        q.push(telemetry(2.0));
        assert_eq!(q.dropped(), 1);
        let got: Vec<_> = std::iter::from_fn(|| q.try_pop()).map(|o| o.ts).collect();
        assert_eq!(got, vec![0.0, 1.0, 2.0]);
    }

    #[test]
    fn closed_queue_wakes_waiters() {
        let q = Outbound::new(4);
        q.close();
        assert!(q.pop_timeout(Duration::from_secs(5)).is_none());
    }
}
