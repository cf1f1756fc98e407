use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use super::{AckPayload, AckStatus, CommandPayload, Payload, WireMap, WireMessage};
use crate::session::{Operator, OperatorInput, OperatorView, TickRecord, WholeBodyAction};
use crate::simworld::CONTROL_DT;

/// Beams in the ring attached to state frames.
pub const LIDAR_WIRE_BEAMS: usize = 90;

struct QueueState<T> {
    items: VecDeque<T>,
    dropped: u64,
    closed: bool,
}

/// Bounded FIFO whose producer never waits: a full queue discards its
/// oldest entry.
pub struct DropOldestQueue<T> {
    state: Mutex<QueueState<T>>,
    ready: Condvar,
    capacity: usize,
}

impl<T> DropOldestQueue<T> {
    pub fn new(capacity: usize) -> Self {
        Self {
            state: Mutex::new(QueueState { items: VecDeque::with_capacity(capacity), dropped: 0, closed: false }),
            ready: Condvar::new(),
            capacity: capacity.max(1),
        }
    }

    /// Returns true when an older entry was discarded.
    pub fn push(&self, item: T) -> bool {
        let mut s = self.state.lock().unwrap();
        let overflow = s.items.len() >= self.capacity;
        if overflow {
            s.items.pop_front();
            s.dropped += 1;
        }
        s.items.push_back(item);
        drop(s);
        self.ready.notify_one();
        overflow
    }

    pub fn try_pop(&self) -> Option<T> {
        self.state.lock().unwrap().items.pop_front()
    }

    /// `None` on timeout or once closed and drained.
    pub fn pop_timeout(&self, timeout: Duration) -> Option<T> {
        let deadline = Instant::now() + timeout;
        let mut s = self.state.lock().unwrap();
        loop {
            if let Some(x) = s.items.pop_front() {
                return Some(x);
            }
            let now = Instant::now();
            if s.closed || now >= deadline {
                return None;
            }
            s = self.ready.wait_timeout(s, deadline - now).unwrap().0;
        }
    }

    pub fn len(&self) -> usize {
        self.state.lock().unwrap().items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dropped(&self) -> u64 {
        self.state.lock().unwrap().dropped
    }

    pub fn clear(&self) {
        self.state.lock().unwrap().items.clear();
    }

    pub fn close(&self) {
        self.state.lock().unwrap().closed = true;
        self.ready.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.state.lock().unwrap().closed
    }
}

struct SlotState<T> {
    value: Option<(u64, T)>,
    next_seq: u64,
    closed: bool,
}

/// Single-entry mailbox: a newer value replaces an unconsumed one.
/// Sequence numbers increase with every `put`.
pub struct LatestSlot<T> {
    state: Mutex<SlotState<T>>,
}

impl<T> Default for LatestSlot<T> {
    fn default() -> Self {
        Self { state: Mutex::new(SlotState { value: None, next_seq: 0, closed: false }) }
    }
}

impl<T> LatestSlot<T> {
    /// Stores `value`, returning its sequence number and whatever it replaced.
    pub fn put(&self, value: T) -> (u64, Option<(u64, T)>) {
        let mut s = self.state.lock().unwrap();
        let seq = s.next_seq;
        s.next_seq += 1;
        (seq, s.value.replace((seq, value)))
    }

    pub fn take(&self) -> Option<(u64, T)> {
        self.state.lock().unwrap().value.take()
    }

    pub fn close(&self) {
        self.state.lock().unwrap().closed = true;
    }

    pub fn is_closed(&self) -> bool {
        self.state.lock().unwrap().closed
    }
}

/// Shared ends of the operator channel. The session side holds a
/// [`ChannelOperator`]; the transport side submits commands and drains
/// telemetry.
#[derive(Clone)]
pub struct Bridge {
    pub telemetry: Arc<DropOldestQueue<WireMessage>>,
    pub acks: Arc<DropOldestQueue<WireMessage>>,
    pub commands: Arc<LatestSlot<(u64, CommandPayload)>>,
    stop: Arc<AtomicBool>,
    last_tick: Arc<AtomicU64>,
}

impl Bridge {
    pub fn new(telemetry_capacity: usize) -> Self {
        Self {
            telemetry: Arc::new(DropOldestQueue::new(telemetry_capacity)),
            acks: Arc::new(DropOldestQueue::new(1024)),
            commands: Arc::new(LatestSlot::default()),
            stop: Arc::new(AtomicBool::new(false)),
            last_tick: Arc::new(AtomicU64::new(0)),
        }
    }

    /// Enqueues a command frame; an unconsumed older command is acked as superseded.
    pub fn submit(&self, tick: u64, cmd: CommandPayload) {
        let (_, replaced) = self.commands.put((tick, cmd));
        if let Some((_, (old_tick, _))) = replaced {
            self.acks.push(WireMessage::new(
                self.last_tick(),
                Payload::Ack(AckPayload {
                    status: AckStatus::Superseded,
                    of_tick: Some(old_tick),
                    applied_tick: None,
                    message: None,
                }),
            ));
        }
    }

    /// Asks the running episode to finish at its next tick.
    pub fn request_stop(&self) {
        self.stop.store(true, Ordering::SeqCst);
    }

    /// Ends the episode as a lost operator and wakes any waiting consumer.
    pub fn close(&self) {
        self.commands.close();
        self.telemetry.close();
        self.acks.close();
    }

    /// Last tick emitted by the session loop.
    pub fn last_tick(&self) -> u64 {
        self.last_tick.load(Ordering::SeqCst)
    }

    pub fn operator(&self) -> ChannelOperator {
        ChannelOperator {
            bridge: self.clone(),
            last: None,
            pace: None,
            next_deadline: None,
            map_sent: false,
            pending_scan: None,
            collisions_total: 0,
        }
    }
}

/// Session-side end: consumes at most one command per tick and emits
/// state and cue frames without ever waiting on the consumer.
pub struct ChannelOperator {
    bridge: Bridge,
    last: Option<WholeBodyAction>,
    pace: Option<Duration>,
    next_deadline: Option<Instant>,
    map_sent: bool,
    pending_scan: Option<(Vec<f64>, f64, WireMap)>,
    collisions_total: u64,
}

impl ChannelOperator {
    /// Holds each tick to wall-clock time (50 Hz by default).
    pub fn realtime(mut self) -> Self {
        self.pace = Some(Duration::from_secs_f64(CONTROL_DT));
        self
    }

    fn wait_for_tick(&mut self) {
        let Some(period) = self.pace else { return };
        let now = Instant::now();
        let deadline = self.next_deadline.unwrap_or(now);
        if deadline > now {
            std::thread::sleep(deadline - now);
        }
        self.next_deadline = Some(deadline.max(now) + period);
    }
}

impl Operator for ChannelOperator {
    fn command(&mut self, view: &OperatorView) -> OperatorInput {
        self.wait_for_tick();
        if self.bridge.commands.is_closed() {
            return OperatorInput::Closed;
        }
        if self.bridge.stop.swap(false, Ordering::SeqCst) {
            return OperatorInput::Done { success: false };
        }
        if let Ok(scan) = view.world.lidar_scan(LIDAR_WIRE_BEAMS) {
            self.pending_scan = Some((scan.ranges, scan.angle_of_beam_0, WireMap::from(view.world)));
        }
        let fallback = self
            .last
            .clone()
            .unwrap_or_else(|| WholeBodyAction::hold(view.follower_q[0].clone(), view.follower_q[1].clone()));
        let Some((_, (of_tick, cmd))) = self.bridge.commands.take() else {
            return OperatorInput::Hold;
        };
        let applied = view.tick + 1;
        let (status, message, input) = match cmd.to_action(&fallback) {
            Ok(a) => {
                self.last = Some(a.clone());
                (AckStatus::Ok, None, OperatorInput::Command(a))
            }
            Err(e) => (AckStatus::Error, Some(e.to_string()), OperatorInput::Hold),
        };
        let applied_tick = (status == AckStatus::Ok).then_some(applied);
        self.bridge.acks.push(WireMessage::new(
            applied,
            Payload::Ack(AckPayload { status, of_tick: Some(of_tick), applied_tick, message }),
        ));
        input
    }

    fn feedback(&mut self, record: &TickRecord) {
        self.collisions_total += record.collision_events as u64;
        let (mut state, cue) = WireMessage::from_tick(record, self.collisions_total);
        if let (Payload::State(s), Some((ranges, angle0, map))) = (&mut state.payload, self.pending_scan.take()) {
            s.scan.ranges = Some(ranges);
            s.scan.angle0 = Some(angle0);
            if !self.map_sent {
                s.map = Some(map);
                self.map_sent = true;
            }
        }
        self.bridge.last_tick.store(record.tick, Ordering::SeqCst);
        self.bridge.telemetry.push(state);
        self.bridge.telemetry.push(cue);
    }
}
