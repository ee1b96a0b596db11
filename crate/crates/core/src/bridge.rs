//! Droplock bridge firmware: a transparent BLE-to-UART bridge that buffers
//! the sensor's output in a ring and streams it out as 20-byte notifications.
//!
//! Host-to-sensor traffic is forwarded untouched. Sensor-to-host traffic is
//! length-tracked by [`FprPacketHandler`] so that a short final fragment is
//! released as soon as the frame it belongs to is complete, instead of
//! waiting for 20 bytes that may never come.

use thiserror::Error;

use crate::defaults::{ADV_NAME, BLE_PAYLOAD_CAP, DOWNSHIFT_BAUD, RING_CAPACITY, WAKE_WINDOW};
use crate::protocol::{
    expected_frame_length, CommandWord, Frame, FrameKind, FrameLength, StreamParser, HEADER_LEN,
};
use crate::sim::{ComponentId, Ctx, VirtualTime};
use crate::transport::{BaudRate, BleConnectionParams, BleSession};

pub const BRIDGE: ComponentId = ComponentId("bridge");

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("ring buffer overflow: {dropped} bytes dropped")]
pub struct Overflow {
    pub dropped: usize,
}

/// Fixed-capacity byte FIFO. Bytes that do not fit are dropped.
#[derive(Debug, Clone)]
pub struct RingBuffer {
    storage: Box<[u8]>,
    head: usize,
    len: usize,
    high_watermark: usize,
}

impl RingBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "ring capacity must be non-zero");
        Self {
            storage: vec![0; capacity].into_boxed_slice(),
            head: 0,
            len: 0,
            high_watermark: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.storage.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn high_watermark(&self) -> usize {
        self.high_watermark
    }

    /// Stores as much of `data` as fits; the rest is reported as dropped.
    pub fn push(&mut self, data: &[u8]) -> Result<(), Overflow> {
        let room = self.capacity() - self.len;
        let take = data.len().min(room);
        for &b in &data[..take] {
            let tail = (self.head + self.len) % self.capacity();
            self.storage[tail] = b;
            self.len += 1;
        }
        self.high_watermark = self.high_watermark.max(self.len);
        if take < data.len() {
            Err(Overflow {
                dropped: data.len() - take,
            })
        } else {
            Ok(())
        }
    }

    pub fn pop(&mut self, max: usize) -> Vec<u8> {
        let n = max.min(self.len);
        let out = (0..n)
            .map(|i| self.storage[(self.head + i) % self.capacity()])
            .collect();
        self.head = (self.head + n) % self.capacity();
        self.len -= n;
        out
    }

    pub fn clear(&mut self) {
        self.head = 0;
        self.len = 0;
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum HandlerState {
    SeekHeader { header: Vec<u8> },
    StreamingBody { frame_len: usize, remaining: usize },
}

/// What the handler learned from one byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct HandlerStep {
    /// Bytes whose frame (or garbage run) is now complete.
    pub finalized: usize,
    /// A valid header was just recognised: `(kind, total frame length)`.
    pub header: Option<(FrameKind, usize)>,
}

/// Tracks frame boundaries in the sensor's output stream from header
/// lengths alone. Bytes that cannot start a frame are finalized one by one.
#[derive(Debug, Clone)]
pub struct FprPacketHandler {
    state: HandlerState,
}

impl Default for FprPacketHandler {
    fn default() -> Self {
        Self::new()
    }
}

impl FprPacketHandler {
    pub fn new() -> Self {
        Self {
            state: HandlerState::SeekHeader { header: Vec::new() },
        }
    }

    /// Bytes still expected for the frame currently streaming.
    pub fn remaining(&self) -> usize {
        match self.state {
            HandlerState::StreamingBody { remaining, .. } => remaining,
            HandlerState::SeekHeader { .. } => 0,
        }
    }

    pub fn feed(&mut self, byte: u8) -> HandlerStep {
        let mut step = HandlerStep::default();
        match &mut self.state {
            HandlerState::StreamingBody {
                frame_len,
                remaining,
            } => {
                *remaining -= 1;
                if *remaining == 0 {
                    step.finalized = *frame_len;
                    self.state = HandlerState::SeekHeader { header: Vec::new() };
                }
            }
            HandlerState::SeekHeader { header } => {
                header.push(byte);
                loop {
                    let prefix_ok = header.len() < 2
                        || FrameKind::from_prefix([header[0], header[1]]).is_some();
                    let first_ok = header.first().is_none_or(|&b| {
                        FrameKind::ALL.iter().any(|k| k.prefix()[0] == b)
                    });
                    if !first_ok || !prefix_ok {
                        header.remove(0);
                        step.finalized += 1;
                        continue;
                    }
                    if header.len() < HEADER_LEN {
                        break;
                    }
                    match expected_frame_length(header) {
                        FrameLength::Bytes(n) => {
                            let kind = FrameKind::from_prefix([header[0], header[1]])
                                .expect("prefix checked");
                            step.header = Some((kind, n));
                            self.state = HandlerState::StreamingBody {
                                frame_len: n,
                                remaining: n - HEADER_LEN,
                            };
                        }
                        FrameLength::Resync => {
                            header.remove(0);
                            step.finalized += 1;
                            continue;
                        }
                    }
                    break;
                }
            }
        }
        step
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Power {
    Sleeping,
    Advertising,
    Connected,
}

#[derive(Debug, Clone)]
pub struct BridgeConfig {
    pub ring_capacity: usize,
    /// Send SET_BAUDRATE to the sensor when a host connects.
    pub downshift: bool,
    pub downshift_baud: BaudRate,
    pub wake_window: VirtualTime,
    pub adv_name: String,
    pub ble: BleConnectionParams,
    /// Notifications the radio stack will hold at once.
    pub tx_buffers: usize,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        let ble = BleConnectionParams::default();
        Self {
            ring_capacity: RING_CAPACITY,
            downshift: true,
            downshift_baud: BaudRate::new(DOWNSHIFT_BAUD).expect("supported"),
            wake_window: WAKE_WINDOW,
            adv_name: ADV_NAME.to_string(),
            tx_buffers: ble.notifications_per_interval() as usize,
            ble,
        }
    }
}

/// Side effects the surrounding simulation must carry out.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BridgeAction {
    /// Bytes to transmit toward the sensor.
    ToUart(Vec<u8>),
    /// A notification that departs toward the host at `departs`.
    Notify { departs: VirtualTime, payload: Vec<u8> },
    /// Call [`Bridge::on_advertising_deadline`] at `at` with `generation`.
    AdvertisingDeadline { at: VirtualTime, generation: u64 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BridgeStats {
    pub overflow_events: u64,
    pub dropped_bytes: u64,
    pub notifications: u64,
    pub uart_bytes_in: u64,
    pub first_overflow_at: Option<VirtualTime>,
}

#[derive(Debug, Clone)]
enum Downshift {
    Off,
    Awaiting {
        parser: StreamParser,
        held: Vec<Vec<u8>>,
    },
    Done,
}

#[derive(Debug, Clone)]
pub struct Bridge {
    config: BridgeConfig,
    power: Power,
    wake_deadline: Option<VirtualTime>,
    adv_generation: u64,
    ring: RingBuffer,
    handler: FprPacketHandler,
    /// Totals used to decide how many ring bytes belong to finished frames.
    pushed: u64,
    finalized: u64,
    popped: u64,
    in_overflow: bool,
    uplink: BleSession,
    downshift: Downshift,
    stats: BridgeStats,
}

impl Bridge {
    pub fn new(config: BridgeConfig) -> Self {
        Self {
            ring: RingBuffer::new(config.ring_capacity),
            uplink: BleSession::new(config.ble),
            config,
            power: Power::Sleeping,
            wake_deadline: None,
            adv_generation: 0,
            handler: FprPacketHandler::new(),
            pushed: 0,
            finalized: 0,
            popped: 0,
            in_overflow: false,
            downshift: Downshift::Off,
            stats: BridgeStats::default(),
        }
    }

    pub fn power(&self) -> Power {
        self.power
    }

    pub fn adv_name(&self) -> &str {
        &self.config.adv_name
    }

    pub fn wake_deadline(&self) -> Option<VirtualTime> {
        self.wake_deadline
    }

    pub fn ring(&self) -> &RingBuffer {
        &self.ring
    }

    pub fn stats(&self) -> BridgeStats {
        self.stats
    }

    pub fn handler(&self) -> &FprPacketHandler {
        &self.handler
    }

    /// Button press.
    pub fn wake(&mut self, ctx: &mut Ctx) -> Vec<BridgeAction> {
        if self.power != Power::Sleeping {
            ctx.log(BRIDGE, "WAKE_IGNORED", format!("power={:?}", self.power));
            return Vec::new();
        }
        let deadline = ctx.now + self.config.wake_window;
        self.power = Power::Advertising;
        self.wake_deadline = Some(deadline);
        self.adv_generation += 1;
        ctx.log(
            BRIDGE,
            "ADVERTISE",
            format!("name=\"{}\" until={}", self.config.adv_name, deadline),
        );
        vec![BridgeAction::AdvertisingDeadline {
            at: deadline,
            generation: self.adv_generation,
        }]
    }

    pub fn on_advertising_deadline(&mut self, ctx: &mut Ctx, generation: u64) {
        if self.power == Power::Advertising && generation == self.adv_generation {
            self.power = Power::Sleeping;
            self.wake_deadline = None;
            ctx.log(BRIDGE, "SLEEP", "no connection");
        }
    }

    pub fn on_ble_connect(&mut self, ctx: &mut Ctx) -> Vec<BridgeAction> {
        if self.power != Power::Advertising {
            ctx.log(BRIDGE, "CONNECT_REJECTED", format!("power={:?}", self.power));
            return Vec::new();
        }
        self.power = Power::Connected;
        self.wake_deadline = None;
        self.uplink.connect(ctx.now);
        ctx.log(BRIDGE, "CONNECTED", "");
        if !self.config.downshift {
            self.downshift = Downshift::Off;
            return Vec::new();
        }
        let baud = self.config.downshift_baud.bps();
        let cmd = Frame::command(CommandWord::SET_BAUDRATE, &baud.to_le_bytes())
            .expect("four-byte parameter");
        self.downshift = Downshift::Awaiting {
            parser: StreamParser::new(),
            held: Vec::new(),
        };
        ctx.log(BRIDGE, "DOWNSHIFT", format!("baud={baud}"));
        vec![BridgeAction::ToUart(cmd.encode())]
    }

    pub fn on_ble_disconnect(&mut self, ctx: &mut Ctx) {
        if self.power == Power::Connected {
            self.uplink.disconnect();
            self.ring.clear();
            self.handler = FprPacketHandler::new();
            self.finalized = self.pushed;
            self.popped = self.pushed;
            self.power = Power::Sleeping;
            ctx.log(BRIDGE, "DISCONNECTED", "");
        }
    }

    /// Host-to-sensor bytes, forwarded without interpretation.
    pub fn on_ble_data(&mut self, ctx: &mut Ctx, chunk: &[u8]) -> Vec<BridgeAction> {
        if self.power != Power::Connected {
            ctx.log(BRIDGE, "RX_DROPPED", format!("bytes={} power={:?}", chunk.len(), self.power));
            return Vec::new();
        }
        if chunk.is_empty() {
            return Vec::new();
        }
        if let Downshift::Awaiting { held, .. } = &mut self.downshift {
            held.push(chunk.to_vec());
            return Vec::new();
        }
        vec![BridgeAction::ToUart(chunk.to_vec())]
    }

    /// Sensor-to-host bytes.
    pub fn on_uart_data(&mut self, ctx: &mut Ctx, data: &[u8]) -> Vec<BridgeAction> {
        if self.power != Power::Connected {
            return Vec::new();
        }
        self.stats.uart_bytes_in += data.len() as u64;
        if let Downshift::Awaiting { parser, held } = &mut self.downshift {
            let acked = parser
                .push(data)
                .into_iter()
                .find(|f| f.cmd() == CommandWord::SET_BAUDRATE);
            return match acked {
                Some(frame) => {
                    let result = frame.result().map(|r| r.to_string()).unwrap_or_default();
                    ctx.log(BRIDGE, "DOWNSHIFT_ACK", result);
                    let held = std::mem::take(held);
                    self.downshift = Downshift::Done;
                    held.into_iter().map(BridgeAction::ToUart).collect()
                }
                None => Vec::new(),
            };
        }
        let accepted = match self.ring.push(data) {
            Ok(()) => {
                self.in_overflow = false;
                data.len()
            }
            Err(Overflow { dropped }) => {
                self.stats.dropped_bytes += dropped as u64;
                if !self.in_overflow {
                    self.in_overflow = true;
                    self.stats.overflow_events += 1;
                    self.stats.first_overflow_at.get_or_insert(ctx.now);
                    ctx.log(
                        BRIDGE,
                        "OVERFLOW",
                        format!("occupancy={} dropped={dropped}", self.ring.len()),
                    );
                }
                data.len() - dropped
            }
        };
        for &b in &data[..accepted] {
            self.pushed += 1;
            let step = self.handler.feed(b);
            self.finalized += step.finalized as u64;
            if let Some((kind, len)) = step.header {
                ctx.log(BRIDGE, "HEADER", format!("kind={} len={len}", kind.name()));
            }
        }
        self.pump(ctx)
    }

    /// A notification left the radio; room for another.
    pub fn on_notification_sent(&mut self, ctx: &mut Ctx) -> Vec<BridgeAction> {
        self.uplink.complete_departure();
        if self.power != Power::Connected {
            return Vec::new();
        }
        self.pump(ctx)
    }

    fn pump(&mut self, ctx: &mut Ctx) -> Vec<BridgeAction> {
        let mut actions = Vec::new();
        while self.uplink.in_flight() < self.config.tx_buffers {
            let complete = self.finalized.saturating_sub(self.popped) as usize;
            let size = if self.ring.len() >= BLE_PAYLOAD_CAP {
                BLE_PAYLOAD_CAP
            } else if complete > 0 {
                complete.min(self.ring.len())
            } else {
                break;
            };
            let payload = self.ring.pop(size);
            self.popped += payload.len() as u64;
            let departs = self
                .uplink
                .notify(ctx.now, &payload)
                .expect("connected and within payload cap");
            self.stats.notifications += 1;
            actions.push(BridgeAction::Notify { departs, payload });
        }
        actions
    }
}
