//! Link timing models: a full-duplex 8N1 UART and a BLE notification channel.
//!
//! Neither link loses or reorders data. Both compute delivery times up front
//! and hand them back to the caller, which turns them into scheduler events.

use std::collections::VecDeque;
use std::fmt;

use thiserror::Error;

use crate::defaults::{
    BLE_INTERVAL_GRANULARITY_US, BLE_INTERVAL_US, BLE_NOTIFICATIONS_PER_INTERVAL, BLE_PAYLOAD_CAP,
    SUPPORTED_BAUDS, UART_BITS_PER_BYTE,
};
use crate::sim::{ComponentId, VirtualTime};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransportError {
    #[error("unsupported baud rate {0}")]
    Baud(u32),
    #[error("nothing to send")]
    Empty,
    #[error("{0} is not an endpoint of this link")]
    UnknownEndpoint(ComponentId),
    #[error("BLE payload of {0} bytes exceeds the 20-byte cap")]
    PayloadTooLarge(usize),
    #[error("BLE session is disconnected")]
    Disconnected,
    #[error("invalid BLE parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BaudRate(u32);

impl BaudRate {
    pub fn new(bps: u32) -> Result<Self, TransportError> {
        if SUPPORTED_BAUDS.contains(&bps) {
            Ok(BaudRate(bps))
        } else {
            Err(TransportError::Baud(bps))
        }
    }

    pub fn bps(self) -> u32 {
        self.0
    }
}

impl fmt::Display for BaudRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One byte arriving at the far end of a link.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Delivery {
    pub at: VirtualTime,
    pub to: ComponentId,
    pub byte: u8,
}

/// Full-duplex UART between two endpoints.
///
/// Line time is tracked exactly as `micros * baud` so that long transfers do
/// not accumulate rounding error; only delivery instants are rounded (half
/// up) to whole microseconds.
#[derive(Debug, Clone)]
pub struct UartLink {
    endpoints: [ComponentId; 2],
    baud: BaudRate,
    bits_per_byte: u32,
    /// Per direction: instant the transmitter goes idle, in micros * baud.
    free_at: [u128; 2],
    pending_baud: Option<(VirtualTime, BaudRate)>,
}

impl UartLink {
    pub fn new(a: ComponentId, b: ComponentId, baud: BaudRate) -> Self {
        Self {
            endpoints: [a, b],
            baud,
            bits_per_byte: UART_BITS_PER_BYTE,
            free_at: [0, 0],
            pending_baud: None,
        }
    }

    pub fn baud(&self) -> BaudRate {
        self.baud
    }

    pub fn bits_per_byte(&self) -> u32 {
        self.bits_per_byte
    }

    /// Byte service time in microseconds.
    pub fn byte_time_us(&self) -> f64 {
        f64::from(self.bits_per_byte) * 1e6 / f64::from(self.baud.0)
    }

    fn lane(&self, from: ComponentId) -> Result<usize, TransportError> {
        self.endpoints
            .iter()
            .position(|&e| e == from)
            .ok_or(TransportError::UnknownEndpoint(from))
    }

    fn round_us(&self, scaled: u128) -> VirtualTime {
        let baud = u128::from(self.baud.0);
        VirtualTime::from_micros(((scaled + baud / 2) / baud) as u64)
    }

    /// Switches rate immediately for both directions.
    pub fn set_baud(&mut self, baud: BaudRate) {
        let (old, new) = (u128::from(self.baud.0), u128::from(baud.0));
        for slot in &mut self.free_at {
            *slot = (*slot * new).div_ceil(old);
        }
        self.baud = baud;
        self.pending_baud = None;
    }

    /// Switches rate for every transmission that starts at or after `at`.
    pub fn schedule_baud_change(&mut self, at: VirtualTime, baud: BaudRate) {
        self.pending_baud = Some((at, baud));
    }

    /// Instant the `from` transmitter finishes its current backlog.
    pub fn busy_until(&self, from: ComponentId) -> Result<VirtualTime, TransportError> {
        Ok(self.round_us(self.free_at[self.lane(from)?]))
    }

    /// Queues `data` behind anything already in flight from `from`; byte `k`
    /// (1-based) lands at `start + k * bits / baud`.
    pub fn send(
        &mut self,
        now: VirtualTime,
        from: ComponentId,
        data: &[u8],
    ) -> Result<Vec<Delivery>, TransportError> {
        if data.is_empty() {
            return Err(TransportError::Empty);
        }
        let lane = self.lane(from)?;
        let to = self.endpoints[1 - lane];
        let now_scaled = |baud: BaudRate| u128::from(now.as_micros()) * u128::from(baud.0);
        let mut start = now_scaled(self.baud).max(self.free_at[lane]);
        if let Some((at, baud)) = self.pending_baud {
            if self.round_us(start) >= at {
                self.set_baud(baud);
                start = now_scaled(self.baud).max(self.free_at[lane]);
            }
        }
        let step = u128::from(self.bits_per_byte) * 1_000_000;
        let deliveries = data
            .iter()
            .enumerate()
            .map(|(i, &byte)| Delivery {
                at: self.round_us(start + step * (i as u128 + 1)),
                to,
                byte,
            })
            .collect();
        self.free_at[lane] = start + step * data.len() as u128;
        Ok(deliveries)
    }
}

/// Connection parameters that bound notification throughput.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BleConnectionParams {
    interval_us: u64,
    notifications_per_interval: u32,
    payload_cap: usize,
}

impl Default for BleConnectionParams {
    fn default() -> Self {
        Self {
            interval_us: BLE_INTERVAL_US,
            notifications_per_interval: BLE_NOTIFICATIONS_PER_INTERVAL,
            payload_cap: BLE_PAYLOAD_CAP,
        }
    }
}

impl BleConnectionParams {
    pub fn new(interval_us: u64, notifications_per_interval: u32) -> Result<Self, TransportError> {
        if interval_us == 0 || !interval_us.is_multiple_of(BLE_INTERVAL_GRANULARITY_US) {
            return Err(TransportError::InvalidParams(format!(
                "interval {interval_us} us is not a positive multiple of 1250 us"
            )));
        }
        if notifications_per_interval == 0 {
            return Err(TransportError::InvalidParams(
                "notifications_per_interval must be at least 1".into(),
            ));
        }
        Ok(Self {
            interval_us,
            notifications_per_interval,
            payload_cap: BLE_PAYLOAD_CAP,
        })
    }

    pub fn interval_us(&self) -> u64 {
        self.interval_us
    }

    pub fn notifications_per_interval(&self) -> u32 {
        self.notifications_per_interval
    }

    pub fn payload_cap(&self) -> usize {
        self.payload_cap
    }

    /// Ceiling payload throughput in bytes per second.
    pub fn effective_rate(&self) -> f64 {
        (self.payload_cap as f64) * f64::from(self.notifications_per_interval) * 1e6
            / self.interval_us as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BleState {
    Disconnected,
    Connected,
}

/// One direction of a BLE connection.
///
/// Payloads leave only on connection-event boundaries
/// (`anchor + k * interval`, k >= 1), at most `notifications_per_interval`
/// per boundary, in FIFO order.
#[derive(Debug, Clone)]
pub struct BleSession {
    params: BleConnectionParams,
    state: BleState,
    anchor: VirtualTime,
    /// Boundary index of the newest reservation and how many slots it uses.
    last_slot: Option<(u64, u32)>,
    tx_queue: VecDeque<(VirtualTime, usize)>,
}

impl BleSession {
    pub fn new(params: BleConnectionParams) -> Self {
        Self {
            params,
            state: BleState::Disconnected,
            anchor: VirtualTime::ZERO,
            last_slot: None,
            tx_queue: VecDeque::new(),
        }
    }

    pub fn params(&self) -> &BleConnectionParams {
        &self.params
    }

    pub fn state(&self) -> BleState {
        self.state
    }

    pub fn is_connected(&self) -> bool {
        self.state == BleState::Connected
    }

    pub fn connect(&mut self, now: VirtualTime) {
        self.state = BleState::Connected;
        self.anchor = now;
        self.last_slot = None;
        self.tx_queue.clear();
    }

    pub fn disconnect(&mut self) {
        self.state = BleState::Disconnected;
        self.tx_queue.clear();
    }

    /// Payloads accepted but not yet departed.
    pub fn in_flight(&self) -> usize {
        self.tx_queue.len()
    }

    /// Enqueues one notification and returns the instant it departs.
    pub fn notify(&mut self, now: VirtualTime, payload: &[u8]) -> Result<VirtualTime, TransportError> {
        if self.state != BleState::Connected {
            return Err(TransportError::Disconnected);
        }
        if payload.is_empty() {
            return Err(TransportError::Empty);
        }
        if payload.len() > self.params.payload_cap {
            return Err(TransportError::PayloadTooLarge(payload.len()));
        }
        let interval = self.params.interval_us;
        let earliest = now.saturating_sub(self.anchor).as_micros() / interval + 1;
        let slot = match self.last_slot {
            Some((k, used)) if k >= earliest => {
                if used < self.params.notifications_per_interval {
                    (k, used + 1)
                } else {
                    (k + 1, 1)
                }
            }
            _ => (earliest, 1),
        };
        self.last_slot = Some(slot);
        let departs = self.anchor + VirtualTime::from_micros(slot.0 * interval);
        self.tx_queue.push_back((departs, payload.len()));
        Ok(departs)
    }

    /// Retires the oldest in-flight payload; call when its departure fires.
    pub fn complete_departure(&mut self) -> Option<VirtualTime> {
        self.tx_queue.pop_front().map(|(at, _)| at)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: ComponentId = ComponentId("a");
    const B: ComponentId = ComponentId("b");

    fn link(bps: u32) -> UartLink {
        UartLink::new(A, B, BaudRate::new(bps).unwrap())
    }

    #[test]
    fn single_byte_at_9600() {
        let d = link(9_600).send(VirtualTime::ZERO, A, &[0x42]).unwrap();
        assert_eq!(d, vec![Delivery { at: VirtualTime::from_micros(1_042), to: B, byte: 0x42 }]);
    }

    #[test]
    fn command_frame_at_115200() {
        let d = link(115_200).send(VirtualTime::ZERO, A, &[0; 26]).unwrap();
        assert_eq!(d.last().unwrap().at, VirtualTime::from_micros(2_257));
    }

    #[test]
    fn empty_send_is_rejected() {
        assert_eq!(link(9_600).send(VirtualTime::ZERO, A, &[]), Err(TransportError::Empty));
    }

    #[test]
    fn unknown_endpoint_is_rejected() {
        let err = link(9_600).send(VirtualTime::ZERO, ComponentId("c"), &[1]).unwrap_err();
        assert_eq!(err, TransportError::UnknownEndpoint(ComponentId("c")));
    }

    #[test]
    fn sends_serialize_per_direction() {
        let mut l = link(9_600);
        let first = l.send(VirtualTime::ZERO, A, &[1, 2]).unwrap();
        let second = l.send(VirtualTime::ZERO, A, &[3]).unwrap();
        assert_eq!(first[1].at, VirtualTime::from_micros(2_083));
        assert_eq!(second[0].at, VirtualTime::from_micros(3_125));
        // The other direction is independent.
        let back = l.send(VirtualTime::ZERO, B, &[9]).unwrap();
        assert_eq!(back[0], Delivery { at: VirtualTime::from_micros(1_042), to: A, byte: 9 });
    }

    #[test]
    fn long_transfers_do_not_drift() {
        let d = link(9_600).send(VirtualTime::ZERO, A, &vec![0; 9_600]).unwrap();
        assert_eq!(d.last().unwrap().at, VirtualTime::from_secs(10));
    }

    #[test]
    fn pending_baud_applies_to_later_transmissions() {
        let mut l = link(115_200);
        let ack = l.send(VirtualTime::ZERO, B, &[0; 26]).unwrap();
        let done = ack.last().unwrap().at;
        l.schedule_baud_change(done, BaudRate::new(9_600).unwrap());
        // A send starting before the switch still runs at the old rate.
        let early = l.send(VirtualTime::from_micros(100), A, &[1]).unwrap();
        assert_eq!(early[0].at, VirtualTime::from_micros(187));
        assert_eq!(l.baud().bps(), 115_200);
        let late = l.send(done, A, &[1]).unwrap();
        assert_eq!(late[0].at, done + VirtualTime::from_micros(1_042));
        assert_eq!(l.baud().bps(), 9_600);
    }

    #[test]
    fn unsupported_baud() {
        assert_eq!(BaudRate::new(4_800), Err(TransportError::Baud(4_800)));
    }

    #[test]
    fn ble_payload_cap() {
        let mut s = BleSession::new(BleConnectionParams::default());
        s.connect(VirtualTime::ZERO);
        assert_eq!(
            s.notify(VirtualTime::ZERO, &[0; 21]),
            Err(TransportError::PayloadTooLarge(21))
        );
        assert!(s.notify(VirtualTime::ZERO, &[0; 20]).is_ok());
    }

    #[test]
    fn ble_disconnected_rejects() {
        let mut s = BleSession::new(BleConnectionParams::default());
        assert_eq!(s.notify(VirtualTime::ZERO, &[1]), Err(TransportError::Disconnected));
    }

    #[test]
    fn ble_departures_on_interval_boundaries() {
        let mut s = BleSession::new(BleConnectionParams::new(21_250, 1).unwrap());
        s.connect(VirtualTime::ZERO);
        let times: Vec<u64> = (0..3)
            .map(|_| s.notify(VirtualTime::ZERO, &[0; 20]).unwrap().as_micros())
            .collect();
        assert_eq!(times, [21_250, 42_500, 63_750]);
        assert_eq!(s.in_flight(), 3);
        assert_eq!(s.complete_departure(), Some(VirtualTime::from_micros(21_250)));
    }

    #[test]
    fn ble_multiple_notifications_share_a_boundary() {
        let mut s = BleSession::new(BleConnectionParams::new(7_500, 2).unwrap());
        s.connect(VirtualTime::from_micros(1_000));
        let times: Vec<u64> = (0..5)
            .map(|_| s.notify(VirtualTime::from_micros(2_000), &[0; 5]).unwrap().as_micros())
            .collect();
        assert_eq!(times, [8_500, 8_500, 16_000, 16_000, 23_500]);
        // After an idle gap the next payload waits for the next boundary only.
        let later = s.notify(VirtualTime::from_micros(100_000), &[0]).unwrap();
        assert_eq!(later.as_micros(), 1_000 + 14 * 7_500);
    }

    #[test]
    fn effective_rates() {
        let one = BleConnectionParams::new(21_250, 1).unwrap();
        assert!((one.effective_rate() - 941.176).abs() < 1e-3);
        assert!((one.effective_rate() * 8.0 / 1000.0 - 7.53).abs() < 0.01);
        let two = BleConnectionParams::new(21_250, 2).unwrap();
        assert!((two.effective_rate() - 1_882.353).abs() < 1e-3);
        assert!(BleConnectionParams::new(21_250, 0).is_err());
        assert!(BleConnectionParams::new(21_000, 1).is_err());
    }
}
