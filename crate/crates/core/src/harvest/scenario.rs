//! End-to-end scenarios on one event loop.
//!
//! Topologies:
//!
//! * droplock: host <-BLE-> bridge <-UART-> sensor
//! * PoC: web client <-WiFi-> controller <-UART-> sensor
//!
//! BLE writes and notifications arrive at their connection-event boundary;
//! UART bytes arrive one by one at their exact line time.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ed25519_dalek::SigningKey;
use rand::RngCore;
use thiserror::Error;

use crate::bridge::{Bridge, BridgeAction, BridgeConfig, BRIDGE};
use crate::defaults::{
    BLE_PAYLOAD_CAP, CAPTURE_TIMEOUT, CONNECT_DELAY, FETCH_DELAY, FETCH_WINDOW, FINGER_AT,
    IDLE_ACTUATE, RING_CAPACITY, SENSOR_DEFAULT_BAUD,
};
use crate::dfu::{
    build_package, tamper_package, DfuError, DfuRoute, FirmwareId, LockProvisioningState,
    PendingFlash, ProtectionKind, TrustPolicy,
};
use crate::protocol::{CommandWord, Frame, StreamParser};
use crate::sensor::{generate_fingerprint, FingerprintImage, Resolution, Sensor, SensorReply, UploadPolicy};
use crate::sim::{ComponentId, Event, Handler, RunLimit, Scheduler, SimLog, VirtualTime};
use crate::transport::{BaudRate, BleConnectionParams, BleSession, UartLink};

use super::client::{command_label, CaptureError, CaptureOptions, CaptureStats, ClientAction, ClientTimer, HarvestClient, HOST};
use super::pgm::{save_pgm, PgmError};
use super::poc::{PocAction, PocController, PocTimer, POC};

pub const SENSOR: ComponentId = ComponentId("sensor");
pub const USER: ComponentId = ComponentId("user");
pub const LOCK: ComponentId = ComponentId("lock");

/// Virtual-time ceiling for any single scenario.
const RUN_LIMIT: VirtualTime = VirtualTime::from_secs(600);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scenario {
    PocSequence,
    CotsCapture,
    Overflow115200,
    DfuInfection,
    PolicyDenied,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::PocSequence,
        Scenario::CotsCapture,
        Scenario::Overflow115200,
        Scenario::DfuInfection,
        Scenario::PolicyDenied,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::PocSequence => "poc_sequence",
            Scenario::CotsCapture => "cots_capture",
            Scenario::Overflow115200 => "overflow_115200",
            Scenario::DfuInfection => "dfu_infection",
            Scenario::PolicyDenied => "policy_denied",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = ScenarioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| ScenarioError::UnknownScenario(s.to_string()))
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("unknown scenario {0:?}")]
    UnknownScenario(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Pgm(#[from] PgmError),
}

#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    /// Seeds the scheduler RNG and the victim's fingerprint.
    pub seed: u64,
    /// When the victim touches the sensor, relative to the start of the
    /// capture phase. `None` means nobody does.
    pub finger_at: Option<VirtualTime>,
    pub connect_delay: VirtualTime,
    pub capture_timeout: VirtualTime,
    pub resolution: Resolution,
    pub ble: BleConnectionParams,
    pub sensor_baud: BaudRate,
    pub ring_capacity: usize,
    pub policy: UploadPolicy,
    pub downshift: bool,
    pub idle_timeout: VirtualTime,
    pub fetch_window: VirtualTime,
    /// PoC: capture to web fetch.
    pub fetch_delay: VirtualTime,
    /// DFU: the lock insists on a vendor signature.
    pub require_signature: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            finger_at: Some(FINGER_AT),
            connect_delay: CONNECT_DELAY,
            capture_timeout: CAPTURE_TIMEOUT,
            resolution: Resolution::Full,
            ble: BleConnectionParams::default(),
            sensor_baud: BaudRate::new(SENSOR_DEFAULT_BAUD).expect("supported"),
            ring_capacity: RING_CAPACITY,
            policy: UploadPolicy::AllowImage,
            downshift: true,
            idle_timeout: IDLE_ACTUATE,
            fetch_window: FETCH_WINDOW,
            fetch_delay: FETCH_DELAY,
            require_signature: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Instants and counters pulled out of a run for assertions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metrics {
    /// The sensor started transmitting its UP_IMAGE reply.
    pub image_tx_start: Option<VirtualTime>,
    /// The last byte of that reply reached the other end of the UART.
    pub image_tx_end: Option<VirtualTime>,
    pub image_tx_bytes: usize,
    pub first_overflow_at: Option<VirtualTime>,
    pub overflow_events: u64,
    pub ring_high_watermark: usize,
    pub ble_notifications: u64,
    /// Data frames the host parsed intact.
    pub host_data_frames: u64,
    pub idle_actuate_at: Option<VirtualTime>,
    pub captured_at: Option<VirtualTime>,
    pub window_closed_at: Option<VirtualTime>,
    pub fetches: Vec<VirtualTime>,
    pub dfu_activated_at: Option<VirtualTime>,
    pub flash_completed_at: Option<VirtualTime>,
    pub firmware: Option<FirmwareId>,
    pub registered_lock_refused: Option<bool>,
}

#[derive(Debug, Clone)]
pub struct ScenarioReport {
    pub name: String,
    pub passed: bool,
    pub log: SimLog,
    pub stats: Option<CaptureStats>,
    pub artifacts: Vec<PathBuf>,
    pub checks: Vec<Check>,
    pub metrics: Metrics,
    /// What the attacker ended up with.
    pub image: Option<FingerprintImage>,
    pub capture: Option<Result<(), CaptureError>>,
}

impl ScenarioReport {
    pub fn summary(&self) -> String {
        let mut out = format!(
            "scenario {}: {}\n",
            self.name,
            if self.passed { "PASS" } else { "FAIL" }
        );
        for c in &self.checks {
            out += &format!(
                "  [{}] {}: {}\n",
                if c.passed { "ok" } else { "FAIL" },
                c.name,
                c.detail
            );
        }
        if let Some(s) = &self.stats {
            out += &format!(
                "  upload: {} bytes in {:.3} s = {:.2} kbps, overflows={}, checksum failures={}\n",
                s.bytes_received,
                s.duration.as_secs_f64(),
                s.effective_kbps(),
                s.overflow_events,
                s.checksum_failures
            );
        }
        for a in &self.artifacts {
            out += &format!("  wrote {}\n", a.display());
        }
        out
    }
}

#[derive(Debug, Clone)]
enum Signal {
    ButtonPress,
    AdvertisingDeadline(u64),
    HostConnect,
    HostDisconnect,
    /// Host-to-bridge BLE write.
    BleWrite(Vec<u8>),
    /// Bridge-to-host notification.
    BleNotify(Vec<u8>),
    Uart(u8),
    SensorTransmit(SensorReply),
    FingerDown(u64),
    Client(ClientTimer),
    PocStart,
    Poc(PocTimer),
    Fetch,
    FlashComplete,
}

struct World {
    uart: UartLink,
    sensor: Sensor,
    sensor_parser: StreamParser,
    bridge_config: BridgeConfig,
    bridge: Option<Bridge>,
    host_link: BleSession,
    client: Option<HarvestClient>,
    poc: Option<PocController>,
    lock: Option<LockProvisioningState>,
    pending_flash: Option<PendingFlash>,
    fetched: Option<FingerprintImage>,
    fetch_delay: VirtualTime,
    metrics: Metrics,
    /// Capture phase to schedule once the flash completes.
    after_flash: Option<CaptureStart>,
}

#[derive(Debug, Clone, Copy)]
struct CaptureStart {
    connect_delay: VirtualTime,
    finger_at: Option<VirtualTime>,
    finger_seed: u64,
}

fn at(sched: &mut Scheduler<Signal>, when: VirtualTime, target: ComponentId, signal: Signal) {
    sched
        .schedule(when, target, signal)
        .expect("world only schedules into the future");
}

impl World {
    fn new(config: &ScenarioConfig, uart_peer: ComponentId, downshift: bool) -> Self {
        let bridge_config = BridgeConfig {
            ring_capacity: config.ring_capacity,
            downshift,
            ble: config.ble,
            tx_buffers: config.ble.notifications_per_interval() as usize,
            ..BridgeConfig::default()
        };
        Self {
            uart: UartLink::new(SENSOR, uart_peer, config.sensor_baud),
            sensor: Sensor::new(config.sensor_baud, config.policy),
            sensor_parser: StreamParser::new(),
            bridge_config,
            bridge: None,
            host_link: BleSession::new(config.ble),
            client: None,
            poc: None,
            lock: None,
            pending_flash: None,
            fetched: None,
            fetch_delay: config.fetch_delay,
            metrics: Metrics::default(),
            after_flash: None,
        }
    }

    fn schedule_capture(&self, sched: &mut Scheduler<Signal>, start: VirtualTime, c: CaptureStart) {
        at(sched, start, USER, Signal::ButtonPress);
        at(sched, start + c.connect_delay, HOST, Signal::HostConnect);
        if let Some(finger) = c.finger_at {
            at(sched, start + finger, USER, Signal::FingerDown(c.finger_seed));
        }
    }

    fn uart_send(&mut self, sched: &mut Scheduler<Signal>, from: ComponentId, bytes: &[u8]) -> Option<VirtualTime> {
        let deliveries = self.uart.send(sched.now(), from, bytes).ok()?;
        let last = deliveries.last().map(|d| d.at);
        for d in deliveries {
            at(sched, d.at, d.to, Signal::Uart(d.byte));
        }
        last
    }

    fn apply_bridge(&mut self, sched: &mut Scheduler<Signal>, actions: Vec<BridgeAction>) {
        for action in actions {
            match action {
                BridgeAction::ToUart(bytes) => {
                    self.uart_send(sched, BRIDGE, &bytes);
                }
                BridgeAction::Notify { departs, payload } => {
                    at(sched, departs, HOST, Signal::BleNotify(payload));
                }
                BridgeAction::AdvertisingDeadline { at: when, generation } => {
                    at(sched, when, BRIDGE, Signal::AdvertisingDeadline(generation));
                }
            }
        }
    }

    fn apply_client(&mut self, sched: &mut Scheduler<Signal>, actions: Vec<ClientAction>) {
        for action in actions {
            match action {
                ClientAction::Send(frame) => {
                    for chunk in frame.encode().chunks(BLE_PAYLOAD_CAP) {
                        match self.host_link.notify(sched.now(), chunk) {
                            Ok(departs) => at(sched, departs, BRIDGE, Signal::BleWrite(chunk.to_vec())),
                            Err(e) => sched.log(HOST, "TX_FAILED", e.to_string()),
                        }
                    }
                }
                ClientAction::Timer { at: when, timer } => at(sched, when, HOST, Signal::Client(timer)),
                ClientAction::Disconnect => {
                    let now = sched.now();
                    at(sched, now, HOST, Signal::HostDisconnect);
                }
            }
        }
    }

    fn apply_poc(&mut self, sched: &mut Scheduler<Signal>, actions: Vec<PocAction>) {
        for action in actions {
            match action {
                PocAction::ToUart(bytes) => {
                    self.uart_send(sched, POC, &bytes);
                }
                PocAction::Timer { at: when, timer } => at(sched, when, POC, Signal::Poc(timer)),
            }
        }
    }

    fn sensor_byte(&mut self, sched: &mut Scheduler<Signal>, byte: u8) {
        for frame in self.sensor_parser.push(&[byte]) {
            sched.log(SENSOR, "RX", command_label(frame.cmd()));
            let reply = self.sensor.handle_frame(&frame);
            if !reply.frames.is_empty() {
                let when = sched.now() + reply.delay;
                at(sched, when, SENSOR, Signal::SensorTransmit(reply));
            }
        }
    }

    fn sensor_transmit(&mut self, sched: &mut Scheduler<Signal>, reply: SensorReply) {
        let bytes: Vec<u8> = reply.frames.iter().flat_map(Frame::encode).collect();
        let now = sched.now();
        let Some(last) = self.uart_send(sched, SENSOR, &bytes) else {
            return;
        };
        let head = &reply.frames[0];
        let result = head.result().map(|r| format!(" {r}")).unwrap_or_default();
        sched.log(
            SENSOR,
            "TX",
            format!(
                "{}{result} frames={} bytes={} until={last}",
                command_label(head.cmd()),
                reply.frames.len(),
                bytes.len()
            ),
        );
        if head.cmd() == CommandWord::UP_IMAGE && reply.frames.len() > 1 {
            self.metrics.image_tx_start.get_or_insert(now);
            self.metrics.image_tx_end = Some(last);
            self.metrics.image_tx_bytes = bytes.len();
        }
        if let Some(baud) = reply.switch_baud {
            self.uart.schedule_baud_change(last, baud);
            sched.log(SENSOR, "BAUD", format!("bps={} from={last}", baud.bps()));
        }
    }
}

impl Handler<Signal> for World {
    fn handle(&mut self, event: Event<Signal>, sched: &mut Scheduler<Signal>) {
        match event.payload {
            Signal::ButtonPress => {
                sched.log(USER, "BUTTON", "");
                if let Some(bridge) = &mut self.bridge {
                    let actions = bridge.wake(&mut sched.ctx());
                    self.apply_bridge(sched, actions);
                }
            }
            Signal::AdvertisingDeadline(generation) => {
                if let Some(bridge) = &mut self.bridge {
                    bridge.on_advertising_deadline(&mut sched.ctx(), generation);
                }
            }
            Signal::HostConnect => {
                let Some(bridge) = &mut self.bridge else {
                    sched.log(HOST, "NO_DEVICE", "");
                    return;
                };
                let name = bridge.adv_name().to_string();
                sched.log(HOST, "CONNECT", format!("name=\"{name}\""));
                let actions = bridge.on_ble_connect(&mut sched.ctx());
                if bridge.power() != crate::bridge::Power::Connected {
                    return;
                }
                self.apply_bridge(sched, actions);
                self.host_link.connect(sched.now());
                if let Some(client) = &mut self.client {
                    let actions = client.on_connect(&mut sched.ctx());
                    self.apply_client(sched, actions);
                }
            }
            Signal::HostDisconnect => {
                self.host_link.disconnect();
                sched.log(HOST, "DISCONNECT", "");
                if let Some(bridge) = &mut self.bridge {
                    self.metrics.ring_high_watermark = bridge.ring().high_watermark();
                    bridge.on_ble_disconnect(&mut sched.ctx());
                }
            }
            Signal::BleWrite(chunk) => {
                self.host_link.complete_departure();
                if let Some(bridge) = &mut self.bridge {
                    let actions = bridge.on_ble_data(&mut sched.ctx(), &chunk);
                    self.apply_bridge(sched, actions);
                }
            }
            Signal::BleNotify(payload) => {
                if let Some(bridge) = &mut self.bridge {
                    let actions = bridge.on_notification_sent(&mut sched.ctx());
                    self.apply_bridge(sched, actions);
                }
                if !self.host_link.is_connected() {
                    return;
                }
                if let Some(client) = &mut self.client {
                    let actions = client.on_bytes(&mut sched.ctx(), &payload);
                    self.apply_client(sched, actions);
                }
            }
            Signal::Uart(byte) => match event.target {
                SENSOR => self.sensor_byte(sched, byte),
                BRIDGE => {
                    if let Some(bridge) = &mut self.bridge {
                        let actions = bridge.on_uart_data(&mut sched.ctx(), &[byte]);
                        self.apply_bridge(sched, actions);
                    }
                }
                POC => {
                    if let Some(poc) = &mut self.poc {
                        let actions = poc.on_uart(&mut sched.ctx(), &[byte]);
                        let opened = poc.captured_at() == Some(sched.now());
                        self.apply_poc(sched, actions);
                        if opened {
                            let when = sched.now() + self.fetch_delay;
                            at(sched, when, HOST, Signal::Fetch);
                        }
                    }
                }
                _ => {}
            },
            Signal::SensorTransmit(reply) => self.sensor_transmit(sched, reply),
            Signal::FingerDown(seed) => {
                sched.log(USER, "FINGER", format!("seed={seed}"));
                if let Err(e) = self.sensor.present_finger(seed) {
                    sched.log(SENSOR, "FINGER_IGNORED", e.to_string());
                }
            }
            Signal::Client(timer) => {
                if let Some(client) = &mut self.client {
                    let actions = client.on_timer(&mut sched.ctx(), timer);
                    self.apply_client(sched, actions);
                }
            }
            Signal::PocStart => {
                if let Some(poc) = &mut self.poc {
                    let actions = poc.start(&mut sched.ctx());
                    self.apply_poc(sched, actions);
                }
            }
            Signal::Poc(timer) => {
                if let Some(poc) = &mut self.poc {
                    let actions = poc.on_timer(&mut sched.ctx(), timer);
                    self.apply_poc(sched, actions);
                }
            }
            Signal::Fetch => {
                sched.log(HOST, "FETCH_REQUEST", "");
                if let Some(poc) = &mut self.poc {
                    if let Some(image) = poc.on_fetch(&mut sched.ctx()) {
                        self.fetched = Some(image);
                    }
                }
            }
            Signal::FlashComplete => {
                let (Some(lock), Some(pending)) = (&mut self.lock, self.pending_flash.take()) else {
                    return;
                };
                lock.finish_flash(pending);
                self.metrics.flash_completed_at = Some(sched.now());
                self.metrics.firmware = Some(lock.firmware_id());
                sched.log(LOCK, "FIRMWARE", format!("id={:?}", lock.firmware_id()));
                self.bridge = Some(Bridge::new(self.bridge_config.clone()));
                if let Some(start) = self.after_flash.take() {
                    let now = sched.now();
                    self.schedule_capture(sched, now, start);
                }
            }
        }
    }
}

fn check(checks: &mut Vec<Check>, name: &'static str, passed: bool, detail: impl Into<String>) {
    checks.push(Check {
        name,
        passed,
        detail: detail.into(),
    });
}

fn fmt_time(t: Option<VirtualTime>) -> String {
    t.map_or_else(|| "never".to_string(), |t| format!("{t} us"))
}

struct Outcome {
    log: SimLog,
    metrics: Metrics,
    stats: Option<CaptureStats>,
    capture: Option<Result<FingerprintImage, CaptureError>>,
    fetched: Option<FingerprintImage>,
    poc_image: Option<FingerprintImage>,
}

fn run_world(mut world: World, mut sched: Scheduler<Signal>) -> Outcome {
    sched.run_until(RunLimit::Deadline(RUN_LIMIT), &mut world);
    let mut metrics = world.metrics;
    if let Some(bridge) = &world.bridge {
        let stats = bridge.stats();
        metrics.first_overflow_at = stats.first_overflow_at;
        metrics.overflow_events = stats.overflow_events;
        metrics.ble_notifications = stats.notifications;
        metrics.ring_high_watermark = metrics.ring_high_watermark.max(bridge.ring().high_watermark());
    }
    let poc_image = world.poc.as_ref().and_then(|p| p.image().cloned());
    if let Some(poc) = &world.poc {
        metrics.idle_actuate_at = poc.idle_actuated_at();
        metrics.captured_at = poc.captured_at();
        metrics.window_closed_at = poc.window_closed_at();
        metrics.fetches = poc.fetches().to_vec();
    }
    let (stats, capture) = match &world.client {
        Some(client) => {
            metrics.host_data_frames = client.data_frames();
            (Some(client.stats(metrics.overflow_events)), client.outcome().cloned())
        }
        None => (None, None),
    };
    Outcome {
        log: sched.into_log(),
        metrics,
        stats,
        capture,
        fetched: world.fetched,
        poc_image,
    }
}

fn bridge_world(config: &ScenarioConfig, downshift: bool) -> World {
    let mut world = World::new(config, BRIDGE, downshift);
    world.client = Some(HarvestClient::new(CaptureOptions {
        timeout: config.capture_timeout,
        resolution: config.resolution,
    }));
    world
}

fn capture_start(config: &ScenarioConfig) -> CaptureStart {
    CaptureStart {
        connect_delay: config.connect_delay,
        finger_at: config.finger_at,
        finger_seed: config.seed,
    }
}

/// Runs one capture through the droplock bridge: wake, connect, downshift
/// (if enabled), poll, capture, upload.
pub fn capture_image(
    config: &ScenarioConfig,
) -> (Result<FingerprintImage, CaptureError>, CaptureStats) {
    let outcome = run_capture(config, config.downshift);
    let stats = outcome.stats.expect("bridge world has a client");
    let result = outcome.capture.unwrap_or(Err(CaptureError::Timeout));
    (result, stats)
}

fn run_capture(config: &ScenarioConfig, downshift: bool) -> Outcome {
    let mut world = bridge_world(config, downshift);
    world.bridge = Some(Bridge::new(world.bridge_config.clone()));
    let mut sched = Scheduler::new(config.seed);
    world.schedule_capture(&mut sched, VirtualTime::ZERO, capture_start(config));
    run_world(world, sched)
}

fn expected_image(config: &ScenarioConfig) -> FingerprintImage {
    generate_fingerprint(config.seed, config.resolution)
}

fn capture_checks(checks: &mut Vec<Check>, config: &ScenarioConfig, out: &Outcome) {
    let fidelity = match &out.capture {
        Some(Ok(image)) => *image == expected_image(config),
        _ => false,
    };
    check(
        checks,
        "image captured",
        fidelity,
        match &out.capture {
            Some(Ok(image)) => format!("{} bytes, identical to sensor buffer: {fidelity}", image.pixels().len()),
            Some(Err(e)) => e.to_string(),
            None => "capture never finished".to_string(),
        },
    );
}

fn cots_checks(checks: &mut Vec<Check>, config: &ScenarioConfig, out: &Outcome) {
    capture_checks(checks, config, out);
    if config.resolution == Resolution::Full {
        let stats = out.stats.expect("client stats");
        let secs = stats.duration.as_secs_f64();
        check(
            checks,
            "upload duration",
            (27.0 * 0.85..=27.0 * 1.15).contains(&secs),
            format!("{secs:.3} s, expected 27 s +/- 15%"),
        );
        let kbps = stats.effective_kbps();
        check(
            checks,
            "throughput",
            (7.5 * 0.9..=7.5 * 1.1).contains(&kbps),
            format!("{kbps:.3} kbps, expected 7.5 kbps +/- 10%"),
        );
    }
    check(
        checks,
        "no overflow",
        out.metrics.overflow_events == 0,
        format!(
            "{} overflow events, ring high watermark {} bytes",
            out.metrics.overflow_events, out.metrics.ring_high_watermark
        ),
    );
}

fn poc_sequence(config: &ScenarioConfig) -> (Outcome, Vec<Check>) {
    let mut world = World::new(config, POC, false);
    world.poc = Some(PocController::new(config.idle_timeout, config.fetch_window));
    let mut sched = Scheduler::new(config.seed);
    at(&mut sched, VirtualTime::ZERO, POC, Signal::PocStart);
    if let Some(finger) = config.finger_at {
        at(&mut sched, finger, USER, Signal::FingerDown(config.seed));
    }
    let out = run_world(world, sched);
    let mut checks = Vec::new();
    let m = &out.metrics;
    match config.finger_at {
        None => check(
            &mut checks,
            "idle actuation",
            m.idle_actuate_at == Some(config.idle_timeout) && m.captured_at.is_none(),
            format!("ACTUATE at {}", fmt_time(m.idle_actuate_at)),
        ),
        Some(_) => {
            let expected = generate_fingerprint(config.seed, Resolution::Full);
            check(
                &mut checks,
                "capture",
                m.captured_at.is_some() && m.idle_actuate_at.is_none(),
                format!("captured at {}", fmt_time(m.captured_at)),
            );
            let window_ok = match (m.captured_at, m.window_closed_at) {
                (Some(c), Some(w)) => w == c + config.fetch_window,
                _ => false,
            };
            check(
                &mut checks,
                "fetch window",
                window_ok,
                format!("closed at {}", fmt_time(m.window_closed_at)),
            );
            check(
                &mut checks,
                "fetch",
                out.fetched.as_ref() == Some(&expected),
                format!("{} fetch(es) inside the window", m.fetches.len()),
            );
        }
    }
    (out, checks)
}

fn overflow_115200(config: &ScenarioConfig) -> (Outcome, Vec<Check>) {
    let out = run_capture(config, false);
    let mut checks = Vec::new();
    let m = &out.metrics;
    let within = match (m.image_tx_start, m.first_overflow_at) {
        (Some(start), Some(first)) => first.saturating_sub(start) <= VirtualTime::from_millis(250),
        _ => false,
    };
    check(
        &mut checks,
        "overflow",
        m.overflow_events >= 1 && within,
        format!(
            "{} overflow events, first at {} (image data from {})",
            m.overflow_events,
            fmt_time(m.first_overflow_at),
            fmt_time(m.image_tx_start)
        ),
    );
    let failures = out.stats.map_or(0, |s| s.checksum_failures);
    check(
        &mut checks,
        "host checksum failures",
        failures >= 1,
        format!("{failures}"),
    );
    (out, checks)
}

fn dfu_infection(config: &ScenarioConfig) -> (Outcome, Vec<Check>) {
    let mut world = bridge_world(config, config.downshift);
    let mut sched = Scheduler::new(config.seed);
    let mut checks = Vec::new();

    // Attacker-side material drawn from the run's RNG.
    let mut serial = [0u8; 8];
    let mut key = [0u8; 16];
    let mut stock_fw = vec![0u8; 4096];
    let mut vendor_seed = [0u8; 32];
    let rng = sched.rng();
    rng.fill_bytes(&mut serial);
    rng.fill_bytes(&mut key);
    rng.fill_bytes(&mut stock_fw);
    rng.fill_bytes(&mut vendor_seed);
    let vendor = SigningKey::from_bytes(&vendor_seed);

    let policy = if config.require_signature {
        TrustPolicy::require_signature(vec![vendor.verifying_key()])
    } else {
        TrustPolicy::accept_legacy()
    };

    // Someone else's lock: registered, credentials unknown to the attacker.
    let mut victim = LockProvisioningState::registered(b"OWNED-0001", b"owner-secret");
    let refused = victim.activate_dfu(&DfuRoute::BeforeRegistration {
        serial: serial.to_vec(),
        key: key.to_vec(),
    });
    sched.log(
        LOCK,
        "DFU_DENIED",
        format!("lock=registered error={}", refused.as_ref().err().map_or("none".into(), |e| e.to_string())),
    );
    world.metrics.registered_lock_refused = Some(refused == Err(DfuError::AlreadyRegistered));

    let mut lock = LockProvisioningState::factory();
    match lock.activate_dfu(&DfuRoute::BeforeRegistration {
        serial: serial.to_vec(),
        key: key.to_vec(),
    }) {
        Ok(()) => {
            world.metrics.dfu_activated_at = Some(VirtualTime::ZERO);
            sched.log(LOCK, "DFU_ACTIVE", format!("route=before-registration serial={}", hex::encode(serial)));
        }
        Err(e) => sched.log(LOCK, "DFU_DENIED", e.to_string()),
    }

    // Patch the vendor's legacy image and recompute its CRC.
    let stock = build_package(&stock_fw, ProtectionKind::LegacyCrc, None, "lock", "1.0")
        .expect("legacy packages need no key");
    let implant = b"DROPLOCK-BRIDGE";
    let infected = tamper_package(&stock, 0, implant, true).expect("patch fits");
    match lock.flash(&infected, &policy) {
        Ok(pending) => {
            sched.log(
                LOCK,
                "FLASH_START",
                format!("bytes={} duration={}", infected.firmware.len(), pending.duration),
            );
            at(&mut sched, pending.duration, LOCK, Signal::FlashComplete);
            world.pending_flash = Some(pending);
        }
        Err(e) => sched.log(LOCK, "FLASH_REJECTED", e.to_string()),
    }
    world.lock = Some(lock);
    world.after_flash = Some(capture_start(config));

    let out = run_world(world, sched);
    let m = &out.metrics;
    check(
        &mut checks,
        "registered lock refuses takeover",
        m.registered_lock_refused == Some(true),
        "BeforeRegistration on a registered lock",
    );
    check(
        &mut checks,
        "dfu activated",
        m.dfu_activated_at.is_some(),
        "BeforeRegistration on a factory lock",
    );
    check(
        &mut checks,
        "firmware swapped",
        m.firmware == Some(FirmwareId::Droplock) && m.flash_completed_at == Some(VirtualTime::from_secs(60)),
        format!("{:?} at {}", m.firmware, fmt_time(m.flash_completed_at)),
    );
    capture_checks(&mut checks, config, &out);
    (out, checks)
}

fn policy_denied(config: &ScenarioConfig) -> (Outcome, Vec<Check>) {
    let config = ScenarioConfig {
        policy: match config.policy {
            UploadPolicy::AllowImage => UploadPolicy::TemplateOnly,
            other => other,
        },
        ..config.clone()
    };
    let out = run_capture(&config, config.downshift);
    let mut checks = Vec::new();
    check(
        &mut checks,
        "upload refused",
        matches!(out.capture, Some(Err(CaptureError::PolicyDenied))),
        match &out.capture {
            Some(Err(e)) => e.to_string(),
            Some(Ok(_)) => "image was delivered".to_string(),
            None => "capture never finished".to_string(),
        },
    );
    check(
        &mut checks,
        "no image data over BLE",
        out.metrics.host_data_frames == 0,
        format!("{} data frames reached the host", out.metrics.host_data_frames),
    );
    (out, checks)
}

/// Runs a named scenario. With `out_dir`, writes `<name>.log` and, when an
/// image was obtained, `<name>.pgm`.
pub fn run_scenario(
    scenario: Scenario,
    config: &ScenarioConfig,
    out_dir: Option<&Path>,
) -> Result<ScenarioReport, ScenarioError> {
    let (out, checks) = match scenario {
        Scenario::PocSequence => poc_sequence(config),
        Scenario::CotsCapture => {
            let out = run_capture(config, config.downshift);
            let mut checks = Vec::new();
            cots_checks(&mut checks, config, &out);
            (out, checks)
        }
        Scenario::Overflow115200 => overflow_115200(config),
        Scenario::DfuInfection => dfu_infection(config),
        Scenario::PolicyDenied => policy_denied(config),
    };
    let image = match scenario {
        Scenario::PocSequence => out.fetched.clone().or_else(|| out.poc_image.clone()),
        _ => out.capture.as_ref().and_then(|c| c.as_ref().ok().cloned()),
    };
    let mut artifacts = Vec::new();
    if let Some(dir) = out_dir {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| ScenarioError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let log_path = dir.join(format!("{scenario}.log"));
        fs::write(&log_path, out.log.to_text()).map_err(io(&log_path))?;
        artifacts.push(log_path);
        if let Some(image) = &image {
            let pgm_path = dir.join(format!("{scenario}.pgm"));
            save_pgm(image, &pgm_path)?;
            artifacts.push(pgm_path);
        }
    }
    Ok(ScenarioReport {
        name: scenario.name().to_string(),
        passed: checks.iter().all(|c| c.passed),
        log: out.log,
        stats: out.stats,
        artifacts,
        checks,
        metrics: out.metrics,
        image,
        capture: out.capture.map(|c| c.map(|_| ())),
    })
}
