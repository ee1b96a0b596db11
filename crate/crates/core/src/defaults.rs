//! Every timing and sizing constant the scenarios depend on, in one place.
//! Each value can be overridden through `ScenarioConfig`.
//!
//! | constant | value | meaning |
//! |---|---|---|
//! | [`IDLE_ACTUATE`] | 60 s | PoC: no finger for this long fires the solenoid, then reset |
//! | [`FETCH_WINDOW`] | 30 s | PoC: image stays fetchable this long after capture |
//! | [`WAKE_WINDOW`] | 60 s | droplock: advertising lasts this long after a button press |
//! | [`FLASH_DURATION`] | 60 s | DFU transfer and flash of a new firmware |
//! | [`BLE_PAYLOAD_CAP`] | 20 B | application bytes per BLE notification |
//! | [`BLE_INTERVAL_US`] | 21 250 us | connection interval (17 x 1.25 ms) |
//! | [`BLE_NOTIFICATIONS_PER_INTERVAL`] | 1 | notifications per connection event |
//! | [`RING_CAPACITY`] | 2048 B | bridge UART-to-BLE ring buffer |
//! | [`SENSOR_DEFAULT_BAUD`] | 115 200 | sensor UART rate at power-on |
//! | [`DOWNSHIFT_BAUD`] | 9 600 | rate the bridge forces on connect |
//! | [`SUPPORTED_BAUDS`] | 9600..115200 | rates the sensor accepts |
//! | [`CAPTURE_DELAY`] | 500 ms | sensor image acquisition time (assumed) |
//! | [`POLL_PERIOD`] | 200 ms | host finger-detect polling period (assumed) |
//! | [`UART_BITS_PER_BYTE`] | 10 | 8N1 framing |
//! | [`CONNECT_DELAY`] | 1 s | button press to host connection (assumed) |
//! | [`FINGER_AT`] | 5 s | victim touches the sensor, relative to scenario start (assumed) |
//! | [`FETCH_DELAY`] | 5 s | PoC: capture to web fetch (assumed) |
//! | [`CAPTURE_TIMEOUT`] | 60 s | host stops polling for a finger after this long |

use crate::sim::VirtualTime;

pub const IDLE_ACTUATE: VirtualTime = VirtualTime::from_secs(60);
pub const FETCH_WINDOW: VirtualTime = VirtualTime::from_secs(30);
pub const WAKE_WINDOW: VirtualTime = VirtualTime::from_secs(60);
pub const FLASH_DURATION: VirtualTime = VirtualTime::from_secs(60);

pub const BLE_PAYLOAD_CAP: usize = 20;
pub const BLE_INTERVAL_US: u64 = 21_250;
pub const BLE_INTERVAL_GRANULARITY_US: u64 = 1_250;
pub const BLE_NOTIFICATIONS_PER_INTERVAL: u32 = 1;

pub const RING_CAPACITY: usize = 2048;

pub const SENSOR_DEFAULT_BAUD: u32 = 115_200;
pub const DOWNSHIFT_BAUD: u32 = 9_600;
pub const SUPPORTED_BAUDS: [u32; 5] = [9_600, 19_200, 38_400, 57_600, 115_200];
pub const UART_BITS_PER_BYTE: u32 = 10;

pub const CAPTURE_DELAY: VirtualTime = VirtualTime::from_millis(500);
pub const POLL_PERIOD: VirtualTime = VirtualTime::from_millis(200);

pub const CONNECT_DELAY: VirtualTime = VirtualTime::from_secs(1);
pub const FINGER_AT: VirtualTime = VirtualTime::from_secs(5);
pub const FETCH_DELAY: VirtualTime = VirtualTime::from_secs(5);
pub const CAPTURE_TIMEOUT: VirtualTime = VirtualTime::from_secs(60);

/// Host gives up on an upload after this long without new data.
pub const UPLOAD_STALL_TIMEOUT: VirtualTime = VirtualTime::from_secs(5);

pub const ADV_NAME: &str = "IoT Droplock";
