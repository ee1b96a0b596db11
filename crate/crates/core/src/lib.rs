//! Discrete-event model of a fingerprint-harvesting smart-lock implant.
//!
//! A compromised lock's Bluetooth module bridges a UART fingerprint sensor to
//! a remote host. Everything runs in virtual time, so a run with a given seed
//! is reproducible byte for byte.

pub mod bridge;
pub mod defaults;
pub mod dfu;
pub mod harvest;
pub mod protocol;
pub mod sensor;
pub mod sim;
pub mod transport;

