//! The attacker's side: host capture client, standalone PoC controller and
//! the end-to-end scenarios that tie every component together.

mod client;
mod pgm;
mod poc;
mod scenario;

pub use client::{
    CaptureError, CaptureOptions, CaptureStats, ClientAction, ClientTimer, HarvestClient, HOST,
};
pub use pgm::{decode_pgm, encode_pgm, load_pgm, save_pgm, PgmError};
pub use poc::{PocAction, PocController, PocPhase, PocTimer, POC};
pub use scenario::{
    capture_image, run_scenario, Check, Metrics, Scenario, ScenarioConfig, ScenarioError,
    ScenarioReport, LOCK, SENSOR, USER,
};
