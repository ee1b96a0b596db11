//! Host-side capture logic: poll for a finger, capture, pull the image.

use thiserror::Error;

use crate::defaults::{POLL_PERIOD, UPLOAD_STALL_TIMEOUT};
use crate::protocol::{CommandWord, Frame, FrameKind, ParserStats, ResultCode, StreamParser};
use crate::sensor::{FingerprintImage, Resolution};
use crate::sim::{ComponentId, Ctx, VirtualTime};

pub const HOST: ComponentId = ComponentId("host");

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CaptureError {
    #[error("no finger presented before the timeout")]
    Timeout,
    #[error("sensor refused the image upload")]
    PolicyDenied,
    #[error("upload stalled after {received} of {expected} bytes")]
    Incomplete { received: usize, expected: usize },
    #[error("sensor answered {cmd} with {code}")]
    Rejected { cmd: CommandWord, code: ResultCode },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaptureStats {
    /// Image bytes received during the upload phase.
    pub bytes_received: u64,
    /// From issuing UP_IMAGE to the last data frame.
    pub duration: VirtualTime,
    pub overflow_events: u64,
    pub checksum_failures: u64,
}

impl CaptureStats {
    /// Payload rate in kilobits per second; zero for an empty upload.
    pub fn effective_kbps(&self) -> f64 {
        let secs = self.duration.as_secs_f64();
        if secs == 0.0 {
            return 0.0;
        }
        self.bytes_received as f64 * 8.0 / secs / 1000.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CaptureOptions {
    /// Give up if no finger is seen this long after connecting.
    pub timeout: VirtualTime,
    pub resolution: Resolution,
}

impl Default for CaptureOptions {
    fn default() -> Self {
        Self {
            timeout: VirtualTime::from_secs(60),
            resolution: Resolution::Full,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClientTimer {
    Poll,
    Stall(u64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClientAction {
    Send(Frame),
    Timer { at: VirtualTime, timer: ClientTimer },
    Disconnect,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Phase {
    Idle,
    Polling { awaiting: bool },
    Imaging,
    Requesting,
    Receiving { total: usize },
    Finished,
}

#[derive(Debug, Clone)]
pub struct HarvestClient {
    options: CaptureOptions,
    phase: Phase,
    parser: StreamParser,
    finger_deadline: VirtualTime,
    last_poll: VirtualTime,
    upload_started: Option<VirtualTime>,
    last_data: Option<VirtualTime>,
    data: Vec<u8>,
    data_frames: u64,
    stall_generation: u64,
    outcome: Option<Result<FingerprintImage, CaptureError>>,
}

impl HarvestClient {
    pub fn new(options: CaptureOptions) -> Self {
        Self {
            options,
            phase: Phase::Idle,
            parser: StreamParser::new(),
            finger_deadline: VirtualTime::ZERO,
            last_poll: VirtualTime::ZERO,
            upload_started: None,
            last_data: None,
            data: Vec::new(),
            data_frames: 0,
            stall_generation: 0,
            outcome: None,
        }
    }

    pub fn outcome(&self) -> Option<&Result<FingerprintImage, CaptureError>> {
        self.outcome.as_ref()
    }

    pub fn is_finished(&self) -> bool {
        self.phase == Phase::Finished
    }

    pub fn parser_stats(&self) -> ParserStats {
        self.parser.stats()
    }

    /// Data or data-response frames that reached the host intact.
    pub fn data_frames(&self) -> u64 {
        self.data_frames
    }

    pub fn upload_started(&self) -> Option<VirtualTime> {
        self.upload_started
    }

    pub fn stats(&self, overflow_events: u64) -> CaptureStats {
        let duration = match (self.upload_started, self.last_data) {
            (Some(start), Some(end)) => end.saturating_sub(start),
            _ => VirtualTime::ZERO,
        };
        CaptureStats {
            bytes_received: self.data.len() as u64,
            duration,
            overflow_events,
            checksum_failures: self.parser.stats().bad_checksums,
        }
    }

    pub fn on_connect(&mut self, ctx: &mut Ctx) -> Vec<ClientAction> {
        if self.phase != Phase::Idle {
            return Vec::new();
        }
        self.finger_deadline = ctx.now + self.options.timeout;
        let mut actions = Vec::new();
        self.poll(ctx, &mut actions);
        actions
    }

    pub fn on_bytes(&mut self, ctx: &mut Ctx, bytes: &[u8]) -> Vec<ClientAction> {
        let mut actions = Vec::new();
        for frame in self.parser.push(bytes) {
            if self.phase == Phase::Finished {
                break;
            }
            if frame.kind().is_data() {
                self.data_frames += 1;
            }
            self.on_frame(ctx, &frame, &mut actions);
        }
        actions
    }

    pub fn on_timer(&mut self, ctx: &mut Ctx, timer: ClientTimer) -> Vec<ClientAction> {
        let mut actions = Vec::new();
        match timer {
            ClientTimer::Poll => {
                if self.phase == (Phase::Polling { awaiting: false }) {
                    self.poll(ctx, &mut actions);
                }
            }
            ClientTimer::Stall(generation) => {
                if generation != self.stall_generation || self.phase == Phase::Finished {
                    return actions;
                }
                let error = match self.phase {
                    Phase::Receiving { total } => CaptureError::Incomplete {
                        received: self.data.len(),
                        expected: total,
                    },
                    _ => CaptureError::Timeout,
                };
                self.finish(ctx, Err(error), &mut actions);
            }
        }
        actions
    }

    fn poll(&mut self, ctx: &mut Ctx, actions: &mut Vec<ClientAction>) {
        self.last_poll = ctx.now;
        self.phase = Phase::Polling { awaiting: true };
        self.send(ctx, Frame::command(CommandWord::FINGER_DETECT, &[]), actions);
    }

    fn send(
        &mut self,
        ctx: &mut Ctx,
        frame: Result<Frame, crate::protocol::ProtocolError>,
        actions: &mut Vec<ClientAction>,
    ) {
        let frame = frame.expect("host commands fit a command frame");
        ctx.log(HOST, "TX", command_label(frame.cmd()));
        actions.push(ClientAction::Send(frame));
        self.arm_stall(ctx, actions);
    }

    fn arm_stall(&mut self, ctx: &mut Ctx, actions: &mut Vec<ClientAction>) {
        self.stall_generation += 1;
        actions.push(ClientAction::Timer {
            at: ctx.now + UPLOAD_STALL_TIMEOUT,
            timer: ClientTimer::Stall(self.stall_generation),
        });
    }

    fn finish(
        &mut self,
        ctx: &mut Ctx,
        outcome: Result<FingerprintImage, CaptureError>,
        actions: &mut Vec<ClientAction>,
    ) {
        match &outcome {
            Ok(image) => ctx.log(
                HOST,
                "IMAGE",
                format!("bytes={} {}x{}", image.pixels().len(), image.width(), image.height()),
            ),
            Err(e) => ctx.log(HOST, "CAPTURE_FAILED", e.to_string()),
        }
        self.phase = Phase::Finished;
        self.outcome = Some(outcome);
        self.stall_generation += 1;
        actions.push(ClientAction::Disconnect);
    }

    fn on_frame(&mut self, ctx: &mut Ctx, frame: &Frame, actions: &mut Vec<ClientAction>) {
        if frame.kind() == FrameKind::CommandResponse {
            let code = frame.result().expect("command response");
            ctx.log(HOST, "RX", format!("{} {code}", command_label(frame.cmd())));
            self.on_response(ctx, frame, code, actions);
            return;
        }
        let Phase::Receiving { total } = self.phase else {
            return;
        };
        if frame.cmd() != CommandWord::UP_IMAGE || frame.kind() != FrameKind::DataResponse {
            return;
        }
        self.data.extend_from_slice(frame.used_payload());
        self.last_data = Some(ctx.now);
        if self.data.len() < total {
            self.arm_stall(ctx, actions);
            return;
        }
        let outcome = Resolution::from_byte_len(self.data.len())
            .and_then(|res| FingerprintImage::from_raw(res, self.data.clone()).ok())
            .ok_or(CaptureError::Incomplete {
                received: self.data.len(),
                expected: total,
            });
        self.finish(ctx, outcome, actions);
    }

    fn on_response(
        &mut self,
        ctx: &mut Ctx,
        frame: &Frame,
        code: ResultCode,
        actions: &mut Vec<ClientAction>,
    ) {
        match (frame.cmd(), &self.phase) {
            (CommandWord::FINGER_DETECT, Phase::Polling { awaiting: true }) => {
                if code == ResultCode::SUCCESS {
                    self.phase = Phase::Imaging;
                    self.send(ctx, Frame::command(CommandWord::GET_IMAGE, &[]), actions);
                } else if ctx.now >= self.finger_deadline {
                    self.finish(ctx, Err(CaptureError::Timeout), actions);
                } else {
                    self.wait_for_next_poll(ctx, actions);
                }
            }
            (CommandWord::GET_IMAGE, Phase::Imaging) => match code {
                ResultCode::SUCCESS => {
                    self.phase = Phase::Requesting;
                    self.upload_started = Some(ctx.now);
                    let quarter = u8::from(self.options.resolution == Resolution::Quarter);
                    self.send(ctx, Frame::command(CommandWord::UP_IMAGE, &[quarter]), actions);
                }
                ResultCode::NO_FINGER => self.wait_for_next_poll(ctx, actions),
                code => self.finish(
                    ctx,
                    Err(CaptureError::Rejected {
                        cmd: CommandWord::GET_IMAGE,
                        code,
                    }),
                    actions,
                ),
            },
            (CommandWord::UP_IMAGE, Phase::Requesting) => match code {
                ResultCode::SUCCESS => {
                    let p = frame.used_payload();
                    let total = if p.len() >= 4 {
                        usize::from(u16::from_le_bytes([p[2], p[3]]))
                    } else {
                        self.options.resolution.byte_len()
                    };
                    self.phase = Phase::Receiving { total };
                    self.arm_stall(ctx, actions);
                }
                ResultCode::UPLOAD_DISABLED => {
                    self.finish(ctx, Err(CaptureError::PolicyDenied), actions)
                }
                code => self.finish(
                    ctx,
                    Err(CaptureError::Rejected {
                        cmd: CommandWord::UP_IMAGE,
                        code,
                    }),
                    actions,
                ),
            },
            _ => {}
        }
    }

    fn wait_for_next_poll(&mut self, ctx: &mut Ctx, actions: &mut Vec<ClientAction>) {
        self.phase = Phase::Polling { awaiting: false };
        // The stall timer only guards outstanding requests.
        self.stall_generation += 1;
        actions.push(ClientAction::Timer {
            at: (self.last_poll + POLL_PERIOD).max(ctx.now),
            timer: ClientTimer::Poll,
        });
    }
}

pub(crate) fn command_label(cmd: CommandWord) -> String {
    match cmd.name() {
        Some(name) => format!("cmd={name}"),
        None => format!("cmd={cmd}"),
    }
}
