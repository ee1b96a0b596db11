//! Standalone implant: a microcontroller wired straight to the sensor,
//! serving the captured print from its own access point.
//!
//! One cycle: poll for a finger. If none arrives within the idle window,
//! actuate the solenoid and reset. Otherwise capture, actuate as a reward,
//! upload the image and keep it available for a fetch window before
//! resetting.

use crate::defaults::POLL_PERIOD;
use crate::protocol::{CommandWord, Frame, FrameKind, ResultCode, StreamParser};
use crate::sensor::{FingerprintImage, Resolution};
use crate::sim::{ComponentId, Ctx, VirtualTime};

use super::client::command_label;

pub const POC: ComponentId = ComponentId("poc");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PocTimer {
    Poll,
    IdleDeadline,
    WindowClose,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PocAction {
    ToUart(Vec<u8>),
    Timer { at: VirtualTime, timer: PocTimer },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PocPhase {
    Off,
    Polling { awaiting: bool },
    Imaging,
    Uploading,
    Serving,
    Done,
}

#[derive(Debug, Clone)]
pub struct PocController {
    idle_timeout: VirtualTime,
    fetch_window: VirtualTime,
    phase: PocPhase,
    parser: StreamParser,
    last_poll: VirtualTime,
    total: usize,
    data: Vec<u8>,
    image: Option<FingerprintImage>,
    idle_actuated_at: Option<VirtualTime>,
    captured_at: Option<VirtualTime>,
    window_closed_at: Option<VirtualTime>,
    fetches: Vec<VirtualTime>,
}

impl PocController {
    pub fn new(idle_timeout: VirtualTime, fetch_window: VirtualTime) -> Self {
        Self {
            idle_timeout,
            fetch_window,
            phase: PocPhase::Off,
            parser: StreamParser::new(),
            last_poll: VirtualTime::ZERO,
            total: 0,
            data: Vec::new(),
            image: None,
            idle_actuated_at: None,
            captured_at: None,
            window_closed_at: None,
            fetches: Vec::new(),
        }
    }

    pub fn phase(&self) -> PocPhase {
        self.phase
    }

    pub fn image(&self) -> Option<&FingerprintImage> {
        self.image.as_ref()
    }

    pub fn idle_actuated_at(&self) -> Option<VirtualTime> {
        self.idle_actuated_at
    }

    pub fn captured_at(&self) -> Option<VirtualTime> {
        self.captured_at
    }

    pub fn window_closed_at(&self) -> Option<VirtualTime> {
        self.window_closed_at
    }

    /// Successful fetches.
    pub fn fetches(&self) -> &[VirtualTime] {
        &self.fetches
    }

    pub fn start(&mut self, ctx: &mut Ctx) -> Vec<PocAction> {
        ctx.log(POC, "READY", "ap=up");
        let mut actions = vec![PocAction::Timer {
            at: ctx.now + self.idle_timeout,
            timer: PocTimer::IdleDeadline,
        }];
        self.poll(ctx, &mut actions);
        actions
    }

    pub fn on_uart(&mut self, ctx: &mut Ctx, bytes: &[u8]) -> Vec<PocAction> {
        let mut actions = Vec::new();
        for frame in self.parser.push(bytes) {
            self.on_frame(ctx, &frame, &mut actions);
        }
        actions
    }

    pub fn on_timer(&mut self, ctx: &mut Ctx, timer: PocTimer) -> Vec<PocAction> {
        let mut actions = Vec::new();
        match timer {
            PocTimer::Poll if self.phase == (PocPhase::Polling { awaiting: false }) => {
                self.poll(ctx, &mut actions)
            }
            PocTimer::IdleDeadline if matches!(self.phase, PocPhase::Polling { .. }) => {
                self.idle_actuated_at = Some(ctx.now);
                ctx.log(POC, "ACTUATE", "reason=idle");
                self.reset(ctx);
            }
            PocTimer::WindowClose if self.phase == PocPhase::Serving => {
                self.window_closed_at = Some(ctx.now);
                ctx.log(POC, "WINDOW_CLOSE", "");
                self.reset(ctx);
            }
            _ => {}
        }
        actions
    }

    /// A web client asks for the image.
    pub fn on_fetch(&mut self, ctx: &mut Ctx) -> Option<FingerprintImage> {
        match (&self.image, self.phase) {
            (Some(image), PocPhase::Serving) => {
                self.fetches.push(ctx.now);
                ctx.log(POC, "FETCH", format!("bytes={}", image.pixels().len()));
                Some(image.clone())
            }
            _ => {
                ctx.log(POC, "FETCH_REFUSED", format!("phase={:?}", self.phase));
                None
            }
        }
    }

    fn reset(&mut self, ctx: &mut Ctx) {
        self.phase = PocPhase::Done;
        ctx.log(POC, "RESET", "");
    }

    fn poll(&mut self, ctx: &mut Ctx, actions: &mut Vec<PocAction>) {
        self.last_poll = ctx.now;
        self.phase = PocPhase::Polling { awaiting: true };
        self.send(CommandWord::FINGER_DETECT, &[], actions);
    }

    fn send(&mut self, cmd: CommandWord, params: &[u8], actions: &mut Vec<PocAction>) {
        let frame = Frame::command(cmd, params).expect("short parameters");
        actions.push(PocAction::ToUart(frame.encode()));
    }

    fn on_frame(&mut self, ctx: &mut Ctx, frame: &Frame, actions: &mut Vec<PocAction>) {
        let code = frame.result();
        match (self.phase, frame.kind(), frame.cmd()) {
            (PocPhase::Polling { awaiting: true }, FrameKind::CommandResponse, CommandWord::FINGER_DETECT) => {
                if code == Some(ResultCode::SUCCESS) {
                    ctx.log(POC, "FINGER", "");
                    self.phase = PocPhase::Imaging;
                    self.send(CommandWord::GET_IMAGE, &[], actions);
                } else {
                    self.phase = PocPhase::Polling { awaiting: false };
                    actions.push(PocAction::Timer {
                        at: (self.last_poll + POLL_PERIOD).max(ctx.now),
                        timer: PocTimer::Poll,
                    });
                }
            }
            (PocPhase::Imaging, FrameKind::CommandResponse, CommandWord::GET_IMAGE) => {
                if code == Some(ResultCode::SUCCESS) {
                    ctx.log(POC, "ACTUATE", "reason=reward");
                    self.phase = PocPhase::Uploading;
                    self.send(CommandWord::UP_IMAGE, &[], actions);
                } else {
                    self.poll(ctx, actions);
                }
            }
            (PocPhase::Uploading, FrameKind::CommandResponse, CommandWord::UP_IMAGE) => {
                let p = frame.used_payload();
                if code == Some(ResultCode::SUCCESS) && p.len() >= 4 {
                    self.total = usize::from(u16::from_le_bytes([p[2], p[3]]));
                    ctx.log(POC, "UPLOAD", format!("bytes={}", self.total));
                } else {
                    ctx.log(POC, "UPLOAD_FAILED", format!("{} {}", command_label(frame.cmd()), code.unwrap_or(ResultCode::FAIL)));
                    self.reset(ctx);
                }
            }
            (PocPhase::Uploading, FrameKind::DataResponse, CommandWord::UP_IMAGE) => {
                self.data.extend_from_slice(frame.used_payload());
                if self.total > 0 && self.data.len() >= self.total {
                    let pixels = std::mem::take(&mut self.data);
                    let image = Resolution::from_byte_len(pixels.len())
                        .and_then(|r| FingerprintImage::from_raw(r, pixels).ok());
                    let Some(image) = image else {
                        ctx.log(POC, "UPLOAD_FAILED", "bad image size");
                        self.reset(ctx);
                        return;
                    };
                    let closes = ctx.now + self.fetch_window;
                    ctx.log(POC, "CAPTURED", format!("bytes={}", image.pixels().len()));
                    ctx.log(POC, "WINDOW_OPEN", format!("until={closes}"));
                    self.image = Some(image);
                    self.captured_at = Some(ctx.now);
                    self.phase = PocPhase::Serving;
                    actions.push(PocAction::Timer {
                        at: closes,
                        timer: PocTimer::WindowClose,
                    });
                }
            }
            _ => {}
        }
    }
}
