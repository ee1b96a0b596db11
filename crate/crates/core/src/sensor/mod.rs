//! Virtual fingerprint chip.

mod image;

pub use image::{
    extract_template, generate_fingerprint, FingerprintImage, ImageError, Resolution, Template,
    FULL_DPI, FULL_SIDE, QUARTER_SIDE, TEMPLATE_LEN,
};

use std::fmt;

use crate::defaults::CAPTURE_DELAY;
use crate::protocol::{CommandWord, Frame, FrameKind, ResultCode, MAX_DATA_PAYLOAD};
use crate::sim::VirtualTime;
use crate::transport::BaudRate;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SensorMode {
    Idle,
    FingerPresent,
    ImageCaptured,
}

/// What may leave the sensor over its serial link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UploadPolicy {
    #[default]
    AllowImage,
    TemplateOnly,
    Deny,
}

impl UploadPolicy {
    pub fn allows_image(self) -> bool {
        self == UploadPolicy::AllowImage
    }

    pub fn allows_template(self) -> bool {
        self != UploadPolicy::Deny
    }
}

impl fmt::Display for UploadPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UploadPolicy::AllowImage => "allow-image",
            UploadPolicy::TemplateOnly => "template-only",
            UploadPolicy::Deny => "deny",
        })
    }
}

/// Frames to transmit in answer to one command, and when.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SensorReply {
    pub frames: Vec<Frame>,
    /// Processing time before the first byte goes out.
    pub delay: VirtualTime,
    /// Baud rate to adopt once `frames` have been fully transmitted.
    pub switch_baud: Option<BaudRate>,
}

impl SensorReply {
    fn now(frames: Vec<Frame>) -> Self {
        SensorReply {
            frames,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NotIdle(pub SensorMode);

impl fmt::Display for NotIdle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "finger presented while sensor is {:?}", self.0)
    }
}

#[derive(Debug, Clone)]
pub struct Sensor {
    mode: SensorMode,
    finger_seed: Option<u64>,
    image: Option<FingerprintImage>,
    template: Option<Template>,
    baud: BaudRate,
    policy: UploadPolicy,
}

impl Sensor {
    pub fn new(baud: BaudRate, policy: UploadPolicy) -> Self {
        Self {
            mode: SensorMode::Idle,
            finger_seed: None,
            image: None,
            template: None,
            baud,
            policy,
        }
    }

    pub fn mode(&self) -> SensorMode {
        self.mode
    }

    pub fn baud(&self) -> BaudRate {
        self.baud
    }

    pub fn policy(&self) -> UploadPolicy {
        self.policy
    }

    pub fn image(&self) -> Option<&FingerprintImage> {
        self.image.as_ref()
    }

    /// A finger lands on the glass. Only meaningful while idle.
    pub fn present_finger(&mut self, seed: u64) -> Result<(), NotIdle> {
        if self.mode != SensorMode::Idle {
            return Err(NotIdle(self.mode));
        }
        self.finger_seed = Some(seed);
        self.mode = SensorMode::FingerPresent;
        Ok(())
    }

    /// Back to idle with the image buffer cleared.
    pub fn reset(&mut self) {
        self.mode = SensorMode::Idle;
        self.finger_seed = None;
        self.image = None;
        self.template = None;
    }

    pub fn handle_frame(&mut self, frame: &Frame) -> SensorReply {
        if frame.kind() != FrameKind::Command {
            return SensorReply::default();
        }
        let cmd = frame.cmd();
        let respond = |code: ResultCode| {
            Frame::new(
                FrameKind::CommandResponse,
                frame.did(),
                frame.sid(),
                cmd,
                &code.0.to_le_bytes(),
            )
            .expect("two-byte payload")
        };
        match cmd {
            CommandWord::TEST_CONNECTION => SensorReply::now(vec![respond(ResultCode::SUCCESS)]),
            CommandWord::FINGER_DETECT => {
                let code = if self.mode == SensorMode::Idle {
                    ResultCode::NO_FINGER
                } else {
                    ResultCode::SUCCESS
                };
                SensorReply::now(vec![respond(code)])
            }
            CommandWord::SET_BAUDRATE => {
                let used = frame.used_payload();
                let requested = (used.len() >= 4)
                    .then(|| u32::from_le_bytes([used[0], used[1], used[2], used[3]]))
                    .and_then(|bps| BaudRate::new(bps).ok());
                match requested {
                    Some(baud) => {
                        self.baud = baud;
                        SensorReply {
                            frames: vec![respond(ResultCode::SUCCESS)],
                            delay: VirtualTime::ZERO,
                            switch_baud: Some(baud),
                        }
                    }
                    None => SensorReply::now(vec![respond(ResultCode::FAIL)]),
                }
            }
            CommandWord::GET_IMAGE => match self.finger_seed {
                Some(seed) if self.mode != SensorMode::Idle => {
                    self.image = Some(generate_fingerprint(seed, Resolution::Full));
                    self.template = None;
                    self.mode = SensorMode::ImageCaptured;
                    SensorReply {
                        frames: vec![respond(ResultCode::SUCCESS)],
                        delay: CAPTURE_DELAY,
                        switch_baud: None,
                    }
                }
                _ => SensorReply::now(vec![respond(ResultCode::NO_FINGER)]),
            },
            CommandWord::UP_IMAGE => {
                if !self.policy.allows_image() {
                    return SensorReply::now(vec![respond(ResultCode::UPLOAD_DISABLED)]);
                }
                let Some(full) = self.image.as_ref().filter(|_| self.mode == SensorMode::ImageCaptured)
                else {
                    return SensorReply::now(vec![respond(ResultCode::FAIL)]);
                };
                let quarter = frame.used_payload().first() == Some(&1);
                let image = if quarter { full.downsample() } else { full.clone() };
                let total = image.pixels().len() as u16;
                let mut frames = Vec::with_capacity(1 + image.pixels().len() / MAX_DATA_PAYLOAD);
                frames.push(
                    Frame::new(
                        FrameKind::CommandResponse,
                        frame.did(),
                        frame.sid(),
                        cmd,
                        &[&ResultCode::SUCCESS.0.to_le_bytes()[..], &total.to_le_bytes()].concat(),
                    )
                    .expect("four-byte payload"),
                );
                frames.extend(data_frames(frame, cmd, image.pixels()));
                SensorReply::now(frames)
            }
            CommandWord::GEN_TEMPLATE => {
                let Some(image) = self.image.as_ref().filter(|_| self.mode == SensorMode::ImageCaptured)
                else {
                    return SensorReply::now(vec![respond(ResultCode::FAIL)]);
                };
                let template = extract_template(image).expect("sensor stores full-resolution images");
                let mut frames = vec![respond(ResultCode::SUCCESS)];
                if self.policy.allows_template() {
                    frames.extend(data_frames(frame, cmd, template.as_bytes()));
                }
                self.template = Some(template);
                SensorReply::now(frames)
            }
            CommandWord::UP_TEMPLATE => {
                if !self.policy.allows_template() {
                    return SensorReply::now(vec![respond(ResultCode::UPLOAD_DISABLED)]);
                }
                match &self.template {
                    Some(t) => {
                        let mut frames = vec![respond(ResultCode::SUCCESS)];
                        frames.extend(data_frames(frame, cmd, t.as_bytes()));
                        SensorReply::now(frames)
                    }
                    None => SensorReply::now(vec![respond(ResultCode::FAIL)]),
                }
            }
            _ => SensorReply::now(vec![respond(ResultCode::FAIL)]),
        }
    }
}

fn data_frames<'a>(
    request: &'a Frame,
    cmd: CommandWord,
    bytes: &'a [u8],
) -> impl Iterator<Item = Frame> + 'a {
    bytes.chunks(MAX_DATA_PAYLOAD).map(move |chunk| {
        Frame::new(FrameKind::DataResponse, request.did(), request.sid(), cmd, chunk)
            .expect("chunk within data frame bounds")
    })
}
