//! Firmware-update packages and the lock's update path.
//!
//! Two kinds of package exist. Legacy packages carry only a CRC-16 of the
//! firmware, which anyone who edits the firmware can recompute. Signed
//! packages carry an Ed25519 signature over the SHA-256 digest of the
//! firmware and the 8-byte fingerprint of the signing key.
//!
//! Container layout: `"DLFW"`, a version byte, then TLV records with a
//! 1-byte tag and a 4-byte little-endian length:
//!
//! | tag | content |
//! |---|---|
//! | 0x01 | firmware |
//! | 0x02 | CRC-16 (2 bytes LE) |
//! | 0x03 | signature (64 bytes) |
//! | 0x04 | signer id (8 bytes) |
//! | 0x05 | name (UTF-8) |
//! | 0x06 | version (UTF-8) |

use std::fmt;

use ed25519_dalek::{Signature, Signer, Verifier};
pub use ed25519_dalek::{SigningKey, VerifyingKey};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::defaults::FLASH_DURATION;
use crate::sim::VirtualTime;

pub const MAGIC: &[u8; 4] = b"DLFW";
pub const CONTAINER_VERSION: u8 = 1;

const TAG_FIRMWARE: u8 = 0x01;
const TAG_CRC16: u8 = 0x02;
const TAG_SIGNATURE: u8 = 0x03;
const TAG_SIGNER: u8 = 0x04;
const TAG_NAME: u8 = 0x05;
const TAG_VERSION: u8 = 0x06;

const CRC16_TABLE: [u16; 256] = crc16_table();

const fn crc16_table() -> [u16; 256] {
    let mut table = [0u16; 256];
    let mut i = 0;
    while i < 256 {
        let mut crc = (i as u16) << 8;
        let mut bit = 0;
        while bit < 8 {
            crc = if crc & 0x8000 != 0 {
                (crc << 1) ^ 0x1021
            } else {
                crc << 1
            };
            bit += 1;
        }
        table[i] = crc;
        i += 1;
    }
    table
}

/// CRC-16/CCITT-FALSE: poly 0x1021, init 0xFFFF, unreflected, no final xor.
pub fn crc16(data: &[u8]) -> u16 {
    data.iter().fold(0xFFFF, |crc, &b| {
        (crc << 8) ^ CRC16_TABLE[usize::from((crc >> 8) as u8 ^ b)]
    })
}

pub fn firmware_digest(firmware: &[u8]) -> [u8; 32] {
    Sha256::digest(firmware).into()
}

/// First 8 bytes of SHA-256 over the raw public key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SignerId(pub [u8; 8]);

impl SignerId {
    pub fn of(key: &VerifyingKey) -> Self {
        let digest = Sha256::digest(key.as_bytes());
        let mut id = [0u8; 8];
        id.copy_from_slice(&digest[..8]);
        SignerId(id)
    }
}

impl fmt::Display for SignerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

/// Fresh signing key from the operating system's RNG.
pub fn generate_key() -> SigningKey {
    SigningKey::generate(&mut rand::rngs::OsRng)
}

fn key_bytes(text: &str) -> Result<[u8; 32], DfuError> {
    let bytes = hex::decode(text.trim()).map_err(|e| DfuError::Key(e.to_string()))?;
    bytes
        .try_into()
        .map_err(|b: Vec<u8>| DfuError::Key(format!("expected 32 bytes, got {}", b.len())))
}

/// Keys are stored as 64 hex digits: the secret seed or the public point.
pub fn parse_signing_key(text: &str) -> Result<SigningKey, DfuError> {
    Ok(SigningKey::from_bytes(&key_bytes(text)?))
}

pub fn parse_verifying_key(text: &str) -> Result<VerifyingKey, DfuError> {
    VerifyingKey::from_bytes(&key_bytes(text)?).map_err(|e| DfuError::Key(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Protection {
    LegacyCrc { crc: u16 },
    Signed { signature: [u8; 64], signer_id: SignerId },
}

/// Which protection [`build_package`] should apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProtectionKind {
    LegacyCrc,
    Signed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DfuPackage {
    pub firmware: Vec<u8>,
    pub protection: Protection,
    pub name: String,
    pub version: String,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DfuError {
    #[error("signed packages need a private key")]
    MissingKey,
    #[error("patch of {len} bytes at offset {offset} exceeds firmware of {firmware_len} bytes")]
    PatchOutOfRange {
        offset: usize,
        len: usize,
        firmware_len: usize,
    },
    #[error("malformed key: {0}")]
    Key(String),
    #[error("malformed package: {0}")]
    Malformed(String),
    #[error("lock is already in DFU mode")]
    AlreadyInDfu,
    #[error("lock is not in DFU mode")]
    NotInDfuMode,
    #[error("authentication failed")]
    AuthFailed,
    #[error("lock is already registered")]
    AlreadyRegistered,
    #[error("package rejected: {}", .0.reasons.join("; "))]
    Rejected(VerifyReport),
}

pub fn build_package(
    firmware: &[u8],
    protection: ProtectionKind,
    key: Option<&SigningKey>,
    name: &str,
    version: &str,
) -> Result<DfuPackage, DfuError> {
    let protection = match protection {
        ProtectionKind::LegacyCrc => Protection::LegacyCrc {
            crc: crc16(firmware),
        },
        ProtectionKind::Signed => {
            let key = key.ok_or(DfuError::MissingKey)?;
            Protection::Signed {
                signature: key.sign(&firmware_digest(firmware)).to_bytes(),
                signer_id: SignerId::of(&key.verifying_key()),
            }
        }
    };
    Ok(DfuPackage {
        firmware: firmware.to_vec(),
        protection,
        name: name.to_string(),
        version: version.to_string(),
    })
}

/// Overwrites firmware bytes. With `fixup_crc`, a legacy CRC is recomputed
/// to match; signatures are never regenerated.
pub fn tamper_package(
    pkg: &DfuPackage,
    offset: usize,
    patch: &[u8],
    fixup_crc: bool,
) -> Result<DfuPackage, DfuError> {
    let end = offset
        .checked_add(patch.len())
        .filter(|&end| end <= pkg.firmware.len())
        .ok_or(DfuError::PatchOutOfRange {
            offset,
            len: patch.len(),
            firmware_len: pkg.firmware.len(),
        })?;
    let mut out = pkg.clone();
    out.firmware[offset..end].copy_from_slice(patch);
    if fixup_crc {
        if let Protection::LegacyCrc { crc } = &mut out.protection {
            *crc = crc16(&out.firmware);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TrustMode {
    #[default]
    AcceptLegacy,
    RequireSignature,
}

#[derive(Debug, Clone, Default)]
pub struct TrustPolicy {
    pub mode: TrustMode,
    pub trusted_keys: Vec<VerifyingKey>,
}

impl TrustPolicy {
    pub fn accept_legacy() -> Self {
        Self::default()
    }

    pub fn require_signature(trusted_keys: Vec<VerifyingKey>) -> Self {
        Self {
            mode: TrustMode::RequireSignature,
            trusted_keys,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct VerifyReport {
    pub well_formed: bool,
    pub integrity_ok: bool,
    pub signature_present: bool,
    pub signature_valid: bool,
    pub accepted: bool,
    pub reasons: Vec<String>,
}

/// Never fails: every problem ends up in the report.
pub fn verify_package(pkg: &DfuPackage, policy: &TrustPolicy) -> VerifyReport {
    let mut report = VerifyReport {
        well_formed: !pkg.firmware.is_empty(),
        ..Default::default()
    };
    if !report.well_formed {
        report.reasons.push("empty firmware".into());
    }
    match &pkg.protection {
        Protection::LegacyCrc { crc } => {
            report.integrity_ok = *crc == crc16(&pkg.firmware);
            if !report.integrity_ok {
                report.reasons.push(format!(
                    "crc mismatch: package says 0x{crc:04X}, firmware is 0x{:04X}",
                    crc16(&pkg.firmware)
                ));
            }
        }
        Protection::Signed {
            signature,
            signer_id,
        } => {
            report.signature_present = true;
            let digest = firmware_digest(&pkg.firmware);
            let signature = Signature::from_bytes(signature);
            match policy
                .trusted_keys
                .iter()
                .find(|k| SignerId::of(k) == *signer_id)
            {
                None => report.reasons.push(format!("signer {signer_id} not trusted")),
                Some(key) => {
                    report.signature_valid = key.verify(&digest, &signature).is_ok();
                    if !report.signature_valid {
                        report.reasons.push("signature invalid".into());
                    }
                }
            }
            report.integrity_ok = report.signature_valid;
        }
    }
    report.accepted = report.well_formed
        && report.integrity_ok
        && match policy.mode {
            TrustMode::AcceptLegacy => true,
            TrustMode::RequireSignature => report.signature_valid,
        };
    if policy.mode == TrustMode::RequireSignature && !report.signature_present {
        report.reasons.insert(0, "signature absent".into());
    }
    report
}

impl DfuPackage {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.firmware.len() + 128);
        out.extend_from_slice(MAGIC);
        out.push(CONTAINER_VERSION);
        let mut record = |tag: u8, value: &[u8]| {
            out.push(tag);
            out.extend_from_slice(&(value.len() as u32).to_le_bytes());
            out.extend_from_slice(value);
        };
        record(TAG_NAME, self.name.as_bytes());
        record(TAG_VERSION, self.version.as_bytes());
        record(TAG_FIRMWARE, &self.firmware);
        match &self.protection {
            Protection::LegacyCrc { crc } => record(TAG_CRC16, &crc.to_le_bytes()),
            Protection::Signed {
                signature,
                signer_id,
            } => {
                record(TAG_SIGNATURE, signature);
                record(TAG_SIGNER, &signer_id.0);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<DfuPackage, DfuError> {
        let malformed = |msg: &str| DfuError::Malformed(msg.to_string());
        let rest = bytes
            .strip_prefix(MAGIC.as_slice())
            .ok_or_else(|| malformed("missing DLFW magic"))?;
        let (&version, mut rest) = rest
            .split_first()
            .ok_or_else(|| malformed("missing version byte"))?;
        if version != CONTAINER_VERSION {
            return Err(DfuError::Malformed(format!("unsupported container version {version}")));
        }
        let mut records: [Option<&[u8]>; 7] = [None; 7];
        while !rest.is_empty() {
            if rest.len() < 5 {
                return Err(malformed("truncated record header"));
            }
            let tag = rest[0];
            let len = u32::from_le_bytes([rest[1], rest[2], rest[3], rest[4]]) as usize;
            let value = rest
                .get(5..5 + len)
                .ok_or_else(|| malformed("record runs past end of file"))?;
            rest = &rest[5 + len..];
            if let Some(slot) = records.get_mut(usize::from(tag)).filter(|_| tag != 0) {
                if slot.replace(value).is_some() {
                    return Err(DfuError::Malformed(format!("duplicate record 0x{tag:02X}")));
                }
            }
        }
        let text = |tag: u8| -> Result<String, DfuError> {
            records[usize::from(tag)]
                .map(|v| String::from_utf8(v.to_vec()).map_err(|_| malformed("non-UTF-8 text record")))
                .transpose()
                .map(Option::unwrap_or_default)
        };
        let firmware = records[usize::from(TAG_FIRMWARE)]
            .ok_or_else(|| malformed("no firmware record"))?
            .to_vec();
        let protection = match (
            records[usize::from(TAG_SIGNATURE)],
            records[usize::from(TAG_SIGNER)],
            records[usize::from(TAG_CRC16)],
        ) {
            (Some(sig), Some(signer), _) => Protection::Signed {
                signature: sig
                    .try_into()
                    .map_err(|_| malformed("signature must be 64 bytes"))?,
                signer_id: SignerId(
                    signer
                        .try_into()
                        .map_err(|_| malformed("signer id must be 8 bytes"))?,
                ),
            },
            (Some(_), None, _) | (None, Some(_), _) => {
                return Err(malformed("signature and signer id must appear together"))
            }
            (None, None, Some(crc)) => Protection::LegacyCrc {
                crc: u16::from_le_bytes(crc.try_into().map_err(|_| malformed("crc must be 2 bytes"))?),
            },
            (None, None, None) => return Err(malformed("no integrity record")),
        };
        Ok(DfuPackage {
            firmware,
            protection,
            name: text(TAG_NAME)?,
            version: text(TAG_VERSION)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FirmwareId {
    Stock,
    Droplock,
}

/// How an attacker puts the stock firmware into DFU mode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DfuRoute {
    /// Credentials of an already-registered lock.
    Authenticated { serial: Vec<u8>, key: Vec<u8> },
    /// Provision an unregistered lock with attacker-chosen credentials.
    BeforeRegistration { serial: Vec<u8>, key: Vec<u8> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LockProvisioningState {
    registered: bool,
    serial: Vec<u8>,
    key: Vec<u8>,
    dfu_mode: bool,
    firmware_id: FirmwareId,
}

impl Default for LockProvisioningState {
    fn default() -> Self {
        Self::factory()
    }
}

/// Flash accepted and in progress; finish it after `duration`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PendingFlash {
    pub duration: VirtualTime,
    pub report: VerifyReport,
}

impl LockProvisioningState {
    /// Out of the box: unregistered, stock firmware.
    pub fn factory() -> Self {
        Self {
            registered: false,
            serial: Vec::new(),
            key: Vec::new(),
            dfu_mode: false,
            firmware_id: FirmwareId::Stock,
        }
    }

    /// A lock its owner has already registered with the vendor.
    pub fn registered(serial: &[u8], key: &[u8]) -> Self {
        let mut lock = Self::factory();
        lock.register(serial, key)
            .expect("factory lock is unregistered");
        lock
    }

    pub fn register(&mut self, serial: &[u8], key: &[u8]) -> Result<(), DfuError> {
        if self.registered {
            return Err(DfuError::AlreadyRegistered);
        }
        self.registered = true;
        self.serial = serial.to_vec();
        self.key = key.to_vec();
        Ok(())
    }

    pub fn is_registered(&self) -> bool {
        self.registered
    }

    pub fn credentials(&self) -> (&[u8], &[u8]) {
        (&self.serial, &self.key)
    }

    pub fn dfu_mode(&self) -> bool {
        self.dfu_mode
    }

    pub fn firmware_id(&self) -> FirmwareId {
        self.firmware_id
    }

    pub fn activate_dfu(&mut self, route: &DfuRoute) -> Result<(), DfuError> {
        if self.dfu_mode {
            return Err(DfuError::AlreadyInDfu);
        }
        match route {
            DfuRoute::Authenticated { serial, key } => {
                if !self.registered || *serial != self.serial || *key != self.key {
                    return Err(DfuError::AuthFailed);
                }
            }
            DfuRoute::BeforeRegistration { serial, key } => self.register(serial, key)?,
        }
        self.dfu_mode = true;
        Ok(())
    }

    pub fn exit_dfu(&mut self) {
        self.dfu_mode = false;
    }

    /// Starts a flash. Nothing changes until [`finish_flash`](Self::finish_flash).
    pub fn flash(&mut self, pkg: &DfuPackage, policy: &TrustPolicy) -> Result<PendingFlash, DfuError> {
        if !self.dfu_mode {
            return Err(DfuError::NotInDfuMode);
        }
        let report = verify_package(pkg, policy);
        if !report.accepted {
            return Err(DfuError::Rejected(report));
        }
        Ok(PendingFlash {
            duration: FLASH_DURATION,
            report,
        })
    }

    /// The droplock image has no DFU entry point of its own, so the lock
    /// stays on it from here on.
    pub fn finish_flash(&mut self, _pending: PendingFlash) {
        self.firmware_id = FirmwareId::Droplock;
        self.dfu_mode = false;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(seed: u8) -> SigningKey {
        SigningKey::from_bytes(&[seed; 32])
    }

    fn legacy(fw: &[u8]) -> DfuPackage {
        build_package(fw, ProtectionKind::LegacyCrc, None, "droplock", "1.0").unwrap()
    }

    #[test]
    fn key_text_round_trip() {
        let k = key(9);
        let parsed = parse_signing_key(&hex::encode(k.to_bytes())).unwrap();
        assert_eq!(parsed.to_bytes(), k.to_bytes());
        let public = parse_verifying_key(&format!("{}\n", hex::encode(k.verifying_key().as_bytes()))).unwrap();
        assert_eq!(public, k.verifying_key());
        assert!(matches!(parse_signing_key("abcd"), Err(DfuError::Key(_))));
        assert!(matches!(parse_verifying_key("zz"), Err(DfuError::Key(_))));
    }

    #[test]
    fn crc16_known_values() {
        assert_eq!(crc16(b"123456789"), 0x29B1);
        assert_eq!(crc16(b""), 0xFFFF);
        // Bitwise long division of a single zero byte from 0xFFFF.
        assert_eq!(crc16(&[0x00]), 0xE1F0);
    }

    #[test]
    fn legacy_round_trip() {
        let pkg = legacy(b"firmware");
        assert!(verify_package(&pkg, &TrustPolicy::accept_legacy()).accepted);
    }

    #[test]
    fn signed_round_trip() {
        let k = key(1);
        let pkg = build_package(b"fw", ProtectionKind::Signed, Some(&k), "x", "1").unwrap();
        let report = verify_package(&pkg, &TrustPolicy::require_signature(vec![k.verifying_key()]));
        assert!(report.accepted, "{report:?}");
        assert!(report.signature_valid && report.integrity_ok);
    }

    #[test]
    fn signed_without_key() {
        assert_eq!(
            build_package(b"fw", ProtectionKind::Signed, None, "x", "1"),
            Err(DfuError::MissingKey)
        );
    }

    #[test]
    fn crc_fixup_defeats_legacy_check() {
        let pkg = legacy(&[0u8; 64]);
        let evil = tamper_package(&pkg, 10, &[0xDE, 0xAD], true).unwrap();
        assert!(verify_package(&evil, &TrustPolicy::accept_legacy()).accepted);
        let stale = tamper_package(&pkg, 10, &[0xDE, 0xAD], false).unwrap();
        let report = verify_package(&stale, &TrustPolicy::accept_legacy());
        assert!(!report.integrity_ok && !report.accepted);
    }

    #[test]
    fn tampered_signed_package_is_rejected() {
        let k = key(2);
        let pkg = build_package(&[7u8; 64], ProtectionKind::Signed, Some(&k), "x", "1").unwrap();
        let evil = tamper_package(&pkg, 0, &[8], true).unwrap();
        let report = verify_package(&evil, &TrustPolicy::require_signature(vec![k.verifying_key()]));
        assert!(report.signature_present && !report.signature_valid && !report.accepted);
    }

    #[test]
    fn patch_out_of_range() {
        let pkg = legacy(&[0u8; 8]);
        assert!(matches!(
            tamper_package(&pkg, 7, &[1, 2], false),
            Err(DfuError::PatchOutOfRange { offset: 7, len: 2, firmware_len: 8 })
        ));
        assert!(tamper_package(&pkg, usize::MAX, &[1], false).is_err());
    }

    #[test]
    fn legacy_under_require_signature() {
        let report = verify_package(&legacy(b"fw"), &TrustPolicy::require_signature(vec![]));
        assert!(!report.accepted);
        assert_eq!(report.reasons[0], "signature absent");
    }

    #[test]
    fn untrusted_signer_is_rejected() {
        let pkg = build_package(b"fw", ProtectionKind::Signed, Some(&key(3)), "x", "1").unwrap();
        let report = verify_package(&pkg, &TrustPolicy::require_signature(vec![key(4).verifying_key()]));
        assert!(!report.accepted);
        assert!(report.reasons[0].contains("not trusted"));
        // Empty trust set verifies nothing.
        assert!(!verify_package(&pkg, &TrustPolicy::require_signature(vec![])).accepted);
    }

    #[test]
    fn container_round_trip() {
        let k = key(5);
        for pkg in [
            legacy(b"legacy firmware"),
            build_package(b"signed firmware", ProtectionKind::Signed, Some(&k), "n", "2.1").unwrap(),
        ] {
            let bytes = pkg.to_bytes();
            assert_eq!(&bytes[..5], b"DLFW\x01");
            assert_eq!(DfuPackage::from_bytes(&bytes).unwrap(), pkg);
        }
    }

    #[test]
    fn container_rejects_garbage() {
        assert!(matches!(DfuPackage::from_bytes(b"NOPE"), Err(DfuError::Malformed(_))));
        let mut bytes = legacy(b"fw").to_bytes();
        bytes.truncate(bytes.len() - 1);
        assert!(matches!(DfuPackage::from_bytes(&bytes), Err(DfuError::Malformed(_))));
        let mut v2 = legacy(b"fw").to_bytes();
        v2[4] = 2;
        assert!(DfuPackage::from_bytes(&v2).is_err());
    }

    #[test]
    fn before_registration_route() {
        let mut lock = LockProvisioningState::factory();
        let route = DfuRoute::BeforeRegistration {
            serial: b"S-0001".to_vec(),
            key: b"attacker".to_vec(),
        };
        lock.activate_dfu(&route).unwrap();
        assert!(lock.dfu_mode());
        assert_eq!(lock.credentials(), (&b"S-0001"[..], &b"attacker"[..]));

        let mut owned = LockProvisioningState::registered(b"S-9", b"owner");
        assert_eq!(owned.activate_dfu(&route), Err(DfuError::AlreadyRegistered));
        assert_eq!(owned.credentials(), (&b"S-9"[..], &b"owner"[..]));
    }

    #[test]
    fn authenticated_route() {
        let mut lock = LockProvisioningState::registered(b"S-9", b"owner");
        let wrong = DfuRoute::Authenticated {
            serial: b"S-9".to_vec(),
            key: b"guess".to_vec(),
        };
        assert_eq!(lock.activate_dfu(&wrong), Err(DfuError::AuthFailed));
        let right = DfuRoute::Authenticated {
            serial: b"S-9".to_vec(),
            key: b"owner".to_vec(),
        };
        lock.activate_dfu(&right).unwrap();
        assert!(lock.dfu_mode());
        assert_eq!(lock.activate_dfu(&right), Err(DfuError::AlreadyInDfu));
    }

    #[test]
    fn flash_lifecycle() {
        let mut lock = LockProvisioningState::factory();
        let pkg = legacy(b"droplock");
        assert_eq!(
            lock.flash(&pkg, &TrustPolicy::accept_legacy()),
            Err(DfuError::NotInDfuMode)
        );
        lock.activate_dfu(&DfuRoute::BeforeRegistration {
            serial: vec![1],
            key: vec![2],
        })
        .unwrap();
        let rejected = lock.flash(&pkg, &TrustPolicy::require_signature(vec![]));
        assert!(matches!(rejected, Err(DfuError::Rejected(_))));
        assert_eq!(lock.firmware_id(), FirmwareId::Stock);
        let pending = lock.flash(&pkg, &TrustPolicy::accept_legacy()).unwrap();
        assert_eq!(pending.duration, VirtualTime::from_secs(60));
        lock.finish_flash(pending);
        assert_eq!(lock.firmware_id(), FirmwareId::Droplock);
        assert!(!lock.dfu_mode());
    }
}
