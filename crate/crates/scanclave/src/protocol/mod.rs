//! Message types and canonical byte encoding for everything that crosses the
//! untrusted network. Signatures are computed over these exact bytes, so the
//! encoding is injective, versionless, and documented bit-exactly in
//! `docs/protocol.md`.

mod codec;

pub use codec::{
    canonical_report_bytes, decode_baseline, decode_message, encode_baseline, encode_message,
    peek_frame_type, read_frame, write_frame, DecodeError, FrameBuffer,
};

use rand_chacha::rand_core::Rng as _;

use crate::rng::Csprng;
use crate::scanner::{Digest32, RegionMeasurement, TaStatus};

pub const INSTANCE_ID_LEN: usize = 16;
pub const NONCE_LEN: usize = 32;
pub const SIGNATURE_LEN: usize = 64;
pub const PUBLIC_KEY_LEN: usize = 32;

/// Largest accepted frame payload (tag + body). An untrusted relay cannot
/// make either endpoint buffer more than this per frame.
pub const MAX_FRAME_PAYLOAD: usize = 1 << 20;

pub type InstanceId = [u8; INSTANCE_ID_LEN];

/// A single-use 32-byte challenge value. Uniqueness is enforced on the
/// verifier side; the type only guarantees the length.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Nonce(pub [u8; NONCE_LEN]);

impl Nonce {
    pub fn as_bytes(&self) -> &[u8; NONCE_LEN] {
        &self.0
    }

    pub fn from_slice(bytes: &[u8]) -> Option<Nonce> {
        bytes.try_into().ok().map(Nonce)
    }
}

impl std::fmt::Debug for Nonce {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Nonce({})", hex::encode(self.0))
    }
}

/// 32 bytes from a cryptographically strong source.
pub fn generate_nonce(rng: &mut Csprng) -> Nonce {
    let mut value = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut value);
    Nonce(value)
}

/// Platform-signed binding of an enclave measurement to an instance public
/// key. The platform signature covers the canonical concatenation
/// `enclave_measurement || instance_id || public_key`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Quote {
    pub enclave_measurement: Digest32,
    pub instance_id: InstanceId,
    pub public_key: [u8; PUBLIC_KEY_LEN],
    pub platform_signature: [u8; SIGNATURE_LEN],
}

impl Quote {
    /// The bytes the platform key signs.
    pub fn signing_bytes(
        enclave_measurement: &Digest32,
        instance_id: &InstanceId,
        public_key: &[u8; PUBLIC_KEY_LEN],
    ) -> [u8; 80] {
        let mut out = [0u8; 80];
        out[..32].copy_from_slice(enclave_measurement);
        out[32..48].copy_from_slice(instance_id);
        out[48..].copy_from_slice(public_key);
        out
    }

    /// Canonical 144-byte encoding, also the `quote.bin` file format.
    pub fn to_bytes(&self) -> [u8; 144] {
        let mut out = [0u8; 144];
        out[..32].copy_from_slice(&self.enclave_measurement);
        out[32..48].copy_from_slice(&self.instance_id);
        out[48..80].copy_from_slice(&self.public_key);
        out[80..].copy_from_slice(&self.platform_signature);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Quote> {
        if bytes.len() != 144 {
            return None;
        }
        Some(Quote {
            enclave_measurement: bytes[..32].try_into().unwrap(),
            instance_id: bytes[32..48].try_into().unwrap(),
            public_key: bytes[48..80].try_into().unwrap(),
            platform_signature: bytes[80..].try_into().unwrap(),
        })
    }
}

/// The unit of proof: a scan result bound to a challenge nonce and signed by
/// the enclave instance key. The signature covers
/// [`canonical_report_bytes`], i.e. every field except the signature itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerificationReport {
    pub instance_id: InstanceId,
    pub nonce: Nonce,
    /// When the embedded scan completed (unix ms).
    pub scan_time_ms: u64,
    /// When the nonce was bound and the report signed (unix ms).
    pub sign_time_ms: u64,
    pub ta_status: TaStatus,
    pub measurements: Vec<RegionMeasurement>,
    pub signature: [u8; SIGNATURE_LEN],
}

/// Verifier verdict carried in DECISION frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Verdict {
    Trusted = 0,
    Untrusted = 1,
    Rejected = 2,
}

impl Verdict {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Verdict> {
        match code {
            0 => Some(Verdict::Trusted),
            1 => Some(Verdict::Untrusted),
            2 => Some(Verdict::Rejected),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Trusted => "TRUSTED",
            Verdict::Untrusted => "UNTRUSTED",
            Verdict::Rejected => "REJECTED",
        }
    }
}

/// Machine-readable grounds for a decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum ReasonCode {
    Mismatch = 1,
    Missing = 2,
    NewRegion = 3,
    TaNotFound = 4,
    BridgeFailed = 5,
    StaleScan = 6,
    BadSignature = 7,
    ReplayedNonce = 8,
    UnknownNonce = 9,
    UnknownInstance = 10,
    NoScan = 11,
}

impl ReasonCode {
    pub const ALL: [ReasonCode; 11] = [
        ReasonCode::Mismatch,
        ReasonCode::Missing,
        ReasonCode::NewRegion,
        ReasonCode::TaNotFound,
        ReasonCode::BridgeFailed,
        ReasonCode::StaleScan,
        ReasonCode::BadSignature,
        ReasonCode::ReplayedNonce,
        ReasonCode::UnknownNonce,
        ReasonCode::UnknownInstance,
        ReasonCode::NoScan,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<ReasonCode> {
        Self::ALL.into_iter().find(|r| r.code() == code)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ReasonCode::Mismatch => "MISMATCH",
            ReasonCode::Missing => "MISSING",
            ReasonCode::NewRegion => "NEW_REGION",
            ReasonCode::TaNotFound => "TA_NOT_FOUND",
            ReasonCode::BridgeFailed => "BRIDGE_FAILED",
            ReasonCode::StaleScan => "STALE_SCAN",
            ReasonCode::BadSignature => "BAD_SIGNATURE",
            ReasonCode::ReplayedNonce => "REPLAYED_NONCE",
            ReasonCode::UnknownNonce => "UNKNOWN_NONCE",
            ReasonCode::UnknownInstance => "UNKNOWN_INSTANCE",
            ReasonCode::NoScan => "NO_SCAN",
        }
    }

    pub fn from_str_name(name: &str) -> Option<ReasonCode> {
        Self::ALL.into_iter().find(|r| r.as_str() == name)
    }
}

/// Error codes carried in ERROR frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum ErrorCode {
    BadQuoteSignature = 1,
    UnknownMeasurement = 2,
    DuplicateInstanceDifferentKey = 3,
    UnknownInstance = 4,
    MalformedFrame = 5,
    UnexpectedMessage = 6,
}

impl ErrorCode {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<ErrorCode> {
        match code {
            1 => Some(ErrorCode::BadQuoteSignature),
            2 => Some(ErrorCode::UnknownMeasurement),
            3 => Some(ErrorCode::DuplicateInstanceDifferentKey),
            4 => Some(ErrorCode::UnknownInstance),
            5 => Some(ErrorCode::MalformedFrame),
            6 => Some(ErrorCode::UnexpectedMessage),
            _ => None,
        }
    }
}

/// Frame type tags, used both for dispatch and for fault-plan matching on
/// otherwise opaque frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum FrameType {
    AttestAnnounce = 0x01,
    Challenge = 0x02,
    Report = 0x03,
    Decision = 0x04,
    Error = 0x05,
}

impl FrameType {
    pub fn from_tag(tag: u8) -> Option<FrameType> {
        match tag {
            0x01 => Some(FrameType::AttestAnnounce),
            0x02 => Some(FrameType::Challenge),
            0x03 => Some(FrameType::Report),
            0x04 => Some(FrameType::Decision),
            0x05 => Some(FrameType::Error),
            _ => None,
        }
    }

    pub fn from_name(name: &str) -> Option<FrameType> {
        match name {
            "ATTEST_ANNOUNCE" | "ANNOUNCE" => Some(FrameType::AttestAnnounce),
            "CHALLENGE" => Some(FrameType::Challenge),
            "REPORT" => Some(FrameType::Report),
            "DECISION" => Some(FrameType::Decision),
            "ERROR" => Some(FrameType::Error),
            _ => None,
        }
    }
}

/// Everything that crosses the wire.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    AttestAnnounce {
        quote: Quote,
    },
    Challenge {
        instance_id: InstanceId,
        nonce: Nonce,
    },
    Report(VerificationReport),
    Decision {
        instance_id: InstanceId,
        nonce: Nonce,
        verdict: Verdict,
        reasons: Vec<ReasonCode>,
        restart_ta: bool,
    },
    Error {
        code: ErrorCode,
        detail: String,
    },
}

impl Message {
    pub fn frame_type(&self) -> FrameType {
        match self {
            Message::AttestAnnounce { .. } => FrameType::AttestAnnounce,
            Message::Challenge { .. } => FrameType::Challenge,
            Message::Report(_) => FrameType::Report,
            Message::Decision { .. } => FrameType::Decision,
            Message::Error { .. } => FrameType::Error,
        }
    }
}

#[cfg(test)]
pub(crate) mod tests;
