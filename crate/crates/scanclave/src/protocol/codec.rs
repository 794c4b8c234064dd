//! Canonical encoding and framing.
//!
//! Encoding rules (also in `docs/protocol.md`):
//!
//! - integers are big-endian fixed width;
//! - fixed-size byte fields (instance ids, nonces, digests, keys,
//!   signatures, permission flags) are raw, no prefix;
//! - variable-size byte strings and UTF-8 strings carry a u32 big-endian
//!   length prefix; lists carry a u32 big-endian count prefix;
//! - fields in declaration order, no padding.
//!
//! A frame is `u32 length | u8 tag | payload`, where `length` counts tag plus
//! payload. Distinct values never encode to the same bytes, so signing the
//! canonical bytes signs the value.

use std::io::{self, Read, Write};

use super::{
    ErrorCode, FrameType, InstanceId, Message, Nonce, Quote, Verdict, VerificationReport,
    MAX_FRAME_PAYLOAD, NONCE_LEN,
};
use crate::protocol::ReasonCode;
use crate::scanner::{MemoryRegion, Perms, RegionMeasurement, RegionVerdict, TaStatus};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("input shorter than a complete frame")]
    Truncated,
    #[error("unknown type code {0:#04x}")]
    UnknownType(u8),
    #[error("bytes remain after a complete frame")]
    TrailingBytes,
    #[error("inner length or structure inconsistent with frame")]
    LengthMismatch,
    #[error("declared payload exceeds the {MAX_FRAME_PAYLOAD}-byte cap")]
    OversizeFrame,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Writer {
        Writer { buf: Vec::new() }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }

    fn raw(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }

    fn var_bytes(&mut self, v: &[u8]) {
        self.u32(v.len() as u32);
        self.raw(v);
    }

    fn string(&mut self, v: &str) {
        self.var_bytes(v.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Reader<'a> {
        Reader { buf, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.remaining() < n {
            return Err(DecodeError::LengthMismatch);
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], DecodeError> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    fn var_bytes(&mut self) -> Result<&'a [u8], DecodeError> {
        let len = self.u32()? as usize;
        self.take(len)
    }

    fn string(&mut self) -> Result<String, DecodeError> {
        let bytes = self.var_bytes()?;
        String::from_utf8(bytes.to_vec()).map_err(|_| DecodeError::LengthMismatch)
    }

    /// Guard a list count against allocation bombs: each element occupies at
    /// least `min_elem` bytes, so the count cannot exceed what remains.
    fn list_count(&mut self, min_elem: usize) -> Result<usize, DecodeError> {
        let count = self.u32()? as usize;
        if count.saturating_mul(min_elem.max(1)) > self.remaining() {
            return Err(DecodeError::LengthMismatch);
        }
        Ok(count)
    }

    fn finish(&self) -> Result<(), DecodeError> {
        if self.remaining() != 0 {
            return Err(DecodeError::LengthMismatch);
        }
        Ok(())
    }
}

fn put_measurement(w: &mut Writer, m: &RegionMeasurement) {
    w.u64(m.region.start);
    w.u64(m.region.length);
    w.raw(&m.region.perms.0);
    w.string(&m.region.label);
    w.raw(&m.digest);
    w.u8(m.verdict.code());
}

// u64 start + u64 length + 4 perms + u32 label len + 32 digest + u8 verdict
const MEASUREMENT_MIN_LEN: usize = 8 + 8 + 4 + 4 + 32 + 1;

fn get_measurement(r: &mut Reader) -> Result<RegionMeasurement, DecodeError> {
    let start = r.u64()?;
    let length = r.u64()?;
    let perms = Perms(r.array::<4>()?);
    let label = r.string()?;
    let digest = r.array::<32>()?;
    let verdict_code = r.u8()?;
    let verdict =
        RegionVerdict::from_code(verdict_code).ok_or(DecodeError::UnknownType(verdict_code))?;
    Ok(RegionMeasurement {
        region: MemoryRegion {
            start,
            length,
            perms,
            label,
        },
        digest,
        verdict,
    })
}

fn put_quote(w: &mut Writer, q: &Quote) {
    w.raw(&q.enclave_measurement);
    w.raw(&q.instance_id);
    w.raw(&q.public_key);
    w.raw(&q.platform_signature);
}

fn get_quote(r: &mut Reader) -> Result<Quote, DecodeError> {
    Ok(Quote {
        enclave_measurement: r.array::<32>()?,
        instance_id: r.array::<16>()?,
        public_key: r.array::<32>()?,
        platform_signature: r.array::<64>()?,
    })
}

/// The signed body of a report: every field except the signature, in
/// declaration order.
pub fn canonical_report_bytes(report: &VerificationReport) -> Vec<u8> {
    let mut w = Writer::new();
    put_report_body(&mut w, report);
    w.buf
}

fn put_report_body(w: &mut Writer, report: &VerificationReport) {
    w.raw(&report.instance_id);
    w.raw(report.nonce.as_bytes());
    w.u64(report.scan_time_ms);
    w.u64(report.sign_time_ms);
    w.u8(report.ta_status.code());
    w.u32(report.measurements.len() as u32);
    for m in &report.measurements {
        put_measurement(w, m);
    }
}

fn get_report(r: &mut Reader) -> Result<VerificationReport, DecodeError> {
    let instance_id: InstanceId = r.array::<16>()?;
    let nonce = Nonce(r.array::<NONCE_LEN>()?);
    let scan_time_ms = r.u64()?;
    let sign_time_ms = r.u64()?;
    let status_code = r.u8()?;
    let ta_status =
        TaStatus::from_code(status_code).ok_or(DecodeError::UnknownType(status_code))?;
    let count = r.list_count(MEASUREMENT_MIN_LEN)?;
    let mut measurements = Vec::with_capacity(count);
    for _ in 0..count {
        measurements.push(get_measurement(r)?);
    }
    let signature = r.array::<64>()?;
    Ok(VerificationReport {
        instance_id,
        nonce,
        scan_time_ms,
        sign_time_ms,
        ta_status,
        measurements,
        signature,
    })
}

/// Encode a message as a complete frame:
/// `u32 BE (tag + payload length) | u8 tag | canonical payload`.
pub fn encode_message(message: &Message) -> Vec<u8> {
    let mut w = Writer::new();
    w.u32(0); // frame length, patched below
    w.u8(message.frame_type() as u8);
    match message {
        Message::AttestAnnounce { quote } => put_quote(&mut w, quote),
        Message::Challenge { instance_id, nonce } => {
            w.raw(instance_id);
            w.raw(nonce.as_bytes());
        }
        Message::Report(report) => {
            put_report_body(&mut w, report);
            w.raw(&report.signature);
        }
        Message::Decision {
            instance_id,
            nonce,
            verdict,
            reasons,
            restart_ta,
        } => {
            w.raw(instance_id);
            w.raw(nonce.as_bytes());
            w.u8(verdict.code());
            w.u32(reasons.len() as u32);
            for reason in reasons {
                w.u8(reason.code());
            }
            w.u8(u8::from(*restart_ta));
        }
        Message::Error { code, detail } => {
            w.u8(code.code());
            w.string(detail);
        }
    }
    let frame_len = (w.buf.len() - 4) as u32;
    w.buf[..4].copy_from_slice(&frame_len.to_be_bytes());
    w.buf
}

/// Decode a complete frame. Total over arbitrary bytes: every malformed
/// input maps to a [`DecodeError`], never a panic.
pub fn decode_message(bytes: &[u8]) -> Result<Message, DecodeError> {
    if bytes.len() < 4 {
        return Err(DecodeError::Truncated);
    }
    let frame_len = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize;
    if frame_len > MAX_FRAME_PAYLOAD {
        return Err(DecodeError::OversizeFrame);
    }
    if frame_len == 0 {
        return Err(DecodeError::Truncated);
    }
    if bytes.len() < 4 + frame_len {
        return Err(DecodeError::Truncated);
    }
    if bytes.len() > 4 + frame_len {
        return Err(DecodeError::TrailingBytes);
    }

    let tag = bytes[4];
    let frame_type = FrameType::from_tag(tag).ok_or(DecodeError::UnknownType(tag))?;
    let mut r = Reader::new(&bytes[5..]);
    let message = match frame_type {
        FrameType::AttestAnnounce => Message::AttestAnnounce {
            quote: get_quote(&mut r)?,
        },
        FrameType::Challenge => Message::Challenge {
            instance_id: r.array::<16>()?,
            nonce: Nonce(r.array::<NONCE_LEN>()?),
        },
        FrameType::Report => Message::Report(get_report(&mut r)?),
        FrameType::Decision => {
            let instance_id = r.array::<16>()?;
            let nonce = Nonce(r.array::<NONCE_LEN>()?);
            let verdict_code = r.u8()?;
            let verdict =
                Verdict::from_code(verdict_code).ok_or(DecodeError::UnknownType(verdict_code))?;
            let count = r.list_count(1)?;
            let mut reasons = Vec::with_capacity(count);
            for _ in 0..count {
                let code = r.u8()?;
                reasons.push(ReasonCode::from_code(code).ok_or(DecodeError::UnknownType(code))?);
            }
            let restart_ta = match r.u8()? {
                0 => false,
                1 => true,
                _ => return Err(DecodeError::LengthMismatch),
            };
            Message::Decision {
                instance_id,
                nonce,
                verdict,
                reasons,
                restart_ta,
            }
        }
        FrameType::Error => {
            let code_byte = r.u8()?;
            let code = ErrorCode::from_code(code_byte).ok_or(DecodeError::UnknownType(code_byte))?;
            let detail = r.string()?;
            Message::Error { code, detail }
        }
    };
    r.finish()?;
    Ok(message)
}

/// Frame type of an encoded frame without decoding the payload. `None` when
/// the buffer is too short or the tag is unknown.
pub fn peek_frame_type(frame: &[u8]) -> Option<FrameType> {
    frame.get(4).copied().and_then(FrameType::from_tag)
}

/// Read one complete frame from a byte stream. Returns `Ok(None)` on clean
/// end-of-stream at a frame boundary.
pub fn read_frame(stream: &mut impl Read) -> io::Result<Option<Vec<u8>>> {
    let mut header = [0u8; 4];
    match stream.read_exact(&mut header) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let frame_len = u32::from_be_bytes(header) as usize;
    if frame_len > MAX_FRAME_PAYLOAD {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            "frame exceeds payload cap",
        ));
    }
    let mut frame = vec![0u8; 4 + frame_len];
    frame[..4].copy_from_slice(&header);
    stream.read_exact(&mut frame[4..])?;
    Ok(Some(frame))
}

/// Write one already-encoded frame.
pub fn write_frame(stream: &mut impl Write, frame: &[u8]) -> io::Result<()> {
    stream.write_all(frame)?;
    stream.flush()
}

/// Canonical baseline encoding, the `baseline.bin` file format:
/// `ta_label str | created_at u64 | entries list of (label str, length u64,
/// digest [32])`.
pub fn encode_baseline(baseline: &crate::scanner::Baseline) -> Vec<u8> {
    let mut w = Writer::new();
    w.string(&baseline.ta_label);
    w.u64(baseline.created_at_ms);
    w.u32(baseline.entries.len() as u32);
    for e in &baseline.entries {
        w.string(&e.label);
        w.u64(e.length);
        w.raw(&e.digest);
    }
    w.buf
}

pub fn decode_baseline(bytes: &[u8]) -> Result<crate::scanner::Baseline, DecodeError> {
    let mut r = Reader::new(bytes);
    let ta_label = r.string()?;
    let created_at_ms = r.u64()?;
    // u32 label len + u64 length + 32 digest
    let count = r.list_count(4 + 8 + 32)?;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        entries.push(crate::scanner::BaselineEntry {
            label: r.string()?,
            length: r.u64()?,
            digest: r.array::<32>()?,
        });
    }
    r.finish()?;
    Ok(crate::scanner::Baseline {
        ta_label,
        created_at_ms,
        entries,
    })
}

/// Reassembles frames from arbitrarily fragmented stream reads, the shape
/// non-blocking read loops need.
#[derive(Debug, Default)]
pub struct FrameBuffer {
    buf: Vec<u8>,
}

impl FrameBuffer {
    pub fn new() -> FrameBuffer {
        FrameBuffer::default()
    }

    pub fn extend(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Pop the next complete frame, header included. `Ok(None)` while more
    /// bytes are needed; `OversizeFrame` when the declared length breaks the
    /// cap, after which the stream is unrecoverable.
    pub fn pop_frame(&mut self) -> Result<Option<Vec<u8>>, DecodeError> {
        if self.buf.len() < 4 {
            return Ok(None);
        }
        let frame_len = u32::from_be_bytes(self.buf[..4].try_into().unwrap()) as usize;
        if frame_len > MAX_FRAME_PAYLOAD {
            return Err(DecodeError::OversizeFrame);
        }
        let total = 4 + frame_len;
        if self.buf.len() < total {
            return Ok(None);
        }
        let rest = self.buf.split_off(total);
        let frame = std::mem::replace(&mut self.buf, rest);
        Ok(Some(frame))
    }
}
