//! Frame relay between the verifier socket and the enclave entry points,
//! with adversarial fault injection.
//!
//! The relay is the untrusted network made concrete: under a fault plan it
//! drops, duplicates, delays, or mutates frames in either direction, and a
//! tap hands every wire frame to an observer. Protocol correctness must
//! survive anything done here.

use std::io::{Read as _, Write as _};
use std::net::TcpStream;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::Sender;
use std::sync::Arc;
use std::time::Duration;

use crate::enclave::EnclaveHandle;
use crate::protocol::{
    decode_message, encode_message, FrameBuffer, FrameType, Message, peek_frame_type,
};

/// One `<frame type> <action>` line of a fault plan.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FaultRule {
    pub frame_type: FrameType,
    pub action: FaultAction,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FaultAction {
    Drop,
    Dup,
    Delay(Duration),
    /// XOR 0x01 into the byte at this offset within the frame.
    Flip(usize),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FaultPlan {
    pub rules: Vec<FaultRule>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum FaultPlanParseError {
    #[error("line {0}: expected `<frame type> <action>`")]
    Malformed(usize),
    #[error("line {0}: unknown frame type {1:?}")]
    UnknownFrameType(usize, String),
    #[error("line {0}: unknown action {1:?}")]
    UnknownAction(usize, String),
}

impl FaultPlan {
    /// Line-oriented plan text: `<frame type> <drop|dup|delay:<ms>|flip:<offset>>`,
    /// `#` comments and blank lines ignored.
    pub fn parse(text: &str) -> Result<FaultPlan, FaultPlanParseError> {
        let mut rules = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let lineno = i + 1;
            let (type_s, action_s) = line
                .split_once(char::is_whitespace)
                .ok_or(FaultPlanParseError::Malformed(lineno))?;
            let frame_type = FrameType::from_name(type_s).ok_or_else(|| {
                FaultPlanParseError::UnknownFrameType(lineno, type_s.to_string())
            })?;
            let action_s = action_s.trim();
            let action = if action_s == "drop" {
                FaultAction::Drop
            } else if action_s == "dup" {
                FaultAction::Dup
            } else if let Some(ms) = action_s.strip_prefix("delay:") {
                let ms: u64 = ms
                    .parse()
                    .map_err(|_| FaultPlanParseError::UnknownAction(lineno, action_s.to_string()))?;
                FaultAction::Delay(Duration::from_millis(ms))
            } else if let Some(off) = action_s.strip_prefix("flip:") {
                let off: usize = off
                    .parse()
                    .map_err(|_| FaultPlanParseError::UnknownAction(lineno, action_s.to_string()))?;
                FaultAction::Flip(off)
            } else {
                return Err(FaultPlanParseError::UnknownAction(
                    lineno,
                    action_s.to_string(),
                ));
            };
            rules.push(FaultRule { frame_type, action });
        }
        Ok(FaultPlan { rules })
    }

    pub fn load(path: &Path) -> std::io::Result<Result<FaultPlan, FaultPlanParseError>> {
        Ok(FaultPlan::parse(&std::fs::read_to_string(path)?))
    }
}

/// One frame leaving the fault stage, optionally sent after a delay.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Emission {
    pub bytes: Vec<u8>,
    pub delay: Option<Duration>,
}

/// Run a frame through the plan. Rules apply in file order to every pending
/// emission: drop clears, dup doubles, delay accumulates, flip mutates.
pub fn apply_fault_plan(plan: &FaultPlan, frame: &[u8]) -> Vec<Emission> {
    let Some(frame_type) = peek_frame_type(frame) else {
        return vec![Emission {
            bytes: frame.to_vec(),
            delay: None,
        }];
    };
    let mut emissions = vec![Emission {
        bytes: frame.to_vec(),
        delay: None,
    }];
    for rule in plan.rules.iter().filter(|r| r.frame_type == frame_type) {
        match &rule.action {
            FaultAction::Drop => emissions.clear(),
            FaultAction::Dup => {
                let copies = emissions.clone();
                emissions.extend(copies);
            }
            FaultAction::Delay(d) => {
                for e in &mut emissions {
                    e.delay = Some(e.delay.unwrap_or(Duration::ZERO) + *d);
                }
            }
            FaultAction::Flip(offset) => {
                for e in &mut emissions {
                    if let Some(byte) = e.bytes.get_mut(*offset) {
                        *byte ^= 0x01;
                    }
                }
            }
        }
    }
    emissions
}

/// Which way a tapped frame was travelling on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TapDirection {
    ToVerifier,
    FromVerifier,
}

/// A wire observation: exactly the bytes on the socket.
#[derive(Debug, Clone)]
pub struct TapEvent {
    pub direction: TapDirection,
    pub frame: Vec<u8>,
}

/// Relay knobs, all adversarial or harness-facing.
#[derive(Clone, Default)]
pub struct RelayConfig {
    pub fault_plan: Option<FaultPlan>,
    /// Passive wire observer (the network adversary's view).
    pub tap: Option<Sender<TapEvent>>,
    /// Synchronous pre-delivery hook on inbound messages: the adversary
    /// holding a frame before the host sees it.
    pub inbound_hook: Option<Arc<dyn Fn(&Message) + Send + Sync>>,
    /// Test-only misconfiguration: trigger a scan on every challenge. This
    /// is the coupling the schedule exists to avoid; the control experiment
    /// measures exactly how exploitable it is.
    pub scan_on_challenge: bool,
}

impl std::fmt::Debug for RelayConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RelayConfig")
            .field("fault_plan", &self.fault_plan)
            .field("tap", &self.tap.is_some())
            .field("inbound_hook", &self.inbound_hook.is_some())
            .field("scan_on_challenge", &self.scan_on_challenge)
            .finish()
    }
}

fn tap(config: &RelayConfig, direction: TapDirection, frame: &[u8]) {
    if let Some(tap) = &config.tap {
        let _ = tap.send(TapEvent {
            direction,
            frame: frame.to_vec(),
        });
    }
}

/// Forward frames until the socket closes or shutdown is flagged.
///
/// Inbound: CHALLENGE goes to the enclave entry point (optionally scanning
/// first in the misconfigured mode) and the signed REPORT comes back out;
/// DECISION forwards restart commands to the supervisor. Outbound frames
/// pass the fault stage last, so the tap sees what was really sent.
pub fn relay_loop(
    mut stream: TcpStream,
    enclave: EnclaveHandle,
    host_commands: Sender<super::HostCommand>,
    config: RelayConfig,
    shutdown: Arc<AtomicBool>,
) -> std::io::Result<()> {
    stream.set_read_timeout(Some(Duration::from_millis(10)))?;
    stream.set_nodelay(true)?;

    // step (1a): announce the instance quote
    if let Some(quote) = enclave.announce() {
        send_faulted(
            &mut stream,
            &config,
            &encode_message(&Message::AttestAnnounce { quote }),
        )?;
    }

    let mut frames = FrameBuffer::new();
    let mut read_buf = [0u8; 8192];

    while !shutdown.load(Ordering::SeqCst) {
        match stream.read(&mut read_buf) {
            Ok(0) => break,
            Ok(n) => frames.extend(&read_buf[..n]),
            Err(e)
                if e.kind() == std::io::ErrorKind::WouldBlock
                    || e.kind() == std::io::ErrorKind::TimedOut => {}
            Err(e) => return Err(e),
        }

        while let Some(frame) = frames.pop_frame().map_err(|_| {
            std::io::Error::new(std::io::ErrorKind::InvalidData, "oversize inbound frame")
        })? {
            tap(&config, TapDirection::FromVerifier, &frame);
            let plan = config.fault_plan.clone().unwrap_or_default();
            for emission in apply_fault_plan(&plan, &frame) {
                if let Some(delay) = emission.delay {
                    std::thread::sleep(delay);
                }
                let Ok(message) = decode_message(&emission.bytes) else {
                    log::warn!("undecodable inbound frame dropped");
                    continue;
                };
                if let Some(hook) = &config.inbound_hook {
                    hook(&message);
                }
                match message {
                    Message::Challenge { instance_id, nonce } => {
                        if instance_id != enclave.instance_id() {
                            continue;
                        }
                        if config.scan_on_challenge {
                            let (ack, ack_rx) = std::sync::mpsc::sync_channel(1);
                            if host_commands
                                .send(super::HostCommand::ScanNow { ack })
                                .is_ok()
                            {
                                let _ = ack_rx.recv_timeout(Duration::from_secs(5));
                            }
                        }
                        let Some(report) = enclave.challenge(&nonce) else {
                            return Ok(()); // enclave executor gone
                        };
                        send_faulted(
                            &mut stream,
                            &config,
                            &encode_message(&Message::Report(report)),
                        )?;
                    }
                    Message::Decision {
                        instance_id,
                        restart_ta,
                        ..
                    } => {
                        if restart_ta && instance_id == enclave.instance_id() {
                            let _ = host_commands.send(super::HostCommand::Restart);
                        }
                    }
                    Message::Error { code, detail } => {
                        log::warn!("verifier error frame: {code:?} {detail}");
                    }
                    Message::AttestAnnounce { .. } | Message::Report(_) => {
                        log::warn!("host-originated frame type arrived inbound; ignored");
                    }
                }
            }
        }
    }
    Ok(())
}

fn send_faulted(
    stream: &mut TcpStream,
    config: &RelayConfig,
    frame: &[u8],
) -> std::io::Result<()> {
    // the tap captures what the honest endpoint handed to the network,
    // before the adversarial fault stage transforms or drops it
    tap(config, TapDirection::ToVerifier, frame);
    let plan = config.fault_plan.clone().unwrap_or_default();
    for emission in apply_fault_plan(&plan, frame) {
        if let Some(delay) = emission.delay {
            std::thread::sleep(delay);
        }
        stream.write_all(&emission.bytes)?;
        stream.flush()?;
    }
    Ok(())
}
