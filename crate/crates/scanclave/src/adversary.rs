//! Attack harness.
//!
//! Realizes the attacker capabilities the system defends against: tampering
//! with any unprotected memory, observing and modifying network traffic,
//! suppressing target launches, and restoring integrity just before an
//! anticipated check. Attackers act only through surfaces the OS grants a
//! privileged adversary — the debug facility, files, sockets, and the relay
//! they control — never through enclave entry points.

pub mod scenario;

pub use scenario::{
    load_scenario, run_scenario, run_scenario_file, AttackAction, AttackScenario,
    ExpectedDecision, ScenarioError, ScenarioOutcome,
};

use std::io::Write as _;
use std::net::TcpStream;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{channel, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use crate::enclave::{produce_quote, EnclaveIdentity, PlatformKey};
use crate::protocol::{
    canonical_report_bytes, decode_message, encode_message, generate_nonce, read_frame, ErrorCode,
    InstanceId, Message, ReasonCode, Verdict, VerificationReport,
};
use crate::rng::seeded_rng;
use crate::scanner::{enumerate_regions, MemoryRegion, MemorySource, TamperError, TaStatus};

/// XOR one byte of the target's live image, addressed by region label.
/// Writes go through the same surface the scanner reads: direct store for
/// plugins, the debug facility for children, the file for snapshots.
pub fn tamper_memory(
    source: &MemorySource,
    region_label: Option<&str>,
    offset: u64,
    xor_mask: u8,
) -> Result<(), TamperError> {
    let region = find_region(source, region_label)?;
    source.write_region_byte(&region, offset, xor_mask)
}

fn find_region(
    source: &MemorySource,
    region_label: Option<&str>,
) -> Result<MemoryRegion, TamperError> {
    let regions = enumerate_regions(source)
        .map_err(|e| TamperError::RegionNotFound(format!("enumerate failed: {e}")))?;
    let region = match region_label {
        Some(label) => regions.into_iter().find(|r| r.label == label),
        None => regions.into_iter().next(),
    };
    region.ok_or_else(|| {
        TamperError::RegionNotFound(region_label.unwrap_or("<first executable>").to_string())
    })
}

/// Kill a process the way a privileged adversary would.
#[cfg(unix)]
pub fn kill_process(pid: u32) {
    unsafe {
        libc::kill(pid as libc::pid_t, libc::SIGKILL);
    }
}

/// Re-send captured frames verbatim and collect the verifier's replies.
pub fn replay_captured_report(
    frames: &[Vec<u8>],
    verifier_addr: &str,
) -> std::io::Result<Vec<Message>> {
    let mut stream = TcpStream::connect(verifier_addr)?;
    stream.set_nodelay(true)?;
    let mut replies = Vec::with_capacity(frames.len());
    for frame in frames {
        stream.write_all(frame)?;
        stream.flush()?;
        let reply = read_frame(&mut stream)?.ok_or_else(|| {
            std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "verifier closed")
        })?;
        replies.push(decode_message(&reply).map_err(|e| {
            std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string())
        })?);
    }
    Ok(replies)
}

/// What an impersonation attempt got back.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImpersonationOutcome {
    /// ERROR code answering the self-signed quote announce.
    pub announce_error: Option<ErrorCode>,
    /// Decision on a forged report naming a registered instance.
    pub forged_known: Option<(Verdict, Vec<ReasonCode>)>,
    /// Decision on a forged report naming an unknown instance.
    pub forged_unknown: Option<(Verdict, Vec<ReasonCode>)>,
}

/// Impersonate an instance: announce a self-signed quote, then submit
/// forged reports signed with the adversary's own key.
pub fn impersonate_instance(
    verifier_addr: &str,
    target_instance: Option<InstanceId>,
    seed: u64,
) -> std::io::Result<ImpersonationOutcome> {
    let mut rng = seeded_rng(seed);
    let adversary = EnclaveIdentity::generate(&mut rng);
    // self-signed: the adversary's key plays "platform"
    let fake_platform = PlatformKey::from_seed(adversary.signing_seed());
    let quote = produce_quote(&adversary, &[0xAD; 32], &fake_platform);

    let mut stream = TcpStream::connect(verifier_addr)?;
    stream.set_nodelay(true)?;
    stream.write_all(&encode_message(&Message::AttestAnnounce { quote }))?;
    let announce_error = match read_frame(&mut stream)? {
        Some(frame) => match decode_message(&frame) {
            Ok(Message::Error { code, .. }) => Some(code),
            _ => None,
        },
        None => None,
    };

    let known_nonce = generate_nonce(&mut rng);
    let unknown_nonce = generate_nonce(&mut rng);
    let mut unknown_id = [0u8; 16];
    rand_chacha::rand_core::Rng::fill_bytes(&mut rng, &mut unknown_id);

    let mut forge = |instance_id: InstanceId,
                     nonce: crate::protocol::Nonce|
     -> std::io::Result<Option<(Verdict, Vec<ReasonCode>)>> {
        let mut report = VerificationReport {
            instance_id,
            nonce,
            scan_time_ms: 1,
            sign_time_ms: 1,
            ta_status: TaStatus::Ok,
            measurements: Vec::new(),
            signature: [0u8; 64],
        };
        report.signature =
            crate::enclave::sign_report(&adversary, &canonical_report_bytes(&report));
        stream.write_all(&encode_message(&Message::Report(report)))?;
        match read_frame(&mut stream)? {
            Some(frame) => match decode_message(&frame) {
                Ok(Message::Decision {
                    verdict, reasons, ..
                }) => Ok(Some((verdict, reasons))),
                _ => Ok(None),
            },
            None => Ok(None),
        }
    };

    let forged_known = match target_instance {
        Some(id) => forge(id, known_nonce)?,
        None => None,
    };
    let forged_unknown = forge(unknown_id, unknown_nonce)?;

    Ok(ImpersonationOutcome {
        announce_error,
        forged_known,
        forged_unknown,
    })
}

/// Trigger for the restore-before-scan attacker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RestoreTrigger {
    /// Watch the relay for CHALLENGE frames (the network observer of the
    /// attacker model) and restore just before delivery.
    OnChallengeObserved,
    /// Restore on a fixed cadence.
    Periodic(Duration),
}

struct RestoreState {
    source: MemorySource,
    region: MemoryRegion,
    offset: u64,
    xor_mask: u8,
    tampered: bool,
}

impl RestoreState {
    fn set_tampered(&mut self, want: bool) {
        if self.tampered != want {
            if self
                .source
                .write_region_byte(&self.region, self.offset, self.xor_mask)
                .is_ok()
            {
                self.tampered = want;
            }
        }
    }
}

/// A background attacker that keeps the target tampered but momentarily
/// restores the original bytes around anticipated verifications.
pub struct RestoreBeforeScanAttacker {
    state: Arc<Mutex<RestoreState>>,
    stop: Arc<AtomicBool>,
    retamper_tx: Sender<()>,
    thread: Option<JoinHandle<()>>,
}

impl RestoreBeforeScanAttacker {
    /// Start tampering. For [`RestoreTrigger::OnChallengeObserved`], install
    /// [`RestoreBeforeScanAttacker::challenge_hook`] as the relay's inbound
    /// hook so CHALLENGE frames are intercepted before delivery.
    pub fn start(
        source: MemorySource,
        region_label: Option<&str>,
        offset: u64,
        xor_mask: u8,
        window: Duration,
        trigger: RestoreTrigger,
    ) -> Result<RestoreBeforeScanAttacker, TamperError> {
        let region = find_region(&source, region_label)?;
        if offset >= region.length {
            return Err(TamperError::OffsetOutOfRange);
        }
        let state = Arc::new(Mutex::new(RestoreState {
            source,
            region,
            offset,
            xor_mask,
            tampered: false,
        }));
        let stop = Arc::new(AtomicBool::new(false));
        let (retamper_tx, retamper_rx) = channel::<()>();

        // tamper immediately unless the periodic window already covers all time
        let covers_everything =
            matches!(trigger, RestoreTrigger::Periodic(period) if window >= period);
        if !covers_everything {
            state.lock().unwrap().set_tampered(true);
        }

        let thread = {
            let state = state.clone();
            let stop = stop.clone();
            std::thread::Builder::new()
                .name("restore-attacker".to_string())
                .spawn(move || match trigger {
                    RestoreTrigger::OnChallengeObserved => {
                        while !stop.load(Ordering::SeqCst) {
                            match retamper_rx.recv_timeout(Duration::from_millis(20)) {
                                Ok(()) => {
                                    std::thread::sleep(window);
                                    if !stop.load(Ordering::SeqCst) {
                                        state.lock().unwrap().set_tampered(true);
                                    }
                                }
                                Err(std::sync::mpsc::RecvTimeoutError::Timeout) => {}
                                Err(_) => break,
                            }
                        }
                    }
                    RestoreTrigger::Periodic(period) => {
                        if covers_everything {
                            // restored 100% of the time: nothing to do
                            while !stop.load(Ordering::SeqCst) {
                                std::thread::sleep(Duration::from_millis(10));
                            }
                            return;
                        }
                        while !stop.load(Ordering::SeqCst) {
                            std::thread::sleep(period.saturating_sub(window));
                            if stop.load(Ordering::SeqCst) {
                                break;
                            }
                            state.lock().unwrap().set_tampered(false);
                            std::thread::sleep(window);
                            if stop.load(Ordering::SeqCst) {
                                break;
                            }
                            state.lock().unwrap().set_tampered(true);
                        }
                    }
                })
                .expect("spawn restore attacker")
        };

        Ok(RestoreBeforeScanAttacker {
            state,
            stop,
            retamper_tx,
            thread: Some(thread),
        })
    }

    /// Synchronous pre-delivery hook: restores the original bytes the moment
    /// a CHALLENGE is observed on the wire, then re-tampers after the window.
    pub fn challenge_hook(&self) -> Arc<dyn Fn(&Message) + Send + Sync> {
        let state = self.state.clone();
        let retamper = self.retamper_tx.clone();
        Arc::new(move |message: &Message| {
            if matches!(message, Message::Challenge { .. }) {
                state.lock().unwrap().set_tampered(false);
                let _ = retamper.send(());
            }
        })
    }

    pub fn currently_tampered(&self) -> bool {
        self.state.lock().unwrap().tampered
    }

    /// Stop the attacker and restore the original bytes.
    pub fn stop(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
        self.state.lock().unwrap().set_tampered(false);
    }
}

/// Suppress the next launch by pointing the host at a path that no longer
/// exists.
pub fn suppress_launch(config: &mut crate::host::HostConfig) {
    let _ = std::fs::remove_file(&config.ta_path);
}

/// Swap the target binary/image with a one-byte-tampered copy before launch.
/// Returns the original bytes so a harness can restore them.
pub fn swap_ta_binary(path: &std::path::Path, offset: usize, xor_mask: u8) -> std::io::Result<Vec<u8>> {
    let original = std::fs::read(path)?;
    let mut swapped = original.clone();
    if let Some(byte) = swapped.get_mut(offset) {
        *byte ^= xor_mask;
    }
    std::fs::write(path, swapped)?;
    Ok(original)
}

/// Capture frames of a given type from a tap recording.
pub fn frames_of_type(
    tape: &[crate::host::TapEvent],
    direction: crate::host::TapDirection,
    frame_type: crate::protocol::FrameType,
) -> Vec<Vec<u8>> {
    tape.iter()
        .filter(|e| e.direction == direction)
        .filter(|e| crate::protocol::peek_frame_type(&e.frame) == Some(frame_type))
        .map(|e| e.frame.clone())
        .collect()
}
