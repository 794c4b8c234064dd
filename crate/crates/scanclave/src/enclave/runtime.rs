//! Enclave state and entry points.
//!
//! One logical executor owns the [`Enclave`] and processes entry-point calls
//! strictly sequentially; the scan timer and the relay talk to it through an
//! [`EnclaveHandle`] over a message queue. Challenge handling never touches
//! the scanner: it reuses whatever scan the schedule last delivered, which
//! is the decoupling that defeats restore-before-scan attackers.

use std::sync::mpsc;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use ed25519_dalek::Signer as _;

use super::{EnclaveIdentity, ScanSchedule};
use crate::protocol::{canonical_report_bytes, Nonce, Quote, VerificationReport, SIGNATURE_LEN};
use crate::scanner::{ScanResult, TaStatus};
use crate::time::Clock;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ChallengeError {
    /// No scan has completed since launch; the wire answer is a signed
    /// NO_SCAN report so the verifier sees the condition authenticated.
    #[error("no completed scan available")]
    NoScanAvailable,
}

/// Ed25519 over the canonical report body.
pub fn sign_report(identity: &EnclaveIdentity, body: &[u8]) -> [u8; SIGNATURE_LEN] {
    identity.signing_key().sign(body).to_bytes()
}

/// Answer a challenge by binding the latest *completed* scan to the nonce.
///
/// Scanning is schedule-driven; this never triggers one. `sign_time` is
/// clamped to `scan_time` so the invariant `scan_time <= sign_time` holds
/// even across a clock step.
pub fn on_challenge(
    latest_scan: Option<&ScanResult>,
    nonce: &Nonce,
    identity: &EnclaveIdentity,
    clock: &dyn Clock,
) -> Result<VerificationReport, ChallengeError> {
    let scan = latest_scan.ok_or(ChallengeError::NoScanAvailable)?;
    let sign_time_ms = clock.now_unix_ms().max(scan.scan_time_ms);
    let mut report = VerificationReport {
        instance_id: identity.instance_id(),
        nonce: *nonce,
        scan_time_ms: scan.scan_time_ms,
        sign_time_ms,
        ta_status: scan.ta_status,
        measurements: scan.measurements.clone(),
        signature: [0u8; SIGNATURE_LEN],
    };
    report.signature = sign_report(identity, &canonical_report_bytes(&report));
    Ok(report)
}

/// The signed answer for a challenge that races the first scan.
fn no_scan_report(nonce: &Nonce, identity: &EnclaveIdentity, clock: &dyn Clock) -> VerificationReport {
    let now = clock.now_unix_ms();
    let mut report = VerificationReport {
        instance_id: identity.instance_id(),
        nonce: *nonce,
        scan_time_ms: now,
        sign_time_ms: now,
        ta_status: TaStatus::NoScan,
        measurements: Vec::new(),
        signature: [0u8; SIGNATURE_LEN],
    };
    report.signature = sign_report(identity, &canonical_report_bytes(&report));
    report
}

/// Enclave-held state: identity, provisioned quote, the latest completed
/// scan, and the scan schedule.
pub struct Enclave {
    identity: EnclaveIdentity,
    quote: Option<Quote>,
    latest_scan: Option<ScanResult>,
    schedule: ScanSchedule,
    clock: Arc<dyn Clock>,
}

impl Enclave {
    pub fn new(
        identity: EnclaveIdentity,
        quote: Option<Quote>,
        schedule: ScanSchedule,
        clock: Arc<dyn Clock>,
    ) -> Enclave {
        Enclave {
            identity,
            quote,
            latest_scan: None,
            schedule,
            clock,
        }
    }

    pub fn identity(&self) -> &EnclaveIdentity {
        &self.identity
    }

    pub fn announce(&self) -> Option<Quote> {
        self.quote.clone()
    }

    pub fn store_scan(&mut self, result: ScanResult) {
        self.latest_scan = Some(result);
    }

    pub fn latest_scan(&self) -> Option<&ScanResult> {
        self.latest_scan.as_ref()
    }

    pub fn next_scan_delay(&mut self) -> Duration {
        self.schedule.next_scan_delay()
    }

    /// Entry point: always answers, signing a NO_SCAN status when no scan
    /// has completed yet.
    pub fn handle_challenge(&mut self, nonce: &Nonce) -> VerificationReport {
        match on_challenge(self.latest_scan.as_ref(), nonce, &self.identity, &*self.clock) {
            Ok(report) => report,
            Err(ChallengeError::NoScanAvailable) => {
                no_scan_report(nonce, &self.identity, &*self.clock)
            }
        }
    }

    /// Drop state describing a dead target instance and start a fresh
    /// schedule epoch. Called around a target restart.
    pub fn reset_for_restart(&mut self) {
        self.latest_scan = None;
        self.schedule.reset();
    }
}

/// Typed calls into the enclave executor.
pub enum EnclaveCall {
    Challenge {
        nonce: Nonce,
        reply: mpsc::SyncSender<VerificationReport>,
    },
    StoreScan(ScanResult),
    NextScanDelay {
        reply: mpsc::SyncSender<Duration>,
    },
    Announce {
        reply: mpsc::SyncSender<Option<Quote>>,
    },
    ResetForRestart,
    Shutdown,
}

/// Cloneable handle submitting entry-point calls to the executor. All calls
/// are processed in submission order by a single thread.
#[derive(Clone)]
pub struct EnclaveHandle {
    tx: mpsc::Sender<EnclaveCall>,
    instance_id: [u8; 16],
    public_key: [u8; 32],
}

impl EnclaveHandle {
    pub fn instance_id(&self) -> [u8; 16] {
        self.instance_id
    }

    pub fn public_key(&self) -> [u8; 32] {
        self.public_key
    }

    /// `None` when the executor has shut down.
    pub fn challenge(&self, nonce: &Nonce) -> Option<VerificationReport> {
        let (reply, rx) = mpsc::sync_channel(1);
        self.tx
            .send(EnclaveCall::Challenge {
                nonce: *nonce,
                reply,
            })
            .ok()?;
        rx.recv().ok()
    }

    pub fn store_scan(&self, result: ScanResult) {
        let _ = self.tx.send(EnclaveCall::StoreScan(result));
    }

    pub fn next_scan_delay(&self) -> Option<Duration> {
        let (reply, rx) = mpsc::sync_channel(1);
        self.tx.send(EnclaveCall::NextScanDelay { reply }).ok()?;
        rx.recv().ok()
    }

    pub fn announce(&self) -> Option<Quote> {
        let (reply, rx) = mpsc::sync_channel(1);
        self.tx.send(EnclaveCall::Announce { reply }).ok()?;
        rx.recv().ok().flatten()
    }

    pub fn reset_for_restart(&self) {
        let _ = self.tx.send(EnclaveCall::ResetForRestart);
    }

    pub fn shutdown(&self) {
        let _ = self.tx.send(EnclaveCall::Shutdown);
    }
}

/// Start the sequential executor thread owning the enclave.
pub fn spawn_enclave(mut enclave: Enclave) -> (EnclaveHandle, JoinHandle<()>) {
    let (tx, rx) = mpsc::channel::<EnclaveCall>();
    let handle = EnclaveHandle {
        tx,
        instance_id: enclave.identity.instance_id(),
        public_key: enclave.identity.public_key(),
    };
    let join = std::thread::Builder::new()
        .name("enclave".to_string())
        .spawn(move || {
            while let Ok(call) = rx.recv() {
                match call {
                    EnclaveCall::Challenge { nonce, reply } => {
                        let _ = reply.send(enclave.handle_challenge(&nonce));
                    }
                    EnclaveCall::StoreScan(result) => enclave.store_scan(result),
                    EnclaveCall::NextScanDelay { reply } => {
                        let _ = reply.send(enclave.next_scan_delay());
                    }
                    EnclaveCall::Announce { reply } => {
                        let _ = reply.send(enclave.announce());
                    }
                    EnclaveCall::ResetForRestart => enclave.reset_for_restart(),
                    EnclaveCall::Shutdown => break,
                }
            }
        })
        .expect("spawn enclave executor");
    (handle, join)
}
