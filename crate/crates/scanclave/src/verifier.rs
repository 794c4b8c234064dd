//! The remote verifier: registers instances via quote validation, issues
//! challenges, validates reports, and commands target restarts.
//!
//! Report validation runs a fixed check order so rejection reasons are
//! deterministic:
//!
//! 1. instance known  → else REJECTED / UNKNOWN_INSTANCE
//! 2. signature valid over the canonical report bytes
//!                     → else REJECTED / BAD_SIGNATURE
//! 3. nonce not already consumed
//!                     → else REJECTED / REPLAYED_NONCE
//! 4. nonce outstanding for this instance and inside its TTL
//!                     → else REJECTED / UNKNOWN_NONCE, then the nonce is
//!                       consumed (moved from outstanding to used)
//! 5. scan freshness: `sign_time − scan_time ≤ max_staleness`
//! 6. target status OK
//! 7. every region verdict MATCH (and the pinned baseline digest, if set)
//!
//! A failure in 1–4 rejects the report outright; failures in 5–7 accumulate
//! into an UNTRUSTED decision carrying every applicable reason.

pub mod service;

use std::collections::{HashMap, HashSet};

use ed25519_dalek::{Signature, Verifier as _, VerifyingKey};

use crate::enclave::verify_quote;
use crate::protocol::{
    canonical_report_bytes, InstanceId, Message, Nonce, Quote, ReasonCode, Verdict,
    VerificationReport,
};
use crate::rng::Csprng;
use crate::scanner::{Digest32, RegionVerdict, TaStatus};
use crate::time::Clock;

/// Freshness and strictness knobs.
#[derive(Debug, Clone)]
pub struct VerifierPolicy {
    /// Max allowed `sign_time − scan_time` in a report.
    pub max_staleness_ms: u64,
    /// How long an issued nonce stays answerable.
    pub nonce_ttl_ms: u64,
    /// Pin of the expected baseline content digest
    /// ([`crate::scanner::Baseline::content_digest`]); detects a target that
    /// was swapped before launch and therefore baselines as self-consistent.
    pub expected_baseline: Option<Digest32>,
    /// Treat NEW executable regions as benign (JIT-style workloads).
    pub allow_new_regions: bool,
    /// Command a target restart on every UNTRUSTED decision.
    pub restart_on_untrusted: bool,
}

impl Default for VerifierPolicy {
    fn default() -> Self {
        VerifierPolicy {
            max_staleness_ms: 10_000,
            nonce_ttl_ms: 30_000,
            expected_baseline: None,
            allow_new_regions: false,
            restart_on_untrusted: true,
        }
    }
}

/// The verdict plus machine-readable grounds, mirrored into DECISION frames.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrustDecision {
    pub verdict: Verdict,
    pub reasons: Vec<ReasonCode>,
    pub restart_ta: bool,
}

impl TrustDecision {
    fn trusted() -> TrustDecision {
        TrustDecision {
            verdict: Verdict::Trusted,
            reasons: Vec::new(),
            restart_ta: false,
        }
    }

    fn rejected(reason: ReasonCode) -> TrustDecision {
        TrustDecision {
            verdict: Verdict::Rejected,
            reasons: vec![reason],
            restart_ta: false,
        }
    }
}

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum RegisterError {
    #[error("quote platform signature invalid")]
    BadQuoteSignature,
    #[error("enclave measurement not whitelisted")]
    UnknownMeasurement,
    /// The instance id is already bound to a different key: a possible
    /// substitution attack, refused.
    #[error("instance already registered with a different key")]
    DuplicateInstanceDifferentKey,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ChallengeIssueError {
    #[error("instance not registered")]
    UnknownInstance,
}

#[derive(Debug, Clone)]
struct KnownInstance {
    public_key: [u8; 32],
    #[allow(dead_code)]
    enclave_measurement: Digest32,
}

#[derive(Debug, Clone)]
struct OutstandingNonce {
    instance_id: InstanceId,
    issued_at_ms: u64,
}

/// Verifier-session state. Single-owner: one state per verifier, all
/// connection sessions serialized through it. `used_nonces` only grows
/// within a session.
pub struct VerifierState {
    known_instances: HashMap<InstanceId, KnownInstance>,
    outstanding: HashMap<[u8; 32], OutstandingNonce>,
    used_nonces: HashSet<[u8; 32]>,
    pub policy: VerifierPolicy,
}

impl VerifierState {
    pub fn new(policy: VerifierPolicy) -> VerifierState {
        VerifierState {
            known_instances: HashMap::new(),
            outstanding: HashMap::new(),
            used_nonces: HashSet::new(),
            policy,
        }
    }

    pub fn is_registered(&self, instance_id: &InstanceId) -> bool {
        self.known_instances.contains_key(instance_id)
    }

    pub fn registered_key(&self, instance_id: &InstanceId) -> Option<[u8; 32]> {
        self.known_instances.get(instance_id).map(|k| k.public_key)
    }

    pub fn outstanding_count(&self) -> usize {
        self.outstanding.len()
    }

    pub fn used_nonce_count(&self) -> usize {
        self.used_nonces.len()
    }

    /// Record an instance iff its quote verifies under the platform root and
    /// its measurement is whitelisted. Re-registration under the same key is
    /// idempotent.
    pub fn register_instance(
        &mut self,
        quote: &Quote,
        platform_root_pk: &[u8; 32],
        measurement_whitelist: &HashSet<Digest32>,
    ) -> Result<(), RegisterError> {
        if !verify_quote(quote, platform_root_pk) {
            return Err(RegisterError::BadQuoteSignature);
        }
        if !measurement_whitelist.contains(&quote.enclave_measurement) {
            return Err(RegisterError::UnknownMeasurement);
        }
        if let Some(existing) = self.known_instances.get(&quote.instance_id) {
            if existing.public_key != quote.public_key {
                return Err(RegisterError::DuplicateInstanceDifferentKey);
            }
            return Ok(());
        }
        self.known_instances.insert(
            quote.instance_id,
            KnownInstance {
                public_key: quote.public_key,
                enclave_measurement: quote.enclave_measurement,
            },
        );
        Ok(())
    }

    /// Issue a fresh challenge nonce and record it as outstanding.
    pub fn issue_challenge(
        &mut self,
        instance_id: &InstanceId,
        rng: &mut Csprng,
        clock: &dyn Clock,
    ) -> Result<Message, ChallengeIssueError> {
        if !self.is_registered(instance_id) {
            return Err(ChallengeIssueError::UnknownInstance);
        }
        let nonce = crate::protocol::generate_nonce(rng);
        self.outstanding.insert(
            nonce.0,
            OutstandingNonce {
                instance_id: *instance_id,
                issued_at_ms: clock.now_unix_ms(),
            },
        );
        Ok(Message::Challenge {
            instance_id: *instance_id,
            nonce,
        })
    }

    /// Validate a report. Total over adversarial input: every outcome is a
    /// decision, never an error. See the module docs for the check order.
    pub fn validate_report(&mut self, report: &VerificationReport, clock: &dyn Clock) -> TrustDecision {
        // (1) instance known
        let Some(known) = self.known_instances.get(&report.instance_id) else {
            return TrustDecision::rejected(ReasonCode::UnknownInstance);
        };

        // (2) signature over the canonical body under the registered key
        let signature_ok = VerifyingKey::from_bytes(&known.public_key)
            .map(|vk| {
                vk.verify(
                    &canonical_report_bytes(report),
                    &Signature::from_bytes(&report.signature),
                )
                .is_ok()
            })
            .unwrap_or(false);
        if !signature_ok {
            return TrustDecision::rejected(ReasonCode::BadSignature);
        }

        // (3) replayed nonce: consumed nonces reject ahead of the
        // outstanding lookup, which already dropped them
        let nonce_bytes = report.nonce.0;
        if self.used_nonces.contains(&nonce_bytes) {
            return TrustDecision::rejected(ReasonCode::ReplayedNonce);
        }

        // (4) outstanding for this instance and inside its TTL, then consume
        let now = clock.now_unix_ms();
        match self.outstanding.get(&nonce_bytes) {
            Some(entry)
                if entry.instance_id == report.instance_id
                    && now.saturating_sub(entry.issued_at_ms) <= self.policy.nonce_ttl_ms =>
            {
                self.outstanding.remove(&nonce_bytes);
                self.used_nonces.insert(nonce_bytes);
            }
            Some(entry) => {
                // expired or addressed to another instance; drop expired
                // entries so they cannot linger forever
                if now.saturating_sub(entry.issued_at_ms) > self.policy.nonce_ttl_ms {
                    self.outstanding.remove(&nonce_bytes);
                }
                return TrustDecision::rejected(ReasonCode::UnknownNonce);
            }
            None => return TrustDecision::rejected(ReasonCode::UnknownNonce),
        }

        // (5)–(7) accumulate integrity reasons
        let mut reasons = Vec::new();

        if report.sign_time_ms.saturating_sub(report.scan_time_ms) > self.policy.max_staleness_ms {
            reasons.push(ReasonCode::StaleScan);
        }

        match report.ta_status {
            TaStatus::Ok => {}
            TaStatus::TaNotFound => reasons.push(ReasonCode::TaNotFound),
            TaStatus::BridgeFailed => reasons.push(ReasonCode::BridgeFailed),
            TaStatus::NoScan => reasons.push(ReasonCode::NoScan),
        }

        let mut all_match = report.ta_status == TaStatus::Ok;
        for m in &report.measurements {
            match m.verdict {
                RegionVerdict::Match => {}
                RegionVerdict::Mismatch => {
                    all_match = false;
                    reasons.push(ReasonCode::Mismatch);
                }
                // an unreadable region vanished mid-read; the closest
                // machine-readable ground is a missing region
                RegionVerdict::Missing | RegionVerdict::Unreadable => {
                    all_match = false;
                    reasons.push(ReasonCode::Missing);
                }
                RegionVerdict::New => {
                    if !self.policy.allow_new_regions {
                        all_match = false;
                        reasons.push(ReasonCode::NewRegion);
                    }
                }
            }
        }

        if all_match {
            if let Some(pinned) = self.policy.expected_baseline {
                if reported_baseline_digest(report) != pinned {
                    reasons.push(ReasonCode::Mismatch);
                }
            }
        }

        if reasons.is_empty() {
            return TrustDecision::trusted();
        }
        reasons.sort();
        reasons.dedup();
        TrustDecision {
            verdict: Verdict::Untrusted,
            reasons,
            restart_ta: self.policy.restart_on_untrusted,
        }
    }
}

/// Reconstruct the baseline content digest from a report's observed
/// measurements, comparable against [`crate::scanner::Baseline::content_digest`].
fn reported_baseline_digest(report: &VerificationReport) -> Digest32 {
    use sha2::{Digest as _, Sha256};
    let mut hasher = Sha256::new();
    for m in &report.measurements {
        if matches!(m.verdict, RegionVerdict::Missing | RegionVerdict::Unreadable) {
            continue;
        }
        hasher.update((m.region.label.len() as u32).to_be_bytes());
        hasher.update(m.region.label.as_bytes());
        hasher.update(m.region.length.to_be_bytes());
        hasher.update(m.digest);
    }
    hasher.finalize().into()
}

/// Mirror a decision into a DECISION frame for the wire.
pub fn decision_message(decision: &TrustDecision, instance_id: InstanceId, nonce: Nonce) -> Message {
    Message::Decision {
        instance_id,
        nonce,
        verdict: decision.verdict,
        reasons: decision.reasons.clone(),
        restart_ta: decision.restart_ta,
    }
}

/// Convenience for harnesses: check a report signature against a raw key.
pub fn verify_report_signature(public_key: &[u8; 32], report: &VerificationReport) -> bool {
    VerifyingKey::from_bytes(public_key)
        .map(|vk| {
            vk.verify(
                &canonical_report_bytes(report),
                &Signature::from_bytes(&report.signature),
            )
            .is_ok()
        })
        .unwrap_or(false)
}
