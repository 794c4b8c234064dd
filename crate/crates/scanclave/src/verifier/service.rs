//! Socket-facing verifier service.
//!
//! One listener accepts host connections; each session expects an
//! ATTEST_ANNOUNCE, then exchanges CHALLENGE / REPORT / DECISION frames.
//! Sessions share one [`VerifierState`] behind a lock, which serializes all
//! validation through a single owner. Challenges are issued either on a
//! jittered periodic timer or on explicit triggers from a test harness.

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{Read as _, Write as _};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use rand::RngExt as _;

use super::{RegisterError, TrustDecision, VerifierPolicy, VerifierState};
use crate::protocol::{
    decode_message, encode_message, DecodeError, ErrorCode, InstanceId, Message, Nonce,
    FrameBuffer,
};
use crate::rng::Csprng;
use crate::scanner::Digest32;
use crate::time::Clock;

/// How the verifier paces step-(4) challenges.
#[derive(Debug, Clone)]
pub enum ChallengeMode {
    /// Fire within a regular interval, re-jittered every round (±50% by
    /// default) so the cadence itself stays unpredictable.
    Periodic { period: Duration, jitter_frac: f64 },
    /// Fire only on [`VerifierServer::trigger_challenge_round`], for
    /// deterministic harness traces.
    Manual,
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub platform_root_pk: [u8; 32],
    pub measurement_whitelist: HashSet<Digest32>,
    pub policy: VerifierPolicy,
    pub challenge_mode: ChallengeMode,
    pub decision_log: Option<PathBuf>,
    /// Seed for the nonce CSPRNG; `None` draws from OS entropy.
    pub nonce_seed: Option<u64>,
}

/// One validated report, as logged and broadcast.
#[derive(Debug, Clone)]
pub struct DecisionRecord {
    pub at_ms: u64,
    pub instance_id: InstanceId,
    pub nonce: Nonce,
    pub decision: TrustDecision,
}

/// Ordered stream of observable verifier events for harnesses.
#[derive(Debug, Clone)]
pub enum ServerEvent {
    Registered {
        instance_id: InstanceId,
        public_key: [u8; 32],
    },
    RegistrationRefused(RegisterError),
    Decision(DecisionRecord),
}

struct Shared {
    state: Mutex<VerifierState>,
    rng: Mutex<Csprng>,
    clock: Arc<dyn Clock>,
    config: ServiceConfig,
    round: AtomicU64,
    shutdown: AtomicBool,
    events: Sender<ServerEvent>,
    log: Option<Mutex<File>>,
}

impl Shared {
    fn log_decision(&self, record: &DecisionRecord) {
        if let Some(log) = &self.log {
            let reasons = if record.decision.reasons.is_empty() {
                "-".to_string()
            } else {
                record
                    .decision
                    .reasons
                    .iter()
                    .map(|r| r.as_str())
                    .collect::<Vec<_>>()
                    .join(",")
            };
            let line = format!(
                "{}\t{}\t{}\t{}\t{}\n",
                record.at_ms,
                hex::encode(record.instance_id),
                hex::encode(record.nonce.0),
                record.decision.verdict.as_str(),
                reasons
            );
            if let Ok(mut file) = log.lock() {
                let _ = file.write_all(line.as_bytes());
                let _ = file.flush();
            }
        }
    }
}

/// Handle to a running verifier listener.
pub struct VerifierServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    listener_thread: Option<JoinHandle<()>>,
    session_threads: Arc<Mutex<Vec<JoinHandle<()>>>>,
}

impl VerifierServer {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Manual mode: have every session with a registered instance issue one
    /// challenge.
    pub fn trigger_challenge_round(&self) {
        self.shared.round.fetch_add(1, Ordering::SeqCst);
    }

    /// Direct access to the shared state, serialized by its lock.
    pub fn with_state<T>(&self, f: impl FnOnce(&mut VerifierState) -> T) -> T {
        f(&mut self.shared.state.lock().unwrap())
    }

    pub fn shutdown(mut self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        if let Some(t) = self.listener_thread.take() {
            let _ = t.join();
        }
        let mut sessions = self.session_threads.lock().unwrap();
        for t in sessions.drain(..) {
            let _ = t.join();
        }
    }
}

/// Bind and start the verifier. Returns the server handle plus the ordered
/// event stream.
pub fn start_verifier(
    listen: &str,
    config: ServiceConfig,
    clock: Arc<dyn Clock>,
) -> std::io::Result<(VerifierServer, Receiver<ServerEvent>)> {
    let listener = TcpListener::bind(listen)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;

    let log = match &config.decision_log {
        Some(path) => Some(Mutex::new(
            OpenOptions::new().create(true).append(true).open(path)?,
        )),
        None => None,
    };

    let (events_tx, events_rx) = channel();
    let rng = match config.nonce_seed {
        Some(seed) => crate::rng::seeded_rng(seed),
        None => crate::rng::os_rng(),
    };
    let shared = Arc::new(Shared {
        state: Mutex::new(VerifierState::new(config.policy.clone())),
        rng: Mutex::new(rng),
        clock,
        config,
        round: AtomicU64::new(0),
        shutdown: AtomicBool::new(false),
        events: events_tx,
        log,
    });

    let session_threads = Arc::new(Mutex::new(Vec::new()));
    let listener_thread = {
        let shared = shared.clone();
        let session_threads = session_threads.clone();
        std::thread::Builder::new()
            .name("verifier-listener".to_string())
            .spawn(move || {
                while !shared.shutdown.load(Ordering::SeqCst) {
                    match listener.accept() {
                        Ok((stream, _peer)) => {
                            let shared = shared.clone();
                            let handle = std::thread::Builder::new()
                                .name("verifier-session".to_string())
                                .spawn(move || run_session(stream, shared))
                                .expect("spawn session");
                            session_threads.lock().unwrap().push(handle);
                        }
                        Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                            std::thread::sleep(Duration::from_millis(5));
                        }
                        Err(_) => break,
                    }
                }
            })?
    };

    Ok((
        VerifierServer {
            addr,
            shared,
            listener_thread: Some(listener_thread),
            session_threads,
        },
        events_rx,
    ))
}

fn jittered(period: Duration, jitter_frac: f64, rng: &mut Csprng) -> Duration {
    if jitter_frac <= 0.0 {
        return period;
    }
    let lo = (1.0 - jitter_frac).max(0.05);
    let hi = 1.0 + jitter_frac;
    period.mul_f64(rng.random_range(lo..hi))
}

fn run_session(mut stream: TcpStream, shared: Arc<Shared>) {
    if stream.set_read_timeout(Some(Duration::from_millis(10))).is_err() {
        return;
    }
    let _ = stream.set_nodelay(true);

    let mut frames = FrameBuffer::new();
    let mut read_buf = [0u8; 8192];
    let mut session_instance: Option<InstanceId> = None;
    let mut seen_round = shared.round.load(Ordering::SeqCst);
    let mut last_challenge = Instant::now();
    let mut next_period = match shared.config.challenge_mode {
        ChallengeMode::Periodic { period, jitter_frac } => {
            Some(jittered(period, jitter_frac, &mut shared.rng.lock().unwrap()))
        }
        ChallengeMode::Manual => None,
    };

    'session: while !shared.shutdown.load(Ordering::SeqCst) {
        // challenge pacing
        if let Some(instance_id) = session_instance {
            let due = match (&shared.config.challenge_mode, next_period) {
                (ChallengeMode::Periodic { .. }, Some(period)) => {
                    last_challenge.elapsed() >= period
                }
                (ChallengeMode::Manual, _) => {
                    let round = shared.round.load(Ordering::SeqCst);
                    round > seen_round && {
                        seen_round = round;
                        true
                    }
                }
                _ => false,
            };
            if due {
                let challenge = {
                    let mut state = shared.state.lock().unwrap();
                    let mut rng = shared.rng.lock().unwrap();
                    state.issue_challenge(&instance_id, &mut rng, &*shared.clock)
                };
                if let Ok(message) = challenge {
                    if write(&mut stream, &message).is_err() {
                        break 'session;
                    }
                }
                last_challenge = Instant::now();
                if let ChallengeMode::Periodic { period, jitter_frac } =
                    shared.config.challenge_mode
                {
                    next_period =
                        Some(jittered(period, jitter_frac, &mut shared.rng.lock().unwrap()));
                }
            }
        }

        // frame intake
        match stream.read(&mut read_buf) {
            Ok(0) => break 'session,
            Ok(n) => frames.extend(&read_buf[..n]),
            Err(e)
                if e.kind() == std::io::ErrorKind::WouldBlock
                    || e.kind() == std::io::ErrorKind::TimedOut => {}
            Err(_) => break 'session,
        }

        loop {
            let frame = match frames.pop_frame() {
                Ok(Some(frame)) => frame,
                Ok(None) => break,
                Err(_) => {
                    // oversize declaration: the stream cannot be re-synced
                    let _ = write(
                        &mut stream,
                        &Message::Error {
                            code: ErrorCode::MalformedFrame,
                            detail: "frame exceeds payload cap".to_string(),
                        },
                    );
                    break 'session;
                }
            };
            match decode_message(&frame) {
                Ok(message) => {
                    if !handle_message(&mut stream, &shared, &mut session_instance, message) {
                        break 'session;
                    }
                }
                Err(e) => {
                    let fatal = matches!(e, DecodeError::OversizeFrame);
                    let _ = write(
                        &mut stream,
                        &Message::Error {
                            code: ErrorCode::MalformedFrame,
                            detail: e.to_string(),
                        },
                    );
                    if fatal {
                        break 'session;
                    }
                }
            }
        }
    }
}

fn write(stream: &mut TcpStream, message: &Message) -> std::io::Result<()> {
    let frame = encode_message(message);
    stream.write_all(&frame)?;
    stream.flush()
}

/// Returns false when the session should close.
fn handle_message(
    stream: &mut TcpStream,
    shared: &Shared,
    session_instance: &mut Option<InstanceId>,
    message: Message,
) -> bool {
    match message {
        Message::AttestAnnounce { quote } => {
            let result = shared.state.lock().unwrap().register_instance(
                &quote,
                &shared.config.platform_root_pk,
                &shared.config.measurement_whitelist,
            );
            match result {
                Ok(()) => {
                    *session_instance = Some(quote.instance_id);
                    let _ = shared.events.send(ServerEvent::Registered {
                        instance_id: quote.instance_id,
                        public_key: quote.public_key,
                    });
                    true
                }
                Err(e) => {
                    let code = match e {
                        RegisterError::BadQuoteSignature => ErrorCode::BadQuoteSignature,
                        RegisterError::UnknownMeasurement => ErrorCode::UnknownMeasurement,
                        RegisterError::DuplicateInstanceDifferentKey => {
                            ErrorCode::DuplicateInstanceDifferentKey
                        }
                    };
                    let _ = shared.events.send(ServerEvent::RegistrationRefused(e));
                    let _ = write(
                        stream,
                        &Message::Error {
                            code,
                            detail: String::new(),
                        },
                    );
                    true
                }
            }
        }
        Message::Report(report) => {
            let decision = shared
                .state
                .lock()
                .unwrap()
                .validate_report(&report, &*shared.clock);
            let record = DecisionRecord {
                at_ms: shared.clock.now_unix_ms(),
                instance_id: report.instance_id,
                nonce: report.nonce,
                decision: decision.clone(),
            };
            shared.log_decision(&record);
            let _ = shared.events.send(ServerEvent::Decision(record));
            write(
                stream,
                &super::decision_message(&decision, report.instance_id, report.nonce),
            )
            .is_ok()
        }
        Message::Challenge { .. } | Message::Decision { .. } => {
            let _ = write(
                stream,
                &Message::Error {
                    code: ErrorCode::UnexpectedMessage,
                    detail: "verifier-originated frame type".to_string(),
                },
            );
            true
        }
        Message::Error { code, detail } => {
            log::warn!("peer error frame: {code:?} {detail}");
            true
        }
    }
}
