//! The host agent runtime: wires the enclave executor, the scan timer, the
//! target supervisor, and the relay together.
//!
//! Three single-owner activities communicate by message passing:
//!
//! - the enclave executor (see [`crate::enclave`]),
//! - the host loop, owning the target handle and baseline, running scans on
//!   the enclave's schedule and executing restarts,
//! - the relay, owning the verifier socket.

use std::net::TcpStream;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{channel, Receiver, Sender, SyncSender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use super::relay::{relay_loop, RelayConfig, TapEvent};
use super::{launch_ta, restart_ta, HostConfig, TaHandle};
use crate::enclave::{boot_enclave, BootConfig, BootError, EnclaveHandle};
use crate::protocol::{encode_baseline, InstanceId, Message};
use crate::scanner::{capture_baseline, scan, Baseline, MemorySource, ScanResult, TaStatus};
use crate::time::{Clock, SystemClock};

/// Commands into the host loop (the target supervisor).
pub enum HostCommand {
    /// Execute a verifier-commanded restart: relaunch, rebaseline, rescan.
    Restart,
    /// Scan immediately and acknowledge; used by the challenge-triggered
    /// test mode and by harnesses needing a deterministic scan.
    ScanNow { ack: SyncSender<()> },
    /// Harness-only: point the scanner at a different source while keeping
    /// the baseline, modeling an adversary redirecting verification reads
    /// (stale-copy attack) or degrading the debug bridge. Cleared by the
    /// next restart.
    ReplaceScanSource(MemorySource),
    Shutdown,
}

/// Harness-facing knobs that are not part of the CLI surface.
#[derive(Clone, Default)]
pub struct AgentOptions {
    /// Skip the scan normally run right after baseline capture.
    pub skip_initial_scan: bool,
    /// Misconfigured challenge-triggered scanning (control experiment).
    pub scan_on_challenge: bool,
    /// Seeded scan schedule for reproducible runs; `None` is OS entropy.
    pub schedule_seed: Option<u64>,
    /// Wire tap for every frame in both directions.
    pub tap: Option<Sender<TapEvent>>,
    /// Synchronous pre-delivery hook on inbound messages.
    pub inbound_hook: Option<Arc<dyn Fn(&Message) + Send + Sync>>,
    /// Receives the running scan count after every stored scan.
    pub scan_notify: Option<Sender<u64>>,
}

impl std::fmt::Debug for AgentOptions {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AgentOptions")
            .field("skip_initial_scan", &self.skip_initial_scan)
            .field("scan_on_challenge", &self.scan_on_challenge)
            .field("tap", &self.tap.is_some())
            .field("inbound_hook", &self.inbound_hook.is_some())
            .field("scan_notify", &self.scan_notify.is_some())
            .finish()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error("enclave boot failed: {0}")]
    Boot(#[from] BootError),
    #[error("cannot reach verifier at {addr}: {source}")]
    Connect {
        addr: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Live view of the supervised target, shared with harnesses.
pub struct TaView {
    pub source: Option<MemorySource>,
    pub baseline: Option<Baseline>,
    pub child_pid: Option<u32>,
}

/// Running agent handle.
pub struct AgentHandle {
    instance_id: InstanceId,
    public_key: [u8; 32],
    enclave: EnclaveHandle,
    host_tx: Sender<HostCommand>,
    shutdown: Arc<AtomicBool>,
    stream: TcpStream,
    view: Arc<Mutex<TaView>>,
    threads: Vec<JoinHandle<()>>,
}

impl AgentHandle {
    pub fn instance_id(&self) -> InstanceId {
        self.instance_id
    }

    pub fn public_key(&self) -> [u8; 32] {
        self.public_key
    }

    pub fn enclave(&self) -> &EnclaveHandle {
        &self.enclave
    }

    /// Snapshot of the current target source/baseline (post-restart values
    /// replace them).
    pub fn with_ta_view<T>(&self, f: impl FnOnce(&TaView) -> T) -> T {
        f(&self.view.lock().unwrap())
    }

    /// Run one scan now, outside the schedule. Harness use only.
    pub fn scan_now(&self) {
        let (ack, ack_rx) = std::sync::mpsc::sync_channel(1);
        if self.host_tx.send(HostCommand::ScanNow { ack }).is_ok() {
            let _ = ack_rx.recv_timeout(Duration::from_secs(5));
        }
    }

    /// Harness-only: redirect scanning to another source (see
    /// [`HostCommand::ReplaceScanSource`]).
    pub fn replace_scan_source(&self, source: MemorySource) {
        let _ = self.host_tx.send(HostCommand::ReplaceScanSource(source));
    }

    pub fn shutdown(mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        let _ = self.host_tx.send(HostCommand::Shutdown);
        let _ = self.stream.shutdown(std::net::Shutdown::Both);
        self.enclave.shutdown();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

/// Boot the enclave, launch the target, connect to the verifier, and start
/// the three activity threads.
pub fn start_agent(config: HostConfig) -> Result<AgentHandle, AgentError> {
    let clock: Arc<dyn Clock> = Arc::new(SystemClock);
    std::fs::create_dir_all(&config.storage_dir)?;

    let seal_key_path = match std::env::var_os("SCANCLAVE_SEAL_KEY_PATH") {
        Some(path) => path.into(),
        None => config.seal_key_path.clone(),
    };

    let boot = BootConfig {
        storage_dir: config.storage_dir.clone(),
        seal_key_path,
        ephemeral_identity: config.ephemeral_identity,
        platform_key_path: config.platform_key_path.clone(),
        enclave_image: config.enclave_image.clone(),
        scan_min: config.scan_min,
        scan_max: config.scan_max,
        epoch_length: config.epoch_length,
        schedule_seed: config.options.schedule_seed,
    };
    let (enclave, enclave_thread, _outcome) = boot_enclave(&boot, clock.clone())?;

    // step (3): launch the target and capture its trust anchor
    let ta = match launch_ta(&config) {
        Ok(handle) => Some(handle),
        Err(e) => {
            log::warn!("target launch failed ({e}); scans will report TA_NOT_FOUND");
            None
        }
    };
    let baseline = ta.as_ref().and_then(|handle| {
        match capture_baseline(&handle.source(), &*clock) {
            Ok(baseline) => {
                let _ = std::fs::write(
                    config.storage_dir.join("baseline.bin"),
                    encode_baseline(&baseline),
                );
                Some(baseline)
            }
            Err(e) => {
                log::warn!("baseline capture failed ({e}); scans will report TA_NOT_FOUND");
                None
            }
        }
    });

    let view = Arc::new(Mutex::new(TaView {
        source: ta.as_ref().map(|t| t.source()),
        baseline: baseline.clone(),
        child_pid: ta.as_ref().and_then(|t| t.child_pid()),
    }));

    let stream = TcpStream::connect(&config.verifier_addr).map_err(|source| AgentError::Connect {
        addr: config.verifier_addr.clone(),
        source,
    })?;

    let shutdown = Arc::new(AtomicBool::new(false));
    let (host_tx, host_rx) = channel::<HostCommand>();

    let mut threads = Vec::new();

    // host loop: target supervision + schedule-driven scanning
    {
        let enclave = enclave.clone();
        let clock = clock.clone();
        let config = config.clone();
        let view = view.clone();
        let shutdown = shutdown.clone();
        threads.push(
            std::thread::Builder::new()
                .name("host-loop".to_string())
                .spawn(move || {
                    host_loop(ta, baseline, host_rx, enclave, clock, config, view, shutdown)
                })
                .expect("spawn host loop"),
        );
    }

    // relay: verifier socket <-> enclave entry points
    {
        let relay_stream = stream.try_clone()?;
        let enclave = enclave.clone();
        let host_tx = host_tx.clone();
        let relay_config = RelayConfig {
            fault_plan: config.fault_plan.clone(),
            tap: config.options.tap.clone(),
            inbound_hook: config.options.inbound_hook.clone(),
            scan_on_challenge: config.options.scan_on_challenge,
        };
        let shutdown = shutdown.clone();
        threads.push(
            std::thread::Builder::new()
                .name("relay".to_string())
                .spawn(move || {
                    if let Err(e) = relay_loop(relay_stream, enclave, host_tx, relay_config, shutdown)
                    {
                        log::warn!("relay ended: {e}");
                    }
                })
                .expect("spawn relay"),
        );
    }

    threads.push(enclave_thread);

    Ok(AgentHandle {
        instance_id: enclave.instance_id(),
        public_key: enclave.public_key(),
        enclave,
        host_tx,
        shutdown,
        stream,
        view,
        threads,
    })
}

#[allow(clippy::too_many_arguments)]
fn host_loop(
    mut ta: Option<TaHandle>,
    mut baseline: Option<Baseline>,
    commands: Receiver<HostCommand>,
    enclave: EnclaveHandle,
    clock: Arc<dyn Clock>,
    config: HostConfig,
    view: Arc<Mutex<TaView>>,
    shutdown: Arc<AtomicBool>,
) {
    let mut scan_count: u64 = 0;
    let mut source_override: Option<MemorySource> = None;

    if !config.options.skip_initial_scan {
        run_scan_once(&ta, &baseline, &source_override, &enclave, &clock, &config, &mut scan_count);
    }

    let far_future = Duration::from_secs(3600);
    let mut next_scan_in = if config.options.scan_on_challenge {
        far_future
    } else {
        enclave.next_scan_delay().unwrap_or(far_future)
    };
    let mut next_scan_at = Instant::now() + next_scan_in;

    while !shutdown.load(Ordering::SeqCst) {
        let timeout = next_scan_at.saturating_duration_since(Instant::now());
        match commands.recv_timeout(timeout) {
            Ok(HostCommand::Restart) => {
                // the old scan describes a dead instance; drop it first
                enclave.reset_for_restart();
                let relaunched = match ta.take() {
                    Some(old) => restart_ta(old, &config),
                    None => launch_ta(&config),
                };
                match relaunched {
                    Ok(handle) => {
                        match capture_baseline(&handle.source(), &*clock) {
                            Ok(fresh) => {
                                let _ = std::fs::write(
                                    config.storage_dir.join("baseline.bin"),
                                    encode_baseline(&fresh),
                                );
                                baseline = Some(fresh);
                            }
                            Err(e) => {
                                log::warn!("rebaseline failed: {e}");
                                baseline = None;
                            }
                        }
                        ta = Some(handle);
                    }
                    Err(e) => {
                        log::warn!("restart launch failed: {e}");
                        ta = None;
                        baseline = None;
                    }
                }
                source_override = None;
                {
                    let mut v = view.lock().unwrap();
                    v.source = ta.as_ref().map(|t| t.source());
                    v.baseline = baseline.clone();
                    v.child_pid = ta.as_ref().and_then(|t| t.child_pid());
                }
                run_scan_once(&ta, &baseline, &source_override, &enclave, &clock, &config, &mut scan_count);
                if !config.options.scan_on_challenge {
                    next_scan_in = enclave.next_scan_delay().unwrap_or(far_future);
                    next_scan_at = Instant::now() + next_scan_in;
                }
            }
            Ok(HostCommand::ScanNow { ack }) => {
                run_scan_once(&ta, &baseline, &source_override, &enclave, &clock, &config, &mut scan_count);
                let _ = ack.send(());
            }
            Ok(HostCommand::ReplaceScanSource(source)) => {
                source_override = Some(source);
            }
            Ok(HostCommand::Shutdown) => break,
            Err(std::sync::mpsc::RecvTimeoutError::Timeout) => {
                run_scan_once(&ta, &baseline, &source_override, &enclave, &clock, &config, &mut scan_count);
                next_scan_in = enclave.next_scan_delay().unwrap_or(far_future);
                next_scan_at = Instant::now() + next_scan_in;
            }
            Err(std::sync::mpsc::RecvTimeoutError::Disconnected) => break,
        }
    }
    if let Some(mut handle) = ta.take() {
        handle.terminate();
    }
}

fn run_scan_once(
    ta: &Option<TaHandle>,
    baseline: &Option<Baseline>,
    source_override: &Option<MemorySource>,
    enclave: &EnclaveHandle,
    clock: &Arc<dyn Clock>,
    config: &HostConfig,
    count: &mut u64,
) {
    let source = source_override
        .clone()
        .or_else(|| ta.as_ref().map(|t| t.source()));
    let result = match (source, baseline) {
        (Some(source), Some(baseline)) => scan(&source, baseline, &**clock),
        // an unlaunched or unbaselined target cannot be located
        _ => ScanResult {
            ta_status: TaStatus::TaNotFound,
            scan_time_ms: clock.now_unix_ms(),
            measurements: Vec::new(),
        },
    };
    enclave.store_scan(result);
    *count += 1;
    if let Some(notify) = &config.options.scan_notify {
        let _ = notify.send(*count);
    }
}

/// Resolve the seal key path the way the agent does: the environment
/// variable wins over the flag.
pub fn effective_seal_key_path(flag_value: &Path) -> std::path::PathBuf {
    match std::env::var_os("SCANCLAVE_SEAL_KEY_PATH") {
        Some(path) => path.into(),
        None => flag_value.to_path_buf(),
    }
}
