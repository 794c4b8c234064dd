//! Declarative attack scenarios.
//!
//! A scenario file names a setup (target mode, policy, schedule, fault
//! plan), an optional pre-launch attack, a step script (challenge rounds,
//! waits, attacks), and the expected decision trace. The runner stages a
//! disposable copy of the target fixture, provisions keys and a quote,
//! brings up a verifier and an agent over loopback, executes the script,
//! and checks the decisions that actually happened against the expectation.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{channel, Receiver};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand_chacha::rand_core::Rng as _;
use serde::Deserialize;

use crate::enclave::{
    init_identity, measure_enclave_image, produce_quote, quote_path, sealed_identity_path,
    PlatformKey, SealKey,
};
use crate::host::{
    launch_ta, start_agent, AgentHandle, AgentOptions, FaultPlan, HostConfig, TaMode, TapEvent,
};
use crate::protocol::{ErrorCode, FrameType, Message, ReasonCode, Verdict};
use crate::rng::seeded_rng;
use crate::scanner::{InProcessSource, MemorySource, ProcSource, SnapshotSource};
use crate::time::{Clock, SystemClock};
use crate::verifier::service::{
    start_verifier, ChallengeMode, ServerEvent, ServiceConfig, VerifierServer,
};
use crate::verifier::VerifierPolicy;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackScenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub setup: Setup,
    /// Applied after staging but before the agent starts (launch-time
    /// attacks).
    #[serde(default)]
    pub pre_attack: Option<AttackAction>,
    #[serde(default)]
    pub steps: Vec<Step>,
    pub expect: Expectation,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Setup {
    /// plugin | child | snapshot
    pub ta_mode: String,
    /// Target image, relative to the scenario file.
    #[serde(default)]
    pub ta_image: Option<PathBuf>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub policy: PolicySetup,
    #[serde(default)]
    pub schedule: ScheduleSetup,
    #[serde(default)]
    pub skip_initial_scan: bool,
    /// Test-only misconfiguration: scans fire on challenges instead of the
    /// schedule.
    #[serde(default)]
    pub scan_on_challenge: bool,
    /// Extra synthetic executable regions for snapshot-mode scenarios.
    #[serde(default)]
    pub snapshot_extra_regions: u32,
    /// Inline fault-plan text applied by the relay.
    #[serde(default)]
    pub fault_plan: Option<String>,
}

fn default_seed() -> u64 {
    7
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct PolicySetup {
    pub max_staleness_ms: Option<u64>,
    pub nonce_ttl_ms: Option<u64>,
    #[serde(default)]
    pub allow_new_regions: bool,
    pub restart_on_untrusted: Option<bool>,
    /// Pin the pristine baseline digest in the verifier policy.
    #[serde(default)]
    pub pin_expected_baseline: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSetup {
    pub min_ms: u64,
    pub max_ms: u64,
    pub epoch_length: u32,
}

impl Default for ScheduleSetup {
    fn default() -> Self {
        ScheduleSetup {
            min_ms: 25,
            max_ms: 60,
            epoch_length: 8,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    /// Trigger challenge rounds, awaiting one decision each.
    Round(RoundStep),
    /// Trigger a challenge whose report never produces a decision (used
    /// with `REPORT drop` fault plans); waits for the report on the wire.
    ChallengeNoDecision {},
    WaitMs {
        ms: u64,
    },
    /// Wait until this many further scans have completed.
    WaitScans {
        count: u64,
    },
    /// Deterministic harness-triggered scan.
    ScanNow {},
    Attack {
        action: AttackAction,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundStep {
    #[serde(default = "default_round_count")]
    pub count: u32,
}

fn default_round_count() -> u32 {
    1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum AttackAction {
    /// XOR one byte of the live target image.
    Tamper {
        offset: u64,
        xor: u8,
        region_label: Option<String>,
    },
    /// Kill the child target out from under the host.
    KillTa {},
    /// Delete the target binary/image so the (re)launch cannot happen.
    RemoveTaBinary {},
    /// Replace the target binary/image with a one-byte-modified copy.
    SwapTaBinary { offset: usize, xor: u8 },
    /// Re-send the most recently captured REPORT frame verbatim.
    ReplayLastReport {
        #[serde(default = "default_round_count")]
        times: u32,
    },
    /// Self-signed quote announce plus forged reports.
    Impersonate {},
    /// Persistent tamper that restores the original bytes around
    /// anticipated verifications.
    RestoreBeforeScan {
        offset: u64,
        xor: u8,
        window_ms: u64,
        /// on_challenge | periodic
        trigger: String,
        period_ms: Option<u64>,
    },
    /// Map a new executable region into the target (plugin mode).
    InjectRegion { label: String, length: u64 },
    /// Unmap an executable region (plugin or snapshot mode).
    RemoveRegion { label: String },
    /// Degrade the debug bridge so scans report BRIDGE_FAILED.
    RevokeBridge {},
    /// Point the scanner at a pristine dump while the live target changes:
    /// the clean-copy redirection blind spot, demonstrated.
    RedirectScannerToStaleSnapshot {},
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expectation {
    /// Exact ordered decision trace.
    #[serde(default)]
    pub trace: Option<Vec<ExpectedDecision>>,
    /// Bounds on UNTRUSTED decisions for stochastic scenarios.
    pub min_untrusted: Option<u32>,
    pub max_untrusted: Option<u32>,
    /// The self-signed announce must have been refused.
    pub announce_rejected: Option<bool>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpectedDecision {
    pub verdict: String,
    #[serde(default)]
    pub reasons: Vec<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("setup failed: {0}")]
    Setup(String),
    #[error("step failed: {0}")]
    Step(String),
    #[error("expectation failed: {0}")]
    Expectation(String),
}

/// Everything observable a scenario produced.
#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    pub name: String,
    pub decisions: Vec<(Verdict, Vec<ReasonCode>)>,
    pub announce_error: Option<ErrorCode>,
}

impl ScenarioOutcome {
    pub fn untrusted_count(&self) -> usize {
        self.decisions
            .iter()
            .filter(|(v, _)| *v == Verdict::Untrusted)
            .count()
    }

    pub fn reasons_covered(&self) -> HashSet<ReasonCode> {
        self.decisions
            .iter()
            .flat_map(|(_, reasons)| reasons.iter().copied())
            .collect()
    }

    pub fn verdicts_covered(&self) -> HashSet<Verdict> {
        self.decisions.iter().map(|(v, _)| *v).collect()
    }
}

pub fn load_scenario(path: &Path) -> Result<AttackScenario, ScenarioError> {
    let text = std::fs::read_to_string(path)?;
    Ok(toml::from_str(&text)?)
}

/// Load and run a scenario file; relative `ta_image` paths resolve against
/// the file's directory.
pub fn run_scenario_file(path: &Path) -> Result<ScenarioOutcome, ScenarioError> {
    let scenario = load_scenario(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    run_scenario(&scenario, base)
}

struct Runner {
    staged_ta: PathBuf,
    agent: Option<AgentHandle>,
    server: Option<VerifierServer>,
    events: Receiver<ServerEvent>,
    tap_rx: Receiver<TapEvent>,
    tape: Vec<TapEvent>,
    scan_rx: Receiver<u64>,
    scans_seen: u64,
    decisions: Vec<(Verdict, Vec<ReasonCode>)>,
    announce_error: Option<ErrorCode>,
    hook_slot: Arc<Mutex<Option<Arc<dyn Fn(&Message) + Send + Sync>>>>,
    attacker: Option<crate::adversary::RestoreBeforeScanAttacker>,
    scratch: PathBuf,
    seed: u64,
}

impl Runner {
    fn drain_tap(&mut self) {
        while let Ok(event) = self.tap_rx.try_recv() {
            self.tape.push(event);
        }
    }

    fn next_decision(&mut self, timeout: Duration) -> Result<(), ScenarioError> {
        let deadline = Instant::now() + timeout;
        loop {
            let remaining = deadline.saturating_duration_since(Instant::now());
            match self.events.recv_timeout(remaining) {
                Ok(ServerEvent::Decision(record)) => {
                    self.decisions
                        .push((record.decision.verdict, record.decision.reasons));
                    return Ok(());
                }
                Ok(_) => continue,
                Err(_) => return Err(ScenarioError::Step("no decision arrived".to_string())),
            }
        }
    }

    fn wait_scans(&mut self, count: u64) -> Result<(), ScenarioError> {
        let target = self.scans_seen + count;
        let deadline = Instant::now() + Duration::from_secs(20);
        while self.scans_seen < target {
            let remaining = deadline.saturating_duration_since(Instant::now());
            match self.scan_rx.recv_timeout(remaining) {
                Ok(n) => self.scans_seen = n,
                Err(_) => {
                    return Err(ScenarioError::Step(format!(
                        "waited for scan {target}, saw {}",
                        self.scans_seen
                    )))
                }
            }
        }
        Ok(())
    }

    fn agent(&self) -> &AgentHandle {
        self.agent.as_ref().expect("agent running")
    }

    fn current_source(&self) -> Result<MemorySource, ScenarioError> {
        self.agent()
            .with_ta_view(|v| v.source.clone())
            .ok_or_else(|| ScenarioError::Step("target has no live source".to_string()))
    }

    fn verifier_addr(&self) -> String {
        self.server
            .as_ref()
            .expect("server running")
            .local_addr()
            .to_string()
    }
}

pub fn run_scenario(
    scenario: &AttackScenario,
    base_dir: &Path,
) -> Result<ScenarioOutcome, ScenarioError> {
    let ta_mode = TaMode::parse(&scenario.setup.ta_mode)
        .ok_or_else(|| ScenarioError::Setup(format!("bad ta_mode {:?}", scenario.setup.ta_mode)))?;
    let scratch_dir = tempfile::tempdir().map_err(ScenarioError::Io)?;
    let scratch = scratch_dir.path().to_path_buf();
    let seed = scenario.setup.seed;
    let mut rng = seeded_rng(seed);

    // stage a disposable target so attacks on it never touch the fixture
    let image_source = match &scenario.setup.ta_image {
        Some(rel) if rel.is_absolute() => rel.clone(),
        Some(rel) => base_dir.join(rel),
        None => base_dir.join("../fixtures/ta_image.bin"),
    };
    let image_bytes = std::fs::read(&image_source)
        .map_err(|e| ScenarioError::Setup(format!("target image {image_source:?}: {e}")))?;

    let staged_ta = match ta_mode {
        TaMode::Plugin | TaMode::Child => {
            let staged = scratch.join("ta.bin");
            std::fs::write(&staged, &image_bytes)?;
            #[cfg(unix)]
            {
                use std::os::unix::fs::PermissionsExt;
                std::fs::set_permissions(&staged, std::fs::Permissions::from_mode(0o755))?;
            }
            staged
        }
        TaMode::Snapshot => {
            let snap = scratch.join("snapshot");
            std::fs::create_dir_all(&snap)?;
            let mut maps = format!("400000-{:x} r-xp ta_image\n", 0x40_0000 + image_bytes.len());
            std::fs::write(snap.join("400000.bin"), &image_bytes)?;
            for i in 0..scenario.setup.snapshot_extra_regions {
                let start = 0x50_0000 + u64::from(i) * 0x1000;
                let mut bytes = vec![0u8; 256];
                rng.fill_bytes(&mut bytes);
                std::fs::write(snap.join(format!("{start:x}.bin")), &bytes)?;
                maps.push_str(&format!("{start:x}-{:x} r-xp extra_{i}\n", start + 256));
            }
            std::fs::write(snap.join("maps.txt"), maps)?;
            snap
        }
    };

    // provision: seal key, platform key, identity, quote
    let storage = scratch.join("storage");
    std::fs::create_dir_all(&storage)?;
    let seal_key_path = scratch.join("seal.key");
    let mut seal_key_bytes = [0u8; 32];
    rng.fill_bytes(&mut seal_key_bytes);
    std::fs::write(&seal_key_path, seal_key_bytes)?;

    let platform = PlatformKey::generate(&mut rng);
    let enclave_image =
        std::env::current_exe().map_err(|e| ScenarioError::Setup(e.to_string()))?;
    let measurement = measure_enclave_image(&enclave_image)
        .map_err(|e| ScenarioError::Setup(e.to_string()))?;
    {
        let seal_key = SealKey::load(&seal_key_path).map_err(ScenarioError::Io)?;
        let (identity, _) = init_identity(&sealed_identity_path(&storage), &seal_key, &mut rng)
            .map_err(|e| ScenarioError::Setup(e.to_string()))?;
        let quote = produce_quote(&identity, &measurement, &platform);
        std::fs::write(quote_path(&storage), quote.to_bytes())?;
    }

    let fault_plan = match &scenario.setup.fault_plan {
        Some(text) => Some(
            FaultPlan::parse(text).map_err(|e| ScenarioError::Setup(format!("fault plan: {e}")))?,
        ),
        None => None,
    };

    let (tap_tx, tap_rx) = channel();
    let (scan_tx, scan_rx) = channel();
    let hook_slot: Arc<Mutex<Option<Arc<dyn Fn(&Message) + Send + Sync>>>> =
        Arc::new(Mutex::new(None));
    let hook = {
        let slot = hook_slot.clone();
        Arc::new(move |message: &Message| {
            if let Some(inner) = slot.lock().unwrap().as_ref() {
                inner(message);
            }
        })
    };

    let mut config = HostConfig {
        ta_mode,
        ta_path: staged_ta.clone(),
        verifier_addr: String::new(), // filled once the server is up
        storage_dir: storage.clone(),
        seal_key_path,
        scan_min: Duration::from_millis(scenario.setup.schedule.min_ms),
        scan_max: Duration::from_millis(scenario.setup.schedule.max_ms),
        epoch_length: scenario.setup.schedule.epoch_length,
        ephemeral_identity: false,
        platform_key_path: None,
        enclave_image: None,
        fault_plan,
        options: AgentOptions {
            skip_initial_scan: scenario.setup.skip_initial_scan,
            scan_on_challenge: scenario.setup.scan_on_challenge,
            schedule_seed: Some(seed.wrapping_add(1)),
            tap: Some(tap_tx),
            inbound_hook: Some(hook),
            scan_notify: Some(scan_tx),
        },
    };

    // verifier policy, including the optional pristine-baseline pin
    let mut policy = VerifierPolicy::default();
    if let Some(ms) = scenario.setup.policy.max_staleness_ms {
        policy.max_staleness_ms = ms;
    }
    if let Some(ms) = scenario.setup.policy.nonce_ttl_ms {
        policy.nonce_ttl_ms = ms;
    }
    policy.allow_new_regions = scenario.setup.policy.allow_new_regions;
    if let Some(flag) = scenario.setup.policy.restart_on_untrusted {
        policy.restart_on_untrusted = flag;
    }
    if scenario.setup.policy.pin_expected_baseline {
        let pristine = launch_ta(&config)
            .map_err(|e| ScenarioError::Setup(format!("pin baseline launch: {e}")))?;
        let baseline =
            crate::scanner::capture_baseline(&pristine.source(), &SystemClock)
                .map_err(|e| ScenarioError::Setup(format!("pin baseline capture: {e}")))?;
        policy.expected_baseline = Some(baseline.content_digest());
    }

    let clock: Arc<dyn Clock> = Arc::new(SystemClock);
    let (server, events) = start_verifier(
        "127.0.0.1:0",
        ServiceConfig {
            platform_root_pk: platform.public_key(),
            measurement_whitelist: HashSet::from([measurement]),
            policy,
            challenge_mode: ChallengeMode::Manual,
            decision_log: Some(scratch.join("decisions.log")),
            nonce_seed: Some(seed.wrapping_add(2)),
        },
        clock,
    )
    .map_err(ScenarioError::Io)?;
    config.verifier_addr = server.local_addr().to_string();

    // launch-time attacks strike before the agent exists
    if let Some(action) = &scenario.pre_attack {
        apply_pre_attack(action, &staged_ta)?;
    }

    let agent = start_agent(config).map_err(|e| ScenarioError::Setup(e.to_string()))?;

    let mut runner = Runner {
        staged_ta,
        agent: Some(agent),
        server: Some(server),
        events,
        tap_rx,
        tape: Vec::new(),
        scan_rx,
        scans_seen: 0,
        decisions: Vec::new(),
        announce_error: None,
        hook_slot,
        attacker: None,
        scratch,
        seed,
    };

    // registration gate: every scripted step assumes a registered instance
    let deadline = Instant::now() + Duration::from_secs(10);
    loop {
        let remaining = deadline.saturating_duration_since(Instant::now());
        match runner.events.recv_timeout(remaining) {
            Ok(ServerEvent::Registered { .. }) => break,
            Ok(_) => continue,
            Err(_) => {
                return Err(ScenarioError::Setup(
                    "agent never registered with the verifier".to_string(),
                ))
            }
        }
    }
    if !scenario.setup.skip_initial_scan {
        runner.wait_scans(1)?;
    }

    let result = run_steps(scenario, &mut runner);

    if let Some(attacker) = runner.attacker.take() {
        attacker.stop();
    }
    if let Some(agent) = runner.agent.take() {
        agent.shutdown();
    }
    if let Some(server) = runner.server.take() {
        server.shutdown();
    }
    result?;

    let outcome = ScenarioOutcome {
        name: scenario.name.clone(),
        decisions: runner.decisions,
        announce_error: runner.announce_error,
    };
    check_expectation(&scenario.expect, &outcome)?;
    Ok(outcome)
}

fn apply_pre_attack(action: &AttackAction, staged_ta: &Path) -> Result<(), ScenarioError> {
    match action {
        AttackAction::RemoveTaBinary {} => {
            std::fs::remove_file(staged_ta)?;
            Ok(())
        }
        AttackAction::SwapTaBinary { offset, xor } => {
            crate::adversary::swap_ta_binary(staged_ta, *offset, *xor)?;
            Ok(())
        }
        other => Err(ScenarioError::Setup(format!(
            "unsupported pre-launch attack: {other:?}"
        ))),
    }
}

fn run_steps(scenario: &AttackScenario, runner: &mut Runner) -> Result<(), ScenarioError> {
    for step in &scenario.steps {
        match step {
            Step::Round(round) => {
                for _ in 0..round.count {
                    runner.server.as_ref().unwrap().trigger_challenge_round();
                    runner.next_decision(Duration::from_secs(15))?;
                }
            }
            Step::ChallengeNoDecision {} => {
                runner.drain_tap();
                let before = crate::adversary::frames_of_type(
                    &runner.tape,
                    crate::host::TapDirection::ToVerifier,
                    FrameType::Report,
                )
                .len();
                runner.server.as_ref().unwrap().trigger_challenge_round();
                let deadline = Instant::now() + Duration::from_secs(10);
                loop {
                    runner.drain_tap();
                    let now = crate::adversary::frames_of_type(
                        &runner.tape,
                        crate::host::TapDirection::ToVerifier,
                        FrameType::Report,
                    )
                    .len();
                    if now > before {
                        break;
                    }
                    if Instant::now() > deadline {
                        return Err(ScenarioError::Step(
                            "challenged report never hit the wire".to_string(),
                        ));
                    }
                    std::thread::sleep(Duration::from_millis(5));
                }
            }
            Step::WaitMs { ms } => std::thread::sleep(Duration::from_millis(*ms)),
            Step::WaitScans { count } => runner.wait_scans(*count)?,
            Step::ScanNow {} => runner.agent().scan_now(),
            Step::Attack { action } => apply_attack(action, runner)?,
        }
    }
    Ok(())
}

fn apply_attack(action: &AttackAction, runner: &mut Runner) -> Result<(), ScenarioError> {
    match action {
        AttackAction::Tamper {
            offset,
            xor,
            region_label,
        } => {
            let source = runner.current_source()?;
            crate::adversary::tamper_memory(&source, region_label.as_deref(), *offset, *xor)
                .map_err(|e| ScenarioError::Step(format!("tamper: {e}")))
        }
        AttackAction::KillTa {} => {
            let pid = runner
                .agent()
                .with_ta_view(|v| v.child_pid)
                .ok_or_else(|| ScenarioError::Step("no child pid to kill".to_string()))?;
            #[cfg(unix)]
            crate::adversary::kill_process(pid);
            Ok(())
        }
        AttackAction::RemoveTaBinary {} => {
            std::fs::remove_file(&runner.staged_ta)?;
            Ok(())
        }
        AttackAction::SwapTaBinary { offset, xor } => {
            crate::adversary::swap_ta_binary(&runner.staged_ta, *offset, *xor)?;
            Ok(())
        }
        AttackAction::ReplayLastReport { times } => {
            runner.drain_tap();
            let reports = crate::adversary::frames_of_type(
                &runner.tape,
                crate::host::TapDirection::ToVerifier,
                FrameType::Report,
            );
            let frame = reports
                .last()
                .ok_or_else(|| ScenarioError::Step("no captured report".to_string()))?
                .clone();
            let frames = vec![frame; *times as usize];
            crate::adversary::replay_captured_report(&frames, &runner.verifier_addr())
                .map_err(|e| ScenarioError::Step(format!("replay: {e}")))?;
            for _ in 0..*times {
                runner.next_decision(Duration::from_secs(10))?;
            }
            Ok(())
        }
        AttackAction::Impersonate {} => {
            let target = runner.agent().instance_id();
            let outcome = crate::adversary::impersonate_instance(
                &runner.verifier_addr(),
                Some(target),
                runner.seed.wrapping_add(9),
            )
            .map_err(|e| ScenarioError::Step(format!("impersonate: {e}")))?;
            runner.announce_error = outcome.announce_error;
            // two forged reports, two decisions
            runner.next_decision(Duration::from_secs(10))?;
            runner.next_decision(Duration::from_secs(10))?;
            Ok(())
        }
        AttackAction::RestoreBeforeScan {
            offset,
            xor,
            window_ms,
            trigger,
            period_ms,
        } => {
            let source = runner.current_source()?;
            let trigger = match trigger.as_str() {
                "on_challenge" => crate::adversary::RestoreTrigger::OnChallengeObserved,
                "periodic" => crate::adversary::RestoreTrigger::Periodic(Duration::from_millis(
                    period_ms.unwrap_or(100),
                )),
                other => {
                    return Err(ScenarioError::Step(format!("bad trigger {other:?}")));
                }
            };
            let attacker = crate::adversary::RestoreBeforeScanAttacker::start(
                source,
                None,
                *offset,
                *xor,
                Duration::from_millis(*window_ms),
                trigger,
            )
            .map_err(|e| ScenarioError::Step(format!("restore attacker: {e}")))?;
            if matches!(trigger, crate::adversary::RestoreTrigger::OnChallengeObserved) {
                *runner.hook_slot.lock().unwrap() = Some(attacker.challenge_hook());
            }
            runner.attacker = Some(attacker);
            Ok(())
        }
        AttackAction::InjectRegion { label, length } => {
            let source = runner.current_source()?;
            let MemorySource::InProcess(inner) = source else {
                return Err(ScenarioError::Step(
                    "inject_region needs a plugin-mode target".to_string(),
                ));
            };
            inject_region(&inner, label, *length, runner.seed);
            Ok(())
        }
        AttackAction::RemoveRegion { label } => {
            let source = runner.current_source()?;
            match source {
                MemorySource::InProcess(inner) => {
                    if !inner.remove_region(label) {
                        return Err(ScenarioError::Step(format!("no region {label:?}")));
                    }
                    Ok(())
                }
                MemorySource::Snapshot(snap) => {
                    remove_snapshot_region(snap.dir(), label)
                        .map_err(|e| ScenarioError::Step(format!("remove region: {e}")))
                }
                MemorySource::External(_) => Err(ScenarioError::Step(
                    "remove_region needs plugin or snapshot mode".to_string(),
                )),
            }
        }
        AttackAction::RevokeBridge {} => {
            let pid = runner
                .agent()
                .with_ta_view(|v| v.child_pid)
                .ok_or_else(|| ScenarioError::Step("no child to revoke".to_string()))?;
            let label = runner.current_source()?.ta_label().to_string();
            // a proc tree whose maps node refuses reads stands in for the
            // OS withdrawing debug access
            let fake = runner.scratch.join("fake_proc");
            let pid_dir = fake.join(pid.to_string());
            std::fs::create_dir_all(pid_dir.join("maps"))?;
            let degraded = MemorySource::External(ProcSource::with_proc_root(pid, label, fake));
            runner.agent().replace_scan_source(degraded);
            Ok(())
        }
        AttackAction::RedirectScannerToStaleSnapshot {} => {
            let source = runner.current_source()?;
            let stale = runner.scratch.join("stale_snapshot");
            crate::scanner::dump_snapshot(&source, &stale)
                .map_err(|e| ScenarioError::Step(format!("dump: {e}")))?;
            let label = source.ta_label().to_string();
            let redirect = MemorySource::Snapshot(SnapshotSource::open(stale, label));
            runner.agent().replace_scan_source(redirect);
            Ok(())
        }
    }
}

fn inject_region(source: &InProcessSource, label: &str, length: u64, seed: u64) {
    let mut rng = seeded_rng(seed.wrapping_add(3));
    let mut bytes = vec![0u8; length as usize];
    rng.fill_bytes(&mut bytes);
    source.add_region(
        0xF000_0000,
        crate::scanner::Perms(*b"r-xp"),
        label.to_string(),
        bytes,
    );
}

fn remove_snapshot_region(dir: &Path, label: &str) -> std::io::Result<()> {
    let maps_path = dir.join("maps.txt");
    let text = std::fs::read_to_string(&maps_path)?;
    let kept: Vec<&str> = text
        .lines()
        .filter(|line| {
            crate::scanner::parse_maps_line(line)
                .map(|r| r.label != label)
                .unwrap_or(true)
        })
        .collect();
    if kept.len() == text.lines().count() {
        return Err(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no region {label:?} in snapshot"),
        ));
    }
    std::fs::write(&maps_path, kept.join("\n") + "\n")
}

fn check_expectation(expect: &Expectation, outcome: &ScenarioOutcome) -> Result<(), ScenarioError> {
    if let Some(trace) = &expect.trace {
        let got: Vec<(String, Vec<String>)> = outcome
            .decisions
            .iter()
            .map(|(v, reasons)| {
                (
                    v.as_str().to_string(),
                    reasons.iter().map(|r| r.as_str().to_string()).collect(),
                )
            })
            .collect();
        let want: Vec<(String, Vec<String>)> = trace
            .iter()
            .map(|d| (d.verdict.clone(), d.reasons.clone()))
            .collect();
        if got != want {
            return Err(ScenarioError::Expectation(format!(
                "trace mismatch\n  expected: {want:?}\n  got:      {got:?}"
            )));
        }
    }
    if let Some(min) = expect.min_untrusted {
        if outcome.untrusted_count() < min as usize {
            return Err(ScenarioError::Expectation(format!(
                "expected at least {min} UNTRUSTED decisions, got {}",
                outcome.untrusted_count()
            )));
        }
    }
    if let Some(max) = expect.max_untrusted {
        if outcome.untrusted_count() > max as usize {
            return Err(ScenarioError::Expectation(format!(
                "expected at most {max} UNTRUSTED decisions, got {}",
                outcome.untrusted_count()
            )));
        }
    }
    if let Some(refused) = expect.announce_rejected {
        let was_refused = outcome.announce_error.is_some();
        if was_refused != refused {
            return Err(ScenarioError::Expectation(format!(
                "announce_rejected expected {refused}, got {was_refused} ({:?})",
                outcome.announce_error
            )));
        }
    }
    Ok(())
}
