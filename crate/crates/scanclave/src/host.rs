//! The untrusted host application.
//!
//! Launches the target application, captures its baseline, relays frames
//! between the verifier socket and the enclave entry points, and executes
//! restart commands. Deliberately unverified: under a fault plan the relay
//! misbehaves exactly as an adversarial network would, and nothing in this
//! module ever holds enclave key material — it sees opaque frames, paths,
//! and entry-point handles only.

pub mod agent;
pub mod relay;

pub use agent::{start_agent, AgentError, AgentHandle, AgentOptions, HostCommand};
pub use relay::{
    apply_fault_plan, FaultAction, FaultPlan, FaultPlanParseError, FaultRule, RelayConfig,
    TapDirection, TapEvent,
};

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Child, Command};
use std::time::{Duration, Instant};

use crate::scanner::{InProcessSource, MemorySource, ProcSource, SnapshotSource};

/// How the target application is hosted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaMode {
    /// A file image loaded into the agent's own address space.
    Plugin,
    /// A child process observed through the debug bridge.
    Child,
    /// A snapshot directory standing in for live memory.
    Snapshot,
}

impl TaMode {
    pub fn parse(s: &str) -> Option<TaMode> {
        match s {
            "plugin" => Some(TaMode::Plugin),
            "child" => Some(TaMode::Child),
            "snapshot" => Some(TaMode::Snapshot),
            _ => None,
        }
    }
}

/// Host configuration, mirroring the CLI surface.
#[derive(Debug, Clone)]
pub struct HostConfig {
    pub ta_mode: TaMode,
    pub ta_path: PathBuf,
    pub verifier_addr: String,
    pub storage_dir: PathBuf,
    pub seal_key_path: PathBuf,
    pub scan_min: Duration,
    pub scan_max: Duration,
    pub epoch_length: u32,
    pub ephemeral_identity: bool,
    /// Simulated quoting facility, used transiently in ephemeral mode.
    pub platform_key_path: Option<PathBuf>,
    /// Image whose measurement goes into an ephemeral quote.
    pub enclave_image: Option<PathBuf>,
    pub fault_plan: Option<FaultPlan>,
    pub options: AgentOptions,
}

#[derive(Debug, thiserror::Error)]
pub enum LaunchError {
    #[error("target launch failed: {0}")]
    LaunchFailed(String),
}

/// The one live target instance a host supervises.
#[derive(Debug)]
pub enum TaHandle {
    Plugin {
        source: InProcessSource,
        image: PathBuf,
    },
    Child {
        child: Child,
        label: String,
    },
    Snapshot {
        work_dir: PathBuf,
        label: String,
    },
}

impl TaHandle {
    pub fn label(&self) -> String {
        match self {
            TaHandle::Plugin { image, .. } => image.display().to_string(),
            TaHandle::Child { label, .. } => label.clone(),
            TaHandle::Snapshot { label, .. } => label.clone(),
        }
    }

    /// A memory source for the scanner. Cheap to clone; shares the live
    /// backing (plugin region table, pid, or snapshot directory).
    pub fn source(&self) -> MemorySource {
        match self {
            TaHandle::Plugin { source, .. } => MemorySource::InProcess(source.clone()),
            TaHandle::Child { child, label } => {
                MemorySource::External(ProcSource::new(child.id(), label.clone()))
            }
            TaHandle::Snapshot { work_dir, label } => {
                MemorySource::Snapshot(SnapshotSource::open(work_dir.clone(), label.clone()))
            }
        }
    }

    pub fn child_pid(&self) -> Option<u32> {
        match self {
            TaHandle::Child { child, .. } => Some(child.id()),
            _ => None,
        }
    }

    /// Terminate/unmap the instance. Killing an already-dead child is fine.
    pub fn terminate(&mut self) {
        if let TaHandle::Child { child, .. } = self {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

impl Drop for TaHandle {
    fn drop(&mut self) {
        self.terminate();
    }
}

/// Launch the target application per config. The caller captures a baseline
/// right after this returns.
pub fn launch_ta(config: &HostConfig) -> Result<TaHandle, LaunchError> {
    match config.ta_mode {
        TaMode::Plugin => {
            let image = fs::canonicalize(&config.ta_path)
                .map_err(|e| LaunchError::LaunchFailed(format!("plugin image: {e}")))?;
            let label = image.display().to_string();
            let source = InProcessSource::from_image(label, &image, 0x40_0000)
                .map_err(|e| LaunchError::LaunchFailed(format!("plugin image: {e}")))?;
            Ok(TaHandle::Plugin { source, image })
        }
        TaMode::Child => {
            let exe = fs::canonicalize(&config.ta_path)
                .map_err(|e| LaunchError::LaunchFailed(format!("target binary: {e}")))?;
            let label = exe.display().to_string();
            let mut child = Command::new(&exe)
                .spawn()
                .map_err(|e| LaunchError::LaunchFailed(format!("spawn: {e}")))?;
            // spawn returns between fork and exec; the baseline must not
            // race the loader, so wait until the image-backed mapping shows
            wait_for_mapping(&mut child, &label)?;
            Ok(TaHandle::Child { child, label })
        }
        TaMode::Snapshot => {
            let pristine = fs::canonicalize(&config.ta_path)
                .map_err(|e| LaunchError::LaunchFailed(format!("snapshot dir: {e}")))?;
            if !pristine.join("maps.txt").is_file() {
                return Err(LaunchError::LaunchFailed(
                    "snapshot dir has no maps.txt".to_string(),
                ));
            }
            // instantiate a working copy so tampering is per-launch state
            // and a restart really does reset it
            let work_dir = config.storage_dir.join("ta_work");
            let _ = fs::remove_dir_all(&work_dir);
            copy_snapshot(&pristine, &work_dir)
                .map_err(|e| LaunchError::LaunchFailed(format!("snapshot copy: {e}")))?;
            Ok(TaHandle::Snapshot {
                work_dir,
                label: pristine.display().to_string(),
            })
        }
    }
}

/// Terminate the old instance and launch a clean one.
pub fn restart_ta(mut old: TaHandle, config: &HostConfig) -> Result<TaHandle, LaunchError> {
    old.terminate();
    drop(old);
    launch_ta(config)
}

fn wait_for_mapping(child: &mut Child, label: &str) -> Result<(), LaunchError> {
    let deadline = Instant::now() + Duration::from_secs(5);
    loop {
        if let Ok(Some(status)) = child.try_wait() {
            return Err(LaunchError::LaunchFailed(format!(
                "target exited during launch: {status}"
            )));
        }
        match fs::read_to_string(format!("/proc/{}/maps", child.id())) {
            Ok(maps) if maps.contains(label) => return Ok(()),
            _ => {}
        }
        if Instant::now() > deadline {
            return Err(LaunchError::LaunchFailed(
                "target never mapped its image".to_string(),
            ));
        }
        std::thread::sleep(Duration::from_millis(2));
    }
}

fn copy_snapshot(from: &Path, to: &Path) -> std::io::Result<()> {
    fs::create_dir_all(to)?;
    for entry in fs::read_dir(from)? {
        let entry = entry?;
        if entry.file_type()?.is_file() {
            fs::copy(entry.path(), to.join(entry.file_name()))?;
        }
    }
    Ok(())
}
