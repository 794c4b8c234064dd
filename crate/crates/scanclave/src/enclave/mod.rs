//! The simulated trusted core.
//!
//! Everything in this module stands in for code running inside an enclave:
//! it owns the instance signing key, seals it to storage under a
//! hardware-fused key (here: a file provisioned out of band), produces
//! quotes, schedules scans on an unpredictable timer, and signs nonce-bound
//! reports. The rest of the system reaches it only through the entry points
//! on [`EnclaveHandle`], the ECALL analog.

mod quote;
mod schedule;
mod seal;
mod runtime;

pub use quote::{measure_enclave_image, produce_quote, verify_quote, PlatformKey};
pub use runtime::{
    on_challenge, sign_report, spawn_enclave, ChallengeError, Enclave, EnclaveCall, EnclaveHandle,
};
pub use schedule::{ScanSchedule, ScheduleError};
pub use seal::{seal_identity, unseal_identity, SealedBlob, UnsealError, SEAL_MAGIC, SEAL_VERSION};

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use ed25519_dalek::SigningKey;
use rand_chacha::rand_core::Rng as _;

use crate::protocol::{InstanceId, PUBLIC_KEY_LEN};
use crate::rng::Csprng;

/// Per-instance identity: a stable 16-byte id plus the Ed25519 keypair that
/// signs verification reports.
#[derive(Clone)]
pub struct EnclaveIdentity {
    instance_id: InstanceId,
    signing_key: SigningKey,
}

impl EnclaveIdentity {
    pub fn generate(rng: &mut Csprng) -> EnclaveIdentity {
        let mut instance_id = [0u8; 16];
        rng.fill_bytes(&mut instance_id);
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        EnclaveIdentity {
            instance_id,
            signing_key: SigningKey::from_bytes(&seed),
        }
    }

    pub fn from_parts(instance_id: InstanceId, seed: [u8; 32]) -> EnclaveIdentity {
        EnclaveIdentity {
            instance_id,
            signing_key: SigningKey::from_bytes(&seed),
        }
    }

    pub fn instance_id(&self) -> InstanceId {
        self.instance_id
    }

    pub fn public_key(&self) -> [u8; PUBLIC_KEY_LEN] {
        self.signing_key.verifying_key().to_bytes()
    }

    pub(crate) fn signing_key(&self) -> &SigningKey {
        &self.signing_key
    }

    /// The raw private-key seed. Exists so harnesses can assert the seed
    /// never leaks into wire traffic or plaintext files; it must never be
    /// put into a protocol message.
    pub fn signing_seed(&self) -> [u8; 32] {
        self.signing_key.to_bytes()
    }
}

impl PartialEq for EnclaveIdentity {
    fn eq(&self, other: &Self) -> bool {
        self.instance_id == other.instance_id
            && self.signing_key.to_bytes() == other.signing_key.to_bytes()
    }
}

impl Eq for EnclaveIdentity {}

impl std::fmt::Debug for EnclaveIdentity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EnclaveIdentity")
            .field("instance_id", &hex::encode(self.instance_id))
            .field("public_key", &hex::encode(self.public_key()))
            .finish_non_exhaustive()
    }
}

/// The sealing secret, simulating the hardware-fused key. Never transmitted
/// on any channel and never part of any protocol message.
#[derive(Clone)]
pub struct SealKey {
    key: [u8; 32],
    source_path: Option<PathBuf>,
}

impl SealKey {
    pub fn from_bytes(key: [u8; 32]) -> SealKey {
        SealKey {
            key,
            source_path: None,
        }
    }

    /// Load the raw 32-byte seal-key file.
    pub fn load(path: &Path) -> io::Result<SealKey> {
        let bytes = fs::read(path)?;
        let key: [u8; 32] = bytes.as_slice().try_into().map_err(|_| {
            io::Error::new(
                io::ErrorKind::InvalidData,
                format!("seal key file must be exactly 32 bytes, got {}", bytes.len()),
            )
        })?;
        Ok(SealKey {
            key,
            source_path: Some(path.to_path_buf()),
        })
    }

    pub fn source_path(&self) -> Option<&Path> {
        self.source_path.as_deref()
    }

    pub(crate) fn bytes(&self) -> &[u8; 32] {
        &self.key
    }
}

impl std::fmt::Debug for SealKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SealKey")
            .field("source_path", &self.source_path)
            .finish_non_exhaustive()
    }
}

/// Whether [`init_identity`] restored a sealed identity or created a fresh
/// one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdentityOutcome {
    Restored,
    Created,
}

#[derive(Debug, thiserror::Error)]
pub enum IdentityError {
    /// A blob is present but does not unseal. Hard failure by default so a
    /// key-substitution attack on storage is visible; ephemeral-identity
    /// mode is the explicit opt-out.
    #[error("sealed identity present but unusable: {0}")]
    StorageCorrupt(UnsealError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Restore the instance identity from sealed storage, or create and seal a
/// fresh one on first launch.
pub fn init_identity(
    storage_path: &Path,
    seal_key: &SealKey,
    rng: &mut Csprng,
) -> Result<(EnclaveIdentity, IdentityOutcome), IdentityError> {
    if storage_path.exists() {
        let bytes = fs::read(storage_path)?;
        let blob = SealedBlob::from_bytes(&bytes).map_err(IdentityError::StorageCorrupt)?;
        let identity = unseal_identity(&blob, seal_key).map_err(IdentityError::StorageCorrupt)?;
        return Ok((identity, IdentityOutcome::Restored));
    }
    let identity = EnclaveIdentity::generate(rng);
    let blob = seal_identity(&identity, seal_key, rng);
    fs::write(storage_path, blob.to_bytes())?;
    Ok((identity, IdentityOutcome::Created))
}

/// Sealed identity blob location within an agent storage directory.
pub fn sealed_identity_path(storage_dir: &Path) -> PathBuf {
    storage_dir.join("identity.sealed")
}

/// Provisioned quote location within an agent storage directory.
pub fn quote_path(storage_dir: &Path) -> PathBuf {
    storage_dir.join("quote.bin")
}

/// Everything the trusted core needs to come up. The host hands over paths
/// and parameters only; key material never crosses back out.
#[derive(Debug, Clone)]
pub struct BootConfig {
    pub storage_dir: PathBuf,
    pub seal_key_path: PathBuf,
    /// Fresh identity each launch, nothing sealed. Requires
    /// `platform_key_path` so the simulated quoting facility can sign the
    /// fresh key.
    pub ephemeral_identity: bool,
    pub platform_key_path: Option<PathBuf>,
    /// Image measured into an ephemeral quote; defaults to the running
    /// executable.
    pub enclave_image: Option<PathBuf>,
    pub scan_min: std::time::Duration,
    pub scan_max: std::time::Duration,
    pub epoch_length: u32,
    /// Seeded schedule for reproducible harness runs; `None` is OS entropy.
    pub schedule_seed: Option<u64>,
}

#[derive(Debug, thiserror::Error)]
pub enum BootError {
    #[error("seal key unavailable: {0}")]
    SealKey(io::Error),
    #[error(transparent)]
    Identity(#[from] IdentityError),
    #[error("invalid scan schedule: {0}")]
    Schedule(#[from] ScheduleError),
    #[error("ephemeral identity requires a platform key for quoting")]
    EphemeralWithoutPlatformKey,
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Initialize identity and quote, then start the sequential executor.
/// This is the initialization hand-over: everything here runs "inside" the
/// simulated enclave.
pub fn boot_enclave(
    config: &BootConfig,
    clock: std::sync::Arc<dyn crate::time::Clock>,
) -> Result<(EnclaveHandle, std::thread::JoinHandle<()>, IdentityOutcome), BootError> {
    let mut rng = crate::rng::os_rng();

    let (identity, outcome, quote) = if config.ephemeral_identity {
        let platform_path = config
            .platform_key_path
            .as_deref()
            .ok_or(BootError::EphemeralWithoutPlatformKey)?;
        let identity = EnclaveIdentity::generate(&mut rng);
        let image = match &config.enclave_image {
            Some(path) => path.clone(),
            None => std::env::current_exe()?,
        };
        let measurement = measure_enclave_image(&image)?;
        // transient use of the simulated quoting facility; dropped at scope end
        let platform = PlatformKey::load(platform_path).map_err(BootError::Io)?;
        let quote = produce_quote(&identity, &measurement, &platform);
        (identity, IdentityOutcome::Created, Some(quote))
    } else {
        let seal_key = SealKey::load(&config.seal_key_path).map_err(BootError::SealKey)?;
        let (identity, outcome) =
            init_identity(&sealed_identity_path(&config.storage_dir), &seal_key, &mut rng)?;
        let quote = match fs::read(quote_path(&config.storage_dir)) {
            Ok(bytes) => crate::protocol::Quote::from_bytes(&bytes),
            Err(_) => None,
        };
        (identity, outcome, quote)
    };

    if let Some(q) = &quote {
        if q.public_key != identity.public_key() {
            log::warn!("provisioned quote does not match this identity; announcing nothing");
        }
    } else {
        log::warn!("no provisioned quote found; verifier registration will not happen");
    }
    let quote = quote.filter(|q| q.public_key == identity.public_key());

    let schedule_rng = match config.schedule_seed {
        Some(seed) => crate::rng::seeded_rng(seed),
        None => crate::rng::os_rng(),
    };
    let schedule = ScanSchedule::new(
        config.scan_min,
        config.scan_max,
        config.epoch_length,
        schedule_rng,
    )?;

    let enclave = Enclave::new(identity, quote, schedule, clock);
    let (handle, join) = spawn_enclave(enclave);
    Ok((handle, join, outcome))
}

#[cfg(test)]
mod tests;
