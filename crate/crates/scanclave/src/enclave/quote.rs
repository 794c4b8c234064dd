//! Quote production and validation against the simulated platform root.
//!
//! The platform key stands in for the hardware quoting facility. It lives in
//! the provisioning tool and test fixtures; the running agent only ever
//! loads the quote the tool produced (or, in ephemeral-identity mode, uses
//! the key transiently at startup and drops it).

use std::fs;
use std::io;
use std::path::Path;

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use rand_chacha::rand_core::Rng as _;
use sha2::{Digest as _, Sha256};

use super::EnclaveIdentity;
use crate::protocol::Quote;
use crate::rng::Csprng;
use crate::scanner::Digest32;

/// The simulated platform root signing key.
pub struct PlatformKey(SigningKey);

impl PlatformKey {
    pub fn generate(rng: &mut Csprng) -> PlatformKey {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        PlatformKey(SigningKey::from_bytes(&seed))
    }

    pub fn from_seed(seed: [u8; 32]) -> PlatformKey {
        PlatformKey(SigningKey::from_bytes(&seed))
    }

    /// Load the raw 32-byte private-key seed file.
    pub fn load(path: &Path) -> io::Result<PlatformKey> {
        let bytes = fs::read(path)?;
        let seed: [u8; 32] = bytes.as_slice().try_into().map_err(|_| {
            io::Error::new(
                io::ErrorKind::InvalidData,
                "platform key file must be exactly 32 bytes",
            )
        })?;
        Ok(PlatformKey::from_seed(seed))
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        fs::write(path, self.0.to_bytes())
    }

    pub fn public_key(&self) -> [u8; 32] {
        self.0.verifying_key().to_bytes()
    }
}

impl std::fmt::Debug for PlatformKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PlatformKey")
            .field("public_key", &hex::encode(self.public_key()))
            .finish_non_exhaustive()
    }
}

/// Load the raw 32-byte platform public-key file.
pub fn load_platform_public_key(path: &Path) -> io::Result<[u8; 32]> {
    let bytes = fs::read(path)?;
    bytes.as_slice().try_into().map_err(|_| {
        io::Error::new(
            io::ErrorKind::InvalidData,
            "platform public key file must be exactly 32 bytes",
        )
    })
}

/// Bind the enclave measurement to the instance public key under the
/// platform signature.
pub fn produce_quote(
    identity: &EnclaveIdentity,
    enclave_measurement: &Digest32,
    platform: &PlatformKey,
) -> Quote {
    let instance_id = identity.instance_id();
    let public_key = identity.public_key();
    let body = Quote::signing_bytes(enclave_measurement, &instance_id, &public_key);
    let signature: Signature = platform.0.sign(&body);
    Quote {
        enclave_measurement: *enclave_measurement,
        instance_id,
        public_key,
        platform_signature: signature.to_bytes(),
    }
}

/// Check the platform signature over the quote body.
pub fn verify_quote(quote: &Quote, platform_root_pk: &[u8; 32]) -> bool {
    let Ok(vk) = VerifyingKey::from_bytes(platform_root_pk) else {
        return false;
    };
    let body = Quote::signing_bytes(
        &quote.enclave_measurement,
        &quote.instance_id,
        &quote.public_key,
    );
    vk.verify(&body, &Signature::from_bytes(&quote.platform_signature))
        .is_ok()
}

/// SHA-256 of the enclave code image file, the measurement a verifier
/// whitelists.
pub fn measure_enclave_image(path: &Path) -> io::Result<Digest32> {
    let bytes = fs::read(path)?;
    Ok(Sha256::digest(&bytes).into())
}
