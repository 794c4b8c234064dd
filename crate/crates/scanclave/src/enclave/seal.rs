//! Identity sealing: ChaCha20-Poly1305 under the seal key, framed as
//!
//! `"SCLV" | version u8 | aead_nonce [12] | ciphertext | auth_tag [16]`
//!
//! The plaintext is the canonical identity encoding
//! `instance_id [16] | signing seed [32] | public key [32]`. Any single-bit
//! change to nonce, ciphertext, or tag fails authentication; magic and
//! version are format gates checked before any cryptography.

use chacha20poly1305::aead::Aead;
use chacha20poly1305::{ChaCha20Poly1305, KeyInit};
use rand_chacha::rand_core::Rng as _;

use super::{EnclaveIdentity, SealKey};
use crate::rng::Csprng;

pub const SEAL_MAGIC: [u8; 4] = *b"SCLV";
pub const SEAL_VERSION: u8 = 1;

const HEADER_LEN: usize = 4 + 1 + 12;
const TAG_LEN: usize = 16;
const PLAINTEXT_LEN: usize = 16 + 32 + 32;

/// The sealed identity as stored on disk. Fields are kept verbatim from the
/// file so checks can run in declaration order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedBlob {
    pub magic: [u8; 4],
    pub version: u8,
    pub aead_nonce: [u8; 12],
    pub ciphertext: Vec<u8>,
    pub auth_tag: [u8; 16],
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum UnsealError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version")]
    UnsupportedVersion,
    #[error("authentication failure")]
    AuthFailure,
    #[error("malformed blob")]
    Malformed,
}

impl SealedBlob {
    /// File layout: fields in declaration order, tag trailing. File length is
    /// ciphertext length plus 33 bytes of framing.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.ciphertext.len() + TAG_LEN);
        out.extend_from_slice(&self.magic);
        out.push(self.version);
        out.extend_from_slice(&self.aead_nonce);
        out.extend_from_slice(&self.ciphertext);
        out.extend_from_slice(&self.auth_tag);
        out
    }

    /// Split a file into fields. Only the length is checked here; magic and
    /// version stay as read so `unseal_identity` reports on them.
    pub fn from_bytes(bytes: &[u8]) -> Result<SealedBlob, UnsealError> {
        if bytes.len() < HEADER_LEN + TAG_LEN {
            return Err(UnsealError::Malformed);
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        let version = bytes[4];
        let aead_nonce: [u8; 12] = bytes[5..17].try_into().unwrap();
        let tag_at = bytes.len() - TAG_LEN;
        let ciphertext = bytes[17..tag_at].to_vec();
        let auth_tag: [u8; 16] = bytes[tag_at..].try_into().unwrap();
        Ok(SealedBlob {
            magic,
            version,
            aead_nonce,
            ciphertext,
            auth_tag,
        })
    }
}

/// Encrypt the identity under the seal key with a fresh random nonce.
///
/// Two seals of the same identity produce different nonces and ciphertexts.
pub fn seal_identity(identity: &EnclaveIdentity, seal_key: &SealKey, rng: &mut Csprng) -> SealedBlob {
    let mut plaintext = [0u8; PLAINTEXT_LEN];
    plaintext[..16].copy_from_slice(&identity.instance_id());
    plaintext[16..48].copy_from_slice(&identity.signing_seed());
    plaintext[48..].copy_from_slice(&identity.public_key());

    let mut aead_nonce = [0u8; 12];
    rng.fill_bytes(&mut aead_nonce);

    let cipher = ChaCha20Poly1305::new(seal_key.bytes().into());
    let mut sealed = cipher
        .encrypt((&aead_nonce).into(), plaintext.as_ref())
        .expect("sealing fixed-size plaintext cannot fail");
    let auth_tag: [u8; 16] = sealed.split_off(sealed.len() - TAG_LEN).try_into().unwrap();

    SealedBlob {
        magic: SEAL_MAGIC,
        version: SEAL_VERSION,
        aead_nonce,
        ciphertext: sealed,
        auth_tag,
    }
}

/// Recover the identity. Checks run in order: magic, version, then AEAD
/// authentication covering nonce, ciphertext, and tag.
pub fn unseal_identity(blob: &SealedBlob, seal_key: &SealKey) -> Result<EnclaveIdentity, UnsealError> {
    if blob.magic != SEAL_MAGIC {
        return Err(UnsealError::BadMagic);
    }
    if blob.version != SEAL_VERSION {
        return Err(UnsealError::UnsupportedVersion);
    }

    let mut sealed = blob.ciphertext.clone();
    sealed.extend_from_slice(&blob.auth_tag);
    let cipher = ChaCha20Poly1305::new(seal_key.bytes().into());
    let plaintext = cipher
        .decrypt((&blob.aead_nonce).into(), sealed.as_ref())
        .map_err(|_| UnsealError::AuthFailure)?;

    if plaintext.len() != PLAINTEXT_LEN {
        return Err(UnsealError::Malformed);
    }
    let instance_id: [u8; 16] = plaintext[..16].try_into().unwrap();
    let seed: [u8; 32] = plaintext[16..48].try_into().unwrap();
    let stored_pk: [u8; 32] = plaintext[48..].try_into().unwrap();

    let identity = EnclaveIdentity::from_parts(instance_id, seed);
    if identity.public_key() != stored_pk {
        return Err(UnsealError::Malformed);
    }
    Ok(identity)
}
