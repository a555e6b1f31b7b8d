//! Pseudonymization, identity vault sealing and consent records.
//!
//! Raw user identifiers are turned into [`Pseudonym`]s with HMAC-SHA256 under
//! a secret key. The original identifier is kept only in sealed form
//! (ChaCha20-Poly1305) inside the identity vault, which lives apart from the
//! trip data. Holding the key and the vault is the only way back from a
//! pseudonym to a person.

use std::fmt;
use std::path::Path;

use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use chrono::{DateTime, Utc};
use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;

type HmacSha256 = Hmac<Sha256>;

/// Minimum secret key length in bytes.
pub const MIN_KEY_LEN: usize = 32;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PrivacyError {
    #[error("key must be at least {MIN_KEY_LEN} bytes, got {0}")]
    WeakKey(usize),
    #[error("identifier is empty")]
    EmptyIdentifier,
    #[error("malformed pseudonym {0:?}")]
    MalformedPseudonym(String),
    #[error("unknown pseudonym {0}")]
    UnknownPseudonym(Pseudonym),
    #[error("sealed identifier could not be opened")]
    Unseal,
    #[error("cannot read key file: {0}")]
    KeyFile(String),
}

/// Secret key material for pseudonymization and vault sealing.
#[derive(Clone)]
pub struct PrivacyKey {
    bytes: Vec<u8>,
    pseudonym_subkey: [u8; 32],
}

impl fmt::Debug for PrivacyKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PrivacyKey({} bytes)", self.bytes.len())
    }
}

impl PrivacyKey {
    pub fn from_bytes(bytes: impl Into<Vec<u8>>) -> Result<Self, PrivacyError> {
        let bytes = bytes.into();
        if bytes.len() < MIN_KEY_LEN {
            return Err(PrivacyError::WeakKey(bytes.len()));
        }
        let mut key = Self {
            bytes,
            pseudonym_subkey: [0; 32],
        };
        key.pseudonym_subkey = key.derive(b"pseudonym/v1");
        Ok(key)
    }

    /// Reads a key file holding either hex text or raw bytes.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, PrivacyError> {
        let raw = std::fs::read(path.as_ref()).map_err(|e| PrivacyError::KeyFile(e.to_string()))?;
        let text = std::str::from_utf8(&raw).ok().map(str::trim);
        match text.and_then(|t| hex::decode(t).ok()) {
            Some(decoded) => Self::from_bytes(decoded),
            None => Self::from_bytes(raw),
        }
    }

    fn derive(&self, label: &[u8]) -> [u8; 32] {
        let mut mac = <HmacSha256 as Mac>::new_from_slice(&self.bytes).expect("hmac accepts any key length");
        mac.update(label);
        mac.finalize().into_bytes().into()
    }
}

/// A de-identified user key: 64 lowercase hex characters.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Pseudonym(String);

impl Pseudonym {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for Pseudonym {
    type Error = PrivacyError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        if s.len() == 64 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            Ok(Pseudonym(s))
        } else {
            Err(PrivacyError::MalformedPseudonym(s))
        }
    }
}

impl std::str::FromStr for Pseudonym {
    type Err = PrivacyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Pseudonym::try_from(s.to_string())
    }
}

impl From<Pseudonym> for String {
    fn from(p: Pseudonym) -> Self {
        p.0
    }
}

impl fmt::Display for Pseudonym {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Deterministic keyed pseudonym for a raw identifier.
pub fn pseudonymize(identifier: &str, key: &PrivacyKey) -> Result<Pseudonym, PrivacyError> {
    if identifier.is_empty() {
        return Err(PrivacyError::EmptyIdentifier);
    }
    let mut mac = <HmacSha256 as Mac>::new_from_slice(&key.pseudonym_subkey).expect("hmac accepts any key length");
    mac.update(identifier.as_bytes());
    Ok(Pseudonym(hex::encode(mac.finalize().into_bytes())))
}

/// Vault row linking a pseudonym to its sealed original identifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityVaultEntry {
    pub pseudonym: Pseudonym,
    /// Hex of ChaCha20-Poly1305 ciphertext.
    pub sealed_identifier: String,
    pub created_at: DateTime<Utc>,
}

// One identifier maps to one pseudonym, so a nonce derived from the pseudonym
// is only ever reused for the same plaintext.
fn vault_cipher(key: &PrivacyKey) -> ChaCha20Poly1305 {
    ChaCha20Poly1305::new(Key::from_slice(&key.derive(b"vault-seal/v1")))
}

fn vault_nonce(key: &PrivacyKey, pseudonym: &Pseudonym) -> [u8; 12] {
    let mut mac = <HmacSha256 as Mac>::new_from_slice(&key.derive(b"vault-nonce/v1")).expect("hmac accepts any key length");
    mac.update(pseudonym.as_str().as_bytes());
    let full = mac.finalize().into_bytes();
    let mut nonce = [0u8; 12];
    nonce.copy_from_slice(&full[..12]);
    nonce
}

pub fn seal_identity(
    identifier: &str,
    key: &PrivacyKey,
    created_at: DateTime<Utc>,
) -> Result<IdentityVaultEntry, PrivacyError> {
    let pseudonym = pseudonymize(identifier, key)?;
    let nonce = vault_nonce(key, &pseudonym);
    let sealed = vault_cipher(key)
        .encrypt(Nonce::from_slice(&nonce), identifier.as_bytes())
        .expect("encryption into a Vec cannot fail");
    Ok(IdentityVaultEntry {
        pseudonym,
        sealed_identifier: hex::encode(sealed),
        created_at,
    })
}

/// Re-identification: recovers the raw identifier from a vault entry.
pub fn unseal_identity(entry: &IdentityVaultEntry, key: &PrivacyKey) -> Result<String, PrivacyError> {
    let sealed = hex::decode(&entry.sealed_identifier).map_err(|_| PrivacyError::Unseal)?;
    let nonce = vault_nonce(key, &entry.pseudonym);
    let plain = vault_cipher(key)
        .decrypt(Nonce::from_slice(&nonce), sealed.as_slice())
        .map_err(|_| PrivacyError::Unseal)?;
    String::from_utf8(plain).map_err(|_| PrivacyError::Unseal)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsentRecord {
    pub pseudonym: Pseudonym,
    pub policy_version: String,
    pub granted_at: DateTime<Utc>,
    pub withdrawn_at: Option<DateTime<Utc>>,
}

impl ConsentRecord {
    pub fn is_active(&self) -> bool {
        self.withdrawn_at.is_none()
    }

    /// Marks the consent withdrawn; a withdrawal never predates the grant.
    pub fn withdraw(&mut self, at: DateTime<Utc>) {
        if self.withdrawn_at.is_none() {
            self.withdrawn_at = Some(at.max(self.granted_at));
        }
    }
}

/// Outcome of a deletion request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErasureReceipt {
    pub trips_deleted: usize,
    pub points_deleted: usize,
    pub vault_deleted: bool,
}
