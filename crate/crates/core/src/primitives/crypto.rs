use std::fmt;
use std::sync::Arc;

use aes_gcm::aead::{Aead, KeyInit};
use aes_gcm::{Aes128Gcm, Nonce};
use ed25519_dalek::{Signer, Verifier};
use hkdf::Hkdf;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::codec::{Decode, DecodeError, Encode, Reader, Writer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("authentication failed")]
    Authentication,
    #[error("malformed ciphertext")]
    Malformed,
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct PublicKey(pub Vec<u8>);

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({} octets)", self.0.len())
    }
}

/// Private key material. Deliberately has no encoding: it can never be
/// placed in a protocol message.
#[derive(Clone)]
pub struct PrivateKey(Vec<u8>);

impl fmt::Debug for PrivateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("PrivateKey(..)")
    }
}

#[derive(Clone, Debug)]
pub struct KeyPair {
    pub public: PublicKey,
    pub private: PrivateKey,
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Signature(pub Vec<u8>);

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({} octets)", self.0.len())
    }
}

impl Encode for Signature {
    fn encode(&self, w: &mut Writer) {
        w.bytes(&self.0);
    }
}

impl Decode for Signature {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Signature(r.bytes()?))
    }
}

/// 128-bit authenticated-encryption key (a view key `k_i`).
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct SymKey(pub [u8; 16]);

impl SymKey {
    pub fn random<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        let mut k = [0u8; 16];
        rng.fill_bytes(&mut k);
        SymKey(k)
    }
}

impl fmt::Debug for SymKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SymKey(..)")
    }
}

/// Signature, AEAD and public-key encryption behind one interface.
pub trait CryptoProvider: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    fn signing_keypair(&self, rng: &mut dyn RngCore) -> KeyPair;
    fn sign(&self, key: &PrivateKey, data: &[u8]) -> Signature;
    fn verify(&self, key: &PublicKey, data: &[u8], sig: &Signature) -> bool;

    fn encryption_keypair(&self, rng: &mut dyn RngCore) -> KeyPair;
    fn pke_encrypt(&self, key: &PublicKey, plaintext: &[u8], rng: &mut dyn RngCore) -> Vec<u8>;
    fn pke_decrypt(&self, key: &PrivateKey, ciphertext: &[u8]) -> Result<Vec<u8>, CryptoError>;

    fn seal(&self, key: &SymKey, plaintext: &[u8], rng: &mut dyn RngCore) -> Vec<u8>;
    fn open(&self, key: &SymKey, ciphertext: &[u8]) -> Result<Vec<u8>, CryptoError>;
}

pub type Crypto = Arc<dyn CryptoProvider>;

/// Backend selector as it appears in scenario files.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CryptoBackend {
    /// Ed25519, AES-128-GCM, X25519 + HKDF-SHA256 + AES-128-GCM.
    Real,
    /// Keyed SHA-256 constructions.
    #[default]
    Fast,
}

impl CryptoBackend {
    pub fn provider(self) -> Crypto {
        match self {
            CryptoBackend::Real => Arc::new(RealCrypto),
            CryptoBackend::Fast => Arc::new(FastCrypto),
        }
    }
}

const GCM_NONCE: usize = 12;
const X25519_LEN: usize = 32;

#[derive(Debug, Default, Clone, Copy)]
pub struct RealCrypto;

impl RealCrypto {
    fn pke_key(shared: &[u8; 32], ephemeral: &[u8], recipient: &[u8]) -> [u8; 16] {
        let mut info = Vec::with_capacity(ephemeral.len() + recipient.len());
        info.extend_from_slice(ephemeral);
        info.extend_from_slice(recipient);
        let hk = Hkdf::<Sha256>::new(Some(b"fastbft/pke"), shared);
        let mut okm = [0u8; 16];
        hk.expand(&info, &mut okm).expect("16 octets is a valid HKDF length");
        okm
    }
}

impl CryptoProvider for RealCrypto {
    fn name(&self) -> &'static str {
        "real"
    }

    fn signing_keypair(&self, rng: &mut dyn RngCore) -> KeyPair {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        let sk = ed25519_dalek::SigningKey::from_bytes(&seed);
        KeyPair {
            public: PublicKey(sk.verifying_key().to_bytes().to_vec()),
            private: PrivateKey(seed.to_vec()),
        }
    }

    fn sign(&self, key: &PrivateKey, data: &[u8]) -> Signature {
        let seed: [u8; 32] = key.0.as_slice().try_into().expect("ed25519 seed");
        let sk = ed25519_dalek::SigningKey::from_bytes(&seed);
        Signature(sk.sign(data).to_bytes().to_vec())
    }

    fn verify(&self, key: &PublicKey, data: &[u8], sig: &Signature) -> bool {
        let Ok(pk_bytes) = <[u8; 32]>::try_from(key.0.as_slice()) else {
            return false;
        };
        let Ok(pk) = ed25519_dalek::VerifyingKey::from_bytes(&pk_bytes) else {
            return false;
        };
        let Ok(sig) = ed25519_dalek::Signature::from_slice(&sig.0) else {
            return false;
        };
        pk.verify(data, &sig).is_ok()
    }

    fn encryption_keypair(&self, rng: &mut dyn RngCore) -> KeyPair {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        let sk = x25519_dalek::StaticSecret::from(seed);
        let pk = x25519_dalek::PublicKey::from(&sk);
        KeyPair { public: PublicKey(pk.as_bytes().to_vec()), private: PrivateKey(seed.to_vec()) }
    }

    fn pke_encrypt(&self, key: &PublicKey, plaintext: &[u8], rng: &mut dyn RngCore) -> Vec<u8> {
        let recipient: [u8; 32] = key.0.as_slice().try_into().expect("x25519 public key");
        let recipient = x25519_dalek::PublicKey::from(recipient);
        let mut eph_seed = [0u8; 32];
        rng.fill_bytes(&mut eph_seed);
        let eph = x25519_dalek::StaticSecret::from(eph_seed);
        let eph_pub = x25519_dalek::PublicKey::from(&eph);
        let shared = eph.diffie_hellman(&recipient);
        let k = Self::pke_key(shared.as_bytes(), eph_pub.as_bytes(), recipient.as_bytes());
        let mut out = eph_pub.as_bytes().to_vec();
        out.extend(self.seal(&SymKey(k), plaintext, rng));
        out
    }

    fn pke_decrypt(&self, key: &PrivateKey, ciphertext: &[u8]) -> Result<Vec<u8>, CryptoError> {
        if ciphertext.len() < X25519_LEN {
            return Err(CryptoError::Malformed);
        }
        let seed: [u8; 32] = key.0.as_slice().try_into().map_err(|_| CryptoError::Malformed)?;
        let sk = x25519_dalek::StaticSecret::from(seed);
        let own = x25519_dalek::PublicKey::from(&sk);
        let eph: [u8; 32] = ciphertext[..X25519_LEN].try_into().unwrap();
        let eph = x25519_dalek::PublicKey::from(eph);
        let shared = sk.diffie_hellman(&eph);
        let k = Self::pke_key(shared.as_bytes(), eph.as_bytes(), own.as_bytes());
        self.open(&SymKey(k), &ciphertext[X25519_LEN..])
    }

    fn seal(&self, key: &SymKey, plaintext: &[u8], rng: &mut dyn RngCore) -> Vec<u8> {
        let cipher = Aes128Gcm::new_from_slice(&key.0).expect("128-bit key");
        let mut nonce = [0u8; GCM_NONCE];
        rng.fill_bytes(&mut nonce);
        let ct = cipher.encrypt(Nonce::from_slice(&nonce), plaintext).expect("AES-GCM encryption");
        let mut out = nonce.to_vec();
        out.extend(ct);
        out
    }

    fn open(&self, key: &SymKey, ciphertext: &[u8]) -> Result<Vec<u8>, CryptoError> {
        if ciphertext.len() < GCM_NONCE {
            return Err(CryptoError::Malformed);
        }
        let cipher = Aes128Gcm::new_from_slice(&key.0).expect("128-bit key");
        let (nonce, ct) = ciphertext.split_at(GCM_NONCE);
        cipher.decrypt(Nonce::from_slice(nonce), ct).map_err(|_| CryptoError::Authentication)
    }
}

/// Keyed SHA-256 stand-ins for the three schemes.
///
/// Signatures are `H(pk || data)` with `pk = H(sk)`, so anyone holding a
/// public key could forge them. That is acceptable only inside the simulator,
/// where Byzantine behaviour is a fixed script that never computes over keys.
/// Encryption is a SHA-256 keystream with a truncated SHA-256 tag.
#[derive(Debug, Default, Clone, Copy)]
pub struct FastCrypto;

const FAST_NONCE: usize = 12;
const FAST_TAG: usize = 16;

impl FastCrypto {
    fn derive(label: &[u8], secret: &[u8]) -> Vec<u8> {
        let mut h = Sha256::new();
        h.update(label);
        h.update(secret);
        h.finalize().to_vec()
    }

    fn keystream_xor(key: &[u8], nonce: &[u8], data: &mut [u8]) {
        for (block, chunk) in data.chunks_mut(32).enumerate() {
            let mut h = Sha256::new();
            h.update(b"fast/ks");
            h.update(key);
            h.update(nonce);
            h.update((block as u64).to_be_bytes());
            let pad = h.finalize();
            for (b, p) in chunk.iter_mut().zip(pad) {
                *b ^= p;
            }
        }
    }

    fn tag(key: &[u8], nonce: &[u8], ct: &[u8]) -> [u8; FAST_TAG] {
        let mut h = Sha256::new();
        h.update(b"fast/tag");
        h.update(key);
        h.update(nonce);
        h.update(ct);
        h.finalize()[..FAST_TAG].try_into().unwrap()
    }

    fn seal_with(key: &[u8], plaintext: &[u8], rng: &mut dyn RngCore) -> Vec<u8> {
        let mut nonce = [0u8; FAST_NONCE];
        rng.fill_bytes(&mut nonce);
        let mut body = plaintext.to_vec();
        Self::keystream_xor(key, &nonce, &mut body);
        let tag = Self::tag(key, &nonce, &body);
        let mut out = nonce.to_vec();
        out.extend(body);
        out.extend(tag);
        out
    }

    fn open_with(key: &[u8], ciphertext: &[u8]) -> Result<Vec<u8>, CryptoError> {
        if ciphertext.len() < FAST_NONCE + FAST_TAG {
            return Err(CryptoError::Malformed);
        }
        let (nonce, rest) = ciphertext.split_at(FAST_NONCE);
        let (body, tag) = rest.split_at(rest.len() - FAST_TAG);
        if Self::tag(key, nonce, body) != tag {
            return Err(CryptoError::Authentication);
        }
        let mut pt = body.to_vec();
        Self::keystream_xor(key, nonce, &mut pt);
        Ok(pt)
    }
}

impl CryptoProvider for FastCrypto {
    fn name(&self) -> &'static str {
        "fast"
    }

    fn signing_keypair(&self, rng: &mut dyn RngCore) -> KeyPair {
        let mut sk = vec![0u8; 32];
        rng.fill_bytes(&mut sk);
        KeyPair { public: PublicKey(Self::derive(b"fast/sig-pk", &sk)), private: PrivateKey(sk) }
    }

    fn sign(&self, key: &PrivateKey, data: &[u8]) -> Signature {
        let pk = Self::derive(b"fast/sig-pk", &key.0);
        let mut h = Sha256::new();
        h.update(b"fast/sig");
        h.update(&pk);
        h.update(data);
        Signature(h.finalize().to_vec())
    }

    fn verify(&self, key: &PublicKey, data: &[u8], sig: &Signature) -> bool {
        let mut h = Sha256::new();
        h.update(b"fast/sig");
        h.update(&key.0);
        h.update(data);
        h.finalize().as_slice() == sig.0.as_slice()
    }

    fn encryption_keypair(&self, rng: &mut dyn RngCore) -> KeyPair {
        let mut sk = vec![0u8; 32];
        rng.fill_bytes(&mut sk);
        KeyPair { public: PublicKey(Self::derive(b"fast/pke-pk", &sk)), private: PrivateKey(sk) }
    }

    fn pke_encrypt(&self, key: &PublicKey, plaintext: &[u8], rng: &mut dyn RngCore) -> Vec<u8> {
        Self::seal_with(&key.0, plaintext, rng)
    }

    fn pke_decrypt(&self, key: &PrivateKey, ciphertext: &[u8]) -> Result<Vec<u8>, CryptoError> {
        Self::open_with(&Self::derive(b"fast/pke-pk", &key.0), ciphertext)
    }

    fn seal(&self, key: &SymKey, plaintext: &[u8], rng: &mut dyn RngCore) -> Vec<u8> {
        Self::seal_with(&key.0, plaintext, rng)
    }

    fn open(&self, key: &SymKey, ciphertext: &[u8]) -> Result<Vec<u8>, CryptoError> {
        Self::open_with(&key.0, ciphertext)
    }
}
