//! Cryptographic and secret-sharing building blocks.
//!
//! The hash is always SHA-256. Signatures and encryption go through a
//! [`CryptoProvider`] so simulations can choose between real algorithms and a
//! fast keyed stand-in. All randomness is drawn from a caller-supplied
//! generator.

mod crypto;
pub mod field;
pub mod shamir;
pub mod xor;

use std::fmt;
use std::ops::{BitXor, BitXorAssign};

use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::codec::{Decode, DecodeError, Encode, Reader, Writer};
use crate::CounterValue;

pub use crypto::{
    Crypto, CryptoBackend, CryptoError, CryptoProvider, FastCrypto, KeyPair, PrivateKey,
    PublicKey, RealCrypto, Signature, SymKey,
};
pub use field::{FieldElement, PrimeField};
pub use shamir::{LagrangeTable, ShamirShare};

/// Length in octets of a [`Secret`] and of every XOR share.
pub const SECRET_LEN: usize = 16;

/// A 32-octet SHA-256 digest.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct Digest(pub [u8; 32]);

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest(")?;
        for b in &self.0[..6] {
            write!(f, "{b:02x}")?;
        }
        write!(f, "..)")
    }
}

impl Encode for Digest {
    fn encode(&self, w: &mut Writer) {
        w.raw(&self.0);
    }
}

impl Decode for Digest {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Digest(r.raw()?))
    }
}

pub fn hash(data: &[u8]) -> Digest {
    Digest(Sha256::digest(data).into())
}

/// Hash of the concatenated canonical encodings of `parts`.
pub fn hash_encoded(parts: &[&dyn EncodeDyn]) -> Digest {
    let mut w = Writer::default();
    for p in parts {
        p.encode_dyn(&mut w);
    }
    hash(&w.into_bytes())
}

/// Object-safe shim over [`Encode`] so heterogeneous values can be hashed
/// together.
pub trait EncodeDyn {
    fn encode_dyn(&self, w: &mut Writer);
}

impl<T: Encode> EncodeDyn for T {
    fn encode_dyn(&self, w: &mut Writer) {
        self.encode(w)
    }
}

/// A 128-bit secret `s_c`. XOR shares use the same representation.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Secret(pub [u8; SECRET_LEN]);

/// One XOR share of a [`Secret`].
pub type XorShare = Secret;

impl Secret {
    pub const ZERO: Secret = Secret([0; SECRET_LEN]);

    pub fn random<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        let mut s = [0u8; SECRET_LEN];
        rng.fill_bytes(&mut s);
        Secret(s)
    }

    pub fn as_bytes(&self) -> &[u8; SECRET_LEN] {
        &self.0
    }
}

impl fmt::Debug for Secret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Secret(")?;
        for b in &self.0[..4] {
            write!(f, "{b:02x}")?;
        }
        write!(f, "..)")
    }
}

impl BitXor for Secret {
    type Output = Secret;

    fn bitxor(mut self, rhs: Secret) -> Secret {
        self ^= rhs;
        self
    }
}

impl BitXorAssign for Secret {
    fn bitxor_assign(&mut self, rhs: Secret) {
        for (a, b) in self.0.iter_mut().zip(rhs.0) {
            *a ^= b;
        }
    }
}

impl Encode for Secret {
    fn encode(&self, w: &mut Writer) {
        w.raw(&self.0);
    }
}

impl Decode for Secret {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Secret(r.raw()?))
    }
}

/// The commitment `h_c = H(<s_c, (c, v)>)` binding a secret to a counter.
pub fn commitment_digest(secret: &Secret, at: CounterValue) -> Digest {
    let mut w = Writer::default();
    w.raw(b"fastbft/commit").put(secret).put(&at);
    hash(&w.into_bytes())
}

/// Digest a parent uses to check a child's partial aggregate `ŝ_j`.
pub fn share_digest(aggregate: &Secret) -> Digest {
    let mut w = Writer::default();
    w.raw(b"fastbft/share").put(aggregate);
    hash(&w.into_bytes())
}

/// Tally of the arithmetic performed while generating shares.
///
/// XOR sharing counts 128-bit XORs; Shamir sharing counts field
/// multiplications. Used to measure how preprocessing cost scales with `n`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounter {
    pub xors: u64,
    pub field_muls: u64,
    pub hashes: u64,
    pub seals: u64,
}

impl OpCounter {
    pub fn share_ops(&self) -> u64 {
        self.xors + self.field_muls
    }
}

impl std::ops::AddAssign for OpCounter {
    fn add_assign(&mut self, o: OpCounter) {
        self.xors += o.xors;
        self.field_muls += o.field_muls;
        self.hashes += o.hashes;
        self.seals += o.seals;
    }
}
