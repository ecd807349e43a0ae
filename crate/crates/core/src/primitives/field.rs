//! Arithmetic modulo a prime, used by the fallback's Shamir sharing.

use std::fmt;

use num_bigint::BigUint;
use num_traits::{One, Zero};
use rand::RngCore;

use super::{Secret, SECRET_LEN};
use crate::codec::{Decode, DecodeError, Encode, Reader, Writer};

/// Smallest prime above 2^128, as a decimal string.
pub const DEFAULT_MODULUS: &str = "340282366920938463463374607431768211507";

/// A small prime for hand-checkable examples.
pub const SMALL_TEST_MODULUS: u64 = 257;

#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FieldElement(BigUint);

impl FieldElement {
    pub fn value(&self) -> &BigUint {
        &self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_zero()
    }
}

impl fmt::Debug for FieldElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl Encode for FieldElement {
    fn encode(&self, w: &mut Writer) {
        w.bytes(&self.0.to_bytes_be());
    }
}

impl Decode for FieldElement {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(FieldElement(BigUint::from_bytes_be(&r.bytes()?)))
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct PrimeField {
    p: BigUint,
    p_minus_two: BigUint,
    byte_len: usize,
}

impl fmt::Debug for PrimeField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "GF({})", self.p)
    }
}

impl Default for PrimeField {
    fn default() -> Self {
        PrimeField::new(DEFAULT_MODULUS.parse().expect("modulus literal"))
    }
}

impl PrimeField {
    /// The caller is responsible for `p` being prime; inversion relies on it.
    pub fn new(p: BigUint) -> Self {
        assert!(p > BigUint::from(2u8), "modulus must exceed 2");
        let byte_len = p.bits().div_ceil(8) as usize;
        PrimeField { p_minus_two: &p - 2u8, p, byte_len }
    }

    pub fn small(p: u64) -> Self {
        PrimeField::new(BigUint::from(p))
    }

    pub fn modulus(&self) -> &BigUint {
        &self.p
    }

    /// Whether every 128-bit secret embeds into the field without reduction.
    pub fn holds_secrets(&self) -> bool {
        self.p.bits() > (SECRET_LEN as u64) * 8
    }

    pub fn elem(&self, v: u64) -> FieldElement {
        FieldElement(BigUint::from(v) % &self.p)
    }

    pub fn from_biguint(&self, v: BigUint) -> FieldElement {
        FieldElement(v % &self.p)
    }

    pub fn zero(&self) -> FieldElement {
        FieldElement(BigUint::zero())
    }

    pub fn one(&self) -> FieldElement {
        FieldElement(BigUint::one())
    }

    pub fn contains(&self, a: &FieldElement) -> bool {
        a.0 < self.p
    }

    pub fn add(&self, a: &FieldElement, b: &FieldElement) -> FieldElement {
        FieldElement((&a.0 + &b.0) % &self.p)
    }

    pub fn sub(&self, a: &FieldElement, b: &FieldElement) -> FieldElement {
        FieldElement((&a.0 + &self.p - &b.0 % &self.p) % &self.p)
    }

    pub fn mul(&self, a: &FieldElement, b: &FieldElement) -> FieldElement {
        FieldElement((&a.0 * &b.0) % &self.p)
    }

    /// Multiplicative inverse by Fermat's little theorem; `None` for zero.
    pub fn inv(&self, a: &FieldElement) -> Option<FieldElement> {
        if (&a.0 % &self.p).is_zero() {
            return None;
        }
        Some(FieldElement(a.0.modpow(&self.p_minus_two, &self.p)))
    }

    /// Uniform element by rejection sampling.
    pub fn random<R: RngCore + ?Sized>(&self, rng: &mut R) -> FieldElement {
        let excess = self.byte_len as u64 * 8 - self.p.bits();
        let mut buf = vec![0u8; self.byte_len];
        loop {
            rng.fill_bytes(&mut buf);
            buf[0] &= 0xff >> excess;
            let v = BigUint::from_bytes_be(&buf);
            if v < self.p {
                return FieldElement(v);
            }
        }
    }

    /// Embeds a secret as a big-endian integer. Requires [`Self::holds_secrets`].
    pub fn from_secret(&self, s: &Secret) -> FieldElement {
        debug_assert!(self.holds_secrets());
        self.from_biguint(BigUint::from_bytes_be(&s.0))
    }

    /// Inverse of [`Self::from_secret`]; `None` if the value exceeds 128 bits.
    pub fn to_secret(&self, a: &FieldElement) -> Option<Secret> {
        let bytes = a.0.to_bytes_be();
        if bytes.len() > SECRET_LEN {
            return None;
        }
        let mut out = [0u8; SECRET_LEN];
        out[SECRET_LEN - bytes.len()..].copy_from_slice(&bytes);
        Some(Secret(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn default_modulus_is_just_above_two_to_128() {
        let f = PrimeField::default();
        let two128 = BigUint::one() << 128;
        assert!(f.modulus() > &two128);
        assert_eq!(f.modulus() - &two128, BigUint::from(51u8));
        assert!(f.holds_secrets());
        assert!(!PrimeField::small(257).holds_secrets());
    }

    #[test]
    fn default_modulus_passes_fermat_checks() {
        let f = PrimeField::default();
        let p = f.modulus();
        for a in [2u32, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37] {
            let a = BigUint::from(a);
            assert_eq!(a.modpow(&(p - 1u8), p), BigUint::one());
        }
    }

    #[test]
    fn small_field_arithmetic() {
        let f = PrimeField::small(257);
        assert_eq!(f.add(&f.elem(250), &f.elem(10)), f.elem(3));
        assert_eq!(f.sub(&f.elem(1), &f.elem(2)), f.elem(256));
        assert_eq!(f.mul(&f.elem(16), &f.elem(16)), f.elem(256));
        for a in 1..257 {
            let a = f.elem(a);
            assert_eq!(f.mul(&a, &f.inv(&a).unwrap()), f.one());
        }
        assert!(f.inv(&f.zero()).is_none());
    }

    #[test]
    fn random_stays_in_range_and_covers() {
        let f = PrimeField::small(257);
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..20_000 {
            let e = f.random(&mut rng);
            assert!(f.contains(&e));
            seen.insert(e);
        }
        assert_eq!(seen.len(), 257);
    }

    #[test]
    fn secret_embedding_round_trips() {
        let f = PrimeField::default();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        for _ in 0..100 {
            let s = Secret::random(&mut rng);
            assert_eq!(f.to_secret(&f.from_secret(&s)), Some(s));
        }
        let big = f.sub(&f.zero(), &f.one());
        assert_eq!(f.to_secret(&big), None);
    }

    #[test]
    fn element_encoding_round_trips() {
        let f = PrimeField::default();
        let e = f.sub(&f.zero(), &f.elem(5));
        assert_eq!(FieldElement::from_bytes(&e.to_bytes()).unwrap(), e);
    }
}
