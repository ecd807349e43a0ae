//! (f+1)-out-of-n Shamir sharing over a [`PrimeField`].
//!
//! Reconstruction evaluates the interpolating polynomial at zero:
//! `s = Σ_i y_i · Π_{j≠i} x_j / (x_j − x_i)`.

use std::collections::HashSet;

use rand::RngCore;
use thiserror::Error;

use super::field::{FieldElement, PrimeField};
use super::OpCounter;
use crate::codec::{Decode, DecodeError, Encode, Reader, Writer};

#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub struct ShamirShare {
    pub x: FieldElement,
    pub y: FieldElement,
}

impl Encode for ShamirShare {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.x).put(&self.y);
    }
}

impl Decode for ShamirShare {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(ShamirShare { x: r.get()?, y: r.get()? })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ShamirError {
    #[error("evaluation point zero would reveal the secret")]
    ZeroPoint,
    #[error("duplicate evaluation point")]
    DuplicatePoint,
    #[error("need at least {need} shares, got {got}")]
    TooFewShares { need: usize, got: usize },
}

fn check_points<'a>(points: impl Iterator<Item = &'a FieldElement>) -> Result<(), ShamirError> {
    let mut seen = HashSet::new();
    for x in points {
        if x.is_zero() {
            return Err(ShamirError::ZeroPoint);
        }
        if !seen.insert(x) {
            return Err(ShamirError::DuplicatePoint);
        }
    }
    Ok(())
}

/// Evaluates the polynomial with the given coefficients (constant term first)
/// at every point, by Horner's rule.
pub fn share_with_coefficients(
    field: &PrimeField,
    coefficients: &[FieldElement],
    points: &[FieldElement],
    ops: &mut OpCounter,
) -> Result<Vec<ShamirShare>, ShamirError> {
    check_points(points.iter())?;
    let degree = coefficients.len().saturating_sub(1);
    if points.len() < degree + 1 {
        return Err(ShamirError::TooFewShares { need: degree + 1, got: points.len() });
    }
    Ok(points
        .iter()
        .map(|x| {
            let mut acc = coefficients.last().cloned().unwrap_or_else(|| field.zero());
            for a in coefficients.iter().rev().skip(1) {
                acc = field.add(&field.mul(&acc, x), a);
                ops.field_muls += 1;
            }
            ShamirShare { x: x.clone(), y: acc }
        })
        .collect())
}

/// Shares `secret` with a fresh degree-`f` polynomial.
pub fn share<R: RngCore + ?Sized>(
    field: &PrimeField,
    secret: &FieldElement,
    f: usize,
    points: &[FieldElement],
    rng: &mut R,
    ops: &mut OpCounter,
) -> Result<Vec<ShamirShare>, ShamirError> {
    let mut coefficients = Vec::with_capacity(f + 1);
    coefficients.push(secret.clone());
    coefficients.extend((0..f).map(|_| field.random(rng)));
    share_with_coefficients(field, &coefficients, points, ops)
}

/// Reconstructs from the first `f + 1` of `shares`.
pub fn reconstruct(
    field: &PrimeField,
    f: usize,
    shares: &[ShamirShare],
) -> Result<FieldElement, ShamirError> {
    if shares.len() < f + 1 {
        return Err(ShamirError::TooFewShares { need: f + 1, got: shares.len() });
    }
    let used = &shares[..f + 1];
    check_points(used.iter().map(|s| &s.x))?;
    let mut secret = field.zero();
    for (i, si) in used.iter().enumerate() {
        let mut lambda = field.one();
        for (j, sj) in used.iter().enumerate() {
            if i == j {
                continue;
            }
            let denom = field.sub(&sj.x, &si.x);
            let inv = field.inv(&denom).ok_or(ShamirError::DuplicatePoint)?;
            lambda = field.mul(&lambda, &field.mul(&sj.x, &inv));
        }
        secret = field.add(&secret, &field.mul(&si.y, &lambda));
    }
    Ok(secret)
}

/// Pairwise factors `x_j / (x_j − x_i)` for a fixed point set, computed once
/// so each reconstruction needs only multiplications.
#[derive(Clone, Debug)]
pub struct LagrangeTable {
    field: PrimeField,
    points: Vec<FieldElement>,
    factors: Vec<Vec<FieldElement>>,
}

impl LagrangeTable {
    pub fn new(field: PrimeField, points: Vec<FieldElement>) -> Result<Self, ShamirError> {
        check_points(points.iter())?;
        let n = points.len();
        let mut factors = vec![vec![field.zero(); n]; n];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let d = field.sub(&points[j], &points[i]);
                    let inv = field.inv(&d).expect("distinct points");
                    factors[i][j] = field.mul(&points[j], &inv);
                }
            }
        }
        Ok(LagrangeTable { field, points, factors })
    }

    /// Points `1..=n`.
    pub fn consecutive(field: PrimeField, n: usize) -> Self {
        let points = (1..=n as u64).map(|x| field.elem(x)).collect();
        LagrangeTable::new(field, points).expect("consecutive points are distinct and nonzero")
    }

    pub fn field(&self) -> &PrimeField {
        &self.field
    }

    pub fn points(&self) -> &[FieldElement] {
        &self.points
    }

    /// Reconstructs from `(index into points, y)` pairs; uses exactly the
    /// first `f + 1`.
    pub fn reconstruct(
        &self,
        f: usize,
        shares: &[(usize, FieldElement)],
    ) -> Result<FieldElement, ShamirError> {
        if shares.len() < f + 1 {
            return Err(ShamirError::TooFewShares { need: f + 1, got: shares.len() });
        }
        let used = &shares[..f + 1];
        let mut seen = HashSet::new();
        for (i, _) in used {
            if *i >= self.points.len() || !seen.insert(*i) {
                return Err(ShamirError::DuplicatePoint);
            }
        }
        let field = &self.field;
        let mut secret = field.zero();
        for (i, yi) in used {
            let mut lambda = field.one();
            for (j, _) in used {
                if i != j {
                    lambda = field.mul(&lambda, &self.factors[*i][*j]);
                }
            }
            secret = field.add(&secret, &field.mul(yi, &lambda));
        }
        Ok(secret)
    }
}
