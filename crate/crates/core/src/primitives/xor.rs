//! m-out-of-m XOR secret sharing.

use rand::RngCore;
use thiserror::Error;

use super::{OpCounter, Secret, XorShare};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum XorError {
    #[error("cannot split into zero shares")]
    NoShares,
}

/// Splits `secret` into `m` shares. The first `m - 1` are fresh random values;
/// the last is the correction that makes all `m` XOR to the secret.
pub fn split<R: RngCore + ?Sized>(
    secret: &Secret,
    m: usize,
    rng: &mut R,
    ops: &mut OpCounter,
) -> Result<Vec<XorShare>, XorError> {
    if m == 0 {
        return Err(XorError::NoShares);
    }
    let mut shares = Vec::with_capacity(m);
    let mut last = *secret;
    for _ in 1..m {
        let r = Secret::random(rng);
        last ^= r;
        ops.xors += 1;
        shares.push(r);
    }
    shares.push(last);
    Ok(shares)
}

pub fn combine(shares: &[XorShare]) -> Secret {
    shares.iter().fold(Secret::ZERO, |acc, s| acc ^ *s)
}
