//! A deterministic key-value store used as the replicated service.
//!
//! Results carry full post-images of every key they touch, so a passive
//! replica can apply a result as a delta and reach the same state as one that
//! executed the operation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::codec::{Decode, DecodeError, Encode, Reader, Writer};
use crate::primitives::{hash, Digest};
use crate::{ClientId, RequestId};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Operation {
    Put { key: String, value: i64 },
    Get { key: String },
    Increment { key: String, by: i64 },
}

impl Encode for Operation {
    fn encode(&self, w: &mut Writer) {
        match self {
            Operation::Put { key, value } => w.u8(1).str(key).i64(*value),
            Operation::Get { key } => w.u8(2).str(key),
            Operation::Increment { key, by } => w.u8(3).str(key).i64(*by),
        };
    }
}

impl Decode for Operation {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(match r.u8()? {
            1 => Operation::Put { key: r.string()?, value: r.i64()? },
            2 => Operation::Get { key: r.string()? },
            3 => Operation::Increment { key: r.string()?, by: r.i64()? },
            tag => return Err(DecodeError::UnknownTag { what: "operation", tag }),
        })
    }
}

/// `res`: the client-visible output plus post-images of the touched keys.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct AppResult {
    pub output: Option<i64>,
    pub delta: Vec<(String, i64)>,
}

impl Encode for AppResult {
    fn encode(&self, w: &mut Writer) {
        w.opt(self.output.map(|v| v as u64).as_ref());
        w.u32(self.delta.len() as u32);
        for (k, v) in &self.delta {
            w.str(k).i64(*v);
        }
    }
}

impl Decode for AppResult {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let output = r.opt::<u64>()?.map(|v| v as i64);
        let n = r.u32()? as usize;
        if n > r.remaining() {
            return Err(DecodeError::UnexpectedEof);
        }
        let mut delta = Vec::with_capacity(n);
        for _ in 0..n {
            delta.push((r.string()?, r.i64()?));
        }
        Ok(AppResult { output, delta })
    }
}

/// Store contents plus, per client, the last executed sequence number and its
/// result (for deduplication).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct KvStore {
    data: BTreeMap<String, i64>,
    last: BTreeMap<ClientId, (u64, AppResult)>,
    executed: u64,
}

impl KvStore {
    pub fn get(&self, key: &str) -> Option<i64> {
        self.data.get(key).copied()
    }

    /// Number of distinct requests executed or applied.
    pub fn executed(&self) -> u64 {
        self.executed
    }

    pub fn has_executed(&self, id: RequestId) -> bool {
        self.last.get(&id.client).is_some_and(|(seq, _)| *seq >= id.seq)
    }

    /// The stored result if `id` is the client's latest executed request.
    pub fn cached(&self, id: RequestId) -> Option<&AppResult> {
        self.last.get(&id.client).filter(|(seq, _)| *seq == id.seq).map(|(_, r)| r)
    }

    fn compute(&self, op: &Operation) -> AppResult {
        match op {
            Operation::Put { key, value } => AppResult {
                output: self.get(key),
                delta: vec![(key.clone(), *value)],
            },
            Operation::Get { key } => AppResult { output: self.get(key), delta: vec![] },
            Operation::Increment { key, by } => {
                let v = self.get(key).unwrap_or(0).wrapping_add(*by);
                AppResult { output: Some(v), delta: vec![(key.clone(), v)] }
            }
        }
    }

    /// Executes `op` for `id` unless already executed. Returns the result
    /// and whether this call changed the state.
    pub fn execute(&mut self, id: RequestId, op: &Operation) -> (AppResult, bool) {
        if let Some(r) = self.cached(id) {
            return (r.clone(), false);
        }
        if self.has_executed(id) {
            // An older request of a closed-loop client; nothing to return.
            return (AppResult::default(), false);
        }
        let res = self.compute(op);
        self.apply(id, &res);
        (res, true)
    }

    /// Applies `res` as a state delta. Returns false if `id` was already
    /// applied.
    pub fn apply(&mut self, id: RequestId, res: &AppResult) -> bool {
        if self.has_executed(id) {
            return false;
        }
        for (k, v) in &res.delta {
            self.data.insert(k.clone(), *v);
        }
        self.last.insert(id.client, (id.seq, res.clone()));
        self.executed += 1;
        true
    }

    pub fn digest(&self) -> Digest {
        hash(&self.to_bytes())
    }
}

impl Encode for KvStore {
    fn encode(&self, w: &mut Writer) {
        w.u64(self.executed);
        w.u32(self.data.len() as u32);
        for (k, v) in &self.data {
            w.str(k).i64(*v);
        }
        w.u32(self.last.len() as u32);
        for (c, (seq, res)) in &self.last {
            w.put(c).u64(*seq).put(res);
        }
    }
}

impl Decode for KvStore {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let executed = r.u64()?;
        let mut data = BTreeMap::new();
        for _ in 0..r.u32()? {
            data.insert(r.string()?, r.i64()?);
        }
        let mut last = BTreeMap::new();
        for _ in 0..r.u32()? {
            last.insert(r.get()?, (r.u64()?, r.get()?));
        }
        Ok(KvStore { data, last, executed })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(c: u32, s: u64) -> RequestId {
        RequestId { client: ClientId(c), seq: s }
    }

    #[test]
    fn operations() {
        let mut kv = KvStore::default();
        let (r, _) = kv.execute(id(0, 1), &Operation::Put { key: "a".into(), value: 5 });
        assert_eq!(r.output, None);
        let (r, _) = kv.execute(id(0, 2), &Operation::Increment { key: "a".into(), by: 3 });
        assert_eq!(r.output, Some(8));
        let (r, _) = kv.execute(id(1, 1), &Operation::Get { key: "a".into() });
        assert_eq!(r, AppResult { output: Some(8), delta: vec![] });
        assert_eq!(kv.executed(), 3);
    }

    #[test]
    fn duplicate_execution_is_idempotent() {
        let mut kv = KvStore::default();
        let op = Operation::Increment { key: "k".into(), by: 1 };
        let (r1, fresh1) = kv.execute(id(0, 1), &op);
        let (r2, fresh2) = kv.execute(id(0, 1), &op);
        assert!(fresh1 && !fresh2);
        assert_eq!(r1, r2);
        assert_eq!(kv.get("k"), Some(1));
    }

    #[test]
    fn delta_matches_execution() {
        let ops = [
            Operation::Put { key: "x".into(), value: 2 },
            Operation::Increment { key: "x".into(), by: 7 },
            Operation::Get { key: "x".into() },
            Operation::Increment { key: "y".into(), by: -1 },
        ];
        let mut exec = KvStore::default();
        let mut passive = KvStore::default();
        for (i, op) in ops.iter().enumerate() {
            let rid = id(3, i as u64 + 1);
            let (res, _) = exec.execute(rid, op);
            assert!(passive.apply(rid, &res));
            assert!(!passive.apply(rid, &res));
        }
        assert_eq!(exec.digest(), passive.digest());
        assert_eq!(KvStore::from_bytes(&exec.to_bytes()).unwrap(), exec);
    }

    #[test]
    fn result_encoding_round_trips() {
        let r = AppResult { output: Some(-4), delta: vec![("k".into(), i64::MIN)] };
        assert_eq!(AppResult::from_bytes(&r.to_bytes()).unwrap(), r);
        let r = AppResult::default();
        assert_eq!(AppResult::from_bytes(&r.to_bytes()).unwrap(), r);
    }
}
