//! The primary-rooted aggregation tree over the active replicas.
//!
//! Nodes are kept in heap order: the node at position `k` has children at
//! positions `k*d + 1 ..= k*d + d`. Any ordering of the actives therefore
//! yields a balanced tree of minimal depth.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::codec::{Decode, DecodeError, Encode, Reader, Writer};
use crate::primitives::{hash, Digest};
use crate::ReplicaId;

pub const DEFAULT_BRANCHING: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopologyError {
    #[error("no active replicas")]
    Empty,
    #[error("branching factor must be at least 1")]
    ZeroBranching,
    #[error("primary {0} is not among the actives")]
    PrimaryNotActive(ReplicaId),
    #[error("replica {0} listed twice")]
    Duplicate(ReplicaId),
    #[error("replica {0} is not in the tree")]
    UnknownNode(ReplicaId),
    #[error("the root cannot be accused; primary faults go through view change")]
    AccusedIsRoot,
    #[error("replacement {0} is already active")]
    ReplacementActive(ReplicaId),
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct TreeTopology {
    order: Vec<ReplicaId>,
    d: usize,
}

impl std::fmt::Debug for TreeTopology {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tree(d={}; ", self.d)?;
        for (k, n) in self.order.iter().enumerate() {
            match self.parent_pos(k) {
                None => write!(f, "{n}")?,
                Some(p) => write!(f, " {n}<{}", self.order[p])?,
            }
        }
        write!(f, ")")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Relations {
    pub parent: Option<ReplicaId>,
    pub children: Vec<ReplicaId>,
    pub descendants: BTreeSet<ReplicaId>,
}

impl TreeTopology {
    /// Places `primary` at the root and the remaining actives in the given
    /// order.
    pub fn build(
        primary: ReplicaId,
        actives: &[ReplicaId],
        d: usize,
    ) -> Result<Self, TopologyError> {
        if actives.is_empty() {
            return Err(TopologyError::Empty);
        }
        if d == 0 {
            return Err(TopologyError::ZeroBranching);
        }
        if !actives.contains(&primary) {
            return Err(TopologyError::PrimaryNotActive(primary));
        }
        let mut seen = BTreeSet::new();
        for a in actives {
            if !seen.insert(*a) {
                return Err(TopologyError::Duplicate(*a));
            }
        }
        let mut order = Vec::with_capacity(actives.len());
        order.push(primary);
        order.extend(actives.iter().copied().filter(|a| *a != primary));
        Ok(TreeTopology { order, d })
    }

    /// A star: every other replica is a direct child of the primary.
    pub fn star(primary: ReplicaId, replicas: &[ReplicaId]) -> Result<Self, TopologyError> {
        Self::build(primary, replicas, replicas.len().saturating_sub(1).max(1))
    }

    pub fn root(&self) -> ReplicaId {
        self.order[0]
    }

    pub fn branching(&self) -> usize {
        self.d
    }

    /// Nodes in level order.
    pub fn nodes(&self) -> &[ReplicaId] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn contains(&self, r: ReplicaId) -> bool {
        self.order.contains(&r)
    }

    fn pos(&self, r: ReplicaId) -> Result<usize, TopologyError> {
        self.order.iter().position(|x| *x == r).ok_or(TopologyError::UnknownNode(r))
    }

    fn parent_pos(&self, k: usize) -> Option<usize> {
        (k > 0).then(|| (k - 1) / self.d)
    }

    fn child_positions(&self, k: usize) -> std::ops::Range<usize> {
        let lo = (k * self.d + 1).min(self.order.len());
        let hi = (k * self.d + self.d + 1).min(self.order.len());
        lo..hi
    }

    pub fn parent(&self, r: ReplicaId) -> Option<ReplicaId> {
        self.pos(r).ok().and_then(|k| self.parent_pos(k)).map(|p| self.order[p])
    }

    pub fn children(&self, r: ReplicaId) -> Vec<ReplicaId> {
        match self.pos(r) {
            Ok(k) => self.child_positions(k).map(|c| self.order[c]).collect(),
            Err(_) => Vec::new(),
        }
    }

    pub fn is_leaf(&self, r: ReplicaId) -> bool {
        self.children(r).is_empty()
    }

    pub fn relations(&self, r: ReplicaId) -> Result<Relations, TopologyError> {
        let k = self.pos(r)?;
        let mut descendants = BTreeSet::new();
        let mut frontier: Vec<usize> = self.child_positions(k).collect();
        while let Some(c) = frontier.pop() {
            descendants.insert(self.order[c]);
            frontier.extend(self.child_positions(c));
        }
        Ok(Relations {
            parent: self.parent_pos(k).map(|p| self.order[p]),
            children: self.child_positions(k).map(|c| self.order[c]).collect(),
            descendants,
        })
    }

    fn level_of(&self, mut k: usize) -> usize {
        let mut level = 0;
        while let Some(p) = self.parent_pos(k) {
            k = p;
            level += 1;
        }
        level
    }

    /// Number of edges from the root to the deepest node.
    pub fn depth(&self) -> usize {
        self.level_of(self.order.len() - 1)
    }

    /// Number of edges from `r` down to its deepest descendant.
    pub fn height(&self, r: ReplicaId) -> usize {
        let Ok(mut k) = self.pos(r) else { return 0 };
        let mut h = 0;
        loop {
            let first = k * self.d + 1;
            if first >= self.order.len() {
                return h;
            }
            k = first;
            h += 1;
        }
    }

    /// Distance of `r` from the root.
    pub fn level(&self, r: ReplicaId) -> Option<usize> {
        self.pos(r).ok().map(|k| self.level_of(k))
    }

    /// Replaces `accused` with `replacement` and moves `accuser` to a leaf.
    ///
    /// If the accused slot is a leaf the accuser takes it and the replacement
    /// takes the accuser's old slot, so only two slots change. Otherwise the
    /// accuser is swapped with the lowest-index node on the deepest level.
    /// The root never moves.
    pub fn after_suspect(
        &self,
        accused: ReplicaId,
        replacement: ReplicaId,
        accuser: ReplicaId,
    ) -> Result<TreeTopology, TopologyError> {
        let accused_pos = self.pos(accused)?;
        if accused_pos == 0 {
            return Err(TopologyError::AccusedIsRoot);
        }
        if self.contains(replacement) {
            return Err(TopologyError::ReplacementActive(replacement));
        }
        let accuser_pos = self.pos(accuser)?;
        let mut next = self.clone();
        next.order[accused_pos] = replacement;
        if accuser_pos == 0 || next.child_positions(accuser_pos).is_empty() {
            return Ok(next);
        }
        let target = if next.child_positions(accused_pos).is_empty() {
            accused_pos
        } else {
            let deepest = next.depth();
            (0..next.order.len()).find(|&k| next.level_of(k) == deepest).expect("non-empty")
        };
        next.order.swap(accuser_pos, target);
        Ok(next)
    }

    /// Digest bound by a NEW-TREE: `H(T || T')`.
    pub fn change_digest(old: &TreeTopology, new: &TreeTopology) -> Digest {
        let mut w = Writer::default();
        w.raw(b"fastbft/new-tree").put(old).put(new);
        hash(&w.into_bytes())
    }
}

/// Root id, then a count-prefixed level-order list of `(node, parent)`.
impl Encode for TreeTopology {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.root());
        w.u32((self.order.len() - 1) as u32);
        for k in 1..self.order.len() {
            w.put(&self.order[k]).put(&self.order[self.parent_pos(k).unwrap()]);
        }
    }
}

/// The branching factor is not on the wire; it is recovered as the root's
/// child count, which yields the same parent map as the original.
impl Decode for TreeTopology {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let root: ReplicaId = r.get()?;
        let count = r.u32()? as usize;
        if count.saturating_mul(8) > r.remaining() {
            return Err(DecodeError::Invalid("tree size"));
        }
        let mut order = vec![root];
        let mut parents = Vec::with_capacity(count);
        for _ in 0..count {
            order.push(r.get()?);
            parents.push(r.get::<ReplicaId>()?);
        }
        let d = parents.iter().filter(|p| **p == root).count().max(1);
        let tree = TreeTopology { order, d };
        let mut seen = BTreeSet::new();
        for (k, n) in tree.order.iter().enumerate() {
            if !seen.insert(*n) {
                return Err(DecodeError::Invalid("tree: duplicate node"));
            }
            if k > 0 && tree.order[tree.parent_pos(k).unwrap()] != parents[k - 1] {
                return Err(DecodeError::Invalid("tree: not in heap order"));
            }
        }
        Ok(tree)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(i: u32) -> ReplicaId {
        ReplicaId(i)
    }

    #[test]
    fn one_level() {
        let t = TreeTopology::build(r(0), &[r(0), r(1), r(2)], 2).unwrap();
        assert_eq!(t.children(r(0)), vec![r(1), r(2)]);
        assert!(t.is_leaf(r(1)) && t.is_leaf(r(2)));
        assert_eq!(t.depth(), 1);
    }

    #[test]
    fn heap_index_placement() {
        let t = TreeTopology::build(r(0), &[r(0), r(1), r(2), r(3)], 2).unwrap();
        assert_eq!(t.children(r(0)), vec![r(1), r(2)]);
        assert_eq!(t.children(r(1)), vec![r(3)]);
        assert_eq!(t.parent(r(3)), Some(r(1)));
        assert_eq!(t.height(r(0)), 2);
        assert_eq!(t.height(r(1)), 1);
        assert_eq!(t.height(r(2)), 0);
    }

    #[test]
    fn branching_one_is_a_chain() {
        let ids: Vec<_> = (0..5).map(r).collect();
        let t = TreeTopology::build(r(0), &ids, 1).unwrap();
        for w in ids.windows(2) {
            assert_eq!(t.children(w[0]), vec![w[1]]);
        }
        assert_eq!(t.depth(), 4);
    }

    #[test]
    fn primary_moves_to_root() {
        let t = TreeTopology::build(r(2), &[r(0), r(1), r(2)], 2).unwrap();
        assert_eq!(t.root(), r(2));
        assert_eq!(t.children(r(2)), vec![r(0), r(1)]);
    }

    #[test]
    fn build_errors() {
        assert_eq!(TreeTopology::build(r(0), &[], 2), Err(TopologyError::Empty));
        assert_eq!(TreeTopology::build(r(0), &[r(0)], 0), Err(TopologyError::ZeroBranching));
        assert_eq!(
            TreeTopology::build(r(9), &[r(0)], 2),
            Err(TopologyError::PrimaryNotActive(r(9)))
        );
        assert_eq!(
            TreeTopology::build(r(0), &[r(0), r(1), r(1)], 2),
            Err(TopologyError::Duplicate(r(1)))
        );
    }

    #[test]
    fn relations_root_and_leaf() {
        let t = TreeTopology::build(r(0), &[r(0), r(1), r(2), r(3)], 2).unwrap();
        let root = t.relations(r(0)).unwrap();
        assert_eq!(root.parent, None);
        assert_eq!(root.descendants.len(), 3);
        let leaf = t.relations(r(3)).unwrap();
        assert!(leaf.descendants.is_empty());
        assert!(leaf.children.is_empty());
        assert_eq!(t.relations(r(7)), Err(TopologyError::UnknownNode(r(7))));
    }

    #[test]
    fn suspect_example() {
        // P:{A,B}, A:{C}; C is accused by A, X replaces it.
        let t = TreeTopology::build(r(0), &[r(0), r(1), r(2), r(3)], 2).unwrap();
        let t2 = t.after_suspect(r(3), r(9), r(1)).unwrap();
        assert!(!t2.contains(r(3)));
        assert!(t2.contains(r(9)));
        assert!(t2.is_leaf(r(1)));
        assert_eq!(t2.root(), r(0));
        assert_eq!(t2.len(), 4);
    }

    #[test]
    fn leaf_accused_changes_two_slots() {
        let ids: Vec<_> = (0..7).map(r).collect();
        let t = TreeTopology::build(r(0), &ids, 2).unwrap();
        // r(4) is a leaf under r(1).
        let t2 = t.after_suspect(r(4), r(20), r(1)).unwrap();
        let changed = t.nodes().iter().zip(t2.nodes()).filter(|(a, b)| a != b).count();
        assert_eq!(changed, 2);
        assert!(t2.is_leaf(r(1)));
    }

    #[test]
    fn accusing_root_rejected() {
        let t = TreeTopology::build(r(0), &[r(0), r(1), r(2)], 2).unwrap();
        assert_eq!(t.after_suspect(r(0), r(5), r(1)), Err(TopologyError::AccusedIsRoot));
        assert_eq!(
            t.after_suspect(r(1), r(2), r(0)),
            Err(TopologyError::ReplacementActive(r(2)))
        );
    }

    #[test]
    fn internal_accused_moves_accuser_to_deepest_level() {
        let ids: Vec<_> = (0..7).map(r).collect();
        let t = TreeTopology::build(r(0), &ids, 2).unwrap();
        // r(1) is internal; accused by r(2), which is also internal.
        let t2 = t.after_suspect(r(1), r(30), r(2)).unwrap();
        assert!(t2.is_leaf(r(2)));
        assert_eq!(t2.level(r(2)), Some(t2.depth()));
    }

    #[test]
    fn encoding_round_trips() {
        for d in 1..4 {
            for n in 1..10u32 {
                let ids: Vec<_> = (0..n).map(r).collect();
                let t = TreeTopology::build(r(0), &ids, d).unwrap();
                let back = TreeTopology::from_bytes(&t.to_bytes()).unwrap();
                for id in &ids {
                    assert_eq!(back.relations(*id), t.relations(*id));
                }
            }
        }
    }

    #[test]
    fn malformed_encoding_rejected() {
        let t = TreeTopology::build(r(0), &[r(0), r(1), r(2), r(3)], 2).unwrap();
        let mut bytes = t.to_bytes();
        // The last pair's parent: point r(3) at r(2) instead of r(1).
        let n = bytes.len();
        bytes[n - 1] = 2;
        assert!(TreeTopology::from_bytes(&bytes).is_err());
    }
}
