//! Message trace and per-request message accounting.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::{NodeId, RequestId};

/// One sent message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub time: u64,
    pub from: NodeId,
    pub to: NodeId,
    pub tag: &'static str,
    /// Encoded size in octets.
    pub size: usize,
    /// The client request the message belongs to, if any.
    pub round: Option<RequestId>,
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {} {}", self.time, self.from, self.to, self.tag, self.size)?;
        match self.round {
            Some(r) => write!(f, " {r}"),
            None => write!(f, " -"),
        }
    }
}

/// Renders a trace as newline-terminated lines.
pub fn render(trace: &[TraceRecord]) -> String {
    let mut s = String::with_capacity(trace.len() * 32);
    for r in trace {
        s.push_str(&r.to_string());
        s.push('\n');
    }
    s
}

/// Normal-case messages attributed to one request.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseCounts {
    pub prepare: u64,
    pub commit_shares: u64,
    pub commit: u64,
    pub reply_shares: u64,
    pub reply: u64,
}

impl PhaseCounts {
    pub fn total(&self) -> u64 {
        self.prepare + self.commit_shares + self.commit + self.reply_shares + self.reply
    }
}

/// Counts the messages of `request` by phase. SHAREs sent before the first
/// COMMIT for the request belong to the commit phase, later ones to the
/// reply phase.
pub fn count_messages(trace: &[TraceRecord], request: RequestId) -> PhaseCounts {
    let mut c = PhaseCounts::default();
    let mut committed = false;
    for r in trace.iter().filter(|r| r.round == Some(request)) {
        match r.tag {
            "PREPARE" | "FALLBACK-PREPARE" => c.prepare += 1,
            "COMMIT" | "FALLBACK-COMMIT" => {
                committed = true;
                c.commit += 1;
            }
            "SHARE" | "FALLBACK-SHARE" if committed => c.reply_shares += 1,
            "SHARE" | "FALLBACK-SHARE" => c.commit_shares += 1,
            "REPLY" => c.reply += 1,
            _ => {}
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{ClientId, ReplicaId};

    fn rec(tag: &'static str, round: Option<RequestId>) -> TraceRecord {
        TraceRecord {
            time: 1,
            from: ReplicaId(0).into(),
            to: ReplicaId(1).into(),
            tag,
            size: 10,
            round,
        }
    }

    #[test]
    fn shares_split_at_first_commit() {
        let id = RequestId { client: ClientId(0), seq: 1 };
        let other = RequestId { client: ClientId(1), seq: 1 };
        let trace = vec![
            rec("PREPARE", Some(id)),
            rec("SHARE", Some(id)),
            rec("SHARE", Some(other)),
            rec("COMMIT", Some(id)),
            rec("SHARE", Some(id)),
            rec("SHARE", Some(id)),
            rec("REPLY", Some(id)),
            rec("PREPROCESS", None),
        ];
        let c = count_messages(&trace, id);
        assert_eq!(
            c,
            PhaseCounts { prepare: 1, commit_shares: 1, commit: 1, reply_shares: 2, reply: 1 }
        );
        assert_eq!(c.total(), 6);
    }

    #[test]
    fn record_line_format() {
        let id = RequestId { client: ClientId(2), seq: 7 };
        assert_eq!(rec("SHARE", Some(id)).to_string(), "1 r0 r1 SHARE 10 c2:7");
        assert_eq!(rec("PROBE", None).to_string(), "1 r0 r1 PROBE 10 -");
    }
}
