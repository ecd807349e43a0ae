use fastbft::codec::{Decode, Encode};
use fastbft::primitives::{Digest, PrimeField, Secret, Signature};
use fastbft::protocol::{AppResult, Operation, ProtocolMessage, Reply, Request};
use fastbft::tee::{BindingKind, CounterAssignment, ShareBlob};
use fastbft::{ClientId, CounterValue, ReplicaId, RequestId};
use proptest::prelude::*;

fn counter() -> impl Strategy<Value = CounterValue> {
    (any::<u64>(), any::<u64>()).prop_map(|(c, v)| CounterValue::new(c, v))
}

fn bytes(max: usize) -> impl Strategy<Value = Vec<u8>> {
    proptest::collection::vec(any::<u8>(), 0..max)
}

fn key() -> impl Strategy<Value = String> {
    "[a-z0-9]{0,12}"
}

fn op() -> impl Strategy<Value = Operation> {
    prop_oneof![
        (key(), any::<i64>()).prop_map(|(key, value)| Operation::Put { key, value }),
        key().prop_map(|key| Operation::Get { key }),
        (key(), any::<i64>()).prop_map(|(key, by)| Operation::Increment { key, by }),
    ]
}

fn request() -> impl Strategy<Value = Request> {
    (any::<u32>(), any::<u64>(), op(), bytes(80)).prop_map(|(c, seq, op, sig)| Request {
        id: RequestId { client: ClientId(c), seq },
        op,
        signature: Signature(sig),
    })
}

fn result() -> impl Strategy<Value = AppResult> {
    (proptest::option::of(any::<i64>()), proptest::collection::vec((key(), any::<i64>()), 0..4))
        .prop_map(|(output, delta)| AppResult { output, delta })
}

fn binding() -> impl Strategy<Value = CounterAssignment> {
    (0u8..3, any::<u32>(), any::<[u8; 32]>(), counter(), bytes(80)).prop_map(|(k, i, d, c, s)| CounterAssignment {
        kind: [BindingKind::Counter, BindingKind::Commitment, BindingKind::Attestation][k as usize],
        issuer: ReplicaId(i),
        digest: Digest(d),
        counter: c,
        signature: Signature(s),
    })
}

fn secret() -> impl Strategy<Value = Secret> {
    any::<[u8; 16]>().prop_map(Secret)
}

fn message() -> impl Strategy<Value = ProtocolMessage> {
    prop_oneof![
        request().prop_map(ProtocolMessage::Request),
        (counter(), proptest::collection::vec((counter(), bytes(64).prop_map(ShareBlob)), 0..4))
            .prop_map(|(epoch, blobs)| ProtocolMessage::Preprocess { epoch, blobs }),
        (request(), binding()).prop_map(|(request, binding)| ProtocolMessage::Prepare { request, binding }),
        (request(), binding()).prop_map(|(request, binding)| ProtocolMessage::FallbackPrepare { request, binding }),
        (counter(), secret()).prop_map(|(counter, aggregate)| ProtocolMessage::Share { counter, aggregate }),
        (secret(), result(), binding())
            .prop_map(|(secret, result, binding)| ProtocolMessage::Commit { secret, result, binding }),
        (secret(), result(), binding())
            .prop_map(|(secret, result, binding)| ProtocolMessage::FallbackCommit { secret, result, binding }),
        (request(), result(), binding(), binding(), secret(), binding(), binding(), secret()).prop_map(
            |(request, result, commitment_c, prepare, secret_c, commitment_c1, commit, secret_c1)| {
                ProtocolMessage::Reply(Box::new(Reply {
                    request,
                    result,
                    commitment_c,
                    prepare,
                    secret_c,
                    commitment_c1,
                    commit,
                    secret_c1,
                }))
            }
        ),
        (any::<u32>(), any::<u32>(), counter()).prop_map(|(a, b, round)| ProtocolMessage::Suspect {
            accused: ReplicaId(a),
            accuser: ReplicaId(b),
            round,
        }),
        (any::<u64>(), any::<[u8; 32]>(), binding()).prop_map(|(target, d, attestation)| {
            ProtocolMessage::ViewChange { target, digest: Digest(d), attestation }
        }),
        any::<[u8; 16]>().prop_map(|nonce| ProtocolMessage::Rejoin { nonce }),
        counter().prop_map(|after| ProtocolMessage::Retransmit { after }),
        (counter(), any::<u64>()).prop_map(|(counter, y)| ProtocolMessage::FallbackShare {
            counter,
            y: PrimeField::default().elem(y),
        }),
        any::<u64>().prop_map(|nonce| ProtocolMessage::Probe { nonce }),
        any::<u64>().prop_map(|nonce| ProtocolMessage::ProbeAck { nonce }),
    ]
}

proptest! {
    #[test]
    fn messages_round_trip(m in message()) {
        let bytes = m.to_bytes();
        prop_assert_eq!(ProtocolMessage::from_bytes(&bytes).unwrap(), m.clone());
        // Serialization is canonical.
        prop_assert_eq!(ProtocolMessage::from_bytes(&bytes).unwrap().to_bytes(), bytes.clone());
    }

    #[test]
    fn truncated_or_padded_messages_are_rejected(m in message(), cut in any::<prop::sample::Index>()) {
        let bytes = m.to_bytes();
        let at = cut.index(bytes.len());
        prop_assert!(ProtocolMessage::from_bytes(&bytes[..at]).is_err());
        let mut padded = bytes.clone();
        padded.push(0);
        prop_assert!(ProtocolMessage::from_bytes(&padded).is_err());
    }

    #[test]
    fn decoding_garbage_never_panics(data in bytes(512)) {
        let _ = ProtocolMessage::from_bytes(&data);
    }
}

#[test]
fn tags_are_distinct() {
    let msgs = [
        ProtocolMessage::Probe { nonce: 1 },
        ProtocolMessage::ProbeAck { nonce: 1 },
        ProtocolMessage::Rejoin { nonce: [0; 16] },
        ProtocolMessage::Retransmit { after: CounterValue::new(1, 0) },
    ];
    let first: Vec<u8> = msgs.iter().map(|m| m.to_bytes()[0]).collect();
    let mut dedup = first.clone();
    dedup.sort();
    dedup.dedup();
    assert_eq!(dedup.len(), first.len());
    assert!(ProtocolMessage::from_bytes(&[0]).is_err());
    assert!(ProtocolMessage::from_bytes(&[]).is_err());
}
