//! Packet generators and the malformed-input corpus.

#![allow(dead_code)]

use bytes::Bytes;
use proptest::collection::vec;
use proptest::prelude::*;
use sctp_dc::wire::{
    Chunk, CodecConfig, DataChunk, DataFlags, DecodeError, GapBlock, InitParams, Packet, SackChunk,
    Ssn, StreamId, Tsn,
};

fn arb_bytes(max: usize) -> impl Strategy<Value = Bytes> {
    vec(any::<u8>(), 0..=max).prop_map(Bytes::from)
}

fn arb_init() -> impl Strategy<Value = InitParams> {
    (
        any::<u32>(),
        any::<u32>(),
        any::<u16>(),
        any::<u16>(),
        any::<u32>(),
    )
        .prop_map(|(t, w, o, i, tsn)| InitParams {
            init_tag: t,
            a_rwnd: w,
            n_out_streams: o,
            n_in_streams: i,
            initial_tsn: Tsn(tsn),
        })
}

/// Sorted, disjoint, non-adjacent gap blocks built from positive step sizes.
fn arb_gaps() -> impl Strategy<Value = Vec<GapBlock>> {
    vec((2u16..50, 0u16..20), 0..8).prop_map(|steps| {
        let mut out = Vec::new();
        let mut at = 0u16;
        for (skip, width) in steps {
            let start = at + skip;
            let end = start + width;
            out.push(GapBlock { start, end });
            at = end;
        }
        out
    })
}

fn arb_data() -> impl Strategy<Value = Chunk> {
    (
        any::<u32>(),
        any::<u16>(),
        any::<u16>(),
        any::<[bool; 3]>(),
        vec(any::<u8>(), 1..200),
    )
        .prop_map(|(tsn, s, ssn, f, p)| {
            Chunk::Data(DataChunk {
                tsn: Tsn(tsn),
                stream: StreamId(s),
                ssn: Ssn(ssn),
                flags: DataFlags {
                    unordered: f[0],
                    begin_fragment: f[1],
                    end_fragment: f[2],
                },
                payload: Bytes::from(p),
            })
        })
}

pub fn arb_chunk() -> impl Strategy<Value = Chunk> {
    prop_oneof![
        4 => arb_data(),
        1 => arb_init().prop_map(Chunk::Init),
        1 => (arb_init(), arb_bytes(64)).prop_map(|(params, cookie)| Chunk::InitAck { params, cookie }),
        1 => arb_bytes(64).prop_map(|cookie| Chunk::CookieEcho { cookie }),
        1 => Just(Chunk::CookieAck),
        2 => (any::<u32>(), any::<u32>(), arb_gaps(), vec(any::<u32>(), 0..4)).prop_map(|(c, w, gaps, d)| {
            Chunk::Sack(SackChunk {
                cum_tsn: Tsn(c),
                a_rwnd: w,
                gaps,
                dups: d.into_iter().map(Tsn).collect(),
            })
        }),
        1 => (any::<u64>(), any::<u16>()).prop_map(|(nonce, path_id)| Chunk::Heartbeat { nonce, path_id }),
        1 => (any::<u64>(), any::<u16>()).prop_map(|(nonce, path_id)| Chunk::HeartbeatAck { nonce, path_id }),
        1 => any::<u32>().prop_map(|c| Chunk::Shutdown { cum_tsn: Tsn(c) }),
        1 => Just(Chunk::ShutdownAck),
        1 => Just(Chunk::ShutdownComplete),
        1 => Just(Chunk::Abort),
    ]
}

/// Packets that always fit the default 1500-byte MTU.
pub fn arb_packet() -> impl Strategy<Value = Packet> {
    (
        any::<u16>(),
        any::<u16>(),
        any::<u32>(),
        vec(arb_chunk(), 0..6),
    )
        .prop_map(|(s, d, v, chunks)| Packet::new(s, d, v, chunks))
}

/// Bit-at-a-time CRC-32c, kept apart from the codec's implementation.
pub fn crc32c_bitwise(data: &[u8]) -> u32 {
    let mut crc = !0u32;
    for &b in data {
        crc ^= b as u32;
        for _ in 0..8 {
            crc = if crc & 1 != 0 {
                (crc >> 1) ^ 0x82F6_3B78
            } else {
                crc >> 1
            };
        }
    }
    !crc
}

pub struct Malformed {
    pub name: &'static str,
    pub bytes: Vec<u8>,
    pub codec: CodecConfig,
    pub expect: DecodeError,
}

fn header() -> Vec<u8> {
    vec![0x13, 0x88, 0x13, 0x89, 0, 0, 0, 7, 0, 0, 0, 0]
}

fn with_chunk(ty: u8, flags: u8, declared: u16, body: &[u8]) -> Vec<u8> {
    let mut v = header();
    v.extend([ty, flags]);
    v.extend(declared.to_be_bytes());
    v.extend(body);
    v
}

fn chunk_fault(reason: &'static str) -> DecodeError {
    DecodeError::MalformedChunk { offset: 12, reason }
}

/// Hand-built bad inputs with the error each one must produce.
pub fn malformed_corpus() -> Vec<Malformed> {
    let plain = CodecConfig::default();
    let case = |name, bytes, expect| Malformed {
        name,
        bytes,
        codec: plain,
        expect,
    };
    let mut sack_counts = with_chunk(3, 0, 16, &[0; 12]);
    sack_counts[12 + 4 + 8..12 + 4 + 10].copy_from_slice(&1u16.to_be_bytes());
    let sack = |blocks: &[(u16, u16)]| {
        let mut body = vec![0u8; 8];
        body.extend((blocks.len() as u16).to_be_bytes());
        body.extend([0, 0]);
        for (s, e) in blocks {
            body.extend(s.to_be_bytes());
            body.extend(e.to_be_bytes());
        }
        with_chunk(3, 0, 4 + body.len() as u16, &body)
    };
    let mut second_unknown = with_chunk(11, 0, 4, &[]);
    second_unknown.extend([200, 0, 0, 4]);

    let mut out = vec![
        case(
            "empty input",
            vec![],
            DecodeError::MalformedHeader { len: 0 },
        ),
        case(
            "11-byte input",
            header()[..11].to_vec(),
            DecodeError::MalformedHeader { len: 11 },
        ),
        case(
            "partial chunk header",
            [header(), vec![0, 3, 0]].concat(),
            DecodeError::TruncatedChunk { offset: 12 },
        ),
        case(
            "chunk length below header size",
            with_chunk(11, 0, 2, &[]),
            chunk_fault("length below chunk header size"),
        ),
        case(
            "declared length past end",
            with_chunk(0, 3, 20, &[0; 4]),
            DecodeError::TruncatedChunk { offset: 12 },
        ),
        case(
            "missing padding",
            with_chunk(0, 3, 17, &[0; 13]),
            DecodeError::TruncatedChunk { offset: 12 },
        ),
        case(
            "unknown chunk type",
            with_chunk(0x42, 0, 4, &[]),
            DecodeError::UnknownChunkType {
                chunk_type: 0x42,
                offset: 12,
            },
        ),
        case(
            "unknown type in second chunk",
            second_unknown,
            DecodeError::UnknownChunkType {
                chunk_type: 200,
                offset: 16,
            },
        ),
        case(
            "short DATA header",
            with_chunk(0, 3, 8, &[0; 4]),
            chunk_fault("short DATA header"),
        ),
        case(
            "INIT too short",
            with_chunk(1, 0, 16, &[0; 12]),
            chunk_fault("INIT length"),
        ),
        case(
            "INIT too long",
            with_chunk(1, 0, 24, &[0; 20]),
            chunk_fault("INIT length"),
        ),
        case(
            "INIT_ACK too short",
            with_chunk(2, 0, 12, &[0; 8]),
            chunk_fault("short INIT_ACK"),
        ),
        case(
            "COOKIE_ACK with value",
            with_chunk(11, 0, 8, &[0; 4]),
            chunk_fault("COOKIE_ACK carries no value"),
        ),
        case(
            "SACK too short",
            with_chunk(3, 0, 12, &[0; 8]),
            chunk_fault("short SACK"),
        ),
        case(
            "SACK counts disagree",
            sack_counts,
            chunk_fault("SACK block counts disagree with length"),
        ),
        case(
            "SACK gaps unsorted",
            sack(&[(5, 6), (2, 3)]),
            chunk_fault("gap blocks not sorted/disjoint"),
        ),
        case(
            "SACK gap at offset 0",
            sack(&[(0, 3)]),
            chunk_fault("gap blocks not sorted/disjoint"),
        ),
        case(
            "SACK gaps adjacent",
            sack(&[(2, 3), (4, 5)]),
            chunk_fault("gap blocks not sorted/disjoint"),
        ),
        case(
            "SACK gap reversed",
            sack(&[(6, 2)]),
            chunk_fault("gap blocks not sorted/disjoint"),
        ),
        case(
            "HEARTBEAT wrong length",
            with_chunk(4, 0, 12, &[0; 8]),
            chunk_fault("HEARTBEAT length"),
        ),
        case(
            "HEARTBEAT_ACK wrong length",
            with_chunk(5, 0, 20, &[0; 16]),
            chunk_fault("HEARTBEAT length"),
        ),
        case(
            "SHUTDOWN wrong length",
            with_chunk(7, 0, 4, &[]),
            chunk_fault("SHUTDOWN length"),
        ),
        case(
            "ABORT with value",
            with_chunk(6, 0, 8, &[0; 4]),
            chunk_fault("control chunk carries no value"),
        ),
        case(
            "SHUTDOWN_COMPLETE with value",
            with_chunk(14, 0, 8, &[0; 4]),
            chunk_fault("control chunk carries no value"),
        ),
    ];

    // a valid COOKIE_ACK packet whose carried checksum is off by one
    let mut good = with_chunk(11, 0, 4, &[]);
    let crc = crc32c_bitwise(&good);
    good[8..12].copy_from_slice(&crc.wrapping_add(1).to_be_bytes());
    out.push(Malformed {
        name: "checksum mismatch",
        bytes: good,
        codec: CodecConfig {
            checksum: true,
            ..plain
        },
        expect: DecodeError::ChecksumMismatch {
            carried: crc.wrapping_add(1),
            computed: crc,
        },
    });
    out
}
