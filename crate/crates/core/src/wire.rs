//! Packet and chunk data model, serial TSN arithmetic and the byte codec.
//!
//! Layout: a 12-byte common header (source port, destination port,
//! verification tag, checksum) followed by TLV chunks. Every chunk starts with
//! a 4-byte header (type, flags, length); the length field covers the header
//! and value but not the trailing padding to a 4-byte boundary.

use std::cmp::Ordering;
use std::fmt;

use bytes::{Buf, BufMut, Bytes, BytesMut};
use thiserror::Error;

pub const COMMON_HEADER_LEN: usize = 12;
pub const CHUNK_HEADER_LEN: usize = 4;
pub const DATA_HEADER_LEN: usize = 16;
/// Bytes reserved for the (unmodelled) IP header when sizing packets.
pub const NETWORK_HEADER_BUDGET: usize = 20;
pub const DEFAULT_MTU: usize = 1500;

const TYPE_DATA: u8 = 0;
const TYPE_INIT: u8 = 1;
const TYPE_INIT_ACK: u8 = 2;
const TYPE_SACK: u8 = 3;
const TYPE_HEARTBEAT: u8 = 4;
const TYPE_HEARTBEAT_ACK: u8 = 5;
const TYPE_ABORT: u8 = 6;
const TYPE_SHUTDOWN: u8 = 7;
const TYPE_SHUTDOWN_ACK: u8 = 8;
const TYPE_COOKIE_ECHO: u8 = 10;
const TYPE_COOKIE_ACK: u8 = 11;
const TYPE_SHUTDOWN_COMPLETE: u8 = 14;

const FLAG_END: u8 = 0x01;
const FLAG_BEGIN: u8 = 0x02;
const FLAG_UNORDERED: u8 = 0x04;

/// Transmission sequence number with serial-number comparison modulo 2^32.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Tsn(pub u32);

impl Tsn {
    pub fn next(self) -> Tsn {
        Tsn(self.0.wrapping_add(1))
    }

    pub fn wrapping_add(self, n: u32) -> Tsn {
        Tsn(self.0.wrapping_add(n))
    }

    /// Forward distance `self - base` modulo 2^32.
    pub fn offset_from(self, base: Tsn) -> u32 {
        self.0.wrapping_sub(base.0)
    }

    pub fn serial_cmp(self, other: Tsn) -> Ordering {
        tsn_cmp(self, other)
    }

    pub fn is_before(self, other: Tsn) -> bool {
        tsn_cmp(self, other) == Ordering::Less
    }

    pub fn is_after(self, other: Tsn) -> bool {
        tsn_cmp(self, other) == Ordering::Greater
    }
}

impl fmt::Display for Tsn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Serial comparison: `a < b` iff `0 < (b - a) mod 2^32 < 2^31`.
///
/// Only a total order inside any window narrower than 2^31; at a distance of
/// exactly 2^31 both directions report `Greater`.
pub fn tsn_cmp(a: Tsn, b: Tsn) -> Ordering {
    let d = b.0.wrapping_sub(a.0);
    if d == 0 {
        Ordering::Equal
    } else if d < 1 << 31 {
        Ordering::Less
    } else {
        Ordering::Greater
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StreamId(pub u16);

/// Per-stream sequence number, serial modulo 2^16.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Ssn(pub u16);

impl Ssn {
    pub fn next(self) -> Ssn {
        Ssn(self.0.wrapping_add(1))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct DataFlags {
    pub unordered: bool,
    pub begin_fragment: bool,
    pub end_fragment: bool,
}

impl DataFlags {
    pub const COMPLETE: DataFlags = DataFlags {
        unordered: false,
        begin_fragment: true,
        end_fragment: true,
    };

    fn to_bits(self) -> u8 {
        let mut bits = 0;
        if self.unordered {
            bits |= FLAG_UNORDERED;
        }
        if self.begin_fragment {
            bits |= FLAG_BEGIN;
        }
        if self.end_fragment {
            bits |= FLAG_END;
        }
        bits
    }

    fn from_bits(bits: u8) -> Self {
        DataFlags {
            unordered: bits & FLAG_UNORDERED != 0,
            begin_fragment: bits & FLAG_BEGIN != 0,
            end_fragment: bits & FLAG_END != 0,
        }
    }

    pub fn is_complete(self) -> bool {
        self.begin_fragment && self.end_fragment
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DataChunk {
    pub tsn: Tsn,
    pub stream: StreamId,
    pub ssn: Ssn,
    pub flags: DataFlags,
    pub payload: Bytes,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InitParams {
    pub init_tag: u32,
    pub a_rwnd: u32,
    pub n_out_streams: u16,
    pub n_in_streams: u16,
    pub initial_tsn: Tsn,
}

/// Gap-ack block, offsets relative to the cumulative TSN (inclusive).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GapBlock {
    pub start: u16,
    pub end: u16,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SackChunk {
    pub cum_tsn: Tsn,
    pub a_rwnd: u32,
    pub gaps: Vec<GapBlock>,
    pub dups: Vec<Tsn>,
}

impl SackChunk {
    /// Gap blocks sorted, non-overlapping, non-adjacent, all offsets >= 1.
    pub fn gaps_well_formed(&self) -> bool {
        let mut prev_end: Option<u16> = None;
        for g in &self.gaps {
            if g.start == 0 || g.end < g.start {
                return false;
            }
            if let Some(pe) = prev_end {
                // adjacent blocks would have been merged
                if g.start <= pe.saturating_add(1) {
                    return false;
                }
            }
            prev_end = Some(g.end);
        }
        true
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Chunk {
    Data(DataChunk),
    Init(InitParams),
    InitAck { params: InitParams, cookie: Bytes },
    CookieEcho { cookie: Bytes },
    CookieAck,
    Sack(SackChunk),
    Heartbeat { nonce: u64, path_id: u16 },
    HeartbeatAck { nonce: u64, path_id: u16 },
    Shutdown { cum_tsn: Tsn },
    ShutdownAck,
    ShutdownComplete,
    Abort,
}

/// Fieldless discriminant of [`Chunk`], used for dispatch tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ChunkKind {
    Data,
    Init,
    InitAck,
    CookieEcho,
    CookieAck,
    Sack,
    Heartbeat,
    HeartbeatAck,
    Shutdown,
    ShutdownAck,
    ShutdownComplete,
    Abort,
}

impl ChunkKind {
    pub const ALL: [ChunkKind; 12] = [
        ChunkKind::Data,
        ChunkKind::Init,
        ChunkKind::InitAck,
        ChunkKind::CookieEcho,
        ChunkKind::CookieAck,
        ChunkKind::Sack,
        ChunkKind::Heartbeat,
        ChunkKind::HeartbeatAck,
        ChunkKind::Shutdown,
        ChunkKind::ShutdownAck,
        ChunkKind::ShutdownComplete,
        ChunkKind::Abort,
    ];
}

impl Chunk {
    pub fn kind(&self) -> ChunkKind {
        match self {
            Chunk::Data(_) => ChunkKind::Data,
            Chunk::Init(_) => ChunkKind::Init,
            Chunk::InitAck { .. } => ChunkKind::InitAck,
            Chunk::CookieEcho { .. } => ChunkKind::CookieEcho,
            Chunk::CookieAck => ChunkKind::CookieAck,
            Chunk::Sack(_) => ChunkKind::Sack,
            Chunk::Heartbeat { .. } => ChunkKind::Heartbeat,
            Chunk::HeartbeatAck { .. } => ChunkKind::HeartbeatAck,
            Chunk::Shutdown { .. } => ChunkKind::Shutdown,
            Chunk::ShutdownAck => ChunkKind::ShutdownAck,
            Chunk::ShutdownComplete => ChunkKind::ShutdownComplete,
            Chunk::Abort => ChunkKind::Abort,
        }
    }

    /// Value of the chunk length field (header + value, no padding).
    pub fn declared_len(&self) -> usize {
        CHUNK_HEADER_LEN
            + match self {
                Chunk::Data(d) => DATA_HEADER_LEN - CHUNK_HEADER_LEN + d.payload.len(),
                Chunk::Init(_) => 16,
                Chunk::InitAck { cookie, .. } => 16 + cookie.len(),
                Chunk::CookieEcho { cookie } => cookie.len(),
                Chunk::Sack(s) => 12 + 4 * s.gaps.len() + 4 * s.dups.len(),
                Chunk::Heartbeat { .. } | Chunk::HeartbeatAck { .. } => 12,
                Chunk::Shutdown { .. } => 4,
                Chunk::CookieAck | Chunk::ShutdownAck | Chunk::ShutdownComplete | Chunk::Abort => 0,
            }
    }

    /// Bytes the chunk occupies on the wire, padding included.
    pub fn wire_len(&self) -> usize {
        pad4(self.declared_len())
    }
}

fn pad4(n: usize) -> usize {
    (n + 3) & !3
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Packet {
    pub src_port: u16,
    pub dst_port: u16,
    pub verification_tag: u32,
    pub checksum: u32,
    pub chunks: Vec<Chunk>,
}

impl Packet {
    pub fn new(src_port: u16, dst_port: u16, verification_tag: u32, chunks: Vec<Chunk>) -> Self {
        Packet {
            src_port,
            dst_port,
            verification_tag,
            checksum: 0,
            chunks,
        }
    }

    pub fn encoded_len(&self) -> usize {
        COMMON_HEADER_LEN + self.chunks.iter().map(Chunk::wire_len).sum::<usize>()
    }

    pub fn data_chunks(&self) -> impl Iterator<Item = &DataChunk> {
        self.chunks.iter().filter_map(|c| match c {
            Chunk::Data(d) => Some(d),
            _ => None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CodecConfig {
    pub mtu: usize,
    pub checksum: bool,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            mtu: DEFAULT_MTU,
            checksum: false,
        }
    }
}

impl CodecConfig {
    /// Largest encodable SCTP packet: the MTU minus the network header budget.
    pub fn max_packet_len(&self) -> usize {
        self.mtu.saturating_sub(NETWORK_HEADER_BUDGET)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EncodeError {
    #[error("encoded packet is {len} bytes, budget is {budget}")]
    Oversize { len: usize, budget: usize },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("malformed common header: {len} bytes")]
    MalformedHeader { len: usize },
    #[error("truncated chunk at offset {offset}")]
    TruncatedChunk { offset: usize },
    #[error("unknown chunk type {chunk_type} at offset {offset}")]
    UnknownChunkType { chunk_type: u8, offset: usize },
    #[error("malformed chunk at offset {offset}: {reason}")]
    MalformedChunk { offset: usize, reason: &'static str },
    #[error("checksum mismatch: carried {carried:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { carried: u32, computed: u32 },
}

pub fn encode_packet(p: &Packet, cfg: &CodecConfig) -> Result<Bytes, EncodeError> {
    let len = p.encoded_len();
    let budget = cfg.max_packet_len();
    if len > budget {
        return Err(EncodeError::Oversize { len, budget });
    }
    let mut buf = BytesMut::with_capacity(len);
    buf.put_u16(p.src_port);
    buf.put_u16(p.dst_port);
    buf.put_u32(p.verification_tag);
    buf.put_u32(0);
    for c in &p.chunks {
        encode_chunk(c, &mut buf);
    }
    debug_assert_eq!(buf.len(), len);
    if cfg.checksum {
        let crc = crc32c(&buf);
        buf[8..12].copy_from_slice(&crc.to_be_bytes());
    }
    Ok(buf.freeze())
}

fn encode_chunk(c: &Chunk, buf: &mut BytesMut) {
    let declared = c.declared_len();
    let (ty, flags) = match c {
        Chunk::Data(d) => (TYPE_DATA, d.flags.to_bits()),
        Chunk::Init(_) => (TYPE_INIT, 0),
        Chunk::InitAck { .. } => (TYPE_INIT_ACK, 0),
        Chunk::CookieEcho { .. } => (TYPE_COOKIE_ECHO, 0),
        Chunk::CookieAck => (TYPE_COOKIE_ACK, 0),
        Chunk::Sack(_) => (TYPE_SACK, 0),
        Chunk::Heartbeat { .. } => (TYPE_HEARTBEAT, 0),
        Chunk::HeartbeatAck { .. } => (TYPE_HEARTBEAT_ACK, 0),
        Chunk::Shutdown { .. } => (TYPE_SHUTDOWN, 0),
        Chunk::ShutdownAck => (TYPE_SHUTDOWN_ACK, 0),
        Chunk::ShutdownComplete => (TYPE_SHUTDOWN_COMPLETE, 0),
        Chunk::Abort => (TYPE_ABORT, 0),
    };
    buf.put_u8(ty);
    buf.put_u8(flags);
    buf.put_u16(declared as u16);
    match c {
        Chunk::Data(d) => {
            buf.put_u32(d.tsn.0);
            buf.put_u16(d.stream.0);
            buf.put_u16(d.ssn.0);
            // payload protocol identifier, unused
            buf.put_u32(0);
            buf.put_slice(&d.payload);
        }
        Chunk::Init(p) => put_init(p, buf),
        Chunk::InitAck { params, cookie } => {
            put_init(params, buf);
            buf.put_slice(cookie);
        }
        Chunk::CookieEcho { cookie } => buf.put_slice(cookie),
        Chunk::Sack(s) => {
            buf.put_u32(s.cum_tsn.0);
            buf.put_u32(s.a_rwnd);
            buf.put_u16(s.gaps.len() as u16);
            buf.put_u16(s.dups.len() as u16);
            for g in &s.gaps {
                buf.put_u16(g.start);
                buf.put_u16(g.end);
            }
            for d in &s.dups {
                buf.put_u32(d.0);
            }
        }
        Chunk::Heartbeat { nonce, path_id } | Chunk::HeartbeatAck { nonce, path_id } => {
            buf.put_u64(*nonce);
            buf.put_u16(*path_id);
            buf.put_u16(0);
        }
        Chunk::Shutdown { cum_tsn } => buf.put_u32(cum_tsn.0),
        Chunk::CookieAck | Chunk::ShutdownAck | Chunk::ShutdownComplete | Chunk::Abort => {}
    }
    for _ in declared..pad4(declared) {
        buf.put_u8(0);
    }
}

fn put_init(p: &InitParams, buf: &mut BytesMut) {
    buf.put_u32(p.init_tag);
    buf.put_u32(p.a_rwnd);
    buf.put_u16(p.n_out_streams);
    buf.put_u16(p.n_in_streams);
    buf.put_u32(p.initial_tsn.0);
}

/// Decodes a packet. Payload and cookie bytes are copied once out of `bytes`.
pub fn decode_packet(bytes: &[u8], cfg: &CodecConfig) -> Result<Packet, DecodeError> {
    decode_bytes(Bytes::copy_from_slice(bytes), cfg)
}

/// Zero-copy variant of [`decode_packet`]: payloads are slices of `bytes`.
pub fn decode_bytes(bytes: Bytes, cfg: &CodecConfig) -> Result<Packet, DecodeError> {
    if bytes.len() < COMMON_HEADER_LEN {
        return Err(DecodeError::MalformedHeader { len: bytes.len() });
    }
    let mut hdr = &bytes[..COMMON_HEADER_LEN];
    let src_port = hdr.get_u16();
    let dst_port = hdr.get_u16();
    let verification_tag = hdr.get_u32();
    let checksum = hdr.get_u32();
    if cfg.checksum {
        let computed = crc32c_with_zeroed_field(&bytes);
        if computed != checksum {
            return Err(DecodeError::ChecksumMismatch {
                carried: checksum,
                computed,
            });
        }
    }

    let mut chunks = Vec::new();
    let mut offset = COMMON_HEADER_LEN;
    while offset < bytes.len() {
        let remaining = bytes.len() - offset;
        if remaining < CHUNK_HEADER_LEN {
            return Err(DecodeError::TruncatedChunk { offset });
        }
        let ty = bytes[offset];
        let flags = bytes[offset + 1];
        let declared = u16::from_be_bytes([bytes[offset + 2], bytes[offset + 3]]) as usize;
        if declared < CHUNK_HEADER_LEN {
            return Err(DecodeError::MalformedChunk {
                offset,
                reason: "length below chunk header size",
            });
        }
        if declared > remaining {
            return Err(DecodeError::TruncatedChunk { offset });
        }
        let padded = pad4(declared);
        if padded > remaining {
            return Err(DecodeError::TruncatedChunk { offset });
        }
        let value = bytes.slice(offset + CHUNK_HEADER_LEN..offset + declared);
        chunks.push(decode_chunk(ty, flags, value, offset)?);
        offset += padded;
    }

    Ok(Packet {
        src_port,
        dst_port,
        verification_tag,
        checksum: if cfg.checksum { checksum } else { 0 },
        chunks,
    })
}

fn decode_chunk(ty: u8, flags: u8, mut v: Bytes, offset: usize) -> Result<Chunk, DecodeError> {
    let malformed = |reason| DecodeError::MalformedChunk { offset, reason };
    let need = |v: &Bytes, n: usize, reason| {
        if v.len() < n {
            Err(malformed(reason))
        } else {
            Ok(())
        }
    };
    let exact = |v: &Bytes, n: usize, reason| {
        if v.len() != n {
            Err(malformed(reason))
        } else {
            Ok(())
        }
    };
    let chunk = match ty {
        TYPE_DATA => {
            need(&v, DATA_HEADER_LEN - CHUNK_HEADER_LEN, "short DATA header")?;
            let tsn = Tsn(v.get_u32());
            let stream = StreamId(v.get_u16());
            let ssn = Ssn(v.get_u16());
            let _ppid = v.get_u32();
            Chunk::Data(DataChunk {
                tsn,
                stream,
                ssn,
                flags: DataFlags::from_bits(flags),
                payload: v,
            })
        }
        TYPE_INIT => {
            exact(&v, 16, "INIT length")?;
            Chunk::Init(get_init(&mut v))
        }
        TYPE_INIT_ACK => {
            need(&v, 16, "short INIT_ACK")?;
            let params = get_init(&mut v);
            Chunk::InitAck { params, cookie: v }
        }
        TYPE_COOKIE_ECHO => Chunk::CookieEcho { cookie: v },
        TYPE_COOKIE_ACK => {
            exact(&v, 0, "COOKIE_ACK carries no value")?;
            Chunk::CookieAck
        }
        TYPE_SACK => {
            need(&v, 12, "short SACK")?;
            let cum_tsn = Tsn(v.get_u32());
            let a_rwnd = v.get_u32();
            let n_gaps = v.get_u16() as usize;
            let n_dups = v.get_u16() as usize;
            exact(
                &v,
                4 * (n_gaps + n_dups),
                "SACK block counts disagree with length",
            )?;
            let gaps = (0..n_gaps)
                .map(|_| GapBlock {
                    start: v.get_u16(),
                    end: v.get_u16(),
                })
                .collect();
            let dups = (0..n_dups).map(|_| Tsn(v.get_u32())).collect();
            let sack = SackChunk {
                cum_tsn,
                a_rwnd,
                gaps,
                dups,
            };
            if !sack.gaps_well_formed() {
                return Err(malformed("gap blocks not sorted/disjoint"));
            }
            Chunk::Sack(sack)
        }
        TYPE_HEARTBEAT | TYPE_HEARTBEAT_ACK => {
            exact(&v, 12, "HEARTBEAT length")?;
            let nonce = v.get_u64();
            let path_id = v.get_u16();
            if ty == TYPE_HEARTBEAT {
                Chunk::Heartbeat { nonce, path_id }
            } else {
                Chunk::HeartbeatAck { nonce, path_id }
            }
        }
        TYPE_SHUTDOWN => {
            exact(&v, 4, "SHUTDOWN length")?;
            Chunk::Shutdown {
                cum_tsn: Tsn(v.get_u32()),
            }
        }
        TYPE_SHUTDOWN_ACK | TYPE_SHUTDOWN_COMPLETE | TYPE_ABORT => {
            exact(&v, 0, "control chunk carries no value")?;
            match ty {
                TYPE_SHUTDOWN_ACK => Chunk::ShutdownAck,
                TYPE_SHUTDOWN_COMPLETE => Chunk::ShutdownComplete,
                _ => Chunk::Abort,
            }
        }
        other => {
            return Err(DecodeError::UnknownChunkType {
                chunk_type: other,
                offset,
            })
        }
    };
    Ok(chunk)
}

fn get_init(v: &mut Bytes) -> InitParams {
    InitParams {
        init_tag: v.get_u32(),
        a_rwnd: v.get_u32(),
        n_out_streams: v.get_u16(),
        n_in_streams: v.get_u16(),
        initial_tsn: Tsn(v.get_u32()),
    }
}

/// CRC-32c (Castagnoli) as carried in the common header.
pub fn crc32c(bytes: &[u8]) -> u32 {
    crc32c::crc32c(bytes)
}

/// CRC-32c over an encoded packet with its checksum field treated as zero.
pub fn crc32c_with_zeroed_field(packet: &[u8]) -> u32 {
    if packet.len() < COMMON_HEADER_LEN {
        return crc32c::crc32c(packet);
    }
    let crc = crc32c::crc32c_append(crc32c::crc32c(&packet[..8]), &[0; 4]);
    crc32c::crc32c_append(crc, &packet[COMMON_HEADER_LEN..])
}

impl fmt::Display for Chunk {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Chunk::Data(d) => {
                let mut flags = String::new();
                if d.flags.unordered {
                    flags.push('U');
                }
                if d.flags.begin_fragment {
                    flags.push('B');
                }
                if d.flags.end_fragment {
                    flags.push('E');
                }
                if flags.is_empty() {
                    flags.push('-');
                }
                write!(
                    f,
                    "DATA tsn={} stream={} ssn={} flags={} len={}",
                    d.tsn,
                    d.stream.0,
                    d.ssn.0,
                    flags,
                    d.payload.len()
                )
            }
            Chunk::Init(p) => write!(f, "INIT {}", InitDisplay(p)),
            Chunk::InitAck { params, cookie } => {
                write!(
                    f,
                    "INIT_ACK {} cookie={}B",
                    InitDisplay(params),
                    cookie.len()
                )
            }
            Chunk::CookieEcho { cookie } => write!(f, "COOKIE_ECHO cookie={}B", cookie.len()),
            Chunk::CookieAck => write!(f, "COOKIE_ACK"),
            Chunk::Sack(s) => {
                write!(f, "SACK cum={} a_rwnd={} gaps=[", s.cum_tsn, s.a_rwnd)?;
                for (i, g) in s.gaps.iter().enumerate() {
                    if i > 0 {
                        write!(f, ",")?;
                    }
                    write!(f, "{}-{}", g.start, g.end)?;
                }
                write!(f, "] dups=[")?;
                for (i, d) in s.dups.iter().enumerate() {
                    if i > 0 {
                        write!(f, ",")?;
                    }
                    write!(f, "{d}")?;
                }
                write!(f, "]")
            }
            Chunk::Heartbeat { nonce, path_id } => {
                write!(f, "HEARTBEAT nonce={nonce:#018x} path={path_id}")
            }
            Chunk::HeartbeatAck { nonce, path_id } => {
                write!(f, "HEARTBEAT_ACK nonce={nonce:#018x} path={path_id}")
            }
            Chunk::Shutdown { cum_tsn } => write!(f, "SHUTDOWN cum={cum_tsn}"),
            Chunk::ShutdownAck => write!(f, "SHUTDOWN_ACK"),
            Chunk::ShutdownComplete => write!(f, "SHUTDOWN_COMPLETE"),
            Chunk::Abort => write!(f, "ABORT"),
        }
    }
}

struct InitDisplay<'a>(&'a InitParams);

impl fmt::Display for InitDisplay<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = self.0;
        write!(
            f,
            "tag={:#010x} a_rwnd={} out={} in={} itsn={}",
            p.init_tag, p.a_rwnd, p.n_out_streams, p.n_in_streams, p.initial_tsn
        )
    }
}

/// Multi-line text rendering used by the golden-file tests.
impl fmt::Display for Packet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "packet {} -> {} vtag={:#010x} crc={:#010x} len={}",
            self.src_port,
            self.dst_port,
            self.verification_tag,
            self.checksum,
            self.encoded_len()
        )?;
        for c in &self.chunks {
            writeln!(f, "  {c}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn data(tsn: u32, payload: &[u8]) -> Chunk {
        Chunk::Data(DataChunk {
            tsn: Tsn(tsn),
            stream: StreamId(0),
            ssn: Ssn(0),
            flags: DataFlags::COMPLETE,
            payload: Bytes::copy_from_slice(payload),
        })
    }

    #[test]
    fn tsn_cmp_examples() {
        assert_eq!(tsn_cmp(Tsn(5), Tsn(9)), Ordering::Less);
        assert_eq!(tsn_cmp(Tsn(7), Tsn(7)), Ordering::Equal);
        assert_eq!(tsn_cmp(Tsn(0xFFFF_FFFF), Tsn(0)), Ordering::Less);
        assert_eq!(Tsn(0xFFFF_FFFF).next(), Tsn(0));
    }

    #[test]
    fn crc32c_check_value() {
        assert_eq!(crc32c(b"123456789"), 0xE306_9283);
        let mut pkt = vec![1u8; 20];
        let plain = crc32c_with_zeroed_field(&pkt);
        pkt[8..12].copy_from_slice(&[9, 9, 9, 9]);
        assert_eq!(crc32c_with_zeroed_field(&pkt), plain);
        pkt[8..12].fill(0);
        assert_eq!(crc32c(&pkt), plain);
    }

    #[test]
    fn empty_packet_is_header_only() {
        let p = Packet::new(1, 2, 3, vec![]);
        let b = encode_packet(&p, &CodecConfig::default()).unwrap();
        assert_eq!(&b[..], &[0, 1, 0, 2, 0, 0, 0, 3, 0, 0, 0, 0]);
    }

    #[test]
    fn one_byte_data_chunk_layout() {
        let p = Packet::new(0x1388, 0x1389, 0xDEADBEEF, vec![data(0x0102_0304, &[0xAB])]);
        let b = encode_packet(&p, &CodecConfig::default()).unwrap();
        // hand layout: header, then type 0, flags B|E, length 17, tsn, sid, ssn, ppid, payload, 3 pad
        let expected: Vec<u8> = vec![
            0x13, 0x88, 0x13, 0x89, 0xDE, 0xAD, 0xBE, 0xEF, 0, 0, 0, 0, //
            0x00, 0x03, 0x00, 0x11, //
            0x01, 0x02, 0x03, 0x04, //
            0x00, 0x00, 0x00, 0x00, //
            0x00, 0x00, 0x00, 0x00, //
            0xAB, 0x00, 0x00, 0x00,
        ];
        assert_eq!(&b[..], &expected[..]);
        assert_eq!(b.len() - COMMON_HEADER_LEN, 20);
    }

    #[test]
    fn cookie_ack_packet_is_16_bytes() {
        let p = Packet::new(1, 2, 3, vec![Chunk::CookieAck]);
        let b = encode_packet(&p, &CodecConfig::default()).unwrap();
        assert_eq!(b.len(), 16);
        assert_eq!(&b[12..], &[11, 0, 0, 4]);
    }

    #[test]
    fn oversize_is_rejected() {
        let p = Packet::new(1, 2, 3, vec![data(1, &[0u8; 1453])]);
        let err = encode_packet(&p, &CodecConfig::default()).unwrap_err();
        assert_eq!(
            err,
            EncodeError::Oversize {
                len: 1484,
                budget: 1480
            }
        );
        let fits = Packet::new(1, 2, 3, vec![data(1, &[0u8; 1452])]);
        assert_eq!(
            encode_packet(&fits, &CodecConfig::default()).unwrap().len(),
            1480
        );
    }

    #[test]
    fn short_input_is_malformed_header() {
        let err = decode_packet(&[0u8; 11], &CodecConfig::default()).unwrap_err();
        assert_eq!(err, DecodeError::MalformedHeader { len: 11 });
    }

    #[test]
    fn chunk_length_past_end_is_truncated() {
        let mut b = vec![0u8; 12];
        b.extend_from_slice(&[0, 3, 0, 40, 0, 0, 0, 1]);
        let err = decode_packet(&b, &CodecConfig::default()).unwrap_err();
        assert_eq!(err, DecodeError::TruncatedChunk { offset: 12 });
    }

    #[test]
    fn unknown_type_reports_offset() {
        let mut b = vec![0u8; 12];
        b.extend_from_slice(&[11, 0, 0, 4]);
        b.extend_from_slice(&[0xC0, 0, 0, 4]);
        let err = decode_packet(&b, &CodecConfig::default()).unwrap_err();
        assert_eq!(
            err,
            DecodeError::UnknownChunkType {
                chunk_type: 0xC0,
                offset: 16
            }
        );
    }

    #[test]
    fn checksum_toggle() {
        let on = CodecConfig {
            checksum: true,
            ..Default::default()
        };
        let off = CodecConfig::default();
        let p = Packet::new(7, 8, 9, vec![data(5, b"hello world")]);

        let plain = encode_packet(&p, &off).unwrap();
        assert_eq!(&plain[8..12], &[0, 0, 0, 0]);

        let mut bytes = encode_packet(&p, &on).unwrap().to_vec();
        let decoded = decode_packet(&bytes, &on).unwrap();
        assert_eq!(decoded.chunks, p.chunks);
        assert_ne!(decoded.checksum, 0);

        let last = bytes.len() - 6;
        bytes[last] ^= 0x01;
        assert!(matches!(
            decode_packet(&bytes, &on),
            Err(DecodeError::ChecksumMismatch { .. })
        ));
        // ignored when verification is off
        assert!(decode_packet(&bytes, &off).is_ok());
    }

    #[test]
    fn display_renders_chunks() {
        let p = Packet::new(
            5000,
            5001,
            0x42,
            vec![
                data(1, b"x"),
                Chunk::Sack(SackChunk {
                    cum_tsn: Tsn(5),
                    a_rwnd: 1000,
                    gaps: vec![GapBlock { start: 2, end: 3 }],
                    dups: vec![Tsn(4)],
                }),
            ],
        );
        let text = p.to_string();
        assert!(text.contains("DATA tsn=1 stream=0 ssn=0 flags=BE len=1"));
        assert!(text.contains("SACK cum=5 a_rwnd=1000 gaps=[2-3] dups=[4]"));
    }

    proptest! {
        #[test]
        fn serial_forward_distance_is_less(a in any::<u32>(), d in 1u32..(1 << 31)) {
            prop_assert_eq!(tsn_cmp(Tsn(a), Tsn(a.wrapping_add(d))), Ordering::Less);
            prop_assert_eq!(tsn_cmp(Tsn(a.wrapping_add(d)), Tsn(a)), Ordering::Greater);
        }

        #[test]
        fn crc_matches_bitwise(data in proptest::collection::vec(any::<u8>(), 0..300)) {
            let mut crc = !0u32;
            for &b in &data {
                crc ^= b as u32;
                for _ in 0..8 {
                    crc = if crc & 1 != 0 { (crc >> 1) ^ 0x82F6_3B78 } else { crc >> 1 };
                }
            }
            prop_assert_eq!(crc32c(&data), !crc);
        }
    }
}
