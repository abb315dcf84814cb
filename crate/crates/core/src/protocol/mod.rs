//! CXL.mem style messages, including the PC-carrying read and the
//! data-pushing back-invalidation snoop, plus hop-by-hop delivery timing.
//!
//! Wire layout, little-endian, one message per flit:
//!
//! ```text
//! u8 channel | u8 opcode | u16 flags | u32 tag | u64 addr | u64 pc_or_zero | u16 payload_len | payload
//! ```

mod fabric;
mod registry;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use fabric::{Direction, Fabric};
pub use registry::{OpcodeRegistry, RegistryError, BISNP_CUSTOM_RANGE, RWD_CUSTOM_RANGE};

use crate::trace::LINE_BYTES;

pub const HEADER_BYTES: usize = 26;
pub const PAYLOAD_BYTES: usize = 64;

pub const FLAG_PREFETCH: u16 = 1;
const KNOWN_FLAGS: u16 = FLAG_PREFETCH;

pub type Payload = [u8; PAYLOAD_BYTES];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Channel {
    Req = 0,
    RwD = 1,
    BIRsp = 2,
    BISnp = 3,
    Drs = 4,
    Ndr = 5,
}

impl Channel {
    fn from_u8(v: u8) -> Option<Channel> {
        Some(match v {
            0 => Channel::Req,
            1 => Channel::RwD,
            2 => Channel::BIRsp,
            3 => Channel::BISnp,
            4 => Channel::Drs,
            5 => Channel::Ndr,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Opcode {
    // host to device
    MemRd,
    MemWr,
    MemRdPC,
    BIRsp,
    // device to host
    BISnpInv,
    BISnpData,
    MemData,
    Cmp,
}

impl Opcode {
    pub const ALL: [Opcode; 8] = [
        Opcode::MemRd,
        Opcode::MemWr,
        Opcode::MemRdPC,
        Opcode::BIRsp,
        Opcode::BISnpInv,
        Opcode::BISnpData,
        Opcode::MemData,
        Opcode::Cmp,
    ];

    pub fn channel(self) -> Channel {
        match self {
            Opcode::MemRd => Channel::Req,
            Opcode::MemWr | Opcode::MemRdPC => Channel::RwD,
            Opcode::BIRsp => Channel::BIRsp,
            Opcode::BISnpInv | Opcode::BISnpData => Channel::BISnp,
            Opcode::MemData => Channel::Drs,
            Opcode::Cmp => Channel::Ndr,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Opcode::MemRd => 0x01,
            Opcode::MemWr => 0x01,
            Opcode::MemRdPC => RWD_CUSTOM_RANGE.start,
            Opcode::BIRsp => 0x00,
            Opcode::BISnpInv => 0x02,
            Opcode::BISnpData => BISNP_CUSTOM_RANGE.start,
            Opcode::MemData => 0x00,
            Opcode::Cmp => 0x00,
        }
    }

    pub fn from_wire(channel: Channel, code: u8) -> Option<Opcode> {
        Opcode::ALL.into_iter().find(|op| op.channel() == channel && op.code() == code)
    }

    pub fn direction(self) -> Direction {
        match self {
            Opcode::MemRd | Opcode::MemWr | Opcode::MemRdPC | Opcode::BIRsp => Direction::Down,
            _ => Direction::Up,
        }
    }

    fn payload_len(self) -> usize {
        match self {
            Opcode::MemWr | Opcode::MemData => PAYLOAD_BYTES,
            _ => 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Message {
    pub opcode: Opcode,
    pub tag: u32,
    pub addr: u64,
    pub pc: Option<u64>,
    pub payload: Option<Payload>,
    /// Set on traffic that belongs to a prefetch rather than a demand.
    pub prefetch: bool,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("message shorter than its {HEADER_BYTES}-byte header")]
    Truncated,
    #[error("unknown channel {0}")]
    UnknownChannel(u8),
    #[error("unknown opcode {opcode:#04x} on channel {channel:?}")]
    UnknownOpcode { channel: Channel, opcode: u8 },
    #[error("{opcode:?} needs a {expected}-byte payload, found {found}")]
    PayloadLength { opcode: Opcode, expected: usize, found: usize },
    #[error("address {0:#x} is not line aligned")]
    Misaligned(u64),
    #[error("{0:?} cannot carry a pc")]
    UnexpectedPc(Opcode),
    #[error("reserved flag bits set: {0:#06x}")]
    ReservedFlags(u16),
    #[error("{0} bytes after the payload")]
    TrailingBytes(usize),
    #[error("payload for tag {0} arrived without a BISnpData announcement")]
    UnannouncedPayload(u32),
}

/// Stand-in line contents; the simulator models timing, not data.
pub fn line_payload(addr: u64) -> Payload {
    let mut p = [0u8; PAYLOAD_BYTES];
    for (i, chunk) in p.chunks_exact_mut(8).enumerate() {
        chunk.copy_from_slice(&(addr ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)).to_le_bytes());
    }
    p
}

impl Message {
    fn bare(opcode: Opcode, addr: u64, tag: u32) -> Self {
        Message { opcode, tag, addr, pc: None, payload: None, prefetch: false }
    }

    pub fn mem_rd(addr: u64, tag: u32) -> Self {
        Self::bare(Opcode::MemRd, addr, tag)
    }

    pub fn mem_rd_pc(addr: u64, pc: u64, tag: u32) -> Self {
        Message { pc: Some(pc), ..Self::bare(Opcode::MemRdPC, addr, tag) }
    }

    pub fn mem_wr(addr: u64, data: Payload, tag: u32) -> Self {
        Message { payload: Some(data), ..Self::bare(Opcode::MemWr, addr, tag) }
    }

    pub fn bi_rsp(addr: u64, tag: u32) -> Self {
        Self::bare(Opcode::BIRsp, addr, tag)
    }

    pub fn bisnp_inv(addr: u64, tag: u32) -> Self {
        Self::bare(Opcode::BISnpInv, addr, tag)
    }

    pub fn bisnp_data(addr: u64, tag: u32) -> Self {
        Message { prefetch: true, ..Self::bare(Opcode::BISnpData, addr, tag) }
    }

    pub fn mem_data(addr: u64, data: Payload, tag: u32) -> Self {
        Message { payload: Some(data), ..Self::bare(Opcode::MemData, addr, tag) }
    }

    pub fn cmp(addr: u64, tag: u32) -> Self {
        Self::bare(Opcode::Cmp, addr, tag)
    }

    pub fn with_prefetch(mut self, prefetch: bool) -> Self {
        self.prefetch = prefetch;
        self
    }

    pub fn channel(&self) -> Channel {
        self.opcode.channel()
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        if !self.addr.is_multiple_of(LINE_BYTES) {
            return Err(ProtocolError::Misaligned(self.addr));
        }
        let expected = self.opcode.payload_len();
        let found = self.payload.map_or(0, |p| p.len());
        if found != expected {
            return Err(ProtocolError::PayloadLength { opcode: self.opcode, expected, found });
        }
        match (self.opcode, self.pc) {
            (Opcode::MemRdPC, None) => Err(ProtocolError::PayloadLength { opcode: self.opcode, expected: 8, found: 0 }),
            (Opcode::MemRdPC, Some(_)) | (_, None) => Ok(()),
            (op, Some(_)) => Err(ProtocolError::UnexpectedPc(op)),
        }
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_BYTES + self.opcode.payload_len()
    }

    pub fn encode(&self) -> Result<Vec<u8>, ProtocolError> {
        self.validate()?;
        let mut out = Vec::with_capacity(self.encoded_len());
        out.push(self.channel() as u8);
        out.push(self.opcode.code());
        let flags = if self.prefetch { FLAG_PREFETCH } else { 0 };
        out.extend_from_slice(&flags.to_le_bytes());
        out.extend_from_slice(&self.tag.to_le_bytes());
        out.extend_from_slice(&self.addr.to_le_bytes());
        out.extend_from_slice(&self.pc.unwrap_or(0).to_le_bytes());
        let payload = self.payload.as_ref().map_or(&[][..], |p| &p[..]);
        out.extend_from_slice(&(payload.len() as u16).to_le_bytes());
        out.extend_from_slice(payload);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Message, ProtocolError> {
        if bytes.len() < HEADER_BYTES {
            return Err(ProtocolError::Truncated);
        }
        let channel = Channel::from_u8(bytes[0]).ok_or(ProtocolError::UnknownChannel(bytes[0]))?;
        let opcode =
            Opcode::from_wire(channel, bytes[1]).ok_or(ProtocolError::UnknownOpcode { channel, opcode: bytes[1] })?;
        let flags = u16::from_le_bytes([bytes[2], bytes[3]]);
        if flags & !KNOWN_FLAGS != 0 {
            return Err(ProtocolError::ReservedFlags(flags));
        }
        let tag = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        let addr = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let pc_raw = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
        let len = u16::from_le_bytes([bytes[24], bytes[25]]) as usize;
        let expected = opcode.payload_len();
        if len != expected {
            return Err(ProtocolError::PayloadLength { opcode, expected, found: len });
        }
        let body = &bytes[HEADER_BYTES..];
        if body.len() < len {
            return Err(ProtocolError::Truncated);
        }
        if body.len() > len {
            return Err(ProtocolError::TrailingBytes(body.len() - len));
        }
        let payload = (len == PAYLOAD_BYTES).then(|| body.try_into().unwrap());
        let pc = match opcode {
            Opcode::MemRdPC => Some(pc_raw),
            _ if pc_raw != 0 => return Err(ProtocolError::UnexpectedPc(opcode)),
            _ => None,
        };
        let msg = Message { opcode, tag, addr, pc, payload, prefetch: flags & FLAG_PREFETCH != 0 };
        if addr % LINE_BYTES != 0 {
            return Err(ProtocolError::Misaligned(addr));
        }
        Ok(msg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NotificationKind {
    CacheHit,
}

/// CXL.io side-channel report of a host cache hit, so the device can keep
/// its timing history current while the host is not missing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IoNotification {
    pub kind: NotificationKind,
    pub addr: u64,
    pub pc: u64,
    pub cpu_cycle: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples_round_trip() {
        let m = Message::mem_rd(0x1000, 7);
        assert_eq!(Message::decode(&m.encode().unwrap()).unwrap(), m);
        let m = Message::mem_rd_pc(0x1000, 0x400123, 8);
        let d = Message::decode(&m.encode().unwrap()).unwrap();
        assert_eq!(d, m);
        assert_eq!(d.pc, Some(0x400123));
    }

    #[test]
    fn unknown_opcode() {
        let mut b = Message::mem_rd(0x1000, 7).encode().unwrap();
        b[1] = 0xFF;
        assert_eq!(Message::decode(&b), Err(ProtocolError::UnknownOpcode { channel: Channel::Req, opcode: 0xFF }));
        b[0] = 9;
        assert_eq!(Message::decode(&b), Err(ProtocolError::UnknownChannel(9)));
    }

    #[test]
    fn distinct_decode_errors() {
        let mut b = Message::mem_rd(0x1000, 7).encode().unwrap();
        b[8] = 0x01;
        assert_eq!(Message::decode(&b), Err(ProtocolError::Misaligned(0x1001)));

        let mut b = Message::mem_wr(0x40, line_payload(0x40), 1).encode().unwrap();
        b[24] = 32;
        assert!(matches!(Message::decode(&b), Err(ProtocolError::PayloadLength { expected: 64, found: 32, .. })));
        let b = Message::mem_wr(0x40, line_payload(0x40), 1).encode().unwrap();
        assert_eq!(Message::decode(&b[..40]), Err(ProtocolError::Truncated));

        let mut b = Message::cmp(0x40, 1).encode().unwrap();
        b.push(0);
        assert_eq!(Message::decode(&b), Err(ProtocolError::TrailingBytes(1)));
    }

    #[test]
    fn encode_validates() {
        let m = Message { payload: Some([0; 64]), ..Message::mem_rd(0, 0) };
        assert!(matches!(m.encode(), Err(ProtocolError::PayloadLength { .. })));
        let m = Message { pc: Some(1), ..Message::mem_rd(0, 0) };
        assert_eq!(m.encode(), Err(ProtocolError::UnexpectedPc(Opcode::MemRd)));
        assert_eq!(Message::mem_rd(0x20, 0).encode(), Err(ProtocolError::Misaligned(0x20)));
    }

    #[test]
    fn opcodes_map_to_distinct_wire_points() {
        for a in Opcode::ALL {
            assert_eq!(Opcode::from_wire(a.channel(), a.code()), Some(a));
        }
    }
}
