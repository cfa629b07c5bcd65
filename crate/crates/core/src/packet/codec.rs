//! Wire layout of a single-return data packet (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       1200  12 blocks of 100 bytes:
//!                 flag u16 | azimuth u16 (centidegrees) | 32 × (range u16 ticks, reflectivity u8)
//! 1200    48    tail: timestamp u32 (µs past the hour), two factory bytes, 42 reserved bytes
//! ```
//!
//! One range tick is 4 mm; a zero range is a no-return.

use thiserror::Error;

pub const PACKET_SIZE: usize = 1248;
pub const BLOCKS_PER_PACKET: usize = 12;
pub const CHANNELS_PER_BLOCK: usize = 32;
pub const BLOCK_SIZE: usize = 4 + 3 * CHANNELS_PER_BLOCK;
pub const PAYLOAD_SIZE: usize = BLOCKS_PER_PACKET * BLOCK_SIZE;
pub const TAIL_SIZE: usize = PACKET_SIZE - PAYLOAD_SIZE;
/// Bytes `FF EE` read little-endian.
pub const BLOCK_FLAG: u16 = 0xEEFF;
pub const METERS_PER_TICK: f64 = 0.004;
pub const AZIMUTH_MODULUS: u16 = 36000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PacketError {
    #[error("data packet must be {PACKET_SIZE} bytes, got {0}")]
    WrongLength(usize),
    #[error("block {block} azimuth {azimuth} is not below 36000 centidegrees")]
    BadAzimuth { block: usize, azimuth: u16 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Return {
    pub ticks: u16,
    pub reflectivity: u8,
}

impl Return {
    pub fn meters(&self) -> f64 {
        f64::from(self.ticks) * METERS_PER_TICK
    }

    /// Quantizes a range to the nearest tick. Ranges that do not fit the
    /// 16-bit field are reported as no-return.
    pub fn from_meters(rho: f64, reflectivity: u8) -> Self {
        let ticks = (rho / METERS_PER_TICK).round();
        let ticks = if rho > 0.0 && ticks <= f64::from(u16::MAX) { ticks as u16 } else { 0 };
        Self { ticks, reflectivity }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DataBlock {
    pub flag: u16,
    pub azimuth: u16,
    pub returns: [Return; CHANNELS_PER_BLOCK],
}

impl Default for DataBlock {
    fn default() -> Self {
        Self {
            flag: 0,
            azimuth: 0,
            returns: [Return::default(); CHANNELS_PER_BLOCK],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataPacket {
    pub blocks: [DataBlock; BLOCKS_PER_PACKET],
    /// Timestamp and status bytes, carried through untouched.
    pub tail: [u8; TAIL_SIZE],
}

impl Default for DataPacket {
    fn default() -> Self {
        Self {
            blocks: [DataBlock::default(); BLOCKS_PER_PACKET],
            tail: [0; TAIL_SIZE],
        }
    }
}

impl DataPacket {
    pub fn timestamp_us(&self) -> u32 {
        u32::from_le_bytes([self.tail[0], self.tail[1], self.tail[2], self.tail[3]])
    }

    pub fn set_timestamp_us(&mut self, t: u32) {
        self.tail[..4].copy_from_slice(&t.to_le_bytes());
    }

    pub fn nonzero_returns(&self) -> usize {
        self.blocks
            .iter()
            .flat_map(|b| b.returns.iter())
            .filter(|r| r.ticks != 0)
            .count()
    }
}

pub fn decode_packet(bytes: &[u8]) -> Result<DataPacket, PacketError> {
    if bytes.len() != PACKET_SIZE {
        return Err(PacketError::WrongLength(bytes.len()));
    }
    let mut packet = DataPacket::default();
    for (index, (block, raw)) in packet
        .blocks
        .iter_mut()
        .zip(bytes[..PAYLOAD_SIZE].chunks_exact(BLOCK_SIZE))
        .enumerate()
    {
        block.flag = u16::from_le_bytes([raw[0], raw[1]]);
        block.azimuth = u16::from_le_bytes([raw[2], raw[3]]);
        if block.azimuth >= AZIMUTH_MODULUS {
            return Err(PacketError::BadAzimuth { block: index, azimuth: block.azimuth });
        }
        for (ret, chunk) in block.returns.iter_mut().zip(raw[4..].chunks_exact(3)) {
            ret.ticks = u16::from_le_bytes([chunk[0], chunk[1]]);
            ret.reflectivity = chunk[2];
        }
    }
    packet.tail.copy_from_slice(&bytes[PAYLOAD_SIZE..]);
    Ok(packet)
}

pub fn encode_packet(packet: &DataPacket) -> [u8; PACKET_SIZE] {
    let mut out = [0u8; PACKET_SIZE];
    encode_into(packet, &mut out);
    out
}

pub fn encode_into(packet: &DataPacket, out: &mut [u8; PACKET_SIZE]) {
    for (block, raw) in packet.blocks.iter().zip(out[..PAYLOAD_SIZE].chunks_exact_mut(BLOCK_SIZE)) {
        raw[0..2].copy_from_slice(&block.flag.to_le_bytes());
        raw[2..4].copy_from_slice(&block.azimuth.to_le_bytes());
        for (ret, chunk) in block.returns.iter().zip(raw[4..].chunks_exact_mut(3)) {
            chunk[0..2].copy_from_slice(&ret.ticks.to_le_bytes());
            chunk[2] = ret.reflectivity;
        }
    }
    out[PAYLOAD_SIZE..].copy_from_slice(&packet.tail);
}
