//! Raw data packets: the wire codec, beam calibration, and assembly of a
//! packet stream into column-aligned [`PacketBuffer`]s.

mod assemble;
mod calib;
mod codec;

pub use assemble::{
    assemble_buffers, column_shifts, AssembleError, Assembler, AssemblerConfig, Column, PacketBuffer,
    ScanGeometry,
};
pub use calib::{BeamCalibration, CalibrationError};
pub use codec::{
    decode_packet, encode_into, encode_packet, DataBlock, DataPacket, PacketError, Return, AZIMUTH_MODULUS,
    BLOCKS_PER_PACKET, BLOCK_FLAG, CHANNELS_PER_BLOCK, METERS_PER_TICK, PACKET_SIZE, PAYLOAD_SIZE, TAIL_SIZE,
};
