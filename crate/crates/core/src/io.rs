//! Packet sources and sinks: classic pcap captures, raw packet files and a
//! live UDP socket.
//!
//! # Raw packet files
//!
//! A raw file is a plain concatenation of records, each a little-endian
//! `u32` byte length followed by that many payload bytes. Records written
//! by this crate are always 1248-byte data packets; readers accept any
//! length and leave validation to the decoder.
//!
//! # Sensor payloads
//!
//! Sensors put 1206 bytes in each UDP datagram: the 1200-byte block area,
//! a 4-byte timestamp and two factory bytes. Such payloads are padded to
//! the 1248-byte packet layout by copying those six bytes to the start of
//! the tail and zero-filling the rest. Payloads of any other length are
//! passed through unchanged.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::UdpSocket;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::packet::{PACKET_SIZE, PAYLOAD_SIZE};

pub const DEFAULT_PORT: u16 = 2368;
/// UDP payload size of a single-return sensor data packet.
pub const SENSOR_PAYLOAD_SIZE: usize = PAYLOAD_SIZE + 6;

const PCAP_MAGIC_US: u32 = 0xa1b2_c3d4;
const PCAP_MAGIC_NS: u32 = 0xa1b2_3c4d;
const LINKTYPE_ETHERNET: u32 = 1;
const LINKTYPE_RAW: u32 = 101;
const DLT_RAW: u32 = 12;
const LINKTYPE_LINUX_SLL: u32 = 113;
/// Larger records are treated as corruption rather than allocated.
const MAX_RECORD: u32 = 1 << 20;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a pcap file (magic {0:#010x})")]
    NotPcap(u32),
    #[error("unsupported pcap link type {0}")]
    UnsupportedLinkType(u32),
    #[error("truncated {what} at byte {offset}")]
    Truncated { what: &'static str, offset: u64 },
    #[error("record of {len} bytes at byte {offset} exceeds the {MAX_RECORD}-byte limit")]
    RecordTooLarge { len: u32, offset: u64 },
}

/// Pads a 1206-byte sensor payload to the packet layout; other lengths are
/// returned unchanged.
pub fn normalize_payload(payload: &[u8]) -> Vec<u8> {
    if payload.len() != SENSOR_PAYLOAD_SIZE {
        return payload.to_vec();
    }
    let mut out = vec![0u8; PACKET_SIZE];
    out[..SENSOR_PAYLOAD_SIZE].copy_from_slice(payload);
    out
}

/// Fills `buf` completely, or returns `Ok(false)` on a clean end of input
/// before the first byte. A partial fill is reported as truncation.
fn read_record(reader: &mut impl Read, buf: &mut [u8], what: &'static str, offset: u64) -> Result<bool, IoError> {
    let mut filled = 0;
    while filled < buf.len() {
        match reader.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 => return Ok(false),
            Ok(0) => return Err(IoError::Truncated { what, offset: offset + filled as u64 }),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(true)
}

fn read_exact_at(reader: &mut impl Read, buf: &mut [u8], what: &'static str, offset: u64) -> Result<(), IoError> {
    if buf.is_empty() || read_record(reader, buf, what, offset)? {
        Ok(())
    } else {
        Err(IoError::Truncated { what, offset })
    }
}

/// Reads UDP payloads sent to one destination port out of a classic pcap
/// capture (microsecond or nanosecond, either byte order) with Ethernet,
/// raw IP or Linux cooked link headers. Non-IPv4, non-UDP, fragmented and
/// other-port frames are skipped.
pub struct PcapReader<R> {
    reader: R,
    swapped: bool,
    link_type: u32,
    port: u16,
    offset: u64,
    frame: Vec<u8>,
    done: bool,
}

impl PcapReader<BufReader<File>> {
    pub fn open(path: &Path, port: u16) -> Result<Self, IoError> {
        Self::new(BufReader::new(File::open(path)?), port)
    }
}

impl<R: Read> PcapReader<R> {
    pub fn new(mut reader: R, port: u16) -> Result<Self, IoError> {
        let mut header = [0u8; 24];
        read_exact_at(&mut reader, &mut header, "pcap header", 0)?;
        let magic = u32::from_le_bytes([header[0], header[1], header[2], header[3]]);
        let swapped = match magic {
            PCAP_MAGIC_US | PCAP_MAGIC_NS => false,
            m if m.swap_bytes() == PCAP_MAGIC_US || m.swap_bytes() == PCAP_MAGIC_NS => true,
            m => return Err(IoError::NotPcap(m)),
        };
        let mut this = Self {
            reader,
            swapped,
            link_type: 0,
            port,
            offset: 24,
            frame: Vec::new(),
            done: false,
        };
        this.link_type = this.u32_at(&header, 20) & 0x0fff_ffff;
        match this.link_type {
            LINKTYPE_ETHERNET | LINKTYPE_RAW | DLT_RAW | LINKTYPE_LINUX_SLL => Ok(this),
            other => Err(IoError::UnsupportedLinkType(other)),
        }
    }

    pub fn link_type(&self) -> u32 {
        self.link_type
    }

    fn u32_at(&self, bytes: &[u8], at: usize) -> u32 {
        let v = u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]);
        if self.swapped {
            v.swap_bytes()
        } else {
            v
        }
    }

    /// Next matching payload, already normalized, or `None` at end of file.
    pub fn next_payload(&mut self) -> Result<Option<Vec<u8>>, IoError> {
        loop {
            let mut header = [0u8; 16];
            if !read_record(&mut self.reader, &mut header, "pcap record header", self.offset)? {
                return Ok(None);
            }
            let len = self.u32_at(&header, 8);
            if len > MAX_RECORD {
                return Err(IoError::RecordTooLarge { len, offset: self.offset });
            }
            self.offset += 16;
            self.frame.resize(len as usize, 0);
            read_exact_at(&mut self.reader, &mut self.frame, "pcap record", self.offset)?;
            self.offset += u64::from(len);
            if let Some(payload) = udp_payload(&self.frame, self.link_type, self.port) {
                return Ok(Some(normalize_payload(payload)));
            }
        }
    }
}

impl<R: Read> Iterator for PcapReader<R> {
    type Item = Result<Vec<u8>, IoError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let item = self.next_payload().transpose();
        if !matches!(item, Some(Ok(_))) {
            self.done = true;
        }
        item
    }
}

fn be16(b: &[u8], at: usize) -> u16 {
    u16::from_be_bytes([b[at], b[at + 1]])
}

/// UDP payload of a captured frame addressed to `port`.
fn udp_payload(frame: &[u8], link_type: u32, port: u16) -> Option<&[u8]> {
    let ip = match link_type {
        LINKTYPE_ETHERNET => {
            let mut at = 12;
            let mut ethertype = be16(frame.get(..14)?, 12);
            // VLAN tags
            while ethertype == 0x8100 || ethertype == 0x88a8 {
                at += 4;
                ethertype = be16(frame.get(..at + 2)?, at);
            }
            if ethertype != 0x0800 {
                return None;
            }
            &frame[at + 2..]
        }
        LINKTYPE_LINUX_SLL => {
            if be16(frame.get(..16)?, 14) != 0x0800 {
                return None;
            }
            &frame[16..]
        }
        _ => frame,
    };
    let version_ihl = *ip.first()?;
    if version_ihl >> 4 != 4 {
        return None;
    }
    let ihl = usize::from(version_ihl & 0x0f) * 4;
    if ihl < 20 || ip.len() < ihl + 8 {
        return None;
    }
    let total = usize::from(be16(ip, 2)).min(ip.len());
    let fragment = be16(ip, 6);
    // more-fragments flag or nonzero offset
    if fragment & 0x3fff != 0 || ip[9] != 17 || total < ihl + 8 {
        return None;
    }
    let udp = &ip[ihl..total];
    if be16(udp, 2) != port {
        return None;
    }
    let udp_len = usize::from(be16(udp, 4));
    let end = if udp_len >= 8 { udp_len.min(udp.len()) } else { udp.len() };
    Some(&udp[8..end])
}

/// Writes a microsecond pcap with Ethernet/IPv4/UDP frames carrying
/// `payloads` to `port`, one frame per payload, timestamps 1 ms apart.
pub fn write_pcap<'a>(mut out: impl Write, payloads: impl IntoIterator<Item = &'a [u8]>, port: u16) -> io::Result<()> {
    let mut header = Vec::with_capacity(24);
    header.extend_from_slice(&PCAP_MAGIC_US.to_le_bytes());
    header.extend_from_slice(&2u16.to_le_bytes());
    header.extend_from_slice(&4u16.to_le_bytes());
    header.extend_from_slice(&0i32.to_le_bytes());
    header.extend_from_slice(&0u32.to_le_bytes());
    header.extend_from_slice(&65535u32.to_le_bytes());
    header.extend_from_slice(&LINKTYPE_ETHERNET.to_le_bytes());
    out.write_all(&header)?;
    for (i, payload) in payloads.into_iter().enumerate() {
        let frame = ethernet_udp_frame(payload, port);
        let t = i as u64 * 1000;
        out.write_all(&((t / 1_000_000) as u32).to_le_bytes())?;
        out.write_all(&((t % 1_000_000) as u32).to_le_bytes())?;
        out.write_all(&(frame.len() as u32).to_le_bytes())?;
        out.write_all(&(frame.len() as u32).to_le_bytes())?;
        out.write_all(&frame)?;
    }
    out.flush()
}

fn ethernet_udp_frame(payload: &[u8], port: u16) -> Vec<u8> {
    let udp_len = 8 + payload.len();
    let ip_len = 20 + udp_len;
    let mut f = Vec::with_capacity(14 + ip_len);
    f.extend_from_slice(&[0xff; 6]);
    f.extend_from_slice(&[0x60, 0x76, 0x88, 0x00, 0x00, 0x01]);
    f.extend_from_slice(&0x0800u16.to_be_bytes());
    let ip_start = f.len();
    f.extend_from_slice(&[0x45, 0]);
    f.extend_from_slice(&(ip_len as u16).to_be_bytes());
    f.extend_from_slice(&[0, 0, 0x40, 0, 64, 17, 0, 0]);
    f.extend_from_slice(&[192, 168, 1, 201]);
    f.extend_from_slice(&[255, 255, 255, 255]);
    let checksum = ipv4_checksum(&f[ip_start..]);
    f[ip_start + 10..ip_start + 12].copy_from_slice(&checksum.to_be_bytes());
    f.extend_from_slice(&2368u16.to_be_bytes());
    f.extend_from_slice(&port.to_be_bytes());
    f.extend_from_slice(&(udp_len as u16).to_be_bytes());
    f.extend_from_slice(&[0, 0]);
    f.extend_from_slice(payload);
    f
}

fn ipv4_checksum(header: &[u8]) -> u16 {
    let mut sum: u32 = header.chunks(2).map(|c| u32::from(u16::from_be_bytes([c[0], c[1]]))).sum();
    while sum > 0xffff {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    !(sum as u16)
}

/// Reads length-prefixed records from a raw packet file.
pub struct RawReader<R> {
    reader: R,
    offset: u64,
    done: bool,
}

impl RawReader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self, IoError> {
        Ok(Self::new(BufReader::new(File::open(path)?)))
    }
}

impl<R: Read> RawReader<R> {
    pub fn new(reader: R) -> Self {
        Self { reader, offset: 0, done: false }
    }

    pub fn next_record(&mut self) -> Result<Option<Vec<u8>>, IoError> {
        let mut len = [0u8; 4];
        if !read_record(&mut self.reader, &mut len, "record length", self.offset)? {
            return Ok(None);
        }
        let len = u32::from_le_bytes(len);
        if len > MAX_RECORD {
            return Err(IoError::RecordTooLarge { len, offset: self.offset });
        }
        self.offset += 4;
        let mut record = vec![0u8; len as usize];
        read_exact_at(&mut self.reader, &mut record, "record", self.offset)?;
        self.offset += u64::from(len);
        Ok(Some(record))
    }
}

impl<R: Read> Iterator for RawReader<R> {
    type Item = Result<Vec<u8>, IoError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let item = self.next_record().transpose();
        if !matches!(item, Some(Ok(_))) {
            self.done = true;
        }
        item
    }
}

pub fn write_raw<'a>(out: impl Write, records: impl IntoIterator<Item = &'a [u8]>) -> io::Result<()> {
    let mut out = BufWriter::new(out);
    for r in records {
        out.write_all(&(r.len() as u32).to_le_bytes())?;
        out.write_all(r)?;
    }
    out.flush()
}

/// Reads every payload of a capture or raw file into memory.
pub fn read_pcap_file(path: &Path, port: u16) -> Result<Vec<Vec<u8>>, IoError> {
    PcapReader::open(path, port)?.collect()
}

pub fn read_raw_file(path: &Path) -> Result<Vec<Vec<u8>>, IoError> {
    RawReader::open(path)?.collect()
}

/// Live datagrams from a UDP socket. Iteration ends once `stop` is set;
/// the flag is polled every `poll` interval while no data arrives.
pub struct UdpSource {
    socket: UdpSocket,
    stop: Arc<AtomicBool>,
    buf: Vec<u8>,
}

impl UdpSource {
    pub fn bind(addr: &str, stop: Arc<AtomicBool>, poll: Duration) -> io::Result<Self> {
        let socket = UdpSocket::bind(addr)?;
        socket.set_read_timeout(Some(poll))?;
        Ok(Self { socket, stop, buf: vec![0u8; 65536] })
    }

    pub fn local_port(&self) -> io::Result<u16> {
        Ok(self.socket.local_addr()?.port())
    }
}

impl Iterator for UdpSource {
    type Item = Vec<u8>;

    fn next(&mut self) -> Option<Vec<u8>> {
        while !self.stop.load(Ordering::Relaxed) {
            match self.socket.recv(&mut self.buf) {
                Ok(n) => return Some(normalize_payload(&self.buf[..n])),
                Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut | io::ErrorKind::Interrupted) => {}
                Err(e) => {
                    tracing::error!("udp receive failed: {e}");
                    return None;
                }
            }
        }
        None
    }
}
