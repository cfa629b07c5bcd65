//! Assembly of firings into column-aligned packet buffers.
//!
//! Each beam has its own azimuth offset, so the returns of one firing do not
//! share a column. Every beam row is shifted by `round(offset / resolution)`
//! columns so that a column gathers the returns that actually look in the
//! same direction. Scan column `c` therefore receives row `r` from firing
//! `c - shift[r] + min_shift`, and is complete as soon as firing `c` has
//! arrived. A scan holds `firings + span_extra` columns where
//! `span_extra = max_shift - min_shift`; the leading and trailing
//! `span_extra` columns are only partially populated and overlap the
//! neighbouring revolutions in azimuth.
//!
//! A block carrying `F` firings is split into `F` consecutive channel groups
//! of `32 / F` beams; firing `f` is placed at the block azimuth plus `f / F`
//! of the step to the next block.

use std::collections::VecDeque;

use thiserror::Error;

use super::calib::BeamCalibration;
use super::codec::{DataPacket, AZIMUTH_MODULUS, CHANNELS_PER_BLOCK, METERS_PER_TICK};
use crate::geometry::{wrap_degrees, SphericalPoint};

/// An azimuth drop larger than this (centidegrees) starts a new revolution.
const WRAP_THRESHOLD_CD: f64 = 18000.0;

#[derive(Debug, Error, PartialEq)]
pub enum AssembleError {
    #[error("azimuth went back from {previous_cd} to {azimuth_cd} centidegrees; scan restarted")]
    OutOfOrderPacket { previous_cd: f64, azimuth_cd: f64 },
    #[error("invalid assembler configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AssemblerConfig {
    pub buffer_packets: usize,
    pub firings_per_block: usize,
    /// Azimuth width of one column, centidegrees.
    pub column_resolution_cd: u32,
}

impl Default for AssemblerConfig {
    fn default() -> Self {
        Self {
            buffer_packets: 5,
            firings_per_block: 1,
            column_resolution_cd: 20,
        }
    }
}

impl AssemblerConfig {
    pub fn columns_per_buffer(&self) -> usize {
        self.buffer_packets * super::codec::BLOCKS_PER_PACKET * self.firings_per_block
    }

    pub fn columns_per_rev(&self) -> u32 {
        u32::from(AZIMUTH_MODULUS) / self.column_resolution_cd
    }
}

/// Column layout shared by all buffers of a scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanGeometry {
    /// Columns in one full revolution; column `c` and `c + columns_per_rev`
    /// look in the same direction.
    pub columns_per_rev: u32,
    /// Extra columns a scan spans beyond its firing count.
    pub span_extra: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub col: u32,
    /// Nominal azimuth of the column, degrees.
    pub azimuth: f64,
    /// One slot per row, ascending elevation.
    pub points: Vec<SphericalPoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PacketBuffer {
    pub scan_id: u32,
    pub buffer_seq: u64,
    pub rows: usize,
    pub columns: Vec<Column>,
    pub geometry: ScanGeometry,
    pub last_in_scan: bool,
    /// Firings in the whole scan; only known on the last buffer.
    pub scan_firings: Option<u32>,
}

impl PacketBuffer {
    pub fn points(&self) -> impl Iterator<Item = &SphericalPoint> {
        self.columns.iter().flat_map(|c| c.points.iter())
    }

    pub fn nonzero_returns(&self) -> usize {
        self.points().filter(|p| p.is_valid()).count()
    }

    pub fn first_col(&self) -> Option<u32> {
        self.columns.first().map(|c| c.col)
    }

    pub fn last_col(&self) -> Option<u32> {
        self.columns.last().map(|c| c.col)
    }

    /// Concatenates the buffers of one scan into a single buffer covering
    /// the whole scan.
    pub fn concat(buffers: &[PacketBuffer]) -> Option<PacketBuffer> {
        let first = buffers.first()?;
        let mut out = PacketBuffer {
            scan_id: first.scan_id,
            buffer_seq: first.buffer_seq,
            rows: first.rows,
            columns: Vec::with_capacity(buffers.iter().map(|b| b.columns.len()).sum()),
            geometry: first.geometry,
            last_in_scan: false,
            scan_firings: None,
        };
        for b in buffers {
            debug_assert_eq!(b.scan_id, first.scan_id);
            out.columns.extend(b.columns.iter().cloned());
            out.last_in_scan |= b.last_in_scan;
            out.scan_firings = out.scan_firings.or(b.scan_firings);
        }
        Some(out)
    }
}

struct PendingColumn {
    points: Vec<SphericalPoint>,
    /// Azimuth of the firing anchoring this column, centidegrees.
    anchor_cd: Option<f64>,
}

struct ScanState {
    scan_id: u32,
    firings: u32,
    last_firing_cd: f64,
    /// Column index of `pending[0]`.
    front_col: u32,
    pending: VecDeque<PendingColumn>,
}

/// Turns a firing stream into [`PacketBuffer`]s.
pub struct Assembler {
    calib: BeamCalibration,
    config: AssemblerConfig,
    shifts: Vec<i64>,
    min_shift: i64,
    span_extra: u32,
    scan: Option<ScanState>,
    next_scan_id: u32,
    next_buffer_seq: u64,
    last_azimuth_cd: Option<f64>,
    last_block_step_cd: f64,
    scratch: Vec<f64>,
}

impl Assembler {
    pub fn new(calib: BeamCalibration, config: AssemblerConfig) -> Result<Self, AssembleError> {
        if config.buffer_packets == 0 {
            return Err(AssembleError::Config("buffer_packets must be at least 1".into()));
        }
        if config.firings_per_block == 0 || !CHANNELS_PER_BLOCK.is_multiple_of(config.firings_per_block) {
            return Err(AssembleError::Config(format!(
                "firings_per_block {} does not divide {CHANNELS_PER_BLOCK}",
                config.firings_per_block
            )));
        }
        if calib.rows() * config.firings_per_block != CHANNELS_PER_BLOCK {
            return Err(AssembleError::Config(format!(
                "{} calibrated beams × {} firings does not fill a {CHANNELS_PER_BLOCK}-channel block",
                calib.rows(),
                config.firings_per_block
            )));
        }
        if config.column_resolution_cd == 0 || u32::from(AZIMUTH_MODULUS) % config.column_resolution_cd != 0 {
            return Err(AssembleError::Config(format!(
                "column resolution {} cd must divide 36000",
                config.column_resolution_cd
            )));
        }
        let shifts = column_shifts(&calib, config.column_resolution_cd);
        let min_shift = shifts.iter().copied().min().unwrap_or(0);
        let max_shift = shifts.iter().copied().max().unwrap_or(0);
        Ok(Self {
            calib,
            config,
            shifts,
            min_shift,
            span_extra: (max_shift - min_shift) as u32,
            scan: None,
            next_scan_id: 0,
            next_buffer_seq: 0,
            last_azimuth_cd: None,
            last_block_step_cd: f64::from(config.column_resolution_cd * config.firings_per_block as u32),
            scratch: Vec::with_capacity(CHANNELS_PER_BLOCK),
        })
    }

    pub fn calibration(&self) -> &BeamCalibration {
        &self.calib
    }

    pub fn config(&self) -> &AssemblerConfig {
        &self.config
    }

    pub fn geometry(&self) -> ScanGeometry {
        ScanGeometry {
            columns_per_rev: self.config.columns_per_rev(),
            span_extra: self.span_extra,
        }
    }

    /// Scan column receiving row `row` of the `firing`-th firing of a scan.
    pub fn column_of(&self, firing: u32, row: usize) -> u32 {
        (i64::from(firing) + self.shifts[row] - self.min_shift) as u32
    }

    /// Adds one decoded packet. Completed buffers are appended to `out`, also
    /// when an out-of-order error is returned.
    pub fn push_packet(
        &mut self,
        packet: &DataPacket,
        out: &mut Vec<PacketBuffer>,
    ) -> Result<(), AssembleError> {
        let f = self.config.firings_per_block;
        let group = CHANNELS_PER_BLOCK / f;
        let mut first_err = None;
        for (b, block) in packet.blocks.iter().enumerate() {
            let az = f64::from(block.azimuth);
            if f > 1 {
                if let Some(next) = packet.blocks.get(b + 1) {
                    let step = (f64::from(next.azimuth) - az).rem_euclid(f64::from(AZIMUTH_MODULUS));
                    if step > 0.0 && step < WRAP_THRESHOLD_CD {
                        self.last_block_step_cd = step;
                    }
                }
            }
            for firing in 0..f {
                let firing_az = (az + firing as f64 * self.last_block_step_cd / f as f64)
                    .rem_euclid(f64::from(AZIMUTH_MODULUS));
                let mut ranges = std::mem::take(&mut self.scratch);
                ranges.clear();
                ranges.extend(
                    block.returns[firing * group..(firing + 1) * group]
                        .iter()
                        .map(|r| f64::from(r.ticks) * METERS_PER_TICK),
                );
                let res = self.push_firing(firing_az, &ranges, out);
                self.scratch = ranges;
                if let Err(e) = res {
                    first_err.get_or_insert(e);
                }
            }
        }
        first_err.map_or(Ok(()), Err)
    }

    /// Adds one firing: an azimuth (centidegrees) and one range per channel
    /// of the firing group, in wire order (meters, 0 = no return).
    pub fn push_firing(
        &mut self,
        azimuth_cd: f64,
        ranges: &[f64],
        out: &mut Vec<PacketBuffer>,
    ) -> Result<(), AssembleError> {
        assert_eq!(ranges.len(), self.calib.rows(), "one range per beam");
        let mut result = Ok(());
        if let Some(previous_cd) = self.last_azimuth_cd {
            if azimuth_cd < previous_cd {
                self.finish_scan(out);
                if previous_cd - azimuth_cd <= WRAP_THRESHOLD_CD {
                    result = Err(AssembleError::OutOfOrderPacket { previous_cd, azimuth_cd });
                }
            }
        }
        self.last_azimuth_cd = Some(azimuth_cd);

        if self.scan.is_none() {
            self.scan = Some(ScanState {
                scan_id: self.next_scan_id,
                firings: 0,
                last_firing_cd: azimuth_cd,
                front_col: 0,
                pending: VecDeque::new(),
            });
            self.next_scan_id += 1;
        }
        let rows = self.calib.rows();
        let span_extra = self.span_extra;
        let scan = self.scan.as_mut().expect("scan just opened");
        let firing = scan.firings;
        scan.firings += 1;
        scan.last_firing_cd = azimuth_cd;

        let needed = firing + span_extra;
        while scan.front_col + (scan.pending.len() as u32) <= needed {
            let col = scan.front_col + scan.pending.len() as u32;
            scan.pending.push_back(PendingColumn {
                points: (0..rows)
                    .map(|r| SphericalPoint::no_return(self.calib.vertical_angles()[r], 0.0, r as u16, col))
                    .collect(),
                anchor_cd: None,
            });
        }
        let anchor_index = (firing - scan.front_col) as usize;
        scan.pending[anchor_index].anchor_cd = Some(azimuth_cd);

        for (channel, &rho) in ranges.iter().enumerate() {
            let row = self.calib.channel_to_row()[channel];
            let col = (i64::from(firing) + self.shifts[row] - self.min_shift) as u32;
            let theta = azimuth_cd / 100.0 + self.calib.azimuth_offsets()[row];
            let phi = self.calib.vertical_angles()[row];
            let slot = &mut scan.pending[(col - scan.front_col) as usize].points[row];
            *slot = if rho > 0.0 {
                SphericalPoint::new(rho, phi, theta, row as u16, col)
            } else {
                SphericalPoint::no_return(phi, theta, row as u16, col)
            };
        }

        let width = self.config.columns_per_buffer() as u32;
        loop {
            let scan = self.scan.as_ref().expect("open scan");
            if scan.front_col + width - 1 > firing {
                break;
            }
            self.emit(width as usize, false, out);
        }
        result
    }

    /// Flushes the open scan, if any. Call at end of stream.
    pub fn finish(&mut self, out: &mut Vec<PacketBuffer>) {
        self.finish_scan(out);
        self.last_azimuth_cd = None;
    }

    fn finish_scan(&mut self, out: &mut Vec<PacketBuffer>) {
        let Some(scan) = self.scan.as_ref() else { return };
        let width = self.config.columns_per_buffer();
        let mut remaining = scan.pending.len();
        if remaining == 0 {
            self.emit(0, true, out);
        }
        while remaining > 0 {
            let take = width.min(remaining);
            remaining -= take;
            self.emit(take, remaining == 0, out);
        }
        self.scan = None;
    }

    fn emit(&mut self, count: usize, last: bool, out: &mut Vec<PacketBuffer>) {
        let res_deg = f64::from(self.config.column_resolution_cd) / 100.0;
        let min_shift = self.min_shift as f64;
        let geometry = self.geometry();
        let scan = self.scan.as_mut().expect("emit needs an open scan");
        let mut columns = Vec::with_capacity(count);
        for _ in 0..count {
            let pending = scan.pending.pop_front().expect("column pending");
            let col = scan.front_col;
            scan.front_col += 1;
            let anchor_deg = match pending.anchor_cd {
                Some(cd) => cd / 100.0,
                None => {
                    let ahead = f64::from(col) - f64::from(scan.firings - 1);
                    scan.last_firing_cd / 100.0 + ahead * res_deg
                }
            };
            let azimuth = wrap_degrees(anchor_deg + min_shift * res_deg);
            let mut points = pending.points;
            for p in points.iter_mut().filter(|p| !p.is_valid()) {
                p.theta = wrap_degrees(azimuth + self.calib.azimuth_offsets()[p.row as usize]
                    - (self.shifts[p.row as usize] as f64) * res_deg);
            }
            columns.push(Column { col, azimuth, points });
        }
        out.push(PacketBuffer {
            scan_id: scan.scan_id,
            buffer_seq: self.next_buffer_seq,
            rows: self.calib.rows(),
            columns,
            geometry,
            last_in_scan: last,
            scan_firings: last.then_some(scan.firings),
        });
        self.next_buffer_seq += 1;
    }
}

/// Per-row column shift, `round(azimuth_offset / resolution)`.
pub fn column_shifts(calib: &BeamCalibration, column_resolution_cd: u32) -> Vec<i64> {
    calib
        .azimuth_offsets()
        .iter()
        .map(|&o| (o * 100.0 / f64::from(column_resolution_cd)).round() as i64)
        .collect()
}

/// Assembles a whole packet sequence. Out-of-order errors are collected and
/// assembly continues with a new scan.
pub fn assemble_buffers<'a>(
    packets: impl IntoIterator<Item = &'a DataPacket>,
    calib: &BeamCalibration,
    config: AssemblerConfig,
) -> Result<(Vec<PacketBuffer>, Vec<AssembleError>), AssembleError> {
    let mut assembler = Assembler::new(calib.clone(), config)?;
    let mut buffers = Vec::new();
    let mut errors = Vec::new();
    for p in packets {
        if let Err(e) = assembler.push_packet(p, &mut buffers) {
            errors.push(e);
        }
    }
    assembler.finish(&mut buffers);
    Ok((buffers, errors))
}
