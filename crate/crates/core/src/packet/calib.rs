//! Per-beam calibration.
//!
//! Text format, one beam per line, `#` starts a comment:
//!
//! ```text
//! # channel  vertical_deg  azimuth_offset_deg
//! 0          -25.0         1.4
//! 1          -1.0          -4.2
//! ```
//!
//! Channels may appear in any order but every channel `0..N` must be present
//! exactly once.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("calibration line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("calibration has {got} beams, expected {expected}")]
    BeamCount { got: usize, expected: usize },
    #[error("channel {0} is missing or duplicated")]
    Channel(usize),
    #[error("vertical angles are not strictly increasing after ordering (duplicate {0}°)")]
    NotIncreasing(f64),
    #[error("reading calibration: {0}")]
    Io(#[from] std::io::Error),
}

/// VLP-32C factory table in wire channel order: (vertical°, azimuth offset°).
const VLP32C: [(f64, f64); 32] = [
    (-25.0, 1.4),
    (-1.0, -4.2),
    (-1.667, 1.4),
    (-15.639, -1.4),
    (-11.31, 1.4),
    (0.0, -1.4),
    (-0.667, 4.2),
    (-8.843, -1.4),
    (-7.254, 1.4),
    (0.333, -4.2),
    (-0.333, 1.4),
    (-6.148, -1.4),
    (-5.333, 4.2),
    (1.333, -1.4),
    (0.667, 4.2),
    (-4.0, -1.4),
    (-4.667, 1.4),
    (1.667, -4.2),
    (1.0, 1.4),
    (-3.667, -4.2),
    (-3.333, 4.2),
    (3.333, -1.4),
    (2.333, 1.4),
    (-2.667, -1.4),
    (-3.0, 1.4),
    (7.0, -1.4),
    (4.667, 1.4),
    (-2.333, -4.2),
    (-2.0, 4.2),
    (15.0, -1.4),
    (10.333, 1.4),
    (-1.333, -1.4),
];

/// Beam geometry indexed by range-image row (ascending elevation), plus the
/// wire-channel permutation.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamCalibration {
    vertical_angles: Vec<f64>,
    azimuth_offsets: Vec<f64>,
    channel_to_row: Vec<usize>,
    row_to_channel: Vec<usize>,
}

impl Default for BeamCalibration {
    fn default() -> Self {
        Self::vlp32c()
    }
}

impl BeamCalibration {
    pub fn vlp32c() -> Self {
        Self::from_channels(&VLP32C).expect("built-in table is valid")
    }

    /// Builds a calibration from per-channel `(vertical°, azimuth offset°)`
    /// pairs in wire order.
    pub fn from_channels(table: &[(f64, f64)]) -> Result<Self, CalibrationError> {
        let mut order: Vec<usize> = (0..table.len()).collect();
        order.sort_by(|&a, &b| table[a].0.total_cmp(&table[b].0));
        for pair in order.windows(2) {
            if !(table[pair[0]].0 < table[pair[1]].0) {
                return Err(CalibrationError::NotIncreasing(table[pair[1]].0));
            }
        }
        let mut channel_to_row = vec![0; table.len()];
        for (row, &channel) in order.iter().enumerate() {
            channel_to_row[channel] = row;
        }
        Ok(Self {
            vertical_angles: order.iter().map(|&c| table[c].0).collect(),
            azimuth_offsets: order.iter().map(|&c| table[c].1).collect(),
            channel_to_row,
            row_to_channel: order,
        })
    }

    /// Same vertical angles with every azimuth offset zeroed.
    pub fn without_azimuth_offsets(&self) -> Self {
        Self {
            azimuth_offsets: vec![0.0; self.rows()],
            ..self.clone()
        }
    }

    pub fn rows(&self) -> usize {
        self.vertical_angles.len()
    }

    pub fn vertical_angles(&self) -> &[f64] {
        &self.vertical_angles
    }

    pub fn azimuth_offsets(&self) -> &[f64] {
        &self.azimuth_offsets
    }

    pub fn channel_to_row(&self) -> &[usize] {
        &self.channel_to_row
    }

    pub fn row_to_channel(&self) -> &[usize] {
        &self.row_to_channel
    }

    /// Parses the text table; `expected` pins the beam count.
    pub fn parse(text: &str, expected: usize) -> Result<Self, CalibrationError> {
        let mut table: Vec<Option<(f64, f64)>> = vec![None; expected];
        let mut seen = 0;
        for (index, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: String| CalibrationError::Parse { line: index + 1, message };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(parse_err(format!("expected 3 fields, got {}", fields.len())));
            }
            let channel: usize = fields[0]
                .parse()
                .map_err(|e| parse_err(format!("channel `{}`: {e}", fields[0])))?;
            let vertical: f64 = fields[1]
                .parse()
                .map_err(|e| parse_err(format!("vertical angle `{}`: {e}", fields[1])))?;
            let offset: f64 = fields[2]
                .parse()
                .map_err(|e| parse_err(format!("azimuth offset `{}`: {e}", fields[2])))?;
            if !vertical.is_finite() || !offset.is_finite() {
                return Err(parse_err("angles must be finite".into()));
            }
            seen += 1;
            match table.get_mut(channel) {
                Some(slot @ None) => *slot = Some((vertical, offset)),
                _ => return Err(CalibrationError::Channel(channel)),
            }
        }
        if seen != expected {
            return Err(CalibrationError::BeamCount { got: seen, expected });
        }
        let table: Vec<(f64, f64)> = table
            .into_iter()
            .enumerate()
            .map(|(c, v)| v.ok_or(CalibrationError::Channel(c)))
            .collect::<Result<_, _>>()?;
        Self::from_channels(&table)
    }

    pub fn load(path: &Path, expected: usize) -> Result<Self, CalibrationError> {
        Self::parse(&std::fs::read_to_string(path)?, expected)
    }

    pub fn render(&self) -> String {
        let mut out = String::from("# channel  vertical_deg  azimuth_offset_deg\n");
        for channel in 0..self.rows() {
            let row = self.channel_to_row[channel];
            let _ = writeln!(
                out,
                "{channel:<3} {:>9} {:>6}",
                self.vertical_angles[row], self.azimuth_offsets[row]
            );
        }
        out
    }
}
