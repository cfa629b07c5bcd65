//! Coarse-to-fine ground segmentation of one packet buffer.
//!
//! The coarse pass walks every column upward from a virtual ground point
//! below the sensor and tags points as ground, change, change-follow or
//! uncertain from the local slope and horizontal range jumps. The fine pass
//! fits sequential line segments in the (ρxy, z) plane per block of columns
//! and settles every point as `Ground` or `Obstacle` by its vertical
//! distance to the nearest segment.

use thiserror::Error;

use crate::geometry::{GroundLabel, SphericalPoint};
use crate::packet::Column;
use crate::params::SegParams;

/// Horizontal run below which a slope is treated as vertical.
const VERTICAL_RUN: f64 = 1e-6;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GroundError {
    #[error("block has {0} line-fitting candidates, need at least 2")]
    DegenerateBlock(usize),
}

/// Ground line `z = a·ρxy + b`, valid on `[rho_start, rho_end]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSegment {
    pub a: f64,
    pub b: f64,
    pub rho_start: f64,
    pub rho_end: f64,
    pub inlier_count: usize,
}

impl LineSegment {
    #[inline]
    pub fn height_at(&self, rho_xy: f64) -> f64 {
        self.a * rho_xy + self.b
    }

    #[inline]
    pub fn vertical_distance(&self, rho_xy: f64, z: f64) -> f64 {
        (z - self.height_at(rho_xy)).abs()
    }
}

/// Slope between a point and the next one up its column.
#[inline]
pub fn slope(p: &SphericalPoint, next: &SphericalPoint) -> f64 {
    (next.z - p.z) / (next.rho_xy - p.rho_xy)
}

pub fn is_change_point(p: &SphericalPoint, next: &SphericalPoint, params: &SegParams) -> bool {
    let run = next.rho_xy - p.rho_xy;
    if run.abs() < VERTICAL_RUN {
        return true;
    }
    ((next.z - p.z) / run).abs() > params.t_alpha
}

#[inline]
fn is_close(prev: &SphericalPoint, p: &SphericalPoint, params: &SegParams) -> bool {
    (p.rho_xy - prev.rho_xy).abs() < params.t_delta_rho
}

/// Coarse labels for one column ordered by ascending elevation.
///
/// The walk is seeded by the virtual ground point, so the first return is
/// ground unless it is itself a change point. No-returns are skipped: they
/// neither receive a label nor advance the walk.
pub fn coarse_segment_column(column: &mut [SphericalPoint], params: &SegParams) {
    let mut prev_label = GroundLabel::Ground;
    let mut prev: Option<usize> = None;
    let mut cursor = next_valid(column, 0);
    while let Some(i) = cursor {
        let next = next_valid(column, i + 1);
        let label = if next.is_some_and(|n| is_change_point(&column[i], &column[n], params)) {
            GroundLabel::Change
        } else {
            match prev_label {
                GroundLabel::Change | GroundLabel::ChangeFollow => {
                    let close = prev.is_some_and(|j| is_close(&column[j], &column[i], params));
                    if close {
                        GroundLabel::ChangeFollow
                    } else {
                        GroundLabel::Uncertain
                    }
                }
                GroundLabel::Uncertain => GroundLabel::Uncertain,
                _ => GroundLabel::Ground,
            }
        };
        column[i].label = label;
        prev_label = label;
        prev = Some(i);
        cursor = next;
    }
}

#[inline]
fn next_valid(column: &[SphericalPoint], from: usize) -> Option<usize> {
    column[from.min(column.len())..]
        .iter()
        .position(SphericalPoint::is_valid)
        .map(|k| from + k)
}

/// Running least-squares sums, centered on the first sample.
#[derive(Default, Clone)]
struct LineAccum {
    n: usize,
    r0: f64,
    z0: f64,
    sr: f64,
    sz: f64,
    srr: f64,
    srz: f64,
    szz: f64,
    rho_min: f64,
    rho_max: f64,
}

impl LineAccum {
    fn from_slice(points: &[(f64, f64)]) -> Self {
        let (r0, z0) = points[0];
        let mut acc = Self { r0, z0, rho_min: r0, rho_max: r0, ..Default::default() };
        for &(r, z) in points {
            acc.add(r, z);
        }
        acc
    }

    fn add(&mut self, rho: f64, z: f64) {
        let (u, v) = (rho - self.r0, z - self.z0);
        self.n += 1;
        self.sr += u;
        self.sz += v;
        self.srr += u * u;
        self.srz += u * v;
        self.szz += v * v;
        self.rho_min = self.rho_min.min(rho);
        self.rho_max = self.rho_max.max(rho);
    }

    /// `(a, b)`; a horizontal line through the mean when every abscissa is
    /// the same.
    fn fit(&self) -> (f64, f64) {
        let n = self.n as f64;
        let var = n * self.srr - self.sr * self.sr;
        let a = if var <= 1e-12 * n * n { 0.0 } else { (n * self.srz - self.sr * self.sz) / var };
        let b = (self.sz - a * self.sr) / n + self.z0 - a * self.r0;
        (a, b)
    }

    fn into_segment(self, params: &SegParams) -> Option<LineSegment> {
        if self.n < 2 || !(self.rho_min < self.rho_max) {
            return None;
        }
        let (a, b) = self.fit();
        let [a_lo, a_hi] = params.line_slope_range;
        let [b_lo, b_hi] = params.intercept_range();
        if !(a_lo..=a_hi).contains(&a) || !(b_lo..=b_hi).contains(&b) {
            return None;
        }
        Some(LineSegment {
            a,
            b,
            rho_start: self.rho_min,
            rho_end: self.rho_max,
            inlier_count: self.n,
        })
    }
}

/// Sum of squared residuals of the least-squares line through a sample
/// with the given centered moments.
fn sse(n: f64, sr: f64, sz: f64, srr: f64, srz: f64, szz: f64) -> f64 {
    let var_r = srr - sr * sr / n;
    let var_z = szz - sz * sz / n;
    let cov = srz - sr * sz / n;
    if var_r <= 1e-12 * n {
        var_z.max(0.0)
    } else {
        (var_z - cov * cov / var_r).max(0.0)
    }
}

/// Split index `j` in `1..points.len()` minimizing the combined squared
/// error of separate fits to `points[..j]` and `points[j..]`. Ties keep the
/// left part longer.
fn best_split(points: &[(f64, f64)]) -> usize {
    let (r0, z0) = points[0];
    let mut total = [0.0; 5];
    for &(r, z) in points {
        let (u, v) = (r - r0, z - z0);
        total[0] += u;
        total[1] += v;
        total[2] += u * u;
        total[3] += u * v;
        total[4] += v * v;
    }
    let len = points.len() as f64;
    let mut left = [0.0; 5];
    let mut best = (f64::INFINITY, 1);
    for j in 1..points.len() {
        let (u, v) = (points[j - 1].0 - r0, points[j - 1].1 - z0);
        left[0] += u;
        left[1] += v;
        left[2] += u * u;
        left[3] += u * v;
        left[4] += v * v;
        let nl = j as f64;
        let right: [f64; 5] = std::array::from_fn(|i| total[i] - left[i]);
        let cost = sse(nl, left[0], left[1], left[2], left[3], left[4])
            + sse(len - nl, right[0], right[1], right[2], right[3], right[4]);
        if cost <= best.0 {
            best = (cost, j);
        }
    }
    best.1
}

fn max_residual(points: &[(f64, f64)], (a, b): (f64, f64)) -> f64 {
    points.iter().map(|&(r, z)| (z - (a * r + b)).abs()).fold(0.0, f64::max)
}

fn sort_key(&(r, z): &(f64, f64)) -> (u64, i64) {
    // ρxy is non-negative, so its bit pattern orders like the value
    let zb = z.to_bits() as i64;
    (r.to_bits(), zb ^ (((zb >> 63) as u64) >> 1) as i64)
}

/// Sorts by `(ρxy, z)`. Candidates gathered row by row are nearly sorted,
/// so an insertion sort usually wins; past a work budget the rest is left
/// to the general sort, which yields the same order.
fn sort_candidates(candidates: &mut [(f64, f64)]) {
    let mut budget = 8 * candidates.len();
    for i in 1..candidates.len() {
        let key = sort_key(&candidates[i]);
        let mut j = i;
        while j > 0 && sort_key(&candidates[j - 1]) > key {
            j -= 1;
        }
        if i - j > budget {
            candidates.sort_unstable_by_key(sort_key);
            return;
        }
        budget -= i - j;
        candidates[j..=i].rotate_right(1);
    }
}

/// Sequential split fitting over `(ρxy, z)` candidates.
///
/// Candidates are visited by ascending ρxy and appended to the open segment
/// while every residual of the open segment under its refit, the new
/// point's included, stays within `t_p2line`. On a
/// violation the open run is cut where two separate fits explain it best,
/// the left part is closed and the right part stays open. Segments outside
/// the slope or intercept ranges are dropped.
pub fn fit_line_segments(
    candidates: &mut [(f64, f64)],
    params: &SegParams,
) -> Result<Vec<LineSegment>, GroundError> {
    if candidates.len() < 2 {
        return Err(GroundError::DegenerateBlock(candidates.len()));
    }
    sort_candidates(candidates);
    let t = params.t_p2line;
    let mut segments = Vec::new();
    let mut start = 0;
    let mut acc = LineAccum::from_slice(&candidates[..1]);
    let mut line = acc.fit();
    // exact largest residual against `anchor`, kept current as points arrive;
    // moving to another line shifts every residual by at most the change
    // at one of the range ends
    let mut anchor = line;
    let mut anchor_max = 0.0_f64;
    for k in 1..candidates.len() {
        let (r, z) = candidates[k];
        acc.add(r, z);
        line = acc.fit();
        anchor_max = anchor_max.max((z - (anchor.0 * r + anchor.1)).abs());
        let (da, db) = (line.0 - anchor.0, line.1 - anchor.1);
        let drift = (da * acc.rho_min + db).abs().max((da * acc.rho_max + db).abs());
        let within = anchor_max + drift <= t || {
            anchor = line;
            anchor_max = max_residual(&candidates[start..=k], line);
            anchor_max <= t
        };
        if !within {
            let j = start + best_split(&candidates[start..=k]);
            segments.extend(LineAccum::from_slice(&candidates[start..j]).into_segment(params));
            start = j;
            acc = LineAccum::from_slice(&candidates[start..=k]);
            line = acc.fit();
            anchor = line;
            anchor_max = max_residual(&candidates[start..=k], line);
        }
    }
    segments.extend(acc.into_segment(params));
    Ok(segments)
}

/// Segment that contains `rho_xy`, else the one with the closest endpoint.
/// `segments` must be ordered by `rho_start`.
pub fn nearest_segment(segments: &[LineSegment], rho_xy: f64) -> Option<&LineSegment> {
    let after = segments.partition_point(|s| s.rho_start <= rho_xy);
    if after > 0 && rho_xy <= segments[after - 1].rho_end {
        return Some(&segments[after - 1]);
    }
    let left = after.checked_sub(1).map(|i| (rho_xy - segments[i].rho_end, i));
    let right = segments.get(after).map(|s| (s.rho_start - rho_xy, after));
    match (left, right) {
        (Some(l), Some(r)) => Some(&segments[if r.0 < l.0 { r.1 } else { l.1 }]),
        (Some(l), None) => Some(&segments[l.1]),
        (None, Some(r)) => Some(&segments[r.1]),
        (None, None) => None,
    }
}

/// Final `Ground`/`Obstacle` decision for coarse-labeled points.
///
/// Change points are obstacles outright. With no valid segment the coarse
/// label stands, except that anything other than `Ground` becomes `Obstacle`.
pub fn fine_segment<'a>(
    points: impl IntoIterator<Item = &'a mut SphericalPoint>,
    segments: &[LineSegment],
    params: &SegParams,
) {
    for p in points {
        p.label = match p.label {
            GroundLabel::Invalid => continue,
            GroundLabel::Change => GroundLabel::Obstacle,
            coarse => match nearest_segment(segments, p.rho_xy) {
                Some(s) if s.vertical_distance(p.rho_xy, p.z) > params.t_p2line => GroundLabel::Obstacle,
                Some(_) => GroundLabel::Ground,
                None if coarse == GroundLabel::Ground => GroundLabel::Ground,
                None => GroundLabel::Obstacle,
            },
        };
    }
}

/// Runs both passes over the columns of one buffer. Fitting blocks are
/// aligned to multiples of `block_size_b` in scan column space, so a buffer
/// whose width is a multiple of the block size always fits whole blocks.
#[derive(Default)]
pub struct GroundSegmenter {
    candidates: Vec<(f64, f64)>,
    segments: Vec<LineSegment>,
}

impl GroundSegmenter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn segment(&mut self, columns: &mut [Column], params: &SegParams) {
        let block = params.block_size_b as u32;
        let mut start = 0;
        while start < columns.len() {
            let block_id = columns[start].col / block;
            let end = start + columns[start..].partition_point(|c| c.col / block == block_id);
            self.block(&mut columns[start..end], params);
            start = end;
        }
    }

    fn block(&mut self, columns: &mut [Column], params: &SegParams) {
        for column in columns.iter_mut() {
            coarse_segment_column(&mut column.points, params);
        }
        // row-major, so that candidates arrive nearly sorted by range
        self.candidates.clear();
        let rows = columns.iter().map(|c| c.points.len()).max().unwrap_or(0);
        for row in 0..rows {
            let from = self.candidates.len();
            for c in columns.iter() {
                if let Some(p) = c.points.get(row) {
                    if matches!(p.label, GroundLabel::Ground | GroundLabel::Uncertain) {
                        self.candidates.push((p.rho_xy, p.z));
                    }
                }
            }
            self.candidates[from..].sort_unstable_by_key(sort_key);
        }
        self.segments.clear();
        if let Ok(segments) = fit_line_segments(&mut self.candidates, params) {
            self.segments = segments;
        }
        fine_segment(columns.iter_mut().flat_map(|c| c.points.iter_mut()), &self.segments, params);
    }
}
