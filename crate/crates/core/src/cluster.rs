//! Connected-component clustering of obstacle points and refinement of
//! over-segmented clusters across packet buffers.
//!
//! Obstacle points are visited column by column, bottom to top. A point
//! joins the cluster of the first earlier point in its search region whose
//! horizontal range differs by less than `t_ccl`, otherwise it starts a new
//! cluster. Clusters stay open in a [`ClusterBuffer`] where linked pairs
//! (contained, overlapping or neighbouring column spans) are merged when the
//! n-th smallest mutual point distance is below `t_merge`.
//!
//! The mutual region of a pair is each cluster's points whose column lies
//! within `t_neighbour` columns of the other cluster's span. Growing a
//! cluster can only enlarge these regions, which keeps merge decisions
//! stable when clusters are refined early on partial data. Merged clusters
//! keep the smallest id of their parts.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::geometry::{GroundLabel, SphericalPoint};
use crate::packet::{Column, ScanGeometry};
use crate::params::SegParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub row: u16,
    pub col: u32,
}

impl ClusterPoint {
    #[inline]
    pub fn position(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    #[inline]
    pub fn distance_sq(&self, other: &ClusterPoint) -> f64 {
        let (dx, dy, dz) = (self.x - other.x, self.y - other.y, self.z - other.z);
        dx * dx + dy * dy + dz * dz
    }
}

impl From<&SphericalPoint> for ClusterPoint {
    fn from(p: &SphericalPoint) -> Self {
        Self { x: p.x, y: p.y, z: p.z, row: p.row, col: p.col }
    }
}

/// Axis-aligned Cartesian bounds, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn point(p: [f64; 3]) -> Self {
        Self { min: p, max: p }
    }

    pub fn include(&mut self, p: [f64; 3]) {
        for k in 0..3 {
            self.min[k] = self.min[k].min(p[k]);
            self.max[k] = self.max[k].max(p[k]);
        }
    }

    pub fn union(&mut self, other: &Aabb) {
        self.include(other.min);
        self.include(other.max);
    }

    /// Smallest distance between any two points of the boxes.
    pub fn distance(&self, other: &Aabb) -> f64 {
        let mut sq = 0.0;
        for k in 0..3 {
            let gap = (other.min[k] - self.max[k]).max(self.min[k] - other.max[k]).max(0.0);
            sq += gap * gap;
        }
        sq.sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClusterState {
    Open,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialCluster {
    pub id: u32,
    pub points: Vec<ClusterPoint>,
    pub col_start: u32,
    pub col_end: u32,
    pub bbox: Aabb,
    pub state: ClusterState,
}

impl InitialCluster {
    pub fn new(id: u32, first: ClusterPoint) -> Self {
        Self {
            id,
            points: vec![first],
            col_start: first.col,
            col_end: first.col,
            bbox: Aabb::point(first.position()),
            state: ClusterState::Open,
        }
    }

    pub fn from_points(id: u32, points: &[ClusterPoint]) -> Self {
        let mut c = Self::new(id, points[0]);
        for &p in &points[1..] {
            c.push(p);
        }
        c
    }

    pub fn push(&mut self, p: ClusterPoint) {
        self.col_start = self.col_start.min(p.col);
        self.col_end = self.col_end.max(p.col);
        self.bbox.include(p.position());
        self.points.push(p);
    }

    /// Takes over every point of `other`.
    pub fn absorb(&mut self, other: InitialCluster) {
        self.id = self.id.min(other.id);
        self.col_start = self.col_start.min(other.col_start);
        self.col_end = self.col_end.max(other.col_end);
        self.bbox.union(&other.bbox);
        self.points.extend(other.points);
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> [f64; 3] {
        let n = self.points.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            c[0] += p.x;
            c[1] += p.y;
            c[2] += p.z;
        }
        c.map(|v| v / n)
    }

    /// Points in column then row order, as a canonical form for comparison.
    pub fn sort_points(&mut self) {
        self.points.sort_by_key(|p| (p.col, p.row));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Linkage {
    Contain,
    Overlap,
    Neighbour,
    None,
}

/// Relation between inclusive column spans. `gap` counts whole columns
/// strictly between disjoint spans.
pub fn span_linkage(a: (i64, i64), b: (i64, i64), t_neighbour: usize) -> Linkage {
    let ((s1, e1), (s2, e2)) = (a, b);
    if (s1 <= s2 && e2 <= e1) || (s2 <= s1 && e1 <= e2) {
        Linkage::Contain
    } else if s1 <= e2 && s2 <= e1 {
        Linkage::Overlap
    } else if (s2 - e1 - 1).max(s1 - e2 - 1) < t_neighbour as i64 {
        Linkage::Neighbour
    } else {
        Linkage::None
    }
}

fn span(c: &InitialCluster) -> (i64, i64) {
    (i64::from(c.col_start), i64::from(c.col_end))
}

pub fn linkage(c1: &InitialCluster, c2: &InitialCluster, params: &SegParams) -> Linkage {
    span_linkage(span(c1), span(c2), params.t_neighbour)
}

/// Column window `[lo, hi]` of the mutual region that `other` (its columns
/// offset by `shift`) induces on the cluster it is paired with.
fn window(other: &InitialCluster, shift: i64, t_neighbour: usize) -> (i64, i64) {
    let (s, e) = span(other);
    let t = t_neighbour as i64;
    (s + shift - t, e + shift + t)
}

fn in_window(p: &ClusterPoint, (lo, hi): (i64, i64)) -> bool {
    (lo..=hi).contains(&i64::from(p.col))
}

/// n-th smallest distance between the mutual regions of `c1` and `c2`, with
/// `c2`'s columns offset by `shift`. Falls back to the largest pair
/// distance when there are fewer than `n` pairs, and to infinity when there
/// are none.
pub fn mutual_distance(c1: &InitialCluster, c2: &InitialCluster, shift: i64, n: usize, params: &SegParams) -> f64 {
    let w1 = window(c2, shift, params.t_neighbour);
    let w2 = window(c1, -shift, params.t_neighbour);
    let r2: Vec<&ClusterPoint> = c2.points.iter().filter(|p| in_window(p, w2)).collect();
    let mut d: Vec<f64> = c1
        .points
        .iter()
        .filter(|p| in_window(p, w1))
        .flat_map(|a| r2.iter().map(move |b| a.distance_sq(b)))
        .collect();
    if d.is_empty() {
        return f64::INFINITY;
    }
    let k = n.max(1).min(d.len()) - 1;
    let (_, kth, _) = d.select_nth_unstable_by(k, f64::total_cmp);
    kth.sqrt()
}

pub fn cluster_distance(c1: &InitialCluster, c2: &InitialCluster, n: usize, params: &SegParams) -> f64 {
    mutual_distance(c1, c2, 0, n, params)
}

/// `mutual_distance(c1, c2, shift, mutual_n) < t_merge`, decided by counting
/// close pairs with an early exit.
fn should_merge(
    c1: &InitialCluster,
    c2: &InitialCluster,
    shift: i64,
    params: &SegParams,
    scratch: &mut Vec<[f64; 3]>,
) -> bool {
    let t = params.t_merge;
    if c1.bbox.distance(&c2.bbox) >= t {
        return false;
    }
    let w1 = window(c2, shift, params.t_neighbour);
    let w2 = window(c1, -shift, params.t_neighbour);
    scratch.clear();
    scratch.extend(c2.points.iter().filter(|p| in_window(p, w2)).map(ClusterPoint::position));
    if scratch.is_empty() {
        return false;
    }
    scratch.sort_unstable_by(|a, b| a[0].total_cmp(&b[0]));
    let n = params.mutual_n.max(1);
    let t_sq = t * t;
    let mut close = 0usize;
    let mut region1 = 0usize;
    for a in c1.points.iter().filter(|p| in_window(p, w1)) {
        region1 += 1;
        let from = scratch.partition_point(|b| b[0] <= a.x - t);
        for b in scratch[from..].iter().take_while(|b| b[0] < a.x + t) {
            let (dx, dy, dz) = (a.x - b[0], a.y - b[1], a.z - b[2]);
            if dx * dx + dy * dy + dz * dz < t_sq {
                close += 1;
                if close >= n {
                    return true;
                }
            }
        }
    }
    let pairs = region1 * scratch.len();
    pairs > 0 && pairs < n && close == pairs
}

/// Obstacle points of one column already assigned, bottom to top.
#[derive(Debug, Default)]
struct ColumnAssignments {
    col: u32,
    points: Vec<(f64, u32)>,
}

/// Cross-buffer clustering state of one scan.
#[derive(Debug)]
pub struct ClusterBuffer {
    geometry: ScanGeometry,
    /// Cluster slots by initial id; `None` once merged away or emitted.
    clusters: Vec<Option<InitialCluster>>,
    versions: Vec<u32>,
    /// Merge forwarding: every id points toward its surviving cluster.
    parent: Vec<u32>,
    open: Vec<u32>,
    recent: VecDeque<ColumnAssignments>,
    current: ColumnAssignments,
    last_column_seen: Option<u32>,
    rejected: HashMap<(u32, u32), (u32, u32)>,
    scratch: Vec<[f64; 3]>,
    spare: Vec<Vec<(f64, u32)>>,
}

impl ClusterBuffer {
    pub fn new(geometry: ScanGeometry) -> Self {
        Self {
            geometry,
            clusters: Vec::new(),
            versions: Vec::new(),
            parent: Vec::new(),
            open: Vec::new(),
            recent: VecDeque::new(),
            current: ColumnAssignments::default(),
            last_column_seen: None,
            rejected: HashMap::new(),
            scratch: Vec::new(),
            spare: Vec::new(),
        }
    }

    /// Drops all state and starts a new scan.
    pub fn reset(&mut self, geometry: ScanGeometry) {
        self.geometry = geometry;
        self.clusters.clear();
        self.versions.clear();
        self.parent.clear();
        self.open.clear();
        while let Some(c) = self.recent.pop_front() {
            self.recycle(c.points);
        }
        let current = std::mem::take(&mut self.current.points);
        self.recycle(current);
        self.last_column_seen = None;
        self.rejected.clear();
    }

    fn recycle(&mut self, mut v: Vec<(f64, u32)>) {
        v.clear();
        self.spare.push(v);
    }

    pub fn geometry(&self) -> ScanGeometry {
        self.geometry
    }

    pub fn last_column_seen(&self) -> Option<u32> {
        self.last_column_seen
    }

    pub fn open_clusters(&self) -> impl Iterator<Item = &InitialCluster> {
        self.open.iter().filter_map(|&id| self.clusters[id as usize].as_ref())
    }

    pub fn open_count(&self) -> usize {
        self.open.len()
    }

    /// Surviving id of the cluster that `id` was merged into.
    pub fn resolve(&mut self, id: u32) -> u32 {
        let mut root = id;
        while self.parent[root as usize] != root {
            root = self.parent[root as usize];
        }
        let mut cur = id;
        while self.parent[cur as usize] != root {
            let next = self.parent[cur as usize];
            self.parent[cur as usize] = root;
            cur = next;
        }
        root
    }

    fn enter_column(&mut self, col: u32, params: &SegParams) {
        if self.last_column_seen == Some(col) {
            return;
        }
        debug_assert!(self.last_column_seen.is_none_or(|c| c < col), "columns must arrive in order");
        if self.last_column_seen.is_some() {
            let fresh = self.spare.pop().unwrap_or_default();
            let done = ColumnAssignments {
                col: self.current.col,
                points: std::mem::replace(&mut self.current.points, fresh),
            };
            if done.points.is_empty() {
                self.recycle(done.points);
            } else {
                self.recent.push_back(done);
            }
        }
        self.current.col = col;
        let reach = params.search_cols_far.max(params.search_cols_near) as u32;
        while self.recent.front().is_some_and(|c| c.col + reach < col) {
            let old = self.recent.pop_front().expect("checked above");
            self.recycle(old.points);
        }
        self.last_column_seen = Some(col);
    }

    /// Assigns one obstacle point. Points must arrive column by column and
    /// bottom to top within a column. Returns the initial id the point was
    /// linked through; [`resolve`](Self::resolve) gives its current cluster.
    pub fn ccl_step(&mut self, p: &SphericalPoint, params: &SegParams) -> u32 {
        self.enter_column(p.col, params);
        let found = self.search(p, params);
        let id = match found {
            Some(id) => {
                let root = self.resolve(id);
                let slot = self.clusters[root as usize].as_mut().expect("search only reaches open clusters");
                slot.push(ClusterPoint::from(p));
                self.versions[root as usize] += 1;
                id
            }
            None => {
                let id = self.clusters.len() as u32;
                self.clusters.push(Some(InitialCluster::new(id, ClusterPoint::from(p))));
                self.versions.push(0);
                self.parent.push(id);
                self.open.push(id);
                id
            }
        };
        self.current.points.push((p.rho_xy, id));
        id
    }

    fn search(&self, p: &SphericalPoint, params: &SegParams) -> Option<u32> {
        let matches = |&&(rho, _): &&(f64, u32)| (p.rho_xy - rho).abs() < params.t_ccl;
        if let Some(&(_, id)) = self.current.points.iter().rev().find(matches) {
            return Some(id);
        }
        let reach = params.search_cols_for(p.rho_xy) as u32;
        self.recent
            .iter()
            .rev()
            .take_while(|c| c.col + reach >= p.col)
            .find_map(|c| c.points.iter().find(matches).map(|&(_, id)| id))
    }

    /// Runs [`ccl_step`](Self::ccl_step) over the obstacle points of a
    /// column and marks the column as seen even when it has none.
    pub fn ccl_column(&mut self, column: &Column, params: &SegParams) {
        self.enter_column(column.col, params);
        for p in column.points.iter().filter(|p| p.label == GroundLabel::Obstacle) {
            self.ccl_step(p, params);
        }
    }

    fn merge(&mut self, a: u32, b: u32) -> u32 {
        let (keep, gone) = (a.min(b), a.max(b));
        let absorbed = self.clusters[gone as usize].take().expect("merging an open cluster");
        self.clusters[keep as usize].as_mut().expect("merging an open cluster").absorb(absorbed);
        self.versions[keep as usize] += 1;
        self.parent[gone as usize] = keep;
        self.open.retain(|&id| id != gone);
        keep
    }

    fn try_merge(&mut self, a: u32, b: u32, shift: i64, params: &SegParams) -> bool {
        let key = (a.min(b), a.max(b));
        let stamp = (self.versions[key.0 as usize], self.versions[key.1 as usize]);
        if shift == 0 && self.rejected.get(&key) == Some(&stamp) {
            return false;
        }
        let (c1, c2) = match (&self.clusters[a as usize], &self.clusters[b as usize]) {
            (Some(c1), Some(c2)) => (c1, c2),
            _ => return false,
        };
        if should_merge(c1, c2, shift, params, &mut self.scratch) {
            self.merge(a, b);
            true
        } else {
            if shift == 0 {
                self.rejected.insert(key, stamp);
            }
            false
        }
    }

    /// Open ids sorted by span start.
    fn open_by_start(&self) -> Vec<(u32, u32, u32)> {
        let mut order: Vec<(u32, u32, u32)> = self
            .open
            .iter()
            .map(|&id| {
                let c = self.clusters[id as usize].as_ref().expect("open ids are live");
                (c.col_start, c.col_end, id)
            })
            .collect();
        order.sort_unstable();
        order
    }

    /// Merges linked open clusters until no linked pair is closer than
    /// `t_merge`. The fixpoint does not depend on the visiting order.
    pub fn refine(&mut self, params: &SegParams) {
        let t_n = params.t_neighbour as u32;
        'fixpoint: loop {
            let order = self.open_by_start();
            for (i, &(_, e_a, a)) in order.iter().enumerate() {
                for &(_, _, b) in order[i + 1..].iter().take_while(|&&(s_b, _, _)| s_b <= e_a + t_n) {
                    if self.try_merge(a, b, 0, params) {
                        continue 'fixpoint;
                    }
                }
            }
            break;
        }
    }

    fn held_at_seam(&self, c: &InitialCluster, params: &SegParams) -> bool {
        let t_n = params.t_neighbour as u32;
        c.col_start <= self.geometry.span_extra + t_n || c.col_end + t_n >= self.geometry.columns_per_rev
    }

    /// Emits every group of linked open clusters that can no longer change:
    /// all members end more than the closure horizon behind
    /// `current_column`, and none touches the scan seam.
    pub fn close_and_emit(&mut self, current_column: u32, params: &SegParams, out: &mut Vec<InitialCluster>) {
        let horizon = params.closure_horizon() as u32;
        let t_n = params.t_neighbour as u32;
        let order = self.open_by_start();
        let mut closing = Vec::new();
        let mut group = Vec::new();
        let mut group_end = 0u32;
        let mut group_ok = true;
        for (i, &(s, e, id)) in order.iter().enumerate() {
            if i > 0 && s > group_end + t_n {
                if group_ok {
                    closing.append(&mut group);
                }
                group.clear();
                group_ok = true;
            }
            if group.is_empty() {
                group_end = e;
            }
            group_end = group_end.max(e);
            let c = self.clusters[id as usize].as_ref().expect("open ids are live");
            group_ok &= e + horizon < current_column && !self.held_at_seam(c, params);
            group.push(id);
        }
        if group_ok {
            closing.append(&mut group);
        }
        closing.sort_unstable();
        self.emit(&closing, out);
    }

    fn emit(&mut self, ids: &[u32], out: &mut Vec<InitialCluster>) {
        for &id in ids {
            let mut c = self.clusters[id as usize].take().expect("emitting an open cluster");
            c.state = ClusterState::Closed;
            out.push(c);
        }
        self.open.retain(|id| self.clusters[*id as usize].is_some());
    }

    /// Ends the scan: final refinement, a merge pass across the 0°/360° seam
    /// when the scan covers a full revolution, then every open cluster is
    /// emitted in id order.
    pub fn finish_scan(&mut self, scan_firings: Option<u32>, params: &SegParams, out: &mut Vec<InitialCluster>) {
        if params.refinement {
            self.refine(params);
            if scan_firings.is_some_and(|f| f >= self.geometry.columns_per_rev) {
                self.merge_across_seam(params);
            }
        }
        let mut ids = self.open.clone();
        ids.sort_unstable();
        self.emit(&ids, out);
        let geometry = self.geometry;
        self.reset(geometry);
    }

    /// Pairs a cluster near the start of the scan with one near its end,
    /// comparing columns one revolution apart.
    fn merge_across_seam(&mut self, params: &SegParams) {
        let m = i64::from(self.geometry.columns_per_rev);
        'fixpoint: loop {
            let mut ids = self.open.clone();
            ids.sort_unstable();
            let t_n = params.t_neighbour as u32;
            let head: Vec<u32> = ids
                .iter()
                .copied()
                .filter(|&id| self.clusters[id as usize].as_ref().is_some_and(|c| c.col_start <= self.geometry.span_extra + t_n))
                .collect();
            let tail: Vec<u32> = ids
                .iter()
                .copied()
                .filter(|&id| {
                    self.clusters[id as usize].as_ref().is_some_and(|c| c.col_end + t_n >= self.geometry.columns_per_rev)
                })
                .collect();
            for &h in &head {
                for &t in &tail {
                    if h != t && self.try_merge(h, t, -m, params) {
                        continue 'fixpoint;
                    }
                }
            }
            break;
        }
    }
}

/// Clusters a whole scan's columns in one pass, the way a single buffer
/// spanning the scan would be processed.
pub fn cluster_columns(
    columns: &[Column],
    geometry: ScanGeometry,
    scan_firings: Option<u32>,
    params: &SegParams,
) -> Vec<InitialCluster> {
    let mut buffer = ClusterBuffer::new(geometry);
    let mut out = Vec::new();
    for column in columns {
        buffer.ccl_column(column, params);
    }
    buffer.finish_scan(scan_firings, params, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const GEOMETRY: ScanGeometry = ScanGeometry { columns_per_rev: 1800, span_extra: 42 };

    fn cp(x: f64, y: f64, z: f64, col: u32) -> ClusterPoint {
        ClusterPoint { x, y, z, row: 0, col }
    }

    fn obstacle(rho_xy: f64, z: f64, row: u16, col: u32) -> SphericalPoint {
        let theta = f64::from(col) * 0.2;
        let rho = rho_xy.hypot(z);
        let mut p = SphericalPoint::new(rho, z.atan2(rho_xy).to_degrees(), theta, row, col);
        p.label = GroundLabel::Obstacle;
        p
    }

    fn params() -> SegParams {
        SegParams::default()
    }

    fn spanned(s: u32, e: u32) -> InitialCluster {
        InitialCluster::from_points(0, &[cp(0.0, 0.0, 0.0, s), cp(0.0, 0.0, 0.0, e)])
    }

    #[test]
    fn linkage_examples() {
        let p = params();
        assert_eq!(linkage(&spanned(10, 50), &spanned(20, 30), &p), Linkage::Contain);
        assert_eq!(linkage(&spanned(20, 30), &spanned(10, 50), &p), Linkage::Contain);
        assert_eq!(linkage(&spanned(10, 30), &spanned(25, 40), &p), Linkage::Overlap);
        assert_eq!(linkage(&spanned(10, 20), &spanned(24, 30), &p), Linkage::Neighbour);
        assert_eq!(linkage(&spanned(24, 30), &spanned(10, 20), &p), Linkage::Neighbour);
        // gap of 5 whole columns (21..=25) is not below t_neighbour
        assert_eq!(linkage(&spanned(10, 20), &spanned(26, 30), &p), Linkage::None);
        assert_eq!(linkage(&spanned(10, 20), &spanned(25, 30), &p), Linkage::Neighbour);
    }

    #[test]
    fn distance_examples() {
        let p = params();
        let a = InitialCluster::new(0, cp(0.0, 0.0, 0.0, 5));
        let b = InitialCluster::new(1, cp(0.0, 0.5, 0.0, 6));
        assert!((cluster_distance(&a, &b, 1, &p) - 0.5).abs() < 1e-12);
        // pairs {0.1, 0.2, 0.3, 0.4}: one point facing four
        let c = InitialCluster::from_points(
            2,
            &[cp(0.1, 0.0, 0.0, 6), cp(0.0, 0.2, 0.0, 6), cp(0.0, 0.0, 0.3, 6), cp(-0.4, 0.0, 0.0, 6)],
        );
        assert!((cluster_distance(&a, &c, 3, &p) - 0.3).abs() < 1e-12);
        // fewer pairs than the rank: the largest
        assert!((cluster_distance(&a, &b, 3, &p) - 0.5).abs() < 1e-12);
        // far apart in columns: no mutual region
        let far = InitialCluster::new(3, cp(0.0, 0.1, 0.0, 500));
        assert_eq!(cluster_distance(&a, &far, 3, &p), f64::INFINITY);
    }

    #[test]
    fn first_point_gets_id_zero() {
        let mut cb = ClusterBuffer::new(GEOMETRY);
        assert_eq!(cb.ccl_step(&obstacle(10.0, 0.0, 3, 100), &params()), 0);
    }

    #[test]
    fn adjacent_wall_points_join() {
        let mut cb = ClusterBuffer::new(GEOMETRY);
        let p = params();
        let a = cb.ccl_step(&obstacle(10.0, 0.0, 3, 100), &p);
        let b = cb.ccl_step(&obstacle(10.3, 0.0, 3, 101), &p);
        assert_eq!(a, b);
        // 1.0 is not below t_ccl
        let c = cb.ccl_step(&obstacle(11.3, 0.0, 3, 102), &p);
        assert_ne!(c, a);
    }

    #[test]
    fn search_region_depends_on_range() {
        let p = params();
        for (rho, gap, joins) in [(25.0, 10, true), (25.0, 11, false), (15.0, 5, true), (15.0, 6, false)] {
            let mut cb = ClusterBuffer::new(GEOMETRY);
            let a = cb.ccl_step(&obstacle(rho, 0.0, 3, 100), &p);
            let b = cb.ccl_step(&obstacle(rho + 0.1, 0.0, 3, 100 + gap), &p);
            assert_eq!(a == b, joins, "rho {rho} gap {gap}");
        }
    }

    #[test]
    fn own_column_nearest_below_first() {
        let mut cb = ClusterBuffer::new(GEOMETRY);
        let p = params();
        let a = cb.ccl_step(&obstacle(10.0, -1.0, 0, 100), &p);
        let b = cb.ccl_step(&obstacle(30.0, -1.0, 1, 100), &p);
        let c = cb.ccl_step(&obstacle(10.5, 0.0, 2, 100), &p);
        assert_ne!(a, b);
        assert_eq!(c, a);
        let d = cb.ccl_step(&obstacle(30.2, 0.0, 3, 100), &p);
        assert_eq!(d, b);
    }

    #[test]
    fn fragments_merge_and_keep_smaller_id() {
        let p = params();
        let mut cb = ClusterBuffer::new(GEOMETRY);
        // two stacks 0.3 m apart vertically in the same columns, but with a
        // range jump above t_ccl so CCL keeps them apart
        for col in 100..104 {
            cb.ccl_step(&obstacle(10.0, -1.0, 0, col), &p);
            cb.ccl_step(&obstacle(10.0, -0.9, 1, col), &p);
        }
        assert_eq!(cb.open_count(), 1);
        // CCL links the second column's low point to the first cluster and
        // the upper stack starts its own, though they are ~0.7 m apart:
        //   (11.6, -0.4) vs (10.9, -0.6) -> sqrt(0.7² + 0.2²) ≈ 0.73 < 0.8
        let mut cb = ClusterBuffer::new(GEOMETRY);
        cb.ccl_step(&obstacle(10.0, -1.0, 0, 100), &p);
        cb.ccl_step(&obstacle(11.5, -0.5, 1, 100), &p);
        cb.ccl_step(&obstacle(11.6, -0.4, 2, 100), &p);
        cb.ccl_step(&obstacle(10.9, -0.6, 0, 101), &p);
        cb.ccl_step(&obstacle(10.9, -0.6, 0, 102), &p);
        assert_eq!(cb.open_count(), 2);
        cb.refine(&p);
        assert_eq!(cb.open_count(), 1);
        assert_eq!(cb.open_clusters().next().unwrap().id, 0);
        assert_eq!(cb.resolve(1), 0);
    }

    #[test]
    fn distant_clusters_do_not_merge() {
        let p = params();
        let mut cb = ClusterBuffer::new(GEOMETRY);
        for col in 100..104 {
            cb.ccl_step(&obstacle(10.0, -1.0, 0, col), &p);
            cb.ccl_step(&obstacle(12.0, -1.0, 1, col), &p);
        }
        assert_eq!(cb.open_count(), 2);
        cb.refine(&p);
        assert_eq!(cb.open_count(), 2);
    }

    #[test]
    fn closure_waits_for_horizon() {
        let p = params();
        let mut cb = ClusterBuffer::new(GEOMETRY);
        for row in 0..3 {
            cb.ccl_step(&obstacle(10.0, -1.0 + 0.2 * f64::from(row), row, 100), &p);
        }
        let mut out = Vec::new();
        cb.close_and_emit(110, &p, &mut out);
        assert!(out.is_empty());
        cb.close_and_emit(111, &p, &mut out);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].state, ClusterState::Closed);
        assert_eq!(out[0].len(), 3);
        assert_eq!(cb.open_count(), 0);
    }

    #[test]
    fn linked_group_closes_together() {
        let p = params();
        let mut cb = ClusterBuffer::new(GEOMETRY);
        cb.ccl_step(&obstacle(10.0, 0.0, 0, 100), &p);
        // linked neighbour 3 columns later, too far to merge, still growing
        cb.ccl_step(&obstacle(40.0, 0.0, 0, 104), &p);
        for col in 105..=200 {
            cb.ccl_step(&obstacle(40.0, 0.0, 0, col), &p);
        }
        let mut out = Vec::new();
        cb.close_and_emit(200, &p, &mut out);
        assert!(out.is_empty());
        cb.close_and_emit(211, &p, &mut out);
        assert_eq!(out.iter().map(|c| c.id).collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn seam_clusters_are_held_and_joined() {
        let p = params();
        let mut cb = ClusterBuffer::new(GEOMETRY);
        let mut out = Vec::new();
        // a box at azimuth ~0 seen at the start and the end of the scan
        for col in 20..30 {
            cb.ccl_step(&obstacle(10.0, -1.0, 4, col), &p);
        }
        cb.close_and_emit(500, &p, &mut out);
        assert!(out.is_empty(), "head cluster must wait for the seam");
        for col in 1810..1820 {
            cb.ccl_step(&obstacle(10.0, -1.0, 4, col), &p);
        }
        cb.finish_scan(Some(1800), &p, &mut out);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].len(), 20);

        // a partial revolution never joins across the seam
        let mut cb = ClusterBuffer::new(GEOMETRY);
        let mut out = Vec::new();
        for col in (20..30).chain(1810..1820) {
            cb.ccl_step(&obstacle(10.0, -1.0, 4, col), &p);
        }
        cb.finish_scan(Some(1700), &p, &mut out);
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn refinement_switch() {
        let p = SegParams { refinement: false, ..params() };
        let mut cols = Vec::new();
        cols.push(Column {
            col: 100,
            azimuth: 20.0,
            points: vec![obstacle(10.0, -1.0, 0, 100), obstacle(11.5, -0.5, 1, 100), obstacle(11.6, -0.4, 2, 100)],
        });
        for col in 101..103 {
            cols.push(Column { col, azimuth: 0.0, points: vec![obstacle(10.9, -0.6, 0, col)] });
        }
        assert_eq!(cluster_columns(&cols, GEOMETRY, None, &p).len(), 2);
        assert_eq!(cluster_columns(&cols, GEOMETRY, None, &params()).len(), 1);
    }

    fn arb_cluster(id: u32) -> impl Strategy<Value = InitialCluster> {
        proptest::collection::vec((-2.0f64..2.0, -2.0f64..2.0, -1.0f64..1.0, 0u32..30), 1..12)
            .prop_map(move |pts| {
                let pts: Vec<ClusterPoint> = pts.into_iter().map(|(x, y, z, col)| cp(x, y, z, col)).collect();
                InitialCluster::from_points(id, &pts)
            })
    }

    proptest! {
        #[test]
        fn distance_is_symmetric(a in arb_cluster(0), b in arb_cluster(1), n in 1usize..5) {
            let p = params();
            prop_assert_eq!(cluster_distance(&a, &b, n, &p), cluster_distance(&b, &a, n, &p));
        }

        #[test]
        fn merge_test_matches_distance(a in arb_cluster(0), b in arb_cluster(1), n in 1usize..5, t in 0.1f64..2.0) {
            let p = SegParams { mutual_n: n, t_merge: t, ..params() };
            let mut scratch = Vec::new();
            let fast = should_merge(&a, &b, 0, &p, &mut scratch);
            prop_assert_eq!(fast, cluster_distance(&a, &b, n, &p) < t);
        }

        #[test]
        fn refine_is_idempotent(
            pts in proptest::collection::vec((5.0f64..15.0, -1.5f64..0.5, 0u32..60), 1..80)
        ) {
            let p = params();
            let mut pts = pts;
            pts.sort_by_key(|&(_, _, col)| col);
            let mut cb = ClusterBuffer::new(GEOMETRY);
            for (i, &(rho, z, col)) in pts.iter().enumerate() {
                cb.ccl_step(&obstacle(rho, z, i as u16, col), &p);
            }
            cb.refine(&p);
            let before: Vec<InitialCluster> = cb.open_clusters().cloned().collect();
            cb.refine(&p);
            let after: Vec<InitialCluster> = cb.open_clusters().cloned().collect();
            prop_assert_eq!(before, after);
        }
    }
}
