//! Per-buffer orchestration: ground segmentation, clustering, cluster
//! buffer lifecycle and timing.
//!
//! [`Pipeline::process_buffer`] runs both stages on one packet buffer and
//! returns the clusters it could close. A scan's [`ScanResult`] is complete
//! once its last buffer has been processed. [`run_batch`] feeds a whole
//! scan as a single buffer and serves as the reference for streaming runs.

use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, TrySendError};
use serde::Serialize;

use crate::cluster::{ClusterBuffer, InitialCluster};
use crate::geometry::{GroundLabel, SphericalPoint};
use crate::ground::GroundSegmenter;
use crate::packet::{decode_packet, AssembleError, Assembler, PacketBuffer, ScanGeometry};
use crate::params::SegParams;

/// CPU time consumed by the calling thread.
pub fn thread_cpu_time() -> Duration {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    // SAFETY: `ts` is a valid, writable timespec for the duration of the call.
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) };
    if rc != 0 {
        return Duration::ZERO;
    }
    Duration::new(ts.tv_sec as u64, ts.tv_nsec as u32)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanResult {
    pub scan_id: u32,
    /// Clusters with at least `min_cluster_points` points, by id.
    pub clusters: Vec<InitialCluster>,
    /// Smaller obstacle groups, by id.
    pub noise: Vec<InitialCluster>,
    pub ground_points: usize,
    pub obstacle_points: usize,
    pub noise_points: usize,
    pub invalid_points: usize,
    /// Every slot of the scan with its final label, when requested.
    #[serde(skip)]
    pub points: Option<Vec<SphericalPoint>>,
}

impl ScanResult {
    fn new(scan_id: u32, keep_points: bool) -> Self {
        Self {
            scan_id,
            clusters: Vec::new(),
            noise: Vec::new(),
            ground_points: 0,
            obstacle_points: 0,
            noise_points: 0,
            invalid_points: 0,
            points: keep_points.then(Vec::new),
        }
    }

    pub fn total_points(&self) -> usize {
        self.ground_points + self.obstacle_points + self.noise_points + self.invalid_points
    }

    /// Cluster memberships as sorted `(col, row)` lists, clusters ordered
    /// by their first point. Independent of ids.
    pub fn partition(&self) -> Vec<Vec<(u32, u16)>> {
        let mut parts: Vec<Vec<(u32, u16)>> = self
            .clusters
            .iter()
            .chain(&self.noise)
            .map(|c| {
                let mut v: Vec<(u32, u16)> = c.points.iter().map(|p| (p.col, p.row)).collect();
                v.sort_unstable();
                v
            })
            .collect();
        parts.sort_unstable();
        parts
    }
}

/// Stage timings of one processed buffer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BufferTiming {
    pub scan_id: u32,
    pub buffer_seq: u64,
    pub columns: usize,
    pub last_in_scan: bool,
    pub ground_cpu: Duration,
    pub cluster_cpu: Duration,
    pub wall: Duration,
}

impl BufferTiming {
    pub fn cpu(&self) -> Duration {
        self.ground_cpu + self.cluster_cpu
    }
}

#[derive(Debug)]
pub struct BufferOutcome {
    pub timing: BufferTiming,
    /// Ids of the clusters (noise excluded) closed by this buffer.
    pub emitted: Vec<u32>,
    /// Results of the scans this buffer completed, oldest first.
    pub completed: Vec<ScanResult>,
}

struct ScanState {
    result: ScanResult,
}

pub struct Pipeline {
    params: SegParams,
    ground: GroundSegmenter,
    clusters: ClusterBuffer,
    scan: Option<ScanState>,
    keep_points: bool,
    emitted: Vec<InitialCluster>,
}

impl Pipeline {
    pub fn new(params: SegParams) -> Self {
        Self {
            params,
            ground: GroundSegmenter::new(),
            clusters: ClusterBuffer::new(ScanGeometry { columns_per_rev: 1800, span_extra: 0 }),
            scan: None,
            keep_points: false,
            emitted: Vec::new(),
        }
    }

    /// Keep every labeled slot in the scan results.
    pub fn keep_points(mut self, keep: bool) -> Self {
        self.keep_points = keep;
        self
    }

    pub fn params(&self) -> &SegParams {
        &self.params
    }

    pub fn process_buffer(&mut self, mut buffer: PacketBuffer) -> BufferOutcome {
        let wall_start = Instant::now();
        let mut completed = Vec::new();
        if self.scan.as_ref().is_some_and(|s| s.result.scan_id != buffer.scan_id) {
            completed.extend(self.finish_scan(None));
        }
        if self.scan.is_none() {
            self.clusters.reset(buffer.geometry);
            self.scan = Some(ScanState { result: ScanResult::new(buffer.scan_id, self.keep_points) });
        }

        let cpu_start = thread_cpu_time();
        self.ground.segment(&mut buffer.columns, &self.params);
        let cpu_ground = thread_cpu_time();

        self.emitted.clear();
        for column in &buffer.columns {
            self.clusters.ccl_column(column, &self.params);
        }
        if self.params.refinement {
            self.clusters.refine(&self.params);
        }
        if let Some(last) = buffer.last_col() {
            self.clusters.close_and_emit(last, &self.params, &mut self.emitted);
        }
        if buffer.last_in_scan {
            self.clusters.finish_scan(buffer.scan_firings, &self.params, &mut self.emitted);
        }
        let cpu_cluster = thread_cpu_time();

        let emitted = self.collect_emitted();
        let columns = buffer.columns.len();
        let state = self.scan.as_mut().expect("scan started above");
        for p in buffer.points() {
            match p.label {
                GroundLabel::Ground => state.result.ground_points += 1,
                GroundLabel::Invalid => state.result.invalid_points += 1,
                _ => {}
            }
        }
        if let Some(points) = state.result.points.as_mut() {
            points.extend(buffer.columns.into_iter().flat_map(|c| c.points));
        }
        if buffer.last_in_scan {
            completed.extend(self.finish_scan(None));
        }
        BufferOutcome {
            timing: BufferTiming {
                scan_id: buffer.scan_id,
                buffer_seq: buffer.buffer_seq,
                columns,
                last_in_scan: buffer.last_in_scan,
                ground_cpu: cpu_ground.saturating_sub(cpu_start),
                cluster_cpu: cpu_cluster.saturating_sub(cpu_ground),
                wall: wall_start.elapsed(),
            },
            emitted,
            completed,
        }
    }

    fn collect_emitted(&mut self) -> Vec<u32> {
        let state = self.scan.as_mut().expect("emitting inside a scan");
        let mut ids = Vec::new();
        for mut c in self.emitted.drain(..) {
            c.sort_points();
            if c.len() >= self.params.min_cluster_points {
                state.result.obstacle_points += c.len();
                ids.push(c.id);
                state.result.clusters.push(c);
            } else {
                state.result.noise_points += c.len();
                state.result.noise.push(c);
            }
        }
        ids
    }

    /// Closes the scan in progress, flushing its open clusters.
    fn finish_scan(&mut self, scan_firings: Option<u32>) -> Option<ScanResult> {
        self.scan.as_ref()?;
        self.emitted.clear();
        self.clusters.finish_scan(scan_firings, &self.params, &mut self.emitted);
        self.collect_emitted();
        let mut result = self.scan.take().expect("checked above").result;
        result.clusters.sort_by_key(|c| c.id);
        result.noise.sort_by_key(|c| c.id);
        Some(result)
    }

    /// Ends the stream; returns the result of a scan left without its last
    /// buffer.
    pub fn finish(&mut self) -> Option<ScanResult> {
        self.finish_scan(None)
    }
}

/// Processes one complete scan as a single buffer.
pub fn run_batch(buffers: &[PacketBuffer], params: &SegParams, keep_points: bool) -> Option<ScanResult> {
    let mut whole = PacketBuffer::concat(buffers)?;
    whole.last_in_scan = true;
    let mut pipeline = Pipeline::new(params.clone()).keep_points(keep_points);
    let mut outcome = pipeline.process_buffer(whole);
    outcome.completed.pop()
}

/// Streams buffers through a fresh pipeline and collects the scan results.
pub fn run_stream(buffers: impl IntoIterator<Item = PacketBuffer>, params: &SegParams, keep_points: bool) -> Vec<ScanResult> {
    let mut pipeline = Pipeline::new(params.clone()).keep_points(keep_points);
    let mut results = Vec::new();
    for b in buffers {
        results.extend(pipeline.process_buffer(b).completed);
    }
    results.extend(pipeline.finish());
    results
}

/// Groups buffers by scan, preserving order.
pub fn split_scans(buffers: Vec<PacketBuffer>) -> Vec<Vec<PacketBuffer>> {
    let mut scans: Vec<Vec<PacketBuffer>> = Vec::new();
    for b in buffers {
        match scans.last_mut() {
            Some(scan) if scan[0].scan_id == b.scan_id => scan.push(b),
            _ => scans.push(vec![b]),
        }
    }
    scans
}

/// Summary statistics of a sample, microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Stats {
    pub count: usize,
    pub mean: f64,
    pub p50: f64,
    pub p99: f64,
    pub max: f64,
}

impl Stats {
    pub fn from_micros(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let rank = |q: f64| sorted[((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1];
        Self {
            count: sorted.len(),
            mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
            p50: rank(0.50),
            p99: rank(0.99),
            max: sorted[sorted.len() - 1],
        }
    }
}

/// Per-scan timing row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScanTiming {
    pub scan_id: u32,
    pub repetition: usize,
    pub buffers: usize,
    pub ground_us: f64,
    pub cluster_us: f64,
    pub total_cpu_us: f64,
    pub wall_us: f64,
    /// Wall time from handing in the scan's last buffer until its result.
    pub completion_lag_us: f64,
}

/// Published per-scan reference timings, microseconds: ground, clustering,
/// total.
pub const REFERENCE_US: (f64, f64, f64) = (98.0, 167.0, 265.0);

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct LatencyReport {
    pub per_buffer_ground: Stats,
    pub per_buffer_cluster: Stats,
    pub per_buffer_total: Stats,
    pub per_scan_ground: Stats,
    pub per_scan_cluster: Stats,
    pub per_scan_total_cpu: Stats,
    pub completion_lag: Stats,
    pub scans: Vec<ScanTiming>,
}

fn micros(d: Duration) -> f64 {
    d.as_secs_f64() * 1e6
}

impl LatencyReport {
    pub fn from_timings(buffers: &[BufferTiming], scans: Vec<ScanTiming>) -> Self {
        let per = |f: &dyn Fn(&BufferTiming) -> Duration| -> Stats {
            Stats::from_micros(&buffers.iter().map(|b| micros(f(b))).collect::<Vec<_>>())
        };
        let col = |f: &dyn Fn(&ScanTiming) -> f64| Stats::from_micros(&scans.iter().map(f).collect::<Vec<_>>());
        Self {
            per_buffer_ground: per(&|b| b.ground_cpu),
            per_buffer_cluster: per(&|b| b.cluster_cpu),
            per_buffer_total: per(&|b| b.cpu()),
            per_scan_ground: col(&|s| s.ground_us),
            per_scan_cluster: col(&|s| s.cluster_us),
            per_scan_total_cpu: col(&|s| s.total_cpu_us),
            completion_lag: col(&|s| s.completion_lag_us),
            scans,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("scan_id,repetition,buffers,ground_us,cluster_us,total_cpu_us,wall_us,completion_lag_us\n");
        for s in &self.scans {
            out.push_str(&format!(
                "{},{},{},{:.3},{:.3},{:.3},{:.3},{:.3}\n",
                s.scan_id, s.repetition, s.buffers, s.ground_us, s.cluster_us, s.total_cpu_us, s.wall_us, s.completion_lag_us
            ));
        }
        out
    }

    pub fn summary(&self) -> String {
        let row = |name: &str, s: &Stats| {
            format!("{name:<22} {:>8} {:>10.1} {:>10.1} {:>10.1} {:>10.1}\n", s.count, s.mean, s.p50, s.p99, s.max)
        };
        let mut out = format!("{:<22} {:>8} {:>10} {:>10} {:>10} {:>10}\n", "stage (us)", "n", "mean", "p50", "p99", "max");
        out += &row("buffer ground", &self.per_buffer_ground);
        out += &row("buffer cluster", &self.per_buffer_cluster);
        out += &row("buffer total", &self.per_buffer_total);
        out += &row("scan ground", &self.per_scan_ground);
        out += &row("scan cluster", &self.per_scan_cluster);
        out += &row("scan total cpu", &self.per_scan_total_cpu);
        out += &row("completion lag", &self.completion_lag);
        let (g, c, t) = REFERENCE_US;
        out += &format!("reference scan (i7-7820): ground {g:.0} us, cluster {c:.0} us, total {t:.0} us\n");
        out
    }
}

/// Runs every scan `repetitions` times through a streaming pipeline and
/// reports stage timings. Buffers are cloned before each run so the clone
/// cost is not measured.
pub fn measure_latency(scans: &[Vec<PacketBuffer>], params: &SegParams, repetitions: usize) -> LatencyReport {
    let mut buffer_timings = Vec::new();
    let mut scan_timings = Vec::new();
    let mut pipeline = Pipeline::new(params.clone());
    for repetition in 0..repetitions {
        for scan in scans {
            let mut timing = ScanTiming {
                scan_id: scan.first().map_or(0, |b| b.scan_id),
                repetition,
                buffers: scan.len(),
                ground_us: 0.0,
                cluster_us: 0.0,
                total_cpu_us: 0.0,
                wall_us: 0.0,
                completion_lag_us: 0.0,
            };
            let copies: Vec<PacketBuffer> = scan.to_vec();
            let last = copies.len().saturating_sub(1);
            for (i, b) in copies.into_iter().enumerate() {
                let started = Instant::now();
                let outcome = pipeline.process_buffer(b);
                let t = outcome.timing;
                timing.ground_us += micros(t.ground_cpu);
                timing.cluster_us += micros(t.cluster_cpu);
                timing.wall_us += micros(t.wall);
                if i == last {
                    timing.completion_lag_us = micros(started.elapsed());
                }
                buffer_timings.push(t);
            }
            let _ = pipeline.finish();
            timing.total_cpu_us = timing.ground_us + timing.cluster_us;
            scan_timings.push(timing);
        }
    }
    LatencyReport::from_timings(&buffer_timings, scan_timings)
}

/// Counters of a threaded packet run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct StreamStats {
    pub packets: u64,
    pub decode_errors: u64,
    pub assemble_errors: u64,
    pub dropped_buffers: u64,
    pub buffers: u64,
    pub scans: u64,
}

impl StreamStats {
    pub fn decode_error_rate(&self) -> f64 {
        if self.packets == 0 {
            0.0
        } else {
            self.decode_errors as f64 / self.packets as f64
        }
    }
}

/// Capacity of the queue between the decoding and processing stages.
pub const QUEUE_CAPACITY: usize = 64;

/// Two-stage run: a decoder thread turns packet payloads into buffers and
/// the calling thread processes them in order. With `drop_oldest` (live
/// capture) a full queue discards its oldest buffer instead of blocking the
/// decoder.
pub fn run_packets<I, F>(
    packets: I,
    mut assembler: Assembler,
    params: &SegParams,
    keep_points: bool,
    drop_oldest: bool,
    mut on_scan: F,
) -> StreamStats
where
    I: IntoIterator<Item = Vec<u8>> + Send,
    I::IntoIter: Send,
    F: FnMut(ScanResult, &BufferTiming),
{
    let (tx, rx) = bounded::<PacketBuffer>(QUEUE_CAPACITY);
    let mut pipeline = Pipeline::new(params.clone()).keep_points(keep_points);
    std::thread::scope(|scope| {
        let drain = rx.clone();
        let producer = scope.spawn(move || {
            let mut stats = StreamStats::default();
            let mut out = Vec::new();
            let send = |b: PacketBuffer, stats: &mut StreamStats| {
                let mut item = b;
                loop {
                    if !drop_oldest {
                        return tx.send(item).is_ok();
                    }
                    match tx.try_send(item) {
                        Ok(()) => return true,
                        Err(TrySendError::Full(back)) => {
                            if drain.try_recv().is_ok() {
                                stats.dropped_buffers += 1;
                            }
                            item = back;
                        }
                        Err(TrySendError::Disconnected(_)) => return false,
                    }
                }
            };
            for bytes in packets {
                stats.packets += 1;
                let packet = match decode_packet(&bytes) {
                    Ok(p) => p,
                    Err(e) => {
                        stats.decode_errors += 1;
                        tracing::debug!("packet {}: {e}", stats.packets);
                        continue;
                    }
                };
                if let Err(e @ AssembleError::OutOfOrderPacket { .. }) = assembler.push_packet(&packet, &mut out) {
                    stats.assemble_errors += 1;
                    tracing::warn!("{e}");
                }
                for b in out.drain(..) {
                    if !send(b, &mut stats) {
                        return stats;
                    }
                }
            }
            assembler.finish(&mut out);
            for b in out.drain(..) {
                if !send(b, &mut stats) {
                    break;
                }
            }
            stats
        });
        let mut buffers = 0u64;
        let mut scans = 0u64;
        let mut last_timing = None;
        for b in rx.iter() {
            buffers += 1;
            let outcome = pipeline.process_buffer(b);
            for r in outcome.completed {
                scans += 1;
                on_scan(r, &outcome.timing);
            }
            last_timing = Some(outcome.timing);
        }
        if let Some(r) = pipeline.finish() {
            scans += 1;
            let timing = last_timing.unwrap_or(BufferTiming {
                scan_id: r.scan_id,
                buffer_seq: 0,
                columns: 0,
                last_in_scan: true,
                ground_cpu: Duration::ZERO,
                cluster_cpu: Duration::ZERO,
                wall: Duration::ZERO,
            });
            on_scan(r, &timing);
        }
        let mut stats = producer.join().expect("decoder thread panicked");
        stats.buffers = buffers;
        stats.scans = scans;
        stats
    })
}
