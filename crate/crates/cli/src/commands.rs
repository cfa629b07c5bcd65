use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::{Arc, Mutex};

use anyhow::{bail, Context};
use serde_json::json;
use streamseg::eval::{evaluate_corpus, MatchConfig};
use streamseg::io::{write_pcap, write_raw};
use streamseg::output::{cluster_records, write_ndjson, write_ply};
use streamseg::packet::{assemble_buffers, decode_packet, Assembler, AssemblerConfig, DataPacket, PacketBuffer};
use streamseg::pipeline::{measure_latency, run_batch, run_packets, split_scans, ScanResult, StreamStats};
use streamseg::synth::{bundled_corpus, random_scene, raycast_scan, scene_to_packets, RandomSceneConfig, SceneSpec};

use crate::config::{Format, Input, Mode, RunConfig};
use crate::source::{self, resolve_scene, Guarded};
use crate::{CaptureFormat, GateFailure, Usage};

/// Share of undecodable packets above which a run fails.
const MAX_DECODE_ERROR_RATE: f64 = 0.01;

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn assembler_config(config: &RunConfig) -> AssemblerConfig {
    AssemblerConfig { buffer_packets: config.params.buffer_packets, ..AssemblerConfig::default() }
}

/// Writes scan results as they complete.
struct Sink {
    dir: Option<PathBuf>,
    formats: HashSet<Format>,
    points: bool,
    ndjson: Option<BufWriter<File>>,
    csv: Option<BufWriter<File>>,
    scans: usize,
    clusters: usize,
    totals: [usize; 4],
    error: Option<anyhow::Error>,
}

impl Sink {
    fn new(config: &RunConfig) -> anyhow::Result<Self> {
        let formats: HashSet<Format> = config.output.formats.iter().copied().collect();
        let mut sink = Self {
            dir: config.output.dir.clone(),
            formats,
            points: config.output.points,
            ndjson: None,
            csv: None,
            scans: 0,
            clusters: 0,
            totals: [0; 4],
            error: None,
        };
        if let Some(dir) = &sink.dir {
            create_dir(dir)?;
            if sink.formats.contains(&Format::Ndjson) {
                sink.ndjson = Some(create(&dir.join("clusters.ndjson"))?);
            }
            if sink.formats.contains(&Format::Csv) {
                let mut csv = create(&dir.join("scans.csv"))?;
                writeln!(csv, "scan_id,clusters,noise_groups,ground_points,obstacle_points,noise_points,invalid_points")?;
                sink.csv = Some(csv);
            }
        }
        Ok(sink)
    }

    fn wants_points(&self) -> bool {
        self.dir.is_some() && self.formats.contains(&Format::Ply)
    }

    fn accept(&mut self, result: ScanResult) {
        if self.error.is_none() {
            if let Err(e) = self.write(&result) {
                self.error = Some(e);
            }
        }
        self.scans += 1;
        self.clusters += result.clusters.len();
        for (t, v) in self.totals.iter_mut().zip([
            result.ground_points,
            result.obstacle_points,
            result.noise_points,
            result.invalid_points,
        ]) {
            *t += v;
        }
    }

    fn write(&mut self, r: &ScanResult) -> anyhow::Result<()> {
        if let Some(out) = &mut self.ndjson {
            write_ndjson(&mut *out, &cluster_records(r, self.points))?;
        }
        if let Some(out) = &mut self.csv {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.scan_id,
                r.clusters.len(),
                r.noise.len(),
                r.ground_points,
                r.obstacle_points,
                r.noise_points,
                r.invalid_points
            )?;
        }
        if let (true, Some(dir)) = (self.formats.contains(&Format::Ply), &self.dir) {
            let path = dir.join(format!("scan_{:06}.ply", r.scan_id));
            let mut out = create(&path)?;
            write_ply(&mut out, r)?;
            out.flush()?;
        }
        Ok(())
    }

    fn finish(mut self) -> anyhow::Result<String> {
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        for out in [&mut self.ndjson, &mut self.csv].into_iter().flatten() {
            out.flush()?;
        }
        let [g, o, n, i] = self.totals;
        Ok(format!(
            "scans {}, clusters {}, points: ground {g}, obstacle {o}, noise {n}, invalid {i}",
            self.scans, self.clusters
        ))
    }
}

fn decode_all(payloads: &[Vec<u8>], stats: &mut StreamStats) -> Vec<DataPacket> {
    stats.packets = payloads.len() as u64;
    payloads
        .iter()
        .enumerate()
        .filter_map(|(k, bytes)| match decode_packet(bytes) {
            Ok(p) => Some(p),
            Err(e) => {
                stats.decode_errors += 1;
                tracing::debug!("packet {}: {e}", k + 1);
                None
            }
        })
        .collect()
}

fn check_stats(stats: &StreamStats) -> anyhow::Result<()> {
    if stats.decode_error_rate() > MAX_DECODE_ERROR_RATE {
        bail!(
            "{} of {} packets failed to decode ({:.1}%, limit {:.0}%)",
            stats.decode_errors,
            stats.packets,
            100.0 * stats.decode_error_rate(),
            100.0 * MAX_DECODE_ERROR_RATE
        );
    }
    Ok(())
}

fn stats_line(stats: &StreamStats) -> String {
    format!(
        "packets {}, decode errors {}, assembly errors {}, dropped buffers {}",
        stats.packets, stats.decode_errors, stats.assemble_errors, stats.dropped_buffers
    )
}

/// Reads a whole offline input, stopping early on interrupt.
fn collect_offline(config: &RunConfig, stop: &Arc<AtomicBool>) -> anyhow::Result<(source::Source, Vec<Vec<u8>>)> {
    let mut src = source::open(config, stop)?;
    if src.live {
        return Err(Usage("this command needs an offline input (scene, pcap or raw)".into()).into());
    }
    let error = Arc::new(Mutex::new(None));
    let packets = std::mem::replace(&mut src.packets, Box::new(std::iter::empty()));
    let payloads: Vec<Vec<u8>> = Guarded { inner: packets, stop: stop.clone(), error: error.clone() }.collect();
    if let Some(e) = error.lock().expect("error slot").take() {
        return Err(e).context("reading input");
    }
    Ok((src, payloads))
}

fn batch_buffers(config: &RunConfig, src: &source::Source, payloads: &[Vec<u8>]) -> anyhow::Result<(Vec<PacketBuffer>, StreamStats)> {
    let mut stats = StreamStats::default();
    let packets = decode_all(payloads, &mut stats);
    check_stats(&stats)?;
    let (buffers, errors) = assemble_buffers(&packets, &src.calib, assembler_config(config))?;
    for e in &errors {
        tracing::warn!("{e}");
    }
    stats.assemble_errors = errors.len() as u64;
    stats.buffers = buffers.len() as u64;
    Ok((buffers, stats))
}

pub fn run(config: &RunConfig, stop: &Arc<AtomicBool>) -> anyhow::Result<()> {
    let mut sink = Sink::new(config)?;
    let keep = sink.wants_points();
    let stats = match config.mode {
        Mode::Stream => {
            let src = source::open(config, stop)?;
            let assembler = Assembler::new(src.calib.clone(), assembler_config(config))?;
            let error = Arc::new(Mutex::new(None));
            let packets = Guarded { inner: src.packets, stop: stop.clone(), error: error.clone() };
            let stats = run_packets(packets, assembler, &config.params, keep, src.live, |r, _| sink.accept(r));
            if let Some(e) = error.lock().expect("error slot").take() {
                return Err(e).context("reading input");
            }
            stats
        }
        Mode::Batch => {
            let (src, payloads) = collect_offline(config, stop)?;
            let (buffers, mut stats) = batch_buffers(config, &src, &payloads)?;
            for scan in split_scans(buffers) {
                if let Some(r) = run_batch(&scan, &config.params, keep) {
                    stats.scans += 1;
                    sink.accept(r);
                }
            }
            stats
        }
        other => return Err(Usage(format!("run takes stream or batch mode, not {other:?}")).into()),
    };
    check_stats(&stats)?;
    let summary = sink.finish()?;
    println!("{summary}");
    println!("{}", stats_line(&stats));
    Ok(())
}

pub fn bench(config: &RunConfig, repetitions: usize, stop: &Arc<AtomicBool>) -> anyhow::Result<()> {
    if repetitions == 0 {
        return Err(Usage("repetitions must be at least 1".into()).into());
    }
    let (src, payloads) = collect_offline(config, stop)?;
    let (buffers, stats) = batch_buffers(config, &src, &payloads)?;
    let scans = split_scans(buffers);
    if scans.is_empty() {
        bail!("input holds no complete buffers");
    }
    let partitions = |scans: &[Vec<PacketBuffer>]| -> Vec<_> {
        scans.iter().map(|s| run_batch(s, &config.params, false).map(|r| r.partition())).collect()
    };
    let before = partitions(&scans);
    let report = measure_latency(&scans, &config.params, repetitions);
    if partitions(&scans) != before {
        bail!("cluster output changed between repetitions");
    }
    print!("{}", report.summary());
    println!("{} scans x {repetitions} repetitions; {}", scans.len(), stats_line(&stats));
    if let Some(dir) = &config.output.dir {
        create_dir(dir)?;
        fs::write(dir.join("latency.csv"), report.to_csv())?;
        fs::write(dir.join("latency.json"), serde_json::to_string_pretty(&report)?)?;
        fs::write(dir.join("latency.txt"), report.summary())?;
    }
    Ok(())
}

fn corpus_dir(dir: &Path) -> anyhow::Result<Vec<(String, SceneSpec)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading corpus {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    paths.sort();
    paths.iter().map(|p| resolve_scene(&p.to_string_lossy())).collect()
}

pub fn eval(config: &RunConfig, scenes: &[String], corpus: Option<&Path>, max_range: Option<f64>) -> anyhow::Result<()> {
    let mut items = Vec::new();
    match &config.input {
        Some(Input::Scene(s)) if scenes.is_empty() && corpus.is_none() => items.push(resolve_scene(s)?),
        Some(Input::Pcap(_) | Input::Raw(_) | Input::Udp(_)) => {
            return Err(Usage("eval needs scene specs with ground truth; packet inputs carry none".into()).into())
        }
        _ => {}
    }
    for s in scenes {
        items.push(resolve_scene(s)?);
    }
    if let Some(dir) = corpus {
        items.extend(corpus_dir(dir)?);
    }
    if items.is_empty() && corpus.is_none() {
        items = bundled_corpus();
    }
    let mut match_config = MatchConfig::default();
    if let Some(r) = max_range {
        if !(r > 0.0) {
            return Err(Usage(format!("max range must be positive, got {r}")).into());
        }
        match_config.max_range = Some(r);
    }
    let report = evaluate_corpus(&items, &config.params, &match_config)?;
    print!("{}", report.summary());
    if let Some(dir) = &config.output.dir {
        create_dir(dir)?;
        fs::write(dir.join("eval.csv"), report.to_csv())?;
        fs::write(dir.join("eval.json"), report.to_json())?;
    }
    let gates = config.gates.check(&report.metrics);
    for s in &gates.skipped {
        eprintln!("gate skipped, {s}");
    }
    if !gates.failed.is_empty() {
        return Err(GateFailure(format!("gates failed: {}", gates.failed.join("; "))).into());
    }
    Ok(())
}

pub struct SynthPlan {
    pub scenes: Vec<String>,
    pub random: Option<usize>,
    pub seed: u64,
    pub objects: usize,
    pub scans: u32,
    pub capture: Vec<CaptureFormat>,
}

pub fn synth(config: &RunConfig, plan: &SynthPlan) -> anyhow::Result<()> {
    let dir = config.output.dir.as_ref().ok_or_else(|| Usage("synth needs an output directory (--out)".into()))?;
    let mut items = Vec::new();
    for s in &plan.scenes {
        items.push(resolve_scene(s)?);
    }
    if let Some(n) = plan.random {
        let rc = RandomSceneConfig { objects: plan.objects, ..RandomSceneConfig::default() };
        for seed in plan.seed..plan.seed + n as u64 {
            let mut spec = random_scene(seed, &rc);
            spec.name = format!("random_{seed}");
            items.push((spec.name.clone(), spec));
        }
    }
    if plan.scenes.is_empty() && plan.random.is_none() {
        items = bundled_corpus();
    }
    create_dir(dir)?;
    for (name, spec) in &items {
        let stem: String = name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect();
        fs::write(dir.join(format!("{stem}.toml")), spec.render())?;
        let mut payloads = Vec::new();
        for k in 0..plan.scans {
            let scan = raycast_scan(&spec.clone().with_seed(spec.noise.seed.wrapping_add(u64::from(k))))?;
            payloads.extend(scene_to_packets(&scan, k));
        }
        for format in &plan.capture {
            let slices = payloads.iter().map(|p| &p[..]);
            match format {
                CaptureFormat::Pcap => {
                    let mut out = create(&dir.join(format!("{stem}.pcap")))?;
                    write_pcap(&mut out, slices, config.port)?;
                    out.flush()?;
                }
                CaptureFormat::Raw => {
                    let mut out = create(&dir.join(format!("{stem}.raw")))?;
                    write_raw(&mut out, slices)?;
                    out.flush()?;
                }
            }
        }
        println!("{stem}: {} objects, {} packets", spec.objects.len(), payloads.len());
    }
    Ok(())
}

pub fn inspect(config: &RunConfig, limit: Option<usize>, blocks: bool, as_json: bool, stop: &Arc<AtomicBool>) -> anyhow::Result<()> {
    let src = source::open(config, stop)?;
    let error = Arc::new(Mutex::new(None));
    let packets = Guarded { inner: src.packets, stop: stop.clone(), error: error.clone() };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let (mut count, mut failures) = (0usize, 0usize);
    for (index, bytes) in packets.take(limit.unwrap_or(usize::MAX)).enumerate() {
        count += 1;
        let packet = match decode_packet(&bytes) {
            Ok(p) => p,
            Err(e) => {
                failures += 1;
                if as_json {
                    writeln!(out, "{}", json!({ "index": index, "error": e.to_string() }))?;
                } else {
                    writeln!(out, "#{index} error: {e}")?;
                }
                continue;
            }
        };
        let first = packet.blocks[0].azimuth;
        let last = packet.blocks[packet.blocks.len() - 1].azimuth;
        let (mode, product) = (packet.tail[4], packet.tail[5]);
        if as_json {
            let mut record = json!({
                "index": index,
                "timestamp_us": packet.timestamp_us(),
                "azimuth_first_cd": first,
                "azimuth_last_cd": last,
                "returns": packet.nonzero_returns(),
                "return_mode": mode,
                "product_id": product,
            });
            if blocks {
                record["blocks"] = packet
                    .blocks
                    .iter()
                    .map(|b| json!({ "flag": b.flag, "azimuth_cd": b.azimuth, "ticks": b.returns.iter().map(|r| r.ticks).collect::<Vec<_>>() }))
                    .collect();
            }
            writeln!(out, "{record}")?;
            continue;
        }
        writeln!(
            out,
            "#{index} t={}us azimuth {:.2}..{:.2} deg, {} returns, mode 0x{mode:02x}, product 0x{product:02x}",
            packet.timestamp_us(),
            f64::from(first) / 100.0,
            f64::from(last) / 100.0,
            packet.nonzero_returns()
        )?;
        if blocks {
            for (k, b) in packet.blocks.iter().enumerate() {
                let ranges: Vec<f64> = b.returns.iter().filter(|r| r.ticks != 0).map(|r| r.meters()).collect();
                let (lo, hi) = ranges.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &r| (lo.min(r), hi.max(r)));
                if ranges.is_empty() {
                    writeln!(out, "  block {k} flag 0x{:04x} azimuth {:.2} deg, no returns", b.flag, f64::from(b.azimuth) / 100.0)?;
                } else {
                    writeln!(
                        out,
                        "  block {k} flag 0x{:04x} azimuth {:.2} deg, {} returns, range {lo:.3}..{hi:.3} m",
                        b.flag,
                        f64::from(b.azimuth) / 100.0,
                        ranges.len()
                    )?;
                }
            }
        }
    }
    if let Some(e) = error.lock().expect("error slot").take() {
        return Err(e).context("reading input");
    }
    if !as_json {
        writeln!(out, "{count} packets, {failures} decode errors")?;
    }
    Ok(())
}
