//! Segmentation metrics against synthetic ground truth.
//!
//! Truth objects and predicted clusters are compared by point overlap on a
//! shared point universe. With threshold τ (default 0.5), for every
//! counted truth object `t`:
//!
//! * a prediction *covers* `t` when it holds at least τ of `t`'s points,
//!   and is *mostly* `t` when at least τ of its own points belong to `t`;
//! * `t` is under-segmented when a prediction covering it also covers
//!   another counted object;
//! * otherwise `t` is a true positive when exactly one prediction covers it
//!   and that prediction is mostly `t`;
//! * otherwise `t` is over-segmented when at least two predictions are
//!   mostly `t` and together hold at least τ of its points;
//! * anything else is a false negative.
//!
//! A prediction is a false positive when it covers no counted object, is
//! not mostly any truth object (excluded objects included) and its
//! centroid lies within `max_range`.
//!
//! Truth objects with fewer than `min_points` visible points or whose
//! centroid lies farther than `max_range` horizontally are not counted.
//!
//! Precision and recall count detections: an object is detected unless it
//! is a false negative, so recall = (All − FN) / All and precision =
//! (All − FN) / (All − FN + FP).

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use petgraph::unionfind::UnionFind;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::packet::AssemblerConfig;
use crate::params::SegParams;
use crate::pipeline::{run_batch, ScanResult};
use crate::synth::{raycast_scan, LabeledScan, SceneError, SceneSpec, Truth};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("point universes differ: {truth} truth labels, {predicted} predicted labels, {positions} positions")]
    IndexMismatch { truth: usize, predicted: usize, positions: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    pub overlap_threshold: f64,
    pub min_points: usize,
    /// Horizontal centroid distance gate, meters.
    pub max_range: Option<f64>,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self { overlap_threshold: 0.5, min_points: 3, max_range: Some(30.0) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatchOutcome {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub over_segmented: usize,
    pub under_segmented: usize,
    pub all_objects: usize,
}

impl std::ops::AddAssign for MatchOutcome {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.over_segmented += o.over_segmented;
        self.under_segmented += o.under_segmented;
        self.all_objects += o.all_objects;
    }
}

/// Metric ratios; `None` when there are no truth objects.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SegMetrics {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub tpr: Option<f64>,
    pub fnr: Option<f64>,
    pub osr: Option<f64>,
    pub usr: Option<f64>,
}

/// `num / den`, or 1.0 when the denominator is empty.
fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

impl SegMetrics {
    pub const NAMES: [&'static str; 6] = ["precision", "recall", "tpr", "fnr", "osr", "usr"];

    pub fn from_outcome(m: &MatchOutcome) -> Self {
        if m.all_objects == 0 {
            return Self::default();
        }
        let detected = m.all_objects - m.fn_;
        Self {
            precision: Some(ratio(detected, detected + m.fp)),
            recall: Some(ratio(detected, m.all_objects)),
            tpr: Some(ratio(m.tp, m.all_objects)),
            fnr: Some(ratio(m.fn_, m.all_objects)),
            osr: Some(ratio(m.tp, m.tp + m.over_segmented)),
            usr: Some(ratio(m.tp, m.tp + m.under_segmented)),
        }
    }

    pub fn values(&self) -> [Option<f64>; 6] {
        [self.precision, self.recall, self.tpr, self.fnr, self.osr, self.usr]
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        Self::NAMES.iter().position(|&n| n == name).and_then(|i| self.values()[i])
    }
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

/// Matches predicted clusters to truth objects over a shared point
/// universe: `truth[i]` and `predicted[i]` label point `i` (`None` for
/// non-object points and unclustered points), `positions[i]` is its
/// location.
pub fn match_segmentation(
    truth: &[Option<u32>],
    predicted: &[Option<u32>],
    positions: &[[f64; 3]],
    config: &MatchConfig,
) -> Result<MatchOutcome, EvalError> {
    if truth.len() != predicted.len() || truth.len() != positions.len() {
        return Err(EvalError::IndexMismatch {
            truth: truth.len(),
            predicted: predicted.len(),
            positions: positions.len(),
        });
    }
    let tau = config.overlap_threshold;

    // truth id -> (points, xy sum)
    let mut objects: BTreeMap<u32, (usize, [f64; 2])> = BTreeMap::new();
    let mut pred_size: BTreeMap<u32, usize> = BTreeMap::new();
    let mut pred_xy: BTreeMap<u32, [f64; 2]> = BTreeMap::new();
    let mut overlap: HashMap<(u32, u32), usize> = HashMap::new();
    for ((t, p), pos) in truth.iter().zip(predicted).zip(positions) {
        if let Some(t) = *t {
            let e = objects.entry(t).or_insert((0, [0.0; 2]));
            e.0 += 1;
            e.1[0] += pos[0];
            e.1[1] += pos[1];
        }
        if let Some(p) = *p {
            *pred_size.entry(p).or_default() += 1;
            let xy = pred_xy.entry(p).or_default();
            xy[0] += pos[0];
            xy[1] += pos[1];
            if let Some(t) = *t {
                *overlap.entry((p, t)).or_default() += 1;
            }
        }
    }
    let in_range = |n: usize, sum: [f64; 2]| {
        config.max_range.is_none_or(|r| (sum[0] / n as f64).hypot(sum[1] / n as f64) <= r)
    };
    let counted: BTreeMap<u32, usize> = objects
        .iter()
        .filter(|(_, &(n, sum))| n >= config.min_points && in_range(n, sum))
        .map(|(&id, &(n, _))| (id, n))
        .collect();

    let covers = |p: u32, t: u32, t_size: usize| overlap.get(&(p, t)).is_some_and(|&n| n as f64 >= tau * t_size as f64);
    let mostly = |p: u32, t: u32| overlap.get(&(p, t)).is_some_and(|&n| n as f64 >= tau * pred_size[&p] as f64);

    // counted objects each prediction covers
    let mut covered_by: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for &p in pred_size.keys() {
        for (&t, &n) in &counted {
            if covers(p, t, n) {
                covered_by.entry(p).or_default().push(t);
            }
        }
    }

    let mut out = MatchOutcome { all_objects: counted.len(), ..MatchOutcome::default() };
    for (&t, &n) in &counted {
        let coverers: Vec<u32> = pred_size.keys().copied().filter(|&p| covers(p, t, n)).collect();
        if coverers.iter().any(|p| covered_by[p].len() >= 2) {
            out.under_segmented += 1;
        } else if coverers.len() == 1 && mostly(coverers[0], t) {
            out.tp += 1;
        } else {
            let fragments: Vec<u32> = pred_size.keys().copied().filter(|&p| mostly(p, t)).collect();
            let held: usize = fragments.iter().map(|&p| overlap[&(p, t)]).sum();
            if fragments.len() >= 2 && held as f64 >= tau * n as f64 {
                out.over_segmented += 1;
            } else {
                out.fn_ += 1;
            }
        }
    }
    out.fp = pred_size
        .keys()
        .filter(|&&p| {
            in_range(pred_size[&p], pred_xy[&p]) && !covered_by.contains_key(&p) && !objects.keys().any(|&t| mostly(p, t))
        })
        .count();
    Ok(out)
}

/// Exact single-linkage components at distance `epsilon`, by brute force.
/// Labels are component indices numbered in order of first appearance.
pub fn oracle_cluster(points: &[[f64; 3]], epsilon: f64) -> Vec<usize> {
    let eps_sq = epsilon * epsilon;
    let mut uf = UnionFind::<usize>::new(points.len());
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d: f64 = (0..3).map(|k| (points[i][k] - points[j][k]).powi(2)).sum();
            if d <= eps_sq {
                uf.union(i, j);
            }
        }
    }
    let mut names = HashMap::new();
    (0..points.len())
        .map(|i| {
            let next = names.len();
            *names.entry(uf.find(i)).or_insert(next)
        })
        .collect()
}

/// Truth, prediction and position of every valid point of a processed
/// synthetic scan, in scan order.
pub struct PointLabels {
    pub truth: Vec<Option<u32>>,
    pub predicted: Vec<Option<u32>>,
    pub positions: Vec<[f64; 3]>,
}

/// Pairs a pipeline result (produced with kept points) with the scan's
/// truth.
pub fn point_labels(scan: &LabeledScan, result: &ScanResult, config: AssemblerConfig) -> PointLabels {
    let grid = scan.truth_grid(config);
    let owner: HashMap<(u32, u16), u32> =
        result.clusters.iter().flat_map(|c| c.points.iter().map(move |p| ((p.col, p.row), c.id))).collect();
    let mut labels = PointLabels { truth: Vec::new(), predicted: Vec::new(), positions: Vec::new() };
    for p in result.points.iter().flatten().filter(|p| p.is_valid()) {
        labels.truth.push(match grid.get(p.col, p.row) {
            Truth::Object(id) => Some(id),
            _ => None,
        });
        labels.predicted.push(owner.get(&(p.col, p.row)).copied());
        labels.positions.push(p.position());
    }
    labels
}

/// Runs the scan through the pipeline in one pass, with ranges quantized
/// exactly as the packet path would.
pub fn segment_scan(scan: &LabeledScan, params: &SegParams) -> ScanResult {
    let buffers = scan.quantized().to_buffers(AssemblerConfig::default());
    run_batch(&buffers, params, true).expect("a scan has at least one buffer")
}

pub fn evaluate_scan(scan: &LabeledScan, params: &SegParams, config: &MatchConfig) -> MatchOutcome {
    let result = segment_scan(scan, params);
    let labels = point_labels(scan, &result, AssemblerConfig::default());
    match_segmentation(&labels.truth, &labels.predicted, &labels.positions, config).expect("labels share one universe")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneReport {
    pub name: String,
    pub outcome: MatchOutcome,
    pub metrics: SegMetrics,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CorpusReport {
    pub scenes: Vec<SceneReport>,
    pub aggregate: MatchOutcome,
    pub metrics: SegMetrics,
}

impl CorpusReport {
    pub fn from_scenes(scenes: Vec<SceneReport>) -> Self {
        let mut aggregate = MatchOutcome::default();
        for s in &scenes {
            aggregate += s.outcome;
        }
        Self { metrics: SegMetrics::from_outcome(&aggregate), scenes, aggregate }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("scene,all,tp,fp,fn,over,under,precision,recall,tpr,fnr,osr,usr\n");
        let mut row = |name: &str, m: &MatchOutcome, s: &SegMetrics| {
            let name = if name.contains([',', '"']) { format!("\"{}\"", name.replace('"', "\"\"")) } else { name.to_string() };
            let _ = write!(
                out,
                "{name},{},{},{},{},{},{}",
                m.all_objects, m.tp, m.fp, m.fn_, m.over_segmented, m.under_segmented
            );
            for v in s.values() {
                let _ = write!(out, ",{}", fmt_metric(v));
            }
            out.push('\n');
        };
        for s in &self.scenes {
            row(&s.name, &s.outcome, &s.metrics);
        }
        row("aggregate", &self.aggregate, &self.metrics);
        out
    }

    /// Machine-readable summary: aggregate counts and metrics.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&serde_json::json!({
            "scenes": self.scenes.len(),
            "aggregate": self.aggregate,
            "metrics": self.metrics,
        }))
        .expect("report serializes")
    }

    pub fn summary(&self) -> String {
        let mut out = format!("{:<28} {:>5}", "scene", "all");
        for n in SegMetrics::NAMES {
            let _ = write!(out, " {n:>9}");
        }
        out.push('\n');
        let mut row = |name: &str, all: usize, s: &SegMetrics| {
            let _ = write!(out, "{name:<28} {all:>5}");
            for v in s.values() {
                let _ = write!(out, " {:>9}", fmt_metric(v));
            }
            out.push('\n');
        };
        for s in &self.scenes {
            row(&s.name, s.outcome.all_objects, &s.metrics);
        }
        row("aggregate", self.aggregate.all_objects, &self.metrics);
        out
    }
}

/// Ray-casts and evaluates every scene, one thread per available core.
pub fn evaluate_corpus(
    corpus: &[(String, SceneSpec)],
    params: &SegParams,
    config: &MatchConfig,
) -> Result<CorpusReport, SceneError> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(corpus.len().max(1));
    let chunk = corpus.len().div_ceil(threads).max(1);
    let reports: Result<Vec<Vec<SceneReport>>, SceneError> = std::thread::scope(|scope| {
        let handles: Vec<_> = corpus
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|(name, spec)| {
                            let scan = raycast_scan(spec)?;
                            let outcome = evaluate_scan(&scan, params, config);
                            Ok(SceneReport { name: name.clone(), outcome, metrics: SegMetrics::from_outcome(&outcome) })
                        })
                        .collect::<Result<Vec<_>, SceneError>>()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation thread panicked")).collect()
    });
    Ok(CorpusReport::from_scenes(reports?.into_iter().flatten().collect()))
}
