//! Analytic scene simulator: ray-casts a spinning multi-beam sensor against
//! a ground surface and box / cylinder / panel primitives, producing
//! truth-labelled scans and the matching raw packet stream.
//!
//! Scenes are TOML documents:
//!
//! ```toml
//! name = "car"
//!
//! [sensor]
//! mount_height = 2.0      # meters above the ground under the sensor
//! rpm = 600.0
//! max_range = 200.0
//! # calibration = "beams.csv"   # defaults to the built-in 32-beam table
//!
//! [ground]
//! shape = "plane"         # plane | crease | none
//! grade_x = 0.0           # dz/dx
//! grade_y = 0.0           # dz/dy
//! # crease_x = 5.0        # crease: flat up to x = crease_x, then pitched
//! # pitch_deg = 5.0
//!
//! [noise]
//! sigma = 0.02            # Gaussian range noise, meters
//! seed = 7
//!
//! # primitives sharing an id form one compound object
//! [[objects]]
//! id = 1
//! shape = "box"           # box | cylinder | panel
//! position = [8.0, 0.0]   # x, y of the footprint center
//! size = [4.5, 1.8, 1.5]  # box: length, width, height
//!                         # cylinder: diameter, diameter, height
//!                         # panel: width, (ignored), height
//! yaw_deg = 0.0
//! # base_z defaults to the ground height at `position`
//!
//! [[objects.dropout]]
//! face = "front"          # optional; any face when absent
//! z_min = 0.9             # band above the object base, meters
//! z_max = 1.4
//! probability = 0.3
//! pass_through = true     # transparent (ray continues) or absorbing
//! ```

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cluster::Aabb;
use crate::geometry::SphericalPoint;
use crate::packet::{
    encode_packet, Assembler, AssemblerConfig, BeamCalibration, CalibrationError, DataPacket, PacketBuffer,
    Return, AZIMUTH_MODULUS, BLOCKS_PER_PACKET, BLOCK_FLAG, METERS_PER_TICK, PACKET_SIZE,
};

/// Azimuth step between consecutive firings, centidegrees.
pub const FIRING_STEP_CD: u32 = 20;

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("reading scene {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parsing scene: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid scene: {0}")]
    Invalid(String),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub sensor: SensorSpec,
    #[serde(default)]
    pub ground: GroundSpec,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub objects: Vec<ObjectSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorSpec {
    pub mount_height: f64,
    pub rpm: f64,
    pub max_range: f64,
    pub calibration: Option<PathBuf>,
}

impl Default for SensorSpec {
    fn default() -> Self {
        Self {
            mount_height: 2.0,
            rpm: 600.0,
            max_range: 200.0,
            calibration: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundShape {
    Plane,
    Crease,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroundSpec {
    pub shape: GroundShape,
    pub grade_x: f64,
    pub grade_y: f64,
    pub crease_x: f64,
    pub pitch_deg: f64,
    /// Largest accepted grade, |dz/dx| and |dz/dy|.
    pub max_grade: f64,
}

impl Default for GroundSpec {
    fn default() -> Self {
        Self {
            shape: GroundShape::Plane,
            grade_x: 0.0,
            grade_y: 0.0,
            crease_x: 0.0,
            pitch_deg: 0.0,
            max_grade: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { sigma: 0.02, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Box,
    Cylinder,
    Panel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Face {
    /// Box +x / panel side facing +x.
    Front,
    Back,
    /// Box +y.
    Left,
    Right,
    Top,
    Bottom,
    /// Cylinder mantle.
    Side,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub id: u32,
    pub shape: Shape,
    pub position: [f64; 2],
    pub size: [f64; 3],
    #[serde(default)]
    pub yaw_deg: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_z: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dropout: Vec<DropoutSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropoutSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub face: Option<Face>,
    #[serde(default = "neg_inf", skip_serializing_if = "is_neg_inf")]
    pub z_min: f64,
    #[serde(default = "pos_inf", skip_serializing_if = "is_pos_inf")]
    pub z_max: f64,
    pub probability: f64,
    #[serde(default = "yes")]
    pub pass_through: bool,
}

fn neg_inf() -> f64 {
    f64::NEG_INFINITY
}
fn pos_inf() -> f64 {
    f64::INFINITY
}
fn is_neg_inf(v: &f64) -> bool {
    *v == f64::NEG_INFINITY
}
fn is_pos_inf(v: &f64) -> bool {
    *v == f64::INFINITY
}
fn yes() -> bool {
    true
}

impl SceneSpec {
    pub fn parse(text: &str) -> Result<Self, SceneError> {
        let spec: Self = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    /// Reads a scene file. A relative calibration path is resolved against
    /// the scene file's directory.
    pub fn load(path: &Path) -> Result<Self, SceneError> {
        let text = std::fs::read_to_string(path).map_err(|source| SceneError::Io {
            path: path.to_owned(),
            source,
        })?;
        let mut spec = Self::parse(&text)?;
        if let (Some(cal), Some(dir)) = (&spec.sensor.calibration, path.parent()) {
            if cal.is_relative() {
                spec.sensor.calibration = Some(dir.join(cal));
            }
        }
        Ok(spec)
    }

    pub fn render(&self) -> String {
        toml::to_string(self).expect("scene specs always serialize")
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.noise.seed = seed;
        self
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.noise.sigma = sigma;
        self
    }

    pub fn beam_calibration(&self) -> Result<BeamCalibration, SceneError> {
        match &self.sensor.calibration {
            Some(path) => Ok(BeamCalibration::load(path, 32)?),
            None => Ok(BeamCalibration::vlp32c()),
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: String| Err(SceneError::Invalid(m));
        let s = &self.sensor;
        if !(s.mount_height > 0.0 && s.rpm > 0.0 && s.max_range > 0.0) {
            return bad("sensor mount_height, rpm and max_range must be positive".into());
        }
        if !(self.noise.sigma >= 0.0) {
            return bad("noise sigma must be non-negative".into());
        }
        let g = &self.ground;
        let grades = match g.shape {
            GroundShape::Plane => [g.grade_x, g.grade_y],
            GroundShape::Crease => [g.pitch_deg.to_radians().tan(), 0.0],
            GroundShape::None => [0.0, 0.0],
        };
        if grades.iter().any(|v| !(v.abs() <= g.max_grade)) {
            return bad(format!("ground grade exceeds max_grade {}", g.max_grade));
        }
        for o in &self.objects {
            let [a, b, h] = o.size;
            let sized = match o.shape {
                Shape::Box => a > 0.0 && b > 0.0 && h > 0.0,
                Shape::Cylinder | Shape::Panel => a > 0.0 && h > 0.0,
            };
            if !sized {
                return bad(format!("object {} has a non-positive size", o.id));
            }
            for d in &o.dropout {
                if !(0.0..=1.0).contains(&d.probability) {
                    return bad(format!("object {} dropout probability outside [0, 1]", o.id));
                }
            }
            let prim = Primitive::new(o, self);
            if prim.contains_origin() {
                return bad(format!("object {} contains the sensor origin", o.id));
            }
        }
        Ok(())
    }

    /// Ground height at horizontal position `(x, y)` in the sensor frame.
    pub fn ground_z(&self, x: f64, y: f64) -> Option<f64> {
        let h = -self.sensor.mount_height;
        let g = &self.ground;
        match g.shape {
            GroundShape::Plane => Some(h + g.grade_x * x + g.grade_y * y),
            GroundShape::Crease => {
                let k = g.pitch_deg.to_radians().tan();
                Some(if x <= g.crease_x { h } else { h + k * (x - g.crease_x) })
            }
            GroundShape::None => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Truth {
    NoReturn,
    Ground,
    Object(u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthObject {
    pub id: u32,
    pub point_count: usize,
    pub bbox: Aabb,
}

/// One simulated revolution. `points` and `truth` are firing-major:
/// index `firing * rows + row`; a point's `col` is its firing index.
#[derive(Debug, Clone)]
pub struct LabeledScan {
    pub calib: BeamCalibration,
    pub firings: u32,
    pub firing_period_us: f64,
    pub points: Vec<SphericalPoint>,
    pub truth: Vec<Truth>,
    pub truth_objects: Vec<TruthObject>,
}

struct Ray {
    o: [f64; 3],
    d: [f64; 3],
}

#[derive(Debug, Clone, Copy)]
struct Hit {
    t: f64,
    object: usize,
    face: Face,
}

struct Primitive {
    id: u32,
    shape: Shape,
    center: [f64; 3],
    cos_yaw: f64,
    sin_yaw: f64,
    half: [f64; 2],
    height: f64,
    dropout: Vec<DropoutSpec>,
}

impl Primitive {
    fn new(o: &ObjectSpec, scene: &SceneSpec) -> Self {
        let [x, y] = o.position;
        let base = o
            .base_z
            .or_else(|| scene.ground_z(x, y))
            .unwrap_or(-scene.sensor.mount_height);
        let (sin_yaw, cos_yaw) = o.yaw_deg.to_radians().sin_cos();
        Self {
            id: o.id,
            shape: o.shape,
            center: [x, y, base],
            cos_yaw,
            sin_yaw,
            half: [o.size[0] / 2.0, o.size[1] / 2.0],
            height: o.size[2],
            dropout: o.dropout.clone(),
        }
    }

    fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        [
            self.cos_yaw * dx + self.sin_yaw * dy,
            -self.sin_yaw * dx + self.cos_yaw * dy,
            p[2] - self.center[2],
        ]
    }

    fn dir_to_local(&self, d: [f64; 3]) -> [f64; 3] {
        [
            self.cos_yaw * d[0] + self.sin_yaw * d[1],
            -self.sin_yaw * d[0] + self.cos_yaw * d[1],
            d[2],
        ]
    }

    fn contains_origin(&self) -> bool {
        let p = self.to_local([0.0; 3]);
        if !(0.0..=self.height).contains(&p[2]) {
            return false;
        }
        match self.shape {
            Shape::Box => p[0].abs() <= self.half[0] && p[1].abs() <= self.half[1],
            Shape::Cylinder => p[0].hypot(p[1]) <= self.half[0],
            Shape::Panel => p[0].abs() < 1e-9 && p[1].abs() <= self.half[0],
        }
    }

    /// Surface crossings along the ray with t > 0, in increasing t.
    fn intersect(&self, index: usize, ray: &Ray, hits: &mut Vec<Hit>) {
        let o = self.to_local(ray.o);
        let d = self.dir_to_local(ray.d);
        let mut push = |t: f64, face: Face| {
            if t > 1e-9 {
                hits.push(Hit { t, object: index, face });
            }
        };
        match self.shape {
            Shape::Panel => {
                if d[0].abs() < 1e-12 {
                    return;
                }
                let t = -o[0] / d[0];
                let y = o[1] + t * d[1];
                let z = o[2] + t * d[2];
                if y.abs() <= self.half[0] && (0.0..=self.height).contains(&z) {
                    push(t, if o[0] > 0.0 { Face::Front } else { Face::Back });
                }
            }
            Shape::Box => {
                let lo = [-self.half[0], -self.half[1], 0.0];
                let hi = [self.half[0], self.half[1], self.height];
                let faces = [
                    (Face::Back, Face::Front),
                    (Face::Right, Face::Left),
                    (Face::Bottom, Face::Top),
                ];
                let mut t_in = f64::NEG_INFINITY;
                let mut t_out = f64::INFINITY;
                let mut f_in = Face::Front;
                let mut f_out = Face::Front;
                for k in 0..3 {
                    if d[k].abs() < 1e-12 {
                        if o[k] < lo[k] || o[k] > hi[k] {
                            return;
                        }
                        continue;
                    }
                    let (mut t0, mut t1) = ((lo[k] - o[k]) / d[k], (hi[k] - o[k]) / d[k]);
                    let (mut f0, mut f1) = faces[k];
                    if t0 > t1 {
                        std::mem::swap(&mut t0, &mut t1);
                        std::mem::swap(&mut f0, &mut f1);
                    }
                    if t0 > t_in {
                        t_in = t0;
                        f_in = f0;
                    }
                    if t1 < t_out {
                        t_out = t1;
                        f_out = f1;
                    }
                }
                if t_in <= t_out {
                    push(t_in, f_in);
                    push(t_out, f_out);
                }
            }
            Shape::Cylinder => {
                let r = self.half[0];
                let a = d[0] * d[0] + d[1] * d[1];
                let (mut t_in, mut t_out, mut f_in, mut f_out);
                if a < 1e-18 {
                    if o[0].hypot(o[1]) > r {
                        return;
                    }
                    t_in = f64::NEG_INFINITY;
                    t_out = f64::INFINITY;
                    f_in = Face::Side;
                    f_out = Face::Side;
                } else {
                    let b = o[0] * d[0] + o[1] * d[1];
                    let c = o[0] * o[0] + o[1] * o[1] - r * r;
                    let disc = b * b - a * c;
                    if disc < 0.0 {
                        return;
                    }
                    let s = disc.sqrt();
                    t_in = (-b - s) / a;
                    t_out = (-b + s) / a;
                    f_in = Face::Side;
                    f_out = Face::Side;
                }
                if d[2].abs() < 1e-12 {
                    if !(0.0..=self.height).contains(&o[2]) {
                        return;
                    }
                } else {
                    let (mut t0, mut t1) = (-o[2] / d[2], (self.height - o[2]) / d[2]);
                    let (mut f0, mut f1) = (Face::Bottom, Face::Top);
                    if t0 > t1 {
                        std::mem::swap(&mut t0, &mut t1);
                        std::mem::swap(&mut f0, &mut f1);
                    }
                    if t0 > t_in {
                        t_in = t0;
                        f_in = f0;
                    }
                    if t1 < t_out {
                        t_out = t1;
                        f_out = f1;
                    }
                }
                if t_in <= t_out {
                    push(t_in, f_in);
                    push(t_out, f_out);
                }
            }
        }
    }

    fn dropout_at(&self, face: Face, z_rel: f64) -> Option<&DropoutSpec> {
        self.dropout
            .iter()
            .find(|d| d.face.is_none_or(|f| f == face) && z_rel >= d.z_min && z_rel <= d.z_max)
    }
}

fn ground_hit(scene: &SceneSpec, ray: &Ray) -> Option<f64> {
    let h = -scene.sensor.mount_height;
    let plane = |gx: f64, gy: f64, z0: f64| {
        // z = z0 + gx x + gy y along o + t d, with o = 0
        let denom = ray.d[2] - gx * ray.d[0] - gy * ray.d[1];
        (denom < 0.0).then(|| z0 / denom).filter(|t| *t > 0.0)
    };
    let g = &scene.ground;
    match g.shape {
        GroundShape::None => None,
        GroundShape::Plane => plane(g.grade_x, g.grade_y, h),
        GroundShape::Crease => {
            let k = g.pitch_deg.to_radians().tan();
            let flat = plane(0.0, 0.0, h).filter(|t| t * ray.d[0] <= g.crease_x);
            let pitched = plane(k, 0.0, h - k * g.crease_x).filter(|t| t * ray.d[0] > g.crease_x);
            match (flat, pitched) {
                (Some(a), Some(b)) => Some(a.min(b)),
                (a, b) => a.or(b),
            }
        }
    }
}

/// Casts every beam of one revolution starting at azimuth 0.
pub fn raycast_scan(spec: &SceneSpec) -> Result<LabeledScan, SceneError> {
    spec.validate()?;
    let calib = spec.beam_calibration()?;
    Ok(raycast_scan_with(spec, &calib))
}

/// Like [`raycast_scan`] with an explicit calibration; `spec` must be valid.
pub fn raycast_scan_with(spec: &SceneSpec, calib: &BeamCalibration) -> LabeledScan {
    let rows = calib.rows();
    let firings = u32::from(AZIMUTH_MODULUS) / FIRING_STEP_CD;
    let prims: Vec<Primitive> = spec.objects.iter().map(|o| Primitive::new(o, spec)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.noise.seed);
    let noise = (spec.noise.sigma > 0.0).then(|| Normal::new(0.0, spec.noise.sigma).expect("finite sigma"));

    let mut points = Vec::with_capacity(firings as usize * rows);
    let mut truth = Vec::with_capacity(points.capacity());
    let mut hits = Vec::new();
    let elev: Vec<(f64, f64)> = calib.vertical_angles().iter().map(|p| p.to_radians().sin_cos()).collect();

    for firing in 0..firings {
        let az_deg = f64::from(firing * FIRING_STEP_CD) / 100.0;
        for row in 0..rows {
            let phi = calib.vertical_angles()[row];
            let theta = az_deg + calib.azimuth_offsets()[row];
            let (sin_t, cos_t) = theta.to_radians().sin_cos();
            let (sin_p, cos_p) = elev[row];
            let ray = Ray {
                o: [0.0; 3],
                d: [cos_p * cos_t, cos_p * sin_t, sin_p],
            };

            hits.clear();
            for (i, p) in prims.iter().enumerate() {
                p.intersect(i, &ray, &mut hits);
            }
            hits.sort_by(|a, b| a.t.total_cmp(&b.t));
            let ground_t = ground_hit(spec, &ray);

            let mut result = None;
            for hit in &hits {
                if ground_t.is_some_and(|g| g <= hit.t) {
                    break;
                }
                let prim = &prims[hit.object];
                let z_rel = ray.d[2] * hit.t - prim.center[2];
                if let Some(d) = prim.dropout_at(hit.face, z_rel) {
                    if d.probability > 0.0 && rng.gen::<f64>() < d.probability {
                        if d.pass_through {
                            continue;
                        }
                        result = Some((f64::INFINITY, Truth::NoReturn));
                        break;
                    }
                }
                result = Some((hit.t, Truth::Object(prim.id)));
                break;
            }
            let (t, label) = result.unwrap_or(match ground_t {
                Some(t) => (t, Truth::Ground),
                None => (f64::INFINITY, Truth::NoReturn),
            });

            let col = firing;
            if label == Truth::NoReturn || t > spec.sensor.max_range {
                points.push(SphericalPoint::no_return(phi, theta, row as u16, col));
                truth.push(Truth::NoReturn);
                continue;
            }
            let rho = match &noise {
                Some(n) => (t + n.sample(&mut rng)).max(METERS_PER_TICK),
                None => t,
            };
            points.push(SphericalPoint::new(rho, phi, theta, row as u16, col));
            truth.push(label);
        }
    }

    let mut ids: Vec<u32> = spec.objects.iter().map(|o| o.id).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut truth_objects: Vec<TruthObject> = Vec::new();
    for id in ids {
        let mut bbox: Option<Aabb> = None;
        let mut count = 0;
        for (p, t) in points.iter().zip(&truth) {
            if *t == Truth::Object(id) {
                count += 1;
                let pos = p.position();
                match &mut bbox {
                    Some(b) => b.include(pos),
                    None => bbox = Some(Aabb::point(pos)),
                }
            }
        }
        if let Some(bbox) = bbox {
            truth_objects.push(TruthObject {
                id,
                point_count: count,
                bbox,
            });
        }
    }

    LabeledScan {
        calib: calib.clone(),
        firings,
        firing_period_us: 60e6 / spec.sensor.rpm / f64::from(firings),
        points,
        truth,
        truth_objects,
    }
}

/// Truth labels addressed by assembled scan column and row.
#[derive(Debug, Clone)]
pub struct TruthGrid {
    rows: usize,
    labels: Vec<Truth>,
}

impl TruthGrid {
    pub fn get(&self, col: u32, row: u16) -> Truth {
        self.labels
            .get(col as usize * self.rows + row as usize)
            .copied()
            .unwrap_or(Truth::NoReturn)
    }
}

impl LabeledScan {
    pub fn rows(&self) -> usize {
        self.calib.rows()
    }

    pub fn point(&self, firing: u32, row: usize) -> &SphericalPoint {
        &self.points[firing as usize * self.rows() + row]
    }

    pub fn truth_at(&self, firing: u32, row: usize) -> Truth {
        self.truth[firing as usize * self.rows() + row]
    }

    pub fn valid_points(&self) -> usize {
        self.points.iter().filter(|p| p.is_valid()).count()
    }

    /// Copy with every range rounded to the wire resolution, i.e. the values
    /// a decoder recovers from [`scene_to_packets`].
    pub fn quantized(&self) -> LabeledScan {
        let mut out = self.clone();
        for p in &mut out.points {
            if p.is_valid() {
                let rho = Return::from_meters(p.rho, 0).meters();
                *p = if rho > 0.0 {
                    SphericalPoint::new(rho, p.phi, p.theta, p.row, p.col)
                } else {
                    SphericalPoint::no_return(p.phi, p.theta, p.row, p.col)
                };
            }
        }
        out
    }

    /// Ranges of one firing in wire channel order.
    fn firing_ranges(&self, firing: u32) -> Vec<f64> {
        let rows = self.rows();
        let base = firing as usize * rows;
        self.calib
            .row_to_channel()
            .iter()
            .enumerate()
            .fold(vec![0.0; rows], |mut acc, (row, &channel)| {
                let p = &self.points[base + row];
                acc[channel] = if p.is_valid() { p.rho } else { 0.0 };
                acc
            })
    }

    /// Feeds the scan straight into an assembler, bypassing the wire codec.
    pub fn to_buffers(&self, config: AssemblerConfig) -> Vec<PacketBuffer> {
        let mut assembler = Assembler::new(self.calib.clone(), config).expect("valid assembler config");
        let mut out = Vec::new();
        for f in 0..self.firings {
            let ranges = self.firing_ranges(f);
            assembler
                .push_firing(f64::from(f * FIRING_STEP_CD), &ranges, &mut out)
                .expect("firings are in order");
        }
        assembler.finish(&mut out);
        out
    }

    /// Truth labels re-indexed by the assembler's (column, row) layout.
    pub fn truth_grid(&self, config: AssemblerConfig) -> TruthGrid {
        let assembler = Assembler::new(self.calib.clone(), config).expect("valid assembler config");
        let rows = self.rows();
        let cols = (self.firings + assembler.geometry().span_extra) as usize;
        let mut labels = vec![Truth::NoReturn; cols * rows];
        for f in 0..self.firings {
            for row in 0..rows {
                let col = assembler.column_of(f, row) as usize;
                labels[col * rows + row] = self.truth_at(f, row);
            }
        }
        TruthGrid { rows, labels }
    }
}

/// Encodes one revolution as raw packets, one firing per block.
/// `revolution` offsets the tail timestamps for repeated scans.
pub fn scene_to_packets(scan: &LabeledScan, revolution: u32) -> Vec<[u8; PACKET_SIZE]> {
    assert_eq!(scan.rows(), 32, "the wire format carries 32 channels per block");
    assert_eq!(scan.firings as usize % BLOCKS_PER_PACKET, 0);
    let rev_us = scan.firing_period_us * f64::from(scan.firings);
    (0..scan.firings / BLOCKS_PER_PACKET as u32)
        .map(|k| {
            let mut packet = DataPacket::default();
            for (b, block) in packet.blocks.iter_mut().enumerate() {
                let firing = k * BLOCKS_PER_PACKET as u32 + b as u32;
                block.flag = BLOCK_FLAG;
                block.azimuth = (firing * FIRING_STEP_CD) as u16;
                for (channel, rho) in scan.firing_ranges(firing).into_iter().enumerate() {
                    let reflectivity = match scan.truth_at(firing, scan.calib.channel_to_row()[channel]) {
                        Truth::Object(_) => 80,
                        _ => 20,
                    };
                    block.returns[channel] = Return::from_meters(rho, if rho > 0.0 { reflectivity } else { 0 });
                }
            }
            let t0 = rev_us * f64::from(revolution)
                + scan.firing_period_us * f64::from(k * BLOCKS_PER_PACKET as u32);
            packet.set_timestamp_us((t0 as u64 % 3_600_000_000) as u32);
            encode_packet(&packet)
        })
        .collect()
}

/// Scenes bundled with the library, by file stem.
pub const BUNDLED_SCENES: [(&str, &str); 7] = [
    ("flat_ground", include_str!("../scenes/flat_ground.toml")),
    ("sloped_ground", include_str!("../scenes/sloped_ground.toml")),
    ("car_window_dropout", include_str!("../scenes/car_window_dropout.toml")),
    ("pole_occlusion", include_str!("../scenes/pole_occlusion.toml")),
    ("two_pedestrians", include_str!("../scenes/two_pedestrians.toml")),
    ("seam_box", include_str!("../scenes/seam_box.toml")),
    ("urban_block", include_str!("../scenes/urban_block.toml")),
];

pub fn bundled_scene(name: &str) -> Option<SceneSpec> {
    BUNDLED_SCENES
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| SceneSpec::parse(text).expect("bundled scenes are valid"))
}

pub fn bundled_corpus() -> Vec<(String, SceneSpec)> {
    BUNDLED_SCENES
        .iter()
        .map(|(n, text)| (n.to_string(), SceneSpec::parse(text).expect("bundled scenes are valid")))
        .collect()
}

/// Settings for [`random_scene`].
#[derive(Debug, Clone, PartialEq)]
pub struct RandomSceneConfig {
    pub objects: usize,
    /// Smallest clearance between object footprints, meters.
    pub min_gap: f64,
    pub min_range: f64,
    pub max_range: f64,
    pub max_grade: f64,
    pub sigma: f64,
}

impl Default for RandomSceneConfig {
    fn default() -> Self {
        Self {
            objects: 20,
            min_gap: 1.5,
            min_range: 4.0,
            max_range: 35.0,
            max_grade: 0.04,
            sigma: 0.02,
        }
    }
}

/// A street-like scene of cars, pedestrians, poles, bins and walls placed
/// without overlap. Footprints keep at least `min_gap` clearance, measured
/// between bounding circles. Fewer objects are placed if space runs out.
pub fn random_scene(seed: u64, config: &RandomSceneConfig) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut placed: Vec<([f64; 2], f64)> = Vec::new();
    let mut objects = Vec::new();
    let mut attempts = 0;
    while objects.len() < config.objects && attempts < config.objects * 200 {
        attempts += 1;
        let kind = rng.gen_range(0..5);
        let (shape, size): (Shape, [f64; 3]) = match kind {
            0 => (Shape::Box, [rng.gen_range(3.8..4.8), rng.gen_range(1.6..1.9), rng.gen_range(1.3..1.7)]),
            1 => {
                let d = rng.gen_range(0.4..0.6);
                (Shape::Cylinder, [d, d, rng.gen_range(1.5..1.9)])
            }
            2 => {
                let d = rng.gen_range(0.15..0.3);
                (Shape::Cylinder, [d, d, rng.gen_range(3.0..6.0)])
            }
            3 => (Shape::Box, [rng.gen_range(0.5..1.0), rng.gen_range(0.5..1.0), rng.gen_range(0.8..1.2)]),
            _ => (Shape::Panel, [rng.gen_range(2.0..6.0), 0.0, rng.gen_range(1.0..2.5)]),
        };
        let radius = match shape {
            Shape::Panel => size[0] / 2.0,
            _ => size[0].hypot(size[1]) / 2.0,
        };
        let r = rng.gen_range(config.min_range..config.max_range);
        let az = rng.gen_range(0.0..std::f64::consts::TAU);
        let pos = [r * az.cos(), r * az.sin()];
        let yaw: f64 = rng.gen_range(0.0..360.0);
        if r - radius < 1.0 {
            continue;
        }
        let clear = placed
            .iter()
            .all(|(q, rq)| (pos[0] - q[0]).hypot(pos[1] - q[1]) >= radius + rq + config.min_gap);
        if !clear {
            continue;
        }
        placed.push((pos, radius));
        objects.push(ObjectSpec {
            id: objects.len() as u32 + 1,
            shape,
            position: [(pos[0] * 1000.0).round() / 1000.0, (pos[1] * 1000.0).round() / 1000.0],
            size: size.map(|v| (v * 1000.0).round() / 1000.0),
            yaw_deg: yaw.round(),
            base_z: None,
            dropout: Vec::new(),
        });
    }
    let grade = |rng: &mut ChaCha8Rng| {
        if config.max_grade > 0.0 {
            (rng.gen_range(-config.max_grade..config.max_grade) * 1000.0).round() / 1000.0
        } else {
            0.0
        }
    };
    SceneSpec {
        name: format!("random scene {seed}"),
        sensor: SensorSpec::default(),
        ground: GroundSpec {
            grade_x: grade(&mut rng),
            grade_y: grade(&mut rng),
            ..GroundSpec::default()
        },
        noise: NoiseSpec {
            sigma: config.sigma,
            seed,
        },
        objects,
    }
}
