//! Procedural road scenes: ground-truth polyline maps, label rasters, a
//! LiDAR sweep whose ground returns stop at a configurable range, and a
//! ray-cast camera image with dense depth over the full BEV extent.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bev::{BevConfig, Mask};
use crate::btf;
use crate::camera::{CameraModel, DepthImage, Density, NO_DEPTH};
use crate::error::{BevError, Result};
use crate::fusion::DIRECTION_CLASSES;
use crate::io;
use crate::losses::NO_LANE;
use crate::map::{resample_indexed, MapClass, MapInstance, PolylineMap};
use crate::metrics::clip_polyline;
use crate::planner::{build_costmap, CostMap, RobotState};
use crate::tensor::Tensor;
use crate::vectorize::direction_class;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Road {
    Straight,
    /// Constant curvature; positive radius bends left.
    Curve { radius: f64 },
    /// Straight, then an arc turning by `angle_deg` (positive left), then
    /// straight again.
    Turn {
        angle_deg: f64,
        #[serde(default = "default_turn_start")]
        start: f64,
        #[serde(default = "default_turn_radius")]
        radius: f64,
    },
}

fn default_turn_start() -> f64 {
    35.0
}

fn default_turn_radius() -> f64 {
    12.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LidarSpec {
    /// Farthest ground return, meters.
    pub max_ground_range: f64,
    pub beam_count: usize,
    pub azimuth_step_deg: f64,
    pub sensor_height: f64,
}

impl Default for LidarSpec {
    fn default() -> Self {
        LidarSpec {
            max_ground_range: 30.0,
            beam_count: 32,
            azimuth_step_deg: 1.0,
            sensor_height: 1.8,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    pub dropout_prob: f64,
    /// Range noise standard deviation at 10 m; the noise itself is Gaussian
    /// in inverse depth.
    pub depth_sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub seed: u64,
    pub road: Road,
    pub lane_count: usize,
    pub lane_width: f64,
    /// Arc-length positions of pedestrian crossings, meters.
    pub crossing_positions: Vec<f64>,
    pub lidar: LidarSpec,
    pub noise: NoiseSpec,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            road: Road::Straight,
            lane_count: 2,
            lane_width: 3.5,
            crossing_positions: Vec::new(),
            lidar: LidarSpec::default(),
            noise: NoiseSpec::default(),
        }
    }
}

/// Width of a pedestrian crossing along the road.
pub const CROSSING_WIDTH: f64 = 4.0;
/// Instances shorter than this after clipping are dropped.
pub const MIN_INSTANCE_LENGTH: f64 = 3.0;
const CURB_HEIGHT: f64 = 0.15;
const CENTERLINE_STEP: f64 = 0.25;
const CENTERLINE_LENGTH: f64 = 140.0;

impl SceneSpec {
    pub fn half_width(&self) -> f64 {
        self.lane_count as f64 * self.lane_width / 2.0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(BevError::Spec(m));
        if !(self.lane_width > 0.0) || self.lane_count == 0 {
            return bad(format!("{} lanes of {} m", self.lane_count, self.lane_width));
        }
        let l = &self.lidar;
        if !(l.max_ground_range > 2.0 && l.max_ground_range <= 90.0)
            || l.beam_count == 0
            || !(l.azimuth_step_deg > 0.0)
            || !(l.sensor_height > 0.0)
        {
            return bad(format!("invalid lidar spec {l:?}"));
        }
        let n = &self.noise;
        if !(0.0..=1.0).contains(&n.dropout_prob) || !(n.depth_sigma >= 0.0) {
            return bad(format!("invalid noise spec {n:?}"));
        }
        let hw = self.half_width();
        match self.road {
            Road::Straight => {}
            Road::Curve { radius } => {
                if !(radius.abs() > hw + 1.0) {
                    return bad(format!("curve radius {radius} too tight for a {hw} m half width"));
                }
            }
            Road::Turn {
                angle_deg,
                start,
                radius,
            } => {
                if !(radius > hw + 1.0) || !(angle_deg.abs() <= 180.0) || !(start >= 0.0) {
                    return bad(format!("invalid turn {angle_deg} deg at {start} m, radius {radius}"));
                }
            }
        }
        if self.crossing_positions.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return bad("crossing positions must be nonnegative".into());
        }
        Ok(())
    }
}

/// Pose along the road centerline.
#[derive(Clone, Copy, Debug)]
struct Pose {
    p: [f64; 2],
    h: f64,
}

impl Pose {
    fn offset(&self, d: f64) -> [f64; 2] {
        [self.p[0] - d * self.h.sin(), self.p[1] + d * self.h.cos()]
    }
}

fn centerline_pose(road: &Road, s: f64) -> Pose {
    match *road {
        Road::Straight => Pose { p: [s, 0.0], h: 0.0 },
        Road::Curve { radius } => {
            let phi = s / radius;
            Pose {
                p: [radius * phi.sin(), radius * (1.0 - phi.cos())],
                h: phi,
            }
        }
        Road::Turn {
            angle_deg,
            start,
            radius,
        } => {
            let theta = angle_deg.to_radians();
            let sign = if theta < 0.0 { -1.0 } else { 1.0 };
            let arc = radius * theta.abs();
            if s <= start {
                Pose { p: [s, 0.0], h: 0.0 }
            } else if s <= start + arc {
                let phi = (s - start) / radius;
                Pose {
                    p: [start + radius * phi.sin(), sign * radius * (1.0 - phi.cos())],
                    h: sign * phi,
                }
            } else {
                let end = [start + radius * theta.abs().sin(), sign * radius * (1.0 - theta.cos())];
                let t = s - start - arc;
                Pose {
                    p: [end[0] + t * theta.cos(), end[1] + t * theta.sin()],
                    h: theta,
                }
            }
        }
    }
}

fn centerline(road: &Road) -> Vec<Pose> {
    let n = (CENTERLINE_LENGTH / CENTERLINE_STEP) as usize;
    (0..=n).map(|i| centerline_pose(road, i as f64 * CENTERLINE_STEP)).collect()
}

/// Signed lateral offset of a point from the nearest centerline pose.
fn lateral_offset(line: &[Pose], x: f64, y: f64) -> f64 {
    let mut best = (f64::INFINITY, 0.0);
    for pose in line {
        let d2 = (x - pose.p[0]).powi(2) + (y - pose.p[1]).powi(2);
        if d2 < best.0 {
            let lat = -(x - pose.p[0]) * pose.h.sin() + (y - pose.p[1]) * pose.h.cos();
            best = (d2, lat);
        }
    }
    best.1
}

/// Polyline vertices with the analytic heading at each vertex.
#[derive(Clone, Debug)]
struct Curve {
    points: Vec<[f64; 2]>,
    headings: Vec<f64>,
}

/// Splits a dense curve into its in-grid runs, keeping every other sample.
fn clip_to_grid(points: &[[f64; 2]], headings: &[f64], bev: &BevConfig) -> Vec<Curve> {
    let inside = |p: &[f64; 2]| p[0] >= bev.x_min && p[0] < bev.x_max && p[1] >= bev.y_min && p[1] < bev.y_max;
    let mut runs: Vec<Vec<usize>> = Vec::new();
    let mut cur = Vec::new();
    for (i, p) in points.iter().enumerate() {
        if inside(p) {
            cur.push(i);
        } else if !cur.is_empty() {
            runs.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        runs.push(cur);
    }
    runs.into_iter()
        .filter_map(|run| {
            let mut keep: Vec<usize> = run.iter().copied().step_by(2).collect();
            if keep.last() != run.last() {
                keep.push(*run.last().unwrap());
            }
            let c = Curve {
                points: keep.iter().map(|&i| points[i]).collect(),
                headings: keep.iter().map(|&i| headings[i]).collect(),
            };
            (crate::map::polyline_length(&c.points) >= MIN_INSTANCE_LENGTH).then_some(c)
        })
        .collect()
}

/// Ground-truth map elements with per-vertex headings, in instance order.
fn map_elements(spec: &SceneSpec, bev: &BevConfig) -> Vec<(MapClass, Curve)> {
    let line = centerline(&spec.road);
    let headings: Vec<f64> = line.iter().map(|p| p.h).collect();
    let hw = spec.half_width();
    let along = |d: f64| -> Vec<[f64; 2]> { line.iter().map(|p| p.offset(d)).collect() };
    let mut out = Vec::new();
    for d in [-hw, hw] {
        for c in clip_to_grid(&along(d), &headings, bev) {
            out.push((MapClass::Boundary, c));
        }
    }
    for k in 1..spec.lane_count {
        let d = -hw + k as f64 * spec.lane_width;
        for c in clip_to_grid(&along(d), &headings, bev) {
            out.push((MapClass::Divider, c));
        }
    }
    for &s0 in &spec.crossing_positions {
        for s in [s0, s0 + CROSSING_WIDTH] {
            let pose = centerline_pose(&spec.road, s);
            let n = (2.0 * hw / CENTERLINE_STEP).round() as usize;
            let pts: Vec<[f64; 2]> = (0..=n).map(|i| pose.offset(-hw + i as f64 * CENTERLINE_STEP)).collect();
            let hs = vec![pose.h + std::f64::consts::FRAC_PI_2; pts.len()];
            for c in clip_to_grid(&pts, &hs, bev) {
                out.push((MapClass::Crossing, c));
            }
        }
    }
    out
}

/// Per-cell supervision rasters, all `rows × cols`.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneLabels {
    /// 0 background, then element classes in [`MapClass::ELEMENTS`] order.
    pub seg: Tensor,
    /// Index of the owning map instance plus one; 0 for background.
    pub instance: Tensor,
    /// Direction class, or [`NO_LANE`].
    pub direction: Tensor,
}

impl SceneLabels {
    /// Binary raster of one element class.
    pub fn class_mask(&self, class: MapClass) -> Mask {
        let (h, w) = self.seg.dims2().expect("label rasters are 2-D");
        let ch = class.seg_index().map_or(f32::NAN, |i| i as f32);
        let mut m = Mask::new(h, w);
        for (i, &v) in self.seg.data().iter().enumerate() {
            m.data[i] = v == ch;
        }
        m
    }

    pub fn masks(&self) -> [Mask; 3] {
        MapClass::ELEMENTS.map(|c| self.class_mask(c))
    }
}

fn rasterize_labels(elements: &[(MapClass, Curve)], bev: &BevConfig) -> SceneLabels {
    let (rows, cols) = (bev.rows(), bev.cols());
    let mut seg = vec![0.0f32; rows * cols];
    let mut inst = vec![0.0f32; rows * cols];
    let mut dir = vec![NO_LANE; rows * cols];
    for class in MapClass::ELEMENTS {
        for (id, (c, curve)) in elements.iter().enumerate() {
            if *c != class {
                continue;
            }
            let pts = &curve.points;
            for (p, seg_i) in resample_indexed(pts, bev.resolution * 0.25) {
                let Some((r, col)) = bev.cell_of(p[0], p[1]) else { continue };
                let i = r * cols + col;
                if seg[i] != 0.0 {
                    continue;
                }
                let (a, b) = (pts[seg_i], pts[(seg_i + 1).min(pts.len() - 1)]);
                let near_b = (p[0] - b[0]).hypot(p[1] - b[1]) < (p[0] - a[0]).hypot(p[1] - a[1]);
                let h = curve.headings[if near_b { (seg_i + 1).min(pts.len() - 1) } else { seg_i }];
                seg[i] = class.seg_index().unwrap() as f32;
                inst[i] = (id + 1) as f32;
                dir[i] = direction_class(h) as f32;
            }
        }
    }
    let t = |v| Tensor::new(vec![rows, cols], v).expect("grid-sized raster");
    SceneLabels {
        seg: t(seg),
        instance: t(inst),
        direction: t(dir),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    pub gt_map: PolylineMap,
    pub cloud: Vec<[f32; 3]>,
    /// `image_h × image_w × 3`, values in `[0, 1]`.
    pub image: Tensor,
    /// Camera depth from ray-casting the ground plane.
    pub depth: DepthImage,
    pub labels: SceneLabels,
    /// Cells on the road surface.
    pub road: Mask,
    pub start: RobotState,
}

fn road_mask(line: &[Pose], hw: f64, bev: &BevConfig) -> Mask {
    let mut m = Mask::for_grid(bev);
    for r in 0..bev.rows() {
        for c in 0..bev.cols() {
            let (x, y) = bev.center(r, c);
            if lateral_offset(line, x, y).abs() <= hw {
                m.set(r, c);
            }
        }
    }
    m
}

fn lidar_sweep(spec: &SceneSpec, line: &[Pose], rng: &mut ChaCha8Rng) -> Vec<[f32; 3]> {
    let l = &spec.lidar;
    let h = l.sensor_height;
    let hw = spec.half_width();
    let r_min = 3.0f64.min(l.max_ground_range);
    let (e_hi, e_lo) = ((h / r_min).atan(), (h / l.max_ground_range).atan());
    let n_az = (120.0 / l.azimuth_step_deg).floor() as usize;
    let inv_sigma = spec.noise.depth_sigma / 100.0;
    let noise = Normal::new(0.0, inv_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let mut cloud = Vec::new();
    for k in 0..l.beam_count {
        let f = if l.beam_count == 1 { 1.0 } else { k as f64 / (l.beam_count - 1) as f64 };
        let elev = e_hi + f * (e_lo - e_hi);
        let ground = h / elev.tan();
        for a in 0..=n_az {
            let az = (-60.0 + a as f64 * l.azimuth_step_deg).to_radians();
            let (x, y) = (ground * az.cos(), ground * az.sin());
            let z = if lateral_offset(line, x, y).abs() > hw { CURB_HEIGHT } else { 0.0 };
            // Draw both variates for every return so the sequence is stable.
            let drop = rng.random::<f64>() < spec.noise.dropout_prob;
            let eps = noise.sample(rng);
            if drop {
                continue;
            }
            let d = [x, y, z - h];
            let range = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            let noisy = if inv_sigma > 0.0 {
                1.0 / (1.0 / range + eps).max(1.0 / 200.0)
            } else {
                range
            };
            let s = noisy / range;
            cloud.push([(d[0] * s) as f32, (d[1] * s) as f32, (h + d[2] * s) as f32]);
        }
    }
    cloud
}

const SKY: [f32; 3] = [0.55, 0.7, 0.9];
const ROAD: [f32; 3] = [0.35, 0.35, 0.35];
const SIDEWALK: [f32; 3] = [0.6, 0.58, 0.52];
const MARKING: [f32; 3] = [0.95, 0.95, 0.9];

fn render_camera(cam: &CameraModel, bev: &BevConfig, labels: &SceneLabels, road: &Mask) -> (Tensor, DepthImage) {
    let (w, h) = (cam.image_w, cam.image_h);
    let origin = cam.camera_to_lidar([0.0, 0.0, 0.0]);
    let mut depth = DepthImage::empty(w, h, Density::Dense);
    let mut rgb = vec![0.0f32; w * h * 3];
    for v in 0..h {
        for u in 0..w {
            let p1 = cam.unproject(u as f64, v as f64, 1.0);
            let dz = p1[2] - origin[2];
            let mut color = SKY;
            if dz < 0.0 {
                let t = -origin[2] / dz;
                let g = [origin[0] + t * (p1[0] - origin[0]), origin[1] + t * (p1[1] - origin[1])];
                if g[0] >= bev.x_min && g[0] <= bev.x_max {
                    depth.values[v * w + u] = t as f32;
                }
                color = match bev.cell_of(g[0], g[1]) {
                    Some((r, c)) if labels.seg.data()[r * bev.cols() + c] > 0.0 => MARKING,
                    Some((r, c)) if road.get(r, c) => ROAD,
                    _ if g[0] > bev.x_max => ROAD,
                    _ => SIDEWALK,
                };
            }
            rgb[(v * w + u) * 3..][..3].copy_from_slice(&color);
        }
    }
    debug_assert!(depth.values.iter().all(|&d| d == NO_DEPTH || d > 0.0));
    (Tensor::new(vec![h, w, 3], rgb).expect("image-sized buffer"), depth)
}

/// Right-most lane center at arc length `s`.
fn lane_pose(spec: &SceneSpec, s: f64) -> Pose {
    let pose = centerline_pose(&spec.road, s);
    let d = -spec.half_width() + spec.lane_width / 2.0;
    Pose {
        p: pose.offset(d),
        h: pose.h,
    }
}

/// Deterministic scene for a spec on a given grid and camera.
pub fn gen_scene(spec: &SceneSpec, bev: &BevConfig, cam: &CameraModel) -> Result<Scene> {
    spec.validate()?;
    bev.validate()?;
    cam.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let line = centerline(&spec.road);
    let elements = map_elements(spec, bev);
    let labels = rasterize_labels(&elements, bev);
    let gt_map = PolylineMap {
        instances: elements
            .iter()
            .map(|(class, c)| MapInstance {
                class: *class,
                confidence: 1.0,
                points: c.points.clone(),
            })
            .collect(),
    };
    let road = road_mask(&line, spec.half_width(), bev);
    let cloud = lidar_sweep(spec, &line, &mut rng);
    let (image, depth) = render_camera(cam, bev, &labels, &road);
    let sp = lane_pose(spec, 1.0);
    Ok(Scene {
        spec: spec.clone(),
        gt_map,
        cloud,
        image,
        depth,
        labels,
        road,
        start: RobotState::at(sp.p[0], sp.p[1], sp.h),
    })
}

/// File names inside a scene directory.
pub mod files {
    pub const SPEC: &str = "scene.json";
    pub const GT_MAP: &str = "gt_map.json";
    pub const CLOUD: &str = "cloud.pc3f";
    pub const IMAGE: &str = "image.btf";
    pub const DEPTH: &str = "depth.btf";
    pub const SEG: &str = "seg.btf";
    pub const INSTANCE: &str = "instance.btf";
    pub const DIRECTION: &str = "direction.btf";
}

impl Scene {
    pub fn write(&self, dir: &Path) -> Result<()> {
        io::write_json(&dir.join(files::SPEC), &self.spec)?;
        self.gt_map.write(&dir.join(files::GT_MAP))?;
        io::write_cloud(&dir.join(files::CLOUD), &self.cloud)?;
        btf::write(&dir.join(files::IMAGE), &self.image)?;
        btf::write(&dir.join(files::DEPTH), &self.depth.to_tensor())?;
        btf::write(&dir.join(files::SEG), &self.labels.seg)?;
        btf::write(&dir.join(files::INSTANCE), &self.labels.instance)?;
        btf::write(&dir.join(files::DIRECTION), &self.labels.direction)
    }
}

/// A scene as read back from disk: everything the pipeline consumes.
#[derive(Clone, Debug)]
pub struct SceneFiles {
    pub spec: SceneSpec,
    pub gt_map: PolylineMap,
    pub cloud: Vec<[f32; 3]>,
    pub image: Tensor,
    pub depth: DepthImage,
    pub labels: SceneLabels,
}

impl SceneFiles {
    pub fn read(dir: &Path) -> Result<Self> {
        Ok(SceneFiles {
            spec: io::read_json(&dir.join(files::SPEC))?,
            gt_map: PolylineMap::read(&dir.join(files::GT_MAP))?,
            cloud: io::read_cloud(&dir.join(files::CLOUD))?,
            image: btf::read(&dir.join(files::IMAGE))?,
            depth: DepthImage::from_tensor(&btf::read(&dir.join(files::DEPTH))?, Density::Dense)?,
            labels: SceneLabels {
                seg: btf::read(&dir.join(files::SEG))?,
                instance: btf::read(&dir.join(files::INSTANCE))?,
                direction: btf::read(&dir.join(files::DIRECTION))?,
            },
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradeModel {
    /// Standard deviation of the per-instance lateral shift, cells.
    pub jitter_cells: f64,
    /// Cell dropout probability everywhere.
    pub dropout: f64,
    /// Forward distance beyond which dropout grows by `ramp` per meter.
    pub knee: Option<f64>,
    pub ramp: f64,
    /// Drop in foreground probability from the vehicle to the far edge.
    pub confidence_decay: f64,
    pub embed_sigma: f64,
}

impl Default for DegradeModel {
    fn default() -> Self {
        DegradeModel {
            jitter_cells: 0.0,
            dropout: 0.0,
            knee: None,
            ramp: 0.0,
            confidence_decay: 0.0,
            embed_sigma: 0.0,
        }
    }
}

impl DegradeModel {
    /// Perfect recall up to `knee`, then dropout ramping to 1 at `knee + 60`.
    pub fn range_knee(knee: f64) -> Self {
        DegradeModel {
            knee: Some(knee),
            ramp: 1.0 / 60.0,
            confidence_decay: 0.3,
            ..Self::default()
        }
    }
}

/// Head outputs synthesized from labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SimulatedHeads {
    pub seg_logits: Tensor,
    pub embeddings: Tensor,
    pub dir_logits: Tensor,
}

/// Spacing between instance embeddings.
pub const EMBED_SPACING: f32 = 10.0;
/// Logit of the labelled direction class.
pub const DIR_LOGIT: f32 = 10.0;
const EMBED_DIM: usize = 4;

fn logit_for(p: f64, classes: usize) -> f32 {
    (p * (classes - 1) as f64 / (1.0 - p)).ln() as f32
}

/// Turns label rasters into imperfect head outputs.
pub fn degrade_prediction(labels: &SceneLabels, model: &DegradeModel, bev: &BevConfig, seed: u64) -> Result<SimulatedHeads> {
    let (rows, cols) = labels.seg.dims2()?;
    if (rows, cols) != (bev.rows(), bev.cols()) {
        return Err(BevError::shape(format!("labels {rows}x{cols} for a {}x{} grid", bev.rows(), bev.cols())));
    }
    let k = MapClass::ELEMENTS.len() + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_inst = labels.instance.data().iter().fold(0.0f32, |a, &b| a.max(b)) as usize;
    let jitter = Normal::new(0.0, model.jitter_cells.max(f64::MIN_POSITIVE)).expect("finite jitter");
    let shifts: Vec<i64> = (0..=n_inst)
        .map(|_| {
            let j = jitter.sample(&mut rng);
            if model.jitter_cells > 0.0 {
                j.round() as i64
            } else {
                0
            }
        })
        .collect();
    let emb_noise = Normal::new(0.0, model.embed_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let bg = logit_for(0.99, k);
    let mut seg = vec![0.0f32; rows * cols * k];
    for px in seg.chunks_mut(k) {
        px[0] = bg;
    }
    let mut emb = vec![0.0f32; rows * cols * EMBED_DIM];
    let mut dir = vec![0.0f32; rows * cols * DIRECTION_CLASSES];
    let mut taken = vec![false; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            let class = labels.seg.data()[i] as usize;
            let u: f64 = rng.random();
            let noise: [f64; EMBED_DIM] = std::array::from_fn(|_| emb_noise.sample(&mut rng));
            if class == 0 {
                continue;
            }
            let x = bev.center(r, c).0;
            let far = model.knee.map_or(0.0, |kx| (x - kx).max(0.0) * model.ramp);
            if u < (model.dropout + far).min(1.0) {
                continue;
            }
            let id = labels.instance.data()[i] as usize;
            let rr = r as i64 + shifts[id];
            if rr < 0 || rr >= rows as i64 {
                continue;
            }
            let j = rr as usize * cols + c;
            if taken[j] {
                continue;
            }
            taken[j] = true;
            let p = (0.99 - model.confidence_decay * (x - bev.x_min) / (bev.x_max - bev.x_min)).clamp(0.55, 0.99);
            let px = &mut seg[j * k..][..k];
            px.fill(0.0);
            px[class] = logit_for(p, k);
            let e = &mut emb[j * EMBED_DIM..][..EMBED_DIM];
            e[0] = EMBED_SPACING * id as f32;
            for (v, n) in e.iter_mut().zip(noise) {
                if model.embed_sigma > 0.0 {
                    *v += n as f32;
                }
            }
            let d = labels.direction.data()[i];
            if d >= 0.0 {
                dir[j * DIRECTION_CLASSES + d as usize] = DIR_LOGIT;
            }
        }
    }
    Ok(SimulatedHeads {
        seg_logits: Tensor::new(vec![rows, cols, k], seg)?,
        embeddings: Tensor::new(vec![rows, cols, EMBED_DIM], emb)?,
        dir_logits: Tensor::new(vec![rows, cols, DIRECTION_CLASSES], dir)?,
    })
}

/// Keeps only the parts of a map with `x ≤ max_x`.
pub fn truncate_map(map: &PolylineMap, max_x: f64) -> PolylineMap {
    PolylineMap {
        instances: map
            .instances
            .iter()
            .flat_map(|inst| {
                clip_polyline(&inst.points, f64::NEG_INFINITY, max_x)
                    .into_iter()
                    .map(|points| MapInstance { points, ..inst.clone() })
            })
            .collect(),
    }
}

/// Seeded scene mix for batch experiments: straight, curved and turning
/// roads with two or three lanes and up to two crossings.
pub fn random_spec(seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed);
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let road = match seed % 3 {
        0 => Road::Straight,
        1 => Road::Curve {
            radius: sign * rng.random_range(80.0..300.0),
        },
        _ => Road::Turn {
            angle_deg: sign * rng.random_range(30.0..90.0),
            start: rng.random_range(30.0..60.0),
            radius: rng.random_range(12.0..20.0),
        },
    };
    let crossings = rng.random_range(0..3usize);
    let mut crossing_positions: Vec<f64> = (0..crossings).map(|_| rng.random_range(8.0..75.0)).collect();
    crossing_positions.sort_by(f64::total_cmp);
    crossing_positions.dedup_by(|a, b| *a - *b < 2.0 * CROSSING_WIDTH);
    SceneSpec {
        seed,
        road,
        lane_count: rng.random_range(2..4),
        crossing_positions,
        ..SceneSpec::default()
    }
}

/// A planning query on a generated road.
#[derive(Clone, Debug)]
pub struct PlanningCase {
    pub spec: SceneSpec,
    pub gt_map: PolylineMap,
    pub start: RobotState,
    pub goal: [f64; 2],
}

/// Straight segment from `a` to `b` keeps at least `SIGHT_CLEARANCE` from
/// every blocked cell.
fn in_sight(cm: &CostMap, a: [f64; 2], b: [f64; 2]) -> bool {
    let n = ((b[0] - a[0]).hypot(b[1] - a[1]) / 0.25).ceil() as usize;
    (0..=n).all(|i| {
        let t = i as f64 / n.max(1) as f64;
        cm.clearance_at(a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])) >= SIGHT_CLEARANCE
    })
}

const SIGHT_CLEARANCE: f64 = 0.5;

/// Mixed road suite: 3 in 10 turns, 3 in 10 curves, the rest straight.
/// Start and goal sit on the road centerline; goals lie at least 30 m
/// forward and in straight sight of the start.
pub fn planning_suite(n: usize, seed: u64, bev: &BevConfig) -> Result<Vec<PlanningCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::with_capacity(n);
    for i in 0..n {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let road = match i % 10 {
            0..=2 => Road::Turn {
                angle_deg: sign * rng.random_range(45.0..=90.0),
                start: rng.random_range(30.0..45.0),
                radius: rng.random_range(12.0..18.0),
            },
            3..=5 => Road::Curve {
                radius: sign * rng.random_range(120.0..300.0),
            },
            _ => Road::Straight,
        };
        let spec = SceneSpec {
            seed: seed.wrapping_mul(1000).wrapping_add(i as u64),
            road,
            ..SceneSpec::default()
        };
        spec.validate()?;
        let elements = map_elements(&spec, bev);
        let gt_map = PolylineMap {
            instances: elements
                .into_iter()
                .map(|(class, c)| MapInstance {
                    class,
                    confidence: 1.0,
                    points: c.points,
                })
                .collect(),
        };
        let cm = build_costmap(&gt_map, bev)?;
        let sp = centerline_pose(&spec.road, 1.0);
        let margin = 3.0;
        let mut goal = None;
        for _ in 0..1000 {
            let s = rng.random_range(30.0..100.0);
            let p = centerline_pose(&spec.road, s).p;
            let ok = p[0] >= 30.0
                && p[0] <= bev.x_max - margin
                && p[1] >= bev.y_min + margin
                && p[1] <= bev.y_max - margin
                && in_sight(&cm, sp.p, p);
            if ok {
                goal = Some(p);
                break;
            }
        }
        let goal = goal.ok_or_else(|| BevError::Spec(format!("no goal on road {:?}", spec.road)))?;
        cases.push(PlanningCase {
            spec,
            gt_map,
            start: RobotState::at(sp.p[0], sp.p[1], sp.h),
            goal,
        });
    }
    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::rasterize_class;

    fn toy(spec: &SceneSpec) -> Scene {
        gen_scene(spec, &BevConfig::toy(), &CameraModel::toy()).unwrap()
    }

    #[test]
    fn straight_two_lane_road() {
        let s = toy(&SceneSpec::default());
        assert_eq!(s.gt_map.count(MapClass::Boundary), 2);
        assert_eq!(s.gt_map.count(MapClass::Divider), 1);
        for inst in &s.gt_map.instances {
            assert!(inst.length() > 89.0, "{}", inst.length());
        }
        s.gt_map.validate().unwrap();
    }

    #[test]
    fn turn_sweeps_direction_classes() {
        let spec = SceneSpec {
            road: Road::Turn {
                angle_deg: 90.0,
                start: 30.0,
                radius: 12.0,
            },
            lane_count: 1,
            ..SceneSpec::default()
        };
        let s = toy(&spec);
        let mut classes: Vec<i32> = s.labels.direction.data().iter().filter(|&&d| d >= 0.0).map(|&d| d as i32).collect();
        classes.sort();
        classes.dedup();
        assert_eq!(classes, (0..=9).collect::<Vec<_>>());
    }

    #[test]
    fn same_seed_same_scene() {
        let spec = SceneSpec {
            seed: 7,
            noise: NoiseSpec {
                dropout_prob: 0.2,
                depth_sigma: 0.5,
            },
            crossing_positions: vec![20.0],
            ..SceneSpec::default()
        };
        assert_eq!(toy(&spec), toy(&spec));
        let other = SceneSpec { seed: 8, ..spec.clone() };
        assert_ne!(toy(&spec).cloud, toy(&other).cloud);
    }

    #[test]
    fn lidar_ground_stops_at_range() {
        let s = toy(&SceneSpec::default());
        assert!(s.cloud.iter().all(|p| (p[0] as f64).hypot(p[1] as f64) <= 30.0 + 1e-3));
        let far = s.depth.values.iter().fold(0.0f32, |a, &b| a.max(b));
        assert!(far > 60.0, "camera sees to {far} m");
    }

    #[test]
    fn labels_match_map_rasterization() {
        let spec = SceneSpec {
            crossing_positions: vec![15.0, 50.0],
            road: Road::Curve { radius: 150.0 },
            ..SceneSpec::default()
        };
        let s = toy(&spec);
        let bev = BevConfig::toy();
        assert_eq!(s.labels.class_mask(MapClass::Boundary), rasterize_class(&s.gt_map, MapClass::Boundary, &bev));
        for (i, &seg) in s.labels.seg.data().iter().enumerate() {
            assert_eq!(seg > 0.0, s.labels.instance.data()[i] > 0.0);
            assert_eq!(seg > 0.0, s.labels.direction.data()[i] >= 0.0);
        }
        let mut covered = s.labels.class_mask(MapClass::Divider);
        covered.union_with(&s.labels.class_mask(MapClass::Boundary));
        let div = rasterize_class(&s.gt_map, MapClass::Divider, &bev);
        assert_eq!(div.overlap(&covered).0, div.count());
        assert_eq!(s.gt_map.count(MapClass::Crossing), 4);
    }

    #[test]
    fn invalid_specs() {
        let bad = [
            SceneSpec { lane_width: 0.0, ..SceneSpec::default() },
            SceneSpec { road: Road::Curve { radius: 2.0 }, ..SceneSpec::default() },
            SceneSpec {
                lidar: LidarSpec { max_ground_range: 120.0, ..LidarSpec::default() },
                ..SceneSpec::default()
            },
        ];
        for spec in bad {
            assert!(matches!(spec.validate(), Err(BevError::Spec(_))));
        }
    }

    #[test]
    fn full_dropout_empties_prediction() {
        let s = toy(&SceneSpec::default());
        let model = DegradeModel { dropout: 1.0, ..DegradeModel::default() };
        let h = degrade_prediction(&s.labels, &model, &BevConfig::toy(), 1).unwrap();
        assert!(h.dir_logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = SceneSpec {
            road: Road::Turn {
                angle_deg: -60.0,
                start: 40.0,
                radius: 15.0,
            },
            ..SceneSpec::default()
        };
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<SceneSpec>(&text).unwrap(), spec);
        let minimal: SceneSpec = serde_json::from_str(r#"{"road":{"kind":"turn","angle_deg":90}}"#).unwrap();
        assert_eq!(minimal.road, Road::Turn { angle_deg: 90.0, start: 35.0, radius: 12.0 });
    }

    fn vectorize_heads(h: &SimulatedHeads, bev: &BevConfig) -> PolylineMap {
        let probs = crate::tensor::softmax_lastdim(&h.seg_logits);
        crate::vectorize::vectorize_map(&probs, &h.embeddings, &h.dir_logits, bev, &Default::default()).unwrap()
    }

    #[test]
    fn zero_noise_degrade_vectorizes_to_gt() {
        let bev = BevConfig::toy();
        for seed in 0..6 {
            let s = toy(&random_spec(seed));
            let h = degrade_prediction(&s.labels, &DegradeModel::default(), &bev, seed).unwrap();
            let pred = vectorize_heads(&h, &bev);
            for class in MapClass::ELEMENTS {
                assert_eq!(pred.count(class), s.gt_map.count(class), "seed {seed} {class:?}");
                for p in pred.of_class(class) {
                    let cd = s
                        .gt_map
                        .of_class(class)
                        .filter_map(|g| crate::metrics::chamfer_pred(&p.points, &g.points))
                        .fold(f64::INFINITY, f64::min);
                    assert!(cd < bev.resolution, "seed {seed} {class:?} cd {cd}");
                }
            }
        }
    }

    #[test]
    fn range_knee_degrades_far_intervals() {
        let bev = BevConfig::toy();
        let s = toy(&SceneSpec::default());
        let h = degrade_prediction(&s.labels, &DegradeModel::range_knee(30.0), &bev, 3).unwrap();
        let kept: Vec<usize> = [0.0, 30.0, 60.0]
            .iter()
            .map(|&lo| {
                (0..bev.rows() * bev.cols())
                    .filter(|&i| {
                        let x = bev.center(0, i % bev.cols()).0;
                        x >= lo && x < lo + 30.0 && h.dir_logits.data()[i * DIRECTION_CLASSES..][..DIRECTION_CLASSES].iter().any(|&v| v > 0.0)
                    })
                    .count()
            })
            .collect();
        assert!(kept[0] > kept[1] && kept[1] > kept[2], "{kept:?}");
    }

    #[test]
    fn planning_suite_is_seeded() {
        let bev = BevConfig::toy();
        let a = planning_suite(10, 4, &bev).unwrap();
        let b = planning_suite(10, 4, &bev).unwrap();
        assert_eq!(a.len(), 10);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.gt_map, y.gt_map);
            assert_eq!(x.goal, y.goal);
            assert!(x.goal[0] >= 30.0);
        }
        let t = truncate_map(&a[0].gt_map, 30.0);
        assert!(t.instances.iter().flat_map(|i| &i.points).all(|p| p[0] <= 30.0 + 1e-9));
    }
}
