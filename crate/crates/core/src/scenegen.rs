//! Synthetic scenes: seeded object placement, a bird's-eye Lidar ray sweep
//! with depth-ordered occlusion, difficulty tags, the oracle detector, and
//! the on-disk dataset layout.
//!
//! World frame: ground plane at `z = 0`, yaw counter-clockwise from `+x`.
//! The vehicle frame is the world frame translated by the vehicle sensor
//! position. Infrastructure clouds are stored in their own sensor frames,
//! defined as the preimage of [`transform_point_to_vehicle`], so that
//! transforming them into the vehicle frame lands every point back on its
//! world surface.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    bev_intersection_area, transform_cloud, transform_point_to_infra, Box3D, GeometryError, LidarPoint, ObjectClass,
    PointCloud, Pose, Vec3,
};
use crate::rng::{derive_seed, SeededRng};
use crate::rpn::Detection;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene config: {0}")]
    Config(String),
    #[error("frame {frame}: placed {placed} of {wanted} objects after {retries} attempts")]
    Placement { frame: u32, placed: usize, wanted: usize, retries: usize },
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn default_car_probability() -> f64 {
    0.8
}
fn default_resolution() -> f64 {
    0.2
}
fn default_vertical_step() -> f64 {
    0.25
}
fn default_max_range() -> f64 {
    100.0
}
fn default_ground_spacing() -> f64 {
    6.0
}
fn default_ground_range() -> f64 {
    40.0
}
fn default_clearance() -> f64 {
    4.0
}
fn default_retries() -> usize {
    2000
}
fn default_max_objects() -> usize {
    60
}

/// Scene layout and sensor parameters. Poses are `[x, y, z, yaw]`; obstacle
/// boxes are `[cx, cy, cz, w, l, h, yaw]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub name: String,
    /// Objects are placed with centers in `[-x, x] x [-y, y]` around the
    /// vehicle.
    pub extent: [f64; 2],
    pub vehicle: [f64; 4],
    pub infrastructures: Vec<[f64; 4]>,
    #[serde(default)]
    pub obstacles: Vec<[f64; 7]>,
    /// Inclusive range of vehicles per frame.
    pub vehicles: [usize; 2],
    #[serde(default)]
    pub pedestrians: [usize; 2],
    #[serde(default = "default_max_objects")]
    pub max_objects: usize,
    #[serde(default = "default_car_probability")]
    pub car_probability: f64,
    /// Degrees between adjacent rays.
    #[serde(default = "default_resolution")]
    pub angular_resolution: f64,
    #[serde(default = "default_vertical_step")]
    pub vertical_step: f64,
    #[serde(default = "default_max_range")]
    pub max_range: f64,
    #[serde(default = "default_ground_spacing")]
    pub ground_spacing: f64,
    #[serde(default = "default_ground_range")]
    pub ground_range: f64,
    /// Minimum distance from any sensor to any object footprint.
    #[serde(default = "default_clearance")]
    pub clearance: f64,
    #[serde(default = "default_retries")]
    pub placement_retries: usize,
}

impl SceneConfig {
    /// Four-way roundabout with three roadside units.
    pub fn roundabout() -> Self {
        Self {
            name: "roundabout".into(),
            extent: [38.0, 34.0],
            vehicle: [0.0, 0.0, 1.73, 0.0],
            infrastructures: vec![[-22.0, 20.0, 2.0, -0.7], [24.0, 18.0, 2.0, -2.4], [0.0, -30.0, 2.0, 1.57]],
            obstacles: vec![[0.0, 14.0, 0.5, 6.0, 6.0, 1.0, 0.0]],
            vehicles: [15, 35],
            pedestrians: [0, 8],
            ..Self::base()
        }
    }

    /// T-junction with two roadside units.
    pub fn t_junction() -> Self {
        Self {
            name: "t_junction".into(),
            extent: [38.0, 34.0],
            vehicle: [0.0, 0.0, 1.73, 0.0],
            infrastructures: vec![[-20.0, 16.0, 2.0, -0.6], [22.0, 14.0, 2.0, -2.5]],
            obstacles: vec![[-20.0, -22.0, 4.0, 14.0, 24.0, 8.0, 0.0], [20.0, -22.0, 4.0, 14.0, 24.0, 8.0, 0.0]],
            vehicles: [15, 35],
            pedestrians: [0, 8],
            ..Self::base()
        }
    }

    /// Dense traffic between building blocks; the vehicle's own view is
    /// blocked in most directions.
    pub fn occlusion_heavy() -> Self {
        Self {
            name: "occlusion_heavy".into(),
            extent: [38.0, 34.0],
            vehicle: [0.0, 0.0, 1.73, 0.0],
            infrastructures: vec![[-30.0, 26.0, 2.0, -0.7], [30.0, 24.0, 2.0, -2.4], [2.0, -30.0, 2.0, 1.5]],
            obstacles: vec![
                [-14.0, 12.0, 4.0, 8.0, 8.0, 8.0, 0.0],
                [14.0, 12.0, 4.0, 8.0, 8.0, 8.0, 0.0],
                [-14.0, -12.0, 4.0, 8.0, 8.0, 8.0, 0.0],
                [14.0, -12.0, 4.0, 8.0, 8.0, 8.0, 0.0],
            ],
            vehicles: [35, 50],
            pedestrians: [0, 10],
            ..Self::base()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "roundabout" => Some(Self::roundabout()),
            "t_junction" => Some(Self::t_junction()),
            "occlusion_heavy" => Some(Self::occlusion_heavy()),
            _ => None,
        }
    }

    fn base() -> Self {
        Self {
            name: String::new(),
            extent: [38.0, 34.0],
            vehicle: [0.0, 0.0, 1.73, 0.0],
            infrastructures: Vec::new(),
            obstacles: Vec::new(),
            vehicles: [0, 0],
            pedestrians: [0, 0],
            max_objects: default_max_objects(),
            car_probability: default_car_probability(),
            angular_resolution: default_resolution(),
            vertical_step: default_vertical_step(),
            max_range: default_max_range(),
            ground_spacing: default_ground_spacing(),
            ground_range: default_ground_range(),
            clearance: default_clearance(),
            placement_retries: default_retries(),
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: String| Err(SceneError::Config(m));
        if !(self.extent[0] > 0.0 && self.extent[1] > 0.0) {
            return bad(format!("extent must be positive, got {:?}", self.extent));
        }
        if self.vehicles[0] > self.vehicles[1] || self.pedestrians[0] > self.pedestrians[1] {
            return bad("object count ranges must be [min, max] with min <= max".into());
        }
        if self.vehicles[1] + self.pedestrians[1] > self.max_objects {
            return bad(format!(
                "up to {} vehicles and {} pedestrians exceed max_objects = {}",
                self.vehicles[1], self.pedestrians[1], self.max_objects
            ));
        }
        if !(0.0..=1.0).contains(&self.car_probability) {
            return bad(format!("car_probability {} outside [0, 1]", self.car_probability));
        }
        if !(self.angular_resolution > 0.0 && self.angular_resolution <= 90.0) {
            return bad(format!("angular_resolution {} outside (0, 90]", self.angular_resolution));
        }
        for (name, v) in [
            ("vertical_step", self.vertical_step),
            ("max_range", self.max_range),
            ("ground_spacing", self.ground_spacing),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.infrastructures.len() > u16::MAX as usize - 1 {
            return bad("too many infrastructures".into());
        }
        for o in &self.obstacles {
            obstacle_box(o).validate()?;
        }
        Ok(())
    }

    pub fn vehicle_pose(&self) -> Pose {
        pose_of(&self.vehicle)
    }

    pub fn infrastructure_poses(&self) -> Vec<Pose> {
        self.infrastructures.iter().map(pose_of).collect()
    }

    pub fn obstacle_boxes(&self) -> Vec<Box3D> {
        self.obstacles.iter().map(obstacle_box).collect()
    }
}

fn pose_of(p: &[f64; 4]) -> Pose {
    Pose::new([p[0], p[1], p[2]], p[3])
}

fn obstacle_box(o: &[f64; 7]) -> Box3D {
    Box3D { center: [o[0], o[1], o[2]], w: o[3], l: o[4], h: o[5], yaw: o[6] }
}

/// One ground-truth object in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneObject {
    pub id: u32,
    pub class: ObjectClass,
    pub bbox: Box3D,
}

/// Returns of one object seen from one sensor.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Visibility {
    pub points: u32,
    /// Rays whose nearest hit is this object.
    pub hit_rays: u32,
    /// Rays that cross the object within range, occluded or not.
    pub span_rays: u32,
}

impl Visibility {
    /// Fraction of the silhouette hidden behind nearer surfaces. An object
    /// no ray reaches counts as fully occluded.
    pub fn occlusion(&self) -> f64 {
        if self.span_rays == 0 {
            1.0
        } else {
            1.0 - f64::from(self.hit_rays) / f64::from(self.span_rays)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorCapture {
    /// World pose.
    pub pose: Pose,
    /// Returns in the sensor's own frame.
    pub cloud: PointCloud,
    /// Indexed like [`SceneFrame::objects`].
    pub visibility: Vec<Visibility>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Occlusion {
    Easy,
    Moderate,
    Hard,
}

impl Occlusion {
    pub const ALL: [Occlusion; 3] = [Occlusion::Easy, Occlusion::Moderate, Occlusion::Hard];

    pub fn name(self) -> &'static str {
        match self {
            Occlusion::Easy => "Easy",
            Occlusion::Moderate => "Moderate",
            Occlusion::Hard => "Hard",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RangeClass {
    Near,
    Far,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DifficultyTag {
    pub occlusion: Occlusion,
    pub range: RangeClass,
}

pub const NEAR_RANGE: f64 = 20.0;

impl DifficultyTag {
    /// Easy below 33 % occlusion, hard above 67 %, moderate in between;
    /// near up to and including 20 m.
    pub fn classify(occlusion: f64, distance: f64) -> Self {
        let occlusion = if occlusion < 0.33 {
            Occlusion::Easy
        } else if occlusion <= 0.67 {
            Occlusion::Moderate
        } else {
            Occlusion::Hard
        };
        let range = if distance <= NEAR_RANGE { RangeClass::Near } else { RangeClass::Far };
        Self { occlusion, range }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneFrame {
    pub id: u32,
    pub seed: u64,
    pub vehicle: SensorCapture,
    pub infrastructures: Vec<SensorCapture>,
    pub objects: Vec<SceneObject>,
    pub obstacles: Vec<Box3D>,
    /// One per object.
    pub tags: Vec<DifficultyTag>,
}

/// A labelled box in the vehicle frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub id: u32,
    pub bbox: Box3D,
    pub class: ObjectClass,
    pub tag: DifficultyTag,
}

impl SceneFrame {
    pub fn n_infrastructures(&self) -> usize {
        self.infrastructures.len()
    }

    /// Sensor `0` is the vehicle, `i + 1` infrastructure `i`.
    pub fn sensor(&self, s: usize) -> &SensorCapture {
        if s == 0 {
            &self.vehicle
        } else {
            &self.infrastructures[s - 1]
        }
    }

    pub fn to_vehicle_frame(&self, b: &Box3D) -> Box3D {
        let c = self.vehicle.pose.position;
        Box3D { center: [b.center[0] - c[0], b.center[1] - c[1], b.center[2] - c[2]], ..*b }
    }

    /// Ground truth of every object in the vehicle frame.
    pub fn ground_truth(&self) -> Vec<GroundTruth> {
        self.objects
            .iter()
            .zip(&self.tags)
            .map(|(o, &tag)| GroundTruth { id: o.id, bbox: self.to_vehicle_frame(&o.bbox), class: o.class, tag })
            .collect()
    }

    /// Infrastructure `i`'s cloud mapped into the vehicle frame.
    pub fn infrastructure_cloud_in_vehicle_frame(&self, i: usize) -> PointCloud {
        let infra = &self.infrastructures[i];
        transform_cloud(&infra.cloud, &infra.pose, &self.vehicle.pose)
    }

    /// Sum of returns on object `k` over the given sensors.
    pub fn union_points(&self, k: usize, sensors: &[usize]) -> u32 {
        sensors.iter().map(|&s| self.sensor(s).visibility[k].points).sum()
    }
}

/// Distance along a 2D ray to where it enters the box footprint, or `None`
/// if it misses, starts inside, or enters beyond `max_t`.
pub fn ray_box_entry(origin: [f64; 2], dir: [f64; 2], b: &Box3D, max_t: f64) -> Option<f64> {
    let (s, c) = b.yaw.sin_cos();
    let (dx, dy) = (origin[0] - b.center[0], origin[1] - b.center[1]);
    let o = [c * dx + s * dy, -s * dx + c * dy];
    let d = [c * dir[0] + s * dir[1], -s * dir[0] + c * dir[1]];
    let half = [0.5 * b.l, 0.5 * b.w];
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for k in 0..2 {
        if d[k].abs() < 1e-15 {
            if o[k].abs() > half[k] {
                return None;
            }
        } else {
            let a = (-half[k] - o[k]) / d[k];
            let z = (half[k] - o[k]) / d[k];
            t0 = t0.max(a.min(z));
            t1 = t1.min(a.max(z));
        }
    }
    (t0 <= t1 && t0 > 0.0 && t0 <= max_t).then_some(t0)
}

/// Sweep parameters of [`simulate_lidar`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarParams {
    /// Degrees between rays.
    pub resolution: f64,
    pub vertical_step: f64,
    pub max_range: f64,
    pub ground_spacing: f64,
    pub ground_range: f64,
}

impl LidarParams {
    pub fn from_config(c: &SceneConfig) -> Self {
        Self {
            resolution: c.angular_resolution,
            vertical_step: c.vertical_step,
            max_range: c.max_range,
            ground_spacing: c.ground_spacing,
            ground_range: c.ground_range,
        }
    }
}

/// World-frame returns of one sensor and per-object visibility.
#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub points: Vec<LidarPoint>,
    pub visibility: Vec<Visibility>,
}

fn vertical_samples(b: &Box3D, step: f64) -> impl Iterator<Item = f64> {
    let n = ((b.h / step).ceil() as usize).max(1);
    let (z0, dz) = (b.z_min(), b.h / n as f64);
    (0..n).map(move |k| z0 + (k as f64 + 0.5) * dz)
}

/// 360-degree bird's-eye ray sweep from `sensor` (world coordinates).
///
/// Each ray stops at the nearest object or obstacle footprint and returns
/// one point per vertical sample of that surface. Ground returns are placed
/// every `ground_spacing` meters before the first hit, out to
/// `ground_range`. Reflectance is uniform in `[0, 1]`.
pub fn simulate_lidar(objects: &[Box3D], obstacles: &[Box3D], sensor: [f64; 3], params: &LidarParams, seed: u64) -> Sweep {
    let n_rays = (360.0 / params.resolution).round().max(1.0) as usize;
    let mut rng = SeededRng::new(derive_seed(seed, "lidar", 0));
    let mut visibility = vec![Visibility::default(); objects.len()];
    let mut points = Vec::new();
    let origin = [sensor[0], sensor[1]];
    let mut entries: Vec<(usize, f64)> = Vec::new();
    for r in 0..n_rays {
        let phi = (r as f64 * params.resolution).to_radians();
        let dir = [phi.cos(), phi.sin()];
        entries.clear();
        let mut nearest: Option<(f64, Option<usize>)> = None;
        for (k, b) in objects.iter().enumerate() {
            if let Some(t) = ray_box_entry(origin, dir, b, params.max_range) {
                entries.push((k, t));
                if nearest.is_none_or(|(tn, _)| t < tn) {
                    nearest = Some((t, Some(k)));
                }
            }
        }
        for b in obstacles {
            if let Some(t) = ray_box_entry(origin, dir, b, params.max_range) {
                if nearest.is_none_or(|(tn, _)| t < tn) {
                    nearest = Some((t, None));
                }
            }
        }
        for &(k, _) in &entries {
            visibility[k].span_rays += 1;
        }
        let stop = nearest.map_or(f64::INFINITY, |(t, _)| t);
        let mut g = params.ground_spacing;
        while g < stop.min(params.ground_range) {
            points.push(LidarPoint::new(origin[0] + g * dir[0], origin[1] + g * dir[1], 0.0, rng.next_f64()));
            g += params.ground_spacing;
        }
        if let Some((t, hit)) = nearest {
            let (x, y) = (origin[0] + t * dir[0], origin[1] + t * dir[1]);
            let b = match hit {
                Some(k) => &objects[k],
                None => obstacles.iter().find(|b| ray_box_entry(origin, dir, b, params.max_range) == Some(t)).unwrap(),
            };
            let mut n = 0u32;
            for z in vertical_samples(b, params.vertical_step) {
                points.push(LidarPoint::new(x, y, z, rng.next_f64()));
                n += 1;
            }
            if let Some(k) = hit {
                visibility[k].hit_rays += 1;
                visibility[k].points += n;
            }
        }
    }
    Sweep { points, visibility }
}

fn sample_box(class: ObjectClass, x: f64, y: f64, yaw: f64, rng: &mut SeededRng) -> Box3D {
    let (w, l, h) = match class {
        ObjectClass::Car => (rng.uniform(1.5, 1.9), rng.uniform(3.6, 4.6), rng.uniform(1.4, 1.7)),
        ObjectClass::Truck => (rng.uniform(2.3, 2.6), rng.uniform(6.0, 9.0), rng.uniform(2.8, 3.6)),
        ObjectClass::Pedestrian => (rng.uniform(0.5, 0.8), rng.uniform(0.5, 0.8), rng.uniform(1.6, 1.9)),
    };
    Box3D { center: [x, y, 0.5 * h], w, l, h, yaw }
}

fn footprint_clear(b: &Box3D, placed: &[Box3D], sensors: &[[f64; 2]], clearance: f64) -> bool {
    let r = 0.5 * b.w.hypot(b.l);
    for s in sensors {
        if (b.center[0] - s[0]).hypot(b.center[1] - s[1]) < r + clearance {
            return false;
        }
    }
    placed.iter().all(|p| {
        let reach = r + 0.5 * p.w.hypot(p.l);
        (b.center[0] - p.center[0]).hypot(b.center[1] - p.center[1]) > reach || bev_intersection_area(b, p) <= 0.0
    })
}

/// Builds one frame: draws object counts, classes and non-overlapping
/// placements, sweeps every sensor, and tags difficulty.
pub fn generate_frame(config: &SceneConfig, id: u32, seed: u64) -> Result<SceneFrame, SceneError> {
    let mut rng = SeededRng::new(derive_seed(seed, "layout", 0));
    let vehicle = config.vehicle_pose();
    let infra = config.infrastructure_poses();
    let obstacles = config.obstacle_boxes();
    let sensors: Vec<[f64; 2]> = std::iter::once(&vehicle)
        .chain(&infra)
        .map(|p| [p.position[0], p.position[1]])
        .collect();
    let draw_count = |rng: &mut SeededRng, r: [usize; 2]| r[0] + rng.index(r[1] - r[0] + 1);
    let n_vehicles = draw_count(&mut rng, config.vehicles);
    let n_peds = draw_count(&mut rng, config.pedestrians);
    let wanted = n_vehicles + n_peds;
    let mut placed: Vec<Box3D> = obstacles.clone();
    let mut objects = Vec::with_capacity(wanted);
    let mut attempts = 0usize;
    while objects.len() < wanted {
        if attempts >= config.placement_retries {
            return Err(SceneError::Placement { frame: id, placed: objects.len(), wanted, retries: attempts });
        }
        attempts += 1;
        let class = if objects.len() >= n_vehicles {
            ObjectClass::Pedestrian
        } else if rng.next_f64() < config.car_probability {
            ObjectClass::Car
        } else {
            ObjectClass::Truck
        };
        let x = vehicle.position[0] + rng.uniform(-config.extent[0], config.extent[0]);
        let y = vehicle.position[1] + rng.uniform(-config.extent[1], config.extent[1]);
        let yaw = rng.uniform(-std::f64::consts::PI, std::f64::consts::PI);
        let b = sample_box(class, x, y, yaw, &mut rng);
        if footprint_clear(&b, &placed, &sensors, config.clearance) {
            placed.push(b);
            objects.push(SceneObject { id: objects.len() as u32, class, bbox: b });
        }
    }
    build_frame(config, id, seed, objects)
}

/// Sweeps every sensor over a fixed object list.
pub fn build_frame(config: &SceneConfig, id: u32, seed: u64, objects: Vec<SceneObject>) -> Result<SceneFrame, SceneError> {
    let vehicle = config.vehicle_pose();
    let obstacles = config.obstacle_boxes();
    let boxes: Vec<Box3D> = objects.iter().map(|o| o.bbox).collect();
    for b in &boxes {
        b.validate()?;
    }
    let params = LidarParams::from_config(config);
    let capture = |pose: Pose, s: u64, to_sensor: &dyn Fn(Vec3) -> Vec3| {
        let sweep = simulate_lidar(&boxes, &obstacles, pose.position, &params, derive_seed(seed, "sensor", s));
        let cloud = PointCloud::new(
            sweep
                .points
                .iter()
                .map(|p| {
                    let [x, y, z] = to_sensor(p.xyz());
                    LidarPoint::new(x, y, z, p.r)
                })
                .collect(),
        );
        SensorCapture { pose, cloud, visibility: sweep.visibility }
    };
    let cv = vehicle.position;
    let to_vehicle = |p: Vec3| [p[0] - cv[0], p[1] - cv[1], p[2] - cv[2]];
    let vehicle_capture = capture(vehicle, 0, &to_vehicle);
    let infrastructures = config
        .infrastructure_poses()
        .into_iter()
        .enumerate()
        .map(|(i, pose)| capture(pose, i as u64 + 1, &|p| transform_point_to_infra(to_vehicle(p), &pose, &vehicle)))
        .collect();
    let mut frame = SceneFrame {
        id,
        seed,
        vehicle: vehicle_capture,
        infrastructures,
        objects,
        obstacles,
        tags: Vec::new(),
    };
    frame.tags = tag_difficulty(&frame);
    Ok(frame)
}

/// Seed of frame `id` under a master seed.
pub fn frame_seed(master: u64, id: u32) -> u64 {
    derive_seed(master, "frame", u64::from(id))
}

/// `frames` frames with ids `0..frames`, generated in parallel from
/// per-frame seeds.
pub fn generate_scene(config: &SceneConfig, frames: usize, seed: u64) -> Result<Vec<SceneFrame>, SceneError> {
    config.validate()?;
    (0..frames as u32)
        .into_par_iter()
        .map(|id| generate_frame(config, id, frame_seed(seed, id)))
        .collect()
}

/// Occlusion seen from the vehicle sensor and BEV range to the vehicle.
pub fn tag_difficulty(frame: &SceneFrame) -> Vec<DifficultyTag> {
    let v = frame.vehicle.pose.position;
    frame
        .objects
        .iter()
        .zip(&frame.vehicle.visibility)
        .map(|(o, vis)| {
            let d = (o.bbox.center[0] - v[0]).hypot(o.bbox.center[1] - v[1]);
            DifficultyTag::classify(vis.occlusion(), d)
        })
        .collect()
}

/// Oracle detector settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleParams {
    /// Minimum fused returns for a detection.
    pub tau: u32,
    /// Standard deviation of center noise in meters; sizes get a tenth of
    /// it as relative noise and yaw the same value in radians.
    pub noise: f64,
    /// Score is `n / (n + kappa)` for `n` fused returns.
    pub kappa: f64,
}

impl Default for OracleParams {
    fn default() -> Self {
        Self { tau: 5, noise: 0.0, kappa: 10.0 }
    }
}

/// Detects every car and truck whose returns, summed over `sensors`, reach
/// `tau`. Boxes are in the vehicle frame.
pub fn oracle_detect(frame: &SceneFrame, sensors: &[usize], params: &OracleParams, seed: u64) -> Vec<Detection> {
    let tau = params.tau.max(1);
    let mut out = Vec::new();
    for (k, o) in frame.objects.iter().enumerate() {
        if !ObjectClass::DETECTED.contains(&o.class) {
            continue;
        }
        let n = frame.union_points(k, sensors);
        if n < tau {
            continue;
        }
        let mut b = frame.to_vehicle_frame(&o.bbox);
        if params.noise > 0.0 {
            let mut rng = SeededRng::new(derive_seed(seed, "oracle", u64::from(o.id)));
            let s = params.noise;
            b.center[0] += s * rng.normal();
            b.center[1] += s * rng.normal();
            b.center[2] += s * rng.normal();
            b.w *= (1.0 + 0.1 * s * rng.normal()).max(0.1);
            b.l *= (1.0 + 0.1 * s * rng.normal()).max(0.1);
            b.h *= (1.0 + 0.1 * s * rng.normal()).max(0.1);
            b.yaw += s * rng.normal();
        }
        let score = f64::from(n) / (f64::from(n) + params.kappa);
        out.push(Detection { bbox: b, class: o.class, score, direction: f64::from(b.yaw > 0.0) });
    }
    out
}

/// Infrastructure that makes the most cars and trucks detectable (at least
/// `tau` returns together with the vehicle) that the vehicle alone misses.
/// Ties go to the most returns added on those missed objects, then to the
/// lowest index.
pub fn oracle_best_infrastructure(frame: &SceneFrame, tau: u32) -> Option<usize> {
    let gains = infrastructure_gains(frame, tau);
    let mut best: Option<(InfraGain, usize)> = None;
    for (i, g) in gains.into_iter().enumerate() {
        if best.is_none_or(|(bg, _)| g > bg) {
            best = Some((g, i));
        }
    }
    best.map(|(_, i)| i)
}

/// What one infrastructure adds to the vehicle's own view. Ordered by
/// `recovered`, then `points`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct InfraGain {
    /// Missed objects lifted to at least `tau` returns.
    pub recovered: u32,
    /// Returns on missed objects.
    pub points: u64,
}

/// Per-infrastructure gains used by [`oracle_best_infrastructure`].
pub fn infrastructure_gains(frame: &SceneFrame, tau: u32) -> Vec<InfraGain> {
    let tau = tau.max(1);
    frame
        .infrastructures
        .iter()
        .map(|infra| {
            let mut g = InfraGain { recovered: 0, points: 0 };
            for (k, o) in frame.objects.iter().enumerate() {
                let own = frame.vehicle.visibility[k].points;
                if !ObjectClass::DETECTED.contains(&o.class) || own >= tau {
                    continue;
                }
                let added = infra.visibility[k].points;
                g.points += u64::from(added);
                if own + added >= tau {
                    g.recovered += 1;
                }
            }
            g
        })
        .collect()
}

fn fmt_pose(p: &Pose) -> String {
    format!("{:?} {:?} {:?} {:?}", p.position[0], p.position[1], p.position[2], p.yaw)
}

fn fmt_box(b: &Box3D) -> String {
    format!(
        "{:?} {:?} {:?} {:?} {:?} {:?} {:?}",
        b.center[0], b.center[1], b.center[2], b.w, b.l, b.h, b.yaw
    )
}

/// Line-oriented text form of everything but the point clouds.
///
/// ```text
/// frame <id> <seed>
/// vehicle <x> <y> <z> <yaw>
/// infra <i> <x> <y> <z> <yaw>
/// object <id> <class> <cx> <cy> <cz> <w> <l> <h> <yaw>
/// obstacle <cx> <cy> <cz> <w> <l> <h> <yaw>
/// visible <sensor> <object index> <points> <hit rays> <span rays>
/// ```
pub fn frame_to_text(frame: &SceneFrame) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "frame {} {}", frame.id, frame.seed);
    let _ = writeln!(s, "vehicle {}", fmt_pose(&frame.vehicle.pose));
    for (i, c) in frame.infrastructures.iter().enumerate() {
        let _ = writeln!(s, "infra {i} {}", fmt_pose(&c.pose));
    }
    for o in &frame.objects {
        let _ = writeln!(s, "object {} {} {}", o.id, o.class.name(), fmt_box(&o.bbox));
    }
    for b in &frame.obstacles {
        let _ = writeln!(s, "obstacle {}", fmt_box(b));
    }
    for sensor in 0..=frame.infrastructures.len() {
        for (k, v) in frame.sensor(sensor).visibility.iter().enumerate() {
            let _ = writeln!(s, "visible {sensor} {k} {} {} {}", v.points, v.hit_rays, v.span_rays);
        }
    }
    s
}

/// Parses [`frame_to_text`] output; clouds are attached separately and
/// start empty.
pub fn frame_from_text(text: &str, path: &str) -> Result<SceneFrame, SceneError> {
    let err = |line: usize, msg: String| SceneError::Parse { path: path.to_string(), line, msg };
    let mut id = None;
    let mut seed = 0;
    let mut vehicle = None;
    let mut infra: BTreeMap<usize, Pose> = BTreeMap::new();
    let mut objects = Vec::new();
    let mut obstacles = Vec::new();
    let mut visible: Vec<(usize, usize, Visibility)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let ln = n + 1;
        let f: Vec<&str> = raw.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        let num = |i: usize| -> Result<f64, SceneError> {
            f.get(i).ok_or_else(|| err(ln, "missing field".into()))?.parse::<f64>().map_err(|e| err(ln, e.to_string()))
        };
        let int = |i: usize| -> Result<u64, SceneError> {
            f.get(i).ok_or_else(|| err(ln, "missing field".into()))?.parse::<u64>().map_err(|e| err(ln, e.to_string()))
        };
        let boxed = |o: usize| -> Result<Box3D, SceneError> {
            Ok(Box3D {
                center: [num(o)?, num(o + 1)?, num(o + 2)?],
                w: num(o + 3)?,
                l: num(o + 4)?,
                h: num(o + 5)?,
                yaw: num(o + 6)?,
            })
        };
        let pose = |o: usize| -> Result<Pose, SceneError> {
            Ok(Pose { position: [num(o)?, num(o + 1)?, num(o + 2)?], yaw: num(o + 3)? })
        };
        match f[0] {
            "frame" => {
                id = Some(int(1)? as u32);
                seed = int(2)?;
            }
            "vehicle" => vehicle = Some(pose(1)?),
            "infra" => {
                infra.insert(int(1)? as usize, pose(2)?);
            }
            "object" => {
                let class = ObjectClass::parse(f.get(2).copied().unwrap_or(""))
                    .ok_or_else(|| err(ln, format!("unknown class {:?}", f.get(2))))?;
                objects.push(SceneObject { id: int(1)? as u32, class, bbox: boxed(3)? });
            }
            "obstacle" => obstacles.push(boxed(1)?),
            "visible" => visible.push((
                int(1)? as usize,
                int(2)? as usize,
                Visibility { points: int(3)? as u32, hit_rays: int(4)? as u32, span_rays: int(5)? as u32 },
            )),
            other => return Err(err(ln, format!("unknown record {other:?}"))),
        }
    }
    let id = id.ok_or_else(|| err(0, "missing frame record".into()))?;
    let vehicle = vehicle.ok_or_else(|| err(0, "missing vehicle record".into()))?;
    if infra.keys().copied().ne(0..infra.len()) {
        return Err(err(0, "infrastructure indices must be 0..N".into()));
    }
    let empty = |pose| SensorCapture { pose, cloud: PointCloud::default(), visibility: vec![Visibility::default(); objects.len()] };
    let mut frame = SceneFrame {
        id,
        seed,
        vehicle: empty(vehicle),
        infrastructures: infra.into_values().map(empty).collect(),
        objects,
        obstacles,
        tags: Vec::new(),
    };
    for (s, k, v) in visible {
        if s > frame.infrastructures.len() || k >= frame.objects.len() {
            return Err(err(0, format!("visibility record for sensor {s}, object {k} out of range")));
        }
        let cap = if s == 0 { &mut frame.vehicle } else { &mut frame.infrastructures[s - 1] };
        cap.visibility[k] = v;
    }
    frame.tags = tag_difficulty(&frame);
    Ok(frame)
}

/// Train/val/test frame ids in a 6:2:2 ratio: `floor(0.6 n)` and
/// `floor(0.2 n)` frames, the remainder to test, after a seeded shuffle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub test: Vec<u32>,
}

pub fn split_ids(n: usize, seed: u64) -> Splits {
    let mut ids: Vec<u32> = (0..n as u32).collect();
    let mut rng = SeededRng::new(derive_seed(seed, "split", 0));
    for i in (1..ids.len()).rev() {
        let j = rng.index(i + 1);
        ids.swap(i, j);
    }
    let n_train = n * 6 / 10;
    let n_val = n * 2 / 10;
    let mut train = ids[..n_train].to_vec();
    let mut val = ids[n_train..n_train + n_val].to_vec();
    let mut test = ids[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Splits { train, val, test }
}

/// On-disk dataset:
///
/// ```text
/// <root>/manifest.txt
/// <root>/scene.toml
/// <root>/frames/frame_000000.txt
/// <root>/clouds/frame_000000_s0.bin     (s0 = vehicle, s1.. = infrastructures)
/// <root>/splits/{train,val,test}.txt
/// ```
pub struct Dataset;

impl Dataset {
    pub fn frame_path(root: &Path, id: u32) -> PathBuf {
        root.join("frames").join(format!("frame_{id:06}.txt"))
    }

    pub fn cloud_path(root: &Path, id: u32, sensor: usize) -> PathBuf {
        root.join("clouds").join(format!("frame_{id:06}_s{sensor}.bin"))
    }

    pub fn write(root: &Path, config: &SceneConfig, seed: u64, frames: &[SceneFrame]) -> Result<Splits, SceneError> {
        for d in ["frames", "clouds", "splits"] {
            fs::create_dir_all(root.join(d))?;
        }
        let toml = toml::to_string(config).map_err(|e| SceneError::Config(e.to_string()))?;
        fs::write(root.join("scene.toml"), toml)?;
        let mut manifest = format!("scene {}\nseed {seed}\nframes {}\n", config.name, frames.len());
        for f in frames {
            let _ = writeln!(manifest, "frame {} {}", f.id, f.seed);
            fs::write(Self::frame_path(root, f.id), frame_to_text(f))?;
            for s in 0..=f.infrastructures.len() {
                fs::write(Self::cloud_path(root, f.id, s), f.sensor(s).cloud.to_bytes())?;
            }
        }
        fs::write(root.join("manifest.txt"), manifest)?;
        let splits = split_ids(frames.len(), seed);
        for (name, ids) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
            let body: String = ids.iter().map(|i| format!("{i}\n")).collect();
            fs::write(root.join("splits").join(format!("{name}.txt")), body)?;
        }
        Ok(splits)
    }

    pub fn read_config(root: &Path) -> Result<SceneConfig, SceneError> {
        let text = fs::read_to_string(root.join("scene.toml"))?;
        toml::from_str(&text).map_err(|e| SceneError::Config(e.to_string()))
    }

    /// Frame ids and seeds listed in the manifest.
    pub fn read_manifest(root: &Path) -> Result<(u64, Vec<(u32, u64)>), SceneError> {
        let path = root.join("manifest.txt");
        let text = fs::read_to_string(&path)?;
        let p = path.display().to_string();
        let mut seed = 0;
        let mut frames = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let f: Vec<&str> = line.split_whitespace().collect();
            let bad = |m: &str| SceneError::Parse { path: p.clone(), line: n + 1, msg: m.to_string() };
            match f.as_slice() {
                ["seed", s] => seed = s.parse().map_err(|_| bad("bad seed"))?,
                ["frame", id, s] => frames.push((id.parse().map_err(|_| bad("bad id"))?, s.parse().map_err(|_| bad("bad seed"))?)),
                _ => {}
            }
        }
        Ok((seed, frames))
    }

    pub fn read_frame(root: &Path, id: u32) -> Result<SceneFrame, SceneError> {
        let path = Self::frame_path(root, id);
        let text = fs::read_to_string(&path)?;
        let mut frame = frame_from_text(&text, &path.display().to_string())?;
        for s in 0..=frame.infrastructures.len() {
            let bytes = fs::read(Self::cloud_path(root, id, s))?;
            let cloud = PointCloud::from_bytes(&bytes)?;
            if s == 0 {
                frame.vehicle.cloud = cloud;
            } else {
                frame.infrastructures[s - 1].cloud = cloud;
            }
        }
        Ok(frame)
    }

    pub fn read_split(root: &Path, name: &str) -> Result<Vec<u32>, SceneError> {
        let path = root.join("splits").join(format!("{name}.txt"));
        let text = fs::read_to_string(&path)?;
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(n, l)| {
                l.trim().parse().map_err(|_| SceneError::Parse {
                    path: path.display().to_string(),
                    line: n + 1,
                    msg: format!("bad frame id {l:?}"),
                })
            })
            .collect()
    }
}
