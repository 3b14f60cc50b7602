//! Sensor poses, frame transforms and oriented-box geometry.
//!
//! Conventions: right-handed, z up. Yaw is counter-clockwise about +z with
//! yaw 0 pointing along +x. A box's length runs along its heading and its
//! width across it. All geometry is `f64`; only wire and tensor payloads are
//! narrowed to `f32`.

use std::f64::consts::PI;
use std::io::{self, Read, Write};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate box: size ({w}, {l}, {h}) must be strictly positive and finite")]
    DegenerateBox { w: f64, l: f64, h: f64 },
    #[error("point cloud byte length {0} is not a multiple of 16")]
    TruncatedCloud(usize),
}

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    // rem_euclid maps -pi to pi already; guard the 2pi rounding edge
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

/// Position and heading of a sensor. Pitch and roll are always zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vec3,
    pub yaw: f64,
}

impl Pose {
    pub fn new(position: Vec3, yaw: f64) -> Self {
        Self { position, yaw: normalize_angle(yaw) }
    }
}

/// Object category carried by ground truth, anchors and detections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ObjectClass {
    Car,
    Truck,
    Pedestrian,
}

impl ObjectClass {
    /// Classes that are detected and scored.
    pub const DETECTED: [ObjectClass; 2] = [ObjectClass::Car, ObjectClass::Truck];

    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::Car => "Car",
            ObjectClass::Truck => "Truck",
            ObjectClass::Pedestrian => "Pedestrian",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "car" => Some(ObjectClass::Car),
            "truck" => Some(ObjectClass::Truck),
            "pedestrian" => Some(ObjectClass::Pedestrian),
            _ => None,
        }
    }
}

/// Oriented 3D box: center, width/length/height and yaw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub center: Vec3,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub yaw: f64,
}

impl Box3D {
    pub fn new(center: Vec3, w: f64, l: f64, h: f64, yaw: f64) -> Result<Self, GeometryError> {
        let b = Self { center, w, l, h, yaw };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if ok(self.w) && ok(self.l) && ok(self.h) {
            Ok(())
        } else {
            Err(GeometryError::DegenerateBox { w: self.w, l: self.l, h: self.h })
        }
    }

    pub fn volume(&self) -> f64 {
        self.w * self.l * self.h
    }

    pub fn z_min(&self) -> f64 {
        self.center[2] - 0.5 * self.h
    }

    pub fn z_max(&self) -> f64 {
        self.center[2] + 0.5 * self.h
    }

    /// Footprint corners in counter-clockwise order, starting front-right.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (0.5 * self.l, 0.5 * self.w);
        let local = [[hl, -hw], [hl, hw], [-hl, hw], [-hl, -hw]];
        local.map(|[u, v]| [self.center[0] + c * u - s * v, self.center[1] + s * u + c * v])
    }

    /// Bottom face corners followed by top face corners, both in
    /// [`Box3D::bev_corners`] order.
    pub fn corners(&self) -> [Vec3; 8] {
        let bev = self.bev_corners();
        let (z0, z1) = (self.z_min(), self.z_max());
        let mut out = [[0.0; 3]; 8];
        for (i, [x, y]) in bev.iter().copied().enumerate() {
            out[i] = [x, y, z0];
            out[i + 4] = [x, y, z1];
        }
        out
    }

    /// Inverse of [`Box3D::corners`].
    pub fn from_corners(c: &[Vec3; 8]) -> Result<Self, GeometryError> {
        let mut center = [0.0; 3];
        for p in c {
            for k in 0..3 {
                center[k] += p[k] / 8.0;
            }
        }
        let dist = |a: Vec3, b: Vec3| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        let w = dist(c[0], c[1]);
        let l = dist(c[1], c[2]);
        let h = c[4][2] - c[0][2];
        // front edge midpoint minus rear edge midpoint gives the heading
        let fx = 0.5 * (c[0][0] + c[1][0]) - 0.5 * (c[2][0] + c[3][0]);
        let fy = 0.5 * (c[0][1] + c[1][1]) - 0.5 * (c[2][1] + c[3][1]);
        Box3D::new(center, w, l, h, fy.atan2(fx))
    }

    /// Whether `(x, y)` lies inside the footprint.
    pub fn contains_xy(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        u.abs() <= 0.5 * self.l && v.abs() <= 0.5 * self.w
    }
}

/// One Lidar return: coordinates in meters and reflectance in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub r: f64,
}

impl LidarPoint {
    pub fn new(x: f64, y: f64, z: f64, r: f64) -> Self {
        Self { x, y, z, r }
    }

    pub fn xyz(&self) -> Vec3 {
        [self.x, self.y, self.z]
    }
}

/// Ordered set of Lidar returns in one sensor frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<LidarPoint>,
}

impl PointCloud {
    pub fn new(points: Vec<LidarPoint>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Headerless dump: four little-endian `f32` (x, y, z, r) per point.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.points.len() * 16);
        for p in &self.points {
            for v in [p.x, p.y, p.z, p.r] {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GeometryError> {
        if !bytes.len().is_multiple_of(16) {
            return Err(GeometryError::TruncatedCloud(bytes.len()));
        }
        let f = |c: &[u8]| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64;
        let points = bytes
            .chunks_exact(16)
            .map(|c| LidarPoint::new(f(&c[0..4]), f(&c[4..8]), f(&c[8..12]), f(&c[12..16])))
            .collect();
        Ok(Self { points })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(&self.to_bytes())
    }

    pub fn read_from<R: Read>(mut r: R) -> io::Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }
}

/// Rotation from an infrastructure frame into the vehicle frame, built from
/// the yaw difference `yaw_v - yaw_i`.
pub fn rotation_matrix(yaw_v: f64, yaw_i: f64) -> Mat3 {
    let (s, c) = (yaw_v - yaw_i).sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn mat_t_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

/// `R * p + C_i - C_v`. The translation offset is not rotated: sensor
/// positions live in a shared world frame.
pub fn transform_point_to_vehicle(point: Vec3, infra: &Pose, vehicle: &Pose) -> Vec3 {
    let r = rotation_matrix(vehicle.yaw, infra.yaw);
    let p = mat_vec(&r, point);
    [
        p[0] + infra.position[0] - vehicle.position[0],
        p[1] + infra.position[1] - vehicle.position[1],
        p[2] + infra.position[2] - vehicle.position[2],
    ]
}

/// Exact inverse of [`transform_point_to_vehicle`].
pub fn transform_point_to_infra(point: Vec3, infra: &Pose, vehicle: &Pose) -> Vec3 {
    let r = rotation_matrix(vehicle.yaw, infra.yaw);
    let d = [
        point[0] - infra.position[0] + vehicle.position[0],
        point[1] - infra.position[1] + vehicle.position[1],
        point[2] - infra.position[2] + vehicle.position[2],
    ];
    mat_t_vec(&r, d)
}

pub fn transform_cloud(cloud: &PointCloud, infra: &Pose, vehicle: &Pose) -> PointCloud {
    map_cloud(cloud, |p| transform_point_to_vehicle(p, infra, vehicle))
}

pub fn transform_cloud_to_infra(cloud: &PointCloud, infra: &Pose, vehicle: &Pose) -> PointCloud {
    map_cloud(cloud, |p| transform_point_to_infra(p, infra, vehicle))
}

fn map_cloud(cloud: &PointCloud, f: impl Fn(Vec3) -> Vec3) -> PointCloud {
    let points = cloud
        .points
        .iter()
        .map(|p| {
            let [x, y, z] = f(p.xyz());
            LidarPoint::new(x, y, z, p.r)
        })
        .collect();
    PointCloud { points }
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Shoelace area of a simple polygon (positive for counter-clockwise).
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        acc += a[0] * b[1] - b[0] * a[1];
    }
    0.5 * acc
}

/// Sutherland-Hodgman: clip `subject` against the convex counter-clockwise
/// polygon `clip`.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let cur_in = cross(a, b, cur) >= 0.0;
            let prev_in = cross(a, b, prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    output.push(line_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(line_intersection(prev, cur, a, b));
            }
        }
    }
    output
}

fn line_intersection(p: [f64; 2], q: [f64; 2], a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let dp = cross(a, b, p);
    let dq = cross(a, b, q);
    let t = dp / (dp - dq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Footprint intersection area of two boxes.
pub fn bev_intersection_area(a: &Box3D, b: &Box3D) -> f64 {
    // cheap reject on circumscribed circles
    let ra = 0.5 * (a.w.hypot(a.l));
    let rb = 0.5 * (b.w.hypot(b.l));
    let dc = (a.center[0] - b.center[0]).hypot(a.center[1] - b.center[1]);
    if dc > ra + rb {
        return 0.0;
    }
    let poly = clip_convex(&a.bev_corners(), &b.bev_corners());
    polygon_area(&poly).max(0.0)
}

/// Bird's-eye-view IoU of the two yaw-rotated footprints.
pub fn bev_iou(a: &Box3D, b: &Box3D) -> Result<f64, GeometryError> {
    a.validate()?;
    b.validate()?;
    let inter = bev_intersection_area(a, b);
    let union = a.w * a.l + b.w * b.l - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Volumetric IoU: footprint intersection times vertical overlap.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> Result<f64, GeometryError> {
    a.validate()?;
    b.validate()?;
    let dz = (a.z_max().min(b.z_max()) - a.z_min().max(b.z_min())).max(0.0);
    if dz == 0.0 {
        return Ok(0.0);
    }
    let inter = bev_intersection_area(a, b) * dz;
    let union = a.volume() + b.volume() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn bx(x: f64, y: f64, w: f64, l: f64, yaw: f64) -> Box3D {
        Box3D::new([x, y, 0.0], w, l, 1.0, yaw).unwrap()
    }

    #[test]
    fn rotation_identity_and_quarter_turn() {
        let r = rotation_matrix(0.7, 0.7);
        assert_eq!(r, [[1.0, -0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let q = rotation_matrix(FRAC_PI_2, 0.0);
        let expect = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(q[i][j], expect[i][j], epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn rotation_matches_host_trig() {
        let r = rotation_matrix(1.0, 0.7);
        let d: f64 = 1.0 - 0.7;
        assert_eq!(r[0][0], d.cos());
        assert_eq!(r[0][1], -d.sin());
        assert_eq!(r[1][0], d.sin());
        assert_eq!(r[1][1], d.cos());
        assert_eq!(r[2], [0.0, 0.0, 1.0]);
    }

    #[test]
    fn transform_examples() {
        let v = Pose::new([3.0, -2.0, 1.7], 0.4);
        assert_eq!(transform_point_to_vehicle([1.0, 2.0, 3.0], &v, &v), [1.0, 2.0, 3.0]);

        let i = Pose::new([5.0, 0.0, 0.0], 0.2);
        let v = Pose::new([0.0, 0.0, 0.0], 0.2);
        assert_eq!(transform_point_to_vehicle([1.0, 0.0, 0.0], &i, &v), [6.0, 0.0, 0.0]);

        let i = Pose::new([10.0, 0.0, 0.0], 0.0);
        let v = Pose::new([0.0, 0.0, 0.0], FRAC_PI_2);
        let p = transform_point_to_vehicle([1.0, 2.0, 0.5], &i, &v);
        assert_abs_diff_eq!(p[0], 8.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p[2], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn transform_z_is_pure_offset() {
        let i = Pose::new([1.0, 2.0, 2.0], 1.1);
        let v = Pose::new([-4.0, 0.5, 1.7], -0.3);
        let p = transform_point_to_vehicle([3.0, -1.0, -0.25], &i, &v);
        assert_eq!(p[2], -0.25 + 2.0 - 1.7);
    }

    #[test]
    fn cloud_transform_preserves_order_and_reflectance() {
        assert!(transform_cloud(&PointCloud::default(), &Pose::new([0.0; 3], 0.0), &Pose::new([1.0; 3], 1.0)).is_empty());
        let c = PointCloud::new(vec![LidarPoint::new(1.0, 0.0, 0.0, 0.42)]);
        let i = Pose::new([5.0, 0.0, 0.0], 0.0);
        let v = Pose::new([0.0, 0.0, 0.0], 0.0);
        let t = transform_cloud(&c, &i, &v);
        assert_eq!(t.points, vec![LidarPoint::new(6.0, 0.0, 0.0, 0.42)]);
    }

    #[test]
    fn yaw_normalization() {
        assert_abs_diff_eq!(normalize_angle(3.0 * PI), PI, epsilon = 1e-12);
        assert_abs_diff_eq!(normalize_angle(-PI), PI, epsilon = 1e-12);
        assert_abs_diff_eq!(normalize_angle(0.5), 0.5);
        assert_abs_diff_eq!(normalize_angle(-0.5 - 2.0 * PI), -0.5, epsilon = 1e-12);
    }

    #[test]
    fn corner_round_trip() {
        let b = Box3D::new([1.5, -2.0, 0.3], 1.6, 3.9, 1.56, 0.7).unwrap();
        let r = Box3D::from_corners(&b.corners()).unwrap();
        for k in 0..3 {
            assert_abs_diff_eq!(r.center[k], b.center[k], epsilon = 1e-9);
        }
        assert_abs_diff_eq!(r.w, b.w, epsilon = 1e-9);
        assert_abs_diff_eq!(r.l, b.l, epsilon = 1e-9);
        assert_abs_diff_eq!(r.h, b.h, epsilon = 1e-9);
        assert_abs_diff_eq!(r.yaw, b.yaw, epsilon = 1e-9);
    }

    #[test]
    fn degenerate_boxes_rejected() {
        assert!(Box3D::new([0.0; 3], 0.0, 1.0, 1.0, 0.0).is_err());
        let bad = Box3D { center: [0.0; 3], w: 1.0, l: -1.0, h: 1.0, yaw: 0.0 };
        let good = bx(0.0, 0.0, 1.0, 1.0, 0.0);
        assert!(bev_iou(&bad, &good).is_err());
        assert!(iou_3d(&good, &bad).is_err());
    }

    #[test]
    fn bev_iou_examples() {
        let a = bx(0.0, 0.0, 2.0, 2.0, 0.0);
        assert_abs_diff_eq!(bev_iou(&a, &a).unwrap(), 1.0, epsilon = 1e-12);
        let far = bx(100.0, 0.0, 5.0, 5.0, 0.3);
        assert_eq!(bev_iou(&a, &far).unwrap(), 0.0);
        let b = bx(1.0, 0.0, 2.0, 2.0, 0.0);
        assert_abs_diff_eq!(bev_iou(&a, &b).unwrap(), 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn bev_iou_offset_squares_against_sampling() {
        let a = bx(0.0, 0.0, 2.0, 2.0, 0.0);
        let b = bx(1.0, 0.0, 2.0, 2.0, 0.0);
        let mut rng = crate::rng::SeededRng::new(3);
        let (mut inter, mut uni) = (0u64, 0u64);
        for _ in 0..200_000 {
            let x = rng.uniform(-1.0, 2.0);
            let y = rng.uniform(-1.0, 1.0);
            let (ia, ib) = (a.contains_xy(x, y), b.contains_xy(x, y));
            inter += (ia && ib) as u64;
            uni += (ia || ib) as u64;
        }
        assert_abs_diff_eq!(inter as f64 / uni as f64, 1.0 / 3.0, epsilon = 1e-2);
    }

    #[test]
    fn iou_3d_examples() {
        let a = Box3D::new([0.0, 0.0, 0.0], 2.0, 3.0, 1.0, 0.2).unwrap();
        assert_abs_diff_eq!(iou_3d(&a, &a).unwrap(), 1.0, epsilon = 1e-12);
        let half = Box3D { center: [0.0, 0.0, 0.5], ..a };
        assert_abs_diff_eq!(iou_3d(&a, &half).unwrap(), 1.0 / 3.0, epsilon = 1e-12);
        let above = Box3D { center: [0.0, 0.0, 1.0], ..a };
        assert_eq!(iou_3d(&a, &above).unwrap(), 0.0);
    }

    #[test]
    fn nested_and_rotated_clip() {
        let outer = bx(0.0, 0.0, 4.0, 4.0, 0.0);
        let inner = bx(0.0, 0.0, 1.0, 1.0, 0.785);
        assert_abs_diff_eq!(bev_intersection_area(&outer, &inner), 1.0, epsilon = 1e-12);
        // a unit square and its 45-degree rotation share an octagon
        let a = bx(0.0, 0.0, 1.0, 1.0, 0.0);
        let b = bx(0.0, 0.0, 1.0, 1.0, PI / 4.0);
        let octagon = 2.0 * (2.0f64.sqrt() - 1.0);
        assert_abs_diff_eq!(bev_intersection_area(&a, &b), octagon, epsilon = 1e-12);
    }

    fn arb_box() -> impl Strategy<Value = Box3D> {
        (-5.0..5.0f64, -5.0..5.0f64, -1.0..1.0f64, 0.3..4.0f64, 0.3..6.0f64, 0.3..3.0f64, -PI..PI)
            .prop_map(|(x, y, z, w, l, h, yaw)| Box3D { center: [x, y, z], w, l, h, yaw })
    }

    proptest! {
        #[test]
        fn iou_is_symmetric(a in arb_box(), b in arb_box()) {
            prop_assert!((bev_iou(&a, &b).unwrap() - bev_iou(&b, &a).unwrap()).abs() < 1e-9);
            prop_assert!((iou_3d(&a, &b).unwrap() - iou_3d(&b, &a).unwrap()).abs() < 1e-9);
            let v = iou_3d(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
        }

        #[test]
        fn bev_iou_yaw_equivariant(a in arb_box(), b in arb_box(), rot in -PI..PI, cx in -3.0..3.0f64, cy in -3.0..3.0f64) {
            let turn = |bx: &Box3D| {
                let (s, c) = rot.sin_cos();
                let (dx, dy) = (bx.center[0] - cx, bx.center[1] - cy);
                Box3D {
                    center: [cx + c * dx - s * dy, cy + s * dx + c * dy, bx.center[2]],
                    yaw: bx.yaw + rot,
                    ..*bx
                }
            };
            let before = bev_iou(&a, &b).unwrap();
            let after = bev_iou(&turn(&a), &turn(&b)).unwrap();
            prop_assert!((before - after).abs() < 1e-9);
        }

        #[test]
        fn transform_round_trip(
            pts in proptest::collection::vec((-80.0..80.0f64, -80.0..80.0f64, -5.0..5.0f64), 1..50),
            ix in -50.0..50.0f64, iy in -50.0..50.0f64, iyaw in -PI..PI,
            vx in -50.0..50.0f64, vy in -50.0..50.0f64, vyaw in -PI..PI,
        ) {
            let infra = Pose::new([ix, iy, 2.0], iyaw);
            let veh = Pose::new([vx, vy, 1.7], vyaw);
            let cloud = PointCloud::new(pts.iter().map(|&(x, y, z)| LidarPoint::new(x, y, z, 0.5)).collect());
            let back = transform_cloud_to_infra(&transform_cloud(&cloud, &infra, &veh), &infra, &veh);
            for (p, q) in cloud.points.iter().zip(&back.points) {
                prop_assert!((p.x - q.x).abs() < 1e-9 && (p.y - q.y).abs() < 1e-9 && (p.z - q.z).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn cloud_bytes_round_trip() {
        let c = PointCloud::new(vec![LidarPoint::new(1.5, -2.25, 0.125, 0.75), LidarPoint::new(0.0, 3.0, -1.0, 0.0)]);
        let bytes = c.to_bytes();
        assert_eq!(bytes.len(), 32);
        assert_eq!(&bytes[0..4], &1.5f32.to_le_bytes());
        assert_eq!(PointCloud::from_bytes(&bytes).unwrap(), c);
        assert!(PointCloud::from_bytes(&bytes[..31]).is_err());
    }
}
