//! Value types and exact geometric primitives.

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum range for a well-defined line of sight.
pub const MIN_RANGE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn norm_xy(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_slice(s: &[f64]) -> Self {
        Self::new(s[0], s[1], s[2])
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    fn div(self, s: f64) -> Vec3 {
        Vec3::new(self.x / s, self.y / s, self.z / s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Rigid transform `p -> R p + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SE3Transform {
    pub rotation: [[f64; 3]; 3],
    pub translation: Vec3,
}

impl Default for SE3Transform {
    fn default() -> Self {
        Self::identity()
    }
}

impl SE3Transform {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: Vec3::ZERO,
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self {
            translation: t,
            ..Self::identity()
        }
    }

    /// Rotation about +z by `yaw` radians followed by translation `t`.
    pub fn from_yaw_translation(yaw: f64, t: Vec3) -> Self {
        let (s, c) = yaw.sin_cos();
        Self {
            rotation: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
            translation: t,
        }
    }

    pub fn rotate(&self, p: Vec3) -> Vec3 {
        let r = &self.rotation;
        Vec3::new(
            r[0][0] * p.x + r[0][1] * p.y + r[0][2] * p.z,
            r[1][0] * p.x + r[1][1] * p.y + r[1][2] * p.z,
            r[2][0] * p.x + r[2][1] * p.y + r[2][2] * p.z,
        )
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        self.rotate(p) + self.translation
    }

    pub fn inverse(&self) -> Self {
        let r = &self.rotation;
        let rt = [
            [r[0][0], r[1][0], r[2][0]],
            [r[0][1], r[1][1], r[2][1]],
            [r[0][2], r[1][2], r[2][2]],
        ];
        let inv = Self {
            rotation: rt,
            translation: Vec3::ZERO,
        };
        Self {
            rotation: rt,
            translation: -inv.rotate(self.translation),
        }
    }

    /// `compose(a, b)` applies `b` first, then `a`.
    pub fn compose(&self, b: &SE3Transform) -> Self {
        let (ra, rb) = (&self.rotation, &b.rotation);
        let mut rot = [[0.0; 3]; 3];
        for (i, row) in rot.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| ra[i][k] * rb[k][j]).sum();
            }
        }
        Self {
            rotation: rot,
            translation: self.apply(b.translation),
        }
    }

    /// Heading of the rotated x axis in the xy plane.
    pub fn yaw(&self) -> f64 {
        self.rotation[1][0].atan2(self.rotation[0][0])
    }

    /// Checks `R^T R = I` and `det R = 1` within `tol`.
    pub fn is_valid(&self, tol: f64) -> bool {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (d - want).abs() > tol {
                    return false;
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        (det - 1.0).abs() <= tol && self.translation.is_finite()
    }

    /// Row-major homogeneous 4x4 matrix.
    pub fn to_matrix(&self) -> [[f64; 4]; 4] {
        let r = &self.rotation;
        let t = self.translation;
        [
            [r[0][0], r[0][1], r[0][2], t.x],
            [r[1][0], r[1][1], r[1][2], t.y],
            [r[2][0], r[2][1], r[2][2], t.z],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    pub fn from_matrix(m: &[[f64; 4]; 4]) -> Result<Self> {
        let t = Self {
            rotation: [
                [m[0][0], m[0][1], m[0][2]],
                [m[1][0], m[1][1], m[1][2]],
                [m[2][0], m[2][1], m[2][2]],
            ],
            translation: Vec3::new(m[0][3], m[1][3], m[2][3]),
        };
        if m[3] != [0.0, 0.0, 0.0, 1.0] || !t.is_valid(1e-9) {
            return Err(Error::InvalidTransform);
        }
        Ok(t)
    }
}

/// Component of `v` along the line of sight from the sensor origin to `p`.
pub fn radial_project(p: Vec3, v: Vec3) -> Result<f64> {
    let r = p.norm();
    if r <= MIN_RANGE {
        return Err(Error::DegeneratePoint);
    }
    Ok(v.dot(p) / r)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RadarPoint {
    pub position: Vec3,
    /// Absolute (ego-compensated) radial velocity, m/s, positive receding.
    pub arv: f64,
    /// Relative radial velocity, carried through but unused.
    pub rrv: f64,
    pub rcs: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LidarPoint {
    pub position: Vec3,
    pub intensity: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Radar,
    Lidar,
}

pub trait Point: Clone + Send + Sync {
    const MODALITY: Modality;
    fn position(&self) -> Vec3;
    fn with_position(&self, p: Vec3) -> Self;
}

impl Point for RadarPoint {
    const MODALITY: Modality = Modality::Radar;
    fn position(&self) -> Vec3 {
        self.position
    }
    fn with_position(&self, p: Vec3) -> Self {
        Self {
            position: p,
            ..*self
        }
    }
}

impl Point for LidarPoint {
    const MODALITY: Modality = Modality::Lidar;
    fn position(&self) -> Vec3 {
        self.position
    }
    fn with_position(&self, p: Vec3) -> Self {
        Self {
            position: p,
            ..*self
        }
    }
}

/// Ordered point set of one modality in one frame. Flow fields align with it
/// by index.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud<P> {
    pub frame_id: String,
    pub points: Vec<P>,
}

pub type RadarCloud = PointCloud<RadarPoint>;
pub type LidarCloud = PointCloud<LidarPoint>;

impl<P: Point> PointCloud<P> {
    pub fn new(frame_id: impl Into<String>, points: Vec<P>) -> Self {
        Self {
            frame_id: frame_id.into(),
            points,
        }
    }

    pub fn modality(&self) -> Modality {
        P::MODALITY
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positions(&self) -> Vec<Vec3> {
        self.points.iter().map(Point::position).collect()
    }

    pub fn transformed(&self, t: &SE3Transform) -> Self {
        Self {
            frame_id: self.frame_id.clone(),
            points: self
                .points
                .iter()
                .map(|p| p.with_position(t.apply(p.position())))
                .collect(),
        }
    }

    /// Keeps the points whose mask entry is true, preserving order.
    pub fn filtered(&self, keep: &[bool]) -> Self {
        Self {
            frame_id: self.frame_id.clone(),
            points: self
                .points
                .iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(p, _)| p.clone())
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxDims {
    pub length: f64,
    pub width: f64,
    pub height: f64,
}

/// Oriented 3D box with a persistent track identity.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackedBox {
    pub track_id: u32,
    pub class_label: String,
    pub center: Vec3,
    pub dims: BoxDims,
    pub yaw: f64,
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let mut w = a.rem_euclid(TAU);
    if w > PI {
        w -= TAU;
    }
    w
}

impl TrackedBox {
    pub fn new(
        track_id: u32,
        class_label: impl Into<String>,
        center: Vec3,
        dims: BoxDims,
        yaw: f64,
    ) -> Result<Self> {
        if !(dims.length > 0.0 && dims.width > 0.0 && dims.height > 0.0)
            || !center.is_finite()
            || !yaw.is_finite()
        {
            return Err(Error::InvalidBox(track_id));
        }
        Ok(Self {
            track_id,
            class_label: class_label.into(),
            center,
            dims,
            yaw: wrap_angle(yaw),
        })
    }

    /// Box-local to sensor frame.
    pub fn pose(&self) -> SE3Transform {
        SE3Transform::from_yaw_translation(self.yaw, self.center)
    }

    pub fn to_local(&self, p: Vec3) -> Vec3 {
        self.pose().inverse().apply(p)
    }

    /// Closed-interval membership in box-local axes.
    pub fn contains(&self, p: Vec3) -> bool {
        let l = self.to_local(p);
        l.x.abs() <= self.dims.length / 2.0
            && l.y.abs() <= self.dims.width / 2.0
            && l.z.abs() <= self.dims.height / 2.0
    }

    /// The same physical box expressed after applying `t` to the frame. Only
    /// the yaw component of `t`'s rotation is kept.
    pub fn transformed(&self, t: &SE3Transform) -> Self {
        let pose = t.compose(&self.pose());
        Self {
            center: pose.translation,
            yaw: wrap_angle(pose.yaw()),
            ..self.clone()
        }
    }
}

pub fn box_contains(b: &TrackedBox, p: Vec3) -> bool {
    b.contains(p)
}

/// Displacement of `p` when carried rigidly from `src`'s pose to `tgt`'s.
pub fn rigid_box_flow(src: &TrackedBox, tgt: &TrackedBox, p: Vec3) -> Result<Vec3> {
    if src.track_id != tgt.track_id {
        return Err(Error::TrackMismatch(src.track_id, tgt.track_id));
    }
    let motion = tgt.pose().compose(&src.pose().inverse());
    Ok(motion.apply(p) - p)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EgoMotion {
    /// Maps a static point's source-frame coordinates to target-frame ones.
    pub t_src_to_tgt: SE3Transform,
    /// Frame interval in seconds.
    pub dt: f64,
}

impl EgoMotion {
    pub fn new(t_src_to_tgt: SE3Transform, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Config(format!("dt must be positive, got {dt}")));
        }
        Ok(Self { t_src_to_tgt, dt })
    }

    /// Maps target-frame coordinates back into the source frame.
    pub fn tgt_to_src(&self) -> SE3Transform {
        self.t_src_to_tgt.inverse()
    }
}

/// Brings a target-frame cloud into the source frame so that static world
/// points coincide across the pair.
pub fn ego_compensate<P: Point>(cloud_tgt: &PointCloud<P>, ego: &EgoMotion) -> PointCloud<P> {
    cloud_tgt.transformed(&ego.tgt_to_src())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MotionClass {
    /// Foreground dynamic.
    FD,
    /// Background static.
    BS,
    /// Foreground static.
    FS,
}

impl MotionClass {
    pub fn as_str(self) -> &'static str {
        match self {
            MotionClass::FD => "FD",
            MotionClass::BS => "BS",
            MotionClass::FS => "FS",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "FD" => Some(MotionClass::FD),
            "BS" => Some(MotionClass::BS),
            "FS" => Some(MotionClass::FS),
            _ => None,
        }
    }
}

/// Per-point flow labels and predictions, aligned by index with a cloud.
/// Flows are displacements in meters over one frame interval.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub flows: Vec<Vec3>,
    pub gt_flows: Vec<Vec3>,
    pub mask: Vec<bool>,
    pub motion_class: Vec<MotionClass>,
    pub instance_id: Vec<Option<usize>>,
}

impl FlowField {
    pub fn zeros(n: usize) -> Self {
        Self {
            flows: vec![Vec3::ZERO; n],
            gt_flows: vec![Vec3::ZERO; n],
            mask: vec![true; n],
            motion_class: vec![MotionClass::BS; n],
            instance_id: vec![None; n],
        }
    }

    pub fn len(&self) -> usize {
        self.gt_flows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gt_flows.is_empty()
    }
}
