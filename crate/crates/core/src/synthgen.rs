//! Deterministic synthetic radar/LiDAR frame pairs with full ground truth,
//! and brute-force reference implementations used to cross-check the fast
//! paths.

use std::collections::BTreeMap;

use raliflow_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::bevgrid::SparseFeatureMap2D;
use crate::error::{Error, Result};
use crate::geom::{
    box_contains, radial_project, rigid_box_flow, BoxDims, EgoMotion, FlowField, LidarCloud,
    LidarPoint, RadarCloud, RadarPoint, SE3Transform, TrackedBox, Vec3,
};
use crate::labelgen::LabelParams;
use crate::net::AttentionWeights;
use crate::rng::SplitMix64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub seed: u64,
    /// Scene footprint in meters along x and y; x starts at 0 and y is
    /// centered on the sensor.
    pub extent: (f64, f64),
    pub n_boxes: usize,
    /// Box speed range, m/s.
    pub box_speed: (f64, f64),
    /// Max |yaw rate| of boxes, rad/s.
    pub box_yaw_rate: f64,
    /// LiDAR points per m² on ground, walls and visible box faces.
    pub lidar_density: f64,
    pub lidar_noise: f64,
    pub radar_per_object: (usize, usize),
    pub radar_clutter: usize,
    pub radar_jitter: f64,
    /// Fraction of object radar points pushed outside their box.
    pub outbox_fraction: f64,
    pub outbox_offset_max: f64,
    pub arv_noise: f64,
    pub outliers: usize,
    /// |ARV| of outliers is drawn uniformly in `outlier_arv ± 0.5`.
    pub outlier_arv: f64,
    pub ego_speed: (f64, f64),
    pub ego_yaw_rate: f64,
    pub dt: f64,
    pub ground_z: f64,
    /// Radar origin in the LiDAR frame.
    pub radar_offset: Vec3,
    /// Out-of-box radar points stay within this fraction of the class
    /// recovery distance of their box center.
    pub recovery_margin: f64,
    pub class_dist_thresholds: BTreeMap<String, f64>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            extent: (12.8, 12.8),
            n_boxes: 3,
            box_speed: (0.0, 6.0),
            box_yaw_rate: 0.3,
            lidar_density: 40.0,
            lidar_noise: 0.01,
            radar_per_object: (5, 15),
            radar_clutter: 20,
            radar_jitter: 0.15,
            outbox_fraction: 0.3,
            outbox_offset_max: 0.4,
            arv_noise: 0.2,
            outliers: 2,
            outlier_arv: 30.0,
            ego_speed: (0.0, 3.0),
            ego_yaw_rate: 0.2,
            dt: 0.1,
            ground_z: -1.8,
            radar_offset: Vec3::new(0.3, 0.0, 0.2),
            recovery_margin: 0.95,
            class_dist_thresholds: LabelParams::default().class_dist_thresholds,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            self.extent.0,
            self.extent.1,
            self.box_speed.0,
            self.box_speed.1 - self.box_speed.0,
            self.box_yaw_rate,
            self.lidar_density,
            self.lidar_noise,
            self.radar_jitter,
            self.outbox_fraction,
            self.outbox_offset_max,
            self.arv_noise,
            self.outlier_arv,
            self.ego_speed.0,
            self.ego_speed.1 - self.ego_speed.0,
            self.ego_yaw_rate,
            self.recovery_margin,
        ];
        let ok = nonneg.iter().all(|v| *v >= 0.0 && v.is_finite())
            && self.extent.0 >= 8.0
            && self.extent.1 >= 8.0
            && self.dt > 0.0
            && self.outbox_fraction <= 1.0
            && self.recovery_margin <= 1.0
            && self.radar_per_object.0 <= self.radar_per_object.1
            && self.radar_offset.is_finite()
            && self.class_dist_thresholds.contains_key("other");
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid scene config {self:?}")))
        }
    }

    fn threshold(&self, class: &str) -> f64 {
        self.class_dist_thresholds
            .get(class)
            .or_else(|| self.class_dist_thresholds.get("other"))
            .copied()
            .unwrap_or(2.0)
    }

    pub fn radar_extrinsic(&self) -> SE3Transform {
        SE3Transform::from_translation(self.radar_offset)
    }
}

/// Generator truth for one radar point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadarTruth {
    /// Track id of the object the point was sampled from.
    pub object: Option<u32>,
    pub outlier: bool,
    /// True velocity, m/s, world axes.
    pub velocity: Vec3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticFrame {
    pub id: String,
    /// Radar points in the radar sensor frame.
    pub radar: RadarCloud,
    /// LiDAR points in the LiDAR (ego) frame.
    pub lidar: LidarCloud,
    /// Boxes in the LiDAR frame.
    pub boxes: Vec<TrackedBox>,
    /// LiDAR frame to scene world.
    pub pose: SE3Transform,
    pub radar_truth: Vec<RadarTruth>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub src: SyntheticFrame,
    pub tgt: SyntheticFrame,
    pub ego: EgoMotion,
    pub radar_extrinsic: SE3Transform,
    /// True displacement over `dt` of each source radar / LiDAR point.
    pub radar_flow: Vec<Vec3>,
    pub lidar_flow: Vec<Vec3>,
}

const CLASSES: [(&str, f64, f64, f64, f64); 3] = [
    // name, probability, length, width, height
    ("car", 0.4, 4.0, 1.8, 1.5),
    ("pedestrian", 0.3, 0.6, 0.6, 1.7),
    ("cyclist", 0.3, 1.8, 0.6, 1.6),
];

/// Inset of sampled surface points so they test as inside their box.
const INSET: f64 = 0.03;

struct Wall {
    a: (f64, f64),
    b: (f64, f64),
    height: f64,
}

fn walls(cfg: &SceneConfig) -> [Wall; 2] {
    let (ex, ey) = cfg.extent;
    [
        Wall {
            a: (1.0, ey / 2.0 - 0.6),
            b: (ex * 0.45, ey / 2.0 - 0.6),
            height: 1.2,
        },
        Wall {
            a: (ex - 0.6, -ey / 2.0 + 0.5),
            b: (ex - 0.6, -ey / 2.0 + ey * 0.4),
            height: 1.2,
        },
    ]
}

fn seg_dist(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let t = (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    (p.0 - a.0 - t * dx).hypot(p.1 - a.1 - t * dy)
}

/// A rigid object moving with constant speed along its heading and constant
/// yaw rate.
#[derive(Clone, Debug)]
struct Mover {
    track_id: u32,
    class: &'static str,
    dims: BoxDims,
    center: Vec3,
    yaw: f64,
    speed: f64,
    yaw_rate: f64,
}

impl Mover {
    fn box_at(&self, step: f64, dt: f64) -> TrackedBox {
        let t = step * dt;
        let yaw = self.yaw + self.yaw_rate * t;
        // exact integration of a constant-rate turn
        let travel = if self.yaw_rate.abs() > 1e-12 {
            let r = self.speed / self.yaw_rate;
            Vec3::new(
                r * (yaw.sin() - self.yaw.sin()),
                -r * (yaw.cos() - self.yaw.cos()),
                0.0,
            )
        } else {
            Vec3::new(
                self.speed * t * self.yaw.cos(),
                self.speed * t * self.yaw.sin(),
                0.0,
            )
        };
        TrackedBox::new(
            self.track_id,
            self.class,
            self.center + travel,
            self.dims,
            yaw,
        )
        .expect("valid dims")
    }

    /// World motion over one step starting at `step`.
    fn motion(&self, step: f64, dt: f64) -> SE3Transform {
        self.box_at(step + 1.0, dt)
            .pose()
            .compose(&self.box_at(step, dt).pose().inverse())
    }
}

fn sample_count(rng: &mut SplitMix64, expected: f64) -> usize {
    let base = expected.floor();
    base as usize + usize::from(rng.uniform() < expected - base)
}

/// Visible faces of a box seen from `eye`: (local center, local normal,
/// two half-extents along local axes u and v).
fn visible_faces(b: &TrackedBox, eye: Vec3) -> Vec<(Vec3, Vec3, Vec3, Vec3)> {
    let (l, w, h) = (b.dims.length / 2.0, b.dims.width / 2.0, b.dims.height / 2.0);
    let faces = [
        (
            Vec3::new(l, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, w, 0.0),
            Vec3::new(0.0, 0.0, h),
        ),
        (
            Vec3::new(-l, 0.0, 0.0),
            Vec3::new(-1.0, 0.0, 0.0),
            Vec3::new(0.0, w, 0.0),
            Vec3::new(0.0, 0.0, h),
        ),
        (
            Vec3::new(0.0, w, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(l, 0.0, 0.0),
            Vec3::new(0.0, 0.0, h),
        ),
        (
            Vec3::new(0.0, -w, 0.0),
            Vec3::new(0.0, -1.0, 0.0),
            Vec3::new(l, 0.0, 0.0),
            Vec3::new(0.0, 0.0, h),
        ),
        (
            Vec3::new(0.0, 0.0, h),
            Vec3::new(0.0, 0.0, 1.0),
            Vec3::new(l, 0.0, 0.0),
            Vec3::new(0.0, w, 0.0),
        ),
    ];
    let local_eye = b.to_local(eye);
    faces
        .into_iter()
        .filter(|(c, n, _, _)| n.dot(local_eye - *c) > 0.0)
        .collect()
}

fn face_area(f: &(Vec3, Vec3, Vec3, Vec3)) -> f64 {
    4.0 * f.2.norm() * f.3.norm()
}

/// Uniform point on a face, pulled slightly inside; `min_up` clips how low
/// on vertical faces the point may lie (local z, from the bottom).
fn face_point(
    rng: &mut SplitMix64,
    f: &(Vec3, Vec3, Vec3, Vec3),
    h_half: f64,
    min_up: f64,
) -> Vec3 {
    let (c, n, u, v) = *f;
    let shrink = |a: Vec3| {
        let len = a.norm();
        if len > INSET {
            a * ((len - INSET) / len)
        } else {
            a
        }
    };
    let (u, v) = (shrink(u), shrink(v));
    let mut p = c - n * INSET + u * rng.range(-1.0, 1.0) + v * rng.range(-1.0, 1.0);
    let floor = -h_half + min_up;
    if n.z == 0.0 && p.z < floor {
        p.z = floor + (p.z + h_half).abs().min(h_half - floor);
    }
    p
}

fn pick_face<'a>(
    rng: &mut SplitMix64,
    faces: &'a [(Vec3, Vec3, Vec3, Vec3)],
) -> &'a (Vec3, Vec3, Vec3, Vec3) {
    let total: f64 = faces.iter().map(face_area).sum();
    let mut r = rng.uniform() * total;
    for f in faces {
        r -= face_area(f);
        if r <= 0.0 {
            return f;
        }
    }
    faces.last().expect("at least one visible face")
}

fn place_movers(cfg: &SceneConfig, rng: &mut SplitMix64) -> Vec<Mover> {
    let (ex, ey) = cfg.extent;
    let ws = walls(cfg);
    let mut movers: Vec<Mover> = Vec::new();
    let mut radii: Vec<f64> = Vec::new();
    let mut next_id = 1u32 + rng.int_range(0, 50) as u32;
    for _ in 0..cfg.n_boxes {
        for _attempt in 0..200 {
            let r = rng.uniform();
            let mut acc = 0.0;
            let mut class = CLASSES[CLASSES.len() - 1];
            for c in CLASSES {
                acc += c.1;
                if r < acc {
                    class = c;
                    break;
                }
            }
            let dims = BoxDims {
                length: class.2,
                width: class.3,
                height: class.4,
            };
            let radius = (class.2 / 2.0).hypot(class.3 / 2.0);
            let speed = rng.range(cfg.box_speed.0, cfg.box_speed.1);
            // room for one step of travel in either frame
            let reach = radius + speed * cfg.dt * 2.0 + 0.2;
            let x = rng.range(3.0 + reach, ex - reach);
            let y = rng.range(-ey / 2.0 + reach, ey / 2.0 - reach);
            let yaw = rng.range(-std::f64::consts::PI, std::f64::consts::PI);
            let yaw_rate = rng.range(-cfg.box_yaw_rate, cfg.box_yaw_rate);
            if x >= ex - reach || y >= ey / 2.0 - reach {
                continue;
            }
            let clear_walls = ws.iter().all(|w| seg_dist((x, y), w.a, w.b) > reach + 0.3);
            let clear_boxes = movers
                .iter()
                .zip(&radii)
                .all(|(m, r)| (m.center.x - x).hypot(m.center.y - y) > reach + r + 0.6);
            if !(clear_walls && clear_boxes) {
                continue;
            }
            movers.push(Mover {
                track_id: next_id,
                class: class.0,
                dims,
                center: Vec3::new(x, y, cfg.ground_z + class.4 / 2.0),
                yaw,
                speed,
                yaw_rate,
            });
            radii.push(reach);
            next_id += 1 + rng.int_range(0, 3) as u32;
            break;
        }
    }
    movers
}

struct FrameBuilder<'a> {
    cfg: &'a SceneConfig,
    movers: &'a [Mover],
    step: f64,
    /// LiDAR frame to world.
    pose: SE3Transform,
}

impl FrameBuilder<'_> {
    fn boxes_world(&self) -> Vec<TrackedBox> {
        self.movers
            .iter()
            .map(|m| m.box_at(self.step, self.cfg.dt))
            .collect()
    }

    fn lidar(&self, rng: &mut SplitMix64) -> (Vec<Vec3>, Vec<LidarPoint>, Vec<Vec3>) {
        let cfg = self.cfg;
        let (ex, ey) = cfg.extent;
        let eye = self.pose.apply(Vec3::ZERO);
        let mut world = Vec::new();
        let mut intensity = Vec::new();
        let mut flow = Vec::new();
        let noise = |rng: &mut SplitMix64| {
            Vec3::new(
                rng.normal(0.0, cfg.lidar_noise),
                rng.normal(0.0, cfg.lidar_noise),
                rng.normal(0.0, cfg.lidar_noise),
            )
        };
        // ground
        let n_ground = sample_count(rng, cfg.lidar_density * (ex - 0.5) * ey);
        for _ in 0..n_ground {
            let p = Vec3::new(
                rng.range(0.5, ex),
                rng.range(-ey / 2.0, ey / 2.0),
                cfg.ground_z,
            );
            let p = self.pose.apply(p) + noise(rng);
            world.push(Vec3::new(
                p.x,
                p.y,
                cfg.ground_z + rng.normal(0.0, cfg.lidar_noise),
            ));
            intensity.push(rng.range(0.05, 0.25));
            flow.push(Vec3::ZERO);
        }
        for w in walls(cfg) {
            let len = (w.b.0 - w.a.0).hypot(w.b.1 - w.a.1);
            for _ in 0..sample_count(rng, cfg.lidar_density * len * w.height) {
                let t = rng.uniform();
                let p = Vec3::new(
                    w.a.0 + t * (w.b.0 - w.a.0),
                    w.a.1 + t * (w.b.1 - w.a.1),
                    cfg.ground_z + rng.range(0.0, w.height),
                );
                world.push(p + noise(rng));
                intensity.push(rng.range(0.3, 0.6));
                flow.push(Vec3::ZERO);
            }
        }
        for (m, b) in self.movers.iter().zip(self.boxes_world()) {
            let motion = m.motion(self.step, cfg.dt);
            for f in visible_faces(&b, eye) {
                for _ in 0..sample_count(rng, cfg.lidar_density * face_area(&f)) {
                    let local = face_point(rng, &f, b.dims.height / 2.0, 0.0);
                    let p = b.pose().apply(local);
                    world.push(p + noise(rng) * 0.5);
                    intensity.push(rng.range(0.5, 1.0));
                    flow.push(motion.apply(p) - p);
                }
            }
        }
        let points = world
            .iter()
            .zip(&intensity)
            .map(|(p, i)| LidarPoint {
                position: *p,
                intensity: *i,
            })
            .collect();
        (world, points, flow)
    }

    /// Object and clutter radar points in world coordinates with truth.
    fn radar(
        &self,
        rng: &mut SplitMix64,
        lidar_world: &[Vec3],
        lidar_structure: &[usize],
    ) -> Vec<(RadarPoint, RadarTruth)> {
        let cfg = self.cfg;
        let sensor = self.pose.apply(cfg.radar_offset);
        let eye = self.pose.apply(Vec3::ZERO);
        let mut out = Vec::new();
        let arv_of = |rng: &mut SplitMix64, p: Vec3, v: Vec3| -> f64 {
            radial_project(p - sensor, v).unwrap_or(0.0) + rng.normal(0.0, cfg.arv_noise)
        };
        for (m, b) in self.movers.iter().zip(self.boxes_world()) {
            let faces = visible_faces(&b, eye);
            if faces.is_empty() {
                continue;
            }
            let motion = m.motion(self.step, cfg.dt);
            let limit = cfg.recovery_margin * cfg.threshold(m.class);
            let count = rng.int_range(cfg.radar_per_object.0 as u64, cfg.radar_per_object.1 as u64);
            for _ in 0..count {
                let f = pick_face(rng, &faces);
                let mut p = b.pose().apply(face_point(
                    rng,
                    f,
                    b.dims.height / 2.0,
                    0.35_f64.min(b.dims.height / 2.0),
                ));
                for _try in 0..50 {
                    let face = *pick_face(rng, &faces);
                    let local = face_point(
                        rng,
                        &face,
                        b.dims.height / 2.0,
                        0.35_f64.min(b.dims.height / 2.0),
                    );
                    let push = if rng.uniform() < cfg.outbox_fraction {
                        face.1 * (INSET + rng.range(0.05, cfg.outbox_offset_max.max(0.05)))
                    } else {
                        Vec3::ZERO
                    };
                    let jitter = Vec3::new(
                        rng.normal(0.0, cfg.radar_jitter),
                        rng.normal(0.0, cfg.radar_jitter),
                        rng.normal(0.0, cfg.radar_jitter),
                    );
                    let cand = b.pose().apply(local + push) + jitter;
                    if (cand - b.center).norm() <= limit {
                        p = cand;
                        break;
                    }
                }
                let v = (motion.apply(p) - p) / cfg.dt;
                let arv = arv_of(rng, p, v);
                out.push((
                    RadarPoint {
                        position: p,
                        arv,
                        rrv: 0.0,
                        rcs: rng.range(0.0, 15.0),
                    },
                    RadarTruth {
                        object: Some(m.track_id),
                        outlier: false,
                        velocity: v,
                    },
                ));
            }
        }
        for _ in 0..cfg.radar_clutter {
            let ws = walls(cfg);
            let w = &ws[rng.int_range(0, ws.len() as u64 - 1) as usize];
            let t = rng.uniform();
            let p = Vec3::new(
                w.a.0 + t * (w.b.0 - w.a.0) + rng.normal(0.0, cfg.radar_jitter),
                w.a.1 + t * (w.b.1 - w.a.1) + rng.normal(0.0, cfg.radar_jitter),
                cfg.ground_z + rng.range(0.4, w.height),
            );
            let arv = arv_of(rng, p, Vec3::ZERO);
            out.push((
                RadarPoint {
                    position: p,
                    arv,
                    rrv: 0.0,
                    rcs: rng.range(5.0, 20.0),
                },
                RadarTruth {
                    object: None,
                    outlier: false,
                    velocity: Vec3::ZERO,
                },
            ));
        }
        if !lidar_structure.is_empty() {
            for _ in 0..cfg.outliers {
                let anchor = lidar_world
                    [lidar_structure[rng.int_range(0, lidar_structure.len() as u64 - 1) as usize]];
                let p = anchor + Vec3::new(rng.range(-0.3, 0.3), rng.range(-0.3, 0.3), 0.0);
                let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
                out.push((
                    RadarPoint {
                        position: p,
                        arv: sign * rng.range(cfg.outlier_arv - 0.5, cfg.outlier_arv + 0.5),
                        rrv: 0.0,
                        rcs: rng.range(-5.0, 5.0),
                    },
                    RadarTruth {
                        object: None,
                        outlier: true,
                        velocity: Vec3::ZERO,
                    },
                ));
            }
        }
        out
    }

    /// Returns the frame, true source displacements of radar and LiDAR points.
    fn build(
        &self,
        id: String,
        rng: &mut SplitMix64,
        ego_velocity: Vec3,
    ) -> (SyntheticFrame, Vec<Vec3>, Vec<Vec3>) {
        let cfg = self.cfg;
        let (lidar_world, lidar_points, lidar_flow) = self.lidar(rng);
        let structure: Vec<usize> = (0..lidar_world.len())
            .filter(|&i| lidar_world[i].z > cfg.ground_z + 0.4)
            .collect();
        let mut radar = self.radar(rng, &lidar_world, &structure);
        // shuffle so outliers and clutter are not at fixed positions
        rng.shuffle(&mut radar);

        let to_frame = self.pose.inverse();
        let lidar_to_radar = cfg.radar_extrinsic().inverse();
        let sensor = self.pose.apply(cfg.radar_offset);
        let radar_flow = radar.iter().map(|(_, t)| t.velocity * cfg.dt).collect();
        let radar_points = radar
            .iter()
            .map(|(p, _)| {
                let rrv = p.arv - radial_project(p.position - sensor, ego_velocity).unwrap_or(0.0);
                RadarPoint {
                    position: lidar_to_radar.apply(to_frame.apply(p.position)),
                    rrv,
                    ..*p
                }
            })
            .collect();
        let lidar = lidar_points
            .into_iter()
            .map(|p| LidarPoint {
                position: to_frame.apply(p.position),
                ..p
            })
            .collect();
        let boxes = self
            .boxes_world()
            .iter()
            .map(|b| b.transformed(&to_frame))
            .collect();
        (
            SyntheticFrame {
                radar: RadarCloud::new(id.clone(), radar_points),
                lidar: LidarCloud::new(id.clone(), lidar),
                id,
                boxes,
                pose: self.pose,
                radar_truth: radar.iter().map(|(_, t)| *t).collect(),
            },
            radar_flow,
            lidar_flow,
        )
    }
}

/// One source/target pair. The source LiDAR frame is the scene world.
pub fn generate_scene(cfg: &SceneConfig) -> Result<SyntheticScene> {
    cfg.validate()?;
    let mut rng = SplitMix64::derive(cfg.seed, 0x5343454e45);
    let movers = place_movers(cfg, &mut rng);
    let ego_speed = rng.range(cfg.ego_speed.0, cfg.ego_speed.1);
    let ego_yaw = rng.range(-cfg.ego_yaw_rate, cfg.ego_yaw_rate) * cfg.dt;
    // target sensor pose in the source frame
    let ego_pose =
        SE3Transform::from_yaw_translation(ego_yaw, Vec3::new(ego_speed * cfg.dt, 0.0, 0.0));
    let ego_velocity = Vec3::new(ego_speed, 0.0, 0.0);

    let name = |k: &str| format!("s{:08}_{k}", cfg.seed);
    let src_builder = FrameBuilder {
        cfg,
        movers: &movers,
        step: 0.0,
        pose: SE3Transform::identity(),
    };
    let tgt_builder = FrameBuilder {
        cfg,
        movers: &movers,
        step: 1.0,
        pose: ego_pose,
    };
    let (src, radar_flow, lidar_flow) = src_builder.build(name("a"), &mut rng, ego_velocity);
    let (tgt, _, _) = tgt_builder.build(name("b"), &mut rng, ego_velocity);
    Ok(SyntheticScene {
        ego: EgoMotion::new(ego_pose.inverse(), cfg.dt)?,
        radar_extrinsic: cfg.radar_extrinsic(),
        src,
        tgt,
        radar_flow,
        lidar_flow,
    })
}

/// Direct evaluation of the local cross-attention: for every occupied query
/// cell, the dense 3x3 logit window with absent keys masked out, a softmax,
/// and the weighted sum of key features plus position codes.
pub fn oracle_naive_attention(
    query: &SparseFeatureMap2D,
    key: &SparseFeatureMap2D,
    heat: &[f64],
    w: &AttentionWeights,
) -> Tensor {
    let grid = &query.grid;
    let c = query.channels();
    let mut out = vec![0.0; grid.num_cells() * c];
    let project = |f: &[f64], m: &Tensor| -> Vec<f64> {
        (0..c)
            .map(|j| {
                let mut s = 0.0;
                for (i, fi) in f.iter().enumerate() {
                    s += fi * m.data()[i * c + j];
                }
                s
            })
            .collect()
    };
    for qy in 0..grid.height {
        for qx in 0..grid.width {
            let q = qy * grid.width + qx;
            if !query.occupancy[q] {
                continue;
            }
            let qv = project(query.cell(q), &w.w_query);
            let mut logits = [f64::NEG_INFINITY; 9];
            let mut keys = [None; 9];
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (kx, ky) = (qx as i64 + dx, qy as i64 + dy);
                    if kx < 0 || ky < 0 || kx >= grid.width as i64 || ky >= grid.height as i64 {
                        continue;
                    }
                    let k = ky as usize * grid.width + kx as usize;
                    if !key.occupancy[k] {
                        continue;
                    }
                    let slot = ((dy + 1) * 3 + dx + 1) as usize;
                    let kv = project(key.cell(k), &w.w_key);
                    let dot: f64 = qv.iter().zip(&kv).map(|(a, b)| a * b).sum();
                    logits[slot] = dot / (c as f64).sqrt() * heat[k];
                    keys[slot] = Some(k);
                }
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let exps: Vec<f64> = logits
                .iter()
                .map(|l| if l.is_finite() { (l - max).exp() } else { 0.0 })
                .collect();
            let z: f64 = exps.iter().sum();
            for slot in 0..9 {
                let Some(k) = keys[slot] else { continue };
                let a = exps[slot] / z;
                for j in 0..c {
                    out[q * c + j] += a * (key.cell(k)[j] + w.relpos.data()[slot * c + j]);
                }
            }
        }
    }
    Tensor::new(query.features.shape(), out).expect("same shape as the query map")
}

/// Exhaustive reference labelling of source radar points: every point is
/// tested against every box pair, with no shortcuts. Target boxes must be in
/// the source frame. Returns the field and per-point recovered flags.
pub fn oracle_label_flow(
    radar: &RadarCloud,
    boxes_src: &[TrackedBox],
    boxes_tgt: &[TrackedBox],
    params: &LabelParams,
    sensor: Vec3,
    dt: f64,
) -> Result<(FlowField, Vec<bool>)> {
    let mut pairs: Vec<(&TrackedBox, &TrackedBox)> = Vec::new();
    for s in boxes_src {
        for t in boxes_tgt {
            if s.track_id == t.track_id {
                pairs.push((s, t));
            }
        }
    }
    pairs.sort_by_key(|(s, _)| s.track_id);
    let n = radar.len();
    let mut field = FlowField::zeros(n);
    let mut recovered = vec![false; n];
    for (i, rp) in radar.points.iter().enumerate() {
        let p = rp.position;
        let mut inside: Option<(f64, u32, usize)> = None;
        let mut nearest: Option<(f64, u32, usize)> = None;
        for (k, (s, _)) in pairs.iter().enumerate() {
            let d = (p - s.center).norm();
            let better = |cur: Option<(f64, u32, usize)>| match cur {
                None => true,
                Some((bd, bid, _)) => d < bd || (d == bd && s.track_id < bid),
            };
            if box_contains(s, p) && better(inside) {
                inside = Some((d, s.track_id, k));
            }
            if better(nearest) {
                nearest = Some((d, s.track_id, k));
            }
        }
        if let Some((_, _, k)) = inside {
            field.gt_flows[i] = rigid_box_flow(pairs[k].0, pairs[k].1, p)?;
            field.instance_id[i] = Some(k);
        } else if rp.arv.abs() > params.dynamic_arv_min {
            if let Some((d, _, k)) = nearest {
                let (s, t) = pairs[k];
                if d <= params.class_threshold(&s.class_label) {
                    let cand = rigid_box_flow(s, t, p)?;
                    if (radial_project(p - sensor, cand / dt)? - rp.arv).abs() < params.gamma_thre {
                        field.gt_flows[i] = cand;
                        field.instance_id[i] = Some(k);
                        recovered[i] = true;
                    }
                }
            }
        }
    }
    for (i, rp) in radar.points.iter().enumerate() {
        field.mask[i] = (radial_project(rp.position - sensor, field.gt_flows[i] / dt)? - rp.arv)
            .abs()
            < params.gamma_thre;
    }
    Ok((field, recovered))
}
