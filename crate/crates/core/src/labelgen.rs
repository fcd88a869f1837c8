//! Scene-flow labels from tracked boxes: rigid in-box flow for both
//! modalities, recovery of dynamic radar points that fall just outside their
//! box, radar confidence masks and FD/BS/FS classes.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{
    radial_project, rigid_box_flow, FlowField, LidarCloud, MotionClass, Point, PointCloud,
    RadarCloud, TrackedBox, Vec3,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelParams {
    pub gamma_thre: f64,
    pub dynamic_arv_min: f64,
    /// Maximum center distance (m) for recovery, per class. Classes missing
    /// from the map use the `other` entry.
    pub class_dist_thresholds: BTreeMap<String, f64>,
    pub dynamic_speed_min: f64,
}

impl Default for LabelParams {
    fn default() -> Self {
        Self {
            gamma_thre: 1.0,
            dynamic_arv_min: 0.5,
            class_dist_thresholds: [
                ("car", 3.0),
                ("pedestrian", 1.0),
                ("cyclist", 1.5),
                ("other", 2.0),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
            dynamic_speed_min: 0.5,
        }
    }
}

impl LabelParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.gamma_thre > 0.0
            && self.dynamic_arv_min > 0.0
            && self.dynamic_speed_min > 0.0
            && self.class_dist_thresholds.contains_key("other")
            && self.class_dist_thresholds.values().all(|v| *v > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid label parameters {self:?}")))
        }
    }

    pub fn class_threshold(&self, class: &str) -> f64 {
        self.class_dist_thresholds
            .get(class)
            .or_else(|| self.class_dist_thresholds.get("other"))
            .copied()
            .unwrap_or(2.0)
    }
}

/// One foreground instance: a track seen in both frames. The target box is
/// already expressed in the source frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub index: usize,
    pub src: TrackedBox,
    pub tgt: TrackedBox,
}

fn check_unique(boxes: &[TrackedBox]) -> Result<()> {
    let mut seen = HashSet::new();
    for b in boxes {
        if !seen.insert(b.track_id) {
            return Err(Error::DuplicateTrackId(b.track_id));
        }
    }
    Ok(())
}

/// Matches boxes by track id. Tracks missing from either frame carry no
/// motion and are dropped. Instances are indexed in ascending track id order.
pub fn match_instances(src: &[TrackedBox], tgt: &[TrackedBox]) -> Result<Vec<Instance>> {
    check_unique(src)?;
    check_unique(tgt)?;
    let mut pairs: Vec<(TrackedBox, TrackedBox)> = src
        .iter()
        .filter_map(|s| {
            tgt.iter()
                .find(|t| t.track_id == s.track_id)
                .map(|t| (s.clone(), t.clone()))
        })
        .collect();
    pairs.sort_by_key(|(s, _)| s.track_id);
    Ok(pairs
        .into_iter()
        .enumerate()
        .map(|(index, (src, tgt))| Instance { index, src, tgt })
        .collect())
}

/// Rigid flow for every point inside a source box; overlapping boxes resolve
/// to the nearest center, then the lower track id. Everything else is static.
pub fn generate_inbox_labels<P: Point>(
    cloud: &PointCloud<P>,
    instances: &[Instance],
) -> Result<FlowField> {
    let mut field = FlowField::zeros(cloud.len());
    for (i, p) in cloud.points.iter().enumerate() {
        let p = p.position();
        let best = instances
            .iter()
            .filter(|ins| ins.src.contains(p))
            .map(|ins| ((p - ins.src.center).norm(), ins))
            .min_by(|a, b| {
                a.0.total_cmp(&b.0)
                    .then(a.1.src.track_id.cmp(&b.1.src.track_id))
            });
        if let Some((_, ins)) = best {
            field.gt_flows[i] = rigid_box_flow(&ins.src, &ins.tgt, p)?;
            field.instance_id[i] = Some(ins.index);
        }
    }
    Ok(field)
}

/// Line-of-sight consistency between a flow label and the measured ARV.
/// `sensor` is the radar origin in the cloud's frame.
pub fn radial_consistent(
    p: Vec3,
    sensor: Vec3,
    flow: Vec3,
    arv: f64,
    dt: f64,
    gamma: f64,
) -> Result<bool> {
    Ok((radial_project(p - sensor, flow / dt)? - arv).abs() < gamma)
}

/// Assigns out-of-box dynamic radar points to their nearest instance when the
/// center distance passes the class gate and the candidate rigid flow agrees
/// with the ARV. Returns the updated field and a per-point recovered flag.
pub fn recover_outbox_radar(
    radar: &RadarCloud,
    labels: &FlowField,
    instances: &[Instance],
    params: &LabelParams,
    sensor: Vec3,
    dt: f64,
) -> Result<(FlowField, Vec<bool>)> {
    if labels.len() != radar.len() {
        return Err(Error::LengthMismatch {
            expected: radar.len(),
            got: labels.len(),
        });
    }
    let mut out = labels.clone();
    let mut recovered = vec![false; radar.len()];
    for (i, rp) in radar.points.iter().enumerate() {
        if labels.instance_id[i].is_some() || rp.arv.abs() <= params.dynamic_arv_min {
            continue;
        }
        let p = rp.position;
        let nearest = instances
            .iter()
            .map(|ins| ((p - ins.src.center).norm(), ins))
            .min_by(|a, b| {
                a.0.total_cmp(&b.0)
                    .then(a.1.src.track_id.cmp(&b.1.src.track_id))
            });
        let Some((dist, ins)) = nearest else { continue };
        if dist > params.class_threshold(&ins.src.class_label) {
            continue;
        }
        let cand = rigid_box_flow(&ins.src, &ins.tgt, p)?;
        if radial_consistent(p, sensor, cand, rp.arv, dt, params.gamma_thre)? {
            out.gt_flows[i] = cand;
            out.instance_id[i] = Some(ins.index);
            recovered[i] = true;
        }
    }
    Ok((out, recovered))
}

/// Radar confidence mask: the label's radial speed must agree with the ARV.
pub fn confidence_mask(
    radar: &RadarCloud,
    labels: &FlowField,
    gamma: f64,
    sensor: Vec3,
    dt: f64,
) -> Result<Vec<bool>> {
    radar
        .points
        .iter()
        .zip(&labels.gt_flows)
        .map(|(p, f)| radial_consistent(p.position, sensor, *f, p.arv, dt, gamma))
        .collect()
}

pub fn classify_points(labels: &FlowField, dt: f64, dynamic_speed_min: f64) -> Vec<MotionClass> {
    labels
        .instance_id
        .iter()
        .zip(&labels.gt_flows)
        .map(|(inst, f)| match inst {
            Some(_) if f.norm() / dt >= dynamic_speed_min => MotionClass::FD,
            Some(_) => MotionClass::FS,
            None => MotionClass::BS,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledFrame {
    pub radar: RadarCloud,
    pub radar_flow: FlowField,
    pub lidar: LidarCloud,
    pub lidar_flow: FlowField,
    pub instances: Vec<Instance>,
    pub recovered: Vec<bool>,
}

/// Full labelling of one source frame. Clouds and `boxes_tgt` must already be
/// in the source frame; `radar_sensor` is the radar origin in that frame.
pub fn label_frame(
    radar: &RadarCloud,
    lidar: &LidarCloud,
    boxes_src: &[TrackedBox],
    boxes_tgt: &[TrackedBox],
    params: &LabelParams,
    radar_sensor: Vec3,
    dt: f64,
) -> Result<LabeledFrame> {
    params.validate()?;
    let instances = match_instances(boxes_src, boxes_tgt)?;
    let inbox = generate_inbox_labels(radar, &instances)?;
    let (mut radar_flow, recovered) =
        recover_outbox_radar(radar, &inbox, &instances, params, radar_sensor, dt)?;
    radar_flow.mask = confidence_mask(radar, &radar_flow, params.gamma_thre, radar_sensor, dt)?;
    radar_flow.motion_class = classify_points(&radar_flow, dt, params.dynamic_speed_min);

    let mut lidar_flow = generate_inbox_labels(lidar, &instances)?;
    lidar_flow.motion_class = classify_points(&lidar_flow, dt, params.dynamic_speed_min);
    Ok(LabeledFrame {
        radar: radar.clone(),
        radar_flow,
        lidar: lidar.clone(),
        lidar_flow,
        instances,
        recovered,
    })
}
