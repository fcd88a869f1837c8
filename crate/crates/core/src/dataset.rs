//! Frame pairs in memory and on disk.
//!
//! Directory layout:
//!
//! ```text
//! manifest.json          dt, radar extrinsic, frames {id, radar, lidar, boxes, ego}, pairs
//! radar/<id>.csv         x,y,z,arv,rrv,rcs      (radar sensor frame)
//! lidar/<id>.csv         x,y,z,intensity        (LiDAR frame)
//! boxes/<id>.json        [{track_id, class, cx, cy, cz, l, w, h, yaw}]
//! truth/<id>.csv         generator truth for source radar points (synthetic only)
//! ```
//!
//! `ego` is the frame's LiDAR pose in a scene world frame as a row-major 4x4
//! matrix. Floats in CSV files carry 17 significant digits.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::geom::{
    BoxDims, EgoMotion, FlowField, LidarCloud, LidarPoint, MotionClass, RadarCloud, RadarPoint,
    SE3Transform, TrackedBox, Vec3,
};
use crate::rng::SplitMix64;
use crate::synthgen::{generate_scene, RadarTruth, SceneConfig, SyntheticScene};

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub id: String,
    /// Radar sensor frame.
    pub radar: RadarCloud,
    pub lidar: LidarCloud,
    /// LiDAR frame.
    pub boxes: Vec<TrackedBox>,
    /// LiDAR frame to scene world.
    pub ego: SE3Transform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dt: f64,
    /// Radar frame to LiDAR frame.
    pub radar_extrinsic: SE3Transform,
    pub frames: Vec<Frame>,
    /// (source, target) frame indices.
    pub pairs: Vec<(usize, usize)>,
}

impl Dataset {
    pub fn ego_motion(&self, pair: usize) -> Result<EgoMotion> {
        let (s, t) = self.pairs[pair];
        let src = &self.frames[s].ego;
        let tgt = &self.frames[t].ego;
        EgoMotion::new(tgt.inverse().compose(src), self.dt)
    }

    /// A dataset restricted to the given pairs, with frames renumbered.
    pub fn subset(&self, pairs: &[usize]) -> Dataset {
        let mut frames = Vec::new();
        let mut map = std::collections::BTreeMap::new();
        let mut index = |f: usize, frames: &mut Vec<Frame>| {
            *map.entry(f).or_insert_with(|| {
                frames.push(self.frames[f].clone());
                frames.len() - 1
            })
        };
        let new_pairs = pairs
            .iter()
            .map(|&p| {
                let (s, t) = self.pairs[p];
                (index(s, &mut frames), index(t, &mut frames))
            })
            .collect();
        Dataset {
            dt: self.dt,
            radar_extrinsic: self.radar_extrinsic,
            frames,
            pairs: new_pairs,
        }
    }
}

/// Generator truth kept next to a synthetic dataset, per pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairTruth {
    pub radar: Vec<RadarTruth>,
    pub radar_flow: Vec<Vec3>,
    pub lidar_flow: Vec<Vec3>,
}

impl From<&SyntheticScene> for PairTruth {
    fn from(s: &SyntheticScene) -> Self {
        Self {
            radar: s.src.radar_truth.clone(),
            radar_flow: s.radar_flow.clone(),
            lidar_flow: s.lidar_flow.clone(),
        }
    }
}

/// Seed of the `i`-th scene of a dataset.
pub fn scene_seed(seed: u64, i: usize) -> u64 {
    SplitMix64::derive(seed, i as u64).next_u64()
}

/// `n_pairs` independent scenes, each contributing one source/target pair.
pub fn synthesize(cfg: &SceneConfig, n_pairs: usize) -> Result<(Dataset, Vec<PairTruth>)> {
    cfg.validate()?;
    let idx: Vec<usize> = (0..n_pairs).collect();
    let scenes = exec::try_map_ordered(&idx, |&i| {
        generate_scene(&SceneConfig {
            seed: scene_seed(cfg.seed, i),
            ..cfg.clone()
        })
    })?;
    let mut frames = Vec::with_capacity(2 * n_pairs);
    let mut pairs = Vec::with_capacity(n_pairs);
    let mut truth = Vec::with_capacity(n_pairs);
    for (i, s) in scenes.iter().enumerate() {
        truth.push(PairTruth::from(s));
        for (f, tag) in [(&s.src, "a"), (&s.tgt, "b")] {
            let id = format!("{i:05}{tag}");
            frames.push(Frame {
                radar: RadarCloud::new(id.clone(), f.radar.points.clone()),
                lidar: LidarCloud::new(id.clone(), f.lidar.points.clone()),
                id,
                boxes: f.boxes.clone(),
                ego: f.pose,
            });
        }
        pairs.push((2 * i, 2 * i + 1));
    }
    Ok((
        Dataset {
            dt: cfg.dt,
            radar_extrinsic: cfg.radar_extrinsic(),
            frames,
            pairs,
        },
        truth,
    ))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFrame {
    id: String,
    radar: String,
    lidar: String,
    boxes: String,
    ego: [[f64; 4]; 4],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    dt: f64,
    radar_extrinsic: [[f64; 4]; 4],
    frames: Vec<ManifestFrame>,
    pairs: Vec<(String, String)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoxRecord {
    track_id: u32,
    class: String,
    cx: f64,
    cy: f64,
    cz: f64,
    l: f64,
    w: f64,
    h: f64,
    yaw: f64,
}

pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn schema(path: &Path, msg: impl Into<String>) -> Error {
    Error::Schema {
        file: path.display().to_string(),
        msg: msg.into(),
    }
}

/// Writes a header and rows of preformatted fields.
pub fn write_csv(
    path: &Path,
    header: &[&str],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a CSV whose header must equal `header`; returns the string fields.
pub fn read_csv(path: &Path, header: &[&str]) -> Result<Vec<csv::StringRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => schema(path, format!("{other:?}")),
    })?;
    let got: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if got != header {
        return Err(schema(
            path,
            format!("expected columns {header:?}, got {got:?}"),
        ));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec?);
    }
    Ok(rows)
}

pub fn parse_f64(path: &Path, s: &str) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| schema(path, format!("not a number: {s:?}")))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(schema(path, format!("non-finite value {s:?}")))
    }
}

fn floats<const N: usize>(path: &Path, rec: &csv::StringRecord) -> Result<[f64; N]> {
    let mut out = [0.0; N];
    for (o, s) in out.iter_mut().zip(rec.iter()) {
        *o = parse_f64(path, s)?;
    }
    Ok(out)
}

const RADAR_HEADER: [&str; 6] = ["x", "y", "z", "arv", "rrv", "rcs"];
const LIDAR_HEADER: [&str; 4] = ["x", "y", "z", "intensity"];
const TRUTH_HEADER: [&str; 8] = ["object", "outlier", "vx", "vy", "vz", "fx", "fy", "fz"];
const LIDAR_TRUTH_HEADER: [&str; 3] = ["fx", "fy", "fz"];

pub fn write_radar_csv(path: &Path, cloud: &RadarCloud) -> Result<()> {
    write_csv(
        path,
        &RADAR_HEADER,
        cloud.points.iter().map(|p| {
            [
                p.position.x,
                p.position.y,
                p.position.z,
                p.arv,
                p.rrv,
                p.rcs,
            ]
            .iter()
            .map(|v| fmt_f64(*v))
            .collect()
        }),
    )
}

pub fn write_lidar_csv(path: &Path, cloud: &LidarCloud) -> Result<()> {
    write_csv(
        path,
        &LIDAR_HEADER,
        cloud.points.iter().map(|p| {
            [p.position.x, p.position.y, p.position.z, p.intensity]
                .iter()
                .map(|v| fmt_f64(*v))
                .collect()
        }),
    )
}

pub fn read_radar_csv(path: &Path, id: &str) -> Result<RadarCloud> {
    let points = read_csv(path, &RADAR_HEADER)?
        .iter()
        .map(|r| {
            let [x, y, z, arv, rrv, rcs] = floats::<6>(path, r)?;
            Ok(RadarPoint {
                position: Vec3::new(x, y, z),
                arv,
                rrv,
                rcs,
            })
        })
        .collect::<Result<_>>()?;
    Ok(RadarCloud::new(id, points))
}

pub fn read_lidar_csv(path: &Path, id: &str) -> Result<LidarCloud> {
    let points = read_csv(path, &LIDAR_HEADER)?
        .iter()
        .map(|r| {
            let [x, y, z, intensity] = floats::<4>(path, r)?;
            Ok(LidarPoint {
                position: Vec3::new(x, y, z),
                intensity,
            })
        })
        .collect::<Result<_>>()?;
    Ok(LidarCloud::new(id, points))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| schema(path, e.to_string()))
}

fn write_boxes(path: &Path, boxes: &[TrackedBox]) -> Result<()> {
    let recs: Vec<BoxRecord> = boxes
        .iter()
        .map(|b| BoxRecord {
            track_id: b.track_id,
            class: b.class_label.clone(),
            cx: b.center.x,
            cy: b.center.y,
            cz: b.center.z,
            l: b.dims.length,
            w: b.dims.width,
            h: b.dims.height,
            yaw: b.yaw,
        })
        .collect();
    write_json(path, &recs)
}

fn read_boxes(path: &Path) -> Result<Vec<TrackedBox>> {
    let recs: Vec<BoxRecord> = read_json(path)?;
    recs.into_iter()
        .map(|r| {
            TrackedBox::new(
                r.track_id,
                r.class,
                Vec3::new(r.cx, r.cy, r.cz),
                BoxDims {
                    length: r.l,
                    width: r.w,
                    height: r.h,
                },
                r.yaw,
            )
            .map_err(|e| schema(path, e.to_string()))
        })
        .collect()
}

fn frame_paths(id: &str) -> (String, String, String) {
    (
        format!("radar/{id}.csv"),
        format!("lidar/{id}.csv"),
        format!("boxes/{id}.json"),
    )
}

pub fn write_dataset(dir: &Path, ds: &Dataset, truth: Option<&[PairTruth]>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut frames = Vec::new();
    for f in &ds.frames {
        let (r, l, b) = frame_paths(&f.id);
        write_radar_csv(&dir.join(&r), &f.radar)?;
        write_lidar_csv(&dir.join(&l), &f.lidar)?;
        write_boxes(&dir.join(&b), &f.boxes)?;
        frames.push(ManifestFrame {
            id: f.id.clone(),
            radar: r,
            lidar: l,
            boxes: b,
            ego: f.ego.to_matrix(),
        });
    }
    let manifest = Manifest {
        dt: ds.dt,
        radar_extrinsic: ds.radar_extrinsic.to_matrix(),
        frames,
        pairs: ds
            .pairs
            .iter()
            .map(|&(s, t)| (ds.frames[s].id.clone(), ds.frames[t].id.clone()))
            .collect(),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    if let Some(truth) = truth {
        for (&(s, _), t) in ds.pairs.iter().zip(truth) {
            let id = &ds.frames[s].id;
            write_csv(
                &dir.join(format!("truth/{id}.csv")),
                &TRUTH_HEADER,
                t.radar.iter().zip(&t.radar_flow).map(|(r, f)| {
                    let mut row = vec![
                        r.object.map_or("-1".to_string(), |o| o.to_string()),
                        u8::from(r.outlier).to_string(),
                    ];
                    row.extend(
                        [r.velocity.x, r.velocity.y, r.velocity.z, f.x, f.y, f.z].map(fmt_f64),
                    );
                    row
                }),
            )?;
            write_csv(
                &dir.join(format!("truth/{id}_lidar.csv")),
                &LIDAR_TRUTH_HEADER,
                t.lidar_flow
                    .iter()
                    .map(|f| vec![fmt_f64(f.x), fmt_f64(f.y), fmt_f64(f.z)]),
            )?;
        }
    }
    Ok(())
}

fn matrix(path: &Path, m: &[[f64; 4]; 4]) -> Result<SE3Transform> {
    SE3Transform::from_matrix(m).map_err(|e| schema(path, format!("bad transform: {e}")))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join("manifest.json");
    let manifest: Manifest = read_json(&mpath)?;
    if !(manifest.dt > 0.0 && manifest.dt.is_finite()) {
        return Err(schema(&mpath, "dt must be positive"));
    }
    let mut frames = Vec::with_capacity(manifest.frames.len());
    let mut ids = std::collections::BTreeMap::new();
    for (i, f) in manifest.frames.iter().enumerate() {
        if ids.insert(f.id.clone(), i).is_some() {
            return Err(schema(&mpath, format!("duplicate frame id {}", f.id)));
        }
        frames.push(Frame {
            radar: read_radar_csv(&dir.join(&f.radar), &f.id)?,
            lidar: read_lidar_csv(&dir.join(&f.lidar), &f.id)?,
            boxes: read_boxes(&dir.join(&f.boxes))?,
            ego: matrix(&mpath, &f.ego)?,
            id: f.id.clone(),
        });
    }
    let pairs = manifest
        .pairs
        .iter()
        .map(|(s, t)| match (ids.get(s), ids.get(t)) {
            (Some(&a), Some(&b)) => Ok((a, b)),
            _ => Err(schema(
                &mpath,
                format!("pair ({s}, {t}) names an unknown frame"),
            )),
        })
        .collect::<Result<_>>()?;
    Ok(Dataset {
        dt: manifest.dt,
        radar_extrinsic: matrix(&mpath, &manifest.radar_extrinsic)?,
        frames,
        pairs,
    })
}

pub fn read_truth(dir: &Path, ds: &Dataset) -> Result<Vec<PairTruth>> {
    ds.pairs
        .iter()
        .map(|&(s, _)| {
            let id = &ds.frames[s].id;
            let path = dir.join(format!("truth/{id}.csv"));
            let mut radar = Vec::new();
            let mut radar_flow = Vec::new();
            for r in read_csv(&path, &TRUTH_HEADER)? {
                let object: i64 = r[0].parse().map_err(|_| schema(&path, "bad object id"))?;
                let v = [2, 3, 4, 5, 6, 7].map(|k| parse_f64(&path, &r[k]));
                let v: Vec<f64> = v.into_iter().collect::<Result<_>>()?;
                radar.push(RadarTruth {
                    object: u32::try_from(object).ok(),
                    outlier: &r[1] == "1",
                    velocity: Vec3::new(v[0], v[1], v[2]),
                });
                radar_flow.push(Vec3::new(v[3], v[4], v[5]));
            }
            let lpath = dir.join(format!("truth/{id}_lidar.csv"));
            let lidar_flow = read_csv(&lpath, &LIDAR_TRUTH_HEADER)?
                .iter()
                .map(|r| Ok(Vec3::from_slice(&floats::<3>(&lpath, r)?)))
                .collect::<Result<_>>()?;
            Ok(PairTruth {
                radar,
                radar_flow,
                lidar_flow,
            })
        })
        .collect()
}

pub const LABEL_HEADER: [&str; 6] = ["fx", "fy", "fz", "mask", "class", "instance_id"];

pub fn write_labels(path: &Path, field: &FlowField) -> Result<()> {
    write_csv(
        path,
        &LABEL_HEADER,
        (0..field.len()).map(|i| {
            let f = field.gt_flows[i];
            vec![
                fmt_f64(f.x),
                fmt_f64(f.y),
                fmt_f64(f.z),
                u8::from(field.mask[i]).to_string(),
                field.motion_class[i].as_str().to_string(),
                field.instance_id[i].map_or("-1".to_string(), |h| h.to_string()),
            ]
        }),
    )
}

pub fn read_labels(path: &Path) -> Result<FlowField> {
    let rows = read_csv(path, &LABEL_HEADER)?;
    let mut field = FlowField::zeros(rows.len());
    for (i, r) in rows.iter().enumerate() {
        let [x, y, z] = floats::<3>(path, r)?;
        field.gt_flows[i] = Vec3::new(x, y, z);
        field.mask[i] = match &r[3] {
            "1" => true,
            "0" => false,
            other => return Err(schema(path, format!("bad mask {other:?}"))),
        };
        field.motion_class[i] =
            MotionClass::parse(&r[4]).ok_or_else(|| schema(path, "bad class"))?;
        let h: i64 = r[5].parse().map_err(|_| schema(path, "bad instance id"))?;
        field.instance_id[i] = usize::try_from(h).ok();
    }
    Ok(field)
}

/// `dir/sub/name`, creating `dir/sub`.
pub fn out_path(dir: &Path, sub: &str, name: &str) -> Result<PathBuf> {
    let d = dir.join(sub);
    fs::create_dir_all(&d)?;
    Ok(d.join(name))
}
