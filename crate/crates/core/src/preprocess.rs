//! Ground removal, radar-to-LiDAR alignment and cross-modal radar denoising.

use std::collections::HashSet;
use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{LidarCloud, RadarCloud, SE3Transform, Vec3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroundParams {
    pub num_segments: usize,
    pub num_bins: usize,
    pub max_slope: f64,
    pub ground_z_tolerance: f64,
    /// Seed prototypes must lie at most this far above the sensor-ground
    /// estimate.
    pub seed_z_max: f64,
}

impl Default for GroundParams {
    fn default() -> Self {
        Self {
            num_segments: 32,
            num_bins: 64,
            max_slope: 0.15,
            ground_z_tolerance: 0.25,
            seed_z_max: 0.3,
        }
    }
}

impl GroundParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.num_segments > 0
            && self.num_bins > 0
            && self.max_slope > 0.0
            && self.max_slope < PI / 2.0
            && self.ground_z_tolerance > 0.0
            && self.seed_z_max > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid ground parameters {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiseParams {
    pub dynamic_arv_min: f64,
    pub theta_thre: f64,
    pub bev_grid: f64,
}

impl Default for DenoiseParams {
    fn default() -> Self {
        Self {
            dynamic_arv_min: 0.5,
            theta_thre: 10.0,
            bev_grid: 0.8,
        }
    }
}

impl DenoiseParams {
    pub fn validate(&self) -> Result<()> {
        if self.dynamic_arv_min > 0.0 && self.theta_thre > 0.0 && self.bev_grid > 0.0 {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid denoise parameters {self:?}"
            )))
        }
    }
}

/// A fitted ground line `z = intercept + slope * r` over a range interval.
#[derive(Clone, Copy, Debug)]
struct GroundLine {
    slope: f64,
    intercept: f64,
    r_min: f64,
    r_max: f64,
}

impl GroundLine {
    fn z_at(&self, r: f64) -> f64 {
        self.intercept + self.slope * r
    }
}

fn fit_line(pts: &[(f64, f64)]) -> (f64, f64) {
    let n = pts.len() as f64;
    let mr = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let mz = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mr).powi(2)).sum();
    let sxz: f64 = pts.iter().map(|p| (p.0 - mr) * (p.1 - mz)).sum();
    let slope = if sxx > 0.0 { sxz / sxx } else { 0.0 };
    (slope, mz - slope * mr)
}

fn finish(seg: &[(f64, f64)], lines: &mut Vec<GroundLine>) {
    if seg.is_empty() {
        return;
    }
    let (slope, intercept) = fit_line(seg);
    lines.push(GroundLine {
        slope,
        intercept,
        r_min: seg[0].0,
        r_max: seg[seg.len() - 1].0,
    });
}

/// Incremental piecewise line fit over one sector's bin prototypes, ordered
/// by range.
fn fit_sector(protos: &[(f64, f64)], ground_est: f64, p: &GroundParams) -> Vec<GroundLine> {
    let mut lines = Vec::new();
    let mut seg: Vec<(f64, f64)> = Vec::new();
    for &(r, z) in protos {
        match seg.len() {
            0 => {
                if z <= ground_est + p.seed_z_max {
                    seg.push((r, z));
                }
            }
            1 => {
                let (r0, z0) = seg[0];
                if ((z - z0) / (r - r0).max(1e-9)).abs() <= p.max_slope {
                    seg.push((r, z));
                } else if z < z0 && z <= ground_est + p.seed_z_max {
                    // a lower seed replaces an implausible one
                    seg[0] = (r, z);
                }
            }
            _ => {
                let (slope, icpt) = fit_line(&seg);
                let predicted = icpt + slope * r;
                let mut cand = seg.clone();
                cand.push((r, z));
                let (cs, ci) = fit_line(&cand);
                let fits = cs.abs() <= p.max_slope
                    && cand
                        .iter()
                        .all(|&(rr, zz)| (zz - (ci + cs * rr)).abs() <= p.ground_z_tolerance);
                if fits {
                    seg = cand;
                } else if (z - predicted).abs() <= 2.0 * p.ground_z_tolerance {
                    // slope change: start a new piece from the last accepted prototype
                    let last = seg[seg.len() - 1];
                    if ((z - last.1) / (r - last.0).max(1e-9)).abs() <= p.max_slope {
                        finish(&seg, &mut lines);
                        seg = vec![last, (r, z)];
                    }
                }
                // otherwise the prototype belongs to an obstacle; skip it
            }
        }
    }
    if seg.len() >= 2 {
        finish(&seg, &mut lines);
    } else if seg.len() == 1 {
        // a lone seed still describes flat ground locally
        lines.push(GroundLine {
            slope: 0.0,
            intercept: seg[0].1,
            r_min: seg[0].0,
            r_max: seg[0].0,
        });
    }
    lines
}

fn line_for(lines: &[GroundLine], r: f64) -> Option<&GroundLine> {
    if let Some(l) = lines.iter().find(|l| r >= l.r_min && r <= l.r_max) {
        return Some(l);
    }
    lines.iter().min_by(|a, b| {
        let da = (a.r_min - r).abs().min((a.r_max - r).abs());
        let db = (b.r_min - r).abs().min((b.r_max - r).abs());
        da.total_cmp(&db)
    })
}

/// Polar-grid line-fit ground segmentation. Returns a keep mask (false for
/// ground). The sensor is the local origin.
pub fn remove_ground(points: &[Vec3], params: &GroundParams) -> Result<Vec<bool>> {
    params.validate()?;
    if points.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let max_r = points.iter().map(|p| p.norm_xy()).fold(0.0, f64::max);
    let bin_size = (max_r / params.num_bins as f64).max(1e-9) * (1.0 + 1e-12);
    let sector_of = |p: &Vec3| -> usize {
        let a = p.y.atan2(p.x).rem_euclid(TAU);
        ((a / TAU * params.num_segments as f64) as usize).min(params.num_segments - 1)
    };
    let bin_of = |r: f64| -> usize { ((r / bin_size) as usize).min(params.num_bins - 1) };

    // lowest point per (sector, bin)
    let mut protos: Vec<Option<(f64, f64)>> = vec![None; params.num_segments * params.num_bins];
    let mut cells = Vec::with_capacity(points.len());
    for p in points {
        let r = p.norm_xy();
        let s = sector_of(p);
        cells.push(s);
        let slot = &mut protos[s * params.num_bins + bin_of(r)];
        match slot {
            Some((_, z)) if *z <= p.z => {}
            _ => *slot = Some((r, p.z)),
        }
    }

    let mut zs: Vec<f64> = protos.iter().flatten().map(|p| p.1).collect();
    zs.sort_by(f64::total_cmp);
    let ground_est = zs[zs.len() / 2];

    let lines: Vec<Vec<GroundLine>> = (0..params.num_segments)
        .map(|s| {
            let sector: Vec<(f64, f64)> = protos[s * params.num_bins..(s + 1) * params.num_bins]
                .iter()
                .flatten()
                .copied()
                .collect();
            fit_sector(&sector, ground_est, params)
        })
        .collect();

    Ok(points
        .iter()
        .zip(cells)
        .map(|(p, s)| match line_for(&lines[s], p.norm_xy()) {
            Some(l) => (p.z - l.z_at(p.norm_xy())).abs() > params.ground_z_tolerance,
            None => true,
        })
        .collect())
}

/// Runs ground removal on the union of both clouds and splits the mask back.
pub fn remove_ground_combined(
    radar: &RadarCloud,
    lidar: &LidarCloud,
    params: &GroundParams,
) -> Result<(Vec<bool>, Vec<bool>)> {
    let mut all = radar.positions();
    all.extend(lidar.positions());
    let mask = remove_ground(&all, params)?;
    let (r, l) = mask.split_at(radar.len());
    Ok((r.to_vec(), l.to_vec()))
}

/// Moves radar positions into the LiDAR frame. ARV values are carried over
/// unchanged, which treats the two sensors' lines of sight as parallel.
pub fn project_radar_to_lidar(radar: &RadarCloud, extrinsic: &SE3Transform) -> RadarCloud {
    radar.transformed(extrinsic)
}

/// Hard ARV ceiling: mean `|arv|` of the dynamic points plus `theta_thre`, or
/// `None` when no point is dynamic.
pub fn arv_ceiling(arvs: impl IntoIterator<Item = f64>, params: &DenoiseParams) -> Option<f64> {
    let (sum, n) = arvs
        .into_iter()
        .map(f64::abs)
        .filter(|a| *a > params.dynamic_arv_min)
        .fold((0.0, 0usize), |(s, n), a| (s + a, n + 1));
    (n > 0).then(|| sum / n as f64 + params.theta_thre)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiseOutcome {
    pub keep: Vec<bool>,
    pub hard_keep: Vec<bool>,
    pub soft_keep: Vec<bool>,
    pub ceiling: Option<f64>,
}

fn bev_cell(p: Vec3, origin: (f64, f64), g: f64) -> (i64, i64) {
    (
        ((p.x - origin.0) / g).floor() as i64,
        ((p.y - origin.1) / g).floor() as i64,
    )
}

/// Two-stage radar outlier removal: an ARV ceiling, then a LiDAR-support test
/// over the 3x3 BEV neighbourhood of each radar point.
pub fn denoise_radar(
    radar: &RadarCloud,
    lidar: &LidarCloud,
    params: &DenoiseParams,
) -> Result<DenoiseOutcome> {
    params.validate()?;
    if radar.frame_id != lidar.frame_id {
        return Err(Error::FrameMismatch(
            radar.frame_id.clone(),
            lidar.frame_id.clone(),
        ));
    }
    let ceiling = arv_ceiling(radar.points.iter().map(|p| p.arv), params);
    let hard_keep: Vec<bool> = radar
        .points
        .iter()
        .map(|p| ceiling.is_none_or(|mu| p.arv.abs() <= mu))
        .collect();

    let origin = radar
        .points
        .iter()
        .map(|p| p.position)
        .chain(lidar.points.iter().map(|p| p.position))
        .fold((f64::INFINITY, f64::INFINITY), |(x, y), p| {
            (x.min(p.x), y.min(p.y))
        });
    let occupied: HashSet<(i64, i64)> = lidar
        .points
        .iter()
        .map(|p| bev_cell(p.position, origin, params.bev_grid))
        .collect();
    let soft_keep: Vec<bool> = radar
        .points
        .iter()
        .map(|p| {
            let (cx, cy) = bev_cell(p.position, origin, params.bev_grid);
            (-1..=1).any(|dx| (-1..=1).any(|dy| occupied.contains(&(cx + dx, cy + dy))))
        })
        .collect();
    let keep = hard_keep
        .iter()
        .zip(&soft_keep)
        .map(|(a, b)| *a && *b)
        .collect();
    Ok(DenoiseOutcome {
        keep,
        hard_keep,
        soft_keep,
        ceiling,
    })
}
