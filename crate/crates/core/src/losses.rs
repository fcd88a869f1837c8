//! Training losses: speed-bucketed LiDAR flow loss, masked radar flow loss,
//! instance-level dynamic flow consistency, and their sum.

use raliflow_tensor::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec3;

/// Speeds (m/s) separating the three buckets.
pub const FAST_SPEED: f64 = 1.0;
pub const SLOW_SPEED: f64 = 0.4;
/// Ground-truth speed (m/s) above which a foreground point joins its
/// instance's dynamic set.
pub const INSTANCE_DYNAMIC_SPEED: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BucketSource {
    /// Bucket by the current prediction.
    #[default]
    Pred,
    /// Bucket by the label.
    Gt,
}

/// Whether the leading prediction `V(p_κ)` of the instance loss passes
/// gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KappaTarget {
    /// Differentiable: the leader is pulled toward its instance as well.
    #[default]
    Live,
    /// Held constant; only the other members move.
    Detached,
}

/// Loss switches that are not network parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LossOptions {
    pub bucket_source: BucketSource,
    pub kappa_target: KappaTarget,
}

/// Indices split by speed: above 1.0 m/s, below 0.4 m/s, and in between.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SpeedBuckets {
    pub fast: Vec<usize>,
    pub slow: Vec<usize>,
    pub mid: Vec<usize>,
}

impl SpeedBuckets {
    pub fn all(&self) -> [&[usize]; 3] {
        [&self.fast, &self.slow, &self.mid]
    }
}

pub fn speed_buckets(flows: &[Vec3], dt: f64) -> SpeedBuckets {
    let mut b = SpeedBuckets::default();
    for (i, f) in flows.iter().enumerate() {
        let s = f.norm() / dt;
        if s > FAST_SPEED {
            b.fast.push(i);
        } else if s < SLOW_SPEED {
            b.slow.push(i);
        } else {
            b.mid.push(i);
        }
    }
    b
}

/// Reads an `[m, 3]` tensor as vectors.
pub fn rows_to_vec3(t: &Tensor) -> Vec<Vec3> {
    t.data().chunks_exact(3).map(Vec3::from_slice).collect()
}

pub fn vec3_to_rows(v: &[Vec3]) -> Result<Tensor> {
    Ok(Tensor::new(
        &[v.len(), 3],
        v.iter().flat_map(|p| p.to_array()).collect(),
    )?)
}

fn zero(g: &mut Graph) -> Var {
    g.constant(Tensor::scalar(0.0))
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::LengthMismatch { expected, got });
    }
    Ok(())
}

/// Sum over buckets of the mean L2 error inside each bucket. Empty buckets
/// contribute nothing.
pub fn bucketed_flow_loss(
    g: &mut Graph,
    pred: Var,
    gt: &[Vec3],
    buckets: &SpeedBuckets,
) -> Result<Var> {
    check_len(g.shape(pred)[0], gt.len())?;
    let mut total: Option<Var> = None;
    for idx in buckets.all() {
        if idx.is_empty() {
            continue;
        }
        let p = g.gather_rows(pred, idx)?;
        let t: Vec<Vec3> = idx.iter().map(|&i| gt[i]).collect();
        let t = g.constant(vec3_to_rows(&t)?);
        let d = g.sub(p, t)?;
        let n = g.l2_norm_rows(d)?;
        let s = g.sum_all(n);
        let m = g.scale(s, 1.0 / idx.len() as f64);
        total = Some(match total {
            None => m,
            Some(acc) => g.add(acc, m)?,
        });
    }
    Ok(total.unwrap_or_else(|| zero(g)))
}

fn buckets_for(
    g: &mut Graph,
    pred: Var,
    gt: &[Vec3],
    dt: f64,
    source: BucketSource,
) -> SpeedBuckets {
    match source {
        BucketSource::Pred => {
            let b = speed_buckets(&rows_to_vec3(g.value(pred)), dt);
            for (k, idx) in b.all().iter().enumerate() {
                for &i in idx.iter() {
                    g.note_branch(((i as u64) << 2) | k as u64);
                }
            }
            b
        }
        BucketSource::Gt => speed_buckets(gt, dt),
    }
}

pub fn lidar_flow_loss(
    g: &mut Graph,
    pred: Var,
    gt: &[Vec3],
    dt: f64,
    source: BucketSource,
) -> Result<Var> {
    check_len(g.shape(pred)[0], gt.len())?;
    let b = buckets_for(g, pred, gt, dt, source);
    bucketed_flow_loss(g, pred, gt, &b)
}

/// The bucketed loss over mask-1 points only. Mask-0 rows are never read.
pub fn masked_radar_flow_loss(
    g: &mut Graph,
    pred: Var,
    gt: &[Vec3],
    mask: &[bool],
    dt: f64,
    source: BucketSource,
) -> Result<Var> {
    check_len(g.shape(pred)[0], gt.len())?;
    check_len(gt.len(), mask.len())?;
    let keep: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    if keep.is_empty() {
        return Ok(zero(g));
    }
    let p = g.gather_rows(pred, &keep)?;
    let t: Vec<Vec3> = keep.iter().map(|&i| gt[i]).collect();
    let b = buckets_for(g, p, &t, dt, source);
    bucketed_flow_loss(g, p, &t, &b)
}

/// Labels of one modality's prediction rows.
#[derive(Clone, Copy, Debug)]
pub struct InstanceRows<'a> {
    pub pred: Option<Var>,
    pub instance: &'a [Option<usize>],
    pub gt: &'a [Vec3],
}

/// For each instance, the mean distance of its dynamic points' predictions
/// to the prediction with the largest norm. Radar rows come before LiDAR
/// rows when resolving ties.
pub fn instance_consistency_loss(
    g: &mut Graph,
    modalities: &[InstanceRows<'_>],
    dt: f64,
    kappa_target: KappaTarget,
) -> Result<Var> {
    let mut per_instance: std::collections::BTreeMap<usize, Vec<(usize, usize)>> =
        Default::default();
    for (m, rows) in modalities.iter().enumerate() {
        check_len(rows.instance.len(), rows.gt.len())?;
        let Some(pred) = rows.pred else { continue };
        check_len(g.shape(pred)[0], rows.gt.len())?;
        for (i, inst) in rows.instance.iter().enumerate() {
            if let Some(h) = inst {
                if rows.gt[i].norm() / dt >= INSTANCE_DYNAMIC_SPEED {
                    per_instance.entry(*h).or_default().push((m, i));
                }
            }
        }
    }
    let mut total: Option<Var> = None;
    for members in per_instance.values() {
        if members.len() <= 1 {
            continue;
        }
        let values: Vec<Vec3> = members
            .iter()
            .map(|&(m, i)| Vec3::from_slice(g.value(modalities[m].pred.expect("present")).row(i)))
            .collect();
        let mut kappa = 0;
        for (k, v) in values.iter().enumerate() {
            if v.norm() > values[kappa].norm() {
                kappa = k;
            }
        }
        let mut parts = Vec::new();
        for (m, rows) in modalities.iter().enumerate() {
            let idx: Vec<usize> = members
                .iter()
                .filter(|(mm, _)| *mm == m)
                .map(|(_, i)| *i)
                .collect();
            if !idx.is_empty() {
                parts.push(g.gather_rows(rows.pred.expect("present"), &idx)?);
            }
        }
        let merged = if parts.len() == 1 {
            parts[0]
        } else {
            g.concat(&parts, 0)?
        };
        g.note_branch(kappa as u64);
        let target = match kappa_target {
            KappaTarget::Detached => g.detached(Tensor::vector(values[kappa].to_array().to_vec())),
            KappaTarget::Live => {
                let (m, i) = members[kappa];
                let row = g.gather_rows(modalities[m].pred.expect("present"), &[i])?;
                g.reshape(row, &[3])?
            }
        };
        let d = g.sub(merged, target)?;
        let n = g.l2_norm_rows(d)?;
        let l = g.mean_all(n);
        total = Some(match total {
            None => l,
            Some(acc) => g.add(acc, l)?,
        });
    }
    Ok(total.unwrap_or_else(|| zero(g)))
}

pub fn total_loss(g: &mut Graph, l_li: Var, l_ra: Var, l_ins: Var) -> Result<Var> {
    let s = g.add(l_li, l_ra)?;
    Ok(g.add(s, l_ins)?)
}
