//! End point error metrics: 3D EPE and the class-balanced 3-way EPE.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{MotionClass, Vec3};

pub fn epe_3d(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch {
            expected: gt.len(),
            got: pred.len(),
        });
    }
    if gt.is_empty() {
        return Ok(0.0);
    }
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(p, g)| (*p - *g).norm())
        .sum::<f64>()
        / gt.len() as f64)
}

/// Unweighted mean of the available class means.
pub fn three_way(fd: Option<f64>, bs: Option<f64>, fs: Option<f64>) -> Option<f64> {
    let present: Vec<f64> = [fd, bs, fs].into_iter().flatten().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub fd: usize,
    pub bs: usize,
    pub fs: usize,
}

/// Per-modality metrics. Class means are `None` for empty classes, which are
/// left out of `epe_3way` and raise `incomplete_classes`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModalityMetrics {
    pub epe_3d: f64,
    pub epe_3way: Option<f64>,
    pub epe_fd: Option<f64>,
    pub epe_bs: Option<f64>,
    pub epe_fs: Option<f64>,
    pub counts: ClassCounts,
    pub incomplete_classes: bool,
}

/// Running sums so metrics can be pooled over many frames.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpeAccumulator {
    sum: [f64; 3],
    count: [usize; 3],
}

fn slot(c: MotionClass) -> usize {
    match c {
        MotionClass::FD => 0,
        MotionClass::BS => 1,
        MotionClass::FS => 2,
    }
}

impl EpeAccumulator {
    pub fn add(&mut self, pred: &[Vec3], gt: &[Vec3], classes: &[MotionClass]) -> Result<()> {
        if pred.len() != gt.len() || classes.len() != gt.len() {
            return Err(Error::LengthMismatch {
                expected: gt.len(),
                got: if pred.len() != gt.len() {
                    pred.len()
                } else {
                    classes.len()
                },
            });
        }
        for ((p, g), c) in pred.iter().zip(gt).zip(classes) {
            let s = slot(*c);
            self.sum[s] += (*p - *g).norm();
            self.count[s] += 1;
        }
        Ok(())
    }

    pub fn finish(&self) -> ModalityMetrics {
        let mean = |s: usize| (self.count[s] > 0).then(|| self.sum[s] / self.count[s] as f64);
        let total: usize = self.count.iter().sum();
        let (fd, bs, fs) = (mean(0), mean(1), mean(2));
        ModalityMetrics {
            epe_3d: if total > 0 {
                self.sum.iter().sum::<f64>() / total as f64
            } else {
                0.0
            },
            epe_3way: three_way(fd, bs, fs),
            epe_fd: fd,
            epe_bs: bs,
            epe_fs: fs,
            counts: ClassCounts {
                fd: self.count[0],
                bs: self.count[1],
                fs: self.count[2],
            },
            incomplete_classes: self.count.contains(&0),
        }
    }
}

pub fn epe_3way(pred: &[Vec3], gt: &[Vec3], classes: &[MotionClass]) -> Result<ModalityMetrics> {
    let mut acc = EpeAccumulator::default();
    acc.add(pred, gt, classes)?;
    Ok(acc.finish())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub radar: ModalityMetrics,
    pub lidar: ModalityMetrics,
}
