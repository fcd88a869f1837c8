//! Bird's-eye-view pillar grid: point-to-cell assignment, the learned pillar
//! encoder, the dynamic radar map and its Gaussian heatmap.

use raliflow_tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{LidarCloud, Point, PointCloud, RadarCloud, RadarPoint};
use crate::rng::SplitMix64;

/// Radar cells count as dynamic above this |ARV| (m/s).
pub const DYNAMIC_CELL_ARV: f64 = 0.1;

/// Per-point input width of the pillar encoder.
pub const POINT_FEATURES: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub origin: (f64, f64),
    /// Cell edge in meters.
    pub resolution: f64,
    /// Cells along x.
    pub width: usize,
    /// Cells along y.
    pub height: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            origin: (0.0, -6.4),
            resolution: 0.2,
            width: 64,
            height: 64,
        }
    }
}

impl GridSpec {
    pub const MAX_CELLS: usize = 512 * 512;

    pub fn validate(&self) -> Result<()> {
        let ok = self.resolution > 0.0
            && self.resolution.is_finite()
            && self.width > 0
            && self.height > 0
            && self.width % 4 == 0
            && self.height % 4 == 0
            && self.width * self.height <= Self::MAX_CELLS;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid grid {self:?}")))
        }
    }

    pub fn num_cells(&self) -> usize {
        self.width * self.height
    }

    /// `(ix, iy)` of the half-open cell holding `(x, y)`, if inside.
    pub fn cell_xy(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fx = ((x - self.origin.0) / self.resolution).floor();
        let fy = ((y - self.origin.1) / self.resolution).floor();
        if fx < 0.0 || fy < 0.0 || fx >= self.width as f64 || fy >= self.height as f64 {
            return None;
        }
        Some((fx as usize, fy as usize))
    }

    /// Row-major flat index, rows along y.
    pub fn flat(&self, ix: usize, iy: usize) -> usize {
        iy * self.width + ix
    }

    pub fn unflat(&self, c: usize) -> (usize, usize) {
        (c % self.width, c / self.width)
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> (f64, f64) {
        (
            self.origin.0 + (ix as f64 + 0.5) * self.resolution,
            self.origin.1 + (iy as f64 + 0.5) * self.resolution,
        )
    }
}

/// Point-to-cell assignment for one cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct Pillars {
    /// Flat cell per point; `None` for out-of-grid points.
    pub cells: Vec<Option<usize>>,
    /// Point indices per flat cell, in cloud order.
    pub members: Vec<Vec<usize>>,
}

impl Pillars {
    pub fn occupancy(&self) -> Vec<bool> {
        self.members.iter().map(|m| !m.is_empty()).collect()
    }

    pub fn in_grid(&self) -> usize {
        self.cells.iter().flatten().count()
    }
}

pub fn pillarize<P: Point>(cloud: &PointCloud<P>, grid: &GridSpec) -> Pillars {
    let mut members = vec![Vec::new(); grid.num_cells()];
    let cells = cloud
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let q = p.position();
            let c = grid.cell_xy(q.x, q.y).map(|(ix, iy)| grid.flat(ix, iy));
            if let Some(c) = c {
                members[c].push(i);
            }
            c
        })
        .collect();
    Pillars { cells, members }
}

/// Encoder-ready view of one cloud: feature rows for in-grid points only.
#[derive(Clone, Debug, PartialEq)]
pub struct PillarInput {
    /// `[in_grid, POINT_FEATURES]`, or `None` when no point is in the grid.
    pub features: Option<Tensor>,
    /// Flat cell per feature row.
    pub row_cells: Vec<usize>,
    /// Cell per original point (`None` when out of grid).
    pub point_cells: Vec<Option<usize>>,
    pub occupancy: Vec<bool>,
}

fn point_row(
    grid: &GridSpec,
    c: usize,
    x: f64,
    y: f64,
    z: f64,
    e1: f64,
    e2: f64,
) -> [f64; POINT_FEATURES] {
    let (ix, iy) = grid.unflat(c);
    let (cx, cy) = grid.cell_center(ix, iy);
    [
        (x - cx) / grid.resolution,
        (y - cy) / grid.resolution,
        z,
        e1,
        e2,
    ]
}

impl PillarInput {
    fn build<P: Point>(
        cloud: &PointCloud<P>,
        grid: &GridSpec,
        extras: impl Fn(&P) -> (f64, f64),
    ) -> Self {
        let pillars = pillarize(cloud, grid);
        let mut data = Vec::new();
        let mut row_cells = Vec::new();
        for (p, c) in cloud.points.iter().zip(&pillars.cells) {
            if let Some(c) = *c {
                let q = p.position();
                let (e1, e2) = extras(p);
                data.extend_from_slice(&point_row(grid, c, q.x, q.y, q.z, e1, e2));
                row_cells.push(c);
            }
        }
        let features = (!row_cells.is_empty()).then(|| {
            Tensor::new(&[row_cells.len(), POINT_FEATURES], data).expect("row-aligned features")
        });
        Self {
            features,
            row_cells,
            occupancy: pillars.occupancy(),
            point_cells: pillars.cells,
        }
    }

    /// Radar extras are ARV (m/s) and RCS scaled by 1/10.
    pub fn radar(cloud: &RadarCloud, grid: &GridSpec) -> Self {
        Self::build(cloud, grid, |p: &RadarPoint| (p.arv, p.rcs / 10.0))
    }

    /// LiDAR extras are intensity and a zero pad.
    pub fn lidar(cloud: &LidarCloud, grid: &GridSpec) -> Self {
        Self::build(cloud, grid, |p| (p.intensity, 0.0))
    }
}

/// Shared linear + ReLU point encoder followed by a per-cell max.
#[derive(Clone, Debug)]
pub struct PillarEncoder {
    pub weight: ParamId,
    pub bias: ParamId,
    pub channels: usize,
}

impl PillarEncoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        rng: &mut SplitMix64,
    ) -> Self {
        let weight = store.add(
            format!("{prefix}.weight"),
            rng.uniform_tensor(&[POINT_FEATURES, channels], POINT_FEATURES),
        );
        let bias = store.add(
            format!("{prefix}.bias"),
            rng.uniform_tensor(&[channels], POINT_FEATURES),
        );
        Self {
            weight,
            bias,
            channels,
        }
    }

    /// `[cells, C]` feature rows; unoccupied cells are exactly zero.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, input: &PillarInput) -> Result<Var> {
        let n = input.occupancy.len();
        let Some(features) = &input.features else {
            return Ok(g.constant(Tensor::zeros(&[n, self.channels])));
        };
        let x = g.constant(features.clone());
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let h = g.matmul(x, w)?;
        let h = g.add(h, b)?;
        let h = g.relu(h);
        Ok(g.scatter_max_rows(h, &input.row_cells, n)?)
    }
}

/// Dense BEV features with the occupancy they were built from.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseFeatureMap2D {
    pub grid: GridSpec,
    /// `[height, width, C]`.
    pub features: Tensor,
    pub occupancy: Vec<bool>,
}

impl SparseFeatureMap2D {
    pub fn new(grid: GridSpec, features: Tensor, occupancy: Vec<bool>) -> Result<Self> {
        let ok = features.rank() == 3
            && features.shape()[0] == grid.height
            && features.shape()[1] == grid.width
            && occupancy.len() == grid.num_cells();
        if !ok {
            return Err(Error::GridMismatch);
        }
        Ok(Self {
            grid,
            features,
            occupancy,
        })
    }

    pub fn channels(&self) -> usize {
        self.features.shape()[2]
    }

    pub fn cell(&self, c: usize) -> &[f64] {
        let ch = self.channels();
        &self.features.data()[c * ch..(c + 1) * ch]
    }
}

/// Evaluates the encoder outside any training graph.
pub fn encode_pillars(
    encoder: &PillarEncoder,
    store: &ParamStore,
    input: &PillarInput,
    grid: &GridSpec,
) -> Result<SparseFeatureMap2D> {
    let mut g = Graph::new();
    let v = encoder.encode(&mut g, store, input)?;
    let t = g
        .value(v)
        .reshape(&[grid.height, grid.width, encoder.channels])?;
    SparseFeatureMap2D::new(grid.clone(), t, input.occupancy.clone())
}

/// Cells holding at least one radar point with |ARV| above 0.1 m/s.
pub fn dynamic_radar_map(radar: &RadarCloud, grid: &GridSpec) -> Vec<bool> {
    let mut dynamic = vec![false; grid.num_cells()];
    for p in &radar.points {
        if p.arv.abs() > DYNAMIC_CELL_ARV {
            if let Some((ix, iy)) = grid.cell_xy(p.position.x, p.position.y) {
                dynamic[grid.flat(ix, iy)] = true;
            }
        }
    }
    dynamic
}

const FAR: f64 = 1e30;

/// Lower envelope of parabolas over one line of squared distances.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let qf = q as f64;
        let mut s;
        loop {
            let p = v[k] as f64;
            s = ((f[q] + qf * qf) - (f[v[k]] + p * p)) / (2.0 * qf - 2.0 * p);
            // z[0] is -inf, so this never steps below the first parabola
            if s <= z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while z[k + 1] < qf {
            k += 1;
        }
        let d = qf - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance (in cells²) from every cell to the
/// nearest set cell, by two separable lower-envelope passes. `None` when no
/// cell is set.
pub fn squared_distance_transform(set: &[bool], width: usize, height: usize) -> Option<Vec<f64>> {
    if !set.iter().any(|s| *s) {
        return None;
    }
    let n = width.max(height);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    let mut grid: Vec<f64> = set.iter().map(|s| if *s { 0.0 } else { FAR }).collect();
    let mut line = vec![0.0; n];
    let mut out = vec![0.0; n];
    // along x within each row
    for iy in 0..height {
        let row = &mut grid[iy * width..(iy + 1) * width];
        line[..width].copy_from_slice(row);
        edt_1d(&line[..width], &mut out[..width], &mut v, &mut z);
        row.copy_from_slice(&out[..width]);
    }
    // along y within each column
    for ix in 0..width {
        for iy in 0..height {
            line[iy] = grid[iy * width + ix];
        }
        edt_1d(&line[..height], &mut out[..height], &mut v, &mut z);
        for iy in 0..height {
            grid[iy * width + ix] = out[iy];
        }
    }
    Some(grid)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianHeatmap {
    pub grid: GridSpec,
    /// Squared distance in m² to the nearest dynamic cell center; infinite
    /// when the frame has no dynamic cell.
    pub dist_sq: Vec<f64>,
    pub values: Vec<f64>,
    pub sigma_sq_inv: f64,
}

impl GaussianHeatmap {
    /// Heatmap with every cell at 1, as used when nothing is dynamic.
    pub fn ones(grid: &GridSpec, sigma_sq_inv: f64) -> Self {
        Self {
            grid: grid.clone(),
            dist_sq: vec![f64::INFINITY; grid.num_cells()],
            values: vec![1.0; grid.num_cells()],
            sigma_sq_inv,
        }
    }
}

pub fn gaussian_from_dist_sq(d_sq: f64, sigma_sq_inv: f64) -> f64 {
    (-d_sq * sigma_sq_inv).exp()
}

/// `G = exp(-D² / σ²)` with D the metric distance between cell centers and
/// the nearest dynamic cell. Without dynamic cells G is 1 everywhere.
pub fn gaussian_heatmap(dynamic: &[bool], grid: &GridSpec, sigma_sq_inv: f64) -> GaussianHeatmap {
    let Some(cells_sq) = squared_distance_transform(dynamic, grid.width, grid.height) else {
        return GaussianHeatmap::ones(grid, sigma_sq_inv);
    };
    let res_sq = grid.resolution * grid.resolution;
    let dist_sq: Vec<f64> = cells_sq.iter().map(|c| c * res_sq).collect();
    let values = dist_sq
        .iter()
        .map(|d| gaussian_from_dist_sq(*d, sigma_sq_inv))
        .collect();
    GaussianHeatmap {
        grid: grid.clone(),
        dist_sq,
        values,
        sigma_sq_inv,
    }
}
