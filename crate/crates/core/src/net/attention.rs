//! Local 3x3 cross-attention between two BEV feature maps, weighted by the
//! Gaussian dynamics heatmap at the key cell.

use raliflow_tensor::{Graph, ParamId, ParamStore, Tensor, Var};

use crate::bevgrid::{GaussianHeatmap, GridSpec, SparseFeatureMap2D};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Offset slot of `(dx, dy)` in the 3x3 window, row-major from `(-1, -1)`.
pub fn offset_slot(dx: isize, dy: isize) -> usize {
    ((dy + 1) * 3 + (dx + 1)) as usize
}

/// Every (query cell, key cell, offset slot) triple with both cells occupied.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionPairs {
    pub query: Vec<usize>,
    pub key: Vec<usize>,
    pub slot: Vec<usize>,
}

impl AttentionPairs {
    pub fn build(query_occ: &[bool], key_occ: &[bool], grid: &GridSpec) -> Self {
        let mut pairs = Self::default();
        let (w, h) = (grid.width as isize, grid.height as isize);
        for (q, _) in query_occ.iter().enumerate().filter(|(_, o)| **o) {
            let (qx, qy) = grid.unflat(q);
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let (kx, ky) = (qx as isize + dx, qy as isize + dy);
                    if kx < 0 || ky < 0 || kx >= w || ky >= h {
                        continue;
                    }
                    let k = grid.flat(kx as usize, ky as usize);
                    if key_occ[k] {
                        pairs.query.push(q);
                        pairs.key.push(k);
                        pairs.slot.push(offset_slot(dx, dy));
                    }
                }
            }
        }
        pairs
    }

    pub fn len(&self) -> usize {
        self.query.len()
    }

    pub fn is_empty(&self) -> bool {
        self.query.is_empty()
    }
}

/// Query and key projections plus the 9-entry relative position table.
#[derive(Clone, Debug)]
pub struct LocalCrossAttention {
    pub w_query: ParamId,
    pub w_key: ParamId,
    pub relpos: ParamId,
    pub channels: usize,
}

impl LocalCrossAttention {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        rng: &mut SplitMix64,
    ) -> Self {
        let w_query = store.add(
            format!("{prefix}.w_query"),
            rng.uniform_tensor(&[channels, channels], channels),
        );
        let w_key = store.add(
            format!("{prefix}.w_key"),
            rng.uniform_tensor(&[channels, channels], channels),
        );
        let relpos = store.add(
            format!("{prefix}.relpos"),
            rng.uniform_tensor(&[9, channels], channels),
        );
        Self {
            w_query,
            w_key,
            relpos,
            channels,
        }
    }

    /// `[cells, C]` attention output. Query cells without keys, and
    /// unoccupied query cells, are zero.
    pub fn apply(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query: Var,
        key: Var,
        pairs: &AttentionPairs,
        heat: &[f64],
    ) -> Result<Var> {
        let n = g.shape(query)[0];
        if g.shape(key)[0] != n || heat.len() != n {
            return Err(Error::GridMismatch);
        }
        if pairs.is_empty() {
            return Ok(g.constant(Tensor::zeros(&[n, self.channels])));
        }
        let wq = g.param(store, self.w_query);
        let wk = g.param(store, self.w_key);
        let relpos = g.param(store, self.relpos);

        let qf = g.gather_rows(query, &pairs.query)?;
        let kf = g.gather_rows(key, &pairs.key)?;
        let qp = g.matmul(qf, wq)?;
        let kp = g.matmul(kf, wk)?;
        let prod = g.mul(qp, kp)?;
        let dots = g.sum(prod, 1)?;
        let scale = 1.0 / (self.channels as f64).sqrt();
        let weights = Tensor::vector(pairs.key.iter().map(|&k| heat[k] * scale).collect());
        let weights = g.constant(weights);
        let logits = g.mul(dots, weights)?;
        let attn = g.segment_softmax(logits, &pairs.query, n)?;

        let pos = g.gather_rows(relpos, &pairs.slot)?;
        let values = g.add(kf, pos)?;
        let weighted = g.mul_rows(values, attn)?;
        Ok(g.scatter_add_rows(weighted, &pairs.query, n)?)
    }

    pub fn weights(&self, store: &ParamStore) -> AttentionWeights {
        AttentionWeights {
            w_query: store.value(self.w_query).clone(),
            w_key: store.value(self.w_key).clone(),
            relpos: store.value(self.relpos).clone(),
        }
    }
}

/// Plain-tensor copy of one attention direction's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub w_query: Tensor,
    pub w_key: Tensor,
    pub relpos: Tensor,
}

fn check_grid(
    a: &SparseFeatureMap2D,
    b: &SparseFeatureMap2D,
    heat: &GaussianHeatmap,
) -> Result<()> {
    if a.grid != b.grid || a.grid != heat.grid || a.channels() != b.channels() {
        return Err(Error::GridMismatch);
    }
    Ok(())
}

fn rows(map: &SparseFeatureMap2D) -> Result<Tensor> {
    Ok(map
        .features
        .reshape(&[map.grid.num_cells(), map.channels()])?)
}

/// Eager evaluation of one attention direction, returning `[H, W, C]`.
pub fn local_cross_attention(
    att: &LocalCrossAttention,
    store: &ParamStore,
    query: &SparseFeatureMap2D,
    key: &SparseFeatureMap2D,
    heat: &GaussianHeatmap,
) -> Result<Tensor> {
    check_grid(query, key, heat)?;
    if query.channels() != att.channels {
        return Err(Error::GridMismatch);
    }
    let pairs = AttentionPairs::build(&query.occupancy, &key.occupancy, &query.grid);
    let mut g = Graph::new();
    let q = g.constant(rows(query)?);
    let k = g.constant(rows(key)?);
    let out = att.apply(&mut g, store, q, k, &pairs, &heat.values)?;
    Ok(g.value(out).reshape(query.features.shape())?)
}

/// Bidirectional fusion with residuals: radar queries LiDAR keys and vice
/// versa, both weighted by the same heatmap.
pub fn dbcf_fuse(
    l_to_r: &LocalCrossAttention,
    r_to_l: &LocalCrossAttention,
    store: &ParamStore,
    radar: &SparseFeatureMap2D,
    lidar: &SparseFeatureMap2D,
    heat: &GaussianHeatmap,
) -> Result<(SparseFeatureMap2D, SparseFeatureMap2D)> {
    let a_r = local_cross_attention(l_to_r, store, radar, lidar, heat)?;
    let a_l = local_cross_attention(r_to_l, store, lidar, radar, heat)?;
    let add = |a: Tensor, base: &SparseFeatureMap2D| -> Result<SparseFeatureMap2D> {
        let data = a
            .data()
            .iter()
            .zip(base.features.data())
            .map(|(x, y)| x + y)
            .collect();
        SparseFeatureMap2D::new(
            base.grid.clone(),
            Tensor::new(base.features.shape(), data)?,
            base.occupancy.clone(),
        )
    };
    Ok((add(a_r, radar)?, add(a_l, lidar)?))
}
