//! The fusion network: pillar encoders, bidirectional dynamics-aware local
//! cross-attention, U-Net backbone and two GRU flow heads.

pub mod attention;
pub mod head;
pub mod unet;

use std::io::{Read, Write};

use raliflow_tensor::checkpoint::{read_tensors, write_tensors};
use raliflow_tensor::{Graph, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::bevgrid::{
    dynamic_radar_map, gaussian_heatmap, GridSpec, PillarEncoder, PillarInput, POINT_FEATURES,
};
use crate::error::{Error, Result};
use crate::geom::{LidarCloud, RadarCloud};
use crate::rng::SplitMix64;

pub use attention::{
    dbcf_fuse, local_cross_attention, AttentionPairs, AttentionWeights, LocalCrossAttention,
};
pub use head::{FlowHead, HeadInput};
pub use unet::UNet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// No cross-attention; encoder maps go straight to the backbone.
    Concat,
    /// Cross-attention with the heatmap replaced by ones.
    DbcfNoHeatmap,
    Dbcf,
}

impl FusionMode {
    pub const ALL: [FusionMode; 3] = [
        FusionMode::Concat,
        FusionMode::DbcfNoHeatmap,
        FusionMode::Dbcf,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::Concat => "concat",
            FusionMode::DbcfNoHeatmap => "dbcf_no_heatmap",
            FusionMode::Dbcf => "dbcf",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub embedding: usize,
    pub gru_hidden: usize,
    pub gru_iterations: usize,
    /// Width of the first U-Net level; the second level and bottleneck use
    /// twice this.
    pub unet_base: usize,
    /// `1/σ²` of the heatmap, in 1/m².
    pub sigma_sq_inv: f64,
    pub fusion: FusionMode,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            embedding: 64,
            gru_hidden: 64,
            gru_iterations: 4,
            unet_base: 16,
            sigma_sq_inv: 10.0,
            fusion: FusionMode::Dbcf,
            init_seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self, grid: &GridSpec) -> Result<()> {
        let div = 1 << UNet::DEPTH;
        let ok = self.channels > 0
            && self.embedding > 0
            && self.gru_hidden > 0
            && self.gru_iterations >= 1
            && self.unet_base > 0
            && self.sigma_sq_inv > 0.0
            && grid.width % div == 0
            && grid.height % div == 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid model config {self:?} for grid {grid:?}"
            )))
        }
    }
}

/// Non-differentiable inputs of one frame on the shared grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameInputs {
    pub radar: PillarInput,
    pub lidar: PillarInput,
    pub dynamic: Vec<bool>,
    pub heat: Vec<f64>,
    /// Radar queries over LiDAR keys.
    pub pairs_radar_query: AttentionPairs,
    /// LiDAR queries over radar keys.
    pub pairs_lidar_query: AttentionPairs,
}

impl FrameInputs {
    pub fn new(radar: &RadarCloud, lidar: &LidarCloud, grid: &GridSpec, sigma_sq_inv: f64) -> Self {
        let r = PillarInput::radar(radar, grid);
        let l = PillarInput::lidar(lidar, grid);
        let dynamic = dynamic_radar_map(radar, grid);
        let heat = gaussian_heatmap(&dynamic, grid, sigma_sq_inv).values;
        Self {
            pairs_radar_query: AttentionPairs::build(&r.occupancy, &l.occupancy, grid),
            pairs_lidar_query: AttentionPairs::build(&l.occupancy, &r.occupancy, grid),
            radar: r,
            lidar: l,
            dynamic,
            heat,
        }
    }
}

fn head_input(p: &PillarInput) -> Option<HeadInput> {
    let f = p.features.as_ref()?;
    let rows: Vec<(usize, [f64; 3])> = p
        .row_cells
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let r = &f.data()[i * POINT_FEATURES..i * POINT_FEATURES + 3];
            (c, [r[0], r[1], r[2]])
        })
        .collect();
    HeadInput::new(&rows)
}

/// Everything the network needs for one source/target pair. The target
/// clouds must already be ego-compensated into the source frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PairInputs {
    pub grid: GridSpec,
    pub src: FrameInputs,
    pub tgt: FrameInputs,
    pub radar_head: Option<HeadInput>,
    pub lidar_head: Option<HeadInput>,
}

impl PairInputs {
    pub fn new(
        src: (&RadarCloud, &LidarCloud),
        tgt: (&RadarCloud, &LidarCloud),
        grid: &GridSpec,
        sigma_sq_inv: f64,
    ) -> Self {
        let s = FrameInputs::new(src.0, src.1, grid, sigma_sq_inv);
        let t = FrameInputs::new(tgt.0, tgt.1, grid, sigma_sq_inv);
        Self {
            grid: grid.clone(),
            radar_head: head_input(&s.radar),
            lidar_head: head_input(&s.lidar),
            src: s,
            tgt: t,
        }
    }

    /// In-grid source points per modality, in cloud order.
    pub fn radar_point_cells(&self) -> &[Option<usize>] {
        &self.src.radar.point_cells
    }

    pub fn lidar_point_cells(&self) -> &[Option<usize>] {
        &self.src.lidar.point_cells
    }
}

/// Per-modality flow outputs for in-grid source points (`[m, 3]`).
#[derive(Clone, Copy, Debug)]
pub struct Prediction {
    pub radar: Option<Var>,
    pub lidar: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    enc_radar: PillarEncoder,
    enc_lidar: PillarEncoder,
    att_lidar_to_radar: LocalCrossAttention,
    att_radar_to_lidar: LocalCrossAttention,
    unet: UNet,
    head_radar: FlowHead,
    head_lidar: FlowHead,
}

impl Model {
    /// Parameters are drawn uniformly in `±1/sqrt(fan_in)` from the config
    /// seed; the flow delta layers start at zero.
    pub fn new(config: ModelConfig) -> Self {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::derive(config.init_seed, 0x6d6f64656c);
        let c = config.channels;
        let enc_radar = PillarEncoder::new(&mut store, "enc.radar", c, &mut rng);
        let enc_lidar = PillarEncoder::new(&mut store, "enc.lidar", c, &mut rng);
        let att_lidar_to_radar =
            LocalCrossAttention::new(&mut store, "dbcf.lidar_to_radar", c, &mut rng);
        let att_radar_to_lidar =
            LocalCrossAttention::new(&mut store, "dbcf.radar_to_lidar", c, &mut rng);
        let unet = UNet::new(
            &mut store,
            "unet",
            4 * c,
            config.unet_base,
            config.embedding,
            &mut rng,
        );
        let cell_width = config.embedding + 2 * c;
        let head_radar = FlowHead::new(
            &mut store,
            "head.radar",
            cell_width,
            config.gru_hidden,
            config.gru_iterations,
            &mut rng,
        );
        let head_lidar = FlowHead::new(
            &mut store,
            "head.lidar",
            cell_width,
            config.gru_hidden,
            config.gru_iterations,
            &mut rng,
        );
        Self {
            config,
            store,
            enc_radar,
            enc_lidar,
            att_lidar_to_radar,
            att_radar_to_lidar,
            unet,
            head_radar,
            head_lidar,
        }
    }

    pub fn attention(&self) -> (&LocalCrossAttention, &LocalCrossAttention) {
        (&self.att_lidar_to_radar, &self.att_radar_to_lidar)
    }

    pub fn unet(&self) -> &UNet {
        &self.unet
    }

    fn fuse(&self, g: &mut Graph, store: &ParamStore, f: &FrameInputs) -> Result<(Var, Var)> {
        let phi_r = self.enc_radar.encode(g, store, &f.radar)?;
        let phi_l = self.enc_lidar.encode(g, store, &f.lidar)?;
        let ones;
        let heat: &[f64] = match self.config.fusion {
            FusionMode::Concat => return Ok((phi_r, phi_l)),
            FusionMode::DbcfNoHeatmap => {
                ones = vec![1.0; f.heat.len()];
                &ones
            }
            FusionMode::Dbcf => &f.heat,
        };
        let mut residual =
            |att: &LocalCrossAttention, q: Var, k: Var, pairs: &AttentionPairs| -> Result<Var> {
                if pairs.is_empty() {
                    return Ok(q);
                }
                let a = att.apply(g, store, q, k, pairs, heat)?;
                Ok(g.add(a, q)?)
            };
        let psi_r = residual(&self.att_lidar_to_radar, phi_r, phi_l, &f.pairs_radar_query)?;
        let psi_l = residual(&self.att_radar_to_lidar, phi_l, phi_r, &f.pairs_lidar_query)?;
        Ok((psi_r, psi_l))
    }

    /// Builds the full forward graph against `store` (which may differ from
    /// `self.store`, e.g. during finite-difference probes).
    pub fn forward_with(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        pair: &PairInputs,
    ) -> Result<Prediction> {
        let grid = &pair.grid;
        let n = grid.num_cells();
        let c = self.config.channels;
        let (rs, ls) = self.fuse(g, store, &pair.src)?;
        let (rt, lt) = self.fuse(g, store, &pair.tgt)?;
        let x = g.concat(&[rs, ls, rt, lt], 1)?;
        let x = g.reshape(x, &[grid.height, grid.width, 4 * c])?;
        let emb = self.unet.forward(g, store, x)?;
        let emb = g.reshape(emb, &[n, self.config.embedding])?;

        let radar = match &pair.radar_head {
            Some(h) => {
                let cells = g.concat(&[emb, rs, rt], 1)?;
                Some(self.head_radar.forward(g, store, cells, h)?)
            }
            None => None,
        };
        let lidar = match &pair.lidar_head {
            Some(h) => {
                let cells = g.concat(&[emb, ls, lt], 1)?;
                Some(self.head_lidar.forward(g, store, cells, h)?)
            }
            None => None,
        };
        Ok(Prediction { radar, lidar })
    }

    pub fn forward(&self, g: &mut Graph, pair: &PairInputs) -> Result<Prediction> {
        self.forward_with(g, &self.store, pair)
    }

    /// Parameter values followed by optimizer state, in store order.
    pub fn to_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .store
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        for p in self.store.iter() {
            out.push((format!("adam.m.{}", p.name), p.first_moment.clone()));
            out.push((format!("adam.v.{}", p.name), p.second_moment.clone()));
            out.push((
                format!("adam.step.{}", p.name),
                Tensor::scalar(p.step as f64),
            ));
        }
        out
    }

    /// Restores values and optimizer state. Every parameter must be present
    /// with a matching shape; optimizer entries are optional.
    pub fn load_tensors(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let find = |name: &str| tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t);
        let bad = |msg: String| Error::Schema {
            file: "checkpoint".into(),
            msg,
        };
        for p in self.store.iter_mut() {
            let v = find(&p.name).ok_or_else(|| bad(format!("missing parameter {}", p.name)))?;
            if v.shape() != p.value.shape() {
                return Err(bad(format!(
                    "shape of {} is {:?}, expected {:?}",
                    p.name,
                    v.shape(),
                    p.value.shape()
                )));
            }
            p.value = v.clone();
            if let (Some(m), Some(s), Some(st)) = (
                find(&format!("adam.m.{}", p.name)),
                find(&format!("adam.v.{}", p.name)),
                find(&format!("adam.step.{}", p.name)),
            ) {
                if m.shape() != p.value.shape() || s.shape() != p.value.shape() {
                    return Err(bad(format!("optimizer state shape of {}", p.name)));
                }
                p.first_moment = m.clone();
                p.second_moment = s.clone();
                p.step = st.item()? as u64;
            }
        }
        Ok(())
    }

    pub fn save<W: Write>(&self, w: W, extra: &[(String, Tensor)]) -> Result<()> {
        let mut all = self.to_tensors();
        all.extend(extra.iter().cloned());
        Ok(write_tensors(w, &all)?)
    }

    /// Loads a checkpoint and returns the entries that are not model state.
    pub fn load<R: Read>(&mut self, r: R) -> Result<Vec<(String, Tensor)>> {
        let tensors = read_tensors(r)?;
        self.load_tensors(&tensors)?;
        let own: std::collections::HashSet<String> =
            self.to_tensors().into_iter().map(|(n, _)| n).collect();
        Ok(tensors
            .into_iter()
            .filter(|(n, _)| !own.contains(n))
            .collect())
    }
}
