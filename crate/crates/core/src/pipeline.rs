//! End-to-end driver: configuration, per-frame preprocessing, pair samples,
//! training with Adam, evaluation and inference.

use std::io::{Read, Write};

use raliflow_tensor::{Adam, Graph, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::bevgrid::GridSpec;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::exec;
use crate::geom::{ego_compensate, LidarCloud, RadarCloud, TrackedBox, Vec3};
use crate::labelgen::{label_frame, LabelParams, LabeledFrame};
use crate::losses::{
    instance_consistency_loss, lidar_flow_loss, masked_radar_flow_loss, rows_to_vec3, total_loss,
    BucketSource, InstanceRows, KappaTarget, LossOptions,
};
use crate::metrics::{EpeAccumulator, MetricsReport};
use crate::net::{FusionMode, Model, ModelConfig, PairInputs, Prediction};
use crate::preprocess::{
    denoise_radar, project_radar_to_lidar, remove_ground_combined, DenoiseOutcome, DenoiseParams,
    GroundParams,
};
use crate::rng::SplitMix64;
use crate::synthgen::SceneConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Adam step size. The published setting for full-scale training is
    /// 2e-6; the default here suits the small synthetic problem.
    pub lr: f64,
    pub seed: u64,
    pub bucket_source: BucketSource,
    /// Whether the instance loss's leading prediction passes gradient.
    pub kappa_target: KappaTarget,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 4,
            lr: 1e-3,
            seed: 0,
            bucket_source: BucketSource::Pred,
            kappa_target: KappaTarget::Live,
        }
    }
}

impl TrainingConfig {
    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            bucket_source: self.bucket_source,
            kappa_target: self.kappa_target,
        }
    }
}

/// How many pairs `synth` writes and how many trailing pairs are held out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub pairs: usize,
    pub holdout: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            pairs: 220,
            holdout: 20,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub grid: GridSpec,
    pub ground: GroundParams,
    pub denoise: DenoiseParams,
    pub labels: LabelParams,
    pub model: ModelConfig,
    pub scene: SceneConfig,
    pub split: SplitConfig,
    pub training: TrainingConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.ground.validate()?;
        self.denoise.validate()?;
        self.labels.validate()?;
        self.model.validate(&self.grid)?;
        self.scene.validate()?;
        let t = &self.training;
        if t.epochs == 0 || t.batch_size == 0 || !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(Error::Config(format!("invalid training settings {t:?}")));
        }
        if self.split.holdout > self.split.pairs {
            return Err(Error::Config("holdout exceeds the number of pairs".into()));
        }
        Ok(())
    }

    /// Replaces every seed (scenes, initialization, shuffling).
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.scene.seed = seed;
        self.model.init_seed = seed;
        self.training.seed = seed;
        self
    }

    pub fn train_pairs(&self, n: usize) -> Vec<usize> {
        (0..n.saturating_sub(self.split.holdout)).collect()
    }

    pub fn holdout_pairs(&self, n: usize) -> Vec<usize> {
        (n.saturating_sub(self.split.holdout)..n).collect()
    }
}

/// A frame after ground removal, projection into the LiDAR frame and radar
/// denoising. Index vectors map kept points back to the raw clouds.
#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessedFrame {
    pub radar: RadarCloud,
    pub lidar: LidarCloud,
    pub radar_index: Vec<usize>,
    pub lidar_index: Vec<usize>,
    /// Per raw radar point: survived ground removal.
    pub radar_ground_keep: Vec<bool>,
    pub lidar_ground_keep: Vec<bool>,
    /// Denoising of the ground-free radar points.
    pub denoise: DenoiseOutcome,
}

fn indices(mask: &[bool]) -> Vec<usize> {
    (0..mask.len()).filter(|&i| mask[i]).collect()
}

pub fn preprocess_frame(
    frame: &crate::dataset::Frame,
    extrinsic: &crate::geom::SE3Transform,
    ground: &GroundParams,
    denoise: &DenoiseParams,
) -> Result<PreprocessedFrame> {
    let radar = project_radar_to_lidar(&frame.radar, extrinsic);
    let (rg, lg) = remove_ground_combined(&radar, &frame.lidar, ground)?;
    let radar_ng = radar.filtered(&rg);
    let lidar = frame.lidar.filtered(&lg);
    let outcome = denoise_radar(&radar_ng, &lidar, denoise)?;
    let ng_index = indices(&rg);
    let radar_index = indices(&outcome.keep)
        .into_iter()
        .map(|i| ng_index[i])
        .collect();
    Ok(PreprocessedFrame {
        radar: radar_ng.filtered(&outcome.keep),
        lidar,
        radar_index,
        lidar_index: indices(&lg),
        radar_ground_keep: rg,
        lidar_ground_keep: lg,
        denoise: outcome,
    })
}

/// Network inputs and labels for one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub pair: PairInputs,
    pub labels: LabeledFrame,
    /// Label index of each prediction row.
    pub radar_rows: Vec<usize>,
    pub lidar_rows: Vec<usize>,
    pub dt: f64,
}

impl Sample {
    fn rows<T: Copy>(rows: &[usize], v: &[T]) -> Vec<T> {
        rows.iter().map(|&i| v[i]).collect()
    }
}

pub fn prepare_sample(ds: &Dataset, pair: usize, cfg: &PipelineConfig) -> Result<Sample> {
    let (s, t) = ds.pairs[pair];
    let src = preprocess_frame(
        &ds.frames[s],
        &ds.radar_extrinsic,
        &cfg.ground,
        &cfg.denoise,
    )?;
    let tgt = preprocess_frame(
        &ds.frames[t],
        &ds.radar_extrinsic,
        &cfg.ground,
        &cfg.denoise,
    )?;
    let ego = ds.ego_motion(pair)?;
    let back = ego.tgt_to_src();
    let tgt_radar = ego_compensate(&tgt.radar, &ego);
    let tgt_lidar = ego_compensate(&tgt.lidar, &ego);
    let tgt_boxes: Vec<TrackedBox> = ds.frames[t]
        .boxes
        .iter()
        .map(|b| b.transformed(&back))
        .collect();
    let sensor = ds.radar_extrinsic.apply(Vec3::ZERO);
    let labels = label_frame(
        &src.radar,
        &src.lidar,
        &ds.frames[s].boxes,
        &tgt_boxes,
        &cfg.labels,
        sensor,
        ds.dt,
    )?;
    let pair_inputs = PairInputs::new(
        (&src.radar, &src.lidar),
        (&tgt_radar, &tgt_lidar),
        &cfg.grid,
        cfg.model.sigma_sq_inv,
    );
    let in_grid = |cells: &[Option<usize>]| {
        (0..cells.len())
            .filter(|&i| cells[i].is_some())
            .collect::<Vec<_>>()
    };
    Ok(Sample {
        radar_rows: in_grid(pair_inputs.radar_point_cells()),
        lidar_rows: in_grid(pair_inputs.lidar_point_cells()),
        pair: pair_inputs,
        labels,
        dt: ds.dt,
    })
}

pub fn prepare_samples(ds: &Dataset, pairs: &[usize], cfg: &PipelineConfig) -> Result<Vec<Sample>> {
    exec::try_map_ordered(pairs, |&p| prepare_sample(ds, p, cfg))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub l_li: f64,
    pub l_ra: f64,
    pub l_ins: f64,
    pub l_total: f64,
}

impl LossParts {
    fn add(&mut self, o: &LossParts) {
        self.l_li += o.l_li;
        self.l_ra += o.l_ra;
        self.l_ins += o.l_ins;
        self.l_total += o.l_total;
    }

    fn scaled(&self, s: f64) -> LossParts {
        LossParts {
            l_li: self.l_li * s,
            l_ra: self.l_ra * s,
            l_ins: self.l_ins * s,
            l_total: self.l_total * s,
        }
    }
}

fn zero(g: &mut Graph) -> Var {
    g.constant(Tensor::scalar(0.0))
}

/// Forward pass plus the three loss terms and their sum.
pub fn sample_loss(
    g: &mut Graph,
    model: &Model,
    store: &ParamStore,
    sample: &Sample,
    opts: LossOptions,
) -> Result<([Var; 4], Prediction)> {
    let source = opts.bucket_source;
    let pred = model.forward_with(g, store, &sample.pair)?;
    let lab = &sample.labels;
    let radar_gt = Sample::rows(&sample.radar_rows, &lab.radar_flow.gt_flows);
    let radar_mask = Sample::rows(&sample.radar_rows, &lab.radar_flow.mask);
    let radar_inst = Sample::rows(&sample.radar_rows, &lab.radar_flow.instance_id);
    let lidar_gt = Sample::rows(&sample.lidar_rows, &lab.lidar_flow.gt_flows);
    let lidar_inst = Sample::rows(&sample.lidar_rows, &lab.lidar_flow.instance_id);

    let l_li = match pred.lidar {
        Some(p) => lidar_flow_loss(g, p, &lidar_gt, sample.dt, source)?,
        None => zero(g),
    };
    let l_ra = match pred.radar {
        Some(p) => masked_radar_flow_loss(g, p, &radar_gt, &radar_mask, sample.dt, source)?,
        None => zero(g),
    };
    let l_ins = instance_consistency_loss(
        g,
        &[
            InstanceRows {
                pred: pred.radar,
                instance: &radar_inst,
                gt: &radar_gt,
            },
            InstanceRows {
                pred: pred.lidar,
                instance: &lidar_inst,
                gt: &lidar_gt,
            },
        ],
        sample.dt,
        opts.kappa_target,
    )?;
    let total = total_loss(g, l_li, l_ra, l_ins)?;
    Ok(([l_li, l_ra, l_ins, total], pred))
}

/// Loss values and parameter gradients of one sample.
pub fn sample_gradients(
    model: &Model,
    sample: &Sample,
    opts: LossOptions,
) -> Result<(LossParts, Vec<Option<Tensor>>)> {
    let mut g = Graph::new();
    let ([l_li, l_ra, l_ins, total], _) = sample_loss(&mut g, model, &model.store, sample, opts)?;
    let item = |v: Var| g.value(v).item();
    let parts = LossParts {
        l_li: item(l_li)?,
        l_ra: item(l_ra)?,
        l_ins: item(l_ins)?,
        l_total: item(total)?,
    };
    let grads = g.backward(total)?;
    Ok((parts, grads.param_grads(&g, &model.store)))
}

/// Mean loss and mean gradient over a batch, reduced in batch order.
pub fn batch_gradients(
    model: &Model,
    samples: &[&Sample],
    opts: LossOptions,
    parallel: bool,
) -> Result<(LossParts, Vec<Option<Tensor>>)> {
    let f = |s: &&Sample| sample_gradients(model, s, opts);
    let per: Vec<_> = if parallel {
        exec::map_ordered(samples, f)
    } else {
        exec::map_sequential(samples, f)
    };
    let mut loss = LossParts::default();
    let mut acc: Vec<Option<Tensor>> = vec![None; model.store.len()];
    for r in per {
        let (parts, grads) = r?;
        loss.add(&parts);
        for (a, g) in acc.iter_mut().zip(grads) {
            let Some(g) = g else { continue };
            match a {
                None => *a = Some(g),
                Some(t) => {
                    for (x, y) in t.data_mut().iter_mut().zip(g.data()) {
                        *x += y;
                    }
                }
            }
        }
    }
    let inv = 1.0 / samples.len() as f64;
    for t in acc.iter_mut().flatten() {
        for x in t.data_mut() {
            *x *= inv;
        }
    }
    Ok((loss.scaled(inv), acc))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    #[serde(flatten)]
    pub loss: LossParts,
}

/// Model plus the number of finished epochs.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub epoch: usize,
    pub config: TrainingConfig,
}

impl Trainer {
    pub fn new(model: ModelConfig, config: TrainingConfig) -> Self {
        Self {
            model: Model::new(model),
            epoch: 0,
            config,
        }
    }

    /// Pair order of epoch `e` (0-based).
    pub fn epoch_order(&self, e: usize, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        SplitMix64::derive(self.config.seed, e as u64).shuffle(&mut order);
        order
    }

    pub fn train_epoch(&mut self, samples: &[Sample]) -> Result<EpochLog> {
        if samples.is_empty() {
            return Err(Error::Config("no training pairs".into()));
        }
        let adam = Adam::new(self.config.lr);
        let order = self.epoch_order(self.epoch, samples.len());
        let mut sum = LossParts::default();
        for batch in order.chunks(self.config.batch_size) {
            let refs: Vec<&Sample> = batch.iter().map(|&i| &samples[i]).collect();
            let (loss, grads) =
                batch_gradients(&self.model, &refs, self.config.loss_options(), true)?;
            sum.add(&loss.scaled(batch.len() as f64));
            adam.step(&mut self.model.store, &grads)?;
        }
        self.epoch += 1;
        Ok(EpochLog {
            epoch: self.epoch,
            loss: sum.scaled(1.0 / samples.len() as f64),
        })
    }

    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        self.model.save(
            w,
            &[("train.epoch".to_string(), Tensor::scalar(self.epoch as f64))],
        )
    }

    /// Restores weights, optimizer state and epoch counter. The model config
    /// must match the one the checkpoint was written with.
    pub fn load<R: Read>(&mut self, r: R) -> Result<()> {
        let extra = self.model.load(r)?;
        self.epoch = 0;
        for (name, t) in extra {
            if name == "train.epoch" {
                self.epoch = t.item()? as usize;
            }
        }
        Ok(())
    }
}

/// Predicted flow for every preprocessed source point; points outside the
/// grid get zero flow.
pub fn predict(model: &Model, sample: &Sample) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
    let mut g = Graph::new();
    let pred = model.forward(&mut g, &sample.pair)?;
    let scatter = |v: Option<Var>, rows: &[usize], n: usize| {
        let mut out = vec![Vec3::ZERO; n];
        if let Some(v) = v {
            for (r, f) in rows.iter().zip(rows_to_vec3(g.value(v))) {
                out[*r] = f;
            }
        }
        out
    };
    Ok((
        scatter(pred.radar, &sample.radar_rows, sample.labels.radar.len()),
        scatter(pred.lidar, &sample.lidar_rows, sample.labels.lidar.len()),
    ))
}

fn report(samples: &[Sample], preds: Vec<(Vec<Vec3>, Vec<Vec3>)>) -> Result<MetricsReport> {
    let mut radar = EpeAccumulator::default();
    let mut lidar = EpeAccumulator::default();
    for (s, (r, l)) in samples.iter().zip(preds) {
        radar.add(
            &r,
            &s.labels.radar_flow.gt_flows,
            &s.labels.radar_flow.motion_class,
        )?;
        lidar.add(
            &l,
            &s.labels.lidar_flow.gt_flows,
            &s.labels.lidar_flow.motion_class,
        )?;
    }
    Ok(MetricsReport {
        radar: radar.finish(),
        lidar: lidar.finish(),
    })
}

pub fn evaluate(model: &Model, samples: &[Sample]) -> Result<MetricsReport> {
    let preds = exec::try_map_ordered(samples, |s| predict(model, s))?;
    report(samples, preds)
}

pub fn zero_flow_report(samples: &[Sample]) -> Result<MetricsReport> {
    let preds = samples
        .iter()
        .map(|s| {
            (
                vec![Vec3::ZERO; s.labels.radar.len()],
                vec![Vec3::ZERO; s.labels.lidar.len()],
            )
        })
        .collect();
    report(samples, preds)
}

/// Held-out metrics for one fusion variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub fusion: FusionMode,
    pub final_loss: LossParts,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub zero_flow: MetricsReport,
    pub variants: Vec<AblationEntry>,
}

/// Trains one model per fusion mode from the same seeds and data, then
/// evaluates each on the held-out samples.
pub fn ablate(
    cfg: &PipelineConfig,
    train: &[Sample],
    holdout: &[Sample],
) -> Result<AblationReport> {
    let mut variants = Vec::new();
    for mode in FusionMode::ALL {
        let mut trainer = Trainer::new(
            ModelConfig {
                fusion: mode,
                ..cfg.model.clone()
            },
            cfg.training.clone(),
        );
        let mut last = LossParts::default();
        for _ in 0..cfg.training.epochs {
            last = trainer.train_epoch(train)?.loss;
        }
        variants.push(AblationEntry {
            fusion: mode,
            final_loss: last,
            metrics: evaluate(&trainer.model, holdout)?,
        });
    }
    Ok(AblationReport {
        zero_flow: zero_flow_report(holdout)?,
        variants,
    })
}
