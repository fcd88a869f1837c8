//! Seeded fixtures shared by the network tests and the acceptance harness.
#![allow(dead_code)]

use raliflow_core::bevgrid::{
    GaussianHeatmap, GridSpec, PillarEncoder, PillarInput, SparseFeatureMap2D,
};
use raliflow_core::geom::{LidarCloud, LidarPoint, RadarCloud, RadarPoint, Vec3};
use raliflow_core::losses::{
    instance_consistency_loss, lidar_flow_loss, masked_radar_flow_loss, total_loss, BucketSource,
    InstanceRows, KappaTarget,
};
use raliflow_core::net::{
    AttentionPairs, FlowHead, HeadInput, LocalCrossAttention, Model, ModelConfig, PairInputs, UNet,
};
use raliflow_core::rng::SplitMix64;
use raliflow_tensor::{
    grad_check, grad_check_params, GradCheckReport, Graph, ParamId, ParamStore, Tensor, Var,
};

pub const SEEDS: u64 = 10;

pub const H: f64 = 1e-6;
pub const TOL: f64 = 1e-4;
pub const DT: f64 = 0.1;

pub fn grid(n: usize, res: f64) -> GridSpec {
    GridSpec {
        origin: (0.0, -(n as f64) * res / 2.0),
        resolution: res,
        width: n,
        height: n,
    }
}

pub fn random_map(
    grid: &GridSpec,
    c: usize,
    p_occ: f64,
    rng: &mut SplitMix64,
) -> SparseFeatureMap2D {
    let n = grid.num_cells();
    let occupancy: Vec<bool> = (0..n).map(|_| rng.uniform() < p_occ).collect();
    let mut data = vec![0.0; n * c];
    for (cell, occ) in occupancy.iter().enumerate() {
        if *occ {
            for v in &mut data[cell * c..(cell + 1) * c] {
                *v = rng.normal(0.0, 1.0);
            }
        }
    }
    let features = Tensor::new(&[grid.height, grid.width, c], data).unwrap();
    SparseFeatureMap2D::new(grid.clone(), features, occupancy).unwrap()
}

pub fn random_tensor(shape: &[usize], rng: &mut SplitMix64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap()
}

/// Up to `per` random flat coordinates of every parameter.
pub fn param_coords(store: &ParamStore, per: usize, rng: &mut SplitMix64) -> Vec<(ParamId, usize)> {
    let mut out = Vec::new();
    for id in store.ids() {
        let n = store.value(id).numel();
        if n <= per {
            out.extend((0..n).map(|c| (id, c)));
        } else {
            out.extend((0..per).map(|_| (id, rng.int_range(0, n as u64 - 1) as usize)));
        }
    }
    out
}

pub fn assert_passes(r: &GradCheckReport, what: &str) {
    assert!(
        r.passed(),
        "{what}: max rel error {:.3e} at {:?} ({} checked)",
        r.max_rel_error,
        r.worst,
        r.checked
    );
    assert!(
        r.skipped.len() * 4 <= r.checked,
        "{what}: too many kink skips ({})",
        r.skipped.len()
    );
}

pub fn heat(grid: &GridSpec, rng: &mut SplitMix64) -> GaussianHeatmap {
    let mut h = GaussianHeatmap::ones(grid, 10.0);
    for v in &mut h.values {
        *v = rng.range(0.05, 1.0);
    }
    h
}

pub fn toy_cloud_input(rng: &mut SplitMix64, gs: &GridSpec, n: usize) -> PillarInput {
    let (w, h) = (
        gs.width as f64 * gs.resolution,
        gs.height as f64 * gs.resolution,
    );
    let pts = (0..n)
        .map(|_| RadarPoint {
            position: Vec3::new(
                rng.range(0.05, w - 0.05),
                gs.origin.1 + rng.range(0.05, h - 0.05),
                rng.range(-1.0, 1.0),
            ),
            arv: rng.range(-3.0, 3.0),
            rrv: 0.0,
            rcs: rng.range(0.0, 20.0),
        })
        .collect();
    PillarInput::radar(&RadarCloud::new("toy", pts), gs)
}

/// Both attention directions with residuals, as one graph over stacked
/// `[radar; lidar]` rows.
pub fn fuse_graph(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    n: usize,
    atts: (&LocalCrossAttention, &LocalCrossAttention),
    pairs: (&AttentionPairs, &AttentionPairs),
    heat: &[f64],
) -> Var {
    let r_idx: Vec<usize> = (0..n).collect();
    let l_idx: Vec<usize> = (n..2 * n).collect();
    let r = g.gather_rows(x, &r_idx).unwrap();
    let l = g.gather_rows(x, &l_idx).unwrap();
    let ar = atts.0.apply(g, store, r, l, pairs.0, heat).unwrap();
    let al = atts.1.apply(g, store, l, r, pairs.1, heat).unwrap();
    let pr = g.add(ar, r).unwrap();
    let pl = g.add(al, l).unwrap();
    g.concat(&[pr, pl], 0).unwrap()
}

/// A 10-point pair (4 radar, 6 LiDAR) on an 8x8 grid with labels.
pub struct Toy {
    pub pair: PairInputs,
    pub radar_gt: Vec<Vec3>,
    pub radar_mask: Vec<bool>,
    pub radar_inst: Vec<Option<usize>>,
    pub lidar_gt: Vec<Vec3>,
    pub lidar_inst: Vec<Option<usize>>,
}

pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        channels: 3,
        embedding: 3,
        gru_hidden: 4,
        gru_iterations: 2,
        unet_base: 2,
        ..ModelConfig::default()
    }
}

pub fn toy(seed: u64) -> Toy {
    let mut rng = SplitMix64::new(seed);
    let gs = grid(8, 1.0);
    let pos = |rng: &mut SplitMix64| {
        Vec3::new(
            rng.range(0.1, 7.9),
            rng.range(-3.9, 3.9),
            rng.range(-1.0, 1.0),
        )
    };
    let shift = Vec3::new(0.3, 0.1, 0.0);
    let radar: Vec<RadarPoint> = (0..4)
        .map(|_| RadarPoint {
            position: pos(&mut rng),
            arv: rng.range(-3.0, 3.0),
            rrv: 0.0,
            rcs: rng.range(0.0, 20.0),
        })
        .collect();
    let lidar: Vec<LidarPoint> = (0..6)
        .map(|_| LidarPoint {
            position: pos(&mut rng),
            intensity: rng.uniform(),
        })
        .collect();
    let moved_r: Vec<RadarPoint> = radar
        .iter()
        .map(|p| RadarPoint {
            position: p.position + shift,
            ..*p
        })
        .collect();
    let moved_l: Vec<LidarPoint> = lidar
        .iter()
        .map(|p| LidarPoint {
            position: p.position + shift,
            ..*p
        })
        .collect();
    let (rs, ls) = (RadarCloud::new("a", radar), LidarCloud::new("a", lidar));
    let (rt, lt) = (RadarCloud::new("b", moved_r), LidarCloud::new("b", moved_l));
    let pair = PairInputs::new((&rs, &ls), (&rt, &lt), &gs, 1.0);
    // flows with speeds spread over all three buckets, never zero
    let flow = |rng: &mut SplitMix64| {
        let speed = rng.range(0.2, 3.0);
        let a = rng.range(0.0, std::f64::consts::TAU);
        Vec3::new(a.cos(), a.sin(), 0.1) * (speed * DT)
    };
    Toy {
        pair,
        radar_gt: (0..4).map(|_| flow(&mut rng)).collect(),
        radar_mask: vec![true, true, false, true],
        radar_inst: vec![Some(0), Some(0), Some(1), None],
        lidar_gt: (0..6).map(|_| flow(&mut rng)).collect(),
        lidar_inst: vec![Some(0), Some(0), Some(1), Some(1), None, None],
    }
}

pub fn toy_loss(
    g: &mut Graph,
    model: &Model,
    store: &ParamStore,
    t: &Toy,
    kappa: KappaTarget,
) -> Var {
    let pred = model.forward_with(g, store, &t.pair).unwrap();
    let (pr, pl) = (pred.radar.unwrap(), pred.lidar.unwrap());
    let l_li = lidar_flow_loss(g, pl, &t.lidar_gt, DT, BucketSource::Pred).unwrap();
    let l_ra =
        masked_radar_flow_loss(g, pr, &t.radar_gt, &t.radar_mask, DT, BucketSource::Pred).unwrap();
    let rows = [
        InstanceRows {
            pred: Some(pr),
            instance: &t.radar_inst,
            gt: &t.radar_gt,
        },
        InstanceRows {
            pred: Some(pl),
            instance: &t.lidar_inst,
            gt: &t.lidar_gt,
        },
    ];
    let l_ins = instance_consistency_loss(g, &rows, DT, kappa).unwrap();
    total_loss(g, l_li, l_ra, l_ins).unwrap()
}

/// Both assertions applied to every finite-difference report.
pub fn report_ok(r: &GradCheckReport) -> bool {
    r.passed() && r.checked > 0 && r.skipped.len() * 4 <= r.checked
}

pub type Checks = Vec<(String, GradCheckReport)>;

fn scalar(g: &mut Graph, y: Var, w: &Tensor) -> raliflow_tensor::Result<Var> {
    let w = g.constant(w.clone());
    let p = g.mul(y, w)?;
    Ok(g.sum_all(p))
}

pub fn encoder_checks(seed: u64) -> Checks {
    let mut rng = SplitMix64::new(100 + seed);
    let gs = grid(4, 0.5);
    let input = toy_cloud_input(&mut rng, &gs, 5);
    let mut store = ParamStore::new();
    let enc = PillarEncoder::new(&mut store, "enc", 6, &mut rng);
    let w = random_tensor(&[16, 6], &mut rng);
    let coords = param_coords(&store, usize::MAX, &mut rng);
    let r = grad_check_params(
        |g, s| {
            let v = enc.encode(g, s, &input).expect("encode");
            scalar(g, v, &w)
        },
        &store,
        &coords,
        H,
        TOL,
    )
    .unwrap();
    vec![("encoder params".into(), r)]
}

/// A random radar/LiDAR map pair with its attention modules, as used by the
/// fusion checks.
pub struct FusionFixture {
    pub grid: GridSpec,
    pub radar: SparseFeatureMap2D,
    pub lidar: SparseFeatureMap2D,
    pub heat: GaussianHeatmap,
    pub store: ParamStore,
    pub atts: (LocalCrossAttention, LocalCrossAttention),
    pub pairs: (AttentionPairs, AttentionPairs),
    pub stacked: Tensor,
    pub readout: Tensor,
}

pub fn fusion_fixture(seed: u64) -> FusionFixture {
    let mut rng = SplitMix64::new(200 + seed);
    let gs = grid(6, 0.5);
    let c = 4;
    let radar = random_map(&gs, c, 0.4, &mut rng);
    let lidar = random_map(&gs, c, 0.6, &mut rng);
    let hm = heat(&gs, &mut rng);
    let mut store = ParamStore::new();
    let a = LocalCrossAttention::new(&mut store, "a", c, &mut rng);
    let b = LocalCrossAttention::new(&mut store, "b", c, &mut rng);
    let pr = AttentionPairs::build(&radar.occupancy, &lidar.occupancy, &gs);
    let pl = AttentionPairs::build(&lidar.occupancy, &radar.occupancy, &gs);
    let n = gs.num_cells();
    let mut stacked = radar.features.data().to_vec();
    stacked.extend_from_slice(lidar.features.data());
    let stacked = Tensor::new(&[2 * n, c], stacked).unwrap();
    let readout = random_tensor(&[2 * n, c], &mut rng);
    FusionFixture {
        grid: gs,
        radar,
        lidar,
        heat: hm,
        store,
        atts: (a, b),
        pairs: (pr, pl),
        stacked,
        readout,
    }
}

pub fn fusion_checks(seed: u64) -> Checks {
    let f = fusion_fixture(seed);
    let n = f.grid.num_cells();
    let atts = (&f.atts.0, &f.atts.1);
    let pairs = (&f.pairs.0, &f.pairs.1);
    let inputs = grad_check(
        |g, x| {
            let y = fuse_graph(g, &f.store, x, n, atts, pairs, &f.heat.values);
            scalar(g, y, &f.readout)
        },
        &f.stacked,
        H,
        TOL,
    )
    .unwrap();
    let mut rng = SplitMix64::new(250 + seed);
    let coords = param_coords(&f.store, usize::MAX, &mut rng);
    let params = grad_check_params(
        |g, s| {
            let x = g.constant(f.stacked.clone());
            let y = fuse_graph(g, s, x, n, atts, pairs, &f.heat.values);
            scalar(g, y, &f.readout)
        },
        &f.store,
        &coords,
        H,
        TOL,
    )
    .unwrap();
    vec![
        ("fusion inputs".into(), inputs),
        ("fusion params".into(), params),
    ]
}

pub fn unet_checks(seed: u64) -> Checks {
    let mut rng = SplitMix64::new(300 + seed);
    let mut store = ParamStore::new();
    let unet = UNet::new(&mut store, "unet", 2, 2, 2, &mut rng);
    let x0 = random_tensor(&[8, 8, 2], &mut rng);
    let w = random_tensor(&[8, 8, 2], &mut rng);
    let f = |g: &mut Graph, s: &ParamStore, x: Var| -> raliflow_tensor::Result<Var> {
        let y = unet.forward(g, s, x).expect("unet");
        scalar(g, y, &w)
    };
    let inputs = grad_check(|g, x| f(g, &store, x), &x0, H, TOL).unwrap();
    let coords = param_coords(&store, 6, &mut rng);
    let params = grad_check_params(
        |g, s| {
            let x = g.constant(x0.clone());
            f(g, s, x)
        },
        &store,
        &coords,
        H,
        TOL,
    )
    .unwrap();
    vec![
        ("unet inputs".into(), inputs),
        ("unet params".into(), params),
    ]
}

pub fn head_checks(seed: u64) -> Checks {
    let mut rng = SplitMix64::new(400 + seed);
    let mut store = ParamStore::new();
    let head = FlowHead::new(&mut store, "head", 3, 4, 3, &mut rng);
    let delta = store.find("head.delta").unwrap();
    *store.value_mut(delta) = random_tensor(&[4, 3], &mut rng);
    let rows: Vec<(usize, [f64; 3])> = (0..3)
        .map(|i| {
            (
                i % 2 * 2,
                [
                    rng.range(-0.5, 0.5),
                    rng.range(-0.5, 0.5),
                    rng.range(-1.0, 1.0),
                ],
            )
        })
        .collect();
    let input = HeadInput::new(&rows).unwrap();
    let cells0 = random_tensor(&[4, 3], &mut rng);
    let w = random_tensor(&[3, 3], &mut rng);
    let f = |g: &mut Graph, s: &ParamStore, x: Var| -> raliflow_tensor::Result<Var> {
        let y = head.forward(g, s, x, &input).expect("head");
        scalar(g, y, &w)
    };
    let inputs = grad_check(|g, x| f(g, &store, x), &cells0, H, TOL).unwrap();
    let coords = param_coords(&store, usize::MAX, &mut rng);
    let params = grad_check_params(
        |g, s| {
            let x = g.constant(cells0.clone());
            f(g, s, x)
        },
        &store,
        &coords,
        H,
        TOL,
    )
    .unwrap();
    vec![
        ("head inputs".into(), inputs),
        ("head params".into(), params),
    ]
}

/// The full forward pass and L_total, with both leader-target modes.
pub fn total_loss_checks(seed: u64) -> Checks {
    let t = toy(500 + seed);
    let mut model = Model::new(ModelConfig {
        init_seed: seed,
        ..toy_model_config()
    });
    let mut rng = SplitMix64::new(600 + seed);
    // nonzero flow layers so every parameter reaches the output
    for name in ["head.radar.delta", "head.lidar.delta"] {
        let id = model.store.find(name).unwrap();
        *model.store.value_mut(id) = rng.uniform_tensor(&[4, 3], 2);
    }
    let coords = param_coords(&model.store, 3, &mut rng);
    [KappaTarget::Live, KappaTarget::Detached]
        .into_iter()
        .map(|kappa| {
            let r = grad_check_params(
                |g, s| Ok(toy_loss(g, &model, s, &t, kappa)),
                &model.store,
                &coords,
                H,
                TOL,
            )
            .unwrap();
            (format!("L_total {kappa:?}"), r)
        })
        .collect()
}

pub fn model_catalogue() -> Vec<(&'static str, fn(u64) -> Checks)> {
    vec![
        ("pillar encoder", encoder_checks),
        ("cross-modal fusion", fusion_checks),
        ("unet", unet_checks),
        ("flow head", head_checks),
        ("forward + L_total", total_loss_checks),
    ]
}
