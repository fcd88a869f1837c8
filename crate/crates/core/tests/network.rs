mod common;

use common::*;
use raliflow_core::bevgrid::{encode_pillars, GaussianHeatmap, PillarEncoder, SparseFeatureMap2D};
use raliflow_core::geom::Vec3;
use raliflow_core::losses::{masked_radar_flow_loss, vec3_to_rows, BucketSource};
use raliflow_core::net::{
    dbcf_fuse, local_cross_attention, AttentionPairs, LocalCrossAttention, Model, ModelConfig,
};
use raliflow_core::rng::SplitMix64;
use raliflow_core::synthgen::oracle_naive_attention;
use raliflow_tensor::{Graph, ParamStore, Tensor};

#[test]
fn attention_matches_naive_oracle() {
    for seed in 0..10 {
        let mut rng = SplitMix64::new(seed);
        let gs = grid(6, 0.5);
        let q = random_map(&gs, 4, 0.5, &mut rng);
        let k = random_map(&gs, 4, 0.4, &mut rng);
        let hm = heat(&gs, &mut rng);
        let mut store = ParamStore::new();
        let att = LocalCrossAttention::new(&mut store, "att", 4, &mut rng);
        let fast = local_cross_attention(&att, &store, &q, &k, &hm).unwrap();
        let slow = oracle_naive_attention(&q, &k, &hm.values, &att.weights(&store));
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!(
                (a - b).abs() <= 1e-12 * (1.0 + b.abs()),
                "seed {seed}: {a} vs {b}"
            );
        }
    }
}

#[test]
fn attention_without_keys_is_zero() {
    let mut rng = SplitMix64::new(3);
    let gs = grid(6, 0.5);
    let q = random_map(&gs, 4, 0.6, &mut rng);
    let empty =
        SparseFeatureMap2D::new(gs.clone(), Tensor::zeros(&[6, 6, 4]), vec![false; 36]).unwrap();
    let mut store = ParamStore::new();
    let att = LocalCrossAttention::new(&mut store, "att", 4, &mut rng);
    let out =
        local_cross_attention(&att, &store, &q, &empty, &GaussianHeatmap::ones(&gs, 10.0)).unwrap();
    assert!(out.data().iter().all(|v| *v == 0.0));
}

#[test]
fn singleton_key_passes_its_value_through() {
    let mut rng = SplitMix64::new(4);
    let gs = grid(6, 0.5);
    let q = random_map(&gs, 4, 1.0, &mut rng);
    let mut k = random_map(&gs, 4, 0.0, &mut rng);
    let key_cell = gs.flat(2, 3);
    k.occupancy[key_cell] = true;
    let kv: Vec<f64> = (0..4).map(|_| rng.normal(0.0, 1.0)).collect();
    k.features.data_mut()[key_cell * 4..key_cell * 4 + 4].copy_from_slice(&kv);
    let mut store = ParamStore::new();
    let att = LocalCrossAttention::new(&mut store, "att", 4, &mut rng);
    let w = att.weights(&store);
    let out = local_cross_attention(&att, &store, &q, &k, &heat(&gs, &mut rng)).unwrap();
    for qy in 0..6usize {
        for qx in 0..6usize {
            let c = gs.flat(qx, qy);
            let (dx, dy) = (2 - qx as isize, 3 - qy as isize);
            let row = &out.data()[c * 4..c * 4 + 4];
            if dx.abs() <= 1 && dy.abs() <= 1 {
                let slot = ((dy + 1) * 3 + dx + 1) as usize;
                for j in 0..4 {
                    let expect = kv[j] + w.relpos.data()[slot * 4 + j];
                    assert!((row[j] - expect).abs() < 1e-14);
                }
            } else {
                assert!(row.iter().all(|v| *v == 0.0));
            }
        }
    }
}

#[test]
fn zero_heat_averages_the_window() {
    let mut rng = SplitMix64::new(5);
    let gs = grid(6, 0.5);
    let q = random_map(&gs, 4, 0.7, &mut rng);
    let k = random_map(&gs, 4, 0.7, &mut rng);
    let mut hm = GaussianHeatmap::ones(&gs, 10.0);
    hm.values.iter_mut().for_each(|v| *v = 0.0);
    let mut store = ParamStore::new();
    let att = LocalCrossAttention::new(&mut store, "att", 4, &mut rng);
    let w = att.weights(&store);
    let out = local_cross_attention(&att, &store, &q, &k, &hm).unwrap();
    let pairs = AttentionPairs::build(&q.occupancy, &k.occupancy, &gs);
    for cell in 0..36 {
        let members: Vec<usize> = (0..pairs.len())
            .filter(|&i| pairs.query[i] == cell)
            .collect();
        for j in 0..4 {
            let mean = if members.is_empty() {
                0.0
            } else {
                members
                    .iter()
                    .map(|&i| k.cell(pairs.key[i])[j] + w.relpos.data()[pairs.slot[i] * 4 + j])
                    .sum::<f64>()
                    / members.len() as f64
            };
            assert!((out.data()[cell * 4 + j] - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn fusion_without_neighbours_is_identity() {
    let mut rng = SplitMix64::new(6);
    let gs = grid(6, 0.5);
    let mut radar = random_map(&gs, 4, 0.0, &mut rng);
    let mut lidar = random_map(&gs, 4, 0.0, &mut rng);
    for (map, cell) in [(&mut radar, gs.flat(0, 0)), (&mut lidar, gs.flat(5, 5))] {
        map.occupancy[cell] = true;
        for v in &mut map.features.data_mut()[cell * 4..cell * 4 + 4] {
            *v = rng.normal(0.0, 1.0);
        }
    }
    let mut store = ParamStore::new();
    let a = LocalCrossAttention::new(&mut store, "a", 4, &mut rng);
    let b = LocalCrossAttention::new(&mut store, "b", 4, &mut rng);
    let (r, l) = dbcf_fuse(&a, &b, &store, &radar, &lidar, &heat(&gs, &mut rng)).unwrap();
    assert_eq!(r.features, radar.features);
    assert_eq!(l.features, lidar.features);
}

#[test]
fn module_gradients() {
    for (name, checks) in model_catalogue() {
        for seed in 0..SEEDS {
            for (what, r) in checks(seed) {
                assert_passes(&r, &format!("{name}: {what} seed {seed}"));
            }
        }
    }
}

#[test]
fn empty_pillars_encode_to_zero() {
    let mut rng = SplitMix64::new(7);
    let gs = grid(4, 0.5);
    let input = toy_cloud_input(&mut rng, &gs, 5);
    let mut store = ParamStore::new();
    let enc = PillarEncoder::new(&mut store, "enc", 6, &mut rng);
    let map = encode_pillars(&enc, &store, &input, &gs).unwrap();
    assert!(map.occupancy.iter().any(|o| !o));
    for (c, occ) in map.occupancy.iter().enumerate() {
        if !occ {
            assert!(map.cell(c).iter().all(|v| *v == 0.0));
        }
    }
}

#[test]
fn graph_fusion_matches_eager_fusion() {
    for seed in 0..SEEDS {
        let f = fusion_fixture(seed);
        let (fr, fl) =
            dbcf_fuse(&f.atts.0, &f.atts.1, &f.store, &f.radar, &f.lidar, &f.heat).unwrap();
        let mut g = Graph::new();
        let x = g.constant(f.stacked.clone());
        let n = f.grid.num_cells();
        let y = fuse_graph(
            &mut g,
            &f.store,
            x,
            n,
            (&f.atts.0, &f.atts.1),
            (&f.pairs.0, &f.pairs.1),
            &f.heat.values,
        );
        let eager: Vec<f64> = fr
            .features
            .data()
            .iter()
            .chain(fl.features.data())
            .copied()
            .collect();
        assert_eq!(g.value(y).data(), &eager[..]);
    }
}

#[test]
fn untrained_head_predicts_zero_flow() {
    let t = toy(9);
    let model = Model::new(ModelConfig::default());
    let mut g = Graph::new();
    let pred = model.forward(&mut g, &t.pair).unwrap();
    for v in [pred.radar.unwrap(), pred.lidar.unwrap()] {
        assert!(g.value(v).data().iter().all(|x| *x == 0.0));
    }
}

#[test]
fn masked_radar_rows_are_inert() {
    let t = toy(11);
    let mut rng = SplitMix64::new(12);
    let pred = random_tensor(&[4, 3], &mut rng);
    for source in [BucketSource::Pred, BucketSource::Gt] {
        let run = |gt: &[Vec3]| {
            let mut g = Graph::new();
            let p = g.input(pred.clone());
            let l = masked_radar_flow_loss(&mut g, p, gt, &t.radar_mask, DT, source).unwrap();
            let v = g.value(l).item().unwrap();
            let grads = g.backward(l).unwrap();
            (v, grads.get(p).cloned().unwrap())
        };
        let mut poisoned = t.radar_gt.clone();
        poisoned[2] = Vec3::new(f64::NAN, 1e9, -1e9);
        let (a, ga) = run(&t.radar_gt);
        let (b, gb) = run(&poisoned);
        assert_eq!(a, b);
        assert_eq!(ga, gb);
        assert!(ga.row(2).iter().all(|v| *v == 0.0));
    }
    // sanity: the helper round-trips
    assert_eq!(vec3_to_rows(&t.radar_gt).unwrap().shape(), &[4, 3]);
}
