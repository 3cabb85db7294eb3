mod common;

use std::collections::BTreeSet;

use common::max_abs_diff;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ragcn::activation::{
    activated_joints, compute_cam, first_mask, location_softmax, mask_input, next_mask, upsample_map, ActivationMap,
    Location, StreamMask,
};
use ragcn::graph::GraphDef;
use ragcn::model::{CamClass, RaGcnModel};
use ragcn::stgcn::{Mode, StgcnConfig};
use ragcn::tape::Tape;
use ragcn::tensor::Tensor;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn model(streams: usize, seed: u64) -> RaGcnModel {
    let mut cfg = StgcnConfig::from_plan(3, 1, 3, &[(9, 4, 1), (4, 6, 2)]);
    cfg.dropout = 0.0;
    RaGcnModel::new(GraphDef::path(5), cfg, streams, &mut rng(seed)).unwrap()
}

#[test]
fn cam_is_the_class_weighted_channel_sum() {
    let mut r = rng(1);
    let fmap = Tensor::uniform(&[2, 4, 3, 5], -1.0, 1.0, &mut r);
    let head = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut r);
    let classes = [2, 0];
    let cam = compute_cam(&fmap, 1, &head, &classes, 1).unwrap();
    let arr = common::Arr { b: 2, c: 4, t: 3, v: 5, d: fmap.data().to_vec() };
    let oracle = common::cam(&arr, 1, head.data(), &classes);
    assert_eq!(cam.values.shape(), &[2, 1, 3, 5]);
    assert!(cam.values.max_abs_diff(&oracle) < 1e-14);
    // Two bodies per sample land on the body axis.
    let cam2 = compute_cam(&fmap, 2, &head, &[1], 1).unwrap();
    assert!(cam2.values.max_abs_diff(&common::cam(&arr, 2, head.data(), &[1])) < 1e-14);
}

#[test]
fn upsampling_is_block_constant() {
    let values = Tensor::uniform(&[2, 1, 3, 4], -1.0, 1.0, &mut rng(2));
    let cam = ActivationMap { values: values.clone(), stream_index: 1, classes: vec![0, 0] };
    let up = upsample_map(&cam, 12, 4).unwrap();
    assert_eq!(up, common::upsample(&values, 12, 4));
    for t in 0..12 {
        for j in 0..4 {
            assert_eq!(up.get(&[1, 0, t, j]), values.get(&[1, 0, t / 4, j]));
        }
    }
    // Odd lengths round up: ten frames at reduction four need three map frames.
    assert!(upsample_map(&cam, 10, 4).is_ok());
    assert!(upsample_map(&cam, 13, 4).is_err());
}

#[test]
fn mask_input_is_an_elementwise_product() {
    let mut r = rng(3);
    let x = Tensor::uniform(&[2, 9, 4, 5, 2], -1.0, 1.0, &mut r);
    let mask = StreamMask { values: Tensor::uniform(&[2, 2, 4, 5], 0.0, 1.0, &mut r), stream_index: 2 };
    let out = mask_input(&x, &mask).unwrap();
    for n in 0..2 {
        for c in 0..9 {
            for t in 0..4 {
                for v in 0..5 {
                    for m in 0..2 {
                        let expect = x.get(&[n, c, t, v, m]) * mask.values.get(&[n, m, t, v]);
                        assert_eq!(out.get(&[n, c, t, v, m]), expect);
                    }
                }
            }
        }
    }
}

#[test]
fn activated_joints_match_sort_oracle() {
    let values = Tensor::uniform(&[3, 2, 4, 5], -1.0, 1.0, &mut rng(4));
    let cam = ActivationMap { values: values.clone(), stream_index: 1, classes: vec![0; 3] };
    for q in [0.25, 0.5, 0.9] {
        let sets = activated_joints(&cam, q).unwrap();
        for (n, set) in sets.iter().enumerate() {
            let mut cells: Vec<(f64, Location)> = Vec::new();
            for b in 0..2 {
                for t in 0..4 {
                    for j in 0..5 {
                        cells.push((values.get(&[n, b, t, j]), Location { body: b, frame: t, joint: j }));
                    }
                }
            }
            cells.sort_by(|a, b| a.0.total_cmp(&b.0));
            let keep = cells.len() - (q * cells.len() as f64).ceil() as usize;
            let expect: BTreeSet<Location> = cells[cells.len() - keep..].iter().map(|c| c.1).collect();
            assert_eq!(set, &expect, "q={q}");
        }
    }
}

#[test]
fn model_masks_follow_the_chain_rule() {
    let mut m = model(3, 5);
    let x = Tensor::uniform(&[3, 9, 8, 5, 2], -1.0, 1.0, &mut rng(6));
    let labels = [0, 2, 1];
    let mut tape = Tape::new();
    let bind = m.bind(&mut tape);
    let pass = m.forward_pass(&mut tape, &bind, &x, CamClass::Labels(&labels), None, Mode::Eval, &mut rng(0)).unwrap();
    // Rebuild every CAM and mask from the recorded feature maps.
    let mut ups = Vec::new();
    for (s, f) in pass.features.iter().enumerate() {
        let fm = tape.value(f.feature_map);
        let sh = fm.shape();
        let arr = common::Arr { b: sh[0], c: sh[1], t: sh[2], v: sh[3], d: fm.data().to_vec() };
        let cam = common::cam(&arr, 2, m.streams[s].head_weight().data(), &labels);
        assert!(cam.max_abs_diff(&pass.cams[s].values) < 1e-12);
        ups.push(common::upsample(&cam, 8, 2));
    }
    let oracle = common::mask_chain(&ups);
    for (mask, expect) in pass.masks.iter().zip(&oracle) {
        assert!(max_abs_diff(mask.values.data(), expect) < 1e-12);
    }
}

#[test]
fn fused_probabilities_match_end_to_end_oracle() {
    let mut m = model(3, 7);
    let x = Tensor::uniform(&[2, 9, 8, 5, 1], -1.0, 1.0, &mut rng(8));
    let mut tape = Tape::new();
    let bind = m.bind(&mut tape);
    let pass = m.forward_pass(&mut tape, &bind, &x, CamClass::Predicted, None, Mode::Eval, &mut rng(0)).unwrap();
    let probs = tape.softmax(pass.logits).unwrap();

    // Oracle: run each stream on its masked input with the loop forward,
    // derive the next mask from the predicted class of that stream.
    let mut masks = vec![vec![1.0; 2 * 8 * 5]];
    let mut pooled = vec![Vec::new(); 2];
    let mut cams = Vec::new();
    for s in 0..3 {
        let gated = mask_input(&x, &StreamMask { values: Tensor::new(vec![2, 1, 8, 5], masks[s].clone()).unwrap(), stream_index: s + 1 }).unwrap();
        let (p, fmap, logits) = common::network_forward(&m.streams[s], &gated, false);
        for n in 0..2 {
            pooled[n].extend_from_slice(&p[n]);
        }
        let classes: Vec<usize> = logits.iter().map(|row| (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap()).collect();
        cams.push(common::upsample(&common::cam(&fmap, 1, m.streams[s].head_weight().data(), &classes), 8, 2));
        masks = common::mask_chain(&cams.iter().cloned().chain([Tensor::zeros(&[2, 1, 8, 5])]).collect::<Vec<_>>());
    }
    let w = m.fusion.get(m.fusion.find("fusion.weight").unwrap()).data().to_vec();
    let b = m.fusion.get(m.fusion.find("fusion.bias").unwrap()).data().to_vec();
    let expect: Vec<f64> = common::linear(&pooled, &w, &b).iter().flat_map(|row| common::softmax(row)).collect();
    let got = tape.value(probs).data();
    assert!(max_abs_diff(got, &expect) < 1e-10);
    for row in got.chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn fusion_gradient_reaches_every_stream_block() {
    let mut m = model(3, 9);
    let x = Tensor::uniform(&[4, 9, 8, 5, 1], -1.0, 1.0, &mut rng(10));
    let labels = [0, 1, 2, 0];
    let mut tape = Tape::new();
    let bind = m.bind(&mut tape);
    let pass = m.forward_pass(&mut tape, &bind, &x, CamClass::Labels(&labels), None, Mode::Train, &mut rng(0)).unwrap();
    let loss = m.loss(&mut tape, &pass, &labels, false).unwrap();
    tape.backward(loss).unwrap();
    let (wid, _) = m.fusion_ids();
    let grad = tape.grad(bind.fusion.var(wid)).unwrap();
    let c = m.config().feature_channels();
    for s in 0..3 {
        let block: f64 = (0..3).flat_map(|k| (0..c).map(move |ch| (k, ch))).map(|(k, ch)| grad[k * 3 * c + s * c + ch].abs()).sum();
        assert!(block > 0.0, "stream {s} block has zero gradient");
    }
    for (s, stream_bind) in bind.streams.iter().enumerate() {
        let any = stream_bind.grads(&tape).iter().flatten().any(|g| g.iter().any(|&v| v != 0.0));
        assert!(any, "stream {s} parameters received no gradient");
    }
}

fn cam_strategy() -> impl Strategy<Value = (Vec<Tensor>, usize, usize, usize, usize)> {
    (1usize..4, 1usize..3, 1usize..7, 1usize..6, 2usize..5, any::<u64>(), 0.01f64..50.0).prop_map(|(n, m, t, v, s, seed, scale)| {
        let mut r = rng(seed);
        let cams = (0..s - 1).map(|_| Tensor::uniform(&[n, m, t, v], -scale, scale, &mut r)).collect();
        (cams, n, m, t, v)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn mask_algebra((cams, n, m, t, v) in cam_strategy()) {
        let mut masks = vec![first_mask(n, m, t, v)];
        prop_assert!(masks[0].values.data().iter().all(|&x| x == 1.0));
        for cam in &cams {
            let soft = location_softmax(cam);
            for block in soft.data().chunks(t * v) {
                prop_assert!((block.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
            let next = next_mask(&masks, cam).unwrap();
            let prev = masks.last().unwrap();
            for (a, b) in next.values.data().iter().zip(prev.values.data()) {
                prop_assert!((0.0..=1.0).contains(a));
                prop_assert!(a <= b);
            }
            masks.push(next);
        }
        let oracle = common::mask_chain(&cams.iter().cloned().chain([cams[0].clone()]).collect::<Vec<_>>());
        for (mask, expect) in masks.iter().zip(&oracle) {
            prop_assert!(max_abs_diff(mask.values.data(), expect) < 1e-14);
        }
    }
}
