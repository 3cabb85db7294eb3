use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ragcn::data::checkpoint::{load_checkpoint, save_checkpoint, Snapshot, CHECKPOINT_MAGIC};
use ragcn::data::dataset::{DatasetFile, DATASET_MAGIC};
use ragcn::data::ntu::{ntu_action_label, parse_ntu_skeleton, read_ntu_skeleton, NtuReadOptions};
use ragcn::graph::GraphDef;
use ragcn::model::{Classifier, RaGcnModel};
use ragcn::preprocess::SkeletonSequence;
use ragcn::stgcn::{StgcnConfig, StgcnNetwork};
use ragcn::tensor::Tensor;
use ragcn::Error;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small_model(streams: usize) -> RaGcnModel {
    let cfg = StgcnConfig::from_plan(5, 2, 3, &[(9, 6, 1), (6, 8, 2)]);
    let mut model = RaGcnModel::new(GraphDef::ntu_rgbd(), cfg, streams, &mut rng(3)).unwrap();
    // Move the running statistics off their defaults so they matter.
    let x = Tensor::uniform(&[4, 9, 6, 25, 2], -1.0, 1.0, &mut rng(4));
    let mut tape = ragcn::tape::Tape::new();
    let bind = model.bind(&mut tape);
    model
        .forward_pass(&mut tape, &bind, &x, ragcn::model::CamClass::Labels(&[0, 1, 2, 3]), None, ragcn::stgcn::Mode::Train, &mut rng(5))
        .unwrap();
    model
}

#[test]
fn single_frame_fixture_parses_exactly() {
    let seq = read_ntu_skeleton(fixture("S001C001P001R001A007.skeleton"), &NtuReadOptions::default()).unwrap();
    assert_eq!(seq.label, 6);
    assert_eq!(seq.valid_frames, 1);
    assert_eq!(seq.data.shape(), &[3, 300, 25, 2]);
    for j in 0..25 {
        let expect = [j as f64 / 8.0, -(j as f64) / 4.0, 2.0 + j as f64 / 16.0];
        for (c, &e) in expect.iter().enumerate() {
            assert_eq!(seq.data.data()[seq.index(c, 0, j, 0)], e);
            assert_eq!(seq.data.data()[seq.index(c, 0, j, 1)], 0.0);
        }
    }
    assert!(seq.data.data().iter().enumerate().all(|(i, &x)| x == 0.0 || (i / 50) % 300 == 0));
}

#[test]
fn three_body_fixture_keeps_two_most_variable() {
    let path = fixture("S002C002P003R002A050.skeleton");
    let text = std::fs::read_to_string(&path).unwrap();
    // Independent variance oracle: pool each body's coordinates.
    let mut per_body: Vec<(String, Vec<f64>, usize)> = Vec::new();
    let lines: Vec<&str> = text.lines().collect();
    let mut i = 1;
    for f in 0..4 {
        let bodies: usize = lines[i].parse().unwrap();
        i += 1;
        for _ in 0..bodies {
            let id = lines[i].split_whitespace().next().unwrap().to_string();
            let joints: usize = lines[i + 1].parse().unwrap();
            let coords: Vec<f64> = lines[i + 2..i + 2 + joints]
                .iter()
                .flat_map(|l| l.split_whitespace().take(3).map(|s| s.parse::<f64>().unwrap()))
                .collect();
            match per_body.iter_mut().find(|b| b.0 == id) {
                Some(b) => b.1.extend(coords),
                None => per_body.push((id, coords, f)),
            }
            i += 2 + joints;
        }
    }
    let var = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
    };
    let mut ranked: Vec<_> = per_body.iter().map(|b| (var(&b.1), b.2, b.0.clone(), b.1.clone())).collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut kept = ranked[..2].to_vec();
    kept.sort_by_key(|k| k.1);
    assert!(kept.iter().all(|k| k.2 != "11"), "still body should be dropped");

    let opts = NtuReadOptions { frames: 6, ..Default::default() };
    let seq = read_ntu_skeleton(&path, &opts).unwrap();
    assert_eq!((seq.label, seq.valid_frames), (49, 4));
    for (b, (_, _, _, coords)) in kept.iter().enumerate() {
        for f in 0..4 {
            for j in 0..25 {
                for c in 0..3 {
                    assert_eq!(seq.data.data()[seq.index(c, f, j, b)], coords[(f * 25 + j) * 3 + c]);
                }
            }
        }
    }
}

#[test]
fn malformed_files_report_lines() {
    let text = std::fs::read_to_string(fixture("S001C001P001R001A007.skeleton")).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    lines[9] = "0.5 oops 1.0".into();
    match parse_ntu_skeleton(&lines.join("\n"), "x", 0, &NtuReadOptions::default()) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 10),
        other => panic!("{other:?}"),
    }
    assert!(matches!(parse_ntu_skeleton("0\n", "x", 0, &NtuReadOptions::default()), Err(Error::Input(_))));
    assert_eq!(ntu_action_label("S017C003P020R002A060"), Some(59));
    assert_eq!(ntu_action_label("nothing"), None);
}

#[test]
fn dataset_round_trip_is_lossless_at_f32() {
    let mut r = rng(7);
    let samples: Vec<SkeletonSequence> = (0..5)
        .map(|i| {
            let mut data = Tensor::uniform(&[3, 7, 25, 2], -3.0, 3.0, &mut r).map(|x| x as f32 as f64);
            let valid = 3 + i % 4;
            for c in 0..3 {
                for t in valid..7 {
                    for k in 0..50 {
                        data.data_mut()[(c * 7 + t) * 50 + k] = 0.0;
                    }
                }
            }
            SkeletonSequence::new(data, valid, i % 3, format!("s{i}")).unwrap()
        })
        .collect();
    let file = DatasetFile::new(vec!["a".into(), "b".into(), "c".into()], samples).unwrap();
    let bytes = file.to_bytes().unwrap();
    assert_eq!(&bytes[..8], DATASET_MAGIC);
    let back = DatasetFile::from_bytes(&bytes).unwrap();
    assert_eq!(back, file);
    assert_eq!(back.to_bytes().unwrap(), bytes);
    assert!(matches!(DatasetFile::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Corrupt(_))));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(DatasetFile::from_bytes(&bad), Err(Error::Corrupt(_))));
}

#[test]
fn checkpoint_round_trip_keeps_logits() {
    let x = Tensor::uniform(&[3, 9, 6, 25, 2], -1.0, 1.0, &mut rng(8));
    let mut model = small_model(3);
    let before = model.predict_logits(&x).unwrap();
    let bytes = save_checkpoint(&Snapshot::Model(model.clone()), 4).unwrap();
    assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
    let (snap, meta) = load_checkpoint(&bytes, Some(&GraphDef::ntu_rgbd())).unwrap();
    assert_eq!((meta.streams, meta.epoch), (3, 4));
    let mut loaded = snap.into_model().unwrap();
    let after = loaded.predict_logits(&x).unwrap();
    assert!(before.max_abs_diff(&after) < 1e-4);
    // Stored values are already 32-bit, so a second cycle is byte-identical.
    assert_eq!(save_checkpoint(&Snapshot::Model(loaded), 4).unwrap(), bytes);

    let base = StgcnNetwork::new(GraphDef::ntu_rgbd(), StgcnConfig::from_plan(5, 1, 3, &[(9, 4, 1)]), &mut rng(9)).unwrap();
    let bytes = save_checkpoint(&Snapshot::Baseline(base), 0).unwrap();
    let wrong = GraphDef::path(25);
    assert!(matches!(load_checkpoint(&bytes, Some(&wrong)), Err(Error::Load(_))));
    assert!(matches!(load_checkpoint(&bytes[..bytes.len() / 2], None), Err(Error::Corrupt(_))));
}
