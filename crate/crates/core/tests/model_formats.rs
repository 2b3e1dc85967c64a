use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rangeseg::model::weights::{decode_weights, encode_weights, load_weights, save_weights};
use rangeseg::model::{init_params, init_weights, model_param_count, Model, ModelConfig, ModelParams};
use rangeseg::params::{ParamKind, ParamSet, ParamStore};
use rangeseg::scan_io::{
    builtin_config, encode_kitti_scan, encode_labels, parse_kitti_labels, parse_kitti_scan, parse_xyzil, write_xyzil,
    Point, RawScan,
};
use rangeseg::synthetic::synthetic_scan;
use rangeseg::{Error, Tensor};

fn tiny() -> ModelConfig {
    ModelConfig::parse("C = 4\ndepths = 1,1,1,1\n").unwrap()
}

#[test]
fn init_matches_uniform_law() {
    let mut params = ModelParams::<f64>::new(&ModelConfig::with_channels(32)).unwrap();
    init_weights(&mut params, 11);
    let mut checked = 0;
    params.visit("", &mut |name, kind, t| {
        let ParamKind::Weight { fan_in, fan_out } = kind else {
            match kind {
                ParamKind::NormScale | ParamKind::RunningVar => assert!(t.data().iter().all(|&v| v == 1.0), "{name}"),
                _ => assert!(t.data().iter().all(|&v| v == 0.0), "{name}"),
            }
            return;
        };
        if t.len() < 2000 {
            return;
        }
        let b = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|v| v * v).sum::<f64>() / n;
        assert!(mean.abs() < 3.0 * b / (3.0 * n).sqrt(), "{name}: mean {mean}");
        let var_sd = (4.0 / 45.0f64).sqrt() * b * b / n.sqrt();
        assert!((var - b * b / 3.0).abs() < 3.0 * var_sd, "{name}: var {var}");
        assert!(t.data().iter().all(|v| v.abs() <= b));
        checked += 1;
    });
    assert!(checked > 10);
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

#[test]
fn hand_assembled_weights_file() {
    let mut bytes = b"DAGW".to_vec();
    push_u32(&mut bytes, 1);
    push_u64(&mut bytes, 2);
    push_u32(&mut bytes, 5);
    bytes.extend_from_slice(b"alpha");
    push_u32(&mut bytes, 2);
    push_u64(&mut bytes, 2);
    push_u64(&mut bytes, 3);
    for v in [1.0f32, -2.5, 0.0, 3.25, f32::MIN_POSITIVE, -0.0] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    push_u32(&mut bytes, 1);
    bytes.extend_from_slice(b"b");
    push_u32(&mut bytes, 0);
    bytes.extend_from_slice(&7.5f32.to_le_bytes());

    let store = decode_weights(&bytes).unwrap();
    let alpha = store.get("alpha").unwrap();
    assert_eq!(alpha.shape(), &[2, 3]);
    assert_eq!(alpha.data()[1], -2.5);
    assert_eq!(alpha.data()[5].to_bits(), (-0.0f32).to_bits());
    let b = store.get("b").unwrap();
    assert_eq!(b.shape(), &[] as &[usize]);
    assert_eq!(b.data(), &[7.5]);
    assert_eq!(encode_weights(&store), bytes);
}

#[test]
fn damaged_weights_are_rejected() {
    let store = init_params(&tiny(), 2).unwrap();
    let bytes = encode_weights(&store);
    for cut in [0, 3, 4, 7, 8, 15, 16, 20, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(decode_weights(&bytes[..cut]), Err(Error::Format(_))), "cut at {cut}");
    }
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(decode_weights(&magic).unwrap_err().to_string().contains("magic"));
    let mut version = bytes.clone();
    version[4] = 9;
    assert!(decode_weights(&version).unwrap_err().to_string().contains("version"));
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(matches!(decode_weights(&trailing), Err(Error::Format(_))));

    let mut dup = b"DAGW".to_vec();
    push_u32(&mut dup, 1);
    push_u64(&mut dup, 2);
    for _ in 0..2 {
        push_u32(&mut dup, 1);
        dup.push(b'w');
        push_u32(&mut dup, 1);
        push_u64(&mut dup, 1);
        dup.extend_from_slice(&1.0f32.to_le_bytes());
    }
    assert!(decode_weights(&dup).unwrap_err().to_string().contains("duplicate"));
}

#[test]
fn weights_round_trip_through_io() {
    let store = init_params(&tiny(), 5).unwrap();
    let mut sink = Vec::new();
    save_weights(&store, &mut sink).unwrap();
    let back = load_weights(&mut sink.as_slice()).unwrap();
    assert_eq!(back, store);
    for ((_, a), (_, b)) in back.iter().zip(store.iter()) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn mismatched_store_is_reported_by_name() {
    let mut store = ParamStore::new();
    for (name, t) in init_params(&tiny(), 1).unwrap().iter() {
        if name != "head.classifier.bias" {
            store.insert(name, t.clone()).unwrap();
        }
    }
    let err = Model::new(&tiny(), &store).unwrap_err();
    assert!(err.to_string().contains("head.classifier.bias"), "{err}");
}

#[test]
fn param_count_grows_with_every_depth() {
    let base = ModelConfig::with_channels(8);
    let count = |depths: [usize; 4]| {
        let mut cfg = base.clone();
        cfg.backbone.depths = depths.to_vec();
        model_param_count(&cfg).unwrap()
    };
    let start = count([1, 1, 1, 1]);
    for stage in 0..4 {
        let mut d = [1, 1, 1, 1];
        d[stage] = 2;
        assert!(count(d) > start, "stage {stage}");
    }
    assert_eq!(count([2, 1, 1, 1]), count([2, 1, 1, 1]));
}

#[test]
fn forward_is_deterministic_and_equivariant() {
    let model = Model::from_seed(&tiny(), 4).unwrap();
    let scan = synthetic_scan(300, 9, model.dataset()).unwrap();
    let a = model.forward(&scan).unwrap();
    let b = model.forward(&scan).unwrap();
    assert_eq!(a.scores.shape(), &[300, 19]);
    assert!(a.scores.data().iter().zip(b.scores.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(a.labels, b.labels);
    assert!(a.labels.iter().all(|&l| l < 19));

    let mut order: Vec<usize> = (0..300).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
    let p = model.forward(&scan.permuted(&order).unwrap()).unwrap();
    for (i, &j) in order.iter().enumerate() {
        let (x, y) = (p.scores.row(i), a.scores.row(j));
        assert!(x.iter().zip(y).all(|(u, v)| u.to_bits() == v.to_bits()), "row {i}");
    }

    let d = &a.diagnostics;
    assert_eq!(d.num_points, 300);
    assert_eq!(d.encoder_points, vec![300, 4]);
    assert_eq!(d.encoder_image, vec![64, 1024, 4]);
    let spatial: Vec<Vec<usize>> = d.stages.iter().map(|s| s.image[..2].to_vec()).collect();
    assert_eq!(spatial, vec![vec![64, 1024], vec![32, 512], vec![16, 256], vec![8, 128]]);
    assert!(d.stages.iter().all(|s| s.backbone == s.image && s.points == vec![300, 4]));
    assert_eq!(d.num_cells + d.empty_cells, 64 * 1024);
}

#[test]
fn predictions_reparse_as_labels() {
    let model = Model::from_seed(&tiny(), 6).unwrap();
    let scan = synthetic_scan(120, 2, model.dataset()).unwrap();
    let out = model.forward(&scan).unwrap();
    let bytes = encode_labels(&out.labels);
    assert_eq!(bytes.len(), 4 * 120);
    let back = parse_kitti_labels(&bytes).unwrap();
    assert_eq!(back, out.labels);
    assert!(back.iter().all(|&l| (l as usize) < model.dataset().num_classes));
}

#[test]
fn config_text_round_trip() {
    let mut cfg = ModelConfig::with_channels(12);
    cfg.backbone.depths = vec![2, 1, 3, 1];
    cfg.attn_channels = 5;
    cfg.seed = 42;
    assert_eq!(ModelConfig::parse(&cfg.to_text()).unwrap(), cfg);
    assert!(ModelConfig::parse("C = 4\nC = 5\n").is_err());
    assert!(ModelConfig::parse("colour = red\n").is_err());
    assert!(ModelConfig::parse("depths = 1,1\n").is_err());
}

fn finite_f32() -> impl Strategy<Value = f32> {
    any::<u32>().prop_map(f32::from_bits).prop_filter("finite", |v| v.is_finite())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kitti_scan_round_trip(raw in prop::collection::vec((finite_f32(), finite_f32(), finite_f32(), finite_f32()), 0..64)) {
        let scan = RawScan::new(raw.iter().map(|&(x, y, z, i)| Point::new(x, y, z, i)).collect()).unwrap();
        let bytes = encode_kitti_scan(&scan);
        prop_assert_eq!(bytes.len(), 16 * scan.len());
        let back = parse_kitti_scan(&bytes).unwrap();
        prop_assert_eq!(encode_kitti_scan(&back), bytes);
    }

    #[test]
    fn label_round_trip(ids in prop::collection::vec(0u32..65536, 0..64), inst in prop::collection::vec(any::<u16>(), 64)) {
        let packed: Vec<u32> = ids.iter().zip(&inst).map(|(&s, &i)| s | (i as u32) << 16).collect();
        prop_assert_eq!(parse_kitti_labels(&encode_labels(&packed)).unwrap(), ids.clone());
        prop_assert_eq!(parse_kitti_labels(&encode_labels(&ids)).unwrap(), ids);
    }

    #[test]
    fn text_scan_round_trip(seed in any::<u64>(), n in 0usize..40) {
        let scan = synthetic_scan(n, seed, &builtin_config("semantickitti").unwrap()).unwrap();
        let back = parse_xyzil(&write_xyzil(&scan)).unwrap();
        prop_assert_eq!(back.points(), scan.points());
        // an empty file cannot say whether labels were present
        prop_assert_eq!(back.labels().unwrap_or_default(), scan.labels().unwrap_or_default());
    }
}

#[test]
fn odd_lengths_are_malformed() {
    assert!(matches!(parse_kitti_scan(&[0u8; 17]), Err(Error::MalformedScan(_))));
    assert!(matches!(parse_kitti_labels(&[0u8; 5]), Err(Error::MalformedLabels(_))));
    let nan: Vec<u8> = [f32::NAN, 0.0, 0.0, 0.0].iter().flat_map(|v| v.to_le_bytes()).collect();
    assert!(parse_kitti_scan(&nan).is_err());
}

#[test]
fn store_round_trip_from_tensor() {
    let mut store = ParamStore::new();
    store.insert("x", Tensor::new([3], vec![1.0f32, 2.0, 3.0]).unwrap()).unwrap();
    assert!(store.insert("x", Tensor::zeros([1])).is_err());
    assert_eq!(decode_weights(&encode_weights(&store)).unwrap(), store);
}
