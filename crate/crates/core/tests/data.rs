use std::fs;
use std::path::Path;

use dxformer::data::{
    fold_ids, load_checkpoint, load_dataset, read_feature_file, read_labels, save_checkpoint,
    synth_generate, write_dataset, write_feature_file, write_labels, Checkpoint, ClassMapping,
    FoldSubset, SynthSpec,
};
use dxformer::model::{dxformer_forward, ModelConfig, ParameterSet};
use dxformer::training::OptimizerState;
use dxformer::{Error, FrameMask, Tape, Tensor};
use proptest::prelude::*;

fn features() -> impl Strategy<Value = Tensor<f32>> {
    (1usize..6, 1usize..30).prop_flat_map(|(d, t)| {
        prop::collection::vec(prop::num::f32::NORMAL | prop::num::f32::ZERO, d * t)
            .prop_map(move |v| Tensor::new(vec![d, t], v).unwrap())
    })
}

fn mapping(c: usize) -> ClassMapping {
    ClassMapping::new((0..c).map(|k| format!("class_{k}")).collect()).unwrap()
}

proptest! {
    #[test]
    fn features_round_trip_bit_for_bit(x in features()) {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
        write_feature_file(&a, &x).unwrap();
        let back = read_feature_file(&a).unwrap();
        prop_assert_eq!(
            back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        prop_assert_eq!(back.shape(), x.shape());
        write_feature_file(&b, &back).unwrap();
        prop_assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn truncated_feature_files_are_rejected(x in features(), cut in 0.0f64..1.0) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        write_feature_file(&path, &x).unwrap();
        let bytes = fs::read(&path).unwrap();
        let keep = (cut * bytes.len() as f64) as usize;
        fs::write(&path, &bytes[..keep]).unwrap();
        match read_feature_file(&path) {
            Err(Error::Length { expected, actual, .. }) => {
                prop_assert_eq!(actual, keep);
                prop_assert!(expected > keep);
            }
            Err(Error::Format { offset, .. }) => prop_assert!(offset <= keep),
            other => prop_assert!(false, "cut at {keep}: {other:?}"),
        }
    }

    #[test]
    fn labels_round_trip((c, labels) in (2usize..6).prop_flat_map(|c| (Just(c), prop::collection::vec(0..c, 1..80)))) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.txt");
        let m = mapping(c);
        write_labels(&path, &labels, &m).unwrap();
        prop_assert_eq!(read_labels(&path, &m).unwrap(), labels);
    }

    #[test]
    fn synthetic_folds_partition_the_videos(videos in 1usize..30, folds in 1usize..8, seed in any::<u64>()) {
        prop_assume!(folds <= videos);
        let spec = SynthSpec { num_videos: videos, min_frames: 2, max_frames: 4, folds, seed, ..SynthSpec::default() };
        let data = synth_generate(&spec).unwrap();
        let mut all: Vec<String> = data.folds.concat();
        all.sort();
        prop_assert_eq!(all, data.dataset.ids());
        prop_assert!(data.folds.iter().all(|f| !f.is_empty()));
    }
}

#[test]
fn corrupt_headers_name_their_offset() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.bin");
    write_feature_file(&path, &Tensor::<f32>::zeros(vec![2, 3])).unwrap();
    let good = fs::read(&path).unwrap();
    let cases: [(usize, u8, usize); 3] = [(0, b'X', 0), (4, 7, 4), (8, 0, 8)];
    for (at, byte, offset) in cases {
        let mut bad = good.clone();
        bad[at] = byte;
        if at == 8 {
            bad[8..12].copy_from_slice(&0u32.to_le_bytes());
        }
        fs::write(&path, &bad).unwrap();
        match read_feature_file(&path) {
            Err(e @ Error::Format { .. }) => {
                let Error::Format { offset: o, .. } = &e else {
                    unreachable!()
                };
                assert_eq!(*o, offset, "{e}");
                assert!(e.to_string().contains(&format!("byte {offset}")), "{e}");
            }
            other => panic!("byte {at}: {other:?}"),
        }
    }
    let mut long = good.clone();
    long.extend_from_slice(&[0, 0]);
    fs::write(&path, &long).unwrap();
    let err = read_feature_file(&path).unwrap_err().to_string();
    assert!(err.contains("trailing"), "{err}");
}

#[test]
fn malformed_text_inputs_name_their_line() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("f.csv");
    fs::write(&csv, "1,2\n3,4\n5,x\n").unwrap();
    let err = read_feature_file(&csv).unwrap_err().to_string();
    assert!(err.contains("f.csv:3"), "{err}");
    fs::write(&csv, "1,2\n3\n").unwrap();
    assert!(read_feature_file(&csv)
        .unwrap_err()
        .to_string()
        .contains("f.csv:2"));

    let labels = dir.path().join("l.txt");
    fs::write(&labels, "class_0\nclass_1\nclass_9\n").unwrap();
    let err = read_labels(&labels, &mapping(2)).unwrap_err().to_string();
    assert!(err.contains("l.txt:3"), "{err}");
}

#[test]
fn paired_length_mismatch_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        num_videos: 3,
        min_frames: 5,
        max_frames: 9,
        folds: 3,
        ..SynthSpec::default()
    };
    let data = synth_generate(&spec).unwrap();
    write_dataset(dir.path(), &data.dataset, &data.folds).unwrap();
    let s = &data.dataset.samples[1];
    let gt = dir.path().join("groundTruth").join(format!("{}.txt", s.id));
    write_labels(&gt, &s.labels[1..], &data.dataset.mapping).unwrap();
    let err = load_dataset(dir.path(), None).unwrap_err().to_string();
    assert!(
        err.contains(&s.id) && err.contains("paired-length"),
        "{err}"
    );
    let frames = s.frames().to_string();
    let labels = (s.frames() - 1).to_string();
    assert!(err.contains(&frames) && err.contains(&labels), "{err}");
}

#[test]
fn dataset_directory_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        num_videos: 6,
        min_frames: 10,
        max_frames: 20,
        folds: 3,
        ..SynthSpec::default()
    };
    let data = synth_generate(&spec).unwrap();
    write_dataset(dir.path(), &data.dataset, &data.folds).unwrap();
    assert_eq!(load_dataset(dir.path(), None).unwrap(), data.dataset);
    for k in 1..=3 {
        let test = fold_ids(dir.path(), k, FoldSubset::Test).unwrap();
        let mut both = fold_ids(dir.path(), k, FoldSubset::Train).unwrap();
        assert!(both.iter().all(|id| !test.contains(id)));
        both.extend(test);
        both.sort();
        assert_eq!(both, data.dataset.ids());
    }
}

fn logits(cfg: &ModelConfig, p: &ParameterSet<f32>, x: &Tensor<f32>) -> Vec<Tensor<f32>> {
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let mask = FrameMask::all(x.shape()[1]);
    let out = dxformer_forward(&mut tape, cfg, &bound, xv, &mask).unwrap();
    out.stages
        .iter()
        .map(|s| tape.value(s.logits).clone())
        .collect()
}

fn same_bits(a: &[Tensor<f32>], b: &[Tensor<f32>]) -> bool {
    a.iter().zip(b).all(|(x, y)| {
        x.shape() == y.shape()
            && x.data()
                .iter()
                .zip(y.data())
                .all(|(u, v)| u.to_bits() == v.to_bits())
    })
}

fn save_and_reload(path: &Path, ckpt: &Checkpoint) -> Checkpoint {
    save_checkpoint(path, ckpt).unwrap();
    load_checkpoint(path).unwrap()
}

#[test]
fn checkpoints_round_trip_to_identical_logits() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ModelConfig::new(6, 4, 3).with_model_dim(8);
    cfg.num_decoders = 2;
    cfg.seed = 11;
    let params = ParameterSet::<f32>::init(&cfg).unwrap();
    let mut opt = OptimizerState::new(&params);
    opt.m[0].data_mut()[0] = 0.25;
    opt.step = 42;
    let ckpt = Checkpoint {
        config: cfg.clone(),
        epoch: 3,
        step: 42,
        params,
        optimizer: Some(opt),
    };
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    let back = save_and_reload(&a, &ckpt);
    assert_eq!(back, ckpt);
    save_checkpoint(&b, &back).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let x = Tensor::new(
        vec![6, 17],
        (0..102).map(|i| (i as f32 * 0.37).sin()).collect(),
    )
    .unwrap();
    assert!(same_bits(
        &logits(&cfg, &ckpt.params, &x),
        &logits(&back.config, &back.params, &x)
    ));

    let bytes = fs::read(&a).unwrap();
    fs::write(&a, &bytes[..bytes.len() - 3]).unwrap();
    let err = load_checkpoint(&a);
    assert!(matches!(err, Err(Error::Length { .. })), "{err:?}");
}
