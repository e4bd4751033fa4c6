use std::fs;
use std::path::{Path, PathBuf};

use firenet::checkpoint::{self, Checkpoint, CheckpointMeta, LoadScope};
use firenet::data::Split;
use firenet::harness;
use firenet::nn::{init_weights, Model};
use firenet::zoo::{self, ModelId};
use firenet::Error;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn meta(model_id: &str) -> CheckpointMeta {
    CheckpointMeta {
        model_id: model_id.into(),
        epoch: 1,
        seed: 0,
        config_digest: String::new(),
    }
}

#[test]
fn fixture_decodes_to_hand_values() {
    let ckpt = checkpoint::load(&fixture("tiny.wfck")).unwrap();
    let names: Vec<&str> = ckpt.tensors.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["w", "b"]);
    let w = ckpt.get("w").unwrap();
    assert_eq!(w.shape(), [2, 3]);
    assert_eq!(w.data(), [0.5, -1.25, 2.0, 0.0, 3.75, -0.125]);
    let b = ckpt.get("b").unwrap();
    assert_eq!(b.shape(), [2]);
    assert_eq!(b.data(), [1.0, -2.5]);
    assert_eq!(
        ckpt.metadata,
        CheckpointMeta {
            model_id: "vgg7".into(),
            epoch: 4,
            seed: 42,
            config_digest: "00ff".into(),
        }
    );
}

#[test]
fn fixture_reencodes_byte_for_byte() {
    let bytes = fs::read(fixture("tiny.wfck")).unwrap();
    assert_eq!(Checkpoint::from_bytes(&bytes).unwrap().to_bytes().unwrap(), bytes);
}

#[test]
fn truncated_fixture_reports_offset() {
    // magic 4 + version 4 + count 4 + name 2+1 + dtype 1 + rank 1 + extents 8:
    // the payload starts at byte 25 and the file ends at 30.
    match checkpoint::load(&fixture("truncated.wfck")) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, 25),
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn bad_magic_fixture_reports_offset_zero() {
    match checkpoint::load(&fixture("bad_magic.wfck")) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn evaluate_fails_before_building_a_model() {
    let err = harness::evaluate(&fixture("truncated.wfck"), Path::new("/nonexistent"), Split::Test, None)
        .unwrap_err();
    assert!(matches!(err, Error::Format { .. }), "{err:?}");
}

#[test]
fn model_roundtrip_through_file() {
    let spec = zoo::build(ModelId::Vgg7, [3, 16, 16]).unwrap();
    let model: Model<f32> = init_weights(&spec, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.wfck");
    checkpoint::save(&model, meta("vgg7"), &path).unwrap();
    let ckpt = checkpoint::load(&path).unwrap();
    let restored = checkpoint::load_into(init_weights(&spec, 99).unwrap(), &ckpt, LoadScope::All).unwrap();
    for (a, b) in model.params().iter().zip(restored.params()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value, b.value);
    }
    let leftovers: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(leftovers.len(), 1);
}

#[test]
fn backbone_only_keeps_the_head() {
    let spec = zoo::build(ModelId::Vgg16Tl, [3, 32, 32]).unwrap();
    let source: Model<f32> = init_weights(&spec, 1).unwrap();
    let target: Model<f32> = init_weights(&spec, 2).unwrap();
    let ckpt = Checkpoint::from_model(&source, meta("vgg16_tl"));
    let merged = checkpoint::load_into(target.clone(), &ckpt, LoadScope::BackboneOnly).unwrap();
    for ((s, t), m) in source.params().iter().zip(target.params()).zip(merged.params()) {
        let want = if merged.is_backbone_param(&m.name) { &s.value } else { &t.value };
        assert_eq!(&m.value, want, "{}", m.name);
    }
}

#[test]
fn mismatched_checkpoint_is_a_transfer_error() {
    let small = zoo::build(ModelId::Vgg7, [3, 16, 16]).unwrap();
    let large = zoo::build(ModelId::Vgg7, [3, 32, 32]).unwrap();
    let ckpt = Checkpoint::from_model(&init_weights::<f32>(&small, 0).unwrap(), meta("vgg7"));
    let target: Model<f32> = init_weights(&large, 0).unwrap();
    match checkpoint::load_into(target, &ckpt, LoadScope::All) {
        Err(Error::Transfer { names, .. }) => assert!(!names.is_empty()),
        other => panic!("expected a transfer error, got {other:?}"),
    }
    let other = zoo::build(ModelId::Vgg10, [3, 16, 16]).unwrap();
    let target: Model<f32> = init_weights(&other, 0).unwrap();
    assert!(matches!(
        checkpoint::load_into(target, &ckpt, LoadScope::All),
        Err(Error::Transfer { .. })
    ));
}
