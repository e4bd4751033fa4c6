use std::fs;
use std::path::PathBuf;

use firenet::harness::{self, CurveRow, ExperimentConfig, Group, CURVE_HEADER, REPORT_ROWS};
use firenet::metrics::{self, ConfusionMatrix, CSV_HEADER};
use firenet::tensor::Tensor;
use firenet::zoo::ModelId;
use firenet::Error;

/// Logits planted so that thresholding at 0 yields exactly `cm`.
fn planted(cm: &ConfusionMatrix) -> (Tensor<f32>, Vec<u8>) {
    let mut z = Vec::new();
    let mut y = Vec::new();
    for (count, logit, label) in [(cm.tp, 2.0, 1), (cm.fn_, -2.0, 1), (cm.fp, 1.0, 0), (cm.tn, -1.0, 0)] {
        z.extend(std::iter::repeat_n(logit, count as usize));
        y.extend(std::iter::repeat_n(label, count as usize));
    }
    (Tensor::new(vec![z.len()], z).unwrap(), y)
}

#[test]
fn planted_logits_reproduce_published_percentages() {
    let (z, y) = planted(&ConfusionMatrix::new(324, 2, 1, 223));
    let cm = metrics::confusion(&z, &y, 0.0).unwrap();
    assert_eq!(cm, ConfusionMatrix::new(324, 2, 1, 223));
    let m = metrics::derive(&cm);
    let pct = |v: Option<f64>| v.unwrap() * 100.0;
    for (got, printed) in [
        (pct(m.recall), 99.69),
        (pct(m.accuracy), 99.45),
        (pct(m.precision), 99.38),
        (pct(m.fpr), 0.89),
        (pct(m.fnr), 0.31),
    ] {
        assert!((got - printed).abs() <= 0.01 + 1e-9, "{got} vs {printed}");
    }
    assert!((m.f1.unwrap() - 648.0 / 651.0).abs() < 1e-12);
}

fn write_run(root: &std::path::Path, id: ModelId, cm: ConfusionMatrix) -> PathBuf {
    let dir = root.join(id.as_str());
    fs::create_dir_all(&dir).unwrap();
    let cfg = ExperimentConfig::from_json(&format!(
        r#"{{"model_id":"{id}","input_size":"64x64","seed":0,"dataset":{{"synth":{{"per_class":1,"val_per_class":1,"seed":0}}}}}}"#
    ))
    .unwrap();
    fs::write(dir.join("config.json"), cfg.to_json()).unwrap();
    let row = CurveRow {
        epoch: 1,
        train_loss: 0.25,
        train_acc: 0.9,
        val_loss: 0.5,
        val_acc: 0.8,
        seconds: 1.0,
    };
    fs::write(dir.join("curves.csv"), format!("{CURVE_HEADER}\n{}\n", row.to_csv())).unwrap();
    fs::write(
        dir.join("metrics.csv"),
        format!("{CSV_HEADER}\n{}\n", metrics::csv_row(id.as_str(), "test", &cm)),
    )
    .unwrap();
    dir
}

#[test]
fn six_runs_group_three_and_three() {
    let tmp = tempfile::tempdir().unwrap();
    // Pretrained first so the table has to reorder.
    let ids = [
        ModelId::Resnet101Tl,
        ModelId::Vgg16Tl,
        ModelId::Vgg19Tl,
        ModelId::CnnSvm,
        ModelId::Vgg10,
        ModelId::Vgg7,
    ];
    let dirs: Vec<PathBuf> = ids
        .iter()
        .map(|&id| write_run(tmp.path(), id, ConfusionMatrix::new(30, 2, 3, 20)))
        .collect();
    let table = harness::report(&dirs).unwrap();
    assert_eq!(table.group_sizes(), (3, 3));
    let groups: Vec<Group> = table.columns.iter().map(|c| c.group).collect();
    assert_eq!(groups[..3], [Group::Custom; 3]);
    assert_eq!(groups[3..], [Group::Pretrained; 3]);
    let accuracy = REPORT_ROWS.iter().position(|r| *r == "accuracy").unwrap();
    let train_acc = REPORT_ROWS.iter().position(|r| *r == "train_accuracy").unwrap();
    for c in &table.columns {
        assert!((c.values[accuracy].unwrap() - 5000.0 / 55.0).abs() < 1e-9);
        assert!((c.values[train_acc].unwrap() - 90.0).abs() < 1e-9);
    }
    let csv = table.to_csv();
    assert!(csv.lines().nth(1).unwrap().contains("Custom"));
    // Reports never modify their inputs.
    for d in &dirs {
        assert_eq!(fs::read_dir(d).unwrap().count(), 3);
    }
}

#[test]
fn reference_report_recovers_all_matrices() {
    let table = harness::reference_report().unwrap();
    assert_eq!(table.group_sizes(), (3, 3));
    let got: Vec<ConfusionMatrix> = table.columns.iter().map(|c| c.confusion).collect();
    assert_eq!(
        got,
        [
            ConfusionMatrix::new(318, 12, 7, 213),
            ConfusionMatrix::new(317, 10, 8, 215),
            ConfusionMatrix::new(320, 12, 5, 213),
            ConfusionMatrix::new(324, 2, 1, 223),
            ConfusionMatrix::new(323, 3, 2, 222),
            ConfusionMatrix::new(301, 16, 24, 209),
        ]
    );
}

#[test]
fn report_names_every_missing_file() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = write_run(tmp.path(), ModelId::Vgg7, ConfusionMatrix::new(1, 0, 0, 1));
    fs::remove_file(dir.join("curves.csv")).unwrap();
    fs::remove_file(dir.join("metrics.csv")).unwrap();
    match harness::report(&[dir]) {
        Err(Error::Report { missing }) => {
            assert_eq!(missing.len(), 2);
            assert!(missing.iter().any(|m| m.ends_with("curves.csv")));
        }
        other => panic!("expected a report error, got {other:?}"),
    }
}

#[test]
fn hinge_needs_cnn_svm_or_override() {
    let base = r#""input_size":"32x32","seed":0,"dataset":{"synth":{"per_class":1,"val_per_class":1,"seed":0}}"#;
    let hinge = r#""loss":{"kind":"hinge_l2","lambda":0.001}"#;
    let parse = |extra: &str| ExperimentConfig::from_json(&format!("{{{base},{extra}}}"));
    assert!(parse(&format!(r#""model_id":"cnn_svm",{hinge}"#)).is_ok());
    assert!(matches!(parse(&format!(r#""model_id":"vgg7",{hinge}"#)), Err(Error::Config(_))));
    assert!(parse(&format!(r#""model_id":"vgg7",{hinge},"loss_override":true"#)).is_ok());
    assert!(matches!(parse(r#""model_id":"vgg7","freeze_base":true"#), Err(Error::Config(_))));
    assert!(parse(r#""model_id":"vgg16_tl","freeze_base":true"#).is_ok());
}

#[test]
fn short_training_run_is_reproducible() {
    let cfg = ExperimentConfig::from_json(
        r#"{"model_id":"cnn_svm","input_size":"16x16","seed":4,"epochs":2,"batch_size":4,
            "augment_plan":[{"op":"rotate","max_degrees":20},{"op":"brightness","max_delta":0.1}],
            "dataset":{"synth":{"per_class":6,"val_per_class":2,"seed":1}}}"#,
    )
    .unwrap();
    let run = || harness::train(&cfg, &harness::TrainOptions::default()).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.curves.len(), 2);
    for (x, y) in a.curves.iter().zip(&b.curves) {
        assert_eq!((x.train_loss, x.val_loss, x.train_acc), (y.train_loss, y.val_loss, y.train_acc));
    }
    assert_eq!(a.val_confusions, b.val_confusions);
}
