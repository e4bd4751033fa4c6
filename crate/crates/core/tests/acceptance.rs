//! Acceptance criteria A1-A7. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

mod common;

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{conv_reference, enumerate_params, random_tensor, rng, GRADIENT_CASES, GRAD_TOL, TRIALS};
use firenet::checkpoint::{self, Checkpoint, CheckpointMeta};
use firenet::data::{apply_augment, AugmentOp, Image};
use firenet::harness::{self, Arm, ExperimentConfig, TrainOptions, TransferOptions};
use firenet::metrics::{self, ConfusionMatrix, ReportedPercentages, PUBLISHED};
use firenet::nn::{count_params, ParamCount};
use firenet::tensor::{conv2d_forward_with, ConvGeometry, Tensor};
use firenet::zoo::{self, ModelId};
use firenet::Error;
use rand::Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, Duration, fn() -> Outcome);

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn counts(id: ModelId, shape: [usize; 3]) -> ParamCount {
    count_params(&zoo::build(id, shape).unwrap()).unwrap()
}

fn a1_parameter_counts() -> Outcome {
    let custom = [3, 320, 240];
    let pretrained = ModelId::Vgg16Tl.default_input();
    // (model, shape, total, trainable, frozen) as published.
    let expected = [
        (ModelId::Vgg7, custom, 10_090_865, 10_090_865, 0),
        (ModelId::Vgg10, custom, 6_650_993, 6_650_993, 0),
        (ModelId::Vgg16Tl, pretrained, 14_977_857, 263_169, 14_714_688),
        (ModelId::Vgg19Tl, pretrained, 20_287_553, 263_169, 20_024_384),
        (ModelId::Resnet101Tl, pretrained, 43_707_777, 1_049_601, 42_658_176),
    ];
    for (id, shape, total, trainable, frozen) in expected {
        let got = counts(id, shape);
        let want = ParamCount { total, trainable, frozen };
        ensure(got == want, format!("{id}: got {got:?}, want {want:?}"))?;
    }
    // Three 3x3 conv/pool blocks leave 128 x 40 x 30 features.
    let oracle = enumerate_params(&[(3, 32, 3), (32, 64, 3), (64, 128, 3)], &[(128 * 40 * 30, 16), (16, 1)]);
    let svm = counts(ModelId::CnnSvm, custom);
    ensure(oracle == 2_550_881, format!("oracle gives {oracle}"))?;
    ensure(
        svm.total == oracle && svm.trainable == oracle,
        format!("cnn_svm: got {svm:?}, oracle {oracle}"),
    )?;
    Ok(format!("5 published counts exact; cnn_svm {} matches enumeration", svm.total))
}

fn a2_reconciliation() -> Outcome {
    // (model, tp, accuracy, precision, recall) as published, and the matrix
    // they determine over 325 fire / 225 non-fire test images.
    let expected = [
        (ModelId::Vgg7, 318, 96.54, 96.36, 97.84, (318, 12, 7, 213)),
        (ModelId::Vgg10, 317, 96.72, 96.94, 97.54, (317, 10, 8, 215)),
        (ModelId::CnnSvm, 320, 96.91, 96.38, 98.46, (320, 12, 5, 213)),
        (ModelId::Vgg16Tl, 324, 99.45, 99.38, 99.69, (324, 2, 1, 223)),
        (ModelId::Vgg19Tl, 323, 99.09, 99.08, 99.38, (323, 3, 2, 222)),
        (ModelId::Resnet101Tl, 301, 92.73, 94.95, 92.61, (301, 16, 24, 209)),
    ];
    for (id, tp, accuracy, precision, recall, (etp, efp, efn, etn)) in expected {
        let reported = ReportedPercentages { accuracy, precision, recall };
        let cm = metrics::reconcile(tp, (325, 225), reported).map_err(|e| format!("{id}: {e}"))?;
        let want = ConfusionMatrix::new(etp, efp, efn, etn);
        ensure(cm == want, format!("{id}: recovered {cm}, want {want}"))?;
        let m = metrics::derive(&cm);
        for (name, rate, printed) in [
            ("accuracy", m.accuracy, accuracy),
            ("precision", m.precision, precision),
            ("recall", m.recall, recall),
        ] {
            let rate = rate.ok_or(format!("{id}: {name} undefined"))?;
            ensure(
                (rate * 100.0 - printed).abs() <= 0.01 + 1e-9,
                format!("{id}: {name} {:.4}% vs {printed}%", rate * 100.0),
            )?;
        }
        let table = PUBLISHED.iter().find(|c| c.model == id).ok_or(format!("{id} missing"))?;
        ensure(table.reconcile().ok() == Some(want), format!("{id}: built-in table disagrees"))?;
    }
    let vgg16 = metrics::derive(&ConfusionMatrix::new(324, 2, 1, 223));
    let (fpr, fnr) = (vgg16.fpr.unwrap() * 100.0, vgg16.fnr.unwrap() * 100.0);
    ensure((fpr - 0.89).abs() <= 0.01, format!("vgg16 fpr {fpr:.4}%"))?;
    ensure((fnr - 0.31).abs() <= 0.01, format!("vgg16 fnr {fnr:.4}%"))?;
    Ok(format!("6 unique matrices; vgg16 fpr {fpr:.2}% fnr {fnr:.2}%"))
}

fn a3_gradients() -> Outcome {
    let mut worst = 0.0f64;
    let mut kinks = 0;
    for (name, case) in GRADIENT_CASES {
        let r = case(0xa3);
        ensure(r.trials == TRIALS, format!("{name}: {} trials", r.trials))?;
        ensure(r.passes(GRAD_TOL), format!("{name}: {r:?}"))?;
        worst = worst.max(r.max_rel_err);
        kinks += r.kinks;
    }
    Ok(format!(
        "{} cases x {TRIALS} trials, max rel err {worst:.2e} < {GRAD_TOL:.0e}, {kinks} kink probes skipped",
        GRADIENT_CASES.len()
    ))
}

fn a4_conv_checkpoint_augment() -> Outcome {
    let mut r = rng(0xa4);
    let mut worst = 0.0f64;
    for trial in 0..50 {
        let k = [1, 3, 5, 7][r.gen_range(0..4)];
        let geom = ConvGeometry {
            kernel: k,
            stride: r.gen_range(1..=3),
            pad: r.gen_range(0..k),
        };
        let (c, o) = (r.gen_range(1..=6), r.gen_range(1..=6));
        let (h, w) = (r.gen_range(k..k + 12), r.gen_range(k..k + 12));
        let x = random_tensor(&mut r, &[c, h, w]);
        let kernels = random_tensor(&mut r, &[o, c, k, k]);
        let bias = random_tensor(&mut r, &[o]);
        let got = conv2d_forward_with(&x, &kernels, &bias, geom).map_err(|e| e.to_string())?;
        let (want, oh, ow) = conv_reference(x.data(), (c, h, w), kernels.data(), bias.data(), k, geom.stride, geom.pad);
        ensure(got.shape() == [o, oh, ow], format!("trial {trial}: shape {:?}", got.shape()))?;
        for (a, b) in got.data().iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst <= 1e-6, format!("conv max abs diff {worst:.3e}"))?;

    let spec = zoo::build(ModelId::Vgg7, [3, 32, 24]).unwrap();
    let model = firenet::nn::init_weights::<f32>(&spec, 7).unwrap();
    let meta = CheckpointMeta {
        model_id: "vgg7".into(),
        epoch: 2,
        seed: 7,
        config_digest: "d".into(),
    };
    let ckpt = Checkpoint::from_model(&model, meta);
    let bytes = ckpt.to_bytes().map_err(|e| e.to_string())?;
    let back = Checkpoint::from_bytes(&bytes).map_err(|e| e.to_string())?;
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    ensure(back.metadata == ckpt.metadata, "metadata changed")?;
    for ((na, a), (nb, b)) in back.tensors.iter().zip(&ckpt.tensors) {
        ensure(na == nb && a.shape() == b.shape() && bits(a) == bits(b), format!("{na} changed"))?;
    }
    ensure(back.to_bytes().map_err(|e| e.to_string())? == bytes, "re-encoding differs")?;

    let img = Image::from_fn(9, 13, |c, y, x| ((c * 31 + y * 7 + x * 3) % 17) as f32 / 16.0);
    for op in [
        AugmentOp::Rotate { degrees: 0.0 },
        AugmentOp::Translate { dx: 0.0, dy: 0.0 },
        AugmentOp::Scale { factor: 1.0 },
        AugmentOp::Brightness { delta: 0.0 },
        AugmentOp::GaussianNoise { sigma: 0.0 },
    ] {
        let out = apply_augment(&img, op, 3).map_err(|e| e.to_string())?;
        let same = out.data().iter().zip(img.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same, format!("{op:?} is not the identity"))?;
    }
    Ok(format!(
        "50 conv shapes within {worst:.1e}; {} tensors roundtrip bit-exact; 5 identity ops exact",
        ckpt.tensors.len()
    ))
}

/// Curve CSV without the wall-clock column.
fn masked_curves(dir: &Path) -> Result<String, String> {
    let text = fs::read_to_string(dir.join("curves.csv")).map_err(|e| e.to_string())?;
    Ok(text
        .lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
        .collect::<Vec<_>>()
        .join("\n"))
}

fn a5_training_sanity() -> Outcome {
    let cfg = ExperimentConfig::from_json(
        r#"{"model_id":"vgg7","input_size":"64x48","seed":0,"epochs":30,"batch_size":32,
            "dataset":{"synth":{"per_class":200,"val_per_class":50,"seed":11}}}"#,
    )
    .map_err(|e| e.to_string())?;
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut runs = Vec::new();
    for name in ["first", "second"] {
        let opts = TrainOptions {
            out_dir: Some(tmp.path().join(name)),
            stop_at_train_accuracy: Some(0.95),
            verbose: false,
        };
        runs.push(harness::train(&cfg, &opts).map_err(|e| e.to_string())?);
    }
    let last = runs[0].curves.last().ok_or("no epochs recorded")?;
    ensure(last.epoch <= 30, format!("ran {} epochs", last.epoch))?;
    ensure(last.train_acc >= 0.95, format!("train accuracy {:.4}", last.train_acc))?;
    let (a, b) = (masked_curves(&tmp.path().join("first"))?, masked_curves(&tmp.path().join("second"))?);
    ensure(a == b, format!("curves differ:\n{a}\n---\n{b}"))?;
    let weights = |n| fs::read(tmp.path().join(n).join("final.wfck")).map_err(|e| e.to_string());
    ensure(weights("first")? == weights("second")?, "final checkpoints differ")?;
    Ok(format!(
        "train accuracy {:.2}% at epoch {}; curves and weights identical across runs",
        last.train_acc * 100.0,
        last.epoch
    ))
}

fn a6_transfer() -> Outcome {
    let source = ExperimentConfig::from_json(
        r#"{"model_id":"vgg16_tl","input_size":"32x32","seed":0,"epochs":8,"batch_size":16,
            "optimizer":{"kind":"adam","learning_rate":0.0001},
            "dataset":{"synth_shapes":{"per_class":20,"val_per_class":5,"seed":21}}}"#,
    )
    .map_err(|e| e.to_string())?;
    let target = ExperimentConfig::from_json(
        r#"{"model_id":"vgg16_tl","input_size":"32x32","seed":0,"epochs":10,"batch_size":8,
            "dataset":{"synth":{"per_class":4,"val_per_class":25,"seed":31}}}"#,
    )
    .map_err(|e| e.to_string())?;
    let report = harness::transfer_experiment(&source, &target, &[1, 2, 3, 4, 5], &TransferOptions::default())
        .map_err(|e| e.to_string())?;
    if let Some(bad) = report.runs.iter().find(|r| r.error.is_some()) {
        return Err(format!("seed {} {}: {}", bad.seed, bad.arm.as_str(), bad.error.as_deref().unwrap_or("")));
    }
    let ft = report.median_epochs(Arm::FineTune).ok_or("no fine-tune runs")?;
    let sc = report.median_epochs(Arm::Scratch).ok_or("no scratch runs")?;
    ensure(report.fine_tune_faster(), format!("median epochs fine_tune {ft} vs scratch {sc}"))?;
    Ok(format!("median epochs to 95% val accuracy: fine_tune {ft}, scratch {sc} (5 seeds)"))
}

fn a7_checkpoint_fixtures() -> Outcome {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let ckpt = checkpoint::load(&dir.join("tiny.wfck")).map_err(|e| e.to_string())?;
    let w = ckpt.get("w").ok_or("tensor w missing")?;
    let b = ckpt.get("b").ok_or("tensor b missing")?;
    ensure(w.shape() == [2, 3] && w.data() == [0.5, -1.25, 2.0, 0.0, 3.75, -0.125], "w differs")?;
    ensure(b.shape() == [2] && b.data() == [1.0, -2.5], "b differs")?;
    ensure(
        ckpt.metadata.model_id == "vgg7" && ckpt.metadata.epoch == 4 && ckpt.metadata.seed == 42,
        "metadata differs",
    )?;
    let mut offsets = Vec::new();
    for (name, want) in [("truncated.wfck", 25), ("bad_magic.wfck", 0)] {
        match checkpoint::load(&dir.join(name)) {
            Err(Error::Format { offset, .. }) if offset == want => offsets.push(offset),
            other => return Err(format!("{name}: {other:?}")),
        }
    }
    match harness::evaluate(&dir.join("truncated.wfck"), Path::new("/nonexistent"), firenet::data::Split::Test, None) {
        Err(Error::Format { .. }) => {}
        other => return Err(format!("evaluate on truncated file: {other:?}")),
    }
    Ok(format!("fixture exact; truncated at offset {}, bad magic at offset {}", offsets[0], offsets[1]))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 7] = [
        ("A1", Duration::from_secs(1), a1_parameter_counts),
        ("A2", Duration::from_secs(1), a2_reconciliation),
        ("A3", Duration::from_secs(30), a3_gradients),
        ("A4", Duration::from_secs(10), a4_conv_checkpoint_augment),
        ("A5", Duration::from_secs(300), a5_training_sanity),
        ("A6", Duration::from_secs(900), a6_transfer),
        ("A7", Duration::from_secs(1), a7_checkpoint_fixtures),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| a.starts_with('A')).collect();
    let mut failed = 0;
    for (id, budget, run) in criteria {
        if !only.is_empty() && !only.iter().any(|o| o == id) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(run))
            .unwrap_or_else(|p| Err(p.downcast_ref::<String>().cloned().unwrap_or_else(|| "panicked".into())));
        let elapsed = start.elapsed();
        let outcome = outcome.and_then(|msg| {
            if elapsed <= budget {
                Ok(msg)
            } else {
                Err(format!("{msg}; took {elapsed:.1?}, budget {budget:?}"))
            }
        });
        match outcome {
            Ok(msg) => println!("{id} PASS {msg} ({:.2} s)", elapsed.as_secs_f64()),
            Err(msg) => {
                failed += 1;
                println!("{id} FAIL {msg} ({:.2} s)", elapsed.as_secs_f64());
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
