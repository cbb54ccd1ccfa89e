use furn_core::config::{TrainConfig, Variant};
use furn_core::data::{load_image, synth_dataset_split, synth_face, Split};
use furn_core::eval::{evaluate, super_resolve, MetricsReport};
use furn_core::generator::GeneratorConfig;
use furn_core::train::{load_generator, read_loss_log, train, Trainer};
use furn_core::FurnError;

fn quick(variant: Variant, steps: u64) -> TrainConfig {
    let mut cfg = TrainConfig::desk().with_variant(variant);
    cfg.steps = steps;
    cfg.checkpoint_every = 2;
    cfg.batch_size = 2;
    cfg
}

#[test]
fn synth_train_evaluate_and_super_resolve() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    synth_dataset_split(4, 2, 64, 5, &data).unwrap();

    let out = train(&quick(Variant::Full, 3), &data, &run, false).unwrap();
    assert_eq!(out.steps, 3);
    assert_eq!(out.checkpoints.len(), 2, "step 2 and the final step");
    let log = read_loss_log(&run).unwrap();
    assert_eq!(log, out.records);
    assert!(log.iter().all(|r| r.all_finite() && r.d_loss.is_some()));

    let ckpt = out.checkpoints.last().unwrap();
    let report = evaluate(ckpt, &data, Split::Test).unwrap();
    assert_eq!((report.count, report.step, report.variant), (2, 3, Variant::Full));
    let mean = report.images.iter().map(|s| s.psnr).sum::<f64>() / 2.0;
    assert!((report.model.psnr - mean).abs() < 1e-12);
    assert_eq!((report.sanity.psnr, report.sanity.ssim), (100.0, 1.0));
    assert!(report.bicubic.psnr > 15.0);
    assert_eq!(MetricsReport::from_json(&report.to_json().unwrap()).unwrap(), report);

    let lr = tmp.path().join("lr.png");
    synth_face(16, 9, 0).save_png(&lr).unwrap();
    let sr = tmp.path().join("sr.png");
    assert_eq!(super_resolve(ckpt, &lr, &sr).unwrap(), (64, 64));
    assert_eq!(load_image(&sr).unwrap().width(), 64);

    assert!(matches!(evaluate(ckpt, &tmp.path().join("missing"), Split::Test), Err(FurnError::Io(_))));
}

#[test]
fn super_resolve_reaches_256_at_both_scales() {
    let tmp = tempfile::tempdir().unwrap();
    for (scale, lr_size) in [(4usize, 64usize), (8, 32)] {
        let mut cfg = TrainConfig::desk().with_variant(Variant::Ridb);
        cfg.scale = scale;
        cfg.generator = GeneratorConfig::tiny(scale);
        cfg.normalize();
        let dir = tmp.path().join(format!("x{scale}"));
        Trainer::new(&cfg, 256).unwrap().save_checkpoint(&dir).unwrap();
        let input = tmp.path().join(format!("in{scale}.png"));
        synth_face(lr_size, 1, 0).save_png(&input).unwrap();
        let output = tmp.path().join(format!("out{scale}.png"));
        assert_eq!(super_resolve(&dir, &input, &output).unwrap(), (256, 256));
    }
}

#[test]
fn corrupted_manifest_names_the_missing_tensor() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("ckpt");
    Trainer::new(&quick(Variant::Ridb, 1), 32).unwrap().save_checkpoint(&dir).unwrap();
    let path = dir.join("manifest.json");
    let mut manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert!(manifest.as_object_mut().unwrap().remove("generator/out.weight").is_some());
    std::fs::write(&path, manifest.to_string()).unwrap();
    match load_generator(&dir) {
        Err(FurnError::Io(msg)) => assert!(msg.contains("generator/out.weight"), "{msg}"),
        other => panic!("expected an Io error, got {other:?}"),
    }
}

#[test]
fn training_never_touches_the_backbone() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_dataset_split(4, 0, 64, 1, &data).unwrap();
    let cfg = quick(Variant::Full, 4);
    let before = Trainer::new(&cfg, 64).unwrap().backbone().digest();
    let mut trainer = Trainer::new(&cfg, 64).unwrap();
    let ds = furn_core::data::Dataset::load(&data, Split::Train).unwrap();
    let stream = furn_core::data::BatchStream::new(&ds.images, 2, &furn_core::data::DegradationSpec::new(4).unwrap(), 0).unwrap();
    let g0 = trainer.generator().digest();
    for k in 0..4 {
        trainer.train_step(&stream.batch_at(k)).unwrap();
    }
    assert_ne!(trainer.generator().digest(), g0);
    assert_eq!(trainer.backbone().digest(), before);
}
