use furn_web::{degrade, loss_curves, TinyDemo};

#[test]
fn degradation_explorer_scores_bicubic() {
    let d = degrade(1, 0, 64, 4).unwrap();
    assert_eq!((d.hr_size(), d.lr_size()), (64, 16));
    assert_eq!(d.hr_rgba().len(), 64 * 64 * 4);
    assert_eq!(d.lr_rgba().len(), 16 * 16 * 4);
    assert!(d.hr_rgba().chunks(4).all(|px| px[3] == 255));
    assert!(d.psnr() > 15.0 && d.psnr() < 100.0);
    assert!(d.ssim() > 0.0 && d.ssim() < 1.0);
    assert!(degrade(1, 0, 64, 3).is_err());
}

#[test]
fn loss_curves_hit_the_symmetric_value() {
    // Real and fake batches coincide at x = 0: RaLS reads 2 for both
    // players, plus 2·spread² from the batch members' deviation.
    let v = loss_curves("rals", 0.0, 0.0, -1.0, 1.0, 3).unwrap();
    assert_eq!(v.len(), 6);
    assert!((v[1] - 2.0).abs() < 1e-12 && (v[4] - 2.0).abs() < 1e-12);
    let v = loss_curves("rals", 0.0, 0.5, -1.0, 1.0, 3).unwrap();
    assert!((v[1] - 2.5).abs() < 1e-12 && (v[4] - 2.5).abs() < 1e-12);
    for kind in ["bce", "lsgan"] {
        assert!(loss_curves(kind, 1.0, 0.1, -2.0, 2.0, 9).unwrap().iter().all(|x| x.is_finite()));
    }
    assert!(loss_curves("hinge", 0.0, 0.0, 0.0, 1.0, 2).is_err());
}

#[test]
fn tiny_demo_trains_and_renders() {
    let mut demo = TinyDemo::new(0, 32, "ridb-rals", 1e-3).unwrap();
    let rec = demo.train(2).unwrap();
    assert_eq!(rec[0], 2.0);
    assert!(rec[1..].iter().all(|x| x.is_finite()));
    assert_eq!(demo.sr_rgba().unwrap().len(), 32 * 32 * 4);
    assert_eq!(demo.scores().unwrap().len(), 2);
    assert!(TinyDemo::new(0, 32, "full", 1e-3).is_err(), "semantics need a 16x16 LR input");
}
