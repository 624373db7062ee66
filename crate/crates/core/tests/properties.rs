use proptest::prelude::*;
use troikit::config::RunConfig;
use troikit::roi::{box_to_footprint, sanitize_rois, Entity, RoiBox};
use troikit::synth::{corrupt_rois, Corruption};
use troikit::train::{EpochRecord, LrSchedule};

fn unit_box() -> impl Strategy<Value = RoiBox> {
    (
        0usize..4,
        0.0..1.0f64,
        0.0..1.0f64,
        0.0..1.0f64,
        0.0..1.0f64,
    )
        .prop_map(|(f, a, b, c, d)| {
            RoiBox::new(f, a.min(b), c.min(d), a.max(b), c.max(d), Entity::Object)
        })
}

proptest! {
    #[test]
    fn footprints_stay_on_the_grid(roi in unit_box(), w in 1usize..12, h in 1usize..12) {
        let fp = box_to_footprint(&roi, w, h);
        prop_assert!(fp.x_lo <= fp.x_hi && fp.x_hi < w);
        prop_assert!(fp.y_lo <= fp.y_hi && fp.y_hi < h);
        prop_assert_eq!(fp.frame, roi.frame);
    }

    #[test]
    fn sanitize_keeps_only_valid_boxes(rois in prop::collection::vec(unit_box(), 0..8), frames in 1usize..5) {
        let (kept, dropped) = sanitize_rois(&rois, frames);
        prop_assert_eq!(kept.len() + dropped, rois.len());
        for r in &kept {
            prop_assert!(r.validate(frames).is_ok());
        }
    }

    #[test]
    fn iou_shift_hits_target_when_unclipped(roi in unit_box(), target in 0.01..0.99f64) {
        prop_assume!(roi.width() > 1e-3 && roi.height() > 1e-3);
        let moved = corrupt_rois(&[roi], Corruption::Iou(target));
        prop_assert_eq!(moved.len(), 1);
        let m = moved[0];
        prop_assert!(m.x1 >= 0.0 && m.x2 <= 1.0);
        if (m.width() - roi.width()).abs() < 1e-12 {
            prop_assert!((m.iou(&roi) - target).abs() < 1e-9);
        }
    }

    #[test]
    fn schedule_never_increases(base in 1e-4..1.0f64, epochs in 1usize..60) {
        let s = LrSchedule::thirds(base, epochs);
        prop_assert!(s.validate().is_ok());
        for e in 1..epochs {
            prop_assert!(s.lr_at(e) <= s.lr_at(e - 1));
        }
        prop_assert_eq!(s.lr_at(0), base);
    }

    #[test]
    fn epoch_records_round_trip(epoch in 1usize..100, lr in 0.0..1.0f64, loss in 0.0..10.0f64, a in 0.0..1.0f64, b in 0.0..1.0f64) {
        let r = EpochRecord { epoch, lr, train_loss: loss, val_top1: a, val_topk: b };
        prop_assert_eq!(EpochRecord::parse(&r.to_line()).unwrap(), r);
    }

    #[test]
    fn config_text_round_trips(epochs in 1usize..50, lr in 1e-4..1.0f64, seed in any::<u64>(), layers in 1usize..4, troi in any::<bool>()) {
        let c = RunConfig { epochs, lr, seed, troi_layers: layers, troi, ..RunConfig::default() };
        prop_assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }
}
