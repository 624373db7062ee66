//! Render one video per class, show its boxes, and round-trip a small
//! dataset through disk.
//!
//! ```sh
//! cargo run --example synthetic_videos -- /tmp/troikit-data
//! ```

use std::path::PathBuf;

use troikit::synth::{
    build_dataset, corrupt_rois, generate, load_dataset, save_dataset, Corruption, DatasetSpec,
    SynthClass,
};

fn main() -> troikit::Result<()> {
    for class in SynthClass::ALL {
        let v = generate(3, class, 8, 32)?;
        let per_frame: Vec<usize> = (0..8)
            .map(|t| v.rois.iter().filter(|r| r.frame == t).count())
            .collect();
        println!("{:<10} boxes per frame {per_frame:?}", class.name());
    }

    let v = generate(3, SynthClass::Cover, 8, 32)?;
    let first = v.rois[0];
    for mode in Corruption::SWEEP {
        let moved = corrupt_rois(&v.rois, mode);
        let iou = moved
            .first()
            .filter(|_| matches!(mode, Corruption::Iou(_)))
            .map(|m| m.iou(&first));
        println!(
            "{:<13} {} boxes left, first-box iou {iou:?}",
            mode.to_string(),
            moved.len()
        );
    }

    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("troikit-data"));
    let spec = DatasetSpec {
        per_class: 2,
        ..DatasetSpec::default()
    };
    let videos = build_dataset(&spec)?;
    save_dataset(&dir, &videos, true)?;
    let back = load_dataset(&dir)?;
    let same = videos
        .iter()
        .zip(&back)
        .all(|(a, b)| a.frames == b.frames && a.rois == b.rois && a.label == b.label);
    println!(
        "saved {} videos to {}, reload identical: {same}",
        videos.len(),
        dir.display()
    );
    Ok(())
}
