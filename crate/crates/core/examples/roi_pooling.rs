//! Pool box features out of a feature map and write edited rows back.
//!
//! ```sh
//! cargo run --example roi_pooling
//! ```

use troikit::roi::{box_to_footprint, extract_features, write_back, Entity, RoiBox, DEFAULT_BINS};
use troikit::{Graph, Tensor};

fn main() -> troikit::Result<()> {
    // Two frames of a 6x6 map with 4 channels; channel c holds x + 10 y + 100 c.
    let map = Tensor::<f64>::from_fn(vec![2, 6, 6, 4], |i| {
        let (c, y, x) = (i % 4, (i / 4) % 6, (i / 24) % 6);
        (x + 10 * y + 100 * c) as f64
    });
    let rois = [
        RoiBox::new(0, 0.0, 0.0, 0.5, 0.5, Entity::Hand),
        RoiBox::new(1, 0.4, 0.3, 0.9, 0.8, Entity::Object),
    ];

    let g = Graph::new();
    let set = extract_features(&g, g.constant(map.clone()), &rois, DEFAULT_BINS)?;
    let features = g.value(set.features);
    for (roi, fp) in rois.iter().zip(&set.footprints) {
        println!("{roi:?}");
        println!(
            "  footprint x {}..={} y {}..={} ({} cells)",
            fp.x_lo,
            fp.x_hi,
            fp.y_lo,
            fp.y_hi,
            fp.cell_count()
        );
    }
    for i in 0..rois.len() {
        println!("pooled row {i}: {:?}", features.row(i));
    }

    let edited = features.map(|v| -v);
    let out = write_back(&map, &edited, &set.footprints)?;
    let changed = out
        .data()
        .iter()
        .zip(map.data())
        .filter(|(a, b)| a != b)
        .count()
        / 4;
    let covered: usize = set.footprints.iter().map(|f| f.cell_count()).sum();
    println!("cells changed {changed}, cells covered {covered}");

    let tiny = RoiBox::new(0, 0.51, 0.51, 0.52, 0.52, Entity::Object);
    println!(
        "a sub-cell box still maps to {:?}",
        box_to_footprint(&tiny, 6, 6)
    );
    Ok(())
}
