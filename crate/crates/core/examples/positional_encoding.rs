//! Sequence positions for boxes and their sinusoidal encodings.

use troikit::posenc::{order_rois, sinusoidal_encoding, Direction};
use troikit::roi::{Entity, RoiBox};

fn main() -> troikit::Result<()> {
    let rois = [
        RoiBox::new(1, 0.6, 0.2, 0.9, 0.5, Entity::Object),
        RoiBox::new(0, 0.5, 0.5, 0.7, 0.9, Entity::Object),
        RoiBox::new(0, 0.1, 0.1, 0.4, 0.4, Entity::Hand),
        RoiBox::new(1, 0.2, 0.2, 0.5, 0.6, Entity::Hand),
    ];
    for direction in [Direction::LeftToRight, Direction::RightToLeft] {
        let index = order_rois(&rois, direction);
        println!(
            "{direction}: positions {:?}, sequence {:?}",
            index.positions(),
            index.sequence()
        );
    }
    for pos in 0..4 {
        let e = sinusoidal_encoding::<f64>(pos, 8)?;
        let cells: Vec<String> = e.data().iter().map(|v| format!("{v:+.3}")).collect();
        println!("pos {pos}: {}", cells.join(" "));
    }
    Ok(())
}
