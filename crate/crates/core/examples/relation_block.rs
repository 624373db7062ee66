//! The full relation block on a random feature map: boxes in, same-shaped
//! map out, untouched outside the boxes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use troikit::params::ParamStore;
use troikit::roi::{box_to_footprint, Entity, RoiBox};
use troikit::troi::{TroiConfig, TroiModule};
use troikit::{Graph, Tensor};

fn main() -> troikit::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::<f64>::new();
    let config = TroiConfig {
        scene_token: true,
        ..TroiConfig::default()
    };
    let block = TroiModule::new(&mut store, "troi", config, 16, &mut rng)?;
    let map = Tensor::from_fn(vec![4, 8, 8, 16], |_| rng.gen_range(0.0..1.0));
    let rois = [
        RoiBox::new(0, 0.1, 0.1, 0.4, 0.5, Entity::Hand),
        RoiBox::new(2, 0.5, 0.4, 0.9, 0.9, Entity::Object),
        RoiBox::new(3, 0.3, 0.3, 0.6, 0.6, Entity::Object),
    ];

    let g = Graph::new();
    let p = store.bind(&g);
    let x = g.constant(map.clone());
    let out = block.forward(&g, &p, x, &rois)?;
    let y = g.value(out.map);
    let changed = (0..4 * 8 * 8)
        .filter(|&cell| {
            y.data()[cell * 16..(cell + 1) * 16] != map.data()[cell * 16..(cell + 1) * 16]
        })
        .count();
    let covered: usize = rois
        .iter()
        .map(|r| box_to_footprint(r, 8, 8).cell_count())
        .sum();
    println!("output shape {:?}", y.shape());
    println!(
        "cells changed {changed} of {}, footprint cells {covered}",
        4 * 8 * 8
    );
    println!(
        "attention matrices {}, each {:?}",
        out.attention.len(),
        g.shape(out.attention[0])
    );

    let bypass = block.forward(&g, &p, x, &[])?;
    println!(
        "no boxes: bypassed {}, same var {}",
        bypass.bypassed,
        bypass.map == x
    );
    Ok(())
}
