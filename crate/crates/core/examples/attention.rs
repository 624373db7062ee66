//! One encoder layer over a handful of feature rows, printing each head's
//! attention matrix.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use troikit::encoder::EncoderLayer;
use troikit::params::ParamStore;
use troikit::{Graph, Tensor};

fn main() -> troikit::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::<f64>::new();
    let layer = EncoderLayer::new(&mut store, "enc", 16, 2, &mut rng)?;
    let rows = Tensor::from_fn(vec![5, 16], |_| rng.gen_range(-1.0..1.0));

    let g = Graph::new();
    let p = store.bind(&g);
    let out = layer.forward(&g, &p, g.constant(rows))?;
    for (h, a) in out.attention.iter().enumerate() {
        let a = g.value(*a);
        println!("head {h}");
        for i in 0..a.dim(0) {
            let row: Vec<String> = a.row(i).iter().map(|v| format!("{v:.3}")).collect();
            println!(
                "  {}  (sum {:.6})",
                row.join(" "),
                a.row(i).iter().sum::<f64>()
            );
        }
    }
    let f = g.value(out.features);
    let mean = f.row(0).iter().sum::<f64>() / 16.0;
    println!("output {:?}, row 0 mean {mean:.2e}", f.shape());
    Ok(())
}
