//! Placement and depth grid on a reduced dataset.
//!
//! ```sh
//! cargo run --release --example ablation -- 4
//! ```
//!
//! The optional argument is the epoch count per run (default 4).

use troikit::config::RunConfig;
use troikit::experiment::{ablation_grid, ablation_table, datasets};
use troikit::synth::DatasetSpec;
use troikit::troi::Insertion;

fn main() -> troikit::Result<()> {
    let epochs: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(4);
    let train_spec = DatasetSpec {
        per_class: 40,
        seed: 1,
        ..DatasetSpec::default()
    };
    let val_spec = DatasetSpec {
        per_class: 20,
        seed: 2,
        ..train_spec
    };
    let (train_set, val_set) = datasets(&train_spec, &val_spec)?;
    let run = RunConfig {
        epochs,
        ..RunConfig::default()
    };
    let rows = ablation_grid::<f32>(&run, &Insertion::ALL, &[1, 2], &train_set, &val_set)?;
    print!("{}", ablation_table(&rows, run.topk));
    Ok(())
}
