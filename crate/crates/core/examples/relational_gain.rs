//! Relation model against the same CNN without it, over several seeds on
//! 600 training and 300 validation videos.
//!
//! ```sh
//! cargo run --release --example relational_gain -- 3
//! ```
//!
//! The optional argument is the number of seeds (default 3). Each run takes
//! about a minute in release mode on one core.

use troikit::config::RunConfig;
use troikit::experiment::{datasets, relational_gain, standard_datasets};

fn main() -> troikit::Result<()> {
    let seeds: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(3);
    let (train_spec, val_spec) = standard_datasets();
    let (train_set, val_set) = datasets(&train_spec, &val_spec)?;
    let run = RunConfig::default();
    println!(
        "{} train / {} val videos, {} epochs, lr {}",
        train_set.len(),
        val_set.len(),
        run.epochs,
        run.lr
    );
    let seeds: Vec<u64> = (0..seeds).collect();
    let (report, _) = relational_gain::<f32>(&run, &seeds, &train_set, &val_set)?;
    print!("{}", report.table());
    Ok(())
}
