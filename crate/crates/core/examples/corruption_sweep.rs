//! Train one relation model, then score it with shifted and missing boxes.
//!
//! ```sh
//! cargo run --release --example corruption_sweep
//! ```

use troikit::config::RunConfig;
use troikit::experiment::{
    corruption_sweep, corruption_table, datasets, standard_datasets, train_run,
};
use troikit::synth::Corruption;

fn main() -> troikit::Result<()> {
    let (train_spec, val_spec) = standard_datasets();
    let (train_set, val_set) = datasets(&train_spec, &val_spec)?;
    let run = RunConfig::default();
    let (model, records) = train_run::<f32>(&run, run.model_config(), &train_set, &val_set)?;
    for r in &records {
        println!("{}", r.to_line());
    }
    let rows = corruption_sweep(&[model], &val_set, &Corruption::SWEEP)?;
    print!("{}", corruption_table(&rows));
    Ok(())
}
