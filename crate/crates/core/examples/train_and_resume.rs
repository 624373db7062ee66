//! Train for a few epochs with a checkpoint after each, resume from it in a
//! fresh model, then evaluate the result.
//!
//! ```sh
//! cargo run --release --example train_and_resume -- /tmp/troikit-run
//! ```

use std::path::PathBuf;

use troikit::backbone::TroiNet;
use troikit::checkpoint::Checkpoint;
use troikit::config::RunConfig;
use troikit::synth::{build_dataset, DatasetSpec, SynthClass};
use troikit::train::{evaluate, train, TrainConfig, TrainState};

fn main() -> troikit::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("troikit-run"));
    let path = dir.join("checkpoint.ckpt");
    let train_set = build_dataset(&DatasetSpec {
        per_class: 20,
        seed: 1,
        ..DatasetSpec::default()
    })?;
    let val_set = build_dataset(&DatasetSpec {
        per_class: 10,
        seed: 2,
        ..DatasetSpec::default()
    })?;

    let run = RunConfig::parse("epochs = 4\nbatch_size = 8\nlr = 0.05")?;
    let text = run.model_text();
    let cfg = run.train_config();

    // First session stops after two epochs.
    let mut net = TroiNet::<f32>::new(run.model_config(), run.seed)?;
    let mut state = TrainState::new(&net.store);
    let first = TrainConfig {
        epochs: 2,
        ..cfg.clone()
    };
    let mut log = std::io::stdout();
    train(
        &mut net,
        &mut state,
        &train_set,
        &val_set,
        &first,
        &mut log,
        |m, s| Checkpoint::capture(&text, m, s).save(&path),
    )?;

    // Second session picks up from disk.
    let ckpt = Checkpoint::load(&path)?;
    let mut net: TroiNet<f32> = ckpt.build_model()?;
    let mut state = ckpt.train_state(&net)?;
    println!("resumed at epoch {} from {}", state.epoch, path.display());
    train(
        &mut net,
        &mut state,
        &train_set,
        &val_set,
        &cfg,
        &mut log,
        |m, s| Checkpoint::capture(&text, m, s).save(&path),
    )?;

    let names: Vec<&str> = SynthClass::ALL.iter().map(|c| c.name()).collect();
    print!("{}", evaluate(&net, &val_set, run.topk)?.report(&names));
    Ok(())
}
