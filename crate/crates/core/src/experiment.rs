//! Multi-run experiments: the relational gain over a plain CNN, box
//! corruption sweeps and the placement/depth grid.

use std::fmt::Write as _;
use std::time::Instant;

use crate::backbone::{ModelConfig, TroiNet};
use crate::config::RunConfig;
use crate::error::Result;
use crate::synth::{build_dataset, Corruption, DatasetSpec, SynthVideo};
use crate::tensor::Real;
use crate::train::{evaluate_with, train, EpochRecord, TrainState};
use crate::troi::{Insertion, TroiConfig};

/// Train and validation sets drawn from disjoint seed streams.
pub fn datasets(
    train: &DatasetSpec,
    val: &DatasetSpec,
) -> Result<(Vec<SynthVideo>, Vec<SynthVideo>)> {
    Ok((build_dataset(train)?, build_dataset(val)?))
}

/// 600 training and 300 validation videos over the six classes.
pub fn standard_datasets() -> (DatasetSpec, DatasetSpec) {
    let base = DatasetSpec::default();
    (
        DatasetSpec {
            per_class: 100,
            seed: 1,
            ..base
        },
        DatasetSpec {
            per_class: 50,
            seed: 2,
            ..base
        },
    )
}

/// Trains one model from scratch. `run.seed` seeds both initialisation and
/// batch order.
pub fn train_run<T: Real>(
    run: &RunConfig,
    model: ModelConfig,
    train_set: &[SynthVideo],
    val_set: &[SynthVideo],
) -> Result<(TroiNet<T>, Vec<EpochRecord>)> {
    let cfg = run.train_config();
    let mut net = TroiNet::new(model, run.seed)?;
    let mut state = TrainState::new(&net.store);
    let mut log = Vec::new();
    let records = train(
        &mut net,
        &mut state,
        train_set,
        val_set,
        &cfg,
        &mut log,
        |_, _| Ok(()),
    )?;
    Ok((net, records))
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

#[derive(Debug, Clone)]
pub struct GainReport {
    pub seeds: Vec<u64>,
    pub troi_top1: Vec<f64>,
    pub baseline_top1: Vec<f64>,
}

impl GainReport {
    pub fn troi_mean(&self) -> f64 {
        mean(&self.troi_top1)
    }

    pub fn baseline_mean(&self) -> f64 {
        mean(&self.baseline_top1)
    }

    /// Mean top-1 difference in percentage points.
    pub fn gain_points(&self) -> f64 {
        100.0 * (self.troi_mean() - self.baseline_mean())
    }

    pub fn table(&self) -> String {
        let mut out = String::from("seed  baseline  troi\n");
        for ((s, b), t) in self
            .seeds
            .iter()
            .zip(&self.baseline_top1)
            .zip(&self.troi_top1)
        {
            let _ = writeln!(out, "{s:<5} {b:<9.4} {t:.4}");
        }
        let _ = writeln!(
            out,
            "mean  {:<9.4} {:.4}  gain {:+.1} points",
            self.baseline_mean(),
            self.troi_mean(),
            self.gain_points()
        );
        out
    }
}

/// Trains the relation model and the identical plain CNN for every seed and
/// returns the final validation top-1 of each, plus the trained relation
/// models for further evaluation.
pub fn relational_gain<T: Real>(
    run: &RunConfig,
    seeds: &[u64],
    train_set: &[SynthVideo],
    val_set: &[SynthVideo],
) -> Result<(GainReport, Vec<TroiNet<T>>)> {
    let mut report = GainReport {
        seeds: seeds.to_vec(),
        troi_top1: Vec::new(),
        baseline_top1: Vec::new(),
    };
    let mut models = Vec::new();
    for &seed in seeds {
        let seeded = RunConfig {
            seed,
            ..run.clone()
        };
        let mut with = seeded.model_config();
        with.troi = Some(with.troi.unwrap_or_default());
        let without = ModelConfig {
            troi: None,
            ..with.clone()
        };
        let (net, records) = train_run::<T>(&seeded, with, train_set, val_set)?;
        report
            .troi_top1
            .push(records.last().map_or(0.0, |r| r.val_top1));
        models.push(net);
        let (_, records) = train_run::<T>(&seeded, without, train_set, val_set)?;
        report
            .baseline_top1
            .push(records.last().map_or(0.0, |r| r.val_top1));
    }
    Ok((report, models))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionRow {
    /// `None` is the uncorrupted reference.
    pub mode: Option<Corruption>,
    pub top1: Vec<f64>,
}

impl CorruptionRow {
    pub fn mean(&self) -> f64 {
        mean(&self.top1)
    }

    pub fn label(&self) -> String {
        self.mode.map_or("gt".into(), |m| m.to_string())
    }
}

/// Top-1 of every model under clean boxes and each corruption.
pub fn corruption_sweep<T: Real>(
    models: &[TroiNet<T>],
    val_set: &[SynthVideo],
    modes: &[Corruption],
) -> Result<Vec<CorruptionRow>> {
    std::iter::once(None)
        .chain(modes.iter().copied().map(Some))
        .map(|mode| {
            let top1 = models
                .iter()
                .map(|m| Ok(evaluate_with(m, val_set, 1, mode)?.top1))
                .collect::<Result<_>>()?;
            Ok(CorruptionRow { mode, top1 })
        })
        .collect()
}

pub fn corruption_table(rows: &[CorruptionRow]) -> String {
    let mut out = String::from("boxes         top1\n");
    for r in rows {
        let _ = writeln!(out, "{:<13} {:.4}", r.label(), r.mean());
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub insertion: Insertion,
    pub layers: usize,
    pub top1: f64,
    pub topk: f64,
    pub seconds: f64,
}

/// One run per placement and encoder depth.
pub fn ablation_grid<T: Real>(
    run: &RunConfig,
    placements: &[Insertion],
    depths: &[usize],
    train_set: &[SynthVideo],
    val_set: &[SynthVideo],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &insertion in placements {
        for &layers in depths {
            let mut model = run.model_config();
            model.troi = Some(TroiConfig {
                insertion,
                layers,
                ..model.troi.unwrap_or_default()
            });
            let start = Instant::now();
            let (_, records) = train_run::<T>(run, model, train_set, val_set)?;
            let last = records.last().expect("at least one epoch");
            rows.push(AblationRow {
                insertion,
                layers,
                top1: last.val_top1,
                topk: last.val_topk,
                seconds: start.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow], k: usize) -> String {
    let mut out = format!("placement  layers  top1    top{k}    seconds\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<10} {:<7} {:.4}  {:.4}  {:.1}",
            r.insertion.to_string(),
            r.layers,
            r.top1,
            r.topk,
            r.seconds
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (RunConfig, Vec<SynthVideo>, Vec<SynthVideo>) {
        let run = RunConfig::parse("epochs = 1\nbatch_size = 4\nchannels = 8,8,8,8").unwrap();
        let spec = DatasetSpec {
            per_class: 1,
            ..DatasetSpec::default()
        };
        let (a, b) = datasets(&spec, &DatasetSpec { seed: 99, ..spec }).unwrap();
        (run, a, b)
    }

    #[test]
    fn gain_report_shapes() {
        let (run, a, b) = tiny();
        let (report, models) = relational_gain::<f32>(&run, &[0], &a, &b).unwrap();
        assert_eq!(models.len(), 1);
        assert_eq!(report.troi_top1.len(), 1);
        assert!(report.table().contains("gain"));
        let rows = corruption_sweep(&models, &b, &[Corruption::DropAll]).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].label(), "gt");
    }

    #[test]
    fn ablation_rows() {
        let (run, a, b) = tiny();
        let rows = ablation_grid::<f32>(&run, &[Insertion::Conv3, Insertion::Conv5], &[1], &a, &b)
            .unwrap();
        assert_eq!(rows.len(), 2);
        assert!(ablation_table(&rows, 5).contains("conv5"));
    }
}
