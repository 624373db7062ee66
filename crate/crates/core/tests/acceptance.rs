//! Acceptance gate. Runs every criterion, prints one line each and exits
//! non-zero if any failed.

use std::fs;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use troikit::config::RunConfig;
use troikit::encoder::{Encoder, EncoderLayer};
use troikit::experiment::{
    ablation_grid, ablation_table, corruption_sweep, corruption_table, datasets, relational_gain,
    standard_datasets,
};
use troikit::gradcheck::{check_all, GradcheckConfig};
use troikit::params::ParamStore;
use troikit::roi::{box_to_footprint, roi_align, sanitize_rois, Entity, RoiBox, SAMPLES_PER_BIN};
use troikit::synth::{Corruption, DatasetSpec};
use troikit::troi::{Insertion, TroiConfig, TroiModule};
use troikit::{Graph, Tensor};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn random_map(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-2.0..2.0))
}

fn random_box(rng: &mut ChaCha8Rng, frames: usize) -> RoiBox {
    let (a, b) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
    let (c, d) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
    let entity = if rng.gen_bool(0.5) {
        Entity::Hand
    } else {
        Entity::Object
    };
    RoiBox::new(
        rng.gen_range(0..frames),
        f64::min(a, b),
        f64::min(c, d),
        f64::max(a, b),
        f64::max(c, d),
        entity,
    )
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let results = match check_all(&GradcheckConfig::default()) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("error: {e}")),
    };
    let secs = start.elapsed().as_secs_f64();
    let worst = results.iter().map(|r| r.rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.op.as_str())
        .collect();
    outcome(
        failed.is_empty() && results.len() == 10 && secs < 60.0,
        format!(
            "{} ops, worst rel error {worst:.2e} (< 1e-4), failed {failed:?}, {secs:.1}s (< 60s)",
            results.len()
        ),
    )
}

fn attention_normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut matrices = 0;
    for case in 0..100 {
        let n = rng.gen_range(1..=16);
        let c = [8, 16, 32][case % 3];
        let heads = [1, 2, 4][rng.gen_range(0..3)];
        let depth = rng.gen_range(1..=2);
        let mut store = ParamStore::<f64>::new();
        let encoder = Encoder::new(&mut store, "enc", c, heads, depth, &mut rng).unwrap();
        let g = Graph::new();
        let p = store.bind(&g);
        let f = g.constant(random_map(&mut rng, vec![n, c]));
        let out = encoder.forward(&g, &p, f).unwrap();
        assert_eq!(out.attention.len(), heads * depth);
        for a in &out.attention {
            let a = g.value(*a);
            matrices += 1;
            for i in 0..n {
                worst = worst.max((a.row(i).iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    outcome(
        worst <= 1e-6,
        format!("{matrices} attention matrices, worst |row sum - 1| {worst:.2e} (<= 1e-6)"),
    )
}

fn locality_and_bypass() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut violations = 0;
    let mut bypass_failures = 0;
    let mut untouched_cells = 0usize;
    for case in 0..100 {
        let (t, w, h, c) = (
            rng.gen_range(1..=4),
            rng.gen_range(2..=8),
            rng.gen_range(2..=8),
            [8, 16][case % 2],
        );
        let config = TroiConfig {
            scene_token: rng.gen_bool(0.5),
            coord_encoding: rng.gen_bool(0.5),
            layers: rng.gen_range(1..=2),
            ..TroiConfig::default()
        };
        let mut store = ParamStore::<f64>::new();
        let block = TroiModule::new(&mut store, "troi", config, c, &mut rng).unwrap();
        let map = random_map(&mut rng, vec![t, w, h, c]);
        let count = rng.gen_range(0..=5);
        let rois: Vec<RoiBox> = (0..count).map(|_| random_box(&mut rng, t)).collect();

        let g = Graph::new();
        let p = store.bind(&g);
        let x = g.constant(map.clone());
        let out = block.forward(&g, &p, x, &rois).unwrap();
        let y = g.value(out.map);
        let (kept, _) = sanitize_rois(&rois, t);
        let footprints: Vec<_> = kept.iter().map(|r| box_to_footprint(r, w, h)).collect();
        for f in 0..t {
            for ix in 0..w {
                for iy in 0..h {
                    if footprints.iter().any(|fp| fp.contains(f, ix, iy)) {
                        continue;
                    }
                    untouched_cells += 1;
                    let at = ((f * w + ix) * h + iy) * c;
                    let same = y.data()[at..at + c]
                        .iter()
                        .zip(&map.data()[at..at + c])
                        .all(|(a, b)| a.to_bits() == b.to_bits());
                    if !same {
                        violations += 1;
                    }
                }
            }
        }

        let empty = block.forward(&g, &p, x, &[]).unwrap();
        let e = g.value(empty.map);
        let exact = e
            .data()
            .iter()
            .zip(map.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if !(empty.bypassed && empty.map == x && exact) {
            bypass_failures += 1;
        }
    }
    outcome(
        violations == 0 && bypass_failures == 0,
        format!("100 cases, {untouched_cells} cells outside footprints, {violations} changed; {bypass_failures} bypass failures"),
    )
}

/// Per-head attention composed with plain loops from the stored weights.
fn mha_oracle(store: &ParamStore<f64>, layer: &EncoderLayer, f: &Tensor<f64>) -> Vec<f64> {
    let (n, c, m) = (f.dim(0), layer.channels, layer.heads);
    let d = c / m;
    let wqkv = store.value(layer.w_qkv);
    let wout = store.value(layer.w_out);
    let proj = |col: usize, i: usize| {
        (0..c)
            .map(|k| f.data()[i * c + k] * wqkv.data()[k * 3 * c + col])
            .sum::<f64>()
    };
    let mut concat = vec![0.0; n * c];
    for h in 0..m {
        let q: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..d).map(|j| proj(h * d + j, i)).collect())
            .collect();
        let k: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..d).map(|j| proj(c + h * d + j, i)).collect())
            .collect();
        let v: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..d).map(|j| proj(2 * c + h * d + j, i)).collect())
            .collect();
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| {
                    q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt()
                })
                .collect();
            let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
            let z: f64 = exps.iter().sum();
            for jj in 0..d {
                concat[i * c + h * d + jj] = (0..n).map(|j| exps[j] / z * v[j][jj]).sum();
            }
        }
    }
    (0..n * c)
        .map(|idx| {
            let (i, o) = (idx / c, idx % c);
            (0..c)
                .map(|k| concat[i * c + k] * wout.data()[k * c + o])
                .sum()
        })
        .collect()
}

/// Bilinear value at a continuous position via the tent kernel over every
/// cell, after clamping to the cell-centre range.
fn tent_sample(map: &Tensor<f64>, frame: usize, px: f64, py: f64, ch: usize) -> f64 {
    let (w, h, c) = (map.dim(1), map.dim(2), map.dim(3));
    let px = px.clamp(0.5, w as f64 - 0.5);
    let py = py.clamp(0.5, h as f64 - 0.5);
    let mut acc = 0.0;
    for ix in 0..w {
        for iy in 0..h {
            let kx = (1.0 - (px - (ix as f64 + 0.5)).abs()).max(0.0);
            let ky = (1.0 - (py - (iy as f64 + 0.5)).abs()).max(0.0);
            acc += kx * ky * map.data()[((frame * w + ix) * h + iy) * c + ch];
        }
    }
    acc
}

fn roi_align_oracle(map: &Tensor<f64>, roi: &RoiBox, bins: usize) -> Vec<f64> {
    let (w, h, c) = (map.dim(1) as f64, map.dim(2) as f64, map.dim(3));
    let s = SAMPLES_PER_BIN;
    let mut out = Vec::new();
    for bx in 0..bins {
        for by in 0..bins {
            for ch in 0..c {
                let mut acc = 0.0;
                for sx in 0..s {
                    for sy in 0..s {
                        let fx = (bx as f64 + (sx as f64 + 0.5) / s as f64) / bins as f64;
                        let fy = (by as f64 + (sy as f64 + 0.5) / s as f64) / bins as f64;
                        let px = (roi.x1 + fx * (roi.x2 - roi.x1)) * w;
                        let py = (roi.y1 + fy * (roi.y2 - roi.y1)) * h;
                        acc += tent_sample(map, roi.frame, px, py, ch);
                    }
                }
                out.push(acc / (s * s) as f64);
            }
        }
    }
    out
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mha_worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.gen_range(1..=12);
        let c = [8, 16, 32][rng.gen_range(0..3)];
        let heads = [1, 2, 4, 8][rng.gen_range(0..4)];
        let mut store = ParamStore::<f64>::new();
        let layer = EncoderLayer::new(&mut store, "enc", c, heads, &mut rng).unwrap();
        let f = random_map(&mut rng, vec![n, c]);
        let g = Graph::new();
        let p = store.bind(&g);
        let (mha, _) = layer.multi_head(&g, &p, g.constant(f.clone())).unwrap();
        let expected = mha_oracle(&store, &layer, &f);
        for (a, b) in g.value(mha).data().iter().zip(&expected) {
            mha_worst = mha_worst.max((a - b).abs());
        }
    }
    let mut align_worst = 0.0f64;
    for _ in 0..50 {
        let (t, w, h, c) = (
            rng.gen_range(1..=3),
            rng.gen_range(1..=9),
            rng.gen_range(1..=9),
            rng.gen_range(1..=4),
        );
        let map = random_map(&mut rng, vec![t, w, h, c]);
        let mut roi = random_box(&mut rng, t);
        roi.x2 = roi.x2.max(roi.x1 + 1e-3);
        roi.y2 = roi.y2.max(roi.y1 + 1e-3);
        let bins = rng.gen_range(1..=3);
        let got = roi_align(&map, &roi, bins).unwrap();
        for (a, b) in got.data().iter().zip(roi_align_oracle(&map, &roi, bins)) {
            align_worst = align_worst.max((a - b).abs());
        }
    }
    outcome(
        mha_worst <= 1e-6 && align_worst <= 1e-9,
        format!("multi-head max diff {mha_worst:.2e} (<= 1e-6), RoIAlign max diff {align_worst:.2e} (<= 1e-9)"),
    )
}

fn main() {
    let mut lines: Vec<(String, Outcome)> = Vec::new();
    let mut record = |name: &str, o: Outcome| {
        println!(
            "[{}] {name}: {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
        lines.push((name.to_string(), o));
    };

    record("1 gradient suite", gradient_suite());
    record("2 attention normalization", attention_normalization());
    record("3 locality and bypass", locality_and_bypass());
    record("4 oracle equivalence", oracle_equivalence());

    let (train_spec, val_spec) = standard_datasets();
    let (train_set, val_set) = datasets(&train_spec, &val_spec).expect("datasets");
    let run = RunConfig::default();
    let start = Instant::now();
    let (report, models) =
        relational_gain::<f32>(&run, &[0, 1, 2], &train_set, &val_set).expect("relational gain");
    let secs = start.elapsed().as_secs_f64();
    print!("{}", report.table());
    let gain = report.gain_points();
    record(
        "5 relational gain",
        outcome(
            gain >= 10.0,
            format!(
                "{} train / {} val, relation {:.4} vs baseline {:.4}, gain {gain:+.1} points (>= 10), {secs:.0}s",
                train_set.len(),
                val_set.len(),
                report.troi_mean(),
                report.baseline_mean()
            ),
        ),
    );

    let rows = corruption_sweep(&models, &val_set, &Corruption::SWEEP).expect("corruption sweep");
    print!("{}", corruption_table(&rows));
    let acc = |label: &str| {
        rows.iter()
            .find(|r| r.label() == label)
            .map(|r| r.mean())
            .expect("row")
    };
    let (gt, i50, i25, i05, none) = (
        acc("gt"),
        acc("iou@0.50"),
        acc("iou@0.25"),
        acc("iou@0.05"),
        acc("drop-all"),
    );
    record(
        "6 corruption monotonicity",
        outcome(
            i50 >= i25 && i25 >= i05 && none < gt,
            format!("iou@0.50 {i50:.4} >= iou@0.25 {i25:.4} >= iou@0.05 {i05:.4}; drop-all {none:.4} < gt {gt:.4}"),
        ),
    );

    let small = DatasetSpec {
        per_class: 20,
        seed: 1,
        ..DatasetSpec::default()
    };
    let (a, b) = datasets(
        &small,
        &DatasetSpec {
            per_class: 10,
            seed: 2,
            ..small
        },
    )
    .expect("datasets");
    let grid_run = RunConfig {
        epochs: 2,
        ..RunConfig::default()
    };
    let ablation = ablation_grid::<f32>(&grid_run, &Insertion::ALL, &[1, 2], &a, &b);
    record(
        "7 ablation harness",
        match ablation {
            Ok(rows) => {
                let table = ablation_table(&rows, grid_run.topk);
                print!("{table}");
                outcome(
                    rows.len() == 6 && table.lines().count() == 7,
                    format!("{} runs, table emitted", rows.len()),
                )
            }
            Err(e) => outcome(false, format!("error: {e}")),
        },
    );

    record("8 determinism", determinism());

    let failed = lines.iter().filter(|(_, o)| !o.passed).count();
    println!(
        "acceptance: {} of {} criteria passed",
        lines.len() - failed,
        lines.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}

/// Two 64-bit training runs through the command line with the same seed but
/// different worker counts must write identical metrics logs.
fn determinism() -> Outcome {
    let dir = tempfile::tempdir().expect("tempdir");
    let root = dir.path();
    let cli = |args: &[&str]| {
        let mut sink = Vec::new();
        let mut err = Vec::new();
        let code = troikit::cli::run(
            std::iter::once("troikit").chain(args.iter().copied()),
            &mut sink,
            &mut err,
        );
        assert_eq!(code, 0, "{}", String::from_utf8_lossy(&err));
    };
    let data = root.join("data");
    let val = root.join("val");
    cli(&[
        "gen",
        "--out",
        data.to_str().unwrap(),
        "--per-class",
        "6",
        "--seed",
        "11",
    ]);
    cli(&[
        "gen",
        "--out",
        val.to_str().unwrap(),
        "--per-class",
        "3",
        "--seed",
        "12",
    ]);
    let mut logs = Vec::new();
    for (i, threads) in ["1", "3"].into_iter().enumerate() {
        std::env::set_var(troikit::train::THREADS_ENV, threads);
        let out = root.join(format!("run{i}"));
        cli(&[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--val",
            val.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--precision",
            "f64",
            "--epochs",
            "3",
            "--batch-size",
            "8",
            "--seed",
            "5",
        ]);
        logs.push(fs::read(out.join("metrics.log")).expect("metrics log"));
    }
    std::env::remove_var(troikit::train::THREADS_ENV);
    let lines = String::from_utf8_lossy(&logs[0]).lines().count();
    outcome(
        logs[0] == logs[1] && lines == 3,
        format!(
            "{lines} epoch lines, logs with 1 and 3 workers bit-identical: {}",
            logs[0] == logs[1]
        ),
    )
}
