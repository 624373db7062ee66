//! Central finite-difference checks of every differentiable operation.
//!
//! Each case reduces its output to the scalar `Σ w ⊙ out` with fixed random
//! weights `w`, then compares analytic and numeric derivatives at randomly
//! chosen input coordinates. The error is `‖a − n‖ / (‖a‖ + ‖n‖)` over the
//! sampled coordinates.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{BackboneSpec, ModelConfig, StageSpec, TroiNet};
use crate::encoder::EncoderLayer;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::roi::{roi_align_var, Entity, RoiBox, DEFAULT_BINS};
use crate::tensor::kernels::Conv2dGeometry;
use crate::tensor::{Graph, Tensor, Var};
use crate::troi::{TroiConfig, TroiModule};

pub const OPS: [&str; 10] = [
    "matmul",
    "softmax",
    "layer_norm",
    "relu",
    "linear",
    "conv2d",
    "roi_align",
    "encoder_layer",
    "troi_forward",
    "backbone_loss",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub points: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Scales every analytic derivative by `1 + perturb`; a nonzero value
    /// must make the check fail.
    pub perturb: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            points: 10,
            step: 1e-5,
            tolerance: 1e-4,
            perturb: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub op: String,
    pub points: usize,
    pub rel_error: f64,
    pub passed: bool,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<14} {:>3} points  rel_err {:.3e}  {}",
            self.op,
            self.points,
            self.rel_error,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

type Build = Box<dyn Fn(&Graph<f64>, &[Var]) -> Result<Var>>;

struct Case {
    inputs: Vec<Tensor<f64>>,
    build: Build,
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Values bounded away from zero so a small step never crosses a kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v: f64 = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn store_values(store: &ParamStore<f64>) -> Vec<Tensor<f64>> {
    store.iter().map(|p| p.value.clone()).collect()
}

fn sample_rois() -> Vec<RoiBox> {
    vec![
        RoiBox::new(0, 0.1, 0.15, 0.6, 0.55, Entity::Hand),
        RoiBox::new(1, 0.35, 0.3, 0.95, 0.9, Entity::Object),
        RoiBox::new(1, 0.05, 0.5, 0.45, 0.95, Entity::Object),
    ]
}

fn case(op: &str, rng: &mut ChaCha8Rng) -> Result<Case> {
    let c = match op {
        "matmul" => Case {
            inputs: vec![random(rng, &[3, 4]), random(rng, &[4, 5])],
            build: Box::new(|g, v| g.matmul(v[0], v[1])),
        },
        "softmax" => Case {
            inputs: vec![random(rng, &[4, 6])],
            build: Box::new(|g, v| g.softmax_rows(v[0])),
        },
        "layer_norm" => Case {
            inputs: vec![random(rng, &[4, 6]), random(rng, &[6]), random(rng, &[6])],
            build: Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
        },
        "relu" => Case {
            inputs: vec![away_from_zero(rng, &[5, 7])],
            build: Box::new(|g, v| Ok(g.relu(v[0]))),
        },
        "linear" => Case {
            inputs: vec![
                random(rng, &[4, 5]),
                random(rng, &[5, 3]),
                random(rng, &[3]),
            ],
            build: Box::new(|g, v| g.linear(v[0], v[1], Some(v[2]))),
        },
        "conv2d" => Case {
            inputs: vec![
                random(rng, &[2, 5, 5, 3]),
                random(rng, &[3, 3, 3, 4]),
                random(rng, &[4]),
            ],
            build: Box::new(|g, v| {
                let geo = Conv2dGeometry {
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                };
                g.conv2d(v[0], v[1], v[2], geo)
            }),
        },
        "roi_align" => Case {
            inputs: vec![random(rng, &[2, 6, 6, 3])],
            build: Box::new(|g, v| {
                let roi = RoiBox::new(1, 0.15, 0.2, 0.8, 0.7, Entity::Object);
                roi_align_var(g, v[0], &roi, DEFAULT_BINS)
            }),
        },
        "encoder_layer" => {
            let mut store = ParamStore::new();
            let layer = EncoderLayer::new(&mut store, "enc", 8, 2, rng)?;
            let mut inputs = vec![random(rng, &[5, 8])];
            inputs.extend(store_values(&store));
            Case {
                inputs,
                build: Box::new(move |g, v| {
                    let p = Bound::from_vars(v[1..].to_vec());
                    Ok(layer.forward(g, &p, v[0])?.features)
                }),
            }
        }
        "troi_forward" => {
            let mut store = ParamStore::new();
            let config = TroiConfig {
                scene_token: true,
                coord_encoding: true,
                ..TroiConfig::default()
            };
            let module = TroiModule::new(&mut store, "troi", config, 8, rng)?;
            let mut inputs = vec![random(rng, &[2, 4, 4, 8])];
            inputs.extend(store_values(&store));
            Case {
                inputs,
                build: Box::new(move |g, v| {
                    let p = Bound::from_vars(v[1..].to_vec());
                    Ok(module.forward(g, &p, v[0], &sample_rois())?.map)
                }),
            }
        }
        "backbone_loss" => {
            let spec = BackboneSpec {
                frames: 2,
                width: 16,
                height: 16,
                stages: [4, 8, 8, 8]
                    .into_iter()
                    .map(|channels| StageSpec {
                        channels,
                        stride: 2,
                    })
                    .collect(),
                ..BackboneSpec::default()
            };
            let net = TroiNet::<f64>::new(
                ModelConfig {
                    backbone: spec.clone(),
                    troi: Some(TroiConfig::default()),
                },
                rng.gen(),
            )?;
            let video = Tensor::from_fn(spec.input_shape().to_vec(), |_| rng.gen_range(0.0..1.0));
            let mut inputs = vec![video];
            inputs.extend(store_values(&net.store));
            Case {
                inputs,
                build: Box::new(move |g, v| {
                    let p = Bound::from_vars(v[1..].to_vec());
                    let out = net.forward(g, &p, v[0], &sample_rois())?;
                    g.cross_entropy(out.logits, 2)
                }),
            }
        }
        other => {
            return Err(Error::Config(format!(
                "unknown op `{other}` (expected one of {})",
                OPS.join(", ")
            )))
        }
    };
    Ok(c)
}

fn weighted_loss(g: &Graph<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(weights.clone());
    Ok(g.sum(g.mul(out, w)?))
}

fn evaluate(case: &Case, weights: &Tensor<f64>, inputs: &[Tensor<f64>]) -> Result<f64> {
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = (case.build)(&g, &vars)?;
    Ok(g.value(weighted_loss(&g, out, weights)?).item())
}

fn op_seed(seed: u64, op: &str) -> u64 {
    op.bytes().fold(seed ^ 0xCBF2_9CE4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01B3)
    })
}

pub fn check_op(op: &str, cfg: &GradcheckConfig) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(op_seed(cfg.seed, op));
    let case = case(op, &mut rng)?;
    let g = Graph::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = (case.build)(&g, &vars)?;
    let weights = random(&mut rng, &g.shape(out));
    let loss = weighted_loss(&g, out, &weights)?;
    let grads = g.backward(loss)?;
    let sizes: Vec<usize> = case.inputs.iter().map(Tensor::numel).collect();
    let total: usize = sizes.iter().sum();
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for _ in 0..cfg.points {
        let mut flat = rng.gen_range(0..total);
        let mut which = 0;
        while flat >= sizes[which] {
            flat -= sizes[which];
            which += 1;
        }
        let analytic = grads.get(vars[which]).map_or(0.0, |t| t.data()[flat]) * (1.0 + cfg.perturb);
        let mut inputs = case.inputs.clone();
        let x = inputs[which].data()[flat];
        inputs[which].data_mut()[flat] = x + cfg.step;
        let up = evaluate(&case, &weights, &inputs)?;
        inputs[which].data_mut()[flat] = x - cfg.step;
        let down = evaluate(&case, &weights, &inputs)?;
        let numeric = (up - down) / (2.0 * cfg.step);
        diff += (analytic - numeric).powi(2);
        na += analytic * analytic;
        nn += numeric * numeric;
    }
    let denom = na.sqrt() + nn.sqrt();
    let rel_error = if denom == 0.0 {
        0.0
    } else {
        diff.sqrt() / denom
    };
    Ok(CheckResult {
        op: op.to_string(),
        points: cfg.points,
        rel_error,
        passed: rel_error < cfg.tolerance,
    })
}

pub fn check_all(cfg: &GradcheckConfig) -> Result<Vec<CheckResult>> {
    OPS.iter().map(|op| check_op(op, cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        for r in check_all(&GradcheckConfig::default()).unwrap() {
            assert!(r.passed, "{r}");
        }
    }

    #[test]
    fn perturbed_gradient_fails() {
        let cfg = GradcheckConfig {
            perturb: 0.01,
            ..GradcheckConfig::default()
        };
        assert!(!check_op("matmul", &cfg).unwrap().passed);
    }

    #[test]
    fn unknown_op_rejected() {
        assert!(matches!(
            check_op("fft", &GradcheckConfig::default()),
            Err(Error::Config(_))
        ));
    }
}
