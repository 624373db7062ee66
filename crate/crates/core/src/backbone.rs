//! A small per-frame CNN video classifier with an optional relation block
//! between two of its stages.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::roi::RoiBox;
use crate::tensor::kernels::Conv2dGeometry;
use crate::tensor::{Graph, Real, Tensor, Var};
use crate::troi::{Insertion, TroiConfig, TroiModule};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSpec {
    pub channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneSpec {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub stages: Vec<StageSpec>,
    pub classes: usize,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            frames: 8,
            width: 32,
            height: 32,
            in_channels: 3,
            kernel: 3,
            stages: [16, 32, 64, 64]
                .into_iter()
                .map(|channels| StageSpec {
                    channels,
                    stride: 2,
                })
                .collect(),
            classes: 6,
        }
    }
}

impl BackboneSpec {
    pub fn geometry(&self, stage: usize) -> Conv2dGeometry {
        Conv2dGeometry {
            kernel: self.kernel,
            stride: self.stages[stage].stride,
            padding: self.kernel / 2,
        }
    }

    /// Spatial `(W, H)` after each stage.
    pub fn extents(&self) -> Result<Vec<(usize, usize)>> {
        let (mut w, mut h) = (self.width, self.height);
        let mut out = Vec::with_capacity(self.stages.len());
        for s in 0..self.stages.len() {
            let geo = self.geometry(s);
            let (nw, nh) = match (geo.output_extent(w), geo.output_extent(h)) {
                (Some(nw), Some(nh)) if nw > 0 && nh > 0 && nw < w && nh < h => (nw, nh),
                _ => {
                    return Err(Error::Config(format!(
                        "stage {s} does not shrink a {w}x{h} input to a smaller non-empty map"
                    )))
                }
            };
            out.push((nw, nh));
            (w, h) = (nw, nh);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.in_channels == 0 || self.classes == 0 || self.kernel == 0 {
            return Err(Error::Config("backbone sizes must be positive".into()));
        }
        if self.stages.len() < 3 {
            return Err(Error::Config("backbone needs at least three stages".into()));
        }
        if self.stages.iter().any(|s| s.channels == 0) {
            return Err(Error::Config(
                "stage channel counts must be positive".into(),
            ));
        }
        self.extents().map(|_| ())
    }

    /// Index of the stage whose output the relation block consumes:
    /// `conv5` is the last stage, `conv4` the one before, `conv3` before that.
    pub fn insertion_stage(&self, at: Insertion) -> usize {
        let last = self.stages.len() - 1;
        match at {
            Insertion::Conv3 => last - 2,
            Insertion::Conv4 => last - 1,
            Insertion::Conv5 => last,
        }
    }

    pub fn input_shape(&self) -> [usize; 4] {
        [self.frames, self.width, self.height, self.in_channels]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneSpec,
    /// `None` gives the plain CNN.
    pub troi: Option<TroiConfig>,
}

#[derive(Debug, Clone)]
struct ConvStage {
    weight: ParamId,
    bias: ParamId,
    geo: Conv2dGeometry,
}

#[derive(Debug, Clone)]
pub struct TroiNet<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    stages: Vec<ConvStage>,
    head_w: ParamId,
    head_b: ParamId,
    troi: Option<(usize, TroiModule)>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[1, K]`.
    pub logits: Var,
    pub attention: Vec<Var>,
    pub bypassed: bool,
}

impl<T: Real> TroiNet<T> {
    /// Backbone parameters are drawn before the relation block's, so the
    /// same seed gives the same CNN weights with and without it.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let spec = &config.backbone;
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut stages = Vec::with_capacity(spec.stages.len());
        let mut cin = spec.in_channels;
        for (s, st) in spec.stages.iter().enumerate() {
            let fan_in = spec.kernel * spec.kernel * cin;
            let bound = (6.0 / fan_in as f64).sqrt();
            let weight = store.add_uniform(
                format!("stage{s}.weight"),
                vec![spec.kernel, spec.kernel, cin, st.channels],
                bound,
                &mut rng,
            );
            let bias = store.add(format!("stage{s}.bias"), Tensor::zeros(vec![st.channels]));
            stages.push(ConvStage {
                weight,
                bias,
                geo: spec.geometry(s),
            });
            cin = st.channels;
        }
        let head_w = store.add_uniform(
            "head.weight",
            vec![cin, spec.classes],
            1.0 / (cin as f64).sqrt(),
            &mut rng,
        );
        let head_b = store.add("head.bias", Tensor::zeros(vec![spec.classes]));
        let troi = match config.troi {
            Some(tc) => {
                let at = spec.insertion_stage(tc.insertion);
                let module =
                    TroiModule::new(&mut store, "troi", tc, spec.stages[at].channels, &mut rng)?;
                Some((at, module))
            }
            None => None,
        };
        Ok(Self {
            config,
            store,
            stages,
            head_w,
            head_b,
            troi,
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.config.backbone
    }

    pub fn troi(&self) -> Option<&TroiModule> {
        self.troi.as_ref().map(|(_, m)| m)
    }

    pub fn head_weight(&self) -> ParamId {
        self.head_w
    }

    pub fn head_bias(&self) -> ParamId {
        self.head_b
    }

    pub fn stage_weight(&self, stage: usize) -> ParamId {
        self.stages[stage].weight
    }

    fn check_video(&self, shape: &[usize]) -> Result<()> {
        let want = self.spec().input_shape();
        if shape != want {
            return Err(Error::shape("video", shape, &want));
        }
        Ok(())
    }

    /// `video: [T, W, H, 3]`; frames are convolved independently.
    pub fn forward(
        &self,
        g: &Graph<T>,
        p: &Bound,
        video: Var,
        rois: &[RoiBox],
    ) -> Result<ForwardOutput> {
        self.check_video(&g.shape(video))?;
        let mut x = video;
        let mut attention = Vec::new();
        let mut bypassed = true;
        for (s, stage) in self.stages.iter().enumerate() {
            x = g.conv2d(x, p.var(stage.weight), p.var(stage.bias), stage.geo)?;
            x = g.relu(x);
            if let Some((at, module)) = &self.troi {
                if *at == s {
                    let out = module.forward(g, p, x, rois)?;
                    x = out.map;
                    attention = out.attention;
                    bypassed = out.bypassed;
                }
            }
        }
        let shape = g.shape(x);
        let pooled = g.reshape(x, vec![1, shape[0] * shape[1], shape[2], shape[3]])?;
        let pooled = g.mean_pool(pooled)?;
        let logits = g.linear(pooled, p.var(self.head_w), Some(p.var(self.head_b)))?;
        Ok(ForwardOutput {
            logits,
            attention,
            bypassed,
        })
    }

    /// Class scores without recording gradients.
    pub fn logits(&self, video: &Tensor<T>, rois: &[RoiBox]) -> Result<Vec<f64>> {
        let g = Graph::new();
        let p = self.store.bind_frozen(&g);
        let out = self.forward(&g, &p, g.constant(video.clone()), rois)?;
        Ok(g.value(out.logits).to_f64_vec())
    }

    /// Cross-entropy of one sample and its gradient for every parameter.
    pub fn loss_and_grads(
        &self,
        video: &Tensor<T>,
        rois: &[RoiBox],
        label: usize,
    ) -> Result<(f64, Vec<Tensor<T>>)> {
        let g = Graph::new();
        let p = self.store.bind(&g);
        let out = self.forward(&g, &p, g.constant(video.clone()), rois)?;
        let loss = g.cross_entropy(out.logits, label)?;
        let value = g.value(loss).item().to_f64_lossy();
        let mut grads = g.backward(loss)?;
        Ok((value, self.store.collect_grads(&mut grads, &p)))
    }
}

/// `-log softmax(logits)[label]` for a flat score vector.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    Ok(crate::tensor::kernels::cross_entropy(logits, label)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::roi::Entity;
    use rand::Rng;

    fn small_spec() -> BackboneSpec {
        BackboneSpec {
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
        }
    }

    fn video(spec: &BackboneSpec, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(spec.input_shape().to_vec(), |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn default_extents() {
        let spec = BackboneSpec::default();
        assert_eq!(
            spec.extents().unwrap(),
            vec![(16, 16), (8, 8), (4, 4), (2, 2)]
        );
        assert_eq!(spec.insertion_stage(Insertion::Conv4), 2);
        assert_eq!(spec.insertion_stage(Insertion::Conv3), 1);
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let spec = small_spec();
        let mut net = TroiNet::<f64>::new(
            ModelConfig {
                backbone: spec.clone(),
                troi: None,
            },
            1,
        )
        .unwrap();
        let w = net.head_weight();
        net.store.get_mut(w).value = Tensor::zeros(vec![8, 6]);
        let logits = net.logits(&video(&spec, 2), &[]).unwrap();
        assert_eq!(logits, vec![0.0; 6]);
    }

    #[test]
    fn bypass_matches_plain_cnn() {
        let spec = small_spec();
        let plain = TroiNet::<f64>::new(
            ModelConfig {
                backbone: spec.clone(),
                troi: None,
            },
            5,
        )
        .unwrap();
        let with = TroiNet::<f64>::new(
            ModelConfig {
                backbone: spec.clone(),
                troi: Some(TroiConfig::default()),
            },
            5,
        )
        .unwrap();
        let v = video(&spec, 6);
        assert_eq!(
            plain.logits(&v, &[]).unwrap(),
            with.logits(&v, &[]).unwrap()
        );
        let roi = RoiBox::new(0, 0.1, 0.1, 0.6, 0.6, Entity::Hand);
        assert_ne!(
            plain.logits(&v, &[roi]).unwrap(),
            with.logits(&v, &[roi]).unwrap()
        );
    }

    #[test]
    fn wrong_video_shape_rejected() {
        let spec = small_spec();
        let net = TroiNet::<f64>::new(
            ModelConfig {
                backbone: spec,
                troi: None,
            },
            1,
        )
        .unwrap();
        assert!(net.logits(&Tensor::zeros(vec![2, 8, 8, 3]), &[]).is_err());
    }

    #[test]
    fn troi_heads_must_divide_channels() {
        let config = ModelConfig {
            backbone: small_spec(),
            troi: Some(TroiConfig {
                heads: 3,
                ..TroiConfig::default()
            }),
        };
        assert!(matches!(
            TroiNet::<f64>::new(config, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn loss_grads_cover_every_parameter() {
        let spec = small_spec();
        let net = TroiNet::<f64>::new(
            ModelConfig {
                backbone: spec.clone(),
                troi: Some(TroiConfig::default()),
            },
            3,
        )
        .unwrap();
        let roi = RoiBox::new(1, 0.2, 0.2, 0.7, 0.9, Entity::Object);
        let (loss, grads) = net.loss_and_grads(&video(&spec, 4), &[roi], 2).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        assert_eq!(grads.len(), net.store.len());
        assert!(grads.iter().all(|g| g.is_finite()));
    }
}
