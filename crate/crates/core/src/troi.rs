//! The in-place relation block: pool ROI features out of a feature map,
//! relate them with an encoder, and write them back where they came from.

use std::str::FromStr;

use rand::Rng;

use crate::encoder::{head_dim, Encoder};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::posenc::{coord_encoding_var, order_rois, sinusoidal_table, Direction};
use crate::roi::{extract_features, sanitize_rois, write_back_var, Entity, RoiBox, DEFAULT_BINS};
use crate::tensor::{Graph, Real, Var};

/// Backbone stage after which the block runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Insertion {
    Conv3,
    #[default]
    Conv4,
    Conv5,
}

impl Insertion {
    pub const ALL: [Insertion; 3] = [Insertion::Conv3, Insertion::Conv4, Insertion::Conv5];
}

impl FromStr for Insertion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv3" => Ok(Insertion::Conv3),
            "conv4" => Ok(Insertion::Conv4),
            "conv5" => Ok(Insertion::Conv5),
            other => Err(Error::Config(format!(
                "unknown insertion point `{other}` (expected conv3, conv4 or conv5)"
            ))),
        }
    }
}

impl std::fmt::Display for Insertion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Insertion::Conv3 => "conv3",
            Insertion::Conv4 => "conv4",
            Insertion::Conv5 => "conv5",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TroiConfig {
    pub insertion: Insertion,
    pub layers: usize,
    pub heads: usize,
    pub scene_token: bool,
    pub coord_encoding: bool,
    pub direction: Direction,
}

impl Default for TroiConfig {
    fn default() -> Self {
        Self {
            insertion: Insertion::Conv4,
            layers: 1,
            heads: 2,
            scene_token: false,
            coord_encoding: false,
            direction: Direction::LeftToRight,
        }
    }
}

impl TroiConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config(
                "relation block needs at least one encoder layer".into(),
            ));
        }
        head_dim(channels, self.heads)?;
        if !channels.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "positional encoding needs even channels, got {channels}"
            )));
        }
        if self.coord_encoding && !channels.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "coordinate encoding needs channels divisible by 4, got {channels}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TroiModule {
    pub config: TroiConfig,
    pub channels: usize,
    pub encoder: Encoder,
    pub coord_weights: Option<ParamId>,
}

#[derive(Debug, Clone)]
pub struct TroiOutput {
    /// Same shape as the input map.
    pub map: Var,
    /// One matrix per head per layer; empty on bypass.
    pub attention: Vec<Var>,
    /// Boxes discarded as degenerate or out of range.
    pub dropped: usize,
    pub bypassed: bool,
}

/// The unit box used as the coordinates of a whole-frame token.
fn frame_box(frame: usize) -> RoiBox {
    RoiBox::new(frame, 0.0, 0.0, 1.0, 1.0, Entity::Scene)
}

impl TroiModule {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        config: TroiConfig,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate(channels)?;
        let encoder = Encoder::new(
            store,
            &format!("{prefix}.encoder"),
            channels,
            config.heads,
            config.layers,
            rng,
        )?;
        let coord_weights = config
            .coord_encoding
            .then(|| store.add_uniform(format!("{prefix}.coord"), vec![4, channels / 4], 1.0, rng));
        Ok(Self {
            config,
            channels,
            encoder,
            coord_weights,
        })
    }

    /// `map: [T, W, H, C]`. With no usable boxes the input var is returned
    /// as is.
    pub fn forward<T: Real>(
        &self,
        g: &Graph<T>,
        p: &Bound,
        map: Var,
        rois: &[RoiBox],
    ) -> Result<TroiOutput> {
        let shape = g.shape(map);
        if shape.len() != 4 || shape[3] != self.channels {
            return Err(Error::shape(
                "troi_forward",
                &shape,
                &[0, 0, 0, self.channels],
            ));
        }
        let frames = shape[0];
        let (rois, dropped) = sanitize_rois(rois, frames);
        if rois.is_empty() {
            return Ok(TroiOutput {
                map,
                attention: Vec::new(),
                dropped,
                bypassed: true,
            });
        }
        let n = rois.len();
        let set = extract_features(g, map, &rois, DEFAULT_BINS)?;
        let mut features = set.features;
        let mut boxes = rois.clone();
        let mut positions = order_rois(&rois, self.config.direction).0;
        if self.config.scene_token {
            features = add_scene_token(g, features, map)?;
            positions.extend(n..n + frames);
            boxes.extend((0..frames).map(frame_box));
        }
        let pe = g.constant(sinusoidal_table(&positions, self.channels)?);
        features = g.add(features, pe)?;
        if let Some(w) = self.coord_weights {
            let ce = coord_encoding_var(g, &boxes, p.var(w), self.channels)?;
            features = g.add(features, ce)?;
        }
        let encoded = self.encoder.forward(g, p, features)?;
        let rows = if self.config.scene_token {
            g.slice_rows(encoded.features, 0, n)?
        } else {
            encoded.features
        };
        Ok(TroiOutput {
            map: write_back_var(g, map, rows, &set.footprints)?,
            attention: encoded.attention,
            dropped,
            bypassed: false,
        })
    }
}

/// Appends one row per frame holding the channel-wise maximum over that
/// frame's `W × H` cells.
pub fn add_scene_token<T: Real>(g: &Graph<T>, features: Var, map: Var) -> Result<Var> {
    let shape = g.shape(map);
    if shape.len() != 4 {
        return Err(Error::shape("add_scene_token", &shape, &[0, 0, 0, 0]));
    }
    let tokens = g.max_pool(map)?;
    g.concat_rows(&[features, tokens])
}
