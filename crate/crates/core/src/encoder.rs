//! Transformer-style encoder over a set of ROI feature rows.
//!
//! One layer computes
//!
//! ```text
//! [q | k | v] = F · W_qkv                     (sliced per head, d = C / m)
//! A_h         = softmax(q_h · k_hᵀ / √d)
//! MHA(F)      = [A_1 v_1, …, A_m v_m] · W_m
//! G           = LN(MHA(F) + F)
//! F'          = LN(MLP(G) + G),   MLP = linear → ReLU → linear
//! ```
//!
//! `W_qkv` is stored as a single `C × 3C` matrix: columns `[0, C)` hold the
//! query projections of all heads, `[C, 2C)` keys and `[2C, 3C)` values; head
//! `h` uses the `d`-wide slice at offset `h·d` within each block.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Graph, Real, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// MLP hidden width as a multiple of the channel count.
pub const MLP_EXPANSION: usize = 2;

/// Query, key and value rows of one attention head.
#[derive(Debug, Clone, Copy)]
pub struct HeadProjection {
    pub q: Var,
    pub k: Var,
    pub v: Var,
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub channels: usize,
    pub heads: usize,
    pub w_qkv: ParamId,
    pub w_out: ParamId,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
}

/// Output rows plus the attention matrix of every head.
#[derive(Debug, Clone)]
pub struct LayerOutput {
    pub features: Var,
    pub attention: Vec<Var>,
}

pub fn head_dim(channels: usize, heads: usize) -> Result<usize> {
    if heads == 0 || channels == 0 || !channels.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "{channels} channels cannot be split evenly over {heads} heads"
        )));
    }
    Ok(channels / heads)
}

impl EncoderLayer {
    /// Registers a fresh layer: projections and MLP weights uniform in
    /// `±1/√fan_in`, biases zero, layer-norm scale one and shift zero.
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        head_dim(channels, heads)?;
        let hidden = MLP_EXPANSION * channels;
        let bound = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        Ok(Self {
            channels,
            heads,
            w_qkv: store.add_uniform(
                format!("{prefix}.w_qkv"),
                vec![channels, 3 * channels],
                bound(channels),
                rng,
            ),
            w_out: store.add_uniform(
                format!("{prefix}.w_out"),
                vec![channels, channels],
                bound(channels),
                rng,
            ),
            mlp_w1: store.add_uniform(
                format!("{prefix}.mlp.w1"),
                vec![channels, hidden],
                bound(channels),
                rng,
            ),
            mlp_b1: store.add(format!("{prefix}.mlp.b1"), Tensor::zeros(vec![hidden])),
            mlp_w2: store.add_uniform(
                format!("{prefix}.mlp.w2"),
                vec![hidden, channels],
                bound(hidden),
                rng,
            ),
            mlp_b2: store.add(format!("{prefix}.mlp.b2"), Tensor::zeros(vec![channels])),
            ln1_gamma: store.add(format!("{prefix}.ln1.gamma"), Tensor::ones(vec![channels])),
            ln1_beta: store.add(format!("{prefix}.ln1.beta"), Tensor::zeros(vec![channels])),
            ln2_gamma: store.add(format!("{prefix}.ln2.gamma"), Tensor::ones(vec![channels])),
            ln2_beta: store.add(format!("{prefix}.ln2.beta"), Tensor::zeros(vec![channels])),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    fn check_input<T: Real>(&self, g: &Graph<T>, f: Var) -> Result<()> {
        let shape = g.shape(f);
        if shape.len() != 2 || shape[1] != self.channels || shape[0] == 0 {
            return Err(Error::shape("encoder", &shape, &[0, self.channels]));
        }
        Ok(())
    }

    pub fn project_qkv<T: Real>(
        &self,
        g: &Graph<T>,
        p: &Bound,
        f: Var,
    ) -> Result<Vec<HeadProjection>> {
        self.check_input(g, f)?;
        let qkv = g.matmul(f, p.var(self.w_qkv))?;
        let (c, d) = (self.channels, self.head_dim());
        (0..self.heads)
            .map(|h| {
                Ok(HeadProjection {
                    q: g.slice_cols(qkv, h * d, d)?,
                    k: g.slice_cols(qkv, c + h * d, d)?,
                    v: g.slice_cols(qkv, 2 * c + h * d, d)?,
                })
            })
            .collect()
    }

    /// Concatenated head outputs projected by `W_m`, plus per-head attention.
    pub fn multi_head<T: Real>(&self, g: &Graph<T>, p: &Bound, f: Var) -> Result<(Var, Vec<Var>)> {
        let heads = self.project_qkv(g, p, f)?;
        let mut outputs = Vec::with_capacity(heads.len());
        let mut attention = Vec::with_capacity(heads.len());
        for head in heads {
            let (out, a) = self_attention(g, head)?;
            outputs.push(out);
            attention.push(a);
        }
        let cat = g.concat_cols(&outputs)?;
        Ok((g.matmul(cat, p.var(self.w_out))?, attention))
    }

    pub fn mlp<T: Real>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = g.linear(x, p.var(self.mlp_w1), Some(p.var(self.mlp_b1)))?;
        let h = g.relu(h);
        g.linear(h, p.var(self.mlp_w2), Some(p.var(self.mlp_b2)))
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, p: &Bound, f: Var) -> Result<LayerOutput> {
        let (mha, attention) = self.multi_head(g, p, f)?;
        let res = g.add(mha, f)?;
        let mid = g.layer_norm(
            res,
            p.var(self.ln1_gamma),
            p.var(self.ln1_beta),
            LAYER_NORM_EPS,
        )?;
        let m = self.mlp(g, p, mid)?;
        let res = g.add(m, mid)?;
        let out = g.layer_norm(
            res,
            p.var(self.ln2_gamma),
            p.var(self.ln2_beta),
            LAYER_NORM_EPS,
        )?;
        Ok(LayerOutput {
            features: out,
            attention,
        })
    }
}

/// `softmax(q · kᵀ / √d)` for `q, k: [N × d]`.
pub fn attention_weights<T: Real>(g: &Graph<T>, q: Var, k: Var) -> Result<Var> {
    let (qs, ks) = (g.shape(q), g.shape(k));
    if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] {
        return Err(Error::shape("attention_weights", &qs, &ks));
    }
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scaled = g.scale(scores, 1.0 / (qs[1] as f64).sqrt());
    g.softmax_rows(scaled)
}

/// `A · v` for one head; returns the output rows and `A`.
pub fn self_attention<T: Real>(g: &Graph<T>, head: HeadProjection) -> Result<(Var, Var)> {
    let a = attention_weights(g, head.q, head.k)?;
    Ok((g.matmul(a, head.v)?, a))
}

/// A stack of layers, each consuming the previous layer's output.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
}

impl Encoder {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        heads: usize,
        depth: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        let layers = (0..depth)
            .map(|l| EncoderLayer::new(store, &format!("{prefix}.layer{l}"), channels, heads, rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, p: &Bound, f: Var) -> Result<LayerOutput> {
        let mut features = f;
        let mut attention = Vec::new();
        for layer in &self.layers {
            let out = layer.forward(g, p, features)?;
            features = out.features;
            attention.extend(out.attention);
        }
        Ok(LayerOutput {
            features,
            attention,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::kernels;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(channels: usize, heads: usize, seed: u64) -> (ParamStore<f64>, EncoderLayer) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = EncoderLayer::new(&mut store, "enc", channels, heads, &mut rng).unwrap();
        (store, l)
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn indivisible_heads_rejected() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            EncoderLayer::new(&mut store, "e", 6, 4, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_projection_gives_zero_qkv() {
        let (mut store, l) = layer(4, 2, 1);
        store.get_mut(l.w_qkv).value = Tensor::zeros(vec![4, 12]);
        let g = Graph::new();
        let p = store.bind(&g);
        let f = g.constant(random(&[3, 4], 2));
        for h in l.project_qkv(&g, &p, f).unwrap() {
            for v in [h.q, h.k, h.v] {
                assert!(g.value(v).data().iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn identity_projection_single_head() {
        let (mut store, l) = layer(3, 1, 1);
        let eye = Tensor::from_fn(vec![3, 9], |i| if i / 9 == i % 9 { 1.0 } else { 0.0 });
        store.get_mut(l.w_qkv).value = eye;
        let g = Graph::new();
        let p = store.bind(&g);
        let fv = random(&[4, 3], 3);
        let f = g.constant(fv.clone());
        let heads = l.project_qkv(&g, &p, f).unwrap();
        assert_eq!(*g.value(heads[0].q), fv);
    }

    #[test]
    fn single_roi_attends_to_itself() {
        let (store, l) = layer(4, 2, 5);
        let g = Graph::new();
        let p = store.bind(&g);
        let f = g.constant(random(&[1, 4], 6));
        let heads = l.project_qkv(&g, &p, f).unwrap();
        for h in heads {
            let (out, a) = self_attention(&g, h).unwrap();
            assert_eq!(g.value(a).data(), &[1.0]);
            assert!(g.value(out).max_abs_diff(&g.value(h.v)) < 1e-15);
        }
    }

    #[test]
    fn identical_rows_attend_uniformly() {
        let (store, l) = layer(4, 2, 7);
        let g = Graph::new();
        let p = store.bind(&g);
        let row = random(&[1, 4], 8);
        let f = g.constant(Tensor::from_fn(vec![2, 4], |i| row.data()[i % 4]));
        let (out, attention) = l.multi_head(&g, &p, f).unwrap();
        for a in attention {
            assert!(g.value(a).data().iter().all(|&x| (x - 0.5).abs() < 1e-15));
        }
        let o = g.value(out);
        assert_eq!(o.row(0), o.row(1));
    }

    #[test]
    fn attention_matches_brute_force() {
        let q = random(&[3, 5], 10);
        let k = random(&[3, 5], 11);
        let g = Graph::new();
        let (qv, kv) = (g.constant(q.clone()), g.constant(k.clone()));
        let a = g.value(attention_weights(&g, qv, kv).unwrap());
        for i in 0..3 {
            let scores: Vec<f64> = (0..3)
                .map(|j| (0..5).map(|c| q.row(i)[c] * k.row(j)[c]).sum::<f64>() / 5f64.sqrt())
                .collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            for j in 0..3 {
                assert!((a.row(i)[j] - scores[j].exp() / z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_weights_reduce_to_double_layer_norm() {
        let (mut store, l) = layer(6, 2, 12);
        for id in [l.w_qkv, l.w_out, l.mlp_w1, l.mlp_w2] {
            let shape = store.value(id).shape().to_vec();
            store.get_mut(id).value = Tensor::zeros(shape);
        }
        let fv = random(&[4, 6], 13);
        let g = Graph::new();
        let p = store.bind(&g);
        let out = l.forward(&g, &p, g.constant(fv.clone())).unwrap();
        let (one, zero) = (Tensor::ones(vec![6]), Tensor::zeros(vec![6]));
        let (ln1, _) = kernels::layer_norm(&fv, &one, &zero, LAYER_NORM_EPS).unwrap();
        let (ln2, _) = kernels::layer_norm(&ln1, &one, &zero, LAYER_NORM_EPS).unwrap();
        assert!(g.value(out.features).max_abs_diff(&ln2) < 1e-12);
    }

    #[test]
    fn output_shape_for_any_n() {
        let (store, l) = layer(8, 2, 14);
        for n in 1..6 {
            let g = Graph::new();
            let p = store.bind(&g);
            let out = l
                .forward(&g, &p, g.constant(random(&[n, 8], n as u64)))
                .unwrap();
            assert_eq!(g.shape(out.features), vec![n, 8]);
        }
    }
}
