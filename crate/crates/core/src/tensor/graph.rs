//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles. Each
//! recorded node stores its forward value and, when any input is tracked, a
//! closure mapping the output gradient to input gradients. [`Graph::backward`]
//! walks the tape once in reverse. A graph is single-use: a second backward
//! pass on the same graph is rejected instead of silently accumulating.
//!
//! Graphs are deliberately `!Send`; parallel workers each build their own and
//! exchange plain [`Tensor`]s.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::kernels::{self, Conv2dGeometry};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Maps the gradient of a node's output to gradients of its parents. The
/// boolean slice says which parents actually need one.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    parents: Vec<Var>,
    backward: Option<BackwardFn<T>>,
    tracked: bool,
}

pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + b;
            }
        }
        None => *slot = Some(g),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(&self, node: Node<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push_node(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            tracked: false,
        })
    }

    /// A gradient-tracked leaf (parameter or differentiated input).
    pub fn leaf(&self, value: Tensor<T>) -> Var {
        self.push_node(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            tracked: true,
        })
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].tracked
    }

    /// Records an operation. The backward closure is dropped when no parent is
    /// tracked, so constant sub-expressions cost nothing at backward time.
    pub fn custom(&self, value: Tensor<T>, parents: Vec<Var>, backward: BackwardFn<T>) -> Var {
        let tracked = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.0].tracked)
        };
        self.push_node(Node {
            value: Rc::new(value),
            parents,
            backward: tracked.then_some(backward),
            tracked,
        })
    }

    /// Propagates d(loss)/d(node) to every tracked node. `loss` must hold a
    /// single element.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed.replace(true) {
            return Err(Error::Contract(
                "backward already ran on this graph; build a fresh graph per step".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(root.value.shape().to_vec()));
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let mask: Vec<bool> = node.parents.iter().map(|p| nodes[p.0].tracked).collect();
            let parent_grads = backward(&grad, &mask);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((p, pg), &need) in node.parents.iter().zip(parent_grads).zip(&mask) {
                if let (Some(pg), true) = (pg, need) {
                    debug_assert_eq!(pg.shape(), nodes[p.0].value.shape());
                    accumulate(&mut grads[p.0], pg);
                }
            }
            // keep gradients of intermediate nodes available to callers
            grads[i] = Some(grad);
        }
        Ok(Gradients { grads })
    }

    // ---- elementary operations -------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = kernels::matmul(&av, &bv)?;
        Ok(self.custom(
            out,
            vec![a, b],
            Box::new(move |g, need| {
                vec![
                    need[0].then(|| kernels::matmul_nt(g, &bv).expect("shape")),
                    need[1].then(|| kernels::matmul_tn(&av, g).expect("shape")),
                ]
            }),
        ))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let out = kernels::transpose(&self.value(a))?;
        Ok(self.custom(
            out,
            vec![a],
            Box::new(|g, _| vec![Some(kernels::transpose(g).expect("rank 2"))]),
        ))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::add(&self.value(a), &self.value(b))?;
        Ok(self.custom(
            out,
            vec![a, b],
            Box::new(|g, need| vec![need[0].then(|| g.clone()), need[1].then(|| g.clone())]),
        ))
    }

    /// Adds a `[C]` bias to every row of an `[n×C]` value.
    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let out = kernels::add_bias(&self.value(x), &self.value(bias))?;
        Ok(self.custom(
            out,
            vec![x, bias],
            Box::new(|g, need| {
                vec![
                    need[0].then(|| g.clone()),
                    need[1].then(|| kernels::sum_rows(g).expect("rank 2")),
                ]
            }),
        ))
    }

    /// Element-wise product of equal-shaped values.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("mul", av.shape(), bv.shape()));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let prod = |t: &Tensor<T>, g: &Tensor<T>| {
            let d = t
                .data()
                .iter()
                .zip(g.data())
                .map(|(&x, &y)| x * y)
                .collect();
            Tensor::new(t.shape().to_vec(), d).expect("shape")
        };
        Ok(self.custom(
            out,
            vec![a, b],
            Box::new(move |g, need| {
                vec![need[0].then(|| prod(&bv, g)), need[1].then(|| prod(&av, g))]
            }),
        ))
    }

    pub fn scale(&self, a: Var, factor: f64) -> Var {
        let f = T::of(factor);
        let out = self.value(a).map(|v| v * f);
        self.custom(
            out,
            vec![a],
            Box::new(move |g, _| vec![Some(g.map(|v| v * f))]),
        )
    }

    /// Sum of all elements, as a rank-0 value.
    pub fn sum(&self, a: Var) -> Var {
        let av = self.value(a);
        let shape = av.shape().to_vec();
        let total = av.data().iter().copied().sum();
        self.custom(
            Tensor::scalar(total),
            vec![a],
            Box::new(move |g, _| vec![Some(Tensor::full(shape.clone(), g.item()))]),
        )
    }

    pub fn relu(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = kernels::relu(&av);
        self.custom(
            out,
            vec![a],
            Box::new(move |g, _| vec![Some(kernels::relu_backward(&av, g))]),
        )
    }

    pub fn softmax_rows(&self, a: Var) -> Result<Var> {
        let out = kernels::softmax_rows(&self.value(a))?;
        let y = out.clone();
        Ok(self.custom(
            out,
            vec![a],
            Box::new(move |g, _| vec![Some(kernels::softmax_rows_backward(&y, g))]),
        ))
    }

    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let gv = self.value(gamma);
        let (out, cache) = kernels::layer_norm(&self.value(x), &gv, &self.value(beta), eps)?;
        Ok(self.custom(
            out,
            vec![x, gamma, beta],
            Box::new(move |g, need| {
                let (gx, gg, gb) = kernels::layer_norm_backward(&cache, &gv, g);
                vec![
                    need[0].then_some(gx),
                    need[1].then_some(gg),
                    need[2].then_some(gb),
                ]
            }),
        ))
    }

    /// `x · W + b` for `x: [n×in]`, `W: [in×out]`, `b: [out]`.
    pub fn linear(&self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        match bias {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn reshape(&self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let av = self.value(a);
        let old = av.shape().to_vec();
        let out = (*av).clone().reshape(shape)?;
        Ok(self.custom(
            out,
            vec![a],
            Box::new(move |g, _| vec![Some(g.clone().reshape(old.clone()).expect("numel"))]),
        ))
    }

    /// Spatial average `[N, W, H, C] -> [N, C]`.
    pub fn mean_pool(&self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        let out = kernels::mean_pool(&self.value(a))?;
        Ok(self.custom(
            out,
            vec![a],
            Box::new(move |g, _| vec![Some(kernels::mean_pool_backward(&shape, g))]),
        ))
    }

    /// Spatial maximum `[N, W, H, C] -> [N, C]`.
    pub fn max_pool(&self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        let (out, arg) = kernels::max_pool(&self.value(a))?;
        Ok(self.custom(
            out,
            vec![a],
            Box::new(move |g, _| {
                let mut gx = Tensor::zeros(shape.clone());
                for (&src, &gv) in arg.iter().zip(g.data()) {
                    gx.data_mut()[src] = gx.data_mut()[src] + gv;
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn conv2d(&self, x: Var, weight: Var, bias: Var, geo: Conv2dGeometry) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(weight));
        let out = kernels::conv2d(&xv, &wv, &self.value(bias), geo)?;
        Ok(self.custom(
            out,
            vec![x, weight, bias],
            Box::new(move |g, need| {
                let (gx, gw, gb) = kernels::conv2d_backward(&xv, &wv, geo, g);
                vec![
                    need[0].then_some(gx),
                    need[1].then_some(gw),
                    need[2].then_some(gb),
                ]
            }),
        ))
    }

    /// Columns `start..start+len` of an `[n×c]` value.
    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        av.expect_rank("slice_cols", 2)?;
        let (n, c) = (av.dim(0), av.dim(1));
        if start + len > c {
            return Err(Error::shape("slice_cols", av.shape(), &[start, len]));
        }
        let data = av
            .data()
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let out = Tensor::new(vec![n, len], data)?;
        Ok(self.custom(
            out,
            vec![a],
            Box::new(move |g, _| {
                let mut gx = Tensor::zeros(vec![n, c]);
                for (r, grow) in g.data().chunks(len.max(1)).enumerate().take(n) {
                    gx.data_mut()[r * c + start..r * c + start + len].copy_from_slice(grow);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Joins `[n×c_i]` values along columns.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let first = values
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        first.expect_rank("concat_cols", 2)?;
        let n = first.dim(0);
        for v in &values {
            v.expect_rank("concat_cols", 2)?;
            if v.dim(0) != n {
                return Err(Error::shape("concat_cols", first.shape(), v.shape()));
            }
        }
        let widths: Vec<usize> = values.iter().map(|v| v.dim(1)).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for v in &values {
                data.extend_from_slice(v.row(r));
            }
        }
        let out = Tensor::new(vec![n, total], data)?;
        Ok(self.custom(
            out,
            parts.to_vec(),
            Box::new(move |g, need| {
                let mut offset = 0;
                widths
                    .iter()
                    .zip(need)
                    .map(|(&w, &needed)| {
                        let start = offset;
                        offset += w;
                        needed.then(|| {
                            let d = g
                                .data()
                                .chunks(total)
                                .flat_map(|row| row[start..start + w].iter().copied())
                                .collect();
                            Tensor::new(vec![n, w], d).expect("shape")
                        })
                    })
                    .collect()
            }),
        ))
    }

    /// Rows `start..start+len` of a value whose leading axis indexes rows.
    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if av.rank() == 0 || start + len > av.dim(0) {
            return Err(Error::shape("slice_rows", av.shape(), &[start, len]));
        }
        let inner: usize = av.shape()[1..].iter().product();
        let mut shape = av.shape().to_vec();
        shape[0] = len;
        let out = Tensor::new(
            shape,
            av.data()[start * inner..(start + len) * inner].to_vec(),
        )?;
        let full = av.shape().to_vec();
        Ok(self.custom(
            out,
            vec![a],
            Box::new(move |g, _| {
                let mut gx = Tensor::zeros(full.clone());
                gx.data_mut()[start * inner..(start + len) * inner].copy_from_slice(g.data());
                vec![Some(gx)]
            }),
        ))
    }

    /// Stacks values along the leading axis; trailing axes must agree.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let first = values
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        if first.rank() == 0 {
            return Err(Error::shape("concat_rows", first.shape(), &[]));
        }
        let tail = first.shape()[1..].to_vec();
        for v in &values {
            if v.rank() == 0 || v.shape()[1..] != tail[..] {
                return Err(Error::shape("concat_rows", first.shape(), v.shape()));
            }
        }
        let sizes: Vec<usize> = values.iter().map(|v| v.numel()).collect();
        let rows: usize = values.iter().map(|v| v.dim(0)).sum();
        let mut data = Vec::with_capacity(sizes.iter().sum());
        for v in &values {
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let part_shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        Ok(self.custom(
            Tensor::new(shape, data)?,
            parts.to_vec(),
            Box::new(move |g, need| {
                let mut offset = 0;
                part_shapes
                    .iter()
                    .zip(&sizes)
                    .zip(need)
                    .map(|((shape, &size), &needed)| {
                        let start = offset;
                        offset += size;
                        needed.then(|| {
                            Tensor::new(shape.clone(), g.data()[start..start + size].to_vec())
                                .expect("shape")
                        })
                    })
                    .collect()
            }),
        ))
    }

    /// Cross-entropy of a flat logit vector (any shape) against `label`.
    pub fn cross_entropy(&self, logits: Var, label: usize) -> Result<Var> {
        let lv = self.value(logits);
        let (loss, grad) = kernels::cross_entropy(lv.data(), label)?;
        let shape = lv.shape().to_vec();
        Ok(self.custom(
            Tensor::scalar(loss),
            vec![logits],
            Box::new(move |g, _| {
                let s = g.item();
                let d = grad.iter().map(|&v| v * s).collect();
                vec![Some(Tensor::new(shape.clone(), d).expect("shape"))]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_fn(vec![2, 3, 2], |i| i as f64));
        let loss = g.sum(x);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn quadratic_gradient() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64(vec![2], &[1.0, 2.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn second_backward_is_rejected() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::ones(vec![3]));
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(Error::Contract(_))));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::ones(vec![3]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let g = Graph::<f64>::new();
        let c = g.constant(Tensor::ones(vec![2, 2]));
        let x = g.leaf(Tensor::ones(vec![2, 2]));
        let y = g.matmul(c, x).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64(vec![3], &[-1.0, 0.0, 2.0]).unwrap());
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn shared_input_accumulates() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64(vec![1, 2], &[1.0, 3.0]).unwrap());
        let a = g.slice_cols(x, 0, 1).unwrap();
        let b = g.slice_cols(x, 1, 1).unwrap();
        let cat = g.concat_cols(&[b, a, b]).unwrap();
        assert_eq!(g.value(cat).data(), &[3.0, 1.0, 3.0]);
        let loss = g.sum(cat);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0]);
    }
}
