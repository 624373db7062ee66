//! Forward kernels and their vector-Jacobian products, free of any graph
//! bookkeeping. The graph layer calls these; tests call them directly.

use super::{Real, Tensor};
use crate::error::{Error, Result};

fn dims2<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    t.expect_rank(op, 2)?;
    Ok((t.dim(0), t.dim(1)))
}

/// `a · b` for `a: [m×k]`, `b: [k×n]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = dims2("matmul", a)?;
    let (k2, n) = dims2("matmul", b)?;
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![T::zero(); m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                *o = *o + av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a · bᵀ` for `a: [m×n]`, `b: [k×n]`.
pub fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = dims2("matmul_nt", a)?;
    let (k, n2) = dims2("matmul_nt", b)?;
    if n != n2 {
        return Err(Error::shape("matmul_nt", a.shape(), b.shape()));
    }
    let mut out = Vec::with_capacity(m * k);
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..k {
            out.push(dot(arow, b.row(j)));
        }
    }
    Tensor::new(vec![m, k], out)
}

/// `aᵀ · b` for `a: [m×k]`, `b: [m×n]`.
pub fn matmul_tn<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = dims2("matmul_tn", a)?;
    let (m2, n) = dims2("matmul_tn", b)?;
    if m != m2 {
        return Err(Error::shape("matmul_tn", a.shape(), b.shape()));
    }
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let brow = b.row(i);
        for (p, &av) in a.row(i).iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in out[p * n..(p + 1) * n].iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    Tensor::new(vec![k, n], out)
}

pub fn transpose<T: Real>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = dims2("transpose", a)?;
    let d = a.data();
    Ok(Tensor::from_fn(vec![n, m], |idx| {
        let (j, i) = (idx / m, idx % m);
        d[i * n + j]
    }))
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape("add", a.shape(), b.shape()));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x + y)
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Adds `bias: [C]` to every row of `x: [n×C]`.
pub fn add_bias<T: Real>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c) = dims2("add_bias", x)?;
    if bias.shape() != [c] {
        return Err(Error::shape("add_bias", x.shape(), bias.shape()));
    }
    let b = bias.data();
    let data = x
        .data()
        .chunks(c)
        .flat_map(|row| row.iter().zip(b).map(|(&v, &bv)| v + bv))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Column sums of an `[n×C]` tensor, i.e. the bias gradient.
pub fn sum_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c) = dims2("sum_rows", x)?;
    let mut out = vec![T::zero(); c];
    for row in x.data().chunks(c) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o = *o + v;
        }
    }
    Tensor::new(vec![c], out)
}

/// Rectifier; the derivative at exactly zero is taken as zero.
pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Real>(x: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c) = dims2("softmax_rows", x)?;
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(c) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut total = T::zero();
        for &v in row {
            let e = (v - max).exp();
            total = total + e;
            out.push(e);
        }
        for o in &mut out[start..] {
            *o = *o / total;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// VJP of [`softmax_rows`] given its output `y`.
pub fn softmax_rows_backward<T: Real>(y: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let c = y.dim(1);
    let mut out = Vec::with_capacity(y.numel());
    for (yr, gr) in y.data().chunks(c).zip(grad.data().chunks(c)) {
        let inner = dot(yr, gr);
        out.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - inner)));
    }
    Tensor::new(y.shape().to_vec(), out).expect("same shape")
}

/// Saved statistics from a layer-norm forward pass.
pub struct LayerNormCache<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Per-row normalisation to zero mean and unit (biased) variance, then
/// `gamma * x̂ + beta`.
pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let (n, c) = dims2("layer_norm", x)?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape("layer_norm", x.shape(), gamma.shape()));
    }
    if c == 0 || eps <= 0.0 {
        return Err(Error::Config("layer_norm needs C >= 1 and eps > 0".into()));
    }
    let cf = T::of(c as f64);
    let eps = T::of(eps);
    let mut xhat = Vec::with_capacity(n * c);
    let mut out = Vec::with_capacity(n * c);
    let mut inv_std = Vec::with_capacity(n);
    for row in x.data().chunks(c) {
        let mean = row.iter().copied().sum::<T>() / cf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
        let inv = T::one() / (var + eps).sqrt();
        inv_std.push(inv);
        for ((&v, &g), &b) in row.iter().zip(gamma.data()).zip(beta.data()) {
            let h = (v - mean) * inv;
            xhat.push(h);
            out.push(g * h + b);
        }
    }
    Ok((
        Tensor::new(vec![n, c], out)?,
        LayerNormCache {
            normalized: Tensor::new(vec![n, c], xhat)?,
            inv_std,
        },
    ))
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn layer_norm_backward<T: Real>(
    cache: &LayerNormCache<T>,
    gamma: &Tensor<T>,
    grad: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let xhat = &cache.normalized;
    let c = xhat.dim(1);
    let cf = T::of(c as f64);
    let mut gx = Vec::with_capacity(xhat.numel());
    let mut gg = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    for ((hr, gr), &inv) in xhat
        .data()
        .chunks(c)
        .zip(grad.data().chunks(c))
        .zip(&cache.inv_std)
    {
        let mut mean_g = T::zero();
        let mut mean_gh = T::zero();
        for j in 0..c {
            let gh = gr[j] * gamma.data()[j];
            mean_g = mean_g + gh;
            mean_gh = mean_gh + gh * hr[j];
            gg[j] = gg[j] + gr[j] * hr[j];
            gb[j] = gb[j] + gr[j];
        }
        mean_g = mean_g / cf;
        mean_gh = mean_gh / cf;
        for j in 0..c {
            let gh = gr[j] * gamma.data()[j];
            gx.push(inv * (gh - mean_g - hr[j] * mean_gh));
        }
    }
    (
        Tensor::new(xhat.shape().to_vec(), gx).expect("shape"),
        Tensor::new(vec![c], gg).expect("shape"),
        Tensor::new(vec![c], gb).expect("shape"),
    )
}

fn dims4<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<[usize; 4]> {
    t.expect_rank(op, 4)?;
    Ok([t.dim(0), t.dim(1), t.dim(2), t.dim(3)])
}

/// Spatial mean of `[N, W, H, C]` down to `[N, C]`.
pub fn mean_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, w, h, c] = dims4("mean_pool", x)?;
    let cells = w * h;
    if cells == 0 {
        return Err(Error::shape("mean_pool", x.shape(), &[n, 1, 1, c]));
    }
    let scale = T::one() / T::of(cells as f64);
    let mut out = vec![T::zero(); n * c];
    for (b, block) in x.data().chunks(cells * c).enumerate() {
        let orow = &mut out[b * c..(b + 1) * c];
        for cell in block.chunks(c) {
            for (o, &v) in orow.iter_mut().zip(cell) {
                *o = *o + v;
            }
        }
        for o in orow.iter_mut() {
            *o = *o * scale;
        }
    }
    Tensor::new(vec![n, c], out)
}

pub fn mean_pool_backward<T: Real>(input_shape: &[usize], grad: &Tensor<T>) -> Tensor<T> {
    let (n, w, h, c) = (
        input_shape[0],
        input_shape[1],
        input_shape[2],
        input_shape[3],
    );
    let scale = T::one() / T::of((w * h) as f64);
    let g = grad.data();
    Tensor::from_fn(input_shape.to_vec(), |idx| {
        let b = idx / (w * h * c);
        g[b * c + idx % c] * scale
    })
    .reshape(vec![n, w, h, c])
    .expect("shape")
}

/// Spatial max of `[N, W, H, C]` down to `[N, C]`, with the flat input index
/// of each winner (first occurrence on ties).
pub fn max_pool<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, w, h, c] = dims4("max_pool", x)?;
    let cells = w * h;
    if cells == 0 {
        return Err(Error::shape("max_pool", x.shape(), &[n, 1, 1, c]));
    }
    let d = x.data();
    let mut out = Vec::with_capacity(n * c);
    let mut arg = Vec::with_capacity(n * c);
    for b in 0..n {
        for ch in 0..c {
            let base = b * cells * c + ch;
            let mut best = base;
            for cell in 1..cells {
                let idx = base + cell * c;
                if d[idx] > d[best] {
                    best = idx;
                }
            }
            out.push(d[best]);
            arg.push(best);
        }
    }
    Ok((Tensor::new(vec![n, c], out)?, arg))
}

/// Geometry of a 2-D convolution over `[N, W, H, Cin]` inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dGeometry {
    pub fn output_extent(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if self.stride == 0 || padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }
}

fn conv_dims<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    geo: Conv2dGeometry,
) -> Result<([usize; 4], usize, usize, usize)> {
    let [n, wi, hi, ci] = dims4("conv2d", x)?;
    let [k1, k2, wci, co] = dims4("conv2d", w)?;
    if k1 != geo.kernel || k2 != geo.kernel || wci != ci || b.shape() != [co] {
        return Err(Error::shape("conv2d", x.shape(), w.shape()));
    }
    let wo = geo
        .output_extent(wi)
        .ok_or_else(|| Error::shape("conv2d", x.shape(), w.shape()))?;
    let ho = geo
        .output_extent(hi)
        .ok_or_else(|| Error::shape("conv2d", x.shape(), w.shape()))?;
    Ok(([n, wi, hi, ci], co, wo, ho))
}

/// Zero-padded strided convolution. Layouts: input `[N, W, H, Cin]`, kernel
/// `[K, K, Cin, Cout]`, bias `[Cout]`, output `[N, Wo, Ho, Cout]`.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    geo: Conv2dGeometry,
) -> Result<Tensor<T>> {
    let ([n, wi, hi, ci], co, wo, ho) = conv_dims(x, w, b, geo)?;
    let k = geo.kernel;
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![T::zero(); n * wo * ho * co];
    for img in 0..n {
        for ox in 0..wo {
            for oy in 0..ho {
                let obase = ((img * wo + ox) * ho + oy) * co;
                let orow = &mut out[obase..obase + co];
                orow.copy_from_slice(b.data());
                for kx in 0..k {
                    let ix = (ox * geo.stride + kx) as isize - geo.padding as isize;
                    if ix < 0 || ix >= wi as isize {
                        continue;
                    }
                    for ky in 0..k {
                        let iy = (oy * geo.stride + ky) as isize - geo.padding as isize;
                        if iy < 0 || iy >= hi as isize {
                            continue;
                        }
                        let ibase = ((img * wi + ix as usize) * hi + iy as usize) * ci;
                        let wbase = (kx * k + ky) * ci * co;
                        for (c_in, &xv) in xd[ibase..ibase + ci].iter().enumerate() {
                            if xv == T::zero() {
                                continue;
                            }
                            let wrow = &wd[wbase + c_in * co..wbase + (c_in + 1) * co];
                            for (o, &wv) in orow.iter_mut().zip(wrow) {
                                *o = *o + xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, wo, ho, co], out)
}

/// Returns `(grad_x, grad_w, grad_b)` for [`conv2d`].
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    geo: Conv2dGeometry,
    grad: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [n, wi, hi, ci] = [x.dim(0), x.dim(1), x.dim(2), x.dim(3)];
    let [wo, ho, co] = [grad.dim(1), grad.dim(2), grad.dim(3)];
    let k = geo.kernel;
    let (xd, wd, gd) = (x.data(), w.data(), grad.data());
    let mut gx = vec![T::zero(); xd.len()];
    let mut gw = vec![T::zero(); wd.len()];
    let mut gb = vec![T::zero(); co];
    for img in 0..n {
        for ox in 0..wo {
            for oy in 0..ho {
                let obase = ((img * wo + ox) * ho + oy) * co;
                let grow = &gd[obase..obase + co];
                for (b, &g) in gb.iter_mut().zip(grow) {
                    *b = *b + g;
                }
                for kx in 0..k {
                    let ix = (ox * geo.stride + kx) as isize - geo.padding as isize;
                    if ix < 0 || ix >= wi as isize {
                        continue;
                    }
                    for ky in 0..k {
                        let iy = (oy * geo.stride + ky) as isize - geo.padding as isize;
                        if iy < 0 || iy >= hi as isize {
                            continue;
                        }
                        let ibase = ((img * wi + ix as usize) * hi + iy as usize) * ci;
                        let wbase = (kx * k + ky) * ci * co;
                        for c_in in 0..ci {
                            let wrange = wbase + c_in * co..wbase + (c_in + 1) * co;
                            gx[ibase + c_in] = gx[ibase + c_in] + dot(&wd[wrange.clone()], grow);
                            let xv = xd[ibase + c_in];
                            if xv != T::zero() {
                                for (gwv, &g) in gw[wrange].iter_mut().zip(grow) {
                                    *gwv = *gwv + xv * g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), gx).expect("shape"),
        Tensor::new(w.shape().to_vec(), gw).expect("shape"),
        Tensor::new(vec![co], gb).expect("shape"),
    )
}

/// `-log softmax(logits)[label]` over a flat logit vector, plus its gradient.
pub fn cross_entropy<T: Real>(logits: &[T], label: usize) -> Result<(T, Vec<T>)> {
    if label >= logits.len() {
        return Err(Error::Contract(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let total: T = logits.iter().map(|&z| (z - max).exp()).sum();
    let lse = max + total.ln();
    let grad = logits
        .iter()
        .enumerate()
        .map(|(i, &z)| {
            let p = (z - lse).exp();
            if i == label {
                p - T::one()
            } else {
                p
            }
        })
        .collect();
    Ok((lse - logits[label], grad))
}
