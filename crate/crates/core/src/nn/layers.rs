use rayon::prelude::*;

use crate::error::{Error, Result};

use super::scalar::matmul;
use super::{Scalar, Tensor};

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
    Tensor::from_vec(x.shape(), data).unwrap()
}

/// Passes the gradient where `x > 0`, zero elsewhere (including `x == 0`).
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != grad_out.shape() {
        return Err(Error::ShapeMismatch("relu grad_out does not match input".into()));
    }
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

/// Argmax bookkeeping from a 2×2 max-pool, one flat input index per output element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIndices {
    input_shape: [usize; 4],
    argmax: Vec<usize>,
}

impl PoolIndices {
    pub fn input_shape(&self) -> [usize; 4] {
        self.input_shape
    }

    /// Flat indices into the pooled input.
    pub fn flat(&self) -> &[usize] {
        &self.argmax
    }

    /// Position of the winner inside its window, `0..4` in row-major order.
    pub fn window_index(&self, out: usize) -> usize {
        let w = self.input_shape[3];
        let i = self.argmax[out];
        (i / w % 2) * 2 + i % w % 2
    }
}

/// 2×2 max-pool, stride 2. Ties go to the first element in row-major window order.
pub fn maxpool_forward<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, PoolIndices)> {
    let [n, c, h, w] = x.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::OddSpatialDims { h, w });
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut argmax = vec![0usize; n * c * oh * ow];
    let src = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let top = base + 2 * i * w + 2 * j;
                let mut best = top;
                for cand in [top + 1, top + w, top + w + 1] {
                    if src[cand] > src[best] {
                        best = cand;
                    }
                }
                let o = (plane * oh + i) * ow + j;
                out.data_mut()[o] = src[best];
                argmax[o] = best;
            }
        }
    }
    Ok((
        out,
        PoolIndices {
            input_shape: x.shape(),
            argmax,
        },
    ))
}

/// Routes each output gradient to its stored argmax.
pub fn maxpool_backward<T: Scalar>(indices: &PoolIndices, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if grad_out.len() != indices.argmax.len() {
        return Err(Error::ShapeMismatch("pool grad_out does not match indices".into()));
    }
    let mut gx = Tensor::zeros(indices.input_shape);
    for (&i, &g) in indices.argmax.iter().zip(grad_out.data()) {
        gx.data_mut()[i] = gx.data()[i] + g;
    }
    Ok(gx)
}

fn check_upconv<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<usize> {
    let [cin, cout, kh, kw] = w.shape();
    if (kh, kw) != (2, 2) {
        return Err(Error::ShapeMismatch(format!("transposed kernel must be 2x2, got {kh}x{kw}")));
    }
    if x.shape()[1] != cin {
        return Err(Error::ShapeMismatch(format!(
            "input has {} channels, transposed kernel expects {cin}",
            x.shape()[1]
        )));
    }
    Ok(cout)
}

/// 2×2 stride-2 transposed convolution:
/// `out[n,k,2i+dy,2j+dx] = b[k] + Σ_c x[n,c,i,j]·w[c,k,dy,dx]`.
pub fn upconv_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let cout = check_upconv(x, w)?;
    if b.shape() != [cout, 1, 1, 1] {
        return Err(Error::ShapeMismatch(format!("bias shape {:?} for {cout} channels", b.shape())));
    }
    let [n, cin, h, wd] = x.shape();
    let hw = h * wd;
    let (oh, ow) = (2 * h, 2 * wd);
    let mut out = Tensor::zeros([n, cout, oh, ow]);
    if n == 0 || hw == 0 {
        return Ok(out);
    }
    out.data_mut()
        .par_chunks_mut(cout * oh * ow)
        .enumerate()
        .for_each_init(Vec::new, |y, (ni, dst)| {
            // y[(k, dy, dx), (i, j)]
            y.resize(cout * 4 * hw, T::zero());
            matmul(cout * 4, cin, hw, w.data(), true, x.item(ni), false, T::zero(), y);
            for k in 0..cout {
                let bias = b.data()[k];
                for d in 0..4 {
                    let (dy, dx) = (d / 2, d % 2);
                    let row = &y[(k * 4 + d) * hw..][..hw];
                    for i in 0..h {
                        for j in 0..wd {
                            dst[(k * oh + 2 * i + dy) * ow + 2 * j + dx] = row[i * wd + j] + bias;
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Gradients of [`upconv_forward`] as `(grad_x, grad_w, grad_b)`.
pub fn upconv_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let cout = check_upconv(x, w)?;
    let [n, cin, h, wd] = x.shape();
    let (oh, ow) = (2 * h, 2 * wd);
    if grad_out.shape() != [n, cout, oh, ow] {
        return Err(Error::ShapeMismatch(format!(
            "grad_out {:?} does not match upconv output {:?}",
            grad_out.shape(),
            [n, cout, oh, ow]
        )));
    }
    let hw = h * wd;
    let mut gx = Tensor::zeros(x.shape());
    let per_item: Vec<(Vec<T>, Vec<T>)> = gx
        .data_mut()
        .par_chunks_mut((cin * hw).max(1))
        .enumerate()
        .map(|(ni, gx_item)| {
            let gout = grad_out.item(ni);
            let mut g = vec![T::zero(); cout * 4 * hw];
            let mut gb = vec![T::zero(); cout];
            for k in 0..cout {
                for d in 0..4 {
                    let (dy, dx) = (d / 2, d % 2);
                    for i in 0..h {
                        for j in 0..wd {
                            g[(k * 4 + d) * hw + i * wd + j] = gout[(k * oh + 2 * i + dy) * ow + 2 * j + dx];
                        }
                    }
                }
                gb[k] = gout[k * oh * ow..(k + 1) * oh * ow].iter().copied().sum();
            }
            let mut gw = vec![T::zero(); cin * cout * 4];
            matmul(cin, cout * 4, hw, w.data(), false, &g, false, T::zero(), gx_item);
            matmul(cin, hw, cout * 4, x.item(ni), false, &g, true, T::zero(), &mut gw);
            (gw, gb)
        })
        .collect();
    let mut gw = Tensor::zeros(w.shape());
    let mut gb = Tensor::zeros([cout, 1, 1, 1]);
    for (iw, ib) in &per_item {
        for (a, &v) in gw.data_mut().iter_mut().zip(iw) {
            *a = *a + v;
        }
        for (a, &v) in gb.data_mut().iter_mut().zip(ib) {
            *a = *a + v;
        }
    }
    Ok((gx, gw, gb))
}

/// Stacks channels `[a; b]`; batch and spatial dims must agree.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, ca, h, w] = a.shape();
    let [nb, cb, hb, wb] = b.shape();
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::SpatialMismatch(format!(
            "cannot concatenate {:?} with {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    for i in 0..n {
        data.extend_from_slice(a.item(i));
        data.extend_from_slice(b.item(i));
    }
    Tensor::from_vec([n, ca + cb, h, w], data)
}

/// Inverse of [`concat_channels`]: the first `channels` channels and the rest.
pub fn split_channels<T: Scalar>(x: &Tensor<T>, channels: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let [n, c, h, w] = x.shape();
    if channels > c {
        return Err(Error::ShapeMismatch(format!("cannot split {channels} of {c} channels")));
    }
    let plane = h * w;
    let mut a = Vec::with_capacity(n * channels * plane);
    let mut b = Vec::with_capacity(n * (c - channels) * plane);
    for i in 0..n {
        let item = x.item(i);
        a.extend_from_slice(&item[..channels * plane]);
        b.extend_from_slice(&item[channels * plane..]);
    }
    Ok((
        Tensor::from_vec([n, channels, h, w], a)?,
        Tensor::from_vec([n, c - channels, h, w], b)?,
    ))
}

/// Logistic function, evaluated without overflow for either sign.
#[inline]
pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Mean binary cross-entropy of `sigmoid(logits)` against `labels` and its gradient.
///
/// Per pixel `max(z,0) − z·y + ln(1 + e^{−|z|})`; the gradient is
/// `(sigmoid(z) − y) / pixel_count`.
pub fn sigmoid_bce_loss<T: Scalar>(logits: &Tensor<T>, labels: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    if logits.shape() != labels.shape() {
        return Err(Error::ShapeMismatch(format!(
            "logits {:?} vs labels {:?}",
            logits.shape(),
            labels.shape()
        )));
    }
    let count = logits.len();
    if count == 0 {
        return Ok((0.0, Tensor::zeros(logits.shape())));
    }
    let inv = T::of_f64(1.0 / count as f64);
    let mut total = 0.0f64;
    let mut grad = Vec::with_capacity(count);
    for (&z, &y) in logits.data().iter().zip(labels.data()) {
        let (zf, yf) = (z.as_f64(), y.as_f64());
        total += zf.max(0.0) - zf * yf + (-zf.abs()).exp().ln_1p();
        grad.push((sigmoid(z) - y) * inv);
    }
    Ok((total / count as f64, Tensor::from_vec(logits.shape(), grad)?))
}
