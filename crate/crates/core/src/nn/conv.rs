//! Stride-1 "same" convolution (`k×k` kernel, `k/2` zero padding).
//!
//! Two routes compute the same contract: a direct six-loop reference and a
//! window-unrolled (im2col) path that turns each batch item into one matrix
//! product. Batch items run in parallel; per-item weight gradients are summed
//! in index order so results do not depend on the thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};

use super::scalar::matmul;
use super::{Scalar, Tensor};

/// Gradients of a convolution with respect to its input, weights and bias.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub x: Tensor<T>,
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

fn check_shapes<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<usize> {
    let [_, c, _, _] = x.shape();
    let [cout, cin, kh, kw] = w.shape();
    if kh != kw || kh % 2 == 0 {
        return Err(Error::ShapeMismatch(format!("kernel {kh}x{kw} must be square and odd")));
    }
    if c != cin {
        return Err(Error::ShapeMismatch(format!(
            "input has {c} channels, kernel expects {cin}"
        )));
    }
    if let Some(b) = b {
        if b.shape() != [cout, 1, 1, 1] {
            return Err(Error::ShapeMismatch(format!(
                "bias shape {:?} for {cout} output channels",
                b.shape()
            )));
        }
    }
    Ok(kh)
}

/// Direct evaluation of `b[k] + Σ x[n,c,i+dy−p,j+dx−p]·w[k,c,dy,dx]`.
pub fn conv2d_forward_naive<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let k = check_shapes(x, w, Some(b))?;
    let p = (k / 2) as isize;
    let [n, cin, h, wd] = x.shape();
    let cout = w.shape()[0];
    Ok(Tensor::from_fn([n, cout, h, wd], |[ni, ko, i, j]| {
        let mut acc = b.data()[ko];
        for c in 0..cin {
            for dy in 0..k {
                for dx in 0..k {
                    let (y, xx) = (i as isize + dy as isize - p, j as isize + dx as isize - p);
                    if y >= 0 && (y as usize) < h && xx >= 0 && (xx as usize) < wd {
                        acc = acc + x.at([ni, c, y as usize, xx as usize]) * w.at([ko, c, dy, dx]);
                    }
                }
            }
        }
        acc
    }))
}

/// Direct-loop gradients, the reference for the im2col backward pass.
pub fn conv2d_backward_naive<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let k = check_shapes(x, w, None)?;
    let p = (k / 2) as isize;
    let [n, cin, h, wd] = x.shape();
    let cout = w.shape()[0];
    if grad_out.shape() != [n, cout, h, wd] {
        return Err(Error::ShapeMismatch("grad_out does not match forward output".into()));
    }
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(w.shape());
    let mut gb = Tensor::zeros([cout, 1, 1, 1]);
    for ni in 0..n {
        for ko in 0..cout {
            for i in 0..h {
                for j in 0..wd {
                    let g = grad_out.at([ni, ko, i, j]);
                    gb.data_mut()[ko] = gb.data()[ko] + g;
                    for c in 0..cin {
                        for dy in 0..k {
                            for dx in 0..k {
                                let (y, xx) = (i as isize + dy as isize - p, j as isize + dx as isize - p);
                                if y >= 0 && (y as usize) < h && xx >= 0 && (xx as usize) < wd {
                                    let xi = [ni, c, y as usize, xx as usize];
                                    let wi = [ko, c, dy, dx];
                                    gw.set(wi, gw.at(wi) + x.at(xi) * g);
                                    gx.set(xi, gx.at(xi) + w.at(wi) * g);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads { x: gx, w: gw, b: gb })
}

/// Unrolls the `k×k` windows of one `[c, h, w]` item into a `[c·k·k, h·w]` matrix.
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, col: &mut [T]) {
    let p = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for dy in 0..k {
            for dx in 0..k {
                let row = &mut col[((ci * k + dy) * k + dx) * hw..][..hw];
                for i in 0..h {
                    let dst = &mut row[i * w..(i + 1) * w];
                    let y = i as isize + dy as isize - p as isize;
                    if y < 0 || y as usize >= h {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[y as usize * w..(y as usize + 1) * w];
                    // output column j reads input column j + dx − p
                    let shift = dx as isize - p as isize;
                    for (j, d) in dst.iter_mut().enumerate() {
                        let xx = j as isize + shift;
                        *d = if xx >= 0 && (xx as usize) < w { src[xx as usize] } else { T::zero() };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input item.
fn col2im<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, k: usize, gx: &mut [T]) {
    let p = k / 2;
    let hw = h * w;
    gx.fill(T::zero());
    for ci in 0..c {
        let plane = &mut gx[ci * hw..(ci + 1) * hw];
        for dy in 0..k {
            for dx in 0..k {
                let row = &col[((ci * k + dy) * k + dx) * hw..][..hw];
                let shift = dx as isize - p as isize;
                for i in 0..h {
                    let y = i as isize + dy as isize - p as isize;
                    if y < 0 || y as usize >= h {
                        continue;
                    }
                    let dst = &mut plane[y as usize * w..(y as usize + 1) * w];
                    for (j, &g) in row[i * w..(i + 1) * w].iter().enumerate() {
                        let xx = j as isize + shift;
                        if xx >= 0 && (xx as usize) < w {
                            dst[xx as usize] = dst[xx as usize] + g;
                        }
                    }
                }
            }
        }
    }
}

/// Same-size convolution through im2col and a matrix product per batch item.
pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let k = check_shapes(x, w, Some(b))?;
    let [n, cin, h, wd] = x.shape();
    let cout = w.shape()[0];
    let hw = h * wd;
    let kk = cin * k * k;
    let mut out = Tensor::zeros([n, cout, h, wd]);
    if n == 0 || hw == 0 {
        return Ok(out);
    }
    out.data_mut()
        .par_chunks_mut(cout * hw)
        .enumerate()
        .for_each_init(Vec::new, |col, (ni, dst)| {
            for (ko, plane) in dst.chunks_exact_mut(hw).enumerate() {
                plane.fill(b.data()[ko]);
            }
            let item = x.item(ni);
            let cols: &[T] = if k == 1 {
                item
            } else {
                col.resize(kk * hw, T::zero());
                im2col(item, cin, h, wd, k, col);
                col
            };
            matmul(cout, kk, hw, w.data(), false, cols, false, T::one(), dst);
        });
    Ok(out)
}

/// Gradients of [`conv2d_forward`]; `grad_b[k] = Σ grad_out[n,k,:,:]`.
pub fn conv2d_backward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, grad_out: &Tensor<T>) -> Result<ConvGrads<T>> {
    let k = check_shapes(x, w, None)?;
    let [n, cin, h, wd] = x.shape();
    let cout = w.shape()[0];
    if grad_out.shape() != [n, cout, h, wd] {
        return Err(Error::ShapeMismatch(format!(
            "grad_out {:?} does not match forward output {:?}",
            grad_out.shape(),
            [n, cout, h, wd]
        )));
    }
    let hw = h * wd;
    let kk = cin * k * k;
    let mut gx = Tensor::zeros(x.shape());

    let per_item: Vec<(Vec<T>, Vec<T>)> = gx
        .data_mut()
        .par_chunks_mut(cin * hw.max(1))
        .enumerate()
        .map_init(Vec::new, |col, (ni, gx_item)| {
            let item = x.item(ni);
            let gout = grad_out.item(ni);
            let mut gw = vec![T::zero(); cout * kk];
            let gb: Vec<T> = gout.chunks_exact(hw.max(1)).map(|p| p.iter().copied().sum()).collect();
            if hw == 0 {
                return (gw, gb);
            }
            if k == 1 {
                matmul(cout, hw, kk, gout, false, item, true, T::zero(), &mut gw);
                matmul(kk, cout, hw, w.data(), true, gout, false, T::zero(), gx_item);
            } else {
                col.resize(kk * hw, T::zero());
                im2col(item, cin, h, wd, k, col);
                matmul(cout, hw, kk, gout, false, col, true, T::zero(), &mut gw);
                matmul(kk, cout, hw, w.data(), true, gout, false, T::zero(), col);
                col2im(col, cin, h, wd, k, gx_item);
            }
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
    Ok(ConvGrads { x: gx, w: gw, b: gb })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random([2, 1, 5, 4], &mut rng);
        let mut w = Tensor::zeros([1, 1, 3, 3]);
        w.set([0, 0, 1, 1], 1.0);
        let b = Tensor::zeros([1, 1, 1, 1]);
        assert_eq!(conv2d_forward(&x, &w, &b).unwrap(), x);
    }

    #[test]
    fn ones_kernel_counts_taps() {
        let x = Tensor::<f32>::filled([1, 1, 3, 3], 1.0);
        let w = Tensor::filled([1, 1, 3, 3], 1.0);
        let b = Tensor::zeros([1, 1, 1, 1]);
        let y = conv2d_forward(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn optimized_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (k, shape, cout) in [(3, [1, 2, 5, 5], 3), (3, [3, 4, 6, 7], 5), (1, [2, 6, 4, 4], 1), (3, [1, 1, 1, 1], 2)] {
            let x = random(shape, &mut rng);
            let w = random([cout, shape[1], k, k], &mut rng);
            let b = random([cout, 1, 1, 1], &mut rng);
            let fast = conv2d_forward(&x, &w, &b).unwrap();
            let slow = conv2d_forward_naive(&x, &w, &b).unwrap();
            assert!(fast.max_abs_diff(&slow) < 1e-12);

            let g = random(fast.shape(), &mut rng);
            let gf = conv2d_backward(&x, &w, &g).unwrap();
            let gs = conv2d_backward_naive(&x, &w, &g).unwrap();
            assert!(gf.x.max_abs_diff(&gs.x) < 1e-12);
            assert!(gf.w.max_abs_diff(&gs.w) < 1e-12);
            assert!(gf.b.max_abs_diff(&gs.b) < 1e-12);
        }
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random([2, 2, 4, 4], &mut rng);
        let w = random([3, 2, 3, 3], &mut rng);
        let g = conv2d_backward(&x, &w, &Tensor::zeros([2, 3, 4, 4])).unwrap();
        assert!(g.x.data().iter().chain(g.w.data()).chain(g.b.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn single_pixel_grad_through_identity_kernel() {
        let x = Tensor::<f64>::filled([1, 1, 4, 4], 0.5);
        let mut w = Tensor::zeros([1, 1, 3, 3]);
        w.set([0, 0, 1, 1], 1.0);
        let mut g = Tensor::zeros([1, 1, 4, 4]);
        g.set([0, 0, 2, 1], 1.0);
        let grads = conv2d_backward(&x, &w, &g).unwrap();
        assert_eq!(grads.x, g);
    }

    #[test]
    fn shape_errors() {
        let x = Tensor::<f32>::zeros([1, 2, 4, 4]);
        let w = Tensor::zeros([1, 3, 3, 3]);
        let b = Tensor::zeros([1, 1, 1, 1]);
        assert!(matches!(conv2d_forward(&x, &w, &b), Err(Error::ShapeMismatch(_))));
        let w = Tensor::zeros([1, 2, 2, 2]);
        assert!(conv2d_forward(&x, &w, &b).is_err());
        let w = Tensor::zeros([1, 2, 3, 3]);
        assert!(conv2d_forward(&x, &w, &Tensor::zeros([2, 1, 1, 1])).is_err());
        assert!(conv2d_backward(&x, &w, &Tensor::zeros([1, 1, 2, 2])).is_err());
    }
}
