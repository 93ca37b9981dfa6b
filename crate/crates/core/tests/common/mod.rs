//! Shared fixtures and independent oracles for the integration suites.
#![allow(dead_code)]

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vesselforge::nn::*;
use vesselforge::patch::{Origin, PatchSet};
use vesselforge::preprocess::StructuringElement;
use vesselforge::raster::{save_raster, Raster};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

/// Max relative error between analytic and central-difference gradients over
/// coordinates where either magnitude exceeds `floor`.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel: f64,
    pub checked: usize,
}

pub const FD_STEP: f64 = 1e-6;
pub const GRAD_FLOOR: f64 = 1e-6;

pub fn fd_check(point: &[f64], analytic: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> GradCheck {
    assert_eq!(point.len(), analytic.len());
    let mut x = point.to_vec();
    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + FD_STEP;
        let up = f(&x);
        x[i] = orig - FD_STEP;
        let down = f(&x);
        x[i] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = analytic[i];
        if a.abs().max(numeric.abs()) <= GRAD_FLOOR {
            continue;
        }
        checked += 1;
        max_rel = max_rel.max((a - numeric).abs() / a.abs().max(numeric.abs()));
    }
    GradCheck { max_rel, checked }
}

/// `Σ r ⊙ y`, the scalar probe used to turn a layer's output into a loss.
pub fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn t(shape: [usize; 4], v: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(shape, v.to_vec()).unwrap()
}

/// One finite-difference report per layer input/parameter, plus the composed model.
pub fn layer_gradient_checks() -> Vec<(&'static str, GradCheck)> {
    let mut out = Vec::new();

    // 3x3 convolution
    let xs = [2, 3, 6, 5];
    let ws = [4, 3, 3, 3];
    let bs = [4, 1, 1, 1];
    let x = rand_tensor(xs, 1);
    let w = rand_tensor(ws, 2);
    let b = rand_tensor(bs, 3);
    let r = rand_tensor([2, 4, 6, 5], 4);
    let g = conv2d_backward(&x, &w, &r).unwrap();
    let gb: Vec<f64> = g.b.data().to_vec();
    out.push(("conv3x3 input", fd_check(x.data(), g.x.data(), |v| dot(&conv2d_forward(&t(xs, v), &w, &b).unwrap(), &r))));
    out.push(("conv3x3 weight", fd_check(w.data(), g.w.data(), |v| dot(&conv2d_forward(&x, &t(ws, v), &b).unwrap(), &r))));
    out.push(("conv3x3 bias", fd_check(b.data(), &gb, |v| dot(&conv2d_forward(&x, &w, &t(bs, v)).unwrap(), &r))));

    // 1x1 head convolution
    let ws1 = [1, 3, 1, 1];
    let w1 = rand_tensor(ws1, 5);
    let b1 = rand_tensor([1, 1, 1, 1], 6);
    let r1 = rand_tensor([2, 1, 6, 5], 7);
    let g1 = conv2d_backward(&x, &w1, &r1).unwrap();
    out.push(("conv1x1 weight", fd_check(w1.data(), g1.w.data(), |v| dot(&conv2d_forward(&x, &t(ws1, v), &b1).unwrap(), &r1))));
    out.push(("conv1x1 input", fd_check(x.data(), g1.x.data(), |v| dot(&conv2d_forward(&t(xs, v), &w1, &b1).unwrap(), &r1))));

    // ReLU, keeping inputs away from the kink
    let rs = [1, 2, 4, 4];
    let xr = Tensor::from_fn(rs, {
        let mut g = rng(8);
        move |_| {
            let v: f64 = g.random_range(0.05..1.0);
            if g.random_bool(0.5) { v } else { -v }
        }
    });
    let rr = rand_tensor(rs, 9);
    let gr = relu_backward(&xr, &rr).unwrap();
    out.push(("relu", fd_check(xr.data(), gr.data(), |v| dot(&relu_forward(&t(rs, v)), &rr))));

    // 2x2 max-pool
    let ps = [2, 2, 4, 6];
    let xp = rand_tensor(ps, 10);
    let rp = rand_tensor([2, 2, 2, 3], 11);
    let (_, idx) = maxpool_forward(&xp).unwrap();
    let gp = maxpool_backward(&idx, &rp).unwrap();
    out.push(("maxpool", fd_check(xp.data(), gp.data(), |v| dot(&maxpool_forward(&t(ps, v)).unwrap().0, &rp))));

    // 2x2 stride-2 transposed convolution
    let us = [2, 3, 3, 2];
    let uws = [3, 2, 2, 2];
    let ubs = [2, 1, 1, 1];
    let xu = rand_tensor(us, 12);
    let wu = rand_tensor(uws, 13);
    let bu = rand_tensor(ubs, 14);
    let ru = rand_tensor([2, 2, 6, 4], 15);
    let (gx, gw, gbu) = upconv_backward(&xu, &wu, &ru).unwrap();
    out.push(("upconv input", fd_check(xu.data(), gx.data(), |v| dot(&upconv_forward(&t(us, v), &wu, &bu).unwrap(), &ru))));
    out.push(("upconv weight", fd_check(wu.data(), gw.data(), |v| dot(&upconv_forward(&xu, &t(uws, v), &bu).unwrap(), &ru))));
    out.push(("upconv bias", fd_check(bu.data(), gbu.data(), |v| dot(&upconv_forward(&xu, &wu, &t(ubs, v)).unwrap(), &ru))));

    // channel concatenation: gradient is the split of the upstream gradient
    let (ca, cb) = (rand_tensor([1, 2, 3, 3], 16), rand_tensor([1, 3, 3, 3], 17));
    let rc = rand_tensor([1, 5, 3, 3], 18);
    let (ga, _) = split_channels(&rc, 2).unwrap();
    out.push(("concat", fd_check(ca.data(), ga.data(), |v| dot(&concat_channels(&t([1, 2, 3, 3], v), &cb).unwrap(), &rc))));

    // sigmoid cross-entropy with respect to the logits
    let zs = [1, 1, 4, 4];
    let z = rand_tensor(zs, 19);
    let mut lr = rng(20);
    let y = Tensor::from_fn(zs, |_| if lr.random_bool(0.4) { 1.0 } else { 0.0 });
    let (_, gz) = sigmoid_bce_loss(&z, &y).unwrap();
    out.push(("sigmoid BCE", fd_check(z.data(), gz.data(), |v| sigmoid_bce_loss(&t(zs, v), &y).unwrap().0)));

    out.push(("composed model", model_gradient_check(4, 8, 21)));
    out
}

/// Every parameter of a `base`-wide model on a `1×1×side×side` input under BCE.
pub fn model_gradient_check(base: usize, side: usize, seed: u64) -> GradCheck {
    let spec = ModelSpec::with_base(base);
    let mut params = init_params::<f64>(&spec, seed).unwrap();
    // non-zero biases so every bias path carries gradient
    for (i, tns) in params.tensors_mut().iter_mut().enumerate() {
        if tns.shape()[1..] == [1, 1, 1] {
            let mut r = rng(seed + 100 + i as u64);
            for v in tns.data_mut() {
                *v = r.random_range(-0.1..0.1);
            }
        }
    }
    let x = Tensor::from_fn([1, 1, side, side], {
        let mut r = rng(seed + 1);
        move |_| r.random_range(0.0..1.0)
    });
    let y = Tensor::from_fn([1, 1, side, side], {
        let mut r = rng(seed + 2);
        move |_| if r.random_bool(0.3) { 1.0 } else { 0.0 }
    });
    let loss = |p: &ModelParams<f64>| {
        let (_, cache) = model_forward(&x, p).unwrap();
        sigmoid_bce_loss(cache.logits(), &y).unwrap().0
    };
    let (_, mut cache) = model_forward(&x, &params).unwrap();
    let (_, g) = sigmoid_bce_loss(cache.logits(), &y).unwrap();
    let grads = model_backward(&mut cache, &params, &g).unwrap();

    let flat: Vec<f64> = params.tensors().iter().flat_map(|t| t.data().to_vec()).collect();
    let analytic: Vec<f64> = grads.tensors().iter().flat_map(|t| t.data().to_vec()).collect();
    let lens: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    fd_check(&flat, &analytic, |v| {
        let mut off = 0;
        for (tns, &n) in params.tensors_mut().iter_mut().zip(&lens) {
            tns.data_mut().copy_from_slice(&v[off..off + n]);
            off += n;
        }
        loss(&params)
    })
}

/// Pairwise AUC: P(score_pos > score_neg) + ½·P(tie).
pub fn mann_whitney(scores: &[f32], labels: &[bool]) -> f64 {
    let pos: Vec<f32> = scores.iter().zip(labels).filter(|p| *p.1).map(|p| *p.0).collect();
    let neg: Vec<f32> = scores.iter().zip(labels).filter(|p| !*p.1).map(|p| *p.0).collect();
    let mut wins = 0.0;
    for &p in &pos {
        for &n in &neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

/// Double-loop grey erosion/dilation with neutral padding.
pub fn brute_morph(img: &Raster, se: &StructuringElement, dilate: bool) -> Vec<u8> {
    let (w, h) = (img.width() as isize, img.height() as isize);
    let mut out = Vec::with_capacity(img.data().len());
    for r in 0..h {
        for c in 0..w {
            let mut acc = if dilate { 0u8 } else { 255u8 };
            for &(dy, dx) in se.offsets() {
                let (rr, cc) = if dilate { (r - dy, c - dx) } else { (r + dy, c + dx) };
                if rr < 0 || cc < 0 || rr >= h || cc >= w {
                    continue;
                }
                let v = img.get(rr as usize, cc as usize, 0);
                acc = if dilate { acc.max(v) } else { acc.min(v) };
            }
            out.push(acc);
        }
    }
    out
}

/// Parameter count summed entry by entry, independent of the library formula.
pub fn hand_param_count(b: usize) -> usize {
    let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k + cout;
    conv(1, b, 3)
        + conv(b, b, 3)
        + conv(b, 2 * b, 3)
        + conv(2 * b, 2 * b, 3)
        + conv(2 * b, 4 * b, 3)
        + conv(4 * b, 4 * b, 3)
        + conv(4 * b, 2 * b, 2) // up: 4b -> 2b, 2x2
        + conv(4 * b, 2 * b, 3)
        + conv(2 * b, 2 * b, 3)
        + conv(2 * b, b, 2) // up: 2b -> b, 2x2
        + conv(2 * b, b, 3)
        + conv(b, b, 3)
        + conv(b, 1, 1)
}

/// Bright-background patches crossed by dark "vessels"; label 1 on the vessel pixels.
pub fn vessel_patches(n: usize, size: usize, seed: u64) -> PatchSet {
    let mut r = rng(seed);
    let mut data = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n * size * size);
    for _ in 0..n {
        let theta: f64 = r.random_range(0.0..std::f64::consts::PI);
        let (cx, cy) = (r.random_range(0.3..0.7) * size as f64, r.random_range(0.3..0.7) * size as f64);
        let width = r.random_range(1.0..3.0);
        for row in 0..size {
            for col in 0..size {
                let (y, x) = (row as f64, col as f64);
                let d = ((x - cx) * theta.sin() - (y - cy) * theta.cos()).abs();
                let vessel = d < width;
                let noise: f64 = r.random_range(-0.05..0.05);
                let v = if vessel { 0.75 } else { 0.25 } + noise;
                data.push(v as f32);
                labels.push(vessel as u8);
            }
        }
    }
    let origins = (0..n).map(|i| Origin { image_id: 0, top: i as u32, left: 0 }).collect();
    PatchSet::new(Tensor::from_vec([n, 1, size, size], data).unwrap(), labels, origins).unwrap()
}

/// Small fundus-like RGB image: reddish disc on black, dark branching lines inside.
pub fn synthetic_fundus(w: usize, h: usize, seed: u64) -> (Raster, Raster, Raster) {
    let mut r = rng(seed);
    let (cx, cy, rad) = (w as f64 / 2.0, h as f64 / 2.0, w.min(h) as f64 * 0.45);
    let lines: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| (r.random_range(0.0..std::f64::consts::PI), r.random_range(-0.3..0.3) * rad, r.random_range(1.0..2.5)))
        .collect();
    let mut rgb = Vec::with_capacity(w * h * 3);
    let mut mask = Vec::with_capacity(w * h);
    let mut gt = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let inside = dx * dx + dy * dy <= rad * rad;
            let vessel = inside
                && lines
                    .iter()
                    .any(|&(th, off, wd)| (dx * th.cos() + dy * th.sin() - off).abs() < wd);
            let noise = r.random_range(0..12) as u8;
            let px = match (inside, vessel) {
                (false, _) => [noise / 4, 0, 0],
                (true, false) => [200 + noise, 90 + noise, 40 + noise / 2],
                (true, true) => [120 + noise, 40 + noise, 20 + noise / 2],
            };
            rgb.extend_from_slice(&px);
            mask.push(if inside { 255 } else { 0 });
            gt.push(if vessel { 255 } else { 0 });
        }
    }
    (
        Raster::new(w, h, 3, rgb).unwrap(),
        Raster::new(w, h, 1, mask).unwrap(),
        Raster::new(w, h, 1, gt).unwrap(),
    )
}

/// Writes `<root>/{training,test}/{images,mask,1st_manual}` with `n_train` and `n_test` images.
pub fn write_dataset(root: &Path, n_train: usize, n_test: usize, w: usize, h: usize) {
    for (split, range, ext) in [("training", 21..21 + n_train, "training"), ("test", 1..1 + n_test, "test")] {
        for id in range {
            let (rgb, mask, gt) = synthetic_fundus(w, h, id as u64);
            let dir = root.join(split);
            for sub in ["images", "mask", "1st_manual"] {
                std::fs::create_dir_all(dir.join(sub)).unwrap();
            }
            save_raster(&rgb, dir.join(format!("images/{id:02}_{ext}.png"))).unwrap();
            save_raster(&mask, dir.join(format!("mask/{id:02}_{ext}_mask.png"))).unwrap();
            save_raster(&gt, dir.join(format!("1st_manual/{id:02}_manual1.png"))).unwrap();
        }
    }
}
