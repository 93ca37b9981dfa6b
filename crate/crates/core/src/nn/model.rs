//! The scaled 3-level U-net.
//!
//! ```text
//! input ─ enc1 (conv·relu ×2) ──────────────────────────── concat ─ dec1 ─ head ─ sigmoid
//!           └ pool ─ enc2 (conv·relu ×2) ───── concat ─ dec2 ─ up1 ┘
//!                      └ pool ─ bott (conv·relu ×2) ─ up2 ┘
//! ```
//!
//! Widths are `b`, `2b`, `4b` for levels 1–3 with `b = base_channels`. Each
//! skip concatenation puts the encoder map first, doubling decoder input
//! width. A 48×48 patch passes through 48 → 24 → 12 → 24 → 48.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::conv::{conv2d_backward, conv2d_forward};
use super::layers::{
    concat_channels, maxpool_backward, maxpool_forward, relu_backward, relu_forward, sigmoid, split_channels,
    upconv_backward, upconv_forward, PoolIndices,
};
use super::{Scalar, Tensor};

/// Number of resolution levels.
pub const DEPTH: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            base_channels: 32,
            in_channels: 1,
            out_channels: 1,
        }
    }
}

impl ModelSpec {
    pub fn with_base(base_channels: usize) -> Self {
        Self {
            base_channels,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be at least 1".into()));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be at least 1".into()));
        }
        if self.out_channels != 1 {
            return Err(Error::Config("only a single sigmoid output channel is supported".into()));
        }
        Ok(())
    }

    /// Spatial dims must survive two 2×2 pools.
    pub fn check_input(&self, shape: [usize; 4]) -> Result<()> {
        let [_, c, h, w] = shape;
        if c != self.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "model expects {} input channel(s), got {c}",
                self.in_channels
            )));
        }
        let m = 1 << (DEPTH - 1);
        if h % m != 0 || w % m != 0 || h == 0 || w == 0 {
            return Err(Error::OddSpatialDims { h, w });
        }
        Ok(())
    }

    /// `(name, logical shape)` for every trainable tensor, in file order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        fn conv(out: &mut Vec<(String, Vec<usize>)>, name: &str, cin: usize, cout: usize, k: usize) {
            out.push((format!("{name}.weight"), vec![cout, cin, k, k]));
            out.push((format!("{name}.bias"), vec![cout]));
        }
        // transposed kernels are stored [Cin, Cout, 2, 2]
        fn up(out: &mut Vec<(String, Vec<usize>)>, name: &str, cin: usize, cout: usize) {
            out.push((format!("{name}.weight"), vec![cin, cout, 2, 2]));
            out.push((format!("{name}.bias"), vec![cout]));
        }
        let b = self.base_channels;
        let mut out = Vec::with_capacity(ENTRY_COUNT);
        conv(&mut out, "enc1.conv1", self.in_channels, b, 3);
        conv(&mut out, "enc1.conv2", b, b, 3);
        conv(&mut out, "enc2.conv1", b, 2 * b, 3);
        conv(&mut out, "enc2.conv2", 2 * b, 2 * b, 3);
        conv(&mut out, "bott.conv1", 2 * b, 4 * b, 3);
        conv(&mut out, "bott.conv2", 4 * b, 4 * b, 3);
        up(&mut out, "up2", 4 * b, 2 * b);
        conv(&mut out, "dec2.conv1", 4 * b, 2 * b, 3);
        conv(&mut out, "dec2.conv2", 2 * b, 2 * b, 3);
        up(&mut out, "up1", 2 * b, b);
        conv(&mut out, "dec1.conv1", 2 * b, b, 3);
        conv(&mut out, "dec1.conv2", b, b, 3);
        conv(&mut out, "head", b, self.out_channels, 1);
        out
    }
}

/// Trainable parameter total for a spec, from the per-layer count formula.
pub fn param_count(spec: &ModelSpec) -> usize {
    let b = spec.base_channels;
    let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k + cout;
    let up = |cin: usize, cout: usize| cin * cout * 4 + cout;
    conv(spec.in_channels, b, 3)
        + conv(b, b, 3)
        + conv(b, 2 * b, 3)
        + conv(2 * b, 2 * b, 3)
        + conv(2 * b, 4 * b, 3)
        + conv(4 * b, 4 * b, 3)
        + up(4 * b, 2 * b)
        + conv(4 * b, 2 * b, 3)
        + conv(2 * b, 2 * b, 3)
        + up(2 * b, b)
        + conv(2 * b, b, 3)
        + conv(b, b, 3)
        + conv(b, spec.out_channels, 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
}

/// Logical shape to storage shape: biases live in `[c, 1, 1, 1]` tensors.
fn storage_shape(dims: &[usize]) -> [usize; 4] {
    match *dims {
        [c] => [c, 1, 1, 1],
        [a, b, c, d] => [a, b, c, d],
        _ => unreachable!("layout only produces rank 1 and 4"),
    }
}

// Entry positions in `ModelSpec::layout` order.
const ENC1_1: usize = 0;
const ENC1_2: usize = 2;
const ENC2_1: usize = 4;
const ENC2_2: usize = 6;
const BOTT_1: usize = 8;
const BOTT_2: usize = 10;
const UP2: usize = 12;
const DEC2_1: usize = 14;
const DEC2_2: usize = 16;
const UP1: usize = 18;
const DEC1_1: usize = 20;
const DEC1_2: usize = 22;
const HEAD: usize = 24;
const ENTRY_COUNT: usize = 26;

/// Ordered, named weight and bias tensors of one U-net instance.
///
/// Gradients use the same type, entry for entry.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    spec: ModelSpec,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let (names, tensors) = spec
            .layout()
            .into_iter()
            .map(|(name, dims)| (name, Tensor::zeros(storage_shape(&dims))))
            .unzip();
        Ok(Self {
            spec: *spec,
            names,
            tensors,
        })
    }

    /// Builds params from named tensors; every layout entry must be present with the right shape.
    pub fn from_named(spec: &ModelSpec, mut named: Vec<(String, Vec<usize>, Vec<T>)>) -> Result<Self> {
        let mut params = Self::zeros(spec)?;
        for (i, (name, dims)) in spec.layout().into_iter().enumerate() {
            let pos = named
                .iter()
                .position(|(n, _, _)| *n == name)
                .ok_or_else(|| Error::ShapeMismatch(format!("missing parameter {name}")))?;
            let (_, got_dims, data) = named.swap_remove(pos);
            if got_dims != dims {
                return Err(Error::ShapeMismatch(format!(
                    "{name}: expected dims {dims:?}, found {got_dims:?}"
                )));
            }
            params.tensors[i] = Tensor::from_vec(storage_shape(&dims), data)?;
        }
        Ok(params)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn kind(&self, index: usize) -> ParamKind {
        if self.names[index].ends_with(".bias") {
            ParamKind::Bias
        } else {
            ParamKind::Weight
        }
    }

    /// Logical dims of entry `index` (rank 1 for biases).
    pub fn dims(&self, index: usize) -> Vec<usize> {
        let s = self.tensors[index].shape();
        match self.kind(index) {
            ParamKind::Bias => vec![s[0]],
            ParamKind::Weight => s.to_vec(),
        }
    }

    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            spec: self.spec,
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in self.iter() {
            t.check_finite(name)?;
        }
        Ok(())
    }

    pub(crate) fn same_layout(&self, other: &ModelParams<T>) -> bool {
        self.names == other.names
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.shape() == b.shape())
    }

    fn w(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    fn b(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i + 1]
    }
}

/// He-style Gaussian initialization: weights `N(0, √(2/N))` with `N = Cin·kh·kw`, biases zero.
pub fn init_params<T: Scalar>(spec: &ModelSpec, seed: u64) -> Result<ModelParams<T>> {
    let mut params = ModelParams::<T>::zeros(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..params.len() {
        if params.kind(i) == ParamKind::Bias {
            continue;
        }
        let [d0, d1, kh, kw] = params.tensors[i].shape();
        // transposed kernels are stored [Cin, Cout, 2, 2]
        let cin = if params.names[i].starts_with("up") { d0 } else { d1 };
        let fan_in = cin * kh * kw;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        for v in params.tensors[i].data_mut() {
            *v = T::of_f64(normal.sample(&mut rng));
        }
    }
    Ok(params)
}

/// Activations saved by [`model_forward`] for one backward pass.
#[derive(Debug)]
pub struct ForwardCache<T> {
    spec: ModelSpec,
    input: Tensor<T>,
    a1: Tensor<T>,
    a2: Tensor<T>,
    idx1: PoolIndices,
    p1: Tensor<T>,
    a3: Tensor<T>,
    a4: Tensor<T>,
    idx2: PoolIndices,
    p2: Tensor<T>,
    a5: Tensor<T>,
    a6: Tensor<T>,
    c2: Tensor<T>,
    a7: Tensor<T>,
    a8: Tensor<T>,
    c1: Tensor<T>,
    a9: Tensor<T>,
    a10: Tensor<T>,
    logits: Tensor<T>,
    consumed: bool,
}

impl<T: Scalar> ForwardCache<T> {
    /// Pre-sigmoid network output.
    pub fn logits(&self) -> &Tensor<T> {
        &self.logits
    }

    /// Spatial sizes of the feature maps at each stage, encoder to decoder.
    pub fn level_sizes(&self) -> Vec<usize> {
        vec![
            self.a2.shape()[2],
            self.a4.shape()[2],
            self.a6.shape()[2],
            self.a8.shape()[2],
            self.a10.shape()[2],
        ]
    }
}

fn conv_relu<T: Scalar>(x: &Tensor<T>, p: &ModelParams<T>, i: usize) -> Result<Tensor<T>> {
    Ok(relu_forward(&conv2d_forward(x, p.w(i), p.b(i))?))
}

/// Sigmoid probabilities kept strictly inside (0, 1) at the precision of `T`.
fn probabilities<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let hi = T::one() - T::epsilon() / T::of_f64(2.0);
    let lo = T::min_positive_value();
    let data = logits.data().iter().map(|&z| sigmoid(z).max(lo).min(hi)).collect();
    Tensor::from_vec(logits.shape(), data).unwrap()
}

/// Runs the network on `[n, 1, h, w]` input; returns per-pixel vessel probabilities and the cache.
pub fn model_forward<T: Scalar>(x: &Tensor<T>, params: &ModelParams<T>) -> Result<(Tensor<T>, ForwardCache<T>)> {
    let spec = params.spec;
    spec.check_input(x.shape())?;
    let a1 = conv_relu(x, params, ENC1_1)?;
    let a2 = conv_relu(&a1, params, ENC1_2)?;
    let (p1, idx1) = maxpool_forward(&a2)?;
    let a3 = conv_relu(&p1, params, ENC2_1)?;
    let a4 = conv_relu(&a3, params, ENC2_2)?;
    let (p2, idx2) = maxpool_forward(&a4)?;
    let a5 = conv_relu(&p2, params, BOTT_1)?;
    let a6 = conv_relu(&a5, params, BOTT_2)?;
    let u2 = upconv_forward(&a6, params.w(UP2), params.b(UP2))?;
    let c2 = concat_channels(&a4, &u2)?;
    let a7 = conv_relu(&c2, params, DEC2_1)?;
    let a8 = conv_relu(&a7, params, DEC2_2)?;
    let u1 = upconv_forward(&a8, params.w(UP1), params.b(UP1))?;
    let c1 = concat_channels(&a2, &u1)?;
    let a9 = conv_relu(&c1, params, DEC1_1)?;
    let a10 = conv_relu(&a9, params, DEC1_2)?;
    let logits = conv2d_forward(&a10, params.w(HEAD), params.b(HEAD))?;
    logits.check_finite("model output")?;
    let probs = probabilities(&logits);
    Ok((
        probs,
        ForwardCache {
            spec,
            input: x.clone(),
            a1,
            a2,
            idx1,
            p1,
            a3,
            a4,
            idx2,
            p2,
            a5,
            a6,
            c2,
            a7,
            a8,
            c1,
            a9,
            a10,
            logits,
            consumed: false,
        },
    ))
}

/// Gradients for every parameter given `grad_logits`, the loss gradient with
/// respect to the pre-sigmoid output. A cache supports exactly one backward pass.
pub fn model_backward<T: Scalar>(
    cache: &mut ForwardCache<T>,
    params: &ModelParams<T>,
    grad_logits: &Tensor<T>,
) -> Result<ModelParams<T>> {
    if cache.consumed {
        return Err(Error::StaleCache);
    }
    if cache.spec != params.spec {
        return Err(Error::ShapeMismatch("cache was produced by a different model spec".into()));
    }
    if grad_logits.shape() != cache.logits.shape() {
        return Err(Error::ShapeMismatch(format!(
            "grad {:?} does not match output {:?}",
            grad_logits.shape(),
            cache.logits.shape()
        )));
    }
    cache.consumed = true;
    let c = &*cache;
    let mut grads = ModelParams::<T>::zeros(&params.spec)?;

    // conv + relu pair: `out` is the post-relu activation, `input` the conv input
    let mut conv_relu_back = |i: usize, input: &Tensor<T>, out: &Tensor<T>, g: &Tensor<T>| -> Result<Tensor<T>> {
        let g = relu_backward(out, g)?;
        let cg = conv2d_backward(input, params.w(i), &g)?;
        grads.tensors[i] = cg.w;
        grads.tensors[i + 1] = cg.b;
        Ok(cg.x)
    };

    let head = conv2d_backward(&c.a10, params.w(HEAD), grad_logits)?;
    let g = conv_relu_back(DEC1_2, &c.a9, &c.a10, &head.x)?;
    let g = conv_relu_back(DEC1_1, &c.c1, &c.a9, &g)?;
    let skip1_ch = c.a2.shape()[1];
    let (g_skip1, g_u1) = split_channels(&g, skip1_ch)?;
    let (g_a8, gw_up1, gb_up1) = upconv_backward(&c.a8, params.w(UP1), &g_u1)?;
    let g = conv_relu_back(DEC2_2, &c.a7, &c.a8, &g_a8)?;
    let g = conv_relu_back(DEC2_1, &c.c2, &c.a7, &g)?;
    let skip2_ch = c.a4.shape()[1];
    let (g_skip2, g_u2) = split_channels(&g, skip2_ch)?;
    let (g_a6, gw_up2, gb_up2) = upconv_backward(&c.a6, params.w(UP2), &g_u2)?;
    let g = conv_relu_back(BOTT_2, &c.a5, &c.a6, &g_a6)?;
    let g = conv_relu_back(BOTT_1, &c.p2, &c.a5, &g)?;
    let mut g_a4 = maxpool_backward(&c.idx2, &g)?;
    g_a4.add_assign(&g_skip2);
    let g = conv_relu_back(ENC2_2, &c.a3, &c.a4, &g_a4)?;
    let g = conv_relu_back(ENC2_1, &c.p1, &c.a3, &g)?;
    let mut g_a2 = maxpool_backward(&c.idx1, &g)?;
    g_a2.add_assign(&g_skip1);
    let g = conv_relu_back(ENC1_2, &c.a1, &c.a2, &g_a2)?;
    conv_relu_back(ENC1_1, &c.input, &c.a1, &g)?;

    grads.tensors[HEAD] = head.w;
    grads.tensors[HEAD + 1] = head.b;
    grads.tensors[UP2] = gw_up2;
    grads.tensors[UP2 + 1] = gb_up2;
    grads.tensors[UP1] = gw_up1;
    grads.tensors[UP1 + 1] = gb_up1;
    debug_assert_eq!(grads.len(), ENTRY_COUNT);
    Ok(grads)
}
