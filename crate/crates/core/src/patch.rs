//! Training-patch sampling, the strided test grid, and stitching of patch
//! predictions back into a whole-image probability map.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::raster::{FovMask, Raster};
use crate::util::{quantize_u8, read_file, write_atomic, ByteReader};

/// Where a patch was cut from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Origin {
    pub image_id: u32,
    pub top: u32,
    pub left: u32,
}

/// Patches with their binary labels, `[n, 1, h, w]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    patches: Tensor<f32>,
    labels: Vec<u8>,
    origins: Vec<Origin>,
}

impl PatchSet {
    pub fn new(patches: Tensor<f32>, labels: Vec<u8>, origins: Vec<Origin>) -> Result<Self> {
        let [n, c, _, _] = patches.shape();
        if c != 1 {
            return Err(Error::ShapeMismatch(format!("patches must have 1 channel, got {c}")));
        }
        if labels.len() != patches.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} label values for {} patch values",
                labels.len(),
                patches.len()
            )));
        }
        if origins.len() != n {
            return Err(Error::ShapeMismatch(format!("{} origins for {n} patches", origins.len())));
        }
        if labels.iter().any(|&v| v > 1) {
            return Err(Error::format("VFPS patch", "labels must be 0 or 1"));
        }
        Ok(Self {
            patches,
            labels,
            origins,
        })
    }

    pub fn empty(size: usize) -> Self {
        Self {
            patches: Tensor::zeros([0, 1, size, size]),
            labels: Vec::new(),
            origins: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    /// `(h, w)` of each patch.
    pub fn patch_dims(&self) -> (usize, usize) {
        let s = self.patches.shape();
        (s[2], s[3])
    }

    pub fn patches(&self) -> &Tensor<f32> {
        &self.patches
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn origins(&self) -> &[Origin] {
        &self.origins
    }

    /// Labels as a float tensor shaped like the patches.
    pub fn label_tensor(&self, indices: &[usize]) -> Tensor<f32> {
        let len = self.patches.item_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend(self.labels[i * len..(i + 1) * len].iter().map(|&v| v as f32));
        }
        let (h, w) = self.patch_dims();
        Tensor::from_vec([indices.len(), 1, h, w], data).unwrap()
    }

    /// Subset by index, in the given order.
    pub fn select(&self, indices: &[usize]) -> PatchSet {
        let len = self.patches.item_len();
        let mut labels = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            labels.extend_from_slice(&self.labels[i * len..(i + 1) * len]);
        }
        PatchSet {
            patches: self.patches.select(indices),
            labels,
            origins: indices.iter().map(|&i| self.origins[i]).collect(),
        }
    }

    /// Appends another set with the same patch size.
    pub fn extend(&mut self, other: PatchSet) -> Result<()> {
        if self.patch_dims() != other.patch_dims() {
            return Err(Error::ShapeMismatch("cannot merge patch sets of different sizes".into()));
        }
        let (h, w) = self.patch_dims();
        let n = self.len() + other.len();
        let mut data = std::mem::replace(&mut self.patches, Tensor::zeros([0, 1, h, w])).into_data();
        data.extend_from_slice(other.patches.data());
        self.patches = Tensor::from_vec([n, 1, h, w], data)?;
        self.labels.extend_from_slice(&other.labels);
        self.origins.extend_from_slice(&other.origins);
        Ok(())
    }
}

fn cut(image: &Raster, top: usize, left: usize, size: usize, out: &mut Vec<f32>) {
    for r in top..top + size {
        let row = &image.data()[r * image.width() + left..][..size];
        out.extend(row.iter().map(|&v| v as f32 / 255.0));
    }
}

/// Draws `n` patches (with replacement) whose centre pixel lies in the FOV and
/// whose extent lies inside the image. The centre of an even-sized patch is
/// pixel `(top + size/2, left + size/2)`.
pub fn sample_train_patches(
    image: &Raster,
    mask: &FovMask,
    gt: &FovMask,
    n: usize,
    size: usize,
    seed: u64,
    image_id: u32,
) -> Result<PatchSet> {
    image.require_channels(1)?;
    let (w, h) = (image.width(), image.height());
    if (mask.width(), mask.height()) != (w, h) || (gt.width(), gt.height()) != (w, h) {
        return Err(Error::DimensionMismatch(format!(
            "image {w}x{h}, mask {}x{}, ground truth {}x{}",
            mask.width(),
            mask.height(),
            gt.width(),
            gt.height()
        )));
    }
    if size == 0 || size > w || size > h {
        return Err(Error::PatchLargerThanImage {
            patch_h: size,
            patch_w: size,
            image_h: h,
            image_w: w,
        });
    }
    let half = size / 2;
    let candidates: Vec<(u32, u32)> = (0..=h - size)
        .flat_map(|top| (0..=w - size).map(move |left| (top, left)))
        .filter(|&(top, left)| mask.get(top + half, left + half))
        .map(|(t, l)| (t as u32, l as u32))
        .collect();
    if candidates.is_empty() {
        return Err(Error::EmptyFov);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let origins: Vec<Origin> = (0..n)
        .map(|_| {
            let (top, left) = candidates[rng.random_range(0..candidates.len())];
            Origin { image_id, top, left }
        })
        .collect();

    let mut data = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n * size * size);
    for o in &origins {
        let (top, left) = (o.top as usize, o.left as usize);
        cut(image, top, left, size, &mut data);
        for r in top..top + size {
            labels.extend_from_slice(&gt.data()[r * w + left..][..size]);
        }
    }
    PatchSet::new(Tensor::from_vec([n, 1, size, size], data)?, labels, origins)
}

/// Strided test layout; the image is zero-padded bottom/right until the grid tiles it exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub image_h: usize,
    pub image_w: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub stride: usize,
    pub padded_h: usize,
    pub padded_w: usize,
    pub rows: usize,
    pub cols: usize,
}

impl PatchGrid {
    pub fn count(&self) -> usize {
        self.rows * self.cols
    }

    /// `(top, left)` of patch `index` in row-major grid order.
    pub fn origin(&self, index: usize) -> (usize, usize) {
        ((index / self.cols) * self.stride, (index % self.cols) * self.stride)
    }
}

/// Smallest padded length `L ≥ len` with `(L − patch) mod stride == 0`.
fn padded(len: usize, patch: usize, stride: usize) -> usize {
    patch + (len - patch).div_ceil(stride) * stride
}

/// Grid of `((H′ − h)/s + 1) × ((W′ − w)/s + 1)` patches over the padded image `H′ × W′`.
pub fn make_test_grid(image_h: usize, image_w: usize, patch_h: usize, patch_w: usize, stride: i64) -> Result<PatchGrid> {
    if stride <= 0 {
        return Err(Error::InvalidStride(stride));
    }
    if patch_h == 0 || patch_w == 0 || patch_h > image_h || patch_w > image_w {
        return Err(Error::PatchLargerThanImage {
            patch_h,
            patch_w,
            image_h,
            image_w,
        });
    }
    let s = stride as usize;
    let padded_h = padded(image_h, patch_h, s);
    let padded_w = padded(image_w, patch_w, s);
    Ok(PatchGrid {
        image_h,
        image_w,
        patch_h,
        patch_w,
        stride: s,
        padded_h,
        padded_w,
        rows: (padded_h - patch_h) / s + 1,
        cols: (padded_w - patch_w) / s + 1,
    })
}

/// Cuts every grid patch from the zero-padded image, row-major, scaled to `[0, 1]`.
pub fn extract_test_patches(image: &Raster, grid: &PatchGrid) -> Result<Tensor<f32>> {
    image.require_channels(1)?;
    if (image.height(), image.width()) != (grid.image_h, grid.image_w) {
        return Err(Error::DimensionMismatch(format!(
            "grid built for {}x{}, image is {}x{}",
            grid.image_w,
            grid.image_h,
            image.width(),
            image.height()
        )));
    }
    let (ph, pw) = (grid.patch_h, grid.patch_w);
    let mut data = Vec::with_capacity(grid.count() * ph * pw);
    for i in 0..grid.count() {
        let (top, left) = grid.origin(i);
        for r in top..top + ph {
            for c in left..left + pw {
                let v = if r < image.height() && c < image.width() {
                    image.get(r, c, 0) as f32 / 255.0
                } else {
                    0.0
                };
                data.push(v);
            }
        }
    }
    Tensor::from_vec([grid.count(), 1, ph, pw], data)
}

/// Whole-image vessel probabilities, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl ProbabilityMap {
    /// `round(255·p)` as an 8-bit image.
    pub fn to_raster(&self) -> Raster {
        Raster::new(
            self.width,
            self.height,
            1,
            self.data.iter().map(|&p| quantize_u8(255.0 * p as f64)).collect(),
        )
        .unwrap()
    }

    /// 255 where `p ≥ threshold`, else 0.
    pub fn binarize(&self, threshold: f32) -> Raster {
        Raster::new(
            self.width,
            self.height,
            1,
            self.data.iter().map(|&p| if p >= threshold { 255 } else { 0 }).collect(),
        )
        .unwrap()
    }
}

/// Mean of overlapping patch predictions over the padded image (not cropped).
pub fn stitch_padded(probs: &Tensor<f32>, grid: &PatchGrid) -> Result<ProbabilityMap> {
    let [n, c, h, w] = probs.shape();
    if n != grid.count() || c != 1 || (h, w) != (grid.patch_h, grid.patch_w) {
        return Err(Error::ShapeMismatch(format!(
            "{:?} predictions for a {}x{} grid of {}x{} patches",
            probs.shape(),
            grid.rows,
            grid.cols,
            grid.patch_h,
            grid.patch_w
        )));
    }
    let (ph, pw) = (grid.padded_h, grid.padded_w);
    let mut sum = vec![0.0f64; ph * pw];
    let mut count = vec![0u32; ph * pw];
    for i in 0..n {
        let (top, left) = grid.origin(i);
        let item = probs.item(i);
        for r in 0..h {
            let base = (top + r) * pw + left;
            for (col, &p) in item[r * w..(r + 1) * w].iter().enumerate() {
                sum[base + col] += p as f64;
                count[base + col] += 1;
            }
        }
    }
    let mut data = Vec::with_capacity(ph * pw);
    for (i, (&s, &k)) in sum.iter().zip(&count).enumerate() {
        if k == 0 {
            return Err(Error::CountZero { row: i / pw, col: i % pw });
        }
        data.push((s / k as f64) as f32);
    }
    Ok(ProbabilityMap {
        width: pw,
        height: ph,
        data,
    })
}

/// Averages overlapping predictions and crops to the original image.
pub fn stitch(probs: &Tensor<f32>, grid: &PatchGrid) -> Result<ProbabilityMap> {
    let full = stitch_padded(probs, grid)?;
    let mut data = Vec::with_capacity(grid.image_h * grid.image_w);
    for r in 0..grid.image_h {
        data.extend_from_slice(&full.data[r * full.width..][..grid.image_w]);
    }
    Ok(ProbabilityMap {
        width: grid.image_w,
        height: grid.image_h,
        data,
    })
}

const VFPS_MAGIC: &[u8; 4] = b"VFPS";
const VFPS_VERSION: u32 = 1;

/// `VFPS` layout (little-endian): magic, version `u32`, n/h/w `u32`, patches `f32`,
/// labels `u8`, origins as `u32` triplets `(image_id, top, left)`.
pub fn encode_patch_set(set: &PatchSet) -> Result<Vec<u8>> {
    let (h, w) = set.patch_dims();
    let to_u32 = |v: usize| u32::try_from(v).map_err(|_| Error::format("VFPS patch", "count exceeds u32"));
    let mut out = Vec::with_capacity(20 + set.patches.len() * 5 + set.len() * 12);
    out.extend_from_slice(VFPS_MAGIC);
    out.extend_from_slice(&VFPS_VERSION.to_le_bytes());
    for v in [set.len(), h, w] {
        out.extend_from_slice(&to_u32(v)?.to_le_bytes());
    }
    for v in set.patches.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&set.labels);
    for o in &set.origins {
        for v in [o.image_id, o.top, o.left] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_patch_set(bytes: &[u8]) -> Result<PatchSet> {
    let mut r = ByteReader::new(bytes, "VFPS patch");
    if r.take(4)? != VFPS_MAGIC {
        return Err(Error::format("VFPS patch", "bad magic"));
    }
    let version = r.u32()?;
    if version != VFPS_VERSION {
        return Err(Error::format("VFPS patch", format!("unsupported version {version}")));
    }
    let (n, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let values = n
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::format("VFPS patch", "size overflow"))?;
    let patches = r.f32_vec(values)?;
    let labels = r.take(values)?.to_vec();
    let origins = (0..n)
        .map(|_| {
            Ok(Origin {
                image_id: r.u32()?,
                top: r.u32()?,
                left: r.u32()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    PatchSet::new(Tensor::from_vec([n, 1, h, w], patches)?, labels, origins)
}

pub fn save_patch_set(set: &PatchSet, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_patch_set(set)?)
}

pub fn load_patch_set(path: impl AsRef<Path>) -> Result<PatchSet> {
    decode_patch_set(&read_file(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(w: usize, h: usize) -> Raster {
        Raster::from_fn(w, h, |r, c| ((r * 13 + c * 7) % 256) as u8)
    }

    #[test]
    fn drive_grid() {
        let g = make_test_grid(584, 565, 48, 48, 5).unwrap();
        assert_eq!((g.padded_h, g.padded_w, g.rows, g.cols, g.count()), (588, 568, 109, 105, 11445));
    }

    #[test]
    fn small_grids() {
        let g = make_test_grid(48, 48, 48, 48, 5).unwrap();
        assert_eq!((g.rows, g.cols, g.padded_h, g.padded_w), (1, 1, 48, 48));
        let g = make_test_grid(53, 48, 48, 48, 5).unwrap();
        assert_eq!((g.rows, g.cols), (2, 1));
        assert!(matches!(make_test_grid(50, 50, 48, 48, 0), Err(Error::InvalidStride(0))));
        assert!(matches!(make_test_grid(50, 50, 48, 48, -3), Err(Error::InvalidStride(-3))));
        assert!(matches!(make_test_grid(40, 50, 48, 48, 5), Err(Error::PatchLargerThanImage { .. })));
    }

    #[test]
    fn extract_order_and_padding() {
        let img = ramp(53, 50);
        let grid = make_test_grid(50, 53, 48, 48, 5).unwrap();
        let patches = extract_test_patches(&img, &grid).unwrap();
        assert_eq!(patches.shape(), [grid.count(), 1, 48, 48]);
        for r in 0..48 {
            for c in 0..48 {
                assert_eq!(patches.at([0, 0, r, c]), img.get(r, c, 0) as f32 / 255.0);
            }
        }
        let white = Raster::filled(50, 50, 1, 255).unwrap();
        let grid = make_test_grid(50, 50, 48, 48, 5).unwrap();
        let p = extract_test_patches(&white, &grid).unwrap();
        // last patch starts at 5; its rows/cols >= 45 fall into padding
        let last = grid.count() - 1;
        assert_eq!(p.at([last, 0, 44, 44]), 1.0);
        assert_eq!(p.at([last, 0, 45, 10]), 0.0);
        assert!(extract_test_patches(&ramp(20, 20), &grid).is_err());
    }

    #[test]
    fn stitch_single_and_overlap() {
        let grid = make_test_grid(4, 4, 4, 4, 1).unwrap();
        let probs = Tensor::from_fn([1, 1, 4, 4], |[_, _, r, c]| (r * 4 + c) as f32 / 16.0);
        assert_eq!(stitch(&probs, &grid).unwrap().data, probs.data());

        let grid = make_test_grid(4, 6, 4, 4, 2).unwrap();
        assert_eq!(grid.count(), 2);
        let mut data = vec![0.2f32; 16];
        data.extend(vec![0.4f32; 16]);
        let map = stitch(&Tensor::from_vec([2, 1, 4, 4], data).unwrap(), &grid).unwrap();
        assert!((map.data[0] - 0.2).abs() < 1e-7);
        assert!((map.data[2] - 0.3).abs() < 1e-7);
        assert!((map.data[5] - 0.4).abs() < 1e-7);
        assert!(stitch(&Tensor::zeros([3, 1, 4, 4]), &grid).is_err());
    }

    #[test]
    fn drive_grid_interior_counts() {
        let grid = make_test_grid(584, 565, 48, 48, 5).unwrap();
        let ones = Tensor::filled([grid.count(), 1, 48, 48], 1.0f32);
        // counts via brute-force accumulation of coverage
        let mut count = vec![0u32; grid.padded_h * grid.padded_w];
        for i in 0..grid.count() {
            let (t, l) = grid.origin(i);
            for r in t..t + 48 {
                for c in l..l + 48 {
                    count[r * grid.padded_w + c] += 1;
                }
            }
        }
        assert_eq!(count[300 * grid.padded_w + 300], 100);
        assert!(count.iter().all(|&k| k >= 1));
        let map = stitch(&ones, &grid).unwrap();
        assert!(map.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn sampling_rules() {
        let img = ramp(60, 50);
        let gt = FovMask::new(60, 50, (0..3000).map(|i| (i % 7 == 0) as u8).collect()).unwrap();
        let mut mask_data = vec![0u8; 3000];
        for r in 20..30 {
            for c in 25..35 {
                mask_data[r * 60 + c] = 1;
            }
        }
        let mask = FovMask::new(60, 50, mask_data).unwrap();
        let a = sample_train_patches(&img, &mask, &gt, 200, 16, 9, 21).unwrap();
        let b = sample_train_patches(&img, &mask, &gt, 200, 16, 9, 21).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.patches().shape(), [200, 1, 16, 16]);
        for (i, o) in a.origins().iter().enumerate() {
            let (t, l) = (o.top as usize, o.left as usize);
            assert!(mask.get(t + 8, l + 8));
            assert!(t + 16 <= 50 && l + 16 <= 60);
            assert_eq!(o.image_id, 21);
            assert_eq!(a.patches().at([i, 0, 3, 4]), img.get(t + 3, l + 4, 0) as f32 / 255.0);
            assert_eq!(a.labels()[i * 256 + 3 * 16 + 4], gt.data()[(t + 3) * 60 + l + 4]);
        }
        let empty = FovMask::new(60, 50, vec![0; 3000]).unwrap();
        assert!(matches!(sample_train_patches(&img, &empty, &gt, 5, 16, 0, 0), Err(Error::EmptyFov)));
        let small = FovMask::full(10, 10);
        assert!(sample_train_patches(&img, &small, &gt, 5, 16, 0, 0).is_err());
    }

    #[test]
    fn vfps_round_trip_and_corruption() {
        let img = ramp(30, 30);
        let full = FovMask::full(30, 30);
        let set = sample_train_patches(&img, &full, &full, 7, 8, 1, 3).unwrap();
        let bytes = encode_patch_set(&set).unwrap();
        assert_eq!(&bytes[..4], b"VFPS");
        assert_eq!(bytes.len(), 20 + 7 * 64 * 5 + 7 * 12);
        assert_eq!(decode_patch_set(&bytes).unwrap(), set);
        assert!(decode_patch_set(&bytes[..bytes.len() - 2]).is_err());
        let mut bad = bytes.clone();
        bad[20 + 7 * 64 * 4] = 2;
        assert!(decode_patch_set(&bad).is_err());
    }

    #[test]
    fn gaps_are_reported() {
        let grid = make_test_grid(10, 10, 4, 4, 6).unwrap();
        let probs = Tensor::filled([grid.count(), 1, 4, 4], 0.5f32);
        assert!(matches!(stitch(&probs, &grid), Err(Error::CountZero { row: 0, col: 4 })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn grid_and_stitch_invariants(h in 8usize..40, w in 8usize..40, p in 1usize..8, s in 1i64..7, seed in any::<u64>()) {
            let patch = p.min(h).min(w);
            // wider strides leave uncovered pixels, which stitch rejects
            let s = s.min(patch as i64);
            let grid = make_test_grid(h, w, patch, patch, s).unwrap();
            prop_assert!(grid.padded_h >= h && grid.padded_h < h + s as usize);
            prop_assert_eq!((grid.padded_h - patch) % s as usize, 0);
            let mut st = seed;
            let img = Raster::from_fn(w, h, |_, _| { st = st.wrapping_mul(6364136223846793005).wrapping_add(1); (st >> 56) as u8 });
            let patches = extract_test_patches(&img, &grid).unwrap();
            prop_assert_eq!(patches.shape()[0], grid.rows * grid.cols);

            // identity on the padded image
            let padded = stitch_padded(&patches, &grid).unwrap();
            for r in 0..grid.padded_h {
                for c in 0..grid.padded_w {
                    let expected = if r < h && c < w { img.get(r, c, 0) as f32 / 255.0 } else { 0.0 };
                    prop_assert_eq!(padded.data[r * grid.padded_w + c], expected);
                }
            }

            let constant = Tensor::filled(patches.shape(), 0.37f32);
            prop_assert!(stitch(&constant, &grid).unwrap().data.iter().all(|&v| v == 0.37));
        }
    }
}
