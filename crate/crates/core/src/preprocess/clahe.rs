//! Contrast-limited adaptive histogram equalization.
//!
//! The image is cut into a `tiles_x × tiles_y` grid (tile edges at
//! `i·W/tiles_x`). Each tile gets a 256-bin histogram, clipped at
//! `clip_limit · tile_pixels / 256`; the clipped excess is spread evenly over
//! all bins in a single pass. The tile mapping is
//! `m(v) = round(255 · (cdf(v) − cdf_min) / (tile_pixels − cdf_min))` with
//! `cdf_min` the cumulative count at the darkest intensity present in the
//! tile. A tile holding a single intensity maps to identity. Output pixels
//! blend the four nearest tile mappings bilinearly between tile centres;
//! beyond the outermost centres the edge tiles extend.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::util::quantize_u8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClaheConfig {
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub clip_limit: f64,
}

impl Default for ClaheConfig {
    fn default() -> Self {
        Self {
            tiles_x: 8,
            tiles_y: 8,
            clip_limit: 2.0,
        }
    }
}

impl ClaheConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tiles_x == 0 || self.tiles_y == 0 {
            return Err(Error::DegenerateTiling(format!(
                "{}x{} tiles",
                self.tiles_x, self.tiles_y
            )));
        }
        if self.clip_limit.is_nan() || self.clip_limit < 1.0 {
            return Err(Error::Config(format!("CLAHE clip limit {} < 1", self.clip_limit)));
        }
        Ok(())
    }
}

fn tile_bounds(len: usize, tiles: usize, i: usize) -> (usize, usize) {
    (i * len / tiles, (i + 1) * len / tiles)
}

/// Mapping table for one tile.
fn tile_mapping(hist: &[u32; 256], pixels: usize, clip_limit: f64) -> [f64; 256] {
    let mut identity = [0.0; 256];
    for (v, m) in identity.iter_mut().enumerate() {
        *m = v as f64;
    }
    let Some(lowest) = hist.iter().position(|&c| c > 0) else {
        return identity;
    };
    if hist[lowest] as usize == pixels {
        return identity;
    }

    let limit = clip_limit * pixels as f64 / 256.0;
    let mut clipped = [0.0f64; 256];
    let mut excess = 0.0;
    for (c, &h) in clipped.iter_mut().zip(hist) {
        let h = h as f64;
        if h > limit {
            excess += h - limit;
            *c = limit;
        } else {
            *c = h;
        }
    }
    let share = excess / 256.0;

    let mut cdf = [0.0f64; 256];
    let mut acc = 0.0;
    for (v, c) in clipped.iter().enumerate() {
        acc += c + share;
        cdf[v] = acc;
    }
    let cdf_min = cdf[lowest];
    let total = pixels as f64;
    if total - cdf_min <= 0.0 {
        return identity;
    }
    let mut map = [0.0f64; 256];
    for (m, &c) in map.iter_mut().zip(&cdf) {
        *m = (255.0 * (c - cdf_min) / (total - cdf_min)).round().clamp(0.0, 255.0);
    }
    map
}

/// Interpolation anchors along one axis: for each coordinate, the two tiles and the weight of the second.
fn axis_weights(len: usize, tiles: usize) -> Vec<(usize, usize, f64)> {
    let centres: Vec<f64> = (0..tiles)
        .map(|i| {
            let (a, b) = tile_bounds(len, tiles, i);
            (a + b) as f64 / 2.0 - 0.5
        })
        .collect();
    (0..len)
        .map(|x| {
            let x = x as f64;
            if x <= centres[0] {
                return (0, 0, 0.0);
            }
            if x >= centres[tiles - 1] {
                return (tiles - 1, tiles - 1, 0.0);
            }
            let i = centres.partition_point(|&c| c <= x) - 1;
            let t = (x - centres[i]) / (centres[i + 1] - centres[i]);
            (i, i + 1, t)
        })
        .collect()
}

pub fn clahe(gray: &Raster, cfg: &ClaheConfig) -> Result<Raster> {
    gray.require_channels(1)?;
    cfg.validate()?;
    let (w, h) = (gray.width(), gray.height());
    if w < cfg.tiles_x || h < cfg.tiles_y {
        return Err(Error::DegenerateTiling(format!(
            "{w}x{h} image cannot hold {}x{} tiles",
            cfg.tiles_x, cfg.tiles_y
        )));
    }
    let src = gray.data();

    let maps: Vec<[f64; 256]> = (0..cfg.tiles_x * cfg.tiles_y)
        .into_par_iter()
        .map(|t| {
            let (ty, tx) = (t / cfg.tiles_x, t % cfg.tiles_x);
            let (y0, y1) = tile_bounds(h, cfg.tiles_y, ty);
            let (x0, x1) = tile_bounds(w, cfg.tiles_x, tx);
            let mut hist = [0u32; 256];
            for row in src[y0 * w..y1 * w].chunks_exact(w) {
                for &v in &row[x0..x1] {
                    hist[v as usize] += 1;
                }
            }
            tile_mapping(&hist, (y1 - y0) * (x1 - x0), cfg.clip_limit)
        })
        .collect();

    let wx = axis_weights(w, cfg.tiles_x);
    let wy = axis_weights(h, cfg.tiles_y);
    let mut out = vec![0u8; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(r, dst)| {
        let (ya, yb, ty) = wy[r];
        for (c, d) in dst.iter_mut().enumerate() {
            let (xa, xb, tx) = wx[c];
            let v = src[r * w + c] as usize;
            let m = |yi: usize, xi: usize| maps[yi * cfg.tiles_x + xi][v];
            let top = m(ya, xa) * (1.0 - tx) + m(ya, xb) * tx;
            let bottom = m(yb, xa) * (1.0 - tx) + m(yb, xb) * tx;
            *d = quantize_u8(top * (1.0 - ty) + bottom * ty);
        }
    });
    Raster::new(w, h, 1, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg_image(w: usize, h: usize, seed: u64) -> Raster {
        let mut s = seed;
        Raster::from_fn(w, h, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 56) as u8
        })
    }

    /// Plain global histogram equalization written out directly.
    fn plain_equalization(img: &Raster) -> Raster {
        let n = img.data().len() as f64;
        let mut counts = [0f64; 256];
        for &v in img.data() {
            counts[v as usize] += 1.0;
        }
        let cdf = |v: u8| counts[..=v as usize].iter().sum::<f64>();
        let lowest = *img.data().iter().min().unwrap();
        let cdf_min = cdf(lowest);
        Raster::from_fn(img.width(), img.height(), |r, c| {
            let v = img.get(r, c, 0);
            (255.0 * (cdf(v) - cdf_min) / (n - cdf_min)).round() as u8
        })
    }

    #[test]
    fn constant_image_unchanged() {
        for v in [0, 17, 128, 255] {
            let img = Raster::filled(33, 20, 1, v).unwrap();
            assert_eq!(clahe(&img, &ClaheConfig::default()).unwrap(), img);
        }
    }

    #[test]
    fn two_level_matches_plain_equalization() {
        let img = Raster::from_fn(16, 16, |r, c| if (r * 7 + c * 3) % 5 < 2 { 50 } else { 200 });
        let cfg = ClaheConfig {
            tiles_x: 1,
            tiles_y: 1,
            clip_limit: 1000.0,
        };
        let out = clahe(&img, &cfg).unwrap();
        assert_eq!(out, plain_equalization(&img));
        assert!(out.data().iter().all(|&v| v == 0 || v == 255));
    }

    #[test]
    fn random_single_tile_matches_plain_equalization() {
        let cfg = ClaheConfig {
            tiles_x: 1,
            tiles_y: 1,
            clip_limit: 1e6,
        };
        for seed in 0..5 {
            let img = lcg_image(20, 13, seed);
            assert_eq!(clahe(&img, &cfg).unwrap(), plain_equalization(&img));
        }
    }

    #[test]
    fn deterministic_and_clip_reduces_stretch() {
        let img = Raster::from_fn(64, 64, |r, c| (100 + (r + c) % 8) as u8);
        let cfg = ClaheConfig::default();
        let a = clahe(&img, &cfg).unwrap();
        assert_eq!(a, clahe(&img, &cfg).unwrap());
        let loose = clahe(&img, &ClaheConfig { clip_limit: 100.0, ..cfg }).unwrap();
        let spread = |r: &Raster| {
            let d = r.data();
            *d.iter().max().unwrap() as i32 - *d.iter().min().unwrap() as i32
        };
        assert!(spread(&a) < spread(&loose));
    }

    #[test]
    fn uneven_tiles_and_interpolation_continuity() {
        let img = Raster::from_fn(61, 47, |r, c| ((r * 3 + c * 5) % 256) as u8);
        let out = clahe(&img, &ClaheConfig { tiles_x: 7, tiles_y: 5, clip_limit: 3.0 }).unwrap();
        assert_eq!((out.width(), out.height()), (61, 47));
    }

    #[test]
    fn degenerate_tiling() {
        let img = Raster::filled(4, 4, 1, 0).unwrap();
        assert!(matches!(clahe(&img, &ClaheConfig::default()), Err(Error::DegenerateTiling(_))));
        let zero = ClaheConfig { tiles_x: 0, ..Default::default() };
        assert!(matches!(clahe(&img, &zero), Err(Error::DegenerateTiling(_))));
        let bad_clip = ClaheConfig { tiles_x: 1, tiles_y: 1, clip_limit: 0.5 };
        assert!(clahe(&img, &bad_clip).is_err());
    }

    #[test]
    fn axis_weights_partition_unity() {
        for (len, tiles) in [(10, 1), (10, 3), (565, 8), (8, 8)] {
            for (a, b, t) in axis_weights(len, tiles) {
                assert!(a <= b && b < tiles && (0.0..=1.0).contains(&t));
            }
        }
    }
}
