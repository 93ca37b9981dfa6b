//! Fundus enhancement: grayscale, negative, white top-hat, CLAHE.
//!
//! The chain turns dark vessels on a bright, unevenly lit background into bright
//! thin ridges on a flat dark background, then stretches local contrast.

mod clahe;
mod morphology;

pub use clahe::{clahe, ClaheConfig};
pub use morphology::{dilate, erode, opening, white_tophat, SeShape, StructuringElement};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::raster::Raster;
use crate::util::quantize_u8;

/// Luma weights applied to (R, G, B).
pub const GRAY_WEIGHTS: [f64; 3] = [0.30, 0.59, 0.11];

/// `round(0.30 R + 0.59 G + 0.11 B)` per pixel, halves rounded away from zero.
pub fn to_grayscale(rgb: &Raster) -> Result<Raster> {
    rgb.require_channels(3)?;
    let data = rgb
        .data()
        .chunks_exact(3)
        .map(|px| {
            // integer weights keep exact halves (76.5 for pure red) exact
            let hundredths =
                30 * px[0] as u32 + 59 * px[1] as u32 + 11 * px[2] as u32;
            quantize_u8(((hundredths + 50) / 100) as f64)
        })
        .collect();
    Raster::new(rgb.width(), rgb.height(), 1, data)
}

pub fn negate(gray: &Raster) -> Result<Raster> {
    gray.require_channels(1)?;
    Raster::new(
        gray.width(),
        gray.height(),
        1,
        gray.data().iter().map(|&v| 255 - v).collect(),
    )
}

/// Parameters of the whole enhancement chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub se_shape: SeShape,
    pub se_radius: usize,
    pub clahe: ClaheConfig,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            se_shape: SeShape::Disk,
            se_radius: 8,
            clahe: ClaheConfig::default(),
        }
    }
}

impl PreprocessConfig {
    pub fn element(&self) -> StructuringElement {
        StructuringElement::new(self.se_shape, self.se_radius)
    }
}

/// `clahe(white_tophat(negate(to_grayscale(rgb)), se), cfg)`.
pub fn preprocess_pipeline(rgb: &Raster, se: &StructuringElement, cfg: &ClaheConfig) -> Result<Raster> {
    let gray = to_grayscale(rgb)?;
    let neg = negate(&gray)?;
    let tophat = white_tophat(&neg, se)?;
    clahe(&tophat, cfg)
}

/// Accepts either colour input (full chain) or an already-gray image (chain minus the grayscale step).
pub fn preprocess_any(img: &Raster, cfg: &PreprocessConfig) -> Result<Raster> {
    let se = cfg.element();
    if img.channels() == 3 {
        preprocess_pipeline(img, &se, &cfg.clahe)
    } else {
        clahe(&white_tophat(&negate(img)?, &se)?, &cfg.clahe)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;

    fn px(r: u8, g: u8, b: u8) -> u8 {
        to_grayscale(&Raster::new(1, 1, 3, vec![r, g, b]).unwrap()).unwrap().data()[0]
    }

    #[test]
    fn grayscale_examples() {
        assert_eq!(px(100, 100, 100), 100);
        assert_eq!(px(255, 0, 0), 77);
        assert_eq!(px(0, 255, 0), 150);
        assert_eq!(px(0, 0, 255), 28);
        assert_eq!(px(255, 255, 255), 255);
    }

    #[test]
    fn grayscale_matches_float_formula() {
        for r in (0..=255u16).step_by(17) {
            for g in (0..=255u16).step_by(15) {
                for b in (0..=255u16).step_by(51) {
                    let v = 0.30 * r as f64 + 0.59 * g as f64 + 0.11 * b as f64;
                    let got = px(r as u8, g as u8, b as u8) as f64;
                    assert!((got - v).abs() <= 0.5 + 1e-9, "{r},{g},{b}: {got} vs {v}");
                }
            }
        }
    }

    #[test]
    fn grayscale_rejects_gray_input() {
        let g = Raster::filled(2, 2, 1, 0).unwrap();
        assert!(matches!(to_grayscale(&g), Err(Error::WrongChannelCount { expected: 3, found: 1 })));
    }

    #[test]
    fn negate_examples() {
        let g = Raster::new(3, 1, 1, vec![0, 255, 100]).unwrap();
        assert_eq!(negate(&g).unwrap().data(), &[255, 0, 155]);
        let rgb = Raster::filled(1, 1, 3, 0).unwrap();
        assert!(negate(&rgb).is_err());
    }

    #[test]
    fn constant_input_gives_constant_output() {
        let rgb = Raster::filled(40, 32, 3, 123).unwrap();
        let cfg = PreprocessConfig::default();
        let out = preprocess_pipeline(&rgb, &cfg.element(), &cfg.clahe).unwrap();
        let first = out.data()[0];
        assert!(out.data().iter().all(|&v| v == first));
    }

    #[test]
    fn dark_line_becomes_bright_ridge() {
        // vessel-like dark stripe on a bright sloped background
        let w = 64;
        let h = 64;
        let mut data = Vec::new();
        for r in 0..h {
            for c in 0..w {
                let base = 150 + (c / 4) as u8;
                let v = if (30..33).contains(&r) { base - 60 } else { base };
                data.extend_from_slice(&[v, v, v]);
            }
        }
        let rgb = Raster::new(w, h, 3, data).unwrap();
        let cfg = PreprocessConfig::default();
        let out = preprocess_pipeline(&rgb, &cfg.element(), &cfg.clahe).unwrap();
        let on = out.get(31, 32, 0) as i32;
        let off = out.get(10, 32, 0) as i32;
        assert!(on > off + 50, "ridge {on} background {off}");
    }

    #[test]
    fn pipeline_is_deterministic() {
        let data: Vec<u8> = (0..48 * 40 * 3).map(|i| ((i * 37) % 256) as u8).collect();
        let rgb = Raster::new(48, 40, 3, data).unwrap();
        let cfg = PreprocessConfig::default();
        let a = preprocess_pipeline(&rgb, &cfg.element(), &cfg.clahe).unwrap();
        let b = preprocess_pipeline(&rgb, &cfg.element(), &cfg.clahe).unwrap();
        assert_eq!(a, b);
    }
}
