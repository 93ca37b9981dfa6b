//! Grayscale erosion, dilation, opening and white top-hat.
//!
//! A structuring element is decomposed into horizontal runs, one per row
//! offset. Each distinct run is evaluated for a whole image row with the
//! van Herk / Gil-Werman running extremum (three comparisons per pixel,
//! independent of run length), then the rows are combined vertically.
//! Out-of-bounds samples take the neutral value of the operation: 255 for
//! erosion, 0 for dilation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeShape {
    Disk,
    Square,
}

impl std::str::FromStr for SeShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disk" => Ok(SeShape::Disk),
            "square" => Ok(SeShape::Square),
            other => Err(Error::Config(format!("unknown structuring element shape {other:?}"))),
        }
    }
}

/// Flat, origin-centred structuring element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructuringElement {
    offsets: Vec<(isize, isize)>,
    /// `dy -> (dx_lo, dx_hi)` contiguous runs, one per row
    runs: BTreeMap<isize, Vec<(isize, isize)>>,
}

impl StructuringElement {
    /// Disk of the given radius (`dy² + dx² ≤ r²`) or square of the given half-width.
    pub fn new(shape: SeShape, radius: usize) -> Self {
        let r = radius as isize;
        let mut offsets = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                if shape == SeShape::Square || dy * dy + dx * dx <= r * r {
                    offsets.push((dy, dx));
                }
            }
        }
        Self::build(offsets)
    }

    pub fn disk(radius: usize) -> Self {
        Self::new(SeShape::Disk, radius)
    }

    pub fn square(half_width: usize) -> Self {
        Self::new(SeShape::Square, half_width)
    }

    /// Arbitrary element; must contain the origin and be symmetric under negation.
    pub fn from_offsets(offsets: impl IntoIterator<Item = (isize, isize)>) -> Result<Self> {
        let mut offsets: Vec<_> = offsets.into_iter().collect();
        offsets.sort_unstable();
        offsets.dedup();
        if offsets.binary_search(&(0, 0)).is_err() {
            return Err(Error::InvalidElement("origin not covered".into()));
        }
        if let Some(o) = offsets.iter().find(|&&(dy, dx)| offsets.binary_search(&(-dy, -dx)).is_err()) {
            return Err(Error::InvalidElement(format!("offset {o:?} has no mirror")));
        }
        Ok(Self::build(offsets))
    }

    fn build(mut offsets: Vec<(isize, isize)>) -> Self {
        offsets.sort_unstable();
        let mut runs: BTreeMap<isize, Vec<(isize, isize)>> = BTreeMap::new();
        for &(dy, dx) in &offsets {
            let row = runs.entry(dy).or_default();
            match row.last_mut() {
                Some((_, hi)) if *hi + 1 == dx => *hi = dx,
                _ => row.push((dx, dx)),
            }
        }
        Self { offsets, runs }
    }

    pub fn offsets(&self) -> &[(isize, isize)] {
        &self.offsets
    }
}

#[derive(Clone, Copy)]
enum Extremum {
    Min,
    Max,
}

impl Extremum {
    #[inline(always)]
    fn pick(self, a: u8, b: u8) -> u8 {
        match self {
            Extremum::Min => a.min(b),
            Extremum::Max => a.max(b),
        }
    }

    fn neutral(self) -> u8 {
        match self {
            Extremum::Min => 255,
            Extremum::Max => 0,
        }
    }
}

/// For every column `c` of one row, the extremum over columns `[c + lo, c + hi]`.
fn run_extremum(row: &[u8], lo: isize, hi: isize, op: Extremum, scratch: &mut RunScratch, out: &mut [u8]) {
    let w = row.len();
    let len = (hi - lo + 1) as usize;
    let n = w + len - 1;
    let neutral = op.neutral();

    // ext[j] = row[j + lo], neutral outside the row
    let ext = &mut scratch.ext;
    ext.clear();
    ext.extend((0..n).map(|j| {
        let c = j as isize + lo;
        if c >= 0 && (c as usize) < w {
            row[c as usize]
        } else {
            neutral
        }
    }));

    // prefix extremum within each block of `len`, suffix extremum likewise
    let (fwd, bwd) = (&mut scratch.fwd, &mut scratch.bwd);
    fwd.resize(n, 0);
    bwd.resize(n, 0);
    for j in 0..n {
        fwd[j] = if j % len == 0 { ext[j] } else { op.pick(fwd[j - 1], ext[j]) };
    }
    for j in (0..n).rev() {
        bwd[j] = if j == n - 1 || (j + 1) % len == 0 {
            ext[j]
        } else {
            op.pick(bwd[j + 1], ext[j])
        };
    }
    for (c, o) in out.iter_mut().enumerate() {
        *o = op.pick(bwd[c], fwd[c + len - 1]);
    }
}

#[derive(Default)]
struct RunScratch {
    ext: Vec<u8>,
    fwd: Vec<u8>,
    bwd: Vec<u8>,
}

fn morph(gray: &Raster, se: &StructuringElement, op: Extremum) -> Result<Raster> {
    gray.require_channels(1)?;
    let (w, h) = (gray.width(), gray.height());
    let src = gray.data();
    let neutral = op.neutral();
    let mut out = vec![neutral; w * h];
    if w == 0 || h == 0 {
        return Raster::new(w, h, 1, out);
    }

    // row-run results are shared between element rows with identical runs
    let mut distinct: Vec<(isize, isize)> = se.runs.values().flatten().copied().collect();
    distinct.sort_unstable();
    distinct.dedup();

    let mut scratch = RunScratch::default();
    let mut line = vec![0u8; w];
    for (lo, hi) in distinct {
        let mut filtered = vec![0u8; w * h];
        for r in 0..h {
            run_extremum(&src[r * w..(r + 1) * w], lo, hi, op, &mut scratch, &mut line);
            filtered[r * w..(r + 1) * w].copy_from_slice(&line);
        }
        for (&dy, row_runs) in &se.runs {
            if !row_runs.contains(&(lo, hi)) {
                continue;
            }
            for r in 0..h {
                let sr = r as isize + dy;
                let dst = &mut out[r * w..(r + 1) * w];
                if sr < 0 || sr as usize >= h {
                    // the whole run lies outside: neutral, no change
                    continue;
                }
                let s = &filtered[sr as usize * w..(sr as usize + 1) * w];
                for (d, &v) in dst.iter_mut().zip(s) {
                    *d = op.pick(*d, v);
                }
            }
        }
    }
    Raster::new(w, h, 1, out)
}

/// `out(p) = min over o in se of in(p + o)`; out-of-bounds samples count as 255.
pub fn erode(gray: &Raster, se: &StructuringElement) -> Result<Raster> {
    morph(gray, se, Extremum::Min)
}

/// `out(p) = max over o in se of in(p + o)`; out-of-bounds samples count as 0.
pub fn dilate(gray: &Raster, se: &StructuringElement) -> Result<Raster> {
    morph(gray, se, Extremum::Max)
}

pub fn opening(gray: &Raster, se: &StructuringElement) -> Result<Raster> {
    dilate(&erode(gray, se)?, se)
}

/// Input minus its opening: keeps bright structures smaller than the element.
pub fn white_tophat(gray: &Raster, se: &StructuringElement) -> Result<Raster> {
    let open = opening(gray, se)?;
    let data = gray
        .data()
        .iter()
        .zip(open.data())
        .map(|(&x, &o)| {
            debug_assert!(o <= x, "opening must be anti-extensive");
            x - o
        })
        .collect();
    Raster::new(gray.width(), gray.height(), 1, data)
}
