//! Patch-wise workflow: split an image pair into rim-padded patches, pick a
//! training subset, adapt the tailor on it, run every patch and stitch the
//! trimmed cores back together.

mod adapt;
mod speedup;

pub use adapt::{adapt, infer_all, run_erft, AdaptConfig, ErftOutput, LogRow, StageTimings, TrainingLog, LOG_HEADER};
pub use speedup::{bench, bench_csv, theoretical_speedup, Arch, BenchArch, BenchRow, Phase, SpeedupQuery, BENCH_HEADER};

use rand::SeedableRng;
use rand_pcg::Pcg32;

use crate::error::{bail, Result};
use crate::raster::{ImagePair, RasterImage};
use crate::tensor::ops::reflect_index;
use crate::tensor::Tensor;

/// Which rim sides hold real neighbouring context (`false` = reflected).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RimValidity {
    pub top: bool,
    pub bottom: bool,
    pub left: bool,
    pub right: bool,
}

impl RimValidity {
    pub fn all(&self) -> bool {
        self.top && self.bottom && self.left && self.right
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchRecord {
    pub index: usize,
    pub row: usize,
    pub col: usize,
    /// Core top-left in PAN pixels.
    pub pan_origin: (usize, usize),
    /// Core top-left in LRMS pixels.
    pub lrms_origin: (usize, usize),
    pub rim_valid: RimValidity,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch: usize,
    pub rim: usize,
    pub ratio: usize,
    pub rows: usize,
    pub cols: usize,
    pub height: usize,
    pub width: usize,
    pub records: Vec<PatchRecord>,
}

impl PatchGrid {
    /// Grid over an `height × width` PAN at `ratio`.
    pub fn new(height: usize, width: usize, ratio: usize, patch: usize, rim: usize) -> Result<Self> {
        if patch == 0 || ratio == 0 {
            bail!(Config, "patch size and ratio must be >= 1");
        }
        if !patch.is_multiple_of(ratio) || !rim.is_multiple_of(ratio) {
            bail!(Config, "patch size {patch} and rim {rim} must be multiples of the ratio {ratio}");
        }
        if !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
            bail!(Geometry, "image {height}x{width} is not divisible by patch size {patch}");
        }
        if rim >= height || rim >= width {
            bail!(Geometry, "rim {rim} must be smaller than the image {height}x{width}");
        }
        let (rows, cols) = (height / patch, width / patch);
        let records = (0..rows * cols)
            .map(|index| {
                let (row, col) = (index / cols, index % cols);
                let rim_valid = RimValidity {
                    top: row > 0 || rim == 0,
                    bottom: row + 1 < rows || rim == 0,
                    left: col > 0 || rim == 0,
                    right: col + 1 < cols || rim == 0,
                };
                PatchRecord {
                    index,
                    row,
                    col,
                    pan_origin: (row * patch, col * patch),
                    lrms_origin: (row * patch / ratio, col * patch / ratio),
                    rim_valid,
                }
            })
            .collect();
        Ok(PatchGrid { patch, rim, ratio, rows, cols, height, width, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Side of a rim-padded patch in PAN pixels.
    pub fn padded(&self) -> usize {
        self.patch + 2 * self.rim
    }

    /// Drops the rim of a PAN-scale padded patch.
    pub fn trim(&self, padded: &Tensor) -> Result<Tensor> {
        if padded.height() != self.padded() || padded.width() != self.padded() {
            bail!(Dimension, "padded patch is {}x{}, expected {}", padded.height(), padded.width(), self.padded());
        }
        padded.crop(self.rim, self.rim, self.patch, self.patch)
    }

    /// Patches whose four rim sides are all real context.
    pub fn interior(&self) -> impl Iterator<Item = &PatchRecord> {
        self.records.iter().filter(|r| r.rim_valid.all())
    }
}

/// One rim-padded patch: `[1,1,p+2R,p+2R]` PAN and `[1,C,(p+2R)/r,(p+2R)/r]` LRMS.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPayload {
    pub index: usize,
    pub pan: Tensor,
    pub lrms: Tensor,
}

/// Window `[y0-rim, y0+size+rim)²` with reflection outside the image.
fn padded_window(image: &RasterImage, y0: usize, x0: usize, size: usize, rim: usize) -> Tensor {
    let (h, w, side) = (image.height(), image.width(), size + 2 * rim);
    let rows: Vec<usize> = (0..side).map(|i| reflect_index(y0 as isize + i as isize - rim as isize, h)).collect();
    let cols: Vec<usize> = (0..side).map(|i| reflect_index(x0 as isize + i as isize - rim as isize, w)).collect();
    let mut data = Vec::with_capacity(image.channels() * side * side);
    for c in 0..image.channels() {
        let band = image.band(c);
        for &y in &rows {
            data.extend(cols.iter().map(|&x| band[y * w + x]));
        }
    }
    Tensor::from_vec([1, image.channels(), side, side], data).expect("window shape")
}

/// Cuts `pair` into `p × p` cores with an `R`-pixel rim of real context,
/// reflected where the rim leaves the image.
pub fn split(pair: &ImagePair, patch: usize, rim: usize) -> Result<(PatchGrid, Vec<PatchPayload>)> {
    let grid = PatchGrid::new(pair.pan.height(), pair.pan.width(), pair.ratio, patch, rim)?;
    let (lp, lr) = (patch / pair.ratio, rim / pair.ratio);
    if lr >= pair.lrms.height() || lr >= pair.lrms.width() {
        bail!(Geometry, "LRMS rim {lr} must be smaller than the LRMS image");
    }
    let payloads = grid
        .records
        .iter()
        .map(|r| PatchPayload {
            index: r.index,
            pan: padded_window(&pair.pan, r.pan_origin.0, r.pan_origin.1, patch, rim),
            lrms: padded_window(&pair.lrms, r.lrms_origin.0, r.lrms_origin.1, lp, lr),
        })
        .collect();
    Ok((grid, payloads))
}

/// Tiles `cores` (one `[1,C,p,p]` tensor per grid cell, in index order).
pub fn stitch(grid: &PatchGrid, cores: &[Tensor]) -> Result<RasterImage> {
    if cores.len() != grid.len() {
        bail!(Contract, "stitch needs {} patches, got {}", grid.len(), cores.len());
    }
    let c = cores[0].channels();
    for (i, t) in cores.iter().enumerate() {
        if t.shape() != [1, c, grid.patch, grid.patch] {
            bail!(Contract, "patch {i} has shape {:?}, expected [1, {c}, {p}, {p}]", t.shape(), p = grid.patch);
        }
    }
    let (h, w, p) = (grid.height, grid.width, grid.patch);
    let mut out = RasterImage::filled(c, h, w, 0.0);
    for (rec, core) in grid.records.iter().zip(cores) {
        let (y0, x0) = rec.pan_origin;
        for b in 0..c {
            let src = core.plane(0, b);
            let dst = out.band_mut(b);
            for y in 0..p {
                dst[(y0 + y) * w + x0..(y0 + y) * w + x0 + p].copy_from_slice(&src[y * p..(y + 1) * p]);
            }
        }
    }
    Ok(out)
}

/// `M` distinct patch indices drawn uniformly without replacement by
/// PCG-XSH-RR 64/32 (`rand_pcg::Pcg32`) seeded with `seed`, ascending.
pub fn select_training(grid: &PatchGrid, m: usize, seed: u64) -> Result<Vec<usize>> {
    if m == 0 || m > grid.len() {
        bail!(Config, "cannot select {m} training patches out of {}", grid.len());
    }
    let mut rng = Pcg32::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, grid.len(), m).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Largest absolute difference between `stitched` and `reference` over
/// the cores of interior patches, or `None` when there are none.
pub fn interior_deviation(grid: &PatchGrid, stitched: &RasterImage, reference: &RasterImage) -> Option<f64> {
    let mut worst: Option<f64> = None;
    let (w, p) = (grid.width, grid.patch);
    for rec in grid.interior() {
        let (y0, x0) = rec.pan_origin;
        let mut d = 0f64;
        for b in 0..stitched.channels() {
            let (s, r) = (stitched.band(b), reference.band(b));
            for y in y0..y0 + p {
                for x in x0..x0 + p {
                    d = d.max((s[y * w + x] as f64 - r[y * w + x] as f64).abs());
                }
            }
        }
        worst = Some(worst.map_or(d, |v: f64| v.max(d)));
    }
    worst
}
