//! Sensor degradation: Gaussian MTF blur, decimation, Wald-protocol pair
//! simulation, synthetic scenes and radiometric sensor shifts.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;

use crate::error::{bail, Result};
use crate::raster::{validate_pair, ImagePair, RasterImage};
use crate::tensor::{ops, Real, Tensor};

/// Default Nyquist gain of the multispectral bands.
pub const DEFAULT_MS_GAIN: f64 = 0.30;
/// Default Nyquist gain of the panchromatic band.
pub const DEFAULT_PAN_GAIN: f64 = 0.15;

/// Row/column kept by decimation at ratio `r`.
pub fn decimation_offset(r: usize) -> usize {
    r / 2
}

/// Gaussian standard deviation whose frequency response `exp(-2π²σ²f²)`
/// equals `gain` at the low-resolution Nyquist frequency `1 / (2r)`.
pub fn mtf_sigma(ratio: usize, gain: f64) -> f64 {
    ratio as f64 / PI * (2.0 * (1.0 / gain).ln()).sqrt()
}

/// Per-band separable Gaussian blur matched to a sensor MTF.
#[derive(Clone, Debug, PartialEq)]
pub struct MtfKernel {
    ratio: usize,
    gains: Vec<f64>,
    sigmas: Vec<f64>,
    /// One normalized 1-D filter per band; the 2-D kernel is its outer product.
    taps: Vec<Vec<f64>>,
}

impl MtfKernel {
    /// `gains` holds one Nyquist gain per band; `size` overrides the default
    /// support `2*ceil(3*max σ) + 1` and must not be smaller than it.
    pub fn build(ratio: usize, gains: &[f64], size: Option<usize>) -> Result<Self> {
        if ratio < 2 {
            bail!(Config, "MTF ratio must be >= 2, got {ratio}");
        }
        if gains.is_empty() {
            bail!(Config, "MTF kernel needs at least one band gain");
        }
        if let Some(g) = gains.iter().find(|g| !(**g > 0.0 && **g < 1.0)) {
            bail!(Config, "MTF Nyquist gain must lie in (0, 1), got {g}");
        }
        let sigmas: Vec<f64> = gains.iter().map(|&g| mtf_sigma(ratio, g)).collect();
        let max_sigma = sigmas.iter().cloned().fold(0.0, f64::max);
        let min_size = 2 * (3.0 * max_sigma).ceil() as usize + 1;
        let m = size.unwrap_or(min_size);
        if m.is_multiple_of(2) || m < min_size {
            bail!(Config, "MTF kernel size {m} must be odd and >= {min_size}");
        }
        let taps = sigmas.iter().map(|&s| gaussian_taps(s, m)).collect();
        Ok(MtfKernel { ratio, gains: gains.to_vec(), sigmas, taps })
    }

    pub fn ratio(&self) -> usize {
        self.ratio
    }

    pub fn bands(&self) -> usize {
        self.taps.len()
    }

    pub fn size(&self) -> usize {
        self.taps[0].len()
    }

    pub fn gains(&self) -> &[f64] {
        &self.gains
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn taps_1d(&self, band: usize) -> &[f64] {
        &self.taps[band]
    }

    /// Full `m × m` kernel of one band, row-major.
    pub fn taps_2d(&self, band: usize) -> Vec<f64> {
        let t = &self.taps[band];
        t.iter().flat_map(|a| t.iter().map(move |b| a * b)).collect()
    }

    pub fn taps_as<T: Real>(&self) -> Arc<Vec<Vec<T>>> {
        Arc::new(self.taps.iter().map(|t| t.iter().map(|&v| T::from_f64(v)).collect()).collect())
    }

    fn check_bands(&self, channels: usize) -> Result<()> {
        if self.bands() != 1 && self.bands() != channels {
            bail!(Dimension, "MTF kernel has {} bands, image has {channels}", self.bands());
        }
        Ok(())
    }
}

/// Normalized samples of a zero-mean Gaussian on `size` integer offsets.
pub fn gaussian_taps(sigma: f64, size: usize) -> Vec<f64> {
    let rad = (size / 2) as f64;
    let raw: Vec<f64> = (0..size).map(|i| (-(i as f64 - rad).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

/// The MS and PAN MTF kernels of one sensor at one ratio.
#[derive(Clone, Debug, PartialEq)]
pub struct SensorMtf {
    pub ms: MtfKernel,
    pub pan: MtfKernel,
}

impl SensorMtf {
    pub fn new(ratio: usize, bands: usize, ms_gain: f64, pan_gain: f64) -> Result<Self> {
        Ok(SensorMtf { ms: MtfKernel::build(ratio, &vec![ms_gain; bands], None)?, pan: MtfKernel::build(ratio, &[pan_gain], None)? })
    }

    pub fn ratio(&self) -> usize {
        self.ms.ratio()
    }
}

pub fn mtf_blur_tensor<T: Real>(image: &Tensor<T>, kernel: &MtfKernel) -> Result<Tensor<T>> {
    kernel.check_bands(image.channels())?;
    ops::separable_blur(image, &kernel.taps_as::<T>())
}

/// Per-band blur with reflect boundaries.
pub fn mtf_blur(image: &RasterImage, kernel: &MtfKernel) -> Result<RasterImage> {
    RasterImage::from_tensor(mtf_blur_tensor(&image.to_tensor(), kernel)?)
}

/// Keep rows/cols congruent to `floor(r/2)` modulo `r`.
pub fn decimate(image: &RasterImage, ratio: usize) -> Result<RasterImage> {
    RasterImage::from_tensor(ops::decimate(&image.to_tensor(), ratio, decimation_offset(ratio))?)
}

/// Blur then decimate: the modelled sensor response at ratio `r`.
pub fn degrade(image: &RasterImage, kernel: &MtfKernel) -> Result<RasterImage> {
    decimate(&mtf_blur(image, kernel)?, kernel.ratio())
}

/// A reduced-resolution training/evaluation pair with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct WaldTriple {
    pub pair: ImagePair,
    pub gt: RasterImage,
}

/// Degrade a full-resolution MS/PAN acquisition by the ratio so the MS
/// image can serve as ground truth. `pan_hr` must be `r` times the size of
/// `gt_ms`.
pub fn wald_simulate(gt_ms: &RasterImage, pan_hr: &RasterImage, mtf: &SensorMtf) -> Result<WaldTriple> {
    let r = mtf.ratio();
    if pan_hr.height() != r * gt_ms.height() || pan_hr.width() != r * gt_ms.width() {
        bail!(Geometry, "PAN {}x{} is not {r}x the MS grid {}x{}", pan_hr.height(), pan_hr.width(), gt_ms.height(), gt_ms.width());
    }
    let lrms = degrade(gt_ms, &mtf.ms)?;
    let pan = degrade(pan_hr, &mtf.pan)?;
    Ok(WaldTriple { pair: validate_pair(pan, lrms, r)?, gt: gt_ms.clone() })
}

/// Per-band radiometric distortion `x <- clip(g * x^γ + o, 0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SensorShift {
    pub gain: Vec<f64>,
    pub offset: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl SensorShift {
    /// The same shift on every band.
    pub fn uniform(bands: usize, gain: f64, offset: f64, gamma: f64) -> Result<Self> {
        let s = SensorShift { gain: vec![gain; bands], offset: vec![offset; bands], gamma: vec![gamma; bands] };
        s.validate()?;
        Ok(s)
    }

    pub fn identity(bands: usize) -> Self {
        SensorShift { gain: vec![1.0; bands], offset: vec![0.0; bands], gamma: vec![1.0; bands] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gain.len() != self.offset.len() || self.gain.len() != self.gamma.len() {
            bail!(Config, "sensor shift parameter lists differ in length");
        }
        if self.gain.iter().chain(&self.gamma).any(|v| !(v.is_finite() && *v > 0.0)) {
            bail!(Config, "sensor shift gains and gammas must be positive");
        }
        if self.offset.iter().any(|v| !v.is_finite()) {
            bail!(Config, "sensor shift offsets must be finite");
        }
        Ok(())
    }
}

pub fn apply_sensor_shift(image: &RasterImage, shift: &SensorShift) -> Result<RasterImage> {
    shift.validate()?;
    if shift.gain.len() != image.channels() {
        bail!(Dimension, "sensor shift has {} bands, image has {}", shift.gain.len(), image.channels());
    }
    let mut out = image.clone();
    for b in 0..image.channels() {
        let (g, o, gamma) = (shift.gain[b], shift.offset[b], shift.gamma[b]);
        for v in out.band_mut(b) {
            let x = (*v as f64).max(0.0);
            let y = if gamma == 1.0 { g * x + o } else { g * x.powf(gamma) + o };
            *v = y.clamp(0.0, 1.0) as f32;
        }
    }
    Ok(out)
}

enum Shape2d {
    Blob { cx: f64, cy: f64, inv_two_s2: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Edge { nx: f64, ny: f64, d: f64 },
}

impl Shape2d {
    fn eval(&self, u: f64, v: f64) -> f64 {
        match *self {
            Shape2d::Blob { cx, cy, inv_two_s2 } => {
                let d2 = (u - cx).powi(2) + (v - cy).powi(2);
                (-d2 * inv_two_s2).exp()
            }
            Shape2d::Rect { x0, y0, x1, y1 } => ((x0..x1).contains(&u) && (y0..y1).contains(&v)) as u8 as f64,
            Shape2d::Edge { nx, ny, d } => (nx * u + ny * v > d) as u8 as f64,
        }
    }
}

/// Deterministic synthetic acquisition: a `bands × height × width` MS
/// ground truth and a PAN image at `ratio` times that resolution.
///
/// The scene is a sum of smooth blobs, sharp rectangles and straight
/// edges, each with a correlated per-band amplitude. The MS image is the
/// area average of the high-resolution field; the PAN is a positive band
/// mix at full resolution with a mild unsharp-mask detail boost. All
/// samples are clipped to `[0, 1]`.
pub fn synth_scene(seed: u64, bands: usize, height: usize, width: usize, ratio: usize) -> Result<(RasterImage, RasterImage)> {
    if bands == 0 || height == 0 || width == 0 || ratio == 0 {
        bail!(Config, "scene dims must be positive");
    }
    if !height.is_multiple_of(ratio) || !width.is_multiple_of(ratio) {
        bail!(Geometry, "scene {height}x{width} is not divisible by ratio {ratio}");
    }
    let mut rng = Pcg64::seed_from_u64(seed);
    let mut shapes = Vec::new();
    let mut amps: Vec<Vec<f64>> = Vec::new();
    let signature =
        |rng: &mut Pcg64, amp: f64| -> Vec<f64> { (0..bands).map(|_| amp * (1.0 + 0.35 * rng.random_range(-1.0..1.0))).collect() };
    for _ in 0..14 {
        let s: f64 = rng.random_range(0.03..0.18);
        shapes.push(Shape2d::Blob { cx: rng.random(), cy: rng.random(), inv_two_s2: 1.0 / (2.0 * s * s) });
        let a = rng.random_range(-0.25..0.35);
        amps.push(signature(&mut rng, a));
    }
    for _ in 0..12 {
        let (x0, y0): (f64, f64) = (rng.random_range(0.0..0.9), rng.random_range(0.0..0.9));
        let (w, h): (f64, f64) = (rng.random_range(0.03..0.3), rng.random_range(0.03..0.3));
        shapes.push(Shape2d::Rect { x0, y0, x1: x0 + w, y1: y0 + h });
        let a = rng.random_range(-0.2..0.3);
        amps.push(signature(&mut rng, a));
    }
    for _ in 0..2 {
        let theta: f64 = rng.random_range(0.0..2.0 * PI);
        shapes.push(Shape2d::Edge { nx: theta.cos(), ny: theta.sin(), d: rng.random_range(-0.3..0.7) });
        let a = rng.random_range(-0.15..0.15);
        amps.push(signature(&mut rng, a));
    }
    let base: Vec<f64> = (0..bands).map(|_| rng.random_range(0.25..0.4)).collect();
    let mix: Vec<f64> = (0..bands).map(|_| rng.random_range(0.5..1.5)).collect();
    let mix_sum: f64 = mix.iter().sum();

    let (hh, hw) = (height * ratio, width * ratio);
    let mut hr = vec![0f64; bands * hh * hw];
    let mut pan = vec![0f64; hh * hw];
    let mut resp = vec![0f64; shapes.len()];
    for y in 0..hh {
        let v = (y as f64 + 0.5) / hh as f64;
        for x in 0..hw {
            let u = (x as f64 + 0.5) / hw as f64;
            for (r, s) in resp.iter_mut().zip(&shapes) {
                *r = s.eval(u, v);
            }
            let mut p = 0.0;
            for b in 0..bands {
                let mut val = base[b];
                for (r, a) in resp.iter().zip(&amps) {
                    val += r * a[b];
                }
                let val = val.clamp(0.0, 1.0);
                hr[(b * hh + y) * hw + x] = val;
                p += mix[b] * val;
            }
            pan[y * hw + x] = p / mix_sum;
        }
    }

    let pan_t = Tensor::from_vec([1, 1, hh, hw], pan)?;
    let smooth = ops::separable_blur(&pan_t, &[gaussian_taps(1.0, 7)])?;
    let pan_data: Vec<f32> = pan_t.data().iter().zip(smooth.data()).map(|(&p, &s)| (p + 0.5 * (p - s)).clamp(0.0, 1.0) as f32).collect();

    let area = (ratio * ratio) as f64;
    let mut gt = vec![0f32; bands * height * width];
    for b in 0..bands {
        for y in 0..height {
            for x in 0..width {
                let mut acc = 0.0;
                for dy in 0..ratio {
                    let row = (b * hh + y * ratio + dy) * hw + x * ratio;
                    acc += hr[row..row + ratio].iter().sum::<f64>();
                }
                gt[(b * height + y) * width + x] = (acc / area) as f32;
            }
        }
    }
    Ok((RasterImage::new(bands, height, width, gt)?, RasterImage::new(1, hh, hw, pan_data)?))
}
