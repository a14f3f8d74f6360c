//! Fusion quality metrics.
//!
//! No-reference (full resolution): `D_λ`, `D_s`, HQNR.
//! Reference (reduced resolution): SAM, ERGAS, sCC, Q2n.

pub mod hypercomplex;

use std::fmt::Write as _;

use crate::degrade::{degrade, MtfKernel, SensorMtf};
use crate::error::{bail, ErftError, Result};
use crate::raster::{ImagePair, RasterImage};
use crate::tensor::{ops, PadMode, Tensor};

use hypercomplex::{conj, dimension_for, mul, norm, MAX_DIM};

/// Windows whose contrast denominator `σ₁² + σ₂²` falls below this are
/// skipped; when only the luminance denominator `|μ₁|² + |μ₂|²` does, the
/// luminance factor is taken as 1.
pub const DEGENERATE_EPS: f64 = 1e-12;

/// `4 c m / (v l)` split into contrast·correlation and luminance factors.
fn q_window(cov_m: f64, v: f64, lum_num: f64, l: f64) -> Option<f64> {
    if v < DEGENERATE_EPS {
        None
    } else if l < DEGENERATE_EPS {
        Some(2.0 * cov_m / v)
    } else {
        Some(2.0 * cov_m / v * (2.0 * lum_num / l))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub size: usize,
    pub stride: usize,
}

impl Default for Window {
    fn default() -> Self {
        Window { size: 32, stride: 32 }
    }
}

impl Window {
    fn origins(&self, h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
        if self.size == 0 || self.stride == 0 {
            bail!(Config, "metric window and stride must be >= 1");
        }
        if self.size > h || self.size > w {
            bail!(Dimension, "metric window {} exceeds the {h}x{w} image", self.size);
        }
        let ys = (0..=h - self.size).step_by(self.stride);
        Ok(ys.flat_map(|y| (0..=w - self.size).step_by(self.stride).map(move |x| (y, x))).collect())
    }
}

fn same_shape(a: &RasterImage, b: &RasterImage, what: &str) -> Result<()> {
    if (a.channels(), a.height(), a.width()) != (b.channels(), b.height(), b.width()) {
        bail!(Dimension, "{what}: {}x{}x{} vs {}x{}x{}", a.channels(), a.height(), a.width(), b.channels(), b.height(), b.width());
    }
    Ok(())
}

/// Universal image quality index of two single-band planes, averaged over
/// windows with population moments.
pub fn q_index(a: &[f32], b: &[f32], height: usize, width: usize, window: Window) -> Result<f64> {
    if a.len() != height * width || b.len() != height * width {
        bail!(Dimension, "q_index planes must both hold {height}x{width} samples");
    }
    let mut sum = 0.0;
    let mut used = 0usize;
    let n = (window.size * window.size) as f64;
    for (y0, x0) in window.origins(height, width)? {
        let (mut ma, mut mb) = (0.0, 0.0);
        for y in y0..y0 + window.size {
            for x in x0..x0 + window.size {
                ma += a[y * width + x] as f64;
                mb += b[y * width + x] as f64;
            }
        }
        ma /= n;
        mb /= n;
        let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
        for y in y0..y0 + window.size {
            for x in x0..x0 + window.size {
                let da = a[y * width + x] as f64 - ma;
                let db = b[y * width + x] as f64 - mb;
                va += da * da;
                vb += db * db;
                cov += da * db;
            }
        }
        let (va, vb, cov) = (va / n, vb / n, cov / n);
        if let Some(q) = q_window(cov, va + vb, ma * mb, ma * ma + mb * mb) {
            sum += q;
            used += 1;
        }
    }
    if used == 0 {
        return Err(ErftError::MetricUndefined("every Q window is degenerate".into()));
    }
    Ok(sum / used as f64)
}

/// Hypercomplex quality index Q2n for up to eight bands. Each window
/// contributes `4 |σ₁₂| |μ₁| |μ₂| / ((σ₁² + σ₂²)(|μ₁|² + |μ₂|²))` with
/// `σ₁₂ = mean((z₁ − μ₁)·conj(z₂ − μ₂))`.
pub fn q2n(a: &RasterImage, b: &RasterImage, window: Window) -> Result<f64> {
    same_shape(a, b, "q2n")?;
    let c = a.channels();
    if c > MAX_DIM {
        bail!(Config, "q2n supports at most {MAX_DIM} bands, got {c}");
    }
    let d = dimension_for(c);
    let (h, w) = (a.height(), a.width());
    let n = (window.size * window.size) as f64;
    let pixel = |img: &RasterImage, y: usize, x: usize| {
        let mut z = [0.0; MAX_DIM];
        for (k, v) in z.iter_mut().take(c).enumerate() {
            *v = img.band(k)[y * w + x] as f64;
        }
        z
    };
    let mut sum = 0.0;
    let mut used = 0usize;
    for (y0, x0) in window.origins(h, w)? {
        let (mut m1, mut m2) = ([0.0; MAX_DIM], [0.0; MAX_DIM]);
        for y in y0..y0 + window.size {
            for x in x0..x0 + window.size {
                let (p, q) = (pixel(a, y, x), pixel(b, y, x));
                for k in 0..d {
                    m1[k] += p[k];
                    m2[k] += q[k];
                }
            }
        }
        for k in 0..d {
            m1[k] /= n;
            m2[k] /= n;
        }
        let (mut v1, mut v2) = (0.0, 0.0);
        let mut cov = [0.0; MAX_DIM];
        let (mut conj2, mut prod) = ([0.0; MAX_DIM], [0.0; MAX_DIM]);
        for y in y0..y0 + window.size {
            for x in x0..x0 + window.size {
                let (mut p, mut q) = (pixel(a, y, x), pixel(b, y, x));
                for k in 0..d {
                    p[k] -= m1[k];
                    q[k] -= m2[k];
                }
                v1 += norm(&p[..d]).powi(2);
                v2 += norm(&q[..d]).powi(2);
                conj(&q[..d], &mut conj2[..d]);
                mul(&p[..d], &conj2[..d], &mut prod[..d]);
                for k in 0..d {
                    cov[k] += prod[k];
                }
            }
        }
        let (v1, v2) = (v1 / n, v2 / n);
        let (n1, n2) = (norm(&m1[..d]), norm(&m2[..d]));
        let cov_norm = norm(&cov[..d]) / n;
        if let Some(q) = q_window(cov_norm, v1 + v2, n1 * n2, n1 * n1 + n2 * n2) {
            sum += q;
            used += 1;
        }
    }
    if used == 0 {
        return Err(ErftError::MetricUndefined("every Q2n window is degenerate".into()));
    }
    Ok(sum / used as f64)
}

/// `1 − Q2n(degrade(fused), lrms)`, clamped to `[0, 1]`.
pub fn d_lambda(fused: &RasterImage, lrms: &RasterImage, kernel: &MtfKernel, window: Window) -> Result<f64> {
    let low = degrade(fused, kernel)?;
    Ok((1.0 - q2n(&low, lrms, window)?).clamp(0.0, 1.0))
}

/// `(1/C) Σ_b |Q(fused_b, P) − Q(lrms_b, P_L)|` with `P_L = degrade(P)`,
/// clamped to `[0, 1]`.
pub fn d_s(fused: &RasterImage, lrms: &RasterImage, pan: &RasterImage, pan_kernel: &MtfKernel, window: Window) -> Result<f64> {
    if pan.channels() != 1 || (pan.height(), pan.width()) != (fused.height(), fused.width()) {
        bail!(Dimension, "PAN must be one band the size of the fused image");
    }
    if lrms.channels() != fused.channels() {
        bail!(Dimension, "fused has {} bands, LRMS has {}", fused.channels(), lrms.channels());
    }
    let pan_low = degrade(pan, pan_kernel)?;
    if (pan_low.height(), pan_low.width()) != (lrms.height(), lrms.width()) {
        bail!(Geometry, "degraded PAN {}x{} does not match LRMS {}x{}", pan_low.height(), pan_low.width(), lrms.height(), lrms.width());
    }
    let mut acc = 0.0;
    for b in 0..fused.channels() {
        let high = q_index(fused.band(b), pan.band(0), fused.height(), fused.width(), window)?;
        let low = q_index(lrms.band(b), pan_low.band(0), lrms.height(), lrms.width(), window)?;
        acc += (high - low).abs();
    }
    Ok((acc / fused.channels() as f64).clamp(0.0, 1.0))
}

/// `(1 − D_λ)(1 − D_s)`.
pub fn hqnr(d_lambda: f64, d_s: f64) -> Result<f64> {
    for (name, v) in [("D_lambda", d_lambda), ("D_s", d_s)] {
        if !(0.0..=1.0).contains(&v) {
            bail!(Validation, "{name} must lie in [0, 1], got {v}");
        }
    }
    Ok((1.0 - d_lambda) * (1.0 - d_s))
}

/// Mean spectral angle in degrees; pixels with a zero-norm vector are skipped.
pub fn sam(fused: &RasterImage, gt: &RasterImage) -> Result<f64> {
    same_shape(fused, gt, "sam")?;
    let hw = fused.height() * fused.width();
    let c = fused.channels();
    let (mut sum, mut used) = (0.0, 0usize);
    let (mut x, mut y) = (vec![0.0; c], vec![0.0; c]);
    for i in 0..hw {
        for b in 0..c {
            x[b] = fused.band(b)[i] as f64;
            y[b] = gt.band(b)[i] as f64;
        }
        let (na, nb) = (norm(&x), norm(&y));
        if na < DEGENERATE_EPS || nb < DEGENERATE_EPS {
            continue;
        }
        // 2·atan2(|x̂ − ŷ|, |x̂ + ŷ|) stays accurate near 0 and π
        let (mut d, mut s) = (0.0, 0.0);
        for b in 0..c {
            let (u, v) = (x[b] / na, y[b] / nb);
            d += (u - v) * (u - v);
            s += (u + v) * (u + v);
        }
        sum += 2.0 * d.sqrt().atan2(s.sqrt());
        used += 1;
    }
    if used == 0 {
        return Err(ErftError::MetricUndefined("SAM: every pixel has a zero vector".into()));
    }
    Ok((sum / used as f64).to_degrees())
}

/// `100/r · sqrt(mean_b RMSE_b² / μ_b²)` with `μ_b` the GT band mean.
pub fn ergas(fused: &RasterImage, gt: &RasterImage, ratio: usize) -> Result<f64> {
    same_shape(fused, gt, "ergas")?;
    if ratio == 0 {
        bail!(Config, "ERGAS ratio must be >= 1");
    }
    let n = (fused.height() * fused.width()) as f64;
    let mut acc = 0.0;
    for b in 0..fused.channels() {
        let mse = fused.band(b).iter().zip(gt.band(b)).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>() / n;
        let mu = gt.band(b).iter().map(|v| *v as f64).sum::<f64>() / n;
        if mu.abs() < DEGENERATE_EPS {
            return Err(ErftError::MetricUndefined(format!("ERGAS: band {b} of the reference has zero mean")));
        }
        acc += mse / (mu * mu);
    }
    Ok(100.0 / ratio as f64 * (acc / fused.channels() as f64).sqrt())
}

fn laplacian(image: &RasterImage) -> Result<Tensor<f64>> {
    let c = image.channels();
    let mut k = vec![0.0; c * c * 9];
    for b in 0..c {
        let base = (b * c + b) * 9;
        for (t, v) in k[base..base + 9].iter_mut().enumerate() {
            *v = if t == 4 { 8.0 } else { -1.0 };
        }
    }
    let kernel = Tensor::from_vec([c, c, 3, 3], k)?;
    ops::conv2d(&image.to_tensor().cast::<f64>(), &kernel, None, PadMode::Reflect)
}

/// Pearson correlation of Laplacian high-pass responses pooled over all
/// bands and pixels.
pub fn scc(fused: &RasterImage, gt: &RasterImage) -> Result<f64> {
    same_shape(fused, gt, "scc")?;
    let (a, b) = (laplacian(fused)?, laplacian(gt)?);
    let n = a.len() as f64;
    let ma = a.data().iter().sum::<f64>() / n;
    let mb = b.data().iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.data().iter().zip(b.data()) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa < DEGENERATE_EPS || sbb < DEGENERATE_EPS {
        return Err(ErftError::MetricUndefined("sCC: high-pass response is constant".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

pub const METRICS_HEADER: &str = "image_id,d_lambda,d_s,hqnr,sam_deg,ergas,scc,q2n,wall_time_s";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub d_lambda: Option<f64>,
    pub d_s: Option<f64>,
    pub hqnr: Option<f64>,
    pub sam_deg: Option<f64>,
    pub ergas: Option<f64>,
    pub scc: Option<f64>,
    pub q2n: Option<f64>,
    pub wall_time_s: f64,
}

impl MetricReport {
    pub fn csv_row(&self, image_id: &str) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut s = String::new();
        write!(
            s,
            "{image_id},{},{},{},{},{},{},{},{:.3}",
            f(self.d_lambda),
            f(self.d_s),
            f(self.hqnr),
            f(self.sam_deg),
            f(self.ergas),
            f(self.scc),
            f(self.q2n),
            self.wall_time_s
        )
        .expect("string write");
        s
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: Option<f64>, lo: f64| v.is_none_or(|x| x.is_finite() && (lo..=1.0).contains(&x));
        if self.hqnr.is_some() != (self.d_lambda.is_some() && self.d_s.is_some()) {
            bail!(Validation, "HQNR must be reported iff both D_lambda and D_s are");
        }
        let ok = unit(self.d_lambda, 0.0)
            && unit(self.d_s, 0.0)
            && unit(self.hqnr, 0.0)
            && unit(self.scc, -1.0)
            && unit(self.q2n, -1.0)
            && self.sam_deg.is_none_or(|x| x.is_finite() && x >= 0.0)
            && self.ergas.is_none_or(|x| x.is_finite() && x >= 0.0);
        if !ok {
            bail!(Validation, "metric report out of range: {self:?}");
        }
        Ok(())
    }
}

/// `D_λ`, `D_s` and HQNR of `fused` against its input pair.
pub fn full_resolution(fused: &RasterImage, pair: &ImagePair, mtf: &SensorMtf, window: Window) -> Result<(f64, f64, f64)> {
    if (fused.height(), fused.width()) != (pair.pan.height(), pair.pan.width()) {
        bail!(Dimension, "fused image does not match the PAN size");
    }
    let dl = d_lambda(fused, &pair.lrms, &mtf.ms, window)?;
    let ds = d_s(fused, &pair.lrms, &pair.pan, &mtf.pan, window)?;
    Ok((dl, ds, hqnr(dl, ds)?))
}

/// Full-resolution metrics always, reference metrics when `gt` is given.
pub fn evaluate(fused: &RasterImage, pair: &ImagePair, gt: Option<&RasterImage>, mtf: &SensorMtf, window: Window) -> Result<MetricReport> {
    let start = std::time::Instant::now();
    let (dl, ds, hq) = full_resolution(fused, pair, mtf, window)?;
    let mut report = MetricReport { d_lambda: Some(dl), d_s: Some(ds), hqnr: Some(hq), ..MetricReport::default() };
    if let Some(gt) = gt {
        report.sam_deg = Some(sam(fused, gt)?);
        report.ergas = Some(ergas(fused, gt, pair.ratio)?);
        report.scc = Some(scc(fused, gt)?);
        report.q2n = Some(q2n(fused, gt, window)?);
    }
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok(report)
}
