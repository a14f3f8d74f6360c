//! Planar multiband rasters, PAN/LRMS pairs and the `ERFT` raster file format.
//!
//! Layout (all little-endian):
//!
//! ```text
//! "ERFT" | u16 version = 1 | u32 C | u32 H | u32 W | C*H*W f32 samples, band-major
//! ```

use std::fs;
use std::io::{self, ErrorKind};
use std::path::Path;

use crate::error::{bail, ErftError, Result};
use crate::tensor::Tensor;

pub const RASTER_MAGIC: &[u8; 4] = b"ERFT";
pub const RASTER_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 12;

/// `C × H × W` samples, planar row-major, nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterImage {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl RasterImage {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            bail!(Dimension, "raster dims must be >= 1, got {channels}x{height}x{width}");
        }
        if data.len() != channels * height * width {
            bail!(Dimension, "{channels}x{height}x{width} raster needs {} samples, got {}", channels * height * width, data.len());
        }
        Ok(RasterImage { channels, height, width, data })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self::new(channels, height, width, vec![value; channels * height * width]).expect("non-zero dims")
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn band(&self, b: usize) -> &[f32] {
        let hw = self.height * self.width;
        &self.data[b * hw..(b + 1) * hw]
    }

    pub fn band_mut(&mut self, b: usize) -> &mut [f32] {
        let hw = self.height * self.width;
        &mut self.data[b * hw..(b + 1) * hw]
    }

    /// A single-band raster holding band `b`.
    pub fn extract_band(&self, b: usize) -> RasterImage {
        RasterImage { channels: 1, height: self.height, width: self.width, data: self.band(b).to_vec() }
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// View as a `[1, C, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec([1, self.channels, self.height, self.width], self.data.clone()).expect("valid dims")
    }

    /// Accepts `[1, C, H, W]` tensors.
    pub fn from_tensor(t: Tensor) -> Result<Self> {
        let [n, c, h, w] = t.shape();
        if n != 1 {
            bail!(Dimension, "raster from batched tensor {:?}", t.shape());
        }
        Self::new(c, h, w, t.into_vec())
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        Self::from_tensor(self.to_tensor().crop(y0, x0, h, w)?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if !self.all_finite() {
            bail!(Validation, "raster contains non-finite samples");
        }
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(RASTER_MAGIC);
        out.extend_from_slice(&RASTER_VERSION.to_le_bytes());
        for d in [self.channels, self.height, self.width] {
            let d = u32::try_from(d).map_err(|_| ErftError::Validation(format!("dimension {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    /// Decode a raster file image. Short input is an I/O (`UnexpectedEof`) error.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let magic = r.take(4)?;
        if magic != RASTER_MAGIC {
            bail!(Format, "bad raster magic {magic:?}");
        }
        let version = r.u16()?;
        if version != RASTER_VERSION {
            bail!(Format, "unsupported raster version {version}");
        }
        let (c, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        if c == 0 || h == 0 || w == 0 {
            bail!(Format, "raster header has a zero dimension ({c}x{h}x{w})");
        }
        let count = c
            .checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .ok_or_else(|| ErftError::Format(format!("raster dims {c}x{h}x{w} overflow")))?;
        let data = r.f32s(count)?;
        r.finish()?;
        if data.iter().any(|v| !v.is_finite()) {
            bail!(Validation, "raster contains non-finite samples");
        }
        Self::new(c, h, w, data)
    }
}

pub fn write_raster(image: &RasterImage, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, image.to_bytes()?)?;
    Ok(())
}

pub fn read_raster(path: impl AsRef<Path>) -> Result<RasterImage> {
    RasterImage::from_bytes(&fs::read(path)?)
}

/// Little-endian cursor over a byte slice shared by the binary decoders.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(io::Error::new(ErrorKind::UnexpectedEof, format!("truncated: need {n} bytes at offset {}", self.pos)).into());
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    /// Reads `count` floats; the length check happens before allocating.
    pub(crate) fn f32s(&mut self, count: usize) -> Result<Vec<f32>> {
        let nbytes = count.checked_mul(4).ok_or_else(|| ErftError::Format("sample count overflow".into()))?;
        let raw = self.take(nbytes)?;
        Ok(raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            bail!(Format, "{} trailing bytes", self.bytes.len() - self.pos);
        }
        Ok(())
    }
}

/// A PAN/LRMS input pair whose grids are aligned at integer ratio `r`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub pan: RasterImage,
    pub lrms: RasterImage,
    pub ratio: usize,
}

impl ImagePair {
    pub fn bands(&self) -> usize {
        self.lrms.channels()
    }
}

/// Checks `H = r*h` and `W = r*w` for a one-band PAN and `r >= 2`.
pub fn validate_pair(pan: RasterImage, lrms: RasterImage, ratio: usize) -> Result<ImagePair> {
    if ratio < 2 {
        bail!(Config, "ratio must be >= 2, got {ratio}");
    }
    if pan.channels() != 1 {
        bail!(Dimension, "PAN must have one band, got {}", pan.channels());
    }
    if pan.height() != ratio * lrms.height() || pan.width() != ratio * lrms.width() {
        bail!(Geometry, "PAN {}x{} is not {ratio}x LRMS {}x{}x{}", pan.height(), pan.width(), lrms.channels(), lrms.height(), lrms.width());
    }
    Ok(ImagePair { pan, lrms, ratio })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_sample_layout() {
        let img = RasterImage::new(1, 1, 1, vec![0.5]).unwrap();
        let bytes = img.to_bytes().unwrap();
        let mut want = b"ERFT".to_vec();
        want.extend_from_slice(&[1, 0]);
        for _ in 0..3 {
            want.extend_from_slice(&[1, 0, 0, 0]);
        }
        want.extend_from_slice(&[0, 0, 0, 0x3F]);
        assert_eq!(bytes, want);
        assert_eq!(bytes.len(), 22);
    }

    #[test]
    fn random_round_trip_is_bit_exact() {
        let data: Vec<f32> = (0..8 * 16 * 16).map(|i| ((i as f32) * 0.618).fract()).collect();
        let img = RasterImage::new(8, 16, 16, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.erft");
        write_raster(&img, &path).unwrap();
        let back = read_raster(&path).unwrap();
        assert!(img.data().iter().zip(back.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(back, img);
    }

    #[test]
    fn decode_errors() {
        let img = RasterImage::new(1, 2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let mut bytes = img.to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(RasterImage::from_bytes(&bad), Err(ErftError::Format(_))));
        let mut badv = bytes.clone();
        badv[4] = 2;
        assert!(matches!(RasterImage::from_bytes(&badv), Err(ErftError::Format(_))));
        let short = &bytes[..bytes.len() - 1];
        match RasterImage::from_bytes(short) {
            Err(ErftError::Io(e)) => assert_eq!(e.kind(), ErrorKind::UnexpectedEof),
            other => panic!("{other:?}"),
        }
        bytes.push(0);
        assert!(matches!(RasterImage::from_bytes(&bytes), Err(ErftError::Format(_))));
    }

    #[test]
    fn non_finite_samples_rejected_on_write() {
        let img = RasterImage::new(1, 1, 2, vec![0.0, f32::NAN]).unwrap();
        assert!(matches!(img.to_bytes(), Err(ErftError::Validation(_))));
    }

    #[test]
    fn pair_validation() {
        let ok = validate_pair(RasterImage::filled(1, 512, 512, 0.1), RasterImage::filled(8, 128, 128, 0.1), 4).unwrap();
        assert_eq!(ok.bands(), 8);
        let err = validate_pair(RasterImage::filled(1, 510, 512, 0.1), RasterImage::filled(8, 128, 128, 0.1), 4).unwrap_err();
        match err {
            ErftError::Geometry(msg) => assert!(msg.contains("510x512") && msg.contains("8x128x128")),
            other => panic!("{other:?}"),
        }
        assert!(validate_pair(RasterImage::filled(1, 4000, 4000, 0.1), RasterImage::filled(8, 1000, 1000, 0.1), 4).is_ok());
    }
}
