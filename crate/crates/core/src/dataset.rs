//! Scene datasets on disk: a text manifest plus one raster file per image.
//!
//! ```text
//! format=erft-dataset-1
//! ratio=4
//! bands=8
//! scene id=s00 split=train pan=s00_pan.erft lrms=s00_lrms.erft gt=s00_gt.erft
//! ```
//!
//! Header keys come first. `gt` is optional. Paths are relative to the
//! manifest directory.

use std::fmt;
use std::fmt::Write as _;
use std::path::{Component, Path, PathBuf};
use std::str::FromStr;

use crate::backbone::TrainingSample;
use crate::degrade::{apply_sensor_shift, synth_scene, wald_simulate, SensorMtf, SensorShift};
use crate::error::{bail, ErftError, Result};
use crate::raster::{read_raster, validate_pair, write_raster, ImagePair, RasterImage};
use crate::seed::{derive_seed, TAG_SCENE};

pub const MANIFEST_FORMAT: &str = "erft-dataset-1";
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = ErftError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            o => Err(ErftError::Format(format!("unknown split {o:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub pan: PathBuf,
    pub lrms: PathBuf,
    pub gt: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub ratio: usize,
    pub bands: usize,
    pub entries: Vec<ManifestEntry>,
}

fn check_id(id: &str) -> Result<()> {
    if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
        bail!(Format, "bad scene id {id:?}");
    }
    Ok(())
}

fn check_path(p: &str) -> Result<PathBuf> {
    let path = PathBuf::from(p);
    if p.is_empty() || !path.components().all(|c| matches!(c, Component::Normal(_))) {
        bail!(Format, "scene path {p:?} must be relative and stay inside the dataset");
    }
    Ok(path)
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let (mut format, mut ratio, mut bands) = (None, None, None);
        let mut entries: Vec<ManifestEntry> = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let ctx = |e: ErftError| match e {
                ErftError::Format(m) => ErftError::Format(format!("manifest line {}: {m}", no + 1)),
                o => o,
            };
            if let Some(rest) = line.strip_prefix("scene ") {
                entries.push(Self::parse_entry(rest).map_err(ctx)?);
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ctx(ErftError::Format(format!("unrecognised line {line:?}"))));
            };
            if !entries.is_empty() {
                return Err(ctx(ErftError::Format("header keys must precede scenes".into())));
            }
            let slot = match k.trim() {
                "format" => &mut format,
                "ratio" => &mut ratio,
                "bands" => &mut bands,
                o => return Err(ctx(ErftError::Format(format!("unknown header key {o:?}")))),
            };
            if slot.replace(v.trim().to_string()).is_some() {
                return Err(ctx(ErftError::Format(format!("duplicate header key {:?}", k.trim()))));
            }
        }
        match format.as_deref() {
            Some(MANIFEST_FORMAT) => {}
            Some(f) => bail!(Format, "unsupported manifest format {f:?}"),
            None => bail!(Format, "manifest lacks format="),
        }
        let num = |name: &str, v: Option<String>| -> Result<usize> {
            let v = v.ok_or_else(|| ErftError::Format(format!("manifest lacks {name}=")))?;
            v.parse().map_err(|_| ErftError::Format(format!("bad {name} value {v:?}")))
        };
        let ratio = num("ratio", ratio)?;
        let bands = num("bands", bands)?;
        if ratio < 2 || bands == 0 {
            bail!(Format, "manifest needs ratio >= 2 and bands >= 1");
        }
        for (i, e) in entries.iter().enumerate() {
            if entries[..i].iter().any(|o| o.id == e.id) {
                bail!(Format, "duplicate scene id {:?}", e.id);
            }
        }
        Ok(Manifest { ratio, bands, entries })
    }

    fn parse_entry<'a>(rest: &'a str) -> Result<ManifestEntry> {
        let (mut id, mut split, mut pan, mut lrms, mut gt) = (None, None, None, None, None);
        for field in rest.split_whitespace() {
            let Some((k, v)) = field.split_once('=') else {
                bail!(Format, "scene field {field:?} is not key=value");
            };
            let slot = match k {
                "id" => &mut id,
                "split" => &mut split,
                "pan" => &mut pan,
                "lrms" => &mut lrms,
                "gt" => &mut gt,
                o => bail!(Format, "unknown scene field {o:?}"),
            };
            if slot.replace(v).is_some() {
                bail!(Format, "duplicate scene field {k:?}");
            }
        }
        let need =
            |name: &str, v: Option<&'a str>| -> Result<&'a str> { v.ok_or_else(|| ErftError::Format(format!("scene lacks {name}="))) };
        let id = need("id", id)?;
        check_id(id)?;
        Ok(ManifestEntry {
            id: id.to_string(),
            split: need("split", split)?.parse()?,
            pan: check_path(need("pan", pan)?)?,
            lrms: check_path(need("lrms", lrms)?)?,
            gt: gt.map(check_path).transpose()?,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("format={MANIFEST_FORMAT}\nratio={}\nbands={}\n", self.ratio, self.bands);
        for e in &self.entries {
            write!(s, "scene id={} split={} pan={} lrms={}", e.id, e.split, e.pan.display(), e.lrms.display()).expect("string write");
            if let Some(gt) = &e.gt {
                write!(s, " gt={}", gt.display()).expect("string write");
            }
            s.push('\n');
        }
        s
    }
}

/// One scene in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: String,
    pub split: Split,
    pub pair: ImagePair,
    pub gt: Option<RasterImage>,
}

/// Parameters of a synthetic dataset.
#[derive(Clone, Debug)]
pub struct SimulationSpec {
    pub seed: u64,
    pub train: usize,
    pub test: usize,
    pub bands: usize,
    /// PAN side length of each reduced-resolution pair.
    pub size: usize,
    pub mtf: SensorMtf,
    /// Applied to the MS side of test scenes.
    pub test_shift: SensorShift,
}

/// Synthetic scenes under the reduced-resolution protocol: the area-averaged
/// scene is the ground truth and both inputs are degraded by the MTF.
pub fn simulate(spec: &SimulationSpec) -> Result<Vec<Scene>> {
    let r = spec.mtf.ratio();
    if spec.size == 0 || !spec.size.is_multiple_of(r) {
        bail!(Geometry, "size {} is not a positive multiple of ratio {r}", spec.size);
    }
    if spec.test_shift.gain.len() != spec.bands {
        bail!(Config, "sensor shift has {} bands, dataset {}", spec.test_shift.gain.len(), spec.bands);
    }
    (0..spec.train + spec.test)
        .map(|i| {
            let split = if i < spec.train { Split::Train } else { Split::Test };
            let (mut gt, pan_hr) = synth_scene(derive_seed(spec.seed, &format!("{TAG_SCENE}{i}")), spec.bands, spec.size, spec.size, r)?;
            if split == Split::Test {
                gt = apply_sensor_shift(&gt, &spec.test_shift)?;
            }
            let w = wald_simulate(&gt, &pan_hr, &spec.mtf)?;
            Ok(Scene { id: format!("s{i:02}"), split, pair: w.pair, gt: Some(w.gt) })
        })
        .collect()
}

/// Writes rasters and the manifest into `dir`, which must exist.
pub fn write_dataset(dir: &Path, scenes: &[Scene]) -> Result<Manifest> {
    let Some(first) = scenes.first() else {
        bail!(Config, "no scenes to write");
    };
    let mut entries = Vec::with_capacity(scenes.len());
    for s in scenes {
        check_id(&s.id)?;
        let name = |kind: &str| PathBuf::from(format!("{}_{kind}.erft", s.id));
        write_raster(&s.pair.pan, dir.join(name("pan")))?;
        write_raster(&s.pair.lrms, dir.join(name("lrms")))?;
        if let Some(gt) = &s.gt {
            write_raster(gt, dir.join(name("gt")))?;
        }
        entries.push(ManifestEntry {
            id: s.id.clone(),
            split: s.split,
            pan: name("pan"),
            lrms: name("lrms"),
            gt: s.gt.as_ref().map(|_| name("gt")),
        });
    }
    let m = Manifest { ratio: first.pair.ratio, bands: first.pair.bands(), entries };
    std::fs::write(dir.join(MANIFEST_FILE), m.to_text())?;
    Ok(m)
}

/// Reads `dir/manifest.txt` and every scene it lists, checking geometry.
pub fn load_dataset(dir: &Path) -> Result<(Manifest, Vec<Scene>)> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let m = Manifest::parse(&text)?;
    let mut scenes = Vec::with_capacity(m.entries.len());
    for e in &m.entries {
        let pair = validate_pair(read_raster(dir.join(&e.pan))?, read_raster(dir.join(&e.lrms))?, m.ratio)?;
        if pair.bands() != m.bands {
            bail!(Dimension, "scene {} has {} bands, manifest says {}", e.id, pair.bands(), m.bands);
        }
        let gt = e.gt.as_ref().map(|p| read_raster(dir.join(p))).transpose()?;
        if let Some(g) = &gt {
            if (g.channels(), g.height(), g.width()) != (m.bands, pair.pan.height(), pair.pan.width()) {
                bail!(Geometry, "scene {} ground truth does not match the PAN grid", e.id);
            }
        }
        scenes.push(Scene { id: e.id.clone(), split: e.split, pair, gt });
    }
    Ok((m, scenes))
}

/// Non-overlapping `crop x crop` tiles (PAN grid) of every training scene
/// with ground truth, in scene then raster order.
pub fn training_samples(scenes: &[Scene], crop: usize) -> Result<Vec<TrainingSample>> {
    let mut out = Vec::new();
    for s in scenes.iter().filter(|s| s.split == Split::Train) {
        let Some(gt) = &s.gt else { continue };
        let r = s.pair.ratio;
        if crop == 0 || !crop.is_multiple_of(r) {
            bail!(Config, "crop {crop} is not a positive multiple of ratio {r}");
        }
        let (h, w) = (s.pair.pan.height(), s.pair.pan.width());
        for y in (0..h.saturating_sub(crop - 1)).step_by(crop) {
            for x in (0..w.saturating_sub(crop - 1)).step_by(crop) {
                out.push(TrainingSample {
                    pan: s.pair.pan.crop(y, x, crop, crop)?.to_tensor(),
                    lrms: s.pair.lrms.crop(y / r, x / r, crop / r, crop / r)?.to_tensor(),
                    gt: gt.crop(y, x, crop, crop)?.to_tensor(),
                });
            }
        }
    }
    if out.is_empty() {
        bail!(Config, "no training scene with ground truth fits a {crop}x{crop} crop");
    }
    Ok(out)
}
