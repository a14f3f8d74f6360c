use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;

use super::{select_training, split, stitch, PatchGrid, PatchPayload};
use crate::backbone::Backbone;
use crate::degrade::SensorMtf;
use crate::error::{bail, Result};
use crate::losses::{total_loss, LossBreakdown, LossKernels, LossWeights};
use crate::raster::{ImagePair, RasterImage};
use crate::seed::{derive_seed, TAG_TAILOR};
use crate::tailor::{FeatureTailor, InitMode};
use crate::tensor::{ops, AdamConfig, AdamState, Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptConfig {
    pub patch: usize,
    pub rim: usize,
    /// `M`, training patches per image.
    pub train_patches: usize,
    /// `B`, patches processed concurrently.
    pub batch: usize,
    /// `0` leaves the tailor at its initialization.
    pub epochs: usize,
    pub seed: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub weights: LossWeights,
    pub init_mode: InitMode,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            patch: 64,
            rim: 4,
            train_patches: 8,
            batch: 32,
            epochs: 10,
            seed: 1,
            lr: 1e-4,
            weight_decay: 1e-5,
            weights: LossWeights::default(),
            init_mode: InitMode::He,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            bail!(Config, "batch size must be >= 1");
        }
        if self.train_patches == 0 {
            bail!(Config, "at least one training patch is required");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) || !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            bail!(Config, "lr must be > 0 and weight_decay >= 0 (got {}, {})", self.lr, self.weight_decay);
        }
        self.weights.validate()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, weight_decay: self.weight_decay, ..AdamConfig::default() }
    }
}

pub const LOG_HEADER: &str = "epoch,patch_id,spe,spa,ori,total";

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub patch_id: usize,
    pub loss: LossBreakdown,
}

/// Per-patch losses. Rows for epoch `e < epochs` are measured before that
/// epoch's update; rows with `epoch == epochs` evaluate the final tailor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    /// Summed total loss per logged epoch.
    pub fn epoch_totals(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for r in &self.rows {
            if out.len() <= r.epoch {
                out.resize(r.epoch + 1, 0.0);
            }
            out[r.epoch] += r.loss.total;
        }
        out
    }

    pub fn epoch_breakdown(&self, epoch: usize) -> LossBreakdown {
        let mut acc = LossBreakdown::default();
        for r in self.rows.iter().filter(|r| r.epoch == epoch) {
            acc.accumulate(&r.loss);
        }
        acc
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(LOG_HEADER);
        s.push('\n');
        for r in &self.rows {
            let l = &r.loss;
            writeln!(s, "{},{},{},{},{},{}", r.epoch, r.patch_id, l.spectral, l.spatial, l.consistency, l.total).expect("string write");
        }
        s
    }
}

/// Frozen-backbone quantities of one training patch, computed once.
struct CachedPatch {
    index: usize,
    lrms: Tensor,
    pan: Tensor,
    up: Tensor,
    latent: Tensor,
    original: Tensor,
}

fn cache_patch(backbone: &Backbone, p: &PatchPayload) -> Result<CachedPatch> {
    let latent = backbone.fe_forward(&p.lrms, &p.pan)?;
    let original = backbone.cm_forward(&latent, &p.lrms)?;
    let up = ops::bilinear_upsample(&p.lrms, backbone.config().ratio)?;
    Ok(CachedPatch { index: p.index, lrms: p.lrms.clone(), pan: p.pan.clone(), up, latent, original })
}

/// Loss of one patch and, if the tailor is trainable, its gradient.
fn patch_loss(
    backbone: &Backbone,
    tailor: &FeatureTailor,
    c: &CachedPatch,
    weights: &LossWeights,
    kernels: &LossKernels,
) -> Result<(LossBreakdown, Option<Vec<Tensor>>)> {
    let mut tape = Tape::new();
    let net = backbone.bind(&mut tape, false);
    let ft = tailor.bind(&mut tape);
    let z = tape.constant(c.latent.clone());
    let up = tape.constant(c.up.clone());
    let zs = ft.apply(&mut tape, z)?;
    let x = net.cm_forward(&mut tape, zs, up)?;
    let x0 = tape.constant(c.original.clone());
    let y = tape.constant(c.lrms.clone());
    let p = tape.constant(c.pan.clone());
    let nodes = total_loss(&mut tape, weights, x, x0, y, p, kernels)?;
    let loss = nodes.breakdown(&tape, weights);
    if !tailor.is_trainable() {
        return Ok((loss, None));
    }
    let mut grads = tape.backward(nodes.total)?;
    let g = ft.params().iter().map(|v| grads.take(*v).expect("trainable tailor leaf")).collect();
    Ok((loss, Some(g)))
}

/// Runs `f` over `items` in batches of `batch` concurrent calls, keeping order.
fn batched<I: Sync, O: Send>(items: &[I], batch: usize, f: impl Fn(&I) -> Result<O> + Sync) -> Result<Vec<O>> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(batch) {
        let part: Vec<Result<O>> = chunk.par_iter().map(&f).collect();
        for r in part {
            out.push(r?);
        }
    }
    Ok(out)
}

/// Trains the tailor on the `selected` patches, then freezes it.
///
/// Each epoch sums the per-patch gradients in ascending patch order,
/// divides by `M` and takes one Adam step.
pub fn adapt(
    backbone: &Backbone,
    tailor: &mut FeatureTailor,
    payloads: &[PatchPayload],
    selected: &[usize],
    cfg: &AdaptConfig,
    kernels: &LossKernels,
) -> Result<TrainingLog> {
    cfg.validate()?;
    if !backbone.is_frozen() {
        bail!(Contract, "adaptation requires a frozen backbone");
    }
    if !tailor.is_trainable() {
        bail!(Contract, "adaptation requires an unfrozen tailor");
    }
    if selected.is_empty() {
        bail!(Config, "no training patches selected");
    }
    let mut chosen = Vec::with_capacity(selected.len());
    for &i in selected {
        match payloads.iter().find(|p| p.index == i) {
            Some(p) => chosen.push(p),
            None => bail!(Config, "selected patch {i} does not exist"),
        }
    }
    chosen.sort_by_key(|p| p.index);
    let cached = batched(&chosen, cfg.batch, |p| cache_patch(backbone, p))?;
    let inv_m = 1.0 / cached.len() as f32;
    let mut adam = AdamState::new(cfg.adam(), &tailor.param_tensors());
    let mut log = TrainingLog::default();
    for epoch in 0..cfg.epochs {
        let results = batched(&cached, cfg.batch, |c| patch_loss(backbone, tailor, c, &cfg.weights, kernels))?;
        let mut sum: Option<Vec<Tensor>> = None;
        for (c, (loss, grads)) in cached.iter().zip(results) {
            log.rows.push(LogRow { epoch, patch_id: c.index, loss });
            let grads = grads.expect("trainable tailor");
            match sum.as_mut() {
                None => sum = Some(grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                            *x += *y;
                        }
                    }
                }
            }
        }
        let mean: Vec<Tensor> = sum.expect("non-empty selection").iter().map(|g| g.map(|v| v * inv_m)).collect();
        let refs: Vec<&Tensor> = mean.iter().collect();
        adam.step(&mut tailor.param_tensors_mut(), &refs)?;
    }
    tailor.freeze();
    let finals = batched(&cached, cfg.batch, |c| patch_loss(backbone, tailor, c, &cfg.weights, kernels))?;
    for (c, (loss, _)) in cached.iter().zip(finals) {
        log.rows.push(LogRow { epoch: cfg.epochs, patch_id: c.index, loss });
    }
    Ok(log)
}

/// Tailored forward on every padded patch, rim trimmed, in index order.
pub fn infer_all(
    backbone: &Backbone,
    tailor: &FeatureTailor,
    grid: &PatchGrid,
    payloads: &[PatchPayload],
    batch: usize,
) -> Result<Vec<Tensor>> {
    if tailor.is_trainable() {
        bail!(Contract, "inference requires a frozen tailor");
    }
    if batch == 0 {
        bail!(Config, "batch size must be >= 1");
    }
    if payloads.len() != grid.len() {
        bail!(Contract, "grid has {} patches, got {} payloads", grid.len(), payloads.len());
    }
    batched(payloads, batch, |p| grid.trim(&tailor.tailored_forward(backbone, &p.lrms, &p.pan)?))
}

/// Wall-clock milliseconds of each pipeline stage.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageTimings {
    pub split_ms: f64,
    pub adapt_ms: f64,
    pub infer_ms: f64,
    pub stitch_ms: f64,
}

impl StageTimings {
    pub fn total_ms(&self) -> f64 {
        self.split_ms + self.adapt_ms + self.infer_ms + self.stitch_ms
    }

    pub fn line(&self) -> String {
        format!(
            "split_ms={:.3} adapt_ms={:.3} infer_ms={:.3} stitch_ms={:.3} total_ms={:.3}",
            self.split_ms,
            self.adapt_ms,
            self.infer_ms,
            self.stitch_ms,
            self.total_ms()
        )
    }
}

#[derive(Clone, Debug)]
pub struct ErftOutput {
    pub fused: RasterImage,
    pub tailor: FeatureTailor,
    pub log: TrainingLog,
    pub selected: Vec<usize>,
    pub grid: PatchGrid,
    pub timings: StageTimings,
}

/// Split, select, adapt, infer and stitch one pair. With `no_ft` the
/// tailor stays at zero and adaptation is skipped (frozen-backbone baseline).
pub fn run_erft(pair: &ImagePair, backbone: &Backbone, cfg: &AdaptConfig, mtf: &SensorMtf, no_ft: bool) -> Result<ErftOutput> {
    cfg.validate()?;
    if pair.bands() != backbone.config().bands || pair.ratio != backbone.config().ratio {
        bail!(
            Dimension,
            "pair has {} bands at ratio {}, backbone expects {} at {}",
            pair.bands(),
            pair.ratio,
            backbone.config().bands,
            backbone.config().ratio
        );
    }
    let mut timings = StageTimings::default();
    let t = Instant::now();
    let (grid, payloads) = split(pair, cfg.patch, cfg.rim)?;
    timings.split_ms = t.elapsed().as_secs_f64() * 1e3;

    let t = Instant::now();
    let features = backbone.config().features;
    let (tailor, log, selected) = if no_ft {
        let mut ft = FeatureTailor::zeroed(features);
        ft.freeze();
        (ft, TrainingLog::default(), Vec::new())
    } else {
        let selected = select_training(&grid, cfg.train_patches, cfg.seed)?;
        let mut ft = FeatureTailor::new(features, cfg.init_mode, derive_seed(cfg.seed, TAG_TAILOR))?;
        let kernels = LossKernels::new(mtf);
        let log = adapt(backbone, &mut ft, &payloads, &selected, cfg, &kernels)?;
        (ft, log, selected)
    };
    timings.adapt_ms = t.elapsed().as_secs_f64() * 1e3;

    let t = Instant::now();
    let cores = infer_all(backbone, &tailor, &grid, &payloads, cfg.batch)?;
    timings.infer_ms = t.elapsed().as_secs_f64() * 1e3;

    let t = Instant::now();
    let fused = stitch(&grid, &cores)?;
    timings.stitch_ms = t.elapsed().as_secs_f64() * 1e3;
    Ok(ErftOutput { fused, tailor, log, selected, grid, timings })
}
