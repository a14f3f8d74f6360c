//! Unsupervised adaptation objective.
//!
//! ```text
//! spectral    = |decimate(B_ms * X) - Y|₁
//! spatial     = |X - (B_pan * X) ∘ (P ⊘ B_pan * P)|₁
//! consistency = |X - X⁰|₁
//! total       = η₁·spectral + η₂·spatial + η₃·consistency
//! ```
//! All norms are means; `⊘` is the guarded division.

use std::sync::Arc;

use crate::degrade::{decimation_offset, SensorMtf};
use crate::error::{bail, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub spectral: f64,
    pub spatial: f64,
    pub consistency: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { spectral: 1.0, spatial: 1.0, consistency: 0.1 }
    }
}

impl LossWeights {
    pub fn new(spectral: f64, spatial: f64, consistency: f64) -> Result<Self> {
        let w = LossWeights { spectral, spatial, consistency };
        w.validate()?;
        Ok(w)
    }

    /// Weights for simulated (reduced-resolution) data.
    pub fn simulated() -> Self {
        LossWeights { spectral: 10.0, spatial: 100.0, consistency: 10000.0 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("eta1", self.spectral), ("eta2", self.spatial), ("eta3", self.consistency)] {
            if !(v.is_finite() && v >= 0.0) {
                bail!(Config, "loss weight {name} must be finite and >= 0, got {v}");
            }
        }
        Ok(())
    }
}

/// The three loss components and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub spectral: f64,
    pub spatial: f64,
    pub consistency: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Total summed in the fixed order spectral, spatial, consistency.
    pub fn combine(weights: &LossWeights, spectral: f64, spatial: f64, consistency: f64) -> Self {
        let total = weights.spectral * spectral + weights.spatial * spatial + weights.consistency * consistency;
        LossBreakdown { spectral, spatial, consistency, total }
    }

    /// Componentwise sum, used to accumulate over patches.
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.spectral += other.spectral;
        self.spatial += other.spatial;
        self.consistency += other.consistency;
        self.total += other.total;
    }

    pub fn scaled(&self, factor: f64) -> Self {
        LossBreakdown {
            spectral: self.spectral * factor,
            spatial: self.spatial * factor,
            consistency: self.consistency * factor,
            total: self.total * factor,
        }
    }
}

/// Blur taps and decimation geometry used by the losses.
#[derive(Clone, Debug)]
pub struct LossKernels<T: Real = f32> {
    pub ms: Arc<Vec<Vec<T>>>,
    pub pan: Arc<Vec<Vec<T>>>,
    pub ratio: usize,
    pub offset: usize,
}

impl<T: Real> LossKernels<T> {
    pub fn new(mtf: &SensorMtf) -> Self {
        LossKernels { ms: mtf.ms.taps_as(), pan: mtf.pan.taps_as(), ratio: mtf.ratio(), offset: decimation_offset(mtf.ratio()) }
    }
}

/// Component nodes plus the weighted total on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub spectral: Var,
    pub spatial: Var,
    pub consistency: Var,
    pub total: Var,
}

impl LossNodes {
    pub fn breakdown<T: Real>(&self, tape: &Tape<T>, weights: &LossWeights) -> LossBreakdown {
        let v = |n: Var| tape.value(n).item().as_f64();
        LossBreakdown::combine(weights, v(self.spectral), v(self.spatial), v(self.consistency))
    }
}

pub fn spectral_loss<T: Real>(tape: &mut Tape<T>, fused: Var, lrms: Var, k: &LossKernels<T>) -> Result<Var> {
    let (x, y) = (tape.value(fused).shape(), tape.value(lrms).shape());
    if x[0] != y[0] || x[1] != y[1] || x[2] != y[2] * k.ratio || x[3] != y[3] * k.ratio {
        bail!(Geometry, "fused {x:?} and LRMS {y:?} are not aligned at ratio {}", k.ratio);
    }
    let blurred = tape.blur(fused, k.ms.clone())?;
    let low = tape.decimate(blurred, k.ratio, k.offset)?;
    tape.l1_mean(low, lrms)
}

pub fn spatial_loss<T: Real>(tape: &mut Tape<T>, fused: Var, pan: Var, k: &LossKernels<T>) -> Result<Var> {
    let (x, p) = (tape.value(fused).shape(), tape.value(pan).shape());
    if x[0] != p[0] || x[2] != p[2] || x[3] != p[3] {
        bail!(Geometry, "fused {x:?} and PAN {p:?} differ in size");
    }
    if p[1] != 1 {
        bail!(Dimension, "PAN must have one band, got {}", p[1]);
    }
    let pan_low = tape.blur(pan, k.pan.clone())?;
    let detail = tape.div_guard(pan, pan_low)?;
    let fused_low = tape.blur(fused, k.pan.clone())?;
    let injected = tape.mul(fused_low, detail)?;
    tape.l1_mean(fused, injected)
}

/// `original` should be a constant node; nothing flows back into it.
pub fn consistency_loss<T: Real>(tape: &mut Tape<T>, fused: Var, original: Var) -> Result<Var> {
    tape.l1_mean(fused, original)
}

#[allow(clippy::too_many_arguments)]
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    weights: &LossWeights,
    fused: Var,
    original: Var,
    lrms: Var,
    pan: Var,
    k: &LossKernels<T>,
) -> Result<LossNodes> {
    let spectral = spectral_loss(tape, fused, lrms, k)?;
    let spatial = spatial_loss(tape, fused, pan, k)?;
    let consistency = consistency_loss(tape, fused, original)?;
    let a = tape.scale(spectral, T::from_f64(weights.spectral));
    let b = tape.scale(spatial, T::from_f64(weights.spatial));
    let c = tape.scale(consistency, T::from_f64(weights.consistency));
    let ab = tape.add(a, b)?;
    let total = tape.add(ab, c)?;
    Ok(LossNodes { spectral, spatial, consistency, total })
}

/// Evaluates the objective on plain tensors.
pub fn evaluate<T: Real>(
    weights: &LossWeights,
    fused: &Tensor<T>,
    original: &Tensor<T>,
    lrms: &Tensor<T>,
    pan: &Tensor<T>,
    k: &LossKernels<T>,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let x = tape.constant(fused.clone());
    let x0 = tape.constant(original.clone());
    let y = tape.constant(lrms.clone());
    let p = tape.constant(pan.clone());
    Ok(total_loss(&mut tape, weights, x, x0, y, p, k)?.breakdown(&tape, weights))
}
