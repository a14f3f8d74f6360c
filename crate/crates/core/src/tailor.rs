//! The residual feature tailor `Z* = Z + G(Z)`, `G = conv2 ∘ relu ∘ conv1`,
//! trained per image while the backbone stays frozen.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_pcg::Pcg64;

use crate::backbone::{Backbone, BoundBackbone, BoundConv, ConvLayer};
use crate::error::{bail, ErftError, Result};
use crate::tensor::{Real, Tape, Tensor, Var};
use crate::weights::WeightArchive;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum InitMode {
    /// He-normal weights on both convolutions, zero biases.
    #[default]
    He,
    /// First convolution exactly zero, second He-normal.
    ///
    /// With `relu'(0) = 0` the first layer then receives no gradient, so
    /// training only moves the second layer's bias.
    ZeroFirst,
    /// Every parameter zero: the tailor starts as the identity.
    Zero,
}

impl fmt::Display for InitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitMode::He => "he",
            InitMode::ZeroFirst => "zero_first",
            InitMode::Zero => "zero",
        })
    }
}

impl FromStr for InitMode {
    type Err = ErftError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "he" => Ok(InitMode::He),
            "zero_first" => Ok(InitMode::ZeroFirst),
            "zero" => Ok(InitMode::Zero),
            other => Err(ErftError::Config(format!("unknown init_mode {other:?} (expected he, zero_first or zero)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTailor<T: Real = f32> {
    pub conv1: ConvLayer<T>,
    pub conv2: ConvLayer<T>,
    init_mode: InitMode,
    trainable: bool,
}

/// Tape handles of a bound tailor.
#[derive(Clone, Copy, Debug)]
pub struct BoundTailor {
    pub conv1: BoundConv,
    pub conv2: BoundConv,
}

impl BoundTailor {
    /// `Z + G(Z)`.
    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, z: Var) -> Result<Var> {
        let h = self.conv1.apply(tape, z)?;
        let h = tape.relu(h);
        let g = self.conv2.apply(tape, h)?;
        tape.add(z, g)
    }

    pub fn params(&self) -> [Var; 4] {
        [self.conv1.weight, self.conv1.bias, self.conv2.weight, self.conv2.bias]
    }
}

impl<T: Real> FeatureTailor<T> {
    /// Deterministic in `seed`; starts trainable.
    pub fn new(features: usize, init_mode: InitMode, seed: u64) -> Result<Self> {
        if features == 0 {
            bail!(Config, "tailor width must be >= 1");
        }
        let mut rng = Pcg64::seed_from_u64(seed);
        let mut conv1 = ConvLayer::he(features, features, &mut rng);
        let mut conv2 = ConvLayer::he(features, features, &mut rng);
        if init_mode != InitMode::He {
            conv1 = ConvLayer::zeros(features, features);
        }
        if init_mode == InitMode::Zero {
            conv2 = ConvLayer::zeros(features, features);
        }
        Ok(FeatureTailor { conv1, conv2, init_mode, trainable: true })
    }

    /// `φ ≡ 0`: the tailor is the identity map.
    pub fn zeroed(features: usize) -> Self {
        FeatureTailor {
            conv1: ConvLayer::zeros(features, features),
            conv2: ConvLayer::zeros(features, features),
            init_mode: InitMode::Zero,
            trainable: true,
        }
    }

    pub fn features(&self) -> usize {
        self.conv1.in_channels()
    }

    pub fn init_mode(&self) -> InitMode {
        self.init_mode
    }

    pub fn param_count(&self) -> usize {
        self.conv1.param_count() + self.conv2.param_count()
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn freeze(&mut self) {
        self.trainable = false;
    }

    pub fn unfreeze(&mut self) {
        self.trainable = true;
    }

    pub fn is_zero(&self) -> bool {
        self.param_tensors().iter().all(|t| t.data().iter().all(|v| *v == T::zero()))
    }

    pub fn param_tensors(&self) -> Vec<&Tensor<T>> {
        vec![&self.conv1.weight, &self.conv1.bias, &self.conv2.weight, &self.conv2.bias]
    }

    pub(crate) fn param_tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.conv1.weight, &mut self.conv1.bias, &mut self.conv2.weight, &mut self.conv2.bias]
    }

    /// Leaves require gradients iff the tailor is trainable.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundTailor {
        BoundTailor { conv1: self.conv1.bind(tape, self.trainable), conv2: self.conv2.bind(tape, self.trainable) }
    }

    fn check_width(&self, z: &Tensor<T>) -> Result<()> {
        if z.channels() != self.features() {
            bail!(Dimension, "tailor expects {} feature channels, got {}", self.features(), z.channels());
        }
        Ok(())
    }

    /// `Z* = Z + G(Z)`.
    pub fn forward(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_width(z)?;
        let mut tape = Tape::new();
        let bound = FeatureTailor { trainable: false, ..self.clone() }.bind(&mut tape);
        let zv = tape.constant(z.clone());
        let out = bound.apply(&mut tape, zv)?;
        Ok(tape.value(out).clone())
    }

    /// `X* = F2(F1(Y, P) + G(F1(Y, P))) + up(Y)`.
    pub fn tailored_forward(&self, backbone: &Backbone<T>, lrms: &Tensor<T>, pan: &Tensor<T>) -> Result<Tensor<T>> {
        if backbone.config().features != self.features() {
            bail!(Dimension, "tailor width {} does not match backbone width {}", self.features(), backbone.config().features);
        }
        let mut tape = Tape::new();
        let net = backbone.bind(&mut tape, false);
        let frozen = FeatureTailor { trainable: false, ..self.clone() };
        let ft = frozen.bind(&mut tape);
        let (y, p) = (tape.constant(lrms.clone()), tape.constant(pan.clone()));
        let out = tailored_graph(&mut tape, &net, &ft, y, p)?;
        Ok(tape.value(out.tailored).clone())
    }

    pub fn cast<U: Real>(&self) -> FeatureTailor<U> {
        FeatureTailor { conv1: self.conv1.cast(), conv2: self.conv2.cast(), init_mode: self.init_mode, trainable: self.trainable }
    }
}

impl FeatureTailor<f32> {
    pub fn to_archive(&self) -> Result<WeightArchive> {
        let s = self.features() as u32;
        let mut a = WeightArchive::new(s, 0, 0);
        a.insert("ft.conv1.w", self.conv1.weight.clone())?;
        a.insert("ft.conv1.b", self.conv1.bias.clone())?;
        a.insert("ft.conv2.w", self.conv2.weight.clone())?;
        a.insert("ft.conv2.b", self.conv2.bias.clone())?;
        Ok(a)
    }

    /// Loaded tailors come back frozen.
    pub fn from_archive(a: &WeightArchive) -> Result<Self> {
        let s = a.features as usize;
        if s == 0 || a.len() != 4 {
            bail!(Format, "not a tailor archive (features {s}, {} entries)", a.len());
        }
        let layer = |name: &str| -> Result<ConvLayer> {
            Ok(ConvLayer { weight: a.require(&format!("{name}.w"), [s, s, 3, 3])?, bias: a.require(&format!("{name}.b"), [s, 1, 1, 1])? })
        };
        Ok(FeatureTailor { conv1: layer("ft.conv1")?, conv2: layer("ft.conv2")?, init_mode: InitMode::He, trainable: false })
    }
}

/// Node handles of one tailored forward pass.
#[derive(Clone, Copy, Debug)]
pub struct TailoredGraph {
    pub up_lrms: Var,
    pub latent: Var,
    pub tailored_latent: Var,
    pub tailored: Var,
}

/// Builds FE → tailor → CM on `tape`.
pub fn tailored_graph<T: Real>(tape: &mut Tape<T>, net: &BoundBackbone, ft: &BoundTailor, lrms: Var, pan: Var) -> Result<TailoredGraph> {
    let up_lrms = net.upsample(tape, lrms)?;
    let latent = net.fe_forward(tape, up_lrms, pan)?;
    let tailored_latent = ft.apply(tape, latent)?;
    let tailored = net.cm_forward(tape, tailored_latent, up_lrms)?;
    Ok(TailoredGraph { up_lrms, latent, tailored_latent, tailored })
}
