//! Central finite differences against the tape's analytic gradients, in f64.
//!
//! A coordinate is only compared when both perturbed evaluations take the
//! same branch at every relu, L1 residual and division guard as the
//! unperturbed graph, so the difference quotient never straddles a kink.

use std::sync::Arc;

use erft::backbone::{Backbone, BackboneConfig, BoundConv};
use erft::degrade::{decimation_offset, SensorMtf};
use erft::losses::{consistency_loss, spatial_loss, spectral_loss, total_loss, LossKernels, LossWeights};
use erft::tailor::{tailored_graph, BoundTailor, FeatureTailor, InitMode};
use erft::tensor::{PadMode, Tape, Var};
use erft::Tensor;
use rand::seq::index::sample;

use super::{random_tensor, rng, signed_tensor};

pub const STEP: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-3;
pub const MIN_COORDS: usize = 100;
pub const TARGET_COORDS: usize = 128;
/// Denominator floor for gradients that are zero up to rounding.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradReport {
    pub name: &'static str,
    pub checked: usize,
    pub skipped: usize,
    pub worst: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.checked >= MIN_COORDS && self.worst <= REL_TOL
    }
}

type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> erft::Result<Var> + 'a;

fn run(params: &[Tensor<f64>], build: &Build<'_>) -> (Tape<f64>, Vec<Var>, Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let loss = build(&mut tape, &vars).expect("graph builds");
    (tape, vars, loss)
}

pub fn check(name: &'static str, params: Vec<Tensor<f64>>, seed: u64, build: &Build<'_>) -> GradReport {
    let (tape, vars, loss) = run(&params, build);
    let signature = tape.branch_signature();
    let mut grads = tape.backward(loss).expect("backward");
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|v| grads.take(*v).expect("leaf gradient")).collect();

    let total: usize = params.iter().map(Tensor::len).sum();
    let mut order = sample(&mut rng(seed), total, total).into_vec();
    order.truncate(total.min(TARGET_COORDS * 4));
    let locate = |mut flat: usize| {
        for (i, p) in params.iter().enumerate() {
            if flat < p.len() {
                return (i, flat);
            }
            flat -= p.len();
        }
        unreachable!("flat index in range")
    };
    let mut report = GradReport { name, checked: 0, skipped: 0, worst: 0.0 };
    for flat in order {
        if report.checked == TARGET_COORDS {
            break;
        }
        let (pi, ci) = locate(flat);
        let eval = |delta: f64| {
            let mut p = params.clone();
            p[pi].data_mut()[ci] += delta;
            let (t, _, l) = run(&p, build);
            (t.value(l).item(), t.branch_signature() == signature)
        };
        let ((fp, same_p), (fm, same_m)) = (eval(STEP), eval(-STEP));
        if !(same_p && same_m) {
            report.skipped += 1;
            continue;
        }
        let fd = (fp - fm) / (2.0 * STEP);
        let a = analytic[pi].data()[ci];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(ABS_FLOOR);
        report.worst = report.worst.max(rel);
        report.checked += 1;
    }
    report
}

/// Reduces a tensor to a scalar through an L1 distance to a fixed target.
fn against_target(tape: &mut Tape<f64>, out: Var, target: &Tensor<f64>) -> erft::Result<Var> {
    let t = tape.constant(target.clone());
    tape.l1_mean(out, t)
}

fn target_like(seed: u64, shape: [usize; 4]) -> Tensor<f64> {
    random_tensor(&mut rng(seed), shape, -1.0, 1.0)
}

fn conv_case(name: &'static str, pad: PadMode, seed: u64) -> GradReport {
    let mut r = rng(seed);
    let params = vec![
        random_tensor(&mut r, [2, 3, 6, 7], -1.0, 1.0),
        random_tensor(&mut r, [4, 3, 3, 3], -0.5, 0.5),
        random_tensor(&mut r, [4, 1, 1, 1], -0.5, 0.5),
    ];
    let target = target_like(seed + 1, [2, 4, 6, 7]);
    check(name, params, seed, &|t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), pad)?;
        against_target(t, y, &target)
    })
}

fn unary_case(
    name: &'static str,
    input: Tensor<f64>,
    out_shape: [usize; 4],
    seed: u64,
    op: impl Fn(&mut Tape<f64>, Var) -> erft::Result<Var>,
) -> GradReport {
    let target = target_like(seed + 1, out_shape);
    check(name, vec![input], seed, &|t, v| {
        let y = op(t, v[0])?;
        against_target(t, y, &target)
    })
}

fn binary_case(
    name: &'static str,
    a: Tensor<f64>,
    b: Tensor<f64>,
    seed: u64,
    op: impl Fn(&mut Tape<f64>, Var, Var) -> erft::Result<Var>,
) -> GradReport {
    let target = target_like(seed + 1, a.shape());
    check(name, vec![a, b], seed, &|t, v| {
        let y = op(t, v[0], v[1])?;
        against_target(t, y, &target)
    })
}

fn test_mtf(bands: usize) -> SensorMtf {
    SensorMtf::new(4, bands, 0.3, 0.15).unwrap()
}

/// Per-op gradient checks.
pub fn op_reports() -> Vec<GradReport> {
    let mut out = vec![conv_case("conv2d_zero_pad", PadMode::Zero, 11), conv_case("conv2d_reflect_pad", PadMode::Reflect, 12)];
    let mut r = rng(13);
    out.push(unary_case("bilinear_upsample", random_tensor(&mut r, [1, 4, 6, 6], 0.0, 1.0), [1, 4, 24, 24], 14, |t, x| t.upsample(x, 4)));
    out.push(unary_case("relu", signed_tensor(&mut r, [1, 4, 8, 8], 0.05, 1.0), [1, 4, 8, 8], 15, |t, x| Ok(t.relu(x))));
    out.push(unary_case("scale", random_tensor(&mut r, [1, 2, 8, 8], -1.0, 1.0), [1, 2, 8, 8], 16, |t, x| Ok(t.scale(x, -0.37))));
    let taps = test_mtf(3).ms.taps_as::<f64>();
    out.push(unary_case("separable_blur", random_tensor(&mut r, [1, 3, 16, 16], 0.0, 1.0), [1, 3, 16, 16], 17, move |t, x| {
        t.blur(x, Arc::clone(&taps))
    }));
    out.push(unary_case("decimate", random_tensor(&mut r, [1, 3, 16, 16], -1.0, 1.0), [1, 3, 4, 4], 18, |t, x| {
        t.decimate(x, 4, decimation_offset(4))
    }));

    let shape = [1, 3, 6, 7];
    let same = |r: &mut rand_pcg::Pcg64| random_tensor(r, shape, -1.0, 1.0);
    let (a, b) = (same(&mut r), same(&mut r));
    out.push(binary_case("add", a.clone(), b.clone(), 19, |t, x, y| t.add(x, y)));
    out.push(binary_case("sub", a.clone(), b.clone(), 20, |t, x, y| t.sub(x, y)));
    out.push(binary_case("mul", a.clone(), b, 21, |t, x, y| t.mul(x, y)));
    let den = signed_tensor(&mut r, shape, 0.5, 1.5);
    out.push(binary_case("div_guard", a.clone(), den, 22, |t, x, y| t.div_guard(x, y)));
    let band = random_tensor(&mut r, [1, 1, 6, 7], -1.0, 1.0);
    out.push(binary_case("mul_broadcast", a.clone(), band, 23, |t, x, y| t.mul(x, y)));
    let band_den = random_tensor(&mut r, [1, 1, 6, 7], 0.5, 1.5);
    out.push(binary_case("div_guard_broadcast", a.clone(), band_den, 24, |t, x, y| t.div_guard(x, y)));
    let other = random_tensor(&mut r, [1, 2, 6, 7], -1.0, 1.0);
    let cat_target = target_like(26, [1, 5, 6, 7]);
    out.push(check("concat", vec![a.clone(), other], 25, &|t, v| {
        let y = t.concat(v[0], v[1])?;
        against_target(t, y, &cat_target)
    }));
    let b2 = same(&mut r);
    out.push(check("l1_mean", vec![a, b2], 27, &|t, v| t.l1_mean(v[0], v[1])));
    out
}

/// The three loss terms with respect to the fused image.
pub fn loss_reports() -> Vec<GradReport> {
    let mut r = rng(31);
    let mtf = test_mtf(3);
    let k = LossKernels::<f64>::new(&mtf);
    let x = random_tensor(&mut r, [1, 3, 16, 16], 0.1, 0.9);
    let lrms = random_tensor(&mut r, [1, 3, 4, 4], 0.1, 0.9);
    let pan = random_tensor(&mut r, [1, 1, 16, 16], 0.1, 0.9);
    let x0 = random_tensor(&mut r, [1, 3, 16, 16], 0.1, 0.9);
    vec![
        check("spectral_loss", vec![x.clone()], 32, &|t, v| {
            let y = t.constant(lrms.clone());
            spectral_loss(t, v[0], y, &k)
        }),
        check("spatial_loss", vec![x.clone()], 33, &|t, v| {
            let p = t.constant(pan.clone());
            spatial_loss(t, v[0], p, &k)
        }),
        check("consistency_loss", vec![x], 34, &|t, v| {
            let o = t.constant(x0.clone());
            consistency_loss(t, v[0], o)
        }),
    ]
}

/// A backbone-shaped chain with every weight trainable, as in pretraining.
pub fn backbone_chain_report() -> GradReport {
    let mut r = rng(41);
    let (c, s) = (2, 4);
    let lrms = random_tensor(&mut r, [1, c, 4, 4], 0.1, 0.9);
    let pan = random_tensor(&mut r, [1, 1, 16, 16], 0.1, 0.9);
    let gt = random_tensor(&mut r, [1, c, 16, 16], 0.1, 0.9);
    let he = |r: &mut rand_pcg::Pcg64, o: usize, i: usize| random_tensor(r, [o, i, 3, 3], -0.4, 0.4);
    let params = vec![
        he(&mut r, s, c + 1),
        random_tensor(&mut r, [s, 1, 1, 1], -0.1, 0.1),
        he(&mut r, s, s),
        random_tensor(&mut r, [s, 1, 1, 1], -0.1, 0.1),
        he(&mut r, s, s),
        random_tensor(&mut r, [s, 1, 1, 1], -0.1, 0.1),
        he(&mut r, c, s),
        random_tensor(&mut r, [c, 1, 1, 1], -0.1, 0.1),
    ];
    check("backbone_chain", params, 42, &|t, v| {
        let y = t.constant(lrms.clone());
        let p = t.constant(pan.clone());
        let up = t.upsample(y, 4)?;
        let x = t.concat(up, p)?;
        let conv = |t: &mut Tape<f64>, w: usize, inp: Var| BoundConv { weight: v[w], bias: v[w + 1] }.apply(t, inp);
        let h = conv(t, 0, x)?;
        let h = t.relu(h);
        let a = conv(t, 2, h)?;
        let a = t.relu(a);
        let b = conv(t, 4, a)?;
        let z = t.add(h, b)?;
        let m = conv(t, 6, z)?;
        let out = t.add(m, up)?;
        let g = t.constant(gt.clone());
        t.l1_mean(out, g)
    })
}

/// The full unsupervised objective through the tailor parameters of a
/// frozen `k = 1`, `S = 8` backbone on a 16×16 patch.
pub fn composed_report() -> GradReport {
    let (c, s) = (4, 8);
    let mut net = Backbone::<f64>::new(BackboneConfig::new(c, s, 1, 4), 51).unwrap();
    net.freeze();
    let tailor = FeatureTailor::<f64>::new(s, InitMode::He, 52).unwrap();
    let mut r = rng(53);
    let lrms = random_tensor(&mut r, [1, c, 4, 4], 0.1, 0.9);
    let pan = random_tensor(&mut r, [1, 1, 16, 16], 0.1, 0.9);
    let x0 = net.full_forward(&lrms, &pan).unwrap();
    let mtf = test_mtf(c);
    let k = LossKernels::<f64>::new(&mtf);
    let weights = LossWeights::default();
    let params: Vec<Tensor<f64>> = tailor.param_tensors().into_iter().cloned().collect();
    check("tailored_objective", params, 54, &|t, v| {
        let bound = net.bind(t, false);
        let ft = BoundTailor { conv1: BoundConv { weight: v[0], bias: v[1] }, conv2: BoundConv { weight: v[2], bias: v[3] } };
        let y = t.constant(lrms.clone());
        let p = t.constant(pan.clone());
        let o = t.constant(x0.clone());
        let g = tailored_graph(t, &bound, &ft, y, p)?;
        Ok(total_loss(t, &weights, g.tailored, o, y, p, &k)?.total)
    })
}

pub fn all_reports() -> Vec<GradReport> {
    let mut v = op_reports();
    v.extend(loss_reports());
    v.push(backbone_chain_report());
    v.push(composed_report());
    v
}
