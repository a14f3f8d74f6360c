//! Theoretical and measured speedups of patch-wise over full-image processing.
//!
//! With `N` patches of `h×w` covering `H×W`, `M` of them used for training
//! and `B` processed concurrently:
//!
//! | arch      | train      | infer |
//! |-----------|------------|-------|
//! | cnn       | `(N/M)·B`  | `B`   |
//! | attention | `(N²/M)·B` | `N·B` |

use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::time::Instant;

use num_rational::Ratio;
use rayon::prelude::*;

use crate::error::{bail, ErftError, Result};
use crate::tensor::{ops, PadMode, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    Cnn,
    Attention,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Infer,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Train => "train",
            Phase::Infer => "infer",
        })
    }
}

impl FromStr for Phase {
    type Err = ErftError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Phase::Train),
            "infer" => Ok(Phase::Infer),
            other => Err(ErftError::Config(format!("unknown phase {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpeedupQuery {
    pub arch: Arch,
    pub phase: Phase,
    pub n: u64,
    pub m: u64,
    pub b: u64,
    pub height: u64,
    pub width: u64,
    pub patch_h: u64,
    pub patch_w: u64,
}

impl SpeedupQuery {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.b == 0 || self.m == 0 || self.m > self.n {
            bail!(Config, "speedup query needs N >= M >= 1 and B >= 1, got N={} M={} B={}", self.n, self.m, self.b);
        }
        if self.n as u128 * self.patch_h as u128 * self.patch_w as u128 != self.height as u128 * self.width as u128 {
            bail!(Geometry, "{} patches of {}x{} do not cover {}x{}", self.n, self.patch_h, self.patch_w, self.height, self.width);
        }
        Ok(())
    }
}

/// Exact closed-form speedup.
pub fn theoretical_speedup(q: &SpeedupQuery) -> Result<Ratio<u128>> {
    q.validate()?;
    let (n, m, b) = (q.n as u128, q.m as u128, q.b as u128);
    Ok(match (q.arch, q.phase) {
        (Arch::Cnn, Phase::Train) => Ratio::new(n, m) * b,
        (Arch::Cnn, Phase::Infer) => Ratio::from_integer(b),
        (Arch::Attention, Phase::Train) => Ratio::new(n * n, m) * b,
        (Arch::Attention, Phase::Infer) => Ratio::from_integer(n * b),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchArch {
    /// Three 3×3 convolutions over 8 channels.
    Cnn,
    /// Dense pairwise token mixing `(X Xᵀ / n) X` over 8-dim pixel tokens.
    AttentionToy,
}

impl BenchArch {
    fn arch(self) -> Arch {
        match self {
            BenchArch::Cnn => Arch::Cnn,
            BenchArch::AttentionToy => Arch::Attention,
        }
    }
}

impl fmt::Display for BenchArch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BenchArch::Cnn => "cnn",
            BenchArch::AttentionToy => "attention-toy",
        })
    }
}

impl FromStr for BenchArch {
    type Err = ErftError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnn" => Ok(BenchArch::Cnn),
            "attention-toy" | "attention" => Ok(BenchArch::AttentionToy),
            other => Err(ErftError::Config(format!("unknown bench arch {other:?} (expected cnn or attention-toy)"))),
        }
    }
}

pub const BENCH_HEADER: &str = "arch,phase,H,W,p,N,M,B,t_full_ms,t_patch_ms,speedup_measured,speedup_theory";

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub arch: BenchArch,
    pub phase: Phase,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub n: usize,
    pub m: usize,
    pub b: usize,
    pub t_full_ms: f64,
    pub t_patch_ms: f64,
    pub speedup_measured: f64,
    pub speedup_theory: Ratio<u128>,
}

const BENCH_CHANNELS: usize = 8;
const TOKEN_BLOCK: usize = 256;

fn bench_image(h: usize, w: usize) -> Tensor {
    let n = BENCH_CHANNELS * h * w;
    Tensor::from_vec([1, BENCH_CHANNELS, h, w], (0..n).map(|i| ((i * 7919) % 1000) as f32 / 1000.0).collect()).expect("shape")
}

fn bench_kernel() -> Tensor {
    let n = BENCH_CHANNELS * BENCH_CHANNELS * 9;
    Tensor::from_vec([BENCH_CHANNELS, BENCH_CHANNELS, 3, 3], (0..n).map(|i| ((i * 31) % 17) as f32 / 17.0 - 0.5).collect()).expect("shape")
}

fn run_cnn(x: &Tensor, k: &Tensor) -> f32 {
    let mut h = x.clone();
    for _ in 0..3 {
        h = ops::conv2d(&h, k, None, PadMode::Zero).expect("bench conv");
    }
    h.data()[0]
}

/// Row-blocked so memory stays `O(block · n)`.
fn run_attention(x: &Tensor) -> f32 {
    let (d, n) = (x.channels(), x.height() * x.width());
    // tokens as an n×d matrix: element (i, c) at c*n + i
    let t = x.data();
    let mut scores = vec![0f32; TOKEN_BLOCK * n];
    let mut out = vec![0f32; n * d];
    let scale = 1.0 / n as f32;
    for start in (0..n).step_by(TOKEN_BLOCK) {
        let rows = TOKEN_BLOCK.min(n - start);
        // scores = X[start..] · Xᵀ
        f32::gemm(rows, d, n, scale, &t[start..], (1, n as isize), t, (n as isize, 1), 0.0, &mut scores, (n as isize, 1));
        // out[start..] = scores · X
        f32::gemm(rows, n, d, 1.0, &scores, (n as isize, 1), t, (1, n as isize), 0.0, &mut out[start * d..], (d as isize, 1));
    }
    out[0]
}

fn median_ms(reps: usize, mut f: impl FnMut()) -> f64 {
    let mut times: Vec<f64> = (0..reps.max(1))
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    times.sort_by(f64::total_cmp);
    times[times.len() / 2]
}

/// Median-of-`reps` wall time of the kernel on the full `size × size`
/// image versus patch-wise: the first `m` patches for training, all
/// patches for inference, `b` at a time.
pub fn bench(arch: BenchArch, phase: Phase, size: usize, patch: usize, m: usize, b: usize, reps: usize) -> Result<BenchRow> {
    if patch == 0 || !size.is_multiple_of(patch) {
        bail!(Geometry, "bench size {size} is not divisible by patch {patch}");
    }
    let n = (size / patch) * (size / patch);
    let q = SpeedupQuery {
        arch: arch.arch(),
        phase,
        n: n as u64,
        m: m as u64,
        b: b as u64,
        height: size as u64,
        width: size as u64,
        patch_h: patch as u64,
        patch_w: patch as u64,
    };
    let theory = theoretical_speedup(&q)?;
    let full = bench_image(size, size);
    let patches: Vec<Tensor> =
        (0..n).map(|i| full.crop((i / (size / patch)) * patch, (i % (size / patch)) * patch, patch, patch).expect("in bounds")).collect();
    let used = match phase {
        Phase::Train => &patches[..m],
        Phase::Infer => &patches[..],
    };
    let kernel = bench_kernel();
    let run = |x: &Tensor| match arch {
        BenchArch::Cnn => run_cnn(x, &kernel),
        BenchArch::AttentionToy => run_attention(x),
    };
    let t_full_ms = median_ms(reps, || {
        std::hint::black_box(run(&full));
    });
    let t_patch_ms = median_ms(reps, || {
        for chunk in used.chunks(b) {
            let r: Vec<f32> = chunk.par_iter().map(run).collect();
            std::hint::black_box(r);
        }
    });
    Ok(BenchRow {
        arch,
        phase,
        height: size,
        width: size,
        patch,
        n,
        m,
        b,
        t_full_ms,
        t_patch_ms,
        speedup_measured: t_full_ms / t_patch_ms,
        speedup_theory: theory,
    })
}

fn ratio_str(r: &Ratio<u128>) -> String {
    if r.is_integer() {
        r.to_integer().to_string()
    } else {
        format!("{}/{}", r.numer(), r.denom())
    }
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from(BENCH_HEADER);
    s.push('\n');
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{:.3},{:.3},{:.3},{}",
            r.arch,
            r.phase,
            r.height,
            r.width,
            r.patch,
            r.n,
            r.m,
            r.b,
            r.t_full_ms,
            r.t_patch_ms,
            r.speedup_measured,
            ratio_str(&r.speedup_theory)
        )
        .expect("string write");
    }
    s
}
