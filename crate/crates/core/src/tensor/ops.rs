//! Forward and adjoint kernels. These are plain functions over immutable
//! tensors; [`Tape`](super::Tape) records calls to them and replays the
//! adjoints during backward.

use crate::error::{bail, Result};

use super::{Real, Tensor};

/// Denominator floor used by [`EltwiseKind::DivGuard`].
pub const DIV_GUARD_EPS: f64 = 1e-6;

/// Boundary handling for same-size convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    /// Mirror without repeating the edge sample (`d c b | a b c d | c b a`).
    Reflect,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EltwiseKind {
    Add,
    Sub,
    Mul,
    /// `a / d'` with `d' = sign(d) * max(|d|, 1e-6)`, `sign(0) = +1`.
    DivGuard,
}

/// Mirror an out-of-range index back into `0..n` (period `2n - 2`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Source index of tap `t` (0-based, kernel radius `rad`) for output `i`.
fn tap_source(pad: PadMode, i: usize, t: usize, rad: usize, n: usize) -> Option<usize> {
    let s = i as isize + t as isize - rad as isize;
    match pad {
        PadMode::Zero => (0..n as isize).contains(&s).then_some(s as usize),
        PadMode::Reflect => Some(reflect_index(s, n)),
    }
}

fn tap_table(pad: PadMode, k: usize, n: usize) -> Vec<Vec<Option<usize>>> {
    let rad = k / 2;
    (0..k).map(|t| (0..n).map(|i| tap_source(pad, i, t, rad, n)).collect()).collect()
}

fn check_same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        bail!(Dimension, "{what}: shapes {:?} and {:?} differ", a.shape(), b.shape());
    }
    Ok(())
}

// ---------------------------------------------------------------- conv2d

fn conv_geometry<T: Real>(input: &Tensor<T>, kernel: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<usize> {
    let [cout, cin, kh, kw] = kernel.shape();
    if kh != kw {
        bail!(Config, "conv kernel must be square, got {kh}x{kw}");
    }
    if kh % 2 == 0 {
        bail!(Config, "conv kernel size must be odd, got {kh}");
    }
    if input.channels() != cin {
        bail!(Dimension, "conv expects {cin} input channels, got {}", input.channels());
    }
    if let Some(b) = bias {
        if b.len() != cout {
            bail!(Dimension, "conv bias has {} entries for {cout} output channels", b.len());
        }
    }
    Ok(kh)
}

/// Unfold one sample into a `(cin*k*k) × (h*w)` column matrix.
#[allow(clippy::needless_range_loop)]
fn im2col<T: Real>(
    sample: &[T],
    cin: usize,
    h: usize,
    w: usize,
    rows: &[Vec<Option<usize>>],
    cols_tab: &[Vec<Option<usize>>],
    out: &mut [T],
) {
    let k = rows.len();
    let hw = h * w;
    for c in 0..cin {
        let plane = &sample[c * hw..(c + 1) * hw];
        for dy in 0..k {
            for dx in 0..k {
                let row = (c * k + dy) * k + dx;
                let dst = &mut out[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let drow = &mut dst[y * w..(y + 1) * w];
                    match rows[dy][y] {
                        None => drow.iter_mut().for_each(|v| *v = T::zero()),
                        Some(sy) => {
                            let src = &plane[sy * w..(sy + 1) * w];
                            for (x, d) in drow.iter_mut().enumerate() {
                                *d = match cols_tab[dx][x] {
                                    Some(sx) => src[sx],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back onto the sample.
#[allow(clippy::needless_range_loop)]
fn col2im<T: Real>(
    cols: &[T],
    cin: usize,
    h: usize,
    w: usize,
    rows: &[Vec<Option<usize>>],
    cols_tab: &[Vec<Option<usize>>],
    sample: &mut [T],
) {
    let k = rows.len();
    let hw = h * w;
    for c in 0..cin {
        let plane = &mut sample[c * hw..(c + 1) * hw];
        for dy in 0..k {
            for dx in 0..k {
                let row = (c * k + dy) * k + dx;
                let src = &cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let Some(sy) = rows[dy][y] else { continue };
                    let srow = &src[y * w..(y + 1) * w];
                    for (x, &g) in srow.iter().enumerate() {
                        if let Some(sx) = cols_tab[dx][x] {
                            plane[sy * w + sx] += g;
                        }
                    }
                }
            }
        }
    }
}

/// Same-size 2-D cross-correlation: `[N,Cin,H,W] * [Cout,Cin,k,k] (+ bias[Cout]) -> [N,Cout,H,W]`.
pub fn conv2d<T: Real>(input: &Tensor<T>, kernel: &Tensor<T>, bias: Option<&Tensor<T>>, pad: PadMode) -> Result<Tensor<T>> {
    let k = conv_geometry(input, kernel, bias)?;
    let [n, cin, h, w] = input.shape();
    let cout = kernel.shape()[0];
    let hw = h * w;
    let kk = cin * k * k;
    let rows = tap_table(pad, k, h);
    let cols_tab = tap_table(pad, k, w);
    let mut cols = vec![T::zero(); kk * hw];
    let mut out = Tensor::zeros([n, cout, h, w]);
    for s in 0..n {
        im2col(&input.data()[s * cin * hw..(s + 1) * cin * hw], cin, h, w, &rows, &cols_tab, &mut cols);
        let dst = &mut out.data_mut()[s * cout * hw..(s + 1) * cout * hw];
        if let Some(b) = bias {
            for (o, chunk) in dst.chunks_exact_mut(hw).enumerate() {
                chunk.iter_mut().for_each(|v| *v = b.data()[o]);
            }
        }
        T::gemm(cout, kk, hw, T::one(), kernel.data(), (kk as isize, 1), &cols, (hw as isize, 1), T::one(), dst, (hw as isize, 1));
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to whichever operands are requested.
pub struct ConvGrads<T: Real> {
    pub input: Option<Tensor<T>>,
    pub kernel: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    pad: PadMode,
    want: (bool, bool, bool),
) -> Result<ConvGrads<T>> {
    let k = conv_geometry(input, kernel, None)?;
    let [n, cin, h, w] = input.shape();
    let cout = kernel.shape()[0];
    if grad_out.shape() != [n, cout, h, w] {
        bail!(Dimension, "conv grad shape {:?} does not match output", grad_out.shape());
    }
    let hw = h * w;
    let kk = cin * k * k;
    let rows = tap_table(pad, k, h);
    let cols_tab = tap_table(pad, k, w);
    let (want_x, want_w, want_b) = want;
    let mut gx = want_x.then(|| Tensor::zeros(input.shape()));
    let mut gw = want_w.then(|| Tensor::zeros(kernel.shape()));
    let mut gb = want_b.then(|| Tensor::zeros([cout, 1, 1, 1]));
    let mut cols = if want_w || want_x { vec![T::zero(); kk * hw] } else { Vec::new() };
    for s in 0..n {
        let gy = &grad_out.data()[s * cout * hw..(s + 1) * cout * hw];
        if let Some(gb) = gb.as_mut() {
            for (o, chunk) in gy.chunks_exact(hw).enumerate() {
                let mut acc = T::zero();
                for &v in chunk {
                    acc += v;
                }
                gb.data_mut()[o] += acc;
            }
        }
        if let Some(gw) = gw.as_mut() {
            im2col(&input.data()[s * cin * hw..(s + 1) * cin * hw], cin, h, w, &rows, &cols_tab, &mut cols);
            T::gemm(cout, hw, kk, T::one(), gy, (hw as isize, 1), &cols, (1, hw as isize), T::one(), gw.data_mut(), (kk as isize, 1));
        }
        if let Some(gx) = gx.as_mut() {
            T::gemm(kk, cout, hw, T::one(), kernel.data(), (1, kk as isize), gy, (hw as isize, 1), T::zero(), &mut cols, (hw as isize, 1));
            col2im(&cols, cin, h, w, &rows, &cols_tab, &mut gx.data_mut()[s * cin * hw..(s + 1) * cin * hw]);
        }
    }
    Ok(ConvGrads { input: gx, kernel: gw, bias: gb })
}

// ---------------------------------------------------------------- bilinear

#[derive(Clone, Copy, Debug)]
struct Interp<T> {
    i0: usize,
    i1: usize,
    w0: T,
    w1: T,
}

/// Half-pixel-centre sampling positions: output `i` reads input coordinate
/// `(i + 0.5) / r - 0.5`, clamped to `[0, n - 1]`.
fn interp_table<T: Real>(n: usize, r: usize) -> Vec<Interp<T>> {
    (0..n * r)
        .map(|i| {
            let c = ((i as f64 + 0.5) / r as f64 - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = c.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            let f = c - i0 as f64;
            Interp { i0, i1, w0: T::from_f64(1.0 - f), w1: T::from_f64(f) }
        })
        .collect()
}

/// Number of output samples at each border whose sampling coordinate was
/// clamped, i.e. that would change if the input had more context.
pub fn upsample_halo(r: usize) -> usize {
    (0..r).filter(|&i| (i as f64 + 0.5) / r as f64 - 0.5 < 0.0).count()
}

pub fn bilinear_upsample<T: Real>(input: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    if r == 0 {
        bail!(Config, "upsampling ratio must be >= 1");
    }
    if r == 1 {
        return Ok(input.clone());
    }
    let [n, c, h, w] = input.shape();
    let ty = interp_table::<T>(h, r);
    let tx = interp_table::<T>(w, r);
    let (oh, ow) = (h * r, w * r);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for (src, dst) in input.data().chunks_exact(h * w).zip(out.data_mut().chunks_exact_mut(oh * ow)) {
        for (y, iy) in ty.iter().enumerate() {
            let r0 = &src[iy.i0 * w..(iy.i0 + 1) * w];
            let r1 = &src[iy.i1 * w..(iy.i1 + 1) * w];
            for (x, ix) in tx.iter().enumerate() {
                let top = ix.w0 * r0[ix.i0] + ix.w1 * r0[ix.i1];
                let bot = ix.w0 * r1[ix.i0] + ix.w1 * r1[ix.i1];
                dst[y * ow + x] = iy.w0 * top + iy.w1 * bot;
            }
        }
    }
    Ok(out)
}

pub fn bilinear_upsample_backward<T: Real>(grad_out: &Tensor<T>, input_shape: [usize; 4], r: usize) -> Tensor<T> {
    if r == 1 {
        return grad_out.clone();
    }
    let [_, _, h, w] = input_shape;
    let ty = interp_table::<T>(h, r);
    let tx = interp_table::<T>(w, r);
    let (oh, ow) = (h * r, w * r);
    let mut gin = Tensor::zeros(input_shape);
    for (g, dst) in grad_out.data().chunks_exact(oh * ow).zip(gin.data_mut().chunks_exact_mut(h * w)) {
        for (y, iy) in ty.iter().enumerate() {
            for (x, ix) in tx.iter().enumerate() {
                let v = g[y * ow + x];
                let top = iy.w0 * v;
                let bot = iy.w1 * v;
                dst[iy.i0 * w + ix.i0] += ix.w0 * top;
                dst[iy.i0 * w + ix.i1] += ix.w1 * top;
                dst[iy.i1 * w + ix.i0] += ix.w0 * bot;
                dst[iy.i1 * w + ix.i1] += ix.w1 * bot;
            }
        }
    }
    gin
}

// ---------------------------------------------------------------- eltwise

fn broadcast_ok<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<bool> {
    let [an, _, ah, aw] = a.shape();
    let [bn, bc, bh, bw] = b.shape();
    if a.shape() == b.shape() {
        Ok(false)
    } else if bn == an && bh == ah && bw == aw && bc == 1 {
        Ok(true)
    } else {
        bail!(Dimension, "cannot combine shapes {:?} and {:?}", a.shape(), b.shape())
    }
}

fn guard<T: Real>(d: T) -> (T, bool) {
    let eps = T::from_f64(DIV_GUARD_EPS);
    if d.abs() >= eps {
        (d, false)
    } else if d < T::zero() {
        (-eps, true)
    } else {
        (eps, true)
    }
}

/// Elementwise binary op; `b` may have one channel, broadcast over `a`'s channels.
pub fn eltwise<T: Real>(a: &Tensor<T>, b: &Tensor<T>, kind: EltwiseKind) -> Result<Tensor<T>> {
    let bcast = broadcast_ok(a, b)?;
    let [n, c, h, w] = a.shape();
    let hw = h * w;
    let mut out = Tensor::zeros(a.shape());
    for s in 0..n {
        for ch in 0..c {
            let pa = a.plane(s, ch);
            let pb = if bcast { b.plane(s, 0) } else { b.plane(s, ch) };
            let dst = &mut out.data_mut()[(s * c + ch) * hw..(s * c + ch + 1) * hw];
            for i in 0..hw {
                dst[i] = match kind {
                    EltwiseKind::Add => pa[i] + pb[i],
                    EltwiseKind::Sub => pa[i] - pb[i],
                    EltwiseKind::Mul => pa[i] * pb[i],
                    EltwiseKind::DivGuard => pa[i] / guard(pb[i]).0,
                };
            }
        }
    }
    Ok(out)
}

/// Returns `(grad_a, grad_b)`; `grad_b` is reduced over channels when `b` was broadcast.
pub fn eltwise_backward<T: Real>(a: &Tensor<T>, b: &Tensor<T>, kind: EltwiseKind, grad_out: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let bcast = broadcast_ok(a, b)?;
    let [n, c, h, w] = a.shape();
    let hw = h * w;
    let mut ga = Tensor::zeros(a.shape());
    let mut gb = Tensor::zeros(b.shape());
    for s in 0..n {
        for ch in 0..c {
            let pa = a.plane(s, ch);
            let bc = if bcast { 0 } else { ch };
            let pb = b.plane(s, bc);
            let g = grad_out.plane(s, ch);
            let ga_p = &mut ga.data_mut()[(s * c + ch) * hw..(s * c + ch + 1) * hw];
            for i in 0..hw {
                ga_p[i] = match kind {
                    EltwiseKind::Add | EltwiseKind::Sub => g[i],
                    EltwiseKind::Mul => g[i] * pb[i],
                    EltwiseKind::DivGuard => g[i] / guard(pb[i]).0,
                };
            }
            let gb_p = gb.plane_mut(s, bc);
            for i in 0..hw {
                gb_p[i] += match kind {
                    EltwiseKind::Add => g[i],
                    EltwiseKind::Sub => -g[i],
                    EltwiseKind::Mul => g[i] * pa[i],
                    EltwiseKind::DivGuard => {
                        let (d, active) = guard(pb[i]);
                        if active {
                            T::zero()
                        } else {
                            -g[i] * pa[i] / (d * d)
                        }
                    }
                };
            }
        }
    }
    Ok((ga, gb))
}

// ---------------------------------------------------------------- misc

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Real>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = input.data().iter().zip(grad_out.data()).map(|(&x, &g)| if x > T::zero() { g } else { T::zero() }).collect();
    Tensor::from_vec(input.shape(), data).expect("same shape")
}

pub fn scale<T: Real>(input: &Tensor<T>, factor: T) -> Tensor<T> {
    input.map(|v| v * factor)
}

/// Mean absolute difference, accumulated in `f64` in storage order.
pub fn l1_mean<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    check_same_shape(a, b, "l1_mean")?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (*x - *y).abs().as_f64()).sum();
    Ok(T::from_f64(sum / a.len() as f64))
}

/// Gradient of [`l1_mean`] with respect to `a` (negate for `b`); zero at ties.
pub fn l1_mean_backward<T: Real>(a: &Tensor<T>, b: &Tensor<T>, grad: T) -> Tensor<T> {
    let scale = grad / T::from_f64(a.len() as f64);
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            if x > y {
                scale
            } else if x < y {
                -scale
            } else {
                T::zero()
            }
        })
        .collect();
    Tensor::from_vec(a.shape(), data).expect("same shape")
}

pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, ca, h, w] = a.shape();
    let [nb, cb, hb, wb] = b.shape();
    if (n, h, w) != (nb, hb, wb) {
        bail!(Dimension, "concat of {:?} and {:?}", a.shape(), b.shape());
    }
    let hw = h * w;
    let mut data = Vec::with_capacity(n * (ca + cb) * hw);
    for s in 0..n {
        data.extend_from_slice(&a.data()[s * ca * hw..(s + 1) * ca * hw]);
        data.extend_from_slice(&b.data()[s * cb * hw..(s + 1) * cb * hw]);
    }
    Tensor::from_vec([n, ca + cb, h, w], data)
}

/// Split a concatenation gradient back into its two parts.
pub fn split_channels<T: Real>(g: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = g.shape();
    let hw = h * w;
    let cb = c - ca;
    let mut ga = Vec::with_capacity(n * ca * hw);
    let mut gb = Vec::with_capacity(n * cb * hw);
    for s in 0..n {
        let base = s * c * hw;
        ga.extend_from_slice(&g.data()[base..base + ca * hw]);
        gb.extend_from_slice(&g.data()[base + ca * hw..base + c * hw]);
    }
    (Tensor::from_vec([n, ca, h, w], ga).expect("split"), Tensor::from_vec([n, cb, h, w], gb).expect("split"))
}

// ---------------------------------------------------------------- blur / decimate

fn check_taps<T: Real>(channels: usize, taps: &[Vec<T>]) -> Result<()> {
    if taps.len() != 1 && taps.len() != channels {
        bail!(Dimension, "blur has {} tap sets for {channels} bands", taps.len());
    }
    if taps.iter().any(|t| t.len() % 2 == 0) {
        bail!(Config, "blur taps must have odd length");
    }
    Ok(())
}

/// Separable per-band blur with reflect boundaries. `taps` holds one 1-D
/// filter per band, or a single filter applied to every band.
pub fn separable_blur<T: Real>(input: &Tensor<T>, taps: &[Vec<T>]) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.shape();
    check_taps(c, taps)?;
    let mut out = Tensor::zeros(input.shape());
    let mut tmp = vec![T::zero(); h * w];
    for s in 0..n {
        for ch in 0..c {
            let t = if taps.len() == 1 { &taps[0] } else { &taps[ch] };
            let rows = tap_table(PadMode::Reflect, t.len(), h);
            let cols = tap_table(PadMode::Reflect, t.len(), w);
            let src = input.plane(s, ch);
            for y in 0..h {
                for x in 0..w {
                    let mut acc = T::zero();
                    for (k, &tk) in t.iter().enumerate() {
                        acc += tk * src[y * w + cols[k][x].expect("reflect")];
                    }
                    tmp[y * w + x] = acc;
                }
            }
            let dst = out.plane_mut(s, ch);
            for y in 0..h {
                for x in 0..w {
                    let mut acc = T::zero();
                    for (k, &tk) in t.iter().enumerate() {
                        acc += tk * tmp[rows[k][y].expect("reflect") * w + x];
                    }
                    dst[y * w + x] = acc;
                }
            }
        }
    }
    Ok(out)
}

pub fn separable_blur_backward<T: Real>(grad_out: &Tensor<T>, taps: &[Vec<T>]) -> Result<Tensor<T>> {
    let [n, c, h, w] = grad_out.shape();
    check_taps(c, taps)?;
    let mut gin = Tensor::zeros(grad_out.shape());
    let mut gtmp = vec![T::zero(); h * w];
    for s in 0..n {
        for ch in 0..c {
            let t = if taps.len() == 1 { &taps[0] } else { &taps[ch] };
            let rows = tap_table(PadMode::Reflect, t.len(), h);
            let cols = tap_table(PadMode::Reflect, t.len(), w);
            let g = grad_out.plane(s, ch);
            gtmp.iter_mut().for_each(|v| *v = T::zero());
            for y in 0..h {
                for x in 0..w {
                    let v = g[y * w + x];
                    for (k, &tk) in t.iter().enumerate() {
                        gtmp[rows[k][y].expect("reflect") * w + x] += tk * v;
                    }
                }
            }
            let dst = gin.plane_mut(s, ch);
            for y in 0..h {
                for x in 0..w {
                    let v = gtmp[y * w + x];
                    for (k, &tk) in t.iter().enumerate() {
                        dst[y * w + cols[k][x].expect("reflect")] += tk * v;
                    }
                }
            }
        }
    }
    Ok(gin)
}

/// Keep rows/cols `i*r + offset`.
pub fn decimate<T: Real>(input: &Tensor<T>, r: usize, offset: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.shape();
    if r == 0 || offset >= r {
        bail!(Config, "decimation ratio {r} with offset {offset}");
    }
    if h % r != 0 || w % r != 0 {
        bail!(Geometry, "{h}x{w} is not divisible by ratio {r}");
    }
    let (oh, ow) = (h / r, w / r);
    let mut data = Vec::with_capacity(n * c * oh * ow);
    for plane in input.data().chunks_exact(h * w) {
        for y in 0..oh {
            let row = &plane[(y * r + offset) * w..(y * r + offset + 1) * w];
            data.extend((0..ow).map(|x| row[x * r + offset]));
        }
    }
    Tensor::from_vec([n, c, oh, ow], data)
}

pub fn decimate_backward<T: Real>(grad_out: &Tensor<T>, input_shape: [usize; 4], r: usize, offset: usize) -> Tensor<T> {
    let [_, _, h, w] = input_shape;
    let (oh, ow) = (h / r, w / r);
    let mut gin = Tensor::zeros(input_shape);
    for (g, dst) in grad_out.data().chunks_exact(oh * ow).zip(gin.data_mut().chunks_exact_mut(h * w)) {
        for y in 0..oh {
            for x in 0..ow {
                dst[(y * r + offset) * w + x * r + offset] = g[y * ow + x];
            }
        }
    }
    gin
}
