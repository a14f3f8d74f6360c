//! Cayley–Dickson hypercomplex numbers of dimension 1, 2, 4 or 8 stored as
//! plain `f64` slices: `(a, b)(c, d) = (ac − d̄b, da + bc̄)`.

pub const MAX_DIM: usize = 8;

/// Smallest power of two `>= bands`.
pub fn dimension_for(bands: usize) -> usize {
    bands.max(1).next_power_of_two()
}

/// `x̄`: negate every imaginary component.
pub fn conj(x: &[f64], out: &mut [f64]) {
    out[0] = x[0];
    for (o, v) in out[1..x.len()].iter_mut().zip(&x[1..]) {
        *o = -v;
    }
}

/// `out = x · y`; all three slices have the same power-of-two length `<= 8`.
pub fn mul(x: &[f64], y: &[f64], out: &mut [f64]) {
    let n = x.len();
    debug_assert!(n.is_power_of_two() && n <= MAX_DIM && y.len() == n && out.len() >= n);
    if n == 1 {
        out[0] = x[0] * y[0];
        return;
    }
    let h = n / 2;
    let (a, b) = x.split_at(h);
    let (c, d) = y.split_at(h);
    let mut dc = [0.0; MAX_DIM];
    let mut cc = [0.0; MAX_DIM];
    conj(d, &mut dc[..h]);
    conj(c, &mut cc[..h]);
    let (mut t1, mut t2) = ([0.0; MAX_DIM], [0.0; MAX_DIM]);
    mul(a, c, &mut t1[..h]);
    mul(&dc[..h], b, &mut t2[..h]);
    for i in 0..h {
        out[i] = t1[i] - t2[i];
    }
    mul(d, a, &mut t1[..h]);
    mul(b, &cc[..h], &mut t2[..h]);
    for i in 0..h {
        out[h + i] = t1[i] + t2[i];
    }
}

pub fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}
