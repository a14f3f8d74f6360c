//! Brute-force metric oracles: every window recomputed from raw sums.

use erft::raster::RasterImage;

/// Product table of the Cayley–Dickson basis units:
/// `e_i · e_j = sign[i][j] · e_{index[i][j]}`.
pub struct UnitTable {
    pub dim: usize,
    pub sign: Vec<Vec<f64>>,
    pub index: Vec<Vec<usize>>,
}

impl UnitTable {
    /// Built by doubling: units `(u, 0)` and `(0, u)` of the half algebra.
    pub fn new(dim: usize) -> Self {
        assert!(dim.is_power_of_two() && dim <= 8);
        let mut t = UnitTable { dim: 1, sign: vec![vec![1.0]], index: vec![vec![0]] };
        while t.dim < dim {
            let h = t.dim;
            let n = 2 * h;
            let mut sign = vec![vec![0.0; n]; n];
            let mut index = vec![vec![0; n]; n];
            // conj of a half-algebra unit: e_0 fixed, others negated
            let cj = |u: usize| if u == 0 { 1.0 } else { -1.0 };
            for i in 0..n {
                for j in 0..n {
                    let (ia, ib) = (i % h, i / h);
                    let (ja, jb) = (j % h, j / h);
                    // (a, b)(c, d) = (ac - d̄b, da + bc̄) with one unit per slot
                    let (s, k) = match (ib, jb) {
                        (0, 0) => (t.sign[ia][ja], t.index[ia][ja]),
                        (1, 1) => (-cj(ja) * t.sign[ja][ia], t.index[ja][ia]),
                        (0, 1) => (t.sign[ja][ia], t.index[ja][ia] + h),
                        _ => (cj(ja) * t.sign[ia][ja], t.index[ia][ja] + h),
                    };
                    sign[i][j] = s;
                    index[i][j] = k;
                }
            }
            t = UnitTable { dim: n, sign, index };
        }
        t
    }

    pub fn mul(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for i in 0..self.dim {
            for j in 0..self.dim {
                out[self.index[i][j]] += self.sign[i][j] * x[i] * y[j];
            }
        }
        out
    }
}

fn window_origins(h: usize, w: usize, size: usize, stride: usize) -> Vec<(usize, usize)> {
    let mut v = Vec::new();
    let mut y = 0;
    while y + size <= h {
        let mut x = 0;
        while x + size <= w {
            v.push((y, x));
            x += stride;
        }
        y += stride;
    }
    v
}

/// Textbook `4 σ_ab μ_a μ_b / ((σ_a² + σ_b²)(μ_a² + μ_b²))` per window, from raw
/// moments `E[ab] − E[a]E[b]`.
pub fn q_index(a: &[f32], b: &[f32], h: usize, w: usize, size: usize, stride: usize) -> f64 {
    let qs: Vec<f64> = window_origins(h, w, size, stride)
        .into_iter()
        .map(|(y0, x0)| {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y0 + size {
                for x in x0..x0 + size {
                    let (p, q) = (a[y * w + x] as f64, b[y * w + x] as f64);
                    sa += p;
                    sb += q;
                    saa += p * p;
                    sbb += q * q;
                    sab += p * q;
                }
            }
            let n = (size * size) as f64;
            let (ma, mb) = (sa / n, sb / n);
            let va = saa / n - ma * ma;
            let vb = sbb / n - mb * mb;
            let cov = sab / n - ma * mb;
            4.0 * cov * ma * mb / ((va + vb) * (ma * ma + mb * mb))
        })
        .collect();
    qs.iter().sum::<f64>() / qs.len() as f64
}

/// Q2n from the unit product table, raw moments `E[z₁ z̄₂] − μ₁ μ̄₂`.
pub fn q2n(a: &RasterImage, b: &RasterImage, size: usize, stride: usize) -> f64 {
    let c = a.channels();
    let dim = c.next_power_of_two();
    let table = UnitTable::new(dim);
    let (h, w) = (a.height(), a.width());
    let vec_at = |img: &RasterImage, y: usize, x: usize| -> Vec<f64> {
        (0..dim).map(|k| if k < c { img.get(k, y, x) as f64 } else { 0.0 }).collect()
    };
    let conj = |v: &[f64]| -> Vec<f64> { v.iter().enumerate().map(|(k, &x)| if k == 0 { x } else { -x }).collect() };
    let norm2 = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    let qs: Vec<f64> = window_origins(h, w, size, stride)
        .into_iter()
        .map(|(y0, x0)| {
            let n = (size * size) as f64;
            let (mut m1, mut m2, mut cross) = (vec![0.0; dim], vec![0.0; dim], vec![0.0; dim]);
            let (mut e1, mut e2) = (0.0, 0.0);
            for y in y0..y0 + size {
                for x in x0..x0 + size {
                    let (p, q) = (vec_at(a, y, x), vec_at(b, y, x));
                    let pq = table.mul(&p, &conj(&q));
                    for k in 0..dim {
                        m1[k] += p[k] / n;
                        m2[k] += q[k] / n;
                        cross[k] += pq[k] / n;
                    }
                    e1 += norm2(&p) / n;
                    e2 += norm2(&q) / n;
                }
            }
            let mm = table.mul(&m1, &conj(&m2));
            let cov: Vec<f64> = cross.iter().zip(&mm).map(|(x, y)| x - y).collect();
            let (v1, v2) = (e1 - norm2(&m1), e2 - norm2(&m2));
            let (n1, n2) = (norm2(&m1).sqrt(), norm2(&m2).sqrt());
            4.0 * norm2(&cov).sqrt() * n1 * n2 / ((v1 + v2) * (n1 * n1 + n2 * n2))
        })
        .collect();
    qs.iter().sum::<f64>() / qs.len() as f64
}

/// `(1 − D_λ)(1 − D_s)`.
pub fn hqnr(d_lambda: f64, d_s: f64) -> f64 {
    (1.0 - d_lambda) * (1.0 - d_s)
}
