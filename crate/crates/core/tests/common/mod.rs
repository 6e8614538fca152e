//! Independent f64 reference implementations used as test oracles.
#![allow(dead_code)]

pub mod gradcheck;

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    out
}

pub fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl Conv {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad.0 - self.kh) / self.stride.0 + 1,
            (self.w + 2 * self.pad.1 - self.kw) / self.stride.1 + 1,
        )
    }
}

/// Zero-padded cross-correlation, `[cin,h,w] ⋆ [cout,cin,kh,kw] → [cout,ho,wo]`.
pub fn conv2d(x: &[f64], w: &[f64], b: Option<&[f64]>, g: Conv) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let mut out = vec![0.0; g.cout * ho * wo];
    for o in 0..g.cout {
        for y in 0..ho {
            for xo in 0..wo {
                let mut acc = b.map_or(0.0, |b| b[o]);
                for c in 0..g.cin {
                    for i in 0..g.kh {
                        for j in 0..g.kw {
                            let iy = (y * g.stride.0 + i) as isize - g.pad.0 as isize;
                            let ix = (xo * g.stride.1 + j) as isize - g.pad.1 as isize;
                            if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                continue;
                            }
                            acc += x[(c * g.h + iy as usize) * g.w + ix as usize]
                                * w[((o * g.cin + c) * g.kh + i) * g.kw + j];
                        }
                    }
                }
                out[(o * ho + y) * wo + xo] = acc;
            }
        }
    }
    out
}

pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let d = gamma.len();
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + 1e-5).sqrt();
        out.extend(row.iter().enumerate().map(|(j, v)| (v - mean) * rs * gamma[j] + beta[j]));
    }
    out
}

pub fn softmax(x: &[f64], d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn attention(q: &[f64], k: &[f64], v: &[f64], t: usize, s: usize, d: usize, heads: usize) -> Vec<f64> {
    let dh = d / heads;
    let mut out = vec![0.0; t * d];
    for h in 0..heads {
        for i in 0..t {
            let logits: Vec<f64> = (0..s)
                .map(|j| (0..dh).map(|c| q[i * d + h * dh + c] * k[j * d + h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let p = softmax(&logits, s);
            for c in 0..dh {
                out[i * d + h * dh + c] = (0..s).map(|j| p[j] * v[j * d + h * dh + c]).sum();
            }
        }
    }
    out
}

/// Rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(x: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..x.len()).collect();
        idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
        let mut r = vec![0.0; x.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &p in &idx[i..=j] {
                r[p] = avg;
            }
            i = j + 1;
        }
        r
    }
    pearson(&ranks(a), &ranks(b))
}

/// Plain two-pass Pearson in f64.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Central difference gradient of a scalar function of one input block.
pub fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}
