//! Direct (loop-nest) convolution kernels for layers with few channels,
//! where packing for a general matrix product costs more than it saves.
//!
//! All kernels walk output rows so the innermost loop is a contiguous
//! multiply-add over the output width when the horizontal stride is 1.

use crate::autograd::ConvGeom;

/// Below this many `cout · cin` pairs the direct kernels win.
pub(crate) const DIRECT_MAX_PAIRS: usize = 128;

pub(crate) fn use_direct(g: &ConvGeom) -> bool {
    g.sw == 1 && g.cout * g.cin <= DIRECT_MAX_PAIRS
}

/// Dot product with eight independent accumulators so it vectorizes.
#[inline(always)]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    acc.iter().sum::<f32>() + tail
}

/// Output columns `[lo, hi)` whose input column `ow·sw + kj − pw` is in range.
fn col_range(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let lo = if g.pw > kj { (g.pw - kj).div_ceil(g.sw) } else { 0 };
    let reach = g.w + g.pw;
    if reach <= kj {
        return (0, 0);
    }
    let hi = ((reach - kj - 1) / g.sw + 1).min(g.wo);
    (lo.min(hi), hi)
}

fn in_row(g: &ConvGeom, oh: usize, ki: usize) -> Option<usize> {
    let ih = (oh * g.sh + ki) as isize - g.ph as isize;
    (ih >= 0 && (ih as usize) < g.h).then_some(ih as usize)
}


/// Zero-padded copy of a `[cin, h, w]` input, `[cin, h + 2ph, w + 2pw]`.
fn pad(x: &[f32], g: &ConvGeom) -> (Vec<f32>, usize, usize) {
    let (hp, wp) = (g.h + 2 * g.ph, g.w + 2 * g.pw);
    let mut out = vec![0.0; g.cin * hp * wp];
    for c in 0..g.cin {
        for r in 0..g.h {
            let src = &x[(c * g.h + r) * g.w..][..g.w];
            out[(c * hp + r + g.ph) * wp + g.pw..][..g.w].copy_from_slice(src);
        }
    }
    (out, hp, wp)
}

fn three_tap(g: &ConvGeom) -> bool {
    g.kw == 3 && g.sw == 1
}

#[inline(always)]
fn forward_k3_body(x: &[f32], w: &[f32], g: &ConvGeom, out: &mut [f32]) {
    let (xp, hp, wp) = pad(x, g);
    let wo = g.wo;
    for co in 0..g.cout {
        for oh in 0..g.ho {
            let orow = &mut out[(co * g.ho + oh) * wo..][..wo];
            for ci in 0..g.cin {
                for ki in 0..g.kh {
                    let r = oh * g.sh + ki;
                    let row = &xp[(ci * hp + r) * wp..][..wp];
                    let k = &w[((co * g.cin + ci) * g.kh + ki) * 3..][..3];
                    let (w0, w1, w2) = (k[0], k[1], k[2]);
                    let (a, b, c) = (&row[..wo], &row[1..wo + 1], &row[2..wo + 2]);
                    for j in 0..wo {
                        orow[j] += w0 * a[j] + w1 * b[j] + w2 * c[j];
                    }
                }
            }
        }
    }
}

#[inline(always)]
fn backward_weights_k3_body(x: &[f32], gout: &[f32], g: &ConvGeom, dw: &mut [f32]) {
    let (xp, hp, wp) = pad(x, g);
    let wo = g.wo;
    // Column-wise partial sums, reduced once per kernel row.
    let mut acc = vec![0.0f32; 3 * wo];
    for co in 0..g.cout {
        for ci in 0..g.cin {
            for ki in 0..g.kh {
                acc.fill(0.0);
                let (a0, rest) = acc.split_at_mut(wo);
                let (a1, a2) = rest.split_at_mut(wo);
                for oh in 0..g.ho {
                    let grow = &gout[(co * g.ho + oh) * wo..][..wo];
                    let r = oh * g.sh + ki;
                    let row = &xp[(ci * hp + r) * wp..][..wp];
                    let (x0, x1, x2) = (&row[..wo], &row[1..wo + 1], &row[2..wo + 2]);
                    for j in 0..wo {
                        let gv = grow[j];
                        a0[j] += gv * x0[j];
                        a1[j] += gv * x1[j];
                        a2[j] += gv * x2[j];
                    }
                }
                let d = &mut dw[((co * g.cin + ci) * g.kh + ki) * 3..][..3];
                d[0] += a0.iter().sum::<f32>();
                d[1] += a1.iter().sum::<f32>();
                d[2] += a2.iter().sum::<f32>();
            }
        }
    }
}

#[inline(always)]
fn backward_input_k3_body(w: &[f32], gout: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let (hp, wp) = (g.h + 2 * g.ph, g.w + 2 * g.pw);
    let wo = g.wo;
    // Output-gradient rows padded by two zeros on each side so every padded
    // input column j sees taps gp[j + 2 - kj].
    let mut gp = vec![0.0f32; wo + 4];
    let mut dxp = vec![0.0f32; g.cin * hp * wp];
    for co in 0..g.cout {
        for oh in 0..g.ho {
            gp[2..wo + 2].copy_from_slice(&gout[(co * g.ho + oh) * wo..][..wo]);
            let (a, b, c) = (&gp[2..wp + 2], &gp[1..wp + 1], &gp[..wp]);
            for ci in 0..g.cin {
                for ki in 0..g.kh {
                    let r = oh * g.sh + ki;
                    let row = &mut dxp[(ci * hp + r) * wp..][..wp];
                    let k = &w[((co * g.cin + ci) * g.kh + ki) * 3..][..3];
                    let (w0, w1, w2) = (k[0], k[1], k[2]);
                    for j in 0..wp {
                        row[j] += w0 * a[j] + w1 * b[j] + w2 * c[j];
                    }
                }
            }
        }
    }
    for c in 0..g.cin {
        for r in 0..g.h {
            let src = &dxp[(c * hp + r + g.ph) * wp + g.pw..][..g.w];
            let dst = &mut dx[(c * g.h + r) * g.w..][..g.w];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
}

macro_rules! multiversion {
    ($name:ident, $body:ident, $avx:ident, ($($arg:ident: $ty:ty),*)) => {
        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = "avx2,fma")]
        unsafe fn $avx($($arg: $ty),*) {
            $body($($arg),*)
        }

        fn $name($($arg: $ty),*) {
            #[cfg(target_arch = "x86_64")]
            if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
                // SAFETY: the required CPU features were detected at runtime.
                return unsafe { $avx($($arg),*) };
            }
            $body($($arg),*)
        }
    };
}

multiversion!(forward_k3, forward_k3_body, forward_k3_avx, (x: &[f32], w: &[f32], g: &ConvGeom, out: &mut [f32]));
multiversion!(backward_weights_k3, backward_weights_k3_body, backward_weights_k3_avx, (x: &[f32], gout: &[f32], g: &ConvGeom, dw: &mut [f32]));
multiversion!(backward_input_k3, backward_input_k3_body, backward_input_k3_avx, (w: &[f32], gout: &[f32], g: &ConvGeom, dx: &mut [f32]));

/// `out` must hold the bias (or zeros) on entry.
pub(crate) fn forward(x: &[f32], w: &[f32], g: &ConvGeom, out: &mut [f32]) {
    if three_tap(g) {
        return forward_k3(x, w, g, out);
    }
    let ranges: Vec<(usize, usize)> = (0..g.kw).map(|kj| col_range(g, kj)).collect();
    for co in 0..g.cout {
        for oh in 0..g.ho {
            let orow = &mut out[(co * g.ho + oh) * g.wo..(co * g.ho + oh + 1) * g.wo];
            for ci in 0..g.cin {
                for ki in 0..g.kh {
                    let Some(ih) = in_row(g, oh, ki) else { continue };
                    let xrow = &x[(ci * g.h + ih) * g.w..(ci * g.h + ih + 1) * g.w];
                    let wk = &w[((co * g.cin + ci) * g.kh + ki) * g.kw..][..g.kw];
                    for (kj, &wv) in wk.iter().enumerate() {
                        let (lo, hi) = ranges[kj];
                        if lo >= hi {
                            continue;
                        }
                        let start = lo * g.sw + kj - g.pw;
                        if g.sw == 1 {
                            let xs = &xrow[start..start + (hi - lo)];
                            for (o, &xv) in orow[lo..hi].iter_mut().zip(xs) {
                                *o += wv * xv;
                            }
                        } else {
                            for (k, o) in orow[lo..hi].iter_mut().enumerate() {
                                *o += wv * xrow[start + k * g.sw];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates kernel gradients into `dw`.
pub(crate) fn backward_weights(x: &[f32], gout: &[f32], g: &ConvGeom, dw: &mut [f32]) {
    if three_tap(g) {
        return backward_weights_k3(x, gout, g, dw);
    }
    let ranges: Vec<(usize, usize)> = (0..g.kw).map(|kj| col_range(g, kj)).collect();
    for co in 0..g.cout {
        for oh in 0..g.ho {
            let grow = &gout[(co * g.ho + oh) * g.wo..(co * g.ho + oh + 1) * g.wo];
            for ci in 0..g.cin {
                for ki in 0..g.kh {
                    let Some(ih) = in_row(g, oh, ki) else { continue };
                    let xrow = &x[(ci * g.h + ih) * g.w..(ci * g.h + ih + 1) * g.w];
                    let dk = &mut dw[((co * g.cin + ci) * g.kh + ki) * g.kw..][..g.kw];
                    for (kj, d) in dk.iter_mut().enumerate() {
                        let (lo, hi) = ranges[kj];
                        if lo >= hi {
                            continue;
                        }
                        let start = lo * g.sw + kj - g.pw;
                        let acc: f32 = if g.sw == 1 {
                            dot(&grow[lo..hi], &xrow[start..start + (hi - lo)])
                        } else {
                            grow[lo..hi]
                                .iter()
                                .enumerate()
                                .map(|(k, a)| a * xrow[start + k * g.sw])
                                .sum()
                        };
                        *d += acc;
                    }
                }
            }
        }
    }
}

/// Accumulates input gradients into `dx`.
pub(crate) fn backward_input(w: &[f32], gout: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    if three_tap(g) {
        return backward_input_k3(w, gout, g, dx);
    }
    let ranges: Vec<(usize, usize)> = (0..g.kw).map(|kj| col_range(g, kj)).collect();
    for co in 0..g.cout {
        for oh in 0..g.ho {
            let grow = &gout[(co * g.ho + oh) * g.wo..(co * g.ho + oh + 1) * g.wo];
            for ci in 0..g.cin {
                for ki in 0..g.kh {
                    let Some(ih) = in_row(g, oh, ki) else { continue };
                    let xrow = &mut dx[(ci * g.h + ih) * g.w..(ci * g.h + ih + 1) * g.w];
                    let wk = &w[((co * g.cin + ci) * g.kh + ki) * g.kw..][..g.kw];
                    for (kj, &wv) in wk.iter().enumerate() {
                        let (lo, hi) = ranges[kj];
                        if lo >= hi {
                            continue;
                        }
                        let start = lo * g.sw + kj - g.pw;
                        if g.sw == 1 {
                            let xs = &mut xrow[start..start + (hi - lo)];
                            for (d, &gv) in xs.iter_mut().zip(&grow[lo..hi]) {
                                *d += wv * gv;
                            }
                        } else {
                            for (k, &gv) in grow[lo..hi].iter().enumerate() {
                                xrow[start + k * g.sw] += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}
