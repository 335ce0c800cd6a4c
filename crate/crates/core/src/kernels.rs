// Raw forward/adjoint kernels over row-major (B, C, H, W) buffers.
//
// Each parallel loop owns one output plane (or one weight slice) and sums
// its contributions in a fixed order, so results are bit-identical for any
// worker count.

use crate::par;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Range of output columns whose input column `ox*stride + kx - pad`
    /// is in bounds. Only used on the stride-1 fast path.
    #[inline]
    fn cols(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx);
        let hi = (self.w + self.pad).saturating_sub(kx).min(self.ow);
        (lo, hi.max(lo))
    }

    #[inline]
    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }

    #[inline]
    fn in_col(&self, ox: usize, kx: usize) -> Option<usize> {
        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
        (ix >= 0 && (ix as usize) < self.w).then_some(ix as usize)
    }
}

pub(crate) fn conv2d_forward(x: &[f64], weight: &[f64], bias: &[f64], g: ConvGeom) -> Vec<f64> {
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let ksize = g.kh * g.kw;
    let mut out = vec![0.0; g.batch * g.cout * plane_out];
    par::for_each_chunk_mut(&mut out, plane_out, |idx, out| {
        let (b, co) = (idx / g.cout, idx % g.cout);
        out.fill(bias[co]);
        let xb = &x[b * g.cin * plane_in..(b + 1) * g.cin * plane_in];
        let wc = &weight[co * g.cin * ksize..(co + 1) * g.cin * ksize];
        for ci in 0..g.cin {
            let xin = &xb[ci * plane_in..(ci + 1) * plane_in];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = wc[ci * ksize + ky * g.kw + kx];
                    for oy in 0..g.oh {
                        let Some(iy) = g.in_row(oy, ky) else { continue };
                        let row_in = &xin[iy * g.w..(iy + 1) * g.w];
                        let row_out = &mut out[oy * g.ow..(oy + 1) * g.ow];
                        if g.stride == 1 {
                            let (lo, hi) = g.cols(kx);
                            let shift = kx as isize - g.pad as isize;
                            for ox in lo..hi {
                                row_out[ox] += wv * row_in[(ox as isize + shift) as usize];
                            }
                        } else {
                            for (ox, o) in row_out.iter_mut().enumerate() {
                                if let Some(ix) = g.in_col(ox, kx) {
                                    *o += wv * row_in[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Adjoint of the convolution with respect to its input.
pub(crate) fn conv2d_grad_input(gout: &[f64], weight: &[f64], g: ConvGeom) -> Vec<f64> {
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let ksize = g.kh * g.kw;
    let mut gin = vec![0.0; g.batch * g.cin * plane_in];
    par::for_each_chunk_mut(&mut gin, plane_in, |idx, gin| {
        let (b, ci) = (idx / g.cin, idx % g.cin);
        for co in 0..g.cout {
            let go = &gout[(b * g.cout + co) * plane_out..(b * g.cout + co + 1) * plane_out];
            let wc = &weight[(co * g.cin + ci) * ksize..(co * g.cin + ci + 1) * ksize];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = wc[ky * g.kw + kx];
                    for oy in 0..g.oh {
                        let Some(iy) = g.in_row(oy, ky) else { continue };
                        let row_go = &go[oy * g.ow..(oy + 1) * g.ow];
                        let row_gi = &mut gin[iy * g.w..(iy + 1) * g.w];
                        if g.stride == 1 {
                            let (lo, hi) = g.cols(kx);
                            let shift = kx as isize - g.pad as isize;
                            for ox in lo..hi {
                                row_gi[(ox as isize + shift) as usize] += wv * row_go[ox];
                            }
                        } else {
                            for (ox, &d) in row_go.iter().enumerate() {
                                if let Some(ix) = g.in_col(ox, kx) {
                                    row_gi[ix] += wv * d;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    gin
}

/// Adjoints with respect to weight and bias.
pub(crate) fn conv2d_grad_params(gout: &[f64], x: &[f64], g: ConvGeom) -> (Vec<f64>, Vec<f64>) {
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let ksize = g.kh * g.kw;
    let mut gw = vec![0.0; g.cout * g.cin * ksize];
    par::for_each_chunk_mut(&mut gw, ksize, |idx, gw| {
        let (co, ci) = (idx / g.cin, idx % g.cin);
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let mut acc = 0.0;
                for b in 0..g.batch {
                    let go = &gout[(b * g.cout + co) * plane_out..(b * g.cout + co + 1) * plane_out];
                    let xin = &x[(b * g.cin + ci) * plane_in..(b * g.cin + ci + 1) * plane_in];
                    for oy in 0..g.oh {
                        let Some(iy) = g.in_row(oy, ky) else { continue };
                        let row_go = &go[oy * g.ow..(oy + 1) * g.ow];
                        let row_in = &xin[iy * g.w..(iy + 1) * g.w];
                        if g.stride == 1 {
                            let (lo, hi) = g.cols(kx);
                            let shift = kx as isize - g.pad as isize;
                            for ox in lo..hi {
                                acc += row_go[ox] * row_in[(ox as isize + shift) as usize];
                            }
                        } else {
                            for (ox, &d) in row_go.iter().enumerate() {
                                if let Some(ix) = g.in_col(ox, kx) {
                                    acc += d * row_in[ix];
                                }
                            }
                        }
                    }
                }
                gw[ky * g.kw + kx] = acc;
            }
        }
    });
    let mut gb = vec![0.0; g.cout];
    for (co, gbv) in gb.iter_mut().enumerate() {
        for b in 0..g.batch {
            let go = &gout[(b * g.cout + co) * plane_out..(b * g.cout + co + 1) * plane_out];
            *gbv += go.iter().sum::<f64>();
        }
    }
    (gw, gb)
}

/// 2x2 max pooling with stride 2. Returns the pooled values and, per
/// output element, the flat input index that won (first in row-major order
/// on ties).
pub(crate) fn maxpool2x2_forward(
    x: &[f64],
    planes: usize,
    h: usize,
    w: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; planes * oh * ow];
    let mut arg = vec![0usize; planes * oh * ow];
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                let o = p * oh * ow + oy * ow + ox;
                out[o] = x[best];
                arg[o] = best;
            }
        }
    }
    (out, arg)
}

/// Source taps for one output coordinate of a 2x bilinear upsample with
/// half-pixel centers (align-corners = false).
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub i0: usize,
    pub i1: usize,
    pub w0: f64,
    pub w1: f64,
}

pub(crate) fn upsample_taps(n_in: usize) -> Vec<Tap> {
    (0..2 * n_in)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let frac = src - i0 as f64;
            Tap {
                i0,
                i1,
                w0: 1.0 - frac,
                w1: frac,
            }
        })
        .collect()
}

pub(crate) fn upsample2x_forward(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (ty, tx) = (upsample_taps(h), upsample_taps(w));
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; planes * oh * ow];
    par::for_each_chunk_mut(&mut out, oh * ow, |p, out| {
        let xp = &x[p * h * w..(p + 1) * h * w];
        for (oy, a) in ty.iter().enumerate() {
            let r0 = &xp[a.i0 * w..(a.i0 + 1) * w];
            let r1 = &xp[a.i1 * w..(a.i1 + 1) * w];
            for (ox, b) in tx.iter().enumerate() {
                out[oy * ow + ox] = a.w0 * (b.w0 * r0[b.i0] + b.w1 * r0[b.i1])
                    + a.w1 * (b.w0 * r1[b.i0] + b.w1 * r1[b.i1]);
            }
        }
    });
    out
}

pub(crate) fn upsample2x_adjoint(gout: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (ty, tx) = (upsample_taps(h), upsample_taps(w));
    let (oh, ow) = (2 * h, 2 * w);
    let mut gin = vec![0.0; planes * h * w];
    par::for_each_chunk_mut(&mut gin, h * w, |p, gin| {
        let go = &gout[p * oh * ow..(p + 1) * oh * ow];
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let d = go[oy * ow + ox];
                gin[a.i0 * w + b.i0] += a.w0 * b.w0 * d;
                gin[a.i0 * w + b.i1] += a.w0 * b.w1 * d;
                gin[a.i1 * w + b.i0] += a.w1 * b.w0 * d;
                gin[a.i1 * w + b.i1] += a.w1 * b.w1 * d;
            }
        }
    });
    gin
}
