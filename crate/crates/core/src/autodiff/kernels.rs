//! Forward and backward kernels over raw row-major buffers.
//!
//! Every kernel here is deterministic: loops run in a fixed order, so the
//! same inputs always produce bit-identical outputs.

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn new(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Self> {
        let (n, ci, h, w) = input.dims4()?;
        let (co, wci, kh, kw) = weight.dims4()?;
        if wci != ci {
            return Err(Error::Dimension(format!(
                "conv2d: input has {ci} channels but weight expects {wci}"
            )));
        }
        if bias.shape() != [co] {
            return Err(Error::Dimension(format!(
                "conv2d: bias shape {:?} does not match {co} output channels",
                bias.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::Contract("conv2d: stride must be at least 1".into()));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::Dimension(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        Ok(ConvGeom {
            n,
            ci,
            h,
            w,
            co,
            kh,
            kw,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (w + 2 * padding - kw) / stride + 1,
            stride,
            padding,
        })
    }

    /// Output indices `lo..hi` whose input coordinate `o*stride + k - padding`
    /// lands inside `0..in_len`.
    fn valid(&self, k: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        let off = k as isize - self.padding as isize;
        let s = self.stride as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let last = in_len as isize - 1 - off;
        let hi = if last < 0 { 0 } else { (last / s + 1).min(out_len as isize) };
        (lo as usize, hi.max(lo) as usize)
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let ConvGeom { n, ci, h, w, co, kh, kw, ho, wo, stride, padding } = *g;
    let mut out = vec![0.0; n * co * ho * wo];
    for b in 0..n {
        for oc in 0..co {
            let plane = &mut out[(b * co + oc) * ho * wo..(b * co + oc + 1) * ho * wo];
            plane.fill(bias[oc]);
            for ic in 0..ci {
                let inp = &input[(b * ci + ic) * h * w..(b * ci + ic + 1) * h * w];
                for ky in 0..kh {
                    let (oy0, oy1) = g.valid(ky, h, ho);
                    for kx in 0..kw {
                        let wv = weight[((oc * ci + ic) * kh + ky) * kw + kx];
                        let (ox0, ox1) = g.valid(kx, w, wo);
                        if ox0 >= ox1 {
                            continue;
                        }
                        for oy in oy0..oy1 {
                            let iy = oy * stride + ky - padding;
                            let in_row = &inp[iy * w..(iy + 1) * w];
                            let out_row = &mut plane[oy * wo + ox0..oy * wo + ox1];
                            if stride == 1 {
                                let ix0 = ox0 + kx - padding;
                                for (o, &x) in out_row.iter_mut().zip(&in_row[ix0..ix0 + (ox1 - ox0)]) {
                                    *o += wv * x;
                                }
                            } else {
                                for (j, o) in out_row.iter_mut().enumerate() {
                                    *o += wv * in_row[(ox0 + j) * stride + kx - padding];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    gout: &[f64],
    want: [bool; 3],
) -> ConvGrads {
    let ConvGeom { n, ci, h, w, co, kh, kw, ho, wo, stride, padding } = *g;
    let mut gin = want[0].then(|| vec![0.0; input.len()]);
    let mut gw = want[1].then(|| vec![0.0; weight.len()]);
    let gb = want[2].then(|| {
        let mut gb = vec![0.0; co];
        for b in 0..n {
            for (oc, acc) in gb.iter_mut().enumerate() {
                *acc += gout[(b * co + oc) * ho * wo..(b * co + oc + 1) * ho * wo]
                    .iter()
                    .sum::<f64>();
            }
        }
        gb
    });
    if gin.is_none() && gw.is_none() {
        return ConvGrads { input: None, weight: None, bias: gb };
    }
    for b in 0..n {
        for oc in 0..co {
            let gplane = &gout[(b * co + oc) * ho * wo..(b * co + oc + 1) * ho * wo];
            for ic in 0..ci {
                let base = (b * ci + ic) * h * w;
                for ky in 0..kh {
                    let (oy0, oy1) = g.valid(ky, h, ho);
                    for kx in 0..kw {
                        let widx = ((oc * ci + ic) * kh + ky) * kw + kx;
                        let wv = weight[widx];
                        let (ox0, ox1) = g.valid(kx, w, wo);
                        if ox0 >= ox1 {
                            continue;
                        }
                        let mut wacc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * stride + ky - padding;
                            let grow = &gplane[oy * wo + ox0..oy * wo + ox1];
                            let row = base + iy * w;
                            if let Some(gin) = gin.as_mut() {
                                let in_row = &mut gin[row..row + w];
                                for (j, &go) in grow.iter().enumerate() {
                                    in_row[(ox0 + j) * stride + kx - padding] += wv * go;
                                }
                            }
                            if gw.is_some() {
                                let in_row = &input[row..row + w];
                                for (j, &go) in grow.iter().enumerate() {
                                    wacc += go * in_row[(ox0 + j) * stride + kx - padding];
                                }
                            }
                        }
                        if let Some(gw) = gw.as_mut() {
                            gw[widx] += wacc;
                        }
                    }
                }
            }
        }
    }
    ConvGrads { input: gin, weight: gw, bias: gb }
}

pub(crate) fn pool_out(len: usize, k: usize, stride: usize) -> usize {
    (len - k) / stride + 1
}

pub(crate) fn avg_pool_forward(x: &[f64], dims: (usize, usize, usize, usize), k: usize, stride: usize) -> Vec<f64> {
    let (n, c, h, w) = dims;
    let (ho, wo) = (pool_out(h, k, stride), pool_out(w, k, stride));
    let inv = 1.0 / (k * k) as f64;
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in x.chunks_exact(h * w).take(n * c) {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for ky in 0..k {
                    let row = &plane[(oy * stride + ky) * w..];
                    for kx in 0..k {
                        acc += row[ox * stride + kx];
                    }
                }
                out.push(acc * inv);
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward(
    gout: &[f64],
    dims: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
) -> Vec<f64> {
    let (n, c, h, w) = dims;
    let (ho, wo) = (pool_out(h, k, stride), pool_out(w, k, stride));
    let inv = 1.0 / (k * k) as f64;
    let mut gin = vec![0.0; n * c * h * w];
    for (p, gplane) in gout.chunks_exact(ho * wo).enumerate() {
        let plane = &mut gin[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let gv = gplane[oy * wo + ox] * inv;
                for ky in 0..k {
                    for kx in 0..k {
                        plane[(oy * stride + ky) * w + ox * stride + kx] += gv;
                    }
                }
            }
        }
    }
    gin
}

/// Source coordinate pairs for corner-aligned linear interpolation.
pub(crate) fn interp_taps(src_len: usize, dst_len: usize) -> Vec<(usize, usize, f64)> {
    (0..dst_len)
        .map(|o| {
            if src_len == 1 || dst_len == 1 {
                return (0, 0, 0.0);
            }
            let pos = o as f64 * (src_len - 1) as f64 / (dst_len - 1) as f64;
            let lo = (pos.floor() as usize).min(src_len - 1);
            let hi = (lo + 1).min(src_len - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

pub(crate) fn upsample_forward(
    x: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    let ty = interp_taps(h, oh);
    let tx = interp_taps(w, ow);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for plane in x.chunks_exact(h * w).take(planes) {
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let top = (1.0 - fx) * plane[y0 * w + x0] + fx * plane[y0 * w + x1];
                let bot = (1.0 - fx) * plane[y1 * w + x0] + fx * plane[y1 * w + x1];
                out.push((1.0 - fy) * top + fy * bot);
            }
        }
    }
    out
}

pub(crate) fn upsample_backward(
    gout: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    let ty = interp_taps(h, oh);
    let tx = interp_taps(w, ow);
    let mut gin = vec![0.0; planes * h * w];
    for (p, gplane) in gout.chunks_exact(oh * ow).enumerate() {
        let plane = &mut gin[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let g = gplane[oy * ow + ox];
                plane[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                plane[y0 * w + x1] += g * (1.0 - fy) * fx;
                plane[y1 * w + x0] += g * fy * (1.0 - fx);
                plane[y1 * w + x1] += g * fy * fx;
            }
        }
    }
    gin
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(cols) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut z = 0.0;
        for &v in row {
            let e = (v - m).exp();
            z += e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v /= z;
        }
    }
    out
}

pub(crate) fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_bounds_check() {
        for &(h, k, s, p) in &[(5, 3, 1, 1), (8, 3, 2, 1), (7, 2, 3, 0), (4, 3, 2, 2)] {
            let g = ConvGeom {
                n: 1, ci: 1, h, w: h, co: 1, kh: k, kw: k,
                ho: (h + 2 * p - k) / s + 1,
                wo: (h + 2 * p - k) / s + 1,
                stride: s, padding: p,
            };
            for ky in 0..k {
                let (lo, hi) = g.valid(ky, h, g.ho);
                for o in 0..g.ho {
                    let i = (o * s + ky) as isize - p as isize;
                    let inside = i >= 0 && (i as usize) < h;
                    assert_eq!(inside, (lo..hi).contains(&o), "h={h} k={k} s={s} p={p} ky={ky} o={o}");
                }
            }
        }
    }

    #[test]
    fn taps_are_corner_aligned() {
        let t = interp_taps(2, 4);
        assert_eq!(t[0], (0, 1, 0.0));
        assert_eq!(t[3].0.max(t[3].1), 1);
        let identity = interp_taps(5, 5);
        for (o, &(lo, _, f)) in identity.iter().enumerate() {
            assert_eq!(lo, o);
            assert_eq!(f, 0.0);
        }
    }

    #[test]
    fn sigmoid_branches_agree_near_zero() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(1e-9) - sigmoid(-1e-9) - 5e-10).abs() < 1e-15);
        assert_eq!(sigmoid(-1000.0), 0.0);
    }
}
