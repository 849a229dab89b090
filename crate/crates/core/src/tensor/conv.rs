//! Direct 3D convolution kernels over contiguous NCDHW buffers.
//!
//! Every output element is produced by a single thread with a fixed
//! accumulation order, so results do not depend on the rayon pool size.

use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: usize,
        pad: usize,
    ) -> Self {
        assert_eq!(x_shape.len(), 5, "conv3d input must be rank 5");
        assert_eq!(w_shape.len(), 5, "conv3d weight must be rank 5");
        assert_eq!(x_shape[1], w_shape[1], "conv3d channel mismatch");
        let k = w_shape[2];
        assert!(w_shape[3] == k && w_shape[4] == k, "only cubic kernels");
        let out = |n: usize| {
            assert!(n + 2 * pad >= k, "conv3d kernel larger than padded input");
            (n + 2 * pad - k) / stride + 1
        };
        Self {
            batch: x_shape[0],
            in_ch: x_shape[1],
            out_ch: w_shape[0],
            in_dims: [x_shape[2], x_shape[3], x_shape[4]],
            out_dims: [out(x_shape[2]), out(x_shape[3]), out(x_shape[4])],
            kernel: k,
            stride,
            pad,
        }
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![
            self.batch,
            self.out_ch,
            self.out_dims[0],
            self.out_dims[1],
            self.out_dims[2],
        ]
    }

    fn in_vol(&self) -> usize {
        self.in_dims.iter().product()
    }

    fn out_vol(&self) -> usize {
        self.out_dims.iter().product()
    }

    /// Range of output indices `o` for which `o*stride + k - pad` lands in `[0, n)`.
    fn valid_range(&self, k: usize, n_in: usize, n_out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.pad as isize;
        // o*s + off >= 0  ->  o >= ceil(-off / s)
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // o*s + off <= n_in - 1  ->  o <= floor((n_in - 1 - off) / s)
        let hi_num = n_in as isize - 1 - off;
        let hi = if hi_num < 0 { -1 } else { hi_num / s };
        let lo = lo.max(0) as usize;
        let hi = (hi + 1).min(n_out as isize).max(0) as usize;
        (lo, hi.max(lo))
    }
}

pub fn forward(g: &ConvGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let [_, ih, iw] = g.in_dims;
    let [od, oh, ow] = g.out_dims;
    let k = g.kernel;
    let (s, p) = (g.stride, g.pad);
    let in_vol = g.in_vol();
    let out_vol = g.out_vol();
    let mut out = vec![0.0; g.batch * g.out_ch * out_vol];
    out.par_chunks_mut(out_vol)
        .enumerate()
        .for_each(|(idx, dst)| {
            let b = idx / g.out_ch;
            let co = idx % g.out_ch;
            let b0 = bias.map_or(0.0, |b| b[co]);
            dst.iter_mut().for_each(|v| *v = b0);
            for ci in 0..g.in_ch {
                let src = &x[(b * g.in_ch + ci) * in_vol..][..in_vol];
                let wbase = (co * g.in_ch + ci) * k * k * k;
                for kd in 0..k {
                    let (d_lo, d_hi) = g.valid_range(kd, g.in_dims[0], od);
                    for kh in 0..k {
                        let (h_lo, h_hi) = g.valid_range(kh, ih, oh);
                        for kw in 0..k {
                            let wv = w[wbase + (kd * k + kh) * k + kw];
                            let (w_lo, w_hi) = g.valid_range(kw, iw, ow);
                            if w_lo >= w_hi {
                                continue;
                            }
                            for o_d in d_lo..d_hi {
                                let i_d = o_d * s + kd - p;
                                for o_h in h_lo..h_hi {
                                    let i_h = o_h * s + kh - p;
                                    let drow = &mut dst[(o_d * oh + o_h) * ow..][..ow];
                                    let srow = &src[(i_d * ih + i_h) * iw..][..iw];
                                    if s == 1 {
                                        let i0 = w_lo + kw - p;
                                        let n = w_hi - w_lo;
                                        for (dv, sv) in drow[w_lo..w_hi]
                                            .iter_mut()
                                            .zip(&srow[i0..i0 + n])
                                        {
                                            *dv += wv * sv;
                                        }
                                    } else {
                                        for o_w in w_lo..w_hi {
                                            drow[o_w] += wv * srow[o_w * s + kw - p];
                                        }
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

/// Gradients with respect to input, weight and bias.
pub fn backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    gout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let [_, ih, iw] = g.in_dims;
    let [od, oh, ow] = g.out_dims;
    let k = g.kernel;
    let k3 = k * k * k;
    let (s, p) = (g.stride, g.pad);
    let in_vol = g.in_vol();
    let out_vol = g.out_vol();

    // input gradient: one task per (batch, in-channel) plane
    let mut gx = vec![0.0; g.batch * g.in_ch * in_vol];
    gx.par_chunks_mut(in_vol).enumerate().for_each(|(idx, dst)| {
        let b = idx / g.in_ch;
        let ci = idx % g.in_ch;
        for co in 0..g.out_ch {
            let go = &gout[(b * g.out_ch + co) * out_vol..][..out_vol];
            let wbase = (co * g.in_ch + ci) * k3;
            for kd in 0..k {
                let (d_lo, d_hi) = g.valid_range(kd, g.in_dims[0], od);
                for kh in 0..k {
                    let (h_lo, h_hi) = g.valid_range(kh, ih, oh);
                    for kw in 0..k {
                        let wv = w[wbase + (kd * k + kh) * k + kw];
                        let (w_lo, w_hi) = g.valid_range(kw, iw, ow);
                        for o_d in d_lo..d_hi {
                            let i_d = o_d * s + kd - p;
                            for o_h in h_lo..h_hi {
                                let i_h = o_h * s + kh - p;
                                let grow = &go[(o_d * oh + o_h) * ow..][..ow];
                                let drow = &mut dst[(i_d * ih + i_h) * iw..][..iw];
                                for o_w in w_lo..w_hi {
                                    drow[o_w * s + kw - p] += wv * grow[o_w];
                                }
                            }
                        }
                    }
                }
            }
        }
    });

    // weight gradient: one task per out-channel
    let mut gw = vec![0.0; g.out_ch * g.in_ch * k3];
    gw.par_chunks_mut(g.in_ch * k3)
        .enumerate()
        .for_each(|(co, dst)| {
            for b in 0..g.batch {
                let go = &gout[(b * g.out_ch + co) * out_vol..][..out_vol];
                for ci in 0..g.in_ch {
                    let src = &x[(b * g.in_ch + ci) * in_vol..][..in_vol];
                    for kd in 0..k {
                        let (d_lo, d_hi) = g.valid_range(kd, g.in_dims[0], od);
                        for kh in 0..k {
                            let (h_lo, h_hi) = g.valid_range(kh, ih, oh);
                            for kw in 0..k {
                                let (w_lo, w_hi) = g.valid_range(kw, iw, ow);
                                let mut acc = 0.0;
                                for o_d in d_lo..d_hi {
                                    let i_d = o_d * s + kd - p;
                                    for o_h in h_lo..h_hi {
                                        let i_h = o_h * s + kh - p;
                                        let grow = &go[(o_d * oh + o_h) * ow..][..ow];
                                        let srow = &src[(i_d * ih + i_h) * iw..][..iw];
                                        for o_w in w_lo..w_hi {
                                            acc += grow[o_w] * srow[o_w * s + kw - p];
                                        }
                                    }
                                }
                                dst[ci * k3 + (kd * k + kh) * k + kw] += acc;
                            }
                        }
                    }
                }
            }
        });

    let mut gb = vec![0.0; g.out_ch];
    for b in 0..g.batch {
        for (co, acc) in gb.iter_mut().enumerate() {
            *acc += gout[(b * g.out_ch + co) * out_vol..][..out_vol]
                .iter()
                .sum::<f64>();
        }
    }
    (gx, gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(g: &ConvGeom, x: &[f64], w: &[f64], bias: &[f64]) -> Vec<f64> {
        let [id, ih, iw] = g.in_dims;
        let [od, oh, ow] = g.out_dims;
        let k = g.kernel;
        let mut out = vec![0.0; g.batch * g.out_ch * od * oh * ow];
        for b in 0..g.batch {
            for co in 0..g.out_ch {
                for z in 0..od {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let mut acc = bias[co];
                            for ci in 0..g.in_ch {
                                for a in 0..k {
                                    for c in 0..k {
                                        for e in 0..k {
                                            let zi = (z * g.stride + a) as isize - g.pad as isize;
                                            let yi = (y * g.stride + c) as isize - g.pad as isize;
                                            let xi = (xx * g.stride + e) as isize - g.pad as isize;
                                            if zi < 0
                                                || yi < 0
                                                || xi < 0
                                                || zi >= id as isize
                                                || yi >= ih as isize
                                                || xi >= iw as isize
                                            {
                                                continue;
                                            }
                                            let xv = x[(((b * g.in_ch + ci) * id + zi as usize)
                                                * ih
                                                + yi as usize)
                                                * iw
                                                + xi as usize];
                                            let wv = w[(((co * g.in_ch + ci) * k + a) * k + c) * k + e];
                                            acc += xv * wv;
                                        }
                                    }
                                }
                            }
                            out[(((b * g.out_ch + co) * od + z) * oh + y) * ow + xx] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    fn seq(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) * scale).collect()
    }

    #[test]
    fn matches_naive_for_strides_and_padding() {
        for &(k, s, p) in &[(3, 1, 1), (1, 1, 0), (4, 2, 1), (3, 2, 1), (3, 1, 0)] {
            let xs = [2, 3, 5, 6, 4];
            let ws = [2, 3, k, k, k];
            let g = ConvGeom::new(&xs, &ws, s, p);
            let x = seq(xs.iter().product(), 0.1);
            let w = seq(ws.iter().product(), 0.03);
            let bias = vec![0.5, -0.25];
            let fast = forward(&g, &x, &w, Some(&bias));
            let slow = naive(&g, &x, &w, &bias);
            assert_eq!(fast.len(), slow.len());
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "k={k} s={s} p={p}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x), y> == <x, conv^T(y)> and == <w, dW>
        for &(k, s, p) in &[(3, 1, 1), (4, 2, 1), (3, 2, 1)] {
            let xs = [1, 2, 4, 6, 5];
            let ws = [3, 2, k, k, k];
            let g = ConvGeom::new(&xs, &ws, s, p);
            let x = seq(xs.iter().product(), 0.2);
            let w = seq(ws.iter().product(), 0.07);
            let out = forward(&g, &x, &w, None);
            let y = seq(out.len(), 0.13);
            let (gx, gw, _) = backward(&g, &x, &w, &y);
            let lhs: f64 = out.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rx: f64 = x.iter().zip(&gx).map(|(a, b)| a * b).sum();
            let rw: f64 = w.iter().zip(&gw).map(|(a, b)| a * b).sum();
            assert!((lhs - rx).abs() < 1e-9, "{lhs} vs {rx}");
            assert!((lhs - rw).abs() < 1e-9, "{lhs} vs {rw}");
        }
    }
}
