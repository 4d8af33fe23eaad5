//! 2D convolution as im2col + GEMM.
//!
//! Forward packs all batch images into one column matrix so a single sgemm
//! call does the whole layer. Backward rebuilds the column matrix in f64 and
//! uses dgemm for both the weight and input gradients.

use super::graph::{BackwardArgs, Graph, Var};
use super::ops::widen;
use crate::error::{Error, Result};

#[derive(Clone, Copy)]
struct ConvGeom {
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    dilation: usize,
    padding: usize,
}

impl ConvGeom {
    fn l(&self) -> usize {
        self.ho * self.wo
    }
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }
}

fn out_dim(input: usize, k: usize, stride: usize, dilation: usize, padding: usize) -> Option<usize> {
    let span = dilation * (k - 1) + 1;
    let padded = input + 2 * padding;
    if padded < span {
        return None;
    }
    Some((padded - span) / stride + 1)
}

/// Valid output range along one axis for a fixed kernel tap, so the inner
/// loops never test bounds per pixel.
fn tap_range(input: usize, out: usize, stride: usize, dilation: usize, padding: usize, tap: usize) -> (usize, usize) {
    // in = o * stride + tap * dilation - padding, require 0 <= in < input
    let off = tap as isize * dilation as isize - padding as isize;
    let lo = if off >= 0 { 0 } else { ((-off) as usize).div_ceil(stride) };
    let hi_excl = {
        let max_in = input as isize - 1 - off;
        if max_in < 0 {
            0
        } else {
            (max_in as usize) / stride + 1
        }
    };
    (lo.min(out), hi_excl.min(out))
}

fn im2col_f32(x: &[f32], g: ConvGeom, col: &mut [f32]) {
    let (l, bl) = (g.l(), g.b * g.l());
    col.iter_mut().for_each(|v| *v = 0.0);
    for ci in 0..g.cin {
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = tap_range(g.h, g.ho, g.stride, g.dilation, g.padding, ky);
            for kx in 0..g.kw {
                let (ox_lo, ox_hi) = tap_range(g.w, g.wo, g.stride, g.dilation, g.padding, kx);
                // ix = ox * stride + shift, non-negative for ox >= ox_lo
                let shift = (kx * g.dilation) as isize - g.padding as isize;
                let row = (ci * g.kh + ky) * g.kw + kx;
                let row_off = row * bl;
                for bi in 0..g.b {
                    let x_off = (bi * g.cin + ci) * g.h * g.w;
                    for oy in oy_lo..oy_hi {
                        let iy = (oy * g.stride + ky * g.dilation) - g.padding;
                        let row_base = (x_off + iy * g.w) as isize;
                        let dst = row_off + bi * l + oy * g.wo;
                        if g.stride == 1 {
                            let src = (row_base + ox_lo as isize + shift) as usize;
                            col[dst + ox_lo..dst + ox_hi]
                                .copy_from_slice(&x[src..src + (ox_hi - ox_lo)]);
                        } else {
                            for ox in ox_lo..ox_hi {
                                let src = (row_base + (ox * g.stride) as isize + shift) as usize;
                                col[dst + ox] = x[src];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn im2col_f64(x: &[f32], g: ConvGeom, col: &mut [f64]) {
    let (l, bl) = (g.l(), g.b * g.l());
    col.iter_mut().for_each(|v| *v = 0.0);
    for ci in 0..g.cin {
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = tap_range(g.h, g.ho, g.stride, g.dilation, g.padding, ky);
            for kx in 0..g.kw {
                let (ox_lo, ox_hi) = tap_range(g.w, g.wo, g.stride, g.dilation, g.padding, kx);
                let shift = (kx * g.dilation) as isize - g.padding as isize;
                let row = (ci * g.kh + ky) * g.kw + kx;
                let row_off = row * bl;
                for bi in 0..g.b {
                    let x_off = (bi * g.cin + ci) * g.h * g.w;
                    for oy in oy_lo..oy_hi {
                        let iy = (oy * g.stride + ky * g.dilation) - g.padding;
                        let row_base = (x_off + iy * g.w) as isize;
                        let dst = row_off + bi * l + oy * g.wo;
                        for ox in ox_lo..ox_hi {
                            let src = (row_base + (ox * g.stride) as isize + shift) as usize;
                            col[dst + ox] = x[src] as f64;
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add of the column-gradient back onto input pixels.
fn col2im_add(dcol: &[f64], g: ConvGeom, dx: &mut [f64]) {
    let (l, bl) = (g.l(), g.b * g.l());
    for ci in 0..g.cin {
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = tap_range(g.h, g.ho, g.stride, g.dilation, g.padding, ky);
            for kx in 0..g.kw {
                let (ox_lo, ox_hi) = tap_range(g.w, g.wo, g.stride, g.dilation, g.padding, kx);
                let shift = (kx * g.dilation) as isize - g.padding as isize;
                let row = (ci * g.kh + ky) * g.kw + kx;
                let row_off = row * bl;
                for bi in 0..g.b {
                    let x_off = (bi * g.cin + ci) * g.h * g.w;
                    for oy in oy_lo..oy_hi {
                        let iy = (oy * g.stride + ky * g.dilation) - g.padding;
                        let row_base = (x_off + iy * g.w) as isize;
                        let src = row_off + bi * l + oy * g.wo;
                        for ox in ox_lo..ox_hi {
                            let dst = (row_base + (ox * g.stride) as isize + shift) as usize;
                            dx[dst] += dcol[src + ox];
                        }
                    }
                }
            }
        }
    }
}

impl Graph {
    /// Bias-free 2D convolution: x [B, Cin, H, W] with w [Cout, Cin, kh, kw].
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        dilation: usize,
        padding: usize,
    ) -> Result<Var> {
        self.check_rank("conv2d", x, 4)?;
        self.check_rank("conv2d", w, 4)?;
        if stride == 0 || dilation == 0 {
            return Err(Error::shape("conv2d", "stride and dilation must be >= 1".to_string()));
        }
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs[1] != ws[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {} vs kernel channels {}", xs[1], ws[1]),
            ));
        }
        let ho = out_dim(xs[2], ws[2], stride, dilation, padding);
        let wo = out_dim(xs[3], ws[3], stride, dilation, padding);
        let (Some(ho), Some(wo)) = (ho, wo) else {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {:?} does not fit input {:?} (padding {padding}, dilation {dilation})", ws, xs),
            ));
        };
        let geom = ConvGeom {
            b: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ws[0],
            kh: ws[2],
            kw: ws[3],
            ho,
            wo,
            stride,
            dilation,
            padding,
        };
        let (k, l, bl) = (geom.k(), geom.l(), geom.b * geom.l());
        let mut col = vec![0.0f32; k * bl];
        im2col_f32(self.data(x), geom, &mut col);
        let mut out2d = vec![0.0f32; geom.cout * bl];
        unsafe {
            matrixmultiply::sgemm(
                geom.cout,
                k,
                bl,
                1.0,
                self.data(w).as_ptr(),
                k as isize,
                1,
                col.as_ptr(),
                bl as isize,
                1,
                0.0,
                out2d.as_mut_ptr(),
                bl as isize,
                1,
            );
        }
        drop(col);
        let mut data = vec![0.0f32; geom.b * geom.cout * l];
        for bi in 0..geom.b {
            for co in 0..geom.cout {
                let dst = (bi * geom.cout + co) * l;
                let src = co * bl + bi * l;
                data[dst..dst + l].copy_from_slice(&out2d[src..src + l]);
            }
        }
        drop(out2d);
        self.push_op(
            "conv2d",
            vec![geom.b, geom.cout, ho, wo],
            data,
            vec![x.0, w.0],
            Box::new(move |args: &BackwardArgs| {
                let x = args.inputs[0].1;
                let w = args.inputs[1].1;
                // Gradient wrt output, rearranged as [Cout, B*L] in f64.
                let mut g2d = vec![0.0f64; geom.cout * bl];
                for bi in 0..geom.b {
                    for co in 0..geom.cout {
                        let src = (bi * geom.cout + co) * l;
                        let dst = co * bl + bi * l;
                        for i in 0..l {
                            g2d[dst + i] = args.out_grad[src + i];
                        }
                    }
                }
                let dw = args.needs[1].then(|| {
                    let mut col64 = vec![0.0f64; k * bl];
                    im2col_f64(x, geom, &mut col64);
                    let mut dw = vec![0.0f64; geom.cout * k];
                    unsafe {
                        matrixmultiply::dgemm(
                            geom.cout,
                            bl,
                            k,
                            1.0,
                            g2d.as_ptr(),
                            bl as isize,
                            1,
                            col64.as_ptr(),
                            1,
                            bl as isize,
                            0.0,
                            dw.as_mut_ptr(),
                            k as isize,
                            1,
                        );
                    }
                    dw
                });
                let dx = args.needs[0].then(|| {
                    let w64 = widen(w);
                    let mut dcol = vec![0.0f64; k * bl];
                    unsafe {
                        matrixmultiply::dgemm(
                            k,
                            geom.cout,
                            bl,
                            1.0,
                            w64.as_ptr(),
                            1,
                            k as isize,
                            g2d.as_ptr(),
                            bl as isize,
                            1,
                            0.0,
                            dcol.as_mut_ptr(),
                            bl as isize,
                            1,
                        );
                    }
                    let mut dx = vec![0.0f64; x.len()];
                    col2im_add(&dcol, geom, &mut dx);
                    dx
                });
                vec![dx, dw]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::super::{Graph, Tensor};

    fn leaf(g: &mut Graph, shape: &[usize], data: Vec<f32>) -> super::Var {
        g.leaf(&Tensor::from_vec(shape, data).unwrap().with_requires_grad(true))
    }

    /// Independent direct-loop convolution used as the oracle.
    fn naive_conv(
        x: &[f32],
        xs: &[usize],
        w: &[f32],
        ws: &[usize],
        stride: usize,
        dilation: usize,
        padding: usize,
    ) -> (Vec<f32>, Vec<usize>) {
        let (b, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        let ho = (h + 2 * padding - dilation * (kh - 1) - 1) / stride + 1;
        let wo = (wd + 2 * padding - dilation * (kw - 1) - 1) / stride + 1;
        let mut y = vec![0.0f32; b * cout * ho * wo];
        for bi in 0..b {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0f64;
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky * dilation) as isize - padding as isize;
                                    let ix = (ox * stride + kx * dilation) as isize - padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let xv = x[((bi * cin + ci) * h + iy as usize) * wd + ix as usize];
                                    let wv = w[((co * cin + ci) * kh + ky) * kw + kx];
                                    acc += xv as f64 * wv as f64;
                                }
                            }
                        }
                        y[((bi * cout + co) * ho + oy) * wo + ox] = acc as f32;
                    }
                }
            }
        }
        (y, vec![b, cout, ho, wo])
    }

    fn rand_vec(n: usize, seed: u64) -> Vec<f32> {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn conv_matches_naive_loop_over_geometries() {
        // (stride, dilation, padding, h, w, kh, kw)
        let cases = [
            (1, 1, 1, 6, 6, 3, 3),
            (2, 1, 1, 8, 8, 3, 3),
            (1, 2, 2, 7, 9, 3, 3),
            (2, 1, 0, 9, 7, 3, 3),
            (1, 1, 0, 5, 5, 1, 1),
            (1, 2, 2, 4, 4, 3, 3),
        ];
        for (i, &(s, d, p, h, w, kh, kw)) in cases.iter().enumerate() {
            let (b, cin, cout) = (2, 3, 4);
            let xv = rand_vec(b * cin * h * w, 100 + i as u64);
            let wv = rand_vec(cout * cin * kh * kw, 200 + i as u64);
            let (want, want_shape) = naive_conv(&xv, &[b, cin, h, w], &wv, &[cout, cin, kh, kw], s, d, p);
            let mut g = Graph::new();
            let x = leaf(&mut g, &[b, cin, h, w], xv);
            let wt = leaf(&mut g, &[cout, cin, kh, kw], wv);
            let y = g.conv2d(x, wt, s, d, p).unwrap();
            assert_eq!(g.shape(y), &want_shape[..], "case {i}");
            for (a, e) in g.data(y).iter().zip(&want) {
                assert!((a - e).abs() < 1e-4, "case {i}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[1, 2, 4, 4], vec![0.0; 32]);
        let w = leaf(&mut g, &[1, 3, 3, 3], vec![0.0; 27]);
        assert!(g.conv2d(x, w, 1, 1, 1).is_err());
    }

    #[test]
    fn conv_rejects_kernel_larger_than_padded_input() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[1, 1, 2, 2], vec![0.0; 4]);
        let w = leaf(&mut g, &[1, 1, 3, 3], vec![0.0; 9]);
        assert!(g.conv2d(x, w, 1, 1, 0).is_err());
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let mut g = Graph::new();
        let xv = rand_vec(16, 7);
        let x = leaf(&mut g, &[1, 1, 4, 4], xv.clone());
        let w = leaf(&mut g, &[1, 1, 1, 1], vec![1.0]);
        let y = g.conv2d(x, w, 1, 1, 0).unwrap();
        assert_eq!(g.data(y), &xv[..]);
    }

    #[test]
    fn conv_backward_matches_naive_weight_gradient() {
        // loss = sum(conv(x, w)); dW[co,ci,ky,kx] = sum over valid (b,oy,ox) of x at the tap.
        let (b, cin, cout, h, w, kh, kw) = (2, 2, 2, 5, 5, 3, 3);
        let (s, d, p) = (2usize, 1usize, 1usize);
        let xv = rand_vec(b * cin * h * w, 11);
        let wv = rand_vec(cout * cin * kh * kw, 12);
        let mut g = Graph::new();
        let x = leaf(&mut g, &[b, cin, h, w], xv.clone());
        let wt = leaf(&mut g, &[cout, cin, kh, kw], wv);
        let y = g.conv2d(x, wt, s, d, p).unwrap();
        let loss = g.sum_all(y).unwrap();
        g.backward(loss).unwrap();
        let dw = g.grad(wt).unwrap();
        let ho = (h + 2 * p - d * (kh - 1) - 1) / s + 1;
        let wo = (w + 2 * p - d * (kw - 1) - 1) / s + 1;
        for co in 0..cout {
            for ci in 0..cin {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let mut want = 0.0f64;
                        for bi in 0..b {
                            for oy in 0..ho {
                                for ox in 0..wo {
                                    let iy = (oy * s + ky * d) as isize - p as isize;
                                    let ix = (ox * s + kx * d) as isize - p as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    want += xv[((bi * cin + ci) * h + iy as usize) * w + ix as usize] as f64;
                                }
                            }
                        }
                        let got = dw[((co * cin + ci) * kh + ky) * kw + kx];
                        assert!((got - want).abs() < 1e-6, "dW: {got} vs {want}");
                    }
                }
            }
        }
    }
}
