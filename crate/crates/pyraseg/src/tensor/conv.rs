//! 2D cross-correlation with stride, zero padding, and dilation.
//!
//! All paths are im2col + sgemm: the input is unrolled into a
//! [C*kh*kw][N*oh*ow] column matrix once per forward, and forward,
//! backward-weights, and backward-data are each a single gemm per sample
//! (backward-data scatters back through col2im). 1x1/stride-1 convolutions
//! skip the unroll and use the input in place. Everything runs serially and
//! in a fixed order, so results are bit-reproducible.

use matrixmultiply::sgemm;

use super::{acc, Graph, Op, Tensor, TensorId};
use crate::error::{Error, Result};

/// Convolution geometry: kernel (out_channels, in_channels, kh, kw) plus
/// stride / padding / dilation. Output extent along an axis is
/// floor((in + 2*padding - dilation*(k-1) - 1)/stride) + 1 and must be >= 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        k: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Self {
        ConvSpec { out_channels, in_channels, kh: k, kw: k, stride, padding, dilation }
    }

    pub fn out_extent(&self, input: usize, k: usize) -> Result<usize> {
        let eff = self.dilation * (k - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < eff {
            return Err(Error::Shape(format!(
                "conv2d: output extent < 1 (input {input}, padding {}, kernel {k}, dilation {})",
                self.padding, self.dilation
            )));
        }
        Ok((padded - eff) / self.stride + 1)
    }
}

pub(crate) struct ConvOp {
    pub x: TensorId,
    pub w: TensorId,
    pub b: TensorId,
    pub spec: ConvSpec,
    pub oh: usize,
    pub ow: usize,
    /// im2col matrix, kept for the backward pass; None on the 1x1 fast path.
    cols: Option<Vec<f32>>,
}

fn is_pointwise(s: &ConvSpec) -> bool {
    s.kh == 1 && s.kw == 1 && s.stride == 1 && s.padding == 0 && s.dilation == 1
}

/// Unroll input planes into the column matrix. Row (ic,ky,kx), column
/// (n,oy,ox) holds x[n][ic][oy*s+ky*d-p][ox*s+kx*d-p], or 0 out of bounds.
fn im2col(
    x: &[f32],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
    cols: &mut [f32],
) {
    let (s, p, d) = (spec.stride, spec.padding, spec.dilation);
    let ncols = n * oh * ow;
    for ic in 0..c {
        for ky in 0..spec.kh {
            for kx in 0..spec.kw {
                let r = (ic * spec.kh + ky) * spec.kw + kx;
                let row = &mut cols[r * ncols..(r + 1) * ncols];
                let shift_x = (kx * d) as isize - p as isize;
                let shift_y = (ky * d) as isize - p as isize;
                for ni in 0..n {
                    let plane = ((ni * c) + ic) * h * w;
                    let col_base = ni * oh * ow;
                    for oy in 0..oh {
                        let iy = (oy * s) as isize + shift_y;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = plane + iy as usize * w;
                        let dst_row = col_base + oy * ow;
                        if s == 1 {
                            let lo = (-shift_x).max(0) as usize;
                            let hi_signed = w as isize - shift_x;
                            let hi = (hi_signed.max(0) as usize).min(ow);
                            if lo < hi {
                                let ix_lo = (lo as isize + shift_x) as usize;
                                row[dst_row + lo..dst_row + hi].copy_from_slice(
                                    &x[src_row + ix_lo..src_row + ix_lo + (hi - lo)],
                                );
                            }
                        } else {
                            for ox in 0..ow {
                                let ix = (ox * s) as isize + shift_x;
                                if ix >= 0 && ix < w as isize {
                                    row[dst_row + ox] = x[src_row + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Graph {
    /// Cross-correlation of a [N,C,H,W] input with zero padding. Backward
    /// accumulates gradients into input, weights, and bias.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
        spec: &ConvSpec,
    ) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::Shape(format!("conv2d: input must be [N,C,H,W], got {xs:?}")));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        if c != spec.in_channels {
            return Err(Error::Shape(format!(
                "conv2d: input has {c} channels, spec expects {}",
                spec.in_channels
            )));
        }
        let expect_w = [spec.out_channels, spec.in_channels, spec.kh, spec.kw];
        if self.shape(w) != expect_w {
            return Err(Error::Shape(format!(
                "conv2d: weight shape {:?} does not match kernel {expect_w:?}",
                self.shape(w)
            )));
        }
        if self.shape(b) != [spec.out_channels] {
            return Err(Error::Shape(format!(
                "conv2d: bias shape {:?} does not match out_channels {}",
                self.shape(b),
                spec.out_channels
            )));
        }
        if spec.stride == 0 || spec.dilation == 0 {
            return Err(Error::Shape("conv2d: stride and dilation must be positive".into()));
        }
        let oh = spec.out_extent(h, spec.kh)?;
        let ow = spec.out_extent(wd, spec.kw)?;

        let oc = spec.out_channels;
        let kdim = c * spec.kh * spec.kw;
        let ohow = oh * ow;
        let mut out = vec![0.0f32; n * oc * ohow];
        for ni in 0..n {
            for mc in 0..oc {
                let base = (ni * oc + mc) * ohow;
                out[base..base + ohow].fill(self.data(b)[mc]);
            }
        }

        let pointwise = is_pointwise(spec);
        let cols = if pointwise {
            None
        } else {
            let mut cols = vec![0.0f32; kdim * n * ohow];
            im2col(self.data(x), n, c, h, wd, spec, oh, ow, &mut cols);
            Some(cols)
        };

        {
            let wdat = self.data(w);
            let xdat = self.data(x);
            let ncols = n * ohow;
            for ni in 0..n {
                let (b_ptr, rsb) = match &cols {
                    Some(cv) => (cv[ni * ohow..].as_ptr(), ncols as isize),
                    None => (xdat[ni * c * h * wd..].as_ptr(), (h * wd) as isize),
                };
                unsafe {
                    sgemm(
                        oc,
                        kdim,
                        ohow,
                        1.0,
                        wdat.as_ptr(),
                        kdim as isize,
                        1,
                        b_ptr,
                        rsb,
                        1,
                        1.0,
                        out[ni * oc * ohow..].as_mut_ptr(),
                        ohow as isize,
                        1,
                    );
                }
            }
        }

        let rg = self.requires_grad(x) || self.requires_grad(w) || self.requires_grad(b);
        let op = Op::Conv2d(Box::new(ConvOp { x, w, b, spec: spec.clone(), oh, ow, cols }));
        Ok(self.push(vec![n, oc, oh, ow], out, rg, None, op))
    }
}

pub(crate) fn conv_backward(
    nodes: &[Tensor],
    op: &ConvOp,
    up: &[f32],
    adj: &mut [Option<Vec<f32>>],
) {
    let spec = &op.spec;
    let xs = &nodes[op.x].shape;
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let oc = spec.out_channels;
    let kdim = c * spec.kh * spec.kw;
    let (oh, ow) = (op.oh, op.ow);
    let ohow = oh * ow;
    let ncols = n * ohow;
    let pointwise = op.cols.is_none();

    if nodes[op.b].requires_grad {
        let ab = acc(adj, op.b, oc);
        for mc in 0..oc {
            let mut s = 0.0f64;
            for ni in 0..n {
                let base = (ni * oc + mc) * ohow;
                for &u in &up[base..base + ohow] {
                    s += u as f64;
                }
            }
            ab[mc] += s as f32;
        }
    }

    if nodes[op.w].requires_grad {
        let xdat = &nodes[op.x].data;
        let aw = acc(adj, op.w, oc * kdim);
        for ni in 0..n {
            let (bt_ptr, csb) = match &op.cols {
                Some(cv) => (cv[ni * ohow..].as_ptr(), ncols as isize),
                None => (xdat[ni * c * h * w..].as_ptr(), (h * w) as isize),
            };
            unsafe {
                sgemm(
                    oc,
                    ohow,
                    kdim,
                    1.0,
                    up[ni * oc * ohow..].as_ptr(),
                    ohow as isize,
                    1,
                    bt_ptr,
                    1,
                    csb,
                    1.0,
                    aw.as_mut_ptr(),
                    kdim as isize,
                    1,
                );
            }
        }
    }

    if nodes[op.x].requires_grad {
        let wdat = &nodes[op.w].data;
        if pointwise {
            let ax = acc(adj, op.x, n * c * h * w);
            for ni in 0..n {
                unsafe {
                    sgemm(
                        kdim,
                        oc,
                        ohow,
                        1.0,
                        wdat.as_ptr(),
                        1,
                        kdim as isize,
                        up[ni * oc * ohow..].as_ptr(),
                        ohow as isize,
                        1,
                        1.0,
                        ax[ni * c * h * w..].as_mut_ptr(),
                        (h * w) as isize,
                        1,
                    );
                }
            }
        } else {
            let (s, p, d) = (spec.stride, spec.padding, spec.dilation);
            let mut dcols = vec![0.0f32; kdim * ohow];
            // split: compute dcols via gemm, then scatter-add (col2im)
            for ni in 0..n {
                unsafe {
                    sgemm(
                        kdim,
                        oc,
                        ohow,
                        1.0,
                        wdat.as_ptr(),
                        1,
                        kdim as isize,
                        up[ni * oc * ohow..].as_ptr(),
                        ohow as isize,
                        1,
                        0.0,
                        dcols.as_mut_ptr(),
                        ohow as isize,
                        1,
                    );
                }
                let ax = acc(adj, op.x, n * c * h * w);
                for ic in 0..c {
                    let plane = (ni * c + ic) * h * w;
                    for ky in 0..spec.kh {
                        for kx in 0..spec.kw {
                            let r = (ic * spec.kh + ky) * spec.kw + kx;
                            let row = &dcols[r * ohow..(r + 1) * ohow];
                            let shift_x = (kx * d) as isize - p as isize;
                            let shift_y = (ky * d) as isize - p as isize;
                            for oy in 0..oh {
                                let iy = (oy * s) as isize + shift_y;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let dst_row = plane + iy as usize * w;
                                let src_row = oy * ow;
                                if s == 1 {
                                    let lo = (-shift_x).max(0) as usize;
                                    let hi = ((w as isize - shift_x).max(0) as usize).min(ow);
                                    for ox in lo..hi {
                                        let ix = (ox as isize + shift_x) as usize;
                                        ax[dst_row + ix] += row[src_row + ox];
                                    }
                                } else {
                                    for ox in 0..ow {
                                        let ix = (ox * s) as isize + shift_x;
                                        if ix >= 0 && ix < w as isize {
                                            ax[dst_row + ix as usize] += row[src_row + ox];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use crate::tensor::finite_diff_check;

    fn leaf(g: &mut Graph, shape: &[usize], data: Vec<f32>, rg: bool) -> TensorId {
        g.leaf(shape.to_vec(), data, rg).unwrap()
    }

    /// Direct 7-loop reference convolution, used as an independent oracle
    /// for the gemm path.
    fn naive_conv(
        x: &[f32],
        n: usize,
        c: usize,
        h: usize,
        w: usize,
        wt: &[f32],
        bias: &[f32],
        spec: &ConvSpec,
    ) -> (Vec<f32>, usize, usize) {
        let oh = spec.out_extent(h, spec.kh).unwrap();
        let ow = spec.out_extent(w, spec.kw).unwrap();
        let oc = spec.out_channels;
        let mut out = vec![0.0f32; n * oc * oh * ow];
        for ni in 0..n {
            for mc in 0..oc {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = bias[mc] as f64;
                        for ic in 0..c {
                            for ky in 0..spec.kh {
                                for kx in 0..spec.kw {
                                    let iy = (oy * spec.stride + ky * spec.dilation) as isize
                                        - spec.padding as isize;
                                    let ix = (ox * spec.stride + kx * spec.dilation) as isize
                                        - spec.padding as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                        let xi = ((ni * c + ic) * h + iy as usize) * w
                                            + ix as usize;
                                        let wi = ((mc * c + ic) * spec.kh + ky) * spec.kw + kx;
                                        s += x[xi] as f64 * wt[wi] as f64;
                                    }
                                }
                            }
                        }
                        out[((ni * oc + mc) * oh + oy) * ow + ox] = s as f32;
                    }
                }
            }
        }
        (out, oh, ow)
    }

    fn rand_vec(r: &mut RngStream, n: usize, lo: f32, hi: f32) -> Vec<f32> {
        (0..n).map(|_| r.uniform_in(lo, hi)).collect()
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[1, 1, 3, 3], (1..=9).map(|v| v as f32).collect(), false);
        let mut k = vec![0.0f32; 9];
        k[4] = 1.0;
        let w = leaf(&mut g, &[1, 1, 3, 3], k, false);
        let b = leaf(&mut g, &[1], vec![0.0], false);
        let spec = ConvSpec::new(1, 1, 3, 1, 1, 1);
        let y = g.conv2d(x, w, b, &spec).unwrap();
        assert_eq!(g.data(y), g.data(x));
    }

    #[test]
    fn all_ones_overlap_counts() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[1, 1, 3, 3], vec![1.0; 9], false);
        let w = leaf(&mut g, &[1, 1, 3, 3], vec![1.0; 9], false);
        let b = leaf(&mut g, &[1], vec![0.0], false);
        let spec = ConvSpec::new(1, 1, 3, 1, 1, 1);
        let y = g.conv2d(x, w, b, &spec).unwrap();
        let d = g.data(y);
        assert_eq!(d[4], 9.0); // center
        assert_eq!(d[1], 6.0); // edge
        assert_eq!(d[0], 4.0); // corner
        assert_eq!(d[8], 4.0);
        assert_eq!(d[5], 6.0);
    }

    #[test]
    fn dilation_geometry() {
        // 5x5 input, 3x3 kernel, dilation 2, pad 2: output stays 5x5 and a
        // one-hot input at the center is seen by taps spaced 2 apart.
        let mut g = Graph::new();
        let mut xv = vec![0.0f32; 25];
        xv[12] = 1.0;
        let x = leaf(&mut g, &[1, 1, 5, 5], xv, false);
        let w = leaf(&mut g, &[1, 1, 3, 3], vec![1.0; 9], false);
        let b = leaf(&mut g, &[1], vec![0.0], false);
        let spec = ConvSpec::new(1, 1, 3, 1, 2, 2);
        let y = g.conv2d(x, w, b, &spec).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 5, 5]);
        let d = g.data(y);
        for oy in 0..5 {
            for ox in 0..5 {
                let expect = if oy % 2 == 0 && ox % 2 == 0 { 1.0 } else { 0.0 };
                assert_eq!(d[oy * 5 + ox], expect, "at ({oy},{ox})");
            }
        }
    }

    #[test]
    fn shape_mismatches_rejected_with_diagnostic() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[1, 2, 4, 4], vec![0.0; 32], false);
        let w = leaf(&mut g, &[1, 3, 3, 3], vec![0.0; 27], false);
        let b = leaf(&mut g, &[1], vec![0.0], false);
        let spec = ConvSpec::new(1, 3, 3, 1, 1, 1);
        let err = g.conv2d(x, w, b, &spec).unwrap_err();
        assert!(err.to_string().contains("channels"), "{err}");

        let spec2 = ConvSpec::new(1, 2, 3, 1, 0, 1);
        let w2 = leaf(&mut g, &[1, 2, 3, 3], vec![0.0; 18], false);
        let x_small = leaf(&mut g, &[1, 2, 2, 2], vec![0.0; 8], false);
        let err2 = g.conv2d(x_small, w2, b, &spec2).unwrap_err();
        assert!(err2.to_string().contains("output extent"), "{err2}");
    }

    #[test]
    fn linearity_in_input() {
        let mut r = RngStream::new(21, 60);
        let mut g = Graph::new();
        let av = rand_vec(&mut r, 2 * 2 * 5 * 5, -1.0, 1.0);
        let bv = rand_vec(&mut r, 2 * 2 * 5 * 5, -1.0, 1.0);
        let sv: Vec<f32> = av.iter().zip(bv.iter()).map(|(&p, &q)| p + q).collect();
        let wv = rand_vec(&mut r, 3 * 2 * 9, -1.0, 1.0);
        let biasv = vec![0.0f32; 3];
        let a = leaf(&mut g, &[2, 2, 5, 5], av, false);
        let b = leaf(&mut g, &[2, 2, 5, 5], bv, false);
        let s = leaf(&mut g, &[2, 2, 5, 5], sv, false);
        let w = leaf(&mut g, &[3, 2, 3, 3], wv, false);
        let bias = leaf(&mut g, &[3], biasv, false);
        let spec = ConvSpec::new(3, 2, 3, 1, 1, 1);
        let ya = g.conv2d(a, w, bias, &spec).unwrap();
        let yb = g.conv2d(b, w, bias, &spec).unwrap();
        let ys = g.conv2d(s, w, bias, &spec).unwrap();
        for i in 0..g.numel(ys) {
            let lin = g.data(ya)[i] + g.data(yb)[i];
            assert!((g.data(ys)[i] - lin).abs() < 1e-5);
        }
    }

    #[test]
    fn gemm_matches_naive_reference() {
        let mut r = RngStream::new(33, 61);
        for case in 0..40 {
            let n = 1 + r.index(2);
            let c = 1 + r.index(3);
            let oc = 1 + r.index(3);
            let k = if r.index(2) == 0 { 1 } else { 3 };
            let stride = 1 + r.index(2);
            let padding = r.index(3);
            let dilation = 1 + r.index(2);
            let h = 3 + r.index(7);
            let w = 3 + r.index(7);
            let spec = ConvSpec {
                out_channels: oc,
                in_channels: c,
                kh: k,
                kw: k,
                stride,
                padding,
                dilation,
            };
            if spec.out_extent(h, k).is_err() || spec.out_extent(w, k).is_err() {
                continue;
            }
            let xv = rand_vec(&mut r, n * c * h * w, -1.0, 1.0);
            let wv = rand_vec(&mut r, oc * c * k * k, -0.5, 0.5);
            let bv = rand_vec(&mut r, oc, -0.5, 0.5);
            let (expect, oh, ow) = naive_conv(&xv, n, c, h, w, &wv, &bv, &spec);
            let mut g = Graph::new();
            let x = leaf(&mut g, &[n, c, h, w], xv, false);
            let wt = leaf(&mut g, &[oc, c, k, k], wv, false);
            let b = leaf(&mut g, &[oc], bv, false);
            let y = g.conv2d(x, wt, b, &spec).unwrap();
            assert_eq!(g.shape(y), &[n, oc, oh, ow], "case {case}");
            for (i, (&got, &want)) in g.data(y).iter().zip(expect.iter()).enumerate() {
                assert!(
                    (got - want).abs() < 2e-5,
                    "case {case} elem {i}: got {got} want {want}"
                );
            }
        }
    }

    fn fd_conv_case(spec: ConvSpec, n: usize, h: usize, w: usize, seed: u64) -> f64 {
        let mut r = RngStream::new(seed, 62);
        let mut g = Graph::new();
        let c = spec.in_channels;
        let oc = spec.out_channels;
        let xv = rand_vec(&mut r, n * c * h * w, -1.0, 1.0);
        let wv = rand_vec(&mut r, oc * c * spec.kh * spec.kw, -0.7, 0.7);
        let bv = rand_vec(&mut r, oc, -0.3, 0.3);
        leaf(&mut g, &[n, c, h, w], xv, true);
        leaf(&mut g, &[oc, c, spec.kh, spec.kw], wv, true);
        leaf(&mut g, &[oc], bv, true);
        let oh = spec.out_extent(h, spec.kh).unwrap();
        let ow = spec.out_extent(w, spec.kw).unwrap();
        let wts = rand_vec(&mut r, n * oc * oh * ow, -1.0, 1.0);
        finite_diff_check(&mut g, 1e-3, move |g| {
            let y = g.conv2d(0, 1, 2, &spec)?;
            g.weighted_sum(y, wts.clone())
        })
        .unwrap()
    }

    #[test]
    fn fd_conv_stride1() {
        let err = fd_conv_case(ConvSpec::new(3, 2, 3, 1, 1, 1), 2, 5, 5, 101);
        assert!(err < 1e-3, "err {err}");
    }

    #[test]
    fn fd_conv_stride2() {
        let err = fd_conv_case(ConvSpec::new(2, 2, 3, 2, 1, 1), 2, 6, 6, 102);
        assert!(err < 1e-3, "err {err}");
    }

    #[test]
    fn fd_conv_dilated() {
        let err = fd_conv_case(ConvSpec::new(2, 1, 3, 1, 2, 2), 1, 7, 7, 103);
        assert!(err < 1e-3, "err {err}");
    }

    #[test]
    fn fd_conv_pointwise() {
        let err = fd_conv_case(ConvSpec::new(4, 3, 1, 1, 0, 1), 2, 4, 4, 104);
        assert!(err < 1e-3, "err {err}");
    }

    #[test]
    fn fd_conv_relu_pool_composite() {
        // composite conv -> relu -> pool graph against finite differences
        let mut r = RngStream::new(77, 63);
        let mut g = Graph::new();
        let spec = ConvSpec::new(2, 1, 3, 1, 1, 1);
        let xv = rand_vec(&mut r, 36, -1.0, 1.0);
        let wv = rand_vec(&mut r, 18, -0.7, 0.7);
        // biased away from zero so the relu kink stays clear of the
        // finite-difference step
        let bv = vec![0.45, -0.38];
        leaf(&mut g, &[1, 1, 6, 6], xv, true);
        leaf(&mut g, &[2, 1, 3, 3], wv, true);
        leaf(&mut g, &[2], bv, true);
        let wts = rand_vec(&mut r, 2 * 3 * 3, -1.0, 1.0);
        let err = finite_diff_check(&mut g, 1e-3, move |g| {
            let y = g.conv2d(0, 1, 2, &spec)?;
            let a = g.relu(y);
            let p = g.avg_pool(a, 3, 3)?;
            g.weighted_sum(p, wts.clone())
        })
        .unwrap();
        assert!(err < 1e-3, "err {err}");
    }
}
