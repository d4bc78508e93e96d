//! 3D convolution via im2col + GEMM.

use crate::graph::Var;
use crate::real::{gemm, gemm_strided, Real};
use crate::tensor::Tensor;

/// Kernel, stride and zero padding per spatial axis `(d, h, w)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeometry {
    pub fn cubic(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel: [kernel; 3],
            stride: [stride; 3],
            padding: [padding; 3],
        }
    }

    pub fn output_dims(&self, input: [usize; 3]) -> [usize; 3] {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.padding[a];
            assert!(
                padded >= self.kernel[a],
                "kernel {} larger than padded input {padded}",
                self.kernel[a]
            );
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        out
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1; 3] && self.stride == [1; 3] && self.padding == [0; 3]
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }
}

/// Output positions in `[lo, hi)` read an in-bounds input index for kernel
/// offset `k_off`.
#[inline]
pub(crate) fn valid_range(
    out_len: usize,
    in_len: usize,
    k_off: usize,
    stride: usize,
    pad: usize,
) -> (usize, usize) {
    let lo = if k_off >= pad {
        0
    } else {
        (pad - k_off).div_ceil(stride)
    };
    if in_len + pad < k_off + 1 {
        return (0, 0);
    }
    let hi = ((in_len - 1 + pad - k_off) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

/// Output positions handled per im2col tile. Tiles are whole output rows,
/// so the column buffer stays cache-resident instead of spanning the volume.
const TILE_POSITIONS: usize = 1024;

/// Ranges of flattened `(z, y)` output rows, each at most `tile` positions.
fn row_tiles(out: [usize; 3], tile: usize) -> impl Iterator<Item = (usize, usize)> {
    let rows = out[0] * out[1];
    let per = (tile / out[2].max(1)).max(1);
    (0..rows).step_by(per).map(move |q0| (q0, (q0 + per).min(rows)))
}

/// Positions in the largest tile of [`row_tiles`].
fn tile_capacity(out: [usize; 3], tile: usize) -> usize {
    let per = (tile / out[2].max(1)).max(1);
    per.min(out[0] * out[1]) * out[2]
}

/// Columns for output rows `q0..q1` into `col` (`[Cin·taps, (q1−q0)·ow]`);
/// every element is written.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    channels: usize,
    input: [usize; 3],
    geo: &ConvGeometry,
    out: [usize; 3],
    (q0, q1): (usize, usize),
    col: &mut [T],
) {
    let [d, h, w] = input;
    let [_, oh, ow] = out;
    let [kd, kh, kw] = geo.kernel;
    let [sd, sh, sw] = geo.stride;
    let [pd, ph, pw] = geo.padding;
    let t = (q1 - q0) * ow;
    let mut row = 0;
    for c in 0..channels {
        let xc = &x[c * d * h * w..(c + 1) * d * h * w];
        for kz in 0..kd {
            let (zlo, zhi) = valid_range(out[0], d, kz, sd, pd);
            for ky in 0..kh {
                let (ylo, yhi) = valid_range(oh, h, ky, sh, ph);
                for kx in 0..kw {
                    let (xlo, xhi) = valid_range(ow, w, kx, sw, pw);
                    let dst = &mut col[row * t..(row + 1) * t];
                    for q in q0..q1 {
                        let (oz, oy) = (q / oh, q % oh);
                        let seg = &mut dst[(q - q0) * ow..(q - q0 + 1) * ow];
                        if oz < zlo || oz >= zhi || oy < ylo || oy >= yhi {
                            seg.fill(T::zero());
                            continue;
                        }
                        let (iz, iy) = (oz * sd + kz - pd, oy * sh + ky - ph);
                        let src = &xc[(iz * h + iy) * w..(iz * h + iy + 1) * w];
                        seg[..xlo].fill(T::zero());
                        seg[xhi..].fill(T::zero());
                        if sw == 1 {
                            let start = xlo + kx - pw;
                            seg[xlo..xhi].copy_from_slice(&src[start..start + (xhi - xlo)]);
                        } else {
                            for ox in xlo..xhi {
                                seg[ox] = src[ox * sw + kx - pw];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates tile columns back into `x`.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    col: &[T],
    channels: usize,
    input: [usize; 3],
    geo: &ConvGeometry,
    out: [usize; 3],
    (q0, q1): (usize, usize),
    x: &mut [T],
) {
    let [d, h, w] = input;
    let [_, oh, ow] = out;
    let [kd, kh, kw] = geo.kernel;
    let [sd, sh, sw] = geo.stride;
    let [pd, ph, pw] = geo.padding;
    let t = (q1 - q0) * ow;
    let mut row = 0;
    for c in 0..channels {
        let xc = &mut x[c * d * h * w..(c + 1) * d * h * w];
        for kz in 0..kd {
            let (zlo, zhi) = valid_range(out[0], d, kz, sd, pd);
            for ky in 0..kh {
                let (ylo, yhi) = valid_range(oh, h, ky, sh, ph);
                for kx in 0..kw {
                    let (xlo, xhi) = valid_range(ow, w, kx, sw, pw);
                    let src = &col[row * t..(row + 1) * t];
                    for q in q0..q1 {
                        let (oz, oy) = (q / oh, q % oh);
                        if oz < zlo || oz >= zhi || oy < ylo || oy >= yhi {
                            continue;
                        }
                        let (iz, iy) = (oz * sd + kz - pd, oy * sh + ky - ph);
                        let seg = &src[(q - q0) * ow..(q - q0 + 1) * ow];
                        let dst = &mut xc[(iz * h + iy) * w..(iz * h + iy + 1) * w];
                        if sw == 1 {
                            let start = xlo + kx - pw;
                            for (o, &v) in dst[start..start + (xhi - xlo)].iter_mut().zip(&seg[xlo..xhi]) {
                                *o += v;
                            }
                        } else {
                            for ox in xlo..xhi {
                                dst[ox * sw + kx - pw] += seg[ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Forward convolution on plain tensors. `weight` is `[Cout, Cin, kd, kh, kw]`.
pub fn conv3d_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geo: &ConvGeometry,
) -> Tensor<T> {
    conv3d_forward_tiled(x, weight, bias, geo, TILE_POSITIONS)
}

fn conv3d_forward_tiled<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geo: &ConvGeometry,
    tile: usize,
) -> Tensor<T> {
    let [n, cin, d, h, w] = x.dims5().expect("conv input must be 5D");
    let [cout, wcin, kd, kh, kw] = weight.dims5().expect("conv weight must be 5D");
    assert_eq!(cin, wcin, "conv: input has {cin} channels, weight expects {wcin}");
    assert_eq!([kd, kh, kw], geo.kernel, "conv: kernel/geometry mismatch");
    let out = geo.output_dims([d, h, w]);
    let s_in = d * h * w;
    let s_out: usize = out.iter().product();
    let k = cin * geo.taps();
    let pointwise = geo.is_pointwise();
    let mut y = Tensor::zeros(&[n, cout, out[0], out[1], out[2]]);
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); k * tile_capacity(out, tile)] };
    for b in 0..n {
        let xb = &x.data()[b * cin * s_in..(b + 1) * cin * s_in];
        let yb = &mut y.data_mut()[b * cout * s_out..(b + 1) * cout * s_out];
        if pointwise {
            gemm(cout, k, s_out, weight.data(), false, xb, false, T::zero(), yb);
        } else {
            for (q0, q1) in row_tiles(out, tile) {
                let (p0, t) = (q0 * out[2], (q1 - q0) * out[2]);
                im2col(xb, cin, [d, h, w], geo, out, (q0, q1), &mut col[..k * t]);
                gemm_strided(cout, k, t, weight.data(), (k, 1), &col, (t, 1), T::zero(), &mut yb[p0..], (s_out, 1));
            }
        }
        if let Some(bias) = bias {
            for (co, chunk) in yb.chunks_mut(s_out).enumerate() {
                let bv = bias.data()[co];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    y
}

/// Input and weight gradients of [`conv3d_forward_tiled`] for output
/// gradient `g`.
#[allow(clippy::too_many_arguments)]
fn conv3d_backward_tiled<T: Real>(
    x: &Tensor<T>,
    wv: &Tensor<T>,
    g: &Tensor<T>,
    geo: &ConvGeometry,
    need_x: bool,
    need_w: bool,
    tile: usize,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let [n, cin, d, h, w] = x.dims5().unwrap();
    let cout = wv.shape()[0];
    let out = geo.output_dims([d, h, w]);
    let s_in = d * h * w;
    let s_out: usize = out.iter().product();
    let k = cin * geo.taps();
    let pointwise = geo.is_pointwise();
    let mut gx = need_x.then(|| Tensor::zeros(x.shape()));
    let mut gw = need_w.then(|| Tensor::zeros(wv.shape()));
    let buf = if pointwise { 0 } else { k * tile_capacity(out, tile) };
    let mut col = vec![T::zero(); if need_w { buf } else { 0 }];
    let mut gcol = vec![T::zero(); if need_x { buf } else { 0 }];
    for b in 0..n {
        let gb = &g.data()[b * cout * s_out..(b + 1) * cout * s_out];
        let xb = &x.data()[b * cin * s_in..(b + 1) * cin * s_in];
        if pointwise {
            if let Some(gw) = gw.as_mut() {
                gemm(cout, s_out, k, gb, false, xb, true, T::one(), gw.data_mut());
            }
            if let Some(gx) = gx.as_mut() {
                let gxb = &mut gx.data_mut()[b * cin * s_in..(b + 1) * cin * s_in];
                gemm(cin, cout, s_out, wv.data(), true, gb, false, T::zero(), gxb);
            }
            continue;
        }
        for (q0, q1) in row_tiles(out, tile) {
            let (p0, t) = (q0 * out[2], (q1 - q0) * out[2]);
            if let Some(gw) = gw.as_mut() {
                im2col(xb, cin, [d, h, w], geo, out, (q0, q1), &mut col[..k * t]);
                gemm_strided(cout, t, k, &gb[p0..], (s_out, 1), &col, (1, t), T::one(), gw.data_mut(), (k, 1));
            }
            if let Some(gx) = gx.as_mut() {
                gemm_strided(k, cout, t, wv.data(), (1, k), &gb[p0..], (s_out, 1), T::zero(), &mut gcol, (t, 1));
                let gxb = &mut gx.data_mut()[b * cin * s_in..(b + 1) * cin * s_in];
                col2im(&gcol[..k * t], cin, [d, h, w], geo, out, (q0, q1), gxb);
            }
        }
    }
    (gx, gw)
}

impl<'g, T: Real> Var<'g, T> {
    /// 3D convolution of `self` (`[N, Cin, D, H, W]`).
    pub fn conv3d(
        self,
        weight: Var<'g, T>,
        bias: Option<Var<'g, T>>,
        geo: ConvGeometry,
    ) -> Var<'g, T> {
        let x = self.value();
        let wv = weight.value();
        let bv = bias.map(|b| b.value());
        let out = conv3d_forward(&x, &wv, bv.as_deref(), &geo);
        let mut parents = vec![self, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        self.graph().op(
            out,
            &parents,
            Box::new(move |g, need| {
                let (gx, gw) = conv3d_backward_tiled(&x, &wv, g, &geo, need[0], need[1], TILE_POSITIONS);
                let mut grads = vec![gx, gw];
                if need.len() > 2 {
                    grads.push(need[2].then(|| {
                        let [n, cout] = [g.shape()[0], g.shape()[1]];
                        let s_out = g.numel() / (n * cout);
                        let mut gbias = Tensor::zeros(&[cout]);
                        for b in 0..n {
                            for co in 0..cout {
                                let base = (b * cout + co) * s_out;
                                gbias.data_mut()[co] += g.data()[base..base + s_out].iter().copied().sum::<T>();
                            }
                        }
                        gbias
                    }));
                }
                grads
            }),
        )
    }
}
