use crate::graph::Var;
use crate::ops::conv::ConvGeometry;
use crate::real::Real;
use crate::tensor::Tensor;

/// One separable max pass along the middle axis of `[outer, len, inner]`,
/// carrying the flat source index of each running maximum. Strict `>` keeps
/// the first maximum along the axis.
fn max_pass<T: Real>(
    vals: &[T],
    idx: &[usize],
    outer: usize,
    len: usize,
    inner: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> (Vec<T>, Vec<usize>, usize) {
    assert!(len + 2 * pad >= kernel, "kernel {kernel} larger than padded input");
    let out_len = (len + 2 * pad - kernel) / stride + 1;
    let mut ov = vec![T::neg_infinity(); outer * out_len * inner];
    let mut oi = vec![usize::MAX; outer * out_len * inner];
    for o in 0..outer {
        for j in 0..out_len {
            let start = (j * stride) as isize - pad as isize;
            let lo = start.max(0) as usize;
            let hi = ((start + kernel as isize) as usize).min(len);
            assert!(lo < hi, "pooling window entirely in padding");
            let dst = (o * out_len + j) * inner;
            for t in lo..hi {
                let src = (o * len + t) * inner;
                for q in 0..inner {
                    let v = vals[src + q];
                    if oi[dst + q] == usize::MAX || v > ov[dst + q] {
                        ov[dst + q] = v;
                        oi[dst + q] = idx[src + q];
                    }
                }
            }
        }
    }
    (ov, oi, out_len)
}

/// Max pooling with implicit `-inf` padding. Returns the pooled tensor
/// and, per output element, the flat input index that won (first maximum
/// in `(d, h, w)` scan order). Computed as three separable passes, which
/// select the same winner as a direct box scan.
pub fn max_pool3d_forward<T: Real>(x: &Tensor<T>, geo: &ConvGeometry) -> (Tensor<T>, Vec<usize>) {
    let [n, c, d, h, w] = x.dims5().expect("max_pool input must be 5D");
    let o = geo.output_dims([d, h, w]);
    let planes = n * c;
    let idx: Vec<usize> = (0..x.numel()).collect();
    let (v, i, _) = max_pass(x.data(), &idx, planes * d * h, w, 1, geo.kernel[2], geo.stride[2], geo.padding[2]);
    let (v, i, _) = max_pass(&v, &i, planes * d, h, o[2], geo.kernel[1], geo.stride[1], geo.padding[1]);
    let (v, i, _) = max_pass(&v, &i, planes, d, o[1] * o[2], geo.kernel[0], geo.stride[0], geo.padding[0]);
    let out = Tensor::new(vec![n, c, o[0], o[1], o[2]], v).expect("pool output shape");
    (out, i)
}

/// Non-overlapping box average by integer `factor` per axis.
pub fn avg_pool3d_forward<T: Real>(x: &Tensor<T>, factor: [usize; 3]) -> Tensor<T> {
    let [n, c, d, h, w] = x.dims5().expect("avg_pool input must be 5D");
    assert!(
        d % factor[0] == 0 && h % factor[1] == 0 && w % factor[2] == 0,
        "avg_pool: dims {:?} not divisible by {factor:?}",
        [d, h, w]
    );
    let o = [d / factor[0], h / factor[1], w / factor[2]];
    let norm = T::one() / T::lit(factor.iter().product::<usize>() as f64);
    let mut out = Tensor::zeros(&[n, c, o[0], o[1], o[2]]);
    let xs = x.data();
    let od = out.data_mut();
    for plane in 0..n * c {
        let ib = plane * d * h * w;
        let ob = plane * o[0] * o[1] * o[2];
        for z in 0..d {
            for y in 0..h {
                for xx in 0..w {
                    let oi = ob + ((z / factor[0]) * o[1] + y / factor[1]) * o[2] + xx / factor[2];
                    od[oi] += xs[ib + (z * h + y) * w + xx];
                }
            }
        }
    }
    od.iter_mut().for_each(|v| *v *= norm);
    out
}

impl<'g, T: Real> Var<'g, T> {
    pub fn max_pool3d(self, geo: ConvGeometry) -> Var<'g, T> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        let (out, arg) = max_pool3d_forward(&x, &geo);
        self.graph().op(
            out,
            &[self],
            Box::new(move |g, _| {
                let mut gx = Tensor::zeros(&in_shape);
                let gd = gx.data_mut();
                for (&i, &v) in arg.iter().zip(g.data()) {
                    gd[i] += v;
                }
                vec![Some(gx)]
            }),
        )
    }

    pub fn avg_pool3d(self, factor: [usize; 3]) -> Var<'g, T> {
        let x = self.value();
        let [n, c, d, h, w] = x.dims5().unwrap();
        let out = avg_pool3d_forward(&x, factor);
        let o = [d / factor[0], h / factor[1], w / factor[2]];
        let norm = T::one() / T::lit(factor.iter().product::<usize>() as f64);
        self.graph().op(
            out,
            &[self],
            Box::new(move |g, _| {
                let mut gx = Tensor::zeros(&[n, c, d, h, w]);
                let gd = gx.data_mut();
                for plane in 0..n * c {
                    let ib = plane * d * h * w;
                    let ob = plane * o[0] * o[1] * o[2];
                    for z in 0..d {
                        for y in 0..h {
                            for xx in 0..w {
                                let oi = ob
                                    + ((z / factor[0]) * o[1] + y / factor[1]) * o[2]
                                    + xx / factor[2];
                                gd[ib + (z * h + y) * w + xx] = g.data()[oi] * norm;
                            }
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }
}
