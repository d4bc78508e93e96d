//! Separable linear interpolation (trilinear in 3D) with half-pixel centers,
//! i.e. `align_corners = false` semantics: output sample `o` reads source
//! coordinate `(o + 0.5) * in / out - 0.5`, clamped to the valid range.

use crate::graph::Var;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
struct Tap {
    i0: usize,
    i1: usize,
    w1: f64,
}

fn taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let w1 = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            Tap { i0, i1, w1 }
        })
        .collect()
}

/// Resample one axis of a `[outer, len, inner]` view.
fn resample_axis<T: Real>(
    src: &[T],
    outer: usize,
    in_len: usize,
    inner: usize,
    out_len: usize,
    transpose: bool,
) -> Vec<T> {
    let t = taps(in_len, out_len);
    if !transpose {
        let mut dst = vec![T::zero(); outer * out_len * inner];
        for o in 0..outer {
            for (j, tap) in t.iter().enumerate() {
                let w1 = T::lit(tap.w1);
                let w0 = T::one() - w1;
                let a = &src[(o * in_len + tap.i0) * inner..(o * in_len + tap.i0 + 1) * inner];
                let b = &src[(o * in_len + tap.i1) * inner..(o * in_len + tap.i1 + 1) * inner];
                let d = &mut dst[(o * out_len + j) * inner..(o * out_len + j + 1) * inner];
                for ((d, &a), &b) in d.iter_mut().zip(a).zip(b) {
                    *d = w0 * a + w1 * b;
                }
            }
        }
        dst
    } else {
        // src is [outer, out_len, inner]; scatter back onto in_len.
        let mut dst = vec![T::zero(); outer * in_len * inner];
        for o in 0..outer {
            for (j, tap) in t.iter().enumerate() {
                let w1 = T::lit(tap.w1);
                let w0 = T::one() - w1;
                let g = &src[(o * out_len + j) * inner..(o * out_len + j + 1) * inner];
                for (k, &gv) in g.iter().enumerate() {
                    dst[(o * in_len + tap.i0) * inner + k] += w0 * gv;
                    dst[(o * in_len + tap.i1) * inner + k] += w1 * gv;
                }
            }
        }
        dst
    }
}

/// Resample the three spatial axes of a 5D tensor to `out` dims.
pub fn resize_linear<T: Real>(x: &Tensor<T>, out: [usize; 3]) -> Tensor<T> {
    let [n, c, d, h, w] = x.dims5().expect("resize input must be 5D");
    let plane = n * c;
    let mut cur = x.data().to_vec();
    let dims = [d, h, w];
    let mut now = dims;
    for axis in (0..3).rev() {
        if now[axis] == out[axis] {
            continue;
        }
        let outer = plane * now[..axis].iter().product::<usize>();
        let inner: usize = now[axis + 1..].iter().product();
        cur = resample_axis(&cur, outer, now[axis], inner, out[axis], false);
        now[axis] = out[axis];
    }
    Tensor::new(vec![n, c, out[0], out[1], out[2]], cur).unwrap()
}

fn resize_linear_transpose<T: Real>(g: &Tensor<T>, input: [usize; 5]) -> Tensor<T> {
    let [n, c, d, h, w] = input;
    let [_, _, od, oh, ow] = g.dims5().unwrap();
    let plane = n * c;
    let mut cur = g.data().to_vec();
    // Forward applied axes 2,1,0 in that order; undo in reverse.
    let mut now = [od, oh, ow];
    let target = [d, h, w];
    for axis in 0..3 {
        if now[axis] == target[axis] {
            continue;
        }
        let outer = plane * now[..axis].iter().product::<usize>();
        let inner: usize = now[axis + 1..].iter().product();
        cur = resample_axis(&cur, outer, target[axis], inner, now[axis], true);
        now[axis] = target[axis];
    }
    Tensor::new(input.to_vec(), cur).unwrap()
}

impl<'g, T: Real> Var<'g, T> {
    pub fn resize_linear(self, out: [usize; 3]) -> Var<'g, T> {
        let x = self.value();
        let dims = x.dims5().expect("resize input must be 5D");
        let y = resize_linear(&x, out);
        self.graph().op(
            y,
            &[self],
            Box::new(move |g, _| vec![Some(resize_linear_transpose(g, dims))]),
        )
    }

    /// Upsample by integer `factor` per axis.
    pub fn upsample(self, factor: [usize; 3]) -> Var<'g, T> {
        let [_, _, d, h, w] = self.value().dims5().unwrap();
        self.resize_linear([d * factor[0], h * factor[1], w * factor[2]])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_1d_matches_half_pixel_rule() {
        let x = Tensor::new(vec![1, 1, 1, 1, 2], vec![0.0f64, 1.0]).unwrap();
        let y = resize_linear(&x, [1, 1, 4]);
        assert_eq!(y.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn constant_is_preserved() {
        let x = Tensor::full(&[1, 2, 2, 3, 1], 0.7f64);
        let y = resize_linear(&x, [4, 6, 8]);
        assert!(y.data().iter().all(|v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn transpose_is_adjoint() {
        let x = Tensor::from_fn(&[1, 2, 2, 3, 2], |i| (i as f64 * 0.31).sin());
        let gy = Tensor::from_fn(&[1, 2, 4, 6, 8], |i| (i as f64 * 0.17).cos());
        let y = resize_linear(&x, [4, 6, 8]);
        let gx = resize_linear_transpose(&gy, [1, 2, 2, 3, 2]);
        let lhs: f64 = y.data().iter().zip(gy.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
