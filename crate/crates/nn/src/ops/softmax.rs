use std::rc::Rc;

use crate::graph::Var;
use crate::real::Real;
use crate::tensor::Tensor;

/// Softmax over the channel axis of a `[N, C, D, H, W]` tensor.
pub fn softmax_channels_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, d, h, w] = x.dims5().expect("softmax input must be 5D");
    let s = d * h * w;
    let mut out = Tensor::zeros(x.shape());
    let xs = x.data();
    let o = out.data_mut();
    let mut buf = vec![T::zero(); c];
    for b in 0..n {
        let base = b * c * s;
        for v in 0..s {
            let mut m = T::neg_infinity();
            for ch in 0..c {
                m = m.max(xs[base + ch * s + v]);
            }
            let mut z = T::zero();
            for ch in 0..c {
                buf[ch] = (xs[base + ch * s + v] - m).exp();
                z += buf[ch];
            }
            for ch in 0..c {
                o[base + ch * s + v] = buf[ch] / z;
            }
        }
    }
    out
}

impl<'g, T: Real> Var<'g, T> {
    pub fn softmax_channels(self) -> Var<'g, T> {
        let x = self.value();
        let y = softmax_channels_forward(&x);
        let yr = Rc::new(y.clone());
        let [n, c, d, h, w] = x.dims5().unwrap();
        let s = d * h * w;
        self.graph().op(
            y,
            &[self],
            Box::new(move |g, _| {
                let mut gx = Tensor::zeros(&[n, c, d, h, w]);
                let (ys, gs) = (yr.data(), g.data());
                let gd = gx.data_mut();
                for b in 0..n {
                    let base = b * c * s;
                    for v in 0..s {
                        let mut dot = T::zero();
                        for ch in 0..c {
                            let i = base + ch * s + v;
                            dot += gs[i] * ys[i];
                        }
                        for ch in 0..c {
                            let i = base + ch * s + v;
                            gd[i] = ys[i] * (gs[i] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }
}
