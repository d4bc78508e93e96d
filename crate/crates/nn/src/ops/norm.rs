use std::rc::Rc;

use crate::graph::Var;
use crate::real::Real;
use crate::tensor::Tensor;

impl<'g, T: Real> Var<'g, T> {
    /// Per-sample, per-channel normalization over the spatial axes with a
    /// learned affine `gamma`, `beta` (both `[C]`).
    pub fn instance_norm(self, gamma: Var<'g, T>, beta: Var<'g, T>, eps: f64) -> Var<'g, T> {
        let x = self.value();
        let gv = gamma.value();
        let bv = beta.value();
        let [n, c, d, h, w] = x.dims5().expect("instance_norm input must be 5D");
        assert_eq!(gv.shape(), &[c], "instance_norm: gamma shape");
        assert_eq!(bv.shape(), &[c], "instance_norm: beta shape");
        let s = d * h * w;
        let inv_s = T::one() / T::lit(s as f64);
        let eps = T::lit(eps);
        let mut xhat = Tensor::zeros(x.shape());
        let mut inv_std = vec![T::zero(); n * c];
        let mut out = Tensor::zeros(x.shape());
        for plane in 0..n * c {
            let ch = plane % c;
            let xs = &x.data()[plane * s..(plane + 1) * s];
            let mean = xs.iter().copied().sum::<T>() * inv_s;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_s;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[plane] = inv;
            let (gm, bt) = (gv.data()[ch], bv.data()[ch]);
            let xh = &mut xhat.data_mut()[plane * s..(plane + 1) * s];
            let o = &mut out.data_mut()[plane * s..(plane + 1) * s];
            for ((xh, o), &v) in xh.iter_mut().zip(o.iter_mut()).zip(xs) {
                *xh = (v - mean) * inv;
                *o = gm * *xh + bt;
            }
        }
        let xhat = Rc::new(xhat);
        self.graph().op(
            out,
            &[self, gamma, beta],
            Box::new(move |g, need| {
                let mut gx = need[0].then(|| Tensor::zeros(&[n, c, d, h, w]));
                let mut ggamma = Tensor::zeros(&[c]);
                let mut gbeta = Tensor::zeros(&[c]);
                for plane in 0..n * c {
                    let ch = plane % c;
                    let gs = &g.data()[plane * s..(plane + 1) * s];
                    let xh = &xhat.data()[plane * s..(plane + 1) * s];
                    let sum_g: T = gs.iter().copied().sum();
                    let sum_gx: T = gs.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                    ggamma.data_mut()[ch] += sum_gx;
                    gbeta.data_mut()[ch] += sum_g;
                    if let Some(gx) = gx.as_mut() {
                        let gm = gv.data()[ch];
                        let k = gm * inv_std[plane];
                        let mean_g = sum_g * inv_s;
                        let mean_gx = sum_gx * inv_s;
                        let dst = &mut gx.data_mut()[plane * s..(plane + 1) * s];
                        for ((o, &gi), &xi) in dst.iter_mut().zip(gs).zip(xh) {
                            *o = k * (gi - mean_g - xi * mean_gx);
                        }
                    }
                }
                vec![gx, need[1].then_some(ggamma), need[2].then_some(gbeta)]
            }),
        )
    }
}
