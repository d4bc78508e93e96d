//! Fused scalar objectives. Reductions are sums, accumulated in f64.

use crate::graph::Var;
use crate::real::Real;
use crate::tensor::Tensor;

impl<'g, T: Real> Var<'g, T> {
    /// `-sum_v mask_v * w[label_v] * ln(max(p[label_v], eps))` over a
    /// probability tensor `[N, C, D, H, W]`. `labels` and `mask` are indexed
    /// per voxel `(n, d, h, w)`.
    pub fn weighted_nll(
        self,
        labels: &[usize],
        class_weights: &[f64],
        mask: Option<&[bool]>,
        eps: f64,
    ) -> Var<'g, T> {
        let p = self.value();
        let [n, c, d, h, w] = p.dims5().expect("weighted_nll input must be 5D");
        let s = d * h * w;
        assert_eq!(labels.len(), n * s, "weighted_nll: label count");
        assert_eq!(class_weights.len(), c, "weighted_nll: weight count");
        if let Some(m) = mask {
            assert_eq!(m.len(), n * s, "weighted_nll: mask size");
        }
        let mut total = 0.0f64;
        let mut picks = Vec::with_capacity(n * s);
        for b in 0..n {
            for v in 0..s {
                let flat = b * s + v;
                if mask.is_some_and(|m| !m[flat]) {
                    continue;
                }
                let label = labels[flat];
                assert!(label < c, "weighted_nll: label {label} out of range");
                let wt = class_weights[label];
                if wt == 0.0 {
                    continue;
                }
                let idx = (b * c + label) * s + v;
                let pv = p.data()[idx].to_f64().unwrap();
                total -= wt * pv.max(eps).ln();
                picks.push((idx, wt, pv));
            }
        }
        let shape = p.shape().to_vec();
        self.graph().op(
            Tensor::scalar(T::lit(total)),
            &[self],
            Box::new(move |g, _| {
                let up = g.data()[0].to_f64().unwrap();
                let mut gp = Tensor::zeros(&shape);
                let gd = gp.data_mut();
                for &(idx, wt, pv) in &picks {
                    if pv > eps {
                        gd[idx] += T::lit(-up * wt / pv);
                    }
                }
                vec![Some(gp)]
            }),
        )
    }

    /// Binary cross-entropy against a constant target, summed over all
    /// elements. Inputs are clamped to `[eps, 1 - eps]` before the logs.
    pub fn bce_const(self, target: f64, eps: f64) -> Var<'g, T> {
        let z = self.value();
        let lo = eps;
        let hi = 1.0 - eps;
        let mut total = 0.0f64;
        for v in z.data() {
            let zv = v.to_f64().unwrap().clamp(lo, hi);
            total -= target * zv.ln() + (1.0 - target) * (1.0 - zv).ln();
        }
        self.graph().op(
            Tensor::scalar(T::lit(total)),
            &[self],
            Box::new(move |g, _| {
                let up = g.data()[0].to_f64().unwrap();
                let gz = z.map(|v| {
                    let zv = v.to_f64().unwrap();
                    if zv < lo || zv > hi {
                        T::zero()
                    } else {
                        T::lit(-up * (target / zv - (1.0 - target) / (1.0 - zv)))
                    }
                });
                vec![Some(gz)]
            }),
        )
    }
}
