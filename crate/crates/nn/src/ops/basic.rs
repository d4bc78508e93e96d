//! Elementwise, structural and reduction operations.

use std::rc::Rc;

use crate::graph::Var;
use crate::real::Real;
use crate::tensor::Tensor;

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, op: &str) {
    assert_eq!(a.shape(), b.shape(), "{op}: shape mismatch");
}

impl<'g, T: Real> Var<'g, T> {
    pub fn add(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "add");
        let out = a.zip_map(&b, |x, y| x + y);
        self.graph().op(
            out,
            &[self, other],
            Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    pub fn sub(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "sub");
        let out = a.zip_map(&b, |x, y| x - y);
        self.graph().op(
            out,
            &[self, other],
            Box::new(|g, _| vec![Some(g.clone()), Some(g.map(|v| -v))]),
        )
    }

    pub fn mul(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "mul");
        let out = a.zip_map(&b, |x, y| x * y);
        self.graph().op(
            out,
            &[self, other],
            Box::new(move |g, need| {
                vec![
                    need[0].then(|| g.zip_map(&b, |u, y| u * y)),
                    need[1].then(|| g.zip_map(&a, |u, x| u * x)),
                ]
            }),
        )
    }

    pub fn scale(self, s: f64) -> Var<'g, T> {
        let s = T::lit(s);
        let out = self.value().map(|x| x * s);
        self.graph()
            .op(out, &[self], Box::new(move |g, _| vec![Some(g.map(|u| u * s))]))
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(self, c: &Tensor<T>) -> Var<'g, T> {
        let c = Rc::new(c.clone());
        let out = self.value().zip_map(&c, |x, y| x * y);
        self.graph().op(
            out,
            &[self],
            Box::new(move |g, _| vec![Some(g.zip_map(&c, |u, y| u * y))]),
        )
    }

    pub fn add_const(self, c: &Tensor<T>) -> Var<'g, T> {
        let out = self.value().zip_map(c, |x, y| x + y);
        self.graph()
            .op(out, &[self], Box::new(|g, _| vec![Some(g.clone())]))
    }

    pub fn relu(self) -> Var<'g, T> {
        self.leaky_relu(0.0)
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'g, T> {
        let slope = T::lit(slope);
        let x = self.value();
        let out = x.map(|v| if v > T::zero() { v } else { v * slope });
        self.graph().op(
            out,
            &[self],
            Box::new(move |g, _| {
                vec![Some(g.zip_map(&x, |u, v| if v > T::zero() { u } else { u * slope }))]
            }),
        )
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        let out = self.value().map(|v| T::one() / (T::one() + (-v).exp()));
        let y = Rc::new(out.clone());
        self.graph().op(
            out,
            &[self],
            Box::new(move |g, _| vec![Some(g.zip_map(&y, |u, s| u * s * (T::one() - s)))]),
        )
    }

    pub fn tanh(self) -> Var<'g, T> {
        let out = self.value().map(|v| v.tanh());
        let y = Rc::new(out.clone());
        self.graph().op(
            out,
            &[self],
            Box::new(move |g, _| vec![Some(g.zip_map(&y, |u, t| u * (T::one() - t * t)))]),
        )
    }

    /// Clamp to `[lo, hi]`; gradient is zero where the clamp is active.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'g, T> {
        let (lo, hi) = (T::lit(lo), T::lit(hi));
        let x = self.value();
        let out = x.map(|v| v.max(lo).min(hi));
        self.graph().op(
            out,
            &[self],
            Box::new(move |g, _| {
                vec![Some(g.zip_map(&x, |u, v| if v < lo || v > hi { T::zero() } else { u }))]
            }),
        )
    }

    pub fn sum(self) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = Tensor::scalar(x.sum());
        self.graph().op(
            out,
            &[self],
            Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.data()[0]))]),
        )
    }

    pub fn mean(self) -> Var<'g, T> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Inner product with a constant tensor, returning a scalar.
    pub fn dot_const(self, c: &Tensor<T>) -> Var<'g, T> {
        self.mul_const(c).sum()
    }

    /// Same value, cut from the tape.
    pub fn detach(self) -> Var<'g, T> {
        self.graph().constant((*self.value()).clone())
    }

    /// Forward value is `hard`; the backward pass treats the op as identity
    /// so gradients reach `self` as if its own value had been used.
    pub fn straight_through(self, hard: Tensor<T>) -> Var<'g, T> {
        assert_eq!(
            hard.shape(),
            self.value().shape(),
            "straight_through: shape mismatch"
        );
        self.graph()
            .op(hard, &[self], Box::new(|g, _| vec![Some(g.clone())]))
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g, T> {
        let x = self.value();
        let old = x.shape().to_vec();
        let out = (*x).clone().reshape(shape).expect("reshape");
        self.graph().op(
            out,
            &[self],
            Box::new(move |g, _| vec![Some(g.clone().reshape(&old).expect("reshape back"))]),
        )
    }

    /// `[N,1,D,H,W] * [N,C,D,H,W] -> [N,C,D,H,W]`, broadcasting over channels.
    pub fn mul_channel_broadcast(self, labels: Var<'g, T>) -> Var<'g, T> {
        let x = self.value();
        let y = labels.value();
        let [n, one, d, h, w] = x.dims5().expect("image dims");
        let [ny, c, dy, hy, wy] = y.dims5().expect("label dims");
        assert_eq!(one, 1, "mul_channel_broadcast: image must have one channel");
        assert_eq!((n, d, h, w), (ny, dy, hy, wy), "mul_channel_broadcast: shape mismatch");
        let vox = d * h * w;
        let mut out = Tensor::zeros(y.shape());
        {
            let o = out.data_mut();
            for b in 0..n {
                let xs = &x.data()[b * vox..(b + 1) * vox];
                for ch in 0..c {
                    let base = (b * c + ch) * vox;
                    let ys = &y.data()[base..base + vox];
                    for ((o, &xv), &yv) in o[base..base + vox].iter_mut().zip(xs).zip(ys) {
                        *o = xv * yv;
                    }
                }
            }
        }
        self.graph().op(
            out,
            &[self, labels],
            Box::new(move |g, need| {
                let gx = need[0].then(|| {
                    let mut gx = Tensor::zeros(x.shape());
                    let gd = gx.data_mut();
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * vox;
                            let ys = &y.data()[base..base + vox];
                            let gs = &g.data()[base..base + vox];
                            for ((acc, &gv), &yv) in
                                gd[b * vox..(b + 1) * vox].iter_mut().zip(gs).zip(ys)
                            {
                                *acc += gv * yv;
                            }
                        }
                    }
                    gx
                });
                let gy = need[1].then(|| {
                    let mut gy = Tensor::zeros(y.shape());
                    let gd = gy.data_mut();
                    for b in 0..n {
                        let xs = &x.data()[b * vox..(b + 1) * vox];
                        for ch in 0..c {
                            let base = (b * c + ch) * vox;
                            for ((o, &gv), &xv) in gd[base..base + vox]
                                .iter_mut()
                                .zip(&g.data()[base..base + vox])
                                .zip(xs)
                            {
                                *o = gv * xv;
                            }
                        }
                    }
                    gy
                });
                vec![gx, gy]
            }),
        )
    }
}

/// Concatenate 5D tensors along the channel axis.
pub fn concat_channels<'g, T: Real>(parts: &[Var<'g, T>]) -> Var<'g, T> {
    assert!(!parts.is_empty(), "concat of zero tensors");
    let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
    let [n, _, d, h, w] = values[0].dims5().expect("concat dims");
    let chans: Vec<usize> = values
        .iter()
        .map(|v| {
            let [nn, c, dd, hh, ww] = v.dims5().expect("concat dims");
            assert_eq!((nn, dd, hh, ww), (n, d, h, w), "concat: spatial mismatch");
            c
        })
        .collect();
    let total: usize = chans.iter().sum();
    let vox = d * h * w;
    let mut out = Tensor::zeros(&[n, total, d, h, w]);
    {
        let o = out.data_mut();
        for b in 0..n {
            let mut off = 0;
            for (v, &c) in values.iter().zip(&chans) {
                let src = &v.data()[b * c * vox..(b + 1) * c * vox];
                let dst = (b * total + off) * vox;
                o[dst..dst + c * vox].copy_from_slice(src);
                off += c;
            }
        }
    }
    let graph = parts[0].graph();
    graph.op(
        out,
        parts,
        Box::new(move |g, need| {
            let mut grads = Vec::with_capacity(chans.len());
            let mut off = 0;
            for (i, &c) in chans.iter().enumerate() {
                if need[i] {
                    let mut gi = Tensor::zeros(&[n, c, d, h, w]);
                    for b in 0..n {
                        let src = (b * total + off) * vox;
                        gi.data_mut()[b * c * vox..(b + 1) * c * vox]
                            .copy_from_slice(&g.data()[src..src + c * vox]);
                    }
                    grads.push(Some(gi));
                } else {
                    grads.push(None);
                }
                off += c;
            }
            grads
        }),
    )
}
