use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction and no weight decay. The learning rate is
/// supplied per step so an external schedule can drive it.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    pub step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamStore<T>, cfg: AdamConfig) -> Self {
        let mut adam = Self {
            cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        };
        adam.track(params);
        adam
    }

    /// Start tracking parameters appended to the store since the last call.
    pub fn track(&mut self, params: &ParamStore<T>) {
        for id in params.ids().skip(self.m.len()) {
            let shape = params.get(id).shape().to_vec();
            self.m.push(Tensor::zeros(&shape));
            self.v.push(Tensor::zeros(&shape));
        }
    }

    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        self.track(params);
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let step_size = T::lit(lr / bc1);
        let bc2_sqrt = T::lit(bc2.sqrt());
        let (b1t, b2t) = (T::lit(b1), T::lit(b2));
        let (one_b1, one_b2) = (T::lit(1.0 - b1), T::lit(1.0 - b2));
        let eps = T::lit(self.cfg.eps);
        for (i, g) in grads.iter().enumerate() {
            let p = params.get_mut(ParamId(i));
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((p, m), v), &g) in p.data_mut().iter_mut().zip(m).zip(v).zip(g.data()) {
                *m = b1t * *m + one_b1 * g;
                *v = b2t * *v + one_b2 * g * g;
                *p -= step_size * *m / ((*v).sqrt() / bc2_sqrt + eps);
            }
        }
    }

    /// Moments as a parameter store (`m.<name>`, `v.<name>`) for checkpoints.
    pub fn state_store(&self, params: &ParamStore<T>) -> ParamStore<T> {
        let mut s = ParamStore::new();
        for (i, (name, _)) in params.iter().enumerate().take(self.m.len()) {
            s.add(format!("m.{name}"), self.m[i].clone());
            s.add(format!("v.{name}"), self.v[i].clone());
        }
        s
    }

    pub fn restore(
        params: &ParamStore<T>,
        cfg: AdamConfig,
        step: u64,
        state: &ParamStore<T>,
    ) -> Option<Self> {
        let mut m = Vec::with_capacity(params.len());
        let mut v = Vec::with_capacity(params.len());
        for (name, t) in params.iter() {
            let mi = state.find(&format!("m.{name}"))?;
            let vi = state.find(&format!("v.{name}"))?;
            if state.get(mi).shape() != t.shape() || state.get(vi).shape() != t.shape() {
                return None;
            }
            m.push(state.get(mi).clone());
            v.push(state.get(vi).clone());
        }
        Some(Self { cfg, step, m, v })
    }
}
