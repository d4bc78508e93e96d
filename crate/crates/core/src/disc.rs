//! D-net: a fully convolutional discriminator scoring image-label products
//! voxel by voxel.

use ndarray::{Array3, Array5};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use semiseg_nn::layers::{leaky_gain, Conv3d, InstanceNorm3d};
use semiseg_nn::{Bound, ConvGeometry, Graph, ParamStore, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{argmax_channels, LOG_EPS};
use crate::voldata::NUM_CLASSES;

/// How the label map enters the product with the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscInputMode {
    /// Argmax one-hot, no gradient to the labels.
    Hard,
    /// Probabilities as given.
    Soft,
    /// Hard one-hot forward, identity gradient onto the probabilities.
    StraightThrough,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscConfig {
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default = "default_base")]
    pub base_channels: usize,
    /// Number of stride-2 blocks; inputs must be divisible by `2^num_down`.
    #[serde(default = "default_down")]
    pub num_down: usize,
    #[serde(default = "default_slope")]
    pub leaky_slope: f64,
    #[serde(default)]
    pub instance_norm: bool,
}

fn default_classes() -> usize {
    NUM_CLASSES
}
fn default_base() -> usize {
    8
}
fn default_down() -> usize {
    4
}
fn default_slope() -> f64 {
    0.2
}

impl Default for DiscConfig {
    fn default() -> Self {
        Self {
            num_classes: NUM_CLASSES,
            base_channels: 8,
            num_down: 4,
            leaky_slope: 0.2,
            instance_norm: false,
        }
    }
}

impl DiscConfig {
    /// Full-scale widths 64, 128, 256, 512.
    pub fn full() -> Self {
        Self {
            base_channels: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, message: String| Error::Config {
            path: path.into(),
            message,
        };
        if self.num_classes < 2 {
            return Err(bad("num_classes", "need at least 2 classes".into()));
        }
        if self.base_channels == 0 || self.num_down == 0 {
            return Err(bad("base_channels", "widths and depth must be >= 1".into()));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return Err(bad("leaky_slope", format!("{} is not a valid slope", self.leaky_slope)));
        }
        Ok(())
    }

    /// Check that `dims` survive `num_down` halvings.
    pub fn check_dims(&self, dims: [usize; 3]) -> Result<()> {
        let m = 1usize << self.num_down;
        if dims.iter().any(|&d| d == 0 || d % m != 0) {
            return Err(Error::Shape(format!(
                "D-net input {dims:?} is not divisible by {m}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct DownBlock {
    conv: Conv3d,
    norm: Option<InstanceNorm3d>,
}

#[derive(Debug, Clone)]
pub struct DiscArch {
    blocks: Vec<DownBlock>,
    project: Conv3d,
}

#[derive(Debug, Clone)]
pub struct DiscNet<T> {
    pub cfg: DiscConfig,
    pub arch: DiscArch,
    pub params: ParamStore<T>,
}

/// Per-voxel realness in `(0, 1)` for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap {
    pub data: Array3<f32>,
}

pub fn build_discnet<T: Real>(cfg: &DiscConfig, seed: u64) -> Result<DiscNet<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let gain = leaky_gain(cfg.leaky_slope);
    let mut blocks = Vec::new();
    let mut cin = cfg.num_classes;
    for i in 0..cfg.num_down {
        let cout = cfg.base_channels << i;
        let conv = Conv3d::new(
            &mut store,
            &format!("down{i}"),
            cin,
            cout,
            ConvGeometry::cubic(4, 2, 1),
            !cfg.instance_norm,
            gain,
            &mut rng,
        );
        let norm = cfg
            .instance_norm
            .then(|| InstanceNorm3d::new(&mut store, &format!("down{i}.norm"), cout));
        blocks.push(DownBlock { conv, norm });
        cin = cout;
    }
    let project = Conv3d::new(
        &mut store,
        "project",
        cin,
        1,
        ConvGeometry::cubic(3, 1, 1),
        true,
        1.0,
        &mut rng,
    );
    Ok(DiscNet {
        cfg: cfg.clone(),
        arch: DiscArch { blocks, project },
        params: store,
    })
}

fn check_unit_range<T: Real>(x: &Tensor<T>) -> Result<()> {
    if x
        .data()
        .iter()
        .any(|v| !(v.to_f64().unwrap() >= 0.0 && v.to_f64().unwrap() <= 1.0))
    {
        return Err(Error::Invalid(
            "D-net image input must be normalized to [0, 1]".into(),
        ));
    }
    Ok(())
}

/// Hard one-hot of a `[N, C, D, H, W]` distribution.
pub fn one_hot_argmax<T: Real>(p: &Tensor<T>) -> Tensor<T> {
    let [n, c, d, h, w] = p.dims5().expect("5D labels");
    let s = d * h * w;
    let arg = argmax_channels(p);
    let mut out = Tensor::zeros(p.shape());
    let o = out.data_mut();
    for b in 0..n {
        for v in 0..s {
            o[(b * c + arg[b * s + v]) * s + v] = T::one();
        }
    }
    out
}

/// `x ⊙ y_c` per channel. `x` is `[N, 1, D, H, W]`, `labels` `[N, C, D, H, W]`.
pub fn make_disc_input<'g, T: Real>(
    x: Var<'g, T>,
    labels: Var<'g, T>,
    mode: DiscInputMode,
) -> Result<Var<'g, T>> {
    let xs = x.shape();
    let ls = labels.shape();
    if xs.len() != 5 || ls.len() != 5 || xs[1] != 1 || xs[0] != ls[0] || xs[2..] != ls[2..] {
        return Err(Error::Shape(format!("image {xs:?} vs labels {ls:?}")));
    }
    check_unit_range(&x.value())?;
    let y = match mode {
        DiscInputMode::Soft => labels,
        DiscInputMode::Hard => labels.graph().constant(one_hot_argmax(&labels.value())),
        DiscInputMode::StraightThrough => labels.straight_through(one_hot_argmax(&labels.value())),
    };
    Ok(x.mul_channel_broadcast(y))
}

impl<T: Real> DiscNet<T> {
    /// Confidence map `[N, 1, D, H, W]` for a `[N, C, D, H, W]` input.
    pub fn forward<'g>(&self, p: &Bound<'g, T>, inp: Var<'g, T>) -> Result<Var<'g, T>> {
        let s = inp.shape();
        if s.len() != 5 || s[1] != self.cfg.num_classes {
            return Err(Error::Shape(format!(
                "D-net expects [N, {}, D, H, W], got {s:?}",
                self.cfg.num_classes
            )));
        }
        let dims = [s[2], s[3], s[4]];
        self.cfg.check_dims(dims)?;
        let mut h = inp;
        for b in &self.arch.blocks {
            h = b.conv.forward(p, h);
            if let Some(n) = &b.norm {
                h = n.forward(p, h);
            }
            h = h.leaky_relu(self.cfg.leaky_slope);
        }
        let logits = self.arch.project.forward(p, h).resize_linear(dims);
        Ok(logits.sigmoid().clamp(LOG_EPS, 1.0 - LOG_EPS))
    }

    /// Inference helper: per-sample confidence maps.
    pub fn confidence(&self, x: &Tensor<T>, labels: &Tensor<T>, mode: DiscInputMode) -> Result<Vec<ConfidenceMap>> {
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let inp = make_disc_input(g.constant(x.clone()), g.constant(labels.clone()), mode)?;
        let out = self.forward(&p, inp)?.value();
        let [n, _, d, h, w] = out.dims5()?;
        let arr = Array5::from_shape_vec(
            (n, 1, d, h, w),
            out.data().iter().map(|v| v.to_f32().unwrap()).collect(),
        )
        .map_err(|e| Error::Shape(e.to_string()))?;
        Ok(arr
            .outer_iter()
            .map(|s| ConfidenceMap {
                data: s.index_axis(ndarray::Axis(0), 0).to_owned(),
            })
            .collect())
    }
}
