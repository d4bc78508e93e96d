//! S-net: residual U-net with multi-scale pooling and auxiliary classifiers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use semiseg_nn::layers::{Conv3d, InstanceNorm3d};
use semiseg_nn::{concat_channels, Bound, ConvGeometry, Graph, ParamId, ParamStore, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::voldata::NUM_CLASSES;

const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegNetConfig {
    pub in_depth: usize,
    pub in_height: usize,
    pub in_width: usize,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default = "default_base")]
    pub base_channels: usize,
    #[serde(default = "default_levels")]
    pub depth_levels: usize,
    /// `(w_main, w_aux2, w_aux4)`.
    #[serde(default = "default_aux_weights")]
    pub aux_weights: [f64; 3],
    /// Without auxiliary heads the fused output is the main head alone.
    #[serde(default = "default_true")]
    pub aux_heads: bool,
    #[serde(default = "default_pool_kernels")]
    pub pool_kernels: Vec<usize>,
}

fn default_classes() -> usize {
    NUM_CLASSES
}
fn default_base() -> usize {
    8
}
fn default_levels() -> usize {
    3
}
fn default_aux_weights() -> [f64; 3] {
    [1.0, 0.5, 0.25]
}
fn default_true() -> bool {
    true
}
fn default_pool_kernels() -> Vec<usize> {
    vec![2, 3, 5]
}

impl SegNetConfig {
    /// Desk scale: 16x32x32 input, base 8.
    pub fn desk() -> Self {
        Self::with_input([16, 32, 32], 8)
    }

    /// Full scale: 16x128x128 input, base 64.
    pub fn full() -> Self {
        Self::with_input([16, 128, 128], 64)
    }

    pub fn with_input(dims: [usize; 3], base_channels: usize) -> Self {
        Self {
            in_depth: dims[0],
            in_height: dims[1],
            in_width: dims[2],
            num_classes: NUM_CLASSES,
            base_channels,
            depth_levels: 3,
            aux_weights: default_aux_weights(),
            aux_heads: true,
            pool_kernels: default_pool_kernels(),
        }
    }

    pub fn input_dims(&self) -> [usize; 3] {
        [self.in_depth, self.in_height, self.in_width]
    }

    /// Channel width of encoder/decoder level `l`.
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn level_dims(&self, level: usize) -> [usize; 3] {
        self.input_dims().map(|d| d >> level)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, message: String| Error::Config {
            path: path.into(),
            message,
        };
        if self.num_classes < 2 {
            return Err(bad("num_classes", "need at least 2 classes".into()));
        }
        if self.base_channels == 0 {
            return Err(bad("base_channels", "must be >= 1".into()));
        }
        // The quarter-resolution head reads decoder level 2.
        let need = if self.aux_heads { 3 } else { 1 };
        if self.depth_levels < need {
            return Err(bad(
                "depth_levels",
                format!("need at least {need} levels, got {}", self.depth_levels),
            ));
        }
        let m = 1usize << self.depth_levels;
        for (name, d) in [
            ("in_depth", self.in_depth),
            ("in_height", self.in_height),
            ("in_width", self.in_width),
        ] {
            if d == 0 || d % m != 0 {
                return Err(bad(name, format!("{d} is not divisible by 2^{}", self.depth_levels)));
            }
        }
        if self.pool_kernels.is_empty() || self.pool_kernels.iter().any(|k| k % 2 == 0 && *k != 2) {
            return Err(bad(
                "pool_kernels",
                "kernels must be 2 or odd so every branch halves the grid".into(),
            ));
        }
        check_weights(&self.aux_weights)
            .map_err(|e| bad("aux_weights", e.to_string()))?;
        Ok(())
    }
}

fn check_weights(w: &[f64; 3]) -> Result<()> {
    if w.iter().any(|v| !v.is_finite() || *v < 0.0) || w.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Invalid(format!(
            "head weights must be nonnegative with a positive sum, got {w:?}"
        )));
    }
    Ok(())
}

/// Padding that makes a stride-2 max-pool with kernel `k` halve even sizes.
fn pool_padding(k: usize) -> usize {
    if k == 2 {
        0
    } else {
        k / 2
    }
}

/// Two 3x3x3 convolutions with instance norm and a residual shortcut.
#[derive(Debug, Clone)]
pub struct ResBlock {
    conv1: Conv3d,
    norm1: InstanceNorm3d,
    conv2: Conv3d,
    norm2: InstanceNorm3d,
    proj: Option<Conv3d>,
}

impl ResBlock {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let k3 = ConvGeometry::cubic(3, 1, 1);
        Self {
            conv1: Conv3d::new(store, &format!("{name}.conv1"), cin, cout, k3, false, RELU_GAIN, rng),
            norm1: InstanceNorm3d::new(store, &format!("{name}.norm1"), cout),
            conv2: Conv3d::new(store, &format!("{name}.conv2"), cout, cout, k3, false, RELU_GAIN, rng),
            norm2: InstanceNorm3d::new(store, &format!("{name}.norm2"), cout),
            proj: (cin != cout).then(|| {
                Conv3d::new(store, &format!("{name}.proj"), cin, cout, ConvGeometry::cubic(1, 1, 0), true, 1.0, rng)
            }),
        }
    }

    fn forward<'g, T: Real>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let h = self.norm1.forward(p, self.conv1.forward(p, x)).relu();
        let h = self.norm2.forward(p, self.conv2.forward(p, h));
        let skip = match &self.proj {
            Some(c) => c.forward(p, x),
            None => x,
        };
        h.add(skip).relu()
    }
}

/// Parallel stride-2 max-pools concatenated and reduced by a 1x1 conv.
#[derive(Debug, Clone)]
pub struct MultiScalePool {
    kernels: Vec<usize>,
    reduce: Conv3d,
}

impl MultiScalePool {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        kernels: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let reduce = Conv3d::new(
            store,
            &format!("{name}.reduce"),
            channels * kernels.len(),
            channels,
            ConvGeometry::cubic(1, 1, 0),
            true,
            1.0,
            rng,
        );
        Self {
            kernels: kernels.to_vec(),
            reduce,
        }
    }

    /// Concatenated pooling branches, before the learned reduction.
    pub fn branches<'g, T: Real>(&self, x: Var<'g, T>) -> Result<Vec<Var<'g, T>>> {
        let shape = x.shape();
        if shape.len() != 5 || shape[2..].iter().any(|d| d % 2 != 0) {
            return Err(Error::Shape(format!(
                "multi-scale pooling needs even spatial dims, got {shape:?}"
            )));
        }
        Ok(self
            .kernels
            .iter()
            .map(|&k| x.max_pool3d(ConvGeometry::cubic(k, 2, pool_padding(k))))
            .collect())
    }

    pub fn forward<'g, T: Real>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let parts = self.branches(x)?;
        Ok(self.reduce.forward(p, concat_channels(&parts)))
    }
}

#[derive(Debug, Clone)]
struct DecoderLevel {
    /// 1x1 conv at the coarse level to the skip's width, before upsampling.
    up: Conv3d,
    block: ResBlock,
}

#[derive(Debug, Clone)]
struct Heads {
    main: Conv3d,
    aux2: Option<Conv3d>,
    aux4: Option<Conv3d>,
}

/// Network topology; parameters live in the accompanying store.
#[derive(Debug, Clone)]
pub struct SegArch {
    encoder: Vec<ResBlock>,
    pools: Vec<MultiScalePool>,
    /// `decoder[l]` produces level `l` from level `l + 1`.
    decoder: Vec<DecoderLevel>,
    heads: Heads,
}

#[derive(Debug, Clone)]
pub struct SegNet<T> {
    pub cfg: SegNetConfig,
    pub arch: SegArch,
    pub params: ParamStore<T>,
}

/// Channel count and native resolution of the features a head consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadInput {
    pub channels: usize,
    pub dims: [usize; 3],
}

/// S-net outputs for a batch `[N, ...]`.
pub struct SegOutput<'g, T: Real> {
    /// Fused distribution at input resolution.
    pub fused: Var<'g, T>,
    pub head_main: Var<'g, T>,
    pub head_aux2: Option<Var<'g, T>>,
    pub head_aux4: Option<Var<'g, T>>,
    pub logits_main: Var<'g, T>,
    pub logits_aux2: Option<Var<'g, T>>,
    pub logits_aux4: Option<Var<'g, T>>,
}

/// Build a freshly initialized network from a seed.
pub fn build_segnet<T: Real>(cfg: &SegNetConfig, seed: u64) -> Result<SegNet<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let levels = cfg.depth_levels;
    let mut encoder = Vec::new();
    let mut pools = Vec::new();
    encoder.push(ResBlock::new(&mut store, "enc0", 1, cfg.channels(0), &mut rng));
    for l in 1..=levels {
        pools.push(MultiScalePool::new(
            &mut store,
            &format!("pool{l}"),
            cfg.channels(l - 1),
            &cfg.pool_kernels,
            &mut rng,
        ));
        encoder.push(ResBlock::new(
            &mut store,
            &format!("enc{l}"),
            cfg.channels(l - 1),
            cfg.channels(l),
            &mut rng,
        ));
    }
    let mut decoder: Vec<Option<DecoderLevel>> = vec![None; levels];
    for l in (0..levels).rev() {
        let c = cfg.channels(l);
        let up = Conv3d::new(
            &mut store,
            &format!("dec{l}.up"),
            cfg.channels(l + 1),
            c,
            ConvGeometry::cubic(1, 1, 0),
            false,
            1.0,
            &mut rng,
        );
        let block = ResBlock::new(&mut store, &format!("dec{l}.block"), 2 * c, c, &mut rng);
        decoder[l] = Some(DecoderLevel { up, block });
    }
    let head = |store: &mut ParamStore<T>, name: &str, level: usize, rng: &mut ChaCha8Rng| {
        Conv3d::new(
            store,
            name,
            cfg.channels(level),
            cfg.num_classes,
            ConvGeometry::cubic(1, 1, 0),
            true,
            1.0,
            rng,
        )
    };
    let heads = Heads {
        main: head(&mut store, "head_main", 0, &mut rng),
        aux2: cfg.aux_heads.then(|| head(&mut store, "head_aux2", 1, &mut rng)),
        aux4: cfg.aux_heads.then(|| head(&mut store, "head_aux4", 2, &mut rng)),
    };
    Ok(SegNet {
        cfg: cfg.clone(),
        arch: SegArch {
            encoder,
            pools,
            decoder: decoder.into_iter().map(|d| d.expect("all levels built")).collect(),
            heads,
        },
        params: store,
    })
}

/// `(w_main * main + w_aux2 * up(aux2) + w_aux4 * up(aux4)) / sum(w)`, with
/// the auxiliary maps trilinearly resized to the main head's resolution.
pub fn fuse_heads<'g, T: Real>(
    main: Var<'g, T>,
    aux2: Option<Var<'g, T>>,
    aux4: Option<Var<'g, T>>,
    weights: [f64; 3],
) -> Result<Var<'g, T>> {
    check_weights(&weights)?;
    let shape = main.shape();
    if shape.len() != 5 {
        return Err(Error::Shape(format!("main head must be 5D, got {shape:?}")));
    }
    let full = [shape[2], shape[3], shape[4]];
    let mut used = weights[0];
    let mut acc = if weights[0] == 1.0 { main } else { main.scale(weights[0]) };
    for (aux, w, f) in [(aux2, weights[1], 2usize), (aux4, weights[2], 4)] {
        let Some(a) = aux else { continue };
        let s = a.shape();
        if s.len() != 5 || s[..2] != shape[..2] || (2..5).any(|i| s[i] * f != shape[i]) {
            return Err(Error::Shape(format!(
                "auxiliary map {s:?} is not 1/{f} of {shape:?}"
            )));
        }
        if w == 0.0 {
            continue;
        }
        acc = acc.add(a.resize_linear(full).scale(w));
        used += w;
    }
    if used <= 0.0 {
        return Err(Error::Invalid("selected head weights sum to zero".into()));
    }
    Ok(if used == 1.0 { acc } else { acc.scale(1.0 / used) })
}

impl<T: Real> SegNet<T> {
    pub fn param_ids(&self) -> Vec<ParamId> {
        self.params.ids().collect()
    }

    /// Feature maps consumed by `(main, aux2, aux4)` heads.
    pub fn head_inputs(&self) -> [Option<HeadInput>; 3] {
        let h = &self.arch.heads;
        let info = |c: &Conv3d, level: usize| HeadInput {
            channels: c.in_channels,
            dims: self.cfg.level_dims(level),
        };
        [
            Some(info(&h.main, 0)),
            h.aux2.as_ref().map(|c| info(c, 1)),
            h.aux4.as_ref().map(|c| info(c, 2)),
        ]
    }

    pub fn pool(&self, level: usize) -> &MultiScalePool {
        &self.arch.pools[level - 1]
    }

    /// Forward pass on `x` of shape `[N, 1, D, H, W]`.
    pub fn forward<'g>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<SegOutput<'g, T>> {
        let shape = x.shape();
        let [d, h, w] = self.cfg.input_dims();
        if shape.len() != 5 || shape[1] != 1 || shape[2..] != [d, h, w] {
            return Err(Error::Shape(format!(
                "S-net expects [N, 1, {d}, {h}, {w}], got {shape:?}"
            )));
        }
        let a = &self.arch;
        let mut skips = Vec::with_capacity(a.encoder.len());
        let mut cur = a.encoder[0].forward(p, x);
        for l in 1..a.encoder.len() {
            skips.push(cur);
            let pooled = a.pools[l - 1].forward(p, cur)?;
            cur = a.encoder[l].forward(p, pooled);
        }
        let mut dec_out: Vec<Option<Var<'g, T>>> = vec![None; a.decoder.len()];
        for l in (0..a.decoder.len()).rev() {
            let lvl = &a.decoder[l];
            let up = lvl.up.forward(p, cur).upsample([2, 2, 2]);
            cur = lvl.block.forward(p, concat_channels(&[up, skips[l]]));
            dec_out[l] = Some(cur);
        }
        let logits_main = a.heads.main.forward(p, dec_out[0].expect("level 0"));
        let logits_aux2 = a.heads.aux2.as_ref().map(|c| c.forward(p, dec_out[1].expect("level 1")));
        let logits_aux4 = a.heads.aux4.as_ref().map(|c| c.forward(p, dec_out[2].expect("level 2")));
        let head_main = logits_main.softmax_channels();
        let head_aux2 = logits_aux2.map(Var::softmax_channels);
        let head_aux4 = logits_aux4.map(Var::softmax_channels);
        let fused = fuse_heads(head_main, head_aux2, head_aux4, self.cfg.aux_weights)?;
        Ok(SegOutput {
            fused,
            head_main,
            head_aux2,
            head_aux4,
            logits_main,
            logits_aux2,
            logits_aux4,
        })
    }

    /// Fused prediction without recording gradients.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let out = self.forward(&p, g.constant(x.clone()))?;
        Ok((*out.fused.value()).clone())
    }
}
