//! Progressive-growth volumetric GAN used to synthesize unlabeled volumes.
//!
//! Generator and critic start at 4×4×4 (from 2×2×2 noise) and grow together
//! one stage at a time. A freshly added stage is faded in: its output is
//! blended with the upsampled output of the previous stage while `alpha`
//! ramps from 0 to 1. Training uses the Wasserstein objective with a
//! gradient penalty.
//!
//! The engine has no double backward, so the parameter gradient of the
//! penalty is taken as a central difference of critic parameter gradients
//! along the normalized input gradient (a Hessian-vector product).

use std::path::{Path, PathBuf};
use std::rc::Rc;

use ndarray::{Array3, Array4};
use rand::Rng;
use rand_distr::StandardNormal;
use semiseg_nn::layers::{leaky_gain, Conv3d};
use semiseg_nn::ops::interp::resize_linear;
use semiseg_nn::ops::pool::avg_pool3d_forward;
use semiseg_nn::optim::{Adam, AdamConfig};
use semiseg_nn::{Bound, ConvGeometry, Graph, ParamId, ParamStore, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_checkpoint, take_store, write_checkpoint};
use crate::error::{Error, Result};
use crate::io_util::create_dir;
use crate::seeds::derived_rng;
use crate::voldata::{
    write_case, CaseEntry, CaseRole, CtVolume, IntensityWindow, Split, CLINICAL_SPACING_MM,
};

pub const NOISE_DIMS: [usize; 3] = [2, 2, 2];
pub const FIRST_STAGE: [usize; 3] = [4, 4, 4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrowthSchedule {
    /// Output shape per stage, `(D, H, W)`.
    pub stages: Vec<[usize; 3]>,
    pub iterations_per_stage: u64,
    /// Length of the fade window at the start of each grown stage. Half of
    /// `iterations_per_stage` when absent.
    #[serde(default)]
    pub fade_iterations: Option<u64>,
}

impl GrowthSchedule {
    pub fn new(stages: Vec<[usize; 3]>, iterations_per_stage: u64) -> Self {
        Self {
            stages,
            iterations_per_stage,
            fade_iterations: None,
        }
    }

    /// 4³ → 8³ → 16³ → 16×32×32.
    pub fn desk() -> Self {
        Self::new(vec![[4, 4, 4], [8, 8, 8], [16, 16, 16], [16, 32, 32]], 2000)
    }

    /// 4³ up to 64³, then 64×128×128.
    pub fn full() -> Self {
        Self::new(
            vec![[4, 4, 4], [8, 8, 8], [16, 16, 16], [32, 32, 32], [64, 64, 64], [64, 128, 128]],
            2000,
        )
    }

    pub fn fade_len(&self) -> u64 {
        self.fade_iterations.unwrap_or(self.iterations_per_stage / 2)
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn final_shape(&self) -> [usize; 3] {
        *self.stages.last().expect("validated schedule")
    }

    /// Upsampling factor entering stage `s` (from the noise for `s = 0`).
    pub fn factor(&self, s: usize) -> [usize; 3] {
        if s == 0 {
            return [2, 2, 2];
        }
        let (a, b) = (self.stages[s - 1], self.stages[s]);
        [b[0] / a[0], b[1] / a[1], b[2] / a[2]]
    }

    /// Fade weight after `t` iterations of stage `s`.
    pub fn alpha(&self, s: usize, t: u64) -> f64 {
        let fade = self.fade_len();
        if s == 0 || fade == 0 {
            1.0
        } else {
            (t as f64 / fade as f64).min(1.0)
        }
    }

    /// Every stage doubles all dims of its predecessor; the last stage may
    /// instead double only H and W.
    pub fn validate(&self) -> Result<()> {
        let bad = |message: String| Error::Config {
            path: "schedule.stages".into(),
            message,
        };
        match self.stages.first() {
            None => return Err(bad("schedule has no stages".into())),
            Some(&s) if s != FIRST_STAGE => {
                return Err(bad(format!("first stage must be {FIRST_STAGE:?}, got {s:?}")))
            }
            _ => {}
        }
        let last = self.stages.len() - 1;
        for i in 1..self.stages.len() {
            let (a, b) = (self.stages[i - 1], self.stages[i]);
            let all = b == [2 * a[0], 2 * a[1], 2 * a[2]];
            let planar = b == [a[0], 2 * a[1], 2 * a[2]];
            if !(all || (i == last && planar)) {
                return Err(bad(format!("stage {i} {b:?} does not double {a:?}")));
            }
        }
        if self.fade_len() > self.iterations_per_stage {
            return Err(Error::Config {
                path: "schedule.fade_iterations".into(),
                message: format!(
                    "fade window {} exceeds {} iterations per stage",
                    self.fade_len(),
                    self.iterations_per_stage
                ),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FadeState {
    pub alpha: f64,
    pub stage_index: usize,
}

impl FadeState {
    pub fn settled(stage_index: usize) -> Self {
        Self {
            alpha: 1.0,
            stage_index,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PgganConfig {
    #[serde(default = "default_latent")]
    pub latent_channels: usize,
    /// Feature width per stage; at least one entry per schedule stage.
    #[serde(default = "default_channels")]
    pub channels: Vec<usize>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_gp")]
    pub gp_lambda: f64,
    /// Weight of the `E[D(x)^2]` term keeping critic scores near zero.
    #[serde(default = "default_drift")]
    pub drift: f64,
    /// Finite-difference step along the unit input gradient.
    #[serde(default = "default_gp_step")]
    pub gp_step: f64,
    #[serde(default = "default_slope")]
    pub leaky_slope: f64,
}

fn default_latent() -> usize {
    64
}
fn default_channels() -> Vec<usize> {
    vec![32, 16, 8, 4]
}
fn default_batch() -> usize {
    4
}
fn default_lr() -> f64 {
    1e-3
}
fn default_beta2() -> f64 {
    0.99
}
fn default_gp() -> f64 {
    10.0
}
fn default_drift() -> f64 {
    1e-3
}
fn default_gp_step() -> f64 {
    1e-2
}
fn default_slope() -> f64 {
    0.2
}

impl Default for PgganConfig {
    fn default() -> Self {
        Self {
            latent_channels: default_latent(),
            channels: default_channels(),
            batch_size: default_batch(),
            lr: default_lr(),
            beta1: 0.0,
            beta2: default_beta2(),
            gp_lambda: default_gp(),
            drift: default_drift(),
            gp_step: default_gp_step(),
            leaky_slope: default_slope(),
        }
    }
}

impl PgganConfig {
    pub fn validate(&self, schedule: &GrowthSchedule) -> Result<()> {
        schedule.validate()?;
        let bad = |path: &str, message: String| Error::Config {
            path: path.into(),
            message,
        };
        if self.latent_channels == 0 {
            return Err(bad("latent_channels", "must be >= 1".into()));
        }
        if self.channels.len() < schedule.num_stages() || self.channels.contains(&0) {
            return Err(bad(
                "channels",
                format!(
                    "need {} positive widths, got {:?}",
                    schedule.num_stages(),
                    self.channels
                ),
            ));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size", "must be >= 1".into()));
        }
        for (path, v) in [("lr", self.lr), ("gp_step", self.gp_step)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(bad(path, format!("{v} must be positive")));
            }
        }
        for (path, v) in [("gp_lambda", self.gp_lambda), ("drift", self.drift), ("leaky_slope", self.leaky_slope)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(bad(path, format!("{v} must be non-negative")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(bad("beta1", "betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Latent input `[L, 2, 2, 2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseVolume {
    pub data: Array4<f32>,
}

impl NoiseVolume {
    pub fn sample(latent_channels: usize, rng: &mut impl Rng) -> Self {
        let [d, h, w] = NOISE_DIMS;
        let data = Array4::from_shape_simple_fn((latent_channels, d, h, w), || {
            rng.sample::<f32, _>(StandardNormal)
        });
        Self { data }
    }

    pub fn latent_channels(&self) -> usize {
        self.data.dim().0
    }
}

fn noise_batch<T: Real>(zs: &[NoiseVolume]) -> Tensor<T> {
    let l = zs[0].latent_channels();
    let mut shape = vec![zs.len(), l];
    shape.extend(NOISE_DIMS);
    let data = zs
        .iter()
        .flat_map(|z| z.data.iter().map(|&v| T::lit(v as f64)))
        .collect();
    Tensor::new(shape, data).expect("noise shape")
}

/// `alpha·new + (1−alpha)·old`.
pub fn fade_blend(old: &Array3<f32>, new: &Array3<f32>, alpha: f64) -> Result<Array3<f32>> {
    if old.dim() != new.dim() {
        return Err(Error::Shape(format!(
            "fade_blend: {:?} vs {:?}",
            old.dim(),
            new.dim()
        )));
    }
    check_alpha(alpha)?;
    let a = alpha as f32;
    Ok(ndarray::Zip::from(old).and(new).map_collect(|&o, &n| a * n + (1.0 - a) * o))
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(())
}

fn blend_vars<'g, T: Real>(old: Var<'g, T>, new: Var<'g, T>, alpha: f64) -> Var<'g, T> {
    new.scale(alpha).add(old.scale(1.0 - alpha))
}

fn conv3(store: &mut ParamStore<impl Real>, name: &str, cin: usize, cout: usize, gain: f64, rng: &mut impl Rng) -> Conv3d {
    Conv3d::new(store, name, cin, cout, ConvGeometry::cubic(3, 1, 1), true, gain, rng)
}

fn conv1(store: &mut ParamStore<impl Real>, name: &str, cin: usize, cout: usize, gain: f64, rng: &mut impl Rng) -> Conv3d {
    Conv3d::new(store, name, cin, cout, ConvGeometry::cubic(1, 1, 0), true, gain, rng)
}

#[derive(Debug, Clone)]
struct GenBlock {
    factor: [usize; 3],
    conv_a: Conv3d,
    conv_b: Conv3d,
    to_rgb: Conv3d,
}

#[derive(Debug, Clone)]
pub struct Generator<T> {
    pub cfg: PgganConfig,
    pub schedule: GrowthSchedule,
    pub seed: u64,
    /// Spacing of final-stage outputs.
    pub spacing_mm: [f64; 3],
    pub fade: FadeState,
    blocks: Vec<GenBlock>,
    pub params: ParamStore<T>,
}

#[derive(Debug, Clone)]
struct CriticBlock {
    factor: [usize; 3],
    from_rgb: Conv3d,
    conv_a: Conv3d,
    conv_b: Conv3d,
}

#[derive(Debug, Clone)]
pub struct Critic<T> {
    pub cfg: PgganConfig,
    blocks: Vec<CriticBlock>,
    head: Conv3d,
    pub params: ParamStore<T>,
}

impl<T: Real> Generator<T> {
    pub fn stage(&self) -> usize {
        self.blocks.len() - 1
    }

    pub fn is_final(&self) -> bool {
        self.blocks.len() == self.schedule.num_stages()
    }

    /// Parameters added for stage `s`.
    pub fn stage_params(&self, s: usize) -> Vec<ParamId> {
        let b = &self.blocks[s];
        [&b.conv_a, &b.conv_b, &b.to_rgb].iter().flat_map(|c| c.params()).collect()
    }

    fn push_stage(&mut self, rng: &mut impl Rng) {
        let s = self.blocks.len();
        let cin = if s == 0 { self.cfg.latent_channels } else { self.cfg.channels[s - 1] };
        let c = self.cfg.channels[s];
        let gain = leaky_gain(self.cfg.leaky_slope);
        let p = &mut self.params;
        self.blocks.push(GenBlock {
            factor: self.schedule.factor(s),
            conv_a: conv3(p, &format!("g.block{s}.conv_a"), cin, c, gain, rng),
            conv_b: conv3(p, &format!("g.block{s}.conv_b"), c, c, gain, rng),
            to_rgb: conv1(p, &format!("g.to_rgb{s}"), c, 1, 1.0, rng),
        });
    }

    /// Output `[N, 1, D, H, W]` in `(0, 1)` at `fade.stage_index`.
    pub fn forward<'g>(&self, p: &Bound<'g, T>, z: Var<'g, T>, fade: FadeState) -> Result<Var<'g, T>> {
        let k = fade.stage_index;
        if k >= self.blocks.len() {
            return Err(Error::Invalid(format!(
                "stage {k} not built (generator is at stage {})",
                self.stage()
            )));
        }
        check_alpha(fade.alpha)?;
        let slope = self.cfg.leaky_slope;
        let mut h = z;
        let mut prev = None;
        for b in &self.blocks[..=k] {
            prev = Some(h);
            h = h.upsample(b.factor);
            h = b.conv_a.forward(p, h).leaky_relu(slope);
            h = b.conv_b.forward(p, h).leaky_relu(slope);
        }
        let top = &self.blocks[k];
        let new = top.to_rgb.forward(p, h).sigmoid();
        if k == 0 || fade.alpha >= 1.0 {
            return Ok(new);
        }
        let old = self.blocks[k - 1]
            .to_rgb
            .forward(p, prev.expect("k > 0"))
            .sigmoid()
            .upsample(top.factor);
        Ok(blend_vars(old, new, fade.alpha))
    }

    /// Spacing of outputs at stage `s`.
    pub fn stage_spacing(&self, s: usize) -> [f64; 3] {
        let (f, t) = (self.schedule.final_shape(), self.schedule.stages[s]);
        std::array::from_fn(|a| self.spacing_mm[a] * f[a] as f64 / t[a] as f64)
    }
}

impl<T: Real> Critic<T> {
    pub fn stage(&self) -> usize {
        self.blocks.len() - 1
    }

    pub fn stage_params(&self, s: usize) -> Vec<ParamId> {
        let b = &self.blocks[s];
        [&b.from_rgb, &b.conv_a, &b.conv_b].iter().flat_map(|c| c.params()).collect()
    }

    fn push_stage(&mut self, schedule: &GrowthSchedule, rng: &mut impl Rng) {
        let s = self.blocks.len();
        let c = self.cfg.channels[s];
        let cout = if s == 0 { c } else { self.cfg.channels[s - 1] };
        let gain = leaky_gain(self.cfg.leaky_slope);
        let p = &mut self.params;
        self.blocks.push(CriticBlock {
            factor: schedule.factor(s),
            from_rgb: conv1(p, &format!("d.from_rgb{s}"), 1, c, gain, rng),
            conv_a: conv3(p, &format!("d.block{s}.conv_a"), c, c, gain, rng),
            conv_b: conv3(p, &format!("d.block{s}.conv_b"), c, cout, gain, rng),
        });
    }

    /// Critic score `[N, 1, 1, 1, 1]` for volumes at `fade.stage_index`.
    pub fn forward<'g>(&self, p: &Bound<'g, T>, x: Var<'g, T>, fade: FadeState) -> Result<Var<'g, T>> {
        let k = fade.stage_index;
        if k >= self.blocks.len() {
            return Err(Error::Invalid(format!(
                "stage {k} not built (critic is at stage {})",
                self.stage()
            )));
        }
        check_alpha(fade.alpha)?;
        let slope = self.cfg.leaky_slope;
        let block = |b: &CriticBlock, h: Var<'g, T>| {
            let h = b.conv_a.forward(p, h).leaky_relu(slope);
            b.conv_b.forward(p, h).leaky_relu(slope).avg_pool3d(b.factor)
        };
        let top = &self.blocks[k];
        let mut h = block(top, top.from_rgb.forward(p, x).leaky_relu(slope));
        if k > 0 && fade.alpha < 1.0 {
            let skip = self.blocks[k - 1]
                .from_rgb
                .forward(p, x.avg_pool3d(top.factor))
                .leaky_relu(slope);
            h = blend_vars(skip, h, fade.alpha);
        }
        for b in self.blocks[..k].iter().rev() {
            h = block(b, h);
        }
        Ok(self.head.forward(p, h))
    }
}

/// Generator and critic at stage 0.
pub fn build_pggan<T: Real>(
    cfg: &PgganConfig,
    schedule: &GrowthSchedule,
    seed: u64,
    spacing_mm: [f64; 3],
) -> Result<(Generator<T>, Critic<T>)> {
    cfg.validate(schedule)?;
    let mut rng = derived_rng(seed, "pggan-init", 0);
    let mut g = Generator {
        cfg: cfg.clone(),
        schedule: schedule.clone(),
        seed,
        spacing_mm,
        fade: FadeState::settled(0),
        blocks: Vec::new(),
        params: ParamStore::new(),
    };
    g.push_stage(&mut rng);
    let mut params = ParamStore::new();
    let head = Conv3d::new(
        &mut params,
        "d.head",
        cfg.channels[0],
        1,
        ConvGeometry::cubic(2, 1, 0),
        true,
        1.0,
        &mut rng,
    );
    let mut d = Critic {
        cfg: cfg.clone(),
        blocks: Vec::new(),
        head,
        params,
    };
    d.push_stage(schedule, &mut rng);
    Ok((g, d))
}

/// Append the next stage to both networks; existing parameters are untouched
/// and the fade restarts at `alpha = 0`.
pub fn grow<T: Real>(g: &mut Generator<T>, d: &mut Critic<T>) -> Result<()> {
    if g.is_final() {
        return Err(Error::Invalid(format!(
            "cannot grow past the final stage {}",
            g.stage()
        )));
    }
    if d.stage() != g.stage() {
        return Err(Error::Invalid(format!(
            "generator at stage {} but critic at {}",
            g.stage(),
            d.stage()
        )));
    }
    let next = g.stage() + 1;
    let mut rng = derived_rng(g.seed, "pggan-grow", next as u64);
    g.push_stage(&mut rng);
    let schedule = g.schedule.clone();
    d.push_stage(&schedule, &mut rng);
    g.fade = FadeState {
        alpha: 0.0,
        stage_index: next,
    };
    Ok(())
}

fn tensor_to_volume<T: Real>(t: &Tensor<T>, b: usize, dims: [usize; 3], spacing: [f64; 3]) -> Result<CtVolume> {
    let s: usize = dims.iter().product();
    let data: Vec<f32> = t.data()[b * s..(b + 1) * s]
        .iter()
        .map(|v| v.to_f64().unwrap() as f32)
        .collect();
    let arr = Array3::from_shape_vec((dims[0], dims[1], dims[2]), data)
        .map_err(|e| Error::Shape(e.to_string()))?;
    CtVolume::new(arr, spacing, true)
}

/// Generator output for one noise volume.
pub fn generator_forward<T: Real>(g: &Generator<T>, z: &NoiseVolume, fade: FadeState) -> Result<CtVolume> {
    if z.latent_channels() != g.cfg.latent_channels {
        return Err(Error::Shape(format!(
            "noise has {} channels, generator expects {}",
            z.latent_channels(),
            g.cfg.latent_channels
        )));
    }
    let graph = Graph::new();
    let p = g.params.bind(&graph, false);
    let out = g.forward(&p, graph.constant(noise_batch(std::slice::from_ref(z))), fade)?;
    let k = fade.stage_index;
    tensor_to_volume(&out.value(), 0, g.schedule.stages[k], g.stage_spacing(k))
}

/// `n` volumes from a fully grown generator; volume `i` uses noise drawn from
/// a stream derived from `(seed, i)`.
pub fn synthesize<T: Real>(g: &Generator<T>, n: usize, seed: u64) -> Result<Vec<CtVolume>> {
    if !g.is_final() || g.fade.alpha < 1.0 {
        return Err(Error::Invalid(format!(
            "synthesis needs the final stage at alpha = 1 (stage {}, alpha {})",
            g.stage(),
            g.fade.alpha
        )));
    }
    (0..n)
        .map(|i| {
            let z = NoiseVolume::sample(g.cfg.latent_channels, &mut derived_rng(seed, "synth", i as u64));
            generator_forward(g, &z, g.fade)
        })
        .collect()
}

/// Write synthesized volumes as unlabeled case directories under `root` and
/// return their manifest entries.
pub fn write_synthetic(root: &Path, volumes: &[CtVolume], seed: u64, window: IntensityWindow) -> Result<Vec<CaseEntry>> {
    volumes
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let id = format!("synth_{i:03}");
            write_case(&root.join(&id), &id, v, None, window, Some(seed))?;
            Ok(CaseEntry {
                id: id.clone(),
                path: id,
                seed: Some(seed),
                role: CaseRole::UnlabeledSynthetic,
                split: Split::Train,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PgganLogRow {
    pub iteration: u64,
    pub stage: usize,
    pub alpha: f64,
    pub d_loss: f64,
    pub g_loss: f64,
    /// `E[D(real)] − E[D(fake)]`.
    pub wasserstein: f64,
    pub gradient_penalty: f64,
}

#[derive(Debug, Clone)]
pub struct PgganRun {
    pub generator: Generator<f32>,
    pub critic: Critic<f32>,
    pub log: Vec<PgganLogRow>,
    /// Stage checkpoint directories in order, then `final`.
    pub checkpoints: Vec<PathBuf>,
}

/// Real volume at every stage: `exact[s]` is the trilinear-average
/// downsampling, `coarse[s]` the previous stage upsampled back to stage `s`.
struct RealPyramid<T> {
    exact: Vec<Tensor<T>>,
    coarse: Vec<Tensor<T>>,
}

fn build_pyramid<T: Real>(v: &CtVolume, schedule: &GrowthSchedule) -> RealPyramid<T> {
    let [d, h, w] = v.dims();
    let full = Tensor::new(
        vec![1, 1, d, h, w],
        v.as_slice().iter().map(|&x| T::lit(x as f64)).collect(),
    )
    .expect("volume shape");
    let last = schedule.final_shape();
    let mut exact = Vec::new();
    let mut coarse = Vec::new();
    for (s, &shape) in schedule.stages.iter().enumerate() {
        let f = std::array::from_fn(|a| last[a] / shape[a]);
        let e = avg_pool3d_forward(&full, f);
        let c = if s == 0 {
            e.clone()
        } else {
            resize_linear(&avg_pool3d_forward(&e, schedule.factor(s)), shape)
        };
        exact.push(e);
        coarse.push(c);
    }
    RealPyramid { exact, coarse }
}

fn real_batch<T: Real>(pyr: &[RealPyramid<T>], idx: &[usize], fade: FadeState) -> Tensor<T> {
    let s = fade.stage_index;
    let a = T::lit(fade.alpha);
    let items: Vec<Tensor<T>> = idx
        .iter()
        .map(|&i| {
            let p = &pyr[i];
            let t = p.exact[s].zip_map(&p.coarse[s], |e, c| a * e + (T::one() - a) * c);
            let shape = t.shape()[1..].to_vec();
            t.reshape(&shape).expect("drop batch axis")
        })
        .collect();
    Tensor::stack(&items).expect("equal shapes")
}

/// Loss terms of one critic update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticStepStats {
    pub loss: f64,
    pub wasserstein: f64,
    pub gradient_penalty: f64,
}

/// Critic loss `E[D(fake)] − E[D(real)] + drift·E[D(real)²] + λ·E[(‖∇D(x̂)‖ − 1)²]`
/// and its parameter gradients. `mix[n]` interpolates real (1) and fake (0)
/// for the penalty point.
pub fn critic_gradients<T: Real>(
    d: &Critic<T>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    mix: &[f64],
    fade: FadeState,
) -> Result<(CriticStepStats, Vec<Tensor<T>>)> {
    let cfg = &d.cfg;
    let n = real.shape()[0];
    let graph = Graph::new();
    let p = d.params.bind(&graph, true);
    let sr = d.forward(&p, graph.constant(real.clone()), fade)?;
    let sf = d.forward(&p, graph.constant(fake.clone()), fade)?;
    let w = sr.mean().sub(sf.mean());
    let loss = sf.mean().sub(sr.mean()).add(sr.mul(sr).mean().scale(cfg.drift));
    let mut grads = p.grads(&graph.backward(loss));
    let main = loss.item().to_f64().unwrap();
    let wasserstein = w.item().to_f64().unwrap();

    let per = real.numel() / n;
    let xhat = Tensor::from_fn(real.shape(), |i| {
        let m = T::lit(mix[i / per]);
        m * real.data()[i] + (T::one() - m) * fake.data()[i]
    });
    let g0 = Graph::new();
    let p0 = d.params.bind(&g0, false);
    let xv = g0.leaf(xhat.clone());
    let score = d.forward(&p0, xv, fade)?;
    let gx = g0.backward(score.sum()).get_or_zeros(xv);

    let mut penalty = 0.0;
    let mut coef = vec![0.0; n];
    let mut dir = Tensor::zeros(real.shape());
    for b in 0..n {
        let gb = &gx.data()[b * per..(b + 1) * per];
        let norm = gb.iter().map(|v| v.to_f64().unwrap().powi(2)).sum::<f64>().sqrt();
        penalty += (norm - 1.0).powi(2) / n as f64;
        coef[b] = 2.0 * (norm - 1.0) / n as f64;
        if norm > 0.0 {
            let inv = T::lit(1.0 / norm);
            for (o, &g) in dir.data_mut()[b * per..(b + 1) * per].iter_mut().zip(gb) {
                *o = g * inv;
            }
        }
    }
    if cfg.gp_lambda > 0.0 {
        let h = cfg.gp_step;
        for sign in [1.0, -1.0] {
            let gs = Graph::new();
            let ps = d.params.bind(&gs, true);
            let shifted = xhat.zip_map(&dir, |x, u| x + T::lit(sign * h) * u);
            let out = d.forward(&ps, gs.constant(shifted), fade)?;
            let seed = Tensor::from_fn(out.shape().as_slice(), |b| T::lit(sign * cfg.gp_lambda * coef[b] / (2.0 * h)));
            for (acc, g) in grads.iter_mut().zip(ps.grads(&gs.backward_with_seed(out, seed))) {
                acc.add_assign(&g);
            }
        }
    }
    let gradient_penalty = cfg.gp_lambda * penalty;
    Ok((
        CriticStepStats {
            loss: main + gradient_penalty,
            wasserstein,
            gradient_penalty,
        },
        grads,
    ))
}

fn adam_for<T: Real>(params: &ParamStore<T>, cfg: &PgganConfig) -> Adam<T> {
    Adam::new(
        params,
        AdamConfig {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: 1e-8,
        },
    )
}

fn sample_noise<T: Real>(g: &Generator<T>, n: usize, rng: &mut impl Rng) -> Tensor<T> {
    let zs: Vec<NoiseVolume> = (0..n).map(|_| NoiseVolume::sample(g.cfg.latent_channels, rng)).collect();
    noise_batch(&zs)
}

fn finite_or_diverged(values: &[f64], iteration: u64, last: &Option<PathBuf>) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Diverged {
            iteration: iteration as usize,
            last_checkpoint: last.clone(),
        })
    }
}

/// Train from scratch through every stage of `schedule`.
///
/// With `out`, each finished stage is checkpointed to `out/stage<s>`, the
/// final generator to `out/final`, and the per-iteration log to
/// `out/log.csv`.
pub fn train_pggan(
    dataset: &[CtVolume],
    schedule: &GrowthSchedule,
    cfg: &PgganConfig,
    seed: u64,
    out: Option<&Path>,
) -> Result<PgganRun> {
    if dataset.is_empty() {
        return Err(Error::Invalid("PGGAN training needs at least one volume".into()));
    }
    cfg.validate(schedule)?;
    let last_shape = schedule.final_shape();
    for (i, v) in dataset.iter().enumerate() {
        if v.dims() != last_shape || !v.is_normalized() {
            return Err(Error::Invalid(format!(
                "volume {i}: expected a normalized {last_shape:?} volume, got {:?}",
                v.dims()
            )));
        }
    }
    let spacing = dataset.first().map_or(CLINICAL_SPACING_MM, |v| v.spacing_mm());
    let (mut g, mut d) = build_pggan::<f32>(cfg, schedule, seed, spacing)?;
    let pyramid: Vec<RealPyramid<f32>> = dataset.iter().map(|v| build_pyramid(v, schedule)).collect();
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    let mut last_ckpt = None;
    let mut iteration = 0u64;
    let bsz = cfg.batch_size;
    for s in 0..schedule.num_stages() {
        if s > 0 {
            grow(&mut g, &mut d)?;
        }
        log::info!("pggan stage {s}: {:?}", schedule.stages[s]);
        // Fresh optimizer state for every stage.
        let mut opt_g = adam_for(&g.params, cfg);
        let mut opt_d = adam_for(&d.params, cfg);
        for t in 0..schedule.iterations_per_stage {
            let fade = FadeState {
                alpha: schedule.alpha(s, t),
                stage_index: s,
            };
            g.fade = fade;
            let mut rng = derived_rng(seed, "pggan-iter", iteration);
            let idx: Vec<usize> = (0..bsz).map(|_| rng.random_range(0..dataset.len())).collect();
            let real = real_batch(&pyramid, &idx, fade);
            let mix: Vec<f64> = (0..bsz).map(|_| rng.random::<f64>()).collect();

            let fake = {
                let graph = Graph::new();
                let p = g.params.bind(&graph, false);
                let z = graph.constant(sample_noise(&g, bsz, &mut rng));
                Rc::unwrap_or_clone(g.forward(&p, z, fade)?.value())
            };
            let (stats, d_grads) = critic_gradients(&d, &real, &fake, &mix, fade)?;
            finite_or_diverged(&[stats.loss], iteration, &last_ckpt)?;
            opt_d.update(&mut d.params, &d_grads, cfg.lr);

            let g_loss = {
                let graph = Graph::new();
                let pg = g.params.bind(&graph, true);
                let pd = d.params.bind(&graph, false);
                let z = graph.constant(sample_noise(&g, bsz, &mut rng));
                let score = d.forward(&pd, g.forward(&pg, z, fade)?, fade)?;
                let loss = score.mean().scale(-1.0);
                let grads = pg.grads(&graph.backward(loss));
                let v = loss.item() as f64;
                finite_or_diverged(&[v], iteration, &last_ckpt)?;
                opt_g.update(&mut g.params, &grads, cfg.lr);
                v
            };
            log.push(PgganLogRow {
                iteration,
                stage: s,
                alpha: fade.alpha,
                d_loss: stats.loss,
                g_loss,
                wasserstein: stats.wasserstein,
                gradient_penalty: stats.gradient_penalty,
            });
            iteration += 1;
        }
        g.fade = FadeState {
            alpha: schedule.alpha(s, schedule.iterations_per_stage),
            stage_index: s,
        };
        if let Some(dir) = out {
            let path = dir.join(format!("stage{s}"));
            save_pggan(&path, &g, &d, iteration)?;
            last_ckpt = Some(path.clone());
            checkpoints.push(path);
        }
    }
    if let Some(dir) = out {
        let path = dir.join("final");
        save_pggan(&path, &g, &d, iteration)?;
        checkpoints.push(path);
        write_pggan_log(&dir.join("log.csv"), &log)?;
    }
    Ok(PgganRun {
        generator: g,
        critic: d,
        log,
        checkpoints,
    })
}

pub fn write_pggan_log(path: &Path, rows: &[PgganLogRow]) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PgganCheckpointConfig {
    pggan: PgganConfig,
    schedule: GrowthSchedule,
    spacing_mm: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PgganCheckpointState {
    stage_index: usize,
    stage_shape: [usize; 3],
    alpha: f64,
}

pub fn save_pggan(dir: &Path, g: &Generator<f32>, d: &Critic<f32>, iteration: u64) -> Result<()> {
    let config = PgganCheckpointConfig {
        pggan: g.cfg.clone(),
        schedule: g.schedule.clone(),
        spacing_mm: g.spacing_mm,
    };
    let state = PgganCheckpointState {
        stage_index: g.stage(),
        stage_shape: g.schedule.stages[g.stage()],
        alpha: g.fade.alpha,
    };
    write_checkpoint(
        dir,
        "pggan",
        iteration,
        g.seed,
        serde_json::to_value(config)?,
        serde_json::to_value(state)?,
        &[("generator", &g.params), ("critic", &d.params)],
    )?;
    Ok(())
}

/// Rebuild generator and critic from a checkpoint directory.
pub fn load_pggan(dir: &Path) -> Result<(Generator<f32>, Critic<f32>)> {
    let (manifest, mut stores) = read_checkpoint(dir)?;
    if manifest.kind != "pggan" {
        return Err(Error::Format(format!(
            "{}: expected a pggan checkpoint, found `{}`",
            dir.display(),
            manifest.kind
        )));
    }
    let config: PgganCheckpointConfig = serde_json::from_value(manifest.config)?;
    let state: PgganCheckpointState = serde_json::from_value(manifest.state)?;
    let (mut g, mut d) = build_pggan::<f32>(&config.pggan, &config.schedule, manifest.seed, config.spacing_mm)?;
    while g.stage() < state.stage_index {
        grow(&mut g, &mut d)?;
    }
    g.params.load_from(&take_store(&mut stores, "generator")?)?;
    d.params.load_from(&take_store(&mut stores, "critic")?)?;
    g.fade = FadeState {
        alpha: state.alpha,
        stage_index: state.stage_index,
    };
    Ok((g, d))
}
