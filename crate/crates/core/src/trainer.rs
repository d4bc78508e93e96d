//! Training orchestration: pretraining, the labeled and unlabeled update
//! steps, seeded interleaving of the two branches, validation, checkpoints
//! and whole-volume inference.
//!
//! One iteration is one S-net optimizer step. A labeled iteration also
//! performs one D-net step; unlabeled iterations never touch the D-net
//! because its loss needs ground truth.

use std::fs::File;
use std::path::{Path, PathBuf};

use ndarray::Array4;
use rand::Rng;
use semiseg_nn::optim::{Adam, AdamConfig};
use semiseg_nn::{Graph, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_checkpoint, take_store, write_checkpoint, CHECKPOINT_MANIFEST};
use crate::disc::{build_discnet, make_disc_input, DiscConfig, DiscInputMode, DiscNet};
use crate::error::{Error, Result};
use crate::io_util::{create_dir, read_json, write_json};
use crate::losses::{
    adversarial_loss, argmax_channels, d_loss, semi_loss, total_s_loss, weighted_mce,
    AdaptiveWeightTracker, Branch, LossWeights,
};
use crate::metrics::{evaluate_case, MetricReport};
use crate::seeds::{derive_seed, derived_rng};
use crate::segnet::{build_segnet, SegNet, SegNetConfig};
use crate::voldata::{
    crop_with_rng, read_case, read_manifest, split_for_inference, stack_predictions, CtVolume,
    LabelMap, OneHotMap,
};

/// The four model variants compared in the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    ResUnet,
    ResUnetAux,
    ResUnetAuxAdv,
    ResUnetAuxAdvSemi,
}

impl Variant {
    pub fn aux_heads(self) -> bool {
        self != Variant::ResUnet
    }

    pub fn adversarial(self) -> bool {
        matches!(self, Variant::ResUnetAuxAdv | Variant::ResUnetAuxAdvSemi)
    }

    pub fn semi_supervised(self) -> bool {
        self == Variant::ResUnetAuxAdvSemi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub variant: Variant,
    pub labeled_cases: Vec<String>,
    #[serde(default)]
    pub unlabeled_cases: Vec<String>,
    /// Cases scored during training for best-checkpoint selection.
    #[serde(default)]
    pub validation_cases: Vec<String>,
    /// Cases scored once with the selected checkpoint for the final report.
    #[serde(default)]
    pub test_cases: Vec<String>,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |message: String| Error::Config {
            path: "experiment".into(),
            message,
        };
        if self.labeled_cases.is_empty() {
            return Err(bad("at least one labeled case is required".into()));
        }
        match (self.variant.semi_supervised(), self.unlabeled_cases.is_empty()) {
            (true, true) => Err(bad("the semi-supervised variant needs unlabeled cases".into())),
            (false, false) => Err(bad(format!(
                "variant {:?} trains on labeled cases only",
                self.variant
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_s_lr")]
    pub s_lr: f64,
    #[serde(default = "default_d_lr")]
    pub d_lr: f64,
    #[serde(default = "default_power")]
    pub poly_power: f64,
    #[serde(default = "default_max")]
    pub max_iterations: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_pretrain")]
    pub pretrain_iterations: u64,
    #[serde(default)]
    pub loss_weights: LossWeights,
    #[serde(default)]
    pub seed: u64,
    pub experiment: ExperimentSpec,
    /// Dataset root holding `manifest.json`; relative paths resolve against
    /// the config file.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default = "SegNetConfig::desk")]
    pub segnet: SegNetConfig,
    #[serde(default)]
    pub disc: DiscConfig,
    /// Validation and checkpoint cadence; `max_iterations / 20` when absent.
    #[serde(default)]
    pub validate_every: Option<u64>,
}

fn default_s_lr() -> f64 {
    5e-4
}
fn default_d_lr() -> f64 {
    1e-4
}
fn default_power() -> f64 {
    0.9
}
fn default_max() -> u64 {
    2000
}
fn default_batch() -> usize {
    2
}
fn default_pretrain() -> u64 {
    200
}

impl TrainConfig {
    /// Desk-scale defaults around an experiment.
    pub fn desk(experiment: ExperimentSpec, seed: u64) -> Self {
        Self {
            s_lr: default_s_lr(),
            d_lr: default_d_lr(),
            poly_power: default_power(),
            max_iterations: default_max(),
            batch_size: default_batch(),
            pretrain_iterations: default_pretrain(),
            loss_weights: LossWeights::default(),
            seed,
            experiment,
            dataset: None,
            segnet: SegNetConfig::desk(),
            disc: DiscConfig::default(),
            validate_every: None,
        }
    }

    pub fn validate_cadence(&self) -> u64 {
        self.validate_every.unwrap_or(self.max_iterations / 20).max(1)
    }

    /// S-net configuration with the variant's head setting applied.
    pub fn effective_segnet(&self) -> SegNetConfig {
        SegNetConfig {
            aux_heads: self.experiment.variant.aux_heads(),
            ..self.segnet.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, message: String| Error::Config {
            path: path.into(),
            message,
        };
        for (path, v) in [("s_lr", self.s_lr), ("d_lr", self.d_lr)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(bad(path, format!("learning rate {v} must be positive")));
            }
        }
        if !(self.poly_power.is_finite() && self.poly_power >= 0.0) {
            return Err(bad("poly_power", format!("{} must be non-negative", self.poly_power)));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size", "must be >= 1".into()));
        }
        if self.pretrain_iterations > self.max_iterations {
            return Err(bad(
                "pretrain_iterations",
                format!(
                    "{} exceeds max_iterations {}",
                    self.pretrain_iterations, self.max_iterations
                ),
            ));
        }
        if self.validate_every == Some(0) {
            return Err(bad("validate_every", "must be >= 1".into()));
        }
        self.loss_weights.validate()?;
        self.experiment.validate()?;
        self.effective_segnet().validate()?;
        if self.experiment.variant.adversarial() {
            self.disc.validate()?;
            self.disc.check_dims(self.segnet.input_dims())?;
            if self.disc.num_classes != self.segnet.num_classes {
                return Err(bad(
                    "disc.num_classes",
                    format!(
                        "{} does not match segnet.num_classes {}",
                        self.disc.num_classes, self.segnet.num_classes
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// `base · (1 − iteration/max)^power`, zero from `max` on.
pub fn poly_lr(base_lr: f64, iteration: u64, max_iterations: u64, power: f64) -> f64 {
    if iteration >= max_iterations {
        return 0.0;
    }
    base_lr * (1.0 - iteration as f64 / max_iterations as f64).powf(power)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub iteration: u64,
    pub branch: Branch,
    pub lr_s: f64,
    pub lr_d: Option<f64>,
    pub l_vox: Option<f64>,
    pub l_adv: Option<f64>,
    pub l_semi: Option<f64>,
    pub l_d: Option<f64>,
    pub trusted_frac: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCase {
    pub id: String,
    pub volume: CtVolume,
    pub labels: LabelMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledCase {
    pub id: String,
    pub volume: CtVolume,
}

/// Volumes an experiment needs, resolved from case IDs.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub labeled: Vec<LabeledCase>,
    pub unlabeled: Vec<UnlabeledCase>,
    pub validation: Vec<LabeledCase>,
    pub test: Vec<LabeledCase>,
}

impl Dataset {
    /// Read the cases named in `spec` from a dataset root. Labels stored for
    /// unlabeled cases are ignored.
    pub fn load(root: &Path, spec: &ExperimentSpec) -> Result<Self> {
        let manifest = read_manifest(root)?;
        let read = |id: &str| -> Result<(CtVolume, Option<LabelMap>)> {
            let entry = manifest.find(id).ok_or_else(|| Error::Config {
                path: "experiment".into(),
                message: format!("case `{id}` is not in {}", root.display()),
            })?;
            let (_, vol, labels) = read_case(&root.join(&entry.path))?;
            if !vol.is_normalized() {
                return Err(Error::Invalid(format!("case `{id}` is not intensity-normalized")));
            }
            Ok((vol, labels))
        };
        let labeled = |ids: &[String]| -> Result<Vec<LabeledCase>> {
            ids.iter()
                .map(|id| {
                    let (volume, labels) = read(id)?;
                    let labels = labels.ok_or_else(|| {
                        Error::Invalid(format!("case `{id}` has no labels"))
                    })?;
                    Ok(LabeledCase {
                        id: id.clone(),
                        volume,
                        labels,
                    })
                })
                .collect()
        };
        Ok(Self {
            labeled: labeled(&spec.labeled_cases)?,
            unlabeled: spec
                .unlabeled_cases
                .iter()
                .map(|id| {
                    Ok(UnlabeledCase {
                        id: id.clone(),
                        volume: read(id)?.0,
                    })
                })
                .collect::<Result<_>>()?,
            validation: labeled(&spec.validation_cases)?,
            test: labeled(&spec.test_cases)?,
        })
    }
}

/// Per-voxel argmax label map of whole volume `vol`, predicted slab by slab.
pub fn infer_case(s: &SegNet<f32>, vol: &CtVolume, depth: usize) -> Result<LabelMap> {
    let [_, h, w] = vol.dims();
    let mut chunks = Vec::new();
    for slab in split_for_inference(vol, depth)? {
        let x = Tensor::new(vec![1, 1, depth, h, w], slab.as_slice().to_vec())?;
        let p = s.predict(&x)?;
        let c = p.shape()[1];
        let arr = Array4::from_shape_vec((c, depth, h, w), p.into_data())
            .map_err(|e| Error::Shape(e.to_string()))?;
        chunks.push(OneHotMap::new(arr)?);
    }
    Ok(stack_predictions(&chunks)?.argmax())
}

/// Score `cases` with `s`, spreading cases over the available cores. Case
/// order in the report follows `cases`.
pub fn evaluate_cases(s: &SegNet<f32>, cases: &[LabeledCase]) -> Result<MetricReport> {
    let depth = s.cfg.in_depth;
    let score = |c: &LabeledCase| {
        let pred = infer_case(s, &c.volume, depth)?;
        evaluate_case(&c.id, &c.labels, &pred, c.volume.spacing_mm())
    };
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(cases.len());
    let scored = if workers <= 1 {
        cases.iter().map(score).collect::<Result<Vec<_>>>()?
    } else {
        let chunk = cases.len().div_ceil(workers);
        std::thread::scope(|scope| {
            let handles: Vec<_> = cases
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(score).collect::<Result<Vec<_>>>()))
                .collect();
            let mut all = Vec::with_capacity(cases.len());
            for h in handles {
                all.extend(h.join().expect("evaluation worker panicked")?);
            }
            Ok::<_, Error>(all)
        })?
    };
    Ok(MetricReport::from_cases(scored))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub iteration: u64,
    pub mean_dsc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainState {
    iteration: u64,
    adam_s_step: u64,
    adam_d_step: Option<u64>,
    tracker: AdaptiveWeightTracker,
    best: Option<ValidationRecord>,
    validation: Vec<ValidationRecord>,
}

fn adam_cfg() -> AdamConfig {
    AdamConfig::default()
}

/// A batch drawn from one branch, flattened for the losses.
pub struct Batch {
    /// `[B, 1, D, H, W]`.
    pub x: Tensor<f32>,
    /// Ground truth per voxel, `(b, d, h, w)` order; labeled batches only.
    pub labels: Option<Vec<usize>>,
}

impl Batch {
    pub fn from_cases(vols: &[&CtVolume], labels: Option<&[&LabelMap]>) -> Result<Self> {
        let first = vols
            .first()
            .ok_or_else(|| Error::Invalid("empty batch".into()))?;
        let [d, h, w] = first.dims();
        let mut data = Vec::with_capacity(vols.len() * d * h * w);
        for v in vols {
            if v.dims() != [d, h, w] {
                return Err(Error::Shape(format!("batch mixes {:?} and {:?}", v.dims(), [d, h, w])));
            }
            data.extend_from_slice(v.as_slice());
        }
        let x = Tensor::new(vec![vols.len(), 1, d, h, w], data)?;
        let labels = labels.map(|ls| {
            ls.iter()
                .flat_map(|l| l.as_slice().iter().map(|&c| c as usize))
                .collect()
        });
        Ok(Self { x, labels })
    }
}

fn one_hot_tensor(labels: &[usize], shape: &[usize]) -> Tensor<f32> {
    let [n, c, d, h, w] = [shape[0], shape[1], shape[2], shape[3], shape[4]];
    let s = d * h * w;
    let mut t = Tensor::zeros(&[n, c, d, h, w]);
    let o = t.data_mut();
    for b in 0..n {
        for v in 0..s {
            o[(b * c + labels[b * s + v]) * s + v] = 1.0;
        }
    }
    t
}

fn labels_of(batch: &Batch) -> Result<&[usize]> {
    batch
        .labels
        .as_deref()
        .ok_or_else(|| Error::Invalid("labeled step needs ground truth".into()))
}

/// Outcome of a labeled S-update.
pub struct SUpdate {
    /// Fused prediction before the update, `[B, C, D, H, W]`.
    pub prediction: Tensor<f32>,
    pub l_vox: f64,
    pub l_adv: Option<f64>,
}

fn scalar(v: &semiseg_nn::Var<'_, f32>) -> f64 {
    v.item() as f64
}

/// All mutable training state of one run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub s: SegNet<f32>,
    pub d: Option<DiscNet<f32>>,
    opt_s: Adam<f32>,
    opt_d: Option<Adam<f32>>,
    pub tracker: AdaptiveWeightTracker,
    /// Index of the next iteration.
    pub iteration: u64,
    pub best: Option<ValidationRecord>,
    pub validation: Vec<ValidationRecord>,
    last_checkpoint: Option<PathBuf>,
}

impl Trainer {
    /// Fresh networks initialized from streams derived from `cfg.seed`.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let s = build_segnet::<f32>(&cfg.effective_segnet(), derive_seed(cfg.seed, "snet-init", 0))?;
        let d = if cfg.experiment.variant.adversarial() {
            Some(build_discnet::<f32>(&cfg.disc, derive_seed(cfg.seed, "dnet-init", 0))?)
        } else {
            None
        };
        let opt_s = Adam::new(&s.params, adam_cfg());
        let opt_d = d.as_ref().map(|d| Adam::new(&d.params, adam_cfg()));
        let tracker = AdaptiveWeightTracker::new(cfg.segnet.num_classes);
        Ok(Self {
            cfg,
            s,
            d,
            opt_s,
            opt_d,
            tracker,
            iteration: 0,
            best: None,
            validation: Vec::new(),
            last_checkpoint: None,
        })
    }

    pub fn in_pretraining(&self) -> bool {
        self.iteration < self.cfg.pretrain_iterations
    }

    fn lrs(&self) -> (f64, f64) {
        let c = &self.cfg;
        (
            poly_lr(c.s_lr, self.iteration, c.max_iterations, c.poly_power),
            poly_lr(c.d_lr, self.iteration, c.max_iterations, c.poly_power),
        )
    }

    fn diverged(&self) -> Error {
        Error::Diverged {
            iteration: self.iteration as usize,
            last_checkpoint: self.last_checkpoint.clone(),
        }
    }

    fn check(&self, values: &[f64]) -> Result<()> {
        if values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(self.diverged())
        }
    }

    /// S-update on voxel and adversarial losses with D frozen. Returns the
    /// pre-update prediction for the D-update.
    pub fn labeled_s_update(&mut self, batch: &Batch) -> Result<SUpdate> {
        let gt = labels_of(batch)?;
        let (lr_s, _) = self.lrs();
        let lw = self.cfg.loss_weights;
        let graph = Graph::new();
        let ps = self.s.params.bind(&graph, true);
        let x = graph.constant(batch.x.clone());
        let pred = self.s.forward(&ps, x)?.fused;
        let pred_t = pred.value();
        let weights = self.tracker.update(gt, &argmax_channels(&pred_t))?;
        let l_vox = weighted_mce(pred, gt, &weights)?;
        let l_adv = match &self.d {
            Some(d) => {
                let pd = d.params.bind(&graph, false);
                let conf = d.forward(&pd, make_disc_input(x, pred, DiscInputMode::StraightThrough)?)?;
                Some(adversarial_loss(conf))
            }
            None => None,
        };
        let total = total_s_loss(Some(l_vox), l_adv, None, &lw, Branch::Labeled)?;
        self.check(&[scalar(&total)])?;
        let grads = ps.grads(&graph.backward(total));
        self.opt_s.update(&mut self.s.params, &grads, lr_s);
        Ok(SUpdate {
            prediction: (*pred_t).clone(),
            l_vox: scalar(&l_vox),
            l_adv: l_adv.as_ref().map(scalar),
        })
    }

    /// D-update with S detached: real input is the one-hot ground truth,
    /// fake input the hard one-hot of `prediction`. `None` without a D-net.
    pub fn d_update(&mut self, batch: &Batch, prediction: &Tensor<f32>) -> Result<Option<f64>> {
        let gt = labels_of(batch)?;
        let (_, lr_d) = self.lrs();
        let (Some(d), Some(opt_d)) = (&mut self.d, &mut self.opt_d) else {
            return Ok(None);
        };
        let graph = Graph::new();
        let pd = d.params.bind(&graph, true);
        let x = graph.constant(batch.x.clone());
        let real = graph.constant(one_hot_tensor(gt, prediction.shape()));
        let fake = graph.constant(prediction.clone());
        let conf_real = d.forward(&pd, make_disc_input(x, real, DiscInputMode::Soft)?)?;
        let conf_fake = d.forward(&pd, make_disc_input(x, fake, DiscInputMode::Hard)?)?;
        let loss = d_loss(conf_real, conf_fake);
        let v = scalar(&loss);
        if !v.is_finite() {
            return Err(self.diverged());
        }
        let grads = pd.grads(&graph.backward(loss));
        opt_d.update(&mut d.params, &grads, lr_d);
        Ok(Some(v))
    }

    /// One labeled iteration: S-update, then D-update.
    pub fn train_step_labeled(&mut self, batch: &Batch) -> Result<TrainLogRow> {
        let (lr_s, lr_d) = self.lrs();
        let s = self.labeled_s_update(batch)?;
        let l_d = self.d_update(batch, &s.prediction)?;
        let row = TrainLogRow {
            iteration: self.iteration,
            branch: Branch::Labeled,
            lr_s,
            lr_d: self.d.as_ref().map(|_| lr_d),
            l_vox: Some(s.l_vox),
            l_adv: s.l_adv,
            l_semi: None,
            l_d,
            trusted_frac: None,
        };
        self.iteration += 1;
        Ok(row)
    }

    /// S-update on the adversarial and self-taught losses. The D-net is
    /// neither updated nor differentiated into.
    pub fn train_step_unlabeled(&mut self, batch: &Batch) -> Result<TrainLogRow> {
        if self.in_pretraining() {
            return Err(Error::Invalid(format!(
                "unlabeled step at iteration {} is inside pretraining ({} iterations)",
                self.iteration, self.cfg.pretrain_iterations
            )));
        }
        let d = self.d.as_ref().filter(|_| self.cfg.experiment.variant.semi_supervised()).ok_or_else(|| {
            Error::Invalid(format!(
                "variant {:?} has no unlabeled branch",
                self.cfg.experiment.variant
            ))
        })?;
        let (lr_s, _) = self.lrs();
        let lw = self.cfg.loss_weights;
        let graph = Graph::new();
        let ps = self.s.params.bind(&graph, true);
        let pd = d.params.bind(&graph, false);
        let x = graph.constant(batch.x.clone());
        let pred = self.s.forward(&ps, x)?.fused;
        let conf = d.forward(&pd, make_disc_input(x, pred, DiscInputMode::StraightThrough)?)?;
        let l_adv = adversarial_loss(conf);
        let (l_semi, mask) = semi_loss(pred, &conf.value(), &lw)?;
        let total = total_s_loss(None, Some(l_adv), Some(l_semi), &lw, Branch::Unlabeled)?;
        let (v_adv, v_semi) = (scalar(&l_adv), scalar(&l_semi));
        self.check(&[scalar(&total)])?;
        // A zero objective leaves the parameters exactly where they are.
        if lw.lambda_adv_unlabeled != 0.0 || lw.lambda_semi != 0.0 {
            let grads = ps.grads(&graph.backward(total));
            self.opt_s.update(&mut self.s.params, &grads, lr_s);
        }
        let row = TrainLogRow {
            iteration: self.iteration,
            branch: Branch::Unlabeled,
            lr_s,
            lr_d: None,
            l_vox: None,
            l_adv: Some(v_adv),
            l_semi: Some(v_semi),
            l_d: None,
            trusted_frac: Some(mask.trusted_fraction()),
        };
        self.iteration += 1;
        Ok(row)
    }

    /// Branch and batch for the current iteration. Past pretraining the
    /// unlabeled branch is chosen with probability `|U| / (|L| + |U|)`.
    pub fn draw_batch(&self, data: &Dataset) -> Result<(Branch, Batch)> {
        let mut rng = derived_rng(self.cfg.seed, "train-iter", self.iteration);
        let (nl, nu) = (data.labeled.len(), data.unlabeled.len());
        if nl == 0 {
            return Err(Error::Invalid("no labeled cases".into()));
        }
        let coin: f64 = rng.random();
        let unlabeled = !self.in_pretraining()
            && self.cfg.experiment.variant.semi_supervised()
            && nu > 0
            && coin < nu as f64 / (nl + nu) as f64;
        let depth = self.cfg.segnet.in_depth;
        let bsz = self.cfg.batch_size;
        if unlabeled {
            let mut vols = Vec::with_capacity(bsz);
            for _ in 0..bsz {
                let c = &data.unlabeled[rng.random_range(0..nu)];
                vols.push(crop_with_rng(&c.volume, None, depth, &mut rng)?.0);
            }
            let refs: Vec<&CtVolume> = vols.iter().collect();
            Ok((Branch::Unlabeled, Batch::from_cases(&refs, None)?))
        } else {
            let mut vols = Vec::with_capacity(bsz);
            let mut labs = Vec::with_capacity(bsz);
            for _ in 0..bsz {
                let c = &data.labeled[rng.random_range(0..nl)];
                let (v, l) = crop_with_rng(&c.volume, Some(&c.labels), depth, &mut rng)?;
                vols.push(v);
                labs.push(l.expect("labels cropped alongside"));
            }
            let refs: Vec<&CtVolume> = vols.iter().collect();
            let lrefs: Vec<&LabelMap> = labs.iter().collect();
            Ok((Branch::Labeled, Batch::from_cases(&refs, Some(&lrefs))?))
        }
    }

    /// Draw and run one iteration.
    pub fn step(&mut self, data: &Dataset) -> Result<TrainLogRow> {
        let (branch, batch) = self.draw_batch(data)?;
        match branch {
            Branch::Labeled => self.train_step_labeled(&batch),
            Branch::Unlabeled => self.train_step_unlabeled(&batch),
        }
    }

    /// Labeled-only steps until pretraining is over.
    pub fn pretrain(&mut self, data: &Dataset) -> Result<Vec<TrainLogRow>> {
        if data.labeled.is_empty() {
            return Err(Error::Invalid("pretraining needs labeled cases".into()));
        }
        let mut rows = Vec::new();
        while self.in_pretraining() {
            rows.push(self.step(data)?);
        }
        Ok(rows)
    }

    fn validate_now(&mut self, data: &Dataset) -> Result<Option<ValidationRecord>> {
        if data.validation.is_empty() {
            return Ok(None);
        }
        let report = evaluate_cases(&self.s, &data.validation)?;
        let rec = ValidationRecord {
            iteration: self.iteration,
            mean_dsc: report.mean_dsc(),
        };
        self.validation.push(rec);
        Ok(Some(rec))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let state = TrainState {
            iteration: self.iteration,
            adam_s_step: self.opt_s.step,
            adam_d_step: self.opt_d.as_ref().map(|o| o.step),
            tracker: self.tracker.clone(),
            best: self.best,
            validation: self.validation.clone(),
        };
        let adam_s = self.opt_s.state_store(&self.s.params);
        let mut stores: Vec<(&str, &ParamStore<f32>)> = vec![("snet", &self.s.params), ("snet_adam", &adam_s)];
        let adam_d = match (&self.d, &self.opt_d) {
            (Some(d), Some(o)) => Some((d, o.state_store(&d.params))),
            _ => None,
        };
        if let Some((d, a)) = &adam_d {
            stores.push(("dnet", &d.params));
            stores.push(("dnet_adam", a));
        }
        write_checkpoint(
            dir,
            "segmentation",
            self.iteration,
            self.cfg.seed,
            serde_json::to_value(&self.cfg)?,
            serde_json::to_value(state)?,
            &stores,
        )?;
        Ok(())
    }

    /// Rebuild a trainer from a checkpoint written by [`Trainer::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let (manifest, mut stores) = read_checkpoint(dir)?;
        if manifest.kind != "segmentation" {
            return Err(Error::Format(format!(
                "{}: expected a segmentation checkpoint, found `{}`",
                dir.display(),
                manifest.kind
            )));
        }
        let cfg: TrainConfig = serde_json::from_value(manifest.config)?;
        let state: TrainState = serde_json::from_value(manifest.state)?;
        let mut t = Trainer::new(cfg)?;
        t.s.params.load_from(&take_store(&mut stores, "snet")?)?;
        let bad_state = || Error::Format(format!("{}: optimizer state does not match", dir.display()));
        t.opt_s = Adam::restore(&t.s.params, adam_cfg(), state.adam_s_step, &take_store(&mut stores, "snet_adam")?)
            .ok_or_else(bad_state)?;
        if let Some(d) = t.d.as_mut() {
            d.params.load_from(&take_store(&mut stores, "dnet")?)?;
            let step = state.adam_d_step.ok_or_else(bad_state)?;
            t.opt_d = Some(
                Adam::restore(&d.params, adam_cfg(), step, &take_store(&mut stores, "dnet_adam")?)
                    .ok_or_else(bad_state)?,
            );
        }
        t.iteration = state.iteration;
        t.tracker = state.tracker;
        t.best = state.best;
        t.validation = state.validation;
        t.last_checkpoint = Some(dir.to_path_buf());
        Ok(t)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Continue from `<out>/checkpoints/latest` when it exists.
    pub resume: bool,
    /// Stop (with a checkpoint) once this many iterations are done.
    pub stop_after: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub log: Vec<TrainLogRow>,
    pub validation: Vec<ValidationRecord>,
    pub best: Option<ValidationRecord>,
    /// Test-set report of the selected model; `None` when stopped early.
    pub report: Option<MetricReport>,
    /// Iterations completed.
    pub iterations: u64,
    /// S-net used for the report: the best validated one, else the last.
    pub model: SegNet<f32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunSummary {
    iterations: u64,
    variant: Variant,
    labeled_cases: usize,
    unlabeled_cases: usize,
    validation: Vec<ValidationRecord>,
    best: Option<ValidationRecord>,
    test_mean_dsc: Option<f64>,
}

pub const LOG_FILE: &str = "log.csv";
pub const SUMMARY_FILE: &str = "summary.json";

fn log_writer(path: &Path, keep: &[TrainLogRow]) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in keep {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(w)
}

pub fn read_log(path: &Path) -> Result<Vec<TrainLogRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Train to `cfg.max_iterations`, validating and checkpointing every
/// cadence, then score the test cases with the best validated model.
///
/// With `out`, the run directory receives `log.csv` (one row per iteration,
/// flushed as written), `checkpoints/{latest,best}`, `summary.json` and the
/// test report as `report.{json,csv}`.
pub fn run_experiment(cfg: &TrainConfig, data: &Dataset, out: Option<&Path>, opts: &RunOptions) -> Result<RunResult> {
    cfg.validate()?;
    let latest = out.map(|o| o.join("checkpoints").join("latest"));
    let best_dir = out.map(|o| o.join("checkpoints").join("best"));
    let resume_from = latest
        .as_ref()
        .filter(|p| opts.resume && p.join(CHECKPOINT_MANIFEST).exists());
    let (mut t, mut log) = match resume_from {
        Some(dir) => {
            let t = Trainer::load(dir)?;
            if &t.cfg != cfg {
                return Err(Error::Invalid(format!(
                    "{}: checkpoint was written with a different config",
                    dir.display()
                )));
            }
            let log_path = out.expect("resume implies out").join(LOG_FILE);
            let mut rows = if log_path.exists() { read_log(&log_path)? } else { Vec::new() };
            log::info!("resuming {} at iteration {}", dir.display(), t.iteration);
            rows.retain(|r| r.iteration < t.iteration);
            (t, rows)
        }
        None => (Trainer::new(cfg.clone())?, Vec::new()),
    };
    let mut writer = match out {
        Some(o) => {
            create_dir(o)?;
            Some(log_writer(&o.join(LOG_FILE), &log)?)
        }
        None => None,
    };
    let cadence = cfg.validate_cadence();
    let mut best_model = match (&t.best, &best_dir) {
        (Some(_), Some(dir)) if dir.join(CHECKPOINT_MANIFEST).exists() => Some(Trainer::load(dir)?.s),
        _ => None,
    };
    let stop = opts.stop_after.unwrap_or(u64::MAX).min(cfg.max_iterations);
    while t.iteration < stop {
        let row = t.step(data)?;
        if let (Some(w), Some(o)) = (writer.as_mut(), out) {
            w.serialize(&row)?;
            w.flush().map_err(|e| Error::io(o.join(LOG_FILE), e))?;
        }
        log.push(row);
        let done = t.iteration == cfg.max_iterations;
        if t.iteration % cadence == 0 || done {
            if let Some(rec) = t.validate_now(data)? {
                log::info!("iteration {}: validation mean DSC {:.4}", rec.iteration, rec.mean_dsc);
                if t.best.is_none_or(|b| rec.mean_dsc > b.mean_dsc) {
                    t.best = Some(rec);
                    if let Some(dir) = &best_dir {
                        t.save(dir)?;
                    }
                    best_model = Some(t.s.clone());
                }
            }
            if let Some(dir) = &latest {
                t.save(dir)?;
                t.last_checkpoint = Some(dir.clone());
            }
        }
    }
    if t.iteration < cfg.max_iterations {
        if let Some(dir) = &latest {
            t.save(dir)?;
        }
        return Ok(RunResult {
            log,
            validation: t.validation.clone(),
            best: t.best,
            report: None,
            iterations: t.iteration,
            model: t.s,
        });
    }
    let model = best_model.unwrap_or_else(|| t.s.clone());
    let report = evaluate_cases(&model, &data.test)?;
    if let Some(o) = out {
        report.save(o, "report")?;
        let summary = RunSummary {
            iterations: t.iteration,
            variant: cfg.experiment.variant,
            labeled_cases: data.labeled.len(),
            unlabeled_cases: data.unlabeled.len(),
            validation: t.validation.clone(),
            best: t.best,
            test_mean_dsc: (!data.test.is_empty()).then(|| report.mean_dsc()),
        };
        write_json(&o.join(SUMMARY_FILE), &summary)?;
    }
    Ok(RunResult {
        log,
        validation: t.validation.clone(),
        best: t.best,
        report: Some(report),
        iterations: t.iteration,
        model,
    })
}

/// Load the S-net of a segmentation checkpoint for inference.
pub fn load_segnet(dir: &Path) -> Result<SegNet<f32>> {
    Ok(Trainer::load(dir)?.s)
}

/// Read a run summary written by [`run_experiment`].
pub fn read_summary(dir: &Path) -> Result<serde_json::Value> {
    read_json(&dir.join(SUMMARY_FILE))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voldata::NUM_CLASSES;
    use ndarray::Array3;

    fn case(i: usize, depth: usize) -> LabeledCase {
        let labels = Array3::from_shape_fn((depth, 16, 16), |(z, y, x)| {
            (((x + i) / 4 + y / 6 + z / 5) % NUM_CLASSES) as u8
        });
        let vol = labels.mapv(|c| c as f32 / NUM_CLASSES as f32 + 0.02 * ((i % 3) as f32));
        LabeledCase {
            id: format!("c{i}"),
            volume: CtVolume::new(vol, [2.0, 1.0, 1.0], true).unwrap(),
            labels: LabelMap::new(labels, NUM_CLASSES).unwrap(),
        }
    }

    fn data(nl: usize, nu: usize) -> Dataset {
        Dataset {
            labeled: (0..nl).map(|i| case(i, 16)).collect(),
            unlabeled: (0..nu)
                .map(|i| {
                    let c = case(100 + i, 16);
                    UnlabeledCase { id: c.id, volume: c.volume }
                })
                .collect(),
            validation: vec![case(50, 16)],
            test: vec![case(60, 8), case(61, 16)],
        }
    }

    fn cfg(variant: Variant, seed: u64) -> TrainConfig {
        let experiment = ExperimentSpec {
            variant,
            labeled_cases: vec!["c0".into()],
            unlabeled_cases: if variant.semi_supervised() { vec!["c100".into()] } else { vec![] },
            validation_cases: vec![],
            test_cases: vec![],
        };
        TrainConfig {
            max_iterations: 6,
            pretrain_iterations: 2,
            batch_size: 1,
            segnet: SegNetConfig::with_input([8, 16, 16], 2),
            disc: DiscConfig {
                base_channels: 2,
                num_down: 3,
                ..DiscConfig::default()
            },
            validate_every: Some(3),
            ..TrainConfig::desk(experiment, seed)
        }
    }

    #[test]
    fn poly_schedule() {
        let half = poly_lr(5e-4, 20000, 40000, 0.9);
        assert!((half - 2.679434e-4).abs() < 1e-10, "{half}");
        // Agrees with the rounded hand value 2.6796e-4 to four digits.
        assert!((half / 2.6796e-4 - 1.0).abs() < 1e-4);
        assert_eq!(poly_lr(5e-4, 0, 100, 0.9), 5e-4);
        assert_eq!(poly_lr(5e-4, 100, 100, 0.9), 0.0);
        assert_eq!(poly_lr(5e-4, 150, 100, 0.9), 0.0);
    }

    #[test]
    fn experiment_validation() {
        let mut c = cfg(Variant::ResUnetAuxAdvSemi, 0);
        c.experiment.unlabeled_cases.clear();
        assert!(c.validate().is_err());
        let mut c = cfg(Variant::ResUnetAux, 0);
        c.experiment.unlabeled_cases.push("u".into());
        assert!(c.validate().is_err());
        let mut c = cfg(Variant::ResUnet, 0);
        c.pretrain_iterations = 7;
        assert!(c.validate().is_err());
        assert!(cfg(Variant::ResUnet, 0).validate().is_ok());
        assert!(!cfg(Variant::ResUnet, 0).effective_segnet().aux_heads);
        assert!(cfg(Variant::ResUnetAux, 0).effective_segnet().aux_heads);
    }

    #[test]
    fn config_round_trips_and_rejects_unknown_fields() {
        let c = cfg(Variant::ResUnetAuxAdvSemi, 3);
        let v = serde_json::to_value(&c).unwrap();
        let back: TrainConfig = serde_json::from_value(v.clone()).unwrap();
        assert_eq!(back, c);
        let mut bad = v;
        bad["learning_rate"] = serde_json::json!(1.0);
        assert!(serde_json::from_value::<TrainConfig>(bad).is_err());
    }

    #[test]
    fn zero_iterations_leave_initialization() {
        let mut c = cfg(Variant::ResUnetAuxAdv, 4);
        c.max_iterations = 0;
        c.pretrain_iterations = 0;
        let fresh = Trainer::new(c.clone()).unwrap();
        let run = run_experiment(&c, &data(2, 0), None, &RunOptions::default()).unwrap();
        assert!(run.log.is_empty());
        assert_eq!(run.model.params.checksum(), fresh.s.params.checksum());
    }

    #[test]
    fn unlabeled_step_updates_s_only() {
        let mut t = Trainer::new(cfg(Variant::ResUnetAuxAdvSemi, 1)).unwrap();
        let x = Batch::from_cases(&[&case(100, 8).volume], None).unwrap();
        assert!(t.train_step_unlabeled(&x).is_err(), "rejected inside pretraining");
        t.iteration = 2;
        let (s0, d0) = (t.s.params.checksum(), t.d.as_ref().unwrap().params.checksum());
        let row = t.train_step_unlabeled(&x).unwrap();
        assert_eq!(row.branch, Branch::Unlabeled);
        assert!(row.l_vox.is_none() && row.l_d.is_none());
        assert!(row.trusted_frac.unwrap() >= 0.0);
        assert_ne!(t.s.params.checksum(), s0);
        assert_eq!(t.d.as_ref().unwrap().params.checksum(), d0);
    }

    #[test]
    fn zero_unlabeled_objective_is_a_no_op() {
        let mut c = cfg(Variant::ResUnetAuxAdvSemi, 1);
        c.loss_weights.lambda_adv_unlabeled = 0.0;
        c.loss_weights.lambda_semi = 0.0;
        let mut t = Trainer::new(c).unwrap();
        t.iteration = 2;
        let x = Batch::from_cases(&[&case(100, 8).volume], None).unwrap();
        let s0 = t.s.params.checksum();
        t.train_step_unlabeled(&x).unwrap();
        assert_eq!(t.s.params.checksum(), s0);
    }

    #[test]
    fn labeled_step_updates_both_networks() {
        let d = data(1, 0);
        let mut t = Trainer::new(cfg(Variant::ResUnetAuxAdv, 2)).unwrap();
        let (s0, d0) = (t.s.params.checksum(), t.d.as_ref().unwrap().params.checksum());
        let (branch, batch) = t.draw_batch(&d).unwrap();
        assert_eq!(branch, Branch::Labeled);
        let row = t.train_step_labeled(&batch).unwrap();
        assert!(row.l_vox.is_some() && row.l_adv.is_some() && row.l_d.is_some());
        assert_ne!(t.s.params.checksum(), s0);
        assert_ne!(t.d.as_ref().unwrap().params.checksum(), d0);
    }

    #[test]
    fn s_and_d_updates_are_isolated() {
        let d = data(1, 0);
        let mut t = Trainer::new(cfg(Variant::ResUnetAuxAdv, 3)).unwrap();
        let (_, batch) = t.draw_batch(&d).unwrap();
        let d0 = t.d.as_ref().unwrap().params.checksum();
        let upd = t.labeled_s_update(&batch).unwrap();
        assert_eq!(t.d.as_ref().unwrap().params.checksum(), d0, "S-update froze D");
        let s1 = t.s.params.checksum();
        t.d_update(&batch, &upd.prediction).unwrap().unwrap();
        assert_eq!(t.s.params.checksum(), s1, "D-update detached S");
        assert_ne!(t.d.as_ref().unwrap().params.checksum(), d0);
    }

    #[test]
    fn supervised_variant_has_no_discriminator() {
        let run = run_experiment(&cfg(Variant::ResUnet, 1), &data(2, 0), None, &RunOptions::default()).unwrap();
        assert!(run.log.iter().all(|r| r.l_adv.is_none() && r.l_d.is_none() && r.lr_d.is_none()));
        assert!(Trainer::new(cfg(Variant::ResUnetAux, 1)).unwrap().d.is_none());
    }

    #[test]
    fn semi_threshold_above_ceiling_leaves_adversarial_term_only() {
        let mut c = cfg(Variant::ResUnetAuxAdvSemi, 1);
        c.loss_weights.t_semi = 1.5;
        let mut t = Trainer::new(c).unwrap();
        t.iteration = 2;
        let x = Batch::from_cases(&[&case(100, 8).volume], None).unwrap();
        let row = t.train_step_unlabeled(&x).unwrap();
        assert_eq!(row.l_semi, Some(0.0));
        assert_eq!(row.trusted_frac, Some(0.0));
        assert!(row.l_adv.unwrap() > 0.0);
    }

    #[test]
    fn pretraining_rows_are_labeled() {
        let d = data(1, 3);
        let mut t = Trainer::new(cfg(Variant::ResUnetAuxAdvSemi, 6)).unwrap();
        let rows = t.pretrain(&d).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.branch == Branch::Labeled));
        assert!(t.pretrain(&Dataset::default()).is_err());
    }

    #[test]
    fn zero_adversarial_weight_decouples_s_from_d() {
        // With the adversarial weight at zero, the S trajectory must match
        // the variant that has no D-net at all.
        let d = data(2, 0);
        let mut with_d = cfg(Variant::ResUnetAuxAdv, 9);
        with_d.loss_weights.lambda_adv_labeled = 0.0;
        let without = cfg(Variant::ResUnetAux, 9);
        let a = run_experiment(&with_d, &d, None, &RunOptions::default()).unwrap();
        let b = run_experiment(&without, &d, None, &RunOptions::default()).unwrap();
        assert_eq!(a.model.params.checksum(), b.model.params.checksum());
        let vox = |r: &RunResult| r.log.iter().map(|l| l.l_vox).collect::<Vec<_>>();
        assert_eq!(vox(&a), vox(&b));
    }

    #[test]
    fn log_covers_every_iteration() {
        let d = data(2, 6);
        let run = run_experiment(&cfg(Variant::ResUnetAuxAdvSemi, 5), &d, None, &RunOptions::default()).unwrap();
        assert_eq!(run.log.len(), 6);
        assert!(run.log.iter().enumerate().all(|(i, r)| r.iteration == i as u64));
        assert!(run.log[..2].iter().all(|r| r.branch == Branch::Labeled));
        assert_eq!(run.validation.iter().map(|v| v.iteration).collect::<Vec<_>>(), vec![3, 6]);
        assert_eq!(run.report.unwrap().cases.len(), 2);
        for r in &run.log {
            assert_eq!(r.lr_s, poly_lr(5e-4, r.iteration, 6, 0.9));
        }
    }

    #[test]
    fn interleaving_follows_case_ratio() {
        let c = TrainConfig {
            pretrain_iterations: 0,
            max_iterations: 4000,
            ..cfg(Variant::ResUnetAuxAdvSemi, 11)
        };
        let d = data(1, 3);
        let mut t = Trainer::new(c).unwrap();
        let mut unl = 0;
        for it in 0..4000 {
            t.iteration = it;
            let mut rng = derived_rng(11, "train-iter", it);
            let coin: f64 = rng.random();
            let (b, _) = t.draw_batch(&d).unwrap();
            assert_eq!(b == Branch::Unlabeled, coin < 0.75);
            unl += (b == Branch::Unlabeled) as usize;
        }
        let frac = unl as f64 / 4000.0;
        assert!((frac - 0.75).abs() < 0.03, "{frac}");
    }

    #[test]
    fn runs_are_deterministic() {
        let d = data(2, 2);
        let c = cfg(Variant::ResUnetAuxAdvSemi, 21);
        let a = run_experiment(&c, &d, None, &RunOptions::default()).unwrap();
        let b = run_experiment(&c, &d, None, &RunOptions::default()).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.model.params.checksum(), b.model.params.checksum());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let d = data(2, 2);
        let c = cfg(Variant::ResUnetAuxAdvSemi, 8);
        let full = run_experiment(&c, &d, None, &RunOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let part = run_experiment(
            &c,
            &d,
            Some(dir.path()),
            &RunOptions {
                resume: false,
                stop_after: Some(4),
            },
        )
        .unwrap();
        assert_eq!(part.iterations, 4);
        assert!(part.report.is_none());
        let rest = run_experiment(
            &c,
            &d,
            Some(dir.path()),
            &RunOptions {
                resume: true,
                stop_after: None,
            },
        )
        .unwrap();
        assert_eq!(rest.log, full.log);
        assert_eq!(rest.model.params.checksum(), full.model.params.checksum());
        assert_eq!(rest.validation, full.validation);
        assert_eq!(read_log(&dir.path().join(LOG_FILE)).unwrap(), full.log);
        assert!(dir.path().join("report.json").exists());
        assert!(read_summary(dir.path()).unwrap()["iterations"] == 6);
    }

    #[test]
    fn checkpoint_round_trip() {
        let d = data(1, 1);
        let mut t = Trainer::new(cfg(Variant::ResUnetAuxAdvSemi, 2)).unwrap();
        t.step(&d).unwrap();
        let dir = tempfile::tempdir().unwrap();
        t.save(dir.path()).unwrap();
        let back = Trainer::load(dir.path()).unwrap();
        assert_eq!(back.iteration, 1);
        assert_eq!(back.s.params.checksum(), t.s.params.checksum());
        assert_eq!(back.tracker, t.tracker);
        assert_eq!(load_segnet(dir.path()).unwrap().params.checksum(), t.s.params.checksum());
    }

    #[test]
    fn inference_covers_whole_volume() {
        let t = Trainer::new(cfg(Variant::ResUnet, 0)).unwrap();
        let c = case(0, 24);
        let pred = infer_case(&t.s, &c.volume, 8).unwrap();
        assert_eq!(pred.dims(), [24, 16, 16]);
        assert!(infer_case(&t.s, &case(0, 12).volume, 8).is_err());
        // A single slab is the plain forward pass.
        let c = case(3, 8);
        let x = Batch::from_cases(&[&c.volume], None).unwrap().x;
        let whole = OneHotMap::new(
            Array4::from_shape_vec((NUM_CLASSES, 8, 16, 16), t.s.predict(&x).unwrap().into_data()).unwrap(),
        )
        .unwrap()
        .argmax();
        assert_eq!(infer_case(&t.s, &c.volume, 8).unwrap(), whole);
    }
}
