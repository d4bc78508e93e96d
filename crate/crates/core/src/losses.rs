//! Training objectives. Every reduction is a sum over voxels and batch, and
//! every logarithm sees its argument clamped at [`LOG_EPS`].

use semiseg_nn::{Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LOG_EPS: f64 = 1e-7;

/// Adaptive per-class weights together with the statistics they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    pub w: Vec<f64>,
    pub dsc_snapshot: Vec<f64>,
    pub counts: Vec<u64>,
}

impl ClassWeights {
    pub fn uniform(num_classes: usize) -> Self {
        Self {
            w: vec![1.0; num_classes],
            dsc_snapshot: vec![0.0; num_classes],
            counts: vec![0; num_classes],
        }
    }
}

/// `w_c = 2 - DSC_c + ln(total / max(count_c, 1))`.
pub fn adaptive_weights(dsc_per_class: &[f64], counts: &[u64]) -> Result<ClassWeights> {
    if dsc_per_class.len() != counts.len() || counts.is_empty() {
        return Err(Error::Shape(format!(
            "{} DSC values for {} counts",
            dsc_per_class.len(),
            counts.len()
        )));
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::Invalid("all class counts are zero".into()));
    }
    if let Some(d) = dsc_per_class.iter().find(|d| !(0.0..=1.0).contains(*d)) {
        return Err(Error::Invalid(format!("DSC {d} outside [0, 1]")));
    }
    let w = dsc_per_class
        .iter()
        .zip(counts)
        .map(|(&d, &n)| 2.0 - d + (total as f64 / n.max(1) as f64).ln())
        .collect();
    Ok(ClassWeights {
        w,
        dsc_snapshot: dsc_per_class.to_vec(),
        counts: counts.to_vec(),
    })
}

/// Per-class DSC of the running batch, carried over for absent classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveWeightTracker {
    pub last_dsc: Vec<f64>,
}

impl AdaptiveWeightTracker {
    pub fn new(num_classes: usize) -> Self {
        Self {
            last_dsc: vec![0.0; num_classes],
        }
    }

    /// Weights for a batch from its ground truth and detached argmax.
    pub fn update(&mut self, gt: &[usize], pred: &[usize]) -> Result<ClassWeights> {
        let c = self.last_dsc.len();
        if gt.len() != pred.len() {
            return Err(Error::Shape(format!(
                "{} labels vs {} predictions",
                gt.len(),
                pred.len()
            )));
        }
        let mut counts = vec![0u64; c];
        let mut pred_counts = vec![0u64; c];
        let mut both = vec![0u64; c];
        for (&g, &p) in gt.iter().zip(pred) {
            if g >= c || p >= c {
                return Err(Error::Invalid(format!("class index out of range 0..{c}")));
            }
            counts[g] += 1;
            pred_counts[p] += 1;
            if g == p {
                both[g] += 1;
            }
        }
        for k in 0..c {
            if counts[k] > 0 {
                self.last_dsc[k] = 2.0 * both[k] as f64 / (counts[k] + pred_counts[k]) as f64;
            }
        }
        adaptive_weights(&self.last_dsc, &counts)
    }
}

/// Loss coefficients and the self-taught trust threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_adv_labeled: f64,
    pub lambda_adv_unlabeled: f64,
    pub lambda_semi: f64,
    pub t_semi: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_adv_labeled: 0.01,
            lambda_adv_unlabeled: 0.001,
            lambda_semi: 0.1,
            t_semi: 0.2,
        }
    }
}

impl LossWeights {
    /// `t_semi` may exceed 1 to disable the self-taught term entirely.
    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            ("lambda_adv_labeled", self.lambda_adv_labeled),
            ("lambda_adv_unlabeled", self.lambda_adv_unlabeled),
            ("lambda_semi", self.lambda_semi),
            ("t_semi", self.t_semi),
        ];
        for (name, v) in lambdas {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config {
                    path: format!("loss_weights.{name}"),
                    message: format!("must be finite and >= 0, got {v}"),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Labeled,
    Unlabeled,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Labeled => "labeled",
            Branch::Unlabeled => "unlabeled",
        }
    }
}

fn check_finite<T: Real>(v: &Var<'_, T>, what: &str) -> Result<()> {
    if v.value().all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} contains NaN or infinity")))
    }
}

fn voxel_labels(values: &[usize], n_vox: usize) -> Result<()> {
    if values.len() != n_vox {
        return Err(Error::Shape(format!(
            "{} labels for {n_vox} voxels",
            values.len()
        )));
    }
    Ok(())
}

/// Weighted multi-class cross-entropy of a `[N, C, D, H, W]` distribution
/// against per-voxel ground truth.
pub fn weighted_mce<'g, T: Real>(
    pred: Var<'g, T>,
    gt: &[usize],
    w: &ClassWeights,
) -> Result<Var<'g, T>> {
    check_finite(&pred, "prediction")?;
    let [n, c, d, h, ww] = pred.value().dims5()?;
    voxel_labels(gt, n * d * h * ww)?;
    if w.w.len() != c {
        return Err(Error::Shape(format!("{} weights for {c} classes", w.w.len())));
    }
    if let Some(&bad) = gt.iter().find(|&&g| g >= c) {
        return Err(Error::Invalid(format!("label {bad} >= {c}")));
    }
    Ok(pred.weighted_nll(gt, &w.w, None, LOG_EPS))
}

/// Binary cross-entropy of a confidence map against a constant target.
pub fn bce_confidence<'g, T: Real>(conf: Var<'g, T>, target: f64) -> Var<'g, T> {
    conf.bce_const(target, LOG_EPS)
}

/// Adversarial term for S: every prediction should be scored real.
pub fn adversarial_loss<'g, T: Real>(conf_fake: Var<'g, T>) -> Var<'g, T> {
    bce_confidence(conf_fake, 1.0)
}

/// Trusted voxels and self-taught labels of an unlabeled batch.
#[derive(Debug, Clone, PartialEq)]
pub struct SemiMask {
    /// Per voxel `(n, d, h, w)`, true where the confidence exceeds `t_semi`.
    pub indicator: Vec<bool>,
    pub pseudo_labels: Vec<usize>,
}

impl SemiMask {
    pub fn trusted_fraction(&self) -> f64 {
        if self.indicator.is_empty() {
            return 0.0;
        }
        self.indicator.iter().filter(|&&b| b).count() as f64 / self.indicator.len() as f64
    }
}

/// Per-voxel channel argmax of a `[N, C, D, H, W]` tensor (lowest index wins
/// ties).
pub fn argmax_channels<T: Real>(p: &Tensor<T>) -> Vec<usize> {
    let [n, c, d, h, w] = p.dims5().expect("argmax input must be 5D");
    let s = d * h * w;
    let data = p.data();
    let mut out = vec![0usize; n * s];
    for b in 0..n {
        for v in 0..s {
            let mut best = 0;
            let mut best_v = data[b * c * s + v];
            for ch in 1..c {
                let x = data[(b * c + ch) * s + v];
                if x > best_v {
                    best = ch;
                    best_v = x;
                }
            }
            out[b * s + v] = best;
        }
    }
    out
}

/// Self-taught loss: negative log-likelihood of the detached argmax over
/// voxels the discriminator trusts. `conf` is `[N, 1, D, H, W]`.
pub fn semi_loss<'g, T: Real>(
    pred: Var<'g, T>,
    conf: &Tensor<T>,
    lw: &LossWeights,
) -> Result<(Var<'g, T>, SemiMask)> {
    check_finite(&pred, "prediction")?;
    let p = pred.value();
    let [n, c, d, h, w] = p.dims5()?;
    if conf.shape() != [n, 1, d, h, w] {
        return Err(Error::Shape(format!(
            "confidence {:?} for prediction {:?}",
            conf.shape(),
            p.shape()
        )));
    }
    let pseudo_labels = argmax_channels(&p);
    let indicator: Vec<bool> = conf
        .data()
        .iter()
        .map(|v| v.to_f64().unwrap() > lw.t_semi)
        .collect();
    let loss = pred.weighted_nll(&pseudo_labels, &vec![1.0; c], Some(&indicator), LOG_EPS);
    Ok((
        loss,
        SemiMask {
            indicator,
            pseudo_labels,
        },
    ))
}

/// Coefficients `(vox, adv, semi)` of the total S loss for a branch.
pub fn branch_coefficients(lw: &LossWeights, branch: Branch) -> (f64, f64, f64) {
    match branch {
        Branch::Labeled => (1.0, lw.lambda_adv_labeled, 0.0),
        Branch::Unlabeled => (0.0, lw.lambda_adv_unlabeled, lw.lambda_semi),
    }
}

fn branch_contract(branch: Branch, has_vox: bool, has_semi: bool) -> Result<()> {
    match branch {
        Branch::Labeled if has_semi => Err(Error::Invalid(
            "labeled branch must not carry a self-taught loss".into(),
        )),
        Branch::Unlabeled if has_vox => Err(Error::Invalid(
            "unlabeled branch has no ground truth for a voxel-wise loss".into(),
        )),
        _ => Ok(()),
    }
}

/// Scalar form of the total S loss.
pub fn total_s_loss_value(
    l_vox: f64,
    l_adv: f64,
    l_semi: f64,
    lw: &LossWeights,
    branch: Branch,
) -> Result<f64> {
    branch_contract(branch, l_vox != 0.0, l_semi != 0.0)?;
    let (a, b, c) = branch_coefficients(lw, branch);
    Ok(a * l_vox + b * l_adv + c * l_semi)
}

/// Tape form of the total S loss; absent terms contribute nothing.
pub fn total_s_loss<'g, T: Real>(
    l_vox: Option<Var<'g, T>>,
    l_adv: Option<Var<'g, T>>,
    l_semi: Option<Var<'g, T>>,
    lw: &LossWeights,
    branch: Branch,
) -> Result<Var<'g, T>> {
    branch_contract(branch, l_vox.is_some(), l_semi.is_some())?;
    let (a, b, c) = branch_coefficients(lw, branch);
    let terms: Vec<Var<'g, T>> = [(l_vox, a), (l_adv, b), (l_semi, c)]
        .into_iter()
        .filter_map(|(v, k)| v.map(|v| if k == 1.0 { v } else { v.scale(k) }))
        .collect();
    let first = terms
        .first()
        .copied()
        .ok_or_else(|| Error::Invalid("total loss needs at least one term".into()))?;
    Ok(terms[1..].iter().fold(first, |acc, &t| acc.add(t)))
}

/// D loss: real products scored 1, predicted products scored 0.
pub fn d_loss<'g, T: Real>(conf_real: Var<'g, T>, conf_fake: Var<'g, T>) -> Var<'g, T> {
    bce_confidence(conf_real, 1.0).add(bce_confidence(conf_fake, 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use semiseg_nn::Graph;

    fn scalar_loss(f: impl for<'g> Fn(&'g Graph<f64>) -> Var<'g, f64>) -> f64 {
        let g = Graph::new();
        f(&g).item()
    }

    #[test]
    fn adaptive_weight_examples() {
        let w = adaptive_weights(&[0.9, 0.5], &[900, 100]).unwrap();
        assert_abs_diff_eq!(w.w[0], 1.2054, epsilon = 5e-5);
        assert_abs_diff_eq!(w.w[1], 3.8026, epsilon = 5e-5);
        let sat = adaptive_weights(&[1.0], &[1000]).unwrap();
        assert_abs_diff_eq!(sat.w[0], 1.0, epsilon = 1e-12);
        // A class holding total/e voxels gets 2 + 1 at DSC 0.
        let total = 1_000_000f64;
        let n = (total / std::f64::consts::E).round() as u64;
        let w = adaptive_weights(&[0.0, 0.0], &[n, total as u64 - n]).unwrap();
        assert_abs_diff_eq!(w.w[0], 3.0, epsilon = 1e-5);
        assert!(adaptive_weights(&[0.0, 0.0], &[0, 0]).is_err());
    }

    #[test]
    fn weights_are_at_least_one() {
        let w = adaptive_weights(&[1.0, 0.3, 0.0, 1.0], &[10, 0, 5, 85]).unwrap();
        assert!(w.w.iter().all(|&x| x >= 1.0));
        // Absent class is floored at a single voxel.
        assert_abs_diff_eq!(w.w[1], 2.0 - 0.3 + 100f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn tracker_carries_absent_classes() {
        let mut t = AdaptiveWeightTracker::new(3);
        t.update(&[0, 1, 2, 2], &[0, 1, 2, 0]).unwrap();
        assert_abs_diff_eq!(t.last_dsc[2], 2.0 / 3.0, epsilon = 1e-12);
        let w = t.update(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap();
        assert_abs_diff_eq!(w.dsc_snapshot[2], 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(w.dsc_snapshot[0], 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(w.dsc_snapshot[1], 0.8, epsilon = 1e-12);
    }

    fn probs(c: usize, values: &[f64]) -> Tensor<f64> {
        let vox = values.len() / c;
        Tensor::new(vec![1, c, 1, 1, vox], values.to_vec()).unwrap()
    }

    #[test]
    fn weighted_mce_examples() {
        let w = ClassWeights { w: vec![1.0, 2.0, 1.0], ..ClassWeights::uniform(3) };
        let loss = scalar_loss(|g| {
            weighted_mce(g.constant(probs(3, &[0.2, 0.5, 0.3])), &[1], &w).unwrap()
        });
        assert_abs_diff_eq!(loss, 1.3863, epsilon = 5e-5);

        // Uniform prediction over a 2x2x2 block with unit weights.
        let c = 6;
        let u = Tensor::full(&[1, c, 2, 2, 2], 1.0 / c as f64);
        let loss = scalar_loss(|g| {
            weighted_mce(g.constant(u.clone()), &[3; 8], &ClassWeights::uniform(c)).unwrap()
        });
        assert_abs_diff_eq!(loss, 8.0 * (c as f64).ln(), epsilon = 1e-10);

        let perfect = probs(2, &[1.0, 0.0, 0.0, 1.0]);
        let loss = scalar_loss(|g| {
            weighted_mce(g.constant(perfect.clone()), &[0, 1], &ClassWeights::uniform(2)).unwrap()
        });
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn weighted_mce_rejects_nan_and_matches_plain_cross_entropy() {
        let g = Graph::<f64>::new();
        let bad = g.constant(probs(2, &[f64::NAN, 0.5]));
        assert!(matches!(
            weighted_mce(bad, &[0], &ClassWeights::uniform(2)),
            Err(Error::NonFinite(_))
        ));
        let p = [0.1, 0.7, 0.2, 0.3, 0.3, 0.4, 0.05, 0.9, 0.05];
        // Channel-major layout: three voxels, three classes.
        let t = Tensor::new(vec![1, 3, 1, 1, 3], vec![p[0], p[3], p[6], p[1], p[4], p[7], p[2], p[5], p[8]]).unwrap();
        let gt = [1, 2, 0];
        let ours = weighted_mce(g.constant(t), &gt, &ClassWeights::uniform(3)).unwrap().item();
        let plain = -(0.7f64.ln() + 0.4f64.ln() + 0.05f64.ln());
        assert_eq!(ours, plain);
    }

    #[test]
    fn bce_and_adversarial_examples() {
        let half = Tensor::full(&[1, 1, 2, 2, 2], 0.5);
        let b = scalar_loss(|g| bce_confidence(g.constant(half.clone()), 1.0));
        assert_abs_diff_eq!(b, 5.5452, epsilon = 5e-5);
        let a = scalar_loss(|g| adversarial_loss(g.constant(half.clone())));
        assert_eq!(a, b);
        let top = Tensor::full(&[1, 1, 2, 2, 2], 1.0 - LOG_EPS);
        assert!(scalar_loss(|g| adversarial_loss(g.constant(top.clone()))) < 1e-5);
        let conf = Tensor::new(vec![1, 1, 1, 1, 3], vec![0.2, 0.6, 0.9]).unwrap();
        let comp = conf.map(|v| 1.0 - v);
        let l0 = scalar_loss(|g| bce_confidence(g.constant(conf.clone()), 0.0));
        let l1 = scalar_loss(|g| bce_confidence(g.constant(comp.clone()), 1.0));
        assert_abs_diff_eq!(l0, l1, epsilon = 1e-12);
    }

    #[test]
    fn total_loss_examples() {
        let lw = LossWeights::default();
        assert_abs_diff_eq!(total_s_loss_value(10.0, 5.0, 0.0, &lw, Branch::Labeled).unwrap(), 10.05, epsilon = 1e-12);
        assert_abs_diff_eq!(total_s_loss_value(0.0, 5.0, 3.0, &lw, Branch::Unlabeled).unwrap(), 0.305, epsilon = 1e-12);
        assert_eq!(total_s_loss_value(0.0, 0.0, 0.0, &lw, Branch::Labeled).unwrap(), 0.0);
        assert!(total_s_loss_value(1.0, 1.0, 1.0, &lw, Branch::Labeled).is_err());
        let g = Graph::<f64>::new();
        let s = |v: f64| g.constant(Tensor::scalar(v));
        let l = total_s_loss(Some(s(10.0)), Some(s(5.0)), None, &lw, Branch::Labeled).unwrap();
        assert_abs_diff_eq!(l.item(), 10.05, epsilon = 1e-12);
        let u = total_s_loss(None, Some(s(5.0)), Some(s(3.0)), &lw, Branch::Unlabeled).unwrap();
        assert_abs_diff_eq!(u.item(), 0.305, epsilon = 1e-12);
        assert!(total_s_loss(Some(s(1.0)), None, Some(s(1.0)), &lw, Branch::Labeled).is_err());
    }

    #[test]
    fn d_loss_examples() {
        let half = Tensor::full(&[1, 1, 2, 2, 2], 0.5);
        let l = scalar_loss(|g| d_loss(g.constant(half.clone()), g.constant(half.clone())));
        assert_abs_diff_eq!(l, 11.0904, epsilon = 5e-5);
        let hi = Tensor::full(&[1, 1, 2, 2, 2], 1.0 - LOG_EPS);
        let lo = Tensor::full(&[1, 1, 2, 2, 2], LOG_EPS);
        assert!(scalar_loss(|g| d_loss(g.constant(hi.clone()), g.constant(lo.clone()))) < 1e-5);
        let r = Tensor::new(vec![1, 1, 1, 1, 2], vec![0.3, 0.8]).unwrap();
        let f = Tensor::new(vec![1, 1, 1, 1, 2], vec![0.6, 0.1]).unwrap();
        let a = scalar_loss(|g| d_loss(g.constant(r.clone()), g.constant(f.clone())));
        let b = scalar_loss(|g| {
            d_loss(g.constant(f.map(|v| 1.0 - v)), g.constant(r.map(|v| 1.0 - v)))
        });
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn semi_loss_threshold_behaviour() {
        let pred = probs(2, &[0.2, 0.6, 0.8, 0.4]);
        let conf = Tensor::new(vec![1, 1, 1, 1, 2], vec![0.3, 0.1]).unwrap();
        let g = Graph::new();
        let lw = LossWeights::default();
        let (loss, mask) = semi_loss(g.constant(pred.clone()), &conf, &lw).unwrap();
        assert_eq!(mask.indicator, vec![true, false]);
        assert_eq!(mask.pseudo_labels, vec![1, 0]);
        assert_abs_diff_eq!(loss.item(), 0.2231, epsilon = 5e-5);
        let off = LossWeights { t_semi: 1.1, ..lw };
        let top = Tensor::full(&[1, 1, 1, 1, 2], 1.0 - LOG_EPS);
        let (loss, mask) = semi_loss(g.constant(pred), &top, &off).unwrap();
        assert_eq!(loss.item(), 0.0);
        assert_eq!(mask.trusted_fraction(), 0.0);
    }

    #[test]
    fn semi_loss_is_monotone_in_threshold() {
        let pred = probs(3, &[0.2, 0.5, 0.1, 0.3, 0.3, 0.6, 0.5, 0.2, 0.3]);
        let conf = Tensor::new(vec![1, 1, 1, 1, 3], vec![0.15, 0.55, 0.95]).unwrap();
        let g = Graph::new();
        let mut prev = f64::INFINITY;
        for t in [0.0, 0.1, 0.2, 0.5, 0.9, 1.0, 1.1] {
            let lw = LossWeights { t_semi: t, ..LossWeights::default() };
            let l = semi_loss(g.constant(pred.clone()), &conf, &lw).unwrap().0.item();
            assert!(l <= prev + 1e-15);
            prev = l;
        }
    }

    #[test]
    fn no_gradient_through_pseudo_labels_or_indicator() {
        // The argmax and threshold only select terms: perturbing a
        // probability that is neither selected nor trusted leaves the
        // gradient at that coordinate zero.
        let g = Graph::new();
        let p = g.leaf(probs(2, &[0.3, 0.9, 0.7, 0.1]));
        let conf = Tensor::new(vec![1, 1, 1, 1, 2], vec![0.9, 0.05]).unwrap();
        let (loss, _) = semi_loss(p, &conf, &LossWeights::default()).unwrap();
        let grads = g.backward(loss);
        let gp = grads.get(p).unwrap().data().to_vec();
        assert_eq!(gp[1], 0.0);
        assert_eq!(gp[3], 0.0);
        assert_eq!(gp[0], 0.0);
        assert_abs_diff_eq!(gp[2], -1.0 / 0.7, epsilon = 1e-12);
    }
}
