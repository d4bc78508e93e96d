//! Gradient-check fixtures for the S-net and D-net objectives in float64.
//! Parameter gradients are probed on an 8x8x8 volume (the smallest the
//! three-level S-net accepts) and input gradients at 64 voxels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semiseg::disc::{build_discnet, make_disc_input, DiscConfig, DiscInputMode, DiscNet};
use semiseg::losses::{
    adversarial_loss, d_loss, semi_loss, total_s_loss, weighted_mce, AdaptiveWeightTracker, Branch,
    ClassWeights, LossWeights,
};
use semiseg::segnet::{build_segnet, SegNet, SegNetConfig};
use semiseg::voldata::NUM_CLASSES;
use semiseg_nn::gradcheck::{max_relative_error, probe_indices};
use semiseg_nn::{Graph, ParamId, ParamStore, Tensor};

pub const DIMS: [usize; 3] = [8, 8, 8];
pub const INPUT_PROBES: usize = 64;
// Losses are sums over voxels, so a smaller step loses digits to round-off.
pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub struct Fixture {
    pub s: SegNet<f64>,
    pub d: DiscNet<f64>,
    pub x: Tensor<f64>,
    pub gt: Vec<usize>,
    pub weights: ClassWeights,
    pub lw: LossWeights,
}

/// Generic biases keep pre-activations away from ReLU kinks.
fn jitter_biases(p: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for id in p.ids().collect::<Vec<_>>() {
        if p.name(id).ends_with(".bias") {
            for v in p.get_mut(id).data_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
    }
}

pub fn fixture(seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = SegNetConfig::with_input(DIMS, 2);
    let mut s = build_segnet::<f64>(&cfg, seed).unwrap();
    let dcfg = DiscConfig {
        base_channels: 2,
        num_down: 3,
        ..DiscConfig::default()
    };
    let mut d = build_discnet::<f64>(&dcfg, seed + 1).unwrap();
    jitter_biases(&mut s.params, &mut rng);
    jitter_biases(&mut d.params, &mut rng);
    let n: usize = DIMS.iter().product();
    let x = Tensor::from_fn(&[1, 1, DIMS[0], DIMS[1], DIMS[2]], |_| rng.random_range(0.05..0.95));
    let gt: Vec<usize> = (0..n).map(|_| rng.random_range(0..NUM_CLASSES)).collect();
    let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..NUM_CLASSES)).collect();
    let weights = AdaptiveWeightTracker::new(NUM_CLASSES).update(&gt, &pred).unwrap();
    let lw = LossWeights {
        lambda_adv_labeled: 0.5,
        lambda_adv_unlabeled: 0.4,
        lambda_semi: 0.7,
        t_semi: 0.2,
    };
    Fixture { s, d, x, gt, weights, lw }
}

/// Total S loss of one branch, and its gradient with respect to the S-net
/// parameters. The discriminator sees the soft prediction: the
/// straight-through input used in training is a surrogate gradient by
/// construction and is checked on its own in the D-net tests.
pub fn s_objective(f: &Fixture, s: &SegNet<f64>, branch: Branch) -> (f64, Vec<Tensor<f64>>) {
    let (v, grads, _) = s_objective_at(f, s, &f.x, branch);
    (v, grads)
}

/// As [`s_objective`] at input `xv`, also returning the input gradient.
pub fn s_objective_at(f: &Fixture, s: &SegNet<f64>, xv: &Tensor<f64>, branch: Branch) -> (f64, Vec<Tensor<f64>>, Tensor<f64>) {
    let g = Graph::new();
    let ps = s.params.bind(&g, true);
    let pd = f.d.params.bind(&g, false);
    let x = g.leaf(xv.clone());
    let pred = s.forward(&ps, x).unwrap().fused;
    let conf = f.d.forward(&pd, make_disc_input(x, pred, DiscInputMode::Soft).unwrap()).unwrap();
    let l_adv = adversarial_loss(conf);
    let total = match branch {
        Branch::Labeled => {
            let l_vox = weighted_mce(pred, &f.gt, &f.weights).unwrap();
            total_s_loss(Some(l_vox), Some(l_adv), None, &f.lw, branch).unwrap()
        }
        Branch::Unlabeled => {
            let (l_semi, mask) = semi_loss(pred, &conf.value(), &f.lw).unwrap();
            assert!(mask.trusted_fraction() > 0.0, "probe must exercise the self-taught term");
            total_s_loss(None, Some(l_adv), Some(l_semi), &f.lw, branch).unwrap()
        }
    };
    let v = total.item();
    let grads = g.backward(total);
    (v, ps.grads(&grads), grads.get_or_zeros(x))
}

pub fn d_objective(f: &Fixture, d: &DiscNet<f64>) -> (f64, Vec<Tensor<f64>>) {
    let prob = f.s.predict(&f.x).unwrap();
    let n: usize = DIMS.iter().product();
    let mut onehot = Tensor::zeros(prob.shape());
    for (v, &c) in f.gt.iter().enumerate() {
        onehot.data_mut()[c * n + v] = 1.0;
    }
    let g = Graph::new();
    let pd = d.params.bind(&g, true);
    let x = g.constant(f.x.clone());
    let real = d.forward(&pd, make_disc_input(x, g.constant(onehot), DiscInputMode::Soft).unwrap()).unwrap();
    let fake = d.forward(&pd, make_disc_input(x, g.constant(prob), DiscInputMode::Hard).unwrap()).unwrap();
    let loss = d_loss(real, fake);
    let v = loss.item();
    (v, pd.grads(&g.backward(loss)))
}

/// Compare analytic and numeric gradients on a few coordinates of every
/// parameter tensor.
pub fn check<N: Clone>(
    net: &N,
    params: impl Fn(&mut N) -> &mut ParamStore<f64>,
    objective: impl Fn(&N) -> (f64, Vec<Tensor<f64>>),
    per_tensor: usize,
) -> (f64, usize) {
    let (_, grads) = objective(net);
    let mut probe = net.clone();
    let ids: Vec<ParamId> = params(&mut probe).ids().collect();
    let (mut ana, mut num) = (Vec::new(), Vec::new());
    for id in ids {
        let len = grads[id.0].numel();
        for j in probe_indices(len, per_tensor) {
            let eval = |delta: f64| {
                let mut n = net.clone();
                params(&mut n).get_mut(id).data_mut()[j] += delta;
                objective(&n).0
            };
            num.push((eval(H) - eval(-H)) / (2.0 * H));
            ana.push(grads[id.0].data()[j]);
        }
    }
    (max_relative_error(&ana, &num), ana.len())
}

/// Worst relative error of the S-loss input gradient over the probe voxels.
pub fn input_check(f: &Fixture, branch: Branch) -> f64 {
    let (_, _, gx) = s_objective_at(f, &f.s, &f.x, branch);
    let (mut ana, mut num) = (Vec::new(), Vec::new());
    for j in probe_indices(f.x.numel(), INPUT_PROBES) {
        let eval = |delta: f64| {
            let mut x = f.x.clone();
            x.data_mut()[j] += delta;
            s_objective_at(f, &f.s, &x, branch).0
        };
        num.push((eval(H) - eval(-H)) / (2.0 * H));
        ana.push(gx.data()[j]);
    }
    assert_eq!(ana.len(), INPUT_PROBES);
    max_relative_error(&ana, &num)
}

/// Worst relative errors of the labeled S, unlabeled S and D objectives,
/// parameters and inputs combined.
pub fn all_checks() -> [(&'static str, f64); 3] {
    let lab = fixture(3);
    let unl = fixture(4);
    let dis = fixture(5);
    let s_lab = check(&lab.s, |s| &mut s.params, |s| s_objective(&lab, s, Branch::Labeled), 3).0;
    let s_unl = check(&unl.s, |s| &mut s.params, |s| s_objective(&unl, s, Branch::Unlabeled), 3).0;
    let d = check(&dis.d, |d| &mut d.params, |d| d_objective(&dis, d), 6).0;
    let i = fixture(7);
    [
        ("total S loss, labeled branch", s_lab.max(input_check(&i, Branch::Labeled))),
        ("total S loss, unlabeled branch", s_unl.max(input_check(&i, Branch::Unlabeled))),
        ("D loss", d),
    ]
}
