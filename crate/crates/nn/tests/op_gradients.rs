//! Every differentiable op against central finite differences at f64.

use semiseg_nn::gradcheck::{central_difference, max_relative_error, probe_indices};
use semiseg_nn::{concat_channels, ConvGeometry, Graph, Tensor, Var};

fn rand_tensor(shape: &[usize], salt: u64) -> Tensor<f64> {
    let mut state = salt.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    Tensor::from_fn(shape, |_| {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    })
}

/// Build `f` on a graph, compare analytic gradients of every input against
/// finite differences on up to 40 coordinates each.
fn check<F>(inputs: Vec<Tensor<f64>>, tol: f64, build: F)
where
    F: for<'g> Fn(&[Var<'g, f64>]) -> Var<'g, f64>,
{
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&vars);
    // Random projection turns any output into a scalar.
    let proj = rand_tensor(out.value().shape(), 99);
    let loss = out.dot_const(&proj);
    let grads = g.backward(loss);
    let eval = |xs: &[Tensor<f64>]| {
        let g = Graph::new();
        let vars: Vec<_> = xs.iter().map(|t| g.constant(t.clone())).collect();
        build(&vars).dot_const(&proj).item()
    };
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v);
        let idx = probe_indices(analytic.numel(), 40);
        let a: Vec<f64> = idx.iter().map(|&j| analytic.data()[j]).collect();
        let n: Vec<f64> = idx
            .iter()
            .map(|&j| central_difference(&eval, &inputs, i, j, 1e-6))
            .collect();
        let err = max_relative_error(&a, &n);
        assert!(err < tol, "input {i}: rel err {err:e}\n a={a:?}\n n={n:?}");
    }
}

#[test]
fn conv3d_padded_and_strided() {
    for geo in [ConvGeometry::cubic(3, 1, 1), ConvGeometry::cubic(4, 2, 1), ConvGeometry::cubic(1, 1, 0)] {
        let k = geo.kernel[0];
        check(
            vec![
                rand_tensor(&[2, 3, 4, 4, 6], 1),
                rand_tensor(&[2, 3, k, k, k], 2),
                rand_tensor(&[2], 3),
            ],
            1e-6,
            |v| v[0].conv3d(v[1], Some(v[2]), geo),
        );
    }
}

#[test]
fn instance_norm() {
    check(
        vec![rand_tensor(&[2, 3, 2, 3, 4], 4), rand_tensor(&[3], 5), rand_tensor(&[3], 6)],
        1e-5,
        |v| v[0].instance_norm(v[1], v[2], 1e-5),
    );
}

#[test]
fn softmax_and_nonlinearities() {
    check(vec![rand_tensor(&[2, 4, 2, 2, 3], 7)], 1e-6, |v| v[0].softmax_channels());
    check(vec![rand_tensor(&[2, 2, 2, 2, 3], 8)], 1e-6, |v| v[0].sigmoid().tanh());
    check(vec![rand_tensor(&[2, 2, 2, 2, 3], 9)], 1e-6, |v| v[0].leaky_relu(0.2));
}

#[test]
fn pooling_and_resampling() {
    for (k, p) in [(2, 0), (3, 1), (5, 2)] {
        check(vec![rand_tensor(&[1, 2, 4, 6, 6], 10 + k as u64)], 1e-6, move |v| {
            v[0].max_pool3d(ConvGeometry::cubic(k, 2, p))
        });
    }
    check(vec![rand_tensor(&[1, 2, 4, 4, 6], 20)], 1e-6, |v| v[0].avg_pool3d([2, 2, 1]));
    check(vec![rand_tensor(&[1, 2, 2, 3, 2], 21)], 1e-6, |v| v[0].upsample([2, 2, 2]));
    check(vec![rand_tensor(&[1, 1, 1, 2, 2], 22)], 1e-6, |v| v[0].upsample([4, 4, 8]));
}

#[test]
fn structural_ops() {
    check(
        vec![rand_tensor(&[2, 1, 2, 2, 2], 30), rand_tensor(&[2, 3, 2, 2, 2], 31)],
        1e-6,
        |v| concat_channels(&[v[0], v[1], v[0]]),
    );
    check(
        vec![rand_tensor(&[2, 1, 2, 2, 2], 32), rand_tensor(&[2, 3, 2, 2, 2], 33)],
        1e-6,
        |v| v[0].mul_channel_broadcast(v[1]),
    );
    check(
        vec![rand_tensor(&[2, 3, 2, 2, 2], 34), rand_tensor(&[2, 3, 2, 2, 2], 35)],
        1e-6,
        |v| v[0].mul(v[1]).add(v[0].scale(0.5)).sub(v[1]),
    );
}

#[test]
fn fused_losses() {
    let labels = vec![0usize, 2, 1, 1, 0, 2, 2, 1];
    check(vec![rand_tensor(&[1, 3, 2, 2, 2], 40)], 1e-6, move |v| {
        v[0].softmax_channels().weighted_nll(&labels, &[1.0, 2.5, 0.7], None, 1e-7)
    });
    let mask = vec![true, false, true, true, false, true, true, false];
    let labels = vec![0usize, 2, 1, 1, 0, 2, 2, 1];
    check(vec![rand_tensor(&[1, 3, 2, 2, 2], 41)], 1e-6, move |v| {
        v[0].softmax_channels()
            .weighted_nll(&labels, &[1.0; 3], Some(&mask), 1e-7)
    });
    check(vec![rand_tensor(&[2, 1, 2, 2, 2], 42)], 1e-6, |v| {
        v[0].sigmoid().bce_const(1.0, 1e-7).add(v[0].sigmoid().bce_const(0.0, 1e-7))
    });
}

#[test]
fn straight_through_forwards_hard_and_backwards_identity() {
    let g = Graph::<f64>::new();
    let soft = g.leaf(rand_tensor(&[1, 2, 1, 1, 2], 50));
    let hard = Tensor::new(vec![1, 2, 1, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let st = soft.straight_through(hard.clone());
    assert_eq!(*st.value(), hard);
    let proj = rand_tensor(&[1, 2, 1, 1, 2], 51);
    let grads = g.backward(st.dot_const(&proj));
    assert_eq!(grads.get(soft).unwrap(), &proj);
}
