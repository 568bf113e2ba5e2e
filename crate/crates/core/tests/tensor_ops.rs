mod common;

use common::{numeric_grad, random_tensor, relative_error, rng, to_f64};
use gasformer::tensor::kernels::{self, ConvSpec};
use gasformer::{Element, Error, Tape, Tensor, Var};
use proptest::prelude::*;

/// Checks every input's analytic gradient of `Σ w ⊙ op(inputs)` against
/// central differences; returns the worst relative error.
fn grad_check<T: Element>(
    inputs: &[Tensor<T>],
    h: f64,
    seed: u64,
    op: impl Fn(&mut Tape<T>, &[Var]) -> Var,
) -> f64 {
    let scalar = |vals: &[Tensor<T>], weights: Option<&Tensor<T>>| -> (Tape<T>, Var, Vec<Var>, Tensor<T>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| tape.param(v.clone()).unwrap()).collect();
        let out = op(&mut tape, &vars);
        let w = weights.cloned().unwrap_or_else(|| {
            let mut r = rng(seed);
            random_tensor(&mut r, tape.shape(out), 1.0)
        });
        let wv = tape.constant(w.clone()).unwrap();
        let prod = tape.mul(out, wv).unwrap();
        let loss = tape.sum(prod).unwrap();
        (tape, loss, vars, w)
    };
    let (tape, loss, vars, weights) = scalar(inputs, None);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, var) in vars.iter().enumerate() {
        let analytic = to_f64(grads.get(*var).expect("input reaches loss"));
        let numeric = numeric_grad(&inputs[i], h, |perturbed| {
            let mut vals = inputs.to_vec();
            vals[i] = perturbed.clone();
            let (tape, loss, _, _) = scalar(&vals, Some(&weights));
            tape.value(loss).item().to_f64_lossy()
        });
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

const H64: f64 = 1e-4;
const TOL64: f64 = 1e-5;

#[test]
fn matmul_matches_triple_loop_oracle() {
    let mut r = rng(3);
    let a: Tensor<f64> = random_tensor(&mut r, &[5, 7], 1.0);
    let b: Tensor<f64> = random_tensor(&mut r, &[7, 3], 1.0);
    let c = kernels::matmul(&a, &b).unwrap();
    for i in 0..5 {
        for j in 0..3 {
            let expected: f64 = (0..7).map(|t| a.data()[i * 7 + t] * b.data()[t * 3 + j]).sum();
            assert!((c.data()[i * 3 + j] - expected).abs() < 1e-6);
        }
    }
}

#[test]
fn batched_matmul_broadcasts_matrix() {
    let mut r = rng(4);
    let a: Tensor<f64> = random_tensor(&mut r, &[3, 4, 5], 1.0);
    let b: Tensor<f64> = random_tensor(&mut r, &[5, 2], 1.0);
    let c = kernels::matmul(&a, &b).unwrap();
    assert_eq!(c.shape(), &[3, 4, 2]);
    for bi in 0..3 {
        let slice = Tensor::new(vec![4, 5], a.data()[bi * 20..(bi + 1) * 20].to_vec()).unwrap();
        let single = kernels::matmul(&slice, &b).unwrap();
        assert_eq!(single.data(), &c.data()[bi * 8..(bi + 1) * 8]);
    }
}

#[test]
fn grad_matmul_softmax_composite() {
    let mut r = rng(10);
    let a: Tensor<f64> = random_tensor(&mut r, &[2, 3, 4], 1.0);
    let b: Tensor<f64> = random_tensor(&mut r, &[2, 4, 5], 1.0);
    let err = grad_check(&[a, b], H64, 11, |t, v| {
        let m = t.matmul(v[0], v[1]).unwrap();
        t.softmax_lastdim(m).unwrap()
    });
    assert!(err <= TOL64, "relative error {err}");
}

#[test]
fn grad_conv2d_weights_bias_and_input() {
    let mut r = rng(12);
    for (spec, cin, cout, k) in [
        (ConvSpec::new(1, 1, 1), 2, 3, 3),
        (ConvSpec::new(2, 1, 1), 3, 2, 3),
        (ConvSpec::new(1, 1, 4), 4, 4, 3),
        (ConvSpec::new(4, 3, 1), 3, 2, 7),
    ] {
        let x: Tensor<f64> = random_tensor(&mut r, &[cin, 7, 6], 1.0);
        let w: Tensor<f64> = random_tensor(&mut r, &[cout, cin / spec.groups, k, k], 0.5);
        let b: Tensor<f64> = random_tensor(&mut r, &[cout], 0.5);
        let err = grad_check(&[x, w, b], H64, 13, |t, v| t.conv2d(v[0], v[1], Some(v[2]), spec).unwrap());
        assert!(err <= TOL64, "{spec:?}: relative error {err}");
    }
}

#[test]
fn grad_norms_activations_and_resize() {
    let mut r = rng(20);
    let x: Tensor<f64> = random_tensor(&mut r, &[4, 6], 2.0);
    let g: Tensor<f64> = random_tensor(&mut r, &[6], 1.0);
    let b: Tensor<f64> = random_tensor(&mut r, &[6], 1.0);
    let err = grad_check(&[x, g, b], H64, 21, |t, v| t.layer_norm(v[0], v[1], v[2], 1e-6).unwrap());
    assert!(err <= TOL64, "layer norm {err}");

    let x: Tensor<f64> = random_tensor(&mut r, &[4, 3, 3], 2.0);
    let g: Tensor<f64> = random_tensor(&mut r, &[4], 1.0);
    let b: Tensor<f64> = random_tensor(&mut r, &[4], 1.0);
    let err = grad_check(&[x, g, b], H64, 22, |t, v| t.group_norm(v[0], v[1], v[2], 2, 1e-5).unwrap());
    assert!(err <= TOL64, "group norm {err}");

    let x: Tensor<f64> = random_tensor(&mut r, &[3, 5], 3.0);
    let err = grad_check(&[x], H64, 23, |t, v| t.gelu(v[0]).unwrap());
    assert!(err <= TOL64, "gelu {err}");

    for (oh, ow) in [(8, 8), (3, 7), (2, 2)] {
        let x: Tensor<f64> = random_tensor(&mut r, &[2, 4, 5], 1.0);
        let err = grad_check(&[x], H64, 24, |t, v| t.bilinear_resize(v[0], oh, ow).unwrap());
        assert!(err <= TOL64, "resize to {oh}×{ow}: {err}");
    }
}

#[test]
fn grad_structural_and_elementwise_ops() {
    let mut r = rng(30);
    let a: Tensor<f64> = random_tensor(&mut r, &[2, 3, 4], 1.0);
    let err = grad_check(&[a.clone()], H64, 31, |t, v| t.permute(v[0], &[2, 0, 1]).unwrap());
    assert!(err <= TOL64);
    let err = grad_check(&[a.clone()], H64, 32, |t, v| t.reshape(v[0], &[6, 4]).unwrap());
    assert!(err <= TOL64);

    let b = a.map(|v| v.abs() + 0.5);
    let err = grad_check(&[a.clone(), b], H64, 33, |t, v| {
        let m = t.mul(v[0], v[1]).unwrap();
        let d = t.div(m, v[1]).unwrap();
        let d = t.div(d, v[1]).unwrap();
        let s = t.add_scalar(d, 0.3).unwrap();
        t.scale(s, -1.7).unwrap()
    });
    assert!(err <= TOL64);

    let x: Tensor<f64> = random_tensor(&mut r, &[5, 3], 1.0);
    let bias: Tensor<f64> = random_tensor(&mut r, &[3], 1.0);
    let err = grad_check(&[x, bias], H64, 34, |t, v| t.add_bias(v[0], v[1]).unwrap());
    assert!(err <= TOL64);

    let p: Tensor<f64> = random_tensor(&mut r, &[2, 2, 3], 1.0);
    let q: Tensor<f64> = random_tensor(&mut r, &[3, 2, 3], 1.0);
    let err = grad_check(&[p, q], H64, 35, |t, v| t.concat0(&[v[0], v[1]]).unwrap());
    assert!(err <= TOL64);

    // Keep values away from zero where relu has a kink.
    let x = Tensor::<f64>::from_fn(vec![10], |i| if i % 2 == 0 { 0.3 + i as f64 } else { -0.4 - i as f64 });
    let err = grad_check(&[x], H64, 36, |t, v| t.relu(v[0]).unwrap());
    assert!(err <= TOL64);
}

#[test]
fn grad_cross_entropy_with_ignored_pixels() {
    let mut r = rng(40);
    let logits: Tensor<f64> = random_tensor(&mut r, &[3, 2, 3], 2.0);
    let target = [0u8, 255, 2, 1, 255, 0];
    let err = grad_check(&[logits], H64, 41, |t, v| {
        let (loss, n) = t.cross_entropy(v[0], &target, 255).unwrap();
        assert_eq!(n, 4);
        let ones = t.constant(Tensor::ones(vec![1])).unwrap();
        let l = t.reshape(loss, &[1]).unwrap();
        t.mul(l, ones).unwrap()
    });
    assert!(err <= TOL64);
}

#[test]
fn conv_rejects_input_smaller_than_kernel() {
    let x = Tensor::<f32>::zeros(vec![1, 2, 2]);
    let w = Tensor::<f32>::zeros(vec![1, 1, 3, 3]);
    assert!(matches!(kernels::conv2d(&x, &w, None, ConvSpec::new(1, 0, 1)), Err(Error::Dimension(_))));
}

#[test]
fn square_sum_gradient_is_analytic() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::from_f64(vec![3], &[1.0, 2.0, 3.0]).unwrap()).unwrap();
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum(sq).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn backward_requires_scalar_loss() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::ones(vec![2])).unwrap();
    assert!(matches!(tape.backward(x), Err(Error::Dimension(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..9, seed in any::<u64>(), scale in 0.1f64..50.0) {
        let mut r = rng(seed);
        let x: Tensor<f64> = random_tensor(&mut r, &[rows, cols], scale);
        let y = kernels::softmax_lastdim(&x);
        for row in y.data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            prop_assert!(row.iter().all(|&v| v > 0.0 && v <= 1.0));
        }
    }

    #[test]
    fn conv_output_shape_follows_floor_formula(
        h in 1usize..20, w in 1usize..20, k in 1usize..6, s in 1usize..4, p in 0usize..3,
    ) {
        prop_assume!(h + 2 * p >= k && w + 2 * p >= k);
        let x = Tensor::<f32>::zeros(vec![2, h, w]);
        let wt = Tensor::<f32>::zeros(vec![3, 2, k, k]);
        let y = kernels::conv2d(&x, &wt, None, ConvSpec::new(s, p, 1)).unwrap();
        prop_assert_eq!(y.shape(), &[3, (h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1][..]);
    }

    #[test]
    fn resize_to_own_shape_is_identity(c in 1usize..4, h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
        let mut r = rng(seed);
        let x: Tensor<f32> = random_tensor(&mut r, &[c, h, w], 5.0);
        prop_assert_eq!(kernels::bilinear_resize(&x, h, w).unwrap(), x);
    }

    #[test]
    fn matmul_is_exact_on_small_integers(m in 1usize..6, k in 1usize..6, n in 1usize..6, seed in any::<u64>()) {
        use rand::Rng;
        let mut r = rng(seed);
        let a = Tensor::<f64>::from_fn(vec![m, k], |_| f64::from(r.gen_range(-100i32..=100)));
        let b = Tensor::<f64>::from_fn(vec![k, n], |_| f64::from(r.gen_range(-100i32..=100)));
        let c = kernels::matmul(&a, &b).unwrap();
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for t in 0..k {
                    acc += a.data()[i * k + t] * b.data()[t * n + j];
                }
                prop_assert_eq!(c.data()[i * n + j], acc);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn conv_and_attention_gradients_hold_in_both_precisions(
        cin in 1usize..4, cout in 1usize..4, h in 3usize..6, w in 3usize..6, seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let x: Tensor<f64> = random_tensor(&mut r, &[cin, h, w], 1.0);
        let wt: Tensor<f64> = random_tensor(&mut r, &[cout, cin, 3, 3], 0.5);
        let spec = ConvSpec::new(1, 1, 1);
        let e64 = grad_check(&[x.clone(), wt.clone()], H64, seed, |t, v| {
            let y = t.conv2d(v[0], v[1], None, spec).unwrap();
            t.gelu(y).unwrap()
        });
        prop_assert!(e64 <= TOL64, "f64 error {}", e64);
        let e32 = grad_check(&[x.cast::<f32>(), wt.cast::<f32>()], 1e-2, seed, |t, v| {
            let y = t.conv2d(v[0], v[1], None, spec).unwrap();
            t.gelu(y).unwrap()
        });
        prop_assert!(e32 <= 1e-3, "f32 error {}", e32);

        let q: Tensor<f64> = random_tensor(&mut r, &[2, h, cin + 1], 1.0);
        let k: Tensor<f64> = random_tensor(&mut r, &[2, cin + 1, w], 1.0);
        let e64 = grad_check(&[q.clone(), k.clone()], H64, seed ^ 1, |t, v| {
            let s = t.matmul(v[0], v[1]).unwrap();
            t.softmax_lastdim(s).unwrap()
        });
        prop_assert!(e64 <= TOL64, "f64 attention error {}", e64);
        let e32 = grad_check(&[q.cast::<f32>(), k.cast::<f32>()], 1e-2, seed ^ 1, |t, v| {
            let s = t.matmul(v[0], v[1]).unwrap();
            t.softmax_lastdim(s).unwrap()
        });
        prop_assert!(e32 <= 1e-3, "f32 attention error {}", e32);
    }
}
