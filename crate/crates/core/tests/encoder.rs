mod common;

use common::{numeric_grad, random_tensor, relative_error, rng, to_f64};
use gasformer::encoder::{EfficientSelfAttention, Encoder, MixFfn, OverlapPatchEmbed, TokenGrid};
use gasformer::nn::{Bound, ParamBuilder, ParamStore};
use gasformer::{EncoderConfig, Error, StageConfig, Tape, Tensor};
use proptest::prelude::*;

fn tiny_config(dim: usize) -> EncoderConfig {
    EncoderConfig::from_dims([dim; 4], [1; 4], [1, 1, 2, 2], [8, 4, 2, 1])
}

fn builder_for<T: gasformer::Element, R>(
    seed: u64,
    f: impl FnOnce(&mut ParamBuilder<'_, T>) -> R,
) -> (R, ParamStore<T>) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let out = {
        let mut b = ParamBuilder::new(&mut store, &mut r);
        f(&mut b)
    };
    (out, store)
}

fn set_param(store: &mut ParamStore<f64>, name: &str, value: impl Fn(usize) -> f64) {
    let id = store.find(name).unwrap_or_else(|| panic!("missing parameter {name}"));
    let t = store.value_mut(id);
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        *v = value(i);
    }
}

fn identity(dim: usize) -> impl Fn(usize) -> f64 {
    move |i| if i / dim == i % dim { 1.0 } else { 0.0 }
}

fn run_attention(
    attn: &EfficientSelfAttention,
    store: &ParamStore<f64>,
    tokens: &Tensor<f64>,
    h: usize,
    w: usize,
) -> (Tensor<f64>, Tensor<f64>) {
    let mut tape = Tape::new();
    let p: Bound = store.bind(&mut tape).unwrap();
    let x = tape.constant(tokens.clone()).unwrap();
    let out = attn.forward(&mut tape, &p, TokenGrid { tokens: x, h, w }).unwrap();
    (tape.value(out.out).clone(), tape.value(out.weights).clone())
}

/// Plain-loop multi-head attention with an explicit `n×n` weight matrix.
fn dense_attention(store: &ParamStore<f64>, x: &Tensor<f64>, dim: usize, heads: usize) -> Vec<f64> {
    let val = |name: &str| store.get(store.find(name).unwrap()).value.data().to_vec();
    let linear = |input: &[f64], wname: &str, bname: &str| -> Vec<f64> {
        let (w, b) = (val(wname), val(bname));
        let n = input.len() / dim;
        let mut out = vec![0.0; n * dim];
        for t in 0..n {
            for o in 0..dim {
                let mut acc = b[o];
                for i in 0..dim {
                    acc += input[t * dim + i] * w[i * dim + o];
                }
                out[t * dim + o] = acc;
            }
        }
        out
    };
    let n = x.shape()[0];
    let q = linear(x.data(), "q.weight", "q.bias");
    let k = linear(x.data(), "k.weight", "k.bias");
    let v = linear(x.data(), "v.weight", "v.bias");
    let d = dim / heads;
    let mut ctx = vec![0.0; n * dim];
    for hd in 0..heads {
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| (0..d).map(|c| q[i * dim + hd * d + c] * k[j * dim + hd * d + c]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for c in 0..d {
                ctx[i * dim + hd * d + c] = (0..n).map(|j| exps[j] / z * v[j * dim + hd * d + c]).sum();
            }
        }
    }
    linear(&ctx, "proj.weight", "proj.bias")
}

#[test]
fn patch_embed_shapes_and_parameter_count() {
    let c1 = 32;
    let stage1 = StageConfig::with_geometry(0, c1, 1, 1, 8);
    let (embed, store) = builder_for::<f32, _>(1, |b| OverlapPatchEmbed::new(b, 3, &stage1, 1e-6).unwrap());
    assert_eq!(embed.num_params(), 3 * c1 * 49 + c1 + 2 * c1);
    assert_eq!(store.numel(), embed.num_params());

    let mut tape = Tape::new();
    let p = store.bind(&mut tape).unwrap();
    let x = tape.constant(Tensor::zeros(vec![3, 512, 512])).unwrap();
    let grid = embed.forward(&mut tape, &p, x).unwrap();
    assert_eq!((grid.h, grid.w), (128, 128));

    let stage2 = StageConfig::with_geometry(1, 16, 1, 1, 4);
    let (embed, store) = builder_for::<f32, _>(2, |b| OverlapPatchEmbed::new(b, 8, &stage2, 1e-6).unwrap());
    let mut tape = Tape::new();
    let p = store.bind(&mut tape).unwrap();
    let x = tape.constant(Tensor::zeros(vec![8, 64, 64])).unwrap();
    let grid = embed.forward(&mut tape, &p, x).unwrap();
    assert_eq!((grid.h, grid.w), (32, 32));
    assert_eq!(tape.shape(grid.tokens), &[32 * 32, 16]);
}

#[test]
fn patch_embed_handles_the_smallest_input() {
    // With (7, 4, 3) geometry any extent of at least one pixel satisfies H + 2p >= k.
    let stage1 = StageConfig::with_geometry(0, 8, 1, 1, 1);
    let (embed, store) = builder_for::<f32, _>(1, |b| OverlapPatchEmbed::new(b, 3, &stage1, 1e-6).unwrap());
    let mut tape = Tape::new();
    let p = store.bind(&mut tape).unwrap();
    let x = tape.constant(Tensor::zeros(vec![3, 1, 1])).unwrap();
    let grid = embed.forward(&mut tape, &p, x).unwrap();
    assert_eq!((grid.h, grid.w), (1, 1));
}

#[test]
fn single_token_attention_returns_the_value_row() {
    let dim = 4;
    let (attn, mut store) = builder_for::<f64, _>(3, |b| EfficientSelfAttention::new(b, dim, 2, 1, 1e-6).unwrap());
    for name in ["q", "k", "v", "proj"] {
        set_param(&mut store, &format!("{name}.weight"), identity(dim));
    }
    let x = Tensor::from_f64(vec![1, dim], &[0.5, -1.5, 2.0, 3.25]).unwrap();
    let (out, weights) = run_attention(&attn, &store, &x, 1, 1);
    assert_eq!(out.data(), x.data());
    assert!(weights.data().iter().all(|&w| w == 1.0));
}

#[test]
fn zero_query_gives_uniform_attention() {
    let dim = 6;
    let (attn, mut store) = builder_for::<f64, _>(4, |b| EfficientSelfAttention::new(b, dim, 3, 1, 1e-6).unwrap());
    set_param(&mut store, "q.weight", |_| 0.0);
    set_param(&mut store, "v.weight", identity(dim));
    set_param(&mut store, "proj.weight", identity(dim));
    let mut r = rng(5);
    let x: Tensor<f64> = random_tensor(&mut r, &[12, dim], 2.0);
    let (out, _) = run_attention(&attn, &store, &x, 3, 4);
    for c in 0..dim {
        let mean: f64 = (0..12).map(|t| x.data()[t * dim + c]).sum::<f64>() / 12.0;
        for t in 0..12 {
            assert!((out.data()[t * dim + c] - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn reduced_attention_shrinks_key_count() {
    let dim = 8;
    let (attn, store) = builder_for::<f64, _>(6, |b| EfficientSelfAttention::new(b, dim, 2, 4, 1e-6).unwrap());
    let mut r = rng(7);
    let x: Tensor<f64> = random_tensor(&mut r, &[8 * 16, dim], 1.0);
    let (out, weights) = run_attention(&attn, &store, &x, 8, 16);
    assert_eq!(out.shape(), &[128, dim]);
    assert_eq!(weights.shape(), &[2, 128, 8]);
}

#[test]
fn attention_config_errors() {
    let r1 = builder_for::<f32, _>(0, |b| EfficientSelfAttention::new(b, 10, 3, 1, 1e-6).map(|_| ())).0;
    assert!(matches!(r1, Err(Error::Config { .. })));
    let r2 = builder_for::<f32, _>(0, |b| EfficientSelfAttention::new(b, 8, 2, 0, 1e-6).map(|_| ())).0;
    assert!(matches!(r2, Err(Error::Config { .. })));
}

#[test]
fn mix_ffn_with_zero_weights_is_passthrough() {
    let dim = 4;
    let (ffn, mut store) = builder_for::<f64, _>(8, |b| MixFfn::new(b, dim, 4).unwrap());
    let names: Vec<String> = store.iter().map(|(_, p)| p.name.clone()).collect();
    for name in names {
        set_param(&mut store, &name, |_| 0.0);
    }
    let mut r = rng(9);
    let x: Tensor<f64> = random_tensor(&mut r, &[15, dim], 3.0);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape).unwrap();
    let xv = tape.constant(x.clone()).unwrap();
    let y = ffn.forward(&mut tape, &p, TokenGrid { tokens: xv, h: 3, w: 5 }).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn mix_ffn_depthwise_kernel_gradient_matches_finite_differences() {
    let dim = 3;
    let (ffn, store) = builder_for::<f64, _>(10, |b| MixFfn::new(b, dim, 2).unwrap());
    let mut r = rng(11);
    let x: Tensor<f64> = random_tensor(&mut r, &[20, dim], 1.0);
    let weights: Tensor<f64> = random_tensor(&mut r, &[20, dim], 1.0);
    let kernel_id = store.find("dwconv.weight").unwrap();

    let loss_of = |store: &ParamStore<f64>| -> (f64, Option<Tensor<f64>>) {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape).unwrap();
        let xv = tape.constant(x.clone()).unwrap();
        let y = ffn.forward(&mut tape, &p, TokenGrid { tokens: xv, h: 4, w: 5 }).unwrap();
        let wv = tape.constant(weights.clone()).unwrap();
        let prod = tape.mul(y, wv).unwrap();
        let loss = tape.sum(prod).unwrap();
        let value = tape.value(loss).item();
        let g = tape.backward(loss).unwrap();
        (value, g.get(p.var(kernel_id)).cloned())
    };
    let analytic = to_f64(&loss_of(&store).1.unwrap());
    let kernel = store.get(kernel_id).value.clone();
    let numeric = numeric_grad(&kernel, 1e-4, |k| {
        let mut s = store.clone();
        *s.value_mut(kernel_id) = k.clone();
        loss_of(&s).0
    });
    let err = relative_error(&analytic, &numeric);
    assert!(err <= 1e-5, "relative error {err}");
}

#[test]
fn encode_produces_quarter_to_thirty_second_grids() {
    let cfg = tiny_config(8);
    let (enc, store) = builder_for::<f32, _>(12, |b| Encoder::new(b, &cfg).unwrap());
    for (side, expected) in [(512, [128, 64, 32, 16]), (32, [8, 4, 2, 1])] {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape).unwrap();
        let x = tape.constant(Tensor::zeros(vec![3, side, side])).unwrap();
        let f = enc.encode(&mut tape, &p, x).unwrap();
        for (i, m) in f.maps.iter().enumerate() {
            assert_eq!(tape.shape(*m), &[8, expected[i], expected[i]]);
        }
    }
}

#[test]
fn encode_rejects_indivisible_input() {
    let cfg = tiny_config(8);
    let (enc, store) = builder_for::<f32, _>(13, |b| Encoder::new(b, &cfg).unwrap());
    let mut tape = Tape::new();
    let p = store.bind(&mut tape).unwrap();
    let x = tape.constant(Tensor::zeros(vec![3, 48, 64])).unwrap();
    assert!(matches!(enc.encode(&mut tape, &p, x), Err(Error::Dimension(_))));
}

#[test]
fn same_weights_run_at_two_resolutions() {
    let cfg = EncoderConfig::from_dims([8, 16, 24, 32], [1; 4], [1, 2, 2, 4], [8, 4, 2, 1]);
    let (enc, store) = builder_for::<f32, _>(14, |b| Encoder::new(b, &cfg).unwrap());
    let mut r = rng(15);
    for side in [64, 128] {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape).unwrap();
        let x = tape.constant(random_tensor(&mut r, &[3, side, side], 1.0)).unwrap();
        let f = enc.encode(&mut tape, &p, x).unwrap();
        for (i, m) in f.maps.iter().enumerate() {
            let s = side >> (2 + i);
            assert_eq!(tape.shape(*m), &[cfg.dims()[i], s, s]);
        }
    }
}

#[test]
fn b0_encoder_parameter_total() {
    let (enc, store) = builder_for::<f32, _>(16, |b| Encoder::new(b, &EncoderConfig::b0()).unwrap());
    assert_eq!(enc.num_params(), store.numel());
    let m = enc.num_params() as f64 / 1e6;
    assert!((m - 3.32).abs() < 0.02, "encoder has {m} M parameters");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn unreduced_attention_matches_dense_oracle(
        heads in 1usize..4, head_dim in 1usize..4, h in 1usize..4, w in 1usize..5, seed in any::<u64>(),
    ) {
        let dim = heads * head_dim;
        let (attn, mut store) = builder_for::<f64, _>(seed, |b| EfficientSelfAttention::new(b, dim, heads, 1, 1e-6).unwrap());
        let mut r = rng(seed ^ 0x5eed);
        let names: Vec<String> = store.iter().map(|(_, p)| p.name.clone()).collect();
        for name in names {
            let id = store.find(&name).unwrap();
            let shape = store.get(id).value.shape().to_vec();
            *store.value_mut(id) = random_tensor(&mut r, &shape, 1.0);
        }
        let x: Tensor<f64> = random_tensor(&mut r, &[h * w, dim], 1.0);
        let (out, weights) = run_attention(&attn, &store, &x, h, w);
        let oracle = dense_attention(&store, &x, dim, heads);
        for (a, b) in out.data().iter().zip(&oracle) {
            prop_assert!((a - b).abs() <= 1e-5);
        }
        for row in weights.data().chunks(h * w) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn reduced_attention_rows_are_distributions(ratio in 1usize..4, hr in 1usize..3, wr in 1usize..3, seed in any::<u64>()) {
        let dim = 4;
        let (attn, store) = builder_for::<f64, _>(seed, |b| EfficientSelfAttention::new(b, dim, 2, ratio, 1e-6).unwrap());
        let mut r = rng(seed);
        let (h, w) = (hr * ratio, wr * ratio);
        let x: Tensor<f64> = random_tensor(&mut r, &[h * w, dim], 4.0);
        let (out, weights) = run_attention(&attn, &store, &x, h, w);
        prop_assert_eq!(out.shape(), &[h * w, dim][..]);
        for row in weights.data().chunks(hr * wr) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn mix_ffn_preserves_shape(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let (ffn, store) = builder_for::<f32, _>(seed, |b| MixFfn::new(b, 4, 4).unwrap());
        let mut r = rng(seed);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape).unwrap();
        let x = tape.constant(random_tensor(&mut r, &[h * w, 4], 1.0)).unwrap();
        let y = ffn.forward(&mut tape, &p, TokenGrid { tokens: x, h, w }).unwrap();
        prop_assert_eq!(tape.shape(y), &[h * w, 4][..]);
    }
}
