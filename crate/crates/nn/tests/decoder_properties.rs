use std::rc::Rc;

use datamix_nn::gradcheck::check_gradients;
use datamix_nn::{
    apply_head, decoder_forward, decoder_logits, loss_and_gradients, token_mlp_cross_entropy, Architecture, AttnMask,
    DecoderConfig, HeadKind, NetworkParams, Tensor, TokenMlpConfig,
};
use proptest::prelude::*;

fn decoder(
    layers: usize,
    d_model: usize,
    heads: usize,
    input_dim: usize,
    output_dim: usize,
    head: HeadKind,
) -> DecoderConfig {
    DecoderConfig {
        layers,
        d_model,
        heads,
        ff_dim: 2 * d_model,
        input_dim,
        output_dim,
        max_context: 16,
        head,
        zero_init_head: false,
    }
}

fn features(len: usize, dim: usize, salt: u64) -> Vec<Vec<f64>> {
    (0..len)
        .map(|i| {
            (0..dim)
                .map(|j| (((i * dim + j) as f64 + salt as f64 * 0.37) * 0.913).sin())
                .collect()
        })
        .collect()
}

#[test]
fn paper_sized_actor_lands_near_two_million_parameters() {
    let cfg = DecoderConfig {
        ff_dim: 1152,
        ..decoder(2, 288, 8, 54, 52, HeadKind::Softmax)
    };
    let count = cfg.param_count();
    assert_eq!(count, 2_029_588);
    assert!((count as f64 - 2.1e6).abs() <= 0.2 * 2.1e6);
}

#[test]
fn init_is_deterministic_and_finite() {
    let arch = Architecture::Decoder(decoder(2, 16, 4, 5, 3, HeadKind::Softmax));
    let a = NetworkParams::init(arch.clone(), 42).unwrap();
    let b = NetworkParams::init(arch.clone(), 42).unwrap();
    let c = NetworkParams::init(arch, 43).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.content_hash(), b.content_hash());
    assert_ne!(a.content_hash(), c.content_hash());
    assert!(a.all_finite());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn outputs_never_depend_on_future_positions(
        layers in 1usize..3,
        heads_pow in 0u32..3,
        len in 2usize..8,
        cut in 0usize..7,
        seed in 0u64..1000,
    ) {
        let heads = 1usize << heads_pow;
        let cfg = decoder(layers, 8, heads, 3, 4, HeadKind::Softmax);
        let p = NetworkParams::init(Architecture::Decoder(cfg), seed).unwrap();
        let cut = cut % (len - 1);
        let base = features(len, 3, seed);
        let mut changed = base.clone();
        for row in changed.iter_mut().skip(cut + 1) {
            for v in row.iter_mut() {
                *v += 3.5;
            }
        }
        let a = decoder_forward(&p, &base).unwrap();
        let b = decoder_forward(&p, &changed).unwrap();
        for t in 0..=cut {
            prop_assert_eq!(&a[t], &b[t]);
        }
        for row in &a {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

fn mse_loss(p: &NetworkParams, input: &[Vec<f64>], target: &Tensor) -> f64 {
    let out = decoder_forward(p, input).unwrap();
    let pred = Tensor::from_rows(&out).unwrap();
    pred.data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

#[test]
fn decoder_gradients_match_finite_differences() {
    for (i, (layers, d, heads, head)) in [
        (1, 8, 2, HeadKind::Softmax),
        (2, 12, 3, HeadKind::Sigmoid),
        (2, 6, 1, HeadKind::Linear),
    ]
    .into_iter()
    .enumerate()
    {
        let cfg = decoder(layers, d, heads, 4, 3, head);
        let p = NetworkParams::init(Architecture::Decoder(cfg.clone()), 100 + i as u64).unwrap();
        let input = features(5, 4, i as u64);
        let target = Tensor::from_rows(&features(5, 3, 50 + i as u64))
            .unwrap()
            .map(|x| 0.5 + 0.4 * x);
        let (_, grads) = loss_and_gradients(&p, |g, bound| {
            let x = g.constant(Tensor::from_rows(&input).unwrap());
            let logits = decoder_logits(g, bound, &cfg, x, &[0, 1, 2, 3, 4], Rc::new(AttnMask::causal(5)))?;
            let out = apply_head(g, cfg.head, logits);
            let t = g.constant(target.clone());
            let diff = g.sub(out, t);
            let sq = g.square(diff);
            Ok(g.sum(sq))
        })
        .unwrap();
        let report = check_gradients(&p, &grads, |q| mse_loss(q, &input, &target), 50, 7 + i as u64, 1e-5);
        assert!(report.within(1e-4, 1e-8), "{:?}", report.worst);
    }
}

#[test]
fn mse_gradient_vanishes_when_output_equals_target() {
    let cfg = decoder(1, 8, 2, 3, 4, HeadKind::Softmax);
    let p = NetworkParams::init(Architecture::Decoder(cfg.clone()), 5).unwrap();
    let input = features(3, 3, 1);
    let target = Tensor::from_rows(&decoder_forward(&p, &input).unwrap()).unwrap();
    let (loss, grads) = loss_and_gradients(&p, |g, bound| {
        let x = g.constant(Tensor::from_rows(&input).unwrap());
        let logits = decoder_logits(g, bound, &cfg, x, &[0, 1, 2], Rc::new(AttnMask::causal(3)))?;
        let out = apply_head(g, cfg.head, logits);
        let t = g.constant(target.clone());
        let diff = g.sub(out, t);
        let sq = g.square(diff);
        Ok(g.sum(sq))
    })
    .unwrap();
    assert_eq!(loss, 0.0);
    assert!(grads.squared_norm().sqrt() < 1e-8);
}

#[test]
fn constant_offset_leaves_gradient_unchanged() {
    let cfg = TokenMlpConfig {
        vocab_size: 8,
        context: 2,
        embed_dim: 3,
        hidden_dim: 4,
    };
    let mut p = NetworkParams::init(Architecture::TokenMlp(cfg.clone()), 3).unwrap();
    // move off the zero-initialized head so every tensor carries gradient
    for i in 0..p.param_count() {
        p.set_scalar(i, p.scalar(i) + 0.01 * ((i as f64) * 1.3).sin());
    }
    let ctx = [8, 1, 1, 2, 2, 7, 7, 0];
    let tgt = [2, 7, 0, 5];
    let build = |offset: f64| {
        loss_and_gradients(&p, |g, bound| {
            let ce = token_mlp_cross_entropy(g, bound, &cfg, &ctx, &tgt)?;
            Ok(g.add_scalar(ce, offset))
        })
        .unwrap()
    };
    let (l0, g0) = build(0.0);
    let (l1, g1) = build(3.25);
    assert!((l1 - l0 - 3.25).abs() < 1e-12);
    assert_eq!(g0, g1);
}
