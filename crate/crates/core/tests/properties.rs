use std::sync::Arc;

use densecat::analysis::{effective_rank, hconcat, linear_cka};
use densecat::blocks::{build_feature_mixer, build_transition, micro_model, stochastic_depth, MixerConfig, TransitionConfig};
use densecat::cost::{breakdown, count_macs, count_params};
use densecat::graph::{forward, Mode, ParamStore};
use densecat::ops::conv::{conv2d, ConvSpec};
use densecat::ops::dense::{channel_rescale, softmax_cross_entropy};
use densecat::ops::pointwise::concat_channels;
use densecat::randnet::{build_randnet, randnet_costs, sample_pair, Budget, RandNetConfig, RandSpec, SpaceId};
use densecat::train::augment::{cutmix_box, cutmix_with, mixup_with, one_hot};
use densecat::train::optim::{adamw_step, AdamHyper};
use densecat::train::schedule::cosine_lr;
use densecat::zoo::{build_model, ModelConfig};
use densecat::{arch_json::serialize_architecture, Tape, Tensor};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let t = randn(&[rows * cols], seed);
    DMatrix::from_row_slice(rows, cols, t.data())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn concat_then_slice_is_exact(n in 1usize..3, c1 in 1usize..5, c2 in 1usize..5, hw in 1usize..5, seed in any::<u64>()) {
        let a = randn(&[n, c1, hw, hw], seed);
        let b = randn(&[n, c2, hw, hw], seed ^ 1);
        let cat = concat_channels(&[&a, &b]).unwrap();
        prop_assert_eq!(cat.channel_slice(0, c1).unwrap(), a);
        prop_assert_eq!(cat.channel_slice(c1, c2).unwrap(), b);
    }

    #[test]
    fn depthwise_unit_kernel_is_identity(c in 1usize..6, hw in 1usize..6, seed in any::<u64>()) {
        let x = randn(&[2, c, hw, hw], seed);
        let w = Tensor::<f64>::ones(&[c, 1, 1, 1]);
        prop_assert_eq!(conv2d(&x, &w, None, ConvSpec::new(1, 0, c)).unwrap(), x);
    }

    #[test]
    fn cross_entropy_nonnegative(n in 1usize..5, k in 2usize..8, seed in any::<u64>()) {
        let logits = randn(&[n, k], seed);
        let labels: Vec<usize> = (0..n).map(|i| (seed as usize + i) % k).collect();
        let y = one_hot(&labels, k).unwrap().to_f64();
        let (loss, _) = softmax_cross_entropy(&logits, &y, 0.0).unwrap();
        prop_assert!(loss >= 0.0);
    }

    #[test]
    fn mixer_width_and_stage_trace(c_in in 1usize..40, gr in 1usize..24, blocks in 1usize..7, interval in 0usize..4) {
        let g = build_feature_mixer(&MixerConfig::new(c_in, gr)).unwrap();
        prop_assert_eq!(g.channels()[g.output], c_in + gr);
        let cfg = densecat::blocks::DenseStageConfig {
            transition_interval: interval,
            ..densecat::blocks::DenseStageConfig::new(c_in, gr, blocks)
        };
        // independent recomputation: grow by GR, compress to ceil(c/2/8)·8
        let mut c = c_in;
        let mut expect = Vec::new();
        for i in 1..=blocks {
            c += gr;
            expect.push(c);
            if interval > 0 && i % interval == 0 && i < blocks {
                c = (c as f64 / 2.0 / 8.0).ceil() as usize * 8;
                expect.push(c);
            }
        }
        prop_assert_eq!(cfg.channel_trace(), expect);
    }

    #[test]
    fn transition_outputs_are_multiples_of_eight(c in 1usize..2000, stride in 1usize..3) {
        let g = build_transition(&TransitionConfig::new(c, 0.5, stride)).unwrap();
        let out = g.channels()[g.output];
        prop_assert_eq!(out % 8, 0);
        prop_assert!(out >= c / 2);
    }

    #[test]
    fn rescale_with_zero_se_and_gamma_two_is_identity(c in 1usize..6, hw in 1usize..4, seed in any::<u64>()) {
        let x = randn(&[2, c, hw, hw], seed);
        let (y, _) = channel_rescale(&x, &Tensor::full(&[c], 2.0), &Tensor::zeros(&[c, c]), &Tensor::zeros(&[c])).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            prop_assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
        }
    }

    #[test]
    fn stochastic_depth_rate_zero_and_eval_leave_rng_alone(rate in 0.0f64..0.9, seed in any::<u64>()) {
        let x = randn(&[4, 3, 2, 2], seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let reference = rng.clone();
        prop_assert_eq!(stochastic_depth(&x, 0.0, Mode::Train, &mut rng).unwrap(), x.clone());
        prop_assert_eq!(stochastic_depth(&x, rate, Mode::Eval, &mut rng).unwrap(), x.clone());
        prop_assert_eq!(rng.next_u64(), reference.clone().next_u64());
    }

    #[test]
    fn cosine_schedule_shape(total in 2u64..200, warmup_frac in 0.0f64..0.5, lr in 1e-5f64..1.0) {
        let warmup = (warmup_frac * total as f64) as u64;
        let min = lr * 0.01;
        let mut prev = f64::INFINITY;
        for t in warmup..=total {
            let v = cosine_lr(t, total, warmup, lr, min);
            prop_assert!(v <= prev + 1e-15);
            prev = v;
        }
        prop_assert_eq!(cosine_lr(total, total, warmup, lr, min), min);
        if warmup > 0 {
            // the last warmup step lands on the peak the cosine starts from
            prop_assert!((cosine_lr(warmup - 1, total, warmup, lr, min) - cosine_lr(warmup, total, warmup, lr, min)).abs() < 1e-12);
        }
    }

    #[test]
    fn mixed_label_rows_sum_to_one(n in 2usize..8, k in 2usize..6, lambda in 0.0f64..1.0, seed in any::<u64>()) {
        let x = Tensor::<f32>::randn(&[n, 1, 6, 6], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let labels: Vec<usize> = (0..n).map(|i| (i * 7 + seed as usize) % k).collect();
        let y = one_hot(&labels, k).unwrap();
        let perm: Vec<usize> = (0..n).rev().collect();
        let (_, ym) = mixup_with(&x, &y, lambda, &perm).unwrap();
        let cut = cutmix_box(lambda, 6, 6, &mut ChaCha8Rng::seed_from_u64(seed));
        let (_, yc) = cutmix_with(&x, &y, cut, &perm).unwrap();
        for t in [ym, yc] {
            for row in t.data().chunks(k) {
                prop_assert_eq!(row.iter().sum::<f32>(), 1.0);
            }
        }
    }

    #[test]
    fn adamw_zero_grad_zero_decay_is_identity(w in prop::collection::vec(-5.0f64..5.0, 1..10), step in 1u64..50) {
        let mut x = w.clone();
        let g = vec![0.0; w.len()];
        let (mut m, mut v) = (vec![0.0; w.len()], vec![0.0; w.len()]);
        let h = AdamHyper { lr: 1e-2, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 };
        adamw_step("w", &mut x, &g, &mut m, &mut v, step, h).unwrap();
        prop_assert_eq!(x, w);
    }

    #[test]
    fn cka_symmetric_and_scale_invariant(rows in 4usize..30, c1 in 1usize..6, c2 in 1usize..6, s in 0.01f64..100.0, seed in any::<u64>()) {
        let x = matrix(rows, c1, seed);
        let y = matrix(rows, c2, seed ^ 9);
        let base = linear_cka(&x, &y).unwrap();
        prop_assert!((0.0..=1.0).contains(&base));
        prop_assert!((linear_cka(&y, &x).unwrap() - base).abs() < 1e-6);
        prop_assert!((linear_cka(&(&x * s), &y).unwrap() - base).abs() < 1e-6);
        prop_assert!((linear_cka(&x, &(&y * s)).unwrap() - base).abs() < 1e-6);
    }

    #[test]
    fn rank_monotone_under_concat_and_bounded(rows in 2usize..25, c1 in 1usize..10, c2 in 1usize..10, rank_x in 1usize..10, seed in any::<u64>()) {
        // X with a planted rank, Y arbitrary
        let r = rank_x.min(c1).min(rows);
        let x = matrix(rows, r, seed) * matrix(r, c1, seed ^ 3);
        let y = matrix(rows, c2, seed ^ 5);
        let tol = 1e-6 * (rows as f64).sqrt();
        let rx = effective_rank(&x, tol).unwrap();
        let rxy = effective_rank(&hconcat(&x, &y).unwrap(), tol).unwrap();
        prop_assert!(rxy >= rx);
        prop_assert!(rx <= rows.min(c1));
        prop_assert!(rxy <= rows.min(c1 + c2));
    }
}

fn small_model() -> impl Strategy<Value = ModelConfig> {
    (1usize..4, prop::collection::vec(4usize..17, 1..4), 1usize..3, any::<bool>()).prop_map(
        |(stem_mult, grs, groups, rescale)| ModelConfig {
            stem_channels: 8 * stem_mult,
            blocks: vec![3 * groups; grs.len()],
            growth_rates: grs,
            channel_rescale: rescale,
            num_classes: 5,
            ..ModelConfig::rdnet_t()
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn model_costs_are_consistent(cfg in small_model()) {
        let g = build_model(&cfg).unwrap();
        let shape = [1, 3, 64, 64];
        let rows = breakdown(&g, shape).unwrap();
        prop_assert_eq!(count_params(&g), rows.iter().map(|r| r.params).sum::<u64>());
        prop_assert_eq!(count_macs(&g, shape).unwrap(), rows.iter().map(|r| r.macs).sum::<u64>());
        let big = breakdown(&g, [1, 3, 128, 128]).unwrap();
        for (a, b) in big.iter().zip(&rows) {
            if a.kind == "conv2d" {
                prop_assert_eq!(a.macs, 4 * b.macs, "{}", a.layer);
            }
        }
        prop_assert_eq!(serialize_architecture(&g).unwrap(), serialize_architecture(&build_model(&cfg).unwrap()).unwrap());
        for s in &g.meta.stages[1..] {
            prop_assert_eq!(s.in_channels % 8, 0);
        }
        for s in &g.meta.stages {
            for (i, c) in s.channel_trace.iter().enumerate() {
                // every 4th entry of a 3-block interval trace is a transition output
                if (i + 1) % 4 == 0 {
                    prop_assert_eq!(c % 8, 0);
                }
            }
        }
    }

    #[test]
    fn pairs_share_choices_and_fit_budget(seed in any::<u64>(), space in 0usize..5) {
        let id = [SpaceId::A, SpaceId::B, SpaceId::C, SpaceId::D, SpaceId::E][space];
        let spec = RandSpec { depth: [2, 8], ..RandSpec::space(id) };
        let budget = Budget { max_params: 150_000, max_macs: 150_000_000, max_activation_bytes: 3_000_000 };
        let pair = sample_pair(&spec, &budget, seed).unwrap();
        let (a, c) = (&pair.add.config, &pair.concat.config);
        prop_assert_eq!(a.depth, c.depth);
        prop_assert_eq!(a.kernel, c.kernel);
        prop_assert_eq!(a.activation, c.activation);
        prop_assert_eq!(a.norm, c.norm);
        prop_assert_eq!(a.block_kind, c.block_kind);
        for net in [&pair.add, &pair.concat] {
            // re-cost from the stored JSON
            let cfg: RandNetConfig = serde_json::from_str(&serde_json::to_string(&net.config).unwrap()).unwrap();
            let costs = randnet_costs(&build_randnet(&cfg).unwrap(), spec.input_size).unwrap();
            prop_assert_eq!(costs, net.costs);
            prop_assert!(budget.admits(&costs));
        }
    }
}

#[test]
fn backward_is_deterministic() {
    let g = micro_model().unwrap();
    let params = ParamStore::<f64>::init(&g, 5);
    let x = randn(&[2, 2, 6, 6], 8);
    let grads = || {
        let mut p = params.clone();
        let mut tape = Tape::new();
        let input = tape.param(Arc::new(x.clone()));
        let pass = forward(&g, &mut p, &mut tape, input, Mode::Train, None, &[]).unwrap();
        let loss = tape.sum(pass.output);
        let gr = tape.backward(loss).unwrap();
        let mut all = vec![gr.get(input)];
        for slots in &pass.params {
            all.extend(slots.iter().map(|v| gr.get(*v)));
        }
        all
    };
    assert_eq!(grads(), grads());
}
