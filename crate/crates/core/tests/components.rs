mod common;

use common::gradcheck::{self, critic_case, critic_error, joint_case, joint_errors};
use common::uniform;
use dualimpute::fusion::{adaptive_mix, bce, confidence_signals, CrossPathAttention};
use dualimpute::gain::{causal_keep, critic_loss, Adversary, GainConfig, PenaltyGradMode, TemporalAttention};
use dualimpute::numerics::{ParamStore, Tape, Tensor, Var};
use dualimpute::routing::{mean_pool, missingness_rate, mr_column, route, GateNetwork, MissingnessEmbedder, Path, RoutingMode, FIXED_THRESHOLD};
use dualimpute::training::Variant;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn ablated_variants_keep_exact_gradients() {
    for variant in [Variant::NoMicePath, Variant::NoGainPath, Variant::StaticFusion, Variant::NoAdaptiveFusion] {
        let case = joint_case(40, variant);
        for (group, err) in joint_errors(&case) {
            assert!(err < 1e-3, "{variant:?} {group}: {err}");
        }
    }
}

#[test]
fn critic_gradient_matches_differences_over_seeds() {
    for seed in 10..14 {
        let err = critic_error(&critic_case(seed));
        assert!(err < 1e-3, "seed {seed}: {err}");
    }
}

#[test]
fn penalty_modes_agree() {
    let case = critic_case(7);
    let (v1, nested) = case.adversary.objective_grad(&case.real, &case.fake, &case.m, &case.u, &case.cfg).unwrap();
    let fd_cfg = GainConfig {
        penalty_grad: PenaltyGradMode::FiniteDifference,
        ..case.cfg.clone()
    };
    let (v2, fd) = case.adversary.objective_grad(&case.real, &case.fake, &case.m, &case.u, &fd_cfg).unwrap();
    assert_eq!(v1, v2);
    for (a, b) in nested.iter().zip(&fd) {
        assert!(common::max_rel_err(a, b, 1e-6) < 1e-4);
    }
}

#[test]
fn critic_loss_of_a_linear_critic() {
    // D(x, m) = x·w has ∇ₓD = w everywhere, so the penalty is (‖w‖ − 1)².
    let w = Tensor::from_vec(2, 1, vec![0.3, -0.4]).unwrap();
    let real = Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, -1.0]]).unwrap();
    let fake = Tensor::from_rows(&[vec![-1.0, 0.5], vec![2.0, 2.0]]).unwrap();
    let m = Tensor::full(&[2, 2], 1.0);
    let mut tape = Tape::new();
    let wv = tape.constant(w.clone());
    let critic = |t: &mut Tape, x: Var, _m: Var| t.matmul(x, wv);
    let loss = critic_loss(&mut tape, &critic, &real, &fake, &m, &[0.3, 0.8], 10.0).unwrap();
    let score = |x: &Tensor| x.matmul(&w).unwrap().sum() / 2.0;
    let want = score(&real) - score(&fake) + 10.0 * (0.5f64 - 1.0).powi(2);
    assert!((tape.scalar_value(loss) - want).abs() < 1e-12);
}

#[test]
fn generator_gradient_matches_differences() {
    for seed in 20..23 {
        assert!(gradcheck::generator_error(seed) < 1e-3);
    }
}

#[test]
fn critic_training_separates_real_from_fake() {
    let cfg = GainConfig {
        critic_hidden: 8,
        ..GainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut adv = Adversary::new(3, &cfg, &mut rng);
    let real = uniform(32, 3, 1.0, 2.0, 1);
    let fake = uniform(32, 3, -2.0, -1.0, 2);
    let m = Tensor::full(&[32, 3], 1.0);
    let first = adv.step(&real, &fake, &m, &cfg, &mut rng).unwrap();
    let mut last = first;
    for _ in 0..150 {
        last = adv.step(&real, &fake, &m, &cfg, &mut rng).unwrap();
    }
    assert!(last < first, "{first} -> {last}");
}

/// Direct loop implementation of causal attention for one sequence.
fn attention_oracle(store: &ParamStore, att: &TemporalAttention, h: &Tensor, ctx: &Tensor) -> Tensor {
    let (steps, e) = (h.rows(), h.cols());
    let q = ctx.matmul(store.get(att.wq)).unwrap();
    let k = h.matmul(store.get(att.wk)).unwrap();
    let v = h.matmul(store.get(att.wv)).unwrap();
    let mut out = Tensor::zeros(&[steps, e]);
    for i in 0..steps {
        let scores: Vec<f64> = (0..=i)
            .map(|j| (0..e).map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>() / (e as f64).sqrt())
            .collect();
        let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
        let z: f64 = w.iter().sum();
        for c in 0..e {
            out.set(i, c, (0..=i).map(|j| w[j] / z * v.get(j, c)).sum());
        }
    }
    out
}

#[test]
fn temporal_attention_matches_loop_oracle() {
    let (steps, dim, batch) = (5, 3, 2);
    let mut store = ParamStore::new();
    let att = TemporalAttention::new(&mut store, "a", dim, &mut ChaCha8Rng::seed_from_u64(1));
    let h = uniform(batch * steps, dim, -1.0, 1.0, 2);
    let ctx = uniform(batch * steps, dim, -1.0, 1.0, 3);
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let (hv, cv) = (tape.constant(h.clone()), tape.constant(ctx.clone()));
    let (out, _) = att.forward(&mut tape, &p, hv, cv, steps).unwrap();
    let out = tape.value(out);
    for b in 0..batch {
        let rows = |t: &Tensor| Tensor::from_vec(steps, dim, t.data()[b * steps * dim..(b + 1) * steps * dim].to_vec()).unwrap();
        let want = attention_oracle(&store, &att, &rows(&h), &rows(&ctx));
        for i in 0..steps {
            for c in 0..dim {
                assert!((out.get(b * steps + i, c) - want.get(i, c)).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn causal_keep_is_lower_triangular() {
    let k = causal_keep(2, 3);
    assert_eq!(k.shape(), [6, 3]);
    for r in 0..6 {
        for j in 0..3 {
            assert_eq!(k.get(r, j), (j <= r % 3) as u8 as f64);
        }
    }
}

#[test]
fn embedder_output_has_one_state_per_step_and_ignores_hidden_values() {
    let mut store = ParamStore::new();
    let emb = MissingnessEmbedder::new(&mut store, 4, &mut ChaCha8Rng::seed_from_u64(5));
    let x = uniform(3, 6, -1.0, 1.0, 6);
    let m = Tensor::from_vec(3, 6, (0..18).map(|k| (k % 4 != 1) as u8 as f64).collect()).unwrap();
    let run = |x: &Tensor| {
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let e = emb.forward(&mut tape, &p, x, &m).unwrap();
        let pooled = mean_pool(&mut tape, e, 6).unwrap();
        (tape.value(e).clone(), tape.value(pooled).clone())
    };
    let (e, pooled) = run(&x);
    assert_eq!(e.shape(), [18, 4]);
    assert_eq!(pooled.shape(), [3, 4]);
    for c in 0..4 {
        let mean = (0..6).map(|s| e.get(s, c)).sum::<f64>() / 6.0;
        assert!((pooled.get(0, c) - mean).abs() < 1e-12);
    }
    let mut hidden_changed = x.clone();
    for k in 0..18 {
        if m.data()[k] == 0.0 {
            hidden_changed.data_mut()[k] = 100.0;
        }
    }
    assert_eq!(run(&hidden_changed).0, e);
}

fn gate_at(mr: f64, raw: f64, pooled: &Tensor) -> f64 {
    let mut store = ParamStore::new();
    let gate = GateNetwork::new(&mut store, pooled.cols(), &mut ChaCha8Rng::seed_from_u64(8));
    store.set(gate.mr_raw, Tensor::scalar(raw)).unwrap();
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let pv = tape.constant(pooled.clone());
    let g = gate.gamma(&mut tape, &p, pv, &Tensor::from_vec(1, 1, vec![mr]).unwrap()).unwrap();
    tape.scalar_value(g)
}

fn two_branch_attention(bias: [Tensor; 2]) -> (ParamStore, CrossPathAttention) {
    let mut store = ParamStore::new();
    let cross = CrossPathAttention::new(&mut store, 4, 3, 3, 2, &mut ChaCha8Rng::seed_from_u64(9));
    store.set(cross.key_bias[0], bias[0].clone()).unwrap();
    store.set(cross.key_bias[1], bias[1].clone()).unwrap();
    (store, cross)
}

fn cross_weights(store: &ParamStore, cross: &CrossPathAttention, pooled: &Tensor, a: &Tensor, b: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let pv = tape.constant(pooled.clone());
    let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let (alpha, _) = cross.forward(&mut tape, &p, pv, &[(0, av), (1, bv)], None).unwrap();
    tape.value(alpha).clone()
}

#[test]
fn identical_branches_get_equal_weight() {
    let bias = uniform(1, 3, -1.0, 1.0, 10);
    let (store, cross) = two_branch_attention([bias.clone(), bias]);
    let pooled = uniform(5, 4, -1.0, 1.0, 11);
    let x = uniform(5, 3, -1.0, 1.0, 12);
    let alpha = cross_weights(&store, &cross, &pooled, &x, &x);
    for &a in alpha.data() {
        assert!((a - 0.5).abs() < 1e-12);
    }
}

#[test]
fn swapping_branches_with_their_biases_permutes_the_weights() {
    let (b0, b1) = (uniform(1, 3, -1.0, 1.0, 13), uniform(1, 3, -1.0, 1.0, 14));
    let pooled = uniform(5, 4, -1.0, 1.0, 15);
    let (xa, xb) = (uniform(5, 3, -1.0, 1.0, 16), uniform(5, 3, -1.0, 1.0, 17));
    let (s1, c1) = two_branch_attention([b0.clone(), b1.clone()]);
    let (s2, c2) = two_branch_attention([b1, b0]);
    let a = cross_weights(&s1, &c1, &pooled, &xa, &xb);
    let b = cross_weights(&s2, &c2, &pooled, &xb, &xa);
    for i in 0..5 {
        assert!((a.get(i, 0) - b.get(i, 1)).abs() < 1e-12);
        assert!((a.get(i, 1) - b.get(i, 0)).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fixed_routing_thresholds_the_rate(mr in prop::collection::vec(0.0f64..1.0, 1..20), gamma in 0.0f64..1.0) {
        let g = vec![gamma; mr.len()];
        let dec = route(&mr, &g, RoutingMode::Fixed, 0.5).unwrap();
        for (d, &r) in dec.iter().zip(&mr) {
            prop_assert_eq!(d.path == Path::Gain, r >= FIXED_THRESHOLD);
        }
    }

    #[test]
    fn learned_routing_thresholds_the_gate(gamma in prop::collection::vec(0.0f64..1.0, 1..20), tau in 0.05f64..0.95) {
        let mr = vec![0.0; gamma.len()];
        let dec = route(&mr, &gamma, RoutingMode::Learned, tau).unwrap();
        for (d, &g) in dec.iter().zip(&gamma) {
            prop_assert_eq!(d.path == Path::Gain, g >= tau);
        }
    }

    #[test]
    fn per_row_rate_counts_missing_cells(bits in prop::collection::vec(any::<bool>(), 1..40)) {
        let d = bits.len();
        let m = Tensor::from_vec(1, d, bits.iter().map(|&b| b as u8 as f64).collect()).unwrap();
        let missing = bits.iter().filter(|&&b| !b).count();
        prop_assert_eq!(mr_column(&m).item(), missing as f64 / d as f64);
        let mm = dualimpute::data::MaskMatrix::new(1, d, bits).unwrap();
        prop_assert_eq!(missingness_rate(&mm), missing as f64 / d as f64);
    }

    #[test]
    fn gate_is_non_decreasing_in_the_rate(a in 0.0f64..1.0, b in 0.0f64..1.0, raw in -3.0f64..3.0, seed in 0u64..50) {
        let pooled = uniform(1, 4, -1.0, 1.0, seed);
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(gate_at(lo, raw, &pooled) <= gate_at(hi, raw, &pooled));
    }

    #[test]
    fn adaptive_mix_is_convex(lambda in 0.0f64..=1.0, seed in 0u64..100) {
        let a = uniform(3, 4, -5.0, 5.0, seed);
        let b = uniform(3, 4, -5.0, 5.0, seed + 1000);
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::scalar(lambda));
        let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let out = adaptive_mix(&mut tape, l, av, bv).unwrap();
        for (k, &v) in tape.value(out).data().iter().enumerate() {
            let (x, y) = (a.data()[k], b.data()[k]);
            prop_assert!(v >= x.min(y) - 1e-12 && v <= x.max(y) + 1e-12);
            prop_assert!((v - (lambda * x + (1.0 - lambda) * y)).abs() < 1e-12);
        }
    }

    #[test]
    fn bce_is_non_negative_and_minimal_at_the_label(y in prop::bool::ANY, p in 0.001f64..0.999) {
        let y = y as u8 as f64;
        prop_assert!(bce(y, p) >= 0.0);
        prop_assert!(bce(y, y) <= bce(y, p));
    }
}

#[test]
fn confidence_signals_average_over_hidden_cells() {
    let truth = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    let imputed = Tensor::from_rows(&[vec![1.0, 5.0], vec![2.0, 4.0]]).unwrap();
    let m = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let (c_imp, c_task) = confidence_signals(&imputed, &truth, &m, &[], &[]).unwrap();
    assert_eq!(c_imp, (9.0 + 1.0) / 2.0);
    assert_eq!(c_task, 0.0);
}
