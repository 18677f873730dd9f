use insta_core::batchnorm::{batch_norm, BNState, BnMode};
use insta_core::generator::{channel_kernel, dynamic_kernel, spatial_kernel, Encoder, GeneratorParams};
use insta_core::gradcheck::analytic_grads;
use insta_core::insta::{adapt, context_summary, dynamic_conv_oracle, task_kernel, ContextParams, DynamicKernel, KernelKind};
use insta_core::msa::{gap_encode, msa_encode, FrequencySelection};
use insta_core::ops;
use insta_core::Tensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn odd_k() -> impl Strategy<Value = usize> {
    prop_oneof![Just(1usize), Just(3), Just(5)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn unfold_center_tap_is_the_input(c in 1usize..4, h in 1usize..7, w in 1usize..7, k in odd_k(), seed: u64) {
        let s = Tensor::uniform(&[c, h, w], 3.0, &mut rng(seed));
        let u = ops::unfold(&s, k).unwrap();
        let m = (k - 1) / 2;
        for ch in 0..c {
            for a in 0..h {
                for b in 0..w {
                    prop_assert_eq!(u.at(&[ch, a, b, m, m]), s.at(&[ch, a, b]));
                }
            }
        }
    }

    #[test]
    fn ones_kernel_is_a_box_filter(c in 1usize..3, h in 1usize..6, w in 1usize..6, k in odd_k(), seed: u64) {
        let s = Tensor::uniform(&[c, h, w], 1.0, &mut rng(seed));
        let u = ops::unfold(&s, k).unwrap();
        let out = ops::mean_over_tail(&ops::hadamard(&u, &Tensor::ones(u.shape())).unwrap(), 2).unwrap();
        let half = (k as isize - 1) / 2;
        for ch in 0..c {
            for a in 0..h as isize {
                for b in 0..w as isize {
                    let mut acc = 0.0;
                    for y in a - half..=a + half {
                        for x in b - half..=b + half {
                            if (0..h as isize).contains(&y) && (0..w as isize).contains(&x) {
                                acc += s.at(&[ch, y as usize, x as usize]);
                            }
                        }
                    }
                    let want = acc / (k * k) as f64;
                    prop_assert!((out.at(&[ch, a as usize, b as usize]) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn eval_batch_norm_ignores_batch_mates(n in 2usize..6, pick in 0usize..6, seed: u64) {
        let pick = pick % n;
        let mut r = rng(seed);
        let x = Tensor::uniform(&[n, 3, 2, 2], 2.0, &mut r);
        let mut st = BNState::new(3);
        st.running_mean = Tensor::uniform(&[3], 1.0, &mut r);
        st.running_var = Tensor::uniform(&[3], 1.0, &mut r).map(|v| v.abs() + 0.1);
        st.gamma = Tensor::uniform(&[3], 1.0, &mut r);
        st.mode = BnMode::Eval;
        let full = batch_norm(&x, &mut st).unwrap();
        let single = batch_norm(&x.select0(pick).reshape(&[1, 3, 2, 2]).unwrap(), &mut st).unwrap();
        let row = full.select0(pick);
        prop_assert_eq!(row.data(), single.data());
    }

    #[test]
    fn dc_selection_is_scaled_gap(c in 1usize..9, h in 1usize..7, w in 1usize..7, seed: u64) {
        let s = Tensor::uniform(&[c, h, w], 5.0, &mut rng(seed));
        let msa = insta_core::msa::encode_with(&s, &insta_core::msa::dc_weights(c, h, w)).unwrap();
        let gap = gap_encode(&s).unwrap();
        for (a, g) in msa.data().iter().zip(gap.data()) {
            prop_assert!((a - (h * w) as f64 * g).abs() < 1e-12);
        }
    }

    #[test]
    fn msa_is_linear(alpha in -3.0f64..3.0, beta in -3.0f64..3.0, seed: u64) {
        let mut r = rng(seed);
        let sel = FrequencySelection::lowest(16, 5, 5).unwrap();
        let (s1, s2) = (Tensor::uniform(&[32, 5, 5], 1.0, &mut r), Tensor::uniform(&[32, 5, 5], 1.0, &mut r));
        let mix = s1.zip_map(&s2, |a, b| alpha * a + beta * b).unwrap();
        let lhs = msa_encode(&mix, &sel).unwrap();
        let rhs = msa_encode(&s1, &sel).unwrap().zip_map(&msa_encode(&s2, &sel).unwrap(), |a, b| alpha * a + beta * b).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-10);
    }

    #[test]
    fn msa_is_equivariant_within_groups(group in 0usize..4, seed: u64) {
        let mut r = rng(seed);
        let (c, n) = (16, 4);
        let sel = FrequencySelection::lowest(n, 4, 4).unwrap();
        let s = Tensor::uniform(&[c, 4, 4], 1.0, &mut r);
        let size = c / n;
        let mut perm: Vec<usize> = (0..c).collect();
        perm[group * size..(group + 1) * size].shuffle(&mut r);
        let permuted = Tensor::stack(&perm.iter().map(|&i| s.select0(i)).collect::<Vec<_>>()).unwrap();
        let base = msa_encode(&s, &sel).unwrap();
        let moved = msa_encode(&permuted, &sel).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            prop_assert_eq!(moved.data()[i], base.data()[p]);
        }
    }

    #[test]
    fn generator_branches_are_broadcast_constant(seed: u64) {
        let mut r = rng(seed);
        let mut p = GeneratorParams::init(8, 0.25, 3, Encoder::Msa(FrequencySelection::for_shape(8, 4, 4).unwrap()), seed).unwrap();
        p.set_mode(BnMode::Eval);
        let s = Tensor::uniform(&[8, 4, 4], 1.0, &mut r);
        let ch = channel_kernel(&s, &mut p).unwrap();
        let sp = spatial_kernel(&s, &mut p).unwrap();
        for c in 0..8 {
            for a in 0..4 {
                for b in 0..4 {
                    for t in 0..9 {
                        let (y, x) = (t / 3, t % 3);
                        prop_assert_eq!(ch.at(&[c, a, b, y, x]), ch.at(&[c, 0, 0, y, x]));
                        prop_assert_eq!(sp.at(&[c, a, b, y, x]), sp.at(&[0, a, b, y, x]));
                    }
                }
            }
        }
    }

    #[test]
    fn shared_generator_is_a_pure_function(seed: u64) {
        let mut r = rng(seed);
        let mut p = GeneratorParams::init(8, 0.25, 3, Encoder::Msa(FrequencySelection::for_shape(8, 3, 3).unwrap()), seed).unwrap();
        p.set_mode(BnMode::Eval);
        let s = Tensor::uniform(&[8, 3, 3], 1.0, &mut r);
        let as_instance = dynamic_kernel(&s, &mut p).unwrap();
        let as_task = task_kernel(&s, &mut p).unwrap();
        prop_assert_eq!(&as_instance, as_task.values());
    }

    #[test]
    fn oracle_equivalence(c in prop_oneof![Just(1usize), Just(8)], hw in prop_oneof![Just(3usize), Just(5), Just(7)], k in odd_k(), seed: u64) {
        let mut r = rng(seed);
        let f = Tensor::uniform(&[c, hw, hw], 1.0, &mut r);
        let g = DynamicKernel::new(Tensor::uniform(&[c, hw, hw, k, k], 1.0, &mut r), KernelKind::Insta).unwrap();
        let fast = adapt(&f, &g).unwrap().zip_map(&f, |a, x| a - x).unwrap();
        prop_assert!(fast.max_abs_diff(&dynamic_conv_oracle(&f, &g).unwrap()) < 1e-12);
    }

    #[test]
    fn oracle_is_linear_in_features(alpha in -4.0f64..4.0, k in odd_k(), seed: u64) {
        let mut r = rng(seed);
        let f = Tensor::uniform(&[3, 4, 4], 1.0, &mut r);
        let g = DynamicKernel::new(Tensor::uniform(&[3, 4, 4, k, k], 1.0, &mut r), KernelKind::Insta).unwrap();
        let lhs = dynamic_conv_oracle(&f.scale(alpha), &g).unwrap();
        let rhs = dynamic_conv_oracle(&f, &g).unwrap().scale(alpha);
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-10);
    }

    #[test]
    fn task_kernel_ignores_support_order(n in 2usize..8, seed: u64) {
        let mut r = rng(seed);
        let supports: Vec<Tensor> = (0..n).map(|_| Tensor::uniform(&[8, 3, 3], 1.0, &mut r)).collect();
        let mut shuffled = supports.clone();
        shuffled.shuffle(&mut r);
        let ctx = ContextParams::init(8, seed);
        let mut gen = GeneratorParams::init(8, 0.25, 3, Encoder::Msa(FrequencySelection::for_shape(8, 3, 3).unwrap()), seed).unwrap();
        let a = task_kernel(&context_summary(&supports, &ctx).unwrap(), &mut gen.clone()).unwrap();
        let b = task_kernel(&context_summary(&shuffled, &ctx).unwrap(), &mut gen).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn logit_shift_keeps_argmax_and_gradient(shift in -50.0f64..50.0, seed: u64) {
        let mut r = rng(seed);
        let logits = Tensor::uniform(&[4, 5], 3.0, &mut r);
        let labels = [0usize, 4, 2, 2];
        let mut shifted = logits.clone();
        let row = 1;
        for j in 0..5 {
            shifted.set(&[row, j], logits.at(&[row, j]) + shift);
        }
        let preds = insta_core::fsl::eval::predictions;
        prop_assert_eq!(preds(&logits), preds(&shifted));
        let ce = |g: &mut insta_core::Graph, v: &[insta_core::Var]| g.cross_entropy(v[0], &labels);
        let ga = analytic_grads(&ce, std::slice::from_ref(&logits)).unwrap();
        let gb = analytic_grads(&ce, std::slice::from_ref(&shifted)).unwrap();
        prop_assert!(ga[0].max_abs_diff(&gb[0]) < 1e-12);
        let loss = |t: &Tensor| ops::cross_entropy(t, &labels).unwrap();
        prop_assert!((loss(&logits) - loss(&shifted)).abs() < 1e-12);
    }
}
