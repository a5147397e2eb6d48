use dragsdf_nn::{CyclicLr, ForwardCtx, Graph, Mode, ParamStore, RAdam, RAdamConfig, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #[test]
    fn cyclic_lr_stays_in_band(base in 1e-6f64..1e-2, span in 1.0f64..100.0, step in 1u64..500, it in 0u64..1_000_000) {
        let max = base * span;
        let s = CyclicLr::new(base, max, step).unwrap();
        let lr = s.lr(it);
        prop_assert!(lr >= base && lr <= max, "{}", lr);
    }

    #[test]
    fn radam_zero_gradient_is_a_no_op(vals in prop::collection::vec(-10.0f32..10.0, 1..20), steps in 1usize..12, lr in 1e-5f64..1e-1) {
        let mut store = ParamStore::new();
        let n = vals.len();
        store.add("w", &[n], vals);
        let before = store.clone();
        let mut opt = RAdam::new(RAdamConfig { weight_decay: 0.0, ..RAdamConfig::default() }, &store);
        for _ in 0..steps {
            opt.step(&mut store, &[vec![0.0; n]], lr).unwrap();
        }
        prop_assert_eq!(store, before);
    }

    #[test]
    fn group_norm_output_is_standardized(seed in 0u64..10_000, groups in prop::sample::select(vec![1usize, 2, 4]), scale in 1e-2f64..1e2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(&[2, 8, 3, 2, 2], |_| scale * rng.gen_range(-1.0..1.0) + 5.0);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let gamma = g.constant(Tensor::full(&[8], 1.0));
        let beta = g.constant(Tensor::zeros(&[8]));
        let y = g.group_norm(xv, gamma, beta, groups).unwrap();
        let per = 8 / groups * 12;
        for chunk in g.value(y).data().chunks(per) {
            let m = chunk.iter().sum::<f64>() / per as f64;
            let v = chunk.iter().map(|a| (a - m).powi(2)).sum::<f64>() / per as f64;
            prop_assert!(m.abs() <= 1e-5);
            prop_assert!((v - 1.0).abs() <= 1e-3);
        }
    }

    #[test]
    fn dropout_forward_is_keyed(seed in 0u64..10_000) {
        let x = Tensor::full(&[4, 16], 1.0);
        let run = || {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let mut ctx = ForwardCtx::new(Mode::Train, seed);
            let y = dragsdf_nn::dropout(&mut g, &mut ctx, xv, 0.3).unwrap();
            g.value(y).data().to_vec()
        };
        prop_assert_eq!(run(), run());
    }
}
