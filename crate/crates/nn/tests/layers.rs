use dragsdf_nn::{
    grad_check, stochastic_depth, ConvGeom, ForwardCtx, GradCheckOptions, Graph, Mode,
    MultiHeadAttention, ParamStore, Scse, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn opts(tol: f64) -> GradCheckOptions {
    GradCheckOptions {
        tolerance: tol,
        ..Default::default()
    }
}

#[test]
fn identity_kernel_reproduces_input() {
    let geom = ConvGeom::same(1, 1, 3, 1, 1).unwrap();
    let x = random(&[2, 1, 4, 5, 3], 1);
    let mut w = Tensor::zeros(&geom.weight_shape());
    w.data_mut()[13] = 1.0;
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w));
    let y = g.conv3d(xv, wv, None, geom).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn ones_kernel_sums_neighbourhood() {
    let geom = ConvGeom::same(1, 1, 3, 1, 1).unwrap();
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 1, 4, 4, 4], 1.0));
    let w = g.constant(Tensor::full(&geom.weight_shape(), 1.0));
    let y = g.conv3d(x, w, None, geom).unwrap();
    let v = g.value(y).data();
    // interior cell (1,1,1)
    assert_eq!(v[(4 + 1) * 4 + 1], 27.0);
    // corner sees a 2x2x2 neighbourhood
    assert_eq!(v[0], 8.0);
}

#[test]
fn strided_dilated_output_dims() {
    let geom = ConvGeom::same(2, 3, 3, 2, 2).unwrap();
    assert_eq!(geom.padding, 2);
    assert_eq!(geom.output_dims([8, 4, 5]).unwrap(), [4, 2, 3]);
    let one = ConvGeom::same(2, 3, 1, 2, 1).unwrap();
    assert_eq!(one.output_dims([8, 4, 5]).unwrap(), [4, 2, 3]);
}

#[test]
fn conv_shape_mismatch_is_an_error() {
    let geom = ConvGeom::same(2, 3, 3, 1, 1).unwrap();
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 3, 4, 4, 4]));
    let w = g.constant(Tensor::zeros(&geom.weight_shape()));
    assert!(g.conv3d(x, w, None, geom).is_err());
}

#[test]
fn conv_gradients_match_finite_differences() {
    let geom = ConvGeom::same(2, 3, 3, 1, 1).unwrap();
    let inputs = [
        random(&[1, 2, 4, 4, 4], 2),
        random(&geom.weight_shape(), 3),
        random(&[3], 4),
    ];
    let r = grad_check("conv3d", &inputs, &opts(1e-3), |g, v| {
        g.conv3d(v[0], v[1], Some(v[2]), geom)
    })
    .unwrap();
    println!("{r}");
    assert!(r.passed());
}

#[test]
fn strided_dilated_conv_gradients_match_finite_differences() {
    let geom = ConvGeom::same(2, 2, 3, 2, 2).unwrap();
    let inputs = [
        random(&[2, 2, 6, 5, 4], 5),
        random(&geom.weight_shape(), 6),
        random(&[2], 7),
    ];
    let r = grad_check("conv3d s2 d2", &inputs, &opts(1e-3), |g, v| {
        g.conv3d(v[0], v[1], Some(v[2]), geom)
    })
    .unwrap();
    println!("{r}");
    assert!(r.passed());
}

#[test]
fn linear_gradients_match_finite_differences() {
    let inputs = [random(&[3, 5], 8), random(&[4, 5], 9), random(&[4], 10)];
    let r = grad_check("linear", &inputs, &opts(1e-4), |g, v| g.linear(v[0], v[1], Some(v[2]))).unwrap();
    println!("{r}");
    assert!(r.passed());
}

#[test]
fn group_norm_standardizes_each_group() {
    let x = random(&[2, 6, 3, 2, 2], 11);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let gamma = g.constant(Tensor::full(&[6], 1.0));
    let beta = g.constant(Tensor::zeros(&[6]));
    let y = g.group_norm(xv, gamma, beta, 3).unwrap();
    for group in g.value(y).data().chunks(2 * 12) {
        let m = group.iter().sum::<f64>() / group.len() as f64;
        let var = group.iter().map(|v| (v - m).powi(2)).sum::<f64>() / group.len() as f64;
        assert!(m.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-3);
    }
}

#[test]
fn group_norm_of_constant_input_is_zero() {
    let mut g = Graph::new();
    let xv = g.constant(Tensor::full(&[1, 4, 2, 2, 2], 3.5));
    let gamma = g.constant(Tensor::full(&[4], 1.0));
    let beta = g.constant(Tensor::zeros(&[4]));
    let y = g.group_norm(xv, gamma, beta, 2).unwrap();
    assert!(g.value(y).data().iter().all(|v| *v == 0.0));
}

#[test]
fn group_norm_rejects_indivisible_channels() {
    let mut g = Graph::new();
    let xv = g.constant(Tensor::zeros(&[1, 6, 2, 2, 2]));
    let gamma = g.constant(Tensor::full(&[6], 1.0));
    let beta = g.constant(Tensor::zeros(&[6]));
    assert!(g.group_norm(xv, gamma, beta, 4).is_err());
}

#[test]
fn group_norm_gradients_match_finite_differences() {
    let inputs = [random(&[2, 4, 2, 3, 2], 12), random(&[4], 13), random(&[4], 14)];
    let r = grad_check("group_norm", &inputs, &opts(1e-3), |g, v| g.group_norm(v[0], v[1], v[2], 2)).unwrap();
    println!("{r}");
    assert!(r.passed());
}

#[test]
fn batch_norm_gradients_match_finite_differences() {
    let inputs = [random(&[5, 3], 15), random(&[3], 16), random(&[3], 17)];
    let r = grad_check("batch_norm train", &inputs, &opts(1e-3), |g, v| {
        Ok(g.batch_norm(v[0], v[1], v[2], None)?.0)
    })
    .unwrap();
    println!("{r}");
    assert!(r.passed());
    let (mean, var) = (vec![0.1, -0.2, 0.3], vec![0.5, 1.5, 2.0]);
    let r = grad_check("batch_norm eval", &inputs, &opts(1e-3), |g, v| {
        Ok(g.batch_norm(v[0], v[1], v[2], Some((&mean, &var)))?.0)
    })
    .unwrap();
    assert!(r.passed());
}

fn build_scse(channels: usize, reduction: usize) -> (ParamStore, Scse) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let scse = Scse::new(&mut store, "se", channels, reduction, &mut rng).unwrap();
    (store, scse)
}

fn with_params(store: &ParamStore, x: Tensor) -> Vec<Tensor> {
    let mut inputs = vec![x];
    inputs.extend(store.params().iter().map(|p| p.to_tensor()));
    inputs
}

#[test]
fn scse_gradients_match_finite_differences() {
    let (store, scse) = build_scse(4, 2);
    let inputs = with_params(&store, random(&[1, 4, 2, 2, 2], 20));
    let r = grad_check("scse", &inputs, &opts(1e-3), |g, v| {
        let bound = dragsdf_nn::Bound::from_vars(v[1..].to_vec(), &store)?;
        scse.forward(g, &bound, v[0])
    })
    .unwrap();
    println!("{r}");
    assert!(r.passed());
}

#[test]
fn scse_saturated_gates_pass_input_through() {
    let (mut store, scse) = build_scse(4, 2);
    // zero weights and huge biases drive both gates to 1
    for p in store.params_mut() {
        let fill = if p.name.ends_with("bias") { 1e3 } else { 0.0 };
        p.values.iter_mut().for_each(|v| *v = fill);
    }
    let x = random(&[1, 4, 2, 2, 2], 21);
    let mut g = Graph::new();
    let bound = store.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let y = scse.forward(&mut g, &bound, xv).unwrap();
    assert_eq!(g.value(y), &x);

    for p in store.params_mut() {
        let fill = if p.name.ends_with("bias") { -1e3 } else { 0.0 };
        p.values.iter_mut().for_each(|v| *v = fill);
    }
    let mut g = Graph::new();
    let bound = store.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let y = scse.forward(&mut g, &bound, xv).unwrap();
    assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-300));
}

#[test]
fn scse_composed_with_group_norm_gradients() {
    let (mut store, scse) = build_scse(4, 2);
    let gn = dragsdf_nn::GroupNorm::new(&mut store, "gn", 4, 2).unwrap();
    let inputs = with_params(&store, random(&[1, 4, 2, 2, 2], 22));
    let r = grad_check("scse o group_norm", &inputs, &opts(1e-3), |g, v| {
        let bound = dragsdf_nn::Bound::from_vars(v[1..].to_vec(), &store)?;
        let y = gn.forward(g, &bound, v[0])?;
        scse.forward(g, &bound, y)
    })
    .unwrap();
    println!("{r}");
    assert!(r.passed());
}

fn build_mha(embed: usize, heads: usize) -> (ParamStore, MultiHeadAttention) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mha = MultiHeadAttention::new(&mut store, "attn", embed, heads, &mut rng).unwrap();
    (store, mha)
}

#[test]
fn attention_single_token_is_value_then_output_projection() {
    let (store, mha) = build_mha(4, 2);
    let x = random(&[1, 1, 4], 30);
    let mut g = Graph::new();
    let bound = store.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let y = mha.forward(&mut g, &bound, xv).unwrap();
    let expected = {
        let v = mha.value.forward(&mut g, &bound, xv).unwrap();
        mha.output.forward(&mut g, &bound, v).unwrap()
    };
    for (a, b) in g.value(y).data().iter().zip(g.value(expected).data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn attention_is_permutation_equivariant() {
    let (store, mha) = build_mha(4, 2);
    let x = random(&[1, 3, 4], 31);
    let perm = [2, 0, 1];
    let mut px = Tensor::zeros(&[1, 3, 4]);
    for (dst, &src) in perm.iter().enumerate() {
        px.data_mut()[dst * 4..dst * 4 + 4].copy_from_slice(&x.data()[src * 4..src * 4 + 4]);
    }
    let mut g = Graph::new();
    let bound = store.bind(&mut g, false);
    let (a, b) = (g.constant(x), g.constant(px));
    let ya = mha.forward(&mut g, &bound, a).unwrap();
    let yb = mha.forward(&mut g, &bound, b).unwrap();
    for (dst, &src) in perm.iter().enumerate() {
        for c in 0..4 {
            let (u, v) = (g.value(yb).data()[dst * 4 + c], g.value(ya).data()[src * 4 + c]);
            assert!((u - v).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_gradients_match_finite_differences() {
    let (store, mha) = build_mha(4, 2);
    let inputs = with_params(&store, random(&[1, 3, 4], 32));
    let r = grad_check("multi_head_attention", &inputs, &opts(1e-3), |g, v| {
        let bound = dragsdf_nn::Bound::from_vars(v[1..].to_vec(), &store)?;
        mha.forward(g, &bound, v[0])
    })
    .unwrap();
    println!("{r}");
    assert!(r.passed());
}

#[test]
fn attention_rejects_indivisible_heads() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(MultiHeadAttention::new(&mut store, "a", 6, 4, &mut rng).is_err());
}

#[test]
fn token_reshape_and_pooling_gradients() {
    let inputs = [random(&[2, 3, 2, 1, 2], 40)];
    let r = grad_check("tokens", &inputs, &opts(1e-3), |g, v| {
        let t = g.to_tokens(v[0])?;
        let s = g.sigmoid(t);
        g.mean_tokens(s)
    })
    .unwrap();
    assert!(r.passed());
}

#[test]
fn mae_loss_value_and_gradient() {
    let mut g = Graph::new();
    let p = g.leaf(Tensor::new(&[3, 1], vec![1.0, -1.0, 0.5]).unwrap(), true);
    let loss = g.mae_loss(p, &[0.0, 0.0, 0.5]).unwrap();
    assert!((g.value(loss).data()[0] - 2.0 / 3.0).abs() < 1e-15);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(p).unwrap(), &[1.0 / 3.0, -1.0 / 3.0, 0.0]);
}

#[test]
fn dropout_scales_kept_values_and_is_identity_in_eval() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1000], 1.0));
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let y = g.dropout(x, 0.1, &mut rng).unwrap();
    let vals = g.value(y).data();
    assert!(vals.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.9).abs() < 1e-15));
    let dropped = vals.iter().filter(|v| **v == 0.0).count();
    assert!((50..150).contains(&dropped));

    let mut ctx = ForwardCtx::new(Mode::Eval, 0);
    let z = dragsdf_nn::dropout(&mut g, &mut ctx, x, 0.1).unwrap();
    assert_eq!(z, x);
}

fn sd_run(mode: Mode, seed: u64, p: f64, branch_scale: f64) -> Vec<f64> {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
    let mut ctx = ForwardCtx::new(mode, seed);
    let y = stochastic_depth(
        &mut g,
        &mut ctx,
        x,
        p,
        |g, _, x| Ok(g.scale(x, 2.0)),
        |g, _, x| Ok(g.scale(x, branch_scale)),
    )
    .unwrap();
    g.value(y).data().to_vec()
}

#[test]
fn stochastic_depth_full_survival_train_equals_eval() {
    for seed in 0..10 {
        assert_eq!(sd_run(Mode::Train, seed, 1.0, 3.0), sd_run(Mode::Eval, seed, 1.0, 3.0));
    }
}

#[test]
fn stochastic_depth_zero_branch_is_skip() {
    for mode in [Mode::Train, Mode::Eval] {
        for seed in 0..10 {
            assert_eq!(sd_run(mode, seed, 0.7, 0.0), vec![2.0, 4.0]);
        }
    }
}

#[test]
fn stochastic_depth_eval_is_expectation_of_train() {
    let p = 0.8;
    // two-point expectation: p (skip + branch) + (1 - p) skip
    let eval = sd_run(Mode::Eval, 0, p, 3.0);
    let expectation = [p * 5.0 + (1.0 - p) * 2.0, p * 10.0 + (1.0 - p) * 4.0];
    for (a, b) in eval.iter().zip(&expectation) {
        assert!((a - b).abs() < 1e-12);
    }
    // empirical mean of train outputs converges to the same value
    let n = 4000;
    let mean: f64 = (0..n).map(|s| sd_run(Mode::Train, s, p, 3.0)[0]).sum::<f64>() / n as f64;
    assert!((mean - expectation[0]).abs() < 0.05);
}

#[test]
fn stochastic_depth_rejects_invalid_survival() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1]));
    let mut ctx = ForwardCtx::new(Mode::Train, 0);
    let r = stochastic_depth(&mut g, &mut ctx, x, 0.0, |_, _, x| Ok(x), |_, _, x| Ok(x));
    assert!(r.is_err());
}

#[test]
fn grad_check_detects_a_wrong_gradient() {
    // maximum with a tie-breaking rule is fine, but a wrong scale is caught:
    // compare f(x) = 2x computed as scale(x, 2) against a graph whose value is
    // 2x but whose recorded op is scale(x, 1) + constant offset.
    let inputs = [random(&[4], 50)];
    let r = grad_check("broken", &inputs, &opts(1e-3), |g, v| {
        let doubled: Vec<f64> = g.value(v[0]).data().iter().map(|x| x * 2.0).collect();
        let offset = g.constant(Tensor::new(&[4], doubled.iter().zip(g.value(v[0]).data()).map(|(d, x)| d - x).collect())?);
        g.add(v[0], offset)
    })
    .unwrap();
    assert!(!r.passed());
}
