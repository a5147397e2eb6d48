use dragsdf_core::augment::AugPolicy;
use dragsdf_core::geometry::DomainSpec;
use dragsdf_core::surrogate::*;
use dragsdf_core::voxelizer::SdfGrid;
use dragsdf_nn::{grad_check, Bound, ForwardCtx, GradCheckOptions, Mode, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn grid(dims: [usize; 3], seed: u64) -> SdfGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.iter().product();
    let values = (0..n).map(|_| rng.gen_range(-0.5f32..0.5)).collect();
    SdfGrid::new(dims, [0.0; 3], [0.1; 3], values, true).unwrap()
}

fn unit_scaler() -> Scaler {
    Scaler {
        input_mean: 0.0,
        input_std: 1.0,
        output_mean: 0.3,
        output_std: 0.01,
    }
}

#[test]
fn zero_input_gives_finite_output() {
    let cfg = ModelConfig::default().with_input_dims([64, 16, 16]);
    let mut m = SurrogateModel::build(cfg, 0).unwrap();
    m.set_scaler(unit_scaler());
    let g = SdfGrid::new([64, 16, 16], [0.0; 3], [0.1; 3], vec![0.0; 64 * 16 * 16], true).unwrap();
    let y = m.predict(&g).unwrap();
    assert!(y.is_finite());
}

#[test]
fn same_seed_same_weights() {
    let a = SurrogateModel::build(ModelConfig::miniature(), 7).unwrap();
    let b = SurrogateModel::build(ModelConfig::miniature(), 7).unwrap();
    let c = SurrogateModel::build(ModelConfig::miniature(), 8).unwrap();
    let vals = |m: &SurrogateModel| m.store().params().iter().flat_map(|p| p.values.clone()).collect::<Vec<f32>>();
    assert_eq!(vals(&a), vals(&b));
    assert_ne!(vals(&a), vals(&c));
}

#[test]
fn predict_rejects_wrong_dims_and_missing_scaler() {
    let mut m = SurrogateModel::build(ModelConfig::miniature(), 0).unwrap();
    let g = grid([16, 8, 8], 1);
    assert!(matches!(m.predict(&g), Err(ModelError::MissingScaler)));
    m.set_scaler(unit_scaler());
    assert!(m.predict(&g).is_ok());
    let bad = grid([8, 8, 16], 1);
    assert!(matches!(m.predict(&bad), Err(ModelError::DimsMismatch { .. })));
}

#[test]
fn batch_prediction_matches_single() {
    let mut m = SurrogateModel::build(ModelConfig::miniature(), 3).unwrap();
    m.set_scaler(unit_scaler());
    let gs: Vec<SdfGrid> = (0..3).map(|i| grid([16, 8, 8], i)).collect();
    let refs: Vec<&SdfGrid> = gs.iter().collect();
    let batch = m.predict_batch(&refs).unwrap();
    for (g, b) in gs.iter().zip(batch) {
        assert!((m.predict(g).unwrap() - b).abs() < 1e-12);
    }
}

#[test]
fn checkpoint_round_trip() {
    let mut m = SurrogateModel::build(ModelConfig::miniature(), 5).unwrap();
    m.set_scaler(unit_scaler());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let domain = DomainSpec::default_fleet().with_dims([16, 8, 8]);
    save_checkpoint(&m, Some(domain.clone()), None, &path).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck.meta.encoder_blocks, 6);
    assert_eq!(ck.meta.parameter_count, m.num_parameters());
    assert_eq!(ck.meta.domain, Some(domain));
    let g = grid([16, 8, 8], 9);
    assert_eq!(ck.model.predict(&g).unwrap(), m.predict(&g).unwrap());
    // re-encoding the loaded model gives the same bytes
    assert_eq!(
        encode_checkpoint(&ck.model, ck.meta.domain.clone(), None).unwrap(),
        std::fs::read(&path).unwrap()
    );
}

#[test]
fn checkpoint_errors() {
    let mut m = SurrogateModel::build(ModelConfig::miniature(), 5).unwrap();
    m.set_scaler(unit_scaler());
    let bytes = encode_checkpoint(&m, None, None).unwrap();

    let cut = &bytes[..bytes.len() - 10];
    let err = decode_checkpoint(cut).err().unwrap();
    assert!(matches!(err, ModelError::Parse(_)), "{err}");
    assert!(matches!(decode_checkpoint(&bytes[..30]), Err(ModelError::Parse(_))));
    assert!(matches!(decode_checkpoint(&bytes[..5]), Err(ModelError::Parse(_))));

    let mut v2 = bytes.clone();
    v2[8] = 2;
    assert!(matches!(decode_checkpoint(&v2), Err(ModelError::VersionMismatch { found: 2 })));

    let rewrite = |f: &dyn Fn(&mut CheckpointMeta)| {
        let meta_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let mut meta: CheckpointMeta = serde_json::from_slice(&bytes[20..20 + meta_len]).unwrap();
        f(&mut meta);
        let json = serde_json::to_vec(&meta).unwrap();
        let mut out = bytes[..12].to_vec();
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&bytes[20 + meta_len..]);
        out
    };
    let missing = rewrite(&|m| {
        m.tensors.retain(|t| t.name != "fc1.linear.weight");
    });
    assert!(matches!(decode_checkpoint(&missing), Err(ModelError::MissingTensor(n)) if n == "fc1.linear.weight"));
    let reshaped = rewrite(&|m| {
        let t = m.tensors.iter_mut().find(|t| t.name == "stem.weight").unwrap();
        t.shape.reverse();
    });
    assert!(matches!(decode_checkpoint(&reshaped), Err(ModelError::TensorShape { .. })));
}

fn miniature_grad_check(mode: Mode) {
    let mut m = SurrogateModel::build(ModelConfig::miniature(), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    // non-trivial running statistics for the eval path
    for b in m.store_mut().buffers_mut() {
        let var = b.name.ends_with("var");
        b.values
            .iter_mut()
            .for_each(|v| *v = if var { rng.gen_range(0.5..2.0) } else { rng.gen_range(-0.2..0.2) });
    }
    let x: Vec<f64> = (0..2 * 16 * 8 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut inputs = vec![Tensor::new(&[2, 1, 8, 8, 16], x).unwrap()];
    inputs.extend(m.store().params().iter().map(|p| p.to_tensor()));
    let labels: Vec<String> = std::iter::once("input".to_string())
        .chain(m.store().params().iter().map(|p| p.name.clone()))
        .collect();
    let opts = GradCheckOptions {
        rel_step: 1e-5,
        tolerance: 1e-3,
        max_coords: Some(6),
        seed: 13,
    };
    let r = grad_check("miniature model", &inputs, &opts, |g, v| {
        let bound = Bound::from_vars(v[1..].to_vec(), m.store())?;
        let mut ctx = ForwardCtx::new(mode, 99);
        m.forward(g, &bound, &mut ctx, v[0]).map_err(|e| match e {
            ModelError::Nn(e) => e,
            other => panic!("{other}"),
        })
    })
    .unwrap()
    .with_labels(&labels);
    println!("{r}");
    assert!(r.passed(), "max rel error {}", r.max_rel_error());
}

#[test]
fn miniature_model_gradients_eval_mode() {
    miniature_grad_check(Mode::Eval);
}

#[test]
fn miniature_model_gradients_train_mode() {
    miniature_grad_check(Mode::Train);
}

fn memorize() -> (SurrogateModel, TrainReport, SdfGrid) {
    let mut cfg = ModelConfig::miniature();
    cfg.dropout = 0.0;
    cfg.survival_last = 1.0;
    let mut m = SurrogateModel::build(cfg, 0).unwrap();
    m.set_scaler(unit_scaler());
    let g = grid([16, 8, 8], 21);
    let samples = [TrainSample {
        key: 1,
        project: "P1".into(),
        grid: &g,
        cd: 0.2874,
    }];
    let tc = TrainConfig {
        epochs: 200,
        base_lr: 2e-5,
        max_lr: 2e-5,
        augment: AugPolicy::disabled(),
        ..TrainConfig::default()
    };
    let report = train(&mut m, &samples, &tc, |_| {}).unwrap();
    (m, report, g)
}

#[test]
fn single_sample_memorization() {
    let (m, report, g) = memorize();
    let scale = unit_scaler().output_std;
    let last = report.final_train_loss() * scale;
    assert!(last <= 1e-3, "train MAE {last}");
    assert_eq!(report.epochs.len(), 200);
    assert_eq!(report.selected_epoch, 200);
    let p = m.predict(&g).unwrap();
    assert!((p - 0.2874).abs() <= 1e-3, "prediction {p}");
}

#[test]
fn training_is_reproducible_with_augmentation() {
    let grids: Vec<SdfGrid> = (0..5).map(|i| grid([16, 8, 8], 40 + i)).collect();
    let samples: Vec<TrainSample> = grids
        .iter()
        .enumerate()
        .map(|(i, g)| TrainSample {
            key: i as u64,
            project: format!("P{}", i % 2),
            grid: g,
            cd: 0.28 + 0.01 * i as f64,
        })
        .collect();
    let run = || {
        let mut m = SurrogateModel::build(ModelConfig::miniature(), 1).unwrap();
        let refs: Vec<&SdfGrid> = grids.iter().collect();
        let cds: Vec<f64> = samples.iter().map(|s| s.cd).collect();
        m.set_scaler(fit_scalers(&refs, &cds).unwrap());
        let tc = TrainConfig {
            epochs: 3,
            batch_size: 2,
            validation_fraction: 0.2,
            ..TrainConfig::default()
        };
        let r = train(&mut m, &samples, &tc, |_| {}).unwrap();
        (r, encode_checkpoint(&m, None, None).unwrap())
    };
    let (r1, c1) = run();
    let (r2, c2) = run();
    assert_eq!(r1, r2);
    assert_eq!(c1, c2);
    assert!(r1.epochs.iter().all(|e| e.val_mae.is_some()));
    assert!(!r1.validation_ids.is_empty());
}

#[test]
fn invalid_train_config_is_rejected() {
    let mut m = SurrogateModel::build(ModelConfig::miniature(), 0).unwrap();
    m.set_scaler(unit_scaler());
    let g = grid([16, 8, 8], 1);
    let samples = [TrainSample {
        key: 0,
        project: "P".into(),
        grid: &g,
        cd: 0.3,
    }];
    for tc in [
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { epochs: 0, ..TrainConfig::default() },
    ] {
        assert!(matches!(
            train(&mut m, &samples, &tc, |_| {}),
            Err(ModelError::InvalidTrainConfig(_))
        ));
    }
}

#[test]
fn batch_norm_recalibration_ignores_history_and_chunking() {
    let mut m = SurrogateModel::build(ModelConfig::miniature(), 5).unwrap();
    m.set_scaler(unit_scaler());
    let gs: Vec<SdfGrid> = (0..7).map(|i| grid([16, 8, 8], 40 + i)).collect();
    let refs: Vec<&SdfGrid> = gs.iter().collect();
    let buffers = |m: &SurrogateModel| m.store().buffers().to_vec();

    let untouched = buffers(&m);
    m.recalibrate_batch_norm(&refs[..1], 4).unwrap();
    assert_eq!(buffers(&m), untouched);

    m.recalibrate_batch_norm(&refs, 7).unwrap();
    let whole = buffers(&m);
    assert_ne!(whole, untouched);
    let before = m.predict_batch(&refs).unwrap();

    for b in m.store_mut().buffers_mut() {
        b.values.iter_mut().for_each(|v| *v = 123.0);
    }
    m.recalibrate_batch_norm(&refs, 3).unwrap();
    for (a, b) in buffers(&m).iter().zip(&whole) {
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() <= 1e-5 * y.abs().max(1.0), "{} {x} {y}", a.name);
        }
    }
    for (a, b) in m.predict_batch(&refs).unwrap().iter().zip(&before) {
        assert!((a - b).abs() < 1e-6);
    }
    // running variances are positive and means are those of rectified inputs
    for b in m.store().buffers() {
        if b.name.ends_with("running_mean") {
            assert!(b.values.iter().all(|&v| v >= 0.0));
        } else {
            assert!(b.values.iter().all(|&v| v >= 0.0 && v.is_finite()));
        }
    }
}
