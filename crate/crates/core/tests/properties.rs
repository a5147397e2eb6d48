use std::collections::HashMap;

use dragsdf_core::augment::*;
use dragsdf_core::evaluation::*;
use dragsdf_core::geometry::*;
use dragsdf_core::primitives::{cuboid, icosphere};
use dragsdf_core::surrogate::Scaler;
use dragsdf_core::synthfleet::*;
use dragsdf_core::voxelizer::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_domain() -> DomainSpec {
    DomainSpec::centered([3.0, 1.6, 1.6], [24, 12, 12])
}

fn arb_box() -> impl Strategy<Value = TriMesh> {
    (
        prop::array::uniform3(-2.0f64..2.0),
        (0.2f64..1.5, 0.2f64..0.8, 0.2f64..0.8),
    )
        .prop_map(|(o, (a, b, c))| cuboid(o, [o[0] + a, o[1] + b, o[2] + c]))
}

fn ramp_grid(dims: [usize; 3], seed: u64) -> SdfGrid {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = dims.iter().product();
    let values = (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    SdfGrid::new(dims, [-1.0, -0.5, -0.5], [0.1, 0.2, 0.3], values, true).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn centering_is_idempotent(m in arb_box()) {
        let d = small_domain();
        let once = center_in_domain(&m, &d).unwrap();
        let twice = center_in_domain(&once, &d).unwrap();
        prop_assert_eq!(once.vertices(), twice.vertices());
        let c = compute_bbox(&once).center();
        let dc = d.bbox.center();
        for k in 0..3 {
            prop_assert!((c[k] - dc[k]).abs() <= 1e-9 * d.bbox.diagonal());
        }
    }

    #[test]
    fn stl_round_trip_preserves_winding(m in arb_box()) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.stl");
        write_stl(&m, &p).unwrap();
        let back = load_mesh(&p, false).unwrap();
        prop_assert!(back.signed_volume() > 0.0);
        prop_assert!((back.signed_volume() - m.signed_volume()).abs() < 1e-4 * m.signed_volume());
        prop_assert_eq!(back.triangles().len(), m.triangles().len());
    }

    #[test]
    fn box_sdf_membership_and_lipschitz(ext in (0.4f64..2.4, 0.3f64..1.2, 0.3f64..1.2)) {
        let d = small_domain();
        let m = center_in_domain(&cuboid([0.0; 3], [ext.0, ext.1, ext.2]), &d).unwrap();
        let g = generate_sdf(&m, &d).unwrap();
        let b = compute_bbox(&m);
        let diag = (g.spacing[0].powi(2) + g.spacing[1].powi(2) + g.spacing[2].powi(2)).sqrt();
        let [nx, ny, nz] = g.dims;
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let p = g.cell_center(i, j, k);
                    let v = g.get(i, j, k) as f64;
                    // analytic box distance
                    let q: Vec<f64> = (0..3).map(|a| (p[a] - b.center()[a]).abs() - b.extent()[a] / 2.0).collect();
                    let outside = q.iter().map(|x| x.max(0.0).powi(2)).sum::<f64>().sqrt();
                    let inside = q.iter().cloned().fold(f64::MIN, f64::max).min(0.0);
                    let analytic = -(outside + inside);
                    prop_assert!((v - analytic).abs() < 1e-5, "cell {:?}: {} vs {}", (i, j, k), v, analytic);
                    if analytic.abs() > 1e-6 {
                        prop_assert_eq!(v > 0.0, analytic > 0.0);
                    }
                    for (di, dj, dk) in [(1, 0, 0), (0, 1, 0), (0, 0, 1)] {
                        if i + di < nx && j + dj < ny && k + dk < nz {
                            let w = g.get(i + di, j + dj, k + dk) as f64;
                            prop_assert!((v - w).abs() <= diag + 1e-6);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn convention_flip_negates_every_value(seed in 0u64..1000) {
        let g = ramp_grid([5, 4, 3], seed);
        let f = g.with_convention(false);
        prop_assert!(!f.positive_inside);
        for (a, b) in g.values.iter().zip(&f.values) {
            prop_assert_eq!(*a, -*b);
        }
        prop_assert_eq!(f.with_convention(true), g);
    }

    #[test]
    fn every_operator_keeps_layout(seed in 0u64..500, op in prop::sample::select(AugOp::ALL.to_vec())) {
        let g = ramp_grid([20, 10, 8], seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = apply_op(&g, op, &AugRanges::default(), &mut rng);
        prop_assert!(out.same_layout(&g));
        prop_assert!(out.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn clamp_bounds_and_signs(seed in 0u64..1000, u in 1e-5f64..1.0) {
        let g = ramp_grid([6, 5, 4], seed);
        let t = clamp_threshold(&g, u);
        let out = clamp_with(&g, u);
        for (a, b) in g.values.iter().zip(&out.values) {
            prop_assert!(b.abs() <= t);
            prop_assert!(a.signum() == b.signum() || b.abs() == t);
        }
    }

    #[test]
    fn translate_inverse_restores_interior(seed in 0u64..1000, k in -5i64..=5) {
        let g = ramp_grid([128, 4, 4], seed);
        let back = translate_with(&translate_with(&g, k), -k);
        let m = k.unsigned_abs() as usize;
        for kk in 0..4 {
            for j in 0..4 {
                for i in m..128 - m {
                    prop_assert_eq!(back.get(i, j, kk), g.get(i, j, kk));
                }
            }
        }
    }

    #[test]
    fn dropout_changes_at_most_a_fifth(seed in 0u64..2000) {
        let mut g = ramp_grid([32, 16, 16], seed);
        // shift away from zero so that every dropped cell is visible
        g.values.iter_mut().for_each(|v| *v += 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = dropout_box_aug(&g, &AugRanges::default(), &mut rng);
        let changed = g.values.iter().zip(&out.values).filter(|(a, b)| a != b).count();
        prop_assert!(changed as f64 <= 0.2 * g.len() as f64);
    }

    #[test]
    fn policy_is_keyed(seed in 0u64..1000, id in 0u64..1000, epoch in 0u64..300) {
        let g = ramp_grid([16, 8, 8], 1);
        let p = AugPolicy { seed, ..AugPolicy::default() };
        prop_assert_eq!(apply_policy_traced(&g, &p, id, epoch), apply_policy_traced(&g, &p, id, epoch));
    }

    #[test]
    fn scaler_round_trip(y in -10.0f64..10.0, mean in -1.0f64..1.0, std in 1e-3f64..10.0) {
        let s = Scaler { input_mean: 0.0, input_std: 1.0, output_mean: mean, output_std: std };
        prop_assert!((s.destandardize_target(s.standardize_target(y)) - y).abs() <= 1e-9);
    }
}

fn arb_pairs() -> impl Strategy<Value = Vec<EvalPair>> {
    prop::collection::vec((0usize..3, 0usize..4, 0.2f64..0.4, 0.2f64..0.4), 1..40).prop_map(|rows| {
        rows.into_iter()
            .enumerate()
            .map(|(i, (p, g, t, q))| EvalPair {
                sample_id: format!("S{i}"),
                project: format!("P{p}"),
                baseline_group: format!("P{p}-G{g}"),
                cd_true: t,
                cd_pred: q,
            })
            .collect()
    })
}

fn baselines_for(pairs: &[EvalPair], skip: usize) -> Vec<BaselineRef> {
    let mut groups: Vec<&str> = pairs.iter().map(|p| p.baseline_group.as_str()).collect();
    groups.sort();
    groups.dedup();
    groups
        .into_iter()
        .enumerate()
        .filter(|(i, _)| i % 3 != skip)
        .map(|(i, g)| BaselineRef {
            baseline_group: g.to_string(),
            cd_baseline_true: 0.25 + 0.01 * i as f64,
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn metrics_are_permutation_invariant(pairs in arb_pairs(), seed in 0u64..1000) {
        use rand::seq::SliceRandom;
        let mut shuffled = pairs.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let b = baselines_for(&pairs, 9);
        prop_assert!((mae(&pairs).unwrap() - mae(&shuffled).unwrap()).abs() < 1e-12);
        prop_assert_eq!(maxae(&pairs).unwrap(), maxae(&shuffled).unwrap());
        let (d1, _) = compute_deltas(&pairs, &b);
        let (d2, _) = compute_deltas(&shuffled, &b);
        prop_assert_eq!(dpa(&d1).unwrap(), dpa(&d2).unwrap());
    }

    #[test]
    fn dpa_ignores_positive_scaling(pairs in arb_pairs(), scale in 1e-3f64..1e3) {
        let b = baselines_for(&pairs, 9);
        let (d, _) = compute_deltas(&pairs, &b);
        let scaled: Vec<DeltaRecord> = d
            .iter()
            .map(|r| {
                let (t, p) = (r.delta_true * scale, r.delta_pred * scale);
                DeltaRecord {
                    delta_true: t,
                    delta_pred: p,
                    direction_correct: sign(t) == sign(p),
                    quadrant: Quadrant::of(t, p),
                    ..r.clone()
                }
            })
            .collect();
        prop_assert_eq!(dpa(&d).unwrap(), dpa(&scaled).unwrap());
        prop_assert_eq!(
            d.iter().map(|r| r.quadrant).collect::<Vec<_>>(),
            scaled.iter().map(|r| r.quadrant).collect::<Vec<_>>()
        );
    }

    #[test]
    fn overall_mae_is_weighted_project_mean(pairs in arb_pairs()) {
        let r = build_report(&pairs, &baselines_for(&pairs, 9), 2).unwrap();
        let n: usize = r.projects.iter().map(|p| p.n).sum();
        let weighted: f64 = r.projects.iter().map(|p| p.mae * p.n as f64).sum::<f64>() / n as f64;
        prop_assert_eq!(n, pairs.len());
        prop_assert!((weighted - r.overall.mae).abs() < 1e-12);
    }

    #[test]
    fn deltas_exclude_exactly_orphans(pairs in arb_pairs(), skip in 0usize..3) {
        let b = baselines_for(&pairs, skip);
        let have: HashMap<&str, ()> = b.iter().map(|x| (x.baseline_group.as_str(), ())).collect();
        let (d, excluded) = compute_deltas(&pairs, &b);
        let expect: Vec<String> = pairs
            .iter()
            .filter(|p| !have.contains_key(p.baseline_group.as_str()))
            .map(|p| p.sample_id.clone())
            .collect();
        prop_assert_eq!(&excluded, &expect);
        prop_assert_eq!(d.len() + excluded.len(), pairs.len());
        // orphans still count toward MAE
        let r = build_report(&pairs, &b, 2).unwrap();
        prop_assert_eq!(r.overall.n, pairs.len());
    }

    #[test]
    fn pseudo_drag_is_continuous(t in 0.0f64..1.0, i in 0usize..NUM_PARAMS) {
        let mut a = ShapeParams::nominal().to_array();
        let (_, lo, hi) = PARAM_RANGES[i];
        a[i] = lo + t * (hi - lo);
        let base = pseudo_drag(&ShapeParams::from_array(a)).unwrap();
        let h = 1e-7 * (hi - lo);
        a[i] = (a[i] + h).min(hi);
        let next = pseudo_drag(&ShapeParams::from_array(a)).unwrap();
        prop_assert!((next - base).abs() < 1e-5);
    }
}

#[test]
fn slant_sensitivity_changes_sign_at_thirty_degrees() {
    let idx = PARAM_RANGES.iter().position(|r| r.0 == "rear_slant_deg").unwrap();
    let slope = |deg: f64| {
        let mut a = ShapeParams::nominal().to_array();
        a[idx] = deg - 0.01;
        let lo = pseudo_drag(&ShapeParams::from_array(a)).unwrap();
        a[idx] = deg + 0.01;
        let hi = pseudo_drag(&ShapeParams::from_array(a)).unwrap();
        hi - lo
    };
    assert!(slope(25.0) > 0.0);
    assert!(slope(35.0) < 0.0);
}

#[test]
fn fleet_groups_are_tighter_than_the_fleet() {
    let fleet = generate_fleet(&FleetSpec::default()).unwrap();
    let mut by_group: HashMap<String, Vec<f64>> = HashMap::new();
    for s in &fleet.samples {
        by_group.entry(s.record.baseline_group.clone()).or_default().push(s.record.cd.unwrap());
    }
    let std = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
    };
    let within: Vec<f64> = by_group.values().filter(|v| v.len() > 1).map(|v| std(v)).collect();
    let within = within.iter().sum::<f64>() / within.len() as f64;
    let means: Vec<f64> = by_group.values().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
    let between = std(&means);
    assert!(within < between, "within {within} between {between}");
}

#[test]
fn fleet_meshes_validate_and_voxelize() {
    let spec = FleetSpec {
        projects: vec![ProjectSpec { baselines: 3, train: 12, test: 6 }],
        seed: 17,
        ..FleetSpec::default()
    };
    let fleet = generate_fleet(&spec).unwrap();
    let d = DomainSpec::default_fleet().with_dims([32, 8, 8]);
    for m in fleet.meshes().unwrap() {
        assert!(m.is_closed_manifold(), "{}", m.name());
        assert_eq!(m.euler_characteristic(), 2);
        let g = generate_sdf(&center_in_domain(&m, &d).unwrap(), &d).unwrap();
        assert!(g.values.iter().any(|&v| v > 0.0));
    }
}

#[test]
fn icosphere_sign_matches_membership() {
    let d = DomainSpec::centered([1.6, 1.6, 1.6], [16, 16, 16]);
    let m = icosphere([0.0; 3], 0.5, 3);
    let g = generate_sdf(&m, &d).unwrap();
    let dev = max_chord_deviation(&m, [0.0; 3], 0.5);
    for k in 0..16 {
        for j in 0..16 {
            for i in 0..16 {
                let p = g.cell_center(i, j, k);
                let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
                if (r - 0.5).abs() > dev {
                    assert_eq!(g.get(i, j, k) > 0.0, r < 0.5);
                }
            }
        }
    }
}
