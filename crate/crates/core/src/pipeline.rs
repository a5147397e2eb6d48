//! Glue between manifests, meshes, grids, the model and the evaluation
//! harness. Used by the command-line tool and by end-to-end tests.

use std::collections::HashMap;

use crate::evaluation::{BaselineRef, EvalPair};
use crate::geometry::{center_in_domain, DomainSpec, TriMesh};
use crate::manifest::{Manifest, SampleRecord, Split};
use crate::surrogate::TrainSample;
use crate::voxelizer::{generate_sdf, SdfError, SdfGrid};

/// Stable 64-bit key for a sample id (FNV-1a), used to seed per-sample
/// augmentation streams independently of manifest order.
pub fn sample_key(sample_id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in sample_id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Centers the mesh in the domain, then samples its SDF.
pub fn voxelize(mesh: &TriMesh, domain: &DomainSpec) -> Result<SdfGrid, SdfError> {
    let centered = center_in_domain(mesh, domain)?;
    generate_sdf(&centered, domain)
}

/// Training examples for every train-split record. `grids` is parallel to
/// `records`.
pub fn train_samples<'a>(records: &[SampleRecord], grids: &'a [SdfGrid]) -> Vec<TrainSample<'a>> {
    records
        .iter()
        .zip(grids)
        .filter(|(r, _)| r.split == Split::Train)
        .map(|(r, g)| TrainSample {
            key: sample_key(&r.sample_id),
            project: r.project.clone(),
            grid: g,
            cd: r.cd.expect("train labels checked"),
        })
        .collect()
}

/// Reference values for direction accuracy: the labeled training
/// baseline of every group.
pub fn baseline_refs(manifest: &Manifest) -> Vec<BaselineRef> {
    let mut out: Vec<BaselineRef> = manifest
        .baseline_labels()
        .into_iter()
        .map(|(baseline_group, cd_baseline_true)| BaselineRef {
            baseline_group,
            cd_baseline_true,
        })
        .collect();
    out.sort_by(|a, b| a.baseline_group.cmp(&b.baseline_group));
    out
}

/// Pairs labeled test records with predictions looked up by sample id.
/// Records without a label or a prediction are skipped.
pub fn eval_pairs(records: &[SampleRecord], predictions: &HashMap<String, f64>) -> Vec<EvalPair> {
    records
        .iter()
        .filter(|r| r.split == Split::Test)
        .filter_map(|r| {
            Some(EvalPair {
                sample_id: r.sample_id.clone(),
                project: r.project.clone(),
                baseline_group: r.baseline_group.clone(),
                cd_true: r.cd?,
                cd_pred: *predictions.get(&r.sample_id)?,
            })
        })
        .collect()
}

/// MAE of always predicting `mean`.
pub fn constant_predictor_mae(pairs: &[EvalPair], mean: f64) -> f64 {
    pairs.iter().map(|p| (p.cd_true - mean).abs()).sum::<f64>() / pairs.len() as f64
}
