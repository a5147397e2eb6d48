//! Parameterized synthetic vehicles, an analytic pseudo-drag label and a
//! deterministic fleet with project / baseline-group structure.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::TriMesh;
use crate::manifest::{SampleRecord, Split};

#[derive(Debug, Error)]
pub enum FleetError {
    #[error("parameter {name} = {value} outside [{lo}, {hi}]")]
    OutOfRange { name: &'static str, value: f64, lo: f64, hi: f64 },
    #[error("self-intersecting profile: {0}")]
    SelfIntersection(String),
    #[error("infeasible fleet spec: {0}")]
    Infeasible(String),
}

pub type Result<T> = std::result::Result<T, FleetError>;

/// Number of shape parameters.
pub const NUM_PARAMS: usize = 8;

/// Legal parameter ranges, in [`ShapeParams::to_array`] order.
pub const PARAM_RANGES: [(&str, f64, f64); NUM_PARAMS] = [
    ("length", 3.8, 5.2),
    ("width", 1.7, 2.0),
    ("height", 1.4, 1.8),
    ("windshield_deg", 25.0, 40.0),
    ("rear_slant_deg", 10.0, 40.0),
    ("boot_length", 0.2, 0.8),
    ("clearance", 0.12, 0.25),
    ("chamfer", 0.02, 0.15),
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub windshield_deg: f64,
    pub rear_slant_deg: f64,
    pub boot_length: f64,
    pub clearance: f64,
    pub chamfer: f64,
}

impl ShapeParams {
    pub fn to_array(&self) -> [f64; NUM_PARAMS] {
        [
            self.length,
            self.width,
            self.height,
            self.windshield_deg,
            self.rear_slant_deg,
            self.boot_length,
            self.clearance,
            self.chamfer,
        ]
    }

    pub fn from_array(a: [f64; NUM_PARAMS]) -> Self {
        Self {
            length: a[0],
            width: a[1],
            height: a[2],
            windshield_deg: a[3],
            rear_slant_deg: a[4],
            boot_length: a[5],
            clearance: a[6],
            chamfer: a[7],
        }
    }

    /// Midpoint of every range.
    pub fn nominal() -> Self {
        Self::from_array(PARAM_RANGES.map(|(_, lo, hi)| 0.5 * (lo + hi)))
    }

    pub fn validate(&self) -> Result<()> {
        for (v, (name, lo, hi)) in self.to_array().into_iter().zip(PARAM_RANGES) {
            if !(v >= lo && v <= hi) {
                return Err(FleetError::OutOfRange { name, value: v, lo, hi });
            }
        }
        Ok(())
    }
}

/// Piecewise-linear tent peaking at 30 degrees.
pub fn slant_hat(theta_deg: f64) -> f64 {
    if theta_deg <= 30.0 {
        theta_deg / 30.0
    } else {
        (60.0 - theta_deg) / 30.0
    }
}

/// Analytic drag label; not a flow model.
pub fn pseudo_drag(p: &ShapeParams) -> Result<f64> {
    p.validate()?;
    Ok(pseudo_drag_unchecked(p))
}

pub fn pseudo_drag_unchecked(p: &ShapeParams) -> f64 {
    let h_eff = p.height - p.clearance;
    0.18 + 0.08 * (p.width * h_eff / (1.9 * 1.5) - 1.0)
        + 0.05 * slant_hat(p.rear_slant_deg)
        + 0.03 * (0.15 - p.chamfer) / 0.13
        + 0.02 * (p.clearance - 0.12) / 0.13
}

// ---------------------------------------------------------------------------
// mesh construction

type P2 = [f64; 2];

#[inline]
fn cross2(o: P2, a: P2, b: P2) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn len2(a: P2, b: P2) -> f64 {
    ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt()
}

/// Side profile in the XZ plane, counterclockwise, plus a flag per vertex
/// telling whether it is a body corner eligible for chamfering.
fn side_profile(p: &ShapeParams) -> Vec<(P2, bool)> {
    let (l, h, zb) = (p.length, p.height, p.clearance);
    let body = h - zb;
    let z_deck = zb + 0.45 * body;
    let hood_len = 0.18 * l;
    let slant_run = 0.12 * l;
    let slant_drop = slant_run * p.rear_slant_deg.to_radians().tan();
    let z_slant = h - slant_drop;
    let x_notch = l - p.boot_length;
    let x_slant_top = x_notch - slant_run;
    // keep at least this much flat roof; raise the hood if the windshield
    // would not fit otherwise
    let min_roof = 0.25;
    let tan_w = p.windshield_deg.to_radians().tan();
    let avail = x_slant_top - min_roof - hood_len;
    let z_hood = (zb + 0.5 * body).max(h - avail * tan_w);
    let x_roof = hood_len + (h - z_hood) / tan_w;

    let wheel = 0.6;
    let (xf, xr) = (0.2 * l, 0.8 * l);
    vec![
        ([0.0, zb], true),
        ([xf - 0.5 * wheel, zb], false),
        ([xf - 0.5 * wheel, 0.0], false),
        ([xf + 0.5 * wheel, 0.0], false),
        ([xf + 0.5 * wheel, zb], false),
        ([xr - 0.5 * wheel, zb], false),
        ([xr - 0.5 * wheel, 0.0], false),
        ([xr + 0.5 * wheel, 0.0], false),
        ([xr + 0.5 * wheel, zb], false),
        ([l, zb], true),
        ([l, z_deck], true),
        ([x_notch, z_deck], false),
        ([x_notch, z_slant], true),
        ([x_slant_top, h], true),
        ([x_roof, h], true),
        ([hood_len, z_hood], false),
        ([0.0, z_hood], true),
    ]
}

/// Cuts every flagged convex corner by `min(c, 0.3 * adjacent edge)`.
fn chamfer_profile(profile: &[(P2, bool)], c: f64) -> Vec<P2> {
    let n = profile.len();
    let mut out = Vec::with_capacity(2 * n);
    for i in 0..n {
        let (v, eligible) = profile[i];
        let a = profile[(i + n - 1) % n].0;
        let b = profile[(i + 1) % n].0;
        if !eligible || cross2(a, v, b) <= 0.0 {
            out.push(v);
            continue;
        }
        let (la, lb) = (len2(v, a), len2(v, b));
        let cut = c.min(0.3 * la).min(0.3 * lb);
        out.push([v[0] + cut * (a[0] - v[0]) / la, v[1] + cut * (a[1] - v[1]) / la]);
        out.push([v[0] + cut * (b[0] - v[0]) / lb, v[1] + cut * (b[1] - v[1]) / lb]);
    }
    out
}

fn signed_area(poly: &[P2]) -> f64 {
    let n = poly.len();
    0.5 * (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
}

fn segments_touch(a: P2, b: P2, c: P2, d: P2) -> bool {
    let d1 = cross2(c, d, a);
    let d2 = cross2(c, d, b);
    let d3 = cross2(a, b, c);
    let d4 = cross2(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    let on = |p: P2, q: P2, r: P2| {
        cross2(p, q, r) == 0.0
            && r[0] >= p[0].min(q[0])
            && r[0] <= p[0].max(q[0])
            && r[1] >= p[1].min(q[1])
            && r[1] <= p[1].max(q[1])
    };
    on(c, d, a) || on(c, d, b) || on(a, b, c) || on(a, b, d)
}

/// First pair of non-adjacent edges that touch, if any.
fn self_intersection(poly: &[P2]) -> Option<(usize, usize)> {
    let n = poly.len();
    for i in 0..n {
        for j in i + 1..n {
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            if segments_touch(poly[i], poly[(i + 1) % n], poly[j], poly[(j + 1) % n]) {
                return Some((i, j));
            }
        }
    }
    None
}

/// Moves every edge of a CCW polygon inward by `d`. `None` when an edge
/// flips or vanishes or the result self-intersects.
fn inset_polygon(poly: &[P2], d: f64) -> Option<Vec<P2>> {
    let n = poly.len();
    let dir = |i: usize| {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        let l = len2(a, b);
        [(b[0] - a[0]) / l, (b[1] - a[1]) / l]
    };
    let out: Vec<P2> = (0..n)
        .map(|i| {
            let (u, w) = (dir((i + n - 1) % n), dir(i));
            let (nu, nw) = ([-u[1], u[0]], [-w[1], w[0]]);
            let denom = u[0] * w[1] - u[1] * w[0];
            if denom.abs() < 1e-12 {
                return [poly[i][0] + d * nw[0], poly[i][1] + d * nw[1]];
            }
            // intersect the two shifted lines through poly[i]
            let pa = [poly[i][0] + d * nu[0], poly[i][1] + d * nu[1]];
            let pb = [poly[i][0] + d * nw[0], poly[i][1] + d * nw[1]];
            let t = ((pb[0] - pa[0]) * w[1] - (pb[1] - pa[1]) * w[0]) / denom;
            [pa[0] + t * u[0], pa[1] + t * u[1]]
        })
        .collect();
    for i in 0..n {
        let (a, b) = (out[i], out[(i + 1) % n]);
        let e = dir(i);
        if (b[0] - a[0]) * e[0] + (b[1] - a[1]) * e[1] <= 1e-9 {
            return None;
        }
    }
    if self_intersection(&out).is_some() || signed_area(&out) <= 0.0 {
        return None;
    }
    Some(out)
}

/// Ear clipping of a simple CCW polygon.
fn ear_clip(poly: &[P2]) -> Result<Vec<[usize; 3]>> {
    let mut idx: Vec<usize> = (0..poly.len()).collect();
    let mut tris = Vec::with_capacity(poly.len() - 2);
    while idx.len() > 3 {
        let m = idx.len();
        let ear = (0..m).find(|&k| {
            let (a, b, c) = (idx[(k + m - 1) % m], idx[k], idx[(k + 1) % m]);
            if cross2(poly[a], poly[b], poly[c]) <= 0.0 {
                return false;
            }
            idx.iter().all(|&o| {
                o == a || o == b || o == c || {
                    let q = poly[o];
                    !(cross2(poly[a], poly[b], q) >= 0.0 && cross2(poly[b], poly[c], q) >= 0.0 && cross2(poly[c], poly[a], q) >= 0.0)
                }
            })
        });
        let k = ear.ok_or_else(|| FleetError::SelfIntersection("no ear found while triangulating".into()))?;
        tris.push([idx[(k + m - 1) % m], idx[k], idx[(k + 1) % m]]);
        idx.remove(k);
    }
    tris.push([idx[0], idx[1], idx[2]]);
    Ok(tris)
}

/// Closed, outward-wound vehicle body: a chamfered side profile extruded
/// along Y with chamfered side edges, resting on two full-width wheel blocks.
/// The bounding box is `[0, L] x [-W/2, W/2] x [0, H]`.
pub fn build_shape_mesh(p: &ShapeParams) -> Result<TriMesh> {
    p.validate()?;
    let profile = chamfer_profile(&side_profile(p), p.chamfer);
    if let Some((i, j)) = self_intersection(&profile) {
        return Err(FleetError::SelfIntersection(format!("profile edges {i} and {j} cross")));
    }
    if signed_area(&profile) <= 0.0 {
        return Err(FleetError::SelfIntersection("profile is not counterclockwise".into()));
    }
    let mut c = p.chamfer;
    let inset = loop {
        if let Some(q) = inset_polygon(&profile, c) {
            break q;
        }
        c *= 0.5;
        if c < 1e-4 {
            return Err(FleetError::SelfIntersection("side chamfer inset failed".into()));
        }
    };

    let n = profile.len();
    let half = 0.5 * p.width;
    let layers: [(&[P2], f64); 4] = [(&inset, -half), (&profile, -(half - c)), (&profile, half - c), (&inset, half)];
    let mut vertices = Vec::with_capacity(4 * n);
    for (poly, y) in layers {
        for q in poly {
            vertices.push([q[0], y, q[1]]);
        }
    }
    let mut triangles: Vec<[u32; 3]> = Vec::with_capacity(8 * n);
    let at = |layer: usize, i: usize| (layer * n + i % n) as u32;
    for layer in 0..3 {
        for i in 0..n {
            let (a0, a1) = (at(layer, i), at(layer, i + 1));
            let (b0, b1) = (at(layer + 1, i), at(layer + 1, i + 1));
            triangles.push([a0, b1, a1]);
            triangles.push([a0, b0, b1]);
        }
    }
    for [a, b, cc] in ear_clip(&inset)? {
        triangles.push([at(0, a), at(0, b), at(0, cc)]);
        triangles.push([at(3, a), at(3, cc), at(3, b)]);
    }
    TriMesh::new("car", vertices, triangles).map_err(|e| FleetError::SelfIntersection(e.to_string()))
}

// ---------------------------------------------------------------------------
// fleet

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectSpec {
    pub baselines: usize,
    /// Training samples including the baselines.
    pub train: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FleetSpec {
    pub projects: Vec<ProjectSpec>,
    pub seed: u64,
    /// Project means are drawn uniformly within this central fraction of
    /// every range.
    pub project_spread: f64,
    /// Baselines deviate from their project mean by up to this fraction of
    /// every range.
    pub baseline_spread: f64,
    /// Maximum variation step per parameter, in [`ShapeParams::to_array`]
    /// order. A step is drawn in `[0.5, 1] * max` with random sign.
    pub step_sizes: [f64; NUM_PARAMS],
    /// Gaussian label noise in drag counts; 0 disables it.
    pub label_noise_counts: f64,
}

impl Default for FleetSpec {
    fn default() -> Self {
        Self {
            projects: vec![
                ProjectSpec { baselines: 16, train: 179, test: 45 },
                ProjectSpec { baselines: 7, train: 45, test: 11 },
                ProjectSpec { baselines: 4, train: 25, test: 7 },
                ProjectSpec { baselines: 3, train: 18, test: 4 },
                ProjectSpec { baselines: 2, train: 7, test: 2 },
            ],
            seed: 0,
            project_spread: 0.6,
            baseline_spread: 0.15,
            step_sizes: [0.15, 0.06, 0.06, 3.0, 6.0, 0.12, 0.035, 0.035],
            label_noise_counts: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FleetSample {
    pub record: SampleRecord,
    pub params: ShapeParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fleet {
    pub samples: Vec<FleetSample>,
}

impl Fleet {
    pub fn records(&self) -> Vec<SampleRecord> {
        self.samples.iter().map(|s| s.record.clone()).collect()
    }

    /// Meshes in sample order, built in parallel.
    pub fn meshes(&self) -> Result<Vec<TriMesh>> {
        self.samples
            .par_iter()
            .map(|s| {
                let mut m = build_shape_mesh(&s.params)?;
                m.set_name(&s.record.sample_id);
                Ok(m)
            })
            .collect()
    }
}

fn stream(seed: u64, key: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(key);
    rng
}

fn clamp_param(i: usize, v: f64) -> f64 {
    let (_, lo, hi) = PARAM_RANGES[i];
    v.clamp(lo, hi)
}

impl FleetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.projects.is_empty() {
            return Err(FleetError::Infeasible("no projects".into()));
        }
        for (i, p) in self.projects.iter().enumerate() {
            if p.baselines == 0 {
                return Err(FleetError::Infeasible(format!("project {} has no baselines", i + 1)));
            }
            if p.train < p.baselines {
                return Err(FleetError::Infeasible(format!(
                    "project {}: {} train samples cannot hold {} baselines",
                    i + 1,
                    p.train,
                    p.baselines
                )));
            }
        }
        let ok = |f: f64| (0.0..=1.0).contains(&f);
        if !ok(self.project_spread) || !ok(self.baseline_spread) {
            return Err(FleetError::Infeasible("spreads must lie in [0, 1]".into()));
        }
        if self.step_sizes.iter().any(|s| !(s.is_finite() && *s >= 0.0)) || self.step_sizes.iter().all(|s| *s == 0.0) {
            return Err(FleetError::Infeasible("step sizes must be finite, non-negative and not all zero".into()));
        }
        if !(self.label_noise_counts >= 0.0) {
            return Err(FleetError::Infeasible("label noise must be >= 0".into()));
        }
        Ok(())
    }

    pub fn total(&self) -> (usize, usize) {
        self.projects.iter().fold((0, 0), |(a, b), p| (a + p.train, b + p.test))
    }
}

/// Deterministic fleet: baselines first per group, then variations spread
/// round-robin over the groups of each project.
pub fn generate_fleet(spec: &FleetSpec) -> Result<Fleet> {
    spec.validate()?;
    let mut global = stream(spec.seed, 0);
    let mut samples = Vec::new();
    let mut key = 1u64;
    for (pi, proj) in spec.projects.iter().enumerate() {
        let project = format!("P{}", pi + 1);
        let mean: [f64; NUM_PARAMS] = std::array::from_fn(|i| {
            let (_, lo, hi) = PARAM_RANGES[i];
            let margin = 0.5 * (1.0 - spec.project_spread);
            lo + (hi - lo) * global.gen_range(margin..=1.0 - margin)
        });
        let baselines: Vec<[f64; NUM_PARAMS]> = (0..proj.baselines)
            .map(|_| {
                std::array::from_fn(|i| {
                    let (_, lo, hi) = PARAM_RANGES[i];
                    let off = spec.baseline_spread * (hi - lo) * global.gen_range(-1.0..=1.0);
                    clamp_param(i, mean[i] + off)
                })
            })
            .collect();
        let group_name = |g: usize| format!("{project}-G{:02}", g + 1);
        for (g, b) in baselines.iter().enumerate() {
            let params = ShapeParams::from_array(*b);
            samples.push(make_sample(spec, &project, &group_name(g), format!("{}-B", group_name(g)), true, Split::Train, params, key));
            key += 1;
        }
        let variations = (proj.train - proj.baselines) + proj.test;
        let mut per_group = vec![0usize; proj.baselines];
        for v in 0..variations {
            let g = v % proj.baselines;
            per_group[g] += 1;
            let split = if v < proj.train - proj.baselines { Split::Train } else { Split::Test };
            let mut rng = stream(spec.seed, key);
            let params = vary(&baselines[g], &spec.step_sizes, &mut rng);
            let id = format!("{}-V{:03}", group_name(g), per_group[g]);
            samples.push(make_sample(spec, &project, &group_name(g), id, false, split, params, key));
            key += 1;
        }
    }
    Ok(Fleet { samples })
}

/// Perturbs 1 to 3 distinct parameters by signed steps.
fn vary(base: &[f64; NUM_PARAMS], steps: &[f64; NUM_PARAMS], rng: &mut ChaCha8Rng) -> ShapeParams {
    let movable: Vec<usize> = (0..NUM_PARAMS).filter(|&i| steps[i] > 0.0).collect();
    let k = rng.gen_range(1..=3usize).min(movable.len());
    let picks = rand::seq::index::sample(rng, movable.len(), k);
    let mut out = *base;
    for pi in picks.iter() {
        let i = movable[pi];
        let mag = steps[i] * rng.gen_range(0.5..=1.0);
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let (_, lo, hi) = PARAM_RANGES[i];
        // reflect instead of clamping so the step keeps its size
        let mut v = out[i] + sign * mag;
        if v > hi || v < lo {
            v = out[i] - sign * mag;
        }
        out[i] = v.clamp(lo, hi);
    }
    ShapeParams::from_array(out)
}

#[allow(clippy::too_many_arguments)]
fn make_sample(
    spec: &FleetSpec,
    project: &str,
    group: &str,
    sample_id: String,
    is_baseline: bool,
    split: Split,
    params: ShapeParams,
    key: u64,
) -> FleetSample {
    let mut cd = pseudo_drag_unchecked(&params);
    if spec.label_noise_counts > 0.0 {
        let mut rng = stream(spec.seed, key ^ (1 << 63));
        let noise = Normal::new(0.0, spec.label_noise_counts * 1e-3).expect("finite sigma");
        cd += noise.sample(&mut rng);
    }
    FleetSample {
        record: SampleRecord {
            sample_id,
            project: project.to_string(),
            baseline_group: group.to_string(),
            is_baseline,
            split,
            cd: Some(cd),
            sdf_path: None,
            mesh_path: None,
        },
        params,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_point_gives_base_value() {
        // hat at the 0 limit is 0; evaluate the formula directly
        let h_eff: f64 = 1.5;
        let base = 0.18 + 0.08 * (1.9 * h_eff / 2.85 - 1.0) + 0.05 * slant_hat(0.0) + 0.03 * 0.0 + 0.02 * 0.0;
        assert!((base - 0.18).abs() < 1e-15);
    }

    #[test]
    fn hat_shape() {
        assert_eq!(slant_hat(30.0), 1.0);
        assert!((slant_hat(20.0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((slant_hat(40.0) - 2.0 / 3.0).abs() < 1e-15);
        let mut p = ShapeParams::nominal();
        let best = {
            p.rear_slant_deg = 30.0;
            pseudo_drag(&p).unwrap()
        };
        for t in [10.0, 20.0, 29.0, 31.0, 40.0] {
            p.rear_slant_deg = t;
            assert!(pseudo_drag(&p).unwrap() < best);
        }
    }

    #[test]
    fn out_of_range_rejected() {
        let mut p = ShapeParams::nominal();
        p.width = 2.5;
        let err = pseudo_drag(&p).unwrap_err();
        assert!(err.to_string().contains("width"));
    }

    #[test]
    fn mesh_extents_and_topology() {
        let mut p = ShapeParams::nominal();
        p.length = 4.5;
        p.width = 1.8;
        p.height = 1.5;
        let m = build_shape_mesh(&p).unwrap();
        let bb = crate::geometry::compute_bbox(&m);
        let e = bb.extent();
        assert!((e[0] - 4.5).abs() < 1e-9 && (e[1] - 1.8).abs() < 1e-9 && (e[2] - 1.5).abs() < 1e-9, "{e:?}");
        assert!(m.is_closed_manifold());
        assert_eq!(m.euler_characteristic(), 2);
        assert!(m.signed_volume() > 0.0);
    }

    #[test]
    fn range_corners_build() {
        for mask in 0..(1u32 << NUM_PARAMS) {
            let a: [f64; NUM_PARAMS] = std::array::from_fn(|i| {
                let (_, lo, hi) = PARAM_RANGES[i];
                if mask & (1 << i) == 0 { lo } else { hi }
            });
            let m = build_shape_mesh(&ShapeParams::from_array(a)).unwrap_or_else(|e| panic!("{a:?}: {e}"));
            assert!(m.is_closed_manifold(), "{a:?}");
            assert_eq!(m.euler_characteristic(), 2);
            assert!(m.signed_volume() > 0.0);
        }
    }

    #[test]
    fn default_fleet_counts() {
        let f = generate_fleet(&FleetSpec::default()).unwrap();
        let train = f.samples.iter().filter(|s| s.record.split == Split::Train).count();
        let test = f.samples.len() - train;
        assert_eq!((train, test), (274, 69));
        assert_eq!(f.samples.iter().filter(|s| s.record.is_baseline).count(), 32);
        assert!(f.samples.iter().filter(|s| s.record.is_baseline).all(|s| s.record.split == Split::Train));
    }
}
