//! Online augmentation of SDF grids. Every operator has a deterministic core
//! (`*_with`) taking explicit strengths and a random wrapper that draws them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::voxelizer::SdfGrid;

#[derive(Debug, Error)]
pub enum AugError {
    #[error("invalid augmentation policy: {0}")]
    InvalidPolicy(String),
    #[error("unknown augmentation `{0}` (expected clamp, translate, noise, elastic, resample, dropout)")]
    UnknownOp(String),
}

pub type Result<T> = std::result::Result<T, AugError>;

/// Counter-based stream keyed by `(seed, sample_id, epoch)`.
pub fn aug_rng(seed: u64, sample_id: u64, epoch: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&sample_id.to_le_bytes());
    key[16..24].copy_from_slice(&epoch.to_le_bytes());
    key[24..].copy_from_slice(b"augment\0");
    ChaCha8Rng::from_seed(key)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugOp {
    Clamp,
    Translate,
    Noise,
    Elastic,
    Resample,
    Dropout,
}

impl AugOp {
    /// Application order.
    pub const ALL: [AugOp; 6] = [
        AugOp::Clamp,
        AugOp::Translate,
        AugOp::Noise,
        AugOp::Elastic,
        AugOp::Resample,
        AugOp::Dropout,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugOp::Clamp => "clamp",
            AugOp::Translate => "translate",
            AugOp::Noise => "noise",
            AugOp::Elastic => "elastic",
            AugOp::Resample => "resample",
            AugOp::Dropout => "dropout",
        }
    }
}

impl std::str::FromStr for AugOp {
    type Err = AugError;
    fn from_str(s: &str) -> Result<Self> {
        AugOp::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| AugError::UnknownOp(s.to_string()))
    }
}

/// Per-operator strength ranges. Defaults are also the legal outer bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugRanges {
    pub clamp_factor: (f64, f64),
    pub translate_fraction: f64,
    pub noise_scale: (f64, f64),
    pub impulse_fraction: (f64, f64),
    pub elastic_sigma: f64,
    pub elastic_alpha: (f64, f64),
    pub resample_factor: (f64, f64),
    pub dropout_boxes: (usize, usize),
    pub dropout_volume: (f64, f64),
}

impl Default for AugRanges {
    fn default() -> Self {
        Self {
            clamp_factor: (1e-5, 1.0),
            translate_fraction: 0.04,
            noise_scale: (0.001, 0.05),
            impulse_fraction: (1e-4, 1e-3),
            elastic_sigma: 4.0,
            elastic_alpha: (0.1, 0.5),
            resample_factor: (1.2, 2.0),
            dropout_boxes: (1, 4),
            dropout_volume: (0.01, 0.05),
        }
    }
}

impl AugRanges {
    pub fn validate(&self) -> Result<()> {
        let legal = Self::default();
        let within = |name: &str, r: (f64, f64), l: (f64, f64)| {
            if r.0 <= r.1 && r.0 >= l.0 && r.1 <= l.1 {
                Ok(())
            } else {
                Err(AugError::InvalidPolicy(format!("{name} range {r:?} outside legal {l:?}")))
            }
        };
        within("clamp_factor", self.clamp_factor, legal.clamp_factor)?;
        within("translate_fraction", (0.0, self.translate_fraction), (0.0, legal.translate_fraction))?;
        within("noise_scale", self.noise_scale, legal.noise_scale)?;
        within("impulse_fraction", self.impulse_fraction, legal.impulse_fraction)?;
        within("elastic_alpha", self.elastic_alpha, legal.elastic_alpha)?;
        within("resample_factor", self.resample_factor, legal.resample_factor)?;
        within("dropout_volume", self.dropout_volume, legal.dropout_volume)?;
        let (b0, b1) = self.dropout_boxes;
        if !(1 <= b0 && b0 <= b1 && b1 <= legal.dropout_boxes.1) {
            return Err(AugError::InvalidPolicy(format!("dropout_boxes {:?} outside 1..=4", self.dropout_boxes)));
        }
        if !(self.elastic_sigma > 0.0 && self.elastic_sigma.is_finite()) {
            return Err(AugError::InvalidPolicy("elastic_sigma must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugPolicy {
    pub apply_probability: f64,
    pub enabled: Vec<AugOp>,
    pub ranges: AugRanges,
    /// Set from the run seed, not from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for AugPolicy {
    fn default() -> Self {
        Self {
            apply_probability: 0.75,
            enabled: AugOp::ALL.to_vec(),
            ranges: AugRanges::default(),
            seed: 0,
        }
    }
}

impl AugPolicy {
    pub fn disabled() -> Self {
        Self {
            apply_probability: 0.0,
            ..Self::default()
        }
    }

    pub fn only(op: AugOp, seed: u64) -> Self {
        Self {
            apply_probability: 1.0,
            enabled: vec![op],
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.apply_probability) {
            return Err(AugError::InvalidPolicy(format!(
                "apply_probability {} outside [0, 1]",
                self.apply_probability
            )));
        }
        self.ranges.validate()
    }

    /// Enabled operators in application order, without duplicates.
    fn ordered_ops(&self) -> Vec<AugOp> {
        AugOp::ALL.into_iter().filter(|op| self.enabled.contains(op)).collect()
    }
}

/// Draws whether to augment and which subset, then applies it. Returns the
/// operators applied (empty for identity).
pub fn apply_policy_traced(g: &SdfGrid, policy: &AugPolicy, sample_id: u64, epoch: u64) -> (SdfGrid, Vec<AugOp>) {
    let mut rng = aug_rng(policy.seed, sample_id, epoch);
    let ops = policy.ordered_ops();
    if ops.is_empty() || !rng.gen_bool(policy.apply_probability) {
        return (g.clone(), Vec::new());
    }
    let mask = rng.gen_range(1u32..(1 << ops.len()));
    let chosen: Vec<AugOp> = ops.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, op)| *op).collect();
    let mut out = g.clone();
    for &op in &chosen {
        out = apply_op(&out, op, &policy.ranges, &mut rng);
    }
    (out, chosen)
}

pub fn apply_policy(g: &SdfGrid, policy: &AugPolicy, sample_id: u64, epoch: u64) -> SdfGrid {
    apply_policy_traced(g, policy, sample_id, epoch).0
}

pub fn apply_op<R: Rng>(g: &SdfGrid, op: AugOp, ranges: &AugRanges, rng: &mut R) -> SdfGrid {
    match op {
        AugOp::Clamp => clamp_aug(g, ranges, rng),
        AugOp::Translate => translate_aug(g, ranges, rng),
        AugOp::Noise => noise_aug(g, ranges, rng),
        AugOp::Elastic => elastic_aug(g, ranges, rng),
        AugOp::Resample => aniso_resample_aug(g, ranges, rng),
        AugOp::Dropout => dropout_box_aug(g, ranges, rng),
    }
}

fn max_abs(values: &[f32]) -> f32 {
    values.iter().fold(0f32, |m, v| m.max(v.abs()))
}

fn std_pop(values: &[f32]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    (values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt()
}

// --- clamp -----------------------------------------------------------------

/// Threshold `max|v| * u`.
pub fn clamp_threshold(g: &SdfGrid, u: f64) -> f32 {
    (max_abs(&g.values) as f64 * u) as f32
}

pub fn clamp_with(g: &SdfGrid, u: f64) -> SdfGrid {
    let t = clamp_threshold(g, u);
    g.with_values(g.values.iter().map(|v| v.clamp(-t, t)).collect())
}

pub fn clamp_aug<R: Rng>(g: &SdfGrid, ranges: &AugRanges, rng: &mut R) -> SdfGrid {
    let (lo, hi) = ranges.clamp_factor;
    clamp_with(g, rng.gen_range(lo..=hi))
}

// --- translate -------------------------------------------------------------

pub fn max_shift(nx: usize, fraction: f64) -> i64 {
    (fraction * nx as f64).floor() as i64
}

/// Integer shift along x; vacated slabs replicate the edge slab.
pub fn translate_with(g: &SdfGrid, k: i64) -> SdfGrid {
    let [nx, ny, nz] = g.dims;
    let mut out = vec![0f32; g.values.len()];
    for z in 0..nz {
        for y in 0..ny {
            let row = nx * (y + ny * z);
            for x in 0..nx {
                let src = (x as i64 - k).clamp(0, nx as i64 - 1) as usize;
                out[row + x] = g.values[row + src];
            }
        }
    }
    g.with_values(out)
}

pub fn translate_aug<R: Rng>(g: &SdfGrid, ranges: &AugRanges, rng: &mut R) -> SdfGrid {
    let m = max_shift(g.dims[0], ranges.translate_fraction);
    translate_with(g, rng.gen_range(-m..=m))
}

// --- noise -----------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoiseKind {
    /// Standard deviation `scale * std(values)`.
    Gaussian { scale: f64 },
    /// Half-width `scale * std(values)`.
    Uniform { scale: f64 },
    /// `round(fraction * n)` distinct cells set to `+-max|v|`.
    Impulse { fraction: f64 },
}

pub fn impulse_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).round() as usize).min(n)
}

pub fn noise_with<R: Rng>(g: &SdfGrid, kind: NoiseKind, rng: &mut R) -> SdfGrid {
    let mut out = g.values.clone();
    match kind {
        NoiseKind::Gaussian { scale } => {
            let sigma = scale * std_pop(&g.values);
            if sigma > 0.0 {
                let dist = Normal::new(0.0, sigma).expect("finite sigma");
                for v in out.iter_mut() {
                    *v = (*v as f64 + dist.sample(rng)) as f32;
                }
            }
        }
        NoiseKind::Uniform { scale } => {
            let a = scale * std_pop(&g.values);
            if a > 0.0 {
                let dist = Uniform::new_inclusive(-a, a);
                for v in out.iter_mut() {
                    *v = (*v as f64 + dist.sample(rng)) as f32;
                }
            }
        }
        NoiseKind::Impulse { fraction } => {
            let m = max_abs(&g.values);
            let count = impulse_count(out.len(), fraction);
            for i in rand::seq::index::sample(rng, out.len(), count).iter() {
                out[i] = if rng.gen_bool(0.5) { m } else { -m };
            }
        }
    }
    g.with_values(out)
}

pub fn noise_aug<R: Rng>(g: &SdfGrid, ranges: &AugRanges, rng: &mut R) -> SdfGrid {
    let kind = match rng.gen_range(0..3) {
        0 => NoiseKind::Gaussian {
            scale: rng.gen_range(ranges.noise_scale.0..=ranges.noise_scale.1),
        },
        1 => NoiseKind::Uniform {
            scale: rng.gen_range(ranges.noise_scale.0..=ranges.noise_scale.1),
        },
        _ => NoiseKind::Impulse {
            fraction: rng.gen_range(ranges.impulse_fraction.0..=ranges.impulse_fraction.1),
        },
    };
    noise_with(g, kind, rng)
}

// --- trilinear helpers -----------------------------------------------------

/// Trilinear sample at fractional cell coordinates, clamped to the grid.
pub fn trilinear(values: &[f32], dims: [usize; 3], p: [f64; 3]) -> f64 {
    let mut i0 = [0usize; 3];
    let mut i1 = [0usize; 3];
    let mut w = [0f64; 3];
    for a in 0..3 {
        let hi = (dims[a] - 1) as f64;
        let c = p[a].clamp(0.0, hi);
        let f = c.floor();
        i0[a] = f as usize;
        i1[a] = (i0[a] + 1).min(dims[a] - 1);
        w[a] = c - f;
    }
    let at = |x: usize, y: usize, z: usize| values[x + dims[0] * (y + dims[1] * z)] as f64;
    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
    let c00 = lerp(at(i0[0], i0[1], i0[2]), at(i1[0], i0[1], i0[2]), w[0]);
    let c10 = lerp(at(i0[0], i1[1], i0[2]), at(i1[0], i1[1], i0[2]), w[0]);
    let c01 = lerp(at(i0[0], i0[1], i1[2]), at(i1[0], i0[1], i1[2]), w[0]);
    let c11 = lerp(at(i0[0], i1[1], i1[2]), at(i1[0], i1[1], i1[2]), w[0]);
    lerp(lerp(c00, c10, w[1]), lerp(c01, c11, w[1]), w[2])
}

// --- elastic ---------------------------------------------------------------

/// Per-cell displacement in cells, three components per cell.
#[derive(Clone, Debug, PartialEq)]
pub struct Displacement {
    pub dims: [usize; 3],
    pub field: Vec<[f64; 3]>,
}

impl Displacement {
    pub fn uniform(dims: [usize; 3], d: [f64; 3]) -> Self {
        Self {
            dims,
            field: vec![d; dims.iter().product()],
        }
    }

    pub fn max_magnitude(&self) -> f64 {
        self.field
            .iter()
            .map(|d| (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt())
            .fold(0.0, f64::max)
    }
}

/// Output cell `x` takes the input sampled at `x + d(x)`.
pub fn elastic_with(g: &SdfGrid, disp: &Displacement) -> SdfGrid {
    assert_eq!(g.dims, disp.dims, "displacement dims must match the grid");
    let [nx, ny, _] = g.dims;
    let out = disp
        .field
        .iter()
        .enumerate()
        .map(|(idx, d)| {
            let (x, y, z) = (idx % nx, (idx / nx) % ny, idx / (nx * ny));
            let p = [x as f64 + d[0], y as f64 + d[1], z as f64 + d[2]];
            trilinear(&g.values, g.dims, p) as f32
        })
        .collect();
    g.with_values(out)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable smoothing with edge clamping.
fn smooth(field: &mut [f64], dims: [usize; 3], kernel: &[f64]) {
    let r = (kernel.len() / 2) as i64;
    let stride = [1, dims[0], dims[0] * dims[1]];
    let mut tmp = vec![0f64; field.len()];
    for axis in 0..3 {
        let n = dims[axis] as i64;
        for (idx, out) in tmp.iter_mut().enumerate() {
            let c = (idx / stride[axis]) as i64 % n;
            let base = idx as i64 - c * stride[axis] as i64;
            *out = kernel
                .iter()
                .enumerate()
                .map(|(t, w)| {
                    let j = (c + t as i64 - r).clamp(0, n - 1);
                    w * field[(base + j * stride[axis] as i64) as usize]
                })
                .sum();
        }
        field.copy_from_slice(&tmp);
    }
}

/// Smoothed white noise rescaled so its largest vector has length `alpha`.
pub fn random_displacement<R: Rng>(dims: [usize; 3], sigma: f64, alpha: f64, rng: &mut R) -> Displacement {
    let n: usize = dims.iter().product();
    let kernel = gaussian_kernel(sigma);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut comps: Vec<Vec<f64>> = (0..3).map(|_| (0..n).map(|_| normal.sample(rng)).collect()).collect();
    for c in comps.iter_mut() {
        smooth(c, dims, &kernel);
    }
    let mut disp = Displacement {
        dims,
        field: (0..n).map(|i| [comps[0][i], comps[1][i], comps[2][i]]).collect(),
    };
    let m = disp.max_magnitude();
    let s = if m > 0.0 { alpha / m } else { 0.0 };
    for d in disp.field.iter_mut() {
        *d = d.map(|v| v * s);
    }
    disp
}

pub fn elastic_aug<R: Rng>(g: &SdfGrid, ranges: &AugRanges, rng: &mut R) -> SdfGrid {
    let alpha = rng.gen_range(ranges.elastic_alpha.0..=ranges.elastic_alpha.1);
    let disp = random_displacement(g.dims, ranges.elastic_sigma, alpha, rng);
    elastic_with(g, &disp)
}

// --- anisotropic resampling ------------------------------------------------

/// Trilinear resize with aligned corner cells.
pub fn resize_trilinear(values: &[f32], from: [usize; 3], to: [usize; 3]) -> Vec<f32> {
    let scale: [f64; 3] = std::array::from_fn(|a| {
        if to[a] > 1 {
            (from[a] - 1) as f64 / (to[a] - 1) as f64
        } else {
            0.0
        }
    });
    let mut out = Vec::with_capacity(to.iter().product());
    for z in 0..to[2] {
        for y in 0..to[1] {
            for x in 0..to[0] {
                let p = [x as f64 * scale[0], y as f64 * scale[1], z as f64 * scale[2]];
                out.push(trilinear(values, from, p) as f32);
            }
        }
    }
    out
}

pub fn downsampled_dims(dims: [usize; 3], factors: [f64; 3]) -> [usize; 3] {
    std::array::from_fn(|a| ((dims[a] as f64 / factors[a]).ceil() as usize).max(2))
}

pub fn resample_with(g: &SdfGrid, factors: [f64; 3]) -> SdfGrid {
    let small = downsampled_dims(g.dims, factors);
    let down = resize_trilinear(&g.values, g.dims, small);
    g.with_values(resize_trilinear(&down, small, g.dims))
}

pub fn aniso_resample_aug<R: Rng>(g: &SdfGrid, ranges: &AugRanges, rng: &mut R) -> SdfGrid {
    let (lo, hi) = ranges.resample_factor;
    let f = [rng.gen_range(lo..=hi), rng.gen_range(lo..=hi), rng.gen_range(lo..=hi)];
    resample_with(g, f)
}

// --- dropout boxes ---------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellBox {
    pub min: [usize; 3],
    pub size: [usize; 3],
}

impl CellBox {
    pub fn volume(&self) -> usize {
        self.size.iter().product()
    }
}

pub fn dropout_with(g: &SdfGrid, boxes: &[CellBox]) -> SdfGrid {
    let [nx, ny, _] = g.dims;
    let mut out = g.values.clone();
    for b in boxes {
        for z in b.min[2]..b.min[2] + b.size[2] {
            for y in b.min[1]..b.min[1] + b.size[1] {
                let row = nx * (y + ny * z);
                out[row + b.min[0]..row + b.min[0] + b.size[0]].fill(0.0);
            }
        }
    }
    g.with_values(out)
}

/// Cell-count bounds for one box, `None` when no box fits.
pub fn box_volume_bounds(dims: [usize; 3], volume: (f64, f64)) -> Option<(usize, usize)> {
    let n = dims.iter().product::<usize>() as f64;
    let lo = ((volume.0 * n).ceil() as usize).max(1);
    let hi = (volume.1 * n).floor() as usize;
    (lo <= hi).then_some((lo, hi))
}

/// A random box whose volume lies in the bounds. Rejection sampling over
/// uniform side lengths, with an exhaustive fallback.
pub fn random_box<R: Rng>(dims: [usize; 3], bounds: (usize, usize), rng: &mut R) -> Option<CellBox> {
    let (lo, hi) = bounds;
    let ok = |s: [usize; 3]| (lo..=hi).contains(&(s[0] * s[1] * s[2]));
    let mut size = None;
    for _ in 0..10_000 {
        let s = [0, 1, 2].map(|a| rng.gen_range(1..=dims[a]));
        if ok(s) {
            size = Some(s);
            break;
        }
    }
    if size.is_none() {
        let mut all = Vec::new();
        for sx in 1..=dims[0] {
            for sy in 1..=dims[1] {
                for sz in 1..=dims[2] {
                    if ok([sx, sy, sz]) {
                        all.push([sx, sy, sz]);
                    }
                }
            }
        }
        if all.is_empty() {
            return None;
        }
        size = Some(all[rng.gen_range(0..all.len())]);
    }
    let size = size?;
    let min = [0, 1, 2].map(|a| rng.gen_range(0..=dims[a] - size[a]));
    Some(CellBox { min, size })
}

/// Draws the boxes `dropout_box_aug` would zero.
pub fn random_boxes<R: Rng>(dims: [usize; 3], ranges: &AugRanges, rng: &mut R) -> Vec<CellBox> {
    let Some(bounds) = box_volume_bounds(dims, ranges.dropout_volume) else {
        return Vec::new();
    };
    let count = rng.gen_range(ranges.dropout_boxes.0..=ranges.dropout_boxes.1);
    (0..count).filter_map(|_| random_box(dims, bounds, rng)).collect()
}

pub fn dropout_box_aug<R: Rng>(g: &SdfGrid, ranges: &AugRanges, rng: &mut R) -> SdfGrid {
    let boxes = random_boxes(g.dims, ranges, rng);
    dropout_with(g, &boxes)
}
