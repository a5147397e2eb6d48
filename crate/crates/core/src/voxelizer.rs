//! Signed distance fields on a Cartesian grid: BVH-accelerated exact
//! distances, ray-parity majority sign, a brute-force oracle and the VSDF
//! file format.

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{self, check_inside_domain, dot, sub, Aabb, DomainSpec, GeometryError, Point3, TriMesh};

/// Triangles per leaf at most.
const LEAF_SIZE: usize = 4;
const SAH_BINS: usize = 12;
/// Ray origins are nudged off grid-aligned edges by this fraction of the
/// cell spacing. The second orthogonal axis uses a golden-ratio multiple so
/// that jittered points do not stay on 45 degree diagonals.
const JITTER: f64 = 1e-7;
const JITTER_RATIO: f64 = 0.618_033_988_749_894_8;

pub const ORACLE_MAX_TRIANGLES: usize = 10_000;
pub const ORACLE_MAX_CELLS: usize = 32 * 32 * 32;

pub const VSDF_MAGIC: &[u8; 4] = b"VSDF";
pub const VSDF_VERSION: u32 = 1;
pub const VSDF_HEADER_LEN: usize = 72;
/// Hard cap on cells a VSDF file may declare (16 GiB of payload).
pub const VSDF_MAX_CELLS: u64 = 1 << 32;

#[derive(Debug, Error)]
pub enum SdfError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("oracle guard exceeded: {triangles} triangles (max {max_t}), {cells} cells (max {max_c})", max_t = ORACLE_MAX_TRIANGLES, max_c = ORACLE_MAX_CELLS)]
    OracleGuard { triangles: usize, cells: usize },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {0:?}, expected \"VSDF\"")]
    BadMagic([u8; 4]),
    #[error("version mismatch: file has version {found}, expected {VSDF_VERSION}")]
    VersionMismatch { found: u32 },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("dimension overflow: {nx}x{ny}x{nz}")]
    DimensionOverflow { nx: u32, ny: u32, nz: u32 },
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

pub type Result<T> = std::result::Result<T, SdfError>;

/// Dense scalar field sampled at cell centers, x-fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct SdfGrid {
    pub dims: [usize; 3],
    /// Center of cell (0, 0, 0).
    pub origin: Point3,
    pub spacing: Point3,
    pub values: Vec<f32>,
    /// `true` when interior cells carry positive values.
    pub positive_inside: bool,
}

impl SdfGrid {
    pub fn new(dims: [usize; 3], origin: Point3, spacing: Point3, values: Vec<f32>, positive_inside: bool) -> Result<Self> {
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| SdfError::InvalidGrid(format!("dims {dims:?} overflow")))?;
        if dims.iter().any(|&d| d == 0) {
            return Err(SdfError::InvalidGrid(format!("dims {dims:?} must be positive")));
        }
        if values.len() != n {
            return Err(SdfError::InvalidGrid(format!(
                "values length {} != {n} for dims {dims:?}",
                values.len()
            )));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) || origin.iter().any(|o| !o.is_finite()) {
            return Err(SdfError::InvalidGrid(format!(
                "origin {origin:?} / spacing {spacing:?} must be finite, spacing positive"
            )));
        }
        Ok(Self {
            dims,
            origin,
            spacing,
            values,
            positive_inside,
        })
    }

    pub fn zeros(domain: &DomainSpec) -> Self {
        Self {
            dims: domain.dims,
            origin: domain.origin(),
            spacing: domain.spacing(),
            values: vec![0.0; domain.num_cells()],
            positive_inside: true,
        }
    }

    /// Same metadata, new values.
    pub fn with_values(&self, values: Vec<f32>) -> Self {
        assert_eq!(values.len(), self.values.len(), "value count must match dims");
        Self {
            values,
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Self {
        Self {
            dims: self.dims,
            origin: self.origin,
            spacing: self.spacing,
            values: Vec::new(),
            positive_inside: self.positive_inside,
        }
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.values[self.index(i, j, k)]
    }

    pub fn cell_center(&self, i: usize, j: usize, k: usize) -> Point3 {
        [
            self.origin[0] + i as f64 * self.spacing[0],
            self.origin[1] + j as f64 * self.spacing[1],
            self.origin[2] + k as f64 * self.spacing[2],
        ]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Diagonal of the box spanned by the cells.
    pub fn diagonal(&self) -> f64 {
        (0..3)
            .map(|a| (self.dims[a] as f64 * self.spacing[a]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Re-expresses the field in the requested sign convention.
    pub fn with_convention(&self, positive_inside: bool) -> SdfGrid {
        if positive_inside == self.positive_inside {
            return self.clone();
        }
        SdfGrid {
            values: self.values.iter().map(|v| -v).collect(),
            positive_inside,
            ..self.clone_meta()
        }
    }

    pub fn same_layout(&self, other: &SdfGrid) -> bool {
        self.dims == other.dims && self.origin == other.origin && self.spacing == other.spacing
    }
}

// ---------------------------------------------------------------------------
// point/triangle primitives

/// Squared distance from `p` to triangle `abc` (closest-point by Voronoi
/// region classification).
pub fn point_triangle_dist2(p: Point3, a: Point3, b: Point3, c: Point3) -> f64 {
    let ab = sub(b, a);
    let ac = sub(c, a);
    let ap = sub(p, a);
    let d1 = dot(ab, ap);
    let d2 = dot(ac, ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return dot(ap, ap);
    }
    let bp = sub(p, b);
    let d3 = dot(ab, bp);
    let d4 = dot(ac, bp);
    if d3 >= 0.0 && d4 <= d3 {
        return dot(bp, bp);
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return dist2(p, [a[0] + v * ab[0], a[1] + v * ab[1], a[2] + v * ab[2]]);
    }
    let cp = sub(p, c);
    let d5 = dot(ab, cp);
    let d6 = dot(ac, cp);
    if d6 >= 0.0 && d5 <= d6 {
        return dot(cp, cp);
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return dist2(p, [a[0] + w * ac[0], a[1] + w * ac[1], a[2] + w * ac[2]]);
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        let bc = sub(c, b);
        return dist2(p, [b[0] + w * bc[0], b[1] + w * bc[1], b[2] + w * bc[2]]);
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    let q = [
        a[0] + ab[0] * v + ac[0] * w,
        a[1] + ab[1] * v + ac[1] * w,
        a[2] + ab[2] * v + ac[2] * w,
    ];
    dist2(p, q)
}

#[inline]
fn dist2(a: Point3, b: Point3) -> f64 {
    let d = sub(a, b);
    dot(d, d)
}

/// Where the axis-parallel line `{x_b = u, x_c = v}` pierces triangle `t`,
/// as a coordinate along `axis`. Edges count as inside; triangles parallel to
/// the line never hit.
#[inline]
pub fn line_triangle_hit(t: &[Point3; 3], axis: usize, u: f64, v: f64) -> Option<f64> {
    let (b, c) = ((axis + 1) % 3, (axis + 2) % 3);
    let orient = |p: Point3, q: Point3| (p[b] - u) * (q[c] - v) - (p[c] - v) * (q[b] - u);
    let e0 = orient(t[1], t[2]);
    let e1 = orient(t[2], t[0]);
    let e2 = orient(t[0], t[1]);
    let pos = e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0;
    let neg = e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0;
    let sum = e0 + e1 + e2;
    if !(pos || neg) || sum == 0.0 {
        return None;
    }
    Some((e0 * t[0][axis] + e1 * t[1][axis] + e2 * t[2][axis]) / sum)
}

/// Orthogonal coordinates of the jittered parity ray through `x` along `axis`.
#[inline]
fn ray_line(x: Point3, axis: usize, spacing: Point3) -> (f64, f64) {
    let (b, c) = ((axis + 1) % 3, (axis + 2) % 3);
    (x[b] + JITTER * spacing[b], x[c] + JITTER * JITTER_RATIO * spacing[c])
}

// ---------------------------------------------------------------------------
// BVH

#[derive(Clone, Copy, Debug)]
pub struct BvhNode {
    pub bbox: Aabb,
    /// Leaf: first triangle slot. Interior: index of the left child; the right
    /// child follows it.
    first: u32,
    /// Triangles in the leaf; 0 for interior nodes.
    count: u32,
}

impl BvhNode {
    pub fn is_leaf(&self) -> bool {
        self.count > 0
    }

    /// Slots into [`TriBvh::order`] for a leaf.
    pub fn leaf_range(&self) -> Option<std::ops::Range<usize>> {
        self.is_leaf()
            .then(|| self.first as usize..(self.first + self.count) as usize)
    }

    pub fn children(&self) -> Option<(usize, usize)> {
        (!self.is_leaf()).then(|| (self.first as usize, self.first as usize + 1))
    }
}

/// Bounding volume hierarchy over a mesh's triangles, built by binned SAH.
#[derive(Clone, Debug)]
pub struct TriBvh {
    nodes: Vec<BvhNode>,
    order: Vec<u32>,
    tris: Vec<[Point3; 3]>,
}

fn tri_box(t: &[Point3; 3]) -> Aabb {
    let mut b = Aabb::empty();
    for p in t {
        b.grow(*p);
    }
    b
}

fn surface_area(b: &Aabb) -> f64 {
    let e = b.extent();
    if e.iter().any(|v| *v < 0.0) {
        return 0.0;
    }
    2.0 * (e[0] * e[1] + e[1] * e[2] + e[2] * e[0])
}

pub fn build_bvh(mesh: &TriMesh) -> TriBvh {
    let all: Vec<[Point3; 3]> = (0..mesh.triangles().len()).map(|t| mesh.triangle(t)).collect();
    let boxes: Vec<Aabb> = all.iter().map(tri_box).collect();
    let centroids: Vec<Point3> = boxes.iter().map(|b| b.center()).collect();
    let mut order: Vec<u32> = (0..all.len() as u32).collect();
    let mut nodes = Vec::with_capacity(2 * all.len() / LEAF_SIZE + 1);
    nodes.push(BvhNode {
        bbox: Aabb::empty(),
        first: 0,
        count: 0,
    });
    let mut stack = vec![(0usize, 0usize, all.len())];
    while let Some((node, start, end)) = stack.pop() {
        let slice = &mut order[start..end];
        let mut bbox = Aabb::empty();
        let mut cbox = Aabb::empty();
        for &t in slice.iter() {
            bbox = bbox.union(&boxes[t as usize]);
            cbox.grow(centroids[t as usize]);
        }
        let n = end - start;
        let split = if n <= LEAF_SIZE {
            None
        } else {
            Some(sah_split(slice, &boxes, &centroids, &cbox))
        };
        match split {
            None => {
                nodes[node] = BvhNode {
                    bbox,
                    first: start as u32,
                    count: n as u32,
                }
            }
            Some(mid) => {
                let left = nodes.len();
                nodes.push(nodes[node]);
                nodes.push(nodes[node]);
                nodes[node] = BvhNode {
                    bbox,
                    first: left as u32,
                    count: 0,
                };
                stack.push((left + 1, start + mid, end));
                stack.push((left, start, start + mid));
            }
        }
    }
    let tris = order.iter().map(|&t| all[t as usize]).collect();
    TriBvh { nodes, order, tris }
}

/// Partitions `slice` in place and returns the split position, always in
/// `1..slice.len()`.
fn sah_split(slice: &mut [u32], boxes: &[Aabb], centroids: &[Point3], cbox: &Aabb) -> usize {
    let n = slice.len();
    let ext = cbox.extent();
    let mut best: Option<(f64, usize, usize)> = None; // (cost, axis, bin boundary)
    for axis in 0..3 {
        if ext[axis] <= 0.0 {
            continue;
        }
        let bin_of = |t: u32| -> usize {
            let f = (centroids[t as usize][axis] - cbox.min[axis]) / ext[axis];
            ((f * SAH_BINS as f64) as usize).min(SAH_BINS - 1)
        };
        let mut counts = [0usize; SAH_BINS];
        let mut bins = [Aabb::empty(); SAH_BINS];
        for &t in slice.iter() {
            let b = bin_of(t);
            counts[b] += 1;
            bins[b] = bins[b].union(&boxes[t as usize]);
        }
        let mut right_area = [0.0; SAH_BINS];
        let mut right_count = [0usize; SAH_BINS];
        let (mut acc, mut cnt) = (Aabb::empty(), 0);
        for b in (1..SAH_BINS).rev() {
            acc = acc.union(&bins[b]);
            cnt += counts[b];
            right_area[b] = surface_area(&acc);
            right_count[b] = cnt;
        }
        let (mut acc, mut cnt) = (Aabb::empty(), 0);
        for b in 1..SAH_BINS {
            acc = acc.union(&bins[b - 1]);
            cnt += counts[b - 1];
            if cnt == 0 || right_count[b] == 0 {
                continue;
            }
            let cost = surface_area(&acc) * cnt as f64 + right_area[b] * right_count[b] as f64;
            if best.map_or(true, |(c, _, _)| cost < c) {
                best = Some((cost, axis, b));
            }
        }
    }
    match best {
        Some((_, axis, boundary)) => {
            let bin_of = |t: u32| -> usize {
                let f = (centroids[t as usize][axis] - cbox.min[axis]) / ext[axis];
                ((f * SAH_BINS as f64) as usize).min(SAH_BINS - 1)
            };
            let mut i = 0;
            for j in 0..n {
                if bin_of(slice[j]) < boundary {
                    slice.swap(i, j);
                    i += 1;
                }
            }
            i
        }
        // all centroids coincide: split by index
        None => n / 2,
    }
}

impl TriBvh {
    pub fn nodes(&self) -> &[BvhNode] {
        &self.nodes
    }

    /// Original triangle index for each leaf slot.
    pub fn order(&self) -> &[u32] {
        &self.order
    }

    pub fn num_triangles(&self) -> usize {
        self.tris.len()
    }

    /// Squared distance and original index of the nearest triangle.
    pub fn nearest(&self, p: Point3) -> (f64, usize) {
        self.nearest_bounded(p, f64::INFINITY)
    }

    /// As [`nearest`](Self::nearest), but prunes with an upper bound that
    /// must not be smaller than the true squared distance.
    fn nearest_bounded(&self, p: Point3, bound2: f64) -> (f64, usize) {
        let mut best = (bound2, usize::MAX);
        let mut stack: Vec<(f64, u32)> = Vec::with_capacity(64);
        stack.push((box_dist2(&self.nodes[0].bbox, p), 0));
        while let Some((d, ni)) = stack.pop() {
            if d > best.0 {
                continue;
            }
            let node = &self.nodes[ni as usize];
            if let Some(range) = node.leaf_range() {
                for slot in range {
                    let t = &self.tris[slot];
                    let d2 = point_triangle_dist2(p, t[0], t[1], t[2]);
                    let idx = self.order[slot] as usize;
                    if d2 < best.0 || (d2 == best.0 && idx < best.1) {
                        best = (d2, idx);
                    }
                }
            } else {
                let (l, r) = (node.first, node.first + 1);
                let dl = box_dist2(&self.nodes[l as usize].bbox, p);
                let dr = box_dist2(&self.nodes[r as usize].bbox, p);
                // push the farther child first so the nearer one pops first
                if dl <= dr {
                    stack.push((dr, r));
                    stack.push((dl, l));
                } else {
                    stack.push((dl, l));
                    stack.push((dr, r));
                }
            }
        }
        best
    }

    /// Coordinates along `axis` of all crossings between the mesh and the
    /// line `{x_b = u, x_c = v}`, sorted ascending.
    pub fn line_hits(&self, axis: usize, u: f64, v: f64) -> Vec<f64> {
        let (b, c) = ((axis + 1) % 3, (axis + 2) % 3);
        let mut hits = Vec::new();
        let mut stack = vec![0u32];
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni as usize];
            let bb = &node.bbox;
            if u < bb.min[b] || u > bb.max[b] || v < bb.min[c] || v > bb.max[c] {
                continue;
            }
            if let Some(range) = node.leaf_range() {
                for slot in range {
                    if let Some(s) = line_triangle_hit(&self.tris[slot], axis, u, v) {
                        hits.push(s);
                    }
                }
            } else {
                stack.push(node.first + 1);
                stack.push(node.first);
            }
        }
        hits.sort_by(f64::total_cmp);
        hits
    }
}

fn box_dist2(b: &Aabb, p: Point3) -> f64 {
    let mut d = 0.0;
    for a in 0..3 {
        let e = if p[a] < b.min[a] {
            b.min[a] - p[a]
        } else if p[a] > b.max[a] {
            p[a] - b.max[a]
        } else {
            0.0
        };
        d += e * e;
    }
    d
}

/// Exact minimum Euclidean distance from `x` to the mesh surface.
pub fn unsigned_distance(bvh: &TriBvh, x: Point3) -> f64 {
    bvh.nearest(x).0.sqrt()
}

/// `+1` inside, `-1` outside, by majority vote of ray parity along +X, +Y
/// and +Z. `spacing` scales the ray-origin jitter.
pub fn inside_test(bvh: &TriBvh, x: Point3, spacing: Point3) -> i8 {
    let votes: u32 = (0..3)
        .map(|axis| {
            let (u, v) = ray_line(x, axis, spacing);
            let crossings = bvh.line_hits(axis, u, v).iter().filter(|&&s| s > x[axis]).count();
            (crossings % 2) as u32
        })
        .sum();
    if votes >= 2 {
        1
    } else {
        -1
    }
}

// ---------------------------------------------------------------------------
// grid generation

/// Signed distance field of `mesh` sampled at the cell centers of `domain`,
/// positive inside. Uses the ambient rayon pool.
pub fn generate_sdf(mesh: &TriMesh, domain: &DomainSpec) -> Result<SdfGrid> {
    domain.validate()?;
    check_inside_domain(mesh, domain)?;
    let bvh = build_bvh(mesh);
    Ok(sdf_from_bvh(&bvh, domain))
}

/// [`generate_sdf`] on a dedicated pool of `threads` workers.
pub fn generate_sdf_with_threads(mesh: &TriMesh, domain: &DomainSpec, threads: usize) -> Result<SdfGrid> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| SdfError::ThreadPool(e.to_string()))?;
    pool.install(|| generate_sdf(mesh, domain))
}

pub fn sdf_from_bvh(bvh: &TriBvh, domain: &DomainSpec) -> SdfGrid {
    let [nx, ny, nz] = domain.dims;
    let spacing = domain.spacing();
    let votes = parity_votes(bvh, domain);

    // One task per x-row; each row warm-starts from its previous cell.
    let mut values = vec![0f32; nx * ny * nz];
    values
        .par_chunks_mut(nx)
        .enumerate()
        .for_each(|(row, out)| {
            let (j, k) = (row % ny, row / ny);
            let mut prev: Option<f64> = None;
            for (i, slot) in out.iter_mut().enumerate() {
                let x = domain.cell_center(i, j, k);
                let bound = match prev {
                    // triangle inequality, padded against rounding
                    Some(d) => ((d + spacing[0]) * (1.0 + 1e-9)).powi(2),
                    None => f64::INFINITY,
                };
                let (d2, _) = bvh.nearest_bounded(x, bound);
                let d = d2.sqrt();
                prev = Some(d);
                let idx = i + nx * row;
                let sign = if votes[idx] >= 2 { 1.0 } else { -1.0 };
                *slot = (sign * d) as f32;
            }
        });
    SdfGrid {
        dims: domain.dims,
        origin: domain.origin(),
        spacing,
        values,
        positive_inside: true,
    }
}

/// Per-cell count of axes whose parity ray says "inside".
fn parity_votes(bvh: &TriBvh, domain: &DomainSpec) -> Vec<u8> {
    let [nx, ny, nz] = domain.dims;
    let spacing = domain.spacing();
    let mut votes = vec![0u8; nx * ny * nz];
    for axis in 0..3 {
        let (b, c) = ((axis + 1) % 3, (axis + 2) % 3);
        let (nb, nc, na) = (domain.dims[b], domain.dims[c], domain.dims[axis]);
        let lines: Vec<Vec<bool>> = (0..nb * nc)
            .into_par_iter()
            .map(|line| {
                let (ib, ic) = (line % nb, line / nb);
                let mut idx = [0usize; 3];
                idx[b] = ib;
                idx[c] = ic;
                let probe = domain.cell_center(idx[0], idx[1], idx[2]);
                let (u, v) = ray_line(probe, axis, spacing);
                let hits = bvh.line_hits(axis, u, v);
                let mut first_above = 0;
                (0..na)
                    .map(|ia| {
                        idx[axis] = ia;
                        let x = domain.cell_center(idx[0], idx[1], idx[2])[axis];
                        while first_above < hits.len() && hits[first_above] <= x {
                            first_above += 1;
                        }
                        (hits.len() - first_above) % 2 == 1
                    })
                    .collect()
            })
            .collect();
        for (line, inside) in lines.iter().enumerate() {
            let (ib, ic) = (line % nb, line / nb);
            for (ia, &flag) in inside.iter().enumerate() {
                let mut idx = [0usize; 3];
                idx[axis] = ia;
                idx[b] = ib;
                idx[c] = ic;
                votes[idx[0] + nx * (idx[1] + ny * idx[2])] += flag as u8;
            }
        }
    }
    votes
}

/// Exhaustive reference: every cell against every triangle, no BVH.
pub fn sdf_oracle(mesh: &TriMesh, domain: &DomainSpec) -> Result<SdfGrid> {
    domain.validate()?;
    let cells = domain.num_cells();
    let ntri = mesh.triangles().len();
    if ntri > ORACLE_MAX_TRIANGLES || cells > ORACLE_MAX_CELLS {
        return Err(SdfError::OracleGuard { triangles: ntri, cells });
    }
    check_inside_domain(mesh, domain)?;
    let tris: Vec<[Point3; 3]> = (0..ntri).map(|t| mesh.triangle(t)).collect();
    let spacing = domain.spacing();
    let [nx, ny, _] = domain.dims;
    let values = (0..cells)
        .into_par_iter()
        .map(|idx| {
            let (i, j, k) = (idx % nx, (idx / nx) % ny, idx / (nx * ny));
            let x = domain.cell_center(i, j, k);
            let d2 = tris
                .iter()
                .map(|t| point_triangle_dist2(x, t[0], t[1], t[2]))
                .fold(f64::INFINITY, f64::min);
            let mut votes = 0;
            for axis in 0..3 {
                let (u, v) = ray_line(x, axis, spacing);
                let crossings = tris
                    .iter()
                    .filter_map(|t| line_triangle_hit(t, axis, u, v))
                    .filter(|&s| s > x[axis])
                    .count();
                votes += crossings % 2;
            }
            let sign = if votes >= 2 { 1.0 } else { -1.0 };
            (sign * d2.sqrt()) as f32
        })
        .collect();
    Ok(SdfGrid {
        dims: domain.dims,
        origin: domain.origin(),
        spacing,
        values,
        positive_inside: true,
    })
}

// ---------------------------------------------------------------------------
// VSDF

pub fn encode_vsdf(grid: &SdfGrid) -> Vec<u8> {
    let mut buf = Vec::with_capacity(VSDF_HEADER_LEN + 4 * grid.values.len());
    buf.extend_from_slice(VSDF_MAGIC);
    buf.extend_from_slice(&VSDF_VERSION.to_le_bytes());
    for d in grid.dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in grid.origin.iter().chain(grid.spacing.iter()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.push(grid.positive_inside as u8);
    buf.extend_from_slice(&[0u8; 3]);
    debug_assert_eq!(buf.len(), VSDF_HEADER_LEN);
    for v in &grid.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_vsdf(bytes: &[u8]) -> Result<SdfGrid> {
    if bytes.len() < VSDF_HEADER_LEN {
        if bytes.len() >= 4 && &bytes[..4] != VSDF_MAGIC {
            return Err(SdfError::BadMagic(bytes[..4].try_into().expect("4 bytes")));
        }
        return Err(SdfError::Truncated {
            expected: VSDF_HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if &magic != VSDF_MAGIC {
        return Err(SdfError::BadMagic(magic));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    let version = u32_at(4);
    if version != VSDF_VERSION {
        return Err(SdfError::VersionMismatch { found: version });
    }
    let (nx, ny, nz) = (u32_at(8), u32_at(12), u32_at(16));
    let cells = (nx as u64).checked_mul(ny as u64).and_then(|v| v.checked_mul(nz as u64));
    let cells = match cells {
        Some(c) if c > 0 && c <= VSDF_MAX_CELLS => c,
        _ => return Err(SdfError::DimensionOverflow { nx, ny, nz }),
    };
    let origin = [f64_at(20), f64_at(28), f64_at(36)];
    let spacing = [f64_at(44), f64_at(52), f64_at(60)];
    let positive_inside = bytes[68] == 1;
    let expected = VSDF_HEADER_LEN as u64 + 4 * cells;
    if (bytes.len() as u64) < expected {
        return Err(SdfError::Truncated {
            expected,
            found: bytes.len() as u64,
        });
    }
    let values = bytes[VSDF_HEADER_LEN..expected as usize]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    SdfGrid::new([nx as usize, ny as usize, nz as usize], origin, spacing, values, positive_inside)
}

pub fn write_vsdf(grid: &SdfGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |source| SdfError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&encode_vsdf(grid)).map_err(io)
}

pub fn read_vsdf(path: impl AsRef<Path>) -> Result<SdfGrid> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| SdfError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_vsdf(&bytes)
}

/// Half the largest edge-midpoint sagitta of a sphere mesh: how far the flat
/// facets sit inside the true sphere at worst.
pub fn max_chord_deviation(mesh: &TriMesh, center: Point3, radius: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for t in 0..mesh.triangles().len() {
        let [a, b, c] = mesh.triangle(t);
        let centroid = [0, 1, 2].map(|i| (a[i] + b[i] + c[i]) / 3.0);
        worst = worst.max(radius - geometry::norm(sub(centroid, center)));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::primitives::{icosphere, unit_cube};

    fn brute_nearest(mesh: &TriMesh, p: Point3) -> f64 {
        (0..mesh.triangles().len())
            .map(|t| {
                let [a, b, c] = mesh.triangle(t);
                point_triangle_dist2(p, a, b, c)
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn closest_point_regions() {
        let (a, b, c) = ([0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]);
        assert!(point_triangle_dist2([0.2, 0.2, 0.0], a, b, c) < 1e-30);
        assert_eq!(point_triangle_dist2([0.2, 0.2, 2.0], a, b, c), 4.0);
        assert_eq!(point_triangle_dist2([-1.0, -1.0, 0.0], a, b, c), 2.0);
        assert_eq!(point_triangle_dist2([2.0, 0.0, 0.0], a, b, c), 1.0);
        assert_eq!(point_triangle_dist2([0.5, -3.0, 0.0], a, b, c), 9.0);
        assert!((point_triangle_dist2([1.0, 1.0, 0.0], a, b, c) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn single_triangle_bvh_is_one_leaf() {
        let m = TriMesh::new("t", vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], vec![[0, 1, 2]]).unwrap();
        let bvh = build_bvh(&m);
        assert_eq!(bvh.nodes().len(), 1);
        assert!(bvh.nodes()[0].is_leaf());
    }

    #[test]
    fn bvh_structure_invariants() {
        let m = icosphere([0.0; 3], 1.0, 3);
        let bvh = build_bvh(&m);
        let mut seen = vec![0usize; m.triangles().len()];
        for node in bvh.nodes() {
            if let Some(r) = node.leaf_range() {
                assert!(r.len() <= LEAF_SIZE);
                for slot in r {
                    let t = bvh.order()[slot] as usize;
                    seen[t] += 1;
                    for p in m.triangle(t) {
                        assert!(node.bbox.contains(p));
                    }
                }
            }
        }
        assert!(seen.iter().all(|&n| n == 1));
    }

    #[test]
    fn cube_distances() {
        let m = unit_cube();
        let bvh = build_bvh(&m);
        assert_eq!(unsigned_distance(&bvh, [2.0, 0.5, 0.5]), 1.0);
        assert_eq!(unsigned_distance(&bvh, [0.5, 0.5, 0.5]), 0.5);
        assert_eq!(unsigned_distance(&bvh, [2.0, 2.0, 2.0]), 3f64.sqrt());
        assert_eq!(unsigned_distance(&bvh, [0.3, 0.7, 1.0]), 0.0);
    }

    #[test]
    fn bvh_matches_exhaustive_on_icosphere() {
        use rand::{Rng, SeedableRng};
        let m = icosphere([0.1, -0.2, 0.05], 0.8, 5);
        assert_eq!(m.triangles().len(), 20480);
        let bvh = build_bvh(&m);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let p = [0, 1, 2].map(|_| rng.gen_range(-1.5..1.5));
            assert_eq!(bvh.nearest(p).0, brute_nearest(&m, p));
        }
    }

    #[test]
    fn inside_test_cube() {
        let m = unit_cube();
        let bvh = build_bvh(&m);
        let s = [0.1; 3];
        assert_eq!(inside_test(&bvh, [0.5, 0.5, 0.5], s), 1);
        assert_eq!(inside_test(&bvh, [5.0, 5.0, 5.0], s), -1);
        assert_eq!(inside_test(&bvh, [-0.5, 0.5, 0.5], s), -1);
    }

    #[test]
    fn open_cube_center_still_inside() {
        let m = unit_cube();
        // drop one x = max facet: only the +X ray loses its crossing
        let tris: Vec<_> = m.triangles().iter().copied().filter(|t| *t != [1, 3, 5]).collect();
        let open = TriMesh::new("open", m.vertices().to_vec(), tris).unwrap();
        let bvh = build_bvh(&open);
        assert_eq!(inside_test(&bvh, [0.5, 0.5, 0.5], [0.1; 3]), 1);
    }

    #[test]
    fn sdf_cube_center_and_corner() {
        let m = unit_cube();
        let d = DomainSpec::new(Aabb::new([-1.0; 3], [2.0; 3]), [8, 8, 8]).unwrap();
        let g = generate_sdf(&m, &d).unwrap();
        // spacing 0.375, cell centers -0.8125 + 0.375 i; none hits 0.5 exactly,
        // so probe the nearest-to-center cell analytically
        let c = g.cell_center(3, 3, 3);
        assert_eq!(c, [0.3125; 3]);
        assert_eq!(g.get(3, 3, 3), 0.3125);
        let corner = g.cell_center(0, 0, 0);
        let expect = (3.0 * (corner[0]).powi(2)).sqrt();
        assert_eq!(g.get(0, 0, 0), -(expect as f32));
    }

    #[test]
    fn sdf_cube_center_cell_is_half() {
        let m = unit_cube();
        // spacing 0.5 from -0.75 puts cell (2, 2, 2) on the cube center
        let d = DomainSpec::new(Aabb::new([-0.75; 3], [1.75; 3]), [5, 5, 5]).unwrap();
        let g = generate_sdf(&m, &d).unwrap();
        assert_eq!(g.cell_center(2, 2, 2), [0.5; 3]);
        assert_eq!(g.get(2, 2, 2), 0.5);
    }

    #[test]
    fn overflow_is_reported() {
        let m = crate::primitives::cuboid([0.0; 3], [5.0, 1.0, 1.0]);
        let d = DomainSpec::centered([4.0, 4.0, 4.0], [8, 8, 8]);
        let err = generate_sdf(&m.translated([-2.5, -0.5, -0.5]), &d).unwrap_err();
        assert!(err.to_string().contains("on X"), "{err}");
    }

    #[test]
    fn oracle_guard() {
        let m = icosphere([0.0; 3], 0.5, 6);
        let d = DomainSpec::centered([2.0; 3], [4, 4, 4]);
        assert!(matches!(sdf_oracle(&m, &d), Err(SdfError::OracleGuard { .. })));
        let d = DomainSpec::centered([2.0; 3], [33, 32, 32]);
        assert!(matches!(sdf_oracle(&unit_cube().translated([-0.5; 3]), &d), Err(SdfError::OracleGuard { .. })));
    }

    #[test]
    fn convention_flip_negates() {
        let m = unit_cube();
        let d = DomainSpec::new(Aabb::new([-1.0; 3], [2.0; 3]), [6, 6, 6]).unwrap();
        let g = generate_sdf(&m, &d).unwrap();
        let f = g.with_convention(false);
        assert!(!f.positive_inside);
        for (a, b) in g.values.iter().zip(&f.values) {
            assert_eq!(*a, -*b);
        }
        assert_eq!(f.with_convention(true), g);
    }

    #[test]
    fn vsdf_layout() {
        let g = SdfGrid::new([2, 2, 2], [0.0; 3], [1.0; 3], vec![0.0; 8], true).unwrap();
        let bytes = encode_vsdf(&g);
        assert_eq!(bytes.len(), 72 + 32);
        assert_eq!(&bytes[..4], b"VSDF");
        assert_eq!(bytes[68], 1);
        assert_eq!(&bytes[69..72], &[0, 0, 0]);
        assert_eq!(decode_vsdf(&bytes).unwrap(), g);
    }

    #[test]
    fn vsdf_errors() {
        let g = SdfGrid::new([2, 2, 2], [0.0; 3], [1.0; 3], vec![1.5; 8], true).unwrap();
        let good = encode_vsdf(&g);
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_vsdf(&bad), Err(SdfError::BadMagic(m)) if &m == b"XSDF"));
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(decode_vsdf(&bad), Err(SdfError::VersionMismatch { found: 2 })));
        assert!(matches!(decode_vsdf(&good[..good.len() - 1]), Err(SdfError::Truncated { .. })));
        assert!(matches!(decode_vsdf(&good[..10]), Err(SdfError::Truncated { .. })));
        let mut bad = good.clone();
        bad[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        bad[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(decode_vsdf(&bad), Err(SdfError::DimensionOverflow { .. })));
    }
}
