//! Triangle meshes, bounding boxes and the fixed voxelization domain.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Point3 = [f64; 3];

const AXES: [char; 3] = ['X', 'Y', 'Z'];

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported mesh format: {0}")]
    UnsupportedFormat(String),
    #[error("non-triangular face at line {line} ({count} vertices)")]
    NonTriangularFace { line: usize, count: usize },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("empty mesh: {0}")]
    EmptyMesh(String),
    #[error("triangle {triangle} references vertex {index} but the mesh has {count} vertices")]
    IndexOutOfRange {
        triangle: usize,
        index: u32,
        count: usize,
    },
    #[error("degenerate triangle {0}")]
    DegenerateTriangle(usize),
    #[error("domain overflow on {axis}: mesh extent {extent} m exceeds domain extent {domain} m")]
    DomainOverflow { axis: char, extent: f64, domain: f64 },
    #[error("invalid domain: {0}")]
    InvalidDomain(String),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Point3,
    pub max: Point3,
}

impl Aabb {
    pub fn new(min: Point3, max: Point3) -> Self {
        Self { min, max }
    }

    pub fn empty() -> Self {
        Self {
            min: [f64::INFINITY; 3],
            max: [f64::NEG_INFINITY; 3],
        }
    }

    pub fn grow(&mut self, p: Point3) {
        for a in 0..3 {
            self.min[a] = self.min[a].min(p[a]);
            self.max[a] = self.max[a].max(p[a]);
        }
    }

    pub fn union(&self, other: &Aabb) -> Aabb {
        let mut out = *self;
        out.grow(other.min);
        out.grow(other.max);
        out
    }

    pub fn center(&self) -> Point3 {
        [0, 1, 2].map(|a| 0.5 * (self.min[a] + self.max[a]))
    }

    pub fn extent(&self) -> Point3 {
        [0, 1, 2].map(|a| self.max[a] - self.min[a])
    }

    pub fn diagonal(&self) -> f64 {
        norm(self.extent())
    }

    pub fn contains(&self, p: Point3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }
}

/// The fixed voxelization domain: a box and the number of cells per axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    #[serde(rename = "box")]
    pub bbox: Aabb,
    pub dims: [usize; 3],
}

impl DomainSpec {
    pub fn new(bbox: Aabb, dims: [usize; 3]) -> Result<Self> {
        let d = Self { bbox, dims };
        d.validate()?;
        Ok(d)
    }

    /// 6.0 x 2.4 x 2.4 m box centered at the origin on a 128 x 32 x 32 grid.
    pub fn default_fleet() -> Self {
        Self::centered([6.0, 2.4, 2.4], [128, 32, 32])
    }

    pub fn centered(extent: Point3, dims: [usize; 3]) -> Self {
        let half = extent.map(|e| 0.5 * e);
        Self {
            bbox: Aabb::new(half.map(|h| -h), half),
            dims,
        }
    }

    pub fn with_dims(&self, dims: [usize; 3]) -> Self {
        Self { dims, ..*self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 2) {
            return Err(GeometryError::InvalidDomain(format!(
                "dims {:?} must all be >= 2",
                self.dims
            )));
        }
        let e = self.bbox.extent();
        if e.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(GeometryError::InvalidDomain(format!(
                "box extent {e:?} must be strictly positive"
            )));
        }
        Ok(())
    }

    pub fn spacing(&self) -> Point3 {
        let e = self.bbox.extent();
        [0, 1, 2].map(|a| e[a] / self.dims[a] as f64)
    }

    /// Center of cell `(0, 0, 0)`.
    pub fn origin(&self) -> Point3 {
        let s = self.spacing();
        [0, 1, 2].map(|a| self.bbox.min[a] + 0.5 * s[a])
    }

    pub fn cell_center(&self, i: usize, j: usize, k: usize) -> Point3 {
        let (o, s) = (self.origin(), self.spacing());
        [o[0] + i as f64 * s[0], o[1] + j as f64 * s[1], o[2] + k as f64 * s[2]]
    }

    pub fn num_cells(&self) -> usize {
        self.dims.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TriMesh {
    vertices: Vec<Point3>,
    triangles: Vec<[u32; 3]>,
    name: String,
}

impl TriMesh {
    /// Validates indices, rejects triangles with repeated indices, and
    /// requires at least 3 vertices and 1 triangle.
    pub fn new(name: impl Into<String>, vertices: Vec<Point3>, triangles: Vec<[u32; 3]>) -> Result<Self> {
        let name = name.into();
        if vertices.len() < 3 || triangles.is_empty() {
            return Err(GeometryError::EmptyMesh(format!(
                "{name}: {} vertices, {} triangles",
                vertices.len(),
                triangles.len()
            )));
        }
        for (t, tri) in triangles.iter().enumerate() {
            for &i in tri {
                if i as usize >= vertices.len() {
                    return Err(GeometryError::IndexOutOfRange {
                        triangle: t,
                        index: i,
                        count: vertices.len(),
                    });
                }
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(GeometryError::DegenerateTriangle(t));
            }
        }
        Ok(Self {
            vertices,
            triangles,
            name,
        })
    }

    /// Drops degenerate (repeated-index or zero-area) triangles when `fix` is
    /// set, errors on the first one otherwise.
    pub fn with_degenerate_policy(
        name: impl Into<String>,
        vertices: Vec<Point3>,
        triangles: Vec<[u32; 3]>,
        fix: bool,
    ) -> Result<Self> {
        let mut kept = Vec::with_capacity(triangles.len());
        for (t, tri) in triangles.into_iter().enumerate() {
            let in_range = tri.iter().all(|&i| (i as usize) < vertices.len());
            let degenerate = in_range && {
                let [a, b, c] = tri.map(|i| vertices[i as usize]);
                tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] || norm(cross(sub(b, a), sub(c, a))) == 0.0
            };
            if degenerate {
                if fix {
                    continue;
                }
                return Err(GeometryError::DegenerateTriangle(t));
            }
            kept.push(tri);
        }
        Self::new(name, vertices, kept)
    }

    pub fn vertices(&self) -> &[Point3] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[u32; 3]] {
        &self.triangles
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn set_name(&mut self, name: &str) {
        self.name = name.to_string();
    }

    pub fn triangle(&self, t: usize) -> [Point3; 3] {
        self.triangles[t].map(|i| self.vertices[i as usize])
    }

    pub fn translated(&self, offset: Point3) -> TriMesh {
        TriMesh {
            vertices: self.vertices.iter().map(|&v| add(v, offset)).collect(),
            triangles: self.triangles.clone(),
            name: self.name.clone(),
        }
    }

    /// Euler characteristic `V - E + F` over referenced vertices.
    pub fn euler_characteristic(&self) -> i64 {
        let mut used = vec![false; self.vertices.len()];
        for t in &self.triangles {
            for &i in t {
                used[i as usize] = true;
            }
        }
        let v = used.iter().filter(|u| **u).count() as i64;
        let e = self.edge_use_counts().len() as i64;
        v - e + self.triangles.len() as i64
    }

    /// Number of triangles sharing each undirected edge.
    pub fn edge_use_counts(&self) -> HashMap<(u32, u32), usize> {
        let mut edges = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *edges.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        edges
    }

    /// Every edge is shared by exactly two triangles, with opposite directions.
    pub fn is_closed_manifold(&self) -> bool {
        let mut directed: HashMap<(u32, u32), usize> = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                *directed.entry((t[k], t[(k + 1) % 3])).or_insert(0) += 1;
            }
        }
        directed
            .iter()
            .all(|(&(a, b), &n)| n == 1 && directed.get(&(b, a)) == Some(&1))
    }

    /// Signed volume via the divergence theorem; positive for outward winding.
    pub fn signed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|i| self.vertices[i as usize]);
                dot(a, cross(b, c)) / 6.0
            })
            .sum()
    }
}

/// Tight bounds of all vertices referenced by a triangle.
pub fn compute_bbox(mesh: &TriMesh) -> Aabb {
    let mut b = Aabb::empty();
    for t in mesh.triangles() {
        for &i in t {
            b.grow(mesh.vertices()[i as usize]);
        }
    }
    b
}

/// Translates `mesh` so its bounding-box center coincides with the domain
/// center. Offsets below `1e-12` of the domain diagonal are treated as zero,
/// which makes the operation idempotent.
pub fn center_in_domain(mesh: &TriMesh, domain: &DomainSpec) -> Result<TriMesh> {
    domain.validate()?;
    let bb = compute_bbox(mesh);
    let (me, de) = (bb.extent(), domain.bbox.extent());
    for a in 0..3 {
        if me[a] > de[a] {
            return Err(GeometryError::DomainOverflow {
                axis: AXES[a],
                extent: me[a],
                domain: de[a],
            });
        }
    }
    let snap = 1e-12 * domain.bbox.diagonal();
    let (mc, dc) = (bb.center(), domain.bbox.center());
    let offset = [0, 1, 2].map(|a| {
        let d = dc[a] - mc[a];
        if d.abs() <= snap {
            0.0
        } else {
            d
        }
    });
    if offset == [0.0; 3] {
        return Ok(mesh.clone());
    }
    Ok(mesh.translated(offset))
}

/// Errors with the first axis on which `mesh` leaves the domain box.
pub fn check_inside_domain(mesh: &TriMesh, domain: &DomainSpec) -> Result<()> {
    let bb = compute_bbox(mesh);
    let tol = 1e-9 * domain.bbox.diagonal();
    for a in 0..3 {
        if bb.min[a] < domain.bbox.min[a] - tol || bb.max[a] > domain.bbox.max[a] + tol {
            return Err(GeometryError::DomainOverflow {
                axis: AXES[a],
                extent: bb.max[a] - bb.min[a],
                domain: domain.bbox.max[a] - domain.bbox.min[a],
            });
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// file formats

fn io_err(path: &Path, source: std::io::Error) -> GeometryError {
    GeometryError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Loads binary STL, ASCII STL or OBJ (triangles only). STL vertices are
/// welded by exact coordinate equality.
pub fn load_mesh(path: impl AsRef<Path>, fix_degenerate: bool) -> Result<TriMesh> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let ext = path
        .extension()
        .map(|e| e.to_string_lossy().to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "obj" => parse_obj(&name, &String::from_utf8_lossy(&bytes), fix_degenerate),
        "stl" => parse_stl(&name, &bytes, fix_degenerate),
        other => {
            if is_binary_stl(&bytes) || bytes.starts_with(b"solid") {
                parse_stl(&name, &bytes, fix_degenerate)
            } else {
                Err(GeometryError::UnsupportedFormat(format!(
                    "{} (extension `{other}`)",
                    path.display()
                )))
            }
        }
    }
}

fn is_binary_stl(bytes: &[u8]) -> bool {
    if bytes.len() < 84 {
        return false;
    }
    let n = u32::from_le_bytes(bytes[80..84].try_into().expect("4 bytes")) as u64;
    bytes.len() as u64 == 84 + 50 * n
}

pub fn parse_stl(name: &str, bytes: &[u8], fix_degenerate: bool) -> Result<TriMesh> {
    let soup = if is_binary_stl(bytes) {
        let n = u32::from_le_bytes(bytes[80..84].try_into().expect("4 bytes")) as usize;
        let mut soup = Vec::with_capacity(n);
        for f in 0..n {
            let rec = &bytes[84 + 50 * f..84 + 50 * (f + 1)];
            let read = |k: usize| -> Point3 {
                [0, 1, 2].map(|a| {
                    let o = 12 + 12 * k + 4 * a;
                    f32::from_le_bytes(rec[o..o + 4].try_into().expect("4 bytes")) as f64
                })
            };
            soup.push([read(0), read(1), read(2)]);
        }
        soup
    } else if bytes.starts_with(b"solid") {
        parse_ascii_stl(&String::from_utf8_lossy(bytes))?
    } else {
        return Err(GeometryError::UnsupportedFormat(
            "neither binary STL nor ASCII STL".into(),
        ));
    };
    let (vertices, triangles) = weld(&soup);
    TriMesh::with_degenerate_policy(name, vertices, triangles, fix_degenerate)
}

fn parse_ascii_stl(text: &str) -> Result<Vec<[Point3; 3]>> {
    let mut soup = Vec::new();
    let mut current: Vec<Point3> = Vec::with_capacity(3);
    for (ln, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        match it.next() {
            Some("vertex") => {
                let mut p = [0.0; 3];
                for c in p.iter_mut() {
                    *c = it
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| GeometryError::Parse {
                            line: ln + 1,
                            message: "bad vertex record".into(),
                        })?;
                }
                current.push(p);
            }
            Some("endloop") => {
                if current.len() != 3 {
                    return Err(GeometryError::NonTriangularFace {
                        line: ln + 1,
                        count: current.len(),
                    });
                }
                soup.push([current[0], current[1], current[2]]);
                current.clear();
            }
            _ => {}
        }
    }
    Ok(soup)
}

fn weld(soup: &[[Point3; 3]]) -> (Vec<Point3>, Vec<[u32; 3]>) {
    let key = |p: Point3| p.map(|c| if c == 0.0 { 0u64 } else { c.to_bits() });
    let mut index: HashMap<[u64; 3], u32> = HashMap::with_capacity(soup.len() * 2);
    let mut vertices = Vec::new();
    let triangles = soup
        .iter()
        .map(|tri| {
            tri.map(|p| {
                *index.entry(key(p)).or_insert_with(|| {
                    vertices.push(p);
                    (vertices.len() - 1) as u32
                })
            })
        })
        .collect();
    (vertices, triangles)
}

pub fn parse_obj(name: &str, text: &str, fix_degenerate: bool) -> Result<TriMesh> {
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("");
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let coords: Vec<f64> = it.take(3).map(|s| s.parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|e| {
                    GeometryError::Parse {
                        line: ln + 1,
                        message: e.to_string(),
                    }
                })?;
                if coords.len() != 3 {
                    return Err(GeometryError::Parse {
                        line: ln + 1,
                        message: "vertex needs 3 coordinates".into(),
                    });
                }
                vertices.push([coords[0], coords[1], coords[2]]);
            }
            Some("f") => {
                let refs: Vec<&str> = it.collect();
                if refs.len() != 3 {
                    return Err(GeometryError::NonTriangularFace {
                        line: ln + 1,
                        count: refs.len(),
                    });
                }
                let mut tri = [0u32; 3];
                for (slot, r) in tri.iter_mut().zip(&refs) {
                    let head = r.split('/').next().unwrap_or("");
                    let idx: i64 = head.parse().map_err(|_| GeometryError::Parse {
                        line: ln + 1,
                        message: format!("bad face index `{r}`"),
                    })?;
                    let resolved = match idx {
                        i if i > 0 => i - 1,
                        i if i < 0 => vertices.len() as i64 + i,
                        _ => -1,
                    };
                    if resolved < 0 || resolved as usize >= vertices.len() {
                        return Err(GeometryError::Parse {
                            line: ln + 1,
                            message: format!("face index {idx} out of range"),
                        });
                    }
                    *slot = resolved as u32;
                }
                triangles.push(tri);
            }
            _ => {}
        }
    }
    TriMesh::with_degenerate_policy(name, vertices, triangles, fix_degenerate)
}

/// Binary STL with per-facet normals; coordinates are narrowed to f32.
pub fn write_stl(mesh: &TriMesh, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(84 + 50 * mesh.triangles().len());
    let mut header = [0u8; 80];
    let tag = format!("binary stl: {}", mesh.name());
    let n = tag.len().min(80);
    header[..n].copy_from_slice(&tag.as_bytes()[..n]);
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&(mesh.triangles().len() as u32).to_le_bytes());
    for t in 0..mesh.triangles().len() {
        let [a, b, c] = mesh.triangle(t);
        let nrm = cross(sub(b, a), sub(c, a));
        let len = norm(nrm);
        let nrm = if len > 0.0 { nrm.map(|v| v / len) } else { [0.0; 3] };
        for p in [nrm, a, b, c] {
            for v in p {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        buf.extend_from_slice(&[0, 0]);
    }
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&buf).map_err(|e| io_err(path, e))
}

/// Wavefront OBJ with full-precision coordinates.
pub fn write_obj(mesh: &TriMesh, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::new();
    for v in mesh.vertices() {
        s.push_str(&format!("v {} {} {}\n", v[0], v[1], v[2]));
    }
    for t in mesh.triangles() {
        s.push_str(&format!("f {} {} {}\n", t[0] + 1, t[1] + 1, t[2] + 1));
    }
    fs::write(path, s).map_err(|e| io_err(path, e))
}

// ---------------------------------------------------------------------------
// small vector helpers

#[inline]
pub fn add(a: Point3, b: Point3) -> Point3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale(a: Point3, s: f64) -> Point3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: Point3, b: Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: Point3, b: Point3) -> Point3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm(a: Point3) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad_obj() -> &'static str {
        "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n"
    }

    #[test]
    fn quad_face_is_rejected() {
        let err = parse_obj("q", quad_obj(), false).unwrap_err();
        assert!(err.to_string().contains("non-triangular face"), "{err}");
    }

    #[test]
    fn obj_supports_slashes_and_negative_indices() {
        let m = parse_obj("t", "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1/1/1 2//2 -1\n", false).unwrap();
        assert_eq!(m.triangles(), &[[0, 1, 2]]);
    }

    #[test]
    fn ascii_stl_single_facet() {
        let text = "solid t\nfacet normal 0 0 1\nouter loop\nvertex 0 0 0\nvertex 1 0 0\nvertex 0 1 0\nendloop\nendfacet\nendsolid t\n";
        let m = parse_stl("t", text.as_bytes(), false).unwrap();
        assert_eq!(m.vertices().len(), 3);
        assert_eq!(m.triangles().len(), 1);
    }

    #[test]
    fn degenerate_triangles_dropped_or_rejected() {
        let verts = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [2.0, 0.0, 0.0]];
        // second triangle is collinear (zero area)
        let tris = vec![[0, 1, 2], [0, 1, 3]];
        assert!(matches!(
            TriMesh::with_degenerate_policy("d", verts.clone(), tris.clone(), false),
            Err(GeometryError::DegenerateTriangle(1))
        ));
        let m = TriMesh::with_degenerate_policy("d", verts, tris, true).unwrap();
        assert_eq!(m.triangles().len(), 1);
    }

    #[test]
    fn empty_mesh_rejected() {
        assert!(matches!(
            parse_obj("e", "v 0 0 0\n", false),
            Err(GeometryError::EmptyMesh(_))
        ));
    }

    #[test]
    fn unknown_extension_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("mesh.ply");
        fs::write(&p, "ply\nformat ascii 1.0\n").unwrap();
        assert!(matches!(load_mesh(&p, false), Err(GeometryError::UnsupportedFormat(_))));
    }

    #[test]
    fn domain_geometry() {
        let d = DomainSpec::default_fleet();
        assert_eq!(d.dims, [128, 32, 32]);
        assert_eq!(d.spacing(), [0.046875, 0.075, 0.075]);
        assert_eq!(d.origin(), [-3.0 + 0.0234375, -1.2 + 0.0375, -1.2 + 0.0375]);
        assert!(DomainSpec::new(d.bbox, [1, 2, 2]).is_err());
        assert!(DomainSpec::new(Aabb::new([0.0; 3], [1.0, 0.0, 1.0]), [2, 2, 2]).is_err());
    }
}
