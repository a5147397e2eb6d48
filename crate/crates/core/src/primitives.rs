//! Closed reference meshes: cubes, icospheres and midpoint subdivision.

use std::collections::HashMap;

use crate::geometry::{Point3, TriMesh};

/// Axis-aligned box with outward winding, 8 vertices and 12 triangles.
pub fn cuboid(min: Point3, max: Point3) -> TriMesh {
    let v = |i: usize| -> Point3 {
        [
            if i & 1 == 0 { min[0] } else { max[0] },
            if i & 2 == 0 { min[1] } else { max[1] },
            if i & 4 == 0 { min[2] } else { max[2] },
        ]
    };
    let vertices = (0..8).map(v).collect();
    let triangles = vec![
        [0, 2, 1], [1, 2, 3], // z = min
        [4, 5, 6], [5, 7, 6], // z = max
        [0, 1, 4], [1, 5, 4], // y = min
        [2, 6, 3], [3, 6, 7], // y = max
        [0, 4, 2], [2, 4, 6], // x = min
        [1, 3, 5], [3, 7, 5], // x = max
    ];
    TriMesh::new("cuboid", vertices, triangles).expect("cuboid is valid")
}

pub fn unit_cube() -> TriMesh {
    cuboid([0.0; 3], [1.0; 3])
}

/// Icosphere with `20 * 4^level` faces; vertices lie exactly on the sphere.
pub fn icosphere(center: Point3, radius: f64, level: u32) -> TriMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Point3> = vec![
        [-1.0, t, 0.0], [1.0, t, 0.0], [-1.0, -t, 0.0], [1.0, -t, 0.0],
        [0.0, -1.0, t], [0.0, 1.0, t], [0.0, -1.0, -t], [0.0, 1.0, -t],
        [t, 0.0, -1.0], [t, 0.0, 1.0], [-t, 0.0, -1.0], [-t, 0.0, 1.0],
    ];
    let mut faces: Vec<[u32; 3]> = vec![
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ];
    let unit = |p: Point3| {
        let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        [p[0] / n, p[1] / n, p[2] / n]
    };
    for v in verts.iter_mut() {
        *v = unit(*v);
    }
    for _ in 0..level {
        let (v2, f2) = split_faces(&verts, &faces, |a, b| unit([a[0] + b[0], a[1] + b[1], a[2] + b[2]]));
        verts = v2;
        faces = f2;
    }
    let vertices = verts
        .into_iter()
        .map(|p| [center[0] + radius * p[0], center[1] + radius * p[1], center[2] + radius * p[2]])
        .collect();
    TriMesh::new("icosphere", vertices, faces).expect("icosphere is valid")
}

/// One round of 1:4 midpoint subdivision. The surface is unchanged.
pub fn subdivide(mesh: &TriMesh) -> TriMesh {
    let (v, f) = split_faces(mesh.vertices(), mesh.triangles(), |a, b| {
        [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1]), 0.5 * (a[2] + b[2])]
    });
    TriMesh::new(mesh.name(), v, f).expect("subdivision keeps validity")
}

/// Subdivides until the mesh has at least `min_triangles` faces.
pub fn subdivide_to(mesh: &TriMesh, min_triangles: usize) -> TriMesh {
    let mut m = mesh.clone();
    while m.triangles().len() < min_triangles {
        m = subdivide(&m);
    }
    m
}

fn split_faces(
    verts: &[Point3],
    faces: &[[u32; 3]],
    mid: impl Fn(Point3, Point3) -> Point3,
) -> (Vec<Point3>, Vec<[u32; 3]>) {
    let mut out_v = verts.to_vec();
    let mut cache: HashMap<(u32, u32), u32> = HashMap::with_capacity(faces.len() * 2);
    let mut out_f = Vec::with_capacity(faces.len() * 4);
    let mut midpoint = |a: u32, b: u32, out_v: &mut Vec<Point3>| -> u32 {
        *cache.entry((a.min(b), a.max(b))).or_insert_with(|| {
            out_v.push(mid(verts[a as usize], verts[b as usize]));
            (out_v.len() - 1) as u32
        })
    };
    for &[a, b, c] in faces {
        let ab = midpoint(a, b, &mut out_v);
        let bc = midpoint(b, c, &mut out_v);
        let ca = midpoint(c, a, &mut out_v);
        out_f.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
    }
    (out_v, out_f)
}
