//! Marching cubes over a [`VoxelGrid`] lattice.
//!
//! The 256-case triangle table is generated at first use rather than
//! transcribed: on every cube face the iso-line segments are oriented so the
//! "inside" corners lie on a fixed side, ambiguous faces keep their inside
//! corners separated, and the segments are chained across faces into closed
//! loops that are fan-triangulated. Both cubes sharing a face derive the same
//! segments from the same four corner values, so the surface is watertight
//! away from the grid boundary.

use std::sync::OnceLock;

use super::VoxelGrid;
use crate::math::Vec3;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SurfaceMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
}

impl SurfaceMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }
}

fn corner_offset(c: usize) -> [usize; 3] {
    [c & 1, (c >> 1) & 1, (c >> 2) & 1]
}

/// `(lower corner, axis)` for each of the 12 cube edges.
fn edges() -> [(usize, usize); 12] {
    let mut out = [(0, 0); 12];
    let mut n = 0;
    for axis in 0..3 {
        for c in 0..8 {
            if c & (1 << axis) == 0 {
                out[n] = (c, axis);
                n += 1;
            }
        }
    }
    out
}

fn edge_between(a: usize, b: usize) -> usize {
    let lo = a.min(b);
    let axis = (a ^ b).trailing_zeros() as usize;
    edges()
        .iter()
        .position(|&e| e == (lo, axis))
        .expect("corners share an edge")
}

/// Corners of each face, counter-clockwise seen from outside the cube.
fn faces() -> Vec<[usize; 4]> {
    let mut out = Vec::with_capacity(6);
    for axis in 0..3 {
        let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
        for side in 0..2 {
            let at = |cu: usize, cv: usize| (side << axis) | (cu << u) | (cv << v);
            let ccw = [at(0, 0), at(1, 0), at(1, 1), at(0, 1)];
            out.push(if side == 1 {
                ccw
            } else {
                [ccw[0], ccw[3], ccw[2], ccw[1]]
            });
        }
    }
    out
}

fn case_triangles(case: usize) -> Vec<[usize; 3]> {
    let inside = |c: usize| (case >> c) & 1 == 1;
    let mut next: [Option<usize>; 12] = [None; 12];
    for face in faces() {
        for i in 0..4 {
            let (a, b) = (face[i], face[(i + 1) % 4]);
            if inside(a) || !inside(b) {
                continue;
            }
            let entry = edge_between(a, b);
            let mut j = (i + 1) % 4;
            while !(inside(face[j]) && !inside(face[(j + 1) % 4])) {
                j = (j + 1) % 4;
            }
            let exit = edge_between(face[j], face[(j + 1) % 4]);
            next[exit] = Some(entry);
        }
    }
    let mut tris = Vec::new();
    let mut seen = [false; 12];
    for start in 0..12 {
        if seen[start] || next[start].is_none() {
            continue;
        }
        let mut cycle = Vec::new();
        let mut e = start;
        while !seen[e] {
            seen[e] = true;
            cycle.push(e);
            e = next[e].expect("segments close into loops");
        }
        for w in 1..cycle.len().saturating_sub(1) {
            tris.push([cycle[0], cycle[w], cycle[w + 1]]);
        }
    }
    tris
}

fn table() -> &'static Vec<Vec<[usize; 3]>> {
    static TABLE: OnceLock<Vec<Vec<[usize; 3]>>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t: Vec<_> = (0..256).map(case_triangles).collect();
        // Orient normals from inside (high density) to outside: with only
        // corner 0 inside, the normal must point toward the opposite corner.
        let mid = |e: usize| {
            let (c, axis) = edges()[e];
            let o = corner_offset(c);
            let mut p = [o[0] as f64, o[1] as f64, o[2] as f64];
            p[axis] += 0.5;
            Vec3::from_slice(&p)
        };
        let tri = t[1][0];
        let n = (mid(tri[1]) - mid(tri[0])).cross(mid(tri[2]) - mid(tri[0]));
        if n.dot(Vec3::splat(1.0)) < 0.0 {
            for case in &mut t {
                for tri in case.iter_mut() {
                    tri.swap(1, 2);
                }
            }
        }
        t
    })
}

/// Extracts the `iso` level set with linear interpolation along lattice edges.
/// Cells with `density >= iso` count as inside.
pub fn marching_cubes(grid: &VoxelGrid, iso: f64) -> SurfaceMesh {
    let g = grid.geometry;
    let k = g.k;
    let table = table();
    let edge_list = edges();
    let mut vertex_of = vec![u32::MAX; 3 * g.len()];
    let mut mesh = SurfaceMesh::default();
    for l in 0..k - 1 {
        for j in 0..k - 1 {
            for i in 0..k - 1 {
                let mut case = 0;
                for c in 0..8 {
                    let o = corner_offset(c);
                    if grid.data[g.index(i + o[0], j + o[1], l + o[2])] >= iso {
                        case |= 1 << c;
                    }
                }
                if case == 0 || case == 255 {
                    continue;
                }
                for tri in &table[case] {
                    let mut ids = [0usize; 3];
                    for (slot, &e) in ids.iter_mut().zip(tri) {
                        let (c, axis) = edge_list[e];
                        let o = corner_offset(c);
                        let (ai, aj, al) = (i + o[0], j + o[1], l + o[2]);
                        let a = g.index(ai, aj, al);
                        let key = 3 * a + axis;
                        if vertex_of[key] == u32::MAX {
                            let mut bo = [ai, aj, al];
                            bo[axis] += 1;
                            let b = g.index(bo[0], bo[1], bo[2]);
                            let (va, vb) = (grid.data[a], grid.data[b]);
                            let t = (iso - va) / (vb - va);
                            let pa = g.point(ai, aj, al);
                            let pb = g.point(bo[0], bo[1], bo[2]);
                            vertex_of[key] = mesh.vertices.len() as u32;
                            mesh.vertices.push(pa + (pb - pa) * t);
                        }
                        *slot = vertex_of[key] as usize;
                    }
                    mesh.triangles.push(ids);
                }
            }
        }
    }
    mesh
}
