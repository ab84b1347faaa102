//! Triangle meshes: marching-cubes extraction from SDF grids, area-weighted
//! surface sampling, and ASCII PLY/OBJ export.

use crate::mc_tables::{EDGE_CORNERS, EDGE_TABLE, TRIANGLE_TABLE};
use crate::sdf::SdfGrid;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::io::{self, Write};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MeshError {
    #[error("the level set is empty: no value crosses iso={0}")]
    NoCrossing(f64),
    #[error("mesh has no triangles")]
    EmptyMesh,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[usize; 3]>,
    pub normals: Option<Vec<Vector3<f64>>>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn face_normal(&self, t: usize) -> Vector3<f64> {
        let [a, b, c] = self.triangles[t];
        let n = (self.vertices[b] - self.vertices[a]).cross(&(self.vertices[c] - self.vertices[a]));
        let len = n.norm();
        if len < 1e-30 {
            Vector3::z()
        } else {
            n / len
        }
    }

    pub fn face_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        0.5 * (self.vertices[b] - self.vertices[a])
            .cross(&(self.vertices[c] - self.vertices[a]))
            .norm()
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.face_area(t)).sum()
    }

    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let mut min = Vector3::repeat(f64::INFINITY);
        let mut max = Vector3::repeat(f64::NEG_INFINITY);
        for v in &self.vertices {
            min = min.inf(v);
            max = max.sup(v);
        }
        (min, max)
    }

    /// Area-weighted uniform surface samples with their face normals.
    /// Deterministic for a given seed.
    pub fn sample_surface(&self, n: usize, seed: u64) -> Result<Vec<(Vector3<f64>, Vector3<f64>)>, MeshError> {
        if self.triangles.is_empty() {
            return Err(MeshError::EmptyMesh);
        }
        let mut cumulative = Vec::with_capacity(self.triangles.len());
        let mut total = 0.0;
        for t in 0..self.triangles.len() {
            total += self.face_area(t);
            cumulative.push(total);
        }
        if total <= 0.0 {
            return Err(MeshError::EmptyMesh);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let target = rng.random_range(0.0..total);
            let t = cumulative.partition_point(|&c| c < target).min(self.triangles.len() - 1);
            let [a, b, c] = self.triangles[t];
            let (mut r1, r2) = (rng.random::<f64>(), rng.random::<f64>());
            let mut r2 = r2;
            if r1 + r2 > 1.0 {
                r1 = 1.0 - r1;
                r2 = 1.0 - r2;
            }
            let p = self.vertices[a]
                + (self.vertices[b] - self.vertices[a]) * r1
                + (self.vertices[c] - self.vertices[a]) * r2;
            out.push((p, self.face_normal(t)));
        }
        Ok(out)
    }

    /// ASCII PLY with vertices in world units (and normals when present).
    pub fn write_ply<W: Write>(&self, mut w: W) -> io::Result<()> {
        let has_normals = self.normals.is_some();
        writeln!(w, "ply")?;
        writeln!(w, "format ascii 1.0")?;
        writeln!(w, "element vertex {}", self.vertices.len())?;
        writeln!(w, "property double x")?;
        writeln!(w, "property double y")?;
        writeln!(w, "property double z")?;
        if has_normals {
            writeln!(w, "property double nx")?;
            writeln!(w, "property double ny")?;
            writeln!(w, "property double nz")?;
        }
        writeln!(w, "element face {}", self.triangles.len())?;
        writeln!(w, "property list uchar int vertex_indices")?;
        writeln!(w, "end_header")?;
        for (i, v) in self.vertices.iter().enumerate() {
            if let Some(normals) = &self.normals {
                let n = normals[i];
                writeln!(w, "{} {} {} {} {} {}", v.x, v.y, v.z, n.x, n.y, n.z)?;
            } else {
                writeln!(w, "{} {} {}", v.x, v.y, v.z)?;
            }
        }
        for t in &self.triangles {
            writeln!(w, "3 {} {} {}", t[0], t[1], t[2])?;
        }
        Ok(())
    }

    /// Wavefront OBJ with 1-based indices.
    pub fn write_obj<W: Write>(&self, mut w: W) -> io::Result<()> {
        for v in &self.vertices {
            writeln!(w, "v {} {} {}", v.x, v.y, v.z)?;
        }
        if let Some(normals) = &self.normals {
            for n in normals {
                writeln!(w, "vn {} {} {}", n.x, n.y, n.z)?;
            }
            for t in &self.triangles {
                writeln!(
                    w,
                    "f {}//{} {}//{} {}//{}",
                    t[0] + 1,
                    t[0] + 1,
                    t[1] + 1,
                    t[1] + 1,
                    t[2] + 1,
                    t[2] + 1
                )?;
            }
        } else {
            for t in &self.triangles {
                writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
            }
        }
        Ok(())
    }
}

/// Corner offsets in grid index space, matching the edge/triangle tables.
const CORNER_OFFSETS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

/// Extracts the iso-level set of the grid as a triangle mesh via the
/// canonical 256-case marching cubes table with linear edge interpolation.
/// Shared cell edges reuse vertices, so the surface is watertight wherever
/// the table is consistent. Deterministic: identical grids give bit-identical
/// meshes.
pub fn extract_mesh(grid: &SdfGrid, iso: f64) -> Result<TriangleMesh, MeshError> {
    let d = grid.resolution();
    let values = grid.values();
    let below = values.iter().any(|&v| v < iso);
    let above = values.iter().any(|&v| v > iso);
    if !(below && above) {
        return Err(MeshError::NoCrossing(iso));
    }

    let mut vertices: Vec<Vector3<f64>> = Vec::new();
    // Canonical edge key (axis, x, y, z of the lower node) -> vertex index.
    let mut edge_vertices: HashMap<(u8, usize, usize, usize), usize> = HashMap::new();
    let mut triangles: Vec<[usize; 3]> = Vec::new();

    let edge_key = |edge: usize, cx: usize, cy: usize, cz: usize| -> (u8, usize, usize, usize) {
        let [c0, c1] = EDGE_CORNERS[edge];
        let a = CORNER_OFFSETS[c0];
        let b = CORNER_OFFSETS[c1];
        let base = (
            cx + a[0].min(b[0]),
            cy + a[1].min(b[1]),
            cz + a[2].min(b[2]),
        );
        let axis = if a[0] != b[0] {
            0u8
        } else if a[1] != b[1] {
            1
        } else {
            2
        };
        (axis, base.0, base.1, base.2)
    };

    for cz in 0..d - 1 {
        for cy in 0..d - 1 {
            for cx in 0..d - 1 {
                let corner_vals: [f64; 8] = std::array::from_fn(|i| {
                    let o = CORNER_OFFSETS[i];
                    grid.value(cx + o[0], cy + o[1], cz + o[2])
                });
                let mut case = 0usize;
                for (i, &v) in corner_vals.iter().enumerate() {
                    if v < iso {
                        case |= 1 << i;
                    }
                }
                if EDGE_TABLE[case] == 0 {
                    continue;
                }
                let mut cell_edge_vertex = [usize::MAX; 12];
                for edge in 0..12 {
                    if EDGE_TABLE[case] & (1 << edge) == 0 {
                        continue;
                    }
                    let key = edge_key(edge, cx, cy, cz);
                    let idx = *edge_vertices.entry(key).or_insert_with(|| {
                        let [c0, c1] = EDGE_CORNERS[edge];
                        let o0 = CORNER_OFFSETS[c0];
                        let o1 = CORNER_OFFSETS[c1];
                        let p0 = grid.node_position(cx + o0[0], cy + o0[1], cz + o0[2]);
                        let p1 = grid.node_position(cx + o1[0], cy + o1[1], cz + o1[2]);
                        let (v0, v1) = (corner_vals[c0], corner_vals[c1]);
                        let t = if (v1 - v0).abs() < 1e-30 {
                            0.5
                        } else {
                            ((iso - v0) / (v1 - v0)).clamp(0.0, 1.0)
                        };
                        vertices.push(p0 + (p1 - p0) * t);
                        vertices.len() - 1
                    });
                    cell_edge_vertex[edge] = idx;
                }
                let row = &TRIANGLE_TABLE[case];
                let mut i = 0;
                while row[i] >= 0 {
                    let tri = [
                        cell_edge_vertex[row[i] as usize],
                        cell_edge_vertex[row[i + 1] as usize],
                        cell_edge_vertex[row[i + 2] as usize],
                    ];
                    // Drop degenerate slivers produced when the iso level
                    // passes exactly through grid nodes.
                    let area2 = (vertices[tri[1]] - vertices[tri[0]])
                        .cross(&(vertices[tri[2]] - vertices[tri[0]]))
                        .norm();
                    if area2 > 2e-12 {
                        triangles.push(tri);
                    }
                    i += 3;
                }
            }
        }
    }

    if triangles.is_empty() {
        return Err(MeshError::NoCrossing(iso));
    }

    // Area-weighted vertex normals from face windings.
    let mut normals = vec![Vector3::zeros(); vertices.len()];
    for t in &triangles {
        let n = (vertices[t[1]] - vertices[t[0]]).cross(&(vertices[t[2]] - vertices[t[0]]));
        for &vi in t {
            normals[vi] += n;
        }
    }
    for n in &mut normals {
        let len = n.norm();
        *n = if len < 1e-30 { Vector3::z() } else { *n / len };
    }

    Ok(TriangleMesh {
        vertices,
        triangles,
        normals: Some(normals),
    })
}
