//! Discretized signed-distance volumes: trilinear sampling with analytic
//! gradients, plus exact analytic primitives used to build test shapes and
//! ground-truth geometry.

use crate::par;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SdfError {
    #[error("unknown primitive '{0}'")]
    UnknownPrimitive(String),
    #[error("grid resolution {0} is below the minimum of {1}")]
    ResolutionTooSmall(usize, usize),
    #[error("query point is outside the grid interior")]
    OutsideInterior,
    #[error("value buffer has {got} entries, expected {expected}")]
    ValueCountMismatch { got: usize, expected: usize },
}

/// Placement of a cubic sample lattice: `resolution^3` nodes spaced
/// `voxel_size` apart, the first node at `origin`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub resolution: usize,
    pub origin: [f64; 3],
    pub voxel_size: f64,
}

impl GridSpec {
    /// Lattice spanning the cube `center +- half_extent` with `resolution`
    /// nodes per axis (nodes on the cube faces).
    pub fn cube(center: [f64; 3], half_extent: f64, resolution: usize) -> Self {
        let voxel_size = 2.0 * half_extent / (resolution - 1) as f64;
        GridSpec {
            resolution,
            origin: [
                center[0] - half_extent,
                center[1] - half_extent,
                center[2] - half_extent,
            ],
            voxel_size,
        }
    }

    /// Default object volume: the cube `[-0.55, 0.55]^3` at 64 nodes per axis,
    /// sized for a unit-normalized object with margin.
    pub fn default_object() -> Self {
        GridSpec::cube([0.0; 3], 0.55, 64)
    }

    pub fn origin_vec(&self) -> Vector3<f64> {
        Vector3::new(self.origin[0], self.origin[1], self.origin[2])
    }
}

/// Voxelized signed-distance volume (negative inside the shape).
#[derive(Debug, Clone, PartialEq)]
pub struct SdfGrid {
    resolution: usize,
    origin: Vector3<f64>,
    voxel_size: f64,
    values: Vec<f64>,
}

impl SdfGrid {
    pub const MIN_RESOLUTION: usize = 8;

    pub fn from_values(spec: &GridSpec, values: Vec<f64>) -> Result<Self, SdfError> {
        let expected = spec.resolution * spec.resolution * spec.resolution;
        if values.len() != expected {
            return Err(SdfError::ValueCountMismatch { got: values.len(), expected });
        }
        if spec.resolution < 2 {
            return Err(SdfError::ResolutionTooSmall(spec.resolution, 2));
        }
        Ok(SdfGrid {
            resolution: spec.resolution,
            origin: spec.origin_vec(),
            voxel_size: spec.voxel_size,
            values,
        })
    }

    /// Samples an exact primitive at every node.
    pub fn from_analytic(shape: &Primitive, spec: &GridSpec) -> Result<Self, SdfError> {
        if spec.resolution < Self::MIN_RESOLUTION {
            return Err(SdfError::ResolutionTooSmall(spec.resolution, Self::MIN_RESOLUTION));
        }
        let d = spec.resolution;
        let origin = spec.origin_vec();
        let h = spec.voxel_size;
        let values = par::map_range(d * d * d, |i| {
            let x = i % d;
            let y = (i / d) % d;
            let z = i / (d * d);
            let p = origin + Vector3::new(x as f64, y as f64, z as f64) * h;
            shape.eval(&p)
        });
        Ok(SdfGrid {
            resolution: d,
            origin,
            voxel_size: h,
            values,
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn origin(&self) -> &Vector3<f64> {
        &self.origin
    }

    pub fn spec(&self) -> GridSpec {
        GridSpec {
            resolution: self.resolution,
            origin: [self.origin.x, self.origin.y, self.origin.z],
            voxel_size: self.voxel_size,
        }
    }

    /// World-space bounding box of the node lattice.
    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let ext = (self.resolution - 1) as f64 * self.voxel_size;
        (self.origin, self.origin + Vector3::new(ext, ext, ext))
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.resolution * (y + self.resolution * z)
    }

    #[inline]
    pub fn value(&self, x: usize, y: usize, z: usize) -> f64 {
        self.values[self.index(x, y, z)]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn node_position(&self, x: usize, y: usize, z: usize) -> Vector3<f64> {
        self.origin + Vector3::new(x as f64, y as f64, z as f64) * self.voxel_size
    }

    /// Grid-index coordinate of a world point, snapped to the lattice when
    /// within 1e-9 of a node so exact node queries return stored values
    /// bit-exactly.
    fn local_coord(&self, w: f64, o: f64) -> f64 {
        let l = (w - o) / self.voxel_size;
        let r = l.round();
        if (l - r).abs() < 1e-9 {
            r
        } else {
            l
        }
    }

    fn locals(&self, p: &Vector3<f64>) -> Vector3<f64> {
        Vector3::new(
            self.local_coord(p.x, self.origin.x),
            self.local_coord(p.y, self.origin.y),
            self.local_coord(p.z, self.origin.z),
        )
    }

    fn trilinear(&self, l: &Vector3<f64>) -> f64 {
        let top = (self.resolution - 2) as f64;
        let x0 = l.x.floor().clamp(0.0, top) as usize;
        let y0 = l.y.floor().clamp(0.0, top) as usize;
        let z0 = l.z.floor().clamp(0.0, top) as usize;
        let a = l.x - x0 as f64;
        let b = l.y - y0 as f64;
        let c = l.z - z0 as f64;
        let i = self.index(x0, y0, z0);
        let d = self.resolution;
        let v000 = self.values[i];
        let v100 = self.values[i + 1];
        let v010 = self.values[i + d];
        let v110 = self.values[i + d + 1];
        let v001 = self.values[i + d * d];
        let v101 = self.values[i + d * d + 1];
        let v011 = self.values[i + d * d + d];
        let v111 = self.values[i + d * d + d + 1];
        let front = (1.0 - a) * (1.0 - b) * v000 + a * (1.0 - b) * v100 + (1.0 - a) * b * v010 + a * b * v110;
        let back = (1.0 - a) * (1.0 - b) * v001 + a * (1.0 - b) * v101 + (1.0 - a) * b * v011 + a * b * v111;
        (1.0 - c) * front + c * back
    }

    /// Trilinear interpolation of the stored field. Outside the lattice the
    /// boundary value is extended with the Euclidean distance to the grid
    /// box, which keeps the field positive (and an upper bound stays safe
    /// for sphere tracing) away from the volume.
    pub fn sample(&self, p: &Vector3<f64>) -> f64 {
        let l = self.locals(p);
        let top = (self.resolution - 1) as f64;
        let inside = (0.0..=top).contains(&l.x) && (0.0..=top).contains(&l.y) && (0.0..=top).contains(&l.z);
        if inside {
            return self.trilinear(&l);
        }
        let clamped = Vector3::new(l.x.clamp(0.0, top), l.y.clamp(0.0, top), l.z.clamp(0.0, top));
        let outside_dist = (l - clamped).norm() * self.voxel_size;
        self.trilinear(&clamped) + outside_dist
    }

    /// Analytic gradient of the trilinear interpolant (piecewise linear per
    /// cell). The query must stay at least one voxel inside the lattice.
    pub fn gradient(&self, p: &Vector3<f64>) -> Result<Vector3<f64>, SdfError> {
        let l = self.locals(p);
        let top = (self.resolution - 1) as f64;
        if !(l.x >= 1.0 && l.x <= top - 1.0 && l.y >= 1.0 && l.y <= top - 1.0 && l.z >= 1.0 && l.z <= top - 1.0) {
            return Err(SdfError::OutsideInterior);
        }
        let max_cell = (self.resolution - 2) as f64;
        let x0 = l.x.floor().clamp(0.0, max_cell) as usize;
        let y0 = l.y.floor().clamp(0.0, max_cell) as usize;
        let z0 = l.z.floor().clamp(0.0, max_cell) as usize;
        let a = l.x - x0 as f64;
        let b = l.y - y0 as f64;
        let c = l.z - z0 as f64;
        let i = self.index(x0, y0, z0);
        let d = self.resolution;
        let v000 = self.values[i];
        let v100 = self.values[i + 1];
        let v010 = self.values[i + d];
        let v110 = self.values[i + d + 1];
        let v001 = self.values[i + d * d];
        let v101 = self.values[i + d * d + 1];
        let v011 = self.values[i + d * d + d];
        let v111 = self.values[i + d * d + d + 1];
        let gx = (1.0 - b) * (1.0 - c) * (v100 - v000)
            + b * (1.0 - c) * (v110 - v010)
            + (1.0 - b) * c * (v101 - v001)
            + b * c * (v111 - v011);
        let gy = (1.0 - a) * (1.0 - c) * (v010 - v000)
            + a * (1.0 - c) * (v110 - v100)
            + (1.0 - a) * c * (v011 - v001)
            + a * c * (v111 - v101);
        let gz = (1.0 - a) * (1.0 - b) * (v001 - v000)
            + a * (1.0 - b) * (v101 - v100)
            + (1.0 - a) * b * (v011 - v010)
            + a * b * (v111 - v110);
        Ok(Vector3::new(gx, gy, gz) / self.voxel_size)
    }
}

/// Exact analytic signed-distance primitives and CSG compounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Primitive {
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    #[serde(rename = "box")]
    Cuboid {
        center: [f64; 3],
        half_extents: [f64; 3],
    },
    /// Torus around the z axis through `center`.
    Torus {
        center: [f64; 3],
        major_radius: f64,
        minor_radius: f64,
    },
    Union {
        parts: Vec<Primitive>,
    },
    Intersection {
        parts: Vec<Primitive>,
    },
    Difference {
        base: Box<Primitive>,
        cut: Box<Primitive>,
    },
    SmoothUnion {
        a: Box<Primitive>,
        b: Box<Primitive>,
        blend: f64,
    },
}

impl Primitive {
    pub fn eval(&self, p: &Vector3<f64>) -> f64 {
        match self {
            Primitive::Sphere { center, radius } => {
                (p - Vector3::new(center[0], center[1], center[2])).norm() - radius
            }
            Primitive::Cuboid { center, half_extents } => {
                let q = Vector3::new(
                    (p.x - center[0]).abs() - half_extents[0],
                    (p.y - center[1]).abs() - half_extents[1],
                    (p.z - center[2]).abs() - half_extents[2],
                );
                let outside = Vector3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
                outside + q.x.max(q.y).max(q.z).min(0.0)
            }
            Primitive::Torus {
                center,
                major_radius,
                minor_radius,
            } => {
                let d = p - Vector3::new(center[0], center[1], center[2]);
                let ring = (d.x * d.x + d.y * d.y).sqrt() - major_radius;
                (ring * ring + d.z * d.z).sqrt() - minor_radius
            }
            Primitive::Union { parts } => parts
                .iter()
                .map(|s| s.eval(p))
                .fold(f64::INFINITY, f64::min),
            Primitive::Intersection { parts } => parts
                .iter()
                .map(|s| s.eval(p))
                .fold(f64::NEG_INFINITY, f64::max),
            Primitive::Difference { base, cut } => base.eval(p).max(-cut.eval(p)),
            Primitive::SmoothUnion { a, b, blend } => {
                let (da, db, k) = (a.eval(p), b.eval(p), *blend);
                let h = (0.5 + 0.5 * (db - da) / k).clamp(0.0, 1.0);
                db * (1.0 - h) + da * h - k * h * (1.0 - h)
            }
        }
    }

    /// Named shapes used by the synthetic scene generator: `sphere`, `box`,
    /// `torus`, `two_spheres`, `box_minus_sphere`.
    pub fn zoo(name: &str) -> Result<Primitive, SdfError> {
        match name {
            "sphere" => Ok(Primitive::Sphere { center: [0.0; 3], radius: 0.4 }),
            "box" => Ok(Primitive::Cuboid {
                center: [0.0; 3],
                half_extents: [0.32, 0.24, 0.38],
            }),
            "torus" => Ok(Primitive::Torus {
                center: [0.0; 3],
                major_radius: 0.3,
                minor_radius: 0.12,
            }),
            "two_spheres" => Ok(Primitive::Union {
                parts: vec![
                    Primitive::Sphere { center: [-0.2, -0.08, 0.0], radius: 0.24 },
                    Primitive::Sphere { center: [0.2, 0.1, 0.05], radius: 0.27 },
                ],
            }),
            "box_minus_sphere" => Ok(Primitive::Difference {
                base: Box::new(Primitive::Cuboid {
                    center: [0.0; 3],
                    half_extents: [0.3, 0.3, 0.3],
                }),
                cut: Box::new(Primitive::Sphere { center: [0.3, 0.3, 0.3], radius: 0.33 }),
            }),
            other => Err(SdfError::UnknownPrimitive(other.to_string())),
        }
    }

    /// All names accepted by [`Primitive::zoo`].
    pub fn zoo_names() -> &'static [&'static str] {
        &["sphere", "box", "torus", "two_spheres", "box_minus_sphere"]
    }
}
