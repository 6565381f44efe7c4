//! Antipodally symmetric triangulations of the unit sphere.
//!
//! The base mesh is the regular octahedron; uniform refinement splits each
//! triangle into four and projects the new midpoints to the sphere. Negating
//! the three vertices of any triangle yields another mesh triangle, which is
//! what makes the even/odd angular bases well defined.

use std::collections::HashMap;

use nalgebra::Vector3;

use crate::error::{Result, RteError};
use crate::quadrature::{self, QuadratureRule};

#[derive(Debug, Clone)]
pub struct SphereMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[usize; 3]>,
    /// triangle index -> index of the triangle with negated vertex set
    pub antipode_of: Vec<usize>,
    /// triangles whose (pre-projection) midpoint lies in the upper half-sphere
    pub representatives: Vec<usize>,
    pub level: usize,
}

/// Quadrature points on a single curved spherical triangle.
#[derive(Debug, Clone)]
pub struct SphericalQuadrature {
    /// points on the unit sphere
    pub points: Vec<Vector3<f64>>,
    /// weights including the flat-to-sphere projection Jacobian
    pub weights: Vec<f64>,
    /// barycentric coordinates of the flat pre-images (for P1 panel bases)
    pub barycentric: Vec<[f64; 3]>,
}

fn bits_key(v: &Vector3<f64>) -> [u64; 3] {
    // fold -0.0 onto +0.0 so negated vertices hash identically
    let c = |x: f64| if x == 0.0 { 0.0f64.to_bits() } else { x.to_bits() };
    [c(v.x), c(v.y), c(v.z)]
}

/// Half-sphere selection rule for triangle midpoints: s3 > 0, ties broken by
/// s2 > 0, then s1 > 0.
fn in_upper_half(m: &Vector3<f64>) -> bool {
    if m.z != 0.0 {
        return m.z > 0.0;
    }
    if m.y != 0.0 {
        return m.y > 0.0;
    }
    m.x > 0.0
}

pub fn build_sphere_mesh(level: usize) -> SphereMesh {
    let mut vertices: Vec<Vector3<f64>> = vec![
        Vector3::new(1.0, 0.0, 0.0),
        Vector3::new(-1.0, 0.0, 0.0),
        Vector3::new(0.0, 1.0, 0.0),
        Vector3::new(0.0, -1.0, 0.0),
        Vector3::new(0.0, 0.0, 1.0),
        Vector3::new(0.0, 0.0, -1.0),
    ];
    // octahedron faces, outward oriented
    let mut triangles: Vec<[usize; 3]> = vec![
        [0, 2, 4],
        [2, 1, 4],
        [1, 3, 4],
        [3, 0, 4],
        [2, 0, 5],
        [1, 2, 5],
        [3, 1, 5],
        [0, 3, 5],
    ];

    for _ in 0..level {
        let mut midpoint_cache: HashMap<(usize, usize), usize> = HashMap::new();
        let mut new_triangles = Vec::with_capacity(4 * triangles.len());
        for tri in &triangles {
            let mut mid = [0usize; 3];
            for e in 0..3 {
                let (a, b) = (tri[e], tri[(e + 1) % 3]);
                let key = (a.min(b), a.max(b));
                let idx = *midpoint_cache.entry(key).or_insert_with(|| {
                    let m = (vertices[key.0] + vertices[key.1]).normalize();
                    vertices.push(m);
                    vertices.len() - 1
                });
                mid[e] = idx;
            }
            new_triangles.push([tri[0], mid[0], mid[2]]);
            new_triangles.push([mid[0], tri[1], mid[1]]);
            new_triangles.push([mid[2], mid[1], tri[2]]);
            new_triangles.push([mid[0], mid[1], mid[2]]);
        }
        triangles = new_triangles;
    }

    // vertex antipodes by exact bit match: negation and normalization are
    // exact, and the octahedron construction is symmetric under negation
    let vertex_lookup: HashMap<[u64; 3], usize> = vertices
        .iter()
        .enumerate()
        .map(|(i, v)| (bits_key(v), i))
        .collect();
    let vertex_antipode: Vec<usize> = vertices
        .iter()
        .map(|v| {
            *vertex_lookup
                .get(&bits_key(&(-v)))
                .expect("sphere mesh lost antipodal symmetry")
        })
        .collect();

    let mut tri_lookup: HashMap<[usize; 3], usize> = HashMap::new();
    for (t, tri) in triangles.iter().enumerate() {
        let mut key = *tri;
        key.sort_unstable();
        tri_lookup.insert(key, t);
    }
    let antipode_of: Vec<usize> = triangles
        .iter()
        .map(|tri| {
            let mut key = [
                vertex_antipode[tri[0]],
                vertex_antipode[tri[1]],
                vertex_antipode[tri[2]],
            ];
            key.sort_unstable();
            *tri_lookup
                .get(&key)
                .expect("sphere mesh lost antipodal symmetry")
        })
        .collect();

    let representatives: Vec<usize> = triangles
        .iter()
        .enumerate()
        .filter(|(_, tri)| {
            let m = vertices[tri[0]] + vertices[tri[1]] + vertices[tri[2]];
            in_upper_half(&m)
        })
        .map(|(t, _)| t)
        .collect();

    SphereMesh {
        vertices,
        triangles,
        antipode_of,
        representatives,
        level,
    }
}

impl SphereMesh {
    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    /// number of antipodal pairs, i.e. the dimension of the even basis
    pub fn n_pairs(&self) -> usize {
        self.representatives.len()
    }

    pub fn triangle_vertices(&self, t: usize) -> [Vector3<f64>; 3] {
        let tri = self.triangles[t];
        [
            self.vertices[tri[0]],
            self.vertices[tri[1]],
            self.vertices[tri[2]],
        ]
    }

    /// exact spherical area of triangle `t` (solid angle via van Oosterom-Strackee)
    pub fn spherical_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangle_vertices(t);
        let num = a.dot(&b.cross(&c)).abs();
        let den = 1.0 + a.dot(&b) + b.dot(&c) + c.dot(&a);
        2.0 * num.atan2(den)
    }

    /// area of the antipodal pair supporting even basis function `k`
    pub fn pair_area(&self, k: usize) -> f64 {
        2.0 * self.spherical_area(self.representatives[k])
    }

    /// Quadrature on the curved triangle `t`: a planar rule of the given
    /// degree on the flat triangle, points projected radially with the
    /// projection Jacobian folded into the weights.
    pub fn spherical_quadrature(&self, t: usize, degree: usize) -> Result<SphericalQuadrature> {
        let rule = quadrature::triangle_rule(degree)?;
        Ok(self.quadrature_from_rule(t, &rule))
    }

    pub fn quadrature_from_rule(&self, t: usize, rule: &QuadratureRule) -> SphericalQuadrature {
        let [v0, v1, v2] = self.triangle_vertices(t);
        spherical_quadrature_on_flat(&[v0, v1, v2], rule)
    }

    /// Writes the mesh as a legacy-VTK text file with the given per-triangle
    /// cell data fields.
    pub fn export_vtk(
        &self,
        path: &std::path::Path,
        cell_data: &[(&str, &[f64])],
    ) -> Result<()> {
        for (name, data) in cell_data {
            if data.len() != self.n_triangles() {
                return Err(RteError::dim(self.n_triangles(), data.len(), name));
            }
        }
        let mut out = String::new();
        out.push_str("# vtk DataFile Version 3.0\nsphere mesh\nASCII\nDATASET UNSTRUCTURED_GRID\n");
        out.push_str(&format!("POINTS {} double\n", self.vertices.len()));
        for v in &self.vertices {
            out.push_str(&format!("{:.17e} {:.17e} {:.17e}\n", v.x, v.y, v.z));
        }
        out.push_str(&format!(
            "CELLS {} {}\n",
            self.n_triangles(),
            4 * self.n_triangles()
        ));
        for tri in &self.triangles {
            out.push_str(&format!("3 {} {} {}\n", tri[0], tri[1], tri[2]));
        }
        out.push_str(&format!("CELL_TYPES {}\n", self.n_triangles()));
        for _ in 0..self.n_triangles() {
            out.push_str("5\n");
        }
        if !cell_data.is_empty() {
            out.push_str(&format!("CELL_DATA {}\n", self.n_triangles()));
            for (name, data) in cell_data {
                out.push_str(&format!("SCALARS {name} double 1\nLOOKUP_TABLE default\n"));
                for v in *data {
                    out.push_str(&format!("{v:.17e}\n"));
                }
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Quadrature on the radial projection of a flat triangle to the sphere.
pub fn spherical_quadrature_on_flat(
    verts: &[Vector3<f64>; 3],
    rule: &QuadratureRule,
) -> SphericalQuadrature {
    let [v0, v1, v2] = *verts;
    let normal = (v1 - v0).cross(&(v2 - v0));
    let flat_area2 = normal.norm(); // twice the flat area
    let plane_dist = normal.normalize().dot(&v0).abs();
    let mut points = Vec::with_capacity(rule.len());
    let mut weights = Vec::with_capacity(rule.len());
    for (l, &w) in rule.points.iter().zip(&rule.weights) {
        let x = v0 * l[0] + v1 * l[1] + v2 * l[2];
        let r = x.norm();
        points.push(x / r);
        // reference weights sum to 1/2, so the flat Jacobian is 2*A = flat_area2
        weights.push(w * flat_area2 * plane_dist / (r * r * r));
    }
    SphericalQuadrature {
        points,
        weights,
        barycentric: rule.points.clone(),
    }
}
