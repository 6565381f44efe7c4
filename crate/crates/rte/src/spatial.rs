//! Conforming triangulations of planar rectangles.

use std::collections::HashMap;

use nalgebra::Vector2;

/// A boundary edge with its outward unit normal.
#[derive(Debug, Clone)]
pub struct BoundaryEdge {
    pub vertices: [usize; 2],
    pub triangle: usize,
    pub normal: Vector2<f64>,
    pub length: f64,
}

#[derive(Debug, Clone)]
pub struct SpatialMesh {
    pub vertices: Vec<Vector2<f64>>,
    pub triangles: Vec<[usize; 3]>,
    pub boundary_edges: Vec<BoundaryEdge>,
    /// longest edge length
    pub h: f64,
}

impl SpatialMesh {
    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn triangle_vertices(&self, t: usize) -> [Vector2<f64>; 3] {
        let tri = self.triangles[t];
        [
            self.vertices[tri[0]],
            self.vertices[tri[1]],
            self.vertices[tri[2]],
        ]
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangle_vertices(t);
        0.5 * ((b - a).x * (c - a).y - (b - a).y * (c - a).x).abs()
    }

    pub fn centroid(&self, t: usize) -> Vector2<f64> {
        let [a, b, c] = self.triangle_vertices(t);
        (a + b + c) / 3.0
    }
}

/// Uniform triangulation of the square (0, length)^2: an n-by-n grid of cells,
/// each split into two triangles along the lower-left/upper-right diagonal.
pub fn build_square_mesh(n: usize, length: f64) -> SpatialMesh {
    assert!(n >= 1 && length > 0.0);
    let m = n + 1;
    let hx = length / n as f64;
    let mut vertices = Vec::with_capacity(m * m);
    for j in 0..m {
        for i in 0..m {
            vertices.push(Vector2::new(i as f64 * hx, j as f64 * hx));
        }
    }
    let idx = |i: usize, j: usize| j * m + i;
    let mut triangles = Vec::with_capacity(2 * n * n);
    for j in 0..n {
        for i in 0..n {
            let (v00, v10, v01, v11) = (idx(i, j), idx(i + 1, j), idx(i, j + 1), idx(i + 1, j + 1));
            triangles.push([v00, v10, v11]);
            triangles.push([v00, v11, v01]);
        }
    }
    let boundary_edges = find_boundary_edges(&vertices, &triangles);
    SpatialMesh {
        vertices,
        triangles,
        boundary_edges,
        h: hx * std::f64::consts::SQRT_2,
    }
}

fn find_boundary_edges(
    vertices: &[Vector2<f64>],
    triangles: &[[usize; 3]],
) -> Vec<BoundaryEdge> {
    let mut edge_count: HashMap<(usize, usize), (usize, usize, usize)> = HashMap::new();
    for (t, tri) in triangles.iter().enumerate() {
        for e in 0..3 {
            let (a, b) = (tri[e], tri[(e + 1) % 3]);
            let key = (a.min(b), a.max(b));
            let entry = edge_count.entry(key).or_insert((0, t, e));
            entry.0 += 1;
        }
    }
    let mut edges = Vec::new();
    for (&(a, b), &(count, t, _)) in &edge_count {
        assert!(count <= 2, "mesh is not conforming");
        if count != 1 {
            continue;
        }
        let (pa, pb) = (vertices[a], vertices[b]);
        let tangent = pb - pa;
        let length = tangent.norm();
        let mut normal = Vector2::new(tangent.y, -tangent.x) / length;
        // orient away from the triangle
        let mid = 0.5 * (pa + pb);
        let centroid = (vertices[triangles[t][0]]
            + vertices[triangles[t][1]]
            + vertices[triangles[t][2]])
            / 3.0;
        if normal.dot(&(mid - centroid)) < 0.0 {
            normal = -normal;
        }
        edges.push(BoundaryEdge {
            vertices: [a, b],
            triangle: t,
            normal,
            length,
        });
    }
    edges.sort_by_key(|e| e.vertices);
    edges
}

/// The benchmark mesh on (0,7)^2: 56 cells per side at refine=0, doubled per
/// refinement (equivalent to quadrisecting every triangle).
pub fn build_lattice_mesh(refine: usize) -> SpatialMesh {
    build_square_mesh(56 << refine, 7.0)
}
