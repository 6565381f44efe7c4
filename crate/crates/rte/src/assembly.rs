//! Assembly of all matrices and right-hand sides of the discrete system.
//!
//! Spatial factors use P1 conforming (even) and P0 (odd) elements; angular
//! factors use even piecewise-constant indicator functions on antipodal
//! triangle pairs and odd piecewise-linear functions, three per pair.

use nalgebra::{DMatrix, DVector, Matrix3, Vector2, Vector3};

use crate::error::{Result, RteError};
use crate::kernel::PhaseFunction;
use crate::quadrature;
use crate::sparse::CsrMatrix;
use crate::spatial::SpatialMesh;
use crate::sphere::{spherical_quadrature_on_flat, SphereMesh};

/// Piecewise constant optical coefficients, one value per spatial cell.
#[derive(Debug, Clone)]
pub struct OpticalField {
    pub sigma_a: Vec<f64>,
    pub sigma_s: Vec<f64>,
    pub source_q: Vec<f64>,
    pub phase: PhaseFunction,
}

impl OpticalField {
    pub fn new(
        sigma_a: Vec<f64>,
        sigma_s: Vec<f64>,
        source_q: Vec<f64>,
        phase: PhaseFunction,
    ) -> Result<Self> {
        if sigma_a.len() != sigma_s.len() || sigma_a.len() != source_q.len() {
            return Err(RteError::dim(sigma_a.len(), sigma_s.len(), "optical field"));
        }
        if sigma_a.iter().any(|&v| v < 0.0) || sigma_s.iter().any(|&v| v < 0.0) {
            return Err(RteError::Validation(
                "absorption and scattering rates must be nonnegative".into(),
            ));
        }
        if sigma_a
            .iter()
            .zip(&sigma_s)
            .any(|(&a, &s)| a + s <= 0.0)
        {
            return Err(RteError::Validation(
                "total cross section must be positive in every cell".into(),
            ));
        }
        Ok(OpticalField {
            sigma_a,
            sigma_s,
            source_q,
            phase,
        })
    }

    pub fn sigma_t(&self, cell: usize) -> f64 {
        self.sigma_a[cell] + self.sigma_s[cell]
    }

    /// c = max over cells of sigma_s / sigma_t
    pub fn scattering_ratio(&self) -> f64 {
        (0..self.sigma_a.len())
            .map(|c| self.sigma_s[c] / self.sigma_t(c))
            .fold(0.0, f64::max)
    }
}

/// The lattice benchmark on (0,7)^2: scattering background, a 5x5 checkerboard
/// of absorber squares with the center replaced by the unit source square and
/// the square directly above the source left open.
pub fn lattice_field(mesh: &SpatialMesh, phase: PhaseFunction) -> OpticalField {
    let n = mesh.n_triangles();
    let mut sigma_a = vec![0.01; n];
    let mut sigma_s = vec![10.0; n];
    let mut source_q = vec![0.0; n];
    for t in 0..n {
        let c = mesh.centroid(t);
        let (i, j) = (c.x.floor() as i64, c.y.floor() as i64);
        let inner = (1..=5).contains(&i) && (1..=5).contains(&j) && (i + j) % 2 == 0;
        if (i, j) == (3, 3) {
            source_q[t] = 1.0;
        } else if inner && (i, j) != (3, 5) {
            sigma_a[t] = 1.0;
            sigma_s[t] = 0.0;
        }
    }
    OpticalField::new(sigma_a, sigma_s, source_q, phase).expect("lattice coefficients are valid")
}

#[derive(Debug, Clone)]
pub struct SpatialMatrices {
    pub mt_plus: CsrMatrix,
    pub ms_plus: CsrMatrix,
    /// diagonals of the P0 mass matrices
    pub mt_minus: Vec<f64>,
    pub ms_minus: Vec<f64>,
    /// first-derivative matrices, one per coordinate
    pub d: [CsrMatrix; 2],
}

#[derive(Debug, Clone)]
pub struct AngularMatrices {
    /// diagonal of the even Gramian: antipodal pair areas
    pub m_plus: Vec<f64>,
    /// 3x3 diagonal blocks of the odd Gramian
    pub m_minus: Vec<Matrix3<f64>>,
    /// advection coupling matrices, one per spatial coordinate
    pub a: [CsrMatrix; 2],
    pub s_plus: DMatrix<f64>,
    pub s_minus: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct BoundaryMatrices {
    /// distinct outward normals of the spatial boundary
    pub normals: Vec<Vector2<f64>>,
    /// omega[(k, normal index)] = integral of |s.n| over antipodal pair k
    pub omega: DMatrix<f64>,
    /// boundary mass matrices, one per even angular index
    pub r_blocks: Vec<CsrMatrix>,
}

/// Quadrature controls for the angular double integrals.
#[derive(Debug, Clone, Copy)]
pub struct AngularQuadConfig {
    /// degree of the per-panel rule for the scattering double integrals
    pub base_degree: usize,
    /// upgraded degree on subdivided panels near the kernel peak
    pub near_degree: usize,
    /// anisotropy threshold activating the near-field upgrade
    pub near_g_threshold: f64,
    /// degree for single spherical integrals (odd Gramian, advection)
    pub single_degree: usize,
}

impl Default for AngularQuadConfig {
    fn default() -> Self {
        AngularQuadConfig {
            base_degree: 4,
            near_degree: 7,
            near_g_threshold: 0.7,
            single_degree: 7,
        }
    }
}

/// Quadrature data for one representative panel.
pub(crate) struct PanelQuad {
    pub points: Vec<Vector3<f64>>,
    pub weights: Vec<f64>,
    /// barycentric coordinates relative to the representative triangle
    pub bary: Vec<[f64; 3]>,
}

pub(crate) fn panel_quadratures(
    mesh: &SphereMesh,
    degree: usize,
    subdivide: bool,
) -> Result<Vec<PanelQuad>> {
    let rule = quadrature::triangle_rule(degree)?;
    let mut panels = Vec::with_capacity(mesh.n_pairs());
    for &t in &mesh.representatives {
        let verts = mesh.triangle_vertices(t);
        let mut points = Vec::new();
        let mut weights = Vec::new();
        let mut bary = Vec::new();
        let children: Vec<[[f64; 3]; 3]> = if subdivide {
            // split the flat triangle into four, tracked in parent barycentrics
            let (a, b, c) = ([1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]);
            let mid = |p: [f64; 3], q: [f64; 3]| {
                [0.5 * (p[0] + q[0]), 0.5 * (p[1] + q[1]), 0.5 * (p[2] + q[2])]
            };
            let (ab, bc, ca) = (mid(a, b), mid(b, c), mid(c, a));
            vec![[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]]
        } else {
            vec![[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]]
        };
        for child in &children {
            let corners: Vec<Vector3<f64>> = child
                .iter()
                .map(|l| verts[0] * l[0] + verts[1] * l[1] + verts[2] * l[2])
                .collect();
            let q = spherical_quadrature_on_flat(&[corners[0], corners[1], corners[2]], &rule);
            for (i, (p, &w)) in q.points.iter().zip(&q.weights).enumerate() {
                let l = q.barycentric[i];
                let parent = [
                    l[0] * child[0][0] + l[1] * child[1][0] + l[2] * child[2][0],
                    l[0] * child[0][1] + l[1] * child[1][1] + l[2] * child[2][1],
                    l[0] * child[0][2] + l[1] * child[1][2] + l[2] * child[2][2],
                ];
                points.push(*p);
                weights.push(w);
                bary.push(parent);
            }
        }
        panels.push(PanelQuad {
            points,
            weights,
            bary,
        });
    }
    Ok(panels)
}

/// Assembles the spatial mass, scattering-mass and derivative matrices.
pub fn assemble_spatial(mesh: &SpatialMesh, field: &OpticalField) -> Result<SpatialMatrices> {
    if field.sigma_a.len() != mesh.n_triangles() {
        return Err(RteError::dim(
            mesh.n_triangles(),
            field.sigma_a.len(),
            "optical field cells",
        ));
    }
    let n = mesh.n_vertices();
    let mut mt_trip = Vec::new();
    let mut ms_trip = Vec::new();
    let mut d_trip: [Vec<(usize, usize, f64)>; 2] = [Vec::new(), Vec::new()];
    let mut mt_minus = vec![0.0; mesh.n_triangles()];
    let mut ms_minus = vec![0.0; mesh.n_triangles()];
    for t in 0..mesh.n_triangles() {
        let tri = mesh.triangles[t];
        let [a, b, c] = mesh.triangle_vertices(t);
        let signed2 = (b - a).x * (c - a).y - (b - a).y * (c - a).x;
        let area = 0.5 * signed2.abs();
        let (st, ss) = (field.sigma_t(t), field.sigma_s[t]);
        mt_minus[t] = st * area;
        ms_minus[t] = ss * area;
        // P1 local mass: area/12 * (1 + delta_ij)
        for i in 0..3 {
            for j in 0..3 {
                let m = area / 12.0 * if i == j { 2.0 } else { 1.0 };
                mt_trip.push((tri[i], tri[j], st * m));
                ms_trip.push((tri[i], tri[j], ss * m));
            }
        }
        // constant gradients of the barycentric functions
        let rot = |v: Vector2<f64>| Vector2::new(-v.y, v.x);
        let grads = [rot(c - b) / signed2, rot(a - c) / signed2, rot(b - a) / signed2];
        for i in 0..2 {
            for (j, g) in grads.iter().enumerate() {
                d_trip[i].push((t, tri[j], area * g[i]));
            }
        }
    }
    let [dx, dy] = d_trip;
    Ok(SpatialMatrices {
        mt_plus: CsrMatrix::from_triplets(n, n, &mt_trip),
        ms_plus: CsrMatrix::from_triplets(n, n, &ms_trip),
        mt_minus,
        ms_minus,
        d: [
            CsrMatrix::from_triplets(mesh.n_triangles(), n, &dx),
            CsrMatrix::from_triplets(mesh.n_triangles(), n, &dy),
        ],
    })
}

fn panel_diameter(verts: &[Vector3<f64>; 3]) -> f64 {
    (verts[0] - verts[1])
        .norm()
        .max((verts[1] - verts[2]).norm())
        .max((verts[2] - verts[0]).norm())
}

fn panel_distance(a: &[Vector3<f64>; 3], b: &[Vector3<f64>; 3], flip: bool) -> f64 {
    let mut best = f64::INFINITY;
    for x in a {
        for y in b {
            let y = if flip { -y } else { *y };
            best = best.min((x - y).norm());
        }
    }
    best
}

/// Dense even and odd scattering matrices (in that order).
pub fn assemble_scattering(
    mesh: &SphereMesh,
    phase: PhaseFunction,
    cfg: &AngularQuadConfig,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    assemble_scattering_impl(mesh, phase, cfg, true, true).map(|(p, m)| (p.unwrap(), m.unwrap()))
}

/// Dense even scattering matrix only (the odd one is skipped).
pub fn assemble_scattering_even(
    mesh: &SphereMesh,
    phase: PhaseFunction,
    cfg: &AngularQuadConfig,
) -> Result<DMatrix<f64>> {
    assemble_scattering_impl(mesh, phase, cfg, true, false).map(|(p, _)| p.unwrap())
}

fn assemble_scattering_impl(
    mesh: &SphereMesh,
    phase: PhaseFunction,
    cfg: &AngularQuadConfig,
    build_even: bool,
    build_odd: bool,
) -> Result<(Option<DMatrix<f64>>, Option<DMatrix<f64>>)> {
    let n = mesh.n_pairs();
    let base = panel_quadratures(mesh, cfg.base_degree, false)?;
    let upgrade = phase.g() >= cfg.near_g_threshold;
    let fine = if upgrade {
        Some(panel_quadratures(mesh, cfg.near_degree, true)?)
    } else {
        None
    };
    let verts: Vec<[Vector3<f64>; 3]> = mesh
        .representatives
        .iter()
        .map(|&t| mesh.triangle_vertices(t))
        .collect();
    let g = phase.g();
    let c0 = (1.0 - g * g) / (4.0 * std::f64::consts::PI);
    let kernel = |t: f64| {
        let d = 1.0 - 2.0 * g * t.clamp(-1.0, 1.0) + g * g;
        c0 / (d * d.sqrt())
    };
    let mut s_plus = build_even.then(|| DMatrix::zeros(n, n));
    let mut s_minus = build_odd.then(|| DMatrix::zeros(3 * n, 3 * n));
    for a in 0..n {
        for b in a..n {
            let near = upgrade
                && panel_distance(&verts[a], &verts[b], false)
                    .min(panel_distance(&verts[a], &verts[b], true))
                    < 2.0 * panel_diameter(&verts[a]).max(panel_diameter(&verts[b]));
            let (pa, pb) = if near {
                let f = fine.as_ref().unwrap();
                (&f[a], &f[b])
            } else {
                (&base[a], &base[b])
            };
            let mut even = 0.0;
            let mut odd = Matrix3::<f64>::zeros();
            for (ia, (x, &wx)) in pa.points.iter().zip(&pa.weights).enumerate() {
                for (ib, (y, &wy)) in pb.points.iter().zip(&pb.weights).enumerate() {
                    let t = x.dot(y);
                    let (kp, km) = (kernel(t), kernel(-t));
                    let w = wx * wy;
                    even += w * (kp + km);
                    if build_odd {
                        let (la, lb) = (pa.bary[ia], pb.bary[ib]);
                        let wodd = w * (kp - km);
                        for i in 0..3 {
                            for j in 0..3 {
                                odd[(i, j)] += wodd * la[i] * lb[j];
                            }
                        }
                    }
                }
            }
            if let Some(sp) = s_plus.as_mut() {
                sp[(a, b)] = 2.0 * even;
                sp[(b, a)] = 2.0 * even;
            }
            if let Some(sm) = s_minus.as_mut() {
                for i in 0..3 {
                    for j in 0..3 {
                        sm[(3 * a + i, 3 * b + j)] = 2.0 * odd[(i, j)];
                        sm[(3 * b + j, 3 * a + i)] = 2.0 * odd[(i, j)];
                    }
                }
            }
        }
    }
    Ok((s_plus, s_minus))
}

/// Assembles the angular Gramians, advection couplings and dense scattering
/// matrices.
pub fn assemble_angular(
    mesh: &SphereMesh,
    phase: PhaseFunction,
    cfg: &AngularQuadConfig,
) -> Result<AngularMatrices> {
    let n = mesh.n_pairs();
    let m_plus: Vec<f64> = (0..n).map(|k| mesh.pair_area(k)).collect();

    let single = panel_quadratures(mesh, cfg.single_degree, false)?;
    let mut m_minus = Vec::with_capacity(n);
    let mut a_trip: [Vec<(usize, usize, f64)>; 2] = [Vec::new(), Vec::new()];
    for (k, panel) in single.iter().enumerate() {
        let mut gram = Matrix3::zeros();
        let mut adv = [[0.0; 3]; 2];
        for (idx, (p, &w)) in panel.points.iter().zip(&panel.weights).enumerate() {
            let l = panel.bary[idx];
            for i in 0..3 {
                for j in 0..3 {
                    gram[(i, j)] += 2.0 * w * l[i] * l[j];
                }
                adv[0][i] += 2.0 * w * p.x * l[i];
                adv[1][i] += 2.0 * w * p.y * l[i];
            }
        }
        m_minus.push(gram);
        for d in 0..2 {
            for i in 0..3 {
                a_trip[d].push((3 * k + i, k, adv[d][i]));
            }
        }
    }
    let (s_plus, s_minus) = assemble_scattering(mesh, phase, cfg)?;
    let [ax, ay] = a_trip;
    Ok(AngularMatrices {
        m_plus,
        m_minus,
        a: [
            CsrMatrix::from_triplets(3 * n, n, &ax),
            CsrMatrix::from_triplets(3 * n, n, &ay),
        ],
        s_plus,
        s_minus,
    })
}

/// Integral of |s.n| over the radial projection of a flat triangle, with
/// recursive subdivision across the kink at s.n = 0.
fn abs_cosine_integral(
    verts: &[Vector3<f64>; 3],
    n: &Vector3<f64>,
    rule: &quadrature::QuadratureRule,
    depth: usize,
) -> f64 {
    let vals: Vec<f64> = verts.iter().map(|v| v.normalize().dot(n)).collect();
    let diam = panel_diameter(verts)
        / verts.iter().map(|v| v.norm()).fold(f64::INFINITY, f64::min);
    let safe = vals.iter().all(|&v| v > diam) || vals.iter().all(|&v| v < -diam);
    if !safe && depth < 13 {
        let m01 = 0.5 * (verts[0] + verts[1]);
        let m12 = 0.5 * (verts[1] + verts[2]);
        let m20 = 0.5 * (verts[2] + verts[0]);
        return [
            [verts[0], m01, m20],
            [m01, verts[1], m12],
            [m20, m12, verts[2]],
            [m01, m12, m20],
        ]
        .iter()
        .map(|child| abs_cosine_integral(child, n, rule, depth + 1))
        .sum();
    }
    let q = spherical_quadrature_on_flat(verts, rule);
    q.points
        .iter()
        .zip(&q.weights)
        .map(|(p, w)| w * p.dot(n).abs())
        .sum()
}

/// Assembles the boundary weights omega and the boundary mass blocks.
pub fn assemble_boundary(smesh: &SpatialMesh, amesh: &SphereMesh) -> Result<BoundaryMatrices> {
    // distinct outward normals (piecewise constant on the boundary)
    let mut normals: Vec<Vector2<f64>> = Vec::new();
    let mut edge_normal_idx = Vec::with_capacity(smesh.boundary_edges.len());
    for e in &smesh.boundary_edges {
        let idx = normals
            .iter()
            .position(|n| (n - e.normal).norm() < 1e-12)
            .unwrap_or_else(|| {
                normals.push(e.normal);
                normals.len() - 1
            });
        edge_normal_idx.push(idx);
    }

    let rule = quadrature::triangle_rule(13)?;
    let n_pairs = amesh.n_pairs();
    let mut omega = DMatrix::zeros(n_pairs, normals.len());
    for (k, &t) in amesh.representatives.iter().enumerate() {
        let verts = amesh.triangle_vertices(t);
        for (ni, n2) in normals.iter().enumerate() {
            let n3 = Vector3::new(n2.x, n2.y, 0.0);
            omega[(k, ni)] = 2.0 * abs_cosine_integral(&verts, &n3, &rule, 0);
        }
    }

    let nv = smesh.n_vertices();
    let mut r_blocks = Vec::with_capacity(n_pairs);
    for k in 0..n_pairs {
        let mut trip = Vec::new();
        for (e, edge) in smesh.boundary_edges.iter().enumerate() {
            let w = omega[(k, edge_normal_idx[e])] * edge.length / 6.0;
            let [a, b] = edge.vertices;
            trip.push((a, a, 2.0 * w));
            trip.push((b, b, 2.0 * w));
            trip.push((a, b, w));
            trip.push((b, a, w));
        }
        r_blocks.push(CsrMatrix::from_triplets(nv, nv, &trip));
    }
    Ok(BoundaryMatrices {
        normals,
        omega,
        r_blocks,
    })
}

/// Right-hand sides for an isotropic source and zero inflow.
pub fn assemble_rhs(
    smesh: &SpatialMesh,
    amesh: &SphereMesh,
    field: &OpticalField,
    inflow: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if inflow != 0.0 {
        return Err(RteError::NotImplemented(
            "nonzero inflow boundary data".into(),
        ));
    }
    let (n_rp, n_sp) = (smesh.n_vertices(), amesh.n_pairs());
    // spatial factor: integral of q against each P1 basis function
    let mut q_spatial = vec![0.0; n_rp];
    for t in 0..smesh.n_triangles() {
        let contrib = field.source_q[t] * smesh.triangle_area(t) / 3.0;
        for &v in &smesh.triangles[t] {
            q_spatial[v] += contrib;
        }
    }
    let mut q_plus = DVector::zeros(n_sp * n_rp);
    for k in 0..n_sp {
        let area = amesh.pair_area(k);
        for i in 0..n_rp {
            q_plus[k * n_rp + i] = area * q_spatial[i];
        }
    }
    // odd basis functions integrate to zero over antipodal pairs
    let q_minus = DVector::zeros(3 * n_sp * smesh.n_triangles());
    Ok((q_plus, q_minus))
}

/// Everything the solver needs, assembled once.
#[derive(Debug, Clone)]
pub struct AssembledSystem {
    pub smesh: SpatialMesh,
    pub amesh: SphereMesh,
    pub field: OpticalField,
    pub spatial: SpatialMatrices,
    pub angular: AngularMatrices,
    pub boundary: BoundaryMatrices,
    pub q_plus: DVector<f64>,
    pub q_minus: DVector<f64>,
}

impl AssembledSystem {
    pub fn n_rp(&self) -> usize {
        self.smesh.n_vertices()
    }

    pub fn n_rm(&self) -> usize {
        self.smesh.n_triangles()
    }

    pub fn n_sp(&self) -> usize {
        self.amesh.n_pairs()
    }

    pub fn n_sm(&self) -> usize {
        3 * self.amesh.n_pairs()
    }

    /// even unknowns
    pub fn n_even(&self) -> usize {
        self.n_rp() * self.n_sp()
    }

    /// odd unknowns
    pub fn n_odd(&self) -> usize {
        self.n_rm() * self.n_sm()
    }
}

pub fn assemble_system(
    smesh: SpatialMesh,
    amesh: SphereMesh,
    field: OpticalField,
    cfg: &AngularQuadConfig,
) -> Result<AssembledSystem> {
    let spatial = assemble_spatial(&smesh, &field)?;
    let angular = assemble_angular(&amesh, field.phase, cfg)?;
    let boundary = assemble_boundary(&smesh, &amesh)?;
    let (q_plus, q_minus) = assemble_rhs(&smesh, &amesh, &field, 0.0)?;
    Ok(AssembledSystem {
        smesh,
        amesh,
        field,
        spatial,
        angular,
        boundary,
        q_plus,
        q_minus,
    })
}
