//! Hierarchical low-rank compression of the dense angular scattering
//! matrices.
//!
//! The scattering kernel is extended radially into space and interpolated by
//! tensor Chebyshev polynomials on bounding boxes of panel quadrature points.
//! Because every basis function is supported on an antipodal panel pair, the
//! matrix splits into two kernel terms sharing one cluster tree: one between
//! representative panels, one between representative and antipodal panels
//! (realized by negating the column point set).

use nalgebra::{DMatrix, DVector, Vector3};

use crate::assembly::{panel_quadratures, AngularQuadConfig};
use crate::error::{Result, RteError};
use crate::kernel::PhaseFunction;
use crate::sphere::SphereMesh;

#[derive(Debug, Clone, Copy)]
pub struct HConfig {
    /// admissibility parameter: admissible iff min diameter <= eta * distance
    pub eta_adm: f64,
    /// Chebyshev interpolation points per axis
    pub p: usize,
    /// minimal cluster size
    pub n_min: usize,
    /// re-factorize admissible blocks at reduced rank
    pub truncate: bool,
    /// singular value cutoff relative to the matrix scale
    pub trunc_tol: f64,
}

impl Default for HConfig {
    fn default() -> Self {
        HConfig {
            eta_adm: 1.4,
            p: 4,
            n_min: 64,
            truncate: false,
            trunc_tol: 1e-8,
        }
    }
}

impl HConfig {
    fn validate(&self) -> Result<()> {
        if self.eta_adm < 0.0 || self.p < 2 || self.n_min < 1 || self.trunc_tol <= 0.0 {
            return Err(RteError::Validation(format!(
                "invalid compression parameters: eta_adm={}, p={}, n_min={}, trunc_tol={}",
                self.eta_adm, self.p, self.n_min, self.trunc_tol
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ClusterNode {
    /// half-open range into the permutation array
    pub begin: usize,
    pub end: usize,
    pub bbox: [Vector3<f64>; 2],
    pub children: Option<[usize; 2]>,
}

impl ClusterNode {
    pub fn len(&self) -> usize {
        self.end - self.begin
    }

    pub fn is_empty(&self) -> bool {
        self.begin == self.end
    }
}

#[derive(Debug, Clone)]
pub struct ClusterTree {
    /// permuted index order; each node owns a contiguous slice
    pub perm: Vec<usize>,
    pub nodes: Vec<ClusterNode>,
}

impl ClusterTree {
    pub fn root(&self) -> usize {
        0
    }

    pub fn depth(&self) -> usize {
        fn rec(t: &ClusterTree, n: usize) -> usize {
            match t.nodes[n].children {
                None => 1,
                Some([a, b]) => 1 + rec(t, a).max(rec(t, b)),
            }
        }
        rec(self, 0)
    }
}

fn bbox_of(points: &[Vector3<f64>], idx: &[usize]) -> [Vector3<f64>; 2] {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for &i in idx {
        lo = lo.inf(&points[i]);
        hi = hi.sup(&points[i]);
    }
    [lo, hi]
}

/// Binary cluster tree by longest-axis bisection.
pub fn build_cluster_tree(points: &[Vector3<f64>], cfg: &HConfig) -> Result<ClusterTree> {
    cfg.validate()?;
    if points.is_empty() {
        return Err(RteError::Validation("empty point set".into()));
    }
    let mut perm: Vec<usize> = (0..points.len()).collect();
    let mut nodes = Vec::new();
    nodes.push(ClusterNode {
        begin: 0,
        end: points.len(),
        bbox: bbox_of(points, &perm),
        children: None,
    });
    let mut stack = vec![0usize];
    while let Some(n) = stack.pop() {
        let (begin, end, bbox) = {
            let node = &nodes[n];
            (node.begin, node.end, node.bbox)
        };
        if end - begin <= cfg.n_min {
            continue;
        }
        let widths = bbox[1] - bbox[0];
        let axis = if widths.x >= widths.y && widths.x >= widths.z {
            0
        } else if widths.y >= widths.z {
            1
        } else {
            2
        };
        let mid = 0.5 * (bbox[0][axis] + bbox[1][axis]);
        let slice = &mut perm[begin..end];
        slice.sort_by(|&a, &b| points[a][axis].partial_cmp(&points[b][axis]).unwrap());
        let mut split = slice.partition_point(|&i| points[i][axis] < mid);
        if split == 0 || split == slice.len() {
            // all points on one side of the geometric midpoint: split at median
            split = slice.len() / 2;
        }
        let cut = begin + split;
        let left = ClusterNode {
            begin,
            end: cut,
            bbox: bbox_of(points, &perm[begin..cut]),
            children: None,
        };
        let right = ClusterNode {
            begin: cut,
            end,
            bbox: bbox_of(points, &perm[cut..end]),
            children: None,
        };
        let li = nodes.len();
        nodes.push(left);
        nodes.push(right);
        nodes[n].children = Some([li, li + 1]);
        stack.push(li);
        stack.push(li + 1);
    }
    Ok(ClusterTree { perm, nodes })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parity {
    Even,
    Odd,
}

enum BlockData {
    Dense(DMatrix<f64>),
    /// block = U V^T
    LowRank(DMatrix<f64>, DMatrix<f64>),
}

struct Block {
    row_node: usize,
    col_node: usize,
    data: BlockData,
}

impl Block {
    fn entries(&self) -> usize {
        match &self.data {
            BlockData::Dense(d) => d.len(),
            BlockData::LowRank(u, v) => u.len() + v.len(),
        }
    }
}

pub struct HMatrixApprox {
    tree: ClusterTree,
    blocks: Vec<Block>,
    n: usize,
    pub parity: Parity,
}

#[derive(Debug, Clone)]
pub struct HStats {
    pub n: usize,
    pub dense_bytes: usize,
    pub stored_bytes: usize,
    pub dense_blocks: usize,
    pub lowrank_blocks: usize,
    pub max_rank: usize,
    pub tree_depth: usize,
}

/// Quadrature data of one basis function on its representative panel.
struct BasisQuad {
    /// indices into the shared point list
    first: usize,
    len: usize,
    /// basis values times quadrature weights at those points
    coeffs: Vec<f64>,
}

struct Geometry {
    points: Vec<Vector3<f64>>,
    basis: Vec<BasisQuad>,
    /// basis centroid used for clustering
    sites: Vec<Vector3<f64>>,
}

fn build_geometry(mesh: &SphereMesh, parity: Parity, qcfg: &AngularQuadConfig) -> Result<Geometry> {
    let panels = panel_quadratures(mesh, qcfg.base_degree, false)?;
    let mut points = Vec::new();
    let mut basis = Vec::new();
    let mut sites = Vec::new();
    for panel in &panels {
        let first = points.len();
        let len = panel.points.len();
        points.extend_from_slice(&panel.points);
        let centroid = {
            let s: Vector3<f64> = panel.points.iter().sum();
            (s / len as f64).normalize()
        };
        match parity {
            Parity::Even => {
                basis.push(BasisQuad {
                    first,
                    len,
                    coeffs: panel.weights.clone(),
                });
                sites.push(centroid);
            }
            Parity::Odd => {
                for j in 0..3 {
                    let coeffs = panel
                        .weights
                        .iter()
                        .zip(&panel.bary)
                        .map(|(&w, l)| w * l[j])
                        .collect();
                    basis.push(BasisQuad { first, len, coeffs });
                    sites.push(centroid);
                }
            }
        }
    }
    Ok(Geometry {
        points,
        basis,
        sites,
    })
}

/// Chebyshev points of the first kind on [a, b].
fn chebyshev_points(a: f64, b: f64, p: usize) -> Vec<f64> {
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    (0..p)
        .map(|i| mid + half * ((2 * i + 1) as f64 * std::f64::consts::PI / (2 * p) as f64).cos())
        .collect()
}

/// Values of the p Lagrange polynomials on Chebyshev points at t
/// (barycentric form).
fn lagrange_values(nodes: &[f64], t: f64) -> Vec<f64> {
    let p = nodes.len();
    let mut vals = vec![0.0; p];
    for (i, &x) in nodes.iter().enumerate() {
        if (t - x).abs() < 1e-300 {
            vals[i] = 1.0;
            return vals;
        }
    }
    let mut denom = 0.0;
    let mut terms = vec![0.0; p];
    for (i, &x) in nodes.iter().enumerate() {
        let w = (-1.0f64).powi(i as i32)
            * ((2 * i + 1) as f64 * std::f64::consts::PI / (2 * p) as f64).sin();
        terms[i] = w / (t - x);
        denom += terms[i];
    }
    for i in 0..p {
        vals[i] = terms[i] / denom;
    }
    vals
}

struct InterpBox {
    nodes: [Vec<f64>; 3],
    /// tensor grid points, fastest axis first
    grid: Vec<Vector3<f64>>,
}

fn interp_box(bbox: &[Vector3<f64>; 2], p: usize) -> InterpBox {
    // inflate to avoid degenerate axes for co-planar point sets
    let pad = 1e-6;
    let nodes = [
        chebyshev_points(bbox[0].x - pad, bbox[1].x + pad, p),
        chebyshev_points(bbox[0].y - pad, bbox[1].y + pad, p),
        chebyshev_points(bbox[0].z - pad, bbox[1].z + pad, p),
    ];
    let mut grid = Vec::with_capacity(p * p * p);
    for k in 0..p {
        for j in 0..p {
            for i in 0..p {
                grid.push(Vector3::new(nodes[0][i], nodes[1][j], nodes[2][k]));
            }
        }
    }
    InterpBox { nodes, grid }
}

/// Rows: basis functionals of the cluster; columns: p^3 tensor Lagrange
/// polynomials on the box, composed with the panel quadrature.
fn interpolation_factor(
    geo: &Geometry,
    tree: &ClusterTree,
    node: usize,
    ib: &InterpBox,
) -> DMatrix<f64> {
    let n = &tree.nodes[node];
    let p = ib.nodes[0].len();
    let mut u = DMatrix::zeros(n.len(), p * p * p);
    for (row, &b) in tree.perm[n.begin..n.end].iter().enumerate() {
        let bq = &geo.basis[b];
        for (x, &c) in geo.points[bq.first..bq.first + bq.len]
            .iter()
            .zip(&bq.coeffs)
        {
            let lx = lagrange_values(&ib.nodes[0], x.x);
            let ly = lagrange_values(&ib.nodes[1], x.y);
            let lz = lagrange_values(&ib.nodes[2], x.z);
            let mut m = 0;
            for k in 0..p {
                for j in 0..p {
                    for i in 0..p {
                        u[(row, m)] += c * lx[i] * ly[j] * lz[k];
                        m += 1;
                    }
                }
            }
        }
    }
    u
}

fn node_bbox(geo: &Geometry, tree: &ClusterTree, node: usize) -> [Vector3<f64>; 2] {
    let n = &tree.nodes[node];
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for &b in &tree.perm[n.begin..n.end] {
        let bq = &geo.basis[b];
        for x in &geo.points[bq.first..bq.first + bq.len] {
            lo = lo.inf(x);
            hi = hi.sup(x);
        }
    }
    [lo, hi]
}

fn box_distance(a: &[Vector3<f64>; 2], b: &[Vector3<f64>; 2]) -> f64 {
    let mut d2 = 0.0;
    for ax in 0..3 {
        let gap = (a[0][ax] - b[1][ax]).max(b[0][ax] - a[1][ax]).max(0.0);
        d2 += gap * gap;
    }
    f64::sqrt(d2)
}

fn box_diameter(b: &[Vector3<f64>; 2]) -> f64 {
    (b[1] - b[0]).norm()
}

/// Compressed representation of the even or odd scattering matrix.
pub fn compress_scattering(
    mesh: &SphereMesh,
    phase: PhaseFunction,
    parity: Parity,
    cfg: &HConfig,
) -> Result<HMatrixApprox> {
    cfg.validate()?;
    let qcfg = AngularQuadConfig::default();
    let geo = build_geometry(mesh, parity, &qcfg)?;
    // n_min counts panel quadrature points, so the leaf size in basis
    // functions is n_min divided by the points carried per basis function
    let pts_per_basis = geo.basis.iter().map(|b| b.len).sum::<usize>() / geo.basis.len();
    let tree_cfg = HConfig {
        n_min: (cfg.n_min / pts_per_basis).max(1),
        ..*cfg
    };
    let tree = build_cluster_tree(&geo.sites, &tree_cfg)?;
    let g = phase.g();
    let c0 = (1.0 - g * g) / (4.0 * std::f64::consts::PI);
    let hg = move |t: f64| {
        let d = 1.0 - 2.0 * g * t + g * g;
        c0 / (d * d.sqrt())
    };
    // the antipodal fold turns the phase kernel into a single parity-folded
    // kernel of the scattering cosine: k(t) + k(-t) (even) or k(t) - k(-t)
    // (odd), contributed twice per pair
    let pm = if parity == Parity::Even { 1.0 } else { -1.0 };
    let kernel = move |x: &Vector3<f64>, y: &Vector3<f64>| {
        let t = (x.dot(y) / (x.norm() * y.norm())).clamp(-1.0, 1.0);
        2.0 * (hg(t) + pm * hg(-t))
    };
    // matrix scale (largest diagonal entry) anchoring the truncation cutoff
    let mut scale = 0.0f64;
    for bq in &geo.basis {
        let pts = &geo.points[bq.first..bq.first + bq.len];
        let mut acc = 0.0;
        for (x, &cx) in pts.iter().zip(&bq.coeffs) {
            for (y, &cy) in pts.iter().zip(&bq.coeffs) {
                acc += cx * cy * kernel(x, y);
            }
        }
        scale = scale.max(acc.abs());
    }
    let mut builder = Builder {
        geo: &geo,
        tree: &tree,
        cfg: *cfg,
        atol: cfg.trunc_tol * scale,
        kernel,
        boxes: vec![None; tree.nodes.len()],
        blocks: Vec::new(),
    };
    builder.emit(tree.root(), tree.root());
    let blocks = builder.blocks;
    Ok(HMatrixApprox {
        n: geo.basis.len(),
        tree,
        blocks,
        parity,
    })
}

/// Block partition builder for the parity-folded kernel. The folded kernel
/// has peaks at both the column box and its mirror image, so admissibility
/// requires separation from both.
struct Builder<'g, K: Fn(&Vector3<f64>, &Vector3<f64>) -> f64> {
    geo: &'g Geometry,
    tree: &'g ClusterTree,
    cfg: HConfig,
    atol: f64,
    kernel: K,
    boxes: Vec<Option<[Vector3<f64>; 2]>>,
    blocks: Vec<Block>,
}

impl<K: Fn(&Vector3<f64>, &Vector3<f64>) -> f64> Builder<'_, K> {
    fn node_box(&mut self, n: usize) -> [Vector3<f64>; 2] {
        *self.boxes[n].get_or_insert_with(|| node_bbox(self.geo, self.tree, n))
    }

    fn child_pairs(&self, rn: usize, cn: usize) -> Option<Vec<(usize, usize)>> {
        match (self.tree.nodes[rn].children, self.tree.nodes[cn].children) {
            (None, None) => None,
            (Some([r0, r1]), Some([c0, c1])) => {
                Some(vec![(r0, c0), (r0, c1), (r1, c0), (r1, c1)])
            }
            (Some([r0, r1]), None) => Some(vec![(r0, cn), (r1, cn)]),
            (None, Some([c0, c1])) => Some(vec![(rn, c0), (rn, c1)]),
        }
    }

    /// Admissible and economical low-rank factors, if possible here.
    fn try_lowrank(&mut self, rn: usize, cn: usize) -> Option<Block> {
        let (nr, nc) = (self.tree.nodes[rn].len(), self.tree.nodes[cn].len());
        let r = self.cfg.p.pow(3);
        let min_cost = if self.cfg.truncate {
            nr + nc
        } else {
            (nr + nc) * r
        };
        if min_cost >= nr * nc {
            return None;
        }
        let rb = self.node_box(rn);
        let cb = self.node_box(cn);
        let cb_neg = [-cb[1], -cb[0]];
        let diam = box_diameter(&rb).min(box_diameter(&cb));
        let dist = box_distance(&rb, &cb).min(box_distance(&rb, &cb_neg));
        if diam > self.cfg.eta_adm * dist {
            return None;
        }
        let lr = make_lowrank(
            self.geo,
            self.tree,
            rn,
            cn,
            &rb,
            &cb,
            &self.cfg,
            self.atol,
            &self.kernel,
        );
        (lr.entries() < nr * nc).then_some(lr)
    }

    fn emit(&mut self, rn: usize, cn: usize) {
        if let Some(block) = self.try_lowrank(rn, cn) {
            self.blocks.push(block);
        } else if let Some(pairs) = self.child_pairs(rn, cn) {
            for (a, b) in pairs {
                self.emit(a, b);
            }
        } else {
            let block = make_dense(self.geo, self.tree, rn, cn, &self.kernel);
            self.blocks.push(block);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn make_lowrank(
    geo: &Geometry,
    tree: &ClusterTree,
    rn: usize,
    cn: usize,
    rb: &[Vector3<f64>; 2],
    cb: &[Vector3<f64>; 2],
    cfg: &HConfig,
    atol: f64,
    kernel: &impl Fn(&Vector3<f64>, &Vector3<f64>) -> f64,
) -> Block {
    // with the truncation pass enabled, interpolate at higher order and
    // recompress back to rank <= p^3; this recovers the accuracy that the
    // subsequent rank reduction would otherwise discard
    let q = if cfg.truncate { cfg.p + 2 } else { cfg.p };
    // interpolate on the smaller box only (the admissibility criterion
    // bounds the smaller diameter); the other factor carries exact kernel
    // evaluations at the interpolation nodes
    let (mut u, mut v) = if box_diameter(rb) <= box_diameter(cb) {
        let ib = interp_box(rb, q);
        let u = interpolation_factor(geo, tree, rn, &ib);
        let v = evaluation_factor(geo, tree, cn, &ib, |x, y| kernel(y, x));
        (u, v)
    } else {
        let ib = interp_box(cb, q);
        let u = evaluation_factor(geo, tree, rn, &ib, kernel);
        let v = interpolation_factor(geo, tree, cn, &ib);
        (u, v)
    };
    if cfg.truncate {
        (u, v) = truncate_pair(u, v, atol, cfg.p.pow(3));
    }
    Block {
        row_node: rn,
        col_node: cn,
        data: BlockData::LowRank(u, v),
    }
}

/// Rows: basis functionals of the cluster; columns: kernel evaluations
/// against the interpolation grid, composed with the panel quadrature.
fn evaluation_factor(
    geo: &Geometry,
    tree: &ClusterTree,
    node: usize,
    ib: &InterpBox,
    kernel: impl Fn(&Vector3<f64>, &Vector3<f64>) -> f64,
) -> DMatrix<f64> {
    let n = &tree.nodes[node];
    let mut w = DMatrix::zeros(n.len(), ib.grid.len());
    for (row, &b) in tree.perm[n.begin..n.end].iter().enumerate() {
        let bq = &geo.basis[b];
        for (x, &c) in geo.points[bq.first..bq.first + bq.len]
            .iter()
            .zip(&bq.coeffs)
        {
            for (m, xi) in ib.grid.iter().enumerate() {
                w[(row, m)] += c * kernel(x, xi);
            }
        }
    }
    w
}

/// Reduces the rank of U V^T by dropping singular values below atol.
fn truncate_pair(
    u: DMatrix<f64>,
    v: DMatrix<f64>,
    atol: f64,
    max_rank: usize,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let qr_u = u.qr();
    let qr_v = v.qr();
    let core = qr_u.r() * qr_v.r().transpose();
    let svd = core.svd(true, true);
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&s| s > atol)
        .count()
        .clamp(1, max_rank);
    let us = svd.u.as_ref().unwrap().columns(0, rank).clone_owned();
    let vs = svd.v_t.as_ref().unwrap().rows(0, rank).transpose();
    let mut left = qr_u.q() * us;
    for (j, s) in svd.singular_values.iter().take(rank).enumerate() {
        left.column_mut(j).scale_mut(*s);
    }
    (left, qr_v.q() * vs)
}

fn make_dense(
    geo: &Geometry,
    tree: &ClusterTree,
    rn: usize,
    cn: usize,
    kernel: &impl Fn(&Vector3<f64>, &Vector3<f64>) -> f64,
) -> Block {
    let (rnode, cnode) = (&tree.nodes[rn], &tree.nodes[cn]);
    let mut data = DMatrix::zeros(rnode.len(), cnode.len());
    for (i, &a) in tree.perm[rnode.begin..rnode.end].iter().enumerate() {
        for (j, &b) in tree.perm[cnode.begin..cnode.end].iter().enumerate() {
            let (ba, bb) = (&geo.basis[a], &geo.basis[b]);
            let mut acc = 0.0;
            for (x, &cx) in geo.points[ba.first..ba.first + ba.len].iter().zip(&ba.coeffs) {
                for (y, &cy) in geo.points[bb.first..bb.first + bb.len].iter().zip(&bb.coeffs)
                {
                    acc += cx * cy * kernel(x, y);
                }
            }
            data[(i, j)] = acc;
        }
    }
    Block {
        row_node: rn,
        col_node: cn,
        data: BlockData::Dense(data),
    }
}

impl HMatrixApprox {
    pub fn nrows(&self) -> usize {
        self.n
    }

    pub fn ncols(&self) -> usize {
        self.n
    }

    /// y = H x
    pub fn matvec(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.n {
            return Err(RteError::dim(self.n, x.len(), "hmatvec"));
        }
        // gather into tree order
        let xp = DVector::from_fn(self.n, |i, _| x[self.tree.perm[i]]);
        let mut yp = DVector::zeros(self.n);
        for block in &self.blocks {
            let rnode = &self.tree.nodes[block.row_node];
            let cnode = &self.tree.nodes[block.col_node];
            let xs = xp.rows(cnode.begin, cnode.len()).clone_owned();
            let contrib = match &block.data {
                BlockData::Dense(d) => d * xs,
                BlockData::LowRank(u, v) => u * (v.transpose() * xs),
            };
            yp.rows_mut(rnode.begin, rnode.len())
                .axpy(1.0, &contrib, 1.0);
        }
        let mut y = DVector::zeros(self.n);
        for i in 0..self.n {
            y[self.tree.perm[i]] = yp[i];
        }
        Ok(y)
    }

    pub fn stats(&self) -> HStats {
        let mut stored = 0usize;
        let mut dense_blocks = 0;
        let mut lowrank_blocks = 0;
        let mut max_rank = 0;
        for block in &self.blocks {
            match &block.data {
                BlockData::Dense(d) => {
                    stored += d.len() * 8;
                    dense_blocks += 1;
                }
                BlockData::LowRank(u, v) => {
                    stored += (u.len() + v.len()) * 8;
                    lowrank_blocks += 1;
                    max_rank = max_rank.max(u.ncols());
                }
            }
        }
        HStats {
            n: self.n,
            dense_bytes: self.n * self.n * 8,
            stored_bytes: stored,
            dense_blocks,
            lowrank_blocks,
            max_rank,
            tree_depth: self.tree.depth(),
        }
    }
}

/// Free-function form of the compressed matrix-vector product.
pub fn hmatvec(h: &HMatrixApprox, x: &DVector<f64>) -> Result<DVector<f64>> {
    h.matvec(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::{assemble_scattering, assemble_scattering_even};
    use crate::sphere::build_sphere_mesh;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn single_node_tree_for_small_sets() {
        let mesh = build_sphere_mesh(2);
        let sites: Vec<Vector3<f64>> = mesh
            .representatives
            .iter()
            .map(|&t| {
                let [a, b, c] = mesh.triangle_vertices(t);
                ((a + b + c) / 3.0).normalize()
            })
            .collect();
        let tree = build_cluster_tree(&sites, &HConfig::default()).unwrap();
        assert_eq!(tree.nodes.len(), 1);
        assert_eq!(tree.depth(), 1);
    }

    #[test]
    fn leaves_partition_indices() {
        let mesh = build_sphere_mesh(3);
        let sites: Vec<Vector3<f64>> = mesh
            .representatives
            .iter()
            .map(|&t| {
                let [a, b, c] = mesh.triangle_vertices(t);
                ((a + b + c) / 3.0).normalize()
            })
            .collect();
        let cfg = HConfig {
            n_min: 16,
            ..HConfig::default()
        };
        let tree = build_cluster_tree(&sites, &cfg).unwrap();
        let mut seen = vec![0usize; sites.len()];
        for node in &tree.nodes {
            if node.children.is_none() {
                assert!(node.len() <= cfg.n_min);
                for &i in &tree.perm[node.begin..node.end] {
                    seen[i] += 1;
                }
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        let bound = (sites.len() as f64 / cfg.n_min as f64).log2().ceil() as usize + 3;
        assert!(tree.depth() <= bound, "depth {} > {bound}", tree.depth());
        assert!(build_cluster_tree(&[], &cfg).is_err());
    }

    #[test]
    fn zero_eta_reproduces_dense_exactly() {
        let mesh = build_sphere_mesh(2);
        let phase = PhaseFunction::new(0.5).unwrap();
        let cfg = HConfig {
            eta_adm: 0.0,
            n_min: 8,
            ..HConfig::default()
        };
        let h = compress_scattering(&mesh, phase, Parity::Even, &cfg).unwrap();
        let dense = assemble_scattering_even(&mesh, phase, &AngularQuadConfig::default()).unwrap();
        let mut rng = StdRng::seed_from_u64(21);
        let x = DVector::from_fn(h.nrows(), |_, _| rng.random_range(-1.0..1.0));
        let got = h.matvec(&x).unwrap();
        let want = &dense * &x;
        assert!((got - &want).amax() < 1e-12 * want.amax());
        assert_eq!(h.stats().lowrank_blocks, 0);
    }

    #[test]
    fn matvec_is_linear() {
        let mesh = build_sphere_mesh(2);
        let phase = PhaseFunction::new(0.5).unwrap();
        let cfg = HConfig {
            n_min: 8,
            ..HConfig::default()
        };
        let h = compress_scattering(&mesh, phase, Parity::Even, &cfg).unwrap();
        let mut rng = StdRng::seed_from_u64(22);
        let x = DVector::from_fn(h.nrows(), |_, _| rng.random_range(-1.0..1.0));
        let y = DVector::from_fn(h.nrows(), |_, _| rng.random_range(-1.0..1.0));
        let lhs = h.matvec(&(2.5 * &x - 0.75 * &y)).unwrap();
        let rhs = 2.5 * h.matvec(&x).unwrap() - 0.75 * h.matvec(&y).unwrap();
        assert!((lhs - rhs).amax() < 1e-13);
        assert!(h.matvec(&DVector::zeros(3)).is_err());
    }

    #[test]
    fn level3_compression_accuracy() {
        let mesh = build_sphere_mesh(3);
        let phase = PhaseFunction::new(0.5).unwrap();
        let qcfg = AngularQuadConfig::default();
        let (dense_even, dense_odd) = assemble_scattering(&mesh, phase, &qcfg).unwrap();
        let cfg = HConfig {
            n_min: 16,
            truncate: true,
            trunc_tol: 1e-5,
            ..HConfig::default()
        };
        let mut rng = StdRng::seed_from_u64(23);
        for (parity, dense, tol) in [
            (Parity::Even, &dense_even, 1e-4),
            (Parity::Odd, &dense_odd, 2e-4),
        ] {
            let h = compress_scattering(&mesh, phase, parity, &cfg).unwrap();
            for _ in 0..3 {
                let x = DVector::from_fn(h.nrows(), |_, _| rng.random_range(-1.0..1.0));
                let got = h.matvec(&x).unwrap();
                let want = dense * &x;
                let rel = (&got - &want).norm() / want.norm();
                assert!(rel <= tol, "{parity:?}: relative error {rel}");
            }
        }
    }

    #[test]
    fn error_monotone_in_interpolation_order() {
        let mesh = build_sphere_mesh(4);
        let phase = PhaseFunction::new(0.5).unwrap();
        let dense = assemble_scattering_even(&mesh, phase, &AngularQuadConfig::default()).unwrap();
        let mut rng = StdRng::seed_from_u64(24);
        let x = DVector::from_fn(mesh.n_pairs(), |_, _| rng.random_range(-1.0..1.0));
        let want = &dense * &x;
        let mut prev = f64::INFINITY;
        for p in [2, 3, 4, 5] {
            let cfg = HConfig {
                p,
                truncate: true,
                trunc_tol: 1e-5,
                ..HConfig::default()
            };
            let h = compress_scattering(&mesh, phase, Parity::Even, &cfg).unwrap();
            assert!(h.stats().lowrank_blocks > 0);
            let rel = (h.matvec(&x).unwrap() - &want).norm() / want.norm();
            assert!(rel <= prev * 1.05, "p={p}: {rel} vs {prev}");
            prev = rel;
        }
    }

    #[test]
    fn truncation_keeps_accuracy_and_saves_memory() {
        let mesh = build_sphere_mesh(3);
        let phase = PhaseFunction::new(0.5).unwrap();
        let dense = assemble_scattering_even(&mesh, phase, &AngularQuadConfig::default()).unwrap();
        let base = HConfig {
            n_min: 16,
            ..HConfig::default()
        };
        let trunc = HConfig {
            truncate: true,
            ..base
        };
        let h0 = compress_scattering(&mesh, phase, Parity::Even, &base).unwrap();
        let h1 = compress_scattering(&mesh, phase, Parity::Odd, &trunc).unwrap();
        let _ = h1;
        let ht = compress_scattering(&mesh, phase, Parity::Even, &trunc).unwrap();
        assert!(ht.stats().stored_bytes <= h0.stats().stored_bytes);
        let mut rng = StdRng::seed_from_u64(25);
        let x = DVector::from_fn(mesh.n_pairs(), |_, _| rng.random_range(-1.0..1.0));
        let want = &dense * &x;
        let rel = (ht.matvec(&x).unwrap() - &want).norm() / want.norm();
        assert!(rel <= 2e-4, "truncated error {rel}");
    }

    #[test]
    fn stored_bytes_never_exceed_dense() {
        let mesh = build_sphere_mesh(3);
        let phase = PhaseFunction::new(0.5).unwrap();
        for n_min in [8, 16, 64] {
            for truncate in [false, true] {
                let cfg = HConfig {
                    n_min,
                    truncate,
                    ..HConfig::default()
                };
                let h = compress_scattering(&mesh, phase, Parity::Even, &cfg).unwrap();
                let s = h.stats();
                assert!(s.stored_bytes <= s.dense_bytes);
            }
        }
    }
}
