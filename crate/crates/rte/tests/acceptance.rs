//! End-to-end acceptance checks. Each criterion prints a single pass/fail
//! line; run with `--nocapture` to see them.

use nalgebra::{DMatrix, DVector, Vector3};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use rte::assembly::{
    assemble_angular, assemble_scattering_even, assemble_system, lattice_field, AngularMatrices,
    AngularQuadConfig, AssembledSystem, OpticalField,
};
use rte::hmatrix::{compress_scattering, HConfig, Parity};
use rte::kernel::{sph_harmonic, PhaseFunction};
use rte::operators::{kron_matvec, OperatorConfig, Operators};
use rte::quadrature::triangle_rule;
use rte::solver::{ContractionMode, IterationReport, Solver, SolverConfig};
use rte::spatial::{build_lattice_mesh, build_square_mesh, SpatialMesh};
use rte::sphere::{build_sphere_mesh, SphereMesh};
use rte::{dense, eigen};

fn report(criterion: usize, name: &str, failures: &[String]) {
    let verdict = if failures.is_empty() { "pass" } else { "fail" };
    println!("criterion {criterion} ({name}): {verdict}");
    assert!(failures.is_empty(), "criterion {criterion}: {failures:#?}");
}

fn uniform_field(mesh: &SpatialMesh, sigma_a: f64, sigma_s: f64, g: f64) -> OpticalField {
    let n = mesh.n_triangles();
    OpticalField::new(
        vec![sigma_a; n],
        vec![sigma_s; n],
        vec![1.0; n],
        PhaseFunction::new(g).unwrap(),
    )
    .unwrap()
}

fn random_vec(n: usize, seed: u64) -> DVector<f64> {
    let mut rng = StdRng::seed_from_u64(seed);
    DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
}

/// Largest relative error over all harmonics of one degree when the assembled
/// scattering matrix is applied to their nodal interpolants.
fn eigenrelation_error(mesh: &SphereMesh, ang: &AngularMatrices, g: f64, l: usize) -> f64 {
    let n = mesh.n_pairs();
    let factor = g.powi(l as i32);
    let mut worst = 0.0f64;
    for m in -(l as i64)..=(l as i64) {
        let (num, den) = if l % 2 == 0 {
            // even degree: piecewise constants on antipodal pairs
            let v = DVector::from_fn(n, |k, _| {
                let verts = mesh.triangle_vertices(mesh.representatives[k]);
                let c: Vector3<f64> = (verts[0] + verts[1] + verts[2]).normalize();
                sph_harmonic(l, m, &c).unwrap()
            });
            let w = &ang.s_plus * &v;
            let mut num = 0.0;
            let mut den = 0.0;
            for k in 0..n {
                let e = w[k] / ang.m_plus[k] - factor * v[k];
                num += ang.m_plus[k] * e * e;
                den += ang.m_plus[k] * v[k] * v[k];
            }
            (num, den)
        } else {
            // odd degree: vertex interpolant in the piecewise linear basis
            let mut v = DVector::zeros(3 * n);
            for k in 0..n {
                let verts = mesh.triangle_vertices(mesh.representatives[k]);
                for i in 0..3 {
                    v[3 * k + i] = sph_harmonic(l, m, &verts[i].normalize()).unwrap();
                }
            }
            let w = &ang.s_minus * &v;
            let mut num = 0.0;
            let mut den = 0.0;
            for k in 0..n {
                let block = &ang.m_minus[k];
                let wk = Vector3::new(w[3 * k], w[3 * k + 1], w[3 * k + 2]);
                let vk = Vector3::new(v[3 * k], v[3 * k + 1], v[3 * k + 2]);
                let e = block.try_inverse().unwrap() * wk - factor * vk;
                num += (block * e).dot(&e);
                den += (block * vk).dot(&vk);
            }
            (num, den)
        };
        worst = worst.max((num / den).sqrt());
    }
    worst
}

#[test]
fn scattering_eigenrelation() {
    let mut failures = Vec::new();
    let qcfg = AngularQuadConfig::default();
    for &g in &[0.3, 0.7] {
        let phase = PhaseFunction::new(g).unwrap();
        let errs: Vec<Vec<f64>> = [2usize, 3]
            .iter()
            .map(|&level| {
                let mesh = build_sphere_mesh(level);
                let ang = assemble_angular(&mesh, phase, &qcfg).unwrap();
                (0..=3)
                    .map(|l| eigenrelation_error(&mesh, &ang, g, l))
                    .collect()
            })
            .collect();
        for l in 0..=3 {
            let (coarse, fine) = (errs[0][l], errs[1][l]);
            if fine > 0.05 {
                failures.push(format!("g={g} l={l}: fine-level error {fine:.3e} > 5%"));
            }
            if fine >= coarse {
                failures.push(format!(
                    "g={g} l={l}: error did not decrease ({coarse:.3e} -> {fine:.3e})"
                ));
            }
        }
    }
    report(1, "scattering eigenrelation", &failures);
}

#[test]
fn truncated_inverse_exactness() {
    let mut failures = Vec::new();
    let smesh = build_square_mesh(2, 1.0);
    let amesh = build_sphere_mesh(1);
    let field = uniform_field(&smesh, 0.3, 0.9, 0.5);
    let sys = assemble_system(smesh, amesh, field, &AngularQuadConfig::default()).unwrap();
    let ops = Operators::new(
        &sys,
        OperatorConfig {
            n_pre: 3,
            ..OperatorConfig::default()
        },
    )
    .unwrap();
    let n = sys.n_odd();
    let b = random_vec(n, 7);
    let x = ops.apply_mmk_inv_precond(&b).unwrap();
    // closed-form inverse composed with the truncated operator is the identity
    let res = (ops.apply_mmk_truncated(&x).unwrap() - &b).norm() / b.norm();
    if res > 1e-10 {
        failures.push(format!("composition defect {res:.3e} > 1e-10"));
    }
    // cross-check against a dense direct solve of the truncated operator
    let mut t = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut e = DVector::zeros(n);
        e[j] = 1.0;
        t.set_column(j, &ops.apply_mmk_truncated(&e).unwrap());
    }
    let xd = t.lu().solve(&b).unwrap();
    let diff = (&x - &xd).norm() / xd.norm();
    if diff > 1e-10 {
        failures.push(format!("dense cross-check defect {diff:.3e} > 1e-10"));
    }
    report(2, "truncated inverse exactness", &failures);
}

#[test]
fn inner_solver_iteration_counts() {
    let mut failures = Vec::new();
    // reference counts per preconditioner order -1, 1, 3, 5
    let cases: [(f64, [usize; 4]); 3] = [
        (0.0, [1, 1, 1, 1]),
        (0.5, [8, 7, 6, 4]),
        (0.9, [21, 19, 19, 15]),
    ];
    let smesh = build_lattice_mesh(1);
    let amesh = build_sphere_mesh(3);
    for &(g, expected) in &cases {
        let field = lattice_field(&smesh, PhaseFunction::new(g).unwrap());
        let sys = assemble_system(
            smesh.clone(),
            amesh.clone(),
            field,
            &AngularQuadConfig::default(),
        )
        .unwrap();
        let b = random_vec(sys.n_odd(), 42);
        for (slot, &n_pre) in [-1i64, 1, 3, 5].iter().enumerate() {
            let ops = Operators::new(
                &sys,
                OperatorConfig {
                    inner_tol: 1e-13,
                    inner_max: 500,
                    n_pre,
                },
            )
            .unwrap();
            let (_, iters) = ops.solve_mmk(&b).unwrap();
            let want = expected[slot];
            if g == 0.0 {
                if iters != 1 {
                    failures.push(format!("g=0 n_pre={n_pre}: {iters} iterations != 1"));
                }
            } else if iters.abs_diff(want) > 3 {
                failures.push(format!(
                    "g={g} n_pre={n_pre}: {iters} iterations, reference {want} (band +-3)"
                ));
            }
        }
    }
    report(3, "inner solver iteration counts", &failures);
}

/// Contraction-factor estimate; if the power iteration hits its iteration cap
/// (clustered spectra, notably g = 0), the last Rayleigh quotient is close
/// enough for the banded checks here.
fn eta_estimate(solver: &Solver) -> f64 {
    match solver.estimate_contraction(ContractionMode::Norm) {
        Ok(eta) => eta,
        Err(rte::error::RteError::PowerIterationFailure { last, .. }) => last.sqrt(),
        Err(e) => panic!("contraction estimate failed: {e}"),
    }
}

fn lattice_square_system(cells: usize, level: usize, g: f64) -> AssembledSystem {
    let smesh = build_square_mesh(cells, 7.0);
    let amesh = build_sphere_mesh(level);
    let field = lattice_field(&smesh, PhaseFunction::new(g).unwrap());
    assemble_system(smesh, amesh, field, &AngularQuadConfig::default()).unwrap()
}

/// Per-step increment ratio checks shared by criteria 4 and 5 runs.
fn ratio_failures(
    tag: &str,
    rep: &IterationReport,
    c: f64,
    eta: Option<f64>,
    failures: &mut Vec<String>,
) {
    for i in 1..rep.increments.len() {
        let ratio = rep.increments[i] / rep.increments[i - 1];
        if ratio > c + 1e-6 {
            failures.push(format!("{tag} step {i}: ratio {ratio:.4} > c + 1e-6"));
        }
        if i >= 2 {
            if let Some(eta) = eta {
                if ratio > eta + 0.05 {
                    failures.push(format!(
                        "{tag} step {i}: ratio {ratio:.4} > eta {eta:.4} + 0.05"
                    ));
                }
            }
        }
    }
}

#[test]
fn contraction_rates_and_benchmark() {
    let mut f4 = Vec::new();
    let mut f5 = Vec::new();
    let mut f6 = Vec::new();

    // isotropic contraction factor, stable under angular refinement
    let mut eta_iso = Vec::new();
    for level in [2usize, 3] {
        let sys = lattice_square_system(28, level, 0.0);
        let c = sys.field.scattering_ratio();
        let cfg = SolverConfig {
            l: 1,
            n_corr: 0,
            n_pre: -1,
            ..SolverConfig::default()
        };
        let solver = Solver::new(&sys, cfg).unwrap();
        let eta = eta_estimate(&solver);
        eta_iso.push(eta);
        let (_, rep) = solver.richardson_solve().unwrap();
        ratio_failures(&format!("iso level {level}"), &rep, c, Some(eta), &mut f6);
    }
    if !(0.33..=0.53).contains(&eta_iso[0]) {
        f4.push(format!("isotropic eta {} outside [0.33, 0.53]", eta_iso[0]));
    }
    if (eta_iso[0] - eta_iso[1]).abs() > 0.05 {
        f4.push(format!(
            "isotropic eta not stable under refinement: {} vs {}",
            eta_iso[0], eta_iso[1]
        ));
    }

    // anisotropic grid over correction order and preconditioner steps
    let sys = lattice_square_system(28, 2, 0.5);
    let c = sys.field.scattering_ratio();
    let orders = [0i64, 2, 4];
    let steps = [1usize, 2, 4];
    let mut eta = [[0.0f64; 3]; 3];
    for (i, &n_corr) in orders.iter().enumerate() {
        for (j, &l) in steps.iter().enumerate() {
            let cfg = SolverConfig {
                l,
                n_corr,
                n_pre: 5,
                ..SolverConfig::default()
            };
            let solver = Solver::new(&sys, cfg).unwrap();
            eta[i][j] = eta_estimate(&solver);
            let (_, rep) = solver.richardson_solve().unwrap();
            ratio_failures(
                &format!("n_corr={n_corr} l={l}"),
                &rep,
                c,
                Some(eta[i][j]),
                &mut f6,
            );
        }
    }
    if eta[2][2] > 0.25 {
        f4.push(format!("eta at full correction {} > 0.25", eta[2][2]));
    }
    for j in 0..3 {
        for i in 1..3 {
            if eta[i][j] > eta[i - 1][j] + 1e-3 {
                f4.push(format!(
                    "eta not monotone in correction order at l={}: {} -> {}",
                    steps[j],
                    eta[i - 1][j],
                    eta[i][j]
                ));
            }
        }
    }
    for i in 0..3 {
        for j in 1..3 {
            if eta[i][j] > eta[i][j - 1] + 1e-3 {
                f4.push(format!(
                    "eta not monotone in preconditioner steps at n_corr={}: {} -> {}",
                    orders[i],
                    eta[i][j - 1],
                    eta[i][j]
                ));
            }
        }
    }
    report(4, "contraction rate bands", &f4);

    // the contraction factor is insensitive to the spatial mesh, so the level-3
    // reference comes from a coarse spatial grid
    let eta_bench = [eta[2][2], {
        let sys = lattice_square_system(14, 3, 0.5);
        let solver = Solver::new(
            &sys,
            SolverConfig {
                n_pre: 5,
                ..SolverConfig::default()
            },
        )
        .unwrap();
        eta_estimate(&solver)
    }];

    // benchmark solves on the lattice grids
    let mut counts = Vec::new();
    for (li, &level) in [2usize, 3].iter().enumerate() {
        for refine in [0usize, 1] {
            let smesh = build_lattice_mesh(refine);
            let amesh = build_sphere_mesh(level);
            let field = lattice_field(&smesh, PhaseFunction::new(0.5).unwrap());
            let c = field.scattering_ratio();
            let sys =
                assemble_system(smesh, amesh, field, &AngularQuadConfig::default()).unwrap();
            let solver = Solver::new(
                &sys,
                SolverConfig {
                    n_pre: 5,
                    ..SolverConfig::default()
                },
            )
            .unwrap();
            let (_, rep) = solver.richardson_solve().unwrap();
            if !(7..=12).contains(&rep.iterations) {
                f5.push(format!(
                    "level {level} refine {refine}: {} iterations outside [7, 12]",
                    rep.iterations
                ));
            }
            counts.push(rep.iterations);
            ratio_failures(
                &format!("benchmark level {level} refine {refine}"),
                &rep,
                c,
                Some(eta_bench[li]),
                &mut f6,
            );
        }
    }
    let (lo, hi) = (
        counts.iter().min().unwrap(),
        counts.iter().max().unwrap(),
    );
    if hi - lo > 2 {
        f5.push(format!("iteration counts {counts:?} spread over more than 2"));
    }
    report(5, "benchmark iteration counts", &f5);
    report(6, "per-step contraction guarantee", &f6);
}

#[test]
fn scattering_compression() {
    let mut failures = Vec::new();
    let phase = PhaseFunction::new(0.5).unwrap();
    let cfg = HConfig {
        eta_adm: 1.4,
        p: 4,
        n_min: 64,
        truncate: true,
        trunc_tol: 1e-5,
    };
    for (level, max_ratio, check_error) in [(4usize, 0.80, true), (5, 0.50, false)] {
        let mesh = build_sphere_mesh(level);
        let h = compress_scattering(&mesh, phase, Parity::Even, &cfg).unwrap();
        let stats = h.stats();
        let ratio = stats.stored_bytes as f64 / stats.dense_bytes as f64;
        if ratio > max_ratio {
            failures.push(format!(
                "level {level}: storage ratio {ratio:.3} > {max_ratio}"
            ));
        }
        if check_error {
            let dense =
                assemble_scattering_even(&mesh, phase, &AngularQuadConfig::default()).unwrap();
            let x = random_vec(mesh.n_pairs(), 11);
            let exact = &dense * &x;
            let err = (h.matvec(&x).unwrap() - &exact).norm() / exact.norm();
            if err > 1e-4 {
                failures.push(format!("level {level}: matvec error {err:.3e} > 1e-4"));
            }
        }
    }
    report(7, "scattering compression", &failures);
}

#[test]
fn dense_oracle_equivalence() {
    let mut failures = Vec::new();
    let smesh = build_square_mesh(2, 1.0);
    let amesh = build_sphere_mesh(0);
    let field = uniform_field(&smesh, 0.3, 0.9, 0.5);
    let sys = assemble_system(smesh, amesh, field, &AngularQuadConfig::default()).unwrap();
    let solver = Solver::new(
        &sys,
        SolverConfig {
            n_corr: 2,
            ..SolverConfig::default()
        },
    )
    .unwrap();
    let (u_plus, rep) = solver.richardson_solve().unwrap();
    if !rep.converged {
        failures.push("iteration did not converge".into());
    }
    let emk = dense::dense_e_mk(&sys);
    let exact = emk.clone().lu().solve(&dense::dense_rhs(&sys)).unwrap();
    let err = &u_plus - &exact;
    let rel = (err.dot(&(&emk * &err)) / exact.dot(&(&emk * &exact))).sqrt();
    if rel > 1e-6 {
        failures.push(format!("energy-norm error {rel:.3e} > 1e-6"));
    }
    // the recovered pair solves the mixed system
    let u_minus = solver.recover_odd(&u_plus).unwrap();
    let ops = &solver.ops;
    let r1 = ops.apply_m_plus(&u_plus).unwrap() + ops.apply_r(&u_plus).unwrap()
        - ops.apply_k_plus(&u_plus).unwrap()
        - ops.apply_at(&u_minus).unwrap()
        - &sys.q_plus;
    let r2 = ops.apply_a(&u_plus).unwrap() + ops.apply_mmk(&u_minus).unwrap() - &sys.q_minus;
    let scale = sys.q_plus.norm().max(sys.q_minus.norm());
    if r1.norm() / scale > 1e-6 || r2.norm() / scale > 1e-6 {
        failures.push(format!(
            "mixed residuals {:.3e} / {:.3e} > 1e-6",
            r1.norm() / scale,
            r2.norm() / scale
        ));
    }
    report(8, "dense oracle equivalence", &failures);
}

#[test]
fn operator_invariants() {
    let mut failures = Vec::new();
    let mut rng = StdRng::seed_from_u64(99);

    // structured matrix-vector products against brute-force products
    for case in 0..10 {
        let (p, q) = (rng.random_range(2..6), rng.random_range(2..6));
        let (r, s) = (rng.random_range(2..6), rng.random_range(2..6));
        let b = DMatrix::from_fn(p, q, |_, _| rng.random_range(-1.0..1.0));
        let cd = DMatrix::from_fn(r, s, |_, _| rng.random_range(-1.0..1.0));
        let mut trip = Vec::new();
        for i in 0..r {
            for j in 0..s {
                trip.push((i, j, cd[(i, j)]));
            }
        }
        let c = rte::sparse::CsrMatrix::from_triplets(r, s, &trip);
        let x = random_vec(q * s, 100 + case);
        let got = kron_matvec(&b, &c, &x).unwrap();
        let mut full = DMatrix::zeros(p * r, q * s);
        for a in 0..p {
            for bb in 0..q {
                full.view_mut((a * r, bb * s), (r, s))
                    .copy_from(&(b[(a, bb)] * &cd));
            }
        }
        let want = &full * &x;
        let diff = (&got - &want).norm() / want.norm();
        if diff > 1e-13 {
            failures.push(format!("structured product case {case}: defect {diff:.3e}"));
        }
    }

    // odd generalized eigenvalues lie between zero and the anisotropy factor
    let g = 0.7;
    let amesh = build_sphere_mesh(2);
    let ang = assemble_angular(&amesh, PhaseFunction::new(g).unwrap(), &AngularQuadConfig::default())
        .unwrap();
    let odd = eigen::truncated_eig(
        &ang.s_minus,
        &eigen::MassMatrix::BlockDiag3(&ang.m_minus),
        3 * amesh.n_pairs(),
    )
    .unwrap();
    for &lam in odd.lambda.iter() {
        if !(-0.02..=g + 0.02).contains(&lam) {
            failures.push(format!("odd eigenvalue {lam} outside [-0.02, {g} + 0.02]"));
        }
    }

    // even-parity operator is symmetric positive definite
    let smesh = build_square_mesh(2, 1.0);
    let amesh0 = build_sphere_mesh(0);
    let field = uniform_field(&smesh, 0.3, 0.9, 0.5);
    let sys = assemble_system(smesh, amesh0, field, &AngularQuadConfig::default()).unwrap();
    let e = dense::dense_e(&sys);
    if (&e - e.transpose()).amax() > 1e-10 * e.amax() {
        failures.push("even-parity operator not symmetric".into());
    }
    if dense::dense_e_mk(&sys).cholesky().is_none() {
        failures.push("even-parity system matrix not positive definite".into());
    }

    // Rayleigh quotients of the simplified operator pair stay in the
    // theoretical spectral equivalence band
    let ops = Operators::new(&sys, OperatorConfig::default()).unwrap();
    let c = sys.field.scattering_ratio();
    let g = sys.field.phase.g();
    for seed in 0..5 {
        let x = random_vec(sys.n_even(), 200 + seed);
        let quotient =
            x.dot(&ops.apply_e(&x).unwrap()) / x.dot(&ops.apply_e0(&x).unwrap());
        if !(1.0 - c * g - 0.02..=1.02).contains(&quotient) {
            failures.push(format!(
                "Rayleigh quotient {quotient} outside [{}, 1]",
                1.0 - c * g
            ));
        }
    }

    // quadrature rules integrate barycentric monomials to declared degree
    let factorial = |k: usize| (1..=k).product::<usize>() as f64;
    for degree in [2usize, 4, 7, 13] {
        let rule = triangle_rule(degree).unwrap();
        for a in 0..=degree {
            for b in 0..=(degree - a) {
                let cexp = degree - a - b;
                let got: f64 = rule
                    .points
                    .iter()
                    .zip(&rule.weights)
                    .map(|(l, &w)| w * l[0].powi(a as i32) * l[1].powi(b as i32) * l[2].powi(cexp as i32))
                    .sum();
                let want = factorial(a) * factorial(b) * factorial(cexp)
                    / factorial(a + b + cexp + 2);
                if (got - want).abs() > 1e-14 {
                    failures.push(format!(
                        "degree {degree} monomial ({a},{b},{cexp}): {got} vs {want}"
                    ));
                }
            }
        }
    }
    report(9, "operator invariants", &failures);
}
