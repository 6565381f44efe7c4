//! Execution of the four run modes and report emission.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use nalgebra::DVector;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use rte::assembly::{
    assemble_scattering_even, assemble_system, lattice_field, AngularQuadConfig, AssembledSystem,
    OpticalField,
};
use rte::error::RteError;
use rte::hmatrix::{compress_scattering, HConfig, Parity};
use rte::kernel::PhaseFunction;
use rte::operators::{harmonic_count, OperatorConfig, Operators};
use rte::solver::{ContractionMode, Solver, SolverConfig};
use rte::spatial::{build_lattice_mesh, build_square_mesh};
use rte::sphere::build_sphere_mesh;

use crate::config::{effective_config_line, Mode, Preset, RunConfig};

#[derive(Debug)]
pub enum RunError {
    Solver(RteError),
    Io(std::io::Error),
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Solver(e) => write!(f, "solver failure: {e}"),
            RunError::Io(e) => write!(f, "io failure: {e}"),
        }
    }
}

impl From<RteError> for RunError {
    fn from(e: RteError) -> Self {
        RunError::Solver(e)
    }
}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        RunError::Io(e)
    }
}

pub fn run(cfg: &RunConfig, out: &Path, workers: usize) -> Result<(), RunError> {
    fs::create_dir_all(out)?;
    let comment = format!("{} workers={workers}", effective_config_line(cfg));
    match cfg.mode {
        Mode::Solve => run_solve(cfg, out, &comment),
        Mode::PrecondStudy => run_precond_study(cfg, out, &comment),
        Mode::SpectralStudy => run_spectral_study(cfg, out, &comment),
        Mode::CompressStudy => run_compress_study(cfg, out, &comment),
    }
}

fn build_system(cfg: &RunConfig, g: f64, angular_level: usize) -> Result<AssembledSystem, RteError> {
    let smesh = if cfg.spatial_cells > 0 {
        build_square_mesh(cfg.spatial_cells, 7.0)
    } else {
        build_lattice_mesh(cfg.spatial_refine)
    };
    let amesh = build_sphere_mesh(angular_level);
    let phase = PhaseFunction::new(g)?;
    let field = match cfg.preset {
        Preset::Lattice => lattice_field(&smesh, phase),
        Preset::Uniform => {
            let n = smesh.n_triangles();
            OpticalField::new(
                vec![cfg.sigma_a; n],
                vec![cfg.sigma_s; n],
                vec![cfg.source; n],
                phase,
            )?
        }
    };
    assemble_system(smesh, amesh, field, &AngularQuadConfig::default())
}

fn solver_config(cfg: &RunConfig) -> SolverConfig {
    SolverConfig {
        l: cfg.l,
        n_corr: cfg.n_corr,
        n_pre: cfg.n_pre,
        outer_tol: cfg.outer_tol,
        inner_tol: cfg.inner_tol,
        max_outer: cfg.max_outer,
    }
}

fn write_csv(path: &Path, comment: &str, header: &str, rows: &[String]) -> std::io::Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "{comment}")?;
    writeln!(f, "{header}")?;
    for row in rows {
        writeln!(f, "{row}")?;
    }
    Ok(())
}

/// dimensions as little-endian u64, then the coefficients as little-endian f64
fn write_bin(path: &Path, rows: usize, cols: usize, v: &DVector<f64>) -> std::io::Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&(rows as u64).to_le_bytes())?;
    f.write_all(&(cols as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(8 * v.len());
    for &x in v.iter() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    f.write_all(&buf)
}

fn write_flux_vtk(path: &Path, sys: &AssembledSystem, u_even: &DVector<f64>) -> std::io::Result<()> {
    let mesh = &sys.smesh;
    let n = sys.n_rp();
    let mut flux = vec![0.0; n];
    for k in 0..sys.n_sp() {
        let weight = 2.0 * sys.amesh.pair_area(k);
        for (i, phi) in flux.iter_mut().enumerate() {
            *phi += weight * u_even[k * n + i];
        }
    }
    let mut s = String::new();
    s.push_str("# vtk DataFile Version 3.0\nscalar flux\nASCII\nDATASET UNSTRUCTURED_GRID\n");
    let _ = writeln!(s, "POINTS {} double", mesh.n_vertices());
    for v in &mesh.vertices {
        let _ = writeln!(s, "{} {} 0", v.x, v.y);
    }
    let m = mesh.n_triangles();
    let _ = writeln!(s, "CELLS {m} {}", 4 * m);
    for t in &mesh.triangles {
        let _ = writeln!(s, "3 {} {} {}", t[0], t[1], t[2]);
    }
    let _ = writeln!(s, "CELL_TYPES {m}");
    for _ in 0..m {
        s.push_str("5\n");
    }
    let _ = writeln!(s, "POINT_DATA {}", mesh.n_vertices());
    s.push_str("SCALARS flux double 1\nLOOKUP_TABLE default\n");
    for phi in &flux {
        let _ = writeln!(s, "{phi}");
    }
    fs::write(path, s)
}

fn history_rows(increments: &[f64], inner: &[usize], walls: &[f64]) -> Vec<String> {
    increments
        .iter()
        .enumerate()
        .map(|(i, inc)| {
            let it = inner.get(i).copied().unwrap_or(0);
            let w = walls.get(i).copied().unwrap_or(0.0);
            format!("{},{inc:e},{it},{w}", i + 1)
        })
        .collect()
}

const HISTORY_HEADER: &str = "n,increment_norm,inner_iterations_total,wall_time";

fn run_solve(cfg: &RunConfig, out: &Path, comment: &str) -> Result<(), RunError> {
    let sys = build_system(cfg, cfg.g, cfg.angular_level)?;
    let solver = Solver::new(&sys, solver_config(cfg))?;
    let c = sys.field.scattering_ratio();
    let solved = solver.richardson_solve();
    let (u_plus, report) = match solved {
        Ok(pair) => pair,
        Err(RteError::MaxIterations {
            max_iter,
            residual,
            history,
        }) => {
            // preserve the partial history before reporting failure
            let rows = history_rows(&history, &[], &[]);
            write_csv(&out.join("history.csv"), comment, HISTORY_HEADER, &rows)?;
            let summary = vec![
                format!("n_even,{}", sys.n_even()),
                format!("n_odd,{}", sys.n_odd()),
                format!("c,{c}"),
                format!("iterations,{max_iter}"),
                "converged,false".to_string(),
            ];
            write_csv(&out.join("summary.csv"), comment, "key,value", &summary)?;
            return Err(RunError::Solver(RteError::MaxIterations {
                max_iter,
                residual,
                history,
            }));
        }
        Err(e) => return Err(e.into()),
    };
    let u_minus = solver.recover_odd(&u_plus)?;

    let rows = history_rows(&report.increments, &report.inner_iterations, &report.wall_times);
    write_csv(&out.join("history.csv"), comment, HISTORY_HEADER, &rows)?;

    let mut summary = vec![
        format!("n_even,{}", sys.n_even()),
        format!("n_odd,{}", sys.n_odd()),
        format!("c,{c}"),
        format!("iterations,{}", report.iterations),
        format!("converged,{}", report.converged),
    ];
    if cfg.estimate_eta {
        match solver.estimate_contraction(ContractionMode::Norm) {
            Ok(eta) => summary.push(format!("eta,{eta}")),
            Err(RteError::PowerIterationFailure { .. }) => summary.push("eta,".to_string()),
            Err(e) => return Err(e.into()),
        }
    }
    write_csv(&out.join("summary.csv"), comment, "key,value", &summary)?;

    write_bin(&out.join("u_even.bin"), sys.n_rp(), sys.n_sp(), &u_plus)?;
    write_bin(&out.join("u_odd.bin"), sys.n_rm(), sys.n_sm(), &u_minus)?;
    write_flux_vtk(&out.join("flux.vtk"), &sys, &u_plus)?;
    Ok(())
}

fn run_precond_study(cfg: &RunConfig, out: &Path, comment: &str) -> Result<(), RunError> {
    let mut columns = vec!["n_pre".to_string(), "d_n".to_string()];
    columns.extend(cfg.gs.iter().map(|g| format!("g={g}")));
    let mut cells = vec![Vec::new(); cfg.n_pres.len()];
    for &g in &cfg.gs {
        let sys = build_system(cfg, g, cfg.angular_level)?;
        for (row, &n_pre) in cfg.n_pres.iter().enumerate() {
            let ops = Operators::new(
                &sys,
                OperatorConfig {
                    inner_tol: cfg.inner_tol,
                    inner_max: 500,
                    n_pre,
                },
            )?;
            let mut rng = StdRng::seed_from_u64(42);
            let b = DVector::from_fn(sys.n_odd(), |_, _| rng.random_range(-1.0..1.0));
            let (_, iters) = ops.solve_mmk(&b)?;
            cells[row].push(iters);
        }
    }
    let rows: Vec<String> = cfg
        .n_pres
        .iter()
        .enumerate()
        .map(|(row, &n_pre)| {
            let mut s = format!("{n_pre},{}", harmonic_count(n_pre));
            for it in &cells[row] {
                let _ = write!(s, ",{it}");
            }
            s
        })
        .collect();
    write_csv(&out.join("table.csv"), comment, &columns.join(","), &rows)?;
    Ok(())
}

fn run_spectral_study(cfg: &RunConfig, out: &Path, comment: &str) -> Result<(), RunError> {
    let mut rows = Vec::new();
    for &g in &cfg.gs {
        let sys = build_system(cfg, g, cfg.angular_level)?;
        for &n_corr in &cfg.corr_orders {
            for &l in &cfg.ls {
                let solver = Solver::new(
                    &sys,
                    SolverConfig {
                        l,
                        n_corr,
                        ..solver_config(cfg)
                    },
                )?;
                // non-convergent estimates are reported as empty cells
                let fmt = |r: Result<f64, RteError>| match r {
                    Ok(v) => Ok(format!("{v:.6}")),
                    Err(RteError::PowerIterationFailure { .. }) => Ok(String::new()),
                    Err(e) => Err(e),
                };
                let rho = fmt(solver.estimate_contraction(ContractionMode::SpectralRadius))?;
                let eta = fmt(solver.estimate_contraction(ContractionMode::Norm))?;
                rows.push(format!(
                    "{g},{n_corr},{},{l},{rho},{eta}",
                    harmonic_count(n_corr)
                ));
            }
        }
    }
    write_csv(
        &out.join("table.csv"),
        comment,
        "g,n_corr,d_n,l,rho,eta",
        &rows,
    )?;
    Ok(())
}

fn run_compress_study(cfg: &RunConfig, out: &Path, comment: &str) -> Result<(), RunError> {
    let hcfg = HConfig {
        eta_adm: cfg.eta_adm,
        p: cfg.p,
        n_min: cfg.n_min,
        truncate: cfg.truncate,
        trunc_tol: cfg.trunc_tol,
    };
    let phase = PhaseFunction::new(cfg.g)?;
    let mut rows = Vec::new();
    for &level in &cfg.levels {
        let mesh = build_sphere_mesh(level);
        let t0 = Instant::now();
        let h = compress_scattering(&mesh, phase, Parity::Even, &hcfg)?;
        let build = t0.elapsed().as_secs_f64();
        let stats = h.stats();
        let mut rng = StdRng::seed_from_u64(7);
        let x = DVector::from_fn(stats.n, |_, _| rng.random_range(-1.0..1.0));
        let t1 = Instant::now();
        let reps = 5;
        let mut y = DVector::zeros(stats.n);
        for _ in 0..reps {
            y = h.matvec(&x)?;
        }
        let apply = t1.elapsed().as_secs_f64() / reps as f64;
        // compare against the dense matrix where it is affordable
        let err = if stats.n <= 2048 {
            let dense = assemble_scattering_even(&mesh, phase, &AngularQuadConfig::default())?;
            let want = &dense * &x;
            format!("{:e}", (&y - &want).norm() / want.norm())
        } else {
            String::new()
        };
        let mb = 1.0 / (1024.0 * 1024.0);
        rows.push(format!(
            "{level},{},{:.4},{:.4},{:.4},{build:.3},{apply:.6},{err}",
            stats.n,
            stats.dense_bytes as f64 * mb,
            stats.stored_bytes as f64 * mb,
            stats.stored_bytes as f64 / stats.dense_bytes as f64,
        ));
    }
    write_csv(
        &out.join("table.csv"),
        comment,
        "level,n,dense_mb,stored_mb,ratio,build_seconds,matvec_seconds,rel_error",
        &rows,
    )?;
    Ok(())
}
