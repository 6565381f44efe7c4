//! Flat key=value run configuration with defaults for the lattice benchmark.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Solve,
    PrecondStudy,
    SpectralStudy,
    CompressStudy,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Mode::Solve => "solve",
            Mode::PrecondStudy => "precond-study",
            Mode::SpectralStudy => "spectral-study",
            Mode::CompressStudy => "compress-study",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// checkerboard of absorbers in a scattering background, unit source
    Lattice,
    /// constant coefficients from sigma_a / sigma_s / source
    Uniform,
}

/// One run of the front-end. Every field has a default; a config file only
/// overrides what it names.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub preset: Preset,
    pub g: f64,
    pub sigma_a: f64,
    pub sigma_s: f64,
    pub source: f64,
    /// angular refinement: n_S+ = 4^(level+1)
    pub angular_level: usize,
    /// spatial refinement of the 56x56 benchmark grid (doubling per level)
    pub spatial_refine: usize,
    /// overrides the grid with this many cells per side when nonzero
    pub spatial_cells: usize,
    pub l: usize,
    pub n_corr: i64,
    pub n_pre: i64,
    pub outer_tol: f64,
    pub inner_tol: f64,
    pub max_outer: usize,
    /// include a contraction estimate in the solve summary
    pub estimate_eta: bool,
    pub eta_adm: f64,
    pub p: usize,
    pub n_min: usize,
    pub truncate: bool,
    pub trunc_tol: f64,
    /// anisotropy factors swept by the studies
    pub gs: Vec<f64>,
    /// preconditioner truncation orders swept by precond-study
    pub n_pres: Vec<i64>,
    /// correction orders swept by spectral-study
    pub corr_orders: Vec<i64>,
    /// inner step counts swept by spectral-study
    pub ls: Vec<usize>,
    /// sphere levels swept by compress-study
    pub levels: Vec<usize>,
}

impl RunConfig {
    pub fn with_mode(mode: Mode) -> Self {
        RunConfig {
            mode,
            preset: Preset::Lattice,
            g: 0.5,
            sigma_a: 0.1,
            sigma_s: 1.0,
            source: 1.0,
            angular_level: 2,
            spatial_refine: 0,
            spatial_cells: 0,
            l: 4,
            n_corr: 4,
            n_pre: 5,
            outer_tol: 1e-8,
            inner_tol: 1e-13,
            max_outer: 200,
            estimate_eta: false,
            eta_adm: 1.4,
            p: 4,
            n_min: 64,
            truncate: false,
            trunc_tol: 1e-8,
            gs: vec![0.0, 0.5, 0.9],
            n_pres: vec![-1, 1, 3, 5],
            corr_orders: vec![0, 2, 4],
            ls: vec![1, 2, 4],
            levels: vec![2, 3],
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConfigError {
    /// 1-based line of the offending entry; 0 for whole-file problems
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line > 0 {
            write!(f, "line {}: {}", self.line, self.message)
        } else {
            f.write_str(&self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

fn err(line: usize, message: impl Into<String>) -> ConfigError {
    ConfigError {
        line,
        message: message.into(),
    }
}

fn parse_scalar<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse()
        .map_err(|_| err(line, format!("invalid value '{v}' for key '{key}'")))
}

fn parse_list<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<Vec<T>, ConfigError> {
    v.split(',')
        .map(|s| parse_scalar(line, key, s.trim()))
        .collect()
}

/// Parses a flat key=value config; '#' starts a comment, unknown and
/// duplicate keys are rejected.
pub fn parse_config(text: &str, mode: Mode) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::with_mode(mode);
    let mut seen = std::collections::HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap().trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| err(line, format!("expected 'key = value', got '{content}'")))?;
        let (key, value) = (key.trim(), value.trim());
        if !seen.insert(key.to_string()) {
            return Err(err(line, format!("duplicate key '{key}'")));
        }
        match key {
            "preset" => {
                cfg.preset = match value {
                    "lattice" => Preset::Lattice,
                    "uniform" => Preset::Uniform,
                    _ => return Err(err(line, format!("unknown preset '{value}'"))),
                }
            }
            "g" => cfg.g = parse_scalar(line, key, value)?,
            "sigma_a" => cfg.sigma_a = parse_scalar(line, key, value)?,
            "sigma_s" => cfg.sigma_s = parse_scalar(line, key, value)?,
            "source" => cfg.source = parse_scalar(line, key, value)?,
            "angular_level" => cfg.angular_level = parse_scalar(line, key, value)?,
            "spatial_refine" => cfg.spatial_refine = parse_scalar(line, key, value)?,
            "spatial_cells" => cfg.spatial_cells = parse_scalar(line, key, value)?,
            "l" => cfg.l = parse_scalar(line, key, value)?,
            "n_corr" => cfg.n_corr = parse_scalar(line, key, value)?,
            "n_pre" => cfg.n_pre = parse_scalar(line, key, value)?,
            "outer_tol" => cfg.outer_tol = parse_scalar(line, key, value)?,
            "inner_tol" => cfg.inner_tol = parse_scalar(line, key, value)?,
            "max_outer" => cfg.max_outer = parse_scalar(line, key, value)?,
            "estimate_eta" => cfg.estimate_eta = parse_scalar(line, key, value)?,
            "eta_adm" => cfg.eta_adm = parse_scalar(line, key, value)?,
            "p" => cfg.p = parse_scalar(line, key, value)?,
            "n_min" => cfg.n_min = parse_scalar(line, key, value)?,
            "truncate" => cfg.truncate = parse_scalar(line, key, value)?,
            "trunc_tol" => cfg.trunc_tol = parse_scalar(line, key, value)?,
            "gs" => cfg.gs = parse_list(line, key, value)?,
            "n_pres" => cfg.n_pres = parse_list(line, key, value)?,
            "corr_orders" => cfg.corr_orders = parse_list(line, key, value)?,
            "ls" => cfg.ls = parse_list(line, key, value)?,
            "levels" => cfg.levels = parse_list(line, key, value)?,
            _ => return Err(err(line, format!("unknown key '{key}'"))),
        }
        validate_key(&cfg, key).map_err(|mut e| {
            e.line = line;
            e
        })?;
    }
    validate(&cfg)?;
    Ok(cfg)
}

fn validate_key(cfg: &RunConfig, key: &str) -> Result<(), ConfigError> {
    let bad = |m: String| Err(err(0, m));
    match key {
        "g" if !(0.0..1.0).contains(&cfg.g) => bad(format!("g = {} must lie in [0, 1)", cfg.g)),
        "gs" if cfg.gs.iter().any(|g| !(0.0..1.0).contains(g)) => {
            bad("every entry of gs must lie in [0, 1)".into())
        }
        "sigma_a" if cfg.sigma_a < 0.0 => bad("sigma_a must be nonnegative".into()),
        "sigma_s" if cfg.sigma_s < 0.0 => bad("sigma_s must be nonnegative".into()),
        "l" if cfg.l < 1 => bad("l must be at least 1".into()),
        "ls" if cfg.ls.iter().any(|&l| l < 1) => bad("every entry of ls must be at least 1".into()),
        "outer_tol" if cfg.outer_tol <= 0.0 => bad("outer_tol must be positive".into()),
        "inner_tol" if cfg.inner_tol <= 0.0 => bad("inner_tol must be positive".into()),
        "trunc_tol" if cfg.trunc_tol <= 0.0 => bad("trunc_tol must be positive".into()),
        "p" if cfg.p < 2 => bad("p must be at least 2".into()),
        "n_min" if cfg.n_min < 1 => bad("n_min must be at least 1".into()),
        "eta_adm" if cfg.eta_adm < 0.0 => bad("eta_adm must be nonnegative".into()),
        _ => Ok(()),
    }
}

fn validate(cfg: &RunConfig) -> Result<(), ConfigError> {
    if cfg.n_corr != -1 && (cfg.n_corr < 0 || cfg.n_corr % 2 != 0) {
        return Err(err(
            0,
            format!("n_corr = {} must be even and >= 0, or -1", cfg.n_corr),
        ));
    }
    if cfg.n_pre != -1 && (cfg.n_pre < 0 || cfg.n_pre % 2 == 0) {
        return Err(err(
            0,
            format!("n_pre = {} must be odd and >= 1, or -1", cfg.n_pre),
        ));
    }
    Ok(())
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Emits every key; parsing the result reproduces the config.
pub fn serialize(cfg: &RunConfig) -> String {
    let preset = match cfg.preset {
        Preset::Lattice => "lattice",
        Preset::Uniform => "uniform",
    };
    let pairs = [
        ("preset", preset.to_string()),
        ("g", cfg.g.to_string()),
        ("sigma_a", cfg.sigma_a.to_string()),
        ("sigma_s", cfg.sigma_s.to_string()),
        ("source", cfg.source.to_string()),
        ("angular_level", cfg.angular_level.to_string()),
        ("spatial_refine", cfg.spatial_refine.to_string()),
        ("spatial_cells", cfg.spatial_cells.to_string()),
        ("l", cfg.l.to_string()),
        ("n_corr", cfg.n_corr.to_string()),
        ("n_pre", cfg.n_pre.to_string()),
        ("outer_tol", cfg.outer_tol.to_string()),
        ("inner_tol", cfg.inner_tol.to_string()),
        ("max_outer", cfg.max_outer.to_string()),
        ("estimate_eta", cfg.estimate_eta.to_string()),
        ("eta_adm", cfg.eta_adm.to_string()),
        ("p", cfg.p.to_string()),
        ("n_min", cfg.n_min.to_string()),
        ("truncate", cfg.truncate.to_string()),
        ("trunc_tol", cfg.trunc_tol.to_string()),
        ("gs", join(&cfg.gs)),
        ("n_pres", join(&cfg.n_pres)),
        ("corr_orders", join(&cfg.corr_orders)),
        ("ls", join(&cfg.ls)),
        ("levels", join(&cfg.levels)),
    ];
    pairs
        .iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}

/// Single-line rendering used in CSV comment headers.
pub fn effective_config_line(cfg: &RunConfig) -> String {
    let body = serialize(cfg).replace('\n', " ");
    format!("# mode={} {}", cfg.mode, body.trim_end())
}
