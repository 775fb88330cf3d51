//! JSON problem definitions and CSV tables.
//!
//! ```json
//! {
//!   "grid": {"radius": 8.0, "points": 401, "rule": "trapezoid", "dim": 1},
//!   "kernel": {"type": "gaussian", "sigma": 0.5},
//!   "marginals": [
//!     {"type": "gaussian", "sigma": 1.0},
//!     {"type": "gaussian", "sigma": 0.8}
//!   ]
//! }
//! ```
//!
//! `radius` may be `"auto"` (6.5 times the largest Gaussian marginal standard
//! deviation). A grid can also be explicit: `{"nodes": [...], "weights": [...]}`.
//! An optional `grid2` gives the second space its own grid.
//!
//! Kernels: `gaussian` (`sigma`), `gaussian_multivariate` (`Sigma`), `table`
//! (difference kernel `U(t)` from a CSV with header `t,value`), `matrix`
//! (inline `values` rows, or a CSV `x,y,value` on a rectilinear lattice,
//! bilinearly interpolated). Any kernel accepts `"normalize": "rows"`.
//!
//! Marginals: `gaussian` (`sigma` or `Sigma`, optional `mean`), `table`
//! (CSV `x,value`, linear interpolation), `values`, `uniform`, and, for the
//! second marginal only, `pushforward`. Relative paths resolve against the
//! config file's directory. Set `"renormalize": false` to keep raw masses.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{build_grid, GridSpec, QuadratureGrid, QuadratureRule};
use crate::problem::{
    bernstein_gaussian_condition, bernstein_multivariate_condition, feasibility, interp_linear, BernsteinCheck,
    DensityField, FeasibilityReport, KernelOperator, MarginalPair,
};

/// Auto radius as a multiple of the widest Gaussian marginal.
pub const AUTO_RADIUS_FACTOR: f64 = 6.5;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub grid: GridConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid2: Option<GridConfig>,
    pub kernel: KernelConfig,
    pub marginals: Vec<MarginalConfig>,
    #[serde(default = "default_true")]
    pub renormalize: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Radius {
    Fixed(f64),
    Keyword(String),
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<Radius>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule: Option<QuadratureRule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nodes: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalize {
    Rows,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelConfig {
    Gaussian {
        sigma: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        normalize: Option<Normalize>,
    },
    GaussianMultivariate {
        #[serde(rename = "Sigma")]
        covariance: Vec<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        normalize: Option<Normalize>,
    },
    Table {
        path: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        normalize: Option<Normalize>,
    },
    Matrix {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        path: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        values: Option<Vec<Vec<f64>>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        normalize: Option<Normalize>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Mean {
    Scalar(f64),
    Vector(Vec<f64>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum MarginalConfig {
    Gaussian {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mean: Option<Mean>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sigma: Option<f64>,
        #[serde(default, rename = "Sigma", skip_serializing_if = "Option::is_none")]
        covariance: Option<Vec<Vec<f64>>>,
    },
    Table {
        path: String,
    },
    Values {
        values: Vec<f64>,
    },
    Uniform,
    Pushforward,
}

/// What was actually built from a grid block, for run summaries.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GridSummary {
    pub dim: usize,
    pub radius: f64,
    pub radius_auto: bool,
    pub points: usize,
    /// `"explicit"` for node lists.
    pub rule: String,
}

/// Covariances of an all-Gaussian problem, kept for closed-form checks.
#[derive(Debug, Clone)]
pub struct GaussianParams {
    pub kernel: DMatrix<f64>,
    pub omega1: DMatrix<f64>,
    pub omega2: DMatrix<f64>,
    pub centered: bool,
}

impl GaussianParams {
    /// `(sigma, sigma1, sigma2)` for centered 1-D problems.
    pub fn scalars(&self) -> Option<(f64, f64, f64)> {
        (self.kernel.nrows() == 1 && self.centered).then(|| {
            (
                self.kernel[(0, 0)].sqrt(),
                self.omega1[(0, 0)].sqrt(),
                self.omega2[(0, 0)].sqrt(),
            )
        })
    }

    fn swapped(&self) -> Self {
        GaussianParams {
            kernel: self.kernel.clone(),
            omega1: self.omega2.clone(),
            omega2: self.omega1.clone(),
            centered: self.centered,
        }
    }

    pub fn bernstein(&self) -> Result<BernsteinCheck> {
        if let Some((s, s1, s2)) = self.scalars() {
            return Ok(BernsteinCheck {
                forward: bernstein_gaussian_condition(s, s1, s2)?,
                swapped: bernstein_gaussian_condition(s, s2, s1)?,
            });
        }
        Ok(BernsteinCheck {
            forward: bernstein_multivariate_condition(&self.kernel, &self.omega1, &self.omega2)?,
            swapped: bernstein_multivariate_condition(&self.kernel, &self.omega2, &self.omega1)?,
        })
    }
}

/// A loaded problem.
#[derive(Debug, Clone)]
pub struct Problem {
    pub kernel: KernelOperator,
    pub marginals: MarginalPair,
    pub grid1: GridSummary,
    pub grid2: GridSummary,
    pub gaussian: Option<GaussianParams>,
    pub config: ProblemConfig,
    /// Table files the config refers to, resolved.
    pub files: Vec<PathBuf>,
    pub swapped: bool,
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Reads and builds a problem from a JSON file.
pub fn load_problem(path: &Path) -> Result<Problem> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| cfg_err(format!("cannot read {}: {e}", path.display())))?;
    let cfg = parse_config(&text)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Problem::from_config(cfg, &base)
}

pub fn parse_config(text: &str) -> Result<ProblemConfig> {
    serde_json::from_str(text).map_err(|e| cfg_err(format!("invalid problem config: {e}")))
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Reads a CSV with the given header into columns.
pub fn read_columns(path: &Path, header: &[&str]) -> Result<Vec<Vec<f64>>> {
    let file = std::fs::File::open(path).map_err(|e| cfg_err(format!("cannot open {}: {e}", path.display())))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let got: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if got != header {
        return Err(cfg_err(format!(
            "{}: expected header {}, found {}",
            path.display(),
            header.join(","),
            got.join(",")
        )));
    }
    let mut cols = vec![Vec::new(); header.len()];
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        for (k, col) in cols.iter_mut().enumerate() {
            let field = rec.get(k).unwrap_or("");
            let v: f64 = field.parse().map_err(|_| {
                cfg_err(format!(
                    "{}: row {} column {}: cannot parse {field:?} as a number",
                    path.display(),
                    line + 2,
                    header[k]
                ))
            })?;
            col.push(v);
        }
    }
    Ok(cols)
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let d = rows.len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(cfg_err(format!("{what} must be a non-empty square matrix")));
    }
    Ok(DMatrix::from_fn(d, d, |a, b| rows[a][b]))
}

fn gaussian_cov(sigma: Option<f64>, cov: &Option<Vec<Vec<f64>>>, dim: usize, what: &str) -> Result<DMatrix<f64>> {
    match (sigma, cov) {
        (Some(s), None) => {
            if !(s > 0.0) {
                return Err(cfg_err(format!("{what}: sigma must be positive, got {s}")));
            }
            Ok(DMatrix::from_diagonal_element(dim, dim, s * s))
        }
        (None, Some(rows)) => {
            let m = matrix_from_rows(rows, what)?;
            if m.nrows() != dim {
                return Err(cfg_err(format!("{what}: Sigma is {0}x{0} but the grid has dim {dim}", m.nrows())));
            }
            Ok(m)
        }
        _ => Err(cfg_err(format!("{what}: give exactly one of sigma or Sigma"))),
    }
}

fn mean_vec(mean: &Option<Mean>, dim: usize, what: &str) -> Result<Vec<f64>> {
    match mean {
        None => Ok(vec![0.0; dim]),
        Some(Mean::Scalar(m)) => Ok(vec![*m; dim]),
        Some(Mean::Vector(v)) if v.len() == dim => Ok(v.clone()),
        Some(Mean::Vector(v)) => Err(cfg_err(format!("{what}: mean has {} entries, grid dim is {dim}", v.len()))),
    }
}

fn build_grid_cfg(g: &GridConfig, auto_radius: Option<f64>, what: &str) -> Result<(Arc<QuadratureGrid>, GridSummary)> {
    if let Some(nodes) = &g.nodes {
        if g.radius.is_some() || g.points.is_some() || g.rule.is_some() {
            return Err(cfg_err(format!("{what}: explicit nodes exclude radius, points and rule")));
        }
        if g.dim.is_some_and(|d| d != 1) {
            return Err(cfg_err(format!("{what}: explicit grids are 1-D")));
        }
        let weights = g
            .weights
            .clone()
            .ok_or_else(|| cfg_err(format!("{what}: explicit nodes need weights")))?;
        let grid = QuadratureGrid::from_nodes(nodes.clone(), weights).map_err(|e| cfg_err(format!("{what}: {e}")))?;
        let summary = GridSummary {
            dim: 1,
            radius: grid.radius(),
            radius_auto: false,
            points: grid.len(),
            rule: "explicit".into(),
        };
        return Ok((grid, summary));
    }
    if g.weights.is_some() {
        return Err(cfg_err(format!("{what}: weights given without nodes")));
    }
    let points = g.points.ok_or_else(|| cfg_err(format!("{what}: missing field `points`")))?;
    let (radius, radius_auto) = match &g.radius {
        Some(Radius::Fixed(r)) => (*r, false),
        None => (auto_radius.ok_or_else(|| cfg_err(format!("{what}: radius \"auto\" needs a Gaussian marginal")))?, true),
        Some(Radius::Keyword(k)) if k == "auto" => (
            auto_radius.ok_or_else(|| cfg_err(format!("{what}: radius \"auto\" needs a Gaussian marginal")))?,
            true,
        ),
        Some(Radius::Keyword(k)) => return Err(cfg_err(format!("{what}: radius must be a number or \"auto\", got {k:?}"))),
    };
    let spec = GridSpec {
        dim: g.dim.unwrap_or(1),
        radius,
        points_per_axis: points,
        rule: g.rule.unwrap_or_default(),
    };
    let grid = build_grid(&spec).map_err(|e| cfg_err(format!("{what}: {e}")))?;
    Ok((
        grid,
        GridSummary {
            dim: spec.dim,
            radius,
            radius_auto,
            points,
            rule: spec.rule.to_string(),
        },
    ))
}

/// Rectilinear `(x, y, value)` table interpolated bilinearly; zero outside.
fn lattice_kernel(cols: &[Vec<f64>], g1: &QuadratureGrid, g2: &QuadratureGrid, path: &Path) -> Result<Vec<f64>> {
    let uniq = |v: &[f64]| {
        let mut u = v.to_vec();
        u.sort_by(|a, b| a.total_cmp(b));
        u.dedup();
        u
    };
    let xs = uniq(&cols[0]);
    let ys = uniq(&cols[1]);
    let mut table = vec![f64::NAN; xs.len() * ys.len()];
    for ((&x0, &y0), &v) in cols[0].iter().zip(&cols[1]).zip(&cols[2]) {
        let i = xs.partition_point(|&x| x < x0);
        let j = ys.partition_point(|&y| y < y0);
        table[i * ys.len() + j] = v;
    }
    if table.iter().any(|v| v.is_nan()) {
        return Err(cfg_err(format!("{}: (x, y) pairs do not form a complete lattice", path.display())));
    }
    let (n1, n2) = (g1.len(), g2.len());
    let mut out = vec![0.0; n1 * n2];
    for i in 0..n1 {
        let x = g1.node(i)[0];
        for j in 0..n2 {
            let y = g2.node(j)[0];
            // Interpolate along y on the two bracketing x rows, then along x.
            let row = |a: usize| -> Result<f64> {
                interp_linear(&ys, &table[a * ys.len()..(a + 1) * ys.len()], y, 0.0)
            };
            let col: Vec<f64> = if xs.len() == 1 {
                vec![row(0)?]
            } else {
                (0..xs.len()).map(row).collect::<Result<_>>()?
            };
            out[i * n2 + j] = if xs.len() == 1 {
                if x == xs[0] { col[0] } else { 0.0 }
            } else {
                interp_linear(&xs, &col, x, 0.0)?
            };
        }
    }
    Ok(out)
}

impl Problem {
    pub fn from_config(cfg: ProblemConfig, base: &Path) -> Result<Problem> {
        if cfg.marginals.len() != 2 {
            return Err(cfg_err(format!("marginals: expected 2 entries, got {}", cfg.marginals.len())));
        }
        if matches!(cfg.marginals[0], MarginalConfig::Pushforward) {
            return Err(cfg_err("marginals[0]: pushforward is only allowed for the second marginal"));
        }
        let dim = cfg.grid.dim.unwrap_or(1);

        let mut widest: Option<f64> = None;
        for (k, m) in cfg.marginals.iter().enumerate() {
            if let MarginalConfig::Gaussian { sigma, covariance, .. } = m {
                let cov = gaussian_cov(*sigma, covariance, dim, &format!("marginals[{k}]"))?;
                let s = (0..dim).map(|a| cov[(a, a)].sqrt()).fold(0.0, f64::max);
                widest = Some(widest.map_or(s, |w: f64| w.max(s)));
            }
        }
        let auto = widest.map(|s| AUTO_RADIUS_FACTOR * s);
        let (grid1, s1) = build_grid_cfg(&cfg.grid, auto, "grid")?;
        let (grid2, s2) = match &cfg.grid2 {
            Some(g) => build_grid_cfg(g, auto, "grid2")?,
            None => (grid1.clone(), s1.clone()),
        };
        if grid1.dim() != grid2.dim() {
            return Err(cfg_err("grid and grid2 must have the same dimension"));
        }

        let mut files = Vec::new();
        let (kernel, normalize, kernel_cov) = match &cfg.kernel {
            KernelConfig::Gaussian { sigma, normalize } => (
                KernelOperator::gaussian(grid1.clone(), grid2.clone(), *sigma).map_err(|e| cfg_err(format!("kernel: {e}")))?,
                *normalize,
                Some(DMatrix::from_diagonal_element(dim, dim, sigma * sigma)),
            ),
            KernelConfig::GaussianMultivariate { covariance, normalize } => {
                let m = matrix_from_rows(covariance, "kernel.Sigma")?;
                (
                    KernelOperator::gaussian_cov(grid1.clone(), grid2.clone(), &m).map_err(|e| cfg_err(format!("kernel: {e}")))?,
                    *normalize,
                    Some(m),
                )
            }
            KernelConfig::Table { path, normalize } => {
                let p = resolve(base, path);
                let cols = read_columns(&p, &["t", "value"])?;
                files.push(p);
                let mut it = cols.into_iter();
                let (t, u) = (it.next().unwrap_or_default(), it.next().unwrap_or_default());
                (
                    KernelOperator::difference_table(grid1.clone(), grid2.clone(), t, u)
                        .map_err(|e| cfg_err(format!("kernel: {e}")))?,
                    *normalize,
                    None,
                )
            }
            KernelConfig::Matrix { path, values, normalize } => {
                let flat = match (path, values) {
                    (Some(path), None) => {
                        if dim != 1 {
                            return Err(cfg_err("kernel: matrix CSV tables require 1-D grids"));
                        }
                        let p = resolve(base, path);
                        let cols = read_columns(&p, &["x", "y", "value"])?;
                        let v = lattice_kernel(&cols, &grid1, &grid2, &p)?;
                        files.push(p);
                        v
                    }
                    (None, Some(rows)) => {
                        if rows.len() != grid1.len() || rows.iter().any(|r| r.len() != grid2.len()) {
                            return Err(cfg_err(format!(
                                "kernel.values must be {}x{}",
                                grid1.len(),
                                grid2.len()
                            )));
                        }
                        rows.concat()
                    }
                    _ => return Err(cfg_err("kernel: matrix needs exactly one of path or values")),
                };
                (
                    KernelOperator::from_matrix(grid1.clone(), grid2.clone(), flat).map_err(|e| cfg_err(format!("kernel: {e}")))?,
                    *normalize,
                    None,
                )
            }
        };
        let kernel = match normalize {
            Some(Normalize::Rows) => kernel.normalize_rows().map_err(|e| cfg_err(format!("kernel: {e}")))?,
            None => kernel,
        };

        let mut covs: Vec<Option<(DMatrix<f64>, bool)>> = Vec::new();
        let mut build_marginal = |k: usize, grid: &Arc<QuadratureGrid>| -> Result<Option<DensityField>> {
            let what = format!("marginals[{k}]");
            let field = match &cfg.marginals[k] {
                MarginalConfig::Gaussian { mean, sigma, covariance } => {
                    let cov = gaussian_cov(*sigma, covariance, dim, &what)?;
                    let mu = mean_vec(mean, dim, &what)?;
                    let centered = mu.iter().all(|&m| m == 0.0);
                    let f = DensityField::gaussian_cov(grid.clone(), &mu, &cov).map_err(|e| cfg_err(format!("{what}: {e}")))?;
                    covs.push(Some((cov, centered)));
                    return Ok(Some(f));
                }
                MarginalConfig::Table { path } => {
                    let p = resolve(base, path);
                    let cols = read_columns(&p, &["x", "value"])?;
                    files.push(p);
                    DensityField::from_table(grid.clone(), &cols[0], &cols[1])
                }
                MarginalConfig::Values { values } => DensityField::new(grid.clone(), values.clone()),
                MarginalConfig::Uniform => DensityField::uniform(grid.clone()),
                MarginalConfig::Pushforward => {
                    covs.push(None);
                    return Ok(None);
                }
            };
            covs.push(None);
            field.map(Some).map_err(|e| cfg_err(format!("{what}: {e}")))
        };
        let o1 = build_marginal(0, &grid1)?.expect("first marginal is never a pushforward");
        let o2 = build_marginal(1, &grid2)?;

        let marginals = match o2 {
            None => MarginalPair::pushforward(&kernel, o1).map_err(|e| cfg_err(format!("marginals[1]: {e}")))?,
            Some(o2) if cfg.renormalize => MarginalPair::new(o1, o2).map_err(|e| cfg_err(format!("marginals: {e}")))?,
            Some(o2) => MarginalPair::from_raw(o1, o2),
        };

        let gaussian = match (kernel_cov, &covs[0], &covs[1], normalize) {
            (Some(k), Some((c1, z1)), Some((c2, z2)), None) => Some(GaussianParams {
                kernel: k,
                omega1: c1.clone(),
                omega2: c2.clone(),
                centered: *z1 && *z2,
            }),
            _ => None,
        };

        Ok(Problem {
            kernel,
            marginals,
            grid1: s1,
            grid2: s2,
            gaussian,
            config: cfg,
            files,
            swapped: false,
        })
    }

    /// Exchanges the marginals and transposes the kernel.
    pub fn swapped(&self) -> Problem {
        Problem {
            kernel: self.kernel.transposed(),
            marginals: self.marginals.swapped(),
            grid1: self.grid2.clone(),
            grid2: self.grid1.clone(),
            gaussian: self.gaussian.as_ref().map(GaussianParams::swapped),
            config: self.config.clone(),
            files: self.files.clone(),
            swapped: !self.swapped,
        }
    }

    /// Full feasibility report, including the closed-form sign conditions
    /// when every ingredient is Gaussian.
    pub fn feasibility(&self) -> Result<FeasibilityReport> {
        let mut report = feasibility(&self.kernel, &self.marginals)?;
        if let Some(g) = &self.gaussian {
            report.bernstein = Some(g.bernstein()?);
        }
        Ok(report)
    }
}
