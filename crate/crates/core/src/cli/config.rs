//! JSON run configuration.

use std::path::Path;

use nalgebra::DMatrix;
use serde::Deserialize;

use crate::model::{CouplingSpec, ControlDomain, SourceTerm, Speed, SpeedProfile, SystemSpec};
use crate::pde::{Grid, DEFAULT_CFL};

pub const DEFAULT_CELLS: usize = 200;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    n: usize,
    m: usize,
    speeds: Vec<RawSpeed>,
    #[serde(rename = "M", default)]
    source: Option<RawSource>,
    #[serde(rename = "Q0")]
    q0: Vec<Vec<f64>>,
    #[serde(rename = "Q1")]
    q1: Vec<Vec<f64>>,
    omega: Vec<[f64; 2]>,
    #[serde(default)]
    grid: Option<RawGrid>,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
enum RawSpeed {
    Constant { value: f64 },
    PiecewiseLinear { x: Vec<f64>, v: Vec<f64> },
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RawSource {
    Named(String),
    Constant(Vec<Vec<f64>>),
    Piecewise(RawPiecewise),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPiecewise {
    breaks: Vec<f64>,
    values: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    #[serde(default)]
    cells: Option<usize>,
    #[serde(default, alias = "cfl_factor", rename = "cflFactor")]
    cfl_factor: Option<f64>,
}

/// A validated system together with its discretization settings.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub spec: SystemSpec,
    pub grid: Grid,
    pub cfl: f64,
}

/// Problems found while reading a configuration; always exit code 2.
#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Syntax(#[from] serde_json::Error),
    #[error("invalid field `{field}`: {message}")]
    Field { field: String, message: String },
    #[error(transparent)]
    Model(#[from] crate::Error),
}

fn field(field: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        field: field.into(),
        message: message.into(),
    }
}

/// Builds a matrix from rows, checking it is `rows × cols`.
pub fn matrix_from_rows(name: &str, rows: &[Vec<f64>], shape: (usize, usize)) -> Result<DMatrix<f64>, ConfigError> {
    let (r, c) = shape;
    if rows.len() != r || rows.iter().any(|row| row.len() != c) {
        let got_cols = rows.first().map_or(0, Vec::len);
        return Err(field(
            name,
            format!("expected a {r}x{c} matrix, got {}x{got_cols}", rows.len()),
        ));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

/// Builds a matrix from rows of any rectangular shape.
pub fn matrix_any(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>, ConfigError> {
    let c = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || c == 0 {
        return Err(field(name, "matrix must be nonempty"));
    }
    matrix_from_rows(name, rows, (rows.len(), c))
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let raw: RawConfig = serde_json::from_str(text)?;
        let n = raw.n;
        if raw.speeds.len() != n {
            return Err(field("speeds", format!("expected {n} entries, got {}", raw.speeds.len())));
        }
        if raw.m == 0 || raw.m >= n {
            return Err(field("m", format!("need 1 <= m < n, got m = {}, n = {n}", raw.m)));
        }
        let p = n - raw.m;
        let speeds = SpeedProfile::new(
            raw.speeds
                .into_iter()
                .map(|s| match s {
                    RawSpeed::Constant { value } => Speed::constant(value),
                    RawSpeed::PiecewiseLinear { x, v } => Speed::piecewise_linear(x, v),
                })
                .collect(),
        );
        let source = match raw.source {
            None => SourceTerm::zero(n),
            Some(RawSource::Named(name)) if name == "neg_speed_derivative" => {
                SourceTerm::neg_speed_derivative(&speeds)
            }
            Some(RawSource::Named(name)) => {
                return Err(field("M", format!("unknown source `{name}` (expected \"neg_speed_derivative\")")))
            }
            Some(RawSource::Constant(rows)) => SourceTerm::Constant(matrix_from_rows("M", &rows, (n, n))?),
            Some(RawSource::Piecewise(pw)) => SourceTerm::PiecewiseConstant {
                values: pw
                    .values
                    .iter()
                    .enumerate()
                    .map(|(i, rows)| matrix_from_rows(&format!("M.values[{i}]"), rows, (n, n)))
                    .collect::<Result<_, _>>()?,
                breaks: pw.breaks,
            },
        };
        let couplings = CouplingSpec {
            q0: matrix_from_rows("Q0", &raw.q0, (p, raw.m))?,
            q1: matrix_from_rows("Q1", &raw.q1, (raw.m, p))?,
        };
        let pairs: Vec<(f64, f64)> = raw.omega.iter().map(|&[a, b]| (a, b)).collect();
        let omega = ControlDomain::new(&pairs).map_err(|e| field("omega", e.to_string()))?;
        let spec = SystemSpec {
            m: raw.m,
            speeds,
            source,
            couplings,
            omega,
        };
        spec.ensure_valid()?;

        let (cells, cfl) = match raw.grid {
            Some(g) => (g.cells.unwrap_or(DEFAULT_CELLS), g.cfl_factor.unwrap_or(DEFAULT_CFL)),
            None => (DEFAULT_CELLS, DEFAULT_CFL),
        };
        if !(cfl > 0.0 && cfl <= 1.0) {
            return Err(field("grid.cflFactor", format!("must lie in (0, 1], got {cfl}")));
        }
        let grid = Grid::unit(cells).map_err(|e| field("grid.cells", e.to_string()))?;
        Ok(Self { spec, grid, cfl })
    }
}
