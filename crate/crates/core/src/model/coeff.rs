use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::gemv_acc;
use crate::model::grid::{Dimensions, Instant};

/// A matrix that is either constant or piecewise constant on the grid.
#[derive(Clone, Debug, PartialEq)]
pub enum TimeMatrix {
    Constant(DMatrix<f64>),
    PerStep(Vec<DMatrix<f64>>),
}

impl TimeMatrix {
    pub fn zeros(r: usize, c: usize) -> Self {
        TimeMatrix::Constant(DMatrix::zeros(r, c))
    }

    #[inline]
    pub fn at(&self, k: usize) -> &DMatrix<f64> {
        match self {
            TimeMatrix::Constant(m) => m,
            TimeMatrix::PerStep(v) => &v[k.min(v.len() - 1)],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.at(0).shape()
    }

    /// Every distinct matrix (one for constants).
    pub fn all(&self) -> Vec<&DMatrix<f64>> {
        match self {
            TimeMatrix::Constant(m) => vec![m],
            TimeMatrix::PerStep(v) => v.iter().collect(),
        }
    }

    pub fn steps(&self) -> usize {
        match self {
            TimeMatrix::Constant(_) => 1,
            TimeMatrix::PerStep(v) => v.len(),
        }
    }

    /// Applies `f` entry-wise across steps (two operands must agree in layout).
    pub fn map(&self, f: impl Fn(&DMatrix<f64>) -> DMatrix<f64>) -> TimeMatrix {
        match self {
            TimeMatrix::Constant(m) => TimeMatrix::Constant(f(m)),
            TimeMatrix::PerStep(v) => TimeMatrix::PerStep(v.iter().map(f).collect()),
        }
    }

    /// Combines two time matrices step by step.
    pub fn zip(
        &self,
        other: &TimeMatrix,
        f: impl Fn(&DMatrix<f64>, &DMatrix<f64>) -> DMatrix<f64>,
    ) -> TimeMatrix {
        match (self, other) {
            (TimeMatrix::Constant(a), TimeMatrix::Constant(b)) => TimeMatrix::Constant(f(a, b)),
            _ => {
                let steps = self.steps().max(other.steps());
                TimeMatrix::PerStep((0..steps).map(|k| f(self.at(k), other.at(k))).collect())
            }
        }
    }
}

impl From<DMatrix<f64>> for TimeMatrix {
    fn from(m: DMatrix<f64>) -> Self {
        TimeMatrix::Constant(m)
    }
}

/// Affine coefficients:
/// `Psi(y) = psi_y y + psi_0`, `Phi(x, x') = phi_x x + phi_xbar x' + phi_0`,
/// `Gamma(s, theta, theta') = G(s) theta + Gbar(s) theta' + gamma_0(s)`,
/// where the rows of `Gamma` are ordered `(g, b, sigma_1, ..., sigma_d)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearCoefficients {
    pub dims: Dimensions,
    pub psi_y: DMatrix<f64>,
    pub psi_0: DVector<f64>,
    pub phi_x: DMatrix<f64>,
    pub phi_xbar: DMatrix<f64>,
    pub phi_0: DVector<f64>,
    pub gamma_theta: TimeMatrix,
    pub gamma_theta_bar: TimeMatrix,
    /// Constant offset, as an `n(2+d) x 1` time matrix.
    pub gamma_0: TimeMatrix,
}

impl LinearCoefficients {
    pub fn zeros(dims: Dimensions) -> Self {
        let n = dims.n;
        let t = dims.theta();
        LinearCoefficients {
            dims,
            psi_y: DMatrix::zeros(n, n),
            psi_0: DVector::zeros(n),
            phi_x: DMatrix::zeros(n, n),
            phi_xbar: DMatrix::zeros(n, n),
            phi_0: DVector::zeros(n),
            gamma_theta: TimeMatrix::zeros(t, t),
            gamma_theta_bar: TimeMatrix::zeros(t, t),
            gamma_0: TimeMatrix::zeros(t, 1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dims.n;
        let t = self.dims.theta();
        let mut errs = Vec::new();
        let mut want = |name: &str, got: (usize, usize), exp: (usize, usize)| {
            if got != exp {
                errs.push(format!("{name}: expected {}x{}, got {}x{}", exp.0, exp.1, got.0, got.1));
            }
        };
        want("psi_y", self.psi_y.shape(), (n, n));
        want("psi_0", self.psi_0.shape(), (n, 1));
        want("phi_x", self.phi_x.shape(), (n, n));
        want("phi_xbar", self.phi_xbar.shape(), (n, n));
        want("phi_0", self.phi_0.shape(), (n, 1));
        for m in self.gamma_theta.all() {
            want("gamma_theta", m.shape(), (t, t));
        }
        for m in self.gamma_theta_bar.all() {
            want("gamma_theta_bar", m.shape(), (t, t));
        }
        for m in self.gamma_0.all() {
            want("gamma_0", m.shape(), (t, 1));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }

    fn blend(&self, other: &LinearCoefficients, alpha: f64) -> LinearCoefficients {
        let mix = |a: &DMatrix<f64>, b: &DMatrix<f64>| a * alpha + b * (1.0 - alpha);
        LinearCoefficients {
            dims: self.dims,
            psi_y: mix(&self.psi_y, &other.psi_y),
            psi_0: &self.psi_0 * alpha + &other.psi_0 * (1.0 - alpha),
            phi_x: mix(&self.phi_x, &other.phi_x),
            phi_xbar: mix(&self.phi_xbar, &other.phi_xbar),
            phi_0: &self.phi_0 * alpha + &other.phi_0 * (1.0 - alpha),
            gamma_theta: self.gamma_theta.zip(&other.gamma_theta, mix),
            gamma_theta_bar: self.gamma_theta_bar.zip(&other.gamma_theta_bar, mix),
            gamma_0: self.gamma_0.zip(&other.gamma_0, mix),
        }
    }
}

type PsiFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;
type PhiFn = dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync;
type GammaFn = dyn Fn(Instant, &[f64], &[f64], &mut [f64]) + Send + Sync;

/// Coefficients given only as callbacks. Each callback overwrites `out`.
#[derive(Clone)]
pub struct BlackBox {
    pub dims: Dimensions,
    pub psi: Arc<PsiFn>,
    pub phi: Arc<PhiFn>,
    pub gamma: Arc<GammaFn>,
}

impl fmt::Debug for BlackBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BlackBox").field("dims", &self.dims).finish()
    }
}

/// The coefficient triple `(Psi, Phi, Gamma)` of a coupled mean-field system.
#[derive(Clone, Debug)]
pub enum CoefficientSet {
    Linear(Arc<LinearCoefficients>),
    BlackBox(BlackBox),
}

impl CoefficientSet {
    pub fn linear(c: LinearCoefficients) -> Result<Self> {
        c.validate()?;
        Ok(CoefficientSet::Linear(Arc::new(c)))
    }

    pub fn zero(dims: Dimensions) -> Self {
        CoefficientSet::Linear(Arc::new(LinearCoefficients::zeros(dims)))
    }

    pub fn dims(&self) -> Dimensions {
        match self {
            CoefficientSet::Linear(c) => c.dims,
            CoefficientSet::BlackBox(b) => b.dims,
        }
    }

    pub fn as_linear(&self) -> Option<&LinearCoefficients> {
        match self {
            CoefficientSet::Linear(c) => Some(c),
            CoefficientSet::BlackBox(_) => None,
        }
    }

    /// `out = Psi(y)`.
    #[inline]
    pub fn psi(&self, y: &[f64], out: &mut [f64]) {
        match self {
            CoefficientSet::Linear(c) => {
                out.copy_from_slice(c.psi_0.as_slice());
                gemv_acc(&c.psi_y, y, out);
            }
            CoefficientSet::BlackBox(b) => (b.psi)(y, out),
        }
    }

    /// `out = Phi(x, x')`.
    #[inline]
    pub fn phi(&self, x: &[f64], xbar: &[f64], out: &mut [f64]) {
        match self {
            CoefficientSet::Linear(c) => {
                out.copy_from_slice(c.phi_0.as_slice());
                gemv_acc(&c.phi_x, x, out);
                gemv_acc(&c.phi_xbar, xbar, out);
            }
            CoefficientSet::BlackBox(b) => (b.phi)(x, xbar, out),
        }
    }

    /// `out = Gamma(s, theta, theta') = (g, b, sigma)`.
    #[inline]
    pub fn gamma(&self, at: Instant, theta: &[f64], theta_bar: &[f64], out: &mut [f64]) {
        match self {
            CoefficientSet::Linear(c) => {
                out.copy_from_slice(c.gamma_0.at(at.k).as_slice());
                gemv_acc(c.gamma_theta.at(at.k), theta, out);
                gemv_acc(c.gamma_theta_bar.at(at.k), theta_bar, out);
            }
            CoefficientSet::BlackBox(b) => (b.gamma)(at, theta, theta_bar, out),
        }
    }

    /// `alpha * self + (1 - alpha) * other`. Stays affine when both are.
    pub fn blend(&self, other: &CoefficientSet, alpha: f64) -> Result<CoefficientSet> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Domain(format!("blend weight {alpha} outside [0, 1]")));
        }
        let dims = self.dims();
        if dims != other.dims() {
            return Err(Error::Dimension {
                what: "blend operands".into(),
                expected: dims.theta(),
                got: other.dims().theta(),
            });
        }
        if let (Some(a), Some(b)) = (self.as_linear(), other.as_linear()) {
            return Ok(CoefficientSet::Linear(Arc::new(a.blend(b, alpha))));
        }
        let (a1, b1) = (self.clone(), other.clone());
        let (a2, b2) = (self.clone(), other.clone());
        let (a3, b3) = (self.clone(), other.clone());
        let n = dims.n;
        let t = dims.theta();
        Ok(CoefficientSet::BlackBox(BlackBox {
            dims,
            psi: Arc::new(move |y, out| {
                let mut tmp = vec![0.0; n];
                a1.psi(y, out);
                b1.psi(y, &mut tmp);
                mix_into(out, &tmp, alpha);
            }),
            phi: Arc::new(move |x, xb, out| {
                let mut tmp = vec![0.0; n];
                a2.phi(x, xb, out);
                b2.phi(x, xb, &mut tmp);
                mix_into(out, &tmp, alpha);
            }),
            gamma: Arc::new(move |at, th, tb, out| {
                let mut tmp = vec![0.0; t];
                a3.gamma(at, th, tb, out);
                b3.gamma(at, th, tb, &mut tmp);
                mix_into(out, &tmp, alpha);
            }),
        }))
    }

    /// Coefficients of the worked nonlinear example with parameters `k1, k2`
    /// (`n = d = 1`): `Psi = -k1 y + sin y`, `Phi = k2 x + sin x'`,
    /// `g = -k2 x + sin x'`, `b = -k1 y + sin y'`, `sigma = -k1 z + sin z'`.
    pub fn example32(k1: f64, k2: f64) -> CoefficientSet {
        CoefficientSet::BlackBox(BlackBox {
            dims: Dimensions { n: 1, d: 1 },
            psi: Arc::new(move |y, out| out[0] = -k1 * y[0] + y[0].sin()),
            phi: Arc::new(move |x, xb, out| out[0] = k2 * x[0] + xb[0].sin()),
            gamma: Arc::new(move |_, th, tb, out| {
                out[0] = -k2 * th[0] + tb[0].sin();
                out[1] = -k1 * th[1] + tb[1].sin();
                out[2] = -k1 * th[2] + tb[2].sin();
            }),
        })
    }
}

fn mix_into(out: &mut [f64], other: &[f64], alpha: f64) {
    for (o, b) in out.iter_mut().zip(other) {
        *o = alpha * *o + (1.0 - alpha) * b;
    }
}

// ---------------------------------------------------------------------------
// JSON

pub const COEFF_SCHEMA: &str = "mffbsde-coeff-v1";

/// A matrix in JSON: rows of numbers, or `{"steps": [...]}` for one matrix
/// per grid step.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum MatrixJson {
    Rows(Vec<Vec<f64>>),
    Steps { steps: Vec<Vec<Vec<f64>>> },
}

/// A vector in JSON: numbers, or `{"steps": [...]}`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum VectorJson {
    Values(Vec<f64>),
    Steps { steps: Vec<Vec<f64>> },
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CoefficientBody {
    Linear {
        n: usize,
        d: usize,
        #[serde(default)]
        psi_y: Option<Vec<Vec<f64>>>,
        #[serde(default)]
        psi_0: Option<Vec<f64>>,
        #[serde(default)]
        phi_x: Option<Vec<Vec<f64>>>,
        #[serde(default)]
        phi_xbar: Option<Vec<Vec<f64>>>,
        #[serde(default)]
        phi_0: Option<Vec<f64>>,
        #[serde(default)]
        gamma_theta: Option<MatrixJson>,
        #[serde(default)]
        gamma_theta_bar: Option<MatrixJson>,
        #[serde(default)]
        gamma_0: Option<VectorJson>,
    },
    Example32 {
        k1: f64,
        k2: f64,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CoefficientDoc {
    pub schema: String,
    #[serde(flatten)]
    pub body: CoefficientBody,
}

pub(crate) fn rows_to_matrix(
    field: &str,
    rows: &[Vec<f64>],
    r: usize,
    c: usize,
    errs: &mut Vec<String>,
) -> DMatrix<f64> {
    if rows.len() != r {
        errs.push(format!("{field}: expected {r} rows, got {}", rows.len()));
        return DMatrix::zeros(r, c);
    }
    for (i, row) in rows.iter().enumerate() {
        if row.len() != c {
            errs.push(format!("{field}: row {i} has {} columns, expected {c}", row.len()));
            return DMatrix::zeros(r, c);
        }
        if row.iter().any(|v| !v.is_finite()) {
            errs.push(format!("{field}: row {i} has a non-finite entry"));
            return DMatrix::zeros(r, c);
        }
    }
    DMatrix::from_fn(r, c, |i, j| rows[i][j])
}

pub(crate) fn json_to_time_matrix(
    field: &str,
    m: &MatrixJson,
    r: usize,
    c: usize,
    errs: &mut Vec<String>,
) -> TimeMatrix {
    match m {
        MatrixJson::Rows(rows) => TimeMatrix::Constant(rows_to_matrix(field, rows, r, c, errs)),
        MatrixJson::Steps { steps } => {
            if steps.is_empty() {
                errs.push(format!("{field}: empty step list"));
                return TimeMatrix::zeros(r, c);
            }
            TimeMatrix::PerStep(
                steps
                    .iter()
                    .enumerate()
                    .map(|(k, rows)| rows_to_matrix(&format!("{field}[{k}]"), rows, r, c, errs))
                    .collect(),
            )
        }
    }
}

pub(crate) fn values_to_vector(field: &str, v: &[f64], n: usize, errs: &mut Vec<String>) -> DVector<f64> {
    if v.len() != n {
        errs.push(format!("{field}: expected {n} entries, got {}", v.len()));
        return DVector::zeros(n);
    }
    if v.iter().any(|x| !x.is_finite()) {
        errs.push(format!("{field}: non-finite entry"));
    }
    DVector::from_column_slice(v)
}

pub(crate) fn json_to_time_vector(
    field: &str,
    v: &VectorJson,
    n: usize,
    errs: &mut Vec<String>,
) -> TimeMatrix {
    match v {
        VectorJson::Values(vals) => {
            let d = values_to_vector(field, vals, n, errs);
            TimeMatrix::Constant(DMatrix::from_column_slice(n, 1, d.as_slice()))
        }
        VectorJson::Steps { steps } => {
            if steps.is_empty() {
                errs.push(format!("{field}: empty step list"));
                return TimeMatrix::zeros(n, 1);
            }
            TimeMatrix::PerStep(
                steps
                    .iter()
                    .enumerate()
                    .map(|(k, vals)| {
                        let d = values_to_vector(&format!("{field}[{k}]"), vals, n, errs);
                        DMatrix::from_column_slice(n, 1, d.as_slice())
                    })
                    .collect(),
            )
        }
    }
}

pub(crate) fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub(crate) fn time_matrix_json(m: &TimeMatrix) -> MatrixJson {
    match m {
        TimeMatrix::Constant(m) => MatrixJson::Rows(matrix_rows(m)),
        TimeMatrix::PerStep(v) => MatrixJson::Steps {
            steps: v.iter().map(matrix_rows).collect(),
        },
    }
}

pub(crate) fn time_vector_json(m: &TimeMatrix) -> VectorJson {
    match m {
        TimeMatrix::Constant(m) => VectorJson::Values(m.iter().copied().collect()),
        TimeMatrix::PerStep(v) => VectorJson::Steps {
            steps: v.iter().map(|m| m.iter().copied().collect()).collect(),
        },
    }
}

impl CoefficientDoc {
    /// Builds the coefficient set, reporting every malformed field at once.
    pub fn build(&self) -> Result<CoefficientSet> {
        if self.schema != COEFF_SCHEMA {
            return Err(Error::Config(format!(
                "schema: expected \"{COEFF_SCHEMA}\", got \"{}\"",
                self.schema
            )));
        }
        match &self.body {
            CoefficientBody::Example32 { k1, k2 } => {
                if !(k1.is_finite() && k2.is_finite()) {
                    return Err(Error::Config("k1, k2: must be finite".into()));
                }
                Ok(CoefficientSet::example32(*k1, *k2))
            }
            CoefficientBody::Linear {
                n,
                d,
                psi_y,
                psi_0,
                phi_x,
                phi_xbar,
                phi_0,
                gamma_theta,
                gamma_theta_bar,
                gamma_0,
            } => {
                let dims = Dimensions::new(*n, *d)?;
                let (n, t) = (dims.n, dims.theta());
                let mut errs = Vec::new();
                let mut c = LinearCoefficients::zeros(dims);
                if let Some(m) = psi_y {
                    c.psi_y = rows_to_matrix("psi_y", m, n, n, &mut errs);
                }
                if let Some(v) = psi_0 {
                    c.psi_0 = values_to_vector("psi_0", v, n, &mut errs);
                }
                if let Some(m) = phi_x {
                    c.phi_x = rows_to_matrix("phi_x", m, n, n, &mut errs);
                }
                if let Some(m) = phi_xbar {
                    c.phi_xbar = rows_to_matrix("phi_xbar", m, n, n, &mut errs);
                }
                if let Some(v) = phi_0 {
                    c.phi_0 = values_to_vector("phi_0", v, n, &mut errs);
                }
                if let Some(m) = gamma_theta {
                    c.gamma_theta = json_to_time_matrix("gamma_theta", m, t, t, &mut errs);
                }
                if let Some(m) = gamma_theta_bar {
                    c.gamma_theta_bar = json_to_time_matrix("gamma_theta_bar", m, t, t, &mut errs);
                }
                if let Some(v) = gamma_0 {
                    c.gamma_0 = json_to_time_vector("gamma_0", v, t, &mut errs);
                }
                if !errs.is_empty() {
                    return Err(Error::Config(errs.join("; ")));
                }
                CoefficientSet::linear(c)
            }
        }
    }

    pub fn from_linear(c: &LinearCoefficients) -> CoefficientDoc {
        CoefficientDoc {
            schema: COEFF_SCHEMA.into(),
            body: CoefficientBody::Linear {
                n: c.dims.n,
                d: c.dims.d,
                psi_y: Some(matrix_rows(&c.psi_y)),
                psi_0: Some(c.psi_0.iter().copied().collect()),
                phi_x: Some(matrix_rows(&c.phi_x)),
                phi_xbar: Some(matrix_rows(&c.phi_xbar)),
                phi_0: Some(c.phi_0.iter().copied().collect()),
                gamma_theta: Some(time_matrix_json(&c.gamma_theta)),
                gamma_theta_bar: Some(time_matrix_json(&c.gamma_theta_bar)),
                gamma_0: Some(time_vector_json(&c.gamma_0)),
            },
        }
    }
}
