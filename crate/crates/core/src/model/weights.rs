use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{hstack, operator_norm, vstack};
use crate::model::coeff::{
    json_to_time_matrix, rows_to_matrix, time_matrix_json, matrix_rows, CoefficientSet,
    LinearCoefficients, MatrixJson, TimeMatrix,
};
use crate::model::grid::Dimensions;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Case {
    /// `mu > 0`, `nu = 0`: the reference system is solved backward first.
    #[serde(rename = "A")]
    A,
    /// `mu = 0`, `nu > 0`: the reference system is solved forward first.
    #[serde(rename = "B")]
    B,
}

/// Weights of the domination and monotonicity conditions.
///
/// `c` and `c_tilde` hold `(C_1, ..., C_d)` side by side (`m3 x nd`) so that
/// `C z` acts on the stacked `z`.
#[derive(Clone, Debug, PartialEq)]
pub struct DominationWeights {
    pub dims: Dimensions,
    pub mu: f64,
    pub nu: f64,
    pub h: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub p_tilde: DMatrix<f64>,
    pub a: TimeMatrix,
    pub a_tilde: TimeMatrix,
    pub b: TimeMatrix,
    pub b_tilde: TimeMatrix,
    pub c: TimeMatrix,
    pub c_tilde: TimeMatrix,
    pub case: Case,
}

impl DominationWeights {
    /// Case A weights with `m1 = n` and every matrix zero except `H`.
    pub fn case_a(dims: Dimensions, mu: f64, h: DMatrix<f64>) -> Self {
        let mut w = Self::empty(dims, Case::A, h.nrows(), 1, 1);
        w.mu = mu;
        w.h = h;
        w
    }

    /// Case B weights with `P`, `P~` given and every other matrix zero.
    pub fn case_b(dims: Dimensions, nu: f64, p: DMatrix<f64>, p_tilde: DMatrix<f64>) -> Self {
        let mut w = Self::empty(dims, Case::B, 1, p.nrows(), 1);
        w.nu = nu;
        w.p = p;
        w.p_tilde = p_tilde;
        w
    }

    /// All-zero weights of the given block sizes.
    pub fn empty(dims: Dimensions, case: Case, m1: usize, m2: usize, m3: usize) -> Self {
        let n = dims.n;
        DominationWeights {
            dims,
            mu: 0.0,
            nu: 0.0,
            h: DMatrix::zeros(m1, n),
            p: DMatrix::zeros(m2, n),
            p_tilde: DMatrix::zeros(m2, n),
            a: TimeMatrix::zeros(m3, n),
            a_tilde: TimeMatrix::zeros(m3, n),
            b: TimeMatrix::zeros(m3, n),
            b_tilde: TimeMatrix::zeros(m3, n),
            c: TimeMatrix::zeros(m3, dims.z()),
            c_tilde: TimeMatrix::zeros(m3, dims.z()),
            case,
        }
    }

    /// Weights used for the worked nonlinear example: `H = P = P~ = 1`,
    /// `A = A~ = e1`, `B = B~ = e2`, `C = C~ = e3` in `R^3`.
    pub fn example32(case: Case, weight: f64) -> Self {
        let dims = Dimensions { n: 1, d: 1 };
        let e = |i: usize| DMatrix::from_fn(3, 1, |r, _| if r == i { 1.0 } else { 0.0 });
        let one = DMatrix::from_element(1, 1, 1.0);
        DominationWeights {
            dims,
            mu: if case == Case::A { weight } else { 0.0 },
            nu: if case == Case::B { weight } else { 0.0 },
            h: one.clone(),
            p: one.clone(),
            p_tilde: one,
            a: e(0).into(),
            a_tilde: e(0).into(),
            b: e(1).into(),
            b_tilde: e(1).into(),
            c: e(2).into(),
            c_tilde: e(2).into(),
            case,
        }
    }

    pub fn m1(&self) -> usize {
        self.h.nrows()
    }
    pub fn m2(&self) -> usize {
        self.p.nrows()
    }
    pub fn m3(&self) -> usize {
        self.a.shape().0
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dims.n;
        let nz = self.dims.z();
        let mut errs = Vec::new();
        if !(self.mu.is_finite() && self.mu >= 0.0) {
            errs.push(format!("mu: must be finite and nonnegative, got {}", self.mu));
        }
        if !(self.nu.is_finite() && self.nu >= 0.0) {
            errs.push(format!("nu: must be finite and nonnegative, got {}", self.nu));
        }
        match self.case {
            Case::A if !(self.mu > 0.0 && self.nu == 0.0) => {
                errs.push("case A requires mu > 0 and nu = 0".into())
            }
            Case::B if !(self.nu > 0.0 && self.mu == 0.0) => {
                errs.push("case B requires nu > 0 and mu = 0".into())
            }
            _ => {}
        }
        let (m2, m3) = (self.m2(), self.m3());
        let mut want = |name: &str, got: (usize, usize), exp: (usize, usize)| {
            if got != exp {
                errs.push(format!("{name}: expected {}x{}, got {}x{}", exp.0, exp.1, got.0, got.1));
            }
        };
        want("H", (self.h.ncols(), 0), (n, 0));
        want("P", self.p.shape(), (m2, n));
        want("P_tilde", self.p_tilde.shape(), (m2, n));
        for (name, tm, cols) in [
            ("A", &self.a, n),
            ("A_tilde", &self.a_tilde, n),
            ("B", &self.b, n),
            ("B_tilde", &self.b_tilde, n),
            ("C", &self.c, nz),
            ("C_tilde", &self.c_tilde, nz),
        ] {
            for m in tm.all() {
                want(name, m.shape(), (m3, cols));
            }
        }
        let finite = [&self.h, &self.p, &self.p_tilde]
            .iter()
            .all(|m| m.iter().all(|v| v.is_finite()))
            && [&self.a, &self.a_tilde, &self.b, &self.b_tilde, &self.c, &self.c_tilde]
                .iter()
                .all(|t| t.all().iter().all(|m| m.iter().all(|v| v.is_finite())));
        if !finite {
            errs.push("weight matrices must be finite".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Weights(errs.join("; ")))
        }
    }

    /// Largest `mu` (case A) or `nu` (case B) allowed by the normalization
    /// bounds on the weight matrices.
    pub fn weight_cap(&self) -> f64 {
        let steps = self.max_steps();
        match self.case {
            Case::A => {
                let mut m = operator_norm(&self.h);
                for k in 0..steps {
                    m = m
                        .max(operator_norm(&vstack(&[self.b.at(k), self.b_tilde.at(k)])))
                        .max(operator_norm(&vstack(&[self.c.at(k), self.c_tilde.at(k)])));
                }
                if m > 0.0 {
                    1.0 / m.sqrt()
                } else {
                    f64::INFINITY
                }
            }
            Case::B => {
                let mut m = operator_norm(&vstack(&[&self.p, &self.p_tilde]));
                for k in 0..steps {
                    m = m.max(operator_norm(&vstack(&[self.a.at(k), self.a_tilde.at(k)])));
                }
                if m > 0.0 {
                    1.0 / m.sqrt()
                } else {
                    f64::INFINITY
                }
            }
        }
    }

    /// Lowers `mu`/`nu` to the normalization cap when needed. Returns the
    /// original value when a change was made.
    pub fn clamp_to_wlog(&mut self) -> Option<f64> {
        let cap = self.weight_cap();
        let w = match self.case {
            Case::A => &mut self.mu,
            Case::B => &mut self.nu,
        };
        if *w > cap {
            let old = *w;
            *w = cap;
            Some(old)
        } else {
            None
        }
    }

    pub(crate) fn max_steps(&self) -> usize {
        [&self.a, &self.a_tilde, &self.b, &self.b_tilde, &self.c, &self.c_tilde]
            .iter()
            .map(|t| t.steps())
            .max()
            .unwrap_or(1)
    }
}

/// Result of the normalization checks on the weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WlogReport {
    pub case_a_ok: bool,
    pub case_b_ok: bool,
}

/// Evaluates the four normalization inequalities for Lipschitz bound `l`.
pub fn check_wlog(w: &DominationWeights, l: f64) -> WlogReport {
    let steps = w.max_steps();
    let inv_sq = |x: f64| if x > 0.0 { 1.0 / (x * x) } else { f64::INFINITY };
    let tol = 1e-12;

    let mut a1 = operator_norm(&w.h);
    let mut a2 = operator_norm(&w.h).powi(2);
    let mut b1 = operator_norm(&vstack(&[&w.p, &w.p_tilde]));
    let mut b2 = operator_norm(&w.p).powi(2) + operator_norm(&w.p_tilde).powi(2);
    for k in 0..steps {
        a1 = a1
            .max(operator_norm(&vstack(&[w.b.at(k), w.b_tilde.at(k)])))
            .max(operator_norm(&vstack(&[w.c.at(k), w.c_tilde.at(k)])));
        a2 = a2.max(
            operator_norm(&hstack(&[w.b.at(k), w.c.at(k)])).powi(2)
                + operator_norm(&hstack(&[w.b_tilde.at(k), w.c_tilde.at(k)])).powi(2),
        );
        b1 = b1.max(operator_norm(&vstack(&[w.a.at(k), w.a_tilde.at(k)])));
        b2 = b2.max(operator_norm(w.a.at(k)).powi(2) + operator_norm(w.a_tilde.at(k)).powi(2));
    }
    let case_a_ok = inv_sq(w.mu) >= a1 * (1.0 - tol) && l >= w.mu * a2 * (1.0 - tol);
    let case_b_ok = inv_sq(w.nu) >= b1 * (1.0 - tol) && l >= w.nu * b2 * (1.0 - tol);
    WlogReport {
        case_a_ok,
        case_b_ok,
    }
}

/// The decoupled linear reference coefficients built from the weights:
/// `Psi0 = -mu H'H y`, `Phi0 = nu (P'P (x - x') + P~'P~ x')`,
/// `g0 = -nu (A'A (x - x') + A~'A~ x')`,
/// `b0 = -mu (B'[B(y - y') + C(z - z')] + B~'[B~ y' + C~ z'])`,
/// `sigma0 = -mu (C'[...] + C~'[...])`.
pub fn reference_coefficients(w: &DominationWeights) -> Result<CoefficientSet> {
    w.validate()?;
    let dims = w.dims;
    let n = dims.n;
    let nz = dims.z();
    let t = dims.theta();
    let (mu, nu) = (w.mu, w.nu);

    let mut c = LinearCoefficients::zeros(dims);
    c.psi_y = -(w.h.transpose() * &w.h) * mu;
    let ptp = w.p.transpose() * &w.p;
    let pttpt = w.p_tilde.transpose() * &w.p_tilde;
    c.phi_x = &ptp * nu;
    c.phi_xbar = (&pttpt - &ptp) * nu;

    let steps = w.max_steps();
    let mut gt = Vec::with_capacity(steps);
    let mut gtb = Vec::with_capacity(steps);
    for k in 0..steps {
        let (a, at) = (w.a.at(k), w.a_tilde.at(k));
        let (b, bt) = (w.b.at(k), w.b_tilde.at(k));
        let (cm, ct) = (w.c.at(k), w.c_tilde.at(k));
        let mut g = DMatrix::zeros(t, t);
        let mut gb = DMatrix::zeros(t, t);

        let ata = a.transpose() * a;
        let atat = at.transpose() * at;
        g.view_mut((0, 0), (n, n)).copy_from(&(-&ata * nu));
        gb.view_mut((0, 0), (n, n)).copy_from(&((&ata - &atat) * nu));

        // [B C] acting on (y, z) and [B~ C~] acting on (y', z').
        let bc = hstack(&[b, cm]);
        let bct = hstack(&[bt, ct]);
        let lhs = vstack(&[&b.transpose(), &cm.transpose()]);
        let lhs_t = vstack(&[&bt.transpose(), &ct.transpose()]);
        let own = &lhs * &bc;
        let cross = &lhs_t * &bct;
        g.view_mut((n, n), (n + nz, n + nz)).copy_from(&(-&own * mu));
        gb.view_mut((n, n), (n + nz, n + nz))
            .copy_from(&((&own - &cross) * mu));
        gt.push(g);
        gtb.push(gb);
    }
    if steps == 1 {
        c.gamma_theta = TimeMatrix::Constant(gt.pop().unwrap());
        c.gamma_theta_bar = TimeMatrix::Constant(gtb.pop().unwrap());
    } else {
        c.gamma_theta = TimeMatrix::PerStep(gt);
        c.gamma_theta_bar = TimeMatrix::PerStep(gtb);
    }
    Ok(CoefficientSet::Linear(Arc::new(c)))
}

/// The worked nonlinear example: coefficients plus the largest admissible
/// `mu` and `nu`.
pub fn example32(k1: f64, k2: f64) -> Result<(CoefficientSet, f64, f64)> {
    if !(k1 >= 1.0 && k2 >= 1.0) {
        return Err(Error::Domain(format!(
            "admissible weights need k1 >= 1 and k2 >= 1, got k1={k1}, k2={k2}"
        )));
    }
    let adm = |k: f64| (k - 1.0).min(1.0 / (2.0 * (k + 1.0))).max(0.0);
    Ok((CoefficientSet::example32(k1, k2), adm(k1), adm(k2)))
}

// ---------------------------------------------------------------------------
// JSON

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct WeightsDoc {
    pub case: Case,
    #[serde(default)]
    pub mu: f64,
    #[serde(default)]
    pub nu: f64,
    pub n: usize,
    pub d: usize,
    #[serde(default, rename = "H")]
    pub h: Option<Vec<Vec<f64>>>,
    #[serde(default, rename = "P")]
    pub p: Option<Vec<Vec<f64>>>,
    #[serde(default, rename = "P_tilde")]
    pub p_tilde: Option<Vec<Vec<f64>>>,
    #[serde(default, rename = "A")]
    pub a: Option<MatrixJson>,
    #[serde(default, rename = "A_tilde")]
    pub a_tilde: Option<MatrixJson>,
    #[serde(default, rename = "B")]
    pub b: Option<MatrixJson>,
    #[serde(default, rename = "B_tilde")]
    pub b_tilde: Option<MatrixJson>,
    #[serde(default, rename = "C")]
    pub c: Option<MatrixJson>,
    #[serde(default, rename = "C_tilde")]
    pub c_tilde: Option<MatrixJson>,
    /// Shorthand for the worked example's weights.
    #[serde(default)]
    pub preset: Option<String>,
}

fn rows_of(m: &Option<Vec<Vec<f64>>>) -> Option<usize> {
    m.as_ref().map(|r| r.len())
}

fn rows_of_json(m: &Option<MatrixJson>) -> Option<usize> {
    match m {
        Some(MatrixJson::Rows(r)) => Some(r.len()),
        Some(MatrixJson::Steps { steps }) => steps.first().map(|s| s.len()),
        None => None,
    }
}

impl WeightsDoc {
    pub fn build(&self) -> Result<DominationWeights> {
        let dims = Dimensions::new(self.n, self.d)?;
        if let Some(p) = &self.preset {
            if p != "example32" {
                return Err(Error::Config(format!("preset: unknown value \"{p}\"")));
            }
            let weight = match self.case {
                Case::A => self.mu,
                Case::B => self.nu,
            };
            let w = DominationWeights::example32(self.case, weight);
            w.validate()?;
            return Ok(w);
        }
        let n = dims.n;
        let m1 = rows_of(&self.h).unwrap_or(1);
        let m2 = rows_of(&self.p).or(rows_of(&self.p_tilde)).unwrap_or(1);
        let m3 = [&self.a, &self.a_tilde, &self.b, &self.b_tilde, &self.c, &self.c_tilde]
            .iter()
            .find_map(|m| rows_of_json(m))
            .unwrap_or(1);
        let mut errs = Vec::new();
        let mut w = DominationWeights::empty(dims, self.case, m1, m2, m3);
        w.mu = self.mu;
        w.nu = self.nu;
        if let Some(m) = &self.h {
            w.h = rows_to_matrix("H", m, m1, n, &mut errs);
        }
        if let Some(m) = &self.p {
            w.p = rows_to_matrix("P", m, m2, n, &mut errs);
        }
        if let Some(m) = &self.p_tilde {
            w.p_tilde = rows_to_matrix("P_tilde", m, m2, n, &mut errs);
        }
        let nz = dims.z();
        for (name, src, dst, cols) in [
            ("A", &self.a, &mut w.a, n),
            ("A_tilde", &self.a_tilde, &mut w.a_tilde, n),
            ("B", &self.b, &mut w.b, n),
            ("B_tilde", &self.b_tilde, &mut w.b_tilde, n),
            ("C", &self.c, &mut w.c, nz),
            ("C_tilde", &self.c_tilde, &mut w.c_tilde, nz),
        ] {
            if let Some(m) = src {
                *dst = json_to_time_matrix(name, m, m3, cols, &mut errs);
            }
        }
        if !errs.is_empty() {
            return Err(Error::Config(errs.join("; ")));
        }
        w.validate()?;
        Ok(w)
    }

    pub fn from_weights(w: &DominationWeights) -> WeightsDoc {
        WeightsDoc {
            case: w.case,
            mu: w.mu,
            nu: w.nu,
            n: w.dims.n,
            d: w.dims.d,
            h: Some(matrix_rows(&w.h)),
            p: Some(matrix_rows(&w.p)),
            p_tilde: Some(matrix_rows(&w.p_tilde)),
            a: Some(time_matrix_json(&w.a)),
            a_tilde: Some(time_matrix_json(&w.a_tilde)),
            b: Some(time_matrix_json(&w.b)),
            b_tilde: Some(time_matrix_json(&w.b_tilde)),
            c: Some(time_matrix_json(&w.c)),
            c_tilde: Some(time_matrix_json(&w.c_tilde)),
            preset: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::grid::Instant;

    #[test]
    fn reference_psi_with_identity_h() {
        let dims = Dimensions { n: 2, d: 1 };
        let w = DominationWeights::case_a(dims, 1.0, DMatrix::identity(2, 2));
        let r = reference_coefficients(&w).unwrap();
        let mut out = [0.0; 2];
        r.psi(&[1.5, -2.0], &mut out);
        assert_eq!(out, [-1.5, 2.0]);
    }

    #[test]
    fn reference_phi_case_b_is_identity() {
        let dims = Dimensions { n: 2, d: 1 };
        let i = DMatrix::identity(2, 2);
        let w = DominationWeights::case_b(dims, 1.0, i.clone(), i);
        let r = reference_coefficients(&w).unwrap();
        let mut out = [0.0; 2];
        r.phi(&[0.3, 0.7], &[5.0, -9.0], &mut out);
        assert!((out[0] - 0.3).abs() < 1e-15 && (out[1] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn reference_example_weights_give_scaled_identity_drift() {
        let w = DominationWeights::example32(Case::A, 1.0 / 6.0);
        let r = reference_coefficients(&w).unwrap();
        let mut out = [0.0; 3];
        r.gamma(Instant { k: 0, s: 0.0 }, &[1.0, 2.0, 3.0], &[0.4, 0.5, 0.6], &mut out);
        assert!(out[0].abs() < 1e-15);
        assert!((out[1] + 2.0 / 6.0).abs() < 1e-15);
        assert!((out[2] + 3.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn wlog_examples() {
        let dims = Dimensions { n: 2, d: 1 };
        let zero = DominationWeights::case_a(dims, 1.0, DMatrix::zeros(2, 2));
        assert!(check_wlog(&zero, 1.0).case_a_ok);
        let w = DominationWeights::case_a(dims, 1.0, DMatrix::identity(2, 2));
        assert!(check_wlog(&w, 1.0).case_a_ok);
        let w2 = DominationWeights::case_a(dims, 2.0, DMatrix::identity(2, 2));
        assert!(!check_wlog(&w2, 100.0).case_a_ok);
        let i = DMatrix::identity(2, 2);
        let wb = DominationWeights::case_b(dims, 1.0, i.clone(), i);
        assert!(!check_wlog(&wb, 100.0).case_b_ok);
    }

    #[test]
    fn clamp_lowers_mu() {
        let dims = Dimensions { n: 1, d: 1 };
        let mut w = DominationWeights::case_a(dims, 2.0, DMatrix::from_element(1, 1, 4.0));
        assert_eq!(w.clamp_to_wlog(), Some(2.0));
        assert!((w.mu - 0.5).abs() < 1e-15);
        assert!(check_wlog(&w, 100.0).case_a_ok);
    }

    #[test]
    fn example_admissible_weights() {
        let (_, mu, nu) = example32(2.0, 2.0).unwrap();
        assert!((mu - 1.0 / 6.0).abs() < 1e-15 && (nu - 1.0 / 6.0).abs() < 1e-15);
        let (_, mu1, _) = example32(1.0, 2.0).unwrap();
        assert_eq!(mu1, 0.0);
        assert!(example32(0.5, 2.0).is_err());
    }

    #[test]
    fn case_flag_is_enforced() {
        let dims = Dimensions { n: 1, d: 1 };
        let mut w = DominationWeights::case_a(dims, 1.0, DMatrix::identity(1, 1));
        w.nu = 0.5;
        assert!(w.validate().is_err());
    }
}
