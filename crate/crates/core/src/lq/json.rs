//! JSON form of LQ problems: named matrices over a zero (or preset) base.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lq::{BackwardLQProblem, ForwardLQProblem};
use crate::model::coeff::{
    json_to_time_matrix, json_to_time_vector, matrix_rows, rows_to_matrix, time_matrix_json,
    time_vector_json, values_to_vector, MatrixJson, VectorJson,
};
use crate::model::{Dimensions, TimeMatrix};

pub const LQ_SCHEMA: &str = "mffbsde-lq-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LqBody {
    Forward(LqFields),
    Backward(LqFields),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LqFields {
    pub n: usize,
    pub d: usize,
    pub m: usize,
    /// `"scalar_example"` starts from the built-in scalar instance; fields
    /// given below override it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default)]
    pub matrices: BTreeMap<String, MatrixJson>,
    #[serde(default)]
    pub vectors: BTreeMap<String, VectorJson>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LqDoc {
    pub schema: String,
    #[serde(flatten)]
    pub body: LqBody,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LqProblem {
    Forward(ForwardLQProblem),
    Backward(BackwardLQProblem),
}

enum Slot<'a> {
    Timed(&'a mut TimeMatrix, (usize, usize)),
    Fixed(&'a mut DMatrix<f64>, (usize, usize)),
}

fn forward_slots(p: &mut ForwardLQProblem) -> Vec<(&'static str, Slot<'_>)> {
    let (n, nd, m) = (p.dims.n, p.dims.z(), p.m);
    let c = &mut p.cost;
    vec![
        ("A", Slot::Timed(&mut p.a, (n, n))),
        ("A_bar", Slot::Timed(&mut p.a_bar, (n, n))),
        ("B", Slot::Timed(&mut p.b, (n, m))),
        ("B_bar", Slot::Timed(&mut p.b_bar, (n, m))),
        ("C", Slot::Timed(&mut p.c, (nd, n))),
        ("C_bar", Slot::Timed(&mut p.c_bar, (nd, n))),
        ("D", Slot::Timed(&mut p.d, (nd, m))),
        ("D_bar", Slot::Timed(&mut p.d_bar, (nd, m))),
        ("H", Slot::Fixed(&mut p.h, (n, n))),
        ("M", Slot::Fixed(&mut c.m, (n, n))),
        ("G", Slot::Fixed(&mut c.g, (n, n))),
        ("G_bar", Slot::Fixed(&mut c.g_bar, (n, n))),
        ("Q", Slot::Timed(&mut c.q, (n, n))),
        ("Q_bar", Slot::Timed(&mut c.q_bar, (n, n))),
        ("R", Slot::Timed(&mut c.r, (m, m))),
        ("R_bar", Slot::Timed(&mut c.r_bar, (m, m))),
    ]
}

fn backward_slots(p: &mut BackwardLQProblem) -> Vec<(&'static str, Slot<'_>)> {
    let (n, nd, m, d) = (p.dims.n, p.dims.z(), p.m, p.dims.d);
    let c = &mut p.cost;
    vec![
        ("A", Slot::Timed(&mut p.a, (n, n))),
        ("A_bar", Slot::Timed(&mut p.a_bar, (n, n))),
        ("B", Slot::Timed(&mut p.b, (n, nd))),
        ("B_bar", Slot::Timed(&mut p.b_bar, (n, nd))),
        ("C", Slot::Timed(&mut p.c, (n, m))),
        ("C_bar", Slot::Timed(&mut p.c_bar, (n, m))),
        ("P", Slot::Fixed(&mut p.p, (n, n))),
        ("P_bar", Slot::Fixed(&mut p.p_bar, (n, n))),
        ("y_T_brownian", Slot::Fixed(&mut p.y_t.brownian, (n, d))),
        ("M", Slot::Fixed(&mut c.m, (n, n))),
        ("G", Slot::Fixed(&mut c.g, (n, n))),
        ("G_bar", Slot::Fixed(&mut c.g_bar, (n, n))),
        ("Q", Slot::Timed(&mut c.q, (n, n))),
        ("Q_bar", Slot::Timed(&mut c.q_bar, (n, n))),
        ("L", Slot::Timed(&mut c.l, (nd, nd))),
        ("L_bar", Slot::Timed(&mut c.l_bar, (nd, nd))),
        ("R", Slot::Timed(&mut c.r, (m, m))),
        ("R_bar", Slot::Timed(&mut c.r_bar, (m, m))),
    ]
}

fn fill_matrices(slots: Vec<(&'static str, Slot<'_>)>, given: &BTreeMap<String, MatrixJson>, errs: &mut Vec<String>) {
    let known: Vec<&str> = slots.iter().map(|(name, _)| *name).collect();
    for name in given.keys().filter(|k| !known.contains(&k.as_str())) {
        errs.push(format!("unknown matrix `{name}` (expected one of {})", known.join(", ")));
    }
    for (name, slot) in slots {
        let Some(json) = given.get(name) else { continue };
        match slot {
            Slot::Timed(t, (r, c)) => *t = json_to_time_matrix(name, json, r, c, errs),
            Slot::Fixed(f, (r, c)) => match json {
                MatrixJson::Rows(rows) => *f = rows_to_matrix(name, rows, r, c, errs),
                MatrixJson::Steps { .. } => errs.push(format!("{name}: must be a constant matrix")),
            },
        }
    }
}

fn check_vectors(given: &BTreeMap<String, VectorJson>, known: &[&str], errs: &mut Vec<String>) {
    for name in given.keys().filter(|k| !known.contains(&k.as_str())) {
        errs.push(format!("unknown vector `{name}` (expected one of {})", known.join(", ")));
    }
}

fn constant_vector(name: &str, v: &VectorJson, n: usize, errs: &mut Vec<String>) -> Option<nalgebra::DVector<f64>> {
    match v {
        VectorJson::Values(vals) => Some(values_to_vector(name, vals, n, errs)),
        VectorJson::Steps { .. } => {
            errs.push(format!("{name}: must be a constant vector"));
            None
        }
    }
}

fn preset_error(f: &LqFields) -> Option<String> {
    match f.preset.as_deref() {
        None => None,
        Some("scalar_example") if (f.n, f.d, f.m) == (1, 1, 1) => None,
        Some("scalar_example") => Some("preset `scalar_example` needs n = d = m = 1".into()),
        Some(other) => Some(format!("unknown preset `{other}` (expected `scalar_example`)")),
    }
}

fn finish<T>(value: T, errs: Vec<String>) -> Result<T> {
    if errs.is_empty() {
        Ok(value)
    } else {
        Err(Error::Config(errs.join("; ")))
    }
}

fn dims(f: &LqFields) -> Result<Dimensions> {
    if f.m == 0 {
        return Err(Error::Config("m must be positive".into()));
    }
    Dimensions::new(f.n, f.d)
}

impl LqDoc {
    /// Builds and validates the problem, reporting every malformed field at
    /// once.
    pub fn build(&self) -> Result<LqProblem> {
        if self.schema != LQ_SCHEMA {
            return Err(Error::Config(format!(
                "schema: expected \"{LQ_SCHEMA}\", got \"{}\"",
                self.schema
            )));
        }
        let mut errs = Vec::new();
        match &self.body {
            LqBody::Forward(f) => {
                let dims = dims(f)?;
                errs.extend(preset_error(f));
                let mut p = if f.preset.is_some() && errs.is_empty() {
                    ForwardLQProblem::scalar_example()
                } else {
                    ForwardLQProblem::zeros(dims, f.m)
                };
                fill_matrices(forward_slots(&mut p), &f.matrices, &mut errs);
                check_vectors(&f.vectors, &["alpha", "beta", "x_t"], &mut errs);
                let (n, nd) = (dims.n, dims.z());
                if let Some(v) = f.vectors.get("alpha") {
                    p.alpha = json_to_time_vector("alpha", v, n, &mut errs);
                }
                if let Some(v) = f.vectors.get("beta") {
                    p.beta = json_to_time_vector("beta", v, nd, &mut errs);
                }
                if let Some(v) = f.vectors.get("x_t").and_then(|v| constant_vector("x_t", v, n, &mut errs)) {
                    p.x_t = v;
                }
                let p = finish(p, errs)?;
                p.validate()?;
                Ok(LqProblem::Forward(p))
            }
            LqBody::Backward(f) => {
                let dims = dims(f)?;
                errs.extend(preset_error(f));
                let mut p = if f.preset.is_some() && errs.is_empty() {
                    BackwardLQProblem::scalar_example()
                } else {
                    BackwardLQProblem::zeros(dims, f.m)
                };
                fill_matrices(backward_slots(&mut p), &f.matrices, &mut errs);
                check_vectors(&f.vectors, &["alpha", "y_T"], &mut errs);
                if let Some(v) = f.vectors.get("alpha") {
                    p.alpha = json_to_time_vector("alpha", v, dims.n, &mut errs);
                }
                if let Some(v) = f.vectors.get("y_T").and_then(|v| constant_vector("y_T", v, dims.n, &mut errs)) {
                    p.y_t.constant = v;
                }
                let p = finish(p, errs)?;
                p.validate()?;
                Ok(LqProblem::Backward(p))
            }
        }
    }
}

fn slot_json(slots: Vec<(&'static str, Slot<'_>)>) -> BTreeMap<String, MatrixJson> {
    slots
        .into_iter()
        .map(|(name, slot)| {
            let json = match slot {
                Slot::Timed(t, _) => time_matrix_json(t),
                Slot::Fixed(f, _) => MatrixJson::Rows(matrix_rows(f)),
            };
            (name.to_string(), json)
        })
        .collect()
}

impl LqProblem {
    /// Every field written out explicitly.
    pub fn to_doc(&self) -> LqDoc {
        let body = match self {
            LqProblem::Forward(p) => {
                let mut p = p.clone();
                let vectors = BTreeMap::from([
                    ("alpha".to_string(), time_vector_json(&p.alpha)),
                    ("beta".to_string(), time_vector_json(&p.beta)),
                    ("x_t".to_string(), VectorJson::Values(p.x_t.iter().copied().collect())),
                ]);
                let fields = LqFields {
                    n: p.dims.n,
                    d: p.dims.d,
                    m: p.m,
                    preset: None,
                    matrices: slot_json(forward_slots(&mut p)),
                    vectors,
                };
                LqBody::Forward(fields)
            }
            LqProblem::Backward(p) => {
                let mut p = p.clone();
                let vectors = BTreeMap::from([
                    ("alpha".to_string(), time_vector_json(&p.alpha)),
                    ("y_T".to_string(), VectorJson::Values(p.y_t.constant.iter().copied().collect())),
                ]);
                let fields = LqFields {
                    n: p.dims.n,
                    d: p.dims.d,
                    m: p.m,
                    preset: None,
                    matrices: slot_json(backward_slots(&mut p)),
                    vectors,
                };
                LqBody::Backward(fields)
            }
        };
        LqDoc {
            schema: LQ_SCHEMA.into(),
            body,
        }
    }
}
