//! Run configuration: one versioned JSON file per run.

use std::path::{Path, PathBuf};

use mffbsde::backward::Basis;
use mffbsde::conditions::{Orientation, Sampling};
use mffbsde::continuation::ContinuationConfig;
use mffbsde::lq::{LqDoc, LqProblem, TerminalValue, DEFAULT_DELTA_GAP};
use mffbsde::model::{CoefficientDoc, CoefficientSet, Dimensions, DominationWeights, TimeGrid, WeightsDoc};
use mffbsde::noise::{sub_seed, Backend};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const RUN_SCHEMA: &str = "mffbsde-run-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Tree,
    Mc,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default)]
    pub t0: f64,
    #[serde(default = "one")]
    pub t_end: f64,
    pub steps: usize,
}

fn one() -> f64 {
    1.0
}

fn default_paths() -> usize {
    10_000
}

fn default_gap() -> f64 {
    DEFAULT_DELTA_GAP
}

/// Sampling box of the condition checks; the seed comes from the root seed.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub budget: usize,
    pub radius: f64,
    pub far_radius: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        let s = Sampling::default();
        SamplingConfig {
            budget: s.budget,
            radius: s.radius,
            far_radius: s.far_radius,
        }
    }
}

/// `xi`, `eta + eta_brownian W_T` added to the initial and terminal couplings.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationConfig {
    pub xi: Option<Vec<f64>>,
    pub eta: Option<Vec<f64>>,
    pub eta_brownian: Option<Vec<Vec<f64>>>,
}

/// The file as written, with the three sub-documents kept raw: each may be
/// inline or a path relative to the config file.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    schema: String,
    grid: GridConfig,
    #[serde(default)]
    backend: BackendKind,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_paths")]
    paths: usize,
    #[serde(default)]
    coefficients: Option<Value>,
    #[serde(default)]
    weights: Option<Value>,
    #[serde(default)]
    continuation: ContinuationConfig,
    #[serde(default)]
    features: Option<Basis>,
    #[serde(default)]
    sampling: SamplingConfig,
    #[serde(default)]
    orientation: Option<Orientation>,
    #[serde(default)]
    perturbation: PerturbationConfig,
    #[serde(default)]
    x0: Option<Vec<f64>>,
    #[serde(default)]
    lq: Option<Value>,
    #[serde(default = "default_gap")]
    delta_gap: f64,
}

/// Command-line overrides applied before validation.
#[derive(Clone, Copy, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub backend: Option<BackendKind>,
}

/// A validated run with every default filled in.
#[derive(Clone, Debug)]
pub struct Run {
    pub sha256: String,
    pub seed: u64,
    pub grid: TimeGrid,
    pub backend: BackendKind,
    pub paths: usize,
    pub coeffs: Option<CoefficientSet>,
    pub weights: Option<DominationWeights>,
    pub continuation: ContinuationConfig,
    pub sampling: Sampling,
    pub orientation: Orientation,
    pub perturbation: PerturbationConfig,
    pub x0: Option<Vec<f64>>,
    pub lq: Option<LqProblem>,
    pub delta_gap: f64,
    /// The effective configuration, echoed into the manifest.
    pub resolved: Value,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::Validation(vec![format!("{}: {e}", path.display())]))
}

/// Inline object, or a string path resolved against `base`.
fn sub_document<T: serde::de::DeserializeOwned>(
    field: &str,
    v: &Value,
    base: &Path,
    errs: &mut Vec<String>,
) -> Option<T> {
    let value = match v {
        Value::String(p) => {
            let path: PathBuf = base.join(p);
            match std::fs::read(&path) {
                Ok(bytes) => match serde_json::from_slice::<Value>(&bytes) {
                    Ok(v) => v,
                    Err(e) => {
                        errs.push(format!("{field}: {}: {e}", path.display()));
                        return None;
                    }
                },
                Err(e) => {
                    errs.push(format!("{field}: {}: {e}", path.display()));
                    return None;
                }
            }
        }
        other => other.clone(),
    };
    match serde_json::from_value(value) {
        Ok(t) => Some(t),
        Err(e) => {
            errs.push(format!("{field}: {e}"));
            None
        }
    }
}

fn check_len(field: &str, v: &Option<Vec<f64>>, n: usize, errs: &mut Vec<String>) {
    if let Some(v) = v {
        if v.len() != n {
            errs.push(format!("{field}: expected {n} entries, got {}", v.len()));
        } else if v.iter().any(|x| !x.is_finite()) {
            errs.push(format!("{field}: non-finite entry"));
        }
    }
}

pub fn load(path: &Path, over: Overrides) -> Result<Run, CliError> {
    let bytes = read(path)?;
    let sha256 = sha256_hex(&bytes);
    let raw: RawConfig = serde_json::from_slice(&bytes).map_err(|e| CliError::Validation(vec![e.to_string()]))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut errs = Vec::new();

    if raw.schema != RUN_SCHEMA {
        errs.push(format!("schema: expected \"{RUN_SCHEMA}\", got \"{}\"", raw.schema));
    }
    let grid = match TimeGrid::new(raw.grid.t0, raw.grid.t_end, raw.grid.steps) {
        Ok(g) => Some(g),
        Err(e) => {
            errs.push(format!("grid: {e}"));
            None
        }
    };
    let seed = over.seed.unwrap_or(raw.seed);
    let backend = over.backend.unwrap_or(raw.backend);
    if backend == BackendKind::Mc && raw.paths < 2 {
        errs.push(format!("paths: need at least 2, got {}", raw.paths));
    }

    let coeff_doc: Option<CoefficientDoc> = raw
        .coefficients
        .as_ref()
        .and_then(|v| sub_document("coefficients", v, base, &mut errs));
    let coeffs = coeff_doc.as_ref().and_then(|d| match d.build() {
        Ok(c) => Some(c),
        Err(e) => {
            errs.push(format!("coefficients: {e}"));
            None
        }
    });
    let weights_doc: Option<WeightsDoc> = raw
        .weights
        .as_ref()
        .and_then(|v| sub_document("weights", v, base, &mut errs));
    let weights = weights_doc.as_ref().and_then(|d| match d.build() {
        Ok(w) => Some(w),
        Err(e) => {
            errs.push(format!("weights: {e}"));
            None
        }
    });
    if let (Some(c), Some(w)) = (&coeffs, &weights) {
        if c.dims() != w.dims {
            errs.push(format!(
                "weights: dimensions (n={}, d={}) differ from the coefficients (n={}, d={})",
                w.dims.n,
                w.dims.d,
                c.dims().n,
                c.dims().d
            ));
        }
    }
    let lq_doc: Option<LqDoc> = raw.lq.as_ref().and_then(|v| sub_document("lq", v, base, &mut errs));
    let lq = lq_doc.as_ref().and_then(|d| match d.build() {
        Ok(p) => Some(p),
        Err(e) => {
            errs.push(format!("lq: {e}"));
            None
        }
    });

    let mut continuation = raw.continuation.clone();
    if let Some(b) = raw.features {
        continuation.regression.basis = b;
    }
    continuation.probe_seed = sub_seed(seed, "probes");
    if let Err(e) = continuation.validate() {
        errs.push(format!("continuation: {e}"));
    }
    let sampling = Sampling {
        budget: raw.sampling.budget,
        radius: raw.sampling.radius,
        far_radius: raw.sampling.far_radius,
        seed: sub_seed(seed, "sampling"),
    };
    if sampling.budget == 0 {
        errs.push("sampling.budget: must be at least 1".into());
    }
    if !(sampling.radius > 0.0 && sampling.far_radius > 0.0) {
        errs.push("sampling: radii must be positive".into());
    }
    if !(raw.delta_gap >= 0.0 && raw.delta_gap.is_finite()) {
        errs.push(format!("delta_gap: must be finite and >= 0, got {}", raw.delta_gap));
    }

    if let Some(c) = &coeffs {
        let Dimensions { n, d } = c.dims();
        check_len("x0", &raw.x0, n, &mut errs);
        check_len("perturbation.xi", &raw.perturbation.xi, n, &mut errs);
        check_len("perturbation.eta", &raw.perturbation.eta, n, &mut errs);
        if let Some(rows) = &raw.perturbation.eta_brownian {
            if rows.len() != n {
                errs.push(format!("perturbation.eta_brownian: expected {n} rows, got {}", rows.len()));
            } else if let Some(i) = rows.iter().position(|r| r.len() != d) {
                errs.push(format!(
                    "perturbation.eta_brownian: row {i} has {} columns, expected {d}",
                    rows[i].len()
                ));
            }
        }
    }
    if !errs.is_empty() {
        return Err(CliError::Validation(errs));
    }

    let orientation = raw.orientation.unwrap_or(Orientation::Standard);
    let resolved = serde_json::json!({
        "schema": RUN_SCHEMA,
        "grid": raw.grid,
        "backend": backend,
        "seed": seed,
        "paths": raw.paths,
        "coefficients": coeff_doc,
        "weights": weights_doc,
        "continuation": continuation,
        "sampling": sampling,
        "orientation": orientation,
        "perturbation": raw.perturbation,
        "x0": raw.x0,
        "lq": lq_doc,
        "delta_gap": raw.delta_gap,
    });
    Ok(Run {
        sha256,
        seed,
        grid: grid.expect("grid validated"),
        backend,
        paths: raw.paths,
        coeffs,
        weights,
        continuation,
        sampling,
        orientation,
        perturbation: raw.perturbation,
        x0: raw.x0,
        lq,
        delta_gap: raw.delta_gap,
        resolved,
    })
}

impl Run {
    pub fn backend(&self, d: usize) -> Result<Backend, CliError> {
        Ok(match self.backend {
            BackendKind::Tree => Backend::tree(self.grid, d)?,
            BackendKind::Mc => Backend::monte_carlo(sub_seed(self.seed, "simulation"), self.paths, self.grid, d)?,
        })
    }

    pub fn coefficients(&self) -> Result<&CoefficientSet, CliError> {
        self.coeffs
            .as_ref()
            .ok_or_else(|| CliError::Validation(vec!["coefficients: required by this command".into()]))
    }

    pub fn domination_weights(&self) -> Result<&DominationWeights, CliError> {
        self.weights
            .as_ref()
            .ok_or_else(|| CliError::Validation(vec!["weights: required by this command".into()]))
    }

    /// Terminal perturbation `eta + eta_brownian W_T`.
    pub fn terminal(&self, n: usize, d: usize) -> TerminalValue {
        let p = &self.perturbation;
        let constant = p.eta.clone().map_or(DVector::zeros(n), DVector::from_vec);
        let brownian = p
            .eta_brownian
            .as_ref()
            .map_or(DMatrix::zeros(n, d), |rows| DMatrix::from_fn(n, d, |i, j| rows[i][j]));
        TerminalValue { constant, brownian }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn sub_documents_load_from_relative_paths() {
        let tmp = tempfile::tempdir().unwrap();
        write(
            tmp.path(),
            "coeff.json",
            r#"{"schema": "mffbsde-coeff-v1", "kind": "example32", "k1": 2.0, "k2": 2.0}"#,
        );
        let cfg = write(
            tmp.path(),
            "run.json",
            r#"{"schema": "mffbsde-run-v1", "grid": {"steps": 4}, "coefficients": "coeff.json",
                "features": "poly1"}"#,
        );
        let run = load(&cfg, Overrides::default()).unwrap();
        assert!(run.coeffs.is_some());
        assert_eq!(run.continuation.regression.basis, Basis::Poly1);
        assert_eq!(run.resolved["coefficients"]["k1"], 2.0);
    }

    #[test]
    fn errors_are_collected_across_sections() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = write(
            tmp.path(),
            "run.json",
            r#"{"schema": "mffbsde-run-v1", "grid": {"steps": 0}, "coefficients": "missing.json",
                "continuation": {"tol": -1.0}, "delta_gap": -1.0}"#,
        );
        let Err(CliError::Validation(errs)) = load(&cfg, Overrides::default()) else {
            panic!("expected validation errors")
        };
        for part in ["grid", "coefficients", "continuation", "delta_gap"] {
            assert!(errs.iter().any(|e| e.starts_with(part)), "{part}: {errs:?}");
        }
    }

    #[test]
    fn seeds_derive_from_the_root() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = write(tmp.path(), "run.json", r#"{"schema": "mffbsde-run-v1", "grid": {"steps": 2}, "seed": 5}"#);
        let a = load(&cfg, Overrides::default()).unwrap();
        let b = load(
            &cfg,
            Overrides {
                seed: Some(6),
                backend: Some(BackendKind::Mc),
            },
        )
        .unwrap();
        assert_eq!(a.seed, 5);
        assert_eq!(b.seed, 6);
        assert_eq!(b.backend, BackendKind::Mc);
        assert_ne!(a.sampling.seed, b.sampling.seed);
        assert_ne!(a.continuation.probe_seed, b.continuation.probe_seed);
        assert_ne!(a.sampling.seed, a.continuation.probe_seed);
    }

    #[test]
    fn mismatched_weights_are_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = write(
            tmp.path(),
            "run.json",
            r#"{"schema": "mffbsde-run-v1", "grid": {"steps": 2},
                "coefficients": {"schema": "mffbsde-coeff-v1", "kind": "linear", "n": 1, "d": 1},
                "weights": {"case": "A", "mu": 0.5, "n": 2, "d": 1}}"#,
        );
        let Err(CliError::Validation(errs)) = load(&cfg, Overrides::default()) else {
            panic!("expected validation errors")
        };
        assert!(errs[0].starts_with("weights: dimensions"), "{errs:?}");
    }
}
