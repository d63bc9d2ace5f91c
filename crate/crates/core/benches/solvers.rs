//! Single-thread versus pooled runs of the data-parallel kernels.
//! Without the `parallel` feature only the sequential variant is measured.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mffbsde::backward::{solve_mf_bsde, CoefficientDriver};
use mffbsde::conditions::{check_monotonicity, Orientation, Sampling};
use mffbsde::continuation::{solve_perturbed, ContinuationConfig, Mode};
use mffbsde::forward::{solve_mf_sde, CoefficientDynamics};
use mffbsde::lq::TerminalValue;
use mffbsde::model::{example32, Case, CoefficientSet, Dimensions, DominationWeights, PerturbationTriple, TimeGrid};
use mffbsde::noise::Backend;
use nalgebra::{DMatrix, DVector};

fn mc(paths: usize, steps: usize) -> Backend {
    Backend::monte_carlo(7, paths, TimeGrid::new(0.0, 1.0, steps).unwrap(), 1).unwrap()
}

fn pert(b: &Backend) -> PerturbationTriple {
    let mut p = PerturbationTriple::zeros(Dimensions { n: 1, d: 1 }, b.layout(), b.grid());
    p.xi = vec![1.0];
    p.eta = TerminalValue {
        constant: DVector::zeros(1),
        brownian: DMatrix::from_element(1, 1, 1.0),
    }
    .realize(b);
    p
}

/// Runs `f` once per thread setting under the same benchmark id.
fn variants(c: &mut Criterion, group: &str, f: impl Fn() + Sync) {
    let mut g = c.benchmark_group(group);
    g.sample_size(10);
    #[cfg(feature = "parallel")]
    {
        let pools = [
            ("1 thread", rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap()),
            ("all threads", rayon::ThreadPoolBuilder::new().build().unwrap()),
        ];
        for (label, pool) in &pools {
            g.bench_function(BenchmarkId::from_parameter(label), |b| b.iter(|| pool.install(&f)));
        }
    }
    #[cfg(not(feature = "parallel"))]
    g.bench_function(BenchmarkId::from_parameter("sequential"), |b| b.iter(&f));
    g.finish();
}

fn forward(c: &mut Criterion) {
    let b = mc(100_000, 16);
    let coeffs = CoefficientSet::example32(2.0, 2.0);
    let dynamics = CoefficientDynamics {
        coeffs: &coeffs,
        grid: b.grid(),
        frozen: None,
    };
    variants(c, "forward sde, 100k paths", || {
        solve_mf_sde(&dynamics, &[1.0], &b).unwrap();
    });
}

fn backward(c: &mut Criterion) {
    let b = mc(100_000, 16);
    let coeffs = CoefficientSet::example32(2.0, 2.0);
    let driver = CoefficientDriver {
        coeffs: &coeffs,
        grid: b.grid(),
        frozen: None,
    };
    let terminal = pert(&b).eta;
    variants(c, "backward sde, 100k paths", || {
        solve_mf_bsde(&driver, &terminal, &b, None).unwrap();
    });
}

fn conditions(c: &mut Criterion) {
    let b = mc(1_000, 8);
    let coeffs = CoefficientSet::example32(2.0, 2.0);
    let w = DominationWeights::example32(Case::A, 1.0 / 6.0);
    let s = Sampling::default();
    variants(c, "monotonicity check, 10^4 samples", || {
        check_monotonicity(&coeffs, &w, &b, &s, Orientation::Standard).unwrap();
    });
}

fn continuation(c: &mut Criterion) {
    let b = mc(5_000, 8);
    let (coeffs, mu, _) = example32(2.0, 2.0).unwrap();
    let w = DominationWeights::example32(Case::A, mu);
    let p = pert(&b);
    let cfg = ContinuationConfig {
        mode: Mode::Direct,
        max_iters: 1000,
        ..ContinuationConfig::default()
    };
    variants(c, "direct continuation, 5k paths", || {
        solve_perturbed(&coeffs, &w, &p, &cfg, &b).unwrap();
    });
}

criterion_group!(benches, forward, backward, conditions, continuation);
criterion_main!(benches);
