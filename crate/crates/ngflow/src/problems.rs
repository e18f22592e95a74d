//! Bundled experiment problems: the oscillatory regression target, the
//! Poisson forcing with known exact solution and Ritz reference energy, the
//! Burgers snapshot generator for model reduction, dataset assembly, and the
//! test-error metrics.

use crate::energy::{dirichlet_mask, dirichlet_mask_dx, EnergyError, EnergySpec, SupervisedL2Spec};
use crate::hilbert::QuadratureRule;
use crate::network::{NetworkError, NetworkParams};
use crate::scalar::{cast, Scalar};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProblemsError {
    #[error("Newton iteration for the implicit step did not converge at time index {time_index} (residual {residual:e})")]
    NewtonDiverged { time_index: usize, residual: f64 },
    #[error("dataset count mismatch: expected {expected} {what}, got {got}")]
    CountMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("H1 error is only defined for the 1D PDE test set")]
    H1NotApplicable,
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Energy(#[from] EnergyError),
}

/// `y(x) = e^{sin(k pi x)} + x^3 - x - 1`; zero at both endpoints, and
/// increasingly oscillatory with `k`.
pub fn oscillatory_target<T: Scalar>(k: u32, x: T) -> T {
    let kpi = cast::<T>(k as f64 * std::f64::consts::PI);
    (kpi * x).sin().exp() + x * x * x - x - T::one()
}

/// Spatial derivative of the oscillatory target.
pub fn oscillatory_target_dx<T: Scalar>(k: u32, x: T) -> T {
    let kpi = cast::<T>(k as f64 * std::f64::consts::PI);
    kpi * (kpi * x).cos() * (kpi * x).sin().exp() + cast::<T>(3.0) * x * x - T::one()
}

/// Forcing such that the oscillatory target solves `-u'' = g` on [0, 1]:
/// `g(x) = -((k pi)^2 e^{sin(k pi x)} (cos^2(k pi x) - sin(k pi x)) + 6x)`.
pub fn poisson_forcing<T: Scalar>(k: u32, x: T) -> T {
    let kpi = cast::<T>(k as f64 * std::f64::consts::PI);
    let s = (kpi * x).sin();
    let c = (kpi * x).cos();
    -(kpi * kpi * s.exp() * (c * c - s) + cast::<T>(6.0) * x)
}

/// High-accuracy reference value of the Ritz energy at the exact solution,
/// `1/2 int (u')^2 - int g u` on a 100001-node trapezoid rule.
pub fn exact_ritz_energy(k: u32) -> f64 {
    let n = 100_001;
    let rule = QuadratureRule::<f64>::trapezoid(n, 0.0, 1.0);
    let mut acc = 0.0;
    for i in 0..n {
        let x = rule.node_scalar(i);
        let u = oscillatory_target(k, x);
        let du = oscillatory_target_dx(k, x);
        acc += rule.weights[i] * (0.5 * du * du - poisson_forcing(k, x) * u);
    }
    acc
}

/// Parameters of the inviscid Burgers benchmark
/// `u_t + u u_x = source_coeff * e^{mu x}` on `[0,1] x [0,20]` with inflow
/// value 4.25 and initial state 1 away from the boundary.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BurgersSpec<T> {
    pub mu: T,
    pub nx: usize,
    pub nt: usize,
    pub dx: T,
    pub dt: T,
    pub source_coeff: T,
    pub inflow: T,
}

impl<T: Scalar> BurgersSpec<T> {
    pub fn standard(mu: T) -> Self {
        Self {
            mu,
            nx: 21,
            nt: 400,
            dx: cast(1.0 / 20.0),
            dt: cast(1.0 / 20.0),
            source_coeff: cast(0.02),
            inflow: cast(4.25),
        }
    }

    pub fn from_json(s: &str) -> Result<Self, ProblemsError> {
        serde_json::from_str(s).map_err(|e| ProblemsError::InvalidData(e.to_string()))
    }
}

/// Simulates the Burgers benchmark with a conservative first-order upwind
/// flux `f(u) = u^2 / 2` and backward-Euler time stepping (the 4.25 inflow
/// makes explicit stepping CFL-unstable at this grid). Returns all `nt + 1`
/// time levels. The implicit system is lower bidiagonal and solved by Newton
/// iteration to residual 1e-10.
pub fn burgers_simulate<T: Scalar>(spec: &BurgersSpec<T>) -> Result<Vec<Vec<T>>, ProblemsError> {
    let nx = spec.nx;
    let r = spec.dt / spec.dx;
    let half = cast::<T>(0.5);
    let tol = cast::<T>(1e-10);

    let source: Vec<T> = (0..nx)
        .map(|i| spec.source_coeff * (spec.mu * spec.dx * cast::<T>(i as f64)).exp())
        .collect();

    let mut levels = Vec::with_capacity(spec.nt + 1);
    let mut u: Vec<T> = (0..nx)
        .map(|i| if i == 0 { spec.inflow } else { T::one() })
        .collect();
    levels.push(u.clone());

    for step in 1..=spec.nt {
        let prev = u.clone();
        u[0] = spec.inflow;
        let mut converged = false;
        let mut residual_norm = T::infinity();
        for _newton in 0..50 {
            // residual_i = u_i - prev_i + r (u_i^2 - u_{i-1}^2)/2 - dt s_i
            let mut res = vec![T::zero(); nx];
            residual_norm = T::zero();
            for i in 1..nx {
                res[i] = u[i] - prev[i] + r * half * (u[i] * u[i] - u[i - 1] * u[i - 1])
                    - spec.dt * source[i];
                residual_norm = residual_norm.max(res[i].abs());
            }
            if residual_norm <= tol {
                converged = true;
                break;
            }
            // lower-bidiagonal Newton solve by forward substitution
            let mut delta = vec![T::zero(); nx];
            for i in 1..nx {
                let diag = T::one() + r * u[i];
                let sub = -r * u[i - 1];
                delta[i] = (-res[i] - sub * delta[i - 1]) / diag;
            }
            for i in 1..nx {
                u[i] += delta[i];
            }
        }
        if !converged {
            return Err(ProblemsError::NewtonDiverged {
                time_index: step,
                residual: residual_norm.to_f64().unwrap_or(f64::NAN),
            });
        }
        levels.push(u.clone());
    }
    Ok(levels)
}

/// One dataset row of the model-reduction problem.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MorRow<T> {
    pub x: T,
    pub t: T,
    pub mu: T,
    pub u: T,
}

/// Snapshot dataset for the Burgers model-reduction experiment: solutions at
/// every 20th time step over all spatial nodes, for each parameter value.
#[derive(Clone, Debug)]
pub struct MorDataset<T> {
    pub train: Vec<MorRow<T>>,
    pub test: Vec<MorRow<T>>,
    /// One batch per training parameter value, in parameter order.
    pub batches: Vec<Vec<usize>>,
}

const SNAPSHOT_STRIDE: usize = 20;

fn snapshot_rows<T: Scalar>(spec: &BurgersSpec<T>) -> Result<Vec<MorRow<T>>, ProblemsError> {
    let levels = burgers_simulate(spec)?;
    let mut rows = Vec::with_capacity((spec.nt / SNAPSHOT_STRIDE) * spec.nx);
    let mut step = SNAPSHOT_STRIDE;
    while step <= spec.nt {
        let t = spec.dt * cast::<T>(step as f64);
        for i in 0..spec.nx {
            rows.push(MorRow {
                x: spec.dx * cast::<T>(i as f64),
                t,
                mu: spec.mu,
                u: levels[step][i],
            });
        }
        step += SNAPSHOT_STRIDE;
    }
    Ok(rows)
}

/// Builds the snapshot dataset from explicit parameter lists. Batches group
/// the training rows per parameter value.
pub fn make_mor_dataset<T: Scalar>(
    train_mus: &[T],
    test_mus: &[T],
    template: &BurgersSpec<T>,
) -> Result<MorDataset<T>, ProblemsError> {
    if train_mus.iter().any(|m| test_mus.contains(m)) {
        return Err(ProblemsError::InvalidData(
            "train/test parameter overlap".into(),
        ));
    }
    let rows_per_mu = (template.nt / SNAPSHOT_STRIDE) * template.nx;
    let mut train = Vec::with_capacity(train_mus.len() * rows_per_mu);
    let mut batches = Vec::with_capacity(train_mus.len());
    for &mu in train_mus {
        let start = train.len();
        let spec = BurgersSpec { mu, ..template.clone() };
        train.extend(snapshot_rows(&spec)?);
        if train.len() - start != rows_per_mu {
            return Err(ProblemsError::CountMismatch {
                what: "rows per parameter",
                expected: rows_per_mu,
                got: train.len() - start,
            });
        }
        batches.push((start..train.len()).collect());
    }
    let mut test = Vec::with_capacity(test_mus.len() * rows_per_mu);
    for &mu in test_mus {
        let spec = BurgersSpec { mu, ..template.clone() };
        test.extend(snapshot_rows(&spec)?);
    }
    Ok(MorDataset {
        train,
        test,
        batches,
    })
}

/// The benchmark dataset: 11 uniformly spaced training parameters in
/// [0.015, 0.030] and 6 seeded-random test parameters; 4620 training rows in
/// 11 batches of 420, and 2520 test rows. Counts are hard assertions.
pub fn mor_dataset_standard(test_seed: u64) -> Result<MorDataset<f64>, ProblemsError> {
    let train_mus: Vec<f64> = (0..11).map(|j| 0.015 + 0.0015 * j as f64).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(test_seed);
    let mut test_mus = Vec::with_capacity(6);
    while test_mus.len() < 6 {
        let mu: f64 = rng.gen_range(0.015..0.030);
        if train_mus.iter().chain(&test_mus).all(|&m| (m - mu).abs() > 1e-9) {
            test_mus.push(mu);
        }
    }
    let ds = make_mor_dataset(&train_mus, &test_mus, &BurgersSpec::standard(0.0))?;
    for (what, expected, got) in [
        ("training rows", 4620, ds.train.len()),
        ("test rows", 2520, ds.test.len()),
        ("batches", 11, ds.batches.len()),
    ] {
        if got != expected {
            return Err(ProblemsError::CountMismatch {
                what,
                expected,
                got,
            });
        }
    }
    for b in &ds.batches {
        if b.len() != 420 {
            return Err(ProblemsError::CountMismatch {
                what: "batch size",
                expected: 420,
                got: b.len(),
            });
        }
    }
    Ok(ds)
}

pub fn mor_rows_to_csv<T: Scalar>(rows: &[MorRow<T>]) -> String {
    let mut out = String::new();
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.x, r.t, r.mu, r.u));
    }
    out
}

pub fn mor_rows_from_csv<T: Scalar>(s: &str) -> Result<Vec<MorRow<T>>, ProblemsError> {
    let mut rows = Vec::new();
    for (lineno, line) in s.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<f64> = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| ProblemsError::InvalidData(format!("line {}: {e}", lineno + 1)))?;
        if fields.len() != 4 {
            return Err(ProblemsError::InvalidData(format!(
                "line {}: expected x,t,mu,u",
                lineno + 1
            )));
        }
        rows.push(MorRow {
            x: cast(fields[0]),
            t: cast(fields[1]),
            mu: cast(fields[2]),
            u: cast(fields[3]),
        });
    }
    Ok(rows)
}

/// Network inputs for one snapshot row. Raw coordinates span very different
/// scales (t up to 20, mu around 0.02), which saturates a tanh first layer;
/// the normalized variant maps them into O(1) ranges and is the default for
/// training and testing.
pub fn mor_features<T: Scalar>(x: T, t: T, mu: T, normalize: bool) -> Vec<T> {
    if normalize {
        vec![
            x,
            t / cast::<T>(20.0),
            (mu - cast::<T>(0.0225)) / cast::<T>(0.0075),
        ]
    } else {
        vec![x, t, mu]
    }
}

/// Test data paired with the metric it supports.
#[derive(Clone, Debug)]
pub enum TestSet<T> {
    /// Point cloud with targets and weights (supervised problems).
    Points {
        inputs: Vec<Vec<T>>,
        targets: Vec<T>,
        weights: Vec<T>,
    },
    /// 1D PDE test grid with the exact solution and its derivative; the
    /// model is evaluated through the Dirichlet mask.
    Ritz1D {
        rule: QuadratureRule<T>,
        u: Vec<T>,
        u_dx: Vec<T>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorMetric {
    L2,
    H1,
}

/// Measure-weighted error of the trained model on a test set: square root of
/// the weighted mean squared error (L2), or of the integrated squared
/// derivative mismatch (H1, PDE case only).
pub fn test_errors<T: Scalar>(
    params: &NetworkParams<T>,
    set: &TestSet<T>,
    metric: ErrorMetric,
) -> Result<T, ProblemsError> {
    match (set, metric) {
        (TestSet::Points { inputs, targets, weights }, ErrorMetric::L2) => {
            let mut acc = T::zero();
            for ((x, &y), &w) in inputs.iter().zip(targets).zip(weights) {
                let r = params.forward(x)? - y;
                acc += w * r * r;
            }
            Ok(acc.sqrt())
        }
        (TestSet::Points { .. }, ErrorMetric::H1) => Err(ProblemsError::H1NotApplicable),
        (TestSet::Ritz1D { rule, u, u_dx }, metric) => {
            let mut acc = T::zero();
            for i in 0..rule.len() {
                let x = rule.node_scalar(i);
                let (z, t) = params.hidden_state(&rule.nodes[i], Some(0))?;
                let n_val: T = params.closing.iter().zip(&z).map(|(&c, &z)| c * z).sum();
                let n_dx: T = params
                    .closing
                    .iter()
                    .zip(t.as_ref().unwrap())
                    .map(|(&c, &t)| c * t)
                    .sum();
                let r = match metric {
                    ErrorMetric::L2 => dirichlet_mask(x) * n_val - u[i],
                    ErrorMetric::H1 => {
                        dirichlet_mask_dx(x) * n_val + dirichlet_mask(x) * n_dx - u_dx[i]
                    }
                };
                acc += rule.weights[i] * r * r;
            }
            Ok(acc.sqrt())
        }
    }
}

/// Supervised regression problem on the oscillatory target: training
/// abscissae i.i.d. uniform with a fixed seed, uniform-grid test set.
pub fn sl_problem(
    k: u32,
    m_train: usize,
    m_test: usize,
    dataset_seed: u64,
) -> (EnergySpec<f64>, TestSet<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(dataset_seed);
    let dataset: Vec<(Vec<f64>, f64)> = (0..m_train)
        .map(|_| {
            let x: f64 = rng.gen_range(0.0..1.0);
            (vec![x], oscillatory_target(k, x))
        })
        .collect();
    let energy = EnergySpec::Supervised(SupervisedL2Spec::new(dataset).expect("non-empty"));
    let inputs: Vec<Vec<f64>> = (0..m_test)
        .map(|i| vec![i as f64 / (m_test - 1) as f64])
        .collect();
    let targets: Vec<f64> = inputs.iter().map(|x| oscillatory_target(k, x[0])).collect();
    let weights = vec![1.0 / m_test as f64; m_test];
    (
        energy,
        TestSet::Points {
            inputs,
            targets,
            weights,
        },
    )
}

/// Ritz-energy Poisson problem: trapezoid training rule and a uniformly
/// spaced test grid carrying the exact solution and its derivative.
pub fn ritz_problem(k: u32, n_train: usize, n_test: usize) -> (EnergySpec<f64>, TestSet<f64>) {
    use crate::energy::RitzPoisson1DSpec;
    let rule = QuadratureRule::<f64>::trapezoid(n_train, 0.0, 1.0);
    let energy = EnergySpec::Ritz(
        RitzPoisson1DSpec::new(move |x: f64| poisson_forcing(k, x), rule).expect("valid rule"),
    );
    let test_rule = QuadratureRule::<f64>::trapezoid(n_test, 0.0, 1.0);
    let u: Vec<f64> = (0..n_test)
        .map(|i| oscillatory_target(k, test_rule.node_scalar(i)))
        .collect();
    let u_dx: Vec<f64> = (0..n_test)
        .map(|i| oscillatory_target_dx(k, test_rule.node_scalar(i)))
        .collect();
    (
        energy,
        TestSet::Ritz1D {
            rule: test_rule,
            u,
            u_dx,
        },
    )
}

/// Supervised energy, batches, and test set for the model-reduction problem.
pub fn mor_problem(
    dataset: &MorDataset<f64>,
    normalize: bool,
) -> (EnergySpec<f64>, Vec<Vec<usize>>, TestSet<f64>) {
    let train: Vec<(Vec<f64>, f64)> = dataset
        .train
        .iter()
        .map(|r| (mor_features(r.x, r.t, r.mu, normalize), r.u))
        .collect();
    let energy = EnergySpec::Supervised(SupervisedL2Spec::new(train).expect("non-empty"));
    let inputs: Vec<Vec<f64>> = dataset
        .test
        .iter()
        .map(|r| mor_features(r.x, r.t, r.mu, normalize))
        .collect();
    let targets: Vec<f64> = dataset.test.iter().map(|r| r.u).collect();
    let weights = vec![1.0 / targets.len() as f64; targets.len()];
    (
        energy,
        dataset.batches.clone(),
        TestSet::Points {
            inputs,
            targets,
            weights,
        },
    )
}
