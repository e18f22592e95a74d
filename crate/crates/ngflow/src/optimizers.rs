//! Training loops: the natural-gradient step with a regularized flow-matrix
//! solve and Armijo backtracking, the Adam baseline with a decaying step
//! schedule, stopping rules, and tangent-alignment diagnostics.
//!
//! One natural-gradient step solves `(G + lambda I) delta = grad_theta E`
//! over the active parameters, with `lambda` chosen from the largest diagonal
//! entry of the flow matrix `G` by a piecewise table, and the step length
//! picked by halving from `gamma_0` until the Armijo condition
//! `E(theta - gamma delta) <= E(theta) - c gamma |delta|^2` holds.

use crate::energy::{EnergyError, EnergySpec};
use crate::linalg::{
    solve_spd_regularized, solve_spd_regularized_dual, sym_eig, LinalgError, SymMatrix,
};
use crate::network::{NetworkError, NetworkParams};
use crate::scalar::{cast, Scalar};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("flow-matrix solve failed after doubling lambda once: {0}")]
    SolverFailed(LinalgError),
}

/// Piecewise regularization rule: `lambda_1` below the first threshold,
/// `lambda_j` on `[x_{j-1}, x_j)`, and the last value above the top
/// threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaTable<T> {
    pub thresholds: Vec<T>,
    pub values: Vec<T>,
}

impl<T: Scalar> LambdaTable<T> {
    pub fn new(thresholds: Vec<T>, values: Vec<T>) -> Self {
        assert_eq!(values.len(), thresholds.len() + 1, "need one more value");
        assert!(
            thresholds.windows(2).all(|w| w[0] < w[1]),
            "thresholds must be strictly increasing"
        );
        assert!(
            values.iter().all(|&v| v > T::zero()),
            "lambda values must be positive"
        );
        Self { thresholds, values }
    }

    /// Thresholds `10^{j-1}`, values `5 x 10^{j-6}`, extended one step past
    /// the table to 50 for very large diagonals.
    pub fn standard() -> Self {
        Self::new(
            (0..6).map(|j| cast::<T>(10f64.powi(j))).collect(),
            (1..=7).map(|j| cast::<T>(5.0 * 10f64.powi(j - 6))).collect(),
        )
    }

    /// Lighter regularization used by the model-reduction experiments:
    /// values `1 x 10^{j-8}`, extended to `10^{-1}`.
    pub fn mor() -> Self {
        Self::new(
            (0..6).map(|j| cast::<T>(10f64.powi(j))).collect(),
            (1..=7).map(|j| cast::<T>(10f64.powi(j - 8))).collect(),
        )
    }
}

/// Table lookup on the largest flow-matrix diagonal entry.
pub fn lambda_rule<T: Scalar>(g_mm: T, table: &LambdaTable<T>) -> T {
    debug_assert!(g_mm >= T::zero());
    for (i, &x) in table.thresholds.iter().enumerate() {
        if g_mm < x {
            return table.values[i];
        }
    }
    *table.values.last().expect("non-empty table")
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
#[serde(bound = "T: Scalar")]
pub struct NgfConfig<T: Scalar> {
    pub gamma0: T,
    pub armijo_c: T,
    pub max_halvings: usize,
    pub lambda_table: LambdaTable<T>,
    pub max_epochs: usize,
    /// Optional cap on flow-matrix diagonal entries: tangent directions whose
    /// diagonal exceeds the cap are excluded from the step. Off by default.
    pub diag_cap: Option<T>,
}

impl<T: Scalar> Default for NgfConfig<T> {
    fn default() -> Self {
        Self {
            gamma0: cast(10.0),
            armijo_c: cast(2e-4),
            max_halvings: 40,
            lambda_table: LambdaTable::standard(),
            max_epochs: 1000,
            diag_cap: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
#[serde(bound = "T: Scalar")]
pub struct AdamConfig<T: Scalar> {
    pub tau0: T,
    /// Per-iteration decay: `tau_i = tau_{i-1} / (1 + decay_rate * i)`.
    pub decay_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub max_iters: usize,
    /// Starting index of the step schedule. The schedule is indexed by the
    /// global optimization iteration, so interlaced Adam phases continue the
    /// decay instead of restarting at `tau0`.
    pub schedule_offset: usize,
}

impl<T: Scalar> Default for AdamConfig<T> {
    fn default() -> Self {
        Self {
            tau0: cast(5e-3),
            decay_rate: cast(1e-8),
            beta1: cast(0.9),
            beta2: cast(0.999),
            eps: cast(1e-8),
            max_iters: 10_000,
            schedule_offset: 0,
        }
    }
}

/// Stopping tolerances: absolute early termination on `|E_k|`, and loss
/// saturation comparing `E_k` against `E_{k - lookback}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
#[serde(bound = "T: Scalar")]
pub struct StopCriteria<T: Scalar> {
    pub tol_abs: Option<T>,
    pub sat_abs: T,
    pub sat_rel: T,
    pub lookback: usize,
}

impl<T: Scalar> Default for StopCriteria<T> {
    fn default() -> Self {
        Self {
            tol_abs: None,
            sat_abs: cast(1e-7),
            sat_rel: cast(5e-3),
            lookback: 5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopMode {
    AbsTol,
    Saturation,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopFlag {
    EarlyTerminated,
    Saturated,
    MaxIters,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainEvent {
    LambdaBump,
    ArmijoFailure,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecordEntry<T> {
    pub epoch: usize,
    pub batch_losses: Vec<T>,
    pub mean_loss: T,
    pub gamma: T,
    pub lambda: T,
    pub events: Vec<TrainEvent>,
}

/// Per-epoch loss history of one optimizer run plus its stop flag.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainRecord<T> {
    pub entries: Vec<RecordEntry<T>>,
    pub flag: StopFlag,
}

impl<T: Scalar> TrainRecord<T> {
    pub fn losses(&self) -> Vec<T> {
        self.entries.iter().map(|e| e.mean_loss).collect()
    }

    pub fn final_loss(&self) -> Option<T> {
        self.entries.last().map(|e| e.mean_loss)
    }

    pub fn epochs(&self) -> usize {
        self.entries.len()
    }
}

/// Checks the stopping rules against the loss history.
///
/// Absolute: `|E_k| <= tol_abs`. Saturation (inactive until more than
/// `lookback` epochs exist): `|E_k - E_khat| < sat_abs` or
/// `|E_k - E_khat| / |E_khat| < sat_rel` with `khat = k - lookback`.
pub fn check_stopping<T: Scalar>(
    losses: &[T],
    criteria: &StopCriteria<T>,
    mode: StopMode,
) -> Option<StopFlag> {
    assert!(!losses.is_empty(), "loss history must be non-empty");
    let k = losses.len();
    let ek = losses[k - 1];
    if matches!(mode, StopMode::AbsTol | StopMode::Both) {
        if let Some(tol) = criteria.tol_abs {
            if ek.abs() <= tol {
                return Some(StopFlag::EarlyTerminated);
            }
        }
    }
    if matches!(mode, StopMode::Saturation | StopMode::Both) && k > criteria.lookback {
        let ehat = losses[k - 1 - criteria.lookback];
        let diff = (ek - ehat).abs();
        if diff < criteria.sat_abs
            || (ehat != T::zero() && diff / ehat.abs() < criteria.sat_rel)
        {
            return Some(StopFlag::Saturated);
        }
    }
    None
}

/// An accepted backtracking step.
#[derive(Clone, Debug)]
pub struct ArmijoAccept<T> {
    pub gamma: T,
    pub params: NetworkParams<T>,
    pub loss: T,
}

/// Halves the step length from `gamma0` until
/// `E(theta - gamma delta) <= E(theta) - c gamma |delta|^2`. Returns `None`
/// when every trial fails; callers treat that as a saturation signal.
pub fn armijo_search<T: Scalar>(
    energy: &EnergySpec<T>,
    params: &NetworkParams<T>,
    batch: &[usize],
    delta: &[T],
    entry_loss: T,
    gamma0: T,
    c: T,
    max_halvings: usize,
) -> Result<Option<ArmijoAccept<T>>, TrainError> {
    let layout = params.active_layout();
    let norm2: T = delta.iter().map(|&d| d * d).sum();
    let mut gamma = gamma0;
    for _ in 0..=max_halvings {
        let candidate = params.with_active_delta(&layout, delta, -gamma);
        let loss = energy.value(&candidate, batch)?;
        if loss <= entry_loss - c * gamma * norm2 {
            return Ok(Some(ArmijoAccept {
                gamma,
                params: candidate,
                loss,
            }));
        }
        gamma = gamma / cast::<T>(2.0);
    }
    Ok(None)
}

/// Result of one natural-gradient step on one batch.
#[derive(Clone, Debug)]
pub enum StepOutcome<T> {
    Accepted(NgfStepInfo<T>),
    /// Every Armijo trial failed; parameters unchanged.
    ArmijoFailed { entry_loss: T, lambda: T },
}

#[derive(Clone, Debug)]
pub struct NgfStepInfo<T> {
    pub params: NetworkParams<T>,
    pub gamma: T,
    pub lambda: T,
    pub entry_loss: T,
    pub new_loss: T,
    pub step_norm2: T,
    pub grad_dot_delta: T,
    pub lambda_bumped: bool,
}

/// One step of Algorithm: assemble the flow matrix on the active set, pick
/// `lambda` from its largest diagonal entry, solve the regularized system,
/// and apply the Armijo-accepted update to the active parameters only.
pub fn ngf_step<T: Scalar>(
    energy: &EnergySpec<T>,
    params: &NetworkParams<T>,
    batch: &[usize],
    cfg: &NgfConfig<T>,
) -> Result<StepOutcome<T>, TrainError> {
    let data = energy.batch_data(params, batch)?;
    let entry_loss = data.loss;
    if !entry_loss.is_finite() {
        return Err(TrainError::NonFiniteLoss { epoch: 0 });
    }
    let grad = energy.grad_from_data(&data);
    let diag = energy.flow_diagonal(&data);

    // Optional subspace reduction: drop hyper-sensitive tangent directions.
    let keep: Option<Vec<usize>> = cfg.diag_cap.map(|cap| {
        let kept: Vec<usize> = (0..data.n_active).filter(|&i| diag[i] <= cap).collect();
        if kept.is_empty() {
            (0..data.n_active).collect()
        } else {
            kept
        }
    });

    let g_mm = match &keep {
        None => diag.iter().fold(T::zero(), |m, &v| m.max(v)),
        Some(k) => k.iter().fold(T::zero(), |m, &i| m.max(diag[i])),
    };
    let mut lambda = lambda_rule(g_mm, &cfg.lambda_table);
    let mut lambda_bumped = false;

    // The flow matrix is a Gramian of `batch_len` tangent rows; when the
    // batch is smaller than the active set the regularized solve goes
    // through the (equivalent) dual system without assembling the full
    // Gramian. The assembled path stays as written for the capped variant
    // and serves as the reference route in the tests.
    let use_dual = keep.is_none() && batch.len() < data.n_active;
    let delta: Vec<T> = if use_dual {
        let b_rows = energy.scaled_tangent_rows(&data);
        match solve_spd_regularized_dual(&b_rows, data.n_active, lambda, &grad) {
            Ok(d) => d,
            Err(LinalgError::NotPositiveDefinite { .. }) => {
                lambda = lambda * cast::<T>(2.0);
                lambda_bumped = true;
                solve_spd_regularized_dual(&b_rows, data.n_active, lambda, &grad)
                    .map_err(TrainError::SolverFailed)?
            }
            Err(e) => return Err(e.into()),
        }
    } else {
        let g = energy.flow_from_data(&data, keep.as_deref());
        let rhs: Vec<T> = match &keep {
            None => grad.clone(),
            Some(k) => k.iter().map(|&i| grad[i]).collect(),
        };
        let delta_reduced = match solve_spd_regularized(&g, lambda, &rhs) {
            Ok(d) => d,
            Err(LinalgError::NotPositiveDefinite { .. }) => {
                // roundoff can leave G + lambda I marginally indefinite for
                // tiny lambda; one doubling is recorded in the train log
                lambda = lambda * cast::<T>(2.0);
                lambda_bumped = true;
                solve_spd_regularized(&g, lambda, &rhs).map_err(TrainError::SolverFailed)?
            }
            Err(e) => return Err(e.into()),
        };
        match &keep {
            None => delta_reduced,
            Some(k) => {
                let mut full = vec![T::zero(); data.n_active];
                for (pos, &i) in k.iter().enumerate() {
                    full[i] = delta_reduced[pos];
                }
                full
            }
        }
    };

    let grad_dot_delta: T = grad.iter().zip(&delta).map(|(&g, &d)| g * d).sum();
    let grad_norm2: T = grad.iter().map(|&g| g * g).sum();
    debug_assert!(
        grad_norm2 == T::zero() || grad_dot_delta > T::zero(),
        "regularized step must be a descent direction"
    );

    match armijo_search(
        energy,
        params,
        batch,
        &delta,
        entry_loss,
        cfg.gamma0,
        cfg.armijo_c,
        cfg.max_halvings,
    )? {
        Some(accept) => Ok(StepOutcome::Accepted(NgfStepInfo {
            params: accept.params,
            gamma: accept.gamma,
            lambda,
            entry_loss,
            new_loss: accept.loss,
            step_norm2: delta.iter().map(|&d| d * d).sum(),
            grad_dot_delta,
            lambda_bumped,
        })),
        None => Ok(StepOutcome::ArmijoFailed { entry_loss, lambda }),
    }
}

/// Epoch loop of natural-gradient training over the given batches.
///
/// Per epoch, the pre-step loss of each batch is accumulated and averaged
/// into `E_k`; stopping is decided on the `E_k` history. A failed Armijo
/// search saturates the run at the end of the epoch.
pub fn run_ngf<T: Scalar>(
    energy: &EnergySpec<T>,
    params0: &NetworkParams<T>,
    batches: &[Vec<usize>],
    cfg: &NgfConfig<T>,
    criteria: &StopCriteria<T>,
    mode: StopMode,
) -> Result<(NetworkParams<T>, TrainRecord<T>), TrainError> {
    assert!(!batches.is_empty(), "need at least one batch");
    let mut params = params0.clone();
    let mut entries: Vec<RecordEntry<T>> = Vec::new();
    let mut flag = StopFlag::MaxIters;
    let nb = cast::<T>(batches.len() as f64);

    'epochs: for epoch in 1..=cfg.max_epochs {
        let mut batch_losses = Vec::with_capacity(batches.len());
        let mut gamma = T::zero();
        let mut lambda = T::zero();
        let mut events = Vec::new();
        let mut armijo_failed = false;
        for batch in batches {
            match ngf_step(energy, &params, batch, cfg)? {
                StepOutcome::Accepted(info) => {
                    batch_losses.push(info.entry_loss);
                    gamma = info.gamma;
                    lambda = info.lambda;
                    if info.lambda_bumped {
                        events.push(TrainEvent::LambdaBump);
                    }
                    params = info.params;
                }
                StepOutcome::ArmijoFailed { entry_loss, lambda: l } => {
                    batch_losses.push(entry_loss);
                    lambda = l;
                    events.push(TrainEvent::ArmijoFailure);
                    armijo_failed = true;
                }
            }
        }
        let mean_loss = batch_losses.iter().copied().sum::<T>() / nb;
        if !mean_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch });
        }
        entries.push(RecordEntry {
            epoch,
            batch_losses,
            mean_loss,
            gamma,
            lambda,
            events,
        });
        let losses: Vec<T> = entries.iter().map(|e| e.mean_loss).collect();
        if let Some(f) = check_stopping(&losses, criteria, mode) {
            flag = f;
            break 'epochs;
        }
        if armijo_failed {
            flag = StopFlag::Saturated;
            break 'epochs;
        }
    }
    Ok((params, TrainRecord { entries, flag }))
}

/// Adam over the active parameters with the decaying step schedule
/// `tau_i = tau_{i-1} / (1 + decay_rate * i)`, same epoch/stopping structure
/// as the natural-gradient loop.
pub fn run_adam<T: Scalar>(
    energy: &EnergySpec<T>,
    params0: &NetworkParams<T>,
    batches: &[Vec<usize>],
    cfg: &AdamConfig<T>,
    criteria: &StopCriteria<T>,
    mode: StopMode,
) -> Result<(NetworkParams<T>, TrainRecord<T>), TrainError> {
    assert!(!batches.is_empty(), "need at least one batch");
    let mut params = params0.clone();
    let layout = params.active_layout();
    let n = layout.count();
    let mut m = vec![T::zero(); n];
    let mut v = vec![T::zero(); n];
    let one = T::one();
    // advance the schedule to the configured global-iteration offset
    let mut tau = cfg.tau0;
    for i in 1..=cfg.schedule_offset as u64 {
        tau = tau / (one + cfg.decay_rate * cast::<T>(i as f64));
    }
    let mut step: u64 = 0;
    let nb = cast::<T>(batches.len() as f64);

    let mut entries: Vec<RecordEntry<T>> = Vec::new();
    let mut flag = StopFlag::MaxIters;
    'epochs: for epoch in 1..=cfg.max_iters {
        let mut batch_losses = Vec::with_capacity(batches.len());
        for batch in batches {
            let (loss, grad) = energy.value_and_grad(&params, batch)?;
            batch_losses.push(loss);
            step += 1;
            tau = tau
                / (one + cfg.decay_rate * cast::<T>((cfg.schedule_offset as u64 + step) as f64));
            let bc1 = one - cfg.beta1.powi(step as i32);
            let bc2 = one - cfg.beta2.powi(step as i32);
            let mut delta = vec![T::zero(); n];
            for i in 0..n {
                m[i] = cfg.beta1 * m[i] + (one - cfg.beta1) * grad[i];
                v[i] = cfg.beta2 * v[i] + (one - cfg.beta2) * grad[i] * grad[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                delta[i] = mhat / (vhat.sqrt() + cfg.eps);
            }
            params = params.with_active_delta(&layout, &delta, -tau);
        }
        let mean_loss = batch_losses.iter().copied().sum::<T>() / nb;
        if !mean_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch });
        }
        entries.push(RecordEntry {
            epoch,
            batch_losses,
            mean_loss,
            gamma: tau,
            lambda: T::zero(),
            events: Vec::new(),
        });
        let losses: Vec<T> = entries.iter().map(|e| e.mean_loss).collect();
        if let Some(f) = check_stopping(&losses, criteria, mode) {
            flag = f;
            break 'epochs;
        }
    }
    Ok((params, TrainRecord { entries, flag }))
}

/// Alignment diagnostics from the spectral decomposition of the flow matrix.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TangentDiagnostics<T> {
    /// Norm of the tangent-space projection of the ambient energy gradient.
    pub proj_norm: T,
    /// Upper-bound proxy for the alignment constant; requires a nonnegative
    /// energy value.
    pub c_star: Option<T>,
    /// `min_i s_i^2 / (lambda^2 + s_i^2)` over the kept spectrum.
    pub c5: Option<T>,
    pub rank: usize,
    pub s_max: T,
    pub s_min_pos: Option<T>,
}

/// Diagnoses how well the tangent space sees the ambient gradient: decompose
/// `G = V S^2 V^T`, project the theta-gradient through `S^{-1} V^T`
/// (restricted to singular values above `rank_tol * s_max`), and report the
/// projection norm together with the derived constants. Pure observer; never
/// alters the training path.
pub fn tangent_diagnostics<T: Scalar>(
    g: &SymMatrix<T>,
    grad_theta: &[T],
    energy_value: T,
    alpha: T,
    rank_tol: T,
    lambda: T,
) -> Result<TangentDiagnostics<T>, TrainError> {
    assert!(alpha > T::zero());
    let eig = sym_eig(g)?;
    let n = g.dim();
    let s: Vec<T> = eig
        .eigenvalues
        .iter()
        .map(|&ev| ev.max(T::zero()).sqrt())
        .collect();
    let s_max = s[0];
    let mut proj2 = T::zero();
    let mut rank = 0;
    let mut s_min_pos: Option<T> = None;
    let mut c5: Option<T> = None;
    for (i, &si) in s.iter().enumerate() {
        if si <= rank_tol * s_max || si <= T::zero() {
            continue;
        }
        rank += 1;
        s_min_pos = Some(si);
        let frac = si * si / (lambda * lambda + si * si);
        c5 = Some(match c5 {
            Some(c) => c.min(frac),
            None => frac,
        });
        let mut dot = T::zero();
        for r in 0..n {
            dot += eig.eigenvectors[r * n + i] * grad_theta[r];
        }
        let e_i = dot / si;
        proj2 += e_i * e_i;
    }
    let proj_norm = proj2.sqrt();
    let c_star = if energy_value < T::zero() {
        None
    } else if energy_value == T::zero() {
        if proj_norm == T::zero() {
            Some(T::zero())
        } else {
            None
        }
    } else {
        Some(proj_norm / (cast::<T>(2.0) * alpha * energy_value).sqrt())
    };
    Ok(TangentDiagnostics {
        proj_norm,
        c_star,
        c5,
        rank,
        s_max,
        s_min_pos,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::SupervisedL2Spec;
    use crate::network::{Activation, Architecture};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn arch(input: usize, widths: &[usize]) -> Architecture {
        Architecture::new(input, widths.to_vec(), Activation::Tanh).unwrap()
    }

    fn random_net(input: usize, widths: &[usize], seed: u64) -> NetworkParams<f64> {
        let mut rng = StdRng::seed_from_u64(seed);
        NetworkParams::random_init(arch(input, widths), &mut rng)
    }

    fn supervised_toy(seed: u64, m: usize) -> EnergySpec<f64> {
        let mut rng = StdRng::seed_from_u64(seed);
        let dataset: Vec<(Vec<f64>, f64)> = (0..m)
            .map(|_| {
                let x: f64 = rng.gen_range(0.0..1.0);
                (vec![x], (4.0 * x).sin())
            })
            .collect();
        EnergySpec::Supervised(SupervisedL2Spec::new(dataset).unwrap())
    }

    #[test]
    fn lambda_rule_standard_examples() {
        let table = LambdaTable::<f64>::standard();
        assert_eq!(lambda_rule(0.5, &table), 5e-5);
        assert_eq!(lambda_rule(10.0, &table), 5e-3);
        assert_eq!(lambda_rule(1e6, &table), 50.0);
    }

    #[test]
    fn lambda_rule_boundary_table() {
        let table = LambdaTable::<f64>::standard();
        let inputs = [1e-1, 1.0, 10.0, 1e2, 1e3, 1e4, 1e5, 1e6];
        let expect = [5e-5, 5e-4, 5e-3, 5e-2, 5e-1, 5.0, 50.0, 50.0];
        for (g, want) in inputs.iter().zip(expect) {
            assert_eq!(lambda_rule(*g, &table), want, "G_mm = {g}");
        }
    }

    #[test]
    fn lambda_rule_mor_values() {
        let table = LambdaTable::<f64>::mor();
        assert_eq!(lambda_rule(0.5, &table), 1e-7);
        assert_eq!(lambda_rule(1e6, &table), 1e-1);
    }

    #[test]
    fn armijo_zero_direction_accepts_at_gamma0() {
        let energy = supervised_toy(1, 5);
        let net = random_net(1, &[3], 2);
        let batch = energy.full_batch();
        let loss = energy.value(&net, &batch).unwrap();
        let delta = vec![0.0; net.active_layout().count()];
        let accept = armijo_search(&energy, &net, &batch, &delta, loss, 10.0, 2e-4, 40)
            .unwrap()
            .unwrap();
        assert_eq!(accept.gamma, 10.0);
        assert_eq!(accept.loss, loss);
    }

    #[test]
    fn armijo_halving_sequence_on_scalar_quadratic() {
        // E(theta) = theta^2 realized as a supervised instance: identity
        // feature at x = 1 with target 0, one active closing parameter.
        let mut net = NetworkParams::<f64>::zeros(arch(1, &[1]));
        let closing = net.arch.closing_offset();
        net.closing[0] = 1.0;
        net.set_active_indices(&[closing]);
        let energy =
            EnergySpec::Supervised(SupervisedL2Spec::new(vec![(vec![1.0], 0.0)]).unwrap());
        let batch = energy.full_batch();
        let entry = energy.value(&net, &batch).unwrap();
        assert!((entry - 1.0).abs() < 1e-15);
        // E(1 - gamma) <= 1 - c gamma first holds at gamma = 1.25:
        // 10 -> 81, 5 -> 16, 2.5 -> 2.25, 1.25 -> 0.0625 <= 0.99975
        let accept = armijo_search(&energy, &net, &batch, &[1.0], entry, 10.0, 2e-4, 40)
            .unwrap()
            .unwrap();
        assert_eq!(accept.gamma, 1.25);
        assert!((accept.loss - 0.0625).abs() < 1e-15);
    }

    #[test]
    fn armijo_descends_on_random_instance() {
        let energy = supervised_toy(3, 12);
        let net = random_net(1, &[4], 7);
        let batch = energy.full_batch();
        let data = energy.batch_data(&net, &batch).unwrap();
        let grad = energy.grad_from_data(&data);
        let accept =
            armijo_search(&energy, &net, &batch, &grad, data.loss, 10.0, 2e-4, 40)
                .unwrap()
                .unwrap();
        assert!(accept.loss < data.loss);
    }

    #[test]
    fn ngf_step_fixed_point_at_zero_gradient() {
        // model reproduces the targets exactly: gradient is zero, step is a
        // no-op at gamma0
        let net = random_net(1, &[3], 5);
        let xs: Vec<f64> = (0..5).map(|i| 0.1 + 0.17 * i as f64).collect();
        let dataset: Vec<(Vec<f64>, f64)> = xs
            .iter()
            .map(|&x| (vec![x], net.forward(&[x]).unwrap()))
            .collect();
        let energy = EnergySpec::Supervised(SupervisedL2Spec::new(dataset).unwrap());
        let cfg = NgfConfig::default();
        match ngf_step(&energy, &net, &energy.full_batch(), &cfg).unwrap() {
            StepOutcome::Accepted(info) => {
                assert!(info.step_norm2 < 1e-24);
                for (a, b) in info.params.flatten().iter().zip(net.flatten()) {
                    assert!((a - b).abs() < 1e-13);
                }
            }
            StepOutcome::ArmijoFailed { .. } => panic!("zero step must be accepted"),
        }
    }

    #[test]
    fn ngf_step_scalar_least_squares() {
        // model = zeta * x with one active parameter: flow matrix is the
        // scalar sum w x^2 and the loss is quadratic in zeta. Under the
        // convention E = sum w r^2 (no 1/2), the solve returns twice the
        // Newton decrement, so gamma = 1/2 lands exactly on the optimum.
        let mut net = NetworkParams::<f64>::zeros(arch(1, &[1]));
        let closing = net.arch.closing_offset();
        net.closing[0] = 2.0;
        net.set_active_indices(&[closing]);
        let mut rng = StdRng::seed_from_u64(8);
        let dataset: Vec<(Vec<f64>, f64)> = (0..9)
            .map(|_| {
                let x: f64 = rng.gen_range(0.2..1.0);
                (vec![x], rng.gen_range(-1.0..1.0))
            })
            .collect();
        let (mut sxx, mut sxy) = (0.0, 0.0);
        for (x, y) in &dataset {
            sxx += x[0] * x[0];
            sxy += x[0] * y;
        }
        let optimum = sxy / sxx;
        let energy = EnergySpec::Supervised(SupervisedL2Spec::new(dataset).unwrap());
        let batch = energy.full_batch();
        let data = energy.batch_data(&net, &batch).unwrap();
        let grad = energy.grad_from_data(&data);
        let g = energy.flow_from_data(&data, None);
        let delta = solve_spd_regularized(&g, 0.0, &grad).unwrap();
        let reached = net.closing[0] - 0.5 * delta[0];
        assert!(
            (reached - optimum).abs() < 1e-12,
            "gamma=1/2 step lands on the least-squares optimum"
        );
        // the full step with the lambda rule stays within Armijo reach
        match ngf_step(&energy, &net, &batch, &NgfConfig::default()).unwrap() {
            StepOutcome::Accepted(info) => assert!(info.new_loss < info.entry_loss),
            _ => panic!("descent step must be accepted"),
        }
    }

    #[test]
    fn ngf_batch_loss_decreases_over_run() {
        let energy = supervised_toy(11, 20);
        let net = random_net(1, &[6], 3);
        let cfg = NgfConfig {
            max_epochs: 50,
            ..NgfConfig::default()
        };
        let criteria = StopCriteria {
            tol_abs: Some(1e-12),
            ..StopCriteria::default()
        };
        let (_, record) = run_ngf(
            &energy,
            &net,
            &[energy.full_batch()],
            &cfg,
            &criteria,
            StopMode::AbsTol,
        )
        .unwrap();
        let losses = record.losses();
        assert!(losses.len() >= 10);
        for w in losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-15, "loss increased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn run_ngf_early_termination_on_converged_params() {
        let net = random_net(1, &[3], 5);
        let xs: Vec<f64> = (0..5).map(|i| 0.1 + 0.17 * i as f64).collect();
        let dataset: Vec<(Vec<f64>, f64)> = xs
            .iter()
            .map(|&x| (vec![x], net.forward(&[x]).unwrap()))
            .collect();
        let energy = EnergySpec::Supervised(SupervisedL2Spec::new(dataset).unwrap());
        let criteria = StopCriteria {
            tol_abs: Some(1e-5),
            ..StopCriteria::default()
        };
        let (_, record) = run_ngf(
            &energy,
            &net,
            &[energy.full_batch()],
            &NgfConfig::default(),
            &criteria,
            StopMode::AbsTol,
        )
        .unwrap();
        assert_eq!(record.flag, StopFlag::EarlyTerminated);
        assert_eq!(record.epochs(), 1);
    }

    #[test]
    fn run_ngf_saturates_on_constant_loss() {
        // zero-gradient instance: loss can never move, saturation fires at
        // epoch lookback + 1
        let net = random_net(1, &[3], 5);
        let xs: Vec<f64> = (0..5).map(|i| 0.1 + 0.17 * i as f64).collect();
        let dataset: Vec<(Vec<f64>, f64)> = xs
            .iter()
            .map(|&x| (vec![x], net.forward(&[x]).unwrap()))
            .collect();
        let energy = EnergySpec::Supervised(SupervisedL2Spec::new(dataset).unwrap());
        let (_, record) = run_ngf(
            &energy,
            &net,
            &[energy.full_batch()],
            &NgfConfig::default(),
            &StopCriteria::default(),
            StopMode::Saturation,
        )
        .unwrap();
        assert_eq!(record.flag, StopFlag::Saturated);
        assert_eq!(record.epochs(), 6);
    }

    #[test]
    fn check_stopping_examples() {
        let criteria = StopCriteria {
            tol_abs: Some(1e-5),
            sat_abs: 1e-7,
            sat_rel: 5e-3,
            lookback: 5,
        };
        assert_eq!(
            check_stopping(&[1.0, 9e-6], &criteria, StopMode::AbsTol),
            Some(StopFlag::EarlyTerminated)
        );
        // E_5..E_10 equal: saturated at k = 10
        let losses = [5.0, 4.0, 3.0, 2.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        assert_eq!(
            check_stopping(&losses[..9], &criteria, StopMode::Saturation),
            None
        );
        assert_eq!(
            check_stopping(&losses, &criteria, StopMode::Saturation),
            Some(StopFlag::Saturated)
        );
        // relative saturation: |100.1 - 100.2| / 100.2 ~ 1e-3 < 5e-3
        let rel = [200.0, 180.0, 160.0, 140.0, 100.2, 110.0, 108.0, 106.0, 104.0, 100.1];
        assert_eq!(
            check_stopping(&rel, &criteria, StopMode::Saturation),
            Some(StopFlag::Saturated)
        );
        // inactive until k > lookback
        assert_eq!(
            check_stopping(&[1.0, 1.0, 1.0], &criteria, StopMode::Saturation),
            None
        );
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let net = random_net(1, &[3], 5);
        let xs: Vec<f64> = (0..5).map(|i| 0.1 + 0.17 * i as f64).collect();
        let dataset: Vec<(Vec<f64>, f64)> = xs
            .iter()
            .map(|&x| (vec![x], net.forward(&[x]).unwrap()))
            .collect();
        let energy = EnergySpec::Supervised(SupervisedL2Spec::new(dataset).unwrap());
        let cfg = AdamConfig {
            max_iters: 3,
            ..AdamConfig::default()
        };
        let (out, _) = run_adam(
            &energy,
            &net,
            &[energy.full_batch()],
            &cfg,
            &StopCriteria::default(),
            StopMode::Saturation,
        )
        .unwrap();
        // gradients are ~1e-16 noise at the interpolant; parameters move by
        // at most tau * machine-noise
        for (a, b) in out.flatten().iter().zip(net.flatten()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn adam_tau_schedule_recurrence() {
        let cfg = AdamConfig::<f64> {
            tau0: 5e-3,
            decay_rate: 1e-4,
            ..AdamConfig::default()
        };
        let mut tau = cfg.tau0;
        tau = tau / (1.0 + cfg.decay_rate * 1.0);
        assert!((tau - 5e-3 / 1.0001).abs() < 1e-18);
        tau = tau / (1.0 + cfg.decay_rate * 2.0);
        assert!((tau - 5e-3 / (1.0001 * 1.0002)).abs() < 1e-18);
    }

    #[test]
    fn adam_reduces_loss() {
        let energy = supervised_toy(21, 16);
        let net = random_net(1, &[5], 9);
        let cfg = AdamConfig {
            max_iters: 300,
            ..AdamConfig::default()
        };
        let (_, record) = run_adam(
            &energy,
            &net,
            &[energy.full_batch()],
            &cfg,
            &StopCriteria::default(),
            StopMode::AbsTol,
        )
        .unwrap();
        let losses = record.losses();
        assert!(losses.last().unwrap() < &(losses[0] * 0.5));
    }

    #[test]
    fn frozen_parameters_unchanged_by_both_optimizers() {
        let energy = supervised_toy(31, 10);
        let mut net = random_net(1, &[4, 4], 13);
        // activate only the last block and the closing vector
        let base = net.arch.block_offset(2);
        let indices: Vec<usize> = (base..net.param_count()).collect();
        net.set_active_indices(&indices);
        let frozen_before: Vec<f64> = net.flatten()[..base].to_vec();

        let cfg = NgfConfig {
            max_epochs: 5,
            ..NgfConfig::default()
        };
        let (after_ngf, _) = run_ngf(
            &energy,
            &net,
            &[energy.full_batch()],
            &cfg,
            &StopCriteria::default(),
            StopMode::Saturation,
        )
        .unwrap();
        assert_eq!(&after_ngf.flatten()[..base], &frozen_before[..]);

        let acfg = AdamConfig {
            max_iters: 5,
            ..AdamConfig::default()
        };
        let (after_adam, _) = run_adam(
            &energy,
            &net,
            &[energy.full_batch()],
            &acfg,
            &StopCriteria::default(),
            StopMode::Saturation,
        )
        .unwrap();
        assert_eq!(&after_adam.flatten()[..base], &frozen_before[..]);
    }

    #[test]
    fn descent_direction_every_step() {
        let energy = supervised_toy(41, 14);
        let mut params = random_net(1, &[5], 17);
        let cfg = NgfConfig::default();
        let batch = energy.full_batch();
        for _ in 0..25 {
            match ngf_step(&energy, &params, &batch, &cfg).unwrap() {
                StepOutcome::Accepted(info) => {
                    assert!(info.grad_dot_delta > 0.0);
                    params = info.params;
                }
                StepOutcome::ArmijoFailed { .. } => break,
            }
        }
    }

    #[test]
    fn diagnostics_identity_flow_matrix() {
        let g = SymMatrix::<f64>::identity(3);
        let grad = [1.0, 0.0, 0.0];
        let d = tangent_diagnostics(&g, &grad, 0.5, 1.0, 1e-10, 0.0).unwrap();
        assert!((d.proj_norm - 1.0).abs() < 1e-14);
        assert!((d.c_star.unwrap() - 1.0).abs() < 1e-14);
        assert_eq!(d.rank, 3);

        let zero_grad = [0.0, 0.0, 0.0];
        let d0 = tangent_diagnostics(&g, &zero_grad, 0.5, 1.0, 1e-10, 0.0).unwrap();
        assert_eq!(d0.proj_norm, 0.0);
        assert_eq!(d0.c_star, Some(0.0));
    }

    #[test]
    fn diagnostics_match_gram_schmidt_projection() {
        // 3 active parameters; brute-force: orthonormalize the explicit
        // tangent functions in H and sum squared pairings of the ambient
        // gradient with the basis.
        let energy = supervised_toy(51, 11);
        let mut net = random_net(1, &[3], 19);
        let base = net.arch.closing_offset();
        net.set_active_indices(&[base, base + 1, base + 2]);
        let batch = energy.full_batch();
        let data = energy.batch_data(&net, &batch).unwrap();
        let grad = energy.grad_from_data(&data);
        let g = energy.flow_from_data(&data, None);
        let diag = tangent_diagnostics(&g, &grad, data.loss, 1.0, 1e-10, 0.0).unwrap();

        let n_nodes = batch.len();
        let n = data.n_active;
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for j in 0..n {
            let mut t: Vec<f64> = (0..n_nodes).map(|s| data.jac[s * n + j]).collect();
            for phi in &basis {
                let c = energy.h_inner(&t, None, phi, None).unwrap();
                for (tv, pv) in t.iter_mut().zip(phi) {
                    *tv -= c * pv;
                }
            }
            let norm = energy.h_inner(&t, None, &t, None).unwrap().sqrt();
            if norm > 1e-10 {
                for tv in t.iter_mut() {
                    *tv /= norm;
                }
                basis.push(t);
            }
        }
        let mut proj2 = 0.0;
        for phi in &basis {
            let p = energy.hilbert_pairing(&net, phi, None).unwrap();
            proj2 += p * p;
        }
        let want = proj2.sqrt();
        assert!(
            (diag.proj_norm - want).abs() <= 1e-8,
            "spectral {} vs Gram-Schmidt {want}",
            diag.proj_norm
        );
    }

    #[test]
    fn dual_solve_matches_assembled_flow_matrix_route() {
        // the production step uses the dual form when the batch is smaller
        // than the active set; it must agree with solving the assembled
        // Gramian system directly
        for seed in 0..5u64 {
            let energy = supervised_toy(seed + 70, 9);
            let net = random_net(1, &[4, 3], seed + 7);
            let batch = energy.full_batch();
            let data = energy.batch_data(&net, &batch).unwrap();
            assert!(batch.len() < data.n_active);
            let grad = energy.grad_from_data(&data);
            let lambda = 5e-4;
            let b_rows = energy.scaled_tangent_rows(&data);
            let dual =
                crate::linalg::solve_spd_regularized_dual(&b_rows, data.n_active, lambda, &grad)
                    .unwrap();
            let g = energy.flow_from_data(&data, None);
            let direct = solve_spd_regularized(&g, lambda, &grad).unwrap();
            let scale = direct
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
                .max(1e-12);
            for (a, b) in dual.iter().zip(&direct) {
                assert!(
                    (a - b).abs() <= 1e-9 * scale,
                    "dual {a} vs direct {b} (seed {seed})"
                );
            }
        }
    }

    #[test]
    fn diag_cap_filter_keeps_step_descending() {
        let energy = supervised_toy(61, 18);
        let net = random_net(1, &[5], 23);
        let cfg = NgfConfig {
            diag_cap: Some(0.5),
            ..NgfConfig::default()
        };
        match ngf_step(&energy, &net, &energy.full_batch(), &cfg).unwrap() {
            StepOutcome::Accepted(info) => assert!(info.new_loss <= info.entry_loss),
            StepOutcome::ArmijoFailed { .. } => {}
        }
    }
}
