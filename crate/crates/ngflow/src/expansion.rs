//! Saturation-triggered network expansion: layer insertion with random or
//! gradient-aligned initialization of the new parameters, and the hybrid
//! training driver that runs natural-gradient steps on the last two layers
//! and relaxes all parameters with Adam in between.
//!
//! Gradient-aligned initialization draws `K` random candidates for the new
//! block, and for each solves a small linear least-squares problem so that
//! the induced model change aligns with the projection of the ambient-space
//! energy gradient onto the span of the new closing-layer tangents. Because
//! the expanded model is exactly affine in the closing update, no
//! linearization is involved. The candidate with the least full-rule energy
//! wins (ties broken by the lowest index).

use crate::energy::{dirichlet_mask, dirichlet_mask_dx, EnergySpec, PairingContext};
use crate::hilbert::SpaceKind;
use crate::linalg::{solve_spd_regularized, DenseMatrix, SymMatrix};
use crate::network::{NetworkParams, NetworkError};
use crate::optimizers::{
    run_adam, run_ngf, AdamConfig, NgfConfig, StopCriteria, StopFlag, StopMode, TrainError,
    TrainRecord,
};
use crate::scalar::{cast, Scalar};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMethod {
    Random,
    GradientAligned,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
#[serde(bound = "T: Scalar")]
pub struct ExpansionConfig<T: Scalar> {
    pub max_expansions: usize,
    /// Width of inserted layers; defaults to the current last width.
    pub new_width: Option<usize>,
    pub init_method: InitMethod,
    /// Number of random candidates scored by the aligned initialization.
    pub k_candidates: usize,
    /// Lower bound on the alignment step scalar.
    pub alpha0: T,
    /// Half-width of the uniform draw for new-parameter candidates.
    pub random_scale: T,
    /// Final termination: absolute change of the per-cycle loss.
    pub term_abs: Option<T>,
    /// Final termination: relative change of the per-cycle loss.
    pub term_rel: Option<T>,
    /// Optional cap on the total iteration count across all phases.
    pub max_total_iters: Option<usize>,
    /// Optional epoch budget for the initial-model phase only (the
    /// post-expansion phases use the optimizer config's budget).
    pub initial_max_epochs: Option<usize>,
}

impl<T: Scalar> Default for ExpansionConfig<T> {
    fn default() -> Self {
        Self {
            max_expansions: 6,
            new_width: None,
            init_method: InitMethod::GradientAligned,
            k_candidates: 20,
            alpha0: cast(1e-3),
            random_scale: cast(0.5),
            term_abs: None,
            term_rel: None,
            max_total_iters: Some(3000),
            initial_max_epochs: None,
        }
    }
}

/// One scored candidate for the new block and closing update.
#[derive(Clone, Debug)]
pub struct AlignmentCandidate<T> {
    pub psi_w: Vec<T>,
    pub psi_b: Vec<T>,
    pub xi: Vec<T>,
    pub alpha: T,
    pub energy_after: T,
    pub index: usize,
}

/// Inserts a zero-embedded layer, then draws the new block's weights and the
/// closing update i.i.d. uniform in `[-scale, scale]`. Draw order is the new
/// `W` row-major, then `b`, then the closing update.
pub fn random_init_new_layer<T: Scalar>(
    params: &NetworkParams<T>,
    m: usize,
    scale: T,
    rng: &mut impl Rng,
) -> Result<(NetworkParams<T>, Vec<usize>), NetworkError> {
    let (mut expanded, new_indices) = params.add_layer(m)?;
    let block = expanded.blocks.last_mut().expect("depth >= 1");
    for w in block.w.iter_mut().chain(block.b.iter_mut()) {
        *w = scale * cast::<T>(rng.gen_range(-1.0..1.0));
    }
    for z in expanded.closing.iter_mut() {
        *z = *z + scale * cast::<T>(rng.gen_range(-1.0..1.0));
    }
    Ok((expanded, new_indices))
}

/// Output of the aligned initialization; `candidate` is `None` when every
/// candidate degenerated and the random fallback was used.
pub struct AlignedInit<T> {
    pub params: NetworkParams<T>,
    pub new_indices: Vec<usize>,
    pub candidate: Option<AlignmentCandidate<T>>,
}

/// Per-node state of the pre-expansion network reused across candidates.
struct HiddenCache<T> {
    /// Last-block outputs per node.
    z: Vec<Vec<T>>,
    /// Their spatial derivatives (H1 case).
    t: Option<Vec<Vec<T>>>,
}

fn hidden_cache<T: Scalar>(
    energy: &EnergySpec<T>,
    params: &NetworkParams<T>,
) -> Result<HiddenCache<T>, TrainError> {
    let rule = energy.rule();
    let need_dx = matches!(energy.space(), SpaceKind::H1ZeroSeminorm);
    let mut z = Vec::with_capacity(rule.len());
    let mut t = need_dx.then(Vec::new);
    for node in &rule.nodes {
        let (zi, ti) = params.hidden_state(node, need_dx.then_some(0))?;
        z.push(zi);
        if let Some(t) = t.as_mut() {
            t.push(ti.expect("dx requested"));
        }
    }
    Ok(HiddenCache { z, t })
}

/// An element of the ambient space sampled at the rule nodes.
struct Element<T> {
    vals: Vec<T>,
    dx: Option<Vec<T>>,
}

impl<T: Scalar> Element<T> {
    fn axpy(&mut self, c: T, other: &Element<T>) {
        for (a, b) in self.vals.iter_mut().zip(&other.vals) {
            *a = *a + c * *b;
        }
        if let (Some(dx), Some(odx)) = (self.dx.as_mut(), other.dx.as_ref()) {
            for (a, b) in dx.iter_mut().zip(odx) {
                *a = *a + c * *b;
            }
        }
    }

    fn scale(&mut self, c: T) {
        for a in self.vals.iter_mut() {
            *a = *a * c;
        }
        if let Some(dx) = self.dx.as_mut() {
            for a in dx.iter_mut() {
                *a = *a * c;
            }
        }
    }
}

fn h_inner<T: Scalar>(energy: &EnergySpec<T>, a: &Element<T>, b: &Element<T>) -> T {
    energy
        .h_inner(&a.vals, a.dx.as_deref(), &b.vals, b.dx.as_deref())
        .expect("consistent element shapes")
}

/// Ridge-regularized least squares for the alignment system. The candidate
/// tangent family is often strongly correlated, and an unregularized
/// minimum-norm solution realizes its fit through huge cancelling closing
/// coefficients, which leaves the expanded network in a numerically crippled
/// state. A small relative Tikhonov term keeps the update bounded, in line
/// with the Gauss-Newton treatment of the flow-matrix solve.
fn ridge_lstsq<T: Scalar>(a: &DenseMatrix<T>, b: &[T], rel: T) -> Result<Vec<T>, TrainError> {
    let n = a.cols();
    let ata = SymMatrix::from_fn(n, |i, j| {
        (0..a.rows()).map(|r| a.get(r, i) * a.get(r, j)).sum::<T>()
    });
    let atb: Vec<T> = (0..n)
        .map(|j| (0..a.rows()).map(|r| a.get(r, j) * b[r]).sum::<T>())
        .collect();
    let lambda = rel * ata.max_diag().max(T::min_positive_value());
    Ok(solve_spd_regularized(&ata, lambda, &atb)?)
}

/// The alignment least-squares system of one candidate, projected onto an
/// orthonormal basis of the new-parameter tangent family: `rows` (without the
/// last column) is the closing-tangent matrix `B`, the last column of each
/// row is the ambient-gradient projection, and `rhs` carries the embedding's
/// base change.
struct AlignmentSystem<T> {
    rows: Vec<Vec<T>>,
    rhs: Vec<T>,
    grad_proj: Vec<T>,
}

/// Builds the candidate's tangent family, orthonormalizes it, and assembles
/// the alignment system. Returns `None` when the family degenerates.
fn build_alignment_system<T: Scalar>(
    energy: &EnergySpec<T>,
    embedded: &NetworkParams<T>,
    cache: &HiddenCache<T>,
    ctx: &PairingContext<T>,
    psi_w: &[T],
    psi_b: &[T],
) -> Result<Option<AlignmentSystem<T>>, TrainError> {
    let rule = energy.rule();
    let n_nodes = rule.len();
    let m = psi_b.len();
    let is_h1 = matches!(energy.space(), SpaceKind::H1ZeroSeminorm);
    let act = embedded.arch.activation;
    let closing = &embedded.closing;

    // New-block outputs R_i = z_i + sigma(W z + b)_i per node; these are the
    // closing-update tangents because the expanded model is affine in the
    // closing vector. The base change zeta . (R - z) is what the embedding
    // itself contributes once the block weights are nonzero. The alignment is
    // tested against the span of the partials with respect to all new
    // parameters (the block weights and biases as well as the closing
    // update), which makes the least-squares system for (xi, alpha) genuinely
    // overdetermined and shapes the initialized residual so the directions
    // trained next actually see the ambient gradient.
    let new_element = |n: usize| -> Vec<Element<T>> {
        (0..n)
            .map(|_| Element {
                vals: vec![T::zero(); n_nodes],
                dx: is_h1.then(|| vec![T::zero(); n_nodes]),
            })
            .collect()
    };
    let mut tangents: Vec<Element<T>> = new_element(m);
    let mut w_partials: Vec<Element<T>> = new_element(m * cache.z[0].len());
    let mut b_partials: Vec<Element<T>> = new_element(m);
    let mut base = Element {
        vals: vec![T::zero(); n_nodes],
        dx: is_h1.then(|| vec![T::zero(); n_nodes]),
    };

    for s in 0..n_nodes {
        let z = &cache.z[s];
        let d = z.len();
        let (mask, mask_dx) = if is_h1 {
            let x = rule.node_scalar(s);
            (dirichlet_mask(x), dirichlet_mask_dx(x))
        } else {
            (T::one(), T::zero())
        };
        for i in 0..m {
            let row = &psi_w[i * d..(i + 1) * d];
            let mut pre = psi_b[i];
            for (w, zv) in row.iter().zip(z) {
                pre = pre + *w * *zv;
            }
            let sig = act.value(pre);
            let d1 = act.d1_from_value(sig);
            let r_i = z[i] + sig;
            tangents[i].vals[s] = mask * r_i;
            base.vals[s] = base.vals[s] + closing[i] * mask * sig;
            b_partials[i].vals[s] = mask * closing[i] * d1;
            for j in 0..d {
                w_partials[i * d + j].vals[s] = mask * closing[i] * d1 * z[j];
            }
            if is_h1 {
                let t = cache.t.as_ref().expect("H1 cache")[s].as_slice();
                let mut pre_dot = T::zero();
                for (w, tv) in row.iter().zip(t) {
                    pre_dot = pre_dot + *w * *tv;
                }
                let d2 = act.d2_from_value(sig);
                let r_dx = t[i] + d1 * pre_dot;
                tangents[i].dx.as_mut().unwrap()[s] = mask_dx * r_i + mask * r_dx;
                let sig_dx = d1 * pre_dot;
                base.dx.as_mut().unwrap()[s] = base.dx.as_mut().unwrap()[s]
                    + closing[i] * (mask_dx * sig + mask * sig_dx);
                let db = closing[i] * d1;
                let db_dx = closing[i] * d2 * pre_dot;
                b_partials[i].dx.as_mut().unwrap()[s] = mask_dx * db + mask * db_dx;
                for j in 0..d {
                    let dw = db * z[j];
                    let dw_dx = db_dx * z[j] + db * t[j];
                    w_partials[i * d + j].dx.as_mut().unwrap()[s] =
                        mask_dx * dw + mask * dw_dx;
                }
            }
        }
    }

    // Modified Gram-Schmidt over the full new-parameter tangent family, with
    // a relative drop tolerance.
    let drop_tol = cast::<T>(1e-10);
    let mut basis: Vec<Element<T>> = Vec::new();
    for src in tangents.iter().chain(&w_partials).chain(&b_partials) {
        let mut e = Element {
            vals: src.vals.clone(),
            dx: src.dx.clone(),
        };
        let norm0 = h_inner(energy, &e, &e).sqrt();
        for phi in &basis {
            let c = h_inner(energy, &e, phi);
            e.axpy(-c, phi);
        }
        let norm = h_inner(energy, &e, &e).sqrt();
        if norm > drop_tol * norm0 && norm > T::zero() {
            e.scale(T::one() / norm);
            basis.push(e);
        }
    }
    if basis.is_empty() {
        return Ok(None);
    }

    // Least squares in (xi, alpha):
    //   sum_j (tangent_j, phi_i) xi_j + (grad E, phi_i) alpha = -(base, phi_i)
    let mut rows: Vec<Vec<T>> = Vec::with_capacity(basis.len());
    let mut rhs: Vec<T> = Vec::with_capacity(basis.len());
    let mut grad_proj: Vec<T> = Vec::with_capacity(basis.len());
    for phi in &basis {
        let mut row: Vec<T> = (0..m).map(|j| h_inner(energy, &tangents[j], phi)).collect();
        let e_i = energy.pairing_with(ctx, &phi.vals, phi.dx.as_deref())?;
        grad_proj.push(e_i);
        row.push(e_i);
        rows.push(row);
        rhs.push(-h_inner(energy, &base, phi));
    }
    Ok(Some(AlignmentSystem {
        rows,
        rhs,
        grad_proj,
    }))
}

/// Relative Tikhonov weight of the alignment solves.
const ALIGN_RIDGE: f64 = 1e-6;

/// Solves the alignment system for `(xi, alpha)` with the clamp
/// `alpha >= alpha0`, instantiates the candidate, and scores its full-rule
/// energy. Returns `None` when the tangent family degenerates.
fn score_candidate<T: Scalar>(
    energy: &EnergySpec<T>,
    embedded: &NetworkParams<T>,
    cache: &HiddenCache<T>,
    ctx: &PairingContext<T>,
    psi_w: &[T],
    psi_b: &[T],
    alpha0: T,
    index: usize,
) -> Result<Option<(NetworkParams<T>, AlignmentCandidate<T>)>, TrainError> {
    let system = match build_alignment_system(energy, embedded, cache, ctx, psi_w, psi_b)? {
        Some(s) => s,
        None => return Ok(None),
    };
    let m = psi_b.len();
    let ridge = cast::<T>(ALIGN_RIDGE);
    let a = DenseMatrix::from_rows(&system.rows).expect("consistent rows");
    let sol = ridge_lstsq(&a, &system.rhs, ridge)?;
    let (mut xi, mut alpha) = (sol[..m].to_vec(), sol[m]);
    if alpha < alpha0 {
        // clamp the step scalar and re-solve for the closing update alone
        alpha = alpha0;
        let rows_b: Vec<Vec<T>> = system.rows.iter().map(|row| row[..m].to_vec()).collect();
        let rhs_b: Vec<T> = system
            .rhs
            .iter()
            .zip(&system.grad_proj)
            .map(|(&c, &e)| c - alpha0 * e)
            .collect();
        let ab = DenseMatrix::from_rows(&rows_b).expect("consistent rows");
        xi = ridge_lstsq(&ab, &rhs_b, ridge)?;
    }

    let mut candidate = embedded.clone();
    {
        let block = candidate.blocks.last_mut().expect("expanded");
        block.w.copy_from_slice(psi_w);
        block.b.copy_from_slice(psi_b);
    }
    for (z, &x) in candidate.closing.iter_mut().zip(&xi) {
        *z = *z + x;
    }
    let energy_after = energy.value(&candidate, &energy.full_batch())?;
    Ok(Some((
        candidate,
        AlignmentCandidate {
            psi_w: psi_w.to_vec(),
            psi_b: psi_b.to_vec(),
            xi,
            alpha,
            energy_after,
            index,
        },
    )))
}

/// Gradient-aligned initialization of a new layer: scores `k_candidates`
/// random blocks and keeps the one with the least full-rule energy. The
/// aligned path never returns a candidate that raises the loss above the
/// zero-weight embedding: when every candidate does (or degenerates), the
/// random fallback fires instead and is reported through
/// [`AlignedInit::candidate`] being `None`.
pub fn aligned_init_new_layer<T: Scalar>(
    energy: &EnergySpec<T>,
    params: &NetworkParams<T>,
    m: usize,
    cfg: &ExpansionConfig<T>,
    rng: &mut impl Rng,
) -> Result<AlignedInit<T>, TrainError> {
    let cache = hidden_cache(energy, params)?;
    let ctx = energy.pairing_context(params)?;
    let (embedded, new_indices) = params.add_layer(m)?;
    let embedding_energy = energy.value(&embedded, &energy.full_batch())?;
    let d_in = params.arch.last_width();

    let mut best: Option<(NetworkParams<T>, AlignmentCandidate<T>)> = None;
    for k in 0..cfg.k_candidates {
        let psi_w: Vec<T> = (0..m * d_in)
            .map(|_| cfg.random_scale * cast::<T>(rng.gen_range(-1.0..1.0)))
            .collect();
        let psi_b: Vec<T> = (0..m)
            .map(|_| cfg.random_scale * cast::<T>(rng.gen_range(-1.0..1.0)))
            .collect();
        if let Some(scored) = score_candidate(
            energy, &embedded, &cache, &ctx, &psi_w, &psi_b, cfg.alpha0, k,
        )? {
            let better = match &best {
                None => true,
                Some((_, incumbent)) => scored.1.energy_after < incumbent.energy_after,
            };
            if better {
                best = Some(scored);
            }
        }
    }

    match best {
        Some((params, candidate)) if candidate.energy_after <= embedding_energy => {
            Ok(AlignedInit {
                params,
                new_indices,
                candidate: Some(candidate),
            })
        }
        _ => {
            let (params, new_indices) =
                random_init_new_layer(params, m, cfg.random_scale, rng)?;
            Ok(AlignedInit {
                params,
                new_indices,
                candidate: None,
            })
        }
    }
}

/// Stopping configuration for the expansive driver: the natural-gradient
/// phases and the Adam phases use their own saturation tolerances.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ExpansiveCriteria<T: Scalar> {
    pub ngf: StopCriteria<T>,
    pub adam: StopCriteria<T>,
    pub mode: StopMode,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpansiveOutcome {
    EarlyTerminated,
    /// The per-cycle loss change fell below the final termination tolerances.
    Terminated,
    MaxExpansions,
    MaxTotalIters,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExpansionEvent<T> {
    pub method: InitMethod,
    pub candidate_index: Option<usize>,
    pub candidate_alpha: Option<T>,
    pub fell_back: bool,
    /// Loss before the expansion.
    pub pre_loss: T,
    /// Loss right after the initialized expansion.
    pub post_init_loss: T,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PhaseSummary<T> {
    pub name: String,
    pub optimizer: String,
    pub active_count: usize,
    pub iterations: usize,
    pub entry_loss: T,
    pub exit_loss: T,
    pub flag: StopFlag,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expansion: Option<ExpansionEvent<T>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExpansiveSummary<T> {
    pub phases: Vec<PhaseSummary<T>>,
    pub expansions: usize,
    pub total_iterations: usize,
    pub final_loss: T,
    pub outcome: ExpansiveOutcome,
}

pub struct ExpansiveRun<T: Scalar> {
    pub params: NetworkParams<T>,
    pub records: Vec<TrainRecord<T>>,
    pub summary: ExpansiveSummary<T>,
}

fn mean_batch_loss<T: Scalar>(
    energy: &EnergySpec<T>,
    params: &NetworkParams<T>,
    batches: &[Vec<usize>],
) -> Result<T, TrainError> {
    let mut acc = T::zero();
    for b in batches {
        acc += energy.value(params, b)?;
    }
    Ok(acc / cast::<T>(batches.len() as f64))
}

/// The expansive training loop: train the initial model with natural-gradient
/// steps; on saturation insert a new layer (random or gradient-aligned
/// initialization), train the last two layers, relax all parameters with
/// Adam, and repeat until early termination, the final termination rule, or
/// the expansion/iteration budget is exhausted.
#[allow(clippy::too_many_arguments)]
pub fn run_expansive_training<T: Scalar>(
    energy: &EnergySpec<T>,
    params0: &NetworkParams<T>,
    batches: &[Vec<usize>],
    ngf_cfg: &NgfConfig<T>,
    adam_cfg: &AdamConfig<T>,
    exp_cfg: &ExpansionConfig<T>,
    criteria: &ExpansiveCriteria<T>,
    rng: &mut impl Rng,
) -> Result<ExpansiveRun<T>, TrainError> {
    let mut records: Vec<TrainRecord<T>> = Vec::new();
    let mut phases: Vec<PhaseSummary<T>> = Vec::new();
    let mut total_iters = 0usize;
    let mut expansions = 0usize;

    let remaining =
        |total: usize| exp_cfg.max_total_iters.map(|cap| cap.saturating_sub(total));

    // Initial model: all parameters active.
    let mut params = params0.clone();
    params.set_active_all(true);
    let mut cfg0 = ngf_cfg.clone();
    if let Some(cap) = exp_cfg.initial_max_epochs {
        cfg0.max_epochs = cfg0.max_epochs.min(cap);
    }
    if let Some(rem) = remaining(total_iters) {
        cfg0.max_epochs = cfg0.max_epochs.min(rem);
    }
    let entry = mean_batch_loss(energy, &params, batches)?;
    let (p, record) = run_ngf(energy, &params, batches, &cfg0, &criteria.ngf, criteria.mode)?;
    params = p;
    let exit = mean_batch_loss(energy, &params, batches)?;
    total_iters += record.epochs();
    let initial_flag = record.flag;
    phases.push(PhaseSummary {
        name: "ngf-initial".into(),
        optimizer: "ngf".into(),
        active_count: params.active_layout().count(),
        iterations: record.epochs(),
        entry_loss: entry,
        exit_loss: exit,
        flag: record.flag,
        expansion: None,
    });
    records.push(record);
    let mut cycle_loss = exit;

    let mut outcome = ExpansiveOutcome::MaxExpansions;
    if initial_flag == StopFlag::EarlyTerminated {
        outcome = ExpansiveOutcome::EarlyTerminated;
    } else {
        'expand: while expansions < exp_cfg.max_expansions {
            if remaining(total_iters) == Some(0) {
                outcome = ExpansiveOutcome::MaxTotalIters;
                break 'expand;
            }
            // Expand and initialize the new layer.
            let m = exp_cfg.new_width.unwrap_or(params.arch.last_width());
            let pre_loss = mean_batch_loss(energy, &params, batches)?;
            let (expanded, new_indices, event) = match exp_cfg.init_method {
                InitMethod::Random => {
                    let (p, idx) = random_init_new_layer(&params, m, exp_cfg.random_scale, rng)?;
                    let post = mean_batch_loss(energy, &p, batches)?;
                    (
                        p,
                        idx,
                        ExpansionEvent {
                            method: InitMethod::Random,
                            candidate_index: None,
                            candidate_alpha: None,
                            fell_back: false,
                            pre_loss,
                            post_init_loss: post,
                        },
                    )
                }
                InitMethod::GradientAligned => {
                    let init = aligned_init_new_layer(energy, &params, m, exp_cfg, rng)?;
                    let post = mean_batch_loss(energy, &init.params, batches)?;
                    let event = ExpansionEvent {
                        method: InitMethod::GradientAligned,
                        candidate_index: init.candidate.as_ref().map(|c| c.index),
                        candidate_alpha: init.candidate.as_ref().map(|c| c.alpha),
                        fell_back: init.candidate.is_none(),
                        pre_loss,
                        post_init_loss: post,
                    };
                    (init.params, init.new_indices, event)
                }
            };
            expansions += 1;
            params = expanded;

            // The absolute early-termination condition is a function of the
            // loss alone, so test it at the phase boundary: a sufficiently
            // good initialization terminates the run before any further
            // update.
            if let Some(tol) = criteria.ngf.tol_abs {
                if matches!(criteria.mode, StopMode::AbsTol | StopMode::Both)
                    && event.post_init_loss.abs() <= tol
                {
                    phases.push(PhaseSummary {
                        name: format!("ngf-exp-{expansions}"),
                        optimizer: "ngf".into(),
                        active_count: new_indices.len() + params.closing.len(),
                        iterations: 0,
                        entry_loss: event.post_init_loss,
                        exit_loss: event.post_init_loss,
                        flag: StopFlag::EarlyTerminated,
                        expansion: Some(event),
                    });
                    outcome = ExpansiveOutcome::EarlyTerminated;
                    break 'expand;
                }
            }

            // Train the last two layers: the new block plus the closing vector.
            let closing_base = params.arch.closing_offset();
            let mut active = new_indices.clone();
            active.extend(closing_base..closing_base + params.closing.len());
            params.set_active_indices(&active);

            let mut cfg = ngf_cfg.clone();
            if let Some(rem) = remaining(total_iters) {
                cfg.max_epochs = cfg.max_epochs.min(rem);
            }
            let entry = event.post_init_loss;
            let (p, record) =
                run_ngf(energy, &params, batches, &cfg, &criteria.ngf, criteria.mode)?;
            params = p;
            let exit = mean_batch_loss(energy, &params, batches)?;
            total_iters += record.epochs();
            let ngf_flag = record.flag;
            phases.push(PhaseSummary {
                name: format!("ngf-exp-{expansions}"),
                optimizer: "ngf".into(),
                active_count: active.len(),
                iterations: record.epochs(),
                entry_loss: entry,
                exit_loss: exit,
                flag: ngf_flag,
                expansion: Some(event),
            });
            records.push(record);
            if ngf_flag == StopFlag::EarlyTerminated {
                outcome = ExpansiveOutcome::EarlyTerminated;
                break 'expand;
            }
            if remaining(total_iters) == Some(0) {
                outcome = ExpansiveOutcome::MaxTotalIters;
                break 'expand;
            }

            // Relax all parameters with Adam; the step schedule continues
            // from the global iteration count.
            params.set_active_all(true);
            let mut acfg = adam_cfg.clone();
            acfg.schedule_offset = adam_cfg.schedule_offset + total_iters;
            if let Some(rem) = remaining(total_iters) {
                acfg.max_iters = acfg.max_iters.min(rem);
            }
            let entry = exit;
            let (p, record) =
                run_adam(energy, &params, batches, &acfg, &criteria.adam, criteria.mode)?;
            params = p;
            let exit = mean_batch_loss(energy, &params, batches)?;
            total_iters += record.epochs();
            let adam_flag = record.flag;
            phases.push(PhaseSummary {
                name: format!("adam-{expansions}"),
                optimizer: "adam".into(),
                active_count: params.active_layout().count(),
                iterations: record.epochs(),
                entry_loss: entry,
                exit_loss: exit,
                flag: adam_flag,
                expansion: None,
            });
            records.push(record);
            if adam_flag == StopFlag::EarlyTerminated {
                outcome = ExpansiveOutcome::EarlyTerminated;
                break 'expand;
            }

            // Final termination on the per-cycle loss change.
            let e_prev = cycle_loss;
            let e_cur = exit;
            cycle_loss = e_cur;
            let diff = (e_cur - e_prev).abs();
            let hit_abs = exp_cfg.term_abs.map_or(false, |t| diff <= t);
            let hit_rel = exp_cfg
                .term_rel
                .map_or(false, |t| e_prev != T::zero() && diff / e_prev.abs() <= t);
            if hit_abs || hit_rel {
                outcome = ExpansiveOutcome::Terminated;
                break 'expand;
            }
            if remaining(total_iters) == Some(0) {
                outcome = ExpansiveOutcome::MaxTotalIters;
                break 'expand;
            }
        }
    }

    let final_loss = mean_batch_loss(energy, &params, batches)?;
    Ok(ExpansiveRun {
        params,
        records,
        summary: ExpansiveSummary {
            phases,
            expansions,
            total_iterations: total_iters,
            final_loss,
            outcome,
        },
    })
}
