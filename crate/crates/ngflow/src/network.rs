//! ResNet-style scalar-output networks: forward evaluation, exact parameter
//! Jacobians, mixed spatial-parameter derivatives, and the two structural
//! expansion operations with zero-weight embedding.
//!
//! A network of depth `L` is the composition of blocks
//! `z -> J z + sigma(W z + b)` followed by a linear closing layer
//! `z -> closing . z` (no bias). `J` is a truncated/padded identity, so a
//! block with zero weights is the identity (or canonical injection) and any
//! network embeds exactly into an expanded one by zero-initializing the new
//! weights.
//!
//! Parameter flattening is canonical and stable: blocks in order, `W`
//! row-major, then `b`, and the closing vector last. Flow-matrix indices,
//! regularization diagonals, and checkpoints all rely on this order.

use crate::scalar::{cast, Scalar};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CHECKPOINT_VERSION: &str = "ngflow-params-v1";

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("add_layer width {got} must equal the current last width {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
}

impl Activation {
    #[inline]
    pub fn value<T: Scalar>(self, t: T) -> T {
        match self {
            Activation::Tanh => t.tanh(),
        }
    }

    /// First derivative expressed through the activation value.
    #[inline]
    pub fn d1_from_value<T: Scalar>(self, s: T) -> T {
        match self {
            Activation::Tanh => T::one() - s * s,
        }
    }

    /// Second derivative expressed through the activation value.
    #[inline]
    pub fn d2_from_value<T: Scalar>(self, s: T) -> T {
        match self {
            Activation::Tanh => -(s + s) * (T::one() - s * s),
        }
    }
}

/// Layer widths and activation of a network; depth is the number of blocks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
}

impl Architecture {
    pub fn new(
        input_dim: usize,
        layer_widths: Vec<usize>,
        activation: Activation,
    ) -> Result<Self, NetworkError> {
        if input_dim == 0 || layer_widths.is_empty() || layer_widths.contains(&0) {
            return Err(NetworkError::ShapeMismatch(
                "input dimension and all layer widths must be positive".into(),
            ));
        }
        Ok(Self {
            input_dim,
            layer_widths,
            activation,
        })
    }

    pub fn depth(&self) -> usize {
        self.layer_widths.len()
    }

    /// Input width of block `j` (1-based).
    pub fn width_in(&self, j: usize) -> usize {
        if j == 1 {
            self.input_dim
        } else {
            self.layer_widths[j - 2]
        }
    }

    /// Output width of block `j` (1-based).
    pub fn width_out(&self, j: usize) -> usize {
        self.layer_widths[j - 1]
    }

    pub fn last_width(&self) -> usize {
        *self.layer_widths.last().expect("depth >= 1")
    }

    /// Total trainable parameter count, closing vector included.
    pub fn param_count(&self) -> usize {
        (1..=self.depth())
            .map(|j| self.width_out(j) * (self.width_in(j) + 1))
            .sum::<usize>()
            + self.last_width()
    }

    /// Flat offset of block `j`'s parameters in canonical order.
    pub fn block_offset(&self, j: usize) -> usize {
        (1..j)
            .map(|i| self.width_out(i) * (self.width_in(i) + 1))
            .sum()
    }

    /// Flat offset of the closing vector.
    pub fn closing_offset(&self) -> usize {
        self.block_offset(self.depth() + 1)
    }
}

/// One ResNet block `z -> J z + sigma(W z + b)`.
///
/// `j_rank` is the number of leading identity rows in `J`. It equals
/// `min(d_out, d_in)` for freshly constructed blocks; width expansion keeps
/// the pre-expansion rank so appended rows carry no skip connection and the
/// embedding stays exact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockParams<T> {
    /// Row-major `d_out x d_in`.
    pub w: Vec<T>,
    pub b: Vec<T>,
    pub j_rank: usize,
}

/// Full parameter state of a network plus the per-parameter active mask.
///
/// Masked-out (frozen) parameters produce no Jacobian entries and are never
/// touched by optimizer updates.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<T> {
    pub arch: Architecture,
    pub blocks: Vec<BlockParams<T>>,
    pub closing: Vec<T>,
    pub active_mask: Vec<bool>,
}

/// Value, optional spatial derivative, and exact parameter Jacobians of a
/// network at one input point, restricted to active parameters in canonical
/// order.
#[derive(Clone, Debug)]
pub struct EvalBundle<T> {
    pub value: T,
    /// Derivative of the value in the requested input coordinate.
    pub dvalue_dx: Option<T>,
    pub jac_theta: Vec<T>,
    /// Derivative of each `jac_theta` entry in the requested coordinate.
    pub jac_mixed: Option<Vec<T>>,
}

/// Precomputed mapping flat parameter index -> position among active
/// parameters. Shared across samples when assembling a batch.
#[derive(Clone, Debug)]
pub struct ActiveLayout {
    pos: Vec<Option<usize>>,
    pub indices: Vec<usize>,
}

impl ActiveLayout {
    pub fn count(&self) -> usize {
        self.indices.len()
    }

    #[inline]
    fn position(&self, flat: usize) -> Option<usize> {
        self.pos[flat]
    }
}

impl<T: Scalar> NetworkParams<T> {
    pub fn zeros(arch: Architecture) -> Self {
        let blocks = (1..=arch.depth())
            .map(|j| BlockParams {
                w: vec![T::zero(); arch.width_out(j) * arch.width_in(j)],
                b: vec![T::zero(); arch.width_out(j)],
                j_rank: arch.width_out(j).min(arch.width_in(j)),
            })
            .collect();
        let closing = vec![T::zero(); arch.last_width()];
        let count = arch.param_count();
        Self {
            arch,
            blocks,
            closing,
            active_mask: vec![true; count],
        }
    }

    /// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` per block, same
    /// bound for biases; closing entries use the last width as fan-in.
    pub fn random_init(arch: Architecture, rng: &mut impl Rng) -> Self {
        let mut net = Self::zeros(arch);
        for j in 1..=net.arch.depth() {
            let bound = 1.0 / (net.arch.width_in(j) as f64).sqrt();
            let block = &mut net.blocks[j - 1];
            for w in block.w.iter_mut().chain(block.b.iter_mut()) {
                *w = cast::<T>(rng.gen_range(-bound..bound));
            }
        }
        let bound = 1.0 / (net.arch.last_width() as f64).sqrt();
        for z in net.closing.iter_mut() {
            *z = cast::<T>(rng.gen_range(-bound..bound));
        }
        net
    }

    pub fn param_count(&self) -> usize {
        self.arch.param_count()
    }

    pub fn active_layout(&self) -> ActiveLayout {
        let mut pos = vec![None; self.active_mask.len()];
        let mut indices = Vec::new();
        for (flat, &on) in self.active_mask.iter().enumerate() {
            if on {
                pos[flat] = Some(indices.len());
                indices.push(flat);
            }
        }
        ActiveLayout { pos, indices }
    }

    pub fn set_active_all(&mut self, on: bool) {
        self.active_mask.fill(on);
    }

    /// Activates exactly the given flat indices.
    pub fn set_active_indices(&mut self, indices: &[usize]) {
        self.active_mask.fill(false);
        for &i in indices {
            self.active_mask[i] = true;
        }
    }

    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        for block in &self.blocks {
            out.extend_from_slice(&block.w);
            out.extend_from_slice(&block.b);
        }
        out.extend_from_slice(&self.closing);
        out
    }

    pub fn from_flat(
        arch: Architecture,
        flat: &[T],
        active_mask: Vec<bool>,
    ) -> Result<Self, NetworkError> {
        let count = arch.param_count();
        if flat.len() != count || active_mask.len() != count {
            return Err(NetworkError::ShapeMismatch(format!(
                "expected {count} parameters, got {} (mask {})",
                flat.len(),
                active_mask.len()
            )));
        }
        let mut net = Self::zeros(arch);
        net.active_mask = active_mask;
        net.assign_flat(flat);
        Ok(net)
    }

    fn assign_flat(&mut self, flat: &[T]) {
        let mut cur = 0;
        for block in &mut self.blocks {
            let wn = block.w.len();
            block.w.copy_from_slice(&flat[cur..cur + wn]);
            cur += wn;
            let bn = block.b.len();
            block.b.copy_from_slice(&flat[cur..cur + bn]);
            cur += bn;
        }
        self.closing.copy_from_slice(&flat[cur..]);
    }

    /// Returns a copy with `theta_active += scale * delta`; frozen parameters
    /// are bitwise untouched.
    pub fn with_active_delta(&self, layout: &ActiveLayout, delta: &[T], scale: T) -> Self {
        debug_assert_eq!(delta.len(), layout.count());
        let mut flat = self.flatten();
        for (k, &flat_idx) in layout.indices.iter().enumerate() {
            flat[flat_idx] = flat[flat_idx] + scale * delta[k];
        }
        let mut out = self.clone();
        out.assign_flat(&flat);
        out
    }

    fn check_input(&self, x: &[T]) -> Result<(), NetworkError> {
        if x.len() != self.arch.input_dim {
            return Err(NetworkError::ShapeMismatch(format!(
                "input length {} vs input_dim {}",
                x.len(),
                self.arch.input_dim
            )));
        }
        Ok(())
    }

    /// Forward evaluation: `closing . N_L(x)`.
    pub fn forward(&self, x: &[T]) -> Result<T, NetworkError> {
        self.check_input(x)?;
        let act = self.arch.activation;
        let mut z = x.to_vec();
        for block in &self.blocks {
            let d_out = block.b.len();
            let d_in = z.len();
            let mut next = vec![T::zero(); d_out];
            for r in 0..d_out {
                let row = &block.w[r * d_in..(r + 1) * d_in];
                let mut pre = block.b[r];
                for (wv, zv) in row.iter().zip(&z) {
                    pre = pre + *wv * *zv;
                }
                let skip = if r < block.j_rank { z[r] } else { T::zero() };
                next[r] = skip + act.value(pre);
            }
            z = next;
        }
        Ok(self
            .closing
            .iter()
            .zip(&z)
            .map(|(&c, &zv)| c * zv)
            .sum())
    }

    /// Output of the last block (before the closing layer) and, when
    /// requested, its derivative in input coordinate `want_dx`.
    pub fn hidden_state(
        &self,
        x: &[T],
        want_dx: Option<usize>,
    ) -> Result<(Vec<T>, Option<Vec<T>>), NetworkError> {
        let trace = self.forward_trace(x, want_dx)?;
        let z_last = trace.zs.last().cloned().expect("depth >= 1");
        let t_last = trace.ts.as_ref().map(|ts| ts.last().cloned().unwrap());
        Ok((z_last, t_last))
    }

    /// Full evaluation: value, optional spatial derivative, exact Jacobian
    /// with respect to every active parameter, and (when `want_dx` is given)
    /// the spatial derivative of each Jacobian entry.
    pub fn eval_bundle(
        &self,
        x: &[T],
        want_dx: Option<usize>,
    ) -> Result<EvalBundle<T>, NetworkError> {
        let layout = self.active_layout();
        let n = layout.count();
        let mut jac = vec![T::zero(); n];
        let mut mixed = want_dx.map(|_| vec![T::zero(); n]);
        let (value, dvalue) = self.eval_into(x, want_dx, &layout, &mut jac, mixed.as_deref_mut())?;
        Ok(EvalBundle {
            value,
            dvalue_dx: dvalue,
            jac_theta: jac,
            jac_mixed: mixed,
        })
    }

    /// Workhorse shared by `eval_bundle` and batch assembly: writes the active
    /// Jacobian (and mixed derivatives) into caller-provided slices.
    pub(crate) fn eval_into(
        &self,
        x: &[T],
        want_dx: Option<usize>,
        layout: &ActiveLayout,
        jac_out: &mut [T],
        mut mixed_out: Option<&mut [T]>,
    ) -> Result<(T, Option<T>), NetworkError> {
        debug_assert_eq!(jac_out.len(), layout.count());
        let trace = self.forward_trace(x, want_dx)?;
        let act = self.arch.activation;
        let depth = self.arch.depth();
        let z_last = &trace.zs[depth];

        let value: T = self.closing.iter().zip(z_last).map(|(&c, &z)| c * z).sum();
        let dvalue = trace.ts.as_ref().map(|ts| {
            self.closing
                .iter()
                .zip(&ts[depth])
                .map(|(&c, &t)| c * t)
                .sum()
        });

        // Closing-layer entries: value is linear in the closing vector.
        let closing_base = self.arch.closing_offset();
        for i in 0..self.closing.len() {
            if let Some(p) = layout.position(closing_base + i) {
                jac_out[p] = z_last[i];
                if let Some(m) = mixed_out.as_deref_mut() {
                    m[p] = trace.ts.as_ref().expect("mixed requires want_dx")[depth][i];
                }
            }
        }

        // Reverse sweep. g = dN/dz_j, u = d(g)/dx_c.
        let mut g = self.closing.clone();
        let mut u = want_dx.map(|_| vec![T::zero(); self.closing.len()]);
        for j in (1..=depth).rev() {
            let block = &self.blocks[j - 1];
            let d_out = self.arch.width_out(j);
            let d_in = self.arch.width_in(j);
            let z_prev = &trace.zs[j - 1];
            let sig = &trace.sig[j - 1];

            // gs_r = g_r sigma'(pre_r); us_r = u_r sigma'(pre_r) + g_r sigma''(pre_r) pre_dot_r
            let mut gs = vec![T::zero(); d_out];
            let mut us = want_dx.map(|_| vec![T::zero(); d_out]);
            for r in 0..d_out {
                let d1 = act.d1_from_value(sig[r]);
                gs[r] = g[r] * d1;
                if let (Some(us), Some(u)) = (us.as_mut(), u.as_ref()) {
                    let d2 = act.d2_from_value(sig[r]);
                    let pre_dot = trace.pre_dot.as_ref().unwrap()[j - 1][r];
                    us[r] = u[r] * d1 + g[r] * d2 * pre_dot;
                }
            }

            // Block entries. dN/dW_rs = gs_r z_prev_s, dN/db_r = gs_r;
            // mixed adds us_r z_prev_s + gs_r t_prev_s (resp. us_r).
            let base = self.arch.block_offset(j);
            let t_prev = trace.ts.as_ref().map(|ts| &ts[j - 1]);
            for r in 0..d_out {
                for s in 0..d_in {
                    if let Some(p) = layout.position(base + r * d_in + s) {
                        jac_out[p] = gs[r] * z_prev[s];
                        if let Some(m) = mixed_out.as_deref_mut() {
                            m[p] = us.as_ref().unwrap()[r] * z_prev[s]
                                + gs[r] * t_prev.unwrap()[s];
                        }
                    }
                }
                if let Some(p) = layout.position(base + d_out * d_in + r) {
                    jac_out[p] = gs[r];
                    if let Some(m) = mixed_out.as_deref_mut() {
                        m[p] = us.as_ref().unwrap()[r];
                    }
                }
            }

            // Propagate adjoints: g_prev = J^T g + W^T gs.
            let mut g_prev = vec![T::zero(); d_in];
            let mut u_prev = want_dx.map(|_| vec![T::zero(); d_in]);
            for s in 0..d_in.min(block.j_rank) {
                g_prev[s] = g[s];
                if let (Some(up), Some(u)) = (u_prev.as_mut(), u.as_ref()) {
                    up[s] = u[s];
                }
            }
            for r in 0..d_out {
                let row = &block.w[r * d_in..(r + 1) * d_in];
                let gr = gs[r];
                for s in 0..d_in {
                    g_prev[s] += row[s] * gr;
                }
                if let (Some(up), Some(us)) = (u_prev.as_mut(), us.as_ref()) {
                    let ur = us[r];
                    for s in 0..d_in {
                        up[s] += row[s] * ur;
                    }
                }
            }
            g = g_prev;
            u = u_prev;
        }

        Ok((value, dvalue))
    }

    fn forward_trace(&self, x: &[T], want_dx: Option<usize>) -> Result<Trace<T>, NetworkError> {
        self.check_input(x)?;
        if let Some(c) = want_dx {
            if c >= self.arch.input_dim {
                return Err(NetworkError::ShapeMismatch(format!(
                    "derivative coordinate {c} vs input_dim {}",
                    self.arch.input_dim
                )));
            }
        }
        let act = self.arch.activation;
        let depth = self.arch.depth();
        let mut zs = Vec::with_capacity(depth + 1);
        zs.push(x.to_vec());
        let mut sig = Vec::with_capacity(depth);
        let mut ts = want_dx.map(|c| {
            let mut t0 = vec![T::zero(); x.len()];
            t0[c] = T::one();
            vec![t0]
        });
        let mut pre_dot = want_dx.map(|_| Vec::with_capacity(depth));

        for (jm1, block) in self.blocks.iter().enumerate() {
            let d_out = block.b.len();
            let z = &zs[jm1];
            let d_in = z.len();
            let mut z_next = vec![T::zero(); d_out];
            let mut sig_j = vec![T::zero(); d_out];
            let mut t_next = ts.as_ref().map(|_| vec![T::zero(); d_out]);
            let mut pd_j = pre_dot.as_ref().map(|_| vec![T::zero(); d_out]);
            for r in 0..d_out {
                let row = &block.w[r * d_in..(r + 1) * d_in];
                let mut pre = block.b[r];
                for (wv, zv) in row.iter().zip(z) {
                    pre = pre + *wv * *zv;
                }
                let s = act.value(pre);
                sig_j[r] = s;
                let skip = if r < block.j_rank { z[r] } else { T::zero() };
                z_next[r] = skip + s;
                if let (Some(tn), Some(pd)) = (t_next.as_mut(), pd_j.as_mut()) {
                    let t = &ts.as_ref().unwrap()[jm1];
                    let mut dot = T::zero();
                    for (wv, tv) in row.iter().zip(t) {
                        dot = dot + *wv * *tv;
                    }
                    pd[r] = dot;
                    let t_skip = if r < block.j_rank { t[r] } else { T::zero() };
                    tn[r] = t_skip + act.d1_from_value(s) * dot;
                }
            }
            zs.push(z_next);
            sig.push(sig_j);
            if let Some(ts) = ts.as_mut() {
                ts.push(t_next.unwrap());
            }
            if let Some(pds) = pre_dot.as_mut() {
                pds.push(pd_j.unwrap());
            }
        }
        Ok(Trace {
            zs,
            sig,
            ts,
            pre_dot,
        })
    }

    /// Inserts a new block of width `m` before the closing layer with zero
    /// weights, so the returned network evaluates identically to `self`.
    /// Returns the flat indices of the new block's parameters.
    ///
    /// `m` must equal the current last width: the closing vector is reused
    /// in place (its update is additive), which requires matching lengths.
    pub fn add_layer(&self, m: usize) -> Result<(Self, Vec<usize>), NetworkError> {
        let d_last = self.arch.last_width();
        if m != d_last {
            return Err(NetworkError::WidthMismatch {
                expected: d_last,
                got: m,
            });
        }
        let mut widths = self.arch.layer_widths.clone();
        widths.push(m);
        let arch = Architecture::new(self.arch.input_dim, widths, self.arch.activation)?;
        let mut blocks = self.blocks.clone();
        blocks.push(BlockParams {
            w: vec![T::zero(); m * d_last],
            b: vec![T::zero(); m],
            j_rank: m.min(d_last),
        });
        let new_base = arch.block_offset(arch.depth());
        let new_count = m * (d_last + 1);
        let new_indices: Vec<usize> = (new_base..new_base + new_count).collect();

        // Splice the mask: old blocks, new block (active), closing.
        let old_closing_base = self.arch.closing_offset();
        let mut active_mask = Vec::with_capacity(arch.param_count());
        active_mask.extend_from_slice(&self.active_mask[..old_closing_base]);
        active_mask.extend(std::iter::repeat(true).take(new_count));
        active_mask.extend_from_slice(&self.active_mask[old_closing_base..]);

        Ok((
            Self {
                arch,
                blocks,
                closing: self.closing.clone(),
                active_mask,
            },
            new_indices,
        ))
    }

    /// Appends `d_e` rows to the last block and extends the closing vector by
    /// zeros (or by the given seed values). The pre-expansion `j_rank` of the
    /// last block is preserved, so appended rows carry no skip connection and
    /// zero seeds leave the output unchanged.
    pub fn add_width(
        &self,
        d_e: usize,
        seed: Option<WidthSeed<'_, T>>,
    ) -> Result<Self, NetworkError> {
        assert!(d_e >= 1);
        let depth = self.arch.depth();
        let d_in = self.arch.width_in(depth);
        let d_last = self.arch.last_width();
        if let Some(s) = &seed {
            if s.w_rows.len() != d_e * d_in || s.b.len() != d_e || s.closing.len() != d_e {
                return Err(NetworkError::ShapeMismatch(
                    "width-expansion seed dimensions".into(),
                ));
            }
        }
        let mut widths = self.arch.layer_widths.clone();
        *widths.last_mut().unwrap() += d_e;
        let arch = Architecture::new(self.arch.input_dim, widths, self.arch.activation)?;

        let mut blocks = self.blocks.clone();
        let last = blocks.last_mut().unwrap();
        match &seed {
            Some(s) => {
                last.w.extend_from_slice(s.w_rows);
                last.b.extend_from_slice(s.b);
            }
            None => {
                last.w.extend(std::iter::repeat(T::zero()).take(d_e * d_in));
                last.b.extend(std::iter::repeat(T::zero()).take(d_e));
            }
        }

        let mut closing = self.closing.clone();
        match &seed {
            Some(s) => closing.extend_from_slice(s.closing),
            None => closing.extend(std::iter::repeat(T::zero()).take(d_e)),
        }

        // Rebuild the mask around the enlarged last block and closing vector.
        let old_base = self.arch.block_offset(depth);
        let mut active_mask = Vec::with_capacity(arch.param_count());
        active_mask.extend_from_slice(&self.active_mask[..old_base]);
        // old W rows, then new W rows
        active_mask
            .extend_from_slice(&self.active_mask[old_base..old_base + d_last * d_in]);
        active_mask.extend(std::iter::repeat(true).take(d_e * d_in));
        // old b, then new b
        active_mask.extend_from_slice(
            &self.active_mask[old_base + d_last * d_in..old_base + d_last * d_in + d_last],
        );
        active_mask.extend(std::iter::repeat(true).take(d_e));
        // old closing, then new closing
        active_mask.extend_from_slice(&self.active_mask[self.arch.closing_offset()..]);
        active_mask.extend(std::iter::repeat(true).take(d_e));

        Ok(Self {
            arch,
            blocks,
            closing,
            active_mask,
        })
    }

    pub fn to_checkpoint_json(&self) -> String {
        let doc = Checkpoint {
            version: CHECKPOINT_VERSION.to_string(),
            arch: self.arch.clone(),
            j_ranks: self.blocks.iter().map(|b| b.j_rank).collect(),
            params: self.flatten(),
            active_mask: self.active_mask.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("checkpoint serializes")
    }

    pub fn from_checkpoint_json(s: &str) -> Result<Self, NetworkError> {
        let doc: Checkpoint<T> =
            serde_json::from_str(s).map_err(|e| NetworkError::BadCheckpoint(e.to_string()))?;
        if doc.version != CHECKPOINT_VERSION {
            return Err(NetworkError::BadCheckpoint(format!(
                "version {} (expected {CHECKPOINT_VERSION})",
                doc.version
            )));
        }
        let mut net = Self::from_flat(doc.arch, &doc.params, doc.active_mask)?;
        if doc.j_ranks.len() != net.blocks.len() {
            return Err(NetworkError::BadCheckpoint("j_ranks length".into()));
        }
        for (block, r) in net.blocks.iter_mut().zip(doc.j_ranks) {
            block.j_rank = r;
        }
        Ok(net)
    }
}

/// Seed values for `add_width`: `w_rows` is row-major `d_e x d_in`.
pub struct WidthSeed<'a, T> {
    pub w_rows: &'a [T],
    pub b: &'a [T],
    pub closing: &'a [T],
}

struct Trace<T> {
    /// zs[j] = block-j output (zs[0] = input), length depth+1.
    zs: Vec<Vec<T>>,
    /// sig[j-1] = sigma(pre) of block j.
    sig: Vec<Vec<T>>,
    /// Forward duals d zs / d x_c.
    ts: Option<Vec<Vec<T>>>,
    /// pre_dot[j-1] = W_j t_{j-1}.
    pre_dot: Option<Vec<Vec<T>>>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint<T> {
    version: String,
    arch: Architecture,
    j_ranks: Vec<usize>,
    params: Vec<T>,
    active_mask: Vec<bool>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn arch(input: usize, widths: &[usize]) -> Architecture {
        Architecture::new(input, widths.to_vec(), Activation::Tanh).unwrap()
    }

    fn random_net(input: usize, widths: &[usize], seed: u64) -> NetworkParams<f64> {
        let mut rng = StdRng::seed_from_u64(seed);
        NetworkParams::random_init(arch(input, widths), &mut rng)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
    }

    #[test]
    fn forward_identity_block() {
        let net = NetworkParams::<f64>::from_flat(
            arch(1, &[1]),
            &[0.0, 0.0, 1.0], // W=0, b=0, closing=1
            vec![true; 3],
        )
        .unwrap();
        assert_eq!(net.forward(&[0.7]).unwrap(), 0.7);
    }

    #[test]
    fn forward_zero_closing() {
        let mut net = random_net(2, &[4, 4], 1);
        net.closing.fill(0.0);
        for seed in 0..5 {
            let mut rng = StdRng::seed_from_u64(seed);
            let x = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            assert_eq!(net.forward(&x).unwrap(), 0.0);
        }
    }

    #[test]
    fn forward_hand_composed_injection() {
        // d0=1 -> d1=2, W=(1,-1)^T, b=0, closing=(1,1): tanh terms cancel.
        let net = NetworkParams::<f64>::from_flat(
            arch(1, &[2]),
            &[1.0, -1.0, 0.0, 0.0, 1.0, 1.0],
            vec![true; 6],
        )
        .unwrap();
        let x = 0.3;
        let got = net.forward(&[x]).unwrap();
        let want = (x + x.tanh()) + (0.0 + (-x).tanh());
        assert!((got - want).abs() < 1e-15);
        assert!((got - 0.3).abs() < 1e-15);
    }

    #[test]
    fn closing_jacobian_is_hidden_state() {
        let net = random_net(1, &[3, 3], 5);
        let x = [0.4];
        let bundle = net.eval_bundle(&x, None).unwrap();
        let (hidden, _) = net.hidden_state(&x, None).unwrap();
        let base = net.arch.closing_offset();
        for i in 0..3 {
            assert_eq!(bundle.jac_theta[base + i], hidden[i]);
        }
    }

    #[test]
    fn bias_jacobian_zero_when_closing_zero() {
        let mut net = NetworkParams::<f64>::zeros(arch(1, &[1]));
        net.closing[0] = 0.0;
        let bundle = net.eval_bundle(&[0.9], None).unwrap();
        // dN/db_1 = closing_1 * sigma'(0) = 0
        assert_eq!(bundle.jac_theta[1], 0.0);
    }

    fn fd_jac(net: &NetworkParams<f64>, x: &[f64], h: f64) -> Vec<f64> {
        let layout = net.active_layout();
        let flat = net.flatten();
        layout
            .indices
            .iter()
            .map(|&idx| {
                let mut plus = flat.clone();
                plus[idx] += h;
                let mut minus = flat.clone();
                minus[idx] -= h;
                let mask = net.active_mask.clone();
                let np = NetworkParams::from_flat(net.arch.clone(), &plus, mask.clone()).unwrap();
                let nm = NetworkParams::from_flat(net.arch.clone(), &minus, mask).unwrap();
                (np.forward(x).unwrap() - nm.forward(x).unwrap()) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let net = random_net(1, &[3, 3], 11);
        let x = [0.37];
        let bundle = net.eval_bundle(&x, Some(0)).unwrap();
        let fd = fd_jac(&net, &x, 1e-5);
        for (a, b) in bundle.jac_theta.iter().zip(&fd) {
            assert!(rel_err(*a, *b) <= 1e-6, "jac {a} vs fd {b}");
        }
        // mixed: finite difference of the jacobian in x
        let h = 1e-5;
        let jp = net.eval_bundle(&[x[0] + h], None).unwrap().jac_theta;
        let jm = net.eval_bundle(&[x[0] - h], None).unwrap().jac_theta;
        let mixed = bundle.jac_mixed.unwrap();
        for (k, m) in mixed.iter().enumerate() {
            let fd = (jp[k] - jm[k]) / (2.0 * h);
            assert!(rel_err(*m, fd) <= 1e-6, "mixed {m} vs fd {fd}");
        }
        // spatial derivative
        let vp = net.forward(&[x[0] + h]).unwrap();
        let vm = net.forward(&[x[0] - h]).unwrap();
        let dv = bundle.dvalue_dx.unwrap();
        assert!(rel_err(dv, (vp - vm) / (2.0 * h)) <= 1e-6);
    }

    #[test]
    fn mixed_derivative_symmetry() {
        // d/dx dN/dtheta_i computed analytically equals d/dtheta_i (dN/dx)
        // computed by differencing the spatial derivative in theta.
        let net = random_net(1, &[4, 3], 23);
        let x = [0.21];
        let bundle = net.eval_bundle(&x, Some(0)).unwrap();
        let mixed = bundle.jac_mixed.unwrap();
        let layout = net.active_layout();
        let flat = net.flatten();
        let h = 1e-6;
        for (k, &idx) in layout.indices.iter().enumerate() {
            let mut plus = flat.clone();
            plus[idx] += h;
            let mut minus = flat.clone();
            minus[idx] -= h;
            let np =
                NetworkParams::from_flat(net.arch.clone(), &plus, net.active_mask.clone()).unwrap();
            let nm = NetworkParams::from_flat(net.arch.clone(), &minus, net.active_mask.clone())
                .unwrap();
            let dp = np.eval_bundle(&x, Some(0)).unwrap().dvalue_dx.unwrap();
            let dm = nm.eval_bundle(&x, Some(0)).unwrap().dvalue_dx.unwrap();
            let fd = (dp - dm) / (2.0 * h);
            assert!(
                rel_err(mixed[k], fd) <= 1e-6,
                "param {idx}: mixed {} vs theta-difference of dx {fd}",
                mixed[k]
            );
        }
    }

    #[test]
    fn add_layer_embeds_exactly() {
        let net = random_net(1, &[5], 3);
        let (expanded, new_idx) = net.add_layer(5).unwrap();
        assert_eq!(new_idx.len(), 5 * (5 + 1));
        assert_eq!(
            expanded.param_count(),
            net.param_count() + 5 * (5 + 1)
        );
        assert_eq!(expanded.closing.len(), 5);
        let mut rng = StdRng::seed_from_u64(9);
        for _ in 0..100 {
            let x = [rng.gen_range(-2.0..2.0)];
            let a = net.forward(&x).unwrap();
            let b = expanded.forward(&x).unwrap();
            assert!((a - b).abs() <= 1e-15);
        }
    }

    #[test]
    fn add_layer_rejects_other_widths() {
        let net = random_net(1, &[5], 3);
        assert!(matches!(
            net.add_layer(4),
            Err(NetworkError::WidthMismatch { expected: 5, got: 4 })
        ));
    }

    #[test]
    fn add_layer_epsilon_bias_hand_formula() {
        // width-1 net: after expansion, setting the new block's bias to eps
        // shifts the output by closing * tanh(eps).
        let net = random_net(1, &[1], 17);
        let (mut expanded, _) = net.add_layer(1).unwrap();
        let eps = 1e-3;
        expanded.blocks.last_mut().unwrap().b[0] = eps;
        let x = [0.6];
        let want = net.forward(&x).unwrap() + net.closing[0] * eps.tanh();
        let got = expanded.forward(&x).unwrap();
        assert!((got - want).abs() < 1e-14);
    }

    #[test]
    fn add_width_embeds_and_counts() {
        let net = random_net(2, &[4, 3], 8);
        let expanded = net.add_width(2, None).unwrap();
        assert_eq!(
            expanded.param_count(),
            net.param_count() + 2 * (4 + 1) + 2
        );
        let mut rng = StdRng::seed_from_u64(10);
        for _ in 0..100 {
            let x = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let a = net.forward(&x).unwrap();
            let b = expanded.forward(&x).unwrap();
            assert!((a - b).abs() <= 1e-15);
        }
    }

    #[test]
    fn add_width_nonzero_seed_hand_formula() {
        // width-1 net: widened output is T_old + xi * tanh(w * N_prev + b).
        let net = random_net(1, &[1, 1], 4);
        let (w, b, xi) = (0.7, -0.2, 0.5);
        let expanded = net
            .add_width(
                1,
                Some(WidthSeed {
                    w_rows: &[w],
                    b: &[b],
                    closing: &[xi],
                }),
            )
            .unwrap();
        let x = [0.35];
        // N_prev = output of block 1 (input to the last block)
        let shallow = NetworkParams {
            arch: arch(1, &[1]),
            blocks: vec![net.blocks[0].clone()],
            closing: vec![1.0],
            active_mask: vec![true; 3],
        };
        let n_prev = shallow.forward(&x).unwrap();
        let want = net.forward(&x).unwrap() + xi * (w * n_prev + b).tanh();
        let got = expanded.forward(&x).unwrap();
        assert!((got - want).abs() < 1e-14, "{got} vs {want}");
    }

    #[test]
    fn frozen_parameters_emit_no_jacobian() {
        let mut net = random_net(1, &[3], 6);
        let closing_base = net.arch.closing_offset();
        net.set_active_indices(&[closing_base, closing_base + 1, closing_base + 2]);
        let bundle = net.eval_bundle(&[0.5], None).unwrap();
        assert_eq!(bundle.jac_theta.len(), 3);
        let (hidden, _) = net.hidden_state(&[0.5], None).unwrap();
        for i in 0..3 {
            assert_eq!(bundle.jac_theta[i], hidden[i]);
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let net = random_net(2, &[4, 3], 99);
        let json = net.to_checkpoint_json();
        let back = NetworkParams::<f64>::from_checkpoint_json(&json).unwrap();
        assert_eq!(net, back);
    }

    #[test]
    fn f32_forward_runs() {
        let mut rng = StdRng::seed_from_u64(2);
        let net = NetworkParams::<f32>::random_init(arch(1, &[4]), &mut rng);
        let v = net.forward(&[0.3f32]).unwrap();
        assert!(v.is_finite());
    }
}
