//! Hybrid mixture of experts.
//!
//! Non-edge tokens pass through the shared expert only. Edge tokens route to
//! their top-1 expert by sigmoid affinity and combine that expert's output
//! with the shared expert's, exp-weighted by the affinity scores. The
//! parallel path rearranges edge tokens into contiguous per-expert blocks so
//! each expert runs one blocked matmul; the per-token sequential path is the
//! correctness oracle and benchmark baseline. Both paths perform every f32
//! operation in the same order, so they agree bitwise regardless of the
//! rayon thread count.

use crate::error::{Error, Result};
use crate::kernels::{gelu, gelu_inplace, matmul, sigmoid};
use crate::routing::EdgeMap;
use crate::tensor::Tensor;
use rayon::prelude::*;
use serde::Serialize;
use std::time::Instant;

/// One expert: `d → hidden → d` with GELU, hidden = 4d by construction.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub w1: Tensor, // d×hidden
    pub b1: Tensor,
    pub w2: Tensor, // hidden×d
    pub b2: Tensor,
}

impl Ffn {
    pub fn validate(&self) -> Result<()> {
        let (d, hidden) = (self.w1.rows(), self.w1.cols());
        if self.w2.shape() != [hidden, d] {
            return Err(Error::dim("ffn: w2 must be hidden×d"));
        }
        if self.b1.numel() != hidden || self.b2.numel() != d {
            return Err(Error::dim("ffn: bias extents"));
        }
        Ok(())
    }

    /// Batched forward over `N×d` rows.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = matmul(x, &self.w1)?;
        for i in 0..h.rows() {
            for (v, b) in h.row_mut(i).iter_mut().zip(self.b1.data()) {
                *v += b;
            }
        }
        gelu_inplace(&mut h);
        let mut y = matmul(&h, &self.w2)?;
        for i in 0..y.rows() {
            for (v, b) in y.row_mut(i).iter_mut().zip(self.b2.data()) {
                *v += b;
            }
        }
        Ok(y)
    }

    /// Single-row forward with the same accumulation order as [`forward`].
    pub fn forward_row(&self, row: &[f32]) -> Vec<f32> {
        let (d, hidden) = (self.w1.rows(), self.w1.cols());
        let mut h = vec![0.0f32; hidden];
        for (t, &xv) in row.iter().enumerate() {
            for (hv, &wv) in h.iter_mut().zip(self.w1.row(t)) {
                *hv += xv * wv;
            }
        }
        for (hv, &b) in h.iter_mut().zip(self.b1.data()) {
            *hv += b;
        }
        for hv in h.iter_mut() {
            *hv = gelu(*hv);
        }
        let mut y = vec![0.0f32; d];
        for (t, &hv) in h.iter().enumerate() {
            for (yv, &wv) in y.iter_mut().zip(self.w2.row(t)) {
                *yv += hv * wv;
            }
        }
        for (yv, &b) in y.iter_mut().zip(self.b2.data()) {
            *yv += b;
        }
        y
    }
}

/// M routed experts, one shared expert, and M+1 routing centroids
/// (index M belongs to the shared expert).
#[derive(Clone, Debug)]
pub struct ExpertBank {
    pub routed: Vec<Ffn>,
    pub shared: Ffn,
    pub centroids: Tensor, // (M+1)×d
}

impl ExpertBank {
    pub fn validate(&self) -> Result<()> {
        let d = self.shared.w1.rows();
        self.shared.validate()?;
        for e in &self.routed {
            e.validate()?;
            if e.w1.shape() != self.shared.w1.shape() {
                return Err(Error::dim("experts must share layer shapes"));
            }
        }
        if self.centroids.shape() != [self.routed.len() + 1, d] {
            return Err(Error::dim(format!(
                "centroids {:?}, want {}x{}",
                self.centroids.shape(),
                self.routed.len() + 1,
                d
            )));
        }
        Ok(())
    }

    pub fn num_routed(&self) -> usize {
        self.routed.len()
    }
}

/// Token-expert affinity: `s[t,i] = sigmoid(x_t · e_i)` for all M+1 experts.
pub fn affinity(x: &Tensor, centroids: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 || centroids.rank() != 2 || x.cols() != centroids.cols() {
        return Err(Error::dim(format!(
            "affinity: {:?} vs centroids {:?}",
            x.shape(),
            centroids.shape()
        )));
    }
    let (n, experts) = (x.rows(), centroids.rows());
    let mut s = Tensor::zeros(vec![n, experts]);
    for t in 0..n {
        let row = x.row(t);
        for i in 0..experts {
            let mut dot = 0.0f32;
            for (a, b) in row.iter().zip(centroids.row(i)) {
                dot += a * b;
            }
            s.row_mut(t)[i] = sigmoid(dot);
        }
    }
    Ok(s)
}

/// Top-1 routed expert per token: argmax over the M routed columns only;
/// ties go to the lowest index. The shared column (index M) is excluded;
/// its score is used solely as a combination weight.
pub fn route_top1(s: &Tensor) -> Result<Vec<usize>> {
    if s.rank() != 2 || s.cols() < 2 {
        return Err(Error::dim("route_top1 expects N×(M+1) scores"));
    }
    if !s.is_finite() {
        return Err(Error::Numeric("route_top1: non-finite scores".into()));
    }
    let routed = s.cols() - 1;
    let mut out = Vec::with_capacity(s.rows());
    for t in 0..s.rows() {
        let row = s.row(t);
        let mut best = 0usize;
        for i in 1..routed {
            if row[i] > row[best] {
                best = i;
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// One edge token through the hybrid combination
/// `(e^{s_M}·shared(x) + e^{s_a}·routed_a(x)) / (e^{s_M} + e^{s_a})`,
/// weighting the shared and routed expert outputs by their exponentiated
/// affinity scores.
pub fn hmoe_token(x_t: &[f32], a_t: usize, s_t: &[f32], bank: &ExpertBank) -> Vec<f32> {
    let shared_out = bank.shared.forward_row(x_t);
    let routed_out = bank.routed[a_t].forward_row(x_t);
    let w_shared = s_t[bank.num_routed()].exp();
    let w_routed = s_t[a_t].exp();
    let denom = w_shared + w_routed;
    shared_out
        .iter()
        .zip(&routed_out)
        .map(|(s, r)| (w_shared * s + w_routed * r) / denom)
        .collect()
}

/// Permutation that stably sorts edge tokens into contiguous per-expert
/// blocks, plus the block boundaries and the inverse permutation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExpertDispatch {
    pub perm: Vec<usize>,
    pub group_offsets: Vec<usize>, // len M+1
    pub inverse_perm: Vec<usize>,
}

impl ExpertDispatch {
    pub fn group_sizes(&self) -> Vec<usize> {
        self.group_offsets.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

/// Stable counting sort of token positions by expert id.
pub fn build_dispatch(assignments: &[usize], num_experts: usize) -> Result<ExpertDispatch> {
    if let Some(&bad) = assignments.iter().find(|&&a| a >= num_experts) {
        return Err(Error::input(format!("assignment {bad} >= {num_experts} experts")));
    }
    let mut sizes = vec![0usize; num_experts];
    for &a in assignments {
        sizes[a] += 1;
    }
    let mut group_offsets = vec![0usize; num_experts + 1];
    for i in 0..num_experts {
        group_offsets[i + 1] = group_offsets[i] + sizes[i];
    }
    let mut cursor = group_offsets[..num_experts].to_vec();
    let mut perm = vec![0usize; assignments.len()];
    for (t, &a) in assignments.iter().enumerate() {
        perm[cursor[a]] = t;
        cursor[a] += 1;
    }
    let mut inverse_perm = vec![0usize; perm.len()];
    for (slot, &t) in perm.iter().enumerate() {
        inverse_perm[t] = slot;
    }
    Ok(ExpertDispatch {
        perm,
        group_offsets,
        inverse_perm,
    })
}

/// Wall-clock per phase of one parallel HMoE invocation, plus group sizes.
#[derive(Clone, Debug, Default, Serialize)]
pub struct HmoeProfile {
    pub group_sizes: Vec<usize>,
    pub route_s: f64,
    pub sort_s: f64,
    pub gather_s: f64,
    pub matmul_s: f64,
    pub scatter_s: f64,
}

impl HmoeProfile {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("profile serializes")
    }
}

const SHARED_CHUNK_ROWS: usize = 128;

/// Shared-expert forward over all rows, split into row chunks that may run
/// on the rayon pool. Rows are independent, so the result does not depend
/// on chunking or scheduling.
fn shared_forward_chunked(x: &Tensor, shared: &Ffn) -> Result<Tensor> {
    let (n, d) = (x.rows(), x.cols());
    let chunks: Vec<(usize, usize)> = (0..n)
        .step_by(SHARED_CHUNK_ROWS)
        .map(|a| (a, (a + SHARED_CHUNK_ROWS).min(n)))
        .collect();
    let blocks: Vec<Tensor> = chunks
        .par_iter()
        .map(|&(a, b)| {
            let block = Tensor::new(vec![b - a, d], x.data()[a * d..b * d].to_vec()).unwrap();
            shared.forward(&block)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Tensor::zeros(vec![n, d]);
    for ((a, b), block) in chunks.into_iter().zip(blocks) {
        out.data_mut()[a * d..b * d].copy_from_slice(block.data());
    }
    Ok(out)
}

/// Parallel HMoE with token rearrangement. See [`hmoe_sequential`] for the
/// reference semantics.
pub fn hmoe_parallel(x: &Tensor, em: &EdgeMap, bank: &ExpertBank) -> Result<Tensor> {
    hmoe_parallel_profiled(x, em, bank).map(|(t, _)| t)
}

pub fn hmoe_parallel_profiled(x: &Tensor, em: &EdgeMap, bank: &ExpertBank) -> Result<(Tensor, HmoeProfile)> {
    bank.validate()?;
    if x.rank() != 2 || x.rows() != em.len() {
        return Err(Error::dim(format!("hmoe: {:?} rows vs {} tokens", x.shape(), em.len())));
    }
    let d = x.cols();
    let m = bank.num_routed();
    let mut profile = HmoeProfile::default();

    // Shared expert over every row (non-edge output; edge combination input).
    let t0 = Instant::now();
    let shared_out = shared_forward_chunked(x, &bank.shared)?;
    profile.matmul_s += t0.elapsed().as_secs_f64();

    let edge_idx = em.edge_idx();
    if edge_idx.is_empty() {
        return Ok((shared_out, profile));
    }

    // Route: affinity + argmax over edge rows only.
    let t0 = Instant::now();
    let mut x_edge = Tensor::zeros(vec![edge_idx.len(), d]);
    for (r, &i) in edge_idx.iter().enumerate() {
        x_edge.row_mut(r).copy_from_slice(x.row(i));
    }
    let scores = affinity(&x_edge, &bank.centroids)?;
    let assignments = route_top1(&scores)?;
    profile.route_s = t0.elapsed().as_secs_f64();

    // Sort by expert id.
    let t0 = Instant::now();
    let dispatch = build_dispatch(&assignments, m)?;
    profile.group_sizes = dispatch.group_sizes();
    profile.sort_s = t0.elapsed().as_secs_f64();

    // Gather into contiguous per-expert blocks.
    let t0 = Instant::now();
    let mut x_sorted = Tensor::zeros(vec![edge_idx.len(), d]);
    for (slot, &t) in dispatch.perm.iter().enumerate() {
        x_sorted.row_mut(slot).copy_from_slice(x_edge.row(t));
    }
    profile.gather_s = t0.elapsed().as_secs_f64();

    // One blocked matmul per expert group; groups run on the rayon pool.
    let t0 = Instant::now();
    let groups: Vec<(usize, usize, usize)> = (0..m)
        .filter(|&e| dispatch.group_offsets[e + 1] > dispatch.group_offsets[e])
        .map(|e| (e, dispatch.group_offsets[e], dispatch.group_offsets[e + 1]))
        .collect();
    let outputs: Vec<Tensor> = groups
        .par_iter()
        .map(|&(e, a, b)| {
            let block = Tensor::new(vec![b - a, d], x_sorted.data()[a * d..b * d].to_vec()).unwrap();
            bank.routed[e].forward(&block)
        })
        .collect::<Result<Vec<_>>>()?;
    profile.matmul_s += t0.elapsed().as_secs_f64();

    // Combine with the shared output and restore token order.
    let t0 = Instant::now();
    let mut out = shared_out;
    for ((_, a, b), block) in groups.into_iter().zip(outputs) {
        for slot in a..b {
            let t = dispatch.perm[slot];
            let token = edge_idx[t];
            let w_shared = scores.row(t)[m].exp();
            let w_routed = scores.row(t)[assignments[t]].exp();
            let denom = w_shared + w_routed;
            let routed_row = block.row(slot - a);
            for (o, &r) in out.row_mut(token).iter_mut().zip(routed_row) {
                *o = (w_shared * *o + w_routed * r) / denom;
            }
        }
    }
    profile.scatter_s = t0.elapsed().as_secs_f64();
    Ok((out, profile))
}

/// Per-token reference implementation: the correctness oracle for
/// [`hmoe_parallel`] and the vanilla baseline in the benchmarks.
pub fn hmoe_sequential(x: &Tensor, em: &EdgeMap, bank: &ExpertBank) -> Result<Tensor> {
    bank.validate()?;
    if x.rank() != 2 || x.rows() != em.len() {
        return Err(Error::dim(format!("hmoe: {:?} rows vs {} tokens", x.shape(), em.len())));
    }
    let d = x.cols();
    let mut out = Tensor::zeros(vec![x.rows(), d]);
    for t in 0..x.rows() {
        let row = x.row(t);
        let y = if em.is_edge(t) {
            let x_row = Tensor::new(vec![1, d], row.to_vec())?;
            let s = affinity(&x_row, &bank.centroids)?;
            let a_t = route_top1(&s)?[0];
            hmoe_token(row, a_t, s.row(0), bank)
        } else {
            bank.shared.forward_row(row)
        };
        out.row_mut(t).copy_from_slice(&y);
    }
    Ok(out)
}
