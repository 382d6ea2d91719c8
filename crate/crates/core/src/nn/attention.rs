//! Scaled dot-product attention kernels with packed-bit masks.
//!
//! Masked keys get a logit of `-inf` before the softmax, so their weight is
//! exactly zero and their values never reach the output.

use std::sync::Arc;

use rayon::prelude::*;

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{BitMatrix, EpipolarMask};

/// Softmax with the row maximum subtracted first. Entries at `-inf` map
/// to exactly zero.
pub fn stable_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out)?;
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) -> Result<()> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return Err(Error::EmptyRow);
    }
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = if *x == f64::NEG_INFINITY { 0.0 } else { (*x - max).exp() };
        sum += *x;
    }
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|x| *x *= inv);
    Ok(())
}

/// Independent attention problems over subsets of rows. Group `g` attends
/// from query rows `q_idx[q_ptr[g]..q_ptr[g+1]]` to key rows
/// `k_idx[k_ptr[g]..k_ptr[g+1]]`, optionally under a `q_len x k_len` mask.
#[derive(Debug, Clone, Default)]
pub struct AttnLayout {
    q_ptr: Vec<usize>,
    q_idx: Vec<u32>,
    k_ptr: Vec<usize>,
    k_idx: Vec<u32>,
    masks: Vec<Option<Arc<BitMatrix>>>,
}

impl AttnLayout {
    pub fn new() -> Self {
        Self {
            q_ptr: vec![0],
            k_ptr: vec![0],
            ..Default::default()
        }
    }

    pub fn push_group(
        &mut self,
        q_rows: impl IntoIterator<Item = usize>,
        k_rows: impl IntoIterator<Item = usize>,
        mask: Option<Arc<BitMatrix>>,
    ) -> Result<()> {
        self.q_idx.extend(q_rows.into_iter().map(|r| r as u32));
        self.k_idx.extend(k_rows.into_iter().map(|r| r as u32));
        self.q_ptr.push(self.q_idx.len());
        self.k_ptr.push(self.k_idx.len());
        let g = self.masks.len();
        if let Some(m) = &mask {
            let (ql, kl) = (self.q_rows(g).len(), self.k_rows(g).len());
            if m.rows() != ql || m.cols() != kl {
                return Err(Error::shape(format!(
                    "mask {}x{} for group of {ql} queries and {kl} keys",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        self.masks.push(mask);
        Ok(())
    }

    /// One group covering all rows of `q` and `k`.
    pub fn dense(q_rows: usize, k_rows: usize, mask: Option<Arc<BitMatrix>>) -> Result<Self> {
        let mut l = Self::new();
        l.push_group(0..q_rows, 0..k_rows, mask)?;
        Ok(l)
    }

    /// Self-attention within consecutive blocks of `block` rows.
    pub fn blocks(total_rows: usize, block: usize) -> Self {
        let mut l = Self::new();
        for start in (0..total_rows).step_by(block) {
            let r = start..(start + block).min(total_rows);
            l.push_group(r.clone(), r, None).expect("unmasked");
        }
        l
    }

    /// Self-attention across `len` rows spaced `stride` apart, for each of
    /// `count` starting offsets within each of `outer` chunks of
    /// `len * stride` rows. Used for attention along the time axis.
    pub fn strided(outer: usize, len: usize, stride: usize) -> Self {
        let mut l = Self::new();
        for o in 0..outer {
            let base = o * len * stride;
            for s in 0..stride {
                let rows: Vec<usize> = (0..len).map(|i| base + s + i * stride).collect();
                l.push_group(rows.clone(), rows, None).expect("unmasked");
            }
        }
        l
    }

    pub fn groups(&self) -> usize {
        self.masks.len()
    }

    pub fn q_rows(&self, g: usize) -> &[u32] {
        &self.q_idx[self.q_ptr[g]..self.q_ptr[g + 1]]
    }

    pub fn k_rows(&self, g: usize) -> &[u32] {
        &self.k_idx[self.k_ptr[g]..self.k_ptr[g + 1]]
    }

    pub fn mask(&self, g: usize) -> Option<&BitMatrix> {
        self.masks[g].as_deref()
    }

    fn max_row(idx: &[u32]) -> usize {
        idx.iter().map(|&r| r as usize + 1).max().unwrap_or(0)
    }
}

fn gather(src: &[f64], cols: usize, rows: &[u32], col0: usize, width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * width);
    for &r in rows {
        let s = r as usize * cols + col0;
        out.extend_from_slice(&src[s..s + width]);
    }
    out
}

/// Saved softmax probabilities, `[group][head]` each `q_len x k_len`.
#[derive(Debug, Clone)]
pub struct AttnCache {
    probs: Vec<Vec<Vec<f64>>>,
}

fn check_dims(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, layout: &AttnLayout) -> Result<()> {
    if q.cols() != k.cols() {
        return Err(Error::shape(format!("q dim {} != k dim {}", q.cols(), k.cols())));
    }
    if k.rows() != v.rows() {
        return Err(Error::shape("k and v row counts differ"));
    }
    if heads == 0 || q.cols() % heads != 0 || v.cols() % heads != 0 {
        return Err(Error::shape(format!(
            "feature dims {} / {} not divisible by {heads} heads",
            q.cols(),
            v.cols()
        )));
    }
    if AttnLayout::max_row(&layout.q_idx) > q.rows() || AttnLayout::max_row(&layout.k_idx) > k.rows()
    {
        return Err(Error::shape("attention layout indexes past the inputs"));
    }
    Ok(())
}

/// Multi-head attention forward. Output rows not covered by any group are
/// zero. Returns the output and the cache needed for the backward pass.
pub fn attention_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    layout: &AttnLayout,
) -> Result<(Tensor, AttnCache)> {
    check_dims(q, k, v, heads, layout)?;
    let (d, dv) = (q.cols(), v.cols());
    let (dh, dvh) = (d / heads, dv / heads);
    let scale = 1.0 / (dh as f64).sqrt();

    let per_group: Vec<Result<(Vec<f64>, Vec<Vec<f64>>)>> = (0..layout.groups())
        .into_par_iter()
        .map(|g| {
            let (qr, kr) = (layout.q_rows(g), layout.k_rows(g));
            let (lq, lk) = (qr.len(), kr.len());
            let mut out = vec![0.0; lq * dv];
            let mut probs = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = gather(q.data(), d, qr, h * dh, dh);
                let kh = gather(k.data(), d, kr, h * dh, dh);
                let vh = gather(v.data(), dv, kr, h * dvh, dvh);
                let mut p = vec![0.0; lq * lk];
                gemm(&qh, lq, dh, false, &kh, lk, dh, true, 0.0, &mut p);
                for i in 0..lq {
                    let row = &mut p[i * lk..(i + 1) * lk];
                    match layout.mask(g) {
                        Some(m) => {
                            for (j, x) in row.iter_mut().enumerate() {
                                *x = if m.get(i, j) { *x * scale } else { f64::NEG_INFINITY };
                            }
                        }
                        None => row.iter_mut().for_each(|x| *x *= scale),
                    }
                    softmax_in_place(row)?;
                }
                let mut oh = vec![0.0; lq * dvh];
                gemm(&p, lq, lk, false, &vh, lk, dvh, false, 0.0, &mut oh);
                for i in 0..lq {
                    out[i * dv + h * dvh..i * dv + (h + 1) * dvh]
                        .copy_from_slice(&oh[i * dvh..(i + 1) * dvh]);
                }
                probs.push(p);
            }
            Ok((out, probs))
        })
        .collect();

    let mut output = Tensor::zeros(&[q.rows(), dv]);
    let mut cache = Vec::with_capacity(layout.groups());
    for (g, res) in per_group.into_iter().enumerate() {
        let (out, probs) = res?;
        for (i, &r) in layout.q_rows(g).iter().enumerate() {
            let r = r as usize;
            output.data_mut()[r * dv..(r + 1) * dv].copy_from_slice(&out[i * dv..(i + 1) * dv]);
        }
        cache.push(probs);
    }
    Ok((output, AttnCache { probs: cache }))
}

/// Gradients of [`attention_forward`] with respect to `q`, `k` and `v`.
/// Per-group contributions are reduced in group order.
pub fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    layout: &AttnLayout,
    cache: &AttnCache,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (d, dv) = (q.cols(), v.cols());
    let (dh, dvh) = (d / heads, dv / heads);
    let scale = 1.0 / (dh as f64).sqrt();

    type GroupGrads = (Vec<f64>, Vec<f64>, Vec<f64>);
    let per_group: Vec<GroupGrads> = (0..layout.groups())
        .into_par_iter()
        .map(|g| {
            let (qr, kr) = (layout.q_rows(g), layout.k_rows(g));
            let (lq, lk) = (qr.len(), kr.len());
            let mut dq = vec![0.0; lq * d];
            let mut dk = vec![0.0; lk * d];
            let mut dvv = vec![0.0; lk * dv];
            for h in 0..heads {
                let p = &cache.probs[g][h];
                let qh = gather(q.data(), d, qr, h * dh, dh);
                let kh = gather(k.data(), d, kr, h * dh, dh);
                let vh = gather(v.data(), dv, kr, h * dvh, dvh);
                let doh = gather(grad_out.data(), dv, qr, h * dvh, dvh);
                // dV = P^T dO
                let mut dvh_buf = vec![0.0; lk * dvh];
                gemm(p, lq, lk, true, &doh, lq, dvh, false, 0.0, &mut dvh_buf);
                // dP = dO V^T, then dS = P * (dP - rowsum(dP * P))
                let mut ds = vec![0.0; lq * lk];
                gemm(&doh, lq, dvh, false, &vh, lk, dvh, true, 0.0, &mut ds);
                for i in 0..lq {
                    let pr = &p[i * lk..(i + 1) * lk];
                    let dr = &mut ds[i * lk..(i + 1) * lk];
                    let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for (x, &pi) in dr.iter_mut().zip(pr) {
                        *x = pi * (*x - dot) * scale;
                    }
                }
                let mut dqh = vec![0.0; lq * dh];
                gemm(&ds, lq, lk, false, &kh, lk, dh, false, 0.0, &mut dqh);
                let mut dkh = vec![0.0; lk * dh];
                gemm(&ds, lq, lk, true, &qh, lq, dh, false, 0.0, &mut dkh);
                for i in 0..lq {
                    dq[i * d + h * dh..i * d + (h + 1) * dh]
                        .copy_from_slice(&dqh[i * dh..(i + 1) * dh]);
                }
                for j in 0..lk {
                    dk[j * d + h * dh..j * d + (h + 1) * dh]
                        .copy_from_slice(&dkh[j * dh..(j + 1) * dh]);
                    dvv[j * dv + h * dvh..j * dv + (h + 1) * dvh]
                        .copy_from_slice(&dvh_buf[j * dvh..(j + 1) * dvh]);
                }
            }
            (dq, dk, dvv)
        })
        .collect();

    let mut gq = Tensor::zeros(q.shape());
    let mut gk = Tensor::zeros(k.shape());
    let mut gv = Tensor::zeros(v.shape());
    for (g, (dq, dk, dvv)) in per_group.into_iter().enumerate() {
        for (i, &r) in layout.q_rows(g).iter().enumerate() {
            let r = r as usize;
            for c in 0..d {
                gq.data_mut()[r * d + c] += dq[i * d + c];
            }
        }
        for (j, &r) in layout.k_rows(g).iter().enumerate() {
            let r = r as usize;
            for c in 0..d {
                gk.data_mut()[r * d + c] += dk[j * d + c];
            }
            for c in 0..dv {
                gv.data_mut()[r * dv + c] += dvv[j * dv + c];
            }
        }
    }
    (gq, gk, gv)
}

/// Inputs of one epipolar cross-attention call: `q` is `(T*h*w) x D`,
/// `k` and `v` are `(N*h*w) x D`.
#[derive(Debug, Clone)]
pub struct AttentionInputs<'a> {
    pub q: &'a Tensor,
    pub k: &'a Tensor,
    pub v: &'a Tensor,
    pub mask: &'a EpipolarMask,
}

/// Single-head cross-attention of every query row over the context rows
/// admitted by the mask.
pub fn epi_cross_attention(inputs: &AttentionInputs<'_>) -> Result<Tensor> {
    let AttentionInputs { q, k, v, mask } = inputs;
    if mask.rows() != q.rows() || mask.cols() != k.rows() {
        return Err(Error::shape(format!(
            "mask {}x{} vs q rows {} / k rows {}",
            mask.rows(),
            mask.cols(),
            q.rows(),
            k.rows()
        )));
    }
    let layout = AttnLayout::dense(q.rows(), k.rows(), Some(Arc::new(mask.bits.clone())))?;
    Ok(attention_forward(q, k, v, 1, &layout)?.0)
}

/// Floating-point types the inference kernel runs on.
pub trait Real: Copy + PartialOrd + std::ops::Add<Output = Self> + std::ops::Mul<Output = Self> + std::ops::Sub<Output = Self> + std::ops::Div<Output = Self> + Send + Sync {
    const ZERO: Self;
    const NEG_INF: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const NEG_INF: Self = f64::NEG_INFINITY;
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const NEG_INF: Self = f32::NEG_INFINITY;
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
}

/// Forward-only single-head masked attention that streams over key blocks
/// with a running (online) softmax, never materializing the full
/// probability matrix. `q` is `nq x d`, `k`/`v` are `nk x d` / `nk x dv`.
pub fn attention_blocked<F: Real>(
    q: &[F],
    k: &[F],
    v: &[F],
    nq: usize,
    nk: usize,
    d: usize,
    dv: usize,
    mask: Option<&BitMatrix>,
    block: usize,
) -> Result<Vec<F>> {
    if q.len() != nq * d || k.len() != nk * d || v.len() != nk * dv {
        return Err(Error::shape("blocked attention buffer sizes"));
    }
    if let Some(m) = mask {
        if m.rows() != nq || m.cols() != nk {
            return Err(Error::shape("blocked attention mask shape"));
        }
    }
    let block = block.max(1);
    let scale = F::from_f64(1.0 / (d as f64).sqrt());
    let mut out = vec![F::ZERO; nq * dv];
    out.par_chunks_mut(dv.max(1))
        .enumerate()
        .try_for_each(|(i, orow)| {
            let qi = &q[i * d..(i + 1) * d];
            let mut running_max = F::NEG_INF;
            let mut denom = F::ZERO;
            let mut acc = vec![F::ZERO; dv];
            let mut logits = vec![F::ZERO; block];
            for start in (0..nk).step_by(block) {
                let end = (start + block).min(nk);
                let mut block_max = F::NEG_INF;
                for j in start..end {
                    let admitted = mask.is_none_or(|m| m.get(i, j));
                    let s = if admitted {
                        let kj = &k[j * d..(j + 1) * d];
                        let mut dot = F::ZERO;
                        for c in 0..d {
                            dot = dot + qi[c] * kj[c];
                        }
                        dot * scale
                    } else {
                        F::NEG_INF
                    };
                    if s > block_max {
                        block_max = s;
                    }
                    logits[j - start] = s;
                }
                if block_max == F::NEG_INF {
                    continue;
                }
                let new_max = if block_max > running_max { block_max } else { running_max };
                let rescale = if running_max == F::NEG_INF {
                    F::ZERO
                } else {
                    (running_max - new_max).exp()
                };
                denom = denom * rescale;
                acc.iter_mut().for_each(|a| *a = *a * rescale);
                for j in start..end {
                    let s = logits[j - start];
                    if s == F::NEG_INF {
                        continue;
                    }
                    let w = (s - new_max).exp();
                    denom = denom + w;
                    let vj = &v[j * dv..(j + 1) * dv];
                    for c in 0..dv {
                        acc[c] = acc[c] + w * vj[c];
                    }
                }
                running_max = new_max;
            }
            if denom == F::ZERO {
                return Err(Error::EmptyRow);
            }
            for c in 0..dv {
                orow[c] = acc[c] / denom;
            }
            Ok(())
        })?;
    Ok(out)
}
