//! Reverse-mode automatic differentiation over a small fixed set of
//! matrix operations. Every value on the tape is a row-major matrix.

use std::collections::HashMap;
use std::sync::Arc;

use super::attention::{attention_backward, attention_forward, AttnCache, AttnLayout};
use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.7978845608028654;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddGrouped(Var, Var, usize),
    RowScale(Var, Arc<Vec<f64>>),
    Scale(Var, f64),
    Gelu(Var),
    Silu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: Arc<AttnLayout>,
        cache: Option<AttnCache>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Arc<Vec<u32>>),
    Unfold3d {
        x: Var,
        dims: [usize; 4],
        kernel: usize,
    },
    WeightedSqErr {
        pred: Var,
        target: Arc<Tensor>,
        weights: Arc<Vec<f64>>,
    },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records operations for one forward pass and replays them backwards.
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Tensor>>,
    track: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn as_matrix(t: Tensor) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    t.reshape(&[r, c]).expect("same size")
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grads: Vec::new(),
            track: true,
        }
    }

    /// A tape that skips the bookkeeping only needed for gradients.
    pub fn inference() -> Self {
        Self {
            track: false,
            ..Self::new()
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        debug_assert!(value.all_finite(), "non-finite value from {op:?}");
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(as_matrix(t), Op::Leaf)
    }

    /// Leaf for a parameter; repeated calls return the same variable so
    /// gradients accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(as_matrix(store.get(id).clone()), Op::Leaf);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(Error::shape(format!("matmul {ar}x{ac} * {br}x{bc}")));
        }
        let mut out = vec![0.0; ar * bc];
        gemm(self.value(a).data(), ar, ac, false, self.value(b).data(), br, bc, false, 0.0, &mut out);
        Ok(self.push(Tensor::from_matrix(ar, bc, out), Op::MatMul(a, b)))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Adds a `1 x m` row vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.value(bias).len() != c {
            return Err(Error::shape(format!("bias of {} for {c} columns", self.value(bias).len())));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for i in 0..r {
            for (o, bb) in out.data_mut()[i * c..(i + 1) * c].iter_mut().zip(&b) {
                *o += bb;
            }
        }
        Ok(self.push(out, Op::AddRow(x, bias)))
    }

    /// Adds row `i / group` of `e` to row `i` of `x`.
    pub fn add_grouped(&mut self, x: Var, e: Var, group: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        let (er, ec) = self.shape(e);
        if ec != c || group == 0 || r != er * group {
            return Err(Error::shape(format!(
                "add_grouped {r}x{c} with {er}x{ec} groups of {group}"
            )));
        }
        let mut out = self.value(x).clone();
        let ev = self.value(e).data().to_vec();
        for i in 0..r {
            let g = i / group;
            for j in 0..c {
                out.data_mut()[i * c + j] += ev[g * c + j];
            }
        }
        Ok(self.push(out, Op::AddGrouped(x, e, group)))
    }

    /// Multiplies row `i` by the constant `s[i]`.
    pub fn row_scale(&mut self, x: Var, s: Arc<Vec<f64>>) -> Result<Var> {
        let (r, c) = self.shape(x);
        if s.len() != r {
            return Err(Error::shape("row_scale length"));
        }
        let mut out = self.value(x).clone();
        for i in 0..r {
            out.data_mut()[i * c..(i + 1) * c].iter_mut().for_each(|v| *v *= s[i]);
        }
        Ok(self.push(out, Op::RowScale(x, s)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).scale(s);
        self.push(out, Op::Scale(x, s))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()));
        self.push(out, Op::Gelu(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v / (1.0 + (-v).exp()));
        self.push(out, Op::Silu(x))
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// the per-column affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape("layer_norm affine size"));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::from_matrix(r, c, out);
        let (xhat, rstd) = if self.track { (xhat, rstd) } else { (Vec::new(), Vec::new()) };
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: Arc<AttnLayout>,
    ) -> Result<Var> {
        let (out, cache) = attention_forward(self.value(q), self.value(k), self.value(v), heads, &layout)?;
        let cache = self.track.then_some(cache);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                cache,
            },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0]).0;
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return Err(Error::shape("concat_cols row mismatch"));
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p).1).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(Tensor::from_matrix(rows, total, out), Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&refs)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// `out[i] = x[idx[i]]`; rows may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: Arc<Vec<u32>>) -> Result<Var> {
        let (r, c) = self.shape(x);
        if idx.iter().any(|&i| i as usize >= r) {
            return Err(Error::shape("gather_rows index out of range"));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            out.extend_from_slice(&xv[i as usize * c..(i as usize + 1) * c]);
        }
        Ok(self.push(Tensor::from_matrix(idx.len(), c, out), Op::GatherRows(x, idx)))
    }

    /// im2col for a zero-padded `kernel^3` convolution over rows laid out
    /// as `(batch, t, y, x)` given by `dims`.
    pub fn unfold3d(&mut self, x: Var, dims: [usize; 4], kernel: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if dims.iter().product::<usize>() != r || kernel % 2 == 0 {
            return Err(Error::shape(format!("unfold3d dims {dims:?} kernel {kernel} for {r} rows")));
        }
        let k3 = kernel * kernel * kernel;
        let mut out = vec![0.0; r * k3 * c];
        let xv = self.value(x).data();
        for_each_tap(dims, kernel, |row, tap, src| {
            if let Some(s) = src {
                let o = (row * k3 + tap) * c;
                out[o..o + c].copy_from_slice(&xv[s * c..(s + 1) * c]);
            }
        });
        Ok(self.push(Tensor::from_matrix(r, k3 * c, out), Op::Unfold3d { x, dims, kernel }))
    }

    /// `sum_r w[r] * sum_c (pred - target)^2` as a `1 x 1` value.
    pub fn weighted_sq_err(&mut self, pred: Var, target: Arc<Tensor>, weights: Arc<Vec<f64>>) -> Result<Var> {
        let (r, c) = self.shape(pred);
        if target.rows() != r || target.cols() != c || weights.len() != r {
            return Err(Error::shape("weighted_sq_err shapes"));
        }
        let p = self.value(pred).data();
        let mut total = 0.0;
        for i in 0..r {
            let mut s = 0.0;
            for j in 0..c {
                let d = p[i * c + j] - target.data()[i * c + j];
                s += d * d;
            }
            total += weights[i] * s;
        }
        Ok(self.push(
            Tensor::from_matrix(1, 1, vec![total]),
            Op::WeightedSqErr {
                pred,
                target,
                weights,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::from_matrix(1, 1, vec![s]), Op::Sum(x))
    }

    /// Back-propagates from a scalar output.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if !self.track {
            return Err(Error::config("backward on an inference tape"));
        }
        if self.value(output).len() != 1 {
            return Err(Error::shape("backward needs a scalar output"));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[output.0] = Some(Tensor::from_matrix(1, 1, vec![1.0]));
        for i in (0..=output.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Tensor) {
        match &mut self.grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&mut self, i: usize, g: &Tensor) {
        let node = &self.nodes[i];
        let (r, c) = (node.value.rows(), node.value.cols());
        let mut pending: Vec<(Var, Tensor)> = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (ar, ac) = (av.rows(), av.cols());
                let (br, bc) = (bv.rows(), bv.cols());
                let mut ga = vec![0.0; ar * ac];
                gemm(g.data(), r, c, false, bv.data(), br, bc, true, 0.0, &mut ga);
                let mut gb = vec![0.0; br * bc];
                gemm(av.data(), ar, ac, true, g.data(), r, c, false, 0.0, &mut gb);
                pending.push((*a, Tensor::from_matrix(ar, ac, ga)));
                pending.push((*b, Tensor::from_matrix(br, bc, gb)));
            }
            Op::Add(a, b) => {
                pending.push((*a, g.clone()));
                pending.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                pending.push((*a, g.clone()));
                pending.push((*b, g.scale(-1.0)));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                pending.push((*a, g.zip_map(bv, |x, y| x * y).expect("shape")));
                pending.push((*b, g.zip_map(av, |x, y| x * y).expect("shape")));
            }
            Op::AddRow(x, bias) => {
                let mut gb = vec![0.0; c];
                for row in 0..r {
                    for j in 0..c {
                        gb[j] += g.data()[row * c + j];
                    }
                }
                let shape = self.nodes[bias.0].value.shape().to_vec();
                pending.push((*x, g.clone()));
                pending.push((*bias, Tensor::new(shape, gb).expect("bias size")));
            }
            Op::AddGrouped(x, e, group) => {
                let er = r / group;
                let mut ge = vec![0.0; er * c];
                for row in 0..r {
                    let gi = row / group;
                    for j in 0..c {
                        ge[gi * c + j] += g.data()[row * c + j];
                    }
                }
                pending.push((*x, g.clone()));
                pending.push((*e, Tensor::from_matrix(er, c, ge)));
            }
            Op::RowScale(x, s) => {
                let mut gx = g.clone();
                for row in 0..r {
                    gx.data_mut()[row * c..(row + 1) * c].iter_mut().for_each(|v| *v *= s[row]);
                }
                pending.push((*x, gx));
            }
            Op::Scale(x, s) => pending.push((*x, g.scale(*s))),
            Op::Gelu(x) => {
                let xv = &self.nodes[x.0].value;
                let gx = g
                    .zip_map(xv, |gi, v| {
                        let u = GELU_C * (v + 0.044715 * v * v * v);
                        let th = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                        gi * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du)
                    })
                    .expect("shape");
                pending.push((*x, gx));
            }
            Op::Silu(x) => {
                let xv = &self.nodes[x.0].value;
                let gx = g
                    .zip_map(xv, |gi, v| {
                        let s = 1.0 / (1.0 + (-v).exp());
                        gi * (s + v * s * (1.0 - s))
                    })
                    .expect("shape");
                pending.push((*x, gx));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gam = self.nodes[gamma.0].value.data();
                let mut gx = vec![0.0; r * c];
                let mut gg = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                let mut dxhat = vec![0.0; c];
                for row in 0..r {
                    let gr = &g.data()[row * c..(row + 1) * c];
                    let xh = &xhat[row * c..(row + 1) * c];
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..c {
                        gg[j] += gr[j] * xh[j];
                        gbeta[j] += gr[j];
                        dxhat[j] = gr[j] * gam[j];
                        mean_d += dxhat[j];
                        mean_dx += dxhat[j] * xh[j];
                    }
                    mean_d /= c as f64;
                    mean_dx /= c as f64;
                    for j in 0..c {
                        gx[row * c + j] = rstd[row] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                    }
                }
                let gshape = self.nodes[gamma.0].value.shape().to_vec();
                let bshape = self.nodes[beta.0].value.shape().to_vec();
                pending.push((*x, Tensor::from_matrix(r, c, gx)));
                pending.push((*gamma, Tensor::new(gshape, gg).expect("gamma")));
                pending.push((*beta, Tensor::new(bshape, gbeta).expect("beta")));
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                cache,
            } => {
                let cache = cache.as_ref().expect("tracked tape keeps attention caches");
                let (gq, gk, gv) = attention_backward(
                    &self.nodes[q.0].value,
                    &self.nodes[k.0].value,
                    &self.nodes[v.0].value,
                    *heads,
                    layout,
                    cache,
                    g,
                );
                pending.push((*q, gq));
                pending.push((*k, gk));
                pending.push((*v, gv));
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.cols();
                    let mut gp = Vec::with_capacity(r * w);
                    for row in 0..r {
                        gp.extend_from_slice(&g.data()[row * c + off..row * c + off + w]);
                    }
                    off += w;
                    pending.push((p, Tensor::from_matrix(r, w, gp)));
                }
            }
            Op::ConcatRows(parts) => {
                let mut row0 = 0;
                for &p in parts {
                    let pr = self.nodes[p.0].value.rows();
                    pending.push((p, g.slice_rows(row0, pr)));
                    row0 += pr;
                }
            }
            Op::GatherRows(x, idx) => {
                let xr = self.nodes[x.0].value.rows();
                let mut gx = vec![0.0; xr * c];
                for (row, &src) in idx.iter().enumerate() {
                    let s = src as usize;
                    for j in 0..c {
                        gx[s * c + j] += g.data()[row * c + j];
                    }
                }
                pending.push((*x, Tensor::from_matrix(xr, c, gx)));
            }
            Op::Unfold3d { x, dims, kernel } => {
                let xc = self.nodes[x.0].value.cols();
                let k3 = kernel * kernel * kernel;
                let mut gx = vec![0.0; r * xc];
                for_each_tap(*dims, *kernel, |row, tap, src| {
                    if let Some(s) = src {
                        let o = (row * k3 + tap) * xc;
                        for j in 0..xc {
                            gx[s * xc + j] += g.data()[o + j];
                        }
                    }
                });
                pending.push((*x, Tensor::from_matrix(r, xc, gx)));
            }
            Op::WeightedSqErr {
                pred,
                target,
                weights,
            } => {
                let p = &self.nodes[pred.0].value;
                let (pr, pc) = (p.rows(), p.cols());
                let scale = g.data()[0];
                let mut gp = vec![0.0; pr * pc];
                for row in 0..pr {
                    for j in 0..pc {
                        let k = row * pc + j;
                        gp[k] = scale * 2.0 * weights[row] * (p.data()[k] - target.data()[k]);
                    }
                }
                pending.push((*pred, Tensor::from_matrix(pr, pc, gp)));
            }
            Op::Sum(x) => {
                let xv = &self.nodes[x.0].value;
                pending.push((*x, Tensor::full(xv.shape(), g.data()[0])));
            }
        }
        for (v, gv) in pending {
            self.accumulate(v, gv);
        }
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every parameter used on this tape, reshaped to the
    /// parameter's own shape, in parameter order.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self
            .params
            .iter()
            .filter_map(|(&id, &v)| {
                self.grad(v).map(|g| {
                    let shape = store.get(id).shape().to_vec();
                    (id, g.clone().reshape(&shape).expect("param grad size"))
                })
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

/// Visits every (output row, kernel tap, source row) triple of a zero-padded
/// 3D neighbourhood; `src` is `None` where the tap falls in the padding.
fn for_each_tap(dims: [usize; 4], kernel: usize, mut f: impl FnMut(usize, usize, Option<usize>)) {
    let [b, t, h, w] = dims;
    let half = (kernel / 2) as isize;
    for bi in 0..b {
        for ti in 0..t {
            for yi in 0..h {
                for xi in 0..w {
                    let row = ((bi * t + ti) * h + yi) * w + xi;
                    let mut tap = 0;
                    for dt in -half..=half {
                        for dy in -half..=half {
                            for dx in -half..=half {
                                let (tt, yy, xx) = (ti as isize + dt, yi as isize + dy, xi as isize + dx);
                                let inside = tt >= 0
                                    && yy >= 0
                                    && xx >= 0
                                    && (tt as usize) < t
                                    && (yy as usize) < h
                                    && (xx as usize) < w;
                                let src = inside.then(|| {
                                    ((bi * t + tt as usize) * h + yy as usize) * w + xx as usize
                                });
                                f(row, tap, src);
                                tap += 1;
                            }
                        }
                    }
                }
            }
        }
    }
}
