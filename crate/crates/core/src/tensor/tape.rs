//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation as a node whose inputs are earlier
//! nodes, so node order is already a topological order. [`Tape::backward`]
//! walks the nodes once in reverse and accumulates gradients with `+=` in that
//! fixed order, which keeps gradients bit-reproducible.
//!
//! A tape is single-threaded. Parallel training builds one tape per sample and
//! sums the resulting [`Gradients`] in sample order.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use super::kernels::{gemm, gemm_nt, gemm_tn};
use super::{broadcast_index_map, broadcast_shapes, strides, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add {
        a: Var,
        b: Var,
        map_a: Vec<usize>,
        map_b: Vec<usize>,
    },
    Sub {
        a: Var,
        b: Var,
        map_a: Vec<usize>,
        map_b: Vec<usize>,
    },
    Mul {
        a: Var,
        b: Var,
        map_a: Vec<usize>,
        map_b: Vec<usize>,
    },
    Scale {
        a: Var,
        c: f64,
    },
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
        map_a: Vec<usize>,
        map_b: Vec<usize>,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        axes: Vec<usize>,
    },
    IndexSelect {
        a: Var,
        outer: usize,
        src_len: usize,
        inner: usize,
        indices: Arc<Vec<usize>>,
    },
    Concat {
        a: Var,
        b: Var,
        outer: usize,
        a_len: usize,
        b_len: usize,
    },
    Gelu {
        a: Var,
    },
    Softmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    AddMask {
        a: Var,
    },
    Substitute {
        x: Var,
        v: Var,
        flags: Arc<Vec<bool>>,
        dim: usize,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    MaskedMse {
        recon: Var,
        grad: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        grad: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::MatMul { .. } => "matmul",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::IndexSelect { .. } => "index_select",
            Op::Concat { .. } => "concat",
            Op::Gelu { .. } => "gelu",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::AddMask { .. } => "add_mask",
            Op::Substitute { .. } => "substitute",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::MaskedMse { .. } => "masked_mse",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of a forward computation.
pub struct Tape<'p> {
    nodes: Vec<Node>,
    params: Option<&'p ParamStore>,
    param_vars: BTreeMap<String, Var>,
    bound: HashMap<String, Var>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: None,
            param_vars: BTreeMap::new(),
            bound: HashMap::new(),
        }
    }

    /// A tape that resolves [`Tape::param`] lookups against `params`.
    pub fn with_params(params: &'p ParamStore) -> Self {
        Tape {
            params: Some(params),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        Ok(self.push(value, op, requires_grad))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Makes later `param(name)` calls return `var` instead of the stored
    /// parameter. Used to differentiate with respect to a single parameter.
    pub fn bind_param(&mut self, name: &str, var: Var) {
        self.bound.insert(name.to_string(), var);
    }

    /// Whether `name` resolves to a bound or stored parameter.
    pub fn has_param(&self, name: &str) -> bool {
        self.bound.contains_key(name) || self.params.is_some_and(|p| p.contains(name))
    }

    /// Leaf for a named parameter; repeated calls share one node so gradients
    /// from every use accumulate.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        if let Some(&v) = self.param_vars.get(name) {
            return Ok(v);
        }
        let store = self
            .params
            .ok_or_else(|| Error::invalid(format!("tape has no parameter store (wanted {name})")))?;
        let value = store
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?
            .clone();
        let v = self.push(value, Op::Leaf, true);
        self.param_vars.insert(name.to_string(), v);
        Ok(v)
    }

    fn binary_maps(&self, op: &'static str, a: Var, b: Var) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out = broadcast_shapes(sa, sb).ok_or_else(|| {
            Error::shape(op, format!("cannot broadcast {sa:?} with {sb:?}"))
        })?;
        let map_a = broadcast_index_map(sa, &out);
        let map_b = broadcast_index_map(sb, &out);
        Ok((out, map_a, map_b))
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, Vec<usize>, Vec<usize>)> {
        let (out, map_a, map_b) = self.binary_maps(name, a, b)?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data = map_a
            .iter()
            .zip(&map_b)
            .map(|(&i, &j)| f(da[i], db[j]))
            .collect();
        Ok((Tensor::new(out, data)?, map_a, map_b))
    }

    /// Broadcasting `a + b`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, map_a, map_b) = self.elementwise("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push_checked(t, Op::Add { a, b, map_a, map_b }, rg)
    }

    /// Broadcasting `a - b`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, map_a, map_b) = self.elementwise("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push_checked(t, Op::Sub { a, b, map_a, map_b }, rg)
    }

    /// Broadcasting elementwise `a * b`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, map_a, map_b) = self.elementwise("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push_checked(t, Op::Mul { a, b, map_a, map_b }, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let src = self.value(a);
        let t = Tensor::new(src.shape().to_vec(), src.data().iter().map(|x| x * c).collect())?;
        let rg = self.rg(a);
        self.push_checked(t, Op::Scale { a, c }, rg)
    }

    /// Batched matrix product `[.., M, K] @ [.., K, N]` with broadcast batch
    /// dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape(
                "matmul",
                format!("operands need rank >= 2, got {sa:?} and {sb:?}"),
            ));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions differ: {sa:?} @ {sb:?} ({k} vs {k2})"),
            ));
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let (mut out_shape, map_a, map_b, m_eff) = if bb.is_empty() {
            // weight-style operand: fold all of a's batch into rows
            let rows: usize = ba.iter().product::<usize>() * m;
            let mut s = ba.to_vec();
            s.push(m);
            (s, vec![0], vec![0], rows)
        } else {
            let batch = broadcast_shapes(ba, bb).ok_or_else(|| {
                Error::shape("matmul", format!("batch dims {ba:?} and {bb:?} do not broadcast"))
            })?;
            let map_a = broadcast_index_map(ba, &batch);
            let map_b = broadcast_index_map(bb, &batch);
            let mut s = batch;
            s.push(m);
            (s, map_a, map_b, m)
        };
        out_shape.push(n);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; out_shape.iter().product()];
        for (bi, (&ia, &ib)) in map_a.iter().zip(&map_b).enumerate() {
            let a_blk = &da[ia * m_eff * k..(ia + 1) * m_eff * k];
            let b_blk = &db[ib * k * n..(ib + 1) * k * n];
            gemm(m_eff, k, n, a_blk, b_blk, &mut out[bi * m_eff * n..(bi + 1) * m_eff * n]);
        }
        let t = Tensor::new(out_shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        self.push_checked(
            t,
            Op::MatMul {
                a,
                b,
                m: m_eff,
                k,
                n,
                map_a,
                map_b,
            },
            rg,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.value(a);
        let n: usize = shape.iter().product();
        if n != src.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", src.shape()),
            ));
        }
        let t = Tensor::new(shape.to_vec(), src.data().to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape { a }, rg))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&x| x >= shape.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(Error::shape(
                "permute",
                format!("{axes:?} is not a permutation of the axes of {shape:?}"),
            ));
        }
        let data = permute_data(self.value(a).data(), &shape, axes);
        let out_shape: Vec<usize> = axes.iter().map(|&i| shape[i]).collect();
        let t = Tensor::new(out_shape, data)?;
        let rg = self.rg(a);
        Ok(self.push(
            t,
            Op::Permute {
                a,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::shape("transpose", "rank < 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    /// Gathers along `axis`: output slice `j` is input slice `indices[j]`.
    /// Indices may repeat; the backward pass scatter-adds.
    pub fn index_select(&mut self, a: Var, axis: usize, indices: Arc<Vec<usize>>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("index_select", format!("axis {axis} for shape {shape:?}")));
        }
        let src_len = shape[axis];
        if let Some(&bad) = indices.iter().find(|&&i| i >= src_len) {
            return Err(Error::shape(
                "index_select",
                format!("index {bad} out of range for axis {axis} of extent {src_len}"),
            ));
        }
        if indices.is_empty() {
            return Err(Error::shape("index_select", "empty index list"));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &j in indices.iter() {
                let base = (o * src_len + j) * inner;
                out.extend_from_slice(&src[base..base + inner]);
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = indices.len();
        let t = Tensor::new(out_shape, out)?;
        let rg = self.rg(a);
        Ok(self.push(
            t,
            Op::IndexSelect {
                a,
                outer,
                src_len,
                inner,
                indices,
            },
            rg,
        ))
    }

    /// Contiguous range `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.index_select(a, axis, Arc::new((start..end).collect()))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa.iter().zip(&sb).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(Error::shape(
                "concat",
                format!("cannot join {sa:?} and {sb:?} on axis {axis}"),
            ));
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let (a_len, b_len) = (sa[axis] * inner, sb[axis] * inner);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(outer * (a_len + b_len));
        for o in 0..outer {
            out.extend_from_slice(&da[o * a_len..(o + 1) * a_len]);
            out.extend_from_slice(&db[o * b_len..(o + 1) * b_len]);
        }
        let mut shape = sa;
        shape[axis] += sb[axis];
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            t,
            Op::Concat {
                a,
                b,
                outer,
                a_len,
                b_len,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let data = src.data().iter().map(|&x| gelu(x)).collect();
        let t = Tensor::new(src.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push_checked(t, Op::Gelu { a }, rg)
    }

    /// Softmax over the last axis. `-inf` inputs map to exactly zero; a row
    /// with no finite entry is an error.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let shape = src.shape().to_vec();
        let cols = *shape
            .last()
            .ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        if src.data().iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::NonFinite { op: "softmax" });
        }
        let mut out = vec![0.0; src.len()];
        for (row, orow) in src.data().chunks(cols).zip(out.chunks_mut(cols)) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                return Err(Error::invalid(
                    "softmax row is fully masked: no valid attention targets",
                ));
            }
            let mut s = 0.0;
            for (o, &x) in orow.iter_mut().zip(row) {
                *o = (x - mx).exp();
                s += *o;
            }
            for o in orow.iter_mut() {
                *o /= s;
            }
        }
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(a);
        self.push_checked(t, Op::Softmax { a }, rg)
    }

    /// Normalizes over the last axis then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::invalid(format!("layer_norm eps must be positive, got {eps}")));
        }
        let shape = self.shape(x).to_vec();
        let c = *shape
            .last()
            .ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "affine params {:?}/{:?} do not match last dim {c}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let src = self.value(x).data();
        let rows = src.len() / c;
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + bt[j];
            }
        }
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push_checked(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Adds a constant additive attention mask (entries 0 or `-inf`). The
    /// mask broadcasts to `a`'s shape and the result may hold `-inf`.
    pub fn add_mask(&mut self, a: Var, mask: &Tensor) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let out = broadcast_shapes(&sa, mask.shape());
        if out.as_deref() != Some(&sa[..]) {
            return Err(Error::shape(
                "add_mask",
                format!("mask {:?} does not broadcast to {sa:?}", mask.shape()),
            ));
        }
        let map = broadcast_index_map(mask.shape(), &sa);
        let md = mask.data();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(&map)
            .map(|(&x, &j)| x + md[j])
            .collect();
        let t = Tensor::new(sa, data)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::AddMask { a }, rg))
    }

    /// Replaces every token `l` of `x: [B, L, C]` with `flags[l]` set by the
    /// vector `v: [C]`; other tokens pass through untouched.
    pub fn substitute(&mut self, x: Var, v: Var, flags: Arc<Vec<bool>>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || sx[1] != flags.len() || self.shape(v) != [sx[2]] {
            return Err(Error::shape(
                "substitute",
                format!(
                    "tokens {sx:?}, vector {:?}, {} flags",
                    self.shape(v),
                    flags.len()
                ),
            ));
        }
        let dim = sx[2];
        let mut data = self.value(x).data().to_vec();
        let vd = self.value(v).data();
        for tok in data.chunks_mut(dim).enumerate().filter_map(|(i, t)| flags[i % flags.len()].then_some(t)) {
            tok.copy_from_slice(vd);
        }
        let t = Tensor::new(sx, data)?;
        let rg = self.rg(x) || self.rg(v);
        self.push_checked(t, Op::Substitute { x, v, flags, dim }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push_checked(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        self.push_checked(Tensor::scalar(s), Op::Mean { a }, rg)
    }

    /// Mean squared error over the elements where `mask` is true.
    pub fn masked_mse(&mut self, recon: Var, target: &Tensor, mask: &[bool]) -> Result<Var> {
        let r = self.value(recon);
        if r.shape() != target.shape() || mask.len() != r.len() {
            return Err(Error::shape(
                "masked_mse",
                format!(
                    "recon {:?}, target {:?}, mask of {}",
                    r.shape(),
                    target.shape(),
                    mask.len()
                ),
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::invalid("masked loss over zero masked pixels"));
        }
        let inv = 1.0 / count as f64;
        let mut loss = 0.0;
        let mut grad = vec![0.0; r.len()];
        for (i, ((&x, &t), &m)) in r.data().iter().zip(target.data()).zip(mask).enumerate() {
            if m {
                let d = x - t;
                loss += d * d;
                grad[i] = 2.0 * d * inv;
            }
        }
        let rg = self.rg(recon);
        self.push_checked(Tensor::scalar(loss * inv), Op::MaskedMse { recon, grad }, rg)
    }

    /// Mean cross-entropy of `logits: [N, K]` against integer `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let l = self.value(logits);
        let (n, k) = match l.shape() {
            [n, k] => (*n, *k),
            s => return Err(Error::shape("cross_entropy", format!("logits must be [N, K], got {s:?}"))),
        };
        if labels.len() != n {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels for {n} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
        }
        let mut grad = vec![0.0; n * k];
        let mut loss = 0.0;
        let inv = 1.0 / n as f64;
        for (i, row) in l.data().chunks(k).enumerate() {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let lse = mx + s.ln();
            loss += lse - row[labels[i]];
            for j in 0..k {
                let p = (row[j] - lse).exp();
                grad[i * k + j] = (p - if j == labels[i] { 1.0 } else { 0.0 }) * inv;
            }
        }
        let rg = self.rg(logits);
        self.push_checked(Tensor::scalar(loss * inv), Op::CrossEntropy { logits, grad }, rg)
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|d| Tensor::new(n.value.shape().to_vec(), d).expect("grad shape")))
            .collect();
        Ok(Gradients {
            grads,
            params: self.param_vars.clone(),
        })
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Tensor,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match op {
            Op::Leaf => {}
            Op::Add { a, b, map_a, map_b } => {
                acc(*a, &mut |s| scatter(s, map_a, g, |x| x));
                acc(*b, &mut |s| scatter(s, map_b, g, |x| x));
            }
            Op::Sub { a, b, map_a, map_b } => {
                acc(*a, &mut |s| scatter(s, map_a, g, |x| x));
                acc(*b, &mut |s| scatter(s, map_b, g, |x| -x));
            }
            Op::Mul { a, b, map_a, map_b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |s| {
                    for (i, (&ia, &ib)) in map_a.iter().zip(map_b).enumerate() {
                        s[ia] += g[i] * vb[ib];
                    }
                });
                acc(*b, &mut |s| {
                    for (i, (&ia, &ib)) in map_a.iter().zip(map_b).enumerate() {
                        s[ib] += g[i] * va[ia];
                    }
                });
            }
            Op::Scale { a, c } => acc(*a, &mut |s| {
                for (x, &gv) in s.iter_mut().zip(g) {
                    *x += gv * c;
                }
            }),
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                map_a,
                map_b,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |s| {
                    for (bi, (&ia, &ib)) in map_a.iter().zip(map_b).enumerate() {
                        gemm_nt(
                            m,
                            k,
                            n,
                            &g[bi * m * n..(bi + 1) * m * n],
                            &vb[ib * k * n..(ib + 1) * k * n],
                            &mut s[ia * m * k..(ia + 1) * m * k],
                        );
                    }
                });
                acc(*b, &mut |s| {
                    for (bi, (&ia, &ib)) in map_a.iter().zip(map_b).enumerate() {
                        gemm_tn(
                            m,
                            k,
                            n,
                            &va[ia * m * k..(ia + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut s[ib * k * n..(ib + 1) * k * n],
                        );
                    }
                });
            }
            Op::Reshape { a } => acc(*a, &mut |s| add_into(s, g)),
            Op::Permute { a, axes } => {
                let mut inv = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                let back = permute_data(g, out.shape(), &inv);
                acc(*a, &mut |s| add_into(s, &back));
            }
            Op::IndexSelect {
                a,
                outer,
                src_len,
                inner,
                indices,
            } => acc(*a, &mut |s| {
                let mut pos = 0;
                for o in 0..*outer {
                    for &j in indices.iter() {
                        let base = (o * src_len + j) * inner;
                        add_into(&mut s[base..base + inner], &g[pos..pos + inner]);
                        pos += inner;
                    }
                }
            }),
            Op::Concat {
                a,
                b,
                outer,
                a_len,
                b_len,
            } => {
                let w = a_len + b_len;
                acc(*a, &mut |s| {
                    for o in 0..*outer {
                        add_into(&mut s[o * a_len..(o + 1) * a_len], &g[o * w..o * w + a_len]);
                    }
                });
                acc(*b, &mut |s| {
                    for o in 0..*outer {
                        add_into(
                            &mut s[o * b_len..(o + 1) * b_len],
                            &g[o * w + a_len..(o + 1) * w],
                        );
                    }
                });
            }
            Op::Gelu { a } => {
                let x = self.value(*a).data();
                acc(*a, &mut |s| {
                    for ((sv, &gv), &xv) in s.iter_mut().zip(g).zip(x) {
                        *sv += gv * gelu_grad(xv);
                    }
                });
            }
            Op::Softmax { a } => {
                let cols = *out.shape().last().expect("softmax rank");
                let y = out.data();
                acc(*a, &mut |s| {
                    for r in 0..y.len() / cols {
                        let (yr, gr) = (&y[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            s[r * cols + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = self.shape(*gamma)[0];
                let gm = self.value(*gamma).data();
                acc(*x, &mut |s| {
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..c {
                            let d = gr[j] * gm[j];
                            mean_d += d;
                            mean_dh += d * hr[j];
                        }
                        mean_d /= c as f64;
                        mean_dh /= c as f64;
                        for j in 0..c {
                            let d = gr[j] * gm[j];
                            s[r * c + j] += is * (d - mean_d - hr[j] * mean_dh);
                        }
                    }
                });
                acc(*gamma, &mut |s| {
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            s[j] += gr[j] * hr[j];
                        }
                    }
                });
                acc(*beta, &mut |s| {
                    for gr in g.chunks(c) {
                        add_into(s, gr);
                    }
                });
            }
            Op::AddMask { a } => acc(*a, &mut |s| add_into(s, g)),
            Op::Substitute { x, v, flags, dim } => {
                let dim = *dim;
                acc(*x, &mut |s| {
                    for (i, (sv, gv)) in s.chunks_mut(dim).zip(g.chunks(dim)).enumerate() {
                        if !flags[i % flags.len()] {
                            add_into(sv, gv);
                        }
                    }
                });
                acc(*v, &mut |s| {
                    for (i, gv) in g.chunks(dim).enumerate() {
                        if flags[i % flags.len()] {
                            add_into(s, gv);
                        }
                    }
                });
            }
            Op::Sum { a } => acc(*a, &mut |s| {
                for x in s.iter_mut() {
                    *x += g[0];
                }
            }),
            Op::Mean { a } => {
                let n = self.value(*a).len() as f64;
                acc(*a, &mut |s| {
                    for x in s.iter_mut() {
                        *x += g[0] / n;
                    }
                });
            }
            Op::MaskedMse { recon, grad } => acc(*recon, &mut |s| {
                for (x, &d) in s.iter_mut().zip(grad) {
                    // visible pixels stay exactly 0.0
                    if d != 0.0 {
                        *x += d * g[0];
                    }
                }
            }),
            Op::CrossEntropy { logits, grad } => acc(*logits, &mut |s| {
                for (x, &d) in s.iter_mut().zip(grad) {
                    *x += d * g[0];
                }
            }),
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn scatter(dst: &mut [f64], map: &[usize], g: &[f64], f: impl Fn(f64) -> f64) {
    for (&j, &gv) in map.iter().zip(g) {
        dst[j] += f(gv);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn permute_data(src: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&i| shape[i]).collect();
    let step: Vec<usize> = axes.iter().map(|&i| in_strides[i]).collect();
    let n = src.len();
    let mut out = Vec::with_capacity(n);
    if rank == 0 {
        return src.to_vec();
    }
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(src[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= step[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<String, Var>,
}

impl Gradients {
    /// Gradient for `v`, if it was reached from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros of `shape` when unreached.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    /// Parameter gradients keyed by name, in lexicographic order.
    pub fn params(&self) -> impl Iterator<Item = (&str, Option<&Tensor>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), self.get(*v)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], d: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), d.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let i = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let m = tape.constant(t(&[2, 2], &[3., 5., 7., 11.]));
        let p = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(p).data(), &[3., 5., 7., 11.]);
    }

    #[test]
    fn row_times_column() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 2], &[1., 2.]));
        let b = tape.constant(t(&[2, 1], &[3., 4.]));
        let p = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(p).data(), &[11.]);
    }

    #[test]
    fn matmul_shape_mismatch_is_descriptive() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 2]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("inner dimensions"), "{err}");
    }

    #[test]
    fn softmax_uniform_and_masked() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[3]));
        let s = tape.softmax(z).unwrap();
        for v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(t(&[2], &[0.3, f64::NEG_INFINITY]));
        let s = tape.softmax(x).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_all_masked_row_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 2], f64::NEG_INFINITY));
        assert!(tape.softmax(x).is_err());
    }

    #[test]
    fn layer_norm_cases() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(t(&[2], &[1., 3.]));
        let y = tape.layer_norm(x, g, b, 1e-300).unwrap();
        assert_eq!(tape.value(y).data(), &[-1., 1.]);
        let g = tape.constant(Tensor::ones(&[4]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let x = tape.constant(Tensor::full(&[4], 2.5));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[3], &[0.1, -2., 7.]));
        let l = tape.sum(w).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1., 1., 1.]);
    }

    #[test]
    fn quadratic_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[2], &[1., 2.]));
        let sq = tape.mul(w, w).unwrap();
        let l = tape.sum(sq).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[2., 4.]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::ones(&[2]));
        assert!(tape.backward(w).is_err());
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::full(&[2], f64::MAX));
        assert!(matches!(tape.add(a, a), Err(Error::NonFinite { op: "add" })));
    }

    #[test]
    fn shared_parameter_accumulates() {
        let mut store = ParamStore::new();
        store.insert("w", t(&[2], &[3., -1.])).unwrap();
        let mut tape = Tape::with_params(&store);
        let a = tape.param("w").unwrap();
        let b = tape.param("w").unwrap();
        assert_eq!(a, b);
        let s = tape.add(a, b).unwrap();
        let l = tape.sum(s).unwrap();
        let g = tape.backward(l).unwrap();
        let (name, grad) = g.params().next().unwrap();
        assert_eq!(name, "w");
        assert_eq!(grad.unwrap().data(), &[2., 2.]);
    }

    #[test]
    fn permute_and_index_select_round_trip() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let p = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(p), &[4, 2, 3]);
        assert_eq!(tape.value(p).at(&[3, 1, 2]), tape.value(x).at(&[1, 2, 3]));
        let q = tape.permute(p, &[1, 2, 0]).unwrap();
        assert!(tape.value(q).bit_eq(tape.value(x)));
        let s = tape.index_select(x, 1, Arc::new(vec![2, 0])).unwrap();
        assert_eq!(tape.value(s).at(&[1, 0, 3]), tape.value(x).at(&[1, 2, 3]));
    }
}
