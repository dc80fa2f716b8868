//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive application in execution order, so the
//! node list is already a topological order. Leaves can be overwritten and the
//! whole tape re-executed with [`Graph::replay`]; the finite-difference checker
//! relies on that.

use super::kernels::{self, dot};
use super::tensor::{check_shape, numel, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The differentiable primitives.
///
/// Reductions with an axis keep that axis with extent 1. Elementwise binary
/// primitives require identical shapes; the only broadcasts are
/// [`Primitive::ScaleBy`] (scalar times tensor) and [`Primitive::AddRow`]
/// (bias row added to every row).
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    MatMul,
    Add,
    Sub,
    Mul,
    Scale(f64),
    ScaleBy,
    AddRow,
    Recip,
    Softmax,
    LogSoftmax,
    LayerNorm { eps: f64 },
    Gelu,
    Tanh,
    Exp,
    Log,
    SmoothL1,
    Mean { axis: Option<usize> },
    Sum { axis: Option<usize> },
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    Transpose,
    Reshape { shape: Vec<usize> },
    Embedding { ids: Vec<usize> },
    L2Normalize,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Scale(_) => "scale",
            Primitive::ScaleBy => "scale_by",
            Primitive::AddRow => "add_row",
            Primitive::Recip => "recip",
            Primitive::Softmax => "softmax",
            Primitive::LogSoftmax => "log_softmax",
            Primitive::LayerNorm { .. } => "layer_norm",
            Primitive::Gelu => "gelu",
            Primitive::Tanh => "tanh",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::SmoothL1 => "smooth_l1",
            Primitive::Mean { .. } => "mean",
            Primitive::Sum { .. } => "sum",
            Primitive::Concat { .. } => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::Transpose => "transpose",
            Primitive::Reshape { .. } => "reshape",
            Primitive::Embedding { .. } => "embedding",
            Primitive::L2Normalize => "l2_normalize",
        }
    }
}

struct Node<T> {
    prim: Option<Primitive>,
    inputs: Vec<Var>,
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
}

/// Ordered record of executed primitives. Confined to one thread at a time.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn get_f32(&self, v: Var) -> Option<Vec<f32>> {
        self.get(v).map(|g| g.iter().map(|x| x.as_f32()).collect())
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn last_dim(shape: &[usize]) -> (usize, usize) {
    let d = *shape.last().unwrap();
    (numel(shape) / d, d)
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn unary_map<T: Real>(x: &[T], f: impl Fn(T) -> T) -> Vec<T> {
    x.iter().map(|&v| f(v)).collect()
}

type Input<'a, T> = (&'a [usize], &'a [T]);

fn compute<T: Real>(prim: &Primitive, ins: &[Input<'_, T>]) -> Result<(Vec<usize>, Vec<T>)> {
    let op = prim.name();
    let arity = match prim {
        Primitive::MatMul
        | Primitive::Add
        | Primitive::Sub
        | Primitive::Mul
        | Primitive::ScaleBy
        | Primitive::AddRow => Some(2),
        Primitive::LayerNorm { .. } => Some(3),
        Primitive::Concat { .. } => None,
        _ => Some(1),
    };
    match arity {
        Some(n) if ins.len() != n => {
            return Err(Error::shape(
                op,
                format!("expected {n} inputs, got {}", ins.len()),
            ))
        }
        None if ins.is_empty() => return Err(Error::shape(op, "needs at least one input")),
        _ => {}
    }
    let (s0, x) = ins[0];
    let out = match prim {
        Primitive::MatMul => {
            let (s1, y) = ins[1];
            if s0.len() != 2 || s1.len() != 2 || s0[1] != s1[0] {
                return Err(Error::shape(op, format!("{s0:?} x {s1:?}")));
            }
            let (m, k, n) = (s0[0], s0[1], s1[1]);
            (vec![m, n], kernels::matmul(x, y, m, k, n))
        }
        Primitive::Add | Primitive::Sub | Primitive::Mul => {
            let (s1, y) = ins[1];
            same_shape(op, s0, s1)?;
            let v = match prim {
                Primitive::Add => x.iter().zip(y).map(|(&a, &b)| a + b).collect(),
                Primitive::Sub => x.iter().zip(y).map(|(&a, &b)| a - b).collect(),
                _ => x.iter().zip(y).map(|(&a, &b)| a * b).collect(),
            };
            (s0.to_vec(), v)
        }
        Primitive::Scale(s) => {
            let s = T::from_f64(*s);
            (s0.to_vec(), unary_map(x, |v| v * s))
        }
        Primitive::ScaleBy => {
            let (s1, y) = ins[1];
            if numel(s1) != 1 {
                return Err(Error::shape(op, format!("scale must be scalar, got {s1:?}")));
            }
            let s = y[0];
            (s0.to_vec(), unary_map(x, |v| v * s))
        }
        Primitive::AddRow => {
            let (s1, b) = ins[1];
            let (rows, d) = last_dim(s0);
            if numel(s1) != d || *s1.last().unwrap() != d {
                return Err(Error::shape(op, format!("row {s1:?} against {s0:?}")));
            }
            let mut v = x.to_vec();
            for r in 0..rows {
                for (o, &bv) in v[r * d..(r + 1) * d].iter_mut().zip(b) {
                    *o += bv;
                }
            }
            (s0.to_vec(), v)
        }
        Primitive::Recip => (s0.to_vec(), unary_map(x, |v| T::one() / v)),
        Primitive::Softmax | Primitive::LogSoftmax => {
            let (rows, d) = last_dim(s0);
            let mut v = vec![T::zero(); x.len()];
            for r in 0..rows {
                let xr = &x[r * d..(r + 1) * d];
                let vr = &mut v[r * d..(r + 1) * d];
                let m = xr.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                let mut z = T::zero();
                for (o, &xi) in vr.iter_mut().zip(xr) {
                    *o = (xi - m).exp();
                    z += *o;
                }
                if matches!(prim, Primitive::Softmax) {
                    vr.iter_mut().for_each(|o| *o /= z);
                } else {
                    let lz = z.ln() + m;
                    for (o, &xi) in vr.iter_mut().zip(xr) {
                        *o = xi - lz;
                    }
                }
            }
            (s0.to_vec(), v)
        }
        Primitive::LayerNorm { eps } => {
            let (rows, d) = last_dim(s0);
            let (sg, g) = ins[1];
            let (sb, b) = ins[2];
            if numel(sg) != d || numel(sb) != d {
                return Err(Error::shape(
                    op,
                    format!("gain {sg:?} / bias {sb:?} against {s0:?}"),
                ));
            }
            let eps = T::from_f64(*eps);
            let dn = T::from_f64(d as f64);
            let mut v = vec![T::zero(); x.len()];
            for r in 0..rows {
                let xr = &x[r * d..(r + 1) * d];
                let mean = xr.iter().copied().sum::<T>() / dn;
                let var = xr.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() / dn;
                let rstd = T::one() / (var + eps).sqrt();
                for j in 0..d {
                    v[r * d + j] = (xr[j] - mean) * rstd * g[j] + b[j];
                }
            }
            (s0.to_vec(), v)
        }
        Primitive::Gelu => (s0.to_vec(), unary_map(x, kernels::gelu)),
        Primitive::Tanh => (s0.to_vec(), unary_map(x, |v| v.tanh())),
        Primitive::Exp => (s0.to_vec(), unary_map(x, |v| v.exp())),
        Primitive::Log => (s0.to_vec(), unary_map(x, |v| v.ln())),
        Primitive::SmoothL1 => (s0.to_vec(), unary_map(x, kernels::smooth_l1)),
        Primitive::Mean { axis } | Primitive::Sum { axis } => {
            let is_mean = matches!(prim, Primitive::Mean { .. });
            match axis {
                None => {
                    let s = x.iter().copied().sum::<T>();
                    let v = if is_mean {
                        s / T::from_f64(x.len() as f64)
                    } else {
                        s
                    };
                    (vec![1], vec![v])
                }
                Some(a) => {
                    if *a >= s0.len() {
                        return Err(Error::shape(op, format!("axis {a} for {s0:?}")));
                    }
                    let (outer, mid, inner) = split_axis(s0, *a);
                    let mut v = vec![T::zero(); outer * inner];
                    for o in 0..outer {
                        for m in 0..mid {
                            let src = &x[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                            for (dst, &s) in v[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                                *dst += s;
                            }
                        }
                    }
                    if is_mean {
                        let n = T::from_f64(mid as f64);
                        v.iter_mut().for_each(|e| *e /= n);
                    }
                    let mut shape = s0.to_vec();
                    shape[*a] = 1;
                    (shape, v)
                }
            }
        }
        Primitive::Concat { axis } => {
            let a = *axis;
            if a >= s0.len() {
                return Err(Error::shape(op, format!("axis {a} for {s0:?}")));
            }
            let mut shape = s0.to_vec();
            shape[a] = 0;
            for (s, _) in ins {
                if s.len() != s0.len()
                    || s.iter()
                        .zip(s0)
                        .enumerate()
                        .any(|(i, (p, q))| i != a && p != q)
                {
                    return Err(Error::shape(op, format!("{s:?} against {s0:?} on axis {a}")));
                }
                shape[a] += s[a];
            }
            let (outer, _, inner) = split_axis(&shape, a);
            let mut v = Vec::with_capacity(numel(&shape));
            for o in 0..outer {
                for (s, d) in ins {
                    let chunk = s[a] * inner;
                    v.extend_from_slice(&d[o * chunk..(o + 1) * chunk]);
                }
            }
            (shape, v)
        }
        Primitive::Slice { axis, start, end } => {
            let a = *axis;
            if a >= s0.len() || start >= end || *end > s0[a] {
                return Err(Error::shape(
                    op,
                    format!("[{start}, {end}) on axis {a} of {s0:?}"),
                ));
            }
            let (outer, mid, inner) = split_axis(s0, a);
            let mut v = Vec::with_capacity(outer * (end - start) * inner);
            for o in 0..outer {
                v.extend_from_slice(&x[(o * mid + start) * inner..(o * mid + end) * inner]);
            }
            let mut shape = s0.to_vec();
            shape[a] = end - start;
            (shape, v)
        }
        Primitive::Transpose => {
            if s0.len() < 2 {
                return Err(Error::shape(op, format!("needs rank >= 2, got {s0:?}")));
            }
            let r = s0.len();
            let (rows, cols) = (s0[r - 2], s0[r - 1]);
            let batch = numel(s0) / (rows * cols);
            let mut v = vec![T::zero(); x.len()];
            for bi in 0..batch {
                let off = bi * rows * cols;
                for i in 0..rows {
                    for j in 0..cols {
                        v[off + j * rows + i] = x[off + i * cols + j];
                    }
                }
            }
            let mut shape = s0.to_vec();
            shape.swap(r - 2, r - 1);
            (shape, v)
        }
        Primitive::Reshape { shape } => {
            check_shape(shape)?;
            if numel(shape) != numel(s0) {
                return Err(Error::shape(op, format!("{s0:?} -> {shape:?}")));
            }
            (shape.clone(), x.to_vec())
        }
        Primitive::Embedding { ids } => {
            if s0.len() != 2 {
                return Err(Error::shape(op, format!("table must be rank 2, got {s0:?}")));
            }
            if ids.is_empty() {
                return Err(Error::shape(op, "empty id list"));
            }
            let (vocab, d) = (s0[0], s0[1]);
            let mut v = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= vocab {
                    return Err(Error::shape(op, format!("id {id} outside table {s0:?}")));
                }
                v.extend_from_slice(&x[id * d..(id + 1) * d]);
            }
            (vec![ids.len(), d], v)
        }
        Primitive::L2Normalize => {
            let (rows, d) = last_dim(s0);
            let mut v = x.to_vec();
            for r in 0..rows {
                let row = &mut v[r * d..(r + 1) * d];
                let n = dot(row, row).sqrt();
                if n == T::zero() || !n.is_finite() {
                    return Err(Error::shape(
                        op,
                        format!("row {r} of {s0:?} has norm {n}"),
                    ));
                }
                row.iter_mut().for_each(|e| *e /= n);
            }
            (s0.to_vec(), v)
        }
    };
    Ok(out)
}

/// Per-input gradient contributions of one node.
fn backward_node<T: Real>(
    prim: &Primitive,
    ins: &[Input<'_, T>],
    out: &[T],
    gout: &[T],
    need: &[bool],
) -> Vec<Option<Vec<T>>> {
    let mut res: Vec<Option<Vec<T>>> = vec![None; ins.len()];
    let (s0, x) = ins[0];
    match prim {
        Primitive::MatMul => {
            let (_, y) = ins[1];
            let (m, k, n) = (s0[0], s0[1], ins[1].0[1]);
            if need[0] {
                let mut g = vec![T::zero(); m * k];
                kernels::matmul_nt_acc(gout, y, &mut g, m, n, k);
                res[0] = Some(g);
            }
            if need[1] {
                let mut g = vec![T::zero(); k * n];
                kernels::matmul_tn_acc(x, gout, &mut g, k, m, n);
                res[1] = Some(g);
            }
        }
        Primitive::Add => {
            if need[0] {
                res[0] = Some(gout.to_vec());
            }
            if need[1] {
                res[1] = Some(gout.to_vec());
            }
        }
        Primitive::Sub => {
            if need[0] {
                res[0] = Some(gout.to_vec());
            }
            if need[1] {
                res[1] = Some(unary_map(gout, |g| -g));
            }
        }
        Primitive::Mul => {
            let (_, y) = ins[1];
            if need[0] {
                res[0] = Some(gout.iter().zip(y).map(|(&g, &b)| g * b).collect());
            }
            if need[1] {
                res[1] = Some(gout.iter().zip(x).map(|(&g, &a)| g * a).collect());
            }
        }
        Primitive::Scale(s) => {
            let s = T::from_f64(*s);
            res[0] = Some(unary_map(gout, |g| g * s));
        }
        Primitive::ScaleBy => {
            let s = ins[1].1[0];
            if need[0] {
                res[0] = Some(unary_map(gout, |g| g * s));
            }
            if need[1] {
                res[1] = Some(vec![dot(gout, x)]);
            }
        }
        Primitive::AddRow => {
            if need[0] {
                res[0] = Some(gout.to_vec());
            }
            if need[1] {
                let (rows, d) = last_dim(s0);
                let mut g = vec![T::zero(); d];
                for r in 0..rows {
                    for (a, &b) in g.iter_mut().zip(&gout[r * d..(r + 1) * d]) {
                        *a += b;
                    }
                }
                res[1] = Some(g);
            }
        }
        Primitive::Recip => {
            res[0] = Some(gout.iter().zip(out).map(|(&g, &y)| -g * y * y).collect());
        }
        Primitive::Softmax => {
            let (rows, d) = last_dim(s0);
            let mut g = vec![T::zero(); x.len()];
            for r in 0..rows {
                let yr = &out[r * d..(r + 1) * d];
                let gr = &gout[r * d..(r + 1) * d];
                let s = dot(yr, gr);
                for j in 0..d {
                    g[r * d + j] = yr[j] * (gr[j] - s);
                }
            }
            res[0] = Some(g);
        }
        Primitive::LogSoftmax => {
            let (rows, d) = last_dim(s0);
            let mut g = vec![T::zero(); x.len()];
            for r in 0..rows {
                let yr = &out[r * d..(r + 1) * d];
                let gr = &gout[r * d..(r + 1) * d];
                let s = gr.iter().copied().sum::<T>();
                for j in 0..d {
                    g[r * d + j] = gr[j] - yr[j].exp() * s;
                }
            }
            res[0] = Some(g);
        }
        Primitive::LayerNorm { eps } => {
            let (rows, d) = last_dim(s0);
            let gain = ins[1].1;
            let eps = T::from_f64(*eps);
            let dn = T::from_f64(d as f64);
            let mut gx = vec![T::zero(); if need[0] { x.len() } else { 0 }];
            let mut gg = vec![T::zero(); d];
            let mut gb = vec![T::zero(); d];
            let mut xhat = vec![T::zero(); d];
            let mut dxhat = vec![T::zero(); d];
            for r in 0..rows {
                let xr = &x[r * d..(r + 1) * d];
                let gr = &gout[r * d..(r + 1) * d];
                let mean = xr.iter().copied().sum::<T>() / dn;
                let var = xr.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() / dn;
                let rstd = T::one() / (var + eps).sqrt();
                for j in 0..d {
                    xhat[j] = (xr[j] - mean) * rstd;
                    dxhat[j] = gr[j] * gain[j];
                    gg[j] += gr[j] * xhat[j];
                    gb[j] += gr[j];
                }
                if need[0] {
                    let m1 = dxhat.iter().copied().sum::<T>() / dn;
                    let m2 = dot(&dxhat, &xhat) / dn;
                    for j in 0..d {
                        gx[r * d + j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
            }
            if need[0] {
                res[0] = Some(gx);
            }
            if need[1] {
                res[1] = Some(gg);
            }
            if need[2] {
                res[2] = Some(gb);
            }
        }
        Primitive::Gelu => {
            res[0] = Some(
                gout.iter()
                    .zip(x)
                    .map(|(&g, &a)| g * kernels::gelu_grad(a))
                    .collect(),
            );
        }
        Primitive::Tanh => {
            res[0] = Some(
                gout.iter()
                    .zip(out)
                    .map(|(&g, &y)| g * (T::one() - y * y))
                    .collect(),
            );
        }
        Primitive::Exp => {
            res[0] = Some(gout.iter().zip(out).map(|(&g, &y)| g * y).collect());
        }
        Primitive::Log => {
            res[0] = Some(gout.iter().zip(x).map(|(&g, &a)| g / a).collect());
        }
        Primitive::SmoothL1 => {
            res[0] = Some(
                gout.iter()
                    .zip(x)
                    .map(|(&g, &a)| g * kernels::smooth_l1_grad(a))
                    .collect(),
            );
        }
        Primitive::Mean { axis } | Primitive::Sum { axis } => {
            let is_mean = matches!(prim, Primitive::Mean { .. });
            match axis {
                None => {
                    let g = if is_mean {
                        gout[0] / T::from_f64(x.len() as f64)
                    } else {
                        gout[0]
                    };
                    res[0] = Some(vec![g; x.len()]);
                }
                Some(a) => {
                    let (outer, mid, inner) = split_axis(s0, *a);
                    let scale = if is_mean {
                        T::one() / T::from_f64(mid as f64)
                    } else {
                        T::one()
                    };
                    let mut g = vec![T::zero(); x.len()];
                    for o in 0..outer {
                        let src = &gout[o * inner..(o + 1) * inner];
                        for m in 0..mid {
                            let dst = &mut g[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d = s * scale;
                            }
                        }
                    }
                    res[0] = Some(g);
                }
            }
        }
        Primitive::Concat { axis } => {
            let a = *axis;
            let total: usize = ins.iter().map(|(s, _)| s[a]).sum();
            let mut out_shape = s0.to_vec();
            out_shape[a] = total;
            let (outer, _, inner) = split_axis(&out_shape, a);
            let mut offset = 0;
            for (i, (s, _)) in ins.iter().enumerate() {
                let chunk = s[a] * inner;
                if need[i] {
                    let mut g = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        let base = o * total * inner + offset;
                        g.extend_from_slice(&gout[base..base + chunk]);
                    }
                    res[i] = Some(g);
                }
                offset += chunk;
            }
        }
        Primitive::Slice { axis, start, end } => {
            let (outer, mid, inner) = split_axis(s0, *axis);
            let w = (end - start) * inner;
            let mut g = vec![T::zero(); x.len()];
            for o in 0..outer {
                g[(o * mid + start) * inner..(o * mid + end) * inner]
                    .copy_from_slice(&gout[o * w..(o + 1) * w]);
            }
            res[0] = Some(g);
        }
        Primitive::Transpose => {
            let r = s0.len();
            let (rows, cols) = (s0[r - 2], s0[r - 1]);
            let batch = numel(s0) / (rows * cols);
            let mut g = vec![T::zero(); x.len()];
            for bi in 0..batch {
                let off = bi * rows * cols;
                for i in 0..rows {
                    for j in 0..cols {
                        g[off + i * cols + j] = gout[off + j * rows + i];
                    }
                }
            }
            res[0] = Some(g);
        }
        Primitive::Reshape { .. } => {
            res[0] = Some(gout.to_vec());
        }
        Primitive::Embedding { ids } => {
            let d = s0[1];
            let mut g = vec![T::zero(); x.len()];
            for (r, &id) in ids.iter().enumerate() {
                for (a, &b) in g[id * d..(id + 1) * d]
                    .iter_mut()
                    .zip(&gout[r * d..(r + 1) * d])
                {
                    *a += b;
                }
            }
            res[0] = Some(g);
        }
        Primitive::L2Normalize => {
            let (rows, d) = last_dim(s0);
            let mut g = vec![T::zero(); x.len()];
            for r in 0..rows {
                let xr = &x[r * d..(r + 1) * d];
                let yr = &out[r * d..(r + 1) * d];
                let gr = &gout[r * d..(r + 1) * d];
                let n = dot(xr, xr).sqrt();
                let s = dot(gr, yr);
                for j in 0..d {
                    g[r * d + j] = (gr[j] - yr[j] * s) / n;
                }
            }
            res[0] = Some(g);
        }
    }
    for (r, &n) in res.iter_mut().zip(need) {
        if !n {
            *r = None;
        }
    }
    if fault::is_corrupted(prim.name()) {
        for g in res.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= T::from_f64(1.1));
        }
    }
    res
}

/// Deliberate corruption of one backward rule, used to show that the
/// finite-difference checker catches a wrong derivative.
#[doc(hidden)]
pub mod fault {
    use std::cell::Cell;

    thread_local! {
        static CORRUPTED: Cell<Option<&'static str>> = const { Cell::new(None) };
    }

    /// Scales the backward rule of the named primitive by 1.1 on this thread
    /// until reset with `None`.
    pub fn corrupt_backward(name: Option<&'static str>) {
        CORRUPTED.with(|c| c.set(name));
    }

    pub(super) fn is_corrupted(name: &str) -> bool {
        CORRUPTED.with(|c| c.get() == Some(name))
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            prim: None,
            inputs: Vec::new(),
            shape,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf holding a copy of `t`.
    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Var {
        let value = t.data().iter().map(|&v| T::from_f32(v)).collect();
        self.push_leaf(t.shape().to_vec(), value, requires_grad)
    }

    /// Leaf with gradient tracking iff `t` requires grad.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.leaf(t, t.requires_grad())
    }

    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, value: Vec<T>) -> Result<Var> {
        let shape = shape.into();
        check_shape(&shape)?;
        if numel(&shape) != value.len() {
            return Err(Error::shape(
                "constant",
                format!("shape {shape:?} with {} values", value.len()),
            ));
        }
        Ok(self.push_leaf(shape, value, false))
    }

    pub fn variable(&mut self, shape: impl Into<Vec<usize>>, value: Vec<T>) -> Result<Var> {
        let v = self.constant(shape, value)?;
        self.nodes[v.0].requires_grad = true;
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.iter().map(|x| x.as_f32()).collect())
            .expect("graph nodes hold valid shapes")
    }

    /// Applies `prim` to `inputs`, recording the result.
    pub fn evaluate(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        let (shape, value) = {
            let ins: Vec<Input<'_, T>> = inputs
                .iter()
                .map(|v| {
                    let n = &self.nodes[v.0];
                    (n.shape.as_slice(), n.value.as_slice())
                })
                .collect();
            compute(&prim, &ins)?
        };
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            prim: Some(prim),
            inputs: inputs.to_vec(),
            shape,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Overwrites a leaf's values. Call [`Graph::replay`] to propagate.
    pub fn set_leaf(&mut self, v: Var, data: &[T]) -> Result<()> {
        let n = &mut self.nodes[v.0];
        if n.prim.is_some() {
            return Err(Error::invalid(format!("node {} is not a leaf", v.0)));
        }
        if n.value.len() != data.len() {
            return Err(Error::shape(
                "set_leaf",
                format!("{:?} with {} values", n.shape, data.len()),
            ));
        }
        n.value.copy_from_slice(data);
        Ok(())
    }

    /// Re-executes every recorded primitive in order on the current leaf values.
    pub fn replay(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            let (done, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            let Some(prim) = &node.prim else { continue };
            let ins: Vec<Input<'_, T>> = node
                .inputs
                .iter()
                .map(|v| (done[v.0].shape.as_slice(), done[v.0].value.as_slice()))
                .collect();
            let (shape, value) = compute(prim, &ins)?;
            node.shape = shape;
            node.value = value;
        }
        Ok(())
    }

    /// Reverse sweep from a scalar root. Gradients accumulate additively when
    /// a node feeds several consumers.
    pub fn backward(&self, root: Var) -> Result<Grads<T>> {
        let rn = &self.nodes[root.0];
        if numel(&rn.shape) != 1 {
            return Err(Error::NonScalarRoot(rn.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(prim) = &node.prim else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            let need: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let ins: Vec<Input<'_, T>> = node
                .inputs
                .iter()
                .map(|v| {
                    let n = &self.nodes[v.0];
                    (n.shape.as_slice(), n.value.as_slice())
                })
                .collect();
            let contribs = backward_node(prim, &ins, &node.value, &gout, &need);
            for (v, c) in node.inputs.iter().zip(contribs) {
                let Some(c) = c else { continue };
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        grads.resize_with(self.nodes.len(), || None);
        Ok(Grads { grads })
    }

    // Convenience wrappers.

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.evaluate(Primitive::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.evaluate(Primitive::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.evaluate(Primitive::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.evaluate(Primitive::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.evaluate(Primitive::Scale(s), &[a])
    }
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        self.evaluate(Primitive::ScaleBy, &[a, s])
    }
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.evaluate(Primitive::AddRow, &[a, row])
    }
    pub fn recip(&mut self, a: Var) -> Result<Var> {
        self.evaluate(Primitive::Recip, &[a])
    }
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.evaluate(Primitive::Softmax, &[a])
    }
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.evaluate(Primitive::LogSoftmax, &[a])
    }
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        self.evaluate(Primitive::LayerNorm { eps: 1e-5 }, &[x, gain, bias])
    }
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.evaluate(Primitive::Gelu, &[a])
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.evaluate(Primitive::Tanh, &[a])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.evaluate(Primitive::Exp, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.evaluate(Primitive::Log, &[a])
    }
    pub fn smooth_l1_elementwise(&mut self, a: Var) -> Result<Var> {
        self.evaluate(Primitive::SmoothL1, &[a])
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.evaluate(Primitive::Mean { axis: None }, &[a])
    }
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.evaluate(Primitive::Mean { axis: Some(axis) }, &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.evaluate(Primitive::Sum { axis: None }, &[a])
    }
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.evaluate(Primitive::Sum { axis: Some(axis) }, &[a])
    }
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        self.evaluate(Primitive::Concat { axis }, parts)
    }
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        if start == 0 && self.shape(a).get(axis) == Some(&end) {
            return Ok(a);
        }
        self.evaluate(Primitive::Slice { axis, start, end }, &[a])
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.evaluate(Primitive::Transpose, &[a])
    }
    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        self.evaluate(
            Primitive::Reshape {
                shape: shape.into(),
            },
            &[a],
        )
    }
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.evaluate(Primitive::Embedding { ids: ids.to_vec() }, &[table])
    }
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        self.evaluate(Primitive::L2Normalize, &[a])
    }

    /// `x · w + b` with `b` added to every row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_shape_algebra() {
        let mut g = Graph::<f32>::new();
        let a = g.leaf(&Tensor::zeros(vec![2, 3]).unwrap(), false);
        let b = g.leaf(&Tensor::zeros(vec![3, 4]).unwrap(), false);
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 4]);
        let err = g.matmul(b, b).unwrap_err().to_string();
        assert!(err.contains("[3, 4]"), "{err}");
    }

    #[test]
    fn softmax_uniform_row() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(&t(&[1, 4], &[0.7; 4]), false);
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y), &[0.25; 4]);
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(&t(&[1, 3], &[1000.0, 1000.0, -1000.0]), false);
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y), &[0.5, 0.5, 0.0]);
        let l = g.log_softmax(x).unwrap();
        assert!(g.value(l).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn mean_reduce() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(&t(&[4], &[1.0, 2.0, 3.0, 4.0]), true);
        let m = g.mean(x).unwrap();
        assert_eq!(g.scalar(m), 2.5);
        let grads = g.backward(m).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.25; 4]);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(&Tensor::scalar(3.0), true);
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(&t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(g.backward(x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn accumulation_over_uses() {
        // x used three times: grad of sum(x) + sum(x*2) + mean(x) is 1 + 2 + 1/n
        let mut g = Graph::<f64>::new();
        let x = g.variable(vec![4], vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        let a = g.sum(x).unwrap();
        let x2 = g.scale(x, 2.0).unwrap();
        let b = g.sum(x2).unwrap();
        let c = g.mean(x).unwrap();
        let ab = g.add(a, b).unwrap();
        let root = g.add(ab, c).unwrap();
        let grads = g.backward(root).unwrap();
        for v in grads.get(x).unwrap() {
            assert!((v - 3.25).abs() < 1e-12);
        }
    }

    #[test]
    fn replay_is_bitwise_deterministic() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(&t(&[2, 3], &[0.1, -0.4, 0.9, 1.3, -2.0, 0.3]), true);
        let w = g.leaf(&t(&[3, 2], &[0.5, -0.1, 0.2, 0.7, -0.3, 0.05]), true);
        let h = g.matmul(x, w).unwrap();
        let h = g.gelu(h).unwrap();
        let s = g.softmax(h).unwrap();
        let before = g.value(s).to_vec();
        g.replay().unwrap();
        assert_eq!(
            before.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            g.value(s).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn concat_slice_roundtrip() {
        let mut g = Graph::<f32>::new();
        let a = g.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
        let b = g.leaf(&t(&[1, 2], &[5.0, 6.0]), false);
        let c = g.concat(&[a, b], 0).unwrap();
        assert_eq!(g.value(c), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let d = g.concat(&[a, a], 1).unwrap();
        assert_eq!(g.value(d), &[1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0]);
        let s = g.slice(d, 1, 1, 3).unwrap();
        assert_eq!(g.value(s), &[2.0, 1.0, 4.0, 3.0]);
        assert!(g.slice(d, 1, 2, 5).is_err());
    }

    #[test]
    fn l2_normalize_rejects_zero_rows() {
        let mut g = Graph::<f32>::new();
        let a = g.leaf(&t(&[2, 2], &[3.0, 4.0, 0.0, 0.0]), false);
        assert!(g.l2_normalize(a).is_err());
    }

    #[test]
    fn embedding_lookup() {
        let mut g = Graph::<f64>::new();
        let table = g.variable(vec![3, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let e = g.embedding(table, &[2, 0, 2]).unwrap();
        assert_eq!(g.value(e), &[4.0, 5.0, 0.0, 1.0, 4.0, 5.0]);
        let s = g.sum(e).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(g.embedding(table, &[3]).is_err());
    }
}
