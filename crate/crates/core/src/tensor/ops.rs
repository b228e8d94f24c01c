use std::rc::Rc;

use super::{flops, numel, BackwardCtx, Tensor};
use crate::error::{contract, shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    /// Gradient flows to the first maximal element (lowest linear index).
    Max,
}

#[derive(Clone, Copy)]
enum Bin {
    Add,
    Sub,
    Mul,
    Div,
}

impl Bin {
    fn name(self) -> &'static str {
        match self {
            Bin::Add => "add",
            Bin::Sub => "sub",
            Bin::Mul => "mul",
            Bin::Div => "div",
        }
    }

    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            Bin::Add => a + b,
            Bin::Sub => a - b,
            Bin::Mul => a * b,
            Bin::Div => a / b,
        }
    }
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every linear index of `out`, the linear index of the broadcast source.
fn broadcast_map(out: &[usize], src: &[usize]) -> Vec<usize> {
    let n = out.len();
    let offset = n - src.len();
    let mut src_strides = vec![0usize; n];
    let mut stride = 1;
    for i in (0..src.len()).rev() {
        src_strides[i + offset] = if src[i] == 1 { 0 } else { stride };
        stride *= src[i];
    }
    let total = numel(out);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    let mut lin = 0usize;
    for _ in 0..total {
        map.push(lin);
        for ax in (0..n).rev() {
            idx[ax] += 1;
            lin += src_strides[ax];
            if idx[ax] < out[ax] {
                break;
            }
            lin -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

/// Splits `shape` around `axis` into (outer, axis_len, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

/// `dC · Bᵀ` for C = A[m,k]·B[k,n].
pub(crate) fn matmul_grad_a(dc: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut da = vec![0.0; m * k];
    for i in 0..m {
        let dcrow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            da[i * k + p] = dcrow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    da
}

/// `Aᵀ · dC` for C = A[m,k]·B[k,n].
pub(crate) fn matmul_grad_b(a: &[f64], dc: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut db = vec![0.0; k * n];
    for i in 0..m {
        let dcrow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let dbrow = &mut db[p * n..(p + 1) * n];
            for (d, g) in dbrow.iter_mut().zip(dcrow) {
                *d += aip * g;
            }
        }
    }
    db
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tensor {
    fn binary(&self, other: &Tensor, kind: Bin) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        let out_shape = broadcast_shape(sa, sb).ok_or_else(|| shape_err(kind.name(), sa, sb))?;
        let a = self.data();
        let b = other.data();
        let maps = if sa == sb {
            None
        } else {
            Some(Rc::new((broadcast_map(&out_shape, sa), broadcast_map(&out_shape, sb))))
        };
        let data: Vec<f64> = match &maps {
            None => a.iter().zip(b.iter()).map(|(&x, &y)| kind.apply(x, y)).collect(),
            Some(m) => m.0.iter().zip(&m.1).map(|(&i, &j)| kind.apply(a[i], b[j])).collect(),
        };
        drop((a, b));
        let (na, nb) = (self.numel(), other.numel());
        Ok(Tensor::from_op(
            kind.name(),
            out_shape,
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                let g = ctx.grad_out;
                let a = ctx.inputs[0].data();
                let b = ctx.inputs[1].data();
                let ia = |i: usize| maps.as_ref().map_or(i, |m| m.0[i]);
                let ib = |i: usize| maps.as_ref().map_or(i, |m| m.1[i]);
                let mut ga = ctx.needs(0).then(|| vec![0.0; na]);
                let mut gb = ctx.needs(1).then(|| vec![0.0; nb]);
                for (i, &gi) in g.iter().enumerate() {
                    let (x, y) = (ia(i), ib(i));
                    let (dx, dy) = match kind {
                        Bin::Add => (gi, gi),
                        Bin::Sub => (gi, -gi),
                        Bin::Mul => (gi * b[y], gi * a[x]),
                        Bin::Div => (gi / b[y], -gi * a[x] / (b[y] * b[y])),
                    };
                    if let Some(ga) = ga.as_mut() {
                        ga[x] += dx;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[y] += dy;
                    }
                }
                vec![ga, gb]
            }),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Bin::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Bin::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Bin::Mul)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Bin::Div)
    }

    /// Elementwise map with derivative `df(x, y)` where `y = f(x)`.
    pub fn map_unary(
        &self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(
            op,
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                let x = ctx.inputs[0].data();
                let g = ctx
                    .grad_out
                    .iter()
                    .zip(x.iter().zip(ctx.output))
                    .map(|(&g, (&x, &y))| g * df(x, y))
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.map_unary("neg", |x| -x, |_, _| -1.0)
    }

    pub fn relu(&self) -> Tensor {
        self.map_unary("relu", |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map_unary("sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn silu(&self) -> Tensor {
        self.map_unary(
            "silu",
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    pub fn exp(&self) -> Tensor {
        self.map_unary("exp", f64::exp, |_, y| y)
    }

    pub fn log(&self) -> Tensor {
        self.map_unary("log", f64::ln, |x, _| 1.0 / x)
    }

    pub fn softplus(&self) -> Tensor {
        self.map_unary("softplus", softplus, |x, _| sigmoid(x))
    }

    /// Subgradient 0 at the origin.
    pub fn abs(&self) -> Tensor {
        self.map_unary("abs", f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn sqrt(&self) -> Tensor {
        self.map_unary("sqrt", f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(&self) -> Tensor {
        self.map_unary("square", |x| x * x, |x, _| 2.0 * x)
    }

    pub fn sin(&self) -> Tensor {
        self.map_unary("sin", f64::sin, |x, _| x.cos())
    }

    pub fn cos(&self) -> Tensor {
        self.map_unary("cos", f64::cos, |x, _| -x.sin())
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        self.map_unary("mul_scalar", move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.map_unary("add_scalar", move |x| x + c, |_, _| 1.0)
    }

    /// `[m,k] × [k,n] → [m,n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(&self.data(), &other.data(), m, k, n);
        flops::record(flops::matmul(m, k, n));
        Ok(Tensor::from_op(
            "matmul",
            vec![m, n],
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                let a = ctx.inputs[0].data();
                let b = ctx.inputs[1].data();
                let ga = ctx.needs(0).then(|| matmul_grad_a(ctx.grad_out, &b, m, k, n));
                let gb = ctx.needs(1).then(|| matmul_grad_b(&a, ctx.grad_out, m, k, n));
                vec![ga, gb]
            }),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(shape_err("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|ctx: &BackwardCtx| vec![Some(ctx.grad_out.to_vec())]),
        ))
    }

    /// Transpose of a 2-D tensor.
    pub fn t(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(contract(format!("transpose needs a matrix, got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let transpose = move |src: &[f64], rows: usize, cols: usize| {
            let mut out = vec![0.0; rows * cols];
            for i in 0..rows {
                for j in 0..cols {
                    out[j * rows + i] = src[i * cols + j];
                }
            }
            out
        };
        let data = transpose(&self.data(), m, n);
        Ok(Tensor::from_op(
            "transpose",
            vec![n, m],
            data,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx| vec![Some(transpose(ctx.grad_out, n, m))]),
        ))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| contract("concat of zero tensors"))?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(contract(format!("concat axis {axis} out of range for {base:?}")));
        }
        for p in &parts[1..] {
            let s = p.shape();
            let compatible =
                s.len() == base.len() && s.iter().zip(base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", base, s));
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let widths: Vec<usize> = parts.iter().map(|p| p.dim(axis) * inner).collect();
        let total_width: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total_width);
        let borrowed: Vec<_> = parts.iter().map(|p| p.data()).collect();
        for o in 0..outer {
            for (d, &w) in borrowed.iter().zip(&widths) {
                data.extend_from_slice(&d[o * w..(o + 1) * w]);
            }
        }
        drop(borrowed);
        let mut shape = base.to_vec();
        shape[axis] = parts.iter().map(|p| p.dim(axis)).sum();
        Ok(Tensor::from_op(
            "concat",
            shape,
            data,
            parts.to_vec(),
            Box::new(move |ctx: &BackwardCtx| {
                let mut grads: Vec<Vec<f64>> = widths.iter().map(|w| Vec::with_capacity(w * outer)).collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (g, &w) in grads.iter_mut().zip(&widths) {
                        g.extend_from_slice(&ctx.grad_out[pos..pos + w]);
                        pos += w;
                    }
                }
                grads.into_iter().map(Some).collect()
            }),
        ))
    }

    /// Copy of `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let s = self.shape();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(contract(format!(
                "narrow(axis={axis}, start={start}, len={len}) out of range for {s:?}"
            )));
        }
        let (outer, alen, inner) = split_axis(s, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        {
            let src = self.data();
            for o in 0..outer {
                let base = (o * alen + start) * inner;
                data.extend_from_slice(&src[base..base + len * inner]);
            }
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        let n_in = self.numel();
        Ok(Tensor::from_op(
            "narrow",
            shape,
            data,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                let mut g = vec![0.0; n_in];
                for o in 0..outer {
                    let base = (o * alen + start) * inner;
                    let src = &ctx.grad_out[o * len * inner..(o + 1) * len * inner];
                    g[base..base + len * inner].copy_from_slice(src);
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Reduction over the listed axes, which are removed from the shape.
    ///
    /// An empty axis list, a repeated axis, or an out-of-range axis is a
    /// contract error.
    pub fn reduce(&self, op: ReduceOp, axes: &[usize]) -> Result<Tensor> {
        let s = self.shape().to_vec();
        if axes.is_empty() {
            return Err(contract("reduction over an empty axis list"));
        }
        let mut reduced = vec![false; s.len()];
        for &a in axes {
            if a >= s.len() || reduced[a] {
                return Err(contract(format!("invalid reduction axes {axes:?} for shape {s:?}")));
            }
            reduced[a] = true;
        }
        let out_shape: Vec<usize> = s.iter().zip(&reduced).filter(|(_, r)| !**r).map(|(d, _)| *d).collect();
        let count = s
            .iter()
            .zip(&reduced)
            .filter(|(_, r)| **r)
            .map(|(d, _)| *d)
            .product::<usize>();
        // Map each input index to its output slot.
        let mut keep_shape = s.clone();
        for (d, r) in keep_shape.iter_mut().zip(&reduced) {
            if *r {
                *d = 1;
            }
        }
        let map = broadcast_map(&s, &keep_shape);
        let n_out = numel(&out_shape);
        let src = self.data();
        let (data, argmax) = match op {
            ReduceOp::Sum | ReduceOp::Mean => {
                let mut out = vec![0.0; n_out];
                for (i, &o) in map.iter().enumerate() {
                    out[o] += src[i];
                }
                if op == ReduceOp::Mean {
                    out.iter_mut().for_each(|v| *v /= count as f64);
                }
                (out, None)
            }
            ReduceOp::Max => {
                let mut out = vec![f64::NEG_INFINITY; n_out];
                let mut arg = vec![usize::MAX; n_out];
                for (i, &o) in map.iter().enumerate() {
                    if arg[o] == usize::MAX || src[i] > out[o] {
                        out[o] = src[i];
                        arg[o] = i;
                    }
                }
                (out, Some(arg))
            }
        };
        drop(src);
        let n_in = self.numel();
        let name = match op {
            ReduceOp::Sum => "sum",
            ReduceOp::Mean => "mean",
            ReduceOp::Max => "max",
        };
        Ok(Tensor::from_op(
            name,
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                let g = ctx.grad_out;
                let grad = match &argmax {
                    Some(arg) => {
                        let mut out = vec![0.0; n_in];
                        for (o, &i) in arg.iter().enumerate() {
                            out[i] += g[o];
                        }
                        out
                    }
                    None => {
                        let scale = if op == ReduceOp::Mean { 1.0 / count as f64 } else { 1.0 };
                        map.iter().map(|&o| g[o] * scale).collect()
                    }
                };
                vec![Some(grad)]
            }),
        ))
    }

    pub fn sum_all(&self) -> Tensor {
        let axes: Vec<usize> = (0..self.ndim()).collect();
        if axes.is_empty() {
            return self.reshape(&[]).expect("scalar reshape");
        }
        self.reduce(ReduceOp::Sum, &axes).expect("full reduction")
    }

    pub fn mean_all(&self) -> Tensor {
        let axes: Vec<usize> = (0..self.ndim()).collect();
        if axes.is_empty() {
            return self.reshape(&[]).expect("scalar reshape");
        }
        self.reduce(ReduceOp::Mean, &axes).expect("full reduction")
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let s = self.shape();
        if axis >= s.len() {
            return Err(contract(format!("softmax axis {axis} out of range for {s:?}")));
        }
        let (outer, n, inner) = split_axis(s, axis);
        let src = self.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let m = (0..n).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..n {
                    let e = (src[at(j)] - m).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[at(j)] /= z;
                }
            }
        }
        drop(src);
        Ok(Tensor::from_op(
            "softmax",
            s.to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                let (y, g) = (ctx.output, ctx.grad_out);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..n).map(|j| y[at(j)] * g[at(j)]).sum();
                        for j in 0..n {
                            dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }
}
