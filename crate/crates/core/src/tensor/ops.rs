//! Differentiable tensor operations other than convolutions.
//!
//! Broadcasting is limited to bias-add, scalar-times-tensor and the explicit
//! batch repeat used for learned tokens; everything else requires equal shapes.

use super::gemm::matmul_into;
use super::{numel, Element, Tensor};
use crate::error::{Error, Result};

fn same_shape<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.ndim() != b.ndim() {
        return Err(Error::dim(op, "rank", a.ndim(), b.ndim()));
    }
    for (axis, (&x, &y)) in a.shape().iter().zip(b.shape()).enumerate() {
        if x != y {
            return Err(Error::dim(op, format!("axis {axis}"), x, y));
        }
    }
    Ok(())
}

fn expect_rank<T: Element>(op: &'static str, t: &Tensor<T>, rank: usize) -> Result<()> {
    if t.ndim() != rank {
        return Err(Error::Rank {
            op,
            expected: rank,
            shape: t.shape().to_vec(),
        });
    }
    Ok(())
}

fn needs<T: Element>(inputs: &[Tensor<T>], i: usize) -> bool {
    inputs[i].requires_grad()
}

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x + y).collect();
    Ok(Tensor::from_op(
        "add",
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|g, inp, _| {
            vec![
                needs(inp, 0).then(|| g.to_vec()),
                needs(inp, 1).then(|| g.to_vec()),
            ]
        }),
    ))
}

pub fn mul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x * y).collect();
    Ok(Tensor::from_op(
        "mul",
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|g, inp, _| {
            let (a, b) = (inp[0].data(), inp[1].data());
            vec![
                needs(inp, 0).then(|| g.iter().zip(b.iter()).map(|(&g, &y)| g * y).collect()),
                needs(inp, 1).then(|| g.iter().zip(a.iter()).map(|(&g, &x)| g * x).collect()),
            ]
        }),
    ))
}

/// `s · x` for a single-element tensor `s`.
pub fn scale<T: Element>(x: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
    if s.numel() != 1 {
        return Err(Error::dim("scale", "scalar numel", 1, s.numel()));
    }
    let sv = s.item();
    let data = x.data().iter().map(|&v| v * sv).collect();
    Ok(Tensor::from_op(
        "scale",
        x.shape().to_vec(),
        data,
        vec![x.clone(), s.clone()],
        Box::new(|g, inp, _| {
            let sv = inp[1].item();
            let gx = needs(inp, 0).then(|| g.iter().map(|&g| g * sv).collect());
            let gs = needs(inp, 1).then(|| {
                let x = inp[0].data();
                vec![g.iter().zip(x.iter()).map(|(&g, &x)| g * x).sum()]
            });
            vec![gx, gs]
        }),
    ))
}

/// Multiplies by a constant that is not part of the graph.
pub fn scale_const<T: Element>(x: &Tensor<T>, c: f64) -> Tensor<T> {
    let c = T::from_f64(c);
    let data = x.data().iter().map(|&v| v * c).collect();
    Tensor::from_op(
        "scale_const",
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |g, _, _| vec![Some(g.iter().map(|&g| g * c).collect())]),
    )
}

fn unary<T: Element>(
    name: &'static str,
    x: &Tensor<T>,
    f: impl Fn(T) -> T,
    df: fn(T, T) -> T,
) -> Tensor<T> {
    let data = x.data().iter().map(|&v| f(v)).collect();
    Tensor::from_op(
        name,
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |g, inp, out| {
            let x = inp[0].data();
            vec![Some(
                g.iter()
                    .zip(x.iter().zip(out))
                    .map(|(&g, (&x, &y))| g * df(x, y))
                    .collect(),
            )]
        }),
    )
}

pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    unary(
        "relu",
        x,
        |v| if v > T::zero() { v } else { T::zero() },
        |x, _| if x > T::zero() { T::one() } else { T::zero() },
    )
}

pub fn sigmoid<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    unary("sigmoid", x, sigmoid_scalar, |_, y| y * (T::one() - y))
}

pub(crate) fn sigmoid_scalar<T: Element>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// GELU, tanh approximation.
pub fn gelu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    unary(
        "gelu",
        x,
        |v| {
            let (c, a, half) = (T::from_f64(GELU_C), T::from_f64(GELU_A), T::from_f64(0.5));
            half * v * (T::one() + (c * (v + a * v * v * v)).tanh())
        },
        |v, _| {
            let (c, a, half) = (T::from_f64(GELU_C), T::from_f64(GELU_A), T::from_f64(0.5));
            let t = (c * (v + a * v * v * v)).tanh();
            let three = T::from_f64(3.0);
            half * (T::one() + t) + half * v * (T::one() - t * t) * c * (T::one() + three * a * v * v)
        },
    )
}

pub fn sum<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let s: T = x.data().iter().copied().sum();
    let n = x.numel();
    Tensor::from_op(
        "sum",
        vec![1],
        vec![s],
        vec![x.clone()],
        Box::new(move |g, _, _| vec![Some(vec![g[0]; n])]),
    )
}

pub fn mean<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let n = x.numel();
    scale_const(&sum(x), 1.0 / n as f64)
}

/// Row-major reinterpretation; element count must match.
pub fn reshape<T: Element>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if numel(shape) != x.numel() {
        return Err(Error::dim("reshape", "numel", x.numel(), numel(shape)));
    }
    Ok(Tensor::from_op(
        "reshape",
        shape.to_vec(),
        x.to_vec(),
        vec![x.clone()],
        Box::new(|g, _, _| vec![Some(g.to_vec())]),
    ))
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gathers `src` (with `src_shape`) into the layout `out[idx] = src[permuted idx]`.
fn permute_data<T: Element>(src: &[T], src_shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<T>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| src_shape[a]).collect();
    let src_strides = strides(src_shape);
    let moved: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    let n = src.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(src[offset]);
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            offset += moved[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= moved[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

pub fn permute<T: Element>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let mut check = axes.to_vec();
    check.sort_unstable();
    if axes.len() != x.ndim() || check.iter().enumerate().any(|(i, &a)| i != a) {
        return Err(Error::invalid(format!(
            "permute: {axes:?} is not a permutation of {} axes",
            x.ndim()
        )));
    }
    let (shape, data) = permute_data(&x.data(), x.shape(), axes);
    let mut inverse = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inverse[a] = i;
    }
    let out_shape = shape.clone();
    Ok(Tensor::from_op(
        "permute",
        shape,
        data,
        vec![x.clone()],
        Box::new(move |g, _, _| vec![Some(permute_data(g, &out_shape, &inverse).1)]),
    ))
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (shape[..axis].iter().product(), shape[axis + 1..].iter().product())
}

/// Slice `[start, start+len)` along `axis`.
pub fn narrow<T: Element>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    if axis >= x.ndim() {
        return Err(Error::invalid(format!("narrow: axis {axis} on rank {}", x.ndim())));
    }
    let extent = x.dim(axis);
    if len == 0 || start + len > extent {
        return Err(Error::dim("narrow", format!("axis {axis}"), extent, start + len));
    }
    let (outer, inner) = outer_inner(x.shape(), axis);
    let src = x.data();
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * extent + start) * inner;
        data.extend_from_slice(&src[base..base + len * inner]);
    }
    drop(src);
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    let total = x.numel();
    Ok(Tensor::from_op(
        "narrow",
        shape,
        data,
        vec![x.clone()],
        Box::new(move |g, _, _| {
            let mut gx = vec![T::zero(); total];
            for o in 0..outer {
                let dst = (o * extent + start) * inner;
                let src = o * len * inner;
                gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            vec![Some(gx)]
        }),
    ))
}

/// Concatenation along `axis`; all other extents must agree.
pub fn concat<T: Element>(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
    if axis >= first.ndim() {
        return Err(Error::invalid(format!("concat: axis {axis} on rank {}", first.ndim())));
    }
    for p in &parts[1..] {
        if p.ndim() != first.ndim() {
            return Err(Error::dim("concat", "rank", first.ndim(), p.ndim()));
        }
        for d in 0..first.ndim() {
            if d != axis && p.dim(d) != first.dim(d) {
                return Err(Error::dim("concat", format!("axis {d}"), first.dim(d), p.dim(d)));
            }
        }
    }
    let (outer, inner) = outer_inner(first.shape(), axis);
    let extents: Vec<usize> = parts.iter().map(|p| p.dim(axis)).collect();
    let total: usize = extents.iter().sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (p, &e) in parts.iter().zip(&extents) {
            let src = p.data();
            data.extend_from_slice(&src[o * e * inner..(o + 1) * e * inner]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(Tensor::from_op(
        "concat",
        shape,
        data,
        parts.to_vec(),
        Box::new(move |g, inp, _| {
            let mut out: Vec<Option<Vec<T>>> = Vec::with_capacity(inp.len());
            let mut offset = 0;
            for (i, &e) in extents.iter().enumerate() {
                if inp[i].requires_grad() {
                    let mut gi = Vec::with_capacity(outer * e * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gi.extend_from_slice(&g[base..base + e * inner]);
                    }
                    out.push(Some(gi));
                } else {
                    out.push(None);
                }
                offset += e;
            }
            out
        }),
    ))
}

/// Repeats a `[1, ...]` tensor `n` times along the leading axis.
pub fn repeat_batch<T: Element>(x: &Tensor<T>, n: usize) -> Result<Tensor<T>> {
    if x.ndim() == 0 || x.dim(0) != 1 {
        return Err(Error::dim("repeat_batch", "axis 0", 1, x.shape().first().copied().unwrap_or(0)));
    }
    let block = x.numel();
    let src = x.data();
    let mut data = Vec::with_capacity(block * n);
    for _ in 0..n {
        data.extend_from_slice(&src);
    }
    drop(src);
    let mut shape = x.shape().to_vec();
    shape[0] = n;
    Ok(Tensor::from_op(
        "repeat_batch",
        shape,
        data,
        vec![x.clone()],
        Box::new(move |g, _, _| {
            let mut gx = vec![T::zero(); block];
            for chunk in g.chunks(block) {
                gx.iter_mut().zip(chunk).for_each(|(a, &b)| *a = *a + b);
            }
            vec![Some(gx)]
        }),
    ))
}

/// Adds `bias[1, ...]` to every leading-axis slice of `x`.
pub fn add_batch_bias<T: Element>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    if bias.ndim() != x.ndim() || bias.dim(0) != 1 || bias.shape()[1..] != x.shape()[1..] {
        return Err(Error::invalid(format!(
            "add_batch_bias: bias {:?} does not match {:?}",
            bias.shape(),
            x.shape()
        )));
    }
    let block = bias.numel();
    let b = bias.data();
    let data = x
        .data()
        .chunks(block)
        .flat_map(|c| c.iter().zip(b.iter()).map(|(&v, &w)| v + w).collect::<Vec<_>>())
        .collect();
    drop(b);
    Ok(Tensor::from_op(
        "add_batch_bias",
        x.shape().to_vec(),
        data,
        vec![x.clone(), bias.clone()],
        Box::new(move |g, inp, _| {
            let gb = needs(inp, 1).then(|| {
                let mut gb = vec![T::zero(); block];
                for chunk in g.chunks(block) {
                    gb.iter_mut().zip(chunk).for_each(|(a, &v)| *a = *a + v);
                }
                gb
            });
            vec![needs(inp, 0).then(|| g.to_vec()), gb]
        }),
    ))
}

/// `x·Wᵀ + b` for `x[N,D_in]`, `W[D_out,D_in]`, `b[D_out]`.
pub fn linear<T: Element>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    expect_rank("linear", x, 2)?;
    expect_rank("linear", w, 2)?;
    let (n, din) = (x.dim(0), x.dim(1));
    let dout = w.dim(0);
    if w.dim(1) != din {
        return Err(Error::dim("linear", "input features (axis 1)", w.dim(1), din));
    }
    if let Some(b) = b {
        if b.shape() != [dout] {
            return Err(Error::dim("linear", "bias length", dout, b.numel()));
        }
    }
    let mut out = vec![T::zero(); n * dout];
    matmul_into(n, din, dout, &x.data(), false, &w.data(), true, &mut out, false);
    if let Some(b) = b {
        let b = b.data();
        for row in out.chunks_mut(dout) {
            row.iter_mut().zip(b.iter()).for_each(|(o, &v)| *o = *o + v);
        }
    }
    let mut inputs = vec![x.clone(), w.clone()];
    inputs.extend(b.cloned());
    Ok(Tensor::from_op(
        "linear",
        vec![n, dout],
        out,
        inputs,
        Box::new(move |g, inp, _| {
            let gx = needs(inp, 0).then(|| {
                let mut gx = vec![T::zero(); n * din];
                matmul_into(n, dout, din, g, false, &inp[1].data(), false, &mut gx, false);
                gx
            });
            let gw = needs(inp, 1).then(|| {
                let mut gw = vec![T::zero(); dout * din];
                matmul_into(dout, n, din, g, true, &inp[0].data(), false, &mut gw, false);
                gw
            });
            let mut grads = vec![gx, gw];
            if inp.len() == 3 {
                grads.push(needs(inp, 2).then(|| {
                    let mut gb = vec![T::zero(); dout];
                    for row in g.chunks(dout) {
                        gb.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
                    }
                    gb
                }));
            }
            grads
        }),
    ))
}

/// Batched product `[B,M,K]·[B,K,N]`.
pub fn bmm<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("bmm", a, 3)?;
    expect_rank("bmm", b, 3)?;
    let (bs, m, k) = (a.dim(0), a.dim(1), a.dim(2));
    if b.dim(0) != bs {
        return Err(Error::dim("bmm", "batch (axis 0)", bs, b.dim(0)));
    }
    if b.dim(1) != k {
        return Err(Error::dim("bmm", "inner (axis 1 of rhs)", k, b.dim(1)));
    }
    let n = b.dim(2);
    let mut out = vec![T::zero(); bs * m * n];
    {
        let (ad, bd) = (a.data(), b.data());
        for i in 0..bs {
            matmul_into(
                m,
                k,
                n,
                &ad[i * m * k..(i + 1) * m * k],
                false,
                &bd[i * k * n..(i + 1) * k * n],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
    }
    Ok(Tensor::from_op(
        "bmm",
        vec![bs, m, n],
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g, inp, _| {
            let (ad, bd) = (inp[0].data(), inp[1].data());
            let ga = needs(inp, 0).then(|| {
                let mut ga = vec![T::zero(); bs * m * k];
                for i in 0..bs {
                    matmul_into(
                        m,
                        n,
                        k,
                        &g[i * m * n..(i + 1) * m * n],
                        false,
                        &bd[i * k * n..(i + 1) * k * n],
                        true,
                        &mut ga[i * m * k..(i + 1) * m * k],
                        false,
                    );
                }
                ga
            });
            let gb = needs(inp, 1).then(|| {
                let mut gb = vec![T::zero(); bs * k * n];
                for i in 0..bs {
                    matmul_into(
                        k,
                        m,
                        n,
                        &ad[i * m * k..(i + 1) * m * k],
                        true,
                        &g[i * m * n..(i + 1) * m * n],
                        false,
                        &mut gb[i * k * n..(i + 1) * k * n],
                        false,
                    );
                }
                gb
            });
            vec![ga, gb]
        }),
    ))
}

/// Softmax over the last axis.
pub fn softmax<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let d = *x.shape().last().expect("softmax on rank-0 tensor");
    let mut out = x.to_vec();
    for row in out.chunks_mut(d) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z = z + *v;
        }
        row.iter_mut().for_each(|v| *v = *v / z);
    }
    Tensor::from_op(
        "softmax",
        x.shape().to_vec(),
        out,
        vec![x.clone()],
        Box::new(move |g, _, y| {
            let mut gx = vec![T::zero(); g.len()];
            for ((gr, yr), out) in g.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)) {
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for ((o, &gi), &yi) in out.iter_mut().zip(gr).zip(yr) {
                    *o = yi * (gi - dot);
                }
            }
            vec![Some(gx)]
        }),
    )
}

/// Layer normalization over the last axis with affine `gamma`, `beta` of that width.
pub fn layer_norm<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let d = *x.shape().last().ok_or_else(|| Error::invalid("layer_norm on rank-0"))?;
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::dim("layer_norm", "affine width", d, gamma.numel()));
    }
    let eps = T::from_f64(eps);
    let rows = x.numel() / d;
    let dt = T::from_f64(d as f64);
    let mut xhat = vec![T::zero(); x.numel()];
    let mut inv_std = vec![T::zero(); rows];
    let mut out = vec![T::zero(); x.numel()];
    {
        let (xd, gd, bd) = (x.data(), gamma.data(), beta.data());
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mu = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / dt;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mu) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gd[j] + bd[j];
            }
        }
    }
    Ok(Tensor::from_op(
        "layer_norm",
        x.shape().to_vec(),
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g, inp, _| {
            let gd = inp[1].data();
            let gx = needs(inp, 0).then(|| {
                let mut gx = vec![T::zero(); g.len()];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let dh: Vec<T> = gr.iter().zip(gd.iter()).map(|(&a, &b)| a * b).collect();
                    let m1 = dh.iter().copied().sum::<T>() / dt;
                    let m2 = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() / dt;
                    for j in 0..d {
                        gx[r * d + j] = inv_std[r] * (dh[j] - m1 - hr[j] * m2);
                    }
                }
                gx
            });
            let gg = needs(inp, 1).then(|| {
                let mut gg = vec![T::zero(); d];
                for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        gg[j] = gg[j] + gr[j] * hr[j];
                    }
                }
                gg
            });
            let gb = needs(inp, 2).then(|| {
                let mut gb = vec![T::zero(); d];
                for gr in g.chunks(d) {
                    gb.iter_mut().zip(gr).for_each(|(a, &v)| *a = *a + v);
                }
                gb
            });
            vec![gx, gg, gb]
        }),
    ))
}

fn nchw<T: Element>(op: &'static str, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    expect_rank(op, x, 4)?;
    Ok((x.dim(0), x.dim(1), x.dim(2) * x.dim(3)))
}

/// Per-channel statistics over (N,H,W): returns (mean, biased variance).
pub fn channel_stats<T: Element>(x: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
    let (n, c, hw) = nchw("channel_stats", x)?;
    let xd = x.data();
    let m = T::from_f64((n * hw) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            s = s + xd[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().copied().sum::<T>();
        }
        let mu = s / m;
        let mut v = T::zero();
        for b in 0..n {
            v = v + xd[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                .iter()
                .map(|&x| (x - mu) * (x - mu))
                .sum::<T>();
        }
        mean[ch] = mu;
        var[ch] = v / m;
    }
    Ok((mean, var))
}

/// Batch normalization with the given per-channel `mean`/`var` treated as
/// constants: `y = (x - mean)/sqrt(var + eps)·gamma + beta`.
pub fn batch_norm_frozen<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &[T],
    var: &[T],
    eps: f64,
) -> Result<Tensor<T>> {
    let (n, c, hw) = nchw("batch_norm", x)?;
    if gamma.numel() != c || beta.numel() != c || mean.len() != c || var.len() != c {
        return Err(Error::dim("batch_norm", "channels (axis 1)", gamma.numel(), c));
    }
    let eps = T::from_f64(eps);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mean = mean.to_vec();
    let mut out = vec![T::zero(); x.numel()];
    {
        let (xd, gd, bd) = (x.data(), gamma.data(), beta.data());
        for b in 0..n {
            for ch in 0..c {
                let (s, t) = (gd[ch] * inv_std[ch], bd[ch] - mean[ch] * gd[ch] * inv_std[ch]);
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    out[i] = xd[i] * s + t;
                }
            }
        }
    }
    Ok(Tensor::from_op(
        "batch_norm_frozen",
        x.shape().to_vec(),
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g, inp, _| {
            let gd = inp[1].data();
            let gx = needs(inp, 0).then(|| {
                let mut gx = vec![T::zero(); g.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let s = gd[ch] * inv_std[ch];
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            gx[i] = g[i] * s;
                        }
                    }
                }
                gx
            });
            let (gg, gb) = if needs(inp, 1) || needs(inp, 2) {
                let xd = inp[0].data();
                let mut gg = vec![T::zero(); c];
                let mut gb = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            gg[ch] = gg[ch] + g[i] * (xd[i] - mean[ch]) * inv_std[ch];
                            gb[ch] = gb[ch] + g[i];
                        }
                    }
                }
                (needs(inp, 1).then_some(gg), needs(inp, 2).then_some(gb))
            } else {
                (None, None)
            };
            vec![gx, gg, gb]
        }),
    ))
}

/// Batch normalization using the statistics of `x` itself (training mode).
/// Returns the output and the (mean, biased variance) used.
pub fn batch_norm_train<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let (n, c, hw) = nchw("batch_norm", x)?;
    if gamma.numel() != c || beta.numel() != c {
        return Err(Error::dim("batch_norm", "channels (axis 1)", gamma.numel(), c));
    }
    let (mean, var) = channel_stats(x)?;
    let epsv = T::from_f64(eps);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + epsv).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.numel()];
    let mut out = vec![T::zero(); x.numel()];
    {
        let (xd, gd, bd) = (x.data(), gamma.data(), beta.data());
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    let h = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = h * gd[ch] + bd[ch];
                }
            }
        }
    }
    let m = T::from_f64((n * hw) as f64);
    let y = Tensor::from_op(
        "batch_norm_train",
        x.shape().to_vec(),
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g, inp, _| {
            let gd = inp[1].data();
            let mut sum_g = vec![T::zero(); c];
            let mut sum_gh = vec![T::zero(); c];
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * hw;
                    for i in base..base + hw {
                        sum_g[ch] = sum_g[ch] + g[i];
                        sum_gh[ch] = sum_gh[ch] + g[i] * xhat[i];
                    }
                }
            }
            let gx = needs(inp, 0).then(|| {
                let mut gx = vec![T::zero(); g.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let k = gd[ch] * inv_std[ch];
                        let (m1, m2) = (sum_g[ch] / m, sum_gh[ch] / m);
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            gx[i] = k * (g[i] - m1 - xhat[i] * m2);
                        }
                    }
                }
                gx
            });
            vec![gx, needs(inp, 1).then(|| sum_gh.clone()), needs(inp, 2).then(|| sum_g.clone())]
        }),
    );
    Ok((y, mean, var))
}

/// Global average pool `[N,C,H,W] → [N,C]`.
pub fn global_avg_pool<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, hw) = nchw("global_avg_pool", x)?;
    let inv = T::from_f64(1.0 / hw as f64);
    let data = x.data().chunks(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
    Ok(Tensor::from_op(
        "global_avg_pool",
        vec![n, c],
        data,
        vec![x.clone()],
        Box::new(move |g, _, _| {
            vec![Some(g.iter().flat_map(|&v| std::iter::repeat_n(v * inv, hw)).collect())]
        }),
    ))
}

/// `y[n,c,:,:] = s[n,c] · x[n,c,:,:]`.
pub fn channel_scale<T: Element>(x: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, hw) = nchw("channel_scale", x)?;
    if s.shape() != [n, c] {
        return Err(Error::dim("channel_scale", "scale shape [N,C]", n * c, s.numel()));
    }
    let data = {
        let sd = s.data();
        x.data()
            .chunks(hw)
            .zip(sd.iter())
            .flat_map(|(p, &k)| p.iter().map(move |&v| v * k))
            .collect()
    };
    Ok(Tensor::from_op(
        "channel_scale",
        x.shape().to_vec(),
        data,
        vec![x.clone(), s.clone()],
        Box::new(move |g, inp, _| {
            let gx = needs(inp, 0).then(|| {
                let sd = inp[1].data();
                g.chunks(hw)
                    .zip(sd.iter())
                    .flat_map(|(p, &k)| p.iter().map(move |&v| v * k))
                    .collect()
            });
            let gs = needs(inp, 1).then(|| {
                let xd = inp[0].data();
                g.chunks(hw)
                    .zip(xd.chunks(hw))
                    .map(|(gp, xp)| gp.iter().zip(xp).map(|(&a, &b)| a * b).sum())
                    .collect()
            });
            vec![gx, gs]
        }),
    ))
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn softmax_cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    expect_rank("softmax_cross_entropy", logits, 2)?;
    let (n, k) = (logits.dim(0), logits.dim(1));
    if labels.len() != n {
        return Err(Error::dim("softmax_cross_entropy", "batch (labels)", n, labels.len()));
    }
    if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
        return Err(Error::LabelOutOfRange { row, label, classes: k });
    }
    let mut probs = logits.to_vec();
    let mut loss = T::zero();
    for (row, &y) in probs.chunks_mut(k).zip(labels) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let z: T = row.iter().map(|&v| (v - m).exp()).sum();
        let lse = m + z.ln();
        loss = loss + (lse - row[y]);
        row.iter_mut().for_each(|v| *v = (*v - lse).exp());
    }
    let inv_n = T::from_f64(1.0 / n as f64);
    let labels = labels.to_vec();
    Ok(Tensor::from_op(
        "softmax_cross_entropy",
        vec![1],
        vec![loss * inv_n],
        vec![logits.clone()],
        Box::new(move |g, _, _| {
            let scale = g[0] * inv_n;
            let mut gx = probs.clone();
            for (row, &y) in gx.chunks_mut(k).zip(&labels) {
                row[y] = row[y] - T::one();
                row.iter_mut().for_each(|v| *v = *v * scale);
            }
            vec![Some(gx)]
        }),
    ))
}

/// Index of the largest logit in each row.
pub fn argmax_rows<T: Element>(logits: &Tensor<T>) -> Vec<usize> {
    let k = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
