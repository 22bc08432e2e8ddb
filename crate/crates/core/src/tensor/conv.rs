//! Standard and depthwise 2-D convolutions (cross-correlation, NCHW).

use super::gemm::matmul_into;
use super::{Element, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn hw_out(&self) -> usize {
        self.ho * self.wo
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

pub fn output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

fn im2col<T: Element>(x: &[T], g: &Geometry, col: &mut [T]) {
    let hw = g.hw_out();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for p in 0..g.kh {
            for q in 0..g.kw {
                let row = &mut col[((ci * g.kh + p) * g.kw + q) * hw..][..hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + p) as isize - g.pad as isize;
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + q) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Element>(col: &[T], g: &Geometry, dx: &mut [T]) {
    let hw = g.hw_out();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for p in 0..g.kh {
            for q in 0..g.kw {
                let row = &col[((ci * g.kh + p) * g.kw + q) * hw..][..hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + p) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + q) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + row[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x[N,C_in,H,W]` with `weight[C_out,C_in,kh,kw]`.
pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    if x.ndim() != 4 {
        return Err(Error::Rank { op: "conv2d", expected: 4, shape: x.shape().to_vec() });
    }
    if weight.ndim() != 4 {
        return Err(Error::Rank { op: "conv2d", expected: 4, shape: weight.shape().to_vec() });
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d: stride must be positive"));
    }
    let (n, cin, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (cout, kh, kw) = (weight.dim(0), weight.dim(2), weight.dim(3));
    if weight.dim(1) != cin {
        return Err(Error::dim("conv2d", "input channels (axis 1)", weight.dim(1), cin));
    }
    if kh > h + 2 * padding {
        return Err(Error::dim("conv2d", "height (axis 2) incl. padding", kh, h + 2 * padding));
    }
    if kw > w + 2 * padding {
        return Err(Error::dim("conv2d", "width (axis 3) incl. padding", kw, w + 2 * padding));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::dim("conv2d", "bias length", cout, b.numel()));
        }
    }
    let g = Geometry {
        n,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        stride,
        pad: padding,
        ho: output_extent(h, kh, stride, padding),
        wo: output_extent(w, kw, stride, padding),
    };
    let (k, hw) = (g.k(), g.hw_out());
    let mut out = vec![T::zero(); n * cout * hw];
    {
        let xd = x.data();
        let wd = weight.data();
        let mut col = if g.pointwise() { Vec::new() } else { vec![T::zero(); k * hw] };
        for b in 0..n {
            let xs = &xd[b * cin * h * w..(b + 1) * cin * h * w];
            let src: &[T] = if g.pointwise() {
                xs
            } else {
                im2col(xs, &g, &mut col);
                &col
            };
            matmul_into(cout, k, hw, &wd, false, src, false, &mut out[b * cout * hw..(b + 1) * cout * hw], false);
        }
        if let Some(bias) = bias {
            let bd = bias.data();
            for (i, plane) in out.chunks_mut(hw).enumerate() {
                let v = bd[i % cout];
                plane.iter_mut().for_each(|o| *o = *o + v);
            }
        }
    }
    let mut inputs = vec![x.clone(), weight.clone()];
    inputs.extend(bias.cloned());
    Ok(Tensor::from_op(
        "conv2d",
        vec![n, cout, g.ho, g.wo],
        out,
        inputs,
        Box::new(move |grad, inp, _| conv2d_backward(grad, inp, &g)),
    ))
}

fn conv2d_backward<T: Element>(grad: &[T], inp: &[Tensor<T>], g: &Geometry) -> Vec<Option<Vec<T>>> {
    let (k, hw) = (g.k(), g.hw_out());
    let in_size = g.cin * g.h * g.w;
    let need_x = inp[0].requires_grad();
    let need_w = inp[1].requires_grad();
    let xd = inp[0].data();
    let wd = inp[1].data();

    let mut gx = need_x.then(|| vec![T::zero(); g.n * in_size]);
    let mut gw = need_w.then(|| vec![T::zero(); g.cout * k]);
    let mut col = vec![T::zero(); if g.pointwise() { 0 } else { k * hw }];
    let mut dcol = vec![T::zero(); if need_x && !g.pointwise() { k * hw } else { 0 }];
    for b in 0..g.n {
        let gout = &grad[b * g.cout * hw..(b + 1) * g.cout * hw];
        if let Some(gw) = gw.as_mut() {
            let xs = &xd[b * in_size..(b + 1) * in_size];
            let src: &[T] = if g.pointwise() {
                xs
            } else {
                im2col(xs, g, &mut col);
                &col
            };
            matmul_into(g.cout, hw, k, gout, false, src, true, gw, b > 0);
        }
        if let Some(gx) = gx.as_mut() {
            let dst = &mut gx[b * in_size..(b + 1) * in_size];
            if g.pointwise() {
                matmul_into(k, g.cout, hw, &wd, true, gout, false, dst, false);
            } else {
                matmul_into(k, g.cout, hw, &wd, true, gout, false, &mut dcol, false);
                col2im_add(&dcol, g, dst);
            }
        }
    }
    let mut out = vec![gx, gw];
    if inp.len() == 3 {
        out.push(inp[2].requires_grad().then(|| {
            let mut gb = vec![T::zero(); g.cout];
            for (i, plane) in grad.chunks(hw).enumerate() {
                gb[i % g.cout] = gb[i % g.cout] + plane.iter().copied().sum::<T>();
            }
            gb
        }));
    }
    out
}

/// Per-channel `k×k` convolution with same padding: `weight[C,1,k,k]`, odd `k`,
/// `padding = (k-1)/2`. Channel `c` of the output depends only on channel `c`
/// of the input.
pub fn depthwise_conv2d<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    padding: usize,
) -> Result<Tensor<T>> {
    if x.ndim() != 4 {
        return Err(Error::Rank { op: "depthwise_conv2d", expected: 4, shape: x.shape().to_vec() });
    }
    if weight.ndim() != 4 {
        return Err(Error::Rank { op: "depthwise_conv2d", expected: 4, shape: weight.shape().to_vec() });
    }
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let k = weight.dim(2);
    if weight.dim(0) != c {
        return Err(Error::dim("depthwise_conv2d", "channels (axis 0 of weight)", weight.dim(0), c));
    }
    if weight.dim(1) != 1 {
        return Err(Error::dim("depthwise_conv2d", "axis 1 of weight", 1, weight.dim(1)));
    }
    if weight.dim(3) != k {
        return Err(Error::dim("depthwise_conv2d", "kernel width (axis 3)", k, weight.dim(3)));
    }
    if k % 2 == 0 {
        return Err(Error::invalid(format!(
            "depthwise_conv2d: kernel size {k} is even; same padding is undefined"
        )));
    }
    if padding != (k - 1) / 2 {
        return Err(Error::dim("depthwise_conv2d", "padding", (k - 1) / 2, padding));
    }
    if let Some(b) = bias {
        if b.shape() != [c] {
            return Err(Error::dim("depthwise_conv2d", "bias length", c, b.numel()));
        }
    }
    let hw = h * w;
    let mut out = vec![T::zero(); n * c * hw];
    {
        let (xd, wd) = (x.data(), weight.data());
        let bd = bias.map(|b| b.data().clone());
        for b in 0..n {
            for ch in 0..c {
                let plane = (b * c + ch) * hw;
                let kern = &wd[ch * k * k..(ch + 1) * k * k];
                let dst = &mut out[plane..plane + hw];
                if let Some(bd) = &bd {
                    dst.fill(bd[ch]);
                }
                depthwise_plane(&xd[plane..plane + hw], kern, h, w, k, padding, |oi, ii, wv, src| {
                    dst[oi] = dst[oi] + wv * src[ii];
                });
            }
        }
    }
    let mut inputs = vec![x.clone(), weight.clone()];
    inputs.extend(bias.cloned());
    Ok(Tensor::from_op(
        "depthwise_conv2d",
        vec![n, c, h, w],
        out,
        inputs,
        Box::new(move |grad, inp, _| {
            let (xd, wd) = (inp[0].data(), inp[1].data());
            let mut gx = inp[0].requires_grad().then(|| vec![T::zero(); n * c * hw]);
            let mut gw = inp[1].requires_grad().then(|| vec![T::zero(); c * k * k]);
            for b in 0..n {
                for ch in 0..c {
                    let plane = (b * c + ch) * hw;
                    let gout = &grad[plane..plane + hw];
                    if let Some(gx) = gx.as_mut() {
                        let kern = &wd[ch * k * k..(ch + 1) * k * k];
                        let dst = &mut gx[plane..plane + hw];
                        // dx[ii] += w · g[oi]; reuse the forward index walk with roles swapped.
                        depthwise_plane(gout, kern, h, w, k, padding, |oi, ii, wv, g| {
                            dst[ii] = dst[ii] + wv * g[oi];
                        });
                    }
                    if let Some(gw) = gw.as_mut() {
                        let src = &xd[plane..plane + hw];
                        for p in 0..k {
                            for q in 0..k {
                                let mut acc = T::zero();
                                for_each_tap(h, w, p, q, padding, |oi, ii| acc = acc + gout[oi] * src[ii]);
                                gw[ch * k * k + p * k + q] = gw[ch * k * k + p * k + q] + acc;
                            }
                        }
                    }
                }
            }
            let mut grads = vec![gx, gw];
            if inp.len() == 3 {
                grads.push(inp[2].requires_grad().then(|| {
                    let mut gb = vec![T::zero(); c];
                    for (i, plane) in grad.chunks(hw).enumerate() {
                        gb[i % c] = gb[i % c] + plane.iter().copied().sum::<T>();
                    }
                    gb
                }));
            }
            grads
        }),
    ))
}

/// Calls `f(out_index, in_index)` for every valid output/input pair of tap (p, q).
fn for_each_tap(h: usize, w: usize, p: usize, q: usize, pad: usize, mut f: impl FnMut(usize, usize)) {
    let dy = p as isize - pad as isize;
    let dx = q as isize - pad as isize;
    let oy0 = (-dy).max(0) as usize;
    let oy1 = ((h as isize - dy).min(h as isize)).max(0) as usize;
    let ox0 = (-dx).max(0) as usize;
    let ox1 = ((w as isize - dx).min(w as isize)).max(0) as usize;
    for oy in oy0..oy1 {
        let iy = (oy as isize + dy) as usize;
        for ox in ox0..ox1 {
            let ix = (ox as isize + dx) as usize;
            f(oy * w + ox, iy * w + ix);
        }
    }
}

fn depthwise_plane<T: Element>(
    src: &[T],
    kern: &[T],
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    mut f: impl FnMut(usize, usize, T, &[T]),
) {
    for p in 0..k {
        for q in 0..k {
            let wv = kern[p * k + q];
            for_each_tap(h, w, p, q, pad, |oi, ii| f(oi, ii, wv, src));
        }
    }
}
