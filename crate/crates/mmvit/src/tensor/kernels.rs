//! Raw numeric kernels over row-major slices.
//!
//! These are the single source of truth for forward math; the tape records
//! which kernel produced a node and replays the matching backward kernel.
//! Everything is plain loops written so the inner dimension is contiguous.

use crate::scalar::Scalar;

use super::{Result, TensorError};

// ── broadcasting ─────────────────────────────────────────────────────

/// NumPy-style broadcast of two shapes (right-aligned).
pub fn broadcast_shapes(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![1usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

/// Row-major strides, with stride 0 on broadcast (extent-1) axes once the
/// shape is right-aligned against `out_rank`.
fn broadcast_strides(shape: &[usize], out_rank: usize) -> Vec<usize> {
    let mut strides = vec![0usize; out_rank];
    let mut acc = 1usize;
    for (i, &d) in shape.iter().enumerate().rev() {
        let o = out_rank - shape.len() + i;
        strides[o] = if d == 1 { 0 } else { acc };
        acc *= d;
    }
    strides
}

fn for_each_index(shape: &[usize], mut f: impl FnMut(&[usize])) {
    let rank = shape.len();
    if shape.iter().any(|&d| d == 0) {
        return;
    }
    let mut idx = vec![0usize; rank];
    loop {
        f(&idx);
        let mut d = rank;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// Elementwise binary op with broadcasting. Returns (data, out_shape).
pub fn broadcast_binop<F: Scalar>(
    op: &'static str,
    a: &[F],
    a_shape: &[usize],
    b: &[F],
    b_shape: &[usize],
    f: impl Fn(F, F) -> F,
) -> Result<(Vec<F>, Vec<usize>)> {
    // Fast path: identical shapes.
    if a_shape == b_shape {
        let out = a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
        return Ok((out, a_shape.to_vec()));
    }
    let out_shape = broadcast_shapes(op, a_shape, b_shape)?;
    let rank = out_shape.len();
    let sa = broadcast_strides(a_shape, rank);
    let sb = broadcast_strides(b_shape, rank);
    let numel: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(numel);
    for_each_index(&out_shape, |idx| {
        let oa: usize = idx.iter().zip(&sa).map(|(&i, &s)| i * s).sum();
        let ob: usize = idx.iter().zip(&sb).map(|(&i, &s)| i * s).sum();
        out.push(f(a[oa], b[ob]));
    });
    Ok((out, out_shape))
}

/// Sum-reduce `grad` (of shape `from`) down to `to` by collapsing the axes
/// that were broadcast. Inverse of broadcasting for gradients.
pub fn reduce_to_shape<F: Scalar>(grad: &[F], from: &[usize], to: &[usize]) -> Vec<F> {
    if from == to {
        return grad.to_vec();
    }
    let rank = from.len();
    let strides_to = broadcast_strides(to, rank);
    let numel_to: usize = to.iter().product::<usize>().max(1);
    let mut out = vec![F::zero(); numel_to];
    let mut pos = 0usize;
    for_each_index(from, |idx| {
        let ot: usize = idx.iter().zip(&strides_to).map(|(&i, &s)| i * s).sum();
        out[ot] = out[ot] + grad[pos];
        pos += 1;
    });
    out
}

// ── matmul ───────────────────────────────────────────────────────────

/// C += A(m,k) · B(k,n). ikj order so the inner loop runs over contiguous
/// rows of B and C.
pub fn mm_nn<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + aip * bv;
            }
        }
    }
}

/// C += A(m,k) · B(n,k)ᵀ, i.e. C[i,j] = dot of rows.
pub fn mm_nt<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = F::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc = acc + x * y;
            }
            out[i * n + j] = out[i * n + j] + acc;
        }
    }
}

/// C += A(k,m)ᵀ · B(k,n).
pub fn mm_tn<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let aip = a[p * m + i];
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + aip * bv;
            }
        }
    }
}

pub struct MatmulDims {
    pub batch: Vec<usize>,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub a_batch: Vec<usize>,
    pub b_batch: Vec<usize>,
}

pub fn matmul_dims(a_shape: &[usize], b_shape: &[usize]) -> Result<MatmulDims> {
    if a_shape.len() < 2 || b_shape.len() < 2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a_shape.to_vec(),
            rhs: b_shape.to_vec(),
        });
    }
    let (m, ka) = (a_shape[a_shape.len() - 2], a_shape[a_shape.len() - 1]);
    let (kb, n) = (b_shape[b_shape.len() - 2], b_shape[b_shape.len() - 1]);
    if ka != kb {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a_shape.to_vec(),
            rhs: b_shape.to_vec(),
        });
    }
    let a_batch = a_shape[..a_shape.len() - 2].to_vec();
    let b_batch = b_shape[..b_shape.len() - 2].to_vec();
    let batch = broadcast_shapes("matmul", &a_batch, &b_batch)?;
    Ok(MatmulDims { batch, m, k: ka, n, a_batch, b_batch })
}

/// Offsets of each batch element of an operand inside a broadcasted batch.
fn batch_offsets(batch: &[usize], op_batch: &[usize], mat_elems: usize) -> Vec<usize> {
    let rank = batch.len();
    let strides = broadcast_strides(op_batch, rank);
    let total: usize = batch.iter().product::<usize>().max(1);
    let mut offs = Vec::with_capacity(total);
    if rank == 0 {
        offs.push(0);
        return offs;
    }
    for_each_index(batch, |idx| {
        let o: usize = idx.iter().zip(&strides).map(|(&i, &s)| i * s).sum();
        offs.push(o * mat_elems);
    });
    offs
}

pub fn matmul<F: Scalar>(
    a: &[F],
    a_shape: &[usize],
    b: &[F],
    b_shape: &[usize],
) -> Result<(Vec<F>, Vec<usize>)> {
    let d = matmul_dims(a_shape, b_shape)?;
    let batch_total: usize = d.batch.iter().product::<usize>().max(1);
    let mut out = vec![F::zero(); batch_total * d.m * d.n];
    let a_offs = batch_offsets(&d.batch, &d.a_batch, d.m * d.k);
    let b_offs = batch_offsets(&d.batch, &d.b_batch, d.k * d.n);
    for bi in 0..batch_total {
        mm_nn(
            &a[a_offs[bi]..a_offs[bi] + d.m * d.k],
            &b[b_offs[bi]..b_offs[bi] + d.k * d.n],
            &mut out[bi * d.m * d.n..(bi + 1) * d.m * d.n],
            d.m,
            d.k,
            d.n,
        );
    }
    let mut shape = d.batch.clone();
    shape.push(d.m);
    shape.push(d.n);
    Ok((out, shape))
}

/// Gradients of matmul: dA = dC·Bᵀ and dB = Aᵀ·dC, reduced over any
/// broadcast batch axes.
pub fn matmul_backward<F: Scalar>(
    grad: &[F],
    a: &[F],
    a_shape: &[usize],
    b: &[F],
    b_shape: &[usize],
) -> (Vec<F>, Vec<F>) {
    let d = matmul_dims(a_shape, b_shape).expect("checked in forward");
    let batch_total: usize = d.batch.iter().product::<usize>().max(1);
    let a_offs = batch_offsets(&d.batch, &d.a_batch, d.m * d.k);
    let b_offs = batch_offsets(&d.batch, &d.b_batch, d.k * d.n);
    let mut da = vec![F::zero(); a_shape.iter().product()];
    let mut db = vec![F::zero(); b_shape.iter().product()];
    for bi in 0..batch_total {
        let g = &grad[bi * d.m * d.n..(bi + 1) * d.m * d.n];
        // Accumulation lands at the operand's own batch offset, which
        // collapses broadcast axes for free.
        mm_nt(
            g,
            &b[b_offs[bi]..b_offs[bi] + d.k * d.n],
            &mut da[a_offs[bi]..a_offs[bi] + d.m * d.k],
            d.m,
            d.n,
            d.k,
        );
        mm_tn(
            &a[a_offs[bi]..a_offs[bi] + d.m * d.k],
            g,
            &mut db[b_offs[bi]..b_offs[bi] + d.k * d.n],
            d.k,
            d.m,
            d.n,
        );
    }
    (da, db)
}

// ── convolution ──────────────────────────────────────────────────────

pub fn conv_out_extent(
    op: &'static str,
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<usize> {
    let padded = input + 2 * pad;
    if kernel == 0 || stride == 0 {
        return Err(TensorError::Invalid {
            op,
            msg: "kernel and stride must be positive".into(),
        });
    }
    if kernel > padded {
        return Err(TensorError::KernelTooLarge {
            op,
            kernel: (kernel, kernel),
            padded: (padded, padded),
        });
    }
    Ok((padded - kernel) / stride + 1)
}

/// conv2d forward: x(Cin,H,W) * w(Cout,Cin,kh,kw) + b(Cout) → (Cout,H',W'),
/// zero padding.
#[allow(clippy::too_many_arguments)]
pub fn conv2d<F: Scalar>(
    x: &[F],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[F],
    cout: usize,
    kh: usize,
    kw: usize,
    bias: &[F],
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<(Vec<F>, usize, usize)> {
    let oh = conv_out_extent("conv2d", h, kh, stride.0, pad.0)?;
    let ow = conv_out_extent("conv2d", w, kw, stride.1, pad.1)?;
    let mut out = vec![F::zero(); cout * oh * ow];
    for co in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[co];
                let iy0 = (oy * stride.0) as isize - pad.0 as isize;
                let ix0 = (ox * stride.1) as isize - pad.1 as isize;
                for ci in 0..cin {
                    for ky in 0..kh {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = (ci * h + iy as usize) * w;
                        let wrow = ((co * cin + ci) * kh + ky) * kw;
                        for kx in 0..kw {
                            let ix = ix0 + kx as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc = acc + x[xrow + ix as usize] * weight[wrow + kx];
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Ok((out, oh, ow))
}

/// conv2d backward for input, weight, and bias.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<F: Scalar>(
    grad: &[F],
    x: &[F],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[F],
    cout: usize,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
    pad: (usize, usize),
    oh: usize,
    ow: usize,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let mut dx = vec![F::zero(); cin * h * w];
    let mut dw = vec![F::zero(); cout * cin * kh * kw];
    let mut db = vec![F::zero(); cout];
    for co in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = grad[(co * oh + oy) * ow + ox];
                db[co] = db[co] + g;
                let iy0 = (oy * stride.0) as isize - pad.0 as isize;
                let ix0 = (ox * stride.1) as isize - pad.1 as isize;
                for ci in 0..cin {
                    for ky in 0..kh {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = (ci * h + iy as usize) * w;
                        let wrow = ((co * cin + ci) * kh + ky) * kw;
                        for kx in 0..kw {
                            let ix = ix0 + kx as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dx[xrow + ix as usize] =
                                dx[xrow + ix as usize] + g * weight[wrow + kx];
                            dw[wrow + kx] = dw[wrow + kx] + g * x[xrow + ix as usize];
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Depthwise conv2d: x(C,H,W) * w(C,kh,kw) + b(C) → (C,H',W').
#[allow(clippy::too_many_arguments)]
pub fn depthwise_conv2d<F: Scalar>(
    x: &[F],
    c: usize,
    h: usize,
    w: usize,
    weight: &[F],
    kh: usize,
    kw: usize,
    bias: &[F],
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<(Vec<F>, usize, usize)> {
    let oh = conv_out_extent("depthwise_conv2d", h, kh, stride.0, pad.0)?;
    let ow = conv_out_extent("depthwise_conv2d", w, kw, stride.1, pad.1)?;
    let mut out = vec![F::zero(); c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[ch];
                let iy0 = (oy * stride.0) as isize - pad.0 as isize;
                let ix0 = (ox * stride.1) as isize - pad.1 as isize;
                for ky in 0..kh {
                    let iy = iy0 + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = (ch * h + iy as usize) * w;
                    let wrow = (ch * kh + ky) * kw;
                    for kx in 0..kw {
                        let ix = ix0 + kx as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        acc = acc + x[xrow + ix as usize] * weight[wrow + kx];
                    }
                }
                out[(ch * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Ok((out, oh, ow))
}

#[allow(clippy::too_many_arguments)]
pub fn depthwise_conv2d_backward<F: Scalar>(
    grad: &[F],
    x: &[F],
    c: usize,
    h: usize,
    w: usize,
    weight: &[F],
    kh: usize,
    kw: usize,
    stride: (usize, usize),
    pad: (usize, usize),
    oh: usize,
    ow: usize,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let mut dx = vec![F::zero(); c * h * w];
    let mut dw = vec![F::zero(); c * kh * kw];
    let mut db = vec![F::zero(); c];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = grad[(ch * oh + oy) * ow + ox];
                db[ch] = db[ch] + g;
                let iy0 = (oy * stride.0) as isize - pad.0 as isize;
                let ix0 = (ox * stride.1) as isize - pad.1 as isize;
                for ky in 0..kh {
                    let iy = iy0 + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = (ch * h + iy as usize) * w;
                    let wrow = (ch * kh + ky) * kw;
                    for kx in 0..kw {
                        let ix = ix0 + kx as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[xrow + ix as usize] = dx[xrow + ix as usize] + g * weight[wrow + kx];
                        dw[wrow + kx] = dw[wrow + kx] + g * x[xrow + ix as usize];
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Average pooling over (C,H,W) with zero padding; the divisor is always
/// kh·kw. Parameter-free counterpart of the learnable pooling, used on
/// residual paths.
pub fn avg_pool2d<F: Scalar>(
    x: &[F],
    c: usize,
    h: usize,
    w: usize,
    kernel: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<(Vec<F>, usize, usize)> {
    let oh = conv_out_extent("avg_pool2d", h, kernel.0, stride.0, pad.0)?;
    let ow = conv_out_extent("avg_pool2d", w, kernel.1, stride.1, pad.1)?;
    let inv = F::from_f64(1.0 / (kernel.0 * kernel.1) as f64);
    let mut out = vec![F::zero(); c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = F::zero();
                let iy0 = (oy * stride.0) as isize - pad.0 as isize;
                let ix0 = (ox * stride.1) as isize - pad.1 as isize;
                for ky in 0..kernel.0 {
                    let iy = iy0 + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = (ch * h + iy as usize) * w;
                    for kx in 0..kernel.1 {
                        let ix = ix0 + kx as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        acc = acc + x[xrow + ix as usize];
                    }
                }
                out[(ch * oh + oy) * ow + ox] = acc * inv;
            }
        }
    }
    Ok((out, oh, ow))
}

#[allow(clippy::too_many_arguments)]
pub fn avg_pool2d_backward<F: Scalar>(
    grad: &[F],
    c: usize,
    h: usize,
    w: usize,
    kernel: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
    oh: usize,
    ow: usize,
) -> Vec<F> {
    let inv = F::from_f64(1.0 / (kernel.0 * kernel.1) as f64);
    let mut dx = vec![F::zero(); c * h * w];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = grad[(ch * oh + oy) * ow + ox] * inv;
                let iy0 = (oy * stride.0) as isize - pad.0 as isize;
                let ix0 = (ox * stride.1) as isize - pad.1 as isize;
                for ky in 0..kernel.0 {
                    let iy = iy0 + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = (ch * h + iy as usize) * w;
                    for kx in 0..kernel.1 {
                        let ix = ix0 + kx as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[xrow + ix as usize] = dx[xrow + ix as usize] + g;
                    }
                }
            }
        }
    }
    dx
}

// ── normalization and activations ────────────────────────────────────

/// Iterate lanes along `axis`: calls f(lane_start, stride) for each lane.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize)) {
    let n = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            f(o * n * inner + i, inner);
        }
    }
}

/// Max-subtracted softmax along `axis`.
pub fn softmax<F: Scalar>(x: &[F], shape: &[usize], axis: usize) -> Vec<F> {
    let n = shape[axis];
    let mut out = vec![F::zero(); x.len()];
    for_each_lane(shape, axis, |start, stride| {
        let mut m = x[start];
        for j in 1..n {
            let v = x[start + j * stride];
            if v > m {
                m = v;
            }
        }
        let mut sum = F::zero();
        for j in 0..n {
            let e = (x[start + j * stride] - m).exp();
            out[start + j * stride] = e;
            sum = sum + e;
        }
        let inv = F::one() / sum;
        for j in 0..n {
            out[start + j * stride] = out[start + j * stride] * inv;
        }
    });
    out
}

/// dx = y ⊙ (dy − Σ_lane dy⊙y)
pub fn softmax_backward<F: Scalar>(grad: &[F], y: &[F], shape: &[usize], axis: usize) -> Vec<F> {
    let n = shape[axis];
    let mut dx = vec![F::zero(); y.len()];
    for_each_lane(shape, axis, |start, stride| {
        let mut dot = F::zero();
        for j in 0..n {
            let o = start + j * stride;
            dot = dot + grad[o] * y[o];
        }
        for j in 0..n {
            let o = start + j * stride;
            dx[o] = y[o] * (grad[o] - dot);
        }
    });
    dx
}

/// Layer norm over the last axis with affine gain/shift. Population
/// variance (divide by n).
pub fn layernorm<F: Scalar>(
    x: &[F],
    shape: &[usize],
    gain: &[F],
    shift: &[F],
    eps: f64,
) -> Vec<F> {
    let n = *shape.last().expect("layernorm needs rank >= 1");
    let rows = x.len() / n;
    let inv_n = F::from_f64(1.0 / n as f64);
    let eps = F::from_f64(eps);
    let mut out = vec![F::zero(); x.len()];
    for r in 0..rows {
        let row = &x[r * n..(r + 1) * n];
        let mut mean = F::zero();
        for &v in row {
            mean = mean + v;
        }
        mean = mean * inv_n;
        let mut var = F::zero();
        for &v in row {
            let d = v - mean;
            var = var + d * d;
        }
        var = var * inv_n;
        let inv_std = F::one() / (var + eps).sqrt();
        let orow = &mut out[r * n..(r + 1) * n];
        for j in 0..n {
            orow[j] = (row[j] - mean) * inv_std * gain[j] + shift[j];
        }
    }
    out
}

/// Returns (dx, dgain, dshift).
pub fn layernorm_backward<F: Scalar>(
    grad: &[F],
    x: &[F],
    shape: &[usize],
    gain: &[F],
    eps: f64,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let n = *shape.last().expect("layernorm needs rank >= 1");
    let rows = x.len() / n;
    let inv_n = F::from_f64(1.0 / n as f64);
    let eps = F::from_f64(eps);
    let mut dx = vec![F::zero(); x.len()];
    let mut dgain = vec![F::zero(); n];
    let mut dshift = vec![F::zero(); n];
    for r in 0..rows {
        let row = &x[r * n..(r + 1) * n];
        let grow = &grad[r * n..(r + 1) * n];
        let mut mean = F::zero();
        for &v in row {
            mean = mean + v;
        }
        mean = mean * inv_n;
        let mut var = F::zero();
        for &v in row {
            let d = v - mean;
            var = var + d * d;
        }
        var = var * inv_n;
        let inv_std = F::one() / (var + eps).sqrt();
        // xhat = (x - mean) * inv_std; dxhat = grad * gain
        let mut mean_dxhat = F::zero();
        let mut mean_dxhat_xhat = F::zero();
        for j in 0..n {
            let xhat = (row[j] - mean) * inv_std;
            let dxhat = grow[j] * gain[j];
            dgain[j] = dgain[j] + grow[j] * xhat;
            dshift[j] = dshift[j] + grow[j];
            mean_dxhat = mean_dxhat + dxhat;
            mean_dxhat_xhat = mean_dxhat_xhat + dxhat * xhat;
        }
        mean_dxhat = mean_dxhat * inv_n;
        mean_dxhat_xhat = mean_dxhat_xhat * inv_n;
        let drow = &mut dx[r * n..(r + 1) * n];
        for j in 0..n {
            let xhat = (row[j] - mean) * inv_std;
            let dxhat = grow[j] * gain[j];
            drow[j] = inv_std * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
        }
    }
    (dx, dgain, dshift)
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// Tanh-form gelu.
pub fn gelu<F: Scalar>(x: &[F]) -> Vec<F> {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    x.iter()
        .map(|&v| {
            let t = (c * (v + a * v * v * v)).tanh();
            half * v * (F::one() + t)
        })
        .collect()
}

pub fn gelu_backward<F: Scalar>(grad: &[F], x: &[F]) -> Vec<F> {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    let three_a = F::from_f64(3.0 * GELU_A);
    grad.iter()
        .zip(x)
        .map(|(&g, &v)| {
            let u = c * (v + a * v * v * v);
            let t = u.tanh();
            let sech2 = F::one() - t * t;
            let du = c * (F::one() + three_a * v * v);
            let d = half * (F::one() + t) + half * v * sech2 * du;
            g * d
        })
        .collect()
}

// ── interpolation ────────────────────────────────────────────────────

/// Endpoint-aligned sample positions of `dst` points over `src` points.
/// Integer positions produce exact copies.
fn interp_coeffs(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    // (i0, i1, frac): out = src[i0]*(1-frac) + src[i1]*frac
    let mut c = Vec::with_capacity(dst);
    for j in 0..dst {
        if dst == 1 || src == 1 {
            c.push((0, 0, 0.0));
            continue;
        }
        let pos = j as f64 * (src - 1) as f64 / (dst - 1) as f64;
        let i0 = pos.floor() as usize;
        let frac = pos - i0 as f64;
        if frac == 0.0 || i0 + 1 >= src {
            c.push((i0.min(src - 1), i0.min(src - 1), 0.0));
        } else {
            c.push((i0, i0 + 1, frac));
        }
    }
    c
}

pub fn interp_linear_1d<F: Scalar>(
    x: &[F],
    shape: &[usize],
    axis: usize,
    new_len: usize,
) -> Result<(Vec<F>, Vec<usize>)> {
    if new_len == 0 {
        return Err(TensorError::Invalid {
            op: "interp_linear_1d",
            msg: "target extent must be positive".into(),
        });
    }
    let src = shape[axis];
    let coeffs = interp_coeffs(src, new_len);
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![F::zero(); outer * new_len * inner];
    for o in 0..outer {
        for (j, &(i0, i1, frac)) in coeffs.iter().enumerate() {
            let dst_base = (o * new_len + j) * inner;
            let s0 = (o * src + i0) * inner;
            if frac == 0.0 {
                out[dst_base..dst_base + inner].copy_from_slice(&x[s0..s0 + inner]);
            } else {
                let s1 = (o * src + i1) * inner;
                let w1 = F::from_f64(frac);
                let w0 = F::one() - w1;
                for i in 0..inner {
                    out[dst_base + i] = x[s0 + i] * w0 + x[s1 + i] * w1;
                }
            }
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape[axis] = new_len;
    Ok((out, new_shape))
}

/// Bilinear interpolation over the last two axes (separable: rows then
/// columns).
pub fn interp_bilinear_2d<F: Scalar>(
    x: &[F],
    shape: &[usize],
    new_h: usize,
    new_w: usize,
) -> Result<(Vec<F>, Vec<usize>)> {
    if shape.len() < 2 {
        return Err(TensorError::Invalid {
            op: "interp_bilinear_2d",
            msg: format!("needs rank >= 2, got {}", shape.len()),
        });
    }
    let (rows, shape_r) = interp_linear_1d(x, shape, shape.len() - 2, new_h)?;
    interp_linear_1d(&rows, &shape_r, shape.len() - 1, new_w)
}

// ── movement ─────────────────────────────────────────────────────────

/// Swap two axes, materializing the result.
pub fn transpose<F: Scalar>(
    x: &[F],
    shape: &[usize],
    a: usize,
    b: usize,
) -> (Vec<F>, Vec<usize>) {
    let rank = shape.len();
    let mut new_shape = shape.to_vec();
    new_shape.swap(a, b);
    if a == b {
        return (x.to_vec(), new_shape);
    }
    let mut src_strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        src_strides[i] = src_strides[i + 1] * shape[i + 1];
    }
    let mut perm_strides = src_strides.clone();
    perm_strides.swap(a, b);
    let mut out = vec![F::zero(); x.len()];
    let mut pos = 0usize;
    for_each_index(&new_shape, |idx| {
        let src: usize = idx.iter().zip(&perm_strides).map(|(&i, &s)| i * s).sum();
        out[pos] = x[src];
        pos += 1;
    });
    (out, new_shape)
}
