use super::kernels::{gemm, gemm_nt, gemm_tn};
use super::Tensor;
use crate::error::{Error, Result};

fn check_same(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{op}: operand shapes differ, {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// (outer, len, inner) split of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same(a, b, "add")?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_op(
        "add",
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|g, _, _| vec![Some(g.to_vec()), Some(g.to_vec())]),
    ))
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same(a, b, "sub")?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    Ok(Tensor::from_op(
        "sub",
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|g, _, _| vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]),
    ))
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same(a, b, "mul")?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Ok(Tensor::from_op(
        "mul",
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|g, _, p| {
            let ga = g.iter().zip(p[1].data()).map(|(g, b)| g * b).collect();
            let gb = g.iter().zip(p[0].data()).map(|(g, a)| g * a).collect();
            vec![Some(ga), Some(gb)]
        }),
    ))
}

pub fn scale(x: &Tensor, s: f32) -> Tensor {
    let data = x.data().iter().map(|v| v * s).collect();
    Tensor::from_op(
        "scale",
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |g, _, _| vec![Some(g.iter().map(|v| v * s).collect())]),
    )
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::from_op(
        "relu",
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(|g, _, p| {
            let gx = g
                .iter()
                .zip(p[0].data())
                .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                .collect();
            vec![Some(gx)]
        }),
    )
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_K: f32 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu(x: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_K * v * v * v)).tanh()))
        .collect();
    Tensor::from_op(
        "gelu",
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(|g, _, p| {
            let gx = g
                .iter()
                .zip(p[0].data())
                .map(|(&g, &x)| {
                    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                    let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                    g * (0.5 * (1.0 + t) + 0.5 * x * dt)
                })
                .collect();
            vec![Some(gx)]
        }),
    )
}

/// Sum of all elements, shape `[1]`.
pub fn sum(x: &Tensor) -> Tensor {
    let total: f32 = x.data().iter().sum();
    let n = x.numel();
    Tensor::from_op(
        "sum",
        vec![1],
        vec![total],
        vec![x.clone()],
        Box::new(move |g, _, _| vec![Some(vec![g[0]; n])]),
    )
}

pub fn mean(x: &Tensor) -> Tensor {
    scale(&sum(x), 1.0 / x.numel() as f32)
}

pub fn reshape(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    if n != x.numel() || shape.contains(&0) {
        return Err(Error::Shape(format!(
            "cannot reshape {:?} into {shape:?}",
            x.shape()
        )));
    }
    Ok(Tensor::from_op(
        "reshape",
        shape.to_vec(),
        x.to_vec(),
        vec![x.clone()],
        Box::new(|g, _, _| vec![Some(g.to_vec())]),
    ))
}

fn permute_data(data: &[f32], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f32>) {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

/// Reorders axes: output axis `i` is input axis `axes[i]`.
pub fn permute(x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::Shape(format!(
            "invalid permutation {axes:?} for rank {rank}"
        )));
    }
    let (shape, data) = permute_data(x.data(), x.shape(), axes);
    let mut inverse = vec![0usize; rank];
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

/// Concatenates along `axis`; all other dims must agree.
pub fn concat(xs: &[Tensor], axis: usize) -> Result<Tensor> {
    let first = xs
        .first()
        .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
    if axis >= first.rank() {
        return Err(Error::Shape(format!("concat axis {axis} out of range")));
    }
    for x in xs {
        let ok = x.rank() == first.rank()
            && x
                .shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(Error::Shape(format!(
                "concat: {:?} incompatible with {:?} on axis {axis}",
                x.shape(),
                first.shape()
            )));
        }
    }
    let (outer, _, inner) = split_axis(first.shape(), axis);
    let lens: Vec<usize> = xs.iter().map(|x| x.dim(axis)).collect();
    let total: usize = lens.iter().sum();
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (x, &len) in xs.iter().zip(&lens) {
            data.extend_from_slice(&x.data()[o * len * inner..(o + 1) * len * inner]);
        }
    }
    Ok(Tensor::from_op(
        "concat",
        shape,
        data,
        xs.to_vec(),
        Box::new(move |g, _, _| {
            let mut grads: Vec<Vec<f32>> =
                lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            let mut pos = 0;
            for _ in 0..outer {
                for (gi, &len) in grads.iter_mut().zip(&lens) {
                    gi.extend_from_slice(&g[pos..pos + len * inner]);
                    pos += len * inner;
                }
            }
            grads.into_iter().map(Some).collect()
        }),
    ))
}

/// `x[..., K] @ w[K, M] (+ b[M])`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    if w.rank() != 2 {
        return Err(Error::Shape(format!("linear weight must be rank 2, got {:?}", w.shape())));
    }
    let (k, m) = (w.dim(0), w.dim(1));
    let kx = *x.shape().last().unwrap();
    if kx != k {
        return Err(Error::dim("features", k, kx, "linear input"));
    }
    if let Some(b) = b {
        if b.shape() != [m] {
            return Err(Error::dim("bias", m, b.numel(), "linear bias"));
        }
    }
    let rows = x.numel() / k;
    let mut data = vec![0.0; rows * m];
    if let Some(b) = b {
        for r in data.chunks_mut(m) {
            r.copy_from_slice(b.data());
        }
    }
    gemm(x.data(), w.data(), &mut data, rows, k, m, b.is_some());
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = m;
    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = b {
        parents.push(b.clone());
    }
    Ok(Tensor::from_op(
        "linear",
        shape,
        data,
        parents,
        Box::new(move |g, _, p| {
            let mut gx = vec![0.0; rows * k];
            if p[0].tracks_grad() {
                gemm_nt(g, p[1].data(), &mut gx, rows, m, k, false);
            }
            let mut gw = vec![0.0; k * m];
            if p[1].tracks_grad() {
                gemm_tn(p[0].data(), g, &mut gw, k, rows, m, false);
            }
            let mut out = vec![Some(gx), Some(gw)];
            if p.len() == 3 {
                let mut gb = vec![0.0; m];
                for r in g.chunks(m) {
                    gb.iter_mut().zip(r).for_each(|(a, b)| *a += b);
                }
                out.push(Some(gb));
            }
            out
        }),
    ))
}

/// Batched matrix product `a[B, M, K] @ b[B, K, N]`.
pub fn bmm(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 3 || b.rank() != 3 {
        return Err(Error::Shape(format!("bmm needs rank-3 operands, got {:?} and {:?}", a.shape(), b.shape())));
    }
    let (batch, m, k) = (a.dim(0), a.dim(1), a.dim(2));
    if b.dim(0) != batch {
        return Err(Error::dim("batch", batch, b.dim(0), "bmm"));
    }
    if b.dim(1) != k {
        return Err(Error::dim("inner", k, b.dim(1), "bmm"));
    }
    let n = b.dim(2);
    let mut data = vec![0.0; batch * m * n];
    for i in 0..batch {
        gemm(
            &a.data()[i * m * k..(i + 1) * m * k],
            &b.data()[i * k * n..(i + 1) * k * n],
            &mut data[i * m * n..(i + 1) * m * n],
            m,
            k,
            n,
            false,
        );
    }
    Ok(Tensor::from_op(
        "bmm",
        vec![batch, m, n],
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |g, _, p| {
            let mut ga = vec![0.0; batch * m * k];
            let mut gb = vec![0.0; batch * k * n];
            for i in 0..batch {
                let gi = &g[i * m * n..(i + 1) * m * n];
                if p[0].tracks_grad() {
                    gemm_nt(gi, &p[1].data()[i * k * n..(i + 1) * k * n], &mut ga[i * m * k..(i + 1) * m * k], m, n, k, false);
                }
                if p[1].tracks_grad() {
                    gemm_tn(&p[0].data()[i * m * k..(i + 1) * m * k], gi, &mut gb[i * k * n..(i + 1) * k * n], k, m, n, false);
                }
            }
            vec![Some(ga), Some(gb)]
        }),
    ))
}

pub(crate) fn softmax_slice(data: &[f32], shape: &[usize], axis: usize) -> Vec<f32> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let max = (0..len)
                .map(|d| data[base + d * inner])
                .fold(f32::NEG_INFINITY, f32::max);
            let mut total = 0.0;
            for d in 0..len {
                let e = (data[base + d * inner] - max).exp();
                out[base + d * inner] = e;
                total += e;
            }
            for d in 0..len {
                out[base + d * inner] /= total;
            }
        }
    }
    out
}

/// Max-shifted softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::Shape(format!("softmax axis {axis} for rank {}", x.rank())));
    }
    let shape = x.shape().to_vec();
    let data = softmax_slice(x.data(), &shape, axis);
    let (outer, len, inner) = split_axis(&shape, axis);
    Ok(Tensor::from_op(
        "softmax",
        shape,
        data,
        vec![x.clone()],
        Box::new(move |g, y, _| {
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let dot: f32 = (0..len).map(|d| g[base + d * inner] * y[base + d * inner]).sum();
                    for d in 0..len {
                        let j = base + d * inner;
                        gx[j] = y[j] * (g[j] - dot);
                    }
                }
            }
            vec![Some(gx)]
        }),
    ))
}

/// Normalizes over the trailing dimension, then applies `gamma * x + beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    let d = *x.shape().last().unwrap();
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::dim("features", d, gamma.numel(), "layer_norm affine"));
    }
    let rows = x.numel() / d;
    let mut xhat = vec![0.0; x.numel()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f32>() / d as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[r] = is;
        for (o, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
    }
    let data = xhat
        .chunks(d)
        .flat_map(|r| r.iter().zip(gamma.data()).zip(beta.data()).map(|((x, g), b)| x * g + b))
        .collect();
    Ok(Tensor::from_op(
        "layer_norm",
        x.shape().to_vec(),
        data,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g, _, p| {
            let gamma = p[1].data();
            let mut gx = vec![0.0; rows * d];
            let mut gg = vec![0.0; d];
            let mut gb = vec![0.0; d];
            for r in 0..rows {
                let gr = &g[r * d..(r + 1) * d];
                let xr = &xhat[r * d..(r + 1) * d];
                let mut sum_dxhat = 0.0;
                let mut sum_dxhat_x = 0.0;
                for j in 0..d {
                    let dxh = gr[j] * gamma[j];
                    sum_dxhat += dxh;
                    sum_dxhat_x += dxh * xr[j];
                    gg[j] += gr[j] * xr[j];
                    gb[j] += gr[j];
                }
                let n = d as f32;
                for j in 0..d {
                    let dxh = gr[j] * gamma[j];
                    gx[r * d + j] = inv_std[r] / n * (n * dxh - sum_dxhat - xr[j] * sum_dxhat_x);
                }
            }
            vec![Some(gx), Some(gg), Some(gb)]
        }),
    ))
}

/// Per-channel statistics of a training-mode batch norm call.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    /// Unbiased variance (biased when only one value per channel exists).
    pub var: Vec<f32>,
}

fn check_bn(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(usize, usize, usize)> {
    if x.rank() < 2 {
        return Err(Error::Shape(format!("batch_norm input rank {} < 2", x.rank())));
    }
    let c = x.dim(1);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::dim("channels", c, gamma.numel(), "batch_norm affine"));
    }
    let n = x.dim(0);
    let spatial = x.numel() / (n * c);
    Ok((n, c, spatial))
}

/// Batch normalization over `(N, spatial)` per channel using batch statistics.
pub fn batch_norm_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f32,
) -> Result<(Tensor, BatchStats)> {
    let (n, c, spatial) = check_bn(x, gamma, beta)?;
    let count = (n * spatial) as f32;
    let xd = x.data();
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            let off = (b * c + ch) * spatial;
            s += xd[off..off + spatial].iter().sum::<f32>();
        }
        mean[ch] = s / count;
        let mut v = 0.0;
        for b in 0..n {
            let off = (b * c + ch) * spatial;
            v += xd[off..off + spatial].iter().map(|x| (x - mean[ch]).powi(2)).sum::<f32>();
        }
        var[ch] = v / count;
    }
    let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; xd.len()];
    let mut data = vec![0.0; xd.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * spatial;
            for i in off..off + spatial {
                xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                data[i] = xhat[i] * gamma.data()[ch] + beta.data()[ch];
            }
        }
    }
    let unbiased = if count > 1.0 {
        var.iter().map(|v| v * count / (count - 1.0)).collect()
    } else {
        var.clone()
    };
    let out = Tensor::from_op(
        "batch_norm",
        x.shape().to_vec(),
        data,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g, _, p| {
            let gamma = p[1].data();
            let mut gx = vec![0.0; g.len()];
            let mut gg = vec![0.0; c];
            let mut gb = vec![0.0; c];
            for ch in 0..c {
                let mut sum_g = 0.0;
                let mut sum_gx = 0.0;
                for b in 0..n {
                    let off = (b * c + ch) * spatial;
                    for i in off..off + spatial {
                        sum_g += g[i];
                        sum_gx += g[i] * xhat[i];
                    }
                }
                gg[ch] = sum_gx;
                gb[ch] = sum_g;
                let k = gamma[ch] * inv_std[ch] / count;
                for b in 0..n {
                    let off = (b * c + ch) * spatial;
                    for i in off..off + spatial {
                        gx[i] = k * (count * g[i] - sum_g - xhat[i] * sum_gx);
                    }
                }
            }
            vec![Some(gx), Some(gg), Some(gb)]
        }),
    );
    Ok((out, BatchStats { mean, var: unbiased }))
}

/// Batch normalization with fixed (running) statistics.
pub fn batch_norm_eval(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &[f32],
    running_var: &[f32],
    eps: f32,
) -> Result<Tensor> {
    let (n, c, spatial) = check_bn(x, gamma, beta)?;
    if running_mean.len() != c || running_var.len() != c {
        return Err(Error::dim("channels", c, running_mean.len(), "batch_norm running stats"));
    }
    let mul: Vec<f32> = (0..c)
        .map(|ch| gamma.data()[ch] / (running_var[ch] + eps).sqrt())
        .collect();
    let inv_std: Vec<f32> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mean = running_mean.to_vec();
    let mut data = vec![0.0; x.numel()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * spatial;
            for i in off..off + spatial {
                data[i] = (x.data()[i] - mean[ch]) * mul[ch] + beta.data()[ch];
            }
        }
    }
    Ok(Tensor::from_op(
        "batch_norm_eval",
        x.shape().to_vec(),
        data,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g, _, p| {
            let mut gx = vec![0.0; g.len()];
            let mut gg = vec![0.0; c];
            let mut gb = vec![0.0; c];
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * spatial;
                    for i in off..off + spatial {
                        gx[i] = g[i] * mul[ch];
                        gg[ch] += g[i] * (p[0].data()[i] - mean[ch]) * inv_std[ch];
                        gb[ch] += g[i];
                    }
                }
            }
            vec![Some(gx), Some(gg), Some(gb)]
        }),
    ))
}

/// Selects rows of a `[M, K]` tensor.
pub fn gather_rows(x: &Tensor, rows: &[usize]) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(Error::Shape(format!("gather_rows needs rank 2, got {:?}", x.shape())));
    }
    let (m, k) = (x.dim(0), x.dim(1));
    if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
        return Err(Error::Shape(format!("row index {bad} out of range for {m} rows")));
    }
    if rows.is_empty() {
        return Err(Error::Shape("gather_rows with no rows".into()));
    }
    let mut data = Vec::with_capacity(rows.len() * k);
    for &r in rows {
        data.extend_from_slice(&x.data()[r * k..(r + 1) * k]);
    }
    let rows = rows.to_vec();
    Ok(Tensor::from_op(
        "gather_rows",
        vec![rows.len(), k],
        data,
        vec![x.clone()],
        Box::new(move |g, _, _| {
            let mut gx = vec![0.0; m * k];
            for (i, &r) in rows.iter().enumerate() {
                gx[r * k..(r + 1) * k]
                    .iter_mut()
                    .zip(&g[i * k..(i + 1) * k])
                    .for_each(|(a, b)| *a += b);
            }
            vec![Some(gx)]
        }),
    ))
}

/// Elementwise smooth L1 (Huber with unit transition point).
pub fn smooth_l1(x: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .map(|&v| if v.abs() < 1.0 { 0.5 * v * v } else { v.abs() - 0.5 })
        .collect();
    Tensor::from_op(
        "smooth_l1",
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(|g, _, p| {
            let gx = g
                .iter()
                .zip(p[0].data())
                .map(|(&g, &v)| if v.abs() < 1.0 { g * v } else { g * v.signum() })
                .collect();
            vec![Some(gx)]
        }),
    )
}

/// Per-row softmax cross-entropy of `logits[M, C]` against class indices, shape `[M]`.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    if logits.rank() != 2 {
        return Err(Error::Shape(format!("cross_entropy needs rank 2, got {:?}", logits.shape())));
    }
    let (m, c) = (logits.dim(0), logits.dim(1));
    if targets.len() != m {
        return Err(Error::dim("rows", m, targets.len(), "cross_entropy targets"));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::Data(format!("class target {t} out of range for {c} classes")));
    }
    let probs = softmax_slice(logits.data(), &[m, c], 1);
    let data = (0..m)
        .map(|i| {
            let row = &logits.data()[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f32>().ln();
            lse - row[targets[i]]
        })
        .collect();
    let targets = targets.to_vec();
    Ok(Tensor::from_op(
        "cross_entropy",
        vec![m],
        data,
        vec![logits.clone()],
        Box::new(move |g, _, _| {
            let mut gx = probs.clone();
            for i in 0..m {
                gx[i * c + targets[i]] -= 1.0;
                gx[i * c..(i + 1) * c].iter_mut().for_each(|v| *v *= g[i]);
            }
            vec![Some(gx)]
        }),
    ))
}
