//! Forward and adjoint kernels on plain tensors.
//!
//! These are the numeric bodies behind the tape operations in
//! [`crate::autodiff`]. Layout is always row-major, images are `B×C×H×W`.
//! Every loop has a fixed iteration order so results are bit-reproducible.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn expect_rank<T: Scalar>(op: &'static str, t: &Tensor<T>, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::dim(
            op,
            format!("expected rank {rank}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

fn dims4<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<[usize; 4]> {
    expect_rank(op, t, 4)?;
    let s = t.shape();
    Ok([s[0], s[1], s[2], s[3]])
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("matmul", a, 2)?;
    expect_rank("matmul", b, 2)?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::dim(
            "matmul",
            format!("inner dimensions differ: {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

/// Adjoints of `C = A·B`: `dA = dC·Bᵀ`, `dB = Aᵀ·dC`.
pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let (ad, bd, gd) = (a.data(), b.data(), grad.data());
    let mut da = vec![T::zero(); m * k];
    let mut db = vec![T::zero(); k * n];
    for i in 0..m {
        let grow = &gd[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &bd[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&g, &bv) in grow.iter().zip(brow) {
                acc = acc + g * bv;
            }
            da[i * k + p] = acc;
            let av = ad[i * k + p];
            for (d, &g) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *d = *d + av * g;
            }
        }
    }
    (
        Tensor::new(&[m, k], da).expect("shape"),
        Tensor::new(&[k, n], db).expect("shape"),
    )
}

/// Fully connected map `x·Wᵀ + b` with `x: N×C`, `W: D×C`, `b: D`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("linear", x, 2)?;
    expect_rank("linear", w, 2)?;
    expect_rank("linear", b, 1)?;
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let d = w.shape()[0];
    if w.shape()[1] != c || b.shape()[0] != d {
        return Err(Error::dim(
            "linear",
            format!(
                "input {:?}, weight {:?}, bias {:?}",
                x.shape(),
                w.shape(),
                b.shape()
            ),
        ));
    }
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        let xrow = &xd[i * c..(i + 1) * c];
        for j in 0..d {
            let wrow = &wd[j * c..(j + 1) * c];
            let mut acc = T::zero();
            for (&xv, &wv) in xrow.iter().zip(wrow) {
                acc = acc + xv * wv;
            }
            out.push(acc + bd[j]);
        }
    }
    Tensor::new(&[n, d], out)
}

pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let d = w.shape()[0];
    let (xd, wd, gd) = (x.data(), w.data(), grad.data());
    let mut dx = vec![T::zero(); n * c];
    let mut dw = vec![T::zero(); d * c];
    let mut db = vec![T::zero(); d];
    for i in 0..n {
        let xrow = &xd[i * c..(i + 1) * c];
        for j in 0..d {
            let g = gd[i * d + j];
            if g == T::zero() {
                continue;
            }
            db[j] = db[j] + g;
            let wrow = &wd[j * c..(j + 1) * c];
            for (dxv, &wv) in dx[i * c..(i + 1) * c].iter_mut().zip(wrow) {
                *dxv = *dxv + g * wv;
            }
            for (dwv, &xv) in dw[j * c..(j + 1) * c].iter_mut().zip(xrow) {
                *dwv = *dwv + g * xv;
            }
        }
    }
    (
        Tensor::new(&[n, c], dx).expect("shape"),
        Tensor::new(&[d, c], dw).expect("shape"),
        Tensor::new(&[d], db).expect("shape"),
    )
}

/// Output positions `o` in `[lo, hi)` for which `o*stride + offset` lands in `[0, len)`.
fn valid_span(out_len: usize, in_len: usize, offset: isize, stride: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset) + s - 1) / s
    };
    let last_in = in_len as isize - 1 - offset;
    let hi = if last_in < 0 { 0 } else { last_in / s + 1 };
    let lo = lo.max(0) as usize;
    let hi = (hi as usize).min(out_len);
    (lo, hi.max(lo))
}

pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// 2-D cross-correlation with zero padding.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let [bs, cin, h, wd] = dims4("conv2d", x)?;
    let [cout, cin2, kh, kw] = dims4("conv2d", w)?;
    if cin != cin2 {
        return Err(Error::dim(
            "conv2d",
            format!("input {:?} vs kernel {:?}", x.shape(), w.shape()),
        ));
    }
    if b.shape() != [cout] {
        return Err(Error::dim(
            "conv2d",
            format!("bias {:?} for {cout} output channels", b.shape()),
        ));
    }
    if stride == 0 {
        return Err(Error::dim("conv2d", "stride must be at least 1"));
    }
    if h + 2 * pad < kh || wd + 2 * pad < kw {
        return Err(Error::dim(
            "conv2d",
            format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                wd + 2 * pad
            ),
        ));
    }
    let ho = conv_out_len(h, kh, stride, pad);
    let wo = conv_out_len(wd, kw, stride, pad);
    let (xd, wdata, bd) = (x.data(), w.data(), b.data());
    let mut out = vec![T::zero(); bs * cout * ho * wo];
    for n in 0..bs {
        for co in 0..cout {
            let plane = &mut out[(n * cout + co) * ho * wo..(n * cout + co + 1) * ho * wo];
            plane.iter_mut().for_each(|v| *v = bd[co]);
            for ci in 0..cin {
                let xplane = &xd[(n * cin + ci) * h * wd..(n * cin + ci + 1) * h * wd];
                for i in 0..kh {
                    let (oh_lo, oh_hi) = valid_span(ho, h, i as isize - pad as isize, stride);
                    for j in 0..kw {
                        let wv = wdata[((co * cin + ci) * kh + i) * kw + j];
                        let off = j as isize - pad as isize;
                        let (ow_lo, ow_hi) = valid_span(wo, wd, off, stride);
                        for oh in oh_lo..oh_hi {
                            let ih = oh * stride + i - pad;
                            let xrow = &xplane[ih * wd..(ih + 1) * wd];
                            let orow = &mut plane[oh * wo..(oh + 1) * wo];
                            for ow in ow_lo..ow_hi {
                                let iw = (ow * stride) as isize + off;
                                orow[ow] = orow[ow] + wv * xrow[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[bs, cout, ho, wo], out)
}

/// Adjoints of [`conv2d`] for input, kernel and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [bs, cin, h, wd] = dims4("conv2d", x).expect("checked in forward");
    let [cout, _, kh, kw] = dims4("conv2d", w).expect("checked in forward");
    let (ho, wo) = (grad.shape()[2], grad.shape()[3]);
    let (xd, wdata, gd) = (x.data(), w.data(), grad.data());
    let mut dx = vec![T::zero(); x.numel()];
    let mut dw = vec![T::zero(); w.numel()];
    let mut db = vec![T::zero(); cout];
    for n in 0..bs {
        for co in 0..cout {
            let gplane = &gd[(n * cout + co) * ho * wo..(n * cout + co + 1) * ho * wo];
            db[co] = db[co] + gplane.iter().copied().sum::<T>();
            for ci in 0..cin {
                let base = (n * cin + ci) * h * wd;
                for i in 0..kh {
                    let (oh_lo, oh_hi) = valid_span(ho, h, i as isize - pad as isize, stride);
                    for j in 0..kw {
                        let widx = ((co * cin + ci) * kh + i) * kw + j;
                        let wv = wdata[widx];
                        let off = j as isize - pad as isize;
                        let (ow_lo, ow_hi) = valid_span(wo, wd, off, stride);
                        let mut acc = T::zero();
                        for oh in oh_lo..oh_hi {
                            let ih = oh * stride + i - pad;
                            for ow in ow_lo..ow_hi {
                                let iw = ((ow * stride) as isize + off) as usize;
                                let g = gplane[oh * wo + ow];
                                let xi = base + ih * wd + iw;
                                acc = acc + g * xd[xi];
                                dx[xi] = dx[xi] + g * wv;
                            }
                        }
                        dw[widx] = dw[widx] + acc;
                    }
                }
            }
        }
    }
    (
        Tensor::new(x.shape(), dx).expect("shape"),
        Tensor::new(w.shape(), dw).expect("shape"),
        Tensor::new(&[cout], db).expect("shape"),
    )
}

fn check_window<T: Scalar>(
    op: &'static str,
    x: &Tensor<T>,
    kh: usize,
    kw: usize,
    stride: usize,
) -> Result<[usize; 4]> {
    let dims = dims4(op, x)?;
    let [_, _, h, w] = dims;
    if kh == 0 || kw == 0 || stride == 0 {
        return Err(Error::dim(
            op,
            format!("kernel {kh}x{kw} and stride {stride} must be positive"),
        ));
    }
    if kh > h || kw > w {
        return Err(Error::dim(
            op,
            format!("kernel {kh}x{kw} exceeds input extent {h}x{w}"),
        ));
    }
    Ok(dims)
}

/// Unpadded mean pooling over `kh×kw` windows.
pub fn avgpool2d<T: Scalar>(x: &Tensor<T>, kh: usize, kw: usize, stride: usize) -> Result<Tensor<T>> {
    let [bs, c, h, w] = check_window("avgpool2d", x, kh, kw, stride)?;
    let ho = (h - kh) / stride + 1;
    let wo = (w - kw) / stride + 1;
    let count = T::from_usize(kh * kw);
    let xd = x.data();
    let mut out = Vec::with_capacity(bs * c * ho * wo);
    for plane in xd.chunks_exact(h * w) {
        for oh in 0..ho {
            for ow in 0..wo {
                let mut acc = T::zero();
                for i in 0..kh {
                    let row = &plane[(oh * stride + i) * w + ow * stride..];
                    for &v in &row[..kw] {
                        acc = acc + v;
                    }
                }
                out.push(acc / count);
            }
        }
    }
    Tensor::new(&[bs, c, ho, wo], out)
}

pub fn avgpool2d_backward<T: Scalar>(
    x_shape: &[usize],
    grad: &Tensor<T>,
    kh: usize,
    kw: usize,
    stride: usize,
) -> Tensor<T> {
    let (h, w) = (x_shape[2], x_shape[3]);
    let (ho, wo) = (grad.shape()[2], grad.shape()[3]);
    #[allow(unused_mut)]
    let mut scale = T::one() / T::from_usize(kh * kw);
    #[cfg(feature = "mutant-adjoint")]
    {
        scale = scale * T::from_f64(1.25);
    }
    let mut dx = Tensor::zeros(x_shape);
    for (dplane, gplane) in dx
        .data_mut()
        .chunks_exact_mut(h * w)
        .zip(grad.data().chunks_exact(ho * wo))
    {
        for oh in 0..ho {
            for ow in 0..wo {
                let g = gplane[oh * wo + ow] * scale;
                for i in 0..kh {
                    let start = (oh * stride + i) * w + ow * stride;
                    for v in &mut dplane[start..start + kw] {
                        *v = *v + g;
                    }
                }
            }
        }
    }
    dx
}

/// Windowed maximum. Returns the output and, per output cell, the flat input
/// index of the first (row-major) maximal element.
pub fn maxpool2d<T: Scalar>(x: &Tensor<T>, k: usize, stride: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let [bs, c, h, w] = check_window("maxpool2d", x, k, k, stride)?;
    let ho = (h - k) / stride + 1;
    let wo = (w - k) / stride + 1;
    let xd = x.data();
    let mut out = Vec::with_capacity(bs * c * ho * wo);
    let mut argmax = Vec::with_capacity(bs * c * ho * wo);
    for p in 0..bs * c {
        let base = p * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best = base + (oh * stride) * w + ow * stride;
                for i in 0..k {
                    for j in 0..k {
                        let idx = base + (oh * stride + i) * w + ow * stride + j;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(&[bs, c, ho, wo], out)?, argmax))
}

pub fn maxpool2d_backward<T: Scalar>(x_shape: &[usize], grad: &Tensor<T>, argmax: &[usize]) -> Tensor<T> {
    let mut dx = Tensor::zeros(x_shape);
    let d = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad.data()) {
        d[idx] = d[idx] + g;
    }
    dx
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(x.shape(), data).expect("shape")
}

/// Row-wise `x - logsumexp(x)` with max subtraction.
pub fn log_softmax<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("log_softmax", x, 2)?;
    let k = x.shape()[1];
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks_exact(k) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        out.extend(row.iter().map(|&v| v - lse));
    }
    Tensor::new(x.shape(), out)
}

/// `dx = g - softmax · Σg` per row, with softmax recovered from the output.
pub fn log_softmax_backward<T: Scalar>(out: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let k = out.shape()[1];
    let mut dx = Vec::with_capacity(out.numel());
    for (orow, grow) in out.data().chunks_exact(k).zip(grad.data().chunks_exact(k)) {
        let gsum: T = grow.iter().copied().sum();
        dx.extend(orow.iter().zip(grow).map(|(&o, &g)| g - o.exp() * gsum));
    }
    Tensor::new(out.shape(), dx).expect("shape")
}

pub fn check_targets(targets: &[usize], batch: usize, classes: usize) -> Result<()> {
    if targets.len() != batch {
        return Err(Error::dim(
            "nll_loss",
            format!("{} targets for batch of {batch}", targets.len()),
        ));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
        return Err(Error::Index {
            index: bad,
            bound: classes,
        });
    }
    Ok(())
}

/// Mean over the batch of `-logp[i, target_i]`.
pub fn nll<T: Scalar>(logp: &Tensor<T>, targets: &[usize]) -> Result<T> {
    expect_rank("nll_loss", logp, 2)?;
    let (b, k) = (logp.shape()[0], logp.shape()[1]);
    check_targets(targets, b, k)?;
    let d = logp.data();
    let total: T = targets
        .iter()
        .enumerate()
        .map(|(i, &t)| -d[i * k + t])
        .sum();
    Ok(total / T::from_usize(b))
}

pub fn nll_backward<T: Scalar>(shape: &[usize], targets: &[usize], grad: T) -> Tensor<T> {
    let k = shape[1];
    let scale = grad / T::from_usize(shape[0]);
    let mut dx = Tensor::zeros(shape);
    for (i, &t) in targets.iter().enumerate() {
        dx.data_mut()[i * k + t] = -scale;
    }
    dx
}

fn plogp<T: Scalar>(l: T) -> T {
    let p = l.exp();
    if p == T::zero() {
        T::zero()
    } else {
        p * l
    }
}

/// Mean over the batch of `-Σ_k p_k log p_k`, taking `0·log 0 = 0`.
pub fn entropy<T: Scalar>(logp: &Tensor<T>) -> Result<T> {
    expect_rank("entropy", logp, 2)?;
    let (b, k) = (logp.shape()[0], logp.shape()[1]);
    let total: T = logp
        .data()
        .chunks_exact(k)
        .map(|row| -row.iter().map(|&l| plogp(l)).sum::<T>())
        .sum();
    Ok(total / T::from_usize(b))
}

pub fn entropy_backward<T: Scalar>(logp: &Tensor<T>, grad: T) -> Tensor<T> {
    let scale = grad / T::from_usize(logp.shape()[0]);
    logp.map(|l| {
        let p = l.exp();
        if p == T::zero() {
            T::zero()
        } else {
            -scale * p * (l + T::one())
        }
    })
}

/// `B×C×H×W` to `(B·H·W)×C`: one row per spatial position.
pub fn spatial_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, h, w] = dims4("spatial_rows", x)?;
    let hw = h * w;
    let xd = x.data();
    let mut out = Vec::with_capacity(x.numel());
    for n in 0..b {
        for p in 0..hw {
            for ch in 0..c {
                out.push(xd[(n * c + ch) * hw + p]);
            }
        }
    }
    Tensor::new(&[b * hw, c], out)
}

pub fn spatial_rows_backward<T: Scalar>(x_shape: &[usize], grad: &Tensor<T>) -> Tensor<T> {
    let (b, c, hw) = (x_shape[0], x_shape[1], x_shape[2] * x_shape[3]);
    let gd = grad.data();
    let mut dx = Tensor::zeros(x_shape);
    let d = dx.data_mut();
    for n in 0..b {
        for p in 0..hw {
            for ch in 0..c {
                d[(n * c + ch) * hw + p] = gd[(n * hw + p) * c + ch];
            }
        }
    }
    dx
}

/// Sums consecutive blocks of rows: `(G·n)×D` to `G×D`.
pub fn segment_sum<T: Scalar>(x: &Tensor<T>, groups: usize) -> Result<Tensor<T>> {
    expect_rank("segment_sum", x, 2)?;
    let (rows, d) = (x.shape()[0], x.shape()[1]);
    if groups == 0 || rows % groups != 0 {
        return Err(Error::dim(
            "segment_sum",
            format!("{rows} rows cannot split into {groups} groups"),
        ));
    }
    let per = rows / groups;
    let mut out = vec![T::zero(); groups * d];
    for (r, row) in x.data().chunks_exact(d).enumerate() {
        let o = &mut out[(r / per) * d..(r / per + 1) * d];
        for (ov, &v) in o.iter_mut().zip(row) {
            *ov = *ov + v;
        }
    }
    Tensor::new(&[groups, d], out)
}

pub fn segment_sum_backward<T: Scalar>(x_shape: &[usize], grad: &Tensor<T>) -> Tensor<T> {
    let (rows, d) = (x_shape[0], x_shape[1]);
    let per = rows / grad.shape()[0];
    let gd = grad.data();
    let mut out = Vec::with_capacity(rows * d);
    for r in 0..rows {
        out.extend_from_slice(&gd[(r / per) * d..(r / per + 1) * d]);
    }
    Tensor::new(x_shape, out).expect("shape")
}

pub fn zip_map<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let i = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let m = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(matmul(&i, &m).unwrap(), m);
        let r = matmul(&t(&[1, 2], &[1.0, 2.0]), &t(&[2, 1], &[3.0, 4.0])).unwrap();
        assert_eq!(r.shape(), &[1, 1]);
        assert_eq!(r.data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::<f64>::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
    }

    #[test]
    fn conv_sum_of_ones() {
        let x = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let out = conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.data(), &[9.0]);
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let x = t(&[1, 1, 3, 4], &(0..12).map(|v| v as f64 * 0.5 - 2.0).collect::<Vec<_>>());
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        let out = conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 1).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn conv_output_size_with_stride() {
        let x = Tensor::<f64>::zeros(&[1, 2, 7, 6]);
        let w = Tensor::zeros(&[3, 2, 3, 3]);
        let out = conv2d(&x, &w, &Tensor::zeros(&[3]), 2, 1).unwrap();
        assert_eq!(out.shape(), &[1, 3, 4, 3]);
    }

    #[test]
    fn conv_kernel_larger_than_padded_input() {
        let x = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        let w = Tensor::zeros(&[1, 1, 5, 5]);
        assert!(matches!(
            conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 1),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn avgpool_worked_examples() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(avgpool2d(&x, 2, 2, 1).unwrap().data(), &[2.5]);
        let r = avgpool2d(&x, 1, 2, 1).unwrap();
        assert_eq!(r.shape(), &[1, 1, 2, 1]);
        assert_eq!(r.data(), &[1.5, 3.5]);
        assert_eq!(avgpool2d(&x, 1, 1, 1).unwrap(), x);
        assert!(avgpool2d(&x, 3, 1, 1).is_err());
    }

    #[test]
    fn avgpool_backward_spreads_uniformly() {
        let g = t(&[1, 1, 1, 1], &[1.0]);
        let dx = avgpool2d_backward(&[1, 1, 2, 2], &g, 2, 2, 1);
        if cfg!(feature = "mutant-adjoint") {
            return;
        }
        assert_eq!(dx.data(), &[0.25; 4]);
    }

    #[test]
    fn maxpool_examples_and_tie_break() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let (out, arg) = maxpool2d(&x, 2, 2).unwrap();
        assert_eq!(out.data(), &[4.0]);
        assert_eq!(arg, vec![3]);

        let c = Tensor::<f64>::full(&[1, 1, 4, 4], 0.7);
        let (out, arg) = maxpool2d(&c, 2, 2).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.7));
        assert_eq!(arg, vec![0, 2, 8, 10]);
        let dx = maxpool2d_backward(c.shape(), &Tensor::full(&[1, 1, 2, 2], 1.0), &arg);
        let hot: Vec<usize> = (0..16).filter(|&i| dx.data()[i] != 0.0).collect();
        assert_eq!(hot, vec![0, 2, 8, 10]);
    }

    #[test]
    fn relu_values_and_adjoint() {
        let x = t(&[3], &[-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&t(&[2], &[3.0, -3.0]), &t(&[2], &[1.0, 1.0]));
        assert_eq!(g.data(), &[1.0, 0.0]);
    }

    #[test]
    fn log_softmax_uniform_and_stable() {
        let r = log_softmax(&t(&[1, 4], &[0.0; 4])).unwrap();
        for &v in r.data() {
            assert!((v + 4f64.ln()).abs() < 1e-15);
        }
        let r = log_softmax(&t(&[1, 2], &[1000.0, 0.0])).unwrap();
        assert!(r.all_finite());
        assert!(r.data()[0].abs() < 1e-12);
        assert!((r.data()[1] + 1000.0).abs() < 1e-9);
    }

    #[test]
    fn nll_rejects_out_of_range_target() {
        let lp = log_softmax(&t(&[1, 3], &[0.0; 3])).unwrap();
        assert!(matches!(nll(&lp, &[3]), Err(Error::Index { index: 3, bound: 3 })));
    }

    #[test]
    fn spatial_rows_layout() {
        // B=1, C=2, H=1, W=2: channel planes [1,2] and [3,4]
        let x = t(&[1, 2, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let r = spatial_rows(&x).unwrap();
        assert_eq!(r.shape(), &[2, 2]);
        assert_eq!(r.data(), &[1.0, 3.0, 2.0, 4.0]);
        assert_eq!(spatial_rows_backward(x.shape(), &r), x);
    }

    #[test]
    fn valid_span_bounds() {
        // pad 1, kernel offset 0: first output reads index -1
        assert_eq!(valid_span(5, 5, -1, 1), (1, 5));
        assert_eq!(valid_span(5, 5, 1, 1), (0, 4));
        assert_eq!(valid_span(3, 6, -1, 2), (1, 3));
    }
}
