//! 2-D convolution and transposed convolution via im2col + GEMM.
//!
//! Weights follow the usual layouts: `[c_out, c_in, kh, kw]` for convolution
//! and `[c_in, c_out, kh, kw]` for transposed convolution.

use crate::error::{Result, TensorError};
use crate::linalg::{gemm, MatRef};
use crate::par;
use crate::tensor::Tensor;

/// Sliding-window geometry over one `channels × in_h × in_w` plane stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        channels: usize,
        in_h: usize,
        in_w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(TensorError::Shape("stride must be positive".into()));
        }
        if in_h + 2 * pad < kh || in_w + 2 * pad < kw {
            return Err(TensorError::Shape(format!(
                "kernel {kh}x{kw} larger than padded input {in_h}x{in_w} (pad {pad})"
            )));
        }
        Ok(Self {
            channels,
            in_h,
            in_w,
            kh,
            kw,
            stride,
            pad,
            out_h: (in_h + 2 * pad - kh) / stride + 1,
            out_w: (in_w + 2 * pad - kw) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Rows of the column matrix: `channels * kh * kw`.
    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    /// Columns of the column matrix: `out_h * out_w`.
    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    #[inline]
    fn source(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }
}

/// Unfolds `input` (`channels × in_h × in_w`) into `col` (`col_rows × col_cols`).
pub fn im2col(input: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let l = g.col_cols();
    for c in 0..g.channels {
        let plane = &input[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * l..(row + 1) * l];
                for oh in 0..g.out_h {
                    let line = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    match g.source(oh, ki, g.in_h) {
                        None => line.fill(0.0),
                        Some(ih) => {
                            let src = &plane[ih * g.in_w..(ih + 1) * g.in_w];
                            for (ow, v) in line.iter_mut().enumerate() {
                                *v = g.source(ow, kj, g.in_w).map_or(0.0, |iw| src[iw]);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `col` back onto `out`, accumulating.
pub fn col2im(col: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let l = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut out[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * l..(row + 1) * l];
                for oh in 0..g.out_h {
                    let Some(ih) = g.source(oh, ki, g.in_h) else {
                        continue;
                    };
                    let dst = &mut plane[ih * g.in_w..(ih + 1) * g.in_w];
                    for ow in 0..g.out_w {
                        if let Some(iw) = g.source(ow, kj, g.in_w) {
                            dst[iw] += src[oh * g.out_w + ow];
                        }
                    }
                }
            }
        }
    }
}

fn check_bias(bias: Option<&Tensor>, channels: usize, op: &str) -> Result<()> {
    match bias {
        Some(b) if b.numel() != channels => Err(TensorError::Shape(format!(
            "{op}: bias has {} entries, expected {channels}",
            b.numel()
        ))),
        _ => Ok(()),
    }
}

fn add_bias(out: &mut [f64], bias: Option<&Tensor>, plane: usize) {
    if let Some(b) = bias {
        for (chunk, &bv) in out.chunks_mut(plane).zip(b.data()) {
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
}

fn bias_grad(gy: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = gy.dims4()?;
    let mut db = vec![0.0; c];
    for s in 0..n {
        for (ch, acc) in db.iter_mut().enumerate() {
            let off = (s * c + ch) * h * w;
            *acc += gy.data()[off..off + h * w].iter().sum::<f64>();
        }
    }
    Tensor::new(vec![c], db)
}

fn conv_geometry(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<ConvGeom> {
    let (_, cin, h, wd) = x.dims4()?;
    let (_, wcin, kh, kw) = w.dims4()?;
    if cin != wcin {
        return Err(TensorError::Shape(format!(
            "conv2d: input has {cin} channels but weight expects {wcin}"
        )));
    }
    ConvGeom::new(cin, h, wd, kh, kw, stride, pad)
}

/// Forward convolution. `x: [n, c_in, h, w]`, `w: [c_out, c_in, kh, kw]`.
pub fn conv2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = conv_geometry(x, w, stride, pad)?;
    let (n, cin, h, wd) = x.dims4()?;
    let cout = w.shape()[0];
    check_bias(bias, cout, "conv2d")?;
    let (k, l) = (g.col_rows(), g.col_cols());
    let mut y = Tensor::zeros(&[n, cout, g.out_h, g.out_w]);
    let in_len = cin * h * wd;
    par::for_each_chunk_mut(y.data_mut(), cout * l, |s, out| {
        let input = &x.data()[s * in_len..(s + 1) * in_len];
        let wm = MatRef::row_major(w.data(), cout, k);
        if g.is_pointwise() {
            gemm(1.0, wm, MatRef::row_major(input, k, l), 0.0, out);
        } else {
            let mut col = vec![0.0; k * l];
            im2col(input, &g, &mut col);
            gemm(1.0, wm, MatRef::row_major(&col, k, l), 0.0, out);
        }
        add_bias(out, bias, l);
    });
    Ok(y)
}

/// Gradients of a convolution (or transposed convolution) layer.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub dx: Option<Tensor>,
    pub dw: Tensor,
    pub db: Tensor,
}

fn sum_in_order(parts: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    let mut acc = vec![0.0; len];
    for p in parts {
        for (a, b) in acc.iter_mut().zip(p) {
            *a += b;
        }
    }
    acc
}

/// Backward pass of [`conv2d`] given the output gradient `gy`.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gy: &Tensor,
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> Result<ConvGrads> {
    let g = conv_geometry(x, w, stride, pad)?;
    let (n, cin, h, wd) = x.dims4()?;
    let cout = w.shape()[0];
    let (k, l) = (g.col_rows(), g.col_cols());
    if gy.shape() != [n, cout, g.out_h, g.out_w] {
        return Err(TensorError::Shape(format!(
            "conv2d backward: gradient shape {:?} does not match output",
            gy.shape()
        )));
    }
    let in_len = cin * h * wd;
    let per_sample = par::map_indices(n, |s| {
        let input = &x.data()[s * in_len..(s + 1) * in_len];
        let gys = &gy.data()[s * cout * l..(s + 1) * cout * l];
        let gm = MatRef::row_major(gys, cout, l);
        let owned_col;
        let col: &[f64] = if g.is_pointwise() {
            input
        } else {
            let mut c = vec![0.0; k * l];
            im2col(input, &g, &mut c);
            owned_col = c;
            &owned_col
        };
        let mut dw = vec![0.0; cout * k];
        gemm(1.0, gm, MatRef::row_major(col, k, l).t(), 0.0, &mut dw);
        let dx = need_dx.then(|| {
            let wm = MatRef::row_major(w.data(), cout, k).t();
            if g.is_pointwise() {
                let mut dx = vec![0.0; in_len];
                gemm(1.0, wm, gm, 0.0, &mut dx);
                dx
            } else {
                let mut dcol = vec![0.0; k * l];
                gemm(1.0, wm, gm, 0.0, &mut dcol);
                let mut dx = vec![0.0; in_len];
                col2im(&dcol, &g, &mut dx);
                dx
            }
        });
        (dw, dx)
    });
    let mut dws = Vec::with_capacity(n);
    let mut dx_all = need_dx.then(|| Vec::with_capacity(n * in_len));
    for (dw, dx) in per_sample {
        dws.push(dw);
        if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
            all.extend(dx);
        }
    }
    Ok(ConvGrads {
        dx: dx_all
            .map(|d| Tensor::new(x.shape().to_vec(), d))
            .transpose()?,
        dw: Tensor::new(w.shape().to_vec(), sum_in_order(dws, cout * k))?,
        db: bias_grad(gy)?,
    })
}

/// Output geometry of a transposed convolution, expressed as the forward
/// convolution it is the adjoint of.
fn transposed_geometry(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<ConvGeom> {
    let (_, cin, hi, wi) = x.dims4()?;
    let (wcin, cout, kh, kw) = w.dims4()?;
    if cin != wcin {
        return Err(TensorError::Shape(format!(
            "conv_transpose2d: input has {cin} channels but weight expects {wcin}"
        )));
    }
    let ho = ((hi - 1) * stride + kh)
        .checked_sub(2 * pad)
        .ok_or_else(|| TensorError::Shape("conv_transpose2d: padding too large".into()))?;
    let wo = ((wi - 1) * stride + kw)
        .checked_sub(2 * pad)
        .ok_or_else(|| TensorError::Shape("conv_transpose2d: padding too large".into()))?;
    let g = ConvGeom::new(cout, ho, wo, kh, kw, stride, pad)?;
    debug_assert_eq!((g.out_h, g.out_w), (hi, wi));
    Ok(g)
}

/// Transposed convolution. `x: [n, c_in, h, w]`, `w: [c_in, c_out, kh, kw]`;
/// output side is `(h - 1) * stride + kh - 2 * pad`.
pub fn conv_transpose2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = transposed_geometry(x, w, stride, pad)?;
    let (n, cin, hi, wi) = x.dims4()?;
    let cout = g.channels;
    check_bias(bias, cout, "conv_transpose2d")?;
    let (k, l) = (g.col_rows(), g.col_cols());
    let out_plane = g.in_h * g.in_w;
    let mut y = Tensor::zeros(&[n, cout, g.in_h, g.in_w]);
    let in_len = cin * hi * wi;
    par::for_each_chunk_mut(y.data_mut(), cout * out_plane, |s, out| {
        let input = &x.data()[s * in_len..(s + 1) * in_len];
        let mut col = vec![0.0; k * l];
        gemm(
            1.0,
            MatRef::row_major(w.data(), cin, k).t(),
            MatRef::row_major(input, cin, l),
            0.0,
            &mut col,
        );
        col2im(&col, &g, out);
        add_bias(out, bias, out_plane);
    });
    Ok(y)
}

/// Backward pass of [`conv_transpose2d`].
pub fn conv_transpose2d_backward(
    x: &Tensor,
    w: &Tensor,
    gy: &Tensor,
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> Result<ConvGrads> {
    let g = transposed_geometry(x, w, stride, pad)?;
    let (n, cin, hi, wi) = x.dims4()?;
    let cout = g.channels;
    let (k, l) = (g.col_rows(), g.col_cols());
    if gy.shape() != [n, cout, g.in_h, g.in_w] {
        return Err(TensorError::Shape(format!(
            "conv_transpose2d backward: gradient shape {:?} does not match output",
            gy.shape()
        )));
    }
    let in_len = cin * hi * wi;
    let out_len = cout * g.in_h * g.in_w;
    let per_sample = par::map_indices(n, |s| {
        let input = &x.data()[s * in_len..(s + 1) * in_len];
        let mut gcol = vec![0.0; k * l];
        im2col(&gy.data()[s * out_len..(s + 1) * out_len], &g, &mut gcol);
        let gc = MatRef::row_major(&gcol, k, l);
        let mut dw = vec![0.0; cin * k];
        gemm(1.0, MatRef::row_major(input, cin, l), gc.t(), 0.0, &mut dw);
        let dx = need_dx.then(|| {
            let mut dx = vec![0.0; in_len];
            gemm(1.0, MatRef::row_major(w.data(), cin, k), gc, 0.0, &mut dx);
            dx
        });
        (dw, dx)
    });
    let mut dws = Vec::with_capacity(n);
    let mut dx_all = need_dx.then(|| Vec::with_capacity(n * in_len));
    for (dw, dx) in per_sample {
        dws.push(dw);
        if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
            all.extend(dx);
        }
    }
    Ok(ConvGrads {
        dx: dx_all
            .map(|d| Tensor::new(x.shape().to_vec(), d))
            .transpose()?,
        dw: Tensor::new(w.shape().to_vec(), sum_in_order(dws, cin * k))?,
        db: bias_grad(gy)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as the reference.
    fn conv_naive(x: &Tensor, w: &Tensor, b: Option<&Tensor>, s: usize, p: usize) -> Tensor {
        let (n, cin, h, wd) = x.dims4().unwrap();
        let (cout, _, kh, kw) = w.dims4().unwrap();
        let ho = (h + 2 * p - kh) / s + 1;
        let wo = (wd + 2 * p - kw) / s + 1;
        let mut y = Tensor::zeros(&[n, cout, ho, wo]);
        for ni in 0..n {
            for co in 0..cout {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = b.map_or(0.0, |b| b.data()[co]);
                        for ci in 0..cin {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let ih = (oh * s + ki) as isize - p as isize;
                                    let iw = (ow * s + kj) as isize - p as isize;
                                    if ih < 0 || iw < 0 || ih >= h as isize || iw >= wd as isize {
                                        continue;
                                    }
                                    acc += x.data()
                                        [((ni * cin + ci) * h + ih as usize) * wd + iw as usize]
                                        * w.data()[((co * cin + ci) * kh + ki) * kw + kj];
                                }
                            }
                        }
                        y.data_mut()[((ni * cout + co) * ho + oh) * wo + ow] = acc;
                    }
                }
            }
        }
        y
    }

    fn pseudo(shape: &[usize], seed: f64) -> Tensor {
        Tensor::from_fn(shape, |i| ((i as f64 + seed) * 0.7134).sin())
    }

    #[test]
    fn conv_matches_naive() {
        for &(s, p, k) in &[(1, 0, 1), (1, 1, 3), (2, 1, 3), (2, 3, 7), (1, 0, 3)] {
            let x = pseudo(&[2, 3, 9, 8], 0.3);
            let w = pseudo(&[4, 3, k, k], 1.7);
            let b = pseudo(&[4], 2.9);
            let y = conv2d(&x, &w, Some(&b), s, p).unwrap();
            let r = conv_naive(&x, &w, Some(&b), s, p);
            assert_eq!(y.shape(), r.shape());
            assert!(y.max_abs_diff(&r).unwrap() < 1e-12, "s={s} p={p} k={k}");
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), gy> = <x, dx> for the linear map x -> conv(x; w)
        let x = pseudo(&[2, 3, 7, 6], 0.1);
        let w = pseudo(&[5, 3, 3, 3], 0.5);
        let gy_shape = conv2d(&x, &w, None, 2, 1).unwrap().shape().to_vec();
        let gy = pseudo(&gy_shape, 3.3);
        let y = conv2d(&x, &w, None, 2, 1).unwrap();
        let grads = conv2d_backward(&x, &w, &gy, 2, 1, true).unwrap();
        let lhs: f64 = y.data().iter().zip(gy.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x
            .data()
            .iter()
            .zip(grads.dx.as_ref().unwrap().data())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
        // same identity for the weight
        let rhs_w: f64 = w.data().iter().zip(grads.dw.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_w).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        // conv_transpose2d(y; w) with w laid out [c_in', c_out'] equals the
        // data-gradient of conv2d with weight [c_out=c_in', c_in=c_out'].
        let w = pseudo(&[4, 2, 4, 4], 0.9);
        let x_small = pseudo(&[1, 4, 5, 5], 0.2);
        let y = conv_transpose2d(&x_small, &w, None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 2, 10, 10]);
        let probe = pseudo(&[1, 2, 10, 10], 4.4);
        let grads = conv2d_backward(&probe, &w, &x_small, 2, 1, true).unwrap();
        assert!(y.max_abs_diff(grads.dx.as_ref().unwrap()).unwrap() < 1e-12);
    }

    #[test]
    fn transposed_backward_is_adjoint() {
        let x = pseudo(&[2, 3, 4, 5], 0.7);
        let w = pseudo(&[3, 2, 4, 4], 1.1);
        let y = conv_transpose2d(&x, &w, None, 2, 1).unwrap();
        let gy = pseudo(y.shape(), 5.0);
        let grads = conv_transpose2d_backward(&x, &w, &gy, 2, 1, true).unwrap();
        let lhs: f64 = y.data().iter().zip(gy.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x
            .data()
            .iter()
            .zip(grads.dx.as_ref().unwrap().data())
            .map(|(a, b)| a * b)
            .sum();
        let rhs_w: f64 = w.data().iter().zip(grads.dw.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
        assert!((lhs - rhs_w).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn channel_mismatch_is_a_shape_error() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(matches!(conv2d(&x, &w, None, 1, 1), Err(TensorError::Shape(_))));
    }
}
