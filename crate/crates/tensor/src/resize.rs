//! Bilinear resampling with half-pixel centres (`align_corners = false`).

use crate::error::{Result, TensorError};
use crate::par;
use crate::tensor::Tensor;

/// Per-output-index interpolation taps along one axis.
#[derive(Clone, Debug)]
struct AxisTaps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    w_hi: Vec<f64>,
}

impl AxisTaps {
    fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let mut lo = Vec::with_capacity(output);
        let mut hi = Vec::with_capacity(output);
        let mut w_hi = Vec::with_capacity(output);
        for o in 0..output {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            lo.push(i0);
            hi.push(i1);
            w_hi.push(if i1 == i0 { 0.0 } else { src - i0 as f64 });
        }
        Self { lo, hi, w_hi }
    }
}

fn taps(x: &Tensor, out_h: usize, out_w: usize) -> Result<(AxisTaps, AxisTaps)> {
    let (_, _, h, w) = x.dims4()?;
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(TensorError::Shape("resize: empty spatial extent".into()));
    }
    Ok((AxisTaps::new(h, out_h), AxisTaps::new(w, out_w)))
}

/// Resizes every plane of an NCHW tensor to `out_h × out_w`.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let (ty, tx) = taps(x, out_h, out_w)?;
    let mut y = Tensor::zeros(&[n, c, out_h, out_w]);
    par::for_each_chunk_mut(y.data_mut(), out_h * out_w, |p, out| {
        let plane = &x.data()[p * h * w..(p + 1) * h * w];
        for oy in 0..out_h {
            let (r0, r1, fy) = (ty.lo[oy] * w, ty.hi[oy] * w, ty.w_hi[oy]);
            for ox in 0..out_w {
                let (c0, c1, fx) = (tx.lo[ox], tx.hi[ox], tx.w_hi[ox]);
                let top = plane[r0 + c0] * (1.0 - fx) + plane[r0 + c1] * fx;
                let bot = plane[r1 + c0] * (1.0 - fx) + plane[r1 + c1] * fx;
                out[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    });
    Ok(y)
}

/// Adjoint of [`resize_bilinear`]: maps an output gradient back to `in_h × in_w`.
pub fn resize_bilinear_backward(gy: &Tensor, in_h: usize, in_w: usize) -> Result<Tensor> {
    let (n, c, out_h, out_w) = gy.dims4()?;
    if (in_h, in_w) == (out_h, out_w) {
        return Ok(gy.clone());
    }
    let probe = Tensor::zeros(&[1, 1, in_h, in_w]);
    let (ty, tx) = taps(&probe, out_h, out_w)?;
    let mut dx = Tensor::zeros(&[n, c, in_h, in_w]);
    par::for_each_chunk_mut(dx.data_mut(), in_h * in_w, |p, plane| {
        let g = &gy.data()[p * out_h * out_w..(p + 1) * out_h * out_w];
        for oy in 0..out_h {
            let (r0, r1, fy) = (ty.lo[oy] * in_w, ty.hi[oy] * in_w, ty.w_hi[oy]);
            for ox in 0..out_w {
                let (c0, c1, fx) = (tx.lo[ox], tx.hi[ox], tx.w_hi[ox]);
                let v = g[oy * out_w + ox];
                plane[r0 + c0] += v * (1.0 - fy) * (1.0 - fx);
                plane[r0 + c1] += v * (1.0 - fy) * fx;
                plane[r1 + c0] += v * fy * (1.0 - fx);
                plane[r1 + c1] += v * fy * fx;
            }
        }
    });
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_is_identity() {
        let x = Tensor::from_fn(&[1, 2, 3, 4], |i| i as f64);
        assert_eq!(resize_bilinear(&x, 3, 4).unwrap(), x);
    }

    #[test]
    fn constant_planes_stay_constant() {
        let x = Tensor::full(&[2, 1, 4, 4], 0.375);
        let y = resize_bilinear(&x, 16, 16).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.375).abs() < 1e-15));
    }

    #[test]
    fn upsample_two_by_two_matches_half_pixel_rule() {
        // 1x2 -> 1x4: sources at -0.25, 0.25, 0.75, 1.25 -> clamp/interp
        let x = Tensor::new(vec![1, 1, 1, 2], vec![0.0, 4.0]).unwrap();
        let y = resize_bilinear(&x, 1, 4).unwrap();
        assert_eq!(y.data(), &[0.0, 1.0, 3.0, 4.0]);
    }

    #[test]
    fn backward_is_adjoint() {
        let x = Tensor::from_fn(&[2, 3, 5, 4], |i| (i as f64 * 0.31).sin());
        let y = resize_bilinear(&x, 13, 9).unwrap();
        let gy = Tensor::from_fn(y.shape(), |i| (i as f64 * 0.17).cos());
        let dx = resize_bilinear_backward(&gy, 5, 4).unwrap();
        let lhs: f64 = y.data().iter().zip(gy.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
