use crate::conv::ConvGeom;
use crate::error::Result;
use crate::par;
use crate::tensor::Tensor;

/// Max pooling over `k × k` windows. Returns the pooled tensor and, for each
/// output element, the flat in-plane index of the winning input element.
/// Ties go to the first element in scan order; padding never wins.
pub fn max_pool2d(x: &Tensor, k: usize, stride: usize, pad: usize) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    let g = ConvGeom::new(1, h, w, k, k, stride, pad)?;
    let plane_out = g.out_h * g.out_w;
    let mut y = Tensor::zeros(&[n, c, g.out_h, g.out_w]);
    let mut arg = vec![0.0; n * c * plane_out];
    par::for_each_chunk_pair_mut(y.data_mut(), plane_out, &mut arg, plane_out, |p, out, idx| {
        let plane = &x.data()[p * h * w..(p + 1) * h * w];
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = usize::MAX;
                for ki in 0..k {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for kj in 0..k {
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        let i = ih as usize * w + iw as usize;
                        if best_i == usize::MAX || plane[i] > best {
                            best = plane[i];
                            best_i = i;
                        }
                    }
                }
                out[oh * g.out_w + ow] = best;
                idx[oh * g.out_w + ow] = best_i as f64;
            }
        }
    });
    Ok((y, arg.into_iter().map(|v| v as usize).collect()))
}

/// Routes each output gradient to its argmax input.
pub fn max_pool2d_backward(gy: &Tensor, argmax: &[usize], in_h: usize, in_w: usize) -> Result<Tensor> {
    let (n, c, oh, ow) = gy.dims4()?;
    let plane_out = oh * ow;
    let mut dx = Tensor::zeros(&[n, c, in_h, in_w]);
    par::for_each_chunk_mut(dx.data_mut(), in_h * in_w, |p, plane| {
        let g = &gy.data()[p * plane_out..(p + 1) * plane_out];
        let a = &argmax[p * plane_out..(p + 1) * plane_out];
        for (&gv, &i) in g.iter().zip(a) {
            plane[i] += gv;
        }
    });
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pools_three_by_three_stride_two() {
        let x = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64);
        let (y, arg) = max_pool2d(&x, 3, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);
        assert_eq!(arg, vec![5, 7, 13, 15]);
        let dx = max_pool2d_backward(&Tensor::full(&[1, 1, 2, 2], 1.0), &arg, 4, 4).unwrap();
        assert_eq!(dx.sum(), 4.0);
        assert_eq!(dx.data()[5], 1.0);
    }
}
