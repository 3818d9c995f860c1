//! Bilinear resize, half-pixel source mapping (align_corners = false).
//!
//! Source coordinate for output index i: (i + 0.5) * in/out - 0.5, clamped
//! to the image. Interpolation uses the lerp form v0 + f*(v1 - v0) so a
//! spatially constant input reproduces the constant bit-for-bit, which the
//! enhancement path relies on when it magnifies a 1x1 map.

use crate::tensor::{Elem, Tensor};

/// Precomputed per-axis taps: low index, high index, fraction.
fn axis_taps<T: Elem>(in_e: usize, out_e: usize) -> Vec<(usize, usize, T)> {
    let ratio = in_e as f64 / out_e as f64;
    (0..out_e)
        .map(|i| {
            let src = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (in_e - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_e - 1);
            (lo, hi, T::from_f64(src - lo as f64))
        })
        .collect()
}

pub fn bilinear_resize<T: Elem>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    assert_eq!(x.rank(), 4);
    assert!(oh >= 1 && ow >= 1);
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let ys = axis_taps::<T>(h, oh);
    let xs = axis_taps::<T>(w, ow);
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let src = &xd[plane * h * w..(plane + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            let row0 = &src[y0 * w..(y0 + 1) * w];
            let row1 = &src[y1 * w..(y1 + 1) * w];
            for &(x0, x1, fx) in &xs {
                let top = row0[x0] + fx * (row0[x1] - row0[x0]);
                let bot = row1[x0] + fx * (row1[x1] - row1[x0]);
                out.push(top + fy * (bot - top));
            }
        }
    }
    Tensor::from_vec(&[n, c, oh, ow], out)
}

pub fn bilinear_resize_backward<T: Elem>(x_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (oh, ow) = (dy.shape()[2], dy.shape()[3]);
    let ys = axis_taps::<T>(h, oh);
    let xs = axis_taps::<T>(w, ow);
    let dyd = dy.data();
    let mut dx = vec![T::zero(); n * c * h * w];
    let one = T::one();
    for plane in 0..n * c {
        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
        let src = &dyd[plane * oh * ow..(plane + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let g = src[oy * ow + ox];
                dst[y0 * w + x0] += g * (one - fy) * (one - fx);
                dst[y0 * w + x1] += g * (one - fy) * fx;
                dst[y1 * w + x0] += g * fy * (one - fx);
                dst[y1 * w + x1] += g * fy * fx;
            }
        }
    }
    Tensor::from_vec(x_shape, dx)
}
