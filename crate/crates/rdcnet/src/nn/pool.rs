//! Pooling kernels: average (no padding), max (zero-padded window
//! positions are simply absent from the max), and global average.

use crate::tensor::{Elem, Tensor};

fn pool_extent(in_e: usize, k: usize, s: usize, p: usize) -> usize {
    let padded = in_e + 2 * p;
    assert!(
        padded >= k,
        "pool window {k} exceeds padded extent {padded}"
    );
    (padded - k) / s + 1
}

/// Average pool, window `k`, stride `s`, no padding.
pub fn avg_pool<T: Elem>(x: &Tensor<T>, k: usize, s: usize) -> Tensor<T> {
    assert_eq!(x.rank(), 4);
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = (pool_extent(h, k, s, 0), pool_extent(w, k, s, 0));
    let inv = T::from_f64(1.0 / (k * k) as f64);
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let src = &xd[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for ky in 0..k {
                    let row = &src[(oy * s + ky) * w..];
                    for kx in 0..k {
                        acc += row[ox * s + kx];
                    }
                }
                out.push(acc * inv);
            }
        }
    }
    Tensor::from_vec(&[n, c, oh, ow], out)
}

pub fn avg_pool_backward<T: Elem>(
    x_shape: &[usize],
    k: usize,
    s: usize,
    dy: &Tensor<T>,
) -> Tensor<T> {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (oh, ow) = (dy.shape()[2], dy.shape()[3]);
    let inv = T::from_f64(1.0 / (k * k) as f64);
    let dyd = dy.data();
    let mut dx = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
        let src = &dyd[plane * oh * ow..(plane + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = src[oy * ow + ox] * inv;
                for ky in 0..k {
                    let row = &mut dst[(oy * s + ky) * w..];
                    for kx in 0..k {
                        row[ox * s + kx] += g;
                    }
                }
            }
        }
    }
    Tensor::from_vec(x_shape, dx)
}

/// Max pool with zero padding treated as minus infinity: the max is always
/// taken over real pixels. Returns the pooled tensor and, per output
/// element, the flat input index of its source pixel (first hit wins ties,
/// row-major scan order).
pub fn max_pool<T: Elem>(x: &Tensor<T>, k: usize, s: usize, p: usize) -> (Tensor<T>, Vec<usize>) {
    assert_eq!(x.rank(), 4);
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = (pool_extent(h, k, s, p), pool_extent(w, k, s, p));
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        let src = &xd[base..base + h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best: Option<(T, usize)> = None;
                for ky in 0..k {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = iy as usize * w + ix as usize;
                        let v = src[idx];
                        if best.is_none_or(|(bv, _)| v > bv) {
                            best = Some((v, idx));
                        }
                    }
                }
                let (v, idx) = best.expect("max pool window fully outside input");
                out.push(v);
                arg.push(base + idx);
            }
        }
    }
    (Tensor::from_vec(&[n, c, oh, ow], out), arg)
}

pub fn max_pool_backward<T: Elem>(x_len: usize, argmax: &[usize], dy: &[T]) -> Vec<T> {
    debug_assert_eq!(argmax.len(), dy.len());
    let mut dx = vec![T::zero(); x_len];
    for (&idx, &g) in argmax.iter().zip(dy) {
        dx[idx] += g;
    }
    dx
}

/// `[N,C,H,W] -> [N,C,1,1]` mean over the spatial plane.
pub fn global_avg_pool<T: Elem>(x: &Tensor<T>) -> Tensor<T> {
    assert_eq!(x.rank(), 4);
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let inv = T::from_f64(1.0 / (h * w) as f64);
    let out = x
        .data()
        .chunks_exact(h * w)
        .map(|plane| plane.iter().fold(T::zero(), |a, &v| a + v) * inv)
        .collect();
    Tensor::from_vec(&[n, c, 1, 1], out)
}

pub fn global_avg_pool_backward<T: Elem>(x_shape: &[usize], dy: &[T]) -> Vec<T> {
    let (h, w) = (x_shape[2], x_shape[3]);
    let inv = T::from_f64(1.0 / (h * w) as f64);
    let mut dx = Vec::with_capacity(x_shape.iter().product());
    for &g in dy {
        let spread = g * inv;
        dx.extend(std::iter::repeat_n(spread, h * w));
    }
    dx
}
