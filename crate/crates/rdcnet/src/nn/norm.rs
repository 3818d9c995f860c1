//! Batch normalization kernels.
//!
//! Train mode normalizes with the biased batch variance (divide by n) and
//! reports the unbiased variance (divide by n-1) for the running-average
//! update, matching the convention every mainstream framework uses. Eval
//! mode needs no kernel here: it folds the running stats into a per-channel
//! affine (`bn_eval_affine`) that the caller applies with elementwise ops.

use crate::error::{Error, Result};
use crate::tensor::{Elem, Tensor};

pub struct BnTrainOut<T> {
    pub y: Tensor<T>,
    /// Per-channel batch mean, saved for the backward pass.
    pub mean: Vec<T>,
    /// Per-channel 1/sqrt(var_biased + eps), saved for the backward pass.
    pub inv_std: Vec<T>,
    /// Per-channel unbiased variance for the running-stat update.
    pub var_unbiased: Vec<T>,
}

/// Normalizes `[N,C,H,W]` per channel over the N, H, W axes and applies
/// `gamma`, `beta`. Needs at least two values per channel (`N*H*W >= 2`),
/// otherwise the variance is degenerate and training would silently feed
/// on noise; that is a contract error, not a NaN.
pub fn bn_train_forward<T: Elem>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> Result<BnTrainOut<T>> {
    assert_eq!(x.rank(), 4, "batch norm input must be [N,C,H,W]");
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    assert_eq!(gamma.len(), c);
    assert_eq!(beta.len(), c);
    let m = n * h * w;
    if m < 2 {
        return Err(Error::contract(format!(
            "batch norm in train mode needs N*H*W >= 2 values per channel, got {m}"
        )));
    }
    let xd = x.data();
    let inv_m = T::from_f64(1.0 / m as f64);
    let hw = h * w;
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ni in 0..n {
        for ci in 0..c {
            let plane = &xd[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
            let mut s = T::zero();
            for &v in plane {
                s += v;
            }
            mean[ci] += s;
        }
    }
    for mu in &mut mean {
        *mu *= inv_m;
    }
    for ni in 0..n {
        for ci in 0..c {
            let plane = &xd[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
            let mu = mean[ci];
            let mut s = T::zero();
            for &v in plane {
                let d = v - mu;
                s += d * d;
            }
            var[ci] += s;
        }
    }
    let mut inv_std = vec![T::zero(); c];
    let mut var_unbiased = vec![T::zero(); c];
    for ci in 0..c {
        let biased = var[ci] * inv_m;
        var_unbiased[ci] = var[ci] * T::from_f64(1.0 / (m - 1) as f64);
        inv_std[ci] = (biased + T::from_f64(eps)).sqrt().recip();
    }
    let mut y = vec![T::zero(); xd.len()];
    for ni in 0..n {
        for ci in 0..c {
            let off = (ni * c + ci) * hw;
            let (mu, is, g, b) = (mean[ci], inv_std[ci], gamma[ci], beta[ci]);
            for i in 0..hw {
                y[off + i] = (xd[off + i] - mu) * is * g + b;
            }
        }
    }
    Ok(BnTrainOut {
        y: Tensor::from_vec(x.shape(), y),
        mean,
        inv_std,
        var_unbiased,
    })
}

/// Gradients through train-mode normalization. With xhat = (x-mu)*inv_std
/// and m = N*H*W:
///   dgamma_c = sum(dy * xhat), dbeta_c = sum(dy),
///   dx = gamma*inv_std/m * (m*dy - dbeta - xhat*dgamma).
pub fn bn_train_backward<T: Elem>(
    x: &Tensor<T>,
    gamma: &[T],
    mean: &[T],
    inv_std: &[T],
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let hw = h * w;
    let m = n * hw;
    let xd = x.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ni in 0..n {
        for ci in 0..c {
            let off = (ni * c + ci) * hw;
            let (mu, is) = (mean[ci], inv_std[ci]);
            let mut dg = T::zero();
            let mut db = T::zero();
            for i in 0..hw {
                let xhat = (xd[off + i] - mu) * is;
                dg += dy[off + i] * xhat;
                db += dy[off + i];
            }
            dgamma[ci] += dg;
            dbeta[ci] += db;
        }
    }
    let mut dx = vec![T::zero(); xd.len()];
    let m_t = T::from_f64(m as f64);
    let inv_m = T::from_f64(1.0 / m as f64);
    for ni in 0..n {
        for ci in 0..c {
            let off = (ni * c + ci) * hw;
            let (mu, is) = (mean[ci], inv_std[ci]);
            let k = gamma[ci] * is * inv_m;
            for i in 0..hw {
                let xhat = (xd[off + i] - mu) * is;
                dx[off + i] = k * (m_t * dy[off + i] - dbeta[ci] - xhat * dgamma[ci]);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Folds eval-mode batch norm into `y = x*scale + shift` per channel.
pub fn bn_eval_affine<T: Elem>(
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: f64,
) -> (Vec<T>, Vec<T>) {
    let c = gamma.len();
    let mut scale = vec![T::zero(); c];
    let mut shift = vec![T::zero(); c];
    for ci in 0..c {
        let s = gamma[ci] * (running_var[ci] + T::from_f64(eps)).sqrt().recip();
        scale[ci] = s;
        shift[ci] = beta[ci] - running_mean[ci] * s;
    }
    (scale, shift)
}
