//! 2-d convolution (cross-correlation) with stride, zero padding and
//! dilation.
//!
//! Two independent forward paths exist on purpose: `conv2d_direct` is the
//! obvious seven-loop form used as a reference, `conv2d_im2col` is the
//! production path (patch matrix times weight matrix). They must agree to
//! float tolerance on every input; a test pins that.
//!
//! Layouts: input `[N, C, H, W]`, weight `[Cout, Cin, KH, KW]`, output
//! `[N, Cout, OH, OW]`, all row-major.

use crate::error::{Error, Result};
use crate::nn::gemm::{gemm_nn, gemm_nt, gemm_tn};
use crate::tensor::{Elem, Tensor};

/// Stride, per-axis zero padding and dilation for one convolution.
/// Strides and dilations are symmetric; pads are per-axis so 1x5 / 5x1
/// kernels can stay resolution-preserving.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub dil: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, pad: usize, dil: usize) -> Self {
        ConvSpec {
            stride,
            pad_h: pad,
            pad_w: pad,
            dil,
        }
    }

    pub fn with_pads(stride: usize, pad_h: usize, pad_w: usize, dil: usize) -> Self {
        ConvSpec {
            stride,
            pad_h,
            pad_w,
            dil,
        }
    }

    /// Output extent along one axis:
    /// floor((in + 2*pad - dil*(k-1) - 1) / stride) + 1.
    pub fn out_extent(&self, in_e: usize, k: usize, pad: usize) -> Result<usize> {
        assert!(self.stride >= 1 && self.dil >= 1 && k >= 1);
        let span = self.dil * (k - 1) + 1;
        let padded = in_e + 2 * pad;
        if padded < span {
            return Err(Error::shape(format!(
                "conv span {span} (k={k}, dil={}) exceeds padded extent {padded}",
                self.dil
            )));
        }
        Ok((padded - span) / self.stride + 1)
    }

    pub fn out_hw(&self, in_hw: (usize, usize), k_hw: (usize, usize)) -> Result<(usize, usize)> {
        Ok((
            self.out_extent(in_hw.0, k_hw.0, self.pad_h)?,
            self.out_extent(in_hw.1, k_hw.1, self.pad_w)?,
        ))
    }

    /// True when output resolution equals input resolution, the invariant
    /// required of every in-block branch convolution.
    pub fn preserves_resolution(&self, in_hw: (usize, usize), k_hw: (usize, usize)) -> bool {
        matches!(self.out_hw(in_hw, k_hw), Ok(out) if out == in_hw)
    }

    fn is_pointwise(&self, kh: usize, kw: usize) -> bool {
        kh == 1 && kw == 1 && self.stride == 1 && self.pad_h == 0 && self.pad_w == 0
    }
}

fn shapes<T: Elem>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: ConvSpec,
) -> (
    usize,
    usize,
    usize,
    usize,
    usize,
    usize,
    usize,
    usize,
    usize,
) {
    assert_eq!(
        x.rank(),
        4,
        "conv input must be [N,C,H,W], got {:?}",
        x.shape()
    );
    assert_eq!(
        w.rank(),
        4,
        "conv weight must be [Cout,Cin,KH,KW], got {:?}",
        w.shape()
    );
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, cin, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(c, cin, "conv input has {c} channels, weight expects {cin}");
    let (oh, ow) = spec
        .out_hw((h, wd), (kh, kw))
        .unwrap_or_else(|e| panic!("conv shape invalid: {e}"));
    (n, c, h, wd, cout, kh, kw, oh, ow)
}

/// Reference path: straight loops over every output element.
pub fn conv2d_direct<T: Elem>(x: &Tensor<T>, w: &Tensor<T>, spec: ConvSpec) -> Tensor<T> {
    let (n, c, h, wd, cout, kh, kw, oh, ow) = shapes(x, w, spec);
    let xd = x.data();
    let wdat = w.data();
    let mut out = vec![T::zero(); n * cout * oh * ow];
    for ni in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for ci in 0..c {
                        for ky in 0..kh {
                            let iy =
                                (oy * spec.stride + ky * spec.dil) as isize - spec.pad_h as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * spec.stride + kx * spec.dil) as isize
                                    - spec.pad_w as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let xi = ((ni * c + ci) * h + iy as usize) * wd + ix as usize;
                                let wi = ((co * c + ci) * kh + ky) * kw + kx;
                                acc += xd[xi] * wdat[wi];
                            }
                        }
                    }
                    out[((ni * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::from_vec(&[n, cout, oh, ow], out)
}

/// Fills `cols` (shape `[C*KH*KW, OH*OW]`) with the patches of one sample.
/// Out-of-image taps become zero.
fn im2col<T: Elem>(
    x_n: &[T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    spec: ConvSpec,
    (oh, ow): (usize, usize),
    cols: &mut [T],
) {
    debug_assert_eq!(cols.len(), c * kh * kw * oh * ow);
    let ohw = oh * ow;
    for ci in 0..c {
        let plane = &x_n[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &mut cols[((ci * kh + ky) * kw + kx) * ohw..][..ohw];
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ky * spec.dil) as isize - spec.pad_h as isize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * spec.stride + kx * spec.dil) as isize - spec.pad_w as isize;
                        *d = if ix < 0 || ix >= w as isize {
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

/// Scatters a patch-matrix gradient back onto one sample, accumulating.
fn col2im<T: Elem>(
    cols: &[T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    spec: ConvSpec,
    (oh, ow): (usize, usize),
    dx_n: &mut [T],
) {
    let ohw = oh * ow;
    for ci in 0..c {
        let plane = &mut dx_n[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &cols[((ci * kh + ky) * kw + kx) * ohw..][..ohw];
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ky * spec.dil) as isize - spec.pad_h as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &row[oy * ow..(oy + 1) * ow];
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &g) in src.iter().enumerate() {
                        let ix = (ox * spec.stride + kx * spec.dil) as isize - spec.pad_w as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

/// Production path: per sample, `out = W_mat[Cout, C*KH*KW] * cols`.
/// Pointwise 1x1/stride-1 convolutions skip the patch copy because the
/// input already has the `[C, H*W]` layout.
pub fn conv2d_im2col<T: Elem>(x: &Tensor<T>, w: &Tensor<T>, spec: ConvSpec) -> Tensor<T> {
    let (n, c, h, wd, cout, kh, kw, oh, ow) = shapes(x, w, spec);
    let ohw = oh * ow;
    let ckk = c * kh * kw;
    let xd = x.data();
    let wdat = w.data();
    let mut out = vec![T::zero(); n * cout * ohw];
    let pointwise = spec.is_pointwise(kh, kw);
    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); ckk * ohw]
    };
    for ni in 0..n {
        let x_n = &xd[ni * c * h * wd..(ni + 1) * c * h * wd];
        let out_n = &mut out[ni * cout * ohw..(ni + 1) * cout * ohw];
        if pointwise {
            gemm_nn(out_n, wdat, x_n, cout, ckk, ohw);
        } else {
            im2col(x_n, (c, h, wd), (kh, kw), spec, (oh, ow), &mut cols);
            gemm_nn(out_n, wdat, &cols, cout, ckk, ohw);
        }
    }
    Tensor::from_vec(&[n, cout, oh, ow], out)
}

/// Gradients of the convolution: `dW = sum_n dY_n * cols_n^T` and
/// `dX_n = col2im(W^T * dY_n)`. Patch matrices are recomputed rather than
/// cached; im2col is cheap next to the matrix products and caching one per
/// layer would dominate memory.
pub fn conv2d_backward<T: Elem>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: ConvSpec,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (n, c, h, wd, cout, kh, kw, oh, ow) = shapes(x, w, spec);
    assert_eq!(dy.shape(), &[n, cout, oh, ow], "conv grad shape mismatch");
    let ohw = oh * ow;
    let ckk = c * kh * kw;
    let xd = x.data();
    let wdat = w.data();
    let dyd = dy.data();
    let mut dx = vec![T::zero(); xd.len()];
    let mut dw = vec![T::zero(); wdat.len()];
    let pointwise = spec.is_pointwise(kh, kw);
    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); ckk * ohw]
    };
    let mut dcols = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); ckk * ohw]
    };
    for ni in 0..n {
        let x_n = &xd[ni * c * h * wd..(ni + 1) * c * h * wd];
        let dy_n = &dyd[ni * cout * ohw..(ni + 1) * cout * ohw];
        let dx_n = &mut dx[ni * c * h * wd..(ni + 1) * c * h * wd];
        if pointwise {
            gemm_nt(&mut dw, dy_n, x_n, cout, ohw, ckk);
            gemm_tn(dx_n, wdat, dy_n, ckk, cout, ohw);
        } else {
            im2col(x_n, (c, h, wd), (kh, kw), spec, (oh, ow), &mut cols);
            gemm_nt(&mut dw, dy_n, &cols, cout, ohw, ckk);
            dcols.fill(T::zero());
            gemm_tn(&mut dcols, wdat, dy_n, ckk, cout, ohw);
            col2im(&dcols, (c, h, wd), (kh, kw), spec, (oh, ow), dx_n);
        }
    }
    (
        Tensor::from_vec(x.shape(), dx),
        Tensor::from_vec(w.shape(), dw),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn output_extent_law() {
        // (in, k, stride, pad, dil) -> out
        let cases = [
            (32, 3, 1, 1, 1, 32),
            (32, 3, 2, 1, 1, 16),
            (224, 7, 2, 3, 1, 112),
            (32, 3, 1, 2, 2, 32), // dilated 3x3, pad 2 keeps resolution
            (32, 3, 1, 3, 3, 32), // dilation 3, pad 3
            (8, 5, 1, 2, 1, 8),
            (1, 1, 1, 0, 1, 1),
            (7, 3, 2, 1, 1, 4),
        ];
        for (in_e, k, s, p, d, want) in cases {
            let spec = ConvSpec::new(s, p, d);
            assert_eq!(
                spec.out_extent(in_e, k, p).unwrap(),
                want,
                "in={in_e} k={k} s={s} p={p} d={d}"
            );
        }
        // kernel span larger than padded input is an error
        assert!(ConvSpec::new(1, 0, 1).out_extent(2, 3, 0).is_err());
        assert!(ConvSpec::new(1, 0, 2).out_extent(4, 3, 0).is_err());
    }

    #[test]
    fn preserves_resolution_checks() {
        assert!(ConvSpec::new(1, 1, 1).preserves_resolution((32, 32), (3, 3)));
        assert!(ConvSpec::new(1, 2, 2).preserves_resolution((16, 16), (3, 3)));
        assert!(ConvSpec::with_pads(1, 0, 2, 1).preserves_resolution((8, 8), (1, 5)));
        assert!(ConvSpec::with_pads(1, 2, 0, 1).preserves_resolution((8, 8), (5, 1)));
        assert!(!ConvSpec::new(2, 1, 1).preserves_resolution((32, 32), (3, 3)));
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        // 3x3 kernel with a single center 1 is the identity under pad 1
        let mut rng = Rng::new(1);
        let x: Tensor = Tensor::uniform(&[1, 1, 5, 5], -1.0, 1.0, &mut rng);
        let mut w = vec![0f32; 9];
        w[4] = 1.0;
        let w = Tensor::from_vec(&[1, 1, 3, 3], w);
        let y = conv2d_direct(&x, &w, ConvSpec::new(1, 1, 1));
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn hand_computed_3x3_valid() {
        // x = 1..9 laid out 3x3, w = all ones 2x2, valid conv (pad 0):
        // windows sum to 12, 16, 24, 28
        let x = Tensor::from_vec(&[1, 1, 3, 3], (1..=9).map(|v| v as f32).collect());
        let w = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0; 4]);
        let y = conv2d_direct(&x, &w, ConvSpec::new(1, 0, 1));
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[12.0, 16.0, 24.0, 28.0]);
    }

    #[test]
    fn dilation_taps_skip_pixels() {
        // 5x5 input of ones, 3x3 dilation-2 kernel of ones, pad 0:
        // single output = sum of 9 taps = 9
        let x: Tensor = Tensor::ones(&[1, 1, 5, 5]);
        let w: Tensor = Tensor::ones(&[1, 1, 3, 3]);
        let y = conv2d_direct(&x, &w, ConvSpec::new(1, 0, 2));
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
        // with a distinguishable center pixel the taps are the corners,
        // edge-midpoints and center of the 5x5
        let mut xd = vec![0f32; 25];
        xd[12] = 1.0; // center
        let x2 = Tensor::from_vec(&[1, 1, 5, 5], xd);
        let y2 = conv2d_direct(&x2, &w, ConvSpec::new(1, 0, 2));
        assert_eq!(y2.data(), &[1.0]);
    }

    fn random_case(
        rng: &mut Rng,
        (n, c, h, w): (usize, usize, usize, usize),
        (cout, kh, kw): (usize, usize, usize),
    ) -> (Tensor<f32>, Tensor<f32>) {
        let x = Tensor::uniform(&[n, c, h, w], -1.0, 1.0, rng);
        let wt = Tensor::uniform(&[cout, c, kh, kw], -0.5, 0.5, rng);
        (x, wt)
    }

    type Im2colCase = (usize, usize, usize, usize, usize, usize, usize, ConvSpec);

    #[test]
    fn im2col_path_matches_direct() {
        let mut rng = Rng::new(2);
        let cases: Vec<Im2colCase> = vec![
            (2, 3, 8, 8, 4, 3, 3, ConvSpec::new(1, 1, 1)),
            (1, 4, 9, 7, 2, 3, 3, ConvSpec::new(2, 1, 1)),
            (2, 2, 8, 8, 3, 3, 3, ConvSpec::new(1, 2, 2)),
            (1, 3, 10, 10, 2, 3, 3, ConvSpec::new(1, 3, 3)),
            (2, 4, 6, 6, 4, 1, 1, ConvSpec::new(1, 0, 1)),
            (1, 2, 6, 6, 3, 1, 5, ConvSpec::with_pads(1, 0, 2, 1)),
            (1, 2, 6, 6, 3, 5, 1, ConvSpec::with_pads(1, 2, 0, 1)),
            (2, 3, 11, 11, 2, 7, 7, ConvSpec::new(2, 3, 1)),
        ];
        for (n, c, h, w, cout, kh, kw, spec) in cases {
            let (x, wt) = random_case(&mut rng, (n, c, h, w), (cout, kh, kw));
            let a = conv2d_direct(&x, &wt, spec);
            let b = conv2d_im2col(&x, &wt, spec);
            assert_eq!(a.shape(), b.shape());
            for (va, vb) in a.data().iter().zip(b.data()) {
                assert!((va - vb).abs() <= 1e-5, "direct {va} vs im2col {vb}");
            }
        }
    }

    /// Central finite differences of sum(dy * conv(x, w)) at f64.
    fn fd_check(spec: ConvSpec, xs: &[usize], ws: &[usize]) {
        let mut rng = Rng::new(5);
        let x: Tensor<f64> = Tensor::uniform(xs, -1.0, 1.0, &mut rng);
        let w: Tensor<f64> = Tensor::uniform(ws, -0.7, 0.7, &mut rng);
        let y = conv2d_im2col(&x, &w, spec);
        let dy: Tensor<f64> = Tensor::uniform(y.shape(), -1.0, 1.0, &mut rng);
        let (dx, dw) = conv2d_backward(&x, &w, spec, &dy);
        let loss = |x: &Tensor<f64>, w: &Tensor<f64>| -> f64 {
            conv2d_im2col(x, w, spec)
                .data()
                .iter()
                .zip(dy.data())
                .map(|(&a, &b)| a * b)
                .sum()
        };
        let eps = 1e-5;
        for i in (0..x.numel()).step_by(7) {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let want = (loss(&xp, &w) - loss(&xm, &w)) / (2.0 * eps);
            let got = dx.data()[i];
            assert!((want - got).abs() < 1e-6, "dx[{i}]: fd {want} got {got}");
        }
        for i in 0..w.numel() {
            let mut wp = w.clone();
            wp.data_mut()[i] += eps;
            let mut wm = w.clone();
            wm.data_mut()[i] -= eps;
            let want = (loss(&x, &wp) - loss(&x, &wm)) / (2.0 * eps);
            let got = dw.data()[i];
            assert!((want - got).abs() < 1e-6, "dw[{i}]: fd {want} got {got}");
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        fd_check(ConvSpec::new(1, 1, 1), &[2, 2, 5, 5], &[3, 2, 3, 3]);
        fd_check(ConvSpec::new(2, 1, 1), &[1, 3, 7, 7], &[2, 3, 3, 3]);
        fd_check(ConvSpec::new(1, 2, 2), &[1, 2, 6, 6], &[2, 2, 3, 3]);
        fd_check(
            ConvSpec::with_pads(1, 0, 2, 1),
            &[1, 2, 4, 6],
            &[2, 2, 1, 5],
        );
        fd_check(ConvSpec::new(1, 0, 1), &[2, 3, 4, 4], &[4, 3, 1, 1]);
    }
}
