//! Transposed convolution with a 2x2 kernel and stride 2: every input pixel
//! scatters into its own 2x2 output block, so output size is exactly double
//! and no two taps overlap.

use rayon::prelude::*;

use super::{Scalar, Shape4, Tensor4};
use crate::error::{Error, Result};

fn check_kernel<T: Scalar>(x: &Tensor4<T>, k: &Tensor4<T>) -> Result<()> {
    let ks = k.shape();
    if ks.h != 2 || ks.w != 2 || ks.n != x.shape().c {
        return Err(Error::shape(format!(
            "transposed conv kernel must be ({}, out, 2, 2), got {ks}",
            x.shape().c
        )));
    }
    Ok(())
}

/// `k` is laid out `(in_channels, out_channels, 2, 2)`.
pub fn conv_transpose2_forward<T: Scalar>(x: &Tensor4<T>, k: &Tensor4<T>) -> Result<Tensor4<T>> {
    check_kernel(x, k)?;
    let xs = x.shape();
    let oc = k.shape().c;
    let os = Shape4::new(xs.n, oc, 2 * xs.h, 2 * xs.w);
    let mut out = Tensor4::zeros(os);
    let kd = k.data();
    out.data_mut().par_chunks_mut(os.plane().max(1)).enumerate().for_each(|(idx, dst)| {
        let (b, o) = (idx / oc, idx % oc);
        for c in 0..xs.c {
            let src = x.plane(b, c);
            let tap = &kd[(c * oc + o) * 4..][..4];
            for i in 0..xs.h {
                for j in 0..xs.w {
                    let v = src[i * xs.w + j];
                    let base = 2 * i * os.w + 2 * j;
                    dst[base] += v * tap[0];
                    dst[base + 1] += v * tap[1];
                    dst[base + os.w] += v * tap[2];
                    dst[base + os.w + 1] += v * tap[3];
                }
            }
        }
    });
    Ok(out)
}

/// Returns `(grad_x, grad_k)`.
pub fn conv_transpose2_backward<T: Scalar>(
    x: &Tensor4<T>,
    k: &Tensor4<T>,
    upstream: &Tensor4<T>,
) -> Result<(Tensor4<T>, Tensor4<T>)> {
    check_kernel(x, k)?;
    let xs = x.shape();
    let oc = k.shape().c;
    let os = Shape4::new(xs.n, oc, 2 * xs.h, 2 * xs.w);
    upstream.expect_shape(os, "transposed conv upstream")?;
    let kd = k.data();

    let mut gx = Tensor4::zeros(xs);
    gx.data_mut().par_chunks_mut(xs.plane().max(1)).enumerate().for_each(|(idx, dst)| {
        let (b, c) = (idx / xs.c, idx % xs.c);
        for o in 0..oc {
            let up = upstream.plane(b, o);
            let tap = &kd[(c * oc + o) * 4..][..4];
            for i in 0..xs.h {
                for j in 0..xs.w {
                    let base = 2 * i * os.w + 2 * j;
                    dst[i * xs.w + j] += up[base] * tap[0]
                        + up[base + 1] * tap[1]
                        + up[base + os.w] * tap[2]
                        + up[base + os.w + 1] * tap[3];
                }
            }
        }
    });

    let mut gk = Tensor4::zeros(k.shape());
    gk.data_mut().par_chunks_mut(oc * 4).enumerate().for_each(|(c, dst)| {
        for o in 0..oc {
            let mut acc = [T::zero(); 4];
            for b in 0..xs.n {
                let src = x.plane(b, c);
                let up = upstream.plane(b, o);
                for i in 0..xs.h {
                    for j in 0..xs.w {
                        let v = src[i * xs.w + j];
                        let base = 2 * i * os.w + 2 * j;
                        acc[0] += v * up[base];
                        acc[1] += v * up[base + 1];
                        acc[2] += v * up[base + os.w];
                        acc[3] += v * up[base + os.w + 1];
                    }
                }
            }
            dst[o * 4..o * 4 + 4].copy_from_slice(&acc);
        }
    });
    Ok((gx, gk))
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::*;

    #[test]
    fn single_tap_scatter() {
        let x = Tensor4::from_vec(Shape4::new(1, 1, 1, 1), vec![2.0]).unwrap();
        let k = Tensor4::from_vec(Shape4::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = conv_transpose2_forward(&x, &k).unwrap();
        assert_eq!(y.shape(), Shape4::new(1, 1, 2, 2));
        assert_eq!(y.data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn zero_kernel() {
        let x = random(Shape4::new(1, 2, 3, 3), 1);
        let y = conv_transpose2_forward(&x, &Tensor4::zeros(Shape4::new(2, 3, 2, 2))).unwrap();
        assert_eq!(y.shape(), Shape4::new(1, 3, 6, 6));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_scatter_oracle() {
        let x = random(Shape4::new(2, 3, 3, 4), 2);
        let k = random(Shape4::new(3, 2, 2, 2), 3);
        let y = conv_transpose2_forward(&x, &k).unwrap();
        let mut oracle = Tensor4::<f64>::zeros(Shape4::new(2, 2, 6, 8));
        for b in 0..2 {
            for c in 0..3 {
                for i in 0..3 {
                    for j in 0..4 {
                        for o in 0..2 {
                            for u in 0..2 {
                                for v in 0..2 {
                                    let cur = oracle.get(b, o, 2 * i + u, 2 * j + v);
                                    oracle.set(b, o, 2 * i + u, 2 * j + v, cur + x.get(b, c, i, j) * k.get(c, o, u, v));
                                }
                            }
                        }
                    }
                }
            }
        }
        for (a, b) in y.data().iter().zip(oracle.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_upstream() {
        let x = random(Shape4::new(1, 2, 2, 2), 4);
        let k = random(Shape4::new(2, 3, 2, 2), 5);
        let (gx, gk) = conv_transpose2_backward(&x, &k, &Tensor4::zeros(Shape4::new(1, 3, 4, 4))).unwrap();
        assert!(gx.data().iter().chain(gk.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x = random(Shape4::new(2, 2, 3, 3), 6);
        let k = random(Shape4::new(2, 3, 2, 2), 7);
        let y = conv_transpose2_forward(&x, &k).unwrap();
        let (gx, gk) = conv_transpose2_backward(&x, &k, &y).unwrap();
        let nx = numeric_grad(&x, 1e-5, |xp| half_sq(&conv_transpose2_forward(xp, &k).unwrap()));
        let nk = numeric_grad(&k, 1e-5, |kp| half_sq(&conv_transpose2_forward(&x, kp).unwrap()));
        assert!(max_rel_err(gx.data(), &nx) < 1e-6);
        assert!(max_rel_err(gk.data(), &nk) < 1e-6);
    }

    #[test]
    fn adjoint_identity() {
        let x = random(Shape4::new(2, 3, 4, 5), 8);
        let k = random(Shape4::new(3, 4, 2, 2), 9);
        let u = random(Shape4::new(2, 4, 8, 10), 10);
        let lhs = conv_transpose2_forward(&x, &k).unwrap().dot(&u);
        let (gx, _) = conv_transpose2_backward(&x, &k, &u).unwrap();
        assert!((lhs - x.dot(&gx)).abs() < 1e-12 * lhs.abs().max(1.0));

        // grad_x is the stride-2 2x2 correlation of the upstream with the kernel
        for b in 0..2 {
            for c in 0..3 {
                for i in 0..4 {
                    for j in 0..5 {
                        let mut acc = 0.0;
                        for o in 0..4 {
                            for p in 0..2 {
                                for q in 0..2 {
                                    acc += u.get(b, o, 2 * i + p, 2 * j + q) * k.get(c, o, p, q);
                                }
                            }
                        }
                        assert!((gx.get(b, c, i, j) - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn kernel_shape_checked() {
        let x = random(Shape4::new(1, 2, 2, 2), 11);
        assert!(conv_transpose2_forward(&x, &Tensor4::zeros(Shape4::new(3, 1, 2, 2))).is_err());
        assert!(conv_transpose2_forward(&x, &Tensor4::zeros(Shape4::new(2, 1, 3, 3))).is_err());
    }
}
