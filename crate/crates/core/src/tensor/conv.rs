use rayon::prelude::*;

use super::{Scalar, Shape4, Tensor4};
use crate::error::{Error, Result};

/// Square convolution kernel with odd spatial size and 'same' zero padding.
///
/// `weight` is laid out `(out_channels, in_channels, k, k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel<T> {
    pub weight: Tensor4<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ConvKernel<T> {
    pub fn new(weight: Tensor4<T>, bias: Vec<T>) -> Result<Self> {
        let s = weight.shape();
        if s.h != s.w || s.h % 2 == 0 {
            return Err(Error::shape(format!("kernel must be square with odd size, got {s}")));
        }
        if bias.len() != s.n {
            return Err(Error::shape(format!("bias has {} entries for {} outputs", bias.len(), s.n)));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(out_channels: usize, in_channels: usize, size: usize) -> Self {
        Self {
            weight: Tensor4::zeros(Shape4::new(out_channels, in_channels, size, size)),
            bias: vec![T::zero(); out_channels],
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().c
    }

    pub fn size(&self) -> usize {
        self.weight.shape().h
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads<T> {
    pub x: Tensor4<T>,
    pub weight: Tensor4<T>,
    pub bias: Vec<T>,
}

/// Column range `[lo, hi)` of output positions whose tap at offset `d`
/// (already shifted by `-pad`) stays inside a row of length `len`.
#[inline]
fn valid_range(len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d).clamp(0, len as isize) as usize;
    (lo, hi.max(lo))
}

pub fn conv2d_forward<T: Scalar>(x: &Tensor4<T>, k: &ConvKernel<T>) -> Result<Tensor4<T>> {
    let xs = x.shape();
    if xs.c != k.in_channels() {
        return Err(Error::shape(format!(
            "conv input has {} channels, kernel expects {}",
            xs.c,
            k.in_channels()
        )));
    }
    let (h, w) = (xs.h, xs.w);
    let ks = k.size();
    let pad = (ks / 2) as isize;
    let outs = Shape4::new(xs.n, k.out_channels(), h, w);
    let mut out = Tensor4::zeros(outs);
    let plane = outs.plane();
    let wdata = k.weight.data();

    out.data_mut().par_chunks_mut(plane.max(1)).enumerate().for_each(|(idx, dst)| {
        let (b, o) = (idx / outs.c, idx % outs.c);
        dst.fill(k.bias[o]);
        for c in 0..xs.c {
            let src = x.plane(b, c);
            for u in 0..ks {
                let dy = u as isize - pad;
                let (i0, i1) = valid_range(h, dy);
                for v in 0..ks {
                    let dx = v as isize - pad;
                    let (j0, j1) = valid_range(w, dx);
                    let wt = wdata[((o * xs.c + c) * ks + u) * ks + v];
                    for i in i0..i1 {
                        let si = (i as isize + dy) as usize;
                        let d = &mut dst[i * w + j0..i * w + j1];
                        let s = &src[si * w + (j0 as isize + dx) as usize..][..j1 - j0];
                        for (a, &b) in d.iter_mut().zip(s) {
                            *a += wt * b;
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor4<T>,
    k: &ConvKernel<T>,
    upstream: &Tensor4<T>,
) -> Result<ConvGrads<T>> {
    let xs = x.shape();
    if xs.c != k.in_channels() {
        return Err(Error::shape("conv backward: input/kernel channel mismatch"));
    }
    upstream.expect_shape(Shape4::new(xs.n, k.out_channels(), xs.h, xs.w), "conv upstream")?;
    let (h, w) = (xs.h, xs.w);
    let ks = k.size();
    let pad = (ks / 2) as isize;
    let oc = k.out_channels();

    let bias: Vec<T> = (0..oc)
        .map(|o| (0..xs.n).map(|b| upstream.plane(b, o).iter().copied().sum::<T>()).sum())
        .collect();

    let mut gw = Tensor4::zeros(k.weight.shape());
    let per_out = xs.c * ks * ks;
    gw.data_mut().par_chunks_mut(per_out.max(1)).enumerate().for_each(|(o, dst)| {
        for c in 0..xs.c {
            for u in 0..ks {
                let dy = u as isize - pad;
                let (i0, i1) = valid_range(h, dy);
                for v in 0..ks {
                    let dx = v as isize - pad;
                    let (j0, j1) = valid_range(w, dx);
                    let mut acc = T::zero();
                    for b in 0..xs.n {
                        let up = upstream.plane(b, o);
                        let src = x.plane(b, c);
                        for i in i0..i1 {
                            let si = (i as isize + dy) as usize;
                            let g = &up[i * w + j0..i * w + j1];
                            let s = &src[si * w + (j0 as isize + dx) as usize..][..j1 - j0];
                            for (&a, &b) in g.iter().zip(s) {
                                acc += a * b;
                            }
                        }
                    }
                    dst[(c * ks + u) * ks + v] = acc;
                }
            }
        }
    });

    let mut gx = Tensor4::zeros(xs);
    let wdata = k.weight.data();
    gx.data_mut().par_chunks_mut(xs.plane().max(1)).enumerate().for_each(|(idx, dst)| {
        let (b, c) = (idx / xs.c, idx % xs.c);
        for o in 0..oc {
            let up = upstream.plane(b, o);
            for u in 0..ks {
                let dy = u as isize - pad;
                let (i0, i1) = valid_range(h, dy);
                for v in 0..ks {
                    let dx = v as isize - pad;
                    let (j0, j1) = valid_range(w, dx);
                    let wt = wdata[((o * xs.c + c) * ks + u) * ks + v];
                    for i in i0..i1 {
                        let si = (i as isize + dy) as usize;
                        let g = &up[i * w + j0..i * w + j1];
                        let d = &mut dst[si * w + (j0 as isize + dx) as usize..][..j1 - j0];
                        for (a, &g) in d.iter_mut().zip(g) {
                            *a += wt * g;
                        }
                    }
                }
            }
        }
    });

    Ok(ConvGrads { x: gx, weight: gw, bias })
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::*;

    /// Direct transcription of the same-padding convolution sum.
    fn naive_conv(x: &Tensor4<f64>, k: &ConvKernel<f64>) -> Tensor4<f64> {
        let s = x.shape();
        let ks = k.size() as isize;
        let pad = ks / 2;
        Tensor4::from_fn(Shape4::new(s.n, k.out_channels(), s.h, s.w), |b, o, i, j| {
            let mut acc = k.bias[o];
            for c in 0..s.c {
                for u in 0..ks {
                    for v in 0..ks {
                        let (yi, xj) = (i as isize + u - pad, j as isize + v - pad);
                        if yi >= 0 && xj >= 0 && (yi as usize) < s.h && (xj as usize) < s.w {
                            acc += x.get(b, c, yi as usize, xj as usize)
                                * k.weight.get(o, c, u as usize, v as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    fn random_kernel(out: usize, inp: usize, size: usize, seed: u64) -> ConvKernel<f64> {
        let w = random(Shape4::new(out, inp, size, size), seed);
        let b = random(Shape4::new(1, 1, 1, out), seed + 1).into_vec();
        ConvKernel::new(w, b).unwrap()
    }

    #[test]
    fn zero_input_zero_bias() {
        let x = Tensor4::<f64>::zeros(Shape4::new(1, 2, 5, 5));
        let mut k = random_kernel(3, 2, 3, 1);
        k.bias = vec![0.0; 3];
        assert!(conv2d_forward(&x, &k).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ones_kernel_counts_taps() {
        let x = Tensor4::<f64>::filled(Shape4::new(1, 1, 3, 3), 1.0);
        let k = ConvKernel::new(Tensor4::filled(Shape4::new(1, 1, 3, 3), 1.0), vec![0.0]).unwrap();
        let y = conv2d_forward(&x, &k).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn matches_naive_oracle() {
        let x = random(Shape4::new(2, 3, 8, 8), 10);
        for size in [1, 3] {
            let k = random_kernel(4, 3, size, 20 + size as u64);
            let fast = conv2d_forward(&x, &k).unwrap();
            let slow = naive_conv(&x, &k);
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn non_square_spatial_dims() {
        let x = random(Shape4::new(1, 2, 3, 7), 3);
        let k = random_kernel(2, 2, 3, 4);
        let fast = conv2d_forward(&x, &k).unwrap();
        let slow = naive_conv(&x, &k);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_mismatch() {
        let x = random(Shape4::new(1, 2, 4, 4), 0);
        let k = random_kernel(1, 3, 3, 0);
        assert!(matches!(conv2d_forward(&x, &k), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let x = random(Shape4::new(2, 2, 4, 4), 5);
        let k = random_kernel(3, 2, 3, 6);
        let g = conv2d_backward(&x, &k, &Tensor4::zeros(Shape4::new(2, 3, 4, 4))).unwrap();
        assert!(g.x.data().iter().chain(g.weight.data()).chain(&g.bias).all(|&v| v == 0.0));
    }

    #[test]
    fn bias_grad_is_upstream_sum() {
        let x = random(Shape4::new(2, 2, 4, 5), 7);
        let k = random_kernel(3, 2, 3, 8);
        let up = random(Shape4::new(2, 3, 4, 5), 9);
        let g = conv2d_backward(&x, &k, &up).unwrap();
        for o in 0..3 {
            let mut direct = 0.0;
            for b in 0..2 {
                for i in 0..4 {
                    for j in 0..5 {
                        direct += up.get(b, o, i, j);
                    }
                }
            }
            assert!((g.bias[o] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x = random(Shape4::new(2, 2, 5, 4), 11);
        let k = random_kernel(3, 2, 3, 12);
        let y = conv2d_forward(&x, &k).unwrap();
        let g = conv2d_backward(&x, &k, &y).unwrap();

        let num_x = numeric_grad(&x, 1e-5, |xp| half_sq(&conv2d_forward(xp, &k).unwrap()));
        assert!(max_rel_err(g.x.data(), &num_x) < 1e-6);

        let num_w = numeric_grad(&k.weight, 1e-5, |wp| {
            let kp = ConvKernel::new(wp.clone(), k.bias.clone()).unwrap();
            half_sq(&conv2d_forward(&x, &kp).unwrap())
        });
        assert!(max_rel_err(g.weight.data(), &num_w) < 1e-6);

        let bias_t = Tensor4::from_vec(Shape4::new(1, 1, 1, 3), k.bias.clone()).unwrap();
        let num_b = numeric_grad(&bias_t, 1e-5, |bp| {
            let kp = ConvKernel::new(k.weight.clone(), bp.data().to_vec()).unwrap();
            half_sq(&conv2d_forward(&x, &kp).unwrap())
        });
        assert!(max_rel_err(&g.bias, &num_b) < 1e-6);
    }

    #[test]
    fn linear_in_input_and_kernel() {
        let x1 = random(Shape4::new(1, 2, 6, 6), 30);
        let x2 = random(Shape4::new(1, 2, 6, 6), 31);
        let mut k = random_kernel(2, 2, 3, 32);
        k.bias = vec![0.0; 2];
        let (a, b) = (0.7, -1.3);
        let combo = Tensor4::from_fn(x1.shape(), |n, c, i, j| a * x1.get(n, c, i, j) + b * x2.get(n, c, i, j));
        let lhs = conv2d_forward(&combo, &k).unwrap();
        let y1 = conv2d_forward(&x1, &k).unwrap();
        let y2 = conv2d_forward(&x2, &k).unwrap();
        for ((l, p), q) in lhs.data().iter().zip(y1.data()).zip(y2.data()) {
            assert!((l - (a * p + b * q)).abs() < 1e-12);
        }

        let k2 = random_kernel(2, 2, 3, 33);
        let kw = Tensor4::from_fn(k.weight.shape(), |o, c, u, v| a * k.weight.get(o, c, u, v) + b * k2.weight.get(o, c, u, v));
        let kc = ConvKernel::new(kw, vec![0.0; 2]).unwrap();
        let k2z = ConvKernel::new(k2.weight.clone(), vec![0.0; 2]).unwrap();
        let lhs = conv2d_forward(&x1, &kc).unwrap();
        let z2 = conv2d_forward(&x1, &k2z).unwrap();
        for ((l, p), q) in lhs.data().iter().zip(y1.data()).zip(z2.data()) {
            assert!((l - (a * p + b * q)).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let x = random(Shape4::new(2, 3, 9, 9), 40).cast::<f32>();
        let k = random_kernel(5, 3, 3, 41);
        let k = ConvKernel::new(k.weight.cast(), k.bias.iter().map(|&v| v as f32).collect()).unwrap();
        let a = conv2d_forward(&x, &k).unwrap();
        let b = conv2d_forward(&x, &k).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
