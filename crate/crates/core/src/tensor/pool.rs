use super::{Scalar, Shape4, Tensor4};
use crate::error::{Error, Result};

/// Winning input position for every pooled output, as flat indices into the
/// input tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolIndices {
    input: Shape4,
    output: Shape4,
    argmax: Vec<usize>,
}

impl PoolIndices {
    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }

    pub fn input_shape(&self) -> Shape4 {
        self.input
    }
}

/// 2x2 max pooling with stride 2. Ties go to the first position in
/// row-major window order (top-left first).
pub fn maxpool2_forward<T: Scalar>(x: &Tensor4<T>) -> Result<(Tensor4<T>, PoolIndices)> {
    let s = x.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(Error::shape(format!("maxpool needs even spatial dims, got {s}")));
    }
    let os = Shape4::new(s.n, s.c, s.h / 2, s.w / 2);
    let mut out = Vec::with_capacity(os.len());
    let mut argmax = Vec::with_capacity(os.len());
    for n in 0..s.n {
        for c in 0..s.c {
            for i in 0..os.h {
                for j in 0..os.w {
                    let mut best = x.index(n, c, 2 * i, 2 * j);
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let cand = x.index(n, c, 2 * i + di, 2 * j + dj);
                        if x.data()[cand] > x.data()[best] {
                            best = cand;
                        }
                    }
                    out.push(x.data()[best]);
                    argmax.push(best);
                }
            }
        }
    }
    Ok((Tensor4::from_vec(os, out)?, PoolIndices { input: s, output: os, argmax }))
}

pub fn maxpool2_backward<T: Scalar>(indices: &PoolIndices, upstream: &Tensor4<T>) -> Result<Tensor4<T>> {
    upstream.expect_shape(indices.output, "maxpool upstream")?;
    let mut gx = Tensor4::zeros(indices.input);
    let g = gx.data_mut();
    for (&src, &u) in indices.argmax.iter().zip(upstream.data()) {
        g[src] += u;
    }
    Ok(gx)
}
