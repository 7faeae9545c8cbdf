use super::{Scalar, Shape4, Tensor4};
use crate::error::{Error, Result};

/// Stacks `a`'s channels followed by `b`'s.
pub fn concat_channels<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
        return Err(Error::shape(format!("cannot concat {sa} with {sb}")));
    }
    let os = Shape4::new(sa.n, sa.c + sb.c, sa.h, sa.w);
    let (la, lb) = (sa.c * sa.plane(), sb.c * sb.plane());
    let mut data = Vec::with_capacity(os.len());
    for n in 0..sa.n {
        data.extend_from_slice(&a.data()[n * la..(n + 1) * la]);
        data.extend_from_slice(&b.data()[n * lb..(n + 1) * lb]);
    }
    Tensor4::from_vec(os, data)
}

/// Inverse of [`concat_channels`]: the first `first_channels` go left.
pub fn split_channels<T: Scalar>(t: &Tensor4<T>, first_channels: usize) -> Result<(Tensor4<T>, Tensor4<T>)> {
    let s = t.shape();
    if first_channels > s.c {
        return Err(Error::shape(format!("cannot split {first_channels} channels off {s}")));
    }
    let sa = Shape4::new(s.n, first_channels, s.h, s.w);
    let sb = Shape4::new(s.n, s.c - first_channels, s.h, s.w);
    let (la, lb) = (sa.c * s.plane(), sb.c * s.plane());
    let mut a = Vec::with_capacity(sa.len());
    let mut b = Vec::with_capacity(sb.len());
    for chunk in t.data().chunks(la + lb) {
        a.extend_from_slice(&chunk[..la]);
        b.extend_from_slice(&chunk[la..]);
    }
    Ok((Tensor4::from_vec(sa, a)?, Tensor4::from_vec(sb, b)?))
}
