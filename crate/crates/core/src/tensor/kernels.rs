//! Slice-level numeric kernels shared by the graph's forward and backward passes.

use super::{strides, Real};

#[inline]
pub(crate) fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dot product with eight independent accumulators, summed in a fixed order.
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for j in 0..8 {
            acc[j] += x[j] * y[j];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// c (p×r) += a (p×q) · b (q×r)
pub(crate) fn gemm_nn<T: Real>(a: &[T], b: &[T], c: &mut [T], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let crow = &mut c[i * r..(i + 1) * r];
        let arow = &a[i * q..(i + 1) * q];
        for (k, &av) in arow.iter().enumerate() {
            if av != T::zero() {
                axpy(crow, av, &b[k * r..(k + 1) * r]);
            }
        }
    }
}

/// c (p×q) += a (p×r) · bᵀ where b is (q×r)
pub(crate) fn gemm_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let arow = &a[i * r..(i + 1) * r];
        for k in 0..q {
            c[i * q + k] += dot(arow, &b[k * r..(k + 1) * r]);
        }
    }
}

/// c (q×r) += aᵀ · b where a is (p×q) and b is (p×r)
pub(crate) fn gemm_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let brow = &b[i * r..(i + 1) * r];
        for k in 0..q {
            let av = a[i * q + k];
            if av != T::zero() {
                axpy(&mut c[k * r..(k + 1) * r], av, brow);
            }
        }
    }
}

/// Broadcast result shape of two equal-rank shapes, or `None`.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, _) => Some(y),
            (_, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// Strides of `shape` expressed over `out` indices: zero along broadcast axes.
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    shape
        .iter()
        .zip(out)
        .zip(s)
        .map(|((&d, &o), st)| if d == 1 && o != 1 { 0 } else { st })
        .collect()
}

/// Visit every index of `out`, handing the flat offsets into two broadcast operands.
pub(crate) fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = out.iter().product();
    if n == 0 {
        return;
    }
    if out.is_empty() {
        f(0, 0, 0);
        return;
    }
    let rank = out.len();
    let last = out[rank - 1];
    let (la, lb) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut o = 0usize;
    loop {
        for j in 0..last {
            f(o + j, oa + j * la, ob + j * lb);
        }
        o += last;
        if o >= n {
            break;
        }
        let mut ax = rank - 1;
        loop {
            ax -= 1;
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

/// Sum a gradient of shape `out` down onto the (broadcast) operand `shape`.
pub(crate) fn reduce_to<T: Real>(g: &[T], out: &[usize], shape: &[usize]) -> Vec<T> {
    if out == shape {
        return g.to_vec();
    }
    let st = broadcast_strides(shape, out);
    let mut acc = vec![T::zero(); shape.iter().product()];
    for_each_broadcast(out, &st, &st, |o, i, _| acc[i] += g[o]);
    acc
}

pub(crate) fn permute<T: Real>(x: &[T], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<T>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let xs = strides(shape);
    let src_strides: Vec<usize> = axes.iter().map(|&a| xs[a]).collect();
    let mut out = Vec::with_capacity(x.len());
    for_each_broadcast(&out_shape, &src_strides, &src_strides, |_, i, _| {
        out.push(x[i])
    });
    (out_shape, out)
}

/// Split a shape around `axis` into (outer, len, inner) extents.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[inline]
pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
