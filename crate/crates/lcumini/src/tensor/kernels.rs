//! Raw numeric kernels over row-major slices.
//!
//! No graph bookkeeping here; shapes are trusted (checked by the callers
//! in `ops`). Loops are written over contiguous row slices so LLVM can
//! vectorize them.

use super::Scalar;

/// C[m,n] = A[m,k] * B[k,n]
pub fn mm_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + a_ip * bv;
            }
        }
    }
    out
}

/// C[m,n] = A[m,k] * B[n,k]^T  (dot products of contiguous rows)
pub fn mm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc = acc + x * y;
            }
            *o = acc;
        }
    }
    out
}

/// C[m,n] = A[k,m]^T * B[k,n]
pub fn mm_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + a_pi * bv;
            }
        }
    }
    out
}

/// Decompose `shape` around `axis` into (outer, axis_len, inner) extents.
pub fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, axis_len, inner)
}

/// Copy the `[start, start+len)` range along `axis` into a fresh buffer.
pub fn slice_axis<T: Scalar>(
    data: &[T],
    shape: &[usize],
    axis: usize,
    start: usize,
    len: usize,
) -> Vec<T> {
    let (outer, axis_len, inner) = axis_extents(shape, axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * axis_len * inner + start * inner;
        out.extend_from_slice(&data[base..base + len * inner]);
    }
    out
}

/// Add `src` (shaped like the slice) into the `[start, ..)` range along
/// `axis` of `dst` (shaped like the full tensor).
pub fn scatter_axis_add<T: Scalar>(
    dst: &mut [T],
    shape: &[usize],
    axis: usize,
    start: usize,
    len: usize,
    src: &[T],
) {
    let (outer, axis_len, inner) = axis_extents(shape, axis);
    for o in 0..outer {
        let dst_base = o * axis_len * inner + start * inner;
        let src_base = o * len * inner;
        let block = len * inner;
        for q in 0..block {
            dst[dst_base + q] += src[src_base + q];
        }
    }
}

/// Euclidean norm accumulated in f64 regardless of element type.
pub fn l2_norm_f64<T: Scalar>(chunks: &[&[T]]) -> f64 {
    let mut acc = 0.0f64;
    for chunk in chunks {
        for &v in *chunk {
            let v = v.as_f64();
            acc += v * v;
        }
    }
    acc.sqrt()
}
