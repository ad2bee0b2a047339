//! Raw slice kernels shared by the gradient tape and the inference paths.

use super::Real;
use crate::par;

const PAR_MIN_FLOPS: usize = 1 << 18;

fn rows_per_task(m: usize, work: usize) -> usize {
    #[cfg(feature = "parallel")]
    {
        let threads = rayon::current_num_threads();
        if threads > 1 && work >= PAR_MIN_FLOPS {
            return m.div_ceil(threads * 2).max(1);
        }
    }
    let _ = work;
    m.max(1)
}

/// Logical `(m, k) x (k, n)` product. `a_t`/`b_t` mean the operand is stored
/// transposed, i.e. `a` is laid out `(k, m)` and `b` is laid out `(n, k)`.
pub(crate) fn gemm<T: Real>(a: &[T], a_t: bool, b: &[T], b_t: bool, m: usize, k: usize, n: usize) -> Vec<T> {
    assert_eq!(a.len(), m * k, "gemm lhs length");
    assert_eq!(b.len(), k * n, "gemm rhs length");
    let mut c = vec![T::zero(); m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let rows = rows_per_task(m, m * n * k);
    par::for_each_chunk_mut(&mut c, rows * n, |block, out| {
        let r0 = block * rows;
        let r = out.len() / n;
        let a_off = if a_t { r0 } else { r0 * k };
        T::gemm_acc(r, k, n, &a[a_off..], rsa, csa, b, rsb, csb, out);
    });
    c
}

/// Batched product: `batch` independent `(m,k) x (k,n)` matrices laid out
/// back to back. A zero stride on either side broadcasts that operand.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_batched<T: Real>(
    a: &[T],
    a_t: bool,
    a_stride: usize,
    b: &[T],
    b_t: bool,
    b_stride: usize,
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<T> {
    let mut c = vec![T::zero(); batch * m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    par::for_each_chunk_mut(&mut c, m * n, |i, out| {
        let ao = i * a_stride;
        let bo = i * b_stride;
        T::gemm_acc(
            m,
            k,
            n,
            &a[ao..ao + m * k],
            rsa,
            csa,
            &b[bo..bo + k * n],
            rsb,
            csb,
            out,
        );
    });
    c
}

/// Sums `rows x cols` data over rows, in row order.
pub(crate) fn column_sums<T: Real>(data: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); cols];
    for row in data.chunks_exact(cols) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

/// Numerically stabilized in-place softmax over each `cols`-long row.
pub(crate) fn softmax_rows<T: Real>(data: &mut [T], cols: usize) {
    let rows = data.len() / cols.max(1);
    let per = (PAR_MIN_FLOPS / cols.max(1)).max(1).min(rows.max(1));
    par::for_each_chunk_mut(data, per * cols, |_, block| {
        for row in block.chunks_exact_mut(cols) {
            softmax_in_place(row);
        }
    });
}

/// Dot product with eight interleaved accumulators, combined in a fixed order.
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += alpha * x`.
#[inline]
pub(crate) fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = T::one() / total;
    for v in row.iter_mut() {
        *v *= inv;
    }
}
