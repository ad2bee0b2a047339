//! Fused scaled dot-product attention over already-projected heads.
//!
//! Inputs are laid out `(batch, len, heads * head_dim)`; head `h` owns the
//! column range `h*head_dim..(h+1)*head_dim`. Under a causal mask, query row
//! `i` only ever reads key/value rows `0..=i`, so later rows cannot leak into
//! earlier outputs even through rounding.

use super::kernels::{axpy, dot};
use super::Real;
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct AttnDims {
    pub batch: usize,
    pub q_len: usize,
    pub kv_len: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttnDims {
    fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    #[inline]
    fn limit(&self, causal: bool, i: usize) -> usize {
        if causal {
            (i + 1).min(self.kv_len)
        } else {
            self.kv_len
        }
    }
}

/// Returns `(output, probabilities)`; probabilities are `(batch, heads, q_len, kv_len)`
/// with masked entries exactly zero.
pub(crate) fn forward<T: Real>(q: &[T], k: &[T], v: &[T], d: AttnDims, causal: bool) -> (Vec<T>, Vec<T>) {
    let w = d.width();
    let hd = d.head_dim;
    let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
    let parts = par::map_range(d.batch * d.heads, |bh| {
        let (b, h) = (bh / d.heads, bh % d.heads);
        let col = h * hd;
        let q_base = b * d.q_len * w + col;
        let kv_base = b * d.kv_len * w + col;
        let mut probs = vec![T::zero(); d.q_len * d.kv_len];
        let mut out = vec![T::zero(); d.q_len * hd];
        for i in 0..d.q_len {
            let lim = d.limit(causal, i);
            let qi = &q[q_base + i * w..q_base + i * w + hd];
            let row = &mut probs[i * d.kv_len..i * d.kv_len + lim];
            for (j, s) in row.iter_mut().enumerate() {
                let kj = &k[kv_base + j * w..kv_base + j * w + hd];
                *s = dot(qi, kj) * scale;
            }
            super::kernels::softmax_in_place(row);
            let oi = &mut out[i * hd..(i + 1) * hd];
            for (j, &p) in row.iter().enumerate() {
                axpy(p, &v[kv_base + j * w..kv_base + j * w + hd], oi);
            }
        }
        (probs, out)
    });
    let mut out = vec![T::zero(); d.batch * d.q_len * w];
    let mut probs = Vec::with_capacity(d.batch * d.heads * d.q_len * d.kv_len);
    for (bh, (p, o)) in parts.into_iter().enumerate() {
        let (b, h) = (bh / d.heads, bh % d.heads);
        for i in 0..d.q_len {
            let dst = b * d.q_len * w + i * w + h * hd;
            out[dst..dst + hd].copy_from_slice(&o[i * hd..(i + 1) * hd]);
        }
        probs.extend_from_slice(&p);
    }
    (out, probs)
}

/// Gradients of the attention output with respect to `q`, `k` and `v`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    grad_out: &[T],
    d: AttnDims,
    causal: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let w = d.width();
    let hd = d.head_dim;
    let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
    let parts = par::map_range(d.batch * d.heads, |bh| {
        let (b, h) = (bh / d.heads, bh % d.heads);
        let col = h * hd;
        let q_base = b * d.q_len * w + col;
        let kv_base = b * d.kv_len * w + col;
        let p_base = bh * d.q_len * d.kv_len;
        let mut dq = vec![T::zero(); d.q_len * hd];
        let mut dk = vec![T::zero(); d.kv_len * hd];
        let mut dv = vec![T::zero(); d.kv_len * hd];
        let mut ds = vec![T::zero(); d.kv_len];
        for i in 0..d.q_len {
            let lim = d.limit(causal, i);
            let go = &grad_out[q_base + i * w..q_base + i * w + hd];
            let p = &probs[p_base + i * d.kv_len..p_base + i * d.kv_len + lim];
            let mut weighted = T::zero();
            for j in 0..lim {
                let vj = &v[kv_base + j * w..kv_base + j * w + hd];
                axpy(p[j], go, &mut dv[j * hd..(j + 1) * hd]);
                ds[j] = dot(go, vj);
                weighted += ds[j] * p[j];
            }
            let qi = &q[q_base + i * w..q_base + i * w + hd];
            for j in 0..lim {
                let g = p[j] * (ds[j] - weighted) * scale;
                let kj = &k[kv_base + j * w..kv_base + j * w + hd];
                axpy(g, kj, &mut dq[i * hd..(i + 1) * hd]);
                axpy(g, qi, &mut dk[j * hd..(j + 1) * hd]);
            }
        }
        (dq, dk, dv)
    });
    let mut gq = vec![T::zero(); q.len()];
    let mut gk = vec![T::zero(); k.len()];
    let mut gv = vec![T::zero(); v.len()];
    for (bh, (dq, dk, dv)) in parts.into_iter().enumerate() {
        let (b, h) = (bh / d.heads, bh % d.heads);
        for i in 0..d.q_len {
            let dst = b * d.q_len * w + i * w + h * hd;
            gq[dst..dst + hd].copy_from_slice(&dq[i * hd..(i + 1) * hd]);
        }
        for j in 0..d.kv_len {
            let dst = b * d.kv_len * w + j * w + h * hd;
            gk[dst..dst + hd].copy_from_slice(&dk[j * hd..(j + 1) * hd]);
            gv[dst..dst + hd].copy_from_slice(&dv[j * hd..(j + 1) * hd]);
        }
    }
    (gq, gk, gv)
}
