//! Discrete Fourier transforms and sequence-axis token mixing.
//!
//! All transforms are the unnormalized forward DFT
//! `X[n] = sum_k x[k] * exp(-2*pi*i*n*k/N)`.

use std::f64::consts::PI;

use num_complex::Complex;

use crate::numerics::{kernels, ComplexSequence, Real};
use crate::{par, Error, Result};

/// Direct O(N^2) evaluation. Angles are reduced modulo `N` before the
/// trigonometric call so large `n*k` products do not lose precision.
pub fn dft_naive<T: Real>(x: &[Complex<T>]) -> ComplexSequence<T> {
    let n = x.len();
    (0..n)
        .map(|f| {
            let mut acc = Complex::new(T::zero(), T::zero());
            for (k, &v) in x.iter().enumerate() {
                let theta = -2.0 * PI * ((f * k) % n) as f64 / n as f64;
                let w = Complex::new(T::from_f64_lossy(theta.cos()), T::from_f64_lossy(theta.sin()));
                acc = acc + v * w;
            }
            acc
        })
        .collect()
}

/// Forward FFT of any length; builds a one-off [`FftPlan`].
pub fn fft<T: Real>(x: &[Complex<T>]) -> ComplexSequence<T> {
    let mut buf = x.to_vec();
    if !buf.is_empty() {
        FftPlan::new(buf.len()).process(&mut buf);
    }
    buf
}

/// Precomputed FFT for one length: iterative radix-2 for powers of two,
/// Bluestein's chirp-z convolution over a padded radix-2 transform otherwise.
#[derive(Clone, Debug)]
pub struct FftPlan<T> {
    len: usize,
    kind: FftKind<T>,
}

#[derive(Clone, Debug)]
enum FftKind<T> {
    Radix2 {
        twiddles: Vec<Complex<T>>,
    },
    Bluestein {
        inner: Box<FftPlan<T>>,
        chirp: Vec<Complex<T>>,
        kernel: Vec<Complex<T>>,
    },
}

impl<T: Real> FftPlan<T> {
    pub fn new(len: usize) -> Self {
        assert!(len >= 1, "FFT length must be at least 1");
        if len.is_power_of_two() {
            let twiddles = (0..len / 2)
                .map(|j| {
                    let theta = -2.0 * PI * j as f64 / len as f64;
                    Complex::new(T::from_f64_lossy(theta.cos()), T::from_f64_lossy(theta.sin()))
                })
                .collect();
            return Self {
                len,
                kind: FftKind::Radix2 { twiddles },
            };
        }
        let m = (2 * len - 1).next_power_of_two();
        let inner = Box::new(FftPlan::new(m));
        // w[k] = exp(-i*pi*k^2/N); k^2 is reduced mod 2N to keep the angle small.
        let chirp: Vec<Complex<T>> = (0..len)
            .map(|k| {
                let k2 = (k as u128 * k as u128 % (2 * len as u128)) as f64;
                let theta = -PI * k2 / len as f64;
                Complex::new(T::from_f64_lossy(theta.cos()), T::from_f64_lossy(theta.sin()))
            })
            .collect();
        let mut kernel = vec![Complex::new(T::zero(), T::zero()); m];
        kernel[0] = chirp[0].conj();
        for k in 1..len {
            kernel[k] = chirp[k].conj();
            kernel[m - k] = chirp[k].conj();
        }
        inner.process(&mut kernel);
        Self {
            len,
            kind: FftKind::Bluestein { inner, chirp, kernel },
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Strategy name used in reports.
    pub fn algorithm(&self) -> &'static str {
        match self.kind {
            FftKind::Radix2 { .. } => "radix2",
            FftKind::Bluestein { .. } => "bluestein",
        }
    }

    /// In-place forward transform; `buf.len()` must equal the plan length.
    pub fn process(&self, buf: &mut [Complex<T>]) {
        assert_eq!(buf.len(), self.len, "FFT buffer length");
        match &self.kind {
            FftKind::Radix2 { twiddles } => radix2(buf, twiddles),
            FftKind::Bluestein { inner, chirp, kernel } => {
                let m = inner.len;
                let zero = Complex::new(T::zero(), T::zero());
                let mut a = vec![zero; m];
                for (k, (&x, &w)) in buf.iter().zip(chirp).enumerate() {
                    a[k] = x * w;
                }
                inner.process(&mut a);
                for (v, &b) in a.iter_mut().zip(kernel) {
                    *v = (*v * b).conj();
                }
                // Inverse via conjugation: ifft(y) = conj(fft(conj(y))) / m.
                inner.process(&mut a);
                let scale = T::one() / T::from_usize(m).unwrap();
                for (k, out) in buf.iter_mut().enumerate() {
                    *out = a[k].conj() * scale * chirp[k];
                }
            }
        }
    }
}

fn radix2<T: Real>(a: &mut [Complex<T>], twiddles: &[Complex<T>]) {
    let n = a.len();
    if n <= 1 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if i < j {
            a.swap(i, j);
        }
    }
    let mut size = 2;
    while size <= n {
        let half = size / 2;
        let stride = n / size;
        for start in (0..n).step_by(size) {
            for j in 0..half {
                let w = twiddles[j * stride];
                let u = a[start + j];
                let t = a[start + j + half] * w;
                a[start + j] = u + t;
                a[start + j + half] = u - t;
            }
        }
        size *= 2;
    }
}

/// How a [`MixingPlan`] evaluates the transform.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixStrategy {
    Radix2,
    Bluestein,
    /// Dense product with the cosine matrix.
    Matrix,
}

impl MixStrategy {
    /// Radix-2 for powers of two, the cosine matrix up to 512, Bluestein beyond.
    pub fn auto(len: usize) -> Self {
        if len.is_power_of_two() {
            MixStrategy::Radix2
        } else if len <= 512 {
            MixStrategy::Matrix
        } else {
            MixStrategy::Bluestein
        }
    }
}

/// Real-part Fourier mixing along the sequence axis of `(B, N, E)` tensors:
/// `y[b,n,e] = sum_k C[n,k] x[b,k,e]` with `C[n,k] = cos(2*pi*n*k/N)`.
///
/// The map has no trainable parameters and `C` is symmetric, so the same plan
/// serves the forward and the backward pass.
#[derive(Clone, Debug)]
pub struct MixingPlan<T> {
    len: usize,
    strategy: MixStrategy,
    cosine: Vec<T>,
    // Every path accumulates in f64 and rounds once on output.
    cosine64: Vec<f64>,
    fft: Option<FftPlan<f64>>,
}

impl<T: Real> MixingPlan<T> {
    pub fn new(len: usize) -> Self {
        Self::with_strategy(len, MixStrategy::auto(len))
    }

    /// Forces a strategy. Radix-2 on a non power-of-two length falls back to Bluestein.
    pub fn with_strategy(len: usize, strategy: MixStrategy) -> Self {
        assert!(len >= 1, "mixing length must be at least 1");
        let strategy = match strategy {
            MixStrategy::Radix2 if !len.is_power_of_two() => MixStrategy::Bluestein,
            MixStrategy::Bluestein if len.is_power_of_two() => MixStrategy::Radix2,
            s => s,
        };
        let cosine64: Vec<f64> = (0..len * len)
            .map(|i| {
                let (n, k) = (i / len, i % len);
                (2.0 * PI * ((n * k) % len) as f64 / len as f64).cos()
            })
            .collect();
        let cosine = cosine64.iter().map(|&c| T::from_f64_lossy(c)).collect();
        let fft = (strategy != MixStrategy::Matrix).then(|| FftPlan::new(len));
        Self {
            len,
            strategy,
            cosine,
            cosine64,
            fft,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn strategy(&self) -> MixStrategy {
        self.strategy
    }

    /// Row-major `N x N` cosine matrix.
    pub fn cosine(&self) -> &[T] {
        &self.cosine
    }

    /// Applies the mixing map to `x` laid out `(batch, len, width)`.
    pub fn apply(&self, x: &[T], batch: usize, len: usize, width: usize) -> Result<Vec<T>> {
        if len != self.len {
            return Err(Error::InvalidArgument(format!(
                "mixing plan built for length {}, got {len}",
                self.len
            )));
        }
        if x.len() != batch * len * width {
            return Err(Error::shape("fourier_mix", &[batch, len, width], &[x.len()]));
        }
        match &self.fft {
            None => {
                let wide: Vec<f64> = x.iter().map(|v| v.as_f64()).collect();
                let y = kernels::gemm_batched(&self.cosine64, false, 0, &wide, false, len * width, batch, len, len, width);
                Ok(y.into_iter().map(T::from_f64_lossy).collect())
            }
            Some(plan) => {
                let mut out = vec![T::zero(); x.len()];
                let block = len * width;
                par::for_each_chunk_mut(&mut out, block, |b, dst| {
                    let src = &x[b * block..(b + 1) * block];
                    let mut buf = vec![Complex::new(0.0, 0.0); len];
                    for e in 0..width {
                        for (k, c) in buf.iter_mut().enumerate() {
                            *c = Complex::new(src[k * width + e].as_f64(), 0.0);
                        }
                        plan.process(&mut buf);
                        for (n, c) in buf.iter().enumerate() {
                            dst[n * width + e] = T::from_f64_lossy(c.re);
                        }
                    }
                });
                Ok(out)
            }
        }
    }
}
