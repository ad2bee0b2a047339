use num_complex::Complex;
use proptest::prelude::*;

use fnetae::fourier::{dft_naive, fft, FftPlan, MixStrategy, MixingPlan};
use fnetae::numerics::Rng;

fn random_signal(n: usize, rng: &mut Rng) -> Vec<Complex<f64>> {
    (0..n)
        .map(|_| Complex::new(rng.uniform_range(-1.0, 1.0), rng.uniform_range(-1.0, 1.0)))
        .collect()
}

fn max_err(a: &[Complex<f64>], b: &[Complex<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

#[test]
fn fft_matches_naive_for_all_small_and_named_lengths() {
    let mut rng = Rng::new(11);
    let lens: Vec<usize> = (1..=64).chain([150, 256, 1000]).collect();
    for n in lens {
        let x = random_signal(n, &mut rng);
        let err = max_err(&fft(&x), &dft_naive(&x));
        assert!(err <= 1e-9, "N={n}: {err:e}");
    }
}

#[test]
fn fft_large_bluestein_and_radix2() {
    let mut rng = Rng::new(12);
    for n in [4096, 3000] {
        let x = random_signal(n, &mut rng);
        let err = max_err(&fft(&x), &dft_naive(&x));
        assert!(err <= 1e-9, "N={n}: {err:e}");
    }
}

#[test]
fn plan_algorithm_choice() {
    assert_eq!(FftPlan::<f64>::new(256).algorithm(), "radix2");
    assert_eq!(FftPlan::<f64>::new(150).algorithm(), "bluestein");
    assert_eq!(MixStrategy::auto(150), MixStrategy::Matrix);
    assert_eq!(MixStrategy::auto(128), MixStrategy::Radix2);
    assert_eq!(MixStrategy::auto(1000), MixStrategy::Bluestein);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn linearity(n in 1usize..200, seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = Rng::new(seed);
        let x = random_signal(n, &mut rng);
        let y = random_signal(n, &mut rng);
        let combo: Vec<_> = x.iter().zip(&y).map(|(p, q)| p * a + q * b).collect();
        let lhs = fft(&combo);
        let fx = fft(&x);
        let fy = fft(&y);
        let rhs: Vec<_> = fx.iter().zip(&fy).map(|(p, q)| p * a + q * b).collect();
        prop_assert!(max_err(&lhs, &rhs) <= 1e-9);
    }

    #[test]
    fn parseval(n in 1usize..300, seed in any::<u64>()) {
        let x = random_signal(n, &mut Rng::new(seed));
        let time: f64 = x.iter().map(|c| c.norm_sqr()).sum();
        let freq: f64 = fft(&x).iter().map(|c| c.norm_sqr()).sum::<f64>() / n as f64;
        prop_assert!((time - freq).abs() <= 1e-9, "{} vs {}", time, freq);
    }

    #[test]
    fn mixing_paths_agree_in_f32(n in 2usize..160, seed in any::<u64>()) {
        let (b, e) = (2, 3);
        let mut rng = Rng::new(seed);
        let x: Vec<f32> = (0..b * n * e).map(|_| rng.uniform_range(-1.0, 1.0) as f32).collect();
        let matrix = MixingPlan::<f32>::with_strategy(n, MixStrategy::Matrix).apply(&x, b, n, e).unwrap();
        let blue = MixingPlan::<f32>::with_strategy(n, MixStrategy::Bluestein).apply(&x, b, n, e).unwrap();
        let max_abs = |a: &[f32], c: &[f32]| a.iter().zip(c).map(|(p, q)| (p - q).abs()).fold(0.0f32, f32::max);
        prop_assert!(max_abs(&matrix, &blue) <= 1e-5, "N={} diff={}", n, max_abs(&matrix, &blue));
        if n.is_power_of_two() {
            let radix = MixingPlan::<f32>::with_strategy(n, MixStrategy::Radix2).apply(&x, b, n, e).unwrap();
            prop_assert!(max_abs(&matrix, &radix) <= 1e-5);
        }
    }

    #[test]
    fn mixing_equals_explicit_cosine_product(n in 1usize..40, seed in any::<u64>()) {
        let (b, e) = (2, 2);
        let mut rng = Rng::new(seed);
        let x: Vec<f64> = (0..b * n * e).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let plan = MixingPlan::<f64>::new(n);
        let y = plan.apply(&x, b, n, e).unwrap();
        for bi in 0..b {
            for row in 0..n {
                for col in 0..e {
                    let mut want = 0.0;
                    for k in 0..n {
                        let angle = 2.0 * std::f64::consts::PI * ((row * k) % n) as f64 / n as f64;
                        want += angle.cos() * x[(bi * n + k) * e + col];
                    }
                    prop_assert!((y[(bi * n + row) * e + col] - want).abs() <= 1e-9);
                }
            }
        }
    }
}

#[test]
fn mixing_paths_agree_at_model_lengths() {
    let (b, e) = (8, 16);
    let mut rng = Rng::new(3);
    for n in [64, 128, 150, 256, 512] {
        let x: Vec<f32> = (0..b * n * e).map(|_| rng.uniform_range(-1.0, 1.0) as f32).collect();
        let exact = MixingPlan::<f64>::with_strategy(n, MixStrategy::Matrix)
            .apply(&x.iter().map(|&v| v as f64).collect::<Vec<_>>(), b, n, e)
            .unwrap();
        let mut strategies = vec![MixStrategy::Matrix, MixStrategy::Bluestein];
        if n.is_power_of_two() {
            strategies.push(MixStrategy::Radix2);
        }
        for s in strategies {
            let y = MixingPlan::<f32>::with_strategy(n, s).apply(&x, b, n, e).unwrap();
            let err = y.iter().zip(&exact).map(|(a, c)| (*a as f64 - c).abs()).fold(0.0, f64::max);
            assert!(err <= 1e-5, "N={n} {s:?}: {err:e}");
        }
    }
}

#[test]
fn cosine_matrix_is_exactly_symmetric() {
    for n in [1, 2, 5, 150, 512] {
        let plan = MixingPlan::<f32>::new(n);
        let c = plan.cosine();
        for i in 0..n {
            assert_eq!(c[i], 1.0);
            assert_eq!(c[i * n], 1.0);
            for j in 0..n {
                assert_eq!(c[i * n + j].to_bits(), c[j * n + i].to_bits());
            }
        }
    }
}
