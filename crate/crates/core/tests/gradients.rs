//! Central-difference checks for every differentiable operation and the
//! full tiny model, in 64-bit precision.

use std::sync::Arc;

use fnetae::fourier::{MixStrategy, MixingPlan};
use fnetae::model::{param_specs, FNetAutoencoder, ModelConfig};
use fnetae::numerics::{grad_check, Elementwise, Graph, Rng, Tensor, Var};
use fnetae::Result;

const SEEDS: u64 = 20;
const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_tensor(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap()
}

/// Values bounded away from zero so the ReLU kink is never straddled.
fn rand_away_from_zero(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    rand_tensor(shape, rng).map(|x| if x >= 0.0 { x + 0.1 } else { x - 0.1 })
}

/// Reduces to a scalar through a fixed random weighting so that every
/// output coordinate contributes a distinct gradient.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = rand_tensor(g.shape(y), &mut Rng::new(seed ^ 0xabcd));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn check<F>(name: &str, shapes: &[&[usize]], away_from_zero: bool, f: F)
where
    F: Fn(&mut Graph<f64>, &[Var], u64) -> Result<Var>,
{
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut rng = Rng::new(1000 + seed);
        let inputs: Vec<Tensor<f64>> = shapes
            .iter()
            .map(|s| {
                if away_from_zero {
                    rand_away_from_zero(s, &mut rng)
                } else {
                    rand_tensor(s, &mut rng)
                }
            })
            .collect();
        let err = grad_check(
            |g, v| {
                let y = f(g, v, seed)?;
                weighted_sum(g, y, seed)
            },
            &inputs,
            H,
        )
        .unwrap();
        worst = worst.max(err);
    }
    assert!(worst <= TOL, "{name}: max relative error {worst:e}");
}

#[test]
fn matmul_flat() {
    check("matmul (B,m,k)x(k,n)", &[&[2, 3, 4], &[4, 5]], false, |g, v, _| g.matmul(v[0], v[1]));
}

#[test]
fn matmul_batched() {
    check("matmul batched", &[&[2, 3, 4], &[2, 4, 3]], false, |g, v, _| g.matmul(v[0], v[1]));
}

#[test]
fn matmul_broadcast_lhs() {
    check("matmul 2-D lhs", &[&[3, 4], &[2, 4, 5]], false, |g, v, _| g.matmul(v[0], v[1]));
}

#[test]
fn add_and_mul_with_broadcast() {
    check("add", &[&[2, 3, 4], &[4]], false, |g, v, _| g.add(v[0], v[1]));
    check("mul", &[&[2, 3, 4], &[3, 1]], false, |g, v, _| g.mul(v[0], v[1]));
    check("mul same shape", &[&[3, 4], &[3, 4]], false, |g, v, _| g.mul(v[0], v[1]));
}

#[test]
fn pointwise() {
    check("scale", &[&[3, 4]], false, |g, v, _| Ok(g.scale(v[0], -1.7)));
    check("relu", &[&[3, 4]], true, |g, v, _| Ok(g.relu(v[0])));
    check("sigmoid", &[&[3, 4]], false, |g, v, _| Ok(g.sigmoid(v[0])));
    check("elementwise add", &[&[2, 3], &[2, 3]], false, |g, v, _| {
        g.elementwise(Elementwise::Add, v[0], Some(v[1]), 0.0)
    });
}

#[test]
fn softmax_every_axis() {
    for axis in 0..3 {
        check("softmax", &[&[2, 3, 4]], false, move |g, v, _| g.softmax(v[0], axis));
    }
}

#[test]
fn layer_norm() {
    check("layer_norm", &[&[2, 3, 4], &[4], &[4]], false, |g, v, _| g.layer_norm(v[0], v[1], v[2], 1e-3));
    check("layer_norm 4-vector", &[&[4], &[4], &[4]], false, |g, v, _| {
        g.layer_norm(v[0], v[1], v[2], 1e-3)
    });
}

#[test]
fn embedding_with_repeated_ids() {
    check("embedding", &[&[5, 3]], false, |g, v, _| g.embedding(v[0], &[2, 0, 2, 4, 1, 2], &[2, 3]));
}

#[test]
fn cross_entropy() {
    check("cross_entropy", &[&[2, 3, 5]], false, |g, v, _| {
        g.cross_entropy(v[0], &[0, 4, 1, 1, 3, 2])
    });
}

#[test]
fn fourier_mix_every_strategy() {
    for (n, strategy) in [
        (8, MixStrategy::Radix2),
        (6, MixStrategy::Matrix),
        (7, MixStrategy::Bluestein),
        (5, MixStrategy::Matrix),
    ] {
        let plan = Arc::new(MixingPlan::with_strategy(n, strategy));
        let shape = [2, n, 3];
        let mut worst = 0.0f64;
        for seed in 0..SEEDS {
            let x = rand_tensor(&shape, &mut Rng::new(seed));
            let err = grad_check(
                |g, v| {
                    let y = g.fourier_mix(v[0], &plan)?;
                    weighted_sum(g, y, seed)
                },
                &[x],
                H,
            )
            .unwrap();
            worst = worst.max(err);
        }
        assert!(worst <= 1e-6, "fourier_mix {strategy:?} N={n}: {worst:e}");
    }
}

#[test]
fn attention_causal_and_full() {
    for causal in [false, true] {
        check("attention self", &[&[2, 4, 6], &[2, 4, 6], &[2, 4, 6]], false, move |g, v, _| {
            g.attention(v[0], v[1], v[2], 2, causal)
        });
    }
    check("attention cross", &[&[2, 3, 4], &[2, 5, 4], &[2, 5, 4]], false, |g, v, _| {
        g.attention(v[0], v[1], v[2], 1, false)
    });
}

#[test]
fn dropout_reductions() {
    check("dropout", &[&[3, 4]], false, |g, v, seed| {
        let mask = (0..12).map(|i| if (i + seed) % 3 == 0 { 0.0 } else { 2.0 }).collect();
        g.dropout_with_mask(v[0], mask)
    });
    check("dropout via rng", &[&[3, 4]], false, |g, v, seed| g.dropout(v[0], 0.5, &mut Rng::new(seed)));
    check("mean", &[&[3, 4]], false, |g, v, _| {
        let m = g.mean(v[0]);
        let s = g.sum(v[0]);
        let both = g.mul(m, s)?;
        Ok(both)
    });
}

fn tiny(dropout: f64) -> ModelConfig {
    ModelConfig {
        vocab_size: 10,
        max_len: 4,
        embed_dim: 2,
        latent_dim: 2,
        num_heads: 1,
        key_dim: 2,
        dropout,
        norm_eps: 1e-3,
    }
}

fn model_check(config: ModelConfig, train_mode: bool) -> f64 {
    let model = FNetAutoencoder::<f64>::new(config.clone()).unwrap();
    let names: Vec<String> = param_specs(&config).into_iter().map(|s| s.name).collect();
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut rng = Rng::new(seed);
        let store = model.init_params(&mut rng).unwrap();
        // Perturb biases, norms and gains away from their constant init so
        // every parameter sits at a generic point.
        let inputs: Vec<Tensor<f64>> = names
            .iter()
            .map(|n| {
                let t = store.get(n).unwrap();
                let noise = rand_tensor(t.shape(), &mut rng);
                let data = t.data().iter().zip(noise.data()).map(|(x, e)| x + 0.3 * e).collect();
                Tensor::new(t.shape().to_vec(), data).unwrap()
            })
            .collect();
        let b = 2;
        let enc: Vec<u32> = (0..b * config.max_len).map(|_| rng.below(config.vocab_size) as u32).collect();
        let dec: Vec<u32> = (0..b * config.max_len).map(|_| rng.below(config.vocab_size) as u32).collect();
        let tgt: Vec<u32> = (0..b * config.max_len).map(|_| rng.below(config.vocab_size) as u32).collect();
        let err = grad_check(
            |g, v| {
                let p = names.iter().cloned().zip(v.iter().copied()).collect();
                let mut drop_rng = Rng::new(77 + seed);
                let logits = model.forward(g, &p, &enc, &dec, b, train_mode.then_some(&mut drop_rng))?;
                g.cross_entropy(logits, &tgt)
            },
            &inputs,
            H,
        )
        .unwrap();
        worst = worst.max(err);
    }
    worst
}

#[test]
fn full_tiny_model_eval_mode() {
    let worst = model_check(tiny(0.0), false);
    assert!(worst <= TOL, "tiny model: {worst:e}");
}

#[test]
fn full_tiny_model_with_dropout() {
    let worst = model_check(tiny(0.5), true);
    assert!(worst <= TOL, "tiny model with dropout: {worst:e}");
}

#[test]
fn gradient_accumulation_is_linear() {
    let mut rng = Rng::new(5);
    let x = rand_tensor(&[3, 4], &mut rng);
    let w = rand_tensor(&[4, 2], &mut rng);
    let grads_of = |which: u8| {
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let wv = g.param(w.clone());
        let y = g.matmul(xv, wv).unwrap();
        let a = g.sigmoid(y);
        let la = g.sum(a);
        let b = g.mul(y, y).unwrap();
        let lb = g.mean(b);
        let loss = match which {
            0 => la,
            1 => lb,
            _ => g.add(la, lb).unwrap(),
        };
        let grads = g.backward(loss).unwrap();
        (grads.get(xv).unwrap().clone(), grads.get(wv).unwrap().clone())
    };
    let (xa, wa) = grads_of(0);
    let (xb, wb) = grads_of(1);
    let (xs, ws) = grads_of(2);
    for (s, (a, b)) in xs.data().iter().zip(xa.data().iter().zip(xb.data())) {
        assert!((s - (a + b)).abs() < 1e-12);
    }
    for (s, (a, b)) in ws.data().iter().zip(wa.data().iter().zip(wb.data())) {
        assert!((s - (a + b)).abs() < 1e-12);
    }
}

#[test]
fn unused_parameter_gets_zero_gradient() {
    let mut g = Graph::<f64>::new();
    let used = g.param(Tensor::from_f64(vec![3], &[1.0, 2.0, 3.0]).unwrap());
    let unused = g.param(Tensor::from_f64(vec![2], &[5.0, 6.0]).unwrap());
    let loss = g.sum(used);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(used).unwrap().data(), &[1.0, 1.0, 1.0]);
    assert_eq!(grads.get(unused).unwrap().data(), &[0.0, 0.0]);
}
