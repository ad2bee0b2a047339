use proptest::prelude::*;

use fnetae::model::{count_params, param_specs, FNetAutoencoder, ModelConfig};
use fnetae::numerics::{Graph, ParamStore, Rng, Tensor};

fn random_ids(n: usize, vocab: usize, rng: &mut Rng) -> Vec<u32> {
    (0..n).map(|_| rng.below(vocab) as u32).collect()
}

fn small(seed: u64) -> (FNetAutoencoder<f32>, ParamStore<f32>) {
    let config = ModelConfig {
        vocab_size: 23,
        max_len: 7,
        embed_dim: 8,
        latent_dim: 4,
        num_heads: 2,
        key_dim: 4,
        dropout: 0.5,
        norm_eps: 1e-3,
    };
    let model = FNetAutoencoder::new(config).unwrap();
    let store = model.init_params(&mut Rng::new(seed)).unwrap();
    (model, store)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn count_matches_allocation(
        vocab in 5usize..60,
        max_len in 2usize..20,
        embed in 1usize..12,
        latent in 1usize..10,
        heads in 1usize..5,
        key_dim in 1usize..8,
        seed in any::<u64>(),
    ) {
        let config = ModelConfig {
            vocab_size: vocab,
            max_len,
            embed_dim: embed,
            latent_dim: latent,
            num_heads: heads,
            key_dim,
            dropout: 0.1,
            norm_eps: 1e-3,
        };
        let model = FNetAutoencoder::<f32>::new(config.clone()).unwrap();
        let store = model.init_params(&mut Rng::new(seed)).unwrap();
        prop_assert_eq!(store.num_scalars(), count_params(&config));
        let from_specs: usize = param_specs(&config).iter().map(|s| s.shape.iter().product::<usize>()).sum();
        prop_assert_eq!(from_specs, count_params(&config));
    }
}

#[test]
fn causal_integrity_is_bitwise() {
    for case in 0..10u64 {
        let (model, store) = small(case);
        let c = model.config().clone();
        let mut rng = Rng::new(500 + case);
        let b = 2;
        let enc = random_ids(b * c.max_len, c.vocab_size, &mut rng);
        let dec = random_ids(b * c.max_len, c.vocab_size, &mut rng);
        let base = model.logits(&store, &enc, &dec, b).unwrap();
        let p = 1 + rng.below(c.max_len - 1);
        let mut changed = dec.clone();
        for bi in 0..b {
            for pos in p..c.max_len {
                let i = bi * c.max_len + pos;
                changed[i] = (changed[i] + 1 + rng.below(c.vocab_size - 1) as u32) % c.vocab_size as u32;
            }
        }
        let after = model.logits(&store, &enc, &changed, b).unwrap();
        let row = c.vocab_size;
        let mut later_differs = false;
        for bi in 0..b {
            for pos in 0..c.max_len {
                let at = (bi * c.max_len + pos) * row;
                let (x, y) = (&base.data()[at..at + row], &after.data()[at..at + row]);
                if pos < p {
                    assert!(
                        x.iter().zip(y).all(|(u, v)| u.to_bits() == v.to_bits()),
                        "case {case}: position {pos} changed after perturbing from {p}"
                    );
                } else if x != y {
                    later_differs = true;
                }
            }
        }
        assert!(later_differs, "case {case}: perturbation had no effect at all");
    }
}

#[test]
fn encoder_input_reaches_logits() {
    for seed in 0..5 {
        let (model, store) = small(seed);
        let c = model.config().clone();
        let mut rng = Rng::new(seed + 40);
        let enc = random_ids(c.max_len, c.vocab_size, &mut rng);
        let dec = random_ids(c.max_len, c.vocab_size, &mut rng);
        let mut enc2 = enc.clone();
        enc2[3] = (enc2[3] + 1) % c.vocab_size as u32;
        let a = model.logits(&store, &enc, &dec, 1).unwrap();
        let b = model.logits(&store, &enc2, &dec, 1).unwrap();
        assert_ne!(a, b, "seed {seed}");
    }
}

#[test]
fn zero_cross_attention_values_cut_the_encoder_off() {
    let (model, mut store) = small(3);
    for name in ["dec.cross_attn.v.w", "dec.cross_attn.v.b"] {
        let t = store.get_mut(name).unwrap();
        *t = Tensor::zeros(t.shape().to_vec());
    }
    let c = model.config().clone();
    let mut rng = Rng::new(9);
    let dec = random_ids(c.max_len, c.vocab_size, &mut rng);
    let a = model.logits(&store, &random_ids(c.max_len, c.vocab_size, &mut rng), &dec, 1).unwrap();
    let b = model.logits(&store, &random_ids(c.max_len, c.vocab_size, &mut rng), &dec, 1).unwrap();
    assert_eq!(a, b);
}

#[test]
fn eval_forward_is_pure_and_train_forward_is_seeded() {
    let (model, store) = small(1);
    let c = model.config().clone();
    let mut rng = Rng::new(2);
    let enc = random_ids(2 * c.max_len, c.vocab_size, &mut rng);
    let dec = random_ids(2 * c.max_len, c.vocab_size, &mut rng);
    assert_eq!(
        model.logits(&store, &enc, &dec, 2).unwrap(),
        model.logits(&store, &enc, &dec, 2).unwrap()
    );
    let train = |seed| {
        let mut g = Graph::new();
        let p = model.bind(&mut g, &store);
        let out = model.forward(&mut g, &p, &enc, &dec, 2, Some(&mut Rng::new(seed))).unwrap();
        g.value(out).clone()
    };
    assert_eq!(train(5), train(5));
    assert_ne!(train(5), train(6));
    assert_ne!(train(5), model.logits(&store, &enc, &dec, 2).unwrap());
}

#[test]
fn default_configuration_shapes() {
    let config = ModelConfig::default();
    assert_eq!(count_params(&config), 4_977_808);
    let model = FNetAutoencoder::<f32>::new(config.clone()).unwrap();
    let store = model.init_params(&mut Rng::new(0)).unwrap();
    assert_eq!(store.num_scalars(), 4_977_808);
    let ids = vec![0u32; 2 * 150];
    let logits = model.logits(&store, &ids, &ids, 2).unwrap();
    assert_eq!(logits.shape(), &[2, 150, 10_000]);
}

#[test]
fn positional_embedding_examples() {
    let (model, mut store) = small(4);
    let c = model.config().clone();
    let ids: Vec<u32> = vec![0; c.max_len];
    let run = |store: &ParamStore<f32>, ids: &[u32]| {
        let mut g = Graph::new();
        let p = model.bind(&mut g, store);
        let out = model
            .positional_embed(&mut g, p.var("enc.tok_embed"), p.var("enc.pos_embed"), ids, 1)
            .unwrap();
        g.value(out).clone()
    };
    let out = run(&store, &ids);
    let tok = store.get("enc.tok_embed").unwrap().data()[..c.embed_dim].to_vec();
    let pos = store.get("enc.pos_embed").unwrap().data().to_vec();
    for p in 0..c.max_len {
        for e in 0..c.embed_dim {
            assert_eq!(out.data()[p * c.embed_dim + e], tok[e] + pos[p * c.embed_dim + e]);
        }
    }
    *store.get_mut("enc.pos_embed").unwrap() = Tensor::zeros(vec![c.max_len, c.embed_dim]);
    let ids: Vec<u32> = (0..c.max_len as u32).collect();
    let out = run(&store, &ids);
    let table = store.get("enc.tok_embed").unwrap().data();
    for (p, &id) in ids.iter().enumerate() {
        let row = &table[id as usize * c.embed_dim..(id as usize + 1) * c.embed_dim];
        assert_eq!(&out.data()[p * c.embed_dim..(p + 1) * c.embed_dim], row);
    }
    let mut g = Graph::new();
    let p = model.bind(&mut g, &store);
    assert!(model
        .positional_embed(&mut g, p.var("enc.tok_embed"), p.var("enc.pos_embed"), &ids[..3], 1)
        .is_err());
}

#[test]
fn out_of_range_ids_rejected() {
    let (model, store) = small(0);
    let c = model.config().clone();
    let mut ids = vec![0u32; c.max_len];
    ids[2] = c.vocab_size as u32;
    assert!(model.logits(&store, &ids, &vec![0; c.max_len], 1).is_err());
}
