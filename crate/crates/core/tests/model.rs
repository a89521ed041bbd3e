use fewshot_ec::corpus::{EventExample, Vocabulary};
use fewshot_ec::model::{
    classify, prototypes_attention, prototypes_mean, AttentionActivation, EncoderConfig, EncoderKind, HeadConfig,
    HeadKind, Model, ModelConfig,
};
use fewshot_ec::numkernel::Tensor;
use fewshot_ec::rng::SeedRng;
use rand::Rng;

fn sentence(words: &[&str], trigger: usize) -> EventExample {
    EventExample::new(words.iter().map(|w| w.to_string()).collect(), trigger, "Attack").unwrap()
}

fn vocab() -> Vocabulary {
    let words = ["<pad>", "<unk>", "troops", "were", "ordered", "to", "cease", "fire"];
    Vocabulary::from_words(words.iter().map(|w| w.to_string()).collect()).unwrap()
}

fn model(kind: EncoderKind) -> Model {
    let config = ModelConfig {
        encoder: EncoderConfig {
            kind,
            ..EncoderConfig::default()
        },
        head: HeadConfig::default(),
    };
    Model::random(config, vocab(), &mut SeedRng::new(11)).unwrap()
}

#[test]
fn cnn_encoding_has_filter_width() {
    let m = model(EncoderKind::Cnn);
    let ex = sentence(&["troops", "were", "ordered", "to", "cease", "fire"], 5);
    let enc = m.encode_all(&[&ex]).unwrap();
    assert_eq!(enc[0].shape(), &[250]);
}

#[test]
fn transformer_single_token_has_model_width() {
    let m = model(EncoderKind::Transformer);
    let ex = sentence(&["fire"], 0);
    let enc = m.encode_all(&[&ex]).unwrap();
    assert_eq!(enc[0].shape(), &[512]);
    assert!(enc[0].data().iter().all(|v| v.is_finite()));
}

#[test]
fn trigger_position_changes_encoding() {
    for kind in [EncoderKind::Cnn, EncoderKind::Transformer] {
        let m = model(kind);
        let words = ["troops", "were", "ordered", "to", "cease", "fire"];
        let enc = m.encode_all(&[&sentence(&words, 5), &sentence(&words, 1)]).unwrap();
        assert_ne!(enc[0].data(), enc[1].data(), "{kind}");
    }
}

#[test]
fn encoding_is_bitwise_deterministic_and_batch_independent() {
    for kind in [EncoderKind::Cnn, EncoderKind::Transformer] {
        let m = model(kind);
        let a = sentence(&["troops", "cease", "fire"], 2);
        let b = sentence(&["ordered", "to", "cease", "fire", "were"], 3);
        let alone = m.encode_all(&[&a]).unwrap();
        let batched = m.encode_all(&[&b, &a]).unwrap();
        assert_eq!(alone[0].data(), m.encode_all(&[&a]).unwrap()[0].data());
        for (x, y) in alone[0].data().iter().zip(batched[1].data()) {
            assert!((x - y).abs() <= 1e-12, "{kind}: {x} vs {y}");
        }
    }
}

#[test]
fn unknown_tokens_fall_back() {
    let m = model(EncoderKind::Cnn);
    let known = m.encode_all(&[&sentence(&["<unk>", "fire"], 1)]).unwrap();
    let unknown = m.encode_all(&[&sentence(&["zzz", "fire"], 1)]).unwrap();
    assert_eq!(known[0].data(), unknown[0].data());
}

#[test]
fn checkpoint_round_trip_is_bit_faithful() {
    for head in HeadKind::ALL {
        let config = ModelConfig {
            encoder: EncoderConfig {
                word_dim: 6,
                pos_dim: 3,
                cnn_filters: 4,
                ..EncoderConfig::default()
            },
            head: HeadConfig::new(head),
        };
        let m = Model::random(config, vocab(), &mut SeedRng::new(5)).unwrap();
        let back = Model::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        for (name, t) in m.params.iter() {
            let b = back.params.get(name).unwrap();
            assert!(t.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}

#[test]
fn checkpoint_rejects_unknown_version() {
    let m = model(EncoderKind::Cnn);
    let json = m.to_json().unwrap().replacen("\"format_version\":1", "\"format_version\":9", 1);
    assert!(Model::from_json(&json).is_err());
}

fn random_vec(rng: &mut SeedRng, d: usize) -> Tensor {
    Tensor::vector((0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())
}

#[test]
fn mean_prototype_matches_scalar_loop() {
    let mut rng = SeedRng::new(3);
    let support: Vec<Tensor> = (0..10).map(|_| random_vec(&mut rng, 6)).collect();
    let got = prototypes_mean(&[support.clone()]).unwrap();
    for j in 0..6 {
        let mut s = 0.0;
        for v in &support {
            s += v.data()[j];
        }
        assert!((got[0].data()[j] - s / 10.0).abs() <= 1e-12);
    }
}

#[test]
fn attention_prototype_is_a_convex_combination() {
    let mut rng = SeedRng::new(4);
    let support: Vec<Tensor> = (0..4).map(|_| random_vec(&mut rng, 5)).collect();
    let q = random_vec(&mut rng, 5);
    for act in [AttentionActivation::Tanh, AttentionActivation::Identity] {
        let c = &prototypes_attention(&[support.clone()], &q, act).unwrap()[0];
        for j in 0..5 {
            let lo = support.iter().map(|s| s.data()[j]).fold(f64::INFINITY, f64::min);
            let hi = support.iter().map(|s| s.data()[j]).fold(f64::NEG_INFINITY, f64::max);
            assert!(c.data()[j] >= lo - 1e-12 && c.data()[j] <= hi + 1e-12);
        }
    }
}

#[test]
fn argmax_is_nearest_prototype_for_random_cases() {
    let mut rng = SeedRng::new(9);
    for kind in [HeadKind::Matching, HeadKind::Proto] {
        let head = HeadConfig::new(kind);
        for _ in 0..1000 {
            let n = rng.gen_range(2..6);
            let d = rng.gen_range(1..5);
            let protos: Vec<Tensor> = (0..n).map(|_| random_vec(&mut rng, d)).collect();
            let q = random_vec(&mut rng, d);
            let p = classify(&q, &protos, &head, None).unwrap();
            let dist: Vec<f64> = protos
                .iter()
                .map(|c| fewshot_ec::model::distance(&q, c, &head, None).unwrap())
                .collect();
            let nearest = (0..n).fold(0, |b, i| if dist[i] < dist[b] { i } else { b });
            let top = (0..n).fold(0, |b, i| if p[i] > p[b] { i } else { b });
            assert_eq!(nearest, top);
            assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}
