use std::sync::Arc;

use fewshot_sar::backbone::{Backbone, Conv64FConfig, PoolingSchedule};
use fewshot_sar::data::{generate_synthetic, sample_episode, EpisodeSpec, ImageChip, SynthConfig};
use fewshot_sar::finetune::{
    cosine_scores, finetune_episode, finetune_head, finetune_predict, head_logits, init_head, pretrain, CosineHead,
    FinetuneConfig, HeadKind, PretrainConfig,
};
use fewshot_sar::autodiff::Var;
use fewshot_sar::nn::normal_tensor;
use fewshot_sar::tensor::Tensor;
use fewshot_sar::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Cosine similarity written out from its definition.
fn cosine_oracle(f: &[f64], w: &[f64], d: usize, c: usize) -> Vec<f64> {
    (0..c)
        .map(|j| {
            let col: Vec<f64> = (0..d).map(|i| w[i * c + j]).collect();
            let dot: f64 = f.iter().zip(&col).map(|(a, b)| a * b).sum();
            let nf = f.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nw = col.iter().map(|a| a * a).sum::<f64>().sqrt();
            dot / (nf * nw)
        })
        .collect()
}

fn labelled(classes: usize, per_class: usize, seed: u64) -> Vec<(Arc<ImageChip>, usize)> {
    let ds = generate_synthetic(&SynthConfig {
        n_classes: classes,
        images_per_class: per_class,
        template_separation: 1.0,
        rng_seed: seed,
        ..SynthConfig::default()
    })
    .unwrap();
    ds.chips
        .iter()
        .flat_map(|(&c, chips)| chips.iter().map(move |ch| (ch.clone(), c)))
        .collect()
}

fn small_backbone(rng: &mut ChaCha8Rng) -> Backbone<f32> {
    Backbone::init(Conv64FConfig::new(PoolingSchedule::Pool4), rng).unwrap()
}

#[test]
fn cosine_scores_match_the_definition() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (d, c) = (7, 4);
    for _ in 0..200 {
        let w: Tensor<f64> = normal_tensor(&[d, c], 1.0, &mut rng);
        let f: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let head = CosineHead::new(w.clone(), &mut rng).unwrap();
        let got = cosine_scores(&f, &head).unwrap();
        let want = cosine_oracle(&f, w.data(), d, c);
        for (g, o) in got.iter().zip(&want) {
            assert!((g - o).abs() <= 1e-6, "{g} vs {o}");
        }
    }
}

#[test]
fn identity_and_orthogonal_columns() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let f = [0.3f64, -1.2, 2.0];
    // w_1 = f, w_2 orthogonal to f
    let w2 = [1.2, 0.3, 0.0];
    let w = Tensor::from_vec(&[3, 2], vec![f[0], w2[0], f[1], w2[1], f[2], w2[2]]);
    let s = cosine_scores(&f, &CosineHead::new(w, &mut rng).unwrap()).unwrap();
    assert!((s[0] - 1.0).abs() < 1e-12);
    assert!(s[1].abs() < 1e-12);
}

#[test]
fn zero_feature_is_undefined() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let head = CosineHead::new(normal_tensor::<f64>(&[3, 2], 1.0, &mut rng), &mut rng).unwrap();
    assert!(matches!(cosine_scores(&[0.0; 3], &head), Err(Error::UndefinedSimilarity)));
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b })
}

proptest! {
    #[test]
    fn cosine_scores_are_scale_invariant_and_bounded(
        f in prop::collection::vec(-10.0f64..10.0, 7),
        w in prop::collection::vec(-5.0f64..5.0, 28),
        alpha in 1e-3f64..1e3,
    ) {
        prop_assume!(f.iter().any(|v| v.abs() > 1e-3));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = CosineHead::new(Tensor::from_vec(&[7, 4], w), &mut rng).unwrap();
        let s = cosine_scores(&f, &head).unwrap();
        let scaled: Vec<f64> = f.iter().map(|v| v * alpha).collect();
        let t = cosine_scores(&scaled, &head).unwrap();
        for (a, b) in s.iter().zip(&t) {
            prop_assert!((a - b).abs() <= 1e-6);
            prop_assert!(*a >= -1.0 - 1e-6 && *a <= 1.0 + 1e-6);
        }
        prop_assert_eq!(argmax(&s), argmax(&t));
    }
}

#[test]
fn separable_embeddings_are_fit_perfectly() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..10 {
        let (n_way, k, d) = (5, 1 + trial % 5, 16);
        let centres: Vec<Vec<f32>> = (0..n_way)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0f32)).collect())
            .collect();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (c, centre) in centres.iter().enumerate() {
            for _ in 0..k {
                let mut v: Vec<f32> = centre.iter().map(|x| x + rng.gen_range(-0.05..0.05f32)).collect();
                v[c] += 4.0;
                data.extend(v);
                labels.push(c);
            }
        }
        let x = Tensor::from_vec(&[labels.len(), d], data);
        for kind in [HeadKind::Linear, HeadKind::Cosine] {
            let pred = finetune_predict(kind, &x, &labels, &x, n_way, &FinetuneConfig::default(), &mut rng).unwrap();
            assert_eq!(pred, labels, "{kind:?} trial {trial}");
        }
    }
}

#[test]
fn heads_have_one_column_per_way() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x: Tensor<f32> = normal_tensor(&[10, 9], 1.0, &mut rng);
    let labels: Vec<usize> = (0..10).map(|i| i % 5).collect();
    let lin = finetune_head(HeadKind::Linear, &x, &labels, 5, &FinetuneConfig::default(), &mut rng).unwrap();
    assert_eq!(lin.tensors()[0].shape(), &[9, 5]);
    assert_eq!(lin.tensors()[1].shape(), &[5]);
    let cos = finetune_head(HeadKind::Cosine, &x, &labels, 5, &FinetuneConfig::default(), &mut rng).unwrap();
    assert_eq!(cos.len(), 1);
    assert_eq!(cos.tensors()[0].shape(), &[9, 5]);
}

#[test]
fn pretraining_separates_synthetic_base_classes() {
    let data = labelled(5, 8, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for kind in [HeadKind::Linear, HeadKind::Cosine] {
        let mut bb = small_backbone(&mut rng);
        let mut head = init_head(kind, 1600, 5, &mut rng);
        let cfg = PretrainConfig {
            epochs: 30,
            batch_size: 10,
            ..PretrainConfig::default()
        };
        let logs = pretrain(&mut bb, &mut head, kind, &data, &cfg, &mut rng).unwrap();
        assert_eq!(logs.len(), 30);
        assert!(logs.iter().flat_map(|l| &l.losses).all(|v| v.is_finite()));
        let last = logs.last().unwrap().accuracy;
        assert!(last > 0.95, "{kind:?}: final epoch accuracy {last}");

        // eval-mode accuracy on the same chips
        let chips: Vec<&ImageChip> = data.iter().map(|(c, _)| c.as_ref()).collect();
        let feats = bb.features(&chips, 16).unwrap();
        let n = chips.len();
        let x = Var::constant(feats.reshape(&[n, 1600]));
        let logits = head_logits(kind, &x, &head.to_constants(), cfg.scale as f32);
        let hits = logits
            .value()
            .argmax_rows()
            .iter()
            .zip(&data)
            .filter(|(p, (_, l))| *p == l)
            .count();
        assert!(hits as f64 / n as f64 > 0.9, "{kind:?}: eval accuracy {hits}/{n}");
    }
}

#[test]
fn zero_epochs_leave_weights_unchanged() {
    let data = labelled(3, 2, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut bb = small_backbone(&mut rng);
    let mut head = init_head(HeadKind::Linear, 1600, 3, &mut rng);
    let (b0, h0) = (bb.clone(), head.clone());
    let cfg = PretrainConfig {
        epochs: 0,
        ..PretrainConfig::default()
    };
    let logs = pretrain(&mut bb, &mut head, HeadKind::Linear, &data, &cfg, &mut rng).unwrap();
    assert!(logs.is_empty());
    assert_eq!(bb, b0);
    assert_eq!(head, h0);
}

#[test]
fn empty_or_misconfigured_pretraining_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut bb = small_backbone(&mut rng);
    let mut head = init_head(HeadKind::Cosine, 1600, 3, &mut rng);
    let err = pretrain(&mut bb, &mut head, HeadKind::Cosine, &[], &PretrainConfig::default(), &mut rng);
    assert!(matches!(err, Err(Error::InsufficientData(_))));
    let data = labelled(3, 1, 0);
    let bad = PretrainConfig {
        lr: 0.0,
        ..PretrainConfig::default()
    };
    assert!(matches!(
        pretrain(&mut bb, &mut head, HeadKind::Cosine, &data, &bad, &mut rng),
        Err(Error::Config(_))
    ));
}

#[test]
fn episode_finetuning_keeps_the_backbone_frozen() {
    let ds = generate_synthetic(&SynthConfig {
        n_classes: 5,
        images_per_class: 6,
        ..SynthConfig::default()
    })
    .unwrap();
    let part = ds.part(0..5);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let bb = small_backbone(&mut rng);
    let before = bb.params.checksum();
    let spec = EpisodeSpec::new(5, 2, 3);
    for kind in [HeadKind::Linear, HeadKind::Cosine] {
        let ep = sample_episode(&part, &spec, &mut rng).unwrap();
        let cfg = FinetuneConfig {
            steps: 20,
            ..FinetuneConfig::default()
        };
        let pred = finetune_episode(&ep, &bb, kind, &cfg, &mut rng).unwrap();
        assert_eq!(pred.len(), 15);
        assert!(pred.iter().all(|&p| p < 5));
        assert_eq!(bb.params.checksum(), before);
    }
}

#[test]
fn malformed_episode_is_rejected_before_training() {
    let ds = generate_synthetic(&SynthConfig {
        n_classes: 3,
        images_per_class: 4,
        ..SynthConfig::default()
    })
    .unwrap();
    let part = ds.part(0..3);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut ep = sample_episode(&part, &EpisodeSpec::new(3, 1, 1), &mut rng).unwrap();
    // a query chip that also sits in the support set
    ep.query[0] = ep.support[0].clone();
    let bb = small_backbone(&mut rng);
    assert!(finetune_episode(&ep, &bb, HeadKind::Linear, &FinetuneConfig::default(), &mut rng).is_err());
}
