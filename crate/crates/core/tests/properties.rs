use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use texton::autodiff::Tape;
use texton::data::augment::{five_crop, ChannelStats};
use texton::data::{split_random, AugmentConfig, SyntheticTextureSpec, Transform};
use texton::ensemble::{
    aggregate_bilinear, aggregate_concat, correlation_matrix, cross_correlation, AggregatorKind, EnsembleModel, MethodSelection, ModelConfig,
};
use texton::nn::{Mode, ParamStore};
use texton::te::{encoding_assignments, EncodingConfig, EncodingLayer, Method};
use texton::tensor::Tensor;
use texton::training::{Protocol, Scheduler, TrainConfig};

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

proptest! {
    #[test]
    fn bilinear_width_is_the_product(i in 1usize..40, j in 1usize..40, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (random(&[2, i], &mut rng), random(&[2, j], &mut rng));
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let y = aggregate_bilinear(&mut tape, &[va, vb]).unwrap();
        prop_assert_eq!(tape.shape(y), &[2, i * j]);
        prop_assert_eq!(AggregatorKind::Bilinear.width(&[i, j]).unwrap(), i * j);
        for n in 0..2 {
            for p in 0..i {
                for q in 0..j {
                    let want = a.get(&[n, p]) * b.get(&[n, q]);
                    prop_assert!((tape.value(y).get(&[n, p * j + q]) - want).abs() < 1e-15);
                }
            }
        }
        let c = aggregate_concat(&mut tape, &[va, vb]).unwrap();
        prop_assert_eq!(tape.shape(c), &[2, i + j]);
        if i >= 2 && j >= 2 {
            prop_assert!(i * j >= i + j);
        }
    }
}

#[test]
fn bilinear_rejects_other_arities() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::ones([1, 3]));
    assert!(aggregate_bilinear(&mut tape, &[a]).is_err());
    assert!(aggregate_bilinear(&mut tape, &[a, a, a]).is_err());
    assert!(AggregatorKind::Bilinear.check(MethodSelection::proposed()).is_err());
}

// ---- encoding ----

#[test]
fn encoding_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut store = ParamStore::<f64>::new();
    let layer = EncodingLayer::new(EncodingConfig { n_codes: 8, out_features: 16 }, 6, &mut store, &mut rng).unwrap();
    let x = random(&[4, 6, 5, 5], &mut rng);

    let a = encoding_assignments(&x, &store.get(layer.codewords).value, &store.get(layer.smoothing).value).unwrap();
    assert_eq!(a.shape(), &[4, 25, 8]);
    for row in a.data().chunks(8) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let e = layer.encode(&mut tape, &store, xv).unwrap();
    assert_eq!(tape.shape(e), &[4, 48]);
    for row in tape.value(e).data().chunks(48) {
        assert!((row.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
    }

    let one = Tensor::from_fn([1, 6], |i| i as f64 * 0.1);
    let a1 = encoding_assignments(&x, &one, &Tensor::ones([1])).unwrap();
    assert!(a1.data().iter().all(|&v| v == 1.0));
}

// ---- protocol ----

#[test]
fn ten_random_splits_at_three_to_one() {
    let mut m = SyntheticTextureSpec::easy(25, 16, 0).generate().unwrap();
    split_random(&mut m, 10, 0.75, 3).unwrap();
    assert_eq!(m.splits.len(), 10);
    for s in &m.splits {
        assert_eq!((s.train.len(), s.test.len()), (75, 25));
        s.check(100).unwrap();
    }
    assert!(m.splits.windows(2).all(|w| w[0] != w[1]));
}

#[test]
fn five_crop_shapes() {
    let img = Tensor::<f32>::from_fn([3, 73, 90], |i| (i % 13) as f32 / 13.0);
    let crops = five_crop(&img, 64).unwrap();
    assert_eq!(crops.len(), 5);
    assert!(crops.iter().all(|c| c.shape() == [3, 64, 64]));
    assert_eq!(crops[0].get(&[0, 0, 0]), img.get(&[0, 0, 0]));
    assert_eq!(crops[3].get(&[1, 63, 63]), img.get(&[1, 72, 89]));
}

fn cosine(lr: f64, lr_min: f64, pos: f64, period: f64) -> f64 {
    lr_min + (lr - lr_min) * (1.0 + (std::f64::consts::PI * pos / period).cos()) / 2.0
}

#[test]
fn schedules_match_closed_forms() {
    let cfg = TrainConfig { epochs: 30, lr: 5e-3, scheduler: Scheduler::Cosine, ..TrainConfig::default() };
    for e in 0..30 {
        assert!((cfg.lr_at(e as f64) - cosine(5e-3, 0.0, e as f64, 30.0)).abs() < 1e-9);
    }
    // Periods 10, 20, 40 starting at epochs 0, 10, 30.
    let cfg = TrainConfig { epochs: 70, lr: 1e-3, lr_min: 1e-5, scheduler: Scheduler::CosineWarmRestarts, ..TrainConfig::default() };
    for e in 0..70 {
        let (start, period) = if e < 10 { (0, 10) } else if e < 30 { (10, 20) } else { (30, 40) };
        let want = cosine(1e-3, 1e-5, (e - start) as f64, period as f64);
        assert!((cfg.lr_at(e as f64) - want).abs() < 1e-9, "epoch {e}");
    }
    assert_eq!(cfg.lr_at(10.0), 1e-3);
}

#[test]
fn published_protocols() {
    let table = [
        (Protocol::Kth, 30, 32, 5e-3, Scheduler::Cosine, false),
        (Protocol::Fmd, 30, 16, 1e-3, Scheduler::CosineWarmRestarts, false),
        (Protocol::Dtd, 30, 64, 1e-2, Scheduler::Cosine, true),
        (Protocol::Minc, 20, 64, 5e-3, Scheduler::CosineWarmRestarts, false),
        (Protocol::Gtos, 20, 64, 5e-3, Scheduler::Cosine, true),
        (Protocol::GtosMobile, 20, 128, 5e-2, Scheduler::CosineWarmRestarts, false),
    ];
    for (p, epochs, batch, lr, sched, five) in table {
        let c = p.train_config();
        assert_eq!((c.epochs, c.batch_size, c.lr, c.scheduler, p.five_crop()), (epochs, batch, lr, sched, five), "{p:?}");
        assert_eq!(c.momentum, 0.9);
    }
}

#[test]
fn normalised_training_views_are_standard() {
    let mut m = SyntheticTextureSpec::easy(6, 80, 5).generate().unwrap();
    split_random(&mut m, 1, 0.75, 0).unwrap();
    let train = m.splits[0].train.clone();
    let t = Transform::fit(AugmentConfig::desk(), &m, &train).unwrap();
    let views: Vec<Tensor<f32>> = train.iter().flat_map(|&i| t.eval_views(&m.samples[i].pixels).unwrap()).collect();
    let stats = ChannelStats::from_images(&views).unwrap();
    for c in 0..3 {
        assert!(stats.mean[c].abs() < 1e-4, "{stats:?}");
        assert!((stats.std[c] - 1.0).abs() < 1e-3, "{stats:?}");
    }
}

// ---- correlation ----

#[test]
fn correlation_matrix_is_symmetric_with_unit_diagonal() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&[50, 6], &mut rng);
    let m = correlation_matrix(&x).unwrap();
    for i in 0..6 {
        assert!((m.get(i, i) - 1.0).abs() < 1e-12);
        for j in 0..6 {
            assert!((m.get(i, j) - m.get(j, i)).abs() < 1e-12);
        }
    }
}

#[test]
fn independent_and_duplicated_descriptors() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let a = random(&[1024, 8], &mut rng);
    let b = random(&[1024, 8], &mut rng);
    let ind = cross_correlation(&a, &b).unwrap();
    assert!(ind.mean_abs < 0.1 && ind.mean_best_abs < 0.1, "{ind:?}");
    let dup = cross_correlation(&a, &a).unwrap();
    assert!((dup.mean_best_abs - 1.0).abs() < 1e-12);
}

// ---- model ----

fn desk_config(selection: MethodSelection) -> ModelConfig {
    ModelConfig { selection, ..ModelConfig::desk() }
}

#[test]
fn gap_only_model_is_backbone_pool_projection_classifier() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::<f64>::new();
    let mut cfg = desk_config(MethodSelection::new(&[Method::Gap]).unwrap());
    cfg.backbone.input_resolution = 32;
    assert_eq!(cfg.aggregated_width().unwrap(), 48);
    let mut model = EnsembleModel::new(cfg, 3, &mut store, &mut rng).unwrap();
    let x = random(&[2, 3, 32, 32], &mut rng);

    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let logits = model.forward(&mut tape, &store, xv, Mode::Eval).unwrap();

    let mut tape2 = Tape::new();
    let xv2 = tape2.constant(x);
    let fmap = model.backbone.forward(&mut tape2, &store, xv2, Mode::Eval).unwrap();
    let pooled = tape2.global_avg_pool(fmap).unwrap();
    let texton::te::TeHead::Gap(gap) = &mut model.heads[0] else { panic!("expected the GAP head") };
    let proj = gap.projection.forward(&mut tape2, &store, pooled).unwrap();
    let desc = gap.bn.forward(&mut tape2, &store, proj, Mode::Eval).unwrap();
    let manual = model.fc.forward(&mut tape2, &store, desc).unwrap();
    assert_eq!(tape.value(logits).shape(), &[2, 3]);
    assert!(tape.value(logits).max_abs_diff(tape2.value(manual)) < 1e-12);
}

#[test]
fn forward_is_classifier_of_concatenated_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::<f64>::new();
    let mut model = EnsembleModel::new(desk_config(MethodSelection::all()), 4, &mut store, &mut rng).unwrap();
    let x = random(&[3, 3, 64, 64], &mut rng);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let logits = model.forward(&mut tape, &store, xv, Mode::Eval).unwrap();
    let feats = model.features(&mut tape, &store, xv, Mode::Eval).unwrap();
    let order: Vec<Method> = feats.iter().map(|f| f.0).collect();
    assert_eq!(order, Method::ALL.to_vec());
    let vars: Vec<_> = feats.iter().map(|f| f.1).collect();
    let agg = aggregate_concat(&mut tape, &vars).unwrap();
    assert_eq!(tape.shape(agg)[1], 128 + 48 + 128 + 16);
    let again = model.fc.forward(&mut tape, &store, agg).unwrap();
    assert!(tape.value(logits).max_abs_diff(tape.value(again)) < 1e-12);
}

#[test]
fn fractal_head_needs_a_large_enough_map() {
    let mut cfg = desk_config(MethodSelection::proposed());
    cfg.backbone.input_resolution = 32;
    assert!(cfg.validate().is_err());
    cfg.te.fractal.upsample = 4;
    assert!(cfg.validate().is_ok());
}
