use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use texton::ensemble::{EnsembleModel, MethodSelection, ModelConfig};
use texton::gradcheck::{grad_check, layer_suite, GradCheckConfig};
use texton::nn::{uniform, Mode, ParamStore};

#[test]
fn every_layer_passes_at_1e_4() {
    let cfg = GradCheckConfig { max_coords: 150, seed: 42, ..Default::default() };
    let reports = layer_suite(&cfg).unwrap();
    let names: Vec<&str> = reports.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, ["histogram", "encoding", "fractal", "gap", "backbone block", "fc head"]);
    for r in &reports {
        assert!(r.coords_checked >= 100, "{r:?}");
        assert!(r.passed(), "{r:?}");
    }
}

#[test]
fn whole_model_through_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::<f64>::new();
    let mut mc = ModelConfig::desk();
    mc.selection = MethodSelection::all();
    mc.backbone.stage_channels = vec![4, 6, 8];
    mc.te.histogram.reduced_channels = 4;
    mc.te.encoding.out_features = 8;
    mc.te.gap.out_features = 6;
    let mut model = EnsembleModel::new(mc, 3, &mut store, &mut rng).unwrap();
    let x = uniform(&[3, 3, 64, 64], -1.0, 1.0, &mut rng);
    let labels = [2usize, 0, 1];
    let report = grad_check(
        "model",
        &mut store,
        &[x],
        |tape, store, v| {
            let logits = model.forward(tape, store, v[0], Mode::Train)?;
            tape.softmax_cross_entropy(logits, &labels)
        },
        &GradCheckConfig { max_coords: 120, seed: 1, ..Default::default() },
    );
    assert!(report.passed(), "{report:?}");
}
