#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! One PASS/FAIL line per acceptance criterion.
//!
//! Runs without the libtest harness so the lines always print; exits
//! nonzero when any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use clap::Parser;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use texton::autodiff::Tape;
use texton::cli::{run, Cli};
use texton::config::{RunConfig, Scale};
use texton::data::augment::five_crop;
use texton::data::synth::fbm_surface;
use texton::data::{split_random, SyntheticTextureSpec};
use texton::ensemble::{aggregate_bilinear, EnsembleModel, MethodSelection, ModelConfig};
use texton::experiments::report::read_ablation_csv;
use texton::experiments::rf_importance;
use texton::gradcheck::{layer_suite, GradCheckConfig};
use texton::nn::{Mode, ParamStore};
use texton::te::{encoding_assignments, local_fractal_dimensions, EncodingConfig, EncodingLayer, Method, TeConfig, TeHead};
use texton::tensor::Tensor;
use texton::training::{Protocol, Scheduler, TrainConfig};

type Check = Result<String, String>;
type Criterion<'a> = (usize, &'a str, Box<dyn Fn() -> Check + 'a>);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)*) => {
        if !$cond {
            return Err(format!($($msg)*));
        }
    };
}

fn cli(args: &[&str]) -> Result<(), String> {
    let parsed = Cli::try_parse_from(std::iter::once("texton").chain(args.iter().copied())).map_err(|e| e.to_string())?;
    run(&parsed).map_err(|e| e.to_string())
}

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

fn c1_shape_law() -> Check {
    let te = TeConfig::paper();
    let c = ModelConfig::paper().backbone.out_channels();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f32>::new();
    let x_b = Tensor::<f32>::from_fn([2, c, 7, 7], |i| ((i * 7919) % 101) as f32 / 101.0);
    let mut widths = Vec::new();
    for m in Method::ALL {
        let mut head = TeHead::new(m, &te, c, &mut store, &mut rng).map_err(|e| e.to_string())?;
        let mut tape = Tape::new();
        let xv = tape.constant(x_b.clone());
        let y = head.forward(&mut tape, &store, xv, Mode::Train).map_err(|e| e.to_string())?;
        widths.push((m, tape.shape(y)[1]));
    }
    let width = |sel: &[Method]| widths.iter().filter(|w| sel.contains(&w.0)).map(|w| w.1).sum::<usize>();
    let got = [
        width(&[Method::DeepTen, Method::Histogram, Method::Fap]),
        width(&Method::ALL),
        width(&[Method::DeepTen, Method::Gap]),
    ];
    ensure!(got == [272, 320, 176], "measured widths {got:?}, expected [272, 320, 176]");
    for (sel, want) in [(MethodSelection::proposed(), 272), (MethodSelection::all(), 320)] {
        let cfg = ModelConfig { selection: sel, ..ModelConfig::paper() };
        ensure!(cfg.aggregated_width().map_err(|e| e.to_string())? == want, "config width for {sel}");
    }
    Ok(format!("{{DeepTEN,Hist,FAP}}={} all={} {{DeepTEN,GAP}}={}", got[0], got[1], got[2]))
}

fn c2_bilinear_law() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let (i, j) = (rng.gen_range(1..64), rng.gen_range(1..64));
        let mut tape = Tape::new();
        let a = tape.constant(random(&[3, i], &mut rng));
        let b = tape.constant(random(&[3, j], &mut rng));
        let y = aggregate_bilinear(&mut tape, &[a, b]).map_err(|e| e.to_string())?;
        ensure!(tape.shape(y) == [3, i * j], "bilinear of {i} and {j} gave {:?}", tape.shape(y));
        if i >= 2 && j >= 2 {
            ensure!(i * j >= i + j, "{i}*{j} < {i}+{j}");
        }
    }
    Ok("20 random pairs, width I*J and I*J >= I+J".into())
}

fn c3_gradients() -> Check {
    let reports = layer_suite(&GradCheckConfig { max_coords: 128, ..Default::default() }).map_err(|e| e.to_string())?;
    let mut parts = Vec::new();
    for r in &reports {
        ensure!(r.coords_checked >= 100, "{} checked only {} coordinates", r.name, r.coords_checked);
        ensure!(r.passed(), "{}: max rel err {:.3e} ({:?})", r.name, r.max_rel_error, r.failure.as_ref().or(r.worst.as_ref()));
        parts.push(format!("{} {:.1e}", r.name, r.max_rel_error));
    }
    ensure!(reports.len() == 6, "expected six layers");
    Ok(parts.join(", "))
}

fn c4_encoding() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::<f64>::new();
    let layer = EncodingLayer::new(EncodingConfig::default(), 16, &mut store, &mut rng).map_err(|e| e.to_string())?;
    let x = random(&[4, 16, 7, 7], &mut rng);
    let a = encoding_assignments(&x, &store.get(layer.codewords).value, &store.get(layer.smoothing).value).map_err(|e| e.to_string())?;
    let worst_row = a.data().chunks(8).map(|r| (r.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
    ensure!(worst_row < 1e-6, "assignment rows off by {worst_row:e}");
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let e = layer.encode(&mut tape, &store, xv).map_err(|e| e.to_string())?;
    let worst_norm = tape.value(e).data().chunks(8 * 16).map(|r| (r.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs()).fold(0.0, f64::max);
    ensure!(worst_norm < 1e-6, "encoding norm off by {worst_norm:e}");
    let single = encoding_assignments(&x, &Tensor::zeros([1, 16]), &Tensor::ones([1])).map_err(|e| e.to_string())?;
    ensure!(single.data().iter().all(|&v| v == 1.0), "K=1 assignments are not all ones");
    Ok(format!("row sums within {worst_row:.1e}, norms within {worst_norm:.1e}, K=1 all ones"))
}

fn c5_fractal() -> Check {
    let scales = [1, 2, 4, 8];
    let flat = local_fractal_dimensions(&Tensor::<f64>::full([1, 1, 32, 32], 0.4), &scales).map_err(|e| e.to_string())?;
    ensure!(flat.data().iter().all(|&d| (d - 2.0).abs() <= 0.1), "constant image is not 2");

    let n = 64;
    let mut ordered = 0;
    let mut worst_oracle = 0.0f64;
    let (mut mean_rough, mut mean_smooth) = (0.0, 0.0);
    for seed in 0..20 {
        let mut dims = [0.0; 2];
        for (k, hurst) in [0.2, 0.8].into_iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 2 + k as u64);
            let z = fbm_surface(n, hurst, &mut rng);
            let x = Tensor::new([1, 1, n, n], z.clone()).map_err(|e| e.to_string())?;
            let d = local_fractal_dimensions(&x, &scales).map_err(|e| e.to_string())?;
            dims[k] = d.mean();
            // Independent box count on a sparse grid of windows.
            let g = z.iter().cloned().fold(f64::MIN, f64::max) - z.iter().cloned().fold(f64::MAX, f64::min);
            for i in (0..n - 8).step_by(7) {
                for j in (0..n - 8).step_by(5) {
                    let want = common::dbc_reference(&z, n, i, j, &scales, n as f64, g);
                    worst_oracle = worst_oracle.max((d.get(&[0, 0, i, j]) - want).abs());
                }
            }
        }
        if dims[0] > dims[1] {
            ordered += 1;
        }
        mean_rough += dims[0] / 20.0;
        mean_smooth += dims[1] / 20.0;
    }
    ensure!(worst_oracle < 1e-9, "layer differs from the box-count oracle by {worst_oracle:e}");
    ensure!(ordered == 20, "H=0.2 above H=0.8 in only {ordered}/20 seeds");
    Ok(format!("constant=2, fBm ordered 20/20 (mean D {mean_rough:.3} vs {mean_smooth:.3}), oracle diff {worst_oracle:.1e}"))
}

fn c6_ablation(work: &Path) -> Check {
    let ds = work.join("synth");
    let out = work.join("ablation");
    let (ds_s, out_s) = (ds.to_string_lossy().into_owned(), out.to_string_lossy().into_owned());
    let start = Instant::now();
    cli(&["synth", "--out", &ds_s, "--per-class", "40", "--size", "64", "--seed", "1"])?;
    cli(&["ablate", "--scale", "desk", "--dataset", &ds_s, "--out", &out_s, "--workers", "1"])?;
    let rows = read_ablation_csv(&out.join("ablation.csv")).map_err(|e| e.to_string())?;
    ensure!(rows.len() == 15, "{} cells in ablation.csv", rows.len());
    let mut masks: Vec<u8> = rows.iter().map(|r| r.selection.mask()).collect();
    masks.sort_unstable();
    masks.dedup();
    ensure!(masks.len() == 15, "duplicate selections in the grid");
    let proposed = rows.iter().find(|r| r.selection == MethodSelection::proposed()).ok_or("no proposed cell")?;
    // Threshold confirmed by the pilot run (100% at these settings).
    ensure!(proposed.mean_acc >= 90.0, "{{DeepTEN,Hist,FAP}} reached {:.2}% (< 90%)", proposed.mean_acc);
    let lowest = rows.iter().map(|r| r.mean_acc).fold(f64::INFINITY, f64::min);
    Ok(format!(
        "15 cells, {{DeepTEN,Hist,FAP}} {:.2}% after 15 epochs, lowest cell {lowest:.2}%, {:.0}s",
        proposed.mean_acc,
        start.elapsed().as_secs_f64()
    ))
}

fn c7_importance() -> Check {
    let table = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/paper_fmd.csv");
    let rows = read_ablation_csv(&table).map_err(|e| e.to_string())?;
    ensure!(rows.len() == 15, "published table has {} rows", rows.len());
    let design: Vec<_> = rows.iter().map(|r| (r.selection.methods(), r.mean_acc)).collect();
    let seeds: Vec<u64> = (0..10).collect();
    let r = rf_importance(&design, 200, &seeds).map_err(|e| e.to_string())?;
    ensure!((r.importances.iter().sum::<f64>() - 1.0).abs() < 1e-6, "importances do not sum to 1");
    let names: Vec<&str> = r.ranking.iter().map(|m| m.name()).collect();
    ensure!(r.ranking[0] == Method::Gap && r.ranking[1] == Method::DeepTen, "ranking {names:?}");
    let bottom = &r.ranking[2..];
    ensure!(bottom.contains(&Method::Histogram) && bottom.contains(&Method::Fap), "ranking {names:?}");
    let imp: Vec<String> = r.ranking.iter().map(|&m| format!("{} {:.3}", m.name(), r.importance(m))).collect();
    Ok(format!("{} ({} of 10 seeds agree)", imp.join(" > "), r.ranking_votes))
}

fn c8_protocol() -> Check {
    let mut m = SyntheticTextureSpec::easy(10, 16, 0).generate().map_err(|e| e.to_string())?;
    split_random(&mut m, 10, 0.75, 0).map_err(|e| e.to_string())?;
    ensure!(m.splits.len() == 10, "{} splits", m.splits.len());
    for s in &m.splits {
        s.check(m.len())?;
        ensure!(s.train.len() == 3 * s.test.len(), "split sizes {} / {}", s.train.len(), s.test.len());
    }
    let crops = five_crop(&Tensor::<f32>::zeros([3, 256, 300]), 224).map_err(|e| e.to_string())?;
    ensure!(crops.len() == 5 && crops.iter().all(|c| c.shape() == [3, 224, 224]), "five-crop shapes");

    let cosine = |lr: f64, lo: f64, pos: f64, period: f64| lo + 0.5 * (lr - lo) * (1.0 + (std::f64::consts::PI * pos / period).cos());
    let mut worst = 0.0f64;
    for p in [Protocol::Kth, Protocol::Fmd, Protocol::Dtd, Protocol::Minc, Protocol::Gtos, Protocol::GtosMobile] {
        let cfg = p.train_config();
        for e in 0..cfg.epochs {
            let want = match cfg.scheduler {
                Scheduler::Cosine => cosine(cfg.lr, cfg.lr_min, e as f64, cfg.epochs as f64),
                Scheduler::CosineWarmRestarts => {
                    let (mut start, mut period) = (0, cfg.t0);
                    while e >= start + period {
                        start += period;
                        period *= cfg.t_mult;
                    }
                    cosine(cfg.lr, cfg.lr_min, (e - start) as f64, period as f64)
                }
            };
            worst = worst.max((cfg.lr_at(e as f64) - want).abs());
        }
    }
    ensure!(worst <= 1e-9, "schedule deviates by {worst:e}");
    Ok(format!("10 splits at 3:1, 5 crops of 224, schedules within {worst:.1e}"))
}

fn c9_determinism(work: &Path) -> Check {
    let ds = work.join("small");
    let ds_s = ds.to_string_lossy().into_owned();
    cli(&["synth", "--out", &ds_s, "--per-class", "8", "--size", "64", "--seed", "3"])?;
    let mut outputs = Vec::new();
    for k in 0..2 {
        let out = work.join(format!("det{k}")).to_string_lossy().into_owned();
        cli(&["train", "--scale", "desk", "--dataset", &ds_s, "--out", &out, "--seed", "5", "--workers", "1", "--set", "train.epochs=3"])?;
        outputs.push(std::fs::read(work.join(format!("det{k}/metrics.csv"))).map_err(|e| e.to_string())?);
    }
    ensure!(outputs[0] == outputs[1], "metrics.csv differs between identical runs");
    // The resolved config reproduces the run on its own.
    let resolved = work.join("det0/config.resolved").to_string_lossy().into_owned();
    let out = work.join("det_resolved").to_string_lossy().into_owned();
    cli(&["train", "--config", &resolved, "--out", &out])?;
    let again = std::fs::read(work.join("det_resolved/metrics.csv")).map_err(|e| e.to_string())?;
    ensure!(again == outputs[0], "rerun from config.resolved differs");
    Ok(format!("metrics.csv identical across 3 runs ({} bytes)", outputs[0].len()))
}

fn c10_statement() -> Check {
    let cfg = RunConfig::preset(Scale::Paper);
    let bb = &cfg.model.backbone;
    ensure!(bb.out_channels() == 512 && bb.out_resolution(bb.input_resolution) == 7, "full-size backbone is not 512x7x7");
    ensure!(cfg.augment.resize == 256 && cfg.augment.crop == 224, "full-size crops");
    ensure!(cfg.data.n_splits == 10 && cfg.data.train_fraction == 0.75, "full-size split plan");
    ensure!(cfg.train == TrainConfig { seed: cfg.train.seed, ..Protocol::Fmd.train_config() }, "full-size training protocol");
    let mut store = ParamStore::<f32>::new();
    let model = EnsembleModel::new(cfg.model.clone(), 6, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).map_err(|e| e.to_string())?;
    ensure!(model.fc.in_features() == 272, "full-size classifier width");
    Ok(format!(
        "NOT reproducible here: benchmark accuracies (FMD 83.10 +- 0.83, KTH 88.047 +- 3.45, MINC 80.80 +- 0.44) and the \
         with/without-GAP deltas need ImageNet-pretrained weights and the licensed datasets. The full-size preset \
         ({} parameters, 224 crops, FMD protocol, 10 splits) is in place for that attempt.",
        store.num_scalars()
    ))
}

fn main() {
    let work = tempfile::tempdir().expect("temporary directory");
    let criteria: Vec<Criterion> = vec![
        (1, "shape law", Box::new(c1_shape_law)),
        (2, "bilinear law", Box::new(c2_bilinear_law)),
        (3, "gradient suite", Box::new(c3_gradients)),
        (4, "encoding invariants", Box::new(c4_encoding)),
        (5, "fractal oracle", Box::new(c5_fractal)),
        (6, "ablation grid", Box::new(|| c6_ablation(work.path()))),
        (7, "feature importance", Box::new(c7_importance)),
        (8, "protocol fidelity", Box::new(c8_protocol)),
        (9, "determinism", Box::new(|| c9_determinism(work.path()))),
        (10, "scope statement", Box::new(c10_statement)),
    ];
    let mut failed = 0;
    for (n, name, check) in criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {n:>2} PASS  {name} [{secs:.1}s]: {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name} [{secs:.1}s]: {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
