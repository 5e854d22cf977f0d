use std::fs;
use std::path::Path;

use mvad::gradcheck::{grad_check_multi, DEFAULT_STEP};
use mvad::metrics;
use mvad::pipeline::{
    aggregate_scores, decoder_forward, distillation_loss, enhance_stage, evaluate, evaluate_with, fpn_fuse,
    load_checkpoint, save_checkpoint, student_forward, train, Conv, FeatureBank, Fpn, ModelConfig, MvadModel, RunConfig,
    Student, CHECKPOINT_MANIFEST,
};
use mvad::synthdata::{generate, Dataset, DatasetSpec, Split};
use mvad::{Error, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_config() -> ModelConfig {
    ModelConfig::with_stages(16, 2, 4, [2, 3, 4], [(2, 2, 1), (1, 1, 1), (1, 1, 0)], 3)
}

fn tiny_run() -> RunConfig {
    let mut run = RunConfig::desk();
    run.model = tiny_config();
    run.train.epochs = 2;
    run.train.batch_samples = 2;
    run
}

fn tiny_dataset(root: &Path, p_test_anom: usize) -> Dataset {
    let spec = DatasetSpec {
        seed: 4,
        p_train: 4,
        p_test_normal: 3,
        p_test_anom,
        views: 2,
        resolution: 16,
        ..DatasetSpec::default()
    };
    generate(&spec, root).unwrap();
    Dataset::open(root).unwrap()
}

/// Teacher features of random images, `[p·v, c_j, h_j, w_j]`.
fn features(model: &MvadModel<f64>, samples: usize, seed: u64) -> [Tensor<f64>; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = Tensor::uniform(vec![samples * model.views(), 3, 16, 16], 0.0, 1.0, &mut rng);
    model.teacher.forward(&images).unwrap()
}

fn decode(model: &MvadModel<f64>, feats: &[Tensor<f64>; 3]) -> [Tensor<f64>; 3] {
    let mut tape = Tape::new();
    let student = model.student.bind(&mut tape, false).unwrap();
    let f = feats.clone().map(|t| tape.constant(t).unwrap());
    let out = student_forward(&mut tape, &f, &student, &model.config).unwrap();
    out.map(|v| tape.value(v).clone())
}

#[test]
fn duplicated_sample_outputs_are_bit_identical() {
    let model = MvadModel::<f64>::new(tiny_config(), 1).unwrap();
    let a = features(&model, 2, 3);
    let v = model.views();
    // batch [s0, s1] and [s1, s0, s0]
    let order = |idx: &[usize]| {
        a.clone().map(|t| {
            let rows: Vec<usize> = idx.iter().flat_map(|&i| (0..v).map(move |j| i * v + j)).collect();
            t.gather(0, &rows).unwrap()
        })
    };
    let base = decode(&model, &a);
    let dup = decode(&model, &order(&[1, 0, 0]));
    for (b, d) in base.iter().zip(&dup) {
        let s0 = b.slice(0, 0, v).unwrap();
        assert_eq!(d.slice(0, v, v).unwrap().data(), s0.data());
        assert_eq!(d.slice(0, 2 * v, v).unwrap().data(), s0.data());
        assert_eq!(d.slice(0, 0, v).unwrap().data(), b.slice(0, v, v).unwrap().data());
    }
}

#[test]
fn teacher_is_frozen_during_training() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(dir.path(), 1);
    let run = tiny_run();
    let mut model = MvadModel::<f32>::new(run.model.clone(), run.seed).unwrap();
    let teacher_before = model.teacher.clone();
    let student_before = model.student.tensors();
    let bank = FeatureBank::build(&model.teacher, &ds.load_split(Split::Train).unwrap(), 3).unwrap();
    let report = train(&mut model, &bank, &run.train, run.seed, |_| {}).unwrap();
    assert_eq!(report.loss_trace.len(), 4);
    assert_eq!(report.steps_per_epoch, 2);
    let before = teacher_before.named();
    let after = model.teacher.named();
    for ((n0, t0), (n1, t1)) in before.iter().zip(&after) {
        assert_eq!(n0, n1);
        assert_eq!(t0.data(), t1.data(), "{n0} changed");
    }
    assert_ne!(model.student.tensors(), student_before);

    // the tape only ever sees student leaves; teacher features are constants
    let feats = bank.select(&[0]).unwrap();
    let (tape, vars, _) = mvad::pipeline::loss_and_grads(&model, &feats).unwrap();
    let mut student_leaves = 0;
    model.student.visit_named(&mut |_, _, _| student_leaves += 1);
    assert_eq!(vars.len(), student_leaves);
    assert!(vars.iter().all(|(v, flag)| !flag || tape.grad(*v).is_some()));
    assert!(vars.iter().all(|(v, flag)| *flag || !tape.requires_grad(*v)));
}

#[test]
fn enhance_stage_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cfg = tiny_config();
    let student = Student::<Tensor<f64>>::random(&cfg, &mut rng);
    let block = student.mvas[0][0].clone();
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(vec![4, 2, 4, 4], 1.0, &mut rng);
        let target = Tensor::randn(vec![4, 2, 4, 4], 1.0, &mut rng);
        let err = grad_check_multi(
            |tape, v| {
                let b = block.bind(tape, false)?;
                let y = enhance_stage(tape, v[0], 2, &[b], cfg.stages[0])?;
                let t = tape.constant(target.clone())?;
                tape.mse_loss(y, t)
            },
            &[x],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err <= 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn enhance_stage_commutes_with_sample_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = tiny_config();
    let student = Student::<Tensor<f64>>::random(&cfg, &mut rng);
    let x = Tensor::randn(vec![6, 2, 4, 4], 1.0, &mut rng);
    let run = |x: &Tensor<f64>| {
        let mut tape = Tape::new();
        let b = student.mvas[0][0].bind(&mut tape, false).unwrap();
        let xv = tape.constant(x.clone()).unwrap();
        let y = enhance_stage(&mut tape, xv, 2, &[b], cfg.stages[0]).unwrap();
        tape.value(y).clone()
    };
    // samples (0, 1, 2) -> (2, 0, 1)
    let rows = [4, 5, 0, 1, 2, 3];
    let permuted = run(&x.gather(0, &rows).unwrap());
    assert_eq!(permuted, run(&x).gather(0, &rows).unwrap());
    assert!(enhance_stage_rejects_partial_samples(&student));
}

fn enhance_stage_rejects_partial_samples(student: &Student<Tensor<f64>>) -> bool {
    let mut tape = Tape::new();
    let b = student.mvas[0][0].bind(&mut tape, false).unwrap();
    let x = tape.constant(Tensor::zeros(vec![3, 2, 4, 4])).unwrap();
    matches!(enhance_stage(&mut tape, x, 2, &[b], tiny_config().stages[0]), Err(Error::Dimension(_)))
}

#[test]
fn fpn_and_decoder_gradients() {
    let cfg = tiny_config();
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Student::<Tensor<f64>>::random(&cfg, &mut rng);
        let stages = [(2, 4), (3, 2), (4, 1)].map(|(c, h)| Tensor::randn(vec![2, c, h, h], 1.0, &mut rng));
        let mut inputs: Vec<Tensor<f64>> = stages.to_vec();
        // nonzero biases keep pre-activations off the ReLU kink at 0
        for c in [&s.fpn.down1, &s.fpn.down2, &s.fpn.project] {
            inputs.push(c.w.clone());
            inputs.push(Tensor::randn(c.b.shape().to_vec(), 0.5, &mut rng));
        }
        let target = Tensor::randn(vec![2, 3, 1, 1], 1.0, &mut rng);
        let err = grad_check_multi(
            |tape, v| {
                let fpn = Fpn {
                    down1: Conv { w: v[3], b: v[4] },
                    down2: Conv { w: v[5], b: v[6] },
                    project: Conv { w: v[7], b: v[8] },
                };
                let y = fpn_fuse(tape, &[v[0], v[1], v[2]], &fpn)?;
                let t = tape.constant(target.clone())?;
                tape.mse_loss(y, t)
            },
            &inputs,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err <= 1e-4, "fpn seed {seed}: {err}");

        let bottleneck = Tensor::randn(vec![2, 3, 1, 1], 1.0, &mut rng);
        let mut inputs = vec![bottleneck];
        for pair in &s.decoder {
            for c in pair {
                inputs.push(c.w.clone());
                inputs.push(Tensor::randn(c.b.shape().to_vec(), 0.5, &mut rng));
            }
        }
        let targets = [(2, 4), (3, 2), (4, 1)].map(|(c, h)| Tensor::randn(vec![2, c, h, h], 1.0, &mut rng));
        let err = grad_check_multi(
            |tape, v| {
                let conv = |i: usize| Conv { w: v[1 + 2 * i], b: v[2 + 2 * i] };
                let dec = [[conv(0), conv(1)], [conv(2), conv(3)], [conv(4), conv(5)]];
                let out = decoder_forward(tape, v[0], &dec)?;
                let t = targets.clone().map(|t| tape.constant(t).unwrap());
                distillation_loss(tape, &t, &out)
            },
            &inputs,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err <= 1e-4, "decoder seed {seed}: {err}");
    }
}

#[test]
fn distillation_loss_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let shapes = [(2, 4), (3, 2), (4, 1)];
    let e = shapes.map(|(c, h)| Tensor::<f64>::randn(vec![3, c, h, h], 1.0, &mut rng));
    let d = shapes.map(|(c, h)| Tensor::<f64>::randn(vec![3, c, h, h], 1.0, &mut rng));
    let mut tape = Tape::new();
    let ev = e.clone().map(|t| tape.constant(t).unwrap());
    let dv = d.clone().map(|t| tape.constant(t).unwrap());
    let l = distillation_loss(&mut tape, &ev, &dv).unwrap();
    let mut want = 0.0;
    for ((a, b), (_, h)) in e.iter().zip(&d).zip(shapes) {
        let sq: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        want += sq / (h * h) as f64 / 3.0;
    }
    assert!((tape.value(l).item() - want).abs() < 1e-12);
}

#[test]
fn training_and_evaluation_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(dir.path(), 2);
    let run = tiny_run();
    let go = || {
        let mut model = MvadModel::<f32>::new(run.model.clone(), run.seed).unwrap();
        let bank = FeatureBank::build(&model.teacher, &ds.load_split(Split::Train).unwrap(), 2).unwrap();
        let trace = train(&mut model, &bank, &run.train, run.seed, |_| {}).unwrap();
        let eval = evaluate(&model, &ds, &run).unwrap();
        (trace, model.student.tensors(), eval.report.to_json(), eval.score_csv())
    };
    let a = go();
    let b = go();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
    assert_eq!(a.3, b.3);
}

#[test]
fn loss_decreases_over_fifty_steps() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(dir.path(), 2);
    let mut run = tiny_run();
    // full batch, so every step sees the same four samples
    run.train.batch_samples = 4;
    run.train.epochs = 51;
    let mut model = MvadModel::<f32>::new(run.model.clone(), run.seed).unwrap();
    let bank = FeatureBank::build(&model.teacher, &ds.load_split(Split::Train).unwrap(), 4).unwrap();
    let trace = train(&mut model, &bank, &run.train, run.seed, |_| {}).unwrap().loss_trace;
    assert_eq!(trace.len(), 51);
    assert!(trace[50].loss < trace[0].loss, "{} -> {}", trace[0].loss, trace[50].loss);
}

#[test]
fn checkpoint_roundtrip_and_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(&dir.path().join("data"), 2);
    let run = tiny_run();
    let mut model = MvadModel::<f32>::new(run.model.clone(), run.seed).unwrap();
    let bank = FeatureBank::build(&model.teacher, &ds.load_split(Split::Train).unwrap(), 4).unwrap();
    train(&mut model, &bank, &run.train, run.seed, |_| {}).unwrap();
    let ck = dir.path().join("ck");
    save_checkpoint(&ck, &model, &run).unwrap();
    let (loaded, run2) = load_checkpoint::<f32>(&ck).unwrap();
    assert_eq!(run2, run);
    assert_eq!(loaded.student.tensors(), model.student.tensors());
    assert_eq!(
        evaluate(&loaded, &ds, &run).unwrap().report,
        evaluate(&model, &ds, &run).unwrap().report
    );
    let manifest = fs::read_to_string(ck.join(CHECKPOINT_MANIFEST)).unwrap();
    assert!(manifest.contains(&format!("seed={}", run.seed)));

    let tampered = manifest.replace("\"lr\":0.002", "\"lr\":0.003");
    assert_ne!(tampered, manifest);
    fs::write(ck.join(CHECKPOINT_MANIFEST), &tampered).unwrap();
    assert!(matches!(load_checkpoint::<f32>(&ck), Err(Error::Compatibility(_))));
    fs::write(ck.join(CHECKPOINT_MANIFEST), &manifest).unwrap();

    let name = "student.fpn.project.w.mvt";
    mvad::mvt::save(&ck.join(name), &Tensor::<f32>::zeros(vec![1, 1, 1, 1])).unwrap();
    assert!(matches!(load_checkpoint::<f32>(&ck), Err(Error::Compatibility(_))));
}

#[test]
fn evaluation_mismatch_is_a_compatibility_error() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(dir.path(), 1);
    let mut run = tiny_run();
    run.model = ModelConfig::with_stages(16, 3, 4, [2, 3, 4], [(2, 2, 1), (1, 1, 0), (1, 1, 0)], 3);
    let model = MvadModel::<f32>::new(run.model.clone(), 0).unwrap();
    assert!(matches!(evaluate(&model, &ds, &run), Err(Error::Compatibility(_))));
}

fn auroc_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                num += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
            }
        }
    }
    num / pairs
}

#[test]
fn report_has_ten_metrics_matching_oracles() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(dir.path(), 3);
    let run = tiny_run();
    let model = MvadModel::<f32>::new(run.model.clone(), 3).unwrap();
    let e = evaluate(&model, &ds, &run).unwrap();
    let r = &e.report;
    assert_eq!(r.metric_count(), 10);
    assert!(r.undefined.is_empty());
    let sample = auroc_oracle(&e.scores.sample_scores, &e.sample_labels);
    assert!((r.get("sample.auroc").unwrap() - sample).abs() < 1e-12);
    let img_scores: Vec<f64> = e.scores.image_scores.concat();
    let img_labels: Vec<bool> = e.image_labels.concat();
    assert!((r.get("image.auroc").unwrap() - auroc_oracle(&img_scores, &img_labels)).abs() < 1e-12);
    let px = metrics::ScoredSet::new(
        e.scores.pixel_maps.data().to_vec(),
        e.masks.data().iter().map(|&m| m > 0.5).collect(),
    )
    .unwrap();
    assert_eq!(r.get("pixel.auroc"), Some(metrics::auroc(&px).unwrap()));
    assert_eq!(r.get("pixel.ap"), Some(metrics::average_precision(&px).unwrap()));
    assert_eq!(r.get("pixel.f1max"), Some(metrics::f1_max(&px).unwrap()));
    let pro = r.get("pixel.pro").unwrap();
    assert!((0.0..=1.0).contains(&pro));
    assert_eq!(r.metadata.config_hash, run.hash());
    assert_eq!(r.metadata.samples, 6);
    assert_eq!(r.metadata.images, 12);
    // sample scores are maxima of image scores
    for (s, views) in e.scores.sample_scores.iter().zip(&e.scores.image_scores) {
        assert_eq!(*s, views.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }
}

#[test]
fn identity_reconstruction_gives_zero_maps() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(dir.path(), 2);
    let run = tiny_run();
    let model = MvadModel::<f32>::new(run.model.clone(), 0).unwrap();
    let e = evaluate_with(&model, &ds, &run, &mut |f| Ok(f.clone())).unwrap();
    assert!(e.scores.pixel_maps.data().iter().all(|&v| v == 0.0));
    assert_eq!(e.report.get("sample.auroc"), Some(0.5));
    assert_eq!(e.report.get("pixel.pro"), Some(0.0));
}

#[test]
fn single_class_split_reports_nulls_with_reasons() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(dir.path(), 0);
    let run = tiny_run();
    let model = MvadModel::<f32>::new(run.model.clone(), 0).unwrap();
    let r = evaluate(&model, &ds, &run).unwrap().report;
    assert_eq!(r.metric_count(), 10);
    for key in ["sample.auroc", "sample.ap", "sample.f1max", "image.auroc", "pixel.auroc", "pixel.pro"] {
        assert_eq!(r.get(key), None, "{key}");
        assert!(r.undefined.contains_key(key), "{key}");
    }
    let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
    assert!(json["pixel"]["pro"].is_null());
}

proptest! {
    #[test]
    fn aggregation_takes_exact_maxima(p in 1usize..4, v in 2usize..5, h in 1usize..5, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let maps = Tensor::<f64>::randn(vec![p * v, h, h], 1.0, &mut rng);
        let s = aggregate_scores(&maps, p, v).unwrap();
        for i in 0..p {
            for j in 0..v {
                let plane = &maps.data()[(i * v + j) * h * h..(i * v + j + 1) * h * h];
                let m = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert_eq!(s.image_scores[i][j], m);
            }
            let m = s.image_scores[i].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(s.sample_scores[i], m);
        }
    }
}
