use mdanet_core::segnet::{load_checkpoint, save_checkpoint, ModelConfig, SegNet, Variant};
use mdanet_core::tensor::{Graph, Tensor};
use mdanet_core::train::{
    class_dice, dice_loss, dice_score, evaluate, fit, one_hot, predict_volume, EvalReport, TrainConfig,
};
use mdanet_core::train::SubjectDice;
use mdanet_core::volume::{
    class_intensity, make_samples, synth_phantom, synth_phantom_with, PhantomConfig, Subject, View, ViewPlan,
};

fn clean_phantom(seed: u64, dims: [usize; 3]) -> mdanet_core::Volume {
    synth_phantom_with(
        seed,
        &PhantomConfig {
            dims,
            noise_sigma: 0.0,
            ..PhantomConfig::default()
        },
    )
    .unwrap()
}

#[test]
fn uniform_probabilities_give_closed_form_loss() {
    let labels: Vec<u8> = (0..48).map(|i| [0, 0, 1, 2, 3, 0][i % 6]).collect();
    let k = 4;
    let targets = one_hot::<f64>(&labels, &[1, 6, 8], k).unwrap();
    let mut g = Graph::new();
    let p = g.param(Tensor::from_fn(&[1, 6, 8, k], |_| 1.0 / k as f64));
    let l = dice_loss(&mut g, p, targets).unwrap();

    let n = labels.len() as f64;
    let mut mean = 0.0;
    for c in 1..k as u8 {
        let t = labels.iter().filter(|&&l| l == c).count() as f64;
        mean += (2.0 * t / k as f64 + 1e-6) / (n / k as f64 + t + 1e-6);
    }
    mean /= (k - 1) as f64;
    assert!((g.value(l).data()[0] - (1.0 - mean)).abs() < 1e-12);
}

#[test]
fn zero_noise_phantom_is_recovered_by_band_thresholds() {
    let k = 4;
    let v = clean_phantom(5, [20, 24, 22]);
    let labels = v.labels.as_ref().unwrap();
    let cuts: Vec<f64> = (0..k - 1)
        .map(|c| 0.5 * (class_intensity(c, k) + class_intensity(c + 1, k)))
        .collect();
    for (&x, &l) in v.image.iter().zip(labels) {
        let predicted = cuts.iter().filter(|&&t| x as f64 > t).count();
        assert_eq!(predicted, l as usize);
    }
    let mut hist = [0usize; 4];
    labels.iter().for_each(|&l| hist[l as usize] += 1);
    assert!(hist.iter().all(|&h| h > 0));
    assert!(hist[0] > hist[1..].iter().sum::<usize>());
}

#[test]
fn sample_counts_follow_view_axis() {
    let subjects: Vec<Subject> = (0..3)
        .map(|i| Subject::new(format!("s{i}"), synth_phantom(i, [6, 10, 8], 4).unwrap()))
        .collect();
    assert_eq!(make_samples(&subjects, View::Sagittal).len(), 18);
    assert_eq!(make_samples(&subjects, View::Axial).len(), 30);
    assert_eq!(make_samples(&subjects, View::Coronal).len(), 24);
}

#[test]
fn volume_dice_equals_pooled_slice_counts() {
    let truth = synth_phantom(3, [9, 12, 10], 4).unwrap();
    let t = truth.labels.clone().unwrap();
    let pred: Vec<u8> = t.iter().enumerate().map(|(i, &l)| if i % 7 == 0 { (l + 1) % 4 } else { l }).collect();
    for view in View::ALL {
        let plan = ViewPlan::new(truth.dims, view);
        let (pv, tv) = (plan.to_view(&pred), plan.to_view(&t));
        let per = plan.m * plan.n;
        for c in 0..4u8 {
            let (mut both, mut sum) = (0usize, 0usize);
            for (ps, ts) in pv.chunks(per).zip(tv.chunks(per)) {
                both += ps.iter().zip(ts).filter(|(&a, &b)| a == c && b == c).count();
                sum += ps.iter().filter(|&&a| a == c).count() + ts.iter().filter(|&&b| b == c).count();
            }
            let pooled = 2.0 * both as f64 / sum as f64;
            assert!((pooled - dice_score(&pred, &t, c)).abs() < 1e-15);
        }
    }
}

#[test]
fn reference_predictors_bracket_the_score() {
    let v = synth_phantom(8, [10, 12, 10], 4).unwrap();
    let truth = v.labels.clone().unwrap();
    let perfect = EvalReport::from_subjects(
        View::Axial,
        vec![SubjectDice {
            subject: "a".into(),
            dice: class_dice(&truth, &truth, 4),
        }],
    );
    assert_eq!(perfect.foreground_mean(), 1.0);

    let background = vec![0u8; truth.len()];
    let constant = EvalReport::from_subjects(
        View::Axial,
        vec![SubjectDice {
            subject: "a".into(),
            dice: class_dice(&background, &truth, 4),
        }],
    );
    assert_eq!(constant.foreground_mean(), 0.0);
    assert_eq!(constant.rows(0, "plain").len(), 3);
}

fn tiny_setup(variant: Variant) -> (ModelConfig, Vec<Subject>) {
    let subjects: Vec<Subject> = (0..3)
        .map(|i| Subject::new(format!("s{i}"), clean_phantom(40 + i, [10, 16, 16])))
        .collect();
    let mut cfg = ModelConfig {
        depth: 2,
        base_channels: 4,
        dropout_rate: 0.0,
        ..ModelConfig::new(variant, 16, 16)
    };
    if let Some(c) = cfg.compression.as_mut() {
        c.radius = 2;
    }
    (cfg, subjects)
}

#[test]
fn training_loss_decreases_on_clean_phantoms() {
    for variant in [Variant::Plain, Variant::Mda] {
        let (cfg, subjects) = tiny_setup(variant);
        let mut net = SegNet::<f32>::build(cfg, 11).unwrap();
        let tc = TrainConfig {
            lr: 1e-3,
            max_epochs: 30,
            batch_size: 4,
            seed: 4,
            ..TrainConfig::default()
        };
        let report = fit(&mut net, &make_samples(&subjects, View::Sagittal), &tc).unwrap();
        let losses: Vec<f64> = report.epochs.iter().map(|e| e.loss).collect();
        let head = losses[..5].iter().sum::<f64>() / 5.0;
        let tail = losses[25..].iter().sum::<f64>() / 5.0;
        assert!(tail < head - 0.05, "{variant}: {head:.4} -> {tail:.4}");
        let best = losses.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(report.best_loss, best);
        assert_eq!(losses[report.best_epoch], best);
    }
}

#[test]
fn saved_model_predicts_identically_after_reload() {
    let (cfg, subjects) = tiny_setup(Variant::Mda);
    let mut net = SegNet::<f32>::build(cfg.clone(), 2).unwrap();
    let tc = TrainConfig {
        lr: 1e-3,
        max_epochs: 2,
        batch_size: 4,
        ..TrainConfig::default()
    };
    fit(&mut net, &make_samples(&subjects[..2], View::Sagittal), &tc).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&net, &path).unwrap();
    let back = load_checkpoint::<f32>(&path, Some(&cfg)).unwrap();
    let v = &subjects[2].volume;
    assert_eq!(
        predict_volume(&net, v, View::Sagittal, 3).unwrap(),
        predict_volume(&back, v, View::Sagittal, 5).unwrap()
    );
    let a = evaluate(&net, &subjects[2..], View::Sagittal, 4).unwrap();
    let b = evaluate(&back, &subjects[2..], View::Sagittal, 4).unwrap();
    assert_eq!(a, b);
}
