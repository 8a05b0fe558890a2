use proptest::prelude::*;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use scaling_forge::mlp::{train, MlpModel, MlpSpec, Samples, TrainConfig};

fn gaussian_rows(seed: u64, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

#[test]
fn gradients_match_central_differences() {
    let spec = MlpSpec::new(50, 2, 8).unwrap();
    let model = MlpModel::<f64>::init(spec, 17).unwrap();
    let rows = gaussian_rows(3, 6, 50);
    let xs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
    let ys = [0.3, -0.2, 1.1, 0.0, 0.5, -0.7];
    let (_, grad) = model.loss_and_grad(&xs, &ys).unwrap();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for k in 0..model.params().len() {
        let mut plus = model.clone();
        plus.params_mut()[k] += h;
        let mut minus = model.clone();
        minus.params_mut()[k] -= h;
        let lp = plus.loss_and_grad(&xs, &ys).unwrap().0;
        let lm = minus.loss_and_grad(&xs, &ys).unwrap().0;
        let fd = (lp - lm) / (2.0 * h);
        let rel = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-6);
        worst = worst.max(rel);
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn exact_targets_give_zero_loss_and_readout_gradient() {
    let spec = MlpSpec::new(10, 2, 4).unwrap();
    let model = MlpModel::<f64>::init(spec, 5).unwrap();
    let rows = gaussian_rows(8, 4, 10);
    let xs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
    let ys = model.forward_batch(&xs).unwrap();
    let (loss, grad) = model.loss_and_grad(&xs, &ys).unwrap();
    assert_eq!(loss, 0.0);
    let readout = spec.n_n + 1;
    assert!(grad[grad.len() - readout..].iter().all(|&g| g == 0.0));

    // residuals doubled -> loss x4
    let base = ys.iter().map(|y| y + 0.25).collect::<Vec<_>>();
    let doubled = ys.iter().map(|y| y + 0.5).collect::<Vec<_>>();
    let l1 = model.loss_and_grad(&xs, &base).unwrap().0;
    let l2 = model.loss_and_grad(&xs, &doubled).unwrap().0;
    assert!((l2 - 4.0 * l1).abs() < 1e-12);
}

#[test]
fn constant_mean_predictor_scores_target_variance() {
    let spec = MlpSpec::new(3, 1, 2).unwrap();
    let mut model = MlpModel::<f64>::zeros(spec).unwrap();
    let ys = [0.1, 0.4, 0.9, 0.2];
    let mean = ys.iter().sum::<f64>() / 4.0;
    let n = model.params().len();
    model.params_mut()[n - 1] = mean;
    let x = [1.0, 2.0, 3.0];
    let xs = vec![&x[..]; 4];
    let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / 4.0;
    assert!((model.evaluate(&xs, &ys).unwrap() - var).abs() < 1e-15);
}

fn mean_task(seed: u64, rows: usize) -> (Vec<Vec<f32>>, Vec<f32>) {
    let x: Vec<Vec<f32>> = gaussian_rows(seed, rows, 50)
        .into_iter()
        .map(|r| r.into_iter().map(|v| v as f32).collect())
        .collect();
    let y = x
        .iter()
        .map(|r| r.iter().sum::<f32>() / r.len() as f32)
        .collect();
    (x, y)
}

fn samples<'a>(x: &'a [Vec<f32>], y: &[f32]) -> Samples<'a, f32> {
    Samples {
        inputs: x.iter().map(|r| r.as_slice()).collect(),
        targets: y.to_vec(),
    }
}

#[test]
fn learns_the_mean_of_its_inputs() {
    let (xt, yt) = mean_task(1, 512);
    let (xv, yv) = mean_task(2, 64);
    let (xs, ys) = mean_task(3, 256);
    let spec = MlpSpec::new(50, 2, 16).unwrap();
    let cfg = TrainConfig {
        seed: 9,
        max_epochs: 100,
        ..TrainConfig::default()
    };
    let test = samples(&xs, &ys);
    let (model, report) = train(
        spec,
        &samples(&xt, &yt),
        &samples(&xv, &yv),
        Some(&test),
        &cfg,
    )
    .unwrap();
    let untrained = MlpModel::<f32>::zeros(spec).unwrap();
    let baseline = untrained.evaluate(&test.inputs, &test.targets).unwrap();
    let var = ys.iter().map(|&y| f64::from(y).powi(2)).sum::<f64>() / ys.len() as f64;
    assert!((baseline - var).abs() < 1e-9);
    let eps = report.test_mse.unwrap();
    assert!(eps < 1e-3, "test mse {eps}, baseline {baseline}");
    assert_eq!(eps, model.evaluate(&test.inputs, &test.targets).unwrap());

    // best-epoch restore and reproducibility
    let best = report
        .history
        .iter()
        .map(|e| e.val)
        .fold(f64::INFINITY, f64::min);
    assert_eq!(report.best_val_loss, best);
    assert_eq!(report.history[report.best_epoch].val, best);
    let val = samples(&xv, &yv);
    assert_eq!(model.evaluate(&val.inputs, &val.targets).unwrap(), best);
    let (_, again) = train(spec, &samples(&xt, &yt), &val, Some(&test), &cfg).unwrap();
    assert_eq!(again.history, report.history);
}

#[test]
fn early_stopping_honours_patience() {
    let (xt, yt) = mean_task(4, 64);
    // validation targets unrelated to the inputs: loss stops improving early
    let (xv, _) = mean_task(5, 32);
    let yv = vec![5.0f32; 32];
    let cfg = TrainConfig {
        seed: 1,
        patience: 3,
        max_epochs: 200,
        ..TrainConfig::default()
    };
    let (_, report) = train(
        MlpSpec::new(50, 1, 4).unwrap(),
        &samples(&xt, &yt),
        &samples(&xv, &yv),
        None,
        &cfg,
    )
    .unwrap();
    assert!(report.epochs_run < 200);
    assert_eq!(report.epochs_run, report.best_epoch + cfg.patience + 1);
}

#[test]
fn divergence_is_reported() {
    let (xt, yt) = mean_task(6, 64);
    let huge: Vec<f32> = yt.iter().map(|_| 1e30).collect();
    let cfg = TrainConfig {
        lr0: 1e30,
        lr_decay: 1.0,
        ..TrainConfig::default()
    };
    let result = train(
        MlpSpec::new(50, 1, 4).unwrap(),
        &samples(&xt, &huge),
        &samples(&xt, &yt),
        None,
        &cfg,
    );
    assert!(matches!(
        result,
        Err(scaling_forge::mlp::MlpError::Diverged { .. })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn batched_forward_matches_single(seed in 0u64..1000, batch in 1usize..9) {
        let spec = MlpSpec::new(33, 3, 5).unwrap();
        let model = MlpModel::<f32>::init(spec, seed).unwrap();
        let rows: Vec<Vec<f32>> = gaussian_rows(seed ^ 1, batch, 33)
            .into_iter()
            .map(|r| r.into_iter().map(|v| v as f32).collect())
            .collect();
        let xs: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
        let all = model.forward_batch(&xs).unwrap();
        for (x, y) in xs.iter().zip(all) {
            prop_assert!((model.forward(x).unwrap() - y).abs() < 1e-6);
        }
    }

    #[test]
    fn param_count_matches_instantiation(n_i in 1usize..200, n_l in 1usize..6, n_n in 1usize..40) {
        let spec = MlpSpec::new(n_i, n_l, n_n).unwrap();
        let model = MlpModel::<f32>::zeros(spec).unwrap();
        prop_assert_eq!(model.params().len(), spec.param_count());
    }
}
