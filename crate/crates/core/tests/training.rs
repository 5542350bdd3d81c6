
use ulsqueeze::arch::{ArchId, ArchSpec, Network};
use ulsqueeze::data::{batch_iter, synthetic, AugmentConfig, ImageRecord};
use ulsqueeze::training::{
    cross_entropy, evaluate_source, fit, train_epoch, AdamState, LabelBatch, TrainConfig,
};
use ulsqueeze::{Error, Tensor4};

/// Textbook scalar Adam.
fn adam_reference(mut theta: f64, grads: &[f64]) -> f64 {
    let (lr, b1, b2, eps) = (1e-4, 0.9, 0.999, 1e-7);
    let (mut m, mut v) = (0.0, 0.0);
    for (k, g) in grads.iter().enumerate() {
        let t = (k + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1.powi(t));
        let v_hat = v / (1.0 - b2.powi(t));
        theta -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    theta
}

#[test]
fn adam_three_steps_match_scalar_reference() {
    let mut state = AdamState::<f64>::default();
    let mut theta = [1.0f64];
    for _ in 0..3 {
        let mut params = [("theta".to_string(), &mut theta[..])];
        state.step_slices(&mut params, &[&[1.0]]).unwrap();
    }
    assert_eq!(state.step_count(), 3);
    assert!((theta[0] - adam_reference(1.0, &[1.0, 1.0, 1.0])).abs() < 1e-12);
}

#[test]
fn adam_varying_gradients_and_bounded_steps() {
    let grads = [0.3, -2.0, 5.0, 1e-6, -0.01];
    let mut state = AdamState::<f64>::default();
    let mut theta = [0.5f64];
    let mut prev = theta[0];
    for g in grads {
        let mut params = [("theta".to_string(), &mut theta[..])];
        state.step_slices(&mut params, &[&[g]]).unwrap();
        assert!((theta[0] - prev).abs() <= 10.0 * 1e-4);
        prev = theta[0];
    }
    assert!((theta[0] - adam_reference(0.5, &grads)).abs() < 1e-12);
    assert!(state.second_moments().flatten().all(|&v| v >= 0.0));
}

#[test]
fn adam_rejects_changed_parameter_layout() {
    let mut state = AdamState::<f64>::default();
    let mut a = [0.0f64; 2];
    state
        .step_slices(&mut [("a".to_string(), &mut a[..])], &[&[1.0, 1.0]])
        .unwrap();
    let mut b = [0.0f64; 3];
    let err = state.step_slices(&mut [("a".to_string(), &mut b[..])], &[&[1.0, 1.0, 1.0]]);
    assert!(matches!(err, Err(Error::Usage(_))));
}

#[test]
fn cross_entropy_is_batch_permutation_invariant() {
    let probs = Tensor4::<f64>::new([3, 1, 1, 2], vec![0.9, 0.1, 0.3, 0.7, 0.6, 0.4]).unwrap();
    let swapped = Tensor4::<f64>::new([3, 1, 1, 2], vec![0.6, 0.4, 0.9, 0.1, 0.3, 0.7]).unwrap();
    let a = cross_entropy(&probs, &LabelBatch::new(vec![0, 1, 1]).unwrap()).unwrap();
    let b = cross_entropy(&swapped, &LabelBatch::new(vec![1, 0, 1]).unwrap()).unwrap();
    assert!((a - b).abs() < 1e-15);
    assert!(LabelBatch::new(vec![0, 2]).is_err());
}

#[test]
fn zero_network_evaluates_to_ties() {
    let net = Network::<f32>::zeros(ArchSpec::for_arch(ArchId::Variant1)).unwrap();
    let records = synthetic::records(3, 0);
    let preds = evaluate_source(&net, &records, 4).unwrap();
    assert_eq!(preds.len(), 6);
    assert!(preds.iter().all(|p| p.score == 0.5 && p.predicted == 0));
    assert_eq!(preds, evaluate_source(&net, &records, 4).unwrap());
}

fn overfit_set() -> Vec<ImageRecord> {
    synthetic::records(16, 7)
}

#[test]
fn one_epoch_lowers_overfit_loss() {
    let records = overfit_set();
    let config = TrainConfig {
        augment: false,
        seed: 7,
        ..TrainConfig::default()
    };
    let mut net = Network::<f32>::init(ArchSpec::for_arch(ArchId::Variant1), 7).unwrap();
    let x = Tensor4::stack(&records.iter().map(|r| r.pixels.clone()).collect::<Vec<_>>()).unwrap();
    let labels: Vec<usize> = records.iter().map(|r| r.label.index()).collect();
    let before = net.loss(&x, &labels).unwrap();
    let mut state = config.optimizer();
    let batches = batch_iter(&records, 32, 7, 0, None).unwrap();
    let log = train_epoch(&mut net, batches, &mut state, &config, 0).unwrap();
    let after = net.loss(&x, &labels).unwrap();
    assert!(after < before, "{after} !< {before}");
    assert!((log.mean_loss - before as f64).abs() < 1e-5);
    assert_eq!(state.step_count(), 1);
}

#[test]
fn fit_is_deterministic_with_augmentation_and_dropout() {
    let records = synthetic::records(4, 1);
    let (train, val) = records.split_at(6);
    let config = TrainConfig {
        epochs: 2,
        batch_size: 4,
        seed: 5,
        dropout: Some(0.5),
        validate_each_epoch: true,
        ..TrainConfig::default()
    };
    let run = || {
        let mut net = Network::<f32>::init(ArchSpec::for_arch(ArchId::Variant1), 5).unwrap();
        let out = fit(&mut net, train, Some(val), &config, &AugmentConfig::default(), |_| Ok(())).unwrap();
        let logs: Vec<_> = out.logs.iter().map(|l| (l.epoch, l.mean_loss, l.train_acc, l.val_acc)).collect();
        (net.tensors().into_iter().map(|(n, v)| (n, v.to_vec())).collect::<Vec<_>>(), logs)
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert_eq!(a.1.len(), 2);
    assert!(a.1.iter().all(|l| l.3.is_some()));
}

#[test]
fn empty_training_source_is_rejected() {
    let empty: Vec<ImageRecord> = Vec::new();
    let mut net = Network::<f32>::zeros(ArchSpec::for_arch(ArchId::Variant1)).unwrap();
    let out = fit::<_, Vec<ImageRecord>>(&mut net, &empty, None, &TrainConfig::default(), &AugmentConfig::default(), |_| Ok(()));
    assert!(matches!(out, Err(Error::EmptyDataset)));
}

#[test]
fn dropout_rate_is_validated() {
    let config = TrainConfig {
        dropout: Some(1.0),
        ..TrainConfig::default()
    };
    assert!(config.validate().is_err());
}
