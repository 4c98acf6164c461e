use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use proptest::prelude::*;

use super::train::gradients;
use super::*;
use crate::control::Control;
use crate::fixtures::concept_images;
use crate::imaging::images_to_tensor;

fn toy() -> BeganConfig {
    BeganConfig {
        iterations: 6,
        batch_size: 4,
        image_side: 32,
        channels: 4,
        embedding_dim: 8,
        checkpoint_interval: 2,
        ..BeganConfig::default()
    }
}

#[test]
fn control_law_hand_case() {
    assert!((update_k(0.5, 0.2, 0.05, 0.5, 1e-3) - 0.50005).abs() < 1e-15);
    assert_eq!(update_k(0.0, 0.1, 0.5, 0.5, 1e-3), 0.0);
    assert_eq!(update_k(0.3, 0.4, 0.2, 0.5, 1e-3), 0.3);
}

proptest! {
    #[test]
    fn control_law_stays_in_unit_interval(k in 0.0..=1.0f64, lr in 0.0..10.0f64, lf in 0.0..10.0f64, lambda in 1e-6..1.0f64) {
        let next = update_k(k, lr, lf, 0.5, lambda);
        prop_assert!((0.0..=1.0).contains(&next));
    }
}

#[test]
fn default_config_values() {
    let c = BeganConfig::default();
    assert_eq!((c.iterations, c.batch_size, c.image_side), (17000, 16, 128));
    assert_eq!((c.learning_rate, c.gamma, c.lambda_k, c.k_initial), (1e-4, 0.5, 1e-3, 0.0));
    assert_eq!(c.latent_dim(), 100);
    assert_eq!(c.checkpoint_interval, 500);
}

#[test]
fn config_validation() {
    for bad in [
        BeganConfig { gamma: 0.0, ..toy() },
        BeganConfig { gamma: 1.5, ..toy() },
        BeganConfig { lambda_k: 0.0, ..toy() },
        BeganConfig { image_side: 48, ..toy() },
        BeganConfig { image_side: 16, ..toy() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
    }
    assert!(BeganConfig { gamma: 1.0, ..toy() }.validate().is_ok());
}

#[test]
fn latent_validation() {
    assert!(LatentVector::new(vec![0.0; 99]).is_err());
    assert!(LatentVector::new(vec![1.5; 100]).is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z = LatentVector::sample(&mut rng);
    assert_eq!(z.values().len(), 100);
    assert!(z.values().iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn generator_shape_range_and_purity() {
    for side in [32, 64] {
        let model = BeganModel::new(&BeganConfig { image_side: side, ..toy() }).unwrap();
        let z = LatentVector::sample(&mut ChaCha8Rng::seed_from_u64(2));
        let t = model.generate_batch(&[&z]);
        assert_eq!(t.dim(), (1, 3, side, side));
        assert!(t.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(model.generate(&z), model.generate(&z));
        assert_eq!(model.reconstruct(&t).dim(), t.dim());
    }
}

#[test]
fn reconstruction_loss_properties() {
    let a = Tensor::from_elem((2, 3, 4, 4), 0.25);
    assert_eq!(reconstruction_loss(&a, &a), 0.0);
    let b = Tensor::from_elem((2, 3, 4, 4), 0.75);
    assert!((reconstruction_loss(&a, &b) - 0.5).abs() < 1e-15);
}

fn loss_terms(model: &BeganModel, x: &Tensor, zs: &[LatentVector], k: f64) -> (f64, f64) {
    let fake = model.generate_batch(&zs.iter().collect::<Vec<_>>());
    let l_real = reconstruction_loss(x, &model.reconstruct(x));
    let l_fake = reconstruction_loss(&fake, &model.reconstruct(&fake));
    (l_real - k * l_fake, l_fake)
}

#[test]
fn gradients_match_finite_differences() {
    let cfg = toy();
    let model = BeganModel::new(&cfg).unwrap();
    let data = concept_images(2, 32, 3);
    let x = images_to_tensor(&data.iter().map(|r| &r.pixels).collect::<Vec<_>>()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let zs: Vec<LatentVector> = (0..2).map(|_| LatentVector::sample(&mut rng)).collect();
    let k = 0.3;
    let (_, _, d_grads, g_grads) = gradients(&model, &x, &zs, k);
    let eps = 1e-6;

    // Discriminator: d(L_real - k L_fake)/dw with the fake batch held fixed.
    let fake = model.generate_batch(&zs.iter().collect::<Vec<_>>());
    let d_loss = |m: &BeganModel| reconstruction_loss(&x, &m.reconstruct(&x)) - k * reconstruction_loss(&fake, &m.reconstruct(&fake));
    for layer in [0, 2, model.discriminator.len() - 1] {
        let analytic = d_grads.layers[layer].as_ref().unwrap().weight[[0, 1]];
        let mut plus = model.clone();
        plus.discriminator.layers[layer].params_mut().unwrap().weight[[0, 1]] += eps;
        let mut minus = model.clone();
        minus.discriminator.layers[layer].params_mut().unwrap().weight[[0, 1]] -= eps;
        let numeric = (d_loss(&plus) - d_loss(&minus)) / (2.0 * eps);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        assert!(rel < 1e-4, "D layer {layer}: {analytic} vs {numeric}");
    }
    // Generator: dL_fake/dw through both paths.
    for layer in [0, 2, model.generator.len() - 1] {
        let analytic = g_grads.layers[layer].as_ref().unwrap().weight[[0, 1]];
        let mut plus = model.clone();
        plus.generator.layers[layer].params_mut().unwrap().weight[[0, 1]] += eps;
        let mut minus = model.clone();
        minus.generator.layers[layer].params_mut().unwrap().weight[[0, 1]] -= eps;
        let numeric = (loss_terms(&plus, &x, &zs, k).1 - loss_terms(&minus, &x, &zs, k).1) / (2.0 * eps);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        assert!(rel < 1e-4, "G layer {layer}: {analytic} vs {numeric}");
    }
}

#[test]
fn small_dataset_is_rejected() {
    let data = concept_images(3, 32, 1);
    assert!(matches!(train_began(&data, &toy(), None, &Control::new()), Err(Error::Invalid(_))));
}

#[test]
fn toy_training_is_finite_and_clamped() {
    let data = concept_images(8, 32, 1);
    let (_, report) = train_began(&data, &toy(), None, &Control::new()).unwrap();
    assert_eq!(report.history.len(), 6);
    for r in &report.history {
        assert!(r.l_real.is_finite() && r.l_fake.is_finite() && r.m_global.is_finite());
        assert!((0.0..=1.0).contains(&r.k_t));
    }
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let data = concept_images(8, 32, 1);
    let (model, _) = train_began(&data, &toy(), None, &Control::new()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path()).unwrap();
    let loaded = BeganModel::load(dir.path()).unwrap();
    let z = LatentVector::sample(&mut ChaCha8Rng::seed_from_u64(9));
    assert_eq!(loaded.generate_batch(&[&z]), model.generate_batch(&[&z]));
}

#[test]
fn interrupted_training_resumes_identically() {
    let data = concept_images(8, 32, 1);
    let (straight, straight_report) = train_began(&data, &toy(), None, &Control::new()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let steps = Arc::new(AtomicUsize::new(0));
    let control = Control::new();
    let flag = control.cancel_flag();
    let counter = steps.clone();
    let control = control.with_progress(move |_, done, _| {
        counter.store(done, Ordering::SeqCst);
        if done == 3 {
            flag.store(true, Ordering::SeqCst);
        }
    });
    let err = train_began(&data, &toy(), Some(dir.path()), &control).unwrap_err();
    assert!(matches!(err, Error::Interrupted));
    assert_eq!(steps.load(Ordering::SeqCst), 3);

    let (resumed, report) = train_began(&data, &toy(), Some(dir.path()), &Control::new()).unwrap();
    assert_eq!(report.resumed_from, Some(2));
    assert_eq!(resumed, straight);
    assert_eq!(report.history, straight_report.history);
    let kept: Vec<usize> = train::list_checkpoints(dir.path()).unwrap().into_iter().map(|(i, _)| i).collect();
    assert_eq!(kept, vec![4, 6]);
    let csv = dir.path().join("ckpt-6/history.csv");
    assert_eq!(load_history(&csv).unwrap(), straight_report.history);
}

#[test]
fn checkpoint_with_other_config_conflicts() {
    let data = concept_images(8, 32, 1);
    let dir = tempfile::tempdir().unwrap();
    train_began(&data, &toy(), Some(dir.path()), &Control::new()).unwrap();
    let other = BeganConfig { gamma: 0.7, ..toy() };
    assert!(matches!(train_began(&data, &other, Some(dir.path()), &Control::new()), Err(Error::Conflict(_))));
}

#[test]
fn candidates_are_seeded_and_reproducible() {
    let model = BeganModel::new(&toy()).unwrap();
    let a = model.sample_candidates(16, 5);
    let b = model.sample_candidates(16, 5);
    assert_eq!(a.len(), 16);
    assert_eq!(a, b);
    let one = model.sample_candidates(1, 5);
    assert_eq!(one[0], a[0]);
    for r in &a {
        assert_eq!(r.provenance, Provenance::Generated);
        assert_eq!(model.regenerate(r).unwrap(), r.pixels);
    }
}
