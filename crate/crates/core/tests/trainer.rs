mod common;

use common::{fd_gradient, rel_error};
use qimagegen::cli_io::{make_synthetic, SyntheticKind};
use qimagegen::discriminator::{CriticConfig, CriticNetwork};
use qimagegen::generator::GeneratorConfig;
use qimagegen::image_codec::{Encoding, Image};
use qimagegen::rng;
use qimagegen::trainer::*;
use rand::Rng;

fn data() -> Vec<Image> {
    make_synthetic(SyntheticKind::TwoPattern, 4, 64, &mut rng(100)).unwrap().images
}

fn small_trainer(seed: u64) -> Trainer {
    let config = TrainConfig {
        batch_size: 4,
        n_critic: 2,
        iterations: 6,
        checkpoint_interval: 3,
        mmd_samples: 16,
        seed,
        ..TrainConfig::default()
    };
    Trainer::new(
        GeneratorConfig::task_specific(Encoding::Frqi, 4, 2, 2, 2),
        CriticConfig::desk(4, 1),
        config,
    )
    .unwrap()
}

#[test]
fn adam_matches_hand_recurrence() {
    let mut adam = Adam::new(2);
    let mut p = vec![0.5, -1.0];
    let grads = [[0.2, -0.3], [0.1, 0.4], [-0.5, 0.0]];
    let (lr, b1, b2, eps) = (0.01, 0.5, 0.9, 1e-8);
    let (mut m, mut v, mut want) = ([0.0; 2], [0.0; 2], p.clone());
    for (t, g) in grads.iter().enumerate() {
        adam.step(&mut p, g, lr, b1, b2, eps);
        let t = t as i32 + 1;
        for i in 0..2 {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / (1.0 - b1.powi(t));
            let vh = v[i] / (1.0 - b2.powi(t));
            want[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    assert_eq!(p, want);
    assert_eq!(adam.t, 3);
}

#[test]
fn critic_loss_gradient_matches_finite_differences() {
    let mut r = rng(1);
    let cfg = CriticConfig {
        filters: [2, 2, 3],
        ..CriticConfig::desk(4, 1)
    };
    let critic = CriticNetwork::init(cfg.clone(), &mut r).unwrap();
    let real = data()[..3].to_vec();
    let fake: Vec<Image> = (0..3)
        .map(|_| Image::gray(4, (0..16).map(|_| r.random()).collect()).unwrap())
        .collect();
    let u = [0.2, 0.7, 0.5];
    let out = critic_loss_with(&critic, &real, &fake, 10.0, &u).unwrap();
    assert!((out.loss - (out.wasserstein + 10.0 * out.penalty)).abs() < 1e-12);
    let flat: Vec<f64> = critic.params().iter().flat_map(|t| t.data().to_vec()).collect();
    let analytic: Vec<f64> = out.grads.iter().flat_map(|t| t.data().to_vec()).collect();
    let numeric = fd_gradient(&flat, 1e-6, |w| {
        let mut c = critic.clone();
        let mut off = 0;
        for t in c.params_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&w[off..off + n]);
            off += n;
        }
        critic_loss_with(&c, &real, &fake, 10.0, &u).unwrap().loss
    });
    assert!(rel_error(&analytic, &numeric) < 1e-6);
}

#[test]
fn critic_loss_validates_batches() {
    let critic = CriticNetwork::init(CriticConfig::desk(4, 1), &mut rng(0)).unwrap();
    let d = data();
    assert!(critic_loss_with(&critic, &d[..2], &d[..3], 10.0, &[0.5; 2]).is_err());
    assert!(critic_loss_with(&critic, &[], &[], 10.0, &[]).is_err());
}

#[test]
fn generator_loss_is_negative_mean_score() {
    assert_eq!(generator_loss(&[1.0, 2.0, 3.0]), -2.0);
}

#[test]
fn training_logs_expected_rows() {
    let mut t = small_trainer(0);
    let log = train(&mut t, &data(), None).unwrap();
    let its: Vec<usize> = log.rows.iter().map(|r| r.iteration).collect();
    assert_eq!(its, vec![0, 1, 2, 3, 4, 5, 6]);
    assert!(log.rows[0].losses.is_none() && log.rows[0].mmd.is_some());
    assert!(log.rows[1].mmd.is_none());
    assert!(log.rows[3].mmd.is_some() && log.rows[6].mmd.is_some());
    assert_eq!(t.critic_updates, 12);
    assert_eq!(t.adam_g.t, 6);
    let csv = log.to_csv();
    assert!(csv.starts_with(LOG_HEADER));
    assert!(csv.lines().nth(1).unwrap().starts_with("0,,,"));
}

#[test]
fn repeated_runs_are_bit_identical() {
    let a = train(&mut small_trainer(3), &data(), None).unwrap().to_csv();
    let b = train(&mut small_trainer(3), &data(), None).unwrap().to_csv();
    let c = train(&mut small_trainer(4), &data(), None).unwrap().to_csv();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn checkpoint_roundtrip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = small_trainer(5);
    t.config_hash = Some("abc".into());
    train(&mut t, &data(), Some(dir.path())).unwrap();
    let names: Vec<usize> = list_checkpoints(dir.path()).unwrap().into_iter().map(|(i, _)| i).collect();
    assert_eq!(names, vec![0, 3, 6]);
    let path = checkpoint_dir(dir.path(), 6);
    let manifest = std::fs::read(path.join(MANIFEST_FILE)).unwrap();
    let payload = std::fs::read(path.join(ARRAYS_FILE)).unwrap();
    assert!(manifest.ends_with(b"}\n"));
    let ck = Checkpoint::from_bytes(&manifest, &payload).unwrap();
    assert_eq!(ck, t.checkpoint());
    let (m2, p2) = ck.to_bytes().unwrap();
    assert_eq!(m2, manifest);
    assert_eq!(p2, payload);
    assert!(std::fs::read_dir(dir.path())
        .unwrap()
        .all(|e| !e.unwrap().file_name().to_string_lossy().ends_with(".tmp")));
}

#[test]
fn resume_from_checkpoint_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut straight = small_trainer(7);
    let full = train(&mut straight, &data(), Some(dir.path())).unwrap();

    let ck = Checkpoint::load(&checkpoint_dir(dir.path(), 3)).unwrap();
    let mut resumed = Trainer::from_checkpoint(ck).unwrap();
    assert_eq!(resumed.iteration, 3);
    let tail = train(&mut resumed, &data(), None).unwrap();

    assert_eq!(tail.rows, full.rows[4..]);
    assert_eq!(resumed.params, straight.params);
    assert_eq!(resumed.critic, straight.critic);
    assert_eq!(resumed.adam_g, straight.adam_g);
    assert_eq!(resumed.rng(), straight.rng());
}

#[test]
fn rng_state_survives_serialization() {
    let mut r = rng(9);
    for _ in 0..37 {
        r.random::<u32>();
    }
    r.set_stream(5);
    let state = RngState::capture(&r);
    let mut back = state.restore().unwrap();
    assert_eq!(back.random::<u64>(), r.random::<u64>());
    let bad = RngState {
        seed: "zz".into(),
        ..state
    };
    assert!(bad.restore().is_err());
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let t = small_trainer(0);
    let (manifest, payload) = t.checkpoint().to_bytes().unwrap();
    assert!(Checkpoint::from_bytes(&manifest, &payload[..payload.len() - 8]).is_err());
    assert!(Checkpoint::from_bytes(&manifest, &payload[..payload.len() - 3]).is_err());
    let text = String::from_utf8(manifest).unwrap().replace("\"version\": 1", "\"version\": 99");
    assert!(Checkpoint::from_bytes(text.as_bytes(), &payload).is_err());
}

#[test]
fn non_finite_loss_stops_with_a_diagnostic_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = small_trainer(0);
    t.critic.params_mut()[0].data_mut()[0] = f64::NAN;
    t.config.mmd_samples = 0;
    match train(&mut t, &data(), Some(dir.path())) {
        Err(TrainError::NonFinite {
            iteration, checkpoint, ..
        }) => {
            assert_eq!(iteration, 0);
            let path = checkpoint.unwrap();
            assert!(path.ends_with("diagnostic_000000"));
            assert!(Checkpoint::load(&path).is_ok());
        }
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}

#[test]
fn mismatched_configurations_are_rejected() {
    let err = Trainer::new(
        GeneratorConfig::task_specific(Encoding::Frqi, 4, 2, 2, 2),
        CriticConfig::desk(8, 1),
        TrainConfig::default(),
    );
    assert!(err.is_err());
    let mut t = small_trainer(0);
    let wrong = vec![Image::filled(8, 8, 1, 0.0)];
    assert!(train(&mut t, &wrong, None).is_err());
    assert!(TrainConfig {
        batch_size: 0,
        ..TrainConfig::default()
    }
    .validate()
    .is_err());
}
