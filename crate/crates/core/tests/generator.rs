mod common;

use common::{dense_run, fd_gradient, rel_error};
use proptest::prelude::*;
use qimagegen::generator::*;
use qimagegen::image_codec::{Encoding, Image};
use qimagegen::rng;
use qimagegen::statevector::EntanglerKind;
use rand::Rng;

fn configs() -> Vec<GeneratorConfig> {
    let ts = GeneratorConfig::task_specific;
    vec![
        ts(Encoding::Frqi, 2, 2, 2, 2),
        ts(Encoding::Frqi, 4, 2, 3, 3),
        ts(Encoding::Mcrqi, 2, 2, 2, 2),
        GeneratorConfig {
            channel_qubits_in_ladder: true,
            ..ts(Encoding::Mcrqi, 2, 2, 2, 2)
        },
        ts(Encoding::Amplitude, 4, 2, 2, 2),
        GeneratorConfig {
            amplitude_rotations: true,
            ..ts(Encoding::Amplitude, 4, 2, 2, 2)
        },
        GeneratorConfig {
            ansatz: Ansatz::TaskAgnostic,
            ..ts(Encoding::Frqi, 4, 2, 2, 2)
        },
        GeneratorConfig {
            ansatz: Ansatz::TaskAgnostic,
            ..ts(Encoding::Amplitude, 4, 2, 2, 2)
        },
    ]
}

fn weights(side: usize, channels: usize, seed: u64) -> Image {
    let mut r = rng(seed);
    Image::new(side, side, channels, (0..side * side * channels).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn weighted(img: &Image, w: &Image) -> f64 {
    img.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

#[test]
fn rgb_table_rows_follow_the_same_formula() {
    for (side, layers, modes, want) in [(32, 32, 3, 6944), (64, 64, 10, 27584), (128, 64, 10, 32320), (1024, 64, 10, 46528)] {
        let c = GeneratorConfig::task_specific(Encoding::Mcrqi, side, layers, 2, modes);
        assert_eq!(count_parameters(&c), want, "{side}×{side}");
    }
}

#[test]
fn grayscale_count_has_closed_form() {
    for log_side in 1..=5 {
        let side = 1 << log_side;
        let a = 2 * log_side;
        for (layers, sub, modes) in [(1, 1, 1), (4, 2, 2), (8, 3, 5)] {
            let c = GeneratorConfig::task_specific(Encoding::Frqi, side, layers, sub, modes);
            let want = 2 * modes * layers * a + layers * (sub * 4 * (2 * a - 2) + a + 1);
            assert_eq!(c.count_parameters(), want);
        }
    }
}

#[test]
fn agnostic_count_has_closed_form() {
    let c = GeneratorConfig {
        ansatz: Ansatz::TaskAgnostic,
        ..GeneratorConfig::task_specific(Encoding::Amplitude, 4, 4, 2, 2)
    };
    let n = 4;
    assert_eq!(c.count_parameters(), 2 * 2 * 4 * n + 3 * n * 4);
}

#[test]
fn layout_blocks_tile_the_vector() {
    let c = GeneratorConfig::task_specific(Encoding::Frqi, 4, 3, 2, 2);
    let l = c.layout();
    let mut hit = vec![0; l.total()];
    for m in 0..l.modes {
        for layer in 0..l.layers {
            for s in 0..l.width {
                hit[l.mu(m, layer, s)] += 1;
                hit[l.sigma(m, layer, s)] += 1;
            }
        }
    }
    for layer in 0..l.layers {
        for k in 0..l.per_layer {
            hit[l.layer_offset(layer) + k] += 1;
        }
    }
    assert!(hit.iter().all(|&h| h == 1));
}

#[test]
fn ladder_alternates_direction() {
    let reg = [1, 2, 3, 4];
    let down = ladder_pairs(&reg, 0);
    let up = ladder_pairs(&reg, 1);
    assert_eq!(down.len(), 2 * reg.len() - 2);
    assert_eq!(down[0], (EntanglerKind::N2, 1, 2));
    assert_eq!(down[1], (EntanglerKind::N3, 1, 3));
    assert_eq!(*down.last().unwrap(), (EntanglerKind::N2, 4, 1));
    assert_eq!(up[0], (EntanglerKind::N2, 4, 3));
    assert_eq!(*up.last().unwrap(), (EntanglerKind::N2, 1, 4));
    assert!(ladder_pairs(&[5], 0).is_empty());
}

#[test]
fn zero_parameters_give_gray_images_for_any_noise() {
    for enc in [Encoding::Frqi, Encoding::Mcrqi] {
        let c = GeneratorConfig::task_specific(enc, 4, 3, 2, 3);
        let p = GeneratorParams::zeros(&c);
        let mut r = rng(3);
        let batch = generate_batch(&c, &p, 8, None, &mut r).unwrap();
        for s in batch {
            assert!(s.image.data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
        }
    }
}

#[test]
fn circuit_matches_dense_simulation() {
    let mut r = rng(4);
    for c in configs() {
        let p = GeneratorParams::init(&c, 0.8, &mut r);
        let noise = sample_noise(&c, &mut r);
        let circuit = Circuit::build(&c, &p, &noise).unwrap();
        let state = circuit.run().unwrap();
        let dense = dense_run(circuit.gates(), c.n_qubits());
        for (a, b) in state.amplitudes().iter().zip(&dense) {
            assert!((a - b).norm() < 1e-12);
        }
        let layers = circuit.run_layers().unwrap();
        assert_eq!(layers.len(), c.layers + 1);
        assert_eq!(layers.last().unwrap().amplitudes(), state.amplitudes());
    }
}

#[test]
fn adjoint_gradient_matches_finite_differences() {
    let mut r = rng(5);
    for c in configs() {
        let p = GeneratorParams::init(&c, 0.7, &mut r);
        let noise = sample_noise(&c, &mut r);
        let w = weights(c.side, c.encoding.channels(), 6);
        let sample = generate_from_noise(&c, &p, vec![noise.clone()], None, &mut r).unwrap().remove(0);
        let analytic = backprop_sample(&c, &p, &sample, &w).unwrap();
        let numeric = fd_gradient(p.values(), 1e-6, |theta| {
            let q = GeneratorParams::from_vec(&c, theta.to_vec()).unwrap();
            weighted(&decode_for(&c, &q, &noise).unwrap(), &w)
        });
        let err = rel_error(&analytic, &numeric);
        assert!(err < 1e-6, "{:?} {}: {err}", c.ansatz, c.encoding);
    }
}

#[test]
fn batch_gradient_is_the_sum_of_sample_gradients() {
    let c = GeneratorConfig::task_specific(Encoding::Frqi, 4, 2, 2, 2);
    let mut r = rng(7);
    let p = GeneratorParams::init(&c, 0.5, &mut r);
    let batch = generate_batch(&c, &p, 5, Some(4096), &mut r).unwrap();
    let grads: Vec<Image> = (0..5).map(|i| weights(4, 1, 10 + i)).collect();
    let total = backprop_batch(&c, &p, &batch, &grads).unwrap();
    let mut want = vec![0.0; p.len()];
    for (s, g) in batch.iter().zip(&grads) {
        for (t, x) in want.iter_mut().zip(backprop_sample(&c, &p, s, g).unwrap()) {
            *t += x;
        }
    }
    assert_eq!(total, want);
}

#[test]
fn noise_gradient_routes_through_mu_and_sigma() {
    let c = GeneratorConfig::task_specific(Encoding::Frqi, 2, 1, 1, 2);
    let mut r = rng(8);
    let p = GeneratorParams::init(&c, 0.9, &mut r);
    let noise = NoiseDraw {
        mode: 1,
        ..sample_noise(&c, &mut r)
    };
    let sample = generate_from_noise(&c, &p, vec![noise.clone()], None, &mut r).unwrap().remove(0);
    let g = backprop_sample(&c, &p, &sample, &weights(2, 1, 9)).unwrap();
    let l = c.layout();
    for s in 0..l.width {
        assert_eq!(g[l.mu(0, 0, s)], 0.0);
        assert_eq!(g[l.sigma(0, 0, s)], 0.0);
        let mu = g[l.mu(1, 0, s)];
        assert!((g[l.sigma(1, 0, s)] - mu * noise.epsilon[s]).abs() < 1e-15);
    }
}

#[test]
fn generation_is_reproducible_from_the_seed() {
    let c = GeneratorConfig::task_specific(Encoding::Frqi, 4, 2, 2, 2);
    let p = GeneratorParams::init(&c, 0.5, &mut rng(1));
    let a = generate_batch(&c, &p, 6, Some(100), &mut rng(2)).unwrap();
    let b = generate_batch(&c, &p, 6, Some(100), &mut rng(2)).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.image, y.image);
        assert_eq!(x.noise, y.noise);
    }
}

#[test]
fn bad_inputs_are_rejected() {
    let c = GeneratorConfig::task_specific(Encoding::Frqi, 4, 2, 2, 2);
    assert!(GeneratorParams::from_vec(&c, vec![0.0; 3]).is_err());
    let p = GeneratorParams::zeros(&c);
    let bad_mode = NoiseDraw {
        mode: 2,
        epsilon: vec![0.0; c.noise_width()],
    };
    assert!(forward(&c, &p, &bad_mode).is_err());
    let bad_width = NoiseDraw {
        mode: 0,
        epsilon: vec![0.0; 1],
    };
    assert!(forward(&c, &p, &bad_width).is_err());
    assert!(GeneratorConfig { side: 3, ..c.clone() }.validate().is_err());
    assert!(GeneratorConfig { modes: 0, ..c.clone() }.validate().is_err());
    assert!(GeneratorConfig {
        amplitude_rotations: true,
        ..c.clone()
    }
    .validate()
    .is_err());
    assert!(sample_counts(&[0.5, 0.5], 0, &mut rng(0)).is_err());
    assert!(sample_counts(&[0.5, -0.1], 10, &mut rng(0)).is_err());
}

#[test]
fn config_json_rejects_unknown_fields() {
    let ok: GeneratorConfig = serde_json::from_str(r#"{"encoding":"mcrqi","side":2}"#).unwrap();
    assert_eq!(ok.encoding, Encoding::Mcrqi);
    assert_eq!(ok.layers, GeneratorConfig::default().layers);
    assert!(serde_json::from_str::<GeneratorConfig>(r#"{"sides":4}"#).is_err());
}

fn distribution_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, 2..64)
        .prop_filter("positive mass", |v| v.iter().sum::<f64>() > 1e-6)
        .prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn counts_sum_to_shots_and_respect_support(p in distribution_strategy(), shots in 1u64..5000, seed in 0u64..1000) {
        let mut p = p;
        p[0] = 0.0;
        let counts = sample_counts(&p, shots, &mut rng(seed)).unwrap();
        prop_assert_eq!(counts.iter().sum::<u64>(), shots);
        prop_assert_eq!(counts[0], 0);
    }

    #[test]
    fn perturbed_distribution_is_empirical_frequency(p in distribution_strategy(), shots in 1u64..5000, seed in 0u64..1000) {
        let noise = shot_noise_perturb(&p, shots, &mut rng(seed)).unwrap();
        let counts = sample_counts(&p, shots, &mut rng(seed)).unwrap();
        prop_assert!((noise.perturbed.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (q, c) in noise.perturbed.iter().zip(counts) {
            prop_assert!((q - c as f64 / shots as f64).abs() < 1e-14);
        }
    }

    #[test]
    fn deviation_vjp_matches_finite_differences(p in distribution_strategy(), seed in 0u64..1000) {
        let mut r = rng(seed);
        let deviation: Vec<f64> = p.iter().map(|_| r.random_range(-0.01..0.01)).collect();
        prop_assume!(p.iter().zip(&deviation).all(|(a, d)| a + d > 1e-4));
        let g: Vec<f64> = p.iter().map(|_| r.random_range(-1.0..1.0)).collect();
        let analytic = deviation_vjp(&p, &deviation, &g);
        let numeric = fd_gradient(&p, 1e-7, |q| {
            apply_deviation(q, &deviation).iter().zip(&g).map(|(a, b)| a * b).sum()
        });
        prop_assert!(rel_error(&analytic, &numeric) < 1e-6);
    }

    #[test]
    fn pack_unpack_roundtrip(seed in 0u64..1000, modes in 1usize..4, layers in 1usize..4) {
        let c = GeneratorConfig::task_specific(Encoding::Frqi, 4, layers, 2, modes);
        let p = GeneratorParams::init(&c, 0.3, &mut rng(seed));
        let (mu, sigma, angles) = p.unpack(&c);
        prop_assert_eq!(GeneratorParams::pack(&c, mu, sigma, angles).unwrap(), p.clone());
    }
}
