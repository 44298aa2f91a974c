mod common;

use common::{fd_gradient, rel_error};
use qimagegen::discriminator::{CriticConfig, CriticNetwork};
use qimagegen::image_codec::Image;
use qimagegen::rng;
use rand::Rng;

fn images(n: usize, side: usize, channels: usize, seed: u64) -> Vec<Image> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| Image::new(side, side, channels, (0..side * side * channels).map(|_| r.random()).collect()).unwrap())
        .collect()
}

#[test]
fn desk_critic_shapes() {
    let cfg = CriticConfig::desk(4, 1);
    assert_eq!(cfg.sides(), [2, 1, 1]);
    assert_eq!(cfg.flat_features(), 32);
    let net = CriticNetwork::init(cfg.clone(), &mut rng(0)).unwrap();
    let names: Vec<String> = net.named_params().into_iter().map(|(n, _)| n).collect();
    assert_eq!(
        names,
        ["conv0.weight", "conv0.bias", "conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias", "dense.weight", "dense.bias"]
    );
    let expected: usize = cfg.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    assert_eq!(net.param_count(), expected);
}

#[test]
fn init_has_zero_biases_and_fan_in_scale() {
    let cfg = CriticConfig {
        filters: [16, 32, 64],
        ..CriticConfig::desk(8, 1)
    };
    let net = CriticNetwork::init(cfg, &mut rng(1)).unwrap();
    for (name, t) in net.named_params() {
        if name.ends_with("bias") {
            assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
        } else if name == "conv2.weight" {
            let fan_in = 32.0 * 25.0;
            let var = t.data().iter().map(|v| v * v).sum::<f64>() / t.numel() as f64;
            assert!((var * fan_in - 1.0).abs() < 0.1, "variance ratio {}", var * fan_in);
        }
    }
}

#[test]
fn batch_scores_are_independent_of_batching() {
    let net = CriticNetwork::init(CriticConfig::desk(4, 3), &mut rng(2)).unwrap();
    let imgs = images(5, 4, 3, 3);
    let batch = net.forward(&imgs).unwrap();
    for (img, s) in imgs.iter().zip(&batch) {
        assert!((net.score(img).unwrap() - s).abs() < 1e-14);
    }
}

#[test]
fn input_gradient_matches_finite_differences() {
    for (side, channels) in [(4, 1), (8, 1), (4, 3)] {
        let net = CriticNetwork::init(CriticConfig::desk(side, channels), &mut rng(4)).unwrap();
        let imgs = images(2, side, channels, 5);
        let grads = net.input_gradient(&imgs).unwrap();
        for (img, g) in imgs.iter().zip(&grads) {
            let numeric = fd_gradient(img.data(), 1e-6, |x| {
                net.score(&Image::new(side, side, channels, x.to_vec()).unwrap()).unwrap()
            });
            assert!(rel_error(g.data(), &numeric) < 1e-7);
        }
    }
}

#[test]
fn zero_network_scores_zero() {
    let net = CriticNetwork::zeros(CriticConfig::desk(4, 1)).unwrap();
    assert!(net.forward(&images(3, 4, 1, 6)).unwrap().iter().all(|&s| s == 0.0));
}

#[test]
fn mismatched_inputs_are_rejected() {
    let net = CriticNetwork::init(CriticConfig::desk(4, 1), &mut rng(7)).unwrap();
    assert!(net.forward(&images(1, 8, 1, 8)).is_err());
    assert!(net.forward(&images(1, 4, 3, 8)).is_err());
    assert!(CriticNetwork::from_params(CriticConfig::desk(4, 1), vec![]).is_err());
    assert!(CriticConfig { kernel: 4, ..CriticConfig::desk(4, 1) }.validate().is_err());
}
