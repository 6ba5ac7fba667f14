mod common;

use common::*;
use dfgan_core::metrics::{attribute_error, mse, ssim};
use rand::Rng;

fn random_image(r: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(0.0..1.0)).collect()
}

#[test]
fn ssim_matches_reference_on_random_pairs() {
    let mut r = rng(31);
    for i in 0..10 {
        let (h, w) = if i % 2 == 0 { (32, 32) } else { (16, 24) };
        let a = random_image(&mut r, h * w);
        // Correlated partner so that SSIM is far from zero.
        let b: Vec<f64> = a
            .iter()
            .map(|v| (0.7 * v + 0.3 * r.gen_range(0.0..1.0_f64)).clamp(0.0, 1.0))
            .collect();
        let got = ssim(&a, &b, h, w).unwrap();
        let want = reference_ssim(&a, &b, h, w);
        assert!((got - want).abs() <= 1e-4, "pair {i}: {got} vs {want}");
    }
}

#[test]
fn ssim_closed_forms() {
    let mut r = rng(32);
    let x = random_image(&mut r, 32 * 32);
    assert!((ssim(&x, &x, 32, 32).unwrap() - 1.0).abs() <= 1e-6);
    let c1 = 0.01f64.powi(2);
    let got = ssim(&vec![0.0; 1024], &vec![1.0; 1024], 32, 32).unwrap();
    assert!((got - c1 / (1.0 + c1)).abs() <= 1e-7);
    assert!((got - 9.999e-5).abs() <= 1e-7);
    assert!(ssim(&x[..100], &x[..100], 10, 10).is_err());
}

#[test]
fn mse_matches_brute_force() {
    let mut r = rng(33);
    let a: Vec<Vec<f64>> = (0..5).map(|_| random_image(&mut r, 64)).collect();
    let b: Vec<Vec<f64>> = (0..5).map(|_| random_image(&mut r, 64)).collect();
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(&b) {
        for (u, v) in x.iter().zip(y) {
            acc += (u - v) * (u - v);
        }
    }
    assert!((mse(&a, &b).unwrap() - acc / 320.0).abs() <= 1e-7);
}

#[test]
fn uniform_prediction_attribute_error_by_enumeration() {
    // Layout 7 + 4 + 2; target expression 2, identity 1, gender 0.
    let mut target = vec![0.0; 13];
    target[2] = 1.0;
    target[7 + 1] = 1.0;
    target[11] = 1.0;
    let mut pred = vec![1.0 / 7.0; 7];
    pred.extend([0.25; 4]);
    pred.extend([0.5; 2]);
    let mut sum = 0.0;
    for j in 0..13 {
        sum += (target[j] - pred[j]) * (target[j] - pred[j]);
    }
    let got = attribute_error(&[pred.clone()], &[target.clone()], true).unwrap();
    assert!((got - sum / 13.0).abs() <= 1e-12);
    let doubled = attribute_error(&[pred.clone(), pred], &[target.clone(), target], true).unwrap();
    assert!((doubled - got).abs() <= 1e-9);
}
