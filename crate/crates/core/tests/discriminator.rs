mod common;

use candle_core::{DType, Tensor};
use common::*;
use dfgan_core::discriminator::{sigmoid, DiscriminatorConfig, DoubleFlowDiscriminator};
use dfgan_core::nn::Mode;
use dfgan_core::rng::stream;

fn model(dtype: DType) -> DoubleFlowDiscriminator {
    DoubleFlowDiscriminator::new(&DiscriminatorConfig::desk(4), true, 1, dtype).unwrap()
}

fn images(n: usize, seed: u64, dtype: DType) -> Tensor {
    uniform(&[n, 1, 32, 32], -1.0, 1.0, seed).to_dtype(dtype).unwrap()
}

#[test]
fn pair_probabilities_are_normalized() {
    let d = model(DType::F32);
    let out = d
        .discriminate_pair(&images(100, 1, DType::F32), &images(100, 2, DType::F32), &mut Mode::Eval)
        .unwrap();
    for p in out.predictions().unwrap() {
        assert!((p.p_first + p.p_second - 1.0).abs() <= 1e-5);
        assert!(p.p_first > 0.0 && p.p_first < 1.0);
    }
}

#[test]
fn swapping_slots_swaps_outputs() {
    let d = model(DType::F32);
    let (a, b) = (images(50, 3, DType::F32), images(50, 4, DType::F32));
    let ab = d.discriminate_pair(&a, &b, &mut Mode::Eval).unwrap().predictions().unwrap();
    let ba = d.discriminate_pair(&b, &a, &mut Mode::Eval).unwrap().predictions().unwrap();
    for (x, y) in ab.iter().zip(&ba) {
        assert!((x.p_first - y.p_second).abs() <= 1e-5);
        for (u, v) in x.attr_logits_first.iter().zip(&y.attr_logits_second) {
            assert!((u - v).abs() <= 1e-5);
        }
        for (u, v) in x.attr_logits_second.iter().zip(&y.attr_logits_first) {
            assert!((u - v).abs() <= 1e-5);
        }
    }
    let aa = d.discriminate_pair(&a, &a, &mut Mode::Eval).unwrap().predictions().unwrap();
    for p in aa {
        assert!((p.p_first - 0.5).abs() <= 1e-5 && (p.p_second - 0.5).abs() <= 1e-5);
    }
}

#[test]
fn real_image_lands_in_slot_one_about_half_the_time() {
    let d = model(DType::F32);
    let (real, fake) = (images(1, 5, DType::F32), images(1, 6, DType::F32));
    let mut slots = stream(42, "slot-test", 0);
    let mut first = 0;
    let mut d_real = None;
    for _ in 0..1000 {
        let s = d.realness_of(&real, &fake, &mut slots, &mut Mode::Eval).unwrap();
        if s.real_in_first[0] {
            first += 1;
        }
        // The probability assigned to the real image does not depend on the slot.
        let v = scalar(&s.d_real.get(0).unwrap());
        let reference = *d_real.get_or_insert(v);
        assert!((v - reference).abs() < 1e-5);
    }
    assert!((450..=550).contains(&first), "real in slot one {first} times");
}

#[test]
fn realness_bridge_is_monotone_in_logits() {
    let d = model(DType::F64);
    let (real, fake) = (images(20, 7, DType::F64), images(20, 8, DType::F64));
    let s = d.realness_of(&real, &fake, &mut stream(0, "bridge", 0), &mut Mode::Eval).unwrap();
    let p = s.d_real.to_vec1::<f64>().unwrap();
    let lr = s.logit_real.to_vec1::<f64>().unwrap();
    let lf = s.logit_fake.to_vec1::<f64>().unwrap();
    for i in 0..20 {
        assert_eq!(p[i] > 0.5, lr[i] > lf[i]);
        assert!((p[i] - scalar(&sigmoid(&Tensor::new(lr[i] - lf[i], real.device()).unwrap()).unwrap())).abs() < 1e-12);
    }
}
