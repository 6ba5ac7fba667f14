mod common;

use candle_core::DType;
use common::*;
use dfgan_core::data::{ImageGrid, ImageSample};
use dfgan_core::extractor::TrainSettings;
use dfgan_core::metrics::{attribute_error, train_attribute_predictor, AttributePredictor, PredictorConfig};

fn targets(samples: &[&ImageSample]) -> Vec<Vec<f64>> {
    samples
        .iter()
        .map(|s| s.attributes.to_vector().into_iter().map(f64::from).collect())
        .collect()
}

#[test]
fn predictor_overfits_sixteen_samples() {
    let data = tiny_dataset(2, 12);
    let refs: Vec<&ImageSample> = data.images.iter().step_by(3).take(16).collect();
    let settings = TrainSettings {
        epochs: 300,
        lr: 2e-3,
        batch_size: 4,
        seed: 13,
    };
    let (model, history) = train_attribute_predictor(&refs, &PredictorConfig::desk(4), settings, DType::F32).unwrap();
    assert!(history.last().unwrap() < &history[0]);
    let grids: Vec<&ImageGrid> = refs.iter().map(|s| &s.pixels).collect();
    let err = attribute_error(&model.predict(&grids).unwrap(), &targets(&refs), true).unwrap();
    assert!(err < 0.01, "training attribute MSE {err}");
}

#[test]
fn untrained_predictor_is_near_the_constant_baseline() {
    let data = tiny_dataset(4, 14);
    let refs: Vec<&ImageSample> = data.images.iter().collect();
    let t = targets(&refs);
    // Best constant predictor on a balanced set: per-entry class frequency.
    let n = t.len() as f64;
    let mean: Vec<f64> = (0..t[0].len()).map(|j| t.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let baseline: f64 = t
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum::<f64>()
        / (n * mean.len() as f64);
    let model = AttributePredictor::new(&PredictorConfig::desk(4), 15, DType::F32).unwrap();
    let grids: Vec<&ImageGrid> = refs.iter().map(|s| &s.pixels).collect();
    let err = attribute_error(&model.predict(&grids).unwrap(), &t, true).unwrap();
    assert!(err >= baseline - 1e-9);
    assert!(err <= 1.5 * baseline, "untrained {err} vs constant {baseline}");
}
