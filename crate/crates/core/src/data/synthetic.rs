//! Procedurally rendered face-like stimuli with exact attribute labels and
//! simulated fMRI that is a fixed linear map of the attribute vector plus
//! Gaussian noise.

use super::{u8_to_unit, AttrLayout, AttributeTarget, Dataset, FmriRecord, ImageGrid, ImageSample, Split, N_EXPRESSIONS, N_GENDERS};
use crate::error::{Error, Result};
use crate::rng::stream;
use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};

pub const EXPRESSION_NAMES: [&str; N_EXPRESSIONS] = [
    "neutral",
    "happiness",
    "sadness",
    "surprise",
    "anger",
    "disgust",
    "fear",
];

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SyntheticSpec {
    pub n_identities: usize,
    /// How many of the seven expression classes are rendered (the first n).
    pub n_expressions: usize,
    pub image_size: usize,
    pub n_repeats: usize,
    /// Voxel count of the first subject; subject k has `fmri_dim + 4k` voxels.
    pub fmri_dim: usize,
    pub n_subjects: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_identities: 4,
            n_expressions: 3,
            image_size: 32,
            n_repeats: 20,
            fmri_dim: 64,
            n_subjects: 2,
            noise_sigma: 0.01,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_identities", self.n_identities),
            ("n_expressions", self.n_expressions),
            ("image_size", self.image_size),
            ("n_repeats", self.n_repeats),
            ("fmri_dim", self.fmri_dim),
            ("n_subjects", self.n_subjects),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("synthetic {name} must be positive")));
        }
        if self.n_expressions > N_EXPRESSIONS {
            return Err(Error::Config(format!(
                "synthetic n_expressions must be at most {N_EXPRESSIONS}"
            )));
        }
        if !self.image_size.is_power_of_two() || self.image_size < 8 {
            return Err(Error::Config("synthetic image_size must be a power of two ≥ 8".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("synthetic noise_sigma must be a finite value ≥ 0".into()));
        }
        Ok(())
    }

    pub fn n_images(&self) -> usize {
        self.n_identities * self.n_expressions * N_GENDERS * self.n_repeats
    }

    pub fn voxels_for_subject(&self, subject: usize) -> usize {
        self.fmri_dim + 4 * subject
    }

    fn eval_repeats(&self) -> usize {
        if self.n_repeats < 2 {
            0
        } else {
            (self.n_repeats / 10).max(1)
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub dataset: Dataset,
    /// One `voxels × attribute_len` matrix per subject (subject ids start at 1).
    pub mixing: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone, Copy)]
struct Face {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    skin: f64,
    long_hair: bool,
    hair: f64,
    eye_sep: f64,
    eye_y: f64,
    eye_open: f64,
    brow_tilt: f64,
    brow_raise: f64,
    brow_thick: f64,
    nose_len: f64,
    mouth_y: f64,
    mouth_w: f64,
    mouth_curve: f64,
    mouth_open: f64,
    brightness: f64,
}

// (mouth curve, mouth open, brow tilt, brow raise, eye openness)
const EXPRESSIONS: [[f64; 5]; N_EXPRESSIONS] = [
    [0.0, 0.0, 0.0, 0.0, 1.0],
    [0.9, 0.2, 0.0, 0.02, 0.75],
    [-0.7, 0.0, -0.6, 0.03, 0.8],
    [0.0, 0.7, 0.0, 0.12, 1.45],
    [-0.35, 0.0, 0.7, -0.05, 0.9],
    [-0.45, 0.12, 0.35, -0.03, 0.55],
    [-0.25, 0.4, -0.45, 0.1, 1.3],
];

struct IdentityShape {
    rx: f64,
    ry: f64,
    eye_sep: f64,
    eye_y: f64,
    nose_len: f64,
    mouth_y: f64,
    mouth_w: f64,
    tone: f64,
}

fn identity_shape(seed: u64, identity: usize) -> IdentityShape {
    let mut rng = stream(seed, "synthetic-identity", identity as u64);
    IdentityShape {
        rx: rng.gen_range(0.52..0.70),
        ry: rng.gen_range(0.68..0.84),
        eye_sep: rng.gen_range(0.2..0.31),
        eye_y: rng.gen_range(-0.17..-0.05),
        nose_len: rng.gen_range(0.1..0.22),
        mouth_y: rng.gen_range(0.3..0.42),
        mouth_w: rng.gen_range(0.18..0.3),
        tone: rng.gen_range(-0.08..0.08),
    }
}

fn inside_ellipse(u: f64, v: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> bool {
    let du = (u - cx) / rx;
    let dv = (v - cy) / ry;
    du * du + dv * dv <= 1.0
}

fn segment_distance(u: f64, v: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((u - a.0) * dx + (v - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (px, py) = (a.0 + t * dx, a.1 + t * dy);
    ((u - px).powi(2) + (v - py).powi(2)).sqrt()
}

impl Face {
    /// Scene intensity in [0, 1] at normalized coordinates (u right, v down).
    fn intensity(&self, u: f64, v: f64) -> f64 {
        let mut value = 0.12 + 0.05 * v;
        let top = self.cy - 0.55 * self.ry;
        if self.long_hair
            && v > self.cy - 1.15 * self.ry
            && inside_ellipse(u, v, self.cx, self.cy + 0.05, 1.28 * self.rx, 1.12 * self.ry)
        {
            value = self.hair;
        }
        if inside_ellipse(u, v, self.cx, self.cy, self.rx, self.ry) {
            let edge = ((u - self.cx) / self.rx).powi(2);
            value = self.skin - 0.1 * edge;
        }
        if inside_ellipse(u, v, self.cx, self.cy, 1.06 * self.rx, 1.06 * self.ry) && v < top {
            value = self.hair;
        }

        let eye_v = self.cy + self.eye_y;
        for side in [-1.0, 1.0] {
            let ex = self.cx + side * self.eye_sep;
            if inside_ellipse(u, v, ex, eye_v, 0.085, 0.045 * self.eye_open) {
                value = 0.08;
            }
            let brow_v = eye_v - 0.11 - self.brow_raise;
            let inner = (self.cx + side * (self.eye_sep - 0.08), brow_v + 0.06 * self.brow_tilt);
            let outer = (self.cx + side * (self.eye_sep + 0.1), brow_v - 0.02 * self.brow_tilt);
            if segment_distance(u, v, inner, outer) < self.brow_thick {
                value = 0.15;
            }
        }

        let nose_top = (self.cx, eye_v + 0.06);
        let nose_tip = (self.cx + 0.02, eye_v + 0.06 + self.nose_len);
        if segment_distance(u, v, nose_top, nose_tip) < 0.02 {
            value = self.skin - 0.18;
        }

        let mouth_v = self.cy + self.mouth_y;
        let t = (u - self.cx) / self.mouth_w;
        if t.abs() <= 1.0 {
            let lip = mouth_v + 0.1 * self.mouth_curve * (1.0 - t * t);
            if (v - lip).abs() < 0.024 {
                value = 0.2;
            }
        }
        if self.mouth_open > 0.0
            && inside_ellipse(
                u,
                v,
                self.cx,
                mouth_v + 0.05 * self.mouth_curve.max(0.0) + 0.02,
                0.6 * self.mouth_w,
                0.12 * self.mouth_open,
            )
        {
            value = 0.05;
        }
        (value + self.brightness).clamp(0.0, 1.0)
    }

    fn render(&self, size: usize) -> Vec<u8> {
        const SS: usize = 3;
        let mut out = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let mut acc = 0.0;
                for sy in 0..SS {
                    for sx in 0..SS {
                        let u = ((x as f64 + (sx as f64 + 0.5) / SS as f64) / size as f64) * 2.0 - 1.0;
                        let v = ((y as f64 + (sy as f64 + 0.5) / SS as f64) / size as f64) * 2.0 - 1.0;
                        acc += self.intensity(u, v);
                    }
                }
                out.push((acc / (SS * SS) as f64 * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
        out
    }
}

/// Renders every (identity, expression, gender, repeat) combination and one
/// fMRI record per image per subject. Fully determined by `spec.seed`.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let layout = AttrLayout::new(spec.n_identities);
    let mixing: Vec<DMatrix<f64>> = (0..spec.n_subjects)
        .map(|s| {
            let mut rng = stream(spec.seed, "synthetic-mixing", s as u64);
            DMatrix::from_fn(spec.voxels_for_subject(s), layout.len(), |_, _| {
                StandardNormal.sample(&mut rng)
            })
        })
        .collect();
    let noise = if spec.noise_sigma > 0.0 {
        Some(Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };

    let n_eval = spec.eval_repeats();
    let mut images = Vec::with_capacity(spec.n_images());
    let mut splits = Vec::with_capacity(spec.n_images());
    let mut records = Vec::with_capacity(spec.n_images() * spec.n_subjects);
    for identity in 0..spec.n_identities {
        let shape = identity_shape(spec.seed, identity);
        for expression in 0..spec.n_expressions {
            let [curve, open, tilt, raise, eye] = EXPRESSIONS[expression];
            for gender in 0..N_GENDERS {
                for repeat in 0..spec.n_repeats {
                    let index = images.len();
                    let mut jitter = stream(spec.seed, "synthetic-jitter", index as u64);
                    let scale = jitter.gen_range(0.97..1.03);
                    let female = gender == 1;
                    let face = Face {
                        cx: jitter.gen_range(-0.04..0.04),
                        cy: 0.05 + jitter.gen_range(-0.04..0.04),
                        rx: shape.rx * scale,
                        ry: shape.ry * scale,
                        skin: if female { 0.8 } else { 0.62 } + shape.tone,
                        long_hair: female,
                        hair: if female { 0.32 } else { 0.22 },
                        eye_sep: shape.eye_sep,
                        eye_y: shape.eye_y,
                        eye_open: eye,
                        brow_tilt: tilt,
                        brow_raise: raise,
                        brow_thick: if female { 0.018 } else { 0.032 },
                        nose_len: shape.nose_len,
                        mouth_y: shape.mouth_y,
                        mouth_w: shape.mouth_w,
                        mouth_curve: curve,
                        mouth_open: open,
                        brightness: jitter.gen_range(-0.03..0.03),
                    };
                    let pixels = face.render(spec.image_size).into_iter().map(u8_to_unit).collect();
                    let attributes = AttributeTarget::new(expression, identity, gender, spec.n_identities)?;
                    let source_id = format!("id{identity}_exp{expression}_g{gender}_r{repeat}");
                    let feature = DVector::from_iterator(
                        layout.len(),
                        attributes.to_vector().into_iter().map(f64::from),
                    );
                    for (s, a) in mixing.iter().enumerate() {
                        let clean = a * &feature;
                        let mut rng = stream(spec.seed, "synthetic-noise", (s * 1_000_000 + index) as u64);
                        let voxels = clean
                            .iter()
                            .map(|&c| {
                                let e = noise.as_ref().map_or(0.0, |n| n.sample(&mut rng));
                                (c + e) as f32
                            })
                            .collect();
                        records.push(FmriRecord::new(voxels, s as u32 + 1, source_id.clone())?);
                    }
                    images.push(ImageSample {
                        pixels: ImageGrid::new(1, spec.image_size, spec.image_size, pixels)?,
                        attributes,
                        source_id,
                    });
                    splits.push(if repeat >= spec.n_repeats - n_eval {
                        Split::Eval
                    } else {
                        Split::Train
                    });
                }
            }
        }
    }
    Ok(SyntheticData {
        dataset: Dataset {
            images,
            splits,
            records,
            n_identities: spec.n_identities,
        },
        mixing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            n_identities: 4,
            n_expressions: 3,
            image_size: 16,
            n_repeats: 2,
            fmri_dim: 20,
            n_subjects: 2,
            noise_sigma: 0.0,
            seed: 3,
        }
    }

    #[test]
    fn image_count_is_factor_product() {
        let data = generate_synthetic_dataset(&small()).unwrap();
        assert_eq!(data.dataset.images.len(), 48);
        assert_eq!(data.dataset.records.len(), 96);
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let a = generate_synthetic_dataset(&small()).unwrap();
        let b = generate_synthetic_dataset(&small()).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.mixing, b.mixing);
        let mut other = small();
        other.seed = 4;
        let c = generate_synthetic_dataset(&other).unwrap();
        assert_ne!(a.dataset.images[0].pixels, c.dataset.images[0].pixels);
    }

    #[test]
    fn noiseless_voxels_match_mixing_matrix() {
        let data = generate_synthetic_dataset(&small()).unwrap();
        let ds = &data.dataset;
        for rec in &ds.records {
            let img = &ds.images[ds.image_index(&rec.stimulus_id).unwrap()];
            let a = &data.mixing[rec.subject_id as usize - 1];
            let t = img.attributes.to_vector();
            assert_eq!(rec.voxels.len(), a.nrows());
            for (i, &v) in rec.voxels.iter().enumerate() {
                let mut expected = 0.0f64;
                for (j, &tj) in t.iter().enumerate() {
                    expected += a[(i, j)] * tj as f64;
                }
                assert!((v as f64 - expected).abs() <= 1e-6 * (1.0 + expected.abs()));
            }
        }
    }

    #[test]
    fn factor_grid_is_balanced() {
        let data = generate_synthetic_dataset(&small()).unwrap();
        let mut counts: HashMap<(usize, usize, usize), usize> = HashMap::new();
        for s in &data.dataset.images {
            *counts
                .entry((s.attributes.identity, s.attributes.expression, s.attributes.gender))
                .or_default() += 1;
        }
        assert_eq!(counts.len(), 4 * 3 * 2);
        assert!(counts.values().all(|&c| c == 2));
    }

    #[test]
    fn classes_render_differently_and_in_range() {
        let data = generate_synthetic_dataset(&small()).unwrap();
        let ds = &data.dataset;
        let first = &ds.images[0].pixels;
        assert!(first.data.iter().all(|v| (-1.0..=1.0).contains(v)));
        let other_gender = ds.images.iter().find(|s| s.attributes.gender == 1).unwrap();
        let other_expr = ds.images.iter().find(|s| s.attributes.expression == 1).unwrap();
        assert_ne!(first.data, other_gender.pixels.data);
        assert_ne!(first.data, other_expr.pixels.data);
    }

    #[test]
    fn split_holds_out_last_repeats() {
        let mut spec = small();
        spec.n_repeats = 20;
        spec.image_size = 8;
        let data = generate_synthetic_dataset(&spec).unwrap();
        let eval = data.dataset.images_in(Split::Eval).len();
        assert_eq!(eval, 4 * 3 * 2 * 2);
    }

    #[test]
    fn invalid_spec_is_rejected() {
        let mut spec = small();
        spec.n_repeats = 0;
        assert!(generate_synthetic_dataset(&spec).is_err());
        let mut spec = small();
        spec.noise_sigma = -1.0;
        assert!(generate_synthetic_dataset(&spec).is_err());
    }
}
