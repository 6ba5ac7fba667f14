#![allow(dead_code)]

pub mod oracles;

use candle_core::{DType, Device, Tensor, Var};
use dfgan_core::data::{generate_synthetic_dataset, Dataset, SyntheticSpec};
use rand::Rng as _;
use rand_chacha::rand_core::SeedableRng;

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| r.sample(rand_distr::StandardNormal)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| r.gen_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

fn write_flat(var: &Var, values: Vec<f64>) {
    let t = Tensor::from_vec(values, var.shape(), &Device::Cpu).unwrap().to_dtype(var.dtype()).unwrap();
    var.set(&t).unwrap();
}

/// Outcome of one sampled coordinate.
#[derive(Debug, Clone, Copy)]
pub struct GradSample {
    pub var: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    /// Relative error, with an absolute floor so that coordinates whose true
    /// gradient is numerically zero compare on an absolute scale.
    pub fn rel_error(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs()).max(1e-6);
        (self.analytic - self.numeric).abs() / scale
    }
}

/// Compares backprop against central differences on `n` coordinates drawn
/// uniformly over all entries of `vars`.
pub fn check_gradients(vars: &[Var], n: usize, seed: u64, f: impl Fn() -> Tensor) -> Vec<GradSample> {
    let loss = f();
    let grads = loss.backward().unwrap();
    let sizes: Vec<usize> = vars.iter().map(|v| v.elem_count()).collect();
    let total: usize = sizes.iter().sum();
    let mut r = rng(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut k = r.gen_range(0..total);
        let mut vi = 0;
        while k >= sizes[vi] {
            k -= sizes[vi];
            vi += 1;
        }
        let var = &vars[vi];
        let analytic = grads.get(var.as_tensor()).map(|g| flat(g)[k]).unwrap_or(0.0);
        let original = flat(var.as_tensor());
        let mut plus = original.clone();
        plus[k] += FD_STEP;
        write_flat(var, plus);
        let up = scalar(&f());
        let mut minus = original.clone();
        minus[k] -= FD_STEP;
        write_flat(var, minus);
        let down = scalar(&f());
        write_flat(var, original);
        out.push(GradSample {
            var: vi,
            index: k,
            analytic,
            numeric: (up - down) / (2.0 * FD_STEP),
        });
    }
    out
}

/// Like [`check_gradients`] but visits every coordinate of every variable.
pub fn check_all_gradients(vars: &[Var], f: impl Fn() -> Tensor) -> Vec<GradSample> {
    let grads = f().backward().unwrap();
    let mut out = Vec::new();
    for (vi, var) in vars.iter().enumerate() {
        let analytic = grads.get(var.as_tensor()).map(flat).unwrap_or_else(|| vec![0.0; var.elem_count()]);
        let original = flat(var.as_tensor());
        for k in 0..original.len() {
            let mut shifted = original.clone();
            shifted[k] += FD_STEP;
            write_flat(var, shifted.clone());
            let up = scalar(&f());
            shifted[k] = original[k] - FD_STEP;
            write_flat(var, shifted);
            let down = scalar(&f());
            write_flat(var, original.clone());
            out.push(GradSample {
                var: vi,
                index: k,
                analytic: analytic[k],
                numeric: (up - down) / (2.0 * FD_STEP),
            });
        }
    }
    out
}

pub fn worst(samples: &[GradSample]) -> f64 {
    samples.iter().map(GradSample::rel_error).fold(0.0, f64::max)
}

pub fn tiny_dataset(n_repeats: usize, seed: u64) -> Dataset {
    generate_synthetic_dataset(&SyntheticSpec {
        n_repeats,
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap()
    .dataset
}

/// Direct 2-D SSIM over every valid 11 × 11 window with a Gaussian (σ 1.5)
/// weighting, computed window by window without separable filtering.
pub fn reference_ssim(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let k = 11usize;
    let g: Vec<f64> = (0..k).map(|i| (-((i as f64 - 5.0).powi(2)) / (2.0 * 1.5 * 1.5)).exp()).collect();
    let mut weights = vec![0.0; k * k];
    for y in 0..k {
        for x in 0..k {
            weights[y * k + x] = g[y] * g[x];
        }
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|v| *v /= total);
    let mut acc = 0.0;
    let mut count = 0;
    for y0 in 0..=h - k {
        for x0 in 0..=w - k {
            let (mut ma, mut mb) = (0.0, 0.0);
            for y in 0..k {
                for x in 0..k {
                    let wgt = weights[y * k + x];
                    ma += wgt * a[(y0 + y) * w + x0 + x];
                    mb += wgt * b[(y0 + y) * w + x0 + x];
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for y in 0..k {
                for x in 0..k {
                    let wgt = weights[y * k + x];
                    let da = a[(y0 + y) * w + x0 + x] - ma;
                    let db = b[(y0 + y) * w + x0 + x] - mb;
                    va += wgt * da * da;
                    vb += wgt * db * db;
                    cov += wgt * da * db;
                }
            }
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    acc / count as f64
}
