//! Independent oracles shared by the focused test files and the acceptance
//! suite. Each returns the worst observed error so callers pick tolerances.

use candle_core::{DType, Device, Tensor, Var};
use dfgan_core::discriminator::{ComparisonModule, DiscriminatorConfig, DoubleFlowDiscriminator};
use dfgan_core::generator::{FeatureGrid, GeneratorConfig, ImageGenerator, SwinGenerator, WindowBlock};
use dfgan_core::losses::{bce_with_logits_rows, d_loss_dfgan, g_loss_dfgan, LossVariant};
use dfgan_core::nn::{Linear, Mode, MultiHeadAttention, VarStore};

use super::*;

pub const VARIANTS: [LossVariant; 3] = [LossVariant::Our, LossVariant::Past, LossVariant::Origin];

pub fn small_generator() -> GeneratorConfig {
    GeneratorConfig {
        condition_dim: 6,
        bottom_width: 2,
        embed_dim: 16,
        n_stages: 2,
        blocks_per_stage: 2,
        n_heads: 2,
        window_size: 2,
        dropout: 0.0,
        bicubic_stages: 1,
        output_size: 8,
        mlp_ratio: 2,
    }
}

pub fn small_discriminator() -> DiscriminatorConfig {
    DiscriminatorConfig {
        patch_size: 4,
        token_dim: 16,
        n_blocks: 1,
        n_heads: 2,
        dropout: 0.0,
        image_size: 8,
        in_channels: 1,
        n_identities: 2,
        mlp_ratio: 2,
    }
}

/// Mean output pixel of a small generator, `n` sampled parameters.
pub fn generator_gradient(n: usize) -> Vec<GradSample> {
    let g = SwinGenerator::new(&small_generator(), 3, DType::F64).unwrap();
    let z = randn(&[2, 6], 1);
    let vars = g.store().vars();
    check_gradients(&vars, n, 5, || g.forward(&z, &mut Mode::Eval).unwrap().mean_all().unwrap())
}

/// Cross-attention of the comparison module. With `query_only` the sampled
/// parameters are the query projection; otherwise all module parameters,
/// under a squared read-out so the loss is not invariant to the layer norm.
pub fn cross_attention_gradient(n: usize, query_only: bool) -> Vec<GradSample> {
    let d = DoubleFlowDiscriminator::new(&small_discriminator(), true, 4, DType::F64).unwrap();
    let l_self = randn(&[2, 5, 16], 2);
    let l_other = randn(&[2, 5, 16], 3);
    let vars: Vec<Var> = d
        .store()
        .named()
        .iter()
        .filter(|(name, _)| name.starts_with("compare.") && (!query_only || name.contains("query")))
        .map(|(_, v)| v.clone())
        .collect();
    assert!(!vars.is_empty());
    check_gradients(&vars, n, 6, || {
        d.cross_attention(&l_self, &l_other).unwrap().sqr().unwrap().mean_all().unwrap()
    })
}

/// A 20-parameter generator/discriminator pair: G maps 2-d conditions to
/// 3-pixel "images", D scores a pair by a shared linear read-out and emits
/// two attribute logits per image.
pub struct Toy {
    wg: Var,
    bg: Var,
    wd: Var,
    wa: Var,
    ba: Var,
    z: Tensor,
    pub real: Tensor,
    targets: Tensor,
}

pub struct ToyScores {
    pub d_real: Tensor,
    pub d_fake: Tensor,
    pub bce_real: Tensor,
    pub bce_fake: Tensor,
    pub fake: Tensor,
}

impl Toy {
    pub fn new(seed: u64) -> Self {
        let var = |t: Tensor| Var::from_tensor(&t).unwrap();
        let targets = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0], (3, 2), &Device::Cpu).unwrap();
        Self {
            wg: var(randn(&[2, 3], seed)),
            bg: var(randn(&[1, 3], seed + 1)),
            wd: var(randn(&[3, 1], seed + 2)),
            wa: var(randn(&[3, 2], seed + 3)),
            ba: var(randn(&[1, 2], seed + 4)),
            z: randn(&[3, 2], seed + 5),
            real: uniform(&[3, 3], -0.9, 0.9, seed + 6),
            targets,
        }
    }

    pub fn vars(&self) -> Vec<Var> {
        vec![self.wg.clone(), self.bg.clone(), self.wd.clone(), self.wa.clone(), self.ba.clone()]
    }

    pub fn generator_vars(&self) -> Vec<Var> {
        vec![self.wg.clone(), self.bg.clone()]
    }

    pub fn scores(&self) -> ToyScores {
        let fake = self.z.matmul(self.wg.as_tensor()).unwrap().broadcast_add(self.bg.as_tensor()).unwrap().tanh().unwrap();
        let s_real = self.real.matmul(self.wd.as_tensor()).unwrap().squeeze(1).unwrap();
        let s_fake = fake.matmul(self.wd.as_tensor()).unwrap().squeeze(1).unwrap();
        let sig = |x: Tensor| (x.neg().unwrap().exp().unwrap() + 1.0).unwrap().recip().unwrap();
        let d_real = sig((&s_real - &s_fake).unwrap());
        let d_fake = sig((&s_fake - &s_real).unwrap());
        let attr = |x: &Tensor| x.matmul(self.wa.as_tensor()).unwrap().broadcast_add(self.ba.as_tensor()).unwrap();
        ToyScores {
            bce_real: bce_with_logits_rows(&self.targets, &attr(&self.real)).unwrap(),
            bce_fake: bce_with_logits_rows(&self.targets, &attr(&fake)).unwrap(),
            d_real,
            d_fake,
            fake,
        }
    }
}

pub const ALPHA: f64 = 0.3;
pub const LAMBDA: f64 = 2.0;

/// Central differences see the confidence factor move; backprop treats it
/// as a constant. Removing `α · mean((d_fake − d_fake₀) · bce_fake)` from
/// the numeric objective pins the factor at its base value.
fn pinned(total: Tensor, s: &ToyScores, conf0: &Tensor) -> Tensor {
    let drift = (&s.d_fake - conf0).unwrap().mul(&s.bce_fake).unwrap().mean_all().unwrap();
    (total - drift.affine(ALPHA, 0.0).unwrap()).unwrap()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyLoss {
    Discriminator,
    Generator,
}

/// Every one of the toy's 20 parameters, for one loss and variant.
pub fn toy_loss_gradient(which: ToyLoss, variant: LossVariant) -> Vec<GradSample> {
    let toy = Toy::new(if which == ToyLoss::Discriminator { 20 } else { 40 });
    let conf0 = toy.scores().d_fake.detach();
    let total = |pin: bool| {
        let s = toy.scores();
        let t = match which {
            ToyLoss::Discriminator => d_loss_dfgan(&s.d_real, &s.d_fake, &s.bce_real, &s.bce_fake, ALPHA, variant).unwrap().total,
            ToyLoss::Generator => g_loss_dfgan(&s.d_fake, &s.fake, &toy.real, &s.bce_fake, LAMBDA, ALPHA, variant).unwrap().total,
        };
        if pin && variant == LossVariant::Our {
            pinned(t, &s, &conf0)
        } else {
            t
        }
    };
    let analytic = check_all_gradients(&toy.vars(), || total(false));
    let numeric = check_all_gradients(&toy.vars(), || total(true));
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| GradSample { numeric: n.numeric, ..*a })
        .collect()
}

/// True when the confidence-weighted attribute terms of both losses pass no
/// gradient to the logit that produces `d_fake`, while the adversarial term
/// does.
pub fn confidence_factor_is_detached() -> bool {
    let logit = Var::from_tensor(&Tensor::new(&[0.4f64, -1.2, 2.0], &Device::Cpu).unwrap()).unwrap();
    let d_fake = (logit.as_tensor().neg().unwrap().exp().unwrap() + 1.0).unwrap().recip().unwrap();
    let d_real = Tensor::new(&[0.6f64, 0.7, 0.2], &Device::Cpu).unwrap();
    let bce_fake = Tensor::new(&[0.9f64, 0.1, 0.5], &Device::Cpu).unwrap();
    let bce_real = Tensor::new(&[0.3f64, 0.2, 0.8], &Device::Cpu).unwrap();
    let zero = |g: Option<&Tensor>| g.map_or(true, |g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|&v| v == 0.0));

    let d = d_loss_dfgan(&d_real, &d_fake, &bce_real, &bce_fake, 0.5, LossVariant::Our).unwrap();
    let d_attr = zero(d.attribute.backward().unwrap().get(logit.as_tensor()));
    let image = Tensor::zeros((3, 1, 2, 2), DType::F64, &Device::Cpu).unwrap();
    let g = g_loss_dfgan(&d_fake, &image, &image, &bce_fake, 10.0, 0.5, LossVariant::Our).unwrap();
    let g_attr = zero(g.attribute.backward().unwrap().get(logit.as_tensor()));
    let g_adv = zero(g.adversarial.backward().unwrap().get(logit.as_tensor()));
    d_attr && g_attr && !g_adv
}

fn mat(t: &Tensor) -> Vec<Vec<f64>> {
    t.to_dtype(DType::F64).unwrap().to_vec2::<f64>().unwrap()
}

fn affine(x: &[Vec<f64>], lin: &Linear) -> Vec<Vec<f64>> {
    let w = mat(&lin.weight);
    let b = lin
        .bias
        .as_ref()
        .map(|b| b.to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap())
        .unwrap_or_else(|| vec![0.0; w.len()]);
    x.iter()
        .map(|row| {
            w.iter()
                .zip(&b)
                .map(|(wr, bi)| wr.iter().zip(row).map(|(a, c)| a * c).sum::<f64>() + bi)
                .collect()
        })
        .collect()
}

/// Dense multi-head attention for one sequence, written out with loops.
fn dense_attention(q_src: &[Vec<f64>], kv_src: &[Vec<f64>], mha: &MultiHeadAttention, heads: usize) -> Vec<Vec<f64>> {
    let q = affine(q_src, &mha.query);
    let k = affine(kv_src, &mha.key);
    let v = affine(kv_src, &mha.value);
    let c = q[0].len();
    let d = c / heads;
    let mut mixed = vec![vec![0.0; c]; q.len()];
    for h in 0..heads {
        let cols = h * d..(h + 1) * d;
        for (i, qi) in q.iter().enumerate() {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| cols.clone().map(|t| qi[t] * kj[t]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for (j, vj) in v.iter().enumerate() {
                for t in cols.clone() {
                    mixed[i][t] += e[j] / z * vj[t];
                }
            }
        }
    }
    affine(&mixed, &mha.out)
}

fn add(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// A window block whose window covers the whole 8×8 grid against a dense
/// pre-norm transformer block built from the same weights.
pub fn full_window_vs_dense() -> f64 {
    let (res, c, heads) = (8, 8, 2);
    let mut store = VarStore::new(5, DType::F64);
    let block = WindowBlock::new(&mut store.root().sub("block"), res, c, res, 0, heads, 2, 0.0).unwrap();
    assert_eq!(block.window(), 8);
    let x = randn(&[2, res * res, c], 17);
    let grid = FeatureGrid::new(x.clone(), res, res).unwrap();
    let out = block.forward(&grid, &mut Mode::Eval).unwrap();
    let mut worst = 0.0f64;
    for b in 0..2 {
        let xb = x.get(b).unwrap();
        let normed = mat(&block.norm1.forward(&xb).unwrap());
        let x1 = add(&mat(&xb), &dense_attention(&normed, &normed, &block.attn, heads));
        let x1t = Tensor::new(x1.clone(), xb.device()).unwrap();
        let mlp = mat(&block.mlp.forward(&block.norm2.forward(&x1t).unwrap()).unwrap());
        worst = worst.max(max_diff(&mat(&out.tokens.get(b).unwrap()), &add(&x1, &mlp)));
    }
    worst
}

/// Cross-attention of a flow with itself against self-attention with the
/// same weights.
pub fn cross_with_self_vs_self_attention() -> f64 {
    let (t, c, heads) = (5, 12, 3);
    let mut store = VarStore::new(9, DType::F64);
    let module = ComparisonModule::new(&mut store.root().sub("compare"), c, heads).unwrap();
    let l = randn(&[2, t, c], 23);
    let fused = module.forward(&l, &l).unwrap();
    let mut worst = 0.0f64;
    for b in 0..2 {
        let lb = l.get(b).unwrap();
        let normed = mat(&module.norm.forward(&lb).unwrap());
        let expected = add(&mat(&lb), &dense_attention(&normed, &normed, &module.attn, heads));
        worst = worst.max(max_diff(&mat(&fused.get(b).unwrap()), &expected));
    }
    worst
}

/// Cross-attention with distinct flows: queries come from the other flow,
/// keys and values from the flow being updated, residual onto the latter.
pub fn cross_attention_vs_dense() -> f64 {
    let (t, c, heads) = (4, 8, 2);
    let mut store = VarStore::new(3, DType::F64);
    let module = ComparisonModule::new(&mut store.root().sub("compare"), c, heads).unwrap();
    let a = randn(&[1, t, c], 31);
    let b = randn(&[1, t, c], 32);
    let fused = module.forward(&a, &b).unwrap();
    let na = mat(&module.norm.forward(&a.get(0).unwrap()).unwrap());
    let nb = mat(&module.norm.forward(&b.get(0).unwrap()).unwrap());
    let expected = add(&mat(&a.get(0).unwrap()), &dense_attention(&nb, &na, &module.attn, heads));
    max_diff(&mat(&fused.get(0).unwrap()), &expected)
}
