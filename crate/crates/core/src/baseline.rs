//! Convolutional baselines: a DCGAN-style generator and a convolutional
//! critic with attribute heads, optionally extended by a comparison module
//! (cross-attention between the two images' features) or by a self-attention
//! block of identical size.

use crate::data::AttrLayout;
use crate::discriminator::{randomized_pair, unary_scores, ComparisonModule, Critic, PairOutput, PairScores};
use crate::error::{Error, Result};
use crate::generator::ImageGenerator;
use crate::nn::{conv2d, conv_transpose2d, softmax_last, Linear, Mode, VarStore};
use crate::rng::Rng;
use candle_core::{DType, Tensor};
use candle_nn::{Conv2d, ConvTranspose2d, Module};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CnnGeneratorConfig {
    pub condition_dim: usize,
    pub bottom_width: usize,
    pub base_channels: usize,
    pub output_size: usize,
}

impl CnnGeneratorConfig {
    pub fn desk(condition_dim: usize) -> Self {
        Self {
            condition_dim,
            bottom_width: 4,
            base_channels: 64,
            output_size: 32,
        }
    }

    pub fn paper(condition_dim: usize) -> Self {
        Self {
            condition_dim,
            bottom_width: 4,
            base_channels: 512,
            output_size: 128,
        }
    }

    pub fn n_upsamples(&self) -> usize {
        (self.output_size / self.bottom_width).trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.condition_dim == 0 || self.bottom_width == 0 || self.output_size == 0 {
            return Err(Error::Config("CNN generator sizes must be positive".into()));
        }
        if self.output_size % self.bottom_width != 0 || !(self.output_size / self.bottom_width).is_power_of_two() {
            return Err(Error::Config(format!(
                "output size {} is not bottom width {} times a power of two",
                self.output_size, self.bottom_width
            )));
        }
        if self.base_channels >> self.n_upsamples() == 0 {
            return Err(Error::Config("too few base channels for the number of upsampling steps".into()));
        }
        Ok(())
    }
}

pub struct CnnGenerator {
    config: CnnGeneratorConfig,
    store: VarStore,
    project: Linear,
    ups: Vec<ConvTranspose2d>,
    out: Conv2d,
}

impl CnnGenerator {
    pub fn new(config: &CnnGeneratorConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut store = VarStore::new(seed, dtype);
        let mut root = store.root();
        let b = config.bottom_width;
        let project = Linear::new(&mut root.sub("project"), config.condition_dim, config.base_channels * b * b, true)?;
        let mut ch = config.base_channels;
        let mut ups = Vec::new();
        for i in 0..config.n_upsamples() {
            ups.push(conv_transpose2d(&mut root.sub(format!("up{i}")), ch, ch / 2, 4, 2, 1)?);
            ch /= 2;
        }
        let out = conv2d(&mut root.sub("out"), ch, 1, 3, 1, 1)?;
        Ok(Self {
            config: config.clone(),
            store,
            project,
            ups,
            out,
        })
    }
}

impl ImageGenerator for CnnGenerator {
    fn condition_dim(&self) -> usize {
        self.config.condition_dim
    }

    fn output_size(&self) -> usize {
        self.config.output_size
    }

    fn forward(&self, z: &Tensor, _mode: &mut Mode) -> Result<Tensor> {
        let (n, d) = z.dims2()?;
        if d != self.config.condition_dim {
            return Err(Error::Shape(format!(
                "condition has length {d}, generator expects {}",
                self.config.condition_dim
            )));
        }
        let b = self.config.bottom_width;
        let mut x = self
            .project
            .forward(z)?
            .relu()?
            .reshape((n, self.config.base_channels, b, b))?;
        for up in &self.ups {
            x = up.forward(&x)?.relu()?;
        }
        Ok(self.out.forward(&x)?.tanh()?)
    }

    fn store(&self) -> &VarStore {
        &self.store
    }
}

/// What sits between the critic's feature layer and its heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum FeatureFusion {
    None,
    Compare,
    SelfAttention,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CnnCriticConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub base_channels: usize,
    pub n_downsamples: usize,
    pub feature_dim: usize,
    /// The feature vector is viewed as `feature_tokens` tokens for attention.
    pub feature_tokens: usize,
    pub n_heads: usize,
    pub n_identities: usize,
}

impl CnnCriticConfig {
    pub fn desk(n_identities: usize) -> Self {
        Self {
            image_size: 32,
            in_channels: 1,
            base_channels: 16,
            n_downsamples: 3,
            feature_dim: 128,
            feature_tokens: 8,
            n_heads: 2,
            n_identities,
        }
    }

    pub fn paper(n_identities: usize) -> Self {
        Self {
            image_size: 128,
            in_channels: 1,
            base_channels: 64,
            n_downsamples: 4,
            feature_dim: 512,
            feature_tokens: 16,
            n_heads: 4,
            n_identities,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size >> self.n_downsamples == 0 || !self.image_size.is_power_of_two() {
            return Err(Error::Config("critic image size cannot be downsampled that often".into()));
        }
        if self.feature_tokens == 0 || self.feature_dim % self.feature_tokens != 0 {
            return Err(Error::Config("feature dim must split evenly into tokens".into()));
        }
        let token = self.feature_dim / self.feature_tokens;
        if self.n_heads == 0 || token % self.n_heads != 0 {
            return Err(Error::Config("token width must be divisible by the head count".into()));
        }
        if self.base_channels == 0 || self.n_identities == 0 || self.in_channels == 0 {
            return Err(Error::Config("critic sizes must be positive".into()));
        }
        Ok(())
    }
}

pub struct CnnCritic {
    config: CnnCriticConfig,
    fusion: FeatureFusion,
    store: VarStore,
    convs: Vec<Conv2d>,
    fc: Linear,
    module: Option<ComparisonModule>,
    real_head: Linear,
    attr_head: Linear,
}

impl CnnCritic {
    pub fn new(config: &CnnCriticConfig, fusion: FeatureFusion, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut store = VarStore::new(seed, dtype);
        let mut root = store.root();
        let mut convs = Vec::new();
        let mut ch = config.in_channels;
        for i in 0..config.n_downsamples {
            let out = config.base_channels << i;
            convs.push(conv2d(&mut root.sub(format!("conv{i}")), ch, out, 4, 2, 1)?);
            ch = out;
        }
        let res = config.image_size >> config.n_downsamples;
        let fc = Linear::new(&mut root.sub("fc"), ch * res * res, config.feature_dim, true)?;
        let module = match fusion {
            FeatureFusion::None => None,
            _ => Some(ComparisonModule::new(
                &mut root.sub("fusion"),
                config.feature_dim / config.feature_tokens,
                config.n_heads,
            )?),
        };
        let real_head = Linear::new(&mut root.sub("real_head"), config.feature_dim, 1, true)?;
        let attr_head = Linear::new(
            &mut root.sub("attr_head"),
            config.feature_dim,
            AttrLayout::new(config.n_identities).len(),
            true,
        )?;
        Ok(Self {
            config: config.clone(),
            fusion,
            store,
            convs,
            fc,
            module,
            real_head,
            attr_head,
        })
    }

    pub fn fusion(&self) -> FeatureFusion {
        self.fusion
    }

    fn features(&self, images: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = images.dims4()?;
        let s = self.config.image_size;
        if c != self.config.in_channels || h != s || w != s {
            return Err(Error::Shape(format!("critic expects {s}×{s} images, got {h}×{w}")));
        }
        let mut x = images.clone();
        for conv in &self.convs {
            let y = conv.forward(&x)?;
            x = y.maximum(&(&y * 0.2)?)?;
        }
        let f = self.fc.forward(&x.flatten_from(1)?)?;
        Ok(f.maximum(&(&f * 0.2)?)?)
    }

    fn tokens(&self, f: &Tensor) -> Result<Tensor> {
        let n = f.dims()[0];
        let t = self.config.feature_tokens;
        Ok(f.reshape((n, t, self.config.feature_dim / t))?)
    }

    fn heads(&self, f: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((self.real_head.forward(f)?.squeeze(1)?, self.attr_head.forward(f)?))
    }

    /// Pairwise evaluation for the comparison variant.
    pub fn discriminate_pair(&self, first: &Tensor, second: &Tensor) -> Result<PairOutput> {
        let module = match (&self.module, self.fusion) {
            (Some(m), FeatureFusion::Compare) => m,
            _ => return Err(Error::Config("critic has no comparison module".into())),
        };
        let n = first.dims()[0];
        let f = self.features(&Tensor::cat(&[first, second], 0)?)?;
        let tokens = self.tokens(&f)?;
        let swapped = Tensor::cat(&[tokens.narrow(0, n, n)?, tokens.narrow(0, 0, n)?], 0)?;
        let fused = module.forward(&tokens, &swapped)?.flatten_from(1)?;
        let (logits, attrs) = self.heads(&fused)?;
        let logits = Tensor::stack(&[logits.narrow(0, 0, n)?, logits.narrow(0, n, n)?], 1)?;
        Ok(PairOutput {
            probs: softmax_last(&logits)?,
            logits,
            attr_first: attrs.narrow(0, 0, n)?,
            attr_second: attrs.narrow(0, n, n)?,
        })
    }
}

impl Critic for CnnCritic {
    fn score(&self, real: &Tensor, fake: &Tensor, slots: &mut Rng, _mode: &mut Mode) -> Result<PairScores> {
        match self.fusion {
            FeatureFusion::Compare => randomized_pair(real, fake, slots, |a, b| self.discriminate_pair(a, b)),
            FeatureFusion::None | FeatureFusion::SelfAttention => {
                let f = self.features(&Tensor::cat(&[real, fake], 0)?)?;
                let f = match &self.module {
                    Some(m) => {
                        let t = self.tokens(&f)?;
                        m.forward(&t, &t)?.flatten_from(1)?
                    }
                    None => f,
                };
                let (logits, attrs) = self.heads(&f)?;
                unary_scores(&logits, &attrs)
            }
        }
    }

    fn is_pairwise(&self) -> bool {
        self.fusion == FeatureFusion::Compare
    }

    fn layout(&self) -> AttrLayout {
        AttrLayout::new(self.config.n_identities)
    }

    fn store(&self) -> &VarStore {
        &self.store
    }
}
