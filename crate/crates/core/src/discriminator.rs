//! Double-flow discriminator. Both images of a (real, fake) pair go through a
//! shared patch embedding and transformer encoder; a cross-attention
//! comparison module lets each flow re-weight itself using the other flow's
//! context; a shared head turns each fused class token into a realness logit
//! and attribute logits. Softmax over the two realness logits yields the pair
//! of probabilities that each slot holds the real image.
//!
//! Every parameter is shared between the two flows, so the whole map is
//! slot-symmetric: swapping the inputs swaps the outputs.

use crate::data::AttrLayout;
use crate::error::{Error, Result};
use crate::nn::{softmax_last, Init, LayerNorm, Linear, Mode, MultiHeadAttention, TransformerBlock, VarStore};
use crate::rng::Rng;
use candle_core::{DType, Device, IndexOp, Tensor};
use rand::Rng as _;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DiscriminatorConfig {
    pub patch_size: usize,
    pub token_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub dropout: f64,
    pub image_size: usize,
    pub in_channels: usize,
    pub n_identities: usize,
    pub mlp_ratio: usize,
}

impl DiscriminatorConfig {
    pub fn paper(n_identities: usize) -> Self {
        Self {
            patch_size: 8,
            token_dim: 128,
            n_blocks: 4,
            n_heads: 4,
            dropout: 0.1,
            image_size: 128,
            in_channels: 1,
            n_identities,
            mlp_ratio: 4,
        }
    }

    pub fn desk(n_identities: usize) -> Self {
        Self {
            patch_size: 8,
            token_dim: 64,
            n_blocks: 2,
            n_heads: 4,
            dropout: 0.1,
            image_size: 32,
            in_channels: 1,
            n_identities,
            mlp_ratio: 2,
        }
    }

    pub fn layout(&self) -> AttrLayout {
        AttrLayout::new(self.n_identities)
    }

    pub fn n_patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.n_heads == 0 || self.token_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "token dim {} is not divisible by {} heads",
                self.token_dim, self.n_heads
            )));
        }
        if self.in_channels == 0 || self.n_identities == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("discriminator channel, identity and MLP counts must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("discriminator dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Scores for a batch of (real, fake) pairs, expressed from the real/fake
/// point of view regardless of which slot each image occupied.
#[derive(Debug, Clone)]
pub struct PairScores {
    /// Probability assigned to the real image, shape (n).
    pub d_real: Tensor,
    /// Probability that the fake image is real, shape (n).
    pub d_fake: Tensor,
    pub logit_real: Tensor,
    pub logit_fake: Tensor,
    /// Attribute logits, shape (n, attribute_len).
    pub attr_real: Tensor,
    pub attr_fake: Tensor,
    /// Whether the real image sat in the first slot, per pair.
    pub real_in_first: Vec<bool>,
}

/// A critic scores real/fake image batches. Pairwise critics see both images
/// at once; unary critics score each image on its own.
pub trait Critic {
    fn score(&self, real: &Tensor, fake: &Tensor, slots: &mut Rng, mode: &mut Mode) -> Result<PairScores>;
    fn is_pairwise(&self) -> bool;
    fn layout(&self) -> AttrLayout;
    fn store(&self) -> &VarStore;
}

/// Output of one pairwise evaluation, batched: `probs` and `logits` are (n, 2).
#[derive(Debug, Clone)]
pub struct PairOutput {
    pub logits: Tensor,
    pub probs: Tensor,
    pub attr_first: Tensor,
    pub attr_second: Tensor,
}

/// Single-pair view of a [`PairOutput`].
#[derive(Debug, Clone, PartialEq)]
pub struct PairPrediction {
    pub p_first: f64,
    pub p_second: f64,
    pub attr_logits_first: Vec<f64>,
    pub attr_logits_second: Vec<f64>,
}

impl PairOutput {
    pub fn predictions(&self) -> Result<Vec<PairPrediction>> {
        let probs = self.probs.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let a = self.attr_first.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let b = self.attr_second.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        Ok(probs
            .into_iter()
            .zip(a.into_iter().zip(b))
            .map(|(p, (a, b))| PairPrediction {
                p_first: p[0],
                p_second: p[1],
                attr_logits_first: a,
                attr_logits_second: b,
            })
            .collect())
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// Cross-attention with queries from the other flow and keys/values from the
/// flow being updated; the result is added back onto that flow.
#[derive(Debug, Clone)]
pub struct ComparisonModule {
    pub norm: LayerNorm,
    pub attn: MultiHeadAttention,
}

impl ComparisonModule {
    pub fn new(scope: &mut crate::nn::Scope, dim: usize, n_heads: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(&mut scope.sub("norm"), dim)?,
            attn: MultiHeadAttention::new(&mut scope.sub("attn"), dim, n_heads)?,
        })
    }

    pub fn forward_with_weights(&self, l_self: &Tensor, l_other: &Tensor) -> Result<(Tensor, Tensor)> {
        if l_self.dims() != l_other.dims() {
            return Err(Error::Shape(format!(
                "comparison flows differ in shape: {:?} vs {:?}",
                l_self.dims(),
                l_other.dims()
            )));
        }
        let q_src = self.norm.forward(l_other)?;
        let kv_src = self.norm.forward(l_self)?;
        let att = self.attn.attend(&q_src, &kv_src, None)?;
        Ok(((l_self + att.output)?, att.weights))
    }

    pub fn forward(&self, l_self: &Tensor, l_other: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_weights(l_self, l_other)?.0)
    }
}

pub struct DoubleFlowDiscriminator {
    config: DiscriminatorConfig,
    store: VarStore,
    patch: Linear,
    cls: Tensor,
    pos: Tensor,
    blocks: Vec<TransformerBlock>,
    compare: Option<ComparisonModule>,
    norm: LayerNorm,
    real_head: Linear,
    attr_head: Linear,
}

impl DoubleFlowDiscriminator {
    pub fn store(&self) -> &VarStore {
        &self.store
    }

    /// `comparison = false` drops the comparison module and turns the model
    /// into a plain unary transformer discriminator.
    pub fn new(config: &DiscriminatorConfig, comparison: bool, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut store = VarStore::new(seed, dtype);
        let mut root = store.root();
        let d = config.token_dim;
        let patch_len = config.in_channels * config.patch_size * config.patch_size;
        let patch = Linear::new(&mut root.sub("patch"), patch_len, d, true)?;
        let cls = root.param("cls", &[1, 1, d], Init::Normal(0.02))?;
        let pos = root.param("pos", &[config.n_patches() + 1, d], Init::Normal(0.02))?;
        let blocks = (0..config.n_blocks)
            .map(|i| TransformerBlock::new(&mut root.sub(format!("block{i}")), d, config.n_heads, config.mlp_ratio, config.dropout))
            .collect::<Result<Vec<_>>>()?;
        let compare = if comparison {
            Some(ComparisonModule::new(&mut root.sub("compare"), d, config.n_heads)?)
        } else {
            None
        };
        let norm = LayerNorm::new(&mut root.sub("norm"), d)?;
        let real_head = Linear::new(&mut root.sub("real_head"), d, 1, true)?;
        let attr_head = Linear::new(&mut root.sub("attr_head"), d, config.layout().len(), true)?;
        Ok(Self {
            config: config.clone(),
            store,
            patch,
            cls,
            pos,
            blocks,
            compare,
            norm,
            real_head,
            attr_head,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn comparison(&self) -> Option<&ComparisonModule> {
        self.compare.as_ref()
    }

    pub fn blocks(&self) -> &[TransformerBlock] {
        &self.blocks
    }

    /// Splits (n, c, s, s) images into patches, projects them, prepends the
    /// class token and adds positional embeddings: (n, patches + 1, token_dim).
    pub fn patch_embed(&self, images: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = images.dims4()?;
        let p = self.config.patch_size;
        if c != self.config.in_channels || h != self.config.image_size || w != self.config.image_size {
            return Err(Error::Shape(format!(
                "discriminator expects {}×{}×{} images, got {c}×{h}×{w}",
                self.config.in_channels, self.config.image_size, self.config.image_size
            )));
        }
        if h % p != 0 || w % p != 0 {
            return Err(Error::Shape(format!("{h}×{w} image is not divisible into {p}×{p} patches")));
        }
        let (gh, gw) = (h / p, w / p);
        let patches = images
            .reshape((n, c, gh, p, gw, p))?
            .permute((0, 2, 4, 1, 3, 5))?
            .contiguous()?
            .reshape((n, gh * gw, c * p * p))?;
        let tokens = self.patch.forward(&patches)?;
        let cls = self.cls.broadcast_as((n, 1, self.config.token_dim))?;
        Ok(Tensor::cat(&[&cls, &tokens], 1)?.broadcast_add(&self.pos)?)
    }

    pub fn encode_flow(&self, rep: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        let mut x = rep.clone();
        for block in &self.blocks {
            x = block.forward(&x, None, mode)?;
        }
        Ok(x)
    }

    pub fn cross_attention(&self, l_self: &Tensor, l_other: &Tensor) -> Result<Tensor> {
        match &self.compare {
            Some(m) => m.forward(l_self, l_other),
            None => Err(Error::Config("discriminator was built without a comparison module".into())),
        }
    }

    fn heads(&self, rep: &Tensor) -> Result<(Tensor, Tensor)> {
        let cls = self.norm.forward(&rep.i((.., 0, ..))?)?;
        let logit = self.real_head.forward(&cls)?.squeeze(1)?;
        Ok((logit, self.attr_head.forward(&cls)?))
    }

    /// Encodes a batch of images independently (no comparison).
    fn encode_images(&self, images: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        self.encode_flow(&self.patch_embed(images)?, mode)
    }

    pub fn discriminate_pair(&self, first: &Tensor, second: &Tensor, mode: &mut Mode) -> Result<PairOutput> {
        if first.dims() != second.dims() {
            return Err(Error::Shape(format!(
                "pair images differ in shape: {:?} vs {:?}",
                first.dims(),
                second.dims()
            )));
        }
        let n = first.dims()[0];
        let reps = self.encode_images(&Tensor::cat(&[first, second], 0)?, mode)?;
        let fused = match &self.compare {
            Some(m) => {
                let swapped = Tensor::cat(&[reps.narrow(0, n, n)?, reps.narrow(0, 0, n)?], 0)?;
                m.forward(&reps, &swapped)?
            }
            None => reps,
        };
        let (logits, attrs) = self.heads(&fused)?;
        let logits = Tensor::stack(&[logits.narrow(0, 0, n)?, logits.narrow(0, n, n)?], 1)?;
        Ok(PairOutput {
            probs: softmax_last(&logits)?,
            logits,
            attr_first: attrs.narrow(0, 0, n)?,
            attr_second: attrs.narrow(0, n, n)?,
        })
    }

    /// Randomizes slot order per pair and reports the probability assigned
    /// to the real image's slot.
    pub fn realness_of(&self, real: &Tensor, fake: &Tensor, slots: &mut Rng, mode: &mut Mode) -> Result<PairScores> {
        randomized_pair(real, fake, slots, |first, second| self.discriminate_pair(first, second, mode))
    }

    fn score_unary(&self, real: &Tensor, fake: &Tensor, mode: &mut Mode) -> Result<PairScores> {
        let reps = self.encode_images(&Tensor::cat(&[real, fake], 0)?, mode)?;
        let (logits, attrs) = self.heads(&reps)?;
        unary_scores(&logits, &attrs)
    }
}

/// Runs a pairwise scorer with a random slot order per pair and maps the
/// outputs back to the real/fake point of view.
pub fn randomized_pair<F>(real: &Tensor, fake: &Tensor, slots: &mut Rng, pair: F) -> Result<PairScores>
where
    F: FnOnce(&Tensor, &Tensor) -> Result<PairOutput>,
{
    if real.dims() != fake.dims() {
        return Err(Error::Shape("real and fake batches differ in shape".into()));
    }
    let n = real.dims()[0];
    let real_in_first: Vec<bool> = (0..n).map(|_| slots.gen_bool(0.5)).collect();
    let dev = Device::Cpu;
    let index = |real_side: bool| -> Result<Tensor> {
        let idx: Vec<u32> = (0..n)
            .map(|i| (i + if real_in_first[i] == real_side { 0 } else { n }) as u32)
            .collect();
        Ok(Tensor::new(idx.as_slice(), &dev)?)
    };
    // Row i of `first` comes from the real half of the pool when the real
    // image sits in slot one.
    let first_idx = index(true)?;
    let second_idx = index(false)?;
    let pool = Tensor::cat(&[real, fake], 0)?;
    let out = pair(&pool.index_select(&first_idx, 0)?, &pool.index_select(&second_idx, 0)?)?;

    let real_col: Vec<u32> = real_in_first.iter().map(|&f| if f { 0 } else { 1 }).collect();
    let fake_col: Vec<u32> = real_col.iter().map(|c| 1 - c).collect();
    let real_col = Tensor::new(real_col.as_slice(), &dev)?.unsqueeze(1)?;
    let fake_col = Tensor::new(fake_col.as_slice(), &dev)?.unsqueeze(1)?;
    let pick = |t: &Tensor, col: &Tensor| -> Result<Tensor> { Ok(t.contiguous()?.gather(col, 1)?.squeeze(1)?) };
    let attrs = Tensor::cat(&[&out.attr_first, &out.attr_second], 0)?;
    Ok(PairScores {
        d_real: pick(&out.probs, &real_col)?,
        d_fake: pick(&out.probs, &fake_col)?,
        logit_real: pick(&out.logits, &real_col)?,
        logit_fake: pick(&out.logits, &fake_col)?,
        attr_real: attrs.index_select(&first_idx, 0)?,
        attr_fake: attrs.index_select(&second_idx, 0)?,
        real_in_first,
    })
}

/// Scores from a unary critic run on the stacked batch [real; fake]:
/// `logits` is (2n) and `attrs` is (2n, attribute_len).
pub fn unary_scores(logits: &Tensor, attrs: &Tensor) -> Result<PairScores> {
    let n = logits.dims1()? / 2;
    let probs = sigmoid(logits)?;
    Ok(PairScores {
        d_real: probs.narrow(0, 0, n)?,
        d_fake: probs.narrow(0, n, n)?,
        logit_real: logits.narrow(0, 0, n)?,
        logit_fake: logits.narrow(0, n, n)?,
        attr_real: attrs.narrow(0, 0, n)?,
        attr_fake: attrs.narrow(0, n, n)?,
        real_in_first: vec![true; n],
    })
}

impl Critic for DoubleFlowDiscriminator {
    fn score(&self, real: &Tensor, fake: &Tensor, slots: &mut Rng, mode: &mut Mode) -> Result<PairScores> {
        if self.compare.is_some() {
            self.realness_of(real, fake, slots, mode)
        } else {
            self.score_unary(real, fake, mode)
        }
    }

    fn is_pairwise(&self) -> bool {
        self.compare.is_some()
    }

    fn layout(&self) -> AttrLayout {
        self.config.layout()
    }

    fn store(&self) -> &VarStore {
        &self.store
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn tiny() -> DiscriminatorConfig {
        DiscriminatorConfig {
            patch_size: 8,
            token_dim: 16,
            n_blocks: 1,
            n_heads: 2,
            dropout: 0.1,
            image_size: 16,
            in_channels: 1,
            n_identities: 3,
            mlp_ratio: 2,
        }
    }

    fn images(n: usize, seed: u64) -> Tensor {
        let mut rng = stream(seed, "img", 0);
        let v: Vec<f32> = (0..n * 256).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, (n, 1, 16, 16), &Device::Cpu).unwrap()
    }

    #[test]
    fn patch_counts() {
        let d = DoubleFlowDiscriminator::new(&DiscriminatorConfig::desk(4), true, 0, DType::F32).unwrap();
        let rep = d.patch_embed(&Tensor::zeros((2, 1, 32, 32), DType::F32, &Device::Cpu).unwrap()).unwrap();
        assert_eq!(rep.dims(), &[2, 17, 64]);
        assert_eq!(DiscriminatorConfig::paper(10).n_patches() + 1, 257);
        let mut bad = DiscriminatorConfig::desk(4);
        bad.image_size = 129;
        assert!(bad.validate().is_err());
        assert!(d.patch_embed(&Tensor::zeros((1, 1, 24, 24), DType::F32, &Device::Cpu).unwrap()).is_err());
    }

    #[test]
    fn pair_probabilities_sum_to_one_and_swap() {
        let d = DoubleFlowDiscriminator::new(&tiny(), true, 1, DType::F32).unwrap();
        let (a, b) = (images(4, 1), images(4, 2));
        let ab = d.discriminate_pair(&a, &b, &mut Mode::Eval).unwrap().predictions().unwrap();
        let ba = d.discriminate_pair(&b, &a, &mut Mode::Eval).unwrap().predictions().unwrap();
        for (x, y) in ab.iter().zip(&ba) {
            assert!((x.p_first + x.p_second - 1.0).abs() < 1e-6);
            assert!((x.p_first - y.p_second).abs() < 1e-5);
            for (u, v) in x.attr_logits_first.iter().zip(&y.attr_logits_second) {
                assert!((u - v).abs() < 1e-5);
            }
        }
        let aa = d.discriminate_pair(&a, &a, &mut Mode::Eval).unwrap().predictions().unwrap();
        assert!(aa.iter().all(|p| (p.p_first - 0.5).abs() < 1e-5));
    }

    #[test]
    fn realness_bridge_is_consistent() {
        let d = DoubleFlowDiscriminator::new(&tiny(), true, 1, DType::F64).unwrap();
        let (a, b) = (images(6, 3).to_dtype(DType::F64).unwrap(), images(6, 4).to_dtype(DType::F64).unwrap());
        let s = d.realness_of(&a, &b, &mut stream(0, "slots", 0), &mut Mode::Eval).unwrap();
        let dr = s.d_real.to_vec1::<f64>().unwrap();
        let df = s.d_fake.to_vec1::<f64>().unwrap();
        let lr = s.logit_real.to_vec1::<f64>().unwrap();
        let lf = s.logit_fake.to_vec1::<f64>().unwrap();
        for i in 0..6 {
            assert!((dr[i] + df[i] - 1.0).abs() < 1e-12);
            assert_eq!(dr[i] > 0.5, lr[i] > lf[i]);
            assert!(dr[i] > 0.0 && dr[i] < 1.0);
        }
        let same = d.realness_of(&a, &a, &mut stream(0, "slots", 1), &mut Mode::Eval).unwrap();
        assert!(same.d_real.to_vec1::<f64>().unwrap().iter().all(|p| (p - 0.5).abs() < 1e-5));
    }

    #[test]
    fn eval_mode_is_deterministic_and_train_mode_uses_dropout() {
        let d = DoubleFlowDiscriminator::new(&tiny(), true, 1, DType::F32).unwrap();
        let (a, b) = (images(2, 5), images(2, 6));
        let e1 = d.discriminate_pair(&a, &b, &mut Mode::Eval).unwrap().probs.to_vec2::<f32>().unwrap();
        let e2 = d.discriminate_pair(&a, &b, &mut Mode::Eval).unwrap().probs.to_vec2::<f32>().unwrap();
        assert_eq!(e1, e2);
        let t = d
            .discriminate_pair(&a, &b, &mut Mode::train(1, "drop", 0))
            .unwrap()
            .probs
            .to_vec2::<f32>()
            .unwrap();
        assert_ne!(e1, t);
    }

    #[test]
    fn unary_variant_scores_each_image_alone() {
        let d = DoubleFlowDiscriminator::new(&tiny(), false, 2, DType::F32).unwrap();
        assert!(!d.is_pairwise());
        let (a, b) = (images(3, 7), images(3, 8));
        let s1 = d.score(&a, &b, &mut stream(0, "s", 0), &mut Mode::Eval).unwrap();
        let s2 = d.score(&a, &a, &mut stream(0, "s", 0), &mut Mode::Eval).unwrap();
        assert_eq!(s1.d_real.to_vec1::<f32>().unwrap(), s2.d_real.to_vec1::<f32>().unwrap());
        assert!(d.cross_attention(&a, &a).is_err());
    }
}
