//! Two-stage training: GAN pretraining on image-derived conditions, then
//! fine-tuning on aligned fMRI conditions; plus evaluation and checkpoints.

use crate::alignment::{fit_alignment, LinearAligner};
use crate::baseline::{CnnCritic, CnnGenerator, FeatureFusion};
use crate::checkpoint::Container;
use crate::config::{RunConfig, Variant};
use crate::data::{pad_fmri_to, AttrLayout, Dataset, FmriRecord, ImageGrid, ImageSample, Split};
use crate::discriminator::{Critic, DoubleFlowDiscriminator};
use crate::error::{Error, Result};
use crate::extractor::{train_extractor, Extractor, TrainSettings};
use crate::generator::{ImageGenerator, SwinGenerator};
use crate::losses::{bce_with_logits_rows, d_loss_dfgan, d_loss_mcgan, g_loss_dfgan, g_loss_mcgan, grouped_bce_with_logits, LossParts};
use crate::metrics::{attribute_error, misjudge_rate, mse, ssim_batch, to_unit, train_attribute_predictor, AttributePredictor, MetricsReport};
use crate::nn::{adam, images_to_tensor, rows_to_tensor, Mode};
use crate::rng::{derive_seed, stream};
use candle_core::{DType, Tensor, Var};
use candle_nn::{AdamW, Optimizer};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use std::path::Path;

const DTYPE: DType = DType::F32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Initialized,
    Pretrained,
    Finetuned,
}

/// Mean losses of one epoch. Discriminator and generator streams are kept
/// apart, each split into its logged parts.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub d_total: f64,
    pub d_adversarial: f64,
    pub d_attribute: f64,
    pub g_total: f64,
    pub g_adversarial: f64,
    pub g_attribute: f64,
    pub g_pixel: f64,
}

impl EpochLog {
    pub fn is_finite(&self) -> bool {
        [
            self.d_total,
            self.d_adversarial,
            self.d_attribute,
            self.g_total,
            self.g_adversarial,
            self.g_attribute,
            self.g_pixel,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct History {
    pub extractor: Vec<f64>,
    pub predictor: Vec<f64>,
    pub pretrain: Vec<EpochLog>,
    pub finetune: Vec<EpochLog>,
}

/// The attribute networks every variant shares: the condition extractor and
/// the independent attribute predictor used for scoring.
pub struct Foundation {
    pub extractor: Extractor,
    pub predictor: AttributePredictor,
    pub extractor_history: Vec<f64>,
    pub predictor_history: Vec<f64>,
}

impl Foundation {
    pub fn try_clone(&self) -> Result<Self> {
        Ok(Self {
            extractor: clone_extractor(&self.extractor)?,
            predictor: clone_predictor(&self.predictor)?,
            extractor_history: self.extractor_history.clone(),
            predictor_history: self.predictor_history.clone(),
        })
    }

    /// The extractor and predictor stored in a checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Ok(Self {
            extractor: clone_extractor(&ckpt.extractor)?,
            predictor: clone_predictor(&ckpt.predictor)?,
            extractor_history: ckpt.history.extractor.clone(),
            predictor_history: ckpt.history.predictor.clone(),
        })
    }
}

/// Loads the dataset named by `data.source`: `synthetic` or a manifest path.
pub fn load_data(config: &RunConfig) -> Result<Dataset> {
    if config.data.source == "synthetic" {
        return Ok(crate::data::generate_synthetic_dataset(&config.data.synthetic)?.dataset);
    }
    crate::data::load_dataset(Path::new(&config.data.source), config.image_size(), config.data.to_gray)
}

fn clone_extractor(e: &Extractor) -> Result<Extractor> {
    let out = Extractor::new(e.config(), 0, e.store().dtype())?;
    out.store().copy_from(e.store())?;
    Ok(out)
}

fn clone_predictor(p: &AttributePredictor) -> Result<AttributePredictor> {
    let out = AttributePredictor::new(p.config(), 0, p.store().dtype())?;
    out.store().copy_from(p.store())?;
    Ok(out)
}

/// Aligns model sections with the dataset's identity count and image size.
pub fn resolve_config(config: &RunConfig, data: &Dataset) -> Result<RunConfig> {
    let mut cfg = config.clone();
    cfg.set_identities(data.n_identities);
    if let Some(size) = data.image_size() {
        if size != cfg.image_size() {
            return Err(Error::Config(format!(
                "dataset images are {size}×{size} but the models expect {}",
                cfg.image_size()
            )));
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_samples(data: &Dataset) -> Vec<&ImageSample> {
    data.images_in(Split::Train).into_iter().map(|i| &data.images[i]).collect()
}

/// Trains the extractor heads and the attribute predictor on the training
/// images.
pub fn train_foundation(config: &RunConfig, data: &Dataset) -> Result<Foundation> {
    let cfg = resolve_config(config, data)?;
    let samples = train_samples(data);
    if samples.is_empty() {
        return Err(Error::InvalidInput("dataset has no training images".into()));
    }
    let extractor = Extractor::new(&cfg.extractor, derive_seed(cfg.seed, "extractor-init", 0), DTYPE)?;
    let extractor_history = train_extractor(
        &extractor,
        &samples,
        TrainSettings {
            epochs: cfg.extractor_training.epochs,
            lr: cfg.extractor_training.lr,
            batch_size: cfg.extractor_training.batch_size,
            seed: derive_seed(cfg.seed, "extractor-train", 0),
        },
    )?;
    let (predictor, predictor_history) = train_attribute_predictor(
        &samples,
        &cfg.predictor,
        TrainSettings {
            epochs: cfg.predictor_training.epochs,
            lr: cfg.predictor_training.lr,
            batch_size: cfg.predictor_training.batch_size,
            seed: derive_seed(cfg.seed, "predictor", 0),
        },
        DTYPE,
    )?;
    Ok(Foundation {
        extractor,
        predictor,
        extractor_history,
        predictor_history,
    })
}

pub fn build_generator(cfg: &RunConfig, seed: u64) -> Result<Box<dyn ImageGenerator>> {
    let seed = derive_seed(seed, "generator-init", 0);
    Ok(if cfg.variant.transformer_generator() {
        Box::new(SwinGenerator::new(&cfg.generator, seed, DTYPE)?)
    } else {
        Box::new(CnnGenerator::new(&cfg.cnn_generator, seed, DTYPE)?)
    })
}

pub fn build_critic(cfg: &RunConfig, seed: u64) -> Result<Box<dyn Critic>> {
    let seed = derive_seed(seed, "critic-init", 0);
    Ok(match cfg.variant {
        Variant::Dfgan | Variant::CnngDfd => Box::new(DoubleFlowDiscriminator::new(&cfg.discriminator, true, seed, DTYPE)?),
        Variant::TgTd | Variant::CnngTd => Box::new(DoubleFlowDiscriminator::new(&cfg.discriminator, false, seed, DTYPE)?),
        Variant::Mcgan => Box::new(CnnCritic::new(&cfg.cnn_critic, FeatureFusion::None, seed, DTYPE)?),
        Variant::McganCompare => Box::new(CnnCritic::new(&cfg.cnn_critic, FeatureFusion::Compare, seed, DTYPE)?),
        Variant::McganOnlyAttn => Box::new(CnnCritic::new(&cfg.cnn_critic, FeatureFusion::SelfAttention, seed, DTYPE)?),
    })
}

/// Everything a run produces: models, aligner, resolved config, counters.
pub struct Checkpoint {
    pub config: RunConfig,
    pub stage: Stage,
    pub generator: Box<dyn ImageGenerator>,
    pub critic: Box<dyn Critic>,
    pub extractor: Extractor,
    pub predictor: AttributePredictor,
    pub aligner: Option<LinearAligner>,
    pub fmri_len: usize,
    pub epochs_pretrain_done: usize,
    pub epochs_finetune_done: usize,
    pub history: History,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Metadata {
    config: String,
    stage: Stage,
    fmri_len: usize,
    epochs_pretrain_done: usize,
    epochs_finetune_done: usize,
    history: History,
    has_aligner: bool,
}

impl Checkpoint {
    /// A fresh, untrained GAN on top of a trained foundation.
    pub fn initialize(config: &RunConfig, data: &Dataset, foundation: &Foundation) -> Result<Self> {
        let cfg = resolve_config(config, data)?;
        let f = foundation.try_clone()?;
        Ok(Self {
            generator: build_generator(&cfg, cfg.seed)?,
            critic: build_critic(&cfg, cfg.seed)?,
            extractor: f.extractor,
            predictor: f.predictor,
            aligner: None,
            fmri_len: data.fmri_len(),
            stage: Stage::Initialized,
            epochs_pretrain_done: 0,
            epochs_finetune_done: 0,
            history: History {
                extractor: f.extractor_history,
                predictor: f.predictor_history,
                ..History::default()
            },
            config: cfg,
        })
    }

    pub fn to_container(&self) -> Result<Container> {
        let meta = Metadata {
            config: self.config.to_text(),
            stage: self.stage,
            fmri_len: self.fmri_len,
            epochs_pretrain_done: self.epochs_pretrain_done,
            epochs_finetune_done: self.epochs_finetune_done,
            history: self.history.clone(),
            has_aligner: self.aligner.is_some(),
        };
        let mut c = Container {
            metadata: serde_json::to_value(meta).map_err(|e| Error::Checkpoint(e.to_string()))?,
            tensors: Vec::new(),
        };
        c.push_section("generator", self.generator.store().snapshot()?);
        c.push_section("critic", self.critic.store().snapshot()?);
        c.push_section("extractor", self.extractor.store().snapshot()?);
        c.push_section("predictor", self.predictor.store().snapshot()?);
        if let Some(a) = &self.aligner {
            c.push_section("aligner", a.to_named("linear"));
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta: Metadata =
            serde_json::from_value(c.metadata.clone()).map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        let config = RunConfig::from_text(&meta.config)?;
        config.validate()?;
        let generator = build_generator(&config, config.seed)?;
        generator.store().load(&c.section("generator"))?;
        let critic = build_critic(&config, config.seed)?;
        critic.store().load(&c.section("critic"))?;
        let extractor = Extractor::new(&config.extractor, 0, DTYPE)?;
        extractor.store().load(&c.section("extractor"))?;
        let predictor = AttributePredictor::new(&config.predictor, 0, DTYPE)?;
        predictor.store().load(&c.section("predictor"))?;
        let aligner = if meta.has_aligner {
            Some(LinearAligner::from_named("linear", &c.section("aligner"))?)
        } else {
            None
        };
        Ok(Self {
            config,
            stage: meta.stage,
            generator,
            critic,
            extractor,
            predictor,
            aligner,
            fmri_len: meta.fmri_len,
            epochs_pretrain_done: meta.epochs_pretrain_done,
            epochs_finetune_done: meta.epochs_finetune_done,
            history: meta.history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }

    pub fn try_clone(&self) -> Result<Self> {
        Self::from_container(&self.to_container()?)
    }

    /// Condition vectors for images, computed by the extractor.
    pub fn image_conditions(&self, images: &[&ImageGrid]) -> Result<Tensor> {
        self.extractor.extract_conditions(images)
    }

    /// Condition vectors for fMRI records via the aligner.
    pub fn fmri_conditions(&self, records: &[&FmriRecord]) -> Result<Tensor> {
        let aligner = self
            .aligner
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("checkpoint has no aligner".into()))?;
        let owned: Vec<FmriRecord> = records.iter().map(|r| (*r).clone()).collect();
        let padded = pad_fmri_to(&owned, aligner.input_length())?;
        let z = aligner.predict(&padded)?;
        matrix_to_tensor(&z)
    }

    /// Generates images for conditions in evaluation mode, in batches.
    pub fn generate(&self, z: &Tensor) -> Result<Tensor> {
        let n = z.dims()[0];
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let len = 64.min(n - start);
            parts.push(self.generator.forward(&z.narrow(0, start, len)?, &mut Mode::Eval)?);
            start += len;
        }
        Ok(Tensor::cat(&parts, 0)?)
    }
}

fn matrix_to_tensor(m: &DMatrix<f64>) -> Result<Tensor> {
    let rows: Vec<Vec<f32>> = m.row_iter().map(|r| r.iter().map(|&v| v as f32).collect()).collect();
    rows_to_tensor(&rows, DTYPE)
}

fn targets_tensor(samples: &[&ImageSample]) -> Result<Tensor> {
    let rows: Vec<Vec<f32>> = samples.iter().map(|s| s.attributes.to_vector()).collect();
    rows_to_tensor(&rows, DTYPE)
}

struct StepLosses {
    d: LossParts,
    g: LossParts,
}

/// One discriminator update followed by one generator update.
struct GanTrainer {
    opt_g: AdamW,
    opt_d: AdamW,
    seed: u64,
    step: u64,
    tag: &'static str,
}

impl GanTrainer {
    fn new(cfg: &RunConfig, g_vars: Vec<Var>, d_vars: Vec<Var>, tag: &'static str) -> Result<Self> {
        Ok(Self {
            opt_g: adam(g_vars, cfg.optim.lr, cfg.optim.beta1, cfg.optim.beta2)?,
            opt_d: adam(d_vars, cfg.optim.lr, cfg.optim.beta1, cfg.optim.beta2)?,
            seed: cfg.seed,
            step: 0,
            tag,
        })
    }

    fn d_loss(cfg: &RunConfig, critic: &dyn Critic, s: &crate::discriminator::PairScores, targets: &Tensor) -> Result<LossParts> {
        if cfg.variant.uses_mcgan_loss() {
            let layout = critic.layout();
            let r = grouped_bce_with_logits(targets, &s.attr_real, layout)?;
            let f = grouped_bce_with_logits(targets, &s.attr_fake, layout)?;
            d_loss_mcgan(&s.d_real, &s.d_fake, &r, &f, cfg.loss.lambda_d)
        } else {
            let r = bce_with_logits_rows(targets, &s.attr_real)?;
            let f = bce_with_logits_rows(targets, &s.attr_fake)?;
            d_loss_dfgan(&s.d_real, &s.d_fake, &r, &f, cfg.loss.alpha, cfg.loss_variant)
        }
    }

    fn g_loss(cfg: &RunConfig, s: &crate::discriminator::PairScores, fake: &Tensor, real: &Tensor, targets: &Tensor) -> Result<LossParts> {
        if cfg.variant.uses_mcgan_loss() {
            g_loss_mcgan(&s.d_fake, fake, real, cfg.loss.lambda_g)
        } else {
            let f = bce_with_logits_rows(targets, &s.attr_fake)?;
            g_loss_dfgan(&s.d_fake, fake, real, &f, cfg.loss.lambda, cfg.loss.alpha, cfg.loss_variant)
        }
    }

    fn step(
        &mut self,
        cfg: &RunConfig,
        generator: &dyn ImageGenerator,
        critic: &dyn Critic,
        z: &Tensor,
        real: &Tensor,
        targets: &Tensor,
    ) -> Result<StepLosses> {
        let i = self.step;
        self.step += 1;
        let mut g_mode = Mode::train(self.seed, &format!("{}-g-dropout", self.tag), i);
        let fake = generator.forward(z, &mut g_mode)?;

        let mut slots = stream(self.seed, &format!("{}-slots", self.tag), i);
        let mut d_mode = Mode::train(self.seed, &format!("{}-d-dropout", self.tag), 2 * i);
        let scores = critic.score(real, &fake.detach(), &mut slots, &mut d_mode)?;
        let d = Self::d_loss(cfg, critic, &scores, targets)?;
        self.opt_d.backward_step(&d.total)?;

        let mut d_mode = Mode::train(self.seed, &format!("{}-d-dropout", self.tag), 2 * i + 1);
        let scores = critic.score(real, &fake, &mut slots, &mut d_mode)?;
        let g = Self::g_loss(cfg, &scores, &fake, real, targets)?;
        self.opt_g.backward_step(&g.total)?;
        Ok(StepLosses { d, g })
    }
}

struct EpochAccumulator {
    sums: [f64; 7],
    steps: usize,
    samples: usize,
}

impl EpochAccumulator {
    fn new() -> Self {
        Self {
            sums: [0.0; 7],
            steps: 0,
            samples: 0,
        }
    }

    fn add(&mut self, l: &StepLosses, batch: usize) -> Result<()> {
        let d = l.d.values()?;
        let g = l.g.values()?;
        let vals = [d[0], d[1], d[2], g[0], g[1], g[2], g[3]];
        for (s, v) in self.sums.iter_mut().zip(vals) {
            *s += v * batch as f64;
        }
        self.steps += 1;
        self.samples += batch;
        Ok(())
    }

    fn finish(self, epoch: usize) -> EpochLog {
        let n = self.samples.max(1) as f64;
        let m = self.sums.map(|s| s / n);
        EpochLog {
            epoch,
            steps: self.steps,
            d_total: m[0],
            d_adversarial: m[1],
            d_attribute: m[2],
            g_total: m[3],
            g_adversarial: m[4],
            g_attribute: m[5],
            g_pixel: m[6],
        }
    }
}

/// Trains the GAN on image-derived conditions. The extractor's classifier is
/// frozen unless `freeze_extractor` is false; its condition projection is
/// trained together with the generator.
pub fn pretrain(config: &RunConfig, data: &Dataset, foundation: &Foundation) -> Result<Checkpoint> {
    let mut ckpt = Checkpoint::initialize(config, data, foundation)?;
    let cfg = ckpt.config.clone();
    let samples = train_samples(data);
    if samples.is_empty() {
        return Err(Error::InvalidInput("cannot pretrain on a dataset without training images".into()));
    }
    let mut g_vars = ckpt.generator.store().vars();
    g_vars.extend(ckpt.extractor.projection_vars());
    if !cfg.freeze_extractor {
        g_vars.extend(ckpt.extractor.classifier_vars());
    }
    let mut trainer = GanTrainer::new(&cfg, g_vars, ckpt.critic.store().vars(), "pretrain")?;

    // With a frozen classifier the penultimate features never change, so
    // they are computed once.
    let grids: Vec<&ImageGrid> = samples.iter().map(|s| &s.pixels).collect();
    let frozen_features = if cfg.freeze_extractor {
        let mut parts = Vec::new();
        for chunk in grids.chunks(64) {
            parts.push(ckpt.extractor.forward(&images_to_tensor(chunk, DTYPE)?)?.penultimate.detach());
        }
        Some(Tensor::cat(&parts, 0)?)
    } else {
        None
    };

    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..cfg.epochs_pretrain {
        order.shuffle(&mut stream(cfg.seed, "pretrain-shuffle", epoch as u64));
        let mut acc = EpochAccumulator::new();
        for batch in order.chunks(cfg.batch_size) {
            let batch_samples: Vec<&ImageSample> = batch.iter().map(|&i| samples[i]).collect();
            let batch_grids: Vec<&ImageGrid> = batch_samples.iter().map(|s| &s.pixels).collect();
            let real = images_to_tensor(&batch_grids, DTYPE)?;
            let z = match &frozen_features {
                Some(f) => {
                    let idx: Vec<u32> = batch.iter().map(|&i| i as u32).collect();
                    let idx = Tensor::new(idx.as_slice(), f.device())?;
                    ckpt.extractor.projection().forward(&f.index_select(&idx, 0)?)?
                }
                None => ckpt.extractor.forward(&real)?.condition,
            };
            let targets = targets_tensor(&batch_samples)?;
            let losses = trainer.step(&cfg, ckpt.generator.as_ref(), ckpt.critic.as_ref(), &z, &real, &targets)?;
            acc.add(&losses, batch.len())?;
        }
        let log = acc.finish(epoch);
        log::info!(
            "pretrain epoch {epoch}: d {:.4} g {:.4} (pixel {:.4})",
            log.d_total,
            log.g_total,
            log.g_pixel
        );
        ckpt.history.pretrain.push(log);
        ckpt.epochs_pretrain_done += 1;
    }
    ckpt.stage = Stage::Pretrained;
    Ok(ckpt)
}

fn train_pairs<'a>(cfg: &RunConfig, data: &'a Dataset) -> Result<Vec<(&'a FmriRecord, &'a ImageSample)>> {
    let subjects = (!cfg.train_subjects.is_empty()).then_some(cfg.train_subjects.as_slice());
    Ok(data
        .pairs(Split::Train, subjects)?
        .into_iter()
        .map(|(r, i)| (&data.records[r], &data.images[i]))
        .collect())
}

/// Fits the aligner (or, with `use_alignment = false`, draws a fixed random
/// projection) and continues GAN training on fMRI-derived conditions.
///
/// With `use_pretrain = false` the GAN starts from a fresh initialization
/// and `pretrained` may be `None`.
pub fn finetune(
    config: &RunConfig,
    pretrained: Option<&Checkpoint>,
    data: &Dataset,
    foundation: &Foundation,
) -> Result<Checkpoint> {
    let cfg = resolve_config(config, data)?;
    let mut ckpt = if cfg.use_pretrain {
        let p = pretrained.ok_or_else(|| {
            Error::InvalidInput("fine-tuning needs a pretrained checkpoint (or use_pretrain = false)".into())
        })?;
        let mut c = p.try_clone()?;
        // Training switches come from the fine-tuning config; architectures
        // from the checkpoint.
        c.config.use_alignment = cfg.use_alignment;
        c.config.loss_variant = cfg.loss_variant;
        c.config.use_pretrain = cfg.use_pretrain;
        c.config.epochs_finetune = cfg.epochs_finetune;
        c.config.train_subjects = cfg.train_subjects.clone();
        c.config.eval_subjects = cfg.eval_subjects.clone();
        c.config.ridge_lambda = cfg.ridge_lambda;
        c.config.loss = cfg.loss;
        c
    } else {
        Checkpoint::initialize(&cfg, data, foundation)?
    };
    let cfg = ckpt.config.clone();
    let pairs = train_pairs(&cfg, data)?;
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no fMRI-image training pairs for the selected subjects".into()));
    }
    let records: Vec<FmriRecord> = pairs.iter().map(|(r, _)| (*r).clone()).collect();
    ckpt.fmri_len = data.fmri_len();
    let padded = pad_fmri_to(&records, ckpt.fmri_len)?;
    let aligner = if cfg.use_alignment {
        let grids: Vec<&ImageGrid> = pairs.iter().map(|(_, s)| &s.pixels).collect();
        let conds = ckpt.image_conditions(&grids)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let targets = DMatrix::from_fn(conds.len(), cfg.condition_dim(), |r, c| conds[r][c]);
        fit_alignment(&padded, &targets, cfg.ridge_lambda)?
    } else {
        LinearAligner::random_projection(ckpt.fmri_len, cfg.condition_dim(), derive_seed(cfg.seed, "no-align", 0))
    };
    let z_all = matrix_to_tensor(&aligner.predict(&padded)?)?;
    ckpt.aligner = Some(aligner);

    let mut trainer = GanTrainer::new(&cfg, ckpt.generator.store().vars(), ckpt.critic.store().vars(), "finetune")?;
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 0..cfg.epochs_finetune {
        order.shuffle(&mut stream(cfg.seed, "finetune-shuffle", epoch as u64));
        let mut acc = EpochAccumulator::new();
        for batch in order.chunks(cfg.batch_size) {
            let samples: Vec<&ImageSample> = batch.iter().map(|&i| pairs[i].1).collect();
            let grids: Vec<&ImageGrid> = samples.iter().map(|s| &s.pixels).collect();
            let real = images_to_tensor(&grids, DTYPE)?;
            let idx: Vec<u32> = batch.iter().map(|&i| i as u32).collect();
            let z = z_all.index_select(&Tensor::new(idx.as_slice(), z_all.device())?, 0)?;
            let targets = targets_tensor(&samples)?;
            let losses = trainer.step(&cfg, ckpt.generator.as_ref(), ckpt.critic.as_ref(), &z, &real, &targets)?;
            acc.add(&losses, batch.len())?;
        }
        let log = acc.finish(epoch);
        log::info!(
            "finetune epoch {epoch}: d {:.4} g {:.4} (pixel {:.4}, attribute {:.4})",
            log.d_total,
            log.g_total,
            log.g_pixel,
            log.g_attribute
        );
        ckpt.history.finetune.push(log);
        ckpt.epochs_finetune_done += 1;
    }
    ckpt.stage = Stage::Finetuned;
    Ok(ckpt)
}

/// Reconstructions of the evaluation split together with their references.
pub struct Reconstruction {
    pub real: Vec<ImageGrid>,
    pub fake: Vec<ImageGrid>,
    pub targets: Vec<Vec<f64>>,
}

fn tensor_to_grids(t: &Tensor) -> Result<Vec<ImageGrid>> {
    let (n, c, h, w) = t.dims4()?;
    let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    flat.chunks(c * h * w)
        .take(n)
        .map(|d| ImageGrid::new(c, h, w, d.iter().map(|v| v.clamp(-1.0, 1.0)).collect()))
        .collect()
}

/// Evaluation pairs: (record, image) for the eval split, or images alone
/// when the dataset has no fMRI.
fn eval_items<'a>(cfg: &RunConfig, data: &'a Dataset) -> Result<(Vec<&'a FmriRecord>, Vec<&'a ImageSample>)> {
    if data.records.is_empty() {
        let imgs: Vec<&ImageSample> = data.images_in(Split::Eval).into_iter().map(|i| &data.images[i]).collect();
        return Ok((Vec::new(), imgs));
    }
    let subjects = (!cfg.eval_subjects.is_empty()).then_some(cfg.eval_subjects.as_slice());
    let pairs = data.pairs(Split::Eval, subjects)?;
    Ok(pairs.into_iter().map(|(r, i)| (&data.records[r], &data.images[i])).unzip())
}

pub fn reconstruct(ckpt: &Checkpoint, data: &Dataset) -> Result<Reconstruction> {
    let (records, samples) = eval_items(&ckpt.config, data)?;
    if samples.is_empty() {
        return Err(Error::InvalidInput("no evaluation samples".into()));
    }
    let grids: Vec<&ImageGrid> = samples.iter().map(|s| &s.pixels).collect();
    let z = if ckpt.aligner.is_some() && !records.is_empty() {
        ckpt.fmri_conditions(&records)?
    } else {
        ckpt.image_conditions(&grids)?
    };
    let fake = tensor_to_grids(&ckpt.generate(&z)?)?;
    Ok(Reconstruction {
        real: grids.into_iter().cloned().collect(),
        fake,
        targets: samples
            .iter()
            .map(|s| s.attributes.to_vector().into_iter().map(f64::from).collect())
            .collect(),
    })
}

/// Computes all four metrics for given reconstructions.
pub fn score(ckpt: &Checkpoint, rec: &Reconstruction) -> Result<MetricsReport> {
    let real_unit: Vec<Vec<f64>> = rec.real.iter().map(to_unit).collect();
    let fake_unit: Vec<Vec<f64>> = rec.fake.iter().map(to_unit).collect();
    let real_refs: Vec<&ImageGrid> = rec.real.iter().collect();
    let fake_refs: Vec<&ImageGrid> = rec.fake.iter().collect();
    let preds = ckpt.predictor.predict(&fake_refs)?;
    let mut d_fake = Vec::with_capacity(rec.fake.len());
    for (chunk_r, chunk_f) in real_refs.chunks(64).zip(fake_refs.chunks(64)) {
        let s = ckpt.critic.score(
            &images_to_tensor(chunk_r, DTYPE)?,
            &images_to_tensor(chunk_f, DTYPE)?,
            &mut stream(ckpt.config.seed, "eval-slots", d_fake.len() as u64),
            &mut Mode::Eval,
        )?;
        d_fake.extend(s.d_fake.to_dtype(DType::F64)?.to_vec1::<f64>()?);
    }
    Ok(MetricsReport {
        mse: mse(&real_unit, &fake_unit)?,
        ssim: ssim_batch(&real_refs, &fake_refs)?,
        attribute_error: attribute_error(&preds, &rec.targets, ckpt.config.attribute_error_squared)?,
        misjudge_rate: misjudge_rate(&d_fake)?,
        n_samples: rec.real.len(),
        fingerprint: ckpt.config.fingerprint(),
    })
}

/// Reconstructs every evaluation pair and scores it. When `out_dir` is
/// given, writes `report.txt`, appends to `results.csv` and saves a grid
/// of the first eight pairs (real row above reconstruction row).
pub fn evaluate(ckpt: &Checkpoint, data: &Dataset, out_dir: Option<&Path>) -> Result<MetricsReport> {
    let rec = reconstruct(ckpt, data)?;
    let report = score(ckpt, &rec)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        report.write_key_value(&dir.join("report.txt"))?;
        report.append_csv(&dir.join("results.csv"), ckpt.config.variant.as_str())?;
        let k = rec.real.len().min(8);
        let rows = vec![rec.real[..k].iter().collect(), rec.fake[..k].iter().collect()];
        crate::output::write_image_grid(&dir.join("reconstructions.png"), &rows)?;
    }
    Ok(report)
}

/// MSE (on the [0, 1] scale) of predicting every evaluation image by the
/// mean training image.
pub fn mean_image_baseline(config: &RunConfig, data: &Dataset) -> Result<f64> {
    let train = train_samples(data);
    if train.is_empty() {
        return Err(Error::InvalidInput("no training images".into()));
    }
    let len = train[0].pixels.len();
    let mut mean = vec![0.0; len];
    for s in &train {
        for (m, v) in mean.iter_mut().zip(to_unit(&s.pixels)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= train.len() as f64);
    let (_, samples) = eval_items(config, data)?;
    let real: Vec<Vec<f64>> = samples.iter().map(|s| to_unit(&s.pixels)).collect();
    let pred = vec![mean; real.len()];
    mse(&pred, &real)
}

/// Attribute layout of a checkpoint's critic.
pub fn layout(ckpt: &Checkpoint) -> AttrLayout {
    ckpt.critic.layout()
}
