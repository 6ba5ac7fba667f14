//! Multi-task attribute network: a VGG-style convolutional trunk shared by
//! three branches (expression, identity, gender). The condition vector that
//! drives the generator is a linear projection of the three penultimate
//! branch activations.

use crate::data::{ImageGrid, ImageSample, N_EXPRESSIONS, N_GENDERS};
use crate::error::{Error, Result};
use crate::nn::{adam, images_to_tensor, log_softmax_last, Linear, NamedTensor, VarStore};
use crate::rng::stream;
use candle_core::{DType, Tensor, Var, D};
use candle_nn::{Conv2d, Module, Optimizer};
use rand::seq::SliceRandom;

/// Name prefix of the condition projection parameters.
pub const PROJECTION_PREFIX: &str = "project.";

/// One convolution stage: `convs` 3×3 convolutions with `channels` outputs,
/// each followed by ReLU, then a 2×2 max pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvStage {
    pub channels: usize,
    pub convs: usize,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ExtractorConfig {
    pub trunk: Vec<ConvStage>,
    pub branch: Vec<ConvStage>,
    pub head_fc_width: usize,
    pub n_identities: usize,
    pub condition_dim: usize,
    pub image_size: usize,
    pub in_channels: usize,
}

impl ExtractorConfig {
    pub fn paper(n_identities: usize) -> Self {
        let s = |channels, convs| ConvStage { channels, convs };
        Self {
            trunk: vec![s(64, 2), s(128, 2), s(256, 3), s(512, 3)],
            branch: vec![s(512, 3)],
            head_fc_width: 512,
            n_identities,
            condition_dim: 128,
            image_size: 128,
            in_channels: 1,
        }
    }

    pub fn desk(n_identities: usize) -> Self {
        let s = |channels, convs| ConvStage { channels, convs };
        Self {
            trunk: vec![s(8, 1), s(16, 1)],
            branch: vec![s(16, 1)],
            head_fc_width: 64,
            n_identities,
            condition_dim: 16,
            image_size: 32,
            in_channels: 1,
        }
    }

    /// Convolution and pooling layers in the shared trunk.
    pub fn shared_depth(&self) -> usize {
        self.trunk.iter().map(|s| s.convs + 1).sum()
    }

    pub fn head_sizes(&self) -> [usize; 3] {
        [N_EXPRESSIONS, self.n_identities, N_GENDERS]
    }

    fn final_resolution(&self) -> usize {
        self.image_size >> (self.trunk.len() + self.branch.len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.trunk.is_empty() || self.branch.is_empty() {
            return Err(Error::Config("extractor needs at least one trunk and one branch stage".into()));
        }
        if self
            .trunk
            .iter()
            .chain(&self.branch)
            .any(|s| s.channels == 0 || s.convs == 0)
        {
            return Err(Error::Config("extractor stages need positive channels and convolutions".into()));
        }
        if [self.head_fc_width, self.n_identities, self.condition_dim, self.image_size, self.in_channels].contains(&0) {
            return Err(Error::Config("extractor sizes must be positive".into()));
        }
        if self.condition_dim > 3 * self.head_fc_width {
            return Err(Error::Config(format!(
                "condition dim {} exceeds three head widths ({})",
                self.condition_dim,
                3 * self.head_fc_width
            )));
        }
        let pools = self.trunk.len() + self.branch.len();
        if !self.image_size.is_power_of_two() || self.image_size >> pools == 0 {
            return Err(Error::Config(format!(
                "image size {} cannot be pooled {pools} times",
                self.image_size
            )));
        }
        Ok(())
    }
}

/// Batched outputs. Logits are (n, classes); `penultimate` is (n, 3·width);
/// `condition` is (n, condition_dim).
#[derive(Debug, Clone)]
pub struct ExtractorForward {
    pub expression: Tensor,
    pub identity: Tensor,
    pub gender: Tensor,
    pub penultimate: Tensor,
    pub condition: Tensor,
}

impl ExtractorForward {
    pub fn heads(&self) -> [&Tensor; 3] {
        [&self.expression, &self.identity, &self.gender]
    }
}

/// Outputs for a single image.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorOutput {
    pub expression_logits: Vec<f64>,
    pub identity_logits: Vec<f64>,
    pub gender_logits: Vec<f64>,
    pub condition: Vec<f64>,
}

struct Branch {
    convs: Vec<Vec<Conv2d>>,
    fc1: Linear,
    fc2: Linear,
    out: Linear,
}

pub struct Extractor {
    config: ExtractorConfig,
    store: VarStore,
    trunk: Vec<Vec<Conv2d>>,
    branches: Vec<Branch>,
    projection: Linear,
}

fn build_stages(
    scope: &mut crate::nn::Scope,
    stages: &[ConvStage],
    mut in_ch: usize,
) -> Result<(Vec<Vec<Conv2d>>, usize)> {
    let mut out = Vec::new();
    for (i, st) in stages.iter().enumerate() {
        let mut convs = Vec::new();
        for j in 0..st.convs {
            convs.push(crate::nn::conv2d(&mut scope.sub(format!("stage{i}.conv{j}")), in_ch, st.channels, 3, 1, 1)?);
            in_ch = st.channels;
        }
        out.push(convs);
    }
    Ok((out, in_ch))
}

fn run_stages(stages: &[Vec<Conv2d>], x: &Tensor) -> Result<Tensor> {
    let mut x = x.clone();
    for stage in stages {
        for conv in stage {
            x = conv.forward(&x)?.relu()?;
        }
        x = crate::nn::max_pool2x2(&x)?;
    }
    Ok(x)
}

impl Extractor {
    pub fn new(config: &ExtractorConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut store = VarStore::new(seed, dtype);
        let mut root = store.root();
        let (trunk, trunk_ch) = build_stages(&mut root.sub("trunk"), &config.trunk, config.in_channels)?;
        let w = config.head_fc_width;
        let res = config.final_resolution();
        let mut branches = Vec::new();
        for (name, size) in ["expression", "identity", "gender"].iter().zip(config.head_sizes()) {
            let mut scope = root.sub(name);
            let (convs, ch) = build_stages(&mut scope, &config.branch, trunk_ch)?;
            branches.push(Branch {
                convs,
                fc1: Linear::new(&mut scope.sub("fc1"), ch * res * res, w, true)?,
                fc2: Linear::new(&mut scope.sub("fc2"), w, w, true)?,
                out: Linear::new(&mut scope.sub("out"), w, size, true)?,
            });
        }
        let projection = Linear::new(&mut root.sub("project"), 3 * w, config.condition_dim, false)?;
        Ok(Self {
            config: config.clone(),
            store,
            trunk,
            branches,
            projection,
        })
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.config
    }

    pub fn store(&self) -> &VarStore {
        &self.store
    }

    pub fn projection(&self) -> &Linear {
        &self.projection
    }

    /// Trunk and branch variables (everything except the projection).
    pub fn classifier_vars(&self) -> Vec<Var> {
        self.store
            .named()
            .iter()
            .filter(|(n, _)| !n.starts_with(PROJECTION_PREFIX))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn projection_vars(&self) -> Vec<Var> {
        self.store.vars_with_prefix(PROJECTION_PREFIX)
    }

    /// Loads externally supplied trunk weights (names start with `trunk.`).
    pub fn load_trunk(&self, tensors: &[NamedTensor]) -> Result<()> {
        if let Some(t) = tensors.iter().find(|t| !t.name.starts_with("trunk.")) {
            return Err(Error::Checkpoint(format!("`{}` is not a trunk parameter", t.name)));
        }
        self.store.load_subset(tensors)
    }

    pub fn forward(&self, images: &Tensor) -> Result<ExtractorForward> {
        let (_, c, h, w) = images.dims4()?;
        let s = self.config.image_size;
        if c != self.config.in_channels || h != s || w != s {
            return Err(Error::Shape(format!(
                "extractor expects {}×{s}×{s} images, got {c}×{h}×{w}",
                self.config.in_channels
            )));
        }
        let shared = run_stages(&self.trunk, images)?;
        let mut logits = Vec::with_capacity(3);
        let mut pen = Vec::with_capacity(3);
        for b in &self.branches {
            let x = run_stages(&b.convs, &shared)?.flatten_from(1)?;
            let x = b.fc1.forward(&x)?.relu()?;
            let x = b.fc2.forward(&x)?.relu()?;
            logits.push(b.out.forward(&x)?);
            pen.push(x);
        }
        let penultimate = Tensor::cat(&pen, 1)?;
        let condition = self.projection.forward(&penultimate)?;
        let mut it = logits.into_iter();
        Ok(ExtractorForward {
            expression: it.next().unwrap(),
            identity: it.next().unwrap(),
            gender: it.next().unwrap(),
            penultimate,
            condition,
        })
    }

    pub fn forward_one(&self, image: &ImageGrid) -> Result<ExtractorOutput> {
        let out = self.forward(&images_to_tensor(&[image], self.store.dtype())?)?;
        let row = |t: &Tensor| -> Result<Vec<f64>> { Ok(t.to_dtype(DType::F64)?.squeeze(0)?.to_vec1::<f64>()?) };
        Ok(ExtractorOutput {
            expression_logits: row(&out.expression)?,
            identity_logits: row(&out.identity)?,
            gender_logits: row(&out.gender)?,
            condition: row(&out.condition)?,
        })
    }

    /// Summed cross-entropy of the three heads, averaged over the batch.
    pub fn loss(&self, images: &Tensor, labels: &[[usize; 3]]) -> Result<Tensor> {
        let out = self.forward(images)?;
        let mut total: Option<Tensor> = None;
        for (h, logits) in out.heads().into_iter().enumerate() {
            let idx: Vec<u32> = labels.iter().map(|l| l[h] as u32).collect();
            let idx = Tensor::new(idx.as_slice(), images.device())?.unsqueeze(1)?;
            let nll = log_softmax_last(logits)?.gather(&idx, 1)?.mean_all()?.neg()?;
            total = Some(match total {
                Some(t) => (t + nll)?,
                None => nll,
            });
        }
        Ok(total.unwrap())
    }

    /// Condition vectors for a batch of images, processed in chunks.
    pub fn extract_conditions(&self, images: &[&ImageGrid]) -> Result<Tensor> {
        let mut parts = Vec::new();
        for chunk in images.chunks(64) {
            parts.push(self.forward(&images_to_tensor(chunk, self.store.dtype())?)?.condition);
        }
        if parts.is_empty() {
            return Err(Error::InvalidInput("no images to extract conditions from".into()));
        }
        Ok(Tensor::cat(&parts, 0)?)
    }

    /// Argmax accuracy of each head over the given samples.
    pub fn accuracy(&self, samples: &[&ImageSample]) -> Result<[f64; 3]> {
        if samples.is_empty() {
            return Err(Error::InvalidInput("no samples to score".into()));
        }
        let mut hits = [0usize; 3];
        for chunk in samples.chunks(64) {
            let grids: Vec<&ImageGrid> = chunk.iter().map(|s| &s.pixels).collect();
            let out = self.forward(&images_to_tensor(&grids, self.store.dtype())?)?;
            for (h, logits) in out.heads().into_iter().enumerate() {
                let pred = logits.argmax(D::Minus1)?.to_vec1::<u32>()?;
                for (p, s) in pred.iter().zip(chunk) {
                    if *p as usize == s.attributes.labels()[h] {
                        hits[h] += 1;
                    }
                }
            }
        }
        let n = samples.len() as f64;
        Ok(hits.map(|h| h as f64 / n))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSettings {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

/// Trains trunk and branches (not the projection) with Adam on the summed
/// head cross-entropy. Returns the mean loss of each epoch.
pub fn train_extractor(model: &Extractor, samples: &[&ImageSample], settings: TrainSettings) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("cannot train the extractor on an empty dataset".into()));
    }
    if settings.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut opt = adam(model.classifier_vars(), settings.lr, 0.9, 0.999)?;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(settings.epochs);
    for epoch in 0..settings.epochs {
        order.shuffle(&mut stream(settings.seed, "extractor-shuffle", epoch as u64));
        let mut sum = 0.0;
        for batch in order.chunks(settings.batch_size) {
            let grids: Vec<&ImageGrid> = batch.iter().map(|&i| &samples[i].pixels).collect();
            let labels: Vec<[usize; 3]> = batch.iter().map(|&i| samples[i].attributes.labels()).collect();
            let loss = model.loss(&images_to_tensor(&grids, model.store.dtype())?, &labels)?;
            opt.backward_step(&loss)?;
            sum += loss.to_dtype(DType::F64)?.to_scalar::<f64>()? * batch.len() as f64;
        }
        history.push(sum / samples.len() as f64);
    }
    Ok(history)
}
