//! Reconstruction metrics. Images are compared on a [0, 1] scale: model
//! outputs in [-1, 1] are mapped through (v + 1) / 2 first.

use crate::data::{AttrLayout, ImageGrid, ImageSample};
use crate::error::{Error, Result};
use crate::nn::{adam, images_to_tensor, log_softmax_last, softmax_last, Linear, VarStore};
use crate::rng::stream;
use candle_core::{DType, Tensor, Var};
use candle_nn::{Conv2d, Module, Optimizer};
use rand::seq::SliceRandom;
use std::path::Path;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

pub fn to_unit(grid: &ImageGrid) -> Vec<f64> {
    grid.data.iter().map(|&v| (f64::from(v) + 1.0) / 2.0).collect()
}

/// Mean squared difference over every pixel of every image.
pub fn mse(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!("mse needs equal, non-empty batches ({} vs {})", a.len(), b.len())));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (x, y) in a.iter().zip(b) {
        if x.len() != y.len() {
            return Err(Error::Shape("mse images differ in size".into()));
        }
        sum += x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
        n += x.len();
    }
    Ok(sum / n as f64)
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable 'valid' Gaussian filtering of an h × w plane.
fn filter(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..n).map(|i| k[i] * x[r * w + c + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..n).map(|i| k[i] * rows[(r + i) * ow + c]).sum();
        }
    }
    out
}

/// Mean local SSIM of two single-channel h × w images with values in [0, 1].
pub fn ssim(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    if a.len() != h * w || b.len() != h * w {
        return Err(Error::Shape(format!("ssim expects {h}×{w} images")));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidInput(format!(
            "{h}×{w} image is smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} SSIM window"
        )));
    }
    let k = gaussian_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
    let mu_a = filter(a, h, w, &k);
    let mu_b = filter(b, h, w, &k);
    let aa = filter(&prod(a, a), h, w, &k);
    let bb = filter(&prod(b, b), h, w, &k);
    let ab = filter(&prod(a, b), h, w, &k);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

/// Mean SSIM over aligned batches of [-1, 1] images.
pub fn ssim_batch(a: &[&ImageGrid], b: &[&ImageGrid]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape("ssim needs equal, non-empty batches".into()));
    }
    let mut total = 0.0;
    for (x, y) in a.iter().zip(b) {
        if x.channels != 1 || y.channels != 1 {
            return Err(Error::Shape("ssim is defined for single-channel images".into()));
        }
        total += ssim(&to_unit(x), &to_unit(y), x.height, x.width)?;
    }
    Ok(total / a.len() as f64)
}

/// Mean over samples and entries of (target − prediction)², or of the
/// absolute difference when `squared` is false.
pub fn attribute_error(predictions: &[Vec<f64>], targets: &[Vec<f64>], squared: bool) -> Result<f64> {
    if predictions.len() != targets.len() || predictions.is_empty() {
        return Err(Error::Shape("attribute error needs equal, non-empty batches".into()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, t) in predictions.iter().zip(targets) {
        if p.len() != t.len() {
            return Err(Error::Shape("attribute vectors differ in length".into()));
        }
        for (x, y) in p.iter().zip(t) {
            let d = y - x;
            sum += if squared { d * d } else { d.abs() };
        }
        n += p.len();
    }
    Ok(sum / n as f64)
}

/// Fraction of fake images whose realness probability is strictly above 0.5.
pub fn misjudge_rate(d_fake: &[f64]) -> Result<f64> {
    if d_fake.is_empty() {
        return Err(Error::InvalidInput("misjudge rate of an empty batch".into()));
    }
    if d_fake.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::InvalidInput("misjudge rate needs probabilities in [0, 1]".into()));
    }
    Ok(d_fake.iter().filter(|&&p| p > 0.5).count() as f64 / d_fake.len() as f64)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PredictorConfig {
    pub stages: Vec<usize>,
    pub blocks_per_stage: usize,
    pub n_identities: usize,
    pub image_size: usize,
    pub in_channels: usize,
}

impl PredictorConfig {
    pub fn desk(n_identities: usize) -> Self {
        Self {
            stages: vec![8, 16, 32],
            blocks_per_stage: 1,
            n_identities,
            image_size: 32,
            in_channels: 1,
        }
    }

    pub fn paper(n_identities: usize) -> Self {
        Self {
            stages: vec![64, 128, 256, 512],
            blocks_per_stage: 2,
            n_identities,
            image_size: 128,
            in_channels: 1,
        }
    }

    pub fn layout(&self) -> AttrLayout {
        AttrLayout::new(self.n_identities)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() || self.stages.contains(&0) || self.blocks_per_stage == 0 {
            return Err(Error::Config("predictor needs non-empty stages with positive widths".into()));
        }
        if self.n_identities == 0 || self.in_channels == 0 {
            return Err(Error::Config("predictor identity and channel counts must be positive".into()));
        }
        if !self.image_size.is_power_of_two() || self.image_size >> (self.stages.len() - 1) == 0 {
            return Err(Error::Config(format!(
                "predictor cannot downsample a {} image {} times",
                self.image_size,
                self.stages.len() - 1
            )));
        }
        Ok(())
    }
}

struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.conv2.forward(&self.conv1.forward(x)?.relu()?)?;
        let s = match &self.skip {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        Ok((y + s)?.relu()?)
    }
}

/// Small residual classifier producing per-group softmax probabilities.
pub struct AttributePredictor {
    config: PredictorConfig,
    store: VarStore,
    stem: Conv2d,
    stages: Vec<Vec<ResBlock>>,
    head: Linear,
}

impl AttributePredictor {
    pub fn new(config: &PredictorConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut store = VarStore::new(seed, dtype);
        let mut root = store.root();
        let stem = crate::nn::conv2d_he(&mut root.sub("stem"), config.in_channels, config.stages[0], 3, 1, 1)?;
        let mut in_ch = config.stages[0];
        let mut stages = Vec::new();
        for (s, &ch) in config.stages.iter().enumerate() {
            let mut blocks = Vec::new();
            for b in 0..config.blocks_per_stage {
                let mut scope = root.sub(format!("stage{s}.block{b}"));
                let skip = if in_ch != ch {
                    Some(crate::nn::conv2d_he(&mut scope.sub("skip"), in_ch, ch, 1, 1, 0)?)
                } else {
                    None
                };
                blocks.push(ResBlock {
                    conv1: crate::nn::conv2d_he(&mut scope.sub("conv1"), in_ch, ch, 3, 1, 1)?,
                    conv2: crate::nn::conv2d_he(&mut scope.sub("conv2"), ch, ch, 3, 1, 1)?,
                    skip,
                });
                in_ch = ch;
            }
            stages.push(blocks);
        }
        let head = Linear::new(&mut root.sub("head"), in_ch, config.layout().len(), true)?;
        Ok(Self {
            config: config.clone(),
            store,
            stem,
            stages,
            head,
        })
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.config
    }

    pub fn store(&self) -> &VarStore {
        &self.store
    }

    pub fn vars(&self) -> Vec<Var> {
        self.store.vars()
    }

    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = images.dims4()?;
        let s = self.config.image_size;
        if c != self.config.in_channels || h != s || w != s {
            return Err(Error::Shape(format!("predictor expects {s}×{s} images, got {h}×{w}")));
        }
        let mut x = self.stem.forward(images)?.relu()?;
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                x = x.avg_pool2d(2)?;
            }
            for block in stage {
                x = block.forward(&x)?;
            }
        }
        let pooled = x.mean(3)?.mean(2)?;
        self.head.forward(&pooled)
    }

    /// Concatenated per-group probabilities, (n, 7 + N_id + 2).
    pub fn probabilities(&self, images: &Tensor) -> Result<Tensor> {
        let logits = self.logits(images)?;
        let parts = self
            .config
            .layout()
            .groups()
            .map(|r| -> Result<Tensor> { softmax_last(&logits.narrow(1, r.start, r.len())?) });
        let mut out = Vec::with_capacity(3);
        for p in parts {
            out.push(p?);
        }
        Ok(Tensor::cat(&out, 1)?)
    }

    pub fn predict(&self, images: &[&ImageGrid]) -> Result<Vec<Vec<f64>>> {
        let mut rows = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let p = self.probabilities(&images_to_tensor(chunk, self.store.dtype())?)?;
            rows.extend(p.to_dtype(DType::F64)?.to_vec2::<f64>()?);
        }
        Ok(rows)
    }

    fn loss(&self, images: &Tensor, labels: &[[usize; 3]]) -> Result<Tensor> {
        let logits = self.logits(images)?;
        let mut total: Option<Tensor> = None;
        for (g, r) in self.config.layout().groups().into_iter().enumerate() {
            let idx: Vec<u32> = labels.iter().map(|l| l[g] as u32).collect();
            let idx = Tensor::new(idx.as_slice(), images.device())?.unsqueeze(1)?;
            let lp = log_softmax_last(&logits.narrow(1, r.start, r.len())?)?;
            let nll = lp.gather(&idx, 1)?.mean_all()?.neg()?;
            total = Some(match total {
                Some(t) => (t + nll)?,
                None => nll,
            });
        }
        Ok(total.unwrap())
    }
}

/// Trains a predictor on labeled samples with Adam on the summed per-group
/// cross-entropy. Returns the model and the mean loss per epoch.
pub fn train_attribute_predictor(
    samples: &[&ImageSample],
    config: &PredictorConfig,
    settings: crate::extractor::TrainSettings,
    dtype: DType,
) -> Result<(AttributePredictor, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("cannot train the predictor on an empty dataset".into()));
    }
    if settings.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let model = AttributePredictor::new(config, crate::rng::derive_seed(settings.seed, "predictor-init", 0), dtype)?;
    let mut opt = adam(model.vars(), settings.lr, 0.9, 0.999)?;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(settings.epochs);
    for epoch in 0..settings.epochs {
        order.shuffle(&mut stream(settings.seed, "predictor-shuffle", epoch as u64));
        let mut sum = 0.0;
        for batch in order.chunks(settings.batch_size) {
            let grids: Vec<&ImageGrid> = batch.iter().map(|&i| &samples[i].pixels).collect();
            let labels: Vec<[usize; 3]> = batch.iter().map(|&i| samples[i].attributes.labels()).collect();
            let loss = model.loss(&images_to_tensor(&grids, dtype)?, &labels)?;
            opt.backward_step(&loss)?;
            sum += loss.to_dtype(DType::F64)?.to_scalar::<f64>()? * batch.len() as f64;
        }
        history.push(sum / samples.len() as f64);
    }
    Ok((model, history))
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsReport {
    pub mse: f64,
    pub ssim: f64,
    pub attribute_error: f64,
    pub misjudge_rate: f64,
    pub n_samples: usize,
    pub fingerprint: String,
}

impl MetricsReport {
    pub const CSV_FIELDS: [&'static str; 6] = ["mse", "ssim", "attribute_error", "misjudge_rate", "n_samples", "fingerprint"];

    pub fn to_key_value(&self) -> String {
        format!(
            "mse = {}\nssim = {}\nattribute_error = {}\nmisjudge_rate = {}\nn_samples = {}\nfingerprint = {}\n",
            self.mse, self.ssim, self.attribute_error, self.misjudge_rate, self.n_samples, self.fingerprint
        )
    }

    pub fn from_key_value(text: &str) -> Result<Self> {
        let mut map = std::collections::HashMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidInput(format!("report line `{line}` has no `=`")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            map.get(k)
                .cloned()
                .ok_or_else(|| Error::InvalidInput(format!("report is missing `{k}`")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::InvalidInput(format!("report field `{k}` is not a number")))
        };
        Ok(Self {
            mse: num("mse")?,
            ssim: num("ssim")?,
            attribute_error: num("attribute_error")?,
            misjudge_rate: num("misjudge_rate")?,
            n_samples: num("n_samples")? as usize,
            fingerprint: get("fingerprint")?,
        })
    }

    pub fn csv_values(&self) -> Vec<String> {
        vec![
            self.mse.to_string(),
            self.ssim.to_string(),
            self.attribute_error.to_string(),
            self.misjudge_rate.to_string(),
            self.n_samples.to_string(),
            self.fingerprint.clone(),
        ]
    }

    pub fn write_key_value(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_key_value()).map_err(|e| Error::io(path, e))
    }

    /// Appends `label` plus the report fields to a CSV, writing the header
    /// first if the file is new.
    pub fn append_csv(&self, path: &Path, label: &str) -> Result<()> {
        let exists = path.exists();
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        let csv_err = |e: csv::Error| Error::InvalidInput(format!("writing {}: {e}", path.display()));
        if !exists {
            let mut header = vec!["label"];
            header.extend(Self::CSV_FIELDS);
            w.write_record(&header).map_err(csv_err)?;
        }
        let mut row = vec![label.to_string()];
        row.extend(self.csv_values());
        w.write_record(&row).map_err(csv_err)?;
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}
