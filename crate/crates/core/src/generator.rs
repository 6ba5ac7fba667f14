//! Conditional generator: the condition vector is embedded as a B × B token
//! grid, refined by shifted-window attention blocks and upsampled stage by
//! stage (bicubic early, pixel shuffle late) up to the output resolution.

use crate::error::{Error, Result};
use crate::nn::{dropout, Init, LayerNorm, Linear, Mlp, Mode, MultiHeadAttention, VarStore};
use candle_core::{DType, Device, Tensor};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GeneratorConfig {
    pub condition_dim: usize,
    pub bottom_width: usize,
    pub embed_dim: usize,
    pub n_stages: usize,
    pub blocks_per_stage: usize,
    pub n_heads: usize,
    pub window_size: usize,
    pub dropout: f64,
    pub bicubic_stages: usize,
    pub output_size: usize,
    pub mlp_ratio: usize,
}

impl GeneratorConfig {
    /// 128-d condition, 4 × 4 bottom grid, five stages of two blocks, 4 heads,
    /// window 16, 256 channels at the bottom (256 → 64 → 16 across the two
    /// pixel-shuffle stages).
    pub fn paper() -> Self {
        Self {
            condition_dim: 128,
            bottom_width: 4,
            embed_dim: 256,
            n_stages: 5,
            blocks_per_stage: 2,
            n_heads: 4,
            window_size: 16,
            dropout: 0.0,
            bicubic_stages: 3,
            output_size: 128,
            mlp_ratio: 4,
        }
    }

    pub fn desk() -> Self {
        Self {
            condition_dim: 16,
            bottom_width: 4,
            embed_dim: 64,
            n_stages: 3,
            blocks_per_stage: 2,
            n_heads: 4,
            window_size: 8,
            dropout: 0.0,
            bicubic_stages: 1,
            output_size: 32,
            mlp_ratio: 2,
        }
    }

    pub fn stage_resolution(&self, stage: usize) -> usize {
        self.bottom_width << stage
    }

    pub fn stage_mode(&self, stage: usize) -> UpsampleMode {
        if stage < self.bicubic_stages {
            UpsampleMode::Bicubic
        } else {
            UpsampleMode::PixelShuffle
        }
    }

    /// Channel width of the tokens entering each stage, plus the final width.
    pub fn channel_schedule(&self) -> Vec<usize> {
        let mut c = self.embed_dim;
        let mut out = vec![c];
        for s in 0..self.n_stages {
            if self.stage_mode(s) == UpsampleMode::PixelShuffle {
                c /= 4;
            }
            out.push(c);
        }
        out
    }

    /// Window actually used at a stage: the configured window clipped to the resolution.
    pub fn effective_window(&self, stage: usize) -> usize {
        self.window_size.min(self.stage_resolution(stage))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("condition_dim", self.condition_dim),
            ("bottom_width", self.bottom_width),
            ("embed_dim", self.embed_dim),
            ("n_heads", self.n_heads),
            ("window_size", self.window_size),
            ("output_size", self.output_size),
            ("mlp_ratio", self.mlp_ratio),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("generator {name} must be positive")));
        }
        if self.bottom_width << self.n_stages != self.output_size {
            return Err(Error::Config(format!(
                "bottom width {} × 2^{} does not equal output size {}",
                self.bottom_width, self.n_stages, self.output_size
            )));
        }
        if self.window_size > self.output_size {
            return Err(Error::Config("window size exceeds the output size".into()));
        }
        if self.bicubic_stages > self.n_stages {
            return Err(Error::Config("more bicubic stages than stages".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("generator dropout must lie in [0, 1)".into()));
        }
        let mut c = self.embed_dim;
        for s in 0..self.n_stages {
            let res = self.stage_resolution(s);
            let win = self.effective_window(s);
            if res % win != 0 {
                return Err(Error::Config(format!(
                    "stage {s}: resolution {res} is not divisible by window {win}"
                )));
            }
            if c % self.n_heads != 0 {
                return Err(Error::Config(format!(
                    "stage {s}: {c} channels not divisible by {} heads",
                    self.n_heads
                )));
            }
            if self.stage_mode(s) == UpsampleMode::PixelShuffle {
                if c % 4 != 0 {
                    return Err(Error::Config(format!(
                        "stage {s}: pixel shuffle needs channels divisible by 4, got {c}"
                    )));
                }
                c /= 4;
            }
        }
        Ok(())
    }
}

/// Batched token grid: `tokens` is (batch, height · width, channels), row-major.
#[derive(Debug, Clone)]
pub struct FeatureGrid {
    pub tokens: Tensor,
    pub height: usize,
    pub width: usize,
}

impl FeatureGrid {
    pub fn new(tokens: Tensor, height: usize, width: usize) -> Result<Self> {
        let (_, t, _) = tokens.dims3()?;
        if t != height * width {
            return Err(Error::Shape(format!(
                "{t} tokens cannot form a {height} × {width} grid"
            )));
        }
        Ok(Self { tokens, height, width })
    }

    pub fn batch(&self) -> usize {
        self.tokens.dims()[0]
    }

    pub fn channels(&self) -> usize {
        self.tokens.dims()[2]
    }

    pub fn is_finite(&self) -> Result<bool> {
        let v = self.tokens.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        Ok(v.iter().all(|x| x.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum UpsampleMode {
    Bicubic,
    PixelShuffle,
}

const BICUBIC_A: f64 = -0.75;

fn cubic_weight(x: f64) -> f64 {
    let x = x.abs();
    let a = BICUBIC_A;
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Row-major (2n × n) matrix of 1-D bicubic weights for 2× upsampling with
/// half-pixel centers and clamped borders.
pub fn bicubic_matrix(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; 2 * n * n];
    for out in 0..2 * n {
        let src = (out as f64 + 0.5) / 2.0 - 0.5;
        let base = src.floor();
        let t = src - base;
        for k in -1i64..=2 {
            let w = cubic_weight(t - k as f64);
            let idx = (base as i64 + k).clamp(0, n as i64 - 1) as usize;
            m[out * n + idx] += w;
        }
    }
    m
}

fn bicubic_tensor(n: usize, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(bicubic_matrix(n), (2 * n, n), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Doubles the spatial resolution. Bicubic keeps the channel count; pixel
/// shuffle moves groups of four channels into 2 × 2 spatial blocks.
pub fn upsample(grid: &FeatureGrid, mode: UpsampleMode) -> Result<FeatureGrid> {
    let (n, h, w, c) = (grid.batch(), grid.height, grid.width, grid.channels());
    let x = grid.tokens.reshape((n, h, w, c))?;
    let out = match mode {
        UpsampleMode::Bicubic => {
            let dtype = grid.tokens.dtype();
            let uh = bicubic_tensor(h, dtype)?;
            let uw = bicubic_tensor(w, dtype)?;
            let rows = uh.broadcast_matmul(&x.reshape((n, h, w * c))?)?;
            let cols = uw.broadcast_matmul(&rows.reshape((n * 2 * h, w, c))?)?;
            cols.reshape((n, 4 * h * w, c))?
        }
        UpsampleMode::PixelShuffle => {
            if c % 4 != 0 {
                return Err(Error::Shape(format!(
                    "pixel shuffle needs channels divisible by 4, got {c}"
                )));
            }
            x.reshape((n, h, w, c / 4, 2, 2))?
                .permute((0, 1, 4, 2, 5, 3))?
                .contiguous()?
                .reshape((n, 4 * h * w, c / 4))?
        }
    };
    FeatureGrid::new(out, 2 * h, 2 * w)
}

/// Additive mask (windows, window², window²) that blocks attention between
/// tokens that were not neighbours before the cyclic shift.
pub fn shifted_window_mask(resolution: usize, window: usize, shift: usize) -> Vec<f64> {
    let label_of = |i: usize| -> usize {
        if i < resolution - window {
            0
        } else if i < resolution - shift {
            1
        } else {
            2
        }
    };
    let per_side = resolution / window;
    let area = window * window;
    let mut mask = vec![0.0; per_side * per_side * area * area];
    for wy in 0..per_side {
        for wx in 0..per_side {
            let win = wy * per_side + wx;
            let labels: Vec<usize> = (0..area)
                .map(|t| {
                    let (y, x) = (wy * window + t / window, wx * window + t % window);
                    label_of(y) * 3 + label_of(x)
                })
                .collect();
            for i in 0..area {
                for j in 0..area {
                    if labels[i] != labels[j] {
                        mask[(win * area + i) * area + j] = -1e4;
                    }
                }
            }
        }
    }
    mask
}

fn partition(x: &Tensor, n: usize, res: usize, window: usize, c: usize) -> Result<Tensor> {
    let per = res / window;
    Ok(x.reshape((n, per, window, per, window, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((n * per * per, window * window, c))?)
}

fn unpartition(x: &Tensor, n: usize, res: usize, window: usize, c: usize) -> Result<Tensor> {
    let per = res / window;
    Ok(x.reshape((n, per, per, window, window, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((n, res, res, c))?)
}

/// Shifted-window self-attention block with a feed-forward sublayer, both
/// pre-normalized and residual.
#[derive(Debug, Clone)]
pub struct WindowBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    resolution: usize,
    window: usize,
    shift: usize,
    dropout: f64,
    mask: Option<Tensor>,
}

impl WindowBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        scope: &mut crate::nn::Scope,
        resolution: usize,
        channels: usize,
        window: usize,
        shift: usize,
        n_heads: usize,
        mlp_ratio: usize,
        dropout: f64,
    ) -> Result<Self> {
        let window = window.min(resolution);
        let shift = if window == resolution { 0 } else { shift };
        if window == 0 || resolution % window != 0 || shift >= window {
            return Err(Error::Shape(format!(
                "window {window} with shift {shift} does not tile a {resolution} × {resolution} grid"
            )));
        }
        let mask = if shift > 0 {
            let per = resolution / window;
            let area = window * window;
            Some(
                Tensor::from_vec(shifted_window_mask(resolution, window, shift), (per * per, area, area), &Device::Cpu)?
                    .to_dtype(scope.dtype())?,
            )
        } else {
            None
        };
        Ok(Self {
            norm1: LayerNorm::new(&mut scope.sub("norm1"), channels)?,
            attn: MultiHeadAttention::new(&mut scope.sub("attn"), channels, n_heads)?,
            norm2: LayerNorm::new(&mut scope.sub("norm2"), channels)?,
            mlp: Mlp::new(&mut scope.sub("mlp"), channels, channels * mlp_ratio)?,
            resolution,
            window,
            shift,
            dropout,
            mask,
        })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn shift(&self) -> usize {
        self.shift
    }

    /// Returns the output grid and the per-window attention weights
    /// (batch · windows, heads, window², window²).
    pub fn forward_with_weights(&self, grid: &FeatureGrid, mode: &mut Mode) -> Result<(FeatureGrid, Tensor)> {
        if grid.height != self.resolution || grid.width != self.resolution {
            return Err(Error::Shape(format!(
                "block built for {0} × {0} received {1} × {2}",
                self.resolution, grid.height, grid.width
            )));
        }
        let (n, c, res, win) = (grid.batch(), grid.channels(), self.resolution, self.window);
        let h = self.norm1.forward(&grid.tokens)?.reshape((n, res, res, c))?;
        let s = self.shift as i32;
        let h = if s > 0 { h.roll(-s, 1)?.roll(-s, 2)? } else { h };
        let windows = partition(&h, n, res, win, c)?;
        let att = self.attn.attend(&windows, &windows, self.mask.as_ref())?;
        let merged = unpartition(&att.output, n, res, win, c)?;
        let merged = if s > 0 { merged.roll(s, 1)?.roll(s, 2)? } else { merged };
        let merged = merged.reshape((n, res * res, c))?;
        let x = (&grid.tokens + dropout(&merged, self.dropout, mode)?)?;
        let y = self.mlp.forward(&self.norm2.forward(&x)?)?;
        let x = (&x + dropout(&y, self.dropout, mode)?)?;
        Ok((FeatureGrid::new(x, res, res)?, att.weights))
    }

    pub fn forward(&self, grid: &FeatureGrid, mode: &mut Mode) -> Result<FeatureGrid> {
        Ok(self.forward_with_weights(grid, mode)?.0)
    }
}

struct Stage {
    blocks: Vec<WindowBlock>,
    mode: UpsampleMode,
}

/// Anything that maps a batch of condition vectors to a batch of
/// single-channel images in [-1, 1].
pub trait ImageGenerator {
    fn condition_dim(&self) -> usize;
    fn output_size(&self) -> usize;
    fn forward(&self, z: &Tensor, mode: &mut Mode) -> Result<Tensor>;
    fn store(&self) -> &VarStore;
}

pub struct SwinGenerator {
    config: GeneratorConfig,
    store: VarStore,
    embed: Linear,
    pos: Tensor,
    stages: Vec<Stage>,
    head: Linear,
}

impl SwinGenerator {
    pub fn new(config: &GeneratorConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut store = VarStore::new(seed, dtype);
        let mut root = store.root();
        let b2 = config.bottom_width * config.bottom_width;
        let embed = Linear::new(&mut root.sub("embed"), config.condition_dim, b2 * config.embed_dim, true)?;
        let pos = root.param("pos", &[b2, config.embed_dim], Init::Normal(0.02))?;
        let channels = config.channel_schedule();
        let mut stages = Vec::with_capacity(config.n_stages);
        for s in 0..config.n_stages {
            let res = config.stage_resolution(s);
            let win = config.effective_window(s);
            let mut blocks = Vec::with_capacity(config.blocks_per_stage);
            for b in 0..config.blocks_per_stage {
                let shift = if b % 2 == 1 { win / 2 } else { 0 };
                blocks.push(WindowBlock::new(
                    &mut root.sub(format!("stage{s}.block{b}")),
                    res,
                    channels[s],
                    win,
                    shift,
                    config.n_heads,
                    config.mlp_ratio,
                    config.dropout,
                )?);
            }
            stages.push(Stage {
                blocks,
                mode: config.stage_mode(s),
            });
        }
        let head = Linear::new(&mut root.sub("head"), *channels.last().unwrap(), 1, true)?;
        Ok(Self {
            config: config.clone(),
            store,
            embed,
            pos,
            stages,
            head,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn embed_condition(&self, z: &Tensor) -> Result<FeatureGrid> {
        let (n, d) = z.dims2()?;
        if d != self.config.condition_dim {
            return Err(Error::Shape(format!(
                "condition has length {d}, generator expects {}",
                self.config.condition_dim
            )));
        }
        let b = self.config.bottom_width;
        let tokens = self
            .embed
            .forward(z)?
            .reshape((n, b * b, self.config.embed_dim))?
            .broadcast_add(&self.pos)?;
        FeatureGrid::new(tokens, b, b)
    }

    /// Forward pass that also returns every intermediate grid (after the
    /// embedding and after each block and upsampling step).
    pub fn forward_traced(&self, z: &Tensor, mode: &mut Mode) -> Result<(Tensor, Vec<FeatureGrid>)> {
        let mut grid = self.embed_condition(z)?;
        let mut trace = vec![grid.clone()];
        for stage in &self.stages {
            for block in &stage.blocks {
                grid = block.forward(&grid, mode)?;
                trace.push(grid.clone());
            }
            grid = upsample(&grid, stage.mode)?;
            trace.push(grid.clone());
        }
        let n = grid.batch();
        let size = self.config.output_size;
        let image = self.head.forward(&grid.tokens)?.tanh()?.reshape((n, 1, size, size))?;
        Ok((image, trace))
    }
}

impl ImageGenerator for SwinGenerator {
    fn condition_dim(&self) -> usize {
        self.config.condition_dim
    }

    fn output_size(&self) -> usize {
        self.config.output_size
    }

    fn forward(&self, z: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        Ok(self.forward_traced(z, mode)?.0)
    }

    fn store(&self) -> &VarStore {
        &self.store
    }
}
