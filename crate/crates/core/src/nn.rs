//! Parameter storage and the small set of layers shared by every network.
//!
//! All layers are composed from differentiable tensor primitives so the same
//! models run in f32 for training and in f64 for finite-difference checks.

use crate::error::{Error, Result};
use crate::rng::{stream, Rng};
use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Uniform(f64),
    Normal(f64),
}

/// Flat, dtype-independent copy of one parameter.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Ordered collection of trainable variables with seeded initialization.
pub struct VarStore {
    vars: Vec<(String, Var)>,
    rng: Rng,
    dtype: DType,
    device: Device,
}

impl std::fmt::Debug for VarStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VarStore")
            .field("vars", &self.vars.len())
            .field("dtype", &self.dtype)
            .finish()
    }
}

impl VarStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: Vec::new(),
            rng: stream(seed, "param-init", 0),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn root(&mut self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn named(&self) -> &[(String, Var)] {
        &self.vars
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn num_params(&self) -> usize {
        self.vars.iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn snapshot(&self) -> Result<Vec<NamedTensor>> {
        self.vars
            .iter()
            .map(|(name, var)| {
                Ok(NamedTensor {
                    name: name.clone(),
                    shape: var.dims().to_vec(),
                    data: var
                        .as_tensor()
                        .to_dtype(DType::F64)?
                        .flatten_all()?
                        .to_vec1::<f64>()?,
                })
            })
            .collect()
    }

    /// Overwrites every variable from `tensors`; names and shapes must match exactly.
    pub fn load(&self, tensors: &[NamedTensor]) -> Result<()> {
        if tensors.len() != self.vars.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                self.vars.len(),
                tensors.len()
            )));
        }
        for ((name, var), t) in self.vars.iter().zip(tensors) {
            if *name != t.name || var.dims() != t.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` {:?} does not match stored `{}` {:?}",
                    name,
                    var.dims(),
                    t.name,
                    t.shape
                )));
            }
            let value = Tensor::from_vec(t.data.clone(), t.shape.as_slice(), &self.device)?
                .to_dtype(self.dtype)?;
            var.set(&value)?;
        }
        Ok(())
    }

    /// Overwrites only the named variables; every given name must exist.
    pub fn load_subset(&self, tensors: &[NamedTensor]) -> Result<()> {
        for t in tensors {
            let var = self
                .get(&t.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{}`", t.name)))?;
            if var.dims() != t.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, supplied {:?}",
                    t.name,
                    var.dims(),
                    t.shape
                )));
            }
            var.set(&Tensor::from_vec(t.data.clone(), t.shape.as_slice(), &self.device)?.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Variables whose names start with `prefix`.
    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn copy_from(&self, other: &VarStore) -> Result<()> {
        self.load(&other.snapshot()?)
    }

    /// Sum of squared differences against another store of the same layout.
    pub fn distance_sq(&self, other: &VarStore) -> Result<f64> {
        let mut total = 0.0;
        for ((_, a), (_, b)) in self.vars.iter().zip(&other.vars) {
            let d = (a.as_tensor().to_dtype(DType::F64)? - b.as_tensor().to_dtype(DType::F64)?)?;
            total += d.sqr()?.sum_all()?.to_scalar::<f64>()?;
        }
        Ok(total)
    }
}

pub struct Scope<'a> {
    store: &'a mut VarStore,
    prefix: String,
}

impl Scope<'_> {
    pub fn sub(&mut self, name: impl std::fmt::Display) -> Scope<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Scope {
            store: self.store,
            prefix,
        }
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> Device {
        self.store.device.clone()
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        if self.store.get(&full).is_some() {
            return Err(Error::Config(format!("parameter `{full}` registered twice")));
        }
        let n: usize = shape.iter().product();
        let rng = &mut self.store.rng;
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(bound) => (0..n).map(|_| rng.gen_range(-bound..=bound)).collect(),
            Init::Normal(std) => (0..n)
                .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
                .collect(),
        };
        let t = Tensor::from_vec(values, shape, &self.store.device)?.to_dtype(self.store.dtype)?;
        let var = Var::from_tensor(&t)?;
        let tensor = var.as_tensor().clone();
        self.store.vars.push((full, var));
        Ok(tensor)
    }
}

/// Forward-pass mode. Training mode owns the dropout random stream.
pub enum Mode {
    Eval,
    Train(Rng),
}

impl Mode {
    pub fn train(seed: u64, tag: &str, index: u64) -> Self {
        Mode::Train(stream(seed, tag, index))
    }

    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

pub fn dropout(x: &Tensor, p: f64, mode: &mut Mode) -> Result<Tensor> {
    match mode {
        Mode::Train(rng) if p > 0.0 => {
            let keep = 1.0 - p;
            let mask: Vec<f64> = (0..x.elem_count())
                .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
            Ok(x.mul(&mask)?)
        }
        _ => Ok(x.clone()),
    }
}

/// Softmax over the last dimension, fused into one pass with an analytic
/// backward (`y ⊙ (g − Σ g ⊙ y)`).
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(SoftmaxLast)?)
}

struct SoftmaxLast;

fn softmax_rows<T: num_traits::Float>(src: &[T], dim: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for (row, dst) in src.chunks_exact(dim).zip(out.chunks_exact_mut(dim)) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            sum = sum + *d;
        }
        for d in dst.iter_mut() {
            *d = *d / sum;
        }
    }
    out
}

impl candle_core::CustomOp1 for SoftmaxLast {
    fn name(&self) -> &'static str {
        "softmax-last"
    }

    fn cpu_fwd(
        &self,
        storage: &candle_core::CpuStorage,
        layout: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage;
        let (start, end) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("softmax input must be contiguous".into()))?;
        let dim = layout.dims().last().copied().unwrap_or(1).max(1);
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(softmax_rows(&v[start..end], dim)),
            CpuStorage::F64(v) => CpuStorage::F64(softmax_rows(&v[start..end], dim)),
            _ => return Err(candle_core::Error::Msg("softmax supports f32 and f64 only".into())),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        if grad.dtype() != res.dtype() {
            let dot = (grad * res)?.sum_keepdim(D::Minus1)?;
            return Ok(Some((res * grad.broadcast_sub(&dot)?)?));
        }
        Ok(Some(res.contiguous()?.apply_op2_no_bwd(&grad.contiguous()?, &SoftmaxGrad)?))
    }
}

struct SoftmaxGrad;

fn softmax_grad_rows<T: num_traits::Float>(y: &[T], g: &[T], dim: usize) -> Vec<T> {
    let mut out = vec![T::zero(); y.len()];
    for ((yr, gr), dst) in y.chunks_exact(dim).zip(g.chunks_exact(dim)).zip(out.chunks_exact_mut(dim)) {
        let dot = yr.iter().zip(gr).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        for ((d, &a), &b) in dst.iter_mut().zip(yr).zip(gr) {
            *d = a * (b - dot);
        }
    }
    out
}

impl candle_core::CustomOp2 for SoftmaxGrad {
    fn name(&self) -> &'static str {
        "softmax-last-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &candle_core::CpuStorage,
        l1: &candle_core::Layout,
        s2: &candle_core::CpuStorage,
        l2: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage;
        let range = |l: &candle_core::Layout| {
            l.contiguous_offsets()
                .ok_or_else(|| candle_core::Error::Msg("softmax gradient inputs must be contiguous".into()))
        };
        let ((a0, a1), (b0, b1)) = (range(l1)?, range(l2)?);
        if l1.shape() != l2.shape() {
            return Err(candle_core::Error::Msg("softmax gradient shape mismatch".into()));
        }
        let dim = l1.dims().last().copied().unwrap_or(1).max(1);
        let out = match (s1, s2) {
            (CpuStorage::F32(y), CpuStorage::F32(g)) => CpuStorage::F32(softmax_grad_rows(&y[a0..a1], &g[b0..b1], dim)),
            (CpuStorage::F64(y), CpuStorage::F64(g)) => CpuStorage::F64(softmax_grad_rows(&y[a0..a1], &g[b0..b1], dim)),
            _ => return Err(candle_core::Error::Msg("softmax supports f32 and f64 only".into())),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// Numerically stable log-softmax over the last dimension.
pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(scope: &mut Scope, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = scope.param("weight", &[out_dim, in_dim], Init::Uniform(bound))?;
        let bias = if bias {
            Some(scope.param("bias", &[out_dim], Init::Uniform(bound))?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().ok_or_else(|| Error::Shape("linear on a scalar".into()))?;
        if in_dim != self.in_dim() {
            return Err(Error::Shape(format!(
                "linear layer expects width {}, got {in_dim}",
                self.in_dim()
            )));
        }
        let rows = x.elem_count() / in_dim;
        let y = x.reshape((rows, in_dim))?.matmul(&self.weight.t()?)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim();
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(scope: &mut Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: scope.param("gamma", &[dim], Init::Ones)?,
            beta: scope.param("beta", &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(scope: &mut Scope, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&mut scope.sub("fc1"), dim, hidden, true)?,
            fc2: Linear::new(&mut scope.sub("fc2"), hidden, dim, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu_erf()?)
    }
}

/// Attention output together with the normalized score matrix
/// (batch, heads, queries, keys).
pub struct Attended {
    pub output: Tensor,
    pub weights: Tensor,
}

/// Multi-head scaled dot-product attention with separate query and
/// key/value sources.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    n_heads: usize,
}

impl MultiHeadAttention {
    pub fn new(scope: &mut Scope, dim: usize, n_heads: usize) -> Result<Self> {
        if n_heads == 0 || dim % n_heads != 0 {
            return Err(Error::Config(format!(
                "attention width {dim} is not divisible by {n_heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(&mut scope.sub("query"), dim, dim, true)?,
            key: Linear::new(&mut scope.sub("key"), dim, dim, true)?,
            value: Linear::new(&mut scope.sub("value"), dim, dim, true)?,
            out: Linear::new(&mut scope.sub("out"), dim, dim, true)?,
            n_heads,
        })
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, c) = x.dims3()?;
        Ok(x
            .reshape((b, t, self.n_heads, c / self.n_heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// `mask`, when given, is additive with shape (groups, queries, keys) and
    /// the batch dimension must be a multiple of `groups`.
    pub fn attend(&self, q_src: &Tensor, kv_src: &Tensor, mask: Option<&Tensor>) -> Result<Attended> {
        let (b, tq, c) = q_src.dims3()?;
        let (bk, tk, ck) = kv_src.dims3()?;
        if b != bk || c != ck {
            return Err(Error::Shape(format!(
                "query source {:?} and key/value source {:?} disagree",
                q_src.dims(),
                kv_src.dims()
            )));
        }
        let head_dim = c / self.n_heads;
        let q = self.split_heads(&self.query.forward(q_src)?)?;
        let k = self.split_heads(&self.key.forward(kv_src)?)?;
        let v = self.split_heads(&self.value.forward(kv_src)?)?;
        let mut scores = (q.matmul(&k.t()?)? * (1.0 / (head_dim as f64).sqrt()))?;
        if let Some(mask) = mask {
            let groups = mask.dims()[0];
            scores = scores
                .reshape((b / groups, groups, self.n_heads, tq, tk))?
                .broadcast_add(&mask.unsqueeze(1)?.unsqueeze(0)?)?
                .reshape((b, self.n_heads, tq, tk))?;
        }
        let weights = softmax_last(&scores)?;
        let mixed = weights
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, tq, c))?;
        Ok(Attended {
            output: self.out.forward(&mixed)?,
            weights,
        })
    }
}

/// Pre-normalized transformer encoder block.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    mlp: Mlp,
    dropout: f64,
}

impl TransformerBlock {
    pub fn new(scope: &mut Scope, dim: usize, n_heads: usize, mlp_ratio: usize, dropout: f64) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&mut scope.sub("norm1"), dim)?,
            attn: MultiHeadAttention::new(&mut scope.sub("attn"), dim, n_heads)?,
            norm2: LayerNorm::new(&mut scope.sub("norm2"), dim)?,
            mlp: Mlp::new(&mut scope.sub("mlp"), dim, dim * mlp_ratio)?,
            dropout,
        })
    }

    pub fn attention(&self) -> &MultiHeadAttention {
        &self.attn
    }

    pub fn norm1(&self) -> &LayerNorm {
        &self.norm1
    }

    /// Returns the block output and the self-attention weights.
    pub fn forward_with_weights(&self, x: &Tensor, mask: Option<&Tensor>, mode: &mut Mode) -> Result<(Tensor, Tensor)> {
        let h = self.norm1.forward(x)?;
        let att = self.attn.attend(&h, &h, mask)?;
        let x = (x + dropout(&att.output, self.dropout, mode)?)?;
        let y = self.mlp.forward(&self.norm2.forward(&x)?)?;
        let x = (&x + dropout(&y, self.dropout, mode)?)?;
        Ok((x, att.weights))
    }

    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>, mode: &mut Mode) -> Result<Tensor> {
        Ok(self.forward_with_weights(x, mask, mode)?.0)
    }
}

pub fn conv2d(
    scope: &mut Scope,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<candle_nn::Conv2d> {
    let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
    let w = scope.param("weight", &[out_ch, in_ch, kernel, kernel], Init::Uniform(bound))?;
    let b = scope.param("bias", &[out_ch], Init::Uniform(bound))?;
    Ok(candle_nn::Conv2d::new(
        w,
        Some(b),
        candle_nn::Conv2dConfig {
            padding,
            stride,
            ..Default::default()
        },
    ))
}

/// 2×2 max pool with stride 2. Candle's built-in pooling backward scales the
/// gradient by the fraction of tied maxima instead of dividing by their count,
/// so the pool is expressed as a reshape and a max reduction instead.
pub fn max_pool2x2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("cannot 2×2-pool a {h}×{w} map")));
    }
    Ok(x
        .contiguous()?
        .reshape((n, c, h / 2, 2, w / 2, 2))?
        .max(5)?
        .max(3)?)
}

/// Like [`conv2d`] but with He-normal weights and zero bias, for deep
/// ReLU stacks without normalization.
pub fn conv2d_he(
    scope: &mut Scope,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<candle_nn::Conv2d> {
    let std = (2.0 / (in_ch * kernel * kernel) as f64).sqrt();
    let w = scope.param("weight", &[out_ch, in_ch, kernel, kernel], Init::Normal(std))?;
    let b = scope.param("bias", &[out_ch], Init::Zeros)?;
    Ok(candle_nn::Conv2d::new(
        w,
        Some(b),
        candle_nn::Conv2dConfig {
            padding,
            stride,
            ..Default::default()
        },
    ))
}

pub fn conv_transpose2d(
    scope: &mut Scope,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<candle_nn::ConvTranspose2d> {
    let bound = 1.0 / ((out_ch * kernel * kernel) as f64).sqrt();
    let w = scope.param("weight", &[in_ch, out_ch, kernel, kernel], Init::Uniform(bound))?;
    let b = scope.param("bias", &[out_ch], Init::Uniform(bound))?;
    Ok(candle_nn::ConvTranspose2d::new(
        w,
        Some(b),
        candle_nn::ConvTranspose2dConfig {
            padding,
            stride,
            ..Default::default()
        },
    ))
}

/// Adam (no weight decay) over the given variables.
pub fn adam(vars: Vec<Var>, lr: f64, beta1: f64, beta2: f64) -> Result<candle_nn::AdamW> {
    use candle_nn::Optimizer;
    Ok(candle_nn::AdamW::new(
        vars,
        candle_nn::ParamsAdamW {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay: 0.0,
        },
    )?)
}

/// Stacks image grids into an (n, channels, height, width) tensor.
pub fn images_to_tensor(images: &[&crate::data::ImageGrid], dtype: DType) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidInput("empty image batch".into()))?;
    let (c, h, w) = (first.channels, first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if (img.channels, img.height, img.width) != (c, h, w) {
            return Err(Error::Shape("images in a batch differ in shape".into()));
        }
        data.extend_from_slice(&img.data);
    }
    Ok(Tensor::from_vec(data, (images.len(), c, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn rows_to_tensor(rows: &[Vec<f32>], dtype: DType) -> Result<Tensor> {
    let width = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != width) {
        return Err(Error::Shape("rows differ in length".into()));
    }
    let flat: Vec<f32> = rows.iter().flatten().copied().collect();
    Ok(Tensor::from_vec(flat, (rows.len(), width), &Device::Cpu)?.to_dtype(dtype)?)
}
