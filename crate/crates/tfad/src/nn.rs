//! Shared neural-network plumbing: a seeded parameter store (so
//! initialization is reproducible across runs and platforms), thin layer
//! wrappers over the tensor backend, a transformer block, the optimizer
//! with its cosine schedule, checkpoint metadata, and a wall-clock
//! budget guard.
//!
//! Everything runs on CPU in f64: desk-scale models are small enough
//! that throughput is not the constraint, and the doubled precision
//! keeps gradient checks and oracle comparisons tight.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::ops::softmax;
use candle_nn::{Embedding, Linear, Module, Optimizer, ParamsAdamW};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Checkpoint layout version; bumped on any incompatible change.
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Derive an independent sub-seed from a master seed and a purpose tag.
///
/// Each consumer of randomness (initialization, shuffling, masking,
/// sampling, …) gets its own stream, so adding or reordering one
/// consumer never perturbs the others.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is long enough"))
}

/// How a parameter tensor is filled at creation.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Uniform { lo: f64, hi: f64 },
    Normal { mean: f64, sd: f64 },
    /// U(−b, b) with b = sqrt(6 / (fan_in + fan_out)): keeps activation
    /// variance roughly constant through deep stacks, which matters here
    /// because the quantizer's moving-average codebook inherits the
    /// encoder's output scale.
    XavierUniform { fan_in: usize, fan_out: usize },
}

/// Named, seeded collection of trainable tensors.
///
/// Creation order is the RNG consumption order, so a model built by the
/// same code with the same seed always starts from the same values; the
/// sorted name order fixes the optimizer's state layout.
pub struct ParamStore {
    device: Device,
    rng: ChaCha8Rng,
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(device: &Device, seed: u64) -> Self {
        Self {
            device: device.clone(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            vars: BTreeMap::new(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Create (or fetch, if already created) a parameter tensor.
    pub fn var(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(var) = self.vars.get(name) {
            return Ok(var.as_tensor().clone());
        }
        let count: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; count],
            Init::Ones => vec![1.0; count],
            Init::Uniform { lo, hi } => (0..count).map(|_| self.rng.random_range(lo..hi)).collect(),
            Init::Normal { mean, sd } => {
                let dist = Normal::new(mean, sd)
                    .map_err(|e| Error::Config(format!("bad init for {name}: {e}")))?;
                (0..count).map(|_| dist.sample(&mut self.rng)).collect()
            }
            Init::XavierUniform { fan_in, fan_out } => {
                let bound = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
                (0..count)
                    .map(|_| self.rng.random_range(-bound..bound))
                    .collect()
            }
        };
        let tensor = Tensor::from_vec(values, shape, &self.device)?;
        let var = Var::from_tensor(&tensor)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn tensor(&self, name: &str) -> Option<Tensor> {
        self.vars.get(name).map(|v| v.as_tensor().clone())
    }

    /// Overwrite a parameter in place (shape-checked by the backend).
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Shape(format!("no parameter named {name}")))?;
        var.set(value)?;
        Ok(())
    }

    /// All variables in name order (the optimizer's canonical order).
    pub fn all_vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    /// Variables whose name satisfies the predicate, in name order.
    pub fn vars_where(&self, mut pred: impl FnMut(&str) -> bool) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(name, _)| pred(name))
            .map(|(_, var)| var.clone())
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.vars
            .values()
            .map(|v| v.as_tensor().elem_count())
            .sum()
    }

    /// Serialize every parameter to a safetensors file.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let map: std::collections::HashMap<String, Tensor> = self
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    /// Load values into the existing parameters; every stored name must
    /// exist in the file with the same shape.
    pub fn load(&self, path: &Path) -> Result<()> {
        let loaded = candle_core::safetensors::load(path, &self.device)?;
        for (name, var) in &self.vars {
            let tensor = loaded.get(name).ok_or_else(|| {
                Error::Data(format!(
                    "checkpoint {} is missing parameter {name}",
                    path.display()
                ))
            })?;
            if tensor.dims() != var.as_tensor().dims() {
                return Err(Error::Data(format!(
                    "checkpoint {}: parameter {name} has shape {:?}, expected {:?}",
                    path.display(),
                    tensor.dims(),
                    var.as_tensor().dims()
                )));
            }
            var.set(&tensor.to_dtype(DType::F64)?)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

/// 1-D convolution with explicit (possibly asymmetric) zero padding.
///
/// The forward pass is an im2col gather followed by a matmul rather
/// than the backend's fused `conv1d`: the fused op's backward produces
/// wrong gradients for batches larger than one (verified against finite
/// differences), while `index_select` and `matmul` differentiate
/// correctly at any batch size.
pub struct Conv1d {
    weight: Tensor,
    bias: Tensor,
    kernel: usize,
    stride: usize,
    pad_left: usize,
    pad_right: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad_left: usize,
        pad_right: usize,
    ) -> Result<Self> {
        let weight = store.var(
            &format!("{name}.weight"),
            &[c_out, c_in, kernel],
            Init::XavierUniform {
                fan_in: c_in * kernel,
                fan_out: c_out * kernel,
            },
        )?;
        let bias = store.var(&format!("{name}.bias"), &[c_out], Init::Zeros)?;
        Ok(Self {
            weight,
            bias,
            kernel,
            stride,
            pad_left,
            pad_right,
        })
    }

    /// (B, C_in, L) -> (B, C_out, L′).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        if self.pad_left > 0 || self.pad_right > 0 {
            x = x.pad_with_zeros(2, self.pad_left, self.pad_right)?;
        }
        let (b, c_in, padded) = x.dims3()?;
        if padded < self.kernel {
            return Err(Error::Shape(format!(
                "padded length {padded} shorter than kernel {}",
                self.kernel
            )));
        }
        let l_out = (padded - self.kernel) / self.stride + 1;
        // im2col: gather the kernel's taps for every output position.
        let idx: Vec<i64> = (0..l_out)
            .flat_map(|t| (0..self.kernel).map(move |k| (t * self.stride + k) as i64))
            .collect();
        let idx = Tensor::from_vec(idx, l_out * self.kernel, x.device())?;
        let unfolded = x
            .index_select(&idx, 2)? // (B, C_in, L′·k)
            .reshape((b, c_in, l_out, self.kernel))?
            .permute((0, 2, 1, 3))? // (B, L′, C_in, k)
            .contiguous()?
            .reshape((b, l_out, c_in * self.kernel))?;
        let (c_out, _, _) = self.weight.dims3()?;
        let w = self.weight.reshape((c_out, c_in * self.kernel))?.t()?;
        let out = unfolded.broadcast_matmul(&w)?.transpose(1, 2)?; // (B, C_out, L′)
        Ok(out.broadcast_add(&self.bias.reshape((1, (), 1))?)?)
    }
}

/// Duplicate every column `factor` times: (B, C, L) -> (B, C, L·factor).
/// The differentiable half of a resize-convolution upsampling stage.
pub fn repeat_upsample(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 1 {
        return Ok(x.clone());
    }
    let (b, c, l) = x.dims3()?;
    let parts: Vec<Tensor> = (0..factor).map(|_| x.unsqueeze(3)).collect::<candle_core::Result<_>>()?;
    Ok(Tensor::cat(&parts, 3)?.reshape((b, c, l * factor))?)
}

/// Fully connected layer backed by the parameter store.
pub fn linear(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Linear> {
    let weight = store.var(
        &format!("{name}.weight"),
        &[d_out, d_in],
        Init::XavierUniform {
            fan_in: d_in,
            fan_out: d_out,
        },
    )?;
    let bias = store.var(&format!("{name}.bias"), &[d_out], Init::Zeros)?;
    Ok(Linear::new(weight, Some(bias)))
}

/// Layer norm over the last dimension, built from primitive ops (the
/// backend's fused implementation does not cover f64).
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let last = x.rank() - 1;
        let mean = x.mean_keepdim(last)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(last)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)?)
    }
}

/// Layer norm over the last dimension.
pub fn layer_norm(store: &mut ParamStore, name: &str, dim: usize) -> Result<LayerNorm> {
    let weight = store.var(&format!("{name}.weight"), &[dim], Init::Ones)?;
    let bias = store.var(&format!("{name}.bias"), &[dim], Init::Zeros)?;
    Ok(LayerNorm {
        weight,
        bias,
        eps: 1e-5,
    })
}

/// Token-embedding table.
pub fn embedding(store: &mut ParamStore, name: &str, vocab: usize, dim: usize) -> Result<Embedding> {
    let table = store.var(
        &format!("{name}.weight"),
        &[vocab, dim],
        Init::Normal { mean: 0.0, sd: 0.02 },
    )?;
    Ok(Embedding::new(table, dim))
}

/// Multi-head bidirectional self-attention.
pub struct MultiHeadAttention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
    head_dim: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize) -> Result<Self> {
        if width % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {width} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            qkv: linear(store, &format!("{name}.qkv"), width, 3 * width)?,
            proj: linear(store, &format!("{name}.proj"), width, width)?,
            heads,
            head_dim: width / heads,
        })
    }

    /// (B, S, E) -> (B, S, E), every position attending to every other.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, s, e) = x.dims3()?;
        let qkv = self.qkv.forward(x)?; // (B, S, 3E)
        let q = qkv.narrow(2, 0, e)?;
        let k = qkv.narrow(2, e, e)?;
        let v = qkv.narrow(2, 2 * e, e)?;
        let split = |t: Tensor| -> Result<Tensor> {
            // (B, S, E) -> (B, heads, S, head_dim)
            Ok(t.reshape((b, s, self.heads, self.head_dim))?
                .transpose(1, 2)?
                .contiguous()?)
        };
        let q = split(q)?;
        let k = split(k)?;
        let v = split(v)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let scores = q.matmul(&k.transpose(2, 3)?.contiguous()?)?.affine(scale, 0.0)?;
        let attn = softmax(&scores, 3)?;
        let out = attn.matmul(&v)?; // (B, heads, S, head_dim)
        let out = out.transpose(1, 2)?.contiguous()?.reshape((b, s, e))?;
        Ok(self.proj.forward(&out)?)
    }
}

/// Pre-norm transformer block: x + attn(ln(x)), then x + mlp(ln(x)).
pub struct TransformerBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln1: layer_norm(store, &format!("{name}.ln1"), width)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), width, heads)?,
            ln2: layer_norm(store, &format!("{name}.ln2"), width)?,
            fc1: linear(store, &format!("{name}.fc1"), width, 4 * width)?,
            fc2: linear(store, &format!("{name}.fc2"), 4 * width, width)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let attended = self.attn.forward(&self.ln1.forward(x)?)?;
        let x = x.add(&attended)?;
        let hidden = self.fc1.forward(&self.ln2.forward(&x)?)?.gelu_erf()?;
        let mlp = self.fc2.forward(&hidden)?;
        Ok(x.add(&mlp)?)
    }
}

// ---------------------------------------------------------------------------
// Optimization
// ---------------------------------------------------------------------------

/// Decoupled-weight-decay optimizer over a store's variables.
pub fn adamw(vars: Vec<Var>, learning_rate: f64, weight_decay: f64) -> Result<candle_nn::AdamW> {
    Ok(candle_nn::AdamW::new(
        vars,
        ParamsAdamW {
            lr: learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        },
    )?)
}

/// Cosine learning-rate schedule annealed to zero over `total` epochs.
#[derive(Debug, Clone, Copy)]
pub struct CosineLr {
    pub base: f64,
    pub total: usize,
}

impl CosineLr {
    pub fn at(&self, epoch: usize) -> f64 {
        if self.total == 0 {
            return self.base;
        }
        let t = (epoch.min(self.total)) as f64 / self.total as f64;
        self.base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// One optimizer step: backprop `loss` and update, with the scheduled
/// learning rate applied first.
pub fn step(opt: &mut candle_nn::AdamW, loss: &Tensor, lr: f64) -> Result<()> {
    opt.set_learning_rate(lr);
    opt.backward_step(loss)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Sidecar describing a checkpoint directory.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    pub format_version: u32,
    /// Hash of the resolved run config the models were trained under.
    pub config_hash: String,
    pub dataset: String,
    pub stage1_epochs_done: usize,
    pub stage2_epochs_done: usize,
}

impl CheckpointMeta {
    pub fn path(dir: &Path) -> std::path::PathBuf {
        dir.join("checkpoint.toml")
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serialize checkpoint meta: {e}")))?;
        std::fs::write(Self::path(dir), text)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = Self::path(dir);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        let meta: CheckpointMeta = toml::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if meta.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Data(format!(
                "{}: format version {} unsupported (expected {})",
                path.display(),
                meta.format_version,
                CHECKPOINT_FORMAT_VERSION
            )));
        }
        Ok(meta)
    }
}

/// Writes model parameters plus metadata to a checkpoint directory.
///
/// Stage files are overwritten in place after every epoch, so whatever
/// interrupts training (divergence, wall clock, a signal) leaves the
/// last completed epoch on disk, ready for `--resume`.
pub struct Checkpointer {
    dir: std::path::PathBuf,
    meta: CheckpointMeta,
}

impl Checkpointer {
    /// Start a fresh checkpoint directory (epoch counters at zero).
    pub fn create(dir: &Path, config_hash: String, dataset: String) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let meta = CheckpointMeta {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config_hash,
            dataset,
            stage1_epochs_done: 0,
            stage2_epochs_done: 0,
        };
        meta.save(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            meta,
        })
    }

    /// Open an existing checkpoint directory (format-version gated).
    pub fn open(dir: &Path) -> Result<Self> {
        let meta = CheckpointMeta::load(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            meta,
        })
    }

    pub fn meta(&self) -> &CheckpointMeta {
        &self.meta
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn stage1_path(&self) -> std::path::PathBuf {
        self.dir.join("stage1.safetensors")
    }

    pub fn stage2_path(&self) -> std::path::PathBuf {
        self.dir.join("stage2.safetensors")
    }

    pub fn save_stage1(&mut self, store: &ParamStore, epochs_done: usize) -> Result<()> {
        store.save(&self.stage1_path())?;
        self.meta.stage1_epochs_done = epochs_done;
        self.meta.save(&self.dir)
    }

    pub fn save_stage2(&mut self, store: &ParamStore, epochs_done: usize) -> Result<()> {
        store.save(&self.stage2_path())?;
        self.meta.stage2_epochs_done = epochs_done;
        self.meta.save(&self.dir)
    }
}

// ---------------------------------------------------------------------------
// Wall-clock budget
// ---------------------------------------------------------------------------

/// Deadline guard for long-running training commands.
#[derive(Debug, Clone, Copy)]
pub struct Budget {
    deadline: Option<Instant>,
}

impl Budget {
    /// `secs == 0` disables the cap.
    pub fn new(secs: u64) -> Self {
        Self {
            deadline: (secs > 0).then(|| Instant::now() + Duration::from_secs(secs)),
        }
    }

    pub fn unlimited() -> Self {
        Self { deadline: None }
    }

    /// Error with the wall-clock status once the deadline has passed.
    pub fn check(&self, context: &str) -> Result<()> {
        if let Some(deadline) = self.deadline {
            if Instant::now() >= deadline {
                return Err(Error::WallClock(format!(
                    "budget exhausted during {context}; partial checkpoint retained"
                )));
            }
        }
        Ok(())
    }
}
