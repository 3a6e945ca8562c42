//! Stage 1: spectrogram ↔ discrete token grid.
//!
//! The encoder, vector quantizer, and decoder compress a 2×H×T′
//! spectrogram into an H×W grid of codebook indices and back. Every
//! convolution runs along the width axis only — frequency rows are
//! folded into the batch dimension — so the (1×3) residual and (1×4)
//! resampling kernels can never mix content across frequency rows, and
//! each latent row is a function of exactly one spectrogram row. That
//! independence is what lets the scorer attribute anomalies to
//! individual frequency bands.
//!
//! Training minimizes time-domain reconstruction error (the decoder
//! output is pushed through the differentiable inverse transform) plus a
//! spectrogram-domain auxiliary term and a commitment term; the codebook
//! itself is updated by exponential moving averages of assigned encoder
//! outputs, with dead codes re-seeded after a configurable number of
//! unused epochs.

use std::path::Path;

use candle_core::Tensor;

use crate::config::{RowNorm, RunConfig};
use crate::data::Window;
use crate::error::{Error, Result};
use crate::nn::{
    adamw, derive_seed, step, Budget, Checkpointer, Conv1d, CosineLr, Init, LayerNorm, ParamStore,
    repeat_upsample,
};
use crate::spectral::{frame_layout, istft, stft, GraphIstft, Spectrogram, StftParams};

/// H×W grid of codebook indices.
///
/// Entries are in [0, K) when produced by quantization; the masking
/// calculus of the prior introduces the reserved id K (MASK).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    pub h: usize,
    pub w: usize,
    ids: Vec<u32>,
}

impl TokenGrid {
    pub fn filled(h: usize, w: usize, id: u32) -> Self {
        Self {
            h,
            w,
            ids: vec![id; h * w],
        }
    }

    pub fn from_ids(h: usize, w: usize, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != h * w {
            return Err(Error::Shape(format!(
                "{} ids cannot fill an {h}x{w} grid",
                ids.len()
            )));
        }
        Ok(Self { h, w, ids })
    }

    #[inline]
    pub fn get(&self, h: usize, w: usize) -> u32 {
        self.ids[h * self.w + w]
    }

    #[inline]
    pub fn set(&mut self, h: usize, w: usize, id: u32) {
        self.ids[h * self.w + w] = id;
    }

    /// Row-major backing slice.
    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn count_eq(&self, id: u32) -> usize {
        self.ids.iter().filter(|&&v| v == id).count()
    }
}

/// D×H×W continuous or quantized latent grid.
#[derive(Debug, Clone)]
pub struct LatentGrid {
    /// Tensor of shape (D, H, W).
    pub tensor: Tensor,
}

impl LatentGrid {
    pub fn dims(&self) -> Result<(usize, usize, usize)> {
        Ok(self.tensor.dims3()?)
    }
}

/// Everything about the tokenizer's geometry, derived from the run
/// config and the window length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizerShape {
    pub stft: StftParams,
    /// Window length T the model is built for.
    pub series_len: usize,
    /// Spectrogram frame count T′.
    pub t_prime: usize,
    /// Frequency rows H.
    pub freq_rows: usize,
    /// Latent width W after downsampling.
    pub width: usize,
    /// Number of width-halving stages.
    pub downsamples: usize,
    /// Channel count per encoder stage (stem first).
    pub channels: Vec<usize>,
    pub latent_dim: usize,
    pub codebook_size: usize,
    pub res_blocks: usize,
    pub row_norm: RowNorm,
}

/// Derive the tokenizer geometry for windows of length `series_len`.
///
/// The number of halving stages is the rounded log2 ratio of T′ to the
/// configured target width, backed off until it divides T′ evenly.
pub fn derive_shape(config: &RunConfig, series_len: usize) -> Result<TokenizerShape> {
    let stft = config.spectral.to_params()?;
    let layout = frame_layout(&stft, series_len)?;
    let t_prime = layout.frames;
    let target = config.tokenizer.target_width.min(t_prime);
    let mut downsamples = (t_prime as f64 / target as f64).log2().round().max(0.0) as usize;
    while downsamples > 0 && t_prime % (1 << downsamples) != 0 {
        downsamples -= 1;
    }
    let width = t_prime >> downsamples;
    let base = config.tokenizer.base_channels;
    let channels: Vec<usize> = (0..=downsamples)
        .map(|i| (base << i).min(base * 4))
        .collect();
    Ok(TokenizerShape {
        stft,
        series_len,
        t_prime,
        freq_rows: stft.freq_rows(),
        width,
        downsamples,
        channels,
        latent_dim: config.tokenizer.latent_dim,
        codebook_size: config.tokenizer.codebook_size,
        res_blocks: config.tokenizer.res_blocks,
        row_norm: config.tokenizer.row_norm,
    })
}

/// Two-convolution residual block with 1×3 kernels.
struct ResBlock {
    conv1: Conv1d,
    conv2: Conv1d,
    norm: Option<LayerNorm>,
}

impl ResBlock {
    fn new(store: &mut ParamStore, name: &str, channels: usize, row_norm: RowNorm) -> Result<Self> {
        Ok(Self {
            conv1: Conv1d::new(store, &format!("{name}.conv1"), channels, channels, 3, 1, 1, 1)?,
            conv2: Conv1d::new(store, &format!("{name}.conv2"), channels, channels, 3, 1, 1, 1)?,
            norm: match row_norm {
                RowNorm::None => None,
                RowNorm::Row => Some(crate::nn::layer_norm(
                    store,
                    &format!("{name}.norm"),
                    channels,
                )?),
            },
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        if let Some(norm) = &self.norm {
            // Normalize across channels at each position; positions and
            // rows stay untouched.
            h = norm.forward(&h.transpose(1, 2)?)?.transpose(1, 2)?;
        }
        let h = self.conv1.forward(&h)?.gelu_erf()?;
        let h = self.conv2.forward(&h)?;
        Ok(x.add(&h)?)
    }
}

/// Stage-1 model: encoder, vector quantizer, decoder.
pub struct Tokenizer {
    pub shape: TokenizerShape,
    store: ParamStore,
    enc_stem: Conv1d,
    enc_stages: Vec<(Conv1d, Vec<ResBlock>)>,
    enc_out: Conv1d,
    dec_stem: Conv1d,
    dec_stages: Vec<(Conv1d, Vec<ResBlock>)>,
    dec_out: Conv1d,
    /// (kernel, stride, pad_left) of every encoder conv, in forward
    /// order, for exact receptive-field computation.
    enc_geom: Vec<(usize, usize, usize)>,
    graph_istft: GraphIstft,
}

impl Tokenizer {
    /// Build a freshly initialized model for windows of `series_len`.
    pub fn new(config: &RunConfig, series_len: usize, seed: u64) -> Result<Self> {
        let shape = derive_shape(config, series_len)?;
        let mut store = ParamStore::new(&candle_core::Device::Cpu, seed);
        let mut enc_geom = Vec::new();

        let enc_stem = Conv1d::new(&mut store, "enc.stem", 2, shape.channels[0], 3, 1, 1, 1)?;
        enc_geom.push((3, 1, 1));
        let mut enc_stages = Vec::new();
        for i in 0..shape.downsamples {
            let (c_in, c_out) = (shape.channels[i], shape.channels[i + 1]);
            let down = Conv1d::new(
                &mut store,
                &format!("enc.stage{i}.down"),
                c_in,
                c_out,
                4,
                2,
                1,
                1,
            )?;
            enc_geom.push((4, 2, 1));
            let mut res = Vec::new();
            for r in 0..shape.res_blocks {
                res.push(ResBlock::new(
                    &mut store,
                    &format!("enc.stage{i}.res{r}"),
                    c_out,
                    shape.row_norm,
                )?);
                enc_geom.push((3, 1, 1));
                enc_geom.push((3, 1, 1));
            }
            enc_stages.push((down, res));
        }
        let top = *shape.channels.last().expect("at least the stem stage");
        let enc_out = Conv1d::new(&mut store, "enc.out", top, shape.latent_dim, 3, 1, 1, 1)?;
        enc_geom.push((3, 1, 1));

        let dec_stem = Conv1d::new(&mut store, "dec.stem", shape.latent_dim, top, 3, 1, 1, 1)?;
        let mut dec_stages = Vec::new();
        for i in (0..shape.downsamples).rev() {
            let (c_in, c_out) = (shape.channels[i + 1], shape.channels[i]);
            // Resize-convolution upsampling: repeat each column, then a
            // 1×4 kernel smooths at the doubled resolution.
            let up = Conv1d::new(
                &mut store,
                &format!("dec.stage{i}.up"),
                c_in,
                c_out,
                4,
                1,
                2,
                1,
            )?;
            let mut res = Vec::new();
            for r in 0..shape.res_blocks {
                res.push(ResBlock::new(
                    &mut store,
                    &format!("dec.stage{i}.res{r}"),
                    c_out,
                    shape.row_norm,
                )?);
            }
            dec_stages.push((up, res));
        }
        let dec_out = Conv1d::new(&mut store, "dec.out", shape.channels[0], 2, 3, 1, 1, 1)?;

        // Codebook and its moving-average state; excluded from gradient
        // training (see `trainable_vars`).
        let k = shape.codebook_size;
        let d = shape.latent_dim;
        let spread = 1.0 / k as f64;
        store.var(
            "vq.codebook",
            &[k, d],
            Init::Uniform {
                lo: -spread,
                hi: spread,
            },
        )?;
        store.var("vq.cluster_size", &[k], Init::Zeros)?;
        store.var("vq.ema_sum", &[k, d], Init::Zeros)?;
        store.var("vq.epochs_unused", &[k], Init::Zeros)?;

        let graph_istft = GraphIstft::new(shape.stft, series_len, store.device())?;
        Ok(Self {
            shape,
            store,
            enc_stem,
            enc_stages,
            enc_out,
            dec_stem,
            dec_stages,
            dec_out,
            enc_geom,
            graph_istft,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Parameters the optimizer may touch (everything but the EMA-managed
    /// quantizer state).
    fn trainable_vars(&self) -> Vec<candle_core::Var> {
        self.store.vars_where(|name| !name.starts_with("vq."))
    }

    fn codebook(&self) -> Tensor {
        self.store.tensor("vq.codebook").expect("codebook exists")
    }

    /// Fold frequency rows into the batch: (B, 2, H, T′) -> (B·H, 2, T′).
    fn fold_rows(&self, spec: &Tensor) -> Result<Tensor> {
        let (b, c, h, t) = spec.dims4()?;
        Ok(spec
            .transpose(1, 2)? // (B, H, 2, T′)
            .contiguous()?
            .reshape((b * h, c, t))?)
    }

    /// Inverse of `fold_rows` for a (B·H, C, L) tensor.
    fn unfold_rows(&self, x: &Tensor, batch: usize) -> Result<Tensor> {
        let (bh, c, l) = x.dims3()?;
        let h = bh / batch;
        Ok(x.reshape((batch, h, c, l))?
            .transpose(1, 2)? // (B, C, H, L)
            .contiguous()?)
    }

    /// (B, 2, H, T′) -> (B, D, H, W).
    pub fn encode_batch(&self, spec: &Tensor) -> Result<Tensor> {
        let (b, _, h, t) = spec.dims4()?;
        if h != self.shape.freq_rows || t != self.shape.t_prime {
            return Err(Error::Shape(format!(
                "spectrogram {h}x{t} does not match model geometry {}x{}",
                self.shape.freq_rows, self.shape.t_prime
            )));
        }
        let mut x = self.enc_stem.forward(&self.fold_rows(spec)?)?;
        for (down, res) in &self.enc_stages {
            x = down.forward(&x)?;
            for block in res {
                x = block.forward(&x)?;
            }
        }
        let z = self.enc_out.forward(&x)?; // (B·H, D, W)
        self.unfold_rows(&z, b)
    }

    /// (B, D, H, W) -> (B, 2, H, T′).
    pub fn decode_batch(&self, z_q: &Tensor) -> Result<Tensor> {
        let (b, d, h, w) = z_q.dims4()?;
        if d != self.shape.latent_dim || h != self.shape.freq_rows || w != self.shape.width {
            return Err(Error::Shape(format!(
                "latent {d}x{h}x{w} does not match model geometry {}x{}x{}",
                self.shape.latent_dim, self.shape.freq_rows, self.shape.width
            )));
        }
        let mut x = self.dec_stem.forward(&self.fold_rows(z_q)?)?;
        for (up, res) in &self.dec_stages {
            x = up.forward(&repeat_upsample(&x, 2)?)?;
            for block in res {
                x = block.forward(&x)?;
            }
        }
        let spec = self.dec_out.forward(&x)?; // (B·H, 2, T′)
        self.unfold_rows(&spec, b)
    }

    /// Nearest-code assignment for a batch of latents.
    ///
    /// Distances are ‖z‖² + ‖c‖² − 2⟨z,c⟩ per cell; the argmin scan runs
    /// with a strict `<`, so exact ties resolve to the lowest index.
    pub fn nearest_tokens_batch(&self, z: &Tensor) -> Result<(Tensor, Vec<TokenGrid>)> {
        let (b, d, h, w) = z.dims4()?;
        let k = self.shape.codebook_size;
        let codebook = self.codebook().detach();
        let flat = z
            .permute((0, 2, 3, 1))? // (B, H, W, D)
            .contiguous()?
            .reshape((b * h * w, d))?;
        let z_sq = flat.sqr()?.sum_keepdim(1)?; // (N, 1)
        let c_sq = codebook.sqr()?.sum_keepdim(1)?.t()?; // (1, K)
        let cross = flat.matmul(&codebook.t()?)?; // (N, K)
        let dist = z_sq
            .broadcast_add(&c_sq)?
            .sub(&cross.affine(2.0, 0.0)?)?;
        let dist: Vec<f64> = dist.flatten_all()?.to_vec1()?;
        let mut ids = Vec::with_capacity(b * h * w);
        for cell in 0..b * h * w {
            let row = &dist[cell * k..(cell + 1) * k];
            let mut best = 0usize;
            for (i, &v) in row.iter().enumerate() {
                if v < row[best] {
                    best = i;
                }
            }
            ids.push(best as u32);
        }
        let id_tensor = Tensor::from_slice(
            &ids.iter().map(|&i| i as i64).collect::<Vec<_>>(),
            b * h * w,
            self.store.device(),
        )?;
        let z_q = codebook
            .index_select(&id_tensor, 0)? // (N, D)
            .reshape((b, h, w, d))?
            .permute((0, 3, 1, 2))? // (B, D, H, W)
            .contiguous()?;
        let grids = ids
            .chunks(h * w)
            .map(|chunk| TokenGrid {
                h,
                w,
                ids: chunk.to_vec(),
            })
            .collect();
        Ok((z_q, grids))
    }

    /// Spectrogram -> continuous latent grid.
    pub fn encode(&self, spec: &Spectrogram) -> Result<LatentGrid> {
        let t = spec.to_tensor(self.store.device())?.unsqueeze(0)?;
        let z = self.encode_batch(&t)?;
        Ok(LatentGrid {
            tensor: z.squeeze(0)?,
        })
    }

    /// Continuous latent grid -> (quantized grid, token grid).
    pub fn quantize(&self, z: &LatentGrid) -> Result<(LatentGrid, TokenGrid)> {
        let (z_q, mut grids) = self.nearest_tokens_batch(&z.tensor.unsqueeze(0)?)?;
        Ok((
            LatentGrid {
                tensor: z_q.squeeze(0)?,
            },
            grids.pop().expect("one grid per batch item"),
        ))
    }

    /// Token grid -> quantized latent grid (codebook lookup).
    pub fn lookup(&self, tokens: &TokenGrid) -> Result<LatentGrid> {
        let k = self.shape.codebook_size as u32;
        if tokens.ids().iter().any(|&id| id >= k) {
            return Err(Error::Input(
                "token grid contains MASK or out-of-range ids; decode needs a concrete grid".into(),
            ));
        }
        let ids = Tensor::from_slice(
            &tokens.ids().iter().map(|&i| i as i64).collect::<Vec<_>>(),
            tokens.h * tokens.w,
            self.store.device(),
        )?;
        let z_q = self
            .codebook()
            .detach()
            .index_select(&ids, 0)?
            .reshape((tokens.h, tokens.w, self.shape.latent_dim))?
            .permute((2, 0, 1))?
            .contiguous()?;
        Ok(LatentGrid { tensor: z_q })
    }

    /// Quantized latent grid -> (spectrogram, reconstructed window).
    pub fn decode(&self, z_q: &LatentGrid) -> Result<(Spectrogram, Vec<f64>)> {
        let spec_t = self.decode_batch(&z_q.tensor.unsqueeze(0)?)?.squeeze(0)?;
        let spec = Spectrogram::from_tensor(&spec_t, self.shape.stft, self.shape.series_len)?;
        let x_hat = istft(&spec)?;
        Ok((spec, x_hat))
    }

    /// Window -> token grid (transform, encode, quantize).
    pub fn tokenize_window(&self, window: &Window) -> Result<TokenGrid> {
        let spec = stft(&window.x, &self.shape.stft)?;
        let (_, tokens) = self.quantize(&self.encode(&spec)?)?;
        Ok(tokens)
    }

    /// Window -> reconstructed window (the full stage-1 round trip).
    pub fn reconstruct(&self, window: &Window) -> Result<Vec<f64>> {
        let spec = stft(&window.x, &self.shape.stft)?;
        let (z_q, _) = self.quantize(&self.encode(&spec)?)?;
        let (_, x_hat) = self.decode(&z_q)?;
        Ok(x_hat)
    }

    /// Exact closed interval of spectrogram columns that can influence
    /// latent column `j` (everything outside provably cannot).
    pub fn receptive_interval(&self, j: usize) -> (usize, usize) {
        let (mut lo, mut hi) = (j as isize, j as isize);
        for &(kernel, stride, pad_left) in self.enc_geom.iter().rev() {
            lo = lo * stride as isize - pad_left as isize;
            hi = hi * stride as isize - pad_left as isize + kernel as isize - 1;
        }
        let max = self.shape.t_prime as isize - 1;
        (lo.clamp(0, max) as usize, hi.clamp(0, max) as usize)
    }

    /// Load parameters from a stage-1 safetensors file.
    pub fn load_params(&self, path: &Path) -> Result<()> {
        self.store.load(path)
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Per-epoch training statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Epoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub holdout_loss: f64,
    /// Codes assigned at least once this epoch.
    pub codes_used: usize,
}

/// Train the stage-1 model on z-normalized windows.
///
/// Resuming: pass the model loaded from a checkpoint and the epoch to
/// continue from. A checkpoint (when a checkpointer is given) is written
/// after every epoch, so divergence or an exhausted wall-clock budget
/// always leaves the last good state on disk.
pub fn train_stage1(
    windows: &[Window],
    config: &RunConfig,
    budget: &Budget,
    mut ckpt: Option<&mut Checkpointer>,
    resume: Option<(Tokenizer, usize)>,
) -> Result<(Tokenizer, Vec<Stage1Epoch>)> {
    if windows.is_empty() {
        return Err(Error::Input("stage-1 training needs at least one window".into()));
    }
    let series_len = windows[0].x.len();
    if windows.iter().any(|w| w.x.len() != series_len) {
        return Err(Error::Shape("training windows differ in length".into()));
    }
    let (model, start_epoch) = match resume {
        Some((model, epoch)) => (model, epoch),
        None => (
            Tokenizer::new(config, series_len, derive_seed(config.seed, "stage1-init"))?,
            0,
        ),
    };
    let device = model.store.device().clone();
    let shape = model.shape.clone();

    // Precompute all window spectrograms once.
    let mut spec_data = Vec::with_capacity(windows.len() * 2 * shape.freq_rows * shape.t_prime);
    let mut x_data = Vec::with_capacity(windows.len() * series_len);
    for window in windows {
        let spec = stft(&window.x, &shape.stft)?;
        spec_data.extend_from_slice(spec.data());
        x_data.extend_from_slice(&window.x);
    }
    let spec_all = Tensor::from_vec(
        spec_data,
        (windows.len(), 2, shape.freq_rows, shape.t_prime),
        &device,
    )?;
    let x_all = Tensor::from_vec(x_data, (windows.len(), series_len), &device)?;

    // Deterministic holdout split.
    let mut order: Vec<usize> = (0..windows.len()).collect();
    {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(
            config.seed,
            "stage1-holdout",
        ));
        order.shuffle(&mut rng);
    }
    let n_holdout = ((windows.len() as f64 * config.train.holdout_fraction) as usize)
        .min(windows.len().saturating_sub(1));
    let holdout_idx: Vec<usize> = order[..n_holdout].to_vec();
    let train_idx: Vec<usize> = order[n_holdout..].to_vec();

    let mut opt = adamw(
        model.trainable_vars(),
        config.train.learning_rate,
        config.train.weight_decay,
    )?;
    let schedule = CosineLr {
        base: config.train.learning_rate,
        total: config.train.stage1_epochs,
    };
    let k = shape.codebook_size;
    let d = shape.latent_dim;
    let beta = config.tokenizer.commitment_weight;
    let w_spec = config.tokenizer.spec_loss_weight;
    let decay = config.tokenizer.ema_decay;
    let mut log = Vec::new();

    let select = |all: &Tensor, idx: &[usize]| -> Result<Tensor> {
        let idx_t = Tensor::from_slice(
            &idx.iter().map(|&i| i as i64).collect::<Vec<_>>(),
            idx.len(),
            &device,
        )?;
        Ok(all.index_select(&idx_t, 0)?)
    };
    let recon_loss = |model: &Tokenizer, spec: &Tensor, x: &Tensor| -> Result<(Tensor, Tensor)> {
        let z = model.encode_batch(spec)?;
        let (z_q, _) = model.nearest_tokens_batch(&z)?;
        let commit = z.sub(&z_q)?.sqr()?.mean_all()?;
        // Straight-through: decode the quantized values, backprop as if
        // the quantizer were the identity.
        let z_ste = z.add(&z_q.sub(&z.detach())?)?;
        let spec_hat = model.decode_batch(&z_ste)?;
        let x_hat = model.graph_istft.apply(&spec_hat)?;
        let time_mse = x_hat.sub(x)?.sqr()?.mean_all()?;
        let spec_mse = spec_hat.sub(spec)?.sqr()?.mean_all()?;
        let recon = time_mse.add(&spec_mse.affine(w_spec, 0.0)?)?;
        Ok((recon, commit))
    };

    for epoch in start_epoch..config.train.stage1_epochs {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(
            config.seed,
            &format!("stage1-order-{epoch}"),
        ));
        let mut shuffled = train_idx.clone();
        shuffled.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut batches = 0.0f64;
        let mut used_this_epoch = vec![false; k];
        let mut last_z_cells: Vec<f64> = Vec::new();
        for batch in shuffled.chunks(config.train.batch_size) {
            budget.check("stage-1 training")?;
            let spec = select(&spec_all, batch)?;
            let x = select(&x_all, batch)?;

            let z = model.encode_batch(&spec)?;
            let (z_q, grids) = model.nearest_tokens_batch(&z)?;
            let commit = z.sub(&z_q)?.sqr()?.mean_all()?;
            let z_ste = z.add(&z_q.sub(&z.detach())?)?;
            let spec_hat = model.decode_batch(&z_ste)?;
            let x_hat = model.graph_istft.apply(&spec_hat)?;
            let time_mse = x_hat.sub(&x)?.sqr()?.mean_all()?;
            let spec_mse = spec_hat.sub(&spec)?.sqr()?.mean_all()?;
            let loss = time_mse
                .add(&spec_mse.affine(w_spec, 0.0)?)?
                .add(&commit.affine(beta, 0.0)?)?;

            let loss_value: f64 = loss.to_scalar()?;
            if !loss_value.is_finite() {
                return Err(Error::Divergence(format!(
                    "stage-1 loss became {loss_value} at epoch {epoch}; last good epoch checkpointed"
                )));
            }
            step(&mut opt, &loss, schedule.at(epoch))?;
            epoch_loss += loss_value;
            batches += 1.0;

            // Moving-average codebook update from this batch's
            // assignments (host-side; no gradients involved).
            let z_cells: Vec<f64> = z
                .detach()
                .permute((0, 2, 3, 1))?
                .contiguous()?
                .flatten_all()?
                .to_vec1()?;
            let mut counts = vec![0.0f64; k];
            let mut sums = vec![0.0f64; k * d];
            for (cell, grid) in grids
                .iter()
                .flat_map(|g| g.ids().iter())
                .enumerate()
            {
                let id = *grid as usize;
                counts[id] += 1.0;
                used_this_epoch[id] = true;
                for j in 0..d {
                    sums[id * d + j] += z_cells[cell * d + j];
                }
            }
            let mut cluster: Vec<f64> = model
                .store
                .tensor("vq.cluster_size")
                .unwrap()
                .to_vec1()?;
            let mut ema_sum: Vec<f64> = model
                .store
                .tensor("vq.ema_sum")
                .unwrap()
                .flatten_all()?
                .to_vec1()?;
            let mut codebook: Vec<f64> = model.codebook().flatten_all()?.to_vec1()?;
            for id in 0..k {
                cluster[id] = decay * cluster[id] + (1.0 - decay) * counts[id];
                for j in 0..d {
                    ema_sum[id * d + j] =
                        decay * ema_sum[id * d + j] + (1.0 - decay) * sums[id * d + j];
                }
                if cluster[id] > 1e-3 {
                    for j in 0..d {
                        codebook[id * d + j] = ema_sum[id * d + j] / cluster[id];
                    }
                }
            }
            model
                .store
                .set("vq.cluster_size", &Tensor::from_slice(&cluster, k, &device)?)?;
            model
                .store
                .set("vq.ema_sum", &Tensor::from_slice(&ema_sum, (k, d), &device)?)?;
            model
                .store
                .set("vq.codebook", &Tensor::from_slice(&codebook, (k, d), &device)?)?;
            last_z_cells = z_cells;
        }

        // Dead-code bookkeeping: re-seed codes unused for too many
        // consecutive epochs from random encoder outputs of the last
        // batch, so the codebook cannot silently collapse.
        let mut unused: Vec<f64> = model
            .store
            .tensor("vq.epochs_unused")
            .unwrap()
            .to_vec1()?;
        let mut codebook: Vec<f64> = model.codebook().flatten_all()?.to_vec1()?;
        let mut cluster: Vec<f64> = model.store.tensor("vq.cluster_size").unwrap().to_vec1()?;
        let mut ema_sum: Vec<f64> = model
            .store
            .tensor("vq.ema_sum")
            .unwrap()
            .flatten_all()?
            .to_vec1()?;
        let n_cells = last_z_cells.len() / d.max(1);
        let mut reseed_rng = {
            use rand::SeedableRng;
            rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(
                config.seed,
                &format!("stage1-reseed-{epoch}"),
            ))
        };
        for id in 0..k {
            if used_this_epoch[id] {
                unused[id] = 0.0;
            } else {
                unused[id] += 1.0;
                if unused[id] >= config.tokenizer.dead_code_epochs as f64 && n_cells > 0 {
                    use rand::Rng;
                    let cell = reseed_rng.random_range(0..n_cells);
                    for j in 0..d {
                        codebook[id * d + j] = last_z_cells[cell * d + j];
                        ema_sum[id * d + j] = codebook[id * d + j];
                    }
                    cluster[id] = 1.0;
                    unused[id] = 0.0;
                }
            }
        }
        model
            .store
            .set("vq.epochs_unused", &Tensor::from_slice(&unused, k, &device)?)?;
        model
            .store
            .set("vq.codebook", &Tensor::from_slice(&codebook, (k, d), &device)?)?;
        model
            .store
            .set("vq.cluster_size", &Tensor::from_slice(&cluster, k, &device)?)?;
        model
            .store
            .set("vq.ema_sum", &Tensor::from_slice(&ema_sum, (k, d), &device)?)?;

        // Held-out reconstruction loss (no commitment term).
        let holdout_loss = if holdout_idx.is_empty() {
            epoch_loss / batches.max(1.0)
        } else {
            let spec = select(&spec_all, &holdout_idx)?;
            let x = select(&x_all, &holdout_idx)?;
            let (recon, _) = recon_loss(&model, &spec, &x)?;
            recon.to_scalar()?
        };
        log.push(Stage1Epoch {
            epoch,
            train_loss: epoch_loss / batches.max(1.0),
            holdout_loss,
            codes_used: used_this_epoch.iter().filter(|&&u| u).count(),
        });
        if let Some(ckpt) = ckpt.as_deref_mut() {
            ckpt.save_stage1(&model.store, epoch + 1)?;
        }
    }
    Ok((model, log))
}
